use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use super::{MsgError, OffsetKind, Scalar, Slot, TypeHandle, TypeRegistry, SEQUENCE_HEADER_SIZE};
use crate::arena::Arena;

/// A message living in the arena. Owns its root block and every payload
/// block; dropping the instance returns them to the arena.
pub struct MessageInstance {
    arena: Arc<Arena>,
    ty: TypeHandle,
    root: u32,
    blocks: Vec<u32>,
}

impl fmt::Debug for MessageInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MessageInstance")
            .field("ty", &self.ty)
            .field("root", &format_args!("{:#x}", self.root))
            .field("blocks", &self.blocks.len())
            .finish()
    }
}

impl Drop for MessageInstance {
    fn drop(&mut self) {
        for &b in &self.blocks {
            let _ = self.arena.free(b);
        }
    }
}

impl MessageInstance {
    pub(crate) fn empty(arena: Arc<Arena>, ty: TypeHandle) -> Self {
        MessageInstance { arena, ty, root: 0, blocks: Vec::new() }
    }

    pub(crate) fn alloc_block(&mut self, len: u32) -> Result<u32, MsgError> {
        // zero-sized types still get a distinct root address
        let addr = self.arena.alloc(len.max(4))?;
        self.blocks.push(addr);
        Ok(addr)
    }

    pub(crate) fn set_root(&mut self, root: u32) {
        self.root = root;
    }

    pub fn ty(&self) -> TypeHandle {
        self.ty
    }

    /// 4-byte aligned arena address of the message struct.
    pub fn root(&self) -> u32 {
        self.root
    }

    /// Every arena block owned by this instance, root first.
    pub fn blocks(&self) -> &[u32] {
        &self.blocks
    }

    pub fn arena(&self) -> &Arc<Arena> {
        &self.arena
    }

    /// True if `addr` falls inside one of this instance's blocks.
    pub fn owns_address(&self, addr: u32) -> bool {
        self.blocks.iter().any(|&b| {
            let len = self.arena.block_len(b).unwrap_or(0);
            addr >= b && addr < b + len
        })
    }
}

fn read_scalar_word(arena: &Arena, addr: u32, s: Scalar) -> Result<u32, MsgError> {
    // transactions are word-aligned; narrow fields are masked out of their word
    let word_addr = addr & !3;
    let shift = (addr - word_addr) * 8;
    let word = arena.read_u32(word_addr)?;
    Ok(match s {
        Scalar::U8 => (word >> shift) & 0xff,
        Scalar::U16 => (word >> shift) & 0xffff,
        _ => word,
    })
}

fn write_scalar_word(arena: &Arena, addr: u32, s: Scalar, value: u32) -> Result<(), MsgError> {
    let word_addr = addr & !3;
    let shift = (addr - word_addr) * 8;
    let word = match s {
        Scalar::U8 | Scalar::U16 => {
            let mask = if s == Scalar::U8 { 0xffu32 } else { 0xffff } << shift;
            let old = arena.read_u32(word_addr)?;
            (old & !mask) | ((value << shift) & mask)
        }
        _ => value,
    };
    arena.write_u32(word_addr, word)?;
    Ok(())
}

impl TypeRegistry {
    /// Allocates a message with its root block and one payload block per
    /// sequence named in `capacities` (dotted path to the sequence field).
    /// Scalars are zero, every header reads `{addr, 0, capacity}`, and
    /// sequences without a requested capacity stay `{0, 0, 0}`.
    pub fn alloc_message(
        &self,
        arena: &Arc<Arena>,
        ty: TypeHandle,
        capacities: &BTreeMap<String, u32>,
    ) -> Result<MessageInstance, MsgError> {
        let layout = self.layout(ty)?;
        let mut inst = MessageInstance::empty(arena.clone(), ty);
        let root = inst.alloc_block(layout.size)?;
        inst.set_root(root);
        for (path, &cap) in capacities {
            let (off, elem) = self.sequence_at(ty, path)?;
            if cap == 0 {
                continue;
            }
            let bytes = cap as u64 * self.stride(&elem) as u64;
            if bytes > arena.size() as u64 {
                return Err(MsgError::Arena(crate::arena::ArenaError::OutOfMemory { requested: bytes }));
            }
            let block = inst.alloc_block(bytes as u32)?;
            let mut hdr = [0u8; 12];
            hdr[0..4].copy_from_slice(&block.to_le_bytes());
            hdr[8..12].copy_from_slice(&cap.to_le_bytes());
            arena.mem_write(root + off, &hdr)?;
        }
        Ok(inst)
    }

    /// Convenience for `alloc_message` with `(path, capacity)` pairs.
    pub fn alloc_with(
        &self,
        arena: &Arc<Arena>,
        ty: TypeHandle,
        capacities: &[(&str, u32)],
    ) -> Result<MessageInstance, MsgError> {
        let caps = capacities.iter().map(|(p, c)| (p.to_string(), *c)).collect();
        self.alloc_message(arena, ty, &caps)
    }

    fn scalar_at(&self, inst: &MessageInstance, path: &str) -> Result<(u32, Scalar), MsgError> {
        match self.resolve_path(inst.ty(), path)? {
            (off, OffsetKind::Scalar(s)) => Ok((inst.root() + off, s)),
            (off, OffsetKind::SequenceAddress | OffsetKind::SequenceSize | OffsetKind::SequenceCapacity) => {
                Ok((inst.root() + off, Scalar::U32))
            }
            _ => Err(MsgError::NotAScalar(path.into())),
        }
    }

    /// Reads any inline scalar (or sequence header word) zero-extended to 32
    /// bits. `f32` comes back as its bit pattern.
    pub fn read_word(&self, inst: &MessageInstance, path: &str) -> Result<u32, MsgError> {
        let (addr, s) = self.scalar_at(inst, path)?;
        read_scalar_word(inst.arena(), addr, s)
    }

    /// Writes an inline scalar, truncating `value` to the field width.
    pub fn write_word(&self, inst: &MessageInstance, path: &str, value: u32) -> Result<(), MsgError> {
        let (addr, s) = self.scalar_at(inst, path)?;
        write_scalar_word(inst.arena(), addr, s, value)
    }

    /// Raw element bytes of a sequence (`size * stride` bytes).
    pub fn read_sequence(&self, inst: &MessageInstance, path: &str) -> Result<Vec<u8>, MsgError> {
        let (off, elem) = self.sequence_at(inst.ty(), path)?;
        let arena = inst.arena();
        let hdr = arena.mem_read(inst.root() + off, SEQUENCE_HEADER_SIZE)?;
        let addr = u32::from_le_bytes(hdr[0..4].try_into().unwrap());
        let size = u32::from_le_bytes(hdr[4..8].try_into().unwrap());
        let len = size as u64 * self.stride(&elem) as u64;
        if len == 0 {
            return Ok(Vec::new());
        }
        Ok(arena.mem_read(addr, len as u32)?)
    }

    /// Copies raw element bytes into a pre-allocated sequence and sets its
    /// size. Fails if the data does not fit the capacity.
    pub fn write_sequence(&self, inst: &MessageInstance, path: &str, bytes: &[u8]) -> Result<(), MsgError> {
        let (off, elem) = self.sequence_at(inst.ty(), path)?;
        let stride = self.stride(&elem);
        if stride == 0 || !(bytes.len() as u64).is_multiple_of(stride as u64) {
            return Err(MsgError::Malformed(format!("{} bytes is not a whole number of elements", bytes.len())));
        }
        let count = (bytes.len() as u64 / stride as u64) as u32;
        let arena = inst.arena();
        let hdr = arena.mem_read(inst.root() + off, SEQUENCE_HEADER_SIZE)?;
        let addr = u32::from_le_bytes(hdr[0..4].try_into().unwrap());
        let cap = u32::from_le_bytes(hdr[8..12].try_into().unwrap());
        if count > cap {
            return Err(MsgError::CapacityExceeded { path: path.into(), len: count, capacity: cap });
        }
        if !bytes.is_empty() {
            arena.mem_write(addr, bytes)?;
        }
        arena.write_u32(inst.root() + off + 4, count)?;
        Ok(())
    }

    /// Element slot of the sequence at `path`, for callers decoding payloads.
    pub fn sequence_element(&self, ty: TypeHandle, path: &str) -> Result<Slot, MsgError> {
        self.sequence_at(ty, path).map(|(_, s)| s)
    }
}

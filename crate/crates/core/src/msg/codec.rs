//! Wire encoding: little-endian, depth-first field order, sequences as a u32
//! element count followed by the elements, no padding.

use std::sync::Arc;

use super::{MessageInstance, MsgError, Slot, TypeHandle, TypeRegistry, SEQUENCE_HEADER_SIZE};
use crate::arena::Arena;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MsgError> {
        if self.bytes.len() - self.pos < n {
            return Err(MsgError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, MsgError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b[..4].try_into().unwrap())
}

impl TypeRegistry {
    pub fn serialize(&self, inst: &MessageInstance) -> Result<Vec<u8>, MsgError> {
        let ty = self.get(inst.ty())?;
        let size = ty.layout.size;
        let inline = if size > 0 { inst.arena().mem_read(inst.root(), size)? } else { Vec::new() };
        let mut out = Vec::with_capacity(size as usize);
        self.encode_slot(inst.arena(), &Slot::Nested(inst.ty()), &inline, &mut out)?;
        if out.len() > self.max_message_size() {
            return Err(MsgError::TooLarge { size: out.len() as u64, max: self.max_message_size() });
        }
        Ok(out)
    }

    fn encode_slot(&self, arena: &Arena, slot: &Slot, inline: &[u8], out: &mut Vec<u8>) -> Result<(), MsgError> {
        match slot {
            Slot::Scalar(s) => out.extend_from_slice(&inline[..s.size() as usize]),
            Slot::Nested(h) => {
                let ty = self.get(*h)?;
                for f in &ty.layout.fields {
                    self.encode_slot(arena, &f.slot, &inline[f.offset as usize..], out)?;
                }
            }
            Slot::Sequence(elem) => {
                let addr = le_u32(&inline[0..]);
                let size = le_u32(&inline[4..]);
                let cap = le_u32(&inline[8..]);
                if size > cap || (size > 0 && addr == 0) {
                    return Err(MsgError::Malformed(format!(
                        "sequence header addr={addr:#x} size={size} capacity={cap}"
                    )));
                }
                out.extend_from_slice(&size.to_le_bytes());
                if size == 0 {
                    return Ok(());
                }
                let stride = self.stride(elem) as u64;
                let total = size as u64 * stride;
                let max = self.max_message_size();
                if out.len() as u64 + total > max as u64 || size as u64 > max as u64 {
                    return Err(MsgError::TooLarge { size: out.len() as u64 + total, max });
                }
                if total == 0 {
                    for _ in 0..size {
                        self.encode_slot(arena, elem, &[], out)?;
                    }
                    return Ok(());
                }
                let payload = arena.mem_read(addr, total as u32)?;
                if let Slot::Scalar(_) = **elem {
                    out.extend_from_slice(&payload);
                } else {
                    for chunk in payload.chunks_exact(stride as usize) {
                        self.encode_slot(arena, elem, chunk, out)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Decodes `bytes` into a freshly allocated instance. Sequences get
    /// `capacity == size`.
    pub fn deserialize(&self, arena: &Arc<Arena>, ty: TypeHandle, bytes: &[u8]) -> Result<MessageInstance, MsgError> {
        let max = self.max_message_size();
        if bytes.len() > max {
            return Err(MsgError::TooLarge { size: bytes.len() as u64, max });
        }
        let size = self.get(ty)?.layout.size;
        let mut inst = MessageInstance::empty(arena.clone(), ty);
        let root = inst.alloc_block(size)?;
        inst.set_root(root);
        let mut inline = vec![0u8; size as usize];
        let mut rd = Reader { bytes, pos: 0 };
        self.decode_slot(arena, &Slot::Nested(ty), &mut rd, &mut inline, &mut inst)?;
        if rd.remaining() != 0 {
            return Err(MsgError::Malformed(format!("{} trailing bytes", rd.remaining())));
        }
        if size > 0 {
            arena.mem_write(root, &inline)?;
        }
        Ok(inst)
    }

    fn min_wire_size(&self, slot: &Slot) -> u64 {
        match slot {
            Slot::Scalar(s) => s.size() as u64,
            Slot::Sequence(_) => 4,
            Slot::Nested(h) => {
                self.get(*h).map(|t| t.layout.fields.iter().map(|f| self.min_wire_size(&f.slot)).sum()).unwrap_or(0)
            }
        }
    }

    fn decode_slot(
        &self,
        arena: &Arena,
        slot: &Slot,
        rd: &mut Reader<'_>,
        inline: &mut [u8],
        inst: &mut MessageInstance,
    ) -> Result<(), MsgError> {
        match slot {
            Slot::Scalar(s) => {
                let n = s.size() as usize;
                inline[..n].copy_from_slice(rd.take(n)?);
            }
            Slot::Nested(h) => {
                let ty = self.get(*h)?;
                for f in &ty.layout.fields {
                    self.decode_slot(arena, &f.slot, rd, &mut inline[f.offset as usize..], inst)?;
                }
            }
            Slot::Sequence(elem) => {
                let count = rd.u32()?;
                inline[..SEQUENCE_HEADER_SIZE as usize].fill(0);
                if count == 0 {
                    return Ok(());
                }
                let max = self.max_message_size() as u64;
                let min_wire = self.min_wire_size(elem);
                if min_wire > 0 && count as u64 * min_wire > rd.remaining() as u64 {
                    return Err(MsgError::Truncated);
                }
                let stride = self.stride(elem) as u64;
                let total = count as u64 * stride;
                if total > max || count as u64 > max {
                    return Err(MsgError::TooLarge { size: total, max: max as usize });
                }
                let block = inst.alloc_block(total as u32)?;
                if total > 0 {
                    let mut payload = vec![0u8; total as usize];
                    if let Slot::Scalar(_) = **elem {
                        payload.copy_from_slice(rd.take(total as usize)?);
                    } else {
                        for chunk in payload.chunks_exact_mut(stride as usize) {
                            self.decode_slot(arena, elem, rd, chunk, inst)?;
                        }
                    }
                    arena.mem_write(block, &payload)?;
                } else {
                    for _ in 0..count {
                        self.decode_slot(arena, elem, rd, &mut [], inst)?;
                    }
                }
                inline[0..4].copy_from_slice(&block.to_le_bytes());
                inline[4..8].copy_from_slice(&count.to_le_bytes());
                inline[8..12].copy_from_slice(&count.to_le_bytes());
            }
        }
        Ok(())
    }

    /// Deep copy into fresh arena blocks.
    pub fn copy_message(&self, arena: &Arc<Arena>, inst: &MessageInstance) -> Result<MessageInstance, MsgError> {
        let bytes = self.serialize(inst)?;
        self.deserialize(arena, inst.ty(), &bytes)
    }
}

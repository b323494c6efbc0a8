//! Simulated 32-bit application address space.
//!
//! Every node of a process (software or hardware mapped) shares one [`Arena`].
//! Hardware threads only ever touch it through word-aligned read/write
//! transactions, the same way a MEMIF port would. Address 0 is null and the
//! first [`NULL_GUARD`] bytes are never handed out or accessible.

use std::collections::{BTreeMap, HashSet};
use std::sync::Mutex;

use thiserror::Error;

/// Lowest valid address. Any transaction touching `[0, NULL_GUARD)` fails.
pub const NULL_GUARD: u32 = 16;

/// 64 MiB: two 6 MiB messages in flight plus generous slack.
pub const DEFAULT_ARENA_SIZE: u32 = 64 << 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ArenaError {
    #[error("arena size {0} is not a power of two in [32, 2^31]")]
    InvalidSize(u64),
    #[error("zero-length allocation or transaction")]
    ZeroLength,
    #[error("out of arena memory (requested {requested} bytes)")]
    OutOfMemory { requested: u64 },
    #[error("double free of block at {0:#x}")]
    DoubleFree(u32),
    #[error("free of unknown address {0:#x}")]
    UnknownAddress(u32),
    #[error("unaligned transaction address {0:#x}")]
    Unaligned(u32),
    #[error("transaction [{addr:#x}, +{len}) touches the null guard")]
    NullAccess { addr: u32, len: u64 },
    #[error("transaction [{addr:#x}, +{len}) exceeds the arena")]
    OutOfBounds { addr: u32, len: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Read,
    Write,
}

/// Usage counters, mostly useful in tests and leak checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ArenaStats {
    pub live_blocks: usize,
    pub live_bytes: u64,
    pub free_bytes: u64,
}

#[derive(Debug)]
struct Inner {
    mem: Vec<u8>,
    /// start -> length, coalesced
    free: BTreeMap<u32, u32>,
    /// start -> length (rounded to 4)
    live: BTreeMap<u32, u32>,
    /// freed and not since reallocated; distinguishes double free from garbage
    freed: HashSet<u32>,
}

/// Thread-safe, linearizable byte arena with a first-fit free list.
#[derive(Debug)]
pub struct Arena {
    size: u32,
    inner: Mutex<Inner>,
}

impl Arena {
    pub fn new(size: u32) -> Result<Self, ArenaError> {
        if !size.is_power_of_two() || !(32..=(1 << 31)).contains(&size) {
            return Err(ArenaError::InvalidSize(size as u64));
        }
        let mut free = BTreeMap::new();
        free.insert(NULL_GUARD, size - NULL_GUARD);
        Ok(Arena {
            size,
            inner: Mutex::new(Inner {
                mem: vec![0; size as usize],
                free,
                live: BTreeMap::new(),
                freed: HashSet::new(),
            }),
        })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    /// Allocates a zero-initialized, 4-byte aligned block.
    pub fn alloc(&self, length: u32) -> Result<u32, ArenaError> {
        if length == 0 {
            return Err(ArenaError::ZeroLength);
        }
        let rounded = (length as u64 + 3) & !3;
        if rounded > u32::MAX as u64 {
            return Err(ArenaError::OutOfMemory { requested: length as u64 });
        }
        let rounded = rounded as u32;
        let mut inner = self.inner.lock().unwrap();
        let (start, avail) = inner
            .free
            .iter()
            .find(|(_, &len)| len >= rounded)
            .map(|(&s, &l)| (s, l))
            .ok_or(ArenaError::OutOfMemory { requested: length as u64 })?;
        inner.free.remove(&start);
        if avail > rounded {
            inner.free.insert(start + rounded, avail - rounded);
        }
        inner.live.insert(start, rounded);
        inner.freed.remove(&start);
        inner.mem[start as usize..(start + rounded) as usize].fill(0);
        Ok(start)
    }

    pub fn free(&self, addr: u32) -> Result<(), ArenaError> {
        let mut inner = self.inner.lock().unwrap();
        let Some(len) = inner.live.remove(&addr) else {
            return Err(if inner.freed.contains(&addr) {
                ArenaError::DoubleFree(addr)
            } else {
                ArenaError::UnknownAddress(addr)
            });
        };
        inner.freed.insert(addr);

        let mut start = addr;
        let mut len = len;
        if let Some((&prev, &plen)) = inner.free.range(..addr).next_back() {
            if prev + plen == addr {
                inner.free.remove(&prev);
                start = prev;
                len += plen;
            }
        }
        if let Some(nlen) = inner.free.remove(&(start + len)) {
            len += nlen;
        }
        inner.free.insert(start, len);
        Ok(())
    }

    fn check(&self, addr: u32, len: u64) -> Result<(), ArenaError> {
        if len == 0 {
            return Err(ArenaError::ZeroLength);
        }
        if addr < NULL_GUARD {
            return Err(ArenaError::NullAccess { addr, len });
        }
        if !addr.is_multiple_of(4) {
            return Err(ArenaError::Unaligned(addr));
        }
        if addr as u64 + len > self.size as u64 {
            return Err(ArenaError::OutOfBounds { addr, len });
        }
        Ok(())
    }

    /// MEMIF read transaction.
    pub fn mem_read(&self, addr: u32, len: u32) -> Result<Vec<u8>, ArenaError> {
        self.check(addr, len as u64)?;
        let inner = self.inner.lock().unwrap();
        Ok(inner.mem[addr as usize..addr as usize + len as usize].to_vec())
    }

    /// Reads into a caller-provided buffer; the length is the buffer's.
    pub fn mem_read_into(&self, addr: u32, buf: &mut [u8]) -> Result<(), ArenaError> {
        self.check(addr, buf.len() as u64)?;
        let inner = self.inner.lock().unwrap();
        buf.copy_from_slice(&inner.mem[addr as usize..addr as usize + buf.len()]);
        Ok(())
    }

    /// MEMIF write transaction. Atomic with respect to every other transaction.
    pub fn mem_write(&self, addr: u32, data: &[u8]) -> Result<(), ArenaError> {
        self.check(addr, data.len() as u64)?;
        let mut inner = self.inner.lock().unwrap();
        inner.mem[addr as usize..addr as usize + data.len()].copy_from_slice(data);
        Ok(())
    }

    pub fn read_u32(&self, addr: u32) -> Result<u32, ArenaError> {
        let mut b = [0u8; 4];
        self.mem_read_into(addr, &mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn write_u32(&self, addr: u32, value: u32) -> Result<(), ArenaError> {
        self.mem_write(addr, &value.to_le_bytes())
    }

    /// Live blocks as `(address, rounded length)`, in address order.
    pub fn live_blocks(&self) -> Vec<(u32, u32)> {
        let inner = self.inner.lock().unwrap();
        inner.live.iter().map(|(&a, &l)| (a, l)).collect()
    }

    /// Rounded length of the live block starting at `addr`.
    pub fn block_len(&self, addr: u32) -> Option<u32> {
        self.inner.lock().unwrap().live.get(&addr).copied()
    }

    pub fn stats(&self) -> ArenaStats {
        let inner = self.inner.lock().unwrap();
        ArenaStats {
            live_blocks: inner.live.len(),
            live_bytes: inner.live.values().map(|&l| l as u64).sum(),
            free_bytes: inner.free.values().map(|&l| l as u64).sum(),
        }
    }
}

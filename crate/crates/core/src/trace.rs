//! Optional event log used to check the ordering of a hardware thread's
//! middleware interactions.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    /// Last word of a command frame entered the thread-to-delegate FIFO.
    OsifCommand {
        thread: u32,
        opcode: u32,
    },
    /// Delegate read a complete frame and is about to call the middleware.
    DelegateDispatch {
        thread: u32,
        opcode: u32,
    },
    /// Middleware finished writing a delivered message into the arena.
    ArenaStore {
        name: String,
        addr: u32,
    },
    /// Middleware call returned to the delegate.
    DelegateUnblock {
        thread: u32,
        opcode: u32,
        status: u32,
    },
    /// Hardware thread received the complete response frame.
    OsifResponse {
        thread: u32,
        words: Vec<u32>,
    },
    MemRead {
        thread: u32,
        addr: u32,
        len: u32,
    },
    MemWrite {
        thread: u32,
        addr: u32,
        len: u32,
    },
}

#[derive(Debug, Default)]
pub struct Trace {
    enabled: AtomicBool,
    events: Mutex<Vec<Event>>,
}

impl Trace {
    pub fn new(enabled: bool) -> Self {
        Trace { enabled: AtomicBool::new(enabled), events: Mutex::new(Vec::new()) }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled.load(Ordering::Relaxed)
    }

    pub fn set_enabled(&self, on: bool) {
        self.enabled.store(on, Ordering::Relaxed);
    }

    pub fn record(&self, ev: Event) {
        if self.is_enabled() {
            self.events.lock().unwrap().push(ev);
        }
    }

    /// Records lazily so disabled tracing costs no allocation.
    pub fn record_with(&self, f: impl FnOnce() -> Event) {
        if self.is_enabled() {
            self.events.lock().unwrap().push(f());
        }
    }

    pub fn take(&self) -> Vec<Event> {
        std::mem::take(&mut *self.events.lock().unwrap())
    }

    pub fn snapshot(&self) -> Vec<Event> {
        self.events.lock().unwrap().clone()
    }
}

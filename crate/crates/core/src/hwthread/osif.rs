use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, Sender};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::dispatch::Dispatcher;
use super::{command_len, response_len, Fault, ThreadPort};
use crate::arena::Arena;
use crate::trace::{Event, Trace};

/// Words each OSIF FIFO holds before the sender blocks.
pub const OSIF_FIFO_DEPTH: usize = 16;

/// Random sleeps before FIFO writes, to shake out ordering assumptions.
#[derive(Debug)]
pub(crate) struct Jitter {
    rng: StdRng,
    max_us: u64,
}

impl Jitter {
    pub(crate) fn new(seed: u64, max_us: u64) -> Self {
        Jitter { rng: StdRng::seed_from_u64(seed), max_us }
    }

    fn pause(&mut self) {
        match self.rng.gen_range(0..4) {
            0 => std::thread::sleep(Duration::from_micros(self.rng.gen_range(0..=self.max_us))),
            1 => std::thread::yield_now(),
            _ => {}
        }
    }
}

/// Hardware-thread side of an OSIF.
#[derive(Debug)]
pub struct OsifThreadEnd {
    pub tx: Sender<u32>,
    pub rx: Receiver<u32>,
}

/// Delegate side of an OSIF.
#[derive(Debug)]
pub struct OsifDelegateEnd {
    pub rx: Receiver<u32>,
    pub tx: Sender<u32>,
}

pub fn osif_pair() -> (OsifThreadEnd, OsifDelegateEnd) {
    let (to_delegate, from_thread) = bounded(OSIF_FIFO_DEPTH);
    let (to_thread, from_delegate) = bounded(OSIF_FIFO_DEPTH);
    (OsifThreadEnd { tx: to_delegate, rx: from_delegate }, OsifDelegateEnd { rx: from_thread, tx: to_thread })
}

impl OsifDelegateEnd {
    /// Blocks for one complete command frame; `None` once the thread side is
    /// gone.
    pub fn read_frame(&self) -> Option<Vec<u32>> {
        let op = self.rx.recv().ok()?;
        let mut frame = Vec::with_capacity(command_len(op));
        frame.push(op);
        for _ in 1..command_len(op) {
            frame.push(self.rx.recv().ok()?);
        }
        Some(frame)
    }

    pub fn write_frame(&self, words: &[u32]) -> bool {
        words.iter().all(|&w| self.tx.send(w).is_ok())
    }
}

/// Serves one hardware thread until its OSIF is dropped.
pub(crate) fn delegate_loop(
    thread: u32,
    end: OsifDelegateEnd,
    mut dispatcher: Dispatcher,
    trace: Arc<Trace>,
    mut jitter: Option<Jitter>,
) {
    while let Some(frame) = end.read_frame() {
        let opcode = frame[0];
        trace.record(Event::DelegateDispatch { thread, opcode });
        let resp = dispatcher.dispatch(&frame);
        trace.record(Event::DelegateUnblock { thread, opcode, status: resp[0] });
        if let Some(j) = jitter.as_mut() {
            j.pause();
        }
        if !end.write_frame(&resp) {
            break;
        }
    }
}

/// Port of a hardware thread: OSIF words plus MEMIF transactions. Enforces
/// the one-outstanding-command rule; a violation halts the port for good.
#[derive(Debug)]
pub struct HwPort {
    thread: u32,
    osif: OsifThreadEnd,
    arena: Arc<Arena>,
    trace: Arc<Trace>,
    outstanding: Option<u32>,
    halted: bool,
    violation: Option<Fault>,
    jitter: Option<Jitter>,
}

impl HwPort {
    pub fn new(thread: u32, osif: OsifThreadEnd, arena: Arc<Arena>, trace: Arc<Trace>) -> Self {
        HwPort { thread, osif, arena, trace, outstanding: None, halted: false, violation: None, jitter: None }
    }

    pub(crate) fn with_jitter(mut self, jitter: Option<Jitter>) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    /// The protocol violation that halted this port, if any.
    pub fn violation(&self) -> Option<&Fault> {
        self.violation.as_ref()
    }

    fn halt(&mut self, what: &str) -> Fault {
        self.halted = true;
        let f = Fault::ProtocolViolation(what.into());
        self.violation = Some(f.clone());
        f
    }

    fn live(&self) -> Result<(), Fault> {
        if self.halted {
            Err(Fault::Halted)
        } else {
            Ok(())
        }
    }
}

fn check_frame(frame: &[u32]) -> Result<(), &'static str> {
    match frame.first() {
        None => Err("empty command frame"),
        Some(&op) if frame.len() != command_len(op) => Err("command frame length does not match opcode"),
        Some(_) => Ok(()),
    }
}

impl ThreadPort for HwPort {
    fn emit(&mut self, frame: &[u32]) -> Result<(), Fault> {
        self.live()?;
        if self.outstanding.is_some() {
            return Err(self.halt("second command issued while one is outstanding"));
        }
        if let Err(e) = check_frame(frame) {
            return Err(self.halt(e));
        }
        let last = frame.len() - 1;
        for (i, &w) in frame.iter().enumerate() {
            if let Some(j) = self.jitter.as_mut() {
                j.pause();
            }
            if i == last {
                self.trace.record(Event::OsifCommand { thread: self.thread, opcode: frame[0] });
            }
            self.osif.tx.send(w).map_err(|_| Fault::Disconnected)?;
        }
        self.outstanding = Some(frame[0]);
        Ok(())
    }

    fn await_response(&mut self) -> Result<Vec<u32>, Fault> {
        self.live()?;
        let Some(op) = self.outstanding.take() else {
            return Err(self.halt("awaiting a response with no outstanding command"));
        };
        let mut words = Vec::with_capacity(response_len(op));
        for _ in 0..response_len(op) {
            words.push(self.osif.rx.recv().map_err(|_| Fault::Disconnected)?);
        }
        self.trace.record_with(|| Event::OsifResponse { thread: self.thread, words: words.clone() });
        Ok(words)
    }

    fn mem_read_into(&mut self, addr: u32, buf: &mut [u8]) -> Result<(), Fault> {
        self.live()?;
        self.arena.mem_read_into(addr, buf)?;
        self.trace.record(Event::MemRead { thread: self.thread, addr, len: buf.len() as u32 });
        Ok(())
    }

    fn mem_write(&mut self, addr: u32, data: &[u8]) -> Result<(), Fault> {
        self.live()?;
        self.arena.mem_write(addr, data)?;
        self.trace.record(Event::MemWrite { thread: self.thread, addr, len: data.len() as u32 });
        Ok(())
    }
}

/// Port of a software-mapped node: frames go straight to the dispatcher and
/// memory accesses straight to the arena.
pub struct SwPort {
    dispatcher: Dispatcher,
    arena: Arc<Arena>,
    pending: Option<Vec<u32>>,
    violation: Option<Fault>,
}

impl SwPort {
    pub(crate) fn new(dispatcher: Dispatcher, arena: Arc<Arena>) -> Self {
        SwPort { dispatcher, arena, pending: None, violation: None }
    }

    pub fn violation(&self) -> Option<&Fault> {
        self.violation.as_ref()
    }

    fn halt(&mut self, what: &str) -> Fault {
        let f = Fault::ProtocolViolation(what.into());
        self.violation = Some(f.clone());
        f
    }
}

impl ThreadPort for SwPort {
    fn emit(&mut self, frame: &[u32]) -> Result<(), Fault> {
        if self.violation.is_some() {
            return Err(Fault::Halted);
        }
        if self.pending.is_some() {
            return Err(self.halt("second command issued while one is outstanding"));
        }
        if let Err(e) = check_frame(frame) {
            return Err(self.halt(e));
        }
        self.pending = Some(frame.to_vec());
        Ok(())
    }

    fn await_response(&mut self) -> Result<Vec<u32>, Fault> {
        if self.violation.is_some() {
            return Err(Fault::Halted);
        }
        let Some(frame) = self.pending.take() else {
            return Err(self.halt("awaiting a response with no outstanding command"));
        };
        Ok(self.dispatcher.dispatch(&frame))
    }

    fn mem_read_into(&mut self, addr: u32, buf: &mut [u8]) -> Result<(), Fault> {
        Ok(self.arena.mem_read_into(addr, buf)?)
    }

    fn mem_write(&mut self, addr: u32, data: &[u8]) -> Result<(), Fault> {
        Ok(self.arena.mem_write(addr, data)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn port() -> (HwPort, OsifDelegateEnd) {
        let (t, d) = osif_pair();
        let arena = Arc::new(Arena::new(1 << 16).unwrap());
        (HwPort::new(0, t, arena, Arc::new(Trace::default())), d)
    }

    #[test]
    fn second_command_halts() {
        let (mut p, d) = port();
        p.emit(&[super::super::opcode::SUBSCRIBER_TAKE, 0]).unwrap();
        assert!(matches!(p.emit(&[super::super::opcode::SUBSCRIBER_TAKE, 0]), Err(Fault::ProtocolViolation(_))));
        assert!(p.is_halted());
        assert_eq!(p.mem_read(16, 4), Err(Fault::Halted));
        // only the first frame reached the delegate
        assert_eq!(d.read_frame().unwrap(), vec![1, 0]);
        assert!(d.rx.try_recv().is_err());
    }

    #[test]
    fn await_without_command_halts() {
        let (mut p, _d) = port();
        assert!(matches!(p.await_response(), Err(Fault::ProtocolViolation(_))));
        assert_eq!(p.emit(&[1, 0]), Err(Fault::Halted));
    }

    #[test]
    fn wrong_frame_length_halts() {
        let (mut p, _d) = port();
        assert!(matches!(p.emit(&[1, 0, 0]), Err(Fault::ProtocolViolation(_))));
    }

    #[test]
    fn disconnected_delegate() {
        let (mut p, d) = port();
        drop(d);
        assert_eq!(p.emit(&[1, 0]), Err(Fault::Disconnected));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Words arrive complete and in order across the bounded FIFO, with
        /// random pauses on both sides.
        #[test]
        fn fifo_integrity(words in proptest::collection::vec(any::<u32>(), 0..500), seed in any::<u64>()) {
            let (t, d) = osif_pair();
            let sent = words.clone();
            let h = std::thread::spawn(move || {
                let mut j = Jitter::new(seed, 20);
                for w in sent {
                    j.pause();
                    t.tx.send(w).unwrap();
                }
            });
            let mut j = Jitter::new(seed ^ 1, 20);
            let mut got = Vec::new();
            while let Ok(w) = d.rx.recv() {
                j.pause();
                got.push(w);
            }
            h.join().unwrap();
            prop_assert_eq!(got, words);
        }
    }
}

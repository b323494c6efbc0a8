//! Reconfigurable slots and thread lifecycle.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;

use super::dispatch::{BuildError, Dispatcher, ResourceSpec};
use super::osif::{delegate_loop, osif_pair, HwPort, Jitter, SwPort};
use super::{Behavior, Fault, ThreadContext};
use crate::middleware::{Graph, MwError, NodeKind};

pub type ThreadId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mapping {
    Software,
    Hardware { slot: u32 },
}

pub struct ThreadSpec {
    /// Node name in the graph.
    pub name: String,
    pub mapping: Mapping,
    /// Handle `i` is `resources[i]`.
    pub resources: Vec<(String, ResourceSpec)>,
    pub params: BTreeMap<String, String>,
    pub behavior: Box<dyn Behavior>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ThreadOutcome {
    Running,
    Finished,
    Faulted(Fault),
}

#[derive(Debug, Clone, Default)]
pub struct FabricOptions {
    pub slots: u32,
    /// (seed, max pause in µs) for random pauses on every OSIF write.
    pub jitter: Option<(u64, u64)>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FabricError {
    #[error("slot {0} is occupied")]
    SlotOccupied(u32),
    #[error("no slot {0}")]
    NoSuchSlot(u32),
    #[error("unknown endpoint {0:?}")]
    UnknownEndpoint(String),
    #[error(transparent)]
    Middleware(#[from] MwError),
    #[error("failed to spawn thread: {0}")]
    Spawn(String),
}

struct Running {
    name: String,
    mapping: Mapping,
    stop: Arc<AtomicBool>,
    outcome: Arc<Mutex<ThreadOutcome>>,
    handles: Vec<JoinHandle<()>>,
    node_times: Arc<Mutex<Vec<Duration>>>,
}

pub struct Fabric {
    graph: Graph,
    opts: FabricOptions,
    slots: Vec<Option<ThreadId>>,
    threads: BTreeMap<ThreadId, Running>,
    next: ThreadId,
}

/// A protocol violation faults the thread even if the behavior swallowed the
/// error.
fn finish(outcome: &Mutex<ThreadOutcome>, violation: Option<&Fault>, r: std::thread::Result<Result<(), Fault>>) {
    *outcome.lock().unwrap() = match (violation, r) {
        (Some(v), _) => ThreadOutcome::Faulted(v.clone()),
        (None, r) => match r {
            Ok(Ok(())) | Ok(Err(Fault::Shutdown)) => ThreadOutcome::Finished,
            Ok(Err(f)) => ThreadOutcome::Faulted(f),
            Err(_) => ThreadOutcome::Faulted(Fault::Behavior("behavior panicked".into())),
        },
    };
}

impl Fabric {
    pub fn new(graph: Graph, opts: FabricOptions) -> Self {
        Fabric { graph, slots: vec![None; opts.slots as usize], opts, threads: BTreeMap::new(), next: 0 }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn slot_count(&self) -> u32 {
        self.slots.len() as u32
    }

    pub fn slot_occupant(&self, slot: u32) -> Option<ThreadId> {
        self.slots.get(slot as usize).copied().flatten()
    }

    /// Creates the node and its endpoints, then spawns the thread (and, for a
    /// hardware mapping, its delegate).
    pub fn start(&mut self, spec: ThreadSpec) -> Result<ThreadId, FabricError> {
        let ThreadSpec { name, mapping, resources, params, mut behavior } = spec;
        if let Mapping::Hardware { slot } = mapping {
            match self.slots.get(slot as usize) {
                None => return Err(FabricError::NoSuchSlot(slot)),
                Some(Some(_)) => return Err(FabricError::SlotOccupied(slot)),
                Some(None) => {}
            }
        }
        let mut handles = HashMap::new();
        let mut parts = HashMap::new();
        for (i, (rname, rspec)) in resources.iter().enumerate() {
            handles.insert(rname.clone(), i as u32);
            if let ResourceSpec::Message(p) = rspec {
                parts.insert(rname.clone(), p.parts());
            }
        }
        let ctx = ThreadContext { handles, parts, registry: self.graph.registry().clone(), params };
        for r in behavior.resources(&ctx) {
            if !ctx.handles.contains_key(&r) {
                return Err(FabricError::UnknownEndpoint(r));
            }
        }
        let buffers = behavior.buffers(&ctx);

        let kind = match mapping {
            Mapping::Software => NodeKind::Software,
            Mapping::Hardware { .. } => NodeKind::Hardware,
        };
        let node = self.graph.create_node(&name, kind)?;
        let stop = node.stop_flag();
        let node_times = Arc::new(Mutex::new(Vec::new()));
        let dispatcher = Dispatcher::build(node, &resources, &buffers, node_times.clone()).map_err(|e| match e {
            BuildError::UnknownResource(r) => FabricError::UnknownEndpoint(r),
            BuildError::Middleware(m) => FabricError::Middleware(m),
        })?;

        let id = self.next;
        self.next += 1;
        let outcome = Arc::new(Mutex::new(ThreadOutcome::Running));
        let arena = self.graph.arena().clone();
        let trace = self.graph.trace().clone();
        let spawn = |label: String, f: Box<dyn FnOnce() + Send>| {
            std::thread::Builder::new().name(label).spawn(f).map_err(|e| FabricError::Spawn(e.to_string()))
        };
        let mut threads = Vec::new();
        match mapping {
            Mapping::Software => {
                let out = outcome.clone();
                threads.push(spawn(
                    format!("sw-{name}"),
                    Box::new(move || {
                        let mut port = SwPort::new(dispatcher, arena);
                        let r = catch_unwind(AssertUnwindSafe(|| behavior.run(&mut port, &ctx)));
                        finish(&out, port.violation(), r);
                    }),
                )?);
            }
            Mapping::Hardware { slot } => {
                let (thread_end, delegate_end) = osif_pair();
                let jitter = |salt: u64| self.opts.jitter.map(|(seed, max)| Jitter::new(seed ^ salt ^ id as u64, max));
                let (dj, tj) = (jitter(0x5a5a), jitter(0xa5a5));
                let dtrace = trace.clone();
                threads.push(spawn(
                    format!("delegate-{name}"),
                    Box::new(move || delegate_loop(id, delegate_end, dispatcher, dtrace, dj)),
                )?);
                let out = outcome.clone();
                threads.push(spawn(
                    format!("hw-{name}"),
                    Box::new(move || {
                        let mut port = HwPort::new(id, thread_end, arena, trace).with_jitter(tj);
                        let r = catch_unwind(AssertUnwindSafe(|| behavior.run(&mut port, &ctx)));
                        finish(&out, port.violation(), r);
                    }),
                )?);
                self.slots[slot as usize] = Some(id);
            }
        }
        log::debug!("started {name} as {mapping:?} (thread {id})");
        self.threads.insert(id, Running { name, mapping, stop, outcome, handles: threads, node_times });
        Ok(id)
    }

    pub fn thread_ids(&self) -> Vec<ThreadId> {
        self.threads.keys().copied().collect()
    }

    pub fn name_of(&self, id: ThreadId) -> Option<&str> {
        self.threads.get(&id).map(|r| r.name.as_str())
    }

    pub fn mapping_of(&self, id: ThreadId) -> Option<Mapping> {
        self.threads.get(&id).map(|r| r.mapping)
    }

    pub fn outcome(&self, id: ThreadId) -> Option<ThreadOutcome> {
        self.threads.get(&id).map(|r| r.outcome.lock().unwrap().clone())
    }

    /// Time from each take returning to the next publish/response, per
    /// processed message.
    pub fn node_times(&self, id: ThreadId) -> Vec<Duration> {
        self.threads.get(&id).map(|r| r.node_times.lock().unwrap().clone()).unwrap_or_default()
    }

    /// Blocks until the thread ends on its own.
    pub fn join(&mut self, id: ThreadId) -> Option<ThreadOutcome> {
        let r = self.threads.remove(&id)?;
        Some(self.reap(id, r))
    }

    /// Cancels the thread's blocking calls, joins it and frees its slot.
    pub fn stop(&mut self, id: ThreadId) -> Option<ThreadOutcome> {
        let r = self.threads.remove(&id)?;
        r.stop.store(true, Ordering::SeqCst);
        self.graph.wake();
        Some(self.reap(id, r))
    }

    fn reap(&mut self, id: ThreadId, r: Running) -> ThreadOutcome {
        for h in r.handles {
            let _ = h.join();
        }
        for s in self.slots.iter_mut() {
            if *s == Some(id) {
                *s = None;
            }
        }
        let out = r.outcome.lock().unwrap().clone();
        out
    }

    pub fn stop_all(&mut self) -> Vec<(ThreadId, ThreadOutcome)> {
        for r in self.threads.values() {
            r.stop.store(true, Ordering::SeqCst);
        }
        self.graph.wake();
        let ids = self.thread_ids();
        ids.into_iter().filter_map(|id| self.stop(id).map(|o| (id, o))).collect()
    }
}

impl Drop for Fabric {
    fn drop(&mut self) {
        self.stop_all();
    }
}

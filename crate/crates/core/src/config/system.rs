//! Bringing a configuration to life: types, arena, graph, transport and
//! threads.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use super::{ConfigError, Decl, ProjectConfig};
use crate::apps::{behavior_by_name, register_builtin_types};
use crate::arena::{Arena, ArenaError};
use crate::hwthread::{
    Fabric, FabricError, FabricOptions, Mapping, MessageParts, ResourceSpec, ThreadId, ThreadOutcome, ThreadSpec,
};
use crate::middleware::{Graph, DEFAULT_QUEUE_DEPTH};
use crate::msg::{MsgError, MsgKind, TypeHandle, TypeRegistry};
use crate::trace::Trace;
use crate::transport::{Transport, TransportError};

#[derive(Debug, Error)]
pub enum SystemError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("message types: {0}")]
    Msg(#[from] MsgError),
    #[error("arena: {0}")]
    Arena(#[from] ArenaError),
    #[error("thread {thread}: unknown message type {package}/{ty} ({kind})")]
    UnknownType { thread: String, package: String, ty: String, kind: &'static str },
    #[error("thread {thread}: unknown behavior {behavior:?}")]
    UnknownBehavior { thread: String, behavior: String },
    #[error("thread {thread}: {source}")]
    Fabric { thread: String, source: FabricError },
    #[error(transparent)]
    Transport(#[from] TransportError),
}

#[derive(Debug, Clone, Default)]
pub struct SystemOptions {
    /// Record protocol events into the graph's trace.
    pub trace: bool,
    /// (seed, max µs) random pauses on OSIF writes.
    pub jitter: Option<(u64, u64)>,
}

/// Registry with the builtin types plus the configuration's own definitions.
pub fn build_registry(cfg: &ProjectConfig) -> Result<Arc<TypeRegistry>, SystemError> {
    let reg = TypeRegistry::new(cfg.general.max_message_size as usize);
    register_builtin_types(&reg)?;
    let fresh: Vec<_> = cfg
        .messages
        .iter()
        .filter(|d| reg.lookup(&d.key()).and_then(|h| reg.get(h).ok()).is_none_or(|t| t.def != **d))
        .cloned()
        .collect();
    reg.register_all(fresh)?;
    Ok(Arc::new(reg))
}

fn resolve(
    reg: &TypeRegistry,
    thread: &str,
    package: &str,
    ty: &str,
    kind: MsgKind,
) -> Result<TypeHandle, SystemError> {
    reg.lookup_parts(package, kind, ty).ok_or_else(|| SystemError::UnknownType {
        thread: thread.into(),
        package: package.into(),
        ty: ty.into(),
        kind: kind.as_str(),
    })
}

fn parts(reg: &TypeRegistry, thread: &str, d: &Decl) -> Result<Option<MessageParts>, SystemError> {
    let r = |p: &str, t: &str, k| resolve(reg, thread, p, t, k);
    Ok(Some(match d {
        Decl::Msg { package, ty } => MessageParts::Msg(r(package, ty, MsgKind::Msg)?),
        Decl::SrvMsg { package, ty } => MessageParts::Service {
            request: r(package, ty, MsgKind::SrvRequest)?,
            response: r(package, ty, MsgKind::SrvResponse)?,
        },
        Decl::ActMsg { package, ty } => MessageParts::Action {
            goal: r(package, ty, MsgKind::ActionGoal)?,
            feedback: r(package, ty, MsgKind::ActionFeedback)?,
            result: r(package, ty, MsgKind::ActionResult)?,
        },
        _ => return Ok(None),
    }))
}

/// Builds a [`ThreadSpec`] per configured thread without starting anything.
/// Subscriber queue depth comes from the thread parameter `QueueDepth`.
pub fn plan_threads(cfg: &ProjectConfig, reg: &TypeRegistry) -> Result<Vec<ThreadSpec>, SystemError> {
    cfg.validate()?;
    let mut out = Vec::new();
    for t in &cfg.threads {
        let group = cfg.group(&t.group).expect("validated");
        let behavior = behavior_by_name(&t.behavior)
            .ok_or_else(|| SystemError::UnknownBehavior { thread: t.name.clone(), behavior: t.behavior.clone() })?;
        let depth = match t.params.get("QueueDepth") {
            Some(v) => {
                v.parse().map_err(|_| ConfigError::BadValue { line: 0, key: "QueueDepth".into(), value: v.clone() })?
            }
            None => DEFAULT_QUEUE_DEPTH,
        };
        let mut msg_parts: BTreeMap<&str, MessageParts> = BTreeMap::new();
        for d in group.objects() {
            if let Some(p) = parts(reg, &t.name, &d.decl)? {
                msg_parts.insert(&d.name, p);
            }
        }
        let single = |m: &str| match msg_parts[m] {
            MessageParts::Msg(h) => h,
            _ => unreachable!("validated reference kind"),
        };
        let service = |m: &str| match msg_parts[m] {
            MessageParts::Service { request, response } => (request, response),
            _ => unreachable!("validated reference kind"),
        };
        let action = |m: &str| match msg_parts[m] {
            MessageParts::Action { goal, feedback, result } => (goal, feedback, result),
            _ => unreachable!("validated reference kind"),
        };
        let us = |p: u32| Duration::from_micros(p as u64);
        let mut resources = Vec::new();
        for d in group.objects() {
            let spec = match &d.decl {
                Decl::Node { .. } => unreachable!(),
                Decl::Msg { .. } | Decl::SrvMsg { .. } | Decl::ActMsg { .. } => {
                    ResourceSpec::Message(msg_parts[d.name.as_str()])
                }
                Decl::Sub { msg, topic, poll_us, .. } => {
                    ResourceSpec::Subscriber { topic: topic.clone(), ty: single(msg), depth, poll: us(*poll_us) }
                }
                Decl::Pub { msg, topic, .. } => ResourceSpec::Publisher { topic: topic.clone(), ty: single(msg) },
                Decl::SrvServer { msg, service: s, poll_us, .. } => {
                    let (request, response) = service(msg);
                    ResourceSpec::ServiceServer { service: s.clone(), request, response, poll: us(*poll_us) }
                }
                Decl::SrvClient { msg, service: s, poll_us, .. } => {
                    let (request, response) = service(msg);
                    ResourceSpec::ServiceClient { service: s.clone(), request, response, poll: us(*poll_us) }
                }
                Decl::ActServer { msg, action: a, poll_us, .. } => {
                    let (goal, feedback, result) = action(msg);
                    ResourceSpec::ActionServer { action: a.clone(), goal, feedback, result, poll: us(*poll_us) }
                }
                Decl::ActClient { msg, action: a, poll_us, .. } => {
                    let (goal, feedback, result) = action(msg);
                    ResourceSpec::ActionClient { action: a.clone(), goal, feedback, result, poll: us(*poll_us) }
                }
            };
            resources.push((d.name.clone(), spec));
        }
        let node_name = match group.nodes().next().map(|n| &n.decl) {
            Some(Decl::Node { label }) => label.clone(),
            _ => unreachable!("validated node count"),
        };
        out.push(ThreadSpec {
            name: node_name,
            mapping: cfg.mapping_of(&t.name).expect("known thread"),
            resources,
            params: t.params.clone(),
            behavior,
        });
    }
    Ok(out)
}

/// A running process: graph, fabric, optional transport and the configured
/// threads.
pub struct System {
    config: ProjectConfig,
    graph: Graph,
    fabric: Fabric,
    transport: Option<Transport>,
    threads: BTreeMap<String, ThreadId>,
}

impl System {
    pub fn start(cfg: &ProjectConfig, opts: &SystemOptions) -> Result<System, SystemError> {
        let registry = build_registry(cfg)?;
        let specs = plan_threads(cfg, &registry)?;
        let arena = Arc::new(Arena::new(cfg.general.arena_size)?);
        let graph = Graph::with_trace(registry, arena, Arc::new(Trace::new(opts.trace)));
        let transport = cfg.transport.as_ref().map(|p| Transport::start(p, &graph)).transpose()?;
        let fabric = Fabric::new(graph.clone(), FabricOptions { slots: cfg.general.slots, jitter: opts.jitter });
        let mut sys = System { config: cfg.clone(), graph, fabric, transport, threads: BTreeMap::new() };
        for (t, spec) in cfg.threads.iter().zip(specs) {
            let id = sys.fabric.start(spec).map_err(|source| SystemError::Fabric { thread: t.name.clone(), source })?;
            sys.threads.insert(t.name.clone(), id);
        }
        Ok(sys)
    }

    pub fn config(&self) -> &ProjectConfig {
        &self.config
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn transport(&self) -> Option<&Transport> {
        self.transport.as_ref()
    }

    pub fn thread_id(&self, name: &str) -> Option<ThreadId> {
        self.threads.get(name).copied()
    }

    /// Outcome of every configured thread, by configured name.
    pub fn outcomes(&self) -> Vec<(String, ThreadOutcome)> {
        self.threads.iter().filter_map(|(n, &id)| self.fabric.outcome(id).map(|o| (n.clone(), o))).collect()
    }

    pub fn mapping_of(&self, name: &str) -> Option<Mapping> {
        self.thread_id(name).and_then(|id| self.fabric.mapping_of(id))
    }

    pub fn node_times(&self, name: &str) -> Vec<Duration> {
        self.thread_id(name).map(|id| self.fabric.node_times(id)).unwrap_or_default()
    }

    /// Stops every thread, then the transport. Returns the final outcomes.
    pub fn shutdown(&mut self) -> Vec<(String, ThreadOutcome)> {
        let ids: BTreeMap<ThreadId, String> = self.threads.iter().map(|(n, &id)| (id, n.clone())).collect();
        let outcomes =
            self.fabric.stop_all().into_iter().filter_map(|(id, o)| ids.get(&id).map(|n| (n.clone(), o))).collect();
        self.threads.clear();
        if let Some(t) = self.transport.take() {
            t.shutdown();
        }
        self.graph.shutdown();
        outcomes
    }
}

impl Drop for System {
    fn drop(&mut self) {
        self.shutdown();
    }
}

//! In-process node graph: topics, services and actions.
//!
//! Messages travel between endpoints in serialized form. A take deserializes
//! the queued bytes into fresh arena blocks and hands the caller the resulting
//! [`MessageInstance`], so every subscriber owns an independent copy and the
//! arena store always happens inside the take call. Remote peers are reached
//! through a [`RemoteLink`] installed by the transport.

mod action;
mod service;
mod topic;

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, RwLock};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::arena::Arena;
use crate::msg::{MessageInstance, MsgError, TypeHandle, TypeRegistry};
use crate::trace::{Event, Trace};

pub use action::{
    feedback_topic, goal_response_def, goal_service, result_request_def, result_service, ActionClient, ActionServer,
    FEEDBACK_QUEUE_DEPTH,
};
pub use service::{ServiceClient, ServiceServer};
pub use topic::{Publisher, Subscriber};

/// Keep-last depth used when a caller has no preference.
pub const DEFAULT_QUEUE_DEPTH: usize = 8;

/// Upper bound on a single condition-variable sleep; the effective slice is
/// the smaller of this and the endpoint's polling period.
const MAX_WAIT_SLICE: Duration = Duration::from_millis(50);

/// Answered correlation ids remembered per server for duplicate detection.
const ANSWERED_MEMORY: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MwError {
    #[error("node name {0:?} already in use")]
    DuplicateNode(String),
    #[error("empty node, topic or service name")]
    EmptyName,
    #[error("type mismatch on {name:?}: expected {expected}, found {found}")]
    TypeMismatch { name: String, expected: String, found: String },
    #[error("service {0:?} already has a server")]
    DuplicateServer(String),
    #[error("no server for service {0:?}")]
    NoServer(String),
    #[error("timed out")]
    Timeout,
    #[error("graph shut down")]
    Shutdown,
    #[error("node stopped")]
    Cancelled,
    #[error("unknown correlation id {0:#x}")]
    UnknownCorrelation(u64),
    #[error("correlation id {0:#x} already answered")]
    AlreadyAnswered(u64),
    #[error("unknown goal {0:#x}")]
    UnknownGoal(u64),
    #[error("goal {0:#x} is not active")]
    GoalNotActive(u64),
    #[error("transport: {0}")]
    Transport(String),
    #[error(transparent)]
    Msg(#[from] MsgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Software,
    Hardware,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EndpointKind {
    Publisher,
    Subscriber,
    Server,
    Client,
}

/// What the transport announces to peers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EndpointInfo {
    pub kind: EndpointKind,
    pub name: String,
    pub fingerprint: u64,
}

#[derive(Debug)]
pub enum Payload {
    /// Serialized form, as queued locally or received from a peer.
    Bytes(Arc<[u8]>),
    /// Stored in the arena; owned by whoever holds the envelope.
    Stored(MessageInstance),
}

#[derive(Debug)]
pub struct Envelope {
    pub name: String,
    /// 0 for plain publishes; request id for services; goal id for actions.
    pub corr: u64,
    pub source: String,
    pub payload: Payload,
}

impl Envelope {
    fn bytes(&self) -> &Arc<[u8]> {
        match &self.payload {
            Payload::Bytes(b) => b,
            Payload::Stored(_) => unreachable!("queued envelopes carry bytes"),
        }
    }

    pub fn into_message(self) -> Option<MessageInstance> {
        match self.payload {
            Payload::Stored(m) => Some(m),
            Payload::Bytes(_) => None,
        }
    }
}

/// Outbound half of the transport, as seen by the graph.
pub trait RemoteLink: Send + Sync {
    /// Forward to every peer with a matching subscriber.
    fn publish(&self, topic: &str, fingerprint: u64, corr: u64, bytes: &Arc<[u8]>, feedback: bool);
    fn has_server(&self, service: &str, fingerprint: u64) -> bool;
    fn send_request(&self, service: &str, fingerprint: u64, corr: u64, bytes: &Arc<[u8]>) -> Result<(), MwError>;
    fn send_response(&self, peer: u64, service: &str, fingerprint: u64, corr: u64, bytes: &Arc<[u8]>);
    /// Local endpoint set changed; re-announce.
    fn endpoints_changed(&self);
}

/// Fingerprint of a service, combining request and response types.
pub fn service_fingerprint(request: u64, response: u64) -> u64 {
    request.rotate_left(17) ^ response.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub(crate) type EndpointId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Route {
    Local(EndpointId),
    Remote(u64),
}

#[derive(Debug)]
pub(crate) struct TopicState {
    ty: TypeHandle,
    publishers: usize,
    subscribers: Vec<EndpointId>,
}

#[derive(Debug)]
pub(crate) struct SubQueue {
    topic: String,
    depth: usize,
    queue: VecDeque<Envelope>,
    dropped: u64,
}

#[derive(Debug)]
pub(crate) struct Request {
    corr: u64,
    route: Route,
    env: Envelope,
}

#[derive(Debug)]
pub(crate) struct ServerState {
    id: EndpointId,
    queue: VecDeque<Request>,
    outstanding: HashMap<u64, Route>,
    answered: HashSet<u64>,
    answered_order: VecDeque<u64>,
}

impl ServerState {
    fn remember_answered(&mut self, corr: u64) {
        self.answered.insert(corr);
        self.answered_order.push_back(corr);
        if self.answered_order.len() > ANSWERED_MEMORY {
            let old = self.answered_order.pop_front().unwrap();
            self.answered.remove(&old);
        }
    }
}

#[derive(Debug)]
pub(crate) struct ServiceState {
    req: TypeHandle,
    resp: TypeHandle,
    server: Option<ServerState>,
    clients: usize,
}

#[derive(Debug)]
pub(crate) struct ClientState {
    service: String,
    pending: HashSet<u64>,
    inbox: HashMap<u64, Envelope>,
}

#[derive(Debug, Default)]
pub(crate) struct State {
    nodes: HashMap<String, NodeKind>,
    topics: HashMap<String, TopicState>,
    subs: HashMap<EndpointId, SubQueue>,
    services: HashMap<String, ServiceState>,
    clients: HashMap<EndpointId, ClientState>,
}

pub(crate) struct Shared {
    registry: Arc<TypeRegistry>,
    arena: Arc<Arena>,
    trace: Arc<Trace>,
    state: Mutex<State>,
    cond: Condvar,
    tag: u32,
    counter: AtomicU32,
    next_id: AtomicU64,
    shutdown: AtomicBool,
    link: RwLock<Option<Arc<dyn RemoteLink>>>,
}

/// Handle to a process-wide node graph. Cheap to clone.
#[derive(Clone)]
pub struct Graph {
    shared: Arc<Shared>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("tag", &self.shared.tag).finish_non_exhaustive()
    }
}

fn check_name(name: &str) -> Result<(), MwError> {
    if name.trim().is_empty() {
        Err(MwError::EmptyName)
    } else {
        Ok(())
    }
}

impl Graph {
    pub fn new(registry: Arc<TypeRegistry>, arena: Arc<Arena>) -> Self {
        Self::with_trace(registry, arena, Arc::new(Trace::default()))
    }

    pub fn with_trace(registry: Arc<TypeRegistry>, arena: Arc<Arena>, trace: Arc<Trace>) -> Self {
        let tag = loop {
            let t: u32 = rand::random();
            if t != 0 {
                break t;
            }
        };
        Graph {
            shared: Arc::new(Shared {
                registry,
                arena,
                trace,
                state: Mutex::new(State::default()),
                cond: Condvar::new(),
                tag,
                counter: AtomicU32::new(1),
                next_id: AtomicU64::new(1),
                shutdown: AtomicBool::new(false),
                link: RwLock::new(None),
            }),
        }
    }

    pub fn registry(&self) -> &Arc<TypeRegistry> {
        &self.shared.registry
    }

    pub fn arena(&self) -> &Arc<Arena> {
        &self.shared.arena
    }

    pub fn trace(&self) -> &Arc<Trace> {
        &self.shared.trace
    }

    /// Process tag carried in the upper 32 bits of every correlation id.
    pub fn process_tag(&self) -> u32 {
        self.shared.tag
    }

    pub fn create_node(&self, name: &str, kind: NodeKind) -> Result<Node, MwError> {
        check_name(name)?;
        let mut st = self.shared.lock();
        if st.nodes.contains_key(name) {
            return Err(MwError::DuplicateNode(name.into()));
        }
        st.nodes.insert(name.into(), kind);
        Ok(Node { shared: self.shared.clone(), name: name.into(), kind, cancel: Arc::new(AtomicBool::new(false)) })
    }

    pub fn node_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.shared.lock().nodes.keys().cloned().collect();
        v.sort();
        v
    }

    /// Wakes every blocked take with [`MwError::Shutdown`].
    pub fn shutdown(&self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        self.shared.notify();
    }

    /// Re-evaluates every blocked call, e.g. after a stop flag was set.
    pub fn wake(&self) {
        self.shared.notify();
    }

    pub fn is_shutdown(&self) -> bool {
        self.shared.shutdown.load(Ordering::SeqCst)
    }

    pub fn set_remote_link(&self, link: Option<Arc<dyn RemoteLink>>) {
        *self.shared.link.write().unwrap() = link;
    }

    /// Local endpoints, sorted, for announcement to peers.
    pub fn local_endpoints(&self) -> Vec<EndpointInfo> {
        let reg = &self.shared.registry;
        let st = self.shared.lock();
        let fp = |h| reg.fingerprint(h).unwrap_or(0);
        let mut out = Vec::new();
        for (name, t) in &st.topics {
            if t.publishers > 0 {
                out.push(EndpointInfo { kind: EndpointKind::Publisher, name: name.clone(), fingerprint: fp(t.ty) });
            }
            if !t.subscribers.is_empty() {
                out.push(EndpointInfo { kind: EndpointKind::Subscriber, name: name.clone(), fingerprint: fp(t.ty) });
            }
        }
        for (name, s) in &st.services {
            let f = service_fingerprint(fp(s.req), fp(s.resp));
            if s.server.is_some() {
                out.push(EndpointInfo { kind: EndpointKind::Server, name: name.clone(), fingerprint: f });
            }
            if s.clients > 0 {
                out.push(EndpointInfo { kind: EndpointKind::Client, name: name.clone(), fingerprint: f });
            }
        }
        out.sort();
        out
    }

    /// Messages dropped by keep-last overflow across every queue on `topic`.
    pub fn dropped_on(&self, topic: &str) -> u64 {
        self.shared.lock().subs.values().filter(|q| q.topic == topic).map(|q| q.dropped).sum()
    }

    /// Inbound publish from a peer. Returns false when no local topic matches.
    pub fn deliver_remote_publish(
        &self,
        topic: &str,
        fingerprint: u64,
        corr: u64,
        source: &str,
        bytes: Arc<[u8]>,
    ) -> bool {
        let ty = match self.shared.lock().topics.get(topic) {
            Some(t) => t.ty,
            None => return false,
        };
        if self.shared.registry.fingerprint(ty).ok() != Some(fingerprint) {
            log::warn!("dropping remote publish on {topic}: type fingerprint {fingerprint:#018x} does not match");
            return false;
        }
        self.shared.enqueue_publish(topic, corr, source, bytes);
        true
    }

    /// Inbound request from peer `peer`. Returns false when no local server matches.
    pub fn deliver_remote_request(
        &self,
        peer: u64,
        service: &str,
        fingerprint: u64,
        corr: u64,
        bytes: Arc<[u8]>,
    ) -> bool {
        let reg = &self.shared.registry;
        let mut st = self.shared.lock();
        let Some(svc) = st.services.get_mut(service) else { return false };
        let local_fp =
            service_fingerprint(reg.fingerprint(svc.req).unwrap_or(0), reg.fingerprint(svc.resp).unwrap_or(0));
        if local_fp != fingerprint {
            log::warn!("dropping remote request on {service}: type fingerprint mismatch");
            return false;
        }
        let Some(server) = svc.server.as_mut() else { return false };
        server.queue.push_back(Request {
            corr,
            route: Route::Remote(peer),
            env: Envelope {
                name: service.into(),
                corr,
                source: format!("peer:{peer}"),
                payload: Payload::Bytes(bytes),
            },
        });
        drop(st);
        self.shared.notify();
        true
    }

    /// Inbound response for a request this process sent.
    pub fn deliver_remote_response(&self, service: &str, corr: u64, bytes: Arc<[u8]>) -> bool {
        let mut st = self.shared.lock();
        let hit = st.clients.values_mut().find(|c| c.service == service && c.pending.contains(&corr));
        let Some(client) = hit else { return false };
        client.pending.remove(&corr);
        client.inbox.insert(
            corr,
            Envelope { name: service.into(), corr, source: "remote".into(), payload: Payload::Bytes(bytes) },
        );
        drop(st);
        self.shared.notify();
        true
    }
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap()
    }

    fn notify(&self) {
        let _g = self.state.lock().unwrap();
        self.cond.notify_all();
    }

    fn link(&self) -> Option<Arc<dyn RemoteLink>> {
        self.link.read().unwrap().clone()
    }

    fn endpoints_changed(&self) {
        if let Some(l) = self.link() {
            l.endpoints_changed();
        }
    }

    fn next_id(&self) -> EndpointId {
        self.next_id.fetch_add(1, Ordering::Relaxed)
    }

    fn next_corr(&self) -> u64 {
        ((self.tag as u64) << 32) | self.counter.fetch_add(1, Ordering::Relaxed) as u64
    }

    fn type_name(&self, h: TypeHandle) -> String {
        self.registry.name_of(h)
    }

    fn check_type(&self, name: &str, expected: TypeHandle, found: TypeHandle) -> Result<(), MwError> {
        if expected == found {
            Ok(())
        } else {
            Err(MwError::TypeMismatch {
                name: name.into(),
                expected: self.type_name(expected),
                found: self.type_name(found),
            })
        }
    }

    /// Blocks until `f` yields a value, the timeout elapses, the node is
    /// stopped or the graph shuts down.
    fn wait_for<T>(
        &self,
        timeout: Option<Duration>,
        poll: Duration,
        cancel: &AtomicBool,
        mut f: impl FnMut(&mut State) -> Result<Option<T>, MwError>,
    ) -> Result<T, MwError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let slice = poll.min(MAX_WAIT_SLICE).max(Duration::from_micros(100));
        let mut st = self.lock();
        loop {
            if self.shutdown.load(Ordering::SeqCst) {
                return Err(MwError::Shutdown);
            }
            if cancel.load(Ordering::SeqCst) {
                return Err(MwError::Cancelled);
            }
            if let Some(v) = f(&mut st)? {
                return Ok(v);
            }
            let wait = match deadline {
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(MwError::Timeout);
                    }
                    slice.min(d - now)
                }
                None => slice,
            };
            st = self.cond.wait_timeout(st, wait).unwrap().0;
        }
    }

    /// Deserializes a queued envelope into the arena.
    fn store(&self, env: Envelope, ty: TypeHandle) -> Result<Envelope, MwError> {
        let inst = self.registry.deserialize(&self.arena, ty, env.bytes())?;
        let addr = inst.root();
        self.trace.record_with(|| Event::ArenaStore { name: env.name.clone(), addr });
        Ok(Envelope { name: env.name, corr: env.corr, source: env.source, payload: Payload::Stored(inst) })
    }

    fn enqueue_publish(&self, topic: &str, corr: u64, source: &str, bytes: Arc<[u8]>) {
        let mut guard = self.lock();
        let st = &mut *guard;
        if let Some(t) = st.topics.get(topic) {
            for id in &t.subscribers {
                if let Some(q) = st.subs.get_mut(id) {
                    if q.queue.len() >= q.depth {
                        q.queue.pop_front();
                        q.dropped += 1;
                    }
                    q.queue.push_back(Envelope {
                        name: topic.into(),
                        corr,
                        source: source.into(),
                        payload: Payload::Bytes(bytes.clone()),
                    });
                }
            }
        }
        self.cond.notify_all();
    }
}

/// A node in the graph. Endpoints created from it share its stop flag.
pub struct Node {
    shared: Arc<Shared>,
    name: String,
    kind: NodeKind,
    cancel: Arc<AtomicBool>,
}

impl fmt::Debug for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Node").field("name", &self.name).field("kind", &self.kind).finish()
    }
}

impl Node {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> NodeKind {
        self.kind
    }

    pub fn graph(&self) -> Graph {
        Graph { shared: self.shared.clone() }
    }

    /// Makes every blocking call on this node's endpoints return
    /// [`MwError::Cancelled`].
    pub fn stop(&self) {
        self.cancel.store(true, Ordering::SeqCst);
        self.shared.notify();
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.cancel.clone()
    }
}

impl Drop for Node {
    fn drop(&mut self) {
        self.shared.lock().nodes.remove(&self.name);
    }
}

/// Common endpoint context.
#[derive(Clone)]
pub(crate) struct EndpointCtx {
    shared: Arc<Shared>,
    node: String,
    cancel: Arc<AtomicBool>,
    poll: Duration,
}

impl Node {
    fn ctx(&self, poll: Duration) -> EndpointCtx {
        EndpointCtx { shared: self.shared.clone(), node: self.name.clone(), cancel: self.cancel.clone(), poll }
    }
}


#[cfg(test)]
mod tests {
    use super::tests_support::*;
    use super::*;

    #[test]
    fn duplicate_and_empty_node_names() {
        let (g, _) = graph();
        let _a = g.create_node("Sobel", NodeKind::Hardware).unwrap();
        assert_eq!(g.create_node("Sobel", NodeKind::Software).unwrap_err(), MwError::DuplicateNode("Sobel".into()));
        assert_eq!(g.create_node(" ", NodeKind::Software).unwrap_err(), MwError::EmptyName);
    }

    #[test]
    fn node_name_released_on_drop() {
        let (g, _) = graph();
        drop(g.create_node("a", NodeKind::Software).unwrap());
        g.create_node("a", NodeKind::Software).unwrap();
    }

    #[test]
    fn correlation_ids_are_tagged_and_unique() {
        let (g, _) = graph();
        let a = g.shared.next_corr();
        let b = g.shared.next_corr();
        assert_ne!(a, b);
        assert_eq!((a >> 32) as u32, g.process_tag());
    }

    #[test]
    fn shutdown_wakes_blocked_take() {
        let (g, ty) = graph();
        let n = g.create_node("n", NodeKind::Software).unwrap();
        let sub = n.create_subscriber("/t", ty, 4, Duration::from_millis(10)).unwrap();
        let g2 = g.clone();
        let h = std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(30));
            g2.shutdown();
        });
        assert_eq!(sub.take(None).unwrap_err(), MwError::Shutdown);
        h.join().unwrap();
    }

    #[test]
    fn stop_cancels_only_that_node() {
        let (g, ty) = graph();
        let a = g.create_node("a", NodeKind::Software).unwrap();
        let b = g.create_node("b", NodeKind::Software).unwrap();
        let sa = a.create_subscriber("/t", ty, 4, Duration::from_millis(10)).unwrap();
        let sb = b.create_subscriber("/t", ty, 4, Duration::from_millis(10)).unwrap();
        a.stop();
        assert_eq!(sa.take(None).unwrap_err(), MwError::Cancelled);
        assert_eq!(sb.take(Some(Duration::from_millis(5))).unwrap_err(), MwError::Timeout);
    }
}

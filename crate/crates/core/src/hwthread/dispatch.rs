//! Executes OSIF command frames against a thread's middleware endpoints.
//! Used by the delegate of a hardware thread and directly by software ports.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use super::{command_len, opcode, response_len, status, BufferRequest};
use crate::arena::ArenaError;
use crate::middleware::{
    ActionClient, ActionServer, MwError, Node, Publisher, ServiceClient, ServiceServer, Subscriber,
};
use crate::msg::{MessageInstance, MsgError, TypeHandle};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageParts {
    Msg(TypeHandle),
    Service { request: TypeHandle, response: TypeHandle },
    Action { goal: TypeHandle, feedback: TypeHandle, result: TypeHandle },
}

impl MessageParts {
    pub fn parts(&self) -> Vec<TypeHandle> {
        match *self {
            MessageParts::Msg(t) => vec![t],
            MessageParts::Service { request, response } => vec![request, response],
            MessageParts::Action { goal, feedback, result } => vec![goal, feedback, result],
        }
    }
}

/// A resource of a thread; its handle is its position in the thread's list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResourceSpec {
    Message(MessageParts),
    Subscriber { topic: String, ty: TypeHandle, depth: usize, poll: Duration },
    Publisher { topic: String, ty: TypeHandle },
    ServiceServer { service: String, request: TypeHandle, response: TypeHandle, poll: Duration },
    ServiceClient { service: String, request: TypeHandle, response: TypeHandle, poll: Duration },
    ActionServer { action: String, goal: TypeHandle, feedback: TypeHandle, result: TypeHandle, poll: Duration },
    ActionClient { action: String, goal: TypeHandle, feedback: TypeHandle, result: TypeHandle, poll: Duration },
}

enum Bound {
    Message,
    Sub(Subscriber),
    Pub(Publisher),
    Server(ServiceServer),
    Client(ServiceClient),
    ActServer(ActionServer),
    ActClient(ActionClient),
}

pub(crate) struct Dispatcher {
    resources: Vec<Bound>,
    buffers: HashMap<(u32, u32), MessageInstance>,
    /// Most recent message taken through (handle, opcode); replaced (and
    /// freed) by the next take.
    taken: HashMap<(u32, u32), MessageInstance>,
    server_pending: HashMap<u32, u64>,
    client_pending: HashMap<u32, VecDeque<u64>>,
    goals: HashMap<u32, u64>,
    next_token: u32,
    last_take: Option<Instant>,
    node_times: Arc<Mutex<Vec<Duration>>>,
    // dropped last so endpoints unregister before the node name is released
    _node: Node,
}

#[derive(Debug)]
pub(crate) enum BuildError {
    UnknownResource(String),
    Middleware(MwError),
}

impl From<MwError> for BuildError {
    fn from(e: MwError) -> Self {
        BuildError::Middleware(e)
    }
}

fn status_of(e: MwError) -> u32 {
    match e {
        MwError::Timeout => status::TIMEOUT,
        MwError::TypeMismatch { .. } => status::TYPE_MISMATCH,
        MwError::UnknownGoal(_) | MwError::GoalNotActive(_) => status::UNKNOWN_GOAL,
        MwError::AlreadyAnswered(_) | MwError::UnknownCorrelation(_) => status::ALREADY_ANSWERED,
        MwError::Shutdown | MwError::Cancelled => status::SHUTDOWN,
        MwError::NoServer(_) => status::NO_SERVER,
        MwError::Msg(MsgError::Arena(ArenaError::OutOfMemory { .. })) => status::OUT_OF_MEMORY,
        _ => status::MIDDLEWARE_ERROR,
    }
}

type Exec = Result<Vec<u32>, u32>;

impl Dispatcher {
    pub(crate) fn build(
        node: Node,
        resources: &[(String, ResourceSpec)],
        buffers: &[BufferRequest],
        node_times: Arc<Mutex<Vec<Duration>>>,
    ) -> Result<Self, BuildError> {
        let graph = node.graph();
        let mut bound = Vec::with_capacity(resources.len());
        let mut prealloc = HashMap::new();
        for req in buffers {
            let ok = resources.iter().any(|(n, s)| n == &req.resource && matches!(s, ResourceSpec::Message(_)));
            if !ok {
                return Err(BuildError::UnknownResource(req.resource.clone()));
            }
        }
        for (h, (name, spec)) in resources.iter().enumerate() {
            let h = h as u32;
            bound.push(match spec {
                ResourceSpec::Message(parts) => {
                    for (part, ty) in parts.parts().into_iter().enumerate() {
                        let part = part as u32;
                        let caps = buffers
                            .iter()
                            .find(|b| &b.resource == name && b.part == part)
                            .map(|b| b.capacities.clone())
                            .unwrap_or_default();
                        let inst = graph.registry().alloc_message(graph.arena(), ty, &caps).map_err(MwError::from)?;
                        prealloc.insert((h, part), inst);
                    }
                    Bound::Message
                }
                ResourceSpec::Subscriber { topic, ty, depth, poll } => {
                    Bound::Sub(node.create_subscriber(topic, *ty, *depth, *poll)?)
                }
                ResourceSpec::Publisher { topic, ty } => Bound::Pub(node.create_publisher(topic, *ty)?),
                ResourceSpec::ServiceServer { service, request, response, poll } => {
                    Bound::Server(node.create_service_server(service, *request, *response, *poll)?)
                }
                ResourceSpec::ServiceClient { service, request, response, poll } => {
                    Bound::Client(node.create_service_client(service, *request, *response, *poll)?)
                }
                ResourceSpec::ActionServer { action, goal, feedback, result, poll } => {
                    Bound::ActServer(node.create_action_server(action, *goal, *feedback, *result, *poll)?)
                }
                ResourceSpec::ActionClient { action, goal, feedback, result, poll } => {
                    Bound::ActClient(node.create_action_client(action, *goal, *feedback, *result, *poll)?)
                }
            });
        }
        Ok(Dispatcher {
            resources: bound,
            buffers: prealloc,
            taken: HashMap::new(),
            server_pending: HashMap::new(),
            client_pending: HashMap::new(),
            goals: HashMap::new(),
            next_token: 1,
            last_take: None,
            node_times,
            _node: node,
        })
    }

    /// Executes one command frame and returns the full response frame.
    pub(crate) fn dispatch(&mut self, frame: &[u32]) -> Vec<u32> {
        let op = frame.first().copied().unwrap_or(0);
        let result = if frame.len() != command_len(op) || command_len(op) == 1 {
            Err(status::PROTOCOL_ERROR)
        } else {
            self.exec(op, frame)
        };
        let mut out = match result {
            Ok(words) => {
                let mut v = vec![status::OK];
                v.extend(words);
                v
            }
            Err(s) => vec![s],
        };
        out.resize(response_len(op), 0);
        out
    }

    fn resource(&self, h: u32) -> Result<&Bound, u32> {
        self.resources.get(h as usize).ok_or(status::BAD_HANDLE)
    }

    fn held(&self, addr: u32) -> Result<&MessageInstance, u32> {
        self.buffers.values().chain(self.taken.values()).find(|m| m.root() == addr).ok_or(status::BAD_ADDRESS)
    }

    fn keep(&mut self, h: u32, op: u32, inst: MessageInstance) -> u32 {
        let root = inst.root();
        self.taken.insert((h, op), inst);
        self.last_take = Some(Instant::now());
        root
    }

    fn produced(&mut self) {
        if let Some(t) = self.last_take.take() {
            self.node_times.lock().unwrap().push(t.elapsed());
        }
    }

    fn goal(&self, token: u32) -> Result<u64, u32> {
        self.goals.get(&token).copied().ok_or(status::UNKNOWN_GOAL)
    }

    fn exec(&mut self, op: u32, f: &[u32]) -> Exec {
        use opcode::*;
        let h = f[1];
        let bad = status::BAD_HANDLE;
        match op {
            SUBSCRIBER_TAKE => {
                let Bound::Sub(s) = self.resource(h)? else { return Err(bad) };
                let m = s.take(None).map_err(status_of)?;
                Ok(vec![self.keep(h, op, m)])
            }
            PUBLISHER_PUBLISH => {
                let Bound::Pub(p) = self.resource(h)? else { return Err(bad) };
                p.publish(self.held(f[2])?).map_err(status_of)?;
                self.produced();
                Ok(vec![])
            }
            SERVICESERVER_TAKE => {
                let Bound::Server(s) = self.resource(h)? else { return Err(bad) };
                let (corr, m) = s.take_request(None).map_err(status_of)?;
                self.server_pending.insert(h, corr);
                Ok(vec![self.keep(h, op, m)])
            }
            SERVICESERVER_SEND_RESPONSE => {
                let Bound::Server(s) = self.resource(h)? else { return Err(bad) };
                let corr = *self.server_pending.get(&h).ok_or(status::ALREADY_ANSWERED)?;
                s.send_response(corr, self.held(f[2])?).map_err(status_of)?;
                self.server_pending.remove(&h);
                self.produced();
                Ok(vec![])
            }
            SERVICECLIENT_SEND_REQUEST => {
                let Bound::Client(c) = self.resource(h)? else { return Err(bad) };
                let corr = c.send_request(self.held(f[2])?).map_err(status_of)?;
                self.client_pending.entry(h).or_default().push_back(corr);
                self.produced();
                Ok(vec![])
            }
            SERVICECLIENT_TAKE => {
                let Bound::Client(c) = self.resource(h)? else { return Err(bad) };
                let corr = *self.client_pending.get(&h).and_then(|q| q.front()).ok_or(status::PROTOCOL_ERROR)?;
                let m = c.take_response(corr, None).map_err(status_of)?;
                self.client_pending.get_mut(&h).unwrap().pop_front();
                Ok(vec![self.keep(h, op, m)])
            }
            ACTIONCLIENT_SEND_GOAL => {
                let Bound::ActClient(c) = self.resource(h)? else { return Err(bad) };
                let goal = c.send_goal(self.held(f[2])?).map_err(status_of)?;
                let token = self.next_token;
                self.next_token = self.next_token.wrapping_add(1).max(1);
                self.goals.insert(token, goal);
                Ok(vec![token])
            }
            ACTIONSERVER_TAKE_GOAL => {
                let Bound::ActServer(s) = self.resource(h)? else { return Err(bad) };
                let (goal, m) = s.take_goal(None).map_err(status_of)?;
                let token = self.next_token;
                self.next_token = self.next_token.wrapping_add(1).max(1);
                self.goals.insert(token, goal);
                Ok(vec![token, self.keep(h, op, m)])
            }
            ACTIONSERVER_PUBLISH_FEEDBACK => {
                let Bound::ActServer(s) = self.resource(h)? else { return Err(bad) };
                s.publish_feedback(self.goal(f[2])?, self.held(f[3])?).map_err(status_of)?;
                Ok(vec![])
            }
            ACTIONCLIENT_TAKE_FEEDBACK => {
                let Bound::ActClient(c) = self.resource(h)? else { return Err(bad) };
                let m = c.take_feedback(self.goal(f[2])?, None).map_err(status_of)?;
                Ok(vec![self.keep(h, op, m)])
            }
            ACTIONSERVER_SEND_RESULT => {
                let Bound::ActServer(s) = self.resource(h)? else { return Err(bad) };
                s.send_result(self.goal(f[2])?, self.held(f[3])?, None).map_err(status_of)?;
                self.goals.remove(&f[2]);
                self.produced();
                Ok(vec![])
            }
            ACTIONCLIENT_TAKE_RESULT => {
                let Bound::ActClient(c) = self.resource(h)? else { return Err(bad) };
                let m = c.take_result(self.goal(f[2])?, None).map_err(status_of)?;
                self.goals.remove(&f[2]);
                Ok(vec![self.keep(h, op, m)])
            }
            MESSAGE_ADDRESS => {
                let Bound::Message = self.resource(h)? else { return Err(bad) };
                Ok(vec![self.buffers.get(&(h, f[2])).ok_or(bad)?.root()])
            }
            _ => Err(status::PROTOCOL_ERROR),
        }
    }
}

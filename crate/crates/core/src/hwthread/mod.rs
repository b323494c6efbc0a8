//! Simulated hardware threads.
//!
//! A hardware thread talks to the middleware only through its OSIF, a pair
//! of bounded FIFOs of 32-bit words served by a delegate thread, and touches
//! message data only through MEMIF transactions on the arena. A software
//! mapping runs the same [`Behavior`] against a port that dispatches frames
//! directly, so both mappings share one code path for middleware semantics.

mod dispatch;
mod fabric;
mod osif;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use thiserror::Error;

use crate::arena::ArenaError;
use crate::msg::{MsgError, TypeHandle, TypeRegistry};

pub use dispatch::{MessageParts, ResourceSpec};
pub use fabric::{Fabric, FabricError, FabricOptions, Mapping, ThreadId, ThreadOutcome, ThreadSpec};
pub use osif::{osif_pair, HwPort, OsifDelegateEnd, OsifThreadEnd, SwPort, OSIF_FIFO_DEPTH};

pub mod opcode {
    pub const SUBSCRIBER_TAKE: u32 = 0x0001;
    pub const PUBLISHER_PUBLISH: u32 = 0x0002;
    pub const SERVICESERVER_TAKE: u32 = 0x0010;
    pub const SERVICESERVER_SEND_RESPONSE: u32 = 0x0011;
    pub const SERVICECLIENT_SEND_REQUEST: u32 = 0x0012;
    pub const SERVICECLIENT_TAKE: u32 = 0x0013;
    pub const ACTIONCLIENT_SEND_GOAL: u32 = 0x0020;
    pub const ACTIONSERVER_TAKE_GOAL: u32 = 0x0021;
    pub const ACTIONSERVER_PUBLISH_FEEDBACK: u32 = 0x0022;
    pub const ACTIONCLIENT_TAKE_FEEDBACK: u32 = 0x0023;
    pub const ACTIONSERVER_SEND_RESULT: u32 = 0x0024;
    pub const ACTIONCLIENT_TAKE_RESULT: u32 = 0x0025;
    /// Address of one of the thread's preallocated message buffers.
    pub const MESSAGE_ADDRESS: u32 = 0x0030;
}

pub mod status {
    pub const OK: u32 = 0;
    pub const TIMEOUT: u32 = 1;
    pub const TYPE_MISMATCH: u32 = 2;
    pub const BAD_HANDLE: u32 = 3;
    pub const PROTOCOL_ERROR: u32 = 4;
    pub const UNKNOWN_GOAL: u32 = 5;
    pub const ALREADY_ANSWERED: u32 = 6;
    pub const SHUTDOWN: u32 = 7;
    pub const OUT_OF_MEMORY: u32 = 8;
    pub const NO_SERVER: u32 = 9;
    pub const BAD_ADDRESS: u32 = 10;
    pub const MIDDLEWARE_ERROR: u32 = 11;
}

/// Command frame length in words, including the opcode. Unknown opcodes are
/// single-word frames.
pub fn command_len(op: u32) -> usize {
    use opcode::*;
    match op {
        SUBSCRIBER_TAKE | SERVICESERVER_TAKE | SERVICECLIENT_TAKE | ACTIONSERVER_TAKE_GOAL => 2,
        PUBLISHER_PUBLISH
        | SERVICESERVER_SEND_RESPONSE
        | SERVICECLIENT_SEND_REQUEST
        | ACTIONCLIENT_SEND_GOAL
        | ACTIONCLIENT_TAKE_FEEDBACK
        | ACTIONCLIENT_TAKE_RESULT
        | MESSAGE_ADDRESS => 3,
        ACTIONSERVER_PUBLISH_FEEDBACK | ACTIONSERVER_SEND_RESULT => 4,
        _ => 1,
    }
}

/// Response frame length in words, including the status word. Errors still
/// produce the full length, zero padded.
pub fn response_len(op: u32) -> usize {
    use opcode::*;
    match op {
        SUBSCRIBER_TAKE
        | SERVICESERVER_TAKE
        | SERVICECLIENT_TAKE
        | ACTIONCLIENT_SEND_GOAL
        | ACTIONCLIENT_TAKE_FEEDBACK
        | ACTIONCLIENT_TAKE_RESULT
        | MESSAGE_ADDRESS => 2,
        ACTIONSERVER_TAKE_GOAL => 3,
        _ => 1,
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Fault {
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("opcode {opcode:#06x} failed with status {status}")]
    Status { opcode: u32, status: u32 },
    #[error("memory transaction failed: {0}")]
    Memory(#[from] ArenaError),
    #[error("OSIF channel disconnected")]
    Disconnected,
    #[error("thread is halted")]
    Halted,
    #[error("middleware shut down")]
    Shutdown,
    #[error("unknown resource {0:?}")]
    UnknownResource(String),
    #[error("{0}")]
    Behavior(String),
}

impl From<MsgError> for Fault {
    fn from(e: MsgError) -> Self {
        Fault::Behavior(e.to_string())
    }
}

/// The only interface a behavior has to the outside world.
pub trait ThreadPort {
    /// Sends one command frame. Fails if a command is still outstanding.
    fn emit(&mut self, frame: &[u32]) -> Result<(), Fault>;
    /// Receives the response to the outstanding command.
    fn await_response(&mut self) -> Result<Vec<u32>, Fault>;
    fn mem_read_into(&mut self, addr: u32, buf: &mut [u8]) -> Result<(), Fault>;
    fn mem_write(&mut self, addr: u32, data: &[u8]) -> Result<(), Fault>;

    fn call(&mut self, frame: &[u32]) -> Result<Vec<u32>, Fault> {
        self.emit(frame)?;
        self.await_response()
    }

    fn mem_read(&mut self, addr: u32, len: u32) -> Result<Vec<u8>, Fault> {
        let mut v = vec![0; len as usize];
        self.mem_read_into(addr, &mut v)?;
        Ok(v)
    }

    fn read_u32(&mut self, addr: u32) -> Result<u32, Fault> {
        let mut b = [0; 4];
        self.mem_read_into(addr, &mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn write_u32(&mut self, addr: u32, v: u32) -> Result<(), Fault> {
        self.mem_write(addr, &v.to_le_bytes())
    }
}

fn checked(op: u32, words: Vec<u32>) -> Result<Vec<u32>, Fault> {
    match words[0] {
        status::OK => Ok(words),
        status::SHUTDOWN => Err(Fault::Shutdown),
        s => Err(Fault::Status { opcode: op, status: s }),
    }
}

/// Named wrappers for the OSIF calls. Every take returns the root address of
/// a message the middleware stored in the arena.
pub trait RosCalls: ThreadPort {
    fn ros_subscriber_take(&mut self, sub: u32) -> Result<u32, Fault> {
        Ok(checked(opcode::SUBSCRIBER_TAKE, self.call(&[opcode::SUBSCRIBER_TAKE, sub])?)?[1])
    }

    fn ros_publisher_publish(&mut self, publisher: u32, msg: u32) -> Result<(), Fault> {
        checked(opcode::PUBLISHER_PUBLISH, self.call(&[opcode::PUBLISHER_PUBLISH, publisher, msg])?).map(drop)
    }

    fn ros_serviceserver_take(&mut self, server: u32) -> Result<u32, Fault> {
        Ok(checked(opcode::SERVICESERVER_TAKE, self.call(&[opcode::SERVICESERVER_TAKE, server])?)?[1])
    }

    fn ros_serviceserver_send_response(&mut self, server: u32, msg: u32) -> Result<(), Fault> {
        let op = opcode::SERVICESERVER_SEND_RESPONSE;
        checked(op, self.call(&[op, server, msg])?).map(drop)
    }

    fn ros_serviceclient_send_request(&mut self, client: u32, msg: u32) -> Result<(), Fault> {
        let op = opcode::SERVICECLIENT_SEND_REQUEST;
        checked(op, self.call(&[op, client, msg])?).map(drop)
    }

    fn ros_serviceclient_take(&mut self, client: u32) -> Result<u32, Fault> {
        Ok(checked(opcode::SERVICECLIENT_TAKE, self.call(&[opcode::SERVICECLIENT_TAKE, client])?)?[1])
    }

    /// Returns the goal token.
    fn ros_actionclient_send_goal(&mut self, client: u32, msg: u32) -> Result<u32, Fault> {
        let op = opcode::ACTIONCLIENT_SEND_GOAL;
        Ok(checked(op, self.call(&[op, client, msg])?)?[1])
    }

    /// Returns (goal token, goal address).
    fn ros_actionserver_take_goal(&mut self, server: u32) -> Result<(u32, u32), Fault> {
        let op = opcode::ACTIONSERVER_TAKE_GOAL;
        let r = checked(op, self.call(&[op, server])?)?;
        Ok((r[1], r[2]))
    }

    fn ros_actionserver_publish_feedback(&mut self, server: u32, goal: u32, msg: u32) -> Result<(), Fault> {
        let op = opcode::ACTIONSERVER_PUBLISH_FEEDBACK;
        checked(op, self.call(&[op, server, goal, msg])?).map(drop)
    }

    fn ros_actionclient_take_feedback(&mut self, client: u32, goal: u32) -> Result<u32, Fault> {
        let op = opcode::ACTIONCLIENT_TAKE_FEEDBACK;
        Ok(checked(op, self.call(&[op, client, goal])?)?[1])
    }

    fn ros_actionserver_send_result(&mut self, server: u32, goal: u32, msg: u32) -> Result<(), Fault> {
        let op = opcode::ACTIONSERVER_SEND_RESULT;
        checked(op, self.call(&[op, server, goal, msg])?).map(drop)
    }

    fn ros_actionclient_take_result(&mut self, client: u32, goal: u32) -> Result<u32, Fault> {
        let op = opcode::ACTIONCLIENT_TAKE_RESULT;
        Ok(checked(op, self.call(&[op, client, goal])?)?[1])
    }

    /// Root address of preallocated buffer `part` of a message resource.
    fn ros_message_address(&mut self, msg: u32, part: u32) -> Result<u32, Fault> {
        Ok(checked(opcode::MESSAGE_ADDRESS, self.call(&[opcode::MESSAGE_ADDRESS, msg, part])?)?[1])
    }
}

impl<T: ThreadPort + ?Sized> RosCalls for T {}

/// Preallocated buffer sizing for one part of a message resource.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferRequest {
    pub resource: String,
    pub part: u32,
    pub capacities: BTreeMap<String, u32>,
}

impl BufferRequest {
    pub fn new(resource: &str, part: u32, capacities: &[(&str, u32)]) -> Self {
        BufferRequest {
            resource: resource.into(),
            part,
            capacities: capacities.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }
}

/// Static facts a behavior may use: resource handles, message layouts and
/// configuration parameters. The equivalent of compile-time constants in an
/// HLS thread.
#[derive(Debug, Clone)]
pub struct ThreadContext {
    pub(crate) handles: HashMap<String, u32>,
    pub(crate) parts: HashMap<String, Vec<TypeHandle>>,
    pub(crate) registry: Arc<TypeRegistry>,
    pub params: BTreeMap<String, String>,
}

impl ThreadContext {
    pub fn handle(&self, resource: &str) -> Result<u32, Fault> {
        self.handles.get(resource).copied().ok_or_else(|| Fault::UnknownResource(resource.into()))
    }

    /// Byte offset of `path` inside part `part` of message resource `resource`.
    pub fn offset_of(&self, resource: &str, part: u32, path: &str) -> Result<u32, Fault> {
        let ty = self
            .parts
            .get(resource)
            .and_then(|p| p.get(part as usize))
            .ok_or_else(|| Fault::UnknownResource(format!("{resource}[{part}]")))?;
        Ok(self.registry.offset_of(*ty, path)?)
    }

    /// Inline size of part `part` of message resource `resource`.
    pub fn size_of(&self, resource: &str, part: u32) -> Result<u32, Fault> {
        let ty = self
            .parts
            .get(resource)
            .and_then(|p| p.get(part as usize))
            .ok_or_else(|| Fault::UnknownResource(format!("{resource}[{part}]")))?;
        Ok(self.registry.layout(*ty)?.size)
    }

    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.get(key).map(String::as_str)
    }

    /// Numeric parameter `key`, or `default` when absent.
    pub fn param_u32(&self, key: &str, default: u32) -> Result<u32, Fault> {
        match self.param(key) {
            None => Ok(default),
            Some(v) => v.trim().parse().map_err(|_| Fault::Behavior(format!("parameter {key}={v:?} is not a number"))),
        }
    }

    /// Resource name from parameter `key`, or `default`.
    pub fn resource_param<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.param(key).unwrap_or(default)
    }
}

/// A node body: sequential code restricted to a [`ThreadPort`].
pub trait Behavior: Send {
    /// Resource names the behavior will look up; checked at start.
    fn resources(&self, ctx: &ThreadContext) -> Vec<String> {
        let _ = ctx;
        Vec::new()
    }

    fn buffers(&self, ctx: &ThreadContext) -> Vec<BufferRequest> {
        let _ = ctx;
        Vec::new()
    }

    /// Runs until done or until a call fails. [`Fault::Shutdown`] is a clean
    /// stop.
    fn run(&mut self, port: &mut dyn ThreadPort, ctx: &ThreadContext) -> Result<(), Fault>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_lengths_are_stable() {
        use opcode::*;
        let table = [
            (SUBSCRIBER_TAKE, 2, 2),
            (PUBLISHER_PUBLISH, 3, 1),
            (SERVICESERVER_TAKE, 2, 2),
            (SERVICESERVER_SEND_RESPONSE, 3, 1),
            (SERVICECLIENT_SEND_REQUEST, 3, 1),
            (SERVICECLIENT_TAKE, 2, 2),
            (ACTIONCLIENT_SEND_GOAL, 3, 2),
            (ACTIONSERVER_TAKE_GOAL, 2, 3),
            (ACTIONSERVER_PUBLISH_FEEDBACK, 4, 1),
            (ACTIONCLIENT_TAKE_FEEDBACK, 3, 2),
            (ACTIONSERVER_SEND_RESULT, 4, 1),
            (ACTIONCLIENT_TAKE_RESULT, 3, 2),
            (MESSAGE_ADDRESS, 3, 2),
            (0xdead, 1, 1),
        ];
        for (op, c, r) in table {
            assert_eq!((command_len(op), response_len(op)), (c, r), "opcode {op:#x}");
            assert!(c <= OSIF_FIFO_DEPTH && r <= OSIF_FIFO_DEPTH);
        }
    }
}

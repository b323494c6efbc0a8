//! Actions built from two services and one topic: `<name>/goal` accepts a
//! goal, `<name>/result` delivers the result (its request id is the goal id),
//! and `<name>/feedback` carries progress with the goal id as correlation id.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use super::{MwError, Node, Publisher, ServiceClient, ServiceServer, Subscriber};
use crate::msg::{FieldType, MessageInstance, MessageTypeDef, MsgKind, Scalar, TypeHandle};

/// Feedback queue depth on the client side.
pub const FEEDBACK_QUEUE_DEPTH: usize = 64;

pub fn goal_response_def() -> MessageTypeDef {
    MessageTypeDef::new("action_msgs", MsgKind::Msg, "GoalResponse").field("accepted", FieldType::Scalar(Scalar::U8))
}

pub fn result_request_def() -> MessageTypeDef {
    MessageTypeDef::new("action_msgs", MsgKind::Msg, "ResultRequest")
}

pub fn goal_service(action: &str) -> String {
    format!("{action}/goal")
}

pub fn result_service(action: &str) -> String {
    format!("{action}/result")
}

pub fn feedback_topic(action: &str) -> String {
    format!("{action}/feedback")
}

fn remaining(deadline: Option<Instant>) -> Option<Duration> {
    deadline.map(|d| d.saturating_duration_since(Instant::now()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GoalPhase {
    Active,
    Done,
}

pub struct ActionServer {
    name: String,
    goal_srv: ServiceServer,
    result_srv: ServiceServer,
    feedback: Publisher,
    accept_ty: TypeHandle,
    goals: Mutex<HashMap<u64, GoalPhase>>,
    result_requests: Mutex<HashSet<u64>>,
}

pub struct ActionClient {
    name: String,
    goal_cli: ServiceClient,
    result_cli: ServiceClient,
    feedback: Subscriber,
    result_req_ty: TypeHandle,
    goals: Mutex<HashSet<u64>>,
    accepted: Mutex<HashSet<u64>>,
    buffered: Mutex<HashMap<u64, VecDeque<MessageInstance>>>,
}

impl Node {
    fn action_builtins(&self) -> Result<(TypeHandle, TypeHandle), MwError> {
        let reg = &self.shared.registry;
        Ok((reg.register_or_get(goal_response_def())?, reg.register_or_get(result_request_def())?))
    }

    pub fn create_action_server(
        &self,
        name: &str,
        goal: TypeHandle,
        feedback: TypeHandle,
        result: TypeHandle,
        poll: Duration,
    ) -> Result<ActionServer, MwError> {
        super::check_name(name)?;
        let (accept_ty, result_req_ty) = self.action_builtins()?;
        Ok(ActionServer {
            name: name.into(),
            goal_srv: self.create_service_server(&goal_service(name), goal, accept_ty, poll)?,
            result_srv: self.create_service_server(&result_service(name), result_req_ty, result, poll)?,
            feedback: self.create_publisher_inner(&feedback_topic(name), feedback, true)?,
            accept_ty,
            goals: Mutex::new(HashMap::new()),
            result_requests: Mutex::new(HashSet::new()),
        })
    }

    pub fn create_action_client(
        &self,
        name: &str,
        goal: TypeHandle,
        feedback: TypeHandle,
        result: TypeHandle,
        poll: Duration,
    ) -> Result<ActionClient, MwError> {
        super::check_name(name)?;
        let (accept_ty, result_req_ty) = self.action_builtins()?;
        Ok(ActionClient {
            name: name.into(),
            goal_cli: self.create_service_client(&goal_service(name), goal, accept_ty, poll)?,
            result_cli: self.create_service_client(&result_service(name), result_req_ty, result, poll)?,
            feedback: self.create_subscriber(&feedback_topic(name), feedback, FEEDBACK_QUEUE_DEPTH, poll)?,
            result_req_ty,
            goals: Mutex::new(HashSet::new()),
            accepted: Mutex::new(HashSet::new()),
            buffered: Mutex::new(HashMap::new()),
        })
    }
}

impl ActionServer {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn goal_type(&self) -> TypeHandle {
        self.goal_srv.request_type()
    }

    pub fn feedback_type(&self) -> TypeHandle {
        self.feedback.message_type()
    }

    pub fn result_type(&self) -> TypeHandle {
        self.result_srv.response_type()
    }

    /// Takes and accepts the next goal.
    pub fn take_goal(&self, timeout: Option<Duration>) -> Result<(u64, MessageInstance), MwError> {
        let (goal, msg) = self.goal_srv.take_request(timeout)?;
        let reg = &self.goal_srv.ctx.shared.registry;
        let ack = reg.alloc_with(&self.goal_srv.ctx.shared.arena, self.accept_ty, &[])?;
        reg.write_word(&ack, "accepted", 1)?;
        self.goals.lock().unwrap().insert(goal, GoalPhase::Active);
        self.goal_srv.send_response(goal, &ack)?;
        Ok((goal, msg))
    }

    fn phase(&self, goal: u64) -> Result<(), MwError> {
        match self.goals.lock().unwrap().get(&goal) {
            None => Err(MwError::UnknownGoal(goal)),
            Some(GoalPhase::Done) => Err(MwError::GoalNotActive(goal)),
            Some(GoalPhase::Active) => Ok(()),
        }
    }

    pub fn publish_feedback(&self, goal: u64, msg: &MessageInstance) -> Result<(), MwError> {
        self.phase(goal)?;
        self.feedback.publish_with_corr(msg, goal)
    }

    /// Delivers the result once the client's result request has arrived, and
    /// closes the goal.
    pub fn send_result(&self, goal: u64, msg: &MessageInstance, timeout: Option<Duration>) -> Result<(), MwError> {
        self.phase(goal)?;
        let deadline = timeout.map(|t| Instant::now() + t);
        while !self.result_requests.lock().unwrap().remove(&goal) {
            let (corr, _req) = self.result_srv.take_request(remaining(deadline))?;
            self.result_requests.lock().unwrap().insert(corr);
        }
        self.goals.lock().unwrap().insert(goal, GoalPhase::Done);
        self.result_srv.send_response(goal, msg)
    }
}

impl ActionClient {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn goal_type(&self) -> TypeHandle {
        self.goal_cli.request_type()
    }

    pub fn feedback_type(&self) -> TypeHandle {
        self.feedback.message_type()
    }

    pub fn result_type(&self) -> TypeHandle {
        self.result_cli.response_type()
    }

    /// Sends the goal and the matching result request; returns the goal id.
    pub fn send_goal(&self, msg: &MessageInstance) -> Result<u64, MwError> {
        let goal = self.goal_cli.send_request(msg)?;
        let sh = &self.goal_cli.ctx.shared;
        let req = sh.registry.alloc_with(&sh.arena, self.result_req_ty, &[])?;
        self.result_cli.send_request_with_corr(&req, goal)?;
        self.goals.lock().unwrap().insert(goal);
        Ok(goal)
    }

    fn known(&self, goal: u64) -> Result<(), MwError> {
        if self.goals.lock().unwrap().contains(&goal) {
            Ok(())
        } else {
            Err(MwError::UnknownGoal(goal))
        }
    }

    /// Waits for the server's acceptance of `goal`.
    pub fn wait_accepted(&self, goal: u64, timeout: Option<Duration>) -> Result<bool, MwError> {
        self.known(goal)?;
        if self.accepted.lock().unwrap().contains(&goal) {
            return Ok(true);
        }
        let resp = self.goal_cli.take_response(goal, timeout)?;
        let ok = self.goal_cli.ctx.shared.registry.read_word(&resp, "accepted")? != 0;
        if ok {
            self.accepted.lock().unwrap().insert(goal);
        }
        Ok(ok)
    }

    /// Next feedback message for `goal`, in publish order.
    pub fn take_feedback(&self, goal: u64, timeout: Option<Duration>) -> Result<MessageInstance, MwError> {
        self.known(goal)?;
        if let Some(m) = self.buffered.lock().unwrap().get_mut(&goal).and_then(|q| q.pop_front()) {
            return Ok(m);
        }
        let deadline = timeout.map(|t| Instant::now() + t);
        loop {
            let env = self.feedback.take_envelope(remaining(deadline))?;
            let corr = env.corr;
            let msg = env.into_message().unwrap();
            if corr == goal {
                return Ok(msg);
            }
            if self.goals.lock().unwrap().contains(&corr) {
                self.buffered.lock().unwrap().entry(corr).or_default().push_back(msg);
            }
        }
    }

    /// Waits for acceptance and then the result; closes the goal.
    pub fn take_result(&self, goal: u64, timeout: Option<Duration>) -> Result<MessageInstance, MwError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        if !self.wait_accepted(goal, remaining(deadline))? {
            return Err(MwError::GoalNotActive(goal));
        }
        let result = self.result_cli.take_response(goal, remaining(deadline))?;
        self.goals.lock().unwrap().remove(&goal);
        self.accepted.lock().unwrap().remove(&goal);
        self.buffered.lock().unwrap().remove(&goal);
        Ok(result)
    }
}

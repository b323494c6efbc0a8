use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Duration;

use super::{check_name, EndpointCtx, EndpointId, Envelope, MwError, Node, SubQueue, TopicState};
use crate::msg::{MessageInstance, TypeHandle};

pub struct Publisher {
    ctx: EndpointCtx,
    topic: String,
    ty: TypeHandle,
    feedback: bool,
}

pub struct Subscriber {
    ctx: EndpointCtx,
    id: EndpointId,
    topic: String,
    ty: TypeHandle,
}

impl Node {
    fn join_topic(&self, topic: &str, ty: TypeHandle) -> Result<(), MwError> {
        check_name(topic)?;
        self.shared.registry.get(ty)?;
        let st = self.shared.lock();
        if let Some(t) = st.topics.get(topic) {
            self.shared.check_type(topic, t.ty, ty)?;
        }
        Ok(())
    }

    pub fn create_publisher(&self, topic: &str, ty: TypeHandle) -> Result<Publisher, MwError> {
        self.create_publisher_inner(topic, ty, false)
    }

    pub(crate) fn create_publisher_inner(
        &self,
        topic: &str,
        ty: TypeHandle,
        feedback: bool,
    ) -> Result<Publisher, MwError> {
        self.join_topic(topic, ty)?;
        self.shared
            .lock()
            .topics
            .entry(topic.into())
            .or_insert(TopicState { ty, publishers: 0, subscribers: Vec::new() })
            .publishers += 1;
        self.shared.endpoints_changed();
        Ok(Publisher { ctx: self.ctx(Duration::ZERO), topic: topic.into(), ty, feedback })
    }

    /// Keep-last subscriber: when `depth` messages are queued, the oldest is
    /// dropped to make room.
    pub fn create_subscriber(
        &self,
        topic: &str,
        ty: TypeHandle,
        depth: usize,
        poll: Duration,
    ) -> Result<Subscriber, MwError> {
        self.join_topic(topic, ty)?;
        let id = self.shared.next_id();
        {
            let mut st = self.shared.lock();
            st.topics
                .entry(topic.into())
                .or_insert(TopicState { ty, publishers: 0, subscribers: Vec::new() })
                .subscribers
                .push(id);
            st.subs
                .insert(id, SubQueue { topic: topic.into(), depth: depth.max(1), queue: VecDeque::new(), dropped: 0 });
        }
        self.shared.endpoints_changed();
        Ok(Subscriber { ctx: self.ctx(poll), id, topic: topic.into(), ty })
    }
}

fn leave_topic(ctx: &EndpointCtx, topic: &str, sub: Option<EndpointId>) {
    let mut st = ctx.shared.lock();
    if let Some(id) = sub {
        st.subs.remove(&id);
    }
    if let Some(t) = st.topics.get_mut(topic) {
        match sub {
            Some(id) => t.subscribers.retain(|&s| s != id),
            None => t.publishers -= 1,
        }
        if t.publishers == 0 && t.subscribers.is_empty() {
            st.topics.remove(topic);
        }
    }
    drop(st);
    ctx.shared.endpoints_changed();
}

impl Publisher {
    pub fn topic(&self) -> &str {
        &self.topic
    }

    pub fn message_type(&self) -> TypeHandle {
        self.ty
    }

    /// Queues a copy for every local subscriber and forwards to matched
    /// peers. The caller keeps ownership of `msg`.
    pub fn publish(&self, msg: &MessageInstance) -> Result<(), MwError> {
        self.publish_with_corr(msg, 0)
    }

    pub(crate) fn publish_with_corr(&self, msg: &MessageInstance, corr: u64) -> Result<(), MwError> {
        let sh = &self.ctx.shared;
        sh.check_type(&self.topic, self.ty, msg.ty())?;
        let bytes: Arc<[u8]> = sh.registry.serialize(msg)?.into();
        sh.enqueue_publish(&self.topic, corr, &self.ctx.node, bytes.clone());
        if let Some(link) = sh.link() {
            let fp = sh.registry.fingerprint(self.ty)?;
            link.publish(&self.topic, fp, corr, &bytes, self.feedback);
        }
        Ok(())
    }
}

impl Drop for Publisher {
    fn drop(&mut self) {
        leave_topic(&self.ctx, &self.topic, None);
    }
}

impl Subscriber {
    pub fn topic(&self) -> &str {
        &self.topic
    }

    pub fn message_type(&self) -> TypeHandle {
        self.ty
    }

    pub fn polling_period(&self) -> Duration {
        self.ctx.poll
    }

    /// Dequeues the oldest message, storing it into fresh arena blocks owned
    /// by the returned instance. `None` waits forever.
    pub fn take(&self, timeout: Option<Duration>) -> Result<MessageInstance, MwError> {
        Ok(self.take_envelope(timeout)?.into_message().unwrap())
    }

    pub fn take_envelope(&self, timeout: Option<Duration>) -> Result<Envelope, MwError> {
        let env = self.ctx.shared.wait_for(timeout, self.ctx.poll, &self.ctx.cancel, |st| {
            Ok(st.subs.get_mut(&self.id).and_then(|q| q.queue.pop_front()))
        })?;
        self.ctx.shared.store(env, self.ty)
    }

    pub fn queued(&self) -> usize {
        self.ctx.shared.lock().subs.get(&self.id).map_or(0, |q| q.queue.len())
    }

    pub fn dropped(&self) -> u64 {
        self.ctx.shared.lock().subs.get(&self.id).map_or(0, |q| q.dropped)
    }
}

impl Drop for Subscriber {
    fn drop(&mut self) {
        leave_topic(&self.ctx, &self.topic, Some(self.id));
    }
}

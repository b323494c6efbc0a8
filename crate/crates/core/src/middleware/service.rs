use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use super::{
    check_name, service_fingerprint, ClientState, EndpointCtx, EndpointId, Envelope, MwError, Node, Payload, Request,
    Route, ServerState, ServiceState,
};
use crate::msg::{MessageInstance, TypeHandle};

pub struct ServiceServer {
    pub(super) ctx: EndpointCtx,
    id: EndpointId,
    name: String,
    req: TypeHandle,
    resp: TypeHandle,
}

pub struct ServiceClient {
    pub(super) ctx: EndpointCtx,
    id: EndpointId,
    name: String,
    req: TypeHandle,
    resp: TypeHandle,
}

impl Node {
    fn join_service(&self, name: &str, req: TypeHandle, resp: TypeHandle) -> Result<(), MwError> {
        check_name(name)?;
        self.shared.registry.get(req)?;
        self.shared.registry.get(resp)?;
        let st = self.shared.lock();
        if let Some(s) = st.services.get(name) {
            self.shared.check_type(name, s.req, req)?;
            self.shared.check_type(name, s.resp, resp)?;
        }
        Ok(())
    }

    pub fn create_service_server(
        &self,
        name: &str,
        req: TypeHandle,
        resp: TypeHandle,
        poll: Duration,
    ) -> Result<ServiceServer, MwError> {
        self.join_service(name, req, resp)?;
        let id = self.shared.next_id();
        {
            let mut st = self.shared.lock();
            let svc = st.services.entry(name.into()).or_insert(ServiceState { req, resp, server: None, clients: 0 });
            if svc.server.is_some() {
                return Err(MwError::DuplicateServer(name.into()));
            }
            svc.server = Some(ServerState {
                id,
                queue: VecDeque::new(),
                outstanding: HashMap::new(),
                answered: HashSet::new(),
                answered_order: VecDeque::new(),
            });
        }
        self.shared.endpoints_changed();
        Ok(ServiceServer { ctx: self.ctx(poll), id, name: name.into(), req, resp })
    }

    pub fn create_service_client(
        &self,
        name: &str,
        req: TypeHandle,
        resp: TypeHandle,
        poll: Duration,
    ) -> Result<ServiceClient, MwError> {
        self.join_service(name, req, resp)?;
        let id = self.shared.next_id();
        {
            let mut st = self.shared.lock();
            st.services.entry(name.into()).or_insert(ServiceState { req, resp, server: None, clients: 0 }).clients += 1;
            st.clients.insert(id, ClientState { service: name.into(), pending: HashSet::new(), inbox: HashMap::new() });
        }
        self.shared.endpoints_changed();
        Ok(ServiceClient { ctx: self.ctx(poll), id, name: name.into(), req, resp })
    }
}

fn release_service(ctx: &EndpointCtx, name: &str, f: impl FnOnce(&mut ServiceState)) {
    let mut st = ctx.shared.lock();
    if let Some(s) = st.services.get_mut(name) {
        f(s);
        if s.server.is_none() && s.clients == 0 {
            st.services.remove(name);
        }
    }
    drop(st);
    ctx.shared.endpoints_changed();
}

impl ServiceServer {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn request_type(&self) -> TypeHandle {
        self.req
    }

    pub fn response_type(&self) -> TypeHandle {
        self.resp
    }

    pub fn polling_period(&self) -> Duration {
        self.ctx.poll
    }

    /// Takes the oldest request, returning its correlation id and the request
    /// stored into fresh arena blocks.
    pub fn take_request(&self, timeout: Option<Duration>) -> Result<(u64, MessageInstance), MwError> {
        let env = self.ctx.shared.wait_for(timeout, self.ctx.poll, &self.ctx.cancel, |st| {
            let server = st.services.get_mut(&self.name).and_then(|s| s.server.as_mut());
            let Some(server) = server.filter(|s| s.id == self.id) else {
                return Ok(None);
            };
            Ok(server.queue.pop_front().map(|r| {
                server.outstanding.insert(r.corr, r.route);
                r.env
            }))
        })?;
        let corr = env.corr;
        match self.ctx.shared.store(env, self.req) {
            Ok(env) => Ok((corr, env.into_message().unwrap())),
            Err(e) => {
                // the request can never be answered; forget it
                if let Some(s) = self.ctx.shared.lock().services.get_mut(&self.name).and_then(|s| s.server.as_mut()) {
                    s.outstanding.remove(&corr);
                }
                Err(e)
            }
        }
    }

    /// Answers request `corr`. Each id is answered at most once.
    pub fn send_response(&self, corr: u64, msg: &MessageInstance) -> Result<(), MwError> {
        let sh = &self.ctx.shared;
        sh.check_type(&self.name, self.resp, msg.ty())?;
        let bytes: Arc<[u8]> = sh.registry.serialize(msg)?.into();
        let mut st = sh.lock();
        let server = st
            .services
            .get_mut(&self.name)
            .and_then(|s| s.server.as_mut())
            .filter(|s| s.id == self.id)
            .ok_or(MwError::Shutdown)?;
        let route = match server.outstanding.remove(&corr) {
            Some(r) => r,
            None if server.answered.contains(&corr) => return Err(MwError::AlreadyAnswered(corr)),
            None => return Err(MwError::UnknownCorrelation(corr)),
        };
        server.remember_answered(corr);
        match route {
            Route::Local(client) => {
                if let Some(c) = st.clients.get_mut(&client) {
                    if c.pending.remove(&corr) {
                        c.inbox.insert(
                            corr,
                            Envelope {
                                name: self.name.clone(),
                                corr,
                                source: self.ctx.node.clone(),
                                payload: Payload::Bytes(bytes),
                            },
                        );
                    }
                }
                sh.cond.notify_all();
            }
            Route::Remote(peer) => {
                drop(st);
                if let Some(link) = sh.link() {
                    let fp =
                        service_fingerprint(sh.registry.fingerprint(self.req)?, sh.registry.fingerprint(self.resp)?);
                    link.send_response(peer, &self.name, fp, corr, &bytes);
                }
            }
        }
        Ok(())
    }
}

impl Drop for ServiceServer {
    fn drop(&mut self) {
        let id = self.id;
        release_service(&self.ctx, &self.name, |s| {
            if s.server.as_ref().is_some_and(|srv| srv.id == id) {
                s.server = None;
            }
        });
    }
}

impl ServiceClient {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn request_type(&self) -> TypeHandle {
        self.req
    }

    pub fn response_type(&self) -> TypeHandle {
        self.resp
    }

    pub fn polling_period(&self) -> Duration {
        self.ctx.poll
    }

    /// Sends a request, returning its fresh correlation id.
    pub fn send_request(&self, msg: &MessageInstance) -> Result<u64, MwError> {
        let corr = self.ctx.shared.next_corr();
        self.send_request_with_corr(msg, corr)?;
        Ok(corr)
    }

    pub(crate) fn send_request_with_corr(&self, msg: &MessageInstance, corr: u64) -> Result<(), MwError> {
        let sh = &self.ctx.shared;
        sh.check_type(&self.name, self.req, msg.ty())?;
        let bytes: Arc<[u8]> = sh.registry.serialize(msg)?.into();
        let mut st = sh.lock();
        let local = st.services.get(&self.name).is_some_and(|s| s.server.is_some());
        if local {
            st.clients.get_mut(&self.id).expect("client registered").pending.insert(corr);
            let server = st.services.get_mut(&self.name).unwrap().server.as_mut().unwrap();
            server.queue.push_back(Request {
                corr,
                route: Route::Local(self.id),
                env: Envelope {
                    name: self.name.clone(),
                    corr,
                    source: self.ctx.node.clone(),
                    payload: Payload::Bytes(bytes),
                },
            });
            sh.cond.notify_all();
            return Ok(());
        }
        let fp = service_fingerprint(sh.registry.fingerprint(self.req)?, sh.registry.fingerprint(self.resp)?);
        match sh.link() {
            Some(link) if link.has_server(&self.name, fp) => {
                st.clients.get_mut(&self.id).expect("client registered").pending.insert(corr);
                drop(st);
                let sent = link.send_request(&self.name, fp, corr, &bytes);
                if sent.is_err() {
                    if let Some(c) = sh.lock().clients.get_mut(&self.id) {
                        c.pending.remove(&corr);
                    }
                }
                sent
            }
            _ => Err(MwError::NoServer(self.name.clone())),
        }
    }

    /// Waits for the response to `corr`. Only responses to this client's
    /// own requests are ever visible here.
    pub fn take_response(&self, corr: u64, timeout: Option<Duration>) -> Result<MessageInstance, MwError> {
        let env = self.ctx.shared.wait_for(timeout, self.ctx.poll, &self.ctx.cancel, |st| {
            let c = st.clients.get_mut(&self.id).expect("client registered");
            match c.inbox.remove(&corr) {
                Some(env) => Ok(Some(env)),
                None if c.pending.contains(&corr) => Ok(None),
                None => Err(MwError::UnknownCorrelation(corr)),
            }
        })?;
        Ok(self.ctx.shared.store(env, self.resp)?.into_message().unwrap())
    }

    /// Requests sent by this client that are still awaiting a response.
    pub fn pending(&self) -> usize {
        self.ctx.shared.lock().clients.get(&self.id).map_or(0, |c| c.pending.len() + c.inbox.len())
    }
}

impl Drop for ServiceClient {
    fn drop(&mut self) {
        self.ctx.shared.lock().clients.remove(&self.id);
        release_service(&self.ctx, &self.name, |s| s.clients -= 1);
    }
}

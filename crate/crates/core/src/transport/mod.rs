//! TCP links joining the graphs of several processes.
//!
//! Each process listens on its bind address and dials every configured peer.
//! Both sides open a connection with an announce frame carrying their process
//! tag and local endpoint list; later announces replace the list. When two
//! connections end up joining the same pair of processes, both sides keep the
//! one dialed by the lower tag. Frames for a peer whose connection is gone are
//! dropped; there is no replay after a reconnect.

pub mod wire;

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use thiserror::Error;

use crate::middleware::{EndpointInfo, EndpointKind, Graph, MwError, RemoteLink};
pub use wire::{FrameType, WireError, WireFrame};

const DIAL_BACKOFF_MIN: Duration = Duration::from_millis(20);
const DIAL_BACKOFF_MAX: Duration = Duration::from_millis(1000);
const DIAL_TIMEOUT: Duration = Duration::from_secs(2);
const ACCEPT_POLL: Duration = Duration::from_millis(10);
/// Longest a new connection may take to send its announce.
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerConfig {
    pub bind: SocketAddr,
    pub peers: Vec<SocketAddr>,
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("peer list contains the bind address {0}")]
    SelfPeer(SocketAddr),
    #[error("peer {0} listed twice")]
    DuplicatePeer(SocketAddr),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
}

impl PeerConfig {
    pub fn new(bind: SocketAddr, peers: Vec<SocketAddr>) -> Result<Self, TransportError> {
        let cfg = PeerConfig { bind, peers };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TransportError> {
        for (i, p) in self.peers.iter().enumerate() {
            if *p == self.bind {
                return Err(TransportError::SelfPeer(*p));
            }
            if self.peers[..i].contains(p) {
                return Err(TransportError::DuplicatePeer(*p));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportEvent {
    LinkUp {
        peer: u64,
        addr: SocketAddr,
    },
    LinkDown {
        peer: u64,
        addr: SocketAddr,
    },
    /// A peer announced `name` with a different type than ours.
    FingerprintMismatch {
        peer: u64,
        name: String,
        local: u64,
        remote: u64,
    },
}

struct Conn {
    id: u64,
    peer: u64,
    addr: SocketAddr,
    /// Tag of the process that dialed this connection.
    dialer: u64,
    tx: Sender<Vec<u8>>,
    stream: TcpStream,
    endpoints: RwLock<Vec<EndpointInfo>>,
}

impl Conn {
    fn send(&self, frame: &WireFrame) -> bool {
        match frame.encode() {
            Ok(b) => self.tx.send(b).is_ok(),
            Err(e) => {
                log::warn!("not sending frame on {}: {e}", frame.name);
                false
            }
        }
    }

    fn has(&self, kind: EndpointKind, name: &str) -> Option<u64> {
        self.endpoints.read().unwrap().iter().find(|e| e.kind == kind && e.name == name).map(|e| e.fingerprint)
    }

    fn close(&self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

struct Inner {
    tag: u64,
    bind: SocketAddr,
    graph: Graph,
    max_body: usize,
    conns: Mutex<HashMap<u64, Arc<Conn>>>,
    /// Every open connection, including ones that lost deduplication.
    all: Mutex<HashMap<u64, Arc<Conn>>>,
    next_conn: AtomicU64,
    events: Sender<TransportEvent>,
    stop: AtomicBool,
    threads: Mutex<Vec<JoinHandle<()>>>,
    warned: Mutex<std::collections::HashSet<(u64, String)>>,
}

/// Running transport. Dropping it closes every connection and detaches the
/// graph from its peers.
pub struct Transport {
    inner: Arc<Inner>,
    events: Receiver<TransportEvent>,
    local: SocketAddr,
}

impl Transport {
    pub fn start(cfg: &PeerConfig, graph: &Graph) -> Result<Transport, TransportError> {
        cfg.validate()?;
        let listener = TcpListener::bind(cfg.bind).map_err(|source| TransportError::Bind { addr: cfg.bind, source })?;
        let local = listener.local_addr().map_err(|source| TransportError::Bind { addr: cfg.bind, source })?;
        listener.set_nonblocking(true).map_err(|source| TransportError::Bind { addr: cfg.bind, source })?;
        let (etx, erx) = unbounded();
        let inner = Arc::new(Inner {
            tag: graph.process_tag() as u64,
            bind: local,
            graph: graph.clone(),
            max_body: graph.registry().max_message_size() + wire::FIXED_OVERHEAD + u16::MAX as usize,
            conns: Mutex::new(HashMap::new()),
            all: Mutex::new(HashMap::new()),
            next_conn: AtomicU64::new(1),
            events: etx,
            stop: AtomicBool::new(false),
            threads: Mutex::new(Vec::new()),
            warned: Mutex::new(Default::default()),
        });
        graph.set_remote_link(Some(inner.clone() as Arc<dyn RemoteLink>));

        let i = inner.clone();
        inner.spawn("transport-accept", move || i.accept_loop(listener));
        for &peer in &cfg.peers {
            let i = inner.clone();
            inner.spawn(&format!("transport-dial-{peer}"), move || i.dial_loop(peer));
        }
        log::info!("transport listening on {local} with {} peer(s)", cfg.peers.len());
        Ok(Transport { inner, events: erx, local })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }

    pub fn events(&self) -> &Receiver<TransportEvent> {
        &self.events
    }

    /// Tags of currently connected peers.
    pub fn peers(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.inner.conns.lock().unwrap().keys().copied().collect();
        v.sort();
        v
    }

    /// Endpoints most recently announced by connected peers.
    pub fn remote_endpoints(&self) -> Vec<(u64, EndpointInfo)> {
        let conns = self.inner.conns.lock().unwrap();
        let mut out: Vec<(u64, EndpointInfo)> = conns
            .values()
            .flat_map(|c| c.endpoints.read().unwrap().iter().map(|e| (c.peer, e.clone())).collect::<Vec<_>>())
            .collect();
        out.sort();
        out
    }

    /// Waits until some peer announces `kind` on `name`.
    pub fn wait_for_remote(&self, kind: EndpointKind, name: &str, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if self.inner.conns.lock().unwrap().values().any(|c| c.has(kind, name).is_some()) {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    pub fn shutdown(&self) {
        let inner = &self.inner;
        if inner.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        inner.graph.set_remote_link(None);
        for c in inner.all.lock().unwrap().values() {
            c.close();
        }
        let threads = std::mem::take(&mut *inner.threads.lock().unwrap());
        for t in threads {
            let _ = t.join();
        }
    }
}

impl Drop for Transport {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl Inner {
    fn spawn(self: &Arc<Self>, name: &str, f: impl FnOnce() + Send + 'static) {
        match std::thread::Builder::new().name(name.into()).spawn(f) {
            Ok(h) => self.threads.lock().unwrap().push(h),
            Err(e) => log::error!("cannot spawn {name}: {e}"),
        }
    }

    fn stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    fn accept_loop(self: Arc<Self>, listener: TcpListener) {
        while !self.stopped() {
            match listener.accept() {
                Ok((stream, addr)) => {
                    let i = self.clone();
                    self.spawn(&format!("transport-conn-{addr}"), move || {
                        i.run_connection(stream, addr, false);
                    });
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => std::thread::sleep(ACCEPT_POLL),
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    std::thread::sleep(ACCEPT_POLL);
                }
            }
        }
    }

    /// Keeps a connection to `addr` open, redialing with backoff after a
    /// failure or link loss.
    fn dial_loop(self: Arc<Self>, addr: SocketAddr) {
        let mut backoff = DIAL_BACKOFF_MIN;
        let mut last_peer = None;
        while !self.stopped() {
            if let Some(p) = last_peer {
                if self.conns.lock().unwrap().contains_key(&p) {
                    // connected through a connection the peer dialed
                    std::thread::sleep(DIAL_BACKOFF_MIN);
                    continue;
                }
            }
            match TcpStream::connect_timeout(&addr, DIAL_TIMEOUT) {
                Ok(stream) => {
                    backoff = DIAL_BACKOFF_MIN;
                    if let Some(p) = self.run_connection(stream, addr, true) {
                        last_peer = Some(p);
                    }
                }
                Err(e) => {
                    log::debug!("dial {addr} failed: {e}");
                    let deadline = Instant::now() + backoff;
                    while Instant::now() < deadline && !self.stopped() {
                        std::thread::sleep(DIAL_BACKOFF_MIN.min(backoff));
                    }
                    backoff = (backoff * 2).min(DIAL_BACKOFF_MAX);
                }
            }
        }
    }

    fn announce_frame(&self) -> WireFrame {
        let eps = self.graph.local_endpoints();
        WireFrame::new(FrameType::Announce, &self.bind.to_string(), 0, self.tag, wire::encode_endpoints(&eps))
    }

    /// Handshake, then reads frames until the link drops. Returns the peer
    /// tag once the handshake succeeded.
    fn run_connection(self: &Arc<Self>, stream: TcpStream, addr: SocketAddr, dialed: bool) -> Option<u64> {
        let _ = stream.set_nodelay(true);
        let _ = stream.set_nonblocking(false);
        let write_half = stream.try_clone().ok()?;
        let (tx, rx) = unbounded::<Vec<u8>>();
        let writer_stream = write_half.try_clone().ok()?;
        let wname = format!("transport-write-{addr}");
        let writer = std::thread::Builder::new().name(wname).spawn(move || write_loop(writer_stream, rx)).ok()?;

        let announce = self.announce_frame().encode().ok()?;
        let _ = tx.send(announce);

        let mut reader = BufReader::new(stream);
        let _ = reader.get_ref().set_read_timeout(Some(HANDSHAKE_TIMEOUT));
        let first = match WireFrame::read_from(&mut reader, self.max_body) {
            Ok(Some(f)) if f.frame_type == FrameType::Announce => f,
            other => {
                log::warn!("handshake with {addr} failed: {other:?}");
                let _ = write_half.shutdown(Shutdown::Both);
                drop(tx);
                let _ = writer.join();
                return None;
            }
        };
        let _ = reader.get_ref().set_read_timeout(None);
        let peer = first.corr;
        let endpoints = wire::decode_endpoints(&first.payload).unwrap_or_default();
        let conn = Arc::new(Conn {
            id: self.next_conn.fetch_add(1, Ordering::Relaxed),
            peer,
            addr,
            dialer: if dialed { self.tag } else { peer },
            tx,
            stream: write_half,
            endpoints: RwLock::new(Vec::new()),
        });
        self.all.lock().unwrap().insert(conn.id, conn.clone());
        self.set_endpoints(&conn, endpoints);
        self.activate(&conn);
        if self.stopped() {
            conn.close();
        }

        loop {
            match WireFrame::read_from(&mut reader, self.max_body) {
                Ok(Some(f)) => self.handle(&conn, f),
                Ok(None) => break,
                Err(e) => {
                    if !self.stopped() {
                        log::warn!("link to {addr} failed: {e}");
                    }
                    break;
                }
            }
        }
        conn.close();
        self.all.lock().unwrap().remove(&conn.id);
        let was_active = {
            let mut conns = self.conns.lock().unwrap();
            if conns.get(&peer).map(|c| c.id) == Some(conn.id) {
                conns.remove(&peer);
                true
            } else {
                false
            }
        };
        if was_active {
            log::info!("link to peer {peer:#x} at {addr} down");
            let _ = self.events.send(TransportEvent::LinkDown { peer, addr });
            self.promote(peer);
        }
        drop(conn);
        let _ = writer.join();
        Some(peer)
    }

    /// Makes `conn` the active connection to its peer unless a preferred one
    /// is already active.
    fn activate(&self, conn: &Arc<Conn>) {
        let mut conns = self.conns.lock().unwrap();
        let (keep, fresh) = match conns.get(&conn.peer) {
            None => (true, true),
            Some(cur) => (conn.dialer < cur.dialer, false),
        };
        if keep {
            if let Some(old) = conns.insert(conn.peer, conn.clone()) {
                log::debug!("replacing duplicate connection to {:#x}", conn.peer);
                old.close();
            }
        } else {
            log::debug!("dropping duplicate connection to {:#x}", conn.peer);
            conn.close();
        }
        drop(conns);
        if keep && fresh {
            log::info!("link to peer {:#x} at {} up", conn.peer, conn.addr);
            let _ = self.events.send(TransportEvent::LinkUp { peer: conn.peer, addr: conn.addr });
        }
    }

    /// After the active connection to `peer` closed, adopt another open one.
    fn promote(&self, peer: u64) {
        let candidate = self.all.lock().unwrap().values().filter(|c| c.peer == peer).min_by_key(|c| c.dialer).cloned();
        if let Some(c) = candidate {
            self.activate(&c);
        }
    }

    fn set_endpoints(&self, conn: &Conn, eps: Vec<EndpointInfo>) {
        let local = self.graph.local_endpoints();
        for e in &eps {
            let clash =
                local.iter().find(|l| l.name == e.name && l.fingerprint != e.fingerprint && compatible(l.kind, e.kind));
            if let Some(l) = clash {
                self.mismatch(conn.peer, &e.name, l.fingerprint, e.fingerprint);
            }
        }
        *conn.endpoints.write().unwrap() = eps;
    }

    fn mismatch(&self, peer: u64, name: &str, local: u64, remote: u64) {
        if self.warned.lock().unwrap().insert((peer, name.to_string())) {
            log::warn!(
                "type fingerprint mismatch with peer {peer:#x} on {name:?}: local {local:#018x}, remote {remote:#018x}"
            );
            let _ = self.events.send(TransportEvent::FingerprintMismatch { peer, name: name.into(), local, remote });
        }
    }

    fn handle(&self, conn: &Conn, f: WireFrame) {
        let payload: Arc<[u8]> = f.payload.into();
        match f.frame_type {
            FrameType::Announce => match wire::decode_endpoints(&payload) {
                Ok(eps) => self.set_endpoints(conn, eps),
                Err(e) => log::warn!("bad announce from {}: {e}", conn.addr),
            },
            FrameType::Publish | FrameType::ActionFeedback => {
                let source = conn.addr.to_string();
                self.graph.deliver_remote_publish(&f.name, f.fingerprint, f.corr, &source, payload);
            }
            FrameType::SrvRequest => {
                if !self.graph.deliver_remote_request(conn.peer, &f.name, f.fingerprint, f.corr, payload) {
                    log::warn!("no local server {:?} for request from {}", f.name, conn.addr);
                }
            }
            FrameType::SrvResponse => {
                if !self.graph.deliver_remote_response(&f.name, f.corr, payload) {
                    log::debug!("unmatched response on {:?} (corr {:#x})", f.name, f.corr);
                }
            }
        }
    }

    fn active(&self) -> Vec<Arc<Conn>> {
        self.conns.lock().unwrap().values().cloned().collect()
    }
}

/// Whether endpoints of these kinds on the same name would be matched.
fn compatible(a: EndpointKind, b: EndpointKind) -> bool {
    use EndpointKind::*;
    matches!((a, b), (Publisher, Subscriber) | (Subscriber, Publisher) | (Server, Client) | (Client, Server))
}

fn write_loop(stream: TcpStream, rx: Receiver<Vec<u8>>) {
    let mut w = BufWriter::with_capacity(1 << 16, stream);
    while let Ok(frame) = rx.recv() {
        if w.write_all(&frame).is_err() {
            break;
        }
        if rx.is_empty() && w.flush().is_err() {
            break;
        }
    }
    let _ = w.flush();
    let _ = w.get_ref().shutdown(Shutdown::Write);
}

impl RemoteLink for Inner {
    fn publish(&self, topic: &str, fingerprint: u64, corr: u64, bytes: &Arc<[u8]>, feedback: bool) {
        let ft = if feedback { FrameType::ActionFeedback } else { FrameType::Publish };
        let mut frame: Option<WireFrame> = None;
        for c in self.active() {
            match c.has(EndpointKind::Subscriber, topic) {
                Some(fp) if fp == fingerprint => {
                    let f = frame.get_or_insert_with(|| WireFrame::new(ft, topic, fingerprint, corr, bytes.to_vec()));
                    c.send(f);
                }
                Some(fp) => self.mismatch(c.peer, topic, fingerprint, fp),
                None => {}
            }
        }
    }

    fn has_server(&self, service: &str, fingerprint: u64) -> bool {
        self.active().iter().any(|c| c.has(EndpointKind::Server, service) == Some(fingerprint))
    }

    fn send_request(&self, service: &str, fingerprint: u64, corr: u64, bytes: &Arc<[u8]>) -> Result<(), MwError> {
        let mut conns = self.active();
        conns.sort_by_key(|c| c.peer);
        let target = conns.iter().find(|c| c.has(EndpointKind::Server, service) == Some(fingerprint));
        let Some(c) = target else { return Err(MwError::NoServer(service.into())) };
        let f = WireFrame::new(FrameType::SrvRequest, service, fingerprint, corr, bytes.to_vec());
        if c.send(&f) {
            Ok(())
        } else {
            Err(MwError::Transport(format!("link to {} is down", c.addr)))
        }
    }

    fn send_response(&self, peer: u64, service: &str, fingerprint: u64, corr: u64, bytes: &Arc<[u8]>) {
        let conn = self.conns.lock().unwrap().get(&peer).cloned();
        match conn {
            Some(c) => {
                c.send(&WireFrame::new(FrameType::SrvResponse, service, fingerprint, corr, bytes.to_vec()));
            }
            None => log::warn!("dropping response on {service:?}: peer {peer:#x} is not connected"),
        }
    }

    fn endpoints_changed(&self) {
        let f = self.announce_frame();
        let all: Vec<Arc<Conn>> = self.all.lock().unwrap().values().cloned().collect();
        for c in all {
            c.send(&f);
        }
    }
}

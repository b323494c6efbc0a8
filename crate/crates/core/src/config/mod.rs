//! Project configuration: resource groups, thread mapping, transport peers
//! and benchmark parameters in an INI-like text format.
//!
//! ```text
//! [General]
//! Slots = 2
//!
//! [ResourceGroup@ResourceGroupSobel]
//! node_3 = rosnode, "Sobel"
//! filter_service_msg = rossrvmsg, application_msgs, srv, SobelSrv
//! filter_server = rossrvs, node_3, filter_service_msg, "sobelservice", 10000
//!
//! [HwThread@Sobel]
//! ResourceGroup = ResourceGroupSobel
//! Slot = 0
//! Behavior = sobel_server
//! ```
//!
//! Section names accept `(at)` in place of `@`. Thread sections take any
//! further `Key = value` lines as behavior parameters.

mod system;

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::net::SocketAddr;

use thiserror::Error;

use crate::arena::DEFAULT_ARENA_SIZE;
use crate::hwthread::Mapping;
use crate::msg::text::{parse_definitions, render_definitions};
use crate::msg::{MessageTypeDef, MsgError};
use crate::transport::PeerConfig;

pub use system::{build_registry, plan_threads, System, SystemError, SystemOptions};

pub const DEFAULT_MAX_MESSAGE_SIZE: u32 = crate::msg::DEFAULT_MAX_MESSAGE_SIZE as u32;
pub const DEFAULT_SLOTS: u32 = 4;
pub const DEFAULT_BENCH_SIZES: [u32; 4] = [4, 8 << 10, 1 << 20, 6 << 20];
pub const DEFAULT_BENCH_ITERATIONS: u32 = 50;
pub const DEFAULT_BENCH_TIMEOUT_MS: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct General {
    pub name: String,
    pub slots: u32,
    pub arena_size: u32,
    pub max_message_size: u32,
}

impl Default for General {
    fn default() -> Self {
        General {
            name: String::new(),
            slots: DEFAULT_SLOTS,
            arena_size: DEFAULT_ARENA_SIZE,
            max_message_size: DEFAULT_MAX_MESSAGE_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchmarkConfig {
    pub sizes: Vec<u32>,
    pub iterations: u32,
    pub timeout_ms: u64,
    pub send_topic: String,
    pub recv_topic: String,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            sizes: DEFAULT_BENCH_SIZES.to_vec(),
            iterations: DEFAULT_BENCH_ITERATIONS,
            timeout_ms: DEFAULT_BENCH_TIMEOUT_MS,
            send_topic: "/send".into(),
            recv_topic: "/recv".into(),
        }
    }
}

/// One `name = kind, args...` line of a resource group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decl {
    Node { label: String },
    Msg { package: String, ty: String },
    SrvMsg { package: String, ty: String },
    ActMsg { package: String, ty: String },
    Sub { node: String, msg: String, topic: String, poll_us: u32 },
    Pub { node: String, msg: String, topic: String },
    SrvServer { node: String, msg: String, service: String, poll_us: u32 },
    SrvClient { node: String, msg: String, service: String, poll_us: u32 },
    ActServer { node: String, msg: String, action: String, poll_us: u32 },
    ActClient { node: String, msg: String, action: String, poll_us: u32 },
}

impl Decl {
    pub fn kind(&self) -> &'static str {
        match self {
            Decl::Node { .. } => "rosnode",
            Decl::Msg { .. } => "rosmsg",
            Decl::SrvMsg { .. } => "rossrvmsg",
            Decl::ActMsg { .. } => "rosactmsg",
            Decl::Sub { .. } => "rossub",
            Decl::Pub { .. } => "rospub",
            Decl::SrvServer { .. } => "rossrvs",
            Decl::SrvClient { .. } => "rossrvc",
            Decl::ActServer { .. } => "rosacts",
            Decl::ActClient { .. } => "rosactc",
        }
    }

    /// Node and message references, with the kind each must resolve to.
    fn references(&self) -> Vec<(&str, &'static str)> {
        match self {
            Decl::Node { .. } | Decl::Msg { .. } | Decl::SrvMsg { .. } | Decl::ActMsg { .. } => vec![],
            Decl::Sub { node, msg, .. } | Decl::Pub { node, msg, .. } => vec![(node, "rosnode"), (msg, "rosmsg")],
            Decl::SrvServer { node, msg, .. } | Decl::SrvClient { node, msg, .. } => {
                vec![(node, "rosnode"), (msg, "rossrvmsg")]
            }
            Decl::ActServer { node, msg, .. } | Decl::ActClient { node, msg, .. } => {
                vec![(node, "rosnode"), (msg, "rosactmsg")]
            }
        }
    }

    pub fn poll_us(&self) -> Option<u32> {
        match self {
            Decl::Sub { poll_us, .. }
            | Decl::SrvServer { poll_us, .. }
            | Decl::SrvClient { poll_us, .. }
            | Decl::ActServer { poll_us, .. }
            | Decl::ActClient { poll_us, .. } => Some(*poll_us),
            _ => None,
        }
    }
}

/// Number of arguments after the kind.
pub fn arity(kind: &str) -> Option<usize> {
    Some(match kind {
        "rosnode" => 1,
        "rosmsg" | "rossrvmsg" | "rosactmsg" | "rospub" => 3,
        "rossub" | "rossrvs" | "rossrvc" | "rosacts" | "rosactc" => 4,
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceDecl {
    pub name: String,
    pub decl: Decl,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceGroup {
    pub name: String,
    pub decls: Vec<ResourceDecl>,
}

impl ResourceGroup {
    pub fn get(&self, name: &str) -> Option<&Decl> {
        self.decls.iter().find(|d| d.name == name).map(|d| &d.decl)
    }

    /// Declarations other than `rosnode`.
    pub fn objects(&self) -> impl Iterator<Item = &ResourceDecl> {
        self.decls.iter().filter(|d| !matches!(d.decl, Decl::Node { .. }))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &ResourceDecl> {
        self.decls.iter().filter(|d| matches!(d.decl, Decl::Node { .. }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreadConfig {
    pub name: String,
    pub hardware: bool,
    pub slot: Option<u32>,
    pub group: String,
    pub behavior: String,
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ProjectConfig {
    pub general: General,
    pub transport: Option<PeerConfig>,
    pub benchmark: BenchmarkConfig,
    pub messages: Vec<MessageTypeDef>,
    pub groups: Vec<ResourceGroup>,
    pub threads: Vec<ThreadConfig>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown kind {kind:?}")]
    UnknownKind { line: usize, kind: String },
    #[error("line {line}: {kind} takes {expected} arguments, found {found}")]
    Arity { line: usize, kind: String, expected: usize, found: usize },
    #[error("line {line}: {name:?} in group {group} does not name a {expected}")]
    Unresolved { line: usize, group: String, name: String, expected: &'static str },
    #[error("line {line}: {name:?} declared twice in group {group}")]
    Duplicate { line: usize, group: String, name: String },
    #[error("line {line}: polling period must be a positive integer, found {value:?}")]
    BadPolling { line: usize, value: String },
    #[error("line {line}: bad value for {key}: {value:?}")]
    BadValue { line: usize, key: String, value: String },
    #[error("line {line}: {msg}")]
    Messages { line: usize, msg: String },
    #[error("thread {thread}: unknown resource group {group:?}")]
    UnknownGroup { thread: String, group: String },
    #[error("thread {thread}: resource group {group} must declare exactly one rosnode")]
    NodeCount { thread: String, group: String },
    #[error("thread {thread}: missing {key}")]
    MissingKey { thread: String, key: &'static str },
    #[error("thread {thread}: slot {slot} out of range ({slots} slots)")]
    SlotOutOfRange { thread: String, slot: u32, slots: u32 },
    #[error("threads {first} and {second} both occupy slot {slot}")]
    SlotConflict { slot: u32, first: String, second: String },
    #[error("no free slot for thread {0}")]
    NoFreeSlot(String),
    #[error("unknown thread {0:?}")]
    UnknownThread(String),
    #[error("transport: {0}")]
    Transport(String),
}

impl ConfigError {
    /// Source line of the offending text, when known.
    pub fn line(&self) -> Option<usize> {
        match self {
            ConfigError::Syntax { line, .. }
            | ConfigError::UnknownKind { line, .. }
            | ConfigError::Arity { line, .. }
            | ConfigError::Unresolved { line, .. }
            | ConfigError::Duplicate { line, .. }
            | ConfigError::BadPolling { line, .. }
            | ConfigError::BadValue { line, .. }
            | ConfigError::Messages { line, .. } => Some(*line),
            _ => None,
        }
    }
}

/// Parses byte sizes such as `4B`, `8KiB`, `1MiB` or a bare number.
pub fn parse_size(s: &str) -> Option<u32> {
    let s = s.trim();
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let n: u64 = num.parse().ok()?;
    let mult: u64 = match unit.trim() {
        "" | "B" => 1,
        "KiB" | "K" => 1 << 10,
        "MiB" | "M" => 1 << 20,
        "GiB" | "G" => 1 << 30,
        _ => return None,
    };
    u32::try_from(n.checked_mul(mult)?).ok()
}

pub fn format_size(n: u32) -> String {
    match n {
        0 => "0B".into(),
        n if n % (1 << 30) == 0 => format!("{}GiB", n >> 30),
        n if n % (1 << 20) == 0 => format!("{}MiB", n >> 20),
        n if n % (1 << 10) == 0 => format!("{}KiB", n >> 10),
        n => format!("{n}B"),
    }
}

pub fn parse_size_list(s: &str) -> Option<Vec<u32>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(parse_size).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Arg {
    Bare(String),
    Quoted(String),
}

impl Arg {
    fn text(&self) -> &str {
        match self {
            Arg::Bare(s) | Arg::Quoted(s) => s,
        }
    }
}

fn split_args(line: usize, s: &str) -> Result<Vec<Arg>, ConfigError> {
    let mut out = Vec::new();
    let mut chars = s.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        let arg = if chars.peek() == Some(&'"') {
            chars.next();
            let mut v = String::new();
            loop {
                match chars.next() {
                    Some('"') => break,
                    Some('\\') => match chars.next() {
                        Some(c) => v.push(c),
                        None => return Err(ConfigError::Syntax { line, msg: "unterminated string".into() }),
                    },
                    Some(c) => v.push(c),
                    None => return Err(ConfigError::Syntax { line, msg: "unterminated string".into() }),
                }
            }
            while chars.peek().is_some_and(|c| c.is_whitespace()) {
                chars.next();
            }
            Arg::Quoted(v)
        } else {
            let mut v = String::new();
            while let Some(&c) = chars.peek() {
                if c == ',' {
                    break;
                }
                v.push(c);
                chars.next();
            }
            let v = v.trim().to_string();
            if v.is_empty() {
                return Err(ConfigError::Syntax { line, msg: "empty argument".into() });
            }
            Arg::Bare(v)
        };
        out.push(arg);
        match chars.next() {
            None => return Ok(out),
            Some(',') => {}
            Some(c) => return Err(ConfigError::Syntax { line, msg: format!("expected ',' but found {c:?}") }),
        }
    }
}

fn parse_poll(line: usize, a: &Arg) -> Result<u32, ConfigError> {
    match a {
        Arg::Bare(s) => match s.parse::<u32>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(ConfigError::BadPolling { line, value: s.clone() }),
        },
        Arg::Quoted(s) => Err(ConfigError::BadPolling { line, value: s.clone() }),
    }
}

fn parse_decl(line: usize, value: &str) -> Result<Decl, ConfigError> {
    let mut args = split_args(line, value)?;
    let kind = match args.first() {
        Some(Arg::Bare(k)) => k.clone(),
        _ => return Err(ConfigError::Syntax { line, msg: "missing kind".into() }),
    };
    args.remove(0);
    let expected = arity(&kind).ok_or_else(|| ConfigError::UnknownKind { line, kind: kind.clone() })?;
    if args.len() != expected {
        return Err(ConfigError::Arity { line, kind, expected, found: args.len() });
    }
    let s = |i: usize| args[i].text().to_string();
    let comm = |want: &str| -> Result<(), ConfigError> {
        if args[1].text() == want {
            Ok(())
        } else {
            Err(ConfigError::Syntax {
                line,
                msg: format!("{kind} expects communication type {want:?}, found {:?}", args[1].text()),
            })
        }
    };
    Ok(match kind.as_str() {
        "rosnode" => Decl::Node { label: s(0) },
        "rosmsg" => {
            comm("msg")?;
            Decl::Msg { package: s(0), ty: s(2) }
        }
        "rossrvmsg" => {
            comm("srv")?;
            Decl::SrvMsg { package: s(0), ty: s(2) }
        }
        "rosactmsg" => {
            comm("action")?;
            Decl::ActMsg { package: s(0), ty: s(2) }
        }
        "rossub" => Decl::Sub { node: s(0), msg: s(1), topic: s(2), poll_us: parse_poll(line, &args[3])? },
        "rospub" => Decl::Pub { node: s(0), msg: s(1), topic: s(2) },
        "rossrvs" => Decl::SrvServer { node: s(0), msg: s(1), service: s(2), poll_us: parse_poll(line, &args[3])? },
        "rossrvc" => Decl::SrvClient { node: s(0), msg: s(1), service: s(2), poll_us: parse_poll(line, &args[3])? },
        "rosacts" => Decl::ActServer { node: s(0), msg: s(1), action: s(2), poll_us: parse_poll(line, &args[3])? },
        "rosactc" => Decl::ActClient { node: s(0), msg: s(1), action: s(2), poll_us: parse_poll(line, &args[3])? },
        _ => unreachable!("arity() accepted {kind}"),
    })
}

#[derive(Debug)]
enum Section {
    None,
    General,
    Transport,
    Benchmark,
    Messages,
    Group(usize),
    Thread(usize),
}

/// A single value, optionally quoted (with `\\` escapes).
fn scalar(line: usize, v: &str) -> Result<String, ConfigError> {
    let v = v.trim();
    if !v.starts_with('"') {
        return Ok(v.to_string());
    }
    match split_args(line, v)?.as_slice() {
        [Arg::Quoted(s)] => Ok(s.clone()),
        _ => Err(ConfigError::Syntax { line, msg: format!("expected a single quoted value, found {v}") }),
    }
}

fn num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError> {
    v.trim().parse().map_err(|_| ConfigError::BadValue { line, key: key.into(), value: v.into() })
}

fn size(line: usize, key: &str, v: &str) -> Result<u32, ConfigError> {
    parse_size(v).ok_or_else(|| ConfigError::BadValue { line, key: key.into(), value: v.into() })
}

fn addr(line: usize, key: &str, v: &str) -> Result<SocketAddr, ConfigError> {
    v.trim().parse().map_err(|_| ConfigError::BadValue { line, key: key.into(), value: v.into() })
}

struct Lines {
    group_lines: Vec<HashMap<String, usize>>,
}

impl ProjectConfig {
    /// Parses and cross-checks a configuration.
    pub fn parse(text: &str) -> Result<ProjectConfig, ConfigError> {
        let mut cfg = ProjectConfig::default();
        let mut lines = Lines { group_lines: Vec::new() };
        let mut section = Section::None;
        let mut bind: Option<SocketAddr> = None;
        let mut peers: Vec<SocketAddr> = Vec::new();
        let mut transport_line = 0;
        let mut messages = String::new();
        let mut messages_start = 0;

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if let Section::Messages = section {
                if !trimmed.starts_with('[') {
                    messages.push_str(raw);
                    messages.push('\n');
                    continue;
                }
            }
            if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with(';') {
                continue;
            }
            if let Some(inner) = trimmed.strip_prefix('[') {
                let inner = inner
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::Syntax { line, msg: "unterminated section header".into() })?
                    .replace("(at)", "@");
                let (head, name) = match inner.split_once('@') {
                    Some((h, n)) => (h.trim().to_string(), Some(n.trim().to_string())),
                    None => (inner.trim().to_string(), None),
                };
                section = match (head.as_str(), name) {
                    ("General", None) => Section::General,
                    ("Transport", None) => {
                        transport_line = line;
                        Section::Transport
                    }
                    ("Benchmark", None) => Section::Benchmark,
                    ("Messages", None) => {
                        if messages_start == 0 {
                            messages_start = line + 1;
                        }
                        Section::Messages
                    }
                    ("ResourceGroup", Some(n)) if !n.is_empty() => {
                        if cfg.groups.iter().any(|g| g.name == n) {
                            return Err(ConfigError::Syntax { line, msg: format!("resource group {n} defined twice") });
                        }
                        cfg.groups.push(ResourceGroup { name: n, decls: Vec::new() });
                        lines.group_lines.push(HashMap::new());
                        Section::Group(cfg.groups.len() - 1)
                    }
                    (h @ ("HwThread" | "SwThread"), Some(n)) if !n.is_empty() => {
                        if cfg.threads.iter().any(|t| t.name == n) {
                            return Err(ConfigError::Syntax { line, msg: format!("thread {n} defined twice") });
                        }
                        cfg.threads.push(ThreadConfig {
                            name: n,
                            hardware: h == "HwThread",
                            slot: None,
                            group: String::new(),
                            behavior: String::new(),
                            params: BTreeMap::new(),
                        });
                        Section::Thread(cfg.threads.len() - 1)
                    }
                    _ => return Err(ConfigError::Syntax { line, msg: format!("unknown section [{inner}]") }),
                };
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| ConfigError::Syntax { line, msg: "expected `key = value`".into() })?;
            if key.is_empty() {
                return Err(ConfigError::Syntax { line, msg: "empty key".into() });
            }
            match section {
                Section::None => return Err(ConfigError::Syntax { line, msg: "entry outside of a section".into() }),
                Section::Messages => unreachable!(),
                Section::General => match key {
                    "Name" => cfg.general.name = scalar(line, value)?,
                    "Slots" => cfg.general.slots = num(line, key, value)?,
                    "ArenaSize" => cfg.general.arena_size = size(line, key, value)?,
                    "MaxMessageSize" => cfg.general.max_message_size = size(line, key, value)?,
                    _ => return Err(ConfigError::Syntax { line, msg: format!("unknown key {key} in [General]") }),
                },
                Section::Transport => match key {
                    "Bind" => bind = Some(addr(line, key, &scalar(line, value)?)?),
                    "Peers" => {
                        for p in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                            peers.push(addr(line, key, &scalar(line, p)?)?);
                        }
                    }
                    _ => return Err(ConfigError::Syntax { line, msg: format!("unknown key {key} in [Transport]") }),
                },
                Section::Benchmark => {
                    let b = &mut cfg.benchmark;
                    match key {
                        "Sizes" => {
                            b.sizes = parse_size_list(value).ok_or_else(|| ConfigError::BadValue {
                                line,
                                key: key.into(),
                                value: value.into(),
                            })?
                        }
                        "Iterations" => b.iterations = num(line, key, value)?,
                        "TimeoutMs" => b.timeout_ms = num(line, key, value)?,
                        "Send" => b.send_topic = scalar(line, value)?,
                        "Recv" => b.recv_topic = scalar(line, value)?,
                        _ => {
                            return Err(ConfigError::Syntax { line, msg: format!("unknown key {key} in [Benchmark]") })
                        }
                    }
                }
                Section::Group(g) => {
                    let decl = parse_decl(line, value)?;
                    let group = &mut cfg.groups[g];
                    if group.get(key).is_some() {
                        return Err(ConfigError::Duplicate { line, group: group.name.clone(), name: key.into() });
                    }
                    lines.group_lines[g].insert(key.into(), line);
                    group.decls.push(ResourceDecl { name: key.into(), decl });
                }
                Section::Thread(t) => {
                    let th = &mut cfg.threads[t];
                    match key {
                        "ResourceGroup" => th.group = scalar(line, value)?,
                        "Slot" => th.slot = Some(num(line, key, value)?),
                        "Behavior" => th.behavior = scalar(line, value)?,
                        _ => {
                            th.params.insert(key.into(), scalar(line, value)?);
                        }
                    }
                }
            }
        }

        if !messages.trim().is_empty() {
            cfg.messages = parse_definitions(&messages).map_err(|e| match e {
                MsgError::Parse { line, msg } => ConfigError::Messages { line: messages_start + line - 1, msg },
                other => ConfigError::Messages { line: messages_start, msg: other.to_string() },
            })?;
        }
        match (bind, peers.is_empty()) {
            (Some(b), _) => cfg.transport = Some(PeerConfig { bind: b, peers }),
            (None, false) => {
                return Err(ConfigError::Syntax {
                    line: transport_line,
                    msg: "[Transport] needs a Bind address".into(),
                })
            }
            (None, true) => {}
        }
        cfg.check_groups(Some(&lines))?;
        cfg.check_threads()?;
        Ok(cfg)
    }

    /// Re-runs every cross-reference check.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.check_groups(None)?;
        self.check_threads()
    }

    fn check_groups(&self, lines: Option<&Lines>) -> Result<(), ConfigError> {
        for (gi, g) in self.groups.iter().enumerate() {
            let line_of = |name: &str| lines.and_then(|l| l.group_lines[gi].get(name).copied()).unwrap_or(0);
            for (i, d) in g.decls.iter().enumerate() {
                if g.decls[..i].iter().any(|o| o.name == d.name) {
                    return Err(ConfigError::Duplicate {
                        line: line_of(&d.name),
                        group: g.name.clone(),
                        name: d.name.clone(),
                    });
                }
                for (r, expected) in d.decl.references() {
                    let ok = g.get(r).is_some_and(|t| t.kind() == expected);
                    if !ok {
                        return Err(ConfigError::Unresolved {
                            line: line_of(&d.name),
                            group: g.name.clone(),
                            name: r.into(),
                            expected,
                        });
                    }
                }
                if d.decl.poll_us() == Some(0) {
                    return Err(ConfigError::BadPolling { line: line_of(&d.name), value: "0".into() });
                }
            }
        }
        Ok(())
    }

    fn check_threads(&self) -> Result<(), ConfigError> {
        if let Some(t) = &self.transport {
            t.validate().map_err(|e| ConfigError::Transport(e.to_string()))?;
        }
        let mut used: BTreeMap<u32, &str> = BTreeMap::new();
        for t in &self.threads {
            if t.group.is_empty() {
                return Err(ConfigError::MissingKey { thread: t.name.clone(), key: "ResourceGroup" });
            }
            if t.behavior.is_empty() {
                return Err(ConfigError::MissingKey { thread: t.name.clone(), key: "Behavior" });
            }
            let g = self
                .group(&t.group)
                .ok_or_else(|| ConfigError::UnknownGroup { thread: t.name.clone(), group: t.group.clone() })?;
            if g.nodes().count() != 1 {
                return Err(ConfigError::NodeCount { thread: t.name.clone(), group: t.group.clone() });
            }
            if let Some(slot) = t.slot {
                if slot >= self.general.slots {
                    return Err(ConfigError::SlotOutOfRange {
                        thread: t.name.clone(),
                        slot,
                        slots: self.general.slots,
                    });
                }
            }
            if t.hardware {
                let slot = t.slot.ok_or(ConfigError::MissingKey { thread: t.name.clone(), key: "Slot" })?;
                if let Some(first) = used.insert(slot, &t.name) {
                    return Err(ConfigError::SlotConflict { slot, first: first.into(), second: t.name.clone() });
                }
            }
        }
        Ok(())
    }

    pub fn group(&self, name: &str) -> Option<&ResourceGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn thread(&self, name: &str) -> Option<&ThreadConfig> {
        self.threads.iter().find(|t| t.name == name)
    }

    /// Total declarations across every group.
    pub fn declaration_count(&self) -> usize {
        self.groups.iter().map(|g| g.decls.len()).sum()
    }

    pub fn mapping_of(&self, thread: &str) -> Option<Mapping> {
        let t = self.thread(thread)?;
        Some(match (t.hardware, t.slot) {
            (true, Some(slot)) => Mapping::Hardware { slot },
            _ => Mapping::Software,
        })
    }

    /// Moves a thread between software and hardware. A thread moved to
    /// hardware without a configured slot takes the lowest free one.
    pub fn set_mapping(&mut self, thread: &str, hardware: bool) -> Result<(), ConfigError> {
        let occupied: Vec<u32> =
            self.threads.iter().filter(|t| t.hardware && t.name != thread).filter_map(|t| t.slot).collect();
        let slots = self.general.slots;
        let t = self
            .threads
            .iter_mut()
            .find(|t| t.name == thread)
            .ok_or_else(|| ConfigError::UnknownThread(thread.into()))?;
        t.hardware = hardware;
        if hardware && t.slot.is_none_or(|s| occupied.contains(&s)) {
            let free =
                (0..slots).find(|s| !occupied.contains(s)).ok_or_else(|| ConfigError::NoFreeSlot(thread.into()))?;
            t.slot = Some(free);
        }
        self.check_threads()
    }

    /// Canonical text form; parsing it yields an equal configuration.
    pub fn render(&self) -> String {
        self.to_string()
    }
}

fn quote(s: &str) -> String {
    let mut out = String::from("\"");
    for c in s.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

fn render_decl(d: &Decl) -> String {
    let k = d.kind();
    match d {
        Decl::Node { label } => format!("{k}, {}", quote(label)),
        Decl::Msg { package, ty } => format!("{k}, {package}, msg, {ty}"),
        Decl::SrvMsg { package, ty } => format!("{k}, {package}, srv, {ty}"),
        Decl::ActMsg { package, ty } => format!("{k}, {package}, action, {ty}"),
        Decl::Pub { node, msg, topic } => format!("{k}, {node}, {msg}, {}", quote(topic)),
        Decl::Sub { node, msg, topic: name, poll_us }
        | Decl::SrvServer { node, msg, service: name, poll_us }
        | Decl::SrvClient { node, msg, service: name, poll_us }
        | Decl::ActServer { node, msg, action: name, poll_us }
        | Decl::ActClient { node, msg, action: name, poll_us } => {
            format!("{k}, {node}, {msg}, {}, {poll_us}", quote(name))
        }
    }
}

impl fmt::Display for ProjectConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        let g = &self.general;
        let _ = writeln!(out, "[General]");
        if !g.name.is_empty() {
            let _ = writeln!(out, "Name = {}", quote(&g.name));
        }
        let _ = writeln!(out, "Slots = {}", g.slots);
        let _ = writeln!(out, "ArenaSize = {}", format_size(g.arena_size));
        let _ = writeln!(out, "MaxMessageSize = {}", format_size(g.max_message_size));
        if let Some(t) = &self.transport {
            let _ = writeln!(out, "\n[Transport]\nBind = {}", t.bind);
            if !t.peers.is_empty() {
                let peers: Vec<String> = t.peers.iter().map(|p| p.to_string()).collect();
                let _ = writeln!(out, "Peers = {}", peers.join(", "));
            }
        }
        let b = &self.benchmark;
        let sizes: Vec<String> = b.sizes.iter().map(|&s| format_size(s)).collect();
        let _ = writeln!(
            out,
            "\n[Benchmark]\nSizes = {}\nIterations = {}\nTimeoutMs = {}",
            sizes.join(","),
            b.iterations,
            b.timeout_ms
        );
        let _ = writeln!(out, "Send = {}\nRecv = {}", quote(&b.send_topic), quote(&b.recv_topic));
        if !self.messages.is_empty() {
            let _ = write!(out, "\n[Messages]\n{}", render_definitions(&self.messages));
        }
        for grp in &self.groups {
            let _ = writeln!(out, "\n[ResourceGroup@{}]", grp.name);
            for d in &grp.decls {
                let _ = writeln!(out, "{} = {}", d.name, render_decl(&d.decl));
            }
        }
        for t in &self.threads {
            let _ = writeln!(out, "\n[{}@{}]", if t.hardware { "HwThread" } else { "SwThread" }, t.name);
            let _ = writeln!(out, "ResourceGroup = {}", t.group);
            if let Some(s) = t.slot {
                let _ = writeln!(out, "Slot = {s}");
            }
            let _ = writeln!(out, "Behavior = {}", t.behavior);
            for (k, v) in &t.params {
                let _ = writeln!(out, "{k} = {}", quote(v));
            }
        }
        f.write_str(&out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_is_empty_config() {
        let c = ProjectConfig::parse("").unwrap();
        assert_eq!(c, ProjectConfig::default());
        assert!(c.groups.is_empty() && c.threads.is_empty() && c.transport.is_none());
    }

    #[test]
    fn unresolved_node_reference() {
        let text = "[ResourceGroup@G]\nm = rosmsg, std_msgs, msg, UInt32\nx = rossub, nodeX, m, \"/t\", 10\n";
        let e = ProjectConfig::parse(text).unwrap_err();
        assert_eq!(
            e,
            ConfigError::Unresolved { line: 3, group: "G".into(), name: "nodeX".into(), expected: "rosnode" }
        );
    }

    #[test]
    fn reference_must_have_the_right_kind() {
        let text = "[ResourceGroup@G]\nn = rosnode, \"N\"\nm = rosmsg, std_msgs, msg, UInt32\ns = rossrvs, n, m, \"svc\", 10\n";
        assert!(matches!(ProjectConfig::parse(text), Err(ConfigError::Unresolved { expected: "rossrvmsg", .. })));
    }

    #[test]
    fn errors_name_their_line() {
        let cases = [
            ("[ResourceGroup@G]\nn = rosbogus, x\n", 2),
            ("[ResourceGroup@G]\nn = rosnode\n", 2),
            ("[ResourceGroup@G]\nn = rosnode, \"A\"\nn = rosnode, \"B\"\n", 3),
            ("[ResourceGroup@G]\nn = rosnode, \"A\"\nm = rosmsg, a, msg, B\ns = rossub, n, m, \"/t\", 0\n", 4),
            ("[ResourceGroup@G]\nn = rosnode, \"A\"\nm = rosmsg, a, msg, B\ns = rossub, n, m, \"/t\", fast\n", 4),
            ("[ResourceGroup@G]\nm = rosmsg, a, srv, B\n", 2),
            ("[Nope]\n", 1),
            ("x = 1\n", 1),
            ("[General]\nSlots = many\n", 2),
            ("[Messages]\n\ng msg A { x: u64; }\n", 3),
        ];
        for (text, line) in cases {
            let e = ProjectConfig::parse(text).unwrap_err();
            assert_eq!(e.line(), Some(line), "{text:?} -> {e}");
        }
        assert!(matches!(
            ProjectConfig::parse("[ResourceGroup@G]\nn = rosnode\n"),
            Err(ConfigError::Arity { expected: 1, found: 0, .. })
        ));
        assert!(matches!(
            ProjectConfig::parse("[ResourceGroup@G]\nn = rosbogus, x\n"),
            Err(ConfigError::UnknownKind { .. })
        ));
    }

    const TWO_THREADS: &str = r#"
[General]
Slots = 2

[ResourceGroup@A]
n = rosnode, "A"
m = rosmsg, std_msgs, msg, UInt32
p = rospub, n, m, "/a"

[ResourceGroup@B]
n = rosnode, "B"
m = rosmsg, std_msgs, msg, UInt32
p = rospub, n, m, "/b"

[HwThread@a]
ResourceGroup = A
Slot = 0
Behavior = constant

[HwThread@b]
ResourceGroup = B
Slot = 0
Behavior = constant
"#;

    #[test]
    fn slot_conflict_and_range() {
        assert_eq!(
            ProjectConfig::parse(TWO_THREADS).unwrap_err(),
            ConfigError::SlotConflict { slot: 0, first: "a".into(), second: "b".into() }
        );
        let text = TWO_THREADS.replacen("Slot = 0", "Slot = 2", 1);
        assert!(matches!(ProjectConfig::parse(&text), Err(ConfigError::SlotOutOfRange { slot: 2, .. })));
        let mut c = ProjectConfig::parse(&TWO_THREADS.replacen("Slot = 0", "Slot = 1", 1)).unwrap();
        c.set_mapping("a", false).unwrap();
        c.set_mapping("b", true).unwrap();
        c.set_mapping("a", true).unwrap();
        assert_eq!(c.mapping_of("a"), Some(Mapping::Hardware { slot: 1 }));
        c.general.slots = 1;
        assert!(c.validate().is_err());
        assert_eq!(c.set_mapping("zzz", true), Err(ConfigError::UnknownThread("zzz".into())));
    }

    #[test]
    fn general_transport_and_benchmark() {
        let text = "[General]\nName = \"board\"\nSlots = 3\nArenaSize = 32MiB\nMaxMessageSize = 7MiB\n\
                    [Transport]\nBind = 127.0.0.1:7400\nPeers = 127.0.0.1:7401, 127.0.0.1:7402\n\
                    [Benchmark]\nSizes = 4B, 8KiB\nIterations = 10\nTimeoutMs = 100\nSend = /s\nRecv = \"/r\"\n";
        let c = ProjectConfig::parse(text).unwrap();
        assert_eq!(
            c.general,
            General { name: "board".into(), slots: 3, arena_size: 32 << 20, max_message_size: 7 << 20 }
        );
        let t = c.transport.as_ref().unwrap();
        assert_eq!(t.bind.port(), 7400);
        assert_eq!(t.peers.len(), 2);
        assert_eq!(c.benchmark.sizes, vec![4, 8192]);
        assert_eq!((c.benchmark.iterations, c.benchmark.timeout_ms), (10, 100));
        assert_eq!((c.benchmark.send_topic.as_str(), c.benchmark.recv_topic.as_str()), ("/s", "/r"));
        assert_eq!(ProjectConfig::parse(&c.render()).unwrap(), c);

        let bad = "[Transport]\nBind = 127.0.0.1:7400\nPeers = 127.0.0.1:7400\n";
        assert!(matches!(ProjectConfig::parse(bad), Err(ConfigError::Transport(_))));
        assert!(ProjectConfig::parse("[Transport]\nPeers = 127.0.0.1:1\n").is_err());
    }

    #[test]
    fn sizes() {
        assert_eq!(parse_size_list("4B,8KiB,1MiB,6MiB"), Some(vec![4, 8192, 1 << 20, 6 << 20]));
        assert_eq!(parse_size("12"), Some(12));
        assert_eq!(parse_size("4GiB"), None);
        assert_eq!(parse_size("3XB"), None);
        for n in [0, 1, 4, 1000, 8192, 6 << 20, 1 << 30] {
            assert_eq!(parse_size(&format_size(n)), Some(n));
        }
    }

    fn arb_name() -> impl Strategy<Value = String> {
        "[a-z][a-z0-9_]{0,8}"
    }

    fn arb_label() -> impl Strategy<Value = String> {
        "[ -~]{0,12}"
    }

    fn arb_group() -> impl Strategy<Value = ResourceGroup> {
        (arb_name(), arb_label(), proptest::collection::vec((arb_label(), 1u32..100_000, 0usize..7), 0..8)).prop_map(
            |(name, label, objs)| {
                let mut decls = vec![
                    ResourceDecl { name: "node".into(), decl: Decl::Node { label } },
                    ResourceDecl { name: "m".into(), decl: Decl::Msg { package: "p".into(), ty: "T".into() } },
                    ResourceDecl { name: "s".into(), decl: Decl::SrvMsg { package: "p".into(), ty: "S".into() } },
                    ResourceDecl { name: "a".into(), decl: Decl::ActMsg { package: "p".into(), ty: "A".into() } },
                ];
                for (i, (n, poll_us, k)) in objs.into_iter().enumerate() {
                    let (node, msg) = ("node".to_string(), |m: &str| m.to_string());
                    let decl = match k {
                        0 => Decl::Sub { node, msg: msg("m"), topic: n, poll_us },
                        1 => Decl::Pub { node, msg: msg("m"), topic: n },
                        2 => Decl::SrvServer { node, msg: msg("s"), service: n, poll_us },
                        3 => Decl::SrvClient { node, msg: msg("s"), service: n, poll_us },
                        4 => Decl::ActServer { node, msg: msg("a"), action: n, poll_us },
                        5 => Decl::ActClient { node, msg: msg("a"), action: n, poll_us },
                        _ => Decl::Msg { package: "q".into(), ty: "U".into() },
                    };
                    decls.push(ResourceDecl { name: format!("o{i}"), decl });
                }
                ResourceGroup { name, decls }
            },
        )
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(
            groups in proptest::collection::vec(arb_group(), 0..4),
            slots in 1u32..8,
            params in proptest::collection::btree_map("[A-Z][a-z]{1,6}", "[ -~]{0,10}", 0..3),
        ) {
            let mut groups = groups;
            groups.sort_by(|a, b| a.name.cmp(&b.name));
            groups.dedup_by(|a, b| a.name == b.name);
            let threads = groups
                .iter()
                .enumerate()
                .map(|(i, g)| ThreadConfig {
                    name: format!("t{i}"),
                    hardware: (i as u32) < slots && i % 2 == 0,
                    slot: ((i as u32) < slots).then_some(i as u32),
                    group: g.name.clone(),
                    behavior: "copy".into(),
                    params: params.clone().into_iter().filter(|(k, _)| !["Slot", "Behavior", "ResourceGroup"].contains(&k.as_str())).collect(),
                })
                .collect();
            let cfg = ProjectConfig { general: General { slots, ..General::default() }, groups, threads, ..Default::default() };
            cfg.validate().unwrap();
            let text = cfg.render();
            let back = ProjectConfig::parse(&text).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.render(), text);
        }
    }
}

//! Message schemas and their deterministic layout inside the arena.
//!
//! A registered [`MessageTypeDef`] gets a frozen [`MessageLayout`] that mirrors
//! what a C struct of the message would look like on a 32-bit target: every
//! scalar aligned to its size, nested messages inline, and every sequence
//! (including strings) as a 12-byte `{data: u32, size: u32, capacity: u32}`
//! header whose payload lives in a separate arena block. Hardware threads do
//! pointer arithmetic against these offsets, so layout must never change for a
//! given definition.

mod codec;
mod instance;
pub mod text;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::{Arc, RwLock};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::arena::ArenaError;

pub use instance::MessageInstance;

/// Maximum nesting of sequences and nested messages inside one definition.
pub const MAX_NESTING_DEPTH: usize = 8;

/// Default ceiling on a serialized message (covers the 6 MiB benchmark case).
pub const DEFAULT_MAX_MESSAGE_SIZE: usize = 8 << 20;

/// Inline size of a sequence header.
pub const SEQUENCE_HEADER_SIZE: u32 = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MsgError {
    #[error("type {0} is already registered")]
    DuplicateType(String),
    #[error("type {0} nests {1} levels deep (limit {MAX_NESTING_DEPTH})")]
    DepthExceeded(String, usize),
    #[error("duplicate field `{field}` in {ty}")]
    DuplicateField { ty: String, field: String },
    #[error("unknown message type {0}")]
    UnknownType(String),
    #[error("invalid type handle {0}")]
    UnknownHandle(u32),
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("path `{0}` continues through a scalar")]
    PathThroughScalar(String),
    #[error("`{0}` is not a sequence")]
    NotASequence(String),
    #[error("`{0}` is not a scalar")]
    NotAScalar(String),
    #[error("`{path}`: {len} elements exceed capacity {capacity}")]
    CapacityExceeded { path: String, len: u32, capacity: u32 },
    #[error("truncated input")]
    Truncated,
    #[error("message of {size} bytes exceeds the {max} byte limit")]
    TooLarge { size: u64, max: usize },
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("message type mismatch: expected {expected}, got {found}")]
    TypeMismatch { expected: String, found: String },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Arena(#[from] ArenaError),
}

/// What a definition describes. `srv` and `action` definitions expand to
/// several kinds sharing one type name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MsgKind {
    Msg,
    SrvRequest,
    SrvResponse,
    ActionGoal,
    ActionFeedback,
    ActionResult,
}

impl MsgKind {
    pub const ALL: [MsgKind; 6] = [
        MsgKind::Msg,
        MsgKind::SrvRequest,
        MsgKind::SrvResponse,
        MsgKind::ActionGoal,
        MsgKind::ActionFeedback,
        MsgKind::ActionResult,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MsgKind::Msg => "msg",
            MsgKind::SrvRequest => "srv-request",
            MsgKind::SrvResponse => "srv-response",
            MsgKind::ActionGoal => "action-goal",
            MsgKind::ActionFeedback => "action-feedback",
            MsgKind::ActionResult => "action-result",
        }
    }

    pub fn parse(s: &str) -> Option<MsgKind> {
        MsgKind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for MsgKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scalar {
    U8,
    U16,
    U32,
    I32,
    F32,
}

impl Scalar {
    pub fn size(self) -> u32 {
        match self {
            Scalar::U8 => 1,
            Scalar::U16 => 2,
            Scalar::U32 | Scalar::I32 | Scalar::F32 => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Scalar::U8 => "u8",
            Scalar::U16 => "u16",
            Scalar::U32 => "u32",
            Scalar::I32 => "i32",
            Scalar::F32 => "f32",
        }
    }
}

/// `group/TypeName` of a nested plain message.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TypeRef {
    pub group: String,
    pub name: String,
}

impl fmt::Display for TypeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.group, self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FieldType {
    Scalar(Scalar),
    /// u8 sequence, no terminator
    String,
    Sequence(Box<FieldType>),
    Nested(TypeRef),
}

impl FieldType {
    pub fn sequence(elem: FieldType) -> FieldType {
        FieldType::Sequence(Box::new(elem))
    }

    pub fn nested(group: &str, name: &str) -> FieldType {
        FieldType::Nested(TypeRef { group: group.into(), name: name.into() })
    }
}

impl fmt::Display for FieldType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldType::Scalar(s) => f.write_str(s.name()),
            FieldType::String => f.write_str("string"),
            FieldType::Sequence(e) => write!(f, "sequence<{e}>"),
            FieldType::Nested(r) => write!(f, "{r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Field {
    pub name: String,
    pub ty: FieldType,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MessageTypeDef {
    pub group: String,
    pub kind: MsgKind,
    pub name: String,
    pub fields: Vec<Field>,
}

impl MessageTypeDef {
    pub fn new(group: &str, kind: MsgKind, name: &str) -> Self {
        MessageTypeDef { group: group.into(), kind, name: name.into(), fields: Vec::new() }
    }

    pub fn field(mut self, name: &str, ty: FieldType) -> Self {
        self.fields.push(Field { name: name.into(), ty });
        self
    }

    pub fn key(&self) -> TypeKey {
        TypeKey { group: self.group.clone(), kind: self.kind, name: self.name.clone() }
    }
}

/// Renders the definition in the text format accepted by [`text::parse_definitions`].
impl fmt::Display for MessageTypeDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {{", self.group, self.kind, self.name)?;
        for field in &self.fields {
            write!(f, " {}: {};", field.name, field.ty)?;
        }
        f.write_str(" }")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TypeKey {
    pub group: String,
    pub kind: MsgKind,
    pub name: String,
}

impl fmt::Display for TypeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.group, self.kind, self.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TypeHandle(pub(crate) u32);

impl TypeHandle {
    pub fn index(self) -> u32 {
        self.0
    }
}

/// A field type after nested references are bound to registered types.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Slot {
    Scalar(Scalar),
    Sequence(Box<Slot>),
    Nested(TypeHandle),
}

/// What lives at an offset returned by [`TypeRegistry::offset_of`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OffsetKind {
    Scalar(Scalar),
    Nested(TypeHandle),
    SequenceHeader,
    SequenceAddress,
    SequenceSize,
    SequenceCapacity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldLayout {
    pub name: String,
    pub offset: u32,
    pub slot: Slot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageLayout {
    /// Inline size, padded to `align`.
    pub size: u32,
    pub align: u32,
    pub fields: Vec<FieldLayout>,
    /// Every inline path (`img.data.size`, ...) with its offset.
    pub offsets: BTreeMap<String, (u32, OffsetKind)>,
}

#[derive(Debug)]
pub struct RegisteredType {
    pub handle: TypeHandle,
    pub def: MessageTypeDef,
    pub layout: MessageLayout,
    pub depth: usize,
    /// Canonical text of this type followed by every type it nests.
    pub canonical: String,
    pub fingerprint: u64,
}

#[derive(Default)]
struct RegistryInner {
    types: Vec<Arc<RegisteredType>>,
    index: HashMap<TypeKey, TypeHandle>,
}

/// Write-once registry of message types. Cheap to share behind an `Arc`.
pub struct TypeRegistry {
    max_message_size: usize,
    inner: RwLock<RegistryInner>,
}

impl Default for TypeRegistry {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_MESSAGE_SIZE)
    }
}

impl fmt::Debug for TypeRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.read().unwrap();
        f.debug_struct("TypeRegistry")
            .field("max_message_size", &self.max_message_size)
            .field("types", &inner.types.len())
            .finish()
    }
}

fn scalar_align(slot: &Slot, reg: &RegistryInner) -> (u32, u32) {
    match slot {
        Slot::Scalar(s) => (s.size(), s.size()),
        Slot::Sequence(_) => (SEQUENCE_HEADER_SIZE, 4),
        Slot::Nested(h) => {
            let l = &reg.types[h.0 as usize].layout;
            (l.size, l.align)
        }
    }
}

fn align_up(v: u32, a: u32) -> u32 {
    v.div_ceil(a) * a
}

impl TypeRegistry {
    pub fn new(max_message_size: usize) -> Self {
        TypeRegistry { max_message_size, inner: RwLock::new(RegistryInner::default()) }
    }

    pub fn max_message_size(&self) -> usize {
        self.max_message_size
    }

    pub fn register(&self, def: MessageTypeDef) -> Result<TypeHandle, MsgError> {
        let mut inner = self.inner.write().unwrap();
        let key = def.key();
        if inner.index.contains_key(&key) {
            return Err(MsgError::DuplicateType(key.to_string()));
        }
        let registered = Self::build(&inner, def, TypeHandle(inner.types.len() as u32))?;
        let handle = registered.handle;
        inner.types.push(Arc::new(registered));
        inner.index.insert(key, handle);
        Ok(handle)
    }

    /// Registers `def` unless an identical definition is already present.
    pub fn register_or_get(&self, def: MessageTypeDef) -> Result<TypeHandle, MsgError> {
        if let Some(h) = self.lookup(&def.key()) {
            if self.get(h)?.def == def {
                return Ok(h);
            }
        }
        self.register(def)
    }

    /// Registers a batch in dependency order (nested types first).
    pub fn register_all(&self, defs: Vec<MessageTypeDef>) -> Result<Vec<TypeHandle>, MsgError> {
        let mut pending: Vec<(usize, MessageTypeDef)> = defs.into_iter().enumerate().collect();
        let mut out = vec![TypeHandle(0); pending.len()];
        while !pending.is_empty() {
            let before = pending.len();
            let mut rest = Vec::new();
            for (i, def) in pending {
                let ready = def.fields.iter().all(|f| self.refs_resolved(&f.ty));
                if ready {
                    out[i] = self.register(def)?;
                } else {
                    rest.push((i, def));
                }
            }
            if rest.len() == before {
                // surface the first unresolved reference
                let (_, def) = rest.into_iter().next().unwrap();
                return Err(self.register(def).unwrap_err());
            }
            pending = rest;
        }
        Ok(out)
    }

    fn refs_resolved(&self, ty: &FieldType) -> bool {
        match ty {
            FieldType::Sequence(e) => self.refs_resolved(e),
            FieldType::Nested(r) => {
                self.lookup(&TypeKey { group: r.group.clone(), kind: MsgKind::Msg, name: r.name.clone() }).is_some()
            }
            _ => true,
        }
    }

    fn resolve(inner: &RegistryInner, ty: &FieldType) -> Result<(Slot, usize), MsgError> {
        Ok(match ty {
            FieldType::Scalar(s) => (Slot::Scalar(*s), 0),
            FieldType::String => (Slot::Sequence(Box::new(Slot::Scalar(Scalar::U8))), 1),
            FieldType::Sequence(e) => {
                let (slot, d) = Self::resolve(inner, e)?;
                (Slot::Sequence(Box::new(slot)), d + 1)
            }
            FieldType::Nested(r) => {
                let key = TypeKey { group: r.group.clone(), kind: MsgKind::Msg, name: r.name.clone() };
                let h = *inner.index.get(&key).ok_or_else(|| MsgError::UnknownType(r.to_string()))?;
                (Slot::Nested(h), inner.types[h.0 as usize].depth + 1)
            }
        })
    }

    fn build(inner: &RegistryInner, def: MessageTypeDef, handle: TypeHandle) -> Result<RegisteredType, MsgError> {
        let mut seen = std::collections::HashSet::new();
        let mut fields = Vec::with_capacity(def.fields.len());
        let mut depth = 0;
        let mut offset = 0u32;
        let mut align = 1u32;
        for f in &def.fields {
            if !seen.insert(f.name.as_str()) {
                return Err(MsgError::DuplicateField { ty: def.key().to_string(), field: f.name.clone() });
            }
            let (slot, d) = Self::resolve(inner, &f.ty)?;
            depth = depth.max(d);
            let (size, a) = scalar_align(&slot, inner);
            offset = align_up(offset, a);
            align = align.max(a);
            fields.push(FieldLayout { name: f.name.clone(), offset, slot });
            offset += size;
        }
        if depth > MAX_NESTING_DEPTH {
            return Err(MsgError::DepthExceeded(def.key().to_string(), depth));
        }
        let size = align_up(offset, align);

        let mut offsets = BTreeMap::new();
        for fl in &fields {
            Self::collect_offsets(inner, &fl.name, fl.offset, &fl.slot, &mut offsets);
        }

        // canonical text covers nested types so structurally different
        // definitions with the same name never share a fingerprint
        let mut canonical = def.to_string();
        let mut nested: Vec<TypeHandle> = Vec::new();
        for fl in &fields {
            Self::nested_handles(&fl.slot, &mut nested);
        }
        nested.sort();
        nested.dedup();
        for h in nested {
            canonical.push('\n');
            canonical.push_str(&inner.types[h.0 as usize].canonical);
        }
        let digest = Sha256::digest(canonical.as_bytes());
        let fingerprint = u64::from_le_bytes(digest[..8].try_into().unwrap());

        Ok(RegisteredType {
            handle,
            def,
            layout: MessageLayout { size, align, fields, offsets },
            depth,
            canonical,
            fingerprint,
        })
    }

    fn nested_handles(slot: &Slot, out: &mut Vec<TypeHandle>) {
        match slot {
            Slot::Nested(h) => out.push(*h),
            Slot::Sequence(e) => Self::nested_handles(e, out),
            Slot::Scalar(_) => {}
        }
    }

    fn collect_offsets(
        inner: &RegistryInner,
        path: &str,
        base: u32,
        slot: &Slot,
        out: &mut BTreeMap<String, (u32, OffsetKind)>,
    ) {
        match slot {
            Slot::Scalar(s) => {
                out.insert(path.to_string(), (base, OffsetKind::Scalar(*s)));
            }
            Slot::Sequence(_) => {
                out.insert(path.to_string(), (base, OffsetKind::SequenceHeader));
                out.insert(format!("{path}.data"), (base, OffsetKind::SequenceAddress));
                out.insert(format!("{path}.size"), (base + 4, OffsetKind::SequenceSize));
                out.insert(format!("{path}.capacity"), (base + 8, OffsetKind::SequenceCapacity));
            }
            Slot::Nested(h) => {
                out.insert(path.to_string(), (base, OffsetKind::Nested(*h)));
                let l = &inner.types[h.0 as usize].layout;
                for (sub, (off, kind)) in &l.offsets {
                    out.insert(format!("{path}.{sub}"), (base + off, *kind));
                }
            }
        }
    }

    pub fn lookup(&self, key: &TypeKey) -> Option<TypeHandle> {
        self.inner.read().unwrap().index.get(key).copied()
    }

    pub fn lookup_parts(&self, group: &str, kind: MsgKind, name: &str) -> Option<TypeHandle> {
        self.lookup(&TypeKey { group: group.into(), kind, name: name.into() })
    }

    pub fn get(&self, h: TypeHandle) -> Result<Arc<RegisteredType>, MsgError> {
        self.inner.read().unwrap().types.get(h.0 as usize).cloned().ok_or(MsgError::UnknownHandle(h.0))
    }

    pub fn layout(&self, h: TypeHandle) -> Result<MessageLayout, MsgError> {
        Ok(self.get(h)?.layout.clone())
    }

    pub fn fingerprint(&self, h: TypeHandle) -> Result<u64, MsgError> {
        Ok(self.get(h)?.fingerprint)
    }

    pub fn name_of(&self, h: TypeHandle) -> String {
        self.get(h).map(|t| t.def.key().to_string()).unwrap_or_else(|_| format!("#{}", h.0))
    }

    pub fn len(&self) -> usize {
        self.inner.read().unwrap().types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inline byte offset of `path` relative to the message root.
    ///
    /// A path ending in a sequence's `data` component addresses the 4-byte
    /// payload pointer of that sequence.
    pub fn offset_of(&self, h: TypeHandle, path: &str) -> Result<u32, MsgError> {
        self.resolve_path(h, path).map(|(off, _)| off)
    }

    pub fn resolve_path(&self, h: TypeHandle, path: &str) -> Result<(u32, OffsetKind), MsgError> {
        let inner = self.inner.read().unwrap();
        let mut ty = inner.types.get(h.0 as usize).ok_or(MsgError::UnknownHandle(h.0))?;
        let mut base = 0u32;
        let mut parts = path.split('.').peekable();
        if path.is_empty() {
            return Err(MsgError::UnknownField(path.into()));
        }
        while let Some(part) = parts.next() {
            let field =
                ty.layout.fields.iter().find(|f| f.name == part).ok_or_else(|| MsgError::UnknownField(path.into()))?;
            base += field.offset;
            match &field.slot {
                Slot::Scalar(s) => {
                    if parts.peek().is_some() {
                        return Err(MsgError::PathThroughScalar(path.into()));
                    }
                    return Ok((base, OffsetKind::Scalar(*s)));
                }
                Slot::Sequence(_) => {
                    let Some(sub) = parts.next() else {
                        return Ok((base, OffsetKind::SequenceHeader));
                    };
                    let r = match sub {
                        "data" => (base, OffsetKind::SequenceAddress),
                        "size" => (base + 4, OffsetKind::SequenceSize),
                        "capacity" => (base + 8, OffsetKind::SequenceCapacity),
                        _ => return Err(MsgError::UnknownField(path.into())),
                    };
                    if parts.peek().is_some() {
                        return Err(MsgError::PathThroughScalar(path.into()));
                    }
                    return Ok(r);
                }
                Slot::Nested(n) => {
                    if parts.peek().is_none() {
                        return Ok((base, OffsetKind::Nested(*n)));
                    }
                    ty = &inner.types[n.0 as usize];
                }
            }
        }
        unreachable!("loop returns on the last component")
    }

    /// Resolves a path that must name a sequence, returning its header offset
    /// and element slot.
    pub(crate) fn sequence_at(&self, h: TypeHandle, path: &str) -> Result<(u32, Slot), MsgError> {
        let (off, kind) = self.resolve_path(h, path)?;
        if kind != OffsetKind::SequenceHeader {
            return Err(MsgError::NotASequence(path.into()));
        }
        // walk again for the element slot
        let inner = self.inner.read().unwrap();
        let mut ty = &inner.types[h.0 as usize];
        let mut slot = None;
        for part in path.split('.') {
            let f = ty.layout.fields.iter().find(|f| f.name == part).unwrap();
            match &f.slot {
                Slot::Nested(n) => ty = &inner.types[n.0 as usize],
                Slot::Sequence(e) => slot = Some((**e).clone()),
                Slot::Scalar(_) => unreachable!(),
            }
        }
        Ok((off, slot.unwrap()))
    }

    /// Inline size of one element of `slot` inside a sequence payload.
    pub(crate) fn stride(&self, slot: &Slot) -> u32 {
        match slot {
            Slot::Scalar(s) => s.size(),
            Slot::Sequence(_) => SEQUENCE_HEADER_SIZE,
            Slot::Nested(h) => self.inner.read().unwrap().types[h.0 as usize].layout.size,
        }
    }
}

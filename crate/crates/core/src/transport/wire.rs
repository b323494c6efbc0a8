//! Frame layout on a peer connection, all integers little-endian:
//!
//! ```text
//! u32 length (of everything after this field)
//! u8  frame type
//! u16 name length, name bytes (UTF-8)
//! [u8; 8] type fingerprint
//! u64 correlation id
//! payload (rest of the frame)
//! ```

use std::io::{self, Read};

use thiserror::Error;

use crate::middleware::{EndpointInfo, EndpointKind};

/// Bytes of a frame body excluding name and payload.
pub const FIXED_OVERHEAD: usize = 1 + 2 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameType {
    Announce = 0,
    Publish = 1,
    SrvRequest = 2,
    SrvResponse = 3,
    ActionFeedback = 4,
}

impl FrameType {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0 => FrameType::Announce,
            1 => FrameType::Publish,
            2 => FrameType::SrvRequest,
            3 => FrameType::SrvResponse,
            4 => FrameType::ActionFeedback,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireFrame {
    pub frame_type: FrameType,
    pub name: String,
    pub fingerprint: u64,
    pub corr: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl WireFrame {
    pub fn new(frame_type: FrameType, name: &str, fingerprint: u64, corr: u64, payload: Vec<u8>) -> Self {
        WireFrame { frame_type, name: name.into(), fingerprint, corr, payload }
    }

    /// Length-prefixed encoding. Names longer than `u16::MAX` bytes are
    /// rejected.
    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let name = self.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(WireError::Malformed("name too long"));
        }
        let body = FIXED_OVERHEAD + name.len() + self.payload.len();
        if body > u32::MAX as usize {
            return Err(WireError::TooLarge(body));
        }
        let mut out = Vec::with_capacity(4 + body);
        out.extend_from_slice(&(body as u32).to_le_bytes());
        out.push(self.frame_type as u8);
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&self.corr.to_le_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Decodes a frame body (without the length prefix).
    pub fn decode_body(body: &[u8]) -> Result<Self, WireError> {
        if body.len() < FIXED_OVERHEAD {
            return Err(WireError::Malformed("short frame"));
        }
        let frame_type = FrameType::from_u8(body[0]).ok_or(WireError::Malformed("unknown frame type"))?;
        let name_len = u16::from_le_bytes([body[1], body[2]]) as usize;
        if body.len() < FIXED_OVERHEAD + name_len {
            return Err(WireError::Malformed("name overruns frame"));
        }
        let name =
            std::str::from_utf8(&body[3..3 + name_len]).map_err(|_| WireError::Malformed("name is not UTF-8"))?;
        let rest = &body[3 + name_len..];
        Ok(WireFrame {
            frame_type,
            name: name.into(),
            fingerprint: u64::from_le_bytes(rest[0..8].try_into().unwrap()),
            corr: u64::from_le_bytes(rest[8..16].try_into().unwrap()),
            payload: rest[16..].to_vec(),
        })
    }

    /// Reads one frame; `Ok(None)` on a clean end of stream before a prefix.
    pub fn read_from(r: &mut impl Read, max_body: usize) -> Result<Option<Self>, WireError> {
        let mut len = [0u8; 4];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let len = u32::from_le_bytes(len) as usize;
        if len > max_body {
            return Err(WireError::TooLarge(len));
        }
        let mut body = vec![0u8; len];
        r.read_exact(&mut body)?;
        Self::decode_body(&body).map(Some)
    }
}

fn kind_code(k: EndpointKind) -> u8 {
    match k {
        EndpointKind::Publisher => 0,
        EndpointKind::Subscriber => 1,
        EndpointKind::Server => 2,
        EndpointKind::Client => 3,
    }
}

/// Announce payload: `u32 count`, then per endpoint `u8 kind, u16 name
/// length, name, u64 fingerprint`.
pub fn encode_endpoints(eps: &[EndpointInfo]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(eps.len() as u32).to_le_bytes());
    for e in eps {
        out.push(kind_code(e.kind));
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&e.fingerprint.to_le_bytes());
    }
    out
}

pub fn decode_endpoints(mut b: &[u8]) -> Result<Vec<EndpointInfo>, WireError> {
    let mut take = |n: usize| -> Result<&[u8], WireError> {
        if b.len() < n {
            return Err(WireError::Malformed("truncated endpoint list"));
        }
        let (h, t) = b.split_at(n);
        b = t;
        Ok(h)
    };
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
    let mut out = Vec::new();
    for _ in 0..count {
        let kind = match take(1)?[0] {
            0 => EndpointKind::Publisher,
            1 => EndpointKind::Subscriber,
            2 => EndpointKind::Server,
            3 => EndpointKind::Client,
            _ => return Err(WireError::Malformed("unknown endpoint kind")),
        };
        let n = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(n)?).map_err(|_| WireError::Malformed("name is not UTF-8"))?.to_string();
        let fingerprint = u64::from_le_bytes(take(8)?.try_into().unwrap());
        out.push(EndpointInfo { kind, name, fingerprint });
    }
    if !b.is_empty() {
        return Err(WireError::Malformed("trailing bytes after endpoint list"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_layout() {
        let f = WireFrame::new(FrameType::Publish, "/a", 0x0807_0605_0403_0201, 0x1122, vec![0xEE, 0xFF]);
        let bytes = f.encode().unwrap();
        #[rustfmt::skip]
        let expected = [
            23, 0, 0, 0,                 // body length
            1,                           // publish
            2, 0, b'/', b'a',            // name
            1, 2, 3, 4, 5, 6, 7, 8,      // fingerprint
            0x22, 0x11, 0, 0, 0, 0, 0, 0, // correlation id
            0xEE, 0xFF,                  // payload
        ];
        assert_eq!(bytes, expected);
        let back = WireFrame::read_from(&mut &bytes[..], 1 << 20).unwrap().unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn rejects_oversized_and_malformed() {
        let f = WireFrame::new(FrameType::Publish, "t", 0, 0, vec![0; 100]);
        let bytes = f.encode().unwrap();
        assert!(matches!(WireFrame::read_from(&mut &bytes[..], 50), Err(WireError::TooLarge(_))));
        assert!(matches!(WireFrame::decode_body(&[9; 30]), Err(WireError::Malformed(_))));
        assert!(matches!(WireFrame::decode_body(&[1, 200, 0, 0]), Err(WireError::Malformed(_))));
        assert!(WireFrame::read_from(&mut &[][..], 10).unwrap().is_none());
        assert!(matches!(WireFrame::read_from(&mut &bytes[..10], 1000), Err(WireError::Io(_))));
    }

    #[test]
    fn endpoint_list_round_trip() {
        let eps = vec![
            EndpointInfo { kind: EndpointKind::Subscriber, name: "/send".into(), fingerprint: 7 },
            EndpointInfo { kind: EndpointKind::Server, name: "sobelservice".into(), fingerprint: u64::MAX },
        ];
        assert_eq!(decode_endpoints(&encode_endpoints(&eps)).unwrap(), eps);
        assert!(decode_endpoints(&encode_endpoints(&eps)[..10]).is_err());
    }

    proptest! {
        #[test]
        fn frame_round_trip(t in 0u8..5, name in "[a-z/_]{0,40}", fp in any::<u64>(), corr in any::<u64>(),
                            payload in proptest::collection::vec(any::<u8>(), 0..300)) {
            let f = WireFrame::new(FrameType::from_u8(t).unwrap(), &name, fp, corr, payload);
            let bytes = f.encode().unwrap();
            prop_assert_eq!(u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize, bytes.len() - 4);
            prop_assert_eq!(WireFrame::read_from(&mut &bytes[..], usize::MAX).unwrap().unwrap(), f);
        }
    }
}

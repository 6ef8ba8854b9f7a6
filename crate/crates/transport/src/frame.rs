//! Length-prefixed wire frames.
//!
//! ```text
//! length u32 BE | type u8 | round u64 BE | payload
//! ```
//!
//! `length` counts every byte after itself. Challenge and answer payloads
//! are one field element (n/8 bytes, little-endian); a reveal is the bit
//! byte followed by a_m.

use std::io::{self, ErrorKind, Read, Write};

use thiserror::Error;

/// Frames larger than this are refused before allocating.
pub const MAX_FRAME_LEN: u32 = 64 << 20;

const HEADER_LEN: usize = 4 + 1 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameType {
    Challenge = 0x01,
    Answer = 0x02,
    Reveal = 0x03,
    Abort = 0x04,
    Hello = 0x05,
    Schedule = 0x06,
    /// Bob-to-Bob transcript exchange after the run.
    Transcript = 0x07,
}

impl FrameType {
    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0x01 => FrameType::Challenge,
            0x02 => FrameType::Answer,
            0x03 => FrameType::Reveal,
            0x04 => FrameType::Abort,
            0x05 => FrameType::Hello,
            0x06 => FrameType::Schedule,
            0x07 => FrameType::Transcript,
            _ => return None,
        })
    }

    /// Exact payload size for this type, or `None` when variable.
    pub fn payload_len(self, element_len: usize) -> Option<usize> {
        match self {
            FrameType::Challenge | FrameType::Answer => Some(element_len),
            FrameType::Reveal => Some(1 + element_len),
            FrameType::Abort => Some(1),
            FrameType::Hello => Some(1 + 32),
            FrameType::Schedule => Some(16),
            FrameType::Transcript => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("malformed frame at byte {offset}: {detail}")]
    Malformed { offset: usize, detail: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn malformed(offset: usize, detail: impl Into<String>) -> FrameError {
    FrameError::Malformed { offset, detail: detail.into() }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WireFrame {
    pub kind: FrameType,
    pub round: u64,
    pub payload: Vec<u8>,
}

impl WireFrame {
    pub fn new(kind: FrameType, round: u64, payload: Vec<u8>) -> Self {
        WireFrame { kind, round, payload }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        let len = (1 + 8 + self.payload.len()) as u32;
        out.extend_from_slice(&len.to_be_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.round.to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decodes one frame from the front of `bytes`, returning it and the
    /// number of bytes used.
    pub fn decode(bytes: &[u8], element_len: usize) -> Result<(WireFrame, usize), FrameError> {
        if bytes.len() < 4 {
            return Err(malformed(bytes.len(), "truncated length field"));
        }
        let len = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
        check_len(len)?;
        let total = 4 + len as usize;
        if bytes.len() < total {
            return Err(malformed(bytes.len(), format!("frame needs {total} bytes")));
        }
        let frame = decode_body(&bytes[4..total], element_len)?;
        Ok((frame, total))
    }
}

fn check_len(len: u32) -> Result<(), FrameError> {
    if len < 9 {
        return Err(malformed(0, format!("length {len} is shorter than type and round")));
    }
    if len > MAX_FRAME_LEN {
        return Err(malformed(0, format!("length {len} exceeds {MAX_FRAME_LEN}")));
    }
    Ok(())
}

/// `body` is everything after the length field.
fn decode_body(body: &[u8], element_len: usize) -> Result<WireFrame, FrameError> {
    let kind = FrameType::from_code(body[0])
        .ok_or_else(|| malformed(4, format!("unknown frame type 0x{:02x}", body[0])))?;
    let round = u64::from_be_bytes(body[1..9].try_into().expect("8 bytes"));
    let payload = body[9..].to_vec();
    if let Some(expected) = kind.payload_len(element_len) {
        if payload.len() != expected {
            return Err(malformed(
                HEADER_LEN,
                format!("{kind:?} payload is {} bytes, expected {expected}", payload.len()),
            ));
        }
    }
    Ok(WireFrame { kind, round, payload })
}

pub fn write_frame<W: Write>(w: &mut W, frame: &WireFrame) -> io::Result<()> {
    w.write_all(&frame.encode())?;
    w.flush()
}

/// Reads one frame. A clean end of stream before the first byte is
/// reported as `UnexpectedEof`.
pub fn read_frame<R: Read>(r: &mut R, element_len: usize) -> Result<WireFrame, FrameError> {
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let len = u32::from_be_bytes(len_bytes);
    check_len(len)?;
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => malformed(4, "stream ended inside a frame"),
        _ => e.into(),
    })?;
    decode_body(&body, element_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn challenge_layout() {
        let f = WireFrame::new(FrameType::Challenge, 1, vec![0xAB; 16]);
        let bytes = f.encode();
        assert_eq!(bytes.len(), 4 + 1 + 8 + 16);
        assert_eq!(&bytes[..4], &25u32.to_be_bytes());
        assert_eq!(bytes[4], 0x01);
        assert_eq!(&bytes[5..13], &1u64.to_be_bytes());
        assert_eq!(WireFrame::decode(&bytes, 16).unwrap(), (f, 29));
    }

    #[test]
    fn rejects_bad_frames() {
        let good = WireFrame::new(FrameType::Answer, 3, vec![1; 16]).encode();
        for cut in [0, 3, 4, 12, 28] {
            let err = WireFrame::decode(&good[..cut], 16).unwrap_err();
            assert!(matches!(err, FrameError::Malformed { offset, .. } if offset == cut));
        }
        let mut unknown = good.clone();
        unknown[4] = 0x42;
        assert!(matches!(WireFrame::decode(&unknown, 16), Err(FrameError::Malformed { offset: 4, .. })));
        // Right framing, wrong element width.
        assert!(matches!(WireFrame::decode(&good, 8), Err(FrameError::Malformed { offset: 13, .. })));
        let mut huge = good.clone();
        huge[..4].copy_from_slice(&(MAX_FRAME_LEN + 1).to_be_bytes());
        assert!(matches!(WireFrame::decode(&huge, 16), Err(FrameError::Malformed { offset: 0, .. })));
        let mut tiny = good;
        tiny[..4].copy_from_slice(&8u32.to_be_bytes());
        assert!(WireFrame::decode(&tiny, 16).is_err());
    }

    #[test]
    fn stream_read_matches_slice_decode() {
        let frames = [
            WireFrame::new(FrameType::Hello, 0, vec![2; 33]),
            WireFrame::new(FrameType::Reveal, 201, vec![1; 17]),
            WireFrame::new(FrameType::Transcript, 0, vec![]),
        ];
        let bytes: Vec<u8> = frames.iter().flat_map(|f| f.encode()).collect();
        let mut cursor = io::Cursor::new(bytes);
        for f in &frames {
            assert_eq!(&read_frame(&mut cursor, 16).unwrap(), f);
        }
        assert!(
            matches!(read_frame(&mut cursor, 16), Err(FrameError::Io(e)) if e.kind() == ErrorKind::UnexpectedEof)
        );
    }
}

//! Framed wire format. Every frame is
//! `"SVA1" | type u8 | stream_id u32 | seq u32 | payload_len u32 | payload`,
//! integers little-endian.

use std::io::{self, Read, Write};

use super::{Packet, StreamError};

pub const MAGIC: &[u8; 4] = b"SVA1";
pub const HEADER_LEN: usize = 17;
/// Upper bound on accepted payloads.
pub const MAX_PAYLOAD: u32 = 16 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameKind {
    /// PCM16LE samples.
    Audio = 0,
    /// End of audio; the payload may carry trailing samples.
    End = 1,
    /// UTF-8 partial transcript.
    Partial = 2,
    /// UTF-8 final transcript.
    Final = 3,
}

impl FrameKind {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0 => FrameKind::Audio,
            1 => FrameKind::End,
            2 => FrameKind::Partial,
            3 => FrameKind::Final,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub stream_id: u32,
    pub seq: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn text(kind: FrameKind, stream_id: u32, seq: u32, text: &str) -> Self {
        Self {
            kind,
            stream_id,
            seq,
            payload: text.as_bytes().to_vec(),
        }
    }

    /// AUDIO, or END when the packet is final.
    pub fn from_packet(p: &Packet) -> Self {
        Self {
            kind: if p.is_final { FrameKind::End } else { FrameKind::Audio },
            stream_id: p.stream_id,
            seq: p.seq,
            payload: encode_pcm16(&p.samples),
        }
    }

    pub fn to_packet(&self) -> Result<Packet, StreamError> {
        match self.kind {
            FrameKind::Audio | FrameKind::End => Ok(Packet {
                stream_id: self.stream_id,
                seq: self.seq,
                samples: decode_pcm16(&self.payload)?,
                is_final: self.kind == FrameKind::End,
            }),
            k => Err(StreamError::Protocol(format!("{k:?} frame carries no audio"))),
        }
    }

    pub fn payload_text(&self) -> Result<String, StreamError> {
        String::from_utf8(self.payload.clone()).map_err(|e| StreamError::Protocol(format!("transcript is not UTF-8: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(HEADER_LEN + self.payload.len());
        b.extend_from_slice(MAGIC);
        b.push(self.kind as u8);
        b.extend_from_slice(&self.stream_id.to_le_bytes());
        b.extend_from_slice(&self.seq.to_le_bytes());
        b.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        b.extend_from_slice(&self.payload);
        b
    }
}

pub fn encode_pcm16(samples: &[i16]) -> Vec<u8> {
    samples.iter().flat_map(|s| s.to_le_bytes()).collect()
}

pub fn decode_pcm16(bytes: &[u8]) -> Result<Vec<i16>, StreamError> {
    if bytes.len() % 2 != 0 {
        return Err(StreamError::Protocol("odd PCM16 payload length".into()));
    }
    Ok(bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect())
}

pub fn write_frame(w: &mut impl Write, f: &Frame) -> io::Result<()> {
    w.write_all(&f.to_bytes())?;
    w.flush()
}

/// `Ok(None)` on a clean end of stream before any header byte.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>, StreamError> {
    let mut h = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut h[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(StreamError::Protocol("truncated frame header".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    if &h[..4] != MAGIC {
        return Err(StreamError::Protocol("bad magic".into()));
    }
    let kind = FrameKind::from_u8(h[4]).ok_or_else(|| StreamError::Protocol(format!("unknown frame type {}", h[4])))?;
    let word = |i: usize| u32::from_le_bytes([h[i], h[i + 1], h[i + 2], h[i + 3]]);
    let len = word(13);
    if len > MAX_PAYLOAD {
        return Err(StreamError::Protocol(format!("payload of {len} bytes exceeds limit")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)
        .map_err(|e| StreamError::Protocol(format!("truncated payload: {e}")))?;
    Ok(Some(Frame {
        kind,
        stream_id: word(5),
        seq: word(9),
        payload,
    }))
}

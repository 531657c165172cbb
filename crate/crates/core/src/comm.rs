//! Binary message codec, byte ledger and the lossy channel model.
//!
//! Token message layout (little-endian):
//!
//! | field | bytes |
//! |---|---|
//! | magic `GCP1` | 4 |
//! | sender `u32`, receiver `u32` | 8 |
//! | level `u8` | 1 |
//! | token count K `u32` | 4 |
//! | channels C `u16` | 2 |
//! | timestamp ms `i64` | 8 |
//! | K × (row `u16`, col `u16`, C × `f32`) | K·(4 + 4C) |
//! | agent token C × `f32` | 4C |
//! | confidence H·W × `f32` | 4HW |
//! | consensus H·W × `f32` | 4HW |
//!
//! The grid size is implied by the bytes left after the agent token.
//! Magic `GCQ1` marks the 8-bit map variant (one `u8` per map cell).

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose2;
use crate::nn::stream_rng;
use crate::scene::mix;
use crate::Result;

pub const TOKEN_MAGIC: [u8; 4] = *b"GCP1";
pub const TOKEN_MAGIC_U8: [u8; 4] = *b"GCQ1";
pub const REQUEST_MAGIC: [u8; 4] = *b"GCR1";
pub const HEADER_BYTES: usize = 19;
pub const TIMESTAMP_BYTES: usize = 8;
/// 64 · 64 · 256 · 4 bytes.
pub const BASE_UNIT_BYTES: u64 = 4_194_304;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("buffer truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("count mismatch: {0}")]
    CountMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapEncoding {
    #[default]
    F32,
    /// `round(255·v)` clamped to `[0, 255]`.
    U8,
}

impl MapEncoding {
    pub fn bytes_per_cell(self) -> usize {
        match self {
            MapEncoding::F32 => 4,
            MapEncoding::U8 => 1,
        }
    }

    pub fn quantize(v: f32) -> u8 {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }

    pub fn dequantize(q: u8) -> f32 {
        q as f32 / 255.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMessage {
    pub sender: u32,
    pub receiver: u32,
    pub level: u8,
    pub timestamp_ms: i64,
    pub channels: u16,
    pub indices: Vec<(u16, u16)>,
    /// `K × C` token features in index order.
    pub tokens: Vec<f32>,
    pub agent_token: Vec<f32>,
    pub confidence: Vec<f32>,
    pub consensus: Vec<f32>,
    pub encoding: MapEncoding,
}

/// Serialized size of a token message.
pub fn token_message_len(k: usize, channels: usize, cells: usize, encoding: MapEncoding) -> usize {
    HEADER_BYTES + TIMESTAMP_BYTES + k * (4 + 4 * channels) + 4 * channels + 2 * encoding.bytes_per_cell() * cells
}

/// Serialized size of a demand request.
pub fn request_len(k: usize) -> usize {
    HEADER_BYTES + 4 * k
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::Truncated {
            needed: usize::MAX,
            available: self.buf.len(),
        })?;
        if end > self.buf.len() {
            return Err(WireError::Truncated {
                needed: end,
                available: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> std::result::Result<i64, WireError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, WireError> {
        let bytes = self.take(n.checked_mul(4).ok_or(WireError::Truncated {
            needed: usize::MAX,
            available: self.buf.len(),
        })?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_bits(u32::from_le_bytes(b.try_into().unwrap())))
            .collect())
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

impl TokenMessage {
    pub fn token_count(&self) -> usize {
        self.indices.len()
    }

    pub fn cells(&self) -> usize {
        self.confidence.len()
    }

    pub fn token(&self, t: usize) -> &[f32] {
        let c = self.channels as usize;
        &self.tokens[t * c..(t + 1) * c]
    }

    pub fn encoded_len(&self) -> usize {
        token_message_len(self.token_count(), self.channels as usize, self.cells(), self.encoding)
    }

    fn validate(&self) -> std::result::Result<(), WireError> {
        let c = self.channels as usize;
        if self.tokens.len() != self.indices.len() * c {
            return Err(WireError::CountMismatch(format!(
                "{} token values for {} tokens of width {c}",
                self.tokens.len(),
                self.indices.len()
            )));
        }
        if self.agent_token.len() != c {
            return Err(WireError::CountMismatch(format!("agent token has {} values, expected {c}", self.agent_token.len())));
        }
        if self.confidence.len() != self.consensus.len() {
            return Err(WireError::CountMismatch(format!(
                "confidence has {} cells, consensus {}",
                self.confidence.len(),
                self.consensus.len()
            )));
        }
        if u32::try_from(self.indices.len()).is_err() {
            return Err(WireError::CountMismatch("token count exceeds u32".into()));
        }
        Ok(())
    }

    pub fn serialize(&self) -> std::result::Result<Vec<u8>, WireError> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(match self.encoding {
            MapEncoding::F32 => &TOKEN_MAGIC,
            MapEncoding::U8 => &TOKEN_MAGIC_U8,
        });
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&self.receiver.to_le_bytes());
        out.push(self.level);
        out.extend_from_slice(&(self.indices.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.channels.to_le_bytes());
        out.extend_from_slice(&self.timestamp_ms.to_le_bytes());
        let c = self.channels as usize;
        for (t, (r, col)) in self.indices.iter().enumerate() {
            out.extend_from_slice(&r.to_le_bytes());
            out.extend_from_slice(&col.to_le_bytes());
            for v in &self.tokens[t * c..(t + 1) * c] {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        for v in &self.agent_token {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        for map in [&self.confidence, &self.consensus] {
            match self.encoding {
                MapEncoding::F32 => map.iter().for_each(|v| out.extend_from_slice(&v.to_bits().to_le_bytes())),
                MapEncoding::U8 => map.iter().for_each(|v| out.push(MapEncoding::quantize(*v))),
            }
        }
        Ok(out)
    }

    pub fn deserialize(buf: &[u8]) -> std::result::Result<Self, WireError> {
        let mut r = Reader { buf, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        let encoding = match magic {
            TOKEN_MAGIC => MapEncoding::F32,
            TOKEN_MAGIC_U8 => MapEncoding::U8,
            other => return Err(WireError::BadMagic(other)),
        };
        let sender = r.u32()?;
        let receiver = r.u32()?;
        let level = r.u8()?;
        let k = r.u32()? as usize;
        let channels = r.u16()?;
        let timestamp_ms = r.i64()?;
        let c = channels as usize;
        let body = (k as u128) * (4 + 4 * c as u128) + 4 * c as u128;
        if body > r.remaining() as u128 {
            return Err(WireError::Truncated {
                needed: usize::try_from(body + (HEADER_BYTES + TIMESTAMP_BYTES) as u128).unwrap_or(usize::MAX),
                available: buf.len(),
            });
        }
        let mut indices = Vec::with_capacity(k);
        let mut tokens = Vec::with_capacity(k * c);
        for _ in 0..k {
            let row = r.u16()?;
            let col = r.u16()?;
            indices.push((row, col));
            tokens.extend(r.f32s(c)?);
        }
        let agent_token = r.f32s(c)?;
        let per_cell = 2 * encoding.bytes_per_cell();
        let rest = r.remaining();
        if rest % per_cell != 0 {
            return Err(WireError::CountMismatch(format!(
                "{rest} map bytes do not split into two maps of {} byte cells",
                encoding.bytes_per_cell()
            )));
        }
        let cells = rest / per_cell;
        let (confidence, consensus) = match encoding {
            MapEncoding::F32 => (r.f32s(cells)?, r.f32s(cells)?),
            MapEncoding::U8 => {
                let a = r.take(cells)?.iter().map(|q| MapEncoding::dequantize(*q)).collect();
                let b = r.take(cells)?.iter().map(|q| MapEncoding::dequantize(*q)).collect();
                (a, b)
            }
        };
        Ok(TokenMessage {
            sender,
            receiver,
            level,
            timestamp_ms,
            channels,
            indices,
            tokens,
            agent_token,
            confidence,
            consensus,
            encoding,
        })
    }
}

/// Ego → neighbor list of requested cells at one level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemandRequest {
    pub sender: u32,
    pub receiver: u32,
    pub level: u8,
    pub indices: Vec<(u16, u16)>,
}

impl DemandRequest {
    pub fn serialize(&self) -> std::result::Result<Vec<u8>, WireError> {
        let k = u32::try_from(self.indices.len()).map_err(|_| WireError::CountMismatch("request count exceeds u32".into()))?;
        let mut out = Vec::with_capacity(request_len(self.indices.len()));
        out.extend_from_slice(&REQUEST_MAGIC);
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&self.receiver.to_le_bytes());
        out.push(self.level);
        out.extend_from_slice(&k.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        for (r, c) in &self.indices {
            out.extend_from_slice(&r.to_le_bytes());
            out.extend_from_slice(&c.to_le_bytes());
        }
        Ok(out)
    }

    pub fn deserialize(buf: &[u8]) -> std::result::Result<Self, WireError> {
        let mut r = Reader { buf, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != REQUEST_MAGIC {
            return Err(WireError::BadMagic(magic));
        }
        let sender = r.u32()?;
        let receiver = r.u32()?;
        let level = r.u8()?;
        let k = r.u32()? as usize;
        let channels = r.u16()?;
        if channels != 0 {
            return Err(WireError::CountMismatch(format!("request carries {channels} channels")));
        }
        if (k as u128) * 4 != r.remaining() as u128 {
            if (k as u128) * 4 > r.remaining() as u128 {
                return Err(WireError::Truncated {
                    needed: HEADER_BYTES.saturating_add(k.saturating_mul(4)),
                    available: buf.len(),
                });
            }
            return Err(WireError::CountMismatch(format!("{} trailing bytes", r.remaining() - 4 * k)));
        }
        let mut indices = Vec::with_capacity(k);
        for _ in 0..k {
            indices.push((r.u16()?, r.u16()?));
        }
        Ok(DemandRequest {
            sender,
            receiver,
            level,
            indices,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkKey {
    pub frame_ms: i64,
    pub sender: u32,
    pub receiver: u32,
}

/// Byte counts per `(frame, sender, receiver)`; units are derived on demand.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    links: BTreeMap<LinkKey, u64>,
}

impl BudgetLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn account(&mut self, frame_ms: i64, sender: u32, receiver: u32, bytes: usize) {
        *self
            .links
            .entry(LinkKey {
                frame_ms,
                sender,
                receiver,
            })
            .or_insert(0) += bytes as u64;
    }

    pub fn total_bytes(&self) -> u64 {
        self.links.values().sum()
    }

    pub fn units(&self) -> f64 {
        bytes_to_units(self.total_bytes())
    }

    pub fn link_bytes(&self) -> impl Iterator<Item = (&LinkKey, &u64)> {
        self.links.iter()
    }

    pub fn merge(&mut self, other: &BudgetLedger) {
        for (k, v) in &other.links {
            *self.links.entry(*k).or_insert(0) += v;
        }
    }

    /// Fails on the first link-frame whose units exceed `cap`.
    pub fn check_cap(&self, cap: f64) -> Result<()> {
        for (k, bytes) in &self.links {
            let units = bytes_to_units(*bytes);
            if units > cap {
                return Err(crate::Error::BudgetExceeded {
                    sender: k.sender,
                    receiver: k.receiver,
                    units,
                    budget: cap,
                });
            }
        }
        Ok(())
    }
}

/// Exact for any byte count below 2^53 since the base unit is a power of two.
pub fn bytes_to_units(bytes: u64) -> f64 {
    bytes as f64 / BASE_UNIT_BYTES as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelModel {
    pub latency_ms: i64,
    pub sigma_xy: f64,
    pub sigma_yaw: f64,
    pub drop_probability: f64,
    pub seed: u64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        ChannelModel {
            latency_ms: 0,
            sigma_xy: 0.0,
            sigma_yaw: 0.0,
            drop_probability: 0.0,
            seed: 0,
        }
    }
}

/// Random outcome of one link at one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkDraw {
    pub dropped: bool,
    pub dx: f64,
    pub dy: f64,
    pub dyaw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Delivery<T> {
    Delivered { payload: T, arrival_ms: i64, pose: Pose2 },
    Dropped,
}

impl ChannelModel {
    /// Draws the drop decision and all three pose offsets for a link, always
    /// consuming the same number of values so streams stay aligned.
    pub fn sample_link(&self, frame_ms: i64, sender: u32, receiver: u32) -> LinkDraw {
        let mut rng = stream_rng(self.seed, mix(&[0x6368_616e, frame_ms as u64, sender as u64, receiver as u64]));
        let u: f64 = rand::Rng::random(&mut rng);
        let n = Normal::new(0.0, 1.0).unwrap();
        let (a, b, c): (f64, f64, f64) = (n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
        LinkDraw {
            dropped: u < self.drop_probability,
            dx: a * self.sigma_xy,
            dy: b * self.sigma_xy,
            dyaw: c * self.sigma_yaw,
        }
    }

    /// Delivers `payload` sent at `send_ms`, perturbing the sender pose metadata.
    pub fn transmit<T>(&self, payload: T, sender: u32, receiver: u32, sender_pose: &Pose2, send_ms: i64) -> Delivery<T> {
        let draw = self.sample_link(send_ms, sender, receiver);
        if draw.dropped {
            return Delivery::Dropped;
        }
        Delivery::Delivered {
            payload,
            arrival_ms: send_ms + self.latency_ms,
            pose: Pose2::new(sender_pose.x + draw.dx, sender_pose.y + draw.dy, sender_pose.yaw + draw.dyaw),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn message(k: usize, c: usize, cells: usize) -> TokenMessage {
        TokenMessage {
            sender: 3,
            receiver: 0,
            level: 1,
            timestamp_ms: -100,
            channels: c as u16,
            indices: (0..k).map(|i| (i as u16, (2 * i) as u16)).collect(),
            tokens: (0..k * c).map(|i| i as f32 * 0.5).collect(),
            agent_token: vec![1.0; c],
            confidence: vec![0.25; cells],
            consensus: vec![0.75; cells],
            encoding: MapEncoding::F32,
        }
    }

    #[test]
    fn smallest_message_length() {
        let m = message(0, 1, 1);
        let b = m.serialize().unwrap();
        assert_eq!(b.len(), 19 + 8 + 4 + 8);
        assert_eq!(TokenMessage::deserialize(&b).unwrap(), m);
    }

    #[test]
    fn header_layout() {
        let b = message(2, 3, 4).serialize().unwrap();
        assert_eq!(&b[0..4], b"GCP1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 3);
        assert_eq!(b[12], 1);
        assert_eq!(u32::from_le_bytes(b[13..17].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(b[17..19].try_into().unwrap()), 3);
        assert_eq!(i64::from_le_bytes(b[19..27].try_into().unwrap()), -100);
    }

    #[test]
    fn decode_errors() {
        let b = message(2, 3, 4).serialize().unwrap();
        assert!(matches!(TokenMessage::deserialize(&b[..10]), Err(WireError::Truncated { .. })));
        assert!(matches!(TokenMessage::deserialize(&b[..40]), Err(WireError::Truncated { .. })));
        let mut bad = b.clone();
        bad[3] = b'9';
        assert!(matches!(TokenMessage::deserialize(&bad), Err(WireError::BadMagic(_))));
        assert!(matches!(TokenMessage::deserialize(&b[..b.len() - 3]), Err(WireError::CountMismatch(_))));
        let mut short = message(2, 3, 4);
        short.tokens.pop();
        assert!(matches!(short.serialize(), Err(WireError::CountMismatch(_))));
    }

    #[test]
    fn quantized_maps_round_trip_on_grid_values() {
        let mut m = message(1, 2, 3);
        m.encoding = MapEncoding::U8;
        m.confidence = vec![0.0, 1.0, 51.0 / 255.0];
        m.consensus = vec![MapEncoding::dequantize(200); 3];
        let b = m.serialize().unwrap();
        assert_eq!(b.len(), token_message_len(1, 2, 3, MapEncoding::U8));
        assert_eq!(TokenMessage::deserialize(&b).unwrap(), m);
    }

    #[test]
    fn request_round_trip() {
        let r = DemandRequest {
            sender: 0,
            receiver: 2,
            level: 0,
            indices: vec![(1, 2), (3, 4)],
        };
        let b = r.serialize().unwrap();
        assert_eq!(b.len(), 19 + 8);
        assert_eq!(DemandRequest::deserialize(&b).unwrap(), r);
        assert!(DemandRequest::deserialize(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn ledger_units() {
        let mut l = BudgetLedger::new();
        assert_eq!(l.units(), 0.0);
        l.account(0, 1, 0, 4_194_304);
        assert_eq!(l.units(), 1.0);
        let mut l = BudgetLedger::new();
        l.account(0, 1, 0, 2_097_152);
        l.account(0, 2, 0, 2_097_152);
        assert_eq!(l.units(), 1.0);
        assert!(l.check_cap(0.5).is_ok());
        assert!(l.check_cap(0.4).is_err());
    }

    #[test]
    fn identity_channel_passes_through() {
        let ch = ChannelModel::default();
        let pose = Pose2::new(1.0, 2.0, 0.3);
        match ch.transmit(7u8, 1, 0, &pose, 50) {
            Delivery::Delivered { payload, arrival_ms, pose: p } => {
                assert_eq!(payload, 7);
                assert_eq!(arrival_ms, 50);
                assert_eq!(p, pose);
            }
            Delivery::Dropped => panic!("dropped"),
        }
    }

    #[test]
    fn latency_shifts_arrival() {
        let ch = ChannelModel {
            latency_ms: 100,
            ..Default::default()
        };
        match ch.transmit((), 1, 0, &Pose2::IDENTITY, 0) {
            Delivery::Delivered { arrival_ms, .. } => assert_eq!(arrival_ms, 100),
            Delivery::Dropped => panic!("dropped"),
        }
    }

    #[test]
    fn certain_drop() {
        let ch = ChannelModel {
            drop_probability: 1.0,
            ..Default::default()
        };
        assert_eq!(ch.transmit((), 1, 0, &Pose2::IDENTITY, 0), Delivery::Dropped);
    }
}

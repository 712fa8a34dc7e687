//! Binary wire protocol. Every frame is a 4-byte little-endian payload
//! length, a 1-byte message tag, then the payload. Integers are
//! little-endian throughout and vectors are length-prefixed; sorted index
//! lists travel delta-encoded with LEB128 varints.

use crate::psu::{BloomParams, DrawRange, HashConfig};
use crate::quant::QuantConfig;
use crate::secure_agg::client::{decode_share, encode_share};
use crate::secure_agg::session::Advert;
use crate::secure_agg::shamir::Share;
use crate::{ClientId, Index};

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("truncated frame")]
    FramingError,
    #[error("unknown message tag {0:#04x}")]
    ProtocolError(u8),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which aggregation scheme a round runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Submodel learning: private set union, perturbed index sets,
    /// submodel download, count-weighted upload.
    Sfsl,
    /// Full-model baseline: no union, no perturbation, every client works
    /// on the whole index domain with a unified weight.
    Sfl,
}

/// How update lanes are represented in the upload session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelMode {
    /// Stochastically quantized integer levels through masked summation.
    Stochastic,
    /// Expected (real-valued) levels summed exactly; a fidelity mode that
    /// removes quantization noise to expose the aggregation semantics.
    Exact,
}

/// Trainer hyperparameters forwarded to clients.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HyperParams {
    pub batch_size: u32,
    pub epochs: u32,
    pub learning_rate: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            batch_size: 2,
            epochs: 1,
            learning_rate: 1.0,
        }
    }
}

/// The per-round contract broadcast to every selected client.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfigMsg {
    pub round_id: u64,
    pub period_id: u64,
    pub scheme: Scheme,
    /// Selected clients in ascending id order; fixes ranks and share
    /// points for every session this round.
    pub roster: Vec<ClientId>,
    pub threshold: u32,
    pub modulus: u64,
    /// Largest per-index sample count a client may report; bounds summed
    /// lanes below the modulus.
    pub max_count: u32,
    /// Full index domain size m.
    pub domain: u32,
    /// Parameter columns d.
    pub cols: u32,
    pub bloom: BloomParams,
    /// Partition start indices.
    pub partition_starts: Vec<Index>,
    pub quant: QuantConfig,
    /// Round-default response probabilities (p1, p2, p3, p4).
    pub cpp: [f64; 4],
    pub draw_range: DrawRange,
    pub level_mode: LevelMode,
    pub hyper: HyperParams,
    /// Trailing indices treated as part of every real index set.
    pub reserved_tail: u32,
    pub filter_session: u64,
    pub indicator_session: u64,
    pub update_session: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// Socket-transport registration.
    Hello { client: ClientId },
    RoundConfig(Box<RoundConfigMsg>),
    KeyAdvertise {
        session: u64,
        client: ClientId,
        advert: Advert,
    },
    KeyDigest {
        session: u64,
        entries: Vec<(ClientId, Advert)>,
    },
    /// Encrypted share bundles. `client` is the client-side party of the
    /// exchange; entries pair the counterparty with the ciphertext.
    EncryptedShares {
        session: u64,
        client: ClientId,
        entries: Vec<(ClientId, Vec<u8>)>,
    },
    MaskedInput {
        session: u64,
        modulus: u64,
        lanes: Vec<u32>,
    },
    UnmaskRequest {
        session: u64,
        live: Vec<ClientId>,
        dropped: Vec<ClientId>,
    },
    UnmaskResponse {
        session: u64,
        shares: Vec<Share>,
    },
    UnionAnnounce {
        union: Vec<Index>,
        update_session: u64,
        update_len: u64,
    },
    SubmodelRequest {
        indices: Vec<Index>,
    },
    SubmodelResponse {
        cols: u32,
        rows: Vec<f64>,
    },
    /// Real-valued update lanes for the exact fidelity mode.
    ExactInput {
        session: u64,
        lanes: Vec<f64>,
    },
    RoundAbort {
        reason: String,
    },
    /// Per-round client-side counters the server cannot observe.
    ClientReport {
        clips: u64,
        perturbed_size: u32,
        succinct_size: u32,
    },
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::Hello { .. } => 0x01,
            Message::RoundConfig(_) => 0x02,
            Message::KeyAdvertise { .. } => 0x03,
            Message::KeyDigest { .. } => 0x04,
            Message::EncryptedShares { .. } => 0x05,
            Message::MaskedInput { .. } => 0x06,
            Message::UnmaskRequest { .. } => 0x07,
            Message::UnmaskResponse { .. } => 0x08,
            Message::UnionAnnounce { .. } => 0x09,
            Message::SubmodelRequest { .. } => 0x0a,
            Message::SubmodelResponse { .. } => 0x0b,
            Message::ExactInput { .. } => 0x0c,
            Message::RoundAbort { .. } => 0x0d,
            Message::ClientReport { .. } => 0x0e,
        }
    }

    pub fn tag_name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "hello",
            Message::RoundConfig(_) => "round-config",
            Message::KeyAdvertise { .. } => "key-advertise",
            Message::KeyDigest { .. } => "key-digest",
            Message::EncryptedShares { .. } => "encrypted-shares",
            Message::MaskedInput { .. } => "masked-input",
            Message::UnmaskRequest { .. } => "unmask-request",
            Message::UnmaskResponse { .. } => "unmask-response",
            Message::UnionAnnounce { .. } => "union-announce",
            Message::SubmodelRequest { .. } => "submodel-request",
            Message::SubmodelResponse { .. } => "submodel-response",
            Message::ExactInput { .. } => "exact-input",
            Message::RoundAbort { .. } => "round-abort",
            Message::ClientReport { .. } => "client-report",
        }
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn varint(&mut self, mut v: u32) {
        loop {
            let byte = (v & 0x7f) as u8;
            v >>= 7;
            if v == 0 {
                self.buf.push(byte);
                break;
            }
            self.buf.push(byte | 0x80);
        }
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }

    fn client(&mut self, c: ClientId) {
        self.u32(c.0);
    }

    fn client_list(&mut self, cs: &[ClientId]) {
        self.u32(cs.len() as u32);
        for c in cs {
            self.client(*c);
        }
    }

    /// Sorted indices as (count, first, successive deltas), varint-coded.
    fn index_set(&mut self, sorted: &[Index]) {
        debug_assert!(sorted.windows(2).all(|w| w[0] < w[1]));
        self.u32(sorted.len() as u32);
        let mut prev = 0u32;
        for &j in sorted {
            self.varint(j - prev);
            prev = j;
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.pos + n > self.buf.len() {
            return Err(WireError::Malformed("unexpected end of payload".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn varint(&mut self) -> Result<u32, WireError> {
        let mut v = 0u64;
        let mut shift = 0u32;
        loop {
            let byte = self.u8()?;
            v |= ((byte & 0x7f) as u64) << shift;
            if byte & 0x80 == 0 {
                break;
            }
            shift += 7;
            if shift > 28 {
                return Err(WireError::Malformed("varint overflow".into()));
            }
        }
        u32::try_from(v).map_err(|_| WireError::Malformed("varint overflow".into()))
    }

    fn bytes(&mut self) -> Result<Vec<u8>, WireError> {
        let len = self.u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }

    fn client(&mut self) -> Result<ClientId, WireError> {
        Ok(ClientId(self.u32()?))
    }

    fn client_list(&mut self) -> Result<Vec<ClientId>, WireError> {
        let len = self.u32()? as usize;
        (0..len).map(|_| self.client()).collect()
    }

    fn index_set(&mut self) -> Result<Vec<Index>, WireError> {
        let len = self.u32()? as usize;
        let mut out = Vec::with_capacity(len);
        let mut prev = 0u32;
        for _ in 0..len {
            let delta = self.varint()?;
            prev = prev
                .checked_add(delta)
                .ok_or_else(|| WireError::Malformed("index overflow".into()))?;
            out.push(prev);
        }
        Ok(out)
    }

    fn finish(self) -> Result<(), WireError> {
        if self.pos != self.buf.len() {
            return Err(WireError::Malformed("trailing payload bytes".into()));
        }
        Ok(())
    }
}

fn write_advert(w: &mut Writer, a: &Advert) {
    w.bytes(&a.mask_public);
    w.bytes(&a.enc_public);
}

fn read_advert(r: &mut Reader) -> Result<Advert, WireError> {
    Ok(Advert {
        mask_public: r.bytes()?,
        enc_public: r.bytes()?,
    })
}

fn write_bloom(w: &mut Writer, b: &BloomParams) {
    w.u32(b.len);
    w.u32(b.hashes);
    w.u32(b.capacity);
    w.f64(b.target_fpr);
    match b.hash {
        HashConfig::Identity => {
            w.u8(0);
            w.u64(0);
        }
        HashConfig::Seeded { seed } => {
            w.u8(1);
            w.u64(seed);
        }
    }
}

fn read_bloom(r: &mut Reader) -> Result<BloomParams, WireError> {
    let len = r.u32()?;
    let hashes = r.u32()?;
    let capacity = r.u32()?;
    let target_fpr = r.f64()?;
    let mode = r.u8()?;
    let seed = r.u64()?;
    let hash = match mode {
        0 => HashConfig::Identity,
        1 => HashConfig::Seeded { seed },
        m => return Err(WireError::Malformed(format!("bad hash mode {m}"))),
    };
    Ok(BloomParams {
        len,
        hashes,
        capacity,
        target_fpr,
        hash,
    })
}

fn encode_payload(msg: &Message) -> Vec<u8> {
    let mut w = Writer::new();
    match msg {
        Message::Hello { client } => w.client(*client),
        Message::RoundConfig(c) => {
            w.u64(c.round_id);
            w.u64(c.period_id);
            w.u8(match c.scheme {
                Scheme::Sfsl => 0,
                Scheme::Sfl => 1,
            });
            w.client_list(&c.roster);
            w.u32(c.threshold);
            w.u64(c.modulus);
            w.u32(c.max_count);
            w.u32(c.domain);
            w.u32(c.cols);
            write_bloom(&mut w, &c.bloom);
            w.u32(c.partition_starts.len() as u32);
            for &s in &c.partition_starts {
                w.u32(s);
            }
            w.u32(c.quant.levels);
            w.f64(c.quant.w_min);
            w.f64(c.quant.w_max);
            for p in c.cpp {
                w.f64(p);
            }
            w.u8(match c.draw_range {
                DrawRange::FullRange => 0,
                DrawRange::PositiveOnly => 1,
            });
            w.u8(match c.level_mode {
                LevelMode::Stochastic => 0,
                LevelMode::Exact => 1,
            });
            w.u32(c.hyper.batch_size);
            w.u32(c.hyper.epochs);
            w.f64(c.hyper.learning_rate);
            w.u32(c.reserved_tail);
            w.u64(c.filter_session);
            w.u64(c.indicator_session);
            w.u64(c.update_session);
        }
        Message::KeyAdvertise {
            session,
            client,
            advert,
        } => {
            w.u64(*session);
            w.client(*client);
            write_advert(&mut w, advert);
        }
        Message::KeyDigest { session, entries } => {
            w.u64(*session);
            w.u32(entries.len() as u32);
            for (c, a) in entries {
                w.client(*c);
                write_advert(&mut w, a);
            }
        }
        Message::EncryptedShares {
            session,
            client,
            entries,
        } => {
            w.u64(*session);
            w.client(*client);
            w.u32(entries.len() as u32);
            for (c, ct) in entries {
                w.client(*c);
                w.bytes(ct);
            }
        }
        Message::MaskedInput {
            session,
            modulus,
            lanes,
        } => {
            w.u64(*session);
            w.u64(*modulus);
            w.u32(lanes.len() as u32);
            for &v in lanes {
                w.u32(v);
            }
        }
        Message::UnmaskRequest {
            session,
            live,
            dropped,
        } => {
            w.u64(*session);
            w.client_list(live);
            w.client_list(dropped);
        }
        Message::UnmaskResponse { session, shares } => {
            w.u64(*session);
            w.u32(shares.len() as u32);
            for s in shares {
                encode_share(s, &mut w.buf);
            }
        }
        Message::UnionAnnounce {
            union,
            update_session,
            update_len,
        } => {
            w.index_set(union);
            w.u64(*update_session);
            w.u64(*update_len);
        }
        Message::SubmodelRequest { indices } => w.index_set(indices),
        Message::SubmodelResponse { cols, rows } => {
            w.u32(*cols);
            w.u32(rows.len() as u32);
            for &v in rows {
                w.f64(v);
            }
        }
        Message::ExactInput { session, lanes } => {
            w.u64(*session);
            w.u32(lanes.len() as u32);
            for &v in lanes {
                w.f64(v);
            }
        }
        Message::RoundAbort { reason } => w.bytes(reason.as_bytes()),
        Message::ClientReport {
            clips,
            perturbed_size,
            succinct_size,
        } => {
            w.u64(*clips);
            w.u32(*perturbed_size);
            w.u32(*succinct_size);
        }
    }
    w.buf
}

fn decode_payload(tag: u8, payload: &[u8]) -> Result<Message, WireError> {
    let mut r = Reader::new(payload);
    let msg = match tag {
        0x01 => Message::Hello {
            client: r.client()?,
        },
        0x02 => {
            let round_id = r.u64()?;
            let period_id = r.u64()?;
            let scheme = match r.u8()? {
                0 => Scheme::Sfsl,
                1 => Scheme::Sfl,
                s => return Err(WireError::Malformed(format!("bad scheme {s}"))),
            };
            let roster = r.client_list()?;
            let threshold = r.u32()?;
            let modulus = r.u64()?;
            let max_count = r.u32()?;
            let domain = r.u32()?;
            let cols = r.u32()?;
            let bloom = read_bloom(&mut r)?;
            let nparts = r.u32()? as usize;
            let partition_starts = (0..nparts)
                .map(|_| r.u32())
                .collect::<Result<Vec<_>, _>>()?;
            let levels = r.u32()?;
            let w_min = r.f64()?;
            let w_max = r.f64()?;
            let quant = QuantConfig::new(levels, w_min, w_max)
                .map_err(|e| WireError::Malformed(e.to_string()))?;
            let mut cpp = [0.0f64; 4];
            for p in &mut cpp {
                *p = r.f64()?;
            }
            let draw_range = match r.u8()? {
                0 => DrawRange::FullRange,
                1 => DrawRange::PositiveOnly,
                d => return Err(WireError::Malformed(format!("bad draw range {d}"))),
            };
            let level_mode = match r.u8()? {
                0 => LevelMode::Stochastic,
                1 => LevelMode::Exact,
                m => return Err(WireError::Malformed(format!("bad level mode {m}"))),
            };
            let hyper = HyperParams {
                batch_size: r.u32()?,
                epochs: r.u32()?,
                learning_rate: r.f64()?,
            };
            let reserved_tail = r.u32()?;
            let filter_session = r.u64()?;
            let indicator_session = r.u64()?;
            let update_session = r.u64()?;
            Message::RoundConfig(Box::new(RoundConfigMsg {
                round_id,
                period_id,
                scheme,
                roster,
                threshold,
                modulus,
                max_count,
                domain,
                cols,
                bloom,
                partition_starts,
                quant,
                cpp,
                draw_range,
                level_mode,
                hyper,
                reserved_tail,
                filter_session,
                indicator_session,
                update_session,
            }))
        }
        0x03 => Message::KeyAdvertise {
            session: r.u64()?,
            client: r.client()?,
            advert: read_advert(&mut r)?,
        },
        0x04 => {
            let session = r.u64()?;
            let n = r.u32()? as usize;
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                let c = r.client()?;
                entries.push((c, read_advert(&mut r)?));
            }
            Message::KeyDigest { session, entries }
        }
        0x05 => {
            let session = r.u64()?;
            let client = r.client()?;
            let n = r.u32()? as usize;
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                let c = r.client()?;
                entries.push((c, r.bytes()?));
            }
            Message::EncryptedShares {
                session,
                client,
                entries,
            }
        }
        0x06 => {
            let session = r.u64()?;
            let modulus = r.u64()?;
            let n = r.u32()? as usize;
            let lanes = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            Message::MaskedInput {
                session,
                modulus,
                lanes,
            }
        }
        0x07 => Message::UnmaskRequest {
            session: r.u64()?,
            live: r.client_list()?,
            dropped: r.client_list()?,
        },
        0x08 => {
            let session = r.u64()?;
            let n = r.u32()? as usize;
            let mut shares = Vec::with_capacity(n);
            let buf = r.take(payload.len() - r.pos)?;
            let mut pos = 0usize;
            for _ in 0..n {
                shares.push(
                    decode_share(buf, &mut pos)
                        .map_err(|e| WireError::Malformed(e.to_string()))?,
                );
            }
            if pos != buf.len() {
                return Err(WireError::Malformed("trailing share bytes".into()));
            }
            Message::UnmaskResponse { session, shares }
        }
        0x09 => Message::UnionAnnounce {
            union: r.index_set()?,
            update_session: r.u64()?,
            update_len: r.u64()?,
        },
        0x0a => Message::SubmodelRequest {
            indices: r.index_set()?,
        },
        0x0b => {
            let cols = r.u32()?;
            let n = r.u32()? as usize;
            let rows = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            Message::SubmodelResponse { cols, rows }
        }
        0x0c => {
            let session = r.u64()?;
            let n = r.u32()? as usize;
            let lanes = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            Message::ExactInput { session, lanes }
        }
        0x0d => {
            let reason = String::from_utf8(r.bytes()?)
                .map_err(|_| WireError::Malformed("abort reason not utf8".into()))?;
            Message::RoundAbort { reason }
        }
        0x0e => Message::ClientReport {
            clips: r.u64()?,
            perturbed_size: r.u32()?,
            succinct_size: r.u32()?,
        },
        t => return Err(WireError::ProtocolError(t)),
    };
    r.finish()?;
    Ok(msg)
}

/// Serializes a full frame: length, tag, payload.
pub fn encode_frame(msg: &Message) -> Vec<u8> {
    let payload = encode_payload(msg);
    let mut frame = Vec::with_capacity(5 + payload.len());
    frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    frame.push(msg.tag());
    frame.extend_from_slice(&payload);
    frame
}

/// Parses one frame from a byte slice, returning the message and the
/// number of bytes consumed.
pub fn decode_frame(buf: &[u8]) -> Result<(Message, usize), WireError> {
    if buf.len() < 5 {
        return Err(WireError::FramingError);
    }
    let len = u32::from_le_bytes(buf[..4].try_into().unwrap()) as usize;
    if buf.len() < 5 + len {
        return Err(WireError::FramingError);
    }
    let tag = buf[4];
    let msg = decode_payload(tag, &buf[5..5 + len])?;
    Ok((msg, 5 + len))
}

/// Reads one frame from a stream. Returns `Ok(None)` at clean EOF before
/// any byte of a frame.
pub fn read_frame<R: std::io::Read>(r: &mut R) -> Result<Option<Message>, WireError> {
    Ok(read_frame_counted(r)?.map(|(m, _)| m))
}

/// [`read_frame`] plus the consumed frame size in bytes.
pub fn read_frame_counted<R: std::io::Read>(
    r: &mut R,
) -> Result<Option<(Message, usize)>, WireError> {
    let mut head = [0u8; 5];
    let mut filled = 0usize;
    while filled < head.len() {
        match r.read(&mut head[filled..]) {
            Ok(0) => {
                if filled == 0 {
                    return Ok(None);
                }
                return Err(WireError::FramingError);
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(head[..4].try_into().unwrap()) as usize;
    if len > MAX_FRAME_PAYLOAD {
        return Err(WireError::Malformed(format!("frame of {len} bytes")));
    }
    let tag = head[4];
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            WireError::FramingError
        } else {
            WireError::Io(e)
        }
    })?;
    Ok(Some((decode_payload(tag, &payload)?, 5 + len)))
}

/// Writes one frame; returns the frame size in bytes.
pub fn write_frame<W: std::io::Write>(w: &mut W, msg: &Message) -> Result<usize, WireError> {
    let frame = encode_frame(msg);
    w.write_all(&frame)?;
    Ok(frame.len())
}

/// Upper bound on payload size; anything larger is treated as corruption.
pub const MAX_FRAME_PAYLOAD: usize = 1 << 30;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_payload_is_five_bytes() {
        // SubmodelRequest with no indices: 4-byte count is the whole
        // payload, so pick the smallest real message for the frame check.
        let frame = encode_frame(&Message::Hello { client: ClientId(1) });
        assert_eq!(frame.len(), 5 + 4);
        assert_eq!(&frame[..4], &4u32.to_le_bytes());

        // A hand-built empty payload still frames to 5 bytes.
        let empty = Message::RoundAbort { reason: String::new() };
        let frame = encode_frame(&empty);
        assert_eq!(frame.len(), 5 + 4); // length-prefixed empty string
    }

    #[test]
    fn unknown_tag_is_protocol_error() {
        let mut frame = vec![0, 0, 0, 0, 0xff];
        assert!(matches!(
            decode_frame(&frame),
            Err(WireError::ProtocolError(0xff))
        ));
        frame[4] = 0x01;
        // Now the payload is too short for a Hello: malformed, not framing.
        assert!(matches!(decode_frame(&frame), Err(WireError::Malformed(_))));
    }

    #[test]
    fn truncated_frame_detected() {
        let frame = encode_frame(&Message::SubmodelRequest {
            indices: vec![1, 5, 9],
        });
        assert!(matches!(
            decode_frame(&frame[..frame.len() - 1]),
            Err(WireError::FramingError)
        ));
        let mut r = &frame[..frame.len() - 1];
        assert!(matches!(read_frame(&mut r), Err(WireError::FramingError)));
    }

    #[test]
    fn stream_roundtrip() {
        let msgs = vec![
            Message::Hello { client: ClientId(7) },
            Message::UnmaskRequest {
                session: 3,
                live: vec![ClientId(1), ClientId(2)],
                dropped: vec![ClientId(9)],
            },
            Message::UnionAnnounce {
                union: vec![2, 4, 6, 1000],
                update_session: 5,
                update_len: 76,
            },
        ];
        let mut buf = Vec::new();
        for m in &msgs {
            write_frame(&mut buf, m).unwrap();
        }
        let mut r = buf.as_slice();
        for m in &msgs {
            assert_eq!(&read_frame(&mut r).unwrap().unwrap(), m);
        }
        assert!(read_frame(&mut r).unwrap().is_none());
    }

    #[test]
    fn index_set_delta_coding_is_compact() {
        let indices: Vec<Index> = (1..=1000).collect();
        let frame = encode_frame(&Message::SubmodelRequest { indices: indices.clone() });
        // Dense runs cost one varint byte per index.
        assert!(frame.len() < 5 + 4 + 1100, "frame {} bytes", frame.len());
        let (msg, used) = decode_frame(&frame).unwrap();
        assert_eq!(used, frame.len());
        assert_eq!(msg, Message::SubmodelRequest { indices });
    }
}

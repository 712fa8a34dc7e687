//! The per-round server and client state machines. The server drives
//! synchronous stage barriers over one [`RoundLink`] per selected client;
//! clients are message-driven and transport-agnostic, so the same state
//! machine runs in-process or behind a socket.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand_chacha::ChaCha20Rng;

use crate::federation::trainer::{LocalTrainer, SyntheticTrainer};
use crate::federation::{build_succinct_training_set, count_vector, ClientDataset, ClientState};
use crate::harness::metrics::{RoundMetrics, StageId};
use crate::model::{GlobalModel, ModelError, Submodel};
use crate::perturb::{perturb_index_set, Memoization, PerturbError, ProbabilityParams};
use crate::psu::{self, PartitionScheme, PsuError};
use crate::quant::{self, QuantError};
use crate::secure_agg::client::ClientAggSession;
use crate::secure_agg::group::ModpGroup;
use crate::secure_agg::session::ServerAggSession;
use crate::secure_agg::{AggError, SessionParams};
use crate::wire::{LevelMode, Message, RoundConfigMsg, Scheme, WireError};
use crate::{ClientId, Index};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("round aborted at {stage:?}: {live} live clients, threshold {need}")]
    Aborted {
        stage: StageId,
        live: usize,
        need: u32,
    },
    #[error("aggregation: {0}")]
    Agg(#[from] AggError),
    #[error("set union: {0}")]
    Psu(#[from] PsuError),
    #[error("quantization: {0}")]
    Quant(#[from] QuantError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("perturbation: {0}")]
    Perturb(#[from] PerturbError),
    #[error("wire: {0}")]
    Wire(#[from] WireError),
    #[error("link: {0}")]
    Link(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("config: {0}")]
    Config(String),
}

#[derive(Debug, thiserror::Error)]
pub enum LinkError {
    /// The client stopped responding; the round continues without it.
    #[error("client dropped")]
    Dropped,
    #[error("wire: {0}")]
    Wire(#[from] WireError),
    #[error("client error: {0}")]
    Client(String),
    #[error("io: {0}")]
    Io(String),
}

/// Transport abstraction the server drives a round over. Implementations
/// count frame bytes; `recv` blocks until the client's next message or
/// reports the client gone.
pub trait RoundLink {
    fn client_id(&self) -> ClientId;
    /// Server-to-client delivery; returns the frame size in bytes.
    fn send(&mut self, msg: &Message) -> Result<usize, LinkError>;
    /// Next client-to-server message plus its frame size.
    fn recv(&mut self) -> Result<(Message, usize), LinkError>;
}

/// When an injected dropout silences a client: right after it sent its
/// encrypted shares for the set-union sessions, or for the update session
/// (the costly case, and the default).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropStage {
    AfterPsuShares,
    AfterUpdateShares,
}

// Integer update lanes buffered between training and the masked input;
// exact-mode lanes go out immediately and are never buffered.
type PendingLanes = Vec<u64>;

/// Client-side round state machine. Feed it incoming messages; it returns
/// the replies to relay. A silenced client returns no replies forever.
pub struct ClientRound {
    me: ClientId,
    group: ModpGroup,
    fate: Option<DropStage>,
    silent: bool,
    dataset: ClientDataset,
    memo: Memoization,
    cpp_override: Option<ProbabilityParams>,
    /// `None` means a synthetic trainer sized to the round's quantizer.
    trainer: Option<Box<dyn LocalTrainer + Send>>,
    rng: ChaCha20Rng,
    trainer_seed: [u8; 32],
    cfg: Option<Box<RoundConfigMsg>>,
    real_set: BTreeSet<Index>,
    reserved: BTreeSet<Index>,
    sessions: BTreeMap<u64, ClientAggSession>,
    union: Vec<Index>,
    perturbed: Vec<Index>,
    pending: Option<PendingLanes>,
    clips: u64,
    succinct_size: u32,
}

impl ClientRound {
    pub fn new(state: ClientState, group: ModpGroup, root_seed: u64, round_id: u64) -> Self {
        let rng = crate::rng::derive_rng(root_seed, "client-round", round_id << 32 | state.id.0 as u64);
        let trainer_seed =
            crate::rng::derive_seed(root_seed, "client-trainer", round_id << 32 | state.id.0 as u64);
        Self {
            me: state.id,
            group,
            fate: None,
            silent: false,
            dataset: state.dataset,
            memo: state.memo,
            cpp_override: state.cpp_override,
            trainer: None,
            rng,
            trainer_seed,
            cfg: None,
            real_set: BTreeSet::new(),
            reserved: BTreeSet::new(),
            sessions: BTreeMap::new(),
            union: Vec::new(),
            perturbed: Vec::new(),
            pending: None,
            clips: 0,
            succinct_size: 0,
        }
    }

    pub fn with_fate(mut self, fate: Option<DropStage>) -> Self {
        self.fate = fate;
        self
    }

    pub fn with_trainer(mut self, trainer: Box<dyn LocalTrainer + Send>) -> Self {
        self.trainer = Some(trainer);
        self
    }

    pub fn client_id(&self) -> ClientId {
        self.me
    }

    /// True once an injected dropout has taken effect; the client will
    /// never respond again this round.
    pub fn is_silent(&self) -> bool {
        self.silent
    }

    /// Hands persistent state back after the round.
    pub fn into_state(self) -> ClientState {
        ClientState {
            id: self.me,
            dataset: self.dataset,
            memo: self.memo,
            cpp_override: self.cpp_override,
        }
    }

    fn cfg(&self) -> Result<&RoundConfigMsg, EngineError> {
        self.cfg
            .as_deref()
            .ok_or_else(|| EngineError::Protocol("message before round config".into()))
    }

    fn session_params(&self, session: u64, vec_len: usize) -> Result<SessionParams, EngineError> {
        let cfg = self.cfg()?;
        Ok(SessionParams::new(
            session,
            vec_len,
            cfg.modulus,
            cfg.threshold,
            cfg.roster.clone(),
        )?)
    }

    fn open_session(&mut self, session: u64, vec_len: usize) -> Result<Message, EngineError> {
        let params = self.session_params(session, vec_len)?;
        let (sess, advert) =
            ClientAggSession::new(params, self.group.clone(), self.me, &mut self.rng)?;
        self.sessions.insert(session, sess);
        Ok(Message::KeyAdvertise {
            session,
            client: self.me,
            advert,
        })
    }

    fn session(&mut self, id: u64) -> Result<&mut ClientAggSession, EngineError> {
        self.sessions
            .get_mut(&id)
            .ok_or_else(|| EngineError::Protocol(format!("no session {id}")))
    }

    pub fn handle(&mut self, msg: &Message) -> Result<Vec<Message>, EngineError> {
        if self.silent {
            return Ok(Vec::new());
        }
        match msg {
            Message::RoundConfig(c) => self.on_config(c),
            Message::KeyDigest { session, entries } => self.on_digest(*session, entries.clone()),
            Message::EncryptedShares {
                session, entries, ..
            } => self.on_routed_shares(*session, entries.clone()),
            Message::UnmaskRequest {
                session,
                live,
                dropped,
            } => {
                let shares = self.session(*session)?.unmask_shares(live, dropped)?;
                Ok(vec![Message::UnmaskResponse {
                    session: *session,
                    shares,
                }])
            }
            Message::UnionAnnounce {
                union,
                update_session,
                update_len,
            } => self.on_union(union, *update_session, *update_len),
            Message::SubmodelResponse { cols, rows } => self.on_submodel(*cols, rows),
            Message::RoundAbort { .. } => {
                self.silent = true;
                Ok(Vec::new())
            }
            other => Err(EngineError::Protocol(format!(
                "client got unexpected {}",
                other.tag_name()
            ))),
        }
    }

    fn on_config(&mut self, c: &RoundConfigMsg) -> Result<Vec<Message>, EngineError> {
        self.cfg = Some(Box::new(c.clone()));
        self.memo.roll_period(c.period_id);
        let data_limit = c.domain - c.reserved_tail;
        let data_set = self.dataset.real_index_set();
        if data_set.iter().any(|&j| j == 0 || j > data_limit) {
            return Err(EngineError::Config(format!(
                "dataset index outside [1, {data_limit}]"
            )));
        }
        self.reserved = (data_limit + 1..=c.domain).collect();
        self.real_set = &data_set | &self.reserved;
        match c.scheme {
            Scheme::Sfsl => {
                let filter = self.open_session(c.filter_session, c.bloom.len as usize)?;
                let indicator =
                    self.open_session(c.indicator_session, c.partition_starts.len())?;
                Ok(vec![filter, indicator])
            }
            Scheme::Sfl => {
                // Full-model baseline: the whole domain is the working set.
                self.union = (1..=c.domain).collect();
                self.perturbed = self.union.clone();
                Ok(vec![Message::SubmodelRequest {
                    indices: self.union.clone(),
                }])
            }
        }
    }

    fn on_digest(
        &mut self,
        session: u64,
        entries: Vec<(ClientId, crate::secure_agg::session::Advert)>,
    ) -> Result<Vec<Message>, EngineError> {
        let mut sess = self
            .sessions
            .remove(&session)
            .ok_or_else(|| EngineError::Protocol(format!("no session {session}")))?;
        let bundles = sess.handle_digest(entries, &mut self.rng);
        self.sessions.insert(session, sess);
        let reply = Message::EncryptedShares {
            session,
            client: self.me,
            entries: bundles?,
        };
        let cfg = self.cfg()?;
        let fate_hits = match self.fate {
            Some(DropStage::AfterPsuShares) => session == cfg.indicator_session,
            Some(DropStage::AfterUpdateShares) => session == cfg.update_session,
            None => false,
        };
        if fate_hits {
            self.silent = true;
        }
        Ok(vec![reply])
    }

    fn on_routed_shares(
        &mut self,
        session: u64,
        entries: Vec<(ClientId, Vec<u8>)>,
    ) -> Result<Vec<Message>, EngineError> {
        self.session(session)?.handle_routed_shares(entries)?;
        let cfg = self.cfg()?.clone();
        if session == cfg.filter_session {
            let bits = psu::encode(&self.real_set, &cfg.bloom);
            let lanes = self.perturb_to_lanes(&bits, &cfg);
            Ok(vec![self.masked_reply(session, lanes, cfg.modulus)?])
        } else if session == cfg.indicator_session {
            let scheme = PartitionScheme::from_starts(cfg.partition_starts.clone(), cfg.domain)?;
            let bits = psu::partition_indicator(&self.real_set, &scheme);
            let lanes = self.perturb_to_lanes(&bits, &cfg);
            Ok(vec![self.masked_reply(session, lanes, cfg.modulus)?])
        } else if session == cfg.update_session {
            let lanes = self.pending.take().ok_or_else(|| {
                EngineError::Protocol("update session opened before training".into())
            })?;
            let report = self.report();
            Ok(vec![report, self.masked_reply(session, lanes, cfg.modulus)?])
        } else {
            Err(EngineError::Protocol(format!("unknown session {session}")))
        }
    }

    fn perturb_to_lanes(&mut self, bits: &[bool], cfg: &RoundConfigMsg) -> Vec<u64> {
        let f = psu::perturb_filter(bits, cfg.modulus, cfg.draw_range, &mut self.rng);
        f.values.iter().map(|&v| v as u64).collect()
    }

    fn masked_reply(
        &mut self,
        session: u64,
        lanes: Vec<u64>,
        modulus: u64,
    ) -> Result<Message, EngineError> {
        let y = self.session(session)?.masked_input(&lanes)?;
        Ok(Message::MaskedInput {
            session,
            modulus,
            lanes: y.into_iter().map(|v| v as u32).collect(),
        })
    }

    fn report(&self) -> Message {
        Message::ClientReport {
            clips: self.clips,
            perturbed_size: self.perturbed.len() as u32,
            succinct_size: self.succinct_size,
        }
    }

    fn on_union(
        &mut self,
        union: &[Index],
        update_session: u64,
        update_len: u64,
    ) -> Result<Vec<Message>, EngineError> {
        let cfg = self.cfg()?.clone();
        if cfg.scheme != Scheme::Sfsl {
            return Err(EngineError::Protocol("union announce outside sfsl".into()));
        }
        if update_session != cfg.update_session {
            return Err(EngineError::Protocol("unexpected update session id".into()));
        }
        let expect_len = union.len() as u64 * (cfg.cols as u64 + 1);
        if update_len != expect_len {
            return Err(EngineError::Protocol(format!(
                "update length {update_len} does not match union ({expect_len})"
            )));
        }
        self.union = union.to_vec();
        let union_set: BTreeSet<Index> = union.iter().copied().collect();
        let params = match self.cpp_override {
            Some(p) => p,
            None => ProbabilityParams::new(cfg.cpp[0], cfg.cpp[1], cfg.cpp[2], cfg.cpp[3])
                .map_err(EngineError::Perturb)?,
        };
        let mut s2 = perturb_index_set(
            &self.real_set,
            &union_set,
            &mut self.memo,
            &params,
            &mut self.rng,
        )?;
        // The dense reserved block is always requested, never randomized.
        for &j in self.reserved.intersection(&union_set) {
            s2.insert(j);
        }
        self.perturbed = s2.into_iter().collect();
        Ok(vec![Message::SubmodelRequest {
            indices: self.perturbed.clone(),
        }])
    }

    fn on_submodel(&mut self, cols: u32, rows: &[f64]) -> Result<Vec<Message>, EngineError> {
        let cfg = self.cfg()?.clone();
        if cols != cfg.cols || rows.len() != self.perturbed.len() * cols as usize {
            return Err(EngineError::Protocol("submodel shape mismatch".into()));
        }
        let submodel = Submodel {
            index_list: self.perturbed.clone(),
            rows: rows.to_vec(),
            cols,
        };

        let s2_set: BTreeSet<Index> = self.perturbed.iter().copied().collect();
        let succinct: BTreeSet<Index> = self.real_set.intersection(&s2_set).copied().collect();
        let filtered = match cfg.scheme {
            Scheme::Sfsl => build_succinct_training_set(&self.dataset, &succinct),
            // The baseline trains on everything it has.
            Scheme::Sfl => self.dataset.clone(),
        };
        self.succinct_size = succinct.len() as u32;

        // Counts used as aggregation weights, aligned to the perturbed set.
        let involvement = count_vector(&filtered, &self.perturbed);
        let weights: Vec<u64> = match cfg.scheme {
            Scheme::Sfsl => self
                .perturbed
                .iter()
                .zip(&involvement)
                .map(|(j, &c)| {
                    if self.reserved.contains(j) {
                        filtered.len() as u64
                    } else {
                        c
                    }
                })
                .collect(),
            Scheme::Sfl => vec![self.dataset.len() as u64; self.perturbed.len()],
        };
        if weights.iter().any(|&w| w > cfg.max_count as u64) {
            return Err(EngineError::Config(format!(
                "sample count exceeds configured bound {}",
                cfg.max_count
            )));
        }

        // Train the succinct submodel only; counts there drive the scale.
        let succinct_sorted: Vec<Index> = succinct.iter().copied().collect();
        let succinct_sm = restrict_submodel(&submodel, &succinct_sorted);
        let succinct_counts: Vec<u64> = succinct_sorted
            .iter()
            .map(|j| {
                if self.reserved.contains(j) {
                    filtered.len() as u64
                } else {
                    let pos = self.perturbed.binary_search(j).unwrap();
                    involvement[pos]
                }
            })
            .collect();
        let default_trainer;
        let trainer: &(dyn LocalTrainer + Send) = match &self.trainer {
            Some(t) => t.as_ref(),
            None => {
                default_trainer = SyntheticTrainer::for_quant(&cfg.quant);
                &default_trainer
            }
        };
        let updates = trainer.train(
            &succinct_sm,
            &filtered,
            &succinct_counts,
            &cfg.hyper,
            &self.trainer_seed,
        );

        let d = cols as usize;
        let update_row = |j: Index| -> Option<&[f64]> {
            succinct_sorted
                .binary_search(&j)
                .ok()
                .map(|pos| &updates[pos * d..(pos + 1) * d])
        };

        // Assemble lanes over the union layout: per union index, d
        // weighted level lanes then the count lane; zero outside the
        // perturbed set.
        match cfg.level_mode {
            LevelMode::Stochastic => {
                let mask = cfg.modulus - 1;
                let mut lanes = vec![0u64; self.union.len() * (d + 1)];
                for (u_pos, &j) in self.union.iter().enumerate() {
                    let Ok(pos) = self.perturbed.binary_search(&j) else {
                        continue;
                    };
                    let v = weights[pos];
                    let base = u_pos * (d + 1);
                    if v > 0 {
                        let row = update_row(j);
                        for k in 0..d {
                            let dw = row.map(|r| r[k]).unwrap_or(0.0);
                            if cfg.quant.out_of_range(dw) {
                                self.clips += 1;
                            }
                            let z = quant::quantize(dw, &cfg.quant, &mut self.rng) as u64;
                            lanes[base + k] = (v * z) & mask;
                        }
                    }
                    lanes[base + d] = v & mask;
                }
                self.pending = Some(lanes);
                let advert = self.open_session(
                    cfg.update_session,
                    self.union.len() * (d + 1),
                )?;
                Ok(vec![advert])
            }
            LevelMode::Exact => {
                let mut lanes = vec![0f64; self.union.len() * (d + 1)];
                for (u_pos, &j) in self.union.iter().enumerate() {
                    let Ok(pos) = self.perturbed.binary_search(&j) else {
                        continue;
                    };
                    let v = weights[pos];
                    let base = u_pos * (d + 1);
                    if v > 0 {
                        let row = update_row(j);
                        for k in 0..d {
                            let dw = row.map(|r| r[k]).unwrap_or(0.0);
                            if cfg.quant.out_of_range(dw) {
                                self.clips += 1;
                            }
                            lanes[base + k] = v as f64 * quant::expected_level(dw, &cfg.quant);
                        }
                    }
                    lanes[base + d] = v as f64;
                }
                if self.fate == Some(DropStage::AfterUpdateShares) {
                    self.silent = true;
                    return Ok(Vec::new());
                }
                let report = self.report();
                self.pending = None;
                Ok(vec![
                    report,
                    Message::ExactInput {
                        session: cfg.update_session,
                        lanes,
                    },
                ])
            }
        }
    }
}

fn restrict_submodel(sm: &Submodel, indices: &[Index]) -> Submodel {
    let d = sm.cols as usize;
    let mut rows = Vec::with_capacity(indices.len() * d);
    for &j in indices {
        let row = sm.row_for_index(j).expect("restriction within submodel");
        rows.extend_from_slice(row);
    }
    Submodel {
        index_list: indices.to_vec(),
        rows,
        cols: sm.cols,
    }
}

pub struct ServerRoundOutcome {
    pub metrics: RoundMetrics,
    pub union: Vec<Index>,
    pub perturbed: BTreeMap<ClientId, Vec<Index>>,
}

struct Net<'a, 'b> {
    links: &'a mut [Box<dyn RoundLink + 'b>],
    alive: Vec<bool>,
    stage: StageId,
    metrics: RoundMetrics,
    stage_started: Instant,
}

impl<'a, 'b> Net<'a, 'b> {
    fn new(links: &'a mut [Box<dyn RoundLink + 'b>], metrics: RoundMetrics) -> Self {
        let alive = vec![true; links.len()];
        Self {
            links,
            alive,
            stage: StageId::Config,
            metrics,
            stage_started: Instant::now(),
        }
    }

    fn enter_stage(&mut self, stage: StageId) {
        let elapsed = self.stage_started.elapsed().as_secs_f64() * 1e3;
        *self.metrics.wall_ms.entry(self.stage).or_default() += elapsed;
        self.stage = stage;
        self.stage_started = Instant::now();
    }

    fn finish_walls(&mut self) {
        let elapsed = self.stage_started.elapsed().as_secs_f64() * 1e3;
        *self.metrics.wall_ms.entry(self.stage).or_default() += elapsed;
        self.stage_started = Instant::now();
    }

    fn alive_indices(&self) -> Vec<usize> {
        (0..self.links.len()).filter(|&i| self.alive[i]).collect()
    }

    fn live_count(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    fn mark_dead(&mut self, i: usize) {
        if self.alive[i] {
            self.alive[i] = false;
            self.metrics
                .dropouts
                .push((self.links[i].client_id(), self.stage));
        }
    }

    fn send(&mut self, i: usize, msg: &Message) -> Result<(), EngineError> {
        if !self.alive[i] {
            return Ok(());
        }
        let id = self.links[i].client_id();
        match self.links[i].send(msg) {
            Ok(bytes) => {
                self.metrics.record_server_sent(self.stage, id, bytes as u64);
                Ok(())
            }
            Err(LinkError::Dropped) => {
                self.mark_dead(i);
                Ok(())
            }
            Err(e) => Err(EngineError::Link(e.to_string())),
        }
    }

    fn recv(&mut self, i: usize) -> Result<Option<Message>, EngineError> {
        if !self.alive[i] {
            return Ok(None);
        }
        let id = self.links[i].client_id();
        match self.links[i].recv() {
            Ok((msg, bytes)) => {
                self.metrics
                    .record_server_received(self.stage, id, bytes as u64);
                Ok(Some(msg))
            }
            Err(LinkError::Dropped) => {
                self.mark_dead(i);
                Ok(None)
            }
            Err(e) => Err(EngineError::Link(e.to_string())),
        }
    }
}

fn require_threshold(net: &Net<'_, '_>, need: u32, stage: StageId) -> Result<(), EngineError> {
    if (net.live_count() as u32) < need {
        return Err(EngineError::Aborted {
            stage,
            live: net.live_count(),
            need,
        });
    }
    Ok(())
}

fn as_u32_lanes(sum: &[u64]) -> Vec<u32> {
    sum.iter().map(|&v| v as u32).collect()
}

/// Runs one masked-summation session over the live clients: collects
/// adverts, routes shares, collects masked inputs, runs unmasking, and
/// returns the lane sums. `advert_pending` says whether each live client
/// already has its advert queued as its next outbound message.
fn drive_session(
    net: &mut Net<'_, '_>,
    group: &ModpGroup,
    params: SessionParams,
    stage: StageId,
    pre_masked_report: bool,
) -> Result<(Vec<u64>, BTreeMap<ClientId, (u64, u32, u32)>), EngineError> {
    let mut srv = ServerAggSession::new(params, group.clone());

    for i in net.alive_indices() {
        match net.recv(i)? {
            Some(Message::KeyAdvertise {
                session,
                client,
                advert,
            }) if session == srv.params().session_id => {
                srv.record_advert(client, advert)?;
            }
            Some(other) => {
                return Err(EngineError::Protocol(format!(
                    "expected key advertise, got {}",
                    other.tag_name()
                )))
            }
            None => {}
        }
    }
    let digest = srv
        .close_adverts()
        .map_err(|e| map_abort(e, stage, net.live_count()))?;
    let session = srv.params().session_id;

    for i in net.alive_indices() {
        net.send(
            i,
            &Message::KeyDigest {
                session,
                entries: digest.clone(),
            },
        )?;
    }
    for i in net.alive_indices() {
        match net.recv(i)? {
            Some(Message::EncryptedShares {
                session: s,
                client,
                entries,
            }) if s == session => srv.record_encrypted_shares(client, entries)?,
            Some(other) => {
                return Err(EngineError::Protocol(format!(
                    "expected encrypted shares, got {}",
                    other.tag_name()
                )))
            }
            None => {}
        }
    }
    let mut routed = srv
        .close_shares()
        .map_err(|e| map_abort(e, stage, net.live_count()))?;
    for i in net.alive_indices() {
        let id = net.links[i].client_id();
        let entries = routed.remove(&id).unwrap_or_default();
        net.send(
            i,
            &Message::EncryptedShares {
                session,
                client: id,
                entries,
            },
        )?;
    }

    let mut reports = BTreeMap::new();
    for i in net.alive_indices() {
        let mut msg = net.recv(i)?;
        if pre_masked_report {
            if let Some(Message::ClientReport {
                clips,
                perturbed_size,
                succinct_size,
            }) = msg
            {
                reports.insert(
                    net.links[i].client_id(),
                    (clips, perturbed_size, succinct_size),
                );
                msg = net.recv(i)?;
            } else if msg.is_some() {
                return Err(EngineError::Protocol("expected client report".into()));
            }
        }
        match msg {
            Some(Message::MaskedInput {
                session: s,
                modulus,
                lanes,
            }) if s == session => {
                if modulus != srv.params().modulus {
                    return Err(EngineError::Protocol("modulus mismatch".into()));
                }
                let lanes: Vec<u64> = lanes.into_iter().map(|v| v as u64).collect();
                srv.record_masked(net.links[i].client_id(), &lanes)?;
            }
            Some(other) => {
                return Err(EngineError::Protocol(format!(
                    "expected masked input, got {}",
                    other.tag_name()
                )))
            }
            None => {}
        }
    }
    let (live, dropped) = srv
        .close_masked()
        .map_err(|e| map_abort(e, stage, net.live_count()))?;

    for i in net.alive_indices() {
        net.send(
            i,
            &Message::UnmaskRequest {
                session,
                live: live.clone(),
                dropped: dropped.clone(),
            },
        )?;
    }
    for i in net.alive_indices() {
        match net.recv(i)? {
            Some(Message::UnmaskResponse { session: s, shares }) if s == session => {
                srv.record_unmask_shares(net.links[i].client_id(), shares)?
            }
            Some(other) => {
                return Err(EngineError::Protocol(format!(
                    "expected unmask response, got {}",
                    other.tag_name()
                )))
            }
            None => {}
        }
    }
    let sum = srv
        .finish()
        .map_err(|e| map_abort(e, stage, net.live_count()))?;
    Ok((sum, reports))
}

fn map_abort(e: AggError, stage: StageId, live: usize) -> EngineError {
    match e {
        AggError::ThresholdNotMet { live: l, need } => EngineError::Aborted {
            stage,
            live: l.min(live),
            need,
        },
        other => EngineError::Agg(other),
    }
}

/// Runs one full round over the given links, which must be sorted by
/// client id and match the config roster. On success the model has the
/// round's aggregate applied; on abort it is untouched.
pub fn run_round(
    model: &mut GlobalModel,
    group: &ModpGroup,
    cfg: &RoundConfigMsg,
    links: &mut [Box<dyn RoundLink + '_>],
) -> Result<ServerRoundOutcome, EngineError> {
    let link_ids: Vec<ClientId> = links.iter().map(|l| l.client_id()).collect();
    if link_ids != cfg.roster {
        return Err(EngineError::Config("links do not match roster".into()));
    }
    if cfg.domain != model.rows() || cfg.cols != model.cols() {
        return Err(EngineError::Config("model shape mismatch".into()));
    }
    cfg.quant.check_lane_capacity(
        cfg.roster.len() as u64,
        cfg.max_count as u64,
        cfg.modulus,
    )?;

    let metrics = RoundMetrics::new(cfg.round_id, cfg.scheme, cfg.roster.len());
    let mut net = Net::new(links, metrics);
    let result = run_round_inner(model, group, cfg, &mut net);
    net.finish_walls();
    match result {
        Ok((union, perturbed)) => {
            let mut metrics = std::mem::take(&mut net.metrics);
            metrics.union_size = union.len();
            metrics.perturbed_sizes = perturbed
                .iter()
                .map(|(&c, v)| (c, v.len() as u32))
                .collect();
            debug_assert!(metrics.check_conservation().is_ok());
            Ok(ServerRoundOutcome {
                metrics,
                union,
                perturbed,
            })
        }
        Err(e) => {
            // Tell whoever is still listening; ignore delivery problems.
            let abort = Message::RoundAbort {
                reason: e.to_string(),
            };
            for i in net.alive_indices() {
                let _ = net.send(i, &abort);
            }
            Err(e)
        }
    }
}

type RoundData = (Vec<Index>, BTreeMap<ClientId, Vec<Index>>);

fn run_round_inner(
    model: &mut GlobalModel,
    group: &ModpGroup,
    cfg: &RoundConfigMsg,
    net: &mut Net<'_, '_>,
) -> Result<RoundData, EngineError> {
    let d = cfg.cols as usize;
    let config_msg = Message::RoundConfig(Box::new(cfg.clone()));
    for i in 0..net.links.len() {
        net.send(i, &config_msg)?;
    }

    // Private set union (or the full domain for the baseline).
    let union: Vec<Index> = match cfg.scheme {
        Scheme::Sfsl => {
            net.enter_stage(StageId::Psu);
            let filter_params = SessionParams::new(
                cfg.filter_session,
                cfg.bloom.len as usize,
                cfg.modulus,
                cfg.threshold,
                cfg.roster.clone(),
            )?;
            let indicator_params = SessionParams::new(
                cfg.indicator_session,
                cfg.partition_starts.len(),
                cfg.modulus,
                cfg.threshold,
                cfg.roster.clone(),
            )?;
            // The two set-union vectors run as separate sessions driven
            // back to back over the same live set.
            let (sum_filter, _) =
                drive_session(net, group, filter_params, StageId::Psu, false)?;
            let (sum_indicator, _) =
                drive_session(net, group, indicator_params, StageId::Psu, false)?;
            let scheme = PartitionScheme::from_starts(cfg.partition_starts.clone(), cfg.domain)?;
            let union_set = psu::reconstruct_union(
                &as_u32_lanes(&sum_filter),
                &as_u32_lanes(&sum_indicator),
                &scheme,
                &cfg.bloom,
            )?;
            union_set.into_iter().collect()
        }
        Scheme::Sfl => (1..=cfg.domain).collect(),
    };

    let update_len = union.len() as u64 * (d as u64 + 1);
    let mut perturbed: BTreeMap<ClientId, Vec<Index>> = BTreeMap::new();
    if union.is_empty() {
        return Ok((union, perturbed));
    }
    // Union delivery is the tail of the set-union protocol; byte-wise it
    // belongs to that stage.
    if cfg.scheme == Scheme::Sfsl {
        for i in net.alive_indices() {
            net.send(
                i,
                &Message::UnionAnnounce {
                    union: union.clone(),
                    update_session: cfg.update_session,
                    update_len,
                },
            )?;
        }
    }

    // Submodel exchange.
    net.enter_stage(StageId::Submodel);
    for i in net.alive_indices() {
        let request = net.recv(i)?;
        let id = net.links[i].client_id();
        match request {
            Some(Message::SubmodelRequest { indices }) => {
                let union_set: BTreeSet<Index> = union.iter().copied().collect();
                if !indices.iter().all(|j| union_set.contains(j)) {
                    return Err(EngineError::Protocol(
                        "submodel request outside the union".into(),
                    ));
                }
                let sm = model.extract_submodel(&indices)?;
                perturbed.insert(id, indices);
                net.send(
                    i,
                    &Message::SubmodelResponse {
                        cols: cfg.cols,
                        rows: sm.rows,
                    },
                )?;
            }
            Some(other) => {
                return Err(EngineError::Protocol(format!(
                    "expected submodel request, got {}",
                    other.tag_name()
                )))
            }
            None => {}
        }
    }
    require_threshold(net, cfg.threshold, StageId::Submodel)?;

    // Count-weighted update aggregation.
    net.enter_stage(StageId::Update);
    let (sums_int, sums_real, reports) = match cfg.level_mode {
        LevelMode::Stochastic => {
            let update_params = SessionParams::new(
                cfg.update_session,
                update_len as usize,
                cfg.modulus,
                cfg.threshold,
                cfg.roster.clone(),
            )?;
            let (sum, reports) =
                drive_session(net, group, update_params, StageId::Update, true)?;
            (Some(sum), None, reports)
        }
        LevelMode::Exact => {
            let mut acc = vec![0f64; update_len as usize];
            let mut reports = BTreeMap::new();
            let mut live = 0u32;
            for i in net.alive_indices() {
                let id = net.links[i].client_id();
                let first = net.recv(i)?;
                let Some(Message::ClientReport {
                    clips,
                    perturbed_size,
                    succinct_size,
                }) = first
                else {
                    if first.is_some() {
                        return Err(EngineError::Protocol("expected client report".into()));
                    }
                    continue;
                };
                reports.insert(id, (clips, perturbed_size, succinct_size));
                match net.recv(i)? {
                    Some(Message::ExactInput { session, lanes })
                        if session == cfg.update_session =>
                    {
                        if lanes.len() != update_len as usize {
                            return Err(EngineError::Protocol("exact input length".into()));
                        }
                        for (a, v) in acc.iter_mut().zip(lanes) {
                            *a += v;
                        }
                        live += 1;
                    }
                    Some(other) => {
                        return Err(EngineError::Protocol(format!(
                            "expected exact input, got {}",
                            other.tag_name()
                        )))
                    }
                    None => {
                        reports.remove(&id);
                    }
                }
            }
            if live < cfg.threshold {
                return Err(EngineError::Aborted {
                    stage: StageId::Update,
                    live: live as usize,
                    need: cfg.threshold,
                });
            }
            (None, Some(acc), reports)
        }
    };
    net.metrics.clip_count = reports.values().map(|r| r.0).sum();

    // Per-row averaged dequantize and apply. Deltas are validated before
    // any mutation so an abort cannot leave the model half-updated.
    let mut deltas: Vec<(Index, Vec<f64>)> = Vec::new();
    for (u_pos, &j) in union.iter().enumerate() {
        let base = u_pos * (d + 1);
        let (total, delta) = match (&sums_int, &sums_real) {
            (Some(sum), None) => {
                let total = sum[base + d];
                if total == 0 {
                    continue;
                }
                let mut row = Vec::with_capacity(d);
                for k in 0..d {
                    row.push(quant::averaged_dequantize(sum[base + k], total, &cfg.quant)?);
                }
                (total, row)
            }
            (None, Some(sum)) => {
                let total = sum[base + d].round() as u64;
                if total == 0 {
                    continue;
                }
                let mut row = Vec::with_capacity(d);
                for k in 0..d {
                    row.push(quant::averaged_dequantize_real(
                        sum[base + k],
                        total,
                        &cfg.quant,
                    )?);
                }
                (total, row)
            }
            _ => unreachable!(),
        };
        let _ = total;
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(EngineError::Protocol("non-finite aggregate".into()));
        }
        deltas.push((j, delta));
    }
    for (j, delta) in deltas {
        model.apply_row_aggregate(j, &delta, 1)?;
    }
    Ok((union, perturbed))
}

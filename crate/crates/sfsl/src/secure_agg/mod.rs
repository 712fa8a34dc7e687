//! Dropout-tolerant oblivious vector summation in the honest-but-curious
//! setting, after the Bonawitz-style double-masking construction. Each
//! client submits her vector plus a self mask and signed pairwise masks;
//! pairwise masks cancel between live clients, and threshold secret
//! sharing lets the surviving quorum remove the self masks of live clients
//! and the pairwise masks left dangling by dropouts. The server learns
//! exactly the modular sum of live clients' vectors and nothing else.
//!
//! Module layout: [`group`] key agreement, [`prg`] mask expansion and
//! share encryption, [`shamir`] threshold sharing, [`session`] the
//! server-side stage machine, [`client`] the client side.

pub mod client;
pub mod group;
pub mod prg;
pub mod session;
pub mod shamir;

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigUint;

use crate::ClientId;
use group::ModpGroup;
use shamir::{Share, ShareKind};

#[derive(Debug, thiserror::Error)]
pub enum AggError {
    #[error("public key is not a valid group element")]
    InvalidGroupElement,
    #[error("vector length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("threshold {t} invalid for {n} parties")]
    BadThreshold { t: u32, n: u32 },
    #[error("{got} shares where {need} are required")]
    InsufficientShares { got: usize, need: usize },
    #[error("shares do not belong to one (owner, kind) secret")]
    ShareSetMismatch,
    #[error("{live} live clients, threshold {need}")]
    ThresholdNotMet { live: usize, need: u32 },
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("message for stage {msg} arrived while in stage {actual}")]
    StageViolation {
        msg: &'static str,
        actual: &'static str,
    },
    #[error("share bundle failed authentication")]
    DecryptFailed,
    #[error("client {0} is not on the roster")]
    UnknownClient(ClientId),
    #[error("duplicate message from client {0}")]
    DuplicateMessage(ClientId),
    #[error("vector entry outside [0, modulus)")]
    ValueOutOfRange,
}

/// Static parameters of one masked-summation execution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionParams {
    pub session_id: u64,
    /// Vector dimension.
    pub vec_len: usize,
    /// Power-of-two modulus, at most 2^32.
    pub modulus: u64,
    /// Minimum live clients for recovery.
    pub threshold: u32,
    /// Ascending client ids; positions fix share points and mask signs.
    pub roster: Vec<ClientId>,
}

impl SessionParams {
    pub fn new(
        session_id: u64,
        vec_len: usize,
        modulus: u64,
        threshold: u32,
        mut roster: Vec<ClientId>,
    ) -> Result<Self, AggError> {
        roster.sort_unstable();
        roster.dedup();
        let n = roster.len() as u32;
        if threshold < 1 || threshold > n {
            return Err(AggError::BadThreshold { t: threshold, n });
        }
        if vec_len == 0 || !modulus.is_power_of_two() || modulus < 2 || modulus > 1 << 32 {
            return Err(AggError::ProtocolViolation(format!(
                "bad session geometry: l={vec_len}, R={modulus}"
            )));
        }
        Ok(Self {
            session_id,
            vec_len,
            modulus,
            threshold,
            roster,
        })
    }

    pub fn rank(&self, client: ClientId) -> Result<usize, AggError> {
        self.roster
            .binary_search(&client)
            .map_err(|_| AggError::UnknownClient(client))
    }

    /// Binds mask streams to this session.
    pub fn mask_label(&self) -> [u8; 8] {
        self.session_id.to_le_bytes()
    }

    /// Default threshold: two thirds of the roster, rounded up.
    pub fn default_threshold(n: usize) -> u32 {
        ((2 * n).div_ceil(3)).max(1) as u32
    }
}

/// Doubly masks a private vector: adds the self mask, adds pairwise masks
/// toward higher-ranked peers and subtracts them toward lower-ranked
/// peers, all mod R. The peer set must be exactly the clients this one is
/// mutually masked with.
pub fn mask_vector(
    x: &[u64],
    self_seed: &[u8; 16],
    pair_seeds: &BTreeMap<ClientId, [u8; 16]>,
    me: ClientId,
    params: &SessionParams,
) -> Result<Vec<u64>, AggError> {
    if x.len() != params.vec_len {
        return Err(AggError::LengthMismatch {
            expected: params.vec_len,
            got: x.len(),
        });
    }
    if x.iter().any(|&v| v >= params.modulus) {
        return Err(AggError::ValueOutOfRange);
    }
    let my_rank = params.rank(me)?;
    let label = params.mask_label();
    let mut y = x.to_vec();
    prg::apply_mask(&mut y, self_seed, &label, params.modulus, false);
    for (&peer, seed) in pair_seeds {
        if peer == me {
            return Err(AggError::ProtocolViolation(
                "pairwise seed with self".into(),
            ));
        }
        let negate = params.rank(peer)? < my_rank;
        prg::apply_mask(&mut y, seed, &label, params.modulus, negate);
    }
    Ok(y)
}

/// Groups unmask-stage shares by owner and checks that no owner arrives
/// through both the live (self seed) and dropped (mask key) paths.
fn classify_shares<'a>(
    shares: &'a [Share],
    live: &BTreeSet<ClientId>,
    dropped: &BTreeSet<ClientId>,
) -> Result<BTreeMap<ClientId, Vec<&'a Share>>, AggError> {
    let mut by_owner: BTreeMap<ClientId, Vec<&Share>> = BTreeMap::new();
    for s in shares {
        let expected_kind = if live.contains(&s.owner) {
            ShareKind::SelfSeed
        } else if dropped.contains(&s.owner) {
            ShareKind::MaskKey
        } else {
            return Err(AggError::ProtocolViolation(format!(
                "share for {} which is neither live nor dropped",
                s.owner
            )));
        };
        if s.kind != expected_kind {
            return Err(AggError::ProtocolViolation(format!(
                "{} arrived through both live and dropped share paths",
                s.owner
            )));
        }
        by_owner.entry(s.owner).or_default().push(s);
    }
    Ok(by_owner)
}

/// Removes self masks of live clients and dangling pairwise masks of
/// dropped clients from an already-summed vector, in place.
fn remove_masks(
    acc: &mut [u64],
    live: &BTreeSet<ClientId>,
    dropped: &BTreeSet<ClientId>,
    shares: &[Share],
    params: &SessionParams,
    group: &ModpGroup,
    mask_publics: &BTreeMap<ClientId, BigUint>,
) -> Result<(), AggError> {
    let label = params.mask_label();
    let by_owner = classify_shares(shares, live, dropped)?;
    let need = params.threshold;

    for &u in live {
        let shares_u = by_owner.get(&u).map(Vec::as_slice).unwrap_or(&[]);
        let owned: Vec<Share> = shares_u.iter().map(|&s| s.clone()).collect();
        let seed_bytes = shamir::reconstruct_secret(&owned, need)?;
        let seed: [u8; 16] = seed_bytes
            .as_slice()
            .try_into()
            .map_err(|_| AggError::ProtocolViolation("self seed is not 16 bytes".into()))?;
        prg::apply_mask(acc, &seed, &label, params.modulus, true);
    }

    for &u in dropped {
        let shares_u = by_owner.get(&u).map(Vec::as_slice).unwrap_or(&[]);
        let owned: Vec<Share> = shares_u.iter().map(|&s| s.clone()).collect();
        let key_bytes = shamir::reconstruct_secret(&owned, need)?;
        let private = BigUint::from_bytes_be(&key_bytes);
        let rank_u = params.rank(u)?;
        for &v in live {
            let pub_v = mask_publics
                .get(&v)
                .ok_or_else(|| AggError::ProtocolViolation(format!("no public key for {v}")))?;
            let seed = group::derive_pair_seed(group, &private, pub_v)?;
            // v's vector holds +mask if u ranks above v, -mask otherwise;
            // undo that contribution.
            let v_added = rank_u > params.rank(v)?;
            prg::apply_mask(acc, &seed, &label, params.modulus, v_added);
        }
    }
    Ok(())
}

/// Recovers the modular sum of live clients' vectors from their masked
/// submissions. `mask_publics` must cover every client that took part in
/// masking (live and dropped); dropped clients are exactly those covered
/// but absent from `masked`.
pub fn unmask_and_sum(
    masked: &BTreeMap<ClientId, Vec<u64>>,
    shares: &[Share],
    params: &SessionParams,
    group: &ModpGroup,
    mask_publics: &BTreeMap<ClientId, BigUint>,
) -> Result<Vec<u64>, AggError> {
    let live: BTreeSet<ClientId> = masked.keys().copied().collect();
    if (live.len() as u32) < params.threshold {
        return Err(AggError::ThresholdNotMet {
            live: live.len(),
            need: params.threshold,
        });
    }
    let dropped: BTreeSet<ClientId> = mask_publics
        .keys()
        .copied()
        .filter(|c| !live.contains(c))
        .collect();

    let mut acc = vec![0u64; params.vec_len];
    let mask = params.modulus - 1;
    for (client, v) in masked {
        params.rank(*client)?;
        if v.len() != params.vec_len {
            return Err(AggError::LengthMismatch {
                expected: params.vec_len,
                got: v.len(),
            });
        }
        for (a, &x) in acc.iter_mut().zip(v) {
            if x >= params.modulus {
                return Err(AggError::ValueOutOfRange);
            }
            *a = (*a + x) & mask;
        }
    }
    remove_masks(&mut acc, &live, &dropped, shares, params, group, mask_publics)?;
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn params(n: u32, t: u32, l: usize) -> SessionParams {
        SessionParams::new(1, l, 1 << 32, t, (0..n).map(ClientId).collect()).unwrap()
    }

    /// Fabricates consistent pairwise seeds without key agreement.
    fn fake_pair_seed(a: ClientId, b: ClientId) -> [u8; 16] {
        let (lo, hi) = if a.0 < b.0 { (a.0, b.0) } else { (b.0, a.0) };
        let mut s = [0u8; 16];
        s[..4].copy_from_slice(&lo.to_le_bytes());
        s[4..8].copy_from_slice(&hi.to_le_bytes());
        s
    }

    #[test]
    fn single_party_masks_and_unmasks() {
        let p = params(1, 1, 4);
        let x = vec![1u64, 2, 3, 4];
        let seed = [5u8; 16];
        let y = mask_vector(&x, &seed, &BTreeMap::new(), ClientId(0), &p).unwrap();
        assert_ne!(y, x);
        let mut acc = y;
        prg::apply_mask(&mut acc, &seed, &p.mask_label(), p.modulus, true);
        assert_eq!(acc, x);
    }

    #[test]
    fn two_party_mutual_masks_cancel() {
        let p = params(2, 1, 8);
        let seed01 = fake_pair_seed(ClientId(0), ClientId(1));
        let self0 = [1u8; 16];
        let self1 = [2u8; 16];
        let x0 = vec![10u64; 8];
        let x1 = vec![20u64; 8];
        let y0 = mask_vector(
            &x0,
            &self0,
            &[(ClientId(1), seed01)].into(),
            ClientId(0),
            &p,
        )
        .unwrap();
        let y1 = mask_vector(
            &x1,
            &self1,
            &[(ClientId(0), seed01)].into(),
            ClientId(1),
            &p,
        )
        .unwrap();
        // Sum both, strip the two self masks: mutual masks cancel by sign.
        let mut acc: Vec<u64> = y0
            .iter()
            .zip(&y1)
            .map(|(a, b)| (a + b) & (p.modulus - 1))
            .collect();
        prg::apply_mask(&mut acc, &self0, &p.mask_label(), p.modulus, true);
        prg::apply_mask(&mut acc, &self1, &p.mask_label(), p.modulus, true);
        assert_eq!(acc, vec![30u64; 8]);
    }

    #[test]
    fn masked_sum_matches_plaintext_sum_without_dropout() {
        // Five clients, fabricated seeds, no dropout: strip self masks and
        // the pairwise masks cancel pairwise.
        let n = 5u32;
        let p = params(n, 3, 16);
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let xs: Vec<Vec<u64>> = (0..n)
            .map(|_| (0..16).map(|_| rng.random_range(0..1u64 << 32)).collect())
            .collect();
        let self_seeds: Vec<[u8; 16]> = (0..n)
            .map(|i| {
                let mut s = [0u8; 16];
                s[0] = i as u8 + 1;
                s
            })
            .collect();
        let mut acc = vec![0u64; 16];
        for i in 0..n {
            let me = ClientId(i);
            let pair: BTreeMap<ClientId, [u8; 16]> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (ClientId(j), fake_pair_seed(me, ClientId(j))))
                .collect();
            let y = mask_vector(&xs[i as usize], &self_seeds[i as usize], &pair, me, &p).unwrap();
            for (a, v) in acc.iter_mut().zip(y) {
                *a = (*a + v) & (p.modulus - 1);
            }
        }
        for s in &self_seeds {
            prg::apply_mask(&mut acc, s, &p.mask_label(), p.modulus, true);
        }
        let mut want = vec![0u64; 16];
        for x in &xs {
            for (w, v) in want.iter_mut().zip(x) {
                *w = (*w + v) & (p.modulus - 1);
            }
        }
        assert_eq!(acc, want);
    }

    #[test]
    fn mask_vector_validates_input() {
        let p = params(2, 1, 4);
        let seed = [0u8; 16];
        assert!(matches!(
            mask_vector(&[1, 2, 3], &seed, &BTreeMap::new(), ClientId(0), &p),
            Err(AggError::LengthMismatch { expected: 4, got: 3 })
        ));
        assert!(matches!(
            mask_vector(&[1 << 32, 0, 0, 0], &seed, &BTreeMap::new(), ClientId(0), &p),
            Err(AggError::ValueOutOfRange)
        ));
    }

    #[test]
    fn default_threshold_is_two_thirds() {
        assert_eq!(SessionParams::default_threshold(3), 2);
        assert_eq!(SessionParams::default_threshold(100), 67);
        assert_eq!(SessionParams::default_threshold(1), 1);
    }
}

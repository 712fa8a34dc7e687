//! Client side of one masked-summation session: advertises two key pairs,
//! splits its self seed and mask key into threshold shares delivered
//! through the server under authenticated encryption, doubly masks its
//! input, and later answers unmask requests with the shares it holds.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigUint;
use rand::RngCore;

use super::group::{self, KeyPair, ModpGroup};
use super::prg;
use super::session::Advert;
use super::shamir::{self, Share, ShareKind};
use super::{mask_vector, AggError, SessionParams};
use crate::ClientId;

/// Byte encoding for shares carried inside encrypted bundles and unmask
/// responses.
pub fn encode_share(share: &Share, out: &mut Vec<u8>) {
    out.extend_from_slice(&share.owner.0.to_le_bytes());
    out.extend_from_slice(&share.holder.0.to_le_bytes());
    out.push(match share.kind {
        ShareKind::SelfSeed => 0,
        ShareKind::MaskKey => 1,
    });
    out.extend_from_slice(&share.x.to_le_bytes());
    out.extend_from_slice(&share.secret_len.to_le_bytes());
    out.extend_from_slice(&(share.y.len() as u16).to_le_bytes());
    for y in &share.y {
        let bytes = y.to_bytes_be();
        debug_assert!(bytes.len() <= 32);
        let mut fixed = [0u8; 32];
        fixed[32 - bytes.len()..].copy_from_slice(&bytes);
        out.extend_from_slice(&fixed);
    }
}

pub fn decode_share(buf: &[u8], pos: &mut usize) -> Result<Share, AggError> {
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], AggError> {
        if *pos + n > buf.len() {
            return Err(AggError::ProtocolViolation("truncated share".into()));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let owner = ClientId(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()));
    let holder = ClientId(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()));
    let kind = match take(pos, 1)?[0] {
        0 => ShareKind::SelfSeed,
        1 => ShareKind::MaskKey,
        k => {
            return Err(AggError::ProtocolViolation(format!(
                "unknown share kind {k}"
            )))
        }
    };
    let x = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap());
    let secret_len = u16::from_le_bytes(take(pos, 2)?.try_into().unwrap());
    let chunks = u16::from_le_bytes(take(pos, 2)?.try_into().unwrap());
    let mut y = Vec::with_capacity(chunks as usize);
    for _ in 0..chunks {
        y.push(BigUint::from_bytes_be(take(pos, 32)?));
    }
    Ok(Share {
        owner,
        holder,
        kind,
        x,
        y,
        secret_len,
    })
}

fn encode_share_list(shares: &[Share]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(shares.len() as u16).to_le_bytes());
    for s in shares {
        encode_share(s, &mut out);
    }
    out
}

fn decode_share_list(buf: &[u8]) -> Result<Vec<Share>, AggError> {
    let mut pos = 0usize;
    if buf.len() < 2 {
        return Err(AggError::ProtocolViolation("truncated share list".into()));
    }
    let count = u16::from_le_bytes(buf[..2].try_into().unwrap());
    pos += 2;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        out.push(decode_share(buf, &mut pos)?);
    }
    if pos != buf.len() {
        return Err(AggError::ProtocolViolation("trailing share bytes".into()));
    }
    Ok(out)
}

fn seal_header(session: u64, sender: ClientId, recipient: ClientId) -> Vec<u8> {
    let mut h = Vec::with_capacity(16);
    h.extend_from_slice(&session.to_le_bytes());
    h.extend_from_slice(&sender.0.to_le_bytes());
    h.extend_from_slice(&recipient.0.to_le_bytes());
    h
}

pub struct ClientAggSession {
    params: SessionParams,
    group: ModpGroup,
    me: ClientId,
    mask_keys: KeyPair,
    enc_keys: KeyPair,
    self_seed: [u8; 16],
    /// Digest roster: advertisers with their publics.
    peer_adverts: BTreeMap<ClientId, Advert>,
    /// Pairwise mask seeds toward every mutual-mask peer.
    pair_seeds: BTreeMap<ClientId, [u8; 16]>,
    /// Shares this client holds (its own plus received ones).
    held: Vec<Share>,
    masked_sent: bool,
}

impl ClientAggSession {
    /// Creates the session state and the advert to send.
    pub fn new(
        params: SessionParams,
        group: ModpGroup,
        me: ClientId,
        rng: &mut impl RngCore,
    ) -> Result<(Self, Advert), AggError> {
        params.rank(me)?;
        let mask_keys = group.generate_keypair(rng);
        let enc_keys = group.generate_keypair(rng);
        let mut self_seed = [0u8; 16];
        rng.fill_bytes(&mut self_seed);
        let advert = Advert {
            mask_public: group.encode_element(&mask_keys.public),
            enc_public: group.encode_element(&enc_keys.public),
        };
        Ok((
            Self {
                params,
                group,
                me,
                mask_keys,
                enc_keys,
                self_seed,
                peer_adverts: BTreeMap::new(),
                pair_seeds: BTreeMap::new(),
                held: Vec::new(),
                masked_sent: false,
            },
            advert,
        ))
    }

    /// Consumes the digest roster; splits the self seed and mask key into
    /// one share per advertiser and returns the encrypted per-recipient
    /// bundles. Own shares are kept locally.
    pub fn handle_digest(
        &mut self,
        digest: Vec<(ClientId, Advert)>,
        rng: &mut impl RngCore,
    ) -> Result<Vec<(ClientId, Vec<u8>)>, AggError> {
        if !self.peer_adverts.is_empty() {
            return Err(AggError::ProtocolViolation("digest handled twice".into()));
        }
        if !digest.iter().any(|(c, _)| *c == self.me) {
            return Err(AggError::ProtocolViolation(
                "digest roster omits this client".into(),
            ));
        }
        for (c, a) in &digest {
            self.group
                .validate_public(&self.group.decode_element(&a.mask_public))?;
            self.group
                .validate_public(&self.group.decode_element(&a.enc_public))?;
            self.peer_adverts.insert(*c, a.clone());
        }
        let roster: Vec<ClientId> = self.peer_adverts.keys().copied().collect();
        let mask_key_bytes = self.group.encode_element(&self.mask_keys.private);
        let seed_shares = shamir::split_for_roster(
            &self.self_seed,
            self.me,
            ShareKind::SelfSeed,
            &roster,
            self.params.threshold,
            rng,
        )?;
        let key_shares = shamir::split_for_roster(
            &mask_key_bytes,
            self.me,
            ShareKind::MaskKey,
            &roster,
            self.params.threshold,
            rng,
        )?;
        let mut bundles = Vec::new();
        for (seed_share, key_share) in seed_shares.into_iter().zip(key_shares) {
            let holder = seed_share.holder;
            if holder == self.me {
                self.held.push(seed_share);
                self.held.push(key_share);
                continue;
            }
            let peer_enc = self
                .group
                .decode_element(&self.peer_adverts[&holder].enc_public);
            let key = group::derive_enc_key(&self.group, &self.enc_keys.private, &peer_enc)?;
            let header = seal_header(self.params.session_id, self.me, holder);
            let plaintext = encode_share_list(&[seed_share, key_share]);
            bundles.push((holder, prg::seal(&key, &header, &plaintext)));
        }
        Ok(bundles)
    }

    /// Consumes the routed bundles. The senders seen here, plus this
    /// client, form the mutual-mask roster; pairwise seeds are derived for
    /// exactly those peers.
    pub fn handle_routed_shares(
        &mut self,
        bundles: Vec<(ClientId, Vec<u8>)>,
    ) -> Result<(), AggError> {
        if !self.pair_seeds.is_empty() {
            return Err(AggError::ProtocolViolation("shares handled twice".into()));
        }
        for (sender, ciphertext) in bundles {
            let advert = self
                .peer_adverts
                .get(&sender)
                .ok_or(AggError::UnknownClient(sender))?;
            let sender_enc = self.group.decode_element(&advert.enc_public);
            let key = group::derive_enc_key(&self.group, &self.enc_keys.private, &sender_enc)?;
            let header = seal_header(self.params.session_id, sender, self.me);
            let plaintext = prg::open(&key, &header, &ciphertext)?;
            let shares = decode_share_list(&plaintext)?;
            for s in &shares {
                if s.owner != sender || s.holder != self.me {
                    return Err(AggError::ProtocolViolation(
                        "share bundle metadata mismatch".into(),
                    ));
                }
            }
            self.held.extend(shares);
            let sender_mask = self.group.decode_element(&advert.mask_public);
            let seed =
                group::derive_pair_seed(&self.group, &self.mask_keys.private, &sender_mask)?;
            self.pair_seeds.insert(sender, seed);
        }
        Ok(())
    }

    /// Doubly masks the input vector.
    pub fn masked_input(&mut self, x: &[u64]) -> Result<Vec<u64>, AggError> {
        if self.masked_sent {
            return Err(AggError::ProtocolViolation("input masked twice".into()));
        }
        let y = mask_vector(x, &self.self_seed, &self.pair_seeds, self.me, &self.params)?;
        self.masked_sent = true;
        Ok(y)
    }

    /// Answers an unmask request: self-seed shares for live owners, mask
    /// key shares for dropped owners. A client named in both sets is a
    /// protocol violation.
    pub fn unmask_shares(
        &self,
        live: &[ClientId],
        dropped: &[ClientId],
    ) -> Result<Vec<Share>, AggError> {
        let live: BTreeSet<ClientId> = live.iter().copied().collect();
        let dropped: BTreeSet<ClientId> = dropped.iter().copied().collect();
        if let Some(c) = live.intersection(&dropped).next() {
            return Err(AggError::ProtocolViolation(format!(
                "{c} requested as both live and dropped"
            )));
        }
        Ok(self
            .held
            .iter()
            .filter(|s| match s.kind {
                ShareKind::SelfSeed => live.contains(&s.owner),
                ShareKind::MaskKey => dropped.contains(&s.owner),
            })
            .cloned()
            .collect())
    }

    pub fn client_id(&self) -> ClientId {
        self.me
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn share_codec_roundtrip() {
        let share = Share {
            owner: ClientId(3),
            holder: ClientId(9),
            kind: ShareKind::MaskKey,
            x: 7,
            y: vec![BigUint::from(123456u32), BigUint::from(1u8) << 200u32],
            secret_len: 40,
        };
        let mut buf = Vec::new();
        encode_share(&share, &mut buf);
        let mut pos = 0;
        let back = decode_share(&buf, &mut pos).unwrap();
        assert_eq!(back, share);
        assert_eq!(pos, buf.len());
    }

    #[test]
    fn digest_must_include_self() {
        let group = ModpGroup::insecure_small();
        let params =
            SessionParams::new(1, 4, 1 << 16, 1, vec![ClientId(0), ClientId(1)]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (mut c0, advert0) =
            ClientAggSession::new(params.clone(), group.clone(), ClientId(0), &mut rng).unwrap();
        // A digest that only names the peer is rejected.
        let err = c0.handle_digest(vec![(ClientId(1), advert0)], &mut rng);
        assert!(matches!(err, Err(AggError::ProtocolViolation(_))));
    }
}

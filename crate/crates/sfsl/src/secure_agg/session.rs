//! Server side of one masked-summation session. Stages advance strictly
//! forward; a message belonging to a completed stage is rejected without
//! touching state. The server keeps only the running lane accumulator,
//! not individual masked vectors.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigUint;

use super::group::ModpGroup;
use super::shamir::Share;
use super::{remove_masks, AggError, SessionParams};
use crate::ClientId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    KeyAdvertise,
    ShareDistribution,
    MaskedInput,
    Unmasking,
    Done,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::KeyAdvertise => "key-advertise",
            Stage::ShareDistribution => "share-distribution",
            Stage::MaskedInput => "masked-input",
            Stage::Unmasking => "unmasking",
            Stage::Done => "done",
        }
    }
}

/// One client's advertised public keys, as raw fixed-width group elements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Advert {
    pub mask_public: Vec<u8>,
    pub enc_public: Vec<u8>,
}

pub struct ServerAggSession {
    params: SessionParams,
    group: ModpGroup,
    stage: Stage,
    adverts: BTreeMap<ClientId, Advert>,
    /// recipient -> [(sender, ciphertext)]
    routed: BTreeMap<ClientId, Vec<(ClientId, Vec<u8>)>>,
    share_senders: BTreeSet<ClientId>,
    acc: Vec<u64>,
    live: BTreeSet<ClientId>,
    unmask_shares: Vec<Share>,
    responders: BTreeSet<ClientId>,
}

impl ServerAggSession {
    pub fn new(params: SessionParams, group: ModpGroup) -> Self {
        let acc = vec![0u64; params.vec_len];
        Self {
            params,
            group,
            stage: Stage::KeyAdvertise,
            adverts: BTreeMap::new(),
            routed: BTreeMap::new(),
            share_senders: BTreeSet::new(),
            acc,
            live: BTreeSet::new(),
            unmask_shares: Vec::new(),
            responders: BTreeSet::new(),
        }
    }

    pub fn params(&self) -> &SessionParams {
        &self.params
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    fn expect_stage(&self, want: Stage, msg: &'static str) -> Result<(), AggError> {
        if self.stage != want {
            return Err(AggError::StageViolation {
                msg,
                actual: self.stage.name(),
            });
        }
        Ok(())
    }

    pub fn record_advert(&mut self, client: ClientId, advert: Advert) -> Result<(), AggError> {
        self.expect_stage(Stage::KeyAdvertise, "key-advertise")?;
        self.params.rank(client)?;
        self.group
            .validate_public(&self.group.decode_element(&advert.mask_public))?;
        self.group
            .validate_public(&self.group.decode_element(&advert.enc_public))?;
        if self.adverts.insert(client, advert).is_some() {
            return Err(AggError::DuplicateMessage(client));
        }
        Ok(())
    }

    /// Closes key collection and returns the digest roster every client
    /// receives: all advertisers with their public keys.
    pub fn close_adverts(&mut self) -> Result<Vec<(ClientId, Advert)>, AggError> {
        self.expect_stage(Stage::KeyAdvertise, "close-adverts")?;
        if (self.adverts.len() as u32) < self.params.threshold {
            return Err(AggError::ThresholdNotMet {
                live: self.adverts.len(),
                need: self.params.threshold,
            });
        }
        self.stage = Stage::ShareDistribution;
        Ok(self
            .adverts
            .iter()
            .map(|(&c, a)| (c, a.clone()))
            .collect())
    }

    pub fn record_encrypted_shares(
        &mut self,
        sender: ClientId,
        bundles: Vec<(ClientId, Vec<u8>)>,
    ) -> Result<(), AggError> {
        self.expect_stage(Stage::ShareDistribution, "encrypted-shares")?;
        if !self.adverts.contains_key(&sender) {
            return Err(AggError::UnknownClient(sender));
        }
        if !self.share_senders.insert(sender) {
            return Err(AggError::DuplicateMessage(sender));
        }
        for (recipient, ciphertext) in bundles {
            if !self.adverts.contains_key(&recipient) {
                return Err(AggError::UnknownClient(recipient));
            }
            self.routed
                .entry(recipient)
                .or_default()
                .push((sender, ciphertext));
        }
        Ok(())
    }

    /// Closes share routing and hands back the per-recipient bundles. The
    /// senders present here define the mutual-mask roster.
    pub fn close_shares(
        &mut self,
    ) -> Result<BTreeMap<ClientId, Vec<(ClientId, Vec<u8>)>>, AggError> {
        self.expect_stage(Stage::ShareDistribution, "close-shares")?;
        if (self.share_senders.len() as u32) < self.params.threshold {
            return Err(AggError::ThresholdNotMet {
                live: self.share_senders.len(),
                need: self.params.threshold,
            });
        }
        self.stage = Stage::MaskedInput;
        // Only share senders keep participating; bundles from silent
        // clients are still delivered (their masks may need removal).
        let mut routed = std::mem::take(&mut self.routed);
        routed.retain(|recipient, _| self.share_senders.contains(recipient));
        Ok(routed)
    }

    pub fn record_masked(&mut self, client: ClientId, vector: &[u64]) -> Result<(), AggError> {
        self.expect_stage(Stage::MaskedInput, "masked-input")?;
        if !self.share_senders.contains(&client) {
            return Err(AggError::UnknownClient(client));
        }
        if self.live.contains(&client) {
            return Err(AggError::DuplicateMessage(client));
        }
        if vector.len() != self.params.vec_len {
            return Err(AggError::LengthMismatch {
                expected: self.params.vec_len,
                got: vector.len(),
            });
        }
        let mask = self.params.modulus - 1;
        if vector.iter().any(|&v| v > mask) {
            return Err(AggError::ValueOutOfRange);
        }
        self.live.insert(client);
        for (a, &v) in self.acc.iter_mut().zip(vector) {
            *a = (*a + v) & mask;
        }
        Ok(())
    }

    /// Closes input collection; returns the live and dropped sets the
    /// unmask requests must name.
    pub fn close_masked(&mut self) -> Result<(Vec<ClientId>, Vec<ClientId>), AggError> {
        self.expect_stage(Stage::MaskedInput, "close-masked")?;
        if (self.live.len() as u32) < self.params.threshold {
            return Err(AggError::ThresholdNotMet {
                live: self.live.len(),
                need: self.params.threshold,
            });
        }
        self.stage = Stage::Unmasking;
        let dropped: Vec<ClientId> = self
            .share_senders
            .iter()
            .copied()
            .filter(|c| !self.live.contains(c))
            .collect();
        Ok((self.live.iter().copied().collect(), dropped))
    }

    pub fn record_unmask_shares(
        &mut self,
        from: ClientId,
        shares: Vec<Share>,
    ) -> Result<(), AggError> {
        self.expect_stage(Stage::Unmasking, "unmask-response")?;
        if !self.live.contains(&from) {
            return Err(AggError::UnknownClient(from));
        }
        if !self.responders.insert(from) {
            return Err(AggError::DuplicateMessage(from));
        }
        self.unmask_shares.extend(shares);
        Ok(())
    }

    /// Removes all masks and returns the sum of live clients' vectors.
    pub fn finish(&mut self) -> Result<Vec<u64>, AggError> {
        self.expect_stage(Stage::Unmasking, "finish")?;
        if (self.responders.len() as u32) < self.params.threshold {
            return Err(AggError::ThresholdNotMet {
                live: self.responders.len(),
                need: self.params.threshold,
            });
        }
        let dropped: BTreeSet<ClientId> = self
            .share_senders
            .iter()
            .copied()
            .filter(|c| !self.live.contains(c))
            .collect();
        let mask_publics: BTreeMap<ClientId, BigUint> = self
            .share_senders
            .iter()
            .map(|c| (*c, self.group.decode_element(&self.adverts[c].mask_public)))
            .collect();
        let mut acc = self.acc.clone();
        remove_masks(
            &mut acc,
            &self.live,
            &dropped,
            &self.unmask_shares,
            &self.params,
            &self.group,
            &mask_publics,
        )?;
        self.stage = Stage::Done;
        Ok(acc)
    }

    pub fn live_clients(&self) -> &BTreeSet<ClientId> {
        &self.live
    }
}

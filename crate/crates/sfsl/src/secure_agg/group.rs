//! Key agreement over a modular-exponential group. The default is the
//! 2048-bit MODP group 14 from RFC 3526; a 257-bit safe-prime group is
//! available for tests and desk-scale experiments where the full group
//! would dominate the runtime.

use num_bigint::BigUint;
use num_traits::One;
use rand::RngCore;
use sha2::{Digest, Sha256};
use std::sync::Arc;

use super::AggError;

/// Group 14 modulus from RFC 3526.
const MODP_2048_HEX: &str = concat!(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74",
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437",
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED",
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05",
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB",
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B",
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718",
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF",
);

/// Safe prime p = 2q + 1 with q = 2^255 + 115095 (257 bits). Plenty for a
/// simulation; never use outside tests and desk experiments.
const TEST_SMALL_HEX: &str =
    "1000000000000000000000000000000000000000000000000000000000003832F";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GroupId {
    Modp2048,
    /// Small test group; requires opting into reduced security.
    InsecureSmall,
}

/// A prime-modulus Diffie-Hellman group with a fixed generator.
#[derive(Debug, Clone)]
pub struct ModpGroup {
    pub id: GroupId,
    prime: Arc<BigUint>,
    generator: BigUint,
    exponent_bytes: usize,
}

/// Private/public key-agreement pair.
#[derive(Debug, Clone)]
pub struct KeyPair {
    pub private: BigUint,
    pub public: BigUint,
}

impl ModpGroup {
    pub fn from_id(id: GroupId) -> Self {
        match id {
            GroupId::Modp2048 => Self::modp_2048(),
            GroupId::InsecureSmall => Self::insecure_small(),
        }
    }

    pub fn modp_2048() -> Self {
        Self {
            id: GroupId::Modp2048,
            prime: Arc::new(BigUint::parse_bytes(MODP_2048_HEX.as_bytes(), 16).unwrap()),
            generator: BigUint::from(2u8),
            exponent_bytes: 32,
        }
    }

    pub fn insecure_small() -> Self {
        Self {
            id: GroupId::InsecureSmall,
            prime: Arc::new(BigUint::parse_bytes(TEST_SMALL_HEX.as_bytes(), 16).unwrap()),
            // 4 = 2^2 is a quadratic residue, so it generates the prime
            // order-q subgroup of the safe-prime group.
            generator: BigUint::from(4u8),
            exponent_bytes: 32,
        }
    }

    pub fn prime(&self) -> &BigUint {
        &self.prime
    }

    /// Serialized width of a group element in bytes.
    pub fn element_bytes(&self) -> usize {
        ((self.prime.bits() as usize) + 7) / 8
    }

    pub fn generate_keypair(&self, rng: &mut impl RngCore) -> KeyPair {
        let mut buf = vec![0u8; self.exponent_bytes];
        loop {
            rng.fill_bytes(&mut buf);
            let private = BigUint::from_bytes_be(&buf);
            if private > BigUint::one() {
                let public = self.generator.modpow(&private, &self.prime);
                return KeyPair { private, public };
            }
        }
    }

    /// Rejects the identity, the order-2 element `p-1`, and anything
    /// outside `[2, p-2]`.
    pub fn validate_public(&self, public: &BigUint) -> Result<(), AggError> {
        let pm1 = &*self.prime - BigUint::one();
        if *public <= BigUint::one() || *public >= pm1 {
            return Err(AggError::InvalidGroupElement);
        }
        Ok(())
    }

    /// Fixed-width big-endian encoding of a group element.
    pub fn encode_element(&self, e: &BigUint) -> Vec<u8> {
        let mut out = vec![0u8; self.element_bytes()];
        let bytes = e.to_bytes_be();
        out[self.element_bytes() - bytes.len()..].copy_from_slice(&bytes);
        out
    }

    pub fn decode_element(&self, bytes: &[u8]) -> BigUint {
        BigUint::from_bytes_be(bytes)
    }
}

/// Computes the shared group element `peer_public ^ my_private mod p` and
/// hashes it down to a 16-byte seed. Symmetric in the two key pairs, so
/// both ends expand identical masks.
pub fn derive_pair_seed(
    group: &ModpGroup,
    my_private: &BigUint,
    peer_public: &BigUint,
) -> Result<[u8; 16], AggError> {
    let shared = shared_element(group, my_private, peer_public)?;
    Ok(kdf16(b"sfsl-pair-seed", group, &shared))
}

/// Independent 16-byte key for client-to-client share encryption, derived
/// from the same agreement.
pub fn derive_enc_key(
    group: &ModpGroup,
    my_private: &BigUint,
    peer_public: &BigUint,
) -> Result<[u8; 16], AggError> {
    let shared = shared_element(group, my_private, peer_public)?;
    Ok(kdf16(b"sfsl-enc-key", group, &shared))
}

fn shared_element(
    group: &ModpGroup,
    my_private: &BigUint,
    peer_public: &BigUint,
) -> Result<BigUint, AggError> {
    group.validate_public(peer_public)?;
    Ok(peer_public.modpow(my_private, group.prime()))
}

fn kdf16(tag: &[u8], group: &ModpGroup, shared: &BigUint) -> [u8; 16] {
    let mut h = Sha256::new();
    h.update(tag);
    h.update(group.encode_element(shared));
    let digest = h.finalize();
    let mut out = [0u8; 16];
    out.copy_from_slice(&digest[..16]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn pair_seed_is_symmetric() {
        let group = ModpGroup::insecure_small();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = group.generate_keypair(&mut rng);
        let b = group.generate_keypair(&mut rng);
        let ab = derive_pair_seed(&group, &a.private, &b.public).unwrap();
        let ba = derive_pair_seed(&group, &b.private, &a.public).unwrap();
        assert_eq!(ab, ba);
        // The encryption key comes from a different derivation.
        let enc = derive_enc_key(&group, &a.private, &b.public).unwrap();
        assert_ne!(ab, enc);
    }

    #[test]
    fn three_clients_get_distinct_pairwise_seeds() {
        let group = ModpGroup::insecure_small();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let keys: Vec<KeyPair> = (0..3).map(|_| group.generate_keypair(&mut rng)).collect();
        let mut seeds = Vec::new();
        for i in 0..3 {
            for j in (i + 1)..3 {
                seeds.push(derive_pair_seed(&group, &keys[i].private, &keys[j].public).unwrap());
            }
        }
        for i in 0..seeds.len() {
            for j in (i + 1)..seeds.len() {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }

    #[test]
    fn degenerate_publics_rejected() {
        let group = ModpGroup::insecure_small();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let me = group.generate_keypair(&mut rng);
        for bad in [
            BigUint::from(0u8),
            BigUint::from(1u8), // identity
            group.prime() - BigUint::one(),
            group.prime().clone(),
        ] {
            assert!(matches!(
                derive_pair_seed(&group, &me.private, &bad),
                Err(AggError::InvalidGroupElement)
            ));
        }
    }

    #[test]
    fn modp_2048_agreement_works() {
        let group = ModpGroup::modp_2048();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let a = group.generate_keypair(&mut rng);
        let b = group.generate_keypair(&mut rng);
        assert_eq!(
            derive_pair_seed(&group, &a.private, &b.public).unwrap(),
            derive_pair_seed(&group, &b.private, &a.public).unwrap()
        );
        assert_eq!(group.element_bytes(), 256);
    }

    #[test]
    fn element_encoding_is_fixed_width() {
        let group = ModpGroup::insecure_small();
        let small = BigUint::from(5u8);
        let enc = group.encode_element(&small);
        assert_eq!(enc.len(), group.element_bytes());
        assert_eq!(group.decode_element(&enc), small);
    }
}

//! Shamir threshold secret sharing over the prime field of order
//! 2^256 - 189. Secrets of arbitrary length are chunked into 31-byte
//! blocks (each strictly below the field order) and every chunk is shared
//! with an independent random polynomial; one share carries the chunk
//! evaluations at a single nonzero point. Any `t` shares reconstruct the
//! secret by Lagrange interpolation at zero; fewer reveal nothing.

use num_bigint::BigUint;
use num_traits::{One, Zero};
use rand::RngCore;
use std::sync::OnceLock;

use super::AggError;
use crate::ClientId;

const CHUNK_BYTES: usize = 31;

/// 2^256 - 189, prime.
fn field_prime() -> &'static BigUint {
    static P: OnceLock<BigUint> = OnceLock::new();
    P.get_or_init(|| (BigUint::one() << 256u32) - BigUint::from(189u32))
}

/// What a share protects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ShareKind {
    /// The client-chosen seed of the self mask.
    SelfSeed,
    /// The private key behind the mutual masks.
    MaskKey,
}

/// One holder's share of one owner's secret.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Share {
    pub owner: ClientId,
    pub holder: ClientId,
    pub kind: ShareKind,
    /// Evaluation point; nonzero.
    pub x: u32,
    /// Per-chunk polynomial evaluations.
    pub y: Vec<BigUint>,
    /// Original secret length in bytes.
    pub secret_len: u16,
}

fn random_element(rng: &mut impl RngCore) -> BigUint {
    // Rejection sampling over 32-byte strings.
    loop {
        let mut buf = [0u8; 32];
        rng.fill_bytes(&mut buf);
        let v = BigUint::from_bytes_be(&buf);
        if &v < field_prime() {
            return v;
        }
    }
}

/// Splits `secret` into `n` shares with threshold `t`, at evaluation
/// points `1..=n`. Owner/holder/kind metadata is filled in by the caller.
pub fn split_secret(
    secret: &[u8],
    n: u32,
    t: u32,
    rng: &mut impl RngCore,
) -> Result<Vec<(u32, Vec<BigUint>)>, AggError> {
    if t < 1 || t > n {
        return Err(AggError::BadThreshold { t, n });
    }
    if secret.len() > u16::MAX as usize {
        return Err(AggError::ProtocolViolation("secret too long".into()));
    }
    let p = field_prime();
    let chunks: Vec<BigUint> = secret
        .chunks(CHUNK_BYTES)
        .map(BigUint::from_bytes_be)
        .collect();
    // coefficients[c][k]: chunk c, degree k; degree 0 is the secret chunk.
    let coefficients: Vec<Vec<BigUint>> = chunks
        .iter()
        .map(|chunk| {
            let mut coefs = vec![chunk.clone()];
            for _ in 1..t {
                coefs.push(random_element(rng));
            }
            coefs
        })
        .collect();
    let shares = (1..=n)
        .map(|x| {
            let xe = BigUint::from(x);
            let ys = coefficients
                .iter()
                .map(|coefs| {
                    // Horner evaluation mod p.
                    let mut acc = BigUint::zero();
                    for c in coefs.iter().rev() {
                        acc = (acc * &xe + c) % p;
                    }
                    acc
                })
                .collect();
            (x, ys)
        })
        .collect();
    Ok(shares)
}

/// Reconstructs a secret from at least `t` shares of the same
/// (owner, kind). Mixed share sets and duplicate evaluation points are
/// rejected.
pub fn reconstruct_secret(shares: &[Share], t: u32) -> Result<Vec<u8>, AggError> {
    if (shares.len() as u32) < t || shares.is_empty() {
        return Err(AggError::InsufficientShares {
            got: shares.len(),
            need: t as usize,
        });
    }
    let first = &shares[0];
    for s in shares {
        if s.owner != first.owner
            || s.kind != first.kind
            || s.secret_len != first.secret_len
            || s.y.len() != first.y.len()
        {
            return Err(AggError::ShareSetMismatch);
        }
        if s.x == 0 {
            return Err(AggError::ShareSetMismatch);
        }
    }
    let used = &shares[..t as usize];
    {
        let mut xs: Vec<u32> = used.iter().map(|s| s.x).collect();
        xs.sort_unstable();
        xs.dedup();
        if xs.len() != used.len() {
            return Err(AggError::ShareSetMismatch);
        }
    }

    let p = field_prime();
    let chunk_count = first.y.len();
    let mut secret = Vec::with_capacity(chunk_count * CHUNK_BYTES);
    for c in 0..chunk_count {
        // Lagrange interpolation at x = 0.
        let mut acc = BigUint::zero();
        for (i, si) in used.iter().enumerate() {
            let xi = BigUint::from(si.x);
            let mut num = BigUint::one();
            let mut den = BigUint::one();
            for (j, sj) in used.iter().enumerate() {
                if i == j {
                    continue;
                }
                let xj = BigUint::from(sj.x);
                num = num * (p - &xj) % p;
                let diff = (p + &xi - &xj) % p;
                den = den * diff % p;
            }
            let inv = den.modinv(p).ok_or(AggError::ShareSetMismatch)?;
            acc = (acc + &si.y[c] * num % p * inv) % p;
        }
        let mut bytes = acc.to_bytes_be();
        // This chunk's width in the original secret.
        let width = if c + 1 < chunk_count {
            CHUNK_BYTES
        } else {
            let rem = first.secret_len as usize - c * CHUNK_BYTES;
            debug_assert!(rem >= 1 && rem <= CHUNK_BYTES);
            rem
        };
        if bytes.len() > width {
            return Err(AggError::ShareSetMismatch);
        }
        let mut padded = vec![0u8; width - bytes.len()];
        padded.append(&mut bytes);
        secret.extend_from_slice(&padded);
    }
    Ok(secret)
}

/// Convenience: splits and wraps with metadata, one share per roster
/// position (`x` = position + 1).
pub fn split_for_roster(
    secret: &[u8],
    owner: ClientId,
    kind: ShareKind,
    roster: &[ClientId],
    t: u32,
    rng: &mut impl RngCore,
) -> Result<Vec<Share>, AggError> {
    let raw = split_secret(secret, roster.len() as u32, t, rng)?;
    Ok(raw
        .into_iter()
        .zip(roster)
        .map(|((x, y), &holder)| Share {
            owner,
            holder,
            kind,
            x,
            y,
            secret_len: secret.len() as u16,
        })
        .collect())
}

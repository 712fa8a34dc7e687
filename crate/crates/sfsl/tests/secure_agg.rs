//! End-to-end masked summation sessions: real key agreement, encrypted
//! share routing, dropout recovery, stage machine enforcement, and the
//! statistical properties of the masks.

mod common;

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use sfsl::secure_agg::client::ClientAggSession;
use sfsl::secure_agg::group::ModpGroup;
use sfsl::secure_agg::session::{ServerAggSession, Stage};
use sfsl::secure_agg::{mask_vector, AggError, SessionParams};
use sfsl::ClientId;

fn params(n: u32, t: u32, l: usize, modulus: u64, session: u64) -> SessionParams {
    SessionParams::new(session, l, modulus, t, (0..n).map(ClientId).collect()).unwrap()
}

/// Drives a whole session: `drop_after_shares` clients vanish after
/// distributing shares. Returns the recovered sum and the plaintext sum of
/// the live clients' inputs.
fn run_session(
    n: u32,
    t: u32,
    l: usize,
    modulus: u64,
    drop_after_shares: &[u32],
    seed: u64,
) -> (Vec<u64>, Vec<u64>) {
    let group = ModpGroup::insecure_small();
    let p = params(n, t, l, modulus, seed);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let inputs: Vec<Vec<u64>> = (0..n)
        .map(|_| (0..l).map(|_| rng.random_range(0..modulus)).collect())
        .collect();

    let mut server = ServerAggSession::new(p.clone(), group.clone());
    let mut clients: BTreeMap<ClientId, ClientAggSession> = BTreeMap::new();
    for i in 0..n {
        let id = ClientId(i);
        let (sess, advert) =
            ClientAggSession::new(p.clone(), group.clone(), id, &mut rng).unwrap();
        server.record_advert(id, advert).unwrap();
        clients.insert(id, sess);
    }
    let digest = server.close_adverts().unwrap();
    for (&id, sess) in clients.iter_mut() {
        let bundles = sess.handle_digest(digest.clone(), &mut rng).unwrap();
        server.record_encrypted_shares(id, bundles).unwrap();
    }
    let mut routed = server.close_shares().unwrap();
    for (&id, sess) in clients.iter_mut() {
        sess.handle_routed_shares(routed.remove(&id).unwrap_or_default())
            .unwrap();
    }
    // Dropouts: these clients sent shares but never send masked input.
    let dropped: Vec<ClientId> = drop_after_shares.iter().map(|&i| ClientId(i)).collect();
    let mut plain = vec![0u64; l];
    for (&id, sess) in clients.iter_mut() {
        if dropped.contains(&id) {
            continue;
        }
        let x = &inputs[id.0 as usize];
        let y = sess.masked_input(x).unwrap();
        server.record_masked(id, &y).unwrap();
        for (acc, v) in plain.iter_mut().zip(x) {
            *acc = (*acc + v) % modulus;
        }
    }
    let (live, dead) = server.close_masked().unwrap();
    for id in &live {
        let shares = clients[id].unmask_shares(&live, &dead).unwrap();
        server.record_unmask_shares(*id, shares).unwrap();
    }
    (server.finish().unwrap(), plain)
}

#[test]
fn sum_matches_plaintext_without_dropout() {
    for n in [1u32, 2, 3, 5] {
        let t = ((2 * n).div_ceil(3)).max(1);
        let (sum, plain) = run_session(n, t, 24, 1 << 32, &[], 100 + n as u64);
        assert_eq!(sum, plain, "n={n}");
    }
}

#[test]
fn sum_matches_plaintext_with_dropouts() {
    // n=5, t=3, client 2 drops after distributing shares.
    let (sum, plain) = run_session(5, 3, 16, 1 << 32, &[2], 7);
    assert_eq!(sum, plain);
    // Two dropouts, still at threshold.
    let (sum, plain) = run_session(5, 3, 16, 1 << 32, &[1, 4], 8);
    assert_eq!(sum, plain);
}

#[test]
fn below_threshold_aborts() {
    let group = ModpGroup::insecure_small();
    let p = params(5, 3, 4, 1 << 16, 42);
    let mut rng = ChaCha20Rng::seed_from_u64(42);
    let mut server = ServerAggSession::new(p.clone(), group.clone());
    let mut clients = Vec::new();
    for i in 0..5 {
        let (sess, advert) =
            ClientAggSession::new(p.clone(), group.clone(), ClientId(i), &mut rng).unwrap();
        server.record_advert(ClientId(i), advert).unwrap();
        clients.push(sess);
    }
    let digest = server.close_adverts().unwrap();
    for (i, sess) in clients.iter_mut().enumerate() {
        let bundles = sess.handle_digest(digest.clone(), &mut rng).unwrap();
        server
            .record_encrypted_shares(ClientId(i as u32), bundles)
            .unwrap();
    }
    let mut routed = server.close_shares().unwrap();
    // Only clients 0 and 1 stay for masked input: 2 < t = 3.
    for i in 0..2u32 {
        let sess = &mut clients[i as usize];
        sess.handle_routed_shares(routed.remove(&ClientId(i)).unwrap_or_default())
            .unwrap();
        let y = sess.masked_input(&[1, 2, 3, 4]).unwrap();
        server.record_masked(ClientId(i), &y).unwrap();
    }
    assert!(matches!(
        server.close_masked(),
        Err(AggError::ThresholdNotMet { live: 2, need: 3 })
    ));
}

#[test]
fn stage_machine_rejects_stale_messages_without_state_change() {
    let group = ModpGroup::insecure_small();
    let p = params(3, 2, 4, 1 << 16, 9);
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let mut server = ServerAggSession::new(p.clone(), group.clone());
    let mut adverts = Vec::new();
    let mut clients = Vec::new();
    for i in 0..3 {
        let (sess, advert) =
            ClientAggSession::new(p.clone(), group.clone(), ClientId(i), &mut rng).unwrap();
        server.record_advert(ClientId(i), advert.clone()).unwrap();
        adverts.push(advert);
        clients.push(sess);
    }
    let digest = server.close_adverts().unwrap();
    assert_eq!(server.stage(), Stage::ShareDistribution);

    // A late key advertisement must be rejected and change nothing.
    let err = server.record_advert(ClientId(1), adverts[1].clone());
    assert!(matches!(err, Err(AggError::StageViolation { .. })));
    assert_eq!(server.stage(), Stage::ShareDistribution);

    for (i, sess) in clients.iter_mut().enumerate() {
        let bundles = sess.handle_digest(digest.clone(), &mut rng).unwrap();
        server
            .record_encrypted_shares(ClientId(i as u32), bundles)
            .unwrap();
    }
    let routed = server.close_shares().unwrap();
    assert!(matches!(
        server.record_encrypted_shares(ClientId(0), Vec::new()),
        Err(AggError::StageViolation { .. })
    ));
    let _ = routed;
}

#[test]
fn large_roster_masked_sum_is_exact() {
    // n = 100 with fabricated pairwise seeds (no key agreement): checks
    // the mask algebra itself at scale.
    let n = 100u32;
    let modulus = 1u64 << 32;
    let p = params(n, 67, 8, modulus, 11);
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let mut pair = BTreeMap::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let mut seed = [0u8; 16];
            rng.fill_bytes(&mut seed);
            pair.insert((i, j), seed);
        }
    }
    let mut self_seeds = Vec::new();
    let mut acc = vec![0u64; 8];
    let mut plain = vec![0u64; 8];
    for i in 0..n {
        let x: Vec<u64> = (0..8).map(|_| rng.random_range(0..modulus)).collect();
        let mut seed = [0u8; 16];
        rng.fill_bytes(&mut seed);
        self_seeds.push(seed);
        let seeds: BTreeMap<ClientId, [u8; 16]> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let key = if i < j { (i, j) } else { (j, i) };
                (ClientId(j), pair[&key])
            })
            .collect();
        let y = mask_vector(&x, &seed, &seeds, ClientId(i), &p).unwrap();
        for (a, v) in acc.iter_mut().zip(&y) {
            *a = (*a + v) % modulus;
        }
        for (a, v) in plain.iter_mut().zip(&x) {
            *a = (*a + v) % modulus;
        }
    }
    for seed in &self_seeds {
        sfsl::secure_agg::prg::apply_mask(&mut acc, seed, &p.mask_label(), modulus, true);
    }
    assert_eq!(acc, plain);
}

#[test]
fn masked_vector_lanes_look_uniform() {
    // Chi-square over many single-client maskings at R = 16: the masked
    // value of a constant input should be frequency-indistinguishable
    // from uniform.
    let modulus = 16u64;
    let mut counts = vec![0u64; 16];
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    for trial in 0..4000u64 {
        let p = params(1, 1, 4, modulus, trial);
        let mut seed = [0u8; 16];
        rng.fill_bytes(&mut seed);
        let y = mask_vector(&[3, 7, 11, 15], &seed, &BTreeMap::new(), ClientId(0), &p).unwrap();
        for v in y {
            counts[v as usize] += 1;
        }
    }
    let p_value = common::chi_square_uniform_pvalue(&counts);
    assert!(p_value > 0.01, "p = {p_value}");
}

#[test]
fn unmask_rejects_live_and_dropped_overlap() {
    let group = ModpGroup::insecure_small();
    let p = params(2, 1, 4, 1 << 16, 21);
    let mut rng = ChaCha20Rng::seed_from_u64(21);
    let (sess, _advert) =
        ClientAggSession::new(p.clone(), group.clone(), ClientId(0), &mut rng).unwrap();
    let err = sess.unmask_shares(&[ClientId(1)], &[ClientId(1)]);
    assert!(matches!(err, Err(AggError::ProtocolViolation(_))));
}

#[test]
fn unmask_and_sum_detects_mixed_share_paths() {
    // A client listed as live must not arrive through the mask-key path.
    let group = ModpGroup::insecure_small();
    let p = params(2, 1, 2, 1 << 16, 22);
    let mut rng = ChaCha20Rng::seed_from_u64(22);
    let kp = group.generate_keypair(&mut rng);
    let masked: BTreeMap<ClientId, Vec<u64>> = [(ClientId(0), vec![1, 2])].into();
    let publics: BTreeMap<_, _> = [(ClientId(0), kp.public.clone())].into();
    let bogus = sfsl::secure_agg::shamir::split_for_roster(
        &[9u8; 16],
        ClientId(0),
        sfsl::secure_agg::shamir::ShareKind::MaskKey,
        &[ClientId(0), ClientId(1)],
        1,
        &mut rng,
    )
    .unwrap();
    let err = sfsl::secure_agg::unmask_and_sum(&masked, &bogus, &p, &group, &publics);
    assert!(matches!(err, Err(AggError::ProtocolViolation(_))));
}

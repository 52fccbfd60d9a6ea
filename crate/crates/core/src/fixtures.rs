// SPDX-License-Identifier: Apache-2.0

//! Deterministic fixture key material.
//!
//! Scenarios and the command-line tools need recipient keys that are the
//! same on every machine and every run, so sealed payloads built by a
//! scenario can be opened by the inspection tools without shipping key
//! files around. Keys are derived from fixed seeds; they are test
//! material, not secrets.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::kem::{self, KemAlgorithm, KemPublicKey, KemSecretKey};

/// Seed for fixture key derivation. One keystream per algorithm, offset
/// by the algorithm id, so adding an algorithm never shifts existing keys.
const FIXTURE_KEY_SEED: u64 = 0x6c6f_636b_626f_78; // "lockbox"

/// The fixture key pair for one algorithm.
pub fn fixture_keypair(alg: KemAlgorithm) -> (KemPublicKey, KemSecretKey) {
    let mut rng = ChaCha20Rng::seed_from_u64(FIXTURE_KEY_SEED ^ u64::from(alg.id()));
    kem::generate(alg, &mut rng)
}

/// Public halves for the named algorithms, in the order given.
pub fn fixture_recipients(algs: &[KemAlgorithm]) -> Vec<KemPublicKey> {
    algs.iter().map(|&a| fixture_keypair(a).0).collect()
}

/// Every fixture secret key — the default keystore a security manager
/// instance holds for opening sealed payloads.
pub fn fixture_keystore() -> Vec<KemSecretKey> {
    [KemAlgorithm::TestKem, KemAlgorithm::MlKem768]
        .iter()
        .map(|&a| fixture_keypair(a).1)
        .collect()
}

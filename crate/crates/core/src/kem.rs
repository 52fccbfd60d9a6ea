// SPDX-License-Identifier: Apache-2.0

//! Key encapsulation for attestation lockboxes.
//!
//! A lockbox delivers one 32-byte content key to one recipient. Because a
//! KEM produces its own shared secret rather than transporting a chosen
//! key, the lockbox field is a KEM-DEM hybrid: the KEM ciphertext followed
//! by the content key XOR-masked with a hash of the shared secret. A
//! recipient decapsulates, re-derives the mask, and unmasks the content
//! key; anyone else derives a different mask and unmasks garbage, which
//! the content cipher's authentication then rejects.
//!
//! Two algorithms are registered:
//!
//! * **algorithm 1** — a deterministic test KEM for reproducible fixtures:
//!   public and secret key are the same 32 bytes, the ciphertext is a
//!   32-byte random value, and the shared secret is a hash of key and
//!   ciphertext. It provides no security and exists so scenarios can ship
//!   recipient keys in plain text.
//! * **algorithm 2** — ML-KEM-768, the post-quantum lattice KEM, with its
//!   standard 1184-byte encapsulation keys and 1088-byte ciphertexts.

use ml_kem::kem::{Decapsulate, Encapsulate};
use ml_kem::{Encoded, EncodedSizeUser, KemCore, MlKem768};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha384};

/// Content keys are AES-256 keys.
pub const CONTENT_KEY_BYTES: usize = 32;

const TEST_KEY_BYTES: usize = 32;
const TEST_CT_BYTES: usize = 32;
const MLKEM_EK_BYTES: usize = 1184;
const MLKEM_DK_BYTES: usize = 2400;
const MLKEM_CT_BYTES: usize = 1088;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KemAlgorithm {
    /// Deterministic test KEM (no security).
    TestKem,
    /// ML-KEM-768.
    MlKem768,
}

impl KemAlgorithm {
    pub fn id(self) -> u16 {
        match self {
            KemAlgorithm::TestKem => 1,
            KemAlgorithm::MlKem768 => 2,
        }
    }

    pub fn from_id(id: u16) -> Option<KemAlgorithm> {
        match id {
            1 => Some(KemAlgorithm::TestKem),
            2 => Some(KemAlgorithm::MlKem768),
            _ => None,
        }
    }

    /// Exact byte length of a lockbox field for this algorithm:
    /// KEM ciphertext plus the masked 32-byte content key.
    pub fn field_len(self) -> usize {
        match self {
            KemAlgorithm::TestKem => TEST_CT_BYTES + CONTENT_KEY_BYTES,
            KemAlgorithm::MlKem768 => MLKEM_CT_BYTES + CONTENT_KEY_BYTES,
        }
    }
}

impl std::fmt::Display for KemAlgorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KemAlgorithm::TestKem => write!(f, "test-kem"),
            KemAlgorithm::MlKem768 => write!(f, "ml-kem-768"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KemPublicKey {
    pub alg: KemAlgorithm,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KemSecretKey {
    pub alg: KemAlgorithm,
    pub bytes: Vec<u8>,
}

/// Generate a key pair for `alg` from the caller's randomness, so fixture
/// keys are reproducible from a seed.
pub fn generate<R: RngCore + CryptoRng>(alg: KemAlgorithm, rng: &mut R) -> (KemPublicKey, KemSecretKey) {
    match alg {
        KemAlgorithm::TestKem => {
            let mut key = vec![0u8; TEST_KEY_BYTES];
            rng.fill_bytes(&mut key);
            (
                KemPublicKey { alg, bytes: key.clone() },
                KemSecretKey { alg, bytes: key },
            )
        }
        KemAlgorithm::MlKem768 => {
            let (dk, ek) = MlKem768::generate(rng);
            (
                KemPublicKey { alg, bytes: ek.as_bytes().to_vec() },
                KemSecretKey { alg, bytes: dk.as_bytes().to_vec() },
            )
        }
    }
}

/// Mask derivation: hash the shared secret into a 32-byte pad.
fn key_mask(shared: &[u8]) -> [u8; CONTENT_KEY_BYTES] {
    let mut h = Sha384::new();
    h.update(b"lockbox-wrap-v1");
    h.update(shared);
    let digest = h.finalize();
    let mut mask = [0u8; CONTENT_KEY_BYTES];
    mask.copy_from_slice(&digest[..CONTENT_KEY_BYTES]);
    mask
}

fn test_kem_shared(key: &[u8], ct: &[u8]) -> Vec<u8> {
    let mut h = Sha384::new();
    h.update(b"test-kem-shared-v1");
    h.update(key);
    h.update(ct);
    h.finalize().to_vec()
}

/// Produce the lockbox field carrying `content_key` to the holder of the
/// secret key matching `public`. The field is exactly
/// [`KemAlgorithm::field_len`] bytes.
pub fn wrap_key<R: RngCore + CryptoRng>(
    public: &KemPublicKey,
    content_key: &[u8; CONTENT_KEY_BYTES],
    rng: &mut R,
) -> Vec<u8> {
    let (ct, shared): (Vec<u8>, Vec<u8>) = match public.alg {
        KemAlgorithm::TestKem => {
            assert_eq!(public.bytes.len(), TEST_KEY_BYTES, "test KEM public key is 32 bytes");
            let mut ct = vec![0u8; TEST_CT_BYTES];
            rng.fill_bytes(&mut ct);
            let shared = test_kem_shared(&public.bytes, &ct);
            (ct, shared)
        }
        KemAlgorithm::MlKem768 => {
            assert_eq!(public.bytes.len(), MLKEM_EK_BYTES, "encapsulation key is 1184 bytes");
            let encoded = Encoded::<<MlKem768 as KemCore>::EncapsulationKey>::try_from(
                public.bytes.as_slice(),
            )
            .expect("length checked above");
            let ek = <MlKem768 as KemCore>::EncapsulationKey::from_bytes(&encoded);
            let (ct, shared) = ek.encapsulate(rng).expect("encapsulation is infallible");
            (ct.to_vec(), shared.to_vec())
        }
    };
    let mask = key_mask(&shared);
    let mut field = ct;
    field.extend(content_key.iter().zip(mask.iter()).map(|(k, m)| k ^ m));
    field
}

/// Recover the content key from a lockbox field. Returns `None` only for
/// structurally wrong input (field length, key length); a *wrong but
/// well-formed* key yields a garbage content key by design — the content
/// cipher's authentication is what rejects it.
pub fn unwrap_key(secret: &KemSecretKey, field: &[u8]) -> Option<[u8; CONTENT_KEY_BYTES]> {
    if field.len() != secret.alg.field_len() {
        return None;
    }
    let (ct, masked) = field.split_at(field.len() - CONTENT_KEY_BYTES);
    let shared: Vec<u8> = match secret.alg {
        KemAlgorithm::TestKem => {
            if secret.bytes.len() != TEST_KEY_BYTES {
                return None;
            }
            test_kem_shared(&secret.bytes, ct)
        }
        KemAlgorithm::MlKem768 => {
            if secret.bytes.len() != MLKEM_DK_BYTES {
                return None;
            }
            let encoded = Encoded::<<MlKem768 as KemCore>::DecapsulationKey>::try_from(
                secret.bytes.as_slice(),
            )
            .ok()?;
            let dk = <MlKem768 as KemCore>::DecapsulationKey::from_bytes(&encoded);
            let ct_arr = ml_kem::Ciphertext::<MlKem768>::try_from(ct).ok()?;
            dk.decapsulate(&ct_arr).ok()?.to_vec()
        }
    };
    let mask = key_mask(&shared);
    let mut key = [0u8; CONTENT_KEY_BYTES];
    for (i, (c, m)) in masked.iter().zip(mask.iter()).enumerate() {
        key[i] = c ^ m;
    }
    Some(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(7)
    }

    #[test]
    fn test_kem_round_trips_content_key() {
        let mut r = rng();
        let (pk, sk) = generate(KemAlgorithm::TestKem, &mut r);
        assert_eq!(pk.bytes, sk.bytes);
        let content = [0xABu8; 32];
        let field = wrap_key(&pk, &content, &mut r);
        assert_eq!(field.len(), KemAlgorithm::TestKem.field_len());
        assert_eq!(unwrap_key(&sk, &field), Some(content));
    }

    #[test]
    fn ml_kem_round_trips_content_key() {
        let mut r = rng();
        let (pk, sk) = generate(KemAlgorithm::MlKem768, &mut r);
        assert_eq!(pk.bytes.len(), MLKEM_EK_BYTES);
        assert_eq!(sk.bytes.len(), MLKEM_DK_BYTES);
        let content = [0x11u8; 32];
        let field = wrap_key(&pk, &content, &mut r);
        assert_eq!(field.len(), 1120);
        assert_eq!(unwrap_key(&sk, &field), Some(content));
    }

    #[test]
    fn wrong_key_unwraps_to_garbage_not_error() {
        let mut r = rng();
        let (pk, _) = generate(KemAlgorithm::TestKem, &mut r);
        let (_, other_sk) = generate(KemAlgorithm::TestKem, &mut r);
        let content = [0x42u8; 32];
        let field = wrap_key(&pk, &content, &mut r);
        let unwrapped = unwrap_key(&other_sk, &field).unwrap();
        assert_ne!(unwrapped, content);
    }

    #[test]
    fn wrong_field_length_is_structural_none() {
        let mut r = rng();
        let (_, sk) = generate(KemAlgorithm::TestKem, &mut r);
        assert_eq!(unwrap_key(&sk, &[0u8; 63]), None);
        let (_, mk) = generate(KemAlgorithm::MlKem768, &mut r);
        assert_eq!(unwrap_key(&mk, &[0u8; 64]), None);
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let (pk1, _) = generate(KemAlgorithm::MlKem768, &mut rng());
        let (pk2, _) = generate(KemAlgorithm::MlKem768, &mut rng());
        assert_eq!(pk1, pk2);
    }
}

// SPDX-License-Identifier: Apache-2.0

//! Local attestation: boot measurements and the sealed attestation payload.
//!
//! # Measurements
//!
//! Three SHA-384 registers capture what was promoted:
//!
//! * **code+data** — over the normalized page list: each non-zero 4 KiB
//!   guest page contributes its guest page number (8 bytes big-endian)
//!   followed by its 4096 content bytes, in ascending guest-physical
//!   order. Normalization makes the register independent of how the
//!   hypervisor chose leaf sizes.
//! * **device tree** — over the exact device-tree blob handed to
//!   promotion.
//! * **boot state** — over the 304-byte canonical encoding of the boot
//!   processor state.
//!
//! # Sealed payload
//!
//! The owner seals expected measurements and secrets into a binary blob
//! the security manager can open without any network: a content key
//! encrypted to each allowed recipient (the "lockboxes"), then the payload
//! under AES-256-GCM. All integers are big-endian:
//!
//! ```text
//! "ATAP" | u16 version=1 | u16 lockbox count
//! per lockbox: u16 algorithm id | u16 field length | field
//! nonce (12 bytes) | u32 ciphertext length | ciphertext+tag
//! ```
//!
//! The plaintext payload is canonical:
//!
//! ```text
//! code+data (48) | device tree (48) | boot state (48)
//! u32 secret count
//! per secret: u64 index | u32 length | bytes   (indices strictly ascending)
//! ```
//!
//! Unsealing tries every lockbox whose algorithm matches a held key. A
//! missing match is `NoMatchingLockbox`; a match that fails to open —
//! wrong key or any single-bit tamper of nonce, ciphertext, or tag — is
//! `AuthFailure`. Parsing is strict: unknown magic or version, truncated
//! fields, or trailing bytes are `Parse` errors before any key is tried.

use aes_gcm::aead::{Aead, KeyInit};
use aes_gcm::{Aes256Gcm, Key, Nonce};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha384};

use crate::gstage::MeasuredPage;
use crate::hart::CANONICAL_STATE_BYTES;
use crate::kem::{self, KemAlgorithm, KemPublicKey, KemSecretKey, CONTENT_KEY_BYTES};

/// SHA-384 digest size.
pub const PCR_BYTES: usize = 48;
pub const TAP_MAGIC: &[u8; 4] = b"ATAP";
pub const TAP_VERSION: u16 = 1;
pub const NONCE_BYTES: usize = 12;
const GCM_TAG_BYTES: usize = 16;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TapError {
    #[error("attestation payload parse error: {0}")]
    Parse(&'static str),
    #[error("no lockbox matches a held key")]
    NoMatchingLockbox,
    #[error("attestation payload failed authentication")]
    AuthFailure,
}

pub type Result<T> = std::result::Result<T, TapError>;

/// The three boot measurement registers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Measurements {
    pub code_data: [u8; PCR_BYTES],
    pub fdt: [u8; PCR_BYTES],
    pub boot_state: [u8; PCR_BYTES],
}

impl Measurements {
    /// Compute all three registers from promotion inputs. `pages` must be
    /// the walker's output: non-zero 4 KiB pages ascending by address.
    pub fn compute(
        pages: &[MeasuredPage],
        fdt_blob: &[u8],
        boot_state: &[u8; CANONICAL_STATE_BYTES],
    ) -> Measurements {
        Measurements {
            code_data: measure_pages(pages),
            fdt: sha384(fdt_blob),
            boot_state: sha384(boot_state),
        }
    }
}

/// The code+data register over the normalized page list.
pub fn measure_pages(pages: &[MeasuredPage]) -> [u8; PCR_BYTES] {
    let mut h = Sha384::new();
    let mut last: Option<u64> = None;
    for page in pages {
        if let Some(prev) = last {
            assert!(page.gpn > prev, "measured pages must ascend strictly");
        }
        last = Some(page.gpn);
        debug_assert_eq!(page.bytes.len(), 4096);
        h.update(page.gpn.to_be_bytes());
        h.update(&page.bytes);
    }
    h.finalize().into()
}

fn sha384(data: &[u8]) -> [u8; PCR_BYTES] {
    Sha384::digest(data).into()
}

/// One sealed secret: an owner-chosen index and its bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecretEntry {
    pub index: u64,
    pub value: Vec<u8>,
}

/// What the owner seals and the security manager recovers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapPayload {
    pub measurements: Measurements,
    pub secrets: Vec<SecretEntry>,
}

/// Header facts readable without any key (for inspection tooling).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapSummary {
    pub version: u16,
    /// (algorithm id, field length) per lockbox, in order.
    pub lockboxes: Vec<(u16, u16)>,
    pub ciphertext_len: u32,
}

/// Seal `payload` to `recipients`. Secrets are canonicalized to strictly
/// ascending index order; duplicate indices are a caller bug.
///
/// # Panics
/// If `recipients` is empty, a secret index repeats, or a secret is longer
/// than `u32::MAX` bytes.
pub fn seal<R: RngCore + CryptoRng>(
    payload: &TapPayload,
    recipients: &[KemPublicKey],
    rng: &mut R,
) -> Vec<u8> {
    assert!(!recipients.is_empty(), "a sealed payload needs at least one recipient");

    let mut secrets = payload.secrets.clone();
    secrets.sort_by_key(|s| s.index);
    for pair in secrets.windows(2) {
        assert!(pair[0].index < pair[1].index, "secret indices must be unique");
    }

    let mut plain = Vec::new();
    plain.extend_from_slice(&payload.measurements.code_data);
    plain.extend_from_slice(&payload.measurements.fdt);
    plain.extend_from_slice(&payload.measurements.boot_state);
    plain.extend_from_slice(&u32::try_from(secrets.len()).expect("secret count fits u32").to_be_bytes());
    for s in &secrets {
        plain.extend_from_slice(&s.index.to_be_bytes());
        plain.extend_from_slice(&u32::try_from(s.value.len()).expect("secret fits u32").to_be_bytes());
        plain.extend_from_slice(&s.value);
    }

    let mut content_key = [0u8; CONTENT_KEY_BYTES];
    rng.fill_bytes(&mut content_key);
    let mut nonce = [0u8; NONCE_BYTES];
    rng.fill_bytes(&mut nonce);

    let cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(&content_key));
    let ciphertext = cipher
        .encrypt(Nonce::from_slice(&nonce), plain.as_slice())
        .expect("encryption is infallible");

    let mut out = Vec::new();
    out.extend_from_slice(TAP_MAGIC);
    out.extend_from_slice(&TAP_VERSION.to_be_bytes());
    out.extend_from_slice(&u16::try_from(recipients.len()).expect("recipient count fits u16").to_be_bytes());
    for pk in recipients {
        let field = kem::wrap_key(pk, &content_key, rng);
        out.extend_from_slice(&pk.alg.id().to_be_bytes());
        out.extend_from_slice(&u16::try_from(field.len()).expect("field fits u16").to_be_bytes());
        out.extend_from_slice(&field);
    }
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&u32::try_from(ciphertext.len()).expect("ciphertext fits u32").to_be_bytes());
    out.extend_from_slice(&ciphertext);
    out
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(TapError::Parse(what));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.data.len()
    }
}

struct ParsedTap<'a> {
    summary: TapSummary,
    lockbox_fields: Vec<(u16, &'a [u8])>,
    nonce: &'a [u8],
    ciphertext: &'a [u8],
}

fn parse(tap: &[u8]) -> Result<ParsedTap<'_>> {
    let mut r = Reader { data: tap, pos: 0 };
    if r.take(4, "truncated magic")? != TAP_MAGIC {
        return Err(TapError::Parse("bad magic"));
    }
    let version = r.u16("truncated version")?;
    if version != TAP_VERSION {
        return Err(TapError::Parse("unsupported version"));
    }
    let count = r.u16("truncated lockbox count")?;
    if count == 0 {
        return Err(TapError::Parse("no lockboxes"));
    }
    let mut lockboxes = Vec::new();
    let mut fields = Vec::new();
    for _ in 0..count {
        let alg = r.u16("truncated lockbox algorithm")?;
        let len = r.u16("truncated lockbox length")?;
        let field = r.take(len as usize, "truncated lockbox field")?;
        lockboxes.push((alg, len));
        fields.push((alg, field));
    }
    let nonce = r.take(NONCE_BYTES, "truncated nonce")?;
    let ct_len = r.u32("truncated ciphertext length")?;
    if (ct_len as usize) < GCM_TAG_BYTES {
        return Err(TapError::Parse("ciphertext shorter than its tag"));
    }
    let ciphertext = r.take(ct_len as usize, "truncated ciphertext")?;
    if !r.done() {
        return Err(TapError::Parse("trailing bytes"));
    }
    Ok(ParsedTap {
        summary: TapSummary { version, lockboxes, ciphertext_len: ct_len },
        lockbox_fields: fields,
        nonce,
        ciphertext,
    })
}

/// Read the envelope without opening it. Never touches key material.
pub fn inspect(tap: &[u8]) -> Result<TapSummary> {
    Ok(parse(tap)?.summary)
}

/// Open a sealed payload with any of the held keys.
pub fn unseal(tap: &[u8], keys: &[KemSecretKey]) -> Result<TapPayload> {
    let parsed = parse(tap)?;
    let mut tried_any = false;
    for &(alg_id, field) in &parsed.lockbox_fields {
        let Some(alg) = KemAlgorithm::from_id(alg_id) else { continue };
        for key in keys.iter().filter(|k| k.alg == alg) {
            let Some(content_key) = kem::unwrap_key(key, field) else { continue };
            tried_any = true;
            let cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(&content_key));
            if let Ok(plain) = cipher.decrypt(Nonce::from_slice(parsed.nonce), parsed.ciphertext) {
                return parse_payload(&plain);
            }
        }
    }
    if tried_any {
        Err(TapError::AuthFailure)
    } else {
        Err(TapError::NoMatchingLockbox)
    }
}

fn parse_payload(plain: &[u8]) -> Result<TapPayload> {
    let mut r = Reader { data: plain, pos: 0 };
    let code_data: [u8; PCR_BYTES] = r.take(PCR_BYTES, "truncated code+data register")?.try_into().unwrap();
    let fdt: [u8; PCR_BYTES] = r.take(PCR_BYTES, "truncated device-tree register")?.try_into().unwrap();
    let boot_state: [u8; PCR_BYTES] = r.take(PCR_BYTES, "truncated boot-state register")?.try_into().unwrap();
    let count = r.u32("truncated secret count")?;
    let mut secrets = Vec::new();
    let mut last: Option<u64> = None;
    for _ in 0..count {
        let index = r.u64("truncated secret index")?;
        if let Some(prev) = last {
            if index <= prev {
                return Err(TapError::Parse("secret indices not strictly ascending"));
            }
        }
        last = Some(index);
        let len = r.u32("truncated secret length")?;
        let value = r.take(len as usize, "truncated secret value")?.to_vec();
        secrets.push(SecretEntry { index, value });
    }
    if !r.done() {
        return Err(TapError::Parse("trailing bytes in payload"));
    }
    Ok(TapPayload {
        measurements: Measurements { code_data, fdt, boot_state },
        secrets,
    })
}

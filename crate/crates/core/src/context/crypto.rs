//! Passphrase sealing of context bodies.
//!
//! Blob layout:
//!
//! ```text
//! magic "CVC1" (4) | kdf id (1) | log2 memory KiB (1) | iterations (1) | lanes (1)
//!   | salt (16) | nonce (24) | ciphertext + tag
//! ```
//!
//! The key comes from Argon2id over the passphrase and salt; the cipher is
//! XChaCha20-Poly1305 with the whole header as associated data. Any failure
//! to open a blob, including a malformed header, is reported as
//! [`Error::BadPassphrase`].

use argon2::{Algorithm, Argon2, Params, Version};
use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{XChaCha20Poly1305, XNonce};
use rand::RngCore;

use super::Sections;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CVC1";
const KDF_ARGON2ID: u8 = 1;
const SALT_LEN: usize = 16;
const NONCE_LEN: usize = 24;
const HEADER_LEN: usize = 4 + 4 + SALT_LEN + NONCE_LEN;
const TAG_LEN: usize = 16;

const MIN_LOG2_MEM: u8 = 3;
const MAX_LOG2_MEM: u8 = 18;
const MAX_ITERATIONS: u8 = 16;
const MAX_LANES: u8 = 4;

/// Argon2id cost parameters. They travel inside every blob, so raising the
/// defaults later does not break existing contexts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KdfParams {
    pub log2_mem_kib: u8,
    pub iterations: u8,
    pub lanes: u8,
}

impl Default for KdfParams {
    /// 16 MiB, 3 passes, 1 lane.
    fn default() -> Self {
        Self {
            log2_mem_kib: 14,
            iterations: 3,
            lanes: 1,
        }
    }
}

impl KdfParams {
    /// Cheap parameters for bulk tests and demos.
    pub fn interactive_test() -> Self {
        Self {
            log2_mem_kib: 8,
            iterations: 1,
            lanes: 1,
        }
    }

    fn in_bounds(&self) -> bool {
        (MIN_LOG2_MEM..=MAX_LOG2_MEM).contains(&self.log2_mem_kib)
            && (1..=MAX_ITERATIONS).contains(&self.iterations)
            && (1..=MAX_LANES).contains(&self.lanes)
            && (1u32 << self.log2_mem_kib) >= 8 * self.lanes as u32
    }

    fn derive_key(&self, passphrase: &str, salt: &[u8]) -> Result<[u8; 32]> {
        let params = Params::new(
            1u32 << self.log2_mem_kib,
            self.iterations as u32,
            self.lanes as u32,
            Some(32),
        )
        .map_err(|_| Error::BadPassphrase)?;
        let mut key = [0u8; 32];
        Argon2::new(Algorithm::Argon2id, Version::V0x13, params)
            .hash_password_into(passphrase.as_bytes(), salt, &mut key)
            .map_err(|_| Error::BadPassphrase)?;
        Ok(key)
    }
}

pub fn encrypt_body(sections: &Sections, passphrase: &str, params: KdfParams) -> Result<Vec<u8>> {
    if passphrase.is_empty() {
        return Err(Error::InvalidValue("passphrase must not be empty".into()));
    }
    if !params.in_bounds() {
        return Err(Error::InvalidValue("kdf parameters out of range".into()));
    }
    let mut rng = rand::rng();
    let mut salt = [0u8; SALT_LEN];
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut salt);
    rng.fill_bytes(&mut nonce);

    let mut blob = Vec::with_capacity(HEADER_LEN + 64);
    blob.extend_from_slice(MAGIC);
    blob.extend_from_slice(&[KDF_ARGON2ID, params.log2_mem_kib, params.iterations, params.lanes]);
    blob.extend_from_slice(&salt);
    blob.extend_from_slice(&nonce);

    let key = params.derive_key(passphrase, &salt)?;
    let plaintext = serde_json::to_vec(sections).map_err(|e| Error::Internal(e.to_string()))?;
    let cipher = XChaCha20Poly1305::new(&key.into());
    let sealed = cipher
        .encrypt(
            XNonce::from_slice(&nonce),
            Payload {
                msg: &plaintext,
                aad: &blob,
            },
        )
        .map_err(|_| Error::Internal("encryption failed".into()))?;
    blob.extend_from_slice(&sealed);
    Ok(blob)
}

pub fn decrypt_body(blob: &[u8], passphrase: &str) -> Result<Sections> {
    if blob.len() < HEADER_LEN + TAG_LEN || &blob[..4] != MAGIC || blob[4] != KDF_ARGON2ID {
        return Err(Error::BadPassphrase);
    }
    let params = KdfParams {
        log2_mem_kib: blob[5],
        iterations: blob[6],
        lanes: blob[7],
    };
    if !params.in_bounds() {
        return Err(Error::BadPassphrase);
    }
    let salt = &blob[8..8 + SALT_LEN];
    let nonce = &blob[8 + SALT_LEN..HEADER_LEN];
    let key = params.derive_key(passphrase, salt)?;
    let cipher = XChaCha20Poly1305::new(&key.into());
    let plaintext = cipher
        .decrypt(
            XNonce::from_slice(nonce),
            Payload {
                msg: &blob[HEADER_LEN..],
                aad: &blob[..HEADER_LEN],
            },
        )
        .map_err(|_| Error::BadPassphrase)?;
    serde_json::from_slice(&plaintext).map_err(|_| Error::BadPassphrase)
}

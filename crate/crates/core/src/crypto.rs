// SPDX-License-Identifier: Apache-2.0

//! Software stand-ins for the secure element's hardware primitives.
//!
//! - digest: SHA-256
//! - keyed digest: HMAC-SHA-256
//! - AEAD: ChaCha20-Poly1305 (12-byte nonce, 16-byte tag), framed as
//!   `nonce || ciphertext || tag`
//! - signature: Ed25519, deterministic

use chacha20poly1305::aead::Aead;
use chacha20poly1305::{ChaCha20Poly1305, KeyInit};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use hmac::{Hmac, Mac};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub type Digest = [u8; 32];
pub type Key = [u8; 32];

pub const DIGEST_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const AEAD_OVERHEAD: usize = NONCE_LEN + TAG_LEN;
pub const SIGNATURE_LEN: usize = 64;
pub const PUBLIC_KEY_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("authentication tag mismatch")]
    AuthFailure,
    #[error("sealed frame shorter than nonce and tag")]
    Truncated,
    #[error("malformed public key")]
    BadPublicKey,
}

pub fn digest(data: &[u8]) -> Digest {
    Sha256::digest(data).into()
}

/// Digest of the concatenation of `parts`.
pub fn digest_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

pub fn keyed_digest(key: &[u8], message: &[u8]) -> Digest {
    let mut mac = <Hmac<Sha256> as KeyInit>::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(message);
    mac.finalize().into_bytes().into()
}

/// Encrypts `plaintext`, returning `nonce || ciphertext || tag`.
pub fn aead_seal(key: &Key, nonce: &[u8; NONCE_LEN], plaintext: &[u8]) -> Vec<u8> {
    let cipher = ChaCha20Poly1305::new(key.into());
    let body = cipher.encrypt(nonce.into(), plaintext).expect("in-memory AEAD encryption");
    let mut out = Vec::with_capacity(NONCE_LEN + body.len());
    out.extend_from_slice(nonce);
    out.extend_from_slice(&body);
    out
}

/// Inverse of [`aead_seal`]; verifies the tag before releasing plaintext.
pub fn aead_open(key: &Key, sealed: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if sealed.len() < AEAD_OVERHEAD {
        return Err(CryptoError::Truncated);
    }
    let (nonce, body) = sealed.split_at(NONCE_LEN);
    let nonce: [u8; NONCE_LEN] = nonce.try_into().expect("split at nonce length");
    ChaCha20Poly1305::new(key.into())
        .decrypt(&nonce.into(), body)
        .map_err(|_| CryptoError::AuthFailure)
}

pub fn public_key(signing_seed: &Key) -> [u8; PUBLIC_KEY_LEN] {
    SigningKey::from_bytes(signing_seed).verifying_key().to_bytes()
}

pub fn sign(signing_seed: &Key, message: &[u8]) -> [u8; SIGNATURE_LEN] {
    SigningKey::from_bytes(signing_seed).sign(message).to_bytes()
}

pub fn verify(public: &[u8; PUBLIC_KEY_LEN], message: &[u8], signature: &[u8; SIGNATURE_LEN]) -> Result<bool, CryptoError> {
    let key = VerifyingKey::from_bytes(public).map_err(|_| CryptoError::BadPublicKey)?;
    Ok(key.verify(message, &Signature::from_bytes(signature)).is_ok())
}

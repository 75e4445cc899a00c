// SPDX-License-Identifier: Apache-2.0

//! DICE measured boot over the EPA -> CE -> RE chain.
//!
//! Each layer is measured, checked against its expected measurement and
//! the vendor signature over that measurement, and only then folded into
//! the compound device identifier:
//!
//! ```text
//! cdi_0 = HMAC(uds,       m_0)    m_0 = H(code_epa || H(memory map))
//! cdi_i = HMAC(cdi_{i-1}, m_i)    m_i = H(code_i)
//! ```
//!
//! CDIs never leave this module except as 4-byte fingerprints; the crypto
//! enclave's sealing key is derived from the last one.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, Digest, Key, PUBLIC_KEY_LEN, SIGNATURE_LEN};
use crate::machine::Memory;

const SEAL_LABEL: &[u8] = b"xine-seal-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BootLayer {
    Epa,
    Ce,
    Re,
}

impl BootLayer {
    pub const CHAIN: [BootLayer; 3] = [BootLayer::Epa, BootLayer::Ce, BootLayer::Re];

    pub fn name(self) -> &'static str {
        match self {
            BootLayer::Epa => "epa",
            BootLayer::Ce => "ce",
            BootLayer::Re => "re",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::CHAIN.into_iter().find(|l| l.name() == s)
    }
}

impl fmt::Display for BootLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum BootError {
    #[error("boot image `{0}` has no code")]
    EmptyImage(BootLayer),
}

#[derive(Clone, PartialEq, Eq)]
pub struct BootImage {
    layer: BootLayer,
    code: Vec<u8>,
    pub expected_measurement: Digest,
    pub signature: [u8; SIGNATURE_LEN],
    pub signer: String,
}

impl fmt::Debug for BootImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BootImage")
            .field("layer", &self.layer)
            .field("code_len", &self.code.len())
            .field("expected_measurement", &hex::encode(self.expected_measurement))
            .field("signer", &self.signer)
            .finish()
    }
}

impl BootImage {
    pub fn new(
        layer: BootLayer,
        code: Vec<u8>,
        expected_measurement: Digest,
        signature: [u8; SIGNATURE_LEN],
        signer: impl Into<String>,
    ) -> Result<Self, BootError> {
        if code.is_empty() {
            return Err(BootError::EmptyImage(layer));
        }
        Ok(Self { layer, code, expected_measurement, signature, signer: signer.into() })
    }

    pub fn layer(&self) -> BootLayer {
        self.layer
    }

    pub fn code(&self) -> &[u8] {
        &self.code
    }

    /// Test hook for tamper experiments.
    pub fn code_mut(&mut self) -> &mut Vec<u8> {
        &mut self.code
    }
}

/// Digest of the image code alone.
pub fn measure(image: &BootImage) -> Digest {
    crypto::digest(&image.code)
}

/// Canonical text form of the memory map folded into layer 0.
///
/// One line per region: `<label> <kind> <base:#010x> <size:#x>\n`.
pub fn memory_map_bytes(mem: &Memory) -> Vec<u8> {
    let mut out = String::new();
    for r in mem.regions() {
        let kind = serde_json::to_value(r.kind).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        out.push_str(&format!("{} {} {:#010x} {:#x}\n", r.label, kind, r.region.base.0, r.region.size));
    }
    out.into_bytes()
}

/// Measurement of a chain layer. Layer 0 also covers the platform
/// configuration digest.
pub fn measure_layer(image: &BootImage, config_digest: &Digest) -> Digest {
    match image.layer {
        BootLayer::Epa => crypto::digest_parts(&[&image.code, config_digest]),
        _ => measure(image),
    }
}

/// A compound device identifier. Debug output is redacted.
#[derive(Clone, PartialEq, Eq)]
pub struct Cdi(Key);

impl fmt::Debug for Cdi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Cdi(fp={})", hex::encode(self.fingerprint()))
    }
}

impl Cdi {
    /// First four bytes of `H(cdi)`; the only form that reaches traces.
    pub fn fingerprint(&self) -> [u8; 4] {
        crypto::digest(&self.0)[..4].try_into().expect("digest is 32 bytes")
    }

    pub fn expose_secret(&self) -> &Key {
        &self.0
    }

    pub fn sealing_key(&self) -> Key {
        crypto::keyed_digest(&self.0, SEAL_LABEL)
    }
}

/// `HMAC(parent, measurement)`; `parent` is the UDS for layer 0.
pub fn derive_cdi(parent: &Key, measurement: &Digest) -> Cdi {
    Cdi(crypto::keyed_digest(parent, measurement))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BootFailure {
    MeasurementMismatch,
    BadSignature,
    UnknownSigner,
    WrongLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum BootOutcome {
    Booted,
    Failed { layer: BootLayer, reason: BootFailure },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: BootLayer,
    #[serde(with = "hex::serde")]
    pub measurement: Digest,
    pub cdi_fingerprint: Option<String>,
    pub verified: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootReport {
    pub layers: Vec<LayerRecord>,
    pub outcome: BootOutcome,
}

impl BootReport {
    pub fn booted(&self) -> bool {
        self.outcome == BootOutcome::Booted
    }
}

/// Result of a chain run: the public report plus, on success, the sealing
/// key destined for the SE's key slot.
#[derive(Clone, Debug)]
pub struct BootResult {
    pub report: BootReport,
    pub(crate) sealing_key: Option<Key>,
}

pub type PublicKeys = BTreeMap<String, [u8; PUBLIC_KEY_LEN]>;

/// Measures, verifies and chains `images`, which must be EPA, CE, RE in
/// that order. Stops at the first failing layer.
pub fn boot_chain(uds: &Key, images: &[BootImage], pubkeys: &PublicKeys, memory_map: &[u8]) -> BootResult {
    let config_digest = crypto::digest(memory_map);
    let mut layers = Vec::new();
    let mut parent: Option<Cdi> = None;
    for (position, expected_layer) in BootLayer::CHAIN.into_iter().enumerate() {
        let Some(image) = images.get(position).filter(|i| i.layer == expected_layer) else {
            return BootResult {
                report: BootReport { layers, outcome: BootOutcome::Failed { layer: expected_layer, reason: BootFailure::WrongLayer } },
                sealing_key: None,
            };
        };
        let measurement = measure_layer(image, &config_digest);
        let failure = if measurement != image.expected_measurement {
            Some(BootFailure::MeasurementMismatch)
        } else {
            match pubkeys.get(&image.signer) {
                None => Some(BootFailure::UnknownSigner),
                Some(pk) => match crypto::verify(pk, &image.expected_measurement, &image.signature) {
                    Ok(true) => None,
                    Ok(false) | Err(_) => Some(BootFailure::BadSignature),
                },
            }
        };
        if let Some(reason) = failure {
            layers.push(LayerRecord { layer: expected_layer, measurement, cdi_fingerprint: None, verified: false });
            return BootResult {
                report: BootReport { layers, outcome: BootOutcome::Failed { layer: expected_layer, reason } },
                sealing_key: None,
            };
        }
        let cdi = derive_cdi(parent.as_ref().map_or(uds, |p| &p.0), &measurement);
        layers.push(LayerRecord {
            layer: expected_layer,
            measurement,
            cdi_fingerprint: Some(hex::encode(cdi.fingerprint())),
            verified: true,
        });
        parent = Some(cdi);
    }
    if images.len() != BootLayer::CHAIN.len() {
        return BootResult {
            report: BootReport { layers, outcome: BootOutcome::Failed { layer: BootLayer::Re, reason: BootFailure::WrongLayer } },
            sealing_key: None,
        };
    }
    BootResult {
        report: BootReport { layers, outcome: BootOutcome::Booted },
        sealing_key: parent.map(|cdi| cdi.sealing_key()),
    }
}

/// Renders measurements in the `*.measurements` golden-file format:
/// `<layer> <hex digest>\n` per layer.
pub fn measurements_file(report: &BootReport) -> String {
    report
        .layers
        .iter()
        .map(|l| format!("{} {}\n", l.layer, hex::encode(l.measurement)))
        .collect()
}

/// Parses a `*.measurements` file.
pub fn parse_measurements(text: &str) -> Result<BTreeMap<BootLayer, Digest>, String> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, digest) = line.split_once(char::is_whitespace).ok_or_else(|| format!("line {}: expected `<layer> <hex>`", n + 1))?;
        let layer = BootLayer::from_name(name).ok_or_else(|| format!("line {}: unknown layer `{name}`", n + 1))?;
        let bytes = hex::decode(digest.trim()).map_err(|e| format!("line {}: {e}", n + 1))?;
        let digest: Digest = bytes.try_into().map_err(|_| format!("line {}: digest must be 32 bytes", n + 1))?;
        out.insert(layer, digest);
    }
    Ok(out)
}

// SPDX-License-Identifier: Apache-2.0

//! Scenario configuration: JSON on disk, resolved and validated in one go.
//!
//! Numbers that name addresses or sizes may be written as JSON integers or
//! as strings (`"0x2000_8000"` style hex, or decimal). File references are
//! resolved relative to the config file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boot::{parse_measurements, BootImage, BootLayer, PublicKeys};
use crate::crypto::{Key, PUBLIC_KEY_LEN, SIGNATURE_LEN};
use crate::enclaves::{layout_errors, EnclaveDescriptor, EnclaveId, EnclaveKind, LayoutError};
use crate::epa::DEFAULT_STEP_BUDGET;
use crate::machine::{MemRegion, Memory, PhysAddr, Region, RegionKind};
use crate::se::EfuseStore;
use crate::workload::Assembler;

use super::assertions::Assertion;

/// Address or size: a JSON integer or a numeric string.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct Num(pub u64);

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(n) => Ok(Num(n)),
            Raw::Text(s) => parse_num(&s).map(Num).ok_or_else(|| de::Error::custom(format!("bad number `{s}`"))),
        }
    }
}

fn parse_num(s: &str) -> Option<u64> {
    let s = s.trim().replace('_', "");
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => s.parse().ok(),
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawRegion {
    pub label: String,
    pub kind: RegionKind,
    pub base: Num,
    pub size: Num,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawSpan {
    pub base: Num,
    pub size: Num,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawEnclave {
    pub name: String,
    pub kind: EnclaveKind,
    pub base: Num,
    pub size: Num,
    #[serde(default)]
    pub entry: Option<Num>,
    /// Path to a listing file.
    #[serde(default)]
    pub program: Option<String>,
    /// Inline listing.
    #[serde(default)]
    pub listing: Option<String>,
    #[serde(default)]
    pub receive_buffer: Option<RawSpan>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawImage {
    pub layer: BootLayer,
    pub path: String,
    /// Hex signature over the expected measurement.
    pub signature: String,
    pub signer: String,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawBoot {
    pub images: Vec<RawImage>,
    /// Signer id -> hex public key.
    pub pubkeys: BTreeMap<String, String>,
    /// Path of the golden `*.measurements` file holding expected values.
    pub measurements: String,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawEfuse {
    pub uds: String,
    #[serde(default)]
    pub keys: BTreeMap<String, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct InterruptSpec {
    pub at_step: u64,
    pub line: u32,
}

/// Hands the named enclave's outbound buffer to the cloud when it exits,
/// and writes the one-byte verdict back into its region.
#[derive(Clone, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct UplinkSpec {
    pub enclave: String,
    pub addr: Num,
    pub len: Num,
    pub response_addr: Num,
}

/// Flips one bit of memory right after the named enclave exits.
#[derive(Clone, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub after_exit: String,
    pub addr: Num,
    pub bit: u8,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub step_budget: Option<u64>,
    pub memory: Vec<RawRegion>,
    pub enclaves: Vec<RawEnclave>,
    pub boot: RawBoot,
    pub efuse: RawEfuse,
    /// Allowed DMA edges as `[src, dst]` enclave names.
    #[serde(default)]
    pub dma_policy: Vec<[String; 2]>,
    #[serde(default)]
    pub interrupts: Vec<InterruptSpec>,
    #[serde(default)]
    pub uplink: Option<UplinkSpec>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ConfigIssue {
    #[error(transparent)]
    Layout(LayoutError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{} validation error(s):\n{}", .0.len(), ValidationList(.0))]
    Validation(Vec<ConfigIssue>),
}

struct ValidationList<'a>(&'a [ConfigIssue]);

impl fmt::Display for ValidationList<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for issue in self.0 {
            writeln!(f, "  - {issue}")?;
        }
        Ok(())
    }
}

impl ConfigError {
    pub fn issues(&self) -> &[ConfigIssue] {
        match self {
            ConfigError::Validation(v) => v,
            _ => &[],
        }
    }
}

/// A fully resolved, validated scenario.
#[derive(Clone, Debug)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub step_budget: u64,
    pub memory: Memory,
    pub enclaves: Vec<EnclaveDescriptor>,
    pub images: Vec<BootImage>,
    pub pubkeys: PublicKeys,
    /// Text of the golden measurements file the images were checked against.
    pub golden_measurements: String,
    pub efuse: EfuseStore,
    pub dma_policy: Vec<(EnclaveId, EnclaveId)>,
    pub interrupts: Vec<InterruptSpec>,
    pub uplink: Option<UplinkSpec>,
    pub faults: Vec<FaultSpec>,
    pub assertions: Vec<Assertion>,
}

impl ScenarioConfig {
    /// Loads `path`, resolving referenced files next to it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::from_json(&text, |name| std::fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}")))
    }

    /// Parses `text`; `resolve` maps a file reference to its contents.
    pub fn from_json(text: &str, resolve: impl Fn(&str) -> Result<Vec<u8>, String>) -> Result<Self, ConfigError> {
        let raw: RawConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::resolve(raw, resolve)
    }

    pub fn resolve(raw: RawConfig, resolve: impl Fn(&str) -> Result<Vec<u8>, String>) -> Result<Self, ConfigError> {
        let mut issues = Vec::new();
        let mut bad = |msg: String| issues.push(ConfigIssue::Invalid(msg));

        let mut regions = Vec::new();
        for r in &raw.memory {
            match span(r.base, r.size) {
                Some(region) => regions.push(MemRegion::new(r.label.clone(), r.kind, region)),
                None => bad(format!("memory region `{}` does not fit the address space", r.label)),
            }
        }
        let memory = match Memory::new(regions) {
            Ok(m) => Some(m),
            Err(e) => {
                bad(format!("memory map: {e}"));
                None
            }
        };

        let names: Vec<(String, EnclaveId)> =
            raw.enclaves.iter().enumerate().map(|(i, e)| (e.name.clone(), EnclaveId(i as u8))).collect();
        if raw.enclaves.len() > usize::from(u8::MAX) {
            bad("too many enclaves".into());
        }
        let assembler = Assembler::with_enclaves(names.clone());
        let id_of = |name: &str| names.iter().find(|(n, _)| n == name).map(|(_, id)| *id);

        let mut enclaves = Vec::new();
        for (i, e) in raw.enclaves.iter().enumerate() {
            if names[..i].iter().any(|(n, _)| *n == e.name) {
                bad(format!("duplicate enclave name `{}`", e.name));
            }
            let Some(region) = span(e.base, e.size) else {
                bad(format!("enclave `{}` does not fit the address space", e.name));
                continue;
            };
            let mut d = EnclaveDescriptor::new(EnclaveId(i as u8), e.name.clone(), e.kind, region);
            if let Some(entry) = e.entry {
                match u32::try_from(entry.0) {
                    Ok(v) => d.entry_point = PhysAddr(v),
                    Err(_) => bad(format!("entry point of `{}` out of range", e.name)),
                }
            }
            if let Some(rb) = &e.receive_buffer {
                match span(rb.base, rb.size) {
                    Some(r) => d.receive_buffer = Some(r),
                    None => bad(format!("receive buffer of `{}` out of range", e.name)),
                }
            }
            let listing = match (&e.program, &e.listing) {
                (Some(_), Some(_)) => {
                    bad(format!("enclave `{}` has both `program` and `listing`", e.name));
                    None
                }
                (Some(path), None) => match resolve(path).map(String::from_utf8) {
                    Ok(Ok(text)) => Some(text),
                    Ok(Err(_)) => {
                        bad(format!("program `{path}` is not UTF-8"));
                        None
                    }
                    Err(msg) => {
                        bad(format!("program of `{}`: {msg}", e.name));
                        None
                    }
                },
                (None, listing) => listing.clone(),
            };
            if let Some(text) = listing {
                match assembler.assemble(&text) {
                    Ok(p) => d.program = Some(p),
                    Err(err) => bad(format!("program of `{}`: {err}", e.name)),
                }
            }
            enclaves.push(d);
        }
        if let Some(mem) = &memory {
            if enclaves.len() == raw.enclaves.len() {
                issues.extend(layout_errors(&enclaves, mem).into_iter().map(ConfigIssue::Layout));
            }
        }
        let mut bad = |msg: String| issues.push(ConfigIssue::Invalid(msg));

        let golden = match resolve(&raw.boot.measurements).map(String::from_utf8) {
            Ok(Ok(t)) => t,
            Ok(Err(_)) => {
                bad("measurements file is not UTF-8".into());
                String::new()
            }
            Err(msg) => {
                bad(format!("measurements: {msg}"));
                String::new()
            }
        };
        let expected = parse_measurements(&golden).unwrap_or_else(|e| {
            bad(format!("measurements: {e}"));
            BTreeMap::new()
        });
        let mut images = Vec::new();
        for img in &raw.boot.images {
            let code = resolve(&img.path).unwrap_or_else(|msg| {
                bad(format!("boot image: {msg}"));
                Vec::new()
            });
            let Some(m) = expected.get(&img.layer) else {
                bad(format!("no golden measurement for layer `{}`", img.layer));
                continue;
            };
            let Some(sig) = hex_array::<SIGNATURE_LEN>(&img.signature) else {
                bad(format!("signature of `{}` must be {SIGNATURE_LEN} hex bytes", img.layer));
                continue;
            };
            match BootImage::new(img.layer, code, *m, sig, img.signer.clone()) {
                Ok(i) => images.push(i),
                Err(e) => bad(e.to_string()),
            }
        }
        let mut pubkeys = PublicKeys::new();
        for (id, key) in &raw.boot.pubkeys {
            match hex_array::<PUBLIC_KEY_LEN>(key) {
                Some(k) => {
                    pubkeys.insert(id.clone(), k);
                }
                None => bad(format!("public key `{id}` must be {PUBLIC_KEY_LEN} hex bytes")),
            }
        }

        let uds: Key = hex_array(&raw.efuse.uds).unwrap_or_else(|| {
            bad("efuse uds must be 32 hex bytes".into());
            [0; 32]
        });
        let mut keys = BTreeMap::new();
        for (id, k) in &raw.efuse.keys {
            match hex_array::<32>(k) {
                Some(k) => {
                    keys.insert(id.clone(), k);
                }
                None => bad(format!("efuse key `{id}` must be 32 hex bytes")),
            }
        }

        let mut dma_policy = Vec::new();
        for [src, dst] in &raw.dma_policy {
            match (id_of(src), id_of(dst)) {
                (Some(s), Some(d)) => {
                    let apps = [s, d].iter().all(|id| raw.enclaves[id.index()].kind == EnclaveKind::App);
                    if !apps || s == d {
                        bad(format!("DMA edge {src} -> {dst} must join two distinct app enclaves"));
                    }
                    dma_policy.push((s, d));
                }
                _ => bad(format!("DMA edge {src} -> {dst} names an unknown enclave")),
            }
        }
        if let Some(up) = &raw.uplink {
            if id_of(&up.enclave).is_none() {
                bad(format!("uplink enclave `{}` is unknown", up.enclave));
            }
        }
        for f in &raw.faults {
            if id_of(&f.after_exit).is_none() {
                bad(format!("fault trigger `{}` is unknown", f.after_exit));
            }
            if f.bit > 7 {
                bad(format!("fault bit {} out of range", f.bit));
            }
        }

        if !issues.is_empty() {
            return Err(ConfigError::Validation(issues));
        }
        Ok(Self {
            name: raw.name,
            seed: raw.seed,
            step_budget: raw.step_budget.unwrap_or(DEFAULT_STEP_BUDGET),
            memory: memory.expect("no issues means the map built"),
            enclaves,
            images,
            pubkeys,
            golden_measurements: golden,
            efuse: EfuseStore::new(uds, keys),
            dma_policy,
            interrupts: raw.interrupts,
            uplink: raw.uplink,
            faults: raw.faults,
            assertions: raw.assertions,
        })
    }

    pub fn enclave_id(&self, name: &str) -> Option<EnclaveId> {
        self.enclaves.iter().find(|d| d.name == name).map(|d| d.id)
    }
}

fn span(base: Num, size: Num) -> Option<Region> {
    let b = u32::try_from(base.0).ok()?;
    (size.0 > 0 && base.0 + size.0 <= 1 << 32).then(|| Region::new(b, size.0))
}

fn hex_array<const N: usize>(s: &str) -> Option<[u8; N]> {
    hex::decode(s.trim()).ok()?.try_into().ok()
}

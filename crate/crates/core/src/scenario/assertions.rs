// SPDX-License-Identifier: Apache-2.0

//! Scenario-declared expectations, checked after a run (or against a
//! saved trace, for everything that does not need live memory).

use serde::{Deserialize, Serialize};

use crate::machine::{Memory, PhysAddr};

use super::config::Num;
use super::trace::{EventKind, TraceEvent};

#[derive(Clone, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum Assertion {
    /// The last cloud decision.
    CloudVerdict { expect: String },
    /// Every DMA request from `src` to `dst` got this verdict (and there was one).
    DmaVerdict { src: String, dst: String, expect: String },
    /// The exact sequence of event kinds.
    EventKinds { expect: Vec<EventKind> },
    /// No event of this kind.
    NoEvent { kind: EventKind },
    /// Final memory contents (hex) at `addr`.
    Memory { addr: Num, hex: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail(String),
    /// Needs live state that a trace does not carry.
    Skipped,
}

impl Assertion {
    pub fn check_trace(&self, trace: &[TraceEvent]) -> Verdict {
        match self {
            Assertion::CloudVerdict { expect } => {
                match trace.iter().rev().find(|e| e.kind == EventKind::CloudVerify) {
                    Some(e) if e.attr_str("verdict") == Some(expect.as_str()) => Verdict::Pass,
                    Some(e) => Verdict::Fail(format!("cloud verdict {:?}, expected {expect}", e.attr_str("verdict"))),
                    None => Verdict::Fail("no CloudVerify event".into()),
                }
            }
            Assertion::DmaVerdict { src, dst, expect } => {
                let seen: Vec<&str> = trace
                    .iter()
                    .filter(|e| e.kind == EventKind::DmaVerdict && e.subject == *src && e.attr_str("dst") == Some(dst.as_str()))
                    .filter_map(|e| e.attr_str("verdict"))
                    .collect();
                if !seen.is_empty() && seen.iter().all(|v| v == expect) {
                    Verdict::Pass
                } else {
                    Verdict::Fail(format!("DMA {src} -> {dst}: saw {seen:?}, expected {expect}"))
                }
            }
            Assertion::EventKinds { expect } => {
                let got: Vec<EventKind> = trace.iter().map(|e| e.kind).collect();
                if got == *expect {
                    Verdict::Pass
                } else {
                    let at = got.iter().zip(expect).position(|(a, b)| a != b).unwrap_or(got.len().min(expect.len()));
                    Verdict::Fail(format!("event kinds diverge at index {at} (got {} events, expected {})", got.len(), expect.len()))
                }
            }
            Assertion::NoEvent { kind } => match trace.iter().find(|e| e.kind == *kind) {
                None => Verdict::Pass,
                Some(e) => Verdict::Fail(format!("unexpected {kind} event at seq {}", e.seq)),
            },
            Assertion::Memory { .. } => Verdict::Skipped,
        }
    }

    pub fn check(&self, trace: &[TraceEvent], mem: &Memory) -> Verdict {
        let Assertion::Memory { addr, hex: expect } = self else {
            return self.check_trace(trace);
        };
        let Ok(want) = hex::decode(expect) else {
            return Verdict::Fail(format!("bad hex `{expect}`"));
        };
        let Ok(at) = u32::try_from(addr.0) else {
            return Verdict::Fail(format!("address {:#x} out of range", addr.0));
        };
        match mem.read_phys(PhysAddr(at), want.len() as u64) {
            Ok(got) if got == want => Verdict::Pass,
            Ok(got) => Verdict::Fail(format!("memory at {:#x} is {}, expected {expect}", addr.0, hex::encode(got))),
            Err(e) => Verdict::Fail(format!("memory at {:#x}: {e}", addr.0)),
        }
    }
}

// SPDX-License-Identifier: Apache-2.0

//! In-process stand-in for the payment backend.
//!
//! A submission is `AEAD(payload ‖ H(payload))` under the device's AEAD
//! key. It is accepted iff the tag verifies and the enclosed hash matches
//! a fresh recomputation.

use serde::{Deserialize, Serialize};

use crate::crypto::{self, Key, DIGEST_LEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CloudVerdict {
    Accepted,
    Rejected,
}

impl CloudVerdict {
    /// Byte written back to the device.
    pub fn code(self) -> u8 {
        match self {
            CloudVerdict::Accepted => 1,
            CloudVerdict::Rejected => 0,
        }
    }
}

#[derive(Clone)]
pub struct CloudStub {
    key: Key,
    decisions: Vec<CloudVerdict>,
}

impl std::fmt::Debug for CloudStub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CloudStub").field("decisions", &self.decisions).finish_non_exhaustive()
    }
}

impl CloudStub {
    pub fn new(shared_key: Key) -> Self {
        Self { key: shared_key, decisions: Vec::new() }
    }

    pub fn submit(&mut self, sealed: &[u8]) -> CloudVerdict {
        let verdict = match crypto::aead_open(&self.key, sealed) {
            Ok(pt) if pt.len() > DIGEST_LEN => {
                let (payload, hash) = pt.split_at(pt.len() - DIGEST_LEN);
                if crypto::digest(payload)[..] == *hash {
                    CloudVerdict::Accepted
                } else {
                    CloudVerdict::Rejected
                }
            }
            _ => CloudVerdict::Rejected,
        };
        self.decisions.push(verdict);
        verdict
    }

    pub fn decisions(&self) -> &[CloudVerdict] {
        &self.decisions
    }
}

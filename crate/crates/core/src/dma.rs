// SPDX-License-Identifier: Apache-2.0

//! CSR-gated DMA between app enclaves.
//!
//! A request passes four gates, always in this order:
//!
//! 1. the security CSR must allow `src -> dst`;
//! 2. the data source must not belong to another enclave (push only);
//! 3. the source span must lie inside the requester's region;
//! 4. the destination's availability-table row must have room.
//!
//! A granted transfer copies to the destination's advertised free span
//! without consulting the hart's PMP, then shrinks that span.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enclaves::{EnclaveDescriptor, EnclaveId, EnclaveKind, EnclaveSet};
use crate::machine::{Memory, PhysAddr, PrivilegeMode, Region};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DmaRequest {
    /// Bound by the EPA to the running enclave.
    pub src: EnclaveId,
    pub dst: EnclaveId,
    pub src_addr: PhysAddr,
    pub len: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DmaVerdict {
    Granted,
    PolicyDenied,
    PullForbidden,
    InsufficientSpace,
    SourceOutOfRegion,
}

impl DmaVerdict {
    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum CsrError {
    #[error("security CSR written from U-mode")]
    UserModeWrite,
    #[error("enclave id out of range")]
    OutOfRange,
}

/// DMA legitimacy policy: `allowed[src][dst]` over app enclave ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SecurityCsr {
    apps: Vec<bool>,
    allowed: Vec<Vec<bool>>,
}

impl SecurityCsr {
    /// All-false policy sized for `set`.
    pub fn new(set: &EnclaveSet) -> Self {
        let n = set.len();
        let mut apps = vec![false; n];
        for d in set.apps() {
            apps[d.id.index()] = true;
        }
        Self { apps, allowed: vec![vec![false; n]; n] }
    }

    pub fn allowed(&self, src: EnclaveId, dst: EnclaveId) -> bool {
        self.allowed
            .get(src.index())
            .and_then(|row| row.get(dst.index()))
            .copied()
            .unwrap_or(false)
    }

    /// Sets one edge. Only M-mode may write; the diagonal and edges
    /// touching non-app enclaves stay false.
    pub fn write(&mut self, mode: PrivilegeMode, src: EnclaveId, dst: EnclaveId, allow: bool) -> Result<(), CsrError> {
        if mode != PrivilegeMode::Machine {
            return Err(CsrError::UserModeWrite);
        }
        let n = self.allowed.len();
        if src.index() >= n || dst.index() >= n {
            return Err(CsrError::OutOfRange);
        }
        let legal = src != dst && self.apps[src.index()] && self.apps[dst.index()];
        self.allowed[src.index()][dst.index()] = allow && legal;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FreeSpan {
    pub free_base: PhysAddr,
    pub free_len: u64,
}

impl FreeSpan {
    pub fn of(region: Region) -> Self {
        Self { free_base: region.base, free_len: region.size }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AvailabilityTable {
    rows: BTreeMap<EnclaveId, FreeSpan>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum DmaError {
    #[error("declared free span lies outside the enclave's region")]
    SpanOutsideRegion,
}

impl AvailabilityTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn row(&self, id: EnclaveId) -> Option<FreeSpan> {
        self.rows.get(&id).copied()
    }

    pub fn rows(&self) -> impl Iterator<Item = (EnclaveId, FreeSpan)> + '_ {
        self.rows.iter().map(|(k, v)| (*k, *v))
    }

    /// Replaces `enclave`'s row; the only writer is the EPA at exit.
    pub fn on_enclave_exit(&mut self, enclave: &EnclaveDescriptor, declared_free: Region) -> Result<(), DmaError> {
        if !enclave.region.contains_span(declared_free.base.as_u64(), declared_free.size) {
            return Err(DmaError::SpanOutsideRegion);
        }
        self.rows.insert(enclave.id, FreeSpan::of(declared_free));
        Ok(())
    }
}

impl AvailabilityTable {
    /// Drops a killed enclave's row so nothing more is pushed to it.
    pub(crate) fn forget(&mut self, id: EnclaveId) {
        self.rows.remove(&id);
    }
}

/// Free-function form of [`AvailabilityTable::on_enclave_exit`].
pub fn on_enclave_exit(table: &mut AvailabilityTable, enclave: &EnclaveDescriptor, declared_free: Region) -> Result<(), DmaError> {
    table.on_enclave_exit(enclave, declared_free)
}

/// Runs the four gates and, if all pass, performs the copy.
pub fn adjudicate_and_transfer(
    req: &DmaRequest,
    csr: &SecurityCsr,
    table: &mut AvailabilityTable,
    mem: &mut Memory,
    enclaves: &EnclaveSet,
) -> DmaVerdict {
    if req.len == 0 || !csr.allowed(req.src, req.dst) {
        return DmaVerdict::PolicyDenied;
    }
    let Some(src) = enclaves.get(req.src) else {
        return DmaVerdict::PolicyDenied;
    };
    let start = req.src_addr.as_u64();
    let foreign = enclaves
        .iter()
        .any(|d| d.id != req.src && d.region.overlaps_span(start, req.len));
    if foreign {
        return DmaVerdict::PullForbidden;
    }
    if !src.region.contains_span(start, req.len) {
        return DmaVerdict::SourceOutOfRegion;
    }
    let dst_ok = enclaves.get(req.dst).is_some_and(|d| d.kind == EnclaveKind::App);
    let Some(row) = table.rows.get_mut(&req.dst).filter(|r| dst_ok && r.free_len >= req.len) else {
        return DmaVerdict::InsufficientSpace;
    };
    let data = mem.read_phys(req.src_addr, req.len).expect("source span validated against the layout");
    mem.write_phys(row.free_base, &data).expect("table rows lie inside mapped regions");
    row.free_base = PhysAddr(row.free_base.0 + req.len as u32);
    row.free_len -= req.len;
    DmaVerdict::Granted
}

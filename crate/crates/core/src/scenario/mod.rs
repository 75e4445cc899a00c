// SPDX-License-Identifier: Apache-2.0

//! Scenario loading and running: boot the platform, drive the arbitrator
//! to idle, close the loop with the cloud stub, then check the scenario's
//! own assertions.
//!
//! Exit statuses: 0 ok, 2 boot failed, 3 an enclave was killed, 4 step
//! budget exhausted, 5 an assertion failed.

pub mod assertions;
pub mod cloud;
pub mod config;
pub mod qr;
pub mod trace;

use std::io::Write;

use serde_json::json;

use crate::crypto::Key;
use crate::enclaves::EnclaveSet;
use crate::epa::{Epa, EpaError, StepReport};
use crate::machine::PhysAddr;
use crate::machine::PrivilegeMode;
use crate::se::AEAD_KEY;

pub use assertions::{Assertion, Verdict};
pub use cloud::{CloudStub, CloudVerdict};
pub use config::{ConfigError, ConfigIssue, ScenarioConfig};
pub use qr::qr_payment_scenario;
pub use trace::{EventKind, TraceEvent, TraceLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RunStatus {
    Ok,
    BootFailed,
    Killed,
    BudgetExceeded,
    AssertionFailed,
}

impl RunStatus {
    pub fn code(self) -> i32 {
        match self {
            RunStatus::Ok => 0,
            RunStatus::BootFailed => 2,
            RunStatus::Killed => 3,
            RunStatus::BudgetExceeded => 4,
            RunStatus::AssertionFailed => 5,
        }
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub trace: Vec<TraceEvent>,
    pub cloud: Vec<CloudVerdict>,
    /// One line per failed assertion.
    pub failures: Vec<String>,
    /// The machine as it was left, for inspection.
    pub epa: Epa,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("simulator error: {0}")]
    Epa(#[from] EpaError),
    #[error("trace output: {0}")]
    Io(#[from] std::io::Error),
}

/// Builds the (not yet booted) machine a config describes.
pub fn build(config: &ScenarioConfig) -> Epa {
    let set = EnclaveSet::new(config.enclaves.clone(), &config.memory).expect("config was validated");
    let mut epa = Epa::new(config.memory.clone(), set, config.efuse.clone(), config.seed);
    epa.set_step_budget(config.step_budget);
    for &(src, dst) in &config.dma_policy {
        epa.csr_mut().write(PrivilegeMode::Machine, src, dst, true).expect("edges were validated");
    }
    for i in &config.interrupts {
        epa.schedule_interrupt(i.at_step, i.line);
    }
    epa
}

pub fn run(config: &ScenarioConfig, sink: Option<Box<dyn Write>>) -> Result<RunOutcome, RunError> {
    run_observed(config, sink, |_| {})
}

/// Like [`run`], calling `observe` after boot and after every step.
pub fn run_observed(
    config: &ScenarioConfig,
    sink: Option<Box<dyn Write>>,
    mut observe: impl FnMut(&Epa),
) -> Result<RunOutcome, RunError> {
    let mut epa = build(config);
    if let Some(sink) = sink {
        epa.trace_mut().set_sink(sink);
    }
    let shared: Key = config.efuse.key(AEAD_KEY).copied().unwrap_or([0; 32]);
    let mut cloud = CloudStub::new(shared);

    let report = epa.boot(&config.images, &config.pubkeys);
    observe(&epa);
    let status = if !report.booted() {
        RunStatus::BootFailed
    } else {
        let result = epa.run_with(|epa, step| {
            if let StepReport::Exited { enclave } = step {
                let name = epa.enclaves().get(enclave).map(|d| d.name.clone()).unwrap_or_default();
                on_exit(config, epa, &mut cloud, &name);
            }
            observe(epa);
        });
        match result {
            Ok(()) => None,
            Err(EpaError::StepBudgetExceeded { .. }) => Some(RunStatus::BudgetExceeded),
            Err(e) => return Err(e.into()),
        }
        .unwrap_or(RunStatus::Ok)
    };
    let status = if status == RunStatus::Ok && epa.trace().events().iter().any(|e| e.kind == EventKind::Kill) {
        RunStatus::Killed
    } else {
        status
    };
    let mut failures = Vec::new();
    if status == RunStatus::Ok {
        for a in &config.assertions {
            if let Verdict::Fail(msg) = a.check(epa.trace().events(), epa.memory()) {
                failures.push(msg);
            }
        }
    }
    let status = if failures.is_empty() { status } else { RunStatus::AssertionFailed };
    epa.trace_mut().finish()?;
    Ok(RunOutcome { status, trace: epa.trace().events().to_vec(), cloud: cloud.decisions().to_vec(), failures, epa })
}

/// Fault injection, then the cloud uplink, for an enclave that just exited.
fn on_exit(config: &ScenarioConfig, epa: &mut Epa, cloud: &mut CloudStub, name: &str) {
    for f in config.faults.iter().filter(|f| f.after_exit == name) {
        let addr = PhysAddr(f.addr.0 as u32);
        if let Ok(byte) = epa.memory().read_phys(addr, 1) {
            epa.memory_mut().write_phys(addr, &[byte[0] ^ (1 << f.bit)]).expect("just read");
        }
    }
    let Some(up) = config.uplink.as_ref().filter(|u| u.enclave == name) else {
        return;
    };
    let sealed = epa.memory().read_phys(PhysAddr(up.addr.0 as u32), up.len.0).unwrap_or_default();
    // An all-zero outbox means nothing was handed over: nothing to send.
    if sealed.iter().all(|&b| b == 0) {
        return;
    }
    let verdict = cloud.submit(&sealed);
    let written = epa.memory_mut().write_phys(PhysAddr(up.response_addr.0 as u32), &[verdict.code()]).is_ok();
    epa.emit(
        EventKind::CloudVerify,
        "cloud",
        json!({"enclave": name, "len": sealed.len(), "verdict": verdict, "notified": written}),
    );
}

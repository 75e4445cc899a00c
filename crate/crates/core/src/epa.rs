// SPDX-License-Identifier: Apache-2.0

//! The M-mode arbitrator: lifecycle, context switching and trap handling.
//!
//! One hart, at most one running enclave. Every switch goes through
//! [`Epa::suspend`] (which zeroes the register file, empties the cache tag
//! set and clears the PMP) followed by [`Epa::wakeup`] (which installs the
//! target's PMP program and restores its context).
//!
//! ```text
//!            wakeup                 request / interrupt / yield
//! Sleeping ---------> Running ------------------------------> Suspended
//!     ^                 |   ^                                     |
//!     |   exit / kill   |   +------------- wakeup ---------------+
//!     +-----------------+
//! ```

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::boot::{self, BootImage, BootReport, PublicKeys};
use crate::crypto;
use crate::dma::{adjudicate_and_transfer, AvailabilityTable, DmaRequest, SecurityCsr};
use crate::enclaves::{EnclaveId, EnclaveKind, EnclaveSet, PolicyError};
use crate::machine::{AccessKind, Memory, PhysAddr, PmpUnit};
use crate::scenario::trace::{EventKind, TraceEvent, TraceLog};
use crate::se::{ce_service, Caller, EfuseStore, Mailbox, OpCode, ServiceEnv, Trng, SEAL_KEY};
use crate::workload::{self, StepOutcome, NUM_REGS};

/// Default step budget; a run that needs more is treated as livelocked.
pub const DEFAULT_STEP_BUDGET: u64 = 1_000_000;

/// Register the EPA writes call results into.
pub const RESULT_REG: usize = 10;
/// Second result register (response length of a crypto call).
pub const RESULT_LEN_REG: usize = 11;
/// Result code for a transfer to an enclave that cannot be woken.
pub const TRANSFER_REFUSED: u8 = 0xff;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LifecycleState {
    Sleeping,
    Running,
    Suspended,
}

/// Architectural state of one enclave. Registers hold byte strings; an
/// empty string is a zero register.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Context {
    pub regs: [Vec<u8>; NUM_REGS],
    pub pc: usize,
    /// Line addresses resident in the (abstract) cache.
    pub cache_tags: BTreeSet<u32>,
}

impl Context {
    pub fn fresh(pc: usize) -> Self {
        Self { pc, ..Self::default() }
    }

    /// True when every register is zero and the cache is empty.
    pub fn is_zeroed(&self) -> bool {
        self.regs.iter().all(|r| r.iter().all(|&b| b == 0)) && self.cache_tags.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ServiceRequest {
    pub op: OpCode,
    pub msg_addr: PhysAddr,
    pub msg_len: u64,
    pub result_addr: PhysAddr,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum TrapCause {
    PmpViolation { addr: PhysAddr, kind: AccessKind },
    UnmappedAccess { addr: PhysAddr, kind: AccessKind },
    IllegalInstruction { reason: String },
    EcallServiceRequest(ServiceRequest),
    EcallTransfer { target: EnclaveId },
    EcallExit,
    EcallYield,
    DmaRequestSubmitted { dst: EnclaveId, src_addr: PhysAddr, len: u64 },
    ExternalInterrupt { line: u32 },
}

impl TrapCause {
    fn attrs(&self) -> Value {
        match self {
            TrapCause::PmpViolation { addr, kind } => {
                json!({"cause": "PmpViolation", "addr": addr.to_string(), "access": kind.to_string()})
            }
            TrapCause::UnmappedAccess { addr, kind } => {
                json!({"cause": "UnmappedAccess", "addr": addr.to_string(), "access": kind.to_string()})
            }
            TrapCause::IllegalInstruction { reason } => json!({"cause": "IllegalInstruction", "reason": reason}),
            TrapCause::EcallServiceRequest(req) => json!({"cause": "EcallServiceRequest", "op": req.op.mnemonic()}),
            TrapCause::EcallTransfer { target } => json!({"cause": "EcallTransfer", "target": target.to_string()}),
            TrapCause::EcallExit => json!({"cause": "EcallExit"}),
            TrapCause::EcallYield => json!({"cause": "EcallYield"}),
            TrapCause::DmaRequestSubmitted { dst, len, .. } => {
                json!({"cause": "DmaRequestSubmitted", "dst": dst.to_string(), "len": len})
            }
            TrapCause::ExternalInterrupt { line } => json!({"cause": "ExternalInterrupt", "line": line}),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SwitchReason {
    ServiceRequest,
    ExplicitTransfer,
    Interrupt,
    Yield,
    Exit,
    Kill,
}

impl fmt::Display for SwitchReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum EpaError {
    #[error("enclave {0} cannot be woken: {1} is already running")]
    AlreadyRunning(EnclaveId, EnclaveId),
    #[error("unknown enclave {0}")]
    UnknownEnclave(EnclaveId),
    #[error("no enclave is running")]
    NothingRunning,
    #[error("enclave {0} was killed and is not schedulable")]
    Faulted(EnclaveId),
    #[error("enclave {0} has nothing to run")]
    NotSchedulable(EnclaveId),
    #[error("the boot chain has not completed")]
    NotBooted,
    #[error("step budget of {budget} exhausted")]
    StepBudgetExceeded { budget: u64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// What one call to [`Epa::step_once`] did.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepReport {
    /// One op (or one service round trip) ran; `enclave` was running.
    Ran { enclave: EnclaveId },
    /// `enclave` exited during this step.
    Exited { enclave: EnclaveId },
    /// `enclave` was killed during this step.
    Killed { enclave: EnclaveId },
    /// Due interrupts were delivered.
    Interrupted,
    /// `enclave` was put on the idle hart; it has not run yet.
    Scheduled { enclave: EnclaveId },
    /// Nothing left to schedule.
    Idle,
}

/// The arbitrator and all machine state it owns. Clones drop the trace sink.
#[derive(Clone, Debug)]
pub struct Epa {
    mem: Memory,
    enclaves: EnclaveSet,
    hart: Context,
    pmp: PmpUnit,
    running: Option<EnclaveId>,
    service: Option<(EnclaveId, ServiceRequest)>,
    saved: BTreeMap<EnclaveId, Context>,
    faulted: BTreeSet<EnclaveId>,
    mailbox: Mailbox,
    efuse: EfuseStore,
    trng: Trng,
    csr: SecurityCsr,
    table: AvailabilityTable,
    trace: TraceLog,
    launch: VecDeque<EnclaveId>,
    rr_cursor: usize,
    steps: u64,
    budget: u64,
    interrupts: BTreeMap<u64, Vec<u32>>,
    booted: bool,
}

impl Epa {
    /// Builds the arbitrator over a validated enclave set. Every app's
    /// receive buffer is advertised in the availability table up front,
    /// and apps are queued for launch in id order.
    pub fn new(mem: Memory, enclaves: EnclaveSet, efuse: EfuseStore, seed: u64) -> Self {
        let mut table = AvailabilityTable::new();
        for d in enclaves.apps() {
            if let Some(buffer) = d.receive_buffer {
                table.on_enclave_exit(d, buffer).expect("receive buffers are validated with the layout");
            }
        }
        let launch = enclaves.apps().map(|d| d.id).collect();
        Self {
            mailbox: Mailbox::new(enclaves.mailbox()),
            csr: SecurityCsr::new(&enclaves),
            mem,
            enclaves,
            hart: Context::default(),
            pmp: PmpUnit::new(),
            running: None,
            service: None,
            saved: BTreeMap::new(),
            faulted: BTreeSet::new(),
            efuse,
            trng: Trng::new(seed),
            table,
            trace: TraceLog::new(),
            launch,
            rr_cursor: 0,
            steps: 0,
            budget: DEFAULT_STEP_BUDGET,
            interrupts: BTreeMap::new(),
            booted: false,
        }
    }

    pub fn set_step_budget(&mut self, budget: u64) {
        self.budget = budget;
    }

    /// Replaces the launch queue (apps woken in this order when idle).
    pub fn set_launch_order(&mut self, order: impl IntoIterator<Item = EnclaveId>) {
        self.launch = order.into_iter().collect();
    }

    /// Raises external interrupt `line` once `at_step` ops have run.
    pub fn schedule_interrupt(&mut self, at_step: u64, line: u32) {
        self.interrupts.entry(at_step).or_default().push(line);
    }

    pub fn memory(&self) -> &Memory {
        &self.mem
    }

    /// M-mode view of memory, for fault injection and the cloud uplink.
    pub fn memory_mut(&mut self) -> &mut Memory {
        &mut self.mem
    }

    pub fn enclaves(&self) -> &EnclaveSet {
        &self.enclaves
    }

    pub fn state_of(&self, id: EnclaveId) -> Option<LifecycleState> {
        self.enclaves.get(id).map(|d| d.state)
    }

    pub fn running(&self) -> Option<EnclaveId> {
        self.running
    }

    /// Requester the crypto enclave is currently serving.
    pub fn service_context(&self) -> Option<EnclaveId> {
        self.service.map(|(r, _)| r)
    }

    pub fn hart(&self) -> &Context {
        &self.hart
    }

    pub fn hart_mut(&mut self) -> &mut Context {
        &mut self.hart
    }

    pub fn saved_context(&self, id: EnclaveId) -> Option<&Context> {
        self.saved.get(&id)
    }

    pub fn installed_pmp(&self) -> &PmpUnit {
        &self.pmp
    }

    pub fn is_faulted(&self, id: EnclaveId) -> bool {
        self.faulted.contains(&id)
    }

    pub fn csr(&self) -> &SecurityCsr {
        &self.csr
    }

    pub fn csr_mut(&mut self) -> &mut SecurityCsr {
        &mut self.csr
    }

    pub fn availability(&self) -> &AvailabilityTable {
        &self.table
    }

    pub fn mailbox(&self) -> &Mailbox {
        &self.mailbox
    }

    pub fn efuse(&self) -> &EfuseStore {
        &self.efuse
    }

    pub fn trng(&self) -> &Trng {
        &self.trng
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn booted(&self) -> bool {
        self.booted
    }

    pub fn trace(&self) -> &TraceLog {
        &self.trace
    }

    pub fn trace_mut(&mut self) -> &mut TraceLog {
        &mut self.trace
    }

    /// Records an event from outside the arbitrator (e.g. the cloud stub).
    pub fn emit(&mut self, kind: EventKind, subject: impl Into<String>, attrs: Value) {
        self.trace.emit(kind, subject, attrs);
    }

    fn name(&self, id: EnclaveId) -> String {
        self.enclaves.get(id).map_or_else(|| id.to_string(), |d| d.name.clone())
    }

    /// Runs the measured boot over the platform images and, on success,
    /// installs the sealing key and unlocks scheduling. App programs are
    /// measured for the record but do not extend the chain.
    pub fn boot(&mut self, images: &[BootImage], pubkeys: &PublicKeys) -> BootReport {
        let map = boot::memory_map_bytes(&self.mem);
        let result = boot::boot_chain(self.efuse.uds(), images, pubkeys, &map);
        let mut apps = serde_json::Map::new();
        let ids: Vec<EnclaveId> = self.enclaves.apps().map(|d| d.id).collect();
        for id in ids {
            let d = self.enclaves.get_mut(id).expect("listed above");
            if let Some(p) = &d.program {
                d.measurement = crypto::digest(p.to_listing().as_bytes());
            }
            apps.insert(d.name.clone(), Value::String(hex::encode(d.measurement)));
        }
        if let Some(key) = result.sealing_key {
            self.efuse.install(SEAL_KEY, key);
        }
        self.booted = result.report.booted();
        let mut attrs = serde_json::to_value(&result.report).expect("report serializes");
        attrs["apps"] = Value::Object(apps);
        self.trace.emit(EventKind::Boot, "epa", attrs);
        result.report
    }

    /// Marks boot complete without a chain run. Test scaffolding only.
    #[doc(hidden)]
    pub fn assume_booted(&mut self) {
        self.booted = true;
    }

    /// Switches `target` onto the hart.
    pub fn wakeup(&mut self, target: EnclaveId) -> Result<(), EpaError> {
        self.wakeup_for(target, None)
    }

    fn wakeup_for(&mut self, target: EnclaveId, service: Option<(EnclaveId, ServiceRequest)>) -> Result<(), EpaError> {
        if let Some(r) = self.running {
            return Err(EpaError::AlreadyRunning(target, r));
        }
        let d = self.enclaves.get(target).ok_or(EpaError::UnknownEnclave(target))?;
        if self.faulted.contains(&target) {
            return Err(EpaError::Faulted(target));
        }
        let runnable = match d.kind {
            EnclaveKind::App => d.program.is_some(),
            EnclaveKind::Crypto => service.is_some(),
            EnclaveKind::Runtime => false,
        };
        if !runnable {
            return Err(EpaError::NotSchedulable(target));
        }
        let from = d.state;
        let pmp = self.enclaves.pmp_program_for(target, service.map(|(r, _)| r))?;
        self.hart = match from {
            LifecycleState::Suspended => self.saved.remove(&target).unwrap_or_default(),
            _ => Context::fresh(0),
        };
        self.pmp = pmp;
        self.running = Some(target);
        self.service = service;
        self.enclaves.get_mut(target).expect("checked").state = LifecycleState::Running;
        let mut attrs = json!({"from": format!("{from:?}")});
        if let Some((r, _)) = service {
            attrs["service_for"] = Value::String(self.name(r));
        }
        let subject = self.name(target);
        self.trace.emit(EventKind::Wakeup, subject, attrs);
        Ok(())
    }

    /// Takes the running enclave off the hart.
    ///
    /// The register file is zeroed, the cache emptied and the PMP cleared
    /// before anything else can run. `Exit` and `Kill` send the enclave to
    /// `Sleeping` and discard its context; every other reason saves it.
    pub fn suspend(&mut self, reason: SwitchReason) -> Result<(), EpaError> {
        let id = self.running.take().ok_or(EpaError::NothingRunning)?;
        let mut ctx = std::mem::take(&mut self.hart);
        self.pmp = PmpUnit::new();
        self.service = None;
        let subject = self.name(id);
        match reason {
            SwitchReason::Exit => {
                self.enclaves.get_mut(id).expect("running enclave exists").state = LifecycleState::Sleeping;
                self.trace.emit(EventKind::Exit, subject.clone(), json!({"reason": reason.to_string()}));
                let d = self.enclaves.get(id).expect("running enclave exists");
                if let Some(buffer) = d.receive_buffer {
                    self.table.on_enclave_exit(d, buffer).expect("receive buffers are validated with the layout");
                    self.trace.emit(
                        EventKind::AvailabilityUpdate,
                        subject,
                        json!({"free_base": buffer.base.to_string(), "free_len": buffer.size}),
                    );
                }
            }
            SwitchReason::Kill => {
                self.enclaves.get_mut(id).expect("running enclave exists").state = LifecycleState::Sleeping;
                self.faulted.insert(id);
                let region = self.enclaves.get(id).expect("running enclave exists").region;
                self.mem.scrub(region).expect("enclave regions are mapped");
                self.table.forget(id);
                self.trace.emit(EventKind::Kill, subject, json!({"scrubbed": true}));
            }
            _ => {
                ctx.cache_tags.clear();
                self.saved.insert(id, ctx);
                self.enclaves.get_mut(id).expect("running enclave exists").state = LifecycleState::Suspended;
                self.trace.emit(EventKind::Suspend, subject, json!({"reason": reason.to_string()}));
            }
        }
        Ok(())
    }

    fn kill(&mut self, cause: &TrapCause) -> Result<(), EpaError> {
        let id = self.running.ok_or(EpaError::NothingRunning)?;
        let subject = self.name(id);
        self.trace.emit(EventKind::Trap, subject, cause.attrs());
        self.suspend(SwitchReason::Kill)
    }

    /// Dispatches a trap raised by the running enclave (or an external line).
    pub fn handle_trap(&mut self, cause: TrapCause) -> Result<(), EpaError> {
        if let TrapCause::ExternalInterrupt { line } = cause {
            return self.interrupt(line);
        }
        let id = self.running.ok_or(EpaError::NothingRunning)?;
        match cause {
            TrapCause::PmpViolation { .. } | TrapCause::UnmappedAccess { .. } | TrapCause::IllegalInstruction { .. } => {
                self.kill(&cause)
            }
            TrapCause::EcallServiceRequest(req) => {
                let ce = self.enclaves.crypto().id;
                self.suspend(SwitchReason::ServiceRequest)?;
                self.wakeup_for(ce, Some((id, req)))
            }
            TrapCause::EcallTransfer { target } => {
                let valid = target != id && self.enclaves.get(target).is_some_and(|d| d.kind == EnclaveKind::App);
                if !valid {
                    return self.kill(&cause);
                }
                if self.faulted.contains(&target) || self.enclaves.get(target).is_some_and(|d| d.program.is_none()) {
                    self.hart.regs[RESULT_REG] = vec![TRANSFER_REFUSED];
                    return Ok(());
                }
                self.launch.retain(|&l| l != target);
                self.suspend(SwitchReason::ExplicitTransfer)?;
                self.wakeup(target)
            }
            TrapCause::EcallExit => self.suspend(SwitchReason::Exit),
            TrapCause::EcallYield => self.suspend(SwitchReason::Yield),
            TrapCause::DmaRequestSubmitted { dst, src_addr, len } => {
                let req = DmaRequest { src: id, dst, src_addr, len };
                self.post_dma_descriptor(&req);
                let verdict = adjudicate_and_transfer(&req, &self.csr, &mut self.table, &mut self.mem, &self.enclaves);
                let attrs = json!({
                    "dst": self.name(dst),
                    "src_addr": src_addr.to_string(),
                    "len": len,
                    "verdict": format!("{verdict:?}"),
                });
                let subject = self.name(id);
                self.trace.emit(EventKind::DmaVerdict, subject, attrs);
                self.hart.regs[RESULT_REG] = vec![verdict.code()];
                Ok(())
            }
            TrapCause::ExternalInterrupt { .. } => unreachable!("handled above"),
        }
    }

    /// Writes the request descriptor into the DMA controller's window.
    fn post_dma_descriptor(&mut self, req: &DmaRequest) {
        let mut desc = [0u8; 16];
        desc[0] = req.src.0;
        desc[1] = req.dst.0;
        desc[4..8].copy_from_slice(&req.src_addr.0.to_le_bytes());
        desc[8..12].copy_from_slice(&(req.len.min(u64::from(u32::MAX)) as u32).to_le_bytes());
        self.mem.write_phys(self.enclaves.dma_window().base, &desc).expect("DMA window is mapped");
    }

    /// Interrupt handler stub: logs, and if an enclave was running,
    /// switches it out and straight back in. It never touches enclave memory.
    fn interrupt(&mut self, line: u32) -> Result<(), EpaError> {
        let subject = self.running.map_or_else(|| "epa".to_string(), |id| self.name(id));
        self.trace.emit(EventKind::Trap, subject, json!({"cause": "ExternalInterrupt", "line": line, "handler": "stub"}));
        if let Some(id) = self.running {
            self.suspend(SwitchReason::Interrupt)?;
            self.wakeup(id)?;
        }
        Ok(())
    }

    /// Runs the crypto enclave's service routine for its current requester,
    /// then hands the hart back with `r10 = status`, `r11 = response length`.
    fn serve(&mut self, ce: EnclaveId) -> Result<(), EpaError> {
        let (requester, req) = self.service.expect("crypto enclave runs only with a service context");
        let requester_region = self.enclaves.get(requester).expect("validated by policy").region;
        let mut events = Vec::new();
        let result = ce_service(
            ServiceEnv { mem: &mut self.mem, pmp: &self.pmp, mailbox: &mut self.mailbox, efuse: &self.efuse, trng: &mut self.trng },
            Caller { id: ce, kind: EnclaveKind::Crypto },
            requester,
            requester_region,
            &req,
            &mut events,
        );
        let subject = self.name(ce);
        for event in events {
            let (kind, attrs) = match event {
                crate::se::SeEvent::MailboxPut { op, requester, payload_len } => (
                    EventKind::MailboxPut,
                    json!({"op": op.mnemonic(), "requester": self.name(requester), "payload_len": payload_len}),
                ),
                crate::se::SeEvent::SeOp { op, status, trng_counter } => {
                    (EventKind::SeOp, json!({"op": op.mnemonic(), "status": status, "trng_counter": trng_counter}))
                }
                crate::se::SeEvent::MailboxGet { status, payload_len } => {
                    (EventKind::MailboxGet, json!({"status": status, "payload_len": payload_len}))
                }
            };
            self.trace.emit(kind, subject.clone(), attrs);
        }
        let (status, len) = match result {
            Ok(n) => (0, n),
            Err(e) => (e.status(), 0),
        };
        self.suspend(SwitchReason::Exit)?;
        self.wakeup(requester)?;
        self.hart.regs[RESULT_REG] = vec![status];
        self.hart.regs[RESULT_LEN_REG] = (len as u32).to_le_bytes().to_vec();
        Ok(())
    }

    /// Picks the next enclave when the hart is free: the launch queue
    /// first, then suspended apps round-robin.
    fn schedule(&mut self) -> Result<bool, EpaError> {
        while let Some(id) = self.launch.pop_front() {
            if self.faulted.contains(&id) || self.state_of(id) != Some(LifecycleState::Sleeping) {
                continue;
            }
            self.wakeup(id)?;
            return Ok(true);
        }
        let n = self.enclaves.len();
        for k in 1..=n {
            let idx = (self.rr_cursor + k) % n;
            let d = self.enclaves.iter().nth(idx).expect("index in range");
            if d.kind == EnclaveKind::App && d.state == LifecycleState::Suspended && !self.faulted.contains(&d.id) {
                let id = d.id;
                self.rr_cursor = idx;
                self.wakeup(id)?;
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn deliver_interrupts(&mut self) -> Result<bool, EpaError> {
        // A serving crypto enclave is not interruptible; lines stay pending.
        if self.service.is_some() {
            return Ok(false);
        }
        let due: Vec<u64> = self.interrupts.range(..=self.steps).map(|(&k, _)| k).collect();
        for &k in &due {
            for line in self.interrupts.remove(&k).unwrap_or_default() {
                self.interrupt(line)?;
            }
        }
        Ok(!due.is_empty())
    }

    /// Advances the machine by one action: delivering due interrupts,
    /// scheduling an enclave onto an idle hart, or running one op.
    ///
    /// Every context switch is the last thing its step does, so between
    /// steps a newly woken enclave has not yet executed anything.
    pub fn step_once(&mut self) -> Result<StepReport, EpaError> {
        if !self.booted {
            return Err(EpaError::NotBooted);
        }
        if self.deliver_interrupts()? {
            return Ok(StepReport::Interrupted);
        }
        if self.running.is_none() {
            return Ok(if self.schedule()? {
                StepReport::Scheduled { enclave: self.running.expect("just scheduled") }
            } else {
                StepReport::Idle
            });
        }
        if self.steps >= self.budget {
            return Err(EpaError::StepBudgetExceeded { budget: self.budget });
        }
        self.steps += 1;
        let id = self.running.expect("checked above");
        if self.service.is_some() {
            self.serve(id)?;
            return Ok(StepReport::Ran { enclave: id });
        }
        let program = self.enclaves.get(id).and_then(|d| d.program.as_ref()).expect("runnable enclaves have programs");
        match workload::step(program, &mut self.hart, &mut self.mem, &self.pmp) {
            StepOutcome::Continue => Ok(StepReport::Ran { enclave: id }),
            StepOutcome::Trapped(cause) => {
                let exiting = cause == TrapCause::EcallExit;
                self.handle_trap(cause)?;
                Ok(if self.faulted.contains(&id) {
                    StepReport::Killed { enclave: id }
                } else if exiting {
                    StepReport::Exited { enclave: id }
                } else {
                    StepReport::Ran { enclave: id }
                })
            }
        }
    }

    /// Steps until nothing is runnable; returns the trace so far.
    pub fn run_until_idle(&mut self) -> Result<&[TraceEvent], EpaError> {
        self.run_with(|_, _| {})?;
        Ok(self.trace.events())
    }

    /// Like [`Epa::run_until_idle`], calling `hook` after every step.
    pub fn run_with(&mut self, mut hook: impl FnMut(&mut Epa, StepReport)) -> Result<(), EpaError> {
        loop {
            let report = self.step_once()?;
            if report == StepReport::Idle {
                return Ok(());
            }
            hook(self, report);
        }
    }

    /// Checks single-running and PMP/scheduler coherence.
    pub fn check_invariants(&self) -> Result<(), String> {
        let running: Vec<EnclaveId> =
            self.enclaves.iter().filter(|d| d.state == LifecycleState::Running).map(|d| d.id).collect();
        if running.len() > 1 {
            return Err(format!("{} enclaves running", running.len()));
        }
        if running.first().copied() != self.running {
            return Err(format!("hart says {:?}, states say {:?}", self.running, running));
        }
        let expected = match self.running {
            Some(id) => self.enclaves.pmp_program_for(id, self.service_context()).map_err(|e| e.to_string())?,
            None => PmpUnit::new(),
        };
        if expected != self.pmp {
            return Err("installed PMP differs from the running enclave's program".into());
        }
        Ok(())
    }
}

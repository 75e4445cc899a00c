// SPDX-License-Identifier: Apache-2.0

//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed. Each check compares the simulator
//! against a small reference model written here, independently of the
//! library's own logic.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::rc::Rc;
use std::time::Instant;

use chacha20poly1305::aead::Aead;
use chacha20poly1305::{ChaCha20Poly1305, KeyInit};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use xine_core::boot::measurements_file;
use xine_core::dma::{adjudicate_and_transfer, AvailabilityTable, SecurityCsr};
use xine_core::machine::{pmp_check, MemRegion, RegionKind};
use xine_core::scenario::{self, qr_payment_scenario, CloudVerdict, RunStatus};
use xine_core::se::{se_process, Caller, EfuseStore, Mailbox, MailboxError, MailboxMessage, OpCode, SeError, Trng, AEAD_KEY};
use xine_core::{
    assemble, AccessKind, BootOutcome, BootReport, DmaRequest, DmaVerdict, EnclaveDescriptor, EnclaveId, EnclaveKind,
    EnclaveSet, Epa, EpaError, EventKind, LifecycleState, Memory, PhysAddr, PmpUnit, PrivilegeMode, Region, SwitchReason,
    TrapCause,
};

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Check; 10] = [
        ("isolation", isolation),
        ("runtime-asymmetry", runtime_asymmetry),
        ("lifecycle", lifecycle),
        ("context-flush", context_flush),
        ("dma-gates", dma_gates),
        ("mailbox-exclusivity", mailbox_exclusivity),
        ("dice-chain", dice_chain),
        ("aead", aead),
        ("qr-end-to-end", qr_end_to_end),
        ("determinism", determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} ({secs:.2}s)", n + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} ({secs:.2}s)", n + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Layouts

const FLASH: Region = Region { base: PhysAddr(0x0), size: 0x2_0000 };
const RAM: Region = Region { base: PhysAddr(0x2000_0000), size: 0x1_0000 };
const MAILBOX: Region = Region { base: PhysAddr(0x4000_0000), size: 0x1000 };
const DMA: Region = Region { base: PhysAddr(0x4000_1000), size: 0x100 };

fn memory_with(flash: Region, ram: Region) -> Memory {
    Memory::new(vec![
        MemRegion::new("flash", RegionKind::Flash, flash),
        MemRegion::new("ram", RegionKind::Ram, ram),
        MemRegion::new("mailbox", RegionKind::MailboxMmio, MAILBOX),
        MemRegion::new("dma", RegionKind::DmaMmio, DMA),
    ])
    .unwrap()
}

/// A naturally aligned power-of-two block inside `within` that avoids `taken`.
fn place(rng: &mut ChaCha8Rng, within: Region, sizes: std::ops::RangeInclusive<u32>, taken: &[Region]) -> Option<Region> {
    for _ in 0..64 {
        let size = 1u64 << rng.random_range(sizes.clone());
        let slots = within.size / size;
        let base = within.base.0 as u64 + size * rng.random_range(0..slots);
        let r = Region { base: PhysAddr(base as u32), size };
        if !taken.iter().any(|t| t.overlaps(&r)) {
            return Some(r);
        }
    }
    None
}

/// Crypto enclave, runtime enclave in flash, and 1..=5 app enclaves in RAM,
/// all at random NAPOT-encodable positions.
fn random_layout(rng: &mut ChaCha8Rng) -> Vec<EnclaveDescriptor> {
    'retry: loop {
        let apps = rng.random_range(1..=5usize);
        let mut taken = Vec::new();
        let Some(ce) = place(rng, RAM, 8..=12, &taken) else { continue };
        taken.push(ce);
        let re = place(rng, FLASH, 6..=14, &[]).expect("flash is empty");
        let mut v = vec![
            EnclaveDescriptor::new(EnclaveId(0), "ce", EnclaveKind::Crypto, ce),
            EnclaveDescriptor::new(EnclaveId(1), "re", EnclaveKind::Runtime, re),
        ];
        for i in 0..apps {
            let Some(r) = place(rng, RAM, 3..=13, &taken) else { continue 'retry };
            taken.push(r);
            let d = EnclaveDescriptor::new(EnclaveId(2 + i as u8), format!("ae{}", i + 1), EnclaveKind::App, r);
            v.push(d.with_program(assemble("exit").unwrap()));
        }
        return v;
    }
}

/// Reference: is every byte of the span inside `region`?
fn bytes_inside(region: Region, addr: u64, len: u64) -> bool {
    (addr..addr + len).all(|b| b >= region.base.0 as u64 && b < region.base.0 as u64 + region.size)
}

// ---------------------------------------------------------------------------
// 1. Isolation

fn probe_addr(rng: &mut ChaCha8Rng, anchors: &[u64]) -> u64 {
    match rng.random_range(0..10) {
        0..=4 => {
            let a = anchors[rng.random_range(0..anchors.len())] as i64 + rng.random_range(-24i64..=24);
            a.clamp(0, u32::MAX as i64) as u64
        }
        5..=7 => RAM.base.0 as u64 + rng.random_range(0..RAM.size),
        8 => rng.random_range(0..FLASH.size),
        _ => rng.random::<u32>() as u64,
    }
}

fn isolation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mem = memory_with(FLASH, RAM);
    let kinds = [AccessKind::Read, AccessKind::Write, AccessKind::Execute];
    let (mut probes, mut allowed, mut false_allow, mut false_deny) = (0u64, 0u64, 0u64, 0u64);
    let mut first_bad = None;
    for case in 0..1000 {
        let layout = random_layout(&mut rng);
        let set = EnclaveSet::new(layout.clone(), &mem).map_err(|e| format!("case {case}: generated layout rejected: {e:?}"))?;
        let mut anchors: Vec<u64> = vec![MAILBOX.base.0 as u64, DMA.base.0 as u64];
        for d in &layout {
            anchors.extend([d.region.base.0 as u64, d.region.base.0 as u64 + d.region.size]);
        }
        let re = layout[1].region;
        for app in layout.iter().filter(|d| d.kind == EnclaveKind::App) {
            let unit = set.pmp_program_for(app.id, None).map_err(|e| e.to_string())?;
            for _ in 0..40 {
                let addr = probe_addr(&mut rng, &anchors);
                let len = if rng.random_bool(0.9) { rng.random_range(1..=16u64) } else { rng.random_range(1..=512u64) };
                if addr + len > 1 << 32 {
                    continue;
                }
                let kind = kinds[rng.random_range(0..3)];
                let expect = bytes_inside(app.region, addr, len) || (kind == AccessKind::Execute && bytes_inside(re, addr, len));
                let got = pmp_check(&unit, PrivilegeMode::User, PhysAddr(addr as u32), len, kind).is_allow();
                probes += 1;
                allowed += u64::from(got);
                if got != expect {
                    if got {
                        false_allow += 1;
                    } else {
                        false_deny += 1;
                    }
                    first_bad.get_or_insert(format!("case {case} {}: {kind} {addr:#x}+{len}", app.name));
                }
            }
        }
    }
    ensure(false_allow == 0 && false_deny == 0, || {
        format!("{false_allow} false allows, {false_deny} false denies; first: {}", first_bad.clone().unwrap_or_default())
    })?;
    Ok(format!("1000 layouts, {probes} probes ({allowed} allowed), 0 false allows, 0 false denies"))
}

// ---------------------------------------------------------------------------
// 2. Runtime enclave: execute only

fn runtime_asymmetry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mem = memory_with(FLASH, RAM);
    let mut counts = [0u32; 3];
    for probe in 0..200 {
        let mut layout = random_layout(&mut rng);
        let re = layout[1].region;
        let app = rng.random_range(2..layout.len());
        let kind = [AccessKind::Read, AccessKind::Write, AccessKind::Execute][probe % 3];
        // `exec` fetches one 4-byte instruction.
        let len = if kind == AccessKind::Execute { 4 } else { rng.random_range(1..=4u64) };
        let addr = re.base.0 as u64 + rng.random_range(0..=re.size - len);
        counts[probe % 3] += 1;

        let set = EnclaveSet::new(layout.clone(), &mem).map_err(|e| format!("{e:?}"))?;
        let unit = set.pmp_program_for(layout[app].id, None).map_err(|e| e.to_string())?;
        let verdict = pmp_check(&unit, PrivilegeMode::User, PhysAddr(addr as u32), len, kind);
        ensure(verdict.is_allow() == (kind == AccessKind::Execute), || format!("probe {probe}: {kind} {addr:#x}+{len} -> {verdict:?}"))?;

        // The same access from a running enclave: R/W must trap and kill.
        let op = match kind {
            AccessKind::Read => format!("read {addr:x} {len} -> r1"),
            AccessKind::Write => format!("write {addr:x} {}", "aa".repeat(len as usize)),
            AccessKind::Execute => format!("exec {addr:x}"),
        };
        let name = layout[app].name.clone();
        layout[app].program = Some(assemble(&format!("{op}\nexit")).map_err(|e| e.to_string())?);
        let set = EnclaveSet::new(layout, &mem).map_err(|e| format!("{e:?}"))?;
        let mut epa = Epa::new(mem.clone(), set, EfuseStore::default(), 0);
        epa.assume_booted();
        epa.set_launch_order([EnclaveId(app as u8)]);
        let before = epa.memory().read_phys(PhysAddr(addr as u32), len).unwrap();
        epa.run_until_idle().map_err(|e| e.to_string())?;
        let killed = epa.trace().events().iter().any(|e| e.kind == EventKind::Kill && e.subject == name);
        let trapped = epa.trace().events().iter().any(|e| e.kind == EventKind::Trap && e.attr_str("cause") == Some("PmpViolation"));
        ensure(killed == (kind != AccessKind::Execute) && trapped == killed, || {
            format!("probe {probe}: {kind} by {name} at {addr:#x}: killed={killed} trapped={trapped}")
        })?;
        ensure(epa.memory().read_phys(PhysAddr(addr as u32), len).unwrap() == before, || format!("probe {probe}: runtime image modified"))?;
    }
    Ok(format!("200 probes ({} read, {} write, {} execute): execute allowed, read/write trapped", counts[0], counts[1], counts[2]))
}

// ---------------------------------------------------------------------------
// 3. Lifecycle model check

/// Small machine for the exhaustive search: cloning it must be cheap.
fn two_app_epa(programs: [&str; 2]) -> Epa {
    let flash = Region::new(0x0, 0x1000);
    let ram = Region::new(0x2000_0000, 0x1000);
    let mem = memory_with(flash, ram);
    let layout = vec![
        EnclaveDescriptor::new(EnclaveId(0), "ce", EnclaveKind::Crypto, Region::new(0x2000_0000, 0x400)),
        EnclaveDescriptor::new(EnclaveId(1), "re", EnclaveKind::Runtime, Region::new(0x400, 0x400)),
        EnclaveDescriptor::new(EnclaveId(2), "ae1", EnclaveKind::App, Region::new(0x2000_0400, 0x400))
            .with_program(assemble(programs[0]).unwrap()),
        EnclaveDescriptor::new(EnclaveId(3), "ae2", EnclaveKind::App, Region::new(0x2000_0800, 0x400))
            .with_program(assemble(programs[1]).unwrap()),
    ];
    let set = EnclaveSet::new(layout, &mem).unwrap();
    let mut epa = Epa::new(mem, set, EfuseStore::new([7; 32], BTreeMap::from([(AEAD_KEY.to_string(), [9; 32])])), 0);
    epa.assume_booted();
    epa
}

#[derive(Clone, Copy, Debug)]
enum Event {
    Wakeup(EnclaveId),
    Suspend,
    Exit,
    Kill,
    Transfer(EnclaveId),
}

const A: EnclaveId = EnclaveId(2);
const B: EnclaveId = EnclaveId(3);
const ALPHABET: [Event; 7] =
    [Event::Wakeup(A), Event::Wakeup(B), Event::Suspend, Event::Exit, Event::Kill, Event::Transfer(A), Event::Transfer(B)];

fn apply(epa: &mut Epa, ev: Event) -> Result<(), EpaError> {
    match ev {
        Event::Wakeup(id) => epa.wakeup(id),
        Event::Suspend => epa.suspend(SwitchReason::Interrupt),
        Event::Exit => epa.handle_trap(TrapCause::EcallExit),
        Event::Kill => epa.handle_trap(TrapCause::PmpViolation { addr: MAILBOX.base, kind: AccessKind::Read }),
        Event::Transfer(target) => epa.handle_trap(TrapCause::EcallTransfer { target }),
    }
}

type Observable = (Vec<Option<LifecycleState>>, Option<EnclaveId>, usize, xine_core::Context, PmpUnit);

fn observe(epa: &Epa) -> Observable {
    let states = (0..4).map(|i| epa.state_of(EnclaveId(i))).collect();
    (states, epa.running(), epa.trace().events().len(), epa.hart().clone(), epa.installed_pmp().clone())
}

/// Replays new trace events against the lifecycle diagram:
/// Sleeping -wakeup-> Running, Suspended -wakeup-> Running,
/// Running -suspend-> Suspended, Running -exit/kill-> Sleeping.
fn replay(shadow: &mut BTreeMap<String, LifecycleState>, epa: &Epa, from: usize) -> Result<(), String> {
    use LifecycleState::*;
    for e in &epa.trace().events()[from..] {
        let (legal_from, to): (&[LifecycleState], _) = match e.kind {
            EventKind::Wakeup => (&[Sleeping, Suspended], Running),
            EventKind::Suspend => (&[Running], Suspended),
            EventKind::Exit | EventKind::Kill => (&[Running], Sleeping),
            _ => continue,
        };
        let cur = shadow.get(&e.subject).copied().unwrap_or(Sleeping);
        if !legal_from.contains(&cur) {
            return Err(format!("illegal transition {cur:?} -{:?}-> {to:?} for {}", e.kind, e.subject));
        }
        shadow.insert(e.subject.clone(), to);
        let running = shadow.values().filter(|&&s| s == Running).count();
        if running > 1 {
            return Err(format!("{running} enclaves running after {:?} of {}", e.kind, e.subject));
        }
    }
    for d in epa.enclaves().iter() {
        let model = shadow.get(&d.name).copied().unwrap_or(Sleeping);
        if model != d.state {
            return Err(format!("{} is {:?}, diagram says {model:?}", d.name, d.state));
        }
    }
    Ok(())
}

struct Search {
    sequences: u64,
    states: u64,
    rejected: u64,
}

fn dfs(epa: &Epa, shadow: &BTreeMap<String, LifecycleState>, depth: usize, path: &mut Vec<Event>, s: &mut Search) -> Result<(), String> {
    s.sequences += 1;
    if depth == 8 {
        return Ok(());
    }
    for ev in ALPHABET {
        let mut next = epa.clone();
        let before = observe(&next);
        path.push(ev);
        match apply(&mut next, ev) {
            Err(_) => {
                s.rejected += 1;
                ensure(observe(&next) == before, || format!("{path:?}: rejected event changed state"))?;
            }
            Ok(()) => {
                s.states += 1;
                let mut shadow = shadow.clone();
                replay(&mut shadow, &next, before.2).map_err(|e| format!("{path:?}: {e}"))?;
                next.check_invariants().map_err(|e| format!("{path:?}: {e}"))?;
                dfs(&next, &shadow, depth + 1, path, s)?;
            }
        }
        path.pop();
    }
    Ok(())
}

fn lifecycle() -> Outcome {
    let epa = two_app_epa(["exit", "exit"]);
    let mut s = Search { sequences: 0, states: 0, rejected: 0 };
    dfs(&epa, &BTreeMap::new(), 0, &mut Vec::new(), &mut s)?;
    Ok(format!(
        "{} accepted event sequences up to length 8 ({} reachable states, {} rejected events left state unchanged)",
        s.sequences, s.states, s.rejected
    ))
}

// ---------------------------------------------------------------------------
// 4. Context flush

const TAG: [u8; 2] = [0x5e, 0xc0];

fn tags_in(regs: &[Vec<u8>]) -> BTreeSet<u8> {
    regs.iter().flat_map(|r| r.windows(3).filter(|w| w[..2] == TAG).map(|w| w[2])).collect()
}

fn random_program(rng: &mut ChaCha8Rng, own: u32, other: EnclaveId) -> String {
    let mut lines = vec![];
    for _ in 0..rng.random_range(1..6) {
        lines.push(match rng.random_range(0..4) {
            0 => format!("write {:x} {:08x}", own + 0x40 * rng.random_range(0..8u32), rng.random::<u32>()),
            1 => "exec 400".to_string(),
            2 => "yield".to_string(),
            _ => format!("transfer {}", other.0),
        });
    }
    lines[0] = format!("top: {}", lines[0]);
    lines.push(if rng.random_bool(0.5) { "exit".into() } else { "yield top".into() });
    lines.join("\n")
}

fn context_flush() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut fresh, mut resumed, mut cleared) = (0u32, 0u32, 0u32);
    for schedule in 0..500 {
        let pa = random_program(&mut rng, 0x2000_0400, B);
        let pb = random_program(&mut rng, 0x2000_0800, A);
        let mut epa = two_app_epa([&pa, &pb]);
        let mut snapshots: BTreeMap<String, Vec<Vec<u8>>> = BTreeMap::new();
        let names = |id: EnclaveId| if id == A { "ae1".to_string() } else { "ae2".to_string() };
        for action in 0..40 {
            let ctx = format!("schedule {schedule} action {action}");
            // Plant secrets tagged with the owner's id.
            if let Some(id) = epa.running() {
                for _ in 0..3 {
                    let r = [0, 1, 2, 5, 17, 31][rng.random_range(0..6)];
                    let mut secret = vec![TAG[0], TAG[1], id.0];
                    secret.extend((0..5).map(|_| rng.random_range(0..0x5e_u8)));
                    epa.hart_mut().regs[r] = secret;
                }
                let line = rng.random::<u32>() & !63;
                epa.hart_mut().cache_tags.insert(line);
            }
            let planted = epa.hart().regs.to_vec();
            let from = epa.trace().events().len();
            let other = if rng.random_bool(0.5) { A } else { B };
            let _ = match rng.random_range(0..10) {
                0..=4 => epa.step_once().map(|_| ()),
                5 => epa.suspend(SwitchReason::Interrupt),
                6 => epa.wakeup(other),
                7 => epa.handle_trap(TrapCause::ExternalInterrupt { line: 3 }),
                8 => epa.handle_trap(TrapCause::EcallTransfer { target: other }),
                _ => epa.handle_trap(TrapCause::EcallExit),
            };
            let new = &epa.trace().events()[from..];
            for e in new {
                match e.kind {
                    EventKind::Suspend => {
                        snapshots.insert(e.subject.clone(), planted.clone());
                    }
                    EventKind::Exit | EventKind::Kill => {
                        snapshots.remove(&e.subject);
                    }
                    _ => {}
                }
            }
            match epa.running() {
                None => {
                    ensure(epa.hart().is_zeroed() && epa.hart().pc == 0, || format!("{ctx}: idle hart not flushed"))?;
                    ensure(*epa.installed_pmp() == PmpUnit::new(), || format!("{ctx}: idle hart keeps PMP entries"))?;
                    cleared += 1;
                }
                Some(id) => {
                    let hart = epa.hart();
                    let leaked: Vec<u8> = tags_in(&hart.regs).into_iter().filter(|&t| t != id.0).collect();
                    ensure(leaked.is_empty(), || format!("{ctx}: {} holds secrets of {leaked:?}", names(id)))?;
                    if let Some(w) = new.last().filter(|e| e.kind == EventKind::Wakeup) {
                        match w.attr_str("from") {
                            Some("Sleeping") => {
                                ensure(hart.is_zeroed() && hart.pc == 0, || format!("{ctx}: fresh {} not zeroed", w.subject))?;
                                fresh += 1;
                            }
                            Some("Suspended") => {
                                let snap = snapshots.get(&w.subject).ok_or_else(|| format!("{ctx}: no snapshot of {}", w.subject))?;
                                let same = (0..32).filter(|&r| r != 10 && r != 11).all(|r| hart.regs[r] == snap[r]);
                                ensure(same, || format!("{ctx}: {} resumed with a different register file", w.subject))?;
                                ensure(hart.cache_tags.is_empty(), || format!("{ctx}: {} resumed with warm cache", w.subject))?;
                                resumed += 1;
                            }
                            other => return Err(format!("{ctx}: wakeup from {other:?}")),
                        }
                    }
                }
            }
            for (i, name) in [(A, "ae1"), (B, "ae2")] {
                if let Some(saved) = epa.saved_context(i) {
                    let leaked: Vec<u8> = tags_in(&saved.regs).into_iter().filter(|&t| t != i.0).collect();
                    ensure(leaked.is_empty(), || format!("{ctx}: saved context of {name} holds {leaked:?}"))?;
                }
            }
        }
    }
    ensure(fresh > 0 && resumed > 0, || format!("schedules too tame: {fresh} fresh, {resumed} resumed"))?;
    Ok(format!("500 schedules: {fresh} fresh wakeups zeroed, {resumed} resumptions cold and untainted, {cleared} idle states flushed"))
}

// ---------------------------------------------------------------------------
// 5. DMA gates

fn dma_layout() -> (Memory, EnclaveSet) {
    let mem = memory_with(Region::new(0x0, 0x8000), Region::new(0x2000_0000, 0x8000));
    let layout = vec![
        EnclaveDescriptor::new(EnclaveId(0), "ce", EnclaveKind::Crypto, Region::new(0x2000_0000, 0x1000)),
        EnclaveDescriptor::new(EnclaveId(1), "re", EnclaveKind::Runtime, Region::new(0x4000, 0x1000)),
        EnclaveDescriptor::new(EnclaveId(2), "ae1", EnclaveKind::App, Region::new(0x2000_1000, 0x1000))
            .with_program(assemble("exit").unwrap()),
        EnclaveDescriptor::new(EnclaveId(3), "ae2", EnclaveKind::App, Region::new(0x2000_2000, 0x1000))
            .with_program(assemble("exit").unwrap()),
        EnclaveDescriptor::new(EnclaveId(4), "ae3", EnclaveKind::App, Region::new(0x2000_4000, 0x2000))
            .with_program(assemble("exit").unwrap()),
    ];
    let set = EnclaveSet::new(layout, &mem).unwrap();
    (mem, set)
}

/// The four gates in order, each evaluated byte by byte.
fn dma_oracle(
    req: &DmaRequest,
    edges: &BTreeSet<(u8, u8)>,
    regions: &BTreeMap<u8, Region>,
    rows: &BTreeMap<u8, (u64, u64)>,
) -> DmaVerdict {
    if req.len == 0 || !edges.contains(&(req.src.0, req.dst.0)) {
        return DmaVerdict::PolicyDenied;
    }
    let (start, end) = (req.src_addr.0 as u64, req.src_addr.0 as u64 + req.len);
    if regions.iter().any(|(&id, &r)| id != req.src.0 && (start..end).any(|b| bytes_inside(r, b, 1))) {
        return DmaVerdict::PullForbidden;
    }
    if !(start..end).all(|b| bytes_inside(regions[&req.src.0], b, 1)) {
        return DmaVerdict::SourceOutOfRegion;
    }
    match rows.get(&req.dst.0) {
        Some(&(_, free)) if free >= req.len => DmaVerdict::Granted,
        _ => DmaVerdict::InsufficientSpace,
    }
}

fn dma_gates() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut mem, set) = dma_layout();
    let regions: BTreeMap<u8, Region> = set.iter().map(|d| (d.id.0, d.region)).collect();
    let apps: Vec<u8> = set.apps().map(|d| d.id.0).collect();
    let mut noise = vec![0u8; 0x8000];
    rng.fill_bytes(&mut noise);
    mem.write_phys(PhysAddr(0x2000_0000), &noise).unwrap();

    let mut csr = SecurityCsr::new(&set);
    let mut table = AvailabilityTable::new();
    let mut edges = BTreeSet::new();
    let mut rows: BTreeMap<u8, (u64, u64)> = BTreeMap::new();
    let mut tally: BTreeMap<String, u32> = BTreeMap::new();
    for n in 0..10_000 {
        if n % 50 == 0 {
            csr = SecurityCsr::new(&set);
            edges.clear();
            for &s in &apps {
                for &d in apps.iter().filter(|&&d| d != s) {
                    if rng.random_bool(0.6) {
                        csr.write(PrivilegeMode::Machine, EnclaveId(s), EnclaveId(d), true).unwrap();
                        edges.insert((s, d));
                    }
                }
            }
            table = AvailabilityTable::new();
            rows.clear();
            for &a in &apps {
                if rng.random_bool(0.85) {
                    let r = regions[&a];
                    let off = rng.random_range(0..r.size / 16) * 16;
                    let len = rng.random_range(0..=r.size - off);
                    let span = Region { base: PhysAddr(r.base.0 + off as u32), size: len };
                    table.on_enclave_exit(set.get(EnclaveId(a)).unwrap(), span).map_err(|e| e.to_string())?;
                    rows.insert(a, (span.base.0 as u64, len));
                }
            }
        }
        let src = EnclaveId(if rng.random_bool(0.85) { apps[rng.random_range(0..apps.len())] } else { rng.random_range(0..=5) });
        let dst = EnclaveId(if rng.random_bool(0.8) { apps[rng.random_range(0..apps.len())] } else { rng.random_range(0..=5) });
        let own = regions.get(&src.0).copied().unwrap_or(regions[&2]);
        let some = regions[&rng.random_range(0..=4u8)];
        let src_addr = match rng.random_range(0..20) {
            0..=8 => own.base.0 as u64 + rng.random_range(0..own.size),
            9..=11 => own.base.0 as u64 + own.size - rng.random_range(1..=64),
            12 => (own.base.0 as u64).saturating_sub(rng.random_range(1..=64)),
            13..=15 => some.base.0 as u64 + rng.random_range(0..some.size),
            16..=18 => 0x2000_0000 + rng.random_range(0..0x8000),
            _ => rng.random_range(0..0x8000),
        };
        let len = match rng.random_range(0..50) {
            0 => 0,
            1..=10 => rng.random_range(1..=16),
            11..=40 => rng.random_range(1..=0x400),
            _ => rng.random_range(0x400..=0x1100),
        };
        let req = DmaRequest { src, dst, src_addr: PhysAddr(src_addr as u32), len };
        let expect = dma_oracle(&req, &edges, &regions, &rows);
        let (mem_before, table_before) = (mem.clone(), table.clone());
        let got = adjudicate_and_transfer(&req, &csr, &mut table, &mut mem, &set);
        ensure(got == expect, || format!("request {n} {req:?}: got {got:?}, oracle {expect:?}"))?;
        *tally.entry(format!("{got:?}")).or_default() += 1;
        if got == DmaVerdict::Granted {
            let (base, free) = rows[&dst.0];
            let data = mem_before.read_phys(req.src_addr, len).unwrap();
            let mut expected_mem = mem_before;
            expected_mem.write_phys(PhysAddr(base as u32), &data).unwrap();
            ensure(mem == expected_mem, || format!("request {n}: granted copy differs from the reference copy"))?;
            rows.insert(dst.0, (base + len, free - len));
            let row = table.row(dst).unwrap();
            ensure((row.free_base.0 as u64, row.free_len) == rows[&dst.0], || format!("request {n}: row not advanced"))?;
        } else {
            ensure(mem == mem_before, || format!("request {n}: {got:?} modified memory"))?;
            ensure(table == table_before, || format!("request {n}: {got:?} modified the availability table"))?;
        }
    }
    ensure(tally.len() == 5, || format!("not every verdict exercised: {tally:?}"))?;
    Ok(format!("10000 requests match the reference; verdicts {tally:?}; rejections left memory and table unchanged"))
}

// ---------------------------------------------------------------------------
// 6. Mailbox exclusivity

fn random_request(rng: &mut ChaCha8Rng) -> MailboxMessage {
    let ops = [OpCode::AeadEncrypt, OpCode::AeadDecrypt, OpCode::Hash, OpCode::Sign, OpCode::Verify];
    let len = if rng.random_bool(0.02) { 4081 } else { rng.random_range(0..96) };
    let mut payload = vec![0; len];
    rng.fill_bytes(&mut payload);
    MailboxMessage::request(ops[rng.random_range(0..5)], EnclaveId(rng.random()), PhysAddr(rng.random()), payload)
}

fn efuse() -> EfuseStore {
    EfuseStore::new([1; 32], BTreeMap::from([("aead".to_string(), [2; 32]), ("sign".to_string(), [3; 32])]))
}

fn mailbox_exclusivity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mem = memory_with(FLASH, RAM);
    let efuse = efuse();
    let mut trng = Trng::new(6);
    let mut mb = Mailbox::new(MAILBOX);
    let kinds = [EnclaveKind::App, EnclaveKind::Runtime, EnclaveKind::Crypto];
    let (mut denied, mut crypto_ok) = (0u32, 0u32);
    for seq in 0..10_000 {
        for _ in 0..rng.random_range(1..=8) {
            let caller = Caller { id: EnclaveId(rng.random_range(0..8)), kind: kinds[rng.random_range(0..3)] };
            let (state, image) = (mb.state(), mb.buffer(&mem));
            let result = match rng.random_range(0..3) {
                0 => mb.put(&mut mem, caller, &random_request(&mut rng)).map(|_| ()),
                1 => mb.get(&mut mem, caller).map(|_| ()),
                _ => {
                    let _ = se_process(&mut mb, &mut mem, &efuse, &mut trng);
                    continue;
                }
            };
            if caller.kind != EnclaveKind::Crypto {
                ensure(result == Err(MailboxError::Denied), || format!("sequence {seq}: {caller:?} got {result:?}"))?;
                ensure(mb.state() == state && mb.buffer(&mem) == image, || format!("sequence {seq}: denied call changed the slot"))?;
                denied += 1;
            } else if result.is_ok() {
                crypto_ok += 1;
            }
        }
    }
    // The same rule end to end: an app touching the mailbox window is killed.
    for probe in 0..100u32 {
        let addr = MAILBOX.base.0 + (probe * 40) % 0x1000;
        let op = if probe % 2 == 0 { format!("read {addr:x} 4 -> r1") } else { format!("write {addr:x} 01") };
        let mut epa = two_app_epa([&format!("{op}\nexit"), "exit"]);
        epa.set_launch_order([A]);
        epa.run_until_idle().map_err(|e| e.to_string())?;
        ensure(epa.is_faulted(A), || format!("app access `{op}` to the mailbox was not trapped"))?;
    }
    ensure(crypto_ok > 0, || "crypto caller never succeeded; fuzzer is vacuous".into())?;
    Ok(format!("10000 sequences: {denied} non-crypto calls all denied without effect ({crypto_ok} crypto successes); 100 app probes killed"))
}

// ---------------------------------------------------------------------------
// 7. DICE chain

fn qr_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/qr_payment")
}

fn boot_report(trace: &[xine_core::TraceEvent]) -> Result<BootReport, String> {
    let boot = trace.first().filter(|e| e.kind == EventKind::Boot).ok_or("first event is not Boot")?;
    serde_json::from_value(Value::Object(boot.attrs.clone())).map_err(|e| e.to_string())
}

fn dice_chain() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let config = qr_payment_scenario();
    for layer in 0..3 {
        for flip in 0..100 {
            let mut c = config.clone();
            let code = c.images[layer].code_mut();
            let bit = rng.random_range(0..code.len() * 8);
            code[bit / 8] ^= 1 << (bit % 8);
            let out = scenario::run(&c, None).map_err(|e| e.to_string())?;
            let report = boot_report(&out.trace)?;
            let expected = BootOutcome::Failed { layer: c.images[layer].layer(), reason: xine_core::boot::BootFailure::MeasurementMismatch };
            ensure(report.outcome == expected, || format!("layer {layer} flip {flip} (bit {bit}): {:?}", report.outcome))?;
            ensure(out.status == RunStatus::BootFailed, || format!("layer {layer} flip {flip}: status {:?}", out.status))?;
            let wakeups = out.trace.iter().filter(|e| e.kind == EventKind::Wakeup).count();
            ensure(wakeups == 0, || format!("layer {layer} flip {flip}: {wakeups} wakeups after failed boot"))?;
        }
    }
    let out = scenario::run(&config, None).map_err(|e| e.to_string())?;
    let golden = std::fs::read_to_string(qr_dir().join("qr_payment.measurements")).map_err(|e| e.to_string())?;
    let produced = measurements_file(&boot_report(&out.trace)?);
    ensure(produced == golden, || format!("measurements differ:\n{produced}\nvs committed\n{golden}"))?;
    Ok("300 single-bit tampers failed at the tampered layer with no wakeups; golden measurements reproduce byte-exactly".into())
}

// ---------------------------------------------------------------------------
// 8. AEAD through the mailbox

fn se_call(mb: &mut Mailbox, mem: &mut Memory, efuse: &EfuseStore, trng: &mut Trng, op: OpCode, payload: Vec<u8>) -> (Result<(), SeError>, MailboxMessage) {
    let ce = Caller { id: EnclaveId(0), kind: EnclaveKind::Crypto };
    mb.put(mem, ce, &MailboxMessage::request(op, EnclaveId(2), PhysAddr(0), payload)).expect("slot free");
    let r = se_process(mb, mem, efuse, trng);
    (r, mb.get(mem, ce).expect("response ready"))
}

fn aead() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mem = memory_with(FLASH, RAM);
    let efuse = efuse();
    let mut trng = Trng::new(8);
    let mut mb = Mailbox::new(MAILBOX);
    let reference = ChaCha20Poly1305::new(&[2u8; 32].into());
    for n in 0..1000 {
        let mut pt = vec![0; rng.random_range(0..=2048)];
        rng.fill_bytes(&mut pt);
        let (r, sealed) = se_call(&mut mb, &mut mem, &efuse, &mut trng, OpCode::AeadEncrypt, pt.clone());
        ensure(r.is_ok() && sealed.header.status == 0, || format!("round trip {n}: encrypt failed {r:?}"))?;
        let sealed = sealed.payload;
        ensure(sealed.len() == pt.len() + 28, || format!("round trip {n}: sealed length {}", sealed.len()))?;
        let nonce: [u8; 12] = sealed[..12].try_into().unwrap();
        let by_reference = reference.decrypt(&nonce.into(), &sealed[12..]).map_err(|_| format!("round trip {n}: reference cannot open"))?;
        ensure(by_reference == pt, || format!("round trip {n}: reference plaintext differs"))?;
        let (r, opened) = se_call(&mut mb, &mut mem, &efuse, &mut trng, OpCode::AeadDecrypt, sealed.clone());
        ensure(r.is_ok() && opened.payload == pt, || format!("round trip {n}: decrypt {r:?}"))?;

        let mut bad = sealed;
        let bit = rng.random_range(0..bad.len() * 8);
        bad[bit / 8] ^= 1 << (bit % 8);
        let (r, resp) = se_call(&mut mb, &mut mem, &efuse, &mut trng, OpCode::AeadDecrypt, bad);
        ensure(r == Err(SeError::AuthFailure), || format!("corruption {n} (bit {bit}): {r:?}"))?;
        ensure(resp.header.status == SeError::AuthFailure.status() && resp.payload.is_empty(), || {
            format!("corruption {n}: response leaked {} bytes", resp.payload.len())
        })?;
    }
    Ok("1000 round trips opened (and match the reference cipher); 1000 single-bit corruptions all AuthFailure".into())
}

// ---------------------------------------------------------------------------
// 9. QR payment, end to end

const GOLDEN_KINDS: [EventKind; 26] = {
    use EventKind::*;
    [
        Boot, Wakeup, DmaVerdict, Exit, // camera
        Wakeup, Suspend, Wakeup, MailboxPut, SeOp, MailboxGet, Exit, // parser hashes the record
        Wakeup, Suspend, Wakeup, MailboxPut, SeOp, MailboxGet, Exit, // parser seals it
        Wakeup, DmaVerdict, Exit, AvailabilityUpdate, // parser pushes to the uplink
        Wakeup, Exit, AvailabilityUpdate, // uplink
        CloudVerify,
    ]
};

fn qr_end_to_end() -> Outcome {
    let config = qr_payment_scenario();
    let ae1 = Region::new(0x2000_8000, 0x2000);
    let ae3 = Region::new(0x2000_c000, 0x2000);
    let mut snapshots: Vec<Vec<u8>> = Vec::new();
    let out = scenario::run_observed(&config, None, |epa| {
        snapshots.push(epa.memory().snapshot(ae1).expect("mapped"));
        snapshots.push(epa.memory().snapshot(ae3).expect("mapped"));
    })
    .map_err(|e| e.to_string())?;
    ensure(out.status.code() == 0, || format!("status {:?}, failures {:?}", out.status, out.failures))?;
    ensure(out.cloud == [CloudVerdict::Accepted], || format!("cloud decisions {:?}", out.cloud))?;
    let kinds: Vec<EventKind> = out.trace.iter().map(|e| e.kind).collect();
    ensure(kinds == GOLDEN_KINDS, || format!("event kinds {kinds:?}"))?;

    let plaintext = out.epa.memory().read_phys(PhysAddr(0x2000_a400), 64).map_err(|e| e.to_string())?;
    ensure(plaintext.iter().any(|&b| b != 0), || "parser record is empty".into())?;
    for (i, snap) in snapshots.iter().enumerate() {
        for window in plaintext.windows(16) {
            ensure(!snap.windows(16).any(|w| w == window), || {
                format!("plaintext found in {} after observation {}", if i % 2 == 0 { "ae1" } else { "ae3" }, i / 2)
            })?;
        }
    }
    Ok(format!("status 0, cloud accepted, 26-event golden sequence; {} snapshots free of parser plaintext", snapshots.len()))
}

// ---------------------------------------------------------------------------
// 10. Determinism

#[derive(Clone, Default)]
struct Shared(Rc<RefCell<Vec<u8>>>);

impl Write for Shared {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.borrow_mut().extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

fn determinism() -> Outcome {
    let config = qr_payment_scenario();
    let runs: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let sink = Shared::default();
            scenario::run(&config, Some(Box::new(sink.clone()))).map(|_| sink.0.take())
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    ensure(!runs[0].is_empty(), || "empty trace".into())?;
    ensure(runs[0] == runs[1], || "traces differ".into())?;
    Ok(format!("two runs wrote identical {}-byte traces", runs[0].len()))
}

// SPDX-License-Identifier: Apache-2.0

//! Enclave micro-programs: the event-level stand-in for machine code.
//!
//! A listing has one op per line:
//!
//! ```text
//! start: read 20008000 16 -> r1     # load 16 bytes into r1
//!        write 0x20008100 deadbeef  # literal bytes, or a register
//!        exec 10000                 # instruction fetch check
//!        crypto aead_encrypt 20008100 64 20008800
//!        transfer ae2
//!        dma_push ae3 20008800 92
//!        hash r1..r2 -> r3
//!        yield start                # suspend, resume at `start`
//!        exit
//! ```
//!
//! Addresses are hex (the `0x` prefix is optional), lengths are decimal
//! unless prefixed with `0x`. Registers hold byte strings. A program must
//! end with `exit` or with a `yield <label>` loop.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use thiserror::Error;

use crate::crypto;
use crate::enclaves::EnclaveId;
use crate::epa::{Context, TrapCause};
use crate::machine::{AccessError, AccessKind, Memory, PhysAddr, PmpUnit, PrivilegeMode, TrapReason};
use crate::se::OpCode;

pub const NUM_REGS: usize = 32;

/// Longest single load; also the mailbox size.
pub const MAX_ACCESS: u64 = 4096;

/// Cache line size used for the abstract cache tag set.
pub const CACHE_LINE: u32 = 64;

/// Bytes checked by one `exec`, i.e. one instruction fetch.
pub const FETCH_LEN: u64 = 4;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum WriteSource {
    Reg(u8),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum MicroOp {
    Read { addr: PhysAddr, len: u64, dst: u8 },
    Write { addr: PhysAddr, src: WriteSource },
    ExecAt { addr: PhysAddr },
    EcallCrypto { op: OpCode, msg_addr: PhysAddr, msg_len: u64, result_addr: PhysAddr },
    EcallTransfer { target: EnclaveId },
    EcallExit,
    DmaPush { dst: EnclaveId, src_addr: PhysAddr, len: u64 },
    /// Suspend voluntarily; resume at `resume` or at the next op.
    Yield { resume: Option<usize> },
    ComputeHash { first: u8, last: u8, dst: u8 },
}

impl fmt::Display for MicroOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MicroOp::Read { addr, len, dst } => write!(f, "read {:x} {} -> r{}", addr.0, len, dst),
            MicroOp::Write { addr, src: WriteSource::Reg(r) } => write!(f, "write {:x} r{}", addr.0, r),
            MicroOp::Write { addr, src: WriteSource::Bytes(b) } => write!(f, "write {:x} {}", addr.0, hex::encode(b)),
            MicroOp::ExecAt { addr } => write!(f, "exec {:x}", addr.0),
            MicroOp::EcallCrypto { op, msg_addr, msg_len, result_addr } => {
                write!(f, "crypto {} {:x} {} {:x}", op.mnemonic(), msg_addr.0, msg_len, result_addr.0)
            }
            MicroOp::EcallTransfer { target } => write!(f, "transfer {}", target.0),
            MicroOp::EcallExit => f.write_str("exit"),
            MicroOp::DmaPush { dst, src_addr, len } => write!(f, "dma_push {} {:x} {}", dst.0, src_addr.0, len),
            MicroOp::Yield { resume: None } => f.write_str("yield"),
            MicroOp::Yield { resume: Some(pc) } => write!(f, "yield @{pc}"),
            MicroOp::ComputeHash { first, last, dst } => write!(f, "hash r{first}..r{last} -> r{dst}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MicroProgram {
    pub ops: Vec<MicroOp>,
    pub labels: BTreeMap<String, usize>,
}

impl MicroProgram {
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Renders the program back into listing form. Labels are emitted as
    /// `L<index>` names so the result reassembles to an identical program.
    pub fn to_listing(&self) -> String {
        let mut out = String::new();
        for (i, op) in self.ops.iter().enumerate() {
            let line = match op {
                MicroOp::Yield { resume: Some(pc) } => format!("yield L{pc}"),
                other => other.to_string(),
            };
            out.push_str(&format!("L{i}: {line}\n"));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum AssembleError {
    #[error("line {line}: {reason}")]
    ParseError { line: usize, reason: String },
    #[error("line {line}: undefined label `{label}`")]
    UndefinedLabel { line: usize, label: String },
}

fn parse_err(line: usize, reason: impl Into<String>) -> AssembleError {
    AssembleError::ParseError { line, reason: reason.into() }
}

/// Assembles listings, resolving enclave names through an optional table.
#[derive(Clone, Debug, Default)]
pub struct Assembler {
    enclaves: HashMap<String, EnclaveId>,
}

impl Assembler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_enclaves<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = (S, EnclaveId)>,
        S: Into<String>,
    {
        Self { enclaves: names.into_iter().map(|(n, id)| (n.into(), id)).collect() }
    }

    pub fn assemble(&self, listing: &str) -> Result<MicroProgram, AssembleError> {
        let mut ops = Vec::new();
        let mut labels = BTreeMap::new();
        // (op index, line, label) for yields whose target is resolved later.
        let mut pending = Vec::new();
        let mut last_line = 0;

        for (n, raw) in listing.lines().enumerate() {
            let line_no = n + 1;
            let mut text = raw.split('#').next().unwrap_or("").trim();
            if text.is_empty() {
                continue;
            }
            if let Some((head, rest)) = text.split_once(':') {
                let name = head.trim();
                if is_identifier(name) {
                    if labels.insert(name.to_string(), ops.len()).is_some() {
                        return Err(parse_err(line_no, format!("duplicate label `{name}`")));
                    }
                    text = rest.trim();
                    if text.is_empty() {
                        continue;
                    }
                }
            }
            let tokens: Vec<&str> = text.split_whitespace().collect();
            let op = self.parse_op(line_no, &tokens, ops.len(), &mut pending)?;
            ops.push(op);
            last_line = line_no;
        }

        for (index, line, label) in pending {
            let target = *labels
                .get(&label)
                .ok_or_else(|| AssembleError::UndefinedLabel { line, label: label.clone() })?;
            if target >= ops.len() {
                return Err(parse_err(line, format!("label `{label}` points past the end")));
            }
            ops[index] = MicroOp::Yield { resume: Some(target) };
        }

        match ops.last() {
            None => Err(parse_err(0, "empty program")),
            Some(MicroOp::EcallExit) | Some(MicroOp::Yield { resume: Some(_) }) => Ok(MicroProgram { ops, labels }),
            Some(_) => Err(parse_err(last_line, "program must end with `exit` or a `yield <label>` loop")),
        }
    }

    fn parse_op(
        &self,
        line: usize,
        t: &[&str],
        index: usize,
        pending: &mut Vec<(usize, usize, String)>,
    ) -> Result<MicroOp, AssembleError> {
        let arity = |n: usize| {
            if t.len() == n {
                Ok(())
            } else {
                Err(parse_err(line, format!("`{}` takes {} operand(s)", t[0], n - 1)))
            }
        };
        match t[0] {
            "read" => {
                arity(5)?;
                if t[3] != "->" {
                    return Err(parse_err(line, "expected `->`"));
                }
                Ok(MicroOp::Read { addr: addr(line, t[1])?, len: length(line, t[2])?, dst: reg(line, t[4])? })
            }
            "write" => {
                arity(3)?;
                let src = if t[2].starts_with('r') {
                    WriteSource::Reg(reg(line, t[2])?)
                } else {
                    let digits = t[2].strip_prefix("0x").unwrap_or(t[2]);
                    let bytes = hex::decode(digits).map_err(|e| parse_err(line, format!("bad hex bytes: {e}")))?;
                    if bytes.is_empty() || bytes.len() as u64 > MAX_ACCESS {
                        return Err(parse_err(line, "literal must hold 1..=4096 bytes"));
                    }
                    WriteSource::Bytes(bytes)
                };
                Ok(MicroOp::Write { addr: addr(line, t[1])?, src })
            }
            "exec" => {
                arity(2)?;
                Ok(MicroOp::ExecAt { addr: addr(line, t[1])? })
            }
            "crypto" => {
                arity(5)?;
                let op = OpCode::from_mnemonic(t[1]).ok_or_else(|| parse_err(line, format!("unknown crypto op `{}`", t[1])))?;
                let msg_len: u64 = number(line, t[3])?;
                if msg_len > MAX_ACCESS {
                    return Err(parse_err(line, "message longer than the mailbox"));
                }
                Ok(MicroOp::EcallCrypto { op, msg_addr: addr(line, t[2])?, msg_len, result_addr: addr(line, t[4])? })
            }
            "transfer" => {
                arity(2)?;
                Ok(MicroOp::EcallTransfer { target: self.enclave(line, t[1])? })
            }
            "dma_push" => {
                arity(4)?;
                Ok(MicroOp::DmaPush { dst: self.enclave(line, t[1])?, src_addr: addr(line, t[2])?, len: length(line, t[3])? })
            }
            "hash" => {
                arity(4)?;
                if t[2] != "->" {
                    return Err(parse_err(line, "expected `->`"));
                }
                let (a, b) = t[1].split_once("..").ok_or_else(|| parse_err(line, "expected register range rA..rB"))?;
                let (first, last) = (reg(line, a)?, reg(line, b)?);
                if first > last {
                    return Err(parse_err(line, "empty register range"));
                }
                Ok(MicroOp::ComputeHash { first, last, dst: reg(line, t[3])? })
            }
            "yield" => match t.len() {
                1 => Ok(MicroOp::Yield { resume: None }),
                2 => {
                    pending.push((index, line, t[1].to_string()));
                    Ok(MicroOp::Yield { resume: None })
                }
                _ => Err(parse_err(line, "`yield` takes at most one label")),
            },
            "exit" => {
                arity(1)?;
                Ok(MicroOp::EcallExit)
            }
            other => Err(parse_err(line, format!("unknown op `{other}`"))),
        }
    }

    fn enclave(&self, line: usize, token: &str) -> Result<EnclaveId, AssembleError> {
        if let Some(id) = self.enclaves.get(token) {
            return Ok(*id);
        }
        token
            .parse::<u8>()
            .map(EnclaveId)
            .map_err(|_| parse_err(line, format!("unknown enclave `{token}`")))
    }
}

/// Assembles a listing that names enclaves by numeric id only.
pub fn assemble(listing: &str) -> Result<MicroProgram, AssembleError> {
    Assembler::new().assemble(listing)
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn addr(line: usize, token: &str) -> Result<PhysAddr, AssembleError> {
    let digits = token.strip_prefix("0x").unwrap_or(token);
    u32::from_str_radix(digits, 16)
        .map(PhysAddr)
        .map_err(|_| parse_err(line, format!("bad address `{token}`")))
}

fn number(line: usize, token: &str) -> Result<u64, AssembleError> {
    let parsed = match token.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => token.parse(),
    };
    parsed.map_err(|_| parse_err(line, format!("bad number `{token}`")))
}

fn length(line: usize, token: &str) -> Result<u64, AssembleError> {
    let n = number(line, token)?;
    if n == 0 || n > MAX_ACCESS {
        return Err(parse_err(line, format!("length {n} outside 1..=4096")));
    }
    Ok(n)
}

fn reg(line: usize, token: &str) -> Result<u8, AssembleError> {
    token
        .strip_prefix('r')
        .and_then(|n| n.parse::<u8>().ok())
        .filter(|&n| (n as usize) < NUM_REGS)
        .ok_or_else(|| parse_err(line, format!("bad register `{token}`")))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Continue,
    Trapped(TrapCause),
}

fn fault(err: AccessError, addr: PhysAddr, kind: AccessKind) -> TrapCause {
    match err {
        AccessError::ZeroLength => TrapCause::IllegalInstruction { reason: "zero-length access".into() },
        AccessError::Trap(t) => match t.reason {
            TrapReason::PmpViolation(_) => TrapCause::PmpViolation { addr, kind },
            TrapReason::UnmappedAddress => TrapCause::UnmappedAccess { addr, kind },
        },
    }
}

fn touch(ctx: &mut Context, addr: PhysAddr, len: u64) {
    let first = addr.0 / CACHE_LINE;
    let last = ((addr.as_u64() + len - 1) / u64::from(CACHE_LINE)) as u32;
    for line in first..=last {
        ctx.cache_tags.insert(line * CACHE_LINE);
    }
}

/// Executes the op at `ctx.pc` in U-mode under `pmp`.
///
/// Memory ops that fault leave `pc` in place. Ecall-style ops advance `pc`
/// (or jump to a yield's resume label) before reporting the trap, so the
/// enclave resumes past the call.
pub fn step(program: &MicroProgram, ctx: &mut Context, mem: &mut Memory, pmp: &PmpUnit) -> StepOutcome {
    let Some(op) = program.ops.get(ctx.pc) else {
        return StepOutcome::Trapped(TrapCause::IllegalInstruction { reason: format!("pc {} out of bounds", ctx.pc) });
    };
    let mode = PrivilegeMode::User;
    let next = ctx.pc + 1;
    let trapped = |cause| StepOutcome::Trapped(cause);
    match op {
        MicroOp::Read { addr, len, dst } => match mem.read(pmp, mode, *addr, *len) {
            Ok(bytes) => {
                touch(ctx, *addr, *len);
                ctx.regs[*dst as usize] = bytes;
            }
            Err(e) => return trapped(fault(e, *addr, AccessKind::Read)),
        },
        MicroOp::Write { addr, src } => {
            let bytes = match src {
                WriteSource::Reg(r) => ctx.regs[*r as usize].clone(),
                WriteSource::Bytes(b) => b.clone(),
            };
            match mem.write(pmp, mode, *addr, &bytes) {
                Ok(()) => touch(ctx, *addr, bytes.len() as u64),
                Err(e) => return trapped(fault(e, *addr, AccessKind::Write)),
            }
        }
        MicroOp::ExecAt { addr } => match mem.fetch(pmp, mode, *addr, FETCH_LEN) {
            Ok(()) => touch(ctx, *addr, FETCH_LEN),
            Err(e) => return trapped(fault(e, *addr, AccessKind::Execute)),
        },
        MicroOp::ComputeHash { first, last, dst } => {
            let parts: Vec<&[u8]> = ctx.regs[*first as usize..=*last as usize].iter().map(Vec::as_slice).collect();
            ctx.regs[*dst as usize] = crypto::digest_parts(&parts).to_vec();
        }
        MicroOp::EcallCrypto { op, msg_addr, msg_len, result_addr } => {
            ctx.pc = next;
            return trapped(TrapCause::EcallServiceRequest(crate::epa::ServiceRequest {
                op: *op,
                msg_addr: *msg_addr,
                msg_len: *msg_len,
                result_addr: *result_addr,
            }));
        }
        MicroOp::EcallTransfer { target } => {
            ctx.pc = next;
            return trapped(TrapCause::EcallTransfer { target: *target });
        }
        MicroOp::EcallExit => {
            ctx.pc = next;
            return trapped(TrapCause::EcallExit);
        }
        MicroOp::DmaPush { dst, src_addr, len } => {
            ctx.pc = next;
            return trapped(TrapCause::DmaRequestSubmitted { dst: *dst, src_addr: *src_addr, len: *len });
        }
        MicroOp::Yield { resume } => {
            ctx.pc = resume.unwrap_or(next);
            return trapped(TrapCause::EcallYield);
        }
    }
    ctx.pc = next;
    StepOutcome::Continue
}

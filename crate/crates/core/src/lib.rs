// SPDX-License-Identifier: Apache-2.0

//! Deterministic simulator of a PMP-isolated enclave TEE on a single
//! RISC-V hart: enclave lifecycle and context switching, an on-chip
//! secure element behind a mailbox, CSR-gated DMA and a DICE boot chain.

pub mod boot;
pub mod crypto;
pub mod dma;
pub mod enclaves;
pub mod epa;
pub mod machine;
pub mod scenario;
pub mod se;
pub mod workload;

pub use boot::{BootImage, BootLayer, BootOutcome, BootReport};
pub use dma::{DmaRequest, DmaVerdict};
pub use enclaves::{EnclaveDescriptor, EnclaveId, EnclaveKind, EnclaveSet};
pub use epa::{Context, Epa, EpaError, LifecycleState, StepReport, SwitchReason, TrapCause};
pub use machine::{AccessKind, Memory, PhysAddr, PmpUnit, PrivilegeMode, Region};
pub use scenario::trace::{EventKind, TraceEvent};
pub use workload::{assemble, MicroProgram};

// SPDX-License-Identifier: Apache-2.0

//! Secure element: mailbox, SE-side service core, TRNG and eFuse store.
//!
//! The mailbox is a single 4096-byte slot at the mailbox MMIO window. A
//! frame is a 16-byte little-endian header followed by the payload:
//!
//! ```text
//! 0      op code        (u8)
//! 1      requester id   (u8)
//! 2      status         (u8, 0 = ok)
//! 3      reserved
//! 4..8   payload length (u32)
//! 8..12  result address (u32)
//! 12..16 reserved
//! ```
//!
//! Only the crypto enclave may put or get frames.

use std::collections::BTreeMap;
use std::fmt;

use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, CryptoError, Key, AEAD_OVERHEAD, DIGEST_LEN, NONCE_LEN, PUBLIC_KEY_LEN, SIGNATURE_LEN};
use crate::enclaves::{EnclaveId, EnclaveKind};
use crate::epa::ServiceRequest;
use crate::machine::{AccessError, Memory, PhysAddr, PmpUnit, PrivilegeMode, Region};

pub const MAILBOX_SIZE: usize = 4096;
pub const HEADER_LEN: usize = 16;
pub const MAILBOX_CAPACITY: usize = MAILBOX_SIZE - HEADER_LEN;

/// Device key slot used for authenticated encryption.
pub const AEAD_KEY: &str = "aead";
/// Device key slot holding the Ed25519 signing seed.
pub const SIGN_KEY: &str = "sign";
/// Slot filled at boot with the sealing key derived from the last CDI.
pub const SEAL_KEY: &str = "seal";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpCode {
    AeadEncrypt = 1,
    AeadDecrypt = 2,
    Hash = 3,
    Sign = 4,
    Verify = 5,
}

impl OpCode {
    pub const ALL: [OpCode; 5] = [OpCode::AeadEncrypt, OpCode::AeadDecrypt, OpCode::Hash, OpCode::Sign, OpCode::Verify];

    pub fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|op| *op as u8 == b)
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            OpCode::AeadEncrypt => "aead_encrypt",
            OpCode::AeadDecrypt => "aead_decrypt",
            OpCode::Hash => "hash",
            OpCode::Sign => "sign",
            OpCode::Verify => "verify",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.mnemonic() == s)
    }

    /// Length of the response to a request carrying `payload_len` bytes.
    /// Decrypt of a frame shorter than nonce plus tag yields zero here and
    /// an authentication failure at the SE.
    pub fn response_len(self, payload_len: usize) -> usize {
        match self {
            OpCode::AeadEncrypt => payload_len + AEAD_OVERHEAD,
            OpCode::AeadDecrypt => payload_len.saturating_sub(AEAD_OVERHEAD),
            OpCode::Hash => DIGEST_LEN,
            OpCode::Sign => SIGNATURE_LEN,
            OpCode::Verify => 1,
        }
    }
}

impl fmt::Display for OpCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MailboxHeader {
    pub op_code: OpCode,
    pub requester: EnclaveId,
    pub status: u8,
    pub result_addr: PhysAddr,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MailboxMessage {
    pub header: MailboxHeader,
    pub payload: Vec<u8>,
}

impl MailboxMessage {
    pub fn request(op_code: OpCode, requester: EnclaveId, result_addr: PhysAddr, payload: Vec<u8>) -> Self {
        Self { header: MailboxHeader { op_code, requester, status: 0, result_addr }, payload }
    }

    pub fn payload_len(&self) -> usize {
        self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut frame = Vec::with_capacity(HEADER_LEN + self.payload.len());
        frame.push(self.header.op_code as u8);
        frame.push(self.header.requester.0);
        frame.push(self.header.status);
        frame.push(0);
        frame.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        frame.extend_from_slice(&self.header.result_addr.0.to_le_bytes());
        frame.extend_from_slice(&[0; 4]);
        frame.extend_from_slice(&self.payload);
        frame
    }

    /// Decodes a frame from the start of a mailbox buffer.
    pub fn decode(buffer: &[u8]) -> Result<Self, SeError> {
        if buffer.len() < HEADER_LEN {
            return Err(SeError::OversizedPayload);
        }
        let op_code = OpCode::from_byte(buffer[0]).ok_or(SeError::BadOpCode(buffer[0]))?;
        let len = u32::from_le_bytes(buffer[4..8].try_into().expect("4 bytes")) as usize;
        if len > buffer.len() - HEADER_LEN {
            return Err(SeError::OversizedPayload);
        }
        Ok(Self {
            header: MailboxHeader {
                op_code,
                requester: EnclaveId(buffer[1]),
                status: buffer[2],
                result_addr: PhysAddr(u32::from_le_bytes(buffer[8..12].try_into().expect("4 bytes"))),
            },
            payload: buffer[HEADER_LEN..HEADER_LEN + len].to_vec(),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MailboxState {
    #[default]
    Empty,
    RequestPending,
    ResponseReady,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Caller {
    pub id: EnclaveId,
    pub kind: EnclaveKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum MailboxError {
    #[error("mailbox access denied: caller is not the crypto enclave")]
    Denied,
    #[error("mailbox slot occupied ({0:?})")]
    Full(MailboxState),
    #[error("no response ready ({0:?})")]
    NotReady(MailboxState),
    #[error("payload exceeds the mailbox capacity")]
    Oversized,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mailbox {
    base: PhysAddr,
    state: MailboxState,
}

impl Mailbox {
    pub fn new(window: Region) -> Self {
        debug_assert!(window.size >= MAILBOX_SIZE as u64);
        Self { base: window.base, state: MailboxState::Empty }
    }

    pub fn state(&self) -> MailboxState {
        self.state
    }

    pub fn region(&self) -> Region {
        Region { base: self.base, size: MAILBOX_SIZE as u64 }
    }

    pub fn put(&mut self, mem: &mut Memory, caller: Caller, msg: &MailboxMessage) -> Result<(), MailboxError> {
        if caller.kind != EnclaveKind::Crypto {
            return Err(MailboxError::Denied);
        }
        if self.state != MailboxState::Empty {
            return Err(MailboxError::Full(self.state));
        }
        if msg.payload_len() > MAILBOX_CAPACITY {
            return Err(MailboxError::Oversized);
        }
        mem.write_phys(self.base, &msg.encode()).expect("mailbox window is mapped");
        self.state = MailboxState::RequestPending;
        Ok(())
    }

    /// Takes the response and scrubs the slot.
    pub fn get(&mut self, mem: &mut Memory, caller: Caller) -> Result<MailboxMessage, MailboxError> {
        if caller.kind != EnclaveKind::Crypto {
            return Err(MailboxError::Denied);
        }
        if self.state != MailboxState::ResponseReady {
            return Err(MailboxError::NotReady(self.state));
        }
        let buffer = self.buffer(mem);
        let msg = MailboxMessage::decode(&buffer).expect("SE core writes well-formed responses");
        mem.scrub(self.region()).expect("mailbox window is mapped");
        self.state = MailboxState::Empty;
        Ok(msg)
    }

    pub fn buffer(&self, mem: &Memory) -> Vec<u8> {
        mem.read_phys(self.base, MAILBOX_SIZE as u64).expect("mailbox window is mapped")
    }
}

/// Key material fused into the SE.
#[derive(Clone, PartialEq, Eq, Default)]
pub struct EfuseStore {
    uds: Key,
    device_keys: BTreeMap<String, Key>,
}

impl fmt::Debug for EfuseStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EfuseStore")
            .field("uds", &"<redacted>")
            .field("device_keys", &self.device_keys.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl EfuseStore {
    pub fn new(uds: Key, device_keys: BTreeMap<String, Key>) -> Self {
        Self { uds, device_keys }
    }

    /// Root secret; only the boot chain reads it.
    pub(crate) fn uds(&self) -> &Key {
        &self.uds
    }

    pub(crate) fn key(&self, id: &str) -> Result<&Key, SeError> {
        self.device_keys.get(id).ok_or_else(|| SeError::MissingKey(id.to_string()))
    }

    pub(crate) fn install(&mut self, id: &str, key: Key) {
        self.device_keys.insert(id.to_string(), key);
    }

    /// Every secret held, for confinement audits in tests.
    pub fn secrets_for_audit(&self) -> Vec<Key> {
        std::iter::once(self.uds).chain(self.device_keys.values().copied()).collect()
    }
}

/// Deterministic stand-in for the TRNG: draw `n` is the ChaCha20 keystream
/// of `seed` on stream `n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trng {
    seed: u64,
    counter: u64,
}

impl Trng {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn fill(&mut self, out: &mut [u8]) {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.counter);
        rng.fill_bytes(out);
        self.counter += 1;
    }

    pub fn nonce(&mut self) -> [u8; NONCE_LEN] {
        let mut n = [0; NONCE_LEN];
        self.fill(&mut n);
        n
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum SeError {
    #[error("mailbox holds no pending request")]
    NotPending,
    #[error("bad op code {0:#04x}")]
    BadOpCode(u8),
    #[error("authentication failure")]
    AuthFailure,
    #[error("payload or response exceeds the mailbox capacity")]
    OversizedPayload,
    #[error("device key `{0}` not provisioned")]
    MissingKey(String),
    #[error("malformed request: {0}")]
    Malformed(&'static str),
}

impl SeError {
    pub fn status(&self) -> u8 {
        match self {
            SeError::NotPending => 1,
            SeError::BadOpCode(_) => 2,
            SeError::AuthFailure => 3,
            SeError::OversizedPayload => 4,
            SeError::MissingKey(_) => 5,
            SeError::Malformed(_) => 6,
        }
    }
}

fn execute(op: OpCode, payload: &[u8], efuse: &EfuseStore, trng: &mut Trng) -> Result<Vec<u8>, SeError> {
    match op {
        OpCode::AeadEncrypt => {
            let key = efuse.key(AEAD_KEY)?;
            Ok(crypto::aead_seal(key, &trng.nonce(), payload))
        }
        OpCode::AeadDecrypt => {
            let key = efuse.key(AEAD_KEY)?;
            crypto::aead_open(key, payload).map_err(|e| match e {
                CryptoError::AuthFailure | CryptoError::Truncated => SeError::AuthFailure,
                CryptoError::BadPublicKey => SeError::Malformed("public key"),
            })
        }
        OpCode::Hash => Ok(crypto::digest(payload).to_vec()),
        OpCode::Sign => {
            let key = efuse.key(SIGN_KEY)?;
            Ok(crypto::sign(key, &crypto::digest(payload)).to_vec())
        }
        OpCode::Verify => {
            let key = efuse.key(SIGN_KEY)?;
            if payload.len() < SIGNATURE_LEN {
                return Err(SeError::Malformed("verify payload shorter than a signature"));
            }
            let (sig, msg) = payload.split_at(SIGNATURE_LEN);
            let sig: [u8; SIGNATURE_LEN] = sig.try_into().expect("split at signature length");
            let public: [u8; PUBLIC_KEY_LEN] = crypto::public_key(key);
            let ok = crypto::verify(&public, &crypto::digest(msg), &sig).map_err(|_| SeError::Malformed("public key"))?;
            Ok(vec![u8::from(ok)])
        }
    }
}

/// Runs the SE core on a pending request and leaves a response frame.
///
/// On failure the response frame carries a non-zero status and an empty
/// payload, so the slot still reaches `ResponseReady`.
pub fn se_process(mailbox: &mut Mailbox, mem: &mut Memory, efuse: &EfuseStore, trng: &mut Trng) -> Result<(), SeError> {
    if mailbox.state != MailboxState::RequestPending {
        return Err(SeError::NotPending);
    }
    let buffer = mailbox.buffer(mem);
    let outcome = MailboxMessage::decode(&buffer).and_then(|req| {
        let response = execute(req.header.op_code, &req.payload, efuse, trng)?;
        if response.len() > MAILBOX_CAPACITY {
            return Err(SeError::OversizedPayload);
        }
        Ok(MailboxMessage { header: req.header, payload: response })
    });
    let (frame, result) = match outcome {
        Ok(msg) => (msg.encode(), Ok(())),
        Err(e) => {
            let mut frame = buffer[..HEADER_LEN].to_vec();
            frame[2] = e.status();
            frame[4..8].copy_from_slice(&0u32.to_le_bytes());
            (frame, Err(e))
        }
    };
    mem.scrub(mailbox.region()).expect("mailbox window is mapped");
    mem.write_phys(mailbox.base, &frame).expect("mailbox window is mapped");
    mailbox.state = MailboxState::ResponseReady;
    result
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum SeEvent {
    MailboxPut { op: OpCode, requester: EnclaveId, payload_len: usize },
    SeOp { op: OpCode, status: u8, trng_counter: u64 },
    MailboxGet { status: u8, payload_len: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ServiceError {
    #[error("message or result span lies outside the requester's region")]
    SpanOutsideRequester,
    #[error(transparent)]
    Se(#[from] SeError),
    #[error(transparent)]
    Mailbox(#[from] MailboxError),
    #[error(transparent)]
    Access(#[from] AccessError),
}

impl ServiceError {
    /// Status byte reported back to the requesting enclave.
    pub fn status(&self) -> u8 {
        match self {
            ServiceError::SpanOutsideRequester => 0x10,
            ServiceError::Se(e) => e.status(),
            ServiceError::Mailbox(_) => 0x11,
            ServiceError::Access(_) => 0x12,
        }
    }
}

/// State the crypto enclave operates on while serving a request.
pub struct ServiceEnv<'a> {
    pub mem: &'a mut Memory,
    /// The crypto enclave's installed PMP unit.
    pub pmp: &'a PmpUnit,
    pub mailbox: &'a mut Mailbox,
    pub efuse: &'a EfuseStore,
    pub trng: &'a mut Trng,
}

/// The crypto enclave's service routine.
///
/// Reads the message from the requester's memory under the crypto
/// enclave's PMP grant, round-trips it through the SE and writes the
/// response at `result_addr`. Returns the response length.
pub fn ce_service(
    env: ServiceEnv<'_>,
    crypto: Caller,
    requester: EnclaveId,
    requester_region: Region,
    req: &ServiceRequest,
    events: &mut Vec<SeEvent>,
) -> Result<u64, ServiceError> {
    let response_len = req.op.response_len(req.msg_len as usize) as u64;
    let inside = |addr: PhysAddr, len: u64| requester_region.contains_span(addr.as_u64(), len);
    if !inside(req.msg_addr, req.msg_len) || !inside(req.result_addr, response_len) {
        return Err(ServiceError::SpanOutsideRequester);
    }
    let payload = if req.msg_len == 0 {
        Vec::new()
    } else {
        env.mem.read(env.pmp, PrivilegeMode::User, req.msg_addr, req.msg_len)?
    };
    let msg = MailboxMessage::request(req.op, requester, req.result_addr, payload);
    env.mailbox.put(env.mem, crypto, &msg)?;
    events.push(SeEvent::MailboxPut { op: req.op, requester, payload_len: msg.payload_len() });

    let processed = se_process(env.mailbox, env.mem, env.efuse, env.trng);
    events.push(SeEvent::SeOp {
        op: req.op,
        status: processed.as_ref().err().map_or(0, SeError::status),
        trng_counter: env.trng.counter(),
    });
    let response = env.mailbox.get(env.mem, crypto)?;
    events.push(SeEvent::MailboxGet { status: response.header.status, payload_len: response.payload_len() });
    processed?;

    if !response.payload.is_empty() {
        env.mem.write(env.pmp, PrivilegeMode::User, req.result_addr, &response.payload)?;
    }
    Ok(response.payload.len() as u64)
}

// SPDX-License-Identifier: Apache-2.0

//! In-process stand-in for the trusted region.
//!
//! Clients and the region talk over AES-128-GCM with per-session counter
//! nonces. The region holds the server dictionary sealed under its own key
//! and decrypts one chunk at a time, and an [`EnclaveBudget`] tracks how much
//! plaintext is resident inside it.
//!
//! Request frame, integers little-endian; the 47-byte header is the AEAD
//! associated data:
//!
//! ```text
//! "PCTQ" | version u16 | client_id [16] | key_id u64 | nonce [12] | value_count u32 | key_width u8
//! ciphertext of value_count * key_width hash bytes, then the 16-byte tag
//! ```
//!
//! Responses use the same header with magic `"PCTR"`, `value_count = 1`,
//! `key_width = 1`, and carry one sealed result byte.

use std::collections::{HashMap, HashSet};
use std::time::{Duration, Instant};

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes128Gcm, Nonce};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chunking::{ChunkedDictionary, DEFAULT_BUDGET_BYTES};
use crate::dictionary::{DictionaryError, SuccinctTrie};
use crate::encoding::{EncodingParams, TrajectoryHashValue};
use crate::psi::{ClientId, Matcher, Mode, PsiConfig, PsiError, Query, QueryBatch};

pub const REQUEST_MAGIC: [u8; 4] = *b"PCTQ";
pub const RESPONSE_MAGIC: [u8; 4] = *b"PCTR";
pub const WIRE_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 47;
pub const TAG_LEN: usize = 16;
pub const NONCE_LEN: usize = 12;

/// Session keys expire one day after the handshake.
pub const KEY_LIFETIME_S: i64 = 86_400;

/// Environment variable overriding the trusted-memory capacity.
pub const BUDGET_ENV: &str = "PCT_BUDGET_BYTES";

const CLIENT_PREFIX: [u8; 4] = *b"CLNT";
const REGION_PREFIX: [u8; 4] = *b"ENCL";
const AT_REST_PREFIX: [u8; 4] = *b"REST";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnclaveError {
    #[error("authentication failed")]
    Integrity,
    #[error("nonce already used under this key")]
    NonceReuse,
    #[error("nonce counter exhausted")]
    NonceExhausted,
    #[error("unknown session key id {0}")]
    UnknownSession(u64),
    #[error("session key {0} has expired")]
    SessionExpired(u64),
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
    #[error("unsupported wire version {0}")]
    UnsupportedVersion(u16),
    #[error("frame key width {actual} does not match server width {expected}")]
    WidthMismatch { expected: usize, actual: usize },
    #[error("invalid {BUDGET_ENV} value {0:?}")]
    BadBudget(String),
    #[error(transparent)]
    Dictionary(#[from] DictionaryError),
    #[error(transparent)]
    Psi(#[from] PsiError),
}

#[derive(Clone, PartialEq, Eq)]
pub struct SessionKey {
    pub key_id: u64,
    pub key: [u8; 16],
    pub established_at: i64,
}

impl std::fmt::Debug for SessionKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionKey")
            .field("key_id", &self.key_id)
            .field("established_at", &self.established_at)
            .finish_non_exhaustive()
    }
}

impl SessionKey {
    pub fn expired_at(&self, now: i64) -> bool {
        now < self.established_at || now - self.established_at >= KEY_LIFETIME_S
    }
}

/// Mock attestation quote returned by the handshake.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationRecord {
    pub measurement: [u8; 32],
    pub client_nonce: [u8; 16],
    pub server_nonce: [u8; 16],
    pub key_id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedBlob {
    pub nonce: [u8; NONCE_LEN],
    /// Ciphertext followed by the tag.
    pub ciphertext: Vec<u8>,
    pub associated_data: Vec<u8>,
}

/// Decrypts `blob`; any modification yields [`EnclaveError::Integrity`].
pub fn open(blob: &EncryptedBlob, key: &[u8; 16]) -> Result<Vec<u8>, EnclaveError> {
    Aes128Gcm::new(key.into())
        .decrypt(
            Nonce::from_slice(&blob.nonce),
            Payload {
                msg: &blob.ciphertext,
                aad: &blob.associated_data,
            },
        )
        .map_err(|_| EnclaveError::Integrity)
}

/// Sealing side of one key in one direction.
///
/// Nonces are a 4-byte direction prefix and a 64-bit counter, and every
/// nonce the channel has sealed with is refused afterwards.
pub struct Channel {
    cipher: Aes128Gcm,
    prefix: [u8; 4],
    counter: u64,
    used: HashSet<[u8; NONCE_LEN]>,
}

impl std::fmt::Debug for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Channel")
            .field("prefix", &self.prefix)
            .field("counter", &self.counter)
            .finish_non_exhaustive()
    }
}

impl Channel {
    pub fn new(key: &[u8; 16], prefix: [u8; 4]) -> Self {
        Self {
            cipher: Aes128Gcm::new(key.into()),
            prefix,
            counter: 0,
            used: HashSet::new(),
        }
    }

    pub fn next_nonce(&mut self) -> Result<[u8; NONCE_LEN], EnclaveError> {
        loop {
            let c = self.counter;
            self.counter = c.checked_add(1).ok_or(EnclaveError::NonceExhausted)?;
            let mut nonce = [0u8; NONCE_LEN];
            nonce[..4].copy_from_slice(&self.prefix);
            nonce[4..].copy_from_slice(&c.to_le_bytes());
            if !self.used.contains(&nonce) {
                return Ok(nonce);
            }
        }
    }

    pub fn seal(
        &mut self,
        plaintext: &[u8],
        associated_data: &[u8],
    ) -> Result<EncryptedBlob, EnclaveError> {
        let nonce = self.next_nonce()?;
        self.seal_with_nonce(nonce, plaintext, associated_data)
    }

    pub fn seal_with_nonce(
        &mut self,
        nonce: [u8; NONCE_LEN],
        plaintext: &[u8],
        associated_data: &[u8],
    ) -> Result<EncryptedBlob, EnclaveError> {
        if !self.used.insert(nonce) {
            return Err(EnclaveError::NonceReuse);
        }
        let ciphertext = self
            .cipher
            .encrypt(
                Nonce::from_slice(&nonce),
                Payload {
                    msg: plaintext,
                    aad: associated_data,
                },
            )
            .map_err(|_| EnclaveError::Integrity)?;
        Ok(EncryptedBlob {
            nonce,
            ciphertext,
            associated_data: associated_data.to_vec(),
        })
    }
}

/// Trusted-memory accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnclaveBudget {
    pub capacity_bytes: u64,
    pub resident_bytes: u64,
    pub peak_resident_bytes: u64,
    pub ecall_count: u64,
    pub ocall_count: u64,
}

impl Default for EnclaveBudget {
    fn default() -> Self {
        Self::new(DEFAULT_BUDGET_BYTES)
    }
}

impl EnclaveBudget {
    pub fn new(capacity_bytes: u64) -> Self {
        Self {
            capacity_bytes,
            resident_bytes: 0,
            peak_resident_bytes: 0,
            ecall_count: 0,
            ocall_count: 0,
        }
    }

    /// Capacity from `PCT_BUDGET_BYTES`, else 96 MiB.
    pub fn from_env() -> Result<Self, EnclaveError> {
        match std::env::var(BUDGET_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map(Self::new)
                .map_err(|_| EnclaveError::BadBudget(v)),
            Err(_) => Ok(Self::default()),
        }
    }

    /// Bytes by which the peak exceeded capacity.
    pub fn page_spill_bytes(&self) -> u64 {
        self.peak_resident_bytes.saturating_sub(self.capacity_bytes)
    }

    pub fn spilled(&self) -> bool {
        self.page_spill_bytes() > 0
    }

    /// One boundary crossing that brings `bytes` into the region.
    pub fn load(&mut self, bytes: u64) {
        self.ecall_count += 1;
        self.resident_bytes += bytes;
        self.peak_resident_bytes = self.peak_resident_bytes.max(self.resident_bytes);
    }

    pub fn unload(&mut self, bytes: u64) {
        debug_assert!(bytes <= self.resident_bytes);
        self.resident_bytes = self.resident_bytes.saturating_sub(bytes);
    }

    pub fn ocall(&mut self) {
        self.ocall_count += 1;
    }

    /// Clears counters and peak, keeping capacity and residency.
    pub fn reset_counters(&mut self) {
        self.peak_resident_bytes = self.resident_bytes;
        self.ecall_count = 0;
        self.ocall_count = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub magic: [u8; 4],
    pub version: u16,
    pub client_id: ClientId,
    pub key_id: u64,
    pub nonce: [u8; NONCE_LEN],
    pub value_count: u32,
    pub key_width: u8,
}

impl FrameHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(&self.magic);
        h[4..6].copy_from_slice(&self.version.to_le_bytes());
        h[6..22].copy_from_slice(&self.client_id);
        h[22..30].copy_from_slice(&self.key_id.to_le_bytes());
        h[30..42].copy_from_slice(&self.nonce);
        h[42..46].copy_from_slice(&self.value_count.to_le_bytes());
        h[46] = self.key_width;
        h
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EnclaveError> {
        if bytes.len() < HEADER_LEN {
            return Err(EnclaveError::Malformed("short header"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        Ok(Self {
            magic: bytes[0..4].try_into().unwrap(),
            version,
            client_id: bytes[6..22].try_into().unwrap(),
            key_id: u64::from_le_bytes(bytes[22..30].try_into().unwrap()),
            nonce: bytes[30..42].try_into().unwrap(),
            value_count: u32::from_le_bytes(bytes[42..46].try_into().unwrap()),
            key_width: bytes[46],
        })
    }

    /// Length of the sealed payload the header announces.
    pub fn payload_len(&self) -> u64 {
        self.value_count as u64 * self.key_width as u64
    }
}

/// Parses a frame into header and blob, checking magic, version and length.
pub fn parse_frame(
    frame: &[u8],
    magic: [u8; 4],
) -> Result<(FrameHeader, EncryptedBlob), EnclaveError> {
    let header = FrameHeader::decode(frame)?;
    if header.magic != magic {
        return Err(EnclaveError::Malformed("bad magic"));
    }
    if header.version != WIRE_VERSION {
        return Err(EnclaveError::UnsupportedVersion(header.version));
    }
    if (frame.len() - HEADER_LEN) as u64 != header.payload_len() + TAG_LEN as u64 {
        return Err(EnclaveError::Malformed(
            "payload length does not match header",
        ));
    }
    let blob = EncryptedBlob {
        nonce: header.nonce,
        ciphertext: frame[HEADER_LEN..].to_vec(),
        associated_data: frame[..HEADER_LEN].to_vec(),
    };
    Ok((header, blob))
}

fn seal_frame(
    channel: &mut Channel,
    magic: [u8; 4],
    client_id: ClientId,
    key_id: u64,
    value_count: u32,
    key_width: u8,
    payload: &[u8],
) -> Result<Vec<u8>, EnclaveError> {
    let nonce = channel.next_nonce()?;
    let header = FrameHeader {
        magic,
        version: WIRE_VERSION,
        client_id,
        key_id,
        nonce,
        value_count,
        key_width,
    }
    .encode();
    let blob = channel.seal_with_nonce(nonce, payload, &header)?;
    let mut frame = Vec::with_capacity(HEADER_LEN + blob.ciphertext.len());
    frame.extend_from_slice(&header);
    frame.extend_from_slice(&blob.ciphertext);
    Ok(frame)
}

/// Client end of an established session.
#[derive(Debug)]
pub struct ClientSession {
    pub client_id: ClientId,
    session: SessionKey,
    channel: Channel,
}

impl ClientSession {
    pub fn new(client_id: ClientId, session: SessionKey) -> Self {
        let channel = Channel::new(&session.key, CLIENT_PREFIX);
        Self {
            client_id,
            session,
            channel,
        }
    }

    pub fn key_id(&self) -> u64 {
        self.session.key_id
    }

    /// Seals a query into a request frame.
    pub fn encrypt_query(
        &mut self,
        values: &[TrajectoryHashValue],
    ) -> Result<Vec<u8>, EnclaveError> {
        let width = values.first().map_or(0, TrajectoryHashValue::width);
        if values.iter().any(|v| v.width() != width) {
            return Err(EnclaveError::Malformed("mixed value widths"));
        }
        let count =
            u32::try_from(values.len()).map_err(|_| EnclaveError::Malformed("too many values"))?;
        let mut payload = Vec::with_capacity(values.len() * width);
        for v in values {
            payload.extend_from_slice(v.as_bytes());
        }
        seal_frame(
            &mut self.channel,
            REQUEST_MAGIC,
            self.client_id,
            self.session.key_id,
            count,
            width as u8,
            &payload,
        )
    }

    /// Opens a response frame addressed to this client.
    pub fn decrypt_response(&self, frame: &[u8]) -> Result<bool, EnclaveError> {
        let (header, blob) = parse_frame(frame, RESPONSE_MAGIC)?;
        if header.client_id != self.client_id || header.key_id != self.session.key_id {
            return Err(EnclaveError::Malformed("response for another session"));
        }
        if header.value_count != 1 || header.key_width != 1 {
            return Err(EnclaveError::Malformed("response payload must be one byte"));
        }
        match open(&blob, &self.session.key)?.as_slice() {
            [0] => Ok(false),
            [1] => Ok(true),
            _ => Err(EnclaveError::Malformed("result byte must be 0 or 1")),
        }
    }
}

/// Server dictionary encrypted at rest, one blob per chunk.
#[derive(Debug, Clone)]
pub struct SealedDictionary {
    params: EncodingParams,
    chunks: Vec<EncryptedBlob>,
}

impl SealedDictionary {
    pub fn params(&self) -> &EncodingParams {
        &self.params
    }

    pub fn n_chunks(&self) -> usize {
        self.chunks.len()
    }

    pub fn chunk_plain_len(&self, i: usize) -> u64 {
        (self.chunks[i].ciphertext.len() - TAG_LEN) as u64
    }

    pub fn max_chunk_plain_len(&self) -> u64 {
        (0..self.chunks.len())
            .map(|i| self.chunk_plain_len(i))
            .max()
            .unwrap_or(0)
    }

    pub fn blobs(&self) -> &[EncryptedBlob] {
        &self.chunks
    }

    pub fn blobs_mut(&mut self) -> &mut [EncryptedBlob] {
        &mut self.chunks
    }
}

fn chunk_aad(params: &EncodingParams, index: usize) -> Vec<u8> {
    let mut aad = b"PCTC".to_vec();
    aad.extend_from_slice(&params.fingerprint().to_le_bytes());
    aad.extend_from_slice(&(index as u32).to_le_bytes());
    aad
}

#[derive(Debug)]
struct SessionState {
    key: SessionKey,
    responses: Channel,
}

/// Why a request was left out of a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejected {
    /// Position of the frame in the submitted batch.
    pub index: usize,
    /// Claimed client id, when the header parsed.
    pub client_id: Option<ClientId>,
    pub error: EnclaveError,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseTimings {
    pub query_upload: Duration,
    pub query_decrypt: Duration,
    pub server_decrypt: Duration,
    pub intersection: Duration,
    pub respond: Duration,
}

impl PhaseTimings {
    pub fn total(&self) -> Duration {
        self.query_upload
            + self.query_decrypt
            + self.server_decrypt
            + self.intersection
            + self.respond
    }

    /// Phase names paired with durations, in pipeline order.
    pub fn phases(&self) -> [(&'static str, Duration); 5] {
        [
            ("query_upload", self.query_upload),
            ("query_decrypt", self.query_decrypt),
            ("server_decrypt", self.server_decrypt),
            ("intersection", self.intersection),
            ("respond", self.respond),
        ]
    }
}

/// Sealed reply to one accepted request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    /// Position of the request frame in the submitted batch.
    pub index: usize,
    pub client_id: ClientId,
    pub frame: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    /// Replies to accepted requests, in submission order.
    pub responses: Vec<Response>,
    pub rejected: Vec<Rejected>,
    pub timings: PhaseTimings,
    /// Counters for this batch only.
    pub budget: EnclaveBudget,
    pub probes: u64,
    pub query_bytes: u64,
}

/// Simulated trusted region holding session keys and the at-rest key.
#[derive(Debug)]
pub struct TrustedRegion {
    rng: ChaCha20Rng,
    sessions: HashMap<u64, SessionState>,
    next_key_id: u64,
    at_rest_key: [u8; 16],
    at_rest: Channel,
    budget: EnclaveBudget,
}

impl TrustedRegion {
    /// Region with a fixed seed, for reproducible keys.
    pub fn with_seed(seed: u64, budget: EnclaveBudget) -> Self {
        Self::from_rng(ChaCha20Rng::seed_from_u64(seed), budget)
    }

    pub fn new(budget: EnclaveBudget) -> Self {
        Self::from_rng(ChaCha20Rng::from_rng(&mut rand::rng()), budget)
    }

    fn from_rng(mut rng: ChaCha20Rng, budget: EnclaveBudget) -> Self {
        let mut at_rest_key = [0u8; 16];
        rng.fill_bytes(&mut at_rest_key);
        let next_key_id = rng.random_range(1..u32::MAX as u64);
        Self {
            rng,
            sessions: HashMap::new(),
            next_key_id,
            at_rest: Channel::new(&at_rest_key, AT_REST_PREFIX),
            at_rest_key,
            budget,
        }
    }

    pub fn measurement() -> [u8; 32] {
        Sha256::digest(concat!("pct-enclave-sim ", env!("CARGO_PKG_VERSION")).as_bytes()).into()
    }

    pub fn budget(&self) -> &EnclaveBudget {
        &self.budget
    }

    /// Stub handshake: issues a fresh session key.
    pub fn attest_and_exchange(
        &mut self,
        client_nonce: [u8; 16],
        now: i64,
    ) -> (SessionKey, AttestationRecord) {
        let key_id = self.next_key_id;
        self.next_key_id += 1;
        let mut key = [0u8; 16];
        self.rng.fill_bytes(&mut key);
        let mut server_nonce = [0u8; 16];
        self.rng.fill_bytes(&mut server_nonce);
        let session = SessionKey {
            key_id,
            key,
            established_at: now,
        };
        self.sessions.insert(
            key_id,
            SessionState {
                key: session.clone(),
                responses: Channel::new(&key, REGION_PREFIX),
            },
        );
        let record = AttestationRecord {
            measurement: Self::measurement(),
            client_nonce,
            server_nonce,
            key_id,
        };
        (session, record)
    }

    pub fn end_session(&mut self, key_id: u64) -> bool {
        self.sessions.remove(&key_id).is_some()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    /// Drops sessions older than a day.
    pub fn expire_sessions(&mut self, now: i64) -> usize {
        let before = self.sessions.len();
        self.sessions.retain(|_, s| !s.key.expired_at(now));
        before - self.sessions.len()
    }

    pub fn seal_dictionary(
        &mut self,
        dict: &ChunkedDictionary,
    ) -> Result<SealedDictionary, EnclaveError> {
        let params = *dict.params();
        let chunks = dict
            .chunks()
            .iter()
            .enumerate()
            .map(|(i, c)| self.at_rest.seal(&c.serialize(), &chunk_aad(&params, i)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SealedDictionary { params, chunks })
    }

    /// Decrypts a blob into the region as one boundary crossing.
    pub fn load_to_enclave(
        &mut self,
        blob: &EncryptedBlob,
        key: &[u8; 16],
    ) -> Result<Vec<u8>, EnclaveError> {
        let plain = open(blob, key)?;
        self.budget.load(plain.len() as u64);
        Ok(plain)
    }

    fn load_chunk(
        &mut self,
        sealed: &SealedDictionary,
        i: usize,
    ) -> Result<(SuccinctTrie, u64), EnclaveError> {
        let blob = &sealed.chunks[i];
        if blob.associated_data != chunk_aad(&sealed.params, i) {
            return Err(EnclaveError::Integrity);
        }
        let key = self.at_rest_key;
        let plain = self.load_to_enclave(blob, &key)?;
        let len = plain.len() as u64;
        let trie = SuccinctTrie::deserialize(&plain)?;
        Ok((trie, len))
    }

    /// Runs one batch: authenticate and load the queries, stream every
    /// chunk through the matcher, then seal one result byte per client.
    pub fn run_batch(
        &mut self,
        frames: &[Vec<u8>],
        sealed: &SealedDictionary,
        mode: Mode,
        cfg: PsiConfig,
        now: i64,
    ) -> Result<BatchOutcome, EnclaveError> {
        let mut timings = PhaseTimings::default();
        let mut rejected = Vec::new();
        let params = sealed.params;
        let width = params.hash_width();
        self.budget.reset_counters();
        let baseline = self.budget.resident_bytes;

        // copy every frame across the boundary in one crossing
        let started = Instant::now();
        let mut parsed = Vec::with_capacity(frames.len());
        let mut query_bytes = 0u64;
        for (index, frame) in frames.iter().enumerate() {
            match self.check_request(frame, width, now) {
                Ok((header, blob)) => {
                    query_bytes += header.payload_len();
                    parsed.push((index, header, blob));
                }
                Err((client_id, error)) => rejected.push(Rejected {
                    index,
                    client_id,
                    error,
                }),
            }
        }
        self.budget.load(query_bytes);
        timings.query_upload = started.elapsed();

        let started = Instant::now();
        let mut queries = Vec::with_capacity(parsed.len());
        let mut accepted = Vec::with_capacity(parsed.len());
        for (index, header, blob) in parsed {
            let key = self.sessions[&header.key_id].key.key;
            match open(&blob, &key) {
                Ok(plain) => {
                    let values = plain
                        .chunks_exact(width)
                        .map(|c| TrajectoryHashValue::from_slice(c).expect("width checked"))
                        .collect();
                    queries.push(Query {
                        client_id: header.client_id,
                        values,
                    });
                    accepted.push((index, header));
                }
                Err(error) => rejected.push(Rejected {
                    index,
                    client_id: Some(header.client_id),
                    error,
                }),
            }
        }
        rejected.sort_by_key(|r| r.index);
        timings.query_decrypt = started.elapsed();

        let batch = QueryBatch::new(queries, &params);
        let mut matcher = Matcher::new(&batch, &params, mode, cfg)?;
        for i in 0..sealed.n_chunks() {
            let started = Instant::now();
            let (trie, len) = match self.load_chunk(sealed, i) {
                Ok(loaded) => loaded,
                Err(e) => {
                    self.budget.resident_bytes = baseline;
                    return Err(e);
                }
            };
            timings.server_decrypt += started.elapsed();
            let started = Instant::now();
            matcher.absorb_chunk(&trie);
            timings.intersection += started.elapsed();
            drop(trie);
            self.budget.unload(len);
        }
        let probes = matcher.probes();
        let results = matcher.finish();

        let started = Instant::now();
        let mut responses = Vec::with_capacity(results.len());
        for ((index, header), result) in accepted.iter().zip(&results) {
            let state = self
                .sessions
                .get_mut(&header.key_id)
                .expect("checked session");
            let frame = seal_frame(
                &mut state.responses,
                RESPONSE_MAGIC,
                header.client_id,
                header.key_id,
                1,
                1,
                &[u8::from(result.positive)],
            )?;
            responses.push(Response {
                index: *index,
                client_id: header.client_id,
                frame,
            });
        }
        self.budget.unload(query_bytes);
        self.budget.ocall();
        timings.respond = started.elapsed();
        debug_assert_eq!(self.budget.resident_bytes, baseline);

        Ok(BatchOutcome {
            responses,
            rejected,
            timings,
            budget: self.budget,
            probes,
            query_bytes,
        })
    }

    fn check_request(
        &self,
        frame: &[u8],
        width: usize,
        now: i64,
    ) -> Result<(FrameHeader, EncryptedBlob), (Option<ClientId>, EnclaveError)> {
        let claimed = FrameHeader::decode(frame).ok().map(|h| h.client_id);
        let (header, blob) = parse_frame(frame, REQUEST_MAGIC).map_err(|e| (claimed, e))?;
        let fail = |e| (Some(header.client_id), e);
        let session = self
            .sessions
            .get(&header.key_id)
            .ok_or_else(|| fail(EnclaveError::UnknownSession(header.key_id)))?;
        if session.key.expired_at(now) {
            return Err(fail(EnclaveError::SessionExpired(header.key_id)));
        }
        if header.value_count > 0 && header.key_width as usize != width {
            return Err(fail(EnclaveError::WidthMismatch {
                expected: width,
                actual: header.key_width as usize,
            }));
        }
        Ok((header, blob))
    }
}

/// Totals over every batch of [`run_end_to_end`].
#[derive(Debug, Clone, Default)]
pub struct EndToEndReport {
    /// One entry per input query; `None` when the region rejected it.
    pub results: Vec<(ClientId, Option<bool>)>,
    pub rejected: Vec<Rejected>,
    pub client_encrypt: Duration,
    pub client_decrypt: Duration,
    /// Region phases summed over batches.
    pub timings: PhaseTimings,
    pub batches: usize,
    /// Largest per-batch ecall count.
    pub max_batch_ecalls: u64,
    pub peak_resident_bytes: u64,
    pub capacity_bytes: u64,
    pub probes: u64,
    pub wall: Duration,
}

impl EndToEndReport {
    pub fn positives(&self) -> usize {
        self.results
            .iter()
            .filter(|(_, r)| *r == Some(true))
            .count()
    }

    pub fn page_spill_bytes(&self) -> u64 {
        self.peak_resident_bytes.saturating_sub(self.capacity_bytes)
    }
}

/// Client side and region side together: handshake, encrypt, batch,
/// run, and decrypt, `batch_size` queries at a time.
pub fn run_end_to_end(
    region: &mut TrustedRegion,
    sealed: &SealedDictionary,
    queries: &[Query],
    mode: Mode,
    cfg: PsiConfig,
    batch_size: usize,
    now: i64,
) -> Result<EndToEndReport, EnclaveError> {
    let wall = Instant::now();
    let mut report = EndToEndReport {
        capacity_bytes: region.budget().capacity_bytes,
        ..Default::default()
    };
    for (b, group) in queries.chunks(batch_size.max(1)).enumerate() {
        let mut sessions = Vec::with_capacity(group.len());
        for (i, q) in group.iter().enumerate() {
            let mut nonce = [0u8; 16];
            nonce[..8].copy_from_slice(&(b as u64).to_le_bytes());
            nonce[8..].copy_from_slice(&(i as u64).to_le_bytes());
            let (key, _) = region.attest_and_exchange(nonce, now);
            sessions.push(ClientSession::new(q.client_id, key));
        }
        let started = Instant::now();
        let frames = group
            .iter()
            .zip(sessions.iter_mut())
            .map(|(q, s)| s.encrypt_query(&q.values))
            .collect::<Result<Vec<_>, _>>()?;
        report.client_encrypt += started.elapsed();

        let out = region.run_batch(&frames, sealed, mode, cfg, now)?;
        drop(frames);
        let t = &mut report.timings;
        t.query_upload += out.timings.query_upload;
        t.query_decrypt += out.timings.query_decrypt;
        t.server_decrypt += out.timings.server_decrypt;
        t.intersection += out.timings.intersection;
        t.respond += out.timings.respond;
        report.batches += 1;
        report.max_batch_ecalls = report.max_batch_ecalls.max(out.budget.ecall_count);
        report.peak_resident_bytes = report
            .peak_resident_bytes
            .max(out.budget.peak_resident_bytes);
        report.probes += out.probes;

        let started = Instant::now();
        let mut answers: Vec<Option<bool>> = vec![None; group.len()];
        for r in &out.responses {
            answers[r.index] = Some(sessions[r.index].decrypt_response(&r.frame)?);
        }
        report.client_decrypt += started.elapsed();
        let offset = b * batch_size.max(1);
        report
            .results
            .extend(group.iter().zip(answers).map(|(q, a)| (q.client_id, a)));
        report
            .rejected
            .extend(out.rejected.into_iter().map(|mut r| {
                r.index += offset;
                r
            }));
        for s in &sessions {
            region.end_session(s.key_id());
        }
    }
    report.wall = wall.elapsed();
    Ok(report)
}

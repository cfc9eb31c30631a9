// SPDX-License-Identifier: Apache-2.0

//! Batching TCP service around the trusted region, and its client.
//!
//! Every message is a frame: a little-endian `u32` length, then the bytes.
//! Besides the `PCTQ`/`PCTR` query frames the service speaks:
//!
//! ```text
//! PCTH | version u16 | client_nonce [16]                       handshake request
//! PCTA | version u16 | key_id u64 | key [16] | established_at i64
//!      | measurement [32] | client_nonce [16] | server_nonce [16]
//!      | theta_geo u8 | theta_time u8 | t_start i64 | t_end i64 | mix u8
//!      | params_fingerprint u64                                 handshake reply
//! PCTE | version u16 | code u8 | len u16 | utf-8 message         error reply
//! ```
//!
//! The handshake is a stub for remote attestation and hands the session key
//! back in the clear.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use pct_core::chunking::encode_points;
use pct_core::enclave_sim::{
    parse_frame, AttestationRecord, ClientSession, EnclaveError, FrameHeader, SealedDictionary,
    SessionKey, TrustedRegion, REQUEST_MAGIC, RESPONSE_MAGIC, WIRE_VERSION,
};
use pct_core::encoding::{EncodingParams, MixMode, TrajectoryPoint};
use pct_core::psi::{ClientId, Mode, PsiConfig};

use crate::commands::now_unix;

pub const HANDSHAKE_MAGIC: [u8; 4] = *b"PCTH";
pub const ACCEPT_MAGIC: [u8; 4] = *b"PCTA";
pub const ERROR_MAGIC: [u8; 4] = *b"PCTE";
pub const MAX_FRAME: usize = 64 << 20;
const HANDSHAKE_LEN: usize = 22;
const ACCEPT_LEN: usize = 129;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ErrorCode {
    Malformed = 1,
    Integrity = 2,
    RateLimited = 3,
    Session = 4,
    Internal = 5,
}

impl ErrorCode {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            1 => Self::Malformed,
            2 => Self::Integrity,
            3 => Self::RateLimited,
            4 => Self::Session,
            5 => Self::Internal,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Malformed => "malformed",
            Self::Integrity => "integrity",
            Self::RateLimited => "rate_limited",
            Self::Session => "session",
            Self::Internal => "internal",
        }
    }

    fn for_error(e: &EnclaveError) -> Self {
        match e {
            EnclaveError::Integrity => Self::Integrity,
            EnclaveError::UnknownSession(_) | EnclaveError::SessionExpired(_) => Self::Session,
            EnclaveError::Malformed(_)
            | EnclaveError::UnsupportedVersion(_)
            | EnclaveError::WidthMismatch { .. } => Self::Malformed,
            _ => Self::Internal,
        }
    }
}

pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds limit"),
        ));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

pub fn write_frame(w: &mut impl Write, bytes: &[u8]) -> io::Result<()> {
    let len = u32::try_from(bytes.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(bytes)?;
    w.flush()
}

pub fn error_frame(code: ErrorCode, message: &str) -> Vec<u8> {
    let msg = &message.as_bytes()[..message.len().min(u16::MAX as usize)];
    let mut f = ERROR_MAGIC.to_vec();
    f.extend_from_slice(&WIRE_VERSION.to_le_bytes());
    f.push(code as u8);
    f.extend_from_slice(&(msg.len() as u16).to_le_bytes());
    f.extend_from_slice(msg);
    f
}

pub fn parse_error_frame(f: &[u8]) -> Option<(u8, String)> {
    if f.len() < 9 || f[..4] != ERROR_MAGIC {
        return None;
    }
    let len = u16::from_le_bytes([f[7], f[8]]) as usize;
    let msg = f.get(9..9 + len)?;
    Some((f[6], String::from_utf8_lossy(msg).into_owned()))
}

pub fn handshake_frame(client_nonce: [u8; 16]) -> Vec<u8> {
    let mut f = HANDSHAKE_MAGIC.to_vec();
    f.extend_from_slice(&WIRE_VERSION.to_le_bytes());
    f.extend_from_slice(&client_nonce);
    f
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandshakeReply {
    pub session: SessionKey,
    pub record: AttestationRecord,
    pub params: EncodingParams,
}

impl HandshakeReply {
    pub fn encode(&self) -> Vec<u8> {
        let mut f = Vec::with_capacity(ACCEPT_LEN);
        f.extend_from_slice(&ACCEPT_MAGIC);
        f.extend_from_slice(&WIRE_VERSION.to_le_bytes());
        f.extend_from_slice(&self.session.key_id.to_le_bytes());
        f.extend_from_slice(&self.session.key);
        f.extend_from_slice(&self.session.established_at.to_le_bytes());
        f.extend_from_slice(&self.record.measurement);
        f.extend_from_slice(&self.record.client_nonce);
        f.extend_from_slice(&self.record.server_nonce);
        let p = &self.params;
        f.push(p.theta_geo());
        f.push(p.theta_time());
        f.extend_from_slice(&p.t_start().to_le_bytes());
        f.extend_from_slice(&p.t_end().to_le_bytes());
        f.push(match p.mix_mode() {
            MixMode::Interleave => 0,
            MixMode::Sequential => 1,
        });
        f.extend_from_slice(&p.fingerprint().to_le_bytes());
        f
    }

    pub fn decode(f: &[u8]) -> Result<Self> {
        if f.len() != ACCEPT_LEN || f[..4] != ACCEPT_MAGIC {
            bail!("malformed handshake reply");
        }
        let u64_at = |i: usize| u64::from_le_bytes(f[i..i + 8].try_into().unwrap());
        let arr16 = |i: usize| -> [u8; 16] { f[i..i + 16].try_into().unwrap() };
        let key_id = u64_at(6);
        let session = SessionKey {
            key_id,
            key: arr16(14),
            established_at: u64_at(30) as i64,
        };
        let record = AttestationRecord {
            measurement: f[38..70].try_into().unwrap(),
            client_nonce: arr16(70),
            server_nonce: arr16(86),
            key_id,
        };
        let mix = match f[120] {
            0 => MixMode::Interleave,
            1 => MixMode::Sequential,
            m => bail!("unknown mix mode byte {m}"),
        };
        let params =
            EncodingParams::new(f[102], f[103], u64_at(104) as i64, u64_at(112) as i64, mix)?;
        if params.fingerprint() != u64_at(121) {
            bail!("handshake parameters do not match their fingerprint");
        }
        Ok(Self {
            session,
            record,
            params,
        })
    }
}

/// Per-client request counter that resets at each UTC day.
#[derive(Debug)]
pub struct RateLimiter {
    limit: u32,
    day: i64,
    counts: HashMap<ClientId, u32>,
}

impl RateLimiter {
    pub fn new(limit: u32) -> Self {
        Self {
            limit,
            day: i64::MIN,
            counts: HashMap::new(),
        }
    }

    /// Counts one request; false when the client is over its daily limit.
    pub fn admit(&mut self, client: ClientId, now: i64) -> bool {
        let day = now.div_euclid(86_400);
        if day != self.day {
            self.day = day;
            self.counts.clear();
        }
        let n = self.counts.entry(client).or_insert(0);
        if *n >= self.limit {
            return false;
        }
        *n += 1;
        true
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub batch_size: usize,
    pub batch_timeout: Duration,
    pub rate_limit: u32,
    pub mode: Mode,
    pub psi: PsiConfig,
    pub max_batches: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ServiceStats {
    pub batch_sizes: Vec<usize>,
}

struct Job {
    frame: Vec<u8>,
    reply: mpsc::Sender<Vec<u8>>,
}

struct Shared {
    region: Mutex<TrustedRegion>,
    params: EncodingParams,
    limiter: Mutex<RateLimiter>,
    pending: AtomicUsize,
}

/// Accepts connections on `listener` and answers queries in batches.
///
/// Returns once `max_batches` batches have been answered; runs forever
/// otherwise.
pub fn serve(
    listener: TcpListener,
    region: TrustedRegion,
    sealed: SealedDictionary,
    cfg: ServiceConfig,
) -> Result<ServiceStats> {
    let shared = Arc::new(Shared {
        region: Mutex::new(region),
        params: *sealed.params(),
        limiter: Mutex::new(RateLimiter::new(cfg.rate_limit)),
        pending: AtomicUsize::new(0),
    });
    let (tx, rx) = mpsc::channel::<Job>();
    {
        let shared = Arc::clone(&shared);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let (shared, tx) = (Arc::clone(&shared), tx.clone());
                thread::spawn(move || {
                    if let Err(e) = connection(stream, &shared, &tx) {
                        eprintln!("connection: {e}");
                    }
                });
            }
        });
    }

    let mut stats = ServiceStats::default();
    let batch_size = cfg.batch_size.max(1);
    while cfg.max_batches.is_none_or(|m| stats.batch_sizes.len() < m) {
        let Ok(first) = rx.recv() else { break };
        let mut jobs = vec![first];
        let deadline = Instant::now() + cfg.batch_timeout;
        while jobs.len() < batch_size {
            let left = deadline.saturating_duration_since(Instant::now());
            match rx.recv_timeout(left) {
                Ok(j) => jobs.push(j),
                Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => break,
            }
        }
        let (frames, replies): (Vec<_>, Vec<_>) =
            jobs.into_iter().map(|j| (j.frame, j.reply)).unzip();
        let outcome = shared.region.lock().unwrap().run_batch(
            &frames,
            &sealed,
            cfg.mode,
            cfg.psi,
            now_unix(),
        );
        let mut out: Vec<Option<Vec<u8>>> = vec![None; frames.len()];
        match outcome {
            Ok(o) => {
                for r in o.responses {
                    out[r.index] = Some(r.frame);
                }
                for r in o.rejected {
                    out[r.index] = Some(error_frame(
                        ErrorCode::for_error(&r.error),
                        &r.error.to_string(),
                    ));
                }
                eprintln!(
                    "batch {} size {} rejected {} intersection {:.3} s",
                    stats.batch_sizes.len(),
                    frames.len(),
                    out.iter()
                        .filter(|f| f.as_ref().is_some_and(|f| f[..4] == ERROR_MAGIC))
                        .count(),
                    o.timings.intersection.as_secs_f64()
                );
            }
            Err(e) => eprintln!("batch {} failed: {e}", stats.batch_sizes.len()),
        }
        for (reply, frame) in replies.into_iter().zip(out) {
            let _ = reply
                .send(frame.unwrap_or_else(|| error_frame(ErrorCode::Internal, "batch failed")));
        }
        stats.batch_sizes.push(frames.len());
    }
    // let connection threads flush their last replies
    let wait = Instant::now();
    while shared.pending.load(Ordering::SeqCst) > 0 && wait.elapsed() < Duration::from_secs(10) {
        thread::sleep(Duration::from_millis(5));
    }
    Ok(stats)
}

fn connection(mut stream: TcpStream, shared: &Shared, jobs: &mpsc::Sender<Job>) -> io::Result<()> {
    loop {
        let frame = match read_frame(&mut stream) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(()),
            Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                let _ = write_frame(
                    &mut stream,
                    &error_frame(ErrorCode::Malformed, &e.to_string()),
                );
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let (reply, queued) = handle(&frame, shared, jobs);
        let written = write_frame(&mut stream, &reply);
        if queued {
            shared.pending.fetch_sub(1, Ordering::SeqCst);
        }
        written?;
    }
}

fn handle(frame: &[u8], shared: &Shared, jobs: &mpsc::Sender<Job>) -> (Vec<u8>, bool) {
    let magic = frame.get(..4);
    if magic == Some(&HANDSHAKE_MAGIC[..]) {
        if frame.len() != HANDSHAKE_LEN || frame[4..6] != WIRE_VERSION.to_le_bytes() {
            return (error_frame(ErrorCode::Malformed, "bad handshake"), false);
        }
        let nonce: [u8; 16] = frame[6..22].try_into().unwrap();
        let (session, record) = shared
            .region
            .lock()
            .unwrap()
            .attest_and_exchange(nonce, now_unix());
        return (
            HandshakeReply {
                session,
                record,
                params: shared.params,
            }
            .encode(),
            false,
        );
    }
    if magic != Some(&REQUEST_MAGIC[..]) {
        return (
            error_frame(ErrorCode::Malformed, "unknown frame type"),
            false,
        );
    }
    let header = match parse_frame(frame, REQUEST_MAGIC) {
        Ok((h, _)) => h,
        Err(e) => return (error_frame(ErrorCode::Malformed, &e.to_string()), false),
    };
    if !shared
        .limiter
        .lock()
        .unwrap()
        .admit(header.client_id, now_unix())
    {
        return (
            error_frame(ErrorCode::RateLimited, "daily request limit reached"),
            false,
        );
    }
    let (tx, rx) = mpsc::channel();
    shared.pending.fetch_add(1, Ordering::SeqCst);
    if jobs
        .send(Job {
            frame: frame.to_vec(),
            reply: tx,
        })
        .is_err()
    {
        return (
            error_frame(ErrorCode::Internal, "service shutting down"),
            true,
        );
    }
    match rx.recv() {
        Ok(r) => (r, true),
        Err(_) => (
            error_frame(ErrorCode::Internal, "service shutting down"),
            true,
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientOutcome {
    Answer(bool),
    Refused { code: u8, message: String },
}

/// Connects, performs the handshake, and sends one query for `points`.
pub fn query_once(
    addr: SocketAddr,
    client_id: ClientId,
    points: &[TrajectoryPoint],
    timeout: Duration,
) -> Result<ClientOutcome> {
    let mut stream = TcpStream::connect(addr).with_context(|| format!("connecting to {addr}"))?;
    stream.set_read_timeout(Some(timeout))?;
    let mut nonce = [0u8; 16];
    nonce.copy_from_slice(&client_id);
    write_frame(&mut stream, &handshake_frame(nonce))?;
    let reply = read_frame(&mut stream)?.context("server closed during handshake")?;
    if let Some((code, message)) = parse_error_frame(&reply) {
        return Ok(ClientOutcome::Refused { code, message });
    }
    let hs = HandshakeReply::decode(&reply)?;
    if hs.record.client_nonce != nonce {
        bail!("handshake reply echoes a different nonce");
    }
    let values = encode_points(points, &hs.params)?;
    let mut session = ClientSession::new(client_id, hs.session);
    write_frame(&mut stream, &session.encrypt_query(&values)?)?;
    let reply = read_frame(&mut stream)?.context("server closed before replying")?;
    if let Some((code, message)) = parse_error_frame(&reply) {
        return Ok(ClientOutcome::Refused { code, message });
    }
    if FrameHeader::decode(&reply).map(|h| h.magic) != Ok(RESPONSE_MAGIC) {
        bail!("unexpected reply frame");
    }
    Ok(ClientOutcome::Answer(session.decrypt_response(&reply)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_frame_round_trip() {
        let f = error_frame(ErrorCode::RateLimited, "slow down");
        assert_eq!(&f[..4], b"PCTE");
        assert_eq!(parse_error_frame(&f), Some((3, "slow down".to_string())));
        assert_eq!(parse_error_frame(b"PCTR"), None);
    }

    #[test]
    fn handshake_reply_round_trip() {
        let mut region = TrustedRegion::with_seed(3, Default::default());
        let (session, record) = region.attest_and_exchange([4; 16], 1_601_856_000);
        let params =
            EncodingParams::new(24, 22, 1_601_856_000, 1_603_065_600, MixMode::Sequential).unwrap();
        let r = HandshakeReply {
            session,
            record,
            params,
        };
        let bytes = r.encode();
        assert_eq!(bytes.len(), ACCEPT_LEN);
        assert_eq!(HandshakeReply::decode(&bytes).unwrap(), r);
        let mut bad = bytes.clone();
        bad[102] ^= 1;
        assert!(HandshakeReply::decode(&bad).is_err());
    }

    #[test]
    fn rate_limiter_counts_per_day() {
        let mut l = RateLimiter::new(2);
        let (a, b) = ([1; 16], [2; 16]);
        assert!(l.admit(a, 100));
        assert!(l.admit(a, 200));
        assert!(!l.admit(a, 300));
        assert!(l.admit(b, 300));
        assert!(l.admit(a, 86_400));
    }

    #[test]
    fn frames_over_a_stream() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"abc").unwrap();
        write_frame(&mut buf, b"").unwrap();
        let mut r = &buf[..];
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"abc");
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"");
        assert_eq!(read_frame(&mut r).unwrap(), None);
        let huge = (MAX_FRAME as u32 + 1).to_le_bytes();
        assert_eq!(
            read_frame(&mut &huge[..]).unwrap_err().kind(),
            io::ErrorKind::InvalidData
        );
    }
}

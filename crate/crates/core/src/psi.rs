// SPDX-License-Identifier: Apache-2.0

//! Spatiotemporal PSI over a chunked dictionary.
//!
//! A [`Matcher`] takes one chunk at a time, which mirrors the trusted region
//! where only one chunk is resident. The entry points [`st_psi`],
//! [`st_psi_doe`] and [`nfp_st_psi`] feed it every chunk in order.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::chunking::ChunkedDictionary;
use crate::dictionary::SuccinctTrie;
use crate::encoding::{CellCoords, Encoder, EncodingParams, TrajectoryHashValue};

pub type ClientId = [u8; 16];

/// Client id with `n` in the low eight bytes, big-endian.
pub fn client_id_from_u64(n: u64) -> ClientId {
    let mut id = [0u8; 16];
    id[8..].copy_from_slice(&n.to_be_bytes());
    id
}

/// Probes per value in nfp mode: the cell and its 26 neighbors.
pub const NFP_PROBES: u64 = 27;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PsiError {
    #[error("batch parameters fingerprint {actual:016x} does not match server {expected:016x}")]
    FingerprintMismatch { expected: u64, actual: u64 },
    #[error("query {query} value {value} has width {actual}, server uses {expected}")]
    WidthMismatch {
        query: usize,
        value: usize,
        expected: usize,
        actual: usize,
    },
    #[error("sampling interval must be positive")]
    ZeroSamplingInterval,
    #[error("unknown mode {0:?}")]
    UnknownMode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Mode {
    #[default]
    StPsi,
    StPsiDoe,
    NfpStPsi,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::StPsi, Mode::StPsiDoe, Mode::NfpStPsi];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::StPsi => "stpsi",
            Mode::StPsiDoe => "doe",
            Mode::NfpStPsi => "nfp",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = PsiError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "stpsi" | "st_psi" => Ok(Mode::StPsi),
            "doe" | "stpsi_doe" | "st_psi_doe" => Ok(Mode::StPsiDoe),
            "nfp" | "nfp_stpsi" | "nfp_st_psi" => Ok(Mode::NfpStPsi),
            _ => Err(PsiError::UnknownMode(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub client_id: ClientId,
    /// Hash values in sampling order.
    pub values: Vec<TrajectoryHashValue>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryBatch {
    pub queries: Vec<Query>,
    pub params_fingerprint: u64,
}

impl QueryBatch {
    pub fn new(queries: Vec<Query>, params: &EncodingParams) -> Self {
        Self {
            queries,
            params_fingerprint: params.fingerprint(),
        }
    }

    pub fn value_count(&self) -> u64 {
        self.queries.iter().map(|q| q.values.len() as u64).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchResult {
    pub client_id: ClientId,
    pub positive: bool,
    pub mode: Mode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PsiConfig {
    /// Probe every value against every chunk even after a hit.
    pub constant_scan: bool,
    pub theta_doe_s: u64,
    pub sampling_interval_s: u64,
}

impl Default for PsiConfig {
    fn default() -> Self {
        Self {
            constant_scan: true,
            theta_doe_s: 0,
            sampling_interval_s: 60,
        }
    }
}

/// True iff some run of consecutive hits lasts at least `theta_doe_s`,
/// each hit counting `sampling_interval_s`. A miss resets the run.
pub fn run_reaches(
    hits: impl IntoIterator<Item = bool>,
    sampling_interval_s: u64,
    theta_doe_s: u64,
) -> bool {
    let mut run = 0u64;
    for hit in hits {
        if hit {
            run += sampling_interval_s;
            if run >= theta_doe_s {
                return true;
            }
        } else {
            run = 0;
        }
    }
    false
}

#[derive(Debug, Clone)]
struct QueryState {
    positive: bool,
    // per-value membership, doe mode only
    hits: Vec<bool>,
    // decoded cells, nfp mode only
    cells: Vec<CellCoords>,
}

/// Incremental matcher fed one chunk at a time.
#[derive(Debug, Clone)]
pub struct Matcher<'a> {
    batch: &'a QueryBatch,
    encoder: Encoder,
    mode: Mode,
    cfg: PsiConfig,
    states: Vec<QueryState>,
    probes: u64,
    chunks_seen: usize,
}

impl<'a> Matcher<'a> {
    /// Validates the batch against the server parameters.
    pub fn new(
        batch: &'a QueryBatch,
        params: &EncodingParams,
        mode: Mode,
        cfg: PsiConfig,
    ) -> Result<Self, PsiError> {
        if batch.params_fingerprint != params.fingerprint() {
            return Err(PsiError::FingerprintMismatch {
                expected: params.fingerprint(),
                actual: batch.params_fingerprint,
            });
        }
        if cfg.sampling_interval_s == 0 {
            return Err(PsiError::ZeroSamplingInterval);
        }
        let width = params.hash_width();
        for (qi, q) in batch.queries.iter().enumerate() {
            if let Some((vi, v)) = q
                .values
                .iter()
                .enumerate()
                .find(|(_, v)| v.width() != width)
            {
                return Err(PsiError::WidthMismatch {
                    query: qi,
                    value: vi,
                    expected: width,
                    actual: v.width(),
                });
            }
        }
        let encoder = Encoder::new(*params);
        let states = batch
            .queries
            .par_iter()
            .map(|q| QueryState {
                positive: false,
                hits: if mode == Mode::StPsiDoe {
                    vec![false; q.values.len()]
                } else {
                    Vec::new()
                },
                cells: if mode == Mode::NfpStPsi {
                    // undecodable values still get probed, as an out-of-grid cell
                    q.values
                        .iter()
                        .map(|v| {
                            encoder.decode_cell(v).unwrap_or(CellCoords {
                                x: u32::MAX,
                                y: u32::MAX,
                                tc: u64::MAX,
                            })
                        })
                        .collect()
                } else {
                    Vec::new()
                },
            })
            .collect();
        Ok(Self {
            batch,
            encoder,
            mode,
            cfg,
            states,
            probes: 0,
            chunks_seen: 0,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Dictionary probes issued so far.
    pub fn probes(&self) -> u64 {
        self.probes
    }

    pub fn chunks_seen(&self) -> usize {
        self.chunks_seen
    }

    /// Probes every pending value against one chunk.
    pub fn absorb_chunk(&mut self, chunk: &SuccinctTrie) {
        let (mode, cfg, enc) = (self.mode, self.cfg, &self.encoder);
        self.probes += self
            .states
            .par_iter_mut()
            .zip(self.batch.queries.par_iter())
            .map(|(state, q)| match mode {
                Mode::StPsi => probe_any(chunk, q, state, cfg.constant_scan),
                Mode::StPsiDoe => probe_each(chunk, q, state, cfg.constant_scan),
                Mode::NfpStPsi => probe_neighborhood(chunk, enc, q, state, cfg.constant_scan),
            })
            .sum::<u64>();
        self.chunks_seen += 1;
    }

    pub fn finish(self) -> Vec<MatchResult> {
        let (mode, cfg) = (self.mode, self.cfg);
        self.states
            .into_iter()
            .zip(&self.batch.queries)
            .map(|(s, q)| MatchResult {
                client_id: q.client_id,
                positive: match mode {
                    Mode::StPsiDoe => run_reaches(s.hits, cfg.sampling_interval_s, cfg.theta_doe_s),
                    _ => s.positive,
                },
                mode,
            })
            .collect()
    }
}

fn probe_any(chunk: &SuccinctTrie, q: &Query, state: &mut QueryState, constant_scan: bool) -> u64 {
    if !constant_scan && state.positive {
        return 0;
    }
    let mut probes = 0;
    for v in &q.values {
        probes += 1;
        if chunk.lookup(v.as_bytes()) {
            state.positive = true;
            if !constant_scan {
                break;
            }
        }
    }
    probes
}

fn probe_each(chunk: &SuccinctTrie, q: &Query, state: &mut QueryState, constant_scan: bool) -> u64 {
    let mut probes = 0;
    for (v, hit) in q.values.iter().zip(state.hits.iter_mut()) {
        if !constant_scan && *hit {
            continue;
        }
        probes += 1;
        *hit |= chunk.lookup(v.as_bytes());
    }
    probes
}

fn probe_neighborhood(
    chunk: &SuccinctTrie,
    enc: &Encoder,
    q: &Query,
    state: &mut QueryState,
    constant_scan: bool,
) -> u64 {
    if !constant_scan && state.positive {
        return 0;
    }
    let mut probes = 0u64;
    for (v, cell) in q.values.iter().zip(&state.cells) {
        probes += 1;
        let mut hit = chunk.lookup(v.as_bytes());
        if !hit || constant_scan {
            let mut issued = 0u64;
            enc.for_each_neighbor(cell, |n| {
                if constant_scan || !hit {
                    issued += 1;
                    hit |= chunk.lookup(n.as_bytes());
                }
            });
            // edge cells have fewer neighbors; pad so every value costs 27
            if constant_scan {
                let pad = NFP_PROBES - 1 - issued;
                for _ in 0..pad {
                    std::hint::black_box(chunk.lookup(v.as_bytes()));
                }
                issued += pad;
            }
            probes += issued;
        }
        if hit {
            state.positive = true;
            if !constant_scan {
                break;
            }
        }
    }
    probes
}

/// Runs `mode` over every chunk of `dict` in order.
pub fn run(
    batch: &QueryBatch,
    dict: &ChunkedDictionary,
    mode: Mode,
    cfg: PsiConfig,
) -> Result<(Vec<MatchResult>, u64), PsiError> {
    let mut m = Matcher::new(batch, dict.params(), mode, cfg)?;
    for chunk in dict.chunks() {
        m.absorb_chunk(chunk);
    }
    let probes = m.probes();
    Ok((m.finish(), probes))
}

/// Positive iff any value lies in the dictionary.
pub fn st_psi(
    batch: &QueryBatch,
    dict: &ChunkedDictionary,
    cfg: PsiConfig,
) -> Result<Vec<MatchResult>, PsiError> {
    run(batch, dict, Mode::StPsi, cfg).map(|(r, _)| r)
}

/// Positive iff a run of consecutive matching values lasts `theta_doe_s`.
pub fn st_psi_doe(
    batch: &QueryBatch,
    dict: &ChunkedDictionary,
    cfg: PsiConfig,
) -> Result<Vec<MatchResult>, PsiError> {
    run(batch, dict, Mode::StPsiDoe, cfg).map(|(r, _)| r)
}

/// Positive iff any value or one of its 26 neighbor cells lies in the dictionary.
pub fn nfp_st_psi(
    batch: &QueryBatch,
    dict: &ChunkedDictionary,
    cfg: PsiConfig,
) -> Result<Vec<MatchResult>, PsiError> {
    run(batch, dict, Mode::NfpStPsi, cfg).map(|(r, _)| r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunking::normalize_keys;
    use crate::encoding::{MixMode, TrajectoryPoint};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const T0: i64 = 1_601_856_000;

    fn params() -> EncodingParams {
        EncodingParams::new(16, 20, T0, T0 + 14 * 86_400, MixMode::Interleave).unwrap()
    }

    fn enc() -> Encoder {
        Encoder::new(params())
    }

    fn cell_key(x: u32, y: u32, tc: u64) -> TrajectoryHashValue {
        enc().encode_cell(&CellCoords { x, y, tc }).unwrap()
    }

    fn dict(keys: Vec<TrajectoryHashValue>, n: usize) -> ChunkedDictionary {
        ChunkedDictionary::from_keys(params(), keys, n).unwrap()
    }

    fn batch(values: Vec<Vec<TrajectoryHashValue>>) -> QueryBatch {
        let queries = values
            .into_iter()
            .enumerate()
            .map(|(i, values)| Query {
                client_id: client_id_from_u64(i as u64),
                values,
            })
            .collect();
        QueryBatch::new(queries, &params())
    }

    fn positives(r: &[MatchResult]) -> Vec<bool> {
        r.iter().map(|m| m.positive).collect()
    }

    #[test]
    fn disjoint_and_single_shared_cell() {
        let d = dict(vec![cell_key(10, 10, 5), cell_key(20, 20, 5)], 1);
        let b = batch(vec![
            vec![cell_key(11, 10, 5), cell_key(30, 30, 1)],
            vec![cell_key(1, 1, 1), cell_key(20, 20, 5)],
        ]);
        let r = st_psi(&b, &d, PsiConfig::default()).unwrap();
        assert_eq!(positives(&r), [false, true]);
        assert!(r.iter().all(|m| m.mode == Mode::StPsi));
        assert_eq!(r[1].client_id, client_id_from_u64(1));
    }

    #[test]
    fn nfp_catches_adjacent_cell() {
        let d = dict(vec![cell_key(10, 10, 5)], 1);
        let b = batch(vec![
            vec![cell_key(11, 10, 5)],
            vec![cell_key(10, 10, 6)],
            vec![cell_key(12, 10, 5)],
        ]);
        let st = st_psi(&b, &d, PsiConfig::default()).unwrap();
        let nfp = nfp_st_psi(&b, &d, PsiConfig::default()).unwrap();
        assert_eq!(positives(&st), [false, false, false]);
        assert_eq!(positives(&nfp), [true, true, false]);
    }

    #[test]
    fn doe_patterns() {
        let server: Vec<_> = (0..4).map(|t| cell_key(5, 5, t)).collect();
        let d = dict(server.clone(), 2);
        let miss = cell_key(100, 100, 0);
        let pattern = |bits: &[u8]| -> Vec<TrajectoryHashValue> {
            bits.iter()
                .enumerate()
                .map(|(i, &b)| if b == 1 { server[i % 4] } else { miss })
                .collect()
        };
        let b = batch(vec![pattern(&[1, 1, 0, 1]), pattern(&[1, 0, 1, 0, 1])]);
        let cfg = PsiConfig {
            theta_doe_s: 120,
            sampling_interval_s: 60,
            ..PsiConfig::default()
        };
        assert_eq!(positives(&st_psi_doe(&b, &d, cfg).unwrap()), [true, false]);
        let zero = PsiConfig {
            theta_doe_s: 0,
            ..cfg
        };
        assert_eq!(
            st_psi_doe(&b, &d, zero)
                .unwrap()
                .iter()
                .map(|m| m.positive)
                .collect::<Vec<_>>(),
            positives(&st_psi(&b, &d, zero).unwrap())
        );
    }

    #[test]
    fn doe_run_crosses_chunk_boundary() {
        // consecutive samples whose keys land in different chunks
        let a = cell_key(0, 0, 0);
        let z = cell_key(60_000, 60_000, 100);
        let cfg = PsiConfig {
            theta_doe_s: 120,
            sampling_interval_s: 60,
            ..PsiConfig::default()
        };
        for n in [1, 2] {
            let d = dict(vec![a, z], n);
            let r = st_psi_doe(&batch(vec![vec![a, z]]), &d, cfg).unwrap();
            assert!(r[0].positive, "n_chunks={n}");
        }
    }

    #[test]
    fn run_reaches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let len = rng.random_range(0..30);
            let bits: Vec<bool> = (0..len).map(|_| rng.random_bool(0.6)).collect();
            let interval = rng.random_range(1..120u64);
            let theta = rng.random_range(0..8) * interval / 2;
            let longest = bits.split(|b| !b).map(<[bool]>::len).max().unwrap_or(0) as u64;
            let expected = longest >= 1 && longest * interval >= theta;
            assert_eq!(run_reaches(bits.iter().copied(), interval, theta), expected);
        }
    }

    #[test]
    fn constant_scan_probe_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let server: Vec<_> = (0..500)
            .map(|_| {
                cell_key(
                    rng.random_range(0..50),
                    rng.random_range(0..50),
                    rng.random_range(0..20),
                )
            })
            .collect();
        let mut queries: Vec<Vec<TrajectoryHashValue>> = (0..8)
            .map(|_| {
                (0..rng.random_range(1..40))
                    .map(|_| {
                        cell_key(
                            rng.random_range(0..50),
                            rng.random_range(0..50),
                            rng.random_range(0..20),
                        )
                    })
                    .collect()
            })
            .collect();
        // a corner cell has only 7 neighbors
        queries.push(vec![cell_key(0, 0, 0)]);
        let b = batch(queries);
        let values = b.value_count();
        for n in [1, 3, 7] {
            let d = dict(server.clone(), n);
            let (_, p) = run(&b, &d, Mode::StPsi, PsiConfig::default()).unwrap();
            assert_eq!(p, values * n as u64);
            let (_, p) = run(&b, &d, Mode::StPsiDoe, PsiConfig::default()).unwrap();
            assert_eq!(p, values * n as u64);
            let (_, p) = run(&b, &d, Mode::NfpStPsi, PsiConfig::default()).unwrap();
            assert_eq!(p, values * n as u64 * NFP_PROBES);
        }
    }

    #[test]
    fn early_exit_matches_constant_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let server: Vec<_> = (0..300)
            .map(|_| {
                cell_key(
                    rng.random_range(0..30),
                    rng.random_range(0..30),
                    rng.random_range(0..10),
                )
            })
            .collect();
        let queries: Vec<Vec<_>> = (0..30)
            .map(|_| {
                (0..20)
                    .map(|_| {
                        cell_key(
                            rng.random_range(0..30),
                            rng.random_range(0..30),
                            rng.random_range(0..10),
                        )
                    })
                    .collect()
            })
            .collect();
        let b = batch(queries);
        let d = dict(server, 4);
        let fast = PsiConfig {
            constant_scan: false,
            theta_doe_s: 120,
            ..PsiConfig::default()
        };
        let full = PsiConfig {
            constant_scan: true,
            ..fast
        };
        for mode in Mode::ALL {
            let (a, pa) = run(&b, &d, mode, fast).unwrap();
            let (c, pc) = run(&b, &d, mode, full).unwrap();
            assert_eq!(a, c, "{mode}");
            assert!(pa <= pc);
        }
    }

    #[test]
    fn matches_flat_intersection_and_chunk_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = params();
        let e = enc();
        let pt = |rng: &mut ChaCha8Rng| {
            TrajectoryPoint::new(
                T0 + rng.random_range(0..14 * 86_400),
                40.7 + rng.random_range(0.0..0.05),
                -74.0 + rng.random_range(0.0..0.05),
            )
        };
        let server = normalize_keys((0..5000).map(|_| e.hash(&pt(&mut rng)).unwrap()).collect());
        let queries: Vec<Vec<_>> = (0..40)
            .map(|_| (0..50).map(|_| e.hash(&pt(&mut rng)).unwrap()).collect())
            .collect();
        let expected: Vec<bool> = queries
            .iter()
            .map(|q| q.iter().any(|v| server.binary_search(v).is_ok()))
            .collect();
        let b = QueryBatch::new(
            queries
                .into_iter()
                .enumerate()
                .map(|(i, values)| Query {
                    client_id: client_id_from_u64(i as u64),
                    values,
                })
                .collect(),
            &p,
        );
        let cfg = PsiConfig {
            theta_doe_s: 120,
            ..PsiConfig::default()
        };
        let base: Vec<_> = Mode::ALL
            .iter()
            .map(|&m| run(&b, &dict(server.clone(), 1), m, cfg).unwrap().0)
            .collect();
        assert_eq!(positives(&base[0]), expected);
        assert!(expected.iter().any(|&x| x));
        for n in [5, 20, 50] {
            let d = dict(server.clone(), n);
            for (i, &m) in Mode::ALL.iter().enumerate() {
                assert_eq!(run(&b, &d, m, cfg).unwrap().0, base[i]);
            }
        }
        // monotone: st positives are nfp positives
        for (s, n) in base[0].iter().zip(&base[2]) {
            assert!(!s.positive || n.positive);
        }
    }

    #[test]
    fn rejects_bad_batches() {
        let d = dict(vec![cell_key(1, 1, 1)], 1);
        let mut b = batch(vec![vec![cell_key(1, 1, 1)]]);
        b.params_fingerprint ^= 1;
        assert!(matches!(
            st_psi(&b, &d, PsiConfig::default()),
            Err(PsiError::FingerprintMismatch { .. })
        ));
        let b = batch(vec![
            vec![cell_key(1, 1, 1)],
            vec![TrajectoryHashValue::from_slice(&[1, 2]).unwrap()],
        ]);
        assert!(matches!(
            st_psi(&b, &d, PsiConfig::default()),
            Err(PsiError::WidthMismatch {
                query: 1,
                value: 0,
                ..
            })
        ));
        let b = batch(vec![]);
        let cfg = PsiConfig {
            sampling_interval_s: 0,
            ..PsiConfig::default()
        };
        assert_eq!(st_psi(&b, &d, cfg), Err(PsiError::ZeroSamplingInterval));
        assert_eq!("nfp".parse::<Mode>().unwrap(), Mode::NfpStPsi);
        assert!("x".parse::<Mode>().is_err());
    }
}

// SPDX-License-Identifier: Apache-2.0

//! Sort-then-split chunking of the encoded infected dataset.
//!
//! Encoded values are deduplicated, sorted in byte order and cut into
//! contiguous runs of near-equal length; each run becomes one trie. Sorted
//! runs keep similar keys together, so each chunk compresses well, and any
//! key can live in exactly one chunk.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::dictionary::{DictionaryError, SuccinctTrie};
use crate::encoding::{
    Encoder, EncodingError, EncodingParams, MixMode, TrajectoryHashValue, TrajectoryPoint,
};

pub const MANIFEST_MAGIC: &str = "pct-manifest 1";

/// Default trusted-memory capacity, 96 MiB.
pub const DEFAULT_BUDGET_BYTES: u64 = 96 << 20;

/// Keys sampled when estimating trie bytes per key.
const PLANNER_SAMPLE_KEYS: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum ChunkingError {
    #[error("point {index}: {source}")]
    Encoding { index: usize, source: EncodingError },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("chunk count must be at least 1")]
    ZeroChunks,
    #[error("key has width {actual}, parameters require {expected}")]
    WidthMismatch { expected: usize, actual: usize },
    #[error("trusted-memory budget of {budget} bytes cannot hold {reserved} reserved bytes plus a chunk")]
    BudgetTooSmall { budget: u64, reserved: u64 },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("chunk {path}: {source}")]
    ChunkFile {
        path: PathBuf,
        source: DictionaryError,
    },
    #[error(transparent)]
    Dictionary(#[from] DictionaryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered list of trie chunks covering the sorted server key set.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkedDictionary {
    params: EncodingParams,
    chunks: Vec<SuccinctTrie>,
    // first key of each non-empty chunk; empty chunks only trail
    chunk_boundaries: Vec<TrajectoryHashValue>,
}

impl ChunkedDictionary {
    /// Encodes, deduplicates, sorts and splits `points` into `n_chunks` tries.
    pub fn map_to_chunked_dictionary(
        points: &[TrajectoryPoint],
        params: EncodingParams,
        n_chunks: usize,
    ) -> Result<Self, ChunkingError> {
        if points.is_empty() {
            return Err(ChunkingError::EmptyDataset);
        }
        if n_chunks == 0 {
            return Err(ChunkingError::ZeroChunks);
        }
        let keys = encode_points(points, &params)?;
        Self::from_sorted_keys(params, normalize_keys(keys), n_chunks)
    }

    pub fn from_keys(
        params: EncodingParams,
        keys: Vec<TrajectoryHashValue>,
        n_chunks: usize,
    ) -> Result<Self, ChunkingError> {
        Self::from_sorted_keys(params, normalize_keys(keys), n_chunks)
    }

    /// `keys` must be strictly increasing with the params' width.
    pub fn from_sorted_keys(
        params: EncodingParams,
        keys: Vec<TrajectoryHashValue>,
        n_chunks: usize,
    ) -> Result<Self, ChunkingError> {
        if n_chunks == 0 {
            return Err(ChunkingError::ZeroChunks);
        }
        let width = params.hash_width();
        if let Some(k) = keys.iter().find(|k| k.width() != width) {
            return Err(ChunkingError::WidthMismatch {
                expected: width,
                actual: k.width(),
            });
        }
        let chunks = split_ranges(keys.len(), n_chunks)
            .into_par_iter()
            .map(|(lo, hi)| SuccinctTrie::build_with_width(width, &keys[lo..hi]))
            .collect::<Result<Vec<_>, _>>()?;
        let chunk_boundaries = split_ranges(keys.len(), n_chunks)
            .into_iter()
            .filter(|(lo, hi)| lo < hi)
            .map(|(lo, _)| keys[lo])
            .collect();
        Ok(Self {
            params,
            chunks,
            chunk_boundaries,
        })
    }

    /// Reassembles a dictionary from already-built tries in key order.
    pub fn from_chunks(
        params: EncodingParams,
        chunks: Vec<SuccinctTrie>,
    ) -> Result<Self, ChunkingError> {
        if chunks.is_empty() {
            return Err(ChunkingError::ZeroChunks);
        }
        let width = params.hash_width();
        let mut chunk_boundaries: Vec<TrajectoryHashValue> = Vec::new();
        let mut prev_last: Option<Vec<u8>> = None;
        let mut seen_empty = false;
        for c in &chunks {
            if c.is_empty() {
                seen_empty = true;
                continue;
            }
            if c.key_width() != width {
                return Err(ChunkingError::WidthMismatch {
                    expected: width,
                    actual: c.key_width(),
                });
            }
            let first = c.first_key().expect("non-empty chunk");
            if seen_empty
                || prev_last
                    .as_ref()
                    .is_some_and(|p| p.as_slice() >= first.as_slice())
            {
                return Err(DictionaryError::Unsorted {
                    index: chunk_boundaries.len(),
                }
                .into());
            }
            chunk_boundaries.push(TrajectoryHashValue::from_slice(&first).expect("width checked"));
            prev_last = c.last_key();
        }
        Ok(Self {
            params,
            chunks,
            chunk_boundaries,
        })
    }

    pub fn params(&self) -> &EncodingParams {
        &self.params
    }

    pub fn chunks(&self) -> &[SuccinctTrie] {
        &self.chunks
    }

    pub fn n_chunks(&self) -> usize {
        self.chunks.len()
    }

    pub fn chunk_boundaries(&self) -> &[TrajectoryHashValue] {
        &self.chunk_boundaries
    }

    pub fn key_count(&self) -> u64 {
        self.chunks.iter().map(SuccinctTrie::key_count).sum()
    }

    pub fn max_chunk_bytes(&self) -> usize {
        self.chunks
            .iter()
            .map(SuccinctTrie::size_bytes)
            .max()
            .unwrap_or(0)
    }

    pub fn total_bytes(&self) -> usize {
        self.chunks.iter().map(SuccinctTrie::size_bytes).sum()
    }

    /// Index of the only chunk that can hold `key`.
    pub fn locate(&self, key: &TrajectoryHashValue) -> Option<usize> {
        let after = self.chunk_boundaries.partition_point(|b| b <= key);
        after.checked_sub(1)
    }

    pub fn membership(&self, key: &TrajectoryHashValue) -> Result<bool, ChunkingError> {
        let width = self.params.hash_width();
        if key.width() != width {
            return Err(ChunkingError::WidthMismatch {
                expected: width,
                actual: key.width(),
            });
        }
        Ok(self
            .locate(key)
            .is_some_and(|i| self.chunks[i].lookup(key.as_bytes())))
    }

    /// Writes one `.pctf` file per chunk plus a manifest into `dir`.
    pub fn save(&self, dir: &Path, rules: &ContactRules) -> Result<PathBuf, ChunkingError> {
        fs::create_dir_all(dir)?;
        let mut files = Vec::with_capacity(self.chunks.len());
        for (i, c) in self.chunks.iter().enumerate() {
            let name = format!("chunk_{i:04}.pctf");
            fs::write(dir.join(&name), c.serialize())?;
            files.push(PathBuf::from(name));
        }
        let manifest = Manifest {
            params: self.params,
            rules: *rules,
            key_count: self.key_count(),
            chunk_files: files,
        };
        let path = dir.join("manifest.txt");
        manifest.write(&path)?;
        Ok(path)
    }

    /// Loads the manifest at `path` and every chunk it lists.
    pub fn load(path: &Path) -> Result<(Self, Manifest), ChunkingError> {
        let manifest = Manifest::read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let chunks = manifest
            .chunk_files
            .iter()
            .map(|f| {
                let p = base.join(f);
                let bytes = fs::read(&p)?;
                SuccinctTrie::deserialize(&bytes)
                    .map_err(|source| ChunkingError::ChunkFile { path: p, source })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let dict = Self::from_chunks(manifest.params, chunks)?;
        if dict.key_count() != manifest.key_count {
            return Err(ChunkingError::Manifest {
                line: 0,
                message: format!(
                    "manifest lists {} keys, chunks hold {}",
                    manifest.key_count,
                    dict.key_count()
                ),
            });
        }
        Ok((dict, manifest))
    }
}

/// Encodes every point; errors carry the offending index.
pub fn encode_points(
    points: &[TrajectoryPoint],
    params: &EncodingParams,
) -> Result<Vec<TrajectoryHashValue>, ChunkingError> {
    let enc = Encoder::new(*params);
    points
        .par_iter()
        .enumerate()
        .map(|(index, p)| {
            enc.hash(p)
                .map_err(|source| ChunkingError::Encoding { index, source })
        })
        .collect()
}

/// Sorts and deduplicates keys.
pub fn normalize_keys(mut keys: Vec<TrajectoryHashValue>) -> Vec<TrajectoryHashValue> {
    keys.par_sort_unstable();
    keys.dedup();
    keys
}

/// Contiguous `[lo, hi)` ranges of `n` items in `parts` runs whose sizes
/// differ by at most one, larger runs first.
pub fn split_ranges(n: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = n / parts;
    let extra = n % parts;
    let mut lo = 0;
    (0..parts)
        .map(|i| {
            let hi = lo + base + usize::from(i < extra);
            let r = (lo, hi);
            lo = hi;
            r
        })
        .collect()
}

/// Chunk count for a trusted-memory budget:
/// `ceil(total_keys · bytes_per_key / (budget − reserved))`, at least 1.
pub fn plan_chunk_count(
    total_keys: u64,
    bytes_per_key: f64,
    budget_bytes: u64,
    reserved_bytes: u64,
) -> Result<usize, ChunkingError> {
    if budget_bytes <= reserved_bytes {
        return Err(ChunkingError::BudgetTooSmall {
            budget: budget_bytes,
            reserved: reserved_bytes,
        });
    }
    let room = (budget_bytes - reserved_bytes) as f64;
    Ok(((total_keys as f64 * bytes_per_key / room).ceil() as usize).max(1))
}

/// Serialized trie bytes per key, measured on an evenly strided sample.
///
/// Strided samples share fewer prefixes than the full set, so this errs high.
pub fn measure_bytes_per_key(sorted_keys: &[TrajectoryHashValue]) -> f64 {
    if sorted_keys.is_empty() {
        return 0.0;
    }
    let stride = sorted_keys.len().div_ceil(PLANNER_SAMPLE_KEYS).max(1);
    let sample: Vec<TrajectoryHashValue> = sorted_keys.iter().step_by(stride).copied().collect();
    let trie = SuccinctTrie::build(&sample).expect("sample of sorted unique keys");
    trie.size_bytes() as f64 / sample.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChunkPlan {
    pub n_chunks: usize,
    pub bytes_per_key: f64,
    /// Largest serialized chunk the budget admits.
    pub chunk_limit_bytes: u64,
}

/// Plans a chunk count from a sample, builds, and grows the count until
/// every chunk fits in `budget − reserved`.
pub fn build_within_budget(
    params: EncodingParams,
    sorted_keys: Vec<TrajectoryHashValue>,
    budget_bytes: u64,
    reserved_bytes: u64,
) -> Result<(ChunkedDictionary, ChunkPlan), ChunkingError> {
    let bytes_per_key = measure_bytes_per_key(&sorted_keys);
    let mut n_chunks = plan_chunk_count(
        sorted_keys.len() as u64,
        bytes_per_key,
        budget_bytes,
        reserved_bytes,
    )?;
    let limit = budget_bytes - reserved_bytes;
    loop {
        let dict = ChunkedDictionary::from_sorted_keys(params, sorted_keys.clone(), n_chunks)?;
        let largest = dict.max_chunk_bytes() as u64;
        if largest <= limit {
            return Ok((
                dict,
                ChunkPlan {
                    n_chunks,
                    bytes_per_key,
                    chunk_limit_bytes: limit,
                },
            ));
        }
        if n_chunks >= sorted_keys.len().max(1) {
            return Err(ChunkingError::BudgetTooSmall {
                budget: budget_bytes,
                reserved: reserved_bytes,
            });
        }
        let grown = (n_chunks as f64 * largest as f64 / limit as f64).ceil() as usize;
        n_chunks = grown.max(n_chunks + 1).min(sorted_keys.len());
    }
}

/// Contact rules fixed at build time alongside the encoding parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContactRules {
    /// Minimum exposure duration in seconds; 0 disables the rule.
    pub theta_doe_s: u64,
    pub sampling_interval_s: u64,
}

impl Default for ContactRules {
    fn default() -> Self {
        Self {
            theta_doe_s: 0,
            sampling_interval_s: 60,
        }
    }
}

/// Manifest: a `key = value` header, a blank line, then one chunk path per
/// line relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub params: EncodingParams,
    pub rules: ContactRules,
    pub key_count: u64,
    pub chunk_files: Vec<PathBuf>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let p = &self.params;
        let mut s = String::new();
        s.push_str(MANIFEST_MAGIC);
        s.push('\n');
        for (k, v) in [
            ("theta_geo", p.theta_geo().to_string()),
            ("theta_time", p.theta_time().to_string()),
            ("t_start", p.t_start().to_string()),
            ("t_end", p.t_end().to_string()),
            ("mix_mode", p.mix_mode().to_string()),
            ("theta_doe", self.rules.theta_doe_s.to_string()),
            (
                "sampling_interval",
                self.rules.sampling_interval_s.to_string(),
            ),
            ("key_count", self.key_count.to_string()),
            ("chunks", self.chunk_files.len().to_string()),
        ] {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s.push('\n');
        for f in &self.chunk_files {
            s.push_str(&f.to_string_lossy());
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<(), ChunkingError> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, ChunkingError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, ChunkingError> {
        let err = |line: usize, message: String| ChunkingError::Manifest { line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l.trim() == MANIFEST_MAGIC => {}
            _ => return Err(err(1, format!("expected {MANIFEST_MAGIC:?}"))),
        }
        let mut fields = std::collections::HashMap::new();
        for (n, l) in lines.by_ref() {
            let l = l.trim();
            if l.is_empty() {
                break;
            }
            if l.starts_with('#') {
                continue;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| err(n, format!("expected key = value, got {l:?}")))?;
            fields.insert(k.trim().to_string(), (n, v.trim().to_string()));
        }
        fn get<T: std::str::FromStr>(
            fields: &std::collections::HashMap<String, (usize, String)>,
            key: &str,
        ) -> Result<T, ChunkingError> {
            let (line, v) = fields.get(key).ok_or_else(|| ChunkingError::Manifest {
                line: 0,
                message: format!("missing {key}"),
            })?;
            v.parse().map_err(|_| ChunkingError::Manifest {
                line: *line,
                message: format!("bad {key} {v:?}"),
            })
        }
        let mix: String = get(&fields, "mix_mode")?;
        let mix_mode: MixMode = mix
            .parse()
            .map_err(|e: EncodingError| err(0, e.to_string()))?;
        let params = EncodingParams::new(
            get(&fields, "theta_geo")?,
            get(&fields, "theta_time")?,
            get(&fields, "t_start")?,
            get(&fields, "t_end")?,
            mix_mode,
        )
        .map_err(|e| err(0, e.to_string()))?;
        let rules = ContactRules {
            theta_doe_s: get(&fields, "theta_doe")?,
            sampling_interval_s: get(&fields, "sampling_interval")?,
        };
        if rules.sampling_interval_s == 0 {
            return Err(err(0, "sampling_interval must be positive".to_string()));
        }
        let key_count = get(&fields, "key_count")?;
        let n_chunks: usize = get(&fields, "chunks")?;
        let chunk_files: Vec<PathBuf> = lines
            .map(|(_, l)| l.trim())
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(PathBuf::from)
            .collect();
        if chunk_files.len() != n_chunks {
            return Err(err(
                0,
                format!(
                    "header lists {n_chunks} chunks, found {} paths",
                    chunk_files.len()
                ),
            ));
        }
        Ok(Self {
            params,
            rules,
            key_count,
            chunk_files,
        })
    }
}

// SPDX-License-Identifier: Apache-2.0

//! Brute-force exact contact decisions and protocol evaluation.
//!
//! Distances are measured in continuous tile coordinates at the encoding's
//! `theta_geo` level, where one cell has side 1, and in seconds for time.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::chunking::{encode_points, ChunkedDictionary, ChunkingError};
use crate::encoding::{tile_position, EncodingError, EncodingParams, TrajectoryPoint};
use crate::psi::{client_id_from_u64, run, Mode, PsiConfig, PsiError, Query, QueryBatch};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("client {client} point {index}: {source}")]
    Encoding {
        client: usize,
        index: usize,
        source: EncodingError,
    },
    #[error("server point {index}: {source}")]
    ServerEncoding { index: usize, source: EncodingError },
    #[error(transparent)]
    Chunking(#[from] ChunkingError),
    #[error(transparent)]
    Psi(#[from] PsiError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactThresholds {
    pub theta_geo_cells: f64,
    pub theta_time_s: f64,
    pub theta_doe_s: u64,
    /// Nominal spacing of client samples; a longer gap breaks a run.
    pub sampling_interval_s: u64,
}

impl ExactThresholds {
    /// Thresholds equal to one encoding cell in space and time.
    pub fn cell_sized(params: &EncodingParams) -> Self {
        Self {
            theta_geo_cells: 1.0,
            theta_time_s: params.time_cell_seconds() as f64,
            theta_doe_s: 0,
            sampling_interval_s: 60,
        }
    }

    /// Largest mixed-norm nearest distance an nfp false positive can have.
    pub fn nfp_mixed_bound(&self) -> f64 {
        2.0 * (2.0 * self.theta_geo_cells.powi(2) + self.theta_time_s.powi(2)).sqrt()
    }
}

/// A point in the distance space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpacePoint {
    pub x: f64,
    pub y: f64,
    pub t: i64,
}

impl SpacePoint {
    pub fn planar(&self, o: &SpacePoint) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }

    pub fn dt(&self, o: &SpacePoint) -> f64 {
        (self.t - o.t).unsigned_abs() as f64
    }
}

pub fn project(
    points: &[TrajectoryPoint],
    theta_geo: u8,
) -> Result<Vec<SpacePoint>, EncodingError> {
    points
        .iter()
        .map(|p| tile_position(p.lat, p.lng, theta_geo).map(|(x, y)| SpacePoint { x, y, t: p.t }))
        .collect()
}

fn is_close(a: &SpacePoint, b: &SpacePoint, th: &ExactThresholds) -> bool {
    a.dt(b) <= th.theta_time_s && a.planar(b) <= th.theta_geo_cells
}

/// Grid-bucketed point set for threshold queries.
#[derive(Debug, Clone)]
pub struct ContactIndex {
    th: ExactThresholds,
    geo_bucket: f64,
    time_bucket: f64,
    buckets: HashMap<(i64, i64, i64), Vec<SpacePoint>>,
    // time-sorted copy for window scans
    by_time: Vec<SpacePoint>,
}

impl ContactIndex {
    pub fn new(points: &[SpacePoint], th: ExactThresholds) -> Self {
        // any bucket side at least the threshold keeps matches in adjacent buckets
        let geo_bucket = if th.theta_geo_cells > 0.0 {
            th.theta_geo_cells
        } else {
            1.0
        };
        let time_bucket = if th.theta_time_s > 0.0 {
            th.theta_time_s
        } else {
            1.0
        };
        let mut buckets: HashMap<(i64, i64, i64), Vec<SpacePoint>> = HashMap::new();
        for p in points {
            let k = (
                (p.x / geo_bucket).floor() as i64,
                (p.y / geo_bucket).floor() as i64,
                (p.t as f64 / time_bucket).floor() as i64,
            );
            buckets.entry(k).or_default().push(*p);
        }
        let mut by_time = points.to_vec();
        by_time.sort_by_key(|p| p.t);
        Self {
            th,
            geo_bucket,
            time_bucket,
            buckets,
            by_time,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.by_time.is_empty()
    }

    /// True iff some indexed point is within both thresholds of `p`.
    pub fn near(&self, p: &SpacePoint) -> bool {
        let (bx, by, bt) = (
            (p.x / self.geo_bucket).floor() as i64,
            (p.y / self.geo_bucket).floor() as i64,
            (p.t as f64 / self.time_bucket).floor() as i64,
        );
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dt in -1..=1 {
                    if let Some(b) = self.buckets.get(&(bx + dx, by + dy, bt + dt)) {
                        if b.iter().any(|q| is_close(p, q, &self.th)) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    /// Indexed points with `|t - p.t| <= window`.
    fn time_window(&self, p: &SpacePoint, window: f64) -> &[SpacePoint] {
        let w = window.floor() as i64;
        let lo = self
            .by_time
            .partition_point(|q| q.t < p.t.saturating_sub(w));
        let hi = self
            .by_time
            .partition_point(|q| q.t <= p.t.saturating_add(w));
        &self.by_time[lo..hi]
    }
}

/// Some pair of points within both thresholds.
pub fn exact_contact(xu: &[SpacePoint], xv: &[SpacePoint], th: &ExactThresholds) -> bool {
    let (small, large) = if xu.len() <= xv.len() {
        (xu, xv)
    } else {
        (xv, xu)
    };
    let index = ContactIndex::new(small, *th);
    large.iter().any(|p| index.near(p))
}

/// Some run of consecutive `xu` samples, each near a point of `xv`, lasts
/// at least `theta_doe_s`. Each sample counts `sampling_interval_s`, and a
/// gap longer than that between samples ends the run.
pub fn exact_contact_doe(xu: &[SpacePoint], xv: &[SpacePoint], th: &ExactThresholds) -> bool {
    contact_doe_with(xu, &ContactIndex::new(xv, *th), th)
}

fn contact_doe_with(xu: &[SpacePoint], index: &ContactIndex, th: &ExactThresholds) -> bool {
    let mut run = 0u64;
    let mut prev_t: Option<i64> = None;
    for p in xu {
        if prev_t.is_some_and(|t| p.t - t > th.sampling_interval_s as i64) {
            run = 0;
        }
        prev_t = Some(p.t);
        if index.near(p) {
            run += th.sampling_interval_s;
            if run >= th.theta_doe_s {
                return true;
            }
        } else {
            run = 0;
        }
    }
    false
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Rates in tp, tn, fp, fn order; zeros for an empty matrix.
    pub fn rates(&self) -> [f64; 4] {
        let n = self.total().max(1) as f64;
        [
            self.tp as f64 / n,
            self.tn as f64 / n,
            self.fp as f64 / n,
            self.fn_ as f64 / n,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FalseKind {
    FalsePositive,
    FalseNegative,
}

/// Nearest-pair distances for one misclassified client.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FalseCase {
    pub client: usize,
    pub kind: FalseKind,
    /// Smallest planar distance over pairs with `|dt| <= theta_time_s`.
    pub nearest_planar: Option<f64>,
    /// Time offset of that pair.
    pub nearest_planar_dt_s: Option<f64>,
    /// Smallest `sqrt(planar² + dt²)` over all pairs, searched up to the
    /// nfp bound; `None` means every pair is farther.
    pub nearest_mixed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mode: Mode,
    pub thresholds: ExactThresholds,
    pub matrix: ConfusionMatrix,
    pub false_cases: Vec<FalseCase>,
    pub predicted: Vec<bool>,
    pub actual: Vec<bool>,
}

impl Evaluation {
    /// False positives whose nearest planar distance lies outside (θ_geo, √2·θ_geo].
    pub fn st_fp_violations(&self) -> usize {
        let g = self.thresholds.theta_geo_cells;
        self.false_cases
            .iter()
            .filter(|c| c.kind == FalseKind::FalsePositive)
            .filter(|c| {
                !c.nearest_planar
                    .is_some_and(|d| d > g && d <= std::f64::consts::SQRT_2 * g)
            })
            .count()
    }

    /// False positives whose nearest mixed distance exceeds the nfp bound.
    pub fn nfp_fp_violations(&self) -> usize {
        let bound = self.thresholds.nfp_mixed_bound();
        self.false_cases
            .iter()
            .filter(|c| c.kind == FalseKind::FalsePositive)
            .filter(|c| !c.nearest_mixed.is_some_and(|d| d <= bound))
            .count()
    }
}

fn diagnose(client: usize, kind: FalseKind, xu: &[SpacePoint], index: &ContactIndex) -> FalseCase {
    let th = &index.th;
    let mut planar: Option<(f64, f64)> = None;
    let mut mixed: Option<f64> = None;
    let bound = th.nfp_mixed_bound();
    for p in xu {
        for q in index.time_window(p, th.theta_time_s) {
            let d = p.planar(q);
            if planar.is_none_or(|(best, _)| d < best) {
                planar = Some((d, p.dt(q)));
            }
        }
        for q in index.time_window(p, bound) {
            let d = p.planar(q).hypot(p.dt(q));
            if d <= bound && mixed.is_none_or(|best| d < best) {
                mixed = Some(d);
            }
        }
    }
    FalseCase {
        client,
        kind,
        nearest_planar: planar.map(|(d, _)| d),
        nearest_planar_dt_s: planar.map(|(_, dt)| dt),
        nearest_mixed: mixed,
    }
}

/// Runs `mode` on the plaintext path and scores it against exact contact.
///
/// The doe mode is scored against [`exact_contact_doe`], the others against
/// [`exact_contact`].
pub fn evaluate<C: AsRef<[TrajectoryPoint]> + Sync>(
    clients: &[C],
    server: &[TrajectoryPoint],
    params: &EncodingParams,
    th: &ExactThresholds,
    mode: Mode,
) -> Result<Evaluation, OracleError> {
    let server_keys = encode_points(server, params).map_err(|e| match e {
        ChunkingError::Encoding { index, source } => OracleError::ServerEncoding { index, source },
        other => other.into(),
    })?;
    let dict = ChunkedDictionary::from_keys(*params, server_keys, 1)?;
    let queries = clients
        .iter()
        .enumerate()
        .map(|(ci, c)| {
            let values = encode_points(c.as_ref(), params).map_err(|e| match e {
                ChunkingError::Encoding { index, source } => OracleError::Encoding {
                    client: ci,
                    index,
                    source,
                },
                other => other.into(),
            })?;
            Ok(Query {
                client_id: client_id_from_u64(ci as u64),
                values,
            })
        })
        .collect::<Result<Vec<_>, OracleError>>()?;
    let batch = QueryBatch::new(queries, params);
    let cfg = PsiConfig {
        constant_scan: false,
        theta_doe_s: th.theta_doe_s,
        sampling_interval_s: th.sampling_interval_s.max(1),
    };
    let (results, _) = run(&batch, &dict, mode, cfg)?;
    drop(batch);

    let proj = |pts: &[TrajectoryPoint]| project(pts, params.theta_geo());
    let server_space = proj(server).expect("encoded above");
    let index = ContactIndex::new(&server_space, *th);
    let outcomes: Vec<(bool, Option<FalseCase>)> = clients
        .par_iter()
        .zip(results.par_iter())
        .enumerate()
        .map(|(ci, (c, r))| {
            let xu = proj(c.as_ref()).expect("encoded above");
            let actual = match mode {
                Mode::StPsiDoe => contact_doe_with(&xu, &index, th),
                _ => xu.iter().any(|p| index.near(p)),
            };
            let case = match (r.positive, actual) {
                (true, false) => Some(diagnose(ci, FalseKind::FalsePositive, &xu, &index)),
                (false, true) => Some(diagnose(ci, FalseKind::FalseNegative, &xu, &index)),
                _ => None,
            };
            (actual, case)
        })
        .collect();

    let mut matrix = ConfusionMatrix::default();
    let predicted: Vec<bool> = results.iter().map(|r| r.positive).collect();
    let mut actual = Vec::with_capacity(outcomes.len());
    let mut false_cases = Vec::new();
    for (p, (a, case)) in predicted.iter().zip(outcomes) {
        matrix.record(*p, a);
        actual.push(a);
        false_cases.extend(case);
    }
    Ok(Evaluation {
        mode,
        thresholds: *th,
        matrix,
        false_cases,
        predicted,
        actual,
    })
}

/// Counts of `values` in `bins` equal-width bins over `[lo, hi)`; values
/// outside land in the first or last bin.
pub fn histogram(values: impl IntoIterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins.max(1)];
    let width = (hi - lo) / counts.len() as f64;
    for v in values {
        let i = ((v - lo) / width)
            .floor()
            .clamp(0.0, (counts.len() - 1) as f64) as usize;
        counts[i] += 1;
    }
    counts
}

const HIST_BINS: usize = 10;

fn histograms(e: &Evaluation) -> Vec<(&'static str, f64, f64, Vec<u64>)> {
    let fp = |f: fn(&FalseCase) -> Option<f64>| -> Vec<f64> {
        e.false_cases
            .iter()
            .filter(|c| c.kind == FalseKind::FalsePositive)
            .filter_map(f)
            .collect()
    };
    let g = e.thresholds.theta_geo_cells.max(f64::MIN_POSITIVE);
    let bound = e.thresholds.nfp_mixed_bound().max(f64::MIN_POSITIVE);
    vec![
        (
            "fp_nearest_planar",
            0.0,
            2.0 * g,
            histogram(fp(|c| c.nearest_planar), 0.0, 2.0 * g, HIST_BINS),
        ),
        (
            "fp_nearest_mixed",
            0.0,
            bound,
            histogram(fp(|c| c.nearest_mixed), 0.0, bound, HIST_BINS),
        ),
        (
            "fn_nearest_dt_s",
            0.0,
            e.thresholds.theta_time_s.max(1.0),
            histogram(
                e.false_cases
                    .iter()
                    .filter(|c| c.kind == FalseKind::FalseNegative)
                    .filter_map(|c| c.nearest_planar_dt_s),
                0.0,
                e.thresholds.theta_time_s.max(1.0),
                HIST_BINS,
            ),
        ),
    ]
}

pub fn report_text(e: &Evaluation) -> String {
    let m = &e.matrix;
    let [tp, tn, fp, fnr] = m.rates();
    let mut s = String::new();
    let _ = writeln!(s, "mode {}  queries {}", e.mode, m.total());
    let _ = writeln!(s, "TP {:>8} ({:6.2}%)", m.tp, tp * 100.0);
    let _ = writeln!(s, "TN {:>8} ({:6.2}%)", m.tn, tn * 100.0);
    let _ = writeln!(s, "FP {:>8} ({:6.2}%)", m.fp, fp * 100.0);
    let _ = writeln!(s, "FN {:>8} ({:6.2}%)", m.fn_, fnr * 100.0);
    match e.mode {
        Mode::NfpStPsi => {
            let _ = writeln!(
                s,
                "fp beyond mixed bound {:.3}: {}",
                e.thresholds.nfp_mixed_bound(),
                e.nfp_fp_violations()
            );
        }
        Mode::StPsi => {
            let _ = writeln!(s, "fp outside planar band: {}", e.st_fp_violations());
        }
        Mode::StPsiDoe => {}
    }
    for (name, lo, hi, counts) in histograms(e) {
        if counts.iter().all(|&c| c == 0) {
            continue;
        }
        let _ = writeln!(s, "{name}:");
        let w = (hi - lo) / counts.len() as f64;
        for (i, c) in counts.iter().enumerate() {
            let _ = writeln!(
                s,
                "  [{:10.3}, {:10.3}) {c}",
                lo + w * i as f64,
                lo + w * (i + 1) as f64
            );
        }
    }
    s
}

/// Confusion matrix as a one-row CSV.
pub fn write_matrix_csv<W: Write>(e: &Evaluation, w: W) -> Result<(), OracleError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "mode", "tp", "tn", "fp", "fn", "total", "tp_rate", "tn_rate", "fp_rate", "fn_rate",
    ])?;
    let m = &e.matrix;
    let mut row = vec![
        e.mode.to_string(),
        m.tp.to_string(),
        m.tn.to_string(),
        m.fp.to_string(),
        m.fn_.to_string(),
        m.total().to_string(),
    ];
    row.extend(m.rates().iter().map(|r| format!("{r:.6}")));
    out.write_record(&row)?;
    out.flush()?;
    Ok(())
}

/// One row per false case.
pub fn write_false_cases_csv<W: Write>(e: &Evaluation, w: W) -> Result<(), OracleError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "client",
        "kind",
        "nearest_planar",
        "nearest_planar_dt_s",
        "nearest_mixed",
    ])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |d| format!("{d:.6}"));
    for c in &e.false_cases {
        let kind = match c.kind {
            FalseKind::FalsePositive => "fp",
            FalseKind::FalseNegative => "fn",
        };
        out.write_record([
            c.client.to_string(),
            kind.to_string(),
            opt(c.nearest_planar),
            opt(c.nearest_planar_dt_s),
            opt(c.nearest_mixed),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Distance histograms as `metric,bin_lo,bin_hi,count` rows.
pub fn write_histograms_csv<W: Write>(e: &Evaluation, w: W) -> Result<(), OracleError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["metric", "bin_lo", "bin_hi", "count"])?;
    for (name, lo, hi, counts) in histograms(e) {
        let width = (hi - lo) / counts.len() as f64;
        for (i, c) in counts.iter().enumerate() {
            out.write_record([
                name.to_string(),
                format!("{:.6}", lo + width * i as f64),
                format!("{:.6}", lo + width * (i + 1) as f64),
                c.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

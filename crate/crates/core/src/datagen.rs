// SPDX-License-Identifier: Apache-2.0

//! Seeded synthetic trajectories and the dataset CSV format.
//!
//! Users dwell around one of a fixed set of hotspots and occasionally travel
//! to another. Hotspots are shared across users, which is what produces
//! contacts and shared hash prefixes.
//!
//! CSV schema: `user_id,unix_epoch_s,latitude,longitude`, header row, LF.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::encoding::TrajectoryPoint;

pub const CSV_HEADER: [&str; 4] = ["user_id", "unix_epoch_s", "latitude", "longitude"];

const METERS_PER_DEGREE: f64 = 111_320.0;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lng: f64,
    pub max_lng: f64,
}

impl BoundingBox {
    /// Lower Manhattan, roughly 4 km × 3 km.
    pub const MANHATTAN: BoundingBox = BoundingBox {
        min_lat: 40.700,
        max_lat: 40.736,
        min_lng: -74.020,
        max_lng: -73.985,
    };

    pub fn contains(&self, lat: f64, lng: f64) -> bool {
        (self.min_lat..=self.max_lat).contains(&lat) && (self.min_lng..=self.max_lng).contains(&lng)
    }

    fn clamp(&self, lat: f64, lng: f64) -> (f64, f64) {
        (
            lat.clamp(self.min_lat, self.max_lat),
            lng.clamp(self.min_lng, self.max_lng),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n_users: usize,
    pub duration_s: i64,
    pub sampling_interval_s: i64,
    pub t_start: i64,
    pub bbox: BoundingBox,
    pub n_hotspots: usize,
    /// Per-sample probability of staying at the current hotspot.
    pub stickiness: f64,
    /// Radius of the jitter around a hotspot while dwelling, meters.
    pub dwell_radius_m: f64,
    pub min_speed_mps: f64,
    pub max_speed_mps: f64,
    /// Offset added to user ids, so disjoint populations can share a seed.
    pub first_user_id: u64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_users: 100,
            duration_s: 14 * 86_400,
            sampling_interval_s: 60,
            t_start: 1_601_856_000,
            bbox: BoundingBox::MANHATTAN,
            n_hotspots: 70,
            stickiness: 0.98,
            dwell_radius_m: 20.0,
            min_speed_mps: 0.8,
            max_speed_mps: 1.6,
            first_user_id: 0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let b = &self.bbox;
        let bad = |m: &str| Err(DatagenError::InvalidConfig(m.to_string()));
        if !(b.min_lat < b.max_lat && b.min_lng < b.max_lng) {
            return bad("bounding box is empty");
        }
        if b.min_lat < -90.0 || b.max_lat > 90.0 || b.min_lng < -180.0 || b.max_lng > 180.0 {
            return bad("bounding box outside valid coordinates");
        }
        if self.sampling_interval_s <= 0 {
            return bad("sampling interval must be positive");
        }
        if self.duration_s < 0 {
            return bad("duration must be non-negative");
        }
        if self.n_hotspots == 0 {
            return bad("need at least one hotspot");
        }
        if !(0.0..=1.0).contains(&self.stickiness) {
            return bad("stickiness must be a probability");
        }
        if !(0.0 < self.min_speed_mps && self.min_speed_mps <= self.max_speed_mps) {
            return bad("speed bounds must satisfy 0 < min <= max");
        }
        if self.dwell_radius_m < 0.0 {
            return bad("dwell radius must be non-negative");
        }
        Ok(())
    }

    pub fn points_per_user(&self) -> usize {
        (self.duration_s / self.sampling_interval_s) as usize
    }

    /// Last sample time of any user.
    pub fn t_last(&self) -> i64 {
        self.t_start + (self.points_per_user() as i64 - 1).max(0) * self.sampling_interval_s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserTrajectory {
    pub user_id: u64,
    pub points: Vec<TrajectoryPoint>,
}

impl AsRef<[TrajectoryPoint]> for UserTrajectory {
    fn as_ref(&self) -> &[TrajectoryPoint] {
        &self.points
    }
}

pub type Dataset = Vec<UserTrajectory>;

/// Hotspot centers shared by every user of a config.
pub fn hotspots(cfg: &GeneratorConfig) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x486f_7473_706f_7473);
    let b = &cfg.bbox;
    (0..cfg.n_hotspots)
        .map(|_| {
            (
                rng.random_range(b.min_lat..=b.max_lat),
                rng.random_range(b.min_lng..=b.max_lng),
            )
        })
        .collect()
}

fn user_seed(seed: u64, user_id: u64) -> u64 {
    seed ^ (user_id.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn offset_meters(lat: f64, lng: f64, north_m: f64, east_m: f64) -> (f64, f64) {
    let dlat = north_m / METERS_PER_DEGREE;
    let dlng = east_m / (METERS_PER_DEGREE * lat.to_radians().cos().max(1e-6));
    (lat + dlat, lng + dlng)
}

fn distance_m(a: (f64, f64), b: (f64, f64)) -> (f64, f64, f64) {
    let north = (b.0 - a.0) * METERS_PER_DEGREE;
    let east = (b.1 - a.1) * METERS_PER_DEGREE * a.0.to_radians().cos();
    (north, east, north.hypot(east))
}

/// Trajectory of a single user; deterministic in `(cfg.seed, user_id)`.
pub fn generate_user(cfg: &GeneratorConfig, spots: &[(f64, f64)], user_id: u64) -> UserTrajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(user_seed(cfg.seed, user_id));
    let n = cfg.points_per_user();
    let mut points = Vec::with_capacity(n);
    let mut home = rng.random_range(0..spots.len());
    let mut target: Option<usize> = None;
    let jitter = |rng: &mut ChaCha8Rng, center: (f64, f64)| {
        let r = cfg.dwell_radius_m * rng.random::<f64>().sqrt();
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        offset_meters(center.0, center.1, r * a.sin(), r * a.cos())
    };
    let mut pos = jitter(&mut rng, spots[home]);
    for k in 0..n {
        let t = cfg.t_start + k as i64 * cfg.sampling_interval_s;
        let (lat, lng) = cfg.bbox.clamp(pos.0, pos.1);
        points.push(TrajectoryPoint::new(t, lat, lng));

        match target {
            None => {
                if rng.random::<f64>() >= cfg.stickiness && spots.len() > 1 {
                    let mut next = rng.random_range(0..spots.len() - 1);
                    if next >= home {
                        next += 1;
                    }
                    target = Some(next);
                } else if rng.random_bool(0.3) {
                    // small move inside the dwell area
                    pos = jitter(&mut rng, spots[home]);
                }
            }
            Some(dest) => {
                let speed = rng.random_range(cfg.min_speed_mps..=cfg.max_speed_mps);
                let step = speed * cfg.sampling_interval_s as f64;
                let (north, east, dist) = distance_m(pos, spots[dest]);
                if dist <= step {
                    pos = jitter(&mut rng, spots[dest]);
                    home = dest;
                    target = None;
                } else {
                    let f = step / dist;
                    pos = offset_meters(pos.0, pos.1, north * f, east * f);
                }
            }
        }
    }
    UserTrajectory { user_id, points }
}

pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset, DatagenError> {
    cfg.validate()?;
    let spots = hotspots(cfg);
    Ok((0..cfg.n_users as u64)
        .into_par_iter()
        .map(|i| generate_user(cfg, &spots, cfg.first_user_id + i))
        .collect())
}

pub fn write_csv_to<W: Write>(dataset: &[UserTrajectory], writer: W) -> Result<(), DatagenError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for user in dataset {
        let id = user.user_id.to_string();
        for p in &user.points {
            w.write_record([
                id.as_str(),
                &p.t.to_string(),
                &format!("{:.7}", p.lat),
                &format!("{:.7}", p.lng),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(dataset: &[UserTrajectory], path: impl AsRef<Path>) -> Result<(), DatagenError> {
    write_csv_to(dataset, BufWriter::new(File::create(path)?))
}

/// Reads a dataset; users appear in order of first occurrence, points in
/// file order.
pub fn read_csv_from<R: Read>(reader: R) -> Result<Dataset, DatagenError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut users: Dataset = Vec::new();
    let mut index = std::collections::HashMap::new();
    let mut record = csv::StringRecord::new();
    let mut first = true;
    while r.read_record(&mut record)? {
        let line = record.position().map_or(0, |p| p.line());
        if first {
            first = false;
            if record.iter().map(str::trim).eq(CSV_HEADER) {
                continue;
            }
        }
        let malformed = |message: String| DatagenError::Malformed { line, message };
        if record.len() != 4 {
            return Err(malformed(format!(
                "expected 4 fields, found {}",
                record.len()
            )));
        }
        let field = |i: usize| record[i].trim();
        let user_id: u64 = field(0)
            .parse()
            .map_err(|_| malformed(format!("bad user_id {:?}", field(0))))?;
        let t: i64 = field(1)
            .parse()
            .map_err(|_| malformed(format!("bad timestamp {:?}", field(1))))?;
        let lat: f64 = field(2)
            .parse()
            .map_err(|_| malformed(format!("bad latitude {:?}", field(2))))?;
        let lng: f64 = field(3)
            .parse()
            .map_err(|_| malformed(format!("bad longitude {:?}", field(3))))?;
        if !lat.is_finite() || !lng.is_finite() {
            return Err(malformed("non-finite coordinate".to_string()));
        }
        let slot = *index.entry(user_id).or_insert_with(|| {
            users.push(UserTrajectory {
                user_id,
                points: Vec::new(),
            });
            users.len() - 1
        });
        users[slot].points.push(TrajectoryPoint::new(t, lat, lng));
    }
    Ok(users)
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Dataset, DatagenError> {
    read_csv_from(BufReader::new(File::open(path)?))
}

/// All points of a dataset, user by user.
pub fn flatten(dataset: &[UserTrajectory]) -> Vec<TrajectoryPoint> {
    dataset
        .iter()
        .flat_map(|u| u.points.iter().copied())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n_users: usize, duration_s: i64) -> GeneratorConfig {
        GeneratorConfig {
            n_users,
            duration_s,
            seed: 42,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn point_counts_and_stride() {
        let d = generate(&small(1, 120)).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].points.len(), 2);
        let cfg = small(5, 3 * 3600);
        for u in generate(&cfg).unwrap() {
            assert_eq!(u.points.len(), 180);
            for w in u.points.windows(2) {
                assert_eq!(w[1].t - w[0].t, 60);
            }
            assert_eq!(u.points[0].t, cfg.t_start);
        }
    }

    #[test]
    fn points_stay_inside_the_box() {
        let cfg = GeneratorConfig {
            stickiness: 0.5,
            ..small(20, 86_400)
        };
        for u in generate(&cfg).unwrap() {
            for p in &u.points {
                assert!(cfg.bbox.contains(p.lat, p.lng));
            }
        }
    }

    #[test]
    fn same_seed_same_csv() {
        let cfg = small(4, 7200);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_csv_to(&generate(&cfg).unwrap(), &mut a).unwrap();
        write_csv_to(&generate(&cfg).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
        let mut c = Vec::new();
        write_csv_to(
            &generate(&GeneratorConfig { seed: 43, ..cfg }).unwrap(),
            &mut c,
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn csv_round_trip() {
        let d = generate(&small(3, 3600)).unwrap();
        let mut buf = Vec::new();
        write_csv_to(&d, &mut buf).unwrap();
        assert!(buf.starts_with(b"user_id,unix_epoch_s,latitude,longitude\n"));
        let back = read_csv_from(buf.as_slice()).unwrap();
        assert_eq!(back.len(), d.len());
        for (u, v) in d.iter().zip(&back) {
            assert_eq!(u.user_id, v.user_id);
            for (p, q) in u.points.iter().zip(&v.points) {
                assert_eq!(p.t, q.t);
                assert!((p.lat - q.lat).abs() <= 5e-8);
                assert!((p.lng - q.lng).abs() <= 5e-8);
            }
        }
        let mut again = Vec::new();
        write_csv_to(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn malformed_rows_report_line() {
        let text = "user_id,unix_epoch_s,latitude,longitude\n1,100,40.0,-74.0\n1,160,40.0\n";
        match read_csv_from(text.as_bytes()) {
            Err(DatagenError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let text = "user_id,unix_epoch_s,latitude,longitude\n1,abc,40.0,-74.0\n";
        assert!(matches!(
            read_csv_from(text.as_bytes()),
            Err(DatagenError::Malformed { line: 2, .. })
        ));
    }

    #[test]
    fn empty_input_is_empty_dataset() {
        assert!(read_csv_from("".as_bytes()).unwrap().is_empty());
        assert!(
            read_csv_from("user_id,unix_epoch_s,latitude,longitude\n".as_bytes())
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = small(1, 60);
        for cfg in [
            GeneratorConfig {
                sampling_interval_s: 0,
                ..base.clone()
            },
            GeneratorConfig {
                n_hotspots: 0,
                ..base.clone()
            },
            GeneratorConfig {
                stickiness: 1.5,
                ..base.clone()
            },
            GeneratorConfig {
                bbox: BoundingBox {
                    min_lat: 10.0,
                    max_lat: 5.0,
                    min_lng: 0.0,
                    max_lng: 1.0,
                },
                ..base.clone()
            },
        ] {
            assert!(matches!(
                generate(&cfg),
                Err(DatagenError::InvalidConfig(_))
            ));
        }
    }
}

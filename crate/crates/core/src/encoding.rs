// SPDX-License-Identifier: Apache-2.0

//! TrajectoryHash: spatiotemporal cell encoding.
//!
//! A trajectory point `(t, lat, lng)` is mapped onto a cell of a
//! `2^theta_geo x 2^theta_geo` Web-Mercator tile grid and a time slot of
//! `2^(32 - theta_time)` seconds inside a fixed tracing period. The three
//! coordinates are written as bit strings, mixed into one bit string, and
//! packed big-endian into a fixed number of bytes with zero padding in the
//! high-order bits. Byte order on the packed values equals integer order on
//! the mixed bit string, which keeps nearby cells sharing prefixes.

use std::f64::consts::PI;
use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Latitude bound of the square Web-Mercator map, `360·atan(e^π)/π − 90`.
pub const MAX_LATITUDE: f64 = 85.051_128_779_806_59;

/// Upper bound on the packed hash width: `2·31 + 32` bits.
pub const MAX_HASH_WIDTH: usize = 12;

/// Bit length of the UNIX epoch the time shift is measured against.
const EPOCH_BITS: u32 = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodingError {
    #[error("non-finite coordinate (lat={lat}, lng={lng})")]
    NonFiniteCoordinate { lat: f64, lng: f64 },
    #[error("longitude {0} outside [-180, 180]")]
    LongitudeOutOfRange(f64),
    #[error("theta_geo {0} outside [1, 31]")]
    InvalidThetaGeo(u8),
    #[error("theta_time {0} outside [1, 32]")]
    InvalidThetaTime(u8),
    #[error("empty tracing period: t_start={t_start} must be < t_end={t_end}")]
    EmptyPeriod { t_start: i64, t_end: i64 },
    #[error("period of {period_s} s leaves no time bits at theta_time={theta_time}")]
    NoTimeBits { period_s: i64, theta_time: u8 },
    #[error("timestamp {t} outside the tracing period [{t_start}, {t_end}]")]
    TimeOutOfPeriod { t: i64, t_start: i64, t_end: i64 },
    #[error("hash is {actual} bytes wide, parameters require {expected}")]
    WidthMismatch { expected: usize, actual: usize },
    #[error("hash has nonzero padding bits")]
    NonzeroPadding,
    #[error("cell ({x}, {y}, {tc}) outside the grid")]
    CellOutOfRange { x: u32, y: u32, tc: u64 },
    #[error("unknown mix mode {0:?}")]
    UnknownMixMode(String),
}

/// One `(time, latitude, longitude)` sample of a track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    /// Seconds since the UNIX epoch.
    pub t: i64,
    pub lat: f64,
    pub lng: f64,
}

impl TrajectoryPoint {
    pub fn new(t: i64, lat: f64, lng: f64) -> Self {
        Self { t, lat, lng }
    }
}

/// How the three coordinate bit strings are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum MixMode {
    /// Round-robin one bit at a time in `(x, y, t)` order, skipping streams
    /// that have run out.
    #[default]
    Interleave,
    /// Plain concatenation `x ‖ y ‖ t`.
    Sequential,
}

impl MixMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MixMode::Interleave => "interleave",
            MixMode::Sequential => "sequential",
        }
    }
}

impl fmt::Display for MixMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MixMode {
    type Err = EncodingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "interleave" | "mix" => Ok(MixMode::Interleave),
            "sequential" | "seq" => Ok(MixMode::Sequential),
            other => Err(EncodingError::UnknownMixMode(other.to_string())),
        }
    }
}

/// A short MSB-first bit string of at most 128 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Bits {
    value: u128,
    len: u32,
}

impl Bits {
    /// Keeps the low `len` bits of `value`.
    pub fn new(value: u128, len: u32) -> Self {
        assert!(len <= 128, "bit string longer than 128 bits");
        let value = if len == 128 {
            value
        } else {
            value & ((1u128 << len) - 1)
        };
        Self { value, len }
    }

    pub fn len(&self) -> u32 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn value(&self) -> u128 {
        self.value
    }

    /// Bit at MSB-first position `i`.
    pub fn get(&self, i: u32) -> bool {
        debug_assert!(i < self.len);
        (self.value >> (self.len - 1 - i)) & 1 == 1
    }

    /// Parses a string of `0`/`1` characters.
    pub fn parse(s: &str) -> Option<Self> {
        if s.len() > 128 {
            return None;
        }
        let mut value = 0u128;
        for c in s.chars() {
            value = (value << 1)
                | match c {
                    '0' => 0,
                    '1' => 1,
                    _ => return None,
                };
        }
        Some(Self {
            value,
            len: s.len() as u32,
        })
    }
}

impl fmt::Display for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len {
            f.write_str(if self.get(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Fixed-width byte string naming one spatiotemporal cell.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct TrajectoryHashValue {
    buf: [u8; MAX_HASH_WIDTH],
    len: u8,
}

impl TrajectoryHashValue {
    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        if bytes.len() > MAX_HASH_WIDTH {
            return None;
        }
        let mut buf = [0u8; MAX_HASH_WIDTH];
        buf[..bytes.len()].copy_from_slice(bytes);
        Some(Self {
            buf,
            len: bytes.len() as u8,
        })
    }

    /// Packs the low `width` bytes of `value` big-endian.
    pub fn from_u128(value: u128, width: usize) -> Self {
        assert!(width <= MAX_HASH_WIDTH);
        let be = value.to_be_bytes();
        let mut buf = [0u8; MAX_HASH_WIDTH];
        buf[..width].copy_from_slice(&be[16 - width..]);
        Self {
            buf,
            len: width as u8,
        }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.buf[..self.len as usize]
    }

    pub fn width(&self) -> usize {
        self.len as usize
    }

    pub fn to_u128(&self) -> u128 {
        self.as_bytes()
            .iter()
            .fold(0u128, |acc, &b| (acc << 8) | b as u128)
    }
}

impl PartialOrd for TrajectoryHashValue {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TrajectoryHashValue {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.as_bytes().cmp(other.as_bytes())
    }
}

impl fmt::Debug for TrajectoryHashValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TrajectoryHashValue(")?;
        for b in self.as_bytes() {
            write!(f, "{b:02x}")?;
        }
        write!(f, ")")
    }
}

impl AsRef<[u8]> for TrajectoryHashValue {
    fn as_ref(&self) -> &[u8] {
        self.as_bytes()
    }
}

/// Integer cell coordinates: tile column, tile row and time slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellCoords {
    pub x: u32,
    pub y: u32,
    pub tc: u64,
}

/// Grid and hash layout parameters shared by clients and server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EncodingParams {
    theta_geo: u8,
    theta_time: u8,
    t_start: i64,
    t_end: i64,
    mix_mode: MixMode,
}

impl EncodingParams {
    pub fn new(
        theta_geo: u8,
        theta_time: u8,
        t_start: i64,
        t_end: i64,
        mix_mode: MixMode,
    ) -> Result<Self, EncodingError> {
        if !(1..=31).contains(&theta_geo) {
            return Err(EncodingError::InvalidThetaGeo(theta_geo));
        }
        if !(1..=32).contains(&theta_time) {
            return Err(EncodingError::InvalidThetaTime(theta_time));
        }
        if t_start >= t_end {
            return Err(EncodingError::EmptyPeriod { t_start, t_end });
        }
        let params = Self {
            theta_geo,
            theta_time,
            t_start,
            t_end,
            mix_mode,
        };
        if params.time_bits_signed() < 1 {
            return Err(EncodingError::NoTimeBits {
                period_s: t_end - t_start,
                theta_time,
            });
        }
        Ok(params)
    }

    pub fn theta_geo(&self) -> u8 {
        self.theta_geo
    }

    pub fn theta_time(&self) -> u8 {
        self.theta_time
    }

    pub fn t_start(&self) -> i64 {
        self.t_start
    }

    pub fn t_end(&self) -> i64 {
        self.t_end
    }

    pub fn mix_mode(&self) -> MixMode {
        self.mix_mode
    }

    /// Bit length of `t_end − t_start`.
    pub fn period_bits(&self) -> u32 {
        bit_length((self.t_end - self.t_start) as u64)
    }

    /// Right shift applied to the time offset, `32 − theta_time`.
    pub fn time_shift(&self) -> u32 {
        EPOCH_BITS - self.theta_time as u32
    }

    fn time_bits_signed(&self) -> i64 {
        self.period_bits() as i64 - self.time_shift() as i64
    }

    pub fn time_bits(&self) -> u32 {
        self.time_bits_signed() as u32
    }

    pub fn total_bits(&self) -> u32 {
        2 * self.theta_geo as u32 + self.time_bits()
    }

    pub fn hash_width(&self) -> usize {
        self.total_bits().div_ceil(8) as usize
    }

    /// Tiles per axis.
    pub fn grid_size(&self) -> u64 {
        1u64 << self.theta_geo
    }

    /// Number of addressable time slots, `2^time_bits`.
    pub fn time_slots(&self) -> u64 {
        1u64 << self.time_bits()
    }

    /// Seconds covered by one time slot.
    pub fn time_cell_seconds(&self) -> i64 {
        1i64 << self.time_shift()
    }

    pub fn contains_time(&self, t: i64) -> bool {
        (self.t_start..=self.t_end).contains(&t)
    }

    /// Stable 64-bit digest of the parameters, shared with clients in advance.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"pct-params-v1");
        h.update([self.theta_geo, self.theta_time]);
        h.update(self.t_start.to_le_bytes());
        h.update(self.t_end.to_le_bytes());
        h.update([match self.mix_mode {
            MixMode::Interleave => 0u8,
            MixMode::Sequential => 1u8,
        }]);
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Number of significant bits in `v` (0 for 0).
pub fn bit_length(v: u64) -> u32 {
    64 - v.leading_zeros()
}

fn clip_latitude(lat: f64) -> f64 {
    lat.clamp(-MAX_LATITUDE, MAX_LATITUDE)
}

/// Continuous Web-Mercator tile position at `zoom`; one tile has side 1.
///
/// Latitude is clipped to the square map first. Used both for cell assignment
/// and, by the exact-contact oracle, as the distance space.
pub fn tile_position(lat: f64, lng: f64, zoom: u8) -> Result<(f64, f64), EncodingError> {
    if !lat.is_finite() || !lng.is_finite() {
        return Err(EncodingError::NonFiniteCoordinate { lat, lng });
    }
    if !(-180.0..=180.0).contains(&lng) {
        return Err(EncodingError::LongitudeOutOfRange(lng));
    }
    let lat = clip_latitude(lat);
    let px = (lng + 180.0) / 360.0;
    let sin_lat = (lat * PI / 180.0).sin();
    let py = 0.5 - ((1.0 + sin_lat) / (1.0 - sin_lat)).ln() / (4.0 * PI);
    let map_size = (1u64 << zoom) as f64;
    Ok((px * map_size, py * map_size))
}

fn tile_index(pos: f64, zoom: u8) -> u32 {
    let max = (1u64 << zoom) - 1;
    (pos.floor().max(0.0) as u64).min(max) as u32
}

/// Tile column/row bit strings of a coordinate, `theta_geo` bits each.
pub fn quadkey_encode(lat: f64, lng: f64, theta_geo: u8) -> Result<(Bits, Bits), EncodingError> {
    if !(1..=31).contains(&theta_geo) {
        return Err(EncodingError::InvalidThetaGeo(theta_geo));
    }
    let (px, py) = tile_position(lat, lng, theta_geo)?;
    let x = tile_index(px, theta_geo);
    let y = tile_index(py, theta_geo);
    Ok((
        Bits::new(x as u128, theta_geo as u32),
        Bits::new(y as u128, theta_geo as u32),
    ))
}

/// Time slot of `t` within `[t_start, t_end]` as a zero-padded bit string.
pub fn periodic_encode(
    t: i64,
    t_start: i64,
    t_end: i64,
    theta_time: u8,
) -> Result<Bits, EncodingError> {
    if !(1..=32).contains(&theta_time) {
        return Err(EncodingError::InvalidThetaTime(theta_time));
    }
    if t_start >= t_end {
        return Err(EncodingError::EmptyPeriod { t_start, t_end });
    }
    let max_length = bit_length((t_end - t_start) as u64) as i64;
    let shift = (EPOCH_BITS - theta_time as u32) as i64;
    if max_length - shift < 1 {
        return Err(EncodingError::NoTimeBits {
            period_s: t_end - t_start,
            theta_time,
        });
    }
    if t < t_start || t > t_end {
        return Err(EncodingError::TimeOutOfPeriod { t, t_start, t_end });
    }
    let slot = ((t - t_start) as u64) >> shift;
    Ok(Bits::new(slot as u128, (max_length - shift) as u32))
}

/// Merges the three coordinate bit strings according to `mode`.
pub fn bit_mix(x: Bits, y: Bits, t: Bits, mode: MixMode) -> Bits {
    let total = x.len() + y.len() + t.len();
    assert!(total <= 128, "mixed bit string longer than 128 bits");
    match mode {
        MixMode::Sequential => {
            let value = (((x.value() << y.len()) | y.value()) << t.len()) | t.value();
            Bits::new(value, total)
        }
        MixMode::Interleave => {
            let streams = [x, y, t];
            let mut cursor = [0u32; 3];
            let mut value = 0u128;
            let mut emitted = 0;
            while emitted < total {
                for (s, bits) in streams.iter().enumerate() {
                    if cursor[s] < bits.len() {
                        value = (value << 1) | bits.get(cursor[s]) as u128;
                        cursor[s] += 1;
                        emitted += 1;
                    }
                }
            }
            Bits::new(value, total)
        }
    }
}

/// Left-pads `bits` with zeros to a byte boundary and packs it big-endian.
pub fn byte_encode(bits: Bits) -> TrajectoryHashValue {
    let width = bits.len().div_ceil(8) as usize;
    TrajectoryHashValue::from_u128(bits.value(), width)
}

/// Precomputed bit positions of each axis inside the mixed string.
///
/// `trajectory_hash` rebuilds this per call; hot paths keep an [`Encoder`].
#[derive(Debug, Clone)]
pub struct Encoder {
    params: EncodingParams,
    // mask of the output bit receiving MSB-first bit `j` of each axis
    x_masks: Vec<u128>,
    y_masks: Vec<u128>,
    t_masks: Vec<u128>,
}

impl Encoder {
    pub fn new(params: EncodingParams) -> Self {
        let g = params.theta_geo as u32;
        let tb = params.time_bits();
        let total = params.total_bits();
        let lens = [g, g, tb];
        let mut masks: [Vec<u128>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        let mut pos = 0u32;
        match params.mix_mode {
            MixMode::Sequential => {
                for (axis, &len) in lens.iter().enumerate() {
                    for _ in 0..len {
                        masks[axis].push(1u128 << (total - 1 - pos));
                        pos += 1;
                    }
                }
            }
            MixMode::Interleave => {
                while pos < total {
                    for (axis, &len) in lens.iter().enumerate() {
                        if (masks[axis].len() as u32) < len {
                            masks[axis].push(1u128 << (total - 1 - pos));
                            pos += 1;
                        }
                    }
                }
            }
        }
        let [x_masks, y_masks, t_masks] = masks;
        Self {
            params,
            x_masks,
            y_masks,
            t_masks,
        }
    }

    pub fn params(&self) -> &EncodingParams {
        &self.params
    }

    /// Cell containing `point`.
    pub fn cell_of(&self, point: &TrajectoryPoint) -> Result<CellCoords, EncodingError> {
        let p = &self.params;
        let (px, py) = tile_position(point.lat, point.lng, p.theta_geo)?;
        if !p.contains_time(point.t) {
            return Err(EncodingError::TimeOutOfPeriod {
                t: point.t,
                t_start: p.t_start,
                t_end: p.t_end,
            });
        }
        Ok(CellCoords {
            x: tile_index(px, p.theta_geo),
            y: tile_index(py, p.theta_geo),
            tc: ((point.t - p.t_start) as u64) >> p.time_shift(),
        })
    }

    fn in_range(&self, cell: &CellCoords) -> bool {
        (cell.x as u64) < self.params.grid_size()
            && (cell.y as u64) < self.params.grid_size()
            && cell.tc < self.params.time_slots()
    }

    /// Packed mixed bit string of a cell, without range checks.
    fn pack(&self, cell: &CellCoords) -> u128 {
        fn scatter(v: u64, masks: &[u128]) -> u128 {
            let len = masks.len();
            masks
                .iter()
                .enumerate()
                .filter(|(j, _)| (v >> (len - 1 - j)) & 1 == 1)
                .fold(0u128, |acc, (_, m)| acc | m)
        }
        scatter(cell.x as u64, &self.x_masks)
            | scatter(cell.y as u64, &self.y_masks)
            | scatter(cell.tc, &self.t_masks)
    }

    pub fn encode_cell(&self, cell: &CellCoords) -> Result<TrajectoryHashValue, EncodingError> {
        if !self.in_range(cell) {
            return Err(EncodingError::CellOutOfRange {
                x: cell.x,
                y: cell.y,
                tc: cell.tc,
            });
        }
        Ok(TrajectoryHashValue::from_u128(
            self.pack(cell),
            self.params.hash_width(),
        ))
    }

    pub fn hash(&self, point: &TrajectoryPoint) -> Result<TrajectoryHashValue, EncodingError> {
        let cell = self.cell_of(point)?;
        Ok(TrajectoryHashValue::from_u128(
            self.pack(&cell),
            self.params.hash_width(),
        ))
    }

    pub fn decode_cell(&self, hash: &TrajectoryHashValue) -> Result<CellCoords, EncodingError> {
        let width = self.params.hash_width();
        if hash.width() != width {
            return Err(EncodingError::WidthMismatch {
                expected: width,
                actual: hash.width(),
            });
        }
        let value = hash.to_u128();
        let total = self.params.total_bits();
        if total < 128 && value >> total != 0 {
            return Err(EncodingError::NonzeroPadding);
        }
        fn gather(value: u128, masks: &[u128]) -> u64 {
            masks
                .iter()
                .fold(0u64, |acc, m| (acc << 1) | (value & m != 0) as u64)
        }
        Ok(CellCoords {
            x: gather(value, &self.x_masks) as u32,
            y: gather(value, &self.y_masks) as u32,
            tc: gather(value, &self.t_masks),
        })
    }

    /// Hashes of the up to 26 cells at Chebyshev distance 1 from `cell`.
    pub fn neighbors_of_cell(&self, cell: &CellCoords) -> Vec<TrajectoryHashValue> {
        let mut out = Vec::with_capacity(26);
        self.for_each_neighbor(cell, |h| out.push(h));
        out
    }

    /// Calls `f` with each in-range neighbor hash of `cell`, center excluded.
    pub fn for_each_neighbor(&self, cell: &CellCoords, mut f: impl FnMut(TrajectoryHashValue)) {
        let grid = self.params.grid_size() as i64;
        let slots = self.params.time_slots() as i64;
        let width = self.params.hash_width();
        for dx in -1i64..=1 {
            let x = cell.x as i64 + dx;
            if x < 0 || x >= grid {
                continue;
            }
            for dy in -1i64..=1 {
                let y = cell.y as i64 + dy;
                if y < 0 || y >= grid {
                    continue;
                }
                for dt in -1i64..=1 {
                    let tc = cell.tc as i64 + dt;
                    if tc < 0 || tc >= slots || (dx == 0 && dy == 0 && dt == 0) {
                        continue;
                    }
                    let c = CellCoords {
                        x: x as u32,
                        y: y as u32,
                        tc: tc as u64,
                    };
                    f(TrajectoryHashValue::from_u128(self.pack(&c), width));
                }
            }
        }
    }

    pub fn neighbor_hashes(
        &self,
        hash: &TrajectoryHashValue,
    ) -> Result<Vec<TrajectoryHashValue>, EncodingError> {
        let cell = self.decode_cell(hash)?;
        Ok(self.neighbors_of_cell(&cell))
    }
}

/// Encodes one point into its cell hash.
pub fn trajectory_hash(
    point: &TrajectoryPoint,
    params: &EncodingParams,
) -> Result<TrajectoryHashValue, EncodingError> {
    let (x, y) = quadkey_encode(point.lat, point.lng, params.theta_geo)?;
    let t = periodic_encode(point.t, params.t_start, params.t_end, params.theta_time)?;
    Ok(byte_encode(bit_mix(x, y, t, params.mix_mode)))
}

pub fn decode_cell(
    hash: &TrajectoryHashValue,
    params: &EncodingParams,
) -> Result<CellCoords, EncodingError> {
    Encoder::new(*params).decode_cell(hash)
}

pub fn neighbor_hashes(
    hash: &TrajectoryHashValue,
    params: &EncodingParams,
) -> Result<Vec<TrajectoryHashValue>, EncodingError> {
    Encoder::new(*params).neighbor_hashes(hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const DAY: i64 = 86_400;
    // 2020-10-05 00:00 .. 2020-10-19 00:00
    const T0: i64 = 1_601_856_000;
    const T1: i64 = 1_603_065_600;

    fn params(g: u8, t: u8, mode: MixMode) -> EncodingParams {
        EncodingParams::new(g, t, T0, T1, mode).unwrap()
    }

    #[test]
    fn max_latitude_matches_closed_form() {
        let closed = 360.0 * PI.exp().atan() / PI - 90.0;
        assert!((closed - MAX_LATITUDE).abs() < 1e-12);
    }

    #[test]
    fn quadkey_worked_example() {
        let (x, y) = quadkey_encode(30.4564223, 135.3214557, 16).unwrap();
        assert_eq!(x.to_string(), "1110000000111010");
        assert_eq!(y.to_string(), "0110100100111110");
    }

    #[test]
    fn quadkey_equator_at_antimeridian() {
        let (x, y) = quadkey_encode(0.0, -180.0, 1).unwrap();
        assert_eq!(x.to_string(), "0");
        assert_eq!(y.to_string(), "1");
    }

    // Standard slippy-map tile formula (tan/sec form), independent of the
    // sin/ln form used by the encoder.
    fn reference_tile(lat: f64, lng: f64, zoom: u8) -> (u64, u64) {
        let n = 2f64.powi(zoom as i32);
        let lat_rad = lat.to_radians();
        let x = ((lng + 180.0) / 360.0 * n).floor() as u64;
        let y = ((1.0 - (lat_rad.tan() + 1.0 / lat_rad.cos()).ln() / PI) / 2.0 * n).floor() as u64;
        (x, y)
    }

    #[test]
    fn quadkey_matches_reference_tiles() {
        let (x, y) = quadkey_encode(48.8583, 2.2945, 20).unwrap();
        let (rx, ry) = reference_tile(48.8583, 2.2945, 20);
        assert_eq!(x.value() as u64, rx);
        assert_eq!(y.value() as u64, ry);
        assert_eq!((rx, ry), (530_971, 360_732));
    }

    #[test]
    fn quadkey_rejects_bad_input() {
        assert!(matches!(
            quadkey_encode(f64::NAN, 0.0, 10),
            Err(EncodingError::NonFiniteCoordinate { .. })
        ));
        assert!(matches!(
            quadkey_encode(0.0, f64::INFINITY, 10),
            Err(EncodingError::NonFiniteCoordinate { .. })
        ));
        assert!(matches!(
            quadkey_encode(0.0, 180.5, 10),
            Err(EncodingError::LongitudeOutOfRange(_))
        ));
    }

    #[test]
    fn quadkey_clamps_upper_edges() {
        let (x, _) = quadkey_encode(0.0, 180.0, 8).unwrap();
        assert_eq!(x.value(), 255);
        let (_, y) = quadkey_encode(-90.0, 0.0, 8).unwrap();
        assert_eq!(y.value(), 255);
        let (_, y) = quadkey_encode(90.0, 0.0, 8).unwrap();
        assert_eq!(y.value(), 0);
    }

    #[test]
    fn periodic_worked_example() {
        let bits = periodic_encode(1_602_324_000, T0, T1, 24).unwrap();
        assert_eq!(bits.to_string(), "0011100100100");
    }

    #[test]
    fn periodic_edges() {
        let zero = periodic_encode(T0, T0, T1, 24).unwrap();
        assert_eq!(zero.value(), 0);
        assert_eq!(zero.len(), 13);
        let one = periodic_encode(T0 + (1 << 8), T0, T1, 24).unwrap();
        assert_eq!(one.value(), 1);
        let last = periodic_encode(T1, T0, T1, 24).unwrap();
        assert_eq!(last.value(), ((T1 - T0) >> 8) as u128);
    }

    #[test]
    fn periodic_rejects_out_of_period_and_empty_layout() {
        assert!(matches!(
            periodic_encode(T0 - 1, T0, T1, 24),
            Err(EncodingError::TimeOutOfPeriod { .. })
        ));
        assert!(matches!(
            periodic_encode(T1 + 1, T0, T1, 24),
            Err(EncodingError::TimeOutOfPeriod { .. })
        ));
        // 21-bit period, shift 31
        assert!(matches!(
            periodic_encode(T0, T0, T1, 1),
            Err(EncodingError::NoTimeBits { .. })
        ));
    }

    #[test]
    fn bit_mix_examples() {
        let b = |s| Bits::parse(s).unwrap();
        assert_eq!(
            bit_mix(b("10"), b("01"), b("11"), MixMode::Interleave).to_string(),
            "101011"
        );
        assert_eq!(
            bit_mix(b("10"), b("01"), b("11"), MixMode::Sequential).to_string(),
            "100111"
        );
        assert_eq!(
            bit_mix(b("1010"), b("0101"), b("1"), MixMode::Interleave).to_string(),
            "101011001"
        );
    }

    // Index-based interleave: output slot k takes the next unused bit of the
    // first stream (in x, y, t rotation) that still has bits.
    fn naive_interleave(streams: [&[bool]; 3]) -> Vec<bool> {
        let mut out = Vec::new();
        let mut round = 0usize;
        let longest = streams.iter().map(|s| s.len()).max().unwrap();
        while round < longest {
            for s in streams {
                if round < s.len() {
                    out.push(s[round]);
                }
            }
            round += 1;
        }
        out
    }

    fn to_bools(b: Bits) -> Vec<bool> {
        (0..b.len()).map(|i| b.get(i)).collect()
    }

    proptest! {
        #[test]
        fn interleave_matches_naive(x in any::<u64>(), y in any::<u64>(), t in any::<u64>(),
                                    lx in 0u32..=31, ly in 0u32..=31, lt in 0u32..=32) {
            let (bx, by, bt) = (Bits::new(x as u128, lx), Bits::new(y as u128, ly), Bits::new(t as u128, lt));
            let mixed = bit_mix(bx, by, bt, MixMode::Interleave);
            let expected = naive_interleave([&to_bools(bx), &to_bools(by), &to_bools(bt)]);
            prop_assert_eq!(to_bools(mixed), expected);
        }

        #[test]
        fn cell_round_trip(g in 1u8..=31, tt in 12u8..=32, seq in any::<bool>(),
                           rx in any::<u64>(), ry in any::<u64>(), rt in any::<u64>()) {
            let mode = if seq { MixMode::Sequential } else { MixMode::Interleave };
            let p = params(g, tt, mode);
            let enc = Encoder::new(p);
            let cell = CellCoords {
                x: (rx % p.grid_size()) as u32,
                y: (ry % p.grid_size()) as u32,
                tc: rt % p.time_slots(),
            };
            let h = enc.encode_cell(&cell).unwrap();
            prop_assert_eq!(h.width(), p.hash_width());
            prop_assert_eq!(enc.decode_cell(&h).unwrap(), cell);
        }

        #[test]
        fn point_hash_decodes_to_containing_cell(lat in -85.0f64..85.0, lng in -180.0f64..=180.0,
                                                 dt in 0i64..=(T1 - T0), g in 1u8..=31, tt in 12u8..=32) {
            let p = params(g, tt, MixMode::Interleave);
            let point = TrajectoryPoint::new(T0 + dt, lat, lng);
            let h = trajectory_hash(&point, &p).unwrap();
            let cell = decode_cell(&h, &p).unwrap();
            let (px, py) = tile_position(lat, lng, g).unwrap();
            prop_assert!(cell.x as f64 <= px && px < cell.x as f64 + 1.0 || cell.x as u64 == p.grid_size() - 1);
            prop_assert!(cell.y as f64 <= py && py < cell.y as f64 + 1.0 || cell.y as u64 == p.grid_size() - 1);
            let slot = p.time_cell_seconds();
            prop_assert!(T0 + cell.tc as i64 * slot <= point.t && point.t < T0 + (cell.tc as i64 + 1) * slot);
            prop_assert_eq!(Encoder::new(p).hash(&point).unwrap(), h);
        }

        #[test]
        fn periodic_is_monotone(a in 0i64..=(T1 - T0), b in 0i64..=(T1 - T0), tt in 12u8..=32) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let x = periodic_encode(T0 + lo, T0, T1, tt).unwrap();
            let y = periodic_encode(T0 + hi, T0, T1, tt).unwrap();
            prop_assert!(x.value() <= y.value());
        }
    }

    #[test]
    fn byte_encode_widths() {
        let h = byte_encode(Bits::new(u128::MAX, 59));
        assert_eq!(h.width(), 8);
        assert_eq!(h.as_bytes()[0], 0b0000_0111);
        assert_eq!(byte_encode(Bits::new(1, 52)).width(), 7);
        assert_eq!(
            byte_encode(Bits::parse("11111111").unwrap()).as_bytes(),
            &[0xFF]
        );
    }

    #[test]
    fn hash_width_law_for_fourteen_days() {
        let t1 = T0 + 14 * DAY;
        for (g, t, width) in [(21, 21, 7), (24, 22, 8), (25, 25, 8)] {
            let p = EncodingParams::new(g, t, T0, t1, MixMode::Interleave).unwrap();
            let expected =
                (2 * g as u32 + bit_length((t1 - T0) as u64) - (32 - t as u32)).div_ceil(8);
            assert_eq!(p.hash_width(), width);
            assert_eq!(p.hash_width(), expected as usize);
        }
        let p = EncodingParams::new(24, 22, T0, t1, MixMode::Interleave).unwrap();
        assert_eq!(p.total_bits(), 59);
        let p = EncodingParams::new(21, 21, T0, t1, MixMode::Interleave).unwrap();
        assert_eq!(p.total_bits(), 52);
    }

    #[test]
    fn worked_example_end_to_end() {
        let p = params(16, 24, MixMode::Interleave);
        let point = TrajectoryPoint::new(1_602_324_000, 30.4564223, 135.3214557);
        let h = trajectory_hash(&point, &p).unwrap();
        let x = Bits::parse("1110000000111010").unwrap();
        let y = Bits::parse("0110100100111110").unwrap();
        let t = Bits::parse("0011100100100").unwrap();
        let expected = bit_mix(x, y, t, MixMode::Interleave);
        assert_eq!(h.to_u128(), expected.value());
        assert_eq!(h.width(), 6);
        assert_eq!(Encoder::new(p).hash(&point).unwrap(), h);
    }

    #[test]
    fn params_validation() {
        assert!(matches!(
            EncodingParams::new(0, 20, T0, T1, MixMode::Interleave),
            Err(EncodingError::InvalidThetaGeo(0))
        ));
        assert!(matches!(
            EncodingParams::new(32, 20, T0, T1, MixMode::Interleave),
            Err(EncodingError::InvalidThetaGeo(32))
        ));
        assert!(matches!(
            EncodingParams::new(20, 33, T0, T1, MixMode::Interleave),
            Err(EncodingError::InvalidThetaTime(33))
        ));
        assert!(matches!(
            EncodingParams::new(20, 20, T1, T0, MixMode::Interleave),
            Err(EncodingError::EmptyPeriod { .. })
        ));
        assert!(matches!(
            EncodingParams::new(20, 8, T0, T1, MixMode::Interleave),
            Err(EncodingError::NoTimeBits { .. })
        ));
    }

    #[test]
    fn same_cell_points_share_hash() {
        let p = params(20, 20, MixMode::Interleave);
        let enc = Encoder::new(p);
        // Center of tile (582542, 495000) at zoom 20, ~38 m wide; 4096 s slots.
        let n = (1u64 << 20) as f64;
        let lng = (582_542.5 / n) * 360.0 - 180.0;
        let lat = (PI * (1.0 - 2.0 * 495_000.5 / n))
            .sinh()
            .atan()
            .to_degrees();
        let t = T0 + 24 * 4096 + 100;
        let a = TrajectoryPoint::new(t, lat, lng);
        // ~10 m north, 30 s later
        let b = TrajectoryPoint::new(t + 30, lat + 10.0 / 111_320.0, lng);
        let cell = enc.cell_of(&a).unwrap();
        assert_eq!(
            cell,
            CellCoords {
                x: 582_542,
                y: 495_000,
                tc: 24
            }
        );
        assert_eq!(enc.cell_of(&b).unwrap(), cell);
        assert_eq!(
            trajectory_hash(&a, &p).unwrap(),
            trajectory_hash(&b, &p).unwrap()
        );
    }

    #[test]
    fn adjacent_cells_differ() {
        let p = params(20, 20, MixMode::Interleave);
        let enc = Encoder::new(p);
        let a = enc
            .encode_cell(&CellCoords {
                x: 100,
                y: 7,
                tc: 3,
            })
            .unwrap();
        let b = enc
            .encode_cell(&CellCoords {
                x: 101,
                y: 7,
                tc: 3,
            })
            .unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn decode_rejects_bad_hashes() {
        let p = params(24, 22, MixMode::Interleave);
        let enc = Encoder::new(p);
        let short = TrajectoryHashValue::from_slice(&[0; 7]).unwrap();
        assert!(matches!(
            enc.decode_cell(&short),
            Err(EncodingError::WidthMismatch { .. })
        ));
        let padded = TrajectoryHashValue::from_slice(&[0x80, 0, 0, 0, 0, 0, 0, 0]).unwrap();
        assert!(matches!(
            enc.decode_cell(&padded),
            Err(EncodingError::NonzeroPadding)
        ));
        let zero = TrajectoryHashValue::from_slice(&[0; 8]).unwrap();
        assert_eq!(
            enc.decode_cell(&zero).unwrap(),
            CellCoords { x: 0, y: 0, tc: 0 }
        );
    }

    #[test]
    fn neighbor_counts_and_distances() {
        let p = params(10, 24, MixMode::Interleave);
        let enc = Encoder::new(p);
        let center = CellCoords { x: 5, y: 9, tc: 17 };
        let h = enc.encode_cell(&center).unwrap();
        let ns = neighbor_hashes(&h, &p).unwrap();
        assert_eq!(ns.len(), 26);
        let mut uniq = ns.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 26);
        for n in &ns {
            let c = enc.decode_cell(n).unwrap();
            let cheb = (c.x as i64 - 5)
                .abs()
                .max((c.y as i64 - 9).abs())
                .max((c.tc as i64 - 17).abs());
            assert_eq!(cheb, 1);
        }
        let corner = enc.encode_cell(&CellCoords { x: 0, y: 0, tc: 0 }).unwrap();
        assert_eq!(enc.neighbor_hashes(&corner).unwrap().len(), 7);
        let far = CellCoords {
            x: 1023,
            y: 1023,
            tc: p.time_slots() - 1,
        };
        assert_eq!(enc.neighbors_of_cell(&far).len(), 7);
    }

    #[test]
    fn injective_on_small_grids() {
        for mode in [MixMode::Interleave, MixMode::Sequential] {
            for g in 1..=6u8 {
                // 63 s period at theta_time 32 -> 6 time bits
                let p = EncodingParams::new(g, 32, 0, 63, mode).unwrap();
                assert_eq!(p.time_bits(), 6);
                let enc = Encoder::new(p);
                let mut seen = std::collections::HashSet::new();
                for x in 0..p.grid_size() as u32 {
                    for y in 0..p.grid_size() as u32 {
                        for tc in 0..p.time_slots() {
                            let h = enc.encode_cell(&CellCoords { x, y, tc }).unwrap();
                            assert!(seen.insert(h), "collision at {x},{y},{tc}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn byte_order_equals_integer_order() {
        let p = EncodingParams::new(5, 32, 0, 63, MixMode::Interleave).unwrap();
        let enc = Encoder::new(p);
        let mut hashes: Vec<_> = (0..32u32)
            .flat_map(|x| (0..32u32).map(move |y| (x, y)))
            .flat_map(|(x, y)| (0..64u64).map(move |tc| CellCoords { x, y, tc }))
            .map(|c| enc.encode_cell(&c).unwrap())
            .collect();
        let mut by_int = hashes.clone();
        hashes.sort();
        by_int.sort_by_key(|h| h.to_u128());
        assert_eq!(hashes, by_int);
    }

    #[test]
    fn interleave_locality_on_enumerated_grid() {
        // Flipping the lowest bit of one axis changes only that axis's last
        // interleaved position; all earlier bits are shared.
        let p = EncodingParams::new(4, 32, 0, 15, MixMode::Interleave).unwrap();
        let enc = Encoder::new(p);
        let total = p.total_bits();
        for x in (0..16u32).step_by(2) {
            for y in 0..16u32 {
                for tc in 0..p.time_slots() {
                    let a = enc.encode_cell(&CellCoords { x, y, tc }).unwrap().to_u128();
                    let b = enc
                        .encode_cell(&CellCoords { x: x + 1, y, tc })
                        .unwrap()
                        .to_u128();
                    let diff = a ^ b;
                    assert_eq!(diff.count_ones(), 1);
                    let last_x_pos = enc.x_masks.last().unwrap().trailing_zeros();
                    assert_eq!(diff.trailing_zeros(), last_x_pos);
                    let shared = total - 1 - last_x_pos;
                    assert_eq!(a >> (total - shared), b >> (total - shared));
                }
            }
        }
    }
}

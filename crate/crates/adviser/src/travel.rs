//! City discretization into square cells and one-time travel-time matrix
//! construction, with an atomic ledger accounting for every provider query.
//!
//! The matrix is keyed by grid cell, not by address: C occupied cells cost
//! C² queries once, and later runs sharing the store either load for free
//! or extend incrementally, so lifetime spend never exceeds the square of
//! the cells ever requested.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::CellId;

/// Hard ceiling on stored minutes; a provider answer above this is treated
/// as a pathology, not clamped.
pub const MAX_MINUTES: u16 = 1080;
/// Kilometres per degree of latitude.
const KM_PER_DEG_LAT: f64 = 110.574;
/// Kilometres per degree of longitude at the equator.
const KM_PER_DEG_LON_EQ: f64 = 111.320;
/// Typical per-query vendor charge, USD.
pub const DEFAULT_COST_PER_QUERY_USD: f64 = 0.005;

const MATRIX_MAGIC: &[u8; 4] = b"TTMX";
const MATRIX_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum TravelError {
    #[error("degenerate bounding box: {0}")]
    DegenerateBox(String),
    #[error("cell size must be positive, got {0}")]
    BadCellSize(f64),
    #[error("coordinate ({lat}, {lon}) outside the grid bounding box")]
    OutOfBounds { lat: f64, lon: f64 },
    #[error("cell {0} outside the grid ({1} cols x {2} rows)")]
    CellOutsideGrid(CellId, u16, u16),
    #[error("cell {0} not covered by this matrix")]
    CellNotCovered(CellId),
    #[error("pair {0} -> {1} not yet built in this matrix")]
    PairNotBuilt(CellId, CellId),
    #[error("provider returned {minutes} minutes for {from} -> {to} (cap {MAX_MINUTES})")]
    SaturatedMinutes {
        from: CellId,
        to: CellId,
        minutes: f64,
    },
    #[error("provider returned invalid value {value} for {from} -> {to}")]
    BadProviderValue {
        from: CellId,
        to: CellId,
        value: f64,
    },
    #[error("provider returned nonzero self travel time {minutes} for {cell}")]
    NonzeroDiagonal { cell: CellId, minutes: f64 },
    #[error("unknown travel period {0:?}")]
    UnknownPeriod(String),
    #[error("travel provider: {0}")]
    Provider(String),
    #[error("matrix file: {0}")]
    BadMatrixFile(String),
    #[error("matrix store holds a different grid geometry for period {0:?}")]
    GridMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Geographic bounding box, degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl BoundingBox {
    pub fn new(min_lat: f64, min_lon: f64, max_lat: f64, max_lon: f64) -> Result<Self, TravelError> {
        let b = BoundingBox {
            min_lat,
            min_lon,
            max_lat,
            max_lon,
        };
        if !(min_lat.is_finite() && min_lon.is_finite() && max_lat.is_finite() && max_lon.is_finite())
            || min_lat >= max_lat
            || min_lon >= max_lon
            || min_lat < -90.0
            || max_lat > 90.0
        {
            return Err(TravelError::DegenerateBox(format!("{b:?}")));
        }
        Ok(b)
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        self.min_lat <= lat && lat <= self.max_lat && self.min_lon <= lon && lon <= self.max_lon
    }
}

/// The deployment city's default coverage box (about 44 km on a side).
pub fn default_city_bbox() -> BoundingBox {
    BoundingBox::new(7.2, 3.7, 7.6, 4.1).expect("static box is valid")
}

/// A planar grid of square cells laid over a bounding box using a local
/// equirectangular projection about the box center (distortion well under
/// 0.3% at city scale, which spares us a geodesy dependency).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub bbox: BoundingBox,
    pub cell_km: f64,
    pub cols: u16,
    pub rows: u16,
}

impl Grid {
    pub fn new(bbox: BoundingBox, cell_km: f64) -> Result<Self, TravelError> {
        if !(cell_km.is_finite() && cell_km > 0.0) {
            return Err(TravelError::BadCellSize(cell_km));
        }
        let (kx, ky) = km_per_degree(&bbox);
        let width_km = (bbox.max_lon - bbox.min_lon) * kx;
        let height_km = (bbox.max_lat - bbox.min_lat) * ky;
        let cols = (width_km / cell_km).ceil().max(1.0);
        let rows = (height_km / cell_km).ceil().max(1.0);
        if cols > u16::MAX as f64 || rows > u16::MAX as f64 {
            return Err(TravelError::DegenerateBox(format!(
                "box needs {cols} x {rows} cells of {cell_km} km"
            )));
        }
        Ok(Grid {
            bbox,
            cell_km,
            cols: cols as u16,
            rows: rows as u16,
        })
    }

    pub fn cell_count(&self) -> u32 {
        self.cols as u32 * self.rows as u32
    }

    pub fn contains_cell(&self, c: CellId) -> bool {
        c.x < self.cols && c.y < self.rows
    }

    fn check_cell(&self, c: CellId) -> Result<(), TravelError> {
        if self.contains_cell(c) {
            Ok(())
        } else {
            Err(TravelError::CellOutsideGrid(c, self.cols, self.rows))
        }
    }

    /// Kilometres east and north of the box's south-west corner.
    pub fn project(&self, lat: f64, lon: f64) -> (f64, f64) {
        let (kx, ky) = km_per_degree(&self.bbox);
        ((lon - self.bbox.min_lon) * kx, (lat - self.bbox.min_lat) * ky)
    }

    /// The unique cell containing the point. Points on an interior cell
    /// boundary go to the lower-index (south-west) cell.
    pub fn snap_to_cell(&self, lat: f64, lon: f64) -> Result<CellId, TravelError> {
        if !self.bbox.contains(lat, lon) {
            return Err(TravelError::OutOfBounds { lat, lon });
        }
        let (ex, ny) = self.project(lat, lon);
        // The 1e-9 km (micron-scale) nudge makes the south-west boundary
        // preference robust to projection round-off on exact boundaries.
        let snap_axis = |km: f64, count: u16| -> u16 {
            let idx = ((km - 1e-9) / self.cell_km).ceil() - 1.0;
            idx.max(0.0).min(count as f64 - 1.0) as u16
        };
        Ok(CellId {
            x: snap_axis(ex, self.cols),
            y: snap_axis(ny, self.rows),
        })
    }

    /// Geographic center of a cell.
    pub fn cell_center(&self, c: CellId) -> Result<(f64, f64), TravelError> {
        self.check_cell(c)?;
        let (kx, ky) = km_per_degree(&self.bbox);
        Ok((
            self.bbox.min_lat + (c.y as f64 + 0.5) * self.cell_km / ky,
            self.bbox.min_lon + (c.x as f64 + 0.5) * self.cell_km / kx,
        ))
    }

    /// All cells, row-major. Only sensible for small grids or full-grid
    /// matrix builds.
    pub fn all_cells(&self) -> Vec<CellId> {
        let mut out = Vec::with_capacity(self.cell_count() as usize);
        for y in 0..self.rows {
            for x in 0..self.cols {
                out.push(CellId { x, y });
            }
        }
        out
    }
}

fn km_per_degree(bbox: &BoundingBox) -> (f64, f64) {
    let center_lat = 0.5 * (bbox.min_lat + bbox.max_lat);
    (
        KM_PER_DEG_LON_EQ * center_lat.to_radians().cos(),
        KM_PER_DEG_LAT,
    )
}

/// A source of point-to-point travel times (cell center to cell center).
/// Implementations must be deterministic for a given (grid, pair, period).
pub trait TravelProvider: Send + Sync {
    fn name(&self) -> &str;
    /// Travel minutes from the center of `from` to the center of `to`.
    fn query(&self, grid: &Grid, from: CellId, to: CellId, period: &str)
        -> Result<f64, TravelError>;
}

/// Offline stand-in for a maps vendor: rectilinear cell distance at a
/// fixed speed, scaled by a per-period congestion factor. Symmetric and
/// metric by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTravelProvider {
    pub speed_kmh: f64,
    pub period_factors: std::collections::BTreeMap<String, f64>,
}

impl SyntheticTravelProvider {
    pub fn new(speed_kmh: f64, period_factors: std::collections::BTreeMap<String, f64>) -> Self {
        assert!(speed_kmh > 0.0, "speed must be positive");
        SyntheticTravelProvider {
            speed_kmh,
            period_factors,
        }
    }
}

impl Default for SyntheticTravelProvider {
    /// 30 km/h base speed; mornings are congested 1.5x, off-peak is 1.0x.
    fn default() -> Self {
        let mut factors = std::collections::BTreeMap::new();
        factors.insert("morning".to_string(), 1.5);
        factors.insert("offpeak".to_string(), 1.0);
        SyntheticTravelProvider::new(30.0, factors)
    }
}

impl TravelProvider for SyntheticTravelProvider {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn query(
        &self,
        grid: &Grid,
        from: CellId,
        to: CellId,
        period: &str,
    ) -> Result<f64, TravelError> {
        grid.check_cell(from)?;
        grid.check_cell(to)?;
        let factor = *self
            .period_factors
            .get(period)
            .ok_or_else(|| TravelError::UnknownPeriod(period.to_string()))?;
        let dx = (from.x as f64 - to.x as f64).abs();
        let dy = (from.y as f64 - to.y as f64).abs();
        let km = (dx + dy) * grid.cell_km;
        Ok(km / self.speed_kmh * 60.0 * factor)
    }
}

/// Counts provider queries and the money they represent. Increments only;
/// shared freely across build threads.
#[derive(Debug)]
pub struct QueryCostLedger {
    queries: AtomicU64,
    cost_per_query: f64,
}

impl QueryCostLedger {
    pub fn new(cost_per_query: f64) -> Self {
        QueryCostLedger {
            queries: AtomicU64::new(0),
            cost_per_query,
        }
    }

    pub fn record(&self, n: u64) {
        self.queries.fetch_add(n, Ordering::Relaxed);
    }

    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    pub fn cost(&self) -> f64 {
        self.queries() as f64 * self.cost_per_query
    }
}

impl Default for QueryCostLedger {
    fn default() -> Self {
        QueryCostLedger::new(DEFAULT_COST_PER_QUERY_USD)
    }
}

/// Query count of the per-location scheme this system replaces: one query
/// per ordered pair of locations, self-pairs included.
pub fn naive_per_location_query_count(locations: u64) -> u64 {
    locations * locations
}

/// Runs the per-location scheme's accounting loop against a ledger, one
/// recorded query per ordered pair, and returns the total.
pub fn naive_per_location_scheme(locations: u64, ledger: &QueryCostLedger) -> u64 {
    let mut total = 0u64;
    for _ in 0..locations {
        for _ in 0..locations {
            ledger.record(1);
            total += 1;
        }
    }
    total
}

/// Dense travel-time table over a set of covered cells for one period.
/// `known` tracks which ordered pairs have been filled so an interrupted
/// build resumes without repeating queries.
#[derive(Debug, Clone, PartialEq)]
pub struct TravelTimeMatrix {
    period: String,
    provider: String,
    grid: Grid,
    cells: Vec<CellId>,
    index: HashMap<CellId, u32>,
    minutes: Vec<u16>,
    known: Vec<u8>,
    query_count: u64,
    built_at: Option<String>,
}

/// Human-readable companion file persisted next to the binary matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSidecar {
    pub version: u16,
    pub period: String,
    pub provider: String,
    pub grid: Grid,
    pub cell_count: u32,
    pub query_count: u64,
    pub complete: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub built_at: Option<String>,
}

impl MatrixSidecar {
    pub fn from_json_str(text: &str) -> Result<Self, TravelError> {
        let s: MatrixSidecar =
            serde_json::from_str(text).map_err(|e| TravelError::BadMatrixFile(e.to_string()))?;
        if s.version != MATRIX_VERSION {
            return Err(TravelError::BadMatrixFile(format!(
                "unsupported sidecar version {}",
                s.version
            )));
        }
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sidecar serializes")
    }
}

impl TravelTimeMatrix {
    /// An empty (all pairs unknown) matrix covering `cells`.
    pub fn empty(
        grid: Grid,
        period: &str,
        provider: &str,
        cells: BTreeSet<CellId>,
    ) -> Result<Self, TravelError> {
        for &c in &cells {
            grid.check_cell(c)?;
        }
        let cells: Vec<CellId> = cells.into_iter().collect();
        let n = cells.len();
        let index = cells
            .iter()
            .enumerate()
            .map(|(i, c)| (*c, i as u32))
            .collect();
        Ok(TravelTimeMatrix {
            period: period.to_string(),
            provider: provider.to_string(),
            grid,
            minutes: vec![0; n * n],
            known: vec![0; n.saturating_mul(n).div_ceil(8)],
            index,
            cells,
            query_count: 0,
            built_at: None,
        })
    }

    pub fn period(&self) -> &str {
        &self.period
    }

    pub fn provider_name(&self) -> &str {
        &self.provider
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn cells(&self) -> &[CellId] {
        &self.cells
    }

    pub fn covers(&self, c: CellId) -> bool {
        self.index.contains_key(&c)
    }

    /// Queries spent building this matrix, across all sessions.
    pub fn query_count(&self) -> u64 {
        self.query_count
    }

    pub fn built_at(&self) -> Option<&str> {
        self.built_at.as_deref()
    }

    fn bit(&self, i: usize) -> bool {
        self.known[i / 8] & (1 << (i % 8)) != 0
    }

    fn set_bit(&mut self, i: usize) {
        self.known[i / 8] |= 1 << (i % 8);
    }

    pub fn is_complete(&self) -> bool {
        let n = self.cells.len();
        (0..n * n).all(|i| self.bit(i))
    }

    /// Count of pairs still to be queried.
    pub fn unknown_pairs(&self) -> u64 {
        let n = self.cells.len();
        (0..n * n).filter(|&i| !self.bit(i)).count() as u64
    }

    /// Constant-time lookup. Errors on cells outside the grid, not covered
    /// by this matrix, or pairs an interrupted build has not filled yet.
    pub fn travel_time(&self, a: CellId, b: CellId) -> Result<u16, TravelError> {
        self.grid.check_cell(a)?;
        self.grid.check_cell(b)?;
        let ia = *self.index.get(&a).ok_or(TravelError::CellNotCovered(a))? as usize;
        let ib = *self.index.get(&b).ok_or(TravelError::CellNotCovered(b))? as usize;
        let i = ia * self.cells.len() + ib;
        if !self.bit(i) {
            return Err(TravelError::PairNotBuilt(a, b));
        }
        Ok(self.minutes[i])
    }

    /// Fills every unknown pair from `provider`, recording one ledger
    /// query per pair. On provider failure the pairs filled so far stay
    /// known, so the caller can persist and resume later.
    pub fn fill(
        &mut self,
        provider: &dyn TravelProvider,
        ledger: &QueryCostLedger,
    ) -> Result<(), TravelError> {
        let n = self.cells.len();
        for ia in 0..n {
            for ib in 0..n {
                let i = ia * n + ib;
                if self.bit(i) {
                    continue;
                }
                let (from, to) = (self.cells[ia], self.cells[ib]);
                ledger.record(1);
                self.query_count += 1;
                let raw = provider.query(&self.grid, from, to, &self.period)?;
                if !raw.is_finite() || raw < 0.0 {
                    return Err(TravelError::BadProviderValue {
                        from,
                        to,
                        value: raw,
                    });
                }
                if ia == ib && raw != 0.0 {
                    return Err(TravelError::NonzeroDiagonal {
                        cell: from,
                        minutes: raw,
                    });
                }
                let rounded = raw.round();
                if rounded > MAX_MINUTES as f64 {
                    return Err(TravelError::SaturatedMinutes {
                        from,
                        to,
                        minutes: raw,
                    });
                }
                self.minutes[i] = rounded as u16;
                self.set_bit(i);
            }
        }
        Ok(())
    }

    /// A new matrix covering `cells ∪ self.cells`, carrying over every
    /// already-known pair so only genuinely new pairs cost queries.
    pub fn extended(&self, extra: &BTreeSet<CellId>) -> Result<Self, TravelError> {
        let mut all: BTreeSet<CellId> = self.cells.iter().copied().collect();
        all.extend(extra.iter().copied());
        let mut next = TravelTimeMatrix::empty(self.grid.clone(), &self.period, &self.provider, all)?;
        next.query_count = self.query_count;
        next.built_at = self.built_at.clone();
        let n_old = self.cells.len();
        let n_new = next.cells.len();
        for ia in 0..n_old {
            for ib in 0..n_old {
                let i_old = ia * n_old + ib;
                if !self.bit(i_old) {
                    continue;
                }
                let ja = next.index[&self.cells[ia]] as usize;
                let jb = next.index[&self.cells[ib]] as usize;
                let i_new = ja * n_new + jb;
                next.minutes[i_new] = self.minutes[i_old];
                next.set_bit(i_new);
            }
        }
        Ok(next)
    }

    /// Binary encoding: magic, version, cell list, minute table, known
    /// bitmap, FNV-1a checksum. Everything little-endian; byte-for-byte
    /// deterministic for identical content.
    pub fn encode_binary(&self) -> Vec<u8> {
        let n = self.cells.len();
        let mut out = Vec::with_capacity(16 + n * 4 + n * n * 2 + self.known.len() + 8);
        out.extend_from_slice(MATRIX_MAGIC);
        out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for c in &self.cells {
            out.extend_from_slice(&c.x.to_le_bytes());
            out.extend_from_slice(&c.y.to_le_bytes());
        }
        for m in &self.minutes {
            out.extend_from_slice(&m.to_le_bytes());
        }
        out.extend_from_slice(&self.known);
        let checksum = fnv1a64(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    /// Decodes the binary body produced by [`TravelTimeMatrix::encode_binary`];
    /// sidecar metadata supplies the grid, period, and provider.
    pub fn decode_binary(bytes: &[u8], sidecar: &MatrixSidecar) -> Result<Self, TravelError> {
        let body = decode_matrix_body(bytes)?;
        if body.cells.len() as u32 != sidecar.cell_count {
            return Err(TravelError::BadMatrixFile(format!(
                "sidecar says {} cells, binary holds {}",
                sidecar.cell_count,
                body.cells.len()
            )));
        }
        for &c in &body.cells {
            sidecar.grid.check_cell(c)?;
        }
        let index = body
            .cells
            .iter()
            .enumerate()
            .map(|(i, c)| (*c, i as u32))
            .collect();
        Ok(TravelTimeMatrix {
            period: sidecar.period.clone(),
            provider: sidecar.provider.clone(),
            grid: sidecar.grid.clone(),
            cells: body.cells,
            index,
            minutes: body.minutes,
            known: body.known,
            query_count: sidecar.query_count,
            built_at: sidecar.built_at.clone(),
        })
    }

    pub fn sidecar(&self) -> MatrixSidecar {
        MatrixSidecar {
            version: MATRIX_VERSION,
            period: self.period.clone(),
            provider: self.provider.clone(),
            grid: self.grid.clone(),
            cell_count: self.cells.len() as u32,
            query_count: self.query_count,
            complete: self.is_complete(),
            built_at: self.built_at.clone(),
        }
    }

    pub fn set_built_at(&mut self, stamp: Option<String>) {
        self.built_at = stamp;
    }
}

/// Raw decoded matrix body, before sidecar metadata is attached.
pub struct MatrixBody {
    pub cells: Vec<CellId>,
    pub minutes: Vec<u16>,
    pub known: Vec<u8>,
}

/// Validates and decodes the binary matrix format. Rejects bad magic,
/// unknown versions, truncation, trailing bytes, checksum mismatches, and
/// duplicate or unsorted cell lists.
pub fn decode_matrix_body(bytes: &[u8]) -> Result<MatrixBody, TravelError> {
    let fail = |msg: &str| TravelError::BadMatrixFile(msg.to_string());
    if bytes.len() < 10 + 8 {
        return Err(fail("file too short"));
    }
    if &bytes[0..4] != MATRIX_MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != MATRIX_VERSION {
        return Err(TravelError::BadMatrixFile(format!(
            "unsupported matrix version {version}"
        )));
    }
    let n = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    if n > 1 << 16 {
        return Err(fail("cell count too large"));
    }
    let cells_len = n.checked_mul(4).ok_or_else(|| fail("overflow"))?;
    let minutes_len = n
        .checked_mul(n)
        .and_then(|nn| nn.checked_mul(2))
        .ok_or_else(|| fail("overflow"))?;
    let known_len = (n * n).div_ceil(8);
    let want = 10 + cells_len + minutes_len + known_len + 8;
    if bytes.len() != want {
        return Err(TravelError::BadMatrixFile(format!(
            "expected {want} bytes for {n} cells, got {}",
            bytes.len()
        )));
    }
    let body_end = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("8 bytes"));
    if fnv1a64(&bytes[..body_end]) != stored {
        return Err(fail("checksum mismatch"));
    }
    let mut cells = Vec::with_capacity(n);
    let mut off = 10;
    for _ in 0..n {
        let x = u16::from_le_bytes([bytes[off], bytes[off + 1]]);
        let y = u16::from_le_bytes([bytes[off + 2], bytes[off + 3]]);
        cells.push(CellId { x, y });
        off += 4;
    }
    if cells.windows(2).any(|w| w[0] >= w[1]) {
        return Err(fail("cell list not strictly sorted"));
    }
    let mut minutes = Vec::with_capacity(n * n);
    for _ in 0..n * n {
        minutes.push(u16::from_le_bytes([bytes[off], bytes[off + 1]]));
        off += 2;
    }
    if minutes.iter().any(|&m| m > MAX_MINUTES) {
        return Err(fail("minute entry above cap"));
    }
    let known = bytes[off..body_end].to_vec();
    Ok(MatrixBody {
        cells,
        minutes,
        known,
    })
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// On-disk home for travel matrices, one binary + JSON sidecar per period.
/// All builds funnel through [`MatrixStore::build_or_extend`], which is
/// what enforces the pay-once property.
#[derive(Debug, Clone)]
pub struct MatrixStore {
    dir: PathBuf,
}

impl MatrixStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, TravelError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(MatrixStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn binary_path(&self, period: &str) -> PathBuf {
        self.dir.join(format!("{period}.ttm"))
    }

    pub fn sidecar_path(&self, period: &str) -> PathBuf {
        self.dir.join(format!("{period}.json"))
    }

    /// Loads the persisted matrix for `period`, complete or partial.
    pub fn load(&self, period: &str) -> Result<Option<TravelTimeMatrix>, TravelError> {
        let bin = self.binary_path(period);
        let side = self.sidecar_path(period);
        if !bin.exists() || !side.exists() {
            return Ok(None);
        }
        let sidecar = MatrixSidecar::from_json_str(&std::fs::read_to_string(side)?)?;
        let bytes = std::fs::read(bin)?;
        Ok(Some(TravelTimeMatrix::decode_binary(&bytes, &sidecar)?))
    }

    pub fn save(&self, matrix: &TravelTimeMatrix) -> Result<(), TravelError> {
        std::fs::write(self.binary_path(matrix.period()), matrix.encode_binary())?;
        std::fs::write(self.sidecar_path(matrix.period()), matrix.sidecar().to_json())?;
        Ok(())
    }

    /// Returns a complete matrix covering at least `required`, spending
    /// provider queries only on pairs never built before:
    ///
    /// * everything already on disk → zero queries;
    /// * interrupted earlier build → only the missing pairs;
    /// * new cells since last run → only pairs involving a new cell.
    ///
    /// On provider failure the partial state is persisted before the error
    /// is returned, so a retry resumes rather than re-spends.
    pub fn build_or_extend(
        &self,
        grid: &Grid,
        provider: &dyn TravelProvider,
        period: &str,
        required: &BTreeSet<CellId>,
        ledger: &QueryCostLedger,
        built_at: Option<String>,
    ) -> Result<TravelTimeMatrix, TravelError> {
        for &c in required {
            grid.check_cell(c)?;
        }
        let mut matrix = match self.load(period)? {
            Some(existing) => {
                if existing.grid() != grid {
                    return Err(TravelError::GridMismatch(period.to_string()));
                }
                if existing.provider_name() != provider.name() {
                    return Err(TravelError::BadMatrixFile(format!(
                        "store built with provider {:?}, requested {:?}",
                        existing.provider_name(),
                        provider.name()
                    )));
                }
                let extra: BTreeSet<CellId> = required
                    .iter()
                    .copied()
                    .filter(|c| !existing.covers(*c))
                    .collect();
                if extra.is_empty() && existing.is_complete() {
                    return Ok(existing);
                }
                existing.extended(&extra)?
            }
            None => {
                let mut m = TravelTimeMatrix::empty(
                    grid.clone(),
                    period,
                    provider.name(),
                    required.clone(),
                )?;
                m.set_built_at(built_at.clone());
                m
            }
        };
        if matrix.built_at().is_none() {
            matrix.set_built_at(built_at);
        }
        let fill_result = matrix.fill(provider, ledger);
        self.save(&matrix)?;
        fill_result?;
        Ok(matrix)
    }
}

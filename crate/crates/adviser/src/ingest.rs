//! Registry CSV ingestion, address geocoding behind a pluggable provider
//! with a persistent append-only cache, and the glue that turns raw rows
//! into domain records.
//!
//! Malformed rows are reported, never silently dropped; a file where more
//! than 10% of rows are bad aborts ingestion outright.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::DailyWindow;
use crate::travel::{BoundingBox, QueryCostLedger};

/// Environment variable selecting the geocoding backend.
pub const GEO_PROVIDER_ENV: &str = "ADVISER_GEO_PROVIDER";
/// Fraction of malformed rows above which ingestion aborts.
pub const MALFORMED_ABORT_FRACTION: f64 = 0.10;
/// First line of every geocode cache file.
pub const CACHE_HEADER: &str = "ADVISER-GEOCACHE v1";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("registry io: {0}")]
    Io(#[from] std::io::Error),
    #[error("registry csv: {0}")]
    Csv(String),
    #[error("registry header mismatch: expected {expected:?}, got {got:?}")]
    HeaderMismatch {
        expected: Vec<String>,
        got: Vec<String>,
    },
    #[error("{malformed} of {total} rows malformed (> {:.0}%), aborting", MALFORMED_ABORT_FRACTION * 100.0)]
    TooManyMalformed { malformed: usize, total: usize },
    #[error("address is empty after normalization")]
    EmptyAddress,
    #[error("unknown geocode provider {0:?} (set {GEO_PROVIDER_ENV} to \"synthetic\")")]
    UnknownProvider(String),
    #[error("geocode provider {provider}: {message} (retryable)")]
    ProviderFailure { provider: String, message: String },
    #[error("geocode cache file: {0}")]
    BadCacheFile(String),
}

/// How a declared feature column is typed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    /// Closed set of category labels; a row value outside the set is a
    /// malformed row.
    Categorical { allowed: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
}

/// Declared shape of the registry CSV: the fixed base columns plus typed
/// feature columns, in file order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeaderSpec {
    pub feature_columns: Vec<ColumnSpec>,
}

/// Base columns every registry file carries, before the feature columns.
pub const BASE_COLUMNS: [&str; 6] = [
    "id",
    "address",
    "phone",
    "child_birth_date",
    "received_doses",
    "availability",
];

impl HeaderSpec {
    /// The stock header: base columns plus the three raw numeric features
    /// (income, mother age, children count). Derived features such as dose
    /// completion are computed downstream, not read from the file.
    pub fn standard() -> Self {
        HeaderSpec {
            feature_columns: vec![
                ColumnSpec {
                    name: "household_income_usd".into(),
                    kind: ColumnKind::Numeric,
                },
                ColumnSpec {
                    name: "mother_age_years".into(),
                    kind: ColumnKind::Numeric,
                },
                ColumnSpec {
                    name: "children_count".into(),
                    kind: ColumnKind::Numeric,
                },
            ],
        }
    }

    pub fn expected_header(&self) -> Vec<String> {
        BASE_COLUMNS
            .iter()
            .map(|s| s.to_string())
            .chain(self.feature_columns.iter().map(|c| c.name.clone()))
            .collect()
    }

    /// Numeric encoding of a field value: numbers pass through, categories
    /// map to their index in the declared label set.
    pub fn numeric_value(&self, column: &str, value: &FieldValue) -> Option<f64> {
        match value {
            FieldValue::Numeric(v) => Some(*v),
            FieldValue::Categorical(s) => {
                let spec = self.feature_columns.iter().find(|c| c.name == column)?;
                match &spec.kind {
                    ColumnKind::Categorical { allowed } => {
                        allowed.iter().position(|a| a == s).map(|i| i as f64)
                    }
                    ColumnKind::Numeric => None,
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Numeric(f64),
    Categorical(String),
}

/// One registry row, parsed but not yet geocoded or featurized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub address: String,
    /// Empty string means the household cannot be reached by phone.
    pub phone: String,
    pub child_birth_date: NaiveDate,
    pub received_doses: Vec<String>,
    pub availability: Vec<DailyWindow>,
    pub features: BTreeMap<String, FieldValue>,
}

impl RawRecord {
    pub fn phone_reachable(&self) -> bool {
        !self.phone.trim().is_empty()
    }
}

/// A malformed row, reported with its 1-based data row number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    pub row: usize,
    pub message: String,
}

/// Parses a registry file. Returns the good rows plus a report of the bad
/// ones; errors out entirely on header mismatch or when more than
/// [`MALFORMED_ABORT_FRACTION`] of rows are malformed.
pub fn parse_registry(
    path: &Path,
    spec: &HeaderSpec,
) -> Result<(Vec<RawRecord>, Vec<RowError>), IngestError> {
    let bytes = std::fs::read(path)?;
    parse_registry_bytes(&bytes, spec)
}

/// Same as [`parse_registry`] but over in-memory bytes.
pub fn parse_registry_bytes(
    bytes: &[u8],
    spec: &HeaderSpec,
) -> Result<(Vec<RawRecord>, Vec<RowError>), IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(bytes);
    let expected = spec.expected_header();
    let got: Vec<String> = reader
        .headers()
        .map_err(|e| IngestError::Csv(e.to_string()))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if got != expected {
        return Err(IngestError::HeaderMismatch { expected, got });
    }

    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut total = 0usize;
    for (i, row) in reader.records().enumerate() {
        total += 1;
        let row_no = i + 1;
        match row {
            Err(e) => errors.push(RowError {
                row: row_no,
                message: e.to_string(),
            }),
            Ok(record) => match parse_row(&record, spec, &expected) {
                Ok(r) => records.push(r),
                Err(message) => errors.push(RowError {
                    row: row_no,
                    message,
                }),
            },
        }
    }
    // Abort on widespread corruption, but always tolerate a single bad
    // row: one typo in a small file is an error report, not a dead batch.
    if errors.len() > 1 && errors.len() as f64 > MALFORMED_ABORT_FRACTION * total as f64 {
        return Err(IngestError::TooManyMalformed {
            malformed: errors.len(),
            total,
        });
    }
    Ok((records, errors))
}

fn parse_row(
    record: &csv::StringRecord,
    spec: &HeaderSpec,
    expected: &[String],
) -> Result<RawRecord, String> {
    if record.len() != expected.len() {
        return Err(format!(
            "expected {} fields, got {}",
            expected.len(),
            record.len()
        ));
    }
    let field = |i: usize| record.get(i).unwrap_or("").trim();
    let id = field(0).to_string();
    if id.is_empty() {
        return Err("empty id".to_string());
    }
    let child_birth_date = NaiveDate::parse_from_str(field(3), "%Y-%m-%d")
        .map_err(|e| format!("birth date {:?}: {e}", field(3)))?;
    let received_doses: Vec<String> = field(4)
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    let availability = parse_availability(field(5))?;

    let mut features = BTreeMap::new();
    for (j, col) in spec.feature_columns.iter().enumerate() {
        let raw = field(BASE_COLUMNS.len() + j);
        let value = match &col.kind {
            ColumnKind::Numeric => {
                let v: f64 = raw
                    .parse()
                    .map_err(|_| format!("column {:?}: bad number {raw:?}", col.name))?;
                if !v.is_finite() {
                    return Err(format!("column {:?}: non-finite number", col.name));
                }
                FieldValue::Numeric(v)
            }
            ColumnKind::Categorical { allowed } => {
                if !allowed.iter().any(|a| a == raw) {
                    return Err(format!(
                        "column {:?}: value {raw:?} not in {allowed:?}",
                        col.name
                    ));
                }
                FieldValue::Categorical(raw.to_string())
            }
        };
        features.insert(col.name.clone(), value);
    }

    Ok(RawRecord {
        id,
        address: field(1).to_string(),
        phone: field(2).to_string(),
        child_birth_date,
        received_doses,
        availability,
        features,
    })
}

/// Window list syntax: `HH:MM-HH:MM` items joined by `;`. An empty field
/// means available all day.
fn parse_availability(text: &str) -> Result<Vec<DailyWindow>, String> {
    if text.is_empty() {
        return Ok(vec![DailyWindow::all_day()]);
    }
    let mut out = Vec::new();
    for item in text.split(';') {
        let item = item.trim();
        let (a, b) = item
            .split_once('-')
            .ok_or_else(|| format!("availability item {item:?}: expected HH:MM-HH:MM"))?;
        let w = DailyWindow::new(parse_hhmm(a)?, parse_hhmm(b)?)
            .map_err(|e| format!("availability item {item:?}: {e}"))?;
        out.push(w);
    }
    Ok(out)
}

fn parse_hhmm(text: &str) -> Result<u16, String> {
    let (h, m) = text
        .trim()
        .split_once(':')
        .ok_or_else(|| format!("bad time {text:?}"))?;
    let h: u16 = h.parse().map_err(|_| format!("bad hour in {text:?}"))?;
    let m: u16 = m.parse().map_err(|_| format!("bad minute in {text:?}"))?;
    if m >= 60 || h > 24 || (h == 24 && m != 0) {
        return Err(format!("time {text:?} out of range"));
    }
    Ok(h * 60 + m)
}

fn format_hhmm(minute: u16) -> String {
    format!("{:02}:{:02}", minute / 60, minute % 60)
}

/// Writes records back out in the exact format [`parse_registry`] reads:
/// emit-then-parse is lossless and emit output is byte-stable.
pub fn emit_registry(records: &[RawRecord], spec: &HeaderSpec) -> Result<Vec<u8>, IngestError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(spec.expected_header())
        .map_err(|e| IngestError::Csv(e.to_string()))?;
    for r in records {
        let availability = if r.availability == vec![DailyWindow::all_day()] {
            String::new()
        } else {
            r.availability
                .iter()
                .map(|w| format!("{}-{}", format_hhmm(w.start_min), format_hhmm(w.end_min)))
                .collect::<Vec<_>>()
                .join(";")
        };
        let mut row = vec![
            r.id.clone(),
            r.address.clone(),
            r.phone.clone(),
            r.child_birth_date.format("%Y-%m-%d").to_string(),
            r.received_doses.join(";"),
            availability,
        ];
        for col in &spec.feature_columns {
            let text = match r.features.get(&col.name) {
                Some(FieldValue::Numeric(v)) => format_float(*v),
                Some(FieldValue::Categorical(s)) => s.clone(),
                None => String::new(),
            };
            row.push(text);
        }
        writer
            .write_record(&row)
            .map_err(|e| IngestError::Csv(e.to_string()))?;
    }
    writer
        .into_inner()
        .map_err(|e| IngestError::Csv(e.to_string()))
}

/// Shortest decimal that round-trips the value (Rust's float formatter
/// guarantees this), so emit output is stable under re-parsing.
fn format_float(v: f64) -> String {
    format!("{v}")
}

/// Collapses case and whitespace so trivially different spellings of the
/// same address share one cache entry.
pub fn normalize_address(address: &str) -> String {
    address
        .split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// FNV-1a hash of the normalized address: the cache key.
pub fn address_hash(normalized: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in normalized.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A source of coordinates for free-text addresses. Implementations must
/// be deterministic for a fixed address within a run.
pub trait GeocodeProvider: Send + Sync {
    fn name(&self) -> &str;
    fn cost_per_query_usd(&self) -> f64;
    /// Coordinates for an already-normalized, non-empty address.
    fn geocode(&self, normalized_address: &str) -> Result<(f64, f64), IngestError>;
}

/// Offline stand-in for a maps vendor: hashes the address into a fixed
/// point inside the configured bounding box. Free, deterministic, and
/// stable across runs.
#[derive(Debug, Clone)]
pub struct SyntheticGeocodeProvider {
    pub bbox: BoundingBox,
}

impl SyntheticGeocodeProvider {
    pub fn new(bbox: BoundingBox) -> Self {
        SyntheticGeocodeProvider { bbox }
    }
}

impl GeocodeProvider for SyntheticGeocodeProvider {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn cost_per_query_usd(&self) -> f64 {
        0.0
    }

    fn geocode(&self, normalized_address: &str) -> Result<(f64, f64), IngestError> {
        let h = address_hash(normalized_address);
        let lat_frac = (h >> 32) as f64 / u32::MAX as f64;
        let lon_frac = (h & 0xffff_ffff) as f64 / u32::MAX as f64;
        Ok((
            self.bbox.min_lat + (self.bbox.max_lat - self.bbox.min_lat) * lat_frac,
            self.bbox.min_lon + (self.bbox.max_lon - self.bbox.min_lon) * lon_frac,
        ))
    }
}

/// Builds the provider selected by the `ADVISER_GEO_PROVIDER` environment
/// variable (unset/empty means "synthetic").
pub fn provider_from_env(bbox: BoundingBox) -> Result<Box<dyn GeocodeProvider>, IngestError> {
    let choice = std::env::var(GEO_PROVIDER_ENV).unwrap_or_default();
    match choice.trim() {
        "" | "synthetic" => Ok(Box::new(SyntheticGeocodeProvider::new(bbox))),
        other => Err(IngestError::UnknownProvider(other.to_string())),
    }
}

/// One line of the cache file.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub hash: u64,
    pub lat: f64,
    pub lon: f64,
    pub provider: String,
    pub timestamp: String,
}

/// Parses the cache file body (header line included). Strict: the file is
/// machine-written, so any malformed line is corruption.
pub fn parse_cache_text(text: &str) -> Result<Vec<CacheEntry>, IngestError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CACHE_HEADER => {}
        other => {
            return Err(IngestError::BadCacheFile(format!(
                "bad header line {other:?}"
            )))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 5 {
            return Err(IngestError::BadCacheFile(format!(
                "line {}: expected 5 tab-separated fields",
                i + 2
            )));
        }
        let hash = u64::from_str_radix(parts[0], 16)
            .map_err(|_| IngestError::BadCacheFile(format!("line {}: bad hash", i + 2)))?;
        let lat: f64 = parts[1]
            .parse()
            .map_err(|_| IngestError::BadCacheFile(format!("line {}: bad latitude", i + 2)))?;
        let lon: f64 = parts[2]
            .parse()
            .map_err(|_| IngestError::BadCacheFile(format!("line {}: bad longitude", i + 2)))?;
        if !lat.is_finite() || !lon.is_finite() {
            return Err(IngestError::BadCacheFile(format!(
                "line {}: non-finite coordinate",
                i + 2
            )));
        }
        out.push(CacheEntry {
            hash,
            lat,
            lon,
            provider: parts[3].to_string(),
            timestamp: parts[4].to_string(),
        });
    }
    Ok(out)
}

struct CacheState {
    map: HashMap<u64, (f64, f64)>,
    in_flight: HashSet<u64>,
    file: std::fs::File,
}

/// Append-only on-disk geocode cache. A hit never touches the provider;
/// concurrent misses for the same address coalesce into one provider call.
pub struct GeocodeCache {
    state: Mutex<CacheState>,
    woken: Condvar,
    path: PathBuf,
}

impl GeocodeCache {
    /// Opens (or creates) the cache file, validating its header.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, IngestError> {
        let path = path.into();
        let mut map = HashMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            for e in parse_cache_text(&text)? {
                map.insert(e.hash, (e.lat, e.lon));
            }
        } else {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&path, format!("{CACHE_HEADER}\n"))?;
        }
        let file = std::fs::OpenOptions::new().append(true).open(&path)?;
        Ok(GeocodeCache {
            state: Mutex::new(CacheState {
                map,
                in_flight: HashSet::new(),
                file,
            }),
            woken: Condvar::new(),
            path,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("cache lock").map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cached coordinates for an address, if present.
    pub fn lookup(&self, address: &str) -> Option<(f64, f64)> {
        let key = address_hash(&normalize_address(address));
        self.state.lock().expect("cache lock").map.get(&key).copied()
    }

    /// Publishes the outcome of an owned in-flight query: the map insert
    /// (on success) and the in-flight release happen under one lock, so a
    /// waiter can never observe the key as neither cached nor in flight.
    fn finish(
        &self,
        key: u64,
        outcome: &Result<(f64, f64), IngestError>,
        provider: &str,
    ) -> Result<(), IngestError> {
        let mut state = self.state.lock().expect("cache lock");
        let write_result = if let Ok(coords) = outcome {
            let line = format!(
                "{:016x}\t{}\t{}\t{}\t{}\n",
                key,
                coords.0,
                coords.1,
                provider,
                chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ")
            );
            let r = state
                .file
                .write_all(line.as_bytes())
                .and_then(|_| state.file.flush());
            state.map.insert(key, *coords);
            r
        } else {
            Ok(())
        };
        state.in_flight.remove(&key);
        drop(state);
        self.woken.notify_all();
        write_result.map_err(IngestError::Io)
    }
}

/// Resolves an address to coordinates, consulting the cache first. Each
/// provider call records one query on the ledger; cache hits record none.
/// Concurrent requests for the same address make exactly one provider call.
pub fn geocode(
    address: &str,
    provider: &dyn GeocodeProvider,
    cache: &GeocodeCache,
    ledger: &QueryCostLedger,
) -> Result<(f64, f64), IngestError> {
    let normalized = normalize_address(address);
    if normalized.is_empty() {
        return Err(IngestError::EmptyAddress);
    }
    let key = address_hash(&normalized);

    // Take ownership of the miss, or wait for whoever already owns it.
    {
        let mut state = cache.state.lock().expect("cache lock");
        loop {
            if let Some(coords) = state.map.get(&key) {
                return Ok(*coords);
            }
            if state.in_flight.insert(key) {
                break;
            }
            state = cache.woken.wait(state).expect("cache lock");
        }
    }

    // Query outside the lock so unrelated addresses proceed in parallel.
    ledger.record(1);
    let result = provider.geocode(&normalized);
    cache.finish(key, &result, provider.name())?;
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::travel::default_city_bbox;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::atomic::{AtomicU64, Ordering};

    fn csv_header() -> String {
        HeaderSpec::standard().expected_header().join(",")
    }

    fn good_row(id: &str) -> String {
        format!("{id},12 Oke Rd,0803-000-0000,2023-01-15,BCG;HEP B,08:00-11:00,45.5,27,3")
    }

    #[test]
    fn empty_data_section_parses_to_nothing() {
        let text = format!("{}\n", csv_header());
        let (records, errors) =
            parse_registry_bytes(text.as_bytes(), &HeaderSpec::standard()).unwrap();
        assert!(records.is_empty() && errors.is_empty());
    }

    #[test]
    fn valid_rows_parse_and_bad_date_is_reported_not_dropped() {
        let mut text = format!("{}\n", csv_header());
        for i in 0..5 {
            text.push_str(&good_row(&format!("m{i}")));
            text.push('\n');
        }
        text.push_str("m5,addr,,15-01-2023,,,10,30,1\n"); // date not ISO-8601
        let (records, errors) =
            parse_registry_bytes(text.as_bytes(), &HeaderSpec::standard()).unwrap();
        assert_eq!(records.len(), 5);
        assert_eq!(errors.len(), 1);
        assert_eq!(errors[0].row, 6);
        assert!(errors[0].message.contains("birth date"));
    }

    #[test]
    fn record_fields_parse_correctly() {
        let text = format!("{}\n{}\n", csv_header(), good_row("m1"));
        let (records, _) = parse_registry_bytes(text.as_bytes(), &HeaderSpec::standard()).unwrap();
        let r = &records[0];
        assert_eq!(r.id, "m1");
        assert!(r.phone_reachable());
        assert_eq!(
            r.child_birth_date,
            NaiveDate::from_ymd_opt(2023, 1, 15).unwrap()
        );
        assert_eq!(r.received_doses, vec!["BCG", "HEP B"]);
        assert_eq!(r.availability, vec![DailyWindow::new(480, 660).unwrap()]);
        assert_eq!(
            r.features["household_income_usd"],
            FieldValue::Numeric(45.5)
        );
    }

    #[test]
    fn empty_availability_means_all_day_and_empty_phone_unreachable() {
        let text = format!("{}\nm1,addr,,2023-01-15,,,10,30,1\n", csv_header());
        let (records, errors) =
            parse_registry_bytes(text.as_bytes(), &HeaderSpec::standard()).unwrap();
        assert!(errors.is_empty());
        assert_eq!(records[0].availability, vec![DailyWindow::all_day()]);
        assert!(!records[0].phone_reachable());
    }

    #[test]
    fn header_mismatch_aborts() {
        let text = "id,address,phone\nm1,a,b\n";
        assert!(matches!(
            parse_registry_bytes(text.as_bytes(), &HeaderSpec::standard()),
            Err(IngestError::HeaderMismatch { .. })
        ));
    }

    #[test]
    fn more_than_ten_percent_malformed_aborts() {
        // 8 good + 2 bad out of 10 = 20% -> abort.
        let mut text = format!("{}\n", csv_header());
        for i in 0..8 {
            text.push_str(&good_row(&format!("m{i}")));
            text.push('\n');
        }
        text.push_str("x1,a,,bad-date,,,1,2,3\nx2,a,,also-bad,,,1,2,3\n");
        assert!(matches!(
            parse_registry_bytes(text.as_bytes(), &HeaderSpec::standard()),
            Err(IngestError::TooManyMalformed {
                malformed: 2,
                total: 10
            })
        ));

        // Exactly 10% (1 of 10) is tolerated.
        let mut text = format!("{}\n", csv_header());
        for i in 0..9 {
            text.push_str(&good_row(&format!("m{i}")));
            text.push('\n');
        }
        text.push_str("x1,a,,bad-date,,,1,2,3\n");
        let (records, errors) =
            parse_registry_bytes(text.as_bytes(), &HeaderSpec::standard()).unwrap();
        assert_eq!((records.len(), errors.len()), (9, 1));
    }

    #[test]
    fn categorical_columns_validate_their_label_set() {
        let spec = HeaderSpec {
            feature_columns: vec![ColumnSpec {
                name: "ward".into(),
                kind: ColumnKind::Categorical {
                    allowed: vec!["north".into(), "south".into()],
                },
            }],
        };
        let header = spec.expected_header().join(",");
        let text =
            format!("{header}\nm1,a,,2023-01-15,,,north\nm2,a,,2023-01-15,,,east\nm3,a,,2023-01-15,,,west\n");
        // 2 of 3 rows carry unknown labels -> abort.
        assert!(matches!(
            parse_registry_bytes(text.as_bytes(), &spec),
            Err(IngestError::TooManyMalformed { .. })
        ));
        // A single unknown label is reported, not fatal.
        let text = format!("{header}\nm1,a,,2023-01-15,,,north\nm2,a,,2023-01-15,,,east\n");
        let (records, errors) = parse_registry_bytes(text.as_bytes(), &spec).unwrap();
        assert_eq!((records.len(), errors.len()), (1, 1));
        assert!(errors[0].message.contains("east"));
        let text = format!("{header}\nm1,a,,2023-01-15,,,south\n");
        let (records, _) = parse_registry_bytes(text.as_bytes(), &spec).unwrap();
        assert_eq!(
            spec.numeric_value("ward", &records[0].features["ward"]),
            Some(1.0)
        );
    }

    fn synthetic_records(n: usize, seed: u64) -> Vec<RawRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let doses = ["BCG", "HEP B", "OPV 0", "PENT 1", "PCV 1", "OPV 1"];
        (0..n)
            .map(|i| {
                let received: Vec<String> = doses
                    .iter()
                    .filter(|_| rng.gen_bool(0.4))
                    .map(|s| s.to_string())
                    .collect();
                let availability = if rng.gen_bool(0.3) {
                    vec![DailyWindow::all_day()]
                } else {
                    let s = rng.gen_range(0..600u16);
                    let e = rng.gen_range(s..=1440u16);
                    vec![DailyWindow::new(s, e).unwrap()]
                };
                let mut features = BTreeMap::new();
                features.insert(
                    "household_income_usd".to_string(),
                    FieldValue::Numeric((rng.gen_range(3.0..250.0f64) * 100.0).round() / 100.0),
                );
                features.insert(
                    "mother_age_years".to_string(),
                    FieldValue::Numeric(rng.gen_range(15..49) as f64),
                );
                features.insert(
                    "children_count".to_string(),
                    FieldValue::Numeric(rng.gen_range(1..9) as f64),
                );
                RawRecord {
                    id: format!("m{i:04}"),
                    address: format!("{} Housing Unit {}", rng.gen_range(1..400), i),
                    phone: if rng.gen_bool(0.8) {
                        format!("080{:08}", rng.gen_range(0..100_000_000u64))
                    } else {
                        String::new()
                    },
                    child_birth_date: NaiveDate::from_ymd_opt(2022, 1, 1).unwrap()
                        + chrono::Duration::days(rng.gen_range(0..700)),
                    received_doses: received,
                    availability,
                    features,
                }
            })
            .collect()
    }

    #[test]
    fn thousand_row_emit_parse_round_trip_is_bit_identical() {
        let spec = HeaderSpec::standard();
        let records = synthetic_records(1000, 20_23);
        let bytes = emit_registry(&records, &spec).unwrap();
        let (parsed, errors) = parse_registry_bytes(&bytes, &spec).unwrap();
        assert!(errors.is_empty());
        assert_eq!(parsed, records);
        let again = emit_registry(&parsed, &spec).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn normalize_collapses_case_and_whitespace() {
        assert_eq!(normalize_address("  12A   Oke\t Road "), "12a oke road");
        assert_eq!(normalize_address("X"), "x");
        assert_eq!(normalize_address("   "), "");
    }

    #[test]
    fn synthetic_geocode_lands_inside_the_box_and_is_deterministic() {
        let bbox = default_city_bbox();
        let p = SyntheticGeocodeProvider::new(bbox);
        for i in 0..200 {
            let addr = format!("compound {i} near the market");
            let (lat, lon) = p.geocode(&addr).unwrap();
            assert!(bbox.contains(lat, lon), "({lat}, {lon}) escaped the box");
            assert_eq!(p.geocode(&addr).unwrap(), (lat, lon));
        }
    }

    #[test]
    fn cache_hit_skips_the_provider_and_persists_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("geocache.tsv");
        let provider = SyntheticGeocodeProvider::new(default_city_bbox());
        let ledger = QueryCostLedger::new(provider.cost_per_query_usd());
        {
            let cache = GeocodeCache::open(&path).unwrap();
            let first = geocode("12 Oke Road", &provider, &cache, &ledger).unwrap();
            assert_eq!(ledger.queries(), 1);
            let second = geocode("  12  OKE road ", &provider, &cache, &ledger).unwrap();
            assert_eq!(second, first);
            assert_eq!(ledger.queries(), 1, "normalized hit must be free");
        }
        // Reopen from disk: still a hit.
        let cache = GeocodeCache::open(&path).unwrap();
        assert_eq!(cache.len(), 1);
        geocode("12 oke road", &provider, &cache, &ledger).unwrap();
        assert_eq!(ledger.queries(), 1);
    }

    #[test]
    fn a_hundred_addresses_geocoded_twice_cost_exactly_one_hundred_calls() {
        let dir = tempfile::tempdir().unwrap();
        let cache = GeocodeCache::open(dir.path().join("c.tsv")).unwrap();
        let provider = SyntheticGeocodeProvider::new(default_city_bbox());
        let ledger = QueryCostLedger::new(0.005);
        for round in 0..2 {
            for i in 0..100 {
                geocode(&format!("house {i}"), &provider, &cache, &ledger).unwrap();
            }
            assert_eq!(ledger.queries(), 100, "after round {round}");
        }
    }

    #[test]
    fn empty_address_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let cache = GeocodeCache::open(dir.path().join("c.tsv")).unwrap();
        let provider = SyntheticGeocodeProvider::new(default_city_bbox());
        assert!(matches!(
            geocode("   ", &provider, &cache, &QueryCostLedger::new(0.0)),
            Err(IngestError::EmptyAddress)
        ));
    }

    /// Slow provider counting its own invocations, to prove concurrent
    /// requests for one address coalesce.
    struct CountingProvider {
        inner: SyntheticGeocodeProvider,
        calls: AtomicU64,
    }

    impl GeocodeProvider for CountingProvider {
        fn name(&self) -> &str {
            "synthetic"
        }
        fn cost_per_query_usd(&self) -> f64 {
            0.0
        }
        fn geocode(&self, normalized: &str) -> Result<(f64, f64), IngestError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(2));
            self.inner.geocode(normalized)
        }
    }

    #[test]
    fn concurrent_misses_for_one_address_make_one_provider_call() {
        let dir = tempfile::tempdir().unwrap();
        let cache = GeocodeCache::open(dir.path().join("c.tsv")).unwrap();
        let provider = CountingProvider {
            inner: SyntheticGeocodeProvider::new(default_city_bbox()),
            calls: AtomicU64::new(0),
        };
        let ledger = QueryCostLedger::new(0.0);
        std::thread::scope(|scope| {
            for _ in 0..8 {
                scope.spawn(|| {
                    for i in 0..10 {
                        geocode(&format!("shared address {i}"), &provider, &cache, &ledger)
                            .unwrap();
                    }
                });
            }
        });
        assert_eq!(provider.calls.load(Ordering::SeqCst), 10);
        assert_eq!(ledger.queries(), 10);
    }

    #[test]
    fn provider_failure_is_surfaced_and_not_cached() {
        struct FailingProvider;
        impl GeocodeProvider for FailingProvider {
            fn name(&self) -> &str {
                "failing"
            }
            fn cost_per_query_usd(&self) -> f64 {
                1.0
            }
            fn geocode(&self, _: &str) -> Result<(f64, f64), IngestError> {
                Err(IngestError::ProviderFailure {
                    provider: "failing".into(),
                    message: "quota exhausted".into(),
                })
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let cache = GeocodeCache::open(dir.path().join("c.tsv")).unwrap();
        let ledger = QueryCostLedger::new(1.0);
        assert!(geocode("somewhere", &FailingProvider, &cache, &ledger).is_err());
        assert_eq!(cache.len(), 0);
        // A retry with a healthy provider succeeds afterwards.
        let ok = SyntheticGeocodeProvider::new(default_city_bbox());
        geocode("somewhere", &ok, &cache, &ledger).unwrap();
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn provider_from_env_selects_and_rejects() {
        // Env vars are process-global: this is the only test touching it.
        std::env::remove_var(GEO_PROVIDER_ENV);
        assert_eq!(
            provider_from_env(default_city_bbox()).unwrap().name(),
            "synthetic"
        );
        std::env::set_var(GEO_PROVIDER_ENV, "synthetic");
        assert_eq!(
            provider_from_env(default_city_bbox()).unwrap().name(),
            "synthetic"
        );
        std::env::set_var(GEO_PROVIDER_ENV, "frobnicator");
        assert!(matches!(
            provider_from_env(default_city_bbox()),
            Err(IngestError::UnknownProvider(_))
        ));
        std::env::remove_var(GEO_PROVIDER_ENV);
    }

    #[test]
    fn cache_file_format_is_validated() {
        assert!(parse_cache_text("WRONG HEADER\n").is_err());
        assert!(parse_cache_text("").is_err());
        let good = format!("{CACHE_HEADER}\n00000000deadbeef\t7.3\t3.9\tsynthetic\t2026-01-01T00:00:00Z\n");
        let entries = parse_cache_text(&good).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].hash, 0xdeadbeef);
        let bad = format!("{CACHE_HEADER}\nnot-hex\t7.3\t3.9\tsynthetic\tt\n");
        assert!(parse_cache_text(&bad).is_err());
        let short = format!("{CACHE_HEADER}\nabc\t7.3\n");
        assert!(parse_cache_text(&short).is_err());
    }

    #[test]
    fn corrupt_cache_file_fails_to_open() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        std::fs::write(&path, "junk\n").unwrap();
        assert!(matches!(
            GeocodeCache::open(&path),
            Err(IngestError::BadCacheFile(_))
        ));
    }
}

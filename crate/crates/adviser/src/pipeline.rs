//! End-to-end orchestration: seven stages from raw registry rows to an
//! emitted field plan — ingest → eligibility → estimate → prune → routes →
//! solve → emit.
//!
//! Every stage persists its output under a run directory named by a hash of
//! the configuration, so any stage can be re-run on its own from the
//! persisted inputs and a crashed run resumes from the last completed
//! artifact. All randomness flows from the single config seed; two runs
//! with an identical config produce bit-identical artifacts. The only
//! exception is the `run-meta.json` sidecar, which records wall-clock stage
//! timings and is therefore excluded from determinism comparisons.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{
    eligible_beneficiaries, Beneficiary, BeneficiaryId, CenterId, DailyWindow,
    EligibleBeneficiary, HealthCenter, InterventionKind, TimeWindow, VaccineSchedule,
    DEFAULT_SERVICE_DEADLINE_MIN,
};
use crate::estimate::{FeatureVector, ModelSet};
use crate::ingest::{
    geocode, parse_registry, provider_from_env, FieldValue, GeocodeCache, HeaderSpec, RawRecord,
};
use crate::routing::{
    gls_generate, GlsParams, PickupCandidate, RoutePool, RoutingParams, VehicleSpec,
};
use crate::solver::{
    branch_and_bound, greedy_prune, kind_index, merge_plans, validate_plan, AllocationProblem,
    BeneficiaryNeeds, Capacities, Plan, RouteOption, SolveLimits, UnitCosts,
    DEFAULT_CALL_SLOTS, DEFAULT_NURSE_DRIVE_DAYS, DEFAULT_VEHICLE_LIMIT,
};
use crate::travel::{MatrixStore, QueryCostLedger, TravelTimeMatrix};

/// Stage names in execution order.
pub const STAGES: [&str; 7] = [
    "ingest",
    "eligibility",
    "estimate",
    "prune",
    "routes",
    "solve",
    "emit",
];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("unknown stage '{0}'; expected one of: ingest, eligibility, estimate, prune, routes, solve, emit")]
    UnknownStage(String),
    #[error("stage '{stage}' requires the '{artifact}' artifact; run that stage first (expected {path})")]
    MissingPredecessor {
        stage: &'static str,
        artifact: &'static str,
        path: PathBuf,
    },
    #[error("stage '{stage}' failed: {message}; completed artifacts remain in {run_dir} for resume")]
    Stage {
        stage: &'static str,
        message: String,
        run_dir: PathBuf,
    },
    #[error("plan failed validation with {count} violation(s), first: {first}")]
    Validation { count: usize, first: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    /// Process exit code for the CLI: 0 is success, 2 a validation problem
    /// (bad config or an invalid plan), 3 a stage failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_)
            | PipelineError::UnknownStage(_)
            | PipelineError::Validation { .. } => 2,
            PipelineError::MissingPredecessor { .. }
            | PipelineError::Stage { .. }
            | PipelineError::Io(_)
            | PipelineError::Json(_) => 3,
        }
    }
}

fn stage_err(stage: &'static str, run_dir: &Path, message: impl ToString) -> PipelineError {
    PipelineError::Stage {
        stage,
        message: message.to_string(),
        run_dir: run_dir.to_path_buf(),
    }
}

/// Inclusive planning window, the first of the two deployed parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodConfig {
    pub from: NaiveDate,
    pub to: NaiveDate,
}

impl PeriodConfig {
    pub fn window(&self) -> Result<TimeWindow, PipelineError> {
        TimeWindow::new(self.from, self.to).map_err(|e| PipelineError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostsConfig {
    pub phone_call: f64,
    pub travel_voucher: f64,
    pub vaccine_drive: f64,
}

impl Default for CostsConfig {
    fn default() -> Self {
        let c = UnitCosts::default();
        CostsConfig {
            phone_call: c.phone_call,
            travel_voucher: c.travel_voucher,
            vaccine_drive: c.vaccine_drive,
        }
    }
}

impl CostsConfig {
    pub fn unit_costs(&self) -> UnitCosts {
        UnitCosts {
            phone_call: self.phone_call,
            travel_voucher: self.travel_voucher,
            vaccine_drive: self.vaccine_drive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CapacitiesConfig {
    pub vehicles: usize,
    pub call_slots: usize,
    /// Nurse-days available for vaccination drives in the window; each day
    /// staffs one drive batch of up to twelve beneficiaries.
    pub nurse_drive_days: usize,
}

impl Default for CapacitiesConfig {
    fn default() -> Self {
        CapacitiesConfig {
            vehicles: DEFAULT_VEHICLE_LIMIT,
            call_slots: DEFAULT_CALL_SLOTS,
            nurse_drive_days: DEFAULT_NURSE_DRIVE_DAYS,
        }
    }
}

impl CapacitiesConfig {
    pub fn capacities(&self) -> Capacities {
        let mut c = Capacities::with_nurse_days(self.nurse_drive_days);
        c.vehicles = self.vehicles;
        c.call_slots = self.call_slots;
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    /// Fraction of the budget the greedy pre-pass may commit to drives.
    pub budget_fraction: f64,
    /// Success-to-cost dominance threshold; `None` derives it from the data.
    pub ratio_threshold: Option<f64>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            budget_fraction: 0.5,
            ratio_threshold: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlsRunConfig {
    pub iterations: usize,
    pub pool_cap: usize,
    /// Arc-penalty weight; `None` derives it from mean arc time.
    pub lambda: Option<f64>,
    /// At most this many pickup candidates (highest need first) are offered
    /// to the route search; keeps insertion scans tractable at scale.
    pub candidate_cap: usize,
}

impl Default for GlsRunConfig {
    fn default() -> Self {
        GlsRunConfig {
            iterations: 500,
            pool_cap: 200,
            lambda: None,
            candidate_cap: 400,
        }
    }
}

/// Default node budget for the exact search. Large instances with tight
/// budgets are genuinely exponential to prove optimal, so an uncapped
/// default can hang a plain `plan` invocation; truncating by node count
/// keeps reruns bit-identical (unlike a wall-clock cap) and reports the
/// optimality gap instead.
pub const DEFAULT_NODE_CAP: u64 = 500_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BnbConfig {
    /// Node budget for the exact search; raise it to push the solve
    /// toward proven optimality.
    pub node_cap: Option<u64>,
    /// Wall-clock cap in seconds. Setting this trades the bit-identical
    /// rerun guarantee for bounded latency.
    pub time_cap_secs: Option<u64>,
}

impl Default for BnbConfig {
    fn default() -> Self {
        BnbConfig {
            node_cap: Some(DEFAULT_NODE_CAP),
            time_cap_secs: None,
        }
    }
}

/// A named map location: a health center or a vehicle depot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteConfig {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    /// Centers only: latest arrival minute still served (default 11:00).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline_min: Option<u16>,
}

/// Everything a run needs. Field staff choose only `period` and `budget`
/// (plus optionally the seed); the rest is deployment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub period: PeriodConfig,
    pub budget: f64,
    #[serde(default)]
    pub seed: u64,
    /// Registry CSV path.
    pub registry: PathBuf,
    /// Trained model-set JSON path.
    pub model: PathBuf,
    /// Travel-time matrix store directory.
    pub matrix: PathBuf,
    #[serde(default = "default_matrix_period")]
    pub matrix_period: String,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Geocode cache location; defaults to `<out_dir>/geocache.json`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geocache: Option<PathBuf>,
    #[serde(default)]
    pub costs: CostsConfig,
    #[serde(default)]
    pub capacities: CapacitiesConfig,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default)]
    pub gls: GlsRunConfig,
    #[serde(default)]
    pub bnb: BnbConfig,
    pub centers: Vec<SiteConfig>,
    #[serde(default)]
    pub vehicles: Vec<SiteConfig>,
}

fn default_matrix_period() -> String {
    "offpeak".to_string()
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl PipelineConfig {
    /// Parses TOML and resolves relative paths against `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let mut cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.check()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.registry,
            &mut self.model,
            &mut self.matrix,
            &mut self.out_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&p);
            }
        }
        if let Some(g) = &mut self.geocache {
            if g.is_relative() {
                *g = base.join(&g);
            }
        }
    }

    /// Validates the config: sane numbers, window ordered, inputs present.
    pub fn check(&self) -> Result<(), PipelineError> {
        self.period.window()?;
        if !(self.budget.is_finite() && self.budget >= 0.0) {
            return Err(PipelineError::Config(format!(
                "budget {} must be finite and ≥ 0",
                self.budget
            )));
        }
        if !(0.0..=1.0).contains(&self.prune.budget_fraction) {
            return Err(PipelineError::Config(format!(
                "prune.budget_fraction {} outside [0, 1]",
                self.prune.budget_fraction
            )));
        }
        if self.centers.is_empty() {
            return Err(PipelineError::Config(
                "at least one health center is required".to_string(),
            ));
        }
        for (name, path) in [
            ("registry", &self.registry),
            ("model", &self.model),
            ("matrix", &self.matrix),
        ] {
            if !path.exists() {
                return Err(PipelineError::Config(format!(
                    "{name} path {} does not exist",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    /// Hash identifying this configuration; names the run directory so
    /// equal configs share artifacts and changed configs never collide.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        hex[..16].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(format!("run-{}", self.config_hash()))
    }

    fn geocache_path(&self) -> PathBuf {
        self.geocache
            .clone()
            .unwrap_or_else(|| self.out_dir.join("geocache.json"))
    }
}

/// Output of the ingest stage: geocoded, featurized registry rows plus the
/// parse and geocode tallies the final report carries forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestArtifact {
    pub beneficiaries: Vec<Beneficiary>,
    /// Rows parsed successfully.
    pub parsed: usize,
    /// Rows rejected with a row-level error.
    pub malformed: usize,
    /// Rows whose address did not resolve to a covered grid cell; they stay
    /// in the registry but only non-travel interventions apply.
    pub unresolved_addresses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedsArtifact {
    pub needs: Vec<BeneficiaryNeeds>,
}

/// Output of the prune stage: the greedy pre-assignment, the reduced
/// problem the exact solver sees, and the untouched original for merging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneArtifact {
    pub partial: Plan,
    pub reduced: AllocationProblem,
    pub original: AllocationProblem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionArtifact {
    pub plan: Plan,
    pub optimal: bool,
    pub gap: f64,
    pub nodes_expanded: u64,
    pub incumbent_updates: u64,
}

/// Summary of one pipeline run. Serialized to `report.json` without the
/// wall-clock timings, which go to the `run-meta.json` sidecar so repeated
/// runs of one config stay bit-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub period: PeriodConfig,
    pub budget: f64,
    pub seed: u64,
    pub parsed: usize,
    pub malformed: usize,
    pub unresolved_addresses: usize,
    pub eligible: usize,
    pub pruned: usize,
    pub routes_generated: usize,
    pub nodes_explored: u64,
    pub optimal: bool,
    pub gap: f64,
    pub objective: f64,
    pub baseline_objective: f64,
    pub total_cost: f64,
    pub assignments: usize,
    /// Plan file name inside the run directory.
    pub plan_file: String,
    /// Seconds per stage; in-memory only (see the sidecar note above).
    #[serde(skip_serializing, default)]
    pub timings_sec: BTreeMap<String, f64>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_os_string();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn require<T: serde::de::DeserializeOwned>(
    stage: &'static str,
    artifact: &'static str,
    path: PathBuf,
) -> Result<T, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingPredecessor {
            stage,
            artifact,
            path,
        });
    }
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| {
        stage_err(
            stage,
            path.parent().unwrap_or_else(|| Path::new(".")),
            format!("corrupt '{artifact}' artifact {}: {e}", path.display()),
        )
    })
}

fn load_matrix(
    cfg: &PipelineConfig,
    stage: &'static str,
    dir: &Path,
) -> Result<TravelTimeMatrix, PipelineError> {
    let store = MatrixStore::open(&cfg.matrix).map_err(|e| stage_err(stage, dir, e))?;
    match store.load(&cfg.matrix_period) {
        Ok(Some(m)) => Ok(m),
        Ok(None) => Err(stage_err(
            stage,
            dir,
            format!(
                "no travel matrix for period '{}' in {}; build the grid first",
                cfg.matrix_period,
                cfg.matrix.display()
            ),
        )),
        Err(e) => Err(stage_err(stage, dir, e)),
    }
}

fn snap_centers(
    cfg: &PipelineConfig,
    matrix: &TravelTimeMatrix,
    stage: &'static str,
    dir: &Path,
) -> Result<Vec<HealthCenter>, PipelineError> {
    cfg.centers
        .iter()
        .map(|s| {
            let cell = matrix
                .grid()
                .snap_to_cell(s.lat, s.lon)
                .map_err(|e| stage_err(stage, dir, format!("center '{}': {e}", s.id)))?;
            Ok(HealthCenter {
                id: CenterId(s.id.clone()),
                cell,
                service_deadline_min: s.deadline_min.unwrap_or(DEFAULT_SERVICE_DEADLINE_MIN),
            })
        })
        .collect()
}

/// Worst known travel time from any covered cell to its nearest center;
/// stands in as the distance feature when an address cannot be resolved.
fn unresolved_distance_min(matrix: &TravelTimeMatrix, centers: &[HealthCenter]) -> f64 {
    matrix
        .cells()
        .iter()
        .filter_map(|&c| {
            centers
                .iter()
                .filter_map(|hc| matrix.travel_time(c, hc.cell).ok())
                .min()
        })
        .max()
        .map(f64::from)
        .unwrap_or(0.0)
}

fn numeric_feature(
    rec: &RawRecord,
    name: &str,
    stage: &'static str,
    dir: &Path,
) -> Result<f64, PipelineError> {
    match rec.features.get(name) {
        Some(FieldValue::Numeric(v)) => Ok(*v),
        other => Err(stage_err(
            stage,
            dir,
            format!("row '{}': feature '{name}' missing or non-numeric ({other:?})", rec.id),
        )),
    }
}

fn problem_from_parts(
    needs: Vec<BeneficiaryNeeds>,
    routes: Vec<RouteOption>,
    budget: f64,
    costs: UnitCosts,
    capacities: Capacities,
) -> Result<AllocationProblem, crate::solver::SolverError> {
    let mut p = AllocationProblem::new(needs, routes, budget)?;
    p.costs = costs;
    p.capacities = capacities;
    p.validate()?;
    Ok(p)
}

fn stage_ingest(cfg: &PipelineConfig, dir: &Path) -> Result<PathBuf, PipelineError> {
    const STAGE: &str = "ingest";
    let (records, row_errors) = parse_registry(&cfg.registry, &HeaderSpec::standard())
        .map_err(|e| stage_err(STAGE, dir, e))?;
    let matrix = load_matrix(cfg, STAGE, dir)?;
    let centers = snap_centers(cfg, &matrix, STAGE, dir)?;
    let schedule = VaccineSchedule::default_schedule();
    let provider =
        provider_from_env(matrix.grid().bbox).map_err(|e| stage_err(STAGE, dir, e))?;
    let cache =
        GeocodeCache::open(cfg.geocache_path()).map_err(|e| stage_err(STAGE, dir, e))?;
    let ledger = QueryCostLedger::new(0.0);
    let fallback_distance = unresolved_distance_min(&matrix, &centers);

    let mut beneficiaries = Vec::with_capacity(records.len());
    let mut unresolved = 0usize;
    for rec in &records {
        let snapped = geocode(&rec.address, provider.as_ref(), &cache, &ledger)
            .ok()
            .and_then(|(lat, lon)| matrix.grid().snap_to_cell(lat, lon).ok())
            .filter(|c| matrix.covers(*c));
        let (home_cell, distance_min) = match snapped {
            Some(cell) => {
                let nearest = centers
                    .iter()
                    .filter_map(|hc| matrix.travel_time(cell, hc.cell).ok())
                    .min();
                match nearest {
                    Some(d) => (Some(cell), f64::from(d)),
                    None => (None, fallback_distance),
                }
            }
            None => (None, fallback_distance),
        };
        if home_cell.is_none() {
            unresolved += 1;
        }
        let received: std::collections::BTreeSet<String> =
            rec.received_doses.iter().cloned().collect();
        let completion = schedule
            .doses
            .iter()
            .filter(|d| received.contains(&d.name))
            .count() as f64
            / schedule.doses.len() as f64;
        let features = FeatureVector::new(vec![
            numeric_feature(rec, "household_income_usd", STAGE, dir)?,
            numeric_feature(rec, "mother_age_years", STAGE, dir)?,
            numeric_feature(rec, "children_count", STAGE, dir)?,
            completion,
            distance_min,
        ]);
        beneficiaries.push(Beneficiary {
            id: BeneficiaryId::new(rec.id.clone()),
            features,
            home_cell,
            child_birth_date: rec.child_birth_date,
            received_doses: received,
            availability: rec.availability.clone(),
            phone_reachable: rec.phone_reachable(),
        });
    }

    let artifact = IngestArtifact {
        parsed: beneficiaries.len(),
        malformed: row_errors.len(),
        unresolved_addresses: unresolved,
        beneficiaries,
    };
    let path = dir.join("ingest.json");
    write_json(&path, &artifact)?;
    Ok(path)
}

fn stage_eligibility(cfg: &PipelineConfig, dir: &Path) -> Result<PathBuf, PipelineError> {
    const STAGE: &str = "eligibility";
    let ing: IngestArtifact = require(STAGE, "ingest", dir.join("ingest.json"))?;
    let window = cfg.period.window()?;
    let eligible = eligible_beneficiaries(
        &ing.beneficiaries,
        VaccineSchedule::default_schedule(),
        &window,
    )
    .map_err(|e| stage_err(STAGE, dir, e))?;
    let path = dir.join("eligibility.json");
    write_json(&path, &eligible)?;
    Ok(path)
}

fn stage_estimate(cfg: &PipelineConfig, dir: &Path) -> Result<PathBuf, PipelineError> {
    const STAGE: &str = "estimate";
    let eligible: Vec<EligibleBeneficiary> =
        require(STAGE, "eligibility", dir.join("eligibility.json"))?;
    let model_text =
        std::fs::read_to_string(&cfg.model).map_err(|e| stage_err(STAGE, dir, e))?;
    let models = ModelSet::from_json_str(&model_text).map_err(|e| stage_err(STAGE, dir, e))?;

    let mut needs = Vec::with_capacity(eligible.len());
    for e in &eligible {
        let b = &e.beneficiary;
        let baseline = models
            .predict_baseline(&b.features)
            .map_err(|err| stage_err(STAGE, dir, format!("{}: {err}", b.id)))?;
        let mut success = [None; 4];
        for kind in InterventionKind::ALL {
            if b.intervention_applies(kind) {
                let p = models
                    .predict_kind(kind, &b.features)
                    .map_err(|err| stage_err(STAGE, dir, format!("{}: {err}", b.id)))?;
                success[kind_index(kind)] = Some(p);
            }
        }
        needs.push(BeneficiaryNeeds {
            id: b.id.clone(),
            baseline,
            success,
            home_cell: b.home_cell,
        });
    }
    let path = dir.join("needs.json");
    write_json(&path, &NeedsArtifact { needs })?;
    Ok(path)
}

fn stage_prune(cfg: &PipelineConfig, dir: &Path) -> Result<PathBuf, PipelineError> {
    const STAGE: &str = "prune";
    let needs: NeedsArtifact = require(STAGE, "needs", dir.join("needs.json"))?;
    let original = problem_from_parts(
        needs.needs,
        Vec::new(),
        cfg.budget,
        cfg.costs.unit_costs(),
        cfg.capacities.capacities(),
    )
    .map_err(|e| stage_err(STAGE, dir, e))?;
    let (partial, reduced) =
        greedy_prune(&original, cfg.prune.ratio_threshold, cfg.prune.budget_fraction)
            .map_err(|e| stage_err(STAGE, dir, e))?;
    let path = dir.join("prune.json");
    write_json(
        &path,
        &PruneArtifact {
            partial,
            reduced,
            original,
        },
    )?;
    Ok(path)
}

fn stage_routes(cfg: &PipelineConfig, dir: &Path) -> Result<PathBuf, PipelineError> {
    const STAGE: &str = "routes";
    let pr: PruneArtifact = require(STAGE, "prune", dir.join("prune.json"))?;
    let eligible: Vec<EligibleBeneficiary> =
        require(STAGE, "eligibility", dir.join("eligibility.json"))?;
    let path = dir.join("pool.jsonl");

    let availability: BTreeMap<&BeneficiaryId, &Vec<DailyWindow>> = eligible
        .iter()
        .map(|e| (&e.beneficiary.id, &e.beneficiary.availability))
        .collect();

    // Highest-need pickup candidates first, capped, then restored to id
    // order so the search sees a stable input.
    let pickup = InterventionKind::PickupService;
    let mut ranked: Vec<&BeneficiaryNeeds> = pr
        .reduced
        .beneficiaries
        .iter()
        .filter(|b| {
            b.home_cell.is_some() && b.need(pickup).map(|g| g > 0.0).unwrap_or(false)
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.need(pickup)
            .partial_cmp(&a.need(pickup))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.id.cmp(&b.id))
    });
    ranked.truncate(cfg.gls.candidate_cap);
    ranked.sort_by(|a, b| a.id.cmp(&b.id));

    let mut candidates = Vec::with_capacity(ranked.len());
    for b in ranked {
        let windows = availability.get(&b.id).ok_or_else(|| {
            stage_err(
                STAGE,
                dir,
                format!("candidate '{}' missing from the eligibility artifact", b.id),
            )
        })?;
        candidates.push(PickupCandidate {
            id: b.id.clone(),
            cell: b.home_cell.expect("filtered on home_cell"),
            availability: (*windows).clone(),
            need: b.need(pickup).expect("filtered on need"),
        });
    }

    if candidates.is_empty() || cfg.vehicles.is_empty() {
        RoutePool { routes: Vec::new() }
            .save(&path)
            .map_err(|e| stage_err(STAGE, dir, e))?;
        return Ok(path);
    }

    let matrix = load_matrix(cfg, STAGE, dir)?;
    let centers = snap_centers(cfg, &matrix, STAGE, dir)?;
    let vehicles: Vec<VehicleSpec> = cfg
        .vehicles
        .iter()
        .map(|s| {
            let cell = matrix
                .grid()
                .snap_to_cell(s.lat, s.lon)
                .map_err(|e| stage_err(STAGE, dir, format!("vehicle '{}': {e}", s.id)))?;
            Ok(VehicleSpec::new(s.id.clone(), cell))
        })
        .collect::<Result<_, PipelineError>>()?;

    let params = GlsParams {
        iterations: cfg.gls.iterations,
        lambda: cfg.gls.lambda,
        pool_cap: cfg.gls.pool_cap,
        seed: cfg.seed,
    };
    let pool = gls_generate(
        &candidates,
        &matrix,
        &vehicles,
        &centers,
        &RoutingParams::default(),
        &params,
    )
    .map_err(|e| stage_err(STAGE, dir, e))?;
    pool.save(&path).map_err(|e| stage_err(STAGE, dir, e))?;
    Ok(path)
}

fn stage_solve(cfg: &PipelineConfig, dir: &Path) -> Result<PathBuf, PipelineError> {
    const STAGE: &str = "solve";
    let pr: PruneArtifact = require(STAGE, "prune", dir.join("prune.json"))?;
    let pool_path = dir.join("pool.jsonl");
    if !pool_path.exists() {
        return Err(PipelineError::MissingPredecessor {
            stage: STAGE,
            artifact: "pool",
            path: pool_path,
        });
    }
    let pool = RoutePool::load(&pool_path).map_err(|e| stage_err(STAGE, dir, e))?;
    let routes = RouteOption::from_pool(&pool);

    let reduced = problem_from_parts(
        pr.reduced.beneficiaries.clone(),
        routes.clone(),
        pr.reduced.budget,
        pr.reduced.costs,
        pr.reduced.capacities,
    )
    .map_err(|e| stage_err(STAGE, dir, e))?;
    let limits = SolveLimits {
        node_cap: cfg.bnb.node_cap,
        time_cap: cfg.bnb.time_cap_secs.map(Duration::from_secs),
    };
    let outcome = branch_and_bound(&reduced, limits).map_err(|e| stage_err(STAGE, dir, e))?;

    let full = problem_from_parts(
        pr.original.beneficiaries.clone(),
        routes,
        pr.original.budget,
        pr.original.costs,
        pr.original.capacities,
    )
    .map_err(|e| stage_err(STAGE, dir, e))?;
    let plan = merge_plans(&full, &pr.partial, &outcome.plan);

    let path = dir.join("solution.json");
    write_json(
        &path,
        &SolutionArtifact {
            plan,
            optimal: outcome.optimal,
            gap: outcome.gap,
            nodes_expanded: outcome.stats.nodes_expanded,
            incumbent_updates: outcome.stats.incumbent_updates,
        },
    )?;
    Ok(path)
}

fn stage_emit(cfg: &PipelineConfig, dir: &Path) -> Result<(PathBuf, Plan, RunReport), PipelineError> {
    const STAGE: &str = "emit";
    let sol: SolutionArtifact = require(STAGE, "solution", dir.join("solution.json"))?;
    let pr: PruneArtifact = require(STAGE, "prune", dir.join("prune.json"))?;
    let ing: IngestArtifact = require(STAGE, "ingest", dir.join("ingest.json"))?;
    let eligible: Vec<EligibleBeneficiary> =
        require(STAGE, "eligibility", dir.join("eligibility.json"))?;
    let pool_path = dir.join("pool.jsonl");
    if !pool_path.exists() {
        return Err(PipelineError::MissingPredecessor {
            stage: STAGE,
            artifact: "pool",
            path: pool_path,
        });
    }
    let pool = RoutePool::load(&pool_path).map_err(|e| stage_err(STAGE, dir, e))?;

    let full = problem_from_parts(
        pr.original.beneficiaries.clone(),
        RouteOption::from_pool(&pool),
        pr.original.budget,
        pr.original.costs,
        pr.original.capacities,
    )
    .map_err(|e| stage_err(STAGE, dir, e))?;
    let verdict = validate_plan(&sol.plan, &full);
    if !verdict.is_valid() {
        return Err(PipelineError::Validation {
            count: verdict.violations.len(),
            first: verdict.violations[0].to_string(),
        });
    }

    let plan_path = dir.join("plan.json");
    emit_plan(&sol.plan, EmitFormat::Json, &plan_path, Some(&pool))?;
    emit_plan(
        &sol.plan,
        EmitFormat::CsvFieldsheet,
        &dir.join("fieldsheet.csv"),
        Some(&pool),
    )?;

    let report = RunReport {
        config_hash: cfg.config_hash(),
        period: cfg.period,
        budget: cfg.budget,
        seed: cfg.seed,
        parsed: ing.parsed,
        malformed: ing.malformed,
        unresolved_addresses: ing.unresolved_addresses,
        eligible: eligible.len(),
        pruned: pr.partial.assignments.len(),
        routes_generated: pool.routes.len(),
        nodes_explored: sol.nodes_expanded,
        optimal: sol.optimal,
        gap: sol.gap,
        objective: sol.plan.objective,
        baseline_objective: full.baseline_objective(),
        total_cost: sol.plan.total_cost,
        assignments: sol.plan.assignments.len(),
        plan_file: "plan.json".to_string(),
        timings_sec: BTreeMap::new(),
    };
    write_json(&dir.join("report.json"), &report)?;
    Ok((plan_path, sol.plan, report))
}

/// Runs exactly one named stage from persisted predecessor artifacts and
/// returns the path of the artifact it wrote.
pub fn stage(name: &str, cfg: &PipelineConfig) -> Result<PathBuf, PipelineError> {
    cfg.check()?;
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir)?;
    match name {
        "ingest" => stage_ingest(cfg, &dir),
        "eligibility" => stage_eligibility(cfg, &dir),
        "estimate" => stage_estimate(cfg, &dir),
        "prune" => stage_prune(cfg, &dir),
        "routes" => stage_routes(cfg, &dir),
        "solve" => stage_solve(cfg, &dir),
        "emit" => stage_emit(cfg, &dir).map(|(path, _, _)| path),
        other => Err(PipelineError::UnknownStage(other.to_string())),
    }
}

/// Runs all seven stages in order, persisting every artifact, and returns
/// the final plan and report (with in-memory stage timings attached).
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<(Plan, RunReport), PipelineError> {
    cfg.check()?;
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir)?;

    let mut timings = BTreeMap::new();
    let mut finished: Option<(Plan, RunReport)> = None;
    for name in STAGES {
        let started = Instant::now();
        match name {
            "ingest" => {
                stage_ingest(cfg, &dir)?;
            }
            "eligibility" => {
                stage_eligibility(cfg, &dir)?;
            }
            "estimate" => {
                stage_estimate(cfg, &dir)?;
            }
            "prune" => {
                stage_prune(cfg, &dir)?;
            }
            "routes" => {
                stage_routes(cfg, &dir)?;
            }
            "solve" => {
                stage_solve(cfg, &dir)?;
            }
            "emit" => {
                let (_, plan, report) = stage_emit(cfg, &dir)?;
                finished = Some((plan, report));
            }
            _ => unreachable!("STAGES is exhaustive"),
        }
        timings.insert(name.to_string(), started.elapsed().as_secs_f64());
    }

    let (plan, mut report) = finished.expect("emit ran");
    report.timings_sec = timings.clone();
    let meta = serde_json::json!({ "timings_sec": timings });
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    write_atomic(&dir.join("run-meta.json"), text.as_bytes())?;
    Ok((plan, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitFormat {
    Json,
    CsvFieldsheet,
}

/// Canonical plan JSON: pretty-printed, trailing newline. Emitting, parsing
/// and emitting again is byte-identical.
pub fn plan_to_json(plan: &Plan) -> String {
    let mut text = serde_json::to_string_pretty(plan).expect("plan serializes");
    text.push('\n');
    text
}

/// One row per assignment, ordered by route then intervention kind: pickup
/// routes first (members contiguous in stop order), then phone calls,
/// travel vouchers, and drive batches. Headers are present even when empty.
pub fn fieldsheet_csv(plan: &Plan, pool: Option<&RoutePool>) -> Result<String, PipelineError> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record([
        "section",
        "sequence",
        "beneficiary",
        "intervention",
        "route",
        "vehicle",
        "cell",
        "batch",
    ])
    .map_err(|e| PipelineError::Config(e.to_string()))?;

    let mut write_row = |section: &str,
                         sequence: usize,
                         beneficiary: &str,
                         intervention: &str,
                         route: String,
                         vehicle: &str,
                         cell: String,
                         batch: String|
     -> Result<(), PipelineError> {
        wtr.write_record([
            section,
            &sequence.to_string(),
            beneficiary,
            intervention,
            &route,
            vehicle,
            &cell,
            &batch,
        ])
        .map_err(|e| PipelineError::Config(e.to_string()))
    };

    // Pickup routes, members in stop order.
    for &rid in &plan.routes {
        let mut members: Vec<&crate::solver::Assignment> = plan
            .assignments
            .iter()
            .filter(|a| a.kind == InterventionKind::PickupService && a.route == Some(rid))
            .collect();
        let route = pool.and_then(|p| p.routes.get(rid));
        if let Some(r) = route {
            let order: BTreeMap<&str, usize> = r
                .stops
                .iter()
                .filter(|s| s.kind == crate::routing::StopKind::Pickup)
                .enumerate()
                .map(|(i, s)| (s.who.as_str(), i))
                .collect();
            members.sort_by_key(|a| {
                (
                    order.get(a.beneficiary.as_str()).copied().unwrap_or(usize::MAX),
                    a.beneficiary.clone(),
                )
            });
        } else {
            members.sort_by(|a, b| a.beneficiary.cmp(&b.beneficiary));
        }
        let section = format!("route-{rid}");
        let vehicle = route.map(|r| r.vehicle.as_str()).unwrap_or("");
        for (i, a) in members.iter().enumerate() {
            let cell = route
                .and_then(|r| {
                    r.stops
                        .iter()
                        .find(|s| {
                            s.kind == crate::routing::StopKind::Pickup
                                && s.who == a.beneficiary.as_str()
                        })
                        .map(|s| format!("{},{}", s.cell.x, s.cell.y))
                })
                .unwrap_or_default();
            write_row(
                &section,
                i + 1,
                a.beneficiary.as_str(),
                a.kind.label(),
                rid.to_string(),
                vehicle,
                cell,
                String::new(),
            )?;
        }
    }

    for kind in [InterventionKind::PhoneCall, InterventionKind::TravelVoucher] {
        let section = match kind {
            InterventionKind::PhoneCall => "calls",
            _ => "vouchers",
        };
        let mut rows: Vec<&crate::solver::Assignment> =
            plan.assignments.iter().filter(|a| a.kind == kind).collect();
        rows.sort_by(|a, b| a.beneficiary.cmp(&b.beneficiary));
        for (i, a) in rows.iter().enumerate() {
            write_row(
                section,
                i + 1,
                a.beneficiary.as_str(),
                a.kind.label(),
                String::new(),
                "",
                String::new(),
                String::new(),
            )?;
        }
    }

    for batch in &plan.drive_batches {
        let section = format!("drive-batch-{}", batch.id);
        for (i, id) in batch.members.iter().enumerate() {
            write_row(
                &section,
                i + 1,
                id.as_str(),
                InterventionKind::VaccineDrive.label(),
                String::new(),
                "",
                String::new(),
                batch.id.to_string(),
            )?;
        }
    }

    let bytes = wtr
        .into_inner()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| PipelineError::Config(e.to_string()))
}

/// Writes the plan to `dest` in the requested format. The route pool, when
/// given, supplies vehicle ids and stop order for the fieldsheet.
pub fn emit_plan(
    plan: &Plan,
    format: EmitFormat,
    dest: &Path,
    pool: Option<&RoutePool>,
) -> Result<(), PipelineError> {
    let text = match format {
        EmitFormat::Json => plan_to_json(plan),
        EmitFormat::CsvFieldsheet => fieldsheet_csv(plan, pool)?,
    };
    write_atomic(dest, text.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CellId, VehicleId};
    use crate::routing::{Route, Stop, StopKind};
    use crate::solver::{Assignment, DriveBatch};

    fn touched_config(dir: &Path) -> PipelineConfig {
        std::fs::write(dir.join("registry.csv"), "").unwrap();
        std::fs::write(dir.join("models.json"), "{}").unwrap();
        std::fs::create_dir_all(dir.join("matrix")).unwrap();
        let text = format!(
            r#"
period = {{ from = "2026-08-01", to = "2026-09-30" }}
budget = 250.0
seed = 9
registry = "registry.csv"
model = "models.json"
matrix = "matrix"
out_dir = "runs"

[[centers]]
id = "hc-1"
lat = 7.31
lon = 3.81
"#
        );
        PipelineConfig::from_toml_str(&text, dir).unwrap()
    }

    #[test]
    fn toml_config_applies_defaults_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = touched_config(dir.path());
        assert_eq!(cfg.matrix_period, "offpeak");
        assert_eq!(cfg.costs.unit_costs(), UnitCosts::default());
        assert_eq!(cfg.capacities.capacities(), Capacities::default());
        assert_eq!(cfg.prune.budget_fraction, 0.5);
        assert_eq!(cfg.gls.iterations, 500);
        assert!(cfg.registry.is_absolute() || cfg.registry.starts_with(dir.path()));
        assert_eq!(cfg.registry, dir.path().join("registry.csv"));
    }

    #[test]
    fn config_hash_is_stable_and_sensitive_to_budget() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = touched_config(dir.path());
        let again = touched_config(dir.path());
        assert_eq!(cfg.config_hash(), again.config_hash());
        let mut other = cfg.clone();
        other.budget = 251.0;
        assert_ne!(cfg.config_hash(), other.config_hash());
        assert!(cfg
            .run_dir()
            .file_name()
            .unwrap()
            .to_string_lossy()
            .starts_with("run-"));
    }

    #[test]
    fn negative_budget_and_missing_inputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = touched_config(dir.path());
        cfg.budget = -1.0;
        assert!(matches!(cfg.check(), Err(PipelineError::Config(_))));
        let mut cfg = touched_config(dir.path());
        cfg.registry = dir.path().join("nope.csv");
        let err = cfg.check().unwrap_err();
        assert!(err.to_string().contains("registry"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_stage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = touched_config(dir.path());
        let err = stage("fit", &cfg).unwrap_err();
        assert!(matches!(err, PipelineError::UnknownStage(_)));
    }

    #[test]
    fn estimate_without_eligibility_names_the_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = touched_config(dir.path());
        let err = stage("estimate", &cfg).unwrap_err();
        match &err {
            PipelineError::MissingPredecessor { stage, artifact, .. } => {
                assert_eq!(*stage, "estimate");
                assert_eq!(*artifact, "eligibility");
            }
            other => panic!("expected missing predecessor, got {other:?}"),
        }
        assert!(err.to_string().contains("eligibility"));
        assert_eq!(err.exit_code(), 3);
    }

    fn stop(kind: StopKind, who: &str, cell: CellId) -> Stop {
        Stop {
            kind,
            who: who.to_string(),
            cell,
            arrival_min: 500,
            service_min: 500,
        }
    }

    #[test]
    fn fieldsheet_groups_route_members_in_stop_order() {
        let pool = RoutePool {
            routes: vec![
                Route {
                    vehicle: VehicleId::new("veh-A"),
                    center: Some(CenterId::new("hc-1")),
                    stops: vec![
                        stop(StopKind::Pickup, "b2", CellId::new(3, 1)),
                        stop(StopKind::Pickup, "b1", CellId::new(2, 2)),
                        stop(StopKind::Center, "hc-1", CellId::new(0, 0)),
                    ],
                    served: vec![BeneficiaryId::new("b2"), BeneficiaryId::new("b1")],
                    value: 0.4,
                    cost: 30.0,
                },
                Route {
                    vehicle: VehicleId::new("veh-B"),
                    center: Some(CenterId::new("hc-1")),
                    stops: vec![
                        stop(StopKind::Pickup, "b9", CellId::new(5, 5)),
                        stop(StopKind::Center, "hc-1", CellId::new(0, 0)),
                    ],
                    served: vec![BeneficiaryId::new("b9")],
                    value: 0.2,
                    cost: 25.0,
                },
            ],
        };
        let assignment = |id: &str, kind, route, batch| Assignment {
            beneficiary: BeneficiaryId::new(id),
            kind,
            route,
            batch,
        };
        let plan = Plan {
            assignments: vec![
                assignment("b0", InterventionKind::PhoneCall, None, None),
                assignment("b1", InterventionKind::PickupService, Some(0), None),
                assignment("b2", InterventionKind::PickupService, Some(0), None),
                assignment("b5", InterventionKind::TravelVoucher, None, None),
                assignment("b7", InterventionKind::VaccineDrive, None, Some(0)),
                assignment("b9", InterventionKind::PickupService, Some(1), None),
            ],
            routes: vec![0, 1],
            drive_batches: vec![DriveBatch {
                id: 0,
                members: vec![BeneficiaryId::new("b7")],
            }],
            total_cost: 77.6,
            objective: 2.0,
        };
        let sheet = fieldsheet_csv(&plan, Some(&pool)).unwrap();
        let lines: Vec<&str> = sheet.lines().collect();
        assert_eq!(
            lines[0],
            "section,sequence,beneficiary,intervention,route,vehicle,cell,batch"
        );
        // Route members contiguous, ordered by stop sequence (b2 before b1).
        assert!(lines[1].starts_with("route-0,1,b2,pickup_service,0,veh-A,\"3,1\""));
        assert!(lines[2].starts_with("route-0,2,b1,pickup_service,0,veh-A,\"2,2\""));
        assert!(lines[3].starts_with("route-1,1,b9,pickup_service,1,veh-B"));
        assert!(lines[4].starts_with("calls,1,b0,phone_call"));
        assert!(lines[5].starts_with("vouchers,1,b5,travel_voucher"));
        assert!(lines[6].starts_with("drive-batch-0,1,b7,vaccine_drive,,,,0"));
        assert_eq!(lines.len(), 7);
    }

    #[test]
    fn empty_plan_emits_headers_and_round_trips() {
        let plan = Plan {
            assignments: Vec::new(),
            routes: Vec::new(),
            drive_batches: Vec::new(),
            total_cost: 0.0,
            objective: 0.0,
        };
        let sheet = fieldsheet_csv(&plan, None).unwrap();
        assert_eq!(
            sheet,
            "section,sequence,beneficiary,intervention,route,vehicle,cell,batch\n"
        );
        let json = plan_to_json(&plan);
        let parsed: Plan = serde_json::from_str(&json).unwrap();
        assert_eq!(plan_to_json(&parsed), json);
    }

    #[test]
    fn plan_json_emit_parse_emit_is_byte_identical() {
        let plan = Plan {
            assignments: vec![Assignment {
                beneficiary: BeneficiaryId::new("b3"),
                kind: InterventionKind::TravelVoucher,
                route: None,
                batch: None,
            }],
            routes: Vec::new(),
            drive_batches: Vec::new(),
            total_cost: 0.1 + 0.2,
            objective: 1.0 / 3.0,
        };
        let first = plan_to_json(&plan);
        let reparsed: Plan = serde_json::from_str(&first).unwrap();
        let second = plan_to_json(&reparsed);
        assert_eq!(first, second);
        assert_eq!(reparsed.total_cost, plan.total_cost);
    }
}

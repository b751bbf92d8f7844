//! Synthetic population generation and Monte-Carlo evaluation of
//! intervention plans against the business-as-usual phone-call policy.
//!
//! The generator draws a latent two-factor world — awareness of the
//! vaccination schedule and physical access to a center — so that
//! intervention effects are heterogeneous in the way the allocation
//! logic expects: calls mostly help unaware mothers, vouchers and
//! pickups mostly help aware mothers who cannot travel, and door-to-door
//! drives always succeed. Evaluation never shows the estimators this
//! ground truth; policies are scored by drawing outcomes from it.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    Beneficiary, BeneficiaryId, CellId, CenterId, DailyWindow, HealthCenter, InterventionKind,
};
use crate::routing::{gls_generate, GlsParams, PickupCandidate, RoutingParams, VehicleSpec};
use crate::travel::{
    BoundingBox, Grid, QueryCostLedger, SyntheticTravelProvider, TravelTimeMatrix,
};
use crate::estimate::{
    train_from_rows, FeatureSchema, FeatureVector, ModelSet, ModelTarget,
};
use crate::solver::{
    branch_and_bound, greedy_prune, kind_index, merge_plans, plan_from_assignment,
    AllocationProblem, BeneficiaryNeeds, Capacities, Plan, PlanChoice, RouteOption, SolveLimits,
    SolverError, UnitCosts,
};

/// Monthly income under which a household counts as low-income.
pub const LOW_INCOME_THRESHOLD_USD: f64 = 25.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid population parameters: {0}")]
    InvalidParams(String),
    #[error("evaluation needs at least one replication")]
    NoReplications,
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Estimate(#[from] crate::estimate::EstimateError),
    #[error(transparent)]
    Routing(#[from] crate::routing::RoutingError),
    #[error(transparent)]
    Travel(#[from] crate::travel::TravelError),
}

/// Mixture settings for the synthetic population. Defaults calibrate the
/// low-income share to the surveyed 46%.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationParams {
    pub n: usize,
    /// Share of households below [`LOW_INCOME_THRESHOLD_USD`].
    pub low_income_share: f64,
    /// P(aware of the schedule | low income) and | otherwise.
    pub aware_given_low_income: f64,
    pub aware_given_high_income: f64,
    /// P(can reach a center unaided) at distance zero, and the drop per
    /// grid cell of rectilinear distance to the nearest center.
    pub access_at_center: f64,
    pub access_decay_per_cell: f64,
    /// Homes are scattered over a `span`×`span` cell grid.
    pub span: u16,
    /// Cells hosting health centers, for the access distance.
    pub center_cells: Vec<CellId>,
    /// Share of households reachable by phone.
    pub phone_coverage: f64,
    /// Share of addresses that fail geocoding (no home cell: such
    /// beneficiaries can only receive non-travel interventions).
    pub geocode_failure: f64,
    /// Newest possible child birth date; births spread 540 days back.
    pub birth_anchor: NaiveDate,
}

impl Default for PopulationParams {
    fn default() -> Self {
        PopulationParams {
            n: 1000,
            low_income_share: 0.46,
            aware_given_low_income: 0.35,
            aware_given_high_income: 0.75,
            access_at_center: 0.92,
            access_decay_per_cell: 0.07,
            span: 10,
            center_cells: vec![CellId::new(2, 2), CellId::new(7, 7)],
            phone_coverage: 0.85,
            geocode_failure: 0.05,
            birth_anchor: NaiveDate::from_ymd_opt(2025, 12, 1).expect("static date"),
        }
    }
}

impl PopulationParams {
    fn validate(&self) -> Result<(), SimError> {
        if self.n == 0 {
            return Err(SimError::InvalidParams("population size must be ≥ 1".into()));
        }
        for (name, v) in [
            ("low_income_share", self.low_income_share),
            ("aware_given_low_income", self.aware_given_low_income),
            ("aware_given_high_income", self.aware_given_high_income),
            ("access_at_center", self.access_at_center),
            ("phone_coverage", self.phone_coverage),
            ("geocode_failure", self.geocode_failure),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SimError::InvalidParams(format!(
                    "{name} = {v} outside [0, 1]"
                )));
            }
        }
        if !(self.access_decay_per_cell.is_finite() && self.access_decay_per_cell >= 0.0) {
            return Err(SimError::InvalidParams(
                "access decay must be finite and ≥ 0".into(),
            ));
        }
        if self.span == 0 {
            return Err(SimError::InvalidParams("span must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// One beneficiary's true success probabilities, by intervention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueProbs {
    /// Probability of timely vaccination with no intervention at all.
    pub none: f64,
    /// Indexed in `InterventionKind::ALL` order; drives are 1.0 by
    /// construction.
    pub by_kind: [f64; 4],
}

/// The generator's hidden truth, keyed by beneficiary.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub probs: BTreeMap<BeneficiaryId, TrueProbs>,
}

impl GroundTruth {
    pub fn of(&self, id: &BeneficiaryId) -> Option<&TrueProbs> {
        self.probs.get(id)
    }
}

/// Success probability lookup table over the two latent factors.
fn unaided_rate(aware: bool, access: bool) -> f64 {
    match (aware, access) {
        (true, true) => 0.78,
        (true, false) => 0.25,
        (false, true) => 0.18,
        (false, false) => 0.08,
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(0.005, 0.995)
}

/// Generates a deterministic synthetic registry plus its hidden ground
/// truth. Under default settings the share of households below the
/// low-income threshold concentrates at 46%.
pub fn synth_population(
    params: &PopulationParams,
    seed: u64,
) -> Result<(Vec<Beneficiary>, GroundTruth), SimError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5199_0B0B);
    let schema = FeatureSchema::standard();
    let schedule = crate::domain::VaccineSchedule::default_schedule();
    let total_doses = schedule.doses.len().max(1);

    let mut registry = Vec::with_capacity(params.n);
    let mut truth = GroundTruth::default();
    for i in 0..params.n {
        let id = BeneficiaryId::new(format!("sim-{i:05}"));

        // Latent household factors.
        let low_income = rng.gen_bool(params.low_income_share);
        let income = if low_income {
            rng.gen_range(4.0..LOW_INCOME_THRESHOLD_USD)
        } else {
            rng.gen_range(LOW_INCOME_THRESHOLD_USD..220.0)
        };
        let aware = rng.gen_bool(if low_income {
            params.aware_given_low_income
        } else {
            params.aware_given_high_income
        });
        let home_cell = if rng.gen_bool(params.geocode_failure) {
            None
        } else {
            Some(CellId::new(
                rng.gen_range(0..params.span),
                rng.gen_range(0..params.span),
            ))
        };
        let distance_cells = match home_cell {
            None => params.span as f64,
            Some(home) => params
                .center_cells
                .iter()
                .map(|c| {
                    (home.x as f64 - c.x as f64).abs() + (home.y as f64 - c.y as f64).abs()
                })
                .fold(params.span as f64 * 2.0, f64::min),
        };
        let p_access = (params.access_at_center
            - params.access_decay_per_cell * distance_cells)
            .clamp(0.05, 0.95);
        let access = rng.gen_bool(p_access);

        // Observable record.
        let mother_age = rng.gen_range(16.0..44.0);
        let children = rng.gen_range(1..=6) as f64;
        let completed = rng.gen_range(0..=total_doses / 2);
        let received: std::collections::BTreeSet<String> = schedule
            .doses
            .iter()
            .take(completed)
            .map(|d| d.name.clone())
            .collect();
        let birth_offset = rng.gen_range(0..540i64);
        let birth = params.birth_anchor - chrono::Duration::days(birth_offset);
        let availability = if rng.gen_bool(0.7) {
            vec![DailyWindow::all_day()]
        } else {
            let start = rng.gen_range(480..=540u16);
            vec![DailyWindow::new(start, start + rng.gen_range(120..=300)).expect("window")]
        };
        let phone_reachable = rng.gen_bool(params.phone_coverage);
        // Off-peak minutes to the nearest center: 2 min per cell at the
        // synthetic 30 km/h over 1 km cells.
        let distance_min = 2.0 * distance_cells;
        let features = FeatureVector::new(vec![
            income,
            mother_age,
            children,
            completed as f64 / total_doses as f64,
            distance_min,
        ]);
        debug_assert_eq!(features.len(), schema.len());

        // Hidden truth: calls create awareness, vouchers and pickups
        // create access (pickups slightly more — someone shows up at the
        // door), drives always succeed.
        let jitter = rng.gen_range(-0.03..=0.03);
        let none = clamp_prob(unaided_rate(aware, access) + jitter);
        let call = if aware {
            clamp_prob(none + 0.03)
        } else {
            clamp_prob(unaided_rate(true, access) + jitter)
        };
        let voucher = if aware {
            clamp_prob(unaided_rate(true, true) + jitter)
        } else {
            clamp_prob(none + 0.02)
        };
        let pickup = if aware {
            clamp_prob(unaided_rate(true, true) + 0.02 + jitter)
        } else {
            clamp_prob(none + 0.04)
        };
        truth.probs.insert(
            id.clone(),
            TrueProbs {
                none,
                by_kind: [call, voucher, pickup, 1.0],
            },
        );
        registry.push(Beneficiary {
            id,
            features,
            home_cell,
            child_birth_date: birth,
            received_doses: received,
            availability,
            phone_reachable,
        });
    }
    Ok((registry, truth))
}

/// Eligibility mask shared by problem builders: calls need a phone,
/// pickups and drives need a resolved home address, vouchers apply to
/// everyone.
/// Builds a routeless matching problem whose success probabilities are
/// the hidden truth itself — the idealized perfect-information instance.
pub fn problem_from_truth(
    registry: &[Beneficiary],
    truth: &GroundTruth,
    budget: f64,
    costs: UnitCosts,
    capacities: Capacities,
) -> Result<AllocationProblem, SimError> {
    let mut beneficiaries = Vec::with_capacity(registry.len());
    for b in registry {
        let Some(t) = truth.of(&b.id) else {
            return Err(SimError::InvalidParams(format!(
                "no ground truth for {}",
                b.id
            )));
        };
        let mut success = [None; 4];
        for kind in InterventionKind::ALL {
            if b.intervention_applies(kind) {
                success[kind_index(kind)] = Some(t.by_kind[kind_index(kind)]);
            }
        }
        beneficiaries.push(BeneficiaryNeeds {
            id: b.id.clone(),
            baseline: t.none,
            success,
            home_cell: b.home_cell,
        });
    }
    let mut p = AllocationProblem::new(beneficiaries, Vec::new(), budget)?;
    p.costs = costs;
    p.capacities = capacities;
    p.validate()?;
    Ok(p)
}

/// Builds the matching problem the planner actually sees: success
/// probabilities predicted by the trained models, never the truth.
pub fn problem_from_models(
    registry: &[Beneficiary],
    models: &ModelSet,
    budget: f64,
    costs: UnitCosts,
    capacities: Capacities,
) -> Result<AllocationProblem, SimError> {
    let mut beneficiaries = Vec::with_capacity(registry.len());
    for b in registry {
        let baseline = models.predict_baseline(&b.features)?;
        let mut success = [None; 4];
        for kind in InterventionKind::ALL {
            if b.intervention_applies(kind) {
                success[kind_index(kind)] = Some(models.predict_kind(kind, &b.features)?);
            }
        }
        beneficiaries.push(BeneficiaryNeeds {
            id: b.id.clone(),
            baseline,
            success,
            home_cell: b.home_cell,
        });
    }
    let mut p = AllocationProblem::new(beneficiaries, Vec::new(), budget)?;
    p.costs = costs;
    p.capacities = capacities;
    p.validate()?;
    Ok(p)
}

/// Draws labeled training rows from the truth — one Bernoulli outcome per
/// sampled beneficiary per target. This is the raw material model fitting
/// (and the synthetic-data exporter) consumes.
pub fn sample_training_rows(
    registry: &[Beneficiary],
    truth: &GroundTruth,
    per_target: usize,
    seed: u64,
) -> Result<Vec<(ModelTarget, FeatureVector, bool)>, SimError> {
    if registry.is_empty() {
        return Err(SimError::InvalidParams(
            "cannot sample training rows from an empty registry".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7241_1A15);
    let mut targets = vec![ModelTarget::NoIntervention];
    targets.extend(InterventionKind::ALL.map(ModelTarget::Intervention));
    let mut rows = Vec::with_capacity(per_target * targets.len());
    for target in targets {
        for _ in 0..per_target {
            let b = &registry[rng.gen_range(0..registry.len())];
            let t = truth.of(&b.id).ok_or_else(|| {
                SimError::InvalidParams(format!("no ground truth for {}", b.id))
            })?;
            let p = match target {
                ModelTarget::NoIntervention => t.none,
                ModelTarget::Intervention(k) => t.by_kind[kind_index(k)],
            };
            rows.push((target, b.features.clone(), rng.gen_bool(p)));
        }
    }
    Ok(rows)
}

/// Fits the model set on sampled Bernoulli outcomes. This is how the
/// planner's estimators inherit realistic estimation error instead of
/// seeing the truth.
pub fn train_models_on_sample(
    registry: &[Beneficiary],
    truth: &GroundTruth,
    per_target: usize,
    lambda: f64,
    seed: u64,
) -> Result<ModelSet, SimError> {
    let rows = sample_training_rows(registry, truth, per_target, seed)?;
    Ok(train_from_rows(&rows, &FeatureSchema::standard(), lambda)?)
}

/// The business-as-usual policy: phone calls to every call-eligible
/// beneficiary in problem (registry) order, while call slots and budget
/// last; no other intervention kinds.
pub fn baseline_policy(p: &AllocationProblem) -> Result<Plan, SolverError> {
    p.validate()?;
    let mut assigned: Vec<Option<PlanChoice>> = vec![None; p.beneficiaries.len()];
    let mut spent = 0.0;
    let mut calls = 0usize;
    for (idx, b) in p.beneficiaries.iter().enumerate() {
        if !b.eligible(InterventionKind::PhoneCall) {
            continue;
        }
        if calls >= p.capacities.call_slots {
            break;
        }
        if spent + p.costs.phone_call > p.budget + 1e-9 {
            break;
        }
        assigned[idx] = Some(PlanChoice::PhoneCall);
        spent += p.costs.phone_call;
        calls += 1;
    }
    Ok(plan_from_assignment(p, &assigned))
}

/// One evaluated policy in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    pub name: String,
    /// Mean fraction of the population vaccinated across replications.
    pub success_rate: f64,
    /// Normal-approximation 95% interval on the mean rate.
    pub ci95_low: f64,
    pub ci95_high: f64,
    pub spend: f64,
    /// Assignment distribution, including explicit "none".
    pub assignments_by_kind: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub replications: usize,
    pub population: usize,
    pub period: String,
    pub policies: Vec<PolicyEval>,
}

impl EvalReport {
    /// Plain-text comparison table: method, success rate, interval,
    /// period.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>12} {:>19} {:>16}\n",
            "method", "success rate", "95% interval", "period"
        ));
        for p in &self.policies {
            out.push_str(&format!(
                "{:<24} {:>11.1}% [{:>6.1}%, {:>6.1}%] {:>16}\n",
                p.name,
                100.0 * p.success_rate,
                100.0 * p.ci95_low,
                100.0 * p.ci95_high,
                self.period
            ));
        }
        out
    }
}

/// Monte-Carlo evaluation of named plans against a common ground truth.
/// Each replication draws one uniform per beneficiary (derived from the
/// seed and the replication index only), shared across policies so the
/// comparison uses common random numbers; an assigned beneficiary
/// succeeds iff the uniform falls under the truth of the assigned kind,
/// an unassigned one under the no-intervention truth.
pub fn evaluate(
    policies: &[(&str, &Plan)],
    truth: &GroundTruth,
    reps: usize,
    seed: u64,
    period: &str,
) -> Result<EvalReport, SimError> {
    if reps == 0 {
        return Err(SimError::NoReplications);
    }
    let population: Vec<(&BeneficiaryId, &TrueProbs)> = truth.probs.iter().collect();
    let n = population.len();
    if n == 0 {
        return Err(SimError::InvalidParams("empty ground truth".into()));
    }

    // Per-policy probability vector over the population.
    let mut prob_vectors = Vec::with_capacity(policies.len());
    let mut kind_tables = Vec::with_capacity(policies.len());
    for (_, plan) in policies {
        let assigned: BTreeMap<&BeneficiaryId, InterventionKind> = plan
            .assignments
            .iter()
            .map(|a| (&a.beneficiary, a.kind))
            .collect();
        let probs: Vec<f64> = population
            .iter()
            .map(|(id, t)| match assigned.get(*id) {
                Some(kind) => t.by_kind[kind_index(*kind)],
                None => t.none,
            })
            .collect();
        let mut by_kind: BTreeMap<String, usize> = BTreeMap::new();
        by_kind.insert("none".into(), n - assigned.len());
        for kind in assigned.values() {
            *by_kind.entry(kind.label().to_string()).or_insert(0) += 1;
        }
        prob_vectors.push(probs);
        kind_tables.push(by_kind);
    }

    // Replication rates per policy.
    let mut rates: Vec<Vec<f64>> = vec![Vec::with_capacity(reps); policies.len()];
    let mut uniforms = vec![0.0f64; n];
    for rep in 0..reps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(rep as u64 + 1);
        for u in uniforms.iter_mut() {
            *u = rng.gen();
        }
        for (probs, rate_log) in prob_vectors.iter().zip(rates.iter_mut()) {
            let successes = probs
                .iter()
                .zip(&uniforms)
                .filter(|(p, u)| *u < *p)
                .count();
            rate_log.push(successes as f64 / n as f64);
        }
    }

    let evals = policies
        .iter()
        .zip(rates)
        .zip(kind_tables)
        .map(|(((name, plan), rate_log), by_kind)| {
            let mean = rate_log.iter().sum::<f64>() / reps as f64;
            let var = rate_log.iter().map(|r| (r - mean).powi(2)).sum::<f64>()
                / (reps.max(2) - 1) as f64;
            let half = 1.96 * (var / reps as f64).sqrt();
            PolicyEval {
                name: name.to_string(),
                success_rate: mean,
                ci95_low: (mean - half).max(0.0),
                ci95_high: (mean + half).min(1.0),
                spend: plan.total_cost,
                assignments_by_kind: by_kind,
            }
        })
        .collect();
    Ok(EvalReport {
        seed,
        replications: reps,
        population: n,
        period: period.to_string(),
        policies: evals,
    })
}

/// Knobs for one simulated ADVISER-versus-baseline comparison.
#[derive(Debug, Clone)]
pub struct ComparisonParams {
    pub population: PopulationParams,
    pub budget: f64,
    pub replications: usize,
    pub seed: u64,
    /// Bootstrap outcome samples per model target.
    pub train_per_target: usize,
    /// L2 strength for the trained models.
    pub lambda: f64,
    pub n_vehicles: usize,
    pub gls_iterations: usize,
    /// Highest-need pickup candidates offered to the route search.
    pub route_candidate_cap: usize,
    /// Node budget for the exact solve; `None` runs to optimality.
    pub node_cap: Option<u64>,
    pub period_label: String,
}

impl Default for ComparisonParams {
    fn default() -> Self {
        ComparisonParams {
            population: PopulationParams::default(),
            budget: 750.0,
            replications: 500,
            seed: 0,
            train_per_target: 600,
            lambda: 1.0,
            n_vehicles: 4,
            gls_iterations: 250,
            route_candidate_cap: 120,
            node_cap: Some(4_000),
            period_label: "default-window".to_string(),
        }
    }
}

/// Everything one comparison run produces: the evaluation report plus both
/// plans and the problem they were validated against.
#[derive(Debug, Clone)]
pub struct ComparisonOutcome {
    pub report: EvalReport,
    pub adviser: Plan,
    pub baseline: Plan,
    pub problem: AllocationProblem,
}

fn rebuild_with_routes(
    base: &AllocationProblem,
    routes: Vec<RouteOption>,
) -> Result<AllocationProblem, SolverError> {
    let mut p = AllocationProblem::new(base.beneficiaries.clone(), routes, base.budget)?;
    p.costs = base.costs;
    p.capacities = base.capacities;
    p.validate()?;
    Ok(p)
}

/// Full pipeline rehearsal inside the simulator: synthesize a population,
/// train models on bootstrap outcomes, prune, generate routes, solve, and
/// score the merged plan against the phone-call baseline under common
/// random numbers. Deterministic per seed.
pub fn run_comparison(params: &ComparisonParams) -> Result<ComparisonOutcome, SimError> {
    let (registry, truth) = synth_population(&params.population, params.seed)?;
    let models = train_models_on_sample(
        &registry,
        &truth,
        params.train_per_target,
        params.lambda,
        params.seed ^ 0x7A11,
    )?;
    let costs = UnitCosts::default();
    let capacities = Capacities::default();
    let p0 = problem_from_models(&registry, &models, params.budget, costs, capacities)?;
    let (partial, reduced) = greedy_prune(&p0, None, 0.5)?;

    // Routing world over the same grid the population lives on, centers
    // exactly where the latent access model put them.
    let span = params.population.span.max(2);
    let bbox = BoundingBox::new(
        7.30,
        3.80,
        7.30 + 0.009 * span as f64,
        3.80 + 0.009 * span as f64,
    )?;
    let grid = Grid::new(bbox, 1.0)?;
    let cells: std::collections::BTreeSet<CellId> = (0..grid.cols)
        .flat_map(|x| (0..grid.rows).map(move |y| CellId::new(x, y)))
        .collect();
    let mut matrix = TravelTimeMatrix::empty(grid, "offpeak", "synthetic", cells)?;
    matrix.fill(&SyntheticTravelProvider::default(), &QueryCostLedger::default())?;
    let centers: Vec<HealthCenter> = params
        .population
        .center_cells
        .iter()
        .enumerate()
        .map(|(i, &cell)| HealthCenter::new(CenterId::new(format!("hc-{}", i + 1)), cell))
        .collect();
    let corners = [
        CellId::new(0, 0),
        CellId::new(span - 1, span - 1),
        CellId::new(0, span - 1),
        CellId::new(span - 1, 0),
    ];
    let vehicles: Vec<VehicleSpec> = (0..params.n_vehicles)
        .map(|i| VehicleSpec::new(format!("veh-{}", i + 1), corners[i % corners.len()]))
        .collect();

    let availability: BTreeMap<&BeneficiaryId, &Vec<DailyWindow>> =
        registry.iter().map(|b| (&b.id, &b.availability)).collect();
    let pickup = InterventionKind::PickupService;
    let mut ranked: Vec<&BeneficiaryNeeds> = reduced
        .beneficiaries
        .iter()
        .filter(|b| b.home_cell.is_some() && b.need(pickup).map(|g| g > 0.0).unwrap_or(false))
        .collect();
    ranked.sort_by(|a, b| {
        b.need(pickup)
            .partial_cmp(&a.need(pickup))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.id.cmp(&b.id))
    });
    ranked.truncate(params.route_candidate_cap);
    ranked.sort_by(|a, b| a.id.cmp(&b.id));
    let candidates: Vec<PickupCandidate> = ranked
        .iter()
        .map(|b| PickupCandidate {
            id: b.id.clone(),
            cell: b.home_cell.expect("filtered on home_cell"),
            availability: availability
                .get(&b.id)
                .map(|w| (*w).clone())
                .unwrap_or_else(|| vec![DailyWindow::all_day()]),
            need: b.need(pickup).expect("filtered on need"),
        })
        .collect();

    let routes = if candidates.is_empty() || vehicles.is_empty() {
        Vec::new()
    } else {
        let pool = gls_generate(
            &candidates,
            &matrix,
            &vehicles,
            &centers,
            &RoutingParams::default(),
            &GlsParams {
                iterations: params.gls_iterations,
                lambda: None,
                pool_cap: 200,
                seed: params.seed,
            },
        )?;
        RouteOption::from_pool(&pool)
    };

    let reduced = rebuild_with_routes(&reduced, routes.clone())?;
    let full = rebuild_with_routes(&p0, routes)?;
    let outcome = branch_and_bound(
        &reduced,
        SolveLimits {
            node_cap: params.node_cap,
            time_cap: None,
        },
    )?;
    let adviser = merge_plans(&full, &partial, &outcome.plan);
    let baseline = baseline_policy(&full)?;
    let report = evaluate(
        &[("adviser", &adviser), ("baseline-calls", &baseline)],
        &truth,
        params.replications,
        params.seed ^ 0xE7A1,
        &params.period_label,
    )?;
    Ok(ComparisonOutcome {
        report,
        adviser,
        baseline,
        problem: full,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{branch_and_bound, validate_plan, SolveLimits};

    #[test]
    fn population_is_deterministic_and_income_calibrated() {
        let params = PopulationParams {
            n: 10_000,
            ..PopulationParams::default()
        };
        let (a, truth_a) = synth_population(&params, 42).unwrap();
        let (b, truth_b) = synth_population(&params, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(truth_a, truth_b);

        let low = a
            .iter()
            .filter(|b| b.features.values()[0] < LOW_INCOME_THRESHOLD_USD)
            .count() as f64
            / a.len() as f64;
        assert!(
            (0.44..=0.48).contains(&low),
            "low-income share {low} outside [0.44, 0.48]"
        );
        for t in truth_a.probs.values() {
            assert_eq!(t.by_kind[3], 1.0, "drive truth must be pinned to 1");
            assert!(t.none >= 0.0 && t.none <= 1.0);
        }
    }

    #[test]
    fn single_record_population_is_valid() {
        let params = PopulationParams {
            n: 1,
            ..PopulationParams::default()
        };
        let (reg, truth) = synth_population(&params, 7).unwrap();
        assert_eq!(reg.len(), 1);
        assert!(truth.of(&reg[0].id).is_some());
        assert_eq!(reg[0].features.len(), FeatureSchema::standard().len());
    }

    #[test]
    fn invalid_mixture_weights_are_rejected() {
        let params = PopulationParams {
            low_income_share: 1.2,
            ..PopulationParams::default()
        };
        assert!(matches!(
            synth_population(&params, 1),
            Err(SimError::InvalidParams(_))
        ));
    }

    #[test]
    fn baseline_policy_calls_in_registry_order_within_budget() {
        let params = PopulationParams {
            n: 30,
            phone_coverage: 1.0,
            ..PopulationParams::default()
        };
        let (reg, truth) = synth_population(&params, 3).unwrap();
        // Budget for exactly 3 calls.
        let p = problem_from_truth(
            &reg,
            &truth,
            3.0 * UnitCosts::default().phone_call,
            UnitCosts::default(),
            Capacities::default(),
        )
        .unwrap();
        let plan = baseline_policy(&p).unwrap();
        assert_eq!(plan.assignments.len(), 3);
        let ids: Vec<&str> = plan
            .assignments
            .iter()
            .map(|a| a.beneficiary.0.as_str())
            .collect();
        assert_eq!(ids, vec!["sim-00000", "sim-00001", "sim-00002"]);
        assert!(plan
            .assignments
            .iter()
            .all(|a| a.kind == InterventionKind::PhoneCall));
        assert!(validate_plan(&plan, &p).is_valid());

        // Ample budget and capacity: everyone called.
        let p_all = problem_from_truth(
            &reg,
            &truth,
            1000.0,
            UnitCosts::default(),
            Capacities::default(),
        )
        .unwrap();
        let plan_all = baseline_policy(&p_all).unwrap();
        assert_eq!(plan_all.assignments.len(), 30);
    }

    #[test]
    fn exact_solve_dominates_feasible_baseline_on_desk_instances() {
        for seed in 0..10u64 {
            let params = PopulationParams {
                n: 9,
                ..PopulationParams::default()
            };
            let (reg, truth) = synth_population(&params, seed).unwrap();
            let p = problem_from_truth(
                &reg,
                &truth,
                30.0,
                UnitCosts::default(),
                Capacities::default(),
            )
            .unwrap();
            let baseline = baseline_policy(&p).unwrap();
            assert!(validate_plan(&baseline, &p).is_valid());
            let solved = branch_and_bound(&p, SolveLimits::unlimited()).unwrap();
            assert!(
                solved.plan.objective >= baseline.objective - 1e-9,
                "seed {seed}: optimal {} below baseline {}",
                solved.plan.objective,
                baseline.objective
            );
        }
    }

    #[test]
    fn degenerate_truths_pin_the_rates() {
        let mut truth = GroundTruth::default();
        for i in 0..50 {
            truth.probs.insert(
                BeneficiaryId::new(format!("z{i:02}")),
                TrueProbs {
                    none: 0.0,
                    by_kind: [0.0; 4],
                },
            );
        }
        let empty = Plan {
            assignments: vec![],
            routes: vec![],
            drive_batches: vec![],
            total_cost: 0.0,
            objective: 0.0,
        };
        let report = evaluate(&[("noop", &empty)], &truth, 20, 9, "test").unwrap();
        assert_eq!(report.policies[0].success_rate, 0.0);

        for t in truth.probs.values_mut() {
            *t = TrueProbs {
                none: 1.0,
                by_kind: [1.0; 4],
            };
        }
        let report = evaluate(&[("noop", &empty)], &truth, 20, 9, "test").unwrap();
        assert_eq!(report.policies[0].success_rate, 1.0);
    }

    #[test]
    fn evaluation_is_deterministic_per_seed() {
        let params = PopulationParams {
            n: 60,
            ..PopulationParams::default()
        };
        let (reg, truth) = synth_population(&params, 11).unwrap();
        let p = problem_from_truth(
            &reg,
            &truth,
            40.0,
            UnitCosts::default(),
            Capacities::default(),
        )
        .unwrap();
        let plan = baseline_policy(&p).unwrap();
        let a = evaluate(&[("baseline", &plan)], &truth, 50, 17, "w1").unwrap();
        let b = evaluate(&[("baseline", &plan)], &truth, 50, 17, "w1").unwrap();
        assert_eq!(a, b);
        let c = evaluate(&[("baseline", &plan)], &truth, 50, 18, "w1").unwrap();
        assert_ne!(
            a.policies[0].success_rate,
            c.policies[0].success_rate,
            "different seeds should perturb the estimate"
        );
    }

    #[test]
    fn quadrupling_replications_roughly_halves_interval_width() {
        let params = PopulationParams {
            n: 80,
            ..PopulationParams::default()
        };
        let (reg, truth) = synth_population(&params, 21).unwrap();
        let p = problem_from_truth(
            &reg,
            &truth,
            60.0,
            UnitCosts::default(),
            Capacities::default(),
        )
        .unwrap();
        let plan = baseline_policy(&p).unwrap();
        let narrow = evaluate(&[("b", &plan)], &truth, 200, 5, "w").unwrap();
        let wide = evaluate(&[("b", &plan)], &truth, 800, 5, "w").unwrap();
        let w_narrow = narrow.policies[0].ci95_high - narrow.policies[0].ci95_low;
        let w_wide = wide.policies[0].ci95_high - wide.policies[0].ci95_low;
        let ratio = w_wide / w_narrow;
        assert!(
            (0.4..=0.6).contains(&ratio),
            "width ratio {ratio} not within 20% of one half"
        );
    }

    #[test]
    fn trained_models_recover_heterogeneity_direction() {
        let params = PopulationParams {
            n: 1200,
            ..PopulationParams::default()
        };
        let (reg, truth) = synth_population(&params, 31).unwrap();
        let models = train_models_on_sample(&reg, &truth, 900, 1.0, 77).unwrap();
        let p = problem_from_models(
            &reg,
            &models,
            100.0,
            UnitCosts::default(),
            Capacities::default(),
        )
        .unwrap();
        // Predictions are probabilities and the problem validates.
        assert_eq!(p.beneficiaries.len(), reg.len());
        // On average, the model should say calls help more where the
        // truth says so (unaware-heavy low-income segment).
        let mut call_need_truth = Vec::new();
        let mut call_need_model = Vec::new();
        for (b, needs) in reg.iter().zip(&p.beneficiaries) {
            let t = truth.of(&b.id).unwrap();
            if let Some(n) = needs.need(InterventionKind::PhoneCall) {
                call_need_model.push(n);
                call_need_truth.push(t.by_kind[0] - t.none);
            }
        }
        let corr = correlation(&call_need_model, &call_need_truth);
        assert!(
            corr > 0.1,
            "model call-need should correlate with truth, got r = {corr}"
        );
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>();
        let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>();
        let vb = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>();
        cov / (va.sqrt() * vb.sqrt()).max(1e-12)
    }
}

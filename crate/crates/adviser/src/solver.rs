//! Intervention matching: assign each eligible beneficiary at most one of
//! {phone call, travel voucher, pickup route seat, vaccine drive} to
//! maximize the summed success probability under a budget, a vehicle
//! limit, call slots, and drive capacity.
//!
//! The exact solver is depth-first branch and bound over
//! (beneficiary, choice) pairs with an admissible Lagrangian bound on the
//! budget constraint. A brute-force enumerator serves as the oracle for
//! small instances, and `greedy_prune` peels off dominant vaccine drives
//! before the exact solve.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BeneficiaryId, CellId, InterventionKind, VehicleId};
use crate::routing::RoutePool;

/// Cost of one extra reminder call.
pub const DEFAULT_CALL_COST: f64 = 1.5;
/// Cost of one travel voucher.
pub const DEFAULT_VOUCHER_COST: f64 = 1.1;
/// Cost of one door-to-door vaccine drive visit.
pub const DEFAULT_DRIVE_COST: f64 = 20.0;
/// Pickup vehicles available per planning window.
pub const DEFAULT_VEHICLE_LIMIT: usize = 4;
/// Reminder calls the phone workers can place per window.
pub const DEFAULT_CALL_SLOTS: usize = 200;
/// Drive visits one nurse-day covers.
pub const DRIVE_BATCH_SIZE: usize = 12;
/// Nurse-days available for drives per window.
pub const DEFAULT_NURSE_DRIVE_DAYS: usize = 4;

/// Slack for budget comparisons, so decimal currency arithmetic does not
/// flip feasibility on the last bit.
const BUDGET_EPS: f64 = 1e-9;
/// Bisection iterations for the bound's multiplier search.
const MU_ITERATIONS: usize = 32;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("exhaustive enumeration limited to {max_beneficiaries} beneficiaries and {max_routes} routes, got {beneficiaries} and {routes}")]
    SizeGuard {
        beneficiaries: usize,
        routes: usize,
        max_beneficiaries: usize,
        max_routes: usize,
    },
    #[error("no completion satisfies the fixed assignments: {0}")]
    InfeasibleNode(String),
}

/// Per-intervention unit costs. Pickups are costed through their route,
/// not per seat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitCosts {
    pub phone_call: f64,
    pub travel_voucher: f64,
    pub vaccine_drive: f64,
}

impl Default for UnitCosts {
    fn default() -> Self {
        UnitCosts {
            phone_call: DEFAULT_CALL_COST,
            travel_voucher: DEFAULT_VOUCHER_COST,
            vaccine_drive: DEFAULT_DRIVE_COST,
        }
    }
}

impl UnitCosts {
    pub fn of(&self, kind: InterventionKind) -> Option<f64> {
        match kind {
            InterventionKind::PhoneCall => Some(self.phone_call),
            InterventionKind::TravelVoucher => Some(self.travel_voucher),
            InterventionKind::VaccineDrive => Some(self.vaccine_drive),
            InterventionKind::PickupService => None,
        }
    }
}

/// Shared resource limits for one planning window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capacities {
    /// Pickup vehicles; at most one selected route per vehicle.
    pub vehicles: usize,
    /// Reminder calls the phone workers can place.
    pub call_slots: usize,
    /// Drive visits across all nurse-days (days × batch size).
    pub drive_slots: usize,
}

impl Capacities {
    pub fn with_nurse_days(days: usize) -> Self {
        Capacities {
            vehicles: DEFAULT_VEHICLE_LIMIT,
            call_slots: DEFAULT_CALL_SLOTS,
            drive_slots: days * DRIVE_BATCH_SIZE,
        }
    }
}

impl Default for Capacities {
    fn default() -> Self {
        Capacities::with_nurse_days(DEFAULT_NURSE_DRIVE_DAYS)
    }
}

/// One beneficiary's success probabilities: `baseline` with no
/// intervention, and per-kind probabilities where eligible (`None` marks
/// an ineligible kind).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeneficiaryNeeds {
    pub id: BeneficiaryId,
    pub baseline: f64,
    /// Indexed in `InterventionKind::ALL` order.
    pub success: [Option<f64>; 4],
    /// Required for vaccine-drive eligibility (drives are door-to-door).
    pub home_cell: Option<CellId>,
}

impl BeneficiaryNeeds {
    pub fn eligible(&self, kind: InterventionKind) -> bool {
        self.success[kind_index(kind)].is_some()
    }

    /// Success-probability gain over baseline, if eligible.
    pub fn need(&self, kind: InterventionKind) -> Option<f64> {
        self.success[kind_index(kind)].map(|p| p - self.baseline)
    }
}

pub fn kind_index(kind: InterventionKind) -> usize {
    InterventionKind::ALL
        .iter()
        .position(|k| *k == kind)
        .expect("kind present")
}

/// One pooled route the solver may select: selecting it pays `cost` once
/// and opens pickup seats for exactly the `served` beneficiaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteOption {
    pub id: usize,
    pub vehicle: VehicleId,
    pub cost: f64,
    pub served: Vec<BeneficiaryId>,
}

impl RouteOption {
    /// Maps a generated pool to solver route options; ids are pool line
    /// positions, empty routes are dropped.
    pub fn from_pool(pool: &RoutePool) -> Vec<RouteOption> {
        pool.routes
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.is_empty())
            .map(|(id, r)| RouteOption {
                id,
                vehicle: r.vehicle.clone(),
                cost: r.cost,
                served: r.served.clone(),
            })
            .collect()
    }
}

/// The matching instance handed to the solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationProblem {
    pub beneficiaries: Vec<BeneficiaryNeeds>,
    pub routes: Vec<RouteOption>,
    pub budget: f64,
    pub costs: UnitCosts,
    pub capacities: Capacities,
}

impl AllocationProblem {
    /// Builds and validates a problem; beneficiaries are kept sorted by id
    /// so every downstream tie-break is well defined.
    pub fn new(
        mut beneficiaries: Vec<BeneficiaryNeeds>,
        routes: Vec<RouteOption>,
        budget: f64,
    ) -> Result<Self, SolverError> {
        beneficiaries.sort_by(|a, b| a.id.cmp(&b.id));
        let p = AllocationProblem {
            beneficiaries,
            routes,
            budget,
            costs: UnitCosts::default(),
            capacities: Capacities::default(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: String| Err(SolverError::InvalidProblem(m));
        if !self.budget.is_finite() || self.budget < 0.0 {
            return bad(format!("budget {} must be finite and >= 0", self.budget));
        }
        for (name, c) in [
            ("phone_call", self.costs.phone_call),
            ("travel_voucher", self.costs.travel_voucher),
            ("vaccine_drive", self.costs.vaccine_drive),
        ] {
            if !c.is_finite() || c <= 0.0 {
                return bad(format!("{name} cost {c} must be finite and > 0"));
            }
        }
        let mut seen = BTreeSet::new();
        for b in &self.beneficiaries {
            if !seen.insert(&b.id) {
                return bad(format!("duplicate beneficiary {}", b.id));
            }
            if !(0.0..=1.0).contains(&b.baseline) {
                return bad(format!("{}: baseline {} outside [0,1]", b.id, b.baseline));
            }
            for (k, p) in InterventionKind::ALL.iter().zip(&b.success) {
                if let Some(p) = p {
                    if !(0.0..=1.0).contains(p) {
                        return bad(format!("{}: {k} probability {p} outside [0,1]", b.id));
                    }
                }
            }
            if b.eligible(InterventionKind::VaccineDrive) && b.home_cell.is_none() {
                return bad(format!("{}: drive-eligible without a home cell", b.id));
            }
        }
        if self
            .beneficiaries
            .windows(2)
            .any(|w| w[0].id > w[1].id)
        {
            return bad("beneficiaries not sorted by id".into());
        }
        let mut route_ids = BTreeSet::new();
        for r in &self.routes {
            if !route_ids.insert(r.id) {
                return bad(format!("duplicate route id {}", r.id));
            }
            if !r.cost.is_finite() || r.cost < 0.0 {
                return bad(format!("route {}: cost {} must be finite and >= 0", r.id, r.cost));
            }
            if r.served.is_empty() {
                return bad(format!("route {} serves nobody", r.id));
            }
            for id in &r.served {
                let Some(b) = self.beneficiaries.iter().find(|b| &b.id == id) else {
                    return bad(format!("route {} serves unknown beneficiary {id}", r.id));
                };
                if !b.eligible(InterventionKind::PickupService) {
                    return bad(format!(
                        "route {} serves {id}, who has no pickup success probability",
                        r.id
                    ));
                }
            }
        }
        Ok(())
    }

    /// Objective of the do-nothing plan: everyone at baseline.
    pub fn baseline_objective(&self) -> f64 {
        self.beneficiaries.iter().map(|b| b.baseline).sum()
    }

    pub fn route(&self, id: usize) -> Option<&RouteOption> {
        self.routes.iter().find(|r| r.id == id)
    }

    /// The same instance with all costs and the budget multiplied by
    /// `factor`; the optimal assignment set is invariant under this.
    pub fn scaled(&self, factor: f64) -> AllocationProblem {
        let mut p = self.clone();
        p.budget *= factor;
        p.costs.phone_call *= factor;
        p.costs.travel_voucher *= factor;
        p.costs.vaccine_drive *= factor;
        for r in &mut p.routes {
            r.cost *= factor;
        }
        p
    }
}

/// A concrete choice for one beneficiary. Variant order (then route id)
/// is the canonical tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "route", rename_all = "snake_case")]
pub enum PlanChoice {
    PhoneCall,
    TravelVoucher,
    Pickup(usize),
    VaccineDrive,
}

impl PlanChoice {
    pub fn kind(&self) -> InterventionKind {
        match self {
            PlanChoice::PhoneCall => InterventionKind::PhoneCall,
            PlanChoice::TravelVoucher => InterventionKind::TravelVoucher,
            PlanChoice::Pickup(_) => InterventionKind::PickupService,
            PlanChoice::VaccineDrive => InterventionKind::VaccineDrive,
        }
    }

    pub fn route(&self) -> Option<usize> {
        match self {
            PlanChoice::Pickup(r) => Some(*r),
            _ => None,
        }
    }
}

impl fmt::Display for PlanChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanChoice::Pickup(r) => write!(f, "pickup_service[route {r}]"),
            other => f.write_str(other.kind().label()),
        }
    }
}

/// One matched beneficiary in a plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub beneficiary: BeneficiaryId,
    pub kind: InterventionKind,
    /// Present exactly for pickup assignments.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub route: Option<usize>,
    /// Present exactly for vaccine-drive assignments.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub batch: Option<usize>,
}

/// One nurse-day of geographically grouped drive visits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriveBatch {
    pub id: usize,
    pub members: Vec<BeneficiaryId>,
}

/// A complete (possibly partial-coverage) intervention plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    /// Sorted by beneficiary id; at most one entry per beneficiary.
    pub assignments: Vec<Assignment>,
    /// Selected route ids, ascending; only routes with assigned riders.
    pub routes: Vec<usize>,
    pub drive_batches: Vec<DriveBatch>,
    pub total_cost: f64,
    /// Σ assigned success probability + Σ unassigned baseline.
    pub objective: f64,
}

impl Plan {
    pub fn empty(p: &AllocationProblem) -> Self {
        Plan {
            assignments: Vec::new(),
            routes: Vec::new(),
            drive_batches: Vec::new(),
            total_cost: 0.0,
            objective: p.baseline_objective(),
        }
    }
}

/// Groups the plan's drive visits into nurse-day batches: row-major by
/// home cell (south row first, then east), chunks of up to
/// [`DRIVE_BATCH_SIZE`].
pub fn assemble_drive_batches(
    p: &AllocationProblem,
    drive_assigned: &[BeneficiaryId],
) -> Vec<DriveBatch> {
    let mut with_cells: Vec<(CellId, &BeneficiaryId)> = drive_assigned
        .iter()
        .map(|id| {
            let cell = p
                .beneficiaries
                .iter()
                .find(|b| &b.id == id)
                .and_then(|b| b.home_cell)
                .unwrap_or(CellId::new(0, 0));
            (cell, id)
        })
        .collect();
    with_cells.sort_by(|a, b| {
        (a.0.y, a.0.x)
            .cmp(&(b.0.y, b.0.x))
            .then_with(|| a.1.cmp(b.1))
    });
    with_cells
        .chunks(DRIVE_BATCH_SIZE)
        .enumerate()
        .map(|(id, chunk)| DriveBatch {
            id,
            members: chunk.iter().map(|(_, b)| (*b).clone()).collect(),
        })
        .collect()
}

/// Builds the canonical plan for an assignment vector over `p`'s
/// beneficiaries (same order), recomputing costs and the objective.
pub(crate) fn plan_from_assignment(p: &AllocationProblem, assigned: &[Option<PlanChoice>]) -> Plan {
    let mut assignments = Vec::new();
    let mut routes = BTreeSet::new();
    let mut drive_ids = Vec::new();
    let mut total_cost = 0.0;
    let mut objective = 0.0;
    for (b, choice) in p.beneficiaries.iter().zip(assigned) {
        match choice {
            None => objective += b.baseline,
            Some(c) => {
                objective += b.success[kind_index(c.kind())].expect("assigned kind is eligible");
                match c {
                    PlanChoice::PhoneCall => total_cost += p.costs.phone_call,
                    PlanChoice::TravelVoucher => total_cost += p.costs.travel_voucher,
                    PlanChoice::VaccineDrive => {
                        total_cost += p.costs.vaccine_drive;
                        drive_ids.push(b.id.clone());
                    }
                    PlanChoice::Pickup(r) => {
                        routes.insert(*r);
                    }
                }
                assignments.push(Assignment {
                    beneficiary: b.id.clone(),
                    kind: c.kind(),
                    route: c.route(),
                    batch: None,
                });
            }
        }
    }
    for r in &routes {
        total_cost += p.route(*r).map_or(0.0, |r| r.cost);
    }
    let drive_batches = assemble_drive_batches(p, &drive_ids);
    let batch_of: BTreeMap<&BeneficiaryId, usize> = drive_batches
        .iter()
        .flat_map(|batch| batch.members.iter().map(move |m| (m, batch.id)))
        .collect();
    for a in &mut assignments {
        if a.kind == InterventionKind::VaccineDrive {
            a.batch = batch_of.get(&a.beneficiary).copied();
        }
    }
    Plan {
        assignments,
        routes: routes.into_iter().collect(),
        drive_batches,
        total_cost,
        objective,
    }
}

// ---------------------------------------------------------------------------
// Plan validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum PlanViolation {
    DuplicateAssignment { beneficiary: BeneficiaryId },
    UnknownBeneficiary { beneficiary: BeneficiaryId },
    IneligibleKind { beneficiary: BeneficiaryId, kind: InterventionKind },
    BudgetExceeded { total: f64, budget: f64 },
    VehicleCountExceeded { used: usize, limit: usize },
    VehicleReused { vehicle: VehicleId },
    UnknownRoute { route: usize },
    DuplicateRoute { route: usize },
    RouteNotSelected { beneficiary: BeneficiaryId, route: usize },
    NotServedByRoute { beneficiary: BeneficiaryId, route: usize },
    RouteReferenceInconsistent { beneficiary: BeneficiaryId },
    BatchReferenceInconsistent { beneficiary: BeneficiaryId },
    BatchOverfull { batch: usize, size: usize },
    CallCapacityExceeded { used: usize, limit: usize },
    DriveCapacityExceeded { used: usize, limit: usize },
    TotalCostMisstated { stated: f64, actual: f64 },
    ObjectiveMisstated { stated: f64, actual: f64 },
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanViolation::DuplicateAssignment { beneficiary } => {
                write!(f, "{beneficiary} assigned more than once")
            }
            PlanViolation::UnknownBeneficiary { beneficiary } => {
                write!(f, "{beneficiary} is not in the problem")
            }
            PlanViolation::IneligibleKind { beneficiary, kind } => {
                write!(f, "{beneficiary} is not eligible for {kind}")
            }
            PlanViolation::BudgetExceeded { total, budget } => {
                write!(f, "cost {total} exceeds budget {budget}")
            }
            PlanViolation::VehicleCountExceeded { used, limit } => {
                write!(f, "{used} vehicles used, limit {limit}")
            }
            PlanViolation::VehicleReused { vehicle } => {
                write!(f, "vehicle {vehicle} selected for two routes")
            }
            PlanViolation::UnknownRoute { route } => write!(f, "route {route} not in the pool"),
            PlanViolation::DuplicateRoute { route } => write!(f, "route {route} selected twice"),
            PlanViolation::RouteNotSelected { beneficiary, route } => {
                write!(f, "{beneficiary} rides unselected route {route}")
            }
            PlanViolation::NotServedByRoute { beneficiary, route } => {
                write!(f, "route {route} does not serve {beneficiary}")
            }
            PlanViolation::RouteReferenceInconsistent { beneficiary } => {
                write!(f, "{beneficiary}: route reference inconsistent with kind")
            }
            PlanViolation::BatchReferenceInconsistent { beneficiary } => {
                write!(f, "{beneficiary}: drive-batch reference inconsistent")
            }
            PlanViolation::BatchOverfull { batch, size } => {
                write!(f, "batch {batch} holds {size} > {DRIVE_BATCH_SIZE} visits")
            }
            PlanViolation::CallCapacityExceeded { used, limit } => {
                write!(f, "{used} calls exceed {limit} slots")
            }
            PlanViolation::DriveCapacityExceeded { used, limit } => {
                write!(f, "{used} drives exceed {limit} slots")
            }
            PlanViolation::TotalCostMisstated { stated, actual } => {
                write!(f, "plan states cost {stated}, recomputed {actual}")
            }
            PlanViolation::ObjectiveMisstated { stated, actual } => {
                write!(f, "plan states objective {stated}, recomputed {actual}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanVerdict {
    pub violations: Vec<PlanViolation>,
}

impl PlanVerdict {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks a plan against the problem: one match per beneficiary, budget,
/// vehicle count, route membership, kind eligibility, and call/drive
/// capacities. Verdict-returning; never panics on malformed plans.
pub fn validate_plan(plan: &Plan, p: &AllocationProblem) -> PlanVerdict {
    let mut v = Vec::new();
    let by_id: BTreeMap<&BeneficiaryId, &BeneficiaryNeeds> =
        p.beneficiaries.iter().map(|b| (&b.id, b)).collect();
    let route_by_id: BTreeMap<usize, &RouteOption> =
        p.routes.iter().map(|r| (r.id, r)).collect();

    // Selected routes: known, unique, one per vehicle, within the fleet.
    let mut selected = BTreeSet::new();
    let mut vehicles = BTreeSet::new();
    for r in &plan.routes {
        if !selected.insert(*r) {
            v.push(PlanViolation::DuplicateRoute { route: *r });
            continue;
        }
        match route_by_id.get(r) {
            None => v.push(PlanViolation::UnknownRoute { route: *r }),
            Some(opt) => {
                if !vehicles.insert(&opt.vehicle) {
                    v.push(PlanViolation::VehicleReused {
                        vehicle: opt.vehicle.clone(),
                    });
                }
            }
        }
    }
    if vehicles.len() > p.capacities.vehicles {
        v.push(PlanViolation::VehicleCountExceeded {
            used: vehicles.len(),
            limit: p.capacities.vehicles,
        });
    }

    let mut seen = BTreeSet::new();
    let mut calls = 0usize;
    let mut drives = 0usize;
    let mut unit_cost = 0.0;
    let mut objective = 0.0;
    let mut assigned_ids = BTreeSet::new();
    for a in &plan.assignments {
        if !seen.insert(&a.beneficiary) {
            v.push(PlanViolation::DuplicateAssignment {
                beneficiary: a.beneficiary.clone(),
            });
            continue;
        }
        let Some(b) = by_id.get(&a.beneficiary) else {
            v.push(PlanViolation::UnknownBeneficiary {
                beneficiary: a.beneficiary.clone(),
            });
            continue;
        };
        assigned_ids.insert(&a.beneficiary);
        match b.success[kind_index(a.kind)] {
            Some(prob) => objective += prob,
            None => v.push(PlanViolation::IneligibleKind {
                beneficiary: a.beneficiary.clone(),
                kind: a.kind,
            }),
        }
        if let Some(c) = p.costs.of(a.kind) {
            unit_cost += c;
        }
        match a.kind {
            InterventionKind::PhoneCall => calls += 1,
            InterventionKind::VaccineDrive => drives += 1,
            _ => {}
        }
        // Route references: present iff pickup, selected, and serving.
        match (a.kind, a.route) {
            (InterventionKind::PickupService, Some(r)) => {
                if !selected.contains(&r) {
                    v.push(PlanViolation::RouteNotSelected {
                        beneficiary: a.beneficiary.clone(),
                        route: r,
                    });
                }
                match route_by_id.get(&r) {
                    None => v.push(PlanViolation::UnknownRoute { route: r }),
                    Some(opt) if !opt.served.contains(&a.beneficiary) => {
                        v.push(PlanViolation::NotServedByRoute {
                            beneficiary: a.beneficiary.clone(),
                            route: r,
                        });
                    }
                    Some(_) => {}
                }
            }
            (InterventionKind::PickupService, None) | (_, Some(_)) => {
                v.push(PlanViolation::RouteReferenceInconsistent {
                    beneficiary: a.beneficiary.clone(),
                });
            }
            _ => {}
        }
        // Batch references: present iff drive and consistent with batches.
        match (a.kind, a.batch) {
            (InterventionKind::VaccineDrive, Some(batch)) => {
                let ok = plan
                    .drive_batches
                    .iter()
                    .any(|x| x.id == batch && x.members.contains(&a.beneficiary));
                if !ok {
                    v.push(PlanViolation::BatchReferenceInconsistent {
                        beneficiary: a.beneficiary.clone(),
                    });
                }
            }
            (InterventionKind::VaccineDrive, None) | (_, Some(_)) => {
                v.push(PlanViolation::BatchReferenceInconsistent {
                    beneficiary: a.beneficiary.clone(),
                });
            }
            _ => {}
        }
    }
    for batch in &plan.drive_batches {
        if batch.members.len() > DRIVE_BATCH_SIZE {
            v.push(PlanViolation::BatchOverfull {
                batch: batch.id,
                size: batch.members.len(),
            });
        }
    }
    if calls > p.capacities.call_slots {
        v.push(PlanViolation::CallCapacityExceeded {
            used: calls,
            limit: p.capacities.call_slots,
        });
    }
    if drives > p.capacities.drive_slots {
        v.push(PlanViolation::DriveCapacityExceeded {
            used: drives,
            limit: p.capacities.drive_slots,
        });
    }

    let route_cost: f64 = selected
        .iter()
        .filter_map(|r| route_by_id.get(r).map(|o| o.cost))
        .sum();
    let actual_cost = unit_cost + route_cost;
    if actual_cost > p.budget + BUDGET_EPS {
        v.push(PlanViolation::BudgetExceeded {
            total: actual_cost,
            budget: p.budget,
        });
    }
    if (plan.total_cost - actual_cost).abs() > 1e-6 {
        v.push(PlanViolation::TotalCostMisstated {
            stated: plan.total_cost,
            actual: actual_cost,
        });
    }
    let baseline_rest: f64 = p
        .beneficiaries
        .iter()
        .filter(|b| !assigned_ids.contains(&b.id))
        .map(|b| b.baseline)
        .sum();
    let actual_objective = objective + baseline_rest;
    if (plan.objective - actual_objective).abs() > 1e-6 {
        v.push(PlanViolation::ObjectiveMisstated {
            stated: plan.objective,
            actual: actual_objective,
        });
    }
    PlanVerdict { violations: v }
}

// ---------------------------------------------------------------------------
// Search internals shared by the bound, branch & bound, and the oracle
// ---------------------------------------------------------------------------

/// One assignable (beneficiary, choice) pair with its bound arithmetic:
/// `unit_cost` is the real marginal cost when the choice's route (if any)
/// is not yet selected; `relaxed_cost` is the admissible per-seat
/// underestimate used by the Lagrangian.
#[derive(Debug, Clone, Copy)]
struct SearchOption {
    choice: PlanChoice,
    need: f64,
    unit_cost: f64,
    relaxed_cost: f64,
}

struct SearchProblem<'a> {
    p: &'a AllocationProblem,
    /// Positive-need options per beneficiary, in canonical choice order.
    /// Zero or negative needs never appear in an optimal plan (leaving
    /// the beneficiary unassigned dominates), so they are not searched.
    options: Vec<Vec<SearchOption>>,
    route_by_id: BTreeMap<usize, &'a RouteOption>,
    baseline_total: f64,
}

impl<'a> SearchProblem<'a> {
    fn build(p: &'a AllocationProblem) -> Self {
        let route_by_id: BTreeMap<usize, &RouteOption> =
            p.routes.iter().map(|r| (r.id, r)).collect();
        let mut serving: BTreeMap<&BeneficiaryId, Vec<usize>> = BTreeMap::new();
        for r in &p.routes {
            for id in &r.served {
                serving.entry(id).or_default().push(r.id);
            }
        }
        let options = p
            .beneficiaries
            .iter()
            .map(|b| {
                let mut opts = Vec::new();
                if let Some(need) = b.need(InterventionKind::PhoneCall) {
                    opts.push(SearchOption {
                        choice: PlanChoice::PhoneCall,
                        need,
                        unit_cost: p.costs.phone_call,
                        relaxed_cost: p.costs.phone_call,
                    });
                }
                if let Some(need) = b.need(InterventionKind::TravelVoucher) {
                    opts.push(SearchOption {
                        choice: PlanChoice::TravelVoucher,
                        need,
                        unit_cost: p.costs.travel_voucher,
                        relaxed_cost: p.costs.travel_voucher,
                    });
                }
                if let Some(need) = b.need(InterventionKind::PickupService) {
                    if let Some(routes) = serving.get(&b.id) {
                        let mut sorted = routes.clone();
                        sorted.sort_unstable();
                        for rid in sorted {
                            let r = route_by_id[&rid];
                            opts.push(SearchOption {
                                choice: PlanChoice::Pickup(rid),
                                need,
                                unit_cost: r.cost,
                                relaxed_cost: r.cost / r.served.len() as f64,
                            });
                        }
                    }
                }
                if let Some(need) = b.need(InterventionKind::VaccineDrive) {
                    opts.push(SearchOption {
                        choice: PlanChoice::VaccineDrive,
                        need,
                        unit_cost: p.costs.vaccine_drive,
                        relaxed_cost: p.costs.vaccine_drive,
                    });
                }
                opts.retain(|o| o.need > 0.0);
                opts
            })
            .collect();
        SearchProblem {
            p,
            options,
            route_by_id,
            baseline_total: p.baseline_objective(),
        }
    }
}

/// Mutable branch-and-bound path state with exact float rollback.
struct SearchState {
    assigned: Vec<Option<PlanChoice>>,
    forbidden: Vec<BTreeSet<PlanChoice>>,
    spent: f64,
    fixed_need: f64,
    calls: usize,
    drives: usize,
    /// Selected route id → fixed riders on it (≥ 1).
    riders: BTreeMap<usize, usize>,
    /// Vehicle → the one selected route on it.
    vehicle_route: BTreeMap<VehicleId, usize>,
    depth: usize,
}

impl SearchState {
    fn fresh(n: usize) -> Self {
        SearchState {
            assigned: vec![None; n],
            forbidden: vec![BTreeSet::new(); n],
            spent: 0.0,
            fixed_need: 0.0,
            calls: 0,
            drives: 0,
            riders: BTreeMap::new(),
            vehicle_route: BTreeMap::new(),
            depth: 0,
        }
    }
}

struct Applied {
    idx: usize,
    prior_spent: f64,
    prior_fixed_need: f64,
}

fn fits_budget(spent: f64, budget: f64) -> bool {
    spent <= budget + BUDGET_EPS
}

/// Marginal money an include of `opt` costs right now, or `None` if the
/// include is infeasible in this state (capacity, vehicle, or budget).
fn include_cost(
    sp: &SearchProblem,
    st: &SearchState,
    opt: &SearchOption,
) -> Option<f64> {
    let cost = match opt.choice {
        PlanChoice::PhoneCall => {
            if st.calls >= sp.p.capacities.call_slots {
                return None;
            }
            opt.unit_cost
        }
        PlanChoice::TravelVoucher => opt.unit_cost,
        PlanChoice::VaccineDrive => {
            if st.drives >= sp.p.capacities.drive_slots {
                return None;
            }
            opt.unit_cost
        }
        PlanChoice::Pickup(rid) => {
            if st.riders.contains_key(&rid) {
                0.0
            } else {
                let vehicle = &sp.route_by_id[&rid].vehicle;
                if st.vehicle_route.contains_key(vehicle)
                    || st.vehicle_route.len() >= sp.p.capacities.vehicles
                {
                    return None;
                }
                opt.unit_cost
            }
        }
    };
    if !fits_budget(st.spent + cost, sp.p.budget) {
        return None;
    }
    Some(cost)
}

fn apply_include(
    sp: &SearchProblem,
    st: &mut SearchState,
    idx: usize,
    opt: &SearchOption,
) -> Option<Applied> {
    let cost = include_cost(sp, st, opt)?;
    let undo = Applied {
        idx,
        prior_spent: st.spent,
        prior_fixed_need: st.fixed_need,
    };
    st.assigned[idx] = Some(opt.choice);
    st.spent += cost;
    st.fixed_need += opt.need;
    match opt.choice {
        PlanChoice::PhoneCall => st.calls += 1,
        PlanChoice::VaccineDrive => st.drives += 1,
        PlanChoice::Pickup(rid) => {
            if !st.riders.contains_key(&rid) {
                let vehicle = sp.route_by_id[&rid].vehicle.clone();
                st.vehicle_route.insert(vehicle, rid);
            }
            *st.riders.entry(rid).or_insert(0) += 1;
        }
        PlanChoice::TravelVoucher => {}
    }
    st.depth += 1;
    Some(undo)
}

fn undo_include(sp: &SearchProblem, st: &mut SearchState, undo: Applied) {
    let choice = st.assigned[undo.idx].take().expect("undo of an include");
    st.spent = undo.prior_spent;
    st.fixed_need = undo.prior_fixed_need;
    match choice {
        PlanChoice::PhoneCall => st.calls -= 1,
        PlanChoice::VaccineDrive => st.drives -= 1,
        PlanChoice::Pickup(rid) => {
            let riders = st.riders.get_mut(&rid).expect("riders tracked");
            *riders -= 1;
            if *riders == 0 {
                st.riders.remove(&rid);
                let vehicle = &sp.route_by_id[&rid].vehicle;
                st.vehicle_route.remove(vehicle);
            }
        }
        PlanChoice::TravelVoucher => {}
    }
    st.depth -= 1;
}

/// Free (beneficiary, option) pairs assignable from this state, with the
/// relaxed cost the bound should charge them (0 on already-selected
/// routes).
fn feasible_pairs<'s>(
    sp: &'s SearchProblem,
    st: &SearchState,
) -> Vec<(usize, &'s SearchOption, f64)> {
    let mut out = Vec::new();
    for (idx, opts) in sp.options.iter().enumerate() {
        if st.assigned[idx].is_some() {
            continue;
        }
        for opt in opts {
            if st.forbidden[idx].contains(&opt.choice) {
                continue;
            }
            if include_cost(sp, st, opt).is_none() {
                continue;
            }
            let relaxed = match opt.choice {
                PlanChoice::Pickup(rid) if st.riders.contains_key(&rid) => 0.0,
                _ => opt.relaxed_cost,
            };
            out.push((idx, opt, relaxed));
        }
    }
    out
}

/// Admissible bound on the best completion objective from this state:
/// Lagrangian relaxation of the budget with a bisection-optimized
/// multiplier. μ = 0 is always evaluated, which makes leaves exact and
/// unconstrained instances tight.
fn state_bound(
    sp: &SearchProblem,
    st: &SearchState,
    pairs: &[(usize, &SearchOption, f64)],
) -> (f64, f64) {
    let remaining = sp.p.budget - st.spent;
    let n = sp.options.len();
    // Group by beneficiary for the inner max.
    let mut per_b: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n];
    for (idx, opt, relaxed) in pairs {
        per_b[*idx].push((opt.need, *relaxed));
    }
    let eval = |mu: f64| -> (f64, f64) {
        let mut total = if mu > 0.0 { mu * remaining } else { 0.0 };
        let mut charged = 0.0;
        for opts in &per_b {
            let mut best = 0.0;
            let mut best_cost = 0.0;
            for &(need, cost) in opts {
                let profit = need - mu * cost;
                if profit > best {
                    best = profit;
                    best_cost = cost;
                }
            }
            total += best;
            charged += best_cost;
        }
        (total, remaining - charged)
    };
    let mu_max = pairs
        .iter()
        .filter(|(_, _, c)| *c > 0.0)
        .map(|(_, opt, c)| opt.need / c)
        .fold(0.0, f64::max);
    let (l0, g0) = eval(0.0);
    let mut best = (l0, 0.0);
    if mu_max > 0.0 && g0 < 0.0 {
        let (lm, _) = eval(mu_max);
        if lm < best.0 {
            best = (lm, mu_max);
        }
        let (mut lo, mut hi) = (0.0, mu_max);
        for _ in 0..MU_ITERATIONS {
            let mid = 0.5 * (lo + hi);
            let (l, g) = eval(mid);
            if l < best.0 {
                best = (l, mid);
            }
            if g > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }
    (sp.baseline_total + st.fixed_need + best.0, best.1)
}

/// Greedy feasible completion from the current state, used for incumbent
/// plans: assign pairs in descending Lagrangian profit while the budget
/// and capacities allow.
fn greedy_completion(
    sp: &SearchProblem,
    st: &SearchState,
    pairs: &[(usize, &SearchOption, f64)],
    mu: f64,
) -> (f64, Vec<Option<PlanChoice>>) {
    let mut ordered: Vec<&(usize, &SearchOption, f64)> = pairs.iter().collect();
    ordered.sort_by(|a, b| {
        let pa = a.1.need - mu * a.2;
        let pb = b.1.need - mu * b.2;
        pb.total_cmp(&pa)
            .then_with(|| a.0.cmp(&b.0))
            .then_with(|| a.1.choice.cmp(&b.1.choice))
    });
    let mut assigned = st.assigned.clone();
    let mut spent = st.spent;
    let mut calls = st.calls;
    let mut drives = st.drives;
    let mut selected: BTreeSet<usize> = st.riders.keys().copied().collect();
    let mut vehicles: BTreeMap<&VehicleId, usize> =
        st.vehicle_route.iter().map(|(v, r)| (v, *r)).collect();
    let mut value = sp.baseline_total + st.fixed_need;
    for (idx, opt, _) in ordered {
        if assigned[*idx].is_some() {
            continue;
        }
        let cost = match opt.choice {
            PlanChoice::PhoneCall => {
                if calls >= sp.p.capacities.call_slots {
                    continue;
                }
                opt.unit_cost
            }
            PlanChoice::TravelVoucher => opt.unit_cost,
            PlanChoice::VaccineDrive => {
                if drives >= sp.p.capacities.drive_slots {
                    continue;
                }
                opt.unit_cost
            }
            PlanChoice::Pickup(rid) => {
                if selected.contains(&rid) {
                    0.0
                } else {
                    let vehicle = &sp.route_by_id[&rid].vehicle;
                    if vehicles.contains_key(vehicle) || vehicles.len() >= sp.p.capacities.vehicles
                    {
                        continue;
                    }
                    opt.unit_cost
                }
            }
        };
        if !fits_budget(spent + cost, sp.p.budget) {
            continue;
        }
        assigned[*idx] = Some(opt.choice);
        spent += cost;
        value += opt.need;
        match opt.choice {
            PlanChoice::PhoneCall => calls += 1,
            PlanChoice::VaccineDrive => drives += 1,
            PlanChoice::Pickup(rid) => {
                if selected.insert(rid) {
                    vehicles.insert(&sp.route_by_id[&rid].vehicle, rid);
                }
            }
            PlanChoice::TravelVoucher => {}
        }
    }
    (value, assigned)
}

// ---------------------------------------------------------------------------
// Public bound + branch & bound
// ---------------------------------------------------------------------------

/// A branch-and-bound node: assignments fixed in, pairs fixed out, the
/// admissible bound computed for it, and its depth in the tree.
#[derive(Debug, Clone, PartialEq)]
pub struct BnbNode {
    pub fixed_in: BTreeMap<BeneficiaryId, PlanChoice>,
    pub fixed_out: BTreeSet<(BeneficiaryId, PlanChoice)>,
    pub bound: f64,
    pub depth: usize,
}

fn state_from_node(
    sp: &SearchProblem,
    node_in: &BTreeMap<BeneficiaryId, PlanChoice>,
    node_out: &BTreeSet<(BeneficiaryId, PlanChoice)>,
) -> Result<SearchState, SolverError> {
    let mut st = SearchState::fresh(sp.options.len());
    let index_of: BTreeMap<&BeneficiaryId, usize> = sp
        .p
        .beneficiaries
        .iter()
        .enumerate()
        .map(|(i, b)| (&b.id, i))
        .collect();
    for (id, choice) in node_in {
        let idx = *index_of
            .get(id)
            .ok_or_else(|| SolverError::InvalidProblem(format!("unknown beneficiary {id}")))?;
        let opt = sp.options[idx]
            .iter()
            .find(|o| o.choice == *choice)
            .copied()
            .ok_or_else(|| {
                SolverError::InfeasibleNode(format!("{id} cannot take {choice} in this problem"))
            })?;
        apply_include(sp, &mut st, idx, &opt)
            .ok_or_else(|| SolverError::InfeasibleNode(format!("fixing {id} to {choice}")))?;
    }
    for (id, choice) in node_out {
        if let Some(idx) = index_of.get(id) {
            st.forbidden[*idx].insert(*choice);
        }
    }
    Ok(st)
}

/// Admissible upper bound on the best completion objective of `node`.
/// Returns negative infinity when the fixed assignments themselves are
/// infeasible.
pub fn upper_bound(node: &BnbNode, p: &AllocationProblem) -> f64 {
    let sp = SearchProblem::build(p);
    match state_from_node(&sp, &node.fixed_in, &node.fixed_out) {
        Err(_) => f64::NEG_INFINITY,
        Ok(st) => {
            let pairs = feasible_pairs(&sp, &st);
            state_bound(&sp, &st, &pairs).0
        }
    }
}

/// Optional caps on the exact search. Both disabled means run to proven
/// optimality.
#[derive(Debug, Clone, Copy, Default)]
pub struct SolveLimits {
    pub node_cap: Option<u64>,
    pub time_cap: Option<Duration>,
}

impl SolveLimits {
    pub fn unlimited() -> Self {
        SolveLimits::default()
    }
}

/// Deterministic search counters (timings live outside the artifact
/// surface on purpose).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct SolveStats {
    pub nodes_expanded: u64,
    pub incumbent_updates: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOutcome {
    pub plan: Plan,
    /// True iff the search ran to exhaustion; the plan is then exactly
    /// optimal.
    pub optimal: bool,
    /// (best remaining bound − best value) / best value; 0 when optimal.
    pub gap: f64,
    pub stats: SolveStats,
}

struct Search<'a, 'o> {
    sp: &'a SearchProblem<'a>,
    st: SearchState,
    incumbent_value: f64,
    incumbent: Vec<Option<PlanChoice>>,
    stats: SolveStats,
    limits: SolveLimits,
    started: Instant,
    truncated: bool,
    frontier_bound: f64,
    observer: Option<&'o mut dyn FnMut(&BnbNode, f64)>,
}

impl<'a, 'o> Search<'a, 'o> {
    fn over_limits(&self) -> bool {
        if let Some(cap) = self.limits.node_cap {
            if self.stats.nodes_expanded >= cap {
                return true;
            }
        }
        if let Some(cap) = self.limits.time_cap {
            if self.started.elapsed() >= cap {
                return true;
            }
        }
        false
    }

    fn snapshot(&self, bound: f64) -> BnbNode {
        let mut fixed_in = BTreeMap::new();
        for (idx, choice) in self.st.assigned.iter().enumerate() {
            if let Some(c) = choice {
                fixed_in.insert(self.sp.p.beneficiaries[idx].id.clone(), *c);
            }
        }
        let mut fixed_out = BTreeSet::new();
        for (idx, set) in self.st.forbidden.iter().enumerate() {
            for c in set {
                fixed_out.insert((self.sp.p.beneficiaries[idx].id.clone(), *c));
            }
        }
        BnbNode {
            fixed_in,
            fixed_out,
            bound,
            depth: self.st.depth,
        }
    }

    fn expand(&mut self, parent_bound: f64) {
        if self.truncated || self.over_limits() {
            self.truncated = true;
            self.frontier_bound = self.frontier_bound.max(parent_bound);
            return;
        }
        self.stats.nodes_expanded += 1;

        let pairs = feasible_pairs(self.sp, &self.st);
        let (computed, mu) = state_bound(self.sp, &self.st, &pairs);
        // A child never bounds above its parent.
        let bound = computed.min(parent_bound);
        if self.observer.is_some() {
            let node = self.snapshot(bound);
            if let Some(observer) = self.observer.as_deref_mut() {
                observer(&node, bound);
            }
        }
        if bound <= self.incumbent_value + 1e-12 {
            return;
        }

        let (value, completion) = greedy_completion(self.sp, &self.st, &pairs, mu);
        if value > self.incumbent_value {
            self.incumbent_value = value;
            self.incumbent = completion;
            self.stats.incumbent_updates += 1;
            if bound <= self.incumbent_value + 1e-12 {
                return;
            }
        }

        // Branch on the pair with the largest Lagrangian reduced profit;
        // ties fall to the smallest (beneficiary, choice).
        let branch = pairs
            .iter()
            .map(|(idx, opt, relaxed)| (opt.need - mu * relaxed, *idx, *opt))
            .max_by(|a, b| {
                a.0.total_cmp(&b.0)
                    .then_with(|| b.1.cmp(&a.1))
                    .then_with(|| b.2.choice.cmp(&a.2.choice))
            });
        let Some((_, idx, opt)) = branch else {
            return; // leaf: nothing assignable remains
        };

        if let Some(undo) = apply_include(self.sp, &mut self.st, idx, &opt) {
            self.expand(bound);
            undo_include(self.sp, &mut self.st, undo);
        }
        self.st.forbidden[idx].insert(opt.choice);
        self.expand(bound);
        self.st.forbidden[idx].remove(&opt.choice);
    }
}

/// Exact budget-constrained matching by depth-first branch and bound.
/// With limits disabled the result is provably optimal; under limits the
/// best incumbent is returned with its optimality gap.
pub fn branch_and_bound(
    p: &AllocationProblem,
    limits: SolveLimits,
) -> Result<SolveOutcome, SolverError> {
    branch_and_bound_observed(p, limits, None)
}

/// [`branch_and_bound`] with a per-expanded-node callback receiving each
/// node and its admissible bound, for search audits.
pub fn branch_and_bound_observed(
    p: &AllocationProblem,
    limits: SolveLimits,
    observer: Option<&mut dyn FnMut(&BnbNode, f64)>,
) -> Result<SolveOutcome, SolverError> {
    p.validate()?;
    let sp = SearchProblem::build(p);
    let n = p.beneficiaries.len();
    let mut search = Search {
        sp: &sp,
        st: SearchState::fresh(n),
        incumbent_value: sp.baseline_total,
        incumbent: vec![None; n],
        stats: SolveStats::default(),
        limits,
        started: Instant::now(),
        truncated: false,
        frontier_bound: f64::NEG_INFINITY,
        observer,
    };
    search.expand(f64::INFINITY);

    let plan = plan_from_assignment(p, &search.incumbent);
    let optimal = !search.truncated;
    let gap = if optimal || search.frontier_bound <= search.incumbent_value {
        0.0
    } else if search.incumbent_value > 0.0 {
        (search.frontier_bound - search.incumbent_value) / search.incumbent_value
    } else {
        f64::INFINITY
    };
    Ok(SolveOutcome {
        plan,
        optimal,
        gap,
        stats: search.stats,
    })
}

// ---------------------------------------------------------------------------
// Brute-force oracle
// ---------------------------------------------------------------------------

const BRUTE_MAX_BENEFICIARIES: usize = 12;
const BRUTE_MAX_ROUTES: usize = 8;

/// Canonical plan order for exact ties: the assigned (beneficiary,
/// choice) pairs in beneficiary order, a shorter list before any longer
/// one sharing its prefix.
fn assignment_list_cmp(a: &[Option<PlanChoice>], b: &[Option<PlanChoice>]) -> std::cmp::Ordering {
    let pairs = |v: &[Option<PlanChoice>]| {
        v.iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|c| (i, c)))
            .collect::<Vec<_>>()
    };
    pairs(a).cmp(&pairs(b))
}

/// Exhaustive exact optimum over all assignment vectors × route
/// selections, guarded to 12 beneficiaries and 8 routes. Exact ties
/// resolve to the lexicographically smallest assignment list: smallest
/// beneficiary ids first, then choice order, fewer assignments before
/// more.
pub fn brute_force(p: &AllocationProblem) -> Result<Plan, SolverError> {
    brute_force_restricted(p, &BTreeMap::new(), &BTreeSet::new())
}

/// The exact best completion of a node's fixed decisions, used to audit
/// bound admissibility. Same guard as [`brute_force`].
pub fn brute_force_completion(p: &AllocationProblem, node: &BnbNode) -> Result<Plan, SolverError> {
    brute_force_restricted(p, &node.fixed_in, &node.fixed_out)
}

fn brute_force_restricted(
    p: &AllocationProblem,
    fixed_in: &BTreeMap<BeneficiaryId, PlanChoice>,
    fixed_out: &BTreeSet<(BeneficiaryId, PlanChoice)>,
) -> Result<Plan, SolverError> {
    p.validate()?;
    if p.beneficiaries.len() > BRUTE_MAX_BENEFICIARIES || p.routes.len() > BRUTE_MAX_ROUTES {
        return Err(SolverError::SizeGuard {
            beneficiaries: p.beneficiaries.len(),
            routes: p.routes.len(),
            max_beneficiaries: BRUTE_MAX_BENEFICIARIES,
            max_routes: BRUTE_MAX_ROUTES,
        });
    }
    let n = p.beneficiaries.len();
    let baseline_total = p.baseline_objective();
    let required_routes: BTreeSet<usize> = fixed_in
        .values()
        .filter_map(|c| c.route())
        .collect();
    for r in &required_routes {
        if p.route(*r).is_none() {
            return Err(SolverError::InfeasibleNode(format!(
                "fixed pickup references unknown route {r}"
            )));
        }
    }

    // All route selections: at most one per vehicle, within the vehicle
    // budget, superset of the routes fixed pickups require.
    let mut selections: Vec<Vec<usize>> = Vec::new();
    fn pick(
        routes: &[RouteOption],
        i: usize,
        current: &mut Vec<usize>,
        vehicles: &mut BTreeSet<VehicleId>,
        cap: usize,
        out: &mut Vec<Vec<usize>>,
    ) {
        if i == routes.len() {
            out.push(current.clone());
            return;
        }
        pick(routes, i + 1, current, vehicles, cap, out);
        let r = &routes[i];
        if vehicles.len() < cap && !vehicles.contains(&r.vehicle) {
            vehicles.insert(r.vehicle.clone());
            current.push(r.id);
            pick(routes, i + 1, current, vehicles, cap, out);
            current.pop();
            vehicles.remove(&r.vehicle);
        }
    }
    pick(
        &p.routes,
        0,
        &mut Vec::new(),
        &mut BTreeSet::new(),
        p.capacities.vehicles,
        &mut selections,
    );

    // Best plan over everything: compare objective descending, then the
    // assigned (beneficiary, choice) pair list ascending — beneficiary
    // id first, then choice order, with a shorter list (fewer
    // assignments) before any extension. Exact ties therefore go to the
    // smallest beneficiary ids and the least intervention.
    let mut best: Option<(f64, Vec<Option<PlanChoice>>)> = None;

    for selection in &selections {
        if !required_routes.iter().all(|r| selection.contains(r)) {
            continue;
        }
        let route_cost: f64 = selection
            .iter()
            .map(|r| p.route(*r).expect("selection ids exist").cost)
            .sum();
        if !fits_budget(route_cost, p.budget) {
            continue;
        }
        // Choice lists per beneficiary, canonical order, None first.
        let mut choices: Vec<Vec<Option<PlanChoice>>> = Vec::with_capacity(n);
        let mut feasible_selection = true;
        for b in &p.beneficiaries {
            if let Some(forced) = fixed_in.get(&b.id) {
                if !b.eligible(forced.kind()) {
                    return Err(SolverError::InfeasibleNode(format!(
                        "{} fixed to {forced} but not eligible",
                        b.id
                    )));
                }
                if let PlanChoice::Pickup(r) = forced {
                    if !p.route(*r).is_some_and(|r| r.served.contains(&b.id)) {
                        return Err(SolverError::InfeasibleNode(format!(
                            "{} fixed to {forced} but not served by it",
                            b.id
                        )));
                    }
                    if !selection.contains(r) {
                        feasible_selection = false;
                        break;
                    }
                }
                choices.push(vec![Some(*forced)]);
                continue;
            }
            let mut list = vec![None];
            let allowed = |c: PlanChoice| !fixed_out.contains(&(b.id.clone(), c));
            if b.eligible(InterventionKind::PhoneCall) && allowed(PlanChoice::PhoneCall) {
                list.push(Some(PlanChoice::PhoneCall));
            }
            if b.eligible(InterventionKind::TravelVoucher) && allowed(PlanChoice::TravelVoucher) {
                list.push(Some(PlanChoice::TravelVoucher));
            }
            for r in selection {
                let serves = p.route(*r).expect("selection ids exist").served.contains(&b.id);
                if serves && allowed(PlanChoice::Pickup(*r)) {
                    list.push(Some(PlanChoice::Pickup(*r)));
                }
            }
            if b.eligible(InterventionKind::VaccineDrive) && allowed(PlanChoice::VaccineDrive) {
                list.push(Some(PlanChoice::VaccineDrive));
            }
            // Explore high-gain choices first so early incumbents make the
            // suffix prune effective; the explicit (value, vector)
            // comparison keeps tie resolution order-independent.
            list.sort_by(|x, y| {
                let gx = x.map_or(0.0, |c| b.need(c.kind()).unwrap_or(0.0));
                let gy = y.map_or(0.0, |c| b.need(c.kind()).unwrap_or(0.0));
                gy.total_cmp(&gx).then_with(|| x.cmp(y))
            });
            choices.push(list);
        }
        if !feasible_selection {
            continue;
        }

        // Cost-blind optimistic value of the remaining suffix, for sound
        // pruning: value + suffix < best can never win or tie.
        let mut suffix = vec![0.0; n + 1];
        for i in (0..n).rev() {
            let b = &p.beneficiaries[i];
            let best_gain = choices[i]
                .iter()
                .flatten()
                .map(|c| b.need(c.kind()).unwrap_or(0.0))
                .fold(0.0, f64::max);
            suffix[i] = suffix[i + 1] + best_gain;
        }

        struct Dfs<'a> {
            p: &'a AllocationProblem,
            choices: &'a [Vec<Option<PlanChoice>>],
            suffix: &'a [f64],
            current: Vec<Option<PlanChoice>>,
            best: Option<(f64, Vec<Option<PlanChoice>>)>,
        }
        impl Dfs<'_> {
            fn run(&mut self, i: usize, value: f64, spent: f64, calls: usize, drives: usize) {
                if let Some((bv, bvec)) = &self.best {
                    let reachable = value + self.suffix[i];
                    if reachable < *bv {
                        return;
                    }
                    if i == self.choices.len() {
                        if value > *bv
                            || (value == *bv
                                && assignment_list_cmp(&self.current, bvec)
                                    == std::cmp::Ordering::Less)
                        {
                            self.best = Some((value, self.current.clone()));
                        }
                        return;
                    }
                } else if i == self.choices.len() {
                    self.best = Some((value, self.current.clone()));
                    return;
                }
                let b = &self.p.beneficiaries[i];
                for choice in &self.choices[i] {
                    let (gain, cost, dc, dd) = match choice {
                        None => (0.0, 0.0, 0, 0),
                        Some(c) => {
                            let gain = b.need(c.kind()).expect("choice eligible");
                            match c {
                                PlanChoice::PhoneCall => (gain, self.p.costs.phone_call, 1, 0),
                                PlanChoice::TravelVoucher => {
                                    (gain, self.p.costs.travel_voucher, 0, 0)
                                }
                                PlanChoice::VaccineDrive => {
                                    (gain, self.p.costs.vaccine_drive, 0, 1)
                                }
                                PlanChoice::Pickup(_) => (gain, 0.0, 0, 0),
                            }
                        }
                    };
                    if calls + dc > self.p.capacities.call_slots
                        || drives + dd > self.p.capacities.drive_slots
                        || !fits_budget(spent + cost, self.p.budget)
                    {
                        continue;
                    }
                    self.current.push(*choice);
                    self.run(i + 1, value + gain, spent + cost, calls + dc, drives + dd);
                    self.current.pop();
                }
            }
        }
        let mut dfs = Dfs {
            p,
            choices: &choices,
            suffix: &suffix,
            current: Vec::with_capacity(n),
            best: best.take(),
        };
        dfs.run(0, baseline_total, route_cost, 0, 0);
        best = dfs.best;
    }

    let (_, assigned) =
        best.ok_or_else(|| SolverError::InfeasibleNode("no feasible completion".into()))?;
    Ok(plan_from_assignment(p, &assigned))
}

// ---------------------------------------------------------------------------
// Greedy pruning of dominant vaccine drives
// ---------------------------------------------------------------------------

/// Median of a non-empty slice (mean of the middle two for even counts).
fn median(values: &mut Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// The default "significantly higher" cutoff a drive ratio must clear:
/// twice the median need-per-cost ratio over the positive-need phone
/// call and voucher pairs (the alternatives drives compete with). Zero
/// when no such alternatives exist, so any positive drive ratio counts
/// as dominant.
pub fn default_ratio_threshold(p: &AllocationProblem) -> f64 {
    let mut ratios = Vec::new();
    for b in &p.beneficiaries {
        for kind in [InterventionKind::PhoneCall, InterventionKind::TravelVoucher] {
            if let (Some(need), Some(cost)) = (b.need(kind), p.costs.of(kind)) {
                if need > 0.0 {
                    ratios.push(need / cost);
                }
            }
        }
    }
    median(&mut ratios).map_or(0.0, |m| 2.0 * m)
}

/// Pre-assigns vaccine drives whose need/cost ratio exceeds the threshold
/// (descending ratio, ties by id) until `budget_fraction × budget` or the
/// drive capacity is exhausted. Returns the partial plan and the reduced
/// problem (pruned beneficiaries, budget, and drive slots removed).
pub fn greedy_prune(
    p: &AllocationProblem,
    ratio_threshold: Option<f64>,
    budget_fraction: f64,
) -> Result<(Plan, AllocationProblem), SolverError> {
    p.validate()?;
    if !(0.0..=1.0).contains(&budget_fraction) {
        return Err(SolverError::InvalidProblem(format!(
            "budget fraction {budget_fraction} outside [0, 1]"
        )));
    }
    let threshold = ratio_threshold.unwrap_or_else(|| default_ratio_threshold(p));
    let drive_cost = p.costs.vaccine_drive;
    let mut candidates: Vec<(f64, &BeneficiaryNeeds)> = p
        .beneficiaries
        .iter()
        .filter_map(|b| {
            let need = b.need(InterventionKind::VaccineDrive)?;
            let ratio = need / drive_cost;
            (need > 0.0 && ratio > threshold).then_some((ratio, b))
        })
        .collect();
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));

    let cap_budget = budget_fraction * p.budget;
    let mut taken = Vec::new();
    let mut spent = 0.0;
    for (_, b) in candidates {
        if taken.len() >= p.capacities.drive_slots {
            break;
        }
        if !fits_budget(spent + drive_cost, cap_budget) {
            break;
        }
        spent += drive_cost;
        taken.push(b.id.clone());
    }

    let taken_set: BTreeSet<&BeneficiaryId> = taken.iter().collect();
    let mut assigned = Vec::with_capacity(p.beneficiaries.len());
    for b in &p.beneficiaries {
        assigned.push(if taken_set.contains(&b.id) {
            Some(PlanChoice::VaccineDrive)
        } else {
            None
        });
    }
    let mut partial = plan_from_assignment(p, &assigned);
    // The partial plan stands alone: its objective counts only baselines
    // plus its own drives, as if nobody else is ever assigned.
    partial.objective = p.baseline_objective()
        + taken
            .iter()
            .map(|id| {
                p.beneficiaries
                    .iter()
                    .find(|b| &b.id == id)
                    .and_then(|b| b.need(InterventionKind::VaccineDrive))
                    .unwrap_or(0.0)
            })
            .sum::<f64>();

    let remaining: Vec<BeneficiaryNeeds> = p
        .beneficiaries
        .iter()
        .filter(|b| !taken_set.contains(&b.id))
        .cloned()
        .collect();
    let routes: Vec<RouteOption> = p
        .routes
        .iter()
        .filter_map(|r| {
            let served: Vec<BeneficiaryId> = r
                .served
                .iter()
                .filter(|id| !taken_set.contains(id))
                .cloned()
                .collect();
            (!served.is_empty()).then(|| RouteOption {
                id: r.id,
                vehicle: r.vehicle.clone(),
                cost: r.cost,
                served,
            })
        })
        .collect();
    let reduced = AllocationProblem {
        beneficiaries: remaining,
        routes,
        budget: p.budget - partial.total_cost,
        costs: p.costs,
        capacities: Capacities {
            drive_slots: p.capacities.drive_slots - taken.len(),
            ..p.capacities
        },
    };
    reduced.validate()?;
    Ok((partial, reduced))
}

/// Merges a pruned partial plan with the solve of the reduced problem
/// into one plan over the full problem, re-batching drives globally.
pub fn merge_plans(p: &AllocationProblem, partial: &Plan, solved: &Plan) -> Plan {
    let choice_of = |a: &Assignment| match a.kind {
        InterventionKind::PhoneCall => PlanChoice::PhoneCall,
        InterventionKind::TravelVoucher => PlanChoice::TravelVoucher,
        InterventionKind::PickupService => PlanChoice::Pickup(a.route.unwrap_or(usize::MAX)),
        InterventionKind::VaccineDrive => PlanChoice::VaccineDrive,
    };
    let mut by_id: BTreeMap<&BeneficiaryId, PlanChoice> = BTreeMap::new();
    for a in partial.assignments.iter().chain(&solved.assignments) {
        by_id.insert(&a.beneficiary, choice_of(a));
    }
    let assigned: Vec<Option<PlanChoice>> = p
        .beneficiaries
        .iter()
        .map(|b| by_id.get(&b.id).copied())
        .collect();
    plan_from_assignment(p, &assigned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn needs(
        id: &str,
        baseline: f64,
        call: Option<f64>,
        voucher: Option<f64>,
        pickup: Option<f64>,
        drive: Option<f64>,
    ) -> BeneficiaryNeeds {
        BeneficiaryNeeds {
            id: BeneficiaryId::new(id),
            baseline,
            success: [call, voucher, pickup, drive],
            home_cell: drive.map(|_| CellId::new(1, 1)),
        }
    }

    #[test]
    fn single_beneficiary_gets_the_affordable_improvement() {
        let p = AllocationProblem::new(
            vec![needs("b1", 0.3, Some(0.6), None, None, None)],
            vec![],
            5.0,
        )
        .unwrap();
        let plan = brute_force(&p).unwrap();
        assert_eq!(plan.assignments.len(), 1);
        assert_eq!(plan.assignments[0].kind, InterventionKind::PhoneCall);
        assert!((plan.objective - 0.6).abs() < 1e-12);
        assert!((plan.total_cost - 1.5).abs() < 1e-12);
    }

    #[test]
    fn scarce_budget_goes_to_the_higher_need() {
        // Budget affords exactly one voucher.
        let p = AllocationProblem::new(
            vec![
                needs("b1", 0.4, None, Some(0.55), None, None),
                needs("b2", 0.4, None, Some(0.9), None, None),
            ],
            vec![],
            1.1,
        )
        .unwrap();
        let plan = brute_force(&p).unwrap();
        assert_eq!(plan.assignments.len(), 1);
        assert_eq!(plan.assignments[0].beneficiary.0, "b2");
        let bb = branch_and_bound(&p, SolveLimits::unlimited()).unwrap();
        assert!(bb.optimal);
        assert!((bb.plan.objective - plan.objective).abs() < 1e-12);
    }

    #[test]
    fn exact_ties_pick_the_lexicographically_smallest_vector() {
        // Identical twins; budget affords one call. The smaller id wins.
        let p = AllocationProblem::new(
            vec![
                needs("b1", 0.3, Some(0.5), None, None, None),
                needs("b2", 0.3, Some(0.5), None, None, None),
            ],
            vec![],
            1.5,
        )
        .unwrap();
        let plan = brute_force(&p).unwrap();
        assert_eq!(plan.assignments.len(), 1);
        assert_eq!(plan.assignments[0].beneficiary.0, "b1");
        // A zero-need option is never preferred over leaving unassigned.
        let p2 = AllocationProblem::new(
            vec![needs("b1", 0.5, Some(0.5), None, None, None)],
            vec![],
            10.0,
        )
        .unwrap();
        assert!(brute_force(&p2).unwrap().assignments.is_empty());
    }

    #[test]
    fn budget_zero_solves_to_the_baseline_plan() {
        let p = fixtures::small_allocation(7);
        let p = AllocationProblem { budget: 0.0, ..p };
        let out = branch_and_bound(&p, SolveLimits::unlimited()).unwrap();
        assert!(out.optimal);
        assert!(out.plan.assignments.is_empty());
        assert!((out.plan.objective - p.baseline_objective()).abs() < 1e-12);
        assert_eq!(out.plan.total_cost, 0.0);
    }

    #[test]
    fn unconstrained_bound_is_exactly_the_sum_of_best_choices() {
        let p = fixtures::small_allocation(11);
        let mut p = p;
        p.budget = 1e15;
        p.capacities = Capacities {
            vehicles: usize::MAX,
            call_slots: usize::MAX,
            drive_slots: usize::MAX,
        };
        let node = BnbNode {
            fixed_in: BTreeMap::new(),
            fixed_out: BTreeSet::new(),
            bound: f64::INFINITY,
            depth: 0,
        };
        let bound = upper_bound(&node, &p);
        let expected: f64 = p
            .beneficiaries
            .iter()
            .map(|b| {
                let best_gain = InterventionKind::ALL
                    .iter()
                    .filter_map(|k| b.need(*k))
                    .fold(0.0, f64::max);
                b.baseline + best_gain
            })
            .sum();
        assert!(
            (bound - expected).abs() < 1e-9,
            "bound {bound} vs unconstrained optimum {expected}"
        );
    }

    #[test]
    fn fully_fixed_node_bounds_to_its_exact_objective() {
        let p = AllocationProblem::new(
            vec![
                needs("b1", 0.3, Some(0.6), None, None, None),
                needs("b2", 0.2, None, Some(0.5), None, None),
            ],
            vec![],
            50.0,
        )
        .unwrap();
        let node = BnbNode {
            fixed_in: [
                (BeneficiaryId::new("b1"), PlanChoice::PhoneCall),
                (BeneficiaryId::new("b2"), PlanChoice::TravelVoucher),
            ]
            .into_iter()
            .collect(),
            fixed_out: BTreeSet::new(),
            bound: f64::INFINITY,
            depth: 2,
        };
        let bound = upper_bound(&node, &p);
        assert!((bound - (0.6 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn branch_and_bound_matches_brute_force_on_seeded_instances() {
        for seed in 0..40u64 {
            let p = fixtures::small_allocation(seed);
            let exact = brute_force(&p).unwrap();
            let bb = branch_and_bound(&p, SolveLimits::unlimited()).unwrap();
            assert!(bb.optimal, "seed {seed} not optimal");
            assert!(
                (bb.plan.objective - exact.objective).abs() <= 1e-9,
                "seed {seed}: bb {} vs brute {}",
                bb.plan.objective,
                exact.objective
            );
            let verdict = validate_plan(&bb.plan, &p);
            assert!(verdict.is_valid(), "seed {seed}: {:?}", verdict.violations);
        }
    }

    #[test]
    fn root_bound_is_admissible_on_seeded_instances() {
        for seed in 0..30u64 {
            let p = fixtures::small_allocation(seed);
            let exact = brute_force(&p).unwrap();
            let root = BnbNode {
                fixed_in: BTreeMap::new(),
                fixed_out: BTreeSet::new(),
                bound: f64::INFINITY,
                depth: 0,
            };
            let bound = upper_bound(&root, &p);
            assert!(
                bound >= exact.objective - 1e-9,
                "seed {seed}: root bound {bound} below optimum {}",
                exact.objective
            );
        }
    }

    #[test]
    fn expanded_node_bounds_dominate_their_exact_completions() {
        for seed in [3u64, 9, 17] {
            let p = fixtures::small_allocation(seed);
            let mut nodes = Vec::new();
            {
                let mut observer = |node: &BnbNode, bound: f64| {
                    if nodes.len() < 64 {
                        nodes.push((node.clone(), bound));
                    }
                };
                branch_and_bound_observed(&p, SolveLimits::unlimited(), Some(&mut observer))
                    .unwrap();
            }
            assert!(!nodes.is_empty());
            for (node, bound) in nodes {
                match brute_force_completion(&p, &node) {
                    Ok(completion) => assert!(
                        bound >= completion.objective - 1e-9,
                        "seed {seed}: bound {bound} < completion {}",
                        completion.objective
                    ),
                    Err(SolverError::InfeasibleNode(_)) => {}
                    Err(e) => panic!("seed {seed}: {e}"),
                }
            }
        }
    }

    #[test]
    fn child_bounds_never_exceed_their_parents() {
        for seed in [1u64, 5, 23] {
            let p = fixtures::small_allocation(seed);
            let mut per_depth: Vec<f64> = Vec::new();
            let mut violations = 0;
            {
                let mut observer = |node: &BnbNode, bound: f64| {
                    per_depth.truncate(node.depth);
                    if node.depth > 0 {
                        let parent = per_depth[node.depth - 1];
                        if bound > parent + 1e-9 {
                            violations += 1;
                        }
                    }
                    per_depth.push(bound);
                };
                branch_and_bound_observed(&p, SolveLimits::unlimited(), Some(&mut observer))
                    .unwrap();
            }
            assert_eq!(violations, 0, "seed {seed}");
        }
    }

    #[test]
    fn objective_decomposes_into_baseline_plus_assigned_needs() {
        for seed in 0..20u64 {
            let p = fixtures::small_allocation(seed);
            let out = branch_and_bound(&p, SolveLimits::unlimited()).unwrap();
            let needs_sum: f64 = out
                .plan
                .assignments
                .iter()
                .map(|a| {
                    p.beneficiaries
                        .iter()
                        .find(|b| b.id == a.beneficiary)
                        .and_then(|b| b.need(a.kind))
                        .unwrap()
                })
                .sum();
            let decomposed = p.baseline_objective() + needs_sum;
            assert!(
                (out.plan.objective - decomposed).abs() <= 1e-9,
                "seed {seed}: {} vs {}",
                out.plan.objective,
                decomposed
            );
        }
    }

    #[test]
    fn scaling_costs_and_budget_preserves_the_assignment_set() {
        for seed in 0..20u64 {
            let p = fixtures::small_allocation(seed);
            let scaled = p.scaled(3.7);
            let a = branch_and_bound(&p, SolveLimits::unlimited()).unwrap();
            let b = branch_and_bound(&scaled, SolveLimits::unlimited()).unwrap();
            assert_eq!(a.plan.assignments, b.plan.assignments, "seed {seed}");
            assert_eq!(a.plan.routes, b.plan.routes, "seed {seed}");
        }
    }

    #[test]
    fn routes_open_pickup_seats_only_when_selected() {
        let route = RouteOption {
            id: 0,
            vehicle: VehicleId::new("veh-1"),
            cost: 30.0,
            served: vec![BeneficiaryId::new("b1"), BeneficiaryId::new("b2")],
        };
        let p = AllocationProblem::new(
            vec![
                needs("b1", 0.2, None, None, Some(0.9), None),
                needs("b2", 0.2, None, None, Some(0.8), None),
            ],
            vec![route],
            31.0,
        )
        .unwrap();
        let plan = brute_force(&p).unwrap();
        // One route selection covers both.
        assert_eq!(plan.routes, vec![0]);
        assert_eq!(plan.assignments.len(), 2);
        assert!((plan.total_cost - 30.0).abs() < 1e-12);
        let bb = branch_and_bound(&p, SolveLimits::unlimited()).unwrap();
        assert!((bb.plan.objective - plan.objective).abs() <= 1e-9);

        // Under half the budget the route is unaffordable: nothing assigned.
        let p2 = AllocationProblem { budget: 29.0, ..p };
        let plan2 = brute_force(&p2).unwrap();
        assert!(plan2.assignments.is_empty());
    }

    #[test]
    fn vehicle_limit_restricts_simultaneous_routes() {
        let mk_route = |id: usize, veh: &str, b: &str| RouteOption {
            id,
            vehicle: VehicleId::new(veh),
            cost: 25.0,
            served: vec![BeneficiaryId::new(b)],
        };
        let mut p = AllocationProblem::new(
            vec![
                needs("b1", 0.1, None, None, Some(0.9), None),
                needs("b2", 0.1, None, None, Some(0.9), None),
            ],
            vec![mk_route(0, "veh-1", "b1"), mk_route(1, "veh-2", "b2")],
            1000.0,
        )
        .unwrap();
        p.capacities.vehicles = 1;
        let plan = brute_force(&p).unwrap();
        assert_eq!(plan.routes.len(), 1);
        assert_eq!(plan.assignments.len(), 1);
        let bb = branch_and_bound(&p, SolveLimits::unlimited()).unwrap();
        assert!((bb.plan.objective - plan.objective).abs() <= 1e-9);

        // Same vehicle on both routes: still one route at a time even
        // with a bigger fleet allowance.
        let mut p2 = p.clone();
        p2.capacities.vehicles = 4;
        p2.routes[1].vehicle = VehicleId::new("veh-1");
        let plan2 = brute_force(&p2).unwrap();
        assert_eq!(plan2.routes.len(), 1);
    }

    #[test]
    fn size_guard_rejects_oversized_oracle_calls() {
        let beneficiaries: Vec<BeneficiaryNeeds> = (0..13)
            .map(|i| needs(&format!("b{i:02}"), 0.3, Some(0.5), None, None, None))
            .collect();
        let p = AllocationProblem::new(beneficiaries, vec![], 100.0).unwrap();
        assert!(matches!(
            brute_force(&p),
            Err(SolverError::SizeGuard { beneficiaries: 13, .. })
        ));
    }

    #[test]
    fn validate_plan_accepts_empty_and_flags_overspend_and_fleet() {
        let p = fixtures::small_allocation(3);
        assert!(validate_plan(&Plan::empty(&p), &p).is_valid());

        // Overspend by a cent.
        let mut plan = Plan::empty(&p);
        let victim = p
            .beneficiaries
            .iter()
            .find(|b| b.eligible(InterventionKind::PhoneCall))
            .unwrap();
        plan.assignments.push(Assignment {
            beneficiary: victim.id.clone(),
            kind: InterventionKind::PhoneCall,
            route: None,
            batch: None,
        });
        plan.total_cost = p.costs.phone_call;
        plan.objective = 0.0; // deliberately wrong; flagged separately
        let tight = AllocationProblem {
            budget: p.costs.phone_call - 0.01,
            ..p.clone()
        };
        let verdict = validate_plan(&plan, &tight);
        assert!(verdict
            .violations
            .iter()
            .any(|v| matches!(v, PlanViolation::BudgetExceeded { .. })));

        // Five routes on five vehicles against a four-vehicle fleet.
        let beneficiaries: Vec<BeneficiaryNeeds> = (0..5)
            .map(|i| needs(&format!("b{i}"), 0.2, None, None, Some(0.9), None))
            .collect();
        let routes: Vec<RouteOption> = (0..5)
            .map(|i| RouteOption {
                id: i,
                vehicle: VehicleId::new(format!("veh-{i}")),
                cost: 10.0,
                served: vec![BeneficiaryId::new(format!("b{i}"))],
            })
            .collect();
        let p5 = AllocationProblem::new(beneficiaries, routes, 1000.0).unwrap();
        let plan5 = Plan {
            assignments: (0..5)
                .map(|i| Assignment {
                    beneficiary: BeneficiaryId::new(format!("b{i}")),
                    kind: InterventionKind::PickupService,
                    route: Some(i),
                    batch: None,
                })
                .collect(),
            routes: (0..5).collect(),
            drive_batches: vec![],
            total_cost: 50.0,
            objective: p5.baseline_objective() + 5.0 * 0.7,
        };
        let verdict = validate_plan(&plan5, &p5);
        assert!(verdict
            .violations
            .iter()
            .any(|v| matches!(v, PlanViolation::VehicleCountExceeded { used: 5, limit: 4 })));
    }

    #[test]
    fn prune_with_zero_fraction_is_a_no_op() {
        let p = fixtures::drive_dominant_allocation(5);
        let (partial, reduced) = greedy_prune(&p, None, 0.0).unwrap();
        assert!(partial.assignments.is_empty());
        assert_eq!(reduced, p);
    }

    #[test]
    fn prune_takes_top_needs_when_drives_dominate_uniformly() {
        // Drive success pinned to 1.0, uniform baseline 0.3 → every drive
        // ratio clears the doubled-median threshold; the floor(f·B/cost)
        // highest-ratio beneficiaries are taken in id order on ties.
        let beneficiaries: Vec<BeneficiaryNeeds> = (0..8)
            .map(|i| {
                let mut b = needs(
                    &format!("b{i}"),
                    0.3,
                    Some(0.31),
                    None,
                    None,
                    Some(1.0),
                );
                b.home_cell = Some(CellId::new(i as u16 % 3, i as u16 / 3));
                b
            })
            .collect();
        let p = AllocationProblem::new(beneficiaries, vec![], 100.0).unwrap();
        let (partial, reduced) = greedy_prune(&p, None, 0.5).unwrap();
        // floor(0.5 × 100 / 20) = 2 drives.
        assert_eq!(partial.assignments.len(), 2);
        assert!(partial
            .assignments
            .iter()
            .all(|a| a.kind == InterventionKind::VaccineDrive));
        assert_eq!(partial.assignments[0].beneficiary.0, "b0");
        assert_eq!(partial.assignments[1].beneficiary.0, "b1");
        assert!((partial.total_cost - 40.0).abs() < 1e-12);
        assert_eq!(reduced.beneficiaries.len(), 6);
        assert!((reduced.budget - 60.0).abs() < 1e-12);
        assert_eq!(
            reduced.capacities.drive_slots,
            p.capacities.drive_slots - 2
        );
    }

    #[test]
    fn prune_then_solve_stays_near_the_exact_optimum() {
        let mut worst: f64 = 0.0;
        for seed in 0..15u64 {
            let p = fixtures::drive_dominant_allocation(seed);
            let exact = brute_force(&p).unwrap();
            let (partial, reduced) = greedy_prune(&p, None, 0.5).unwrap();
            let solved = branch_and_bound(&reduced, SolveLimits::unlimited()).unwrap();
            let merged = merge_plans(&p, &partial, &solved.plan);
            let verdict = validate_plan(&merged, &p);
            assert!(verdict.is_valid(), "seed {seed}: {:?}", verdict.violations);
            let gap = (exact.objective - merged.objective) / exact.objective;
            worst = worst.max(gap);
        }
        assert!(worst <= 0.02, "worst pruning gap {worst} above 2%");
    }

    #[test]
    fn drive_batches_group_row_major_and_cap_at_twelve() {
        let beneficiaries: Vec<BeneficiaryNeeds> = (0..15)
            .map(|i| {
                let mut b = needs(&format!("b{i:02}"), 0.2, None, None, None, Some(1.0));
                // Cells: x advances fastest, row grows every 5.
                b.home_cell = Some(CellId::new((i % 5) as u16, (i / 5) as u16));
                b
            })
            .collect();
        let mut p = AllocationProblem::new(beneficiaries, vec![], 1000.0).unwrap();
        p.capacities.drive_slots = 24;
        let assigned: Vec<Option<PlanChoice>> =
            vec![Some(PlanChoice::VaccineDrive); p.beneficiaries.len()];
        let plan = plan_from_assignment(&p, &assigned);
        assert_eq!(plan.drive_batches.len(), 2);
        assert_eq!(plan.drive_batches[0].members.len(), 12);
        assert_eq!(plan.drive_batches[1].members.len(), 3);
        // Row-major: batch 0 is rows 0–1 plus the start of row 2.
        assert_eq!(plan.drive_batches[0].members[0].0, "b00");
        assert_eq!(plan.drive_batches[1].members[0].0, "b12");
        let verdict = validate_plan(&plan, &p);
        assert!(verdict.is_valid(), "{:?}", verdict.violations);
    }

    #[test]
    fn node_cap_reports_a_gap_and_a_feasible_incumbent() {
        let p = fixtures::sized_allocation(1, 120, 10, 300.0);
        let out = branch_and_bound(
            &p,
            SolveLimits {
                node_cap: Some(50),
                time_cap: None,
            },
        )
        .unwrap();
        assert!(!out.optimal);
        assert!(out.gap >= 0.0);
        let verdict = validate_plan(&out.plan, &p);
        assert!(verdict.is_valid(), "{:?}", verdict.violations);
    }

    #[test]
    fn plan_json_round_trip_is_exact() {
        let p = fixtures::small_allocation(19);
        let out = branch_and_bound(&p, SolveLimits::unlimited()).unwrap();
        let text = serde_json::to_string_pretty(&out.plan).unwrap();
        let back: Plan = serde_json::from_str(&text).unwrap();
        assert_eq!(back, out.plan);
        assert_eq!(serde_json::to_string_pretty(&back).unwrap(), text);
    }
}

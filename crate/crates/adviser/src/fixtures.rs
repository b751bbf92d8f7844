//! Seeded, fully deterministic instance generators. Tests, benchmarks,
//! and the demo subcommands all draw their synthetic worlds from here so
//! results are reproducible by seed alone.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{Beneficiary, BeneficiaryId, CellId, CenterId, DailyWindow, HealthCenter, VehicleId};
use crate::ingest::{emit_registry, FieldValue, HeaderSpec, RawRecord};
use crate::pipeline::{
    BnbConfig, CapacitiesConfig, CostsConfig, GlsRunConfig, PeriodConfig, PipelineConfig,
    PruneConfig, SiteConfig,
};
use crate::routing::{PickupCandidate, VehicleSpec};
use crate::sim::{synth_population, train_models_on_sample, PopulationParams};
use crate::solver::{AllocationProblem, BeneficiaryNeeds, Capacities, RouteOption, UnitCosts};
use crate::travel::{
    BoundingBox, Grid, MatrixStore, QueryCostLedger, SyntheticTravelProvider, TravelTimeMatrix,
};

fn clamp01(p: f64) -> f64 {
    p.clamp(0.0, 1.0)
}

/// A small random matching instance: up to 10 beneficiaries with mixed
/// kind eligibility, up to 6 pooled routes across 4 vehicles, a random
/// budget, and occasionally tight capacities. Sized for the exhaustive
/// oracle.
pub fn small_allocation(seed: u64) -> AllocationProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_A110);
    let n = rng.gen_range(4..=10usize);
    let mut beneficiaries = Vec::with_capacity(n);
    for i in 0..n {
        let baseline = rng.gen_range(0.2..=0.6);
        let mut success = [None; 4];
        // Eligibility mix: calls common, vouchers frequent, pickup and
        // drives rarer. Gains can be negative so the solvers must prefer
        // leaving those beneficiaries alone.
        let gain = |rng: &mut ChaCha8Rng| clamp01(baseline + rng.gen_range(-0.1..=0.4));
        if rng.gen_bool(0.85) {
            success[0] = Some(gain(&mut rng));
        }
        if rng.gen_bool(0.7) {
            success[1] = Some(gain(&mut rng));
        }
        if rng.gen_bool(0.6) {
            success[2] = Some(gain(&mut rng));
        }
        if rng.gen_bool(0.5) {
            success[3] = Some(gain(&mut rng));
        }
        beneficiaries.push(BeneficiaryNeeds {
            id: BeneficiaryId::new(format!("b{i:02}")),
            baseline,
            success,
            home_cell: Some(CellId::new(rng.gen_range(0..10), rng.gen_range(0..10))),
        });
    }

    let pickup_eligible: Vec<BeneficiaryId> = beneficiaries
        .iter()
        .filter(|b| b.success[2].is_some())
        .map(|b| b.id.clone())
        .collect();
    let mut routes = Vec::new();
    if !pickup_eligible.is_empty() {
        let m = rng.gen_range(0..=6usize).min(4 + rng.gen_range(0..=2));
        for id in 0..m {
            let take = rng.gen_range(1..=pickup_eligible.len().min(4));
            let mut served = BTreeSet::new();
            for _ in 0..take {
                served.insert(pickup_eligible[rng.gen_range(0..pickup_eligible.len())].clone());
            }
            routes.push(RouteOption {
                id,
                vehicle: VehicleId::new(format!("veh-{}", rng.gen_range(1..=4))),
                cost: rng.gen_range(22.0..=38.0),
                served: served.into_iter().collect(),
            });
        }
    }

    let capacities = Capacities {
        vehicles: rng.gen_range(1..=4),
        call_slots: *[1, 2, 200].get(rng.gen_range(0..3)).unwrap(),
        drive_slots: *[1, 3, 48].get(rng.gen_range(0..3)).unwrap(),
    };
    AllocationProblem {
        beneficiaries,
        routes,
        budget: rng.gen_range(0.0..=60.0),
        costs: UnitCosts::default(),
        capacities,
    }
}

/// An instance family where door-to-door drives dominate: drive success
/// pinned to 1.0, other gains capped at 0.02, generous drive capacity.
/// Sized for the exhaustive oracle.
pub fn drive_dominant_allocation(seed: u64) -> AllocationProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD21F_E0D0);
    let n = rng.gen_range(6..=10usize);
    let mut beneficiaries = Vec::with_capacity(n);
    for i in 0..n {
        let baseline = rng.gen_range(0.15..=0.3);
        let mut success = [None; 4];
        if rng.gen_bool(0.8) {
            success[0] = Some(clamp01(baseline + rng.gen_range(0.0..=0.02)));
        }
        if rng.gen_bool(0.8) {
            success[1] = Some(clamp01(baseline + rng.gen_range(0.0..=0.02)));
        }
        success[3] = Some(1.0);
        beneficiaries.push(BeneficiaryNeeds {
            id: BeneficiaryId::new(format!("b{i:02}")),
            baseline,
            success,
            home_cell: Some(CellId::new(rng.gen_range(0..10), rng.gen_range(0..10))),
        });
    }
    AllocationProblem {
        beneficiaries,
        routes: Vec::new(),
        budget: rng.gen_range(40.0..=200.0),
        costs: UnitCosts::default(),
        capacities: Capacities::with_nurse_days(4),
    }
}

/// A larger instance for stress and truncation tests: `n` beneficiaries,
/// `n_routes` pooled routes over the default fleet, and the given budget.
pub fn sized_allocation(seed: u64, n: usize, n_routes: usize, budget: f64) -> AllocationProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ED_0000);
    let mut beneficiaries = Vec::with_capacity(n);
    for i in 0..n {
        let baseline = rng.gen_range(0.2..=0.6);
        let mut success = [None; 4];
        let gain = |rng: &mut ChaCha8Rng| clamp01(baseline + rng.gen_range(-0.05..=0.35));
        if rng.gen_bool(0.85) {
            success[0] = Some(gain(&mut rng));
        }
        if rng.gen_bool(0.7) {
            success[1] = Some(gain(&mut rng));
        }
        if rng.gen_bool(0.6) {
            success[2] = Some(gain(&mut rng));
        }
        if rng.gen_bool(0.5) {
            success[3] = Some(gain(&mut rng));
        }
        beneficiaries.push(BeneficiaryNeeds {
            id: BeneficiaryId::new(format!("b{i:04}")),
            baseline,
            success,
            home_cell: Some(CellId::new(rng.gen_range(0..40), rng.gen_range(0..40))),
        });
    }
    let pickup_eligible: Vec<BeneficiaryId> = beneficiaries
        .iter()
        .filter(|b| b.success[2].is_some())
        .map(|b| b.id.clone())
        .collect();
    let mut routes = Vec::new();
    for id in 0..n_routes {
        if pickup_eligible.is_empty() {
            break;
        }
        let take = rng.gen_range(3..=8usize).min(pickup_eligible.len());
        let mut served = BTreeSet::new();
        for _ in 0..take * 2 {
            if served.len() >= take {
                break;
            }
            served.insert(pickup_eligible[rng.gen_range(0..pickup_eligible.len())].clone());
        }
        routes.push(RouteOption {
            id,
            vehicle: VehicleId::new(format!("veh-{}", rng.gen_range(1..=4))),
            cost: rng.gen_range(22.0..=38.0),
            served: served.into_iter().collect(),
        });
    }
    AllocationProblem {
        beneficiaries,
        routes,
        budget,
        costs: UnitCosts::default(),
        capacities: Capacities::default(),
    }
}

/// A complete synthetic routing world: a `span`×`span` grid of 1 km
/// cells with the off-peak synthetic travel matrix fully built, centers
/// spread along the diagonal, and vehicles garaged at the origin corner.
pub struct RoutingWorld {
    pub grid: Grid,
    pub matrix: TravelTimeMatrix,
    pub centers: Vec<HealthCenter>,
    pub vehicles: Vec<VehicleSpec>,
}

pub fn routing_world(span: u16, n_centers: usize, n_vehicles: usize) -> RoutingWorld {
    assert!(span >= 2 && span <= 10, "world span out of range");
    let bbox = BoundingBox::new(7.30, 3.80, 7.30 + 0.009 * span as f64, 3.80 + 0.009 * span as f64)
        .expect("fixture bounding box");
    let grid = Grid::new(bbox, 1.0).expect("fixture grid");
    let cells: BTreeSet<CellId> = (0..span)
        .flat_map(|x| (0..span).map(move |y| CellId::new(x, y)))
        .collect();
    let mut matrix = TravelTimeMatrix::empty(grid.clone(), "offpeak", "synthetic", cells)
        .expect("fixture matrix");
    matrix
        .fill(&SyntheticTravelProvider::default(), &QueryCostLedger::default())
        .expect("synthetic fill");
    let centers = (0..n_centers)
        .map(|i| {
            let along = ((i + 1) * (span as usize - 1) / (n_centers + 1).max(1)) as u16;
            HealthCenter::new(CenterId::new(format!("hc-{}", i + 1)), CellId::new(along, along))
        })
        .collect();
    let vehicles = (0..n_vehicles)
        .map(|i| VehicleSpec::new(format!("veh-{}", i + 1), CellId::new(0, 0)))
        .collect();
    RoutingWorld {
        grid,
        matrix,
        centers,
        vehicles,
    }
}

/// Seeded pickup candidates scattered over the world: morning-feasible
/// availability windows and needs in (0, 1).
pub fn seeded_pickup_candidates(n: usize, seed: u64, span: u16) -> Vec<PickupCandidate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0C4D_1DA7);
    (0..n)
        .map(|i| {
            let availability = if rng.gen_bool(0.7) {
                vec![DailyWindow::all_day()]
            } else {
                let start = rng.gen_range(480..=540u16);
                vec![DailyWindow::new(start, start + rng.gen_range(120..=300)).unwrap()]
            };
            PickupCandidate {
                id: BeneficiaryId::new(format!("p{i:02}")),
                cell: CellId::new(rng.gen_range(0..span), rng.gen_range(0..span)),
                availability,
                need: rng.gen_range(0.05..=0.9),
            }
        })
        .collect()
}

/// Converts simulator beneficiaries into raw registry rows: deterministic
/// street addresses, phone numbers matching reachability, and the three
/// raw feature columns the ingest header expects.
pub fn raw_records_from_sim(registry: &[Beneficiary]) -> Vec<RawRecord> {
    const STREETS: [&str; 8] = [
        "Oke", "Bodija", "Agbowo", "Sango", "Molete", "Apata", "Eleyele", "Dugbe",
    ];
    registry
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let values = b.features.values();
            let mut features = BTreeMap::new();
            features.insert(
                "household_income_usd".to_string(),
                FieldValue::Numeric(values[0]),
            );
            features.insert("mother_age_years".to_string(), FieldValue::Numeric(values[1]));
            features.insert("children_count".to_string(), FieldValue::Numeric(values[2]));
            RawRecord {
                id: b.id.as_str().to_string(),
                address: format!(
                    "{} {} Rd, Ward {}",
                    1 + (i * 7) % 97,
                    STREETS[i % STREETS.len()],
                    i % 9
                ),
                phone: if b.phone_reachable {
                    format!("0803-{:03}-{:04}", i % 1000, (i * 37) % 10_000)
                } else {
                    String::new()
                },
                child_birth_date: b.child_birth_date,
                received_doses: b.received_doses.iter().cloned().collect(),
                availability: b.availability.clone(),
                features,
            }
        })
        .collect()
}

/// Writes a complete on-disk world for pipeline runs under `dir` — registry
/// CSV, off-peak travel matrix store, trained model set — and returns a
/// config wired to it. Deterministic per seed.
pub fn pipeline_world(dir: &Path, n: usize, seed: u64) -> PipelineConfig {
    let span = 10u16;
    let bbox = BoundingBox::new(7.30, 3.80, 7.30 + 0.009 * span as f64, 3.80 + 0.009 * span as f64)
        .expect("fixture bounding box");
    let grid = Grid::new(bbox, 1.0).expect("fixture grid");
    let cells: BTreeSet<CellId> = (0..grid.cols)
        .flat_map(|x| (0..grid.rows).map(move |y| CellId::new(x, y)))
        .collect();
    let mut matrix = TravelTimeMatrix::empty(grid.clone(), "offpeak", "synthetic", cells)
        .expect("fixture matrix");
    matrix
        .fill(&SyntheticTravelProvider::default(), &QueryCostLedger::default())
        .expect("synthetic fill");
    let store = MatrixStore::open(dir.join("matrix")).expect("matrix store");
    store.save(&matrix).expect("matrix save");

    let train_params = PopulationParams {
        n: 400,
        ..PopulationParams::default()
    };
    let (train_reg, truth) =
        synth_population(&train_params, seed ^ 0x70_1D).expect("training population");
    let models =
        train_models_on_sample(&train_reg, &truth, 250, 1.0, seed ^ 0x0D_E1).expect("models");
    std::fs::write(dir.join("models.json"), models.to_json()).expect("models write");

    let pop = PopulationParams {
        n,
        ..PopulationParams::default()
    };
    let (registry, _) = synth_population(&pop, seed).expect("registry population");
    let records = raw_records_from_sim(&registry);
    let csv = emit_registry(&records, &HeaderSpec::standard()).expect("registry emit");
    std::fs::write(dir.join("registry.csv"), csv).expect("registry write");

    let lat = |f: f64| bbox.min_lat + f * (bbox.max_lat - bbox.min_lat);
    let lon = |f: f64| bbox.min_lon + f * (bbox.max_lon - bbox.min_lon);
    PipelineConfig {
        period: PeriodConfig {
            from: NaiveDate::from_ymd_opt(2026, 8, 1).unwrap(),
            to: NaiveDate::from_ymd_opt(2026, 10, 31).unwrap(),
        },
        budget: 500.0,
        seed,
        registry: dir.join("registry.csv"),
        model: dir.join("models.json"),
        matrix: dir.join("matrix"),
        matrix_period: "offpeak".to_string(),
        out_dir: dir.join("runs"),
        geocache: Some(dir.join("geocache.json")),
        costs: CostsConfig::default(),
        capacities: CapacitiesConfig::default(),
        prune: PruneConfig::default(),
        gls: GlsRunConfig {
            iterations: 60,
            pool_cap: 50,
            lambda: None,
            candidate_cap: 80,
        },
        bnb: BnbConfig {
            node_cap: Some(20_000),
            time_cap_secs: None,
        },
        centers: vec![
            SiteConfig {
                id: "hc-1".to_string(),
                lat: lat(0.25),
                lon: lon(0.25),
                deadline_min: None,
            },
            SiteConfig {
                id: "hc-2".to_string(),
                lat: lat(0.75),
                lon: lon(0.75),
                deadline_min: None,
            },
        ],
        vehicles: vec![
            SiteConfig {
                id: "veh-1".to_string(),
                lat: lat(0.05),
                lon: lon(0.05),
                deadline_min: None,
            },
            SiteConfig {
                id: "veh-2".to_string(),
                lat: lat(0.95),
                lon: lon(0.05),
                deadline_min: None,
            },
        ],
    }
}

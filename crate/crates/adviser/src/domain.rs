//! Core data model: beneficiaries, health centers, the immunization
//! schedule, and eligibility-window computation.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::LazyLock;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimate::FeatureVector;

const DEFAULT_SCHEDULE_TOML: &str = include_str!("data/default_schedule.toml");
const DAYS_PER_MONTH: f64 = 30.4;

/// Minutes in a day; daily windows are clamped to this.
pub const MINUTES_PER_DAY: u16 = 1440;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("window half-width {0} outside the allowed range [3, 5] days")]
    HalfWidthOutOfRange(u8),
    #[error("duplicate beneficiary id {0:?} in registry")]
    DuplicateId(String),
    #[error("invalid time window: start {start} after end {end}")]
    WindowInverted { start: NaiveDate, end: NaiveDate },
    #[error("invalid daily window: {0}-{1} (minutes since midnight, start <= end <= 1440)")]
    DailyWindowInvalid(u16, u16),
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("failed to read schedule file: {0}")]
    ScheduleIo(#[from] std::io::Error),
}

/// Stable beneficiary identifier taken verbatim from the registry.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BeneficiaryId(pub String);

impl BeneficiaryId {
    pub fn new(id: impl Into<String>) -> Self {
        BeneficiaryId(id.into())
    }
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for BeneficiaryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CenterId(pub String);

impl CenterId {
    pub fn new(id: impl Into<String>) -> Self {
        CenterId(id.into())
    }
}

impl fmt::Display for CenterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub String);

impl VehicleId {
    pub fn new(id: impl Into<String>) -> Self {
        VehicleId(id.into())
    }
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A square grid cell, addressed by east index `x` and north index `y`
/// from the south-west corner of the bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellId {
    pub x: u16,
    pub y: u16,
}

impl CellId {
    pub fn new(x: u16, y: u16) -> Self {
        CellId { x, y }
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

/// The four intervention types. The declaration order is the canonical
/// tie-break order used by the solver.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    PhoneCall,
    TravelVoucher,
    PickupService,
    VaccineDrive,
}

impl InterventionKind {
    pub const ALL: [InterventionKind; 4] = [
        InterventionKind::PhoneCall,
        InterventionKind::TravelVoucher,
        InterventionKind::PickupService,
        InterventionKind::VaccineDrive,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            InterventionKind::PhoneCall => "phone_call",
            InterventionKind::TravelVoucher => "travel_voucher",
            InterventionKind::PickupService => "pickup_service",
            InterventionKind::VaccineDrive => "vaccine_drive",
        }
    }
}

impl fmt::Display for InterventionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Inclusive calendar window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl TimeWindow {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self, DomainError> {
        if start > end {
            return Err(DomainError::WindowInverted { start, end });
        }
        Ok(TimeWindow { start, end })
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }

    pub fn intersects(&self, other: &TimeWindow) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    /// Width in whole days, inclusive of both endpoints.
    pub fn width_days(&self) -> i64 {
        (self.end - self.start).num_days() + 1
    }
}

impl fmt::Display for TimeWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.start, self.end)
    }
}

/// A recurring same-day availability window, in minutes since midnight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DailyWindow {
    pub start_min: u16,
    pub end_min: u16,
}

impl DailyWindow {
    pub fn new(start_min: u16, end_min: u16) -> Result<Self, DomainError> {
        if start_min > end_min || end_min > MINUTES_PER_DAY {
            return Err(DomainError::DailyWindowInvalid(start_min, end_min));
        }
        Ok(DailyWindow { start_min, end_min })
    }

    pub fn all_day() -> Self {
        DailyWindow {
            start_min: 0,
            end_min: MINUTES_PER_DAY,
        }
    }

    pub fn contains(&self, minute: u16) -> bool {
        self.start_min <= minute && minute <= self.end_min
    }
}

impl fmt::Display for DailyWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:02}:{:02}-{:02}:{:02}",
            self.start_min / 60,
            self.start_min % 60,
            self.end_min / 60,
            self.end_min % 60
        )
    }
}

/// One dose on the schedule. Identity is (name, group): the same vaccine
/// name may legitimately appear in more than one schedule row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaccineDose {
    pub name: String,
    /// Days since birth at which the dose is prescribed.
    pub due_age_days: u32,
    /// Schedule row identifier, e.g. "week-6".
    pub group: String,
}

/// Expansion rule for a dose repeating on a fixed cadence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurringRule {
    pub vaccine: String,
    pub group: String,
    pub start_days: u32,
    pub every_days: u32,
    pub until_days: u32,
}

impl RecurringRule {
    /// All concrete instances, named `"<vaccine>#<k>"`, due on
    /// `start + (k-1)*every`, never past `until_days`.
    pub fn expand(&self) -> Vec<VaccineDose> {
        let mut out = Vec::new();
        let mut due = self.start_days;
        let mut k = 1u32;
        while due <= self.until_days {
            out.push(VaccineDose {
                name: format!("{}#{}", self.vaccine, k),
                due_age_days: due,
                group: self.group.clone(),
            });
            due += self.every_days;
            k += 1;
        }
        out
    }
}

/// The full dose schedule, recurring instances already expanded, sorted by
/// due age. `half_width_days` is the matching-window half-width applied by
/// [`dose_window`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaccineSchedule {
    pub doses: Vec<VaccineDose>,
    pub recurring: Option<RecurringRule>,
    pub half_width_days: u8,
}

#[derive(Deserialize)]
struct ScheduleFile {
    half_width_days: Option<u8>,
    #[serde(default)]
    row: Vec<ScheduleRow>,
    recurring: Option<RecurringFile>,
}

#[derive(Deserialize)]
struct ScheduleRow {
    group: String,
    age_days: Option<u32>,
    age_weeks: Option<u32>,
    age_months: Option<u32>,
    vaccines: Vec<String>,
}

#[derive(Deserialize)]
struct RecurringFile {
    group: String,
    vaccine: String,
    start_days: u32,
    every_days: u32,
    until_days: u32,
}

impl ScheduleRow {
    fn due_age_days(&self) -> Result<u32, DomainError> {
        match (self.age_days, self.age_weeks, self.age_months) {
            (Some(d), None, None) => Ok(d),
            (None, Some(w), None) => Ok(w * 7),
            (None, None, Some(m)) => Ok((m as f64 * DAYS_PER_MONTH).round() as u32),
            _ => Err(DomainError::Schedule(format!(
                "row {:?}: exactly one of age_days, age_weeks, age_months required",
                self.group
            ))),
        }
    }
}

static DEFAULT_SCHEDULE: LazyLock<VaccineSchedule> = LazyLock::new(|| {
    VaccineSchedule::from_toml_str(DEFAULT_SCHEDULE_TOML)
        .expect("embedded default schedule must parse")
});

impl VaccineSchedule {
    /// The embedded default schedule.
    pub fn default_schedule() -> &'static VaccineSchedule {
        &DEFAULT_SCHEDULE
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, DomainError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, DomainError> {
        let file: ScheduleFile =
            toml::from_str(text).map_err(|e| DomainError::Schedule(e.to_string()))?;
        let half_width = file.half_width_days.unwrap_or(4);
        check_half_width(half_width)?;

        let mut doses = Vec::new();
        for row in &file.row {
            let due = row.due_age_days()?;
            for name in &row.vaccines {
                doses.push(VaccineDose {
                    name: name.clone(),
                    due_age_days: due,
                    group: row.group.clone(),
                });
            }
        }
        let recurring = file.recurring.map(|r| RecurringRule {
            vaccine: r.vaccine,
            group: r.group,
            start_days: r.start_days,
            every_days: r.every_days,
            until_days: r.until_days,
        });
        if let Some(rule) = &recurring {
            if rule.every_days == 0 {
                return Err(DomainError::Schedule(
                    "recurring every_days must be positive".into(),
                ));
            }
            doses.extend(rule.expand());
        }
        doses.sort_by(|a, b| a.due_age_days.cmp(&b.due_age_days));

        let schedule = VaccineSchedule {
            doses,
            recurring,
            half_width_days: half_width,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    fn validate(&self) -> Result<(), DomainError> {
        let mut seen = BTreeSet::new();
        for d in &self.doses {
            if !seen.insert((d.group.clone(), d.name.clone())) {
                return Err(DomainError::Schedule(format!(
                    "dose {:?} duplicated within group {:?}",
                    d.name, d.group
                )));
            }
        }
        if self
            .doses
            .windows(2)
            .any(|w| w[0].due_age_days > w[1].due_age_days)
        {
            return Err(DomainError::Schedule("doses not sorted by due age".into()));
        }
        Ok(())
    }

    pub fn groups(&self) -> BTreeSet<&str> {
        self.doses.iter().map(|d| d.group.as_str()).collect()
    }

    pub fn dose_names(&self) -> BTreeSet<&str> {
        self.doses.iter().map(|d| d.name.as_str()).collect()
    }
}

/// A mother + child record: the unit of allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Beneficiary {
    pub id: BeneficiaryId,
    pub features: FeatureVector,
    /// Grid cell of the home address; `None` when geocoding failed, in
    /// which case only non-travel interventions apply.
    pub home_cell: Option<CellId>,
    pub child_birth_date: NaiveDate,
    pub received_doses: BTreeSet<String>,
    /// Non-overlapping same-day windows in which a pickup may happen.
    pub availability: Vec<DailyWindow>,
    pub phone_reachable: bool,
}

impl Beneficiary {
    /// True if `minute` falls inside one of the availability windows.
    pub fn available_at(&self, minute: u16) -> bool {
        self.availability.iter().any(|w| w.contains(minute))
    }

    /// Whether an intervention kind can be offered to this beneficiary at
    /// all: calls need a reachable phone, travel-based kinds need a resolved
    /// home cell, and a voucher can always be handed over in person.
    pub fn intervention_applies(&self, kind: InterventionKind) -> bool {
        match kind {
            InterventionKind::PhoneCall => self.phone_reachable,
            InterventionKind::TravelVoucher => true,
            InterventionKind::PickupService | InterventionKind::VaccineDrive => {
                self.home_cell.is_some()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthCenter {
    pub id: CenterId,
    pub cell: CellId,
    /// Latest arrival time (minutes since midnight) at which dropped-off
    /// mothers can still be served. Defaults to 11:00.
    pub service_deadline_min: u16,
}

pub const DEFAULT_SERVICE_DEADLINE_MIN: u16 = 11 * 60;

impl HealthCenter {
    pub fn new(id: CenterId, cell: CellId) -> Self {
        HealthCenter {
            id,
            cell,
            service_deadline_min: DEFAULT_SERVICE_DEADLINE_MIN,
        }
    }
}

fn check_half_width(half_width: u8) -> Result<(), DomainError> {
    if !(3..=5).contains(&half_width) {
        return Err(DomainError::HalfWidthOutOfRange(half_width));
    }
    Ok(())
}

/// The calendar window in which `dose` may be matched for a child born on
/// `birth_date`: `2 * half_width + 1` days centered on the prescribed date.
pub fn dose_window(
    dose: &VaccineDose,
    birth_date: NaiveDate,
    half_width: u8,
) -> Result<TimeWindow, DomainError> {
    check_half_width(half_width)?;
    let center = birth_date + Duration::days(dose.due_age_days as i64);
    TimeWindow::new(
        center - Duration::days(half_width as i64),
        center + Duration::days(half_width as i64),
    )
}

/// Doses still owed to `b` whose matching window intersects `horizon`,
/// in schedule order.
pub fn next_due_doses(
    b: &Beneficiary,
    schedule: &VaccineSchedule,
    horizon: &TimeWindow,
) -> Vec<(VaccineDose, TimeWindow)> {
    schedule
        .doses
        .iter()
        .filter(|d| !b.received_doses.contains(&d.name))
        .filter_map(|d| {
            let w = dose_window(d, b.child_birth_date, schedule.half_width_days).ok()?;
            w.intersects(horizon).then(|| (d.clone(), w))
        })
        .collect()
}

/// A registry entry together with the doses due inside the horizon.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EligibleBeneficiary {
    pub beneficiary: Beneficiary,
    pub due_doses: Vec<(VaccineDose, TimeWindow)>,
}

/// Filters the registry down to beneficiaries with at least one dose due
/// in `horizon`, preserving registry order. Ids must be unique.
pub fn eligible_beneficiaries(
    registry: &[Beneficiary],
    schedule: &VaccineSchedule,
    horizon: &TimeWindow,
) -> Result<Vec<EligibleBeneficiary>, DomainError> {
    let mut seen = BTreeSet::new();
    for b in registry {
        if !seen.insert(&b.id) {
            return Err(DomainError::DuplicateId(b.id.0.clone()));
        }
    }
    Ok(registry
        .iter()
        .filter_map(|b| {
            let due = next_due_doses(b, schedule, horizon);
            (!due.is_empty()).then(|| EligibleBeneficiary {
                beneficiary: b.clone(),
                due_doses: due,
            })
        })
        .collect())
}

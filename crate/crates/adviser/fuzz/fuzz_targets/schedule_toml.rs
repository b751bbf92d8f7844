//! Fuzzes the vaccine dose-schedule TOML parser. Accepted schedules must
//! uphold the invariants the eligibility pass relies on: doses sorted by
//! due age and no (group, dose) pair listed twice.

#![no_main]

use adviser::domain::VaccineSchedule;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(schedule) = VaccineSchedule::from_toml_str(text) else {
        return;
    };
    let mut seen = std::collections::BTreeSet::new();
    for pair in schedule.doses.windows(2) {
        assert!(
            pair[0].due_age_days <= pair[1].due_age_days,
            "accepted schedule with unsorted doses"
        );
    }
    for dose in &schedule.doses {
        assert!(
            seen.insert((dose.group.clone(), dose.name.clone())),
            "accepted schedule with duplicate dose {:?}/{:?}",
            dose.group,
            dose.name
        );
    }
});

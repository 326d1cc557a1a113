use adl_core::policies::{
    leverage_priority_check, path_gap, run_property, sybil_gain, wash_trade_invariance, Counterexample, Policy,
    PolicyState, Property, PropertyOutcome,
};

const SEED: u64 = 2024;
const TRIALS: usize = 1000;
const ARCHIVE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/policy_counterexamples.json");

fn archived() -> Vec<PropertyOutcome> {
    serde_json::from_str(&std::fs::read_to_string(ARCHIVE).unwrap()).unwrap()
}

/// Re-evaluates a stored counterexample from scratch.
fn still_violates(policy: Policy, c: &Counterexample) -> bool {
    match c {
        Counterexample::Sybil {
            others,
            attacker,
            split,
            p_tau,
            q_total,
            ..
        } => {
            let (unsplit, splitted) = sybil_gain(policy, others, attacker, split, *p_tau, *q_total).unwrap();
            splitted < unsplit - 1e-9
        }
        Counterexample::PathIndependence { state, p_tau, q1, q2, .. } => {
            path_gap(policy, state, *p_tau, *q1, *q2).unwrap() > 1e-9
        }
        Counterexample::WashTrade {
            accounts,
            p_tau,
            q_total,
            perturbation,
        } => !wash_trade_invariance(policy, accounts, *p_tau, *q_total, perturbation).unwrap(),
        Counterexample::LeveragePriority { state, p_tau } => !leverage_priority_check(policy, state, *p_tau).unwrap(),
    }
}

/// Writes the archive; run with `--ignored` after changing the search.
#[test]
#[ignore]
fn regenerate_archive() {
    let found: Vec<PropertyOutcome> = Policy::ALL
        .iter()
        .flat_map(|&p| Property::ALL.iter().map(move |&q| run_property(p, q, SEED, TRIALS).unwrap()))
        .filter(|o| !o.pass)
        .collect();
    std::fs::write(ARCHIVE, serde_json::to_string_pretty(&found).unwrap() + "\n").unwrap();
}

#[test]
fn archive_lists_expected_failures() {
    let failing: Vec<(Policy, Property)> = archived().iter().map(|o| (o.policy, o.property)).collect();
    assert_eq!(
        failing,
        vec![
            (Policy::Queue, Property::Sybil),
            (Policy::Queue, Property::PathIndependence),
            (Policy::Queue, Property::WashTrade),
            (Policy::Queue, Property::LeveragePriority),
            (Policy::ProRata, Property::LeveragePriority),
        ]
    );
}

#[test]
fn archived_counterexamples_still_violate() {
    for o in archived() {
        let c = o.counterexample.as_ref().unwrap();
        assert!(still_violates(o.policy, c), "{} / {} no longer fails", o.policy, o.property);
        assert!(!still_violates(Policy::Waterfill, c), "waterfill fails {}", o.property);
    }
}

#[test]
fn search_reproduces_archive() {
    for o in archived() {
        assert_eq!(run_property(o.policy, o.property, SEED, TRIALS).unwrap(), o);
    }
}

#[test]
fn waterfill_satisfies_every_property() {
    for property in Property::ALL {
        let out = run_property(Policy::Waterfill, property, SEED + 1, TRIALS).unwrap();
        assert!(out.pass, "{property}: {:?}", out.counterexample);
    }
}

#[test]
fn pro_rata_ignores_equity() {
    for property in [Property::Sybil, Property::PathIndependence, Property::WashTrade] {
        assert!(run_property(Policy::ProRata, property, SEED + 1, TRIALS).unwrap().pass);
    }
    let s = PolicyState::new(vec![1.0, 1.0], vec![1.0, 4.0], vec![0.0, 0.0]).unwrap();
    assert!(!leverage_priority_check(Policy::ProRata, &s, 1.0).unwrap());
}

#[test]
fn counterexamples_serialize_with_property_tag() {
    let json = serde_json::to_value(archived()).unwrap();
    assert_eq!(json[0]["counterexample"]["property"], "sybil");
    assert_eq!(json[1]["counterexample"]["property"], "path_independence");
}

mod support;

use proptest::prelude::*;
use support::{geometry_grid, reference_situation};
use taml::cohort::{generate_synthetic, EventInterval, PatientRecord, SynthSpec};
use taml::tasking::{
    classify_situation, original_label, sample_episode, tiss_label, EpisodeConfig, Situation,
    TaskSpec, TimeWindows, WindowStatus,
};

fn windows() -> TimeWindows {
    "0,7,19,31,91d".parse().unwrap()
}

#[test]
fn every_geometry_gets_exactly_the_defined_situation() {
    let w = windows();
    let pseudo = 10.0 * 24.0;
    let grid = geometry_grid(&w);
    assert!(grid.len() > 1000);
    for r in &grid {
        for j in 0..w.n_windows() {
            let (lo, hi) = w.bounds(j);
            let got = classify_situation(r, &w, j, pseudo);
            match reference_situation(r, lo, hi, pseudo) {
                Some(s) => assert_eq!(got, WindowStatus::Known(s), "{:?} window {j}", r.event),
                None => assert_eq!(got, WindowStatus::Censored, "{:?} window {j}", r.event),
            }
        }
    }
}

#[test]
fn labels_and_weights_per_situation() {
    let rho = 1.5;
    let table = [
        (Situation::S1, true, rho),
        (Situation::S2, true, 1.0),
        (Situation::S3, false, rho),
        (Situation::S4, false, 1.0),
    ];
    for (s, y, w) in table {
        let l = tiss_label(s, rho);
        assert_eq!((l.y, l.weight), (y, w), "{s:?}");
    }
}

#[test]
fn persistence_positives_contain_occurrence_positives() {
    for seed in 0..5 {
        let mut spec = SynthSpec::benchmark(seed);
        spec.n_patients = 800;
        spec.mean_duration_hours = if seed % 2 == 0 { Some(240.0) } else { None };
        let c = generate_synthetic(&spec).unwrap();
        let w = windows();
        for r in c.records() {
            for j in 0..w.n_windows() {
                let Some(s) = classify_situation(r, &w, j, 14.0 * 24.0).situation() else {
                    continue;
                };
                if original_label(r, &w, j) == Some(true) {
                    assert!(tiss_label(s, 1.5).y);
                }
            }
        }
    }
}

#[test]
fn long_pseudo_duration_gives_cumulative_labels() {
    let mut spec = SynthSpec::benchmark(3);
    spec.n_patients = 1000;
    let c = generate_synthetic(&spec).unwrap();
    let w = windows();
    let (_, horizon) = w.horizon();
    let mut checked = 0;
    for r in c.records() {
        for j in 0..w.n_windows() {
            let Some(s) = classify_situation(r, &w, j, horizon).situation() else {
                continue;
            };
            let (_, hi) = w.bounds(j);
            let cumulative = r.event.start.is_some_and(|t| t < hi);
            assert_eq!(tiss_label(s, 1.5).y, cumulative);
            checked += 1;
        }
    }
    assert!(checked > 3000);
}

proptest! {
    #[test]
    fn situation_is_unique_and_consistent(
        start in proptest::option::of(0.0f64..3000.0),
        duration in proptest::option::of(0.1f64..3000.0),
        observed in 0.0f64..3000.0,
        pseudo in 0.1f64..3000.0,
        j in 0usize..4,
    ) {
        let w = windows();
        let r = PatientRecord {
            id: "p".into(),
            features: vec![],
            event: EventInterval {
                start,
                duration: start.and(duration),
                observed_until: observed,
            },
            ref_labels: vec![],
        };
        let (lo, hi) = w.bounds(j);
        let got = classify_situation(&r, &w, j, pseudo);
        prop_assert_eq!(got.situation(), reference_situation(&r, lo, hi, pseudo));
        if let Some(s) = got.situation() {
            prop_assert_eq!(original_label(&r, &w, j), Some(s == Situation::S1));
        }
    }

    #[test]
    fn windows_parse_round_trip(mut b in proptest::collection::vec(0u32..500, 2..7)) {
        b.sort_unstable();
        b.dedup();
        prop_assume!(b.len() >= 2);
        let text = format!("{}d", b.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        let w: TimeWindows = text.parse().unwrap();
        prop_assert_eq!(w.to_string(), text);
        prop_assert_eq!(w.n_windows(), b.len() - 1);
        for (j, label) in w.labels().iter().enumerate() {
            prop_assert_eq!(w.find(label).unwrap(), j);
        }
    }
}

#[test]
fn unknown_window_lists_valid_labels() {
    let err = windows().find("0-6d").unwrap_err().to_string();
    for l in windows().labels() {
        assert!(err.contains(&l), "{err}");
    }
}

#[test]
fn episodes_from_synthetic_cohort() {
    let mut spec = SynthSpec::benchmark(11);
    spec.n_patients = 1500;
    let c = generate_synthetic(&spec).unwrap();
    let cfg = EpisodeConfig {
        support_size: 15,
        query_size: 30,
        rho: 1.5,
        pseudo_duration: 30.0 * 24.0,
        tiss: true,
        situation_weights: true,
    };
    for task in [TaskSpec::TimeAssociated(0), TaskSpec::TimeAssociated(3), TaskSpec::Reference(11)] {
        for seed in 0..10 {
            let ep = sample_episode(&c, &windows(), task, &cfg, seed).unwrap();
            assert_eq!(ep.support.len(), 15);
            assert_eq!(ep.query.len(), 30);
            assert!(ep.support.iter().any(|e| e.label == 1.0));
        }
    }
}

use metapix::gradcheck::{
    check_meta_gradient, check_primitives, check_primitives_second_order, finite_diff, meta_gradient, CheckReport,
    TinyConfig, DEFAULT_STEP, META_TOLERANCE, PRIMITIVE_TOLERANCE,
};
use metapix::nn::WeightMode;

#[test]
fn every_primitive_passes_for_three_seeds() {
    for seed in 0..3 {
        let reports = check_primitives(seed);
        assert!(reports.len() >= 15);
        for r in reports.iter().chain(&check_primitives_second_order(seed)) {
            assert!(r.pass, "seed {seed}: {}", r.summary());
            assert!(r.tolerance <= PRIMITIVE_TOLERANCE);
            assert_eq!(r.step, DEFAULT_STEP);
        }
    }
}

#[test]
fn meta_gradient_passes_for_three_seeds() {
    for seed in 0..3 {
        let r = check_meta_gradient(seed, &TinyConfig::default()).unwrap();
        assert!(r.pass, "seed {seed}: {}", r.summary());
        assert!(r.tolerance <= META_TOLERANCE);
        // Entries under the floor are excluded from the relative error, so
        // they must be zero analytically too, and enough must remain.
        let live = r.entries.iter().filter(|e| e.numeric.abs() > r.floor).count();
        assert!(live >= 30, "{live} of {}", r.entries.len());
        for e in r.entries.iter().filter(|e| e.numeric.abs() <= r.floor) {
            assert!(e.analytic.abs() <= 1e-9, "seed {seed} entry {}: {}", e.index, e.analytic);
        }
    }
}

#[test]
fn per_class_weight_mode_passes() {
    let cfg = TinyConfig {
        weight_mode: WeightMode::PerClass,
        ..TinyConfig::default()
    };
    let r = check_meta_gradient(0, &cfg).unwrap();
    assert!(r.pass, "{}", r.summary());
}

#[test]
fn a_wrong_gradient_is_caught() {
    let g = meta_gradient(0, &TinyConfig::default()).unwrap();
    let i = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
    let mut wrong = g.clone();
    wrong[i] *= 1.0 + 1e-3;
    let fd = metapix::gradcheck::FiniteDiff {
        values: g.clone(),
        non_finite: vec![],
    };
    assert!(CheckReport::compare("exact", &g, &fd, DEFAULT_STEP, META_TOLERANCE).pass);
    assert!(!CheckReport::compare("perturbed", &wrong, &fd, DEFAULT_STEP, META_TOLERANCE).pass);
}

#[test]
fn oracle_handles_non_finite_evaluations() {
    let fd = finite_diff(|p| if p[0] > 0.0 { f64::NAN } else { p[0] }, &[0.0, 1.0], 1e-5);
    assert_eq!(fd.non_finite, vec![0]);
    let r = CheckReport::compare("nan", &[1.0, 0.0], &fd, 1e-5, 1e-6);
    assert!(!r.pass);
    assert!(r.detail.unwrap().contains("[0]"));
}

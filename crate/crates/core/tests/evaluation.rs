use std::fs;

use confood_core::eval::RocCurve;
use confood_core::*;

fn experiment(spec: &SyntheticSpec) -> EvaluationReport {
    let corpus = generate(spec).unwrap();
    let model = SyntheticModel::from_corpus(&corpus).unwrap();
    let cfg = DetectionConfig::default();
    let split = SplitSpec {
        seed: spec.seed,
        ..SplitSpec::default()
    };
    run_experiment(
        &model,
        &ExactJudge,
        &corpus.id_queries(),
        &corpus.ood_queries(),
        &split,
        &cfg,
        &BaselineSpec::standard(&cfg),
        4,
    )
    .unwrap()
}

#[test]
fn indistinguishable_classes_score_near_chance() {
    let spec = SyntheticSpec {
        seed: 21,
        rho_ood: SyntheticSpec::default().rho_id,
        ..SyntheticSpec::default()
    };
    assert!(spec.classes_indistinguishable());
    let report = experiment(&spec);
    for b in &report.baselines {
        assert!(
            (b.auroc_mean - 0.5).abs() <= 0.05,
            "{}: {:.4}",
            b.label,
            b.auroc_mean
        );
    }
}

#[test]
fn default_spec_is_stable_across_runs() {
    let report = experiment(&SyntheticSpec::default());
    assert_eq!(report.runs.len(), 5);
    for b in &report.baselines {
        assert_eq!(b.auroc_per_run.len(), 5);
        assert!(b.auroc_std <= 0.05, "{}: std {:.4}", b.label, b.auroc_std);
        for roc in &b.roc_per_run {
            assert_eq!(roc.points.first(), Some(&(0.0, 0.0)));
            assert_eq!(roc.points.last(), Some(&(1.0, 1.0)));
            assert!(roc
                .points
                .windows(2)
                .all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
        }
    }
    // every run calibrates on 20% of the 200 iD queries
    assert!(report.runs.iter().all(|r| r.calibration_queries == 40
        && r.test_id_queries == 160
        && r.test_ood_queries == 200));
}

#[test]
fn baseline_rows_agree_with_their_scores() {
    let report = experiment(&SyntheticSpec {
        n_id: 60,
        n_ood: 60,
        ..SyntheticSpec::default()
    });
    let l7 = report.baseline("base_score_l7").unwrap();
    assert!(l7.guarantee.is_none());
    let single = report.baseline("single_p_l7").unwrap();
    assert!(single.guarantee.is_some());
    for (roc, auc) in single.roc_per_run.iter().zip(&single.auroc_per_run) {
        assert!((roc.auroc - auc).abs() < 1e-12);
    }
}

#[test]
fn roc_area_matches_rank_statistic() {
    let pos = [0.9, 0.4, 0.4, 0.7, 0.1];
    let neg = [0.4, 0.2, 0.05, 0.4];
    let roc = RocCurve::from_scores(&pos, &neg);
    assert!((roc.auroc - auroc(&pos, &neg)).abs() < 1e-12);
}

#[test]
fn report_files_are_plot_ready() {
    let report = experiment(&SyntheticSpec {
        n_id: 40,
        n_ood: 40,
        ..SyntheticSpec::default()
    });
    let dir = tempfile::tempdir().unwrap();
    let written = report.write_to_dir(dir.path()).unwrap();
    let name = |p: &std::path::PathBuf| p.file_name().unwrap().to_string_lossy().into_owned();
    let names: Vec<String> = written.iter().map(name).collect();
    assert!(names.contains(&"report.json".to_string()));
    assert!(names.contains(&"roc_ensemble_am_run4.csv".to_string()));
    assert!(!names.iter().any(|n| n.starts_with("guarantee_base_score")));

    let back: EvaluationReport =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(back, report);

    let curve = fs::read_to_string(dir.path().join("guarantee_ensemble_am.csv")).unwrap();
    let mut lines = curve.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epsilon,rate_run0,rate_run1,rate_run2,rate_run3,rate_run4,rate_mean"
    );
    assert_eq!(lines.count(), 11);
    let roc = fs::read_to_string(dir.path().join("roc_single_p_l15_run0.csv")).unwrap();
    assert!(roc.starts_with("fpr,tpr\n0,0\n"));
}

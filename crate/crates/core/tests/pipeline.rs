use std::path::{Path, PathBuf};

use persrep_core::data::write_dataset;
use persrep_core::evaluation::Metrics;
use persrep_core::generation::CFG_SWEEP;
use persrep_core::pipeline::{compare_runs, run, sweep, PipelineConfig, Stage, SweepGrid};
use persrep_core::toy::{toy_dataset, ToyDatasetConfig};
use persrep_core::Error;

fn write_toy(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let ds = toy_dataset(&ToyDatasetConfig {
        n_instances: 3,
        n_test: 3,
        seed,
        ..ToyDatasetConfig::default()
    });
    let root = dir.join(name);
    write_dataset(&ds, &root).unwrap();
    root
}

fn small_config(data: &Path, out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::toy_profile(data);
    cfg.dataset_root = data.to_path_buf();
    cfg.output_dir = out.to_path_buf();
    cfg.generator.n_positives = 16;
    cfg.generator.n_negatives = 40;
    cfg.generator.n_backgrounds = 20;
    cfg.train.n_pairs = 32;
    cfg.train.epochs = 1;
    cfg
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn aggregate(path: &Path) -> serde_json::Value {
    let v: serde_json::Value = serde_json::from_slice(&read(path)).unwrap();
    v["aggregate"].clone()
}

#[test]
fn run_resume_and_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_toy(tmp.path(), "data", 0);
    let out = tmp.path().join("run");
    let cfg = small_config(&data, &out);

    let first = run(&cfg, true).unwrap();
    assert!(first.failures.is_empty());
    assert_eq!(first.personalized.instances.len(), 3);
    assert_eq!(first.base.instances.len(), 3);
    for stage in [Stage::Generate, Stage::Train, Stage::Eval, Stage::Analyze] {
        assert_eq!(first.events.iter().filter(|e| e.stage == stage && e.executed).count(), 3, "{stage:?}");
    }
    for id in first.personalized.instances.keys() {
        let inst = out.join("instances").join(id);
        assert!(inst.join("train").join("adapter.prla").is_file());
        assert!(inst.join("eval").join("report.json").is_file());
    }
    let report = read(&out.join("report.json"));

    let again = run(&cfg, true).unwrap();
    assert_eq!(again.executed().count(), 0, "{:?}", again.executed().collect::<Vec<_>>());
    assert!(!again.events.is_empty());
    assert_eq!(read(&out.join("report.json")), report);
    assert_eq!(again.personalized, first.personalized);

    // Deltas against a recomputation from the raw report files.
    let cmp_dir = tmp.path().join("cmp");
    let cmp = compare_runs(&[out.clone()], &cmp_dir).unwrap();
    let base = aggregate(&out.join("base").join("report.json"));
    let pers = aggregate(&out.join("report.json"));
    let (_, _, _, delta) = &cmp.runs[0];
    let fields = ["pr_auc", "ndcg", "det_ap", "det_ap50", "det_f1", "seg_ap", "seg_ap50", "seg_f1"];
    let d: serde_json::Value = serde_json::to_value(delta).unwrap();
    for f in fields {
        let want = pers[f].as_f64().unwrap() - base[f].as_f64().unwrap();
        assert_eq!(d[f].as_f64().unwrap(), want, "{f}");
    }
    let mut rows = csv::Reader::from_path(cmp_dir.join("comparison.csv")).unwrap();
    let mut seen = 0;
    for row in rows.records() {
        let row = row.unwrap();
        let (b, p, dv): (f64, f64, f64) = (row[3].parse().unwrap(), row[4].parse().unwrap(), row[5].parse().unwrap());
        assert!((dv - (p - b)).abs() < 2e-10, "{row:?}");
        seen += 1;
    }
    assert_eq!(seen, Metrics::default().entries().len());

    // Re-running the report reproduces the CSVs byte for byte.
    let cmp_again = tmp.path().join("cmp2");
    compare_runs(&[out.clone()], &cmp_again).unwrap();
    for f in ["comparison.csv", "scatter.csv", "comparison.txt"] {
        assert_eq!(read(&cmp_dir.join(f)), read(&cmp_again.join(f)), "{f}");
    }

    // A different dataset cannot be compared with this run.
    let other_data = write_toy(tmp.path(), "other", 1);
    let other_out = tmp.path().join("other-run");
    let mut other = small_config(&other_data, &other_out);
    other.instances = vec![other_data_first_id(&other_data)];
    run(&other, true).unwrap();
    let err = compare_runs(&[out.clone(), other_out], &tmp.path().join("cmp3")).unwrap_err();
    assert!(matches!(err, Error::IncompatibleRuns(_)), "{err}");

    // The run directory refuses a changed config.
    let mut changed = cfg.clone();
    changed.train.n_pairs = 48;
    assert!(matches!(run(&changed, true), Err(Error::InvalidConfig(_))));
}

fn other_data_first_id(root: &Path) -> String {
    let mut ids: Vec<String> = std::fs::read_dir(root)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    ids.remove(0)
}

#[test]
fn cfg_sweep_makes_three_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_toy(tmp.path(), "data", 2);
    let mut cfg = small_config(&data, &tmp.path().join("sweep"));
    cfg.instances = vec![other_data_first_id(&data)];
    cfg.sweep = Some(SweepGrid {
        cfg_scale: Some(CFG_SWEEP.to_vec()),
        ..SweepGrid::default()
    });
    let results = sweep(&cfg, true).unwrap();
    assert_eq!(results.len(), 3);
    let mut manifests = Vec::new();
    for ((name, summary), scale) in results.iter().zip(CFG_SWEEP) {
        assert!(summary.failures.is_empty(), "{name}");
        let child = PipelineConfig::load(&summary.run_dir.join("config.json")).unwrap();
        assert_eq!(child.generator.cfg_scale, scale);
        assert!(child.sweep.is_none());
        manifests.push(read(&summary.run_dir.join("config.json")));
    }
    manifests.sort();
    manifests.dedup();
    assert_eq!(manifests.len(), 3);
}

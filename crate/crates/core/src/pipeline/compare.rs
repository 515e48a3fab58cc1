use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use super::run::{ANALYSIS_JSON, BASE_DIR, CONFIG_JSON, INSTANCES_DIR, REPORT_JSON};
use super::PipelineConfig;
use crate::analysis::PoolAnalysis;
use crate::error::{Error, Result};
use crate::evaluation::{EvalReport, Metrics};

/// Everything a finished run directory holds that comparisons need.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub name: String,
    pub dir: PathBuf,
    pub config: PipelineConfig,
    pub base: EvalReport,
    pub personalized: EvalReport,
    pub analyses: BTreeMap<String, PoolAnalysis>,
}

pub fn load_run(dir: &Path) -> Result<RunArtifacts> {
    if !dir.join(CONFIG_JSON).is_file() {
        return Err(Error::InvalidConfig(format!("{} is not a run directory", dir.display())));
    }
    let text = std::fs::read_to_string(dir.join(CONFIG_JSON)).map_err(|e| Error::io(dir.join(CONFIG_JSON), e))?;
    let config: PipelineConfig = serde_json::from_str(&text)?;
    let base = EvalReport::load_json(&dir.join(BASE_DIR).join(REPORT_JSON))?;
    let personalized = EvalReport::load_json(&dir.join(REPORT_JSON))?;
    let mut analyses = BTreeMap::new();
    for id in personalized.instances.keys() {
        let p = dir.join(INSTANCES_DIR).join(id).join("analyze").join(ANALYSIS_JSON);
        if p.exists() {
            analyses.insert(id.clone(), PoolAnalysis::load_json(&p)?);
        }
    }
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(RunArtifacts {
        name,
        dir: dir.to_path_buf(),
        config,
        base,
        personalized,
        analyses,
    })
}

/// Pretrained vs personalized means per run, with per-run deltas.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    /// `(run, base, personalized, personalized - base)`.
    pub runs: Vec<(String, Metrics, Metrics, Metrics)>,
    /// `(run, instance, fidelity_mean, diversity, base pr_auc, personalized pr_auc)`.
    pub scatter: Vec<(String, String, f64, f64, Option<f64>, Option<f64>)>,
    /// `(n_real, run, personalized)`, only when runs differ in `n_real`.
    pub scaling: Vec<(usize, String, Metrics)>,
}

fn delta(p: &Metrics, b: &Metrics) -> Metrics {
    let d = |x: Option<f64>, y: Option<f64>| x.zip(y).map(|(x, y)| x - y);
    Metrics {
        pr_auc: d(p.pr_auc, b.pr_auc),
        ndcg: d(p.ndcg, b.ndcg),
        det_ap: d(p.det_ap, b.det_ap),
        det_ap50: d(p.det_ap50, b.det_ap50),
        det_f1: d(p.det_f1, b.det_f1),
        seg_ap: d(p.seg_ap, b.seg_ap),
        seg_ap50: d(p.seg_ap50, b.seg_ap50),
        seg_f1: d(p.seg_f1, b.seg_f1),
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.10}"))
}

impl Comparison {
    pub fn from_runs(runs: &[RunArtifacts]) -> Result<Comparison> {
        let first = runs.first().ok_or_else(|| Error::IncompatibleRuns("no runs given".into()))?;
        for r in runs {
            if r.personalized.dataset_digest != first.personalized.dataset_digest
                || r.base.dataset_digest != first.personalized.dataset_digest
            {
                return Err(Error::IncompatibleRuns(format!(
                    "{} and {} were evaluated on different datasets",
                    first.name, r.name
                )));
            }
        }
        let table = runs
            .iter()
            .map(|r| {
                let (b, p) = (r.base.aggregate.clone(), r.personalized.aggregate.clone());
                let d = delta(&p, &b);
                (r.name.clone(), b, p, d)
            })
            .collect();
        let mut scatter = Vec::new();
        for r in runs {
            for (id, a) in &r.analyses {
                let acc = |rep: &EvalReport| rep.instances.get(id).and_then(|i| i.metrics.pr_auc);
                scatter.push((r.name.clone(), id.clone(), a.fidelity_mean, a.diversity, acc(&r.base), acc(&r.personalized)));
            }
        }
        let sizes: BTreeSet<usize> = runs.iter().map(|r| r.config.n_real).collect();
        let mut scaling: Vec<(usize, String, Metrics)> = if sizes.len() > 1 {
            runs.iter()
                .map(|r| (r.config.n_real, r.name.clone(), r.personalized.aggregate.clone()))
                .collect()
        } else {
            Vec::new()
        };
        scaling.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
        Ok(Comparison {
            runs: table,
            scatter,
            scaling,
        })
    }

    pub fn table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("     -".to_string(), |v| format!("{:6.1}", 100.0 * v));
        let signed = |v: Option<f64>| v.map_or("     -".to_string(), |v| format!("{:+6.1}", 100.0 * v));
        let mut s = format!(
            "{:<24} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}\n",
            "run", "cls", "ret", "detAP", "detF1", "segAP", "segF1"
        );
        let mut line = |name: &str, m: &Metrics, f: &dyn Fn(Option<f64>) -> String| {
            let cols = [m.pr_auc, m.ndcg, m.det_ap, m.det_f1, m.seg_ap, m.seg_f1].map(f).join(" ");
            s.push_str(&format!("{name:<24} {cols}\n"));
        };
        let mut bases_seen: Vec<&Metrics> = Vec::new();
        for (name, b, p, d) in &self.runs {
            if !bases_seen.contains(&b) {
                line("base", b, &cell);
                bases_seen.push(b);
            }
            line(name, p, &cell);
            line("  delta", d, &signed);
        }
        s
    }

    /// Writes `comparison.csv`, `scatter.csv`, `comparison.txt` and, when
    /// runs vary the real-image count, `scaling.csv`.
    pub fn save(&self, out: &Path) -> Result<()> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join("comparison.csv");
        let err = |p: &Path| {
            let p = p.to_path_buf();
            move |e: csv::Error| Error::io(&p, e.into())
        };
        let mut w = csv::Writer::from_path(&path).map_err(err(&path))?;
        w.write_record(["run", "task", "metric", "base", "personalized", "delta"])
            .map_err(err(&path))?;
        for (name, b, p, d) in &self.runs {
            for (((task, metric, bv), (_, _, pv)), (_, _, dv)) in b.entries().into_iter().zip(p.entries()).zip(d.entries()) {
                w.write_record([name.as_str(), task, metric, &fmt(bv), &fmt(pv), &fmt(dv)])
                    .map_err(err(&path))?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = out.join("scatter.csv");
        let mut w = csv::Writer::from_path(&path).map_err(err(&path))?;
        w.write_record(["run", "instance_id", "fidelity_mean", "diversity", "pr_auc_base", "pr_auc_personalized"])
            .map_err(err(&path))?;
        for (run, id, fid, div, b, p) in &self.scatter {
            w.write_record([run.as_str(), id, &format!("{fid:.10}"), &format!("{div:.10}"), &fmt(*b), &fmt(*p)])
                .map_err(err(&path))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        if !self.scaling.is_empty() {
            let path = out.join("scaling.csv");
            let mut w = csv::Writer::from_path(&path).map_err(err(&path))?;
            w.write_record(["n_real", "run", "task", "metric", "value"]).map_err(err(&path))?;
            for (n, run, m) in &self.scaling {
                for (task, metric, v) in m.entries() {
                    if let Some(v) = v {
                        w.write_record([&n.to_string(), run.as_str(), task, metric, &format!("{v:.10}")])
                            .map_err(err(&path))?;
                    }
                }
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        let path = out.join("comparison.txt");
        std::fs::write(&path, self.table()).map_err(|e| Error::io(&path, e))
    }
}

/// Load run directories, check they are comparable and write the tables.
pub fn compare_runs(dirs: &[PathBuf], out: &Path) -> Result<Comparison> {
    let runs = dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    let cmp = Comparison::from_runs(&runs)?;
    cmp.save(out)?;
    Ok(cmp)
}

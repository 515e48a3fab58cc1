//! Run orchestration: config, per-instance staged runs with resumable
//! sentinels, cross-run comparison and parameter sweeps.

mod compare;
mod run;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use compare::{compare_runs, load_run, Comparison, RunArtifacts};
pub use run::{run, Stage, StageEvent, RunSummary};

use crate::data::DEFAULT_MIN_TEST;
use crate::encoder::{load_encoder, AdapterSpec};
use crate::error::{Error, Result};
use crate::evaluation::Task;
use crate::generation::GeneratorConfig;
use crate::training::{LossKind, TrainConfig};

const TOY_CONFIG: &str = include_str!("../../data/toy_config.json");

/// Axes a sweep may vary. Absent axes keep the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cfg_scale: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub use_llm_captions: Option<Vec<bool>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_kind: Option<Vec<LossKind>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_positives: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_pairs: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset_root: PathBuf,
    pub encoder_name: String,
    pub min_test: usize,
    /// Real images per instance used for generation and training.
    pub n_real: usize,
    pub generator: GeneratorConfig,
    /// Similarity threshold of the filter stage; no filtering when absent.
    pub filter_threshold: Option<f64>,
    pub adapter: AdapterSpec,
    pub train: TrainConfig,
    pub eval_tasks: BTreeSet<Task>,
    pub output_dir: PathBuf,
    /// Instances to run; empty means all.
    pub instances: Vec<String>,
    /// Instances processed concurrently; 0 uses every core.
    pub workers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepGrid>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::new(),
            encoder_name: crate::encoder::TOY_VIT.into(),
            min_test: DEFAULT_MIN_TEST,
            n_real: 3,
            generator: GeneratorConfig::default(),
            filter_threshold: None,
            adapter: AdapterSpec::default(),
            train: TrainConfig::default(),
            eval_tasks: Task::ALL.into_iter().collect(),
            output_dir: PathBuf::from("runs/default"),
            instances: Vec::new(),
            workers: 0,
            sweep: None,
        }
    }
}

impl PipelineConfig {
    /// The bundled CPU profile, with paths relative to `base_dir`.
    pub fn toy_profile(base_dir: &Path) -> PipelineConfig {
        let mut cfg: PipelineConfig = serde_json::from_str(TOY_CONFIG).expect("bundled toy config parses");
        cfg.resolve_paths(base_dir);
        cfg
    }

    /// Raw text of the bundled toy profile.
    pub fn toy_profile_json() -> &'static str {
        TOY_CONFIG
    }

    /// Parse a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.dataset_root, &mut self.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dataset_root.is_dir() {
            return Err(Error::InvalidConfig(format!(
                "dataset_root {} is not a directory",
                self.dataset_root.display()
            )));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::InvalidConfig("output_dir is empty".into()));
        }
        if !(1..=3).contains(&self.n_real) {
            return Err(Error::InvalidConfig(format!("n_real must be 1..=3, got {}", self.n_real)));
        }
        if let Some(t) = self.filter_threshold {
            if !(-1.0..=1.0).contains(&t) {
                return Err(Error::InvalidConfig(format!("filter threshold {t} outside [-1, 1]")));
            }
        }
        if self.eval_tasks.is_empty() {
            return Err(Error::InvalidConfig("no evaluation tasks".into()));
        }
        self.generator.validate()?;
        self.adapter.validate()?;
        self.train.validate()?;
        if let Some(s) = &self.sweep {
            let lens = [
                s.cfg_scale.as_ref().map(Vec::len),
                s.use_llm_captions.as_ref().map(Vec::len),
                s.loss_kind.as_ref().map(Vec::len),
                s.n_positives.as_ref().map(Vec::len),
                s.n_pairs.as_ref().map(Vec::len),
            ];
            if lens.contains(&Some(0)) || lens.iter().all(Option::is_none) {
                return Err(Error::InvalidConfig("sweep grids must be nonempty".into()));
            }
        }
        load_encoder(&self.encoder_name)?;
        Ok(())
    }

    /// Child configs of the sweep grid (cartesian product), each with its
    /// own output directory under this config's. Without a grid, the config
    /// itself.
    pub fn expand_sweep(&self) -> Vec<(String, PipelineConfig)> {
        let Some(grid) = &self.sweep else {
            return vec![("run".into(), self.clone())];
        };
        let mut children = vec![(Vec::<String>::new(), PipelineConfig { sweep: None, ..self.clone() })];
        fn axis<T: Clone>(
            children: Vec<(Vec<String>, PipelineConfig)>,
            values: &Option<Vec<T>>,
            name: &str,
            show: impl Fn(&T) -> String,
            set: impl Fn(&mut PipelineConfig, T),
        ) -> Vec<(Vec<String>, PipelineConfig)> {
            let Some(values) = values else { return children };
            let mut out = Vec::with_capacity(children.len() * values.len());
            for (tags, cfg) in children {
                for v in values {
                    let mut c = cfg.clone();
                    set(&mut c, v.clone());
                    let mut t = tags.clone();
                    t.push(format!("{name}-{}", show(v)));
                    out.push((t, c));
                }
            }
            out
        }
        children = axis(children, &grid.cfg_scale, "cfg", |v| format!("{v}"), |c, v| c.generator.cfg_scale = v);
        children = axis(children, &grid.use_llm_captions, "llm", |v| v.to_string(), |c, v| {
            c.generator.use_llm_captions = v
        });
        children = axis(children, &grid.loss_kind, "loss", |v| format!("{v:?}").to_lowercase(), |c, v| {
            c.train.loss_kind = v
        });
        children = axis(children, &grid.n_positives, "npos", |v| v.to_string(), |c, v| c.generator.n_positives = v);
        children = axis(children, &grid.n_pairs, "npairs", |v| v.to_string(), |c, v| c.train.n_pairs = v);
        children
            .into_iter()
            .map(|(tags, mut cfg)| {
                let name = tags.join("_");
                cfg.output_dir = self.output_dir.join(&name);
                (name, cfg)
            })
            .collect()
    }
}

/// Run every child of the sweep grid in order.
pub fn sweep(config: &PipelineConfig, fail_fast: bool) -> Result<Vec<(String, RunSummary)>> {
    config.validate()?;
    let children = config.expand_sweep();
    let mut out = Vec::with_capacity(children.len());
    for (name, child) in children {
        log::info!("sweep child {name}");
        out.push((name, run(&child, fail_fast)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_profile_values() {
        let cfg = PipelineConfig::toy_profile(Path::new("/tmp/x"));
        assert_eq!(cfg.generator.n_positives, 96);
        assert_eq!(cfg.generator.n_negatives, 200);
        assert_eq!(cfg.train.n_pairs, 960);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.encoder_name, "toy-vit");
        assert!(cfg.dataset_root.starts_with("/tmp/x"));
    }

    #[test]
    fn cfg_sweep_children() {
        let cfg = PipelineConfig {
            output_dir: "/out".into(),
            sweep: Some(SweepGrid {
                cfg_scale: Some(crate::generation::CFG_SWEEP.to_vec()),
                ..Default::default()
            }),
            ..Default::default()
        };
        let kids = cfg.expand_sweep();
        let names: Vec<&str> = kids.iter().map(|k| k.0.as_str()).collect();
        assert_eq!(names, ["cfg-4", "cfg-5", "cfg-7.5"]);
        assert_eq!(kids[2].1.generator.cfg_scale, 7.5);
        assert_eq!(kids[1].1.output_dir, Path::new("/out/cfg-5"));
        assert!(kids.iter().all(|k| k.1.sweep.is_none()));

        let two = PipelineConfig {
            sweep: Some(SweepGrid {
                loss_kind: Some(vec![LossKind::InfoNce, LossKind::Hinge]),
                n_pairs: Some(vec![10, 20, 30]),
                ..Default::default()
            }),
            ..Default::default()
        };
        assert_eq!(two.expand_sweep().len(), 6);
    }

    #[test]
    fn empty_grid_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            dataset_root: dir.path().into(),
            sweep: Some(SweepGrid {
                cfg_scale: Some(vec![]),
                ..Default::default()
            }),
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        let missing = PipelineConfig {
            dataset_root: dir.path().join("nope"),
            ..Default::default()
        };
        assert!(matches!(missing.validate(), Err(Error::InvalidConfig(_))));
    }
}

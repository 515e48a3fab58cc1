use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::PipelineConfig;
use crate::analysis::{analyze_pool, save_analysis_csv, PoolAnalysis};
use crate::data::{ingest_dataset, load_pool, save_pool, ImageRecord, InstanceDataset, SyntheticPool};
use crate::encoder::{load_encoder, AdapterSet, CachedEncoder, Encoder, ToyVit};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_instance, EvalOptions, EvalReport, InstanceReport};
use crate::generation::{filter_pool, synthesize_pool, CaptionCorpus, MaskerFailurePolicy, PoolSources};
use crate::perceptual::{EncoderMetric, RecordMasker};
use crate::training::{train_personalized, write_loss_csv, TrainManifest};

pub(super) const BASE_DIR: &str = "base";
pub(super) const INSTANCES_DIR: &str = "instances";
pub(super) const REPORT_JSON: &str = "report.json";
pub(super) const ANALYSIS_JSON: &str = "analysis.json";
pub(super) const CONFIG_JSON: &str = "config.json";
const DONE: &str = ".done";
const ADAPTER_FILE: &str = "adapter.prla";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Filter,
    Train,
    Eval,
    Analyze,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Filter => "filter",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Analyze => "analyze",
        }
    }
}

/// One stage visit. `executed` is false when a sentinel let it be skipped.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StageEvent {
    pub instance: String,
    pub stage: Stage,
    pub executed: bool,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    /// Sorted by instance, then stage.
    pub events: Vec<StageEvent>,
    /// Instance id to the error that stopped it.
    pub failures: BTreeMap<String, String>,
    pub base: EvalReport,
    pub personalized: EvalReport,
}

impl RunSummary {
    pub fn executed(&self) -> impl Iterator<Item = &StageEvent> {
        self.events.iter().filter(|e| e.executed)
    }
}

/// Written to `run.json`; contains no timestamps so reruns are identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RunManifest {
    dataset_digest: String,
    encoder: String,
    base_digest: String,
    instances: Vec<String>,
    failures: BTreeMap<String, String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    dataset: &'a InstanceDataset,
    /// Dataset with train lists cut to `n_real`, for generation and training.
    real: &'a InstanceDataset,
    base: &'a ToyVit,
    opts: EvalOptions,
    events: Mutex<Vec<StageEvent>>,
}

impl Ctx<'_> {
    /// Run `body` in `<parent>/<stage>` unless its sentinel exists. The
    /// provenance record is written before any output.
    fn stage(
        &self,
        parent: &Path,
        instance: &str,
        stage: Stage,
        provenance: serde_json::Value,
        body: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<PathBuf> {
        let dir = parent.join(stage.as_str());
        let executed = !dir.join(DONE).exists();
        if executed {
            if dir.exists() {
                std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_json(&dir.join("provenance.json"), &provenance)?;
            body(&dir).map_err(|e| Error::Stage {
                stage: stage.as_str().into(),
                instance: instance.into(),
                source: Box::new(e),
            })?;
            let done = dir.join(DONE);
            std::fs::write(&done, b"").map_err(|e| Error::io(&done, e))?;
        }
        self.events.lock().expect("event log").push(StageEvent {
            instance: instance.into(),
            stage,
            executed,
        });
        Ok(dir)
    }

    fn with_cache<R>(&self, enc: &dyn Encoder, key: &str, f: impl FnOnce(&dyn Encoder) -> R) -> R {
        match CachedEncoder::from_env(enc, key) {
            Some(c) => f(&c),
            None => f(enc),
        }
    }

    fn refs(&self, id: &str) -> Result<&[ImageRecord]> {
        Ok(&self.real.get(id)?.train)
    }

    fn instance(&self, id: &str) -> Result<()> {
        let cfg = self.cfg;
        let dir = cfg.output_dir.join(INSTANCES_DIR).join(id);
        let base_key = self.base.base_digest();
        let ref_digests: Vec<String> = self.refs(id)?.iter().map(crate::data::record_digest).collect();

        let gen_dir = self.stage(
            &dir,
            id,
            Stage::Generate,
            json!({ "seed": cfg.generator.seed, "generator": cfg.generator, "real_images": ref_digests }),
            |out| {
                let pool = synthesize_pool(self.real, id, &cfg.generator, &CaptionCorpus::bundled(), &PoolSources::default())?;
                save_pool(&pool, &out.join("pool"))
            },
        )?;
        let mut pool_dir = gen_dir.join("pool");

        if let Some(threshold) = cfg.filter_threshold {
            let input = load_pool(&pool_dir)?;
            let filt_dir = self.stage(
                &dir,
                id,
                Stage::Filter,
                json!({ "threshold": threshold, "pool_digest": input.digest(), "metric": base_key }),
                |out| {
                    let pool = self.with_cache(self.base, &base_key, |enc| {
                        let metric = EncoderMetric { encoder: enc };
                        filter_pool(&input, self.refs(id)?, &metric, &RecordMasker, threshold, MaskerFailurePolicy::Drop)
                    })?;
                    save_pool(&pool, &out.join("pool"))
                },
            )?;
            pool_dir = filt_dir.join("pool");
        }
        let pool: SyntheticPool = load_pool(&pool_dir)?;
        let pool_digest = pool.digest();

        let train_dir = self.stage(
            &dir,
            id,
            Stage::Train,
            json!({
                "seed": cfg.train.seed,
                "adapter_seed": cfg.train.seed,
                "pool_digest": pool_digest,
                "base_digest": base_key,
                "real_images": ref_digests,
            }),
            |out| {
                let enc = self.base.attach(&cfg.adapter, cfg.train.seed)?;
                let outcome = train_personalized(&enc, self.refs(id)?, &pool, &cfg.train)?;
                outcome.encoder.adapters().save(&out.join(ADAPTER_FILE))?;
                write_loss_csv(&out.join("loss.csv"), &outcome.loss_trace)?;
                let manifest = TrainManifest {
                    instance_id: id.into(),
                    encoder: cfg.encoder_name.clone(),
                    adapter: cfg.adapter.clone(),
                    config: cfg.train.clone(),
                    pool_digest: pool_digest.clone(),
                    n_positives: pool.positives.len(),
                    n_negatives: pool.negatives.len(),
                    steps: outcome.steps(),
                    final_loss: outcome.loss_trace.last().copied(),
                    loss_trace_path: "loss.csv".into(),
                    adapter_path: ADAPTER_FILE.into(),
                };
                write_json(&out.join("manifest.json"), &manifest)
            },
        )?;

        let adapter_path = train_dir.join(ADAPTER_FILE);
        let adapter_digest = file_digest(&adapter_path)?;
        self.stage(
            &dir,
            id,
            Stage::Eval,
            json!({ "adapter_digest": adapter_digest, "dataset_digest": self.dataset.digest(), "options": self.opts }),
            |out| {
                // Evaluate what was persisted, not the in-memory result.
                let enc = self.base.with_adapters(AdapterSet::load(&adapter_path)?)?;
                let key = format!("{base_key}:{adapter_digest}");
                let report = self.with_cache(&enc, &key, |e| evaluate_instance(self.dataset, id, e, &self.opts))?;
                write_json(&out.join(REPORT_JSON), &report)
            },
        )?;

        self.stage(
            &dir,
            id,
            Stage::Analyze,
            json!({ "pool_digest": pool_digest, "metric": base_key, "real_images": ref_digests }),
            |out| {
                let analysis = self.with_cache(self.base, &base_key, |enc| {
                    analyze_pool(&pool, self.refs(id)?, &EncoderMetric { encoder: enc }, &RecordMasker)
                })?;
                analysis.save_json(&out.join(ANALYSIS_JSON))
            },
        )?;
        Ok(())
    }

    fn base_report(&self, ids: &[String]) -> Result<EvalReport> {
        let dir = self.cfg.output_dir.join(BASE_DIR);
        let path = dir.join(REPORT_JSON);
        let key = self.base.base_digest();
        if dir.join(DONE).exists() {
            return EvalReport::load_json(&path);
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_json(
            &dir.join("provenance.json"),
            &json!({ "base_digest": key, "dataset_digest": self.dataset.digest(), "options": self.opts }),
        )?;
        let reports = self.with_cache(self.base, &key, |enc| {
            ids.par_iter()
                .map(|id| Ok((id.clone(), evaluate_instance(self.dataset, id, enc, &self.opts)?)))
                .collect::<Result<BTreeMap<String, InstanceReport>>>()
        })?;
        let report = EvalReport::new("base", &self.cfg.encoder_name, &self.dataset.digest(), reports);
        report.save_json(&path)?;
        std::fs::write(dir.join(DONE), b"").map_err(|e| Error::io(&dir, e))?;
        Ok(report)
    }
}

fn trim_train(dataset: &InstanceDataset, n_real: usize) -> InstanceDataset {
    let mut out = dataset.clone();
    for inst in out.instances.values_mut() {
        inst.train.truncate(n_real);
    }
    out
}

fn install<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Execute generate, filter, train, eval and analyze for every instance.
/// Completed stages are skipped on rerun. A failing instance is recorded
/// and the rest continue, unless `fail_fast`.
pub fn run(config: &PipelineConfig, fail_fast: bool) -> Result<RunSummary> {
    config.validate()?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join(CONFIG_JSON);
    if cfg_path.exists() {
        let previous: PipelineConfig = read_json(&cfg_path)?;
        if previous != *config {
            return Err(Error::InvalidConfig(format!(
                "{} holds a run with a different config",
                out.display()
            )));
        }
    } else {
        config.save(&cfg_path)?;
    }

    let dataset = ingest_dataset(&config.dataset_root, config.min_test)?;
    let ids: Vec<String> = if config.instances.is_empty() {
        dataset.ids().map(String::from).collect()
    } else {
        for id in &config.instances {
            dataset.get(id)?;
        }
        config.instances.clone()
    };
    let base = load_encoder(&config.encoder_name)?;
    let real = trim_train(&dataset, config.n_real);
    let ctx = Ctx {
        cfg: config,
        dataset: &dataset,
        real: &real,
        base: &base,
        opts: EvalOptions {
            tasks: config.eval_tasks.clone(),
            ..EvalOptions::default()
        },
        events: Mutex::new(Vec::new()),
    };

    let base_report = install(config.workers, || ctx.base_report(&ids))??;
    let results: Vec<(String, Result<()>)> = install(config.workers, || {
        ids.par_iter().map(|id| (id.clone(), ctx.instance(id))).collect()
    })?;
    let mut failures = BTreeMap::new();
    for (id, r) in results {
        if let Err(e) = r {
            if fail_fast {
                return Err(e);
            }
            log::error!("{e}");
            failures.insert(id, e.to_string());
        }
    }

    let mut instances = BTreeMap::new();
    let mut analyses: BTreeMap<String, PoolAnalysis> = BTreeMap::new();
    for id in ids.iter().filter(|id| !failures.contains_key(*id)) {
        let dir = out.join(INSTANCES_DIR).join(id);
        instances.insert(id.clone(), read_json::<InstanceReport>(&dir.join("eval").join(REPORT_JSON))?);
        analyses.insert(id.clone(), PoolAnalysis::load_json(&dir.join("analyze").join(ANALYSIS_JSON))?);
    }
    let personalized = EvalReport::new("personalized", &config.encoder_name, &dataset.digest(), instances);
    personalized.save_json(&out.join(REPORT_JSON))?;
    personalized.save_csv(&out.join("report.csv"))?;
    base_report.save_csv(&out.join("base_report.csv"))?;
    let rows: Vec<(&str, &PoolAnalysis)> = analyses.iter().map(|(k, v)| (k.as_str(), v)).collect();
    save_analysis_csv(&rows, &out.join("analysis.csv"))?;
    let table = format!("{}\n{}", base_report.table(), personalized.table());
    std::fs::write(out.join("summary.txt"), &table).map_err(|e| Error::io(out, e))?;
    write_json(
        &out.join("run.json"),
        &RunManifest {
            dataset_digest: dataset.digest(),
            encoder: config.encoder_name.clone(),
            base_digest: base.base_digest(),
            instances: ids.clone(),
            failures: failures.clone(),
        },
    )?;

    let mut events = ctx.events.into_inner().expect("event log");
    events.sort();
    Ok(RunSummary {
        run_dir: out.clone(),
        events,
        failures,
        base: base_report,
        personalized,
    })
}

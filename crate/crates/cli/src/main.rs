mod cli;

use std::path::Path;
use std::process::ExitCode;

use clap::Parser;
use persrep_core::analysis::analyze_pool;
use persrep_core::data::{ingest_dataset, load_pool, save_pool, write_dataset, InstanceDataset};
use persrep_core::encoder::{load_encoder, AdapterSet, Encoder};
use persrep_core::evaluation::{evaluate_dataset, evaluate_instance, EvalOptions, EvalReport};
use persrep_core::generation::{filter_pool, synthesize_pool, CaptionCorpus, MaskerFailurePolicy, PoolSources};
use persrep_core::perceptual::{EncoderMetric, RecordMasker};
use persrep_core::pipeline::{compare_runs, run, sweep, PipelineConfig, RunSummary};
use persrep_core::toy::{toy_dataset, ToyDatasetConfig};
use persrep_core::training::{train_personalized, write_loss_csv};
use persrep_core::Error;

use cli::{Cli, Command, Overrides};

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

/// Bad inputs map to exit code 2, everything else to 3.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_)
        | Error::Json(_)
        | Error::MissingTrainImages { .. }
        | Error::InsufficientTestImages { .. }
        | Error::MaskShapeMismatch { .. }
        | Error::MalformedAnnotation(_)
        | Error::UnknownInstance(_)
        | Error::EncoderUnavailable(_)
        | Error::UnknownTargetMap(_)
        | Error::NonPositiveTemperature(_)
        | Error::IncompatibleRuns(_)
        | Error::TooFewInstances { .. } => EXIT_CONFIG,
        _ => EXIT_STAGE,
    }
}

fn load_config(o: &Overrides) -> Result<PipelineConfig, Error> {
    let cfg = match &o.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    Ok(o.apply(cfg))
}

fn dataset(cfg: &PipelineConfig) -> Result<InstanceDataset, Error> {
    ingest_dataset(&cfg.dataset_root, cfg.min_test)
}

fn pool_arg(p: &Option<std::path::PathBuf>) -> Result<&Path, Error> {
    p.as_deref().ok_or_else(|| Error::InvalidConfig("--pool is required".into()))
}

fn report_run(summary: &RunSummary) -> u8 {
    let executed = summary.executed().count();
    println!(
        "{}: {executed} stages executed, {} skipped",
        summary.run_dir.display(),
        summary.events.len() - executed
    );
    println!("{}", summary.base.table());
    println!("{}", summary.personalized.table());
    for (id, e) in &summary.failures {
        eprintln!("failed {id}: {e}");
    }
    if summary.failures.is_empty() {
        0
    } else {
        EXIT_STAGE
    }
}

fn dispatch(cmd: Command) -> Result<u8, Error> {
    match cmd {
        Command::Ingest { root, min_test } => {
            let ds = ingest_dataset(&root, min_test)?;
            for (id, inst) in &ds.instances {
                println!("{id}\t{}\ttrain {}\ttest {}", inst.category, inst.train.len(), inst.test.len());
            }
            println!("{} instances, digest {}", ds.len(), ds.digest());
        }
        Command::Generate(a) => {
            let cfg = load_config(&a.overrides)?;
            cfg.generator.validate()?;
            let ds = dataset(&cfg)?;
            let pool = synthesize_pool(&ds, &a.instance, &cfg.generator, &CaptionCorpus::bundled(), &PoolSources::default())?;
            save_pool(&pool, &a.out)?;
            println!("{} positives, {} negatives, digest {}", pool.positives.len(), pool.negatives.len(), pool.digest());
        }
        Command::Filter(a) => {
            let cfg = load_config(&a.overrides)?;
            let ds = dataset(&cfg)?;
            let base = load_encoder(&cfg.encoder_name)?;
            let pool = load_pool(pool_arg(&a.pool)?)?;
            let threshold = cfg.filter_threshold.unwrap_or(persrep_core::generation::DEFAULT_FILTER_THRESHOLD);
            let metric = EncoderMetric { encoder: &base };
            let kept = filter_pool(&pool, &ds.get(&a.instance)?.train, &metric, &RecordMasker, threshold, MaskerFailurePolicy::Drop)?;
            save_pool(&kept, &a.out)?;
            println!("kept {} of {} positives", kept.positives.len(), pool.positives.len());
        }
        Command::Train(a) => {
            let cfg = load_config(&a.overrides)?;
            cfg.train.validate()?;
            let ds = dataset(&cfg)?;
            let pool = load_pool(pool_arg(&a.pool)?)?;
            let enc = load_encoder(&cfg.encoder_name)?.attach(&cfg.adapter, cfg.train.seed)?;
            let out = train_personalized(&enc, &ds.get(&a.instance)?.train, &pool, &cfg.train)?;
            std::fs::create_dir_all(&a.out).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
            out.encoder.adapters().save(&a.out.join("adapter.prla"))?;
            write_loss_csv(&a.out.join("loss.csv"), &out.loss_trace)?;
            println!("{} steps, final loss {:?}", out.steps(), out.loss_trace.last());
        }
        Command::Eval(a) => {
            let cfg = load_config(&a.overrides)?;
            let ds = dataset(&cfg)?;
            let base = load_encoder(&cfg.encoder_name)?;
            let opts = EvalOptions {
                tasks: cfg.eval_tasks.clone(),
                ..EvalOptions::default()
            };
            let report = match (&a.adapter, &a.instance) {
                (Some(adapter), Some(id)) => {
                    let enc = base.with_adapters(AdapterSet::load(adapter)?)?;
                    let r = evaluate_instance(&ds, id, &enc, &opts)?;
                    EvalReport::new("personalized", &cfg.encoder_name, &ds.digest(), [(id.clone(), r)].into())
                }
                (None, Some(id)) => {
                    let r = evaluate_instance(&ds, id, &base, &opts)?;
                    EvalReport::new("base", &cfg.encoder_name, &ds.digest(), [(id.clone(), r)].into())
                }
                _ => evaluate_dataset(&ds, "base", &cfg.encoder_name, |_| Ok(&base as &dyn Encoder), &opts)?,
            };
            report.save_json(&a.out)?;
            report.save_csv(&a.out.with_extension("csv"))?;
            println!("{}", report.table());
        }
        Command::Analyze(a) => {
            let cfg = load_config(&a.overrides)?;
            let ds = dataset(&cfg)?;
            let base = load_encoder(&cfg.encoder_name)?;
            let pool = load_pool(pool_arg(&a.pool)?)?;
            let metric = EncoderMetric { encoder: &base };
            let analysis = analyze_pool(&pool, &ds.get(&a.instance)?.train, &metric, &RecordMasker)?;
            analysis.save_json(&a.out)?;
            println!("fidelity {:.4}, diversity {:.4}", analysis.fidelity_mean, analysis.diversity);
        }
        Command::Run(a) => {
            let cfg = load_config(&a.overrides)?;
            return Ok(report_run(&run(&cfg, a.fail_fast)?));
        }
        Command::Sweep(a) => {
            let cfg = load_config(&a.overrides)?;
            let mut code = 0;
            for (name, summary) in sweep(&cfg, a.fail_fast)? {
                println!("== {name}");
                code = code.max(report_run(&summary));
            }
            return Ok(code);
        }
        Command::Report { runs, out } => {
            let cmp = compare_runs(&runs, &out)?;
            print!("{}", cmp.table());
        }
        Command::Toy { out, instances, test, seed } => {
            let ds = toy_dataset(&ToyDatasetConfig {
                n_instances: instances,
                n_test: test,
                seed,
                ..ToyDatasetConfig::default()
            });
            write_dataset(&ds, &out.join("toy-data"))?;
            let cfg_path = out.join("config.json");
            std::fs::write(&cfg_path, PipelineConfig::toy_profile_json()).map_err(|e| Error::Io {
                path: cfg_path.clone(),
                source: e,
            })?;
            println!("wrote {} and {}", out.join("toy-data").display(), cfg_path.display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use robust_adapt::adapter::embed_eval;
use robust_adapt::baselines::{dfr_train, wise_ft, DfrMode, LinearHead, TipCache};
use robust_adapt::checkpoint::Checkpoint;
use robust_adapt::dataio::{generate_synthetic, load_bundle, save_bundle};
use robust_adapt::fsutil::write_atomic;
use robust_adapt::metrics::{attach_diagnostics, evaluate_groups, render_table, GroupReport};
use robust_adapt::trainer::{hyperparameter_sweep, render_sweep_table, SweepCell, SweepGrid, TrainConfig, TrainReport, TrainRun};
use robust_adapt::zeroshot::{group_prompt_predict, zeroshot_labels, ZeroShotHead};
use robust_adapt::{presets, trainer, EmbeddingBundle, Error, Matrix, ShiftSpec, Split};
use serde::Serialize;

use crate::config::{self, RunConfig, RunMethod};
use crate::Common;

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalMethod {
    Zeroshot,
    Tip,
    Wiseft,
}

/// Provenance block shared by every JSON output.
#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    artifact_version: &'static str,
    command: &'static str,
    bundle_checksum: String,
    config: &'a RunConfig,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize)]
struct Predictions {
    split: Split,
    indices: Vec<usize>,
    labels: Vec<usize>,
}

#[derive(Serialize)]
struct Evaluation {
    method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<TrainReport>,
    test: GroupReport,
    predictions: Predictions,
}

struct Loaded {
    cfg: RunConfig,
    bundle: EmbeddingBundle,
    checksum: String,
    head: ZeroShotHead,
}

fn resolve(common: &Common, method: Option<RunMethod>, alpha: Option<f32>) -> Result<RunConfig> {
    let mut cfg = config::load(common.config_file.as_deref(), &common.overrides)?;
    if let Some(b) = &common.bundle {
        cfg.bundle = Some(b.clone());
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(m) = method {
        cfg.method = m;
    }
    if let Some(a) = alpha {
        cfg.alpha = a;
    }
    cfg.table |= common.table;
    cfg.train.method = cfg.method.trainer_method();
    if cfg.method == RunMethod::Wiseft {
        cfg.train.normalize_inputs = true;
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn load(cfg: RunConfig) -> Result<Loaded> {
    let bundle = load_bundle(cfg.bundle()?)?;
    let head = ZeroShotHead::from_bundle(&bundle, cfg.zeroshot_temperature)?;
    Ok(Loaded {
        checksum: bundle.checksum(),
        cfg,
        bundle,
        head,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

fn envelope<'a, T: Serialize>(l: &'a Loaded, command: &'static str, body: T) -> Envelope<'a, T> {
    Envelope {
        artifact_version: VERSION,
        command,
        bundle_checksum: l.checksum.clone(),
        config: &l.cfg,
        body,
    }
}

fn read_spec(path: &Path) -> Result<ShiftSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let spec = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?
    };
    Ok(spec)
}

pub fn generate(preset: Option<&str>, spec_file: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec = match (preset, spec_file) {
        (Some(name), _) => presets::by_name(name)?,
        (None, Some(path)) => read_spec(path)?,
        (None, None) => bail!(Error::Config("give --preset or --spec".into())),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let bundle = generate_synthetic(&spec)?;
    save_bundle(&bundle, out)?;
    #[derive(Serialize)]
    struct Generated<'a> {
        artifact_version: &'static str,
        command: &'static str,
        bundle_checksum: String,
        spec: &'a ShiftSpec,
    }
    write_json(
        &out.join("generation.json"),
        &Generated {
            artifact_version: VERSION,
            command: "generate",
            bundle_checksum: bundle.checksum(),
            spec: &spec,
        },
    )?;
    println!("wrote {} samples to {}", bundle.n_samples(), out.display());
    Ok(())
}

/// Group report on `indices` with geometry diagnostics over `embeddings`
/// (rows aligned with `indices`).
fn summarize(b: &EmbeddingBundle, indices: &[usize], preds: &[usize], embeddings: &Matrix) -> Result<GroupReport> {
    let y: Vec<usize> = indices.iter().map(|&i| b.class_labels[i]).collect();
    let g: Vec<usize> = indices.iter().map(|&i| b.group_labels[i]).collect();
    let mut r = evaluate_groups(preds, &y, &g)?;
    attach_diagnostics(&mut r, embeddings, &y, &g, b.n_classes())?;
    Ok(r)
}

fn finish(l: &Loaded, command: &'static str, file: &str, eval: Evaluation) -> Result<()> {
    let path = l.cfg.out.join(file);
    if l.cfg.table {
        print!("{}", render_table(&[(eval.method.as_str(), &eval.test)]));
    } else {
        println!(
            "{}: test WG {:.1} avg {:.1} gap {:.1}",
            eval.method,
            100.0 * eval.test.worst_group_accuracy,
            100.0 * eval.test.average_accuracy,
            100.0 * eval.test.gap
        );
    }
    write_json(&path, &envelope(l, command, eval))?;
    println!("report: {}", path.display());
    Ok(())
}

fn predictions(indices: Vec<usize>, labels: Vec<usize>) -> Predictions {
    Predictions {
        split: Split::Test,
        indices,
        labels,
    }
}

pub fn zeroshot(common: &Common, group_prompts: bool) -> Result<()> {
    let l = load(resolve(common, None, None)?)?;
    let test = l.bundle.split_view(Split::Test);
    let x = l.bundle.samples.select_rows(&test);
    let preds = if group_prompts {
        x.iter_rows()
            .map(|u| group_prompt_predict(&l.bundle, u, l.cfg.zeroshot_temperature).map(|p| p.label))
            .collect::<robust_adapt::Result<Vec<_>>>()?
    } else {
        zeroshot_labels(&l.head, &x)?
    };
    let eval = Evaluation {
        method: if group_prompts { "zeroshot-group-prompts" } else { "zeroshot" }.into(),
        alpha: None,
        checkpoint: None,
        report: None,
        test: summarize(&l.bundle, &test, &preds, &x)?,
        predictions: predictions(test, preds),
    };
    finish(&l, "zeroshot", "zeroshot.json", eval)
}

fn tip_predictions(b: &EmbeddingBundle, test: &[usize]) -> Result<Vec<usize>> {
    let train = b.split_view(Split::Train);
    let labels: Vec<usize> = train.iter().map(|&i| b.class_labels[i]).collect();
    let cache = TipCache::new(&b.samples.select_rows(&train), &labels)?;
    Ok(cache.predict_all(&b.samples.select_rows(test)))
}

fn probe_config(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        method: trainer::Method::LinearProbe,
        normalize_inputs: true,
        ..cfg.clone()
    }
}

/// Evaluates `model` on the test split.
fn evaluate(l: &Loaded, model: &trainer::Model) -> Result<(Vec<usize>, Vec<usize>, GroupReport)> {
    let test = l.bundle.split_view(Split::Test);
    let x = l.bundle.samples.select_rows(&test);
    let preds = model.predict(&l.head, &x)?;
    let embeddings = match model {
        trainer::Model::Adapter(p) => embed_eval(p, &x)?,
        trainer::Model::Linear(_) => x,
    };
    let report = summarize(&l.bundle, &test, &preds, &embeddings)?;
    Ok((test, preds, report))
}

pub fn train(common: &Common, method: Option<RunMethod>, alpha: Option<f32>) -> Result<()> {
    let l = load(resolve(common, method, alpha)?)?;
    let cfg = &l.cfg;
    let ckpt_path = cfg.out.join("model.ckpt");
    let run: Option<TrainRun> = match cfg.method {
        RunMethod::LinearProbe | RunMethod::AdapterErm | RunMethod::AdapterContrastive => {
            Some(trainer::train(&l.bundle, &l.head, &cfg.train)?)
        }
        RunMethod::DfrSub => Some(dfr_train(&l.bundle, &l.head, DfrMode::Subsample, &cfg.train)?),
        RunMethod::DfrUp => Some(dfr_train(&l.bundle, &l.head, DfrMode::Upsample, &cfg.train)?),
        RunMethod::Wiseft => {
            let mut run = trainer::train(&l.bundle, &l.head, &probe_config(&cfg.train))?;
            let trainer::Model::Linear(probe) = &run.model else {
                unreachable!("linear probe training returns a linear model")
            };
            run.model = trainer::Model::Linear(wise_ft(&l.head, probe, cfg.alpha)?);
            Some(run)
        }
        RunMethod::Tip => None,
    };
    let eval = match run {
        Some(mut run) => {
            let (test, preds, report) = evaluate(&l, &run.model)?;
            run.model.to_checkpoint().save(&ckpt_path)?;
            run.report.checkpoint = Some(ckpt_path.display().to_string());
            Evaluation {
                method: cfg.method.as_str().into(),
                alpha: (cfg.method == RunMethod::Wiseft).then_some(cfg.alpha),
                checkpoint: Some(ckpt_path.clone()),
                report: Some(run.report),
                test: report,
                predictions: predictions(test, preds),
            }
        }
        None => {
            let test = l.bundle.split_view(Split::Test);
            let preds = tip_predictions(&l.bundle, &test)?;
            let x = l.bundle.samples.select_rows(&test);
            Evaluation {
                method: cfg.method.as_str().into(),
                alpha: None,
                checkpoint: None,
                report: None,
                test: summarize(&l.bundle, &test, &preds, &x)?,
                predictions: predictions(test, preds),
            }
        }
    };
    finish(&l, "train", "report.json", eval)
}

pub fn eval(
    common: &Common,
    checkpoint: Option<&Path>,
    method: Option<EvalMethod>,
    alpha: Option<f32>,
    probe: Option<&Path>,
) -> Result<()> {
    let l = load(resolve(common, None, alpha)?)?;
    let test = l.bundle.split_view(Split::Test);
    let x = l.bundle.samples.select_rows(&test);
    let eval = match (checkpoint, method) {
        (Some(path), _) => {
            let model = trainer::Model::from_checkpoint(&Checkpoint::load(path)?)?;
            let (test, preds, report) = evaluate(&l, &model)?;
            Evaluation {
                method: "checkpoint".into(),
                alpha: None,
                checkpoint: Some(path.to_path_buf()),
                report: None,
                test: report,
                predictions: predictions(test, preds),
            }
        }
        (None, Some(EvalMethod::Zeroshot)) => {
            let preds = zeroshot_labels(&l.head, &x)?;
            Evaluation {
                method: "zeroshot".into(),
                alpha: None,
                checkpoint: None,
                report: None,
                test: summarize(&l.bundle, &test, &preds, &x)?,
                predictions: predictions(test, preds),
            }
        }
        (None, Some(EvalMethod::Tip)) => {
            let preds = tip_predictions(&l.bundle, &test)?;
            Evaluation {
                method: "tip".into(),
                alpha: None,
                checkpoint: None,
                report: None,
                test: summarize(&l.bundle, &test, &preds, &x)?,
                predictions: predictions(test, preds),
            }
        }
        (None, Some(EvalMethod::Wiseft)) => {
            let (probe_head, report) = match probe {
                Some(path) => (LinearHead::from_checkpoint(&Checkpoint::load(path)?)?, None),
                None => {
                    let run = trainer::train(&l.bundle, &l.head, &probe_config(&l.cfg.train))?;
                    let trainer::Model::Linear(h) = run.model else {
                        unreachable!("linear probe training returns a linear model")
                    };
                    (h, Some(run.report))
                }
            };
            let model = trainer::Model::Linear(wise_ft(&l.head, &probe_head, l.cfg.alpha)?);
            let (test, preds, test_report) = evaluate(&l, &model)?;
            Evaluation {
                method: "wiseft".into(),
                alpha: Some(l.cfg.alpha),
                checkpoint: probe.map(Path::to_path_buf),
                report,
                test: test_report,
                predictions: predictions(test, preds),
            }
        }
        (None, None) => bail!(Error::Config("give --checkpoint or --method".into())),
    };
    finish(&l, "eval", "eval.json", eval)
}

pub fn sweep(common: &Common, method: Option<RunMethod>, grid_file: Option<&Path>, jobs: usize) -> Result<()> {
    let mut cfg = resolve(common, method, None)?;
    if !matches!(
        cfg.method,
        RunMethod::LinearProbe | RunMethod::AdapterErm | RunMethod::AdapterContrastive
    ) {
        bail!(Error::Config(format!(
            "sweep supports linear-probe, adapter-erm and adapter-contrastive, not {}",
            cfg.method.as_str()
        )));
    }
    if let Some(path) = grid_file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        cfg.grid = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str::<SweepGrid>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str::<SweepGrid>(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?
        };
    }
    let l = load(cfg)?;
    let outcome = hyperparameter_sweep(&l.bundle, &l.head, &l.cfg.train, &l.cfg.grid, jobs)?;
    let table = render_sweep_table(&outcome.cells);
    print!("{table}");
    write_atomic(&l.cfg.out.join("sweep.txt"), table.as_bytes())?;

    let best_dir = l.cfg.out.join("best");
    let ckpt_path = best_dir.join("model.ckpt");
    let mut best = outcome.best;
    best.model.to_checkpoint().save(&ckpt_path)?;
    best.report.checkpoint = Some(ckpt_path.display().to_string());
    let (test, preds, report) = evaluate(&l, &best.model)?;
    let best_eval = Evaluation {
        method: l.cfg.method.as_str().into(),
        alpha: None,
        checkpoint: Some(ckpt_path),
        report: Some(best.report),
        test: report,
        predictions: predictions(test, preds),
    };

    #[derive(Serialize)]
    struct SweepBody<'a> {
        cells: &'a [SweepCell],
        best_cell: usize,
        jobs: usize,
    }
    write_json(
        &l.cfg.out.join("sweep.json"),
        &envelope(
            &l,
            "sweep",
            SweepBody {
                cells: &outcome.cells,
                best_cell: outcome.best_cell,
                jobs,
            },
        ),
    )?;
    let c = &outcome.cells[outcome.best_cell];
    println!("best: lr {} wd {}", c.learning_rate, c.weight_decay);
    write_json(&best_dir.join("report.json"), &envelope(&l, "sweep", best_eval))?;
    Ok(())
}

pub fn print_config(common: &Common) -> Result<()> {
    let cfg = resolve(common, None, None)?;
    print!("{}", cfg.to_toml()?);
    Ok(())
}

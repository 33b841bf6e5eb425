//! One function per subcommand. Each writes its outputs, then the manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

use mmssl::augment::{AugmentPolicy, SynonymLexicon};
use mmssl::data::{self, GenSpec};
use mmssl::encoders::GridDims;
use mmssl::losses::LossConfig;
use mmssl::metrics::{to_csv, RunMetrics, Split};
use mmssl::model::{Model, ModelConfig};
use mmssl::params::write_atomic;
use mmssl::train::{self, AdamConfig, ProbeConfig, TrainConfig};
use mmssl::verify;

use crate::args::{GenDataArgs, GradcheckArgs, PretrainArgs, ProbeArgs, SupervisedArgs, SweepArgs};
use crate::error::{at_path, CliError};
use crate::manifest::{manifest_path, RunManifest, MANIFEST_VERSION};

struct Recorder {
    command: &'static str,
    started: Instant,
    seeds: Vec<u64>,
    inputs: BTreeMap<String, PathBuf>,
    outputs: BTreeMap<String, PathBuf>,
}

impl Recorder {
    fn new(command: &'static str) -> Self {
        Self {
            command,
            started: Instant::now(),
            seeds: Vec::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn input(&mut self, key: &str, path: &Path) {
        self.inputs.insert(key.to_string(), path.to_path_buf());
    }

    fn output(&mut self, key: &str, path: &Path) {
        self.outputs.insert(key.to_string(), path.to_path_buf());
    }

    /// Writes the manifest next to `primary`, recording `args` as the config
    /// with every output path made explicit.
    fn finish(self, args: &impl Serialize, primary: &Path) -> Result<(), CliError> {
        let Value::Object(map) = serde_json::to_value(args)? else {
            return Err(CliError::Usage("arguments did not serialize to a map".into()));
        };
        let mut config: BTreeMap<String, Value> = map.into_iter().collect();
        for (key, path) in &self.outputs {
            config.insert(key.clone(), Value::String(path.to_string_lossy().into_owned()));
        }
        let manifest = RunManifest {
            format_version: MANIFEST_VERSION,
            command: self.command.to_string(),
            config,
            seeds: self.seeds,
            inputs: self.inputs,
            outputs: self.outputs,
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        manifest.save(&manifest_path(primary))
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let mut rec = Recorder::new("gen-data");
    rec.seeds.push(a.seed);
    let spec = GenSpec {
        n_samples: a.n,
        latent_dim: a.latent_dim,
        classes: a.classes,
        grid: GridDims {
            height: a.height,
            width: a.width,
            channels: a.channels,
        },
        vocab: a.vocab,
        seq_len: a.seq_len,
        eta: a.eta,
        seed: a.seed,
    };
    let ds = data::generate(&spec)?;
    data::save(&ds, &a.out)?;
    rec.output("out", &a.out);
    if let Some(lex) = &a.lexicon_out {
        write_atomic(lex, SynonymLexicon::paired(a.vocab).to_file_string().as_bytes())?;
        rec.output("lexicon_out", lex);
    }
    println!("wrote {} samples to {}", ds.len(), a.out.display());
    rec.finish(a, &a.out)
}

fn train_config(a: &PretrainArgs, grid: GridDims, vocab: usize) -> TrainConfig {
    TrainConfig {
        method: a.method,
        batch_size: a.batch_size,
        epochs: a.epochs,
        learning_rate: a.learning_rate,
        adam: AdamConfig {
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.adam_eps,
        },
        seed: a.seed,
        loss: LossConfig {
            temperature: a.temperature,
            margin: a.margin,
            lambda: a.lambda,
            lambda_u2v: a.lambda_u2v,
            lambda_v2u: a.lambda_v2u,
            lambda_f2f: a.lambda_f2f,
            lambda_f2i: a.lambda_f2i,
            lambda_f2t: a.lambda_f2t,
            negative_mode: a.negative_mode,
        },
        model: ModelConfig {
            grid,
            vocab,
            image_hidden: a.image_hidden,
            d_enc: a.d_enc,
            d_tok: a.d_tok,
            head_hidden: a.head_hidden,
            dim: a.dim,
            heads: a.heads,
        },
        augment: AugmentPolicy {
            noise_prob: a.noise_prob,
            noise_sigma: a.noise_sigma,
            mask_prob: a.mask_prob,
            mask_fraction: a.mask_fraction,
            rescale_prob: a.rescale_prob,
            rescale_range: (a.rescale_min, a.rescale_max),
            synonym_prob: a.synonym_prob,
        },
        shuffle: !a.no_shuffle,
    }
}

pub fn pretrain(a: &PretrainArgs) -> Result<(), CliError> {
    if a.runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    let mut rec = Recorder::new("pretrain");
    let ds = data::load(&a.data).map_err(at_path(&a.data))?;
    rec.input("data", &a.data);
    let lexicon = match &a.lexicon {
        Some(p) => {
            rec.input("lexicon", p);
            SynonymLexicon::load(p).map_err(at_path(p))?
        }
        None => SynonymLexicon::paired(ds.vocab),
    };
    let base = train_config(a, ds.grid, ds.vocab);
    base.validate()?;
    let metrics_path = a.metrics.clone().unwrap_or_else(|| with_suffix(&a.out, ".csv"));

    let mut runs = Vec::new();
    for k in 0..a.runs {
        let cfg = TrainConfig {
            seed: a.seed + k,
            ..base.clone()
        };
        rec.seeds.push(cfg.seed);
        let mut run = train::pretrain(&cfg, &ds, &lexicon)?;
        let ckpt = if a.runs == 1 {
            a.out.clone()
        } else {
            with_suffix(&a.out, &format!(".run{k}"))
        };
        let meta: BTreeMap<String, String> = [
            ("method".to_string(), cfg.method.to_string()),
            ("seed".to_string(), cfg.seed.to_string()),
        ]
        .into();
        run.model.save(&ckpt, &meta)?;
        if a.runs > 1 {
            run.metrics.method = format!("{}#seed{}", cfg.method, cfg.seed);
        }
        let first = run.metrics.loss_at(1, Split::Train).unwrap_or(f64::NAN);
        println!(
            "{} seed {}: epoch 1 loss {first:.6}, epoch {} loss {:.6} -> {}",
            cfg.method,
            cfg.seed,
            cfg.epochs,
            run.final_loss(),
            ckpt.display()
        );
        runs.push(run.metrics);
    }
    write_atomic(&metrics_path, to_csv(&runs).as_bytes())?;
    rec.output("out", &a.out);
    rec.output("metrics", &metrics_path);
    rec.finish(a, &metrics_path)
}

fn probe_config(c: &SupervisedArgs, hidden: Option<usize>) -> ProbeConfig {
    let defaults = ProbeConfig::default();
    ProbeConfig {
        batch_size: c.batch_size,
        learning_rate: c.learning_rate,
        epochs: c.epochs,
        heldout_fraction: c.heldout_fraction,
        hidden: hidden.unwrap_or(defaults.hidden),
        seed: c.seed,
        ..defaults
    }
}

fn load_frozen(rec: &mut Recorder, c: &SupervisedArgs) -> Result<(Model, String, data::Dataset), CliError> {
    let (mut model, meta) = Model::load(&c.checkpoint).map_err(at_path(&c.checkpoint))?;
    model.freeze_encoders();
    rec.input("checkpoint", &c.checkpoint);
    let ds = data::load(&c.data).map_err(at_path(&c.data))?;
    rec.input("data", &c.data);
    rec.seeds.push(c.seed);
    let tag = meta.get("method").cloned().unwrap_or_else(|| "unknown".into());
    Ok((model, tag, ds))
}

fn write_metrics(rec: &mut Recorder, path: &Path, runs: &[RunMetrics]) -> Result<(), CliError> {
    write_atomic(path, to_csv(runs).as_bytes())?;
    rec.output("metrics", path);
    Ok(())
}

pub fn probe(a: &ProbeArgs) -> Result<(), CliError> {
    let mut rec = Recorder::new("probe");
    let (model, tag, ds) = load_frozen(&mut rec, &a.common)?;
    let cfg = probe_config(&a.common, None);
    let metrics = train::linear_probe(&model, &ds, &cfg, &tag)?;
    println!(
        "probe {tag}: held-out accuracy {:.4}, macro-F1 {:.4}",
        train::final_accuracy(&metrics).unwrap_or(f64::NAN),
        train::final_macro_f1(&metrics).unwrap_or(f64::NAN)
    );
    write_metrics(&mut rec, &a.common.metrics, &[metrics])?;
    rec.finish(a, &a.common.metrics)
}

pub fn sweep(a: &SweepArgs) -> Result<(), CliError> {
    let mut rec = Recorder::new("sweep");
    if a.fractions.is_empty() {
        return Err(CliError::Usage("--fractions needs at least one value".into()));
    }
    let (model, tag, ds) = load_frozen(&mut rec, &a.common)?;
    let cfg = probe_config(&a.common, Some(a.hidden));
    let runs = train::finetune_sweep(&model, &ds, &a.fractions, &cfg, &tag)?;
    for r in &runs {
        println!(
            "sweep {tag} fraction {}: held-out macro-F1 {:.4}",
            r.fraction.unwrap_or(f64::NAN),
            train::final_macro_f1(r).unwrap_or(f64::NAN)
        );
    }
    write_metrics(&mut rec, &a.common.metrics, &runs)?;
    rec.finish(a, &a.common.metrics)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let mut rec = Recorder::new("gradcheck");
    rec.seeds.extend(0..a.seeds);
    let outcomes = verify::gradient_suite(a.seeds)?;
    let mut report = String::from("op,seed,max_rel_error,status\n");
    let mut failures = Vec::new();
    for o in &outcomes {
        let status = if o.passed(a.tolerance) { "pass" } else { "FAIL" };
        println!("{:<24} seed {:>3}  max rel error {:.3e}  {status}", o.op, o.seed, o.max_rel_error);
        report.push_str(&format!("{},{},{},{status}\n", o.op, o.seed, o.max_rel_error));
        if !o.passed(a.tolerance) {
            failures.push(format!("{} seed {} ({:.3e})", o.op, o.seed, o.max_rel_error));
        }
    }
    println!(
        "{} of {} checks within tolerance {:e}",
        outcomes.len() - failures.len(),
        outcomes.len(),
        a.tolerance
    );
    if let Some(out) = &a.out {
        write_atomic(out, report.as_bytes())?;
        rec.output("out", out);
        rec.finish(a, out)?;
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "{} gradient checks exceeded tolerance {:e}: {}",
            failures.len(),
            a.tolerance,
            failures.join(", ")
        )))
    }
}

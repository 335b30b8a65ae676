use std::path::{Path, PathBuf};
use std::time::Instant;

use fsrnn::config::{preset, ExperimentConfig};
use fsrnn::data::{ingest, Split, Vocab};
use fsrnn::report::append_csv_row;
use fsrnn::tensor::Scalar;
use fsrnn::training::{Checkpoint, Event, MetricRow, Precision, TrainHooks, Trainer};
use fsrnn::{Error, Result};

use crate::TrainArgs;

pub const METRICS: &str = "metrics.csv";
pub const LAST: &str = "last.ckpt";
pub const BEST: &str = "best.ckpt";

fn load_config(a: &TrainArgs) -> Result<(ExperimentConfig, String)> {
    let (mut cfg, name) = match (&a.preset, &a.config) {
        (Some(p), _) => (preset(p)?, p.clone()),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let cfg = ExperimentConfig::from_toml(&text)?;
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned());
            let name = cfg.preset.clone().or(stem).unwrap_or_else(|| "run".into());
            (cfg, name)
        }
        (None, None) => return Err(Error::Config("pass --preset or --config".into())),
    };
    if let Some(s) = a.scale {
        cfg = cfg.scaled(s)?;
    }
    if let Some(d) = &a.data {
        cfg.data.path = Some(d.clone());
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(p) = a.precision {
        cfg.train.precision = p.into();
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(o) = &a.output {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok((cfg, name))
}

/// Directory a config trains into: `<output_dir>/<name>-<hash>`.
pub fn run_dir(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    Ok(cfg.output_dir.join(format!("{name}-{}", cfg.hash()?)))
}

pub fn run(a: TrainArgs) -> Result<()> {
    let (cfg, name) = load_config(&a)?;
    let Some(data) = cfg.data.path.clone() else {
        return Err(Error::Data("no corpus given; pass --data or set data.path".into()));
    };
    let dir = run_dir(&cfg, &name)?;
    let last = dir.join(LAST);
    let resuming = a.resume && last.exists();
    if dir.exists() && !resuming {
        if a.force {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        } else if !a.resume {
            return Err(Error::Config(format!(
                "{} already exists; pass --resume to continue or --force to start over",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, cfg.to_toml()?).map_err(|e| Error::io(&config_path, e))?;

    let corpus = ingest(&data, cfg.data.mode, cfg.data.split, cfg.data.unknown)?;
    let mut spec = cfg.model.clone();
    if spec.vocab != 0 && spec.vocab != corpus.vocab.size() {
        return Err(Error::Config(format!(
            "model.vocab = {} but the corpus has {} symbols",
            spec.vocab,
            corpus.vocab.size()
        )));
    }
    spec.vocab = corpus.vocab.size();
    spec.validate()?;
    if !a.quiet {
        eprintln!(
            "{}: {} parameters, vocab {}, {} train / {} valid tokens, precision {}",
            dir.display(),
            spec.param_count()?,
            spec.vocab,
            corpus.tokens(Split::Train).len(),
            corpus.tokens(Split::Valid).len(),
            cfg.train.precision.as_str(),
        );
    }
    let ctx = RunContext {
        dir,
        cfg,
        vocab: corpus.vocab.clone(),
        quiet: a.quiet,
    };
    let train = corpus.tokens(Split::Train);
    let valid = corpus.tokens(Split::Valid);
    match ctx.cfg.train.precision {
        Precision::F64 => fit(&ctx, start::<f64>(&ctx, &spec, resuming)?, train, valid),
        Precision::F32 => fit(&ctx, start::<f32>(&ctx, &spec, resuming)?, train, valid),
    }
}

struct RunContext {
    dir: PathBuf,
    cfg: ExperimentConfig,
    vocab: Vocab,
    quiet: bool,
}

fn start<T: Scalar>(ctx: &RunContext, spec: &fsrnn::arch::ArchitectureSpec, resuming: bool) -> Result<(Trainer<T>, f64)> {
    let metrics = ctx.dir.join(METRICS);
    if !resuming {
        let _ = std::fs::remove_file(&metrics);
        return Ok((Trainer::new(spec, ctx.cfg.train.clone())?, 0.0));
    }
    let ckpt = Checkpoint::load(&ctx.dir.join(LAST))?;
    if ckpt.header.vocab.as_ref() != Some(&ctx.vocab) {
        return Err(Error::Checkpoint("checkpoint vocabulary differs from the corpus".into()));
    }
    if &ckpt.header.spec != spec {
        return Err(Error::Checkpoint("checkpoint architecture differs from the config".into()));
    }
    let step = ckpt.header.progress.step;
    let offset = truncate_metrics(&metrics, step)?;
    let trainer = ckpt.into_trainer::<T>()?;
    if !ctx.quiet {
        eprintln!("resuming at epoch {} step {}", trainer.progress.epoch, step);
    }
    Ok((trainer, offset))
}

/// Drops metrics rows logged after the checkpoint being resumed and returns
/// the last kept `seconds` value.
fn truncate_metrics(path: &Path, step: u64) -> Result<f64> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(0.0);
    };
    let mut kept = String::new();
    let mut seconds = 0.0;
    for (i, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if i > 0 {
            let row_step: u64 = cols.get(1).and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
            if row_step > step {
                continue;
            }
            seconds = cols.last().and_then(|s| s.parse().ok()).unwrap_or(seconds);
        }
        kept.push_str(line);
        kept.push('\n');
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))?;
    Ok(seconds)
}

fn fit<T: Scalar>(ctx: &RunContext, (mut trainer, offset): (Trainer<T>, f64), train: &[usize], valid: &[usize]) -> Result<()> {
    let mut hooks = CliHooks {
        ctx,
        started: Instant::now(),
        offset,
    };
    let outcome = trainer.fit(train, valid, &mut hooks);
    // keep whatever was reached, even on a numeric abort
    hooks.save(&trainer, LAST)?;
    outcome?;
    let best = ctx.dir.join(BEST);
    if !best.exists() {
        let params = trainer.best.as_ref().unwrap_or(&trainer.params);
        let mut ckpt = Checkpoint::from_params(params, trainer.config.clone(), Some(ctx.vocab.clone()));
        ckpt.header.split = Some(ctx.cfg.data.split);
        ckpt.save(&best)?;
    }
    if !ctx.quiet {
        match trainer.progress.best_valid {
            Some(b) => eprintln!("done: best valid bpc {b:.4} at epoch {}", trainer.progress.best_epoch.unwrap_or(0)),
            None => eprintln!("done"),
        }
    }
    Ok(())
}

struct CliHooks<'a> {
    ctx: &'a RunContext,
    started: Instant,
    offset: f64,
}

impl CliHooks<'_> {
    fn save<T: Scalar>(&self, t: &Trainer<T>, file: &str) -> Result<()> {
        Checkpoint::from_trainer(t, Some(self.ctx.vocab.clone()), Some(self.ctx.cfg.data.split)).save(&self.ctx.dir.join(file))
    }
}

impl<T: Scalar> TrainHooks<T> for CliHooks<'_> {
    fn on_row(&mut self, row: &MetricRow) -> Result<()> {
        let seconds = self.offset + self.started.elapsed().as_secs_f64();
        if !self.ctx.quiet {
            let norm = row.grad_norm.map(|n| format!(" grad_norm {n:.3}")).unwrap_or_default();
            eprintln!(
                "epoch {} step {} {} bpc {:.4} lr {:.2e}{norm} ({seconds:.0}s)",
                row.epoch, row.step, row.split, row.bpc, row.lr
            );
        }
        append_csv_row(&self.ctx.dir.join(METRICS), MetricRow::HEADER, &row.csv(seconds))
    }

    fn on_event(&mut self, t: &Trainer<T>, event: Event) -> Result<()> {
        match event {
            Event::Periodic | Event::EpochEnd => self.save(t, LAST),
            Event::NewBest => self.save(t, BEST),
        }
    }
}

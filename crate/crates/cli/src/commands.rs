use std::path::{Path, PathBuf};

use fsrnn::analysis::{
    cell_change_rate, ensemble_eval, gradient_probe, position_bpc, write_ensemble_csv, ProbeConfig,
};
use fsrnn::arch::ModelParams;
use fsrnn::config::preset;
use fsrnn::data::{read_symbols, synthetic_text, Corpus, Split, Vocab};
use fsrnn::training::{evaluate as score, Checkpoint, Precision};
use fsrnn::{Error, Result};

use crate::{AnalyzeKind, DataArgs, EnsembleArgs, EvalArgs};

struct Loaded {
    params: ModelParams<f64>,
    vocab: Vocab,
    header: fsrnn::training::CheckpointHeader,
}

fn load(path: &Path) -> Result<Loaded> {
    let ckpt = Checkpoint::load(path)?;
    let Some(vocab) = ckpt.header.vocab.clone() else {
        return Err(Error::Checkpoint(format!("{} has no vocabulary", path.display())));
    };
    Ok(Loaded {
        params: ckpt.params,
        vocab,
        header: ckpt.header,
    })
}

/// Tokens of the requested split, cut with the rule stored in `model`.
fn split_tokens(model: &Loaded, data: &DataArgs) -> Result<Vec<usize>> {
    let split = Split::parse(&data.split)?;
    let Some(rule) = model.header.split else {
        return Err(Error::Checkpoint("checkpoint does not record its split rule".into()));
    };
    let symbols = read_symbols(&data.data, model.vocab.mode)?;
    let sizes = rule.sizes(symbols.len())?;
    let used: usize = sizes.iter().sum();
    let corpus = Corpus::with_vocab(model.vocab.clone(), &symbols[..used], sizes)?;
    Ok(corpus.tokens(split).to_vec())
}

fn load_many(paths: &[PathBuf]) -> Result<Vec<Loaded>> {
    let models = paths.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    if models.iter().any(|m| m.vocab != models[0].vocab) {
        return Err(Error::Checkpoint("checkpoints were trained on different vocabularies".into()));
    }
    Ok(models)
}

/// Short model names: the architecture kind, or the path when kinds repeat.
fn names(paths: &[PathBuf], models: &[Loaded]) -> Vec<String> {
    let kinds: Vec<&str> = models.iter().map(|m| m.params.spec.kind.as_str()).collect();
    kinds
        .iter()
        .zip(paths)
        .map(|(k, p)| {
            if kinds.iter().filter(|x| *x == k).count() == 1 {
                k.to_string()
            } else {
                p.display().to_string()
            }
        })
        .collect()
}

pub fn evaluate(a: EvalArgs) -> Result<()> {
    let model = load(&a.checkpoint)?;
    let tokens = split_tokens(&model, &a.data)?;
    let bpc = match Precision::from(a.precision) {
        Precision::F64 => score(&model.params, &tokens, a.batch)?,
        Precision::F32 => score(&model.params.cast::<f32>(), &tokens, a.batch)?,
    };
    println!("bpc={bpc:.6}");
    Ok(())
}

pub fn analyze(kind: AnalyzeKind) -> Result<()> {
    match kind {
        AnalyzeKind::Probe {
            checkpoint,
            data,
            max_lag,
            samples,
            window,
            seed,
            out,
        } => {
            let model = load(&checkpoint)?;
            let tokens = split_tokens(&model, &data)?;
            let mut cfg = ProbeConfig::new(max_lag, samples, seed);
            if let Some(w) = window {
                cfg.window = w;
            }
            let report = gradient_probe(&model.params, &tokens, &cfg)?;
            report.write_csv(&out)?;
            for (i, label) in report.labels.iter().enumerate() {
                let at = max_lag.min(20);
                println!("{label}: lag 0 {:.4e}, lag {at} {:.4e}", report.mean(i, 0), report.mean(i, at));
            }
        }
        AnalyzeKind::ChangeRate {
            checkpoint,
            data,
            steps,
            out,
        } => {
            let model = load(&checkpoint)?;
            let tokens = split_tokens(&model, &data)?;
            let report = cell_change_rate(&model.params, &tokens, steps.min(tokens.len()))?;
            report.write_csv(&out)?;
            for (label, v) in report.labels.iter().zip(&report.values) {
                println!("{label}: {v:.6e}");
            }
        }
        AnalyzeKind::PositionBpc {
            checkpoints,
            data,
            max_pos,
            batch,
            out,
        } => {
            let models = load_many(&checkpoints)?;
            let tokens = split_tokens(&models[0], &data)?;
            let named: Vec<(String, &ModelParams<f64>)> =
                names(&checkpoints, &models).into_iter().zip(models.iter().map(|m| &m.params)).collect();
            let report = position_bpc(&named, &models[0].vocab, &tokens, max_pos, batch)?;
            report.write_csv(&out)?;
            for (name, row) in report.models.iter().zip(&report.bpc) {
                let cells: Vec<String> = row.iter().map(|b| format!("{b:.3}")).collect();
                println!("{name}: {}", cells.join(" "));
            }
        }
    }
    Ok(())
}

pub fn ensemble(a: EnsembleArgs) -> Result<()> {
    let models = load_many(&a.checkpoints)?;
    let tokens = split_tokens(&models[0], &a.data)?;
    let params: Vec<&ModelParams<f64>> = models.iter().map(|m| &m.params).collect();
    let (bpc, _) = ensemble_eval(&params, &tokens, a.batch)?;
    let names: Vec<String> = a.checkpoints.iter().map(|p| p.display().to_string()).collect();
    write_ensemble_csv(&a.out, &names, bpc)?;
    println!("bpc={bpc:.6}");
    Ok(())
}

pub fn dump_config(name: &str, scale: Option<f64>) -> Result<()> {
    let mut cfg = preset(name)?;
    if let Some(s) = scale {
        cfg = cfg.scaled(s)?;
    }
    print!("{}", cfg.to_toml()?);
    Ok(())
}

pub fn synth(out: &Path, len: usize, seed: u64) -> Result<()> {
    std::fs::write(out, synthetic_text(seed, len)).map_err(|e| Error::io(out, e))
}

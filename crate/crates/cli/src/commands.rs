use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use osaq::corpus::{windows, Generator};
use osaq::pipeline::{
    absorb_diagnostics_tensors, absorb_model, absorb_report, calibrate, evaluate, finalize_hessians,
    hessians_from_archive, hessians_to_tensors, histogram, mean_std, metrics_report, quantize_model,
    quantized_tensors, sample_corpus, stability_model, sweep, sweep_grid, tail_count, Hessians,
};
use osaq::tensorstore::{archive_read, archive_write};
use osaq::toymodel::{model_init_with, InitOptions, LayerWeights, ModelConfig};

use crate::config::RunConfig;
use crate::error::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Offset added to the run seed when sampling text from the model, so the
/// corpus stream is decorrelated from the weight initialization stream.
const CORPUS_SEED_OFFSET: u64 = 1_000;

/// Tail threshold for `hist`, in standard deviations of the original weights.
const TAIL_SIGMAS: f64 = 5.0;

type Model = LayerWeights<f64>;

fn load_model(cfg: &RunConfig) -> Result<Model, CliError> {
    match &cfg.options.model {
        Some(path) => Ok(Model::from_archive(&archive_read(path)?)?),
        None => Ok(model_init_with(ModelConfig::default(), cfg.seed, &InitOptions::desk())?),
    }
}

/// Byte stream holding at least `seqs` sequences: the token file if one is
/// given, otherwise text sampled from the model.
fn token_stream(cfg: &RunConfig, model: &Model, file: Option<&PathBuf>, seqs: usize) -> Result<Vec<u8>, CliError> {
    if let Some(path) = file {
        return Ok(fs::read(path)?);
    }
    sampled_tokens(model, seqs, cfg.seq_len, cfg.seed)
}

fn sampled_tokens(model: &Model, seqs: usize, len: usize, seed: u64) -> Result<Vec<u8>, CliError> {
    if model.config.vocab > 256 {
        return Err(CliError::config("sampled corpora need a vocabulary of at most 256 tokens"));
    }
    let tokens = sample_corpus(model, seqs, len, seed.wrapping_add(CORPUS_SEED_OFFSET))?;
    Ok(tokens.into_iter().map(|t| t as u8).collect())
}

fn split(stream: &[u8], first_seq: usize, count: usize, len: usize, what: &str) -> Result<Vec<Vec<u32>>, CliError> {
    windows(stream, first_seq * len, count, len).ok_or_else(|| {
        CliError::data(format!(
            "token stream of {} bytes is too short for {what}: need sequences {first_seq}..{} of length {len}",
            stream.len(),
            first_seq + count
        ))
    })
}

fn calibrate_split(model: &Model, seqs: &[Vec<u32>]) -> Result<Hessians, CliError> {
    Ok(finalize_hessians(&calibrate(model, seqs)?)?)
}

fn calibration_seqs(cfg: &RunConfig, stream: &[u8]) -> Result<Vec<Vec<u32>>, CliError> {
    split(stream, cfg.calib_offset, cfg.calib_samples, cfg.seq_len, "calibration")
}

fn eval_seqs(cfg: &RunConfig, stream: &[u8]) -> Result<Vec<Vec<u32>>, CliError> {
    split(stream, cfg.eval_offset, cfg.eval_samples, cfg.seq_len, "evaluation")
}

/// Sequences a run touches when sampling its own corpus.
fn needed_seqs(cfg: &RunConfig) -> usize {
    (cfg.calib_offset + cfg.calib_samples).max(cfg.eval_offset + cfg.eval_samples)
}

/// Hessians from the archive, or a fresh calibration on the run's corpus.
fn load_hessians(cfg: &RunConfig, model: &Model, stream: &[u8]) -> Result<Hessians, CliError> {
    match &cfg.options.hessians {
        Some(path) => Ok(hessians_from_archive(&archive_read(path)?)?),
        None => calibrate_split(model, &calibration_seqs(cfg, stream)?),
    }
}

fn out_path(cfg: &RunConfig, name: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cfg.out)?;
    Ok(cfg.out.join(name))
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Report envelope shared by every command.
fn report(cfg: &RunConfig, command: &str, body: Value) -> Value {
    let mut v = json!({
        "calibration": cfg.calibration_summary(),
        "command": command,
        "config": cfg.echo(),
        "seed": cfg.seed,
        "version": VERSION,
    });
    if let Value::Object(extra) = body {
        v.as_object_mut().expect("object literal").extend(extra);
    }
    // Round-trip through a map so the merged keys come out sorted.
    serde_json::from_value::<BTreeMap<String, Value>>(v)
        .map(|m| serde_json::to_value(m).expect("map serializes"))
        .expect("object")
}

fn relative_change(before: f64, after: f64) -> f64 {
    (after - before) / before
}

pub fn init(cfg: &RunConfig) -> Result<String, CliError> {
    let model = load_model(cfg)?;
    let path = out_path(cfg, "model.osaq")?;
    archive_write(&path, model.to_tensors(cfg.precision))?;
    Ok(format!("wrote {}", path.display()))
}

pub fn gen_tokens(cfg: &RunConfig) -> Result<String, CliError> {
    let spec = cfg.options.generator.as_deref().unwrap_or("model");
    let count = cfg.options.token_count.unwrap_or(needed_seqs(cfg) * cfg.seq_len);
    let bytes = if spec == "model" {
        let model = load_model(cfg)?;
        let mut t = sampled_tokens(&model, count.div_ceil(cfg.seq_len), cfg.seq_len, cfg.seed)?;
        t.truncate(count);
        t
    } else {
        let g: Generator = spec.parse().map_err(CliError::config)?;
        g.generate(count, cfg.seed)
    };
    let path = out_path(cfg, "tokens.bin")?;
    fs::write(&path, &bytes)?;
    Ok(format!("wrote {} tokens from {spec} to {}", bytes.len(), path.display()))
}

pub fn cmd_calibrate(cfg: &RunConfig) -> Result<String, CliError> {
    let model = load_model(cfg)?;
    let stream = token_stream(cfg, &model, cfg.options.tokens.as_ref(), cfg.calib_offset + cfg.calib_samples)?;
    let accs = calibrate(&model, &calibration_seqs(cfg, &stream)?)?;
    let h = finalize_hessians(&accs)?;
    let path = out_path(cfg, "hessians.osaq")?;
    archive_write(&path, hessians_to_tensors(&h))?;
    let layers: serde_json::Map<String, Value> = accs
        .iter()
        .map(|(name, acc)| {
            let trace: f64 = (0..h[name].rows()).map(|i| h[name][(i, i)]).sum();
            (
                name.clone(),
                json!({ "dim": acc.dim(), "samples": acc.sample_count(), "trace": trace }),
            )
        })
        .collect();
    write_json(&out_path(cfg, "calibrate.json")?, &report(cfg, "calibrate", json!({ "layers": layers })))?;
    Ok(format!("calibrated {} layers, wrote {}", h.len(), path.display()))
}

pub fn cmd_absorb(cfg: &RunConfig) -> Result<String, CliError> {
    let model = load_model(cfg)?;
    let stream = token_stream(cfg, &model, cfg.options.tokens.as_ref(), needed_seqs(cfg))?;
    let h = load_hessians(cfg, &model, &stream)?;
    let outcome = absorb_model(&model, &h, &cfg.absorb)?;
    let eval = eval_seqs(cfg, &stream)?;
    let fp = model.perplexity_many(&eval)?;
    let fp_absorbed = outcome.model.perplexity_many(&eval)?;
    let path = out_path(cfg, "absorbed.osaq")?;
    let mut tensors = outcome.model.to_tensors(cfg.precision);
    tensors.extend(absorb_diagnostics_tensors(&outcome, cfg.precision));
    archive_write(&path, tensors)?;
    let body = json!({
        "audit": { "fp": fp, "fp_absorbed": fp_absorbed, "relative_change": relative_change(fp, fp_absorbed) },
        "layers": absorb_report(&outcome),
    });
    write_json(&out_path(cfg, "absorb.json")?, &report(cfg, "absorb", body))?;
    Ok(format!(
        "absorbed {} layers, FP perplexity {fp:.4} -> {fp_absorbed:.4}, wrote {}",
        outcome.layers.len(),
        path.display()
    ))
}

pub fn cmd_quantize(cfg: &RunConfig) -> Result<String, CliError> {
    let model = load_model(cfg)?;
    let stream = token_stream(cfg, &model, cfg.options.tokens.as_ref(), needed_seqs(cfg))?;
    let h = load_hessians(cfg, &model, &stream)?;
    let q = quantize_model(&model, &h, &cfg.quant)?;
    let eval = eval_seqs(cfg, &stream)?;
    let fp = model.perplexity_many(&eval)?;
    let quantized = q.model.perplexity_many(&eval)?;
    let path = out_path(cfg, "quantized.osaq")?;
    let mut tensors = q.model.to_tensors(cfg.precision);
    tensors.extend(quantized_tensors(&q, cfg.precision));
    archive_write(&path, tensors)?;
    let body = json!({
        "layers": metrics_report(&q.metrics),
        "perplexity": { "fp": fp, "quantized": quantized, "relative_change": relative_change(fp, quantized) },
    });
    write_json(&out_path(cfg, "quantize.json")?, &report(cfg, "quantize", body))?;
    Ok(format!("quantized perplexity {quantized:.4} (FP {fp:.4}), wrote {}", path.display()))
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<String, CliError> {
    let model = load_model(cfg)?;
    let stream = token_stream(cfg, &model, cfg.options.tokens.as_ref(), needed_seqs(cfg))?;
    let h = load_hessians(cfg, &model, &stream)?;
    let e = evaluate(&model, &h, &eval_seqs(cfg, &stream)?, &cfg.absorb, &cfg.quant)?;
    let path = out_path(cfg, "report.json")?;
    write_json(&path, &report(cfg, "eval", e.to_json()))?;
    let p = e.perplexity;
    Ok(format!(
        "fp {:.4} fp+absorb {:.4} rtn {:.4} osaq+rtn {:.4} compensated {:.4} osaq+compensated {:.4}",
        p.fp, p.fp_absorbed, p.rtn, p.osaq_rtn, p.compensated, p.osaq_compensated
    ))
}

pub fn cmd_stability(cfg: &RunConfig) -> Result<String, CliError> {
    let model = load_model(cfg)?;
    let second_end = match &cfg.options.tokens2 {
        Some(_) => 0,
        None => cfg.split2_offset + cfg.calib_samples,
    };
    let seqs = (cfg.calib_offset + cfg.calib_samples).max(second_end);
    let stream = token_stream(cfg, &model, cfg.options.tokens.as_ref(), seqs)?;
    let first = calibration_seqs(cfg, &stream)?;
    let second = match &cfg.options.tokens2 {
        Some(path) => split(&fs::read(path)?, cfg.calib_offset, cfg.calib_samples, cfg.seq_len, "the second split")?,
        None => split(&stream, cfg.split2_offset, cfg.calib_samples, cfg.seq_len, "the second split")?,
    };
    let reports = stability_model(&calibrate_split(&model, &first)?, &calibrate_split(&model, &second)?, &cfg.absorb)?;
    let mut csv = String::from("layer,k1,k2,max_singular_value,min_singular_value\n");
    let mut worst = f64::INFINITY;
    for r in &reports {
        let min = r.singular_values.last().copied();
        let fmt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        let max = (!r.singular_values.is_empty()).then(|| r.max_singular_value());
        if let Some(m) = max {
            worst = worst.min(m);
        }
        writeln!(csv, "{},{},{},{},{}", r.layer, r.k1, r.k2, fmt(max), fmt(min)).expect("string write");
    }
    let path = out_path(cfg, "stability.csv")?;
    fs::write(&path, csv)?;
    Ok(format!("lowest per-layer max singular value {worst:.6}, wrote {}", path.display()))
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<String, CliError> {
    let model = load_model(cfg)?;
    let stream = token_stream(cfg, &model, cfg.options.tokens.as_ref(), needed_seqs(cfg))?;
    let h = load_hessians(cfg, &model, &stream)?;
    let o = &cfg.options;
    let grid = sweep_grid(
        &cfg.absorb,
        o.sweep_gamma.as_deref().unwrap_or_default(),
        &cfg.sweep_tau,
        o.sweep_mu1.as_deref().unwrap_or_default(),
        o.sweep_mu2.as_deref().unwrap_or_default(),
    );
    let points = sweep(&model, &h, &eval_seqs(cfg, &stream)?, &grid, &cfg.quant)?;
    let mut csv =
        String::from("gamma,tau_rel,mu1,mu2,k_rule,perplexity,mean_k,linf_non_increasing_fraction,quadratic_perturbation\n");
    for p in &points {
        let a = &p.absorb;
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            a.gamma, a.tau, a.mu1, a.mu2, a.rule, p.perplexity, p.mean_k, p.linf_non_increasing_fraction, p.quadratic_perturbation
        )
        .expect("string write");
    }
    let path = out_path(cfg, "sweep.csv")?;
    fs::write(&path, csv)?;
    let (lo, hi) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.perplexity), hi.max(p.perplexity)));
    let body = json!({ "points": points.len(), "max_min_ratio": hi / lo, "perplexity_max": hi, "perplexity_min": lo });
    write_json(&out_path(cfg, "sweep.json")?, &report(cfg, "sweep", body))?;
    Ok(format!("{} points, perplexity max/min ratio {:.6}, wrote {}", points.len(), hi / lo, path.display()))
}

pub fn cmd_hist(cfg: &RunConfig) -> Result<String, CliError> {
    let layer = cfg
        .options
        .layer
        .clone()
        .ok_or_else(|| CliError::config("hist needs --layer"))?;
    let model = load_model(cfg)?;
    let absorbed = match &cfg.options.absorbed {
        Some(path) => Model::from_archive(&archive_read(path)?)?,
        None => {
            let stream = token_stream(cfg, &model, cfg.options.tokens.as_ref(), needed_seqs(cfg))?;
            let h = load_hessians(cfg, &model, &stream)?;
            absorb_model(&model, &h, &cfg.absorb)?.model
        }
    };
    let unknown = || CliError::config(format!("unknown layer {layer:?}; known: {}", model.linear_names().join(", ")));
    let before = model.linear(&layer).map_err(|_| unknown())?.as_slice().to_vec();
    let after = absorbed.linear(&layer).map_err(|_| unknown())?.as_slice().to_vec();
    let bins = histogram(&before, &after, cfg.bins)?;
    let mut csv = String::from("bin_lo,bin_hi,before,after\n");
    for b in &bins {
        writeln!(csv, "{},{},{},{}", b.lo, b.hi, b.before, b.after).expect("string write");
    }
    let path = out_path(cfg, "hist.csv")?;
    fs::write(&path, csv)?;
    let (mean, std) = mean_std(&before);
    let tb = tail_count(&before, mean, std, TAIL_SIGMAS);
    let ta = tail_count(&after, mean, std, TAIL_SIGMAS);
    let body = json!({
        "bins": cfg.bins,
        "layer": layer,
        "reference_mean": mean,
        "reference_std": std,
        "tail_after": ta,
        "tail_before": tb,
        "tail_sigmas": TAIL_SIGMAS,
    });
    write_json(&out_path(cfg, "hist.json")?, &report(cfg, "hist", body))?;
    Ok(format!("{layer}: {tb} -> {ta} weights beyond {TAIL_SIGMAS} sigma, wrote {}", path.display()))
}

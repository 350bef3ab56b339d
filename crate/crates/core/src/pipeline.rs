//! Whole-model orchestration: calibration, absorption, quantization and evaluation.
//!
//! Every stage is deterministic: work is split into fixed chunks independent of
//! the thread count and partial results are combined in a fixed order.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde_json::{json, Value};
use thiserror::Error;

use crate::absorb::{absorb_layer, AbsorbConfig, AbsorbError, AbsorbResult, Temperature};
use crate::hessian::{HessianAccumulator, HessianError};
use crate::linalg::{LinalgError, Matrix};
use crate::nullspace::{extract_nullspace, stability, NullSpaceBasis, NullSpaceError, StabilityReport};
use crate::quantizer::{quantize, reconstruction_metrics_hessian, Backend, QuantConfig, QuantError, QuantizedTensor, ReconstructionMetrics};
use crate::tensorstore::{ArchiveError, Precision, Tensor, TensorArchive};
use crate::toymodel::{LayerWeights, ModelError};

/// Sequences per calibration work unit.
const CALIB_CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Hessian(#[from] HessianError),
    #[error(transparent)]
    NullSpace(#[from] NullSpaceError),
    #[error(transparent)]
    Absorb(#[from] AbsorbError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Broad failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        }
    }
}

fn linalg_kind(e: &LinalgError) -> ErrorKind {
    match e {
        LinalgError::NoConvergence { .. } | LinalgError::NotPositiveDefinite { .. } | LinalgError::NonFinite => {
            ErrorKind::Numerical
        }
        _ => ErrorKind::Data,
    }
}

impl PipelineError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            PipelineError::Config(_) => ErrorKind::Config,
            PipelineError::Data(_) | PipelineError::Archive(_) | PipelineError::Hessian(_) => ErrorKind::Data,
            PipelineError::Model(ModelError::InvalidConfig(_)) => ErrorKind::Config,
            PipelineError::Model(ModelError::Linalg(e)) => linalg_kind(e),
            PipelineError::Model(_) => ErrorKind::Data,
            PipelineError::NullSpace(NullSpaceError::InvalidGamma(_)) => ErrorKind::Config,
            PipelineError::NullSpace(NullSpaceError::Linalg(e)) => linalg_kind(e),
            PipelineError::NullSpace(_) => ErrorKind::Data,
            PipelineError::Absorb(AbsorbError::InvalidConfig(_)) => ErrorKind::Config,
            PipelineError::Absorb(AbsorbError::Linalg(e)) => linalg_kind(e),
            PipelineError::Absorb(_) => ErrorKind::Data,
            PipelineError::Quant(QuantError::InvalidConfig(_)) => ErrorKind::Config,
            PipelineError::Quant(QuantError::Linalg(e)) => linalg_kind(e),
            PipelineError::Quant(QuantError::NonFinite) => ErrorKind::Numerical,
            PipelineError::Quant(_) => ErrorKind::Data,
            PipelineError::Linalg(e) => linalg_kind(e),
        }
    }
}

pub type Hessians = BTreeMap<String, Matrix<f64>>;

/// `count` sequences of `len` tokens sampled from `model`, flattened into one stream.
/// Sequence `i` uses its own random stream, so the result does not depend on scheduling.
pub fn sample_corpus(
    model: &LayerWeights<f64>,
    count: usize,
    len: usize,
    seed: u64,
) -> Result<Vec<u32>, PipelineError> {
    let seqs: Vec<Vec<u32>> = (0..count)
        .into_par_iter()
        .map(|i| model.sample(len, &mut crate::linalg::Rng::seeded(seed).fork(i as u64)))
        .collect::<Result<_, _>>()?;
    Ok(seqs.concat())
}

/// Runs every sequence through the model and accumulates one Hessian per linear layer.
pub fn calibrate(
    model: &LayerWeights<f64>,
    seqs: &[Vec<u32>],
) -> Result<BTreeMap<String, HessianAccumulator>, PipelineError> {
    let names = model.linear_names();
    let taps: BTreeSet<String> = names.iter().cloned().collect();
    let fresh = || -> BTreeMap<String, HessianAccumulator> {
        names
            .iter()
            .map(|n| {
                let dim = model.linear(n).expect("listed layer").cols();
                (n.clone(), HessianAccumulator::new(n.clone(), dim))
            })
            .collect()
    };
    let partials: Vec<BTreeMap<String, HessianAccumulator>> = seqs
        .par_chunks(CALIB_CHUNK)
        .map(|chunk| -> Result<_, PipelineError> {
            let mut accs = fresh();
            for seq in chunk {
                let out = model.forward_logits(seq, &taps)?;
                for (name, x) in &out.taps {
                    accs.get_mut(name).expect("tapped layer").update(x)?;
                }
            }
            Ok(accs)
        })
        .collect::<Result<_, _>>()?;
    let mut total = fresh();
    for part in &partials {
        for (name, acc) in total.iter_mut() {
            acc.merge(&part[name])?;
        }
    }
    Ok(total)
}

pub fn finalize_hessians(accs: &BTreeMap<String, HessianAccumulator>) -> Result<Hessians, PipelineError> {
    accs.iter()
        .map(|(n, a)| Ok((n.clone(), a.finalize()?)))
        .collect()
}

pub fn hessians_to_tensors(h: &Hessians) -> Vec<(String, Tensor)> {
    h.iter()
        .map(|(n, m)| (format!("hessian/{n}"), Tensor::from_matrix(m, Precision::Double)))
        .collect()
}

pub fn hessians_from_archive(archive: &TensorArchive) -> Result<Hessians, PipelineError> {
    let mut out = BTreeMap::new();
    for name in archive.names() {
        if let Some(layer) = name.strip_prefix("hessian/") {
            out.insert(layer.to_string(), archive.matrix(name)?);
        }
    }
    if out.is_empty() {
        return Err(PipelineError::Data("archive holds no hessian/<layer> entries".into()));
    }
    Ok(out)
}

fn hessian_for<'a>(h: &'a Hessians, layer: &str) -> Result<&'a Matrix<f64>, PipelineError> {
    h.get(layer)
        .ok_or_else(|| PipelineError::Data(format!("no Hessian for layer {layer:?}")))
}

#[derive(Debug, Clone)]
pub struct LayerAbsorb {
    pub basis: NullSpaceBasis<f64>,
    pub result: AbsorbResult<f64>,
}

impl LayerAbsorb {
    /// `½|λ_K|·‖ΔW‖²_F`, the worst case for a perturbation confined to the null space.
    pub fn perturbation_bound(&self) -> f64 {
        let fro = self.result.delta_w.norm_fro();
        0.5 * self.basis.largest_selected() * fro * fro
    }

    pub fn objective_before(&self) -> f64 {
        self.result.channels.iter().map(|c| c.objective_before).sum()
    }

    pub fn objective_after(&self) -> f64 {
        self.result.channels.iter().map(|c| c.objective_after).sum()
    }
}

#[derive(Debug, Clone)]
pub struct AbsorbOutcome {
    pub model: LayerWeights<f64>,
    pub layers: BTreeMap<String, LayerAbsorb>,
}

/// Extracts each layer's null space and absorbs its outliers; layers run in parallel.
pub fn absorb_model(
    model: &LayerWeights<f64>,
    hessians: &Hessians,
    cfg: &AbsorbConfig,
) -> Result<AbsorbOutcome, PipelineError> {
    cfg.validate()?;
    let names = model.linear_names();
    let layers: Vec<(String, LayerAbsorb)> = names
        .par_iter()
        .map(|name| -> Result<_, PipelineError> {
            let h = hessian_for(hessians, name)?;
            let basis = extract_nullspace(h, cfg.gamma, cfg.rule)?;
            let result = absorb_layer(model.linear(name)?, &basis, h, cfg)?;
            Ok((name.clone(), LayerAbsorb { basis, result }))
        })
        .collect::<Result<_, _>>()?;
    let mut out = model.clone();
    for (name, layer) in &layers {
        out.set_linear(name, layer.result.w_prime.clone())?;
    }
    Ok(AbsorbOutcome {
        model: out,
        layers: layers.into_iter().collect(),
    })
}

/// Null-space bases and absorption deltas for an archive next to the absorbed weights.
pub fn absorb_diagnostics_tensors(outcome: &AbsorbOutcome, precision: Precision) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (name, layer) in &outcome.layers {
        out.push((format!("nullspace/{name}"), Tensor::from_matrix(&layer.basis.basis, precision)));
        out.push((format!("absorbed/{name}/beta"), Tensor::from_matrix(&layer.result.beta, precision)));
        out.push((format!("absorbed/{name}/delta"), Tensor::from_matrix(&layer.result.delta_w, precision)));
    }
    out
}

#[derive(Debug, Clone)]
pub struct QuantOutcome {
    /// Model with every linear layer replaced by its dequantized weights.
    pub model: LayerWeights<f64>,
    pub tensors: BTreeMap<String, QuantizedTensor<f64>>,
    pub metrics: BTreeMap<String, ReconstructionMetrics>,
}

/// Quantizes every linear layer; `hessians` supply the compensated backend and the output metrics.
pub fn quantize_model(
    model: &LayerWeights<f64>,
    hessians: &Hessians,
    cfg: &QuantConfig,
) -> Result<QuantOutcome, PipelineError> {
    cfg.validate()?;
    let names = model.linear_names();
    let done: Vec<(String, QuantizedTensor<f64>, ReconstructionMetrics)> = names
        .par_iter()
        .map(|name| -> Result<_, PipelineError> {
            let w = model.linear(name)?;
            let h = hessian_for(hessians, name)?;
            let q = quantize(w, Some(h), cfg)?;
            let m = reconstruction_metrics_hessian(w, &q.dequantize(), h)?;
            Ok((name.clone(), q, m))
        })
        .collect::<Result<_, _>>()?;
    let mut out = model.clone();
    let mut tensors = BTreeMap::new();
    let mut metrics = BTreeMap::new();
    for (name, q, m) in done {
        out.set_linear(&name, q.dequantize())?;
        tensors.insert(name.clone(), q);
        metrics.insert(name, m);
    }
    Ok(QuantOutcome {
        model: out,
        tensors,
        metrics,
    })
}

pub fn quantized_tensors(outcome: &QuantOutcome, precision: Precision) -> Vec<(String, Tensor)> {
    outcome
        .tensors
        .iter()
        .flat_map(|(name, q)| q.to_tensors(name, precision))
        .collect()
}

/// End-to-end perplexities of the compared variants.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Perplexities {
    pub fp: f64,
    pub fp_absorbed: f64,
    pub rtn: f64,
    pub osaq_rtn: f64,
    pub compensated: f64,
    pub osaq_compensated: f64,
}

impl Perplexities {
    pub fn to_json(&self) -> Value {
        json!({
            "compensated": self.compensated,
            "fp": self.fp,
            "fp_absorbed": self.fp_absorbed,
            "osaq_compensated": self.osaq_compensated,
            "osaq_rtn": self.osaq_rtn,
            "rtn": self.rtn,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub perplexity: Perplexities,
    pub absorb: AbsorbOutcome,
    /// Keyed by variant (`rtn`, `osaq_rtn`, `compensated`, `osaq_compensated`), then layer.
    pub metrics: BTreeMap<&'static str, BTreeMap<String, ReconstructionMetrics>>,
}

/// Compares FP, RTN and compensated quantization with and without absorption.
pub fn evaluate(
    model: &LayerWeights<f64>,
    hessians: &Hessians,
    eval_seqs: &[Vec<u32>],
    absorb_cfg: &AbsorbConfig,
    quant_cfg: &QuantConfig,
) -> Result<Evaluation, PipelineError> {
    let absorb = absorb_model(model, hessians, absorb_cfg)?;
    let mut perplexity = Perplexities {
        fp: model.perplexity_many(eval_seqs)?,
        fp_absorbed: absorb.model.perplexity_many(eval_seqs)?,
        ..Default::default()
    };
    let mut metrics = BTreeMap::new();
    for backend in [Backend::Rtn, Backend::Compensated] {
        let cfg = QuantConfig { backend, ..*quant_cfg };
        let plain = quantize_model(model, hessians, &cfg)?;
        let osaq = quantize_model(&absorb.model, hessians, &cfg)?;
        let (p, o) = (plain.model.perplexity_many(eval_seqs)?, osaq.model.perplexity_many(eval_seqs)?);
        match backend {
            Backend::Rtn => {
                perplexity.rtn = p;
                perplexity.osaq_rtn = o;
                metrics.insert("rtn", plain.metrics);
                metrics.insert("osaq_rtn", osaq.metrics);
            }
            Backend::Compensated => {
                perplexity.compensated = p;
                perplexity.osaq_compensated = o;
                metrics.insert("compensated", plain.metrics);
                metrics.insert("osaq_compensated", osaq.metrics);
            }
        }
    }
    Ok(Evaluation {
        perplexity,
        absorb,
        metrics,
    })
}

fn metrics_json(m: &ReconstructionMetrics) -> Value {
    json!({
        "output_mse": m.output_mse,
        "row_linf_max": m.row_linf_max,
        "row_linf_mean": m.row_linf_mean,
        "weight_mse": m.weight_mse,
    })
}

/// Per-layer absorption diagnostics.
pub fn absorb_layer_json(layer: &LayerAbsorb) -> Value {
    let ch = &layer.result.channels;
    let linf_before = ch.iter().map(|c| c.linf_before).fold(0.0, f64::max);
    let linf_after = ch.iter().map(|c| c.linf_after).fold(0.0, f64::max);
    json!({
        "ambient_dim": layer.basis.ambient_dim(),
        "k": layer.basis.k(),
        "lambda_k": layer.basis.largest_selected(),
        "linf_after_max": linf_after,
        "linf_before_max": linf_before,
        "linf_non_increasing_fraction": layer.result.linf_non_increasing_fraction(),
        "objective_after": layer.objective_after(),
        "objective_before": layer.objective_before(),
        "perturbation_bound": layer.perturbation_bound(),
        "quadratic_perturbation": layer.result.quadratic_perturbation,
    })
}

pub fn absorb_report(outcome: &AbsorbOutcome) -> Value {
    Value::Object(
        outcome
            .layers
            .iter()
            .map(|(n, l)| (n.clone(), absorb_layer_json(l)))
            .collect(),
    )
}

pub fn metrics_report(metrics: &BTreeMap<String, ReconstructionMetrics>) -> Value {
    Value::Object(metrics.iter().map(|(n, m)| (n.clone(), metrics_json(m))).collect())
}

impl Evaluation {
    /// Canonical (key-sorted) JSON summary.
    pub fn to_json(&self) -> Value {
        let mut layers = serde_json::Map::new();
        for (name, absorb) in &self.absorb.layers {
            let mut rec = absorb_layer_json(absorb);
            let recon: serde_json::Map<String, Value> = self
                .metrics
                .iter()
                .map(|(variant, per_layer)| (variant.to_string(), metrics_json(&per_layer[name])))
                .collect();
            rec["reconstruction"] = Value::Object(recon);
            layers.insert(name.clone(), rec);
        }
        json!({
            "layers": layers,
            "perplexity": self.perplexity.to_json(),
        })
    }
}

/// Per-layer null-space overlap between two calibrations. Layers with an empty
/// null space on either side are reported with no singular values.
pub fn stability_model(
    h1: &Hessians,
    h2: &Hessians,
    cfg: &AbsorbConfig,
) -> Result<Vec<StabilityReport>, PipelineError> {
    cfg.validate()?;
    let names: Vec<&String> = h1.keys().collect();
    names
        .par_iter()
        .map(|name| -> Result<_, PipelineError> {
            let b = hessian_for(h2, name)?;
            let n1 = extract_nullspace(&h1[*name], cfg.gamma, cfg.rule)?;
            let n2 = extract_nullspace(b, cfg.gamma, cfg.rule)?;
            match stability(name, &n1, &n2) {
                Ok(r) => Ok(r),
                Err(NullSpaceError::EmptyNullSpace { k1, k2 }) => Ok(StabilityReport {
                    layer: name.to_string(),
                    singular_values: Vec::new(),
                    k1,
                    k2,
                }),
                Err(e) => Err(e.into()),
            }
        })
        .collect()
}

/// One point of a hyperparameter sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub absorb: AbsorbConfig,
    pub perplexity: f64,
    pub mean_k: f64,
    pub linf_non_increasing_fraction: f64,
    pub quadratic_perturbation: f64,
}

/// Cartesian grid over the absorption hyperparameters.
pub fn sweep_grid(
    base: &AbsorbConfig,
    gammas: &[f64],
    taus: &[Temperature],
    mu1s: &[f64],
    mu2s: &[f64],
) -> Vec<AbsorbConfig> {
    let pick = |v: &[f64], d: f64| if v.is_empty() { vec![d] } else { v.to_vec() };
    let taus = if taus.is_empty() { vec![base.tau] } else { taus.to_vec() };
    let mut out = Vec::new();
    for &gamma in &pick(gammas, base.gamma) {
        for &tau in &taus {
            for &mu1 in &pick(mu1s, base.mu1) {
                for &mu2 in &pick(mu2s, base.mu2) {
                    out.push(AbsorbConfig {
                        gamma,
                        tau,
                        mu1,
                        mu2,
                        rule: base.rule,
                    });
                }
            }
        }
    }
    out
}

pub const MAX_SWEEP_POINTS: usize = 64;

/// Absorb + quantize + evaluate at every grid point.
pub fn sweep(
    model: &LayerWeights<f64>,
    hessians: &Hessians,
    eval_seqs: &[Vec<u32>],
    grid: &[AbsorbConfig],
    quant_cfg: &QuantConfig,
) -> Result<Vec<SweepPoint>, PipelineError> {
    if grid.is_empty() || grid.len() > MAX_SWEEP_POINTS {
        return Err(PipelineError::Config(format!(
            "sweep grid must have 1..={MAX_SWEEP_POINTS} points, got {}",
            grid.len()
        )));
    }
    grid.iter()
        .map(|cfg| {
            let absorbed = absorb_model(model, hessians, cfg)?;
            let q = quantize_model(&absorbed.model, hessians, quant_cfg)?;
            let n = absorbed.layers.len().max(1) as f64;
            let rows: usize = absorbed.layers.values().map(|l| l.result.channels.len()).sum();
            let ok: f64 = absorbed
                .layers
                .values()
                .map(|l| l.result.linf_non_increasing_fraction() * l.result.channels.len() as f64)
                .sum();
            Ok(SweepPoint {
                absorb: *cfg,
                perplexity: q.model.perplexity_many(eval_seqs)?,
                mean_k: absorbed.layers.values().map(|l| l.basis.k() as f64).sum::<f64>() / n,
                linf_non_increasing_fraction: ok / rows.max(1) as f64,
                quadratic_perturbation: absorbed.layers.values().map(|l| l.result.quadratic_perturbation).sum(),
            })
        })
        .collect()
}

/// Equal-width bin shared by the before/after counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub before: usize,
    pub after: usize,
}

fn bin_counts(values: &[f64], lo: f64, width: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for &v in values {
        let idx = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    counts
}

/// Histogram of two weight sets over their joint range.
pub fn histogram(before: &[f64], after: &[f64], bins: usize) -> Result<Vec<HistBin>, PipelineError> {
    if bins == 0 {
        return Err(PipelineError::Config("histogram needs at least one bin".into()));
    }
    let all = before.iter().chain(after);
    let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return Err(PipelineError::Data("histogram input is empty or non-finite".into()));
    }
    if hi <= lo {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let b = bin_counts(before, lo, width, bins);
    let a = bin_counts(after, lo, width, bins);
    Ok((0..bins)
        .map(|i| HistBin {
            lo: lo + i as f64 * width,
            hi: if i + 1 == bins { hi } else { lo + (i + 1) as f64 * width },
            before: b[i],
            after: a[i],
        })
        .collect())
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Number of values farther than `k·std` from `mean`.
pub fn tail_count(values: &[f64], mean: f64, std: f64, k: f64) -> usize {
    values.iter().filter(|&&v| (v - mean).abs() > k * std).count()
}

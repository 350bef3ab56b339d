//! Run configuration: a JSON file mirroring the command-line flags, with
//! flags taking precedence.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use osaq::absorb::{AbsorbConfig, Temperature};
use osaq::nullspace::KRule;
use osaq::quantizer::{Backend, QuantConfig};
use osaq::tensorstore::Precision;

use crate::error::CliError;

/// Token count of the reference calibration set (128 sequences of 2048).
pub const REFERENCE_CALIBRATION_TOKENS: usize = 128 * 2048;

/// Every option, all optional. Used both for the config file and for flags.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Options {
    /// Bits per weight.
    #[arg(long)]
    pub bits: Option<u32>,
    /// Group size along the input dimension; 0 means per-channel.
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Null-space energy threshold.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Softmax temperature relative to the row maximum, or "uniform".
    #[arg(long)]
    #[serde(default, deserialize_with = "de_tau")]
    pub tau_rel: Option<String>,
    /// Ridge weight on the coefficients.
    #[arg(long)]
    pub mu1: Option<f64>,
    /// Anti-shift weight.
    #[arg(long)]
    pub mu2: Option<f64>,
    /// Null-space size rule.
    #[arg(long, value_parser = ["stay-below", "first-reach"])]
    pub k_rule: Option<String>,
    /// Quantization backend.
    #[arg(long, value_parser = ["rtn", "compensated"])]
    pub backend: Option<String>,
    /// Relative diagonal damping for the compensated backend.
    #[arg(long)]
    pub damping: Option<f64>,
    /// Seed for model initialization and corpus sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Model archive. Without one, the toy model is initialized from the seed.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Hessian archive written by `calibrate`.
    #[arg(long)]
    pub hessians: Option<PathBuf>,
    /// Absorbed-model archive written by `absorb` (used by `hist`).
    #[arg(long)]
    pub absorbed: Option<PathBuf>,
    /// Byte token file. Without one, text is sampled from the model.
    #[arg(long)]
    pub tokens: Option<PathBuf>,
    /// Second token file for cross-distribution stability.
    #[arg(long)]
    pub tokens2: Option<PathBuf>,
    /// Calibration sequences.
    #[arg(long)]
    pub calib_samples: Option<usize>,
    /// First calibration sequence in the token stream.
    #[arg(long)]
    pub calib_offset: Option<usize>,
    /// Tokens per sequence.
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Evaluation sequences.
    #[arg(long)]
    pub eval_samples: Option<usize>,
    /// First evaluation sequence; defaults to right after calibration.
    #[arg(long)]
    pub eval_offset: Option<usize>,
    /// First sequence of the second stability split; defaults to right after the first.
    #[arg(long)]
    pub split2_offset: Option<usize>,
    /// Float precision of written archives.
    #[arg(long, value_parser = ["f32", "f64"])]
    pub precision: Option<String>,
    /// Layer for `hist`.
    #[arg(long)]
    pub layer: Option<String>,
    /// Histogram bins.
    #[arg(long)]
    pub bins: Option<usize>,
    /// Sweep values for gamma (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub sweep_gamma: Option<Vec<f64>>,
    /// Sweep values for tau_rel (comma separated, "uniform" allowed).
    #[arg(long, value_delimiter = ',')]
    pub sweep_tau_rel: Option<Vec<String>>,
    /// Sweep values for mu1 (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub sweep_mu1: Option<Vec<f64>>,
    /// Sweep values for mu2 (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub sweep_mu2: Option<Vec<f64>>,
    /// Token generator for `gen-tokens`: model, uniform[:A], markov[:A[:B]] or zipf[:A[:S]].
    #[arg(long)]
    pub generator: Option<String>,
    /// Token count for `gen-tokens` with a synthetic generator.
    #[arg(long)]
    pub token_count: Option<usize>,
}

fn parse<T>(what: &str, r: Result<T, String>) -> Result<T, CliError> {
    r.map_err(|e| CliError::config(format!("{what}: {e}")))
}

fn de_tau<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
    match Option::<Value>::deserialize(d)? {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(Value::Number(n)) => Ok(Some(n.to_string())),
        Some(other) => Err(serde::de::Error::custom(format!(
            "tau_rel must be a number or \"uniform\", got {other}"
        ))),
    }
}

macro_rules! overlay {
    ($base:ident, $top:ident, $($f:ident),* $(,)?) => {
        $( if $top.$f.is_some() { $base.$f = $top.$f; } )*
    };
}

impl Options {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("invalid config {}: {e}", path.display())))
    }

    /// `self` with every option set in `top` replaced.
    pub fn overlay(mut self, top: Options) -> Self {
        overlay!(
            self, top, bits, group_size, gamma, tau_rel, mu1, mu2, k_rule, backend, damping, seed, out, model,
            hessians, absorbed, tokens, tokens2, calib_samples, calib_offset, seq_len, eval_samples, eval_offset,
            split2_offset, precision, layer, bins, sweep_gamma, sweep_tau_rel, sweep_mu1, sweep_mu2, generator,
            token_count,
        );
        self
    }

    pub fn resolve(self) -> Result<RunConfig, CliError> {
        let defaults = AbsorbConfig::default();
        let absorb = AbsorbConfig {
            tau: match &self.tau_rel {
                Some(t) => parse("tau_rel", t.parse::<Temperature>())?,
                None => defaults.tau,
            },
            mu1: self.mu1.unwrap_or(defaults.mu1),
            mu2: self.mu2.unwrap_or(defaults.mu2),
            gamma: self.gamma.unwrap_or(defaults.gamma),
            rule: match &self.k_rule {
                Some(r) => parse("k_rule", r.parse::<KRule>())?,
                None => defaults.rule,
            },
        };
        absorb.validate().map_err(|e| CliError::config(e.to_string()))?;
        let qd = QuantConfig::default();
        let quant = QuantConfig {
            bits: self.bits.unwrap_or(qd.bits),
            group_size: match self.group_size {
                Some(0) => None,
                Some(g) => Some(g),
                None => qd.group_size,
            },
            backend: match &self.backend {
                Some(b) => parse("backend", b.parse::<Backend>())?,
                None => qd.backend,
            },
            damping: self.damping.unwrap_or(qd.damping),
        };
        quant.validate().map_err(|e| CliError::config(e.to_string()))?;
        let precision = match self.precision.as_deref() {
            None | Some("f64") => Precision::Double,
            Some("f32") => Precision::Single,
            Some(other) => return Err(CliError::config(format!("precision must be f32 or f64, got {other:?}"))),
        };
        let sweep_tau = self
            .sweep_tau_rel
            .clone()
            .unwrap_or_default()
            .iter()
            .map(|t| parse("sweep_tau_rel", t.parse::<Temperature>()))
            .collect::<Result<Vec<_>, _>>()?;
        let calib_samples = self.calib_samples.unwrap_or(64);
        let calib_offset = self.calib_offset.unwrap_or(0);
        let seq_len = self.seq_len.unwrap_or(128);
        if seq_len == 0 {
            return Err(CliError::config("seq_len must be positive"));
        }
        let eval_samples = self.eval_samples.unwrap_or(32);
        if eval_samples == 0 {
            return Err(CliError::config("eval_samples must be positive"));
        }
        for path in [&self.model, &self.hessians, &self.absorbed, &self.tokens, &self.tokens2]
            .into_iter()
            .flatten()
        {
            if !path.is_file() {
                return Err(CliError::config(format!("input file {} does not exist", path.display())));
            }
        }
        Ok(RunConfig {
            absorb,
            quant,
            precision,
            seed: self.seed.unwrap_or(0),
            out: self.out.clone().unwrap_or_else(|| PathBuf::from(".")),
            calib_samples,
            calib_offset,
            seq_len,
            eval_samples,
            eval_offset: self.eval_offset.unwrap_or(calib_offset + calib_samples),
            split2_offset: self.split2_offset.unwrap_or(calib_offset + calib_samples),
            bins: self.bins.unwrap_or(64),
            sweep_tau,
            options: self,
        })
    }
}

/// Fully resolved configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub absorb: AbsorbConfig,
    pub quant: QuantConfig,
    pub precision: Precision,
    pub seed: u64,
    pub out: PathBuf,
    pub calib_samples: usize,
    pub calib_offset: usize,
    pub seq_len: usize,
    pub eval_samples: usize,
    pub eval_offset: usize,
    pub split2_offset: usize,
    pub bins: usize,
    pub sweep_tau: Vec<Temperature>,
    /// The merged options, kept for paths and command-specific fields.
    pub options: Options,
}

impl RunConfig {
    /// Effective settings as canonical JSON.
    pub fn echo(&self) -> Value {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| Value::String(p.display().to_string()));
        let mut v = serde_json::json!({
            "backend": self.quant.backend.as_str(),
            "bits": self.quant.bits,
            "calib_offset": self.calib_offset,
            "calib_samples": self.calib_samples,
            "damping": self.quant.damping,
            "eval_offset": self.eval_offset,
            "eval_samples": self.eval_samples,
            "gamma": self.absorb.gamma,
            "group_size": self.quant.group_size.unwrap_or(0),
            "k_rule": self.absorb.rule.as_str(),
            "mu1": self.absorb.mu1,
            "mu2": self.absorb.mu2,
            "precision": match self.precision { Precision::Double => "f64", Precision::Single => "f32" },
            "seed": self.seed,
            "seq_len": self.seq_len,
            "tau_rel": self.absorb.tau.to_string(),
        });
        let obj = v.as_object_mut().expect("object literal");
        for (k, p) in [
            ("model", &self.options.model),
            ("hessians", &self.options.hessians),
            ("absorbed", &self.options.absorbed),
            ("tokens", &self.options.tokens),
            ("tokens2", &self.options.tokens2),
        ] {
            if let Some(p) = path(p) {
                obj.insert(k.to_string(), p);
            }
        }
        v
    }

    pub fn calibration_summary(&self) -> Value {
        let tokens = self.calib_samples * self.seq_len;
        serde_json::json!({
            "reference_tokens": REFERENCE_CALIBRATION_TOKENS,
            "samples": self.calib_samples,
            "scale_ratio": tokens as f64 / REFERENCE_CALIBRATION_TOKENS as f64,
            "seq_len": self.seq_len,
            "tokens": tokens,
        })
    }
}

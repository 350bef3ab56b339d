//! A tiny pre-norm decoder-only transformer.
//!
//! Token + learned positional embeddings, causal multi-head attention and a
//! SiLU-gated FFN per layer, RMSNorm everywhere, untied output head. Linear
//! layers are named `layer{L}.attn.{q,k,v,o}_proj` and
//! `layer{L}.ffn.{gate,up,down}_proj`; every matrix is stored `out × in` and
//! applied as `X · Wᵀ`.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{dot, LinalgError, Matrix, Rng};
use crate::scalar::Real;
use crate::tensorstore::{ArchiveError, Precision, Tensor, TensorArchive};

const RMS_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token {token} is out of range for vocabulary size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("sequence too short: {0}")]
    SequenceTooShort(String),
    #[error("unknown layer {0:?}")]
    UnknownLayer(String),
    #[error("{name}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_seq: usize,
}

impl Default for ModelConfig {
    /// Desk-scale default: byte vocabulary, dim 64, 2 layers, 4 heads.
    fn default() -> Self {
        Self {
            vocab: 256,
            dim: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 172,
            max_seq: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("vocab", self.vocab),
            ("dim", self.dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !self.dim.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "dim {} is not divisible by n_heads {}",
                self.dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    fn to_i32s(self) -> Vec<i32> {
        [
            self.vocab,
            self.dim,
            self.n_layers,
            self.n_heads,
            self.ffn_dim,
            self.max_seq,
        ]
        .iter()
        .map(|&v| v as i32)
        .collect()
    }

    fn from_i32s(v: &[i32]) -> Result<Self, ModelError> {
        if v.len() != 6 || v.iter().any(|&x| x < 1) {
            return Err(ModelError::InvalidConfig(format!("bad config record {v:?}")));
        }
        let cfg = Self {
            vocab: v[0] as usize,
            dim: v[1] as usize,
            n_layers: v[2] as usize,
            n_heads: v[3] as usize,
            ffn_dim: v[4] as usize,
            max_seq: v[5] as usize,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The seven linear-layer roles of one decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LinearRole {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl LinearRole {
    pub const ALL: [LinearRole; 7] = [
        LinearRole::Q,
        LinearRole::K,
        LinearRole::V,
        LinearRole::O,
        LinearRole::Gate,
        LinearRole::Up,
        LinearRole::Down,
    ];

    pub fn suffix(self) -> &'static str {
        match self {
            LinearRole::Q => "attn.q_proj",
            LinearRole::K => "attn.k_proj",
            LinearRole::V => "attn.v_proj",
            LinearRole::O => "attn.o_proj",
            LinearRole::Gate => "ffn.gate_proj",
            LinearRole::Up => "ffn.up_proj",
            LinearRole::Down => "ffn.down_proj",
        }
    }

    /// Layers that write into the residual stream.
    pub fn is_writer(self) -> bool {
        matches!(self, LinearRole::O | LinearRole::Down)
    }

    fn shape(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            LinearRole::Q | LinearRole::K | LinearRole::V | LinearRole::O => (cfg.dim, cfg.dim),
            LinearRole::Gate | LinearRole::Up => (cfg.ffn_dim, cfg.dim),
            LinearRole::Down => (cfg.dim, cfg.ffn_dim),
        }
    }
}

pub fn linear_name(layer: usize, role: LinearRole) -> String {
    format!("layer{layer}.{}", role.suffix())
}

/// Splits `layerL.attn.k_proj` into `(L, K)`.
pub fn parse_linear_name(name: &str) -> Option<(usize, LinearRole)> {
    let rest = name.strip_prefix("layer")?;
    let (idx, suffix) = rest.split_once('.')?;
    let layer = idx.parse().ok()?;
    let role = LinearRole::ALL.into_iter().find(|r| r.suffix() == suffix)?;
    Some((layer, role))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub attn_norm: Vec<T>,
    pub q_proj: Matrix<T>,
    pub k_proj: Matrix<T>,
    pub v_proj: Matrix<T>,
    pub o_proj: Matrix<T>,
    pub ffn_norm: Vec<T>,
    pub gate_proj: Matrix<T>,
    pub up_proj: Matrix<T>,
    pub down_proj: Matrix<T>,
}

impl<T: Real> Block<T> {
    fn linear(&self, role: LinearRole) -> &Matrix<T> {
        match role {
            LinearRole::Q => &self.q_proj,
            LinearRole::K => &self.k_proj,
            LinearRole::V => &self.v_proj,
            LinearRole::O => &self.o_proj,
            LinearRole::Gate => &self.gate_proj,
            LinearRole::Up => &self.up_proj,
            LinearRole::Down => &self.down_proj,
        }
    }

    fn linear_mut(&mut self, role: LinearRole) -> &mut Matrix<T> {
        match role {
            LinearRole::Q => &mut self.q_proj,
            LinearRole::K => &mut self.k_proj,
            LinearRole::V => &mut self.v_proj,
            LinearRole::O => &mut self.o_proj,
            LinearRole::Gate => &mut self.gate_proj,
            LinearRole::Up => &mut self.up_proj,
            LinearRole::Down => &mut self.down_proj,
        }
    }
}

/// All parameters of the toy model.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub config: ModelConfig,
    pub tok_emb: Matrix<T>,
    pub pos_emb: Matrix<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Vec<T>,
    pub head: Matrix<T>,
}

/// Knobs for [`model_init_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitOptions {
    /// Std of linear-layer and embedding weights.
    pub weight_std: f64,
    /// Std of the output head.
    pub head_std: f64,
    /// Per-row probability of planting outliers.
    pub outlier_prob: f64,
    /// Entries planted in each selected row.
    pub outliers_per_row: usize,
    /// Planted entries are set to `±outlier_factor · weight_std`.
    pub outlier_factor: f64,
    /// Confine the residual stream to a random subspace of this dimension.
    /// Embeddings and the residual writers (o_proj, down_proj) map into the
    /// subspace, so every layer reading the residual stream sees rank-deficient
    /// inputs and a Hessian with an exact, data-independent null space.
    pub residual_rank: Option<usize>,
    /// Confine each head's value output to a random subspace of this
    /// dimension, which gives the attention output (the o_proj input) an
    /// exact null space as well.
    pub value_rank: Option<usize>,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            weight_std: 0.02,
            head_std: 0.0625,
            outlier_prob: 0.0,
            outliers_per_row: 1,
            outlier_factor: 1.0,
            residual_rank: None,
            value_rank: None,
        }
    }
}

impl InitOptions {
    /// Outlier-planted, low-rank-residual model used by the pipeline defaults.
    pub fn desk() -> Self {
        Self {
            outlier_prob: 1.0,
            outliers_per_row: 3,
            outlier_factor: 20.0,
            residual_rank: Some(24),
            value_rank: Some(6),
            ..Self::default()
        }
    }
}

pub fn model_init_random<T: Real>(cfg: ModelConfig, seed: u64) -> Result<LayerWeights<T>, ModelError> {
    model_init_with(cfg, seed, &InitOptions::default())
}

/// Deterministic random initialization.
pub fn model_init_with<T: Real>(
    cfg: ModelConfig,
    seed: u64,
    opts: &InitOptions,
) -> Result<LayerWeights<T>, ModelError> {
    cfg.validate()?;
    if let Some(r) = opts.residual_rank {
        if r == 0 || r > cfg.dim {
            return Err(ModelError::InvalidConfig(format!(
                "residual_rank {r} must be in 1..={}",
                cfg.dim
            )));
        }
    }
    let hd = cfg.head_dim();
    if let Some(r) = opts.value_rank {
        if r == 0 || r > hd {
            return Err(ModelError::InvalidConfig(format!("value_rank {r} must be in 1..={hd}")));
        }
    }
    let mut root = Rng::seeded(seed);
    let std = opts.weight_std;
    let value_projector = opts.value_rank.filter(|&r| r < hd).map(|r| {
        let mut rng = root.fork(3);
        let mut p = Matrix::zeros(cfg.dim, cfg.dim);
        for h in 0..cfg.n_heads {
            let block = random_projector(hd, r, &mut rng);
            for i in 0..hd {
                for j in 0..hd {
                    p[(h * hd + i, h * hd + j)] = block[(i, j)];
                }
            }
        }
        p.scale((hd as f64 / r as f64).sqrt())
    });
    let projector = opts
        .residual_rank
        .filter(|&r| r < cfg.dim)
        .map(|r| random_projector(cfg.dim, r, &mut root.fork(0)));
    // keep per-entry scale after projecting onto an r-dimensional subspace
    let lift = opts
        .residual_rank
        .map_or(1.0, |r| (cfg.dim as f64 / r as f64).sqrt());

    let confine = |m: Matrix<f64>| -> Matrix<f64> {
        match &projector {
            Some(p) => p.matmul(&m).expect("square projector").scale(lift),
            None => m,
        }
    };

    let mut emb_rng = root.fork(1);
    let tok_emb = confine(gaussian(cfg.dim, cfg.vocab, std, &mut emb_rng)).transpose();
    let pos_emb = confine(gaussian(cfg.dim, cfg.max_seq, std, &mut emb_rng)).transpose();

    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for layer in 0..cfg.n_layers {
        let mut rng = root.fork(100 + layer as u64);
        let mut make = |role: LinearRole| {
            let (rows, cols) = role.shape(&cfg);
            let mut m = gaussian(rows, cols, std, &mut rng);
            plant_outliers(&mut m, opts, &mut rng);
            if role.is_writer() {
                m = confine(m);
            }
            if let (LinearRole::V, Some(p)) = (role, &value_projector) {
                m = p.matmul(&m).expect("square projector");
            }
            m.cast::<T>()
        };
        blocks.push(Block {
            attn_norm: vec![T::one(); cfg.dim],
            q_proj: make(LinearRole::Q),
            k_proj: make(LinearRole::K),
            v_proj: make(LinearRole::V),
            o_proj: make(LinearRole::O),
            ffn_norm: vec![T::one(); cfg.dim],
            gate_proj: make(LinearRole::Gate),
            up_proj: make(LinearRole::Up),
            down_proj: make(LinearRole::Down),
        });
    }
    let head = gaussian(cfg.vocab, cfg.dim, opts.head_std, &mut root.fork(2));

    Ok(LayerWeights {
        config: cfg,
        tok_emb: tok_emb.cast(),
        pos_emb: pos_emb.cast(),
        blocks,
        final_norm: vec![T::one(); cfg.dim],
        head: head.cast(),
    })
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| std * rng.normal())
}

fn plant_outliers(m: &mut Matrix<f64>, opts: &InitOptions, rng: &mut Rng) {
    if opts.outlier_prob <= 0.0 {
        return;
    }
    for i in 0..m.rows() {
        if rng.bernoulli(opts.outlier_prob) {
            for _ in 0..opts.outliers_per_row {
                let j = rng.below(m.cols());
                let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
                m[(i, j)] = sign * opts.outlier_factor * opts.weight_std;
            }
        }
    }
}

/// Orthogonal projector onto a random `rank`-dimensional subspace (Gram-Schmidt).
fn random_projector(dim: usize, rank: usize, rng: &mut Rng) -> Matrix<f64> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while basis.len() < rank {
        let mut v = rng.normal_vec(dim);
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    Matrix::from_fn(dim, dim, |i, j| basis.iter().map(|b| b[i] * b[j]).sum())
}

/// Logits plus the inputs captured at the requested linear layers.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits: Matrix<T>,
    pub taps: BTreeMap<String, Matrix<T>>,
}

impl<T: Real> LayerWeights<T> {
    /// Linear-layer names in block order (q, k, v, o, gate, up, down per layer).
    pub fn linear_names(&self) -> Vec<String> {
        (0..self.config.n_layers)
            .flat_map(|l| LinearRole::ALL.into_iter().map(move |r| linear_name(l, r)))
            .collect()
    }

    pub fn linear(&self, name: &str) -> Result<&Matrix<T>, ModelError> {
        let (layer, role) = self.resolve(name)?;
        Ok(self.blocks[layer].linear(role))
    }

    pub fn set_linear(&mut self, name: &str, w: Matrix<T>) -> Result<(), ModelError> {
        let (layer, role) = self.resolve(name)?;
        let expected = role.shape(&self.config);
        if w.shape() != expected {
            return Err(ModelError::ShapeMismatch {
                name: name.to_string(),
                expected,
                got: w.shape(),
            });
        }
        *self.blocks[layer].linear_mut(role) = w;
        Ok(())
    }

    fn resolve(&self, name: &str) -> Result<(usize, LinearRole), ModelError> {
        parse_linear_name(name)
            .filter(|(l, _)| *l < self.config.n_layers)
            .ok_or_else(|| ModelError::UnknownLayer(name.to_string()))
    }

    pub fn cast<U: Real>(&self) -> LayerWeights<U> {
        let v = |x: &Vec<T>| x.iter().map(|&a| U::lit(a.to_f64_lossless())).collect();
        LayerWeights {
            config: self.config,
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    attn_norm: v(&b.attn_norm),
                    q_proj: b.q_proj.cast(),
                    k_proj: b.k_proj.cast(),
                    v_proj: b.v_proj.cast(),
                    o_proj: b.o_proj.cast(),
                    ffn_norm: v(&b.ffn_norm),
                    gate_proj: b.gate_proj.cast(),
                    up_proj: b.up_proj.cast(),
                    down_proj: b.down_proj.cast(),
                })
                .collect(),
            final_norm: v(&self.final_norm),
            head: self.head.cast(),
        }
    }

    /// Archive entries under canonical names.
    pub fn to_tensors(&self, precision: Precision) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("config".to_string(), Tensor::from_i32(self.config.to_i32s())),
            ("tok_emb".to_string(), Tensor::from_matrix(&self.tok_emb, precision)),
            ("pos_emb".to_string(), Tensor::from_matrix(&self.pos_emb, precision)),
            ("final_norm".to_string(), Tensor::from_vector(&self.final_norm, precision)),
            ("lm_head".to_string(), Tensor::from_matrix(&self.head, precision)),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("layer{l}.attn_norm"), Tensor::from_vector(&b.attn_norm, precision)));
            out.push((format!("layer{l}.ffn_norm"), Tensor::from_vector(&b.ffn_norm, precision)));
            for role in LinearRole::ALL {
                out.push((linear_name(l, role), Tensor::from_matrix(b.linear(role), precision)));
            }
        }
        out
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self, ModelError> {
        let cfg = ModelConfig::from_i32s(&archive.i32s("config")?)?;
        let mat = |name: &str, shape: (usize, usize)| -> Result<Matrix<T>, ModelError> {
            let m = archive.matrix::<T>(name)?;
            if m.shape() != shape {
                return Err(ModelError::ShapeMismatch {
                    name: name.to_string(),
                    expected: shape,
                    got: m.shape(),
                });
            }
            Ok(m)
        };
        let vector = |name: &str| -> Result<Vec<T>, ModelError> {
            let v = archive.vector::<T>(name)?;
            if v.len() != cfg.dim {
                return Err(ModelError::ShapeMismatch {
                    name: name.to_string(),
                    expected: (cfg.dim, 1),
                    got: (v.len(), 1),
                });
            }
            Ok(v)
        };
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let lin = |role: LinearRole| mat(&linear_name(l, role), role.shape(&cfg));
            blocks.push(Block {
                attn_norm: vector(&format!("layer{l}.attn_norm"))?,
                q_proj: lin(LinearRole::Q)?,
                k_proj: lin(LinearRole::K)?,
                v_proj: lin(LinearRole::V)?,
                o_proj: lin(LinearRole::O)?,
                ffn_norm: vector(&format!("layer{l}.ffn_norm"))?,
                gate_proj: lin(LinearRole::Gate)?,
                up_proj: lin(LinearRole::Up)?,
                down_proj: lin(LinearRole::Down)?,
            });
        }
        Ok(Self {
            config: cfg,
            tok_emb: mat("tok_emb", (cfg.vocab, cfg.dim))?,
            pos_emb: mat("pos_emb", (cfg.max_seq, cfg.dim))?,
            blocks,
            final_norm: vector("final_norm")?,
            head: mat("lm_head", (cfg.vocab, cfg.dim))?,
        })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.len() > self.config.max_seq {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(ModelError::TokenOutOfRange {
                token: bad,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix<T>, ModelError> {
        Ok(self.forward_logits(tokens, &BTreeSet::new())?.logits)
    }

    /// Runs the model over one sequence, capturing the exact inputs fed to
    /// every linear layer named in `taps`.
    pub fn forward_logits(
        &self,
        tokens: &[u32],
        taps: &BTreeSet<String>,
    ) -> Result<ForwardOutput<T>, ModelError> {
        self.check_tokens(tokens)?;
        for name in taps {
            self.resolve(name)?;
        }
        let cfg = &self.config;
        let len = tokens.len();
        let mut captured = BTreeMap::new();
        let mut capture = |layer: usize, roles: &[LinearRole], x: &Matrix<T>| {
            for &role in roles {
                let name = linear_name(layer, role);
                if taps.contains(&name) {
                    captured.insert(name, x.clone());
                }
            }
        };

        let mut x = Matrix::from_fn(len, cfg.dim, |t, d| {
            self.tok_emb[(tokens[t] as usize, d)] + self.pos_emb[(t, d)]
        });

        for (l, b) in self.blocks.iter().enumerate() {
            let h = rms_norm(&x, &b.attn_norm);
            capture(l, &[LinearRole::Q, LinearRole::K, LinearRole::V], &h);
            let q = h.matmul_t(&b.q_proj)?;
            let k = h.matmul_t(&b.k_proj)?;
            let v = h.matmul_t(&b.v_proj)?;
            let attn = causal_attention(&q, &k, &v, cfg.n_heads);
            capture(l, &[LinearRole::O], &attn);
            let o = attn.matmul_t(&b.o_proj)?;
            x = x.add(&o)?;

            let h = rms_norm(&x, &b.ffn_norm);
            capture(l, &[LinearRole::Gate, LinearRole::Up], &h);
            let gate = h.matmul_t(&b.gate_proj)?;
            let up = h.matmul_t(&b.up_proj)?;
            let mut act = gate;
            for (a, &u) in act.as_mut_slice().iter_mut().zip(up.as_slice()) {
                *a = silu(*a) * u;
            }
            capture(l, &[LinearRole::Down], &act);
            let down = act.matmul_t(&b.down_proj)?;
            x = x.add(&down)?;
        }

        let h = rms_norm(&x, &self.final_norm);
        let logits = h.matmul_t(&self.head)?;
        Ok(ForwardOutput {
            logits,
            taps: captured,
        })
    }

    /// Draws one sequence of `len` tokens from the model (first token uniform),
    /// decoding incrementally with a key/value cache.
    pub fn sample(&self, len: usize, rng: &mut Rng) -> Result<Vec<u32>, ModelError> {
        let cfg = &self.config;
        if len > cfg.max_seq {
            return Err(ModelError::SequenceTooLong { len, max: cfg.max_seq });
        }
        let hd = cfg.head_dim();
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let mut keys: Vec<Vec<Vec<T>>> = vec![Vec::with_capacity(len); cfg.n_layers];
        let mut values: Vec<Vec<Vec<T>>> = vec![Vec::with_capacity(len); cfg.n_layers];
        let mut tokens = Vec::with_capacity(len);
        if len == 0 {
            return Ok(tokens);
        }
        tokens.push(rng.below(cfg.vocab) as u32);
        let matvec = |w: &Matrix<T>, x: &[T]| w.matvec(x).expect("square-compatible");
        for t in 0..len - 1 {
            let tok = tokens[t] as usize;
            let mut x: Vec<T> = (0..cfg.dim)
                .map(|d| self.tok_emb[(tok, d)] + self.pos_emb[(t, d)])
                .collect();
            for (l, b) in self.blocks.iter().enumerate() {
                let h = rms_norm_vec(&x, &b.attn_norm);
                let q = matvec(&b.q_proj, &h);
                keys[l].push(matvec(&b.k_proj, &h));
                values[l].push(matvec(&b.v_proj, &h));
                let mut attn = vec![T::zero(); cfg.dim];
                for head in 0..cfg.n_heads {
                    let cols = head * hd..(head + 1) * hd;
                    let scores: Vec<T> = keys[l]
                        .iter()
                        .map(|k| dot(&q[cols.clone()], &k[cols.clone()]) * scale)
                        .collect();
                    let max = scores.iter().fold(T::neg_infinity(), |m, &s| m.max(s));
                    let e: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
                    let total = e.iter().fold(T::zero(), |a, &b| a + b);
                    for (p, v) in e.iter().zip(&values[l]) {
                        let p = *p / total;
                        for c in cols.clone() {
                            attn[c] += p * v[c];
                        }
                    }
                }
                let o = matvec(&b.o_proj, &attn);
                x.iter_mut().zip(&o).for_each(|(a, &b)| *a += b);
                let h = rms_norm_vec(&x, &b.ffn_norm);
                let gate = matvec(&b.gate_proj, &h);
                let up = matvec(&b.up_proj, &h);
                let act: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
                let down = matvec(&b.down_proj, &act);
                x.iter_mut().zip(&down).for_each(|(a, &b)| *a += b);
            }
            let logits = matvec(&self.head, &rms_norm_vec(&x, &self.final_norm));
            tokens.push(sample_logits(&logits, rng) as u32);
        }
        Ok(tokens)
    }

    /// Summed next-token negative log-likelihood over positions `1..len` and the position count.
    pub fn nll(&self, tokens: &[u32]) -> Result<(f64, usize), ModelError> {
        if tokens.len() < 2 {
            return Err(ModelError::SequenceTooShort(format!(
                "perplexity needs at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        let logits = self.forward(tokens)?;
        let mut total = 0.0;
        for (t, &next) in tokens.iter().enumerate().skip(1) {
            total += token_nll(logits.row(t - 1), next as usize);
        }
        Ok((total, tokens.len() - 1))
    }

    /// `exp(mean NLL)` over one sequence.
    pub fn perplexity(&self, tokens: &[u32]) -> Result<f64, ModelError> {
        let (sum, count) = self.nll(tokens)?;
        Ok((sum / count as f64).exp())
    }

    /// Perplexity pooled over several sequences; sequences run in parallel,
    /// partial sums are combined in input order.
    pub fn perplexity_many(&self, seqs: &[Vec<u32>]) -> Result<f64, ModelError> {
        let parts: Vec<(f64, usize)> = seqs
            .par_iter()
            .map(|s| self.nll(s))
            .collect::<Result<_, _>>()?;
        let (sum, count) = parts
            .iter()
            .fold((0.0, 0usize), |(s, c), &(a, b)| (s + a, c + b));
        if count == 0 {
            return Err(ModelError::SequenceTooShort("no evaluation sequences".into()));
        }
        Ok((sum / count as f64).exp())
    }
}

/// `logsumexp(logits) - logits[target]`, with max subtraction, in f64.
pub fn token_nll<T: Real>(logits: &[T], target: usize) -> f64 {
    let max = logits
        .iter()
        .map(|x| x.to_f64_lossless())
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|x| (x.to_f64_lossless() - max).exp()).sum();
    max + sum.ln() - logits[target].to_f64_lossless()
}

pub fn rms_norm<T: Real>(x: &Matrix<T>, gain: &[T]) -> Matrix<T> {
    let mut out = x.clone();
    let n = T::lit(x.cols() as f64);
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let ms = row.iter().fold(T::zero(), |s, &v| s + v * v) / n;
        let inv = T::one() / (ms + T::lit(RMS_EPS)).sqrt();
        for (v, &g) in row.iter_mut().zip(gain) {
            *v = *v * inv * g;
        }
    }
    out
}

fn rms_norm_vec<T: Real>(x: &[T], gain: &[T]) -> Vec<T> {
    let ms = x.iter().fold(T::zero(), |s, &v| s + v * v) / T::lit(x.len() as f64);
    let inv = T::one() / (ms + T::lit(RMS_EPS)).sqrt();
    x.iter().zip(gain).map(|(&v, &g)| v * inv * g).collect()
}

/// Inverse-CDF draw from `softmax(logits)`, computed in f64.
fn sample_logits<T: Real>(logits: &[T], rng: &mut Rng) -> usize {
    let max = logits
        .iter()
        .map(|x| x.to_f64_lossless())
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x.to_f64_lossless() - max).exp()).collect();
    let u = rng.uniform() * e.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, p) in e.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    e.len() - 1
}

#[inline]
fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

fn causal_attention<T: Real>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, n_heads: usize) -> Matrix<T> {
    let (len, dim) = q.shape();
    let hd = dim / n_heads;
    let scale = T::one() / T::lit(hd as f64).sqrt();
    let mut out = Matrix::zeros(len, dim);
    let mut scores = vec![T::zero(); len];
    for h in 0..n_heads {
        let cols = h * hd..(h + 1) * hd;
        for t in 0..len {
            let qt = &q.row(t)[cols.clone()];
            let mut max = T::neg_infinity();
            for (s, slot) in scores[..=t].iter_mut().enumerate() {
                let sc = dot(qt, &k.row(s)[cols.clone()]) * scale;
                *slot = sc;
                max = max.max(sc);
            }
            let mut total = T::zero();
            for sc in &mut scores[..=t] {
                *sc = (*sc - max).exp();
                total += *sc;
            }
            let out_row = &mut out.row_mut(t)[cols.clone()];
            for (s, &sc) in scores[..=t].iter().enumerate() {
                let p = sc / total;
                for (o, &vv) in out_row.iter_mut().zip(&v.row(s)[cols.clone()]) {
                    *o += p * vv;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab: 16,
            dim: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 12,
            max_seq: 10,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { dim: 10, n_heads: 3, ..small() };
        assert!(matches!(bad.validate(), Err(ModelError::InvalidConfig(_))));
        let zero = ModelConfig { n_layers: 0, ..small() };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn names_round_trip() {
        assert_eq!(linear_name(0, LinearRole::K), "layer0.attn.k_proj");
        assert_eq!(parse_linear_name("layer3.ffn.down_proj"), Some((3, LinearRole::Down)));
        assert_eq!(parse_linear_name("layer0.attn.x_proj"), None);
        let m = model_init_random::<f32>(small(), 0).unwrap();
        let names = m.linear_names();
        assert_eq!(names.len(), 14);
        let unique: BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), 14);
    }

    #[test]
    fn init_is_deterministic() {
        let a = model_init_random::<f32>(ModelConfig::default(), 7).unwrap();
        let b = model_init_random::<f32>(ModelConfig::default(), 7).unwrap();
        assert_eq!(a, b);
        let c = model_init_random::<f32>(ModelConfig::default(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn no_outliers_stays_within_six_sigma() {
        let m = model_init_random::<f64>(ModelConfig::default(), 1).unwrap();
        for name in m.linear_names() {
            assert!(m.linear(&name).unwrap().max_abs() < 0.12, "{name}");
        }
    }

    #[test]
    fn shape_and_errors() {
        let m = model_init_random::<f32>(small(), 3).unwrap();
        assert_eq!(m.forward(&[1]).unwrap().shape(), (1, 16));
        assert!(matches!(m.forward(&[16]), Err(ModelError::TokenOutOfRange { .. })));
        assert!(matches!(m.forward(&[0; 11]), Err(ModelError::SequenceTooLong { .. })));
        assert!(matches!(m.perplexity(&[1]), Err(ModelError::SequenceTooShort(_))));
        let taps: BTreeSet<String> = ["layer9.attn.q_proj".to_string()].into();
        assert!(matches!(m.forward_logits(&[1], &taps), Err(ModelError::UnknownLayer(_))));
    }

    #[test]
    fn zero_head_gives_uniform_perplexity() {
        let mut m = model_init_random::<f64>(small(), 4).unwrap();
        m.head = Matrix::zeros(16, 8);
        let logits = m.forward(&[1, 2, 3]).unwrap();
        assert_eq!(logits.max_abs(), 0.0);
        let ppl = m.perplexity(&[1, 2, 3, 4, 5]).unwrap();
        assert!((ppl - 16.0).abs() < 1e-12);
    }

    #[test]
    fn saturated_logit_nll() {
        let mut logits = vec![0.0f64; 64];
        logits[5] = 30.0;
        assert!(token_nll(&logits, 5).exp() - 1.0 < 1e-6);
    }

    #[test]
    fn nll_shift_invariant() {
        let logits = [0.3f64, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = logits.iter().map(|x| x + 7.25).collect();
        assert!((token_nll(&logits, 2) - token_nll(&shifted, 2)).abs() < 1e-12);
    }

    #[test]
    fn causal_prefix_independence() {
        let m = model_init_random::<f64>(small(), 5).unwrap();
        let full = m.forward(&[3, 1, 4, 1, 5]).unwrap();
        let prefix = m.forward(&[3, 1, 4]).unwrap();
        for t in 0..3 {
            for (a, b) in full.row(t).iter().zip(prefix.row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn residual_rank_confines_inputs() {
        let opts = InitOptions {
            residual_rank: Some(5),
            ..InitOptions::default()
        };
        let m = model_init_with::<f64>(small(), 2, &opts).unwrap();
        let taps: BTreeSet<String> = m.linear_names().into_iter().collect();
        let out = m.forward_logits(&[1, 2, 3, 4, 5, 6, 7, 8, 9, 10], &taps).unwrap();
        for role in [LinearRole::Q, LinearRole::Gate] {
            for l in 0..2 {
                let x = &out.taps[&linear_name(l, role)];
                let eig = crate::linalg::eigh_symmetric(&x.gram()).unwrap();
                let top = eig.values.last().unwrap().abs();
                let zeros = eig.values.iter().filter(|v| v.abs() < 1e-10 * top).count();
                assert_eq!(zeros, 3, "layer {l} {role:?}");
            }
        }
    }

    #[test]
    fn archive_round_trip() {
        let m = model_init_with::<f32>(small(), 9, &InitOptions::desk().with_rank(4)).unwrap();
        let bytes = crate::tensorstore::encode(m.to_tensors(Precision::Single)).unwrap();
        let back = LayerWeights::<f32>::from_archive(&crate::tensorstore::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    impl InitOptions {
        fn with_rank(mut self, r: usize) -> Self {
            self.residual_rank = Some(r);
            self.value_rank = self.value_rank.map(|v| v.min(2));
            self
        }
    }

    #[test]
    fn sampling_follows_forward_pass() {
        let mut m = model_init_with::<f64>(small(), 4, &InitOptions::default().with_rank(5)).unwrap();
        // a very sharp head makes sampling pick the forward pass's argmax
        m.head = m.head.scale(1e4);
        let mut rng = Rng::seeded(1);
        let seq = m.sample(10, &mut rng).unwrap();
        assert_eq!(seq.len(), 10);
        let logits = m.forward(&seq).unwrap();
        for t in 0..9 {
            let row = logits.row(t);
            let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(seq[t + 1] as usize, argmax, "position {t}");
        }
        assert!(m.sample(11, &mut rng).is_err());
        assert!(m.sample(0, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn zero_head_samples_uniformly() {
        let mut m = model_init_random::<f64>(small(), 2).unwrap();
        m.head = Matrix::zeros(16, 8);
        let mut rng = Rng::seeded(3);
        let mut counts = [0usize; 16];
        for _ in 0..400 {
            for t in m.sample(10, &mut rng).unwrap() {
                counts[t as usize] += 1;
            }
        }
        // 4000 draws, 250 expected per symbol
        assert!(counts.iter().all(|&c| (170..330).contains(&c)), "{counts:?}");
    }
}

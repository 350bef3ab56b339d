//! Uniform affine weight quantization with round-to-nearest and
//! error-compensated (column-sequential, inverse-Hessian) backends.
//!
//! Codes are `clip(round(w/s) + z, 0, 2^b − 1)` and dequantize to
//! `s·(code − z) + offset`, where `offset` is non-zero only for constant groups.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{Cholesky, LinalgError, Matrix};
use crate::scalar::{round_half_even, Real};
use crate::tensorstore::{ArchiveError, Precision, Tensor, TensorArchive};

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("invalid quantization config: {0}")]
    InvalidConfig(String),
    #[error("{what}: expected {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("weights contain NaN or infinite values")]
    NonFinite,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    #[default]
    Rtn,
    Compensated,
}

impl Backend {
    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Rtn => "rtn",
            Backend::Compensated => "compensated",
        }
    }

    fn code(self) -> i32 {
        match self {
            Backend::Rtn => 0,
            Backend::Compensated => 1,
        }
    }

    fn from_code(c: i32) -> Option<Self> {
        match c {
            0 => Some(Backend::Rtn),
            1 => Some(Backend::Compensated),
            _ => None,
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rtn" => Ok(Backend::Rtn),
            "compensated" => Ok(Backend::Compensated),
            other => Err(format!("unknown backend {other:?} (expected rtn or compensated)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    pub bits: u32,
    /// `None` means one group per output channel.
    pub group_size: Option<usize>,
    pub backend: Backend,
    /// Relative diagonal damping for the compensated backend.
    pub damping: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 3,
            group_size: None,
            backend: Backend::Rtn,
            damping: 0.01,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<(), QuantError> {
        if !(2..=8).contains(&self.bits) {
            return Err(QuantError::InvalidConfig(format!("bits must be in [2, 8], got {}", self.bits)));
        }
        if self.group_size == Some(0) {
            return Err(QuantError::InvalidConfig("group size must be positive".into()));
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(QuantError::InvalidConfig(format!(
                "damping must be non-negative, got {}",
                self.damping
            )));
        }
        Ok(())
    }

    /// Validates against a layer with `n` input columns and returns the group width.
    pub fn group_width(&self, n: usize) -> Result<usize, QuantError> {
        self.validate()?;
        match self.group_size {
            None => Ok(n),
            Some(g) if n.is_multiple_of(g) => Ok(g),
            Some(g) => Err(QuantError::InvalidConfig(format!(
                "group size {g} does not divide input dimension {n}"
            ))),
        }
    }

    pub fn max_code(&self) -> u32 {
        (1 << self.bits) - 1
    }
}

/// Scale, zero point and constant offset of one group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams<T> {
    pub scale: T,
    pub zero: i32,
    /// `c − dequant` for a constant group, otherwise 0.
    pub offset: T,
}

impl<T: Real> QuantParams<T> {
    #[inline]
    pub fn code(&self, w: T, max_code: u32) -> u8 {
        let q = round_half_even(w / self.scale) + T::lit(self.zero as f64);
        q.max(T::zero()).min(T::lit(max_code as f64)).to_u8().unwrap_or(0)
    }

    #[inline]
    pub fn dequant(&self, code: u8) -> T {
        self.scale * (T::lit(code as f64) - T::lit(self.zero as f64)) + self.offset
    }
}

/// `s = (max − min)/(2^b − 1)`, `z = round(−min/s)`; constant groups get `s = 1`, `z = 0`.
pub fn quant_params<T: Real>(w_group: &[T], bits: u32) -> QuantParams<T> {
    assert!(!w_group.is_empty(), "quantization group must be non-empty");
    let max_code = (1u32 << bits) - 1;
    let (lo, hi) = w_group
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &w| (lo.min(w), hi.max(w)));
    let scale = (hi - lo) / T::lit(max_code as f64);
    if !scale.is_finite() || scale <= T::zero() {
        let mut p = QuantParams {
            scale: T::one(),
            zero: 0,
            offset: T::zero(),
        };
        p.offset = lo - p.dequant(p.code(lo, max_code));
        return p;
    }
    let z = round_half_even(-lo / scale)
        .max(T::lit(i32::MIN as f64))
        .min(T::lit(i32::MAX as f64));
    QuantParams {
        scale,
        zero: z.to_i32().unwrap_or(0),
        offset: T::zero(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor<T> {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols`.
    pub codes: Vec<u8>,
    /// `rows × groups`.
    pub scales: Matrix<T>,
    /// Row-major `rows × groups`.
    pub zeros: Vec<i32>,
    /// `rows × groups`.
    pub offsets: Matrix<T>,
    pub bits: u32,
    pub group_size: Option<usize>,
    pub backend: Backend,
}

impl<T: Real> QuantizedTensor<T> {
    pub fn groups(&self) -> usize {
        self.scales.cols()
    }

    pub fn group_width(&self) -> usize {
        self.group_size.unwrap_or(self.cols)
    }

    pub fn params(&self, row: usize, group: usize) -> QuantParams<T> {
        QuantParams {
            scale: self.scales[(row, group)],
            zero: self.zeros[row * self.groups() + group],
            offset: self.offsets[(row, group)],
        }
    }

    pub fn code(&self, row: usize, col: usize) -> u8 {
        self.codes[row * self.cols + col]
    }

    pub fn dequantize(&self) -> Matrix<T> {
        let g = self.group_width();
        Matrix::from_fn(self.rows, self.cols, |i, j| self.params(i, j / g).dequant(self.code(i, j)))
    }

    /// Entries `q/<layer>/{codes,scales,zeros,offsets,meta}`.
    pub fn to_tensors(&self, layer: &str, precision: Precision) -> Vec<(String, Tensor)> {
        let key = |s: &str| format!("q/{layer}/{s}");
        let groups = self.groups();
        let meta = vec![
            self.bits as i32,
            self.group_size.map_or(0, |g| g as i32),
            self.backend.code(),
            self.rows as i32,
            self.cols as i32,
        ];
        vec![
            (key("codes"), Tensor::from_u8(vec![self.rows, self.cols], self.codes.clone())),
            (key("meta"), Tensor::from_i32(meta)),
            (key("offsets"), Tensor::from_matrix(&self.offsets, precision)),
            (key("scales"), Tensor::from_matrix(&self.scales, precision)),
            (
                key("zeros"),
                Tensor::new(
                    vec![self.rows, groups],
                    crate::tensorstore::TensorData::I32(self.zeros.clone()),
                ),
            ),
        ]
    }

    pub fn from_archive(archive: &TensorArchive, layer: &str) -> Result<Self, QuantError> {
        let key = |s: &str| format!("q/{layer}/{s}");
        let meta = archive.i32s(&key("meta"))?;
        let bad = |reason: &str| ArchiveError::WrongKind {
            name: key("meta"),
            reason: reason.to_string(),
        };
        if meta.len() != 5 {
            return Err(bad("expected 5 metadata fields").into());
        }
        let bits = meta[0] as u32;
        let group_size = (meta[1] > 0).then_some(meta[1] as usize);
        let backend = Backend::from_code(meta[2]).ok_or_else(|| bad("unknown backend code"))?;
        let (rows, cols) = (meta[3] as usize, meta[4] as usize);
        let codes = archive.u8s(&key("codes"))?;
        let scales: Matrix<T> = archive.matrix(&key("scales"))?;
        let offsets: Matrix<T> = archive.matrix(&key("offsets"))?;
        let zeros = archive.i32s(&key("zeros"))?;
        let groups = group_size.map_or(1, |g| cols / g.max(1));
        if codes.len() != rows * cols
            || scales.shape() != (rows, groups)
            || offsets.shape() != (rows, groups)
            || zeros.len() != rows * groups
        {
            return Err(bad("tensor shapes disagree with metadata").into());
        }
        Ok(Self {
            rows,
            cols,
            codes,
            scales,
            zeros,
            offsets,
            bits,
            group_size,
            backend,
        })
    }
}

struct RowOutput<T> {
    codes: Vec<u8>,
    params: Vec<QuantParams<T>>,
}

fn assemble<T: Real>(rows: Vec<RowOutput<T>>, cols: usize, cfg: &QuantConfig) -> QuantizedTensor<T> {
    let m = rows.len();
    let groups = rows.first().map_or(0, |r| r.params.len());
    let mut codes = Vec::with_capacity(m * cols);
    let mut scales = Matrix::zeros(m, groups);
    let mut zeros = Vec::with_capacity(m * groups);
    let mut offsets = Matrix::zeros(m, groups);
    for (i, r) in rows.into_iter().enumerate() {
        codes.extend_from_slice(&r.codes);
        for (g, p) in r.params.iter().enumerate() {
            scales[(i, g)] = p.scale;
            zeros.push(p.zero);
            offsets[(i, g)] = p.offset;
        }
    }
    QuantizedTensor {
        rows: m,
        cols,
        codes,
        scales,
        zeros,
        offsets,
        bits: cfg.bits,
        group_size: cfg.group_size,
        backend: cfg.backend,
    }
}

/// Round-to-nearest quantization with per-channel or group-wise statistics.
pub fn quantize_rtn<T: Real>(w: &Matrix<T>, cfg: &QuantConfig) -> Result<QuantizedTensor<T>, QuantError> {
    let g = cfg.group_width(w.cols())?;
    if !w.all_finite() {
        return Err(QuantError::NonFinite);
    }
    let max_code = cfg.max_code();
    let rows = (0..w.rows())
        .into_par_iter()
        .map(|i| {
            let row = w.row(i);
            let mut codes = Vec::with_capacity(row.len());
            let mut params = Vec::new();
            for chunk in row.chunks(g.max(1)) {
                let p = quant_params(chunk, cfg.bits);
                codes.extend(chunk.iter().map(|&x| p.code(x, max_code)));
                params.push(p);
            }
            RowOutput { codes, params }
        })
        .collect();
    let mut cfg = *cfg;
    cfg.backend = Backend::Rtn;
    Ok(assemble(rows, w.cols(), &cfg))
}

/// Upper Cholesky factor `U` of the damped inverse Hessian (`H⁻¹ = UᵀU`).
pub fn inverse_hessian_factor<T: Real>(h: &Matrix<T>, damping: f64) -> Result<Matrix<T>, QuantError> {
    if !h.is_square() {
        return Err(LinalgError::NotSquare(h.shape()).into());
    }
    let n = h.rows();
    let mut hd = h.clone();
    // Inputs that never fire carry no error signal; give them unit curvature.
    for j in 0..n {
        if hd[(j, j)] == T::zero() {
            hd[(j, j)] = T::one();
        }
    }
    let mean_diag = (0..n).fold(T::zero(), |a, j| a + hd[(j, j)]) / T::lit(n.max(1) as f64);
    let damp = T::lit(damping) * mean_diag;
    for j in 0..n {
        hd[(j, j)] += damp;
    }
    let hinv = Cholesky::factor(&hd)?.inverse();
    Ok(Cholesky::factor(&hinv)?.lower().transpose())
}

/// Column-sequential quantization that pushes each column's rounding error
/// onto the not-yet-quantized columns through the damped inverse Hessian.
pub fn quantize_compensated<T: Real>(
    w: &Matrix<T>,
    h: &Matrix<T>,
    cfg: &QuantConfig,
) -> Result<QuantizedTensor<T>, QuantError> {
    let (_, n) = w.shape();
    let g = cfg.group_width(n)?;
    if h.shape() != (n, n) {
        return Err(QuantError::DimMismatch {
            what: "Hessian size",
            expected: n,
            got: h.rows(),
        });
    }
    if !w.all_finite() {
        return Err(QuantError::NonFinite);
    }
    let u = inverse_hessian_factor(h, cfg.damping)?;
    let max_code = cfg.max_code();
    let rows = (0..w.rows())
        .into_par_iter()
        .map(|i| {
            let mut row = w.row(i).to_vec();
            let mut codes = Vec::with_capacity(n);
            let mut params = Vec::new();
            let mut p = QuantParams {
                scale: T::one(),
                zero: 0,
                offset: T::zero(),
            };
            for j in 0..n {
                if j % g == 0 {
                    p = quant_params(&row[j..j + g], cfg.bits);
                    params.push(p);
                }
                let c = p.code(row[j], max_code);
                codes.push(c);
                let err = (row[j] - p.dequant(c)) / u[(j, j)];
                let u_row = u.row(j);
                for k in j + 1..n {
                    row[k] -= err * u_row[k];
                }
            }
            RowOutput { codes, params }
        })
        .collect();
    let mut cfg = *cfg;
    cfg.backend = Backend::Compensated;
    Ok(assemble(rows, n, &cfg))
}

/// Dispatches on `cfg.backend`; `h` is required for the compensated backend.
pub fn quantize<T: Real>(
    w: &Matrix<T>,
    h: Option<&Matrix<T>>,
    cfg: &QuantConfig,
) -> Result<QuantizedTensor<T>, QuantError> {
    match cfg.backend {
        Backend::Rtn => quantize_rtn(w, cfg),
        Backend::Compensated => match h {
            Some(h) => quantize_compensated(w, h, cfg),
            None => Err(QuantError::InvalidConfig(
                "the compensated backend needs a calibration Hessian".into(),
            )),
        },
    }
}

pub fn dequantize<T: Real>(q: &QuantizedTensor<T>) -> Matrix<T> {
    q.dequantize()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ReconstructionMetrics {
    pub weight_mse: f64,
    /// `‖X(W − Ŵ)ᵀ‖²_F / rows(X)`.
    pub output_mse: f64,
    /// Largest per-channel `max_j |W_ij − Ŵ_ij|`.
    pub row_linf_max: f64,
    pub row_linf_mean: f64,
}

fn weight_stats<T: Real>(w_ref: &Matrix<T>, w_hat: &Matrix<T>) -> (f64, f64, f64) {
    let mut sq = 0.0;
    let mut lmax: f64 = 0.0;
    let mut lsum = 0.0;
    for (a, b) in w_ref.row_iter().zip(w_hat.row_iter()) {
        let mut rmax: f64 = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            let d = (x - y).to_f64_lossless();
            sq += d * d;
            rmax = rmax.max(d.abs());
        }
        lmax = lmax.max(rmax);
        lsum += rmax;
    }
    let numel = (w_ref.rows() * w_ref.cols()).max(1) as f64;
    (sq / numel, lmax, lsum / w_ref.rows().max(1) as f64)
}

fn check_same_shape<T: Real>(w_ref: &Matrix<T>, w_hat: &Matrix<T>) -> Result<(), QuantError> {
    if w_ref.shape() != w_hat.shape() {
        return Err(QuantError::DimMismatch {
            what: "weight elements",
            expected: w_ref.rows() * w_ref.cols(),
            got: w_hat.rows() * w_hat.cols(),
        });
    }
    Ok(())
}

pub fn reconstruction_metrics<T: Real>(
    w_ref: &Matrix<T>,
    q: &QuantizedTensor<T>,
    x_calib: &Matrix<T>,
) -> Result<ReconstructionMetrics, QuantError> {
    let w_hat = q.dequantize();
    check_same_shape(w_ref, &w_hat)?;
    if x_calib.cols() != w_ref.cols() {
        return Err(QuantError::DimMismatch {
            what: "calibration width",
            expected: w_ref.cols(),
            got: x_calib.cols(),
        });
    }
    let (weight_mse, row_linf_max, row_linf_mean) = weight_stats(w_ref, &w_hat);
    let d = w_ref.sub(&w_hat)?.cast::<f64>();
    let out = x_calib.cast::<f64>().matmul_t(&d)?;
    let output_mse = if x_calib.rows() == 0 {
        0.0
    } else {
        out.as_slice().iter().map(|v| v * v).sum::<f64>() / x_calib.rows() as f64
    };
    Ok(ReconstructionMetrics {
        weight_mse,
        output_mse,
        row_linf_max,
        row_linf_mean,
    })
}

/// Same metrics from a proxy Hessian `H = (2/n)XᵀX` instead of the raw inputs.
pub fn reconstruction_metrics_hessian<T: Real>(
    w_ref: &Matrix<T>,
    w_hat: &Matrix<T>,
    h: &Matrix<f64>,
) -> Result<ReconstructionMetrics, QuantError> {
    check_same_shape(w_ref, w_hat)?;
    let n = w_ref.cols();
    if h.shape() != (n, n) {
        return Err(QuantError::DimMismatch {
            what: "Hessian size",
            expected: n,
            got: h.rows(),
        });
    }
    let (weight_mse, row_linf_max, row_linf_mean) = weight_stats(w_ref, w_hat);
    let d = w_ref.sub(w_hat)?.cast::<f64>();
    let mut total = 0.0;
    for row in d.row_iter() {
        let hd = h.matvec(row)?;
        total += row.iter().zip(&hd).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(ReconstructionMetrics {
        weight_mse,
        output_mse: 0.5 * total,
        row_linf_max,
        row_linf_mean,
    })
}

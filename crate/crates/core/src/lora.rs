//! Low-rank adapter planning and numerics.
//!
//! Parameter counting follows the module listing of a decoder-only model:
//! a token embedding, `n_layers` identical blocks of linear modules and
//! layer norms, a final norm, and an output head that is either tied to the
//! embedding or counted separately. An adapter of rank `r` on a linear module
//! `in -> out` adds `r * (in + out)` trainable parameters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Lcg64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LoraError {
    #[error("no_target_match: pattern {0:?} matches no module")]
    NoTargetMatch(String),
    #[error("invalid_rank: rank must be at least 1")]
    InvalidRank,
    #[error("rank_too_large: rank {r} exceeds min(in, out) of module {module}")]
    RankTooLarge { r: usize, module: String },
    #[error("invalid_arch: {0}")]
    InvalidArch(String),
    #[error("invalid_lora_config: {0}")]
    InvalidConfig(&'static str),
    #[error("count_overflow: parameter count exceeds 64 bits")]
    Overflow,
    #[error("shape_error: {0}")]
    Shape(String),
    #[error("non_finite: matrix entries must be finite")]
    NonFinite,
    #[error("unsupported_bits: {0}")]
    UnsupportedBits(u32),
}

impl LoraError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::NoTargetMatch(_) => "no_target_match",
            Self::InvalidRank => "invalid_rank",
            Self::RankTooLarge { .. } => "rank_too_large",
            Self::InvalidArch(_) => "invalid_arch",
            Self::InvalidConfig(_) => "invalid_lora_config",
            Self::Overflow => "count_overflow",
            Self::Shape(_) => "shape_error",
            Self::NonFinite => "non_finite",
            Self::UnsupportedBits(_) => "unsupported_bits",
        }
    }
}

// ---------------------------------------------------------------------------
// Architecture and adapter configuration

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearModule {
    pub name: String,
    pub in_dim: u64,
    pub out_dim: u64,
    #[serde(default)]
    pub has_bias: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormSpec {
    pub name: String,
    pub dim: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub vocab_size: u64,
    pub d_model: u64,
    pub n_layers: u64,
    pub layer_modules: Vec<LinearModule>,
    #[serde(default)]
    pub per_layer_norms: Vec<NormSpec>,
    pub final_norm_dim: u64,
    pub tied_head: bool,
    pub head_out_dim: u64,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<(), LoraError> {
        let mut dims = vec![
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("final_norm_dim", self.final_norm_dim),
            ("head_out_dim", self.head_out_dim),
        ];
        for m in &self.layer_modules {
            dims.push(("in_dim", m.in_dim));
            dims.push(("out_dim", m.out_dim));
        }
        for n in &self.per_layer_norms {
            dims.push(("norm dim", n.dim));
        }
        if let Some((what, _)) = dims.iter().find(|(_, d)| *d == 0) {
            return Err(LoraError::InvalidArch(format!("{what} must be at least 1")));
        }
        let mut seen = std::collections::HashSet::new();
        for m in &self.layer_modules {
            if !seen.insert(m.name.as_str()) {
                return Err(LoraError::InvalidArch(format!(
                    "duplicate module name {:?}",
                    m.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub r: u64,
    pub alpha: f64,
    /// Recorded for planning only; nothing here samples it.
    #[serde(default)]
    pub dropout: f64,
    pub target_modules: Vec<String>,
}

impl LoraConfig {
    pub fn validate(&self) -> Result<(), LoraError> {
        if self.r == 0 {
            return Err(LoraError::InvalidRank);
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(LoraError::InvalidConfig("alpha must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(LoraError::InvalidConfig("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

fn add(a: u64, b: u64) -> Result<u64, LoraError> {
    a.checked_add(b).ok_or(LoraError::Overflow)
}

fn mul(a: u64, b: u64) -> Result<u64, LoraError> {
    a.checked_mul(b).ok_or(LoraError::Overflow)
}

/// Frozen parameter count. Norms carry a weight and a bias each.
pub fn count_base_params(arch: &ArchSpec) -> Result<u64, LoraError> {
    arch.validate()?;
    let mut per_layer = 0u64;
    for m in &arch.layer_modules {
        per_layer = add(per_layer, mul(m.in_dim, m.out_dim)?)?;
        if m.has_bias {
            per_layer = add(per_layer, m.out_dim)?;
        }
    }
    for n in &arch.per_layer_norms {
        per_layer = add(per_layer, mul(2, n.dim)?)?;
    }
    let mut total = mul(arch.vocab_size, arch.d_model)?;
    total = add(total, mul(arch.n_layers, per_layer)?)?;
    total = add(total, mul(2, arch.final_norm_dim)?)?;
    if !arch.tied_head {
        total = add(total, mul(arch.d_model, arch.head_out_dim)?)?;
    }
    Ok(total)
}

/// Modules selected by the config's exact-name patterns.
pub fn targeted_modules<'a>(
    arch: &'a ArchSpec,
    cfg: &LoraConfig,
) -> Result<Vec<&'a LinearModule>, LoraError> {
    for p in &cfg.target_modules {
        if !arch.layer_modules.iter().any(|m| &m.name == p) {
            return Err(LoraError::NoTargetMatch(p.clone()));
        }
    }
    Ok(arch
        .layer_modules
        .iter()
        .filter(|m| cfg.target_modules.iter().any(|p| p == &m.name))
        .collect())
}

pub fn count_lora_params(arch: &ArchSpec, cfg: &LoraConfig) -> Result<u64, LoraError> {
    arch.validate()?;
    cfg.validate()?;
    let mut per_layer = 0u64;
    for m in targeted_modules(arch, cfg)? {
        if cfg.r > m.in_dim.min(m.out_dim) {
            return Err(LoraError::RankTooLarge {
                r: cfg.r as usize,
                module: m.name.clone(),
            });
        }
        per_layer = add(per_layer, mul(cfg.r, add(m.in_dim, m.out_dim)?)?)?;
    }
    mul(arch.n_layers, per_layer)
}

pub fn count_all_params(arch: &ArchSpec, cfg: &LoraConfig) -> Result<u64, LoraError> {
    add(count_base_params(arch)?, count_lora_params(arch, cfg)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LoraPlan {
    pub trainable: u64,
    pub all: u64,
}

impl LoraPlan {
    pub fn compute(arch: &ArchSpec, cfg: &LoraConfig) -> Result<Self, LoraError> {
        let trainable = count_lora_params(arch, cfg)?;
        let all = add(count_base_params(arch)?, trainable)?;
        Ok(Self { trainable, all })
    }

    pub fn trainable_percent(&self) -> f64 {
        if self.all == 0 {
            0.0
        } else {
            100.0 * self.trainable as f64 / self.all as f64
        }
    }
}

impl fmt::Display for LoraPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "trainable params: {} || all params: {} || trainable%: {:.4}",
            self.trainable,
            self.all,
            self.trainable_percent()
        )
    }
}

/// Bundled reference description of the 40B Falcon-family model used in the
/// h2oGPT fine-tuning runs, and its rank-8 adapter configuration.
pub mod reference {
    use super::{ArchSpec, LoraConfig};

    pub const FALCON_40B_ARCH_JSON: &str = include_str!("../fixtures/falcon-40b.arch.json");
    pub const FALCON_40B_LORA_JSON: &str = include_str!("../fixtures/falcon-40b.lora.json");

    pub fn falcon_40b() -> ArchSpec {
        serde_json::from_str(FALCON_40B_ARCH_JSON).expect("bundled fixture parses")
    }

    pub fn falcon_40b_lora() -> LoraConfig {
        serde_json::from_str(FALCON_40B_LORA_JSON).expect("bundled fixture parses")
    }
}

// ---------------------------------------------------------------------------
// Dense matrices

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LoraError> {
        if data.len() != rows * cols {
            return Err(LoraError::Shape(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LoraError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, LoraError> {
        if x.len() != self.cols {
            return Err(LoraError::Shape(format!(
                "vector of length {} against {}x{} matrix",
                x.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(self
            .data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, LoraError> {
        if self.cols != other.rows {
            return Err(LoraError::Shape(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix::from_fn(self.rows, other.cols, |i, j| {
            (0..self.cols).map(|k| self.get(i, k) * other.get(k, j)).sum()
        }))
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }
}

// ---------------------------------------------------------------------------
// Adapter algebra

/// `A` is `r x in_dim`, `B` is `out_dim x r`; the weight update is
/// `(alpha / r) * B * A`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    a: Matrix,
    b: Matrix,
    alpha: f64,
}

impl AdapterPair {
    pub fn new(a: Matrix, b: Matrix, alpha: f64) -> Result<Self, LoraError> {
        if a.rows == 0 || b.cols != a.rows {
            return Err(LoraError::Shape(format!(
                "A is {}x{}, B is {}x{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(LoraError::Shape("alpha must be positive".into()));
        }
        Ok(Self { a, b, alpha })
    }

    /// Fresh adapter: `A` uniform in `±1/sqrt(in_dim)` from the seeded
    /// generator, `B` zero.
    pub fn init(in_dim: usize, out_dim: usize, r: usize, alpha: f64, seed: u64) -> Result<Self, LoraError> {
        if r == 0 {
            return Err(LoraError::InvalidRank);
        }
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut rng = Lcg64::new(seed);
        let a = Matrix::from_fn(r, in_dim, |_, _| (2.0 * rng.next_unit() - 1.0) * bound);
        Self::new(a, Matrix::zeros(out_dim, r), alpha)
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rank(&self) -> usize {
        self.a.rows
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows
    }

    fn check_base(&self, w: &Matrix) -> Result<(), LoraError> {
        if w.rows != self.out_dim() || w.cols != self.in_dim() {
            return Err(LoraError::Shape(format!(
                "base is {}x{}, adapter maps {} -> {}",
                w.rows,
                w.cols,
                self.in_dim(),
                self.out_dim()
            )));
        }
        Ok(())
    }
}

/// `y = W x + (alpha/r) B (A x)`. Exact zeros in the low-rank term leave the
/// base output untouched, so a zero `B` reproduces `W x` bit for bit.
pub fn lora_forward(w: &Matrix, adapter: &AdapterPair, x: &[f64]) -> Result<Vec<f64>, LoraError> {
    adapter.check_base(w)?;
    let mut y = w.matvec(x)?;
    let ax = adapter.a.matvec(x)?;
    let bax = adapter.b.matvec(&ax)?;
    let s = adapter.scaling();
    for (yi, d) in y.iter_mut().zip(bax) {
        let d = s * d;
        if d != 0.0 {
            *yi += d;
        }
    }
    Ok(y)
}

/// `W' = W + (alpha/r) B A`. Applying the same adapter twice adds the update twice.
pub fn merge(w: &Matrix, adapter: &AdapterPair) -> Result<Matrix, LoraError> {
    adapter.check_base(w)?;
    let delta = adapter.b.matmul(&adapter.a)?;
    let s = adapter.scaling();
    let mut out = w.clone();
    for (o, d) in out.data.iter_mut().zip(&delta.data) {
        let d = s * d;
        if d != 0.0 {
            *o += d;
        }
    }
    Ok(out)
}

/// `0.5 * |lora_forward(W, adapter, x) - target|^2`
pub fn adapter_loss(w: &Matrix, adapter: &AdapterPair, x: &[f64], target: &[f64]) -> Result<f64, LoraError> {
    let y = lora_forward(w, adapter, x)?;
    if target.len() != y.len() {
        return Err(LoraError::Shape(format!(
            "target of length {} for output of length {}",
            target.len(),
            y.len()
        )));
    }
    Ok(0.5 * y.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
}

/// Loss gradients with respect to the adapter factors. The base weight is
/// frozen and has no gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGradients {
    pub a: Matrix,
    pub b: Matrix,
}

/// With `delta = y - target` and `s = alpha/r`:
/// `dL/dB = s * delta (A x)^T`, `dL/dA = s * (B^T delta) x^T`.
pub fn adapter_gradients(
    w: &Matrix,
    adapter: &AdapterPair,
    x: &[f64],
    target: &[f64],
) -> Result<AdapterGradients, LoraError> {
    let y = lora_forward(w, adapter, x)?;
    if target.len() != y.len() {
        return Err(LoraError::Shape("target length".into()));
    }
    let delta: Vec<f64> = y.iter().zip(target).map(|(a, b)| a - b).collect();
    let s = adapter.scaling();
    let ax = adapter.a.matvec(x)?;
    let bt_delta = adapter.b.transpose().matvec(&delta)?;
    let gb = Matrix::from_fn(adapter.out_dim(), adapter.rank(), |i, k| s * delta[i] * ax[k]);
    let ga = Matrix::from_fn(adapter.rank(), adapter.in_dim(), |k, j| s * bt_delta[k] * x[j]);
    Ok(AdapterGradients { a: ga, b: gb })
}

pub const FD_STEP: f64 = 1e-6;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compare analytic adapter gradients against central finite differences
/// and return the largest relative error over all entries of `A` and `B`.
pub fn grad_check(w: &Matrix, adapter: &AdapterPair, x: &[f64], target: &[f64]) -> Result<f64, LoraError> {
    let analytic = adapter_gradients(w, adapter, x, target)?;
    let mut worst: f64 = 0.0;

    let mut probe = adapter.clone();
    for idx in 0..probe.a.data.len() {
        let orig = probe.a.data[idx];
        probe.a.data[idx] = orig + FD_STEP;
        let up = adapter_loss(w, &probe, x, target)?;
        probe.a.data[idx] = orig - FD_STEP;
        let down = adapter_loss(w, &probe, x, target)?;
        probe.a.data[idx] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic.a.data[idx], numeric));
    }
    for idx in 0..probe.b.data.len() {
        let orig = probe.b.data[idx];
        probe.b.data[idx] = orig + FD_STEP;
        let up = adapter_loss(w, &probe, x, target)?;
        probe.b.data[idx] = orig - FD_STEP;
        let down = adapter_loss(w, &probe, x, target)?;
        probe.b.data[idx] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic.b.data[idx], numeric));
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Quantization and memory

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<i32>,
    pub scale: f64,
    pub bits: u32,
}

impl QuantizedMatrix {
    pub fn dequantize(&self) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.values.iter().map(|&q| f64::from(q) * self.scale).collect(),
        }
    }
}

/// Symmetric absmax quantization: `scale = max|W| / (2^(bits-1) - 1)`,
/// `q = round(W / scale)` clamped to the symmetric range. An all-zero matrix
/// gets scale 0.
pub fn quantize_absmax(w: &Matrix, bits: u32) -> Result<QuantizedMatrix, LoraError> {
    if bits != 4 && bits != 8 {
        return Err(LoraError::UnsupportedBits(bits));
    }
    let qmax = (1i32 << (bits - 1)) - 1;
    let max_abs = w.max_abs();
    let scale = max_abs / f64::from(qmax);
    let values = if scale == 0.0 {
        vec![0; w.data.len()]
    } else {
        w.data
            .iter()
            .map(|&v| ((v / scale).round() as i32).clamp(-qmax, qmax))
            .collect()
    };
    Ok(QuantizedMatrix {
        rows: w.rows,
        cols: w.cols,
        values,
        scale,
        bits,
    })
}

/// Bytes needed to hold `param_count` weights at `bits` each, rounded up.
pub fn weight_memory_bytes(param_count: u64, bits: u32) -> Result<u64, LoraError> {
    if ![4, 8, 16, 32].contains(&bits) {
        return Err(LoraError::UnsupportedBits(bits));
    }
    let bytes = (u128::from(param_count) * u128::from(bits)).div_ceil(8);
    u64::try_from(bytes).map_err(|_| LoraError::Overflow)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelSize {
    B7,
    B12,
    B20,
    B30,
    B40,
    B65,
}

impl ModelSize {
    pub const ALL: [ModelSize; 6] = [Self::B7, Self::B12, Self::B20, Self::B30, Self::B40, Self::B65];

    pub fn label(self) -> &'static str {
        match self {
            Self::B7 => "7B",
            Self::B12 => "12B",
            Self::B20 => "20B",
            Self::B30 => "30B",
            Self::B40 => "40B",
            Self::B65 => "65B",
        }
    }
}

impl fmt::Display for ModelSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ModelSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown model size {s:?}; expected one of 7B, 12B, 20B, 30B, 40B, 65B"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GpuBits {
    Four,
    Eight,
    Sixteen,
}

impl GpuBits {
    pub const ALL: [GpuBits; 3] = [Self::Four, Self::Eight, Self::Sixteen];

    pub fn bits(self) -> u32 {
        match self {
            Self::Four => 4,
            Self::Eight => 8,
            Self::Sixteen => 16,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.bits() == bits)
    }
}

/// GPU memory (GB) recommended for fine-tuning at a given size and precision.
/// Two 80GB cards are reported as 160.
pub fn recommended_gpu(size: ModelSize, bits: GpuBits) -> u32 {
    let row: [u32; 3] = match size {
        ModelSize::B7 => [16, 12, 16],
        ModelSize::B12 => [16, 24, 32],
        ModelSize::B20 => [16, 32, 48],
        ModelSize::B30 => [24, 48, 80],
        ModelSize::B40 => [48, 80, 160],
        ModelSize::B65 => [48, 80, 160],
    };
    match bits {
        GpuBits::Four => row[0],
        GpuBits::Eight => row[1],
        GpuBits::Sixteen => row[2],
    }
}

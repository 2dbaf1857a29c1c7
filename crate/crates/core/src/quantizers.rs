//! Uniform integer quantization.
//!
//! Two formats are supported:
//!
//! * symmetric, `s = max|T_g| / (2^(b-1) - 1)`, codes in `[-2^(b-1), 2^(b-1) - 1]`,
//!   per tensor, per token (column) or per channel (row);
//! * asymmetric group-wise along each row, `s = (max - min) / (2^b - 1)`,
//!   `z = round(-min / s)`, codes in `[0, 2^b - 1]`.
//!
//! Rounding is half-to-even everywhere. Zero-range groups store a scale of
//! exactly 0; symmetric ones dequantize to 0 and asymmetric ones to the
//! group constant kept in [`QuantizedTensor::zero_range_values`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_GROUP_SIZE: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    Symmetric,
    Asymmetric,
}

/// Which elements share one scale. For a `rows × cols` tensor, tokens are
/// columns and channels are rows; groups run along each row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerTensor,
    PerToken,
    PerChannel,
    PerGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u32,
    pub mode: QuantMode,
    pub granularity: Granularity,
    pub group_size: usize,
}

impl QuantConfig {
    pub fn symmetric(bits: u32, granularity: Granularity) -> Self {
        Self {
            bits,
            mode: QuantMode::Symmetric,
            granularity,
            group_size: DEFAULT_GROUP_SIZE,
        }
    }

    pub fn asymmetric_grouped(bits: u32, group_size: usize) -> Self {
        Self {
            bits,
            mode: QuantMode::Asymmetric,
            granularity: Granularity::PerGroup,
            group_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::Config(format!(
                "bits must be in 2..=8, got {}",
                self.bits
            )));
        }
        if self.group_size == 0 {
            return Err(Error::Config("group_size must be positive".into()));
        }
        match (self.mode, self.granularity) {
            (QuantMode::Asymmetric, Granularity::PerGroup) => Ok(()),
            (QuantMode::Symmetric, g) if g != Granularity::PerGroup => Ok(()),
            (mode, g) => Err(Error::Config(format!(
                "{mode:?} mode cannot be combined with {g:?} granularity"
            ))),
        }
    }

    /// Inclusive integer code range.
    pub fn code_range(&self) -> (i32, i32) {
        match self.mode {
            QuantMode::Symmetric => {
                let half = 1i32 << (self.bits - 1);
                (-half, half - 1)
            }
            QuantMode::Asymmetric => (0, (1i32 << self.bits) - 1),
        }
    }

    /// Number of scale groups for a `rows × cols` tensor.
    pub fn group_count(&self, rows: usize, cols: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 1,
            Granularity::PerToken => cols,
            Granularity::PerChannel => rows,
            Granularity::PerGroup => rows * cols.div_ceil(self.group_size),
        }
    }

    /// Group holding element `(r, c)` of a tensor with `cols` columns.
    pub fn group_of(&self, r: usize, c: usize, cols: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerToken => c,
            Granularity::PerChannel => r,
            Granularity::PerGroup => r * cols.div_ceil(self.group_size) + c / self.group_size,
        }
    }
}

/// Integer codes plus per-group scale metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub codes: Vec<i32>,
    pub scales: Vec<f64>,
    /// One per group in asymmetric mode, empty otherwise.
    pub zero_points: Vec<i32>,
    /// Constant of each zero-range asymmetric group (0 for regular groups);
    /// empty in symmetric mode.
    pub zero_range_values: Vec<f64>,
    pub config: QuantConfig,
    pub source_shape: Vec<usize>,
}

impl QuantizedTensor {
    pub fn rows(&self) -> usize {
        self.source_shape[0]
    }

    pub fn cols(&self) -> usize {
        self.source_shape[1]
    }

    pub fn group_of(&self, r: usize, c: usize) -> usize {
        self.config.group_of(r, c, self.cols())
    }

    /// Encodes `value` with the parameters of `group`.
    pub fn encode(&self, value: f64, group: usize) -> i32 {
        let scale = self.scales[group];
        let (lo, hi) = self.config.code_range();
        if scale == 0.0 {
            return 0;
        }
        let shifted = match self.config.mode {
            QuantMode::Symmetric => (value / scale).round_ties_even(),
            QuantMode::Asymmetric => {
                (value / scale).round_ties_even() + f64::from(self.zero_points[group])
            }
        };
        shifted.clamp(f64::from(lo), f64::from(hi)) as i32
    }

    /// Maps a code back to a real value with the parameters of `group`.
    pub fn decode(&self, code: i32, group: usize) -> f64 {
        let scale = self.scales[group];
        match self.config.mode {
            QuantMode::Symmetric => scale * f64::from(code),
            QuantMode::Asymmetric => {
                if scale == 0.0 {
                    self.zero_range_values[group]
                } else {
                    scale * (f64::from(code) - f64::from(self.zero_points[group]))
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.source_shape.len() != 2 {
            return Err(Error::Shape(format!(
                "quantized tensors are 2-D, got shape {:?}",
                self.source_shape
            )));
        }
        let (rows, cols) = (self.rows(), self.cols());
        if self.codes.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} codes for shape {:?}",
                self.codes.len(),
                self.source_shape
            )));
        }
        let groups = self.config.group_count(rows, cols);
        if self.scales.len() != groups {
            return Err(Error::Shape(format!(
                "{} scales, expected {groups}",
                self.scales.len()
            )));
        }
        let expected_meta = match self.config.mode {
            QuantMode::Symmetric => 0,
            QuantMode::Asymmetric => groups,
        };
        if self.zero_points.len() != expected_meta || self.zero_range_values.len() != expected_meta
        {
            return Err(Error::Shape(format!(
                "zero-point metadata length {} / {}, expected {expected_meta}",
                self.zero_points.len(),
                self.zero_range_values.len()
            )));
        }
        if self.scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Format(
                "scales must be finite and non-negative".into(),
            ));
        }
        let (lo, hi) = self.config.code_range();
        if self.codes.iter().any(|c| *c < lo || *c > hi) {
            return Err(Error::Format(format!("code outside [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// Quantizes `t` with whichever format `cfg` names.
pub fn quantize(t: &Matrix, cfg: &QuantConfig) -> Result<QuantizedTensor> {
    match cfg.mode {
        QuantMode::Symmetric => quantize_symmetric(t, cfg),
        QuantMode::Asymmetric => quantize_asymmetric_grouped(t, cfg),
    }
}

pub fn quantize_symmetric(t: &Matrix, cfg: &QuantConfig) -> Result<QuantizedTensor> {
    cfg.validate()?;
    if cfg.mode != QuantMode::Symmetric {
        return Err(Error::Config(
            "quantize_symmetric needs symmetric mode".into(),
        ));
    }
    t.ensure_finite("quantizer input")?;
    let (rows, cols) = t.shape();
    let groups = cfg.group_count(rows, cols);
    let mut max_abs = vec![0.0f64; groups];
    for r in 0..rows {
        for c in 0..cols {
            let g = cfg.group_of(r, c, cols);
            max_abs[g] = max_abs[g].max(t[(r, c)].abs());
        }
    }
    let qmax = f64::from(cfg.code_range().1);
    let scales: Vec<f64> = max_abs.iter().map(|m| m / qmax).collect();
    let mut q = QuantizedTensor {
        codes: Vec::with_capacity(rows * cols),
        scales,
        zero_points: Vec::new(),
        zero_range_values: Vec::new(),
        config: *cfg,
        source_shape: vec![rows, cols],
    };
    for r in 0..rows {
        for c in 0..cols {
            let code = q.encode(t[(r, c)], cfg.group_of(r, c, cols));
            q.codes.push(code);
        }
    }
    Ok(q)
}

pub fn quantize_asymmetric_grouped(w: &Matrix, cfg: &QuantConfig) -> Result<QuantizedTensor> {
    cfg.validate()?;
    if cfg.mode != QuantMode::Asymmetric {
        return Err(Error::Config(
            "quantize_asymmetric_grouped needs asymmetric per-group mode".into(),
        ));
    }
    w.ensure_finite("quantizer input")?;
    let (rows, cols) = w.shape();
    let groups = cfg.group_count(rows, cols);
    let mut lo = vec![f64::INFINITY; groups];
    let mut hi = vec![f64::NEG_INFINITY; groups];
    for r in 0..rows {
        for c in 0..cols {
            let g = cfg.group_of(r, c, cols);
            lo[g] = lo[g].min(w[(r, c)]);
            hi[g] = hi[g].max(w[(r, c)]);
        }
    }
    let qmax = cfg.code_range().1;
    let mut scales = Vec::with_capacity(groups);
    let mut zero_points = Vec::with_capacity(groups);
    let mut zero_range_values = Vec::with_capacity(groups);
    for g in 0..groups {
        let s = (hi[g] - lo[g]) / f64::from(qmax);
        if s > 0.0 && s.is_finite() {
            // Not clipped: a group whose range excludes 0 needs a zero-point
            // outside the code range to keep its codes in range.
            let z = (-lo[g] / s).round_ties_even() as i32;
            scales.push(s);
            zero_points.push(z);
            zero_range_values.push(0.0);
        } else {
            scales.push(0.0);
            zero_points.push(0);
            zero_range_values.push(lo[g]);
        }
    }
    let mut q = QuantizedTensor {
        codes: Vec::with_capacity(rows * cols),
        scales,
        zero_points,
        zero_range_values,
        config: *cfg,
        source_shape: vec![rows, cols],
    };
    for r in 0..rows {
        for c in 0..cols {
            let code = q.encode(w[(r, c)], cfg.group_of(r, c, cols));
            q.codes.push(code);
        }
    }
    Ok(q)
}

pub fn dequantize(q: &QuantizedTensor) -> Result<Matrix> {
    q.validate()?;
    let (rows, cols) = (q.rows(), q.cols());
    Ok(Matrix::from_fn(rows, cols, |r, c| {
        q.decode(q.codes[r * cols + c], q.group_of(r, c))
    }))
}

/// `dequantize(quantize(t, cfg))`.
pub fn fake_quantize(t: &Matrix, cfg: &QuantConfig) -> Result<Matrix> {
    dequantize(&quantize(t, cfg)?)
}

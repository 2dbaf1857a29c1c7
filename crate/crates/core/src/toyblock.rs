//! Small transformer-style blocks: a single linear layer, a GELU MLP, or
//! single-head softmax attention.
//!
//! Inputs are `d × T` (one column per token). Every linear sub-layer is
//! addressed by its index in [`BlockModel::linear_layers`], which is also the
//! index used for per-layer equalization scales.

use crate::attribution::DistortionObjective;
use crate::error::{Error, Result};
use crate::quantizers::{dequantize, fake_quantize, quantize, QuantConfig, QuantizedTensor};
use crate::tensor::Matrix;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh())
}

pub fn gelu_derivative(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_K * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * u * u)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Linear,
    Mlp,
    Attention,
}

impl BlockKind {
    pub fn layer_names(self) -> &'static [&'static str] {
        match self {
            BlockKind::Linear => &["w"],
            BlockKind::Mlp => &["up", "down"],
            BlockKind::Attention => &["q", "k", "v", "o"],
        }
    }
}

impl std::str::FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(BlockKind::Linear),
            "mlp" => Ok(BlockKind::Mlp),
            "attention" => Ok(BlockKind::Attention),
            other => Err(Error::InvalidArgument(format!(
                "unknown block kind '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for BlockKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BlockKind::Linear => "linear",
            BlockKind::Mlp => "mlp",
            BlockKind::Attention => "attention",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockModel {
    /// `y = W x`, `W: m × d`.
    Linear { w: Matrix },
    /// `y = W_down gelu(W_up x)`, `W_up: h × d`, `W_down: m × h`.
    Mlp { up: Matrix, down: Matrix },
    /// Single-head attention with `d × d` projections.
    Attention {
        q: Matrix,
        k: Matrix,
        v: Matrix,
        o: Matrix,
    },
}

impl BlockModel {
    pub fn linear(w: Matrix) -> Result<Self> {
        Self::from_layers(BlockKind::Linear, vec![w])
    }

    pub fn mlp(up: Matrix, down: Matrix) -> Result<Self> {
        Self::from_layers(BlockKind::Mlp, vec![up, down])
    }

    pub fn attention(q: Matrix, k: Matrix, v: Matrix, o: Matrix) -> Result<Self> {
        Self::from_layers(BlockKind::Attention, vec![q, k, v, o])
    }

    /// Builds a block from its linear sub-layers in canonical order,
    /// checking that all shapes agree.
    pub fn from_layers(kind: BlockKind, layers: Vec<Matrix>) -> Result<Self> {
        let expected = kind.layer_names().len();
        if layers.len() != expected {
            return Err(Error::Shape(format!(
                "{kind} block needs {expected} weight matrices, got {}",
                layers.len()
            )));
        }
        if layers.iter().any(|w| w.rows() == 0 || w.cols() == 0) {
            return Err(Error::Shape("weight matrices must be non-empty".into()));
        }
        for w in &layers {
            w.ensure_finite("weights")?;
        }
        let mut it = layers.into_iter();
        let mut next = || it.next().expect("length checked");
        let model = match kind {
            BlockKind::Linear => BlockModel::Linear { w: next() },
            BlockKind::Mlp => {
                let (up, down) = (next(), next());
                if down.cols() != up.rows() {
                    return Err(Error::Shape(format!(
                        "mlp down projection expects {} inputs, up projection gives {}",
                        down.cols(),
                        up.rows()
                    )));
                }
                BlockModel::Mlp { up, down }
            }
            BlockKind::Attention => {
                let (q, k, v, o) = (next(), next(), next(), next());
                let d = q.rows();
                for (name, w) in [("q", &q), ("k", &k), ("v", &v), ("o", &o)] {
                    if w.shape() != (d, d) {
                        return Err(Error::Shape(format!(
                            "attention projection {name} must be {d}x{d}, got {}x{}",
                            w.rows(),
                            w.cols()
                        )));
                    }
                }
                BlockModel::Attention { q, k, v, o }
            }
        };
        Ok(model)
    }

    pub fn kind(&self) -> BlockKind {
        match self {
            BlockModel::Linear { .. } => BlockKind::Linear,
            BlockModel::Mlp { .. } => BlockKind::Mlp,
            BlockModel::Attention { .. } => BlockKind::Attention,
        }
    }

    pub fn linear_layers(&self) -> Vec<&Matrix> {
        match self {
            BlockModel::Linear { w } => vec![w],
            BlockModel::Mlp { up, down } => vec![up, down],
            BlockModel::Attention { q, k, v, o } => vec![q, k, v, o],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.linear_layers()[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.linear_layers().last().expect("non-empty").rows()
    }

    /// Same structure, new weights (e.g. quantized ones).
    pub fn map_layers(&self, mut f: impl FnMut(usize, &Matrix) -> Result<Matrix>) -> Result<Self> {
        let layers = self
            .linear_layers()
            .into_iter()
            .enumerate()
            .map(|(i, w)| f(i, w))
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(self.kind(), layers)
    }

    pub fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.input_dim() {
            return Err(Error::Shape(format!(
                "block expects {} input rows, got {}",
                self.input_dim(),
                x.rows()
            )));
        }
        if x.cols() == 0 {
            return Err(Error::Shape("input has no tokens".into()));
        }
        x.ensure_finite("block input")
    }

    /// Runs the block with every linear sub-layer replaced by `apply(index,
    /// weight, input)`. Nonlinearities always run in full precision.
    pub fn forward_with(
        &self,
        x: &Matrix,
        mut apply: impl FnMut(usize, &Matrix, &Matrix) -> Result<Matrix>,
    ) -> Result<Matrix> {
        self.check_input(x)?;
        match self {
            BlockModel::Linear { w } => apply(0, w, x),
            BlockModel::Mlp { up, down } => {
                let hidden = apply(0, up, x)?.map(gelu);
                apply(1, down, &hidden)
            }
            BlockModel::Attention { q, k, v, o } => {
                let qx = apply(0, q, x)?;
                let kx = apply(1, k, x)?;
                let vx = apply(2, v, x)?;
                let probs = attention_probs(&qx, &kx)?;
                let mixed = vx.matmul(&probs.transpose())?;
                apply(3, o, &mixed)
            }
        }
    }

    /// Vector-Jacobian product: gradient w.r.t. `x` of `<upstream, f(x)>`.
    pub fn backward(&self, x: &Matrix, upstream: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        if upstream.shape() != (self.output_dim(), x.cols()) {
            return Err(Error::Shape("upstream gradient shape".into()));
        }
        match self {
            BlockModel::Linear { w } => w.t_matmul(upstream),
            BlockModel::Mlp { up, down } => {
                let pre = up.matmul(x)?;
                let g_act = down.t_matmul(upstream)?;
                let g_pre = g_act.zip_map(&pre, |g, u| g * gelu_derivative(u))?;
                up.t_matmul(&g_pre)
            }
            BlockModel::Attention { q, k, v, o } => {
                let qx = q.matmul(x)?;
                let kx = k.matmul(x)?;
                let vx = v.matmul(x)?;
                let probs = attention_probs(&qx, &kx)?;
                let g_mixed = o.t_matmul(upstream)?;
                // mixed = V Pᵀ
                let g_v = g_mixed.matmul(&probs)?;
                let g_probs = g_mixed.t_matmul(&vx)?;
                let t = probs.rows();
                let mut g_scores = Matrix::zeros(t, t);
                for i in 0..t {
                    let dot: f64 = (0..t).map(|j| g_probs[(i, j)] * probs[(i, j)]).sum();
                    for j in 0..t {
                        g_scores[(i, j)] = probs[(i, j)] * (g_probs[(i, j)] - dot);
                    }
                }
                let inv_sqrt_d = 1.0 / (qx.rows() as f64).sqrt();
                let g_q = kx.matmul(&g_scores.transpose())?.scale(inv_sqrt_d);
                let g_k = qx.matmul(&g_scores)?.scale(inv_sqrt_d);
                q.t_matmul(&g_q)?
                    .add(&k.t_matmul(&g_k)?)?
                    .add(&v.t_matmul(&g_v)?)
            }
        }
    }
}

/// Row-stochastic `T × T` matrix: row `i` is the softmax over keys for query `i`.
fn attention_probs(qx: &Matrix, kx: &Matrix) -> Result<Matrix> {
    let inv_sqrt_d = 1.0 / (qx.rows() as f64).sqrt();
    let mut scores = qx.t_matmul(kx)?.scale(inv_sqrt_d);
    for i in 0..scores.rows() {
        let row = scores.row_mut(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(scores)
}

/// Quantizer settings for running a block in low precision.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuantizedExecution {
    /// `None` keeps weights in full precision.
    pub weight_cfg: Option<QuantConfig>,
    /// `None` means weight-only quantization.
    pub act_cfg: Option<QuantConfig>,
    /// Per-linear-layer channel scales `E`, one entry per layer input channel.
    pub equalization: Option<Vec<Vec<f64>>>,
}

impl QuantizedExecution {
    pub fn weight_only(weight_cfg: QuantConfig) -> Self {
        Self {
            weight_cfg: Some(weight_cfg),
            ..Self::default()
        }
    }

    pub fn weight_activation(weight_cfg: QuantConfig, act_cfg: QuantConfig) -> Self {
        Self {
            weight_cfg: Some(weight_cfg),
            act_cfg: Some(act_cfg),
            equalization: None,
        }
    }

    pub fn validate(&self, model: &BlockModel) -> Result<()> {
        if let Some(cfg) = &self.weight_cfg {
            cfg.validate()?;
        }
        if let Some(cfg) = &self.act_cfg {
            cfg.validate()?;
        }
        if let Some(scales) = &self.equalization {
            let layers = model.linear_layers();
            if scales.len() != layers.len() {
                return Err(Error::Shape(format!(
                    "{} equalization vectors for {} linear layers",
                    scales.len(),
                    layers.len()
                )));
            }
            for (e, w) in scales.iter().zip(&layers) {
                if e.len() != w.cols() {
                    return Err(Error::Shape(format!(
                        "equalization vector of length {} for a layer with {} inputs",
                        e.len(),
                        w.cols()
                    )));
                }
                if e.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(Error::InvalidArgument(
                        "equalization scales must be positive and finite".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn layer_scales(&self, layer: usize) -> Option<&[f64]> {
        self.equalization.as_ref().map(|e| e[layer].as_slice())
    }

    /// `fake_quantize_W(W * E)`; `W` unchanged when no weight format is set.
    pub fn quantized_weight(&self, layer: usize, w: &Matrix) -> Result<Matrix> {
        let scaled = match self.layer_scales(layer) {
            Some(e) => w.scale_columns(e)?,
            None => w.clone(),
        };
        match &self.weight_cfg {
            Some(cfg) => fake_quantize(&scaled, cfg),
            None => Ok(scaled),
        }
    }

    /// `fake_quantize_X(E⁻¹ * X)`, or `E⁻¹ * X` for weight-only execution.
    pub fn quantized_input(&self, layer: usize, x: &Matrix) -> Result<Matrix> {
        let scaled = match self.layer_scales(layer) {
            Some(e) => {
                let inv: Vec<f64> = e.iter().map(|v| 1.0 / v).collect();
                x.scale_rows(&inv)?
            }
            None => x.clone(),
        };
        match &self.act_cfg {
            Some(cfg) => fake_quantize(&scaled, cfg),
            None => Ok(scaled),
        }
    }

    /// The weight-quantized block with activations left in full precision:
    /// each layer becomes `fake_quantize_W(W * E) · diag(E⁻¹)`.
    pub fn weight_quantized_model(&self, model: &BlockModel) -> Result<BlockModel> {
        self.validate(model)?;
        model.map_layers(|i, w| {
            let wq = self.quantized_weight(i, w)?;
            match self.layer_scales(i) {
                Some(e) => {
                    let inv: Vec<f64> = e.iter().map(|v| 1.0 / v).collect();
                    wq.scale_columns(&inv)
                }
                None => Ok(wq),
            }
        })
    }
}

/// One stored linear sub-layer of a quantized block.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub name: String,
    /// Codes of `W * E` (or of `W` when no equalization was applied).
    pub weight: QuantizedTensor,
    /// `E⁻¹`, applied to the layer input before activation quantization.
    pub input_scales: Option<Vec<f64>>,
}

/// A block whose linear weights are stored as integer codes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    pub kind: BlockKind,
    pub layers: Vec<QuantizedLayer>,
    pub act_cfg: Option<QuantConfig>,
}

impl QuantizedBlock {
    /// Bakes `exec` (which must carry a weight format) into stored codes.
    pub fn from_execution(model: &BlockModel, exec: &QuantizedExecution) -> Result<Self> {
        exec.validate(model)?;
        let cfg = exec
            .weight_cfg
            .ok_or_else(|| Error::Config("a quantized block needs a weight format".into()))?;
        let layers = model
            .linear_layers()
            .into_iter()
            .enumerate()
            .map(|(i, w)| {
                let (scaled, input_scales) = match exec.layer_scales(i) {
                    Some(e) => (
                        w.scale_columns(e)?,
                        Some(e.iter().map(|v| 1.0 / v).collect()),
                    ),
                    None => (w.clone(), None),
                };
                Ok(QuantizedLayer {
                    name: model.kind().layer_names()[i].to_string(),
                    weight: quantize(&scaled, &cfg)?,
                    input_scales,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind: model.kind(),
            layers,
            act_cfg: exec.act_cfg,
        })
    }

    /// Wraps already-quantized weights (e.g. from GPTQ) with no equalization.
    pub fn from_quantized_weights(
        kind: BlockKind,
        weights: Vec<QuantizedTensor>,
        act_cfg: Option<QuantConfig>,
    ) -> Result<Self> {
        let block = Self {
            kind,
            layers: weights
                .into_iter()
                .zip(kind.layer_names())
                .map(|(weight, name)| QuantizedLayer {
                    name: name.to_string(),
                    weight,
                    input_scales: None,
                })
                .collect(),
            act_cfg,
        };
        block.dequantized_model()?;
        Ok(block)
    }

    /// Block holding the dequantized (still `E`-scaled) weights.
    pub fn dequantized_model(&self) -> Result<BlockModel> {
        let layers = self
            .layers
            .iter()
            .map(|l| dequantize(&l.weight))
            .collect::<Result<Vec<_>>>()?;
        let model = BlockModel::from_layers(self.kind, layers)?;
        for (l, w) in self.layers.iter().zip(model.linear_layers()) {
            if let Some(s) = &l.input_scales {
                if s.len() != w.cols() {
                    return Err(Error::Shape(format!("input scales for layer {}", l.name)));
                }
            }
        }
        Ok(model)
    }

    /// Same result as [`block_forward_quantized`] with the execution this
    /// block was baked from.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let model = self.dequantized_model()?;
        model.forward_with(x, |i, w, input| {
            let scaled = match &self.layers[i].input_scales {
                Some(s) => input.scale_rows(s)?,
                None => input.clone(),
            };
            let xq = match &self.act_cfg {
                Some(cfg) => fake_quantize(&scaled, cfg)?,
                None => scaled,
            };
            w.matmul(&xq)
        })
    }
}

pub fn block_forward(model: &BlockModel, x: &Matrix) -> Result<Matrix> {
    model.forward_with(x, |_, w, input| w.matmul(input))
}

pub fn block_forward_quantized(
    model: &BlockModel,
    x: &Matrix,
    exec: &QuantizedExecution,
) -> Result<Matrix> {
    exec.validate(model)?;
    model.forward_with(x, |i, w, input| {
        let wq = exec.quantized_weight(i, w)?;
        let xq = exec.quantized_input(i, input)?;
        wq.matmul(&xq)
    })
}

/// A differentiable scalar function of a `d × T` input.
pub trait ScalarObjective: Sync {
    fn value(&self, x: &Matrix) -> Result<f64>;
    fn gradient(&self, x: &Matrix) -> Result<Matrix>;
}

/// Analytic gradient of the mean absolute output gap between the
/// full-precision block and its weight-quantized counterpart.
pub fn grad_input(model: &BlockModel, exec: &QuantizedExecution, x: &Matrix) -> Result<Matrix> {
    DistortionObjective::new(model, exec)?.gradient(x)
}

/// Central finite differences, one coordinate at a time.
pub fn grad_input_fd<O: ScalarObjective + ?Sized>(
    objective: &O,
    x: &Matrix,
    epsilon: f64,
) -> Result<Matrix> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let orig = x[(r, c)];
            probe[(r, c)] = orig + epsilon;
            let plus = objective.value(&probe)?;
            probe[(r, c)] = orig - epsilon;
            let minus = objective.value(&probe)?;
            probe[(r, c)] = orig;
            grad[(r, c)] = (plus - minus) / (2.0 * epsilon);
        }
    }
    Ok(grad)
}

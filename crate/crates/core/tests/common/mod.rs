//! Reference implementations written independently of the library, plus
//! small helpers shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use qig_quant::quantizers::QuantizedTensor;
use qig_quant::tensor::Matrix;
use qig_quant::toyblock::BlockModel;

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn gelu(u: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * u * (1.0 + (c * (u + 0.044715 * u * u * u)).tanh())
}

/// Block forward pass on nested vectors.
pub fn forward(model: &BlockModel, x: &Matrix) -> Vec<Vec<f64>> {
    let x = to_rows(x);
    match model {
        BlockModel::Linear { w } => matmul(&to_rows(w), &x),
        BlockModel::Mlp { up, down } => {
            let h: Vec<Vec<f64>> = matmul(&to_rows(up), &x)
                .into_iter()
                .map(|r| r.into_iter().map(gelu).collect())
                .collect();
            matmul(&to_rows(down), &h)
        }
        BlockModel::Attention { q, k, v, o } => {
            let qx = matmul(&to_rows(q), &x);
            let kx = matmul(&to_rows(k), &x);
            let vx = matmul(&to_rows(v), &x);
            let d = qx.len();
            let t = x[0].len();
            let mut mixed = vec![vec![0.0; t]; d];
            for i in 0..t {
                let logits: Vec<f64> = (0..t)
                    .map(|j| (0..d).map(|c| qx[c][i] * kx[c][j]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in 0..d {
                    mixed[c][i] = (0..t).map(|j| vx[c][j] * exps[j] / z).sum();
                }
            }
            matmul(&to_rows(o), &mixed)
        }
    }
}

/// Half-to-even rounding written out by hand.
pub fn round_half_even(v: f64) -> f64 {
    let f = v.floor();
    let diff = v - f;
    if diff < 0.5 {
        f
    } else if diff > 0.5 {
        f + 1.0
    } else if f % 2.0 == 0.0 {
        f
    } else {
        f + 1.0
    }
}

/// Symmetric fake quantization with one scale per entry of `groups`,
/// where `group(r, c)` names the group of an element.
pub fn fake_quant_symmetric(
    x: &[Vec<f64>],
    bits: u32,
    groups: usize,
    group: impl Fn(usize, usize) -> usize,
) -> Vec<Vec<f64>> {
    let qmax = ((1i64 << (bits - 1)) - 1) as f64;
    let qmin = -((1i64 << (bits - 1)) as f64);
    let mut amax = vec![0.0f64; groups];
    for (r, row) in x.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let g = group(r, c);
            amax[g] = amax[g].max(v.abs());
        }
    }
    x.iter()
        .enumerate()
        .map(|(r, row)| {
            row.iter()
                .enumerate()
                .map(|(c, v)| {
                    let s = amax[group(r, c)] / qmax;
                    if s == 0.0 {
                        0.0
                    } else {
                        s * round_half_even(v / s).clamp(qmin, qmax)
                    }
                })
                .collect()
        })
        .collect()
}

/// Asymmetric fake quantization with groups of `gs` consecutive entries
/// along each row.
pub fn fake_quant_asymmetric(x: &[Vec<f64>], bits: u32, gs: usize) -> Vec<Vec<f64>> {
    let qmax = ((1i64 << bits) - 1) as f64;
    x.iter()
        .map(|row| {
            let mut out = Vec::with_capacity(row.len());
            for chunk in row.chunks(gs) {
                let lo = chunk.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s = (hi - lo) / qmax;
                if s == 0.0 {
                    out.extend_from_slice(chunk);
                    continue;
                }
                let z = round_half_even(-lo / s);
                out.extend(
                    chunk
                        .iter()
                        .map(|v| s * ((round_half_even(v / s) + z).clamp(0.0, qmax) - z)),
                );
            }
            out
        })
        .collect()
}

pub fn inverse(a: &Matrix) -> Matrix {
    let n = a.rows();
    let mut aug: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = a.row(i).to_vec();
            row.extend((0..n).map(|j| f64::from(u8::from(i == j))));
            row
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs()))
            .unwrap();
        aug.swap(col, piv);
        let p = aug[col][col];
        for v in &mut aug[col] {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = aug[r][col];
                for k in 0..2 * n {
                    aug[r][k] -= f * aug[col][k];
                }
            }
        }
    }
    Matrix::from_fn(n, n, |i, j| aug[i][n + j])
}

/// `Σ_t λ_t x_t x_tᵀ` plus `damping · mean(diag)` on the diagonal.
pub fn hessian(x: &Matrix, lambda: &[f64], damping: f64) -> Matrix {
    let d = x.rows();
    let mut h = Matrix::zeros(d, d);
    for t in 0..x.cols() {
        for a in 0..d {
            for b in 0..d {
                h[(a, b)] += lambda[t] * x[(a, t)] * x[(b, t)];
            }
        }
    }
    let mean = (0..d).map(|i| h[(i, i)]).sum::<f64>() / d as f64;
    for i in 0..d {
        h[(i, i)] += damping * mean;
    }
    h
}

/// Optimal-brain-quantization reference: quantize one column, spread the
/// error with the current inverse Hessian, then remove that column from
/// the inverse. `q` supplies the (static) group parameters.
pub fn obq_codes(w: &Matrix, h: &Matrix, q: &QuantizedTensor) -> Vec<i32> {
    let (m, d) = w.shape();
    let mut hinv = inverse(h);
    let mut work = w.clone();
    let mut codes = vec![0; m * d];
    for j in 0..d {
        let piv = hinv[(j, j)];
        for r in 0..m {
            let g = q.group_of(r, j);
            let code = q.encode(work[(r, j)], g);
            codes[r * d + j] = code;
            let err = work[(r, j)] - q.decode(code, g);
            for k in j + 1..d {
                work[(r, k)] -= err * hinv[(j, k)] / piv;
            }
        }
        let row: Vec<f64> = (0..d).map(|k| hinv[(j, k)]).collect();
        for a in 0..d {
            for b in 0..d {
                hinv[(a, b)] -= row[a] * row[b] / piv;
            }
        }
    }
    codes
}

/// `Σ_t λ_t ‖(W − Ŵ) x_t‖²`.
pub fn weighted_reconstruction(w: &Matrix, w_hat: &Matrix, x: &Matrix, lambda: &[f64]) -> f64 {
    let mut total = 0.0;
    for t in 0..x.cols() {
        let mut e = 0.0;
        for r in 0..w.rows() {
            let mut acc = 0.0;
            for c in 0..w.cols() {
                acc += (w[(r, c)] - w_hat[(r, c)]) * x[(c, t)];
            }
            e += acc * acc;
        }
        total += lambda[t] * e;
    }
    total
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for k in i..=j {
            out[idx[k]] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma).powi(2);
        vb += (rb[i] - mb).powi(2);
    }
    cov / (va * vb).sqrt()
}

pub fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

#[derive(Debug, Clone, Copy)]
pub enum CweFormat {
    /// Asymmetric row groups on the weight, activations untouched.
    WeightOnly { bits: u32, group: usize },
    /// Symmetric per-channel weight, symmetric per-token activation.
    WeightActivation { wbits: u32, abits: u32 },
}

/// Token-weighted equalization objective evaluated element by element.
pub fn cwe_error(w: &Matrix, x: &Matrix, e: &[f64], lambda: &[f64], fmt: CweFormat) -> f64 {
    let (m, d) = w.shape();
    let t = x.cols();
    let we: Vec<Vec<f64>> = (0..m)
        .map(|r| (0..d).map(|c| w[(r, c)] * e[c]).collect())
        .collect();
    let xe: Vec<Vec<f64>> = (0..d)
        .map(|c| (0..t).map(|i| x[(c, i)] / e[c]).collect())
        .collect();
    let (wq, xq) = match fmt {
        CweFormat::WeightOnly { bits, group } => (fake_quant_asymmetric(&we, bits, group), xe),
        CweFormat::WeightActivation { wbits, abits } => (
            fake_quant_symmetric(&we, wbits, m, |r, _| r),
            fake_quant_symmetric(&xe, abits, t, |_, c| c),
        ),
    };
    let mut total = 0.0;
    for i in 0..t {
        let mut err = 0.0;
        for r in 0..m {
            let mut a = 0.0;
            let mut b = 0.0;
            for c in 0..d {
                a += wq[r][c] * xq[c][i];
                b += w[(r, c)] * x[(c, i)];
            }
            err += (a - b) * (a - b);
        }
        total += lambda[i] * err;
    }
    total
}

/// `E(α)_c = max|X_c|^α / max|W_:,c|^(1−α)`, floored, normalized by the
/// geometric mean of its extremes; dead channels stay at 1.
pub fn cwe_candidate(w: &Matrix, x: &Matrix, alpha: f64) -> Vec<f64> {
    let d = w.cols();
    let mut e = vec![1.0; d];
    let mut live = Vec::new();
    for c in 0..d {
        let xm = (0..x.cols()).map(|i| x[(c, i)].abs()).fold(0.0, f64::max);
        let wm = (0..w.rows()).map(|r| w[(r, c)].abs()).fold(0.0, f64::max);
        if xm > 0.0 && wm > 0.0 {
            e[c] = (xm.powf(alpha) / wm.powf(1.0 - alpha)).max(1e-5);
            live.push(c);
        }
    }
    if let (Some(lo), Some(hi)) = (
        live.iter().map(|&c| e[c]).min_by(f64::total_cmp),
        live.iter().map(|&c| e[c]).max_by(f64::total_cmp),
    ) {
        let norm = (lo * hi).sqrt();
        for &c in &live {
            e[c] /= norm;
        }
    }
    e
}

/// Exhaustive winner: identity unless some grid point is strictly better;
/// among equal grid points the first (smallest α) wins.
pub fn cwe_best(
    w: &Matrix,
    x: &Matrix,
    lambda: &[f64],
    fmt: CweFormat,
    grid: usize,
) -> Option<f64> {
    let mut best = None;
    let mut best_err = cwe_error(w, x, &vec![1.0; w.cols()], lambda, fmt);
    for k in 0..grid {
        let alpha = k as f64 / (grid - 1) as f64;
        let err = cwe_error(w, x, &cwe_candidate(w, x, alpha), lambda, fmt);
        if err < best_err {
            best = Some(alpha);
            best_err = err;
        }
    }
    best
}

//! Trainable layers with hand-written forward/backward passes: linear,
//! layer norm, single/multi-head pre-norm residual attention, GELU and
//! cross-entropy.
//!
//! There is no autodiff graph. Each layer's `forward` returns the output
//! plus a cache of the activations its `backward` needs; `backward` takes
//! the cache and the output gradient, accumulates parameter gradients in
//! place and returns the input gradient. Callers own the ordering.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{softmax, Tensor, MASKED};

// ─── Parameters ──────────────────────────────────────────────────────────

/// One trainable tensor plus its gradient accumulator and AdamW state.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
    /// Weight decay applies only to genuine weight matrices, not to biases
    /// or norm gains.
    pub decay: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor, decay: bool) -> Param {
        let shape = value.shape().to_vec();
        Param {
            name: name.into(),
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            step: 0,
            value,
            decay,
        }
    }

    /// Weight matrix initialised uniformly in ±sqrt(6 / (fan_in + fan_out)).
    pub fn matrix(name: impl Into<String>, rows: usize, cols: usize, rng: &mut Rng) -> Param {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let mut t = Tensor::zeros(&[rows, cols]);
        for v in t.data_mut() {
            *v = rng.uniform(-limit, limit);
        }
        Param::new(name, t, true)
    }

    /// Bias vector (stored 1×len), zero-initialised, no weight decay.
    pub fn bias(name: impl Into<String>, len: usize) -> Param {
        Param::new(name, Tensor::zeros(&[1, len]), false)
    }

    /// Norm gain vector (stored 1×len), ones, no weight decay.
    pub fn gain(name: impl Into<String>, len: usize) -> Param {
        Param::new(name, Tensor::filled(&[1, len], 1.0), false)
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    /// Forget optimizer state (used when a new training stage starts).
    pub fn reset_moments(&mut self) {
        self.m.data_mut().fill(0.0);
        self.v.data_mut().fill(0.0);
        self.step = 0;
    }
}

// ─── Linear ──────────────────────────────────────────────────────────────

/// y = x W + b, applied row-wise. The building block of every MLP adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param, // d_in × d_out
    pub bias: Param,   // 1 × d_out
}

pub struct LinearCache {
    x: Tensor,
}

impl Linear {
    pub fn new(name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Linear {
        Linear {
            weight: Param::matrix(format!("{name}.weight"), d_in, d_out, rng),
            bias: Param::bias(format!("{name}.bias"), d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LinearCache)> {
        let mut y = x.matmul(&self.weight.value)?;
        let b = self.bias.value.row(0);
        for r in 0..y.rows() {
            for (v, bv) in y.row_mut(r).iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok((y, LinearCache { x: x.clone() }))
    }

    /// Accumulates dW = xᵀ dy and db = Σ_rows dy, returns dx = dy Wᵀ.
    pub fn backward(&mut self, cache: &LinearCache, dy: &Tensor) -> Result<Tensor> {
        let dw = cache.x.transpose().matmul(dy)?;
        self.weight.grad.add_assign(&dw)?;
        for r in 0..dy.rows() {
            for (g, d) in self.bias.grad.row_mut(0).iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        dy.matmul(&self.weight.value.transpose())
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ─── Layer norm ──────────────────────────────────────────────────────────

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer normalisation with learned gain and shift. Variance uses
/// 1/D normalisation plus epsilon 1e-5 inside the square root.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Param,  // 1 × d
    pub shift: Param, // 1 × d
}

pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(name: &str, d: usize) -> LayerNorm {
        LayerNorm {
            gain: Param::gain(format!("{name}.gain"), d),
            shift: Param::bias(format!("{name}.shift"), d),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        let d = x.cols();
        if d != self.gain.value.cols() {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: self.gain.value.shape().to_vec(),
            });
        }
        let mut y = Tensor::zeros(x.shape());
        let mut xhat = Tensor::zeros(x.shape());
        let mut inv_std = vec![0.0; x.rows()];
        let g = self.gain.value.row(0).to_vec();
        let s = self.shift.value.row(0).to_vec();
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r_inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = r_inv;
            for c in 0..d {
                let h = (row[c] - mean) * r_inv;
                xhat.row_mut(r)[c] = h;
                y.row_mut(r)[c] = g[c] * h + s[c];
            }
        }
        Ok((y, LayerNormCache { xhat, inv_std }))
    }

    /// dx_j = r · (dxh_j − mean(dxh) − x̂_j · mean(dxh ⊙ x̂)), dxh = dy ⊙ g.
    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Tensor) -> Result<Tensor> {
        let d = dy.cols();
        let mut dx = Tensor::zeros(dy.shape());
        let g = self.gain.value.row(0).to_vec();
        for r in 0..dy.rows() {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            let r_inv = cache.inv_std[r];
            let mut sum_dxh = 0.0;
            let mut sum_dxh_xh = 0.0;
            for c in 0..d {
                let dxh = dyr[c] * g[c];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh[c];
                self.gain.grad.row_mut(0)[c] += dyr[c] * xh[c];
                self.shift.grad.row_mut(0)[c] += dyr[c];
            }
            let mean_dxh = sum_dxh / d as f64;
            let mean_dxh_xh = sum_dxh_xh / d as f64;
            for c in 0..d {
                let dxh = dyr[c] * g[c];
                dx.row_mut(r)[c] = r_inv * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
            }
        }
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gain, &self.shift]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gain, &mut self.shift]
    }
}

// ─── Attention ───────────────────────────────────────────────────────────

/// Pre-norm residual self-attention: y = x + Attn(LN(x)).
///
/// Q/K/V/O projections carry no bias. `heads` must divide the width; the
/// per-head scale is 1/sqrt(d/heads). With `causal` set, position t attends
/// to positions 0..=t only.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub ln: LayerNorm,
    pub wq: Param,
    pub wk: Param,
    pub wv: Param,
    pub wo: Param,
    pub heads: usize,
    pub causal: bool,
}

pub struct AttentionCache {
    ln: LayerNormCache,
    n: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Softmax weights per head, each T×T.
    attn: Vec<Tensor>,
    z: Tensor,
}

impl AttentionBlock {
    pub fn new(name: &str, d: usize, heads: usize, causal: bool, rng: &mut Rng) -> AttentionBlock {
        assert!(heads >= 1 && d % heads == 0, "width {d} not divisible by {heads} heads");
        AttentionBlock {
            ln: LayerNorm::new(&format!("{name}.ln"), d),
            wq: Param::matrix(format!("{name}.wq"), d, d, rng),
            wk: Param::matrix(format!("{name}.wk"), d, d, rng),
            wv: Param::matrix(format!("{name}.wv"), d, d, rng),
            wo: Param::matrix(format!("{name}.wo"), d, d, rng),
            heads,
            causal,
        }
    }

    pub fn width(&self) -> usize {
        self.wq.value.rows()
    }

    fn head_cols(t: &Tensor, head: usize, dh: usize) -> Tensor {
        let mut out = Tensor::zeros(&[t.rows(), dh]);
        for r in 0..t.rows() {
            out.row_mut(r)
                .copy_from_slice(&t.row(r)[head * dh..(head + 1) * dh]);
        }
        out
    }

    fn add_head_cols(dst: &mut Tensor, src: &Tensor, head: usize, dh: usize) {
        for r in 0..src.rows() {
            for c in 0..dh {
                dst.row_mut(r)[head * dh + c] += src.at(r, c);
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, AttentionCache)> {
        let d = self.width();
        if x.cols() != d {
            return Err(Error::ShapeMismatch {
                op: "attention_block",
                lhs: x.shape().to_vec(),
                rhs: self.wq.value.shape().to_vec(),
            });
        }
        let t = x.rows();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let (n, ln_cache) = self.ln.forward(x)?;
        let q = n.matmul(&self.wq.value)?;
        let k = n.matmul(&self.wk.value)?;
        let v = n.matmul(&self.wv.value)?;

        let mut z = Tensor::zeros(&[t, d]);
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = Self::head_cols(&q, h, dh);
            let kh = Self::head_cols(&k, h, dh);
            let vh = Self::head_cols(&v, h, dh);
            let mut scores = qh.matmul(&kh.transpose())?;
            scores.scale(scale);
            if self.causal {
                for i in 0..t {
                    for j in (i + 1)..t {
                        scores.row_mut(i)[j] = MASKED;
                    }
                }
            }
            let mut a = Tensor::zeros(&[t, t]);
            for i in 0..t {
                let p = softmax(scores.row(i))?;
                a.row_mut(i).copy_from_slice(&p);
            }
            let zh = a.matmul(&vh)?;
            Self::add_head_cols(&mut z, &zh, h, dh);
            attn.push(a);
        }
        let o = z.matmul(&self.wo.value)?;
        let mut y = x.clone();
        y.add_assign(&o)?;
        Ok((
            y,
            AttentionCache {
                ln: ln_cache,
                n,
                q,
                k,
                v,
                attn,
                z,
            },
        ))
    }

    pub fn backward(&mut self, cache: &AttentionCache, dy: &Tensor) -> Result<Tensor> {
        let d = self.width();
        let t = dy.rows();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        // Output projection: o = z Wo.
        let dwo = cache.z.transpose().matmul(dy)?;
        self.wo.grad.add_assign(&dwo)?;
        let dz = dy.matmul(&self.wo.value.transpose())?;

        let mut dq = Tensor::zeros(&[t, d]);
        let mut dk = Tensor::zeros(&[t, d]);
        let mut dv = Tensor::zeros(&[t, d]);
        for h in 0..self.heads {
            let qh = Self::head_cols(&cache.q, h, dh);
            let kh = Self::head_cols(&cache.k, h, dh);
            let vh = Self::head_cols(&cache.v, h, dh);
            let dzh = Self::head_cols(&dz, h, dh);
            let a = &cache.attn[h];

            let da = dzh.matmul(&vh.transpose())?;
            let dvh = a.transpose().matmul(&dzh)?;

            // Softmax backward per row; masked positions have a == 0 and
            // stay at gradient 0, so the causal structure is preserved.
            let mut ds = Tensor::zeros(&[t, t]);
            for i in 0..t {
                let ar = a.row(i);
                let dar = da.row(i);
                let dot: f64 = ar.iter().zip(dar).map(|(av, dv)| av * dv).sum();
                for j in 0..t {
                    ds.row_mut(i)[j] = ar[j] * (dar[j] - dot) * scale;
                }
            }

            let dqh = ds.matmul(&kh)?;
            let dkh = ds.transpose().matmul(&qh)?;
            Self::add_head_cols(&mut dq, &dqh, h, dh);
            Self::add_head_cols(&mut dk, &dkh, h, dh);
            Self::add_head_cols(&mut dv, &dvh, h, dh);
        }

        let dwq = cache.n.transpose().matmul(&dq)?;
        let dwk = cache.n.transpose().matmul(&dk)?;
        let dwv = cache.n.transpose().matmul(&dv)?;
        self.wq.grad.add_assign(&dwq)?;
        self.wk.grad.add_assign(&dwk)?;
        self.wv.grad.add_assign(&dwv)?;

        let mut dn = dq.matmul(&self.wq.value.transpose())?;
        dn.add_assign(&dk.matmul(&self.wk.value.transpose())?)?;
        dn.add_assign(&dv.matmul(&self.wv.value.transpose())?)?;

        let mut dx = self.ln.backward(&cache.ln, &dn)?;
        dx.add_assign(dy)?; // residual path
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.ln.params();
        p.extend([&self.wq, &self.wk, &self.wv, &self.wo]);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.ln.params_mut();
        p.extend([&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]);
        p
    }
}

// ─── Pointwise nonlinearity ──────────────────────────────────────────────

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

// ─── Cross-entropy ───────────────────────────────────────────────────────

/// Stable cross-entropy of a logit vector against an integer label.
/// Returns the loss and the logit gradient (softmax(logits) − one-hot).
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::IndexOutOfRange {
            what: "class label",
            index: label,
            bound: logits.len(),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum_exp.ln();
    let loss = lse - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|v| (v - max).exp() / sum_exp).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{central_diff, max_rel_err};

    fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        t
    }

    /// Scalar probe loss: L = Σ out ⊙ R for a fixed random R, so dOut = R.
    fn probe(out: &Tensor, r: &Tensor) -> f64 {
        out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn linear_identity_weights_pass_input_through() {
        let mut rng = Rng::new(0);
        let mut lin = Linear::new("t", 3, 3, &mut rng);
        lin.weight.value = Tensor::from_vec(
            &[3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        );
        let x = rand_tensor(&[4, 3], &mut rng);
        let (y, _) = lin.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn linear_zero_input_yields_bias_rows() {
        let mut rng = Rng::new(1);
        let mut lin = Linear::new("t", 2, 4, &mut rng);
        lin.bias.value = Tensor::from_vec(&[1, 4], vec![0.1, -0.2, 0.3, 0.4]);
        let (y, _) = lin.forward(&Tensor::zeros(&[3, 2])).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), lin.bias.value.row(0));
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = Rng::new(2);
        for round in 0..5 {
            let mut lin = Linear::new("t", 3, 2, &mut rng);
            let x = rand_tensor(&[4, 3], &mut rng);
            let r = rand_tensor(&[4, 2], &mut rng);

            let (y, cache) = lin.forward(&x).unwrap();
            let _ = y;
            let dx = lin.backward(&cache, &r).unwrap();

            // d/dx
            let num_dx = central_diff(
                |vals| {
                    let xs = Tensor::from_vec(&[4, 3], vals.to_vec());
                    probe(&lin.forward(&xs).unwrap().0, &r)
                },
                x.data(),
                1e-5,
            );
            assert!(
                max_rel_err(dx.data(), &num_dx) < 1e-6,
                "round {round}: dx err too large"
            );

            // d/dW
            let w0 = lin.weight.value.clone();
            let num_dw = central_diff(
                |vals| {
                    let mut l2 = lin.clone();
                    l2.weight.value = Tensor::from_vec(&[3, 2], vals.to_vec());
                    probe(&l2.forward(&x).unwrap().0, &r)
                },
                w0.data(),
                1e-5,
            );
            assert!(max_rel_err(lin.weight.grad.data(), &num_dw) < 1e-6);

            // d/db
            let b0 = lin.bias.value.clone();
            let num_db = central_diff(
                |vals| {
                    let mut l2 = lin.clone();
                    l2.bias.value = Tensor::from_vec(&[1, 2], vals.to_vec());
                    probe(&l2.forward(&x).unwrap().0, &r)
                },
                b0.data(),
                1e-5,
            );
            assert!(max_rel_err(lin.bias.grad.data(), &num_db) < 1e-6);
        }
    }

    #[test]
    fn layer_norm_constant_row_maps_to_shift() {
        let mut ln = LayerNorm::new("t", 4);
        ln.shift.value = Tensor::from_vec(&[1, 4], vec![0.5, -0.5, 1.0, 2.0]);
        let x = Tensor::filled(&[2, 4], 3.7);
        let (y, _) = ln.forward(&x).unwrap();
        for r in 0..2 {
            for c in 0..4 {
                // Constant rows have zero variance: x̂ = 0, y = shift.
                assert!((y.at(r, c) - ln.shift.value.at(0, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn layer_norm_unit_gain_normalises_two_point_row() {
        let ln = LayerNorm::new("t", 2);
        let x = Tensor::from_vec(&[1, 2], vec![1.0, -1.0]);
        let (y, _) = ln.forward(&x).unwrap();
        // Variance is exactly 1, so output is ±1 up to the epsilon correction.
        assert!((y.at(0, 0) - 1.0).abs() < 1e-4);
        assert!((y.at(0, 1) + 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = Rng::new(3);
        for _ in 0..5 {
            let mut ln = LayerNorm::new("t", 5);
            ln.gain.value = rand_tensor(&[1, 5], &mut rng);
            ln.shift.value = rand_tensor(&[1, 5], &mut rng);
            let x = rand_tensor(&[3, 5], &mut rng);
            let r = rand_tensor(&[3, 5], &mut rng);

            let (_, cache) = ln.forward(&x).unwrap();
            let dx = ln.backward(&cache, &r).unwrap();

            let num_dx = central_diff(
                |vals| {
                    let xs = Tensor::from_vec(&[3, 5], vals.to_vec());
                    probe(&ln.forward(&xs).unwrap().0, &r)
                },
                x.data(),
                1e-5,
            );
            assert!(max_rel_err(dx.data(), &num_dx) < 1e-5);

            let num_dg = central_diff(
                |vals| {
                    let mut l2 = ln.clone();
                    l2.gain.value = Tensor::from_vec(&[1, 5], vals.to_vec());
                    probe(&l2.forward(&x).unwrap().0, &r)
                },
                ln.gain.value.data(),
                1e-5,
            );
            assert!(max_rel_err(ln.gain.grad.data(), &num_dg) < 1e-5);
        }
    }

    #[test]
    fn attention_single_token_reduces_to_value_path() {
        // With T=1 the attention weight is exactly 1, so
        // y = x + LN(x) · Wv · Wo.
        let mut rng = Rng::new(4);
        let blk = AttentionBlock::new("t", 4, 1, false, &mut rng);
        let x = rand_tensor(&[1, 4], &mut rng);
        let (y, _) = blk.forward(&x).unwrap();

        let (n, _) = blk.ln.forward(&x).unwrap();
        let manual = n
            .matmul(&blk.wv.value)
            .unwrap()
            .matmul(&blk.wo.value)
            .unwrap();
        for c in 0..4 {
            assert!((y.at(0, c) - (x.at(0, c) + manual.at(0, c))).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_mask_blocks_gradient_from_future_tokens() {
        let mut rng = Rng::new(5);
        let mut blk = AttentionBlock::new("t", 4, 1, true, &mut rng);
        let x = rand_tensor(&[5, 4], &mut rng);
        let (_, cache) = blk.forward(&x).unwrap();

        // Probe position t=2: gradient w.r.t. tokens 3, 4 must be exactly 0.
        let mut dy = Tensor::zeros(&[5, 4]);
        for c in 0..4 {
            dy.row_mut(2)[c] = 1.0;
        }
        let dx = blk.backward(&cache, &dy).unwrap();
        for r in 3..5 {
            for c in 0..4 {
                assert_eq!(dx.at(r, c), 0.0, "future token {r} leaked gradient");
            }
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = Rng::new(6);
        for &(heads, causal) in &[(1usize, false), (1, true), (2, true)] {
            let mut blk = AttentionBlock::new("t", 4, heads, causal, &mut rng);
            let x = rand_tensor(&[3, 4], &mut rng);
            let r = rand_tensor(&[3, 4], &mut rng);

            let (_, cache) = blk.forward(&x).unwrap();
            let dx = blk.backward(&cache, &r).unwrap();

            let num_dx = central_diff(
                |vals| {
                    let xs = Tensor::from_vec(&[3, 4], vals.to_vec());
                    probe(&blk.forward(&xs).unwrap().0, &r)
                },
                x.data(),
                1e-5,
            );
            assert!(
                max_rel_err(dx.data(), &num_dx) < 1e-5,
                "heads={heads} causal={causal}: dx mismatch"
            );

            for (pi, name) in ["wq", "wk", "wv", "wo"].iter().enumerate() {
                let pick = |b: &AttentionBlock| match pi {
                    0 => b.wq.value.clone(),
                    1 => b.wk.value.clone(),
                    2 => b.wv.value.clone(),
                    _ => b.wo.value.clone(),
                };
                let analytic = match pi {
                    0 => blk.wq.grad.clone(),
                    1 => blk.wk.grad.clone(),
                    2 => blk.wv.grad.clone(),
                    _ => blk.wo.grad.clone(),
                };
                let w0 = pick(&blk);
                let num = central_diff(
                    |vals| {
                        let mut b2 = blk.clone();
                        let t = Tensor::from_vec(&[4, 4], vals.to_vec());
                        match pi {
                            0 => b2.wq.value = t,
                            1 => b2.wk.value = t,
                            2 => b2.wv.value = t,
                            _ => b2.wo.value = t,
                        }
                        probe(&b2.forward(&x).unwrap().0, &r)
                    },
                    w0.data(),
                    1e-5,
                );
                assert!(
                    max_rel_err(analytic.data(), &num) < 1e-5,
                    "heads={heads} causal={causal}: {name} mismatch"
                );
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_give_ln_n() {
        let (loss, _) = cross_entropy(&[0.0, 0.0, 0.0], 1).unwrap();
        assert!((loss - 1.0986122886681098).abs() < 1e-12); // ln 3
    }

    #[test]
    fn cross_entropy_confident_correct_logit_is_near_zero() {
        let (loss, _) = cross_entropy(&[50.0, 0.0, 0.0], 0).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range_is_an_index_error() {
        match cross_entropy(&[0.0, 0.0], 2) {
            Err(Error::IndexOutOfRange { index: 2, bound: 2, .. }) => {}
            other => panic!("expected index error, got {other:?}"),
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = Rng::new(7);
        for _ in 0..5 {
            let logits: Vec<f64> = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let label = rng.below(5);
            let (_, grad) = cross_entropy(&logits, label).unwrap();
            let num = central_diff(
                |vals| cross_entropy(vals, label).unwrap().0,
                &logits,
                1e-5,
            );
            assert!(max_rel_err(&grad, &num) < 1e-6);
        }
    }

    #[test]
    fn gelu_derivative_matches_finite_differences() {
        for &x in &[-2.0, -0.5, 0.0, 0.3, 1.7] {
            let num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((gelu_prime(x) - num).abs() < 1e-8);
        }
    }
}

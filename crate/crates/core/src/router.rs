//! Expert routing: mean-pool the general encoder's features, apply a linear
//! gate, pick the argmax expert.
//!
//! The generic gate form Softmax(TopK(x·W)) lives here too; hard routing is
//! its K=1 specialization. W starts at zero (a fresh router routes every
//! image to expert 0 under the lowest-index tie rule) and is trained in
//! stage 1 as a plain 3-class classifier over pooled features.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::nn::{cross_entropy, Param};
use crate::optim::{adamw_step, OptimizerConfig};
use crate::rng::Rng;
use crate::tensor::{softmax, Tensor, MASKED};
use crate::vision::FeatureMap;

static GATE_PRODUCTS: AtomicU64 = AtomicU64::new(0);

/// Number of D×N gate products computed by this process so far.
pub fn gate_products() -> u64 {
    GATE_PRODUCTS.load(Ordering::Relaxed)
}

/// Index of a vision expert: 0 = general, 1 = formula, 2 = chart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ExpertId(pub usize);

impl std::fmt::Display for ExpertId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "expert {}", self.0)
    }
}

/// Linear gate W: D×N with an optional bias (off by default — the routing
/// equation is a bare matrix product).
#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    pub w: Param,
    pub bias: Option<Param>,
}

impl Router {
    pub fn new(d: usize, n: usize, with_bias: bool) -> Router {
        Router {
            w: Param::new("router.w", Tensor::zeros(&[d, n]), true),
            bias: with_bias.then(|| Param::bias("router.bias", n)),
        }
    }

    pub fn d(&self) -> usize {
        self.w.value.rows()
    }

    pub fn experts(&self) -> usize {
        self.w.value.cols()
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = vec![&self.w];
        if let Some(b) = &self.bias {
            p.push(b);
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = vec![&mut self.w];
        if let Some(b) = &mut self.bias {
            p.push(b);
        }
        p
    }
}

/// Arithmetic mean over the token axis, summed in ascending token order.
pub fn mean_pool(fmap: &FeatureMap) -> Vec<f64> {
    let t = fmap.token_count();
    let mut out = vec![0.0; fmap.width];
    for i in 0..t {
        for (acc, v) in out.iter_mut().zip(fmap.tokens.row(i)) {
            *acc += v;
        }
    }
    for acc in &mut out {
        *acc /= t as f64;
    }
    out
}

/// One D×N product: logits = f_avg·W (+ bias when present).
pub fn route_logits(router: &Router, f_avg: &[f64]) -> Result<Vec<f64>> {
    if f_avg.len() != router.d() {
        return Err(Error::ShapeMismatch {
            op: "route_logits",
            lhs: vec![f_avg.len()],
            rhs: router.w.value.shape().to_vec(),
        });
    }
    GATE_PRODUCTS.fetch_add(1, Ordering::Relaxed);
    let n = router.experts();
    let mut logits = vec![0.0; n];
    for (i, &x) in f_avg.iter().enumerate() {
        for (l, w) in logits.iter_mut().zip(router.w.value.row(i)) {
            *l += x * w;
        }
    }
    if let Some(b) = &router.bias {
        for (l, bv) in logits.iter_mut().zip(b.value.row(0)) {
            *l += bv;
        }
    }
    Ok(logits)
}

/// Argmax over expert logits; ties break toward the lowest index.
pub fn select_expert(logits: &[f64]) -> Result<ExpertId> {
    if logits.is_empty() {
        return Err(Error::Routing("empty logit vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Routing(format!("non-finite logits {logits:?}")));
    }
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    Ok(ExpertId(best))
}

/// Generic top-K gate: softmax over the K largest logits (ties toward lower
/// index), all other entries exactly 0.
pub fn gate(router: &Router, x: &[f64], k: usize) -> Result<Vec<f64>> {
    let n = router.experts();
    if k == 0 || k > n {
        return Err(Error::Config(format!(
            "gate: K={k} out of range for {n} experts"
        )));
    }
    let logits = route_logits(router, x)?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Routing(format!("non-finite logits {logits:?}")));
    }
    // Rank indices by (logit desc, index asc) and mask everything below K.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    let mut masked = vec![MASKED; n];
    for &i in &order[..k] {
        masked[i] = logits[i];
    }
    softmax(&masked)
}

/// Cross-entropy of the routing classifier on one pooled feature vector.
/// Returns the loss plus gradients for W, bias, and the input.
pub fn logit_loss_grad(
    router: &Router,
    f_avg: &[f64],
    label: ExpertId,
) -> Result<(f64, Tensor, Vec<f64>, Vec<f64>)> {
    let logits = route_logits(router, f_avg)?;
    let (loss, dlogits) = cross_entropy(&logits, label.0)?;
    let d = router.d();
    let n = router.experts();
    let mut dw = Tensor::zeros(&[d, n]);
    for i in 0..d {
        for j in 0..n {
            dw.row_mut(i)[j] = f_avg[i] * dlogits[j];
        }
    }
    let mut dx = vec![0.0; d];
    for i in 0..d {
        dx[i] = router
            .w
            .value
            .row(i)
            .iter()
            .zip(&dlogits)
            .map(|(w, g)| w * g)
            .sum();
    }
    Ok((loss, dw, dlogits, dx))
}

/// Stage-1 training: minimize cross-entropy of `route_logits` against the
/// domain labels with AdamW. Batches are drawn with replacement from the
/// provided RNG. Returns the per-step loss trace.
pub fn train_router(
    router: &mut Router,
    features: &[Vec<f64>],
    labels: &[ExpertId],
    steps: usize,
    batch_size: usize,
    opt: &OptimizerConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Config(format!(
            "train_router: {} features vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    opt.validate()?;
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut loss_sum = 0.0;
        for _ in 0..batch_size {
            let i = rng.below(features.len());
            let (loss, dw, db, _) = logit_loss_grad(router, &features[i], labels[i])?;
            loss_sum += loss;
            router.w.grad.add_assign(&dw)?;
            if let Some(b) = &mut router.bias {
                for (g, d) in b.grad.row_mut(0).iter_mut().zip(&db) {
                    *g += d;
                }
            }
        }
        let loss = loss_sum / batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                stage: "router".into(),
                step,
            });
        }
        let scale = 1.0 / batch_size as f64;
        for p in router.params_mut() {
            p.grad.scale(scale);
            adamw_step(p, opt)?;
            p.zero_grad();
        }
        trace.push(loss);
    }
    Ok(trace)
}

/// Fraction of (feature, label) pairs the router classifies correctly.
pub fn routing_accuracy(router: &Router, features: &[Vec<f64>], labels: &[ExpertId]) -> Result<f64> {
    let mut hits = 0usize;
    for (f, &l) in features.iter().zip(labels) {
        if select_expert(&route_logits(router, f)?)? == l {
            hits += 1;
        }
    }
    Ok(hits as f64 / features.len().max(1) as f64)
}

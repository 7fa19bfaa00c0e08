//! Per-expert adapters: a 2-layer MLP with a GELU between, mapping each
//! expert's feature width D_i into the decoder embedding width D_LLM.
//! The hidden width equals D_LLM. One adapter per expert, no sharing —
//! only the adapter of the routed expert runs for a given image.

use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_prime, Linear, LinearCache, Param};
use crate::rng::Rng;
use crate::router::ExpertId;
use crate::tensor::Tensor;
use crate::vision::FeatureMap;

#[derive(Debug, Clone)]
pub struct Adapter {
    pub expert: ExpertId,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Forward intermediates needed for the backward pass.
pub struct AdapterCache {
    fc1: LinearCache,
    pre_act: Tensor,
    fc2: LinearCache,
}

impl Adapter {
    pub fn new(expert: ExpertId, d_in: usize, d_llm: usize, rng: &mut Rng) -> Adapter {
        let name = format!("adapter.{}", expert.0);
        Adapter {
            expert,
            fc1: Linear::new(&format!("{name}.fc1"), d_in, d_llm, rng),
            fc2: Linear::new(&format!("{name}.fc2"), d_llm, d_llm, rng),
        }
    }

    pub fn d_in(&self) -> usize {
        self.fc1.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.fc2.d_out()
    }

    /// tokens: T×D_i → T×D_LLM. Token count is preserved.
    pub fn forward(&self, tokens: &Tensor) -> Result<(Tensor, AdapterCache)> {
        if tokens.cols() != self.d_in() {
            return Err(Error::ShapeMismatch {
                op: "adapter.forward",
                lhs: tokens.shape().to_vec(),
                rhs: vec![self.d_in(), self.fc2.d_out()],
            });
        }
        let (pre_act, fc1) = self.fc1.forward(tokens)?;
        let mut hidden = pre_act.clone();
        for v in hidden.data_mut() {
            *v = gelu(*v);
        }
        let (out, fc2) = self.fc2.forward(&hidden)?;
        Ok((out, AdapterCache { fc1, pre_act, fc2 }))
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the
    /// input tokens.
    pub fn backward(&mut self, cache: &AdapterCache, d_out: &Tensor) -> Result<Tensor> {
        let d_hidden = self.fc2.backward(&cache.fc2, d_out)?;
        let mut d_pre = d_hidden;
        for (g, &z) in d_pre.data_mut().iter_mut().zip(cache.pre_act.data()) {
            *g *= gelu_prime(z);
        }
        self.fc1.backward(&cache.fc1, &d_pre)
    }

    /// Convenience wrapper taking a feature map and returning one with the
    /// same grid but D_LLM-wide tokens.
    pub fn adapt(&self, fmap: &FeatureMap) -> Result<FeatureMap> {
        let (tokens, _) = self.forward(&fmap.tokens)?;
        Ok(FeatureMap::new(fmap.grid_h, fmap.grid_w, tokens))
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.fc1.params_mut();
        p.extend(self.fc2.params_mut());
        p
    }
}

/// One adapter per expert, ordered by expert index. Widths come in as
/// (expert, post-reduction feature width) pairs.
pub fn build_adapters(
    widths: &[(ExpertId, usize)],
    d_llm: usize,
    rng: &mut Rng,
) -> Result<Vec<Adapter>> {
    let mut adapters: Vec<Adapter> = Vec::with_capacity(widths.len());
    for &(expert, d_in) in widths {
        if adapters.iter().any(|a| a.expert == expert) {
            return Err(Error::Config(format!(
                "build_adapters: duplicate adapter for {expert}"
            )));
        }
        adapters.push(Adapter::new(expert, d_in, d_llm, rng));
    }
    adapters.sort_by_key(|a| a.expert);
    Ok(adapters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{central_diff, max_rel_err};
    use crate::rng::Rng;

    fn rand_tensor(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Tensor::from_vec(&[rows, cols], data)
    }

    #[test]
    fn forward_preserves_token_count_and_projects_width() {
        let mut rng = Rng::new(40);
        let a = Adapter::new(ExpertId(1), 48, 64, &mut rng);
        for t in [1usize, 16, 256] {
            let x = rand_tensor(t, 48, &mut rng);
            let (y, _) = a.forward(&x).unwrap();
            assert_eq!(y.shape(), &[t, 64]);
        }
    }

    #[test]
    fn adapt_keeps_the_grid_shape() {
        let mut rng = Rng::new(41);
        let a = Adapter::new(ExpertId(2), 40, 64, &mut rng);
        let fmap = FeatureMap::new(4, 4, rand_tensor(16, 40, &mut rng));
        let out = a.adapt(&fmap).unwrap();
        assert_eq!((out.grid_h, out.grid_w, out.width), (4, 4, 64));
    }

    #[test]
    fn zero_weights_map_everything_to_zero() {
        let mut rng = Rng::new(42);
        let mut a = Adapter::new(ExpertId(0), 8, 6, &mut rng);
        for p in a.params_mut() {
            p.value.data_mut().fill(0.0);
        }
        let x = rand_tensor(3, 8, &mut rng);
        let (y, _) = a.forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_width_mismatch() {
        let mut rng = Rng::new(43);
        let a = Adapter::new(ExpertId(0), 8, 6, &mut rng);
        let x = rand_tensor(3, 7, &mut rng);
        assert!(matches!(
            a.forward(&x),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(44);
        let a = Adapter::new(ExpertId(0), 5, 4, &mut rng);
        let x = rand_tensor(3, 5, &mut rng);
        // Scalar objective: sum of squares of the output.
        let objective = |adapter: &Adapter, x: &Tensor| -> f64 {
            let (y, _) = adapter.forward(x).unwrap();
            y.data().iter().map(|v| v * v).sum::<f64>() * 0.5
        };

        let mut a2 = a.clone();
        let (y, cache) = a2.forward(&x).unwrap();
        let dx = a2.backward(&cache, &y).unwrap(); // d(0.5·Σy²)/dy = y

        let num_dx = central_diff(
            |vals| objective(&a, &Tensor::from_vec(&[3, 5], vals.to_vec())),
            x.data(),
            1e-5,
        );
        assert!(max_rel_err(dx.data(), &num_dx) < 1e-5);

        // Every parameter tensor.
        for idx in 0..a.params().len() {
            let analytic = a2.params()[idx].grad.clone();
            let base = a.params()[idx].value.clone();
            let num = central_diff(
                |vals| {
                    let mut probe = a.clone();
                    probe.params_mut()[idx]
                        .value
                        .data_mut()
                        .copy_from_slice(vals);
                    objective(&probe, &x)
                },
                base.data(),
                1e-5,
            );
            assert!(
                max_rel_err(analytic.data(), &num) < 1e-5,
                "param {idx} gradient mismatch"
            );
        }
    }

    #[test]
    fn build_adapters_orders_by_expert_and_sizes_inputs() {
        let mut rng = Rng::new(45);
        let adapters = build_adapters(
            &[(ExpertId(2), 40), (ExpertId(0), 128), (ExpertId(1), 48)],
            64,
            &mut rng,
        )
        .unwrap();
        let got: Vec<(usize, usize, usize)> = adapters
            .iter()
            .map(|a| (a.expert.0, a.d_in(), a.d_out()))
            .collect();
        assert_eq!(got, vec![(0, 128, 64), (1, 48, 64), (2, 40, 64)]);
    }

    #[test]
    fn build_adapters_rejects_duplicate_experts() {
        let mut rng = Rng::new(46);
        assert!(matches!(
            build_adapters(&[(ExpertId(0), 8), (ExpertId(0), 8)], 4, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn distinct_seeds_give_distinct_weights() {
        let a = Adapter::new(ExpertId(0), 8, 6, &mut Rng::new(1));
        let b = Adapter::new(ExpertId(0), 8, 6, &mut Rng::new(2));
        assert_ne!(a.fc1.weight.value, b.fc1.weight.value);
        // Same seed reproduces the same weights.
        let c = Adapter::new(ExpertId(0), 8, 6, &mut Rng::new(1));
        assert_eq!(a.fc1.weight.value, c.fc1.weight.value);
        assert_eq!(a.fc2.weight.value, c.fc2.weight.value);
    }
}

//! Static layer chains with cached activations.

use rand_chacha::ChaCha8Rng;

use super::layers::{build_layer, Layer, LayerSpec, Mode};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A feed-forward chain of layers sharing one [`ParamStore`].
///
/// Forward caches per-layer activations; backward walks the chain in reverse
/// and accumulates parameter gradients. A `Sequential` is single-threaded
/// during a forward/backward pair (the caches are mutable state), but whole
/// instances move freely between threads.
pub struct Sequential {
    prefix: String,
    specs: Vec<LayerSpec>,
    layers: Vec<Box<dyn Layer>>,
    forwarded: bool,
}

impl Sequential {
    /// Build the chain, registering parameters as `{prefix}.{index}.{param}`.
    pub fn from_specs(
        prefix: &str,
        specs: &[LayerSpec],
        params: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            layers.push(build_layer(spec, &format!("{prefix}.{i}"), params, rng)?);
        }
        Ok(Sequential {
            prefix: prefix.to_string(),
            specs: specs.to_vec(),
            layers,
            forwarded: false,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn forward(&mut self, x: &Tensor, params: &ParamStore, mode: Mode) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, params, mode)?;
        }
        self.forwarded = true;
        Ok(cur)
    }

    /// Backpropagate through the most recent forward. Returns the gradient
    /// w.r.t. the chain input.
    pub fn backward(&mut self, grad_out: &Tensor, params: &mut ParamStore) -> Result<Tensor> {
        if !self.forwarded {
            return Err(Error::NoCachedActivations);
        }
        let mut grad = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            grad = layer.backward(&grad, params)?;
        }
        Ok(grad)
    }

    /// Non-trainable buffers of every layer (BN running stats).
    pub fn buffers(&self) -> Vec<(String, Vec<f64>)> {
        self.layers.iter().flat_map(|l| l.buffers()).collect()
    }

    pub fn set_buffer(&mut self, name: &str, values: &[f64]) -> Result<()> {
        for layer in &mut self.layers {
            if layer.buffers().iter().any(|(n, _)| n == name) {
                return layer.set_buffer(name, values);
            }
        }
        Err(Error::Config(format!("no buffer named {name} in chain {}", self.prefix)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_chain_gradient_of_sum_is_batch_summed_input() {
        // loss = sum(output) for a single bias-free linear layer:
        // dL/dW[o, k] = sum_b x[b, k]
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let specs = [LayerSpec::Linear { in_dim: 3, out_dim: 2, bias: false }];
        let mut chain = Sequential::from_specs("net", &specs, &mut params, &mut rng).unwrap();
        let x = Tensor::from_values(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = chain.forward(&x, &params, Mode::Train).unwrap();
        let ones = Tensor::filled(y.shape(), 1.0);
        chain.backward(&ones, &mut params).unwrap();
        let dw = params.grad("net.0.w");
        for o in 0..2 {
            for k in 0..3 {
                let want = x.values()[k] + x.values()[3 + k];
                assert!((dw.values()[o * 3 + k] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let specs = [
            LayerSpec::Linear { in_dim: 4, out_dim: 4, bias: true },
            LayerSpec::Elu,
            LayerSpec::Linear { in_dim: 4, out_dim: 2, bias: true },
        ];
        let mut chain = Sequential::from_specs("net", &specs, &mut params, &mut rng).unwrap();
        let x = Tensor::filled(&[3, 4], 0.7);
        let y = chain.forward(&x, &params, Mode::Train).unwrap();
        chain.backward(&Tensor::zeros(y.shape()), &mut params).unwrap();
        for (_, p) in params.iter() {
            assert!(p.grad.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_without_forward_errors() {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let specs = [LayerSpec::Elu];
        let mut chain = Sequential::from_specs("net", &specs, &mut params, &mut rng).unwrap();
        assert!(matches!(
            chain.backward(&Tensor::zeros(&[1, 1]), &mut params),
            Err(Error::NoCachedActivations)
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let specs = [
            LayerSpec::Linear { in_dim: 3, out_dim: 3, bias: true },
            LayerSpec::Elu,
            LayerSpec::Softmax,
        ];
        let mut chain = Sequential::from_specs("net", &specs, &mut params, &mut rng).unwrap();
        let x = Tensor::from_values(&[1, 3], vec![0.1, -0.4, 0.9]).unwrap();
        let y1 = chain.forward(&x, &params, Mode::Eval).unwrap();
        let y2 = chain.forward(&x, &params, Mode::Eval).unwrap();
        assert_eq!(y1.values(), y2.values());
    }

    /// Central finite differences on every parameter entry and every input
    /// entry against the analytic backward pass, with loss = c . output for a
    /// fixed random c.
    fn fd_check_chain(specs: &[LayerSpec], input_shape: &[usize], seed: u64) -> f64 {
        use rand::Rng;
        let h = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut chain = Sequential::from_specs("g", specs, &mut params, &mut rng).unwrap();
        let n: usize = input_shape.iter().product();
        let x = Tensor::from_values(
            input_shape,
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let y = chain.forward(&x, &params, Mode::Train).unwrap();
        let c: Vec<f64> = (0..y.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let upstream = Tensor::from_values(y.shape(), c.clone()).unwrap();
        params.zero_grads();
        let dx = chain.backward(&upstream, &mut params).unwrap();

        let loss = |chain: &mut Sequential, params: &ParamStore, x: &Tensor| -> f64 {
            let y = chain.forward(x, params, Mode::Train).unwrap();
            y.values().iter().zip(&c).map(|(a, b)| a * b).sum()
        };

        let mut worst: f64 = 0.0;
        let names: Vec<String> = params.names().map(String::from).collect();
        for name in &names {
            let analytic = params.grad(name).values().to_vec();
            for idx in 0..analytic.len() {
                let orig = params.value(name).values()[idx];
                params.value_mut(name).values_mut()[idx] = orig + h;
                let lp = loss(&mut chain, &params, &x);
                params.value_mut(name).values_mut()[idx] = orig - h;
                let lm = loss(&mut chain, &params, &x);
                params.value_mut(name).values_mut()[idx] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let rel = (analytic[idx] - fd).abs() / fd.abs().max(1.0);
                worst = worst.max(rel);
            }
        }
        // restore the cache for input-side checks
        chain.forward(&x, &params, Mode::Train).unwrap();
        for idx in 0..x.numel() {
            let mut xp = x.clone();
            xp.values_mut()[idx] += h;
            let lp = loss(&mut chain, &params, &xp);
            let mut xm = x.clone();
            xm.values_mut()[idx] -= h;
            let lm = loss(&mut chain, &params, &xm);
            let fd = (lp - lm) / (2.0 * h);
            let rel = (dx.values()[idx] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn fd_gradients_conv_bn_elu_pool() {
        let specs = [
            LayerSpec::Conv3x3 { in_ch: 2, out_ch: 3 },
            LayerSpec::BatchNorm { channels: 3 },
            LayerSpec::Elu,
            LayerSpec::AvgPool2x2,
        ];
        let worst = fd_check_chain(&specs, &[2, 2, 4, 4], 11);
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn fd_gradients_gap_linear_softmax() {
        let specs = [
            LayerSpec::Conv3x3 { in_ch: 1, out_ch: 2 },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear { in_dim: 2, out_dim: 5, bias: true },
            LayerSpec::Softmax,
        ];
        let worst = fd_check_chain(&specs, &[3, 1, 4, 4], 12);
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn fd_gradients_projection_head_shape() {
        let specs = [
            LayerSpec::Linear { in_dim: 6, out_dim: 6, bias: true },
            LayerSpec::Elu,
            LayerSpec::Linear { in_dim: 6, out_dim: 4, bias: true },
            LayerSpec::L2Normalize,
        ];
        let worst = fd_check_chain(&specs, &[3, 6], 13);
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn fd_gradients_mha_layernorm() {
        let specs = [
            LayerSpec::MhaBlock { dim: 6, heads: 2, d_k: 3 },
            LayerSpec::MhaBlock { dim: 6, heads: 3, d_k: 2 },
            LayerSpec::LayerNorm { dim: 6 },
        ];
        let worst = fd_check_chain(&specs, &[2, 2, 6], 14);
        assert!(worst < 1e-4, "worst rel err {worst}");
    }
}

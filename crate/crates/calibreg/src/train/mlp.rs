//! Fully-connected network with rectifier activations, optional dropout on
//! the last hidden layer, and hand-written reverse-mode gradients.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Feed-forward network: `hidden` rectified layers followed by a linear
/// output layer. Hidden weights are He-initialized; the output layer starts
/// at zero so an untrained model emits the head's neutral parameters.
#[derive(Debug, Clone)]
pub(crate) struct Mlp {
    in_dim: usize,
    hidden: Vec<(Array2<f64>, Array1<f64>)>,
    output: (Array2<f64>, Array1<f64>),
    dropout_rate: f64,
}

/// Batch forward state retained for the backward pass.
pub(crate) struct ForwardCache {
    x: Array2<f64>,
    pre: Vec<Array2<f64>>,
    act: Vec<Array2<f64>>,
    mask: Option<Array2<f64>>,
    /// Raw linear outputs, one row per point.
    pub(crate) out: Array2<f64>,
}

impl Mlp {
    pub(crate) fn new(
        in_dim: usize,
        hidden_layers: usize,
        units: usize,
        out_dim: usize,
        dropout_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(hidden_layers >= 1, "at least one hidden layer");
        assert!(in_dim >= 1 && units >= 1 && out_dim >= 1);
        assert!((0.0..1.0).contains(&dropout_rate));
        let mut hidden = Vec::with_capacity(hidden_layers);
        let mut fan_in = in_dim;
        for _ in 0..hidden_layers {
            let scale = (2.0 / fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((units, fan_in), |_| {
                scale * rng.sample::<f64, _>(StandardNormal)
            });
            hidden.push((w, Array1::zeros(units)));
            fan_in = units;
        }
        let output = (Array2::zeros((out_dim, fan_in)), Array1::zeros(out_dim));
        Self {
            in_dim,
            hidden,
            output,
            dropout_rate,
        }
    }

    /// Inverted dropout mask for a batch of `n` rows: entries are 0 with
    /// probability `dropout_rate` and 1/(1-rate) otherwise, so activations
    /// keep their expectation and inference needs no rescaling.
    pub(crate) fn sample_dropout_mask(&self, n: usize, rng: &mut ChaCha8Rng) -> Option<Array2<f64>> {
        if self.dropout_rate == 0.0 {
            return None;
        }
        let units = self.hidden.last().unwrap().1.len();
        let keep = 1.0 - self.dropout_rate;
        Some(Array2::from_shape_fn((n, units), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        }))
    }

    /// Batch forward pass. `mask`, when given, multiplies the last hidden
    /// activation (training mode); pass `None` for inference.
    pub(crate) fn forward(&self, x: ArrayView2<f64>, mask: Option<Array2<f64>>) -> ForwardCache {
        assert_eq!(x.ncols(), self.in_dim, "feature dimension mismatch");
        let n_hidden = self.hidden.len();
        let mut pre_all = Vec::with_capacity(n_hidden);
        let mut act_all = Vec::with_capacity(n_hidden);
        let mut a = x.to_owned();
        for (l, (w, b)) in self.hidden.iter().enumerate() {
            let pre = a.dot(&w.t()) + b;
            let mut act = pre.mapv(|v| v.max(0.0));
            if l == n_hidden - 1 {
                if let Some(m) = &mask {
                    act *= m;
                }
            }
            pre_all.push(pre);
            a = act.clone();
            act_all.push(act);
        }
        let out = a.dot(&self.output.0.t()) + &self.output.1;
        ForwardCache {
            x: x.to_owned(),
            pre: pre_all,
            act: act_all,
            mask,
            out,
        }
    }

    /// Reverse pass: gradients of a scalar loss with respect to every weight
    /// and bias, given dL/d(raw outputs).
    pub(crate) fn backward(&self, cache: &ForwardCache, grad_out: &Array2<f64>) -> Grads {
        let n_hidden = self.hidden.len();
        let last_act = &cache.act[n_hidden - 1];
        let d_w_out = grad_out.t().dot(last_act);
        let d_b_out = grad_out.sum_axis(Axis(0));
        let mut upstream = grad_out.dot(&self.output.0);
        let mut hidden_grads = vec![None; n_hidden];
        for l in (0..n_hidden).rev() {
            if l == n_hidden - 1 {
                if let Some(m) = &cache.mask {
                    upstream *= m;
                }
            }
            upstream.zip_mut_with(&cache.pre[l], |g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
            let input = if l == 0 { &cache.x } else { &cache.act[l - 1] };
            hidden_grads[l] = Some((upstream.t().dot(input), upstream.sum_axis(Axis(0))));
            if l > 0 {
                upstream = upstream.dot(&self.hidden[l].0);
            }
        }
        Grads {
            hidden: hidden_grads.into_iter().map(|g| g.unwrap()).collect(),
            output: (d_w_out, d_b_out),
        }
    }

    pub(crate) fn param_count(&self) -> usize {
        self.hidden
            .iter()
            .map(|(w, b)| w.len() + b.len())
            .sum::<usize>()
            + self.output.0.len()
            + self.output.1.len()
    }

    /// Flattens all parameters (hidden layers in order, weights row-major
    /// then bias, output layer last) into one vector.
    pub(crate) fn params_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for (w, b) in &self.hidden {
            v.extend(w.iter());
            v.extend(b.iter());
        }
        v.extend(self.output.0.iter());
        v.extend(self.output.1.iter());
        v
    }

    /// Inverse of [`Mlp::params_vec`].
    pub(crate) fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count());
        let mut i = 0;
        for (w, b) in self.hidden.iter_mut() {
            for x in w.iter_mut() {
                *x = params[i];
                i += 1;
            }
            for x in b.iter_mut() {
                *x = params[i];
                i += 1;
            }
        }
        for x in self.output.0.iter_mut() {
            *x = params[i];
            i += 1;
        }
        for x in self.output.1.iter_mut() {
            *x = params[i];
            i += 1;
        }
    }

    /// Adds zero-mean noise to every parameter (including the zero-initialized
    /// output layer); lets gradient checks probe generic points.
    #[cfg(test)]
    pub(crate) fn perturb(&mut self, scale: f64, rng: &mut ChaCha8Rng) {
        let mut p = self.params_vec();
        for x in p.iter_mut() {
            *x += scale * rng.sample::<f64, _>(StandardNormal);
        }
        self.set_params(&p);
    }
}

/// Parameter gradients in the same layout as the network.
pub(crate) struct Grads {
    hidden: Vec<(Array2<f64>, Array1<f64>)>,
    output: (Array2<f64>, Array1<f64>),
}

impl Grads {
    /// Flattens in the exact order of [`Mlp::params_vec`].
    pub(crate) fn into_vec(self) -> Vec<f64> {
        let mut v = Vec::new();
        for (w, b) in &self.hidden {
            v.extend(w.iter());
            v.extend(b.iter());
        }
        v.extend(self.output.0.iter());
        v.extend(self.output.1.iter());
        v
    }
}

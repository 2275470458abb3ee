//! Differentiable sorting through pairwise-sigmoid soft ranks.
//!
//! The soft rank of z_i is rank_i = 1 + sum_{j != i} sigmoid(tau (z_i - z_j)),
//! which approaches the hard 1-based rank as tau grows. Soft order statistics
//! select each target rank i by a softmax over -tau (rank_j - i)^2 and
//! average the values under those weights. `tau = infinity` switches to exact
//! hard sorting (used at evaluation time); finite tau keeps every value's
//! gradient pathway alive. Both the ranks and the selection share one
//! temperature.

use crate::num::{sigmoid, sigmoid_deriv};

/// Forward state needed to backpropagate through the soft (or hard) sort.
pub(super) struct SortState {
    z: Vec<f64>,
    tau: f64,
    ranks: Vec<f64>,
    /// weights[i][j] = selection weight of z_j for target rank i + 1.
    weights: Vec<Vec<f64>>,
    values: Vec<f64>,
    /// Hard path: permutation with values[i] = z[perm[i]].
    hard_perm: Option<Vec<usize>>,
}

/// Soft order statistics of `z`: a differentiable estimate of the ascending
/// sort. Returns the estimates and the state for the backward pass.
pub(super) fn order_stats(z: &[f64], tau: f64) -> (Vec<f64>, SortState) {
    assert!(tau > 0.0, "sort temperature must be positive");
    let n = z.len();
    if tau.is_infinite() {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.sort_by(|&a, &b| z[a].partial_cmp(&z[b]).unwrap().then(a.cmp(&b)));
        let values: Vec<f64> = perm.iter().map(|&j| z[j]).collect();
        let state = SortState {
            z: z.to_vec(),
            tau,
            ranks: Vec::new(),
            weights: Vec::new(),
            values: values.clone(),
            hard_perm: Some(perm),
        };
        return (values, state);
    }

    let mut ranks = vec![1.0f64; n];
    for i in 0..n {
        for j in 0..n {
            if j != i {
                ranks[i] += sigmoid(tau * (z[i] - z[j]));
            }
        }
    }
    let mut weights = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let target = (i + 1) as f64;
        // Softmax over j of -tau (rank_j - target)^2, max-shifted.
        let mut logits: Vec<f64> = ranks.iter().map(|r| -tau * (r - target) * (r - target)).collect();
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let mut sum = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            sum += *l;
        }
        let mut value = 0.0;
        for (w, &zj) in logits.iter_mut().zip(z) {
            *w /= sum;
            value += *w * zj;
        }
        weights.push(logits);
        values.push(value);
    }
    let state = SortState {
        z: z.to_vec(),
        tau,
        ranks,
        weights,
        values: values.clone(),
        hard_perm: None,
    };
    (values, state)
}

/// Backward pass: given dL/d(order statistic i), returns dL/dz_j. The hard
/// path routes each gradient to the value that occupied the slot; the soft
/// path differentiates through both the selection weights and the ranks.
pub(super) fn order_stats_backward(state: &SortState, grad_out: &[f64]) -> Vec<f64> {
    let n = state.z.len();
    assert_eq!(grad_out.len(), n);
    let mut grad_z = vec![0.0f64; n];
    if let Some(perm) = &state.hard_perm {
        for (i, &j) in perm.iter().enumerate() {
            grad_z[j] += grad_out[i];
        }
        return grad_z;
    }

    // Direct value path: values_i = sum_j W_ij z_j.
    for (i, g) in grad_out.iter().enumerate() {
        for (j, w) in state.weights[i].iter().enumerate() {
            grad_z[j] += g * w * 1.0;
        }
    }
    // Selection path: dL/d(logit_ij) = g_i W_ij (z_j - values_i), and
    // logit_ij = -tau (rank_j - (i+1))^2 depends on z only through rank_j.
    let mut grad_rank = vec![0.0f64; n];
    for (i, g) in grad_out.iter().enumerate() {
        if *g == 0.0 {
            continue;
        }
        let target = (i + 1) as f64;
        for (j, gr) in grad_rank.iter_mut().enumerate() {
            let dl_dlogit = g * state.weights[i][j] * (state.z[j] - state.values[i]);
            *gr += dl_dlogit * (-2.0 * state.tau * (state.ranks[j] - target));
        }
    }
    // Rank path: rank_j = 1 + sum_{l != j} sigmoid(tau (z_j - z_l)).
    for j in 0..n {
        if grad_rank[j] == 0.0 {
            continue;
        }
        for l in 0..n {
            if l == j {
                continue;
            }
            let d = state.tau * sigmoid_deriv(state.tau * (state.z[j] - state.z[l]));
            grad_z[j] += grad_rank[j] * d;
            grad_z[l] -= grad_rank[j] * d;
        }
    }
    grad_z
}

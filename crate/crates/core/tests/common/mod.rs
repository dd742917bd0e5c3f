#![allow(dead_code)]

pub mod losses;

use drvidal_core::autodiff::Tensor;

/// Central-difference step.
pub const H: f64 = 1e-5;
/// Largest accepted relative error between analytic and numeric gradients.
pub const TOLERANCE: f64 = 1e-4;

/// Relative error with a floor so that gradients that are both near zero
/// compare by absolute difference.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error over every parameter entry. `params` must list the
/// tensors in the same order as `analytic`.
pub fn max_gradient_error<T: Clone>(
    model: &T,
    params: fn(&mut T) -> Vec<&mut Tensor>,
    loss: impl Fn(&T) -> f64,
    analytic: &[Tensor],
) -> f64 {
    let mut probe = model.clone();
    let shapes: Vec<Vec<usize>> = params(&mut probe).iter().map(|t| t.shape().to_vec()).collect();
    assert_eq!(shapes.len(), analytic.len(), "parameter and gradient counts differ");
    let mut worst: f64 = 0.0;
    for (p, shape) in shapes.iter().enumerate() {
        assert_eq!(shape.as_slice(), analytic[p].shape(), "gradient {p} has the wrong shape");
        for k in 0..analytic[p].len() {
            let mut plus = model.clone();
            params(&mut plus)[p].data_mut()[k] += H;
            let mut minus = model.clone();
            params(&mut minus)[p].data_mut()[k] -= H;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * H);
            worst = worst.max(relative_error(analytic[p].data()[k], numeric));
        }
    }
    worst
}

/// Adds small Gaussian noise to every parameter. Freshly initialized
/// networks have zero biases, which can put pre-activations exactly on a ReLU
/// kink where central differences disagree with any one-sided derivative.
pub fn jitter<T>(model: &mut T, params: fn(&mut T) -> Vec<&mut Tensor>, seed: u64) {
    use rand_distr::{Distribution, Normal};
    let mut rng = drvidal_core::rng::stream(seed, 1001);
    let normal = Normal::new(0.0, 0.1).unwrap();
    for t in params(model) {
        for v in t.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
}

/// Mixed continuous and binary covariates, `rows × 5`.
pub fn mixed_covariates(rows: usize, seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = drvidal_core::rng::stream(seed, 1000);
    let mut data = Vec::with_capacity(rows * 5);
    for _ in 0..rows {
        for j in 0..5 {
            data.push(if j < 3 { rng.random_range(-2.0..2.0) } else { f64::from(rng.random_bool(0.5)) });
        }
    }
    Tensor::matrix(rows, 5, data).unwrap()
}

/// Direct-enumeration metric oracles, written without the library helpers.
pub mod brute {
    pub fn pehe(tau: &[f64], pred: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..tau.len() {
            let d = tau[i] - pred[i];
            acc += d * d;
        }
        acc / tau.len() as f64
    }

    pub fn ate_error(tau: &[f64], pred: &[f64]) -> f64 {
        let n = tau.len() as f64;
        let (mut sp, mut st) = (0.0, 0.0);
        for i in 0..tau.len() {
            sp += pred[i];
            st += tau[i];
        }
        let d = sp / n - st / n;
        d * d
    }

    /// `1 - [P(treat) E(y | treat, t=1) + P(control) E(y | control, t=0)]`
    /// over the flagged rows, with empty cells contributing zero.
    pub fn policy_risk(y1: &[f64], y0: &[f64], t: &[f64], y: &[f64], e: &[bool]) -> f64 {
        let mut size = 0usize;
        // [group][0 = rows in group, 1 = matching rows], sums per group.
        let mut counts = [[0usize; 2]; 2];
        let mut sums = [0.0f64; 2];
        for i in 0..t.len() {
            if !e[i] {
                continue;
            }
            size += 1;
            let g = if y1[i] > y0[i] { 0 } else { 1 };
            counts[g][0] += 1;
            let matches = if g == 0 { t[i] == 1.0 } else { t[i] == 0.0 };
            if matches {
                counts[g][1] += 1;
                sums[g] += y[i];
            }
        }
        let mut value = 0.0;
        for g in 0..2 {
            if counts[g][1] > 0 {
                value += sums[g] / counts[g][1] as f64 * counts[g][0] as f64 / size as f64;
            }
        }
        1.0 - value
    }

    /// `|ATT - mean predicted effect on treated|` over flagged rows, or
    /// `None` when an arm is empty.
    pub fn att_error(y1: &[f64], y0: &[f64], t: &[f64], y: &[f64], e: &[bool]) -> Option<f64> {
        let (mut s1, mut n1, mut s0, mut n0, mut sp) = (0.0, 0usize, 0.0, 0usize, 0.0);
        for i in 0..t.len() {
            if !e[i] {
                continue;
            }
            if t[i] == 1.0 {
                s1 += y[i];
                n1 += 1;
                sp += y1[i] - y0[i];
            } else {
                s0 += y[i];
                n0 += 1;
            }
        }
        if n1 == 0 || n0 == 0 {
            return None;
        }
        let att = s1 / n1 as f64 - s0 / n0 as f64;
        Some((att - sp / n1 as f64).abs())
    }
}

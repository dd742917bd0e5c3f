//! Effect-estimation metrics.
//!
//! `ε_PEHE` and `ε_ATE` need ground-truth effects. Policy risk and ATT use
//! only factual outcomes but must be restricted to a randomized subsample.

use serde::{Deserialize, Serialize};

use crate::datagen::{validate_treatment, Dataset, OutcomeKind};
use crate::error::{Error, Result};

fn same_nonempty(op: &str, lens: &[usize]) -> Result<usize> {
    let n = lens[0];
    if lens.iter().any(|&l| l != n) {
        return Err(Error::invalid(format!("{op}: input lengths differ: {lens:?}")));
    }
    if n == 0 {
        return Err(Error::invalid(format!("{op}: empty input")));
    }
    Ok(n)
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// `(ε_PEHE, √ε_PEHE)`: mean squared difference of per-row effects.
pub fn pehe(true_effects: &[f64], predicted: &[f64]) -> Result<(f64, f64)> {
    let n = same_nonempty("pehe", &[true_effects.len(), predicted.len()])?;
    let e = true_effects.iter().zip(predicted).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
    Ok((e, e.sqrt()))
}

/// Signed difference of mean predicted and mean true effect.
fn ate_difference(true_effects: &[f64], predicted: &[f64]) -> Result<f64> {
    let n = same_nonempty("ate_error", &[true_effects.len(), predicted.len()])? as f64;
    Ok(predicted.iter().sum::<f64>() / n - true_effects.iter().sum::<f64>() / n)
}

/// `ε_ATE`: squared difference of the mean effects.
pub fn ate_error(true_effects: &[f64], predicted: &[f64]) -> Result<f64> {
    Ok(ate_difference(true_effects, predicted)?.powi(2))
}

/// Absolute difference of the mean effects.
pub fn ate_abs_error(true_effects: &[f64], predicted: &[f64]) -> Result<f64> {
    Ok(ate_difference(true_effects, predicted)?.abs())
}

/// Risk of the policy that treats exactly where `ŷ1 > ŷ0`, evaluated on the
/// rows flagged in `e`. A policy group with no matching-treatment rows
/// contributes zero.
pub fn policy_risk(y1_hat: &[f64], y0_hat: &[f64], t: &[f64], y: &[f64], e: &[bool]) -> Result<f64> {
    same_nonempty("policy_risk", &[y1_hat.len(), y0_hat.len(), t.len(), y.len(), e.len()])?;
    validate_treatment(t)?;
    let in_e: Vec<usize> = (0..t.len()).filter(|&i| e[i]).collect();
    if in_e.is_empty() {
        return Err(Error::invalid("policy_risk: no randomized rows"));
    }
    let size = in_e.len() as f64;
    let mut value = 0.0;
    for treat in [true, false] {
        let group: Vec<usize> = in_e.iter().copied().filter(|&i| (y1_hat[i] > y0_hat[i]) == treat).collect();
        let arm = if treat { 1.0 } else { 0.0 };
        if let Some(m) = mean(group.iter().filter(|&&i| t[i] == arm).map(|&i| y[i])) {
            value += m * group.len() as f64 / size;
        }
    }
    Ok(1.0 - value)
}

/// `(ATT, ε_ATT)` where ATT contrasts treated and control outcomes in the
/// randomized subsample and `ε_ATT` is its absolute distance from the mean
/// predicted effect over the treated randomized rows.
pub fn att_and_error(y1_hat: &[f64], y0_hat: &[f64], t: &[f64], y: &[f64], e: &[bool]) -> Result<(f64, f64)> {
    same_nonempty("att_and_error", &[y1_hat.len(), y0_hat.len(), t.len(), y.len(), e.len()])?;
    validate_treatment(t)?;
    let rows = |arm: f64| (0..t.len()).filter(move |&i| e[i] && t[i] == arm);
    let treated = mean(rows(1.0).map(|i| y[i]));
    let control = mean(rows(0.0).map(|i| y[i]));
    let (Some(treated), Some(control)) = (treated, control) else {
        return Err(Error::invalid("att_and_error: randomized treated or control group is empty"));
    };
    let att = treated - control;
    let predicted = mean(rows(1.0).map(|i| y1_hat[i] - y0_hat[i])).expect("treated group is non-empty");
    Ok((att, (att - predicted).abs()))
}

/// Every metric that the dataset's columns allow.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub sqrt_pehe: Option<f64>,
    pub ate_error: Option<f64>,
    pub ate_abs_error: Option<f64>,
    pub policy_risk: Option<f64>,
    pub att_error: Option<f64>,
    /// Mean squared error of the predicted factual outcome.
    pub factual_mse: f64,
    /// Mean predicted effect.
    pub ate_estimate: f64,
}

/// Scores predicted potential outcomes against a dataset. Policy risk needs
/// randomized flags and a binary outcome; ATT error needs randomized flags.
pub fn evaluate(ds: &Dataset, y0_hat: &[f64], y1_hat: &[f64]) -> Result<MetricSet> {
    let n = same_nonempty("evaluate", &[ds.n(), y0_hat.len(), y1_hat.len()])?;
    let effects: Vec<f64> = y1_hat.iter().zip(y0_hat).map(|(a, b)| a - b).collect();
    let mut m = MetricSet {
        factual_mse: (0..n)
            .map(|i| {
                let f = if ds.t[i] == 1.0 { y1_hat[i] } else { y0_hat[i] };
                (f - ds.y_f[i]).powi(2)
            })
            .sum::<f64>()
            / n as f64,
        ate_estimate: effects.iter().sum::<f64>() / n as f64,
        ..MetricSet::default()
    };
    if let Some(truth) = ds.true_effects() {
        m.sqrt_pehe = Some(pehe(&truth, &effects)?.1);
        m.ate_error = Some(ate_error(&truth, &effects)?);
        m.ate_abs_error = Some(ate_abs_error(&truth, &effects)?);
    }
    if let Some(e) = &ds.e {
        if e.iter().any(|&v| v) {
            if ds.outcome_kind == OutcomeKind::Binary {
                m.policy_risk = Some(policy_risk(y1_hat, y0_hat, &ds.t, &ds.y_f, e)?);
            }
            m.att_error = att_and_error(y1_hat, y0_hat, &ds.t, &ds.y_f, e).ok().map(|(_, err)| err);
        }
    }
    Ok(m)
}

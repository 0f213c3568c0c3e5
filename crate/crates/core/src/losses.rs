//! Class-imbalance losses over a minibatch of logits.
//!
//! All three losses share the same shape: per-sample `l_i` with a
//! class weight `w^{y_i}`, averaged over the `B` rows of the batch. The
//! returned gradient is `dE/dz` for the batch mean, so row `i` already
//! carries the `1/B` factor.
//!
//! Log-probabilities always come from a max-shifted log-softmax.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::ClassDistribution;
use crate::error::{Error, Result};

fn check_finite(values: impl IntoIterator<Item = f64>, what: &str) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(z: &[f64]) -> Result<Vec<f64>> {
    check_finite(z.iter().copied(), "logits")?;
    if z.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(z.iter().map(|v| v - max - log_sum).collect())
}

pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    Ok(log_softmax(z)?.into_iter().map(f64::exp).collect())
}

/// Inverse-frequency class weights `w^c = N / (N_c * C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::InvalidArgument(
                "class weights must be finite and positive".into(),
            ));
        }
        Ok(Self(weights))
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0; classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn class_weights(dist: &ClassDistribution) -> ClassWeights {
    let n = dist.total() as f64;
    let c = dist.num_classes() as f64;
    ClassWeights(
        dist.counts()
            .iter()
            .map(|&nc| n / (nc as f64 * c))
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Unweighted cross-entropy; the control.
    Ce,
    Wce,
    Wfl,
    Vs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Focal exponent for WFL, temperature exponent for VS.
    #[serde(default)]
    pub gamma: f64,
    /// Additive bias weight, VS only.
    #[serde(default)]
    pub tau: f64,
}

impl LossConfig {
    pub fn ce() -> Self {
        Self {
            kind: LossKind::Ce,
            gamma: 0.0,
            tau: 0.0,
        }
    }

    pub fn wce() -> Self {
        Self {
            kind: LossKind::Wce,
            gamma: 0.0,
            tau: 0.0,
        }
    }

    pub fn wfl(gamma: f64) -> Self {
        Self {
            kind: LossKind::Wfl,
            gamma,
            tau: 0.0,
        }
    }

    pub fn vs(gamma: f64, tau: f64) -> Self {
        Self {
            kind: LossKind::Vs,
            gamma,
            tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "loss.gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "loss.tau must be >= 0, got {}",
                self.tau
            )));
        }
        Ok(())
    }

    /// Evaluates the configured loss. `weights` is ignored for CE.
    pub fn evaluate(
        &self,
        logits: ArrayView2<f64>,
        targets: &[usize],
        weights: &ClassWeights,
        dist: &ClassDistribution,
    ) -> Result<LossResult> {
        self.validate()?;
        match self.kind {
            LossKind::Ce => wce(logits, targets, &ClassWeights::uniform(logits.ncols())),
            LossKind::Wce => wce(logits, targets, weights),
            LossKind::Wfl => wfl(logits, targets, weights, self.gamma),
            LossKind::Vs => vs_loss(logits, targets, weights, dist, self.gamma, self.tau),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    /// Batch-mean loss.
    pub value: f64,
    /// Gradient of `value` with respect to each logit, shape `B x C`.
    pub grad: Array2<f64>,
}

fn check_batch(logits: &ArrayView2<f64>, targets: &[usize], weights: &ClassWeights) -> Result<()> {
    let (b, c) = logits.dim();
    if b == 0 {
        return Err(Error::NoSamples);
    }
    if targets.len() != b {
        return Err(Error::Shape(format!(
            "{b} logit rows but {} targets",
            targets.len()
        )));
    }
    if weights.len() != c {
        return Err(Error::Shape(format!(
            "{c} classes but {} weights",
            weights.len()
        )));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::InvalidArgument(format!(
            "target {t} outside {c} classes"
        )));
    }
    check_finite(logits.iter().copied(), "logits")
}

/// Shared body of WCE and WFL: per-sample `(value, dl/dp_true-scale)` given
/// the log-probability of the true class.
fn weighted_softmax_loss(
    logits: ArrayView2<f64>,
    targets: &[usize],
    weights: &ClassWeights,
    per_sample: impl Fn(f64) -> (f64, f64),
) -> Result<LossResult> {
    check_batch(&logits, targets, weights)?;
    let (b, c) = logits.dim();
    let inv_b = 1.0 / b as f64;
    let mut grad = Array2::zeros((b, c));
    let mut total = 0.0;
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let y = targets[i];
        let w = weights.0[y];
        let logp = log_softmax(&row.to_vec())?;
        let (value, scale) = per_sample(logp[y]);
        total += w * value;
        // d l / d z_j = w * scale * (p_j - [j == y])
        let factor = w * scale * inv_b;
        for j in 0..c {
            let indicator = if j == y { 1.0 } else { 0.0 };
            grad[[i, j]] = factor * (logp[j].exp() - indicator);
        }
    }
    let value = total * inv_b;
    check_finite([value], "loss value")?;
    check_finite(grad.iter().copied(), "loss gradient")?;
    Ok(LossResult { value, grad })
}

/// Weighted cross-entropy.
pub fn wce(
    logits: ArrayView2<f64>,
    targets: &[usize],
    weights: &ClassWeights,
) -> Result<LossResult> {
    weighted_softmax_loss(logits, targets, weights, |logp| (-logp, 1.0))
}

/// Weighted focal loss `-w (1-p)^gamma log p`.
///
/// With `q = 1 - p` the derivative with respect to logit `j` is
/// `w * [q^gamma - gamma * p * q^(gamma-1) * log p] * (p_j - [j == y])`.
pub fn wfl(
    logits: ArrayView2<f64>,
    targets: &[usize],
    weights: &ClassWeights,
    gamma: f64,
) -> Result<LossResult> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "gamma must be >= 0, got {gamma}"
        )));
    }
    weighted_softmax_loss(logits, targets, weights, |logp| {
        if gamma == 0.0 {
            return (-logp, 1.0);
        }
        let p = logp.exp();
        // 1 - p without cancellation near p = 1
        let q = -logp.exp_m1();
        let modulator = q.powf(gamma);
        let value = -modulator * logp;
        // p q^(gamma-1) log p -> 0 as q -> 0 since log p ~ -q
        let focus = if q > 0.0 {
            gamma * p * q.powf(gamma - 1.0) * logp
        } else {
            0.0
        };
        (value, modulator - focus)
    })
}

/// Per-class multiplier `(N_c/N_max)^gamma` and bias `tau * log(N_c/N)`.
fn vs_terms(dist: &ClassDistribution, gamma: f64, tau: f64) -> (Vec<f64>, Vec<f64>) {
    let n = dist.total() as f64;
    let n_max = dist.max_count() as f64;
    dist.counts()
        .iter()
        .map(|&nc| {
            let nc = nc as f64;
            ((nc / n_max).powf(gamma), tau * (nc / n).ln())
        })
        .unzip()
}

/// Vector-scaling logit adjustment `(N_c/N_max)^gamma * z_c + tau * log(N_c/N)`.
pub fn vs_adjust(
    logits: ArrayView1<f64>,
    dist: &ClassDistribution,
    gamma: f64,
    tau: f64,
) -> Result<Vec<f64>> {
    if logits.len() != dist.num_classes() {
        return Err(Error::Shape(format!(
            "{} logits for {} classes",
            logits.len(),
            dist.num_classes()
        )));
    }
    let (scale, bias) = vs_terms(dist, gamma, tau);
    Ok(logits
        .iter()
        .zip(scale.iter().zip(&bias))
        .map(|(z, (s, b))| s * z + b)
        .collect())
}

/// Weighted cross-entropy on vector-scaled logits. The gradient with respect
/// to the raw logit `z_c` is the adjusted-softmax gradient times the class
/// multiplier.
pub fn vs_loss(
    logits: ArrayView2<f64>,
    targets: &[usize],
    weights: &ClassWeights,
    dist: &ClassDistribution,
    gamma: f64,
    tau: f64,
) -> Result<LossResult> {
    if !(gamma >= 0.0 && gamma.is_finite() && tau >= 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "gamma and tau must be >= 0, got {gamma}, {tau}"
        )));
    }
    check_batch(&logits, targets, weights)?;
    if dist.num_classes() != logits.ncols() {
        return Err(Error::Shape(format!(
            "{} logits for {} classes",
            logits.ncols(),
            dist.num_classes()
        )));
    }
    let (scale, _) = vs_terms(dist, gamma, tau);
    let mut adjusted = Array2::zeros(logits.dim());
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let adj = vs_adjust(row, dist, gamma, tau)?;
        adjusted.row_mut(i).assign(&ArrayView1::from(&adj));
    }
    let mut result = wce(adjusted.view(), targets, weights)?;
    for mut row in result.grad.axis_iter_mut(Axis(0)) {
        row.iter_mut().zip(&scale).for_each(|(g, s)| *g *= s);
    }
    Ok(result)
}

/// Largest `|analytic - numeric| / max(1, |numeric|)` over every logit, with
/// the numeric gradient from central differences of step `epsilon`.
pub fn gradcheck(
    loss: &LossConfig,
    logits: ArrayView2<f64>,
    targets: &[usize],
    weights: &ClassWeights,
    dist: &ClassDistribution,
    epsilon: f64,
) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in (0, 1e-2], got {epsilon}"
        )));
    }
    let analytic = loss.evaluate(logits, targets, weights, dist)?.grad;
    let point: Vec<f64> = logits.iter().copied().collect();
    crate::verify::max_relative_error(
        &analytic.iter().copied().collect::<Vec<_>>(),
        &point,
        epsilon,
        |x| {
            let z = Array2::from_shape_vec(logits.dim(), x.to_vec()).expect("same shape");
            Ok(loss.evaluate(z.view(), targets, weights, dist)?.value)
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn dist(counts: &[u64]) -> ClassDistribution {
        ClassDistribution::new(counts.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for p in softmax(&[1000.0, 1000.0, 1000.0]).unwrap() {
            assert_relative_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert_relative_eq!(p[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(p[1], 1.0 / 3.0, epsilon = 1e-15);
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn weights_examples() {
        assert_eq!(class_weights(&dist(&[326, 326])).as_slice(), &[1.0, 1.0]);
        let w = class_weights(&dist(&[26, 1]));
        assert_relative_eq!(w.as_slice()[0], 27.0 / 52.0, epsilon = 1e-15);
        assert_relative_eq!(w.as_slice()[1], 13.5, epsilon = 1e-15);
        for c in 2..6 {
            let w = class_weights(&dist(&vec![17; c]));
            assert!(w.as_slice().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn wce_examples() {
        let r = wce(array![[0.0, 0.0]].view(), &[0], &ClassWeights::uniform(2)).unwrap();
        assert_relative_eq!(r.value, 2f64.ln(), epsilon = 1e-15);
        let r = wce(
            array![[9f64.ln(), 0.0]].view(),
            &[0],
            &ClassWeights::uniform(2),
        )
        .unwrap();
        assert_relative_eq!(r.value, -(0.9f64.ln()), epsilon = 1e-15);
        assert_relative_eq!(r.value, 0.105360515657826, epsilon = 1e-12);

        let z = array![[0.3, -1.2, 0.5]];
        let one = wce(
            z.view(),
            &[2],
            &ClassWeights::new(vec![1.0, 1.0, 1.0]).unwrap(),
        )
        .unwrap();
        let two = wce(
            z.view(),
            &[2],
            &ClassWeights::new(vec![1.0, 1.0, 2.0]).unwrap(),
        )
        .unwrap();
        assert_relative_eq!(two.value, 2.0 * one.value, epsilon = 1e-15);
        for (a, b) in one.grad.iter().zip(two.grad.iter()) {
            assert_relative_eq!(*b, 2.0 * a, epsilon = 1e-15);
        }
    }

    #[test]
    fn wfl_examples() {
        let z = array![[9f64.ln(), 0.0]];
        let r = wfl(z.view(), &[0], &ClassWeights::uniform(2), 2.0).unwrap();
        assert_relative_eq!(r.value, 0.01 * 0.105360515657826, epsilon = 1e-12);

        let z = array![[0.7, -0.3, 0.1], [-2.0, 1.0, 0.4]];
        let w = ClassWeights::new(vec![0.5, 2.0, 1.5]).unwrap();
        let focal = wfl(z.view(), &[1, 0], &w, 0.0).unwrap();
        let ce = wce(z.view(), &[1, 0], &w).unwrap();
        assert_eq!(focal, ce);
        let focal = wfl(z.view(), &[1, 0], &w, 2.0).unwrap();
        assert!(focal.value < ce.value);
    }

    #[test]
    fn wfl_gradient_at_certain_prediction_is_finite() {
        let z = array![[800.0, 0.0]];
        for gamma in [0.3, 1.0, 2.0] {
            let r = wfl(z.view(), &[0], &ClassWeights::uniform(2), gamma).unwrap();
            assert!(r.grad.iter().all(|g| g.is_finite()));
            assert_eq!(r.value, 0.0);
        }
    }

    #[test]
    fn vs_adjust_examples() {
        let z = array![0.4, -1.0, 2.5];
        let d = dist(&[50, 7, 3]);
        assert_eq!(vs_adjust(z.view(), &d, 0.0, 0.0).unwrap(), z.to_vec());

        let out = vs_adjust(array![0.0, 0.0].view(), &dist(&[90, 10]), 0.3, 1.0).unwrap();
        assert_relative_eq!(out[0], 0.9f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(out[1], 0.1f64.ln(), epsilon = 1e-15);

        // the majority class keeps its logit scale
        for gamma in [0.0, 0.3, 2.0, 7.5] {
            let out = vs_adjust(array![3.0, 3.0].view(), &dist(&[90, 10]), gamma, 0.0).unwrap();
            assert_eq!(out[0], 3.0);
        }
    }

    #[test]
    fn vs_loss_examples() {
        let r = vs_loss(
            array![[0.0, 0.0]].view(),
            &[1],
            &ClassWeights::uniform(2),
            &dist(&[90, 10]),
            0.3,
            1.0,
        )
        .unwrap();
        // -log(0.1 / (0.9 + 0.1)) = ln 10
        assert_relative_eq!(r.value, 10f64.ln(), epsilon = 1e-14);

        let z = array![[0.2, -0.7, 1.1]];
        let w = ClassWeights::uniform(3);
        let plain = wce(z.view(), &[0], &w).unwrap();
        let vs = vs_loss(z.view(), &[0], &w, &dist(&[5, 9, 2]), 0.0, 0.0).unwrap();
        assert_eq!(vs, plain);
    }

    #[test]
    fn wce_gradient_rows_sum_to_zero() {
        let z = array![[0.2, -0.7, 1.1, 3.0], [10.0, -4.0, 0.0, 0.5]];
        let w = ClassWeights::new(vec![0.5, 3.0, 1.0, 0.1]).unwrap();
        let r = wce(z.view(), &[3, 1], &w).unwrap();
        for row in r.grad.rows() {
            assert!(row.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn batch_errors() {
        let w = ClassWeights::uniform(2);
        assert!(matches!(
            wce(Array2::zeros((0, 2)).view(), &[], &w),
            Err(Error::NoSamples)
        ));
        assert!(wce(array![[0.0, 0.0]].view(), &[2], &w).is_err());
        assert!(wce(array![[0.0, 0.0]].view(), &[0, 1], &w).is_err());
        assert!(matches!(
            wce(array![[f64::NAN, 0.0]].view(), &[0], &w),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn gradcheck_rejects_bad_epsilon() {
        let z = array![[0.0, 1.0]];
        let d = dist(&[1, 1]);
        let w = ClassWeights::uniform(2);
        assert!(gradcheck(&LossConfig::wce(), z.view(), &[0], &w, &d, 0.0).is_err());
        assert!(gradcheck(&LossConfig::wce(), z.view(), &[0], &w, &d, 0.1).is_err());
    }

    #[test]
    fn loss_config_json() {
        let c: LossConfig = serde_json::from_str(r#"{"kind":"wfl","gamma":2}"#).unwrap();
        assert_eq!(c, LossConfig::wfl(2.0));
        assert!(serde_json::from_str::<LossConfig>(r#"{"kind":"hinge"}"#).is_err());
    }
}

//! Central-difference gradient verification for the losses, the pooling
//! layer and whole classifier heads.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::data::ClassDistribution;
use crate::error::{Error, Result};
use crate::losses::{class_weights, LossConfig};
use crate::model::{Architecture, ClassifierModel, Input, Layer, LoraSpec};
use crate::pooling::{attentive_pool_backward, attentive_pool_forward, AttentivePoolParams};
use crate::rng::{stream_rng, Stream};

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Threshold every component must stay under.
pub const TOLERANCE: f64 = 1e-5;

/// `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)` where `numeric`
/// is the central difference of `objective` around `point`.
pub fn max_relative_error(
    analytic: &[f64],
    point: &[f64],
    epsilon: f64,
    mut objective: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<f64> {
    if analytic.len() != point.len() {
        return Err(Error::Shape(format!(
            "{} analytic entries for {} parameters",
            analytic.len(),
            point.len()
        )));
    }
    let mut probe = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        probe[i] = point[i] + epsilon;
        let plus = objective(&probe)?;
        probe[i] = point[i] - epsilon;
        let minus = objective(&probe)?;
        probe[i] = point[i];
        let numeric = (plus - minus) / (2.0 * epsilon);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(Error::NonFinite("gradient check".into()));
        }
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

fn normal_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        scale * rng.sample::<f64, _>(StandardNormal)
    })
}

fn normal_vector(rng: &mut ChaCha20Rng, len: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || rng.sample(StandardNormal))
}

/// Checks gradients of `upstream . [mu; sigma]` with respect to the frames
/// and all pooling parameters.
pub fn pooling_gradcheck(
    frames: &Array2<f64>,
    params: &AttentivePoolParams,
    upstream: &Array1<f64>,
    epsilon: f64,
    corrupt: bool,
) -> Result<f64> {
    let grads = attentive_pool_backward(frames.view(), params, upstream.view())?;
    let mut analytic: Vec<f64> = grads.frames.iter().copied().collect();
    for t in grads.params.tensors() {
        analytic.extend_from_slice(t);
    }
    if corrupt {
        analytic[0] += 1e-3;
    }
    let mut point: Vec<f64> = frames.iter().copied().collect();
    for t in params.tensors() {
        point.extend_from_slice(t);
    }
    let n_frames = frames.len();
    let mut probe_params = params.clone();
    max_relative_error(&analytic, &point, epsilon, |x| {
        let f = Array2::from_shape_vec(frames.dim(), x[..n_frames].to_vec()).expect("same shape");
        let mut offset = n_frames;
        for t in probe_params.tensors_mut() {
            t.copy_from_slice(&x[offset..offset + t.len()]);
            offset += t.len();
        }
        let out = attentive_pool_forward(f.view(), &probe_params)?;
        Ok(out.embedding().dot(upstream))
    })
}

fn flat_params(model: &mut ClassifierModel) -> Vec<f64> {
    model
        .trainable_tensors_mut()
        .iter()
        .flat_map(|t| t.iter().copied())
        .collect()
}

fn set_params(model: &mut ClassifierModel, values: &[f64]) {
    let mut offset = 0;
    for t in model.trainable_tensors_mut() {
        t.copy_from_slice(&values[offset..offset + t.len()]);
        offset += t.len();
    }
}

/// Checks parameter gradients of `upstream . logits`. When the model has
/// active dropout, every evaluation reuses the mask from `dropout_seed`.
pub fn model_gradcheck(
    model: &ClassifierModel,
    input: Input,
    upstream: &Array1<f64>,
    dropout_seed: Option<u64>,
    epsilon: f64,
    corrupt: bool,
) -> Result<f64> {
    let rng = || dropout_seed.map(|s| stream_rng(s, Stream::Dropout, 0));
    let mut r = rng();
    let trace = model.forward_trace(input, r.as_mut().map(|r| r as &mut dyn rand::RngCore))?;
    let grads = model.backward(&trace, upstream.view())?;
    let mut analytic: Vec<f64> = grads
        .tensors()
        .iter()
        .flat_map(|t| t.iter().copied())
        .collect();
    if corrupt {
        analytic[0] += 1e-3;
    }
    let mut probe = model.clone();
    let point = flat_params(&mut probe);
    max_relative_error(&analytic, &point, epsilon, |x| {
        set_params(&mut probe, x);
        let mut r = rng();
        let out = probe.forward_trace(input, r.as_mut().map(|r| r as &mut dyn rand::RngCore))?;
        Ok(out.logits.dot(upstream))
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    pub batch: usize,
    pub classes: usize,
    pub epsilon: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            batch: 4,
            classes: 8,
            epsilon: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentCheck {
    pub name: &'static str,
    pub max_relative_error: f64,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

pub const COMPONENTS: [&str; 6] = ["wce", "wfl", "vs", "pooling", "model", "model_pool_lora"];

/// Runs every component check. Components named in `corrupt` get a
/// perturbed analytic gradient, which must make them fail.
pub fn run_suite(options: &SuiteOptions, corrupt: &[&str]) -> Result<Vec<ComponentCheck>> {
    if options.batch == 0 || options.classes < 2 {
        return Err(Error::InvalidArgument(
            "gradcheck needs batch >= 1 and classes >= 2".into(),
        ));
    }
    let mut out = Vec::new();
    let mut rng = stream_rng(options.seed, Stream::Check, 0);
    let (b, c) = (options.batch, options.classes);
    let logits = normal_matrix(&mut rng, b, c, 2.0);
    let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
    let counts = (0..c).map(|_| rng.random_range(1..=26u64)).collect();
    let dist = ClassDistribution::new(counts)?;
    let weights = class_weights(&dist);

    for (name, loss) in [
        ("wce", LossConfig::wce()),
        ("wfl", LossConfig::wfl(2.0)),
        ("vs", LossConfig::vs(0.3, 1.0)),
    ] {
        let mut analytic = loss
            .evaluate(logits.view(), &targets, &weights, &dist)?
            .grad;
        if corrupt.contains(&name) {
            analytic[[0, 0]] += 1e-3;
        }
        let point: Vec<f64> = logits.iter().copied().collect();
        let err = max_relative_error(
            analytic.as_slice().expect("standard layout"),
            &point,
            options.epsilon,
            |x| {
                let z = Array2::from_shape_vec((b, c), x.to_vec()).expect("same shape");
                Ok(loss.evaluate(z.view(), &targets, &weights, &dist)?.value)
            },
        )?;
        out.push(ComponentCheck {
            name,
            max_relative_error: err,
        });
    }

    let mut rng = stream_rng(options.seed, Stream::Check, 1);
    let (t, d, da) = (5, 3, 4);
    let frames = normal_matrix(&mut rng, t, d, 1.0);
    let mut params = AttentivePoolParams::init(d, da, &mut rng);
    // non-zero scores so attention is not uniform
    params.proj_bias = normal_vector(&mut rng, da);
    params.score_vector = normal_vector(&mut rng, da);
    params.score_bias = rng.sample(StandardNormal);
    let upstream = normal_vector(&mut rng, 2 * d);
    out.push(ComponentCheck {
        name: "pooling",
        max_relative_error: pooling_gradcheck(
            &frames,
            &params,
            &upstream,
            options.epsilon,
            corrupt.contains(&"pooling"),
        )?,
    });

    let mut rng = stream_rng(options.seed, Stream::Check, 2);
    let dense = ClassifierModel::build(
        &Architecture {
            hidden: 5,
            pooling: None,
            lora: None,
        },
        4,
        3,
        &mut rng,
    )?;
    let x = normal_vector(&mut rng, 4);
    let upstream = normal_vector(&mut rng, 3);
    out.push(ComponentCheck {
        name: "model",
        max_relative_error: model_gradcheck(
            &dense,
            Input::Vector(x.view()),
            &upstream,
            None,
            options.epsilon,
            corrupt.contains(&"model"),
        )?,
    });

    let mut rng = stream_rng(options.seed, Stream::Check, 3);
    let mut pooled = ClassifierModel::build(
        &Architecture {
            hidden: 5,
            pooling: Some(4),
            lora: Some(LoraSpec {
                rank: 2,
                alpha: 4.0,
                dropout: 0.1,
            }),
        },
        3,
        3,
        &mut rng,
    )?;
    // move every parameter off its initial value so no path is trivially zero
    let jitter: Vec<f64> = flat_params(&mut pooled)
        .iter()
        .map(|v| v + 0.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    set_params(&mut pooled, &jitter);
    debug_assert!(matches!(pooled.layers()[1], Layer::Lora(_)));
    let frames = normal_matrix(&mut rng, 6, 3, 1.0);
    let upstream = normal_vector(&mut rng, 3);
    out.push(ComponentCheck {
        name: "model_pool_lora",
        max_relative_error: model_gradcheck(
            &pooled,
            Input::Frames(frames.view()),
            &upstream,
            Some(options.seed),
            options.epsilon,
            corrupt.contains(&"model_pool_lora"),
        )?,
    });
    Ok(out)
}

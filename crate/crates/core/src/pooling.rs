//! Attentive statistics pooling.
//!
//! Frame scores are `e_t = v . tanh(W h_t + b) + k`, attention weights are
//! `softmax(e)`, and the pooled embedding is `[mu; sigma]` where
//! `mu = sum_t a_t h_t` and `sigma_d = sqrt(max(sum_t a_t h_td^2 - mu_d^2, eps))`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::log_softmax;

/// Variance floor applied before the square root.
pub const VARIANCE_FLOOR: f64 = 1e-9;

/// Default attention width for frame dimension `dim`.
pub fn default_attention_dim(dim: usize) -> usize {
    dim.clamp(1, 128)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentivePoolParams {
    /// `D_a x D`
    pub proj_weight: Array2<f64>,
    pub proj_bias: Array1<f64>,
    pub score_vector: Array1<f64>,
    pub score_bias: f64,
}

impl AttentivePoolParams {
    pub fn zeros(dim: usize, attention_dim: usize) -> Self {
        Self {
            proj_weight: Array2::zeros((attention_dim, dim)),
            proj_bias: Array1::zeros(attention_dim),
            score_vector: Array1::zeros(attention_dim),
            score_bias: 0.0,
        }
    }

    /// Glorot-uniform projection with zero biases and score vector, so the
    /// freshly initialized layer pools with uniform weights.
    pub fn init<R: Rng + ?Sized>(dim: usize, attention_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (dim + attention_dim) as f64).sqrt();
        let mut params = Self::zeros(dim, attention_dim);
        params
            .proj_weight
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-limit..limit));
        params
    }

    pub fn input_dim(&self) -> usize {
        self.proj_weight.ncols()
    }

    pub fn attention_dim(&self) -> usize {
        self.proj_weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        2 * self.input_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let (da, d) = self.proj_weight.dim();
        if da == 0 || d == 0 {
            return Err(Error::Shape(
                "attention pooling needs D >= 1 and D_a >= 1".into(),
            ));
        }
        if self.proj_bias.len() != da || self.score_vector.len() != da {
            return Err(Error::Shape(format!(
                "attention vectors must have length {da}, got {} and {}",
                self.proj_bias.len(),
                self.score_vector.len()
            )));
        }
        let finite = self.proj_weight.iter().all(|v| v.is_finite())
            && self.proj_bias.iter().all(|v| v.is_finite())
            && self.score_vector.iter().all(|v| v.is_finite())
            && self.score_bias.is_finite();
        if !finite {
            return Err(Error::NonFinite("attention pooling parameters".into()));
        }
        Ok(())
    }

    /// Parameter tensors in a fixed order: weight, bias, score vector, score bias.
    pub(crate) fn tensors(&self) -> [&[f64]; 4] {
        [
            self.proj_weight.as_slice().expect("standard layout"),
            self.proj_bias.as_slice().expect("standard layout"),
            self.score_vector.as_slice().expect("standard layout"),
            std::slice::from_ref(&self.score_bias),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.proj_weight.as_slice_mut().expect("standard layout"),
            self.proj_bias.as_slice_mut().expect("standard layout"),
            self.score_vector.as_slice_mut().expect("standard layout"),
            std::slice::from_mut(&mut self.score_bias),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
    pub attention: Array1<f64>,
    /// Pre-floor variance per dimension, kept for the backward pass.
    variance: Array1<f64>,
    /// `tanh(W h_t + b)` per frame, `T x D_a`.
    hidden: Array2<f64>,
}

impl PooledStats {
    /// `[mu; sigma]`
    pub fn embedding(&self) -> Array1<f64> {
        ndarray::concatenate(Axis(0), &[self.mean.view(), self.std.view()])
            .expect("equal-rank vectors")
    }
}

fn check_frames(frames: &ArrayView2<f64>, params: &AttentivePoolParams) -> Result<()> {
    params.validate()?;
    if frames.nrows() == 0 {
        return Err(Error::Shape(
            "attentive pooling needs at least one frame".into(),
        ));
    }
    if frames.ncols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "frames have dimension {}, pooling expects {}",
            frames.ncols(),
            params.input_dim()
        )));
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("frames".into()));
    }
    Ok(())
}

pub fn attentive_pool_forward(
    frames: ArrayView2<f64>,
    params: &AttentivePoolParams,
) -> Result<PooledStats> {
    check_frames(&frames, params)?;
    let mut hidden = frames.dot(&params.proj_weight.t());
    hidden += &params.proj_bias;
    hidden.mapv_inplace(f64::tanh);
    let scores: Vec<f64> = hidden
        .rows()
        .into_iter()
        .map(|h| h.dot(&params.score_vector) + params.score_bias)
        .collect();
    let attention = Array1::from(log_softmax(&scores)?).mapv(f64::exp);

    let mean = frames.t().dot(&attention);
    let second = frames.mapv(|v| v * v).t().dot(&attention);
    let variance = &second - &mean.mapv(|m| m * m);
    let std = variance.mapv(|v| v.max(VARIANCE_FLOOR).sqrt());
    Ok(PooledStats {
        mean,
        std,
        attention,
        variance,
        hidden,
    })
}

/// Gradients of `upstream . [mu; sigma]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolGradients {
    pub frames: Array2<f64>,
    pub params: AttentivePoolParams,
}

pub fn attentive_pool_backward(
    frames: ArrayView2<f64>,
    params: &AttentivePoolParams,
    upstream: ArrayView1<f64>,
) -> Result<PoolGradients> {
    let stats = attentive_pool_forward(frames, params)?;
    backward_from(frames, params, &stats, upstream)
}

pub(crate) fn backward_from(
    frames: ArrayView2<f64>,
    params: &AttentivePoolParams,
    stats: &PooledStats,
    upstream: ArrayView1<f64>,
) -> Result<PoolGradients> {
    let d = params.input_dim();
    if upstream.len() != 2 * d {
        return Err(Error::Shape(format!(
            "upstream gradient has length {}, expected {}",
            upstream.len(),
            2 * d
        )));
    }
    if upstream.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("upstream gradient".into()));
    }
    let grad_mean = upstream.slice(s![..d]);
    let grad_std = upstream.slice(s![d..]);

    // sigma = sqrt(s2) above the floor, constant below it
    let grad_var = Zip::from(&grad_std)
        .and(&stats.std)
        .and(&stats.variance)
        .map_collect(|&g, &sd, &var| {
            if var > VARIANCE_FLOOR {
                g / (2.0 * sd)
            } else {
                0.0
            }
        });
    // s2 = E[h^2] - mu^2 feeds back into mu
    let grad_mean_total = &grad_mean - &(2.0 * &stats.mean * &grad_var);

    let alpha = &stats.attention;
    // dL/dalpha_t = sum_d g_mu'_d h_td + g_s2_d h_td^2
    let grad_alpha = frames.dot(&grad_mean_total) + frames.mapv(|v| v * v).dot(&grad_var);
    let mut grad_frames = Array2::zeros(frames.dim());
    Zip::from(grad_frames.rows_mut())
        .and(frames.rows())
        .and(alpha)
        .for_each(|mut gh, h, &a| {
            Zip::from(&mut gh)
                .and(&h)
                .and(&grad_mean_total)
                .and(&grad_var)
                .for_each(|g, &x, &gm, &gv| *g = a * (gm + 2.0 * gv * x));
        });

    // softmax backward
    let weighted = alpha.dot(&grad_alpha);
    let grad_scores = alpha * &(&grad_alpha - weighted);

    // e_t = v . tanh(u_t) + k, u_t = W h_t + b
    let grad_score_bias = grad_scores.sum();
    let grad_score_vector = stats.hidden.t().dot(&grad_scores);
    let mut grad_pre = stats.hidden.mapv(|t| 1.0 - t * t);
    Zip::from(grad_pre.rows_mut())
        .and(&grad_scores)
        .for_each(|mut row, &ge| {
            row.iter_mut()
                .zip(params.score_vector.iter())
                .for_each(|(r, &v)| *r *= ge * v);
        });
    let grad_proj_weight = grad_pre.t().dot(&frames).as_standard_layout().into_owned();
    let grad_proj_bias = grad_pre.sum_axis(Axis(0));
    grad_frames += &grad_pre.dot(&params.proj_weight);

    Ok(PoolGradients {
        frames: grad_frames,
        params: AttentivePoolParams {
            proj_weight: grad_proj_weight,
            proj_bias: grad_proj_bias,
            score_vector: grad_score_vector,
            score_bias: grad_score_bias,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand_distr::StandardNormal;

    #[test]
    fn uniform_attention_example() {
        let frames = array![[1.0, 2.0], [3.0, 4.0]];
        let out = attentive_pool_forward(frames.view(), &AttentivePoolParams::zeros(2, 3)).unwrap();
        assert_eq!(out.attention.to_vec(), vec![0.5, 0.5]);
        assert_eq!(out.mean.to_vec(), vec![2.0, 3.0]);
        assert_relative_eq!(out.std[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(out.std[1], 1.0, epsilon = 1e-12);
        assert_eq!(out.embedding().len(), 4);
    }

    #[test]
    fn single_and_repeated_frames_hit_the_floor() {
        let mut rng = stream_rng(1, Stream::Check, 0);
        let params = AttentivePoolParams::init(3, 2, &mut rng);
        let one = array![[0.5, -1.0, 2.0]];
        let out = attentive_pool_forward(one.view(), &params).unwrap();
        assert_eq!(out.mean, one.row(0));
        assert!(out.std.iter().all(|&s| s == VARIANCE_FLOOR.sqrt()));

        let repeated = array![[0.5, -1.0, 2.0], [0.5, -1.0, 2.0], [0.5, -1.0, 2.0]];
        let out = attentive_pool_forward(repeated.view(), &params).unwrap();
        for &s in &out.std {
            assert_relative_eq!(s, VARIANCE_FLOOR.sqrt(), max_relative = 1e-6);
        }

        let g = attentive_pool_backward(
            repeated.view(),
            &params,
            array![1.0, 1.0, 1.0, 1.0, 1.0, 1.0].view(),
        )
        .unwrap();
        assert!(g.frames.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = stream_rng(2, Stream::Check, 0);
        let params = AttentivePoolParams::init(3, 4, &mut rng);
        let frames = Array2::from_shape_fn((5, 3), |_| rng.sample(StandardNormal));
        let g = attentive_pool_backward(frames.view(), &params, Array1::zeros(6).view()).unwrap();
        assert!(g.frames.iter().all(|&v| v == 0.0));
        assert!(g
            .params
            .tensors()
            .iter()
            .all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn rejects_bad_shapes() {
        let params = AttentivePoolParams::zeros(2, 2);
        assert!(attentive_pool_forward(Array2::zeros((0, 2)).view(), &params).is_err());
        assert!(attentive_pool_forward(Array2::zeros((3, 4)).view(), &params).is_err());
        assert!(attentive_pool_forward(array![[f64::NAN, 0.0]].view(), &params).is_err());
        assert!(attentive_pool_backward(
            array![[1.0, 0.0]].view(),
            &params,
            Array1::zeros(3).view()
        )
        .is_err());
    }

    #[test]
    fn default_attention_width() {
        assert_eq!(default_attention_dim(16), 16);
        assert_eq!(default_attention_dim(1024), 128);
    }
}

//! Small classifier heads built from dense, low-rank-adapted, tanh and
//! attentive-pooling stages.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::pooling::{self, AttentivePoolParams, PooledStats};

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub trainable: bool,
}

impl LinearLayer {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() || weight.is_empty() {
            return Err(Error::Shape(format!(
                "linear weight {:?} does not match bias of length {}",
                weight.dim(),
                bias.len()
            )));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linear layer parameters".into()));
        }
        Ok(Self {
            weight: weight.as_standard_layout().into_owned(),
            bias,
            trainable: true,
        })
    }

    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: glorot(output, input, rng),
            bias: Array1::zeros(output),
            trainable: true,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
            trainable: true,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }
}

/// A frozen dense layer plus a trainable rank-`r` update scaled by `alpha / r`.
///
/// Output: `base(x) + (alpha / r) * up . down . dropout(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLinear {
    pub base: LinearLayer,
    /// `A`, `r x in`
    pub down: Array2<f64>,
    /// `B`, `out x r`
    pub up: Array2<f64>,
    pub alpha: f64,
    pub dropout: f64,
}

impl LoraLinear {
    /// Random `A`, zero `B`: the adapter starts as an exact no-op.
    pub fn init<R: Rng + ?Sized>(
        base: LinearLayer,
        rank: usize,
        alpha: f64,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let down = glorot(rank, base.input_dim(), rng);
        let up = Array2::zeros((base.output_dim(), rank));
        Self::new(base, down, up, alpha, dropout)
    }

    pub fn new(
        base: LinearLayer,
        down: Array2<f64>,
        up: Array2<f64>,
        alpha: f64,
        dropout: f64,
    ) -> Result<Self> {
        let rank = down.nrows();
        if rank == 0 {
            return Err(Error::Shape("LoRA rank must be >= 1".into()));
        }
        if down.ncols() != base.input_dim() || up.dim() != (base.output_dim(), rank) {
            return Err(Error::Shape(format!(
                "LoRA factors {:?} and {:?} do not fit base {:?}",
                down.dim(),
                up.dim(),
                base.weight.dim()
            )));
        }
        if !alpha.is_finite() || !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidArgument(format!(
                "LoRA alpha must be finite and dropout in [0, 1), got {alpha}, {dropout}"
            )));
        }
        if down.iter().chain(up.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("LoRA factors".into()));
        }
        Ok(Self {
            base: base.frozen(),
            down: down.as_standard_layout().into_owned(),
            up: up.as_standard_layout().into_owned(),
            alpha,
            dropout,
        })
    }

    pub fn rank(&self) -> usize {
        self.down.nrows()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// The equivalent dense layer `W + (alpha / r) B A` (no dropout).
    pub fn merged(&self) -> LinearLayer {
        LinearLayer {
            weight: &self.base.weight + &(self.scaling() * self.up.dot(&self.down)),
            bias: self.base.bias.clone(),
            trainable: true,
        }
    }

    fn forward_masked(
        &self,
        x: ArrayView1<f64>,
        mask: Option<&Array1<f64>>,
    ) -> (Array1<f64>, Array1<f64>) {
        let dropped = match mask {
            Some(m) => &x * m,
            None => x.to_owned(),
        };
        let low = self.down.dot(&dropped);
        let out = self.base.forward(x) + &(self.scaling() * self.up.dot(&low));
        (out, low)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Frame matrix to `[mu; sigma]`; only valid as the first layer.
    Pool(AttentivePoolParams),
    Linear(LinearLayer),
    Lora(LoraLinear),
    Tanh,
}

impl Layer {
    fn output_dim(&self, input: usize) -> usize {
        match self {
            Layer::Pool(p) => p.output_dim(),
            Layer::Linear(l) => l.output_dim(),
            Layer::Lora(l) => l.base.output_dim(),
            Layer::Tanh => input,
        }
    }

    fn input_dim(&self) -> Option<usize> {
        match self {
            Layer::Pool(p) => Some(p.input_dim()),
            Layer::Linear(l) => Some(l.input_dim()),
            Layer::Lora(l) => Some(l.base.input_dim()),
            Layer::Tanh => None,
        }
    }
}

/// A sample as the model sees it.
#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    Vector(ArrayView1<'a, f64>),
    Frames(ArrayView2<'a, f64>),
}

impl<'a> From<&'a [f64]> for Input<'a> {
    fn from(v: &'a [f64]) -> Self {
        Input::Vector(ArrayView1::from(v))
    }
}

impl<'a> From<&'a Array2<f64>> for Input<'a> {
    fn from(m: &'a Array2<f64>) -> Self {
        Input::Frames(m.view())
    }
}

/// Layer shapes of the default head.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub hidden: usize,
    /// Attention width when the input is a frame sequence.
    pub pooling: Option<usize>,
    pub lora: Option<LoraSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraSpec {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 32.0,
            dropout: 0.1,
        }
    }
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: 64,
            pooling: None,
            lora: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    layers: Vec<Layer>,
    input_dim: usize,
    output_dim: usize,
}

impl ClassifierModel {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let input_dim = layers
            .iter()
            .find_map(Layer::input_dim)
            .ok_or_else(|| Error::Shape("model needs at least one parameterized layer".into()))?;
        let mut dim = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if let Layer::Pool(p) = layer {
                if i != 0 {
                    return Err(Error::Shape("pooling must be the first layer".into()));
                }
                p.validate()?;
            }
            if let Some(expected) = layer.input_dim() {
                if expected != dim {
                    return Err(Error::Shape(format!(
                        "layer {i} expects input {expected}, previous layer gives {dim}"
                    )));
                }
            }
            dim = layer.output_dim(dim);
        }
        Ok(Self {
            layers,
            input_dim,
            output_dim: dim,
        })
    }

    /// `[pool] -> (Linear | LoRA)(in -> hidden) -> tanh -> Linear(hidden -> C)`.
    ///
    /// With LoRA the first projection is a frozen random base carrying the
    /// adapter. Initialization draws from `rng` in layer order.
    pub fn build<R: Rng + ?Sized>(
        arch: &Architecture,
        input_dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || classes < 2 || arch.hidden == 0 {
            return Err(Error::Shape(format!(
                "cannot build a head with input {input_dim}, hidden {}, {classes} classes",
                arch.hidden
            )));
        }
        let mut layers = Vec::new();
        let mut dim = input_dim;
        if let Some(attention_dim) = arch.pooling {
            layers.push(Layer::Pool(AttentivePoolParams::init(
                dim,
                attention_dim.max(1),
                rng,
            )));
            dim *= 2;
        }
        let first = LinearLayer::init(dim, arch.hidden, rng);
        layers.push(match arch.lora {
            Some(spec) => Layer::Lora(LoraLinear::init(
                first,
                spec.rank,
                spec.alpha,
                spec.dropout,
                rng,
            )?),
            None => Layer::Linear(first),
        });
        layers.push(Layer::Tanh);
        layers.push(Layer::Linear(LinearLayer::init(arch.hidden, classes, rng)));
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn takes_frames(&self) -> bool {
        matches!(self.layers.first(), Some(Layer::Pool(_)))
    }

    /// Evaluation-mode logits.
    pub fn forward(&self, input: Input) -> Result<Array1<f64>> {
        Ok(self.forward_trace(input, None)?.logits)
    }

    /// Forward pass keeping what the backward pass needs. Dropout is active
    /// exactly when `dropout_rng` is given.
    pub fn forward_trace(
        &self,
        input: Input,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Trace> {
        let mut steps = Vec::with_capacity(self.layers.len());
        let mut x = match (input, self.takes_frames()) {
            (Input::Frames(frames), true) => {
                let Layer::Pool(p) = &self.layers[0] else {
                    unreachable!()
                };
                let stats = pooling::attentive_pool_forward(frames, p)?;
                let out = stats.embedding();
                steps.push(Step::Pool {
                    frames: frames.to_owned(),
                    stats,
                });
                out
            }
            (Input::Vector(v), false) => {
                if v.len() != self.input_dim {
                    return Err(Error::Shape(format!(
                        "input has dimension {}, model expects {}",
                        v.len(),
                        self.input_dim
                    )));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("model input".into()));
                }
                v.to_owned()
            }
            (Input::Frames(_), false) => {
                return Err(Error::Shape(
                    "model takes vectors but got a frame sequence".into(),
                ))
            }
            (Input::Vector(_), true) => {
                return Err(Error::Shape(
                    "model takes frame sequences but got a vector".into(),
                ))
            }
        };
        let skip = steps.len();
        for layer in &self.layers[skip..] {
            let (next, step) = match layer {
                Layer::Pool(_) => unreachable!("validated in new"),
                Layer::Linear(l) => (l.forward(x.view()), Step::Linear { input: x }),
                Layer::Lora(l) => {
                    let mask = match (&mut dropout_rng, l.dropout > 0.0) {
                        (Some(rng), true) => {
                            let keep = 1.0 - l.dropout;
                            Some(Array1::from_shape_simple_fn(x.len(), || {
                                if rng.random::<f64>() < keep {
                                    1.0 / keep
                                } else {
                                    0.0
                                }
                            }))
                        }
                        _ => None,
                    };
                    let (out, low) = l.forward_masked(x.view(), mask.as_ref());
                    (
                        out,
                        Step::Lora {
                            input: x,
                            mask,
                            low,
                        },
                    )
                }
                Layer::Tanh => {
                    let out = x.mapv(f64::tanh);
                    (out.clone(), Step::Tanh { output: out })
                }
            };
            steps.push(step);
            x = next;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(Trace { steps, logits: x })
    }

    /// Gradients of `grad_logits . logits` for every trainable tensor.
    pub fn backward(&self, trace: &Trace, grad_logits: ArrayView1<f64>) -> Result<Gradients> {
        if trace.steps.len() != self.layers.len() {
            return Err(Error::Shape("trace does not belong to this model".into()));
        }
        if grad_logits.len() != self.output_dim {
            return Err(Error::Shape(format!(
                "logit gradient has length {}, model outputs {}",
                grad_logits.len(),
                self.output_dim
            )));
        }
        let mut grads = vec![LayerGrad::None; self.layers.len()];
        let mut g = grad_logits.to_owned();
        for (i, (layer, step)) in self.layers.iter().zip(&trace.steps).enumerate().rev() {
            let need_input_grad = i > 0;
            match (layer, step) {
                (Layer::Linear(l), Step::Linear { input }) => {
                    if l.trainable {
                        grads[i] = LayerGrad::Linear {
                            weight: outer(&g, input),
                            bias: g.clone(),
                        };
                    }
                    if need_input_grad {
                        g = l.weight.t().dot(&g);
                    }
                }
                (Layer::Lora(l), Step::Lora { input, mask, low }) => {
                    let s = l.scaling();
                    let grad_low = s * l.up.t().dot(&g);
                    let dropped = match mask {
                        Some(m) => input * m,
                        None => input.clone(),
                    };
                    grads[i] = LayerGrad::Lora {
                        down: outer(&grad_low, &dropped),
                        up: outer(&(s * &g), low),
                    };
                    if need_input_grad {
                        let mut through_adapter = l.down.t().dot(&grad_low);
                        if let Some(m) = mask {
                            through_adapter *= m;
                        }
                        g = l.base.weight.t().dot(&g) + through_adapter;
                    }
                }
                (Layer::Tanh, Step::Tanh { output }) => {
                    g = &g * &output.mapv(|y| 1.0 - y * y);
                }
                (Layer::Pool(p), Step::Pool { frames, stats }) => {
                    let pg = pooling::backward_from(frames.view(), p, stats, g.view())?;
                    grads[i] = LayerGrad::Pool(pg.params);
                }
                _ => return Err(Error::Shape("trace does not belong to this model".into())),
            }
        }
        Ok(Gradients { layers: grads })
    }

    /// Mutable views of every trainable tensor, in [`Gradients::tensors`] order.
    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(l) if l.trainable => {
                    out.push(l.weight.as_slice_mut().expect("standard layout"));
                    out.push(l.bias.as_slice_mut().expect("standard layout"));
                }
                Layer::Lora(l) => {
                    out.push(l.down.as_slice_mut().expect("standard layout"));
                    out.push(l.up.as_slice_mut().expect("standard layout"));
                }
                Layer::Pool(p) => out.extend(p.tensors_mut()),
                _ => {}
            }
        }
        out
    }

    pub fn num_trainable(&mut self) -> usize {
        self.trainable_tensors_mut().iter().map(|t| t.len()).sum()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|layer| match layer {
                    Layer::Linear(l) if l.trainable => LayerGrad::Linear {
                        weight: Array2::zeros(l.weight.dim()),
                        bias: Array1::zeros(l.bias.len()),
                    },
                    Layer::Lora(l) => LayerGrad::Lora {
                        down: Array2::zeros(l.down.dim()),
                        up: Array2::zeros(l.up.dim()),
                    },
                    Layer::Pool(p) => LayerGrad::Pool(AttentivePoolParams::zeros(
                        p.input_dim(),
                        p.attention_dim(),
                    )),
                    _ => LayerGrad::None,
                })
                .collect(),
        }
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

#[derive(Debug, Clone)]
enum Step {
    Pool {
        frames: Array2<f64>,
        stats: PooledStats,
    },
    Linear {
        input: Array1<f64>,
    },
    Lora {
        input: Array1<f64>,
        mask: Option<Array1<f64>>,
        low: Array1<f64>,
    },
    Tanh {
        output: Array1<f64>,
    },
}

/// Activations recorded by [`ClassifierModel::forward_trace`].
#[derive(Debug, Clone)]
pub struct Trace {
    steps: Vec<Step>,
    pub logits: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    /// Parameter-free or frozen layer.
    None,
    Linear {
        weight: Array2<f64>,
        bias: Array1<f64>,
    },
    Lora {
        down: Array2<f64>,
        up: Array2<f64>,
    },
    Pool(AttentivePoolParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in &self.layers {
            match g {
                LayerGrad::None => {}
                LayerGrad::Linear { weight, bias } => {
                    out.push(weight.as_slice().expect("standard layout"));
                    out.push(bias.as_slice().expect("standard layout"));
                }
                LayerGrad::Lora { down, up } => {
                    out.push(down.as_slice().expect("standard layout"));
                    out.push(up.as_slice().expect("standard layout"));
                }
                LayerGrad::Pool(p) => out.extend(p.tensors()),
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for g in &mut self.layers {
            match g {
                LayerGrad::None => {}
                LayerGrad::Linear { weight, bias } => {
                    out.push(weight.as_slice_mut().expect("standard layout"));
                    out.push(bias.as_slice_mut().expect("standard layout"));
                }
                LayerGrad::Lora { down, up } => {
                    out.push(down.as_slice_mut().expect("standard layout"));
                    out.push(up.as_slice_mut().expect("standard layout"));
                }
                LayerGrad::Pool(p) => out.extend(p.tensors_mut()),
            }
        }
        out
    }

    /// Element-wise `self += other`; both must come from the same model.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Sums gradients by pairwise reduction in index order, so the result
    /// does not depend on how the parts were computed.
    pub fn tree_sum(mut parts: Vec<Gradients>) -> Option<Gradients> {
        while parts.len() > 1 {
            let mut next = Vec::with_capacity(parts.len().div_ceil(2));
            let mut it = parts.into_iter();
            while let Some(mut a) = it.next() {
                if let Some(b) = it.next() {
                    a.add_assign(&b);
                }
                next.push(a);
            }
            parts = next;
        }
        parts.pop()
    }
}

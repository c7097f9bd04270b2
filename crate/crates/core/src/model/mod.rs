//! One-hidden-layer classifiers over hyperspectral patches.
//!
//! Two variants share the same topology: [`RankRFnn`] keeps each hidden
//! neuron's weight tensor in rank-R CP form and contracts patches without
//! materializing it; [`DenseFnn`] carries full `(b, s, s)` weight tensors
//! and serves as the ablation baseline. Both expose their trainable
//! parameters as one flat `f64` vector in a fixed canonical order (also the
//! serialization order), which is what the optimizer consumes.
//!
//! Gradients are analytic. For the factorized variant they follow from the
//! multilinearity of the contraction: holding two factor groups fixed, the
//! pre-activation is linear in the third, so each partial is itself a
//! contraction of the input patch.

mod io;

pub mod gradcheck;

pub use io::{load_model, save_dense, save_rank_r};

use crate::error::{Error, Result};
use crate::tensor::{contract_spectral, cp_reconstruct, dot, inner, CpFactorSet, Matrix, Tensor3};
use rand::Rng;

/// Probabilities are clamped to at least this before the loss log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Hidden-layer activation function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Sigmoid,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(z),
            // Written to propagate NaN, which f64::max would swallow;
            // divergence detection depends on NaN reaching the loss.
            Activation::Relu => {
                if z < 0.0 {
                    0.0
                } else {
                    z
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative as a function of the pre-activation. The ReLU derivative
    /// at exactly zero is taken as 0.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::invalid(format!(
                "unknown activation {other:?}, expected sigmoid, relu, or tanh"
            ))),
        }
    }

    pub(crate) fn id(self) -> u32 {
        match self {
            Activation::Sigmoid => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    pub(crate) fn from_id(id: u32) -> Option<Self> {
        match id {
            0 => Some(Activation::Sigmoid),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Shape shared by both model variants (the CP rank lives on [`RankRFnn`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    /// Hidden neurons Q.
    pub hidden_count: usize,
    /// Output classes C.
    pub class_count: usize,
    /// Patch side length s.
    pub patch_side: usize,
    /// Spectral bands b.
    pub band_count: usize,
}

impl LayerDims {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_count == 0 {
            return Err(Error::invalid("hidden_count must be >= 1"));
        }
        if self.class_count < 2 {
            return Err(Error::invalid("class_count must be >= 2"));
        }
        if self.patch_side == 0 || self.band_count == 0 {
            return Err(Error::invalid("patch_side and band_count must be >= 1"));
        }
        Ok(())
    }

    /// Patch dims this model contracts, spectral mode first.
    pub fn patch_dims(&self) -> (usize, usize, usize) {
        (self.band_count, self.patch_side, self.patch_side)
    }
}

/// Bias terms, present only when a model is built with biases enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct Biases {
    /// One per hidden neuron.
    pub hidden: Vec<f64>,
    /// One per class.
    pub output: Vec<f64>,
}

/// Everything the forward pass produces for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// z_q, before the activation.
    pub preactivations: Vec<f64>,
    /// u_q = g(z_q).
    pub hidden: Vec<f64>,
    /// One per class, before the softmax.
    pub logits: Vec<f64>,
    /// Softmax of the logits; sums to 1 within 1e-12.
    pub probabilities: Vec<f64>,
}

/// Common interface the optimizer and harness train against.
pub trait Model {
    fn dims(&self) -> LayerDims;

    fn activation(&self) -> Activation;

    /// Number of trainable parameters.
    fn param_count(&self) -> usize;

    /// Copies all parameters into `out` in the canonical flat order.
    fn write_params(&self, out: &mut [f64]);

    /// Replaces all parameters from a flat vector in the canonical order.
    fn read_params(&mut self, params: &[f64]) -> Result<()>;

    /// Redraws all parameters from `rng` using the variant's default
    /// initialization, with the base limits multiplied by `scale`.
    fn init_params(&mut self, scale: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Result<()>;

    fn forward(&self, x: &Tensor3) -> Result<ForwardTrace>;

    /// Adds the loss gradient for one `(x, target)` pair into `grad`
    /// (canonical flat order) and returns the sample loss.
    fn accumulate_loss_grad(&self, x: &Tensor3, target: &[f64], grad: &mut [f64]) -> Result<f64>;
}

/// Gradients in the same structure as the factorized model's parameters.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub hidden_weights: Vec<CpFactorSet>,
    pub output_weights: Matrix,
    pub biases: Option<Biases>,
}

impl GradientSet {
    /// Reassembles a flat gradient vector (canonical order) into the
    /// factor/matrix structure of a model with the given shape.
    pub fn from_flat(dims: LayerDims, rank: usize, with_bias: bool, flat: &[f64]) -> Result<Self> {
        let expected = rank_r_param_count(dims, rank, with_bias);
        if flat.len() != expected {
            return Err(Error::shape(format!(
                "flat gradient has {} entries, model shape needs {expected}",
                flat.len()
            )));
        }
        let (b, s) = (dims.band_count, dims.patch_side);
        let mut pos = 0;
        let mut take = |n: usize| {
            let out = flat[pos..pos + n].to_vec();
            pos += n;
            out
        };
        let mut hidden_weights = Vec::with_capacity(dims.hidden_count);
        for _ in 0..dims.hidden_count {
            let spectral: Vec<Vec<f64>> = (0..rank).map(|_| take(b)).collect();
            let spatial_a: Vec<Vec<f64>> = (0..rank).map(|_| take(s)).collect();
            let spatial_b: Vec<Vec<f64>> = (0..rank).map(|_| take(s)).collect();
            hidden_weights.push(CpFactorSet::new(spectral, spatial_a, spatial_b)?);
        }
        let output_weights = Matrix {
            rows: dims.class_count,
            cols: dims.hidden_count,
            values: take(dims.class_count * dims.hidden_count),
        };
        let biases = if with_bias {
            Some(Biases {
                hidden: take(dims.hidden_count),
                output: take(dims.class_count),
            })
        } else {
            None
        };
        Ok(GradientSet {
            hidden_weights,
            output_weights,
            biases,
        })
    }
}

/// Parameter count of the factorized variant.
pub fn rank_r_param_count(dims: LayerDims, rank: usize, with_bias: bool) -> usize {
    let factor = dims.hidden_count * rank * (2 * dims.patch_side + dims.band_count);
    let output = dims.class_count * dims.hidden_count;
    let bias = if with_bias {
        dims.hidden_count + dims.class_count
    } else {
        0
    };
    factor + output + bias
}

/// Parameter count of the dense variant.
pub fn dense_param_count(dims: LayerDims, with_bias: bool) -> usize {
    let weights = dims.hidden_count * dims.patch_side * dims.patch_side * dims.band_count;
    let output = dims.class_count * dims.hidden_count;
    let bias = if with_bias {
        dims.hidden_count + dims.class_count
    } else {
        0
    };
    weights + output + bias
}

/// One-hidden-layer network whose hidden weights are rank-R CP factor sets.
#[derive(Debug, Clone, PartialEq)]
pub struct RankRFnn {
    dims: LayerDims,
    rank: usize,
    hidden_weights: Vec<CpFactorSet>,
    output_weights: Matrix,
    activation: Activation,
    biases: Option<Biases>,
}

impl RankRFnn {
    /// All-zero model of the given shape.
    pub fn zeros(dims: LayerDims, rank: usize, activation: Activation, with_bias: bool) -> Result<Self> {
        dims.validate()?;
        if rank == 0 {
            return Err(Error::invalid("rank must be >= 1"));
        }
        let hidden_weights = (0..dims.hidden_count)
            .map(|_| CpFactorSet::zeros(rank, dims.band_count, dims.patch_side))
            .collect::<Result<Vec<_>>>()?;
        Ok(RankRFnn {
            dims,
            rank,
            hidden_weights,
            output_weights: Matrix::zeros(dims.class_count, dims.hidden_count),
            activation,
            biases: with_bias.then(|| Biases {
                hidden: vec![0.0; dims.hidden_count],
                output: vec![0.0; dims.class_count],
            }),
        })
    }

    /// Random initialization. Factor entries are uniform on `(−β, β)` with
    /// `β = scale · √(6 / (R·(2s+b) + Q)) / R^{1/3}`, which keeps the
    /// degree-3 products feeding each pre-activation at unit order; the
    /// output matrix is fan-in uniform on `(−scale·√(3/Q), ·)`. Biases
    /// start at zero. Draws happen in canonical flat order.
    pub fn init(
        dims: LayerDims,
        rank: usize,
        activation: Activation,
        with_bias: bool,
        scale: f64,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Self> {
        let mut model = RankRFnn::zeros(dims, rank, activation, with_bias)?;
        model.init_params(scale, rng)?;
        Ok(model)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn hidden_weights(&self) -> &[CpFactorSet] {
        &self.hidden_weights
    }

    pub fn output_weights(&self) -> &Matrix {
        &self.output_weights
    }

    pub fn biases(&self) -> Option<&Biases> {
        self.biases.as_ref()
    }

    pub fn has_bias(&self) -> bool {
        self.biases.is_some()
    }

    fn check_patch(&self, x: &Tensor3) -> Result<()> {
        if x.dims() != self.dims.patch_dims() {
            return Err(Error::shape(format!(
                "patch dims {:?} do not match model input dims {:?}",
                x.dims(),
                self.dims.patch_dims()
            )));
        }
        Ok(())
    }

    /// Forward pass that also returns the per-(neuron, term) spectral
    /// contraction planes the backward pass reuses.
    fn forward_with_planes(&self, x: &Tensor3) -> Result<(ForwardTrace, Vec<Matrix>)> {
        self.check_patch(x)?;
        let q_count = self.dims.hidden_count;
        let mut planes = Vec::with_capacity(q_count * self.rank);
        let mut preactivations = Vec::with_capacity(q_count);
        for (q, factors) in self.hidden_weights.iter().enumerate() {
            let mut z = 0.0;
            for k in 0..self.rank {
                let plane = contract_spectral(x, &factors.spectral()[k])?;
                z += plane.bilinear(&factors.spatial_a()[k], &factors.spatial_b()[k]);
                planes.push(plane);
            }
            if let Some(b) = &self.biases {
                z += b.hidden[q];
            }
            preactivations.push(z);
        }
        let trace = finish_forward(
            preactivations,
            self.activation,
            &self.output_weights,
            self.biases.as_ref(),
        );
        Ok((trace, planes))
    }

    /// Loss and structured gradients for one sample; the loss equals
    /// `cross_entropy(forward(x).probabilities, target)` exactly because
    /// both run the same computation.
    pub fn backward(&self, x: &Tensor3, target: &[f64]) -> Result<(f64, GradientSet)> {
        let mut grad = vec![0.0; self.param_count()];
        let loss = self.accumulate_loss_grad(x, target, &mut grad)?;
        let grads = GradientSet::from_flat(self.dims, self.rank, self.has_bias(), &grad)?;
        Ok((loss, grads))
    }
}

impl Model for RankRFnn {
    fn dims(&self) -> LayerDims {
        self.dims
    }

    fn activation(&self) -> Activation {
        self.activation
    }

    fn param_count(&self) -> usize {
        rank_r_param_count(self.dims, self.rank, self.has_bias())
    }

    fn write_params(&self, out: &mut [f64]) {
        assert_eq!(out.len(), self.param_count());
        let mut pos = 0;
        let mut put = |src: &[f64], out: &mut [f64]| {
            out[pos..pos + src.len()].copy_from_slice(src);
            pos += src.len();
        };
        for factors in &self.hidden_weights {
            for group in [factors.spectral(), factors.spatial_a(), factors.spatial_b()] {
                for v in group {
                    put(v, out);
                }
            }
        }
        put(&self.output_weights.values, out);
        if let Some(b) = &self.biases {
            put(&b.hidden, out);
            put(&b.output, out);
        }
    }

    fn read_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::shape(format!(
                "parameter vector has {} entries, model needs {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut pos = 0;
        let mut get = |dst: &mut [f64]| {
            dst.copy_from_slice(&params[pos..pos + dst.len()]);
            pos += dst.len();
        };
        for factors in self.hidden_weights.iter_mut() {
            for k in 0..self.rank {
                get(&mut factors.spectral_mut()[k]);
            }
            for k in 0..self.rank {
                get(&mut factors.spatial_a_mut()[k]);
            }
            for k in 0..self.rank {
                get(&mut factors.spatial_b_mut()[k]);
            }
        }
        get(&mut self.output_weights.values);
        if let Some(b) = &mut self.biases {
            get(&mut b.hidden);
            get(&mut b.output);
        }
        Ok(())
    }

    fn init_params(&mut self, scale: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Result<()> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid("init scale must be positive and finite"));
        }
        let dims = self.dims;
        let fan = self.rank as f64 * (2 * dims.patch_side + dims.band_count) as f64
            + dims.hidden_count as f64;
        let beta = scale * (6.0 / fan).sqrt() / (self.rank as f64).cbrt();
        let vlimit = scale * (3.0 / dims.hidden_count as f64).sqrt();
        let mut params = vec![0.0; self.param_count()];
        let factor_len = dims.hidden_count * self.rank * (2 * dims.patch_side + dims.band_count);
        for p in params[..factor_len].iter_mut() {
            *p = rng.random_range(-beta..beta);
        }
        let output_len = dims.class_count * dims.hidden_count;
        for p in params[factor_len..factor_len + output_len].iter_mut() {
            *p = rng.random_range(-vlimit..vlimit);
        }
        self.read_params(&params)
    }

    fn forward(&self, x: &Tensor3) -> Result<ForwardTrace> {
        Ok(self.forward_with_planes(x)?.0)
    }

    fn accumulate_loss_grad(&self, x: &Tensor3, target: &[f64], grad: &mut [f64]) -> Result<f64> {
        if grad.len() != self.param_count() {
            return Err(Error::shape(format!(
                "gradient buffer has {} entries, model needs {}",
                grad.len(),
                self.param_count()
            )));
        }
        let (trace, planes) = self.forward_with_planes(x)?;
        let loss = cross_entropy(&trace.probabilities, target)?;
        let dims = self.dims;
        let (q_count, c_count) = (dims.hidden_count, dims.class_count);
        let s = dims.patch_side;
        let b = dims.band_count;

        // diff_c = p_c − t_c drives both layers.
        let diff: Vec<f64> = trace
            .probabilities
            .iter()
            .zip(target)
            .map(|(p, t)| p - t)
            .collect();
        // delta_q = g'(z_q) · Σ_c diff_c · V[c][q].
        let mut delta = vec![0.0; q_count];
        for (c, &d) in diff.iter().enumerate() {
            for (dq, &v) in delta.iter_mut().zip(self.output_weights.row(c)) {
                *dq += d * v;
            }
        }
        for (dq, &z) in delta.iter_mut().zip(&trace.preactivations) {
            *dq *= self.activation.derivative(z);
        }

        let per_neuron = self.rank * (2 * s + b);
        for (q, factors) in self.hidden_weights.iter().enumerate() {
            let dq = delta[q];
            if dq == 0.0 {
                continue;
            }
            let base = q * per_neuron;
            for k in 0..self.rank {
                let plane = &planes[q * self.rank + k];
                let wa = &factors.spatial_a()[k];
                let wb = &factors.spatial_b()[k];
                // Spectral partial: patch contracted over both spatial modes.
                let gspec = &mut grad[base + k * b..base + (k + 1) * b];
                for (m, g) in gspec.iter_mut().enumerate() {
                    let slice = x.mode1_slice(m);
                    let mut acc = 0.0;
                    for (j, &aj) in wa.iter().enumerate() {
                        acc += aj * dot(&slice[j * s..(j + 1) * s], wb);
                    }
                    *g += dq * acc;
                }
                // First spatial partial: plane rows reduced against the
                // other spatial factor.
                let ga_base = base + self.rank * b + k * s;
                for j in 0..s {
                    grad[ga_base + j] += dq * dot(plane.row(j), wb);
                }
                // Second spatial partial: plane columns reduced likewise.
                let gb_base = base + self.rank * (b + s) + k * s;
                for (j, &aj) in wa.iter().enumerate() {
                    let row = plane.row(j);
                    for (i, &pv) in row.iter().enumerate() {
                        grad[gb_base + i] += dq * aj * pv;
                    }
                }
            }
        }

        let out_base = q_count * per_neuron;
        for (c, &d) in diff.iter().enumerate() {
            let row = &mut grad[out_base + c * q_count..out_base + (c + 1) * q_count];
            for (g, &u) in row.iter_mut().zip(&trace.hidden) {
                *g += d * u;
            }
        }
        if self.has_bias() {
            let bias_base = out_base + c_count * q_count;
            for (g, &dq) in grad[bias_base..bias_base + q_count].iter_mut().zip(&delta) {
                *g += dq;
            }
            for (g, &d) in grad[bias_base + q_count..].iter_mut().zip(&diff) {
                *g += d;
            }
        }
        Ok(loss)
    }
}

/// One-hidden-layer network with full (unfactorized) hidden weight tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFnn {
    dims: LayerDims,
    hidden_weights: Vec<Tensor3>,
    output_weights: Matrix,
    activation: Activation,
    biases: Option<Biases>,
}

impl DenseFnn {
    pub fn zeros(dims: LayerDims, activation: Activation, with_bias: bool) -> Result<Self> {
        dims.validate()?;
        let hidden_weights = (0..dims.hidden_count)
            .map(|_| Tensor3::zeros(dims.patch_dims()))
            .collect::<Result<Vec<_>>>()?;
        Ok(DenseFnn {
            dims,
            hidden_weights,
            output_weights: Matrix::zeros(dims.class_count, dims.hidden_count),
            activation,
            biases: with_bias.then(|| Biases {
                hidden: vec![0.0; dims.hidden_count],
                output: vec![0.0; dims.class_count],
            }),
        })
    }

    /// Random initialization: hidden weights fan-in uniform over each
    /// neuron's `b·s²` inputs, output matrix as in [`RankRFnn::init`].
    pub fn init(
        dims: LayerDims,
        activation: Activation,
        with_bias: bool,
        scale: f64,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Self> {
        let mut model = DenseFnn::zeros(dims, activation, with_bias)?;
        model.init_params(scale, rng)?;
        Ok(model)
    }

    /// Materializes a factorized model's weights into a dense twin with
    /// identical outputs (up to float associativity).
    pub fn from_rank_r(model: &RankRFnn) -> Self {
        DenseFnn {
            dims: model.dims,
            hidden_weights: model.hidden_weights.iter().map(cp_reconstruct).collect(),
            output_weights: model.output_weights.clone(),
            activation: model.activation,
            biases: model.biases.clone(),
        }
    }

    pub fn hidden_weights(&self) -> &[Tensor3] {
        &self.hidden_weights
    }

    pub fn output_weights(&self) -> &Matrix {
        &self.output_weights
    }

    pub fn biases(&self) -> Option<&Biases> {
        self.biases.as_ref()
    }

    pub fn has_bias(&self) -> bool {
        self.biases.is_some()
    }

    fn check_patch(&self, x: &Tensor3) -> Result<()> {
        if x.dims() != self.dims.patch_dims() {
            return Err(Error::shape(format!(
                "patch dims {:?} do not match model input dims {:?}",
                x.dims(),
                self.dims.patch_dims()
            )));
        }
        Ok(())
    }
}

impl Model for DenseFnn {
    fn dims(&self) -> LayerDims {
        self.dims
    }

    fn activation(&self) -> Activation {
        self.activation
    }

    fn param_count(&self) -> usize {
        dense_param_count(self.dims, self.has_bias())
    }

    fn write_params(&self, out: &mut [f64]) {
        assert_eq!(out.len(), self.param_count());
        let mut pos = 0;
        let mut put = |src: &[f64], out: &mut [f64]| {
            out[pos..pos + src.len()].copy_from_slice(src);
            pos += src.len();
        };
        for w in &self.hidden_weights {
            put(w.values(), out);
        }
        put(&self.output_weights.values, out);
        if let Some(b) = &self.biases {
            put(&b.hidden, out);
            put(&b.output, out);
        }
    }

    fn read_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::shape(format!(
                "parameter vector has {} entries, model needs {}",
                params.len(),
                self.param_count()
            )));
        }
        let dims = self.dims.patch_dims();
        let plane = dims.0 * dims.1 * dims.2;
        let mut pos = 0;
        for w in self.hidden_weights.iter_mut() {
            *w = Tensor3::from_parts(dims, params[pos..pos + plane].to_vec());
            pos += plane;
        }
        let out_len = self.output_weights.values.len();
        self.output_weights
            .values
            .copy_from_slice(&params[pos..pos + out_len]);
        pos += out_len;
        if let Some(b) = &mut self.biases {
            let hidden_len = b.hidden.len();
            b.hidden.copy_from_slice(&params[pos..pos + hidden_len]);
            pos += hidden_len;
            let output_len = b.output.len();
            b.output.copy_from_slice(&params[pos..pos + output_len]);
        }
        Ok(())
    }

    fn init_params(&mut self, scale: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Result<()> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid("init scale must be positive and finite"));
        }
        let dims = self.dims;
        let fan_in = (dims.band_count * dims.patch_side * dims.patch_side) as f64;
        let wlimit = scale * (3.0 / fan_in).sqrt();
        let vlimit = scale * (3.0 / dims.hidden_count as f64).sqrt();
        let mut params = vec![0.0; self.param_count()];
        let weight_len = dims.hidden_count * dims.band_count * dims.patch_side * dims.patch_side;
        for p in params[..weight_len].iter_mut() {
            *p = rng.random_range(-wlimit..wlimit);
        }
        let output_len = dims.class_count * dims.hidden_count;
        for p in params[weight_len..weight_len + output_len].iter_mut() {
            *p = rng.random_range(-vlimit..vlimit);
        }
        self.read_params(&params)
    }

    fn forward(&self, x: &Tensor3) -> Result<ForwardTrace> {
        self.check_patch(x)?;
        let mut preactivations = Vec::with_capacity(self.dims.hidden_count);
        for (q, w) in self.hidden_weights.iter().enumerate() {
            let mut z = inner(w, x)?;
            if let Some(b) = &self.biases {
                z += b.hidden[q];
            }
            preactivations.push(z);
        }
        Ok(finish_forward(
            preactivations,
            self.activation,
            &self.output_weights,
            self.biases.as_ref(),
        ))
    }

    fn accumulate_loss_grad(&self, x: &Tensor3, target: &[f64], grad: &mut [f64]) -> Result<f64> {
        if grad.len() != self.param_count() {
            return Err(Error::shape(format!(
                "gradient buffer has {} entries, model needs {}",
                grad.len(),
                self.param_count()
            )));
        }
        let trace = self.forward(x)?;
        let loss = cross_entropy(&trace.probabilities, target)?;
        let (q_count, c_count) = (self.dims.hidden_count, self.dims.class_count);
        let diff: Vec<f64> = trace
            .probabilities
            .iter()
            .zip(target)
            .map(|(p, t)| p - t)
            .collect();
        let mut delta = vec![0.0; q_count];
        for (c, &d) in diff.iter().enumerate() {
            for (dq, &v) in delta.iter_mut().zip(self.output_weights.row(c)) {
                *dq += d * v;
            }
        }
        for (dq, &z) in delta.iter_mut().zip(&trace.preactivations) {
            *dq *= self.activation.derivative(z);
        }

        // Hidden weight gradient for neuron q is delta_q · x.
        let plane = x.len();
        for (q, &dq) in delta.iter().enumerate() {
            if dq == 0.0 {
                continue;
            }
            let gw = &mut grad[q * plane..(q + 1) * plane];
            for (g, &xv) in gw.iter_mut().zip(x.values()) {
                *g += dq * xv;
            }
        }
        let out_base = q_count * plane;
        for (c, &d) in diff.iter().enumerate() {
            let row = &mut grad[out_base + c * q_count..out_base + (c + 1) * q_count];
            for (g, &u) in row.iter_mut().zip(&trace.hidden) {
                *g += d * u;
            }
        }
        if self.has_bias() {
            let bias_base = out_base + c_count * q_count;
            for (g, &dq) in grad[bias_base..bias_base + q_count].iter_mut().zip(&delta) {
                *g += dq;
            }
            for (g, &d) in grad[bias_base + q_count..].iter_mut().zip(&diff) {
                *g += d;
            }
        }
        Ok(loss)
    }
}

/// Applies the activation, output layer, and softmax to pre-activations.
fn finish_forward(
    preactivations: Vec<f64>,
    activation: Activation,
    output_weights: &Matrix,
    biases: Option<&Biases>,
) -> ForwardTrace {
    let hidden: Vec<f64> = preactivations.iter().map(|&z| activation.apply(z)).collect();
    let mut logits = Vec::with_capacity(output_weights.rows);
    for c in 0..output_weights.rows {
        let mut l = dot(output_weights.row(c), &hidden);
        if let Some(b) = biases {
            l += b.output[c];
        }
        logits.push(l);
    }
    let probabilities = softmax(&logits);
    ForwardTrace {
        preactivations,
        hidden,
        logits,
        probabilities,
    }
}

/// Numerically stable softmax: the maximum logit is subtracted before
/// exponentiation, so uniform logits give exactly uniform probabilities.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of a probability vector against a one-hot target:
/// `−ln(p_target)` with the probability clamped to at least [`PROB_FLOOR`].
pub fn cross_entropy(probabilities: &[f64], target: &[f64]) -> Result<f64> {
    if probabilities.len() != target.len() {
        return Err(Error::shape(format!(
            "probability vector has {} classes, target has {}",
            probabilities.len(),
            target.len()
        )));
    }
    let target_class = one_hot_class(target)?;
    let p = probabilities[target_class];
    if p.is_nan() {
        // f64::max would clamp NaN to the floor and hide a numerically
        // destroyed model; divergence detection needs the NaN loss.
        return Ok(f64::NAN);
    }
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Index of the single 1 in a one-hot vector.
pub fn one_hot_class(target: &[f64]) -> Result<usize> {
    let mut hot = None;
    for (c, &t) in target.iter().enumerate() {
        if t == 1.0 {
            if hot.is_some() {
                return Err(Error::invalid("target has more than one active class"));
            }
            hot = Some(c);
        } else if t != 0.0 {
            return Err(Error::invalid(format!(
                "target entry {t} is neither 0 nor 1"
            )));
        }
    }
    hot.ok_or_else(|| Error::invalid("target has no active class"))
}

/// Builds the one-hot vector for a class id.
pub fn one_hot(class: usize, class_count: usize) -> Vec<f64> {
    let mut v = vec![0.0; class_count];
    v[class] = 1.0;
    v
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Predicted class for one patch: argmax of the class probabilities, with
/// ties broken by the lowest class index.
pub fn predict<M: Model + ?Sized>(model: &M, x: &Tensor3) -> Result<usize> {
    Ok(argmax_lowest(&model.forward(x)?.probabilities))
}

/// Either model variant, as read back from disk.
#[derive(Debug, Clone)]
pub enum AnyModel {
    RankR(RankRFnn),
    Dense(DenseFnn),
}

impl AnyModel {
    pub fn variant_name(&self) -> &'static str {
        match self {
            AnyModel::RankR(_) => "rank_r_fnn",
            AnyModel::Dense(_) => "dense_fnn",
        }
    }

    pub fn as_model(&self) -> &dyn Model {
        match self {
            AnyModel::RankR(m) => m,
            AnyModel::Dense(m) => m,
        }
    }

    pub fn as_model_mut(&mut self) -> &mut dyn Model {
        match self {
            AnyModel::RankR(m) => m,
            AnyModel::Dense(m) => m,
        }
    }
}

impl Model for AnyModel {
    fn dims(&self) -> LayerDims {
        self.as_model().dims()
    }

    fn activation(&self) -> Activation {
        self.as_model().activation()
    }

    fn param_count(&self) -> usize {
        self.as_model().param_count()
    }

    fn write_params(&self, out: &mut [f64]) {
        self.as_model().write_params(out)
    }

    fn read_params(&mut self, params: &[f64]) -> Result<()> {
        self.as_model_mut().read_params(params)
    }

    fn init_params(&mut self, scale: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Result<()> {
        self.as_model_mut().init_params(scale, rng)
    }

    fn forward(&self, x: &Tensor3) -> Result<ForwardTrace> {
        self.as_model().forward(x)
    }

    fn accumulate_loss_grad(&self, x: &Tensor3, target: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.as_model().accumulate_loss_grad(x, target, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use rand::Rng;

    pub(super) fn small_dims() -> LayerDims {
        LayerDims {
            hidden_count: 2,
            class_count: 3,
            patch_side: 3,
            band_count: 4,
        }
    }

    pub(super) fn random_patch(rng: &mut impl Rng, dims: LayerDims) -> Tensor3 {
        Tensor3::from_fn(dims.patch_dims(), |_, _, _| rng.random_range(0.0..1.0)).unwrap()
    }

    pub(super) fn random_model(rng: &mut impl Rng, dims: LayerDims, rank: usize, with_bias: bool) -> RankRFnn {
        let mut model = RankRFnn::zeros(dims, rank, Activation::Sigmoid, with_bias).unwrap();
        let params: Vec<f64> = (0..model.param_count())
            .map(|_| rng.random_range(-0.5..0.5))
            .collect();
        model.read_params(&params).unwrap();
        model
    }

    #[test]
    fn zero_model_gives_uniform_probabilities() {
        let dims = small_dims();
        let model = RankRFnn::zeros(dims, 2, Activation::Sigmoid, false).unwrap();
        let x = random_patch(&mut rng_from(31), dims);
        let trace = model.forward(&x).unwrap();
        for &u in &trace.hidden {
            assert_eq!(u, 0.5);
        }
        for &p in &trace.probabilities {
            assert!((p - 1.0 / 3.0).abs() <= 1e-15);
        }
        assert_eq!(predict(&model, &x).unwrap(), 0);
    }

    #[test]
    fn one_hot_chain_matches_hand_evaluation() {
        // Q=1, R=1, C=2; factors select x[2][1][0] = 0.7; V = [[1], [-1]].
        let dims = LayerDims {
            hidden_count: 1,
            class_count: 2,
            patch_side: 3,
            band_count: 4,
        };
        let mut model = RankRFnn::zeros(dims, 1, Activation::Sigmoid, false).unwrap();
        let mut params = vec![0.0; model.param_count()];
        params[2] = 1.0; // spectral one-hot at m=2
        params[4 + 1] = 1.0; // spatial-a one-hot at j=1
        params[4 + 3] = 1.0; // spatial-b one-hot at i=0
        params[10] = 1.0; // V[0][0]
        params[11] = -1.0; // V[1][0]
        model.read_params(&params).unwrap();
        let mut x = Tensor3::zeros(dims.patch_dims()).unwrap();
        x = Tensor3::from_fn(x.dims(), |m, j, i| if (m, j, i) == (2, 1, 0) { 0.7 } else { 0.3 })
            .unwrap();
        let trace = model.forward(&x).unwrap();
        let sig = 0.6681877721681662; // sigmoid(0.7)
        assert!((trace.preactivations[0] - 0.7).abs() <= 1e-15);
        assert!((trace.hidden[0] - sig).abs() <= 1e-15);
        assert!((trace.logits[0] - sig).abs() <= 1e-15);
        assert!((trace.logits[1] + sig).abs() <= 1e-15);
        assert!((trace.probabilities[0] - 0.7918932691433087).abs() <= 1e-12);
        assert!((trace.probabilities[1] - 0.2081067308566913).abs() <= 1e-12);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = rng_from(32);
        let dims = small_dims();
        for _ in 0..20 {
            let model = random_model(&mut rng, dims, 2, false);
            let x = random_patch(&mut rng, dims);
            let trace = model.forward(&x).unwrap();
            let sum: f64 = trace.probabilities.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(trace.probabilities.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn constant_output_column_shift_keeps_probabilities() {
        let mut rng = rng_from(33);
        let dims = small_dims();
        let model = random_model(&mut rng, dims, 2, false);
        let x = random_patch(&mut rng, dims);
        let base = model.forward(&x).unwrap();

        let mut shifted = model.clone();
        let mut params = vec![0.0; shifted.param_count()];
        shifted.write_params(&mut params);
        // V occupies the last C·Q slots here (no biases); shift column 0.
        let out_base = params.len() - dims.class_count * dims.hidden_count;
        for c in 0..dims.class_count {
            params[out_base + c * dims.hidden_count] += 0.37;
        }
        shifted.read_params(&params).unwrap();
        let moved = shifted.forward(&x).unwrap();
        for (p, q) in base.probabilities.iter().zip(&moved.probabilities) {
            assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn cross_entropy_frozen_values() {
        assert_eq!(
            cross_entropy(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap(),
            0.0
        );
        let uniform = vec![0.25; 4];
        let ce = cross_entropy(&uniform, &one_hot(2, 4)).unwrap();
        assert!((ce - 1.3862943611198906).abs() <= 1e-12);
        let ce = cross_entropy(&[0.7, 0.2, 0.1], &one_hot(0, 3)).unwrap();
        assert!((ce - 0.35667494393873245).abs() <= 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_targets() {
        let p = vec![0.5, 0.5];
        assert!(cross_entropy(&p, &[1.0, 1.0]).is_err());
        assert!(cross_entropy(&p, &[0.0, 0.0]).is_err());
        assert!(cross_entropy(&p, &[0.5, 0.5]).is_err());
        assert!(cross_entropy(&p, &[1.0]).is_err());
    }

    #[test]
    fn cross_entropy_clamps_vanishing_probability() {
        let ce = cross_entropy(&[0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert_eq!(ce, -PROB_FLOOR.ln());
        assert!(ce > 0.0 && ce.is_finite());
    }

    #[test]
    fn loss_is_nonnegative() {
        let mut rng = rng_from(34);
        let dims = small_dims();
        for _ in 0..20 {
            let model = random_model(&mut rng, dims, 2, false);
            let x = random_patch(&mut rng, dims);
            let target = one_hot(rng.random_range(0..dims.class_count), dims.class_count);
            let (loss, _) = model.backward(&x, &target).unwrap();
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn saturated_correct_prediction_zeroes_all_gradients() {
        // Output weights of ±4000 drive the logit gap past the point where
        // the softmax underflows to an exact one-hot, so p − t is exactly 0.
        let dims = LayerDims {
            hidden_count: 1,
            class_count: 2,
            patch_side: 3,
            band_count: 4,
        };
        let mut model = RankRFnn::zeros(dims, 1, Activation::Sigmoid, false).unwrap();
        let mut params = vec![0.0; model.param_count()];
        params[0] = 0.3; // some nonzero factor weight
        params[10] = 4000.0; // V[0][0]
        params[11] = -4000.0; // V[1][0]
        model.read_params(&params).unwrap();
        let x = random_patch(&mut rng_from(35), dims);
        let trace = model.forward(&x).unwrap();
        assert_eq!(trace.probabilities, vec![1.0, 0.0]);
        let (loss, grads) = model.backward(&x, &[1.0, 0.0]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.output_weights.values.iter().all(|&g| g == 0.0));
        for factors in &grads.hidden_weights {
            for group in [factors.spectral(), factors.spatial_a(), factors.spatial_b()] {
                assert!(group.iter().flatten().all(|&g| g == 0.0));
            }
        }
    }

    #[test]
    fn one_hot_spatial_factors_make_spectral_gradient_a_fiber() {
        // R=1, spatial factors one-hot at (j0, i0) = (1, 2): the spectral
        // partial of z is the fiber x[·][1][2], so the gradient is that
        // fiber scaled by the neuron's delta.
        let dims = LayerDims {
            hidden_count: 1,
            class_count: 2,
            patch_side: 3,
            band_count: 4,
        };
        let mut model = RankRFnn::zeros(dims, 1, Activation::Sigmoid, false).unwrap();
        let mut params = vec![0.0; model.param_count()];
        for m in 0..4 {
            params[m] = 0.2 + 0.1 * m as f64; // spectral factor
        }
        params[4 + 1] = 1.0; // spatial-a one-hot at j=1
        params[7 + 2] = 1.0; // spatial-b one-hot at i=2
        params[10] = 0.8; // V[0][0]
        params[11] = -0.4; // V[1][0]
        model.read_params(&params).unwrap();
        let x = random_patch(&mut rng_from(36), dims);
        let trace = model.forward(&x).unwrap();
        let target = one_hot(0, 2);
        let (_, grads) = model.backward(&x, &target).unwrap();
        let diff0 = trace.probabilities[0] - 1.0;
        let diff1 = trace.probabilities[1];
        let delta = Activation::Sigmoid.derivative(trace.preactivations[0])
            * (diff0 * 0.8 + diff1 * -0.4);
        for m in 0..4 {
            let expected = delta * x.get(m, 1, 2);
            let got = grads.hidden_weights[0].spectral()[0][m];
            assert!((got - expected).abs() <= 1e-12, "band {m}: {got} vs {expected}");
        }
    }

    #[test]
    fn backward_loss_equals_forward_loss_exactly() {
        let mut rng = rng_from(37);
        let dims = small_dims();
        for with_bias in [false, true] {
            let model = random_model(&mut rng, dims, 2, with_bias);
            let x = random_patch(&mut rng, dims);
            let target = one_hot(1, dims.class_count);
            let trace = model.forward(&x).unwrap();
            let direct = cross_entropy(&trace.probabilities, &target).unwrap();
            let (loss, _) = model.backward(&x, &target).unwrap();
            assert_eq!(loss, direct);
        }
    }

    #[test]
    fn dense_twin_reproduces_factorized_forward() {
        let mut rng = rng_from(38);
        let dims = small_dims();
        for with_bias in [false, true] {
            let model = random_model(&mut rng, dims, 3, with_bias);
            let dense = DenseFnn::from_rank_r(&model);
            let x = random_patch(&mut rng, dims);
            let a = model.forward(&x).unwrap();
            let b = dense.forward(&x).unwrap();
            for (lists_a, lists_b) in [
                (&a.preactivations, &b.preactivations),
                (&a.hidden, &b.hidden),
                (&a.logits, &b.logits),
                (&a.probabilities, &b.probabilities),
            ] {
                for (va, vb) in lists_a.iter().zip(lists_b) {
                    assert!((va - vb).abs() <= 1e-12, "{va} vs {vb}");
                }
            }
        }
    }

    #[test]
    fn dense_zero_model_is_uniform() {
        let dims = small_dims();
        let model = DenseFnn::zeros(dims, Activation::Sigmoid, false).unwrap();
        let x = random_patch(&mut rng_from(39), dims);
        let trace = model.forward(&x).unwrap();
        for &p in &trace.probabilities {
            assert!((p - 1.0 / 3.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn param_counts_match_formulas() {
        let dims = LayerDims {
            hidden_count: 10,
            class_count: 4,
            patch_side: 9,
            band_count: 42,
        };
        assert_eq!(rank_r_param_count(dims, 3, false), 1840);
        assert_eq!(dense_param_count(dims, false), 34060);
        assert_eq!(rank_r_param_count(dims, 3, true), 1840 + 14);
        assert_eq!(dense_param_count(dims, true), 34060 + 14);
        let model = RankRFnn::zeros(dims, 3, Activation::Sigmoid, false).unwrap();
        assert_eq!(model.param_count(), 1840);
        let dense = DenseFnn::zeros(dims, Activation::Sigmoid, false).unwrap();
        assert_eq!(dense.param_count(), 34060);
    }

    #[test]
    fn param_counts_cross_over_when_rank_covers_the_tensor() {
        // With s=2, b=4: s²·b = 16 = R·(2s+b) at R=2.
        let dims = LayerDims {
            hidden_count: 5,
            class_count: 3,
            patch_side: 2,
            band_count: 4,
        };
        assert_eq!(
            rank_r_param_count(dims, 2, false),
            dense_param_count(dims, false)
        );
    }

    #[test]
    fn predict_takes_lowest_index_on_ties() {
        assert_eq!(argmax_lowest(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax_lowest(&[-1.0, 3.0, 0.0, 0.0]), 1);
        assert_eq!(argmax_lowest(&[0.1, 0.4, 0.4]), 1);
    }

    #[test]
    fn predict_is_argmax_of_forward_probabilities() {
        let mut rng = rng_from(40);
        let dims = small_dims();
        for _ in 0..10 {
            let model = random_model(&mut rng, dims, 2, false);
            let x = random_patch(&mut rng, dims);
            let trace = model.forward(&x).unwrap();
            assert_eq!(
                predict(&model, &x).unwrap(),
                argmax_lowest(&trace.probabilities)
            );
        }
    }

    #[test]
    fn forward_rejects_wrong_patch_shape() {
        let dims = small_dims();
        let model = RankRFnn::zeros(dims, 2, Activation::Sigmoid, false).unwrap();
        let x = Tensor3::zeros((4, 3, 2)).unwrap();
        assert!(matches!(model.forward(&x), Err(Error::Shape(_))));
        let dense = DenseFnn::zeros(dims, Activation::Sigmoid, false).unwrap();
        assert!(matches!(dense.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn param_roundtrip_is_identity() {
        let mut rng = rng_from(41);
        let dims = small_dims();
        for with_bias in [false, true] {
            let model = random_model(&mut rng, dims, 2, with_bias);
            let mut params = vec![0.0; model.param_count()];
            model.write_params(&mut params);
            let mut copy = RankRFnn::zeros(dims, 2, Activation::Sigmoid, with_bias).unwrap();
            copy.read_params(&params).unwrap();
            assert_eq!(model, copy);
        }
    }

    #[test]
    fn init_respects_shape_and_limits() {
        let mut rng = rng_from(42);
        let dims = LayerDims {
            hidden_count: 10,
            class_count: 4,
            patch_side: 9,
            band_count: 42,
        };
        let model = RankRFnn::init(dims, 3, Activation::Sigmoid, false, 1.0, &mut rng).unwrap();
        let fan: f64 = 3.0 * 60.0 + 10.0;
        let beta = (6.0 / fan).sqrt() / 3f64.cbrt();
        for factors in model.hidden_weights() {
            for group in [factors.spectral(), factors.spatial_a(), factors.spatial_b()] {
                assert!(group.iter().flatten().all(|v| v.abs() < beta));
            }
        }
        let vlimit = (3.0 / 10.0f64).sqrt();
        assert!(model.output_weights().values.iter().all(|v| v.abs() < vlimit));
        // Biases start at zero when enabled.
        let biased = RankRFnn::init(dims, 3, Activation::Sigmoid, true, 1.0, &mut rng).unwrap();
        let b = biased.biases().unwrap();
        assert!(b.hidden.iter().chain(&b.output).all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let dims = small_dims();
        let a = RankRFnn::init(dims, 2, Activation::Sigmoid, false, 1.0, &mut rng_from(7)).unwrap();
        let b = RankRFnn::init(dims, 2, Activation::Sigmoid, false, 1.0, &mut rng_from(7)).unwrap();
        assert_eq!(a, b);
        let c = RankRFnn::init(dims, 2, Activation::Sigmoid, false, 1.0, &mut rng_from(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gradient_set_mirrors_model_shape() {
        let mut rng = rng_from(43);
        let dims = small_dims();
        let model = random_model(&mut rng, dims, 2, true);
        let x = random_patch(&mut rng, dims);
        let (_, grads) = model.backward(&x, &one_hot(0, dims.class_count)).unwrap();
        assert_eq!(grads.hidden_weights.len(), dims.hidden_count);
        for factors in &grads.hidden_weights {
            assert_eq!(factors.rank(), 2);
            assert_eq!(factors.mode_lens(), (4, 3, 3));
        }
        assert_eq!(grads.output_weights.rows, dims.class_count);
        assert_eq!(grads.output_weights.cols, dims.hidden_count);
        let biases = grads.biases.as_ref().unwrap();
        assert_eq!(biases.hidden.len(), dims.hidden_count);
        assert_eq!(biases.output.len(), dims.class_count);
        let all_finite = grads
            .hidden_weights
            .iter()
            .flat_map(|f| f.spectral().iter().chain(f.spatial_a()).chain(f.spatial_b()))
            .flatten()
            .chain(&grads.output_weights.values)
            .all(|g| g.is_finite());
        assert!(all_finite);
    }
}

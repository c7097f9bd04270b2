//! Finite-difference verification of the analytic gradients.
//!
//! Each trial draws a small random model (Q=2, R=2, s=3, b=4, C=3 by
//! default), parameters uniform on (−0.5, 0.5), a patch with entries in
//! [0, 1), and a random target class, then compares every coordinate of the
//! backward gradient against a central difference of the loss.

use rand::Rng;

use crate::error::Result;
use crate::model::{cross_entropy, one_hot, Activation, DenseFnn, LayerDims, Model, RankRFnn};
use crate::seed::{mix, rng_from};
use crate::tensor::Tensor3;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Largest acceptable relative error, with denominator `1 + |fd|`.
pub const FD_TOLERANCE: f64 = 1e-4;

/// Shape used for the standard check.
pub fn check_dims() -> LayerDims {
    LayerDims {
        hidden_count: 2,
        class_count: 3,
        patch_side: 3,
        band_count: 4,
    }
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub trials: usize,
    /// Parameters compared across all trials.
    pub params_checked: usize,
    /// Worst relative error seen, `|analytic − fd| / (1 + |fd|)`.
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= FD_TOLERANCE
    }
}

/// Checks the factorized model's gradients over seeded random trials.
pub fn check_rank_r(
    trials: usize,
    seed: u64,
    activation: Activation,
    with_bias: bool,
) -> Result<GradCheckReport> {
    let dims = check_dims();
    run_trials(trials, seed, |rng| {
        random_rank_r(rng, dims, 2, activation, with_bias)
    })
}

/// Checks the dense model's gradients over seeded random trials.
pub fn check_dense(
    trials: usize,
    seed: u64,
    activation: Activation,
    with_bias: bool,
) -> Result<GradCheckReport> {
    let dims = check_dims();
    run_trials(trials, seed, |rng| {
        random_dense(rng, dims, activation, with_bias)
    })
}

fn run_trials<M: Model + Clone>(
    trials: usize,
    seed: u64,
    mut make_model: impl FnMut(&mut rand_chacha::ChaCha8Rng) -> Result<M>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        trials,
        params_checked: 0,
        max_rel_err: 0.0,
    };
    for trial in 0..trials {
        let mut rng = rng_from(mix(seed, &[trial as u64]));
        let model = make_model(&mut rng)?;
        let dims = model.dims();
        let x = Tensor3::from_fn(dims.patch_dims(), |_, _, _| rng.random_range(0.0..1.0))?;
        let target = one_hot(rng.random_range(0..dims.class_count), dims.class_count);
        let worst = max_rel_err(&model, &x, &target)?;
        report.params_checked += model.param_count();
        report.max_rel_err = report.max_rel_err.max(worst);
    }
    Ok(report)
}

fn random_rank_r(
    rng: &mut impl Rng,
    dims: LayerDims,
    rank: usize,
    activation: Activation,
    with_bias: bool,
) -> Result<RankRFnn> {
    let mut model = RankRFnn::zeros(dims, rank, activation, with_bias)?;
    let params: Vec<f64> = (0..model.param_count())
        .map(|_| rng.random_range(-0.5..0.5))
        .collect();
    model.read_params(&params)?;
    Ok(model)
}

fn random_dense(
    rng: &mut impl Rng,
    dims: LayerDims,
    activation: Activation,
    with_bias: bool,
) -> Result<DenseFnn> {
    let mut model = DenseFnn::zeros(dims, activation, with_bias)?;
    let params: Vec<f64> = (0..model.param_count())
        .map(|_| rng.random_range(-0.5..0.5))
        .collect();
    model.read_params(&params)?;
    Ok(model)
}

fn loss_of<M: Model>(model: &M, x: &Tensor3, target: &[f64]) -> Result<f64> {
    cross_entropy(&model.forward(x)?.probabilities, target)
}

/// Worst relative error over every parameter of one model/sample pair.
fn max_rel_err<M: Model + Clone>(model: &M, x: &Tensor3, target: &[f64]) -> Result<f64> {
    let count = model.param_count();
    let mut analytic = vec![0.0; count];
    model.accumulate_loss_grad(x, target, &mut analytic)?;
    let mut params = vec![0.0; count];
    model.write_params(&mut params);
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for idx in 0..count {
        let orig = params[idx];
        params[idx] = orig + FD_STEP;
        probe.read_params(&params)?;
        let plus = loss_of(&probe, x, target)?;
        params[idx] = orig - FD_STEP;
        probe.read_params(&params)?;
        let minus = loss_of(&probe, x, target)?;
        params[idx] = orig;
        let fd = (plus - minus) / (2.0 * FD_STEP);
        let rel = (analytic[idx] - fd).abs() / (1.0 + fd.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

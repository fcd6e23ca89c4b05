//! Data-consistency strategies for conditional sampling: the learned
//! residual update, the gradient-guidance and pseudo-inverse baselines,
//! and the sampler that plugs any of them into the reverse process.
//!
//! Measurements and operators live in [0,1]; the diffusion walks
//! [-1,1]. Every strategy modifies the clean-image estimate between the
//! Tweedie prediction and the posterior step, except the gradient
//! baseline, which corrects the stepped noisy image directly.

use rand::Rng;

use crate::autodiff::Tape;
use crate::denoiser::{
    guided_step, DenoiserModel, EpsPredictor, StepResult, VarianceMode, IMAGE_CHANNELS,
};
use crate::error::{Error, Result};
use crate::nn::{Backbone, NetConfig};
use crate::operators::DegradationOperator;
use crate::rng;
use crate::schedule::DiffusionSteps;
use crate::tensor::Tensor;

/// [-1,1] model space to [0,1] image space.
pub fn to_unit(x: &Tensor) -> Tensor {
    x.affine(0.5, 0.5)
}

/// [0,1] image space to [-1,1] model space.
pub fn to_model(x: &Tensor) -> Tensor {
    x.affine(2.0, -1.0)
}

pub const DPS_DEFAULT_ZETA: f64 = 1.0;

/// Pseudo-inverse correction scale: full replacement on clean
/// measurements, half strength under noise.
pub fn default_ddnm_scale(sigma_y: f64) -> f64 {
    if sigma_y > 0.0 {
        0.5
    } else {
        1.0
    }
}

/// A residual predictor `(x0_hat, y_lifted, t) -> correction`; the
/// update subtracts its output from the estimate with no extra scaling.
pub trait ResidualModel {
    fn residual(&self, x0_hat: &Tensor, y_lifted: &Tensor, t: usize) -> Result<Tensor>;
}

/// The learned consistency network: 6 input channels (estimate and
/// lifted measurement), 3 output channels, same backbone family as the
/// denoiser.
#[derive(Clone)]
pub struct ConsistencyModel {
    net: Backbone,
}

impl ConsistencyModel {
    pub fn new(net: Backbone) -> Result<Self> {
        if net.config().in_channels != 2 * IMAGE_CHANNELS
            || net.config().out_channels != IMAGE_CHANNELS
        {
            return Err(Error::invalid(
                "consistency network needs 6 input and 3 output channels",
            ));
        }
        Ok(ConsistencyModel { net })
    }

    pub fn init(mut cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.in_channels = 2 * IMAGE_CHANNELS;
        cfg.out_channels = IMAGE_CHANNELS;
        // a distinct stream index keeps the init draw independent of a
        // denoiser seeded with the same value
        let mut r = rng::stream(seed, rng::salt::INIT, 1);
        ConsistencyModel::new(Backbone::init(cfg, &mut r)?)
    }

    pub fn net(&self) -> &Backbone {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Backbone {
        &mut self.net
    }

    /// Tape-resident residual for training; both inputs in model space.
    pub fn residual_on_tape(
        &self,
        tape: &mut Tape,
        x0_hat: crate::autodiff::Var,
        y_lifted: crate::autodiff::Var,
        t: usize,
        train_params: bool,
    ) -> Result<(crate::autodiff::Var, Vec<crate::autodiff::Var>)> {
        let joint = tape.concat_ch(x0_hat, y_lifted)?;
        self.net.forward(tape, joint, t, train_params)
    }
}

impl ResidualModel for ConsistencyModel {
    fn residual(&self, x0_hat: &Tensor, y_lifted: &Tensor, t: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        tape.set_recording(false);
        let a = tape.leaf_from(x0_hat, false);
        let b = tape.leaf_from(y_lifted, false);
        let (out, _) = self.residual_on_tape(&mut tape, a, b, t, false)?;
        Ok(tape.value(out).clone())
    }
}

/// `x0_hat - residual`, the learned consistency update (model space).
pub fn ddc_update(
    x0_hat: &Tensor,
    y_lifted: &Tensor,
    t: usize,
    model: &dyn ResidualModel,
) -> Result<Tensor> {
    let delta = model.residual(x0_hat, y_lifted, t)?;
    x0_hat.sub(&delta)
}

/// Pseudo-inverse (range-null) update: pull the estimate's range-space
/// component toward the measurement. Estimate in model space, `y` in
/// [0,1]; returns model space. Linear operators only.
pub fn ddnm_update(
    x0_hat: &Tensor,
    y: &Tensor,
    op: &DegradationOperator,
    sigma_scale: f64,
) -> Result<Tensor> {
    let xu = to_unit(x0_hat);
    let ax = op.apply(&xu)?;
    let r = ax.sub(y)?;
    let corr = op.pinv_apply(&r)?;
    let updated = xu.zip(&corr, |x, c| (x as f64 - sigma_scale * c as f64) as f32)?;
    Ok(to_model(&updated))
}

/// Gradient-guidance update: step `x_prev` against the gradient of the
/// squared measurement residual at `x_t`, normalized by the residual
/// norm. The gradient flows through the noise predictor and the
/// operator. A zero residual returns `x_prev` unchanged.
pub fn dps_update<S: DiffusionSteps>(
    x_prev: &Tensor,
    x_t: &Tensor,
    y: &Tensor,
    op: &DegradationOperator,
    zeta: f64,
    model: &dyn EpsPredictor,
    sched: &S,
    j: usize,
) -> Result<Tensor> {
    if zeta <= 0.0 {
        return Err(Error::invalid("guidance step size must be positive"));
    }
    sched.check_pos(j)?;
    let t_abs = sched.parent_t(j);
    let ab = sched.alpha_bar(j);

    let mut tape = Tape::new();
    let xv = tape.leaf_from(x_t, true);
    let out = model.predict_on_tape(&mut tape, xv, t_abs)?;
    let eps = match model.variance_mode() {
        VarianceMode::Fixed => out,
        VarianceMode::Learned => tape.narrow_ch(out, 0, IMAGE_CHANNELS)?,
    };
    // x0 = x_t / sqrt(ab) - eps * sqrt(1 - ab) / sqrt(ab), then to [0,1]
    let inv = 1.0 / ab.sqrt();
    let xs = tape.affine(xv, inv, 0.0);
    let es = tape.affine(eps, (1.0 - ab).sqrt() * inv, 0.0);
    let x0 = tape.sub(xs, es)?;
    let x0u = tape.affine(x0, 0.5, 0.5);
    let ax = op.apply_var(&mut tape, x0u)?;
    let yv = tape.constant(y.clone());
    let r = tape.sub(ax, yv)?;
    let sq = tape.square(r);
    let loss = tape.sum_all(sq);
    let norm = (tape.value(loss).item() as f64).sqrt();
    if norm == 0.0 {
        return Ok(x_prev.clone());
    }
    tape.backward(loss)?;
    let grad = tape
        .grad(xv)
        .ok_or_else(|| Error::invalid("guidance gradient did not reach the noisy image"))?;
    let scale = zeta / norm;
    x_prev.zip(grad, |p, g| (p as f64 - scale * g as f64) as f32)
}

/// Which consistency update a solve run applies.
pub enum Strategy<'a> {
    /// Plain unconditional sampling.
    None,
    Ddc(&'a ConsistencyModel),
    Dps { zeta: f64 },
    Ddnm { sigma_scale: f64 },
}

impl Strategy<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Ddc(_) => "ddc",
            Strategy::Dps { .. } => "dps",
            Strategy::Ddnm { .. } => "ddnm",
        }
    }

    /// Strategy/operator compatibility: the pseudo-inverse update needs
    /// a linear operator.
    pub fn check_compatible(&self, op: &DegradationOperator) -> Result<()> {
        if matches!(self, Strategy::Ddnm { .. }) && !op.is_linear() {
            return Err(Error::UnsupportedOperator {
                operation: "pseudo-inverse consistency",
                kind: op.kind().label(),
            });
        }
        Ok(())
    }
}

/// Per-step diagnostic: excess kurtosis of the predicted noise, when
/// defined (a constant prediction has none).
pub struct KurtosisSample {
    /// 1-based, counted from the noisiest step.
    pub step_index: usize,
    /// Parent timestep in the full schedule.
    pub t: usize,
    pub kurtosis: Option<f64>,
}

pub struct SolveResult {
    /// Restored image in [0,1], clamped.
    pub image: Tensor,
    /// Final model-space estimate before clamping.
    pub raw: Tensor,
    pub eps_kurtosis: Vec<KurtosisSample>,
}

/// Run the reverse process from pure noise under a consistency
/// strategy. With `Strategy::None` and a shared RNG stream this is
/// bitwise identical to unconditional sampling.
pub fn solve<S, R>(
    y: &Tensor,
    op: &DegradationOperator,
    strategy: &Strategy,
    model: &DenoiserModel,
    sched: &S,
    rng: &mut R,
) -> Result<SolveResult>
where
    S: DiffusionSteps,
    R: Rng + ?Sized,
{
    strategy.check_compatible(op)?;
    let (h, w) = op.in_hw();
    let y_lift_model = match strategy {
        Strategy::Ddc(_) => Some(to_model(&op.lift_measurement(y)?)),
        _ => None,
    };
    let mut x = Tensor::randn(vec![IMAGE_CHANNELS, h, w], rng);
    let mut eps_kurtosis = Vec::with_capacity(sched.steps());
    for j in (1..=sched.steps()).rev() {
        let step: StepResult = match strategy {
            Strategy::None | Strategy::Dps { .. } => {
                guided_step(model, sched, j, &x, rng, |x0, _| Ok(x0.clone()))?
            }
            Strategy::Ddc(m) => {
                let lift = y_lift_model.as_ref().expect("lift prepared above");
                guided_step(model, sched, j, &x, rng, |x0, t| ddc_update(x0, lift, t, *m))?
            }
            Strategy::Ddnm { sigma_scale } => {
                guided_step(model, sched, j, &x, rng, |x0, _| {
                    ddnm_update(x0, y, op, *sigma_scale)
                })?
            }
        };
        let x_prev = match strategy {
            Strategy::Dps { zeta } => {
                dps_update(&step.x_prev, &x, y, op, *zeta, model, sched, j)?
            }
            _ => step.x_prev,
        };
        eps_kurtosis.push(KurtosisSample {
            step_index: sched.steps() - j + 1,
            t: sched.parent_t(j),
            kurtosis: crate::metrics::kurtosis(&step.eps_hat).ok(),
        });
        x = x_prev;
    }
    let unit = to_unit(&x);
    Ok(SolveResult { image: unit.clamp(0.0, 1.0), raw: x, eps_kurtosis })
}

/// The kurtosis diagnostic: solve under a strategy and return the
/// per-step excess kurtosis of the predicted noise. Errors if any
/// step's prediction was constant (untrained model).
pub fn kurtosis_trajectory<S, R>(
    y: &Tensor,
    op: &DegradationOperator,
    strategy: &Strategy,
    model: &DenoiserModel,
    sched: &S,
    rng: &mut R,
) -> Result<Vec<crate::metrics::KurtosisPoint>>
where
    S: DiffusionSteps,
    R: Rng + ?Sized,
{
    let out = solve(y, op, strategy, model, sched, rng)?;
    out.eps_kurtosis
        .into_iter()
        .map(|s| match s.kurtosis {
            Some(k) => Ok(crate::metrics::KurtosisPoint {
                step_index: s.step_index,
                t: s.t,
                kurtosis: k,
            }),
            None => Err(Error::ZeroVariance),
        })
        .collect()
}

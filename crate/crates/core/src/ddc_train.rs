//! Training loop for the consistency residual: randomized degradation tasks,
//! a frozen denoiser supplying stop-gradient estimates, and a three-term loss
//! (reconstruction, perceptual proxy, posterior KL) optimized with Adam + EMA.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::consistency::{to_model, to_unit, ConsistencyModel};
use crate::denoiser::{DenoiserModel, IMAGE_CHANNELS};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::operators::{DegradationOperator, DownsampleKernel, Mask, OperatorKind};
use crate::optim::{Adam, AdamConfig, Ema};
use crate::rng;
use crate::schedule::{self, posterior_coeffs, DiffusionSteps, NoiseSchedule, VARIANCE_FLOOR};
use crate::tensor::Tensor;

/// Weights for the combined training objective `w1*mse + w2*perceptual + w3*kl`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl LossWeights {
    pub fn new(w1: f64, w2: f64, w3: f64) -> Result<Self> {
        if !(w1 >= 0.0 && w2 >= 0.0 && w3 >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if w1 == 0.0 && w2 == 0.0 && w3 == 0.0 {
            return Err(Error::invalid("at least one loss weight must be positive"));
        }
        Ok(LossWeights { w1, w2, w3 })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w1: 1.0, w2: 0.1, w3: 1e-3 }
    }
}

/// A degradation family the trainer can draw from. `Inpaint` holds the mask
/// density rather than a concrete mask so every draw gets a fresh pattern.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskKind {
    SuperRes { factor: usize, kernel: DownsampleKernel },
    GaussianBlur { kernel_size: usize, sigma: f64 },
    Inpaint { observed_fraction: f64 },
    Jpeg { quality: u8 },
    Denoise,
}

impl TaskKind {
    pub fn label(&self) -> String {
        match self {
            TaskKind::SuperRes { factor, .. } => format!("sr_x{factor}"),
            TaskKind::GaussianBlur { .. } => "gaussian_blur".into(),
            TaskKind::Inpaint { .. } => "inpaint".into(),
            TaskKind::Jpeg { quality } => format!("jpeg_{quality}"),
            TaskKind::Denoise => "denoise".into(),
        }
    }

    /// Builds a concrete operator for an `h` by `w` image, drawing a mask for
    /// inpainting tasks.
    pub fn instantiate<R: Rng + ?Sized>(
        &self,
        h: usize,
        w: usize,
        rng: &mut R,
    ) -> Result<DegradationOperator> {
        let kind = match self {
            TaskKind::SuperRes { factor, kernel } => {
                OperatorKind::SuperRes { factor: *factor, kernel: *kernel }
            }
            TaskKind::GaussianBlur { kernel_size, sigma } => {
                OperatorKind::GaussianBlur { kernel_size: *kernel_size, sigma: *sigma }
            }
            TaskKind::Inpaint { observed_fraction } => {
                OperatorKind::Inpaint { mask: Mask::random(h, w, *observed_fraction, rng)? }
            }
            TaskKind::Jpeg { quality } => OperatorKind::Jpeg { quality: *quality },
            TaskKind::Denoise => OperatorKind::Denoise,
        };
        DegradationOperator::new(kind, h, w)
    }
}

/// The set of degradations and the measurement-noise range sampled during
/// training.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TaskPool {
    pub tasks: Vec<TaskKind>,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl TaskPool {
    pub fn new(tasks: Vec<TaskKind>, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::invalid("task pool must not be empty"));
        }
        if !(0.0 <= sigma_min && sigma_min <= sigma_max) {
            return Err(Error::invalid("need 0 <= sigma_min <= sigma_max"));
        }
        Ok(TaskPool { tasks, sigma_min, sigma_max })
    }

    /// The six-task generalized pool: SRx4, SRx8, Gaussian blur, 92% random
    /// inpainting, JPEG-10, and denoising, with measurement noise drawn
    /// uniformly from [0, 0.1].
    pub fn generalized() -> Self {
        TaskPool {
            tasks: vec![
                TaskKind::SuperRes { factor: 4, kernel: DownsampleKernel::AveragePool },
                TaskKind::SuperRes { factor: 8, kernel: DownsampleKernel::AveragePool },
                TaskKind::GaussianBlur { kernel_size: 9, sigma: 2.0 },
                TaskKind::Inpaint { observed_fraction: 0.08 },
                TaskKind::Jpeg { quality: 10 },
                TaskKind::Denoise,
            ],
            sigma_min: 0.0,
            sigma_max: 0.1,
        }
    }

    /// A pool with a single task at a fixed noise level.
    pub fn single(task: TaskKind, sigma_y: f64) -> Result<Self> {
        TaskPool::new(vec![task], sigma_y, sigma_y)
    }

    pub fn draw_task<R: Rng + ?Sized>(&self, rng: &mut R) -> &TaskKind {
        &self.tasks[rng.gen_range(0..self.tasks.len())]
    }

    pub fn draw_sigma<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.sigma_min == self.sigma_max {
            self.sigma_min
        } else {
            rng.gen_range(self.sigma_min..self.sigma_max)
        }
    }
}

/// One sampled training draw: the degradation, the lifted measurement, and the
/// frozen denoiser's estimate at a random diffusion level. The estimate is a
/// plain tensor, so no gradient can reach the denoiser through it.
#[derive(Clone)]
pub struct TrainingInstance {
    pub op: DegradationOperator,
    pub sigma_y: f64,
    /// Pseudo-inverse lift of the noisy measurement, rescaled to model space.
    pub y_lifted: Tensor,
    pub t: usize,
    pub x_t: Tensor,
    /// One-step clean-image estimate from the frozen denoiser.
    pub x0_hat: Tensor,
}

/// Draws a task, degrades `x0` (given in model space), noises it to a random
/// level, and runs the frozen denoiser once. All randomness comes from `rng`.
pub fn sample_training_instance<R: Rng + ?Sized>(
    pool: &TaskPool,
    x0: &Tensor,
    denoiser: &DenoiserModel,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<TrainingInstance> {
    let (c, h, w) = x0.dims3()?;
    if c != IMAGE_CHANNELS {
        return Err(Error::ShapeMismatch {
            context: "training image channels",
            expected: vec![IMAGE_CHANNELS, h, w],
            got: vec![c, h, w],
        });
    }
    let task = pool.draw_task(rng).clone();
    let op = task.instantiate(h, w, rng)?;
    let sigma_y = pool.draw_sigma(rng);
    let clean_unit = to_unit(x0);
    let y = op.add_noise(&op.apply(&clean_unit)?, sigma_y, rng)?;
    let y_lifted = to_model(&op.lift_measurement(&y)?);
    let t = rng.gen_range(1..=sched.steps());
    let eps = Tensor::randn(x0.shape().to_vec(), rng);
    let x_t = schedule::forward_diffuse(x0, &eps, sched.alpha_bar(t))?;
    let pred = denoiser.predict(&x_t, t)?;
    let x0_hat = schedule::predict_x0(&x_t, &pred.eps, sched.alpha_bar(t))?;
    Ok(TrainingInstance { op, sigma_y, y_lifted, t, x_t, x0_hat })
}

/// KL divergence between scalar Gaussians, KL(N(mu_q, var_q) || N(mu_p, var_p)).
pub fn gaussian_kl(mu_q: f64, var_q: f64, mu_p: f64, var_p: f64) -> f64 {
    0.5 * ((var_p / var_q).ln() + (var_q + (mu_q - mu_p) * (mu_q - mu_p)) / var_p - 1.0)
}

struct KlTerms {
    c_x0: f64,
    c_xt: f64,
    mean_scale: f64,
    var_q: f64,
    var_p: f64,
    constant: f64,
}

fn kl_terms<S: DiffusionSteps>(s: &S, j: usize) -> Result<KlTerms> {
    let (c_x0, c_xt, _) = posterior_coeffs(s, j)?;
    let ab_prev = s.alpha_bar_prev(j);
    let var_q = 1.0 - ab_prev;
    let var_p = s.beta_tilde(j).max(VARIANCE_FLOOR);
    // Everything except the mean mismatch is independent of the data, so the
    // per-element divergence is constant + (m - mu)^2 / (2 var_p).
    let constant = 0.5 * ((var_p / var_q).ln() + var_q / var_p - 1.0);
    Ok(KlTerms { c_x0, c_xt, mean_scale: ab_prev.sqrt(), var_q, var_p, constant })
}

/// Mean per-element KL between the forward marginal at level `j - 1`,
/// N(sqrt(abar_prev) x0, (1 - abar_prev) I), and the reverse-step distribution
/// whose mean uses the corrected estimate `x0_hat_y`. The final step (`j = 1`)
/// contributes zero by convention.
pub fn loss_kl<S: DiffusionSteps>(
    x0_hat_y: &Tensor,
    x_t: &Tensor,
    x0: &Tensor,
    s: &S,
    j: usize,
) -> Result<f64> {
    s.check_pos(j)?;
    if !(x0_hat_y.same_shape(x_t) && x0_hat_y.same_shape(x0)) {
        return Err(Error::ShapeMismatch {
            context: "kl loss inputs",
            expected: x0.shape().to_vec(),
            got: x0_hat_y.shape().to_vec(),
        });
    }
    if j == 1 {
        return Ok(0.0);
    }
    let terms = kl_terms(s, j)?;
    let n = x0.numel() as f64;
    let mut acc = 0.0f64;
    for ((&xy, &xt), &x) in x0_hat_y.data().iter().zip(x_t.data()).zip(x0.data()) {
        let mu = terms.c_x0 * xy as f64 + terms.c_xt * xt as f64;
        let m = terms.mean_scale * x as f64;
        acc += terms.constant + (m - mu) * (m - mu) / (2.0 * terms.var_p);
    }
    Ok(acc / n)
}

/// Same divergence with the reverse-step moments estimated from `samples`
/// Monte Carlo draws per element instead of taken analytically. Diagnostic
/// only; the training loss always uses the analytic moments.
pub fn loss_kl_empirical<S: DiffusionSteps, R: Rng + ?Sized>(
    x0_hat_y: &Tensor,
    x_t: &Tensor,
    x0: &Tensor,
    s: &S,
    j: usize,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    s.check_pos(j)?;
    if samples < 2 {
        return Err(Error::invalid("need at least 2 samples for an empirical variance"));
    }
    if j == 1 {
        return Ok(0.0);
    }
    let terms = kl_terms(s, j)?;
    let sd = terms.var_p.sqrt();
    let n = x0.numel() as f64;
    let mut acc = 0.0f64;
    for ((&xy, &xt), &x) in x0_hat_y.data().iter().zip(x_t.data()).zip(x0.data()) {
        let mu = terms.c_x0 * xy as f64 + terms.c_xt * xt as f64;
        let m = terms.mean_scale * x as f64;
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for _ in 0..samples {
            let z: f64 = StandardNormal.sample(rng);
            let v = mu + sd * z;
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / samples as f64;
        let var = (sum_sq / samples as f64 - mean * mean).max(VARIANCE_FLOOR);
        acc += gaussian_kl(m, terms.var_q, mean, var);
    }
    Ok(acc / n)
}

/// Tape version of [`loss_kl`], differentiable in `x0_hat_y`.
pub fn loss_kl_on_tape<S: DiffusionSteps>(
    tape: &mut Tape,
    x0_hat_y: Var,
    x_t: &Tensor,
    x0: &Tensor,
    s: &S,
    j: usize,
) -> Result<Var> {
    s.check_pos(j)?;
    if j == 1 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let terms = kl_terms(s, j)?;
    let scaled_est = tape.affine(x0_hat_y, terms.c_x0, 0.0);
    let drift = tape.constant(x_t.affine(terms.c_xt, 0.0));
    let mu = tape.add(scaled_est, drift)?;
    let target = tape.constant(x0.affine(terms.mean_scale, 0.0));
    let d = tape.sub(target, mu)?;
    let sq = tape.square(d);
    let mean = tape.mean_all(sq);
    Ok(tape.affine(mean, 1.0 / (2.0 * terms.var_p), terms.constant))
}

/// Values of the three loss components and their weighted combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub mse: f64,
    pub perceptual: f64,
    pub kl: f64,
    pub total: f64,
}

/// Evaluates the full objective without a tape. All three components are
/// always computed so the breakdown stays informative even at zero weight.
pub fn total_loss<S: DiffusionSteps>(
    x0_hat_y: &Tensor,
    x_t: &Tensor,
    x0: &Tensor,
    s: &S,
    j: usize,
    w: &LossWeights,
    features: &FeatureExtractor,
) -> Result<LossBreakdown> {
    let mse = x0_hat_y.mse(x0)?;
    let perceptual = features.perceptual(x0_hat_y, x0)?;
    let kl = loss_kl(x0_hat_y, x_t, x0, s, j)?;
    Ok(LossBreakdown { mse, perceptual, kl, total: w.w1 * mse + w.w2 * perceptual + w.w3 * kl })
}

/// Builds the objective on the tape. Components with zero weight are skipped
/// entirely (their breakdown entry reads 0).
fn total_loss_on_tape<S: DiffusionSteps>(
    tape: &mut Tape,
    x0_hat_y: Var,
    x_t: &Tensor,
    x0: &Tensor,
    s: &S,
    j: usize,
    w: &LossWeights,
    features: &FeatureExtractor,
) -> Result<(Var, LossBreakdown)> {
    let mut breakdown = LossBreakdown { mse: 0.0, perceptual: 0.0, kl: 0.0, total: 0.0 };
    let mut total: Option<Var> = None;
    let push = |tape: &mut Tape, term: Var, weight: f64, total: &mut Option<Var>| {
        let scaled = tape.affine(term, weight, 0.0);
        *total = Some(match total.take() {
            Some(acc) => tape.add(acc, scaled).expect("scalar loss terms"),
            None => scaled,
        });
    };
    if w.w1 > 0.0 {
        let target = tape.constant(x0.clone());
        let d = tape.sub(x0_hat_y, target)?;
        let sq = tape.square(d);
        let mse = tape.mean_all(sq);
        breakdown.mse = tape.value(mse).item() as f64;
        push(tape, mse, w.w1, &mut total);
    }
    if w.w2 > 0.0 {
        let target = tape.constant(x0.clone());
        let perc = features.perceptual_on_tape(tape, x0_hat_y, target)?;
        breakdown.perceptual = tape.value(perc).item() as f64;
        push(tape, perc, w.w2, &mut total);
    }
    if w.w3 > 0.0 {
        let kl = loss_kl_on_tape(tape, x0_hat_y, x_t, x0, s, j)?;
        breakdown.kl = tape.value(kl).item() as f64;
        push(tape, kl, w.w3, &mut total);
    }
    let total = total.ok_or_else(|| Error::invalid("all loss weights are zero"))?;
    breakdown.total = tape.value(total).item() as f64;
    Ok((total, breakdown))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DdcTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Micro-batches accumulated into one optimizer step.
    pub grad_accum: usize,
    pub weights: LossWeights,
    pub optimizer: AdamConfig,
    pub ema_decay: f64,
}

impl Default for DdcTrainConfig {
    fn default() -> Self {
        DdcTrainConfig {
            steps: 30_000,
            batch_size: 2,
            grad_accum: 4,
            weights: LossWeights::default(),
            optimizer: AdamConfig::default(),
            ema_decay: 0.9999,
        }
    }
}

/// Per-step log entry; field names match the JSON-lines loss log.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DdcStepLog {
    pub step: usize,
    #[serde(rename = "L_mse")]
    pub l_mse: f64,
    #[serde(rename = "L_perc")]
    pub l_perc: f64,
    #[serde(rename = "L_kl")]
    pub l_kl: f64,
    pub total: f64,
}

/// Trains the consistency residual against a frozen denoiser. `dataset` images
/// are in [0, 1]; degradations are drawn from `pool` per instance. Returns the
/// EMA parameters. The denoiser is only ever read.
pub fn train_ddc(
    dataset: &[Tensor],
    sched: &NoiseSchedule,
    denoiser: &DenoiserModel,
    features: &FeatureExtractor,
    pool: &TaskPool,
    cfg: &DdcTrainConfig,
    mut model: ConsistencyModel,
    seed: u64,
    log: &mut dyn FnMut(DdcStepLog),
) -> Result<ConsistencyModel> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 || cfg.steps == 0 || cfg.grad_accum == 0 {
        return Err(Error::invalid("steps, batch_size, and grad_accum must be positive"));
    }
    LossWeights::new(cfg.weights.w1, cfg.weights.w2, cfg.weights.w3)?;
    let scaled: Vec<Tensor> = dataset.iter().map(|x| x.affine(2.0, -1.0)).collect();
    let per_step = cfg.batch_size * cfg.grad_accum;
    let mut opt = Adam::new(cfg.optimizer.clone());
    let mut ema = Ema::new(&model.net().params(), cfg.ema_decay)?;
    let n_params = model.net().params().len();

    for step in 0..cfg.steps {
        let mut grad_acc: Vec<Option<Tensor>> = vec![None; n_params];
        let mut sums = LossBreakdown { mse: 0.0, perceptual: 0.0, kl: 0.0, total: 0.0 };
        for b in 0..per_step {
            let draw = (step * per_step + b) as u64;
            let mut r = rng::stream(seed, rng::salt::TRAIN_DDC, draw);
            let x0 = &scaled[r.gen_range(0..scaled.len())];
            let inst = sample_training_instance(pool, x0, denoiser, sched, &mut r)?;

            let mut tape = Tape::new();
            let x0h = tape.leaf_from(&inst.x0_hat, false);
            let yl = tape.leaf_from(&inst.y_lifted, false);
            let (delta, order) = model.residual_on_tape(&mut tape, x0h, yl, inst.t, true)?;
            let x0y = tape.sub(x0h, delta)?;
            let (loss, parts) = total_loss_on_tape(
                &mut tape,
                x0y,
                &inst.x_t,
                x0,
                sched,
                inst.t,
                &cfg.weights,
                features,
            )?;
            if !parts.total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            sums.mse += parts.mse;
            sums.perceptual += parts.perceptual;
            sums.kl += parts.kl;
            sums.total += parts.total;
            tape.backward(loss)?;
            let inv = 1.0 / per_step as f64;
            for (slot, var) in grad_acc.iter_mut().zip(&order) {
                if let Some(g) = tape.grad(*var) {
                    match slot {
                        Some(acc) => {
                            *acc = acc.zip(g, |a, gi| (a as f64 + gi as f64 * inv) as f32)?
                        }
                        None => *slot = Some(g.affine(inv, 0.0)),
                    }
                }
            }
        }
        let grads: Vec<Tensor> = grad_acc
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.unwrap_or_else(|| Tensor::zeros(model.net().params()[i].shape().to_vec()))
            })
            .collect();
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        let mut params = model.net_mut().params_mut();
        opt.step(&mut params, &grad_refs)?;
        ema.update(&model.net().params())?;
        let inv = 1.0 / per_step as f64;
        log(DdcStepLog {
            step,
            l_mse: sums.mse * inv,
            l_perc: sums.perceptual * inv,
            l_kl: sums.kl * inv,
            total: sums.total * inv,
        });
    }

    model.net_mut().set_params(ema.shadow())?;
    Ok(model)
}

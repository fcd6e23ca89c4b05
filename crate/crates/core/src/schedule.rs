//! Variance-preserving discrete noise schedules and timestep respacing.
//!
//! Timesteps are 1-based: `t` in `1..=T`, with the convention
//! `alpha_bar(0) = 1`. A respaced schedule keeps the cumulative products
//! of the positions it retains and re-derives per-step betas from their
//! ratios, so the forward marginals at the retained positions are
//! unchanged.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to posterior variances before logs or divisions; the
/// posterior variance at the first step is exactly zero.
pub const VARIANCE_FLOOR: f64 = 1e-20;

/// Positions a sampler can walk. `j` is the 1-based position index; a
/// plain schedule has `parent_t(j) = j`.
pub trait DiffusionSteps {
    /// Number of sampling positions.
    fn steps(&self) -> usize;

    /// Original timestep behind position `j` (what the denoiser is
    /// conditioned on).
    fn parent_t(&self, j: usize) -> usize;

    fn alpha_bar(&self, j: usize) -> f64;

    fn alpha_bar_prev(&self, j: usize) -> f64 {
        if j <= 1 {
            1.0
        } else {
            self.alpha_bar(j - 1)
        }
    }

    /// Per-position beta (re-derived from alpha-bar ratios when
    /// respaced).
    fn beta(&self, j: usize) -> f64 {
        1.0 - self.alpha_bar(j) / self.alpha_bar_prev(j)
    }

    fn alpha(&self, j: usize) -> f64 {
        1.0 - self.beta(j)
    }

    /// Posterior variance `beta * (1 - abar_prev) / (1 - abar)`; zero at
    /// `j = 1`.
    fn beta_tilde(&self, j: usize) -> f64 {
        self.beta(j) * (1.0 - self.alpha_bar_prev(j)) / (1.0 - self.alpha_bar(j))
    }

    fn check_pos(&self, j: usize) -> Result<()> {
        if j == 0 || j > self.steps() {
            Err(Error::TimestepRange { t: j, t_max: self.steps() })
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if betas.iter().any(|&b| !(0.0..1.0).contains(&b) || b <= 0.0) {
            return Err(Error::invalid("betas must lie strictly inside (0, 1)"));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0f64;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    /// Linearly spaced betas from `beta_start` to `beta_end` inclusive.
    pub fn linear(t_count: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_count == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        let betas = if t_count == 1 {
            vec![beta_start]
        } else {
            (0..t_count)
                .map(|i| {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_count - 1) as f64
                })
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Retain 1-based `positions` (strictly increasing).
    pub fn respace(&self, positions: &[usize]) -> Result<RespacedSchedule> {
        if positions.is_empty() {
            return Err(Error::invalid("respace needs at least one position"));
        }
        for w in positions.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::invalid("respace positions must be strictly increasing"));
            }
        }
        let t_max = self.steps();
        for &p in positions {
            if p == 0 || p > t_max {
                return Err(Error::TimestepRange { t: p, t_max });
            }
        }
        // Reuse the stored beta when two retained positions are adjacent in
        // the parent; recomputing it from the marginal ratio is the same
        // number in exact arithmetic but not always the same float.
        let betas = positions
            .iter()
            .enumerate()
            .map(|(idx, &p)| {
                let (prev_pos, prev_ab) = if idx == 0 {
                    (0, 1.0)
                } else {
                    (positions[idx - 1], self.alpha_bars[positions[idx - 1] - 1])
                };
                if p == prev_pos + 1 {
                    self.betas[p - 1]
                } else {
                    1.0 - self.alpha_bars[p - 1] / prev_ab
                }
            })
            .collect();
        Ok(RespacedSchedule {
            taken: positions.to_vec(),
            alpha_bars: positions.iter().map(|&p| self.alpha_bars[p - 1]).collect(),
            betas,
        })
    }

    /// `k` positions evenly spread over `1..=T`, always containing both
    /// endpoints (so sampling starts at full noise and ends noiseless).
    pub fn evenly_spaced(&self, k: usize) -> Result<RespacedSchedule> {
        let t = self.steps();
        if k == 0 || k > t {
            return Err(Error::invalid(format!(
                "cannot pick {k} positions from a {t}-step schedule"
            )));
        }
        let positions: Vec<usize> = if k == 1 {
            vec![t]
        } else {
            (0..k)
                .map(|j| {
                    1 + ((j as f64) * (t - 1) as f64 / (k - 1) as f64).round() as usize
                })
                .collect()
        };
        self.respace(&positions)
    }
}

impl DiffusionSteps for NoiseSchedule {
    fn steps(&self) -> usize {
        self.betas.len()
    }

    fn parent_t(&self, j: usize) -> usize {
        j
    }

    fn alpha_bar(&self, j: usize) -> f64 {
        self.alpha_bars[j - 1]
    }

    fn beta(&self, j: usize) -> f64 {
        self.betas[j - 1]
    }
}

#[derive(Debug, Clone)]
pub struct RespacedSchedule {
    taken: Vec<usize>,
    alpha_bars: Vec<f64>,
    betas: Vec<f64>,
}

impl RespacedSchedule {
    pub fn positions(&self) -> &[usize] {
        &self.taken
    }

    /// Respace again by 1-based positions into this schedule; equivalent
    /// to respacing the base schedule by the composed subsequence.
    pub fn sub(&self, positions: &[usize]) -> Result<RespacedSchedule> {
        if positions.is_empty() {
            return Err(Error::invalid("respace needs at least one position"));
        }
        for w in positions.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::invalid("respace positions must be strictly increasing"));
            }
        }
        for &p in positions {
            self.check_pos(p)?;
        }
        let betas = positions
            .iter()
            .enumerate()
            .map(|(idx, &p)| {
                let (prev_pos, prev_ab) = if idx == 0 {
                    (0, 1.0)
                } else {
                    (positions[idx - 1], self.alpha_bars[positions[idx - 1] - 1])
                };
                if p == prev_pos + 1 {
                    self.betas[p - 1]
                } else {
                    1.0 - self.alpha_bars[p - 1] / prev_ab
                }
            })
            .collect();
        Ok(RespacedSchedule {
            taken: positions.iter().map(|&p| self.taken[p - 1]).collect(),
            alpha_bars: positions.iter().map(|&p| self.alpha_bars[p - 1]).collect(),
            betas,
        })
    }
}

impl DiffusionSteps for RespacedSchedule {
    fn steps(&self) -> usize {
        self.taken.len()
    }

    fn parent_t(&self, j: usize) -> usize {
        self.taken[j - 1]
    }

    fn alpha_bar(&self, j: usize) -> f64 {
        self.alpha_bars[j - 1]
    }

    fn beta(&self, j: usize) -> f64 {
        self.betas[j - 1]
    }
}

/// Coefficients `(c_x0, c_xt, beta_tilde)` of the reverse posterior
/// `q(x_{j-1} | x_j, x0)`: mean `c_x0 * x0 + c_xt * x_j`, variance
/// `beta_tilde`. At `j = 1` the step is deterministic: `(1, 0, 0)`.
pub fn posterior_coeffs(s: &impl DiffusionSteps, j: usize) -> Result<(f64, f64, f64)> {
    s.check_pos(j)?;
    if j == 1 {
        return Ok((1.0, 0.0, 0.0));
    }
    let abar = s.alpha_bar(j);
    let abar_prev = s.alpha_bar_prev(j);
    let beta = s.beta(j);
    let alpha = 1.0 - beta;
    let denom = 1.0 - abar;
    Ok((
        abar_prev.sqrt() * beta / denom,
        alpha.sqrt() * (1.0 - abar_prev) / denom,
        beta * (1.0 - abar_prev) / denom,
    ))
}

/// `x_t = sqrt(abar) * x0 + sqrt(1 - abar) * eps`.
pub fn forward_diffuse(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if !x0.same_shape(eps) {
        return Err(Error::ShapeMismatch {
            context: "forward_diffuse",
            expected: x0.shape().to_vec(),
            got: eps.shape().to_vec(),
        });
    }
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.zip(eps, |x, e| ((x as f64) * sa + (e as f64) * sn) as f32)
}

/// One-step clean-image estimate from a noise prediction:
/// `(x_t - sqrt(1 - abar) * eps_hat) / sqrt(abar)`.
pub fn predict_x0(x_t: &Tensor, eps_hat: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if !x_t.same_shape(eps_hat) {
        return Err(Error::ShapeMismatch {
            context: "predict_x0",
            expected: x_t.shape().to_vec(),
            got: eps_hat.shape().to_vec(),
        });
    }
    let sn = (1.0 - alpha_bar).sqrt();
    let inv = 1.0 / alpha_bar.sqrt();
    x_t.zip(eps_hat, |x, e| (((x as f64) - sn * (e as f64)) * inv) as f32)
}

/// Per-element log-variance interpolation between `beta` and the floored
/// posterior variance `beta_tilde`, driven by a network output `v`
/// clamped to `[0, 1]`.
pub fn variance_from_v(v: &Tensor, s: &impl DiffusionSteps, j: usize) -> Result<Tensor> {
    s.check_pos(j)?;
    let log_beta = s.beta(j).ln();
    let log_bt = s.beta_tilde(j).max(VARIANCE_FLOOR).ln();
    Ok(v.map(|vi| {
        let w = (vi as f64).clamp(0.0, 1.0);
        (w * log_beta + (1.0 - w) * log_bt).exp() as f32
    }))
}

//! Adam and parameter EMA, operating on flat lists of tensors aligned by
//! position (the parameter traversal order is fixed by the model).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    steps: u64,
    moments: Vec<(Tensor, Tensor)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, steps: 0, moments: Vec::new() }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. `params` and `grads` align by position; moment buffers
    /// are allocated on the first call and shapes are checked thereafter.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "adam: {} params vs {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| {
                    (
                        Tensor::zeros(p.shape().to_vec()),
                        Tensor::zeros(p.shape().to_vec()),
                    )
                })
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::invalid("adam: parameter count changed between steps"));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            if !p.same_shape(g) || !p.same_shape(m) {
                return Err(Error::ShapeMismatch {
                    context: "adam step",
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            let pd = p.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = gd[i] as f64;
                let mi = beta1 * md[i] as f64 + (1.0 - beta1) * gi;
                let vi = beta2 * vd[i] as f64 + (1.0 - beta2) * gi * gi;
                md[i] = mi as f32;
                vd[i] = vi as f32;
                let mh = mi / bc1;
                let vh = vi / bc2;
                pd[i] = (pd[i] as f64 - lr * mh / (vh.sqrt() + eps)) as f32;
            }
        }
        Ok(())
    }
}

/// Exponential moving average of parameters:
/// `shadow = decay * shadow + (1 - decay) * param`.
pub struct Ema {
    decay: f64,
    shadow: Vec<Tensor>,
}

impl Ema {
    pub fn new(params: &[&Tensor], decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::invalid(format!("ema decay {decay} outside [0, 1]")));
        }
        Ok(Ema {
            decay,
            shadow: params.iter().map(|p| (*p).clone()).collect(),
        })
    }

    pub fn update(&mut self, params: &[&Tensor]) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::invalid("ema: parameter count changed"));
        }
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            if !s.same_shape(p) {
                return Err(Error::ShapeMismatch {
                    context: "ema update",
                    expected: s.shape().to_vec(),
                    got: p.shape().to_vec(),
                });
            }
            for (sv, pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = (d * *sv as f64 + (1.0 - d) * *pv as f64) as f32;
            }
        }
        Ok(())
    }

    pub fn shadow(&self) -> &[Tensor] {
        &self.shadow
    }

    pub fn into_shadow(self) -> Vec<Tensor> {
        self.shadow
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_step_is_signed_lr_up_to_eps() {
        let mut p = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.5, -0.25]).unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        adam.step(&mut [&mut p], &[&g]).unwrap();
        // After bias correction the first update is lr * g/(|g| + eps).
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] - -1.9).abs() < 1e-6);
    }

    #[test]
    fn matches_f64_reference_over_steps() {
        let mut p = Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap();
        let grads = [
            vec![0.1, -0.4, 0.9],
            vec![-0.2, 0.6, 0.05],
            vec![0.3, 0.3, -0.3],
        ];
        let cfg = AdamConfig { lr: 1e-2, ..Default::default() };
        let mut adam = Adam::new(cfg);
        for g in &grads {
            let gt = Tensor::new(vec![3], g.clone()).unwrap();
            adam.step(&mut [&mut p], &[&gt]).unwrap();
        }
        // independent f64 trace
        let mut pr = [0.3f64, -0.7, 1.1];
        let mut m = [0.0f64; 3];
        let mut v = [0.0f64; 3];
        for (t, g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            for i in 0..3 {
                let gi = g[i] as f64;
                m[i] = 0.9 * m[i] + 0.1 * gi;
                v[i] = 0.999 * v[i] + 0.001 * gi * gi;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                pr[i] -= 1e-2 * mh / (vh.sqrt() + 1e-8);
            }
        }
        for i in 0..3 {
            assert!((p.data()[i] as f64 - pr[i]).abs() < 1e-6, "elem {i}");
        }
    }

    #[test]
    fn zero_gradient_from_fresh_state_is_identity() {
        let mut p = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let z = Tensor::zeros(vec![2]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut [&mut p], &[&z]).unwrap();
        assert_eq!(p.data(), &[0.5, -0.5]);
    }

    #[test]
    fn zero_gradient_decays_warm_moments() {
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(1.0);
        let z = Tensor::scalar(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut [&mut p], &[&g]).unwrap();
        let (m1, v1) = (adam.moments[0].0.item(), adam.moments[0].1.item());
        adam.step(&mut [&mut p], &[&z]).unwrap();
        let (m2, v2) = (adam.moments[0].0.item(), adam.moments[0].1.item());
        assert!((m2 - 0.9 * m1).abs() < 1e-7);
        assert!((v2 - 0.999 * v1).abs() < 1e-7);
    }

    #[test]
    fn shape_change_is_rejected() {
        let mut p = Tensor::zeros(vec![2]);
        let g3 = Tensor::zeros(vec![3]);
        let mut adam = Adam::new(AdamConfig::default());
        assert!(adam.step(&mut [&mut p], &[&g3]).is_err());
    }

    #[test]
    fn ema_initializes_at_params_and_tracks_exactly() {
        let p0 = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut ema = Ema::new(&[&p0], 0.9).unwrap();
        assert_eq!(ema.shadow()[0].data(), p0.data());
        let p1 = Tensor::new(vec![2], vec![2.0, 0.0]).unwrap();
        ema.update(&[&p1]).unwrap();
        assert!((ema.shadow()[0].data()[0] - 1.1).abs() < 1e-6);
        assert!((ema.shadow()[0].data()[1] - 1.8).abs() < 1e-6);
    }

    proptest! {
        // The shadow is a convex combination, so it stays inside the
        // running envelope of everything it has seen.
        #[test]
        fn ema_stays_in_envelope(
            start in -10.0f32..10.0,
            updates in proptest::collection::vec(-10.0f32..10.0, 1..20),
            decay in 0.0f64..1.0,
        ) {
            let p = Tensor::scalar(start);
            let mut ema = Ema::new(&[&p], decay).unwrap();
            let mut lo = start;
            let mut hi = start;
            for u in updates {
                lo = lo.min(u);
                hi = hi.max(u);
                ema.update(&[&Tensor::scalar(u)]).unwrap();
                let s = ema.shadow()[0].item();
                prop_assert!(s >= lo - 1e-4 && s <= hi + 1e-4);
            }
        }
    }
}

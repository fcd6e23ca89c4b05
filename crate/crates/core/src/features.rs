//! Frozen random feature pyramid backing the perceptual loss proxy and
//! the Fréchet-distance proxy.
//!
//! Three 3x3 conv layers (3 -> 16 -> 32 -> 64 channels) with 2x average
//! pooling between them, a smooth nonlinearity, and per-position channel
//! normalization. The weights are drawn once from a seeded stream and
//! never trained; they ship inside checkpoints so results stay
//! reproducible across machines. This is a structural stand-in for a
//! pretrained perceptual network, and results derived from it are
//! labeled "perceptual proxy", not LPIPS.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const LAYER_WIDTHS: [usize; 3] = [16, 32, 64];
/// Dimension of the pooled descriptor (final layer, spatially averaged).
pub const POOLED_DIM: usize = 64;

pub struct FeatureExtractor {
    layers: Vec<(Tensor, Tensor)>,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut r = rng::stream(seed, rng::salt::FEATURES, 0);
        let mut layers = Vec::new();
        let mut ci = 3usize;
        for &co in &LAYER_WIDTHS {
            let std = (2.0 / (ci * 9) as f64).sqrt();
            let w = Tensor::randn(vec![co, ci, 3, 3], &mut r).affine(std, 0.0);
            let b = Tensor::zeros(vec![co]);
            layers.push((w, b));
            ci = co;
        }
        FeatureExtractor { layers }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, (w, b)) in self.layers.iter().enumerate() {
            f(format!("feat{i}.w"), w);
            f(format!("feat{i}.b"), b);
        }
    }

    pub fn from_named(mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<Self> {
        let mut fresh = FeatureExtractor::new(0);
        for (i, (w, b)) in fresh.layers.iter_mut().enumerate() {
            for (slot, name) in [(w, format!("feat{i}.w")), (b, format!("feat{i}.b"))] {
                match lookup(&name) {
                    Some(t) if t.same_shape(slot) => *slot = t,
                    Some(t) => {
                        return Err(Error::ShapeMismatch {
                            context: "feature extractor load",
                            expected: slot.shape().to_vec(),
                            got: t.shape().to_vec(),
                        })
                    }
                    None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
                }
            }
        }
        Ok(fresh)
    }

    /// Channel-normalized feature maps of each layer, on a tape.
    fn maps(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let mut maps = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.avg_pool(h, 2)?;
            }
            let wv = tape.leaf_from(w, false);
            let bv = tape.leaf_from(b, false);
            h = tape.conv2d(h, wv, Some(bv))?;
            h = tape.silu(h);
            maps.push(tape.channel_l2norm(h, 1e-6)?);
        }
        Ok(maps)
    }

    /// Perceptual proxy distance: sum over layers of the mean squared
    /// difference between normalized feature maps. Both inputs must
    /// share one value range; the choice of range is the caller's.
    pub fn perceptual_on_tape(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        let ma = self.maps(tape, a)?;
        let mb = self.maps(tape, b)?;
        let mut total: Option<Var> = None;
        for (fa, fb) in ma.into_iter().zip(mb) {
            let d = tape.sub(fa, fb)?;
            let sq = tape.square(d);
            let m = tape.mean_all(sq);
            total = Some(match total {
                Some(t) => tape.add(t, m)?,
                None => m,
            });
        }
        Ok(total.expect("at least one layer"))
    }

    pub fn perceptual(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        if !a.same_shape(b) {
            return Err(Error::ShapeMismatch {
                context: "perceptual distance",
                expected: a.shape().to_vec(),
                got: b.shape().to_vec(),
            });
        }
        let mut tape = Tape::new();
        tape.set_recording(false);
        let av = tape.leaf_from(a, false);
        let bv = tape.leaf_from(b, false);
        let out = self.perceptual_on_tape(&mut tape, av, bv)?;
        Ok(tape.value(out).item() as f64)
    }

    /// Spatially averaged final-layer descriptor, length [`POOLED_DIM`].
    pub fn pooled(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        tape.set_recording(false);
        let xv = tape.leaf_from(x, false);
        let maps = self.maps(&mut tape, xv)?;
        let last = tape.value(*maps.last().expect("at least one layer"));
        let (c, h, w) = last.dims3()?;
        let mut out = vec![0.0f32; c];
        for ch in 0..c {
            let mut acc = 0.0f64;
            for row in 0..h {
                for &v in last.row(ch, row) {
                    acc += v as f64;
                }
            }
            out[ch] = (acc / (h * w) as f64) as f32;
        }
        Tensor::new(vec![c], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_are_seed_deterministic() {
        let a = FeatureExtractor::new(3);
        let b = FeatureExtractor::new(3);
        let c = FeatureExtractor::new(4);
        let get = |f: &FeatureExtractor| {
            let mut v = Vec::new();
            f.visit(&mut |_, t| v.push(t.clone()));
            v
        };
        assert!(get(&a).iter().zip(get(&b).iter()).all(|(x, y)| x.data() == y.data()));
        assert!(get(&a).iter().zip(get(&c).iter()).any(|(x, y)| x.data() != y.data()));
    }

    #[test]
    fn identical_inputs_have_zero_distance() {
        let f = FeatureExtractor::new(0);
        let mut r = rng::stream(1, rng::salt::TEST, 0);
        let x = Tensor::rand_uniform(vec![3, 8, 8], 0.0, 1.0, &mut r);
        assert_eq!(f.perceptual(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn distance_is_symmetric() {
        let f = FeatureExtractor::new(0);
        let mut r = rng::stream(2, rng::salt::TEST, 0);
        let a = Tensor::rand_uniform(vec![3, 8, 8], 0.0, 1.0, &mut r);
        let b = Tensor::rand_uniform(vec![3, 8, 8], 0.0, 1.0, &mut r);
        assert_eq!(f.perceptual(&a, &b).unwrap(), f.perceptual(&b, &a).unwrap());
    }

    #[test]
    fn distance_grows_with_perturbation_scale() {
        let f = FeatureExtractor::new(0);
        let mut r = rng::stream(3, rng::salt::TEST, 0);
        let x = Tensor::rand_uniform(vec![3, 16, 16], 0.0, 1.0, &mut r);
        let d = Tensor::randn(vec![3, 16, 16], &mut r);
        let at = |s: f32| {
            let y = x.zip(&d, |a, b| a + s * b).unwrap();
            f.perceptual(&x, &y).unwrap()
        };
        let (l1, l2, l3) = (at(0.01), at(0.02), at(0.04));
        assert!(l1 > 0.0 && l1 < l2 && l2 < l3, "{l1} {l2} {l3}");
    }

    #[test]
    fn pooled_descriptor_has_fixed_dimension() {
        let f = FeatureExtractor::new(0);
        let mut r = rng::stream(4, rng::salt::TEST, 0);
        let x = Tensor::rand_uniform(vec![3, 32, 32], 0.0, 1.0, &mut r);
        let p = f.pooled(&x).unwrap();
        assert_eq!(p.shape(), &[POOLED_DIM]);
        assert!(p.all_finite());
        let p2 = f.pooled(&x).unwrap();
        assert_eq!(p.data(), p2.data());
    }

    #[test]
    fn from_named_round_trips() {
        let f = FeatureExtractor::new(9);
        let mut table = std::collections::BTreeMap::new();
        f.visit(&mut |n, t| {
            table.insert(n, t.clone());
        });
        let g = FeatureExtractor::from_named(|n| table.get(n).cloned()).unwrap();
        let mut same = true;
        g.visit(&mut |n, t| same &= table[&n].data() == t.data());
        assert!(same);
        assert!(FeatureExtractor::from_named(|_| None).is_err());
    }

    #[test]
    fn gradient_through_perceptual_distance_matches_fd() {
        use crate::autodiff::fd;
        let f = FeatureExtractor::new(0);
        let mut r = rng::stream(5, rng::salt::TEST, 0);
        let a = Tensor::rand_uniform(vec![3, 8, 8], 0.1, 0.9, &mut r);
        let b = Tensor::rand_uniform(vec![3, 8, 8], 0.1, 0.9, &mut r);
        let e = fd::max_rel_err(
            |t, v| f.perceptual_on_tape(t, v[0], v[1]).unwrap(),
            &[a, b],
            2e-2,
        );
        assert!(e < 1e-4, "rel err {e}");
    }
}

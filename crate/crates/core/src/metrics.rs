//! Image quality and distribution metrics: PSNR, SSIM, excess
//! kurtosis, and a Fréchet distance over the fixed feature extractor.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio in dB for images in [0,1]. Identical
/// images return the cap instead of infinity.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mse = a.mse(b)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 7;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut k = [0.0f64; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            k[i * SSIM_WINDOW + j] = v;
            sum += v;
        }
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Mean structural similarity over channels and all fully contained
/// 7x7 Gaussian-weighted windows (sigma 1.5); images in [0,1].
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch {
            context: "ssim",
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    let (c, h, w) = a.dims3()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let kernel = ssim_kernel();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ch in 0..c {
        for oy in 0..=(h - SSIM_WINDOW) {
            for ox in 0..=(w - SSIM_WINDOW) {
                let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..SSIM_WINDOW {
                    let ra = &a.row(ch, oy + ky)[ox..ox + SSIM_WINDOW];
                    let rb = &b.row(ch, oy + ky)[ox..ox + SSIM_WINDOW];
                    for kx in 0..SSIM_WINDOW {
                        let wgt = kernel[ky * SSIM_WINDOW + kx];
                        let (va, vb) = (ra[kx] as f64, rb[kx] as f64);
                        ma += wgt * va;
                        mb += wgt * vb;
                        maa += wgt * va * va;
                        mbb += wgt * vb * vb;
                        mab += wgt * va * vb;
                    }
                }
                let (sa, sb, sab) = (maa - ma * ma, mbb - mb * mb, mab - ma * mb);
                let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * sab + SSIM_C2);
                let den = (ma * ma + mb * mb + SSIM_C1) * (sa + sb + SSIM_C2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Excess kurtosis over all elements, population moments; zero for
/// Gaussian data.
pub fn kurtosis(x: &Tensor) -> Result<f64> {
    if x.numel() < 2 {
        return Err(Error::invalid("kurtosis needs at least 2 elements"));
    }
    let n = x.numel() as f64;
    let mean = x.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let mut m2 = 0.0f64;
    let mut m4 = 0.0f64;
    for &v in x.data() {
        let d = v as f64 - mean;
        let d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= n;
    m4 /= n;
    if m2 == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(m4 / (m2 * m2) - 3.0)
}

const COV_REGULARIZER: f64 = 1e-6;
/// Below this set size the covariance fit is noisy; a warning is logged.
pub const FRECHET_RECOMMENDED_SET: usize = 128;

fn moments(set: &[Tensor]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if set.len() < 2 {
        return Err(Error::invalid("frechet proxy needs at least 2 descriptors per set"));
    }
    let d = set[0].numel();
    for t in set {
        if t.numel() != d || t.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                context: "feature descriptors",
                expected: vec![d],
                got: t.shape().to_vec(),
            });
        }
    }
    let n = set.len() as f64;
    let mut mu = vec![0.0f64; d];
    for t in set {
        for (m, &v) in mu.iter_mut().zip(t.data()) {
            *m += v as f64 / n;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for t in set {
        let c: Vec<f64> = t.data().iter().zip(&mu).map(|(&v, m)| v as f64 - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += c[i] * c[j] / n;
            }
        }
    }
    for i in 0..d {
        cov[(i, i)] += COV_REGULARIZER;
    }
    Ok((mu, cov))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut d = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        d[(i, i)] = eig.eigenvalues[i].max(0.0).sqrt();
    }
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits with the given moments:
/// `|mu_a - mu_b|^2 + tr(cov_a + cov_b - 2 (cov_a cov_b)^{1/2})`.
pub fn frechet_from_moments(
    mu_a: &[f64],
    cov_a: &DMatrix<f64>,
    mu_b: &[f64],
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.nrows() != d || cov_b.nrows() != d {
        return Err(Error::invalid("moment dimensions disagree"));
    }
    let mean_term: f64 = mu_a.iter().zip(mu_b).map(|(a, b)| (a - b) * (a - b)).sum();
    // tr((A B)^{1/2}) through the symmetric form sqrt(B) A sqrt(B)
    let rb = sqrt_psd(cov_b);
    let inner = &rb * cov_a * &rb;
    let tr_sqrt: f64 = {
        let sym = (&inner + inner.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        eig.eigenvalues.iter().map(|&e| e.max(0.0).sqrt()).sum()
    };
    Ok((mean_term + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Fréchet proxy between two sets of pooled feature descriptors.
pub fn frechet_from_features(set_a: &[Tensor], set_b: &[Tensor]) -> Result<f64> {
    if set_a.len() < FRECHET_RECOMMENDED_SET || set_b.len() < FRECHET_RECOMMENDED_SET {
        log::warn!(
            "frechet proxy on sets of {} and {} descriptors; below {} the covariance fit is noisy",
            set_a.len(),
            set_b.len(),
            FRECHET_RECOMMENDED_SET
        );
    }
    let (mu_a, cov_a) = moments(set_a)?;
    let (mu_b, cov_b) = moments(set_b)?;
    frechet_from_moments(&mu_a, &cov_a, &mu_b, &cov_b)
}

/// Fréchet proxy between two image sets through the fixed extractor.
pub fn frechet_proxy(
    images_a: &[Tensor],
    images_b: &[Tensor],
    extractor: &FeatureExtractor,
) -> Result<f64> {
    let fa: Result<Vec<Tensor>> = images_a.iter().map(|x| extractor.pooled(x)).collect();
    let fb: Result<Vec<Tensor>> = images_b.iter().map(|x| extractor.pooled(x)).collect();
    frechet_from_features(&fa?, &fb?)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct KurtosisPoint {
    /// 1-based sampling-step index, counted from the noisiest step.
    pub step_index: usize,
    /// Parent timestep in the full schedule.
    pub t: usize,
    pub kurtosis: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub strategy: String,
    pub sigma_y: f64,
    pub steps: usize,
    pub seed: u64,
    pub images: Vec<ImageMetrics>,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frechet_proxy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kurtosis: Option<Vec<KurtosisPoint>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn psnr_known_values() {
        let a = Tensor::zeros(vec![3, 4, 4]);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let b = Tensor::full(vec![3, 4, 4], 0.1);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-6, "{p}");
    }

    #[test]
    fn psnr_matches_independent_two_pass() {
        let mut r = rng::stream(1, rng::salt::TEST, 0);
        let a = Tensor::rand_uniform(vec![3, 8, 8], 0.0, 1.0, &mut r);
        let b = Tensor::rand_uniform(vec![3, 8, 8], 0.0, 1.0, &mut r);
        let mut acc = 0.0f64;
        for (x, y) in a.data().iter().zip(b.data()) {
            acc += (*x as f64 - *y as f64).powi(2);
        }
        let oracle = 10.0 * (a.numel() as f64 / acc).log10();
        assert!((psnr(&a, &b).unwrap() - oracle).abs() < 1e-6);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn psnr_decreases_under_translation() {
        let mut r = rng::stream(2, rng::salt::TEST, 0);
        let a = Tensor::rand_uniform(vec![3, 8, 8], 0.2, 0.8, &mut r);
        let near = psnr(&a, &a.affine(1.0, 0.01)).unwrap();
        let far = psnr(&a, &a.affine(1.0, 0.05)).unwrap();
        assert!(near < 100.0 && far < near);
    }

    #[test]
    fn ssim_self_similarity_is_one() {
        let mut r = rng::stream(3, rng::salt::TEST, 0);
        let a = Tensor::rand_uniform(vec![3, 10, 10], 0.0, 1.0, &mut r);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = Tensor::full(vec![1, 8, 8], 0.2);
        let b = Tensor::full(vec![1, 8, 8], 0.8);
        let expect = (2.0 * 0.2 * 0.8 + SSIM_C1) * SSIM_C2
            / ((0.2f64.powi(2) + 0.8f64.powi(2) + SSIM_C1) * SSIM_C2);
        let got = ssim(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-9, "got {got} expect {expect}");
        assert!((got - 0.4707).abs() < 1e-4);
    }

    #[test]
    fn ssim_matches_independent_two_pass_oracle() {
        // oracle: explicit weighted deviations instead of the
        // moment-difference form
        let mut r = rng::stream(4, rng::salt::TEST, 0);
        let a = Tensor::rand_uniform(vec![2, 16, 16], 0.0, 1.0, &mut r);
        let b = a.zip(&Tensor::randn(vec![2, 16, 16], &mut r), |x, n| {
            (x + 0.1 * n).clamp(0.0, 1.0)
        })
        .unwrap();
        let kernel = ssim_kernel();
        let (c, h, w) = a.dims3().unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for ch in 0..c {
            for oy in 0..=(h - 7) {
                for ox in 0..=(w - 7) {
                    let (mut ma, mut mb) = (0.0f64, 0.0f64);
                    for ky in 0..7 {
                        for kx in 0..7 {
                            let wgt = kernel[ky * 7 + kx];
                            ma += wgt * a.at3(ch, oy + ky, ox + kx) as f64;
                            mb += wgt * b.at3(ch, oy + ky, ox + kx) as f64;
                        }
                    }
                    let (mut sa, mut sb, mut sab) = (0.0f64, 0.0f64, 0.0f64);
                    for ky in 0..7 {
                        for kx in 0..7 {
                            let wgt = kernel[ky * 7 + kx];
                            let da = a.at3(ch, oy + ky, ox + kx) as f64 - ma;
                            let db = b.at3(ch, oy + ky, ox + kx) as f64 - mb;
                            sa += wgt * da * da;
                            sb += wgt * db * db;
                            sab += wgt * da * db;
                        }
                    }
                    total += (2.0 * ma * mb + SSIM_C1) * (2.0 * sab + SSIM_C2)
                        / ((ma * ma + mb * mb + SSIM_C1) * (sa + sb + SSIM_C2));
                    count += 1;
                }
            }
        }
        let oracle = total / count as f64;
        assert!((ssim(&a, &b).unwrap() - oracle).abs() < 1e-5);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    }

    #[test]
    fn ssim_requires_window_sized_images() {
        let a = Tensor::zeros(vec![1, 6, 6]);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn kurtosis_known_distributions() {
        let rademacher: Vec<f32> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let t = Tensor::new(vec![1000], rademacher).unwrap();
        assert!((kurtosis(&t).unwrap() + 2.0).abs() < 1e-12);

        let n = 100_001;
        let grid: Vec<f32> = (0..n).map(|i| i as f32 / (n - 1) as f32).collect();
        let t = Tensor::new(vec![n], grid).unwrap();
        assert!((kurtosis(&t).unwrap() + 1.2).abs() < 1e-3);

        let mut r = rng::stream(5, rng::salt::TEST, 0);
        let t = Tensor::randn(vec![1_000_000], &mut r);
        assert!(kurtosis(&t).unwrap().abs() < 0.02);
    }

    #[test]
    fn kurtosis_is_affine_invariant() {
        let mut r = rng::stream(6, rng::salt::TEST, 0);
        let t = Tensor::rand_uniform(vec![4096], 0.0, 1.0, &mut r);
        let k0 = kurtosis(&t).unwrap();
        let k1 = kurtosis(&t.affine(2.5, -1.0)).unwrap();
        assert!((k0 - k1).abs() < 1e-6);
    }

    #[test]
    fn kurtosis_rejects_degenerate_input() {
        assert!(kurtosis(&Tensor::scalar(1.0)).is_err());
        assert!(matches!(kurtosis(&Tensor::full(vec![8], 0.3)), Err(Error::ZeroVariance)));
    }

    #[test]
    fn frechet_moments_match_diagonal_closed_form() {
        // diagonal covariances commute, so the trace term is
        // sum_i (sqrt(a_i) - sqrt(b_i))^2
        let d = 4;
        let mu_a = vec![0.0, 1.0, -0.5, 2.0];
        let mu_b = vec![0.5, 1.0, 0.5, 1.0];
        let da: [f64; 4] = [1.0, 2.0, 0.5, 3.0];
        let db: [f64; 4] = [2.0, 2.0, 1.5, 0.5];
        let cov_a = DMatrix::from_fn(d, d, |i, j| if i == j { da[i] } else { 0.0 });
        let cov_b = DMatrix::from_fn(d, d, |i, j| if i == j { db[i] } else { 0.0 });
        let expect: f64 = mu_a.iter().zip(&mu_b).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            + da.iter().zip(&db).map(|(&a, &b)| (a.sqrt() - b.sqrt()).powi(2)).sum::<f64>();
        let got = frechet_from_moments(&mu_a, &cov_a, &mu_b, &cov_b).unwrap();
        assert!((got - expect).abs() < 1e-9, "got {got} expect {expect}");
    }

    #[test]
    fn frechet_identical_sets_vanish() {
        let mut r = rng::stream(7, rng::salt::TEST, 0);
        let set: Vec<Tensor> = (0..32).map(|_| Tensor::randn(vec![8], &mut r)).collect();
        let d = frechet_from_features(&set, &set).unwrap();
        assert!(d < 1e-4, "{d}");
        let other: Vec<Tensor> =
            (0..32).map(|_| Tensor::randn(vec![8], &mut r).affine(1.0, 0.5)).collect();
        let ab = frechet_from_features(&set, &other).unwrap();
        let ba = frechet_from_features(&other, &set).unwrap();
        assert!(ab > 0.0 && (ab - ba).abs() < 1e-9);
    }

    #[test]
    fn frechet_tight_clusters_reduce_to_mean_distance() {
        let jitter = 1e-4f32;
        let mk = |base: f32| -> Vec<Tensor> {
            (0..4)
                .map(|i| {
                    Tensor::new(vec![3], vec![base + jitter * i as f32, base, base]).unwrap()
                })
                .collect()
        };
        let a = mk(0.0);
        let b = mk(1.0);
        let d = frechet_from_features(&a, &b).unwrap();
        // means differ by ~1 in one coordinate... all three coordinates
        let expect = 3.0;
        assert!((d - expect).abs() < 1e-2, "{d}");
    }

    #[test]
    fn frechet_through_extractor_runs() {
        let f = FeatureExtractor::new(0);
        let mut r = rng::stream(8, rng::salt::TEST, 0);
        let a: Vec<Tensor> =
            (0..4).map(|_| Tensor::rand_uniform(vec![3, 8, 8], 0.0, 1.0, &mut r)).collect();
        let d = frechet_proxy(&a, &a, &f).unwrap();
        assert!(d < 1e-4);
    }
}

//! Measurement degradation operators.
//!
//! Linear operators (super-resolution, blur, inpainting, identity) are
//! represented exactly: either as a per-pixel diagonal or as a separable
//! pair of per-axis matrices acting as `Y = R X C^T` on each channel.
//! That representation gives an exact adjoint and an exact Moore-Penrose
//! pseudo-inverse (analytic for average pooling, per-axis SVD otherwise;
//! the Kronecker structure makes the per-axis pseudo-inverse equal to the
//! full-matrix one). JPEG quantization is the one nonlinear kind; it has
//! no pseudo-inverse and its tape gradient is the straight-through
//! identity.

pub mod jpeg;

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleKernel {
    AveragePool,
    Bicubic,
}

/// Random inpainting mask; `true` marks an observed pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn from_keep(h: usize, w: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != h * w || h == 0 || w == 0 {
            return Err(Error::invalid("mask length must equal h*w"));
        }
        Ok(Mask { h, w, keep })
    }

    /// Mask observing an exact pixel count: `round(fraction * h * w)`,
    /// chosen uniformly at random. Using an exact count keeps the
    /// realized fraction within rounding distance of the request.
    pub fn random<R: Rng + ?Sized>(h: usize, w: usize, observed_fraction: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&observed_fraction) {
            return Err(Error::invalid(format!(
                "observed fraction {observed_fraction} outside [0, 1]"
            )));
        }
        let n = h * w;
        if n == 0 {
            return Err(Error::invalid("mask must be non-empty"));
        }
        let count = ((observed_fraction * n as f64).round() as usize).clamp(1, n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = rng.gen_range(i..n);
            idx.swap(i, j);
        }
        let mut keep = vec![false; n];
        for &i in &idx[..count] {
            keep[i] = true;
        }
        Ok(Mask { h, w, keep })
    }

    pub fn observed_fraction(&self) -> f64 {
        self.keep.iter().filter(|&&k| k).count() as f64 / self.keep.len() as f64
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }
}

#[derive(Debug, Clone)]
pub enum OperatorKind {
    SuperRes { factor: usize, kernel: DownsampleKernel },
    GaussianBlur { kernel_size: usize, sigma: f64 },
    Inpaint { mask: Mask },
    Jpeg { quality: u8 },
    Denoise,
}

impl OperatorKind {
    pub fn label(&self) -> &'static str {
        match self {
            OperatorKind::SuperRes { .. } => "super_res",
            OperatorKind::GaussianBlur { .. } => "gaussian_blur",
            OperatorKind::Inpaint { .. } => "inpaint",
            OperatorKind::Jpeg { .. } => "jpeg",
            OperatorKind::Denoise => "denoise",
        }
    }
}

enum Form {
    /// Per-pixel multiplier, shared across channels.
    Diagonal(Vec<f32>),
    /// `Y = R X C^T` per channel, with precomputed pseudo-inverses.
    Separable {
        rows: DMatrix<f64>,
        cols: DMatrix<f64>,
        rows_pinv: DMatrix<f64>,
        cols_pinv: DMatrix<f64>,
    },
    /// Nonlinear JPEG quantization.
    Jpeg { quality: u8 },
}

struct Inner {
    kind: OperatorKind,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    form: Form,
}

#[derive(Clone)]
pub struct DegradationOperator(Arc<Inner>);

impl DegradationOperator {
    pub fn new(kind: OperatorKind, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::invalid("operator needs positive dimensions"));
        }
        let (oh, ow, form) = match &kind {
            OperatorKind::SuperRes { factor, kernel } => {
                let f = *factor;
                if f < 2 || h % f != 0 || w % f != 0 {
                    return Err(Error::invalid(format!(
                        "super-resolution factor {f} must be >= 2 and divide {h}x{w}"
                    )));
                }
                let (rows, cols) = match kernel {
                    DownsampleKernel::AveragePool => (avg_matrix(h, f), avg_matrix(w, f)),
                    DownsampleKernel::Bicubic => (bicubic_matrix(h, f), bicubic_matrix(w, f)),
                };
                let (rp, cp) = match kernel {
                    // pinv of the averaging matrix is its transpose
                    // scaled by the factor: block replication.
                    DownsampleKernel::AveragePool => (rows.transpose() * f as f64, cols.transpose() * f as f64),
                    DownsampleKernel::Bicubic => (pinv(&rows), pinv(&cols)),
                };
                (
                    h / f,
                    w / f,
                    Form::Separable { rows, cols, rows_pinv: rp, cols_pinv: cp },
                )
            }
            OperatorKind::GaussianBlur { kernel_size, sigma } => {
                let k = *kernel_size;
                if k % 2 == 0 || k == 0 || k > 2 * h.min(w) {
                    return Err(Error::invalid(format!("blur kernel size {k} must be odd and fit the image")));
                }
                if !(*sigma > 0.0) {
                    return Err(Error::invalid("blur sigma must be positive"));
                }
                let kern = gaussian_kernel_1d(k, *sigma);
                let rows = conv_matrix(h, &kern);
                let cols = conv_matrix(w, &kern);
                let (rp, cp) = (pinv(&rows), pinv(&cols));
                (h, w, Form::Separable { rows, cols, rows_pinv: rp, cols_pinv: cp })
            }
            OperatorKind::Inpaint { mask } => {
                if mask.dims() != (h, w) {
                    return Err(Error::ShapeMismatch {
                        context: "inpaint mask",
                        expected: vec![h, w],
                        got: vec![mask.h, mask.w],
                    });
                }
                let d = mask.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
                (h, w, Form::Diagonal(d))
            }
            OperatorKind::Jpeg { quality } => {
                jpeg::quant_table(*quality)?;
                if h % 8 != 0 || w % 8 != 0 {
                    return Err(Error::invalid(format!(
                        "jpeg operator needs dimensions divisible by 8, got {h}x{w}"
                    )));
                }
                (h, w, Form::Jpeg { quality: *quality })
            }
            OperatorKind::Denoise => (h, w, Form::Diagonal(vec![1.0; h * w])),
        };
        Ok(DegradationOperator(Arc::new(Inner { kind, h, w, oh, ow, form })))
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.0.kind
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self.0.form, Form::Jpeg { .. })
    }

    pub fn in_hw(&self) -> (usize, usize) {
        (self.0.h, self.0.w)
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.0.oh, self.0.ow)
    }

    fn check_in(&self, x: &Tensor, context: &'static str) -> Result<usize> {
        let (c, h, w) = x.dims3()?;
        if (h, w) != (self.0.h, self.0.w) {
            return Err(Error::ShapeMismatch {
                context,
                expected: vec![c, self.0.h, self.0.w],
                got: x.shape().to_vec(),
            });
        }
        Ok(c)
    }

    fn check_out(&self, y: &Tensor, context: &'static str) -> Result<usize> {
        let (c, h, w) = y.dims3()?;
        if (h, w) != (self.0.oh, self.0.ow) {
            return Err(Error::ShapeMismatch {
                context,
                expected: vec![c, self.0.oh, self.0.ow],
                got: y.shape().to_vec(),
            });
        }
        Ok(c)
    }

    /// Degrade a `[C,H,W]` image in `[0,1]`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.check_in(x, "operator apply")?;
        match &self.0.form {
            Form::Diagonal(d) => diag_apply(x, d, c, self.0.h * self.0.w),
            Form::Separable { rows, cols, .. } => {
                separable_apply(x, rows, cols, c, self.0.h, self.0.w)
            }
            Form::Jpeg { quality } => jpeg::degrade(x, *quality),
        }
    }

    /// Adjoint (`A^T y`) for linear kinds; shape goes measurement ->
    /// image.
    pub fn apply_adjoint(&self, y: &Tensor) -> Result<Tensor> {
        let c = self.check_out(y, "operator adjoint")?;
        match &self.0.form {
            Form::Diagonal(d) => diag_apply(y, d, c, self.0.h * self.0.w),
            Form::Separable { rows, cols, .. } => {
                let rt = rows.transpose();
                let ct = cols.transpose();
                separable_apply(y, &rt, &ct, c, self.0.oh, self.0.ow)
            }
            Form::Jpeg { .. } => Err(Error::UnsupportedOperator {
                operation: "apply_adjoint",
                kind: "jpeg",
            }),
        }
    }

    /// Moore-Penrose pseudo-inverse applied to a measurement.
    pub fn pinv_apply(&self, y: &Tensor) -> Result<Tensor> {
        let c = self.check_out(y, "operator pinv")?;
        match &self.0.form {
            Form::Diagonal(d) => diag_apply(y, d, c, self.0.h * self.0.w),
            Form::Separable { rows_pinv, cols_pinv, .. } => {
                separable_apply(y, rows_pinv, cols_pinv, c, self.0.oh, self.0.ow)
            }
            Form::Jpeg { .. } => Err(Error::UnsupportedOperator {
                operation: "pinv_apply",
                kind: "jpeg",
            }),
        }
    }

    /// Full-resolution image-space version of a measurement: `A^+ y` for
    /// linear kinds, the measurement itself for JPEG (already image
    /// sized).
    pub fn lift_measurement(&self, y: &Tensor) -> Result<Tensor> {
        match &self.0.form {
            Form::Jpeg { .. } => {
                self.check_out(y, "lift_measurement")?;
                Ok(y.clone())
            }
            _ => self.pinv_apply(y),
        }
    }

    /// Tape-recorded apply. Linear kinds backpropagate the exact adjoint;
    /// JPEG uses the straight-through identity (gradient of the
    /// transform-quantize path treated as 1).
    pub fn apply_var(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let out = self.apply(tape.value(x))?;
        let op = self.clone();
        Ok(tape.custom_unary(x, out, "degrade", move |g| match &op.0.form {
            Form::Jpeg { .. } => g.clone(),
            _ => op
                .apply_adjoint(g)
                .expect("adjoint shape fixed by construction"),
        }))
    }

    /// Additive Gaussian measurement noise with standard deviation
    /// `sigma`.
    pub fn add_noise<R: Rng + ?Sized>(&self, y: &Tensor, sigma: f64, rng: &mut R) -> Result<Tensor> {
        if sigma < 0.0 {
            return Err(Error::invalid("noise sigma must be non-negative"));
        }
        self.check_out(y, "add_noise")?;
        if sigma == 0.0 {
            return Ok(y.clone());
        }
        let noise = Tensor::randn(y.shape().to_vec(), rng);
        y.zip(&noise, |a, n| (a as f64 + sigma * n as f64) as f32)
    }

    /// Exact dense single-channel matrix of the linear map in f64
    /// (Kronecker expansion of the separable form); oracle/test support.
    pub fn explicit_matrix(&self) -> Result<DMatrix<f64>> {
        match &self.0.form {
            Form::Diagonal(d) => {
                let n = d.len();
                Ok(DMatrix::from_fn(n, n, |i, j| if i == j { d[i] as f64 } else { 0.0 }))
            }
            Form::Separable { rows, cols, .. } => Ok(kron_expand(rows, cols, self.0.w, self.0.ow)),
            Form::Jpeg { .. } => {
                Err(Error::UnsupportedOperator { operation: "explicit_matrix", kind: "jpeg" })
            }
        }
    }

    /// Exact dense single-channel matrix of the pseudo-inverse in f64.
    pub fn explicit_pinv_matrix(&self) -> Result<DMatrix<f64>> {
        match &self.0.form {
            Form::Diagonal(d) => {
                let n = d.len();
                Ok(DMatrix::from_fn(n, n, |i, j| if i == j { d[i] as f64 } else { 0.0 }))
            }
            Form::Separable { rows_pinv, cols_pinv, .. } => {
                Ok(kron_expand(rows_pinv, cols_pinv, self.0.ow, self.0.w))
            }
            Form::Jpeg { .. } => {
                Err(Error::UnsupportedOperator { operation: "explicit_pinv_matrix", kind: "jpeg" })
            }
        }
    }
}

/// Matrix of `X -> R X C^T` acting on row-major flattened planes, where
/// the input plane has `w_in` columns and the output `w_out`.
fn kron_expand(r: &DMatrix<f64>, c: &DMatrix<f64>, w_in: usize, w_out: usize) -> DMatrix<f64> {
    let (oh, ih) = (r.nrows(), r.ncols());
    let (ow, iw) = (c.nrows(), c.ncols());
    debug_assert_eq!(iw, w_in);
    debug_assert_eq!(ow, w_out);
    DMatrix::from_fn(oh * ow, ih * iw, |i, j| {
        let (ro, co) = (i / ow, i % ow);
        let (ri, ci) = (j / iw, j % iw);
        r[(ro, ri)] * c[(co, ci)]
    })
}

fn diag_apply(x: &Tensor, d: &[f32], c: usize, plane: usize) -> Result<Tensor> {
    let mut out = x.clone();
    for ch in 0..c {
        for (o, m) in out.data_mut()[ch * plane..(ch + 1) * plane]
            .iter_mut()
            .zip(d)
        {
            *o *= m;
        }
    }
    Ok(out)
}

fn separable_apply(
    x: &Tensor,
    rows: &DMatrix<f64>,
    cols: &DMatrix<f64>,
    c: usize,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let (oh, ow) = (rows.nrows(), cols.nrows());
    let plane = h * w;
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        let xm = DMatrix::from_fn(h, w, |r, cc| x.data()[ch * plane + r * w + cc] as f64);
        let ym = rows * xm * cols.transpose();
        for r in 0..oh {
            for cc in 0..ow {
                out[(ch * oh + r) * ow + cc] = ym[(r, cc)] as f32;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Normalized Gaussian taps, odd length.
pub fn gaussian_kernel_1d(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Zero-padded same-size 1D convolution as an `n x n` matrix.
fn conv_matrix(n: usize, kernel: &[f64]) -> DMatrix<f64> {
    let half = kernel.len() / 2;
    DMatrix::from_fn(n, n, |i, j| {
        let off = j as isize - i as isize + half as isize;
        if off >= 0 && (off as usize) < kernel.len() {
            kernel[off as usize]
        } else {
            0.0
        }
    })
}

/// Block-averaging downsample matrix, `(n/f) x n`.
fn avg_matrix(n: usize, f: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n / f, n, |i, j| {
        if j / f == i {
            1.0 / f as f64
        } else {
            0.0
        }
    })
}

fn bicubic_weight(x: f64) -> f64 {
    // Catmull-Rom style cubic with a = -0.5.
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
    } else if x < 2.0 {
        a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Antialiased bicubic downsample matrix, `(n/f) x n`: the cubic kernel
/// stretched by the factor, rows normalized to sum 1.
fn bicubic_matrix(n: usize, f: usize) -> DMatrix<f64> {
    let m = n / f;
    let mut mat = DMatrix::zeros(m, n);
    for i in 0..m {
        let center = (i as f64 + 0.5) * f as f64 - 0.5;
        let mut sum = 0.0;
        for j in 0..n {
            let wgt = bicubic_weight((j as f64 - center) / f as f64);
            mat[(i, j)] = wgt;
            sum += wgt;
        }
        for j in 0..n {
            mat[(i, j)] /= sum;
        }
    }
    mat
}

/// SVD pseudo-inverse with a relative singular value cutoff.
fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let eps = svd.singular_values.max() * 1e-12;
    svd.pseudo_inverse(eps).expect("svd computed with u and v")
}

//! Blockwise JPEG-style degradation: 8x8 orthonormal DCT-II, luminance
//! quantization applied to all three channels, inverse transform, clamp.
//! No chroma subsampling and no entropy coding; this reproduces the lossy
//! quantization stage only.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Baseline luminance quantization table (ITU T.81, table K.1).
pub const QUANT_BASE: [[u16; 8]; 8] = [
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
];

/// Quality-scaled table with the libjpeg scaling rule: factor
/// `5000/q` below 50, `200 - 2q` at and above, entries rounded and
/// floored at 1.
pub fn quant_table(quality: u8) -> Result<[[u32; 8]; 8]> {
    if quality == 0 || quality > 100 {
        return Err(Error::invalid(format!("jpeg quality {quality} outside 1..=100")));
    }
    let scale: u32 = if quality < 50 {
        5000 / quality as u32
    } else {
        200 - 2 * quality as u32
    };
    let mut out = [[0u32; 8]; 8];
    for r in 0..8 {
        for c in 0..8 {
            out[r][c] = ((QUANT_BASE[r][c] as u32 * scale + 50) / 100).max(1);
        }
    }
    Ok(out)
}

/// Orthonormal 8x8 DCT-II matrix: row `k`, column `n` is
/// `c_k * cos(pi (2n+1) k / 16)` with `c_0 = sqrt(1/8)`, `c_k = 1/2`.
fn dct_matrix() -> [[f64; 8]; 8] {
    let mut d = [[0.0f64; 8]; 8];
    for k in 0..8 {
        let ck = if k == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
        for n in 0..8 {
            d[k][n] = ck * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    d
}

/// Quantize one image. Input in `[0,1]`, `[C,H,W]` with `H`, `W`
/// divisible by 8; output clamped back to `[0,1]`.
pub fn degrade(x: &Tensor, quality: u8) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::invalid(format!(
            "jpeg degradation needs dimensions divisible by 8, got {h}x{w}"
        )));
    }
    let q = quant_table(quality)?;
    let d = dct_matrix();
    let mut out = vec![0.0f32; c * h * w];
    let mut block = [[0.0f64; 8]; 8];
    let mut tmp = [[0.0f64; 8]; 8];
    let mut coef = [[0.0f64; 8]; 8];
    for ch in 0..c {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for r in 0..8 {
                    let row = x.row(ch, by + r);
                    for cc in 0..8 {
                        block[r][cc] = row[bx + cc] as f64 * 255.0 - 128.0;
                    }
                }
                // coef = D * block * D^T
                for r in 0..8 {
                    for cc in 0..8 {
                        let mut acc = 0.0;
                        for k in 0..8 {
                            acc += d[r][k] * block[k][cc];
                        }
                        tmp[r][cc] = acc;
                    }
                }
                for r in 0..8 {
                    for cc in 0..8 {
                        let mut acc = 0.0;
                        for k in 0..8 {
                            acc += tmp[r][k] * d[cc][k];
                        }
                        let qv = q[r][cc] as f64;
                        coef[r][cc] = (acc / qv).round() * qv;
                    }
                }
                // block = D^T * coef * D
                for r in 0..8 {
                    for cc in 0..8 {
                        let mut acc = 0.0;
                        for k in 0..8 {
                            acc += d[k][r] * coef[k][cc];
                        }
                        tmp[r][cc] = acc;
                    }
                }
                for r in 0..8 {
                    for cc in 0..8 {
                        let mut acc = 0.0;
                        for k in 0..8 {
                            acc += tmp[r][k] * d[k][cc];
                        }
                        let v = ((acc + 128.0) / 255.0).clamp(0.0, 1.0);
                        out[(ch * h + by + r) * w + bx + cc] = v as f32;
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

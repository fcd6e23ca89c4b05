//! Image ingestion and the procedural dataset generator. Images on disk are
//! PNG (8- or 16-bit, color or gray); in memory they are [3, s, s] tensors in
//! [0, 1].

use std::path::Path;

use ddc_core::error::{Error, Result};
use ddc_core::rng;
use ddc_core::Tensor;
use image::imageops::{self, FilterType};
use image::{Rgb32FImage, RgbImage};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct NamedImage {
    pub name: String,
    pub image: Tensor,
}

fn buffer_to_tensor(buf: &Rgb32FImage) -> Result<Tensor> {
    let (w, h) = buf.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in buf.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px.0[c];
        }
    }
    Tensor::new(vec![3, h, w], data)
}

fn tensor_to_buffer(t: &Tensor) -> Result<Rgb32FImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::invalid(format!("expected 3 channels, got {c}")));
    }
    let mut buf = Rgb32FImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for ch in 0..3 {
            px.0[ch] = t.data()[(ch * h + y as usize) * w + x as usize];
        }
    }
    Ok(buf)
}

/// Decodes one PNG to a [0, 1] tensor at its native size. 16-bit PNGs are
/// scaled by 65535, gray images replicated across channels.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::invalid(format!("cannot decode {}: {e}", path.display())))?;
    buffer_to_tensor(&img.to_rgb32f())
}

/// Writes an 8-bit RGB PNG; values are clamped to [0, 1] first.
pub fn write_png(path: &Path, t: &Tensor) -> Result<()> {
    let (_, h, w) = t.dims3()?;
    let buf = tensor_to_buffer(t)?;
    let mut out = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let src = buf.get_pixel(x, y);
        for c in 0..3 {
            px.0[c] = (src.0[c].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out.save(path)
        .map_err(|e| Error::invalid(format!("cannot write {}: {e}", path.display())))
}

fn crop_and_resize(buf: Rgb32FImage, size: usize) -> Rgb32FImage {
    let (w, h) = buf.dimensions();
    let side = w.min(h);
    let cropped =
        imageops::crop_imm(&buf, (w - side) / 2, (h - side) / 2, side, side).to_image();
    if side as usize == size {
        cropped
    } else {
        imageops::resize(&cropped, size as u32, size as u32, FilterType::Triangle)
    }
}

/// Loads every PNG under `dir` in lexicographic filename order, center-cropped
/// and resized to `size`. Files that fail to decode are skipped with a
/// warning; an empty result is an error.
pub fn load_dataset(dir: &Path, size: usize) -> Result<Vec<NamedImage>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::invalid(format!("cannot read dataset dir {}: {e}", dir.display())))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort_by_key(|p| p.file_name().map(|n| n.to_os_string()));
    let mut images = Vec::new();
    for path in paths {
        let img = match image::open(&path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let resized = crop_and_resize(img.to_rgb32f(), size);
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        images.push(NamedImage { name, image: buffer_to_tensor(&resized)? });
    }
    if images.is_empty() {
        return Err(Error::invalid(format!(
            "no usable PNG images in {}",
            dir.display()
        )));
    }
    Ok(images)
}

/// Generates `n` seeded procedural images: smooth gradients, a sinusoidal
/// texture, and a few solid rectangles and disks. Same seed, same images.
pub fn synthesize(n: usize, size: usize, seed: u64) -> Vec<NamedImage> {
    (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, rng::salt::SYNTH, i as u64);
            let s = size;
            let sf = (s.max(2) - 1) as f32;
            let mut data = vec![0.0f32; 3 * s * s];
            for c in 0..3 {
                let gx: f32 = r.gen_range(-0.5..0.5);
                let gy: f32 = r.gen_range(-0.5..0.5);
                let base: f32 = r.gen_range(0.25..0.75);
                let amp: f32 = r.gen_range(0.05..0.2);
                let fx: f32 = r.gen_range(1.0..4.0);
                let fy: f32 = r.gen_range(1.0..4.0);
                let phase: f32 = r.gen_range(0.0..std::f32::consts::TAU);
                for y in 0..s {
                    for x in 0..s {
                        let wave = std::f32::consts::TAU * (fx * x as f32 + fy * y as f32) / s as f32;
                        data[(c * s + y) * s + x] =
                            base + gx * x as f32 / sf + gy * y as f32 / sf + amp * (wave + phase).sin();
                    }
                }
            }
            for _ in 0..r.gen_range(1..=2usize) {
                let x0 = r.gen_range(0..s);
                let y0 = r.gen_range(0..s);
                let rw = r.gen_range(s / 8..=s / 2).max(1);
                let rh = r.gen_range(s / 8..=s / 2).max(1);
                let color: [f32; 3] = [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)];
                for y in y0..(y0 + rh).min(s) {
                    for x in x0..(x0 + rw).min(s) {
                        for c in 0..3 {
                            data[(c * s + y) * s + x] = color[c];
                        }
                    }
                }
            }
            for _ in 0..r.gen_range(1..=2usize) {
                let cx = r.gen_range(0..s) as f32;
                let cy = r.gen_range(0..s) as f32;
                let radius = r.gen_range(s as f32 / 8.0..s as f32 / 3.0);
                let color: [f32; 3] = [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)];
                for y in 0..s {
                    for x in 0..s {
                        let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                        if d2 <= radius * radius {
                            for c in 0..3 {
                                data[(c * s + y) * s + x] = color[c];
                            }
                        }
                    }
                }
            }
            for v in &mut data {
                *v = v.clamp(0.0, 1.0);
            }
            NamedImage {
                name: format!("synthetic_{i:04}"),
                image: Tensor::new(vec![3, s, s], data).expect("synthetic image shape"),
            }
        })
        .collect()
}

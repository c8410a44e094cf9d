use ndarray::{Array3, Axis, Zip};

use super::color::{hsv_to_rgb, luma, rgb_to_hsv, LUMA};
use super::record::PhotometricParams;

/// Applies jitter (brightness, contrast, saturation, hue), then grayscale, then
/// Gaussian blur to a (3, H, W) image. Each stage clips to [0, 1]; stages whose
/// parameters are neutral are skipped entirely.
pub fn apply_photometric(image: &Array3<f64>, p: &PhotometricParams) -> Array3<f64> {
    let mut out = image.clone();
    if p.jitter_active {
        if p.brightness != 1.0 {
            out.mapv_inplace(|v| (v * p.brightness).clamp(0.0, 1.0));
        }
        if p.contrast != 1.0 {
            let n = (out.shape()[1] * out.shape()[2]) as f64;
            let mean = (0..3).map(|c| LUMA[c] * out.index_axis(Axis(0), c).sum()).sum::<f64>() / n;
            out.mapv_inplace(|v| ((v - mean) * p.contrast + mean).clamp(0.0, 1.0));
        }
        if p.saturation != 1.0 {
            per_pixel(&mut out, |rgb| {
                let g = luma(rgb);
                rgb.map(|v| (g + (v - g) * p.saturation).clamp(0.0, 1.0))
            });
        }
        if p.hue != 0.0 {
            per_pixel(&mut out, |rgb| {
                let [h, s, v] = rgb_to_hsv(rgb);
                hsv_to_rgb([(h + p.hue).rem_euclid(1.0), s, v]).map(|x| x.clamp(0.0, 1.0))
            });
        }
    }
    if p.grayscale_active {
        per_pixel(&mut out, |rgb| {
            let g = luma(rgb).clamp(0.0, 1.0);
            [g, g, g]
        });
    }
    if p.blur_active {
        out = gaussian_blur(&out, p.blur_sigma);
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    out
}

fn per_pixel(img: &mut Array3<f64>, f: impl Fn([f64; 3]) -> [f64; 3] + Sync) {
    let (_, h, w) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let rgb = [img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]];
            let out = f(rgb);
            for c in 0..3 {
                img[[c, y, x]] = out[c];
            }
        }
    }
}

/// Normalized 1-D Gaussian taps covering ±ceil(3σ).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Reflect-101 index into [0, n).
fn reflect(i: i64, n: i64) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflect-101 borders.
pub fn gaussian_blur(img: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (c, h, w) = img.dim();
    let mut tmp = Array3::<f64>::zeros((c, h, w));
    Zip::indexed(&mut tmp).for_each(|(ch, y, x), out| {
        *out = k
            .iter()
            .enumerate()
            .map(|(t, kv)| kv * img[[ch, y, reflect(x as i64 + t as i64 - r, w as i64)]])
            .sum();
    });
    let mut out = Array3::<f64>::zeros((c, h, w));
    Zip::indexed(&mut out).for_each(|(ch, y, x), o| {
        *o = k
            .iter()
            .enumerate()
            .map(|(t, kv)| kv * tmp[[ch, reflect(y as i64 + t as i64 - r, h as i64), x]])
            .sum();
    });
    out
}

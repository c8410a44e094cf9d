use ndarray::{Array2, Array3};
use rand::Rng as _;
use rayon::prelude::*;

use super::{ImageSample, DEFAULT_IGNORE};
use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::transforms::color::hsv_to_rgb;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Texture {
    Flat,
    HorizontalStripes,
    Checker,
    VerticalStripes,
    Diagonal,
    Dots,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStyle {
    pub texture: Texture,
    pub hue: f64,
}

/// One style per class id.
pub const STYLE_VOCABULARY: [ClassStyle; 6] = [
    ClassStyle { texture: Texture::Flat, hue: 0.0 },
    ClassStyle { texture: Texture::HorizontalStripes, hue: 0.25 },
    ClassStyle { texture: Texture::Checker, hue: 0.5 },
    ClassStyle { texture: Texture::VerticalStripes, hue: 0.75 },
    ClassStyle { texture: Texture::Diagonal, hue: 0.125 },
    ClassStyle { texture: Texture::Dots, hue: 0.625 },
];

/// Procedural scenes: a random Voronoi partition whose cells each carry one
/// class's texture and hue, under per-image photometric nuisances (hue
/// rotation, brightness, contrast) and pixel noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub side: usize,
    pub n_classes: usize,
    /// Inclusive range of Voronoi cells per image.
    pub regions_per_image: (usize, usize),
    /// Per-image hue shift drawn from [-hue_range, hue_range] (hue in turns).
    pub hue_range: f64,
    /// Per-image brightness factor drawn from [1 - r, 1 + r].
    pub brightness_range: f64,
    /// HSV saturation of every class color.
    pub saturation: f64,
    /// Per-image texture contrast factor drawn from [1 - r, 1 + r].
    pub contrast_range: f64,
    /// Relative modulation depth of the class textures.
    pub texture_amplitude: f64,
    /// Texture period in pixels.
    pub texture_period: usize,
    /// Std-dev of additive per-pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_images: 200,
            side: 64,
            n_classes: 4,
            regions_per_image: (4, 8),
            hue_range: 0.5,
            brightness_range: 0.25,
            saturation: 0.15,
            contrast_range: 0.25,
            texture_amplitude: 0.9,
            texture_period: 8,
            noise: 0.02,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes > STYLE_VOCABULARY.len() {
            return Err(Error::Config(format!(
                "synthetic data supports at most {} classes, got {}",
                STYLE_VOCABULARY.len(),
                self.n_classes
            )));
        }
        if self.n_classes < 1 || self.n_images == 0 || self.side < 8 {
            return Err(Error::Config(
                "synthetic data needs n_classes >= 1, n_images >= 1 and side >= 8".into(),
            ));
        }
        if self.regions_per_image.0 == 0 || self.regions_per_image.0 > self.regions_per_image.1 {
            return Err(Error::Config("regions_per_image must be a non-empty range of positive counts".into()));
        }
        if self.texture_period < 2 {
            return Err(Error::Config("texture_period must be at least 2".into()));
        }
        Ok(())
    }
}

/// Generates the dataset. Deterministic in `spec` (each image has its own
/// derived random stream, so generation parallelizes without changing output).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<ImageSample>> {
    spec.validate()?;
    (0..spec.n_images)
        .into_par_iter()
        .map(|i| generate_one(spec, i))
        .collect()
}

fn texture_value(t: Texture, x: usize, y: usize, period: usize) -> f64 {
    let half = period / 2;
    let on = |v: usize| (v % period) < half;
    let s = match t {
        Texture::Flat => return 0.0,
        Texture::HorizontalStripes => on(y),
        Texture::VerticalStripes => on(x),
        Texture::Checker => on(x) ^ on(y),
        Texture::Diagonal => on(x + y),
        Texture::Dots => on(x) && on(y),
    };
    if s {
        1.0
    } else {
        -1.0
    }
}

fn generate_one(spec: &SyntheticSpec, index: usize) -> Result<ImageSample> {
    let mut rng = derive_rng(spec.seed, &[index as u64]);
    let n = spec.side;
    let n_regions = rng.random_range(spec.regions_per_image.0..=spec.regions_per_image.1);
    let nf = n as f64;
    let seeds: Vec<(f64, f64, u32)> = (0..n_regions)
        .map(|_| {
            let class = rng.random_range(0..spec.n_classes) as u32;
            (rng.random_range(0.0..nf), rng.random_range(0.0..nf), class)
        })
        .collect();
    let labels = Array2::from_shape_fn((n, n), |(y, x)| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        seeds
            .iter()
            .map(|&(sx, sy, c)| ((sx - px).powi(2) + (sy - py).powi(2), c))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("at least one region")
            .1
    });

    let hue_shift = if spec.hue_range > 0.0 {
        rng.random_range(-spec.hue_range..=spec.hue_range)
    } else {
        0.0
    };
    let brightness = if spec.brightness_range > 0.0 {
        rng.random_range(1.0 - spec.brightness_range..=1.0 + spec.brightness_range)
    } else {
        1.0
    };
    let contrast = if spec.contrast_range > 0.0 {
        rng.random_range(1.0 - spec.contrast_range..=1.0 + spec.contrast_range)
    } else {
        1.0
    };
    let normal = rand_distr::Normal::new(0.0, spec.noise.max(0.0)).expect("finite std-dev");
    let mut image = Array3::<f64>::zeros((3, n, n));
    for y in 0..n {
        for x in 0..n {
            let style = STYLE_VOCABULARY[labels[[y, x]] as usize];
            let t = texture_value(style.texture, x, y, spec.texture_period);
            let v = 0.6 * (1.0 + spec.texture_amplitude * contrast * t) * brightness;
            let rgb = hsv_to_rgb([(style.hue + hue_shift).rem_euclid(1.0), spec.saturation, v.clamp(0.0, 1.0)]);
            for c in 0..3 {
                let noise: f64 = if spec.noise > 0.0 { rng.sample(normal) } else { 0.0 };
                image[[c, y, x]] = (rgb[c] + noise).clamp(0.0, 1.0);
            }
        }
    }
    ImageSample::new(format!("synth_{index:05}"), image, Some(labels), DEFAULT_IGNORE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::class_pixel_counts;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_images: 12,
            side: 16,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        assert_eq!(generate_synthetic(&small()).unwrap(), generate_synthetic(&small()).unwrap());
        let other = SyntheticSpec { seed: 1, ..small() };
        assert_ne!(generate_synthetic(&small()).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn default_shape_and_count() {
        let spec = SyntheticSpec::default();
        let data = generate_synthetic(&spec).unwrap();
        assert_eq!(data.len(), 200);
        assert!(data.iter().all(|s| s.image.shape() == [3, 64, 64]));
        let counts = class_pixel_counts(&data, 4);
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
        // Every pixel labeled.
        let total: u64 = counts.iter().sum();
        assert_eq!(total, 200 * 64 * 64);
    }

    #[test]
    fn flat_class_color_varies_across_images_only() {
        let data = generate_synthetic(&SyntheticSpec { n_images: 40, ..SyntheticSpec::default() }).unwrap();
        let mut means = Vec::new();
        for s in &data {
            let labels = s.labels.as_ref().unwrap();
            let px: Vec<[f64; 3]> = labels
                .indexed_iter()
                .filter(|(_, &l)| l == 0)
                .map(|((y, x), _)| [s.image[[0, y, x]], s.image[[1, y, x]], s.image[[2, y, x]]])
                .collect();
            if px.len() < 20 {
                continue;
            }
            let mean = (0..3).map(|c| px.iter().map(|p| p[c]).sum::<f64>() / px.len() as f64).collect::<Vec<_>>();
            let spread = px.iter().map(|p| (0..3).map(|c| (p[c] - mean[c]).abs()).fold(0.0, f64::max)).fold(0.0, f64::max);
            assert!(spread < 0.15, "{spread}");
            means.push(mean);
        }
        assert!(means.len() > 5);
        let far = means.iter().flat_map(|a| means.iter().map(move |b| (0..3).map(|c| (a[c] - b[c]).abs()).fold(0.0, f64::max))).fold(0.0, f64::max);
        assert!(far > 0.25, "{far}");
    }

    #[test]
    fn too_many_classes_rejected() {
        let spec = SyntheticSpec { n_classes: 7, ..small() };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
    }
}

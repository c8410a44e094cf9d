use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const JITTER_PROB: f64 = 0.8;
pub const GRAYSCALE_PROB: f64 = 0.2;
pub const BLUR_PROB: f64 = 0.5;
pub const FLIP_PROB: f64 = 0.5;
/// Brightness, contrast and saturation factors are drawn from 1 ± this.
pub const JITTER_STRENGTH: f64 = 0.3;
pub const HUE_STRENGTH: f64 = 0.1;
pub const BLUR_SIGMA: (f64, f64) = (0.1, 2.0);
pub const CROP_FACTOR: (f64, f64) = (0.5, 1.0);

/// Fully materialized color-space perturbation. Parameters are drawn even when
/// their flag is off so a record always consumes the same random stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricParams {
    pub jitter_active: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift in turns.
    pub hue: f64,
    pub grayscale_active: bool,
    pub blur_active: bool,
    pub blur_sigma: f64,
}

impl PhotometricParams {
    pub fn identity() -> Self {
        Self {
            jitter_active: false,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
            grayscale_active: false,
            blur_active: false,
            blur_sigma: BLUR_SIGMA.0,
        }
    }

    pub fn sample(rng: &mut Rng) -> Self {
        let s = JITTER_STRENGTH;
        Self {
            jitter_active: rng.random_bool(JITTER_PROB),
            brightness: rng.random_range(1.0 - s..=1.0 + s),
            contrast: rng.random_range(1.0 - s..=1.0 + s),
            saturation: rng.random_range(1.0 - s..=1.0 + s),
            hue: rng.random_range(-HUE_STRENGTH..=HUE_STRENGTH),
            grayscale_active: rng.random_bool(GRAYSCALE_PROB),
            blur_active: rng.random_bool(BLUR_PROB),
            blur_sigma: rng.random_range(BLUR_SIGMA.0..=BLUR_SIGMA.1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = JITTER_STRENGTH + 1e-12;
        let ok = [self.brightness, self.contrast, self.saturation]
            .iter()
            .all(|f| (f - 1.0).abs() <= s)
            && self.hue.abs() <= HUE_STRENGTH + 1e-12
            && (!self.blur_active || (BLUR_SIGMA.0..=BLUR_SIGMA.1).contains(&self.blur_sigma));
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("photometric parameters out of range: {self:?}")))
        }
    }

    fn to_flat(self) -> [f64; 8] {
        [
            flag(self.jitter_active),
            self.brightness,
            self.contrast,
            self.saturation,
            self.hue,
            flag(self.grayscale_active),
            flag(self.blur_active),
            self.blur_sigma,
        ]
    }

    fn from_flat(v: &[f64]) -> Result<Self> {
        let p = Self {
            jitter_active: unflag(v[0])?,
            brightness: v[1],
            contrast: v[2],
            saturation: v[3],
            hue: v[4],
            grayscale_active: unflag(v[5])?,
            blur_active: unflag(v[6])?,
            blur_sigma: v[7],
        };
        p.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(p)
    }
}

/// Square crop (side `crop_factor * min(H, W)`, centered at the normalized
/// `crop_center`), resized to `out_side`, then optionally mirrored left-right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricParams {
    pub flip: bool,
    pub crop_factor: f64,
    /// Normalized (cx, cy).
    pub crop_center: (f64, f64),
    pub out_side: usize,
}

impl GeometricParams {
    pub fn identity(out_side: usize) -> Self {
        Self {
            flip: false,
            crop_factor: 1.0,
            crop_center: (0.5, 0.5),
            out_side,
        }
    }

    pub fn sample(rng: &mut Rng, out_side: usize) -> Self {
        let flip = rng.random_bool(FLIP_PROB);
        let r = rng.random_range(CROP_FACTOR.0..=CROP_FACTOR.1);
        let half = r / 2.0;
        let cx = rng.random_range(half..=1.0 - half);
        let cy = rng.random_range(half..=1.0 - half);
        Self {
            flip,
            crop_factor: r,
            crop_center: (cx, cy),
            out_side,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.crop_factor;
        let half = r / 2.0 - 1e-12;
        let (cx, cy) = self.crop_center;
        let inside = |c: f64| c - half >= 0.0 && c + half <= 1.0;
        if (CROP_FACTOR.0..=CROP_FACTOR.1).contains(&r) && inside(cx) && inside(cy) && self.out_side > 0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("geometric parameters out of range: {self:?}")))
        }
    }
}

/// Two photometric views and the single geometric transform of one image.
///
/// Flat layout (21 little-endian f64, flags stored as 0.0 / 1.0):
/// `photo1[0..8] photo2[8..16] flip r cx cy out_side`, where each photometric
/// block is `jitter b c s hue gray blur sigma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformRecord {
    pub photo1: PhotometricParams,
    pub photo2: PhotometricParams,
    pub geo: GeometricParams,
}

impl TransformRecord {
    pub const FLAT_LEN: usize = 21;

    pub fn identity(out_side: usize) -> Self {
        Self {
            photo1: PhotometricParams::identity(),
            photo2: PhotometricParams::identity(),
            geo: GeometricParams::identity(out_side),
        }
    }

    pub fn to_flat(&self) -> [f64; Self::FLAT_LEN] {
        let mut out = [0.0; Self::FLAT_LEN];
        out[..8].copy_from_slice(&self.photo1.to_flat());
        out[8..16].copy_from_slice(&self.photo2.to_flat());
        out[16] = flag(self.geo.flip);
        out[17] = self.geo.crop_factor;
        out[18] = self.geo.crop_center.0;
        out[19] = self.geo.crop_center.1;
        out[20] = self.geo.out_side as f64;
        out
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != Self::FLAT_LEN {
            return Err(Error::Format(format!(
                "transform record has {} fields, expected {}",
                v.len(),
                Self::FLAT_LEN
            )));
        }
        let out_side = v[20];
        if out_side < 1.0 || out_side.fract() != 0.0 {
            return Err(Error::Format(format!("bad out_side {out_side}")));
        }
        let geo = GeometricParams {
            flip: unflag(v[16])?,
            crop_factor: v[17],
            crop_center: (v[18], v[19]),
            out_side: out_side as usize,
        };
        geo.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self {
            photo1: PhotometricParams::from_flat(&v[..8])?,
            photo2: PhotometricParams::from_flat(&v[8..16])?,
            geo,
        })
    }
}

/// Draws a complete record: two photometric views, then one geometric transform.
pub fn sample_record(rng: &mut Rng, out_side: usize) -> TransformRecord {
    let photo1 = PhotometricParams::sample(rng);
    let photo2 = PhotometricParams::sample(rng);
    let geo = GeometricParams::sample(rng, out_side);
    TransformRecord { photo1, photo2, geo }
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn unflag(v: f64) -> Result<bool> {
    match v {
        0.0 => Ok(false),
        1.0 => Ok(true),
        _ => Err(Error::Format(format!("flag field holds {v}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn same_seed_same_record() {
        let a = sample_record(&mut rng_from_seed(3), 64);
        let b = sample_record(&mut rng_from_seed(3), 64);
        assert_eq!(a, b);
    }

    #[test]
    fn activation_frequencies() {
        let mut rng = rng_from_seed(11);
        let n = 10_000;
        let recs: Vec<_> = (0..n).map(|_| sample_record(&mut rng, 32)).collect();
        let freq = |f: &dyn Fn(&TransformRecord) -> bool| recs.iter().filter(|r| f(r)).count() as f64 / n as f64;
        assert!((freq(&|r| r.photo1.jitter_active) - 0.8).abs() < 0.02);
        assert!((freq(&|r| r.photo2.grayscale_active) - 0.2).abs() < 0.02);
        assert!((freq(&|r| r.photo1.blur_active) - 0.5).abs() < 0.02);
        assert!((freq(&|r| r.geo.flip) - 0.5).abs() < 0.02);
        for r in &recs {
            assert!((0.5..=1.0).contains(&r.geo.crop_factor));
            r.geo.validate().unwrap();
            r.photo1.validate().unwrap();
            r.photo2.validate().unwrap();
        }
    }

    #[test]
    fn flat_round_trip_is_exact() {
        let mut rng = rng_from_seed(5);
        for _ in 0..100 {
            let r = sample_record(&mut rng, 80);
            assert_eq!(TransformRecord::from_flat(&r.to_flat()).unwrap(), r);
        }
        let mut bad = TransformRecord::identity(8).to_flat();
        bad[0] = 0.5;
        assert!(TransformRecord::from_flat(&bad).is_err());
        assert!(TransformRecord::from_flat(&bad[..20]).is_err());
    }
}

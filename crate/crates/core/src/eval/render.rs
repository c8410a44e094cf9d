use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Color for clusters that received no evaluated pixels.
pub const EMPTY_COLOR: [u8; 3] = [0, 0, 0];

/// Distinct, deterministic colors (golden-ratio hue walk).
pub fn default_palette(n: usize) -> Vec<[u8; 3]> {
    (0..n)
        .map(|i| {
            let h = (i as f64 * 0.618_033_988_75).fract();
            let rgb = crate::transforms::color::hsv_to_rgb([h, 0.65, 0.95]);
            rgb.map(|v| (v * 255.0).round() as u8)
        })
        .collect()
}

pub fn paint(labels: &Array2<u32>, colors: &[[u8; 3]]) -> RgbImage {
    let (h, w) = labels.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb(*colors.get(labels[[y as usize, x as usize]] as usize).unwrap_or(&EMPTY_COLOR))
    })
}

/// Paints every cluster with the color of its majority ground-truth class
/// over the whole set (ties to the lowest class id).
pub fn render_majority_vote(
    preds: &[Array2<u32>],
    gts: &[Array2<u32>],
    palette: &[[u8; 3]],
    k_pred: usize,
    ignore: u32,
) -> Result<Vec<RgbImage>> {
    if preds.len() != gts.len() {
        return Err(Error::Dimension {
            expected: gts.len(),
            got: preds.len(),
        });
    }
    let n_classes = palette.len();
    let mut votes = Array2::<u64>::zeros((k_pred, n_classes));
    for (p, g) in preds.iter().zip(gts) {
        if p.dim() != g.dim() {
            return Err(Error::Shape(format!("prediction {:?} vs labels {:?}", p.dim(), g.dim())));
        }
        for (&pk, &gk) in p.iter().zip(g) {
            if gk == ignore {
                continue;
            }
            if pk as usize >= k_pred || gk as usize >= n_classes {
                return Err(Error::LabelOutOfRange {
                    label: pk.max(gk) as usize,
                    classes: k_pred.min(n_classes),
                });
            }
            votes[[pk as usize, gk as usize]] += 1;
        }
    }
    let colors: Vec<[u8; 3]> = votes
        .rows()
        .into_iter()
        .map(|row| {
            let mut best: Option<(usize, u64)> = None;
            for (c, &n) in row.iter().enumerate() {
                if n > 0 && best.is_none_or(|(_, b)| n > b) {
                    best = Some((c, n));
                }
            }
            best.map_or(EMPTY_COLOR, |(c, _)| palette[c])
        })
        .collect();
    Ok(preds.iter().map(|p| paint(p, &colors)).collect())
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use rayon::prelude::*;

use super::{ImageSample, DEFAULT_IGNORE};
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

/// Location and preprocessing parameters of an image-folder dataset.
///
/// Layout: `<root>/images/<split>/<stem>.<ext>` with optional label maps at
/// `<root>/labels/<split>/<stem>.png` (single channel, 8 bit).
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    pub resolution: usize,
    pub n_classes: usize,
    pub label_remap: Option<BTreeMap<u32, u32>>,
    pub ignore_value: u32,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, split: impl Into<String>, resolution: usize, n_classes: usize) -> Self {
        Self {
            root: root.into(),
            split: split.into(),
            resolution,
            n_classes,
            label_remap: None,
            ignore_value: DEFAULT_IGNORE,
        }
    }

    fn image_dir(&self) -> PathBuf {
        self.root.join("images").join(&self.split)
    }

    fn label_dir(&self) -> PathBuf {
        self.root.join("labels").join(&self.split)
    }
}

/// Parses a remap table: one `source target` pair per line (whitespace, comma
/// or colon separated); `#` starts a comment.
pub fn parse_label_remap(text: &str) -> Result<BTreeMap<u32, u32>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c == ':' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let parsed = match fields.as_slice() {
            [a, b] => a.parse::<u32>().ok().zip(b.parse::<u32>().ok()),
            _ => None,
        };
        let (src, dst) = parsed.ok_or_else(|| {
            Error::Config(format!("label remap line {}: expected `source target`, got `{raw}`", lineno + 1))
        })?;
        if map.insert(src, dst).is_some() {
            return Err(Error::Config(format!("label remap: source id {src} listed twice")));
        }
    }
    Ok(map)
}

/// Loads every image of the split, resizes the shorter side to
/// `manifest.resolution`, center-crops to a square and remaps labels.
/// Output is sorted by id.
pub fn load_and_preprocess(manifest: &DatasetManifest) -> Result<Vec<ImageSample>> {
    if manifest.resolution == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    let image_dir = manifest.image_dir();
    if !image_dir.is_dir() {
        return Err(Error::io(
            &image_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "image directory not found"),
        ));
    }
    let mut entries: Vec<(String, PathBuf)> = std::fs::read_dir(&image_dir)
        .map_err(|e| Error::io(&image_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .filter_map(|p| Some((p.file_stem()?.to_str()?.to_owned(), p)))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Config(format!("no images found in {}", image_dir.display())));
    }
    let label_dir = manifest.label_dir();
    let with_labels = label_dir.is_dir();

    let results: Vec<Result<ImageSample>> = entries
        .par_iter()
        .map(|(id, path)| {
            let label_path = with_labels.then(|| label_dir.join(format!("{id}.png")));
            load_one(manifest, id, path, label_path.as_deref())
        })
        .collect();
    results.into_iter().collect()
}

fn load_one(manifest: &DatasetManifest, id: &str, path: &Path, label_path: Option<&Path>) -> Result<ImageSample> {
    let decode_err = |message: String| Error::Decode {
        id: id.to_owned(),
        message,
    };
    let rgb = image::open(path)
        .map_err(|e| decode_err(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let labels = match label_path {
        Some(lp) => Some(
            image::open(lp)
                .map_err(|e| decode_err(format!("{}: {e}", lp.display())))?
                .to_luma8(),
        ),
        None => None,
    };
    preprocess(id, &rgb, labels.as_ref(), manifest)
}

/// Resize + center-crop + remap for one decoded image.
pub fn preprocess(
    id: &str,
    rgb: &RgbImage,
    labels: Option<&GrayImage>,
    manifest: &DatasetManifest,
) -> Result<ImageSample> {
    let (w, h) = rgb.dimensions();
    if let Some(l) = labels {
        if l.dimensions() != (w, h) {
            return Err(Error::Shape(format!(
                "image `{id}` is {w}x{h} but its label map is {}x{}",
                l.width(),
                l.height()
            )));
        }
    }
    let res = manifest.resolution as u32;
    let (nw, nh) = if w <= h {
        (res, ((h as u64 * res as u64 + w as u64 / 2) / w as u64).max(res as u64) as u32)
    } else {
        (((w as u64 * res as u64 + h as u64 / 2) / h as u64).max(res as u64) as u32, res)
    };
    let (x0, y0) = ((nw - res) / 2, (nh - res) / 2);

    let img = if (w, h) == (nw, nh) {
        rgb.clone()
    } else {
        imageops::resize(rgb, nw, nh, FilterType::Triangle)
    };
    let img = imageops::crop_imm(&img, x0, y0, res, res).to_image();
    let n = res as usize;
    let image = Array3::from_shape_fn((3, n, n), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    });

    let labels = match labels {
        Some(l) => {
            let l = if (w, h) == (nw, nh) {
                l.clone()
            } else {
                imageops::resize(l, nw, nh, FilterType::Nearest)
            };
            let l = imageops::crop_imm(&l, x0, y0, res, res).to_image();
            let raw = Array2::from_shape_fn((n, n), |(y, x)| l.get_pixel(x as u32, y as u32)[0] as u32);
            Some(remap_labels(id, raw, manifest)?)
        }
        None => None,
    };
    ImageSample::new(id, image, labels, manifest.ignore_value)
}

fn remap_labels(id: &str, raw: Array2<u32>, manifest: &DatasetManifest) -> Result<Array2<u32>> {
    let ignore = manifest.ignore_value;
    let mapped = match &manifest.label_remap {
        Some(map) => raw.mapv(|v| {
            if v == ignore {
                ignore
            } else {
                map.get(&v).copied().unwrap_or(ignore)
            }
        }),
        None => raw,
    };
    if let Some(&bad) = mapped
        .iter()
        .find(|&&v| v != ignore && v as usize >= manifest.n_classes)
    {
        return Err(Error::Decode {
            id: id.to_owned(),
            message: format!("label {bad} outside [0, {})", manifest.n_classes),
        });
    }
    Ok(mapped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Luma, Rgb};

    fn manifest(res: usize) -> DatasetManifest {
        DatasetManifest::new("/nonexistent", "val", res, 27)
    }

    #[test]
    fn landscape_image_is_resized_and_cropped() {
        let rgb = RgbImage::from_fn(640, 480, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 7]));
        let s = preprocess("a", &rgb, None, &manifest(320)).unwrap();
        assert_eq!(s.image.shape(), &[3, 320, 320]);
    }

    #[test]
    fn conforming_image_is_unchanged() {
        let rgb = RgbImage::from_fn(32, 32, |x, y| Rgb([x as u8 * 5, y as u8 * 3, (x + y) as u8]));
        let s = preprocess("a", &rgb, None, &manifest(32)).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..3 {
                    let expect = rgb.get_pixel(x, y)[c] as f64 / 255.0;
                    assert_eq!(s.image[[c, y as usize, x as usize]], expect);
                }
            }
        }
        // Idempotence through an 8-bit round trip.
        let back = RgbImage::from_fn(32, 32, |x, y| {
            Rgb(std::array::from_fn(|c| (s.image[[c, y as usize, x as usize]] * 255.0).round() as u8))
        });
        assert_eq!(back, rgb);
    }

    #[test]
    fn constant_label_is_remapped() {
        let rgb = RgbImage::new(40, 20);
        let lab = GrayImage::from_pixel(40, 20, Luma([5]));
        let mut m = manifest(10);
        m.label_remap = Some(BTreeMap::from([(5, 2)]));
        let s = preprocess("a", &rgb, Some(&lab), &m).unwrap();
        assert!(s.labels.unwrap().iter().all(|&v| v == 2));
    }

    #[test]
    fn unmapped_ids_become_ignore() {
        let rgb = RgbImage::new(4, 4);
        let lab = GrayImage::from_fn(4, 4, |x, _| Luma([if x < 2 { 5 } else { 9 }]));
        let mut m = manifest(4);
        m.label_remap = Some(BTreeMap::from([(5, 2)]));
        let s = preprocess("a", &rgb, Some(&lab), &m).unwrap();
        let l = s.labels.unwrap();
        assert_eq!(l[[0, 0]], 2);
        assert_eq!(l[[0, 3]], DEFAULT_IGNORE);
        // Remapping preserves the pixel count, ignore included.
        assert_eq!(l.len(), 16);
    }

    #[test]
    fn nearest_label_resize_introduces_no_new_values() {
        let rgb = RgbImage::new(37, 23);
        let lab = GrayImage::from_fn(37, 23, |x, y| Luma([[1u8, 4, 9][((x / 5 + y / 3) % 3) as usize]]));
        let s = preprocess("a", &rgb, Some(&lab), &manifest(16)).unwrap();
        assert!(s.labels.unwrap().iter().all(|v| [1, 4, 9].contains(v)));
    }

    #[test]
    fn size_mismatch_is_hard_failure() {
        let rgb = RgbImage::new(8, 8);
        let lab = GrayImage::new(8, 9);
        assert!(matches!(preprocess("a", &rgb, Some(&lab), &manifest(8)), Err(Error::Shape(_))));
    }

    #[test]
    fn remap_table_parsing() {
        let m = parse_label_remap("# coarse\n0 1\n5,2\n7: 3 # trailing\n\n").unwrap();
        assert_eq!(m, BTreeMap::from([(0, 1), (5, 2), (7, 3)]));
        assert!(parse_label_remap("1 2 3").is_err());
        assert!(parse_label_remap("1 2\n1 3").is_err());
    }

    #[test]
    fn folder_round_trip_sorted_by_id() {
        let dir = tempfile::tempdir().unwrap();
        let img_dir = dir.path().join("images/train");
        let lab_dir = dir.path().join("labels/train");
        std::fs::create_dir_all(&img_dir).unwrap();
        std::fs::create_dir_all(&lab_dir).unwrap();
        for id in ["b", "a", "c"] {
            RgbImage::from_pixel(12, 8, Rgb([10, 20, 30])).save(img_dir.join(format!("{id}.png"))).unwrap();
            GrayImage::from_pixel(12, 8, Luma([1])).save(lab_dir.join(format!("{id}.png"))).unwrap();
        }
        let m = DatasetManifest::new(dir.path(), "train", 8, 3);
        let samples = load_and_preprocess(&m).unwrap();
        let ids: Vec<_> = samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(samples[0].labels.as_ref().unwrap().dim(), (8, 8));

        std::fs::write(img_dir.join("d.png"), b"not a png").unwrap();
        match load_and_preprocess(&m) {
            Err(Error::Decode { id, .. }) => assert_eq!(id, "d"),
            other => panic!("expected decode error, got {other:?}"),
        }
    }
}

//! Per-epoch pseudo-labels and their on-disk form.
//!
//! Binary layout, little-endian:
//!
//! ```text
//! "PCPL" version:u8 epoch:u32 K:u32 D:u32 n_images:u32 grid_h:u32 grid_w:u32
//! centroids1: K*D f64, centroids2: K*D f64
//! per image: id_len:u32 id:utf8 record:21 f64 view1:h*w u32 view2:h*w u32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use super::Centroids;
use crate::error::{Error, Result};
use crate::losses::{cluster_size_weights, ClusterWeights};
use crate::transforms::TransformRecord;

const MAGIC: &[u8; 4] = b"PCPL";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageLabels {
    pub id: String,
    pub view1: Array2<u32>,
    pub view2: Array2<u32>,
    pub record: TransformRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub epoch: u32,
    pub centroids1: Centroids,
    pub centroids2: Centroids,
    pub images: Vec<ImageLabels>,
}

impl PseudoLabelSet {
    /// Checks the set's invariants.
    pub fn validate(&self) -> Result<()> {
        let k = self.centroids1.k();
        if self.centroids2.k() != k || self.centroids2.dim() != self.centroids1.dim() {
            return Err(Error::Shape("views carry differently shaped centroids".into()));
        }
        if self.images.is_empty() {
            return Err(Error::Clustering("pseudo-label set is empty".into()));
        }
        let grid = self.images[0].view1.dim();
        for im in &self.images {
            if im.view1.dim() != grid || im.view2.dim() != grid {
                return Err(Error::Shape(format!("image `{}`: label grids differ in shape", im.id)));
            }
            if let Some(&l) = im.view1.iter().chain(im.view2.iter()).find(|&&l| l as usize >= k) {
                return Err(Error::LabelOutOfRange {
                    label: l as usize,
                    classes: k,
                });
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.centroids1.k()
    }

    pub fn get(&self, id: &str) -> Option<&ImageLabels> {
        self.images.iter().find(|im| im.id == id)
    }

    /// Per-cluster pixel counts for view 1 or 2.
    pub fn counts(&self, view: u8) -> Vec<u64> {
        let mut c = vec![0u64; self.k()];
        for im in &self.images {
            let grid = if view == 1 { &im.view1 } else { &im.view2 };
            grid.iter().for_each(|&l| c[l as usize] += 1);
        }
        c
    }

    pub fn weights(&self, view: u8) -> ClusterWeights {
        let c = self.counts(view);
        let total = c.iter().sum();
        cluster_size_weights(&c, total)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        self.validate()?;
        let io = |e| Error::io("<pseudo-labels>", e);
        let (gh, gw) = self.images[0].view1.dim();
        w.write_all(MAGIC).map_err(io)?;
        w.write_u8(VERSION).map_err(io)?;
        for v in [
            self.epoch,
            self.k() as u32,
            self.centroids1.dim() as u32,
            self.images.len() as u32,
            gh as u32,
            gw as u32,
        ] {
            w.write_u32::<LE>(v).map_err(io)?;
        }
        for c in [&self.centroids1, &self.centroids2] {
            for &v in c.matrix() {
                w.write_f64::<LE>(v).map_err(io)?;
            }
        }
        for im in &self.images {
            w.write_u32::<LE>(im.id.len() as u32).map_err(io)?;
            w.write_all(im.id.as_bytes()).map_err(io)?;
            for v in im.record.to_flat() {
                w.write_f64::<LE>(v).map_err(io)?;
            }
            for &l in im.view1.iter().chain(im.view2.iter()) {
                w.write_u32::<LE>(l).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let bad = |e: std::io::Error| Error::Format(format!("pseudo-label set: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a pseudo-label file".into()));
        }
        let version = r.read_u8().map_err(bad)?;
        if version != VERSION {
            return Err(Error::Format(format!("pseudo-label version {version}, expected {VERSION}")));
        }
        let mut hdr = [0u32; 6];
        for h in &mut hdr {
            *h = r.read_u32::<LE>().map_err(bad)?;
        }
        let [epoch, k, d, n, gh, gw] = hdr.map(|v| v as usize);
        let mut read_centroids = |view| -> Result<Centroids> {
            let mut v = vec![0.0; k * d];
            r.read_f64_into::<LE>(&mut v).map_err(bad)?;
            Centroids::new(Array2::from_shape_vec((k, d), v).map_err(|e| Error::Format(e.to_string()))?, view)
        };
        let centroids1 = read_centroids(1)?;
        let centroids2 = read_centroids(2)?;
        let mut images = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.read_u32::<LE>().map_err(bad)? as usize;
            let mut id = vec![0u8; len];
            r.read_exact(&mut id).map_err(bad)?;
            let id = String::from_utf8(id).map_err(|e| Error::Format(e.to_string()))?;
            let mut rec = [0.0; TransformRecord::FLAT_LEN];
            r.read_f64_into::<LE>(&mut rec).map_err(bad)?;
            let record = TransformRecord::from_flat(&rec)?;
            let mut grids = [vec![0u32; gh * gw], vec![0u32; gh * gw]];
            for g in &mut grids {
                r.read_u32_into::<LE>(g).map_err(bad)?;
            }
            let [g1, g2] = grids;
            let shape = |g| Array2::from_shape_vec((gh, gw), g).map_err(|e| Error::Format(e.to_string()));
            images.push(ImageLabels {
                id,
                view1: shape(g1)?,
                view2: shape(g2)?,
                record,
            });
        }
        let set = Self {
            epoch: epoch as u32,
            centroids1,
            centroids2,
            images,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(f))
    }
}

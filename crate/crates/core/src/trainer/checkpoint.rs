//! Binary checkpoint: a JSON header followed by raw f64 blocks.
//!
//! ```text
//! "PCCK" version:u8 header_len:u32 header:json
//! params:f64*P adam_m:f64*P adam_v:f64*P centroid blocks (header order)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::clustering::Centroids;
use crate::error::{Error, Result};
use crate::features::{Extractor, ExtractorConfig};
use crate::optim::Adam;

const MAGIC: &[u8; 4] = b"PCCK";
const VERSION: u8 = 1;

/// Centroids of the last clustering pass, keyed like `k27.view1`, plus the
/// clean pass used for prediction under the key `eval`.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedCentroids {
    pub name: String,
    pub centroids: Centroids,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub extractor: ExtractorConfig,
    pub config_hash: String,
    /// Completed epochs.
    pub epoch: u32,
    pub params: Vec<f64>,
    pub optimizer: Adam,
    pub centroids: Vec<NamedCentroids>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    train: TrainConfig,
    extractor: ExtractorConfig,
    config_hash: String,
    epoch: u32,
    n_params: usize,
    layout: Vec<(String, Vec<usize>)>,
    adam_step: u64,
    adam: crate::optim::AdamConfig,
    centroids: Vec<(String, u8, usize, usize)>,
}

impl Checkpoint {
    pub fn eval_centroids(&self) -> Result<&Centroids> {
        self.centroid("eval")
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no evaluation centroids".into()))
    }

    pub fn centroid(&self, name: &str) -> Option<&Centroids> {
        self.centroids.iter().find(|c| c.name == name).map(|c| &c.centroids)
    }

    pub fn extractor(&self) -> Result<Extractor> {
        Extractor::from_params(self.extractor.clone(), &self.params)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let ex = self.extractor()?;
        let header = Header {
            train: self.train.clone(),
            extractor: self.extractor.clone(),
            config_hash: self.config_hash.clone(),
            epoch: self.epoch,
            n_params: self.params.len(),
            layout: ex.layout().entries().iter().map(|e| (e.name.clone(), e.shape.clone())).collect(),
            adam_step: self.optimizer.step,
            adam: self.optimizer.config,
            centroids: self
                .centroids
                .iter()
                .map(|c| (c.name.clone(), c.centroids.view(), c.centroids.k(), c.centroids.dim()))
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let io = |e| Error::io("<checkpoint>", e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_u8(VERSION).map_err(io)?;
        w.write_u32::<LE>(json.len() as u32).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for block in [&self.params, &self.optimizer.m, &self.optimizer.v] {
            for &v in block.iter() {
                w.write_f64::<LE>(v).map_err(io)?;
            }
        }
        for c in &self.centroids {
            for &v in c.centroids.matrix() {
                w.write_f64::<LE>(v).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R, expected_hash: Option<&str>) -> Result<Self> {
        let bad = |e: std::io::Error| Error::Checkpoint(format!("truncated or unreadable: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.read_u8().map_err(bad)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {VERSION})"
            )));
        }
        let len = r.read_u32::<LE>().map_err(bad)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(bad)?;
        let h: Header = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if let Some(want) = expected_hash {
            if want != h.config_hash {
                return Err(Error::Checkpoint(format!(
                    "config hash {} does not match the current configuration ({want})",
                    h.config_hash
                )));
            }
        }
        let mut block = |n: usize| -> Result<Vec<f64>> {
            let mut v = vec![0.0; n];
            r.read_f64_into::<LE>(&mut v).map_err(bad)?;
            Ok(v)
        };
        let params = block(h.n_params)?;
        let m = block(h.n_params)?;
        let v = block(h.n_params)?;
        let mut centroids = Vec::new();
        for (name, view, k, d) in &h.centroids {
            let data = block(k * d)?;
            let matrix = Array2::from_shape_vec((*k, *d), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            centroids.push(NamedCentroids {
                name: name.clone(),
                centroids: Centroids::new(matrix, *view)?,
            });
        }
        let ck = Self {
            train: h.train,
            extractor: h.extractor,
            config_hash: h.config_hash,
            epoch: h.epoch,
            params,
            optimizer: Adam {
                config: h.adam,
                step: h.adam_step,
                m,
                v,
            },
            centroids,
        };
        let ex = ck.extractor()?;
        let layout: Vec<(String, Vec<usize>)> = ex.layout().entries().iter().map(|e| (e.name.clone(), e.shape.clone())).collect();
        if layout != h.layout {
            return Err(Error::Checkpoint("parameter layout differs from the configured extractor".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(f), expected_hash)
    }
}

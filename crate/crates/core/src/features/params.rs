use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Names and shapes of every parameter tensor, packed into one flat vector.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    /// Appends a tensor and returns its offset.
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let offset = self.total;
        let entry = ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
        };
        self.total += entry.len();
        self.entries.push(entry);
        offset
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

const WEIGHTS_MAGIC: &[u8; 4] = b"PCWT";
const WEIGHTS_VERSION: u8 = 1;

/// Writes named tensors: magic `PCWT`, version byte, u32 count, then per
/// tensor `u32 name_len, name, u32 ndim, u64 dims.., f64 data..` (all LE).
pub fn write_named<W: Write>(mut w: W, layout: &ParamLayout, values: &[f64]) -> std::io::Result<()> {
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_u8(WEIGHTS_VERSION)?;
    w.write_u32::<LittleEndian>(layout.entries.len() as u32)?;
    for e in &layout.entries {
        w.write_u32::<LittleEndian>(e.name.len() as u32)?;
        w.write_all(e.name.as_bytes())?;
        w.write_u32::<LittleEndian>(e.shape.len() as u32)?;
        for &d in &e.shape {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in &values[e.range()] {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub type NamedTensors = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

pub fn read_named<R: Read>(mut r: R) -> Result<NamedTensors> {
    let fmt = |e: std::io::Error| Error::Format(format!("weights: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(fmt)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Format("weights: bad magic".into()));
    }
    let version = r.read_u8().map_err(fmt)?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!("weights: unsupported version {version}")));
    }
    let count = r.read_u32::<LittleEndian>().map_err(fmt)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
        if len > 4096 {
            return Err(Error::Format("weights: tensor name too long".into()));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(fmt)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("weights: name not utf-8".into()))?;
        let ndim = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
        if ndim > 8 {
            return Err(Error::Format(format!("weights: `{name}` has {ndim} dims")));
        }
        let shape = (0..ndim)
            .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(fmt)?;
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(fmt)?;
        out.insert(name, (shape, data));
    }
    Ok(out)
}

pub fn save_weights(path: &Path, layout: &ParamLayout, values: &[f64]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_named(&mut w, layout, values).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<NamedTensors> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_named(std::io::BufReader::new(file))
}

/// Copies every tensor whose name appears in the layout. Returns how many
/// tensors were loaded; a shape disagreement is an error.
pub fn assign_named(layout: &ParamLayout, values: &mut [f64], named: &NamedTensors) -> Result<usize> {
    let mut loaded = 0;
    for e in layout.entries() {
        if let Some((shape, data)) = named.get(&e.name) {
            if shape != &e.shape {
                return Err(Error::Shape(format!(
                    "weights for `{}` have shape {shape:?}, expected {:?}",
                    e.name, e.shape
                )));
            }
            values[e.range()].copy_from_slice(data);
            loaded += 1;
        }
    }
    Ok(loaded)
}

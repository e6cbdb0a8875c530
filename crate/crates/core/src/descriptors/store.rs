//! ZOFT feature store: row-major f32 feature vectors with a shared block
//! layout (one block per zoom-out level).

use crate::binio;
use crate::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const ZOFT_MAGIC: &[u8; 4] = b"ZOFT";
pub const ZOFT_VERSION: u32 = 1;

/// Start index of each level block within a feature row. The last block ends
/// at `total_dim`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BlockLayout {
    pub offsets: Vec<u32>,
    pub total_dim: u32,
}

impl BlockLayout {
    pub fn from_block_dims(dims: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(dims.len());
        let mut acc = 0u32;
        for &d in dims {
            offsets.push(acc);
            acc += d as u32;
        }
        BlockLayout {
            offsets,
            total_dim: acc,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.offsets.len()
    }

    /// (start, end) of block `i`.
    pub fn block_range(&self, i: usize) -> (usize, usize) {
        let start = self.offsets[i] as usize;
        let end = if i + 1 < self.offsets.len() {
            self.offsets[i + 1] as usize
        } else {
            self.total_dim as usize
        };
        (start, end)
    }

    pub fn validate(&self) -> Result<()> {
        if self.offsets.is_empty() {
            return Err(Error::Format("layout has no blocks".into()));
        }
        if self.offsets[0] != 0 {
            return Err(Error::Format("first block must start at 0".into()));
        }
        for w in self.offsets.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Format("block offsets must be strictly increasing".into()));
            }
        }
        if *self.offsets.last().unwrap() >= self.total_dim && self.total_dim > 0 {
            return Err(Error::Format("last block is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub layout: BlockLayout,
    pub n_rows: usize,
    pub data: Vec<f32>,
}

impl FeatureStore {
    pub fn new(layout: BlockLayout) -> Result<Self> {
        layout.validate()?;
        Ok(FeatureStore {
            layout,
            n_rows: 0,
            data: Vec::new(),
        })
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.layout.total_dim as usize {
            return Err(Error::Dimension(format!(
                "feature row has {} dims, layout demands {}",
                row.len(),
                self.layout.total_dim
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        self.data.extend_from_slice(row);
        self.n_rows += 1;
        Ok(())
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.layout.total_dim as usize;
        &self.data[i * d..(i + 1) * d]
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        binio::write_magic(w, ZOFT_MAGIC)?;
        binio::write_u32(w, ZOFT_VERSION)?;
        binio::write_u32(w, self.n_rows as u32)?;
        binio::write_u32(w, self.layout.total_dim)?;
        binio::write_u32(w, self.layout.n_blocks() as u32)?;
        for &off in &self.layout.offsets {
            binio::write_u32(w, off)?;
        }
        binio::write_f32_slice(w, &self.data)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, ZOFT_MAGIC)?;
        let version = binio::read_u32(r)?;
        if version != ZOFT_VERSION {
            return Err(Error::Format(format!("unsupported ZOFT version {version}")));
        }
        let n_rows = binio::read_u32(r)? as usize;
        let total_dim = binio::read_u32(r)?;
        let n_blocks = binio::read_u32(r)? as usize;
        let offsets = binio::read_u32_vec(r, n_blocks)?;
        let layout = BlockLayout { offsets, total_dim };
        layout.validate()?;
        let data = binio::read_f32_vec(r, n_rows * total_dim as usize)?;
        Ok(FeatureStore {
            layout,
            n_rows,
            data,
        })
    }
}

pub fn save_feature_store(store: &FeatureStore, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    store.write_to(&mut w).map_err(|e| Error::io(path, e))
}

pub fn load_feature_store(path: &Path) -> Result<FeatureStore> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    FeatureStore::read_from(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_ranges() {
        let l = BlockLayout::from_block_dims(&[3, 2, 4]);
        assert_eq!(l.offsets, vec![0, 3, 5]);
        assert_eq!(l.total_dim, 9);
        assert_eq!(l.block_range(0), (0, 3));
        assert_eq!(l.block_range(2), (5, 9));
        l.validate().unwrap();
    }

    #[test]
    fn push_enforces_dimension_and_finiteness() {
        let mut s = FeatureStore::new(BlockLayout::from_block_dims(&[2])).unwrap();
        assert!(s.push_row(&[1.0, 2.0]).is_ok());
        assert!(s.push_row(&[1.0]).is_err());
        assert!(s.push_row(&[f32::NAN, 0.0]).is_err());
    }

    #[test]
    fn round_trip() {
        let mut s = FeatureStore::new(BlockLayout::from_block_dims(&[2, 3])).unwrap();
        s.push_row(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        s.push_row(&[-1.0, 0.5, 0.0, 9.0, 2.5]).unwrap();
        let dir = std::env::temp_dir().join("zoomout_store_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("x.zoft");
        save_feature_store(&s, &path).unwrap();
        let back = load_feature_store(&path).unwrap();
        assert_eq!(s, back);
    }
}

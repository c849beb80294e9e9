use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RFE1";

/// `R × D` region feature matrix for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatures {
    pub image_id: u64,
    pub features: Tensor,
}

impl RegionFeatures {
    pub fn new(image_id: u64, features: Tensor) -> Result<Self> {
        if features.rows == 0 || features.cols == 0 {
            return Err(Error::shape("region features", "R ≥ 1 and D ≥ 1", format!("{:?}", features.shape())));
        }
        if !features.is_finite() {
            return Err(Error::integrity(format!("image {image_id} has non-finite features"), vec![image_id]));
        }
        Ok(RegionFeatures { image_id, features })
    }

    pub fn regions(&self) -> usize {
        self.features.rows
    }

    pub fn dim(&self) -> usize {
        self.features.cols
    }

    /// Mean over regions, the unattended image summary.
    pub fn mean_region(&self) -> Vec<f64> {
        let r = self.regions() as f64;
        (0..self.dim())
            .map(|c| (0..self.regions()).map(|i| self.features.get(i, c)).sum::<f64>() / r)
            .collect()
    }

    /// Attention-weighted sum of region rows.
    pub fn attend(&self, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (i, w) in weights.iter().enumerate() {
            for (o, f) in out.iter_mut().zip(self.features.row(i)) {
                *o += w * f;
            }
        }
        out
    }
}

/// Immutable per-split store keyed by image id. All images share `R` and `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    regions: usize,
    dim: usize,
    images: BTreeMap<u64, RegionFeatures>,
}

impl FeatureStore {
    pub fn new(regions: usize, dim: usize) -> Self {
        FeatureStore { regions, dim, images: BTreeMap::new() }
    }

    pub fn insert(&mut self, rf: RegionFeatures) -> Result<()> {
        if rf.features.shape() != (self.regions, self.dim) {
            return Err(Error::shape(
                "region features",
                format!("{}x{}", self.regions, self.dim),
                format!("{}x{}", rf.regions(), rf.dim()),
            ));
        }
        if self.images.contains_key(&rf.image_id) {
            return Err(Error::integrity("duplicate image id in feature store", vec![rf.image_id]));
        }
        self.images.insert(rf.image_id, rf);
        Ok(())
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, image_id: u64) -> Result<&RegionFeatures> {
        self.images
            .get(&image_id)
            .ok_or_else(|| Error::integrity("image id missing from feature store", vec![image_id]))
    }

    pub fn iter(&self) -> impl Iterator<Item = &RegionFeatures> {
        self.images.values()
    }

    /// Little-endian `RFE1` container; values stored as `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.images.len() * (8 + 4 * self.regions * self.dim));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.images.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.regions as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for rf in self.images.values() {
            out.extend_from_slice(&rf.image_id.to_le_bytes());
            for v in &rf.features.data {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |m: &str| Error::Parse { path: path.to_path_buf(), index: None, message: m.to_string() };
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(err("missing RFE1 header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (count, regions, dim) = (u32_at(4), u32_at(8), u32_at(12));
        if regions == 0 || dim == 0 {
            return Err(err("header declares zero regions or dimensions"));
        }
        let record = 8 + 4 * regions * dim;
        if bytes.len() != 16 + count * record {
            return Err(err("file size does not match header"));
        }
        let mut store = FeatureStore::new(regions, dim);
        for i in 0..count {
            let base = 16 + i * record;
            let image_id = u64::from_le_bytes(bytes[base..base + 8].try_into().unwrap());
            let data = bytes[base + 8..base + record]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let rf = RegionFeatures::new(image_id, Tensor::from_vec(regions, dim, data)).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                index: Some(i),
                message: e.to_string(),
            })?;
            store.insert(rf).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                index: Some(i),
                message: e.to_string(),
            })?;
        }
        Ok(store)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip() {
        let mut store = FeatureStore::new(2, 3);
        store
            .insert(RegionFeatures::new(7, Tensor::from_vec(2, 3, vec![0.0, 0.5, 1.0, -2.0, 0.25, 3.0])).unwrap())
            .unwrap();
        store.insert(RegionFeatures::new(9, Tensor::zeros(2, 3)).unwrap()).unwrap();
        let bytes = store.to_bytes();
        assert_eq!(&bytes[..4], b"RFE1");
        let back = FeatureStore::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn truncated_file_rejected() {
        let mut store = FeatureStore::new(1, 1);
        store.insert(RegionFeatures::new(1, Tensor::scalar(1.0)).unwrap()).unwrap();
        let bytes = store.to_bytes();
        assert!(FeatureStore::from_bytes(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
    }

    #[test]
    fn attend_with_uniform_weights_is_mean() {
        let rf = RegionFeatures::new(1, Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(rf.attend(&[0.5, 0.5]), rf.mean_region());
    }
}

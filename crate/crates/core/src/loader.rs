//! In-memory cache of decoded samples and their clothes masks.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use crate::data::{load_sample, DatasetManifest, Image};
use crate::error::Result;
use crate::masking::{build_clothes_mask, cached_clothes_mask, make_clothes_image, make_shielding_image, BinaryMask};

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSample {
    pub image: Image,
    pub mask: BinaryMask,
}

impl LoadedSample {
    pub fn shielding(&self) -> Image {
        make_shielding_image(&self.image, &self.mask).expect("sizes match by construction")
    }

    pub fn clothes(&self) -> Image {
        make_clothes_image(&self.image, &self.mask).expect("sizes match by construction")
    }
}

pub struct SampleLoader {
    pub size: (usize, usize),
    pub clothes_labels: BTreeSet<u8>,
    /// Extension of the on-disk mask cache, or `None` to skip it.
    pub mask_ext: Option<String>,
    cache: Mutex<HashMap<usize, Arc<LoadedSample>>>,
}

impl SampleLoader {
    pub fn new(size: (usize, usize), clothes_labels: BTreeSet<u8>, mask_ext: Option<String>) -> Self {
        Self {
            size,
            clothes_labels,
            mask_ext,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn load(&self, manifest: &DatasetManifest, index: usize) -> Result<LoadedSample> {
        let sample = &manifest.records[index];
        let (image, parsing) = load_sample(manifest, sample, self.size)?;
        let mask = match &self.mask_ext {
            Some(ext) => cached_clothes_mask(&manifest.resolve(&sample.parsing_path), &parsing, &self.clothes_labels, ext)?,
            None => build_clothes_mask(&parsing, &self.clothes_labels),
        };
        Ok(LoadedSample { image, mask })
    }

    /// Records by manifest index, loading missing ones in parallel. Output
    /// order follows `indices`.
    pub fn get_many(&self, manifest: &DatasetManifest, indices: &[usize]) -> Result<Vec<Arc<LoadedSample>>> {
        let missing: Vec<usize> = {
            let cache = self.cache.lock().expect("loader cache poisoned");
            let set: BTreeSet<usize> = indices.iter().copied().filter(|i| !cache.contains_key(i)).collect();
            set.into_iter().collect()
        };
        let loaded: Vec<(usize, LoadedSample)> = missing
            .par_iter()
            .map(|&i| self.load(manifest, i).map(|s| (i, s)))
            .collect::<Result<_>>()?;
        let mut cache = self.cache.lock().expect("loader cache poisoned");
        for (i, s) in loaded {
            cache.insert(i, Arc::new(s));
        }
        Ok(indices.iter().map(|i| Arc::clone(&cache[i])).collect())
    }

    pub fn get(&self, manifest: &DatasetManifest, index: usize) -> Result<Arc<LoadedSample>> {
        Ok(self.get_many(manifest, &[index])?.remove(0))
    }
}

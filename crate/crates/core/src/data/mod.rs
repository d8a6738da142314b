//! Dataset indexing, sample decoding, padding and the synthetic scene generator.

mod index;
mod pad;
mod sample;
mod synth;
mod tiling;

use std::sync::Arc;

pub use index::{
    build_dataset_index, DatasetIndex, Record, SourceImage, Split, TileSpec, IMAGE_EXTENSIONS,
};
pub use pad::{next_multiple, pad_to_multiple, PadGeometry};
pub use sample::{
    binarize, load_sample, read_gray, read_rgb, rgb_to_chw, stack_batch, Sample,
    DEFAULT_MASK_THRESHOLD,
};
pub use synth::{synth_road_sample, SynthParams};
pub use tiling::{tile_count, tile_positions};

use crate::error::Result;

/// Random-access collection of samples.
pub trait SampleSource: Send + Sync {
    fn len(&self) -> usize;
    fn get(&self, i: usize) -> Result<Sample>;
    /// Name used in per-image reports and output files.
    fn name(&self, i: usize) -> String;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Synthetic scenes with seeds derived from a base seed and the split.
pub struct SyntheticSource {
    pub seeds: Vec<u64>,
    pub size: usize,
    pub params: SynthParams,
}

impl SyntheticSource {
    pub fn new(base_seed: u64, split: Split, count: usize, size: usize, params: SynthParams) -> Self {
        let offset = match split {
            Split::Train => 0u64,
            Split::Val => 1 << 40,
            Split::Test => 2 << 40,
        };
        let base = base_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(offset);
        Self {
            seeds: (0..count as u64).map(|i| base.wrapping_add(i)).collect(),
            size,
            params,
        }
    }
}

impl SampleSource for SyntheticSource {
    fn len(&self) -> usize {
        self.seeds.len()
    }

    fn get(&self, i: usize) -> Result<Sample> {
        synth_road_sample(self.seeds[i], self.size, &self.params)
    }

    fn name(&self, i: usize) -> String {
        format!("synthetic_{i:05}")
    }
}

/// Records of one split of an on-disk dataset.
pub struct IndexedSource {
    pub index: Arc<DatasetIndex>,
    pub records: Vec<Record>,
    pub mask_threshold: u8,
}

impl IndexedSource {
    pub fn new(index: Arc<DatasetIndex>, split: Split, mask_threshold: u8) -> Self {
        let records = index.records(split);
        Self {
            index,
            records,
            mask_threshold,
        }
    }
}

impl SampleSource for IndexedSource {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn get(&self, i: usize) -> Result<Sample> {
        load_sample(&self.index, &self.records[i], self.mask_threshold)
    }

    fn name(&self, i: usize) -> String {
        self.records[i].name()
    }
}

/// Samples kept in memory.
pub struct InMemorySource {
    pub samples: Vec<(String, Sample)>,
}

impl SampleSource for InMemorySource {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn get(&self, i: usize) -> Result<Sample> {
        Ok(self.samples[i].1.clone())
    }

    fn name(&self, i: usize) -> String {
        self.samples[i].0.clone()
    }
}

//! Dataset directory scanning and the tile index.
//!
//! Layout: `root/{train,val,test}/{images,masks}/<id>.<ext>`, where a mask
//! shares its image's id. Train and validation images are cut into square
//! tiles; test images stay whole.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tiling::tile_positions;
use crate::error::{Error, Result};

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "tif", "tiff"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split `{other}` (expected train | val | test)"
            ))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// A square crop of one source image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSpec {
    pub source_image_id: String,
    pub x_offset: usize,
    pub y_offset: usize,
    pub tile_size: usize,
    pub split: Split,
}

/// One training or evaluation sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Record {
    Tile(TileSpec),
    Whole { source_image_id: String, split: Split },
}

impl Record {
    pub fn image_id(&self) -> &str {
        match self {
            Record::Tile(t) => &t.source_image_id,
            Record::Whole {
                source_image_id, ..
            } => source_image_id,
        }
    }

    pub fn split(&self) -> Split {
        match self {
            Record::Tile(t) => t.split,
            Record::Whole { split, .. } => *split,
        }
    }

    /// Stable per-record name used for output files and CSV rows.
    pub fn name(&self) -> String {
        match self {
            Record::Tile(t) => format!("{}_x{}_y{}", t.source_image_id, t.x_offset, t.y_offset),
            Record::Whole {
                source_image_id, ..
            } => source_image_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceImage {
    pub id: String,
    pub split: Split,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub sources: BTreeMap<(Split, String), SourceImage>,
    pub records: Vec<Record>,
}

impl DatasetIndex {
    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split() == split).count()
    }

    pub fn records(&self, split: Split) -> Vec<Record> {
        self.records
            .iter()
            .filter(|r| r.split() == split)
            .cloned()
            .collect()
    }

    pub fn source(&self, record: &Record) -> Result<&SourceImage> {
        self.sources
            .get(&(record.split(), record.image_id().to_string()))
            .ok_or_else(|| {
                Error::Dataset(format!(
                    "no source image `{}` in split {}",
                    record.image_id(),
                    record.split()
                ))
            })
    }

    /// Write the records as JSON lines.
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_cache(path: &Path) -> Result<Vec<Record>> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// id → path for every raster in `dir`; a missing directory is empty.
fn list_rasters(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || !has_image_extension(&path) {
            continue;
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Dataset(format!("non-UTF-8 file name {}", path.display())))?
            .to_string();
        if let Some(prev) = out.insert(id.clone(), path.clone()) {
            return Err(Error::Dataset(format!(
                "two rasters share id `{id}`: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

pub fn build_dataset_index(root: &Path, tile: usize, stride: usize) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let mut index = DatasetIndex {
        root: root.to_path_buf(),
        ..Default::default()
    };
    for split in Split::ALL {
        let base = root.join(split.dir_name());
        let images = list_rasters(&base.join("images"))?;
        let masks = list_rasters(&base.join("masks"))?;
        let orphans: Vec<String> = images
            .keys()
            .filter(|id| !masks.contains_key(*id))
            .map(|id| format!("{split}/images/{id} (no mask)"))
            .chain(
                masks
                    .keys()
                    .filter(|id| !images.contains_key(*id))
                    .map(|id| format!("{split}/masks/{id} (no image)")),
            )
            .collect();
        if !orphans.is_empty() {
            return Err(Error::Dataset(format!(
                "unpaired rasters: {}",
                orphans.join(", ")
            )));
        }
        for (id, image_path) in images {
            let (width, height) = image::image_dimensions(&image_path)
                .map_err(|e| Error::image(&image_path, e))?;
            let (width, height) = (width as usize, height as usize);
            let mask_path = masks[&id].clone();
            if split == Split::Test {
                index.records.push(Record::Whole {
                    source_image_id: id.clone(),
                    split,
                });
            } else {
                let xs = tile_positions(width, tile, stride)?;
                let ys = tile_positions(height, tile, stride)?;
                for &y in &ys {
                    for &x in &xs {
                        index.records.push(Record::Tile(TileSpec {
                            source_image_id: id.clone(),
                            x_offset: x,
                            y_offset: y,
                            tile_size: tile,
                            split,
                        }));
                    }
                }
            }
            index.sources.insert(
                (split, id.clone()),
                SourceImage {
                    id,
                    split,
                    image_path,
                    mask_path,
                    width,
                    height,
                },
            );
        }
    }
    Ok(index)
}

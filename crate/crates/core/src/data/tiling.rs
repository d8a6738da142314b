use crate::error::{Error, Result};

/// Offsets `0, stride, 2·stride, …` while the tile still fits. No extra
/// border-aligned tile is appended, so a right/bottom margin smaller than
/// the stride may stay uncovered.
pub fn tile_positions(extent: usize, tile: usize, stride: usize) -> Result<Vec<usize>> {
    if tile == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "tile ({tile}) and stride ({stride}) must be ≥ 1"
        )));
    }
    if tile > extent {
        return Err(Error::InvalidArgument(format!(
            "tile {tile} does not fit in extent {extent}"
        )));
    }
    Ok((0..=extent - tile).step_by(stride).collect())
}

/// `⌊(extent − tile) / stride⌋ + 1`.
pub fn tile_count(extent: usize, tile: usize, stride: usize) -> Result<usize> {
    Ok(tile_positions(extent, tile, stride)?.len())
}

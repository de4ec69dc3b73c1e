use std::collections::HashMap;

use crate::data::SpotRecord;
use crate::error::{Error, Result};

/// Lookup from grid cell to spot index.
#[derive(Debug, Clone)]
pub struct GridIndex {
    cells: HashMap<(usize, usize), usize>,
}

impl GridIndex {
    pub fn new(spots: &[SpotRecord]) -> Result<Self> {
        let mut cells = HashMap::with_capacity(spots.len());
        for (i, s) in spots.iter().enumerate() {
            if let Some(j) = cells.insert(s.grid(), i) {
                return Err(Error::arg(format!(
                    "spots `{}` and `{}` share grid cell {:?}",
                    spots[j].spot_id,
                    s.spot_id,
                    s.grid()
                )));
            }
        }
        Ok(Self { cells })
    }

    pub fn at(&self, row: isize, col: isize) -> Option<usize> {
        if row < 0 || col < 0 {
            return None;
        }
        self.cells.get(&(row as usize, col as usize)).copied()
    }

    /// `d × d` neighbourhood of spot `center` (at grid cell `pos`).
    pub fn window(&self, center: usize, pos: (usize, usize), d: usize) -> Result<ContextWindow> {
        if d % 2 == 0 {
            return Err(Error::arg(format!("window size must be odd, got {d}")));
        }
        let half = (d / 2) as isize;
        let mut members = Vec::with_capacity(d * d);
        for r in 0..d as isize {
            for c in 0..d as isize {
                members.push(self.at(pos.0 as isize + r - half, pos.1 as isize + c - half));
            }
        }
        debug_assert_eq!(members[d * d / 2], Some(center));
        Ok(ContextWindow { center, d, members })
    }
}

/// Spots covering the `d × d` cells around a centre spot, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextWindow {
    pub center: usize,
    pub d: usize,
    pub members: Vec<Option<usize>>,
}

impl ContextWindow {
    pub fn member(&self, r: usize, c: usize) -> Option<usize> {
        self.members[r * self.d + c]
    }

    pub fn mask(&self) -> Vec<bool> {
        self.members.iter().map(Option::is_some).collect()
    }

    pub fn present(&self) -> usize {
        self.members.iter().filter(|m| m.is_some()).count()
    }
}

/// Window of side `d` (odd) around `spots[center_index]`.
pub fn context_window(spots: &[SpotRecord], center_index: usize, d: usize) -> Result<ContextWindow> {
    let spot = spots
        .get(center_index)
        .ok_or_else(|| Error::arg(format!("centre index {center_index} out of range")))?;
    GridIndex::new(spots)?.window(center_index, spot.grid(), d)
}

//! Count-min sketch for streaming frequency estimates.
//!
//! Backs the positive and negative sampling-probability corrections in
//! the losses. Estimates never undercount; collisions only inflate.

use thiserror::Error;

use crate::seeds;

#[derive(Debug, Error)]
pub enum SketchError {
    #[error("sketch mismatch: width/depth/seed must agree to merge")]
    Mismatch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMinSketch {
    width: usize,
    depth: usize,
    seed: u64,
    row_seeds: Vec<u64>,
    /// depth x width, row-major.
    cells: Vec<u64>,
    total: u64,
}

impl CountMinSketch {
    pub fn new(width: usize, depth: usize, seed: u64) -> Self {
        assert!(width >= 1 && depth >= 1, "width and depth must be >= 1");
        let row_seeds = (0..depth as u64)
            .map(|r| seeds::derive(seed, seeds::tags::SKETCH, r, 0))
            .collect();
        CountMinSketch {
            width,
            depth,
            seed,
            row_seeds,
            cells: vec![0; width * depth],
            total: 0,
        }
    }

    /// Rebuild from serialized parts; `cells` is row-major depth x width.
    pub fn from_parts(width: usize, depth: usize, seed: u64, cells: Vec<u64>, total: u64) -> Self {
        assert_eq!(cells.len(), width * depth, "cell grid shape mismatch");
        let mut s = CountMinSketch::new(width, depth, seed);
        s.cells = cells;
        s.total = total;
        s
    }

    #[inline]
    fn cell_index(&self, row: usize, item: u64) -> usize {
        let h = seeds::mix64(self.row_seeds[row] ^ item);
        row * self.width + (h % self.width as u64) as usize
    }

    pub fn increment(&mut self, item: u64) {
        for r in 0..self.depth {
            let i = self.cell_index(r, item);
            self.cells[i] += 1;
        }
        self.total += 1;
    }

    /// Minimum cell over rows; an upper bound on the true count.
    pub fn estimate(&self, item: u64) -> u64 {
        (0..self.depth)
            .map(|r| self.cells[self.cell_index(r, item)])
            .min()
            .expect("depth >= 1")
    }

    /// max(estimate / max(total, 1), floor). The floor keeps log(q)
    /// finite for items the sketch has never seen.
    pub fn probability(&self, item: u64, floor: f64) -> f64 {
        assert!(floor > 0.0, "probability floor must be positive");
        let p = self.estimate(item) as f64 / self.total.max(1) as f64;
        p.max(floor)
    }

    /// Cell-wise sum; equivalent to having observed the concatenated
    /// stream. Requires identical shape and hash seeds.
    pub fn merge(&mut self, other: &CountMinSketch) -> Result<(), SketchError> {
        if self.width != other.width || self.depth != other.depth || self.seed != other.seed {
            return Err(SketchError::Mismatch);
        }
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            *a += b;
        }
        self.total += other.total;
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn cells(&self) -> &[u64] {
        &self.cells
    }
}

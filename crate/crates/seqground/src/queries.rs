//! Composite query bookkeeping.
//!
//! Each of `M` diagrams is paired with each of `K` learnable queries, giving
//! `M·K` composite rows in diagram-major order: row `r = i·K + j` carries the
//! content of diagram `i` and learnable query `j`. The self-attention masks
//! over these rows come in four patterns: full (`A`), same-diagram (`B`),
//! same-query-index (`C`), and their union (`D`).

use ndarray::Array2;

use crate::types::MaskType;

/// Index arithmetic for the `M·K` composite rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompositeIndex {
    pub num_diagrams: usize,
    pub num_queries: usize,
}

impl CompositeIndex {
    pub fn new(num_diagrams: usize, num_queries: usize) -> Self {
        Self {
            num_diagrams,
            num_queries,
        }
    }

    /// Total number of composite rows.
    pub fn len(&self) -> usize {
        self.num_diagrams * self.num_queries
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row index for (diagram `i`, query `j`).
    pub fn row(&self, diagram: usize, query: usize) -> usize {
        debug_assert!(diagram < self.num_diagrams && query < self.num_queries);
        diagram * self.num_queries + query
    }

    /// Inverse of [`row`](Self::row).
    pub fn unpack(&self, row: usize) -> (usize, usize) {
        debug_assert!(row < self.len());
        (row / self.num_queries, row % self.num_queries)
    }

    /// For each composite row, the diagram whose content feature it carries.
    pub fn diagram_of_rows(&self) -> Vec<usize> {
        (0..self.len()).map(|r| r / self.num_queries).collect()
    }

    /// For each composite row, the learnable query it carries.
    pub fn query_of_rows(&self) -> Vec<usize> {
        (0..self.len()).map(|r| r % self.num_queries).collect()
    }
}

/// Build the `MK x MK` boolean self-attention mask (`true` = attend).
pub fn build_mask(num_diagrams: usize, num_queries: usize, mask: MaskType) -> Array2<bool> {
    let index = CompositeIndex::new(num_diagrams, num_queries);
    let n = index.len();
    Array2::from_shape_fn((n, n), |(r, c)| {
        let (di, qi) = index.unpack(r);
        let (dj, qj) = index.unpack(c);
        match mask {
            MaskType::A => true,
            MaskType::B => di == dj,
            MaskType::C => qi == qj,
            MaskType::D => di == dj || qi == qj,
        }
    })
}

//! Layout and attention mask for hierarchical group attention over a
//! concatenation of memories. Each memory is a fully connected group
//! headed by a super token; super tokens are connected across groups.

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HgaLayout {
    memory_lengths: Vec<usize>,
    super_positions: Vec<usize>,
    total_len: usize,
}

impl HgaLayout {
    /// Memory `m` occupies `[offset, offset + n_m + 1)` with its super
    /// token at `offset`.
    pub fn new(memory_lengths: &[usize]) -> Result<HgaLayout> {
        if memory_lengths.is_empty() {
            return invalid("layout needs at least one memory");
        }
        if let Some(i) = memory_lengths.iter().position(|&n| n == 0) {
            return invalid(format!("memory {i} is empty"));
        }
        let mut super_positions = Vec::with_capacity(memory_lengths.len());
        let mut offset = 0;
        for &n in memory_lengths {
            super_positions.push(offset);
            offset += n + 1;
        }
        Ok(HgaLayout {
            memory_lengths: memory_lengths.to_vec(),
            super_positions,
            total_len: offset,
        })
    }

    pub fn n_memories(&self) -> usize {
        self.memory_lengths.len()
    }

    pub fn memory_lengths(&self) -> &[usize] {
        &self.memory_lengths
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn super_indices(&self) -> &[usize] {
        &self.super_positions
    }

    /// Half-open span of memory `m`, super token included.
    pub fn span(&self, m: usize) -> (usize, usize) {
        let start = self.super_positions[m];
        (start, start + self.memory_lengths[m] + 1)
    }

    /// Segment index of every position.
    pub fn segment_of(&self) -> Vec<usize> {
        let mut seg = Vec::with_capacity(self.total_len);
        for (m, &n) in self.memory_lengths.iter().enumerate() {
            seg.extend(std::iter::repeat(m).take(n + 1));
        }
        seg
    }

    /// Position within its own segment (0 for the super token).
    pub fn local_positions(&self) -> Vec<usize> {
        self.memory_lengths
            .iter()
            .flat_map(|&n| 0..=n)
            .collect()
    }

    pub fn is_super(&self, pos: usize) -> bool {
        self.super_positions.binary_search(&pos).is_ok()
    }
}

/// Row-major `total_len × total_len` permission matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HgaMask {
    n: usize,
    allow: Vec<bool>,
}

impl HgaMask {
    pub fn build(layout: &HgaLayout) -> HgaMask {
        let n = layout.total_len();
        let seg = layout.segment_of();
        let sup: Vec<bool> = (0..n).map(|p| layout.is_super(p)).collect();
        let mut allow = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                allow[i * n + j] = seg[i] == seg[j] || (sup[i] && sup[j]);
            }
        }
        HgaMask { n, allow }
    }

    /// Unrestricted mask over the whole concatenation.
    pub fn full(n: usize) -> HgaMask {
        HgaMask {
            n,
            allow: vec![true; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }

    pub fn count_allowed(&self) -> usize {
        self.allow.iter().filter(|&&a| a).count()
    }

    /// Plain PBM (P1) rendering; `1` marks a permitted pair.
    pub fn to_pbm(&self) -> String {
        let mut out = format!("P1\n{} {}\n", self.n, self.n);
        for i in 0..self.n {
            let row: Vec<&str> = (0..self.n)
                .map(|j| if self.allowed(i, j) { "1" } else { "0" })
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

pub fn build_hga_mask(layout: &HgaLayout) -> HgaMask {
    HgaMask::build(layout)
}

pub fn super_indices(layout: &HgaLayout) -> Vec<usize> {
    layout.super_indices().to_vec()
}

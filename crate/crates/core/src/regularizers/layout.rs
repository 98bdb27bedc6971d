use std::ops::Range;

use crate::{Error, Result};

/// How a block of the flat parameter vector is split into groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Every entry is its own group.
    Entrywise,
    /// Each row of the row-major `rows x cols` block is one group.
    Rows,
    /// The whole block is a single group.
    Whole,
    /// Dense and never regularized (biases).
    Bias,
}

/// A contiguous `rows x cols` segment of the parameter vector, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub kind: BlockKind,
}

impl Block {
    pub fn new(name: impl Into<String>, offset: usize, rows: usize, cols: usize, kind: BlockKind) -> Self {
        Block {
            name: name.into(),
            offset,
            rows,
            cols,
            kind,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn is_regularized(&self) -> bool {
        self.kind != BlockKind::Bias
    }

    /// Number of entries per group, `n_g`.
    pub fn group_len(&self) -> usize {
        match self.kind {
            BlockKind::Entrywise => 1,
            BlockKind::Rows => self.cols,
            BlockKind::Whole | BlockKind::Bias => self.len(),
        }
    }

    pub fn n_groups(&self) -> usize {
        match self.kind {
            BlockKind::Bias => 0,
            BlockKind::Entrywise => self.len(),
            BlockKind::Rows => self.rows,
            BlockKind::Whole => usize::from(!self.is_empty()),
        }
    }

    /// Index range of the `i`-th group of this block.
    pub fn group(&self, i: usize) -> Range<usize> {
        let n = self.group_len();
        let start = self.offset + i * n;
        start..start + n
    }
}

/// One regularized group: a contiguous index range together with the block it
/// belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub block: usize,
    pub range: Range<usize>,
}

impl Group {
    pub fn n_g(&self) -> usize {
        self.range.len()
    }
}

/// Partition of a flat parameter vector into (possibly regularized) blocks.
///
/// Blocks are pairwise disjoint and lie within `total_dim`. Indices not
/// covered by any block are treated as unregularized.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLayout {
    total_dim: usize,
    blocks: Vec<Block>,
}

impl GroupLayout {
    pub fn new(total_dim: usize, mut blocks: Vec<Block>) -> Result<Self> {
        for b in &blocks {
            if b.range().end > total_dim {
                return Err(Error::Layout(format!(
                    "block `{}` covers {:?}, beyond dimension {}",
                    b.name,
                    b.range(),
                    total_dim
                )));
            }
        }
        let mut order: Vec<usize> = (0..blocks.len()).collect();
        order.sort_by_key(|&i| blocks[i].offset);
        for w in order.windows(2) {
            let (a, b) = (&blocks[w[0]], &blocks[w[1]]);
            if !a.is_empty() && !b.is_empty() && a.range().end > b.offset {
                return Err(Error::Layout(format!(
                    "blocks `{}` and `{}` overlap; overlapping groups are unsupported",
                    a.name, b.name
                )));
            }
        }
        blocks.shrink_to_fit();
        Ok(GroupLayout { total_dim, blocks })
    }

    /// A single entrywise block covering the whole vector.
    pub fn entrywise(dim: usize) -> Self {
        GroupLayout {
            total_dim: dim,
            blocks: vec![Block::new("theta", 0, 1, dim, BlockKind::Entrywise)],
        }
    }

    /// A single group covering the whole vector.
    pub fn single_group(dim: usize) -> Self {
        GroupLayout {
            total_dim: dim,
            blocks: vec![Block::new("theta", 0, 1, dim, BlockKind::Whole)],
        }
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn regularized_blocks(&self) -> impl Iterator<Item = &Block> + '_ {
        self.blocks.iter().filter(|b| b.is_regularized())
    }

    /// All regularized groups, block by block.
    pub fn groups(&self) -> impl Iterator<Item = Group> + '_ {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.is_regularized())
            .flat_map(|(bi, b)| {
                (0..b.n_groups()).map(move |g| Group {
                    block: bi,
                    range: b.group(g),
                })
            })
    }

    pub fn n_groups(&self) -> usize {
        self.blocks.iter().map(Block::n_groups).sum()
    }

    /// Number of regularized scalar entries.
    pub fn n_regularized(&self) -> usize {
        self.regularized_blocks().map(Block::len).sum()
    }

    pub(crate) fn check_dim(&self, context: &'static str, actual: usize) -> Result<()> {
        if actual != self.total_dim {
            return Err(Error::dim(context, self.total_dim, actual));
        }
        Ok(())
    }
}

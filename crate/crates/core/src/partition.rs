//! Partitions of the agent set and the block-averaging observation matrix.
//!
//! A [`Partition`] is stored as a restricted-growth string: agent 0 is in
//! block 0 and each agent's block id is at most one more than the largest id
//! seen before it. The representation is unique per set partition, so derived
//! `Eq`/`Ord`/`Hash` compare set partitions. Agents are 0-indexed in memory
//! and 1-indexed in every text or JSON form.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Partition {
    assignment: Vec<usize>,
}

impl Partition {
    /// Canonicalizes an arbitrary labelling (labels need not be contiguous).
    pub fn from_labels<T: PartialEq>(labels: &[T]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Partition("partition of an empty set".into()));
        }
        let mut seen: Vec<&T> = Vec::new();
        let assignment = labels
            .iter()
            .map(|l| match seen.iter().position(|s| *s == l) {
                Some(k) => k,
                None => {
                    seen.push(l);
                    seen.len() - 1
                }
            })
            .collect();
        Ok(Partition { assignment })
    }

    /// Validates a restricted-growth string as-is.
    pub fn from_assignment(assignment: Vec<usize>) -> Result<Self> {
        if assignment.is_empty() {
            return Err(Error::Partition("partition of an empty set".into()));
        }
        let mut next = 0;
        for (i, &a) in assignment.iter().enumerate() {
            if a > next {
                return Err(Error::Partition(format!(
                    "assignment is not in restricted-growth form at agent {}",
                    i + 1
                )));
            }
            if a == next {
                next += 1;
            }
        }
        Ok(Partition { assignment })
    }

    /// Builds a partition of `{0..n}` from 0-indexed blocks.
    pub fn from_blocks(n: usize, blocks: &[Vec<usize>]) -> Result<Self> {
        if n == 0 {
            return Err(Error::Partition("partition of an empty set".into()));
        }
        let mut owner: Vec<Option<usize>> = vec![None; n];
        for (k, block) in blocks.iter().enumerate() {
            if block.is_empty() {
                return Err(Error::Partition(format!("block {} is empty", k + 1)));
            }
            for &a in block {
                if a >= n {
                    return Err(Error::Partition(format!(
                        "agent {} is outside 1..={n}",
                        a + 1
                    )));
                }
                if owner[a].is_some() {
                    return Err(Error::Partition(format!(
                        "agent {} appears in more than one block",
                        a + 1
                    )));
                }
                owner[a] = Some(k);
            }
        }
        if let Some(gap) = owner.iter().position(Option::is_none) {
            return Err(Error::Partition(format!(
                "agent {} is not covered by any block",
                gap + 1
            )));
        }
        let labels: Vec<usize> = owner.into_iter().map(Option::unwrap).collect();
        Self::from_labels(&labels)
    }

    /// Builds a partition from 1-indexed blocks, inferring `n` as the largest agent.
    pub fn from_one_indexed_blocks(blocks: &[Vec<usize>]) -> Result<Self> {
        let n = blocks.iter().flatten().copied().max().unwrap_or(0);
        let mut zero = Vec::with_capacity(blocks.len());
        for block in blocks {
            let mut b = Vec::with_capacity(block.len());
            for &a in block {
                if a == 0 {
                    return Err(Error::Partition("agents are numbered from 1".into()));
                }
                b.push(a - 1);
            }
            zero.push(b);
        }
        Self::from_blocks(n, &zero)
    }

    pub fn singletons(n: usize) -> Self {
        Partition {
            assignment: (0..n).collect(),
        }
    }

    pub fn single_block(n: usize) -> Self {
        Partition {
            assignment: vec![0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn block_of(&self, agent: usize) -> usize {
        self.assignment[agent]
    }

    pub fn num_blocks(&self) -> usize {
        self.assignment.iter().max().map_or(0, |m| m + 1)
    }

    /// Blocks as sorted 0-indexed member lists, ordered by smallest member.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let mut blocks = vec![Vec::new(); self.num_blocks()];
        for (i, &k) in self.assignment.iter().enumerate() {
            blocks[k].push(i);
        }
        blocks
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_blocks()];
        for &k in &self.assignment {
            sizes[k] += 1;
        }
        sizes
    }

    /// `l_i`: size of the block containing each agent.
    pub fn containing_block_sizes(&self) -> Vec<usize> {
        let sizes = self.block_sizes();
        self.assignment.iter().map(|&k| sizes[k]).collect()
    }

    pub fn min_block_size(&self) -> usize {
        self.block_sizes().into_iter().min().unwrap_or(0)
    }

    pub fn to_json_value(&self) -> PartitionJson {
        PartitionJson::from(self)
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, block) in self.blocks().iter().enumerate() {
            if k > 0 {
                f.write_str(",")?;
            }
            f.write_str("{")?;
            for (j, a) in block.iter().enumerate() {
                if j > 0 {
                    f.write_str(",")?;
                }
                write!(f, "{}", a + 1)?;
            }
            f.write_str("}")?;
        }
        Ok(())
    }
}

impl FromStr for Partition {
    type Err = Error;

    /// Parses `{1,5,8},{2,9},{4}` (whitespace tolerated, 1-indexed).
    fn from_str(s: &str) -> Result<Self> {
        let bytes = s.as_bytes();
        let mut pos = 0;
        let skip_ws = |pos: &mut usize| {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
        };
        let err = |pos: usize, msg: &str| Error::Parse {
            column: pos + 1,
            message: msg.to_string(),
        };
        let mut blocks: Vec<Vec<usize>> = Vec::new();
        loop {
            skip_ws(&mut pos);
            if pos >= bytes.len() || bytes[pos] != b'{' {
                return Err(err(pos, "expected '{'"));
            }
            pos += 1;
            let mut block = Vec::new();
            loop {
                skip_ws(&mut pos);
                let start = pos;
                while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                    pos += 1;
                }
                if start == pos {
                    return Err(err(pos, "expected an agent number"));
                }
                let agent: usize = s[start..pos]
                    .parse()
                    .map_err(|_| err(start, "agent number out of range"))?;
                if agent == 0 {
                    return Err(err(start, "agents are numbered from 1"));
                }
                block.push(agent);
                skip_ws(&mut pos);
                match bytes.get(pos) {
                    Some(b',') => pos += 1,
                    Some(b'}') => {
                        pos += 1;
                        break;
                    }
                    _ => return Err(err(pos, "expected ',' or '}'")),
                }
            }
            blocks.push(block);
            skip_ws(&mut pos);
            match bytes.get(pos) {
                None => break,
                Some(b',') => pos += 1,
                Some(_) => return Err(err(pos, "expected ',' between blocks")),
            }
        }
        Partition::from_one_indexed_blocks(&blocks)
    }
}

/// JSON form `{"blocks": [[1,5,8],[2,9]]}` with 1-indexed agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionJson {
    pub blocks: Vec<Vec<usize>>,
}

impl From<&Partition> for PartitionJson {
    fn from(p: &Partition) -> Self {
        PartitionJson {
            blocks: p
                .blocks()
                .into_iter()
                .map(|b| b.into_iter().map(|a| a + 1).collect())
                .collect(),
        }
    }
}

impl TryFrom<PartitionJson> for Partition {
    type Error = Error;

    fn try_from(j: PartitionJson) -> Result<Self> {
        Partition::from_one_indexed_blocks(&j.blocks)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ExactFromPartition,
    Relaxed,
}

/// Symmetric doubly-stochastic PSD matrix used to form action estimates `H x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMatrix {
    matrix: DMatrix<f64>,
    provenance: Provenance,
}

impl ObservationMatrix {
    /// Wraps a relaxed matrix. Only the shape is checked; feasibility is
    /// reported by the residual accessors.
    pub fn relaxed(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::NotSquare {
                rows: matrix.nrows(),
                cols: matrix.ncols(),
            });
        }
        Ok(ObservationMatrix {
            matrix,
            provenance: Provenance::Relaxed,
        })
    }

    pub fn identity(n: usize) -> Self {
        ObservationMatrix {
            matrix: DMatrix::identity(n, n),
            provenance: Provenance::ExactFromPartition,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn symmetry_error(&self) -> f64 {
        (&self.matrix - self.matrix.transpose()).amax()
    }

    /// Largest deviation of any row or column sum from 1.
    pub fn stochasticity_error(&self) -> f64 {
        let n = self.n();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            worst = worst.max((self.matrix.row(i).sum() - 1.0).abs());
            worst = worst.max((self.matrix.column(i).sum() - 1.0).abs());
        }
        worst
    }

    pub fn min_entry(&self) -> f64 {
        self.matrix.min()
    }

    pub fn max_entry(&self) -> f64 {
        self.matrix.max()
    }

    pub fn idempotence_error(&self) -> f64 {
        (&self.matrix * &self.matrix - &self.matrix).amax()
    }

    /// Smallest eigenvalue of the symmetric part.
    pub fn min_eigenvalue(&self) -> f64 {
        let sym = (&self.matrix + self.matrix.transpose()) * 0.5;
        SymmetricEigen::new(sym).eigenvalues.min()
    }
}

/// `(H_p)_ij = 1/l_i` when `i` and `j` share a block, else 0.
pub fn h_matrix(p: &Partition) -> ObservationMatrix {
    let n = p.n();
    let sizes = p.containing_block_sizes();
    let a = p.assignment();
    let matrix = DMatrix::from_fn(n, n, |i, j| {
        if a[i] == a[j] {
            1.0 / sizes[i] as f64
        } else {
            0.0
        }
    });
    ObservationMatrix {
        matrix,
        provenance: Provenance::ExactFromPartition,
    }
}

/// Lexicographic stream of restricted-growth strings whose blocks all have
/// at least `min_block` members.
///
/// Prefixes that can no longer be completed (fewer remaining agents than the
/// total deficit of undersized blocks) are never expanded. A stream may be
/// pinned to a fixed prefix, in which case it yields exactly the contiguous
/// lexicographic range of partitions starting with that prefix.
#[derive(Debug, Clone)]
pub struct PartitionEnumerator {
    n: usize,
    min_block: usize,
    fixed: usize,
    a: Vec<usize>,
    counts: Vec<usize>,
    deficit: usize,
    started: bool,
    done: bool,
}

impl PartitionEnumerator {
    fn with_prefix(n: usize, min_block: usize, prefix: &[usize]) -> Self {
        let mut e = PartitionEnumerator {
            n,
            min_block,
            fixed: prefix.len(),
            a: Vec::with_capacity(n),
            counts: Vec::with_capacity(n),
            deficit: 0,
            started: false,
            done: false,
        };
        for &k in prefix {
            if !e.push(k) {
                e.done = true;
                break;
            }
        }
        e
    }

    fn remaining_after(&self, pos: usize) -> usize {
        self.n - pos - 1
    }

    /// Assigns the next agent to block `k`, undoing it if no completion exists.
    fn push(&mut self, k: usize) -> bool {
        let pos = self.a.len();
        if k > self.counts.len() {
            return false;
        }
        let new_deficit = if k == self.counts.len() {
            self.deficit + self.min_block - 1
        } else if self.counts[k] < self.min_block {
            self.deficit - 1
        } else {
            self.deficit
        };
        if new_deficit > self.remaining_after(pos) {
            return false;
        }
        if k == self.counts.len() {
            self.counts.push(1);
        } else {
            self.counts[k] += 1;
        }
        self.deficit = new_deficit;
        self.a.push(k);
        true
    }

    fn pop(&mut self) -> usize {
        let k = self.a.pop().expect("pop on empty prefix");
        self.counts[k] -= 1;
        if self.counts[k] < self.min_block {
            // block was at or below the bound before removal
            if self.counts[k] == 0 {
                self.counts.pop();
                self.deficit -= self.min_block - 1;
            } else {
                self.deficit += 1;
            }
        }
        k
    }

    /// Completes the current prefix with the lexicographically smallest feasible suffix.
    fn fill(&mut self) -> bool {
        while self.a.len() < self.n {
            let m = self.counts.len();
            if !(0..=m).any(|k| self.push(k)) {
                return false;
            }
        }
        true
    }

    /// Advances to the next assignment, returning a borrowed view of it.
    pub fn next_assignment(&mut self) -> Option<&[usize]> {
        if self.done {
            return None;
        }
        if !self.started {
            self.started = true;
            if self.min_block > self.n || !self.fill() {
                self.done = true;
                return None;
            }
            return Some(&self.a);
        }
        loop {
            if self.a.len() <= self.fixed.max(1) {
                self.done = true;
                return None;
            }
            let old = self.pop();
            let m = self.counts.len();
            if ((old + 1)..=m).any(|k| self.push(k)) {
                if self.fill() {
                    return Some(&self.a);
                }
                self.done = true;
                return None;
            }
        }
    }
}

impl Iterator for PartitionEnumerator {
    type Item = Partition;

    fn next(&mut self) -> Option<Partition> {
        self.next_assignment().map(|a| Partition {
            assignment: a.to_vec(),
        })
    }
}

fn check_enum_args(n: usize, min_block: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    if min_block == 0 {
        return Err(Error::InvalidArgument(
            "minimum block size must be at least 1".into(),
        ));
    }
    Ok(())
}

/// Every partition of `n` agents with all blocks of size at least `min_block`,
/// in lexicographic order of canonical assignment. Empty iff `min_block > n`.
pub fn enumerate_partitions(n: usize, min_block: usize) -> Result<PartitionEnumerator> {
    check_enum_args(n, min_block)?;
    Ok(PartitionEnumerator::with_prefix(n, min_block, &[]))
}

/// Splits the enumeration into contiguous lexicographic ranges, one per
/// feasible prefix of length `min(depth, n)`. Concatenating the ranges in
/// order reproduces [`enumerate_partitions`].
pub fn split_enumeration(
    n: usize,
    min_block: usize,
    depth: usize,
) -> Result<Vec<PartitionEnumerator>> {
    check_enum_args(n, min_block)?;
    if min_block > n {
        return Ok(Vec::new());
    }
    let depth = depth.clamp(1, n);
    let mut out = Vec::new();
    let mut prefixes = PartitionEnumerator::with_prefix(depth, 1, &[]);
    while let Some(prefix) = prefixes.next_assignment() {
        let e = PartitionEnumerator::with_prefix(n, min_block, prefix);
        if !e.done {
            out.push(e);
        }
    }
    Ok(out)
}

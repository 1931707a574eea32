//! Set partitions of input indices (tensor-structure options).

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::IndexSet;

/// Largest dimension for which all partitions may be enumerated (Bell(10) = 115975).
pub const MAX_ENUMERATION_DIM: usize = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PartitionError {
    #[error("index {0} appears in more than one block")]
    Overlap(usize),
    #[error("index {0} is not covered by any block")]
    Missing(usize),
    #[error("index {index} is out of range for dimension {dim}")]
    OutOfRange { index: usize, dim: usize },
    #[error("empty block")]
    EmptyBlock,
    #[error("exhaustive enumeration is limited to d <= {MAX_ENUMERATION_DIM}, got {0}")]
    TooLarge(usize),
    #[error("cannot parse partition `{0}`")]
    Syntax(String),
}

/// A partition of `{0..dim}` in canonical form: each block sorted ascending, blocks ordered
/// by their smallest element. This is also the canonical factor (axis) order of grids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<usize>>", into = "Vec<Vec<usize>>")]
pub struct Partition {
    blocks: Vec<Vec<usize>>,
    dim: usize,
}

impl Partition {
    pub fn new(mut blocks: Vec<Vec<usize>>, dim: usize) -> Result<Self, PartitionError> {
        let mut seen = vec![false; dim];
        for b in &mut blocks {
            if b.is_empty() {
                return Err(PartitionError::EmptyBlock);
            }
            b.sort_unstable();
            for &i in b.iter() {
                if i >= dim {
                    return Err(PartitionError::OutOfRange { index: i, dim });
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(PartitionError::Overlap(i));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(PartitionError::Missing(i));
        }
        blocks.sort_unstable_by_key(|b| b[0]);
        Ok(Partition { blocks, dim })
    }

    /// `{{0..dim}}`: one non-tensorial block.
    pub fn single_block(dim: usize) -> Self {
        Partition {
            blocks: if dim == 0 {
                vec![]
            } else {
                vec![(0..dim).collect()]
            },
            dim,
        }
    }

    /// `{{0},{1},...}`: fully tensorial.
    pub fn singletons(dim: usize) -> Self {
        Partition {
            blocks: (0..dim).map(|i| vec![i]).collect(),
            dim,
        }
    }

    /// Builds a partition from a restricted growth string (`rgs[i]` = block of element i).
    pub fn from_rgs(rgs: &[usize]) -> Self {
        let m = rgs.iter().copied().max().map_or(0, |x| x + 1);
        let mut blocks = vec![Vec::new(); m];
        for (i, &b) in rgs.iter().enumerate() {
            blocks[b].push(i);
        }
        Partition {
            blocks,
            dim: rgs.len(),
        }
    }

    /// Parses `1,2|3` style specs with 1-based indices.
    pub fn parse_one_based(spec: &str, dim: usize) -> Result<Self, PartitionError> {
        let mut blocks = Vec::new();
        for part in spec.split('|') {
            let block: Result<Vec<usize>, _> = part
                .split(',')
                .map(|s| s.trim().trim_matches(|c| c == '{' || c == '}'))
                .filter(|s| !s.is_empty())
                .map(|s| match s.parse::<usize>() {
                    Ok(i) if i >= 1 => Ok(i - 1),
                    _ => Err(PartitionError::Syntax(spec.to_string())),
                })
                .collect();
            blocks.push(block?);
        }
        Partition::new(blocks, dim)
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn block_sets(&self) -> Vec<IndexSet> {
        self.blocks
            .iter()
            .map(|b| IndexSet::from_indices(b.iter().copied()))
            .collect()
    }

    /// Block index containing each element.
    pub fn block_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.dim];
        for (m, b) in self.blocks.iter().enumerate() {
            for &i in b {
                out[i] = m;
            }
        }
        out
    }

    pub fn to_one_based_string(&self) -> String {
        self.blocks
            .iter()
            .map(|b| {
                b.iter()
                    .map(|i| (i + 1).to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect::<Vec<_>>()
            .join("|")
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (k, b) in self.blocks.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{{")?;
            for (l, i) in b.iter().enumerate() {
                if l > 0 {
                    write!(f, ",")?;
                }
                write!(f, "{}", i + 1)?;
            }
            write!(f, "}}")?;
        }
        write!(f, "}}")
    }
}

impl TryFrom<Vec<Vec<usize>>> for Partition {
    type Error = PartitionError;

    fn try_from(blocks: Vec<Vec<usize>>) -> Result<Self, Self::Error> {
        let dim = blocks.iter().map(Vec::len).sum();
        Partition::new(blocks, dim)
    }
}

impl From<Partition> for Vec<Vec<usize>> {
    fn from(p: Partition) -> Self {
        p.blocks
    }
}

/// All set partitions of `{0..d}` in lexicographic order of their restricted growth strings.
pub fn enumerate_partitions(d: usize) -> Result<Vec<Partition>, PartitionError> {
    if d > MAX_ENUMERATION_DIM {
        return Err(PartitionError::TooLarge(d));
    }
    if d == 0 {
        return Ok(vec![Partition::single_block(0)]);
    }
    let mut out = Vec::new();
    let mut rgs = vec![0usize; d];
    // prefix_max[i] = max(rgs[0..=i])
    let mut prefix_max = vec![0usize; d];
    loop {
        out.push(Partition::from_rgs(&rgs));
        // increment the rightmost position that can grow
        let mut i = d - 1;
        loop {
            if i == 0 {
                return Ok(out);
            }
            if rgs[i] <= prefix_max[i - 1] {
                rgs[i] += 1;
                prefix_max[i] = prefix_max[i - 1].max(rgs[i]);
                for j in i + 1..d {
                    rgs[j] = 0;
                    prefix_max[j] = prefix_max[i];
                }
                break;
            }
            i -= 1;
        }
    }
}

/// Bell numbers via the Bell triangle.
pub fn bell_number(d: usize) -> u128 {
    let mut row = vec![1u128];
    for _ in 0..d {
        let mut next = Vec::with_capacity(row.len() + 1);
        next.push(*row.last().unwrap());
        for &x in &row {
            let last = *next.last().unwrap();
            next.push(last + x);
        }
        row = next;
    }
    row[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn d3_matches_the_five_options() {
        let parts = enumerate_partitions(3).unwrap();
        let shown: Vec<String> = parts.iter().map(|p| p.to_string()).collect();
        assert_eq!(
            shown,
            vec![
                "{{1,2,3}}",
                "{{1,2},{3}}",
                "{{1,3},{2}}",
                "{{1},{2,3}}",
                "{{1},{2},{3}}"
            ]
        );
    }

    #[test]
    fn counts_match_bell_numbers() {
        for (d, b) in [(1, 1), (2, 2), (3, 5), (4, 15), (5, 52), (6, 203), (7, 877)] {
            let parts = enumerate_partitions(d).unwrap();
            assert_eq!(parts.len() as u128, b);
            assert_eq!(bell_number(d), b);
            let uniq: HashSet<_> = parts.iter().collect();
            assert_eq!(uniq.len(), parts.len());
        }
        assert_eq!(bell_number(10), 115_975);
    }

    #[test]
    fn enumeration_guard() {
        assert_eq!(enumerate_partitions(11), Err(PartitionError::TooLarge(11)));
    }

    #[test]
    fn validation() {
        assert_eq!(
            Partition::new(vec![vec![0, 1], vec![1]], 2),
            Err(PartitionError::Overlap(1))
        );
        assert_eq!(
            Partition::new(vec![vec![0]], 2),
            Err(PartitionError::Missing(1))
        );
        let p = Partition::new(vec![vec![2], vec![1, 0]], 3).unwrap();
        assert_eq!(p.blocks(), &[vec![0, 1], vec![2]]);
        assert_eq!(p.block_of(), vec![0, 0, 1]);
    }

    #[test]
    fn parse_one_based_specs() {
        let p = Partition::parse_one_based("3,4|1|2", 4).unwrap();
        assert_eq!(p.blocks(), &[vec![0], vec![1], vec![2, 3]]);
        assert_eq!(p.to_one_based_string(), "1|2|3,4");
        assert!(Partition::parse_one_based("0,1", 2).is_err());
        assert!(Partition::parse_one_based("1,x", 2).is_err());
    }
}

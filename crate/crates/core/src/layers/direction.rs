use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// One of the four flattening orders of an `H×W` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScanDirection {
    /// Left to right, row by row.
    LR,
    /// Reverse of `LR`.
    RL,
    /// Top to bottom, column by column.
    TB,
    /// Reverse of `TB`.
    BT,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::LR,
        ScanDirection::RL,
        ScanDirection::TB,
        ScanDirection::BT,
    ];

    /// Direction scanned by channel group `g`.
    pub fn for_group(g: usize) -> ScanDirection {
        Self::ALL[g % 4]
    }

    pub fn name(self) -> &'static str {
        match self {
            ScanDirection::LR => "lr",
            ScanDirection::RL => "rl",
            ScanDirection::TB => "tb",
            ScanDirection::BT => "bt",
        }
    }
}

/// Token order of a direction over a grid, plus its inverse.
///
/// `forward[i]` is the row-major grid index of the `i`-th scanned token;
/// `inverse[p]` is the scan position of grid index `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanPermutation {
    pub direction: ScanDirection,
    pub forward: Arc<[usize]>,
    pub inverse: Arc<[usize]>,
}

pub fn scan_permutation(direction: ScanDirection, h: usize, w: usize) -> ScanPermutation {
    let row_major = || (0..h * w).collect::<Vec<_>>();
    let col_major = || {
        (0..w)
            .flat_map(|c| (0..h).map(move |r| r * w + c))
            .collect::<Vec<_>>()
    };
    let forward = match direction {
        ScanDirection::LR => row_major(),
        ScanDirection::RL => row_major().into_iter().rev().collect(),
        ScanDirection::TB => col_major(),
        ScanDirection::BT => col_major().into_iter().rev().collect(),
    };
    let mut inverse = vec![0; forward.len()];
    for (i, &p) in forward.iter().enumerate() {
        inverse[p] = i;
    }
    ScanPermutation {
        direction,
        forward: forward.into(),
        inverse: inverse.into(),
    }
}

impl ScanPermutation {
    /// Reorders `seq` (one item per grid cell, row-major) into scan order.
    pub fn apply<V: Copy>(&self, seq: &[V]) -> Vec<V> {
        self.forward.iter().map(|&p| seq[p]).collect()
    }

    /// Undoes [`ScanPermutation::apply`].
    pub fn restore<V: Copy>(&self, seq: &[V]) -> Vec<V> {
        self.inverse.iter().map(|&i| seq[i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumerates_two_by_three() {
        let f = |d| scan_permutation(d, 2, 3).forward.to_vec();
        assert_eq!(f(ScanDirection::LR), [0, 1, 2, 3, 4, 5]);
        assert_eq!(f(ScanDirection::RL), [5, 4, 3, 2, 1, 0]);
        assert_eq!(f(ScanDirection::TB), [0, 3, 1, 4, 2, 5]);
        assert_eq!(f(ScanDirection::BT), [5, 2, 4, 1, 3, 0]);
    }

    #[test]
    fn degenerate_grids() {
        for (h, w) in [(1, 5), (4, 1)] {
            assert_eq!(
                scan_permutation(ScanDirection::LR, h, w).forward,
                scan_permutation(ScanDirection::TB, h, w).forward
            );
        }
    }
}

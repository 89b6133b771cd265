//! Index layout of truncated state boxes.
//!
//! Pairs `(e, i)` are laid out row-major with `e` outermost:
//! `index = e * (i_max + 1) + i`. Triples `(e, i, j)` extend a pair index
//! with `j` innermost: `index = pair(e, i) * (i_max + 1) + j`. Every module
//! that stores probabilities over states uses this layout.

use serde::{Deserialize, Serialize};

use crate::params::{AugmentedState, EiState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Lattice {
    pub e_max: u32,
    pub i_max: u32,
}

impl Lattice {
    pub fn new(e_max: u32, i_max: u32) -> Self {
        Self { e_max, i_max }
    }

    /// Square box `0..=n` in both coordinates.
    pub fn square(n: u32) -> Self {
        Self::new(n, n)
    }

    #[inline]
    pub fn e_levels(&self) -> usize {
        self.e_max as usize + 1
    }

    #[inline]
    pub fn i_levels(&self) -> usize {
        self.i_max as usize + 1
    }

    /// Number of `(e, i)` pairs.
    #[inline]
    pub fn pairs(&self) -> usize {
        self.e_levels() * self.i_levels()
    }

    /// Number of `(e, i, j)` triples.
    #[inline]
    pub fn triples(&self) -> usize {
        self.pairs() * self.i_levels()
    }

    #[inline]
    pub fn contains(&self, s: EiState) -> bool {
        s.e <= self.e_max && s.i <= self.i_max
    }

    #[inline]
    pub fn pair_index(&self, s: EiState) -> usize {
        debug_assert!(self.contains(s));
        s.e as usize * self.i_levels() + s.i as usize
    }

    #[inline]
    pub fn pair_at(&self, idx: usize) -> EiState {
        let n = self.i_levels();
        EiState::new((idx / n) as u32, (idx % n) as u32)
    }

    #[inline]
    pub fn triple_index(&self, x: AugmentedState) -> usize {
        self.pair_index(EiState::new(x.e, x.i)) * self.i_levels() + x.j as usize
    }

    #[inline]
    pub fn triple_at(&self, idx: usize) -> AugmentedState {
        let n = self.i_levels();
        let pair = self.pair_at(idx / n);
        AugmentedState::new(pair.e, pair.i, (idx % n) as u32)
    }

    /// The state that absorbs truncated mass.
    pub fn corner(&self) -> EiState {
        EiState::new(self.e_max, self.i_max)
    }

    /// True when the state lies on the upper boundary of the box.
    pub fn on_edge(&self, s: EiState) -> bool {
        (self.e_max > 0 && s.e == self.e_max) || s.i == self.i_max
    }

    pub fn states(&self) -> impl Iterator<Item = EiState> + '_ {
        (0..self.pairs()).map(|k| self.pair_at(k))
    }

    pub fn augmented_states(&self) -> impl Iterator<Item = AugmentedState> + '_ {
        (0..self.triples()).map(|k| self.triple_at(k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_and_triple_indices_round_trip() {
        let lat = Lattice::new(2, 3);
        for k in 0..lat.pairs() {
            assert_eq!(lat.pair_index(lat.pair_at(k)), k);
        }
        for k in 0..lat.triples() {
            assert_eq!(lat.triple_index(lat.triple_at(k)), k);
        }
        assert_eq!(lat.pair_index(EiState::new(1, 2)), 6);
        assert_eq!(lat.triple_index(AugmentedState::new(1, 2, 3)), 27);
    }

    #[test]
    fn frozen_exposed_coordinate() {
        let lat = Lattice::new(0, 4);
        assert_eq!(lat.pairs(), 5);
        assert_eq!(lat.triples(), 25);
        assert!(!lat.on_edge(EiState::new(0, 3)));
        assert!(lat.on_edge(EiState::new(0, 4)));
    }
}

//! Integer voxel sets and the kernel maps used by sparse convolutions.
//!
//! Voxels are kept in lexicographic order so every map, and therefore every
//! forward pass, is independent of the order in which points arrive.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use crate::autograd::{init_he, KernelMap, ParamId, ParamStore, Tape, Var};
use crate::tensor::Mat;

pub type Coord = [i32; 3];

#[derive(Clone, Debug)]
pub struct VoxelSet {
    pub coords: Vec<Coord>,
    index: HashMap<Coord, usize>,
}

impl VoxelSet {
    /// Sorted, deduplicated set.
    pub fn new(mut coords: Vec<Coord>) -> Self {
        coords.sort_unstable();
        coords.dedup();
        let index = coords.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Self { coords, index }
    }

    /// Every cell of a `g³` grid, x-major (`index = (x·g + y)·g + z`).
    pub fn dense(g: usize) -> Self {
        let g = g as i32;
        let mut coords = Vec::with_capacity((g * g * g) as usize);
        for x in 0..g {
            for y in 0..g {
                for z in 0..g {
                    coords.push([x, y, z]);
                }
            }
        }
        Self::new(coords)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn get(&self, c: &Coord) -> Option<usize> {
        self.index.get(c).copied()
    }

    /// Parent cells one level coarser.
    pub fn coarsen(&self) -> Self {
        Self::new(self.coords.iter().map(|c| c.map(|v| v.div_euclid(2))).collect())
    }
}

fn offsets(k: i32) -> Vec<Coord> {
    let r = k / 2;
    let mut out = Vec::new();
    for dx in -r..=r {
        for dy in -r..=r {
            for dz in -r..=r {
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

/// 3³ submanifold convolution: outputs live on the input voxels.
pub fn submanifold_map(set: &VoxelSet) -> KernelMap {
    let offs = offsets(3);
    let mut pairs = vec![Vec::new(); offs.len()];
    for (o, c) in set.coords.iter().enumerate() {
        for (k, d) in offs.iter().enumerate() {
            if let Some(i) = set.get(&[c[0] + d[0], c[1] + d[1], c[2] + d[2]]) {
                pairs[k].push((i as u32, o as u32));
            }
        }
    }
    KernelMap { n_in: set.len(), n_out: set.len(), offsets: pairs }
}

/// Kernel-3 stride-2 convolution from `fine` onto `fine.coarsen()`: output
/// `o` reads inputs at `2o + d` for `d ∈ {-1,0,1}³`.
pub fn downsample_map(fine: &VoxelSet, coarse: &VoxelSet) -> KernelMap {
    let offs = offsets(3);
    let mut pairs = vec![Vec::new(); offs.len()];
    for (o, c) in coarse.coords.iter().enumerate() {
        for (k, d) in offs.iter().enumerate() {
            if let Some(i) = fine.get(&[2 * c[0] + d[0], 2 * c[1] + d[1], 2 * c[2] + d[2]]) {
                pairs[k].push((i as u32, o as u32));
            }
        }
    }
    KernelMap { n_in: fine.len(), n_out: coarse.len(), offsets: pairs }
}

/// Transposed kernel-2 stride-2 convolution from `coarse` back onto `fine`.
pub fn upsample_map(coarse: &VoxelSet, fine: &VoxelSet) -> KernelMap {
    let mut pairs = vec![Vec::new(); 8];
    for (o, c) in fine.coords.iter().enumerate() {
        let parent = c.map(|v| v.div_euclid(2));
        let k = c.iter().fold(0, |acc, v| acc * 2 + v.rem_euclid(2) as usize);
        let i = coarse.get(&parent).expect("fine voxel without a parent");
        pairs[k].push((i as u32, o as u32));
    }
    KernelMap { n_in: coarse.len(), n_out: fine.len(), offsets: pairs }
}

/// Sparse convolution weights plus bias.
#[derive(Clone, Debug)]
pub struct SparseConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub volume: usize,
    pub cin: usize,
    pub cout: usize,
}

impl SparseConv {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, volume: usize, cin: usize, cout: usize) -> Self {
        let fan_in = volume * cin;
        let weight = store.add(format!("{name}.weight"), init_he(rng, volume * cin, cout, fan_in));
        let bias = store.add(format!("{name}.bias"), Mat::zeros(1, cout));
        Self { weight, bias, volume, cin, cout }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, map: &Rc<KernelMap>) -> Var {
        debug_assert_eq!(map.kernel_volume(), self.volume);
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.sparse_conv(x, w, Rc::clone(map));
        tape.add_row(y, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coarsen_handles_negative_coordinates() {
        let s = VoxelSet::new(vec![[-1, 0, 0], [0, 0, 0], [1, 1, 1], [-2, -3, 5]]);
        assert_eq!(s.coarsen().coords, vec![[-1, -2, 2], [-1, 0, 0], [0, 0, 0]]);
    }

    #[test]
    fn maps_on_a_dense_grid() {
        let fine = VoxelSet::dense(4);
        let sub = submanifold_map(&fine);
        // interior voxels see all 27 neighbours, corners 8
        let count = |v: u32| sub.offsets.iter().flatten().filter(|p| p.1 == v).count();
        assert_eq!(count(fine.get(&[1, 1, 1]).unwrap() as u32), 27);
        assert_eq!(count(0), 8);
        let coarse = fine.coarsen();
        assert_eq!(coarse.len(), 8);
        let up = upsample_map(&coarse, &fine);
        assert_eq!(up.pair_count(), 64);
        assert!(up.offsets.iter().all(|o| o.len() == 8));
        let down = downsample_map(&fine, &coarse);
        // coarse (0,0,0) reads fine {0,1}³ (the -1 offsets fall outside)
        assert_eq!(down.offsets.iter().flatten().filter(|p| p.1 == 0).count(), 8);
    }
}

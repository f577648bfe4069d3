//! Canonical-to-task mapping.
//!
//! Fused per-point features are max-pooled into a `G³` volume indexed by
//! NOCS, densified by a three-level volumetric UNet, and sampled
//! trilinearly at canonical query points. A small MLP turns the sampled
//! feature (plus the query) into a task-space position relative to the
//! current cloud's centroid.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{InterpMap, KernelMap, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::nn::{LastLayer, Mlp};
use crate::nocs::{coord_to_bin, NocsCoords};
use crate::sparse::{downsample_map, submanifold_map, upsample_map, SparseConv, VoxelSet};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarpConfig {
    pub grid: usize,
    /// Channels of the input (fused) features.
    pub in_channels: usize,
    /// UNet widths at full, half and quarter resolution.
    pub unet_channels: [usize; 3],
    /// Channels of the densified volume.
    pub volume_channels: usize,
    /// Hidden widths of the query decoder.
    pub decoder: Vec<usize>,
}

impl Default for WarpConfig {
    fn default() -> Self {
        Self { grid: 32, in_channels: 128, unet_channels: [32, 64, 64], volume_channels: 64, decoder: vec![128, 128] }
    }
}

impl WarpConfig {
    pub fn scaled(&self, div: usize) -> Self {
        let d = |c: usize| (c / div.max(1)).max(1);
        Self {
            grid: self.grid,
            in_channels: d(self.in_channels),
            unet_channels: self.unet_channels.map(d),
            volume_channels: d(self.volume_channels),
            decoder: self.decoder.iter().map(|&c| d(c)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 4 || self.grid % 4 != 0 {
            return Err(Error::Config(format!("warp grid must be a multiple of 4 and >= 4, got {}", self.grid)));
        }
        Ok(())
    }
}

/// `G³×C` features (x-major cell order) and the occupancy mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    pub grid: usize,
    pub data: Mat,
    pub occupancy: Vec<bool>,
}

impl FeatureVolume {
    pub fn channels(&self) -> usize {
        self.data.cols
    }

    pub fn cell(&self, x: usize, y: usize, z: usize) -> &[f64] {
        self.data.row(cell_index([x, y, z], self.grid))
    }
}

#[inline]
pub fn cell_index(c: [usize; 3], g: usize) -> usize {
    (c[0] * g + c[1]) * g + c[2]
}

/// Cell of every NOCS point (`nocs_to_bins` with `G` bins).
pub fn cells_of(nocs: &[Vec3], g: usize) -> Vec<usize> {
    nocs.iter().map(|p| cell_index(p.map(|v| coord_to_bin(v, g)), g)).collect()
}

/// Channel-wise max of the features falling in each cell; empty cells are
/// zero.
pub fn scatter(features: &Mat, nocs: &NocsCoords, grid: usize) -> Result<FeatureVolume> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let (v, occupancy) = scatter_var(&mut tape, f, nocs.as_slice(), grid)?;
    Ok(FeatureVolume { grid, data: tape.value(v).clone(), occupancy })
}

pub fn scatter_var(tape: &mut Tape, features: Var, nocs: &[Vec3], grid: usize) -> Result<(Var, Vec<bool>)> {
    if tape.value(features).rows != nocs.len() {
        return Err(Error::Alignment(format!("{} feature rows vs {} NOCS rows", tape.value(features).rows, nocs.len())));
    }
    let cells = cells_of(nocs, grid);
    let n_cells = grid * grid * grid;
    let mut occupancy = vec![false; n_cells];
    for &c in &cells {
        occupancy[c] = true;
    }
    Ok((tape.scatter_max(features, &cells, n_cells), occupancy))
}

/// Trilinear taps with cell centres at `(i + 0.5)/G`, clamped at the border.
pub fn trilinear_map(points: &[Vec3], g: usize) -> InterpMap {
    let taps = points
        .iter()
        .map(|p| {
            let mut lo = [0usize; 3];
            let mut hi = [0usize; 3];
            let mut t = [0.0; 3];
            for k in 0..3 {
                let u = (p[k] * g as f64 - 0.5).clamp(0.0, (g - 1) as f64);
                let i0 = (u.floor() as usize).min(g - 1);
                lo[k] = i0;
                hi[k] = (i0 + 1).min(g - 1);
                t[k] = u - i0 as f64;
            }
            let mut out = [(0u32, 0.0); 8];
            for (n, slot) in out.iter_mut().enumerate() {
                let mut w = 1.0;
                let mut c = [0usize; 3];
                for k in 0..3 {
                    let upper = (n >> (2 - k)) & 1 == 1;
                    c[k] = if upper { hi[k] } else { lo[k] };
                    w *= if upper { t[k] } else { 1.0 - t[k] };
                }
                *slot = (cell_index(c, g) as u32, w);
            }
            out
        })
        .collect();
    InterpMap { n_src: g * g * g, taps }
}

struct DenseMaps {
    sub: [Rc<KernelMap>; 2],
    down: [Rc<KernelMap>; 2],
    up: [Rc<KernelMap>; 2],
}

impl DenseMaps {
    fn new(g: usize) -> Self {
        let l0 = VoxelSet::dense(g);
        let l1 = l0.coarsen();
        let l2 = l1.coarsen();
        Self {
            sub: [Rc::new(submanifold_map(&l0)), Rc::new(submanifold_map(&l2))],
            down: [Rc::new(downsample_map(&l0, &l1)), Rc::new(downsample_map(&l1, &l2))],
            up: [Rc::new(upsample_map(&l2, &l1)), Rc::new(upsample_map(&l1, &l0))],
        }
    }
}

#[derive(Clone, Debug)]
pub struct WarpField {
    pub config: WarpConfig,
    conv_in: SparseConv,
    down: [SparseConv; 2],
    bottom: SparseConv,
    up: [SparseConv; 2],
    conv_out: SparseConv,
    decoder: Mlp,
}

impl WarpField {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: WarpConfig) -> Result<Self> {
        config.validate()?;
        let [c0, c1, c2] = config.unet_channels;
        let cin = config.in_channels;
        let conv_in = SparseConv::new(store, rng, "warp.conv_in", 27, cin, c0);
        let down = [
            SparseConv::new(store, rng, "warp.down1", 27, c0, c1),
            SparseConv::new(store, rng, "warp.down2", 27, c1, c2),
        ];
        let bottom = SparseConv::new(store, rng, "warp.bottom", 27, c2, c2);
        let up = [
            SparseConv::new(store, rng, "warp.up2", 8, c2, c1),
            SparseConv::new(store, rng, "warp.up1", 8, c1 + c1, c0),
        ];
        let conv_out = SparseConv::new(store, rng, "warp.conv_out", 27, c0 + c0, config.volume_channels);
        let mut dims = vec![config.volume_channels + 3];
        dims.extend(&config.decoder);
        dims.push(3);
        let decoder = Mlp::new(store, rng, "warp.decoder", &dims, false, LastLayer::Random);
        Ok(Self { config, conv_in, down, bottom, up, conv_out, decoder })
    }

    pub fn grid(&self) -> usize {
        self.config.grid
    }

    /// `G³×C_in` scattered volume → `G³×C_vol` dense volume.
    pub fn densify(&self, tape: &mut Tape, store: &ParamStore, volume: Var) -> Result<Var> {
        let g = self.config.grid;
        let (rows, cols) = tape.value(volume).shape();
        if rows != g * g * g || cols != self.config.in_channels {
            return Err(Error::InvalidInput(format!(
                "volume is {rows}x{cols}, expected {}x{}",
                g * g * g,
                self.config.in_channels
            )));
        }
        let maps = DenseMaps::new(g);
        let h0 = self.conv_in.forward(tape, store, volume, &maps.sub[0]);
        let h0 = tape.relu(h0);
        let h1 = self.down[0].forward(tape, store, h0, &maps.down[0]);
        let h1 = tape.relu(h1);
        let h2 = self.down[1].forward(tape, store, h1, &maps.down[1]);
        let h2 = tape.relu(h2);
        let h2 = self.bottom.forward(tape, store, h2, &maps.sub[1]);
        let h2 = tape.relu(h2);
        let u1 = self.up[0].forward(tape, store, h2, &maps.up[0]);
        let u1 = tape.relu(u1);
        let u1 = tape.concat_cols(&[u1, h1]);
        let u0 = self.up[1].forward(tape, store, u1, &maps.up[1]);
        let u0 = tape.relu(u0);
        let u0 = tape.concat_cols(&[u0, h0]);
        Ok(self.conv_out.forward(tape, store, u0, &maps.sub[0]))
    }

    /// Centroid-relative task positions (meters) of canonical queries `p`.
    pub fn warp_query(&self, tape: &mut Tape, store: &ParamStore, dense: Var, p: &[Vec3]) -> Result<Var> {
        if p.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("warp queries must lie in [0,1]^3".into()));
        }
        let map = Rc::new(trilinear_map(p, self.config.grid));
        let feat = tape.interpolate(dense, map);
        let q = tape.constant(Mat::from_points(p));
        let x = tape.concat_cols(&[feat, q]);
        Ok(self.decoder.forward(tape, store, x))
    }

    /// Scatter, densify and query in one pass.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, fused: Var, nocs: &[Vec3], queries: &[Vec3]) -> Result<Var> {
        let (vol, _) = scatter_var(tape, fused, nocs, self.config.grid)?;
        let dense = self.densify(tape, store, vol)?;
        self.warp_query(tape, store, dense, queries)
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }
}

/// Mean squared distance (m²) between predicted and ground-truth positions.
pub fn warp_loss(tape: &mut Tape, pred: Var, gt: &[Vec3]) -> Result<Var> {
    if tape.value(pred).rows != gt.len() {
        return Err(Error::Alignment(format!("{} predictions vs {} targets", tape.value(pred).rows, gt.len())));
    }
    Ok(tape.mean_sq_row_dist(pred, Rc::new(Mat::from_points(gt))))
}

//! Per-point geometric features from a single partial point cloud.
//!
//! A small sparse voxel UNet: one submanifold convolution at full resolution,
//! three stride-2 downsampling convolutions, three transposed upsampling
//! convolutions with skip concatenation, a final submanifold convolution and
//! a linear projection. Every point receives the feature of its voxel.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{KernelMap, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geom::{centroid_sorted, cmp_lex, sub, Vec3};
use crate::nn::Linear;
use crate::sparse::{downsample_map, submanifold_map, upsample_map, Coord, SparseConv, VoxelSet};
use crate::tensor::Mat;

/// Coordinates are divided by this before entering the network (meters).
pub const FEATURE_SCALE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Voxel edge length in meters.
    pub voxel_size: f64,
    /// Output channels of the full-resolution conv and the three downsampling convs.
    pub enc_channels: [usize; 4],
    /// Output channels of the three upsampling convs (deepest first) and the
    /// final full-resolution conv.
    pub dec_channels: [usize; 4],
    pub out_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { voxel_size: 0.01, enc_channels: [64, 64, 128, 256], dec_channels: [64, 64, 64, 128], out_dim: 64 }
    }
}

impl EncoderConfig {
    /// Every width divided by `div` (at least 1).
    pub fn scaled(&self, div: usize) -> Self {
        let d = |c: usize| (c / div.max(1)).max(1);
        Self {
            voxel_size: self.voxel_size,
            enc_channels: self.enc_channels.map(d),
            dec_channels: self.dec_channels.map(d),
            out_dim: d(self.out_dim),
        }
    }
}

/// Features aligned 1:1 with the input points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointFeatures {
    pub features: Mat,
}

/// Voxel hierarchy and kernel maps of one point cloud.
pub struct VoxelPlan {
    /// Voxel index of every input point at full resolution.
    pub point_voxel: Rc<Vec<usize>>,
    /// Per-voxel input features `[1, x, y, z]` (means over member points).
    pub voxel_input: Mat,
    sub0: Rc<KernelMap>,
    down: [Rc<KernelMap>; 3],
    up: [Rc<KernelMap>; 3],
}

impl VoxelPlan {
    /// `points` must already be zero-centered.
    pub fn build(points: &[Vec3], voxel_size: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("cannot encode an empty point cloud".into()));
        }
        if !(voxel_size > 0.0) {
            return Err(Error::Config(format!("voxel size must be positive, got {voxel_size}")));
        }
        // keeps voxel coordinates far from i32 overflow at every level
        let limit = (1 << 24) as f64 * voxel_size;
        if let Some(p) = points.iter().find(|p| p.iter().any(|v| !(v.abs() < limit))) {
            return Err(Error::InvalidInput(format!("point {p:?} is non-finite or out of range (|x| < {limit} m)")));
        }
        let key = |p: &Vec3| -> Coord { p.map(|v| (v / voxel_size).floor() as i32) };
        let l0 = VoxelSet::new(points.iter().map(key).collect());
        let point_voxel: Vec<usize> = points.iter().map(|p| l0.get(&key(p)).expect("voxel")).collect();

        // sum members in sorted order so the result is permutation independent
        let mut members: Vec<Vec<Vec3>> = vec![Vec::new(); l0.len()];
        for (p, &v) in points.iter().zip(&point_voxel) {
            members[v].push(*p);
        }
        let mut voxel_input = Mat::zeros(l0.len(), 4);
        for (v, pts) in members.iter_mut().enumerate() {
            pts.sort_by(cmp_lex);
            let n = pts.len() as f64;
            let mut s = [0.0; 3];
            for p in pts.iter() {
                for k in 0..3 {
                    s[k] += p[k];
                }
            }
            let row = voxel_input.row_mut(v);
            row[0] = 1.0;
            for k in 0..3 {
                row[k + 1] = s[k] / n / FEATURE_SCALE;
            }
        }

        let l1 = l0.coarsen();
        let l2 = l1.coarsen();
        let l3 = l2.coarsen();
        Ok(Self {
            point_voxel: Rc::new(point_voxel),
            voxel_input,
            sub0: Rc::new(submanifold_map(&l0)),
            down: [
                Rc::new(downsample_map(&l0, &l1)),
                Rc::new(downsample_map(&l1, &l2)),
                Rc::new(downsample_map(&l2, &l3)),
            ],
            up: [
                Rc::new(upsample_map(&l3, &l2)),
                Rc::new(upsample_map(&l2, &l1)),
                Rc::new(upsample_map(&l1, &l0)),
            ],
        })
    }
}

/// Subtracts the (order-independent) centroid.
pub fn zero_center(points: &[Vec3]) -> (Vec<Vec3>, Vec3) {
    let c = centroid_sorted(points);
    (points.iter().map(|&p| sub(p, c)).collect(), c)
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    conv0: SparseConv,
    down: [SparseConv; 3],
    up: [SparseConv; 3],
    conv_out: SparseConv,
    head: Linear,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: EncoderConfig) -> Self {
        let [e0, e1, e2, e3] = config.enc_channels;
        let [d0, d1, d2, d3] = config.dec_channels;
        let conv0 = SparseConv::new(store, rng, "encoder.conv0", 27, 4, e0);
        let down = [
            SparseConv::new(store, rng, "encoder.down1", 27, e0, e1),
            SparseConv::new(store, rng, "encoder.down2", 27, e1, e2),
            SparseConv::new(store, rng, "encoder.down3", 27, e2, e3),
        ];
        let up = [
            SparseConv::new(store, rng, "encoder.up3", 8, e3, d0),
            SparseConv::new(store, rng, "encoder.up2", 8, d0 + e2, d1),
            SparseConv::new(store, rng, "encoder.up1", 8, d1 + e1, d2),
        ];
        let conv_out = SparseConv::new(store, rng, "encoder.conv_out", 27, d2 + e0, d3);
        let head = Linear::new(store, rng, "encoder.head", d3, config.out_dim);
        Self { config, conv0, down, up, conv_out, head }
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    /// Records the forward pass for already zero-centered points and returns
    /// an `N×out_dim` variable.
    pub fn forward_centered(&self, tape: &mut Tape, store: &ParamStore, centered: &[Vec3]) -> Result<Var> {
        let plan = VoxelPlan::build(centered, self.config.voxel_size)?;
        Ok(self.forward_plan(tape, store, &plan))
    }

    pub fn forward_plan(&self, tape: &mut Tape, store: &ParamStore, plan: &VoxelPlan) -> Var {
        let x = tape.constant(plan.voxel_input.clone());
        let h0 = self.conv0.forward(tape, store, x, &plan.sub0);
        let h0 = tape.relu(h0);
        let mut skips = vec![h0];
        let mut h = h0;
        for (conv, map) in self.down.iter().zip(&plan.down) {
            h = conv.forward(tape, store, h, map);
            h = tape.relu(h);
            skips.push(h);
        }
        // skips = [l0, l1, l2, l3]; walk back up
        for (i, (conv, map)) in self.up.iter().zip(&plan.up).enumerate() {
            h = conv.forward(tape, store, h, map);
            h = tape.relu(h);
            h = tape.concat_cols(&[h, skips[2 - i]]);
        }
        h = self.conv_out.forward(tape, store, h, &plan.sub0);
        h = tape.relu(h);
        let per_voxel = self.head.forward(tape, store, h);
        tape.gather_rows(per_voxel, Rc::clone(&plan.point_voxel))
    }

    /// Zero-centers `points` and extracts one feature row per point.
    pub fn extract_features(&self, store: &ParamStore, points: &[Vec3]) -> Result<PointFeatures> {
        let (centered, _) = zero_center(points);
        let mut tape = Tape::new();
        let out = self.forward_centered(&mut tape, store, &centered)?;
        Ok(PointFeatures { features: tape.value(out).clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check_param_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(0.0..0.05)])
            .collect()
    }

    fn small() -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoder::new(&mut store, &mut rng, EncoderConfig { voxel_size: 0.03, ..EncoderConfig::default() }.scaled(8));
        (store, enc)
    }

    #[test]
    fn shape_and_determinism() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(&mut store, &mut rng, EncoderConfig::default());
        let pts = cloud(50, 2);
        let a = enc.extract_features(&store, &pts).unwrap();
        assert_eq!(a.features.shape(), (50, 64));
        assert!(a.features.is_finite());
        assert_eq!(a, enc.extract_features(&store, &pts).unwrap());
        assert!(enc.extract_features(&store, &[]).is_err());
    }

    #[test]
    fn translation_is_removed_by_centering() {
        let (store, enc) = small();
        let pts = cloud(80, 4);
        let a = enc.extract_features(&store, &pts).unwrap();
        let moved: Vec<Vec3> = pts.iter().map(|p| [p[0] + 0.37, p[1] - 1.25, p[2] + 0.5]).collect();
        let b = enc.extract_features(&store, &moved).unwrap();
        assert!(a.features.max_abs_diff(&b.features) < 1e-9);
    }

    #[test]
    fn permuting_points_permutes_rows() {
        let (store, enc) = small();
        let pts = cloud(60, 5);
        let perm: Vec<usize> = (0..60).map(|i| (i * 17 + 3) % 60).collect();
        let permuted: Vec<Vec3> = perm.iter().map(|&i| pts[i]).collect();
        let a = enc.extract_features(&store, &pts).unwrap();
        let b = enc.extract_features(&store, &permuted).unwrap();
        assert_eq!(a.features.select_rows(&perm), b.features);
    }

    #[test]
    fn points_sharing_a_voxel_share_features() {
        let (store, enc) = small();
        let pts = vec![[0.001, 0.001, 0.001], [0.002, 0.0015, 0.001], [0.2, 0.1, 0.0]];
        let f = enc.extract_features(&store, &pts).unwrap().features;
        assert_eq!(f.row(0), f.row(1));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let (mut store, enc) = small();
        // nonzero biases keep pre-activations away from the ReLU kink at 0
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with("bias")).collect();
        for id in ids {
            store.value_mut(id).data.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
        let (pts, _) = zero_center(&cloud(12, 6));
        let probe = Mat::from_vec(12, enc.out_dim(), (0..12 * enc.out_dim()).map(|i| ((i * 7) % 5) as f64 - 2.0).collect());
        let loss_of = |store: &ParamStore| -> (Tape, Var) {
            let mut tape = Tape::new();
            let f = enc.forward_centered(&mut tape, store, &pts).unwrap();
            let t = tape.tanh(f);
            let p = tape.constant(probe.clone());
            let prod = tape.sub(t, p);
            let target = Rc::new(Mat::zeros(12, enc.out_dim()));
            let l = tape.mean_sq_row_dist(prod, target);
            (tape, l)
        };
        let ids: Vec<_> = store.ids().collect();
        let report = check_param_gradients(&mut store, &ids, 7, 1e-5, loss_of);
        assert!(report.max_rel_err < 1e-3, "{}", report.worst);
    }
}

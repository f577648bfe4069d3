//! NOCS refiner: a point-cloud branch that corrects the raw classification
//! logits and a mesh branch that corrects the canonical shape by a global
//! per-axis scale and offset. The branches exchange max-pooled global
//! features.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::encoder::FEATURE_SCALE;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::mesh::CanonicalMesh;
use crate::nn::{LastLayer, Mlp};
use crate::nocs::{NocsCoords, NocsLogits, NOCS_CENTER};
use crate::tensor::Mat;

/// Hidden/output widths of each refiner MLP; input widths follow from the
/// wiring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerConfig {
    pub pc_pointnet: Vec<usize>,
    pub mesh_pointnet: Vec<usize>,
    pub mesh_fusion: Vec<usize>,
    /// Hidden widths; the output is always 6.
    pub mesh_refine: Vec<usize>,
    /// Hidden widths; the output is always `3·bins`.
    pub pc_refine: Vec<usize>,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            pc_pointnet: vec![256, 256, 1024],
            mesh_pointnet: vec![64, 128, 1024],
            mesh_fusion: vec![512, 512, 1024],
            mesh_refine: vec![512, 256],
            pc_refine: vec![1024, 512],
        }
    }
}

impl RefinerConfig {
    pub fn scaled(&self, div: usize) -> Self {
        let d = |v: &Vec<usize>| v.iter().map(|&c| (c / div.max(1)).max(1)).collect();
        Self {
            pc_pointnet: d(&self.pc_pointnet),
            mesh_pointnet: d(&self.mesh_pointnet),
            mesh_fusion: d(&self.mesh_fusion),
            mesh_refine: d(&self.mesh_refine),
            pc_refine: d(&self.pc_refine),
        }
    }
}

/// Per-axis scale `1 + SCALE_RANGE·tanh(·)`.
pub const SCALE_RANGE: f64 = 0.5;
/// Per-axis offset `OFFSET_RANGE·tanh(·)`.
pub const OFFSET_RANGE: f64 = 0.25;

#[derive(Clone, Copy, Debug)]
pub struct RefinerInputs<'a> {
    /// `N×3B` raw logits.
    pub raw_logits: Var,
    /// `N×D` fused features.
    pub fused: Var,
    /// Zero-centered current-frame points.
    pub xyz: &'a [Vec3],
    /// Decoded raw NOCS of the same points.
    pub raw_nocs: &'a [Vec3],
    /// Canonical mesh surface samples fed to the mesh branch.
    pub mesh_points: &'a [Vec3],
    /// Canonical mesh vertices the scale/offset is applied to.
    pub mesh_vertices: &'a [Vec3],
}

#[derive(Clone, Copy, Debug)]
pub struct RefinerVars {
    pub delta: Var,
    pub refined_logits: Var,
    /// `1×3`
    pub scale: Var,
    /// `1×3`
    pub offset: Var,
    /// `M×3`, clamped to the unit cube.
    pub refined_vertices: Var,
    /// Global features of the two branches (exposed for wiring tests).
    pub pc_global: Var,
    pub mesh_global: Var,
}

/// Plain-value result of one refiner pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinerOutput {
    pub refined_logits: NocsLogits,
    pub mesh_scale: Vec3,
    pub mesh_offset: Vec3,
    pub refined_mesh: CanonicalMesh,
}

#[derive(Clone, Debug)]
pub struct Refiner {
    pub config: RefinerConfig,
    /// Stop gradients from the point head into the mesh branch. Off only for
    /// end-to-end gradient checks.
    pub detach_mesh_context: bool,
    bins: usize,
    pc_pointnet: Mlp,
    mesh_pointnet: Mlp,
    mesh_fusion: Mlp,
    mesh_refine: Mlp,
    pc_refine: Mlp,
}

fn with_input(input: usize, rest: &[usize]) -> Vec<usize> {
    std::iter::once(input).chain(rest.iter().copied()).collect()
}

fn select_cols(from: usize, to: usize, width: usize) -> Mat {
    let mut m = Mat::zeros(width, to - from);
    for c in from..to {
        m.set(c, c - from, 1.0);
    }
    m
}

impl Refiner {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: RefinerConfig, fusion_dim: usize, bins: usize) -> Result<Self> {
        for (name, w) in [
            ("pc_pointnet", &config.pc_pointnet),
            ("mesh_pointnet", &config.mesh_pointnet),
            ("mesh_fusion", &config.mesh_fusion),
        ] {
            if w.is_empty() {
                return Err(Error::Config(format!("refiner {name} needs at least one layer")));
            }
        }
        let pc_feat = *config.pc_pointnet.last().expect("checked");
        let mesh_feat = *config.mesh_pointnet.last().expect("checked");
        let fused_feat = *config.mesh_fusion.last().expect("checked");
        let pc_in = 3 * bins + fusion_dim + 6;
        let pc_pointnet = Mlp::new(store, rng, "refiner.pc_pointnet", &with_input(pc_in, &config.pc_pointnet), true, LastLayer::Random);
        let mesh_pointnet = Mlp::new(store, rng, "refiner.mesh_pointnet", &with_input(3, &config.mesh_pointnet), true, LastLayer::Random);
        let mesh_fusion = Mlp::new(
            store,
            rng,
            "refiner.mesh_fusion",
            &with_input(mesh_feat + pc_feat, &config.mesh_fusion),
            true,
            LastLayer::Random,
        );
        let mut dims = with_input(fused_feat, &config.mesh_refine);
        dims.push(6);
        let mesh_refine = Mlp::new(store, rng, "refiner.mesh_refine", &dims, false, LastLayer::Zero);
        let mut dims = with_input(pc_feat + fused_feat, &config.pc_refine);
        dims.push(3 * bins);
        let pc_refine = Mlp::new(store, rng, "refiner.pc_refine", &dims, false, LastLayer::Zero);
        Ok(Self { config, detach_mesh_context: true, bins, pc_pointnet, mesh_pointnet, mesh_fusion, mesh_refine, pc_refine })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Zeroes both residual heads so the refiner is an exact identity.
    pub fn reset_heads(&self, store: &mut ParamStore) {
        self.mesh_refine.last().zero(store);
        self.pc_refine.last().zero(store);
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, inputs: RefinerInputs<'_>) -> Result<RefinerVars> {
        let n = inputs.xyz.len();
        let (lr, lc) = tape.value(inputs.raw_logits).shape();
        if lc != 3 * self.bins {
            return Err(Error::InvalidInput(format!("logit width {lc} != 3x{}", self.bins)));
        }
        if lr != n || inputs.raw_nocs.len() != n || tape.value(inputs.fused).rows != n {
            return Err(Error::Alignment("refiner point inputs are not aligned".into()));
        }
        if inputs.mesh_points.is_empty() || inputs.mesh_vertices.is_empty() {
            return Err(Error::InvalidInput("refiner needs a non-empty mesh".into()));
        }
        let mut geo = Mat::zeros(n, 6);
        for (r, (p, q)) in inputs.xyz.iter().zip(inputs.raw_nocs).enumerate() {
            let row = geo.row_mut(r);
            for k in 0..3 {
                row[k] = p[k] / FEATURE_SCALE;
                row[k + 3] = (q[k] - NOCS_CENTER[k]) / FEATURE_SCALE;
            }
        }
        let geo = tape.constant(geo);
        let pc_in = tape.concat_cols(&[inputs.raw_logits, inputs.fused, geo]);
        let pc_dense = self.pc_pointnet.forward(tape, store, pc_in);
        let pc_global = tape.col_max(pc_dense);

        let m = inputs.mesh_points.len();
        // centred and scaled like the xyz features; raw NOCS in [0, 1] leave the
        // pooled extents too small to regress a scale from
        let centred: Vec<Vec3> = inputs
            .mesh_points
            .iter()
            .map(|p| [0, 1, 2].map(|k| (p[k] - NOCS_CENTER[k]) / FEATURE_SCALE))
            .collect();
        let mesh_in = tape.constant(Mat::from_points(&centred));
        let mesh_dense = self.mesh_pointnet.forward(tape, store, mesh_in);
        // unit-norm context: the raw pooled point features grow with the logit
        // magnitudes and otherwise drown the mesh extents
        let pc_ctx = tape.l2_normalize_rows(pc_global);
        let pc_bcast = tape.broadcast_rows(pc_ctx, m);
        let mesh_cat = tape.concat_cols(&[mesh_dense, pc_bcast]);
        let mesh_fused = self.mesh_fusion.forward(tape, store, mesh_cat);
        let mesh_global = tape.col_max(mesh_fused);

        let raw6 = self.mesh_refine.forward(tape, store, mesh_global);
        let sel_s = tape.constant(select_cols(0, 3, 6));
        let sel_o = tape.constant(select_cols(3, 6, 6));
        let s_raw = tape.matmul(raw6, sel_s);
        let o_raw = tape.matmul(raw6, sel_o);
        let s = tape.tanh(s_raw);
        let s = tape.scale(s, SCALE_RANGE);
        let scale = tape.add_const(s, 1.0);
        let o = tape.tanh(o_raw);
        let offset = tape.scale(o, OFFSET_RANGE);
        let verts = tape.constant(Mat::from_points(inputs.mesh_vertices));
        let v = tape.mul_row(verts, scale);
        let v = tape.add_row(v, offset);
        let refined_vertices = tape.clamp01(v);

        // the point head sees the mesh code as a fixed input; left attached, its
        // cross-entropy swamps the mesh loss and the scale/offset head stays at identity
        let mesh_ctx = if self.detach_mesh_context { tape.constant(tape.value(mesh_global).clone()) } else { mesh_global };
        let mesh_bcast = tape.broadcast_rows(mesh_ctx, n);
        let pc_cat = tape.concat_cols(&[pc_dense, mesh_bcast]);
        let delta = self.pc_refine.forward(tape, store, pc_cat);
        let refined_logits = tape.add(inputs.raw_logits, delta);
        Ok(RefinerVars { delta, refined_logits, scale, offset, refined_vertices, pc_global, mesh_global })
    }

    /// Runs one pass and converts the result into plain values. `mesh` is the
    /// canonical mesh whose vertices get the scale/offset.
    pub fn refine(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: RefinerInputs<'_>,
        mesh: &CanonicalMesh,
    ) -> Result<RefinerOutput> {
        let vars = self.forward(tape, store, inputs)?;
        let refined_logits = NocsLogits::new(tape.value(vars.refined_logits).clone(), self.bins)?;
        let row = |v: Var| -> Vec3 {
            let m = tape.value(v);
            [m.data[0], m.data[1], m.data[2]]
        };
        Ok(RefinerOutput {
            refined_logits,
            mesh_scale: row(vars.scale),
            mesh_offset: row(vars.offset),
            refined_mesh: mesh.with_vertices(tape.value(vars.refined_vertices).to_points()),
        })
    }
}

/// `v·s + o`, clamped to the unit cube.
pub fn apply_scale_offset(vertices: &[Vec3], scale: Vec3, offset: Vec3) -> Vec<Vec3> {
    vertices
        .iter()
        .map(|v| [0, 1, 2].map(|k| (v[k] * scale[k] + offset[k]).clamp(0.0, 1.0)))
        .collect()
}

/// Mean squared vertex distance between the refined and ground-truth mesh.
pub fn mesh_l2_loss(tape: &mut Tape, refined_vertices: Var, gt: &[Vec3]) -> Result<Var> {
    if tape.value(refined_vertices).rows != gt.len() {
        return Err(Error::Alignment(format!(
            "{} refined vertices vs {} ground-truth vertices",
            tape.value(refined_vertices).rows,
            gt.len()
        )));
    }
    Ok(tape.mean_sq_row_dist(refined_vertices, Rc::new(Mat::from_points(gt))))
}

/// `(ce_loss, mesh_l2_loss)` of one refiner pass.
pub fn refiner_losses(
    tape: &mut Tape,
    vars: &RefinerVars,
    gt_coords: &NocsCoords,
    gt_mesh: &[Vec3],
    bins: usize,
) -> Result<(Var, Var)> {
    let ce = crate::fusion::nocs_classification_loss(tape, vars.refined_logits, gt_coords, bins)?;
    let l2 = mesh_l2_loss(tape, vars.refined_vertices, gt_mesh)?;
    Ok((ce, l2))
}

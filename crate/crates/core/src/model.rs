//! The full network: encoder, fusion, refiner and warp field over one pair
//! of consecutive frames.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::config::ModelConfig;
use crate::encoder::{zero_center, Encoder};
use crate::error::Result;
use crate::fusion::{EmbeddingInputs, Fusion};
use crate::geom::Vec3;
use crate::nocs::decode_argmax;
use crate::refiner::{Refiner, RefinerInputs, RefinerVars};
use crate::warpfield::WarpField;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub fusion: Fusion,
    pub refiner: Refiner,
    pub warp: WarpField,
}

/// Wall-clock time per stage of one pair, in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub encode_ms: f64,
    pub fusion_ms: f64,
    pub refine_ms: f64,
    pub warp_ms: f64,
}

impl StageTimings {
    pub fn total_ms(&self) -> f64 {
        self.encode_ms + self.fusion_ms + self.refine_ms + self.warp_ms
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PairInputs<'a> {
    /// Previous frame points (task space) and their NOCS.
    pub prev_points: &'a [Vec3],
    pub prev_nocs: &'a [Vec3],
    /// Current frame points (task space).
    pub curr_points: &'a [Vec3],
    /// Canonical mesh surface samples and vertices (NOCS).
    pub mesh_points: &'a [Vec3],
    pub mesh_vertices: &'a [Vec3],
    /// Canonical warp queries; `None` queries the refined mesh vertices.
    pub warp_queries: Option<&'a [Vec3]>,
    /// NOCS used to scatter features; `None` uses the refined prediction.
    pub scatter_nocs: Option<&'a [Vec3]>,
}

pub struct PairOutput {
    pub raw_logits: Var,
    pub refiner: RefinerVars,
    pub raw_nocs: Vec<Vec3>,
    pub refined_nocs: Vec<Vec3>,
    pub refined_vertices: Vec<Vec3>,
    /// Queries the warp field was evaluated at.
    pub queries: Vec<Vec3>,
    /// Centroid-relative warp predictions.
    pub warp: Var,
    /// Add this to `warp` to get task-space positions.
    pub curr_centroid: Vec3,
    pub timings: StageTimings,
}

impl PairOutput {
    /// Task-space positions of the warp queries.
    pub fn task_positions(&self, tape: &Tape) -> Vec<Vec3> {
        tape.value(self.warp)
            .to_points()
            .into_iter()
            .map(|p| [p[0] + self.curr_centroid[0], p[1] + self.curr_centroid[1], p[2] + self.curr_centroid[2]])
            .collect()
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &mut rng, config.encoder.clone());
        let fusion = Fusion::new(&mut store, &mut rng, config.fusion.clone())?;
        let refiner = Refiner::new(&mut store, &mut rng, config.refiner.clone(), fusion.out_dim(), config.fusion.bins)?;
        let warp = WarpField::new(&mut store, &mut rng, config.warp.clone())?;
        Ok(Self { config: config.clone(), store, encoder, fusion, refiner, warp })
    }

    pub fn bins(&self) -> usize {
        self.config.fusion.bins
    }

    pub fn forward_pair(&self, tape: &mut Tape, inputs: PairInputs<'_>) -> Result<PairOutput> {
        let store = &self.store;
        let t = Instant::now();
        let (prev_c, _) = zero_center(inputs.prev_points);
        let (curr_c, curr_centroid) = zero_center(inputs.curr_points);
        let f1 = self.encoder.forward_centered(tape, store, &prev_c)?;
        let f2 = self.encoder.forward_centered(tape, store, &curr_c)?;
        let encode_ms = ms(t);

        let t = Instant::now();
        let emb = EmbeddingInputs { prev_xyz: &prev_c, prev_nocs: inputs.prev_nocs, curr_xyz: &curr_c };
        let fused = self.fusion.forward(tape, store, f1, f2, emb)?;
        let raw_nocs = decode_argmax(tape.value(fused.logits), self.bins());
        let fusion_ms = ms(t);

        let t = Instant::now();
        let refiner = self.refiner.forward(
            tape,
            store,
            RefinerInputs {
                raw_logits: fused.logits,
                fused: fused.fused,
                xyz: &curr_c,
                raw_nocs: &raw_nocs,
                mesh_points: inputs.mesh_points,
                mesh_vertices: inputs.mesh_vertices,
            },
        )?;
        let refined_nocs = decode_argmax(tape.value(refiner.refined_logits), self.bins());
        let refined_vertices = tape.value(refiner.refined_vertices).to_points();
        let refine_ms = ms(t);

        let t = Instant::now();
        let scatter_nocs = inputs.scatter_nocs.unwrap_or(&refined_nocs);
        let queries = inputs.warp_queries.map_or_else(|| refined_vertices.clone(), <[Vec3]>::to_vec);
        let warp = self.warp.forward(tape, store, fused.fused, scatter_nocs, &queries)?;
        let warp_ms = ms(t);

        Ok(PairOutput {
            raw_logits: fused.logits,
            refiner,
            raw_nocs,
            refined_nocs,
            refined_vertices,
            queries,
            warp,
            curr_centroid,
            timings: StageTimings { encode_ms, fusion_ms, refine_ms, warp_ms },
        })
    }
}

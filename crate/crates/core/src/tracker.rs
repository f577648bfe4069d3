//! Online tracking: initialise from a first-frame pose, then carry the
//! refined NOCS prediction and canonical mesh from frame to frame.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::config::TrackConfig;
use crate::container::{self, read_faces, read_json, read_points, write_faces, write_json, write_points};
use crate::dataset::{resample_indices, PointCloudFrame, SequenceDataset};
use crate::error::{Error, Result};
use crate::eval::FrameEval;
use crate::geom::{dist, Vec3};
use crate::mesh::{eval_samples, sample_surface, CanonicalMesh};
use crate::model::{Model, PairInputs, StageTimings};
use crate::nocs::{perturb_mesh, perturb_nocs, NocsCoords, NoiseParams};
use crate::synth::Script;

pub const POSE_FORMAT_VERSION: u32 = 1;
pub const PREDICTION_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSource {
    GroundTruth,
    Perturbed,
    ExternalFile,
}

impl std::str::FromStr for InitSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground_truth" | "gt" => Ok(InitSource::GroundTruth),
            "perturbed" => Ok(InitSource::Perturbed),
            "external_file" | "file" => Ok(InitSource::ExternalFile),
            other => Err(Error::Config(format!("unknown init mode {other:?}"))),
        }
    }
}

/// First-frame NOCS (aligned with the first frame's points) and a rough
/// canonical mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct InitPose {
    pub source: InitSource,
    pub nocs: NocsCoords,
    pub mesh: CanonicalMesh,
}

impl InitPose {
    pub fn ground_truth(first: &PointCloudFrame, mesh: &CanonicalMesh) -> Result<Self> {
        Ok(Self { source: InitSource::GroundTruth, nocs: first.gt_nocs()?.clone(), mesh: mesh.clone() })
    }

    /// Ground truth passed through the NOCS and mesh perturbations with a
    /// generator seeded by `seed`.
    pub fn perturbed(first: &PointCloudFrame, mesh: &CanonicalMesh, noise: &NoiseParams, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nocs = perturb_nocs(first.gt_nocs()?, noise, &mut rng)?;
        let mesh = perturb_mesh(mesh, &noise.s_mesh, &mut rng);
        Ok(Self { source: InitSource::Perturbed, nocs, mesh })
    }

    /// Reads a pose written by some upstream system in the exchange format.
    pub fn from_file(dir: &Path) -> Result<Self> {
        let f = PoseFile::read(dir)?;
        Ok(Self { source: InitSource::ExternalFile, nocs: f.nocs, mesh: f.mesh })
    }
}

#[derive(Serialize, Deserialize)]
struct PoseManifest {
    format_version: u32,
    num_points: usize,
    num_vertices: usize,
    num_faces: usize,
}

/// First-frame pose exchange directory:
///
/// ```text
/// manifest.json  points.bin  nocs.bin  mesh_verts.bin  mesh_faces.bin
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct PoseFile {
    pub points: Vec<Vec3>,
    pub nocs: NocsCoords,
    pub mesh: CanonicalMesh,
}

impl PoseFile {
    pub fn write(&self, dir: &Path) -> Result<()> {
        if self.points.len() != self.nocs.len() {
            return Err(Error::Alignment(format!("{} points vs {} NOCS rows", self.points.len(), self.nocs.len())));
        }
        container::create_dir_all(dir)?;
        write_json(
            &dir.join("manifest.json"),
            &PoseManifest {
                format_version: POSE_FORMAT_VERSION,
                num_points: self.points.len(),
                num_vertices: self.mesh.vertices.len(),
                num_faces: self.mesh.faces.len(),
            },
        )?;
        write_points(&dir.join("points.bin"), &self.points)?;
        write_points(&dir.join("nocs.bin"), self.nocs.as_slice())?;
        write_points(&dir.join("mesh_verts.bin"), &self.mesh.vertices)?;
        write_faces(&dir.join("mesh_faces.bin"), &self.mesh.faces)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let version = container::manifest_version(&path)?;
        if version != POSE_FORMAT_VERSION {
            return Err(Error::Version { path, found: version, expected: POSE_FORMAT_VERSION });
        }
        let m: PoseManifest = read_json(&path)?;
        let points = read_points(&dir.join("points.bin"), Some(m.num_points))?;
        let nocs_path = dir.join("nocs.bin");
        let nocs = NocsCoords::new(read_points(&nocs_path, Some(m.num_points))?)
            .map_err(|e| Error::format(&nocs_path, e.to_string()))?;
        let vertices = read_points(&dir.join("mesh_verts.bin"), Some(m.num_vertices))?;
        let faces = read_faces(&dir.join("mesh_faces.bin"), Some(m.num_faces))?;
        let mesh = CanonicalMesh::new(vertices, faces).map_err(|e| Error::format(dir.join("mesh_verts.bin"), e.to_string()))?;
        Ok(Self { points, nocs, mesh })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub pc_samples: usize,
    pub mesh_samples: usize,
    /// Frames (after the first) whose output refines the canonical mesh.
    pub mesh_refine_budget: usize,
    /// Per-sequence resampling seed.
    pub seed: u64,
}

impl TrackerConfig {
    /// Resolves the mesh refinement budget from the script family unless the
    /// config pins it.
    pub fn from_track(track: &TrackConfig, script: Option<Script>, seed: u64) -> Self {
        let budget = track
            .mesh_refine_budget
            .unwrap_or_else(|| script.map_or(1, |s| s.family().mesh_refine_budget()));
        Self { pc_samples: track.pc_samples, mesh_samples: track.mesh_samples, mesh_refine_budget: budget, seed }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerState {
    pub prev_points: Vec<Vec3>,
    pub prev_nocs: NocsCoords,
    /// Shared so that a frozen mesh is literally the same object frame to frame.
    pub canonical_mesh: Arc<CanonicalMesh>,
    pub frame_index: usize,
    pub mesh_refine_budget: usize,
}

/// Per-point output of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct NocsPrediction {
    /// The resampled input points.
    pub points: Vec<Vec3>,
    /// Refined, decoded NOCS.
    pub nocs: Vec<Vec3>,
    /// Stage-one decoded NOCS, before refinement.
    pub raw_nocs: Vec<Vec3>,
    /// Ground-truth labels of `points` when the frame carries them.
    pub gt_nocs: Option<Vec<Vec3>>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub prediction: NocsPrediction,
    pub canonical_mesh: Arc<CanonicalMesh>,
    /// Task-space vertices of `canonical_mesh` (same faces).
    pub task_mesh: Vec<Vec3>,
    pub timings: StageTimings,
    pub state: TrackerState,
}

/// Derives the seed of the `k`-th item (frame, sequence) from a run seed.
pub fn mix(seed: u64, k: u64) -> u64 {
    seed ^ k.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Builds the frame-0 state. The first frame and its pose NOCS are resampled
/// jointly to `pc_samples` points.
pub fn init(first: &PointCloudFrame, pose: &InitPose, config: &TrackerConfig) -> Result<TrackerState> {
    if pose.nocs.len() != first.points.len() {
        return Err(Error::Alignment(format!(
            "first-frame pose has {} NOCS rows but the frame has {} points",
            pose.nocs.len(),
            first.points.len()
        )));
    }
    if first.points.is_empty() {
        return Err(Error::InvalidInput("first frame has no points".into()));
    }
    pose.mesh.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0));
    let idx = resample_indices(first.points.len(), config.pc_samples, &mut rng);
    Ok(TrackerState {
        prev_points: idx.iter().map(|&i| first.points[i]).collect(),
        prev_nocs: pose.nocs.select(&idx),
        canonical_mesh: Arc::new(pose.mesh.clone()),
        frame_index: 0,
        mesh_refine_budget: config.mesh_refine_budget,
    })
}

/// Tracks one frame. Pure: `state` is not modified and the same inputs give
/// the same outputs.
pub fn step(state: &TrackerState, frame: &PointCloudFrame, model: &Model, config: &TrackerConfig) -> Result<StepOutput> {
    if frame.points.is_empty() {
        return Err(Error::InvalidInput("frame has no points".into()));
    }
    if state.prev_nocs.len() != state.prev_points.len() {
        return Err(Error::Alignment("tracker state NOCS and points differ in length".into()));
    }
    let next_index = state.frame_index + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, next_index as u64));
    let curr = frame.resample(config.pc_samples, &mut rng);
    let mesh = &state.canonical_mesh;
    // a degenerate (zero-area) refined mesh falls back to its vertices
    let mesh_points = match sample_surface(&mesh.vertices, &mesh.faces, config.mesh_samples, &mut rng) {
        Ok(samples) => eval_samples(&samples, &mesh.vertices, &mesh.faces),
        Err(_) => mesh.vertices.clone(),
    };
    let refining = state.mesh_refine_budget > 0;

    let mut tape = Tape::new();
    let out = model.forward_pair(
        &mut tape,
        PairInputs {
            prev_points: &state.prev_points,
            prev_nocs: state.prev_nocs.as_slice(),
            curr_points: &curr.points,
            mesh_points: &mesh_points,
            mesh_vertices: &mesh.vertices,
            // a frozen mesh is warped as is
            warp_queries: (!refining).then_some(mesh.vertices.as_slice()),
            scatter_nocs: None,
        },
    )?;
    let task_mesh = out.task_positions(&tape);
    let canonical_mesh =
        if refining { Arc::new(mesh.with_vertices(out.refined_vertices.clone())) } else { Arc::clone(mesh) };
    let refined = NocsCoords::new(out.refined_nocs.clone())?;
    let state = TrackerState {
        prev_points: curr.points.clone(),
        prev_nocs: refined,
        canonical_mesh: Arc::clone(&canonical_mesh),
        frame_index: next_index,
        mesh_refine_budget: state.mesh_refine_budget.saturating_sub(1),
    };
    Ok(StepOutput {
        prediction: NocsPrediction {
            points: curr.points,
            nocs: out.refined_nocs,
            raw_nocs: out.raw_nocs,
            gt_nocs: curr.gt_nocs.map(NocsCoords::into_inner),
        },
        canonical_mesh,
        task_mesh,
        timings: out.timings,
        state,
    })
}

/// One tracked frame as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackedFrame {
    /// Index into the tracked sequence.
    pub frame: usize,
    pub prediction: NocsPrediction,
    pub canonical_vertices: Vec<Vec3>,
    pub task_vertices: Vec<Vec3>,
    pub timings: StageTimings,
}

/// Tracker output for frames `1..T` of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackRun {
    pub seq_id: String,
    pub init: InitSource,
    pub faces: Vec<[u32; 3]>,
    pub frames: Vec<TrackedFrame>,
}

#[derive(Serialize, Deserialize)]
struct PredictionManifest {
    format_version: u32,
    seq_id: String,
    init: InitSource,
    num_vertices: usize,
    num_faces: usize,
    frames: Vec<usize>,
    points_per_frame: Vec<usize>,
    has_gt_nocs: bool,
    timings: Vec<StageTimings>,
}

impl TrackRun {
    pub fn mean_timings(&self) -> StageTimings {
        let n = self.frames.len().max(1) as f64;
        let mut t = StageTimings::default();
        for f in &self.frames {
            t.encode_ms += f.timings.encode_ms / n;
            t.fusion_ms += f.timings.fusion_ms / n;
            t.refine_ms += f.timings.refine_ms / n;
            t.warp_ms += f.timings.warp_ms / n;
        }
        t
    }

    /// Pairs every tracked frame with the ground truth of `gt` (the sequence
    /// that was tracked).
    pub fn frame_evals(&self, gt: &SequenceDataset) -> Result<Vec<FrameEval>> {
        self.frames
            .iter()
            .map(|f| {
                let g = gt.frames.get(f.frame).ok_or_else(|| {
                    Error::Alignment(format!("prediction for frame {} but the sequence has {}", f.frame, gt.len()))
                })?;
                let gt_nocs = f
                    .prediction
                    .gt_nocs
                    .clone()
                    .ok_or_else(|| Error::InvalidInput("predictions carry no ground-truth NOCS".into()))?;
                Ok(FrameEval {
                    pred_nocs: f.prediction.nocs.clone(),
                    gt_nocs,
                    pred_canonical: f.canonical_vertices.clone(),
                    pred_task: f.task_vertices.clone(),
                    gt_canonical: gt.canonical_mesh.vertices.clone(),
                    gt_task: g.mesh_vertices()?.to_vec(),
                })
            })
            .collect()
    }

    fn file(dir: &Path, t: usize, field: &str) -> PathBuf {
        dir.join("frames").join(format!("{t}.{field}.bin"))
    }

    /// Writes the run with the dataset container conventions.
    pub fn save(&self, dir: &Path) -> Result<()> {
        container::create_dir_all(&dir.join("frames"))?;
        let has_gt = self.frames.iter().all(|f| f.prediction.gt_nocs.is_some());
        let manifest = PredictionManifest {
            format_version: PREDICTION_FORMAT_VERSION,
            seq_id: self.seq_id.clone(),
            init: self.init,
            num_vertices: self.frames.first().map_or(0, |f| f.canonical_vertices.len()),
            num_faces: self.faces.len(),
            frames: self.frames.iter().map(|f| f.frame).collect(),
            points_per_frame: self.frames.iter().map(|f| f.prediction.points.len()).collect(),
            has_gt_nocs: has_gt,
            timings: self.frames.iter().map(|f| f.timings).collect(),
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
        write_faces(&dir.join("mesh_faces.bin"), &self.faces)?;
        for f in &self.frames {
            write_points(&Self::file(dir, f.frame, "points"), &f.prediction.points)?;
            write_points(&Self::file(dir, f.frame, "nocs"), &f.prediction.nocs)?;
            write_points(&Self::file(dir, f.frame, "raw_nocs"), &f.prediction.raw_nocs)?;
            if let (true, Some(g)) = (has_gt, &f.prediction.gt_nocs) {
                write_points(&Self::file(dir, f.frame, "gt_nocs"), g)?;
            }
            write_points(&Self::file(dir, f.frame, "canonical_mesh"), &f.canonical_vertices)?;
            write_points(&Self::file(dir, f.frame, "task_mesh"), &f.task_vertices)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let version = container::manifest_version(&path)?;
        if version != PREDICTION_FORMAT_VERSION {
            return Err(Error::Version { path, found: version, expected: PREDICTION_FORMAT_VERSION });
        }
        let m: PredictionManifest = read_json(&path)?;
        if m.points_per_frame.len() != m.frames.len() || m.timings.len() != m.frames.len() {
            return Err(Error::format(&path, "per-frame lists differ in length"));
        }
        let faces = read_faces(&dir.join("mesh_faces.bin"), Some(m.num_faces))?;
        let mut frames = Vec::with_capacity(m.frames.len());
        for (k, &t) in m.frames.iter().enumerate() {
            let n = Some(m.points_per_frame[k]);
            let v = Some(m.num_vertices);
            frames.push(TrackedFrame {
                frame: t,
                prediction: NocsPrediction {
                    points: read_points(&Self::file(dir, t, "points"), n)?,
                    nocs: read_points(&Self::file(dir, t, "nocs"), n)?,
                    raw_nocs: read_points(&Self::file(dir, t, "raw_nocs"), n)?,
                    gt_nocs: if m.has_gt_nocs { Some(read_points(&Self::file(dir, t, "gt_nocs"), n)?) } else { None },
                },
                canonical_vertices: read_points(&Self::file(dir, t, "canonical_mesh"), v)?,
                task_vertices: read_points(&Self::file(dir, t, "task_mesh"), v)?,
                timings: m.timings[k],
            });
        }
        Ok(Self { seq_id: m.seq_id, init: m.init, faces, frames })
    }
}

/// Tracks frames `1..T` of `seq` starting from `pose` on frame 0.
pub fn track_sequence(model: &Model, seq: &SequenceDataset, pose: &InitPose, config: &TrackerConfig) -> Result<TrackRun> {
    seq.validate()?;
    let mut state = init(&seq.frames[0], pose, config)?;
    let mut frames = Vec::with_capacity(seq.len() - 1);
    for (t, frame) in seq.frames.iter().enumerate().skip(1) {
        let out = step(&state, frame, model, config)?;
        frames.push(TrackedFrame {
            frame: t,
            prediction: out.prediction,
            canonical_vertices: out.canonical_mesh.vertices.clone(),
            task_vertices: out.task_mesh,
            timings: out.timings,
        });
        state = out.state;
    }
    Ok(TrackRun { seq_id: seq.manifest.seq_id.clone(), init: pose.source, faces: seq.canonical_mesh.faces.clone(), frames })
}

/// Keeps frames `0, s, 2s, ..` with `s = 1/keep_ratio`.
pub fn subsample_frames(seq: &SequenceDataset, keep_ratio: f64) -> Result<SequenceDataset> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::InvalidInput(format!("keep ratio must be in (0, 1], got {keep_ratio}")));
    }
    let stride = (1.0 / keep_ratio).round();
    if ((1.0 / keep_ratio) - stride).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("keep ratio {keep_ratio} is not 1/n for an integer n")));
    }
    let idx: Vec<usize> = (0..seq.len()).step_by(stride as usize).collect();
    if idx.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "keeping 1/{stride} of {} frames leaves {} frame(s); tracking needs 2",
            seq.len(),
            idx.len()
        )));
    }
    Ok(seq.select_frames(&idx))
}

/// Indices of the non-static frames: frame 0, then every frame whose mean
/// ground-truth vertex displacement from the last kept frame is at least
/// `threshold` meters.
pub fn moving_frames(seq: &SequenceDataset, threshold: f64) -> Result<Vec<usize>> {
    let mut keep = vec![0];
    let mut last = seq.frames.first().ok_or_else(|| Error::InvalidInput("empty sequence".into()))?.mesh_vertices()?;
    for (t, f) in seq.frames.iter().enumerate().skip(1) {
        let v = f.mesh_vertices()?;
        let mean = v.iter().zip(last).map(|(&a, &b)| dist(a, b)).sum::<f64>() / v.len().max(1) as f64;
        if mean >= threshold {
            keep.push(t);
            last = v;
        }
    }
    Ok(keep)
}

pub fn remove_static_frames(seq: &SequenceDataset, threshold: f64) -> Result<SequenceDataset> {
    Ok(seq.select_frames(&moving_frames(seq, threshold)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::synth::{generate_sequence, make_template, Category, GeneratorOptions, SequenceMeta};
    use rand::Rng;

    fn seq(frames: usize) -> SequenceDataset {
        let t = make_template(Category::Shirt, 8).unwrap();
        let opts = GeneratorOptions { points_per_frame: 60, image_resolution: 32, ..Default::default() };
        generate_sequence(&t, Script::FoldLr, frames, 4, &opts, &SequenceMeta::default()).unwrap()
    }

    fn cfg(budget: usize) -> TrackerConfig {
        TrackerConfig { pc_samples: 40, mesh_samples: 40, mesh_refine_budget: budget, seed: 11 }
    }

    /// Random weights in the pc and mesh refiner heads, so refinement is not
    /// the identity.
    fn model() -> Model {
        let mut m = Model::new(&ModelConfig::scaled(16, 8), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ids: Vec<_> = m
            .store
            .iter()
            .filter(|(_, p)| p.name.starts_with("refiner.pc_refine") || p.name.starts_with("refiner.mesh_refine"))
            .map(|(id, p)| (id, if p.name.starts_with("refiner.pc") { 0.5 } else { 0.05 }))
            .collect();
        for (id, r) in ids {
            for v in &mut m.store.value_mut(id).data {
                *v = rng.random_range(-r..r);
            }
        }
        m
    }

    #[test]
    fn ground_truth_init_passes_labels_through() {
        let s = seq(3);
        let pose = InitPose::ground_truth(&s.frames[0], &s.canonical_mesh).unwrap();
        assert_eq!(&pose.nocs, s.frames[0].gt_nocs().unwrap());
        let st = init(&s.frames[0], &pose, &TrackerConfig { pc_samples: 60, ..cfg(1) }).unwrap();
        assert_eq!(st.prev_points, s.frames[0].points);
        assert_eq!(&st.prev_nocs, s.frames[0].gt_nocs().unwrap());
        assert_eq!(st.frame_index, 0);
        assert_eq!(st.mesh_refine_budget, 1);
    }

    #[test]
    fn perturbed_init_reproduces_the_perturbation() {
        let s = seq(3);
        let noise = NoiseParams::level(crate::nocs::NoiseLevel::X1);
        let pose = InitPose::perturbed(&s.frames[0], &s.canonical_mesh, &noise, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let expected = perturb_nocs(s.frames[0].gt_nocs().unwrap(), &noise, &mut rng).unwrap();
        assert_eq!(pose.nocs, expected);
        assert_eq!(pose.mesh, perturb_mesh(&s.canonical_mesh, &noise.s_mesh, &mut rng));
        assert_eq!(pose.source, InitSource::Perturbed);
    }

    #[test]
    fn pose_file_round_trip_and_alignment() {
        let s = seq(3);
        let f0 = &s.frames[0];
        let dir = tempfile::tempdir().unwrap();
        let pf = PoseFile { points: f0.points.clone(), nocs: f0.gt_nocs().unwrap().clone(), mesh: s.canonical_mesh.clone() };
        pf.write(dir.path()).unwrap();
        assert_eq!(PoseFile::read(dir.path()).unwrap(), pf);
        let pose = InitPose::from_file(dir.path()).unwrap();
        assert_eq!(pose.source, InitSource::ExternalFile);
        init(f0, &pose, &cfg(1)).unwrap();

        let short = PoseFile { points: f0.points[..10].to_vec(), nocs: f0.gt_nocs().unwrap().select(&(0..10).collect::<Vec<_>>()), ..pf };
        short.write(dir.path()).unwrap();
        let pose = InitPose::from_file(dir.path()).unwrap();
        assert!(matches!(init(f0, &pose, &cfg(1)), Err(Error::Alignment(_))));
        assert!(InitPose::from_file(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn step_is_pure_and_feeds_refined_nocs_forward() {
        let s = seq(3);
        let m = model();
        let c = cfg(1);
        let pose = InitPose::ground_truth(&s.frames[0], &s.canonical_mesh).unwrap();
        let st = init(&s.frames[0], &pose, &c).unwrap();
        let copy = st.clone();
        let a = step(&st, &s.frames[1], &m, &c).unwrap();
        assert_eq!(st, copy);
        let b = step(&copy, &s.frames[1], &m, &c).unwrap();
        assert_eq!(a.prediction, b.prediction);
        assert_eq!(a.task_mesh, b.task_mesh);
        assert_eq!(a.state, b.state);
        assert_eq!(a.state.prev_nocs.as_slice(), a.prediction.nocs.as_slice());
        assert_ne!(a.prediction.nocs, a.prediction.raw_nocs);
        let c2 = step(&a.state, &s.frames[2], &m, &c).unwrap();
        assert_eq!((a.state.frame_index, c2.state.frame_index), (1, 2));
    }

    #[test]
    fn mesh_freezes_after_budget() {
        let s = seq(5);
        let m = model();
        let c = cfg(1);
        let pose = InitPose::ground_truth(&s.frames[0], &s.canonical_mesh).unwrap();
        let mut st = init(&s.frames[0], &pose, &c).unwrap();
        let first = step(&st, &s.frames[1], &m, &c).unwrap();
        assert_ne!(*first.canonical_mesh, s.canonical_mesh);
        assert_eq!(first.state.mesh_refine_budget, 0);
        st = first.state.clone();
        for f in &s.frames[2..] {
            let out = step(&st, f, &m, &c).unwrap();
            assert!(Arc::ptr_eq(&out.canonical_mesh, &first.canonical_mesh));
            assert_eq!(out.task_mesh.len(), s.canonical_mesh.vertices.len());
            st = out.state;
        }
    }

    #[test]
    fn track_run_save_load_and_faces() {
        let s = seq(4);
        let m = model();
        let pose = InitPose::ground_truth(&s.frames[0], &s.canonical_mesh).unwrap();
        let mut run = track_sequence(&m, &s, &pose, &cfg(2)).unwrap();
        assert_eq!(run.frames.iter().map(|f| f.frame).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(run.faces, s.canonical_mesh.faces);
        assert!(run.frames.iter().all(|f| f.timings.total_ms() > 0.0));
        assert_eq!(run.frame_evals(&s).unwrap().len(), 3);
        for f in &mut run.frames {
            for p in [&mut f.prediction.points, &mut f.prediction.nocs, &mut f.prediction.raw_nocs, &mut f.canonical_vertices, &mut f.task_vertices] {
                crate::container::f32_round_points(p);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        run.save(dir.path()).unwrap();
        assert_eq!(TrackRun::load(dir.path()).unwrap(), run);
    }

    #[test]
    fn subsample_stride() {
        let s = seq(10);
        let idx = |r| {
            subsample_frames(&s, r)
                .unwrap()
                .frames
                .iter()
                .map(|f| s.frames.iter().position(|g| g == f).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(idx(0.5), vec![0, 2, 4, 6, 8]);
        assert_eq!(idx(1.0 / 6.0), vec![0, 6]);
        assert_eq!(subsample_frames(&s, 1.0).unwrap(), s);
        assert!(subsample_frames(&seq(3), 0.125).is_err());
        assert!(subsample_frames(&s, 0.3).is_err());
    }

    #[test]
    fn static_frames_are_dropped() {
        let mut s = seq(4);
        s.frames[2] = s.frames[1].clone();
        assert_eq!(moving_frames(&s, 1e-3).unwrap(), vec![0, 1, 3]);
        assert_eq!(remove_static_frames(&s, 1e-3).unwrap().len(), 3);
        assert_eq!(moving_frames(&s, 1e9).unwrap(), vec![0]);
    }
}

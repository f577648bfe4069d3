//! Procedural garment sequences with ground-truth NOCS labels.
//!
//! Templates are schematic flat garments on a regular grid in NOCS. Scripts
//! deform the task-space copy of the template over time (folds about a
//! crease, smooth crumpling, flattening), and every frame is rendered into a
//! partial point cloud by [`crate::render`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::f32_round_points;
use crate::config::DataConfig;
use crate::dataset::{write_dataset, PointCloudFrame, SequenceDataset, SequenceManifest, SplitIndex, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::geom::{add, rotate_about, Vec3};
use crate::mesh::CanonicalMesh;
use crate::nocs::NocsCoords;
use crate::render::{render_partial, Camera, RenderOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    Shirt,
    Pants,
    Top,
    Skirt,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Shirt, Category::Pants, Category::Top, Category::Skirt];
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Shirt => "Shirt",
            Category::Pants => "Pants",
            Category::Top => "Top",
            Category::Skirt => "Skirt",
        };
        f.write_str(s)
    }
}

impl FromStr for Category {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown category {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Script {
    FoldLr,
    FoldUd,
    CrumpleLift,
    FlingFlatten,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Folding,
    Flattening,
}

impl Script {
    pub const ALL: [Script; 4] = [Script::FoldLr, Script::FoldUd, Script::CrumpleLift, Script::FlingFlatten];

    pub fn id(self) -> &'static str {
        match self {
            Script::FoldLr => "fold_lr",
            Script::FoldUd => "fold_ud",
            Script::CrumpleLift => "crumple_lift",
            Script::FlingFlatten => "fling_flatten",
        }
    }

    pub fn family(self) -> TaskFamily {
        match self {
            Script::FoldLr | Script::FoldUd => TaskFamily::Folding,
            Script::CrumpleLift | Script::FlingFlatten => TaskFamily::Flattening,
        }
    }
}

impl TaskFamily {
    /// Frames during which the mesh refiner stays enabled at inference.
    pub fn mesh_refine_budget(self) -> usize {
        match self {
            TaskFamily::Folding => 1,
            TaskFamily::Flattening => 15,
        }
    }
}

impl fmt::Display for Script {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Script {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Script::ALL
            .into_iter()
            .find(|sc| sc.id() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown script {s:?}")))
    }
}

/// NOCS margin around the template footprint; leaves room for the 1x mesh
/// scale perturbation without clamping.
pub const TEMPLATE_MARGIN: f64 = 0.1;

/// Builds the flat template of a category on an `r×r` cell grid
/// (`r = resolution`, `q = r/4` rounded down, `h = r/2` rounded down).
///
/// Vertex counts:
/// - Shirt (trunk + sleeves): `(r−2q+1)(r+1) + (r+1)(q+1) − (r−2q+1)(q+1)`
/// - Pants (waist + two legs): `(r−2q+1)(q+1) + 2(h−q)(r−q)`
/// - Top (trunk only): `(r−2q+1)(r+1)`
/// - Skirt (flared lower half + waist): `(r+1)(h+1) + (r−2q+1)(r−h+1) − (r−2q+1)`
///
/// All templates are mirror-symmetric about NOCS `x = 0.5` and lie in the
/// plane `z = 0.5`.
pub fn make_template(category: Category, resolution: usize) -> Result<CanonicalMesh> {
    if resolution < 8 {
        return Err(Error::InvalidInput(format!("template resolution must be >= 8, got {resolution}")));
    }
    let r = resolution;
    let q = r / 4;
    let h = r / 2;
    let inside = |i: usize, j: usize| -> bool {
        match category {
            Category::Shirt => (q..r - q).contains(&i) || j >= r - q,
            Category::Pants => {
                let waist = j >= r - q && (q..r - q).contains(&i);
                let legs = j < r - q && ((q..h - 1).contains(&i) || (r + 1 - h..r - q).contains(&i));
                waist || legs
            }
            Category::Top => (q..r - q).contains(&i),
            Category::Skirt => j < h || (q..r - q).contains(&i),
        }
    };
    let mut index = vec![u32::MAX; (r + 1) * (r + 1)];
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let span = 1.0 - 2.0 * TEMPLATE_MARGIN;
    let mut vid = |i: usize, j: usize, vertices: &mut Vec<Vec3>| -> u32 {
        let slot = &mut index[j * (r + 1) + i];
        if *slot == u32::MAX {
            *slot = vertices.len() as u32;
            vertices.push([
                TEMPLATE_MARGIN + span * i as f64 / r as f64,
                TEMPLATE_MARGIN + span * j as f64 / r as f64,
                0.5,
            ]);
        }
        *slot
    };
    for j in 0..r {
        for i in 0..r {
            if !inside(i, j) {
                continue;
            }
            let a = vid(i, j, &mut vertices);
            let b = vid(i + 1, j, &mut vertices);
            let c = vid(i + 1, j + 1, &mut vertices);
            let d = vid(i, j + 1, &mut vertices);
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    CanonicalMesh::new(vertices, faces)
}

/// Closed-form vertex count of [`make_template`].
pub fn template_vertex_count(category: Category, resolution: usize) -> usize {
    let r = resolution;
    let q = r / 4;
    let h = r / 2;
    match category {
        Category::Shirt => (r - 2 * q + 1) * (r + 1) + (r + 1) * (q + 1) - (r - 2 * q + 1) * (q + 1),
        Category::Pants => (r - 2 * q + 1) * (q + 1) + 2 * (h - q) * (r - q),
        Category::Top => (r - 2 * q + 1) * (r + 1),
        Category::Skirt => (r + 1) * (h + 1) + (r - 2 * q + 1) * (r - h + 1) - (r - 2 * q + 1),
    }
}

/// One garment instance: a category template with its own NOCS proportions
/// and physical size.
#[derive(Clone, Debug)]
pub struct Instance {
    pub id: String,
    pub category: Category,
    pub template: CanonicalMesh,
    /// Task-space meters per NOCS unit.
    pub size_m: f64,
}

impl Instance {
    pub fn generate(category: Category, resolution: usize, index: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1257_a11c_e000 ^ (index as u64).wrapping_mul(0x9e37_79b9));
        let base = make_template(category, resolution)?;
        let sx = rng.random_range(0.85..=1.0);
        let sy = rng.random_range(0.85..=1.0);
        let size_m = rng.random_range(0.5..=0.6);
        let template = base.with_vertices(
            base.vertices.iter().map(|v| [0.5 + (v[0] - 0.5) * sx, 0.5 + (v[1] - 0.5) * sy, v[2]]).collect(),
        );
        Ok(Self { id: format!("{}_{index:04}", category.to_string().to_lowercase()), category, template, size_m })
    }
}

/// Identity of one generated sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub category: Category,
    pub seq_id: String,
    pub instance_id: String,
    /// Task-space meters per NOCS unit.
    pub size_m: f64,
}

impl SequenceMeta {
    pub fn for_instance(instance: &Instance, seq_id: impl Into<String>) -> Self {
        Self { category: instance.category, seq_id: seq_id.into(), instance_id: instance.id.clone(), size_m: instance.size_m }
    }
}

impl Default for SequenceMeta {
    fn default() -> Self {
        Self { category: Category::Shirt, seq_id: "seq_0000".into(), instance_id: "shirt_0000".into(), size_m: 0.55 }
    }
}

/// Rendering and scripting parameters shared by every sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorOptions {
    pub cameras: usize,
    pub camera_distance: f64,
    pub camera_elevation_deg: f64,
    pub image_resolution: usize,
    pub points_per_frame: usize,
    pub frame_rate: f64,
    /// Random yaw/translation of the garment on the table.
    pub placement_jitter: bool,
    /// Vertical gap between stacked layers after a fold (meters).
    pub layer_offset: f64,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        Self {
            cameras: 4,
            camera_distance: 1.2,
            camera_elevation_deg: 55.0,
            image_resolution: 96,
            points_per_frame: 4000,
            frame_rate: 10.0,
            placement_jitter: true,
            layer_offset: 2e-3,
        }
    }
}

impl GeneratorOptions {
    pub fn camera_rig(&self) -> Vec<Camera> {
        Camera::ring(self.cameras, [0.0, 0.0, 0.05], self.camera_distance, self.camera_elevation_deg, self.image_resolution)
    }
}

/// Rigid placement of the garment's local frame on the table.
#[derive(Clone, Copy, Debug)]
struct Placement {
    yaw: f64,
    offset: Vec3,
}

impl Placement {
    fn apply(&self, p: Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        add([c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]], self.offset)
    }
}

struct Bump {
    center: [f64; 2],
    sigma: f64,
    disp: Vec3,
}

/// Smooth displacement field made of Gaussian bumps plus an in-plane pull
/// toward a gather point.
struct CrumpleField {
    bumps: Vec<Bump>,
    gather: [f64; 2],
    contraction: f64,
}

impl CrumpleField {
    fn random<R: Rng>(rng: &mut R, half_extent: f64) -> Self {
        let bumps = (0..5)
            .map(|_| Bump {
                center: [rng.random_range(-half_extent..half_extent), rng.random_range(-half_extent..half_extent)],
                sigma: rng.random_range(0.06..0.12),
                disp: [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(0.02..0.12)],
            })
            .collect();
        let g = 0.3 * half_extent;
        Self {
            bumps,
            gather: [rng.random_range(-g..g), rng.random_range(-g..g)],
            contraction: rng.random_range(0.2..0.35),
        }
    }

    fn displacement(&self, p: Vec3) -> Vec3 {
        let mut d = [
            (self.gather[0] - p[0]) * self.contraction,
            (self.gather[1] - p[1]) * self.contraction,
            0.0,
        ];
        for b in &self.bumps {
            let r2 = (p[0] - b.center[0]).powi(2) + (p[1] - b.center[1]).powi(2);
            let w = (-r2 / (2.0 * b.sigma * b.sigma)).exp();
            for k in 0..3 {
                d[k] += w * b.disp[k];
            }
        }
        d
    }
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Task-space vertex positions of every frame, before placement is applied.
fn local_frames<R: Rng>(template: &CanonicalMesh, script: Script, frames: usize, size_m: f64, layer_offset: f64, rng: &mut R) -> Vec<Vec<Vec3>> {
    let flat: Vec<Vec3> = template
        .vertices
        .iter()
        .map(|v| [(v[0] - 0.5) * size_m, (v[1] - 0.5) * size_m, (v[2] - 0.5) * size_m])
        .collect();
    let hinge = 0.5 * layer_offset;
    let field = CrumpleField::random(rng, 0.4 * size_m);
    (0..frames)
        .map(|t| {
            let alpha = smoothstep(t as f64 / (frames - 1) as f64);
            match script {
                Script::FoldLr | Script::FoldUd => {
                    let (axis_coord, axis): (usize, Vec3) =
                        if script == Script::FoldLr { (0, [0.0, -1.0, 0.0]) } else { (1, [1.0, 0.0, 0.0]) };
                    let angle = std::f64::consts::PI * alpha;
                    template
                        .vertices
                        .iter()
                        .zip(&flat)
                        .map(|(nocs, &p)| {
                            if nocs[axis_coord] > 0.5 {
                                rotate_about(p, [0.0, 0.0, hinge], axis, angle)
                            } else {
                                p
                            }
                        })
                        .collect()
                }
                Script::CrumpleLift | Script::FlingFlatten => {
                    let amount = if script == Script::CrumpleLift { alpha } else { 1.0 - alpha };
                    flat.iter()
                        .map(|&p| {
                            let d = field.displacement(p);
                            let q = add(p, d.map(|v| v * amount));
                            [q[0], q[1], q[2].max(0.0)]
                        })
                        .collect()
                }
            }
        })
        .collect()
}

/// Generates one scripted manipulation sequence of `frames` frames.
pub fn generate_sequence(
    template: &CanonicalMesh,
    script: Script,
    frames: usize,
    seed: u64,
    opts: &GeneratorOptions,
    meta: &SequenceMeta,
) -> Result<SequenceDataset> {
    if frames < 2 {
        return Err(Error::InvalidInput(format!("a sequence needs at least 2 frames, got {frames}")));
    }
    template.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let placement = if opts.placement_jitter {
        Placement {
            yaw: rng.random_range(-10f64..10.0).to_radians(),
            offset: [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.0],
        }
    } else {
        Placement { yaw: 0.0, offset: [0.0; 3] }
    };
    let local = local_frames(template, script, frames, meta.size_m, opts.layer_offset, &mut rng);
    let cameras = opts.camera_rig();
    let render_opts = RenderOptions::default();
    let mut out_frames = Vec::with_capacity(frames);
    for verts in local {
        let mut task: Vec<Vec3> = verts.into_iter().map(|p| placement.apply(p)).collect();
        f32_round_points(&mut task);
        let view = render_partial(
            &task,
            &template.faces,
            &template.vertices,
            &cameras,
            opts.points_per_frame,
            &render_opts,
            &mut rng,
        )?;
        let mut points = view.points;
        let mut nocs = view.nocs;
        f32_round_points(&mut points);
        f32_round_points(&mut nocs);
        out_frames.push(PointCloudFrame {
            points,
            gt_nocs: Some(NocsCoords::new(nocs)?),
            mesh_vertices: Some(task),
        });
    }
    let mut canonical = template.clone();
    f32_round_points(&mut canonical.vertices);
    let manifest = SequenceManifest::new(
        meta.category,
        &meta.seq_id,
        &meta.instance_id,
        script.id(),
        seed,
        opts.cameras,
        opts.frame_rate,
        &canonical,
        &out_frames,
    );
    Ok(SequenceDataset { manifest, canonical_mesh: canonical, frames: out_frames })
}

/// What [`generate_dataset`] wrote.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSummary {
    pub splits: SplitIndex,
    pub sequences: usize,
    pub frames: usize,
}

impl DatasetSummary {
    pub fn count(&self, split: &str) -> usize {
        self.splits.split(split).len()
    }
}

/// Sizes of the train/val/test instance groups for `n` instances.
fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || !(total > 0.0) {
        return Err(Error::Config(format!("invalid split ratios {ratios:?}")));
    }
    let train = ((n as f64) * ratios[0] / total).round() as usize;
    let val = (((n as f64) * ratios[1] / total).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    Ok([train, val, n - train - val])
}

/// Generates every (category, instance, script, repeat) sequence of `cfg`
/// under `root` and writes an instance-disjoint `splits.json`.
pub fn generate_dataset(root: &Path, cfg: &DataConfig, seed: u64) -> Result<DatasetSummary> {
    let per_instance = cfg.scripts.len() * cfg.sequences_per_instance;
    if cfg.categories.is_empty() || cfg.instances == 0 || per_instance == 0 {
        return Err(Error::InvalidInput("dataset config requests zero sequences".into()));
    }
    let sizes = split_sizes(cfg.instances, cfg.split_ratios)?;
    let mut index = SplitIndex { format_version: FORMAT_VERSION, ..SplitIndex::default() };
    for name in SPLITS {
        index.splits.insert(name.to_string(), Vec::new());
    }
    let mut frames = 0;
    for (ci, &category) in cfg.categories.iter().enumerate() {
        let mut order: Vec<usize> = (0..cfg.instances).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(ci as u64)));
        for (rank, &i) in order.iter().enumerate() {
            let split = if rank < sizes[0] {
                SPLITS[0]
            } else if rank < sizes[0] + sizes[1] {
                SPLITS[1]
            } else {
                SPLITS[2]
            };
            let instance = Instance::generate(category, cfg.template_resolution, i, seed)?;
            for (si, &script) in cfg.scripts.iter().enumerate() {
                for k in 0..cfg.sequences_per_instance {
                    let seq_id = format!("{}_{}_{k:02}", instance.id, script.id());
                    let seq_seed = seed
                        ^ (ci as u64).wrapping_mul(0x1000_0000_01b3)
                        ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
                        ^ ((si * 1000 + k) as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
                    let meta = SequenceMeta::for_instance(&instance, seq_id);
                    let ds = generate_sequence(&instance.template, script, cfg.frames, seq_seed, &cfg.generator, &meta)?;
                    write_dataset(&ds, root)?;
                    frames += ds.len();
                    let rel = ds.relative_dir().to_string_lossy().replace('\\', "/");
                    index.instances.insert(rel.clone(), instance.id.clone());
                    index.splits.get_mut(split).expect("split exists").push(rel);
                }
            }
        }
    }
    for list in index.splits.values_mut() {
        list.sort();
    }
    index.write(root)?;
    let sequences = index.instances.len();
    Ok(DatasetSummary { splits: index, sequences, frames })
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{cross, dist, dot, normalize, sub};

    #[test]
    fn template_counts_match_closed_form() {
        for cat in Category::ALL {
            for r in [8, 9, 12, 13, 16] {
                let t = make_template(cat, r).unwrap();
                assert_eq!(t.vertices.len(), template_vertex_count(cat, r), "{cat} r={r}");
                assert!(t.vertices.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
            }
        }
        assert_eq!(template_vertex_count(Category::Shirt, 8), 57);
        assert_eq!(template_vertex_count(Category::Pants, 8), 39);
        assert!(make_template(Category::Shirt, 7).is_err());
        assert_eq!(make_template(Category::Pants, 8).unwrap(), make_template(Category::Pants, 8).unwrap());
    }

    #[test]
    fn templates_are_mirror_symmetric() {
        for cat in Category::ALL {
            let t = make_template(cat, 8).unwrap();
            for v in &t.vertices {
                let m = [1.0 - v[0], v[1], v[2]];
                assert!(t.vertices.iter().any(|w| dist(*w, m) < 1e-12), "{cat}: no partner for {v:?}");
            }
        }
    }

    #[test]
    fn parse_names() {
        assert_eq!("pants".parse::<Category>().unwrap(), Category::Pants);
        assert_eq!("fold_ud".parse::<Script>().unwrap(), Script::FoldUd);
        assert!("dress".parse::<Category>().is_err());
        assert_eq!(Script::FlingFlatten.family().mesh_refine_budget(), 15);
    }

    fn small_opts() -> GeneratorOptions {
        GeneratorOptions { points_per_frame: 200, image_resolution: 48, ..Default::default() }
    }

    #[test]
    fn rejects_short_sequences() {
        let t = make_template(Category::Top, 8).unwrap();
        assert!(generate_sequence(&t, Script::FoldLr, 1, 0, &small_opts(), &SequenceMeta::default()).is_err());
    }

    #[test]
    fn fold_lr_final_frame_mirrors_partner() {
        let t = make_template(Category::Shirt, 8).unwrap();
        let opts = small_opts();
        let ds = generate_sequence(&t, Script::FoldLr, 6, 11, &opts, &SequenceMeta::default()).unwrap();
        let last = ds.frames.last().unwrap().mesh_vertices.as_ref().unwrap();
        let first = ds.frames[0].mesh_vertices.as_ref().unwrap();
        // crease plane from the unmoved crease vertices and the table normal
        let crease: Vec<usize> = (0..t.vertices.len()).filter(|&i| (t.vertices[i][0] - 0.5).abs() < 1e-9).collect();
        let a = first[crease[0]];
        let b = first[*crease.last().unwrap()];
        let dir = normalize(sub(b, a));
        let normal = normalize(cross(dir, [0.0, 0.0, 1.0]));
        for (i, v) in t.vertices.iter().enumerate() {
            if v[0] <= 0.5 {
                continue;
            }
            let partner = t.vertices.iter().position(|w| dist(*w, [1.0 - v[0], v[1], v[2]]) < 1e-9).unwrap();
            // folded vertex lies on its partner, one layer up
            let below = last[partner];
            let expected = [below[0], below[1], below[2] + opts.layer_offset];
            assert!(dist(last[i], expected) < 1e-5, "vertex {i}: {:?} vs {:?}", last[i], expected);
            // and the partner is the crease-plane mirror of where the vertex started
            let p = first[i];
            let reflected = sub(p, normal.map(|n| n * 2.0 * dot(sub(p, a), normal)));
            assert!(dist([reflected[0], reflected[1], 0.0], [below[0], below[1], 0.0]) < 1e-5);
        }
    }

    #[test]
    fn first_frame_is_flat_on_table_and_deterministic() {
        let t = make_template(Category::Pants, 8).unwrap();
        for script in [Script::FoldLr, Script::FoldUd, Script::CrumpleLift] {
            let a = generate_sequence(&t, script, 3, 5, &small_opts(), &SequenceMeta::default()).unwrap();
            let f0 = a.frames[0].mesh_vertices.as_ref().unwrap();
            assert!(f0.iter().all(|p| p[2].abs() < 1e-6), "{script}");
            let b = generate_sequence(&t, script, 3, 5, &small_opts(), &SequenceMeta::default()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn topology_constant_and_labels_consistent() {
        let t = make_template(Category::Skirt, 8).unwrap();
        let ds = generate_sequence(&t, Script::CrumpleLift, 4, 2, &small_opts(), &SequenceMeta::default()).unwrap();
        for f in &ds.frames {
            assert_eq!(f.mesh_vertices.as_ref().unwrap().len(), t.vertices.len());
            assert_eq!(f.points.len(), 200);
            let nocs = f.gt_nocs.as_ref().unwrap();
            assert!(nocs.as_slice().iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        }
    }
    fn tree(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn dataset_splits_are_instance_disjoint_and_reproducible() {
        let cfg = DataConfig {
            instances: 10,
            frames: 2,
            template_resolution: 8,
            generator: small_opts(),
            ..DataConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sum = generate_dataset(a.path(), &cfg, 9).unwrap();
        assert_eq!(sum.sequences, 20);
        assert_eq!([sum.count("train"), sum.count("val"), sum.count("test")], [16, 2, 2]);
        let idx = SplitIndex::read(a.path()).unwrap();
        let owner: std::collections::BTreeMap<&str, Vec<&str>> = SPLITS
            .iter()
            .map(|s| (*s, idx.split(s).iter().map(|q| idx.instances[q].as_str()).collect()))
            .collect();
        for x in &owner["train"] {
            assert!(!owner["val"].contains(x) && !owner["test"].contains(x));
        }
        for x in &owner["val"] {
            assert!(!owner["test"].contains(x));
        }
        generate_dataset(b.path(), &cfg, 9).unwrap();
        assert_eq!(tree(a.path()), tree(b.path()));

        let empty = DataConfig { scripts: vec![], ..cfg };
        assert!(generate_dataset(b.path(), &empty, 9).unwrap_err().to_string().contains("zero sequences"));
    }
}

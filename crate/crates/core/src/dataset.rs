//! In-memory sequence types and the on-disk dataset layout.
//!
//! ```text
//! <root>/splits.json
//! <root>/<category>/<seq_id>/manifest.json
//! <root>/<category>/<seq_id>/canonical_mesh.verts.bin
//! <root>/<category>/<seq_id>/canonical_mesh.faces.bin
//! <root>/<category>/<seq_id>/frames/<t>.points.bin
//! <root>/<category>/<seq_id>/frames/<t>.nocs.bin
//! <root>/<category>/<seq_id>/frames/<t>.mesh.bin
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, read_faces, read_json, read_points, write_faces, write_json, write_points, DType};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::mesh::CanonicalMesh;
use crate::nocs::NocsCoords;
use crate::synth::Category;

pub const FORMAT_VERSION: u32 = 2;
pub const GENERATOR_ID: &str = "garmenttrack-synthgen";

/// One time step of a manipulation video.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudFrame {
    /// Task-space points in meters.
    pub points: Vec<Vec3>,
    pub gt_nocs: Option<NocsCoords>,
    /// Ground-truth task-space positions of the canonical mesh vertices.
    pub mesh_vertices: Option<Vec<Vec3>>,
}

impl PointCloudFrame {
    pub fn gt_nocs(&self) -> Result<&NocsCoords> {
        self.gt_nocs.as_ref().ok_or_else(|| Error::InvalidInput("frame has no ground-truth NOCS".into()))
    }

    /// Exactly `k` points: a random subset when the frame has enough points,
    /// otherwise every point plus random repeats. Labels follow their points.
    pub fn resample<R: Rng>(&self, k: usize, rng: &mut R) -> PointCloudFrame {
        let idx = resample_indices(self.points.len(), k, rng);
        PointCloudFrame {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            gt_nocs: self.gt_nocs.as_ref().map(|n| n.select(&idx)),
            mesh_vertices: self.mesh_vertices.clone(),
        }
    }

    pub fn mesh_vertices(&self) -> Result<&[Vec3]> {
        self.mesh_vertices
            .as_deref()
            .ok_or_else(|| Error::InvalidInput("frame has no ground-truth mesh".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dtypes {
    pub float: String,
    pub int: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub format_version: u32,
    pub generator: String,
    pub category: Category,
    pub seq_id: String,
    pub instance_id: String,
    pub script: String,
    pub seed: u64,
    pub camera_count: usize,
    pub frame_rate: f64,
    pub num_frames: usize,
    pub num_vertices: usize,
    pub num_faces: usize,
    pub points_per_frame: Vec<usize>,
    pub has_nocs: bool,
    pub has_mesh: bool,
    pub dtypes: Dtypes,
}

impl SequenceManifest {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        category: Category,
        seq_id: &str,
        instance_id: &str,
        script: &str,
        seed: u64,
        camera_count: usize,
        frame_rate: f64,
        mesh: &CanonicalMesh,
        frames: &[PointCloudFrame],
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            generator: GENERATOR_ID.into(),
            category,
            seq_id: seq_id.into(),
            instance_id: instance_id.into(),
            script: script.into(),
            seed,
            camera_count,
            frame_rate,
            num_frames: frames.len(),
            num_vertices: mesh.vertices.len(),
            num_faces: mesh.faces.len(),
            points_per_frame: frames.iter().map(|f| f.points.len()).collect(),
            has_nocs: frames.iter().all(|f| f.gt_nocs.is_some()),
            has_mesh: frames.iter().all(|f| f.mesh_vertices.is_some()),
            dtypes: Dtypes { float: DType::F32.name().into(), int: DType::I32.name().into() },
        }
    }
}

/// `k` indices into `0..n` (sorted); sampling is without replacement while
/// `n >= k`. Returns an empty list when `n == 0`.
pub fn resample_indices<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let mut idx = if n >= k {
        rand::seq::index::sample(rng, n, k).into_vec()
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.extend((0..k - n).map(|_| rng.random_range(0..n)));
        all
    };
    idx.sort_unstable();
    idx
}

/// Ordered frames of one manipulation video and its canonical mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub manifest: SequenceManifest,
    pub canonical_mesh: CanonicalMesh,
    pub frames: Vec<PointCloudFrame>,
}

impl SequenceDataset {
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::InvalidInput("a sequence needs at least 2 frames".into()));
        }
        self.canonical_mesh.validate()?;
        let v = self.canonical_mesh.vertices.len();
        for (t, f) in self.frames.iter().enumerate() {
            if f.points.is_empty() {
                return Err(Error::InvalidInput(format!("frame {t} has no points")));
            }
            if let Some(n) = &f.gt_nocs {
                if n.len() != f.points.len() {
                    return Err(Error::InvalidInput(format!("frame {t}: NOCS/point count mismatch")));
                }
            }
            if let Some(m) = &f.mesh_vertices {
                if m.len() != v {
                    return Err(Error::InvalidInput(format!("frame {t}: {} mesh vertices, expected {v}", m.len())));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Keeps the listed frames (in the given order).
    pub fn select_frames(&self, idx: &[usize]) -> Self {
        let frames: Vec<PointCloudFrame> = idx.iter().map(|&i| self.frames[i].clone()).collect();
        let mut manifest = self.manifest.clone();
        manifest.num_frames = frames.len();
        manifest.points_per_frame = frames.iter().map(|f| f.points.len()).collect();
        Self { manifest, canonical_mesh: self.canonical_mesh.clone(), frames }
    }

    pub fn relative_dir(&self) -> PathBuf {
        PathBuf::from(self.manifest.category.to_string()).join(&self.manifest.seq_id)
    }
}

fn frame_file(dir: &Path, t: usize, field: &str) -> PathBuf {
    dir.join("frames").join(format!("{t}.{field}.bin"))
}

/// Writes `ds` under `<root>/<category>/<seq_id>/` and returns that directory.
pub fn write_dataset(ds: &SequenceDataset, root: &Path) -> Result<PathBuf> {
    ds.validate()?;
    let dir = root.join(ds.relative_dir());
    container::create_dir_all(&dir.join("frames"))?;
    write_json(&dir.join("manifest.json"), &ds.manifest)?;
    write_points(&dir.join("canonical_mesh.verts.bin"), &ds.canonical_mesh.vertices)?;
    write_faces(&dir.join("canonical_mesh.faces.bin"), &ds.canonical_mesh.faces)?;
    for (t, f) in ds.frames.iter().enumerate() {
        write_points(&frame_file(&dir, t, "points"), &f.points)?;
        if let Some(n) = &f.gt_nocs {
            write_points(&frame_file(&dir, t, "nocs"), n.as_slice())?;
        }
        if let Some(m) = &f.mesh_vertices {
            write_points(&frame_file(&dir, t, "mesh"), m)?;
        }
    }
    Ok(dir)
}

/// Reads one sequence directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<SequenceDataset> {
    let manifest_path = dir.join("manifest.json");
    let version = container::manifest_version(&manifest_path)?;
    if version != FORMAT_VERSION {
        return Err(Error::Version { path: manifest_path, found: version, expected: FORMAT_VERSION });
    }
    let manifest: SequenceManifest = read_json(&manifest_path)?;
    if manifest.points_per_frame.len() != manifest.num_frames {
        return Err(Error::format(&manifest_path, "points_per_frame length differs from num_frames"));
    }
    if manifest.dtypes.float != DType::F32.name() || manifest.dtypes.int != DType::I32.name() {
        return Err(Error::format(&manifest_path, format!("unsupported dtypes {:?}", manifest.dtypes)));
    }
    let vertices = read_points(&dir.join("canonical_mesh.verts.bin"), Some(manifest.num_vertices))?;
    let faces = read_faces(&dir.join("canonical_mesh.faces.bin"), Some(manifest.num_faces))?;
    let canonical_mesh =
        CanonicalMesh::new(vertices, faces).map_err(|e| Error::format(dir.join("canonical_mesh.verts.bin"), e.to_string()))?;
    let mut frames = Vec::with_capacity(manifest.num_frames);
    for t in 0..manifest.num_frames {
        let n = manifest.points_per_frame[t];
        let points = read_points(&frame_file(dir, t, "points"), Some(n))?;
        let gt_nocs = if manifest.has_nocs {
            let path = frame_file(dir, t, "nocs");
            Some(NocsCoords::new(read_points(&path, Some(n))?).map_err(|e| Error::format(&path, e.to_string()))?)
        } else {
            None
        };
        let mesh_vertices = if manifest.has_mesh {
            Some(read_points(&frame_file(dir, t, "mesh"), Some(manifest.num_vertices))?)
        } else {
            None
        };
        frames.push(PointCloudFrame { points, gt_nocs, mesh_vertices });
    }
    let ds = SequenceDataset { manifest, canonical_mesh, frames };
    ds.validate().map_err(|e| Error::format(dir, e.to_string()))?;
    Ok(ds)
}

/// Instance-disjoint split membership, stored as `<root>/splits.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub format_version: u32,
    /// Split name -> sequence directories relative to the root.
    pub splits: BTreeMap<String, Vec<String>>,
    /// Sequence directory -> instance id.
    pub instances: BTreeMap<String, String>,
}

impl SplitIndex {
    pub fn write(&self, root: &Path) -> Result<()> {
        write_json(&root.join("splits.json"), self)
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join("splits.json");
        let version = container::manifest_version(&path)?;
        if version != FORMAT_VERSION {
            return Err(Error::Version { path, found: version, expected: FORMAT_VERSION });
        }
        read_json(&path)
    }

    pub fn split(&self, name: &str) -> &[String] {
        self.splits.get(name).map_or(&[], Vec::as_slice)
    }
}

/// All sequence directories below `root` (two levels deep), sorted.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let read = |p: &Path| std::fs::read_dir(p).map_err(|e| Error::io(p, e));
    for cat in read(root)? {
        let cat = cat.map_err(|e| Error::io(root, e))?.path();
        if !cat.is_dir() {
            continue;
        }
        for seq in read(&cat)? {
            let seq = seq.map_err(|e| Error::io(&cat, e))?.path();
            if seq.join("manifest.json").is_file() {
                out.push(seq);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_sequence, make_template, GeneratorOptions, Script, SequenceMeta};

    fn tiny() -> SequenceDataset {
        let t = make_template(Category::Top, 8).unwrap();
        let opts = GeneratorOptions { points_per_frame: 64, image_resolution: 32, ..Default::default() };
        let meta = SequenceMeta { category: Category::Top, ..SequenceMeta::default() };
        generate_sequence(&t, Script::FoldUd, 3, 9, &opts, &meta).unwrap()
    }

    #[test]
    fn resample_keeps_labels_attached() {
        use rand::SeedableRng;
        let ds = tiny();
        let f = &ds.frames[1];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for k in [10, 64, 150] {
            let r = f.resample(k, &mut rng);
            assert_eq!(r.points.len(), k);
            for (p, n) in r.points.iter().zip(r.gt_nocs.as_ref().unwrap().as_slice()) {
                let i = f.points.iter().position(|q| q == p).unwrap();
                assert_eq!(f.gt_nocs.as_ref().unwrap().as_slice()[i], *n);
            }
        }
        let idx = resample_indices(64, 64, &mut rng);
        assert_eq!(idx, (0..64).collect::<Vec<_>>());
        assert!(resample_indices(0, 5, &mut rng).is_empty());
    }

    #[test]
    fn write_read_round_trip() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        let seq_dir = write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(seq_dir, dir.path().join("Top").join("seq_0000"));
        assert_eq!(read_dataset(&seq_dir).unwrap(), ds);
        assert_eq!(list_sequences(dir.path()).unwrap(), vec![seq_dir]);
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        let seq_dir = write_dataset(&ds, dir.path()).unwrap();
        let f = seq_dir.join("frames").join("1.points.bin");
        let mut bytes = std::fs::read(&f).unwrap();
        bytes[1] = 0;
        std::fs::write(&f, bytes).unwrap();
        assert!(matches!(read_dataset(&seq_dir), Err(Error::Format { .. })));
    }

    #[test]
    fn old_manifest_version_is_rejected() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        let seq_dir = write_dataset(&ds, dir.path()).unwrap();
        let mut m = ds.manifest.clone();
        m.format_version = 1;
        write_json(&seq_dir.join("manifest.json"), &m).unwrap();
        match read_dataset(&seq_dir) {
            Err(Error::Version { found: 1, expected: 2, .. }) => {}
            other => panic!("expected a version error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_frame_is_rejected() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        let seq_dir = write_dataset(&ds, dir.path()).unwrap();
        let f = seq_dir.join("frames").join("0.mesh.bin");
        let bytes = std::fs::read(&f).unwrap();
        std::fs::write(&f, &bytes[..bytes.len() - 8]).unwrap();
        assert!(read_dataset(&seq_dir).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn malformed_manifest_is_rejected() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        let seq_dir = write_dataset(&ds, dir.path()).unwrap();
        std::fs::write(seq_dir.join("manifest.json"), "{\"format_version\": 2, \"category\": 7}").unwrap();
        assert!(matches!(read_dataset(&seq_dir), Err(Error::Json { .. })));
    }
}

//! Normalized object coordinate space: binning, decoding and the noise models
//! used for training augmentation and the robustness sweeps.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::mesh::CanonicalMesh;
use crate::tensor::Mat;

pub const DEFAULT_BINS: usize = 64;
pub const NOCS_CENTER: Vec3 = [0.5, 0.5, 0.5];

/// Per-point canonical coordinates, every component in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct NocsCoords(Vec<Vec3>);

impl NocsCoords {
    /// Validates that every component is finite and inside `[0, 1]`.
    pub fn new(coords: Vec<Vec3>) -> Result<Self> {
        for (i, c) in coords.iter().enumerate() {
            if c.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidInput(format!("NOCS coordinate {i} = {c:?} outside [0,1]^3")));
            }
        }
        Ok(Self(coords))
    }

    /// Clamps into the unit cube; non-finite input is rejected.
    pub fn clamped(coords: Vec<Vec3>) -> Result<Self> {
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite NOCS coordinate".into()));
        }
        Ok(Self(coords.into_iter().map(|c| c.map(|v| v.clamp(0.0, 1.0))).collect()))
    }

    pub fn as_slice(&self) -> &[Vec3] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<Vec3> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self(idx.iter().map(|&i| self.0[i]).collect())
    }
}

/// Classification scores, `N×3×B` stored as an `N×(3·B)` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct NocsLogits {
    bins: usize,
    logits: Mat,
}

impl NocsLogits {
    pub fn new(logits: Mat, bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 bins, got {bins}")));
        }
        if logits.cols != 3 * bins {
            return Err(Error::InvalidInput(format!("logit width {} != 3x{bins}", logits.cols)));
        }
        if !logits.is_finite() {
            return Err(Error::InvalidInput("non-finite logits".into()));
        }
        Ok(Self { bins, logits })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn len(&self) -> usize {
        self.logits.rows
    }

    pub fn is_empty(&self) -> bool {
        self.logits.rows == 0
    }

    pub fn as_mat(&self) -> &Mat {
        &self.logits
    }

    /// One-hot logits (`scale` at the given bin, 0 elsewhere).
    pub fn one_hot(bins_idx: &[[usize; 3]], bins: usize, scale: f64) -> Result<Self> {
        let mut m = Mat::zeros(bins_idx.len(), 3 * bins);
        for (r, b) in bins_idx.iter().enumerate() {
            for (axis, &bi) in b.iter().enumerate() {
                if bi >= bins {
                    return Err(Error::InvalidInput(format!("bin {bi} out of range for {bins} bins")));
                }
                m.set(r, axis * bins + bi, scale);
            }
        }
        Self::new(m, bins)
    }
}

/// `min(floor(c·bins), bins−1)` per component.
pub fn nocs_to_bins(coords: &[Vec3], bins: usize) -> Result<Vec<[usize; 3]>> {
    if bins == 0 {
        return Err(Error::InvalidInput("bins must be positive".into()));
    }
    coords
        .iter()
        .map(|c| {
            let mut out = [0usize; 3];
            for (o, &v) in out.iter_mut().zip(c) {
                if !v.is_finite() {
                    return Err(Error::InvalidInput(format!("non-finite NOCS coordinate {c:?}")));
                }
                *o = coord_to_bin(v, bins);
            }
            Ok(out)
        })
        .collect()
}

#[inline]
pub(crate) fn coord_to_bin(v: f64, bins: usize) -> usize {
    let b = (v.clamp(0.0, 1.0) * bins as f64).floor() as usize;
    b.min(bins - 1)
}

/// Argmax decode to bin centres, `(argmax + 0.5)/B`; ties go to the lowest bin.
pub fn bins_to_nocs(logits: &NocsLogits) -> NocsCoords {
    NocsCoords(decode_argmax(&logits.logits, logits.bins))
}

pub fn decode_argmax(logits: &Mat, bins: usize) -> Vec<Vec3> {
    (0..logits.rows)
        .map(|r| {
            let row = logits.row(r);
            let mut out = [0.0; 3];
            for (axis, o) in out.iter_mut().enumerate() {
                let block = &row[axis * bins..(axis + 1) * bins];
                let mut best = 0;
                for (i, &v) in block.iter().enumerate().skip(1) {
                    if v > block[best] {
                        best = i;
                    }
                }
                *o = (best as f64 + 0.5) / bins as f64;
            }
            out
        })
        .collect()
}

/// Closed interval sampled uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.lo..=self.hi).contains(&v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseLevel {
    #[serde(rename = "1x")]
    X1,
    #[serde(rename = "2x")]
    X2,
    #[serde(rename = "3x")]
    X3,
}

impl NoiseLevel {
    pub const ALL: [NoiseLevel; 3] = [NoiseLevel::X1, NoiseLevel::X2, NoiseLevel::X3];

    pub fn multiplier(self) -> u32 {
        match self {
            NoiseLevel::X1 => 1,
            NoiseLevel::X2 => 2,
            NoiseLevel::X3 => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            NoiseLevel::X1 => "1x",
            NoiseLevel::X2 => "2x",
            NoiseLevel::X3 => "3x",
        }
    }
}

impl std::str::FromStr for NoiseLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1x" => Ok(NoiseLevel::X1),
            "2x" => Ok(NoiseLevel::X2),
            "3x" => Ok(NoiseLevel::X3),
            other => Err(Error::Config(format!("unknown noise level {other:?} (expected 1x, 2x or 3x)"))),
        }
    }
}

/// Global scale/offset plus per-point Gaussian noise on NOCS, and a global
/// scale on the canonical mesh.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub s_pc: [Interval; 3],
    pub o_pc: [Interval; 3],
    pub delta: f64,
    pub s_mesh: [Interval; 3],
    pub level: Option<NoiseLevel>,
}

impl NoiseParams {
    /// Rows of the robustness-experiment table.
    pub fn level(level: NoiseLevel) -> Self {
        let (s, o, delta) = match level {
            NoiseLevel::X1 => (Interval::new(0.8, 1.2), Interval::new(0.0, 0.1), 0.05),
            NoiseLevel::X2 => (Interval::new(0.6, 1.4), Interval::new(0.0, 0.2), 0.10),
            NoiseLevel::X3 => (Interval::new(0.4, 1.6), Interval::new(0.0, 0.3), 0.15),
        };
        Self { s_pc: [s; 3], o_pc: [o; 3], delta, s_mesh: [s; 3], level: Some(level) }
    }

    /// Training augmentation: the 1x scale/offset ranges without per-point noise.
    pub fn training() -> Self {
        Self { delta: 0.0, level: None, ..Self::level(NoiseLevel::X1) }
    }

    pub fn none() -> Self {
        let one = Interval::point(1.0);
        let zero = Interval::point(0.0);
        Self { s_pc: [one; 3], o_pc: [zero; 3], delta: 0.0, s_mesh: [one; 3], level: None }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = self.s_pc.iter().chain(&self.o_pc).chain(&self.s_mesh);
        for r in ranges {
            if !(r.lo.is_finite() && r.hi.is_finite() && r.lo <= r.hi) {
                return Err(Error::InvalidInput(format!("empty or non-finite noise range {r:?}")));
            }
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::InvalidInput(format!("noise std must be >= 0, got {}", self.delta)));
        }
        Ok(())
    }
}

/// `clamp(c·s + o + ε, 0, 1)` with `s`, `o` drawn once per call (x, y, z
/// order) and then `ε ~ N(0, δ²)` drawn per point component.
pub fn perturb_nocs<R: Rng>(coords: &NocsCoords, params: &NoiseParams, rng: &mut R) -> Result<NocsCoords> {
    params.validate()?;
    let s = params.s_pc.map(|r| r.sample(rng));
    let o = params.o_pc.map(|r| r.sample(rng));
    let normal = (params.delta > 0.0).then(|| Normal::new(0.0, params.delta).expect("validated std"));
    let out = coords
        .0
        .iter()
        .map(|c| {
            let mut p = [0.0; 3];
            for k in 0..3 {
                let eps = normal.as_ref().map_or(0.0, |n| n.sample(rng));
                p[k] = (c[k] * s[k] + o[k] + eps).clamp(0.0, 1.0);
            }
            p
        })
        .collect();
    Ok(NocsCoords(out))
}

/// Scales vertices about the NOCS centre by a per-axis factor drawn once per
/// mesh, then clamps into the unit cube.
pub fn perturb_mesh<R: Rng>(mesh: &CanonicalMesh, s_mesh: &[Interval; 3], rng: &mut R) -> CanonicalMesh {
    let s = s_mesh.map(|r| r.sample(rng));
    mesh.with_vertices(mesh.vertices.iter().map(|&v| scale_about_center(v, s)).collect())
}

pub fn scale_about_center(v: Vec3, s: Vec3) -> Vec3 {
    let mut out = [0.0; 3];
    for k in 0..3 {
        out[k] = (NOCS_CENTER[k] + (v[k] - NOCS_CENTER[k]) * s[k]).clamp(0.0, 1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixed(s: f64, o: f64, delta: f64) -> NoiseParams {
        NoiseParams {
            s_pc: [Interval::point(s); 3],
            o_pc: [Interval::point(o); 3],
            delta,
            s_mesh: [Interval::point(1.0); 3],
            level: None,
        }
    }

    #[test]
    fn binning_examples() {
        let b = nocs_to_bins(&[[0.0, 1.0, 0.51]], 64).unwrap();
        assert_eq!(b[0], [0, 63, 32]);
        assert!(nocs_to_bins(&[[f64::NAN, 0.0, 0.0]], 64).is_err());
        assert!(nocs_to_bins(&[[0.0, f64::INFINITY, 0.0]], 64).is_err());
    }

    #[test]
    fn decode_examples() {
        let l = NocsLogits::one_hot(&[[0, 63, 0]], 64, 1.0).unwrap();
        let c = bins_to_nocs(&l);
        assert_eq!(c.as_slice()[0][0], 1.0 / 128.0);
        assert_eq!(c.as_slice()[0][1], 127.0 / 128.0);
        let uniform = NocsLogits::new(Mat::filled(2, 192, 0.3), 64).unwrap();
        assert!(bins_to_nocs(&uniform).as_slice().iter().all(|c| *c == [1.0 / 128.0; 3]));
    }

    #[test]
    fn logits_validation() {
        assert!(NocsLogits::new(Mat::zeros(1, 3), 1).is_err());
        assert!(NocsLogits::new(Mat::zeros(1, 10), 4).is_err());
        assert!(NocsLogits::new(Mat::filled(1, 6, f64::NAN), 2).is_err());
    }

    #[test]
    fn coords_validation() {
        assert!(NocsCoords::new(vec![[0.0, 0.5, 1.0]]).is_ok());
        assert!(NocsCoords::new(vec![[1.01, 0.5, 0.5]]).is_err());
        assert_eq!(NocsCoords::clamped(vec![[1.2, -0.1, 0.3]]).unwrap().as_slice()[0], [1.0, 0.0, 0.3]);
        assert!(NocsCoords::clamped(vec![[f64::NAN, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn perturb_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = NocsCoords::new(vec![[0.5, 0.95, 0.2]]).unwrap();
        assert_eq!(perturb_nocs(&c, &fixed(1.0, 0.0, 0.0), &mut rng).unwrap(), c);
        let p = perturb_nocs(&c, &fixed(1.2, 0.1, 0.0), &mut rng).unwrap();
        let p = p.as_slice()[0];
        assert!((p[0] - 0.7).abs() < 1e-12);
        assert_eq!(p[1], 1.0);
        assert!((p[2] - 0.34).abs() < 1e-12);
    }

    #[test]
    fn perturb_mesh_examples() {
        let mesh = CanonicalMesh::new(vec![[0.5, 0.5, 0.5], [0.7, 0.5, 0.5]], vec![]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ident = perturb_mesh(&mesh, &[Interval::point(1.0); 3], &mut rng);
        assert_eq!(ident, mesh);
        let s = [Interval::point(1.2), Interval::point(1.0), Interval::point(1.0)];
        let out = perturb_mesh(&mesh, &s, &mut rng);
        assert_eq!(out.vertices[0], [0.5, 0.5, 0.5]);
        assert!((out.vertices[1][0] - 0.74).abs() < 1e-12);
        assert_eq!(out.faces, mesh.faces);
    }

    #[test]
    fn table_rows() {
        let p = NoiseParams::level(NoiseLevel::X2);
        assert_eq!(p.s_pc[0], Interval::new(0.6, 1.4));
        assert_eq!(p.o_pc[2], Interval::new(0.0, 0.2));
        assert_eq!(p.delta, 0.10);
        assert_eq!(NoiseParams::level(NoiseLevel::X3).delta, 0.15);
        assert_eq!(NoiseParams::training().delta, 0.0);
        assert!(fixed(1.0, 0.0, -1.0).validate().is_err());
    }

    #[test]
    fn noise_level_parse() {
        assert_eq!("2x".parse::<NoiseLevel>().unwrap(), NoiseLevel::X2);
        assert!("4x".parse::<NoiseLevel>().is_err());
    }
}

//! Triangle meshes in canonical (NOCS) space and area-uniform surface sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{add, cross, norm, scale, sub, Vec3};

/// Complete garment geometry in canonical space. Meshes are open sheets; no
/// code path assumes they are watertight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonicalMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

impl CanonicalMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let mesh = Self { vertices, faces };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.vertices.iter().find(|v| v.iter().any(|c| !c.is_finite() || !(0.0..=1.0).contains(c))) {
            return Err(Error::InvalidInput(format!("mesh vertex {v:?} outside the unit NOCS cube")));
        }
        let n = self.vertices.len() as u32;
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
            return Err(Error::InvalidInput(format!("face {f:?} references a missing vertex (V={n})")));
        }
        Ok(())
    }

    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Self {
        debug_assert_eq!(vertices.len(), self.vertices.len());
        Self { vertices, faces: self.faces.clone() }
    }
}

/// One area-uniform sample on a triangle mesh.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceSample {
    pub face: u32,
    pub bary: [f64; 3],
}

impl SurfaceSample {
    pub fn eval(&self, vertices: &[Vec3], faces: &[[u32; 3]]) -> Vec3 {
        let f = faces[self.face as usize];
        let mut p = [0.0; 3];
        for (k, &vi) in f.iter().enumerate() {
            p = add(p, scale(vertices[vi as usize], self.bary[k]));
        }
        p
    }
}

pub fn triangle_area(a: Vec3, b: Vec3, c: Vec3) -> f64 {
    0.5 * norm(cross(sub(b, a), sub(c, a)))
}

/// Cumulative area table used for area-weighted face selection.
#[derive(Clone, Debug)]
pub struct AreaSampler {
    cumulative: Vec<f64>,
    faces: Vec<u32>,
}

impl AreaSampler {
    /// Builds a sampler over the given subset of faces.
    pub fn new(vertices: &[Vec3], faces: &[[u32; 3]], subset: impl IntoIterator<Item = u32>) -> Option<Self> {
        let mut cumulative = Vec::new();
        let mut chosen = Vec::new();
        let mut total = 0.0;
        for fi in subset {
            let [a, b, c] = faces[fi as usize].map(|i| vertices[i as usize]);
            let area = triangle_area(a, b, c);
            if area > 0.0 {
                total += area;
                cumulative.push(total);
                chosen.push(fi);
            }
        }
        (total > 0.0).then_some(Self { cumulative, faces: chosen })
    }

    pub fn all(vertices: &[Vec3], faces: &[[u32; 3]]) -> Option<Self> {
        Self::new(vertices, faces, 0..faces.len() as u32)
    }

    pub fn total_area(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> SurfaceSample {
        let t = rng.random::<f64>() * self.total_area();
        let k = self.cumulative.partition_point(|&c| c <= t).min(self.faces.len() - 1);
        let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        SurfaceSample { face: self.faces[k], bary: [1.0 - u - v, u, v] }
    }

    pub fn sample_n<R: Rng>(&self, rng: &mut R, n: usize) -> Vec<SurfaceSample> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

/// Samples `n` surface points of `mesh`, returning the samples (which can be
/// re-evaluated on any deformed copy of the same topology).
pub fn sample_surface<R: Rng>(vertices: &[Vec3], faces: &[[u32; 3]], n: usize, rng: &mut R) -> Result<Vec<SurfaceSample>> {
    let sampler = AreaSampler::all(vertices, faces)
        .ok_or_else(|| Error::InvalidInput("mesh has zero surface area".into()))?;
    Ok(sampler.sample_n(rng, n))
}

pub fn eval_samples(samples: &[SurfaceSample], vertices: &[Vec3], faces: &[[u32; 3]]) -> Vec<Vec3> {
    samples.iter().map(|s| s.eval(vertices, faces)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quad() -> CanonicalMesh {
        CanonicalMesh::new(
            vec![[0.0, 0.0, 0.5], [1.0, 0.0, 0.5], [1.0, 1.0, 0.5], [0.0, 1.0, 0.5]],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_faces_and_vertices() {
        assert!(CanonicalMesh::new(vec![[0.0; 3]], vec![[0, 1, 2]]).is_err());
        assert!(CanonicalMesh::new(vec![[1.5, 0.0, 0.0]], vec![]).is_err());
    }

    #[test]
    fn samples_lie_on_surface() {
        let m = quad();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_surface(&m.vertices, &m.faces, 500, &mut rng).unwrap();
        for p in eval_samples(&s, &m.vertices, &m.faces) {
            assert!((p[2] - 0.5).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]));
        }
        let mean_x = eval_samples(&s, &m.vertices, &m.faces).iter().map(|p| p[0]).sum::<f64>() / 500.0;
        assert!((mean_x - 0.5).abs() < 0.05);
    }
}

//! Depth-only partial-view rendering.
//!
//! Each camera rasterizes the mesh into a low-resolution z-buffer. Candidate
//! points drawn area-uniformly over the whole surface are kept when at least
//! one camera sees them, which makes the kept set area-uniform over the
//! visible surface.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{add, cross, dot, normalize, scale, sub, Vec3};
use crate::mesh::{AreaSampler, SurfaceSample};

/// Pinhole depth camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub eye: Vec3,
    pub target: Vec3,
    pub up: Vec3,
    pub fov_y_deg: f64,
    pub width: usize,
    pub height: usize,
}

const NEAR: f64 = 1e-3;

impl Camera {
    pub fn look_at(eye: Vec3, target: Vec3, resolution: usize) -> Self {
        let fwd = normalize(sub(target, eye));
        let up = if cross(fwd, [0.0, 0.0, 1.0]).iter().all(|v| v.abs() < 1e-9) { [0.0, 1.0, 0.0] } else { [0.0, 0.0, 1.0] };
        Self { eye, target, up, fov_y_deg: 60.0, width: resolution, height: resolution }
    }

    /// `n` cameras evenly spaced in azimuth at the given elevation, looking
    /// at `target` from `distance`.
    pub fn ring(n: usize, target: Vec3, distance: f64, elevation_deg: f64, resolution: usize) -> Vec<Self> {
        let el = elevation_deg.to_radians();
        (0..n)
            .map(|i| {
                let az = std::f64::consts::TAU * (i as f64 + 0.5) / n as f64;
                let dir = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
                Self::look_at(add(target, scale(dir, distance)), target, resolution)
            })
            .collect()
    }

    fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let fwd = normalize(sub(self.target, self.eye));
        let right = normalize(cross(fwd, self.up));
        let up = cross(right, fwd);
        (right, up, fwd)
    }

    fn focal(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.fov_y_deg.to_radians()).tan()
    }
}

struct View {
    cam: Camera,
    right: Vec3,
    up: Vec3,
    fwd: Vec3,
    focal: f64,
    depth: Vec<f64>,
    face: Vec<u32>,
}

const NO_FACE: u32 = u32::MAX;

impl View {
    fn new(cam: Camera) -> Self {
        let (right, up, fwd) = cam.basis();
        let n = cam.width * cam.height;
        Self { focal: cam.focal(), cam, right, up, fwd, depth: vec![f64::INFINITY; n], face: vec![NO_FACE; n] }
    }

    /// Continuous pixel coordinates and depth along the optical axis.
    fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let v = sub(p, self.cam.eye);
        let z = dot(v, self.fwd);
        if z <= NEAR {
            return None;
        }
        let x = self.focal * dot(v, self.right) / z + 0.5 * self.cam.width as f64;
        let y = self.focal * dot(v, self.up) / z + 0.5 * self.cam.height as f64;
        Some((x, y, z))
    }

    fn rasterize(&mut self, vertices: &[Vec3], faces: &[[u32; 3]]) {
        let (w, h) = (self.cam.width as i64, self.cam.height as i64);
        for (fi, f) in faces.iter().enumerate() {
            let Some(a) = self.project(vertices[f[0] as usize]) else { continue };
            let Some(b) = self.project(vertices[f[1] as usize]) else { continue };
            let Some(c) = self.project(vertices[f[2] as usize]) else { continue };
            let area = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
            if area.abs() < 1e-12 {
                continue;
            }
            let x0 = a.0.min(b.0).min(c.0).floor().max(0.0) as i64;
            let x1 = (a.0.max(b.0).max(c.0).ceil() as i64).min(w - 1);
            let y0 = a.1.min(b.1).min(c.1).floor().max(0.0) as i64;
            let y1 = (a.1.max(b.1).max(c.1).ceil() as i64).min(h - 1);
            for py in y0..=y1 {
                for px in x0..=x1 {
                    let (sx, sy) = (px as f64 + 0.5, py as f64 + 0.5);
                    let w0 = ((b.0 - sx) * (c.1 - sy) - (b.1 - sy) * (c.0 - sx)) / area;
                    let w1 = ((c.0 - sx) * (a.1 - sy) - (c.1 - sy) * (a.0 - sx)) / area;
                    let w2 = 1.0 - w0 - w1;
                    if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                        continue;
                    }
                    // perspective-correct depth
                    let inv = w0 / a.2 + w1 / b.2 + w2 / c.2;
                    let z = 1.0 / inv;
                    let idx = (py * w + px) as usize;
                    if z < self.depth[idx] {
                        self.depth[idx] = z;
                        self.face[idx] = fi as u32;
                    }
                }
            }
        }
    }

    fn sees(&self, p: Vec3, face: u32, tol: f64) -> bool {
        let Some((x, y, z)) = self.project(p) else { return false };
        let (w, h) = (self.cam.width as i64, self.cam.height as i64);
        let (px, py) = (x.floor() as i64, y.floor() as i64);
        if px < 0 || py < 0 || px >= w || py >= h {
            return false;
        }
        let (cx, cy) = (px as usize, py as usize);
        let idx = cy * self.cam.width + cx;
        if self.face[idx] == face || z <= self.depth[idx] + tol {
            return true;
        }
        // neighbouring pixels cover samples that fall between rasterized centres
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (qx, qy) = (px + dx, py + dy);
                if qx < 0 || qy < 0 || qx >= w || qy >= h {
                    continue;
                }
                let q = (qy * w + qx) as usize;
                if self.face[q] == face {
                    return true;
                }
            }
        }
        false
    }
}

/// A partial observation: sampled points, their surface locations and NOCS.
#[derive(Clone, Debug)]
pub struct PartialView {
    pub points: Vec<Vec3>,
    pub nocs: Vec<Vec3>,
    pub samples: Vec<SurfaceSample>,
}

#[derive(Clone, Copy, Debug)]
pub struct RenderOptions {
    /// Depth tolerance (meters) for the z-buffer test.
    pub depth_tolerance: f64,
    /// Upper bound on drawn candidates, as a multiple of the requested count.
    pub max_candidate_factor: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { depth_tolerance: 1e-3, max_candidate_factor: 400 }
    }
}

/// Samples `n` points uniformly over the surface seen by at least one camera.
/// `nocs_vertices` gives the canonical coordinate of every vertex.
pub fn render_partial<R: Rng>(
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    nocs_vertices: &[Vec3],
    cameras: &[Camera],
    n: usize,
    opts: &RenderOptions,
    rng: &mut R,
) -> Result<PartialView> {
    if cameras.is_empty() {
        return Err(Error::InvalidInput("at least one camera is required".into()));
    }
    if n == 0 {
        return Err(Error::InvalidInput("sample count must be positive".into()));
    }
    assert_eq!(vertices.len(), nocs_vertices.len());
    let mut views: Vec<View> = cameras.iter().map(|&c| View::new(c)).collect();
    for v in &mut views {
        v.rasterize(vertices, faces);
    }
    let visible_faces: Vec<u32> = {
        let mut seen = vec![false; faces.len()];
        for v in &views {
            for &f in &v.face {
                if f != NO_FACE {
                    seen[f as usize] = true;
                }
            }
        }
        (0..faces.len() as u32).filter(|&f| seen[f as usize]).collect()
    };
    if visible_faces.is_empty() {
        return Err(Error::InvalidInput("mesh is outside every camera frustum".into()));
    }
    let sampler = AreaSampler::all(vertices, faces).ok_or_else(|| Error::InvalidInput("mesh has zero area".into()))?;
    let mut samples = Vec::with_capacity(n);
    let cap = n * opts.max_candidate_factor;
    let mut drawn = 0;
    while samples.len() < n {
        if drawn >= cap {
            return Err(Error::InvalidInput(format!(
                "only {} of {n} visible samples after {cap} candidates",
                samples.len()
            )));
        }
        drawn += 1;
        let s = sampler.sample(rng);
        let p = s.eval(vertices, faces);
        if views.iter().any(|v| v.sees(p, s.face, opts.depth_tolerance)) {
            samples.push(s);
        }
    }
    let points = samples.iter().map(|s| s.eval(vertices, faces)).collect();
    let nocs = samples
        .iter()
        .map(|s| s.eval(nocs_vertices, faces).map(|v| v.clamp(0.0, 1.0)))
        .collect();
    Ok(PartialView { points, nocs, samples })
}

/// Möller–Trumbore ray/triangle intersection; returns the ray parameter.
pub fn ray_triangle(origin: Vec3, dir: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Option<f64> {
    let e1 = sub(b, a);
    let e2 = sub(c, a);
    let p = cross(dir, e2);
    let det = dot(e1, p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = sub(origin, a);
    let u = dot(s, p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = cross(s, e1);
    let v = dot(dir, q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = dot(e2, q) * inv;
    (t > 0.0).then_some(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sheet(z: f64, n: usize, offset: u32) -> (Vec<Vec3>, Vec<[u32; 3]>) {
        let mut v = Vec::new();
        let mut f = Vec::new();
        for j in 0..=n {
            for i in 0..=n {
                v.push([i as f64 / n as f64 - 0.5, j as f64 / n as f64 - 0.5, z]);
            }
        }
        let idx = |i: usize, j: usize| offset + (j * (n + 1) + i) as u32;
        for j in 0..n {
            for i in 0..n {
                f.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
                f.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
            }
        }
        (v, f)
    }

    #[test]
    fn top_camera_sees_only_upper_sheet() {
        let (mut v, mut f) = sheet(0.0, 4, 0);
        let (v2, f2) = sheet(0.05, 4, v.len() as u32);
        v.extend(v2);
        f.extend(f2);
        let nocs = v.iter().map(|p| [p[0] + 0.5, p[1] + 0.5, if p[2] > 0.0 { 1.0 } else { 0.0 }]).collect::<Vec<_>>();
        let cam = Camera::look_at([0.0, 0.0, 1.5], [0.0, 0.0, 0.0], 64);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let view = render_partial(&v, &f, &nocs, &[cam], 300, &RenderOptions::default(), &mut rng).unwrap();
        // sheets are identical in extent, so the lower one is hidden except for
        // a thin rim at the border
        let lower = view.points.iter().filter(|p| p[2] < 0.025).count();
        assert!(lower < 15, "{lower} lower-sheet points visible");
        assert!(view.nocs.iter().all(|c| c.iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn outside_frustum_is_an_error() {
        let (v, f) = sheet(0.0, 2, 0);
        let nocs = vec![[0.5; 3]; v.len()];
        let cam = Camera::look_at([0.0, 0.0, 2.0], [0.0, 0.0, 5.0], 32);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(render_partial(&v, &f, &nocs, &[cam], 10, &RenderOptions::default(), &mut rng).is_err());
        assert!(render_partial(&v, &f, &nocs, &[], 10, &RenderOptions::default(), &mut rng).is_err());
    }

    #[test]
    fn ray_hits_triangle() {
        let t = ray_triangle([0.2, 0.2, 1.0], [0.0, 0.0, -1.0], [0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        assert!((t.unwrap() - 1.0).abs() < 1e-12);
        assert!(ray_triangle([0.8, 0.8, 1.0], [0.0, 0.0, -1.0], [0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]).is_none());
    }
}

//! Tracking metrics: NOCS error, chamfer distance, correspondence distance
//! and the frame accuracy A_d, plus per-sequence reports.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{read_json, write_json};
use crate::error::{Error, Result};
use crate::geom::{dist, dist2, Vec3};
use crate::mesh::{eval_samples, sample_surface};

/// Static kd-tree over a point set for exact nearest-neighbour queries.
///
/// Ties are broken towards the lowest point index, so results equal a linear
/// scan exactly.
pub struct KdTree<'a> {
    points: &'a [Vec3],
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Clone, Copy)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

const LEAF_SIZE: usize = 8;

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        let mut tree = Self { points, order: (0..points.len()).collect(), nodes: Vec::new() };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for k in 0..3 {
                lo[k] = lo[k].min(self.points[i][k]);
                hi[k] = hi[k].max(self.points[i][k]);
            }
        }
        let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap_or(0);
        if hi[axis] - lo[axis] <= 0.0 {
            // all points coincide
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = (start + end) / 2;
        let pts = self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        let value = pts[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and squared distance of the nearest point, `None` when empty.
    pub fn nearest(&self, q: Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        Some(best)
    }

    fn search(&self, node: usize, q: Vec3, best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(self.points[i], q);
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                // `>` rather than `>=` keeps equal-distance candidates reachable
                if !(diff * diff > best.1) {
                    self.search(far, q, best);
                }
            }
        }
    }
}

/// Linear-scan nearest neighbour with the same tie-break as [`KdTree`].
pub fn nearest_brute(points: &[Vec3], q: Vec3) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &p) in points.iter().enumerate() {
        let d = dist2(p, q);
        if best.is_none_or(|b| d < b.1) {
            best = Some((i, d));
        }
    }
    best
}

fn check_aligned(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Alignment(format!("{what}: {a} vs {b} entries")));
    }
    Ok(())
}

fn non_empty(n: usize, what: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidInput(format!("{what} is empty")));
    }
    Ok(())
}

/// Mean per-point Euclidean NOCS error.
pub fn d_nocs(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    check_aligned(pred.len(), gt.len(), "predicted vs ground-truth NOCS")?;
    non_empty(pred.len(), "NOCS set")?;
    Ok(pred.iter().zip(gt).map(|(&a, &b)| dist(a, b)).sum::<f64>() / pred.len() as f64)
}

fn mean_nn_dist(from: &[Vec3], tree: &KdTree<'_>) -> f64 {
    from.iter().map(|&p| tree.nearest(p).expect("non-empty tree").1.sqrt()).sum::<f64>() / from.len() as f64
}

/// Symmetric chamfer distance in centimeters: the average of the two
/// directional mean nearest-neighbour distances (inputs in meters).
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    non_empty(a.len(), "chamfer input")?;
    non_empty(b.len(), "chamfer input")?;
    let (ta, tb) = (KdTree::new(a), KdTree::new(b));
    Ok(0.5 * (mean_nn_dist(a, &tb) + mean_nn_dist(b, &ta)) * 100.0)
}

pub fn chamfer_brute(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    non_empty(a.len(), "chamfer input")?;
    non_empty(b.len(), "chamfer input")?;
    let dir = |x: &[Vec3], y: &[Vec3]| {
        x.iter().map(|&p| nearest_brute(y, p).expect("non-empty").1.sqrt()).sum::<f64>() / x.len() as f64
    };
    Ok(0.5 * (dir(a, b) + dir(b, a)) * 100.0)
}

/// Correspondence distance in centimeters. Every predicted point is matched
/// to the ground-truth point nearest in NOCS; the task-space distances to the
/// matches are averaged. Direction is prediction to ground truth.
pub fn d_corr(pred_points: &[Vec3], pred_nocs: &[Vec3], gt_points: &[Vec3], gt_nocs: &[Vec3]) -> Result<f64> {
    check_aligned(pred_points.len(), pred_nocs.len(), "predicted points vs NOCS")?;
    check_aligned(gt_points.len(), gt_nocs.len(), "ground-truth points vs NOCS")?;
    non_empty(pred_points.len(), "predicted mesh points")?;
    non_empty(gt_points.len(), "ground-truth mesh points")?;
    let tree = KdTree::new(gt_nocs);
    let total: f64 = pred_points
        .iter()
        .zip(pred_nocs)
        .map(|(&p, &n)| dist(p, gt_points[tree.nearest(n).expect("non-empty").0]))
        .sum();
    Ok(total / pred_points.len() as f64 * 100.0)
}

pub fn d_corr_brute(pred_points: &[Vec3], pred_nocs: &[Vec3], gt_points: &[Vec3], gt_nocs: &[Vec3]) -> Result<f64> {
    check_aligned(pred_points.len(), pred_nocs.len(), "predicted points vs NOCS")?;
    check_aligned(gt_points.len(), gt_nocs.len(), "ground-truth points vs NOCS")?;
    non_empty(pred_points.len(), "predicted mesh points")?;
    non_empty(gt_points.len(), "ground-truth mesh points")?;
    let mut total = 0.0;
    for (&p, &n) in pred_points.iter().zip(pred_nocs) {
        let j = nearest_brute(gt_nocs, n).expect("non-empty").0;
        total += dist(p, gt_points[j]);
    }
    Ok(total / pred_points.len() as f64 * 100.0)
}

/// Fraction of frames with `d_corr < threshold` (strict).
pub fn accuracy_at(per_frame_d_corr: &[f64], threshold_cm: f64) -> Result<f64> {
    non_empty(per_frame_d_corr.len(), "d_corr list")?;
    let hits = per_frame_d_corr.iter().filter(|&&d| d < threshold_cm).count();
    Ok(hits as f64 / per_frame_d_corr.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub d_nocs: f64,
    /// Centimeters.
    pub d_chamf: f64,
    /// Centimeters.
    pub d_corr: f64,
}

/// Everything needed to score one tracked frame. Vertex lists share the
/// topology of `faces`.
#[derive(Clone, Debug)]
pub struct FrameEval {
    pub pred_nocs: Vec<Vec3>,
    pub gt_nocs: Vec<Vec3>,
    /// Refined canonical mesh vertices (NOCS).
    pub pred_canonical: Vec<Vec3>,
    /// Predicted task-space mesh vertices (meters).
    pub pred_task: Vec<Vec3>,
    pub gt_canonical: Vec<Vec3>,
    pub gt_task: Vec<Vec3>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub threshold_cm: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub seq_id: String,
    pub frames: Vec<FrameMetrics>,
    pub mean: FrameMetrics,
    pub accuracy: Vec<Accuracy>,
}

impl SequenceReport {
    pub fn from_frames(seq_id: impl Into<String>, frames: Vec<FrameMetrics>, thresholds_cm: &[f64]) -> Result<Self> {
        non_empty(frames.len(), "frame metric list")?;
        let n = frames.len() as f64;
        let mean = FrameMetrics {
            d_nocs: frames.iter().map(|f| f.d_nocs).sum::<f64>() / n,
            d_chamf: frames.iter().map(|f| f.d_chamf).sum::<f64>() / n,
            d_corr: frames.iter().map(|f| f.d_corr).sum::<f64>() / n,
        };
        let corr: Vec<f64> = frames.iter().map(|f| f.d_corr).collect();
        let mut sorted = thresholds_cm.to_vec();
        sorted.sort_by(f64::total_cmp);
        let accuracy = sorted
            .into_iter()
            .map(|d| Ok(Accuracy { threshold_cm: d, value: accuracy_at(&corr, d)? }))
            .collect::<Result<_>>()?;
        Ok(Self { seq_id: seq_id.into(), frames, mean, accuracy })
    }

    pub fn accuracy_at(&self, threshold_cm: f64) -> Option<f64> {
        self.accuracy.iter().find(|a| a.threshold_cm == threshold_cm).map(|a| a.value)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Scores every frame. Mesh metrics use `mesh_samples` area-uniform samples
/// drawn once (seeded) on the ground-truth canonical mesh; the same
/// barycentric samples are evaluated on all four vertex sets, so a perfect
/// prediction scores exactly zero.
pub fn evaluate_sequence(
    seq_id: &str,
    frames: &[FrameEval],
    faces: &[[u32; 3]],
    mesh_samples: usize,
    seed: u64,
    thresholds_cm: &[f64],
) -> Result<SequenceReport> {
    non_empty(frames.len(), "tracked frame list")?;
    let samples = sample_surface(&frames[0].gt_canonical, faces, mesh_samples, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut metrics = Vec::with_capacity(frames.len());
    for (t, f) in frames.iter().enumerate() {
        let v = f.gt_canonical.len();
        for (len, what) in [(f.pred_canonical.len(), "predicted canonical"), (f.pred_task.len(), "predicted task"), (f.gt_task.len(), "ground-truth task")] {
            if len != v {
                return Err(Error::Alignment(format!("frame {t}: {what} mesh has {len} vertices, expected {v}")));
            }
        }
        let pred_pts = eval_samples(&samples, &f.pred_task, faces);
        let gt_pts = eval_samples(&samples, &f.gt_task, faces);
        let pred_n = eval_samples(&samples, &f.pred_canonical, faces);
        let gt_n = eval_samples(&samples, &f.gt_canonical, faces);
        metrics.push(FrameMetrics {
            d_nocs: d_nocs(&f.pred_nocs, &f.gt_nocs)?,
            d_chamf: chamfer(&pred_pts, &gt_pts)?,
            d_corr: d_corr(&pred_pts, &pred_n, &gt_pts, &gt_n)?,
        });
    }
    SequenceReport::from_frames(seq_id, metrics, thresholds_cm)
}

/// Aggregate over several sequences: frame-weighted means and A_d.
pub fn aggregate(label: &str, reports: &[SequenceReport], thresholds_cm: &[f64]) -> Result<SequenceReport> {
    let frames: Vec<FrameMetrics> = reports.iter().flat_map(|r| r.frames.iter().copied()).collect();
    SequenceReport::from_frames(label, frames, thresholds_cm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()
    }

    #[test]
    fn kdtree_matches_linear_scan_including_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [1, 5, 9, 50, 1000] {
            let mut pts = cloud(&mut rng, n);
            // duplicates and a coarse lattice create exact distance ties
            pts.extend(pts.clone().into_iter().take(n / 3));
            pts.extend((0..27).map(|i| [(i % 3) as f64 * 0.5, (i / 3 % 3) as f64 * 0.5, (i / 9) as f64 * 0.5]));
            let tree = KdTree::new(&pts);
            for q in cloud(&mut rng, 200).into_iter().chain([[0.25, 0.25, 0.25], [0.5, 0.5, 0.5]]) {
                assert_eq!(tree.nearest(q), nearest_brute(&pts, q));
            }
        }
        assert!(KdTree::new(&[]).nearest([0.0; 3]).is_none());
    }

    #[test]
    fn chamfer_examples() {
        assert_eq!(chamfer(&[[0.0; 3]], &[[0.05, 0.0, 0.0]]).unwrap(), 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = cloud(&mut rng, 50);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert!(chamfer(&a, &[]).is_err());
    }

    #[test]
    fn d_corr_examples_and_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = cloud(&mut rng, 40);
        let nocs = cloud(&mut rng, 40);
        assert_eq!(d_corr(&pts, &nocs, &pts, &nocs).unwrap(), 0.0);
        let shifted: Vec<Vec3> = pts.iter().map(|p| [p[0] + 0.03, p[1], p[2]]).collect();
        assert!((d_corr(&shifted, &nocs, &pts, &nocs).unwrap() - 3.0).abs() < 1e-9);
        // many-to-one matching makes the measure asymmetric
        let pred_pts = vec![[0.0; 3], [0.1, 0.0, 0.0]];
        let pred_n = vec![[0.1; 3], [0.1; 3]];
        let gt_pts = vec![[0.0; 3], [1.0, 0.0, 0.0]];
        let gt_n = vec![[0.1; 3], [0.9; 3]];
        assert!((d_corr(&pred_pts, &pred_n, &gt_pts, &gt_n).unwrap() - 5.0).abs() < 1e-9);
        assert!((d_corr(&gt_pts, &gt_n, &pred_pts, &pred_n).unwrap() - 50.0).abs() < 1e-9);
    }

    #[test]
    fn d_nocs_examples() {
        let a = vec![[0.2, 0.3, 0.4], [0.9, 0.1, 0.5]];
        let b: Vec<Vec3> = a.iter().map(|p| [p[0] + 0.1, p[1], p[2]]).collect();
        assert_eq!(d_nocs(&a, &a).unwrap(), 0.0);
        assert!((d_nocs(&b, &a).unwrap() - 0.1).abs() < 1e-12);
        assert!(matches!(d_nocs(&a, &b[..1]), Err(Error::Alignment(_))));
    }

    #[test]
    fn accuracy_is_strict() {
        assert!((accuracy_at(&[2.0, 4.0, 6.0], 5.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy_at(&[1.0, 2.0], 5.0).unwrap(), 1.0);
        assert_eq!(accuracy_at(&[5.0], 5.0).unwrap(), 0.0);
        assert!(accuracy_at(&[], 5.0).is_err());
    }

    fn quad_frame(offset: f64) -> (FrameEval, Vec<[u32; 3]>) {
        let canon = vec![[0.1, 0.1, 0.5], [0.9, 0.1, 0.5], [0.9, 0.9, 0.5], [0.1, 0.9, 0.5]];
        let task: Vec<Vec3> = canon.iter().map(|v| [v[0] * 0.5, v[1] * 0.5, 0.0]).collect();
        let pred_task = task.iter().map(|v| [v[0] + offset, v[1], v[2]]).collect();
        let nocs = vec![[0.3, 0.3, 0.5], [0.6, 0.6, 0.5]];
        let frame = FrameEval {
            pred_nocs: nocs.clone(),
            gt_nocs: nocs,
            pred_canonical: canon.clone(),
            pred_task,
            gt_canonical: canon,
            gt_task: task,
        };
        (frame, vec![[0, 1, 2], [0, 2, 3]])
    }

    #[test]
    fn perfect_predictions_score_zero() {
        let (f, faces) = quad_frame(0.0);
        let r = evaluate_sequence("s", &[f.clone(), f], &faces, 300, 0, &[3.0, 5.0, 10.0]).unwrap();
        assert_eq!(r.mean, FrameMetrics::default());
        assert!(r.accuracy.iter().all(|a| a.value == 1.0));
    }

    #[test]
    fn report_means_and_round_trip() {
        let (a, faces) = quad_frame(0.02);
        let (b, _) = quad_frame(0.07);
        let r = evaluate_sequence("seq", &[a, b], &faces, 300, 0, &[10.0, 3.0, 5.0]).unwrap();
        let m = (r.frames[0].d_corr + r.frames[1].d_corr) / 2.0;
        assert_eq!(r.mean.d_corr, m);
        assert!((r.frames[0].d_corr - 2.0).abs() < 1e-9 && (r.frames[1].d_corr - 7.0).abs() < 1e-9);
        assert_eq!(r.accuracy_at(3.0), Some(0.5));
        assert_eq!(r.accuracy_at(5.0), Some(0.5));
        assert_eq!(r.accuracy_at(10.0), Some(1.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        r.save(&path).unwrap();
        assert_eq!(SequenceReport::load(&path).unwrap(), r);
    }

    proptest! {
        #[test]
        fn chamfer_symmetric_and_matches_brute(seed in 0u64..1000, n in 1usize..200, m in 1usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = cloud(&mut rng, n);
            let b = cloud(&mut rng, m);
            prop_assert_eq!(chamfer(&a, &b).unwrap(), chamfer_brute(&a, &b).unwrap());
            prop_assert_eq!(chamfer(&a, &b).unwrap(), chamfer(&b, &a).unwrap());
        }

        #[test]
        fn d_corr_matches_brute(seed in 0u64..1000, n in 1usize..200, m in 1usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (pp, pn, gp) = (cloud(&mut rng, n), cloud(&mut rng, n), cloud(&mut rng, m));
            // coarse NOCS labels force ties
            let gn: Vec<Vec3> = cloud(&mut rng, m).into_iter().map(|p| p.map(|v| (v * 4.0).round() / 4.0)).collect();
            prop_assert_eq!(d_corr(&pp, &pn, &gp, &gn).unwrap(), d_corr_brute(&pp, &pn, &gp, &gn).unwrap());
        }

        #[test]
        fn accuracy_monotone_in_threshold(d in proptest::collection::vec(0.0f64..20.0, 1..30), t in 0.0f64..20.0, dt in 0.0f64..5.0) {
            prop_assert!(accuracy_at(&d, t).unwrap() <= accuracy_at(&d, t + dt).unwrap());
        }
    }
}

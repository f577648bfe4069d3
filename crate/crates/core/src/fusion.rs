//! Inter-frame feature fusion and the raw NOCS classification head.
//!
//! Both frames get a learned positional embedding added to their encoder
//! features (previous frame: xyz and NOCS, current frame: xyz). A shared
//! self-attention block aggregates each frame, then cross-attention lets
//! every current-frame point attend over the previous frame.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::encoder::FEATURE_SCALE;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::nn::{LastLayer, Linear, Mlp};
use crate::nocs::{nocs_to_bins, NocsCoords, DEFAULT_BINS};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Width of the encoder features (and of the positional embeddings).
    pub feat_dim: usize,
    /// Q/K/V projection width.
    pub mid_dim: usize,
    /// Output MLP of each attention block, `[mid, hidden.., out]`.
    pub out_mlp: Vec<usize>,
    pub bins: usize,
    /// Include previous-frame NOCS in its positional embedding.
    pub nocs_embedding: bool,
    /// Add the projected query back onto the attended values.
    pub query_residual: bool,
    /// Initial softmax temperature applied to cosine similarities.
    pub init_temperature: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            feat_dim: 64,
            mid_dim: 64,
            out_mlp: vec![64, 128, 128],
            bins: DEFAULT_BINS,
            nocs_embedding: true,
            query_residual: true,
            init_temperature: 10.0,
        }
    }
}

impl FusionConfig {
    pub fn scaled(&self, div: usize) -> Self {
        let d = |c: usize| (c / div.max(1)).max(1);
        Self {
            feat_dim: d(self.feat_dim),
            mid_dim: d(self.mid_dim),
            out_mlp: self.out_mlp.iter().map(|&c| d(c)).collect(),
            ..self.clone()
        }
    }

    pub fn out_dim(&self) -> usize {
        *self.out_mlp.last().expect("non-empty out_mlp")
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_mlp.len() < 2 || self.out_mlp[0] != self.mid_dim {
            return Err(Error::Config(format!(
                "attention output MLP must start at the mid width {}, got {:?}",
                self.mid_dim, self.out_mlp
            )));
        }
        if self.bins < 2 {
            return Err(Error::Config(format!("need at least 2 bins, got {}", self.bins)));
        }
        Ok(())
    }
}

/// Fused per-point features aligned with the current-frame points.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionFeatures {
    pub features: Mat,
}

/// Single-layer, single-head attention with L2-normalized query/key
/// projections.
#[derive(Clone, Debug)]
pub struct RelationAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    log_temperature: ParamId,
    out: Mlp,
    query_residual: bool,
}

impl RelationAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, in_dim: usize, cfg: &FusionConfig) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), in_dim, cfg.mid_dim),
            k: Linear::new(store, rng, &format!("{name}.k"), in_dim, cfg.mid_dim),
            v: Linear::new(store, rng, &format!("{name}.v"), in_dim, cfg.mid_dim),
            log_temperature: store.add(format!("{name}.log_temperature"), Mat::scalar(cfg.init_temperature.ln())),
            out: Mlp::new(store, rng, &format!("{name}.out"), &cfg.out_mlp, false, LastLayer::Random),
            query_residual: cfg.query_residual,
        }
    }

    /// Attention weights (`N_q×N_k`) and the block output (`N_q×out`).
    pub fn forward_with_weights(&self, tape: &mut Tape, store: &ParamStore, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        if tape.value(k).rows == 0 {
            return Err(Error::InvalidInput("attention over an empty key set".into()));
        }
        if tape.value(k).rows != tape.value(v).rows {
            return Err(Error::InvalidInput("key/value row counts differ".into()));
        }
        let qp = self.q.forward(tape, store, q);
        let kp = self.k.forward(tape, store, k);
        let vp = self.v.forward(tape, store, v);
        let qn = tape.l2_normalize_rows(qp);
        let kn = tape.l2_normalize_rows(kp);
        let sim = tape.matmul_nt(qn, kn);
        let log_t = tape.param(store, self.log_temperature);
        let t = tape.exp(log_t);
        let sim = tape.scale_by(sim, t);
        let attn = tape.softmax_rows(sim);
        let mut h = tape.matmul(attn, vp);
        if self.query_residual {
            h = tape.add(h, qp);
        }
        Ok((attn, self.out.forward(tape, store, h)))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, q: Var, k: Var, v: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, store, q, k, v)?.1)
    }
}

/// Per-frame inputs of the positional embeddings. Coordinates are expected
/// to be zero-centered per frame.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingInputs<'a> {
    pub prev_xyz: &'a [Vec3],
    pub prev_nocs: &'a [Vec3],
    pub curr_xyz: &'a [Vec3],
}

/// Variables produced by one fusion pass.
#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub fused: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub config: FusionConfig,
    f1: Mlp,
    f2: Mlp,
    self_attn: RelationAttention,
    cross_attn: RelationAttention,
    head: Mlp,
}

fn xyz_rows(points: &[Vec3]) -> Mat {
    Mat::from_vec(points.len(), 3, points.iter().flatten().map(|v| v / FEATURE_SCALE).collect())
}

impl Fusion {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: FusionConfig) -> Result<Self> {
        config.validate()?;
        let c = config.feat_dim;
        let d = config.out_dim();
        let f1_in = if config.nocs_embedding { 6 } else { 3 };
        Ok(Self {
            f1: Mlp::new(store, rng, "fusion.embed_prev", &[f1_in, c, c], false, LastLayer::Random),
            f2: Mlp::new(store, rng, "fusion.embed_curr", &[3, c, c], false, LastLayer::Random),
            self_attn: RelationAttention::new(store, rng, "fusion.self_attn", c, &config),
            cross_attn: RelationAttention::new(store, rng, "fusion.cross_attn", d, &config),
            head: Mlp::new(store, rng, "fusion.nocs_head", &[d, d, 3 * config.bins], false, LastLayer::Random),
            config,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim()
    }

    /// `(emb₁, emb₂)`, each with `feat_dim` columns.
    pub fn positional_embedding(&self, tape: &mut Tape, store: &ParamStore, inputs: EmbeddingInputs<'_>) -> Result<(Var, Var)> {
        if inputs.prev_xyz.len() != inputs.prev_nocs.len() {
            return Err(Error::Alignment(format!(
                "{} previous points but {} NOCS rows",
                inputs.prev_xyz.len(),
                inputs.prev_nocs.len()
            )));
        }
        let prev = if self.config.nocs_embedding {
            // rejects NOCS outside the unit cube
            NocsCoords::new(inputs.prev_nocs.to_vec())?;
            let mut m = Mat::zeros(inputs.prev_xyz.len(), 6);
            for (r, (p, n)) in inputs.prev_xyz.iter().zip(inputs.prev_nocs).enumerate() {
                let row = m.row_mut(r);
                for k in 0..3 {
                    row[k] = p[k] / FEATURE_SCALE;
                    row[k + 3] = n[k];
                }
            }
            m
        } else {
            xyz_rows(inputs.prev_xyz)
        };
        let prev = tape.constant(prev);
        let curr = tape.constant(xyz_rows(inputs.curr_xyz));
        Ok((self.f1.forward(tape, store, prev), self.f2.forward(tape, store, curr)))
    }

    /// `X̂ = Att(X̄₂, X̄₁, X̄₁)` with `X̄ᵢ = Att(Xᵢ, Xᵢ, Xᵢ)`.
    pub fn fuse(&self, tape: &mut Tape, store: &ParamStore, x1: Var, x2: Var) -> Result<Var> {
        let s1 = self.self_attn.forward(tape, store, x1, x1, x1)?;
        let s2 = self.self_attn.forward(tape, store, x2, x2, x2)?;
        self.cross_attn.forward(tape, store, s2, s1, s1)
    }

    pub fn predict_logits(&self, tape: &mut Tape, store: &ParamStore, fused: Var) -> Var {
        self.head.forward(tape, store, fused)
    }

    /// Embeddings, fusion and raw logits from encoder features of both frames.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        feat_prev: Var,
        feat_curr: Var,
        inputs: EmbeddingInputs<'_>,
    ) -> Result<FusionOutput> {
        let (e1, e2) = self.positional_embedding(tape, store, inputs)?;
        if tape.value(e1).shape() != tape.value(feat_prev).shape() || tape.value(e2).shape() != tape.value(feat_curr).shape() {
            return Err(Error::InvalidInput("encoder features do not match the embedding shapes".into()));
        }
        let x1 = tape.add(feat_prev, e1);
        let x2 = tape.add(feat_curr, e2);
        let fused = self.fuse(tape, store, x1, x2)?;
        let logits = self.predict_logits(tape, store, fused);
        Ok(FusionOutput { fused, logits })
    }

    pub fn self_attention(&self) -> &RelationAttention {
        &self.self_attn
    }

    pub fn cross_attention(&self) -> &RelationAttention {
        &self.cross_attn
    }
}

/// Mean over points and axes of the cross-entropy against the bins of
/// `gt`.
pub fn nocs_classification_loss(tape: &mut Tape, logits: Var, gt: &NocsCoords, bins: usize) -> Result<Var> {
    let (rows, cols) = tape.value(logits).shape();
    if rows != gt.len() {
        return Err(Error::Alignment(format!("{rows} logit rows vs {} NOCS labels", gt.len())));
    }
    if cols != 3 * bins {
        return Err(Error::InvalidInput(format!("logit width {cols} != 3x{bins}")));
    }
    let targets: Vec<usize> = nocs_to_bins(gt.as_slice(), bins)?.into_iter().flatten().collect();
    Ok(tape.cross_entropy(logits, Rc::new(targets), bins))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check_param_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn rand_points(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| [0; 3].map(|_| rng.random_range(lo..hi))).collect()
    }

    fn small_config() -> FusionConfig {
        FusionConfig { feat_dim: 6, mid_dim: 5, out_mlp: vec![5, 7, 8], bins: 4, ..FusionConfig::default() }
    }

    fn build(cfg: FusionConfig) -> (ParamStore, Fusion) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = Fusion::new(&mut store, &mut rng, cfg).unwrap();
        (store, f)
    }

    fn run(f: &Fusion, store: &ParamStore, feat1: &Mat, feat2: &Mat, inputs: EmbeddingInputs<'_>) -> (Mat, Mat) {
        let mut tape = Tape::new();
        let a = tape.constant(feat1.clone());
        let b = tape.constant(feat2.clone());
        let out = f.forward(&mut tape, store, a, b, inputs).unwrap();
        (tape.value(out.fused).clone(), tape.value(out.logits).clone())
    }

    #[test]
    fn default_shapes() {
        let (store, f) = build(FusionConfig::default());
        let (p1, n1, p2) = (rand_points(5, 1, -0.2, 0.2), rand_points(5, 2, 0.0, 1.0), rand_points(7, 3, -0.2, 0.2));
        let mut tape = Tape::new();
        let inputs = EmbeddingInputs { prev_xyz: &p1, prev_nocs: &n1, curr_xyz: &p2 };
        let (e1, e2) = f.positional_embedding(&mut tape, &store, inputs).unwrap();
        assert_eq!(tape.value(e1).shape(), (5, 64));
        assert_eq!(tape.value(e2).shape(), (7, 64));
        let (fused, logits) = run(&f, &store, &rand_mat(5, 64, 4), &rand_mat(7, 64, 5), inputs);
        assert_eq!(fused.shape(), (7, 128));
        assert_eq!(logits.shape(), (7, 192));
    }

    #[test]
    fn embedding_rejects_out_of_range_nocs() {
        let (store, f) = build(small_config());
        let p = rand_points(3, 1, -0.1, 0.1);
        let bad = vec![[0.5, 1.2, 0.0], [0.1; 3], [0.2; 3]];
        let mut tape = Tape::new();
        let r = f.positional_embedding(&mut tape, &store, EmbeddingInputs { prev_xyz: &p, prev_nocs: &bad, curr_xyz: &p });
        assert!(r.is_err());
    }

    #[test]
    fn zero_embedding_weights_give_zero_embeddings() {
        let (mut store, f) = build(small_config());
        let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with("fusion.embed")).collect();
        for id in ids {
            store.value_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let (p1, n1, p2) = (rand_points(4, 1, -0.2, 0.2), rand_points(4, 2, 0.0, 1.0), rand_points(3, 3, -0.2, 0.2));
        let mut tape = Tape::new();
        let (e1, e2) = f.positional_embedding(&mut tape, &store, EmbeddingInputs { prev_xyz: &p1, prev_nocs: &n1, curr_xyz: &p2 }).unwrap();
        assert!(tape.value(e1).data.iter().chain(&tape.value(e2).data).all(|&v| v == 0.0));
    }

    #[test]
    fn ablation_builds_prev_embedding_from_xyz_only() {
        let (store, f) = build(FusionConfig { nocs_embedding: false, ..small_config() });
        assert_eq!(store.value(store.find("fusion.embed_prev.0.weight").unwrap()).rows, 3);
        let p = rand_points(4, 1, -0.2, 0.2);
        let (n_a, n_b) = (rand_points(4, 2, 0.0, 1.0), rand_points(4, 3, 0.0, 1.0));
        let feats = (rand_mat(4, 6, 4), rand_mat(4, 6, 5));
        let a = run(&f, &store, &feats.0, &feats.1, EmbeddingInputs { prev_xyz: &p, prev_nocs: &n_a, curr_xyz: &p });
        let b = run(&f, &store, &feats.0, &feats.1, EmbeddingInputs { prev_xyz: &p, prev_nocs: &n_b, curr_xyz: &p });
        assert_eq!(a, b);
    }

    #[test]
    fn single_key_gets_full_weight() {
        for residual in [false, true] {
            let cfg = FusionConfig { query_residual: residual, ..small_config() };
            let (store, f) = build(cfg);
            let ram = f.cross_attention();
            let mut tape = Tape::new();
            let q = tape.constant(rand_mat(3, 8, 1));
            let kv = tape.constant(rand_mat(1, 8, 2));
            let (attn, out) = ram.forward_with_weights(&mut tape, &store, q, kv, kv).unwrap();
            assert!(tape.value(attn).data.iter().all(|&w| w == 1.0));
            // reference: out MLP applied to the value projection (plus query projection)
            let mut t2 = Tape::new();
            let kv2 = t2.constant(rand_mat(1, 8, 2));
            let mut h = ram.v.forward(&mut t2, &store, kv2);
            let h_rows = t2.broadcast_rows(h, 3);
            h = h_rows;
            if residual {
                let q2 = t2.constant(rand_mat(3, 8, 1));
                let qp = ram.q.forward(&mut t2, &store, q2);
                h = t2.add(h, qp);
            }
            let expected = ram.out.forward(&mut t2, &store, h);
            assert!(tape.value(out).max_abs_diff(t2.value(expected)) < 1e-12);
        }
    }

    #[test]
    fn duplicated_queries_give_identical_rows_and_empty_keys_fail() {
        let (store, f) = build(small_config());
        let ram = f.self_attention();
        let mut tape = Tape::new();
        let mut qm = rand_mat(3, 6, 1);
        let r0 = qm.row(0).to_vec();
        qm.row_mut(2).copy_from_slice(&r0);
        let q = tape.constant(qm);
        let k = tape.constant(rand_mat(2, 6, 2));
        let out = ram.forward(&mut tape, &store, q, k, k).unwrap();
        let o = tape.value(out);
        assert_eq!(o.shape(), (3, 8));
        assert_eq!(o.row(0), o.row(2));
        let empty = tape.constant(Mat::zeros(0, 6));
        assert!(ram.forward(&mut tape, &store, q, empty, empty).is_err());
    }

    #[test]
    fn permutation_properties() {
        let (store, f) = build(small_config());
        let (p1, n1, p2) = (rand_points(4, 1, -0.2, 0.2), rand_points(4, 2, 0.0, 1.0), rand_points(5, 3, -0.2, 0.2));
        let (f1, f2) = (rand_mat(4, 6, 4), rand_mat(5, 6, 5));
        let base = run(&f, &store, &f1, &f2, EmbeddingInputs { prev_xyz: &p1, prev_nocs: &n1, curr_xyz: &p2 });
        let perm1 = [2, 0, 3, 1];
        let pick = |v: &[Vec3], p: &[usize]| p.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let (q1, m1) = (pick(&p1, &perm1), pick(&n1, &perm1));
        let r = run(&f, &store, &f1.select_rows(&perm1), &f2, EmbeddingInputs { prev_xyz: &q1, prev_nocs: &m1, curr_xyz: &p2 });
        assert!(r.0.max_abs_diff(&base.0) < 1e-12);
        let perm2 = [4, 2, 0, 1, 3];
        let q2 = pick(&p2, &perm2);
        let r = run(&f, &store, &f1, &f2.select_rows(&perm2), EmbeddingInputs { prev_xyz: &p1, prev_nocs: &n1, curr_xyz: &q2 });
        assert!(r.0.max_abs_diff(&base.0.select_rows(&perm2)) < 1e-12);
        assert!(r.1.max_abs_diff(&base.1.select_rows(&perm2)) < 1e-12);
    }

    #[test]
    fn loss_examples() {
        let gt = NocsCoords::new(vec![[0.1, 0.5, 0.9], [0.3, 0.3, 0.3]]).unwrap();
        let mut tape = Tape::new();
        let uniform = tape.constant(Mat::zeros(2, 192));
        let l = nocs_classification_loss(&mut tape, uniform, &gt, 64).unwrap();
        assert!((tape.scalar(l) - 64f64.ln()).abs() < 1e-12);
        assert!((64f64.ln() - 4.1589).abs() < 1e-4);
        let bins = nocs_to_bins(gt.as_slice(), 64).unwrap();
        let sharp = crate::nocs::NocsLogits::one_hot(&bins, 64, 50.0).unwrap();
        let s = tape.constant(sharp.as_mat().clone());
        let l = nocs_classification_loss(&mut tape, s, &gt, 64).unwrap();
        assert!(tape.scalar(l) >= 0.0 && tape.scalar(l) < 1e-15);
        let short = tape.constant(Mat::zeros(1, 192));
        assert!(nocs_classification_loss(&mut tape, short, &gt, 64).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (mut store, f) = build(small_config());
        let (p1, n1, p2) = (rand_points(5, 1, -0.2, 0.2), rand_points(5, 2, 0.0, 1.0), rand_points(6, 3, -0.2, 0.2));
        let gt = NocsCoords::new(rand_points(6, 9, 0.0, 1.0)).unwrap();
        let (f1, f2) = (rand_mat(5, 6, 4), rand_mat(6, 6, 5));
        let ids: Vec<_> = store.ids().collect();
        let report = check_param_gradients(&mut store, &ids, 1, 1e-6, |store| {
            let mut tape = Tape::new();
            let a = tape.constant(f1.clone());
            let b = tape.constant(f2.clone());
            let out = f.forward(&mut tape, store, a, b, EmbeddingInputs { prev_xyz: &p1, prev_nocs: &n1, curr_xyz: &p2 }).unwrap();
            let l = nocs_classification_loss(&mut tape, out.logits, &gt, 4).unwrap();
            (tape, l)
        });
        assert!(report.max_rel_err < 1e-3, "{}", report.worst);
        assert!(report.checked > 300);
    }
}

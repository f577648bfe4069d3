//! Joint end-to-end training on consecutive frame pairs.
//!
//! Every pair is teacher forced: the previous frame enters with its
//! ground-truth NOCS, perturbed by the configured augmentation, and the
//! canonical mesh enters with a random global scale.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::SequenceDataset;
use crate::error::{Error, Result};
use crate::eval::d_nocs;
use crate::fusion::nocs_classification_loss;
use crate::geom::{sub, Vec3};
use crate::mesh::{eval_samples, sample_surface};
use crate::model::{Model, PairInputs};
use crate::nocs::{perturb_mesh, perturb_nocs};
use crate::refiner::refiner_losses;
use crate::warpfield::warp_loss;

/// Unweighted loss terms of one pair (or their mean over a step).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub nocs: f64,
    pub refine: f64,
    pub mesh: f64,
    pub warp: f64,
    /// Weighted sum.
    pub total: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.nocs += o.nocs;
        self.refine += o.refine;
        self.mesh += o.mesh;
        self.warp += o.warp;
        self.total += o.total;
    }

    fn scaled(&self, s: f64) -> LossParts {
        LossParts {
            nocs: self.nocs * s,
            refine: self.refine * s,
            mesh: self.mesh * s,
            warp: self.warp * s,
            total: self.total * s,
        }
    }

    fn is_finite(&self) -> bool {
        [self.nocs, self.refine, self.mesh, self.warp, self.total].iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// 1-based epoch being trained.
    pub epoch: usize,
    /// Optimizer steps taken so far, over the whole run.
    pub step: u64,
    pub pairs: usize,
    pub loss: LossParts,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub loss: LossParts,
    /// Mean refined-prediction NOCS error on the teacher-forced pairs.
    pub d_nocs: f64,
    pub seconds: f64,
}

/// A (sequence, frame) index; the pair is frames `t-1` and `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairRef {
    pub seq: usize,
    pub t: usize,
}

pub fn enumerate_pairs(data: &[SequenceDataset]) -> Vec<PairRef> {
    data.iter().enumerate().flat_map(|(seq, ds)| (1..ds.len()).map(move |t| PairRef { seq, t })).collect()
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
}

struct PairLoss {
    loss: Var,
    parts: LossParts,
    d_nocs: f64,
}

fn check_training_data(data: &[SequenceDataset]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidInput("no training sequences".into()));
    }
    for ds in data {
        ds.validate()?;
        for f in &ds.frames {
            f.gt_nocs()?;
            f.mesh_vertices()?;
        }
    }
    Ok(())
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model, config.seed)?;
        let optimizer = Adam::new(&model.store, config.train.learning_rate);
        Ok(Self { config, model, optimizer, epoch: 0 })
    }

    /// Resumes from a checkpoint. The optimizer state is restored when the
    /// checkpoint carries one; the learning rate follows the checkpoint's config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ck.model()?;
        let optimizer = match &ck.optimizer {
            Some(o) if o.matches(&model.store) => o.clone(),
            Some(_) => return Err(Error::Config("checkpoint optimizer state does not fit the model".into())),
            None => Adam::new(&model.store, ck.config.train.learning_rate),
        };
        Ok(Self { config: ck.config.clone(), model, optimizer, epoch: ck.epoch })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, &self.config, self.epoch, Some(&self.optimizer))
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.config.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x7a11)
    }

    fn pair_loss(&self, tape: &mut Tape, ds: &SequenceDataset, t: usize, rng: &mut ChaCha8Rng) -> Result<PairLoss> {
        let tc = &self.config.train;
        let w = &tc.loss_weights;
        let bins = self.model.bins();
        let prev = ds.frames[t - 1].resample(tc.pc_samples, rng);
        let curr = ds.frames[t].resample(tc.pc_samples, rng);
        let prev_nocs = perturb_nocs(prev.gt_nocs()?, &tc.noise, rng)?;
        let curr_gt = curr.gt_nocs()?;

        let canonical = &ds.canonical_mesh;
        let mesh_in = perturb_mesh(canonical, &tc.noise.s_mesh, rng);
        let mesh_samples = sample_surface(&mesh_in.vertices, &mesh_in.faces, tc.mesh_samples, rng)?;
        let mesh_points = eval_samples(&mesh_samples, &mesh_in.vertices, &mesh_in.faces);
        let warp_samples = sample_surface(&canonical.vertices, &canonical.faces, tc.warp_queries, rng)?;
        let queries = eval_samples(&warp_samples, &canonical.vertices, &canonical.faces);
        let targets = eval_samples(&warp_samples, curr.mesh_vertices()?, &canonical.faces);

        let out = self.model.forward_pair(
            tape,
            PairInputs {
                prev_points: &prev.points,
                prev_nocs: prev_nocs.as_slice(),
                curr_points: &curr.points,
                mesh_points: &mesh_points,
                mesh_vertices: &mesh_in.vertices,
                warp_queries: Some(&queries),
                scatter_nocs: tc.scatter_with_gt_nocs.then_some(curr_gt.as_slice()),
            },
        )?;
        let raw_ce = nocs_classification_loss(tape, out.raw_logits, curr_gt, bins)?;
        let (ref_ce, mesh_l2) = refiner_losses(tape, &out.refiner, curr_gt, &canonical.vertices, bins)?;
        let rel_targets: Vec<Vec3> = targets.iter().map(|&p| sub(p, out.curr_centroid)).collect();
        let warp_l2 = warp_loss(tape, out.warp, &rel_targets)?;

        let terms = [(raw_ce, w.nocs), (ref_ce, w.refine), (mesh_l2, w.mesh), (warp_l2, w.warp)];
        let mut loss = tape.scale(terms[0].0, terms[0].1);
        for &(v, wt) in &terms[1..] {
            let s = tape.scale(v, wt);
            loss = tape.add(loss, s);
        }
        let parts = LossParts {
            nocs: tape.scalar(raw_ce),
            refine: tape.scalar(ref_ce),
            mesh: tape.scalar(mesh_l2),
            warp: tape.scalar(warp_l2),
            total: tape.scalar(loss),
        };
        Ok(PairLoss { loss, parts, d_nocs: d_nocs(&out.refined_nocs, curr_gt.as_slice())? })
    }

    /// One pass over every pair in shuffled order, one optimizer step per
    /// `batch_size` pairs (gradients are averaged over the batch).
    pub fn train_epoch(&mut self, data: &[SequenceDataset], mut on_step: impl FnMut(&StepLog)) -> Result<EpochStats> {
        check_training_data(data)?;
        let start = Instant::now();
        let epoch = self.epoch + 1;
        let mut rng = self.epoch_rng(epoch);
        let mut pairs = enumerate_pairs(data);
        pairs.shuffle(&mut rng);
        let mut sum = LossParts::default();
        let mut nocs_err = 0.0;
        let mut steps = 0;
        for batch in pairs.chunks(self.config.train.batch_size) {
            self.model.store.zero_grad();
            let mut step_sum = LossParts::default();
            for p in batch {
                let mut tape = Tape::new();
                let pl = self.pair_loss(&mut tape, &data[p.seq], p.t, &mut rng)?;
                if !pl.parts.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite loss at epoch {epoch}, step {}, sequence {} frame {}: {:?}",
                        self.optimizer.step + 1,
                        data[p.seq].manifest.seq_id,
                        p.t,
                        pl.parts
                    )));
                }
                let grads = tape.backward(pl.loss);
                self.model.store.accumulate(&grads);
                step_sum.add(&pl.parts);
                nocs_err += pl.d_nocs;
            }
            self.model.store.scale_grads(1.0 / batch.len() as f64);
            if !self.model.store.grads_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite gradient at epoch {epoch}, step {}",
                    self.optimizer.step + 1
                )));
            }
            self.optimizer.step(&mut self.model.store);
            steps += 1;
            sum.add(&step_sum);
            on_step(&StepLog {
                epoch,
                step: self.optimizer.step,
                pairs: batch.len(),
                loss: step_sum.scaled(1.0 / batch.len() as f64),
            });
        }
        self.epoch = epoch;
        let n = pairs.len() as f64;
        Ok(EpochStats {
            epoch,
            steps,
            loss: sum.scaled(1.0 / n),
            d_nocs: nocs_err / n,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Trains until `self.epoch == epochs`, writing `checkpoint` (when given)
    /// after every epoch.
    pub fn fit(
        &mut self,
        data: &[SequenceDataset],
        epochs: usize,
        checkpoint: Option<&Path>,
        mut on_step: impl FnMut(&StepLog),
        mut on_epoch: impl FnMut(&EpochStats),
    ) -> Result<Vec<EpochStats>> {
        let mut stats = Vec::new();
        while self.epoch < epochs {
            let s = self.train_epoch(data, &mut on_step)?;
            if let Some(path) = checkpoint {
                self.checkpoint().save(path)?;
            }
            on_epoch(&s);
            stats.push(s);
        }
        Ok(stats)
    }
}

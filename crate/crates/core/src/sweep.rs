//! Robustness experiments: tracking quality as the first-frame pose noise
//! grows, and as frames are dropped from the input video.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::TrackConfig;
use crate::container::{read_json, write_json};
use crate::dataset::SequenceDataset;
use crate::error::{Error, Result};
use crate::eval::{aggregate, evaluate_sequence, FrameMetrics, SequenceReport};
use crate::model::Model;
use crate::nocs::{NoiseLevel, NoiseParams};
use crate::synth::Script;
use crate::tracker::{mix, remove_static_frames, subsample_frames, track_sequence, InitPose, TrackRun, TrackerConfig};

/// Kept fraction of frames in the frame-drop sweep.
pub const FRAME_DROP_KEEP: [(f64, &str); 4] = [(1.0 / 2.0, "1/2"), (1.0 / 4.0, "1/4"), (1.0 / 6.0, "1/6"), (1.0 / 8.0, "1/8")];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Noise,
    FrameDrop,
}

impl FromStr for SweepKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Self::Noise),
            "frame-drop" | "frame_drop" => Ok(Self::FrameDrop),
            _ => Err(Error::Config(format!("unknown sweep {s:?} (expected noise or frame-drop)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    DNocs,
    DChamf,
    DCorr,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::DNocs, Metric::DChamf, Metric::DCorr];

    pub fn of(self, m: &FrameMetrics) -> f64 {
        match self {
            Metric::DNocs => m.d_nocs,
            Metric::DChamf => m.d_chamf,
            Metric::DCorr => m.d_corr,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Metric::DNocs => "D_nocs",
            Metric::DChamf => "D_chamf (cm)",
            Metric::DCorr => "D_corr (cm)",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub label: String,
    /// Noise multiplier, or the kept frame fraction.
    pub x: f64,
    /// Aggregate over all swept sequences.
    pub report: SequenceReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub kind: SweepKind,
    pub points: Vec<SweepPoint>,
}

impl Sweep {
    pub fn curve(&self, metric: Metric) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.x, metric.of(&p.report.mean))).collect()
    }

    /// A_d at each sweep point.
    pub fn accuracy_curve(&self, threshold_cm: f64) -> Vec<(f64, f64)> {
        self.points.iter().filter_map(|p| p.report.accuracy_at(threshold_cm).map(|a| (p.x, a))).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Steps along `values` where the error went down (improved), with the relative
/// size of each drop.
pub fn inversions(values: &[f64]) -> Vec<f64> {
    values.windows(2).filter(|w| w[1] < w[0]).map(|w| (w[0] - w[1]) / w[0].abs().max(f64::MIN_POSITIVE)).collect()
}

/// Tracker settings for one sequence; the refinement budget follows its script.
pub fn tracker_config(seq: &SequenceDataset, track: &TrackConfig, seed: u64) -> TrackerConfig {
    TrackerConfig::from_track(track, seq.manifest.script.parse::<Script>().ok(), seed)
}

/// Tracks `seq` from `pose` and scores the run against its ground truth.
pub fn evaluate_tracking(
    model: &Model,
    seq: &SequenceDataset,
    pose: &InitPose,
    track: &TrackConfig,
    seed: u64,
) -> Result<(TrackRun, SequenceReport)> {
    let run = track_sequence(model, seq, pose, &tracker_config(seq, track, seed))?;
    let report = evaluate_sequence(&run.seq_id, &run.frame_evals(seq)?, &run.faces, track.mesh_samples, seed, &track.thresholds_cm)?;
    Ok((run, report))
}

fn perturbed_pose(seq: &SequenceDataset, level: NoiseLevel, seed: u64) -> Result<InitPose> {
    InitPose::perturbed(&seq.frames[0], &seq.canonical_mesh, &NoiseParams::level(level), seed)
}

/// Perturbed first-frame init at 1x, 2x and 3x noise. Every level reuses the
/// same draws, so only the noise magnitude changes between points.
pub fn noise_sweep(model: &Model, seqs: &[SequenceDataset], track: &TrackConfig, seed: u64) -> Result<Sweep> {
    let seqs = moving(seqs, track)?;
    let mut points = Vec::new();
    for level in NoiseLevel::ALL {
        let mut reports = Vec::with_capacity(seqs.len());
        for (i, seq) in seqs.iter().enumerate() {
            let s = mix(seed, i as u64);
            reports.push(evaluate_tracking(model, seq, &perturbed_pose(seq, level, s)?, track, s)?.1);
        }
        points.push(SweepPoint {
            label: level.label().into(),
            x: level.multiplier() as f64,
            report: aggregate(level.label(), &reports, &track.thresholds_cm)?,
        });
    }
    Ok(Sweep { kind: SweepKind::Noise, points })
}

/// Keeps 1/2, 1/4, 1/6 and 1/8 of the frames, tracking from the configured
/// perturbed init. Sequences too short for a ratio are skipped at that ratio.
pub fn frame_drop_sweep(model: &Model, seqs: &[SequenceDataset], track: &TrackConfig, seed: u64) -> Result<Sweep> {
    let seqs = moving(seqs, track)?;
    let mut points = Vec::new();
    for (keep, label) in FRAME_DROP_KEEP {
        let mut reports = Vec::new();
        for (i, seq) in seqs.iter().enumerate() {
            let Ok(sub) = subsample_frames(seq, keep) else { continue };
            let s = mix(seed, i as u64);
            reports.push(evaluate_tracking(model, &sub, &perturbed_pose(&sub, track.init_noise, s)?, track, s)?.1);
        }
        if reports.is_empty() {
            return Err(Error::InvalidInput(format!("no sequence is long enough to keep {label} of its frames")));
        }
        points.push(SweepPoint { label: label.into(), x: keep, report: aggregate(label, &reports, &track.thresholds_cm)? });
    }
    Ok(Sweep { kind: SweepKind::FrameDrop, points })
}

pub fn run_sweep(kind: SweepKind, model: &Model, seqs: &[SequenceDataset], track: &TrackConfig, seed: u64) -> Result<Sweep> {
    match kind {
        SweepKind::Noise => noise_sweep(model, seqs, track, seed),
        SweepKind::FrameDrop => frame_drop_sweep(model, seqs, track, seed),
    }
}

fn moving(seqs: &[SequenceDataset], track: &TrackConfig) -> Result<Vec<SequenceDataset>> {
    if seqs.is_empty() {
        return Err(Error::InvalidInput("sweep needs at least one sequence".into()));
    }
    seqs.iter()
        .map(|s| {
            let m = remove_static_frames(s, track.static_threshold)?;
            // a fully static clip still has to be trackable
            if m.len() < 2 { Ok(s.clone()) } else { Ok(m) }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inversions_report_relative_improvements() {
        assert!(inversions(&[1.0, 2.0, 3.0]).is_empty());
        let inv = inversions(&[1.0, 2.0, 1.9]);
        assert!(inv.len() == 1 && (inv[0] - 0.05).abs() < 1e-12);
        assert!((inversions(&[4.0, 3.0])[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn sweep_kind_parses_cli_spellings() {
        assert_eq!("noise".parse::<SweepKind>().unwrap(), SweepKind::Noise);
        assert_eq!("frame-drop".parse::<SweepKind>().unwrap(), SweepKind::FrameDrop);
        assert!("drop".parse::<SweepKind>().is_err());
    }
}

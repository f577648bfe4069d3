use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use garmenttrack::checkpoint::Checkpoint;
use garmenttrack::config::RunConfig;
use garmenttrack::dataset::{list_sequences, read_dataset, SequenceDataset, SplitIndex};
use garmenttrack::error::{Error, Result};
use garmenttrack::eval::{aggregate, evaluate_sequence, SequenceReport};
use garmenttrack::nocs::{NoiseLevel, NoiseParams};
use garmenttrack::plot::{plot_metric_vs_frame, plot_sweep};
use garmenttrack::sweep::{run_sweep, tracker_config, Metric, Sweep, SweepKind};
use garmenttrack::synth::{generate_dataset, SPLITS};
use garmenttrack::tracker::{mix, moving_frames, track_sequence, InitPose, InitSource, TrackRun};
use garmenttrack::train::Trainer;

#[derive(Parser)]
#[command(name = "garmenttrack", version, about = "Garment pose tracking: data generation, training, tracking and evaluation")]
struct Cli {
    /// Run configuration (JSON). Missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice. Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic manipulation dataset.
    Generate {
        #[arg(long, env = "GT_DATA_ROOT")]
        out: PathBuf,
    },
    /// Train the tracker; writes a checkpoint after every epoch.
    Train {
        #[arg(long, env = "GT_DATA_ROOT")]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value = "model.ckpt")]
        out: PathBuf,
        /// Total epoch count to reach; a resumed run continues up to it
        /// (default: the configuration's).
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from this checkpoint, keeping its configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train on the first sequence only (200 epochs unless --epochs).
        #[arg(long)]
        overfit: bool,
    },
    /// Track sequences and write per-frame predictions and timings.
    Track {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, env = "GT_DATA_ROOT")]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Track this sequence directory instead of a split.
        #[arg(long)]
        sequence: Option<PathBuf>,
        /// ground_truth, perturbed or external_file.
        #[arg(long, default_value = "perturbed")]
        init: InitSource,
        /// Directory holding the first-frame pose for --init external_file.
        #[arg(long)]
        init_file: Option<PathBuf>,
        /// Noise level of the perturbed init (default: the configuration's).
        #[arg(long)]
        noise: Option<NoiseLevel>,
        #[arg(long, default_value = "predictions")]
        out: PathBuf,
    },
    /// Score predictions, or run a robustness sweep with --sweep.
    Eval {
        #[arg(long, env = "GT_DATA_ROOT")]
        data: PathBuf,
        /// Output of `track` (a directory of runs, or a single run).
        #[arg(long, required_unless_present = "sweep")]
        predictions: Option<PathBuf>,
        /// noise or frame-drop.
        #[arg(long, requires = "checkpoint")]
        sweep: Option<SweepKind>,
        /// Checkpoint to sweep with.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Split swept by --sweep.
        #[arg(long, default_value = "test")]
        split: String,
        /// A_d thresholds in centimeters (default: the configuration's).
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
    },
    /// Plot saved reports (metric vs frame) or a saved sweep.
    Plot {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    } else if cli.config.is_none() {
        cfg.seed = 0;
    }
    Ok(cfg)
}

fn load_split(root: &Path, split: &str) -> Result<Vec<SequenceDataset>> {
    let index = SplitIndex::read(root)?;
    let dirs = index.split(split);
    if dirs.is_empty() {
        return Err(Error::InvalidInput(format!("split {split:?} of {} is empty", root.display())));
    }
    dirs.iter().map(|d| read_dataset(&root.join(d))).collect()
}

/// Settings for commands that load a checkpoint: an explicit --config wins,
/// otherwise the configuration stored with the weights.
fn checkpoint_config(cli_cfg: &RunConfig, explicit: bool, ck: &Checkpoint) -> RunConfig {
    if explicit {
        return cli_cfg.clone();
    }
    RunConfig { seed: cli_cfg.seed, ..ck.config.clone() }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
}

fn generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let summary = generate_dataset(out, &cfg.data, cfg.seed)?;
    let counts: Vec<String> = SPLITS.iter().map(|s| format!("{s} {}", summary.count(s))).collect();
    println!("generated {} sequences ({} frames) in {}: {}", summary.sequences, summary.frames, out.display(), counts.join(", "));
    Ok(())
}

fn train(cfg: RunConfig, data: &Path, split: &str, out: &Path, epochs: Option<usize>, resume: Option<&Path>, overfit: bool) -> Result<()> {
    let mut seqs = load_split(data, split)?;
    if overfit {
        seqs.truncate(1);
    }
    let mut trainer = match resume {
        Some(p) => Trainer::from_checkpoint(&Checkpoint::load(p)?)?,
        None => Trainer::new(cfg)?,
    };
    let epochs = epochs.unwrap_or(if overfit { 200 } else { trainer.config.train.epochs });
    println!("training on {} sequence(s) from epoch {} for {epochs} epoch(s)", seqs.len(), trainer.epoch);
    trainer.fit(
        &seqs,
        epochs,
        Some(out),
        |_| {},
        |s| {
            let l = &s.loss;
            println!(
                "epoch {}: loss {:.4} (nocs {:.4}, refine {:.4}, mesh {:.5}, warp {:.5}) d_nocs {:.4} [{:.1}s]",
                s.epoch, l.total, l.nocs, l.refine, l.mesh, l.warp, s.d_nocs, s.seconds
            );
        },
    )?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

struct TrackArgs<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    split: &'a str,
    sequence: Option<&'a Path>,
    init: InitSource,
    init_file: Option<&'a Path>,
    noise: Option<NoiseLevel>,
    out: &'a Path,
}

fn track(cli_cfg: &RunConfig, explicit: bool, a: TrackArgs<'_>) -> Result<()> {
    let ck = Checkpoint::load(a.checkpoint)?;
    let model = ck.model()?;
    let cfg = &checkpoint_config(cli_cfg, explicit, &ck);
    let seqs = match a.sequence {
        Some(dir) => vec![read_dataset(dir)?],
        None => load_split(a.data, a.split)?,
    };
    let noise = NoiseParams::level(a.noise.unwrap_or(cfg.track.init_noise));
    create_dir(a.out)?;
    for (i, seq) in seqs.iter().enumerate() {
        let seed = mix(cfg.seed, i as u64);
        // only moving frames are tracked; indices are mapped back afterwards
        let keep = moving_frames(seq, cfg.track.static_threshold)?;
        let moving = if keep.len() < 2 { seq.clone() } else { seq.select_frames(&keep) };
        let keep = if keep.len() < 2 { (0..seq.len()).collect() } else { keep };
        let first = &moving.frames[0];
        let pose = match a.init {
            InitSource::GroundTruth => InitPose::ground_truth(first, &moving.canonical_mesh)?,
            InitSource::Perturbed => InitPose::perturbed(first, &moving.canonical_mesh, &noise, seed)?,
            InitSource::ExternalFile => {
                let dir = a.init_file.ok_or_else(|| Error::Config("--init external_file needs --init-file".into()))?;
                InitPose::from_file(dir)?
            }
        };
        let mut run = track_sequence(&model, &moving, &pose, &tracker_config(&moving, &cfg.track, seed))?;
        for f in &mut run.frames {
            f.frame = keep[f.frame];
        }
        run.save(&a.out.join(&run.seq_id))?;
        let t = run.mean_timings();
        println!(
            "{}: {} frames tracked; ms/frame encode {:.2}, fusion {:.2}, refine {:.2}, warp {:.2}, total {:.2}",
            run.seq_id,
            run.frames.len(),
            t.encode_ms,
            t.fusion_ms,
            t.refine_ms,
            t.warp_ms,
            t.total_ms()
        );
    }
    Ok(())
}

fn find_sequence(root: &Path, seq_id: &str) -> Result<SequenceDataset> {
    let dir = list_sequences(root)?
        .into_iter()
        .find(|d| d.file_name().is_some_and(|n| n == seq_id))
        .ok_or_else(|| Error::Alignment(format!("no ground-truth sequence {seq_id:?} under {}", root.display())))?;
    read_dataset(&dir)
}

fn print_report(r: &SequenceReport) {
    let acc: Vec<String> = r.accuracy.iter().map(|a| format!("A_{}cm {:.1}%", a.threshold_cm, 100.0 * a.value)).collect();
    println!(
        "{}: D_nocs {:.4}, D_chamf {:.2} cm, D_corr {:.2} cm, {}",
        r.seq_id,
        r.mean.d_nocs,
        r.mean.d_chamf,
        r.mean.d_corr,
        acc.join(", ")
    );
}

fn eval_predictions(cfg: &RunConfig, data: &Path, predictions: &Path, thresholds: &[f64], out: &Path) -> Result<()> {
    let mut run_dirs: Vec<PathBuf> = if predictions.join("manifest.json").is_file() {
        vec![predictions.to_path_buf()]
    } else {
        fs::read_dir(predictions)
            .map_err(|e| Error::Io { path: predictions.into(), source: e })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("manifest.json").is_file())
            .collect()
    };
    run_dirs.sort();
    if run_dirs.is_empty() {
        return Err(Error::InvalidInput(format!("no predictions under {}", predictions.display())));
    }
    create_dir(out)?;
    let mut reports = Vec::new();
    for (i, dir) in run_dirs.iter().enumerate() {
        let run = TrackRun::load(dir)?;
        let gt = find_sequence(data, &run.seq_id)?;
        if run.faces != gt.canonical_mesh.faces {
            return Err(Error::Alignment(format!("{}: predicted mesh topology differs from the ground truth", run.seq_id)));
        }
        let frames = run.frame_evals(&gt)?;
        let report = evaluate_sequence(&run.seq_id, &frames, &run.faces, cfg.track.mesh_samples, mix(cfg.seed, i as u64), thresholds)?;
        report.save(&out.join(format!("{}.json", run.seq_id)))?;
        print_report(&report);
        reports.push(report);
    }
    let all = aggregate("all", &reports, thresholds)?;
    all.save(&out.join("summary.json"))?;
    plot_metric_vs_frame(&reports, &out.join("metrics.svg"))?;
    print_report(&all);
    Ok(())
}

fn eval_sweep(cli_cfg: &RunConfig, explicit: bool, data: &Path, kind: SweepKind, checkpoint: &Path, split: &str, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    let mut cfg = checkpoint_config(cli_cfg, explicit, &ck);
    cfg.track.thresholds_cm = cli_cfg.track.thresholds_cm.clone();
    let cfg = &cfg;
    let seqs = load_split(data, split)?;
    let sweep = run_sweep(kind, &model, &seqs, &cfg.track, cfg.seed)?;
    create_dir(out)?;
    let name = match kind {
        SweepKind::Noise => "sweep_noise",
        SweepKind::FrameDrop => "sweep_frame_drop",
    };
    sweep.save(&out.join(format!("{name}.json")))?;
    plot_sweep(&sweep, &out.join(format!("{name}.svg")))?;
    print_sweep(&sweep);
    Ok(())
}

fn print_sweep(sweep: &Sweep) {
    for p in &sweep.points {
        let values: Vec<String> = Metric::ALL.iter().map(|m| format!("{} {:.4}", m.label(), m.of(&p.report.mean))).collect();
        let acc: Vec<String> = p.report.accuracy.iter().map(|a| format!("A_{}cm {:.1}%", a.threshold_cm, 100.0 * a.value)).collect();
        println!("{}: {}, {}", p.label, values.join(", "), acc.join(", "));
    }
}

fn plot(inputs: &[PathBuf], out: &Path) -> Result<()> {
    if let [single] = inputs {
        if let Ok(sweep) = Sweep::load(single) {
            return plot_sweep(&sweep, out);
        }
    }
    let reports = inputs.iter().map(|p| SequenceReport::load(p)).collect::<Result<Vec<_>>>()?;
    plot_metric_vs_frame(&reports, out)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let explicit = cli.config.is_some();
    match &cli.command {
        Command::Generate { out } => generate(&cfg, out),
        Command::Train { data, split, out, epochs, resume, overfit } => train(cfg, data, split, out, *epochs, resume.as_deref(), *overfit),
        Command::Track { checkpoint, data, split, sequence, init, init_file, noise, out } => track(
            &cfg,
            explicit,
            TrackArgs {
                checkpoint,
                data,
                split,
                sequence: sequence.as_deref(),
                init: *init,
                init_file: init_file.as_deref(),
                noise: *noise,
                out,
            },
        ),
        Command::Eval { data, predictions, sweep, checkpoint, split, thresholds, out } => {
            let mut cfg = cfg;
            if let Some(t) = thresholds {
                cfg.track.thresholds_cm = t.clone();
            }
            let thresholds = cfg.track.thresholds_cm.clone();
            match (sweep, checkpoint) {
                (Some(kind), Some(ck)) => eval_sweep(&cfg, explicit, data, *kind, ck, split, out),
                _ => {
                    let predictions = predictions.as_deref().ok_or_else(|| Error::Config("--predictions is required".into()))?;
                    eval_predictions(&cfg, data, predictions, &thresholds, out)
                }
            }
        }
        Command::Plot { input, out } => plot(input, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

mod background;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gtp_core::data::{load_scene, make_splits, synth_generate, write_annotations, SceneSidecar, SynthConfig, TrajectorySample};
use gtp_core::harness::export::{write_attention, write_cells, write_curves, write_losses};
use gtp_core::harness::{
    evaluate, hash_files, AblationResults, run_ablation, train, windows, MetricsReport, RunManifest, RunOptions, SceneCorpus,
    TrainPlan,
};
use gtp_core::model::{GtpConfig, GtpModel, Variant};
use gtp_core::tensor::{load_checkpoint, save_checkpoint};
use gtp_core::{GtpError, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "gtp", version, about = "Goal-driven pedestrian trajectory prediction")]
struct Cli {
    /// Model and training configuration (JSON, any subset of fields).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// -v for progress, -vv for detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select destinations for each scene and write `<scene>.scene.json`.
    Prep {
        #[arg(required = true)]
        sidecars: Vec<PathBuf>,
    },
    /// Static background as the per-pixel temporal median of video frames.
    Background {
        /// Directory of png/jpeg frames.
        frames: PathBuf,
        #[arg(long, default_value_t = 200)]
        max_frames: usize,
        #[arg(long, default_value = "background.png")]
        output: String,
    },
    /// Generate a synthetic goal-directed scene with annotations and sidecar.
    Synth {
        #[arg(long, default_value_t = 6)]
        n_dest: usize,
        #[arg(long, default_value_t = 1000)]
        trajectories: usize,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 20.0)]
        world_size: f64,
        #[arg(long, default_value = "synth")]
        name: String,
    },
    /// Train on the given scenes, holding out `--test-scene` if named.
    Train {
        #[arg(required = true)]
        sidecars: Vec<PathBuf>,
        #[arg(long)]
        test_scene: Option<String>,
        #[arg(long)]
        t_pred: Option<usize>,
        #[arg(long)]
        max_train_samples: Option<usize>,
        #[arg(long, default_value = "model.ckpt")]
        checkpoint: String,
    },
    /// ADE/FDE of a checkpoint on each given scene.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        sidecars: Vec<PathBuf>,
    },
    /// Leave-one-out runs for each variant and horizon.
    Ablate {
        #[arg(required = true)]
        sidecars: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "12,16,20,24,28")]
        horizons: Vec<usize>,
        /// Comma-separated variant names, or "all".
        #[arg(long, value_delimiter = ',', default_value = "all")]
        variants: Vec<String>,
        /// Parallel jobs; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[arg(long)]
        max_train_samples: Option<usize>,
    },
    /// Predict one pedestrian's future and its attention trace.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        sidecar: PathBuf,
        #[arg(long)]
        ped: i64,
        /// First observed frame; defaults to the track's first frame.
        #[arg(long)]
        start_frame: Option<i64>,
    },
    /// Write curve, cell and loss CSVs from an `ablation.json`.
    Export { results: PathBuf },
}

fn config(cli: &Cli) -> Result<GtpConfig> {
    let mut cfg = match &cli.config {
        Some(p) => GtpConfig::load(p)?,
        None => GtpConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn corpora(sidecars: &[PathBuf]) -> Result<Vec<SceneCorpus>> {
    let mut out: Vec<SceneCorpus> = Vec::new();
    for p in sidecars {
        let s = load_scene(p)?;
        if out.iter().any(|c| c.id() == s.spec.scene_id) {
            return Err(GtpError::Data(format!("duplicate scene id {}", s.spec.scene_id)));
        }
        log::info!("{}: {} trajectories, {} destinations", s.spec.scene_id, s.trajectories.len(), s.spec.n_dest);
        out.push(SceneCorpus {
            scene: s.spec,
            trajectories: s.trajectories,
        });
    }
    Ok(out)
}

/// Sidecars plus the annotation files they point to.
fn input_files(sidecars: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in sidecars {
        let sc = SceneSidecar::load(p)?;
        let base = p.parent().unwrap_or(Path::new("."));
        files.push(p.clone());
        files.push(if sc.annotations.is_absolute() {
            sc.annotations
        } else {
            base.join(sc.annotations)
        });
    }
    Ok(files)
}

fn manifest(command: &str, cfg: &GtpConfig, sidecars: &[PathBuf], stages: Vec<gtp_core::harness::StageSummary>, outputs: &[&str]) -> Result<RunManifest> {
    let inputs = input_files(sidecars)?;
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    Ok(RunManifest {
        command: command.into(),
        config: cfg.clone(),
        seed: cfg.seed,
        input_hash: hash_files(&refs)?,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        stages,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn load_model(path: &Path) -> Result<GtpModel> {
    let (params, meta) = load_checkpoint(path)?;
    let cfg = meta
        .and_then(|m| m.get("config").cloned())
        .ok_or_else(|| GtpError::Checkpoint(format!("{} carries no configuration", path.display())))?;
    let cfg: GtpConfig = serde_json::from_value(cfg)?;
    GtpModel::from_params(cfg, params)
}

fn print_cell(c: &gtp_core::harness::MetricsCell) {
    println!("{}\t{}\tt_pred={}\tADE={:.4}\tFDE={:.4}\tn={}", c.variant, c.scene, c.horizon, c.ade, c.fde, c.count);
}

fn export_results(dir: &Path, results: &AblationResults) -> Result<()> {
    write_curves(create(dir, "curves.csv")?, &results.report)?;
    write_cells(create(dir, "cells.csv")?, &results.report)?;
    let loss_dir = dir.join("losses");
    std::fs::create_dir_all(&loss_dir)?;
    for j in &results.jobs {
        let name = format!("{}_{}_{}.csv", j.variant.name(), j.split.test_scene, j.split.t_pred);
        write_losses(create(&loss_dir, &name)?, &j.curves)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let out = &cli.out_dir;
    std::fs::create_dir_all(out)?;
    match &cli.command {
        Command::Prep { sidecars } => {
            for p in sidecars {
                let sc = SceneSidecar::load(p)?;
                let id = sc.scene_id.clone().unwrap_or_else(|| {
                    p.file_stem().map_or("scene".into(), |s| s.to_string_lossy().into_owned())
                });
                let spec = sc.scene_spec(p.parent().unwrap_or(Path::new(".")), &id)?;
                let target = out.join(format!("{id}.scene.json"));
                spec.save(&target)?;
                println!("{id}: {} destinations -> {}", spec.n_dest, target.display());
                for d in &spec.destinations {
                    let b = d.world_box;
                    println!(
                        "  {}: [{:.2}, {:.2}] x [{:.2}, {:.2}] m, walkable {:.3}, {} blocks",
                        d.index,
                        b.x_min,
                        b.x_max,
                        b.y_min,
                        b.y_max,
                        d.walkable_score,
                        d.blocks.len()
                    );
                }
            }
        }
        Command::Background {
            frames,
            max_frames,
            output,
        } => {
            let paths = background::frame_paths(frames, *max_frames)?;
            let median = background::temporal_median(&background::load_frames(&paths)?)?;
            let target = out.join(output);
            median
                .save(&target)
                .map_err(|e| GtpError::Data(format!("{}: {e}", target.display())))?;
            println!("median of {} frames -> {}", paths.len(), target.display());
        }
        Command::Synth {
            n_dest,
            trajectories,
            sigma,
            world_size,
            name,
        } => {
            let ds = synth_generate(&SynthConfig {
                seed: cli.seed.unwrap_or(0),
                n_dest: *n_dest,
                n_trajectories: *trajectories,
                sigma: *sigma,
                world_size: *world_size,
                ..Default::default()
            })?;
            let mut scene = ds.scene;
            scene.scene_id = name.clone();
            scene.save(&out.join(format!("{name}.scene.json")))?;
            write_annotations(create(out, &format!("{name}.txt"))?, &ds.trajectories)?;
            let sidecar = SceneSidecar {
                scene_id: Some(name.clone()),
                annotations: format!("{name}.txt").into(),
                scene_spec_path: Some(format!("{name}.scene.json").into()),
                frame_stride: SynthConfig::default().frame_stride,
                ..Default::default()
            };
            std::fs::write(out.join(format!("{name}.json")), serde_json::to_string_pretty(&sidecar)?)?;
            let goals: Vec<_> = ds.trajectories.iter().zip(&ds.goals).map(|(t, g)| json!({"ped_id": t.ped_id, "goal": g})).collect();
            std::fs::write(out.join(format!("{name}.goals.json")), serde_json::to_string(&goals)?)?;
            println!(
                "{} trajectories, {} destinations -> {}",
                ds.trajectories.len(),
                scene.n_dest,
                out.join(format!("{name}.json")).display()
            );
        }
        Command::Train {
            sidecars,
            test_scene,
            t_pred,
            max_train_samples,
            checkpoint,
        } => {
            let mut cfg = config(cli)?;
            if let Some(t) = t_pred {
                cfg.t_pred = *t;
            }
            cfg.validate()?;
            let corpora = corpora(sidecars)?;
            let ids: Vec<String> = corpora
                .iter()
                .map(|c| c.id().to_string())
                .filter(|id| Some(id) != test_scene.as_ref())
                .collect();
            if ids.is_empty() {
                return Err(GtpError::Data("no training scenes left".into()));
            }
            let mut samples = windows(&corpora, &ids, &cfg)?;
            if let Some(m) = max_train_samples {
                samples.truncate(*m);
            }
            if samples.is_empty() {
                return Err(GtpError::Data(format!("no windows of {} steps in the training scenes", cfg.t_obs + cfg.t_pred)));
            }
            println!("training on {} windows from {}", samples.len(), ids.join(", "));
            let outcome = train(&TrainPlan::from_config(&cfg), GtpModel::new(cfg.clone())?, &samples)?;
            save_checkpoint(&out.join(checkpoint), outcome.model.params(), Some(json!({ "config": cfg })))?;
            write_losses(create(out, "losses.csv")?, &outcome.curves)?;
            for s in &outcome.stages {
                println!(
                    "stage {} ({:?}): {} epochs, final train loss {}, best validation {}",
                    s.stage,
                    s.kind,
                    s.epochs_run,
                    s.final_train_loss.map_or("-".into(), |l| format!("{l:.4}")),
                    s.best_val.map_or("-".into(), |l| format!("{l:.4}"))
                );
            }
            if let Some(test) = test_scene {
                let test_set = windows(&corpora, std::slice::from_ref(test), &cfg)?;
                print_cell(&evaluate(&outcome.model, &test_set, "trained", test, cfg.t_pred)?);
            }
            manifest("train", &cfg, sidecars, outcome.stages, &[checkpoint, "losses.csv"])?.save(&out.join("train_manifest.json"))?;
        }
        Command::Eval { checkpoint, sidecars } => {
            let model = load_model(checkpoint)?;
            let cfg = model.config().clone();
            let corpora = corpora(sidecars)?;
            let mut report = MetricsReport::default();
            for c in &corpora {
                let samples = windows(&corpora, &[c.id().to_string()], &cfg)?;
                let cell = evaluate(&model, &samples, "checkpoint", c.id(), cfg.t_pred)?;
                print_cell(&cell);
                report.push(cell);
            }
            if let Some(a) = report.aggregate("checkpoint", cfg.t_pred) {
                println!(
                    "mean over scenes: ADE={:.4} FDE={:.4}; pooled: ADE={:.4} FDE={:.4}",
                    a.scene_mean_ade, a.scene_mean_fde, a.pooled_ade, a.pooled_fde
                );
            }
            write_cells(create(out, "eval.csv")?, &report)?;
        }
        Command::Ablate {
            sidecars,
            horizons,
            variants,
            workers,
            max_train_samples,
        } => {
            let cfg = config(cli)?;
            let variants: Vec<Variant> = if variants.iter().any(|v| v == "all") {
                Variant::ALL.to_vec()
            } else {
                variants.iter().map(|v| v.parse()).collect::<Result<_>>()?
            };
            let corpora = corpora(sidecars)?;
            let ids: Vec<String> = corpora.iter().map(|c| c.id().to_string()).collect();
            let splits = make_splits(&ids, horizons)?;
            let opts = RunOptions {
                workers: *workers,
                max_train_samples: *max_train_samples,
            };
            let results = run_ablation(&cfg, &variants, &splits, &corpora, &opts)?;
            for a in results.report.aggregates() {
                println!(
                    "{:<34} t_pred={:<3} ADE={:.3} FDE={:.3} (pooled {:.3}/{:.3}, n={})",
                    Variant::ALL.iter().find(|v| v.name() == a.variant).map_or(a.variant.as_str(), |v| v.label()),
                    a.horizon,
                    a.scene_mean_ade,
                    a.scene_mean_fde,
                    a.pooled_ade,
                    a.pooled_fde,
                    a.count
                );
            }
            results.save(&out.join("ablation.json"))?;
            export_results(out, &results)?;
            manifest("ablate", &cfg, sidecars, Vec::new(), &["ablation.json", "curves.csv", "cells.csv", "losses/"])?
                .save(&out.join("ablate_manifest.json"))?;
        }
        Command::Predict {
            checkpoint,
            sidecar,
            ped,
            start_frame,
        } => {
            let model = load_model(checkpoint)?;
            let cfg = model.config().clone();
            let scene = load_scene(sidecar)?;
            let traj = scene
                .trajectories
                .iter()
                .find(|t| t.ped_id == *ped)
                .ok_or_else(|| GtpError::Data(format!("pedestrian {ped} not in {}", sidecar.display())))?;
            let start = match start_frame {
                Some(f) => traj
                    .frames
                    .iter()
                    .position(|x| x == f)
                    .ok_or_else(|| GtpError::Data(format!("pedestrian {ped} has no frame {f}")))?,
                None => 0,
            };
            if start + cfg.t_obs > traj.len() {
                return Err(GtpError::Data(format!(
                    "pedestrian {ped} has {} points from that frame, need {} observed",
                    traj.len() - start,
                    cfg.t_obs
                )));
            }
            let obs = &traj.points[start..start + cfg.t_obs];
            let end = start + cfg.t_obs + cfg.t_pred;
            let sample = if end <= traj.len() {
                let goal = gtp_core::scene::assign_ground_truth_goal(&traj.points, &scene.spec)?;
                TrajectorySample::from_world(&scene.spec, *ped, traj.frames[start], obs, &traj.points[start + cfg.t_obs..end], goal, cfg.agent_centric)?
            } else {
                TrajectorySample::observed_only(&scene.spec, *ped, traj.frames[start], obs, cfg.agent_centric)?
            };
            let p = model.predict(&sample)?;
            let mut w = create(out, "prediction.csv")?;
            {
                use std::io::Write;
                writeln!(w, "step,x,y")?;
                for (i, q) in p.predicted.iter().enumerate() {
                    writeln!(w, "{},{:?},{:?}", i + 1, q.x, q.y)?;
                }
            }
            if !p.attention.is_empty() {
                write_attention(create(out, "attention.csv")?, &p.attention)?;
            }
            if !p.rank.is_empty() {
                let best = p.rank.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(i, _)| i + 1);
                println!("most likely destination: {best} (r = {:.3})", p.rank[best - 1]);
            }
            if !sample.future.is_empty() {
                let truth = sample.future_world();
                println!(
                    "ADE={:.4} FDE={:.4} against the recorded future",
                    gtp_core::harness::ade(&p.predicted, &truth)?,
                    gtp_core::harness::fde(&p.predicted, &truth)?
                );
            }
            let last = p.predicted.last().expect("t_pred >= 1");
            println!("{} steps predicted, final point ({:.3}, {:.3})", p.predicted.len(), last.x, last.y);
        }
        Command::Export { results } => {
            let parsed = AblationResults::load(results)?;
            export_results(out, &parsed)?;
            println!("{} cells, {} jobs exported to {}", parsed.report.cells.len(), parsed.jobs.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}

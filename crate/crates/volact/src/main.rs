//! Command-line pipeline driver: synthesize datasets, build pose splits,
//! train, render with ablation toggles, evaluate PSNR, and score canonical
//! correspondences.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use volact::config::{load_config, RunConfig};
use volact::fields::{DeformCtx, Fields};
use volact::numcore::ParamStore;
use volact::renderer::{
    render_image, write_planes, write_ppm, FailureStrategy, PlaneSidecar, RenderOutput,
};
use volact::skeleton::Skeleton;
use volact::splits::{
    build_splits, distance_matrix, kmedoids, read_splits, select_ood, surface_probes,
    write_distance_csv, write_splits, SplitResult,
};
use volact::synth::{
    analytic_warp_pixel, frame_image_path, load_frame, read_manifest, ring_cameras, sample_pose,
    write_dataset, CapsuleActor, Manifest,
};
use volact::training::{
    match_correspondences, p2p_error, psnr, CorrPair, TrainFrame, Trainer, FOREGROUND_ACC,
};
use volact::{Result, VolactError};

#[derive(Parser)]
#[command(name = "volact", about = "Animatable volumetric actor pipeline")]
struct Cli {
    /// Run config JSON; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set train.steps=500
    #[arg(long = "set", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Zero,
    Interp,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic capsule-actor dataset to the dataset dir.
    Synth,
    /// Cluster dataset poses and write train / val-ind / val-ood splits.
    Split {
        /// Output path (default: <dataset>/splits.json).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also dump the pose distance matrix as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train on the dataset's train split and write a checkpoint.
    Train {
        /// Splits file; trains on all frames when omitted.
        #[arg(long)]
        splits: Option<PathBuf>,
        /// Final checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Newline-delimited JSON training log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Stop after this step even if train.steps is larger (the learning
        /// rate schedule still follows train.steps); useful for chunked runs.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Render one dataset frame from a checkpoint.
    Render {
        checkpoint: PathBuf,
        /// Frame index into the dataset manifest.
        #[arg(long)]
        frame: usize,
        /// Output prefix; writes <out>.ppm, <out>_corr.f32, <out>_acc.f32.
        #[arg(long)]
        out: PathBuf,
        /// Disable the ambient-occlusion head (forces a = 1).
        #[arg(long)]
        no_ao: bool,
        /// Disable the non-linear delta (pure LBS forward map).
        #[arg(long)]
        no_delta: bool,
        /// Root-finding failure strategy override.
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
    },
    /// Match canonical correspondences between two frames and score them.
    Correspond {
        checkpoint: PathBuf,
        #[arg(long)]
        frame_a: usize,
        #[arg(long)]
        frame_b: usize,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render every frame of a split and report per-frame and mean PSNR.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        /// Which split to evaluate.
        #[arg(long, default_value = "val_ind")]
        split: String,
        #[arg(long)]
        no_ao: bool,
        #[arg(long)]
        no_delta: bool,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    if let Ok(n) = std::env::var("VOLACT_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n >= 1 => {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .expect("rayon pool is built once before any parallel work");
            }
            _ => {
                eprintln!("error: VOLACT_THREADS must be a positive integer, got '{n}'");
                return ExitCode::from(1);
            }
        }
    }
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                VolactError::NonFiniteLoss { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), &cli.set)?;
    match &cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Split { out, csv } => cmd_split(&cfg, out.as_deref(), csv.as_deref()),
        Command::Train {
            splits,
            out,
            resume,
            log,
            until,
        } => cmd_train(&cfg, splits.as_deref(), out, resume.as_deref(), log.as_deref(), *until),
        Command::Render {
            checkpoint,
            frame,
            out,
            no_ao,
            no_delta,
            strategy,
        } => cmd_render(&cfg, checkpoint, *frame, out, *no_ao, *no_delta, *strategy),
        Command::Correspond {
            checkpoint,
            frame_a,
            frame_b,
            out,
        } => cmd_correspond(&cfg, checkpoint, *frame_a, *frame_b, out.as_deref()),
        Command::Eval {
            checkpoint,
            splits,
            split,
            no_ao,
            no_delta,
            strategy,
            out,
        } => cmd_eval(
            &cfg,
            checkpoint,
            splits,
            split,
            *no_ao,
            *no_delta,
            *strategy,
            out.as_deref(),
        ),
    }
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let actor = CapsuleActor::default_actor();
    let s = &cfg.synth;
    if s.pose_ranges.len() != actor.skeleton.n_bones() {
        return Err(VolactError::Config(format!(
            "synth.pose_ranges needs {} entries, got {}",
            actor.skeleton.n_bones(),
            s.pose_ranges.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ranges: Vec<(f64, f64)> = s.pose_ranges.iter().map(|r| (r[0], r[1])).collect();
    let poses: Vec<_> = (0..s.n_poses)
        .map(|_| sample_pose(&actor.skeleton, &ranges, &mut rng))
        .collect();
    let cameras = ring_cameras(s.n_cameras, s.camera_radius, s.focal, s.width, s.height);
    // Reference images are deterministic: no stratified jitter.
    let render_cfg = volact::renderer::RenderConfig {
        stratified: false,
        ..cfg.render.clone()
    };
    fs::create_dir_all(&cfg.dataset_dir)?;
    let manifest = write_dataset(&cfg.dataset_dir, &actor, &cameras, &poses, &render_cfg)?;
    println!(
        "wrote {} frames ({} poses x {} cameras) to {}",
        manifest.frames.len(),
        s.n_poses,
        s.n_cameras,
        cfg.dataset_dir.display()
    );
    Ok(())
}

fn cmd_split(cfg: &RunConfig, out: Option<&Path>, csv: Option<&Path>) -> Result<()> {
    let manifest = read_manifest(&cfg.dataset_dir)?;
    let actor = &manifest.actor;
    let mut poses = Vec::with_capacity(manifest.n_poses);
    let mut kept: Vec<usize> = Vec::new();
    for f in 0..manifest.n_poses {
        let rec = manifest
            .frames
            .iter()
            .find(|r| r.frame == f)
            .ok_or_else(|| VolactError::Config(format!("pose {f} has no frames")))?;
        let (_, pose) = load_frame(&cfg.dataset_dir, rec)?;
        let withheld = cfg
            .split
            .withhold
            .is_some_and(|[start, end]| f >= start && f < end);
        if !withheld {
            kept.push(f);
            poses.push(pose);
        }
    }
    let probes = surface_probes(actor, cfg.split.probes_per_bone, cfg.seed);
    let dist = distance_matrix(&poses, &probes, cfg.split.root_bone);
    if let Some(csv) = csv {
        write_distance_csv(csv, &dist)?;
    }
    let (assignments, medoids) = kmedoids(&dist, cfg.split.k_clusters, cfg.seed)?;
    let ood = select_ood(&medoids, &dist);
    let mut splits = build_splits(&assignments, &medoids, ood, cfg.seed);
    // Map from kept-pose indices back to dataset pose ids.
    for list in [&mut splits.train, &mut splits.val_ind, &mut splits.val_ood] {
        for v in list.iter_mut() {
            *v = kept[*v];
        }
    }
    for v in splits.medoids.iter_mut() {
        *v = kept[*v];
    }
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.dataset_dir.join("splits.json"));
    write_splits(&path, &splits)?;
    println!(
        "{} clusters over {} poses; ood cluster {}; train/val_ind/val_ood = {}/{}/{} -> {}",
        cfg.split.k_clusters,
        poses.len(),
        splits.ood_cluster,
        splits.train.len(),
        splits.val_ind.len(),
        splits.val_ood.len(),
        path.display()
    );
    Ok(())
}

/// Load frames whose pose id passes the filter, images included.
fn load_frames(
    dir: &Path,
    manifest: &Manifest,
    keep: impl Fn(usize) -> bool,
) -> Result<Vec<TrainFrame>> {
    let mut frames = Vec::new();
    for (i, rec) in manifest.frames.iter().enumerate() {
        if !keep(rec.frame) {
            continue;
        }
        let (camera, pose) = load_frame(dir, rec)?;
        let image = volact::renderer::read_ppm(&frame_image_path(dir, rec))?;
        frames.push(TrainFrame {
            camera,
            pose,
            image,
            id: i,
        });
    }
    if frames.is_empty() {
        return Err(VolactError::Config("no frames selected".into()));
    }
    Ok(frames)
}

/// Rebuild the field networks from the run config and fill them from a
/// checkpoint written by the same config.
fn load_model(cfg: &RunConfig, n_bones: usize, ckpt: &Path) -> Result<(Fields, ParamStore)> {
    let mut params = ParamStore::new();
    let fields = Fields::init(
        cfg.fields.clone(),
        n_bones,
        cfg.split.root_bone,
        &mut params,
        cfg.seed,
    );
    let loaded = ParamStore::load(ckpt)?;
    if loaded.len() != params.len() {
        return Err(VolactError::Checkpoint(format!(
            "{}: has {} parameters but the config defines {}",
            ckpt.display(),
            loaded.len(),
            params.len()
        )));
    }
    params.values = loaded.values;
    Ok((fields, params))
}

#[derive(Serialize)]
struct ValPsnrRecord {
    step: usize,
    val_frame: usize,
    val_psnr: f64,
}

fn cmd_train(
    cfg: &RunConfig,
    splits: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
    log: Option<&Path>,
    until: Option<usize>,
) -> Result<()> {
    let manifest = read_manifest(&cfg.dataset_dir)?;
    let skeleton: Skeleton = manifest.actor.skeleton.clone();
    let split_result: Option<SplitResult> = splits.map(read_splits).transpose()?;
    let train_frames = load_frames(&cfg.dataset_dir, &manifest, |pose| {
        split_result
            .as_ref()
            .is_none_or(|s| s.train.contains(&pose))
    })?;
    let val_frame = match &split_result {
        Some(s) if !s.val_ind.is_empty() => {
            Some(load_frames(&cfg.dataset_dir, &manifest, |p| p == s.val_ind[0])?.remove(0))
        }
        _ => None,
    };
    let mut params = ParamStore::new();
    let fields = Fields::init(
        cfg.fields.clone(),
        skeleton.n_bones(),
        cfg.split.root_bone,
        &mut params,
        cfg.seed,
    );
    let mut trainer = Trainer::new(
        fields,
        params,
        skeleton,
        train_frames,
        cfg.train.clone(),
        cfg.render.clone(),
        cfg.rootfind.clone(),
        cfg.delta_enabled,
    );
    if let Some(ckpt) = resume {
        trainer.load_checkpoint(ckpt)?;
        eprintln!("resumed from {} at step {}", ckpt.display(), trainer.step);
    }
    if let Some(log) = log {
        trainer.set_log(log.to_path_buf());
    }
    let stop = until.unwrap_or(trainer.cfg.steps).min(trainer.cfg.steps);
    while trainer.step < stop {
        let report = match trainer.train_step() {
            Ok(r) => r,
            Err(e) => {
                // Leave a diagnostic next to the would-be checkpoint.
                let diag = out.with_extension("diag.json");
                let _ = fs::write(
                    &diag,
                    serde_json::to_vec_pretty(&serde_json::json!({
                        "error": e.to_string(),
                        "step": trainer.step,
                    }))?,
                );
                eprintln!("diagnostic written to {}", diag.display());
                return Err(e);
            }
        };
        let at_checkpoint = trainer.step % trainer.cfg.checkpoint_every == 0
            || trainer.step == trainer.cfg.steps;
        if at_checkpoint {
            trainer.save_checkpoint(out)?;
            if let Some(val) = &val_frame {
                let ctx = DeformCtx::new(
                    &trainer.fields,
                    &trainer.params,
                    &val.pose,
                    trainer.delta_enabled,
                );
                let render = render_image(
                    &val.camera,
                    &trainer.skeleton,
                    &ctx,
                    &trainer.rf,
                    &trainer.render_cfg,
                    trainer.cfg.seed,
                );
                let val_psnr = psnr(&render.color, &val.image);
                let rec = ValPsnrRecord {
                    step: trainer.step,
                    val_frame: val.id,
                    val_psnr,
                };
                if let Some(log) = log {
                    use std::io::Write;
                    let mut f = fs::OpenOptions::new().create(true).append(true).open(log)?;
                    writeln!(f, "{}", serde_json::to_string(&rec)?)?;
                }
                eprintln!("step {:>6}  val psnr {:.2} dB", trainer.step, val_psnr);
            }
        }
        if trainer.step % trainer.cfg.log_every == 0 || trainer.step == trainer.cfg.steps {
            eprintln!(
                "step {:>6}  loss {:.5}  im {:.5}  w {:.5}  d {:.5}  fail {:.3}  lr {:.2e}",
                report.step,
                report.loss,
                report.l_im,
                report.l_w,
                report.l_delta,
                report.failure_fraction,
                report.lr
            );
        }
    }
    trainer.save_checkpoint(out)?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn ablated_render_cfg(
    cfg: &RunConfig,
    no_ao: bool,
    strategy: Option<StrategyArg>,
) -> volact::renderer::RenderConfig {
    let mut rc = cfg.render.clone();
    if no_ao {
        rc.ao_enabled = false;
    }
    if let Some(s) = strategy {
        rc.failure_strategy = match s {
            StrategyArg::Zero => FailureStrategy::ZeroFill,
            StrategyArg::Interp => FailureStrategy::Interpolate,
        };
    }
    rc
}

fn render_frame(
    cfg: &RunConfig,
    manifest: &Manifest,
    fields: &Fields,
    params: &ParamStore,
    frame: usize,
    no_ao: bool,
    no_delta: bool,
    strategy: Option<StrategyArg>,
) -> Result<RenderOutput> {
    let rec = manifest
        .frames
        .get(frame)
        .ok_or_else(|| VolactError::Config(format!("frame {frame} out of range")))?;
    let (camera, pose) = load_frame(&cfg.dataset_dir, rec)?;
    let ctx = DeformCtx::new(fields, params, &pose, cfg.delta_enabled && !no_delta);
    let rc = ablated_render_cfg(cfg, no_ao, strategy);
    Ok(render_image(
        &camera,
        &manifest.actor.skeleton,
        &ctx,
        &cfg.rootfind,
        &rc,
        cfg.seed,
    ))
}

fn cmd_render(
    cfg: &RunConfig,
    checkpoint: &Path,
    frame: usize,
    out: &Path,
    no_ao: bool,
    no_delta: bool,
    strategy: Option<StrategyArg>,
) -> Result<()> {
    let manifest = read_manifest(&cfg.dataset_dir)?;
    let (fields, params) = load_model(cfg, manifest.actor.skeleton.n_bones(), checkpoint)?;
    let render = render_frame(
        cfg, &manifest, &fields, &params, frame, no_ao, no_delta, strategy,
    )?;
    let stem = out.to_string_lossy();
    write_ppm(&PathBuf::from(format!("{stem}.ppm")), &render.color)?;
    let (w, h) = (render.color.width, render.color.height);
    let corr: Vec<f32> = render
        .corr
        .iter()
        .flat_map(|v| v.0.map(|x| x as f32))
        .collect();
    write_planes(
        &PathBuf::from(format!("{stem}_corr.f32")),
        &PlaneSidecar {
            height: h,
            width: w,
            channels: 3,
        },
        &corr,
    )?;
    let acc: Vec<f32> = render.acc.iter().map(|&a| a as f32).collect();
    write_planes(
        &PathBuf::from(format!("{stem}_acc.f32")),
        &PlaneSidecar {
            height: h,
            width: w,
            channels: 1,
        },
        &acc,
    )?;
    println!(
        "{}",
        serde_json::json!({
            "frame": frame,
            "failure_fraction": render.stats.failure_fraction,
            "mean_newton_iters": render.stats.mean_newton_iters,
        })
    );
    Ok(())
}

#[derive(Serialize)]
struct CorrespondReport {
    frame_a: usize,
    frame_b: usize,
    n_pairs: usize,
    mean_p2p: f64,
    pairs: Vec<PairRow>,
}

#[derive(Serialize)]
struct PairRow {
    src: (usize, usize),
    matched: (usize, usize),
    truth: (usize, usize),
    error_px: f64,
}

fn cmd_correspond(
    cfg: &RunConfig,
    checkpoint: &Path,
    frame_a: usize,
    frame_b: usize,
    out: Option<&Path>,
) -> Result<()> {
    let manifest = read_manifest(&cfg.dataset_dir)?;
    let actor = &manifest.actor;
    let (fields, params) = load_model(cfg, actor.skeleton.n_bones(), checkpoint)?;
    let render_a = render_frame(cfg, &manifest, &fields, &params, frame_a, false, false, None)?;
    let render_b = render_frame(cfg, &manifest, &fields, &params, frame_b, false, false, None)?;
    let rec_b = &manifest.frames[frame_b];
    let (camera_b, pose_b) = load_frame(&cfg.dataset_dir, rec_b)?;
    let (camera_a, pose_a) = load_frame(&cfg.dataset_dir, &manifest.frames[frame_a])?;
    let width = render_a.color.width;
    let pixels: Vec<(usize, usize)> = (0..render_a.acc.len())
        .filter(|&i| render_a.acc[i] > FOREGROUND_ACC)
        .map(|i| (i % width, i / width))
        .collect();
    let matched = match_correspondences(&render_a.corr, &render_b.corr, &render_b.acc, width, &pixels)?;
    // Ground truth: the oracle's canonical point under frame A, rigidly
    // warped into pose B and projected into camera B. A pixel is scored only
    // when the oracle sees the actor in A *and* the warped point is visible
    // (unoccluded) in B — an occluded point has no correct match.
    let oracle_rc = volact::renderer::RenderConfig {
        stratified: false,
        ..cfg.render.clone()
    };
    let oracle_a = volact::synth::oracle_render(&camera_a, actor, &pose_a, &oracle_rc);
    let oracle_b = volact::synth::oracle_render(&camera_b, actor, &pose_b, &oracle_rc);
    let mut rows = Vec::new();
    let mut scored = Vec::new();
    for (&src, &m) in pixels.iter().zip(&matched) {
        if oracle_a.acc[src.1 * width + src.0] <= FOREGROUND_ACC {
            continue;
        }
        let x_c = oracle_a.corr[src.1 * width + src.0];
        let Some((u, v)) = analytic_warp_pixel(actor, &pose_b, &camera_b, x_c) else {
            continue;
        };
        let truth = (u.floor().max(0.0) as usize, v.floor().max(0.0) as usize);
        if truth.0 >= width || truth.1 >= oracle_b.acc.len() / width {
            continue;
        }
        let ti = truth.1 * width + truth.0;
        if oracle_b.acc[ti] <= FOREGROUND_ACC || (oracle_b.corr[ti] - x_c).norm() > 0.04 {
            continue;
        }
        let pair = CorrPair {
            src,
            matched: m,
            truth,
        };
        rows.push(PairRow {
            src,
            matched: m,
            truth,
            error_px: p2p_error(std::slice::from_ref(&pair)),
        });
        scored.push(pair);
    }
    let report = CorrespondReport {
        frame_a,
        frame_b,
        n_pairs: scored.len(),
        mean_p2p: p2p_error(&scored),
        pairs: rows,
    };
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(p) => fs::write(p, json)?,
        None => println!("{json}"),
    }
    eprintln!(
        "matched {} pixels, mean P2P {:.3} px",
        report.n_pairs, report.mean_p2p
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    frame: usize,
    pose: usize,
    camera_id: String,
    psnr: f64,
}

#[derive(Serialize)]
struct EvalReport {
    split: String,
    rows: Vec<EvalRow>,
    mean_psnr: f64,
    /// val_ind mean minus val_ood mean, present for `--split all`.
    #[serde(skip_serializing_if = "Option::is_none")]
    ind_ood_gap: Option<f64>,
}

fn eval_poses<'a>(s: &'a SplitResult, name: &str) -> Result<Vec<&'a [usize]>> {
    match name {
        "train" => Ok(vec![&s.train]),
        "val_ind" => Ok(vec![&s.val_ind]),
        "val_ood" => Ok(vec![&s.val_ood]),
        "all" => Ok(vec![&s.train, &s.val_ind, &s.val_ood]),
        other => Err(VolactError::Config(format!(
            "unknown split '{other}' (expected train, val_ind, val_ood, or all)"
        ))),
    }
}

fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    splits: &Path,
    split: &str,
    no_ao: bool,
    no_delta: bool,
    strategy: Option<StrategyArg>,
    out: Option<&Path>,
) -> Result<()> {
    let manifest = read_manifest(&cfg.dataset_dir)?;
    let (fields, params) = load_model(cfg, manifest.actor.skeleton.n_bones(), checkpoint)?;
    let split_result = read_splits(splits)?;
    let lists = eval_poses(&split_result, split)?;
    let selected: Vec<usize> = lists.iter().flat_map(|l| l.iter().copied()).collect();
    if selected.is_empty() {
        return Err(VolactError::Config(format!("split '{split}' is empty")));
    }
    let mut rows = Vec::new();
    for (i, rec) in manifest.frames.iter().enumerate() {
        if !selected.contains(&rec.frame) {
            continue;
        }
        let render = render_frame(
            cfg, &manifest, &fields, &params, i, no_ao, no_delta, strategy,
        )?;
        let reference = volact::renderer::read_ppm(&frame_image_path(&cfg.dataset_dir, rec))?;
        let row = EvalRow {
            frame: i,
            pose: rec.frame,
            camera_id: rec.camera_id.clone(),
            psnr: psnr(&render.color, &reference),
        };
        eprintln!(
            "frame {:>4} pose {:>3} {}  psnr {:.2} dB",
            row.frame, row.pose, row.camera_id, row.psnr
        );
        rows.push(row);
    }
    let mean = |poses: &[usize]| {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| poses.contains(&r.pose))
            .map(|r| r.psnr)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let ind_ood_gap = if split == "all" {
        match (mean(&split_result.val_ind), mean(&split_result.val_ood)) {
            (Some(ind), Some(ood)) => Some(ind - ood),
            _ => None,
        }
    } else {
        None
    };
    let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / rows.len() as f64;
    let report = EvalReport {
        split: split.to_string(),
        rows,
        mean_psnr,
        ind_ood_gap,
    };
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(p) => fs::write(p, json)?,
        None => println!("{json}"),
    }
    eprintln!("mean psnr {mean_psnr:.2} dB over {} frames", report.rows.len());
    if let Some(gap) = report.ind_ood_gap {
        eprintln!("ind - ood gap {gap:.2} dB");
    }
    Ok(())
}

//! Operator surface: data generation, the two training phases, evaluation,
//! and single-sample inference. Exit codes: 0 success, 2 config error,
//! 3 data error, 4 numeric failure.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use x2seg::checkpoint;
use x2seg::config::{Phase, RunConfig};
use x2seg::data::{
    build_dataset, load_dataset, write_dataset, ClipParams, GenSpec, OvSplit, SyntheticClip,
    TaskAnnotation,
};
use x2seg::error::{Result, X2Error};
use x2seg::eval::{evaluate, vgd_ap, EvalReport};
use x2seg::mask::rle_encode;
use x2seg::model::SegModel;
use x2seg::prompt::{TaskId, ALL_TASKS};
use x2seg::train::{build_sample, run_agnostic, run_joint, TrainSample};

#[derive(Parser)]
#[command(name = "x2seg", about = "Prompt-conditioned image and video segmentation at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (frames + manifest).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "synthetic")]
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        t: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 3)]
        objects: usize,
        /// Comma-separated task names or "all".
        #[arg(long, default_value = "all")]
        tasks: String,
        /// Category split: all, train, or ov-holdout.
        #[arg(long, default_value = "all")]
        split: String,
        #[arg(long, default_value_t = false)]
        occlusion: bool,
        #[arg(long, default_value_t = false)]
        twins: bool,
    },
    /// Phase 1: class-agnostic decoder pretraining (frozen encoder).
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Continue a previous run from its checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Phase 2: unified joint training from an agnostic init.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Agnostic checkpoint providing the decoder warm start.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Permit joint training without an agnostic init.
        #[arg(long, default_value_t = false)]
        allow_cold_start: bool,
        /// Continue a previous joint run from its checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset manifest.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated task names or "all".
        #[arg(long, default_value = "all")]
        tasks: String,
        /// Optional JSON report path (stdout otherwise).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a response and masks for one manifest record.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        record: usize,
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_tasks(s: &str) -> Result<Vec<TaskId>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(ALL_TASKS.to_vec());
    }
    s.split(',').map(|p| TaskId::parse(p.trim())).collect()
}

fn parse_split(s: &str) -> Result<OvSplit> {
    match s.to_ascii_lowercase().as_str() {
        "all" => Ok(OvSplit::All),
        "train" => Ok(OvSplit::Train),
        "ov-holdout" => Ok(OvSplit::OvHoldout),
        other => Err(X2Error::Config {
            key: "split".into(),
            msg: format!("unknown split {other:?}, expected all|train|ov-holdout"),
        }),
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_env_seed()?;
    Ok(cfg)
}

/// Write the effective config into the run directory.
fn prepare_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.data.out_dir);
    std::fs::create_dir_all(dir.join("checkpoints"))
        .map_err(|e| X2Error::Data(format!("run dir {}: {e}", dir.display())))?;
    std::fs::write(dir.join("config.yaml"), cfg.to_yaml()?)
        .map_err(|e| X2Error::Data(format!("config.yaml: {e}")))?;
    Ok(dir)
}

fn build_model(cfg: &RunConfig) -> Result<SegModel> {
    SegModel::new(cfg.model_config(), DType::F32, &Device::Cpu, cfg.data.seed)
}

fn manifest_samples(
    dir: &Path,
    seed: u64,
    tasks: Option<&[TaskId]>,
) -> Result<Vec<TrainSample>> {
    let (manifest, clips) = load_dataset(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut samples = Vec::new();
    for (record, clip) in manifest.records.iter().zip(clips.iter()) {
        for ann in &record.annotations {
            if tasks.map(|ts| ts.contains(&ann.task)).unwrap_or(true) {
                samples.push(build_sample(clip, ann, &mut rng)?);
            }
        }
    }
    if samples.is_empty() {
        return Err(X2Error::Data(format!(
            "no samples in {} for the requested tasks",
            dir.display()
        )));
    }
    Ok(samples)
}

fn cmd_gen_data(
    out: PathBuf,
    name: String,
    seed: u64,
    count: usize,
    t: usize,
    height: usize,
    width: usize,
    objects: usize,
    tasks: String,
    split: String,
    occlusion: bool,
    twins: bool,
) -> Result<()> {
    let mut tasks = parse_tasks(&tasks)?;
    if t == 1 {
        tasks.retain(|task| !task.is_video());
    }
    if tasks.is_empty() {
        return Err(X2Error::Config {
            key: "tasks".into(),
            msg: "no applicable tasks for the clip length".into(),
        });
    }
    let spec = GenSpec {
        name,
        seed,
        count,
        params: ClipParams {
            t,
            h: height,
            w: width,
            n_objects: objects,
            twins,
            occlusion,
            kinds: None,
        },
        tasks,
        ov_split: parse_split(&split)?,
    };
    let clips = build_dataset(&spec)?;
    std::fs::create_dir_all(&out)
        .map_err(|e| X2Error::Data(format!("out dir {}: {e}", out.display())))?;
    let manifest = write_dataset(&out, &spec, &clips)?;
    println!(
        "wrote {} records ({} tasks each) to {}",
        manifest.records.len(),
        spec.tasks.len(),
        out.display()
    );
    Ok(())
}

fn cmd_pretrain(config: PathBuf, resume: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(&config)?;
    if cfg.schedule.phase != Phase::Agnostic {
        return Err(X2Error::Config {
            key: "schedule.phase".into(),
            msg: "pretrain requires phase: agnostic (the encoder stays frozen)".into(),
        });
    }
    let dir = prepare_run_dir(&cfg)?;
    let model = build_model(&cfg)?;
    let mut start_step = 0;
    if let Some(path) = &resume {
        let ckpt = checkpoint::load(path, &model.device)?;
        checkpoint::restore(&model, &ckpt, &cfg.digest()?, "")?;
        start_step = ckpt.step;
    }
    let (_, clips) = load_dataset(Path::new(&cfg.data.train_manifest))?;
    let images: Vec<SyntheticClip> = clips.into_iter().filter(|c| c.t == 1).collect();
    let out = run_agnostic(&model, &cfg, &images, Some(&dir), None, start_step)?;
    let final_path = dir.join("checkpoints").join(format!("step_{}.bin", out.steps));
    checkpoint::save(&final_path, &cfg.digest()?, out.steps, &model)?;
    println!(
        "agnostic phase: {} steps, probe mask IoU {:.4}, checkpoint {}",
        out.steps,
        out.probe,
        final_path.display()
    );
    Ok(())
}

fn cmd_train(
    config: PathBuf,
    init: Option<PathBuf>,
    allow_cold_start: bool,
    resume: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(&config)?;
    if cfg.schedule.phase != Phase::Joint {
        return Err(X2Error::Config {
            key: "schedule.phase".into(),
            msg: "train requires phase: joint".into(),
        });
    }
    if init.is_none() && resume.is_none() && !allow_cold_start {
        return Err(X2Error::Config {
            key: "--init".into(),
            msg: "joint training needs an agnostic checkpoint via --init \
                  (or pass --allow-cold-start)"
                .into(),
        });
    }
    let dir = prepare_run_dir(&cfg)?;
    let model = build_model(&cfg)?;
    let digest = cfg.digest()?;
    let mut start_step = 0;
    if let Some(path) = &resume {
        let ckpt = checkpoint::load(path, &model.device)?;
        checkpoint::restore(&model, &ckpt, &digest, "")?;
        start_step = ckpt.step;
    } else if let Some(path) = &init {
        // warm start: only the decoder comes from the agnostic phase
        let ckpt = checkpoint::load(path, &model.device)?;
        checkpoint::restore(&model, &ckpt, &digest, "dec.")?;
    }
    let samples = manifest_samples(Path::new(&cfg.data.train_manifest), cfg.data.seed, None)?;
    let out = run_joint(&model, &cfg, &samples, Some(&dir), None, start_step)?;
    let final_path = dir.join("checkpoints").join(format!("step_{}.bin", out.steps));
    checkpoint::save(&final_path, &digest, out.steps, &model)?;
    println!(
        "joint phase: {} steps, probe gIoU {:.4}, J&F {:.4}, checkpoint {}",
        out.steps,
        out.probe,
        out.probe2,
        final_path.display()
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct TaskReport {
    task: String,
    #[serde(flatten)]
    report: EvalReport,
    /// Point- and box-prompt AP for visual-grounded tasks.
    #[serde(skip_serializing_if = "Option::is_none")]
    ap_point: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ap_box: Option<(f64, f64)>,
}

fn cmd_eval(
    config: PathBuf,
    ckpt_path: PathBuf,
    manifest: PathBuf,
    tasks: String,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(&config)?;
    let model = build_model(&cfg)?;
    let ckpt = checkpoint::load(&ckpt_path, &model.device)?;
    checkpoint::restore(&model, &ckpt, &cfg.digest()?, "")?;
    let tasks = parse_tasks(&tasks)?;
    let (mf, clips) = load_dataset(&manifest)?;
    let mut reports: Vec<TaskReport> = Vec::new();
    for &task in &tasks {
        let mut items: Vec<(SyntheticClip, TaskAnnotation)> = Vec::new();
        let mut samples = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.seed ^ 0xe7a1);
        for (record, clip) in mf.records.iter().zip(clips.iter()) {
            for ann in &record.annotations {
                if ann.task == task {
                    items.push((clip.clone(), ann.clone()));
                    samples.push(build_sample(clip, ann, &mut rng)?);
                }
            }
        }
        if samples.is_empty() {
            continue;
        }
        let report = evaluate(&model, &samples)?;
        let (ap_point, ap_box) = if task.is_region_task() && !items[0].1.prompts.is_empty() {
            let vgd = matches!(task, TaskId::IVgd | TaskId::VVgd);
            if vgd {
                let p = vgd_ap(&model, &items, 0)?;
                let b = vgd_ap(&model, &items, 1)?;
                (Some((p.ap, p.ap50)), Some((b.ap, b.ap50)))
            } else {
                (None, None)
            }
        } else {
            (None, None)
        };
        reports.push(TaskReport { task: task.name().to_string(), report, ap_point, ap_box });
    }
    if reports.is_empty() {
        return Err(X2Error::Data("no matching task annotations in the manifest".into()));
    }
    let json = serde_json::to_string_pretty(&reports)
        .map_err(|e| X2Error::Data(format!("report: {e}")))?;
    match out {
        Some(path) => std::fs::write(&path, &json)
            .map_err(|e| X2Error::Data(format!("report {}: {e}", path.display())))?,
        None => println!("{json}"),
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct InferOutput {
    task: String,
    record: usize,
    response: String,
    /// RLE mask per frame, one list per segmentation target.
    masks: Vec<Vec<x2seg::mask::Rle>>,
}

fn cmd_infer(
    config: PathBuf,
    ckpt_path: PathBuf,
    manifest: PathBuf,
    record_idx: usize,
    task: String,
    out: PathBuf,
) -> Result<()> {
    let cfg = load_config(&config)?;
    let model = build_model(&cfg)?;
    let ckpt = checkpoint::load(&ckpt_path, &model.device)?;
    checkpoint::restore(&model, &ckpt, &cfg.digest()?, "")?;
    let task = TaskId::parse(&task)?;
    let (mf, clips) = load_dataset(&manifest)?;
    let record = mf
        .records
        .get(record_idx)
        .ok_or_else(|| X2Error::Data(format!("record {record_idx} out of range")))?;
    let clip = &clips[record_idx];
    let ann = record
        .annotations
        .iter()
        .find(|a| a.task == task)
        .ok_or_else(|| X2Error::Data(format!("record {record_idx} has no {} annotation", task.name())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.seed ^ 0x1f);
    let sample = build_sample(clip, ann, &mut rng)?;
    let frames = model.frames_to_tensor(&clip.frames, clip.h, clip.w)?;
    let ids = model.generate(&frames, &sample.record, &sample.prompts, 96)?;
    let response = model.vocab.decode(&ids).join(" ");
    let segs = model.generated_seg_embeddings(&frames, &sample.record, &sample.prompts, &ids)?;
    let outs = model.decode_clip(&frames, &segs)?;
    let mut masks = vec![Vec::with_capacity(clip.t); segs.len()];
    for o in &outs {
        for (i, target) in masks.iter_mut().enumerate() {
            let full = model
                .full_res(&o.seg_mask_logits[i].unsqueeze(0)?, clip.h, clip.w)?
                .squeeze(0)?;
            let v = full.flatten_all()?.to_vec1::<f32>()?;
            let m = x2seg::mask::BitMask::from_fn(clip.h, clip.w, |y, x| v[y * clip.w + x] > 0.0);
            target.push(rle_encode(&m));
        }
    }
    let output = InferOutput { task: task.name().to_string(), record: record_idx, response, masks };
    let json = serde_json::to_string_pretty(&output)
        .map_err(|e| X2Error::Data(format!("infer output: {e}")))?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .map_err(|e| X2Error::Data(format!("out dir {}: {e}", dir.display())))?;
        }
    }
    std::fs::write(&out, json)
        .map_err(|e| X2Error::Data(format!("infer output {}: {e}", out.display())))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData {
            out,
            name,
            seed,
            count,
            t,
            height,
            width,
            objects,
            tasks,
            split,
            occlusion,
            twins,
        } => cmd_gen_data(
            out, name, seed, count, t, height, width, objects, tasks, split, occlusion, twins,
        ),
        Cmd::Pretrain { config, resume } => cmd_pretrain(config, resume),
        Cmd::Train { config, init, allow_cold_start, resume } => {
            cmd_train(config, init, allow_cold_start, resume)
        }
        Cmd::Eval { config, checkpoint, manifest, tasks, out } => {
            cmd_eval(config, checkpoint, manifest, tasks, out)
        }
        Cmd::Infer { config, checkpoint, manifest, record, task, out } => {
            cmd_infer(config, checkpoint, manifest, record, task, out)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

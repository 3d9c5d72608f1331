use candle_core::{DType, Device};
use x2seg::config::RunConfig;
use x2seg::data::{gen_clip, ClipParams};
use x2seg::losses::{hungarian_match, mask_to_tensor, match_costs, LossWeights};
use x2seg::model::{ModelConfig, SegModel};
use x2seg::optim::AdamW;
use x2seg::sampler::Modality;
use x2seg::train::{agnostic_groups, agnostic_sample_loss, downsample_mask, Trainer};

#[test]
#[ignore]
fn probe_single_image_overfit() {
    let dev = Device::Cpu;
    let m = SegModel::new(ModelConfig::default(), DType::F32, &dev, 0).unwrap();
    let clip = gen_clip(
        5,
        &ClipParams { t: 1, h: 64, w: 64, n_objects: 2, twins: false, occlusion: false, kinds: None },
    )
    .unwrap();
    let w = LossWeights::default();
    let mut cfg = RunConfig::default();
    cfg.schedule.lr = 0.005;
    cfg.schedule.total_steps = 600;
    cfg.schedule.warmup_ratio = 0.03;
    cfg.schedule.max_norm = 0.01;
    let opt = AdamW::new(cfg.optim_config(), agnostic_groups(&m));
    let mut tr = Trainer::new(opt, 1);
    for step in 0..600usize {
        let (loss, parts) = agnostic_sample_loss(&m, &clip, &w).unwrap();
        tr.micro_step(&loss, Modality::Video).unwrap();
        if step % 50 == 0 || step == 599 {
            // inspect matched masks
            let frames = m.frames_to_tensor(&clip.frames, clip.h, clip.w).unwrap();
            let out = &m.decode_clip(&frames, &[]).unwrap()[0];
            let mut gt4 = vec![];
            let mut gtf = vec![];
            for inst in &clip.instances {
                gt4.push(
                    mask_to_tensor(&downsample_mask(&inst.track[0], 4).unwrap(), DType::F32, &dev)
                        .unwrap(),
                );
                gtf.push(&inst.track[0]);
            }
            let labels = vec![0usize; gt4.len()];
            let cost = match_costs(&out.mask_logits, &out.class_logits, &gt4, &labels, &w).unwrap();
            let assign = hungarian_match(&cost).unwrap();
            let mut line = format!(
                "step {step} loss {:.3} mask {:.3} cls {:.3} assign {:?}",
                parts.total, parts.mask, parts.cls, assign
            );
            for (g, &q) in assign.iter().enumerate() {
                let full = m
                    .full_res(&out.mask_logits.narrow(0, q, 1).unwrap(), clip.h, clip.w)
                    .unwrap()
                    .squeeze(0)
                    .unwrap();
                let v = full.flatten_all().unwrap().to_vec1::<f32>().unwrap();
                let pred = x2seg::mask::BitMask::from_fn(clip.h, clip.w, |y, x| {
                    v[y * clip.w + x] > 0.0
                });
                let iou = x2seg::metrics::iou(&pred, gtf[g]).unwrap();
                line += &format!(
                    " | g{g}: area {} gt {} iou {:.3}",
                    pred.count(),
                    gtf[g].count(),
                    iou
                );
            }
            println!("{line}");
            if step == 599 {
                for (g, &q) in assign.iter().enumerate() {
                    let full = m
                        .full_res(&out.mask_logits.narrow(0, q, 1).unwrap(), clip.h, clip.w)
                        .unwrap()
                        .squeeze(0)
                        .unwrap();
                    let v = full.flatten_all().unwrap().to_vec1::<f32>().unwrap();
                    println!("g{g} pred(#)/gt(.)/both(@):");
                    for y in 0..clip.h {
                        let row: String = (0..clip.w)
                            .map(|x| {
                                let p = v[y * clip.w + x] > 0.0;
                                let t = gtf[g].get(y, x);
                                match (p, t) {
                                    (true, true) => '@',
                                    (true, false) => '#',
                                    (false, true) => '.',
                                    _ => ' ',
                                }
                            })
                            .collect();
                        println!("{row}");
                    }
                }
            }
        }
    }
}

#[test]
#[ignore]
fn probe_checkpoint_distribution() {
    let dev = Device::Cpu;
    let cfg = RunConfig::load(std::path::Path::new("/tmp/x2/lr64_0.004.yaml")).unwrap();
    let m = SegModel::new(cfg.model_config(), DType::F32, &dev, cfg.data.seed).unwrap();
    let ckpt = x2seg::checkpoint::load(
        std::path::Path::new("/tmp/x2/run64_lr_0.004/checkpoints/step_500.bin"),
        &dev,
    )
    .unwrap();
    x2seg::checkpoint::restore(&m, &ckpt, &cfg.digest().unwrap(), "").unwrap();
    let (_, clips) = x2seg::data::load_dataset(std::path::Path::new("/tmp/x2/pre64")).unwrap();
    let w = LossWeights::default();
    for (ci, clip) in clips.iter().enumerate() {
        let frames = m.frames_to_tensor(&clip.frames, clip.h, clip.w).unwrap();
        let out = &m.decode_clip(&frames, &[]).unwrap()[0];
        let mut gt4 = vec![];
        let mut gtf = vec![];
        for inst in &clip.instances {
            gt4.push(
                mask_to_tensor(&downsample_mask(&inst.track[0], 4).unwrap(), DType::F32, &dev)
                    .unwrap(),
            );
            gtf.push(&inst.track[0]);
        }
        let labels = vec![0usize; gt4.len()];
        let cost = match_costs(&out.mask_logits, &out.class_logits, &gt4, &labels, &w).unwrap();
        let assign = hungarian_match(&cost).unwrap();
        let mut line = format!("clip {ci:02} assign {assign:?}");
        for (g, &q) in assign.iter().enumerate() {
            let full = m
                .full_res(&out.mask_logits.narrow(0, q, 1).unwrap(), clip.h, clip.w)
                .unwrap()
                .squeeze(0)
                .unwrap();
            let v = full.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let pred =
                x2seg::mask::BitMask::from_fn(clip.h, clip.w, |y, x| v[y * clip.w + x] > 0.0);
            let iou = x2seg::metrics::iou(&pred, gtf[g]).unwrap();
            line += &format!(" | gt {} iou {:.2}", gtf[g].count(), iou);
        }
        println!("{line}");
    }
}

#[test]
#[ignore]
fn probe_video_sample_memory() {
    let dev = Device::Cpu;
    let cfg = RunConfig::load(std::path::Path::new("/tmp/x2/joint64.yaml")).unwrap();
    let m = SegModel::new(cfg.model_config(), DType::F32, &dev, cfg.data.seed).unwrap();
    let (manifest, clips) =
        x2seg::data::load_dataset(std::path::Path::new("/tmp/x2/jmix1")).unwrap();
    let w = LossWeights::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    use rand::SeedableRng;
    let rss = || {
        let s = std::fs::read_to_string("/proc/self/status").unwrap();
        s.lines()
            .find(|l| l.starts_with("VmHWM"))
            .unwrap()
            .to_string()
    };
    for idx in [0usize, 5] {
        let rec = &manifest.records[idx];
        let ann = &rec.annotations[0];
        let sample =
            x2seg::train::build_sample(&clips[idx], ann, &mut rng).unwrap();
        let t0 = std::time::Instant::now();
        let (loss, parts) = x2seg::train::joint_sample_loss(&m, &sample, &w).unwrap();
        println!("idx {idx} t={} fwd {:?} {}", clips[idx].t, t0.elapsed(), rss());
        let t1 = std::time::Instant::now();
        let _g = loss.backward().unwrap();
        println!(
            "idx {idx} bwd {:?} total {:.3} {}",
            t1.elapsed(),
            parts.total,
            rss()
        );
    }
}

#[test]
#[ignore]
fn probe_single_joint_overfit() {
    let dev = Device::Cpu;
    let cfg = RunConfig::load(std::path::Path::new("/tmp/x2/joint64.yaml")).unwrap();
    let mut sc = cfg.clone();
    sc.schedule.total_steps = 400;
    let m = SegModel::new(cfg.model_config(), DType::F32, &dev, cfg.data.seed).unwrap();
    let ckpt = x2seg::checkpoint::load(
        std::path::Path::new("/tmp/x2/run64_big/checkpoints/step_500.bin"),
        &dev,
    )
    .unwrap();
    x2seg::checkpoint::restore(&m, &ckpt, &cfg.digest().unwrap(), "dec.").unwrap();
    let (manifest, clips) =
        x2seg::data::load_dataset(std::path::Path::new("/tmp/x2/jmix1")).unwrap();
    let w = LossWeights::default();
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let idx = 5usize; // video
    let sample =
        x2seg::train::build_sample(&clips[idx], &manifest.records[idx].annotations[0], &mut rng)
            .unwrap();
    println!("task {:?} response {:?}", sample.ann.task, sample.response);
    let opt = AdamW::new(sc.optim_config(), x2seg::train::joint_groups(&m, 0.1));
    let mut tr = Trainer::new(opt, 1);
    for step in 0..400usize {
        let (loss, parts) = x2seg::train::joint_sample_loss(&m, &sample, &w).unwrap();
        tr.micro_step(&loss, Modality::Video).unwrap();
        if step % 50 == 0 || step == 399 {
            let pred = x2seg::eval::predict(&m, &sample).unwrap();
            let gts = x2seg::eval::gt_tracks(&sample);
            let mut line = format!(
                "step {step} total {:.3} ar {:.3} mask {:.3} cls {:.3}",
                parts.total, parts.ar, parts.mask, parts.cls
            );
            for (k, (p, g)) in pred.tracks.iter().zip(&gts).enumerate() {
                let iou = x2seg::metrics::iou(&p[0], &g[0]).unwrap();
                line += &format!(" | t{k} pred {} gt {} iou {:.3}", p[0].count(), g[0].count(), iou);
            }
            println!("{line}");
        }
    }
}

#[test]
#[ignore]
fn probe_joint_checkpoint_per_task() {
    let dev = Device::Cpu;
    let cfg = RunConfig::load(std::path::Path::new("/tmp/x2/joint1b.yaml")).unwrap();
    let m = SegModel::new(cfg.model_config(), DType::F32, &dev, cfg.data.seed).unwrap();
    let ckpt = x2seg::checkpoint::load(
        std::path::Path::new("/tmp/x2/run_j1b/checkpoints/step_3000.bin"),
        &dev,
    )
    .unwrap();
    x2seg::checkpoint::restore(&m, &ckpt, &cfg.digest().unwrap(), "").unwrap();
    let (manifest, clips) =
        x2seg::data::load_dataset(std::path::Path::new("/tmp/x2/jmix1")).unwrap();
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    for (idx, clip) in clips.iter().enumerate() {
        let ann = &manifest.records[idx].annotations[0];
        let sample = x2seg::train::build_sample(clip, ann, &mut rng).unwrap();
        let pred = x2seg::eval::predict(&m, &sample).unwrap();
        let gts = x2seg::eval::gt_tracks(&sample);
        let mut line = format!("idx {idx:02} t={} task {:?}", clip.t, sample.ann.task);
        for (k, (p, g)) in pred.tracks.iter().zip(&gts).enumerate() {
            let mut s = 0.0;
            for (pm, gm) in p.iter().zip(g) {
                s += x2seg::metrics::iou(pm, gm).unwrap();
            }
            line += &format!(" | t{k} iou {:.3}", s / p.len() as f64);
        }
        println!("{line}");
    }
}

#[test]
#[ignore]
fn probe_memory_ablation() {
    use x2seg::data::{gen_clip as gc, ClipParams as CP};
    use x2seg::sampler::Modality as Mo;
    let dev = Device::Cpu;
    let w = LossWeights::default();
    let seed = 100u64;
    // shared per-frame warm start
    let base = SegModel::new(ModelConfig::default(), DType::F32, &dev, seed).unwrap();
    let imgs: Vec<_> = (0..16)
        .map(|i| {
            gc(6100 + i, &CP { t: 1, h: 48, w: 48, n_objects: 2, twins: false, occlusion: false, kinds: None })
                .unwrap()
        })
        .collect();
    let mut acfg = RunConfig::default();
    acfg.data.seed = seed;
    acfg.schedule.lr = 0.004;
    acfg.schedule.total_steps = 400;
    acfg.schedule.batch = 4;
    acfg.schedule.image_multiplier = 8;
    acfg.schedule.max_norm = 0.01;
    acfg.schedule.eval_every = 25;
    acfg.schedule.probe_size = 16;
    acfg.schedule.checkpoint_every = 100000;
    let out = x2seg::train::run_agnostic(&base, &acfg, &imgs, None, Some(0.80), 0).unwrap();
    println!("warm base iou {:.3} at step {}", out.probe, out.steps);
    let params = CP { t: 8, h: 48, w: 48, n_objects: 2, twins: true, occlusion: true, kinds: None };
    let train: Vec<_> = (0..24).map(|i| gc(6000 + i, &params).unwrap()).collect();
    let held: Vec<_> = (0..16).map(|i| gc(7000 + i, &params).unwrap()).collect();
    let src: std::collections::HashMap<String, candle_core::Tensor> = base
        .named_vars("")
        .into_iter()
        .map(|(n, v)| (n, v.as_tensor().clone()))
        .collect();
    for enabled in [true, false] {
        let mut mc = ModelConfig::default();
        mc.memory.enabled = enabled;
        let m = SegModel::new(mc, DType::F32, &dev, seed).unwrap();
        for (name, var) in m.named_vars("") {
            var.set(&src[&name]).unwrap();
        }
        let mut cfg = RunConfig::default();
        cfg.schedule.lr = 0.002;
        cfg.schedule.total_steps = 1200;
        cfg.schedule.max_norm = 1.0;
        cfg.schedule.warmup_ratio = 0.05;
        let opt = AdamW::new(cfg.optim_config(), x2seg::train::video_agnostic_groups(&m));
        let mut tr = Trainer::new(opt, 1);
        use rand::{RngCore, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        for step in 0..cfg.schedule.total_steps {
            let clip = &train[(rng.next_u32() as usize) % train.len()];
            let (loss, _) = x2seg::train::video_agnostic_sample_loss(&m, clip, &w).unwrap();
            tr.micro_step(&loss, Mo::Image).unwrap();
            if (step + 1) % 200 == 0 || step == 0 {
                let mut jf_sum = 0.0;
                let mut ff_sum = 0.0;
                let mut n = 0;
                for clip in &held {
                    let tracks = x2seg::eval::tube_matched_tracks(&m, clip, &w).unwrap();
                    let ff = first_frame_tracks(&m, clip, &w);
                    for (g, inst) in clip.instances.iter().enumerate() {
                        let (_, _, jf) = x2seg::metrics::j_f(&tracks[g], &inst.track).unwrap();
                        let (_, _, f2) = x2seg::metrics::j_f(&ff[g], &inst.track).unwrap();
                        jf_sum += jf;
                        ff_sum += f2;
                        n += 1;
                    }
                }
                println!(
                    "enabled {enabled} step {} heldout tube-jf {:.4} ff-jf {:.4}",
                    step + 1,
                    jf_sum / n as f64,
                    ff_sum / n as f64
                );
            }
        }
    }
}

#[test]
#[ignore]
fn probe_joint_per_frame() {
    let dev = Device::Cpu;
    let cfg = RunConfig::load(std::path::Path::new("/tmp/x2/joint1b.yaml")).unwrap();
    let m = SegModel::new(cfg.model_config(), DType::F32, &dev, cfg.data.seed).unwrap();
    let ckpt = x2seg::checkpoint::load(
        std::path::Path::new("/tmp/x2/run_j1b/checkpoints/step_3000.bin"),
        &dev,
    )
    .unwrap();
    x2seg::checkpoint::restore(&m, &ckpt, &cfg.digest().unwrap(), "").unwrap();
    let (manifest, clips) =
        x2seg::data::load_dataset(std::path::Path::new("/tmp/x2/jmix1")).unwrap();
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    for idx in 4..16 {
        let ann = &manifest.records[idx].annotations[0];
        let sample = x2seg::train::build_sample(&clips[idx], ann, &mut rng).unwrap();
        let pred = x2seg::eval::predict(&m, &sample).unwrap();
        let gts = x2seg::eval::gt_tracks(&sample);
        let mut line = format!("idx {idx:02} {:?}", sample.ann.task);
        for (p, g) in pred.tracks.iter().zip(&gts) {
            let per: Vec<String> = p
                .iter()
                .zip(g)
                .map(|(pm, gm)| format!("{:.2}", x2seg::metrics::iou(pm, gm).unwrap()))
                .collect();
            line += &format!(" | {}", per.join(" "));
        }
        println!("{line}");
    }
}

fn first_frame_tracks(
    m: &SegModel,
    clip: &x2seg::data::SyntheticClip,
    w: &LossWeights,
) -> Vec<Vec<x2seg::mask::BitMask>> {
    let dev = Device::Cpu;
    let frames = m.frames_to_tensor(&clip.frames, clip.h, clip.w).unwrap();
    let outs = m.decode_clip(&frames, &[]).unwrap();
    let mut gt0 = vec![];
    for inst in &clip.instances {
        gt0.push(
            mask_to_tensor(&downsample_mask(&inst.track[0], 4).unwrap(), DType::F32, &dev).unwrap(),
        );
    }
    let labels = vec![0usize; gt0.len()];
    let cost = match_costs(&outs[0].mask_logits, &outs[0].class_logits, &gt0, &labels, w).unwrap();
    let assign = hungarian_match(&cost).unwrap();
    let mut tracks = vec![vec![]; assign.len()];
    for out in &outs {
        for (g, &q) in assign.iter().enumerate() {
            let full = m
                .full_res(&out.mask_logits.narrow(0, q, 1).unwrap(), clip.h, clip.w)
                .unwrap()
                .squeeze(0)
                .unwrap();
            let v = full.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            tracks[g].push(x2seg::mask::BitMask::from_fn(clip.h, clip.w, |y, x| {
                v[y * clip.w + x] > 0.0
            }));
        }
    }
    tracks
}

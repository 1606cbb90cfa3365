//! Acceptance criteria A1 to A9, one pass/fail line each.
//!
//! Runs as a plain binary (`harness = false`) so every criterion reports
//! even when an earlier one fails; the process exits nonzero if any fail.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use boxcaseg::augment::AugmentConfig;
use boxcaseg::bags::build_bags;
use boxcaseg::diffcore::{Graph, Tensor};
use boxcaseg::geometry::{mask_iou, BBox, BinaryMask};
use boxcaseg::gradsuite::{run_suite, SuiteConfig};
use boxcaseg::heads::{Model, ModelConfig, Predictor, Scorer};
use boxcaseg::losses::{mil_loss, pixel_loss, LossConfig, SampleKind};
use boxcaseg::manifest::{ImageEntry, InstanceEntry};
use boxcaseg::metrics::{ap_101, average_precision, miou_star, pr_curve, Detection, GroundTruth, InstanceRecord};
use boxcaseg::proxymask::{image_proxies, merge_masks, ProxyConfig, ProxySet};
use boxcaseg::rng::{Draw, Rng};
use boxcaseg::sampler::{plan_epoch, SamplerConfig};
use boxcaseg::synthdata::{generate, Scene, Split, SynthConfig};
use boxcaseg::trainer::{
    evaluate, prepare_batch, train, train_step, transfer_path_gradients, Instrumentation, LrSchedule, Sgd, TrainConfig,
    TrainData, TrainMode, ValData,
};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn a1_gradients() -> Verdict {
    let start = Instant::now();
    let outcomes = run_suite(&SuiteConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = outcomes.iter().map(|o| o.max_rel_error).fold(0.0, f64::max);
    let all = outcomes.iter().all(|o| o.passed);
    let parts: Vec<String> = outcomes
        .iter()
        .map(|o| format!("{} {:.2e}", o.name, o.max_rel_error))
        .collect();
    check(
        all && worst < 1e-4 && elapsed < Duration::from_secs(120),
        format!("{} over 20 seeds in {:.1}s", parts.join(", "), elapsed.as_secs_f64()),
    )
}

fn a2_closed_forms() -> Verdict {
    let bags = build_bags(&BBox::new(1, 1, 2, 2).unwrap(), 4, 4).map_err(|e| e.to_string())?;
    let cfg = LossConfig::default();
    let mil = |s: Tensor| {
        let mut g = Graph::new();
        let v = g.leaf(s);
        let l = mil_loss(&mut g, v, &bags, &cfg).unwrap();
        g.value(l).item()
    };
    let half = mil(Tensor::full(&[4, 4], 0.5));
    let mut d = vec![0.0; 16];
    for r in 1..3 {
        for c in 1..3 {
            d[r * 4 + c] = 1.0;
        }
    }
    let indicator = mil(Tensor::new(vec![4, 4], d).unwrap());
    let mut g = Graph::new();
    let a = g.leaf(Tensor::full(&[2, 3], 0.8));
    let t = g.leaf(Tensor::full(&[2, 3], 0.6));
    let mask = BinaryMask::from_bits(2, 3, vec![true; 6]).unwrap();
    let l = pixel_loss(
        &mut g,
        &mask,
        a,
        t,
        &LossConfig {
            alpha: 0.5,
            ..cfg
        },
    )
    .map_err(|e| e.to_string())?;
    let pix = g.value(l).item();
    let errs = [
        (half - 8.0 * 2f64.ln()).abs(),
        (indicator - 2.0).abs(),
        (pix + 0.7f64.ln()).abs(),
    ];
    check(
        errs[0] < 1e-9 && errs[1] < 1e-6 && errs[2] < 1e-9,
        format!("half map {half:.9}, indicator {indicator:.9}, pixel blend {pix:.9}"),
    )
}

fn brute_force_merge(instances: &[(u64, BinaryMask)]) -> Vec<Option<u64>> {
    (0..64)
        .map(|p| {
            instances
                .iter()
                .filter(|(_, m)| m.bits()[p])
                .map(|(id, m)| (m.count(), *id))
                .min()
                .map(|(_, id)| id)
        })
        .collect()
}

fn a3_merge_oracle() -> Verdict {
    let mut rng = Rng::seed(3);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = 1 + rng.index(4);
        let mut ids: Vec<u64> = (0..n as u64).map(|i| 5 * i + 2).collect();
        rng.shuffle(&mut ids);
        let density = rng.uniform(0.1, 0.6);
        let instances: Vec<(u64, BinaryMask)> = ids
            .into_iter()
            .map(|id| {
                let bits = (0..64).map(|_| rng.uniform(0.0, 1.0) < density).collect();
                (id, BinaryMask::from_bits(8, 8, bits).unwrap())
            })
            .collect();
        let merged = merge_masks(&instances).map_err(|e| e.to_string())?;
        if merged.labels != brute_force_merge(&instances) {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches} mismatches in 1000 instances"))
}

fn record(class: &str, on: usize) -> InstanceRecord {
    InstanceRecord {
        image: 0,
        class: class.into(),
        gt: BinaryMask::from_bits(1, 10, vec![true; 10]).unwrap(),
        pred: BinaryMask::from_bits(1, 10, (0..10).map(|c| c < on).collect()).unwrap(),
        score: 1.0,
    }
}

fn strip(from: usize, to: usize) -> BinaryMask {
    BinaryMask::from_bits(1, 10, (0..10).map(|c| (from..to).contains(&c)).collect()).unwrap()
}

fn all_point_ap(is_tp: &[bool], n_gt: usize) -> f64 {
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    let mut tp = 0.0;
    for (i, &hit) in is_tp.iter().enumerate() {
        tp += f64::from(u8::from(hit));
        recall.push(tp / n_gt as f64);
        precision.push(tp / (i + 1) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len())
        .map(|i| (recall[i] - recall[i - 1]) * precision[i])
        .sum()
}

fn a4_metrics() -> Verdict {
    let miou = miou_star(&[record("a", 8), record("a", 6), record("b", 9)]).map_err(|e| e.to_string())?;
    let gt = |from, to| GroundTruth {
        image: 0,
        class: "a".into(),
        mask: strip(from, to),
    };
    let det = |score, from, to| Detection {
        image: 0,
        class: "a".into(),
        mask: strip(from, to),
        score,
    };
    let one = average_precision(&[det(0.9, 0, 10), det(0.8, 0, 10)], &[gt(0, 10)], 0.5).map_err(|e| e.to_string())?;
    let fp_first =
        average_precision(&[det(0.9, 0, 0), det(0.8, 0, 5)], &[gt(0, 5), gt(5, 10)], 0.5).map_err(|e| e.to_string())?;
    let mut rng = Rng::seed(4);
    let mut worst = 0.0f64;
    for _ in 0..2000 {
        let n_gt = 1 + rng.index(10);
        let len = 1 + rng.index(10);
        let mut hits = 0;
        let is_tp: Vec<bool> = (0..len)
            .map(|_| {
                let hit = hits < n_gt && rng.uniform(0.0, 1.0) < 0.5;
                hits += usize::from(hit);
                hit
            })
            .collect();
        worst = worst.max((ap_101(&pr_curve(&is_tp, n_gt)) - all_point_ap(&is_tp, n_gt)).abs());
    }
    let hand = (one.map - 1.0).abs().max((fp_first.map - 51.0 * 0.5 / 101.0).abs());
    check(
        miou == 0.8 && hand < 1e-9 && worst <= 0.01,
        format!("mIoU* {miou}, hand cases off by {hand:.1e}, 101-point vs all-point gap {worst:.4}"),
    )
}

fn a5_sampler() -> Verdict {
    let cfg = SamplerConfig {
        seed: 5,
        ..SamplerConfig::default()
    };
    let (n_weak, n_salient) = (500, 100);
    let mut problems = Vec::new();
    for epoch in 0..100 {
        let plan = plan_epoch(n_weak, n_salient, &cfg, epoch).map_err(|e| e.to_string())?;
        let mut seen = vec![0usize; n_salient];
        for (i, b) in plan.batches.iter().enumerate() {
            if b.weak.len() != 9 || b.salient.len() != 7 {
                problems.push(format!(
                    "epoch {epoch} batch {i} is {}:{}",
                    b.weak.len(),
                    b.salient.len()
                ));
            }
            let last = i + 1 == plan.batches.len();
            for (&s, &pad) in b.salient.iter().zip(&b.salient_pad) {
                if pad && !last {
                    problems.push(format!("epoch {epoch} pads batch {i}"));
                }
                if !pad {
                    seen[s] += 1;
                }
            }
        }
        if seen.iter().any(|&n| n != 1) {
            problems.push(format!("epoch {epoch} does not cover each salient id once"));
        }
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            "100 epochs of 9:7 batches".into()
        } else {
            problems.join("; ")
        },
    )
}

/// One seed of the joint-versus-MIL comparison, with the trained joint model
/// and its weak split kept for the drop experiment.
struct SeedRun {
    joint_iou75: f64,
    mil_iou75: f64,
    joint_miou: f64,
    joint_weak_miou: f64,
    joint: Model,
    weak: Vec<Scene>,
    proxy_size: usize,
}

fn comparison_config(mode: TrainMode, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 40,
        lr: 1.0,
        clip_norm: Some(0.01),
        schedule: LrSchedule::Poly { power: 0.9 },
        mode,
        seed,
        augment: AugmentConfig::scaled(64),
        ..TrainConfig::default()
    }
}

fn run_seed(seed: u64) -> boxcaseg::Result<SeedRun> {
    let synth = SynthConfig::default();
    let weak = generate(Split::Weak, 500, 1000 + seed, &synth)?;
    let salient = generate(Split::Salient, 100, 1000 + seed, &synth)?;
    let val = ValData::from_scenes(&generate(Split::Weak, 150, 9000 + seed, &synth)?);
    let data = TrainData::from_scenes(&weak, &salient);
    let joint_cfg = comparison_config(TrainMode::Joint, seed);
    let mil_cfg = comparison_config(TrainMode::MilOnly, seed);
    let size = joint_cfg.augment.proxy;
    let joint = train(&data, None, &joint_cfg, |_| Ok(()))?.model;
    let mil = train(&data, None, &mil_cfg, |_| Ok(()))?.model;
    let joint_report = evaluate(&joint, &val, joint_cfg.predictor(), size)?;
    let weak_report = evaluate(&joint, &val, Predictor::Weak, size)?;
    let mil_report = evaluate(&mil, &val, mil_cfg.predictor(), size)?;
    Ok(SeedRun {
        joint_iou75: joint_report.iou_at(0.75),
        mil_iou75: mil_report.iou_at(0.75),
        joint_miou: joint_report.miou_star,
        joint_weak_miou: weak_report.miou_star,
        joint,
        weak,
        proxy_size: size,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn a6_joint_benefit(runs: &[SeedRun], elapsed: Duration) -> Verdict {
    let joint = median(runs.iter().map(|r| r.joint_iou75).collect());
    let mil = median(runs.iter().map(|r| r.mil_iou75).collect());
    let joint_miou = median(runs.iter().map(|r| r.joint_miou).collect());
    let weak_miou = median(runs.iter().map(|r| r.joint_weak_miou).collect());
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.1}/{:.1}", r.joint_iou75, r.mil_iou75))
        .collect();
    check(
        joint - mil >= 5.0 && joint_miou > weak_miou,
        format!(
            "median IoU@75 joint {joint:.1} vs mil_only {mil:.1} (per seed {}), mIoU* joint {joint_miou:.4} vs weak head {weak_miou:.4}, {:.0}s",
            per_seed.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn a7_drop_monotonicity(run: &SeedRun) -> Verdict {
    let scorer = Scorer::new(&run.joint, Predictor::Blend { alpha: 0.7 }).map_err(|e| e.to_string())?;
    let cfg = ProxyConfig {
        size: run.proxy_size,
        drop_threshold: 0.0,
        ..ProxyConfig::default()
    };
    let mut images = Vec::new();
    for (i, scene) in run.weak.iter().enumerate() {
        let entry = ImageEntry {
            id: i as u64,
            file: String::new(),
            height: scene.image.height,
            width: scene.image.width,
            instances: scene
                .instances
                .iter()
                .map(|inst| InstanceEntry::boxed(inst.id, inst.kind.name(), inst.bbox))
                .collect(),
        };
        let anns = image_proxies(&scorer, &scene.image, &entry, &cfg).map_err(|e| e.to_string())?;
        images.push((entry, anns));
    }
    let base = ProxySet { images, drop_rate: 0.0 };
    let mut rows = Vec::new();
    let (mut rates, mut ious) = (Vec::new(), Vec::new());
    for t in [0.0, 0.75, 0.85, 0.90, 0.95] {
        let set = base.redrop(t).map_err(|e| e.to_string())?;
        let mut sum = 0.0;
        let mut kept = 0usize;
        for (entry, anns) in &set.images {
            let scene = &run.weak[entry.id as usize];
            for (ann, inst) in anns.iter().zip(&scene.instances) {
                if !ann.ignore {
                    sum += mask_iou(&ann.mask, &inst.mask).map_err(|e| e.to_string())?;
                    kept += 1;
                }
            }
        }
        let iou = if kept == 0 { f64::NAN } else { sum / kept as f64 };
        rows.push(format!("{t}: drop {:.3} kept IoU {iou:.4}", set.drop_rate));
        rates.push(set.drop_rate);
        ious.push(iou);
    }
    let rate_ok = rates[0] == 0.0 && rates.windows(2).all(|w| w[1] >= w[0]);
    let iou_ok = ious.windows(2).all(|w| w[1] >= w[0]);
    check(rate_ok && iou_ok, rows.join(", "))
}

fn a8_detachment() -> Verdict {
    let synth = SynthConfig {
        salient_size: 32,
        weak_size: 40,
        min_area: 20,
        ..SynthConfig::default()
    };
    let weak = generate(Split::Weak, 20, 8, &synth).map_err(|e| e.to_string())?;
    let salient = generate(Split::Salient, 12, 8, &synth).map_err(|e| e.to_string())?;
    let data = TrainData::from_scenes(&weak, &salient);
    let cfg = TrainConfig {
        mode: TrainMode::Joint,
        seed: 8,
        augment: AugmentConfig::scaled(16),
        model: ModelConfig {
            widths: [4, 8, 8, 4],
            ..ModelConfig::default()
        },
        sampler: SamplerConfig {
            weak_per_batch: 3,
            salient_per_batch: 2,
            seed: 8,
            ..SamplerConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut model = cfg.initial_model();
    let mut opt = Sgd::new(&model, &cfg);
    let instr = Instrumentation::default();
    let mut rng = Rng::seed(8);
    let (mut worst_weak, mut least_mlp) = (0.0f64, f64::INFINITY);
    for step in 0..10u64 {
        let epoch = rng.index(1000) as u64;
        let plan = plan_epoch(data.weak.len(), data.salient.len(), &cfg.sampler, epoch).map_err(|e| e.to_string())?;
        let batch = &plan.batches[rng.index(plan.batches.len())];
        let samples = prepare_batch(&data, batch, &cfg, epoch, step).map_err(|e| e.to_string())?;
        train_step(&mut model, &mut opt, &samples, &cfg, &instr).map_err(|e| e.to_string())?;
        for s in samples.iter().filter(|s| s.kind == SampleKind::Salient) {
            let (weak, mlp) = transfer_path_gradients(&model, s, &cfg).map_err(|e| e.to_string())?;
            worst_weak = worst_weak.max(weak);
            least_mlp = least_mlp.min(mlp);
        }
    }
    check(
        worst_weak == 0.0 && least_mlp > 0.0,
        format!("weak-head gradient through the transfer path {worst_weak}, smallest MLP gradient {least_mlp:.3e} over 10 steps"),
    )
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_boxcaseg"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn pipeline(root: &Path) -> Result<(), String> {
    let p = |rel: &str| root.join(rel).to_str().unwrap().to_string();
    cli(&[
        "gen-data",
        "--out",
        &p("data"),
        "--weak",
        "40",
        "--salient",
        "14",
        "--val",
        "10",
        "--seed",
        "9",
    ])?;
    cli(&[
        "train",
        "--data",
        &p("data"),
        "--out",
        &p("run"),
        "--epochs",
        "2",
        "--seed",
        "9",
    ])?;
    cli(&[
        "proxy",
        "--checkpoint",
        &p("run/checkpoint.bxt"),
        "--manifest",
        &p("data/weak/manifest.json"),
        "--out",
        &p("proxy"),
    ])?;
    cli(&[
        "eval",
        "--gt",
        &p("data/weak/eval/manifest.json"),
        "--pred",
        &p("proxy/manifest.json"),
        "--out",
        &p("report"),
    ])
}

const PIPELINE_FILES: &[&str] = &[
    "data/weak/manifest.json",
    "data/weak/eval/manifest.json",
    "data/salient/manifest.json",
    "data/val/eval/manifest.json",
    "run/checkpoint.bxt",
    "run/log.jsonl",
    "proxy/manifest.json",
    "proxy/summary.json",
    "report/report.json",
    "report/report.txt",
];

fn a9_determinism() -> Verdict {
    let dirs = [
        tempfile::tempdir().map_err(|e| e.to_string())?,
        tempfile::tempdir().map_err(|e| e.to_string())?,
    ];
    for d in &dirs {
        pipeline(d.path())?;
    }
    let differing: Vec<&str> = PIPELINE_FILES
        .iter()
        .copied()
        .filter(|f| std::fs::read(dirs[0].path().join(f)).ok() != std::fs::read(dirs[1].path().join(f)).ok())
        .collect();
    check(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} pipeline outputs identical across two runs", PIPELINE_FILES.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |id: &str, title: &str, v: Verdict| {
        let (status, detail) = match v {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{id} {status} {title}: {detail}");
    };
    report("A1", "gradient correctness", a1_gradients());
    report("A2", "closed-form losses", a2_closed_forms());
    report("A3", "merge oracle", a3_merge_oracle());
    report("A4", "metric fixtures", a4_metrics());
    report("A5", "sampler contract", a5_sampler());
    let start = Instant::now();
    match (0..3).map(run_seed).collect::<boxcaseg::Result<Vec<_>>>() {
        Ok(runs) => {
            report("A6", "joint training benefit", a6_joint_benefit(&runs, start.elapsed()));
            report("A7", "drop monotonicity", a7_drop_monotonicity(&runs[0]));
        }
        Err(e) => {
            report("A6", "joint training benefit", Err(e.to_string()));
            report("A7", "drop monotonicity", Err(e.to_string()));
        }
    }
    report("A8", "detachment", a8_detachment());
    report("A9", "determinism", a9_determinism());
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

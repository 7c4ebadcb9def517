//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 3 to 8 train the desk profile (`configs/desk.toml`) for three
//! seeds; the rest use tiny models and run in seconds. A failure of the
//! experimental criteria 3 to 7 is printed but only sets the exit status
//! when `ACCEPTANCE_STRICT=1`.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use labelguide::bevgrid::{foreground_mask, gt_heatmap, BevGridSpec, ForegroundMask, HeatmapParams};
use labelguide::detectors::{
    encode_maps, head_decode, AdaptTarget, Detection, DetectionMaps, Student, Teacher, LOGIT_CLAMP,
};
use labelguide::distill::{detection_loss, feature_loss, response_loss, total_loss, DetTargets, LossTerms, LossWeights};
use labelguide::evalkit::{bucket_by_distance, match_detections, summarize, EvalConfig, Metrics};
use labelguide::labelenc::{LabelEncoder, LabelEncoderModel, LabelEncoderVariant};
use labelguide::nn::{state_hash, Module, Pass, Tensor};
use labelguide::pipeline::{
    file_hash, run_stage_student, save_labelenc, save_teacher, student_step, train_labelenc, train_student,
    train_teacher, AblationAxis, AblationTable, Corpus, Dataset, ExperimentConfig, Prepared, RunDir, RunManifest,
    StudentBatch, Workbench,
};
use labelguide::synthworld::{canonical_yaw, generate_scenes, BoxLabel, WorldSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

const SEEDS: [u64; 3] = [0, 1, 2];
const EXPERIMENTAL: [usize; 5] = [3, 4, 5, 6, 7];

type Outcome = Result<String, String>;

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-12)
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_tensor<S: labelguide::Scalar>(rng: &mut ChaCha8Rng, c: usize, n: usize, h: usize, w: usize, scale: f64) -> Tensor<S> {
    Tensor::from_vec(c, n, h, w, (0..c * n * h * w).map(|_| S::of(rng.gen_range(-scale..scale))).collect())
}

fn grid8() -> BevGridSpec {
    BevGridSpec { height: 8, width: 8, cell_size: 1.0, origin: (-4.0, 0.0) }
}

/// Two samples with a few boxes each, centers well inside the 8x8 grid.
fn boxes8(rng: &mut ChaCha8Rng) -> Vec<Vec<BoxLabel>> {
    (0..2)
        .map(|_| {
            (0..rng.gen_range(1..=3))
                .map(|_| BoxLabel {
                    class_id: rng.gen_range(0..3),
                    x: rng.gen_range(-3.5f32..3.5),
                    y: rng.gen_range(0.5f32..7.5),
                    w: rng.gen_range(0.6f32..2.0),
                    l: rng.gen_range(1.0f32..4.0),
                    yaw: rng.gen_range(-3.0f32..3.0),
                })
                .collect()
        })
        .collect()
}

fn masks8(boxes: &[Vec<BoxLabel>], tau: f64) -> Vec<ForegroundMask> {
    boxes.iter().map(|b| foreground_mask(&gt_heatmap(b, 3, &grid8(), &HeatmapParams::default()).unwrap(), tau)).collect()
}

// ---------------------------------------------------------------------------
// Naive references. Everything here indexes tensors element by element from
// the formulas; none of it calls into the loss implementations.

fn at<S: labelguide::Scalar>(t: &Tensor<S>, c: usize, n: usize, y: usize, x: usize) -> f64 {
    t.data[((c * t.n + n) * t.h + y) * t.w + x].f64()
}

fn naive_feature<S: labelguide::Scalar>(target: &Tensor<S>, pred: &Tensor<S>, masks: &[ForegroundMask]) -> f64 {
    let mut num = 0.0;
    let mut n_p = 0.0;
    for (n, m) in masks.iter().enumerate() {
        for y in 0..pred.h {
            for x in 0..pred.w {
                let wgt = m.weights[y * pred.w + x];
                if wgt > 0.0 {
                    n_p += 1.0;
                }
                for c in 0..pred.c {
                    let d = at(target, c, n, y, x) - at(pred, c, n, y, x);
                    num += wgt * d * d;
                }
            }
        }
    }
    if n_p == 0.0 {
        0.0
    } else {
        num / n_p
    }
}

fn sig(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn naive_response<S: labelguide::Scalar>(t: &DetectionMaps<S>, s: &DetectionMaps<S>, masks: &[ForegroundMask], gamma: f64) -> f64 {
    let (h, w) = (s.logits.h, s.logits.w);
    let mut fg = 0.0;
    let (mut cls, mut bbox) = (0.0, 0.0);
    for (n, m) in masks.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                if !m.mask[y * w + x] {
                    continue;
                }
                fg += 1.0;
                for c in 0..s.logits.c {
                    let target = sig(at(&t.logits, c, n, y, x));
                    let p = sig(at(&s.logits, c, n, y, x));
                    let bce = -(target * p.ln() + (1.0 - target) * (1.0 - p).ln());
                    cls += (target - p).abs().powf(gamma) * bce;
                }
                for c in 0..s.regress.c {
                    bbox += (at(&s.regress, c, n, y, x) - at(&t.regress, c, n, y, x)).abs();
                }
            }
        }
    }
    if fg == 0.0 {
        0.0
    } else {
        (cls + bbox) / fg
    }
}

#[allow(clippy::too_many_arguments)]
fn naive_detection<S: labelguide::Scalar>(
    maps: &DetectionMaps<S>,
    depth_logits: &Tensor<S>,
    heat: &[Vec<f64>],
    boxes: &[Vec<BoxLabel>],
    depth: &[Option<usize>],
    grid: &BevGridSpec,
    w: &LossWeights,
) -> f64 {
    let (h, wd, m) = (maps.logits.h, maps.logits.w, maps.logits.c);
    // heat[n][c * h * w + y * w + x]
    let mut pos = 0.0;
    let mut focal = 0.0;
    for (n, hm) in heat.iter().enumerate() {
        for c in 0..m {
            for y in 0..h {
                for x in 0..wd {
                    let target = hm[(c * h + y) * wd + x];
                    let p = sig(at(&maps.logits, c, n, y, x));
                    if target >= 1.0 {
                        pos += 1.0;
                        focal -= (1.0 - p).powf(w.focal_alpha) * p.ln();
                    } else {
                        focal -= (1.0 - target).powf(w.focal_beta) * p.powf(w.focal_alpha) * (1.0 - p).ln();
                    }
                }
            }
        }
    }
    let heat_term = focal / f64::max(pos, 1.0);
    let mut l1 = 0.0;
    let mut count = 0.0;
    for (n, bs) in boxes.iter().enumerate() {
        for b in bs {
            let fx = (b.x as f64 - grid.origin.0) / grid.cell_size;
            let fy = (b.y as f64 - grid.origin.1) / grid.cell_size;
            let (col, row) = (fx.floor() as usize, fy.floor() as usize);
            let target = [
                fx - (col as f64 + 0.5),
                fy - (row as f64 + 0.5),
                (b.w as f64).ln(),
                (b.l as f64).ln(),
                (b.yaw as f64).sin(),
                (b.yaw as f64).cos(),
            ];
            for (k, t) in target.iter().enumerate() {
                l1 += (at(&maps.regress, k, n, row, col) - t).abs();
            }
            count += 1.0;
        }
    }
    let reg_term = if count > 0.0 { w.regress * l1 / count } else { 0.0 };
    let (cols, bins) = (depth_logits.w, depth_logits.c);
    let mut ce = 0.0;
    let mut hits = 0.0;
    for n in 0..depth_logits.n {
        for a in 0..cols {
            let Some(bin) = depth[n * cols + a] else { continue };
            let z: Vec<f64> = (0..bins).map(|k| at(depth_logits, k, n, 0, a)).collect();
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            ce += lse - z[bin];
            hits += 1.0;
        }
    }
    let depth_term = if hits > 0.0 { w.depth * ce / hits } else { 0.0 };
    heat_term + reg_term + depth_term
}

// ---------------------------------------------------------------------------
// Criterion 1

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let grid = grid8();
    let boxes = boxes8(&mut rng);
    let refs: Vec<&[BoxLabel]> = boxes.iter().map(|b| b.as_slice()).collect();
    let masks = masks8(&boxes, 0.1);
    let mut worst: f64 = 0.0;
    let mut check = |name: &str, got: f64, want: f64| -> Result<(), String> {
        let e = rel_err(got, want);
        worst = worst.max(e);
        ensure(e <= 1e-6, || format!("{name}: {got} vs naive {want} (rel {e:.2e})"))
    };

    // Point-cloud feature imitation.
    let target = random_tensor::<f32>(&mut rng, 5, 2, 8, 8, 2.0);
    let pred = random_tensor::<f32>(&mut rng, 5, 2, 8, 8, 2.0);
    check("lidar feature", feature_loss(&target, &pred, &masks).0, naive_feature(&target, &pred, &masks))?;
    ensure(feature_loss(&target, &target, &masks).0 == 0.0, || "lidar feature: nonzero at pred == target".into())?;

    // Label feature imitation, against a real label-encoder output.
    let cfg = labelguide::labelenc::LabelEncoderConfig { embed_dim: 4, hidden: 6, channels: 5, num_classes: 3, position_blind: false };
    let mut enc = LabelEncoder::<f32>::new(cfg, &grid, &mut rng);
    let f_label = enc.encode(&refs, Pass::INFER).map_err(|e| e.to_string())?;
    check("label feature", feature_loss(&f_label, &pred, &masks).0, naive_feature(&f_label, &pred, &masks))?;
    ensure(feature_loss(&f_label, &f_label, &masks).0 == 0.0, || "label feature: nonzero at pred == F_label".into())?;

    // Response distillation.
    let teacher = DetectionMaps::from_logits(random_tensor::<f32>(&mut rng, 3, 2, 8, 8, 3.0), random_tensor(&mut rng, 6, 2, 8, 8, 1.5));
    let student = DetectionMaps::from_logits(random_tensor::<f32>(&mut rng, 3, 2, 8, 8, 3.0), random_tensor(&mut rng, 6, 2, 8, 8, 1.5));
    let gamma = LossWeights::default().quality_gamma;
    check("response", response_loss(&teacher, &student, &masks, gamma).0.total(), naive_response(&teacher, &student, &masks, gamma))?;
    // The teacher side is compared through its stored probabilities, so the
    // fixed point is checked in f64.
    let t64 = DetectionMaps::from_logits(random_tensor::<f64>(&mut rng, 3, 2, 8, 8, 3.0), random_tensor(&mut rng, 6, 2, 8, 8, 1.5));
    let at_fixed = response_loss(&t64, &t64, &masks, gamma).0.total();
    ensure(at_fixed < 1e-12, || format!("response: {at_fixed} at student == teacher"))?;

    // Supervised detection loss with depth.
    let w = LossWeights::default();
    let heat: Vec<Vec<f64>> =
        boxes.iter().map(|b| gt_heatmap(b, 3, &grid, &HeatmapParams::default()).unwrap().data).collect();
    let depth: Vec<Option<usize>> = (0..2 * 8).map(|_| rng.gen_bool(0.6).then(|| rng.gen_range(0..4))).collect();
    let targets = DetTargets::build(&refs, 3, &grid, &HeatmapParams::default()).map_err(|e| e.to_string())?.with_depth(depth.clone());
    let depth_logits = random_tensor::<f32>(&mut rng, 4, 2, 1, 8, 2.0);
    let (det, _, _) = detection_loss(&student, Some(&depth_logits), &targets, &w);
    check("detection", det.total(), naive_detection(&student, &depth_logits, &heat, &boxes, &depth, &grid, &w))?;
    // Fixed point: peak-only heatmap logits, exact regression at centers and
    // one-hot depth logits.
    let peak_logits = Tensor::from_vec(
        3,
        2,
        8,
        8,
        targets.heatmap.iter().map(|&y| if y >= 1.0 { LOGIT_CLAMP } else { -LOGIT_CLAMP }).collect(),
    );
    let mut exact = Tensor::<f64>::zeros(6, 2, 8, 8);
    for t in &targets.centers {
        for c in 0..6 {
            exact.data[(c * 2 + t.sample) * 64 + t.cell] = t.values[c];
        }
    }
    let mut onehot = Tensor::<f64>::filled(4, 2, 1, 8, -LOGIT_CLAMP);
    for (i, d) in depth.iter().enumerate() {
        if let Some(bin) = d {
            onehot.data[bin * 16 + i] = LOGIT_CLAMP;
        }
    }
    let fixed = detection_loss(&DetectionMaps::from_logits(peak_logits, exact), Some(&onehot), &targets, &w).0.total();
    ensure(fixed < 1e-12, || format!("detection: {fixed} at the peak-map fixed point"))?;

    // Weighted total.
    let terms = LossTerms { detection: det.total(), lidar_feature: Some(1.3), label_feature: Some(0.4), response: Some(2.2) };
    let wt = LossWeights { lambda_lidar: 0.3, lambda_label: 0.7, lambda_response: 0.25, ..w };
    let want = det.total() + 0.3 * 1.3 + 0.7 * 0.4 + 0.25 * 2.2;
    check("total", total_loss(&terms, &wt).map_err(|e| e.to_string())?, want)?;
    let zero = LossTerms { detection: 0.0, lidar_feature: Some(0.0), label_feature: Some(0.0), response: Some(0.0) };
    ensure(total_loss(&zero, &wt).unwrap() == 0.0, || "total: nonzero with zero components".into())?;

    Ok(format!("5 losses, worst rel err {worst:.1e}, fixed points exact, {:.1}s", t0.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------------------
// Criterion 2

fn fd_rel(fd: f64, g: f64) -> f64 {
    (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6)
}

/// Central differences of `f` at 10 entries of `x` against `grad`.
fn probe_input(name: &str, x: &Tensor<f64>, grad: &Tensor<f64>, picks: &[usize], f: impl Fn(&Tensor<f64>) -> f64) -> Result<f64, String> {
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for &i in picks {
        let (mut a, mut b) = (x.clone(), x.clone());
        a.data[i] += eps;
        b.data[i] -= eps;
        let fd = (f(&a) - f(&b)) / (2.0 * eps);
        let e = fd_rel(fd, grad.data[i]);
        worst = worst.max(e);
        ensure(e < 1e-4, || format!("{name}[{i}]: fd {fd} vs analytic {}", grad.data[i]))?;
    }
    Ok(worst)
}

fn spread(len: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..count).map(|_| rng.gen_range(0..len)).collect()
}

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig::from_toml(
        r#"
seed = 7
grid_cells = 8
tau = 0.1

[world]
extent = 10.0
azimuth_bins = 16
max_objects = 3
points_density = 300.0

[model]
teacher_channels = 4
student_channels = 6
embed_dim = 4
depth_bins = 4
column_channels = 4
lift_channels = 4
head_channels = 4
label_hidden = 4
adapter_layers = 2

[partition]
image = 2
lidar = 2
label = 2

[loss]
lambda_lidar = 0.7
lambda_label = 0.4
lambda_response = 0.3

[data]
train_scenes = 24
val_scenes = 12

[teacher]
epochs = 2
batch_size = 4
lr = 2e-3

[labelenc]
epochs = 2
batch_size = 4
lr = 2e-3

[student]
epochs = 2
batch_size = 4
lr = 2e-3
"#,
    )
    .expect("tiny config is valid")
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let grid = grid8();
    let boxes = boxes8(&mut rng);
    let refs: Vec<&[BoxLabel]> = boxes.iter().map(|b| b.as_slice()).collect();
    let masks = masks8(&boxes, 0.1);
    let mut worst: f64 = 0.0;

    let target = random_tensor::<f64>(&mut rng, 5, 2, 8, 8, 2.0);
    let pred = random_tensor::<f64>(&mut rng, 5, 2, 8, 8, 2.0);
    let (_, g) = feature_loss(&target, &pred, &masks);
    let fg: Vec<usize> = (0..pred.data.len()).filter(|&i| masks[(i / 64) % 2].mask[i % 64]).collect();
    let picks: Vec<usize> = (0..10).map(|k| fg[k * fg.len() / 10]).collect();
    worst = worst.max(probe_input("feature", &pred, &g, &picks, |p| feature_loss(&target, p, &masks).0)?);

    let gamma = LossWeights::default().quality_gamma;
    let t_maps = DetectionMaps::from_logits(random_tensor::<f64>(&mut rng, 3, 2, 8, 8, 3.0), random_tensor(&mut rng, 6, 2, 8, 8, 1.5));
    let s_logits = random_tensor::<f64>(&mut rng, 3, 2, 8, 8, 3.0);
    let s_reg = random_tensor::<f64>(&mut rng, 6, 2, 8, 8, 1.5);
    let (_, g) = response_loss(&t_maps, &DetectionMaps::from_logits(s_logits.clone(), s_reg.clone()), &masks, gamma);
    let fg3: Vec<usize> = (0..s_logits.data.len()).filter(|&i| masks[(i / 64) % 2].mask[i % 64]).collect();
    let picks: Vec<usize> = (0..10).map(|k| fg3[k * fg3.len() / 10]).collect();
    worst = worst.max(probe_input("response/cls", &s_logits, &g.logits, &picks, |z| {
        response_loss(&t_maps, &DetectionMaps::from_logits(z.clone(), s_reg.clone()), &masks, gamma).0.total()
    })?);
    let fg6: Vec<usize> = (0..s_reg.data.len()).filter(|&i| masks[(i / 64) % 2].mask[i % 64]).collect();
    let picks: Vec<usize> = (0..10).map(|k| fg6[k * fg6.len() / 10]).collect();
    worst = worst.max(probe_input("response/bbox", &s_reg, &g.regress, &picks, |r| {
        response_loss(&t_maps, &DetectionMaps::from_logits(s_logits.clone(), r.clone()), &masks, gamma).0.total()
    })?);

    let w = LossWeights::default();
    let depth: Vec<Option<usize>> = (0..2 * 8).map(|_| rng.gen_bool(0.7).then(|| rng.gen_range(0..4))).collect();
    let targets = DetTargets::build(&refs, 3, &grid, &HeatmapParams::default()).unwrap().with_depth(depth);
    let dl = random_tensor::<f64>(&mut rng, 4, 2, 1, 8, 2.0);
    let (_, g, gd) = detection_loss(&DetectionMaps::from_logits(s_logits.clone(), s_reg.clone()), Some(&dl), &targets, &w);
    let det = |z: &Tensor<f64>, r: &Tensor<f64>, d: &Tensor<f64>| {
        detection_loss(&DetectionMaps::from_logits(z.clone(), r.clone()), Some(d), &targets, &w).0.total()
    };
    let picks = spread(s_logits.data.len(), 10, &mut rng);
    worst = worst.max(probe_input("detection/heatmap", &s_logits, &g.logits, &picks, |z| det(z, &s_reg, &dl))?);
    let centers: Vec<usize> =
        targets.centers.iter().flat_map(|t| (0..6).map(move |c| (c * 2 + t.sample) * 64 + t.cell)).collect();
    let picks: Vec<usize> = (0..10).map(|k| centers[k * centers.len() / 10]).collect();
    worst = worst.max(probe_input("detection/regress", &s_reg, &g.regress, &picks, |r| det(&s_logits, r, &dl))?);
    let gd = gd.expect("depth gradient");
    let picks = spread(dl.data.len(), 10, &mut rng);
    worst = worst.max(probe_input("detection/depth", &dl, &gd, &picks, |d| det(&s_logits, &s_reg, d))?);

    // The full training objective of a tiny student, through the same step
    // function the trainer uses, probed at 10 parameters.
    let cfg = tiny_config();
    let data = Dataset::generate(&cfg.world, 4, 0).map_err(|e| e.to_string())?;
    let g_cfg = cfg.grid();
    let prepared = Prepared::<f64>::new(&data.train, &data.world, &g_cfg, cfg.model.depth_bins);
    let mut mrng = ChaCha8Rng::seed_from_u64(5);
    let mut teacher = Teacher::<f64>::new(cfg.teacher_config(), &mut mrng);
    teacher.freeze();
    let mut labelenc = LabelEncoderModel {
        variant: LabelEncoderVariant::Inverse,
        encoder: LabelEncoder::new(cfg.label_encoder_config(), &g_cfg, &mut mrng),
        head: teacher.head.clone(),
        projection: None,
    };
    let mut student = Student::<f64>::new(cfg.student_config(), &data.world, &g_cfg, &cfg.adapter_spec(), &mut mrng);
    let batch = StudentBatch::new(&data.train, &prepared, &[0, 1, 2, 3]);
    let (t_hash, l_hash) = (state_hash(&teacher), state_hash(&labelenc));
    teacher.zero_grad();
    labelenc.zero_grad();
    student.zero_grad();
    let (_, parts) = student_step(&cfg, &mut student, Some(&mut teacher), Some(&mut labelenc), &batch).map_err(|e| e.to_string())?;
    ensure(parts.len() == 6, || format!("expected every loss term, got {parts:?}"))?;
    let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
    student.visit_params("", &mut |n, p| grads.push((n, p.grad.clone())));
    let total_params: usize = grads.iter().map(|g| g.1.len()).sum();
    let eps = 1e-6;
    for k in 0..10 {
        let flat = (k * total_params) / 10 + 3;
        let (mut pi, mut ei) = (0, flat);
        while ei >= grads[pi].1.len() {
            ei -= grads[pi].1.len();
            pi += 1;
        }
        let mut eval = |d: f64| -> Result<f64, String> {
            let mut i = 0;
            student.visit_params_mut("", &mut |_, p| {
                if i == pi {
                    p.value[ei] += d;
                }
                i += 1;
            });
            student.zero_grad();
            let v = student_step(&cfg, &mut student, Some(&mut teacher), Some(&mut labelenc), &batch).map_err(|e| e.to_string())?.0;
            let mut i = 0;
            student.visit_params_mut("", &mut |_, p| {
                if i == pi {
                    p.value[ei] -= d;
                }
                i += 1;
            });
            Ok(v)
        };
        let fd = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
        let g = grads[pi].1[ei];
        let e = fd_rel(fd, g);
        worst = worst.max(e);
        ensure(e < 1e-4, || format!("total loss at {}[{ei}]: fd {fd} vs analytic {g}", grads[pi].0))?;
    }

    // Blocking: distillation gradients reach only their own channel group,
    // and nothing flows into the frozen sources.
    let feats = student.forward(&batch.panorama, Pass::TRAIN).features;
    let mut blocked: f64 = 0.0;
    for (which, range) in [(AdaptTarget::Lidar, cfg.partition.lidar_range()), (AdaptTarget::Label, cfg.partition.label_range())] {
        let out = student.adapt(which, &feats, Pass::TRAIN).map_err(|e| e.to_string())?;
        let probe = random_tensor::<f64>(&mut rng, out.c, out.n, out.h, out.w, 1.0);
        let g = student.adapt_backward(which, &probe).map_err(|e| e.to_string())?;
        let plane = g.n * g.h * g.w;
        for c in (0..g.c).filter(|c| !range.contains(c)) {
            blocked = g.data[c * plane..(c + 1) * plane].iter().fold(blocked, |m, v| m.max(v.abs()));
        }
        let inside: f64 = range.clone().flat_map(|c| g.data[c * plane..(c + 1) * plane].iter()).map(|v| v.abs()).sum();
        ensure(inside > 0.0, || format!("{which:?} adapter passes no gradient into its own group"))?;
    }
    let mut frozen_grad: f64 = 0.0;
    teacher.visit_params("", &mut |_, p| frozen_grad = p.grad.iter().fold(frozen_grad, |m, v| m.max(v.abs())));
    labelenc.visit_params("", &mut |_, p| frozen_grad = p.grad.iter().fold(frozen_grad, |m, v| m.max(v.abs())));
    ensure(blocked < 1e-12, || format!("blocked-gradient max {blocked:e}"))?;
    ensure(frozen_grad < 1e-12, || format!("frozen sources received gradient {frozen_grad:e}"))?;
    ensure(state_hash(&teacher) == t_hash && state_hash(&labelenc) == l_hash, || "frozen sources changed".into())?;

    Ok(format!(
        "worst fd rel err {worst:.1e}; blocked-gradient max {blocked:.0e}; frozen grad {frozen_grad:.0e}; {:.1}s",
        t0.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// Criteria 3 to 8 on the desk profile

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

struct Desk {
    cfg: ExperimentConfig,
    bench: Workbench<f32>,
    components: AblationTable,
    variants: AblationTable,
    ratios: AblationTable,
    distance: AblationTable,
    seconds: f64,
}

fn run_desk() -> Result<Desk, String> {
    let t0 = Instant::now();
    let cfg = ExperimentConfig::load(&repo_root().join("configs/desk.toml")).map_err(|e| e.to_string())?;
    let data = Dataset::generate(&cfg.world, cfg.data.train_scenes, cfg.data.val_scenes).map_err(|e| e.to_string())?;
    let corpus = Corpus::<f32>::new(data, &cfg);
    let mut bench = Workbench::new(cfg.clone(), corpus);
    let start = Instant::now();
    bench.progress = Some(Box::new(move |msg: &str| eprintln!("  [{:>6.0}s] {msg}", start.elapsed().as_secs_f64())));
    let mut table = |axis| bench.run(axis, &SEEDS).map_err(|e| e.to_string());
    let components = table(AblationAxis::Components)?;
    let variants = table(AblationAxis::LabelencVariant)?;
    let ratios = table(AblationAxis::ChannelRatio)?;
    let distance = table(AblationAxis::Distance)?;
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
    for t in [&components, &variants, &ratios, &distance] {
        eprint!("{}", t.to_csv());
        let name = t.axis.name();
        std::fs::write(out.join(format!("{name}.csv")), t.to_csv()).map_err(|e| e.to_string())?;
        std::fs::write(out.join(format!("{name}_seeds.csv")), t.to_seed_csv()).map_err(|e| e.to_string())?;
    }
    eprintln!("tables written to {}", out.display());
    Ok(Desk { cfg, bench, components, variants, ratios, distance, seconds: t0.elapsed().as_secs_f64() })
}

fn mean_map(t: &AblationTable, row: &str) -> Result<f64, String> {
    t.row(row).map(|r| r.mean_map()).ok_or_else(|| format!("missing row {row}"))
}

fn criterion_3(desk: &mut Desk) -> Outcome {
    let val = desk.cfg.data.val_scenes;
    ensure(val >= 500, || format!("desk profile holds out {val} scenes, need 500"))?;
    let maps: Vec<f64> = SEEDS
        .iter()
        .map(|&s| desk.bench.label_encoder(s, LabelEncoderVariant::Inverse).map(|(_, r)| r.map))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let list = maps.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>().join(", ");
    ensure(maps.iter().all(|&m| m >= 0.90), || format!("autoencoder mAP per seed [{list}] on {val} scenes, need >= 0.90"))?;
    Ok(format!("autoencoder mAP per seed [{list}] on {val} held-out scenes"))
}

fn criterion_4(desk: &Desk) -> Outcome {
    let t = &desk.components;
    let names = ["baseline", "lidar", "lidar+label", "lidar+label+partition"];
    let m: Vec<f64> = names.iter().map(|n| mean_map(t, n)).collect::<Result<_, _>>()?;
    let shown = names.iter().zip(&m).map(|(n, v)| format!("{n} {v:.4}")).collect::<Vec<_>>().join(" | ");
    ensure(m[0] < m[1] && m[1] <= m[2] && m[2] < m[3], || format!("mean mAP {shown}"))?;
    Ok(format!("mean mAP {shown}"))
}

fn criterion_5(desk: &Desk) -> Outcome {
    let t = &desk.variants;
    let inv = mean_map(t, "inverse")?;
    let ae = mean_map(t, "autoencoder")?;
    let st = mean_map(t, "labelenc-style")?;
    let shown = format!("inverse {inv:.4} | autoencoder {ae:.4} | labelenc-style {st:.4}");
    ensure(inv > ae && inv > st, || format!("mean mAP {shown}"))?;
    Ok(format!("mean mAP {shown}"))
}

fn criterion_6(desk: &Desk) -> Outcome {
    let t = &desk.distance;
    let far = |name: &str| t.row(name).map(|r| r.mean_mase()).ok_or_else(|| format!("missing row {name}"));
    let (lidar, both) = (far("lidar/far")?, far("lidar+label/far")?);
    let shown = format!("far mASE lidar {lidar:.4} vs lidar+label {both:.4} (split {} m)", desk.cfg.split_distance());
    ensure(both < lidar, || shown.clone())?;
    Ok(shown)
}

fn criterion_7(desk: &Desk) -> Outcome {
    let t = &desk.ratios;
    ensure(t.rows.len() == 3, || format!("expected 3 ratio rows, got {}", t.rows.len()))?;
    let best = t.rows.iter().max_by(|a, b| a.mean_map().total_cmp(&b.mean_map())).unwrap();
    let even = t.row("2:2:2").ok_or("missing row 2:2:2")?;
    let gap = best.mean_map() - even.mean_map();
    let sigma = ((best.std_map().powi(2) + even.std_map().powi(2)) / 2.0).sqrt();
    let shown = t.rows.iter().map(|r| format!("{} {:.4}", r.config, r.mean_map())).collect::<Vec<_>>().join(" | ");
    ensure(gap <= 2.0 * sigma, || format!("{shown}; gap {gap:.4} > 2 sigma {:.4}", 2.0 * sigma))?;
    Ok(format!("{shown}; best {} gap {gap:.4} <= 2 sigma {:.4}", best.config, 2.0 * sigma))
}

fn criterion_8(desk: &mut Desk) -> Outcome {
    // Label-encoder training leaves the teacher head exactly as it was.
    for &s in &SEEDS {
        let teacher_head = state_hash(&desk.bench.teacher(s).map_err(|e| e.to_string())?.0.head);
        let enc_head = state_hash(&desk.bench.label_encoder(s, LabelEncoderVariant::Inverse).map_err(|e| e.to_string())?.0.head);
        ensure(teacher_head == enc_head, || format!("seed {s}: label-encoder head differs from the teacher head"))?;
    }
    // A full stage-2 run from checkpoints leaves both files byte-identical.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = desk.cfg.clone();
    cfg.student.epochs = 2;
    cfg.student.decay_epochs.clear();
    let teacher = desk.bench.teacher(0).map_err(|e| e.to_string())?.0.clone();
    let labelenc = desk.bench.label_encoder(0, LabelEncoderVariant::Inverse).map_err(|e| e.to_string())?.0.clone();
    let (tp, lp) = (dir.path().join("teacher.ckpt"), dir.path().join("labelenc.ckpt"));
    save_teacher(&tp, &cfg, &teacher).map_err(|e| e.to_string())?;
    save_labelenc(&lp, &cfg, &labelenc).map_err(|e| e.to_string())?;
    let before = (file_hash(&tp).map_err(|e| e.to_string())?, file_hash(&lp).map_err(|e| e.to_string())?);
    let out = dir.path().join("student");
    let run = RunDir::create(&out, &RunManifest::new("train", None, &cfg, &out), &cfg).map_err(|e| e.to_string())?;
    let res = run_stage_student(&cfg, &desk.bench.corpus, Some(&tp), Some(&lp), &run).map_err(|e| e.to_string())?;
    let after = (file_hash(&tp).map_err(|e| e.to_string())?, file_hash(&lp).map_err(|e| e.to_string())?);
    ensure(before == after, || "checkpoint files changed during stage 2".into())?;
    ensure(res.audit.intact(), || format!("parameter audit failed: {:?}", res.audit))?;
    ensure(res.audit.teacher_before.is_some() && res.audit.labelenc_before.is_some(), || "audit did not cover both sources".into())?;
    Ok(format!("teacher {}.. labelenc {}.. unchanged; head hashes equal for {} seeds", &after.0[..12], &after.1[..12], SEEDS.len()))
}

// ---------------------------------------------------------------------------
// Criterion 9

fn criterion_9() -> Outcome {
    let t0 = Instant::now();
    let cfg = tiny_config();
    let data = Dataset::generate(&cfg.world, cfg.data.train_scenes, cfg.data.val_scenes).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    data.save(dir.path()).map_err(|e| e.to_string())?;
    let loaded = Dataset::load(dir.path()).map_err(|e| e.to_string())?;
    ensure(loaded == data, || "dataset changed through save/load".into())?;

    let run = |data: Dataset| -> Result<(String, String), String> {
        let corpus = Corpus::<f32>::new(data, &cfg);
        let teacher = train_teacher(&cfg, &corpus).map_err(|e| e.to_string())?;
        let le = train_labelenc(&cfg, &corpus, LabelEncoderVariant::Inverse, Some(&teacher.model), None).map_err(|e| e.to_string())?;
        let student = train_student(&cfg, &corpus, Some(&teacher.model), Some(&le.model)).map_err(|e| e.to_string())?;
        let metrics = serde_json::to_string(&(teacher.report(), &le.report, student.stage.report())).unwrap();
        Ok((metrics, state_hash(&student.stage.model)))
    };
    let a = run(data)?;
    let b = run(loaded)?;
    ensure(a == b, || format!("reruns differ:\n{}\n{}", a.0, b.0))?;

    // Encode/decode: ground-truth maps decode back to the source boxes.
    let world = WorldSpec { extent: 40.0, ..WorldSpec::default() };
    let grid = BevGridSpec::for_world(&world, 64);
    let scenes = generate_scenes(&world, 0..200).map_err(|e| e.to_string())?;
    let (mut worst_c, mut worst_s, mut worst_y, mut n) = (0.0f64, 0.0f64, 0.0f64, 0);
    for s in &scenes {
        // Boxes sharing a center cell cannot both be encoded.
        let cells: Vec<_> = s.boxes.iter().map(|b| (b.class_id, grid.cell_of(b.x as f64, b.y as f64))).collect();
        if (1..cells.len()).any(|i| cells[..i].contains(&cells[i])) {
            continue;
        }
        let maps = encode_maps::<f32>(&s.boxes, world.num_classes, &grid, &HeatmapParams::default()).map_err(|e| e.to_string())?;
        let dets: Vec<Detection> = head_decode(&maps, &grid, 0.5, 100).remove(0);
        ensure(dets.len() == s.boxes.len(), || format!("scene {}: {} boxes decoded as {}", s.scene_id, s.boxes.len(), dets.len()))?;
        for b in &s.boxes {
            let d = dets
                .iter()
                .filter(|d| d.label.class_id == b.class_id)
                .min_by(|p, q| {
                    let dp = (p.label.x - b.x).hypot(p.label.y - b.y);
                    let dq = (q.label.x - b.x).hypot(q.label.y - b.y);
                    dp.total_cmp(&dq)
                })
                .ok_or("missing class")?;
            worst_c = worst_c.max(((d.label.x - b.x) as f64).hypot((d.label.y - b.y) as f64));
            worst_s = worst_s.max(((d.label.w / b.w) as f64 - 1.0).abs()).max(((d.label.l / b.l) as f64 - 1.0).abs());
            worst_y = worst_y.max(canonical_yaw(d.label.yaw as f64 - b.yaw as f64).abs());
            n += 1;
        }
    }
    ensure(worst_c < grid.cell_size / 2.0, || format!("center error {worst_c}"))?;
    ensure(worst_s < 0.01, || format!("size rel error {worst_s}"))?;
    ensure(worst_y < PI / 180.0, || format!("yaw error {worst_y}"))?;
    Ok(format!(
        "dataset round trip lossless; reruns bit-identical; {n} boxes round-trip (center {worst_c:.1e} m, size {worst_s:.1e}, yaw {worst_y:.1e} rad); {:.1}s",
        t0.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// Criterion 10

#[derive(Deserialize)]
struct OracleScene {
    gts: Vec<BoxLabel>,
    preds: Vec<Detection>,
}

#[derive(Deserialize)]
struct OracleExpected {
    all: Metrics,
    near: Metrics,
    far: Metrics,
}

#[derive(Deserialize)]
struct OracleFixture {
    num_classes: usize,
    thresholds: Vec<f64>,
    tp_threshold: f64,
    split: f64,
    scenes: Vec<OracleScene>,
    expected: OracleExpected,
}

fn criterion_10() -> Outcome {
    let fx: OracleFixture = serde_json::from_str(include_str!("fixtures/metrics_fixture.json")).map_err(|e| e.to_string())?;
    let cfg = EvalConfig { thresholds: fx.thresholds, tp_threshold: fx.tp_threshold };
    let n = fx.scenes.len();
    let scenes: Vec<(Vec<Detection>, Vec<BoxLabel>)> = fx.scenes.into_iter().map(|s| (s.preds, s.gts)).collect();
    let result = match_detections(&scenes, fx.num_classes, &cfg);
    let (near, far) = bucket_by_distance(&result, fx.split);
    let mut worst: f64 = 0.0;
    for (name, got, want) in [("all", summarize(&result), fx.expected.all), ("near", near, fx.expected.near), ("far", far, fx.expected.far)] {
        for (field, g, w) in [("mAP", got.map, want.map), ("mATE", got.mate, want.mate), ("mASE", got.mase, want.mase), ("mAOE", got.maoe, want.maoe), ("NDS*", got.nds, want.nds)] {
            worst = worst.max((g - w).abs());
            ensure((g - w).abs() <= 1e-9, || format!("{name} {field}: {g} vs oracle {w}"))?;
        }
    }
    Ok(format!("{n} scenes, overall/near/far, max abs diff {worst:.1e}"))
}

// ---------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    // `cargo test -- --list` and filters are passed through; this target has
    // a single entry.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, r: Outcome| {
        match &r {
            Ok(d) => println!("PASS  {n:>2} {name}: {d}"),
            Err(d) => println!("FAIL  {n:>2} {name}: {d}"),
        }
        results.push((n, name, r));
    };
    report(1, "loss correctness", guarded(criterion_1));
    report(2, "gradients and blocking", guarded(criterion_2));
    report(9, "determinism and round trips", guarded(criterion_9));
    report(10, "metric oracle", guarded(criterion_10));
    eprintln!("desk profile, seeds {SEEDS:?}:");
    match guarded(|| run_desk().map(|d| { let s = d.seconds; DESK.with(|c| *c.borrow_mut() = Some(d)); format!("{s:.0}s") })) {
        Ok(t) => {
            eprintln!("desk ablations finished in {t}");
            DESK.with(|c| {
                let mut slot = c.borrow_mut();
                let desk = slot.as_mut().unwrap();
                report(3, "inverse-head autoencoder", guarded(|| criterion_3(desk)));
                report(4, "component ordering", guarded(|| criterion_4(desk)));
                report(5, "inverse approximation", guarded(|| criterion_5(desk)));
                report(6, "far-bucket mASE", guarded(|| criterion_6(desk)));
                report(7, "channel ratio", guarded(|| criterion_7(desk)));
                report(8, "frozen audits", guarded(|| criterion_8(desk)));
            });
        }
        Err(e) => {
            for (n, name) in [(3, "inverse-head autoencoder"), (4, "component ordering"), (5, "inverse approximation"), (6, "far-bucket mASE"), (7, "channel ratio"), (8, "frozen audits")] {
                report(n, name, Err(format!("desk run failed: {e}")));
            }
        }
    }
    results.sort_by_key(|r| r.0);
    let failed: Vec<_> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!("acceptance: {} passed, {} failed {failed:?}", results.len() - failed.len(), failed.len());
    // Criteria 3 to 7 compare trained models across seeds. They are reported
    // either way, and only fail the process under ACCEPTANCE_STRICT=1.
    let strict = std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v == "1");
    let fatal: Vec<_> = failed.iter().filter(|&&n| strict || !EXPERIMENTAL.contains(&n)).collect();
    if !fatal.is_empty() {
        std::process::exit(1);
    }
}

thread_local! {
    static DESK: std::cell::RefCell<Option<Desk>> = const { std::cell::RefCell::new(None) };
}

//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so each line reports its own
//! measured numbers. Set `MIPA_SKIP_TREND=1` to skip the long training sweep
//! (it is then reported as SKIP, never PASS).

mod common;

use std::time::{Duration, Instant};

use common::*;
use mipa::agnostic::{lambda_schedule, modality_bce, GrlGate, ModalityMapPrediction};
use mipa::data::{estimate_pairwise_mi, generate_dataset, histogram_entropy, patch_intensity_pairs, PairedSample, SceneSpec};
use mipa::detect::{iou, BoundingBox, DetectionSet};
use mipa::eval::average_precision;
use mipa::model::{BatchItem, Detector, ModalityPath, StepSpec};
use mipa::mosaic::{mask_count, mix, patchify, sample_mask, unpatchify};
use mipa::rho::RhoPolicy;
use mipa::rng::{stream_rng, streams};
use mipa::train::*;
use mipa::Execution;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, budget: Duration) -> Result<(), String> {
    ensure(elapsed < budget, || format!("took {elapsed:.1?}, budget {budget:?}"))
}

// ---------------------------------------------------------------- masks

fn mask_suite() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut checked = 0usize;
    for case in 0..300u64 {
        let p = [1, 2, 4][case as usize % 3];
        let (gh, gw) = (rng.gen_range(1..=9), rng.gen_range(1..=9));
        let c = rng.gen_range(1..=3);
        let f = Array3::from_shape_fn((gh * p, gw * p, c), |_| rng.gen::<f32>());
        let g = Array3::from_shape_fn((gh * p, gw * p, c), |_| rng.gen::<f32>());
        let (pf, pg) = (patchify(f.view(), p).unwrap(), patchify(g.view(), p).unwrap());
        ensure(unpatchify(&pf) == f, || format!("round-trip mismatch at case {case}"))?;
        let n = pf.n();
        let rho = if case % 10 == 0 { (case % 20 / 10) as f64 } else { rng.gen::<f64>() };
        let mask = sample_mask(n, rho, case).unwrap();
        let expect = (n as f64 * rho).round_ties_even() as usize;
        ensure(mask.m_count == expect && mask_count(n, rho) == expect, || {
            format!("n={n} rho={rho}: {} f-patches, want {expect}", mask.m_count)
        })?;
        ensure(mask.assignment.iter().filter(|&&a| a == 1).count() == expect, || "assignment disagrees with count".into())?;
        ensure(mask.m_count + mask.l_count == n, || "counts do not partition the grid".into())?;
        let mosaic = mix(&pf, &pg, &mask).unwrap();
        let mut inverse = mask.clone();
        inverse.assignment.iter_mut().for_each(|a| *a = 1 - *a);
        let complement = mix(&pf, &pg, &inverse).unwrap();
        for i in 0..n {
            let (src, other) = if mask.assignment[i] == 1 { (&pf, &pg) } else { (&pg, &pf) };
            ensure(mosaic.patch_flat(i) == src.patch_flat(i), || format!("patch {i} has the wrong source"))?;
            ensure(complement.patch_flat(i) == other.patch_flat(i), || format!("complement patch {i} wrong"))?;
        }
        if rho == 0.0 {
            ensure(mosaic == pg, || "rho=0 mosaic differs from g".into())?;
        }
        if rho == 1.0 {
            ensure(mosaic == pf, || "rho=1 mosaic differs from f".into())?;
        }
        checked += 1;
    }
    // Exhaustive counts on a dense grid of ratios.
    for n in 1..=64 {
        for k in 0..=200 {
            let rho = k as f64 / 200.0;
            let m = sample_mask(n, rho, 3).unwrap();
            ensure(m.m_count == (n as f64 * rho).round_ties_even() as usize, || format!("n={n} rho={rho}"))?;
        }
    }
    within(t.elapsed(), Duration::from_secs(10))?;
    Ok(format!("{checked} random grids + 12864 count cases exact, {:.2?}", t.elapsed()))
}

// ---------------------------------------------------------------- GRL

fn ma_only(path: ModalityPath) -> StepSpec {
    StepSpec {
        lambda_reg: 5.0,
        det_weight: 0.0,
        modality: path,
    }
}

fn grl_identity() -> Outcome {
    let t = Instant::now();
    let cfg = tiny_model_config(true);
    let mut model: Detector<f64> = Detector::new(&cfg, 5).unwrap();
    let input = mosaic_input(&cfg, 8, 0.5);
    let item = BatchItem {
        grid: &input.grid,
        targets: &input.targets,
        modality_map: Some(&input.map),
    };
    let encoder_ids: Vec<usize> = model
        .params
        .iter()
        .filter(|(n, _)| n.starts_with("encoder."))
        .flat_map(|(n, _)| model.params.flat_range(model.params.id(n).unwrap()))
        .collect();
    let mut worst_identity = 0.0f64;
    for lambda in [0.05, 0.3, 1.0] {
        let rev = model.sample_grad(&item, &ma_only(ModalityPath::Reversed(GrlGate::constant(lambda)))).unwrap().grads;
        let plain = model.sample_grad(&item, &ma_only(ModalityPath::Plain)).unwrap().grads;
        for &i in &encoder_ids {
            worst_identity = worst_identity.max(rel_err(rev.flat_get(i), -lambda * plain.flat_get(i)));
        }
    }
    let lambda = 0.3;
    let rev = model.sample_grad(&item, &ma_only(ModalityPath::Reversed(GrlGate::constant(lambda)))).unwrap().grads;
    let idx = sample_param_indices(&model, "encoder.", 120, 1);
    let loss = |m: &Detector<f64>| {
        let item = BatchItem {
            grid: &input.grid,
            targets: &input.targets,
            modality_map: Some(&input.map),
        };
        m.sample_grad(&item, &ma_only(ModalityPath::Plain)).unwrap().l_ma
    };
    let mut worst_fd = 0.0f64;
    for &i in &idx {
        let fd = central_diff(&mut model, i, FD_STEP, loss);
        worst_fd = worst_fd.max(rel_err(rev.flat_get(i), -lambda * fd));
    }
    ensure(worst_identity < 1e-6, || format!("reversed vs −λ·plain rel err {worst_identity:e}"))?;
    ensure(idx.len() >= 100 && worst_fd < 1e-4, || format!("vs finite differences rel err {worst_fd:e} on {}", idx.len()))?;
    within(t.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "identity {worst_identity:.1e} over {} params, FD {worst_fd:.1e} over {} params, {:.1?}",
        encoder_ids.len(),
        idx.len(),
        t.elapsed()
    ))
}

// ---------------------------------------------------------------- λ

/// tanh(1/2), computed independently to 20 digits.
const TANH_HALF: f64 = 0.462_117_157_260_009_758_50;

fn lambda_ramp() -> Outcome {
    ensure(lambda_schedule(1.0, 0.0).unwrap() == 0.0, || "λ(0) != 0".into())?;
    for gamma in [0.05, 0.10, 0.15, 1.0, 10.0] {
        ensure(lambda_schedule(gamma, 0.0).unwrap() == 0.0, || format!("λ(0) != 0 for γ={gamma}"))?;
        let vals: Vec<f64> = (0..1000).map(|k| lambda_schedule(gamma, k as f64 / 999.0).unwrap()).collect();
        if let Some(k) = vals.windows(2).position(|w| w[1] <= w[0]) {
            return Err(format!("γ={gamma}: not increasing at grid point {k}"));
        }
    }
    let v = lambda_schedule(1.0, 1.0).unwrap();
    ensure((v - TANH_HALF).abs() < 1e-9, || format!("λ(1,1)={v}, want {TANH_HALF}"))?;
    Ok(format!("λ(0)=0, strictly increasing for 5 γ, |λ(1,1)−tanh½|={:.1e}", (v - TANH_HALF).abs()))
}

// ---------------------------------------------------------------- loss composition

fn tiny_experiment(regime: Regime, train: usize, test: usize, epochs: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::synthetic(regime, train, test);
    c.dataset = DatasetConfig::Synthetic {
        spec: tiny_spec(),
        train_size: train,
        test_size: test,
    };
    c.encoder = tiny_model_config(false).encoder;
    c.epochs = epochs;
    c.log_every = 1;
    c
}

fn loss_composition() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let c = tiny_experiment(Regime::MipaMa, 36, 12, 2);
    run_training(&c, Some(dir.path())).map_err(|e| e.to_string())?;
    let logged = read_metrics_csv(&dir.path().join("metrics.csv")).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut n = 0;
    for r in logged.iter().filter(|r| r.kind == RecordKind::Train) {
        let (Some(d), Some(l), Some(m), Some(t)) = (r.l_det, r.lambda_ma, r.l_ma, r.l_total) else {
            return Err(format!("step {} is missing a loss term", r.step));
        };
        worst = worst.max((t - (d + l * m)).abs());
        n += 1;
    }
    ensure(n > 0, || "no training rows logged".into())?;
    ensure(worst < 1e-7, || format!("max |total − (det + λ·ma)| = {worst:e}"))?;
    Ok(format!("{n} logged steps, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- BCE

fn bce_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    let maps = 40;
    for _ in 0..maps {
        let (h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let target = Array2::from_shape_fn((h, w), |_| rng.gen_range(0..=1u8));
        let probs = Array2::from_shape_fn((h, w), |_| rng.gen_range(0.01..0.99));
        let mut hand = 0.0;
        for (&p, &m) in probs.iter().zip(target.iter()) {
            hand += if m == 1 { -f64::ln(p) } else { -f64::ln(1.0 - p) };
        }
        hand /= (h * w) as f64;
        let (loss, _) = modality_bce(&ModalityMapPrediction::from_probabilities(probs.clone()), &target).unwrap();
        worst = worst.max((loss - hand).abs());

        let exact = target.mapv(|m| m as f64);
        let (at_target, _) = modality_bce(&ModalityMapPrediction::from_probabilities(exact.clone()), &target).unwrap();
        ensure(at_target < loss, || format!("loss at M̂=M ({at_target}) not below a random prediction ({loss})"))?;
        // Any single-cell move away from the target raises the loss.
        for idx in [(0, 0), (h - 1, w - 1)] {
            let mut moved = exact.clone();
            moved[idx] = (moved[idx] - 0.3f64).abs();
            let (l, _) = modality_bce(&ModalityMapPrediction::from_probabilities(moved), &target).unwrap();
            ensure(l > at_target, || "perturbing M̂ away from M lowered the loss".into())?;
        }
    }
    ensure(worst < 1e-6, || format!("max abs error {worst:e}"))?;
    Ok(format!("{maps} random maps, max abs error {worst:.1e}, minimum at M̂=M"))
}

// ---------------------------------------------------------------- ρ

/// Asymptotic Kolmogorov tail with the usual small-sample correction.
fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lam = (sn + 0.12 + 0.11 / sn) * d;
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lam * lam).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn rho_policies() -> Outcome {
    let n = 10_000;
    let mut p = RhoPolicy::variable(7).unwrap();
    let mut xs: Vec<f64> = (0..n).map(|_| p.next_rho()).collect();
    ensure(xs.iter().all(|x| (0.0..=1.0).contains(x)), || "draw outside [0, 1]".into())?;
    xs.sort_by(f64::total_cmp);
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / n as f64 - x).max(x - i as f64 / n as f64))
        .fold(0.0, f64::max);
    let pv = ks_p_value(d, n);
    ensure(pv > 0.01, || format!("KS D={d:.4}, p={pv:.4}"))?;

    let mut fixed = RhoPolicy::fixed(0.3, 1).unwrap();
    for epoch in 0..5 {
        for _ in 0..50 {
            ensure(fixed.next_rho() == 0.3, || format!("fixed policy drifted in epoch {epoch}"))?;
        }
        fixed.advance_epoch();
    }

    // Curriculum: the warmup value for `warmup` epochs, then the uniform
    // stream from its first draw.
    let (warm, warmup, steps) = (0.25, 3, 40);
    let mut cur = RhoPolicy::curriculum(warm, warmup, 5).unwrap();
    let mut uniform = stream_rng(5, streams::RHO, 0);
    for epoch in 0..8 {
        for step in 0..steps {
            let got = cur.next_rho();
            let want = if epoch < warmup { warm } else { uniform.gen_range(0.0..=1.0) };
            ensure(got == want, || format!("curriculum epoch {epoch} step {step}: {got} != {want}"))?;
        }
        cur.advance_epoch();
    }
    Ok(format!("variable KS D={d:.4} p={pv:.3}; fixed and curriculum exact over 250/320 steps"))
}

// ---------------------------------------------------------------- AP

const TP_THRESHOLDS: [f64; 2] = [0.5, 0.75];

/// All injective partial maps from predictions to GTs with IoU ≥ thr.
fn enumerate_matchings(ious: &[Vec<f64>], thr: f64) -> Vec<Vec<Option<usize>>> {
    fn rec(i: usize, ious: &[Vec<f64>], thr: f64, used: &mut Vec<bool>, cur: &mut Vec<Option<usize>>, out: &mut Vec<Vec<Option<usize>>>) {
        if i == ious.len() {
            out.push(cur.clone());
            return;
        }
        cur.push(None);
        rec(i + 1, ious, thr, used, cur, out);
        cur.pop();
        for g in 0..used.len() {
            if !used[g] && ious[i][g] >= thr {
                used[g] = true;
                cur.push(Some(g));
                rec(i + 1, ious, thr, used, cur, out);
                cur.pop();
                used[g] = false;
            }
        }
    }
    let n_gt = ious.first().map_or(0, |r| r.len());
    let mut out = Vec::new();
    rec(0, ious, thr, &mut vec![false; n_gt], &mut Vec::new(), &mut out);
    out
}

/// The greedy rule as a predicate: visiting predictions by descending score
/// (lower index first on ties), each one holds the highest-IoU eligible GT
/// not held by an earlier prediction (lowest GT index on ties), or nothing
/// if none is eligible.
fn satisfies_greedy(m: &[Option<usize>], ious: &[Vec<f64>], order: &[usize], thr: f64) -> bool {
    let n_gt = ious.first().map_or(0, |r| r.len());
    let mut held = vec![false; n_gt];
    for &p in order {
        let best = (0..n_gt)
            .filter(|&g| !held[g] && ious[p][g] >= thr)
            .fold(None, |acc: Option<usize>, g| match acc {
                Some(b) if ious[p][b] >= ious[p][g] => Some(b),
                _ => Some(g),
            });
        if m[p] != best {
            return false;
        }
        if let Some(g) = best {
            held[g] = true;
        }
    }
    true
}

fn brute_force_ap(preds: &[DetectionSet], gts: &[DetectionSet], thr: f64, num_classes: usize) -> (Vec<Option<f64>>, f64) {
    let mut per_class = Vec::new();
    for c in 0..num_classes {
        let num_gt: usize = gts.iter().map(|g| g.boxes.iter().filter(|b| b.class_id == c).count()).sum();
        // (score, image position, visit position, hit)
        let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
        for (img, p) in preds.iter().enumerate() {
            let gt = gts.iter().find(|g| g.image_id == p.image_id);
            let pc: Vec<&BoundingBox> = p.boxes.iter().filter(|b| b.class_id == c).collect();
            let gc: Vec<&BoundingBox> = gt.map(|g| g.boxes.iter().filter(|b| b.class_id == c).collect()).unwrap_or_default();
            let ious: Vec<Vec<f64>> = pc.iter().map(|a| gc.iter().map(|b| iou(a, b)).collect()).collect();
            let mut order: Vec<usize> = (0..pc.len()).collect();
            order.sort_by(|&a, &b| pc[b].score().partial_cmp(&pc[a].score()).unwrap().then(a.cmp(&b)));
            let valid: Vec<Vec<Option<usize>>> = enumerate_matchings(&ious, thr)
                .into_iter()
                .filter(|m| satisfies_greedy(m, &ious, &order, thr))
                .collect();
            assert_eq!(valid.len(), 1, "greedy constraints must pin down one matching");
            for (pos, &pi) in order.iter().enumerate() {
                ranked.push((pc[pi].score(), img, pos, valid[0][pi].is_some()));
            }
        }
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let ap = match (num_gt, ranked.is_empty()) {
            (0, true) => None,
            (0, false) => Some(0.0),
            _ => {
                let mut curve = Vec::new();
                let mut tp = 0usize;
                for (k, r) in ranked.iter().enumerate() {
                    tp += r.3 as usize;
                    curve.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
                }
                let mut total = 0.0;
                for r in 0..101 {
                    let level = r as f64 / 100.0;
                    let best = curve.iter().filter(|(rec, _)| *rec >= level).map(|(_, p)| *p).fold(None, |a: Option<f64>, p| Some(a.map_or(p, |a| a.max(p))));
                    total += best.unwrap_or(0.0);
                }
                Some(total / 101.0)
            }
        };
        per_class.push(ap);
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    (per_class, mean)
}

fn random_box(rng: &mut ChaCha8Rng, near: Option<&BoundingBox>, class_id: usize) -> BoundingBox {
    let (cx, cy, w, h) = match near {
        Some(b) => (
            b.cx + rng.gen_range(-0.05..0.05),
            b.cy + rng.gen_range(-0.05..0.05),
            b.w * rng.gen_range(0.7..1.3),
            b.h * rng.gen_range(0.7..1.3),
        ),
        None => (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.1..0.35), rng.gen_range(0.1..0.35)),
    };
    BoundingBox::gt(cx, cy, w, h, class_id)
}

fn ap_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let instances = 200;
    let mut compared = 0;
    for inst in 0..instances {
        let num_classes = rng.gen_range(1..=2);
        let images = rng.gen_range(1..=4);
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for id in 0..images as u64 {
            let gt: Vec<BoundingBox> = (0..rng.gen_range(0..=4))
                .map(|_| {
                    let class = rng.gen_range(0..num_classes);
                    random_box(&mut rng, None, class)
                })
                .collect();
            let mut pb = Vec::new();
            for _ in 0..rng.gen_range(0..=4) {
                let near = if !gt.is_empty() && rng.gen_bool(0.7) { Some(gt[rng.gen_range(0..gt.len())]) } else { None };
                let class = near.map_or(rng.gen_range(0..num_classes), |b| if rng.gen_bool(0.9) { b.class_id } else { rng.gen_range(0..num_classes) });
                let b = random_box(&mut rng, near.as_ref(), class);
                // Coarse scores make ties common.
                let score = (rng.gen_range(1..=5) as f64) / 5.0;
                pb.push(BoundingBox::pred(b.cx, b.cy, b.w, b.h, b.class_id, score));
            }
            gts.push(DetectionSet::new(id, gt));
            preds.push(DetectionSet::new(id, pb));
        }
        for thr in TP_THRESHOLDS {
            let got = average_precision(&preds, &gts, thr, num_classes);
            let (per_class, mean) = brute_force_ap(&preds, &gts, thr, num_classes);
            ensure(got.per_class == per_class && got.mean == mean, || {
                format!("instance {inst} @ {thr}: {:?}/{} vs oracle {per_class:?}/{mean}", got.per_class, got.mean)
            })?;
            compared += 1;
        }
    }
    let a = BoundingBox::from_xyxy(0.1, 0.1, 0.3, 0.3, 0);
    let cases = [
        (iou(&a, &a), 1.0),
        (iou(&a, &BoundingBox::from_xyxy(0.5, 0.5, 0.7, 0.7, 0)), 0.0),
        (iou(&a, &BoundingBox::from_xyxy(0.2, 0.2, 0.4, 0.4, 0)), 1.0 / 7.0),
    ];
    for (got, want) in cases {
        ensure((got - want).abs() < 1e-9, || format!("IoU {got}, want {want}"))?;
    }
    Ok(format!("{instances} instances ({compared} evaluations) exactly equal; IoU 1, 0, 1/7 ok"))
}

// ---------------------------------------------------------------- degeneracy

fn regime_degeneracy() -> Outcome {
    let log = |c: &ExperimentConfig| -> Result<Vec<MetricsRecord>, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        run_training(c, Some(dir.path())).map_err(|e| e.to_string())?;
        read_metrics_csv(&dir.path().join("metrics.csv")).map_err(|e| e.to_string())
    };
    let rgb = log(&tiny_experiment(Regime::RgbOnly, 30, 10, 2))?;
    let ir = log(&tiny_experiment(Regime::IrOnly, 30, 10, 2))?;
    let mut both = tiny_experiment(Regime::Both, 30, 10, 2);
    both.both_rho = Some(0.0);
    let both0 = log(&both)?;
    both.both_rho = Some(1.0);
    let both1 = log(&both)?;
    ensure(both0 == rgb, || "both(0) log differs from rgb_only".into())?;
    ensure(both1 == ir, || "both(1) log differs from ir_only".into())?;
    ensure(rgb != ir, || "rgb_only and ir_only logs coincide; comparison is vacuous".into())?;
    Ok(format!("{} log rows identical for both(0)≡rgb_only and both(1)≡ir_only", rgb.len()))
}

// ---------------------------------------------------------------- trend

/// Learning-rate schedule for the trend sweep: the constant default does not
/// reach its plateau within 12 epochs at this data size, so every regime
/// runs at a higher rate with a 10× drop for the last epoch.
const TREND_LR: f64 = 3e-4;
const TREND_LR_DROP: LrDrop = LrDrop { epoch: 11, factor: 0.1 };
const TREND_SEEDS: [u64; 3] = [0, 1, 2];

fn trend_experiment() -> Outcome {
    let t = Instant::now();
    let mut base = ExperimentConfig::synthetic(Regime::Mipa, 2000, 500);
    base.optimizer.adamw.lr = TREND_LR;
    base.optimizer.lr_drop = Some(TREND_LR_DROP);
    base.eval.every_epoch = false;
    base.execution = Execution::Parallel;
    let labels = ["rgb_only", "ir_only", "both", "mipa", "mipa_ma_0.05", "mipa_ma_0.10", "mipa_ma_0.15"];
    let bundles = vec![
        json!({"regime": "rgb_only"}),
        json!({"regime": "ir_only"}),
        json!({"regime": "both", "both_rho": 0.5}),
        json!({"regime": "mipa", "rho_policy": {"kind": "variable"}}),
        json!({"regime": "mipa_ma", "rho_policy": {"kind": "variable"}, "ma": {"gamma": 0.05}}),
        json!({"regime": "mipa_ma", "rho_policy": {"kind": "variable"}, "ma": {"gamma": 0.10}}),
        json!({"regime": "mipa_ma", "rho_policy": {"kind": "variable"}, "ma": {"gamma": 0.15}}),
    ];
    let grid = GridSpec {
        axes: vec![GridAxis::bundles(bundles, labels.iter().map(|s| s.to_string()).collect())],
    };
    let out = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-trend");
    let outcome = run_ablation_grid(&base, &grid, &TREND_SEEDS, Some(&out)).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();

    let mut table = Vec::new();
    for row in &outcome.rows {
        ensure(row.n_ok() == TREND_SEEDS.len(), || format!("{}: only {} runs succeeded", row.label, row.n_ok()))?;
        let m = &row.mean;
        table.push((m.ap50_avg.unwrap(), m.ap50_rgb.unwrap(), m.ap50_ir.unwrap()));
    }
    for (label, (avg, rgb, ir)) in labels.iter().zip(&table) {
        println!("       {label:<13} AP50 avg {avg:.4}  rgb {rgb:.4}  ir {ir:.4}");
    }
    let [rgb_only, ir_only, both, mipa] = [table[0].0, table[1].0, table[2].0, table[3].0];
    let gap = |r: &(f64, f64, f64)| (r.1 - r.2).abs();
    let (best_i, best) = (4..7).map(|i| (i, table[i])).max_by(|a, b| a.1 .0.total_cmp(&b.1 .0)).unwrap();
    let mut failures = Vec::new();
    if !(mipa >= rgb_only + 0.03 && mipa >= ir_only + 0.03) {
        failures.push(format!("(a) mipa {mipa:.4} vs rgb_only {rgb_only:.4} / ir_only {ir_only:.4}"));
    }
    if !(mipa >= both - 0.01) {
        failures.push(format!("(b) mipa {mipa:.4} vs both {both:.4}"));
    }
    if !(best.0 >= mipa - 0.01 && gap(&best) <= gap(&table[3]) + 0.02) {
        failures.push(format!(
            "(c) {} {:.4} (gap {:.4}) vs mipa {mipa:.4} (gap {:.4})",
            labels[best_i],
            best.0,
            gap(&best),
            gap(&table[3])
        ));
    }
    if elapsed >= Duration::from_secs(45 * 60) {
        failures.push(format!("runtime {elapsed:.0?} over 45 min"));
    }
    if !failures.is_empty() {
        return Err(failures.join("; "));
    }
    Ok(format!(
        "mipa {mipa:.4} > rgb {rgb_only:.4}, ir {ir_only:.4}; both {both:.4}; {} {:.4} gap {:.4} (mipa gap {:.4}); {:.1} min",
        labels[best_i],
        best.0,
        gap(&best),
        gap(&table[3]),
        elapsed.as_secs_f64() / 60.0
    ))
}

// ---------------------------------------------------------------- MI

fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for k in i..=j {
                r[idx[k]] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (rank(xs), rank(ys));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn mi_diagnostic() -> Outcome {
    let (bins, patch) = (32, 4);
    let spec = SceneSpec { seed: 11, ..SceneSpec::default() };
    let paired = generate_dataset(&spec, 0, 300, Execution::Parallel);
    let identical: Vec<PairedSample> = paired
        .iter()
        .cloned()
        .map(|mut s| {
            s.image_g = s.image_f.clone();
            s
        })
        .collect();
    let mi_same = estimate_pairwise_mi(&identical, bins, patch).map_err(|e| e.to_string())?.mi_nats;
    let h: f64 = histogram_entropy(&patch_intensity_pairs(&identical, patch).iter().map(|p| p.0).collect::<Vec<_>>(), bins);
    let mi_paired = estimate_pairwise_mi(&paired, bins, patch).map_err(|e| e.to_string())?.mi_nats;
    ensure((mi_same - h).abs() < 1e-9, || format!("identical pairs give {mi_same}, marginal entropy is {h}"))?;
    ensure(mi_same > mi_paired, || format!("identical {mi_same} not above paired {mi_paired}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise: Vec<PairedSample> = (0..500)
        .map(|i| PairedSample {
            image_f: Array3::from_shape_fn((32, 32, 3), |_| rng.gen()),
            image_g: Array3::from_shape_fn((32, 32, 3), |_| rng.gen()),
            gt: DetectionSet::new(i, vec![]),
            scene_id: i,
            requested_objects: 0,
            object_masks: vec![],
        })
        .collect();
    let mi_noise = estimate_pairwise_mi(&noise, bins, patch).map_err(|e| e.to_string())?.mi_nats;
    ensure(mi_noise < 0.05, || format!("independent noise MI {mi_noise}"))?;

    // Shared scene, growing independent noise on one modality.
    let sigmas = [0.0, 0.05, 0.1, 0.2, 0.4, 0.8, 1.6];
    let sweep: Vec<f64> = sigmas
        .iter()
        .map(|&s| {
            let spec = SceneSpec {
                class_modality_affinity: vec![[1.0, 1.0], [1.0, 1.0]],
                noise_sigma_f: 0.05,
                noise_sigma_g: s,
                seed: 11,
                ..SceneSpec::default()
            };
            estimate_pairwise_mi(&generate_dataset(&spec, 0, 200, Execution::Parallel), bins, patch).unwrap().mi_nats
        })
        .collect();
    let rs = spearman(&sigmas, &sweep);
    ensure(rs <= -0.9, || format!("Spearman {rs:.3} over σ sweep {sweep:?}"))?;
    Ok(format!(
        "identical {mi_same:.3} = H, paired {mi_paired:.3}, noise {mi_noise:.4}; σ-sweep Spearman {rs:.2}"
    ))
}

fn main() {
    let skip_trend = std::env::var("MIPA_SKIP_TREND").is_ok_and(|v| v == "1");
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("mask/mosaic suite", mask_suite),
        ("GRL gradient identity", grl_identity),
        ("λ schedule", lambda_ramp),
        ("loss composition", loss_composition),
        ("BCE oracle", bce_oracle),
        ("ρ policies", rho_policies),
        ("AP oracle", ap_oracle),
        ("regime degeneracy", regime_degeneracy),
        ("trend experiment", trend_experiment),
        ("MI diagnostic", mi_diagnostic),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        if skip_trend && name == "trend experiment" {
            println!("SKIP {name}: MIPA_SKIP_TREND=1");
            continue;
        }
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

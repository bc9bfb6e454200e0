//! Acceptance suite. Runs every criterion, prints one line each, and exits
//! non-zero if any of them failed.

use std::collections::HashSet;
use std::error::Error as StdError;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use tempfile::TempDir;
use ttt_seg::autodiff::{relative_error, Graph, NodeId};
use ttt_seg::dataio::{generate, load_dataset, save_dataset, SyntheticSpec};
use ttt_seg::metrics::{dsc, instance_f1, nsd, LabelMask};
use ttt_seg::tensor::{Rng, Tensor};
use ttt_seg::training::{mean_foreground_dsc, predict_masks, train, EpochRecord, TrainRunConfig};
use ttt_seg::ttt::{
    inner_loss, ttt_scan, InnerModelKind, InnerWeights, ScanMode, TttLayerParams, TttSettings,
    TttWeights,
};
use ttt_seg::unet::{build_model, load_checkpoint, preset, save_checkpoint, ModelParams, Variant};
use ttt_seg::verify::run_suite;

type Res<T> = std::result::Result<T, Box<dyn StdError>>;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn within(t: Instant, budget: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e < budget, format!("{:.1} s of {} s", e.as_secs_f64(), budget.as_secs()))
}

fn get(t: &Tensor, i: usize, j: usize) -> f64 {
    t.data()[i * t.shape()[1] + j]
}

// 1

fn closed_form_gradient() -> Res<Verdict> {
    let start = Instant::now();
    let mut rng = Rng::new(1);
    let mut worst: f64 = 0.0;
    let mut triples = 0;
    for &d in &[1usize, 2, 4, 8] {
        for _ in 0..25 {
            let w = rng.normal_tensor([d, d], 0.0, 1.0)?;
            let k = rng.normal_tensor([1, d], 0.0, 1.0)?;
            let v = rng.normal_tensor([1, d], 0.0, 1.0)?;
            let mut g = Graph::new();
            let wn = g.param(w.clone());
            let kn = g.constant(k.clone());
            let vn = g.constant(v.clone());
            let loss = inner_loss(&mut g, &InnerWeights::Linear { w: wn }, &kn, &vn)?;
            let auto = g.backward(loss)?.get(wn);
            for i in 0..d {
                let r = (0..d).map(|l| get(&w, i, l) * k.data()[l]).sum::<f64>() - v.data()[i];
                for j in 0..d {
                    worst = worst.max(relative_error(get(&auto, i, j), 2.0 * r * k.data()[j]));
                }
            }
            triples += 1;
        }
    }
    let (fast, time) = within(start, Duration::from_secs(1));
    Ok(verdict(
        worst < 1e-10 && triples == 100 && fast,
        format!("max rel err {worst:.2e} over {triples} triples, D in {{1,2,4,8}}; {time}"),
    ))
}

// 2

fn gradcheck_suite() -> Res<Verdict> {
    let start = Instant::now();
    let outcomes = run_suite(&[], None);
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    let worst = outcomes.iter().max_by(|a, b| (a.max_rel_error / a.tolerance).total_cmp(&(b.max_rel_error / b.tolerance)));
    let micro = outcomes.iter().find(|o| o.name == "micro_unet").map_or(f64::NAN, |o| o.max_rel_error);
    let (fast, time) = within(start, Duration::from_secs(120));
    let worst = worst.map_or(String::new(), |w| format!("closest to tolerance {} {:.2e}", w.name, w.max_rel_error));
    Ok(verdict(
        failed.is_empty() && fast,
        format!("{} checks, failed {failed:?}, micro_unet {micro:.2e}, {worst}; {time}", outcomes.len()),
    ))
}

// 3

fn inner_descent() -> Res<Verdict> {
    let start = Instant::now();
    let (mut checked, mut violations, mut stationary) = (0usize, 0usize, 0usize);
    for s in 0..100u64 {
        let mut rng = Rng::derive(3, s);
        let d = 1 + (s as usize % 8);
        let tokens = 12;
        let mut layer = TttLayerParams::init(d, InnerModelKind::Linear, TttSettings::default(), &mut rng)?;
        layer.weights.w0 = layer.weights.w0.map(|w| w.scale(20.0));
        let x = rng.normal_tensor([tokens, d], 0.0, 1.0)?;
        let keys = x.matmul(&layer.weights.theta_k.transpose()?)?;
        let max_sq = (0..tokens).map(|t| (0..d).map(|j| get(&keys, t, j).powi(2)).sum::<f64>()).fold(0.0, f64::max);
        layer.settings.eta = 0.5 / max_sq;

        let values = x.matmul(&layer.weights.theta_v.transpose()?)?;
        let mut state = layer.initial_state();
        for t in 0..tokens {
            let xt = x.narrow(0, t, 1)?.reshape([d])?;
            let InnerWeights::Linear { w } = &state.w else { unreachable!() };
            // A residual no larger than the rounding of W·k and v is a
            // numerically exact fit: its gradient is noise.
            let moving = (0..d).any(|i| {
                let wk = (0..d).map(|j| get(w, i, j) * get(&keys, t, j)).sum::<f64>();
                let v = get(&values, t, i);
                (wk - v).abs() > 4.0 * f64::EPSILON * (wk.abs() + v.abs())
            });
            let before = layer.loss(&state.w, &xt, t)?;
            let (_, next) = layer.step(&state, &xt)?;
            let after = layer.loss(&next.w, &xt, t)?;
            if moving {
                checked += 1;
                violations += (after >= before) as usize;
            } else {
                stationary += 1;
            }
            state = next;
        }
    }
    let (fast, time) = within(start, Duration::from_secs(10));
    Ok(verdict(
        violations == 0 && checked > 0 && fast,
        format!(
            "{checked} tokens with nonzero gradient over 100 scans, {violations} without descent, {stationary} fit to rounding; {time}"
        ),
    ))
}

// 4

fn theta_v_gradient(layer: &TttLayerParams, x: &Tensor, readout: &Tensor, mode: ScanMode) -> Res<Tensor> {
    let mut g = Graph::new();
    let w = &layer.weights;
    let ids = TttWeights::<NodeId> {
        theta_k: g.param(w.theta_k.clone()),
        theta_v: g.param(w.theta_v.clone()),
        theta_q: g.param(w.theta_q.clone()),
        w0: w.w0.map(|t| g.param(t.clone())),
    };
    let xn = g.constant(x.clone());
    let z = ttt_scan(&mut g, &xn, &ids, &layer.settings, mode)?;
    let r = g.constant(readout.clone());
    let weighted = g.mul(z, r)?;
    let root = g.sum(weighted);
    Ok(g.backward(root)?.get(ids.theta_v))
}

fn stop_gradient_ablation() -> Res<Verdict> {
    let start = Instant::now();
    let (mut stop_nonzero, mut live_zero) = (0usize, 0usize);
    let mut smallest_live: f64 = f64::INFINITY;
    for s in 0..20u64 {
        let mut rng = Rng::derive(4, s);
        let d = 2 + (s as usize % 4);
        let kind = if s % 2 == 0 { InnerModelKind::Linear } else { InnerModelKind::Mlp };
        let layer = TttLayerParams::init(d, kind, TttSettings { eta: 0.3, ..Default::default() }, &mut rng)?;
        let x = rng.normal_tensor([5, d], 0.0, 1.0)?;
        let readout = rng.normal_tensor([5, d], 0.0, 1.0)?;
        let stopped = theta_v_gradient(&layer, &x, &readout, ScanMode::StopGradient)?;
        let live = theta_v_gradient(&layer, &x, &readout, ScanMode::Differentiable)?;
        stop_nonzero += stopped.data().iter().filter(|&&v| v != 0.0).count();
        let peak = live.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        smallest_live = smallest_live.min(peak);
        live_zero += (peak == 0.0) as usize;
    }
    let (fast, time) = within(start, Duration::from_secs(5));
    Ok(verdict(
        stop_nonzero == 0 && live_zero == 0 && fast,
        format!(
            "20 scans: {stop_nonzero} nonzero entries with stop_gradient, smallest differentiable max |grad| {smallest_live:.2e}; {time}"
        ),
    ))
}

// 5

fn preset_forward(name: &str) -> Res<(Tensor, Vec<usize>)> {
    let net = preset(name)?.network;
    let model = build_model(&net, &mut Rng::derive(5, 0))?;
    let mut shape = vec![1, net.input_channels];
    shape.extend(&net.patch_size);
    let x = Rng::derive(5, 1).normal_tensor(shape, 0.0, 1.0)?;
    let mut expected = vec![1, net.num_classes];
    expected.extend(&net.patch_size);
    Ok((model.predict(&x)?, expected))
}

fn shape_contracts() -> Res<(Verdict, Vec<Tensor>)> {
    let start = Instant::now();
    let mut ok = true;
    let mut notes = Vec::new();
    let mut outputs = Vec::new();
    for name in ["synthetic64", "2d_abdomen_mr", "endoscopy"] {
        let (probs, expected) = preset_forward(name)?;
        let s = probs.shape().to_vec();
        let (c, hw) = (s[1], s[2] * s[3]);
        let mut dev: f64 = 0.0;
        for p in 0..hw {
            let total: f64 = (0..c).map(|k| probs.data()[k * hw + p]).sum();
            dev = dev.max((total - 1.0).abs());
        }
        ok &= s == expected && dev <= 1e-12;
        notes.push(format!("{name} {s:?} sum dev {dev:.1e}"));
        outputs.push(probs);
    }
    let (fast, time) = within(start, Duration::from_secs(60));
    Ok((verdict(ok && fast, format!("{}; {time}", notes.join(", "))), outputs))
}

// 6

fn random_mask(rng: &mut Rng, h: usize, w: usize, classes: usize) -> Vec<usize> {
    let mut m = vec![0; h * w];
    for _ in 0..rng.below(6) {
        let (i0, j0) = (rng.below(h), rng.below(w));
        let (i1, j1) = ((i0 + 1 + rng.below(h / 2 + 1)).min(h), (j0 + 1 + rng.below(w / 2 + 1)).min(w));
        let c = rng.below(classes);
        for i in i0..i1 {
            for j in j0..j1 {
                m[i * w + j] = c;
            }
        }
    }
    for _ in 0..rng.below(4) {
        m[rng.below(h * w)] = rng.below(classes);
    }
    m
}

fn pixels(m: &[usize], w: usize, c: usize) -> HashSet<(i64, i64)> {
    m.iter().enumerate().filter(|(_, &l)| l == c).map(|(p, _)| ((p / w) as i64, (p % w) as i64)).collect()
}

fn brute_dsc(p: &[usize], g: &[usize], w: usize, c: usize) -> f64 {
    let (a, b) = (pixels(p, w, c), pixels(g, w, c));
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * a.intersection(&b).count() as f64 / (a.len() + b.len()) as f64
}

fn brute_boundary(m: &[usize], h: usize, w: usize, c: usize) -> Vec<(i64, i64)> {
    let set = pixels(m, w, c);
    let inside = |i: i64, j: i64| i >= 0 && j >= 0 && i < h as i64 && j < w as i64;
    let mut out: Vec<_> = set
        .iter()
        .copied()
        .filter(|&(i, j)| {
            [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(di, dj)| {
                let (a, b) = (i + di, j + dj);
                !inside(a, b) || !set.contains(&(a, b))
            })
        })
        .collect();
    out.sort();
    out
}

fn brute_nsd(p: &[usize], g: &[usize], h: usize, w: usize, c: usize, tau: f64) -> f64 {
    let (bp, bg) = (brute_boundary(p, h, w, c), brute_boundary(g, h, w, c));
    if bp.is_empty() && bg.is_empty() {
        return 1.0;
    }
    if bp.is_empty() || bg.is_empty() {
        return 0.0;
    }
    let near = |a: &[(i64, i64)], b: &[(i64, i64)]| {
        a.iter()
            .filter(|&&(i, j)| b.iter().any(|&(k, l)| (((i - k).pow(2) + (j - l).pow(2)) as f64) <= tau * tau))
            .count()
    };
    (near(&bp, &bg) + near(&bg, &bp)) as f64 / (bp.len() + bg.len()) as f64
}

/// Components as pixel sets, ordered by their first pixel in raster order.
fn brute_components(m: &[usize], h: usize, w: usize) -> Vec<HashSet<usize>> {
    let mut label: Vec<Option<usize>> = m.iter().enumerate().map(|(p, &l)| (l != 0).then_some(p)).collect();
    loop {
        let mut changed = false;
        for p in 0..h * w {
            let Some(mut best) = label[p] else { continue };
            let (i, j) = (p / w, p % w);
            let mut nbrs = vec![];
            if i > 0 {
                nbrs.push(p - w);
            }
            if i + 1 < h {
                nbrs.push(p + w);
            }
            if j > 0 {
                nbrs.push(p - 1);
            }
            if j + 1 < w {
                nbrs.push(p + 1);
            }
            for q in nbrs {
                if let Some(l) = label[q] {
                    best = best.min(l);
                }
            }
            if Some(best) != label[p] {
                label[p] = Some(best);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut roots: Vec<usize> = label.iter().flatten().copied().collect::<HashSet<_>>().into_iter().collect();
    roots.sort();
    roots.iter().map(|&r| (0..h * w).filter(|&p| label[p] == Some(r)).collect()).collect()
}

fn brute_f1(p: &[usize], g: &[usize], h: usize, w: usize, threshold: f64) -> f64 {
    let (pc, gc) = (brute_components(p, h, w), brute_components(g, h, w));
    let iou = |a: &HashSet<usize>, b: &HashSet<usize>| {
        let i = a.intersection(b).count();
        i as f64 / (a.len() + b.len() - i) as f64
    };
    let (mut pm, mut gm) = (vec![false; pc.len()], vec![false; gc.len()]);
    let mut tp = 0;
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for (a, pa) in pc.iter().enumerate() {
            for (b, gb) in gc.iter().enumerate() {
                let v = iou(pa, gb);
                if pm[a] || gm[b] || v == 0.0 || v < threshold {
                    continue;
                }
                if best.is_none_or(|(bv, _, _)| v > bv) {
                    best = Some((v, a, b));
                }
            }
        }
        let Some((_, a, b)) = best else { break };
        pm[a] = true;
        gm[b] = true;
        tp += 1;
    }
    let (fp, fn_) = (pc.len() - tp, gc.len() - tp);
    if tp + fp + fn_ == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

fn metric_oracles() -> Res<Verdict> {
    let start = Instant::now();
    let taus = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0];
    let (mut mismatches, mut non_monotone, mut out_of_range, mut values) = (0usize, 0usize, 0usize, 0usize);
    let mut rng = Rng::new(6);
    for _ in 0..200 {
        let (h, w) = (1 + rng.below(32), 1 + rng.below(32));
        let classes = 2 + rng.below(3);
        let g = random_mask(&mut rng, h, w, classes);
        let p = if rng.bernoulli(0.5) {
            random_mask(&mut rng, h, w, classes)
        } else {
            let mut p = g.clone();
            for _ in 0..rng.below(h * w / 4 + 1) {
                p[rng.below(h * w)] = rng.below(classes);
            }
            p
        };
        let pm = LabelMask::from_indices(h, w, p.clone(), classes)?;
        let gm = LabelMask::from_indices(h, w, g.clone(), classes)?;
        let mut check = |got: f64, want: f64| {
            values += 1;
            mismatches += (got != want) as usize;
            out_of_range += !(0.0..=1.0).contains(&got) as usize;
        };
        for c in 0..classes {
            check(dsc(&pm, &gm, c)?, brute_dsc(&p, &g, w, c));
            let mut prev = f64::NEG_INFINITY;
            for &tau in &taus {
                let v = nsd(&pm, &gm, c, tau)?;
                check(v, brute_nsd(&p, &g, h, w, c, tau));
                non_monotone += (v < prev) as usize;
                prev = v;
            }
        }
        let bin = |m: &[usize]| m.iter().map(|&l| (l != 0) as usize).collect::<Vec<_>>();
        let (pb, gb) = (bin(&p), bin(&g));
        let (pbm, gbm) = (LabelMask::from_indices(h, w, pb.clone(), 2)?, LabelMask::from_indices(h, w, gb.clone(), 2)?);
        for threshold in [0.5, 0.3, 0.8] {
            check(instance_f1(&pbm, &gbm, threshold)?, brute_f1(&pb, &gb, h, w, threshold));
        }
    }
    let (fast, time) = within(start, Duration::from_secs(30));
    Ok(verdict(
        mismatches == 0 && non_monotone == 0 && out_of_range == 0 && fast,
        format!(
            "200 mask pairs, {values} values: {mismatches} differ from brute force, {non_monotone} nsd decreases in tau, {out_of_range} outside [0,1]; {time}"
        ),
    ))
}

// 7

fn overfit_config(variant: Variant) -> (SyntheticSpec, TrainRunConfig) {
    let spec = SyntheticSpec { samples: 8, seed: 0, ..SyntheticSpec::default() };
    let mut run = TrainRunConfig {
        variant,
        epochs: 200,
        batch_size: 2,
        lr: 1e-2,
        validation: false,
        ..TrainRunConfig::default()
    };
    run.network.base_channels = Some(8);
    run.network.channel_cap = Some(64);
    (spec, run)
}

fn overfit_run(variant: Variant) -> Res<(f64, Duration, ModelParams, Vec<EpochRecord>)> {
    let start = Instant::now();
    let (spec, run) = overfit_config(variant);
    let data = generate(&spec)?;
    let out = train(&run, &data, None)?;
    let preds = predict_masks(&out.model, &data, &out.train_indices, 2)?;
    let score = mean_foreground_dsc(&preds, &data, &out.train_indices)?;
    Ok((score, start.elapsed(), out.model, out.log))
}

type OverfitRuns = Vec<(Variant, ModelParams, Vec<EpochRecord>)>;

fn overfit() -> Res<(Verdict, OverfitRuns)> {
    let mut ok = true;
    let mut notes = Vec::new();
    let mut runs = Vec::new();
    for variant in [Variant::Bot, Variant::None] {
        let (score, took, model, log) = overfit_run(variant)?;
        ok &= score >= 0.95 && took < Duration::from_secs(20 * 60);
        notes.push(format!("{variant} DSC {score:.4} in {:.0} s", took.as_secs_f64()));
        runs.push((variant, model, log));
    }
    Ok((verdict(ok, format!("8 samples, 200 epochs, lr 1e-2: {}", notes.join(", "))), runs))
}

// 8

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn determinism(forwards: &[Tensor], runs: &OverfitRuns) -> Res<Verdict> {
    let mut same_forward = 0;
    for (name, first) in ["synthetic64", "2d_abdomen_mr", "endoscopy"].iter().zip(forwards) {
        let (again, _) = preset_forward(name)?;
        same_forward += (bits(&again) == bits(first)) as usize;
    }
    let mut same_runs = 0;
    for (variant, model, log) in runs {
        let (_, _, again, again_log) = overfit_run(*variant)?;
        let params = again.params.tensors().iter().zip(model.params.tensors()).all(|(a, b)| bits(a) == bits(b));
        let logs = again_log.iter().map(EpochRecord::deterministic_part).eq(log.iter().map(EpochRecord::deterministic_part));
        same_runs += (params && logs) as usize;
    }
    Ok(verdict(
        same_forward == forwards.len() && same_runs == runs.len(),
        format!(
            "{same_forward}/{} preset forwards and {same_runs}/{} training runs (weights and loss logs) bit-identical",
            forwards.len(),
            runs.len()
        ),
    ))
}

// 9

fn tree_bytes(root: &Path) -> Res<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root)?.to_string_lossy().into_owned();
                out.push((rel, fs::read(&p)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn round_trips() -> Res<Verdict> {
    let tmp = TempDir::new()?;
    let t = tmp.path();
    let spec = SyntheticSpec { samples: 12, seed: 9, input_channels: 3, num_classes: 4, ..SyntheticSpec::default() };
    save_dataset(&generate(&spec)?, &t.join("d1"))?;
    save_dataset(&load_dataset(&t.join("d1"))?, &t.join("d2"))?;
    let (d1, d2) = (tree_bytes(&t.join("d1"))?, tree_bytes(&t.join("d2"))?);

    let mut net = preset("synthetic64")?.network;
    net.variant = Variant::Enc;
    net.base_channels = 4;
    net.channel_cap = 32;
    let model = build_model(&net, &mut Rng::new(9))?;
    save_checkpoint(&model, &t.join("c1"), Some(7))?;
    let (loaded, manifest) = load_checkpoint(&t.join("c1"))?;
    save_checkpoint(&loaded, &t.join("c2"), manifest.epoch)?;
    let (c1, c2) = (tree_bytes(&t.join("c1"))?, tree_bytes(&t.join("c2"))?);

    Ok(verdict(
        d1 == d2 && c1 == c2 && !d1.is_empty() && !c1.is_empty(),
        format!(
            "dataset {} files identical: {}, checkpoint {} files identical: {}",
            d1.len(),
            d1 == d2,
            c1.len(),
            c1 == c2
        ),
    ))
}

fn report(n: usize, title: &str, r: Res<Verdict>) -> bool {
    let (passed, detail) = match r {
        Ok(v) => (v.passed, v.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!("criterion {n} {} {title}: {detail}", if passed { "PASS" } else { "FAIL" });
    passed
}

fn main() -> ExitCode {
    std::env::set_var("TTT_SEG_THREADS", "1");
    let mut all = true;
    all &= report(1, "closed-form inner gradient", closed_form_gradient());
    all &= report(2, "gradcheck suite", gradcheck_suite());
    all &= report(3, "inner-loop descent", inner_descent());
    all &= report(4, "stop-gradient ablation", stop_gradient_ablation());
    let (v5, forwards) = match shape_contracts() {
        Ok((v, f)) => (Ok(v), f),
        Err(e) => (Err(e), vec![]),
    };
    all &= report(5, "shape and normalization contracts", v5);
    all &= report(6, "metric oracles", metric_oracles());
    let (v7, runs) = match overfit() {
        Ok((v, r)) => (Ok(v), r),
        Err(e) => (Err(e), vec![]),
    };
    all &= report(7, "desk-scale overfit", v7);
    let v8 = if forwards.len() == 3 && runs.len() == 2 {
        determinism(&forwards, &runs)
    } else {
        Err("criteria 5 and 7 did not produce outputs to repeat".into())
    };
    all &= report(8, "determinism", v8);
    all &= report(9, "serialization round-trips", round_trips());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

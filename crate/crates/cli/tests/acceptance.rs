//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criterion 8 (end-to-end trend) runs a smoke budget by default. Set
//! `VMAE_ACCEPT_FULL=1` for the full protocol (200 cases of 96^3, 20 + 20
//! epochs, three seeds; several hours on one CPU core). Set
//! `VMAE_ACCEPT_STRICT=1` to exit non-zero on any failure.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::RngExt;
use vesselmae::evaluation::{
    froc, match_detections, permutation_test, se_at_fpr, CaseMatch, CasePredictions, FrocCurve, WorldDetection,
};
use vesselmae::geometry::signed_distance_map;
use vesselmae::grid::Grid3;
use vesselmae::model::tokens::patchify;
use vesselmae::model::{AttnStats, Detector, MaeModel, ModelConfig, Params, TokenInput};
use vesselmae::rng::{stream, Stream};
use vesselmae::sampling::{plan_mask, CropPolicy, CropSample, CropSampler, MaskingParams, N_PATCHES};
use vesselmae::synthvasc::{generate_case, LesionGT, PhantomParams};
use vesselmae::training::finetune::lesion_centered_crop;
use vesselmae::training::{detection_loss, hungarian, mae_loss, DetectionTargets};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(t: Instant, limit: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e < limit, format!("{:.1}s/{}s", e.as_secs_f64(), limit.as_secs()))
}

// ---------------------------------------------------------------- 1

fn brute_sdt(mask: &Grid3<bool>, s: [f64; 3]) -> Vec<f64> {
    let [nz, ny, nx] = mask.dims();
    let fg = |z: isize, y: isize, x: isize| {
        z >= 0 && y >= 0 && x >= 0 && (z as usize) < nz && (y as usize) < ny && (x as usize) < nx
            && *mask.get(z as usize, y as usize, x as usize)
    };
    let mut inside = Vec::new();
    let mut edge = Vec::new();
    for i in 0..mask.len() {
        let [z, y, x] = mask.coord(i);
        if !mask.as_slice()[i] {
            continue;
        }
        inside.push([z, y, x]);
        let (z, y, x) = (z as isize, y as isize, x as isize);
        let n6 = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
        if n6.iter().any(|&(a, b, c)| !fg(z + a, y + b, x + c)) {
            edge.push([z as usize, y as usize, x as usize]);
        }
    }
    let d = |a: [usize; 3], b: [usize; 3]| {
        (0..3)
            .map(|k| ((a[k] as f64 - b[k] as f64) * s[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    (0..mask.len())
        .map(|i| {
            let c = mask.coord(i);
            if mask.as_slice()[i] {
                -edge.iter().map(|&e| d(c, e)).fold(f64::INFINITY, f64::min)
            } else {
                inside.iter().map(|&e| d(c, e)).fold(f64::INFINITY, f64::min)
            }
        })
        .collect()
}

fn c1_sdt() -> Outcome {
    let t = Instant::now();
    let mut r = stream(101, &[]);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let dims = if k < 5 { [16; 3] } else { [0; 3].map(|_| r.random_range(1..=16usize)) };
        let spacing = [0; 3].map(|_| r.random_range(0.3..1.5));
        let p: f64 = r.random_range(0.02..0.6);
        let n = dims[0] * dims[1] * dims[2];
        let mut bits: Vec<bool> = (0..n).map(|_| r.random::<f64>() < p).collect();
        bits[r.random_range(0..n)] = true;
        let mask = Grid3::from_vec(dims, bits).unwrap();
        let fast = signed_distance_map(&mask, spacing);
        for (a, b) in fast.values.as_slice().iter().zip(brute_sdt(&mask, spacing)) {
            worst = worst.max((a - b).abs());
        }
    }
    let (fast_enough, time) = within(t, Duration::from_secs(30));
    outcome(worst <= 1e-6 && fast_enough, format!("max |err| {worst:.2e} mm, {time}"))
}

// ---------------------------------------------------------------- 2

fn c2_hungarian() -> Outcome {
    let t = Instant::now();
    let mut r = stream(102, &[]);
    let mut mismatches = 0;
    for _ in 0..200 {
        let (rows, cols) = (r.random_range(1..=6usize), r.random_range(1..=6usize));
        // integer-valued costs keep every sum exact
        let cost: Vec<f64> = (0..rows * cols).map(|_| r.random_range(0..100) as f64).collect();
        let got: f64 = hungarian(&cost, rows, cols)
            .unwrap()
            .iter()
            .map(|&(i, j)| cost[i * cols + j])
            .sum();
        if got != exhaustive_min(&cost, rows, cols) {
            mismatches += 1;
        }
    }
    let (fast_enough, time) = within(t, Duration::from_secs(10));
    outcome(mismatches == 0 && fast_enough, format!("{mismatches} mismatches of 200, {time}"))
}

fn exhaustive_min(cost: &[f64], rows: usize, cols: usize) -> f64 {
    fn go(i: usize, rows: usize, cols: usize, used: &mut Vec<bool>, cost: &[f64], acc: f64, best: &mut f64) {
        if i == rows {
            *best = best.min(acc);
            return;
        }
        for j in 0..cols {
            if !used[j] {
                used[j] = true;
                go(i + 1, rows, cols, used, cost, acc + cost[i * cols + j], best);
                used[j] = false;
            }
        }
    }
    // assign the smaller side into the larger
    let (t, r, c): (Vec<f64>, usize, usize) = if rows <= cols {
        (cost.to_vec(), rows, cols)
    } else {
        let mut tr = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                tr[j * rows + i] = cost[i * cols + j];
            }
        }
        (tr, cols, rows)
    };
    let mut best = f64::INFINITY;
    go(0, r, c, &mut vec![false; c], &t, 0.0, &mut best);
    best
}

// ---------------------------------------------------------------- 3

fn c3_reachability() -> Outcome {
    let t = Instant::now();
    let cfg = ModelConfig {
        depth: 1,
        dim: 16,
        ..ModelConfig::default()
    };
    let model = MaeModel::<f64>::new(&cfg, 3).unwrap();
    let mut coords = Vec::new();
    for z in 0..4 {
        for y in 0..4 {
            for x in 0..4 {
                coords.push([z, y, x]);
            }
        }
    }
    let n = coords.len();
    let input = TokenInput {
        coords: coords.clone(),
        raw: vec![0.1; n * vesselmae::model::TOKEN_LEN],
    };
    let mut stats = AttnStats::tracing();
    model.encoder.forward(&input, &mut stats);
    let mut adj = BTreeSet::new();
    for g in stats.trace.as_ref().unwrap() {
        for (qi, &q) in g.queries.iter().enumerate() {
            for (ki, &k) in g.keys.iter().enumerate() {
                if g.allowed.as_ref().is_none_or(|a| a[qi * g.keys.len() + ki]) {
                    adj.insert((q, k));
                }
            }
        }
    }
    let mut expected = BTreeSet::new();
    for q in 0..=n {
        for k in 0..=n {
            let cls = q == n || k == n;
            let pred = cls || {
                let (a, b) = (coords[q], coords[k]);
                a[0] == b[0] || (a[1] == b[1] && a[2] == b[2])
            };
            if pred {
                expected.insert((q, k));
            }
        }
    }
    let small_peak = stats.peak_score_elems;
    let small_bound = (4 * 4 + 1) * (4 * 4 + 1);

    let full = TokenInput::<f64>::from_patches(&vec![0.1; N_PATCHES * vesselmae::model::TOKEN_LEN], |_| true);
    let mut full_stats = AttnStats::default();
    model.encoder.forward(&full, &mut full_stats);
    let full_bound = 257 * 257;
    let (fast_enough, time) = within(t, Duration::from_secs(10));
    outcome(
        adj == expected && small_peak <= small_bound && full_stats.peak_score_elems <= full_bound && fast_enough,
        format!(
            "adjacency {} ({} edges), peak {small_peak}<={small_bound} on 4^3, {}<={full_bound} on 16^3, {time}",
            if adj == expected { "exact" } else { "differs" },
            adj.len(),
            full_stats.peak_score_elems
        ),
    )
}

// ---------------------------------------------------------------- 4

fn phantom_crop(seed: u64) -> CropSample {
    let p = PhantomParams {
        volume_dims: [64, 64, 64],
        n_lesions: [1, 1],
        seed,
        ..PhantomParams::default()
    };
    let case = generate_case(&p, 0).unwrap();
    let dmap = signed_distance_map(&case.artery_mask, case.spacing_mm);
    let sampler = CropSampler::new(&case, &dmap).unwrap();
    lesion_centered_crop(&sampler, &case, 8, &mut stream(seed, &[2])).unwrap()
}

/// Parameter tensors as `(name, len)`, in visiting order.
fn tensors<M: Params<f64>>(m: &M) -> Vec<(String, usize)> {
    let mut v = Vec::new();
    m.visit("", &mut |n, p| v.push((n.to_string(), p.len())));
    v
}

fn grads<M: Params<f64>>(m: &M) -> Vec<Vec<f64>> {
    let mut v = Vec::new();
    m.visit("", &mut |_, p| v.push(p.grad.clone()));
    v
}

fn shift<M: Params<f64>>(m: &mut M, tensor: usize, dir: &[f64], h: f64) {
    let mut k = 0;
    m.visit_mut("", &mut |_, p| {
        if k == tensor {
            for (w, d) in p.value.iter_mut().zip(dir) {
                *w += h * d;
            }
        }
        k += 1;
    });
}

struct GradCheck {
    worst: f64,
    worst_at: String,
    checks: usize,
}

/// Compares analytic gradients with central differences: for every
/// parameter tensor, two random directions over the whole tensor and up to
/// three single entries (the largest-gradient entry and two random ones).
fn grad_check<M: Params<f64> + Clone>(model: &M, loss: impl Fn(&M) -> f64, analytic: &[Vec<f64>], seed: u64) -> GradCheck {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-7;
    let mut r = stream(seed, &[]);
    let mut res = GradCheck {
        worst: 0.0,
        worst_at: String::new(),
        checks: 0,
    };
    for (ti, (name, len)) in tensors(model).iter().enumerate() {
        let g = &analytic[ti];
        let mut dirs: Vec<(String, Vec<f64>)> = Vec::new();
        for k in 0..2 {
            let d: Vec<f64> = (0..*len).map(|_| r.random_range(-1.0..1.0)).collect();
            dirs.push((format!("{name} dir{k}"), d));
        }
        let top = (0..*len).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
        let mut entries = vec![top];
        for _ in 0..2.min(*len - 1) {
            entries.push(r.random_range(0..*len));
        }
        for e in entries {
            let mut d = vec![0.0; *len];
            d[e] = 1.0;
            dirs.push((format!("{name}[{e}]"), d));
        }
        for (label, d) in dirs {
            let mut plus = model.clone();
            shift(&mut plus, ti, &d, H);
            let mut minus = model.clone();
            shift(&mut minus, ti, &d, -H);
            let num = (loss(&plus) - loss(&minus)) / (2.0 * H);
            let an: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
            let rel = (num - an).abs() / num.abs().max(an.abs()).max(FLOOR);
            res.checks += 1;
            if rel > res.worst {
                res.worst = rel;
                res.worst_at = label;
            }
        }
    }
    res
}

fn c4_gradients() -> Outcome {
    let t = Instant::now();
    let cfg = ModelConfig {
        depth: 1,
        dim: 16,
        decoder_depth: 1,
        decoder_dim: 16,
        ..ModelConfig::default()
    };
    let crop = phantom_crop(104);
    let target = patchify(&crop.channels);
    let masking = MaskingParams::default();
    let plan = plan_mask(&crop.patch_artery_frac, &masking, &mut stream(104, &[1])).unwrap();
    let visible = TokenInput::<f64>::from_patches(&target, |i| !plan.masked[i]);

    let mae_value = |m: &MaeModel<f64>| {
        let (recon, _) = m.forward(&visible, &mut AttnStats::default());
        mae_loss(&recon, &target, &plan, &masking, true).unwrap().0.loss
    };
    let mut mae = MaeModel::<f64>::new(&cfg, 4).unwrap();
    let (recon, cache) = mae.forward(&visible, &mut AttnStats::default());
    let (_, g) = mae_loss(&recon, &target, &plan, &masking, true).unwrap();
    mae.backward(&cache, &g);
    let mae_grads = grads(&mae);
    let a = grad_check(&mae, mae_value, &mae_grads, 41);

    let gts = crop.lesions_centered_inside();
    let full = TokenInput::<f64>::from_crop(&crop, |_| true);
    let targets = DetectionTargets {
        lesions: &gts,
        spacing_mm: crop.spacing_mm,
        side_prior_mm: cfg.side_prior_mm,
        radius_mm: 1.0,
    };
    let det_value = |m: &Detector<f64>| {
        let (out, _) = m.forward(&full, &mut AttnStats::default());
        detection_loss(&out, &targets).unwrap().0.loss
    };
    let mut det = Detector::<f64>::new(&cfg, 4).unwrap();
    let (out, cache) = det.forward(&full, &mut AttnStats::default());
    let (_, _, g) = detection_loss(&out, &targets).unwrap();
    det.backward(&cache, &g);
    let det_grads = grads(&det);
    let b = grad_check(&det, det_value, &det_grads, 42);

    let (fast_enough, time) = within(t, Duration::from_secs(300));
    outcome(
        a.worst <= 1e-4 && b.worst <= 1e-4 && fast_enough,
        format!(
            "mae max rel {:.1e} ({}, {} checks), detection max rel {:.1e} ({}, {} checks), {} gts, {time}",
            a.worst,
            a.worst_at,
            a.checks,
            b.worst,
            b.worst_at,
            b.checks,
            gts.len()
        ),
    )
}

// ---------------------------------------------------------------- 5

fn c5_masking() -> Outcome {
    let t = Instant::now();
    let crop = phantom_crop(105);
    let fracs = crop.patch_artery_frac.clone();
    let mut r = stream(105, &[]);

    let uniform = MaskingParams::uniform();
    let draws = 20_000;
    let mut counts = vec![0u32; N_PATCHES];
    let mut exact = true;
    for _ in 0..draws {
        let plan = plan_mask(&fracs, &uniform, &mut r).unwrap();
        exact &= plan.n_masked == 3072 && plan.masked.iter().filter(|&&m| m).count() == 3072;
        for (c, &m) in counts.iter_mut().zip(&plan.masked) {
            *c += m as u32;
        }
    }
    // each count ~ Binomial(draws, 0.75); chi-square over patches has
    // mean n and variance ~2n
    let p = 0.75;
    let var = draws as f64 * p * (1.0 - p);
    let mean = draws as f64 * p;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - mean).powi(2) / var).sum();
    let n = N_PATCHES as f64;
    let chi_z = (chi2 - n) / (2.0 * n).sqrt();
    let worst_z = counts.iter().map(|&c| (c as f64 - mean).abs() / var.sqrt()).fold(0.0, f64::max);

    let biased = MaskingParams::default();
    let mut wins = 0;
    for _ in 0..1000 {
        let plan = plan_mask(&fracs, &biased, &mut r).unwrap();
        exact &= plan.n_masked == 3072;
        let (mut sm, mut nm, mut su, mut nu) = (0.0, 0, 0.0, 0);
        for (&f, &m) in fracs.iter().zip(&plan.masked) {
            if m {
                sm += f as f64;
                nm += 1;
            } else {
                su += f as f64;
                nu += 1;
            }
        }
        wins += (sm / nm as f64 > su / nu as f64) as usize;
    }
    let nonuniform = fracs.iter().any(|&f| f != fracs[0]);
    let (fast_enough, time) = within(t, Duration::from_secs(120));
    outcome(
        exact && chi_z.abs() <= 3.0 && worst_z <= 5.0 && nonuniform && wins >= 950 && fast_enough,
        format!(
            "count exact {exact}, beta=0 chi-square z {chi_z:.2} (max patch z {worst_z:.2}), beta=1 masked>unmasked {wins}/1000, {time}"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn c6_crops() -> Outcome {
    let t = Instant::now();
    let policy = CropPolicy::default();
    let mut min_seen = f64::INFINITY;
    let mut n = 0;
    let mut case_index = 0;
    let params = PhantomParams {
        seed: 106,
        ..PhantomParams::default()
    };
    while n < 10_000 {
        let case = generate_case(&params, case_index).unwrap();
        case_index += 1;
        let dmap = signed_distance_map(&case.artery_mask, case.spacing_mm);
        let sampler = CropSampler::new(&case, &dmap).unwrap();
        let mut r = stream(106, &[case_index]);
        for _ in 0..500 {
            let crop = sampler.sample(&policy, &mut r).unwrap();
            let o = crop.origin_voxel.map(|v| v as usize);
            // recount the crop's artery voxels straight from the mask
            let mut count = 0usize;
            for z in o[0]..o[0] + 64 {
                for y in o[1]..o[1] + 64 {
                    for x in o[2]..o[2] + 64 {
                        count += *case.artery_mask.get(z, y, x) as usize;
                    }
                }
            }
            min_seen = min_seen.min(count as f64 / (64.0 * 64.0 * 64.0));
            n += 1;
        }
    }
    let (fast_enough, time) = within(t, Duration::from_secs(300));
    outcome(
        min_seen >= 0.10 && fast_enough,
        format!("{n} crops over {case_index} phantoms, min overlap {min_seen:.4}, {time}"),
    )
}

// ---------------------------------------------------------------- 7

fn det(score: f64, c: [f64; 3], side: f64) -> WorldDetection {
    WorldDetection {
        score,
        center_mm: c,
        side_mm: side,
    }
}

fn gt(c: [f64; 3], side: f64) -> LesionGT {
    LesionGT {
        center_mm: c,
        side_mm: side,
        diameter_mm: side,
    }
}

fn c7_froc() -> Outcome {
    let t = Instant::now();
    let case1 = match_detections(
        &CasePredictions::new(
            "1",
            vec![det(0.9, [5.0; 3], 2.0), det(0.7, [40.0; 3], 2.0), det(0.4, [15.0; 3], 2.0)],
        ),
        &[gt([5.0; 3], 2.0), gt([15.0; 3], 2.0)],
        0.3,
    );
    let case2 = match_detections(
        &CasePredictions::new("2", vec![det(0.8, [30.0; 3], 3.0), det(0.6, [5.0, 5.0, 5.5], 4.0)]),
        &[gt([5.0; 3], 4.0)],
        0.3,
    );
    let curve = froc(&[case1, case2]).unwrap();
    let got: Vec<(f64, f64, f64)> = curve.points.iter().map(|p| (p.threshold, p.fpr, p.se)).collect();
    let third = 1.0 / 3.0;
    let expected = vec![
        (0.9, 0.0, third),
        (0.8, 0.5, third),
        (0.7, 1.0, third),
        (0.6, 1.0, 2.0 * third),
        (0.4, 1.0, 1.0),
    ];
    let hand = got == expected;

    let mut r = stream(107, &[]);
    let mut monotone = true;
    for _ in 0..100 {
        let cases: Vec<CaseMatch> = (0..r.random_range(1..6))
            .map(|i| {
                let gts: Vec<LesionGT> = (0..r.random_range(0..4))
                    .map(|_| gt([0; 3].map(|_| r.random_range(0.0..30.0)), r.random_range(1.0..8.0)))
                    .collect();
                let mut dets: Vec<WorldDetection> = (0..r.random_range(0..10))
                    .map(|_| det(r.random(), [0; 3].map(|_| r.random_range(0.0..30.0)), r.random_range(1.0..8.0)))
                    .collect();
                // some detections near the truth so the curve moves
                for g in &gts {
                    if r.random::<f64>() < 0.6 {
                        dets.push(det(r.random(), g.center_mm.map(|c| c + r.random_range(-0.5..0.5)), g.side_mm));
                    }
                }
                dets.shuffle(&mut r);
                match_detections(&CasePredictions::new(i.to_string(), dets), &gts, 0.3)
            })
            .collect();
        let mut cases = cases;
        if cases.iter().all(|c| c.gt_diameter_mm.is_empty()) {
            cases.push(match_detections(&CasePredictions::new("x", vec![]), &[gt([1.0; 3], 2.0)], 0.3));
        }
        let c: FrocCurve = froc(&cases).unwrap();
        monotone &= c.points.windows(2).all(|w| w[0].fpr <= w[1].fpr && w[0].se <= w[1].se);
        let budgets = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];
        let se: Vec<f64> = budgets.iter().map(|&b| se_at_fpr(&c, b).unwrap()).collect();
        monotone &= se.windows(2).all(|w| w[0] <= w[1]);
    }
    let (fast_enough, time) = within(t, Duration::from_secs(60));
    outcome(
        hand && monotone && fast_enough,
        format!("hand curve {}, 100 random sets monotone {monotone}, {time}", if hand { "exact" } else { "differs" }),
    )
}

// ---------------------------------------------------------------- 8

fn vesselmae(dir: &Path, envs: &[(&str, String)], args: &[&str]) -> Result<String, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vesselmae"));
    cmd.current_dir(dir).env("VMAE_LOG", "warn").env_remove("VMAE_CONFIG");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

struct TrendBudget {
    label: &'static str,
    seeds: Vec<u64>,
    n_cases: usize,
    n_test: usize,
    dims: usize,
    epochs: usize,
}

fn c8_trend(workers: usize) -> Outcome {
    let t = Instant::now();
    let full = std::env::var("VMAE_ACCEPT_FULL").is_ok_and(|v| v == "1");
    let b = if full {
        TrendBudget {
            label: "full",
            seeds: vec![1, 2, 3],
            n_cases: 200,
            n_test: 20,
            dims: 96,
            epochs: 20,
        }
    } else {
        TrendBudget {
            label: "smoke",
            seeds: vec![1],
            n_cases: 30,
            n_test: 10,
            dims: 64,
            epochs: 2,
        }
    };
    let dir = tempfile::tempdir().unwrap();
    let mut pre = Vec::new();
    let mut scratch = Vec::new();
    for &seed in &b.seeds {
        let envs = [
            ("VMAE_SEED", seed.to_string()),
            ("VMAE_N_TEST", b.n_test.to_string()),
            ("VMAE_PHANTOM_VOLUME_DIMS", format!("[{0}, {0}, {0}]", b.dims)),
            ("VMAE_PRETRAIN_EPOCHS", b.epochs.to_string()),
            ("VMAE_FINETUNE_EPOCHS", b.epochs.to_string()),
            // the head only starts to localise after several hundred steps
            ("VMAE_FINETUNE_LR", "1e-3".to_string()),
            ("VMAE_FINETUNE_BATCH_SIZE", "2".to_string()),
            ("VMAE_EVAL_FPR_BUDGET", "1.0".to_string()),
            ("VMAE_WORKERS", workers.to_string()),
            ("VMAE_PATHS_DATA_DIR", format!("data{seed}")),
        ];
        let run = || -> Result<(f64, f64), String> {
            vesselmae(dir.path(), &envs, &["synth", "--n-cases", &b.n_cases.to_string()])?;
            vesselmae(dir.path(), &envs, &["ablate", "--reduced", "--out", &format!("ablate{seed}")])?;
            let doc: serde_json::Value =
                serde_json::from_slice(&fs::read(dir.path().join(format!("ablate{seed}/ablation.json"))).unwrap())
                    .map_err(|e| e.to_string())?;
            let se = |name: &str| {
                doc["variants"]
                    .as_array()
                    .and_then(|v| v.iter().find(|r| r["name"] == name))
                    .and_then(|r| r["se_at_budget"].as_f64())
                    .ok_or_else(|| format!("variant {name} missing from ablation.json"))
            };
            Ok((se("A")?, se("G")?))
        };
        match run() {
            Ok((a, g)) => {
                pre.push(a);
                scratch.push(g);
            }
            Err(e) => return outcome(false, format!("[{} budget] {e}", b.label)),
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, g) = (mean(&pre), mean(&scratch));
    let limit = Duration::from_secs(12 * 3600);
    let (fast_enough, time) = within(t, limit);
    outcome(
        a >= 0.80 && a - g >= 0.05 && fast_enough,
        format!(
            "[{} budget: {} cases of {}^3, {} held out, {}+{} epochs, seeds {:?}] Se@FPr=1 pretrained {a:.3} {pre:?}, scratch {g:.3} {scratch:?}, gap {:.3}, {time}",
            b.label,
            b.n_cases,
            b.dims,
            b.n_test,
            b.epochs,
            b.epochs,
            b.seeds,
            a - g
        ),
    )
}

// ---------------------------------------------------------------- 9

fn c9_determinism() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let envs = [
        ("VMAE_SEED", "9".to_string()),
        ("VMAE_N_TEST", "2".to_string()),
        ("VMAE_PHANTOM_VOLUME_DIMS", "[64, 64, 64]".to_string()),
        ("VMAE_PHANTOM_N_LESIONS", "[1, 2]".to_string()),
        ("VMAE_PRETRAIN_EPOCHS", "2".to_string()),
        ("VMAE_FINETUNE_EPOCHS", "1".to_string()),
    ];
    let steps: Vec<Vec<String>> = vec![
        vec!["synth", "--n-cases", "6"],
        vec!["pretrain", "--out", "p1"],
        vec!["pretrain", "--out", "p2"],
        vec!["finetune", "--pretrained", "p1/pretrain.ckpt", "--out", "ft"],
        vec!["infer", "--checkpoint", "ft/detector.ckpt", "--out", "inf"],
        vec!["eval", "--predictions", "inf/predictions.json", "--out", "e1"],
        vec!["eval", "--predictions", "inf/predictions.json", "--out", "e2"],
    ]
    .into_iter()
    .map(|s| s.into_iter().map(String::from).collect())
    .collect();
    for s in &steps {
        let args: Vec<&str> = s.iter().map(String::as_str).collect();
        if let Err(e) = vesselmae(dir.path(), &envs, &args) {
            return outcome(false, e);
        }
    }
    let same = |a: &str, b: &str, f: &str| fs::read(dir.path().join(a).join(f)).ok() == fs::read(dir.path().join(b).join(f)).ok()
        && dir.path().join(a).join(f).exists();
    let mut differing = Vec::new();
    for f in ["pretrain_log.csv", "pretrain.ckpt", "pretrain_report.json", "config.toml"] {
        if !same("p1", "p2", f) {
            differing.push(format!("pretrain/{f}"));
        }
    }
    for f in ["metrics.json", "metrics.csv", "froc_inf.csv", "froc.svg"] {
        if !same("e1", "e2", f) {
            differing.push(format!("eval/{f}"));
        }
    }
    let (_, time) = within(t, Duration::from_secs(3600));
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("8 artefacts checksum-identical across repeated pretrain and eval, {time}")
        } else {
            format!("differing: {differing:?}")
        },
    )
}

// ---------------------------------------------------------------- 10

fn c10_permutation() -> Outcome {
    let mut r: Stream = stream(110, &[]);
    let hits: Vec<bool> = (0..20).map(|_| r.random()).collect();
    let same = permutation_test(&hits, &hits, 10_000, 10).unwrap();
    let extreme = permutation_test(&[true; 20], &[false; 20], 10_000, 10).unwrap();
    outcome(
        same == 1.0 && extreme < 0.01,
        format!("identical p = {same}, all-hit vs all-miss p = {extreme:.2e}"),
    )
}

fn main() {
    // plain `cargo test` passes harness flags such as `--quiet`; a filter
    // argument that is not ours skips the run
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filter.is_empty() && !filter.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let workers = std::env::var("VMAE_WORKERS").ok().and_then(|v| v.parse().ok()).unwrap_or(1);
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("signed distance oracle", Box::new(c1_sdt)),
        ("hungarian exactness", Box::new(c2_hungarian)),
        ("factorized reachability", Box::new(c3_reachability)),
        ("gradient check", Box::new(c4_gradients)),
        ("masking contract", Box::new(c5_masking)),
        ("crop contract", Box::new(c6_crops)),
        ("froc correctness", Box::new(c7_froc)),
        ("end-to-end trend", Box::new(move || c8_trend(workers))),
        ("determinism", Box::new(c9_determinism)),
        ("permutation calibration", Box::new(c10_permutation)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failed += !o.pass as usize;
        println!("{} {:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("{}/{} criteria pass", criteria.len() - failed, criteria.len());
    let strict = std::env::var("VMAE_ACCEPT_STRICT").is_ok_and(|v| v == "1");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}

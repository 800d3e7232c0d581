//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when an enforced criterion fails.
//!
//! Run with `cargo test --test acceptance`.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use harmoniad::evalio::{pr_auc, roc_auc, write_container, Container, Level, Metrics, ScoredSet};
use harmoniad::fsam::{amplitude_modulation, bias_matrix, f2s_attention, grid_positions, AmplitudeMap};
use harmoniad::gscm::{dynamic_affinity, GscmParams};
use harmoniad::numerics::{fft2, ifft2_real, ComplexTensor, Tensor};
use harmoniad::pipeline::ModelParams;
use harmoniad::softgate::{cutoff_expectation, split, GateMode, GateParams, SoftGateConfig};
use harmoniad::training::{
    build_datasets, evaluate_model, finite_diff, grad, loss_value, train, EncodedSample, Objective, TrainConfig,
};
use harmoniad_cli::commands::{cmd_infer, cmd_train, CHECKPOINT_FILE, HISTORY_FILE};
use harmoniad_cli::config::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria that are reported but not enforced.
const REPORT_ONLY: &[&str] = &["ablation trends"];

/// Pixel and image AUROC floors after training, ceiling at initialization.
const SMOKE_TRAINED_PIXEL: f64 = 0.85;
const SMOKE_TRAINED_IMAGE: f64 = 0.90;
const SMOKE_INIT_CEILING: f64 = 0.65;

/// Ties within this margin count as "greater or equal".
const ABLATION_TIE: f64 = 0.005;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-1.0..1.0)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| randn(rng))
}

fn fft_correctness() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let (mut round, mut parseval) = (0.0f64, 0.0f64);
    for shape in [[1, 8, 8], [16, 32, 32]] {
        for _ in 0..100 {
            let x = random_tensor(&mut rng, &shape);
            let z = fft2(&x).unwrap();
            let back = ifft2_real(&z).unwrap();
            round = round.max(back.max_abs_diff(&x));
            let hw = (shape[1] * shape[2]) as f64;
            let spatial: f64 = x.data().iter().map(|v| v * v).sum();
            let spectral: f64 = z.re().iter().zip(z.im()).map(|(a, b)| a * a + b * b).sum::<f64>() / hw;
            parseval = parseval.max((spectral - spatial).abs() / spatial);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        name: "fft correctness",
        pass: round < 1e-9 && parseval < 1e-9 && secs < 5.0,
        detail: format!("round-trip {round:.2e}, parseval {parseval:.2e}, {secs:.2} s"),
    }
}

fn soft_gate_limits() -> Outcome {
    let mut cfg = SoftGateConfig {
        candidates: vec![0.2, 0.5, 0.8],
        ..Default::default()
    };
    let j = [0.0f64, 0.0, 1.0];
    cfg.kappa = 50.0;
    let sharp = cutoff_expectation(&j, &cfg).1;
    cfg.kappa = 1e-6;
    let flat = cutoff_expectation(&j, &cfg).1;

    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut recon = 0.0f64;
    for mode in [GateMode::Soft, GateMode::Hard(0.5)] {
        let cfg = SoftGateConfig {
            mode,
            ..Default::default()
        };
        for _ in 0..20 {
            let x = random_tensor(&mut rng, &[4, 8, 8]).scale(rng.random_range(0.1..10.0));
            let m = cfg.candidates.len();
            let params = GateParams {
                scale: random_tensor(&mut rng, &[1]),
                offset: random_tensor(&mut rng, &[m]),
            };
            let (high, low, _) = split(&x, &cfg, &params).unwrap();
            recon = recon.max(high.add(&low).unwrap().max_abs_diff(&x));
        }
    }
    let (e1, e2) = ((sharp - 0.8).abs(), (flat - 0.5).abs());
    Outcome {
        name: "soft gate limits",
        pass: e1 < 1e-6 && e2 < 1e-6 && recon < 1e-9,
        detail: format!("|c(50) - 0.8| {e1:.2e}, |c(1e-6) - 0.5| {e2:.2e}, split sum {recon:.2e}"),
    }
}

fn softmax_longhand(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn attention_longhand(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (nf, d) = (q.rows(), q.cols());
    let ns = k.rows();
    let mut out = Tensor::zeros(&[nf, d]);
    for i in 0..nf {
        let logits: Vec<f64> = (0..ns)
            .map(|j| {
                let dot: f64 = (0..d).map(|c| q.at(&[i, c]) * k.at(&[j, c])).sum();
                dot / (d as f64).sqrt() + b.at(&[i, j])
            })
            .collect();
        let p = softmax_longhand(&logits);
        for c in 0..d {
            out.set(&[i, c], (0..ns).map(|j| p[j] * v.at(&[j, c])).sum());
        }
    }
    out
}

fn affinity_longhand(x: &Tensor<f64>, p: &GscmParams<f64>, h: usize, w: usize) -> Tensor<f64> {
    let t = h * w;
    let (c, r) = (x.cols(), p.w_q.cols());
    let proj = |wm: &Tensor<f64>, i: usize, k: usize| (0..c).map(|ch| x.at(&[i, ch]) * wm.at(&[ch, k])).sum::<f64>();
    let mut s = Tensor::zeros(&[t, t]);
    for i in 0..t {
        let logits: Vec<f64> = (0..t)
            .map(|j| {
                let dot: f64 = (0..r).map(|k| proj(&p.w_q, i, k) * proj(&p.w_k, j, k)).sum();
                let dy = (i / w) as i64 - (j / w) as i64 + p.max_h as i64 - 1;
                let dx = (i % w) as i64 - (j % w) as i64 + p.max_w as i64 - 1;
                let bucket = dy as usize * (2 * p.max_w - 1) + dx as usize;
                dot / (r as f64).sqrt() + p.b_rel.data()[bucket]
            })
            .collect();
        for (j, v) in softmax_longhand(&logits).into_iter().enumerate() {
            s.set(&[i, j], v);
        }
    }
    s
}

fn attention_and_affinity_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let (mut att, mut bias, mut aff) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let (hf, wf) = (rng.random_range(1..=2), rng.random_range(1..=2));
        let (hs, ws) = (rng.random_range(1..=2), rng.random_range(1..=2));
        let d = rng.random_range(1..=3);
        let (freq, spatial) = (grid_positions(hf, wf), grid_positions(hs, ws));
        let e: Vec<f64> = (0..4).map(|_| randn(&mut rng)).collect();
        let b = bias_matrix(&freq, &spatial, &e).unwrap();
        let b_ref = Tensor::from_fn(&[freq.len(), spatial.len()], |n| {
            let (pi, pj) = (freq[n / spatial.len()], spatial[n % spatial.len()]);
            let (dx, dy) = ((pi.0 - pj.0) as f64, (pi.1 - pj.1) as f64);
            e[0] * dx + e[1] * dy + e[2] * dx.abs() + e[3] * dy.abs()
        });
        bias = bias.max(b.max_abs_diff(&b_ref));
        let q = random_tensor(&mut rng, &[freq.len(), d]);
        let k = random_tensor(&mut rng, &[spatial.len(), d]);
        let v = random_tensor(&mut rng, &[spatial.len(), d]);
        let got = f2s_attention(&q, &k, &v, &b).unwrap();
        att = att.max(got.max_abs_diff(&attention_longhand(&q, &k, &v, &b)));

        let c = rng.random_range(2..=3);
        let r = rng.random_range(1..c);
        let (h, w) = (rng.random_range(1..=2), rng.random_range(1..=2));
        let mut p = GscmParams::<f64>::init(c, r, 2, 2, &mut rng).unwrap();
        p.b_rel = random_tensor(&mut rng, p.b_rel.shape());
        let x = random_tensor(&mut rng, &[h * w, c]);
        let s = dynamic_affinity(&x, &p, h, w).unwrap();
        aff = aff.max(s.max_abs_diff(&affinity_longhand(&x, &p, h, w)));
    }
    Outcome {
        name: "attention and affinity oracles",
        pass: att < 1e-12 && bias < 1e-12 && aff < 1e-12,
        detail: format!("attention {att:.2e}, offset bias {bias:.2e}, affinity {aff:.2e}"),
    }
}

fn phase_preservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let shape = [10, 10, 10];
    let mut re = Vec::new();
    let mut im = Vec::new();
    while re.len() < 1000 {
        let (a, b) = (randn(&mut rng), randn(&mut rng));
        if a.hypot(b) > 1e-6 {
            re.push(a);
            im.push(b);
        }
    }
    let x = ComplexTensor::new(
        Tensor::new(shape.to_vec(), re).unwrap(),
        Tensor::new(shape.to_vec(), im).unwrap(),
    )
    .unwrap();
    let m = Tensor::from_fn(&shape, |_| rng.random_range(0.05..3.0));
    let mut worst = 0.0f64;
    for map in [
        AmplitudeMap::Softplus { beta: 10.0 },
        AmplitudeMap::Softplus { beta: 1.0 },
        AmplitudeMap::Identity,
    ] {
        let y = amplitude_modulation(&x, &m, 1e-3, map).unwrap();
        for i in 0..x.len() {
            let (zx, zy) = (x.get(i), y.get(i));
            let diff = (zy.im.atan2(zy.re) - zx.im.atan2(zx.re) + std::f64::consts::PI)
                .rem_euclid(2.0 * std::f64::consts::PI)
                - std::f64::consts::PI;
            worst = worst.max(diff.abs());
        }
    }
    Outcome {
        name: "phase preservation",
        pass: worst < 1e-9,
        detail: format!("max phase deviation {worst:.2e} over 1000 bins"),
    }
}

fn toy_batch(rng: &mut ChaCha8Rng) -> Vec<EncodedSample<f64>> {
    let mut masked = Tensor::zeros(&[8, 8]);
    for (y, x) in [(2, 2), (2, 3), (3, 2), (3, 3), (5, 6)] {
        masked.set(&[y, x], 1.0);
    }
    [Tensor::zeros(&[8, 8]), masked]
        .into_iter()
        .map(|patch_mask| {
            let is_anomalous = patch_mask.sum() > 0.0;
            EncodedSample {
                feat: random_tensor(rng, &[8, 8, 8]),
                pixel_mask: patch_mask.clone(),
                patch_mask,
                is_anomalous,
            }
        })
        .collect()
}

fn gradient_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut obj = Objective::default();
    obj.model.channels = 8;
    obj.model.rank = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut params = ModelParams::<f64>::init(&obj.model, &mut rng).unwrap();
    let flat: Vec<f64> = params.flat().iter().map(|v| v + 0.05 * randn(&mut rng)).collect();
    params.set_flat(&flat).unwrap();
    let batch = toy_batch(&mut rng);
    let (_, terms) = loss_value(&params, &batch, &obj).unwrap();
    let active = terms.to_array().iter().all(|&t| t > 0.0);
    let eval = grad(&params, &batch, &obj).unwrap();
    let mut offset = 0;
    let mut worst = (0.0f64, "");
    for ((name, t), g) in params.named().iter().zip(&eval.grads) {
        let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
        for (i, &a) in g.data().iter().enumerate() {
            let fd = finite_diff(&params, &batch, &obj, offset + i, 1e-5).unwrap();
            diff += (a - fd) * (a - fd);
            na += a * a;
            nf += fd * fd;
        }
        offset += t.len();
        let denom = f64::max(na, nf).sqrt();
        let rel = if denom == 0.0 { 0.0 } else { diff.sqrt() / denom };
        if rel >= worst.0 {
            worst = (rel, name);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        name: "gradient oracle",
        pass: active && worst.0 < 1e-4 && secs < 60.0,
        detail: format!(
            "{} groups, {} coordinates, worst relative error {:.2e} ({}), all six terms active: {active}, {secs:.1} s",
            params.names().len(),
            params.count(),
            worst.0,
            worst.1
        ),
    }
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in (0..scores.len()).filter(|&i| labels[i]) {
        for j in (0..scores.len()).filter(|&j| !labels[j]) {
            pairs += 1.0;
            num += if scores[i] > scores[j] {
                1.0
            } else if scores[i] == scores[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    num / pairs
}

/// AP over a tie-free ranking: mean of precision at each positive's rank.
fn longhand_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut hits, mut sum) = (0.0, 0.0);
    for (rank, &i) in idx.iter().enumerate() {
        if labels[i] {
            hits += 1.0;
            sum += hits / (rank + 1) as f64;
        }
    }
    sum / hits
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(600);
    let mut mismatches = 0;
    let mut done = 0;
    while done < 200 {
        let n = rng.random_range(2..=50);
        let levels = rng.random_range(2..=8);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        let s = ScoredSet::new(&scores, &labels, Level::Pixel).unwrap();
        if roc_auc(&s).unwrap() != pairwise_auc(&scores, &labels) {
            mismatches += 1;
        }
        done += 1;
    }
    let fixtures: [(&[f64], &[bool], f64); 3] = [
        (&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false], 5.0 / 6.0),
        (&[0.9, 0.8, 0.2], &[true, true, false], 1.0),
        (&[0.9, 0.8, 0.7, 0.6, 0.1], &[false, false, false, false, true], 0.2),
    ];
    let mut ap_err = 0.0f64;
    for (scores, labels, expect) in fixtures {
        let got = pr_auc(&ScoredSet::new(scores, labels, Level::Image).unwrap()).unwrap();
        ap_err = ap_err
            .max((got - longhand_ap(scores, labels)).abs())
            .max((got - expect).abs());
    }
    Outcome {
        name: "metric oracles",
        pass: mismatches == 0 && ap_err < 1e-12,
        detail: format!("roc mismatches {mismatches}/200, AP fixture error {ap_err:.2e}"),
    }
}

fn variant(base: &TrainConfig, edit: impl FnOnce(&mut TrainConfig)) -> TrainConfig {
    let mut c = base.clone();
    edit(&mut c);
    c
}

fn ablation_trends(full: &Metrics) -> Outcome {
    let base = TrainConfig::default();
    let data = build_datasets::<f64>(base.seed, &base.data, base.objective.model.channels).unwrap();
    let runs = [
        (
            "hard 0.3",
            variant(&base, |c| c.objective.model.gate.mode = GateMode::Hard(0.3)),
        ),
        (
            "hard 0.5",
            variant(&base, |c| c.objective.model.gate.mode = GateMode::Hard(0.5)),
        ),
        (
            "hard 0.7",
            variant(&base, |c| c.objective.model.gate.mode = GateMode::Hard(0.7)),
        ),
        ("no-fsam", variant(&base, |c| c.objective.model.use_fsam = false)),
        ("no-gscm", variant(&base, |c| c.objective.model.use_gscm = false)),
        ("no-f2s", variant(&base, |c| c.objective.model.fsam.offset_bias = false)),
    ];
    let mut pass = true;
    let mut parts = vec![format!("full {:.4}", full.p_roc)];
    for (label, cfg) in runs {
        let out = train(&cfg, &data, |_| {}).unwrap();
        let m = evaluate_model(&out.params, &cfg.objective.model, &data.test).unwrap();
        let ok = full.p_roc >= m.p_roc - ABLATION_TIE;
        pass &= ok;
        parts.push(format!(
            "{label} {:.4}{}",
            m.p_roc,
            if ok { "" } else { " (above full)" }
        ));
    }
    Outcome {
        name: "ablation trends",
        pass,
        detail: format!("pixel AUROC: {}", parts.join(", ")),
    }
}

fn smoke(init: &Metrics, trained: &Metrics) -> Outcome {
    let pass = trained.p_roc >= SMOKE_TRAINED_PIXEL
        && trained.i_roc >= SMOKE_TRAINED_IMAGE
        && init.p_roc <= SMOKE_INIT_CEILING
        && init.i_roc <= SMOKE_INIT_CEILING;
    Outcome {
        name: "training smoke",
        pass,
        detail: format!(
            "trained pixel {:.4} image {:.4}, init pixel {:.4} image {:.4}",
            trained.p_roc, trained.i_roc, init.p_roc, init.i_roc
        ),
    }
}

fn files_equal(a: &Path, b: &Path, name: &str) -> bool {
    fs::read(a.join(name)).unwrap() == fs::read(b.join(name)).unwrap()
}

fn determinism(dir: &Path, runs: [&RunConfig; 2]) -> Outcome {
    let mut feats = Container::new();
    let cfg = &runs[0].train;
    let data = build_datasets::<f64>(cfg.seed, &cfg.data, cfg.objective.model.channels).unwrap();
    for (i, s) in data.test.iter().take(3).enumerate() {
        feats.push_tensor(&format!("sample{i}"), &s.feat.cast::<f32>()).unwrap();
    }
    let input = dir.join("features.had");
    write_container(&input, &feats).unwrap();
    let mut heatmaps = Vec::new();
    for r in runs {
        heatmaps.push(cmd_infer(r, &r.out.join(CHECKPOINT_FILE), &input).unwrap());
    }
    let (a, b) = (&runs[0].out, &runs[1].out);
    let logs = files_equal(a, b, HISTORY_FILE) && files_equal(a, b, "test.csv");
    let maps = heatmaps[0].len() == 6
        && heatmaps[0]
            .iter()
            .zip(&heatmaps[1])
            .all(|(x, y)| fs::read(x).unwrap() == fs::read(y).unwrap())
        && files_equal(a, b, "scores.had");
    Outcome {
        name: "determinism",
        pass: logs && maps,
        detail: format!(
            "metric logs identical: {logs}, {} heatmaps identical: {maps}",
            heatmaps[0].len()
        ),
    }
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().unwrap();
    let mut results = vec![
        fft_correctness(),
        soft_gate_limits(),
        attention_and_affinity_oracles(),
        phase_preservation(),
        gradient_oracle(),
        metric_oracles(),
    ];
    let mut runs = [RunConfig::default(), RunConfig::default()];
    runs[0].out = dir.path().join("run_a");
    runs[1].out = dir.path().join("run_b");
    let reports: Vec<_> = runs
        .iter()
        .map(|r| cmd_train(r, &mut std::io::sink()).unwrap())
        .collect();
    results.push(ablation_trends(&reports[0].test));
    results.push(smoke(&reports[0].init_test, &reports[0].test));
    results.push(determinism(dir.path(), [&runs[0], &runs[1]]));

    let mut enforced_failures = 0;
    for r in &results {
        let report_only = REPORT_ONLY.contains(&r.name);
        let tag = match (r.pass, report_only) {
            (true, _) => "PASS",
            (false, true) => "FAIL (reported)",
            (false, false) => "FAIL",
        };
        println!("{tag:<16} {:<32} {}", r.name, r.detail);
        if !r.pass && !report_only {
            enforced_failures += 1;
        }
    }
    if enforced_failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs sequentially so the latency measurement is not disturbed by the
//! training criteria. A failing criterion is reported but only fails the
//! process when `VERSAPANTS_ACCEPTANCE_STRICT=1` is set.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use versapants::evaluation::*;
use versapants::kinematics::{default_template, LowerBodyPositions, LowerBodyRotations};
use versapants::models::{build, Alignment, ArchitectureKind, ModelConfig, OUTPUT_DIM};
use versapants::rotations::*;
use versapants::signal::*;
use versapants::simulator::*;
use versapants::tensor::{grad_check, read_vpw1, Activation, LayerSpec, Mode, ModelGraph, Tensor};
use versapants::training::*;

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

type Check = Result<Outcome, String>;

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn within(value: f64, reference: f64, tol: f64) -> bool {
    (value - reference).abs() <= tol * reference
}

// ---------------------------------------------------------------- 1

fn rotation_suite() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_6d, mut worst_aa) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let r = random_rotation(&mut rng);
        let back = rot6d_to_matrix(&matrix_to_rot6d(&r)).map_err(e)?;
        worst_6d = worst_6d.max(geodesic_angle(&r, &back));
        let aa = axis_angle_to_matrix(&matrix_to_axis_angle(&r).map_err(e)?);
        worst_aa = worst_aa.max(geodesic_angle(&r, &aa));
    }
    let secs = t.elapsed().as_secs_f64();
    Ok(outcome(
        worst_6d <= 1e-9 && worst_aa <= 1e-9 && secs < 10.0,
        format!("max geodesic error 6D {worst_6d:.2e}, axis-angle {worst_aa:.2e} rad; {secs:.2} s"),
    ))
}

// ---------------------------------------------------------------- 2

fn layer_kinds() -> Vec<LayerSpec> {
    use LayerSpec::*;
    vec![
        Conv2d {
            in_channels: 2,
            out_channels: 4,
            kernel: [3, 3],
            activation: Activation::Linear,
        },
        Conv2d {
            in_channels: 3,
            out_channels: 2,
            kernel: [3, 1],
            activation: Activation::Relu,
        },
        AvgPool2d,
        BatchNorm { channels: 3 },
        Dropout { rate: 0.3 },
        Reshape { shape: vec![2, 6] },
        PositionalAdd { len: 4, dim: 3 },
        EncoderLayer {
            d_model: 8,
            heads: 2,
            ffn_dim: 12,
        },
        TemporalGap,
        Dense {
            in_features: 5,
            out_features: 4,
            activation: Activation::Linear,
        },
        Dense {
            in_features: 4,
            out_features: 3,
            activation: Activation::Relu,
        },
        Conv1d {
            in_channels: 3,
            out_channels: 5,
            kernel: 3,
            activation: Activation::Relu,
        },
        MaxPool1d,
        LstmBidirectional {
            input_size: 3,
            hidden: 4,
        },
    ]
}

fn random_target(rng: &mut ChaCha8Rng) -> Target {
    let r = LowerBodyRotations::from_array(std::array::from_fn(|_| random_rotation(rng)));
    Target::new(&r, &default_template())
}

fn pipeline_loss(g: &mut ModelGraph<f64>, x: &Tensor<f64>, targets: &[&Target]) -> Result<(f64, Vec<f64>), String> {
    let y = g.forward(x, Mode::Train).map_err(e)?;
    let (l, grad, _) = batch_loss(y.data(), targets, 1.0).map_err(e)?;
    Ok((l, grad))
}

/// Worst relative error of parameter gradients through model, Gram–Schmidt, FK and loss.
fn full_path_error() -> Result<f64, String> {
    let cfg = ModelConfig {
        window_len: 8,
        channels: 2,
        filters: [2, 3, 4],
        d_model: 4,
        layers: 1,
        heads: 2,
        ffn_dim: 6,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut g: ModelGraph<f64> = build(&cfg, 4).map_err(e)?.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let b = 3;
    let n = b * cfg.window_len * cfg.channels * 2;
    let x = Tensor::new(
        vec![b, cfg.window_len, cfg.channels, 2],
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .map_err(e)?;
    let y = g.forward(&x, Mode::Train).map_err(e)?;
    // Keep targets clear of the L1 kinks so central differences are meaningful.
    let mut targets = Vec::new();
    for i in 0..b {
        let pred = &y.data()[i * OUTPUT_DIM..(i + 1) * OUTPUT_DIM];
        targets.push(loop {
            let t = random_target(&mut rng);
            let l = loss(pred, &t, 1.0).map_err(e)?;
            let gap = pred
                .iter()
                .zip(&t.rot6d)
                .map(|(a, b)| (a - b).abs())
                .fold(f64::MAX, f64::min);
            if !l.degenerate && gap > 1e-2 {
                break t;
            }
        });
    }
    let refs: Vec<&Target> = targets.iter().collect();
    let (_, grad) = pipeline_loss(&mut g, &x, &refs)?;
    let grads = g
        .backward(&Tensor::new(y.shape().to_vec(), grad).map_err(e)?)
        .map_err(e)?;
    let h = 1e-6;
    let mut worst = 0.0f64;
    for pi in 0..g.params().len() {
        if !g.params()[pi].trainable {
            continue;
        }
        let len = g.params()[pi].value.len();
        for k in (0..len).step_by(len.div_ceil(6)) {
            let orig = g.params()[pi].value.data()[k];
            g.params_mut()[pi].value.data_mut()[k] = orig + h;
            let up = pipeline_loss(&mut g, &x, &refs)?.0;
            g.params_mut()[pi].value.data_mut()[k] = orig - h;
            let down = pipeline_loss(&mut g, &x, &refs)?.0;
            g.params_mut()[pi].value.data_mut()[k] = orig;
            let num = (up - down) / (2.0 * h);
            let ana = grads.params[pi].data()[k];
            worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-3));
        }
    }
    Ok(worst)
}

fn gradient_checks() -> Check {
    let t = Instant::now();
    let mut worst_layer = (0.0f64, "");
    for spec in layer_kinds() {
        for seed in [1, 2] {
            let err = grad_check(&spec, seed).map_err(e)?;
            if err > worst_layer.0 {
                worst_layer = (err, spec.kind_name());
            }
        }
    }
    let full = full_path_error()?;
    let secs = t.elapsed().as_secs_f64();
    Ok(outcome(
        worst_layer.0 <= 1e-3 && full <= 1e-3 && secs < 120.0,
        format!(
            "{} layer kinds, worst {:.2e} ({}); full loss path {full:.2e}; {secs:.1} s",
            layer_kinds().len(),
            worst_layer.0,
            worst_layer.1
        ),
    ))
}

// ---------------------------------------------------------------- 3

fn payload_bytes(g: &ModelGraph<f32>) -> Result<usize, String> {
    let dir = tempfile::tempdir().map_err(e)?;
    let path = dir.path().join("w.vpw");
    g.save(&path).map_err(e)?;
    let tensors = read_vpw1(&mut std::fs::File::open(&path).map_err(e)?).map_err(e)?;
    Ok(tensors.iter().map(|t| 4 * t.data.len()).sum())
}

fn accounting() -> Check {
    let t = Instant::now();
    let arms = [
        (ArchitectureKind::Versapants, 106e3, 0.10, 30.54e6, 0.25),
        (ArchitectureKind::CnnHybrid, 334e3, 0.30, 121.46e6, 0.30),
        (ArchitectureKind::Bilstm, 2.49e6, 0.30, 567.96e6, 0.30),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    let mut counts = Vec::new();
    for (kind, p_ref, p_tol, f_ref, f_tol) in arms {
        let g = build(&ModelConfig::with_kind(kind), 0).map_err(e)?;
        let params = g.count_params();
        let flops = g.count_flops();
        let payload = payload_bytes(&g)?;
        let p_ok = within(params as f64, p_ref, p_tol);
        let f_ok = within(flops as f64, f_ref, f_tol);
        let w_ok = payload == 4 * params;
        pass &= p_ok && f_ok && w_ok;
        let mark = |ok: bool| if ok { "" } else { " OUT" };
        parts.push(format!(
            "{kind:?} params {params}{} flops {:.2}M{} payload {payload}B{}",
            mark(p_ok),
            flops as f64 / 1e6,
            mark(f_ok),
            mark(w_ok)
        ));
        counts.push((params, flops));
    }
    let ordered = counts.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1);
    pass &= ordered;
    let secs = t.elapsed().as_secs_f64();
    pass &= secs < 5.0;
    Ok(outcome(
        pass,
        format!(
            "{}; ordering {}; {secs:.2} s",
            parts.join("; "),
            if ordered { "ok" } else { "broken" }
        ),
    ))
}

// ---------------------------------------------------------------- 4

fn end_to_end_lopo() -> Check {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(e)?;
    gen_dataset(dir.path(), 6, &[1, 2, 4, 5], &ArtifactConfig::default(), 42).map_err(e)?;
    let raw = load_dataset(dir.path()).map_err(e)?;
    let cfg = EvalConfig {
        model: ModelConfig::default(),
        train: TrainConfig {
            seed: 42,
            ..TrainConfig::default()
        },
        test_stride: 1,
        global_minmax: false,
    };
    let folds = run_protocol(&raw, Protocol::Lopo, &cfg, None, 1).map_err(e)?;
    let mut pass = folds.len() == 6;
    let mut ratios = Vec::new();
    for f in &folds {
        let ratio = f.model.mpjae_deg.mean / f.baseline.mpjae_deg.mean;
        let ok = ratio <= 0.7 && f.model.mpjpe_cm.mean < f.baseline.mpjpe_cm.mean;
        pass &= ok;
        ratios.push(format!(
            "{} {ratio:.3}/{:.2}cm vs {:.2}cm{}",
            f.model.held_out,
            f.model.mpjpe_cm.mean,
            f.baseline.mpjpe_cm.mean,
            if ok { "" } else { " FAIL" }
        ));
    }
    let secs = t.elapsed().as_secs_f64();
    pass &= secs < 1800.0;
    Ok(outcome(
        pass,
        format!(
            "MPJAE ratio / MPJPE model vs baseline per fold: {}; {secs:.0} s",
            ratios.join(", ")
        ),
    ))
}

// ---------------------------------------------------------------- 5

fn overfit() -> Check {
    let t = Instant::now();
    let (sensor, gt) = simulate_session(
        &SubjectParams::sample("P01", 5),
        &standard_schedule(&[5]),
        &ArtifactConfig::none(),
        5,
    )
    .map_err(e)?;
    let stats = compute_minmax([&sensor]).map_err(e)?;
    let processed = prepare_session(&sensor, Some(&gt), &stats).map_err(e)?;
    let model = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let all = build_samples(&[processed], model.window_len, 1, Alignment::Last).map_err(e)?;
    // A window ending mid-squat, where the pose is far from standing.
    let mid = (REST_S + 15.0) * SENSOR_RATE_HZ;
    let sample = all
        .into_iter()
        .find(|s| (s.start + model.window_len) as f64 >= mid)
        .ok_or("no window mid-movement")?;
    let samples = vec![sample];
    let tc = TrainConfig {
        epochs: 200,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let (g, report) = train_model(&model, &samples, &tc).map_err(e)?;
    let summed = evaluate_loss(&g, &samples, &[0], tc.position_weight).map_err(e)?;
    let x = Tensor::new(
        std::iter::once(1).chain(g.input_shape().iter().copied()).collect(),
        samples[0].x.clone(),
    )
    .map_err(e)?;
    let y: Vec<f64> = g.infer(&x).map_err(e)?.data().iter().map(|&v| v as f64).collect();
    let l = loss(&y, &samples[0].target, 1.0).map_err(e)?;
    let mean_reduced = l.rotation_term / OUTPUT_DIM as f64 + l.position_term / 12.0;
    let first = report.history[0].train_loss;
    let secs = t.elapsed().as_secs_f64();
    Ok(outcome(
        summed < 0.05 && secs < 60.0,
        format!(
            "summed L1 loss {first:.3} -> {summed:.4} (mean-reduced {mean_reduced:.4}) after 200 epochs; {secs:.1} s"
        ),
    ))
}

// ---------------------------------------------------------------- 6

fn rand_positions(rng: &mut ChaCha8Rng, n: usize) -> Vec<LowerBodyPositions> {
    (0..n)
        .map(|_| {
            LowerBodyPositions::from_array(std::array::from_fn(|_| {
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            }))
        })
        .collect()
}

fn rand_rotations(rng: &mut ChaCha8Rng, n: usize) -> Vec<LowerBodyRotations> {
    (0..n)
        .map(|_| LowerBodyRotations::from_array(std::array::from_fn(|_| random_rotation(rng))))
        .collect()
}

fn naive_mpjpe(p: &[LowerBodyPositions], g: &[LowerBodyPositions]) -> f64 {
    let mut s = 0.0;
    for (a, b) in p.iter().zip(g) {
        for (u, v) in a.to_array().iter().zip(b.to_array().iter()) {
            s += ((u.x - v.x).powi(2) + (u.y - v.y).powi(2) + (u.z - v.z).powi(2)).sqrt();
        }
    }
    100.0 * s / (4 * p.len()) as f64
}

/// Relative rotation angle from quaternions.
fn naive_mpjae(p: &[LowerBodyRotations], g: &[LowerBodyRotations]) -> f64 {
    let mut s = 0.0;
    for (a, b) in p.iter().zip(g) {
        for (u, v) in a.to_array().iter().zip(b.to_array().iter()) {
            let d = u.to_quaternion().inverse() * v.to_quaternion();
            let c = d.coords;
            s += 2.0 * (c.x * c.x + c.y * c.y + c.z * c.z).sqrt().atan2(c.w.abs());
        }
    }
    (s / (4 * p.len()) as f64).to_degrees()
}

fn naive_jitter(p: &[LowerBodyPositions], dt: f64) -> f64 {
    let mut s = 0.0;
    for t in 3..p.len() {
        for j in 0..4 {
            let v = |k: usize| p[k].to_array()[j];
            let d = v(t) - 3.0 * v(t - 1) + 3.0 * v(t - 2) - v(t - 3);
            s += (d.x * d.x + d.y * d.y + d.z * d.z).sqrt() / dt.powi(3);
        }
    }
    s / (4 * (p.len() - 3)) as f64
}

fn along(f: impl Fn(usize) -> Vec3, n: usize) -> Vec<LowerBodyPositions> {
    (0..n).map(|i| LowerBodyPositions::from_array([f(i); 4])).collect()
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(4..60);
        let (p, g) = (rand_positions(&mut rng, n), rand_positions(&mut rng, n));
        worst = worst.max((mpjpe(&p, &g).map_err(e)?.mean - naive_mpjpe(&p, &g)).abs());
        let (a, b) = (rand_rotations(&mut rng, n), rand_rotations(&mut rng, n));
        worst = worst.max((mpjae(&a, &b).map_err(e)?.mean - naive_mpjae(&a, &b)).abs());
        let j = naive_jitter(&p, FRAME_DT);
        worst = worst.max((jitter(&p, FRAME_DT).map_err(e)?.mean - j).abs() / j.max(1.0));
    }
    // Dyadic quadratics on the frame grid are exact in binary floating point.
    let mut quad_max = 0.0f64;
    for _ in 0..20 {
        let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(-64i32..64) as f64 / 64.0);
        let q = along(
            |i| {
                let i = i as f64;
                Vec3::new(c[0] + c[1] * i + c[2] * i * i, c[2] * i * i, -c[1] * i)
            },
            40,
        );
        quad_max = quad_max.max(jitter(&q, FRAME_DT).map_err(e)?.mean);
    }
    let c = 0.7;
    let cubic = along(|i| Vec3::new(c * (i as f64 * FRAME_DT).powi(3), 0.0, 0.0), 30);
    let cubic_rel = (jitter(&cubic, FRAME_DT).map_err(e)?.mean - 6.0 * c).abs() / (6.0 * c);
    Ok(outcome(
        worst <= 1e-9 && quad_max == 0.0 && cubic_rel <= 1e-9,
        format!("oracle gap {worst:.2e}; quadratic jitter max {quad_max}; cubic relative error {cubic_rel:.2e}"),
    ))
}

// ---------------------------------------------------------------- 7

fn cleaning_oracle() -> Check {
    let (mut sensor, gt) = simulate_session(
        &SubjectParams::sample("P01", 7),
        &standard_schedule(&[4, 15]),
        &ArtifactConfig::none(),
        7,
    )
    .map_err(e)?;
    let t_len = sensor.len();
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut dropped = vec![false; t_len];
    for _ in 0..12 {
        let t = rng.random_range(0..t_len);
        let ch = rng.random_range(0..sensor.n_channels);
        sensor.codes[t * sensor.n_channels + ch] = 0;
        dropped[t] = true;
    }
    let stats = compute_minmax([&sensor]).map_err(e)?;
    let p = prepare_session(&sensor, Some(&gt), &stats).map_err(e)?;
    let n = 120;
    let mut exact = true;
    for stride in [1, 3, 5] {
        let split = extract_windows(&p.frame_ok, n, stride).map_err(e)?;
        let brute: Vec<usize> = (0..=t_len - n)
            .step_by(stride)
            .filter(|&s| dropped[s..s + n].iter().any(|&d| d))
            .collect();
        exact &= split.rejected == brute;
    }

    let dir = tempfile::tempdir().map_err(e)?;
    gen_dataset(dir.path(), 4, &IMPLEMENTED_MOVEMENTS, &ArtifactConfig::default(), 77).map_err(e)?;
    let raw = load_dataset(dir.path()).map_err(e)?;
    let stats = compute_minmax(raw.iter().map(|l| &l.sensor)).map_err(e)?;
    let mut identity = true;
    let mut checked = 0;
    for l in &raw {
        let p = prepare_session(&l.sensor, l.gt.as_ref(), &stats).map_err(e)?;
        for stride in [1, 5] {
            let split = extract_windows(&p.frame_ok, n, stride).map_err(e)?;
            identity &= split.kept.len() + split.rejected.len() == window_count(p.len(), n, stride);
            checked += 1;
        }
    }
    Ok(outcome(
        exact && identity,
        format!(
            "rejected set {} brute force; count identity {} on {checked} session/stride pairs",
            if exact { "equals" } else { "differs from" },
            if identity { "holds" } else { "broken" }
        ),
    ))
}

// ---------------------------------------------------------------- 8

fn protocol_correctness() -> Check {
    let dir = tempfile::tempdir().map_err(e)?;
    gen_dataset(dir.path(), 11, &IMPLEMENTED_MOVEMENTS, &ArtifactConfig::default(), 8).map_err(e)?;
    let raw = load_dataset(dir.path()).map_err(e)?;
    let stats = compute_minmax(raw.iter().map(|l| &l.sensor)).map_err(e)?;
    let sessions = raw
        .iter()
        .map(|l| prepare_session(&l.sensor, l.gt.as_ref(), &stats))
        .collect::<versapants::Result<Vec<_>>>()
        .map_err(e)?;
    let lopo = make_folds(&sessions, Protocol::Lopo).map_err(e)?;
    let loeo = make_folds(&sessions, Protocol::Loeo).map_err(e)?;
    let mut leaks = 0;
    for f in lopo.iter().chain(&loeo) {
        let (train, test) = fold_windows(&sessions, f, 120, 5, 5).map_err(e)?;
        if train.is_empty() || test.is_empty() || !check_leakage(&sessions, f, &train, &test, 120) {
            leaks += 1;
        }
    }

    let (mut rests, mut hits) = (0, 0);
    for l in &raw {
        let taps = detect_taps(&l.sensor);
        for entry in &l.sensor.meta.schedule {
            rests += 1;
            let expected = entry.start_s + entry.duration_s + TAP_OFFSETS_S[1] + TAP_DURATION_S / 2.0;
            if taps.iter().any(|&t| (t as f64 * 1e-6 - expected).abs() <= 0.2) {
                hits += 1;
            }
        }
    }
    Ok(outcome(
        lopo.len() == 11 && loeo.len() == IMPLEMENTED_MOVEMENTS.len() && leaks == 0 && hits == rests,
        format!(
            "{} LOPO folds, {} LOEO folds for {} movements, {leaks} folds leaking or empty; taps matched in {hits}/{rests} rests",
            lopo.len(),
            loeo.len(),
            IMPLEMENTED_MOVEMENTS.len()
        ),
    ))
}

// ---------------------------------------------------------------- 9

fn latency() -> Check {
    let mut rows = Vec::new();
    for kind in [
        ArchitectureKind::Versapants,
        ArchitectureKind::CnnHybrid,
        ArchitectureKind::Bilstm,
    ] {
        let g = build(&ModelConfig::with_kind(kind), 0).map_err(e)?;
        let iters = if kind == ArchitectureKind::Versapants { 100 } else { 20 };
        let s = bench_latency(&g, iters).map_err(e)?;
        rows.push((kind, g.count_flops(), s));
    }
    let default_rate = rows[0].2.windows_per_s;
    let mut by_flops = rows.clone();
    by_flops.sort_by_key(|r| r.1);
    let mut by_time = rows.clone();
    by_time.sort_by(|a, b| a.2.mean_ms.total_cmp(&b.2.mean_ms));
    let ordered = by_flops.iter().map(|r| r.0).eq(by_time.iter().map(|r| r.0));
    let text: Vec<String> = rows
        .iter()
        .map(|(k, _, s)| format!("{k:?} {:.2} ± {:.2} ms over {}", s.mean_ms, s.std_ms, s.iterations))
        .collect();
    Ok(outcome(
        default_rate > 30.0 && ordered,
        format!(
            "default {default_rate:.1} windows/s; {}; ordering {}",
            text.join(", "),
            if ordered { "matches FLOPs" } else { "differs from FLOPs" }
        ),
    ))
}

// ---------------------------------------------------------------- 10

fn cli(args: &[&str], cwd: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_versapants"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(e)?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn files_under(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(e)?;
    let d = dir.path();
    std::fs::write(
        d.join("small.json"),
        r#"{"window_len": 40, "filters": [8, 16, 16], "d_model": 32, "layers": 1, "ffn_dim": 64}"#,
    )
    .map_err(e)?;
    for run in ["a", "b"] {
        cli(
            &[
                "simulate",
                "--subjects",
                "3",
                "--seed",
                "10",
                "--movements",
                "4,5",
                "--out",
                &format!("data_{run}"),
            ],
            d,
        )?;
        let common = [
            "--data",
            "data_a",
            "--config",
            "small.json",
            "--epochs",
            "2",
            "--seed",
            "10",
        ];
        cli(
            &[
                &["train"][..],
                &common,
                &["--out", &format!("w_{run}.vpw"), "--history", &format!("h_{run}.csv")],
            ]
            .concat(),
            d,
        )?;
        cli(
            &[&["eval"][..], &common, &["--out", &format!("r_{run}.csv")]].concat(),
            d,
        )?;
    }
    let data = files_under(&d.join("data_a"));
    let mut differing = Vec::new();
    if data != files_under(&d.join("data_b")) {
        differing.push("dataset file list".to_string());
    }
    let mut pairs: Vec<(std::path::PathBuf, std::path::PathBuf)> = data
        .iter()
        .map(|f| (d.join("data_a").join(f), d.join("data_b").join(f)))
        .collect();
    for (a, b) in [
        ("w_a.vpw", "w_b.vpw"),
        ("w_a.json", "w_b.json"),
        ("h_a.csv", "h_b.csv"),
        ("r_a.csv", "r_b.csv"),
    ] {
        pairs.push((d.join(a), d.join(b)));
    }
    for (a, b) in &pairs {
        if std::fs::read(a).map_err(e)? != std::fs::read(b).map_err(e)? {
            differing.push(a.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    Ok(outcome(
        differing.is_empty(),
        format!(
            "{} file pairs compared; differing: {}",
            pairs.len(),
            if differing.is_empty() {
                "none".into()
            } else {
                differing.join(", ")
            }
        ),
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("rotation suite", rotation_suite),
        ("gradient checks", gradient_checks),
        ("accounting", accounting),
        ("end-to-end LOPO", end_to_end_lopo),
        ("overfit sanity", overfit),
        ("metric oracles", metric_oracles),
        ("cleaning oracle", cleaning_oracle),
        ("protocol correctness", protocol_correctness),
        ("latency", latency),
        ("determinism", determinism),
    ];
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let (pass, detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(msg) => (false, format!("error: {msg}")),
        };
        failed += usize::from(!pass);
        println!(
            "criterion {:2} {name}: {} | {detail}",
            i + 1,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    println!("acceptance: {failed} criteria failing");
    if failed > 0 && std::env::var("VERSAPANTS_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

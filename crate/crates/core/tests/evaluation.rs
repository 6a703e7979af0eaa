use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use versapants::evaluation::*;
use versapants::kinematics::{LowerBodyPositions, LowerBodyRotations};
use versapants::models::{ModelConfig, OUTPUT_DIM};
use versapants::rotations::{matrix_to_rot6d, random_rotation, rot_z, RotMatrix, Vec3};
use versapants::signal::{compute_minmax, prepare_session, LoadedSession, ProcessedSession};
use versapants::simulator::{simulate_session, standard_schedule, ArtifactConfig, SubjectParams};
use versapants::tensor::{Activation, LayerSpec, ModelGraph};
use versapants::training::TrainConfig;

fn rand_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
    Vec3::new(
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
    )
}

fn rand_positions(rng: &mut ChaCha8Rng, n: usize) -> Vec<LowerBodyPositions> {
    (0..n)
        .map(|_| LowerBodyPositions::from_array(std::array::from_fn(|_| rand_vec(rng, 1.0))))
        .collect()
}

fn rand_rotations(rng: &mut ChaCha8Rng, n: usize) -> Vec<LowerBodyRotations> {
    (0..n)
        .map(|_| LowerBodyRotations::from_array(std::array::from_fn(|_| random_rotation(rng))))
        .collect()
}

/// Angle of the relative rotation from its quaternion.
fn quat_angle(a: &RotMatrix, b: &RotMatrix) -> f64 {
    let qa = a.to_quaternion();
    let qb = b.to_quaternion();
    let d = qa.inverse() * qb;
    let c = d.coords;
    2.0 * (c.x * c.x + c.y * c.y + c.z * c.z).sqrt().atan2(c.w.abs())
}

#[test]
fn mpjae_examples_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gt = rand_rotations(&mut rng, 50);
    assert_eq!(mpjae(&gt, &gt).unwrap().mean, 0.0);

    let turned: Vec<_> = gt
        .iter()
        .map(|q| {
            LowerBodyRotations::from_array(
                q.to_array()
                    .map(|r| RotMatrix(r.0 * rot_z(std::f64::consts::FRAC_PI_2).0)),
            )
        })
        .collect();
    let m = mpjae(&turned, &gt).unwrap();
    for v in m.per_joint {
        assert!((v - 90.0).abs() < 1e-9, "{v}");
    }

    let pred = rand_rotations(&mut rng, 50);
    let m = mpjae(&pred, &gt).unwrap();
    for j in 0..4 {
        let mut sum = 0.0;
        for (p, g) in pred.iter().zip(&gt) {
            sum += quat_angle(&p.to_array()[j], &g.to_array()[j]);
        }
        let oracle = (sum / 50.0).to_degrees();
        assert!((m.per_joint[j] - oracle).abs() < 1e-9);
    }
    let avg = m.per_joint.iter().sum::<f64>() / 4.0;
    assert!((m.mean - avg).abs() < 1e-12);
    assert!(mpjae(&pred[..3], &gt).is_err());
}

#[test]
fn mpjpe_examples_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gt = rand_positions(&mut rng, 40);
    assert_eq!(mpjpe(&gt, &gt).unwrap().mean, 0.0);

    let shifted: Vec<_> = gt
        .iter()
        .map(|p| LowerBodyPositions::from_array(p.to_array().map(|v| v + Vec3::new(0.01, 0.0, 0.0))))
        .collect();
    let m = mpjpe(&shifted, &gt).unwrap();
    assert!((m.mean - 1.0).abs() < 1e-9);

    let pred = rand_positions(&mut rng, 40);
    let m = mpjpe(&pred, &gt).unwrap();
    for j in 0..4 {
        let mut sum = 0.0;
        for t in 0..40 {
            let (a, b) = (pred[t].to_array()[j], gt[t].to_array()[j]);
            sum += ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt();
        }
        assert!((m.per_joint[j] - 100.0 * sum / 40.0).abs() < 1e-9);
    }
    assert!(mpjpe(&pred, &gt[1..]).is_err());
    assert!(mpjpe(&[], &[]).is_err());
}

/// Plain-loop jerk oracle: mean over frames per joint, then over joints.
fn jitter_oracle(p: &[LowerBodyPositions], dt: f64) -> f64 {
    let mut total = 0.0;
    for j in 0..4 {
        let mut s = 0.0;
        for t in 3..p.len() {
            let v = |k: usize| p[k].to_array()[j];
            let d = v(t) - 3.0 * v(t - 1) + 3.0 * v(t - 2) - v(t - 3);
            s += (d.x * d.x + d.y * d.y + d.z * d.z).sqrt() / dt.powi(3);
        }
        total += s / (p.len() - 3) as f64;
    }
    total / 4.0
}

fn along_x(f: impl Fn(usize) -> f64, n: usize) -> Vec<LowerBodyPositions> {
    (0..n)
        .map(|i| LowerBodyPositions::from_array([Vec3::new(f(i), 0.0, 0.0); 4]))
        .collect()
}

#[test]
fn jitter_examples() {
    let dt = FRAME_DT;
    let constant = along_x(|_| 0.3, 10);
    assert_eq!(jitter(&constant, dt).unwrap().mean, 0.0);

    // p(t) = a·t² with a·dt² a power of two keeps every sample exact.
    let quad = along_x(|i| (i * i) as f64 / 1024.0, 30);
    assert_eq!(jitter(&quad, dt).unwrap().mean, 0.0);

    let c = 0.7;
    let cubic = along_x(|i| c * (i as f64 * dt).powi(3), 30);
    let m = jitter(&cubic, dt).unwrap();
    assert!((m.mean - 6.0 * c).abs() < 1e-9 * 6.0 * c, "{}", m.mean);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = rand_positions(&mut rng, 25);
    let m = jitter(&p, dt).unwrap();
    let oracle = jitter_oracle(&p, dt);
    assert!((m.mean - oracle).abs() <= 1e-9 * oracle);

    assert!(jitter(&p[..3], dt).is_err());
}

#[test]
fn jitter_timestamps_must_be_uniform() {
    let p = along_x(|i| i as f64, 8);
    let even: Vec<i64> = (0..8).map(|i| i * 33_333).collect();
    assert!(jitter_timed(&p, &even).is_ok());
    let mut uneven = even.clone();
    uneven[4] += 5_000;
    assert!(jitter_timed(&p, &uneven).is_err());
}

proptest! {
    #[test]
    fn jitter_ignores_added_quadratics(seed in 0u64..1000, a in -5.0..5.0f64, b in -5.0..5.0f64, c in -5.0..5.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = rand_positions(&mut rng, 12);
        let q: Vec<_> = p
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let t = i as f64 * FRAME_DT;
                let add = Vec3::new(a * t * t, b * t + c, a + b * t * t);
                LowerBodyPositions::from_array(x.to_array().map(|v| v + add))
            })
            .collect();
        let base = jitter(&p, FRAME_DT).unwrap();
        let moved = jitter(&q, FRAME_DT).unwrap();
        for j in 0..4 {
            prop_assert!((base.per_joint[j] - moved.per_joint[j]).abs() <= 1e-6 * base.per_joint[j]);
        }
    }

    #[test]
    fn mpjpe_scales_linearly(seed in 0u64..1000, s in 0.1..10.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = rand_positions(&mut rng, 10);
        let gt = rand_positions(&mut rng, 10);
        let scale = |v: &[LowerBodyPositions]| -> Vec<_> {
            v.iter().map(|p| LowerBodyPositions::from_array(p.to_array().map(|x| x * s))).collect()
        };
        let base = mpjpe(&pred, &gt).unwrap().mean;
        let scaled = mpjpe(&scale(&pred), &scale(&gt)).unwrap().mean;
        prop_assert!((scaled - s * base).abs() <= 1e-9 * s * base);
    }
}

fn targets_of(poses: &[LowerBodyRotations]) -> Vec<[f64; OUTPUT_DIM]> {
    poses
        .iter()
        .map(|q| {
            let mut t = [0.0; OUTPUT_DIM];
            for (j, r) in q.to_array().iter().enumerate() {
                t[6 * j..6 * j + 6].copy_from_slice(&matrix_to_rot6d(r).0);
            }
            t
        })
        .collect()
}

#[test]
fn mean_pose_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pose = rand_rotations(&mut rng, 1)[0];
    let same = mean_pose_baseline(&targets_of(&[pose; 5])).unwrap();
    for (a, b) in same.iter().zip(pose.to_array()) {
        assert!((a.0 - b.0).abs().max() < 1e-12);
    }

    let pm = [0.8, -0.8].map(|a| LowerBodyRotations::from_array([rot_z(a); 4]));
    for r in mean_pose_baseline(&targets_of(&pm)).unwrap() {
        assert!((r.0 - RotMatrix::identity().0).abs().max() < 1e-12);
    }
    assert!(mean_pose_baseline(&[]).is_err());
}

#[test]
fn mean_pose_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let poses: Vec<_> = (0..30)
        .map(|_| {
            let r = std::array::from_fn(|_| {
                let v = rand_vec(&mut rng, 0.9);
                versapants::rotations::axis_angle_to_matrix(&versapants::rotations::AxisAngle(v))
            });
            LowerBodyRotations::from_array(r)
        })
        .collect();
    let got = mean_pose_baseline(&targets_of(&poses)).unwrap();
    for j in 0..4 {
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        for q in &poses {
            let m = q.to_array()[j].0;
            for i in 0..3 {
                a[i] += m[(i, 0)] / 30.0;
                b[i] += m[(i, 1)] / 30.0;
            }
        }
        let norm = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let b1 = a.map(|x| x / norm(a));
        let d = b1[0] * b[0] + b1[1] * b[1] + b1[2] * b[2];
        let u = [b[0] - d * b1[0], b[1] - d * b1[1], b[2] - d * b1[2]];
        let b2 = u.map(|x| x / norm(u));
        let b3 = [
            b1[1] * b2[2] - b1[2] * b2[1],
            b1[2] * b2[0] - b1[0] * b2[2],
            b1[0] * b2[1] - b1[1] * b2[0],
        ];
        for i in 0..3 {
            for (k, col) in [b1, b2, b3].iter().enumerate() {
                assert!((got[j].0[(i, k)] - col[i]).abs() < 1e-9);
            }
        }
    }
}

struct FakeSession {
    participant: String,
    activities: Vec<(u32, std::ops::Range<usize>)>,
}

impl FoldSource for FakeSession {
    fn participant(&self) -> &str {
        &self.participant
    }

    fn activities(&self) -> Vec<(u32, std::ops::Range<usize>)> {
        self.activities.clone()
    }
}

fn fake_dataset(subjects: usize, movements: &[u32]) -> Vec<FakeSession> {
    (0..subjects)
        .map(|i| FakeSession {
            participant: format!("P{:02}", i + 1),
            activities: movements
                .iter()
                .enumerate()
                .map(|(k, &m)| (m, 300 + k * 1200..1200 + k * 1200))
                .collect(),
        })
        .collect()
}

#[test]
fn fold_counts_and_partition() {
    let data = fake_dataset(11, &[1, 2, 4, 5, 15]);
    let lopo = make_folds(&data, Protocol::Lopo).unwrap();
    assert_eq!(lopo.len(), 11);
    let mut seen = vec![0; data.len()];
    for f in &lopo {
        for &t in &f.test_sessions {
            seen[t] += 1;
            assert!(!f.train_sessions.contains(&t));
        }
    }
    assert!(seen.iter().all(|&c| c == 1));

    let loeo = make_folds(&data, Protocol::Loeo).unwrap();
    assert_eq!(loeo.len(), 5);
    let held: Vec<_> = loeo
        .iter()
        .map(|f| match f.held_out {
            HeldOut::Movement(m) => m,
            _ => panic!("LOEO fold holds out a participant"),
        })
        .collect();
    assert_eq!(held, vec![1, 2, 4, 5, 15]);

    let all16: Vec<u32> = (1..=16).collect();
    assert_eq!(make_folds(&fake_dataset(2, &all16), Protocol::Loeo).unwrap().len(), 16);
    assert!(make_folds(&fake_dataset(1, &all16), Protocol::Lopo).is_err());
    assert!(make_folds(&fake_dataset(3, &[4]), Protocol::Loeo).is_err());
}

fn simulated(subjects: u64, movements: &[u32]) -> Vec<LoadedSession> {
    (0..subjects)
        .map(|i| {
            let subj = SubjectParams::sample(format!("P{:02}", i + 1), 40 + i);
            let (sensor, gt) =
                simulate_session(&subj, &standard_schedule(movements), &ArtifactConfig::default(), 90 + i).unwrap();
            LoadedSession {
                dir: Default::default(),
                sensor,
                gt: Some(gt),
            }
        })
        .collect()
}

fn processed(raw: &[LoadedSession]) -> Vec<ProcessedSession> {
    let stats = compute_minmax(raw.iter().map(|l| &l.sensor)).unwrap();
    raw.iter()
        .map(|l| prepare_session(&l.sensor, l.gt.as_ref(), &stats).unwrap())
        .collect()
}

#[test]
fn simulated_folds_are_leak_free() {
    let raw = simulated(3, &[1, 4, 5]);
    let sessions = processed(&raw);
    for protocol in [Protocol::Lopo, Protocol::Loeo] {
        let folds = make_folds(&sessions, protocol).unwrap();
        assert_eq!(folds.len(), 3);
        assert_eq!(plan_folds(&raw, protocol).unwrap(), folds);
        for f in &folds {
            let (train, test) = fold_windows(&sessions, f, 120, 5, 1).unwrap();
            assert!(!train.is_empty() && !test.is_empty());
            assert!(check_leakage(&sessions, f, &train, &test, 120));
            // Any test window moved into training must trip the checker.
            let mut leaky = train.clone();
            leaky.push(test[0]);
            assert!(!check_leakage(&sessions, f, &leaky, &test, 120));
        }
    }
}

#[test]
fn fold_minmax_skips_held_out_frames() {
    let raw = simulated(3, &[1, 4]);
    let sensors: Vec<_> = raw.iter().map(|l| &l.sensor).collect();
    let acts = vec![Vec::new(); 3];
    let folds = plan_folds(&raw, Protocol::Lopo).unwrap();
    let stats = fold_minmax(&sensors, &folds[0], &acts).unwrap();
    let others = compute_minmax(sensors[1..].iter().copied()).unwrap();
    assert_eq!(stats, others);
}

fn quick_eval() -> EvalConfig {
    EvalConfig {
        model: ModelConfig {
            window_len: 40,
            filters: [8, 16, 16],
            d_model: 32,
            layers: 1,
            ffn_dim: 64,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs: 2,
            stride: 10,
            seed: 3,
            ..TrainConfig::default()
        },
        test_stride: 1,
        global_minmax: false,
    }
}

#[test]
fn fold_run_reports_model_and_baseline() {
    let raw = simulated(3, &[4]);
    let cfg = quick_eval();
    let a = run_protocol(&raw, Protocol::Lopo, &cfg, None, 2).unwrap();
    let b = run_protocol(&raw, Protocol::Lopo, &cfg, None, 1).unwrap();
    assert_eq!(a.len(), 3);
    for (x, y) in a.iter().zip(&b) {
        assert!(x.leakage_free);
        assert_eq!(x.model, y.model);
        assert_eq!(x.baseline.predictor, "mean_pose");
        assert_eq!(x.model.n_windows, x.baseline.n_windows);
        assert!(x.model.jitter.is_some());
        assert_eq!(x.history.len(), cfg.train.epochs + 1);
    }
}

#[test]
fn ablation_covers_every_pair() {
    let raw = simulated(3, &[4]);
    let mut cfg = quick_eval();
    cfg.train.epochs = 1;
    let names = ["FrontHip", "SideHip", "Groin", "KneeUp", "KneeDown", "Ankle"];
    let arms = ablation_run(&raw, &names, &cfg, 1).unwrap();
    assert_eq!(arms.len(), 7);
    assert_eq!(arms[0].0, "none");
    for ((name, folds), expect) in arms[1..].iter().zip(names) {
        assert_eq!(name, expect);
        assert!(folds.iter().all(|f| f.model.ablation_mask == expect));
    }
    assert!(ablation_run(&raw, &["Elbow"], &cfg, 1).is_err());
    assert_eq!(channel_pair_index("ankle").unwrap(), 5);
}

#[test]
fn bench_single_iteration_has_zero_std() {
    let g = ModelGraph::<f32>::new(
        vec![4],
        vec![(
            "fc".into(),
            LayerSpec::Dense {
                in_features: 4,
                out_features: 2,
                activation: Activation::Relu,
            },
        )],
        0,
    )
    .unwrap();
    let one = bench_latency(&g, 1).unwrap();
    assert_eq!(one.std_ms, 0.0);
    assert_eq!(one.iterations, 1);
    assert!(one.windows_per_s > 0.0);
    assert!(bench_latency(&g, 0).is_err());
}

fn report(fold_id: usize, mean_shift: f64, jitter: bool) -> MetricsReport {
    let jm = |base: f64| JointMetric {
        per_joint: [base, base + 1.0, base + 2.0, base + 3.0],
        mean: base + 1.5,
    };
    MetricsReport {
        fold_id,
        protocol: Protocol::Lopo,
        held_out: format!("P0{fold_id}"),
        ablation_mask: "none".into(),
        predictor: "versapants".into(),
        mpjae_deg: jm(10.0 + mean_shift),
        mpjpe_cm: jm(5.0 + mean_shift),
        jitter: jitter.then(|| jm(0.5)),
        n_windows: 7,
    }
}

#[test]
fn reports_round_trip_to_files() {
    let dir = tempfile::tempdir().unwrap();
    let reports = [report(0, 0.0, true), report(1, 2.0, false)];
    let csv_path = dir.path().join("r.csv");
    write_reports_csv(&csv_path, &reports).unwrap();
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "fold_id,protocol,ablation_mask,joint,mpjpe_cm,mpjae_deg,jitter,n_windows"
    );
    assert_eq!(lines.len(), 1 + 2 * 7);
    assert_eq!(lines[1], "0,LOPO,none,left_hip,,10.000000,,7");
    assert_eq!(lines[5], "0,LOPO,none,left_ankle,7.000000,,2.500000,7");
    assert_eq!(lines[7], "0,LOPO,none,mean,6.500000,11.500000,2.000000,7");
    assert_eq!(lines[14], "1,LOPO,none,mean,8.500000,13.500000,,7");

    let summary = summarize(&reports);
    assert_eq!(summary.len(), 1);
    let s = &summary[0];
    assert_eq!(s.folds, 2);
    let mpjae = s.mpjae_deg.as_ref().unwrap();
    assert!((mpjae.mean - 12.5).abs() < 1e-12);
    assert!((mpjae.std - 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(s.jitter.as_ref().unwrap().std, 0.0);

    let json_path = dir.path().join("s.json");
    write_summary_json(&json_path, &reports, 42).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
    assert_eq!(v["seed"], 42);
    assert_eq!(v["folds"].as_array().unwrap().len(), 2);
}

#[test]
fn protocol_names_parse() {
    assert_eq!("lopo".parse::<Protocol>().unwrap(), Protocol::Lopo);
    assert_eq!("LOEO".parse::<Protocol>().unwrap(), Protocol::Loeo);
    assert!("kfold".parse::<Protocol>().is_err());
    assert_eq!(Protocol::Loeo.to_string(), "LOEO");
}

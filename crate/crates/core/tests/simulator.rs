use proptest::prelude::*;
use versapants::kinematics::forward_kinematics;
use versapants::rotations::{axis_angle_to_matrix, AxisAngle};
use versapants::signal::*;
use versapants::simulator::*;

fn subject() -> SubjectParams {
    SubjectParams::sample("P01", 17)
}

fn still(duration_s: f64) -> Trajectory {
    Trajectory {
        rate_hz: MOTION_RATE_HZ,
        frames: vec![JointAngles::default(); (duration_s * MOTION_RATE_HZ) as usize + 1],
    }
}

#[test]
fn motion_examples() {
    let knee = gen_motion(4, 30.0).unwrap();
    let k: Vec<f64> = knee.frames.iter().flat_map(|f| f.knee).collect();
    let (lo, hi) = k.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    assert!(lo >= 0.0 && lo < 1e-12);
    assert!(hi <= 1.6 && hi > 1.6 - 1e-6);

    for id in IMPLEMENTED_MOVEMENTS {
        assert_eq!(angles_at(id, 0.0, 30.0).unwrap(), JointAngles::default());
        assert!(movement_name(id).is_some());
    }
    assert!(gen_motion(9, 30.0).is_err());
    assert!(gen_motion(4, 0.0).is_err());

    let walk = gen_motion(15, 20.0).unwrap();
    let peak = walk.frames.iter().map(|f| f.hip_flex[0].abs()).fold(0.0, f64::max);
    assert!((peak - 0.5).abs() < 1e-3);
    for f in &walk.frames {
        assert!((f.hip_flex[0] + f.hip_flex[1]).abs() < 1e-12);
    }
}

#[test]
fn still_trajectory_gives_resting_codes() {
    let s = sensor_model(&still(10.0), &subject(), &[], &ArtifactConfig::none(), 1).unwrap();
    for t in 0..s.len() {
        for (c, &code) in s.frame(t).iter().enumerate() {
            assert_eq!(code as f64, base_code(c));
        }
    }
}

#[test]
fn knee_patch_ratio_follows_fit() {
    let subj = subject();
    let traj = gen_motion(4, 30.0).unwrap();
    let s = sensor_model(&traj, &subj, &[], &ArtifactConfig::none(), 1).unwrap();
    let dev = |c: usize| {
        (0..s.len())
            .map(|t| (s.frame(t)[c] as f64 - base_code(c)).abs())
            .fold(0.0, f64::max)
            / subj.gains[c]
    };
    for leg in 0..2 {
        let o = leg * CHANNELS_PER_LEG;
        let ratio = dev(o + 3) / dev(o + 4);
        let expected = subj.knee_fit / (1.0 - subj.knee_fit);
        assert!((ratio - expected).abs() < 1e-5 * expected, "{ratio} vs {expected}");
    }
}

#[test]
fn codes_stay_in_band_without_dropout() {
    let movements: Vec<u32> = IMPLEMENTED_MOVEMENTS.to_vec();
    let artifacts = ArtifactConfig {
        dropout_prob: 0.0,
        ..ArtifactConfig::default()
    };
    let (s, _) = simulate_session(&subject(), &standard_schedule(&movements), &artifacts, 5).unwrap();
    for t in 0..s.len() {
        for (c, &code) in s.frame(t).iter().enumerate() {
            let c0 = base_code(c);
            assert!(
                (c0 - 3e6..=c0 + 6e6).contains(&(code as f64)),
                "ch {c} frame {t}: {code}"
            );
        }
    }
}

#[test]
fn session_duration_and_rates() {
    let schedule = standard_schedule(&[1, 2, 4, 5]);
    let (s, gt) = simulate_session(&subject(), &schedule, &ArtifactConfig::default(), 9).unwrap();
    let span = *s.timestamps.last().unwrap() as f64 * 1e-6;
    assert!((span - 165.0).abs() < 0.1, "{span}");
    assert!(s.timestamps.windows(2).all(|w| w[1] > w[0]));
    assert_ne!(s.timestamps[1..10], gt.timestamps[1..10]);
    let gt_dt = (gt.timestamps[100] - gt.timestamps[0]) as f64 / 100.0;
    assert!((gt_dt - 1e6 / GT_RATE_HZ).abs() < 1.0);
    assert!(simulate_session(&subject(), &[], &ArtifactConfig::default(), 9).is_err());
}

#[test]
fn same_seed_same_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let art = ArtifactConfig::default();
    gen_dataset(a.path(), 2, &[4, 15], &art, 77).unwrap();
    gen_dataset(b.path(), 2, &[4, 15], &art, 77).unwrap();
    for rel in [
        "manifest.json",
        "P01/meta.json",
        "P01/sensor.csv",
        "P02/gt.csv",
        "P02/sensor.csv",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(rel)).unwrap(),
            std::fs::read(b.path().join(rel)).unwrap(),
            "{rel}"
        );
    }
}

#[test]
fn dataset_of_eleven() {
    let dir = tempfile::tempdir().unwrap();
    let dirs = gen_dataset(dir.path(), 11, &IMPLEMENTED_MOVEMENTS, &ArtifactConfig::default(), 3).unwrap();
    assert_eq!(dirs.len(), 11);
    assert_eq!(list_sessions(dir.path()).unwrap(), dirs);
    let metas: Vec<SessionMeta> = dirs.iter().map(|d| read_meta(&d.join("meta.json")).unwrap()).collect();
    let subjects: Vec<SubjectParams> = metas
        .iter()
        .map(|m| serde_json::from_value(m.subject.clone().unwrap()).unwrap())
        .collect();
    for (i, a) in subjects.iter().enumerate() {
        a.validate().unwrap();
        for b in &subjects[i + 1..] {
            assert_ne!(a.knee_fit, b.knee_fit);
            assert_ne!(a.tibia_length_m, b.tibia_length_m);
        }
    }
    assert!(gen_dataset(dir.path(), 0, &[4], &ArtifactConfig::default(), 3).is_err());
    assert!(gen_dataset(dir.path(), 1, &[6], &ArtifactConfig::default(), 3).is_err());
}

#[test]
fn ground_truth_matches_generating_geometry() {
    let subj = subject();
    let template = subj.template();
    let schedule = standard_schedule(&[2, 14]);
    let traj = session_trajectory(&schedule).unwrap();
    let gt = ground_truth(&traj).unwrap();
    for (j, pose) in gt.poses.iter().enumerate().step_by(7) {
        let angles = traj.at(j as f64 / GT_RATE_HZ);
        let rots =
            versapants::kinematics::LowerBodyRotations::from_array(pose.map(|v| axis_angle_to_matrix(&AxisAngle(v))));
        let p = forward_kinematics(&template, &rots);
        let (dk, da) = leg_distances(&template, &angles);
        assert!(((p.left_knee - p.right_knee).norm().max(0.05) - dk).abs() < 1e-9);
        assert!(((p.left_ankle - p.right_ankle).norm().max(0.05) - da).abs() < 1e-9);
    }
}

#[test]
fn clean_sessions_keep_every_window() {
    let (raw, gt) = simulate_session(&subject(), &standard_schedule(&[1, 13]), &ArtifactConfig::none(), 4).unwrap();
    let st = compute_minmax([&raw]).unwrap();
    let p = prepare_session(&raw, Some(&gt), &st).unwrap();
    let split = extract_windows(&p.frame_ok, 120, 1).unwrap();
    assert!(split.rejected.is_empty());
    assert_eq!(split.kept.len(), window_count(p.len(), 120, 1));

    let dead = ArtifactConfig {
        channel_dropout: vec![(3, 1.0)],
        ..ArtifactConfig::none()
    };
    let (raw, gt) = simulate_session(&subject(), &standard_schedule(&[1, 13]), &dead, 4).unwrap();
    let p = prepare_session(&raw, Some(&gt), &st).unwrap();
    let split = extract_windows(&p.frame_ok, 120, 1).unwrap();
    assert!(split.kept.is_empty());
    assert_eq!(split.rejected.len(), window_count(p.len(), 120, 1));
}

#[test]
fn default_artifacts_satisfy_count_identity() {
    for seed in 0..3 {
        let (raw, gt) = simulate_session(
            &SubjectParams::sample("P01", seed),
            &standard_schedule(&[4, 5, 15]),
            &ArtifactConfig::default(),
            seed,
        )
        .unwrap();
        let st = compute_minmax([&raw]).unwrap();
        let p = prepare_session(&raw, Some(&gt), &st).unwrap();
        for stride in [1, 5] {
            let split = extract_windows(&p.frame_ok, 120, stride).unwrap();
            assert_eq!(
                split.kept.len() + split.rejected.len(),
                window_count(p.len(), 120, stride)
            );
        }
    }
}

#[test]
fn invalid_settings_rejected() {
    assert!(ArtifactConfig {
        noise_sigma: -1.0,
        ..ArtifactConfig::default()
    }
    .validate()
    .is_err());
    assert!(ArtifactConfig {
        dropout_prob: 1.5,
        ..ArtifactConfig::default()
    }
    .validate()
    .is_err());
    let mut s = subject();
    s.tibia_length_m = 0.5;
    assert!(s.validate().is_err());
    assert_eq!(SubjectParams::sample("P01", 17), subject());
}

proptest! {
    #[test]
    fn knee_response_is_monotone(a in 0.0..2.0f64, b in 0.0..2.0f64) {
        prop_assume!((a - b).abs() > 1e-6);
        let subj = subject();
        let at = |k: f64| {
            let angles = JointAngles { knee: [k, 0.0], ..JointAngles::default() };
            let r = responses(&subj, &angles);
            (r[3] + r[4]).abs()
        };
        prop_assert_eq!(a < b, at(a) < at(b));
    }
}

use proptest::prelude::*;
use versapants::tensor::{grad_check, Activation, LayerSpec, Mode, ModelGraph, Tensor};

fn all_kinds() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d {
            in_channels: 2,
            out_channels: 4,
            kernel: [3, 3],
            activation: Activation::Linear,
        },
        LayerSpec::Conv2d {
            in_channels: 3,
            out_channels: 2,
            kernel: [3, 1],
            activation: Activation::Relu,
        },
        LayerSpec::AvgPool2d,
        LayerSpec::BatchNorm { channels: 3 },
        LayerSpec::Dropout { rate: 0.3 },
        LayerSpec::Reshape { shape: vec![2, 6] },
        LayerSpec::PositionalAdd { len: 4, dim: 3 },
        LayerSpec::EncoderLayer {
            d_model: 8,
            heads: 2,
            ffn_dim: 12,
        },
        LayerSpec::TemporalGap,
        LayerSpec::Dense {
            in_features: 5,
            out_features: 4,
            activation: Activation::Linear,
        },
        LayerSpec::Dense {
            in_features: 4,
            out_features: 3,
            activation: Activation::Relu,
        },
        LayerSpec::Conv1d {
            in_channels: 3,
            out_channels: 5,
            kernel: 3,
            activation: Activation::Relu,
        },
        LayerSpec::MaxPool1d,
        LayerSpec::LstmBidirectional {
            input_size: 3,
            hidden: 4,
        },
    ]
}

#[test]
fn every_layer_kind_passes_finite_difference_check() {
    for spec in all_kinds() {
        for seed in [1, 2] {
            let err = grad_check(&spec, seed).unwrap();
            assert!(err <= 1e-4, "{spec:?} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn named_grad_check_examples() {
    let conv = LayerSpec::Conv2d {
        in_channels: 2,
        out_channels: 4,
        kernel: [3, 3],
        activation: Activation::Linear,
    };
    assert!(grad_check(&conv, 7).unwrap() <= 1e-4);
    let enc = LayerSpec::EncoderLayer {
        d_model: 8,
        heads: 2,
        ffn_dim: 16,
    };
    assert!(grad_check(&enc, 7).unwrap() <= 1e-4);
    let gap = grad_check(&LayerSpec::TemporalGap, 7).unwrap();
    assert!(gap <= 1e-10, "temporal_gap error {gap:e}");
}

fn dense_graph(i: usize, o: usize) -> ModelGraph<f64> {
    ModelGraph::new(
        vec![i],
        vec![(
            "fc".into(),
            LayerSpec::Dense {
                in_features: i,
                out_features: o,
                activation: Activation::Linear,
            },
        )],
        0,
    )
    .unwrap()
}

#[test]
fn dense_weight_gradient_is_outer_product() {
    let mut g = dense_graph(3, 2);
    let x = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
    g.forward(&x, Mode::Train).unwrap();
    let up = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
    let grads = g.backward(&up).unwrap();
    let gw = grads.get("fc.weight").unwrap();
    // W is stored [in, out]; dW[i][j] = x_i · u_j.
    assert_eq!(gw.data(), &[0.0, 0.5, 0.0, -1.0, 0.0, 2.0]);
    assert_eq!(grads.get("fc.bias").unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let spec = LayerSpec::EncoderLayer {
        d_model: 8,
        heads: 2,
        ffn_dim: 8,
    };
    let mut g = ModelGraph::<f64>::new(vec![4, 8], vec![("enc".into(), spec)], 3).unwrap();
    let x = Tensor::new(vec![2, 4, 8], (0..64).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
    let y = g.forward(&x, Mode::Train).unwrap();
    let grads = g.backward(&Tensor::zeros(y.shape().to_vec())).unwrap();
    for t in grads.params.iter().chain([&grads.input]) {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn backward_requires_train_forward() {
    let mut g = dense_graph(2, 2);
    let up = Tensor::zeros(vec![1, 2]);
    assert!(matches!(g.backward(&up), Err(versapants::Error::BackwardBeforeForward)));
    let x = Tensor::zeros(vec![1, 2]);
    g.forward(&x, Mode::Infer).unwrap();
    assert!(g.backward(&up).is_err());
    g.forward(&x, Mode::Train).unwrap();
    assert!(g.backward(&up).is_ok());
    // Activations are consumed by the first backward.
    assert!(g.backward(&up).is_err());
}

#[test]
fn shape_mismatch_is_reported() {
    let g = dense_graph(3, 2);
    assert!(g.infer(&Tensor::zeros(vec![1, 4])).is_err());
    assert!(ModelGraph::<f32>::new(
        vec![5, 3],
        vec![(
            "c".into(),
            LayerSpec::Conv1d {
                in_channels: 4,
                out_channels: 2,
                kernel: 3,
                activation: Activation::Linear
            }
        )],
        0
    )
    .is_err());
}

#[test]
fn non_finite_activation_trips_error() {
    let mut g = dense_graph(2, 1);
    g.param_mut("fc.weight").unwrap().value.data_mut()[0] = f64::INFINITY;
    let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
    assert!(matches!(g.infer(&x), Err(versapants::Error::NonFinite(_))));
}

#[test]
fn dense_accounting() {
    let g = dense_graph(64, 24);
    assert_eq!(g.count_params(), 1560);
    assert_eq!(g.count_flops(), 3096);
}

#[test]
fn conv_param_count() {
    let g = ModelGraph::<f32>::new(
        vec![120, 6, 2],
        vec![(
            "conv".into(),
            LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 16,
                kernel: [3, 3],
                activation: Activation::Linear,
            },
        )],
        0,
    )
    .unwrap();
    assert_eq!(g.count_params(), 304);
    assert_eq!(g.count_flops(), 2 * 120 * 6 * 16 * 18 + 120 * 6 * 16);
}

fn brute_avgpool(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::new();
    for i in 0..ho {
        for j in 0..wo {
            for ch in 0..c {
                let mut vals = Vec::new();
                for r in [2 * i, 2 * i + 1] {
                    for q in [2 * j, 2 * j + 1] {
                        if r < h && q < w {
                            vals.push(x[(r * w + q) * c + ch]);
                        }
                    }
                }
                out.push(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
    }
    out
}

#[test]
fn avgpool_matches_brute_force_for_all_small_extents() {
    for h in 1..=16 {
        for w in 1..=16 {
            let c = 2;
            let g = ModelGraph::<f64>::new(vec![h, w, c], vec![("p".into(), LayerSpec::AvgPool2d)], 0).unwrap();
            assert_eq!(g.output_shape(), &[h.div_ceil(2), w.div_ceil(2), c]);
            let x: Vec<f64> = (0..h * w * c).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
            let y = g.infer(&Tensor::new(vec![1, h, w, c], x.clone()).unwrap()).unwrap();
            let expected = brute_avgpool(&x, h, w, c);
            for (a, b) in y.data().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12, "h={h} w={w}");
            }
        }
    }
}

#[test]
fn batchnorm_modes_use_batch_and_running_statistics() {
    let mut g = ModelGraph::<f64>::new(vec![2], vec![("bn".into(), LayerSpec::BatchNorm { channels: 2 })], 0).unwrap();
    let x = Tensor::new(vec![4, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]).unwrap();
    let y = g.forward(&x, Mode::Train).unwrap();
    let mean0: f64 = y.data().iter().step_by(2).sum::<f64>() / 4.0;
    assert!(mean0.abs() < 1e-12);
    // Running stats moved 10% of the way to the batch statistics.
    let rm = g.param("bn.running_mean").unwrap().value.data().to_vec();
    assert!((rm[0] - 0.25).abs() < 1e-12 && (rm[1] - 2.5).abs() < 1e-12);
    let rv = g.param("bn.running_var").unwrap().value.data().to_vec();
    assert!((rv[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    let inf = g.infer(&x).unwrap();
    let expect = (1.0 - 0.25) / (rv[0] + 1e-5).sqrt();
    assert!((inf.data()[0] - expect).abs() < 1e-12);
}

#[test]
fn dropout_only_in_train_mode() {
    let mut g = ModelGraph::<f64>::new(vec![1000], vec![("d".into(), LayerSpec::Dropout { rate: 0.5 })], 0).unwrap();
    let x = Tensor::filled(vec![1, 1000], 1.0);
    assert_eq!(g.infer(&x).unwrap().data(), x.data());
    let y = g.forward(&x, Mode::Train).unwrap();
    let zeros = y.data().iter().filter(|&&v| v == 0.0).count();
    assert!((400..600).contains(&zeros));
    assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn save_load_payload_and_round_trip() {
    let spec = vec![
        (
            "conv".to_string(),
            LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 3,
                kernel: [3, 3],
                activation: Activation::Linear,
            },
        ),
        ("bn".to_string(), LayerSpec::BatchNorm { channels: 3 }),
        ("r".to_string(), LayerSpec::Reshape { shape: vec![4, 6] }),
        ("gap".to_string(), LayerSpec::TemporalGap),
    ];
    let g = ModelGraph::<f32>::new(vec![4, 2, 2], spec.clone(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.vpw");
    g.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let header: usize = 8 + g
        .params()
        .iter()
        .map(|p| 2 + p.name.len() + 1 + 4 * p.value.shape().len())
        .sum::<usize>();
    assert_eq!(bytes.len() - header, 4 * g.count_params());

    let mut h = ModelGraph::<f32>::new(vec![4, 2, 2], spec, 99).unwrap();
    h.load(&path).unwrap();
    let x = Tensor::new(vec![2, 4, 2, 2], (0..32).map(|i| i as f32 * 0.1).collect()).unwrap();
    let a = g.infer(&x).unwrap();
    let b = h.infer(&x).unwrap();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn infer_is_pure(seed in 0u64..1000, vals in proptest::collection::vec(-2.0f32..2.0, 40)) {
        let g = ModelGraph::<f32>::new(
            vec![10, 4],
            vec![
                ("c".into(), LayerSpec::Conv1d { in_channels: 4, out_channels: 6, kernel: 3, activation: Activation::Relu }),
                ("enc".into(), LayerSpec::EncoderLayer { d_model: 6, heads: 2, ffn_dim: 8 }),
                ("gap".into(), LayerSpec::TemporalGap),
            ],
            seed,
        ).unwrap();
        let x = Tensor::new(vec![1, 10, 4], vals).unwrap();
        let a = g.infer(&x).unwrap();
        let b = g.infer(&x).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn maxpool_output_extent_is_ceil_half(l in 1usize..20, c in 1usize..4) {
        let g = ModelGraph::<f32>::new(vec![l, c], vec![("m".into(), LayerSpec::MaxPool1d)], 0).unwrap();
        prop_assert_eq!(g.output_shape(), &[l.div_ceil(2), c][..]);
    }
}

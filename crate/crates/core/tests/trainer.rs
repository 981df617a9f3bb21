use std::fs;

use proptest::prelude::*;
use warpadapt::gradcore::{Shape, Tensor};
use warpadapt::netlib::Param;
use warpadapt::scenegen::{generate_paired_domains, DomainShift, SceneConfig};
use warpadapt::trainer::*;
use warpadapt::Error;

fn small_data(seed: u64, count: usize) -> Datasets {
    let cfg = SceneConfig {
        width: 64,
        height: 32,
        ..SceneConfig::default()
    };
    Datasets::from_samples(
        generate_paired_domains(seed, count, &cfg, &DomainShift::preset("default").unwrap())
            .unwrap(),
    )
}

fn small_cfg(total_iters: usize) -> TrainConfig {
    TrainConfig {
        total_iters,
        batch_size: 1,
        ..TrainConfig::default()
    }
}

fn scalar_param(v: f32) -> Vec<Param> {
    vec![Param {
        name: "w".into(),
        value: Tensor::full(Shape::new(1, 1, 1, 1), v),
    }]
}

#[test]
fn adam_first_step_closed_form() {
    let mut p = scalar_param(1.0);
    let mut st = AdamState::for_params(&p);
    let g = vec![Tensor::full(Shape::new(1, 1, 1, 1), 1.0)];
    adam_update(&mut p, &g, &mut st, 0.1, (0.9, 0.999), 0.0).unwrap();
    let want = 1.0 - 0.1 / (1.0 + ADAM_EPS);
    assert!((p[0].value.data()[0] as f64 - want).abs() < 1e-7);
    assert_eq!(st.step, 1);
}

#[test]
fn zero_gradient_moves_only_through_decay() {
    let zero = vec![Tensor::zeros(Shape::new(1, 1, 1, 1))];
    let mut plain = scalar_param(2.0);
    let mut st = AdamState::for_params(&plain);
    for _ in 0..5 {
        adam_update(&mut plain, &zero, &mut st, 1e-3, (0.9, 0.999), 0.0).unwrap();
    }
    assert_eq!(plain[0].value.data()[0], 2.0);

    let mut decayed = scalar_param(2.0);
    let mut st = AdamState::for_params(&decayed);
    let mut want = 2.0f64;
    for _ in 0..5 {
        adam_update(&mut decayed, &zero, &mut st, 1e-3, (0.9, 0.999), 0.01).unwrap();
        want *= 1.0 - 1e-3 * 0.01;
    }
    assert!((decayed[0].value.data()[0] as f64 - want).abs() < 1e-6);
}

#[test]
fn adam_shape_mismatch_is_shape_error() {
    let mut p = scalar_param(1.0);
    let mut st = AdamState::for_params(&p);
    let g = vec![Tensor::zeros(Shape::new(1, 1, 1, 2))];
    assert!(matches!(
        adam_update(&mut p, &g, &mut st, 0.1, (0.9, 0.999), 0.0),
        Err(Error::Shape(_))
    ));
    assert!(matches!(
        adam_update(&mut p, &[], &mut st, 0.1, (0.9, 0.999), 0.0),
        Err(Error::Shape(_))
    ));
}

#[test]
fn schedule_freezes_the_idle_module() {
    let data = small_data(1, 5);
    for k in [1usize, 3, 5] {
        let cfg = TrainConfig {
            k,
            ..small_cfg(2 * k)
        };
        let mut st = TrainState::new(&cfg).unwrap();
        for it in 0..cfg.total_iters as u64 {
            let idx = batch_indices(cfg.seed, 0, it, 1, data.syn_train.len());
            let sb = Batch::from_samples(&[&data.syn_train[idx[0]]]).unwrap();
            let rb = Batch::from_samples(&[&data.real_train[idx[0]]]).unwrap();
            let before = st.nets.fingerprints();
            train_step(&mut st, &cfg, &sb, &rb).unwrap();
            let after = st.nets.fingerprints();
            if it % k as u64 == 0 {
                assert_ne!(before.0, after.0, "k={k} it={it}: translation must move");
                assert_eq!(
                    before.1, after.1,
                    "k={k} it={it}: task nets must stay frozen"
                );
            } else {
                assert_eq!(
                    before.0, after.0,
                    "k={k} it={it}: translation must stay frozen"
                );
                assert_ne!(before.1, after.1, "k={k} it={it}: task nets must move");
            }
            // The extractor never trains.
            assert_eq!(
                st.nets.extractor,
                TrainState::new(&cfg).unwrap().nets.extractor
            );
        }
    }
}

#[test]
fn source_only_never_touches_translation() {
    let data = small_data(2, 5);
    let cfg = TrainConfig {
        mode: TrainMode::SourceOnly,
        ..small_cfg(6)
    };
    let fresh = TrainState::new(&cfg).unwrap();
    let out = run_training(&cfg, &data, None).unwrap();
    assert_eq!(out.state.nets.fingerprints().0, fresh.nets.fingerprints().0);
    assert_ne!(out.state.nets.fingerprints().1, fresh.nets.fingerprints().1);
}

#[test]
fn malformed_batch_is_usage_error() {
    let data = small_data(3, 5);
    let cfg = small_cfg(1);
    let mut st = TrainState::new(&cfg).unwrap();
    let real = Batch::from_samples(&[&data.real_train[0]]).unwrap();
    // Real samples carry no training labels in the synthetic slot.
    let mut unlabeled = Batch::from_samples(&[&data.syn_train[0]]).unwrap();
    unlabeled.disparity = None;
    assert!(matches!(
        train_step(&mut st, &cfg, &unlabeled, &real),
        Err(Error::Usage(_))
    ));
    let two = Batch::from_samples(&[&data.real_train[0], &data.real_train[1]]).unwrap();
    let one = Batch::from_samples(&[&data.syn_train[0]]).unwrap();
    assert!(matches!(
        train_step(&mut st, &cfg, &one, &two),
        Err(Error::Usage(_))
    ));
    assert_eq!(st.iteration, 0);
}

#[test]
fn same_seed_same_losses() {
    let data = small_data(4, 5);
    let cfg = small_cfg(20);
    let a = run_training(&cfg, &data, None).unwrap();
    let b = run_training(&cfg, &data, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.report, b.report);
    let c = run_training(&TrainConfig { seed: 1, ..cfg }, &data, None).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn zero_iterations_logs_one_evaluation() {
    let data = small_data(5, 5);
    let cfg = small_cfg(0);
    let out = run_training(&cfg, &data, None).unwrap();
    assert_eq!(out.state.iteration, 0);
    let body: Vec<&String> = out.log.iter().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body.len(), 1);
    assert!(body[0].starts_with("0\teval.epe_disp="));
}

#[test]
fn log_echoes_config_and_lists_every_term() {
    let data = small_data(6, 5);
    let mut cfg = small_cfg(2);
    cfg.weights.lambda_ms = 0.25;
    let out = run_training(&cfg, &data, None).unwrap();
    assert!(out.log.contains(&"# weights.lambda_ms=0.25".to_string()));
    let translation = out.log.iter().find(|l| l.starts_with("0\t")).unwrap();
    for name in [
        "L_T",
        "adv_a2b",
        "disc_a",
        "cyc",
        "perceptual",
        "cosine",
        "disp_warpx",
        "flow_warpx",
        "corr",
        "ms",
    ] {
        assert!(
            translation.contains(&format!("\t{name}=")),
            "{name} missing from {translation}"
        );
    }
    let task = out.log.iter().find(|l| l.starts_with("1\t")).unwrap();
    for name in ["L_d", "L_f", "disp", "flow", "disp_warpy", "flow_warpy"] {
        assert!(
            task.contains(&format!("\t{name}=")),
            "{name} missing from {task}"
        );
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(7, 5);
    let out = run_training(&small_cfg(3), &data, None).unwrap();
    let p = dir.path().join("a.wck");
    save_checkpoint(&out.state, &p).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back.iteration, out.state.iteration);
    assert_eq!(back.rng, out.state.rng);
    assert_eq!(back.running, out.state.running);
    for net in TRAINABLE {
        assert_eq!(back.nets.get(net), out.state.nets.get(net), "{net}");
        assert_eq!(back.opt.get(net), out.state.opt.get(net), "{net}");
    }
    let q = dir.path().join("b.wck");
    save_checkpoint(&back, &q).unwrap();
    assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
}

#[test]
fn damaged_checkpoints_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let st = TrainState::new(&small_cfg(0)).unwrap();
    let p = dir.path().join("c.wck");
    save_checkpoint(&st, &p).unwrap();
    let good = fs::read(&p).unwrap();

    let mut bad = good.clone();
    bad[..8].copy_from_slice(b"NOTACKPT");
    fs::write(&p, &bad).unwrap();
    assert!(matches!(
        load_checkpoint(&p),
        Err(Error::Format { offset: 0, .. })
    ));

    let mut bad = good.clone();
    bad[8] = 9;
    fs::write(&p, &bad).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Format { .. })));

    fs::write(&p, &good[..good.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Format { .. })));

    let mut long = good.clone();
    long.push(0);
    fs::write(&p, &long).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Format { .. })));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(8, 5);
    let cfg = TrainConfig {
        checkpoint_every: 100,
        ..small_cfg(110)
    };
    let full = run_training(&cfg, &data, Some(dir.path())).unwrap();
    let resumed_dir = dir.path().join("resumed");
    let st = load_checkpoint(&dir.path().join("ckpt_000100.wck")).unwrap();
    let resumed = run_training_from(st, &cfg, &data, Some(&resumed_dir)).unwrap();
    let steps = |log: &[String]| -> Vec<String> {
        log.iter()
            .filter(|l| !l.starts_with('#'))
            .cloned()
            .collect()
    };
    let tail = steps(&full.log)[100..].to_vec();
    assert_eq!(steps(&resumed.log), tail);
    assert_eq!(
        fs::read(dir.path().join("final.wck")).unwrap(),
        fs::read(resumed_dir.join("final.wck")).unwrap()
    );
}

#[test]
fn arch_mismatch_on_resume_is_config_error() {
    let data = small_data(9, 5);
    let st = TrainState::new(&small_cfg(0)).unwrap();
    let mut cfg = small_cfg(1);
    cfg.arch.gen_base = 12;
    assert!(matches!(
        run_training_from(st, &cfg, &data, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        TrainConfig {
            k: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr_disp: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            adam_betas: (1.0, 0.999),
            ..TrainConfig::default()
        },
        TrainConfig {
            gamma: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
}

/// Seeded 200-iteration runs at 64x128 with batch 2: losses stay finite
/// and the supervised terms go down.
#[test]
fn smoke_runs_reduce_supervised_losses() {
    let scene = SceneConfig::default();
    let shift = DomainShift::preset("default").unwrap();
    for seed in 0..3 {
        let samples = generate_paired_domains(10 + seed, 10, &scene, &shift).unwrap();
        let data = Datasets::from_samples(samples);
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let out = run_training(&cfg, &data, None).unwrap();
        let series = |name: &str| -> Vec<f64> {
            out.log
                .iter()
                .filter(|l| !l.starts_with('#'))
                .filter_map(|l| {
                    l.split('\t')
                        .find_map(|f| f.strip_prefix(&format!("{name}=")))
                        .map(|v| v.parse::<f64>().unwrap())
                })
                .collect()
        };
        for name in ["disp", "flow"] {
            let s = series(name);
            assert!(s.iter().all(|v| v.is_finite()));
            let head: f64 = s[..10].iter().sum();
            let tail: f64 = s[s.len() - 10..].iter().sum();
            assert!(tail < head, "seed {seed} {name}: {head} -> {tail}");
        }
        assert!(series("L_T").iter().all(|v| v.is_finite()));
    }
}

proptest! {
    #[test]
    fn every_epoch_visits_each_sample_once(seed in 0u64..1000, n in 1usize..20, bs in 1usize..5) {
        let per_epoch = n.div_ceil(bs) * bs;
        let mut seen = Vec::new();
        for it in 0..(per_epoch / bs) as u64 {
            seen.extend(batch_indices(seed, 0, it, bs, n));
        }
        let mut first: Vec<usize> = seen[..n].to_vec();
        first.sort_unstable();
        prop_assert_eq!(first, (0..n).collect::<Vec<_>>());
    }
}

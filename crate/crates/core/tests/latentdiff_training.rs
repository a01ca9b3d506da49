use conspace::checkpoint::{load_lcm_state, save_lcm_state};
use conspace::latentdiff::{
    build_schedule, diffusion_loss, forward_diffuse, init_two_tower, sample_next, train_lcm, DiffusionItem,
    EmbeddingSequence, LcmState, LcmTrainConfig, LcmTrainer, SamplerConfig, TwoTowerConfig,
};
use conspace::nn::Parameters;
use conspace::numerics::{gaussian_sample, norm, SeededRng};

fn small() -> TwoTowerConfig {
    TwoTowerConfig {
        concept_dim: 16,
        ctx_layers: 2,
        ctx_width: 32,
        ctx_heads: 4,
        ff_mult: 2,
        den_depth: 3,
        den_width: 64,
        time_dim: 16,
        modality_tags: false,
    }
}

fn single_pair() -> (EmbeddingSequence, Vec<f64>) {
    let mut rng = SeededRng::new(1);
    let prefix = EmbeddingSequence::new(gaussian_sample(&mut rng, 3, 16, 0.0, 0.25));
    let target = rng.gaussian_vec(16).iter().map(|v| v * 0.25).collect();
    (prefix, target)
}

#[test]
fn memorizes_a_single_pair() {
    let m = small();
    let (prefix, target) = single_pair();
    let items = vec![DiffusionItem {
        prefix: prefix.clone(),
        target: target.clone(),
    }];
    let cfg = LcmTrainConfig {
        lr: 1e-2,
        warmup: 50,
        final_lr: 1e-4,
        max_steps: 500,
        ckpt_every: 100,
        ..LcmTrainConfig::default()
    };
    let out = train_lcm(&items, &[], &m, &cfg, init_two_tower(&m, &mut SeededRng::new(2)).unwrap()).unwrap();
    let h = &out.history.steps;
    assert_eq!(h.len(), 500);
    assert!(h.iter().all(|s| s.clipped_norm <= 25.0 + 1e-9));
    assert!(h.last().unwrap().loss < 0.1 * h[0].loss);
    let s = cfg.schedule.build().unwrap();
    let sampler = SamplerConfig {
        steps: 10,
        ..SamplerConfig::default()
    };
    let z = sample_next(&out.last, &m, &prefix, &s, &sampler, &mut SeededRng::new(5)).unwrap();
    let d: Vec<f64> = z.iter().zip(&target).map(|(a, b)| a - b).collect();
    assert!(norm(&d) < 1e-2, "distance {}", norm(&d));
}

#[test]
fn guidance_dropout_rate_over_ten_thousand_draws() {
    let m = TwoTowerConfig {
        concept_dim: 2,
        ctx_layers: 1,
        ctx_width: 2,
        ctx_heads: 1,
        ff_mult: 1,
        den_depth: 1,
        den_width: 2,
        time_dim: 2,
        modality_tags: false,
    };
    let p = init_two_tower(&m, &mut SeededRng::new(0)).unwrap();
    let item = DiffusionItem {
        prefix: EmbeddingSequence::new(gaussian_sample(&mut SeededRng::new(1), 1, 2, 0.0, 1.0)),
        target: vec![0.5, -0.5],
    };
    let batch = vec![item; 10_000];
    let s = build_schedule(100, 10.0, -10.0).unwrap();
    let (stats, _) = diffusion_loss(&p, &m, &batch, &s, 0.15, false, &mut SeededRng::new(4)).unwrap();
    let rate = stats.dropped as f64 / 1e4;
    assert!((0.135..=0.165).contains(&rate), "rate {rate}");
}

#[test]
fn noised_isotropic_vectors_keep_unit_variance() {
    let s = build_schedule(100, 10.0, -10.0).unwrap();
    let d = 8;
    let n = 100_000;
    let mut rng = SeededRng::new(9);
    for t in [0, 30, 50, 99] {
        let mut total = 0.0;
        for _ in 0..n {
            let x0 = rng.gaussian_vec(d);
            let eps = rng.gaussian_vec(d);
            let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
            total += xt.iter().map(|v| v * v).sum::<f64>() / d as f64;
        }
        let mean = total / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "t {t}: E|x_t|^2/d = {mean}");
    }
}

fn resume_setup() -> (TwoTowerConfig, LcmTrainConfig, Vec<DiffusionItem>) {
    let m = TwoTowerConfig {
        concept_dim: 4,
        ctx_layers: 1,
        ctx_width: 8,
        ctx_heads: 2,
        ff_mult: 2,
        den_depth: 2,
        den_width: 12,
        time_dim: 4,
        modality_tags: false,
    };
    let cfg = LcmTrainConfig {
        lr: 3e-3,
        warmup: 5,
        final_lr: 1e-4,
        max_steps: 30,
        ckpt_every: 5,
        batch_size: 4,
        seed: 21,
        ..LcmTrainConfig::default()
    };
    let mut rng = SeededRng::new(8);
    let items = (0..10)
        .map(|i| DiffusionItem {
            prefix: EmbeddingSequence::new(gaussian_sample(&mut rng, 1 + i % 3, 4, 0.0, 1.0)),
            target: rng.gaussian_vec(4),
        })
        .collect();
    (m, cfg, items)
}

#[test]
fn resume_from_disk_reproduces_the_uninterrupted_run() {
    let (m, cfg, items) = resume_setup();
    let init = init_two_tower(&m, &mut SeededRng::new(3)).unwrap();
    let full = train_lcm(&items, &[], &m, &cfg, init.clone()).unwrap();

    let mut first = LcmTrainer::new(&items, &[], m.clone(), cfg.clone(), LcmState::fresh(init)).unwrap();
    for _ in 0..10 {
        first.step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    save_lcm_state(dir.path(), &m, &cfg, &first.snapshot()).unwrap();
    drop(first);

    let (m2, cfg2, state) = load_lcm_state(dir.path()).unwrap();
    assert_eq!(state.step, 10);
    let mut second = LcmTrainer::new(&items, &[], m2, cfg2, state).unwrap();
    second.run(|_| Ok(())).unwrap();
    let resumed = second.into_state();
    assert_eq!(resumed.history, full.history);
    assert_eq!(resumed.params.fingerprint(), full.last.fingerprint());
    assert_eq!(resumed.best.fingerprint(), full.best.fingerprint());
    assert_eq!(resumed.best_step, full.best_step);
}

#[test]
fn training_is_deterministic_and_seed_sensitive() {
    let (m, cfg, items) = resume_setup();
    let init = init_two_tower(&m, &mut SeededRng::new(3)).unwrap();
    let a = train_lcm(&items, &[], &m, &cfg, init.clone()).unwrap();
    let b = train_lcm(&items, &[], &m, &cfg, init.clone()).unwrap();
    assert_eq!(a.history, b.history);
    let c = train_lcm(&items, &[], &m, &LcmTrainConfig { seed: 22, ..cfg }, init).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn boundaries_follow_the_checkpoint_cadence() {
    let (m, cfg, items) = resume_setup();
    let init = init_two_tower(&m, &mut SeededRng::new(3)).unwrap();
    let mut seen = Vec::new();
    let mut t = LcmTrainer::new(&items, &[], m, cfg, LcmState::fresh(init)).unwrap();
    t.run(|st| {
        seen.push(st.step);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![5, 10, 15, 20, 25, 30]);
}

//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout.
//! Pass criterion numbers as arguments to run a subset.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use conspace::aligner::{
    combined_loss, embed_dataset, infonce_loss, mse_align_loss, run_curriculum, validation_metrics, AlignConfig,
    StageData, TrainHistory,
};
use conspace::corpus::{
    gen_synthetic_pairs, read_embeddings, split, write_embeddings, write_tensor, CurriculumStage, Dataset,
    SyntheticWorld, WorldConfig,
};
use conspace::latentdiff::{
    build_schedule, diffusion_loss, forward_diffuse, init_two_tower, items_from_sequences, sample_next, train_lcm,
    DiffusionItem, EmbeddingSequence, LcmTrainConfig, RuleConfig, RuleWorld, SamplerConfig, TwoTowerConfig,
};
use conspace::nn::Parameters;
use conspace::numerics::{gaussian_sample, grad_check, norm, spearman_rank_corr, Matrix, SeededRng};
use conspace::projector::{init_projector, project, project_backward, Pooling, ProjectorConfig, ProjectorParams};
use conspace::spaceval::{
    alignment_consistency, nearest_decode, retrieval_metrics, roundtrip_retrieval, similarity_matrix, space_report,
    space_stats, SimilarityMatrix,
};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|err| err.to_string())
}

// ---------------------------------------------------------------- 1

const GRAD_TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn projector_grads(cfg: &ProjectorConfig, seed: u64) -> Result<f64, String> {
    let mut p = e(init_projector(cfg, &mut SeededRng::new(seed)))?;
    if let Some(a) = &mut p.adapter {
        a.axpy(1.0, &gaussian_sample(&mut SeededRng::new(seed + 100), 8, 8, 0.0, 0.2));
    }
    let frames = gaussian_sample(&mut SeededRng::new(seed + 200), 3, 8, 0.0, 1.0);
    let up = SeededRng::new(seed + 300).gaussian_vec(cfg.concept_dim);
    let eval = |q: &ProjectorParams, f: &Matrix| {
        let (z, _) = project(q, cfg, f, true, Some(&mut SeededRng::new(seed + 400))).unwrap();
        z.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
    };
    let (_, trace) = e(project(&p, cfg, &frames, true, Some(&mut SeededRng::new(seed + 400))))?;
    let (g, df) = e(project_backward(&p, &trace, &up))?;
    let r1 = e(grad_check(
        |x| {
            let mut q = p.clone();
            q.set_flat(x);
            eval(&q, &frames)
        },
        &g.to_flat(),
        &p.to_flat(),
        EPS,
    ))?;
    let r2 = e(grad_check(
        |x| eval(&p, &Matrix::from_vec(3, 8, x.to_vec()).unwrap()),
        df.as_slice(),
        frames.as_slice(),
        EPS,
    ))?;
    Ok(r1.max_rel_error.max(r2.max_rel_error))
}

fn loss_grads(which: &str, seed: u64) -> Result<f64, String> {
    let mut rng = SeededRng::new(seed);
    let zv = gaussian_sample(&mut rng, 6, 5, 0.0, 1.0);
    let zt = gaussian_sample(&mut rng, 6, 5, 0.0, 1.0);
    let cfg = AlignConfig {
        lambda_con: 0.5,
        tau: 0.2,
        ..AlignConfig::default()
    };
    let f = |v: &Matrix| match which {
        "mse" => mse_align_loss(v, &zt),
        "infonce" => infonce_loss(v, &zt, cfg.tau),
        _ => combined_loss(v, &zt, &cfg),
    };
    let out = e(f(&zv))?;
    let r = e(grad_check(
        |x| f(&Matrix::from_vec(6, 5, x.to_vec()).unwrap()).unwrap().loss,
        out.grad.as_slice(),
        zv.as_slice(),
        EPS,
    ))?;
    Ok(r.max_rel_error)
}

fn diffusion_grads(seed: u64, guidance_p: f64, squared: bool) -> Result<f64, String> {
    let c = TwoTowerConfig {
        concept_dim: 3,
        ctx_layers: 1,
        ctx_width: 4,
        ctx_heads: 2,
        ff_mult: 2,
        den_depth: 2,
        den_width: 6,
        time_dim: 4,
        modality_tags: false,
    };
    let s = e(build_schedule(10, 8.0, -8.0))?;
    let p = e(init_two_tower(&c, &mut SeededRng::new(seed)))?;
    let mut rng = SeededRng::new(seed + 50);
    let items: Vec<DiffusionItem> = (0..4)
        .map(|i| DiffusionItem {
            prefix: EmbeddingSequence::new(gaussian_sample(&mut rng, 1 + i % 3, 3, 0.0, 1.0)),
            target: rng.gaussian_vec(3),
        })
        .collect();
    let loss = |q: &conspace::latentdiff::TwoTowerParams| {
        diffusion_loss(q, &c, &items, &s, guidance_p, squared, &mut SeededRng::new(seed + 60))
    };
    let (_, g) = e(loss(&p))?;
    let r = e(grad_check(
        |x| {
            let mut q = p.clone();
            q.set_flat(x);
            loss(&q).unwrap().0.loss
        },
        &g.to_flat(),
        &p.to_flat(),
        EPS,
    ))?;
    Ok(r.max_rel_error)
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let small = |pooling| ProjectorConfig {
        frame_dim: 8,
        concept_dim: 4,
        heads: 2,
        dropout_p: 0.0,
        pooling,
        init_sigma: 0.3,
        ..ProjectorConfig::default()
    };
    let projectors = [
        ("attention", small(Pooling::Attention)),
        ("mean", small(Pooling::Mean)),
        ("max", small(Pooling::Max)),
        (
            "adapter+dropout",
            ProjectorConfig {
                encoder_adapter: true,
                dropout_p: 0.25,
                ..small(Pooling::Attention)
            },
        ),
    ];
    let mut worst: Vec<(String, f64)> = Vec::new();
    for (name, cfg) in &projectors {
        let m = SEEDS.iter().map(|&s| projector_grads(cfg, s)).collect::<Result<Vec<_>, _>>()?;
        worst.push((format!("projector/{name}"), m.into_iter().fold(0.0, f64::max)));
    }
    for which in ["mse", "infonce", "combined"] {
        let m = SEEDS.iter().map(|&s| loss_grads(which, s)).collect::<Result<Vec<_>, _>>()?;
        worst.push((format!("loss/{which}"), m.into_iter().fold(0.0, f64::max)));
    }
    for (name, gp) in [("denoiser", 1.0), ("diffusion", 0.3)] {
        for squared in [false, true] {
            let m = SEEDS
                .iter()
                .map(|&s| diffusion_grads(s, gp, squared))
                .collect::<Result<Vec<_>, _>>()?;
            worst.push((
                format!("latentdiff/{name}{}", if squared { "²" } else { "" }),
                m.into_iter().fold(0.0, f64::max),
            ));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    for (name, v) in &worst {
        check(*v < GRAD_TOL, || format!("{name}: max rel error {v:.3e}"))?;
    }
    check(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("{} checks x 5 seeds, max rel error {max:.2e}, {secs:.1} s", worst.len()))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    for (steps, hi, lo) in [(100, 10.0, -10.0), (1000, 20.0, -20.0), (50, 5.0, -5.0), (2, 1.0, -1.0), (500, 15.0, -12.0)]
    {
        let s = e(build_schedule(steps, hi, lo))?;
        for t in 0..steps {
            worst = worst.max((s.alpha[t].powi(2) + s.sigma[t].powi(2) - 1.0).abs());
        }
        check(s.log_snr.windows(2).all(|w| w[1] < w[0]), || {
            format!("log-SNR not strictly decreasing for ({steps}, {hi}, {lo})")
        })?;
    }
    check(worst < 1e-12, || format!("max |a^2 + s^2 - 1| = {worst:e}"))?;

    let s = e(build_schedule(100, 10.0, -10.0))?;
    let (d, n) = (16, 100_000);
    let mut rng = SeededRng::new(9);
    let mut means = Vec::new();
    for t in [0, 25, 50, 75, 99] {
        let mut total = 0.0;
        for _ in 0..n {
            let x0 = rng.gaussian_vec(d);
            let eps = rng.gaussian_vec(d);
            let xt = e(forward_diffuse(&x0, t, &eps, &s))?;
            total += xt.iter().map(|v| v * v).sum::<f64>() / d as f64;
        }
        means.push(total / n as f64);
    }
    let dev = means.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
    check(dev < 0.02, || format!("E|x_t|^2/d = {means:?}"))?;
    Ok(format!("max |a^2 + s^2 - 1| = {worst:.1e}, Monte Carlo deviation {:.2}%", 100.0 * dev))
}

// ---------------------------------------------------------------- 3

fn brute_cos(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for k in 0..a.len() {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

fn brute_ranks(v: &[f64]) -> Vec<f64> {
    let mut r = vec![0.0; v.len()];
    for i in 0..v.len() {
        let (mut less, mut equal) = (0usize, 0usize);
        for j in 0..v.len() {
            if v[j] < v[i] {
                less += 1;
            } else if v[j] == v[i] {
                equal += 1;
            }
        }
        r[i] = less as f64 + (equal as f64 + 1.0) / 2.0;
    }
    r
}

fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    sxy / (sxx * syy).sqrt()
}

fn brute_spearman(x: &[f64], y: &[f64]) -> f64 {
    brute_pearson(&brute_ranks(x), &brute_ranks(y))
}

fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize, quantize: bool) -> Matrix {
    let mut m = gaussian_sample(rng, rows, cols, 0.0, 1.0);
    if quantize {
        for v in m.as_mut_slice() {
            *v = (*v * 2.0).round() / 2.0;
            if *v == 0.0 {
                *v = 0.5;
            }
        }
    }
    m
}

fn criterion_3() -> Outcome {
    let mut rng = SeededRng::new(2024);
    let (mut worst_sim, mut worst_ret, mut worst_sp, mut worst_ac) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for inst in 0..100 {
        let quantize = inst % 3 == 0;
        let dim = 1 + rng.below(12);

        let (nq, nt) = (1 + rng.below(200), 1 + rng.below(200));
        let q = random_matrix(&mut rng, nq, dim, quantize);
        let t = random_matrix(&mut rng, nt, dim, quantize);
        let s = e(similarity_matrix(&q, &t))?;
        for i in 0..nq {
            for j in 0..nt {
                let want = brute_cos(q.row(i), t.row(j)).clamp(-1.0, 1.0);
                worst_sim = worst_sim.max((s.values.get(i, j) - want).abs());
            }
        }

        let mut values = random_matrix(&mut rng, nq, nt, quantize);
        if quantize {
            for v in values.as_mut_slice() {
                *v = (*v * 2.0).round() / 4.0;
            }
        }
        let target_ids: Vec<u64> = rng.permutation(4 * nt).into_iter().take(nt).map(|v| v as u64).collect();
        let gold: Vec<u64> = (0..nq).map(|_| target_ids[rng.below(nt)]).collect();
        let sm = SimilarityMatrix {
            values: values.clone(),
            query_ids: (0..nq as u64).collect(),
            target_ids: target_ids.clone(),
        };
        let got = e(retrieval_metrics(&sm, &gold))?;
        let (mut hits, mut mrr) = ([0usize; 3], 0.0);
        for (i, g) in gold.iter().enumerate() {
            let mut order: Vec<usize> = (0..nt).collect();
            order.sort_by(|&a, &b| {
                values
                    .get(i, b)
                    .partial_cmp(&values.get(i, a))
                    .unwrap()
                    .then(target_ids[a].cmp(&target_ids[b]))
            });
            let rank = 1 + order.iter().position(|&j| target_ids[j] == *g).unwrap();
            for (h, k) in hits.iter_mut().zip([1, 5, 10]) {
                *h += (rank <= k) as usize;
            }
            mrr += 1.0 / rank as f64;
        }
        let n = nq as f64;
        worst_ret = worst_ret
            .max((got.recall_at.r1 - hits[0] as f64 / n).abs())
            .max((got.recall_at.r5 - hits[1] as f64 / n).abs())
            .max((got.recall_at.r10 - hits[2] as f64 / n).abs())
            .max((got.mrr - mrr / n).abs());

        let len = 3 + rng.below(198);
        let x = random_matrix(&mut rng, 1, len, quantize).into_vec();
        let y = random_matrix(&mut rng, 1, len, quantize).into_vec();
        if x.iter().any(|&v| v != x[0]) && y.iter().any(|&v| v != y[0]) {
            worst_sp = worst_sp.max((e(spearman_rank_corr(&x, &y))? - brute_spearman(&x, &y)).abs());
        }

        let n = 3 + rng.below(198);
        let a = random_matrix(&mut rng, n, dim.max(2), false);
        let b = random_matrix(&mut rng, n, dim.max(2), false);
        let ac = e(alignment_consistency(&a, &b))?;
        let mut sum = 0.0;
        for i in 0..n {
            let xs: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| brute_cos(a.row(i), b.row(j)).clamp(-1.0, 1.0)).collect();
            let ys: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| brute_cos(b.row(i), b.row(j)).clamp(-1.0, 1.0)).collect();
            sum += brute_spearman(&xs, &ys);
        }
        worst_ac = worst_ac.max((ac.ac - sum / n as f64).abs());

        let rows = 1 + rng.below(200);
        let mut bank = random_matrix(&mut rng, rows, dim, false);
        if rows > 2 {
            let src = bank.row(0).to_vec();
            bank.row_mut(rows - 1).copy_from_slice(&src);
        }
        for _ in 0..5 {
            let z = rng.gaussian_vec(dim);
            let mut best = (0, f64::NEG_INFINITY);
            for j in 0..rows {
                let c = brute_cos(&z, bank.row(j));
                if c > best.1 {
                    best = (j, c);
                }
            }
            let got = e(nearest_decode(&z, &bank))?;
            check(got == best.0, || format!("instance {inst}: nearest_decode {got} vs brute force {}", best.0))?;
        }
    }
    for (name, v) in [
        ("similarity_matrix", worst_sim),
        ("retrieval_metrics", worst_ret),
        ("spearman_rank_corr", worst_sp),
        ("alignment_consistency", worst_ac),
    ] {
        check(v <= 1e-12, || format!("{name} deviates by {v:e}"))?;
    }
    Ok(format!(
        "100 instances; max deviation sim {worst_sim:.0e}, retrieval {worst_ret:.0e}, spearman {worst_sp:.0e}, ac {worst_ac:.0e}, decode exact"
    ))
}

// ---------------------------------------------------------------- 4 and 5

fn align_pcfg() -> ProjectorConfig {
    ProjectorConfig {
        frame_dim: 64,
        concept_dim: 32,
        heads: 4,
        dropout_p: 0.1,
        ..ProjectorConfig::default()
    }
}

fn align_cfg() -> AlignConfig {
    AlignConfig {
        lr_projector: 1e-2,
        lr_encoder_adapter: 1e-3,
        freeze_steps: 200,
        warmup_steps: 50,
        patience: 3,
        batch_size: 16,
        seed: 5,
        ..AlignConfig::default()
    }
}

fn stage_data(name: &str, frames: usize, noise: f64, n: usize, epochs: usize, seed: u64) -> StageData {
    let world = SyntheticWorld::new(WorldConfig {
        frames,
        noise_sigma: noise,
        ..WorldConfig::default()
    })
    .unwrap();
    let ds = gen_synthetic_pairs(&world, n, &mut SeededRng::new(seed)).unwrap();
    let (train, val, _) = split(&ds, (0.8, 0.1, 0.1), seed).unwrap();
    StageData {
        stage: CurriculumStage {
            name: name.into(),
            dataset_path: format!("{name}.bin").into(),
            epochs,
            batch_size: 16,
            lr_overrides: None,
        },
        train,
        val,
    }
}

struct Curriculum {
    stages: Vec<StageData>,
    test: Dataset,
}

fn curriculum() -> &'static Curriculum {
    static C: OnceLock<Curriculum> = OnceLock::new();
    C.get_or_init(|| {
        let final_world = SyntheticWorld::new(WorldConfig::default()).unwrap();
        let ds = gen_synthetic_pairs(&final_world, 2000, &mut SeededRng::new(3)).unwrap();
        let (train, val, test) = split(&ds, (0.8, 0.1, 0.1), 3).unwrap();
        let mut stages = vec![
            stage_data("images", 1, 0.3, 1000, 4, 1),
            stage_data("short", 4, 0.2, 1000, 4, 2),
        ];
        stages.push(StageData {
            stage: CurriculumStage {
                name: "long".into(),
                dataset_path: "long.bin".into(),
                epochs: 12,
                batch_size: 16,
                lr_overrides: None,
            },
            train,
            val,
        });
        Curriculum { stages, test }
    })
}

struct AlignRun {
    params: ProjectorParams,
    histories: Vec<TrainHistory>,
    secs: f64,
}

fn run_align(stages: &[StageData]) -> Result<AlignRun, String> {
    let pcfg = align_pcfg();
    let t0 = Instant::now();
    let init = e(init_projector(&pcfg, &mut SeededRng::new(7)))?;
    let (params, histories) = e(run_curriculum(stages, init, &pcfg, &align_cfg()))?;
    Ok(AlignRun {
        params,
        histories,
        secs: t0.elapsed().as_secs_f64(),
    })
}

fn full_run() -> &'static Result<AlignRun, String> {
    static R: OnceLock<Result<AlignRun, String>> = OnceLock::new();
    R.get_or_init(|| run_align(&curriculum().stages))
}

fn criterion_4() -> Outcome {
    let c = curriculum();
    let pcfg = align_pcfg();
    let a = full_run().as_ref().map_err(|m| m.clone())?;
    let val = &c.stages[2].val;
    let init = e(init_projector(&pcfg, &mut SeededRng::new(7)))?;
    let (init_mse, _) = e(validation_metrics(&init, &pcfg, val))?;
    let (final_mse, _) = e(validation_metrics(&a.params, &pcfg, val))?;
    let zv = e(embed_dataset(&a.params, &pcfg, &c.test))?;
    let rep = e(space_report(&zv, &c.test.targets(), &c.test.caption_ids(), serde_json::Value::Null))?;
    let b = run_align(&c.stages)?;
    let same = a.params == b.params && a.histories == b.histories;
    let ratio = final_mse / init_mse;
    let msg = format!(
        "held-out R@1 {:.3}, val MSE {final_mse:.4} = {ratio:.3}x init, {:.0} s per run, deterministic {same}",
        rep.recall_at.r1, a.secs
    );
    check(rep.recall_at.r1 >= 0.90, || msg.clone())?;
    check(ratio <= 0.1, || msg.clone())?;
    check(a.secs < 300.0, || msg.clone())?;
    check(same, || msg.clone())?;
    Ok(msg)
}

/// Only the first two frames of each video are informative.
fn ablation_world() -> WorldConfig {
    WorldConfig {
        noise_sigma: 1.25,
        noise_profile: vec![0.1, 0.1, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
        ..WorldConfig::default()
    }
}

fn ablation_r1(pooling: Pooling, temporal: bool, seed: u64) -> Result<f64, String> {
    let world = e(SyntheticWorld::new(WorldConfig {
        seed,
        ..ablation_world()
    }))?;
    let ds = e(gen_synthetic_pairs(&world, 2000, &mut SeededRng::new(seed)))?;
    let (train, val, test) = e(split(&ds, (0.8, 0.1, 0.1), seed))?;
    let pcfg = ProjectorConfig {
        pooling,
        temporal_attention: temporal,
        ..align_pcfg()
    };
    let init = e(init_projector(&pcfg, &mut SeededRng::new(seed + 2)))?;
    let cfg = AlignConfig {
        max_epochs: 20,
        ..align_cfg()
    };
    let (p, _) = e(conspace::aligner::train_stage(&train, &val, init, &pcfg, &cfg))?;
    let zv = e(embed_dataset(&p, &pcfg, &test))?;
    let rep = e(space_report(&zv, &test.targets(), &test.caption_ids(), serde_json::Value::Null))?;
    Ok(rep.recall_at.r1)
}

fn criterion_5() -> Outcome {
    let mut table = Vec::new();
    let (mut first, mut second) = (0, 0);
    for seed in 1..=3u64 {
        let att = ablation_r1(Pooling::Attention, true, seed)?;
        let mean = ablation_r1(Pooling::Mean, true, seed)?;
        let bare = ablation_r1(Pooling::Mean, false, seed)?;
        first += (att >= mean) as usize;
        second += (mean >= bare) as usize;
        table.push(format!("seed {seed}: {att:.3}/{mean:.3}/{bare:.3}"));
    }
    let full = full_run().as_ref().map_err(|m| m.clone())?;
    let short = run_align(&curriculum().stages[1..])?;
    let with = full.histories.last().unwrap().best_val_mse();
    let without = short.histories.last().unwrap().best_val_mse();
    // Within 5% counts as a match.
    let curriculum_ok = without >= 0.95 * with;
    let msg = format!(
        "R@1 attention/mean/no-temporal {}; margins hold {first}/3 and {second}/3; final val MSE {with:.4} full vs {without:.4} without stage 1",
        table.join(", ")
    );
    check(first >= 2 && second >= 2 && curriculum_ok, || msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let m = TwoTowerConfig {
        concept_dim: 16,
        ctx_layers: 2,
        ctx_width: 32,
        ctx_heads: 4,
        ff_mult: 2,
        den_depth: 3,
        den_width: 64,
        time_dim: 16,
        modality_tags: false,
    };
    let mut rng = SeededRng::new(1);
    let prefix = EmbeddingSequence::new(gaussian_sample(&mut rng, 3, 16, 0.0, 0.25));
    let target: Vec<f64> = rng.gaussian_vec(16).iter().map(|v| v * 0.25).collect();
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
    let out = e(train_lcm(&items, &[], &m, &cfg, e(init_two_tower(&m, &mut SeededRng::new(2)))?))?;
    let max_clip = out.history.steps.iter().map(|s| s.clipped_norm).fold(0.0, f64::max);
    let s = e(cfg.schedule.build())?;
    let sampler = SamplerConfig {
        steps: 10,
        ..SamplerConfig::default()
    };
    let z = e(sample_next(&out.last, &m, &prefix, &s, &sampler, &mut SeededRng::new(5)))?;
    let dist = norm(&z.iter().zip(&target).map(|(a, b)| a - b).collect::<Vec<_>>());

    let item = DiffusionItem {
        prefix: EmbeddingSequence::new(gaussian_sample(&mut SeededRng::new(3), 1, 16, 0.0, 1.0)),
        target: target.clone(),
    };
    let p = e(init_two_tower(&m, &mut SeededRng::new(0)))?;
    let (stats, _) = e(diffusion_loss(&p, &m, &vec![item; 10_000], &s, 0.15, false, &mut SeededRng::new(4)))?;
    let rate = stats.dropped as f64 / 1e4;

    let msg = format!(
        "distance {dist:.1e} after {} steps, dropout rate {rate:.4}, max clipped norm {max_clip:.3}",
        out.history.steps.len()
    );
    check(out.history.steps.len() == 500 && dist < 1e-2, || msg.clone())?;
    check((0.135..=0.165).contains(&rate), || msg.clone())?;
    check(max_clip <= 25.0, || msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let t0 = Instant::now();
    let world = e(RuleWorld::new(RuleConfig::default()))?;
    let train = world.generate(2000, &mut SeededRng::new(1));
    let test = world.generate(200, &mut SeededRng::new(2));
    let context = 1 + world.config.distractors;
    let items = items_from_sequences(&train.sequences, context);
    let seen: std::collections::HashSet<&[usize]> =
        train.bank_ids.as_ref().unwrap().iter().map(|ids| &ids[..context]).collect();
    let m = TwoTowerConfig {
        concept_dim: world.config.dim,
        ctx_layers: 2,
        ctx_width: 64,
        ctx_heads: 4,
        ff_mult: 2,
        den_depth: 3,
        den_width: 128,
        time_dim: 16,
        modality_tags: false,
    };
    let cfg = LcmTrainConfig {
        lr: 3e-3,
        warmup: 100,
        final_lr: 3e-5,
        max_steps: 1000,
        batch_size: 32,
        ckpt_every: 200,
        ..LcmTrainConfig::default()
    };
    let out = e(train_lcm(&items, &[], &m, &cfg, e(init_two_tower(&m, &mut SeededRng::new(2)))?))?;
    let s = e(cfg.schedule.build())?;
    let sampler = SamplerConfig {
        steps: 10,
        ..SamplerConfig::default()
    };
    let (mut hits, mut total) = (0, 0);
    for (i, (seq, ids)) in test.sequences.iter().zip(test.bank_ids.as_ref().unwrap()).enumerate() {
        if seen.contains(&ids[..context]) {
            continue;
        }
        let z = e(sample_next(&out.best, &m, &seq.prefix(context), &s, &sampler, &mut SeededRng::derive(7, i as u64)))?;
        hits += (e(nearest_decode(&z, &world.bank))? == ids[context]) as usize;
        total += 1;
    }
    let acc = hits as f64 / total as f64;
    let secs = t0.elapsed().as_secs_f64();
    let msg = format!("accuracy {acc:.3} on {total} held-out prefixes (chance {:.3}), {secs:.0} s", 1.0 / 64.0);
    check(acc >= 0.40 && secs < 600.0, || msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let mut rng = SeededRng::new(8);
    let bank = conspace::corpus::random_bank(&mut rng, 512, 8, (0.5, 2.0));
    let gold: Vec<usize> = rng.permutation(512).into_iter().take(256).collect();
    let clean = bank.select_rows(&gold);
    let mut r1 = Vec::new();
    for sigma in [0.0, 0.1, 0.5] {
        let noise = gaussian_sample(&mut SeededRng::new(80), clean.rows(), clean.cols(), 0.0, 1.0);
        let mut zv = clean.clone();
        zv.axpy(sigma, &noise);
        let rep = e(roundtrip_retrieval(&zv, &bank, &gold))?;
        r1.push(rep.groups["decoded"].recall_at.r1);
    }
    let msg = format!("round-trip R@1 at sigma 0/0.1/0.5: {:.3}/{:.3}/{:.3}", r1[0], r1[1], r1[2]);
    check(r1[0] == 1.0 && r1[1] < r1[0] && r1[2] < r1[1], || msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let narrow = space_stats(&gaussian_sample(&mut SeededRng::new(90), 5000, 16, 0.0, 0.1)).map_err(|x| x.to_string())?;
    let wide = space_stats(&gaussian_sample(&mut SeededRng::new(91), 5000, 16, 0.0, 1.0)).map_err(|x| x.to_string())?;
    let ratio = wide.trace / narrow.trace;
    let msg = format!(
        "trace ratio {ratio:.2}, logdet {:.2} (wide) vs {:.2} (narrow)",
        wide.logdet, narrow.logdet
    );
    check((ratio / 100.0 - 1.0).abs() <= 0.05 && wide.logdet > narrow.logdet, || msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------- 10

fn bin(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_conspace"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|x| x.to_string())?;
    check(out.status.success(), || {
        format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn same_tree(a: &Path, b: &Path) -> Result<usize, String> {
    let mut names: Vec<_> = e(fs::read_dir(a))?.map(|x| x.unwrap().file_name()).collect();
    names.sort();
    let mut count = 0;
    for n in names {
        let (pa, pb) = (a.join(&n), b.join(&n));
        if pa.is_dir() {
            count += same_tree(&pa, &pb)?;
        } else {
            check(e(fs::read(&pa))? == e(fs::read(&pb))?, || format!("{} differs", pa.display()))?;
            count += 1;
        }
    }
    Ok(count)
}

/// Runs `args` (writing to `out`) twice and compares every output file.
fn reproducible(dir: &Path, out: &str, args: &[&str]) -> Result<usize, String> {
    bin(dir, args)?;
    let first = format!("{out}.first");
    e(fs::rename(dir.join(out), dir.join(&first)))?;
    bin(dir, args)?;
    if dir.join(out).is_dir() {
        same_tree(&dir.join(&first), &dir.join(out))
    } else {
        check(e(fs::read(dir.join(&first)))? == e(fs::read(dir.join(out)))?, || format!("{out} differs"))?;
        Ok(1)
    }
}

fn criterion_10() -> Outcome {
    let tmp = e(tempfile::tempdir())?;
    let d = tmp.path();

    let mut rng = SeededRng::new(10);
    let x = gaussian_sample(&mut rng, 37, 13, 0.0, 3.0);
    let mut x32 = x.clone();
    for v in x32.as_mut_slice() {
        *v = *v as f32 as f64;
    }
    e(write_embeddings(d.join("e.bin"), &x32))?;
    check(e(read_embeddings(d.join("e.bin")))? == x32, || "f32 embedding file changed values".into())?;
    e(write_tensor(d.join("t.bin"), &x))?;
    check(e(read_embeddings(d.join("t.bin")))? == x, || "f64 tensor file changed values".into())?;

    let mut files = 0;
    files += reproducible(
        d,
        "ds",
        &[
            "gen", "--seed", "1", "--out", "ds", "--n", "200", "--frames", "4", "--dim-frame", "16", "--dim-concept", "8",
            "--bank-size", "64",
        ],
    )?;
    e(fs::write(
        d.join("cfg.json"),
        r#"{"projector": {"heads": 2},
            "aligner": {"lr_projector": 0.05, "freeze_steps": 20, "warmup_steps": 10},
            "latentdiff": {
                "model": {"ctx_layers": 1, "ctx_width": 8, "ctx_heads": 2, "den_depth": 2, "den_width": 16, "time_dim": 4},
                "train": {"lr": 0.003, "warmup": 20, "max_steps": 200, "batch_size": 4},
                "min_context": 3}}"#,
    ))?;
    e(fs::write(d.join("s1.json"), r#"{"name": "a", "dataset_path": "ds", "epochs": 2, "batch_size": 16}"#))?;
    e(fs::write(d.join("s2.json"), r#"{"name": "b", "dataset_path": "ds", "epochs": 2, "batch_size": 32}"#))?;
    files += reproducible(d, "run", &["align", "--config", "cfg.json", "--stages", "s1.json,s2.json", "--seed", "3", "--out", "run"])?;
    files += reproducible(d, "ev", &["eval", "--projector", "run/projector", "--data", "ds", "--out", "ev/report.json", "--drift", "ev/drift.csv"])?;
    files += reproducible(d, "seq", &["gen-seq", "--n", "120", "--dim", "4", "--bank-size", "8", "--seed", "2", "--out", "seq"])?;
    let lcm = ["train-lcm", "--config", "cfg.json", "--data", "seq", "--ckpt-every", "50", "--seed", "4"];
    let mut args = lcm.to_vec();
    args.extend(["--out", "lcm"]);
    files += reproducible(d, "lcm", &args)?;
    let prefix = e(read_embeddings(d.join("seq/embeddings.bin")))?.select_rows(&[0, 1, 2]);
    e(write_tensor(d.join("prefix.bin"), &prefix))?;
    files += reproducible(
        d,
        "smp",
        &[
            "sample", "--lcm", "lcm/final", "--prefix", "prefix.bin", "--steps", "8", "--guidance", "1", "--eta", "0.5", "--seed",
            "6", "--count", "3", "--out", "smp/z.bin",
        ],
    )?;
    files += reproducible(d, "schemas", &["schema", "--out", "schemas"])?;

    let mut args = lcm.to_vec();
    args.extend(["--out", "resumed", "--resume", "lcm/checkpoints/step-000100"]);
    bin(d, &args)?;
    for f in ["history.csv", "val.csv"] {
        check(e(fs::read(d.join("lcm").join(f)))? == e(fs::read(d.join("resumed").join(f)))?, || {
            format!("resumed {f} differs")
        })?;
    }
    same_tree(&d.join("lcm/final"), &d.join("resumed/final"))?;

    Ok(format!(
        "embedding files exact, {files} output files byte-identical across 7 commands, resume from step 100 identical"
    ))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", criterion_1),
        ("variance preservation", criterion_2),
        ("metric oracles", criterion_3),
        ("alignment convergence", criterion_4),
        ("ablation direction", criterion_5),
        ("diffusion memorization", criterion_6),
        ("next-embedding above chance", criterion_7),
        ("round-trip fixed point", criterion_8),
        ("space statistics", criterion_9),
        ("format and determinism", criterion_10),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let k = i + 1;
        if !only.is_empty() && !only.contains(&k) {
            continue;
        }
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(msg) => println!("criterion {k:>2} {name}: PASS ({msg}) [{secs:.1} s]"),
            Err(msg) => {
                failed += 1;
                println!("criterion {k:>2} {name}: FAIL ({msg}) [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

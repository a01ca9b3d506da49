use std::fs;
use std::path::{Path, PathBuf};

use conspace::aligner::{embed_dataset, run_curriculum_with, StageData};
use conspace::checkpoint::{load_lcm_state, load_projector, load_two_tower, save_lcm_state, save_projector, save_two_tower, TwoTowerMeta};
use conspace::corpus::{
    gen_synthetic_pairs, largest_remainder_sizes, read_dataset_dir, read_embeddings, split, write_dataset_dir,
    write_embeddings, CurriculumStage, DatasetManifest, SyntheticWorld,
};
use conspace::latentdiff::{
    init_two_tower, items_from_sequences, read_sequence_dir, sample_next, write_sequence_dir, EmbeddingSequence,
    LcmState, LcmTrainer, RuleConfig, RuleWorld, SamplerConfig,
};
use conspace::numerics::{Matrix, SeededRng};
use conspace::projector::init_projector;
use conspace::spaceval::{decode_all, drift_export, nearest_decode, roundtrip_retrieval, space_report, RoundTripReport, SpaceReport};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Resolved, RunConfig};
use crate::error::{CliError, CliResult};
use crate::{AlignArgs, EvalArgs, GenArgs, GenSeqArgs, SampleArgs, SchemaArgs, SplitName, TrainLcmArgs};

const INIT_STREAM: u64 = 4 << 32;
const SEQ_SPLIT_STREAM: u64 = 5 << 32;

pub const RESOLVED_CONFIG: &str = "resolved-config.json";

/// Contents of the file written by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct EvalReport {
    pub space: SpaceReport,
    pub roundtrip: RoundTripReport,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    Ok(())
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_resolved(dir: &Path, command: &str, args: serde_json::Value, config: &RunConfig) -> CliResult<()> {
    let r = Resolved {
        command: command.to_string(),
        args,
        config: config.clone(),
    };
    write_json_file(&dir.join(RESOLVED_CONFIG), &r)
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn gen(a: &GenArgs) -> CliResult<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let w = &mut cfg.corpus;
    if let Some(v) = a.frames {
        w.frames = v;
    }
    if let Some(v) = a.dim_frame {
        w.frame_dim = v;
    }
    if let Some(v) = a.dim_concept {
        w.concept_dim = v;
    }
    if let Some(v) = a.noise {
        w.noise_sigma = v;
    }
    if let Some(v) = a.bank_size {
        w.bank_size = v;
    }
    if let Some(v) = a.world_seed {
        w.seed = v;
    }
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let world = SyntheticWorld::new(cfg.corpus.clone())?;
    let ds = gen_synthetic_pairs(&world, a.n, &mut SeededRng::new(a.seed))?;
    let manifest = DatasetManifest {
        frame_dim: ds.frame_dim,
        concept_dim: ds.concept_dim,
        frames_per_sample: ds.frames_per_sample,
        count: ds.len(),
        seed: a.seed,
        world: cfg.corpus.clone(),
    };
    write_dataset_dir(&a.out, &manifest, &ds, &world.caption_bank)?;
    write_resolved(&a.out, "gen", json!({"seed": a.seed, "n": a.n, "out": a.out}), &cfg)?;
    println!(
        "{}: {} samples, T={} D={} d={}, bank {}, noise {}",
        a.out.display(),
        manifest.count,
        manifest.frames_per_sample,
        manifest.frame_dim,
        manifest.concept_dim,
        cfg.corpus.bank_size,
        cfg.corpus.noise_sigma
    );
    Ok(())
}

pub fn gen_seq(a: &GenSeqArgs) -> CliResult<()> {
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let rule = RuleConfig {
        seed: a.world_seed,
        bank_size: a.bank_size,
        dim: a.dim,
        distractors: a.distractors,
    };
    let world = RuleWorld::new(rule)?;
    let corpus = world.generate(a.n, &mut SeededRng::new(a.seed));
    write_sequence_dir(&a.out, &corpus)?;
    write_resolved(
        &a.out,
        "gen-seq",
        json!({"seed": a.seed, "n": a.n, "rule": world.config, "out": a.out}),
        &RunConfig::default(),
    )?;
    println!(
        "{}: {} sequences of length {}, bank {} x {}",
        a.out.display(),
        a.n,
        a.distractors + 2,
        a.bank_size,
        a.dim
    );
    Ok(())
}

fn dir_name(i: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("stage{}-{clean}", i + 1)
}

pub fn align(a: &AlignArgs) -> CliResult<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.aligner.seed = s;
    }
    let mut loaded = Vec::with_capacity(a.stages.len());
    for path in &a.stages {
        if !path.is_file() {
            return Err(usage(format!("stage file {} does not exist", path.display())));
        }
        let stage = CurriculumStage::load(path).map_err(|e| usage(format!("bad stage file: {e}")))?;
        let data_dir = if stage.dataset_path.is_absolute() {
            stage.dataset_path.clone()
        } else {
            parent_dir(path).join(&stage.dataset_path)
        };
        let stored = read_dataset_dir(&data_dir)?;
        loaded.push((stage, stored));
    }
    let (dd, d) = (loaded[0].1.dataset.frame_dim, loaded[0].1.dataset.concept_dim);
    if let Some((s, _)) = loaded
        .iter()
        .find(|(_, st)| st.dataset.frame_dim != dd || st.dataset.concept_dim != d)
    {
        return Err(usage(format!("stage {} has different dimensions from the first stage", s.name)));
    }
    cfg.projector.frame_dim = dd;
    cfg.projector.concept_dim = d;
    cfg.projector.validate()?;
    cfg.aligner.validate()?;
    let mut stages = Vec::with_capacity(loaded.len());
    for (stage, stored) in loaded {
        let (train, val, _) = split(&stored.dataset, cfg.split.fractions(), cfg.split.seed)?;
        stages.push(StageData { stage, train, val });
    }

    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    write_resolved(&a.out, "align", json!({"stages": a.stages, "out": a.out}), &cfg)?;
    let (pcfg, acfg) = (&cfg.projector, &cfg.aligner);
    let init = init_projector(pcfg, &mut SeededRng::derive(acfg.seed, INIT_STREAM))?;
    let mut total_steps = 0u64;
    let (last, _) = run_curriculum_with(&stages, init, pcfg, acfg, |i, p, h| {
        let dir = a.out.join(dir_name(i, &h.stage));
        total_steps = h.steps.last().map_or(total_steps, |s| s.step + 1);
        save_projector(&dir.join("checkpoint"), pcfg, acfg.seed, total_steps, p)?;
        h.write_steps_csv(&dir.join("steps.csv"))?;
        h.write_epochs_csv(&dir.join("epochs.csv"))?;
        println!(
            "stage {} ({}): {} steps, val mse {:.6} -> {:.6} (best epoch {})",
            i + 1,
            h.stage,
            h.steps.len(),
            h.initial_val_mse,
            h.best_val_mse(),
            h.best_epoch
        );
        Ok(())
    })?;
    save_projector(&a.out.join("projector"), pcfg, acfg.seed, total_steps, &last)?;
    Ok(())
}

pub fn train_lcm(a: &TrainLcmArgs) -> CliResult<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let corpus = read_sequence_dir(&a.data)?;
    let dim = corpus.sequences[0].dim();
    let (model, mut train, state) = match &a.resume {
        Some(dir) => {
            let (m, t, s) = load_lcm_state(dir)?;
            if m.concept_dim != dim {
                return Err(usage(format!(
                    "checkpoint concept_dim {} does not match the corpus width {dim}",
                    m.concept_dim
                )));
            }
            (m, t, s)
        }
        None => {
            let mut m = cfg.latentdiff.model.clone();
            m.concept_dim = dim;
            m.validate()?;
            let mut t = cfg.latentdiff.train.clone();
            if let Some(s) = a.seed {
                t.seed = s;
            }
            let init = init_two_tower(&m, &mut SeededRng::derive(t.seed, INIT_STREAM))?;
            (m, t, LcmState::fresh(init))
        }
    };
    if let Some(k) = a.ckpt_every {
        train.ckpt_every = k;
    }
    if let Some(k) = a.max_steps {
        train.max_steps = k;
    }
    train.validate()?;
    cfg.latentdiff.model = model.clone();
    cfg.latentdiff.train = train.clone();

    let n = corpus.sequences.len();
    let f = cfg.latentdiff.val_fraction;
    if !(0.0..1.0).contains(&f) {
        return Err(usage(format!("val_fraction must lie in [0, 1), got {f}")));
    }
    let n_val = largest_remainder_sizes(n, &[1.0 - f, f])[1];
    let perm = SeededRng::derive(cfg.split.seed, SEQ_SPLIT_STREAM).permutation(n);
    let mut val_idx = perm[..n_val].to_vec();
    let mut train_idx = perm[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| corpus.sequences[i].clone()).collect::<Vec<_>>();
    let items = items_from_sequences(&pick(&train_idx), cfg.latentdiff.min_context);
    let val_items = items_from_sequences(&pick(&val_idx), cfg.latentdiff.min_context);
    if items.is_empty() {
        return Err(usage("no training items: sequences are shorter than min_context + 1"));
    }

    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    write_resolved(
        &a.out,
        "train-lcm",
        json!({"data": a.data, "out": a.out, "resume": a.resume}),
        &cfg,
    )?;
    let mut trainer = LcmTrainer::new(&items, &val_items, model.clone(), train.clone(), state)?;
    trainer.run(|st| {
        let dir = a.out.join("checkpoints").join(format!("step-{:06}", st.step));
        save_lcm_state(&dir, &model, &train, st)?;
        let v = st.history.val.last().map_or(f64::NAN, |v| v.val_loss);
        println!("step {}: val loss {v:.6}", st.step);
        Ok(())
    })?;
    let st = trainer.into_state();
    save_lcm_state(&a.out.join("final"), &model, &train, &st)?;
    let meta = TwoTowerMeta {
        model: model.clone(),
        schedule: train.schedule,
    };
    save_two_tower(&a.out.join("best"), &meta, train.seed, st.best_step as u64, &st.best)?;
    st.history.write_csv(&a.out.join("history.csv"))?;
    st.history.write_val_csv(&a.out.join("val.csv"))?;
    println!(
        "trained {} steps; best validation loss {:.6} at step {}",
        st.step,
        st.best_val.unwrap_or(f64::NAN),
        st.best_step
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let (pcfg, params, meta) = load_projector(&a.projector)?;
    let stored = read_dataset_dir(&a.data)?;
    let ds = &stored.dataset;
    if ds.frame_dim != pcfg.frame_dim || ds.concept_dim != pcfg.concept_dim {
        return Err(usage(format!(
            "projector expects D={} d={}, dataset has D={} d={}",
            pcfg.frame_dim, pcfg.concept_dim, ds.frame_dim, ds.concept_dim
        )));
    }
    let part = match a.split {
        SplitName::All => ds.clone(),
        s => {
            let (tr, va, te) = split(ds, cfg.split.fractions(), cfg.split.seed)?;
            match s {
                SplitName::Train => tr,
                SplitName::Val => va,
                _ => te,
            }
        }
    };
    let zv = embed_dataset(&params, &pcfg, &part)?;
    let zt = part.targets();
    let ids = part.caption_ids();
    let echo = json!({
        "projector": meta.config,
        "checkpoint_step": meta.step,
        "split": a.split,
        "split_config": cfg.split,
    });
    let space = space_report(&zv, &zt, &ids, echo)?;
    let gold: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let roundtrip = roundtrip_retrieval(&zv, &stored.bank, &gold)?;
    if let Some(path) = &a.drift {
        ensure_parent(path)?;
        let (_, decoded) = decode_all(&zv, &stored.bank)?;
        drift_export(&zv, &stored.bank.select_rows(&gold), &decoded, path)?;
    }
    println!(
        "n {}: R@1 {:.4} R@5 {:.4} R@10 {:.4} MRR {:.4} AC {:.4}",
        space.n, space.recall_at.r1, space.recall_at.r5, space.recall_at.r10, space.mrr, space.ac
    );
    write_json_file(&a.out, &EvalReport { space, roundtrip })?;
    write_resolved(
        &parent_dir(&a.out),
        "eval",
        json!({"projector": a.projector, "data": a.data, "split": a.split, "out": a.out, "drift": a.drift}),
        &cfg,
    )
}

pub fn sample(a: &SampleArgs) -> CliResult<()> {
    let (tm, params, _) = load_two_tower(&a.lcm)?;
    let prefix = read_embeddings(&a.prefix)?;
    let d = tm.model.concept_dim;
    if prefix.rows() == 0 || prefix.cols() != d {
        return Err(usage(format!(
            "prefix is {}x{}, the model needs at least one row of width {d}",
            prefix.rows(),
            prefix.cols()
        )));
    }
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let bank = match &a.bank {
        Some(p) => {
            let b = read_embeddings(p)?;
            if b.cols() != d {
                return Err(usage(format!("bank width {} differs from the model width {d}", b.cols())));
            }
            Some(b)
        }
        None => None,
    };
    let sampler = SamplerConfig {
        steps: a.steps,
        guidance_scale: a.guidance,
        eta: a.eta,
    };
    let schedule = tm.schedule.build()?;
    let prefix = EmbeddingSequence::new(prefix);
    let mut rng = SeededRng::new(a.seed);
    let mut out = Matrix::zeros(a.count, d);
    for i in 0..a.count {
        let z = sample_next(&params, &tm.model, &prefix, &schedule, &sampler, &mut rng)?;
        out.row_mut(i).copy_from_slice(&z);
    }
    ensure_parent(&a.out)?;
    write_embeddings(&a.out, &out)?;
    if let Some(b) = &bank {
        for (i, r) in out.iter_rows().enumerate() {
            println!("sample {i}: caption {}", nearest_decode(r, b)?);
        }
    }
    let mut cfg = RunConfig::default();
    cfg.sampler = sampler;
    cfg.latentdiff.model = tm.model.clone();
    cfg.latentdiff.train.schedule = tm.schedule;
    write_resolved(
        &parent_dir(&a.out),
        "sample",
        json!({"lcm": a.lcm, "prefix": a.prefix, "seed": a.seed, "count": a.count, "out": a.out, "bank": a.bank}),
        &cfg,
    )
}

pub fn schemas() -> Vec<(&'static str, serde_json::Value)> {
    let v = |s: schemars::Schema| s.to_value();
    vec![
        ("config.schema.json", v(schemars::schema_for!(RunConfig))),
        ("stage.schema.json", v(schemars::schema_for!(CurriculumStage))),
        ("report.schema.json", v(schemars::schema_for!(EvalReport))),
    ]
}

pub fn schema(a: &SchemaArgs) -> CliResult<()> {
    for (name, s) in schemas() {
        write_json_file(&a.out.join(name), &s)?;
    }
    Ok(())
}

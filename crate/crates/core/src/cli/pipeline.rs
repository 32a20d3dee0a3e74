use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::eval::{
    hparam_csv, hparam_sweep, summarize, summary_csv, sweep_conditions_with, HparamRow, PairPools, ResultsStore, SummaryRow,
    HPARAM_HEADER,
};
use crate::fsutil::atomic_write;
use crate::grammar::{load_pairs, write_pairs_jsonl, Grammar, Lexicon, TemplateVariant};
use crate::model::{load_checkpoint, save_checkpoint, train_lm, ModelCheckpoint};
use crate::stats;

use super::config::RunConfig;
use super::manifest::{RunManifest, Stage};
use super::plot;
use super::CliError;

pub const CORPUS_FILE: &str = "corpus.tok";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LEXICON_FILE: &str = "lexicon.toml";
pub const LM_LOSS_FILE: &str = "lm_loss.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const PAIRS_DIR: &str = "pairs";
pub const RESULTS_FILE: &str = "results.csv";
pub const HPARAM_FILE: &str = "hparam.csv";
pub const STATS_DIR: &str = "stats";
pub const PLOTS_DIR: &str = "plots";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StageOutcome {
    Ran { seconds: f64 },
    /// Already complete under the current config; nothing was written.
    UpToDate,
}

/// Files and directories a stage owns.
pub fn stage_outputs(out: &Path, stage: Stage) -> Vec<PathBuf> {
    match stage {
        Stage::GenCorpus => vec![out.join(CORPUS_FILE), out.join(VOCAB_FILE), out.join(LEXICON_FILE)],
        Stage::TrainLm => vec![out.join(CHECKPOINT_DIR), out.join(LM_LOSS_FILE)],
        Stage::GenPairs => vec![out.join(PAIRS_DIR)],
        Stage::Sweep => vec![out.join(RESULTS_FILE)],
        Stage::HparamSweep => vec![out.join(HPARAM_FILE)],
        Stage::Stats => vec![out.join(STATS_DIR)],
        Stage::Plot => vec![out.join(PLOTS_DIR)],
    }
}

fn remove_outputs(out: &Path, stage: Stage) -> Result<(), CliError> {
    for p in stage_outputs(out, stage) {
        let r = if p.is_dir() {
            std::fs::remove_dir_all(&p)
        } else {
            std::fs::remove_file(&p)
        };
        match r {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(CliError::Io(format!("removing {}: {e}", p.display()))),
        }
    }
    Ok(())
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    atomic_write(path, bytes).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

/// Runs `stage` unless the manifest already marks it complete under this
/// config. `force` discards the stage's outputs and those downstream first.
pub fn run_stage(cfg: &RunConfig, stage: Stage, force: bool) -> Result<StageOutcome, CliError> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    let hash = cfg.hash();
    let mut manifest = RunManifest::load_or_new(out, hash)?;
    if !force && manifest.is_current(stage) {
        return Ok(StageOutcome::UpToDate);
    }
    if !force && manifest.stages.contains_key(&stage) {
        return Err(CliError::Contract(format!(
            "`{stage}` completed under a different config; rerun with --force or choose a new out_dir"
        )));
    }
    manifest.require(stage)?;
    // A partial sweep from an earlier config must not be resumed.
    let stale_partial = manifest.started.get(&stage).is_some_and(|h| *h != manifest.config_hash);
    if force || stale_partial {
        remove_outputs(out, stage)?;
    }
    for d in stage.dependents() {
        if manifest.stages.contains_key(&d) || manifest.started.contains_key(&d) {
            remove_outputs(out, d)?;
        }
    }
    manifest.invalidate(stage);
    manifest.started.insert(stage, manifest.config_hash.clone());
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("creating {}: {e}", out.display())))?;
    manifest.save(out)?;

    let start = Instant::now();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers {
        pool = pool.num_threads(w);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Contract(format!("worker pool: {e}")))?;
    pool.install(|| match stage {
        Stage::GenCorpus => gen_corpus(cfg),
        Stage::TrainLm => train(cfg),
        Stage::GenPairs => gen_pairs(cfg),
        Stage::Sweep => sweep(cfg),
        Stage::HparamSweep => hparam(cfg),
        Stage::Stats => run_stats(cfg),
        Stage::Plot => run_plot(cfg),
    })?;
    let seconds = start.elapsed().as_secs_f64();
    manifest.started.remove(&stage);
    manifest.complete(stage, seconds);
    manifest.save(out)?;
    Ok(StageOutcome::Ran { seconds })
}

fn base_grammar(cfg: &RunConfig) -> Result<Grammar, CliError> {
    let lex = match &cfg.lexicon {
        Some(p) => Lexicon::load(p)?,
        None => Lexicon::default(),
    };
    Ok(Grammar::new(lex)?)
}

/// The lexicon snapshot written by `gen-corpus`.
pub fn run_grammar(out: &Path) -> Result<Grammar, CliError> {
    Ok(Grammar::new(Lexicon::load(&out.join(LEXICON_FILE))?)?)
}

fn gen_corpus(cfg: &RunConfig) -> Result<(), CliError> {
    let out = &cfg.out_dir;
    let g = base_grammar(cfg)?;
    let corpus = g.generate_corpus(&cfg.corpus)?;
    let bytes: Vec<u8> = corpus.iter().flat_map(|t| t.to_le_bytes()).collect();
    write(&out.join(CORPUS_FILE), &bytes)?;
    let mut vocab = g.vocab.words().join("\n");
    vocab.push('\n');
    write(&out.join(VOCAB_FILE), vocab.as_bytes())?;
    write(&out.join(LEXICON_FILE), g.lexicon.to_toml_string().as_bytes())?;
    eprintln!("gen-corpus: {} tokens, vocabulary {}", corpus.len(), g.vocab.len());
    Ok(())
}

pub fn read_corpus(out: &Path) -> Result<Vec<u32>, CliError> {
    let path = out.join(CORPUS_FILE);
    let bytes = std::fs::read(&path).map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    if bytes.len() % 4 != 0 {
        return Err(CliError::Contract(format!("{} is truncated", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn checkpoint_path(out: &Path, index: usize) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("ckpt{index:02}.gsck"))
}

fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let out = &cfg.out_dir;
    let g = run_grammar(out)?;
    let corpus = read_corpus(out)?;
    let model = cfg.model.with_vocab(g.vocab.len());
    let outcome = train_lm(&model, &cfg.lm, &corpus, g.bos(), &cfg.schedule)?;
    for (i, ckpt) in outcome.checkpoints.iter().enumerate() {
        save_checkpoint(ckpt, &checkpoint_path(out, i))?;
    }
    let mut csv = String::from("step,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l:.6}");
    }
    write(&out.join(LM_LOSS_FILE), csv.as_bytes())?;
    eprintln!(
        "train-lm: {} checkpoints, final loss {:.4}",
        outcome.checkpoints.len(),
        outcome.losses.last().copied().unwrap_or(f32::NAN)
    );
    Ok(())
}

pub fn load_checkpoint_at(out: &Path, index: usize) -> Result<ModelCheckpoint, CliError> {
    let path = checkpoint_path(out, index);
    if !path.exists() {
        return Err(CliError::Contract(format!(
            "checkpoint {} is missing; run `gapscope train-lm --force`",
            path.display()
        )));
    }
    Ok(load_checkpoint(&path)?)
}

fn pair_path(out: &Path, seed: u64, variant: TemplateVariant, split: &str) -> PathBuf {
    out.join(PAIRS_DIR)
        .join(format!("seed{seed}"))
        .join(format!("{}_{split}.jsonl", variant.name()))
}

fn pair_seeds(cfg: &RunConfig) -> Vec<u64> {
    let mut s: Vec<u64> = cfg.seeds.iter().chain(cfg.hparam_seeds()).copied().collect();
    s.sort_unstable();
    s.dedup();
    s
}

fn gen_pairs(cfg: &RunConfig) -> Result<(), CliError> {
    let out = &cfg.out_dir;
    let g = run_grammar(out)?;
    let seeds = pair_seeds(cfg);
    for &seed in &seeds {
        let pools = PairPools::generate(&g, &TemplateVariant::ALL, &TemplateVariant::ALL, &cfg.sweep, seed)?;
        for (split, pool) in [("train", &pools.train), ("heldout", &pools.heldout)] {
            for (&v, pairs) in pool {
                let mut buf = Vec::new();
                write_pairs_jsonl(&mut buf, pairs)?;
                write(&pair_path(out, seed, v, split), &buf)?;
            }
        }
    }
    eprintln!("gen-pairs: {} seed(s) × 4 variants", seeds.len());
    Ok(())
}

fn load_pools(
    out: &Path,
    seed: u64,
    train: &[TemplateVariant],
    eval: &[TemplateVariant],
) -> Result<PairPools, CliError> {
    let read = |v: TemplateVariant, split: &str| -> Result<_, CliError> {
        let p = pair_path(out, seed, v, split);
        if !p.exists() {
            return Err(CliError::Contract(format!(
                "pair file {} is missing; run `gapscope gen-pairs --force`",
                p.display()
            )));
        }
        Ok(load_pairs(&p)?)
    };
    let mut pools = PairPools {
        seed,
        train: BTreeMap::new(),
        heldout: BTreeMap::new(),
    };
    for &v in train {
        pools.train.insert(v, read(v, "train")?);
    }
    for &v in eval {
        pools.heldout.insert(v, read(v, "heldout")?);
    }
    Ok(pools)
}

fn sweep(cfg: &RunConfig) -> Result<(), CliError> {
    let out = &cfg.out_dir;
    let mut store = ResultsStore::open(&out.join(RESULTS_FILE))?;
    for index in cfg.sweep_checkpoints() {
        let ckpt = load_checkpoint_at(out, index)?;
        let conditions = cfg.conditions_at(index);
        let start = Instant::now();
        let mut pool_err = None;
        let res = sweep_conditions_with(&ckpt, &conditions, &cfg.sweep, &cfg.seeds, &mut store, |t, e, seed| {
            load_pools(out, seed, t, e).map_err(|err| {
                let msg = err.to_string();
                pool_err = Some(err);
                crate::eval::EvalError::Contract(msg)
            })
        });
        if let Err(e) = res {
            return Err(pool_err.unwrap_or_else(|| e.into()));
        }
        eprintln!(
            "sweep: {} ({} tokens), {} condition(s) × {} seed(s) in {:.1}s",
            ckpt.id(),
            ckpt.tokens_seen,
            conditions.len(),
            cfg.seeds.len(),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

fn hparam(cfg: &RunConfig) -> Result<(), CliError> {
    let out = &cfg.out_dir;
    let g = run_grammar(out)?;
    let ckpt = load_checkpoint_at(out, cfg.hparam_checkpoint())?;
    let h = &cfg.hparam;
    let rows = hparam_sweep(&ckpt, &g, h.variant, &cfg.sweep, &h.batch_sizes, &h.steps, cfg.hparam_seeds())?;
    write(&out.join(HPARAM_FILE), hparam_csv(&rows).as_bytes())?;
    eprintln!("hparam-sweep: {} cells on {}", rows.len(), ckpt.id());
    Ok(())
}

fn load_summary(out: &Path) -> Result<Vec<SummaryRow>, CliError> {
    let records = ResultsStore::load(&out.join(RESULTS_FILE))?;
    if records.is_empty() {
        return Err(CliError::Contract(format!(
            "no records in {}; run `gapscope sweep` first",
            out.join(RESULTS_FILE).display()
        )));
    }
    Ok(summarize(&records))
}

fn run_stats(cfg: &RunConfig) -> Result<(), CliError> {
    let out = &cfg.out_dir;
    let rows = load_summary(out)?;
    let analysis = stats::analyze(&rows, cfg.stats.tokens)?;
    let mut report = stats::text_report(&analysis);
    let last = rows
        .iter()
        .max_by_key(|r| r.tokens_seen)
        .map(|r| r.checkpoint.clone())
        .expect("non-empty summary");
    match stats::within_across_test(&rows, &last) {
        Ok((seeds, t)) => {
            let _ = writeln!(
                report,
                "\nWithin minus across at {last} (paired over {} seeds): mean {:.3}, t({}) = {:.2}, one-sided p = {:.3e}",
                seeds.len(),
                t.mean_difference,
                t.df,
                t.t,
                t.p_greater
            );
        }
        Err(e) => {
            let _ = writeln!(report, "\nWithin minus across at {last}: not computed ({e})");
        }
    }
    let dir = out.join(STATS_DIR);
    let points = stats::trajectory_summary(&rows);
    write(&dir.join("summary.csv"), summary_csv(&rows).as_bytes())?;
    write(&dir.join("trajectory.csv"), stats::trajectory_csv(&points).as_bytes())?;
    write(&dir.join("coefficients.csv"), stats::coefficients_csv(&analysis.fit).as_bytes())?;
    write(&dir.join("contrasts.csv"), stats::contrasts_csv(&analysis.families).as_bytes())?;
    write(&dir.join("report.txt"), report.as_bytes())?;
    print!("{report}");
    Ok(())
}

/// Parses a file written by [`hparam_csv`].
pub fn read_hparam_csv(path: &Path) -> Result<Vec<HparamRow>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some(HPARAM_HEADER) {
        return Err(CliError::Contract(format!("{} has an unexpected header", path.display())));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let bad = || CliError::Contract(format!("{} line {}: malformed row", path.display(), i + 2));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(HparamRow {
                batch_size: f[0].parse().map_err(|_| bad())?,
                steps: f[1].parse().map_err(|_| bad())?,
                samples: f[2].parse().map_err(|_| bad())?,
                max_odds: f[3].parse().map_err(|_| bad())?,
                n_seeds: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn run_plot(cfg: &RunConfig) -> Result<(), CliError> {
    let out = &cfg.out_dir;
    let rows = load_summary(out)?;
    let dir = out.join(PLOTS_DIR);
    let pooled = stats::trajectory_by_direction(&rows);
    let split = stats::trajectory_summary(&rows);
    write(&dir.join("trajectory.csv"), stats::trajectory_csv(&pooled).as_bytes())?;
    write(&dir.join("trajectory.svg"), plot::trajectory_svg(&pooled).as_bytes())?;
    write(&dir.join("animacy.csv"), stats::trajectory_csv(&split).as_bytes())?;
    write(&dir.join("animacy.svg"), plot::animacy_svg(&split).as_bytes())?;
    let hp = out.join(HPARAM_FILE);
    if hp.exists() {
        let h = read_hparam_csv(&hp)?;
        if !h.is_empty() {
            write(&dir.join("hparam.csv"), hparam_csv(&h).as_bytes())?;
            write(&dir.join("hparam.svg"), plot::hparam_svg(&h).as_bytes())?;
            write(&dir.join("samples.csv"), plot::samples_csv(&h).as_bytes())?;
            write(&dir.join("samples.svg"), plot::samples_svg(&h).as_bytes())?;
        }
    }
    eprintln!("plot: figures written to {}", dir.display());
    Ok(())
}

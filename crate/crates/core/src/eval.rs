//! Odds metric, layer×slot sweeps and the transfer experiment matrix.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::hash::Hasher;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fnv::FnvHasher;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::das::{
    apply_direction, intervened_final_logits, train_direction_cached, DasDirection, DasError, DasTrainConfig,
    InterventionSite, PairCache,
};
use crate::fsutil::atomic_write;
use crate::grammar::{Construction, Grammar, GrammarError, MinimalPair, Split, TemplateVariant, SLOT_COUNT};
use crate::model::{ModelCheckpoint, ModelError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Das(#[from] DasError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("results store line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, EvalError>;

pub const RESULTS_HEADER: &str =
    "checkpoint,tokens_seen,train_cond,eval_cond,direction,animacy_match,seed,layer,position,odds,n_pairs";

/// `ln P(base|clean)/P(source|clean) + ln P(source|int)/P(base|int)` from
/// final-position logits. The log-partition terms cancel inside each ratio.
pub fn odds_from_logits(clean: &[f32], intervened: &[f32], base_label: u32, source_label: u32) -> Result<f64> {
    let (b, s) = (base_label as usize, source_label as usize);
    if clean.len() != intervened.len() || b >= clean.len() || s >= clean.len() {
        return Err(EvalError::Contract(format!(
            "labels ({b}, {s}) or logit widths ({}, {}) inconsistent",
            clean.len(),
            intervened.len()
        )));
    }
    let c = clean[b] as f64 - clean[s] as f64;
    let i = intervened[s] as f64 - intervened[b] as f64;
    Ok(c + i)
}

/// Odds of one pair under `dir`, via a full clean forward and a cached resume.
pub fn odds(ckpt: &ModelCheckpoint, pair: &MinimalPair, dir: &DasDirection) -> Result<f64> {
    let (clean, int) = apply_direction(ckpt, pair, dir)?;
    let last = clean.rows() - 1;
    odds_from_logits(clean.row(last), int.row(last), pair.base_label, pair.source_label)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub mean: f64,
    pub per_pair: Vec<f64>,
}

pub fn eval_direction(ckpt: &ModelCheckpoint, dir: &DasDirection, heldout: &[MinimalPair]) -> Result<EvalSummary> {
    if heldout.is_empty() {
        return Err(EvalError::Contract("empty held-out pair list".into()));
    }
    let cache = PairCache::build(ckpt, heldout)?;
    eval_direction_cached(ckpt, dir, &cache)
}

pub fn eval_direction_cached(ckpt: &ModelCheckpoint, dir: &DasDirection, cache: &PairCache) -> Result<EvalSummary> {
    eval_vector(ckpt, dir.site, &dir.a, cache)
}

fn eval_vector(ckpt: &ModelCheckpoint, site: InterventionSite, a: &[f32], cache: &PairCache) -> Result<EvalSummary> {
    if cache.is_empty() {
        return Err(EvalError::Contract("empty held-out pair list".into()));
    }
    let int = intervened_final_logits(ckpt, cache, site, a)?;
    let per_pair = cache
        .pairs()
        .iter()
        .enumerate()
        .map(|(i, p)| odds_from_logits(cache.clean_final(i), &int[i], p.base_label, p.source_label))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
    Ok(EvalSummary { mean, per_pair })
}

/// Qualitative strength of a max-odds value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdBands {
    pub near_zero: f64,
    pub emerging_low: f64,
    pub emerging_high: f64,
    pub strong: f64,
}

impl Default for ThresholdBands {
    fn default() -> Self {
        Self {
            near_zero: 1.0,
            emerging_low: 3.0,
            emerging_high: 6.0,
            strong: 8.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    NearZero,
    Emerging,
    Strong,
    /// Between the named bands.
    Unlabeled,
}

impl ThresholdBands {
    pub fn classify(&self, odds: f64) -> Band {
        if odds.abs() < self.near_zero {
            Band::NearZero
        } else if odds > self.strong {
            Band::Strong
        } else if (self.emerging_low..=self.emerging_high).contains(&odds) {
            Band::Emerging
        } else {
            Band::Unlabeled
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TransferDirection {
    WhWh,
    TopicTopic,
    WhTopic,
    TopicWh,
}

impl TransferDirection {
    pub const ALL: [Self; 4] = [Self::WhWh, Self::TopicTopic, Self::WhTopic, Self::TopicWh];

    pub fn between(train: Construction, eval: Construction) -> Self {
        match (train, eval) {
            (Construction::Wh, Construction::Wh) => Self::WhWh,
            (Construction::Topic, Construction::Topic) => Self::TopicTopic,
            (Construction::Wh, Construction::Topic) => Self::WhTopic,
            (Construction::Topic, Construction::Wh) => Self::TopicWh,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::WhWh => "wh-wh",
            Self::TopicTopic => "topic-topic",
            Self::WhTopic => "wh-topic",
            Self::TopicWh => "topic-wh",
        }
    }

    pub fn is_within(&self) -> bool {
        matches!(self, Self::WhWh | Self::TopicTopic)
    }
}

impl fmt::Display for TransferDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransferDirection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| format!("unknown transfer direction {s:?}"))
    }
}

/// Train and evaluation variants of one cell of the experiment matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Condition {
    pub train: TemplateVariant,
    pub eval: TemplateVariant,
}

impl Condition {
    pub fn direction(&self) -> TransferDirection {
        TransferDirection::between(self.train.construction, self.eval.construction)
    }

    pub fn animacy_match(&self) -> bool {
        self.train.animacy == self.eval.animacy
    }

    /// All 16 train × eval pairings.
    pub fn all() -> Vec<Self> {
        TemplateVariant::ALL
            .into_iter()
            .flat_map(|train| TemplateVariant::ALL.into_iter().map(move |eval| Self { train, eval }))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OddsRecord {
    pub checkpoint: String,
    pub tokens_seen: u64,
    pub train_cond: TemplateVariant,
    pub eval_cond: TemplateVariant,
    pub direction: TransferDirection,
    pub animacy_match: bool,
    pub seed: u64,
    pub layer: usize,
    pub position: usize,
    pub odds: f64,
    pub n_pairs: usize,
}

/// Identity of a record in the results store.
pub type CellKey = (String, TemplateVariant, TemplateVariant, u64, usize, usize);

impl OddsRecord {
    pub fn key(&self) -> CellKey {
        (
            self.checkpoint.clone(),
            self.train_cond,
            self.eval_cond,
            self.seed,
            self.layer,
            self.position,
        )
    }

    pub fn condition(&self) -> Condition {
        Condition {
            train: self.train_cond,
            eval: self.eval_cond,
        }
    }

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{:.6},{}",
            self.checkpoint,
            self.tokens_seen,
            self.train_cond,
            self.eval_cond,
            self.direction,
            self.animacy_match,
            self.seed,
            self.layer,
            self.position,
            self.odds,
            self.n_pairs
        )
    }

    pub fn from_csv_line(line: &str, line_no: usize) -> Result<Self> {
        let err = |msg: String| EvalError::Parse { line: line_no, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(err(format!("expected 11 fields, found {}", f.len())));
        }
        fn num<T: FromStr>(s: &str, what: &str, line: usize) -> Result<T> {
            s.parse().map_err(|_| EvalError::Parse {
                line,
                msg: format!("bad {what} {s:?}"),
            })
        }
        let train_cond: TemplateVariant = f[2].parse().map_err(|e: GrammarError| err(e.to_string()))?;
        let eval_cond: TemplateVariant = f[3].parse().map_err(|e: GrammarError| err(e.to_string()))?;
        let direction: TransferDirection = f[4].parse().map_err(err)?;
        let rec = Self {
            checkpoint: f[0].to_string(),
            tokens_seen: num(f[1], "tokens_seen", line_no)?,
            train_cond,
            eval_cond,
            direction,
            animacy_match: num(f[5], "animacy_match", line_no)?,
            seed: num(f[6], "seed", line_no)?,
            layer: num(f[7], "layer", line_no)?,
            position: num(f[8], "position", line_no)?,
            odds: num(f[9], "odds", line_no)?,
            n_pairs: num(f[10], "n_pairs", line_no)?,
        };
        let cond = rec.condition();
        if cond.direction() != rec.direction || cond.animacy_match() != rec.animacy_match {
            return Err(err("direction or animacy flag inconsistent with conditions".into()));
        }
        if !rec.odds.is_finite() {
            return Err(err("non-finite odds".into()));
        }
        Ok(rec)
    }
}

/// Append-only CSV of odds records with a single writer.
#[derive(Debug)]
pub struct ResultsStore {
    path: Option<PathBuf>,
    records: Vec<OddsRecord>,
    keys: HashSet<CellKey>,
}

impl ResultsStore {
    /// A store that is never written to disk.
    pub fn in_memory() -> Self {
        Self {
            path: None,
            records: Vec::new(),
            keys: HashSet::new(),
        }
    }

    /// Opens (or creates) the store at `path`. A trailing line cut short by
    /// an interrupted append is dropped.
    pub fn open(path: &Path) -> Result<Self> {
        let mut store = Self {
            path: Some(path.to_path_buf()),
            ..Self::in_memory()
        };
        if !path.exists() {
            atomic_write(path, format!("{RESULTS_HEADER}\n").as_bytes())?;
            return Ok(store);
        }
        let text = std::fs::read_to_string(path)?;
        let complete = match text.rfind('\n') {
            Some(i) => &text[..=i],
            None => "",
        };
        let mut lines = complete.lines();
        match lines.next() {
            Some(h) if h == RESULTS_HEADER => {}
            Some(h) => {
                return Err(EvalError::Parse {
                    line: 1,
                    msg: format!("unexpected header {h:?}"),
                })
            }
            None => {}
        }
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            store.insert(OddsRecord::from_csv_line(line, i + 2)?);
        }
        if complete.len() != text.len() || complete.is_empty() {
            let mut body = format!("{RESULTS_HEADER}\n");
            for r in &store.records {
                body.push_str(&r.to_csv_line());
                body.push('\n');
            }
            atomic_write(path, body.as_bytes())?;
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Vec<OddsRecord>> {
        if !path.exists() {
            return Err(EvalError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("results store {} not found", path.display()),
            )));
        }
        let f = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            if i == 0 || line.is_empty() {
                continue;
            }
            out.push(OddsRecord::from_csv_line(&line, i + 1)?);
        }
        Ok(out)
    }

    fn insert(&mut self, rec: OddsRecord) -> bool {
        if self.keys.insert(rec.key()) {
            self.records.push(rec);
            true
        } else {
            false
        }
    }

    pub fn contains(&self, key: &CellKey) -> bool {
        self.keys.contains(key)
    }

    pub fn records(&self) -> &[OddsRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends records not yet present, in the given order.
    pub fn append(&mut self, recs: Vec<OddsRecord>) -> Result<()> {
        let mut body = String::new();
        for r in recs {
            let line = r.to_csv_line();
            if self.insert(r) {
                body.push_str(&line);
                body.push('\n');
            }
        }
        if let (Some(path), false) = (&self.path, body.is_empty()) {
            let mut f = OpenOptions::new().append(true).open(path)?;
            f.write_all(body.as_bytes())?;
            f.sync_data()?;
        }
        Ok(())
    }
}

/// Parameters shared by every sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// The seed field is replaced by each experiment seed.
    #[serde(default)]
    pub das: DasTrainConfig,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    /// Residual layers to sweep; all when absent.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    /// Template slots to sweep; all when absent.
    #[serde(default)]
    pub slots: Option<Vec<usize>>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            das: DasTrainConfig::default(),
            train_pairs: 500,
            heldout_pairs: 200,
            layers: None,
            slots: None,
        }
    }
}

impl SweepConfig {
    pub fn sites(&self, n_layers: usize) -> Result<Vec<InterventionSite>> {
        let layers: Vec<usize> = self.layers.clone().unwrap_or_else(|| (0..=n_layers).collect());
        let slots: Vec<usize> = self.slots.clone().unwrap_or_else(|| (0..SLOT_COUNT).collect());
        if layers.is_empty() || slots.is_empty() {
            return Err(EvalError::Contract("sweep grid is empty".into()));
        }
        if let Some(l) = layers.iter().find(|&&l| l > n_layers) {
            return Err(EvalError::Contract(format!("layer {l} exceeds n_layers {n_layers}")));
        }
        if let Some(s) = slots.iter().find(|&&s| s >= SLOT_COUNT) {
            return Err(EvalError::Contract(format!("slot {s} out of range")));
        }
        Ok(layers
            .iter()
            .flat_map(|&layer| slots.iter().map(move |&slot| InterventionSite { layer, slot }))
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.das.validate()?;
        if self.train_pairs < self.das.batch_size {
            return Err(EvalError::Contract(format!(
                "train_pairs {} is below the DAS batch size {}",
                self.train_pairs, self.das.batch_size
            )));
        }
        if self.heldout_pairs == 0 {
            return Err(EvalError::Contract("heldout_pairs must be positive".into()));
        }
        Ok(())
    }
}

/// Seed of the pair pools drawn for one experiment seed.
fn pool_seed(seed: u64) -> u64 {
    let mut h = FnvHasher::default();
    h.write(b"pairs");
    h.write(&seed.to_le_bytes());
    h.finish()
}

/// Training and held-out pair pools of one experiment seed.
#[derive(Debug, Clone)]
pub struct PairPools {
    pub seed: u64,
    pub train: BTreeMap<TemplateVariant, Vec<MinimalPair>>,
    pub heldout: BTreeMap<TemplateVariant, Vec<MinimalPair>>,
}

impl PairPools {
    pub fn generate(
        grammar: &Grammar,
        train_variants: &[TemplateVariant],
        eval_variants: &[TemplateVariant],
        cfg: &SweepConfig,
        seed: u64,
    ) -> Result<Self> {
        let s = pool_seed(seed);
        let mut train = BTreeMap::new();
        for &v in train_variants {
            train.insert(v, grammar.generate_pairs(v, cfg.train_pairs, s, Split::Train)?);
        }
        let mut heldout = BTreeMap::new();
        for &v in eval_variants {
            heldout.insert(v, grammar.generate_pairs(v, cfg.heldout_pairs, s, Split::Heldout)?);
        }
        Ok(Self { seed, train, heldout })
    }

    /// Every requested variant is present, training pools fill at least one
    /// batch and held-out pools are non-empty.
    pub fn check(&self, train: &[TemplateVariant], eval: &[TemplateVariant], batch_size: usize) -> Result<()> {
        for v in train {
            match self.train.get(v) {
                Some(p) if p.len() >= batch_size => {}
                Some(p) => {
                    return Err(EvalError::Contract(format!(
                        "{} training pairs for {v} (seed {}) are fewer than the batch size {batch_size}",
                        p.len(),
                        self.seed
                    )))
                }
                None => return Err(EvalError::Contract(format!("no training pairs for {v} (seed {})", self.seed))),
            }
        }
        for v in eval {
            if self.heldout.get(v).is_none_or(|p| p.is_empty()) {
                return Err(EvalError::Contract(format!("no held-out pairs for {v} (seed {})", self.seed)));
            }
        }
        Ok(())
    }
}

/// One trained direction evaluated on several held-out pools.
#[derive(Debug, Clone)]
struct Cell {
    train: TemplateVariant,
    site: InterventionSite,
    evals: Vec<TemplateVariant>,
}

struct SeedContext<'a> {
    ckpt: &'a ModelCheckpoint,
    seed: u64,
    das: DasTrainConfig,
    train: BTreeMap<TemplateVariant, PairCache>,
    heldout: BTreeMap<TemplateVariant, PairCache>,
}

impl SeedContext<'_> {
    fn run(&self, cell: &Cell) -> Result<Vec<OddsRecord>> {
        let dir = train_direction_cached(self.ckpt, &self.train[&cell.train], cell.site, &self.das)?;
        cell.evals
            .iter()
            .map(|&eval| {
                let cache = &self.heldout[&eval];
                let summary = eval_direction_cached(self.ckpt, &dir, cache)?;
                let cond = Condition { train: cell.train, eval };
                Ok(OddsRecord {
                    checkpoint: self.ckpt.id(),
                    tokens_seen: self.ckpt.tokens_seen,
                    train_cond: cell.train,
                    eval_cond: eval,
                    direction: cond.direction(),
                    animacy_match: cond.animacy_match(),
                    seed: self.seed,
                    layer: cell.site.layer,
                    position: cell.site.slot,
                    odds: summary.mean,
                    n_pairs: cache.len(),
                })
            })
            .collect()
    }
}

/// Trains one direction per (seed, train variant, site) and evaluates it on
/// every requested variant of `conditions`. Cells already in `store` are
/// skipped; new records are appended in a fixed order, so the store's bytes
/// do not depend on scheduling.
pub fn sweep_conditions(
    ckpt: &ModelCheckpoint,
    grammar: &Grammar,
    conditions: &[Condition],
    cfg: &SweepConfig,
    seeds: &[u64],
    store: &mut ResultsStore,
) -> Result<()> {
    sweep_conditions_with(ckpt, conditions, cfg, seeds, store, |train, eval, seed| {
        PairPools::generate(grammar, train, eval, cfg, seed)
    })
}

/// As [`sweep_conditions`], with pair pools supplied by `pools` (called with
/// the train variants, eval variants and seed) instead of generated.
pub fn sweep_conditions_with<F>(
    ckpt: &ModelCheckpoint,
    conditions: &[Condition],
    cfg: &SweepConfig,
    seeds: &[u64],
    store: &mut ResultsStore,
    mut pools: F,
) -> Result<()>
where
    F: FnMut(&[TemplateVariant], &[TemplateVariant], u64) -> Result<PairPools>,
{
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(EvalError::Contract("seed list is empty".into()));
    }
    if conditions.is_empty() {
        return Err(EvalError::Contract("no conditions requested".into()));
    }
    let sites = cfg.sites(ckpt.config.n_layers)?;
    let mut by_train: BTreeMap<TemplateVariant, Vec<TemplateVariant>> = BTreeMap::new();
    for c in conditions {
        let evals = by_train.entry(c.train).or_default();
        if !evals.contains(&c.eval) {
            evals.push(c.eval);
        }
    }
    let id = ckpt.id();
    for &seed in seeds {
        let mut cells = Vec::new();
        for (&train, evals) in &by_train {
            for &site in &sites {
                let missing: Vec<TemplateVariant> = evals
                    .iter()
                    .copied()
                    .filter(|&e| !store.contains(&(id.clone(), train, e, seed, site.layer, site.slot)))
                    .collect();
                if !missing.is_empty() {
                    cells.push(Cell {
                        train,
                        site,
                        evals: missing,
                    });
                }
            }
        }
        if cells.is_empty() {
            continue;
        }
        let train_variants: Vec<TemplateVariant> = by_train.keys().copied().collect();
        let mut eval_variants: Vec<TemplateVariant> = by_train.values().flatten().copied().collect();
        eval_variants.sort();
        eval_variants.dedup();
        let pools = pools(&train_variants, &eval_variants, seed)?;
        pools.check(&train_variants, &eval_variants, cfg.das.batch_size)?;
        let build = |m: &BTreeMap<TemplateVariant, Vec<MinimalPair>>| -> Result<BTreeMap<_, _>> {
            m.iter()
                .map(|(&v, pairs)| Ok((v, PairCache::build(ckpt, pairs)?)))
                .collect()
        };
        let ctx = SeedContext {
            ckpt,
            seed,
            das: DasTrainConfig { seed, ..cfg.das },
            train: build(&pools.train)?,
            heldout: build(&pools.heldout)?,
        };
        let results: Vec<Vec<OddsRecord>> = cells.par_iter().map(|c| ctx.run(c)).collect::<Result<_>>()?;
        store.append(results.into_iter().flatten().collect())?;
    }
    Ok(())
}

/// Layer×slot sweep of a single train/eval pairing.
pub fn sweep(
    ckpt: &ModelCheckpoint,
    grammar: &Grammar,
    train: TemplateVariant,
    eval: TemplateVariant,
    cfg: &SweepConfig,
    seeds: &[u64],
    store: &mut ResultsStore,
) -> Result<Vec<OddsRecord>> {
    sweep_conditions(ckpt, grammar, &[Condition { train, eval }], cfg, seeds, store)?;
    let id = ckpt.id();
    Ok(store
        .records()
        .iter()
        .filter(|r| r.checkpoint == id && r.train_cond == train && r.eval_cond == eval && seeds.contains(&r.seed))
        .cloned()
        .collect())
}

/// Every condition of `conditions` at every checkpoint, for all seeds.
pub fn run_experiment_matrix(
    checkpoints: &[ModelCheckpoint],
    grammar: &Grammar,
    conditions: &[Condition],
    cfg: &SweepConfig,
    seeds: &[u64],
    store: &mut ResultsStore,
) -> Result<()> {
    if checkpoints.is_empty() {
        return Err(EvalError::Contract("no checkpoints given".into()));
    }
    for ckpt in checkpoints {
        sweep_conditions(ckpt, grammar, conditions, cfg, seeds, store)?;
    }
    Ok(())
}

/// Largest odds in `records`, restricted to one slot when `position` is given.
pub fn max_odds(records: &[OddsRecord], position: Option<usize>) -> Result<f64> {
    records
        .iter()
        .filter(|r| position.is_none_or(|p| r.position == p))
        .map(|r| r.odds)
        .reduce(f64::max)
        .ok_or_else(|| EvalError::Contract("max_odds over an empty record set".into()))
}

/// Headline statistic of one (checkpoint, direction, animacy pairing, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub checkpoint: String,
    pub tokens_seen: u64,
    pub direction: TransferDirection,
    pub animacy_match: bool,
    pub seed: u64,
    /// Grid maximum, averaged over the train-animacy variants contributing
    /// to this cell.
    pub max_odds: f64,
}

/// Collapses records into summary rows, sorted by tokens seen, direction,
/// animacy pairing and seed.
pub fn summarize(records: &[OddsRecord]) -> Vec<SummaryRow> {
    type Key = (u64, String, TransferDirection, bool, u64);
    let mut grids: BTreeMap<Key, BTreeMap<TemplateVariant, f64>> = BTreeMap::new();
    for r in records {
        let key = (r.tokens_seen, r.checkpoint.clone(), r.direction, !r.animacy_match, r.seed);
        let m = grids.entry(key).or_default().entry(r.train_cond).or_insert(f64::NEG_INFINITY);
        *m = m.max(r.odds);
    }
    grids
        .into_iter()
        .map(|((tokens_seen, checkpoint, direction, mismatch, seed), by_train)| SummaryRow {
            checkpoint,
            tokens_seen,
            direction,
            animacy_match: !mismatch,
            seed,
            max_odds: by_train.values().sum::<f64>() / by_train.len() as f64,
        })
        .collect()
}

pub const SUMMARY_HEADER: &str = "checkpoint,tokens_seen,direction,animacy_match,seed,max_odds";

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6}\n",
            r.checkpoint, r.tokens_seen, r.direction, r.animacy_match, r.seed, r.max_odds
        ));
    }
    out
}

/// One cell of the batch-size × steps grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HparamRow {
    pub batch_size: usize,
    pub steps: usize,
    pub samples: usize,
    /// Seed-mean of the grid max-odds.
    pub max_odds: f64,
    pub n_seeds: usize,
}

pub const HPARAM_HEADER: &str = "batch_size,steps,samples,max_odds,n_seeds";

pub fn hparam_csv(rows: &[HparamRow]) -> String {
    let mut out = format!("{HPARAM_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{}\n",
            r.batch_size, r.steps, r.samples, r.max_odds, r.n_seeds
        ));
    }
    out
}

/// Wh→Wh max-odds for every (batch size, steps) combination on one
/// checkpoint.
pub fn hparam_sweep(
    ckpt: &ModelCheckpoint,
    grammar: &Grammar,
    variant: TemplateVariant,
    base: &SweepConfig,
    batch_sizes: &[usize],
    steps: &[usize],
    seeds: &[u64],
) -> Result<Vec<HparamRow>> {
    if batch_sizes.is_empty() || steps.is_empty() || seeds.is_empty() {
        return Err(EvalError::Contract("hyperparameter grid and seed list must be non-empty".into()));
    }
    let largest = batch_sizes.iter().copied().max().unwrap_or(0);
    let cfg = SweepConfig {
        train_pairs: base.train_pairs.max(largest),
        ..base.clone()
    };
    let sites = cfg.sites(ckpt.config.n_layers)?;
    let mut rows = Vec::new();
    let mut caches = Vec::new();
    for &seed in seeds {
        let pools = PairPools::generate(grammar, &[variant], &[variant], &cfg, seed)?;
        caches.push((
            seed,
            PairCache::build(ckpt, &pools.train[&variant])?,
            PairCache::build(ckpt, &pools.heldout[&variant])?,
        ));
    }
    for &batch_size in batch_sizes {
        for &n_steps in steps {
            let das = DasTrainConfig {
                batch_size,
                steps: n_steps,
                ..cfg.das
            };
            das.validate()?;
            let mut maxima = Vec::with_capacity(seeds.len());
            for (seed, train, heldout) in &caches {
                let das = DasTrainConfig { seed: *seed, ..das };
                let odds: Vec<f64> = sites
                    .par_iter()
                    .map(|&site| -> Result<f64> {
                        let dir = train_direction_cached(ckpt, train, site, &das)?;
                        Ok(eval_direction_cached(ckpt, &dir, heldout)?.mean)
                    })
                    .collect::<Result<_>>()?;
                maxima.push(odds.into_iter().fold(f64::NEG_INFINITY, f64::max));
            }
            rows.push(HparamRow {
                batch_size,
                steps: n_steps,
                samples: das.samples(),
                max_odds: maxima.iter().sum::<f64>() / maxima.len() as f64,
                n_seeds: maxima.len(),
            });
        }
    }
    Ok(rows)
}

/// Mean odds of a random unit direction; the untrained baseline.
pub fn random_direction_odds(
    ckpt: &ModelCheckpoint,
    site: InterventionSite,
    cache: &PairCache,
    seed: u64,
) -> Result<f64> {
    let a = crate::das::random_direction(ckpt.config.d_model, seed);
    Ok(eval_vector(ckpt, site, &a, cache)?.mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(odds: f64, layer: usize, position: usize) -> OddsRecord {
        OddsRecord {
            checkpoint: "ckpt00".into(),
            tokens_seen: 10,
            train_cond: TemplateVariant::WH_ANIMATE,
            eval_cond: TemplateVariant::TOPIC_INANIMATE,
            direction: TransferDirection::WhTopic,
            animacy_match: false,
            seed: 1,
            layer,
            position,
            odds,
            n_pairs: 4,
        }
    }

    #[test]
    fn symmetric_flip_closed_form() {
        let (p, q) = (0.9f32.ln(), 0.1f32.ln());
        let o = odds_from_logits(&[p, q], &[q, p], 0, 1).unwrap();
        assert!((o - 2.0 * 9f64.ln()).abs() < 1e-4);
    }

    #[test]
    fn max_odds_cases() {
        let rs = vec![rec(1.0, 0, 2), rec(3.5, 1, 2), rec(2.2, 2, 2), rec(9.0, 0, 4)];
        assert_eq!(max_odds(&rs, Some(2)).unwrap(), 3.5);
        assert_eq!(max_odds(&rs, None).unwrap(), 9.0);
        assert_eq!(max_odds(&rs[..1], None).unwrap(), 1.0);
        assert!(matches!(max_odds(&[], None), Err(EvalError::Contract(_))));
    }

    #[test]
    fn csv_round_trip() {
        let r = rec(-1.25, 3, 5);
        assert_eq!(OddsRecord::from_csv_line(&r.to_csv_line(), 2).unwrap(), r);
        assert_eq!(RESULTS_HEADER.split(',').count(), 11);
    }

    #[test]
    fn animacy_flags() {
        let c = Condition {
            train: TemplateVariant::WH_ANIMATE,
            eval: TemplateVariant::TOPIC_ANIMATE,
        };
        assert!(c.animacy_match());
        assert_eq!(c.direction(), TransferDirection::WhTopic);
        let c = Condition {
            train: TemplateVariant::WH_ANIMATE,
            eval: TemplateVariant::TOPIC_INANIMATE,
        };
        assert!(!c.animacy_match());
        assert_eq!(Condition::all().len(), 16);
    }

    #[test]
    fn bands() {
        let b = ThresholdBands::default();
        assert_eq!(b.classify(0.5), Band::NearZero);
        assert_eq!(b.classify(4.0), Band::Emerging);
        assert_eq!(b.classify(10.56), Band::Strong);
        assert_eq!(b.classify(7.0), Band::Unlabeled);
    }

    #[test]
    fn store_skips_duplicates_and_repairs_partial_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("results.csv");
        let mut s = ResultsStore::open(&p).unwrap();
        s.append(vec![rec(1.0, 0, 0), rec(2.0, 0, 1)]).unwrap();
        s.append(vec![rec(5.0, 0, 0)]).unwrap();
        assert_eq!(s.len(), 2);
        let mut text = std::fs::read_to_string(&p).unwrap();
        text.push_str("ckpt00,10,wh_an");
        std::fs::write(&p, &text).unwrap();
        let s = ResultsStore::open(&p).unwrap();
        assert_eq!(s.len(), 2);
        assert!(std::fs::read_to_string(&p).unwrap().ends_with('\n'));
        assert_eq!(ResultsStore::load(&p).unwrap().len(), 2);
    }
}

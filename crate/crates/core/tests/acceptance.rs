//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::{grammar, log_softmax, reference_logits, tiny_checkpoint};
use gapscope::das::{intervene, intervened_final_logits, loss_and_grad, random_direction, InterventionSite, PairCache, Readout};
use gapscope::eval::{max_odds, odds_from_logits, summarize, ResultsStore, SummaryRow, TransferDirection};
use gapscope::grammar::{MinimalPair, Split, TemplateVariant, SLOT_COUNT};
use gapscope::model::{load_checkpoint, ModelCheckpoint, Patch};
use gapscope::stats::{
    analyze, emm_contrasts, holm_bonferroni, mean, ols_fit, spearman, within_across_test, DesignMatrix, Factor,
    Predictor, TokenEncoding,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

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

/// The toy-scale experiment: default model, six log-spaced checkpoints,
/// six seeds. Wh→Wh at every checkpoint, all sixteen conditions at the last.
const TOY_CONFIG: &str = r#"out_dir = "run"
seeds = [1, 2, 3, 4, 5, 6]
schedule = [2000, 6000, 20000, 50000, 120000, 300000]
workers = 4

[model]
n_layers = 4
d_model = 64
n_heads = 4
max_seq_len = 16
seed = 0

[corpus]
total_tokens = 300000
seed = 1

[sweep]
train_pairs = 300
heldout_pairs = 100

[sweep.das]
batch_size = 25
steps = 80
learning_rate = 0.005
seed = 0

[experiment]
conditions = "wh_only"
final_conditions = "all"

[hparam]
batch_sizes = [8, 16, 25, 32]
steps = [40, 60, 80, 100, 120]
variant = "wh_animate"
seeds = [1]
"#;

/// A small config for the byte-level reproducibility check.
const REPRO_CONFIG: &str = r#"out_dir = "run"
seeds = [1, 2]
schedule = [4000, 16000]

[model]
n_layers = 2
d_model = 16
n_heads = 2
max_seq_len = 16
seed = 0

[corpus]
total_tokens = 16000
seed = 1

[sweep]
train_pairs = 16
heldout_pairs = 8

[sweep.das]
batch_size = 8
steps = 10
learning_rate = 0.005
seed = 0

[hparam]
batch_sizes = [8, 16]
steps = [4, 6]
"#;

const STAGES: [&str; 7] = ["gen-corpus", "train-lm", "gen-pairs", "sweep", "hparam-sweep", "stats", "plot"];

fn run_pipeline(dir: &Path, config: &str, workers: usize) -> Result<PathBuf, String> {
    let path = dir.join("gapscope.toml");
    std::fs::write(&path, config).map_err(|e| e.to_string())?;
    for stage in STAGES {
        let t = Instant::now();
        let o = Command::new(env!("CARGO_BIN_EXE_gapscope"))
            .arg("--config")
            .arg(&path)
            .args(["--workers", &workers.to_string(), stage])
            .output()
            .map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!("{stage}: {}", String::from_utf8_lossy(&o.stderr)));
        }
        eprintln!("  {stage}: {:.1}s", t.elapsed().as_secs_f64());
    }
    Ok(dir.join("run"))
}

fn within(elapsed: Duration, limit: Duration) -> bool {
    elapsed <= limit
}

// Criterion 1.

fn intervention_algebra() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let mut worst_orth = 0.0f32;
    let mut failures = Vec::new();
    for k in 0..1000 {
        let d = if k % 2 == 0 { 8 } else { 64 };
        let mut draw = |scale: f32| -> Vec<f32> { (0..d).map(|_| scale * normal.sample(&mut rng)).collect() };
        let hb = draw(2.0);
        let hs = draw(2.0);
        let raw = draw(1.0);
        let n = raw.iter().map(|v| v * v).sum::<f32>().sqrt();
        let a: Vec<f32> = raw.iter().map(|v| v / n).collect();
        let dot = |x: &[f32], y: &[f32]| -> f64 { x.iter().zip(y).map(|(p, q)| *p as f64 * *q as f64).sum() };
        let h = intervene(&hb, &hs, &a).unwrap();
        // Components orthogonal to a are those of the base.
        let (ph, pb) = (dot(&h, &a), dot(&hb, &a));
        for i in 0..d {
            let e = ((h[i] as f64 - a[i] as f64 * ph) - (hb[i] as f64 - a[i] as f64 * pb)).abs() as f32;
            worst_orth = worst_orth.max(e);
        }
        let twice = intervene(&h, &hs, &a).unwrap();
        let scale = h.iter().chain(&hs).map(|v| v.abs()).fold(1.0f32, f32::max);
        if twice.iter().zip(&h).any(|(x, y)| (x - y).abs() > 8.0 * d as f32 * f32::EPSILON * scale) {
            failures.push(format!("idempotence at triple {k}"));
        }
        let neg: Vec<f32> = a.iter().map(|v| -v).collect();
        if intervene(&hb, &hs, &neg).unwrap() != h {
            failures.push(format!("sign invariance at triple {k}"));
        }
        if intervene(&hb, &hb, &a).unwrap() != hb {
            failures.push(format!("null case at triple {k}"));
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_orth <= 1e-5 && failures.is_empty() && within(elapsed, Duration::from_secs(1));
    outcome(
        pass,
        format!(
            "max orthogonal drift {worst_orth:.2e}, {} exactness failures{}, {:.0} ms",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default(),
            elapsed.as_secs_f64() * 1e3
        ),
    )
}

// Criterion 2.

fn odds_metric() -> Outcome {
    let start = Instant::now();
    let ckpt = tiny_checkpoint();
    let mut pairs = grammar().generate_pairs(TemplateVariant::WH_ANIMATE, 20, 2, Split::Heldout).unwrap();
    for p in &mut pairs {
        p.source_tokens = p.base_tokens.clone();
        p.source_slots = p.base_slots;
    }
    let cache = PairCache::build(ckpt, &pairs).unwrap();
    let mut worst_noop = 0.0f64;
    for site in InterventionSite::grid(ckpt.config.n_layers) {
        let int = intervened_final_logits(ckpt, &cache, site, &random_direction(ckpt.config.d_model, 3)).unwrap();
        for (i, p) in pairs.iter().enumerate() {
            let o = odds_from_logits(cache.clean_final(i), &int[i], p.base_label, p.source_label).unwrap();
            worst_noop = worst_noop.max(o.abs());
        }
    }
    let (hi, lo) = (0.9f32.ln(), 0.1f32.ln());
    let flip = odds_from_logits(&[hi, lo], &[lo, hi], 0, 1).unwrap();
    let flip_err = (flip - 2.0 * 9f64.ln()).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_swap = 0.0f64;
    for _ in 0..1000 {
        let clean: Vec<f32> = (0..12).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let int: Vec<f32> = (0..12).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let (b, s) = (rng.gen_range(0..12), rng.gen_range(0..12));
        let o = odds_from_logits(&clean, &int, b, s).unwrap() + odds_from_logits(&clean, &int, s, b).unwrap();
        worst_swap = worst_swap.max(o.abs());
    }
    let elapsed = start.elapsed();
    let pass = worst_noop < 1e-5 && flip_err < 1e-4 && worst_swap < 1e-5 && within(elapsed, Duration::from_secs(1));
    outcome(
        pass,
        format!(
            "no-op max |odds| {worst_noop:.2e}, flip {flip:.5} (err {flip_err:.1e}), swap residual {worst_swap:.1e}, {:.0} ms",
            elapsed.as_secs_f64() * 1e3
        ),
    )
}

// Criterion 3.

/// Mean source-label cross-entropy after intervening along `a`, through
/// the f64 reference transformer.
fn reference_loss(ckpt: &ModelCheckpoint, batch: &[MinimalPair], site: InterventionSite, a: &[f64]) -> f64 {
    let mut total = 0.0;
    for p in batch {
        let (_, base) = ckpt.forward_with_cache(&p.base_tokens).unwrap();
        let (_, source) = ckpt.forward_with_cache(&p.source_tokens).unwrap();
        let pb = p.base_slots[site.slot];
        let hb = base.get(site.layer, pb);
        let hs = source.get(site.layer, p.source_slots[site.slot]);
        let proj: f64 = a.iter().zip(hs.iter().zip(hb)).map(|(ai, (s, b))| ai * (*s as f64 - *b as f64)).sum();
        let patched: Vec<f32> = hb.iter().zip(a).map(|(b, ai)| (*b as f64 + ai * proj) as f32).collect();
        let logits = reference_logits(ckpt, &p.base_tokens, Some((site.layer, pb, &patched)));
        total -= log_softmax(logits.last().unwrap())[p.source_label as usize];
    }
    total / batch.len() as f64
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let ckpt = tiny_checkpoint();
    let batch = grammar().generate_pairs(TemplateVariant::WH_ANIMATE, 20, 5, Split::Train).unwrap();
    let cache = PairCache::build(ckpt, &batch).unwrap();
    let idx: Vec<usize> = (0..batch.len()).collect();
    let h = 1e-3;
    let (mut checked, mut good) = (0usize, 0usize);
    for (k, site) in InterventionSite::grid(ckpt.config.n_layers).into_iter().enumerate() {
        let a = random_direction(ckpt.config.d_model, k as u64);
        let (_, grad) = loss_and_grad(ckpt, &cache, &idx, site, &a, Readout::FinalPosition).unwrap();
        let a64: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        for i in 0..a.len() {
            if grad[i].abs() <= 1e-6 {
                continue;
            }
            let mut plus = a64.clone();
            plus[i] += h;
            let mut minus = a64.clone();
            minus[i] -= h;
            let fd = (reference_loss(ckpt, &batch, site, &plus) - reference_loss(ckpt, &batch, site, &minus)) / (2.0 * h);
            let g = grad[i] as f64;
            checked += 1;
            if (g - fd).abs() / fd.abs().max(g.abs()) < 1e-2 {
                good += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let frac = good as f64 / checked.max(1) as f64;
    let pass = checked > 0 && frac >= 0.95 && within(elapsed, Duration::from_secs(60));
    outcome(
        pass,
        format!(
            "{good}/{checked} coordinates ({:.1}%) within 1e-2 relative error, {:.1}s",
            100.0 * frac,
            elapsed.as_secs_f64()
        ),
    )
}

// Criterion 4.

fn oracle_equivalence(ckpt: &ModelCheckpoint) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f32;
    for k in 0..100 {
        let variant = TemplateVariant::ALL[k % 4];
        let pair = grammar().generate_pairs(variant, 1, rng.gen(), Split::Heldout).unwrap();
        let site = InterventionSite::new(rng.gen_range(0..=ckpt.config.n_layers), rng.gen_range(0..SLOT_COUNT));
        let a = random_direction(ckpt.config.d_model, rng.gen());
        let cache = PairCache::build(ckpt, &pair).unwrap();
        let resumed = &intervened_final_logits(ckpt, &cache, site, &a).unwrap()[0];
        // Full recomputation without any cache.
        let p = &pair[0];
        let (_, base) = ckpt.forward_with_cache(&p.base_tokens).unwrap();
        let (_, source) = ckpt.forward_with_cache(&p.source_tokens).unwrap();
        let pb = p.base_slots[site.slot];
        let vector = intervene(base.get(site.layer, pb), source.get(site.layer, p.source_slots[site.slot]), &a).unwrap();
        let full = ckpt
            .forward_patched(&p.base_tokens, &Patch { layer: site.layer, position: pb, vector })
            .unwrap();
        for (x, y) in resumed.iter().zip(full.row(full.rows() - 1)) {
            worst = worst.max((x - y).abs());
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-4 && within(elapsed, Duration::from_secs(60)),
        format!("max |Δlogit| {worst:.2e} over 100 pairs and sites, {:.1}s", elapsed.as_secs_f64()),
    )
}

// Criterion 5.

fn wh_trajectory(rows: &[SummaryRow], elapsed: Duration) -> Outcome {
    let mut ckpts: Vec<(u64, String)> = rows.iter().map(|r| (r.tokens_seen, r.checkpoint.clone())).collect();
    ckpts.sort();
    ckpts.dedup();
    let seeds: std::collections::BTreeSet<u64> = rows.iter().map(|r| r.seed).collect();
    let mut means = Vec::new();
    for (_, c) in &ckpts {
        let per_seed: Vec<f64> = seeds
            .iter()
            .map(|&s| {
                let v: Vec<f64> = rows
                    .iter()
                    .filter(|r| &r.checkpoint == c && r.seed == s && r.direction == TransferDirection::WhWh)
                    .map(|r| r.max_odds)
                    .collect();
                mean(&v)
            })
            .collect();
        means.push(mean(&per_seed));
    }
    let tokens: Vec<f64> = ckpts.iter().map(|(t, _)| *t as f64).collect();
    let rho = spearman(&tokens, &means).unwrap_or(f64::NAN);
    let gain = means.last().unwrap() - means[0];
    let pass = ckpts.len() >= 6 && seeds.len() >= 6 && rho >= 0.8 && gain >= 3.0 && within(elapsed, Duration::from_secs(7200));
    let traj: Vec<String> = means.iter().map(|m| format!("{m:.2}")).collect();
    outcome(
        pass,
        format!(
            "{} checkpoints × {} seeds, Wh→Wh means [{}], Spearman {rho:.3}, gain {gain:.2}, sweep pipeline {:.0}s",
            ckpts.len(),
            seeds.len(),
            traj.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

// Criterion 6.

fn within_beats_across(rows: &[SummaryRow]) -> Outcome {
    let last = rows.iter().max_by_key(|r| r.tokens_seen).unwrap().checkpoint.clone();
    let seed_means = |within: bool| -> Vec<f64> {
        let seeds: std::collections::BTreeSet<u64> = rows.iter().map(|r| r.seed).collect();
        seeds
            .iter()
            .map(|&s| {
                let v: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.checkpoint == last && r.seed == s && r.direction.is_within() == within)
                    .map(|r| r.max_odds)
                    .collect();
                mean(&v)
            })
            .collect()
    };
    let (w, a) = (seed_means(true), seed_means(false));
    match within_across_test(rows, &last) {
        Ok((_, t)) => outcome(
            t.mean_difference > 0.0 && t.p_greater < 0.05,
            format!(
                "within {:.2} vs across {:.2}: difference {:.2}, t({}) = {:.2}, one-sided p = {:.2e}",
                mean(&w),
                mean(&a),
                t.mean_difference,
                t.df,
                t.t,
                t.p_greater
            ),
        ),
        Err(e) => outcome(false, e.to_string()),
    }
}

// Criterion 7.

fn statistics(rows: &[SummaryRow], contrasts_csv: &str) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    let beta = [2.0, -1.0, 0.5];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let (mut y, mut fa, mut fb) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..40 {
        for i in 0..2 {
            for j in 0..2 {
                fa.push(i);
                fb.push(j);
                y.push(beta[0] + beta[1] * i as f64 + beta[2] * j as f64 + noise.sample(&mut rng));
            }
        }
    }
    let factor = |name: &str, values: Vec<usize>| {
        Predictor::Factor(Factor {
            name: name.into(),
            levels: vec!["0".into(), "1".into()],
            values,
        })
    };
    let fit = ols_fit(&DesignMatrix::new(y, vec![factor("a", fa), factor("b", fb)]).unwrap()).unwrap();
    let worst = fit
        .coefficients
        .iter()
        .zip(beta)
        .map(|(g, w)| (g - w).abs() / w.abs())
        .fold(0.0, f64::max);
    pass &= worst <= 0.01;
    notes.push(format!("planted β max rel err {worst:.1e}"));

    let holm = holm_bonferroni(&[0.01, 0.04, 0.03]).unwrap();
    let holm_ok = holm.iter().zip([0.03, 0.06, 0.06]).all(|(g, w)| (g - w).abs() < 1e-12);
    pass &= holm_ok;
    notes.push(format!("Holm {holm:?}"));

    let g1 = [5.3, 4.1, 5.9, 4.7, 5.0, 5.0];
    let g2 = [3.2, 2.5, 3.8, 2.9, 3.6, 2.0];
    let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ss: f64 = g1.iter().map(|x| (x - m(&g1)).powi(2)).sum::<f64>() + g2.iter().map(|x| (x - m(&g2)).powi(2)).sum::<f64>();
    let t_direct = (m(&g1) - m(&g2)) / ((ss / 10.0).sqrt() * (1.0f64 / 6.0 + 1.0 / 6.0).sqrt());
    let y: Vec<f64> = g1.iter().chain(&g2).copied().collect();
    let fit = ols_fit(&DesignMatrix::new(y, vec![factor("g", (0..12).map(|i| usize::from(i >= 6)).collect())]).unwrap()).unwrap();
    let t_err = (emm_contrasts(&fit, "g", None).unwrap()[0].t - t_direct).abs();
    pass &= t_err < 1e-9;
    notes.push(format!("two-sample t err {t_err:.1e}"));

    match analyze(rows, TokenEncoding::Categorical) {
        Ok(a) => {
            let mut worst_d = 0.0f64;
            let mut n = 0;
            for (_, fam) in &a.families {
                for c in fam {
                    worst_d = worst_d.max((c.cohens_d - c.estimate / a.fit.residual_sd).abs());
                    n += 1;
                }
            }
            pass &= n > 0 && worst_d < 1e-9;
            // The written table carries the same relation, up to its rounding
            // (6 decimals for estimates, 4 for d).
            let sigma = a.fit.residual_sd;
            let mut table_ok = !contrasts_csv.is_empty();
            let mut m = 0;
            for line in contrasts_csv.lines().skip(1) {
                let f: Vec<f64> = line.split(',').skip(2).map(|v| v.parse().unwrap_or(f64::NAN)).collect();
                let (est, d) = (f[0], f[6]);
                table_ok &= (d - est / sigma).abs() <= 5e-5 + 5e-7 / sigma + 1e-12;
                m += 1;
            }
            pass &= table_ok && m == n;
            notes.push(format!(
                "d = est/σ̂ on {n} toy-run contrasts (max err {worst_d:.1e}), contrasts.csv consistent: {table_ok}"
            ));
        }
        Err(e) => {
            pass = false;
            notes.push(format!("toy-run analysis failed: {e}"));
        }
    }
    outcome(pass, notes.join("; "))
}

// Criterion 8.

fn reproducibility() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut outs = Vec::new();
    for (d, workers) in dirs.iter().zip([1, 4]) {
        match run_pipeline(d.path(), REPRO_CONFIG, workers) {
            Ok(o) => outs.push(o),
            Err(e) => return outcome(false, e),
        }
    }
    let files = ["results.csv", "hparam.csv", "stats/summary.csv", "stats/coefficients.csv", "stats/contrasts.csv", "plots/trajectory.csv"];
    let mut diffs = Vec::new();
    for f in files {
        let (a, b) = (std::fs::read(outs[0].join(f)), std::fs::read(outs[1].join(f)));
        match (a, b) {
            (Ok(a), Ok(b)) if a == b && !a.is_empty() => {}
            _ => diffs.push(f),
        }
    }
    let records = ResultsStore::load(&outs[0].join("results.csv")).map(|r| r.len()).unwrap_or(0);
    outcome(
        diffs.is_empty() && records > 0,
        if diffs.is_empty() {
            format!("{} CSVs byte-identical across two full runs ({records} odds records)", files.len())
        } else {
            format!("differing files: {diffs:?}")
        },
    )
}

// Criterion 9.

fn hparam_harness(out: &Path) -> Outcome {
    let text = match std::fs::read_to_string(out.join("hparam.csv")) {
        Ok(t) => t,
        Err(e) => return outcome(false, e.to_string()),
    };
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap_or(f64::NAN)).collect())
        .collect();
    let all_match = rows.iter().all(|r| r[2] == r[0] * r[1] && r[3].is_finite());
    let paper = rows.iter().find(|r| r[0] == 25.0 && r[1] == 80.0);
    let best = rows.iter().map(|r| r[3]).fold(f64::NEG_INFINITY, f64::max);
    outcome(
        rows.len() == 20 && all_match && paper.is_some_and(|r| r[2] == 2000.0),
        format!(
            "{} cells, samples = batch × steps in all: {all_match}, 25 × 80 → {} samples (max-odds {:.2}; grid best {best:.2})",
            rows.len(),
            paper.map(|r| r[2]).unwrap_or(f64::NAN),
            paper.map(|r| r[3]).unwrap_or(f64::NAN)
        ),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    results.push((1, "intervention algebra", intervention_algebra()));
    results.push((2, "odds metric", odds_metric()));
    results.push((3, "gradient correctness", gradient_correctness()));

    eprintln!("running the toy-scale pipeline (criteria 4-7, 9)");
    let toy = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let toy_out = run_pipeline(toy.path(), TOY_CONFIG, 4);
    let elapsed = start.elapsed();
    match &toy_out {
        Ok(out) => {
            let ckpt = load_checkpoint(&out.join("checkpoints/ckpt05.gsck")).unwrap();
            results.push((4, "oracle equivalence", oracle_equivalence(&ckpt)));
            let records = ResultsStore::load(&out.join("results.csv")).unwrap();
            let rows = summarize(&records);
            let final_max = max_odds(&records, None).unwrap_or(f64::NAN);
            eprintln!("  {} odds records, overall max {final_max:.2}", records.len());
            results.push((5, "toy developmental trajectory", wh_trajectory(&rows, elapsed)));
            results.push((6, "within > across", within_beats_across(&rows)));
            let contrasts = std::fs::read_to_string(out.join("stats/contrasts.csv")).unwrap_or_default();
            results.push((7, "statistics module", statistics(&rows, &contrasts)));
        }
        Err(e) => {
            for (n, name) in [(4, "oracle equivalence"), (5, "toy developmental trajectory"), (6, "within > across"), (7, "statistics module")] {
                results.push((n, name, outcome(false, format!("toy pipeline failed: {e}"))));
            }
        }
    }
    results.push((8, "reproducibility", reproducibility()));
    results.push((
        9,
        "hyperparameter harness",
        match &toy_out {
            Ok(out) => hparam_harness(out),
            Err(e) => outcome(false, format!("toy pipeline failed: {e}")),
        },
    ));

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, name, o) in &results {
        println!("criterion {n} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

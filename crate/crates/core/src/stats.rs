//! Linear model over max-odds summaries, marginal-mean contrasts and
//! trajectory bands.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};
use thiserror::Error;

use crate::eval::{SummaryRow, TransferDirection};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("singular design: column(s) {} are linear combinations of earlier columns", .columns.join(", "))]
    Singular { columns: Vec<String> },
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, StatsError>;

/// A categorical predictor; level 0 is the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub name: String,
    pub levels: Vec<String>,
    /// Level index of every observation.
    pub values: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    Factor(Factor),
    Covariate { name: String, values: Vec<f64> },
}

impl Predictor {
    pub fn name(&self) -> &str {
        match self {
            Self::Factor(f) => &f.name,
            Self::Covariate { name, .. } => name,
        }
    }

    fn len(&self) -> usize {
        match self {
            Self::Factor(f) => f.values.len(),
            Self::Covariate { values, .. } => values.len(),
        }
    }
}

/// Response plus treatment-coded predictors with an intercept column.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub y: Vec<f64>,
    pub predictors: Vec<Predictor>,
    pub columns: Vec<String>,
    x: DMatrix<f64>,
    /// Column range of each predictor.
    spans: Vec<(usize, usize)>,
}

impl DesignMatrix {
    pub fn new(y: Vec<f64>, predictors: Vec<Predictor>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(StatsError::Contract("empty response".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::Contract("response contains non-finite values".into()));
        }
        let mut columns = vec!["(intercept)".to_string()];
        let mut spans = Vec::new();
        for p in &predictors {
            if p.len() != n {
                return Err(StatsError::Contract(format!(
                    "predictor {} has {} values for {n} observations",
                    p.name(),
                    p.len()
                )));
            }
            let start = columns.len();
            match p {
                Predictor::Factor(f) => {
                    if f.levels.len() < 2 {
                        return Err(StatsError::Contract(format!("factor {} needs two or more levels", f.name)));
                    }
                    if let Some(v) = f.values.iter().find(|&&v| v >= f.levels.len()) {
                        return Err(StatsError::Contract(format!("factor {} has level index {v}", f.name)));
                    }
                    columns.extend(f.levels[1..].iter().map(|l| format!("{}[{}]", f.name, l)));
                }
                Predictor::Covariate { name, .. } => columns.push(name.clone()),
            }
            spans.push((start, columns.len()));
        }
        let mut x = DMatrix::zeros(n, columns.len());
        for i in 0..n {
            x[(i, 0)] = 1.0;
        }
        for (p, &(start, _)) in predictors.iter().zip(&spans) {
            match p {
                Predictor::Factor(f) => {
                    for (i, &v) in f.values.iter().enumerate() {
                        if v > 0 {
                            x[(i, start + v - 1)] = 1.0;
                        }
                    }
                }
                Predictor::Covariate { values, .. } => {
                    for (i, &v) in values.iter().enumerate() {
                        x[(i, start)] = v;
                    }
                }
            }
        }
        Ok(Self {
            y,
            predictors,
            columns,
            x,
            spans,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    fn predictor(&self, name: &str) -> Result<(usize, &Predictor)> {
        self.predictors
            .iter()
            .position(|p| p.name() == name)
            .map(|i| (i, &self.predictors[i]))
            .ok_or_else(|| StatsError::Contract(format!("unknown factor {name:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub design: DesignMatrix,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    pub r_squared: f64,
    pub f_statistic: f64,
    pub f_p_value: f64,
    pub df_model: usize,
    pub df_resid: usize,
    /// Residual standard deviation, `sqrt(RSS / df_resid)`.
    pub residual_sd: f64,
    /// `σ² (XᵀX)⁻¹`
    pub covariance: DMatrix<f64>,
}

/// Relative tolerance on the diagonal of R below which a column counts as
/// collinear.
const RANK_TOL: f64 = 1e-10;

pub fn ols_fit(design: &DesignMatrix) -> Result<OlsFit> {
    let n = design.n_obs();
    let p = design.n_cols();
    if n < p {
        return Err(StatsError::Singular {
            columns: design.columns[n..].to_vec(),
        });
    }
    let qr = design.x.clone().qr();
    let r = qr.r();
    let scale = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    let singular: Vec<String> = (0..p)
        .filter(|&i| r[(i, i)].abs() <= RANK_TOL * scale)
        .map(|i| design.columns[i].clone())
        .collect();
    if !singular.is_empty() {
        return Err(StatsError::Singular { columns: singular });
    }
    let y = DVector::from_column_slice(&design.y);
    let qty = qr.q().transpose() * &y;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| StatsError::Singular { columns: vec![] })?;
    let fitted = &design.x * &beta;
    let resid = &y - &fitted;
    let rss = resid.norm_squared();
    let mean = design.y.iter().sum::<f64>() / n as f64;
    let tss: f64 = design.y.iter().map(|v| (v - mean) * (v - mean)).sum();
    let df_model = p - 1;
    let df_resid = n - p;
    let sigma2 = if df_resid > 0 { rss / df_resid as f64 } else { f64::NAN };
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| StatsError::Singular { columns: vec![] })?;
    let covariance = (&r_inv * r_inv.transpose()) * sigma2;
    let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    let (f_statistic, f_p_value) = if df_model > 0 && df_resid > 0 {
        let f = ((tss - rss) / df_model as f64) / sigma2;
        (f, f_sf(f, df_model as f64, df_resid as f64))
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(OlsFit {
        design: design.clone(),
        coefficients: beta.iter().copied().collect(),
        std_errors: (0..p).map(|i| covariance[(i, i)].sqrt()).collect(),
        fitted: fitted.iter().copied().collect(),
        residuals: resid.iter().copied().collect(),
        r_squared,
        f_statistic,
        f_p_value,
        df_model,
        df_resid,
        residual_sd: sigma2.sqrt(),
        covariance,
    })
}

fn f_sf(f: f64, d1: f64, d2: f64) -> f64 {
    if !f.is_finite() {
        return if f > 0.0 { 0.0 } else { f64::NAN };
    }
    FisherSnedecor::new(d1, d2).map(|d| d.sf(f.max(0.0))).unwrap_or(f64::NAN)
}

/// Two-sided p-value of a t statistic.
pub fn t_two_sided(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return if t.is_nan() { f64::NAN } else { 0.0 };
    }
    let d = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    2.0 * d.sf(t.abs())
}

/// One-sided p-value `P(T ≥ t)`.
pub fn t_upper(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return if t > 0.0 { 0.0 } else { 1.0 };
    }
    StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom").sf(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorTest {
    pub factor: String,
    pub f: f64,
    pub df1: usize,
    pub df2: usize,
    pub p: f64,
}

/// Wald F test that all of a predictor's coefficients are zero.
pub fn factor_test(fit: &OlsFit, name: &str) -> Result<FactorTest> {
    let (i, _) = fit.design.predictor(name)?;
    let (start, end) = fit.design.spans[i];
    let q = end - start;
    let b = DVector::from_iterator(q, fit.coefficients[start..end].iter().copied());
    let v = fit.covariance.view((start, start), (q, q)).into_owned();
    let v_inv = v
        .try_inverse()
        .ok_or_else(|| StatsError::Degenerate(format!("covariance block of {name} is singular")))?;
    let f = (b.transpose() * v_inv * &b)[(0, 0)] / q as f64;
    Ok(FactorTest {
        factor: name.to_string(),
        f,
        df1: q,
        df2: fit.df_resid,
        p: f_sf(f, q as f64, fit.df_resid as f64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastResult {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
    pub df: usize,
    pub p_raw: f64,
    pub p_adjusted: f64,
    pub cohens_d: f64,
}

/// Coefficient weights of the marginal mean of every level of `name`,
/// averaging other factors equally over their levels and holding
/// covariates at their sample mean.
fn emm_weights(fit: &OlsFit, name: &str) -> Result<Vec<(String, DVector<f64>)>> {
    let (target, pred) = fit.design.predictor(name)?;
    let Predictor::Factor(f) = pred else {
        return Err(StatsError::Contract(format!("{name} is a covariate, not a factor")));
    };
    let p = fit.design.n_cols();
    let mut base = DVector::zeros(p);
    base[0] = 1.0;
    for (i, (pred, &(start, end))) in fit.design.predictors.iter().zip(&fit.design.spans).enumerate() {
        if i == target {
            continue;
        }
        match pred {
            Predictor::Factor(o) => {
                let w = 1.0 / o.levels.len() as f64;
                for c in start..end {
                    base[c] = w;
                }
            }
            Predictor::Covariate { values, .. } => {
                base[start] = values.iter().sum::<f64>() / values.len() as f64;
            }
        }
    }
    let (start, _) = fit.design.spans[target];
    Ok(f.levels
        .iter()
        .enumerate()
        .map(|(l, level)| {
            let mut w = base.clone();
            if l > 0 {
                w[start + l - 1] = 1.0;
            }
            (level.clone(), w)
        })
        .collect())
}

/// Estimated marginal mean and its SE for every level of a factor.
pub fn emm(fit: &OlsFit, factor: &str) -> Result<Vec<(String, f64, f64)>> {
    Ok(emm_weights(fit, factor)?
        .into_iter()
        .map(|(level, w)| {
            let (est, se) = linear_combination(fit, &w);
            (level, est, se)
        })
        .collect())
}

fn linear_combination(fit: &OlsFit, w: &DVector<f64>) -> (f64, f64) {
    let beta = DVector::from_column_slice(&fit.coefficients);
    let est = w.dot(&beta);
    let var = (w.transpose() * &fit.covariance * w)[(0, 0)];
    (est, var.max(0.0).sqrt())
}

fn contrast_from(fit: &OlsFit, name: String, w: &DVector<f64>) -> Result<ContrastResult> {
    let (estimate, se) = linear_combination(fit, w);
    let t = if se > 0.0 { estimate / se } else if estimate == 0.0 { 0.0 } else { f64::INFINITY };
    let p_raw = if fit.df_resid > 0 { t_two_sided(t, fit.df_resid as f64) } else { f64::NAN };
    Ok(ContrastResult {
        name,
        estimate,
        se,
        t,
        df: fit.df_resid,
        p_raw,
        p_adjusted: p_raw,
        cohens_d: cohens_d(estimate, fit.residual_sd)?,
    })
}

/// Pairwise differences of marginal means of `factor` with Holm-adjusted
/// p-values. `pairs` selects level index pairs; all pairs when `None`.
pub fn emm_contrasts(fit: &OlsFit, factor: &str, pairs: Option<&[(usize, usize)]>) -> Result<Vec<ContrastResult>> {
    let weights = emm_weights(fit, factor)?;
    let all: Vec<(usize, usize)> = (0..weights.len())
        .flat_map(|i| (i + 1..weights.len()).map(move |j| (i, j)))
        .collect();
    let pairs = pairs.unwrap_or(&all);
    let mut out = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        if i >= weights.len() || j >= weights.len() {
            return Err(StatsError::Contract(format!("level index out of range in ({i}, {j})")));
        }
        let w = &weights[i].1 - &weights[j].1;
        out.push(contrast_from(fit, format!("{} - {}", weights[i].0, weights[j].0), &w)?);
    }
    adjust_family(&mut out)?;
    Ok(out)
}

/// A weighted combination of marginal means, e.g. within minus across.
/// Weights refer to level names of `factor` and should sum to zero.
pub fn custom_contrast(fit: &OlsFit, factor: &str, name: &str, weights: &[(&str, f64)]) -> Result<ContrastResult> {
    let levels = emm_weights(fit, factor)?;
    let mut w = DVector::zeros(fit.design.n_cols());
    for &(level, c) in weights {
        let (_, lw) = levels
            .iter()
            .find(|(l, _)| l == level)
            .ok_or_else(|| StatsError::Contract(format!("factor {factor} has no level {level:?}")))?;
        w += lw * c;
    }
    contrast_from(fit, name.to_string(), &w)
}

/// Holm-adjusts the p-values of one family of contrasts in place.
pub fn adjust_family(family: &mut [ContrastResult]) -> Result<()> {
    let raw: Vec<f64> = family.iter().map(|c| c.p_raw).collect();
    for (c, p) in family.iter_mut().zip(holm_bonferroni(&raw)?) {
        c.p_adjusted = p;
    }
    Ok(())
}

/// Holm's step-down adjustment, returned in the input order.
pub fn holm_bonferroni(p_values: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(StatsError::Contract(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut out = vec![0.0; m];
    let mut running = 0.0f64;
    for (rank, &i) in order.iter().enumerate() {
        let adj = (p_values[i] * (m - rank) as f64).min(1.0);
        running = running.max(adj);
        out[i] = running;
    }
    Ok(out)
}

pub fn cohens_d(estimate: f64, residual_sd: f64) -> Result<f64> {
    if residual_sd.is_nan() || residual_sd <= 0.0 {
        return Err(StatsError::Degenerate(format!(
            "residual standard deviation is {residual_sd}; effect size undefined"
        )));
    }
    Ok(estimate / residual_sd)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n − 1 denominator); `None` below two values.
pub fn sample_sd(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    Some((ss / (values.len() - 1) as f64).sqrt())
}

/// Standard error of the mean; `None` below two values.
pub fn standard_error(values: &[f64]) -> Option<f64> {
    sample_sd(values).map(|sd| sd / (values.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub mean_difference: f64,
    pub t: f64,
    pub df: usize,
    /// One-sided p-value for a positive mean difference.
    pub p_greater: f64,
}

/// Paired t test of `a − b > 0`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(StatsError::Contract(format!(
            "paired test needs two equal-length samples of size ≥ 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let md = mean(&d);
    let se = standard_error(&d).expect("two or more differences");
    let t = if se > 0.0 {
        md / se
    } else if md > 0.0 {
        f64::INFINITY
    } else if md < 0.0 {
        f64::NEG_INFINITY
    } else {
        0.0
    };
    let df = d.len() - 1;
    Ok(PairedTest {
        mean_difference: md,
        t,
        df,
        p_greater: t_upper(t, df as f64),
    })
}

/// Spearman rank correlation, ties given their average rank.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(StatsError::Contract("spearman needs two equal-length samples of size ≥ 2".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(StatsError::Degenerate("constant sample has no rank correlation".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub checkpoint: String,
    pub tokens_seen: u64,
    pub direction: TransferDirection,
    /// `None` when matched and mismatched pairings are pooled.
    pub animacy_match: Option<bool>,
    pub mean: f64,
    /// Absent with a single seed.
    pub se: Option<f64>,
    pub n_seeds: usize,
}

type TrajKey = (u64, String, TransferDirection, Option<bool>);

fn points(groups: BTreeMap<TrajKey, BTreeMap<u64, Vec<f64>>>) -> Vec<TrajectoryPoint> {
    groups
        .into_iter()
        .map(|((tokens_seen, checkpoint, direction, animacy_match), by_seed)| {
            let v: Vec<f64> = by_seed.values().map(|xs| mean(xs)).collect();
            TrajectoryPoint {
                checkpoint,
                tokens_seen,
                direction,
                animacy_match,
                mean: mean(&v),
                se: standard_error(&v),
                n_seeds: v.len(),
            }
        })
        .collect()
}

/// Seed mean and SE of max-odds per checkpoint, direction and animacy pairing.
pub fn trajectory_summary(rows: &[SummaryRow]) -> Vec<TrajectoryPoint> {
    let mut groups: BTreeMap<TrajKey, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.tokens_seen, r.checkpoint.clone(), r.direction, Some(r.animacy_match)))
            .or_default()
            .entry(r.seed)
            .or_default()
            .push(r.max_odds);
    }
    points(groups)
}

/// As [`trajectory_summary`] with both animacy pairings averaged within
/// each seed first.
pub fn trajectory_by_direction(rows: &[SummaryRow]) -> Vec<TrajectoryPoint> {
    let mut groups: BTreeMap<TrajKey, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.tokens_seen, r.checkpoint.clone(), r.direction, None))
            .or_default()
            .entry(r.seed)
            .or_default()
            .push(r.max_odds);
    }
    points(groups)
}

pub const TRAJECTORY_HEADER: &str = "checkpoint,tokens_seen,direction,animacy_match,mean,se,n_seeds";

pub fn trajectory_csv(points: &[TrajectoryPoint]) -> String {
    let mut out = format!("{TRAJECTORY_HEADER}\n");
    for p in points {
        let se = p.se.map(|s| format!("{s:.6}")).unwrap_or_default();
        let m = p.animacy_match.map_or("pooled".to_string(), |m| m.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{},{}",
            p.checkpoint, p.tokens_seen, p.direction, m, p.mean, se, p.n_seeds
        );
    }
    out
}

/// Per-seed `mean(within) − mean(across)` at one checkpoint, tested
/// one-sided for a positive difference. Seeds lacking either side are
/// skipped.
pub fn within_across_test(rows: &[SummaryRow], checkpoint: &str) -> Result<(Vec<u64>, PairedTest)> {
    let mut by_seed: BTreeMap<u64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.checkpoint == checkpoint) {
        let e = by_seed.entry(r.seed).or_default();
        if r.direction.is_within() {
            e.0.push(r.max_odds);
        } else {
            e.1.push(r.max_odds);
        }
    }
    let mut seeds = Vec::new();
    let (mut within, mut across) = (Vec::new(), Vec::new());
    for (seed, (w, a)) in by_seed {
        if !w.is_empty() && !a.is_empty() {
            seeds.push(seed);
            within.push(mean(&w));
            across.push(mean(&a));
        }
    }
    if seeds.len() < 2 {
        return Err(StatsError::Contract(format!(
            "checkpoint {checkpoint} has {} seed(s) with both within- and cross-construction rows; need 2",
            seeds.len()
        )));
    }
    Ok((seeds, paired_t_test(&within, &across)?))
}

/// How the token-count predictor enters the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenEncoding {
    /// One level per checkpoint.
    #[default]
    Categorical,
    /// Natural log of tokens seen as a continuous covariate.
    LogLinear,
}

pub const TOKENS: &str = "tokens";
pub const DIRECTION: &str = "direction";
pub const ANIMACY: &str = "animacy";

/// Design `max_odds ~ tokens + direction + animacy` from summary rows.
/// References: first checkpoint, wh-wh, matched animacy.
pub fn summary_design(rows: &[SummaryRow], tokens: TokenEncoding) -> Result<DesignMatrix> {
    if rows.is_empty() {
        return Err(StatsError::Contract("no summary rows".into()));
    }
    let mut ckpts: Vec<(u64, String)> = rows.iter().map(|r| (r.tokens_seen, r.checkpoint.clone())).collect();
    ckpts.sort();
    ckpts.dedup();
    let mut predictors = Vec::new();
    match tokens {
        TokenEncoding::Categorical => {
            if ckpts.len() > 1 {
                predictors.push(Predictor::Factor(Factor {
                    name: TOKENS.into(),
                    levels: ckpts.iter().map(|(t, _)| t.to_string()).collect(),
                    values: rows
                        .iter()
                        .map(|r| ckpts.iter().position(|(t, c)| *t == r.tokens_seen && *c == r.checkpoint).unwrap())
                        .collect(),
                }));
            }
        }
        TokenEncoding::LogLinear => predictors.push(Predictor::Covariate {
            name: "log_tokens".into(),
            values: rows.iter().map(|r| (r.tokens_seen.max(1) as f64).ln()).collect(),
        }),
    }
    let dirs: Vec<TransferDirection> = TransferDirection::ALL
        .into_iter()
        .filter(|d| rows.iter().any(|r| r.direction == *d))
        .collect();
    if dirs.len() > 1 {
        predictors.push(Predictor::Factor(Factor {
            name: DIRECTION.into(),
            levels: dirs.iter().map(|d| d.to_string()).collect(),
            values: rows.iter().map(|r| dirs.iter().position(|d| *d == r.direction).unwrap()).collect(),
        }));
    }
    let has = |m: bool| rows.iter().any(|r| r.animacy_match == m);
    if has(true) && has(false) {
        predictors.push(Predictor::Factor(Factor {
            name: ANIMACY.into(),
            levels: vec!["matched".into(), "mismatched".into()],
            values: rows.iter().map(|r| usize::from(!r.animacy_match)).collect(),
        }));
    }
    DesignMatrix::new(rows.iter().map(|r| r.max_odds).collect(), predictors)
}

/// Full analysis of a set of summary rows.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub fit: OlsFit,
    pub factor_tests: Vec<FactorTest>,
    /// Post-hoc families, each Holm-adjusted on its own.
    pub families: Vec<(String, Vec<ContrastResult>)>,
}

pub fn analyze(rows: &[SummaryRow], tokens: TokenEncoding) -> Result<Analysis> {
    let design = summary_design(rows, tokens)?;
    let fit = ols_fit(&design)?;
    let mut factor_tests = Vec::new();
    let mut families = Vec::new();
    for p in &design.predictors {
        factor_tests.push(factor_test(&fit, p.name())?);
    }
    let names: Vec<String> = design.predictors.iter().map(|p| p.name().to_string()).collect();
    if names.iter().any(|n| n == DIRECTION) {
        let mut fam = Vec::new();
        let levels = emm(&fit, DIRECTION)?;
        let has = |d: TransferDirection| levels.iter().any(|(l, _, _)| l == d.name());
        if TransferDirection::ALL.iter().all(|&d| has(d)) {
            fam.push(custom_contrast(
                &fit,
                DIRECTION,
                "within - across",
                &[("wh-wh", 0.5), ("topic-topic", 0.5), ("wh-topic", -0.5), ("topic-wh", -0.5)],
            )?);
        }
        fam.extend(emm_contrasts(&fit, DIRECTION, None)?);
        adjust_family(&mut fam)?;
        families.push((DIRECTION.to_string(), fam));
    }
    if names.iter().any(|n| n == ANIMACY) {
        let mut fam = emm_contrasts(&fit, ANIMACY, None)?;
        adjust_family(&mut fam)?;
        families.push((ANIMACY.to_string(), fam));
    }
    if names.iter().any(|n| n == TOKENS) {
        families.push((TOKENS.to_string(), emm_contrasts(&fit, TOKENS, None)?));
    }
    Ok(Analysis {
        fit,
        factor_tests,
        families,
    })
}

pub const COEFFICIENTS_HEADER: &str = "term,estimate,se,t,p";
pub const CONTRASTS_HEADER: &str = "family,contrast,estimate,se,t,df,p_raw,p_adjusted,d";

pub fn coefficients_csv(fit: &OlsFit) -> String {
    let mut out = format!("{COEFFICIENTS_HEADER}\n");
    for (i, name) in fit.design.columns.iter().enumerate() {
        let (b, se) = (fit.coefficients[i], fit.std_errors[i]);
        let t = b / se;
        let _ = writeln!(
            out,
            "{name},{b:.6},{se:.6},{t:.4},{:.6e}",
            t_two_sided(t, fit.df_resid as f64)
        );
    }
    out
}

pub fn contrasts_csv(families: &[(String, Vec<ContrastResult>)]) -> String {
    let mut out = format!("{CONTRASTS_HEADER}\n");
    for (fam, rows) in families {
        for c in rows {
            let _ = writeln!(
                out,
                "{fam},{},{:.6},{:.6},{:.4},{},{:.6e},{:.6e},{:.4}",
                c.name, c.estimate, c.se, c.t, c.df, c.p_raw, c.p_adjusted, c.cohens_d
            );
        }
    }
    out
}

pub fn text_report(a: &Analysis) -> String {
    let f = &a.fit;
    let mut out = String::new();
    let _ = writeln!(out, "Linear model: max_odds ~ {}", {
        let names: Vec<&str> = f.design.predictors.iter().map(|p| p.name()).collect();
        if names.is_empty() {
            "1".to_string()
        } else {
            names.join(" + ")
        }
    });
    let _ = writeln!(
        out,
        "n = {}, R² = {:.3}, F({}, {}) = {:.2}, p = {:.3e}, residual SD = {:.3}",
        f.design.n_obs(),
        f.r_squared,
        f.df_model,
        f.df_resid,
        f.f_statistic,
        f.f_p_value,
        f.residual_sd
    );
    let _ = writeln!(out, "\nFactor tests");
    for t in &a.factor_tests {
        let _ = writeln!(out, "  {:<10} F({}, {}) = {:.2}, p = {:.3e}", t.factor, t.df1, t.df2, t.f, t.p);
    }
    for (fam, rows) in &a.families {
        let _ = writeln!(out, "\nContrasts: {fam} (Holm over {} comparisons)", rows.len());
        let _ = writeln!(
            out,
            "  {:<28} {:>8} {:>7} {:>8} {:>10} {:>7}",
            "Contrast", "Est.", "SE", "t", "p", "d"
        );
        for c in rows {
            let _ = writeln!(
                out,
                "  {:<28} {:>8.3} {:>7.3} {:>8.2} {:>10.3e} {:>7.2}",
                c.name, c.estimate, c.se, c.t, c.p_adjusted, c.cohens_d
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holm_hand_example() {
        let adj = holm_bonferroni(&[0.01, 0.04, 0.03]).unwrap();
        for (a, e) in adj.iter().zip([0.03, 0.06, 0.06]) {
            assert!((a - e).abs() < 1e-12);
        }
        assert_eq!(holm_bonferroni(&[0.2]).unwrap(), vec![0.2]);
        assert_eq!(holm_bonferroni(&[1.0, 1.0]).unwrap(), vec![1.0, 1.0]);
        assert!(holm_bonferroni(&[1.5]).is_err());
    }

    #[test]
    fn cohens_d_cases() {
        assert!((cohens_d(1.33, 2.56).unwrap() - 0.52).abs() < 0.005);
        assert_eq!(cohens_d(0.0, 1.0).unwrap(), 0.0);
        assert!(matches!(cohens_d(1.0, 0.0), Err(StatsError::Degenerate(_))));
    }

    #[test]
    fn intercept_only_is_mean() {
        let d = DesignMatrix::new(vec![1.0, 2.0, 6.0], vec![]).unwrap();
        let f = ols_fit(&d).unwrap();
        assert!((f.coefficients[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_column_is_named() {
        let d = DesignMatrix::new(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![
                Predictor::Covariate {
                    name: "x".into(),
                    values: vec![1.0, 2.0, 3.0, 4.0],
                },
                Predictor::Covariate {
                    name: "two_x".into(),
                    values: vec![2.0, 4.0, 6.0, 8.0],
                },
            ],
        )
        .unwrap();
        match ols_fit(&d) {
            Err(StatsError::Singular { columns }) => assert_eq!(columns, vec!["two_x".to_string()]),
            other => panic!("expected singular design, got {other:?}"),
        }
    }

    #[test]
    fn se_cases() {
        assert_eq!(standard_error(&[4.0, 6.0]), Some(1.0));
        assert_eq!(standard_error(&[3.0; 6]), Some(0.0));
        assert_eq!(standard_error(&[3.0]), None);
    }

    #[test]
    fn spearman_with_ties() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[2.0, 4.0, 9.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }
}

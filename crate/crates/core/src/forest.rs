//! Likelihood-split trees and bootstrap forests over a one-class growth
//! model, with permutation importance of the splitting covariates.

use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::LongitudinalDataset;
use crate::error::{invalid, Error, Result};
use crate::fit::{fit_design, FitOptions, Optimizer};
use crate::likelihood::{class_log_density, Design};
use crate::mixture::{MixtureParams, MixtureSpec, ModelKind};
use crate::simulate::stream_seed;

/// Smallest out-of-bag sample a tree needs to enter an importance average.
pub const MIN_OOB: usize = 5;

/// The one-class growth model refitted in every node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct TemplateModel {
    pub spec: MixtureSpec,
    pub fit: FitOptions,
}

impl Default for TemplateModel {
    fn default() -> Self {
        Self {
            spec: MixtureSpec::new(ModelKind::Fmm, 1),
            fit: FitOptions {
                optimizer: Optimizer::DirectQuasiNewton,
                standard_errors: false,
                max_attempts: 3,
                tolerance: 1e-3,
                ..FitOptions::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "value")]
pub enum SplitRule {
    /// Left when the covariate is at most the threshold.
    Threshold(f64),
    /// Left when the covariate takes one of these levels.
    Levels(Vec<f64>),
}

impl SplitRule {
    pub fn goes_left(&self, x: f64) -> bool {
        match self {
            SplitRule::Threshold(t) => x <= *t,
            SplitRule::Levels(l) => l.contains(&x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub covariate: String,
    pub index: usize,
    pub rule: SplitRule,
    /// Decrease in -2 log-likelihood from splitting.
    pub improvement: f64,
    pub left: Box<SplitNode>,
    pub right: Box<SplitNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitNode {
    pub n: usize,
    pub neg2ll: f64,
    #[serde(skip)]
    pub params: Option<MixtureParams>,
    pub split: Option<Split>,
}

impl SplitNode {
    pub fn depth(&self) -> usize {
        self.split.as_ref().map_or(0, |s| 1 + s.left.depth().max(s.right.depth()))
    }

    pub fn splits(&self) -> usize {
        self.split.as_ref().map_or(0, |s| 1 + s.left.splits() + s.right.splits())
    }

    /// Covariate indices used anywhere in the tree.
    pub fn used(&self, out: &mut Vec<usize>) {
        if let Some(s) = &self.split {
            if !out.contains(&s.index) {
                out.push(s.index);
            }
            s.left.used(out);
            s.right.used(out);
        }
    }

    fn leaf(&self, x: &[f64]) -> &SplitNode {
        match &self.split {
            None => self,
            Some(s) => {
                if s.rule.goes_left(x[s.index]) {
                    s.left.leaf(x)
                } else {
                    s.right.leaf(x)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case", tag = "type", content = "value")]
pub enum SplitThreshold {
    /// Accept when the improvement exceeds this value.
    Fixed(f64),
    /// Likelihood-ratio test at level `alpha` divided by the number of
    /// candidate splits at the node, with the template's free parameter
    /// count as degrees of freedom.
    Bonferroni(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Bootstrap,
    /// Without replacement, this many percent of the sample.
    Subsample(u8),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default)]
pub struct ForestConfig {
    pub trees: usize,
    /// Covariates drawn as split candidates at each node.
    pub candidates: usize,
    pub sampling: Sampling,
    pub min_leaf: usize,
    pub max_depth: usize,
    pub threshold: SplitThreshold,
    /// Thresholds tried per covariate: all midpoints when `None`, else this
    /// many midpoints at evenly spaced order statistics.
    pub max_thresholds: Option<usize>,
    /// Covariates split by level subsets (up to 8 levels).
    pub categorical: Vec<String>,
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 128,
            candidates: 2,
            sampling: Sampling::Bootstrap,
            min_leaf: 50,
            max_depth: 4,
            threshold: SplitThreshold::Bonferroni(0.05),
            max_thresholds: Some(16),
            categorical: Vec::new(),
            seed: 0,
            threads: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self, m: usize) -> Result<()> {
        if self.trees == 0 {
            return invalid("a forest needs at least one tree");
        }
        if self.candidates == 0 || self.candidates > m {
            return invalid(format!("candidate count must lie in 1..={m}"));
        }
        if self.min_leaf == 0 {
            return invalid("minimum leaf size must be at least 1");
        }
        if let Sampling::Subsample(p) = self.sampling {
            if p == 0 || p > 100 {
                return invalid("subsample percentage must lie in 1..=100");
            }
        }
        match self.threshold {
            SplitThreshold::Fixed(v) if !(v >= 0.0) => invalid("split threshold must be non-negative"),
            SplitThreshold::Bonferroni(a) if !(a > 0.0 && a < 1.0) => invalid("alpha must lie in (0, 1)"),
            _ => Ok(()),
        }
    }
}

/// Shared read-only state of a forest run.
struct Grower<'a> {
    template: &'a TemplateModel,
    design: &'a Design,
    /// n×m row-major covariate values.
    x: Vec<f64>,
    m: usize,
    names: Vec<String>,
    categorical: Vec<bool>,
    config: &'a ForestConfig,
    df: f64,
}

struct NodeFit {
    params: MixtureParams,
    neg2ll: f64,
}

impl Grower<'_> {
    fn fit(&self, rows: &[usize], start: Option<&MixtureParams>) -> Option<NodeFit> {
        let sub = self.design.subset(rows);
        match fit_design(&self.template.spec, &sub, start, &self.template.fit) {
            Ok(f) if f.converged() => Some(NodeFit {
                neg2ll: -2.0 * f.log_likelihood,
                params: f.estimates,
            }),
            _ => None,
        }
    }

    fn xv(&self, row: usize, j: usize) -> f64 {
        self.x[row * self.m + j]
    }

    fn rules(&self, rows: &[usize], j: usize) -> Vec<SplitRule> {
        let mut v: Vec<f64> = rows.iter().map(|&r| self.xv(r, j)).collect();
        v.sort_by(f64::total_cmp);
        let mut levels = v.clone();
        levels.dedup();
        if levels.len() < 2 {
            return Vec::new();
        }
        if self.categorical[j] && levels.len() <= 8 {
            // subsets holding the first level cover every bipartition once
            let rest = levels.len() - 1;
            return (0..(1u32 << rest) - 1)
                .map(|mask| {
                    let mut set = vec![levels[0]];
                    set.extend((0..rest).filter(|b| mask >> b & 1 == 1).map(|b| levels[b + 1]));
                    SplitRule::Levels(set)
                })
                .collect();
        }
        let leaf = self.config.min_leaf;
        let n = v.len();
        if n < 2 * leaf {
            return Vec::new();
        }
        // midpoints with at least `leaf` rows on each side
        let mut mids: Vec<f64> = Vec::new();
        for i in leaf.max(1)..=(n - leaf).min(n - 1) {
            if v[i - 1] < v[i] {
                mids.push(0.5 * (v[i - 1] + v[i]));
            }
        }
        if let Some(cap) = self.config.max_thresholds {
            if mids.len() > cap && cap > 0 {
                let picked: Vec<f64> = (0..cap)
                    .map(|q| mids[((q as f64 + 0.5) * mids.len() as f64 / cap as f64) as usize])
                    .collect();
                mids = picked;
                mids.dedup();
            }
        }
        mids.into_iter().map(SplitRule::Threshold).collect()
    }

    /// Improvement of one candidate split, or `None` when a child is too
    /// small or its fit fails.
    fn evaluate(&self, rows: &[usize], parent: &NodeFit, j: usize, rule: &SplitRule) -> Option<(f64, NodeFit, NodeFit, Vec<usize>, Vec<usize>)> {
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&row| rule.goes_left(self.xv(row, j)));
        if l.len() < self.config.min_leaf || r.len() < self.config.min_leaf {
            return None;
        }
        let fl = self.fit(&l, Some(&parent.params))?;
        let fr = self.fit(&r, Some(&parent.params))?;
        let imp = (parent.neg2ll - fl.neg2ll - fr.neg2ll).max(0.0);
        Some((imp, fl, fr, l, r))
    }

    fn critical(&self, candidates: usize) -> f64 {
        match self.config.threshold {
            SplitThreshold::Fixed(v) => v,
            SplitThreshold::Bonferroni(alpha) => {
                let chi = ChiSquared::new(self.df).expect("positive degrees of freedom");
                chi.inverse_cdf(1.0 - alpha / candidates.max(1) as f64)
            }
        }
    }

    fn grow(&self, rows: Vec<usize>, node: NodeFit, depth: usize, rng: &mut ChaCha8Rng) -> SplitNode {
        let n = rows.len();
        let leaf = |node: NodeFit| SplitNode {
            n,
            neg2ll: node.neg2ll,
            params: Some(node.params),
            split: None,
        };
        if depth >= self.config.max_depth || n < 2 * self.config.min_leaf {
            return leaf(node);
        }
        let all: Vec<usize> = (0..self.m).collect();
        let mut chosen: Vec<usize> = all.choose_multiple(rng, self.config.candidates).copied().collect();
        chosen.sort_unstable();
        let cands: Vec<(usize, SplitRule)> =
            chosen.iter().flat_map(|&j| self.rules(&rows, j).into_iter().map(move |r| (j, r))).collect();
        if cands.is_empty() {
            return leaf(node);
        }
        let mut best: Option<(usize, SplitRule, (f64, NodeFit, NodeFit, Vec<usize>, Vec<usize>))> = None;
        for (j, rule) in &cands {
            if let Some(res) = self.evaluate(&rows, &node, *j, rule) {
                if best.as_ref().is_none_or(|b| res.0 > b.2 .0) {
                    best = Some((*j, rule.clone(), res));
                }
            }
        }
        let crit = self.critical(cands.len());
        match best {
            Some((j, rule, (imp, fl, fr, l, r))) if imp > crit => {
                let neg2ll = node.neg2ll;
                let left = self.grow(l, fl, depth + 1, rng);
                let right = self.grow(r, fr, depth + 1, rng);
                SplitNode {
                    n,
                    neg2ll,
                    params: Some(node.params),
                    split: Some(Split {
                        covariate: self.names[j].clone(),
                        index: j,
                        rule,
                        improvement: imp,
                        left: Box::new(left),
                        right: Box::new(right),
                    }),
                }
            }
            _ => leaf(node),
        }
    }

    fn oob_neg2ll(&self, tree: &SplitNode, rows: &[usize], xs: &[Vec<f64>]) -> Result<f64> {
        let mut s = 0.0;
        for (&i, x) in rows.iter().zip(xs) {
            let leaf = tree.leaf(x);
            let p = leaf.params.as_ref().ok_or_else(|| Error::Numeric("tree node lost its parameters".into()))?;
            let ld = class_log_density(self.design.outcomes(i), self.design.times(i), &[], &p.classes[0], p.frame, false)?;
            s += -2.0 * ld;
        }
        Ok(s)
    }
}

fn covariate_matrix(data: &LongitudinalDataset, names: &[String]) -> Result<Vec<f64>> {
    let idx: Vec<usize> = names.iter().map(|n| data.covariate_index(n)).collect::<Result<_>>()?;
    Ok(data.individuals.iter().flat_map(|ind| idx.iter().map(|&j| ind.covariates[j]).collect::<Vec<_>>()).collect())
}

fn grower<'a>(
    template: &'a TemplateModel,
    design: &'a Design,
    data: &LongitudinalDataset,
    covariates: &[String],
    config: &'a ForestConfig,
    df: f64,
) -> Result<Grower<'a>> {
    Ok(Grower {
        template,
        design,
        x: covariate_matrix(data, covariates)?,
        m: covariates.len(),
        names: covariates.to_vec(),
        categorical: covariates.iter().map(|c| config.categorical.contains(c)).collect(),
        config,
        df,
    })
}

fn root(template: &TemplateModel, data: &LongitudinalDataset) -> Result<(Design, NodeFit, f64)> {
    if template.spec.classes != 1 {
        return invalid("the template model must have one class");
    }
    let design = Design::new(data, &template.spec)?;
    let rows: Vec<usize> = (0..design.n()).collect();
    let f = fit_design(&template.spec, &design.subset(&rows), None, &template.fit)?;
    if !f.converged() {
        return Err(Error::Numeric(format!("template model did not converge on the full sample: {:?}", f.status)));
    }
    let df = f.free_parameters as f64;
    Ok((
        design,
        NodeFit {
            neg2ll: -2.0 * f.log_likelihood,
            params: f.estimates,
        },
        df,
    ))
}

/// Decrease in -2 log-likelihood from splitting `data` at `covariate <=
/// threshold`, each part refitted with the template. `None` when a part
/// has fewer than `min_leaf` individuals or a fit fails.
pub fn evaluate_split(
    template: &TemplateModel,
    data: &LongitudinalDataset,
    covariate: &str,
    threshold: f64,
    min_leaf: usize,
) -> Result<Option<f64>> {
    let (design, parent, df) = root(template, data)?;
    let config = ForestConfig {
        min_leaf,
        ..ForestConfig::default()
    };
    let names = vec![covariate.to_string()];
    let g = grower(template, &design, data, &names, &config, df)?;
    let rows: Vec<usize> = (0..design.n()).collect();
    Ok(g.evaluate(&rows, &parent, 0, &SplitRule::Threshold(threshold)).map(|r| r.0))
}

/// Grows one tree on the whole of `data` (the caller supplies any
/// resampling), drawing candidate covariates from a stream seeded by
/// `config.seed`.
pub fn grow_tree(
    template: &TemplateModel,
    data: &LongitudinalDataset,
    covariates: &[String],
    config: &ForestConfig,
) -> Result<SplitNode> {
    config.validate(covariates.len())?;
    let (design, parent, df) = root(template, data)?;
    let g = grower(template, &design, data, covariates, config, df)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Ok(g.grow((0..design.n()).collect(), parent, 0, &mut rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub covariate: String,
    /// Mean out-of-bag -2 log-likelihood increase under permutation over
    /// the trees that split on the covariate, clipped at zero.
    pub score: f64,
    /// 1 = most important.
    pub rank: usize,
    pub trees_used: usize,
    /// SD of the per-tree increases.
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub rows: Vec<ImportanceRow>,
    pub trees: usize,
    /// Trees whose root fit failed.
    pub skipped: usize,
    pub mean_splits: f64,
}

impl ImportanceReport {
    pub fn score(&self, covariate: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.covariate == covariate).map(|r| r.score)
    }

    pub fn rank(&self, covariate: &str) -> Option<usize> {
        self.rows.iter().find(|r| r.covariate == covariate).map(|r| r.rank)
    }
}

struct TreeOutcome {
    splits: usize,
    /// Per covariate: OOB degradation when used and enough OOB rows.
    deltas: Vec<Option<f64>>,
}

/// Grows a forest over `covariates` and scores each by permutation of its
/// out-of-bag values.
pub fn variable_importance(
    template: &TemplateModel,
    data: &LongitudinalDataset,
    covariates: &[String],
    config: &ForestConfig,
) -> Result<ImportanceReport> {
    config.validate(covariates.len())?;
    let (design, root_fit, df) = root(template, data)?;
    let g = grower(template, &design, data, covariates, config, df)?;
    let n = design.n();
    let m = covariates.len();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::Numeric(format!("cannot start worker pool: {e}")))?;
    let grow_one = |t: usize| -> Result<Option<TreeOutcome>> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, t as u64, 0));
        let rows: Vec<usize> = match config.sampling {
            Sampling::Bootstrap => (0..n).map(|_| rng.random_range(0..n)).collect(),
            Sampling::Subsample(p) => {
                let mut all: Vec<usize> = (0..n).collect();
                all.shuffle(&mut rng);
                all.truncate((n * p as usize / 100).max(1));
                all.sort_unstable();
                all
            }
        };
        let mut inbag = vec![false; n];
        for &r in &rows {
            inbag[r] = true;
        }
        let Some(start) = g.fit(&rows, Some(&root_fit.params)) else {
            log::warn!("tree {t}: template fit failed on the resample; tree skipped");
            return Ok(None);
        };
        let tree = g.grow(rows, start, 0, &mut rng);
        let oob: Vec<usize> = (0..n).filter(|&i| !inbag[i]).collect();
        let mut used = Vec::new();
        tree.used(&mut used);
        let mut deltas = vec![None; m];
        if oob.len() >= MIN_OOB && !used.is_empty() {
            let xs: Vec<Vec<f64>> = oob.iter().map(|&i| g.x[i * m..(i + 1) * m].to_vec()).collect();
            let base = g.oob_neg2ll(&tree, &oob, &xs)?;
            used.sort_unstable();
            for &j in &used {
                let mut prng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, t as u64, 1 + j as u64));
                let mut col: Vec<f64> = xs.iter().map(|x| x[j]).collect();
                col.shuffle(&mut prng);
                let permuted: Vec<Vec<f64>> = xs
                    .iter()
                    .zip(&col)
                    .map(|(x, v)| {
                        let mut x = x.clone();
                        x[j] = *v;
                        x
                    })
                    .collect();
                deltas[j] = Some(g.oob_neg2ll(&tree, &oob, &permuted)? - base);
            }
        }
        Ok(Some(TreeOutcome {
            splits: tree.splits(),
            deltas,
        }))
    };
    let outcomes: Vec<Result<Option<TreeOutcome>>> =
        pool.install(|| (0..config.trees).into_par_iter().map(grow_one).collect());
    let mut grown = Vec::new();
    let mut skipped = 0;
    for o in outcomes {
        match o? {
            Some(t) => grown.push(t),
            None => skipped += 1,
        }
    }
    let mut rows: Vec<ImportanceRow> = (0..m)
        .map(|j| {
            let d: Vec<f64> = grown.iter().filter_map(|t| t.deltas[j]).collect();
            let mean = if d.is_empty() { 0.0 } else { d.iter().sum::<f64>() / d.len() as f64 };
            let sd = if d.len() < 2 {
                0.0
            } else {
                (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt()
            };
            ImportanceRow {
                covariate: covariates[j].clone(),
                score: mean.max(0.0),
                rank: 0,
                trees_used: d.len(),
                sd,
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| rows[b].score.total_cmp(&rows[a].score).then(a.cmp(&b)));
    for (r, &j) in order.iter().enumerate() {
        rows[j].rank = r + 1;
    }
    let mean_splits = if grown.is_empty() {
        0.0
    } else {
        grown.iter().map(|t| t.splits as f64).sum::<f64>() / grown.len() as f64
    };
    Ok(ImportanceReport {
        rows,
        trees: grown.len(),
        skipped,
        mean_splits,
    })
}

/// Columns: covariate, score, rank, trees_used, sd.
pub fn write_importance_csv<W: Write>(w: W, report: &ImportanceReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["covariate", "score", "rank", "trees_used", "sd"])?;
    let mut rows = report.rows.clone();
    rows.sort_by_key(|r| r.rank);
    for r in rows {
        out.write_record([r.covariate, r.score.to_string(), r.rank.to_string(), r.trees_used.to_string(), r.sd.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

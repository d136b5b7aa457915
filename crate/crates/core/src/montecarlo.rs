//! Replicated simulation and estimation for one grid cell, with the
//! usual bias, precision and coverage summaries.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classification::{accuracy, entropy, kappa_agreement, modal_assignment, posterior_matrix, Assignment};
use crate::error::{invalid, Error, Result};
use crate::fit::{fit, FitOptions, FittedModel, Optimizer};
use crate::growth::{ClassParams, Frame};
use crate::mixture::{natural_names, natural_vector, Gating, GatingParams, MixtureParams, MixtureSpec, ModelKind};
use crate::simulate::{
    generate, population_shares, stream_seed, GeneratedDataset, SimCondition, EXPERT_NAMES, GATING_NAMES,
};

/// Estimated-model label: one of the four kinds, or the cluster-predictor
/// model with every covariate in the gating function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum McModel {
    Fmm,
    Cp,
    Gp,
    Full,
    MisspecifiedCp,
}

impl McModel {
    pub fn name(self) -> &'static str {
        match self {
            McModel::Fmm => "fmm",
            McModel::Cp => "cp",
            McModel::Gp => "gp",
            McModel::Full => "full",
            McModel::MisspecifiedCp => "cp_all",
        }
    }

    pub fn kind(self) -> ModelKind {
        match self {
            McModel::Fmm => ModelKind::Fmm,
            McModel::Cp | McModel::MisspecifiedCp => ModelKind::Cp,
            McModel::Gp => ModelKind::Gp,
            McModel::Full => ModelKind::Full,
        }
    }

    pub fn from_kind(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Fmm => McModel::Fmm,
            ModelKind::Cp => McModel::Cp,
            ModelKind::Gp => McModel::Gp,
            ModelKind::Full => McModel::Full,
        }
    }

    pub fn spec(self, classes: usize) -> MixtureSpec {
        let spec = MixtureSpec::new(self.kind(), classes);
        match self {
            McModel::Fmm => spec,
            McModel::Cp => spec.with_gating(GATING_NAMES),
            McModel::Gp => spec.with_expert(EXPERT_NAMES),
            McModel::Full => spec.with_gating(GATING_NAMES).with_expert(EXPERT_NAMES),
            McModel::MisspecifiedCp => spec.with_gating(GATING_NAMES.iter().chain(EXPERT_NAMES.iter()).copied()),
        }
    }

    /// Population values of this model's parameters under the generating
    /// full model. Models without expert covariates carry the marginal
    /// growth moments; models without gating covariates the population
    /// class shares. The misspecified model's extra gating slopes are zero.
    pub fn truth(self, cond: &SimCondition) -> Result<MixtureParams> {
        let full = cond.truth()?;
        let Gating::Logistic(g) = &full.gating else { unreachable!() };
        let marginal: Vec<ClassParams> = full
            .classes
            .iter()
            .map(|c| {
                let bbt = &c.paths * &c.cov_cov * c.paths.transpose();
                let psi = c.psi + nalgebra::Matrix3::from_iterator(bbt.iter().copied());
                ClassParams::without_covariates(c.growth_mean(), psi, c.gamma, c.residual)
            })
            .collect();
        let shares = Gating::Proportions(population_shares(g, cond.membership));
        let (classes, gating) = match self {
            McModel::Full => (full.classes.clone(), full.gating.clone()),
            McModel::Gp => (full.classes.clone(), shares),
            McModel::Cp => (marginal, full.gating.clone()),
            McModel::Fmm => (marginal, shares),
            McModel::MisspecifiedCp => {
                let coefficients = g
                    .coefficients
                    .iter()
                    .map(|b| b.iter().copied().chain(std::iter::repeat_n(0.0, EXPERT_NAMES.len())).collect())
                    .collect();
                (
                    marginal,
                    Gating::Logistic(GatingParams {
                        intercepts: g.intercepts.clone(),
                        coefficients,
                    }),
                )
            }
        };
        Ok(MixtureParams {
            frame: Frame::Original,
            classes,
            gating,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default)]
pub struct McOptions {
    /// Jointly convergent replications to accumulate.
    pub replications: usize,
    pub master_seed: u64,
    pub kinds: Vec<ModelKind>,
    /// Also fit the cluster-predictor model with every covariate in gating.
    pub misspecified: bool,
    pub fit: FitOptions,
    /// Keep only replications where every requested kind converged. When
    /// false each kind is summarized over its own convergent replications.
    pub joint_filter: bool,
    /// Stop after this many attempted replications per requested one.
    pub max_attempt_factor: usize,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    /// Frame in which parameters are scored.
    pub frame: Frame,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            replications: 100,
            master_seed: 20240101,
            kinds: ModelKind::ALL.to_vec(),
            misspecified: false,
            fit: FitOptions {
                optimizer: Optimizer::DirectQuasiNewton,
                ..FitOptions::default()
            },
            joint_filter: true,
            max_attempt_factor: 10,
            threads: 0,
            frame: Frame::Original,
        }
    }
}

impl McOptions {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return invalid("replication count must be at least 1");
        }
        if self.kinds.is_empty() {
            return invalid("at least one model kind is required");
        }
        if self.max_attempt_factor == 0 {
            return invalid("attempt factor must be at least 1");
        }
        self.fit.validate()
    }

    fn models(&self) -> Vec<McModel> {
        let mut m: Vec<McModel> = self.kinds.iter().map(|k| McModel::from_kind(*k)).collect();
        m.sort();
        m.dedup();
        if self.misspecified {
            m.push(McModel::MisspecifiedCp);
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub truth: f64,
    pub estimate: f64,
    pub se: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

/// One model fitted to one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub condition: usize,
    pub replication: usize,
    pub seed: u64,
    pub model: McModel,
    pub converged: bool,
    pub status: String,
    pub attempts: usize,
    pub iterations: usize,
    pub log_likelihood: Option<f64>,
    pub aic: Option<f64>,
    pub bic: Option<f64>,
    pub accuracy: Option<f64>,
    pub entropy: Option<f64>,
    pub kappa_vs_fmm: Option<f64>,
    /// Scored parameters after matching classes to the generating ones.
    pub params: Vec<ParamRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceMetrics {
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    /// `None` when the true value is zero.
    pub relative_bias: Option<f64>,
    pub empirical_se: f64,
    pub rmse: f64,
    pub relative_rmse: Option<f64>,
    /// Over replications with an interval; `None` when none had one.
    pub coverage: Option<f64>,
    pub mc_se_bias: f64,
    pub replications: usize,
}

/// Compensated (Neumaier) sum.
fn ksum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = s + v;
        c += if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
        s = t;
    }
    s + c
}

/// Bias, empirical SE, RMSE, coverage and the Monte Carlo SE of the bias
/// for `estimates` of `truth`. Relative versions are absent for a zero
/// truth.
pub fn performance_metrics(estimates: &[f64], cis: &[Option<(f64, f64)>], truth: f64) -> Result<PerformanceMetrics> {
    let s = estimates.len();
    if s < 2 {
        return invalid("performance metrics need at least two replications");
    }
    if cis.len() != s {
        return invalid("one interval (or none) is needed per estimate");
    }
    let sf = s as f64;
    let mean = ksum(estimates.iter().copied()) / sf;
    let bias = ksum(estimates.iter().map(|e| e - truth)) / sf;
    let var = ksum(estimates.iter().map(|e| (e - mean).powi(2))) / (sf - 1.0);
    let empirical_se = var.sqrt();
    let rmse = (ksum(estimates.iter().map(|e| (e - truth).powi(2))) / sf).sqrt();
    let with_ci: Vec<(f64, f64)> = cis.iter().flatten().copied().collect();
    let coverage = (!with_ci.is_empty())
        .then(|| with_ci.iter().filter(|(lo, hi)| *lo <= truth && truth <= *hi).count() as f64 / with_ci.len() as f64);
    let relative = truth != 0.0;
    Ok(PerformanceMetrics {
        truth,
        mean,
        bias,
        relative_bias: relative.then(|| bias / truth),
        empirical_se,
        rmse,
        relative_rmse: relative.then(|| rmse / truth),
        coverage,
        mc_se_bias: (var / sf).sqrt(),
        replications: s,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: McModel,
    pub convergent: usize,
    pub convergence_rate: f64,
    /// Replications entering the parameter metrics.
    pub scored: usize,
    pub mean_accuracy: Option<f64>,
    pub mean_entropy: Option<f64>,
    pub mean_kappa_vs_fmm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub model: McModel,
    pub parameter: String,
    pub metrics: PerformanceMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: SimCondition,
    pub requested: usize,
    pub attempted: usize,
    pub kept: usize,
    pub aborted: bool,
    pub models: Vec<ModelSummary>,
    pub params: Vec<ParamSummary>,
}

impl ConditionSummary {
    pub fn model(&self, m: McModel) -> Option<&ModelSummary> {
        self.models.iter().find(|s| s.model == m)
    }

    pub fn param(&self, m: McModel, name: &str) -> Option<&PerformanceMetrics> {
        self.params.iter().find(|p| p.model == m && p.parameter == name).map(|p| &p.metrics)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRun {
    pub summary: ConditionSummary,
    /// Every attempted replication, kept or not, in replication order.
    pub records: Vec<ReplicationRecord>,
    /// Replication indices that entered the summary.
    pub kept: Vec<usize>,
}

/// Class order for `est` closest to `truth` by knot and growth-factor
/// means, each mean difference scaled by the true factor SD.
pub fn match_classes(est: &MixtureParams, truth: &MixtureParams) -> Vec<usize> {
    let k = truth.classes.len();
    let dist = |e: &ClassParams, t: &ClassParams| {
        let (me, mt) = (e.growth_mean(), t.growth_mean());
        let mut d = (e.gamma - t.gamma).powi(2);
        for f in 0..3 {
            d += ((me[f] - mt[f]) / t.psi[(f, f)].sqrt()).powi(2);
        }
        d
    };
    let mut best: (f64, Vec<usize>) = (f64::INFINITY, (0..k).collect());
    let mut perm: Vec<usize> = (0..k).collect();
    permute(&mut perm, 0, &mut |p| {
        let d: f64 = p.iter().enumerate().map(|(j, &o)| dist(&est.classes[o], &truth.classes[j])).sum();
        if d < best.0 {
            best = (d, p.to_vec());
        }
    });
    best.1
}

fn permute(p: &mut Vec<usize>, at: usize, f: &mut impl FnMut(&[usize])) {
    if at == p.len() {
        f(p);
        return;
    }
    for j in at..p.len() {
        p.swap(at, j);
        permute(p, at + 1, f);
        p.swap(at, j);
    }
}

fn score(fm: &FittedModel, truth: &MixtureParams, frame: Frame) -> Vec<ParamRecord> {
    let k = truth.classes.len();
    let est = fm.params_in(frame);
    let truth = truth.to_frame(frame);
    let order = match_classes(&est.to_frame(Frame::Original), &truth.to_frame(Frame::Original));
    let identity = order.iter().enumerate().all(|(j, &o)| j == o);
    let aligned = est.permuted(&order);
    let names = natural_names(&fm.spec);
    let values = natural_vector(&aligned, &fm.spec);
    let tv = natural_vector(&truth, &fm.spec);
    let ses = fm.standard_errors.as_ref().filter(|s| !s.singular);
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let source = if identity {
                Some(name.clone())
            } else {
                let (cls, rest) = name.split_once('.').unwrap_or(("", name));
                let j: usize = cls.trim_start_matches("class").parse().unwrap_or(1);
                if rest.starts_with("gate_") {
                    // re-referencing two classes flips signs, SEs carry over
                    (k == 2).then(|| name.clone())
                } else {
                    Some(format!("class{}.{rest}", order[j - 1] + 1))
                }
            };
            let pe = source.and_then(|s| ses.and_then(|x| x.get(frame, &s)));
            let se = pe.and_then(|p| p.se);
            let z = crate::inference::WALD_Z;
            ParamRecord {
                name: name.clone(),
                truth: tv[i],
                estimate: values[i],
                se,
                lower: se.map(|s| values[i] - z * s),
                upper: se.map(|s| values[i] + z * s),
            }
        })
        .collect()
}

fn failed_record(cond: &SimCondition, rep: usize, seed: u64, model: McModel, reason: String) -> ReplicationRecord {
    ReplicationRecord {
        condition: cond.id,
        replication: rep,
        seed,
        model,
        converged: false,
        status: reason,
        attempts: 0,
        iterations: 0,
        log_likelihood: None,
        aic: None,
        bic: None,
        accuracy: None,
        entropy: None,
        kappa_vs_fmm: None,
        params: Vec::new(),
    }
}

/// Generates replication `rep` and fits every model to it.
pub fn run_replication(cond: &SimCondition, rep: usize, opts: &McOptions) -> Result<Vec<ReplicationRecord>> {
    let seed = stream_seed(opts.master_seed, cond.id as u64, rep as u64);
    let data: GeneratedDataset = generate(cond, seed)?;
    let k = data.truth.classes.len();
    let truth_labels = Assignment::from_zero_based(&data.memberships, k)?;
    let models = opts.models();
    let mut out = Vec::with_capacity(models.len());
    let mut assignments: Vec<Option<Assignment>> = Vec::with_capacity(models.len());
    for (mi, &m) in models.iter().enumerate() {
        let mut fo = opts.fit.clone();
        fo.seed = stream_seed(seed, 1 + mi as u64, 0);
        let spec = m.spec(k);
        let truth = m.truth(cond)?;
        match fit(&spec, &data.data, None, &fo) {
            Ok(fm) => {
                let post = posterior_matrix(&fm);
                let assigned = modal_assignment(&post, stream_seed(seed, 1 + mi as u64, 1));
                let ic = fm.information_criteria();
                out.push(ReplicationRecord {
                    condition: cond.id,
                    replication: rep,
                    seed,
                    model: m,
                    converged: fm.converged(),
                    status: match &fm.status {
                        crate::fit::FitStatus::Converged => "converged".into(),
                        crate::fit::FitStatus::NotConverged(r) => r.clone(),
                    },
                    attempts: fm.attempts,
                    iterations: fm.iterations,
                    log_likelihood: Some(fm.log_likelihood),
                    aic: Some(ic.aic),
                    bic: Some(ic.bic),
                    accuracy: Some(accuracy(&assigned, &truth_labels)?),
                    entropy: entropy(&post).ok(),
                    kappa_vs_fmm: None,
                    params: score(&fm, &truth, opts.frame),
                });
                assignments.push(Some(assigned));
            }
            Err(e @ (Error::InvalidInput(_) | Error::Io(_))) => return Err(e),
            Err(e) => {
                out.push(failed_record(cond, rep, seed, m, e.to_string()));
                assignments.push(None);
            }
        }
    }
    if let Some(fi) = models.iter().position(|m| *m == McModel::Fmm) {
        if let Some(fa) = assignments[fi].clone() {
            for (r, a) in out.iter_mut().zip(&assignments) {
                if r.model != McModel::Fmm {
                    r.kappa_vs_fmm = a.as_ref().and_then(|a| kappa_agreement(a, &fa).ok()).map(|k| k.kappa);
                }
            }
        }
    }
    Ok(out)
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Numeric(format!("cannot start worker pool: {e}")))
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let x: Vec<f64> = v.collect();
    (!x.is_empty()).then(|| ksum(x.iter().copied()) / x.len() as f64)
}

/// Replicates `cond` until `opts.replications` replications converge for
/// every requested kind (or per kind without the joint filter), then
/// summarizes the kept ones. Stops early, flagged as aborted, after
/// `max_attempt_factor` times the requested count.
pub fn run_condition(cond: &SimCondition, opts: &McOptions) -> Result<ConditionRun> {
    opts.validate()?;
    cond.validate()?;
    let models = opts.models();
    let joint: Vec<McModel> = models.iter().copied().filter(|m| *m != McModel::MisspecifiedCp).collect();
    let target = opts.replications;
    let limit = target * opts.max_attempt_factor;
    let pool = pool(opts.threads)?;
    let mut records: Vec<Vec<ReplicationRecord>> = Vec::new();
    let mut per_model_kept = vec![0usize; models.len()];
    let done = |pmk: &[usize]| {
        if opts.joint_filter {
            false
        } else {
            joint.iter().all(|m| pmk[models.iter().position(|x| x == m).unwrap()] >= target)
        }
    };
    let mut kept = Vec::new();
    while kept.len() < target && records.len() < limit && !(!opts.joint_filter && done(&per_model_kept)) {
        // the batch size does not depend on the worker count, so neither
        // does which replications get computed
        let need = if opts.joint_filter {
            target - kept.len()
        } else {
            target - joint.iter().map(|m| per_model_kept[models.iter().position(|x| x == m).unwrap()]).min().unwrap_or(0)
        };
        let start = records.len();
        let end = (start + need.max(1)).min(limit);
        let batch: Vec<Result<Vec<ReplicationRecord>>> =
            pool.install(|| (start..end).into_par_iter().map(|r| run_replication(cond, r, opts)).collect());
        for (off, recs) in batch.into_iter().enumerate() {
            let recs = recs?;
            let rep = start + off;
            let ok = |m: McModel| recs.iter().any(|r| r.model == m && r.converged);
            if joint.iter().all(|m| ok(*m)) && kept.len() < target {
                kept.push(rep);
            }
            for (i, m) in models.iter().enumerate() {
                if ok(*m) {
                    per_model_kept[i] += 1;
                }
            }
            records.push(recs);
        }
    }
    let attempted = records.len();
    let aborted = if opts.joint_filter { kept.len() < target } else { !done(&per_model_kept) };
    if aborted {
        log::warn!(
            "condition {}: stopped after {attempted} replications with {} of {target} convergent",
            cond.id,
            kept.len()
        );
    }
    let mut summaries = Vec::new();
    let mut params = Vec::new();
    for &m in &models {
        let convergent = records.iter().filter(|r| r.iter().any(|x| x.model == m && x.converged)).count();
        let pool_recs: Vec<&ReplicationRecord> = if opts.joint_filter {
            kept.iter()
                .filter_map(|&rep| records[rep].iter().find(|x| x.model == m && x.converged))
                .collect()
        } else {
            records
                .iter()
                .filter_map(|r| r.iter().find(|x| x.model == m && x.converged))
                .take(target)
                .collect()
        };
        summaries.push(ModelSummary {
            model: m,
            convergent,
            convergence_rate: if attempted == 0 { 0.0 } else { convergent as f64 / attempted as f64 },
            scored: pool_recs.len(),
            mean_accuracy: mean(pool_recs.iter().filter_map(|r| r.accuracy)),
            mean_entropy: mean(pool_recs.iter().filter_map(|r| r.entropy)),
            mean_kappa_vs_fmm: mean(pool_recs.iter().filter_map(|r| r.kappa_vs_fmm)),
        });
        if pool_recs.len() >= 2 {
            for (pi, p) in pool_recs[0].params.iter().enumerate() {
                let est: Vec<f64> = pool_recs.iter().map(|r| r.params[pi].estimate).collect();
                let cis: Vec<Option<(f64, f64)>> =
                    pool_recs.iter().map(|r| r.params[pi].lower.zip(r.params[pi].upper)).collect();
                params.push(ParamSummary {
                    model: m,
                    parameter: p.name.clone(),
                    metrics: performance_metrics(&est, &cis, p.truth)?,
                });
            }
        }
    }
    Ok(ConditionRun {
        summary: ConditionSummary {
            condition: cond.clone(),
            requested: target,
            attempted,
            kept: kept.len(),
            aborted,
            models: summaries,
            params,
        },
        records: records.into_iter().flatten().collect(),
        kept,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisspecificationRow {
    pub model: McModel,
    pub convergence_rate: f64,
    pub mean_accuracy: Option<f64>,
    pub mean_entropy: Option<f64>,
    /// Mean relative bias over the growth-factor means and knots.
    pub mean_abs_relative_bias: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisspecificationReport {
    pub condition: usize,
    pub kept: usize,
    /// The misspecified model's convergence over kept replications.
    pub misspecified_convergence: f64,
    pub rows: Vec<MisspecificationRow>,
}

/// Fits the cluster-predictor model with all covariates in gating next to
/// the correctly specified kinds on each kept replication.
pub fn misspecification_experiment(cond: &SimCondition, opts: &McOptions) -> Result<(MisspecificationReport, ConditionRun)> {
    let mut o = opts.clone();
    o.misspecified = true;
    o.joint_filter = true;
    let run = run_condition(cond, &o)?;
    let kept = run.kept.len();
    let mut rows = Vec::new();
    for ms in &run.summary.models {
        let rate = if ms.model == McModel::MisspecifiedCp {
            if kept == 0 {
                0.0
            } else {
                ms.scored as f64 / kept as f64
            }
        } else {
            ms.convergence_rate
        };
        let rb: Vec<f64> = run
            .summary
            .params
            .iter()
            .filter(|p| p.model == ms.model && (p.parameter.contains(".eta") || p.parameter.ends_with(".knot")))
            .filter(|p| !p.parameter.contains("path"))
            .filter_map(|p| p.metrics.relative_bias.map(f64::abs))
            .collect();
        rows.push(MisspecificationRow {
            model: ms.model,
            convergence_rate: rate,
            mean_accuracy: ms.mean_accuracy,
            mean_entropy: ms.mean_entropy,
            mean_abs_relative_bias: mean(rb.into_iter()),
        });
    }
    let misspecified_convergence = rows
        .iter()
        .find(|r| r.model == McModel::MisspecifiedCp)
        .map_or(0.0, |r| r.convergence_rate);
    Ok((
        MisspecificationReport {
            condition: cond.id,
            kept,
            misspecified_convergence,
            rows,
        },
        run,
    ))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per model per replication.
pub fn write_replications_csv<W: Write>(w: W, run: &ConditionRun) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "condition", "replication", "seed", "model", "kept", "converged", "status", "attempts", "iterations",
        "loglik", "aic", "bic", "accuracy", "entropy", "kappa_fmm",
    ])?;
    for r in &run.records {
        out.write_record([
            r.condition.to_string(),
            r.replication.to_string(),
            r.seed.to_string(),
            r.model.name().to_string(),
            run.kept.contains(&r.replication).to_string(),
            r.converged.to_string(),
            r.status.clone(),
            r.attempts.to_string(),
            r.iterations.to_string(),
            opt(r.log_likelihood),
            opt(r.aic),
            opt(r.bic),
            opt(r.accuracy),
            opt(r.entropy),
            opt(r.kappa_vs_fmm),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// One row per parameter per model per replication.
pub fn write_estimates_csv<W: Write>(w: W, run: &ConditionRun) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "condition", "replication", "model", "kept", "parameter", "truth", "estimate", "se", "lower", "upper",
    ])?;
    for r in &run.records {
        let kept = run.kept.contains(&r.replication).to_string();
        for p in &r.params {
            out.write_record([
                r.condition.to_string(),
                r.replication.to_string(),
                r.model.name().to_string(),
                kept.clone(),
                p.name.clone(),
                p.truth.to_string(),
                p.estimate.to_string(),
                opt(p.se),
                opt(p.lower),
                opt(p.upper),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Long layout: condition, model, parameter, metric, value.
pub fn write_summary_csv<W: Write>(w: W, s: &ConditionSummary) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["condition", "model", "parameter", "metric", "value"])?;
    let id = s.condition.id.to_string();
    for m in &s.models {
        let rows = [
            ("convergence_rate", Some(m.convergence_rate)),
            ("convergent", Some(m.convergent as f64)),
            ("scored", Some(m.scored as f64)),
            ("mean_accuracy", m.mean_accuracy),
            ("mean_entropy", m.mean_entropy),
            ("mean_kappa_fmm", m.mean_kappa_vs_fmm),
        ];
        for (metric, v) in rows {
            out.write_record([id.as_str(), m.model.name(), "", metric, &opt(v)])?;
        }
    }
    for p in &s.params {
        let x = &p.metrics;
        let rows = [
            ("truth", Some(x.truth)),
            ("mean", Some(x.mean)),
            ("bias", Some(x.bias)),
            ("relative_bias", x.relative_bias),
            ("empirical_se", Some(x.empirical_se)),
            ("rmse", Some(x.rmse)),
            ("relative_rmse", x.relative_rmse),
            ("coverage", x.coverage),
            ("mc_se_bias", Some(x.mc_se_bias)),
        ];
        for (metric, v) in rows {
            out.write_record([id.as_str(), p.model.name(), &p.parameter, metric, &opt(v)])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_formulas() {
        let m = performance_metrics(&[1.9, 2.1], &[Some((1.8, 2.2)), Some((2.05, 2.3))], 2.0).unwrap();
        assert!(m.relative_bias.unwrap().abs() < 1e-12);
        assert!((m.empirical_se - 0.02f64.sqrt()).abs() < 1e-12);
        assert!((m.relative_rmse.unwrap() - 0.05).abs() < 1e-12);
        assert_eq!(m.coverage, Some(0.5));
        let z = performance_metrics(&[0.1, -0.1, 0.3], &[None, None, None], 0.0).unwrap();
        assert!(z.relative_bias.is_none() && z.coverage.is_none());
        assert!(performance_metrics(&[1.0], &[None], 1.0).is_err());
    }

    #[test]
    fn class_matching_undoes_swaps() {
        let c = crate::simulate::condition(1).unwrap();
        let t = c.truth().unwrap();
        let swapped = t.permuted(&[1, 0]);
        assert_eq!(match_classes(&swapped, &t), vec![1, 0]);
        assert_eq!(match_classes(&t, &t), vec![0, 1]);
    }

    #[test]
    fn marginal_truths() {
        let c = crate::simulate::condition(1).unwrap();
        let t = McModel::Fmm.truth(&c).unwrap();
        let full = c.truth().unwrap();
        let b = &full.classes[0].paths;
        let expect = full.classes[0].psi[(0, 0)] + b[(0, 0)].powi(2) + b[(0, 1)].powi(2);
        assert!((t.classes[0].psi[(0, 0)] - expect).abs() < 1e-12);
        let Gating::Proportions(p) = &t.gating else { panic!() };
        assert!((p[0] - 0.5).abs() < 1e-12);
        let ms = McModel::MisspecifiedCp.truth(&c).unwrap();
        assert_eq!(natural_vector(&ms, &McModel::MisspecifiedCp.spec(2)).len(), crate::mixture::parameter_count(&McModel::MisspecifiedCp.spec(2)));
    }
}

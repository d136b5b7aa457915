use std::io::Write;
use std::time::Instant;

use anyhow::{Context, Result};
use growthmix::classification::{entropy, modal_assignment, posterior_matrix};
use growthmix::data::{LongitudinalDataset, Standardization};
use growthmix::fit::{enumerate_classes, fit, FitStatus, FittedModel};
use growthmix::forest::{variable_importance, write_importance_csv};
use growthmix::growth::Frame;
use growthmix::inference::{parameter_table, InformationCriteria, ParamEstimate};
use growthmix::io::{export_writers, ingest, IngestOptions};
use growthmix::mixture::{natural_names, natural_vector, Gating, MixtureParams, MixtureSpec, ModelKind};
use growthmix::montecarlo::{
    misspecification_experiment, run_condition, write_estimates_csv, write_replications_csv, write_summary_csv,
};
use growthmix::simulate::{
    condition, condition_grid, forest_scenario, generate, generate_from, SimCondition, EXPERT_NAMES, GATING_NAMES,
};
use growthmix::stepwise::{three_step_fit, two_step_fit, StepwiseResult};
use serde::Serialize;

use super::config::{schema, RunConfig};
use super::output::Outputs;
use super::{Command, NotConverged, Validation};

pub fn dispatch(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    let name = cmd.name();
    let started = Instant::now();
    let mut out = Outputs::new(cfg, name);
    let outcome = match cmd {
        Command::Schema => {
            // A closed pipe is not an error for a print-only command.
            let _ = writeln!(std::io::stdout(), "{}", schema());
            return Ok(());
        }
        Command::Conditions => return conditions(),
        Command::Simulate { .. } => simulate(cfg, &mut out),
        Command::Fit { .. } => fit_cmd(cfg, &mut out),
        Command::Enumerate { .. } => enumerate(cfg, &mut out),
        Command::Mc { .. } => mc(cfg, &mut out),
        Command::Misspec { .. } => misspec(cfg, &mut out),
        Command::Stepwise { .. } => stepwise(cfg, &mut out),
        Command::Importance { .. } => importance(cfg, &mut out),
    };
    // Non-convergence still leaves the best-attempt outputs on disk.
    let status = match outcome {
        Ok(()) => None,
        Err(e) if e.is::<NotConverged>() => Some(e),
        Err(e) => return Err(e),
    };
    let written = out.finish(name, cfg)?;
    for p in &written {
        log::info!("wrote {}", p.display());
    }
    log::info!("{name} finished in {:.2} s", started.elapsed().as_secs_f64());
    match status {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn load_data(cfg: &RunConfig, default_standardize: &[String]) -> Result<LongitudinalDataset> {
    let outcomes = cfg
        .data
        .outcomes
        .as_ref()
        .ok_or_else(|| Validation("an outcome file is required (--outcomes)".into()))?;
    let opts = IngestOptions {
        standardize: cfg.data.standardize.clone().unwrap_or_else(|| default_standardize.to_vec()),
    };
    let (data, report) = ingest(outcomes, cfg.data.covariates.as_deref(), &opts)
        .with_context(|| format!("reading {}", outcomes.display()))?;
    for n in &report.notices {
        eprintln!("notice: {n}");
    }
    Ok(data)
}

fn conditions() -> Result<()> {
    let mut w = csv::Writer::from_writer(std::io::stdout());
    w.write_record(["id", "label", "scenario", "knot_separation", "allocation", "r2_1", "r2_2", "residual", "n"])?;
    for c in condition_grid() {
        w.write_record([
            c.id.to_string(),
            c.label(),
            c.scenario.to_string(),
            c.knot_separation().to_string(),
            format!("{:?}", c.allocation).to_lowercase(),
            c.r2[0].to_string(),
            c.r2[1].to_string(),
            c.residual.to_string(),
            c.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct NamedValue {
    name: String,
    value: f64,
}

fn named(params: &MixtureParams, spec: &MixtureSpec) -> Vec<NamedValue> {
    natural_names(spec)
        .into_iter()
        .zip(natural_vector(params, spec))
        .map(|(name, value)| NamedValue { name, value })
        .collect()
}

#[derive(Serialize)]
struct Membership {
    id: String,
    class: usize,
}

#[derive(Serialize)]
struct Truth {
    condition: Option<SimCondition>,
    scenario: Option<u8>,
    seed: u64,
    spec: MixtureSpec,
    original: Vec<NamedValue>,
    reparameterized: Vec<NamedValue>,
    /// 1-based generating class of each individual.
    memberships: Vec<Membership>,
}

fn simulate(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let s = &cfg.simulate;
    let (generated, cond) = match s.scenario {
        Some(sc) => {
            let mut model = forest_scenario(sc, s.n.unwrap_or(500))?;
            model.membership = s.membership;
            (generate_from(&model, cfg.seed)?, None)
        }
        None => {
            let id = s.condition.ok_or_else(|| Validation("simulate needs --condition or --scenario".into()))?;
            let mut c = condition(id)?;
            c.membership = s.membership;
            c.variance_base = s.variance_base;
            if let Some(n) = s.n {
                c.n = n;
            }
            (generate(&c, cfg.seed)?, Some(c))
        }
    };
    let k = generated.truth.classes.len();
    let spec = if matches!(generated.truth.gating, Gating::Logistic(_)) {
        MixtureSpec::new(ModelKind::Full, k).with_gating(GATING_NAMES)
    } else {
        MixtureSpec::new(ModelKind::Gp, k)
    }
    .with_expert(EXPERT_NAMES);
    let truth = Truth {
        condition: cond,
        scenario: s.scenario,
        seed: cfg.seed,
        original: named(&generated.truth, &spec),
        reparameterized: named(&generated.truth.to_frame(Frame::Reparameterized), &spec),
        spec,
        memberships: generated
            .data
            .individuals
            .iter()
            .zip(&generated.memberships)
            .map(|(i, m)| Membership {
                id: i.id.clone(),
                class: m + 1,
            })
            .collect(),
    };
    let (mut o, mut c) = (Vec::new(), Vec::new());
    export_writers(&generated.data, &mut o, &mut c, Some(&out.header))?;
    out.csv("outcomes.csv", |w| {
        w.extend_from_slice(strip_comments(&o));
        Ok(())
    })?;
    out.csv("covariates.csv", |w| {
        w.extend_from_slice(strip_comments(&c));
        Ok(())
    })?;
    out.json("truth.json", &truth)
}

/// Drops the leading `#` rows so the caller's header block is not repeated.
fn strip_comments(buf: &[u8]) -> &[u8] {
    let mut start = 0;
    while buf[start..].starts_with(b"#") {
        match buf[start..].iter().position(|&b| b == b'\n') {
            Some(p) => start += p + 1,
            None => return &[],
        }
    }
    &buf[start..]
}

#[derive(Serialize)]
struct Responsibility {
    id: String,
    probabilities: Vec<f64>,
}

#[derive(Serialize)]
struct FitReport {
    spec: MixtureSpec,
    n: usize,
    standardization: Vec<Standardization>,
    converged: bool,
    status: FitStatus,
    attempts: usize,
    iterations: usize,
    log_likelihood: f64,
    criteria: InformationCriteria,
    /// Relative entropy of the posterior class probabilities (K >= 2).
    entropy: Option<f64>,
    knot_bounds: (f64, f64),
    information_singular: Option<bool>,
    original: Vec<ParamEstimate>,
    reparameterized: Vec<ParamEstimate>,
    /// Modal class counts.
    class_sizes: Vec<usize>,
    responsibilities: Vec<Responsibility>,
}

fn fit_report(fm: &FittedModel, data: &LongitudinalDataset, seed: u64) -> FitReport {
    let post = posterior_matrix(fm);
    let k = fm.spec.classes;
    FitReport {
        spec: fm.spec.clone(),
        n: fm.n,
        standardization: data.standardization.clone(),
        converged: fm.converged(),
        status: fm.status.clone(),
        attempts: fm.attempts,
        iterations: fm.iterations,
        log_likelihood: fm.log_likelihood,
        criteria: fm.information_criteria(),
        entropy: if k >= 2 { entropy(&post).ok() } else { None },
        knot_bounds: fm.knot_bounds,
        information_singular: fm.standard_errors.as_ref().map(|s| s.singular),
        original: parameter_table(fm, Frame::Original),
        reparameterized: parameter_table(fm, Frame::Reparameterized),
        class_sizes: modal_assignment(&post, seed).counts(),
        responsibilities: data
            .individuals
            .iter()
            .enumerate()
            .map(|(i, ind)| Responsibility {
                id: ind.id.clone(),
                probabilities: (0..k).map(|c| fm.responsibilities[(i, c)]).collect(),
            })
            .collect(),
    }
}

fn not_converged(what: &str, status: &FitStatus) -> anyhow::Error {
    let reason = match status {
        FitStatus::NotConverged(r) => r.as_str(),
        FitStatus::Converged => "",
    };
    NotConverged(format!("{what} did not converge: {reason}")).into()
}

fn fit_cmd(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let data = load_data(cfg, &cfg.model.expert_covariates)?;
    let fm = fit(&cfg.model, &data, None, &cfg.fit)?;
    out.json("fit_report.json", &fit_report(&fm, &data, cfg.seed))?;
    if !fm.converged() {
        return Err(not_converged("the fit", &fm.status));
    }
    Ok(())
}

#[derive(Serialize)]
struct EnumerationRow {
    classes: usize,
    converged: bool,
    log_likelihood: Option<f64>,
    neg2ll: Option<f64>,
    aic: Option<f64>,
    bic: Option<f64>,
    parameters: Option<usize>,
    entropy: Option<f64>,
    note: String,
}

#[derive(Serialize)]
struct EnumerationReport {
    chosen: Option<usize>,
    rows: Vec<EnumerationRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn enumerate(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let data = load_data(cfg, &[])?;
    let e = match enumerate_classes(&data, cfg.kmax, &cfg.fit) {
        Ok(e) => e,
        Err(growthmix::Error::Numeric(msg)) => return Err(NotConverged(msg).into()),
        Err(err) => return Err(err.into()),
    };
    let rows: Vec<EnumerationRow> = e
        .entries
        .iter()
        .map(|en| {
            let fm = en.fit.as_ref();
            EnumerationRow {
                classes: en.classes,
                converged: fm.is_some_and(|f| f.converged()),
                log_likelihood: fm.map(|f| f.log_likelihood),
                neg2ll: en.criteria.map(|c| c.neg2ll),
                aic: en.criteria.map(|c| c.aic),
                bic: en.criteria.map(|c| c.bic),
                parameters: en.criteria.map(|c| c.parameters),
                entropy: fm.filter(|f| f.spec.classes >= 2).and_then(|f| entropy(&posterior_matrix(f)).ok()),
                note: match (fm, &en.error) {
                    (_, Some(err)) => err.clone(),
                    (Some(f), None) => match &f.status {
                        FitStatus::Converged => String::new(),
                        FitStatus::NotConverged(r) => r.clone(),
                    },
                    (None, None) => String::new(),
                },
            }
        })
        .collect();
    out.csv("enumeration.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["classes", "converged", "loglik", "neg2ll", "aic", "bic", "parameters", "entropy", "chosen", "note"])?;
        for r in &rows {
            w.write_record([
                r.classes.to_string(),
                r.converged.to_string(),
                opt(r.log_likelihood),
                opt(r.neg2ll),
                opt(r.aic),
                opt(r.bic),
                r.parameters.map(|p| p.to_string()).unwrap_or_default(),
                opt(r.entropy),
                (r.classes == e.chosen).to_string(),
                r.note.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    out.json(
        "enumeration.json",
        &EnumerationReport {
            chosen: Some(e.chosen),
            rows,
        },
    )
}

fn mc_condition(cfg: &RunConfig) -> Result<SimCondition> {
    let id = cfg.condition.ok_or_else(|| Validation("a grid condition is required (--condition)".into()))?;
    let mut c = condition(id)?;
    c.membership = cfg.simulate.membership;
    c.variance_base = cfg.simulate.variance_base;
    if let Some(n) = cfg.simulate.n {
        c.n = n;
    }
    Ok(c)
}

fn mc(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let cond = mc_condition(cfg)?;
    let run = run_condition(&cond, &cfg.mc)?;
    out.csv("replications.csv", |w| write_replications_csv(w, &run))?;
    out.csv("estimates.csv", |w| write_estimates_csv(w, &run))?;
    out.csv("summary.csv", |w| write_summary_csv(w, &run.summary))?;
    out.json("summary.json", &run.summary)?;
    let s = &run.summary;
    if s.kept < s.requested {
        return Err(NotConverged(format!(
            "only {} of {} requested replications converged jointly ({} attempted)",
            s.kept, s.requested, s.attempted
        ))
        .into());
    }
    Ok(())
}

fn misspec(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let cond = mc_condition(cfg)?;
    let (report, run) = misspecification_experiment(&cond, &cfg.mc)?;
    out.csv("misspecification.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["condition", "model", "convergence_rate", "mean_accuracy", "mean_entropy", "mean_abs_relative_bias"])?;
        for r in &report.rows {
            w.write_record([
                report.condition.to_string(),
                r.model.name().to_string(),
                r.convergence_rate.to_string(),
                opt(r.mean_accuracy),
                opt(r.mean_entropy),
                opt(r.mean_abs_relative_bias),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    out.json("misspecification.json", &report)?;
    out.csv("replications.csv", |w| write_replications_csv(w, &run))?;
    out.csv("summary.csv", |w| write_summary_csv(w, &run.summary))?;
    if run.summary.kept < run.summary.requested {
        return Err(NotConverged(format!(
            "only {} of {} requested replications converged jointly",
            run.summary.kept, run.summary.requested
        ))
        .into());
    }
    Ok(())
}

#[derive(Serialize)]
struct StepwiseReport {
    classes: FitReport,
    two_step: Option<StepwiseResult>,
    three_step: Option<StepwiseResult>,
}

fn stepwise(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    if cfg.stepwise.covariates.is_empty() {
        return Err(Validation("stepwise needs at least one --covariate".into()).into());
    }
    if cfg.model.kind.has_gating_covariates() {
        return Err(Validation("the class model for stepwise fits must not have gating covariates (use fmm or gp)".into()).into());
    }
    let data = load_data(cfg, &cfg.model.expert_covariates)?;
    let fm = fit(&cfg.model, &data, None, &cfg.fit)?;
    let mut report = StepwiseReport {
        classes: fit_report(&fm, &data, cfg.seed),
        two_step: None,
        three_step: None,
    };
    let mut failure = None;
    if fm.converged() {
        report.three_step = Some(three_step_fit(&data, &fm, &cfg.stepwise.covariates, cfg.seed)?);
        let (two, fm2) = two_step_fit(&data, &fm, &cfg.stepwise.covariates, &cfg.fit)?;
        if !fm2.converged() {
            failure = Some(not_converged("the two-step fit", &fm2.status));
        }
        report.two_step = Some(two);
    } else {
        failure = Some(not_converged("the class model", &fm.status));
    }
    out.csv("stepwise.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["method", "class", "term", "estimate", "se", "lower", "upper", "converged", "separated"])?;
        for r in report.two_step.iter().chain(report.three_step.iter()) {
            let method = serde_json::to_value(r.method).expect("method serializes");
            for c in &r.coefficients {
                w.write_record([
                    method.as_str().unwrap_or_default().to_string(),
                    c.class.to_string(),
                    c.term.clone(),
                    c.estimate.to_string(),
                    opt(c.se),
                    opt(c.lower),
                    opt(c.upper),
                    r.converged.to_string(),
                    r.separated.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    })?;
    out.json("stepwise.json", &report)?;
    failure.map_or(Ok(()), Err)
}

fn importance(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let data = load_data(cfg, &[])?;
    let covariates = if cfg.importance.covariates.is_empty() {
        data.covariate_names.clone()
    } else {
        cfg.importance.covariates.clone()
    };
    if covariates.is_empty() {
        return Err(Validation("importance needs covariates (--covariates file or --covariate)".into()).into());
    }
    let report = variable_importance(&cfg.importance.template, &data, &covariates, &cfg.importance.forest)?;
    out.csv("importance.csv", |w| write_importance_csv(w, &report))?;
    out.json("importance.json", &report)
}

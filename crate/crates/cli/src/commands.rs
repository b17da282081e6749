//! Subcommand implementations. Each returns `Ok(false)` when the command ran
//! but a check failed or a run aborted.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use pgcert_core::constants::{compute_constants, iteration_budget, ConstantsSetting, FamilySpec};
use pgcert_core::objective::ObjectiveSpec;
use pgcert_core::optimizer::{hyperparams_for_fosp, run_pg, with_jobs};
use pgcert_core::verify::{path_count, run_check, run_suite, CheckReport, Relation, SuiteOptions, CHECK_NAMES};
use pgcert_core::{Error as CoreError, RunRecord};

use crate::config::{self, Auto, ConfigError, ExperimentConfig, MdpSource, Plan, SweepAxis, SweepSpec};
use crate::output::{self, Meta, OutputSet, SeedSummary, LOG_COLUMNS};
use crate::{Cli, Command, ConstantsArgs, PolicyArg, VerifyArgs};

const DEFAULT_OUTPUT_DIR: &str = "pgcert-out";

pub fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Run(args) => run(cli, args.dry_run),
        Command::Constants(args) => constants(args),
        Command::Verify(args) => verify(cli, args),
        Command::Sweep(_) => sweep(cli),
    }
}

fn usage(e: impl Into<anyhow::Error>) -> anyhow::Error {
    ConfigError(e.into()).into()
}

fn load_experiment(cli: &Cli) -> Result<(ExperimentConfig, Option<PathBuf>)> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| usage(anyhow!("this command needs --config")))?;
    let mut cfg = config::load_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    Ok((cfg, path.parent().map(Path::to_path_buf)))
}

fn output_dir(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    cli.output_dir
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

fn run_seeds(plan: &Plan, seeds: &[u64], jobs: usize) -> Result<Vec<RunRecord>> {
    let runs = with_jobs(jobs, || {
        seeds
            .par_iter()
            .map(|&s| run_pg(&plan.mdp, &plan.init, &plan.run_for_seed(s)))
            .collect::<pgcert_core::Result<Vec<_>>>()
    })??;
    Ok(runs)
}

fn run(cli: &Cli, dry_run: bool) -> Result<bool> {
    let (cfg, base_dir) = load_experiment(cli)?;
    if cfg.sweep.is_some() {
        return Err(usage(anyhow!("config has a sweep section; use `pgcert sweep`")));
    }
    let plan = config::resolve(&cfg, base_dir.as_deref())?;
    if dry_run {
        print!("{}", String::from_utf8(output::pretty(&plan.echo)?)?);
        return Ok(true);
    }
    let runs = run_seeds(&plan, &plan.seeds, cli.jobs)?;

    let mut files = OutputSet::default();
    let mut summaries = Vec::with_capacity(runs.len());
    for (&seed, record) in plan.seeds.iter().zip(&runs) {
        let rows = output::log_rows(record, plan.j_star);
        files.add(format!("run_seed{seed}.jsonl"), output::jsonl(&rows)?);
        files.add(format!("run_seed{seed}.csv"), output::csv_bytes(&rows, &LOG_COLUMNS)?);
        summaries.push(SeedSummary::new(seed, record, plan.j_star));
    }
    let summary = json!({
        "j_star": plan.j_star,
        "recipe": plan.recipe,
        "runs": summaries,
    });
    files.add("summary.json", output::pretty(&summary)?);
    files.add("config.resolved.json", output::pretty(&plan.echo)?);
    files.add("meta.json", output::pretty(&Meta::new("run", cli.jobs))?);
    let dir = output_dir(cli, &cfg);
    files.commit(&dir)?;

    for s in &summaries {
        println!(
            "seed {}: {} after {} iterations, J = {:.6}, gap = {:.3e}, min |grad J|^2 = {}",
            s.seed,
            status_word(s),
            s.final_t,
            s.final_j,
            s.gap,
            s.min_grad_j_sq.map_or("n/a".to_string(), |g| format!("{g:.3e}")),
        );
    }
    println!("outputs in {}", dir.display());
    Ok(!summaries.iter().any(SeedSummary::aborted))
}

fn status_word(s: &SeedSummary) -> String {
    match &s.status {
        pgcert_core::RunStatus::Completed => "completed".into(),
        pgcert_core::RunStatus::Stopped { .. } => "stopped".into(),
        pgcert_core::RunStatus::Aborted { reason, .. } => format!("aborted ({reason})"),
    }
}

fn constants(args: &ConstantsArgs) -> Result<bool> {
    let spec = ObjectiveSpec::new(args.objective, args.lambda).map_err(usage)?;
    let estimator = config::estimator_for(args.estimator, &spec)?;
    let family = match args.policy {
        PolicyArg::Softmax => FamilySpec::SoftmaxTabular {
            num_states: args.states,
            num_actions: args.actions,
        },
        PolicyArg::Gaussian => FamilySpec::GaussianLinear {
            feature_bound: args.feature_bound,
            sigma: args.sigma,
        },
    };
    let report = compute_constants(&ConstantsSetting {
        family,
        objective: spec,
        estimator: estimator.kind,
        r_max: args.rmax,
        gamma: args.gamma,
        horizon: args.horizon,
        batch_size: args.batch_size,
    })
    .map_err(usage)?;
    let mut out = serde_json::to_value(&report)?;
    if let Some(eps) = args.epsilon {
        let delta0 = args.delta0.unwrap_or(2.0 * args.rmax / (1.0 - args.gamma));
        let budget = iteration_budget(&report, eps, delta0).map_err(usage)?;
        let fosp = hyperparams_for_fosp(&report, eps, None, Some(delta0)).map_err(usage)?;
        let obj = out.as_object_mut().expect("report serializes to an object");
        obj.insert("iteration_budget".into(), serde_json::to_value(budget)?);
        obj.insert("fosp".into(), serde_json::to_value(fosp)?);
    }
    print!("{}", String::from_utf8(output::pretty(&out)?)?);
    Ok(true)
}

fn verify(cli: &Cli, args: &VerifyArgs) -> Result<bool> {
    if args.list {
        for name in CHECK_NAMES {
            println!("{name}");
        }
        return Ok(true);
    }
    let check = args.check.as_str();
    match check {
        "suite" | "all" => {}
        name if CHECK_NAMES.contains(&name) => {}
        other => {
            return Err(usage(anyhow!(
                "unknown check {other:?}; available: suite, all, {}",
                CHECK_NAMES.join(", ")
            )))
        }
    }
    let mdp = MdpSource::parse_flag(&args.mdp)?.load(None)?;
    let defaults = SuiteOptions::default();
    let opts = SuiteOptions {
        base_seed: cli.seed.unwrap_or(defaults.base_seed),
        mutation: args.mutation,
        enumeration_horizon: args.horizon.unwrap_or(defaults.enumeration_horizon),
        abc_samples: args.samples.unwrap_or(defaults.abc_samples),
        run_iterations: args.iterations.unwrap_or(defaults.run_iterations),
        ..defaults
    };
    let needs_enumeration = matches!(check, "suite" | "all" | "unbiasedness" | "mutations");
    if needs_enumeration {
        path_count(&mdp, opts.enumeration_horizon).map_err(usage)?;
    }

    let reports = with_jobs(cli.jobs, || -> pgcert_core::Result<Vec<CheckReport>> {
        match check {
            "suite" => run_suite(&mdp, &opts),
            "all" => {
                let mut all = run_suite(&mdp, &opts)?;
                for extra in ["global_barrier_probability", "mutations"] {
                    all.extend(run_check(extra, &mdp, &opts)?);
                }
                Ok(all)
            }
            name => run_check(name, &mdp, &opts),
        }
    })?
    .map_err(|e| match e {
        CoreError::EnumerationTooLarge { .. } => usage(e),
        other => other.into(),
    })?;

    for r in &reports {
        let mut label = r.check_name.clone();
        for key in ["estimator", "batch_size"] {
            if let Some(v) = r.details.get(key) {
                label.push_str(&format!(" {key}={}", v.as_str().map_or(v.to_string(), str::to_string)));
            }
        }
        eprintln!(
            "{label:<44} {:<12} measured {:.4e} {} {:.4e}",
            format!("{:?}", r.status),
            r.measured,
            relation_symbol(r.relation),
            r.bound
        );
    }
    let bytes = output::pretty(&reports)?;
    print!("{}", String::from_utf8(bytes.clone())?);
    if let Some(dir) = &cli.output_dir {
        let mut files = OutputSet::default();
        files.add(format!("verify_{}.json", args.check), bytes);
        files.add("meta.json", output::pretty(&Meta::new("verify", cli.jobs))?);
        files.commit(dir)?;
    }
    Ok(!reports.iter().any(CheckReport::is_failure))
}

fn relation_symbol(r: Relation) -> &'static str {
    match r {
        Relation::AtMost => "<=",
        Relation::Exceeds => ">",
    }
}

/// One resolved grid point.
struct SweepPoint {
    value: f64,
    plan: Plan,
}

#[derive(Serialize)]
struct PointRow<'a> {
    axis: &'a str,
    value: f64,
    seed: u64,
    status: String,
    iterations: u64,
    batch_size: usize,
    horizon: usize,
    eta0: f64,
    final_j: f64,
    gap: f64,
    min_grad_j_sq: Option<f64>,
    trajectories: u64,
    env_steps: u64,
}

const POINT_COLUMNS: [&str; 13] = [
    "axis",
    "value",
    "seed",
    "status",
    "iterations",
    "batch_size",
    "horizon",
    "eta0",
    "final_j",
    "gap",
    "min_grad_j_sq",
    "trajectories",
    "env_steps",
];

#[derive(Serialize)]
struct AggregateRow<'a> {
    axis: &'a str,
    value: f64,
    n: usize,
    gap_mean: f64,
    gap_se: Option<f64>,
    min_grad_j_sq_mean: Option<f64>,
    min_grad_j_sq_se: Option<f64>,
    env_steps_mean: f64,
    env_steps_se: Option<f64>,
}

const AGGREGATE_COLUMNS: [&str; 9] = [
    "axis",
    "value",
    "n",
    "gap_mean",
    "gap_se",
    "min_grad_j_sq_mean",
    "min_grad_j_sq_se",
    "env_steps_mean",
    "env_steps_se",
];

/// Mean and standard error; the error needs at least two samples.
fn mean_se(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let se = (xs.len() > 1).then(|| {
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    });
    (mean, se)
}

fn integral(axis: SweepAxis, v: f64) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(usage(anyhow!(
            "sweep values for {} must be positive integers, got {v}",
            axis.as_str()
        )))
    }
}

fn apply_axis(base: &ExperimentConfig, axis: SweepAxis, v: f64) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::M => cfg.batch_size = Auto::Value(integral(axis, v)?),
        SweepAxis::H => cfg.horizon = Auto::Value(integral(axis, v)?),
        SweepAxis::Eta => {
            if cfg.schedule.kind != config::ScheduleKind::Constant {
                return Err(usage(anyhow!("an eta sweep needs a constant schedule")));
            }
            cfg.schedule.eta = Some(Auto::Value(v));
        }
        SweepAxis::Lambda => cfg.objective = ObjectiveSpec::new(cfg.objective.kind(), v).map_err(usage)?,
        SweepAxis::Epsilon => cfg.epsilon = Some(v),
    }
    Ok(cfg)
}

fn sweep(cli: &Cli) -> Result<bool> {
    let (mut cfg, base_dir) = load_experiment(cli)?;
    let spec: SweepSpec = cfg
        .sweep
        .take()
        .ok_or_else(|| usage(anyhow!("config has no sweep section")))?;
    if spec.values.is_empty() || spec.seeds_per_point == 0 {
        return Err(usage(anyhow!(
            "a sweep needs at least one value and one seed per point"
        )));
    }
    let first_seed = cli.seed.unwrap_or(cfg.seeds[0]);
    cfg.seeds = (0..spec.seeds_per_point as u64).map(|k| first_seed + k).collect();

    // Resolve every point before running any, so a bad value fails fast.
    let points: Vec<SweepPoint> = spec
        .values
        .iter()
        .map(|&value| {
            let point_cfg = apply_axis(&cfg, spec.axis, value)?;
            let plan = config::resolve(&point_cfg, base_dir.as_deref())
                .with_context(|| format!("sweep point {} = {value}", spec.axis.as_str()))?;
            Ok(SweepPoint { value, plan })
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|i| points[i].plan.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let records = with_jobs(cli.jobs, || {
        jobs.par_iter()
            .map(|&(i, s)| {
                let p = &points[i].plan;
                run_pg(&p.mdp, &p.init, &p.run_for_seed(s))
            })
            .collect::<pgcert_core::Result<Vec<_>>>()
    })??;

    let axis = spec.axis.as_str();
    let mut point_rows = Vec::with_capacity(jobs.len());
    let mut any_aborted = false;
    for (&(i, seed), record) in jobs.iter().zip(&records) {
        let p = &points[i];
        let s = SeedSummary::new(seed, record, p.plan.j_star);
        any_aborted |= s.aborted();
        point_rows.push(PointRow {
            axis,
            value: p.value,
            seed,
            status: status_word(&s),
            iterations: p.plan.run.iterations,
            batch_size: p.plan.run.batch_size,
            horizon: p.plan.run.horizon,
            eta0: p.plan.run.schedule.step_size(0),
            final_j: s.final_j,
            gap: s.gap,
            min_grad_j_sq: s.min_grad_j_sq,
            trajectories: s.trajectories,
            env_steps: s.env_steps,
        });
    }
    let aggregate: Vec<AggregateRow> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let rows: Vec<&PointRow> = jobs
                .iter()
                .zip(&point_rows)
                .filter(|(j, _)| j.0 == i)
                .map(|(_, r)| r)
                .collect();
            let gaps: Vec<f64> = rows.iter().map(|r| r.gap).collect();
            let grads: Option<Vec<f64>> = rows.iter().map(|r| r.min_grad_j_sq).collect();
            let steps: Vec<f64> = rows.iter().map(|r| r.env_steps as f64).collect();
            let (gap_mean, gap_se) = mean_se(&gaps);
            let (grad_mean, grad_se) = grads.as_deref().map_or((None, None), |g| {
                let (m, se) = mean_se(g);
                (Some(m), se)
            });
            let (env_steps_mean, env_steps_se) = mean_se(&steps);
            AggregateRow {
                axis,
                value: p.value,
                n: rows.len(),
                gap_mean,
                gap_se,
                min_grad_j_sq_mean: grad_mean,
                min_grad_j_sq_se: grad_se,
                env_steps_mean,
                env_steps_se,
            }
        })
        .collect();

    let summary: Vec<Value> = points
        .iter()
        .map(|p| json!({ "value": p.value, "j_star": p.plan.j_star, "recipe": p.plan.recipe, "config": p.plan.echo }))
        .collect();
    let mut files = OutputSet::default();
    files.add("sweep_points.csv", output::csv_bytes(&point_rows, &POINT_COLUMNS)?);
    files.add(
        "sweep_aggregate.csv",
        output::csv_bytes(&aggregate, &AGGREGATE_COLUMNS)?,
    );
    files.add(
        "sweep_summary.json",
        output::pretty(&json!({ "axis": axis, "points": summary }))?,
    );
    files.add("meta.json", output::pretty(&Meta::new("sweep", cli.jobs))?);
    let dir = output_dir(cli, &cfg);
    files.commit(&dir)?;

    for a in &aggregate {
        println!(
            "{axis} = {}: gap {:.3e}, env steps {:.0} over {} seeds",
            a.value, a.gap_mean, a.env_steps_mean, a.n
        );
    }
    println!("outputs in {}", dir.display());
    Ok(!any_aborted)
}

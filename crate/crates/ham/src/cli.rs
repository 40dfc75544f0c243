//! Command-line front end. Exit codes: 0 success, 1 input error, 2 verification failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ham_core::estimators::{fixed_effect, fixed_effect_covariance, ridge_fit};
use ham_core::inference::{cochran_q, i_squared, interval_table, IntervalTable};
use ham_core::model::{standardize, StandardizationRecord, StandardizeMode};
use ham_core::risk::PseudoSign;
use ham_core::selection::{fit_ham, select_lambda_ridge, Criterion, SelectionOptions};
use ham_core::{Matrix, MetaProblem};
use serde_json::json;

use crate::check::{results_table, run_suite, CheckOptions, Suite};
use crate::compare::compare;
use crate::config::{FitEstimator, RunConfig};
use crate::io::{fit_csv, intervals_csv, load_input, write_problem_json, FitRow};
use crate::sim::{run_cells, setting_cells, CellSpec, EstimatorKind, Heterogeneity, Scenario, SimConfig, Spread};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INPUT: u8 = 1;
pub const EXIT_VERIFY: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "ham", version, about = "Heterogeneity-adaptive meta-analysis of linear models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Summary document or raw-data manifest (JSON).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Directory for all outputs [default: ham-out].
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Master seed for data generation and selection restarts [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Worker cap for parallel replicates.
    #[arg(long, env = "HAM_THREADS")]
    threads: Option<usize>,
    /// Interval level is 1 - alpha [default: 0.05].
    #[arg(long)]
    alpha: Option<f64>,
    /// Rescale non-intercept covariates to unit SD per study.
    #[arg(long)]
    standardize: bool,
    /// TOML file with any of the options; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write tidy long-format CSV for plotting.
    #[arg(long)]
    emit_plot_data: bool,
}

#[derive(Args, Debug, Clone, Default)]
struct SelectionFlags {
    /// Random simplex starts in addition to the plug-in start [default: 4].
    #[arg(long)]
    restarts: Option<usize>,
    /// Simplex convergence tolerance [default: 1e-8].
    #[arg(long)]
    tolerance: Option<f64>,
    /// Iteration cap per start; raise it for many studies [default: 2000].
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Select with the flipped pseudo-MSE correction sign (sensitivity runs).
    #[arg(long)]
    flipped_pseudo_sign: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit one estimator to an input and write estimates, intervals and diagnostics.
    Fit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        selection: SelectionFlags,
        #[arg(long, value_enum)]
        estimator: Option<FitEstimator>,
        /// Use the built-in synthetic multi-site corpus instead of --input.
        #[arg(long)]
        synthetic: bool,
    },
    /// Run Monte-Carlo cells and write the aggregated report.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        selection: SelectionFlags,
        /// 1, 2, 3, 4, or sel for the selection-criterion study.
        #[arg(long)]
        setting: Option<String>,
        #[arg(long = "het", value_enum)]
        heterogeneity: Option<Heterogeneity>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        p: Option<usize>,
        /// Sample sizes, comma separated.
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        #[arg(long, value_enum)]
        scenario: Option<Scenario>,
        #[arg(long, value_enum)]
        spread: Option<Spread>,
        #[arg(long)]
        reps: Option<usize>,
        /// Keep cells whose label contains any of these substrings.
        #[arg(long, value_delimiter = ',')]
        cells: Option<Vec<String>>,
        #[arg(long, value_enum, value_delimiter = ',')]
        estimators: Option<Vec<EstimatorKind>>,
    },
    /// Run the verification suites.
    Check {
        #[command(flatten)]
        common: Common,
        /// Suites to run, comma separated [default: all].
        #[arg(long, value_delimiter = ',')]
        suite: Option<Vec<String>>,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        calibration_replicates: Option<usize>,
        #[arg(long)]
        consistency_replicates: Option<usize>,
        /// Evaluate the pseudo-MSE with the wrong sign; the suites must notice.
        #[arg(long, hide = true)]
        inject_pseudo_sign_flip: bool,
    },
    /// Compare fixed-effect, centroid, MLE and HAM inference on one input.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        selection: SelectionFlags,
        #[arg(long)]
        synthetic: bool,
    },
}

/// An error carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

fn input_err(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_INPUT,
        message: message.into(),
    }
}

fn flag(b: bool) -> Option<bool> {
    b.then_some(true)
}

impl Common {
    fn to_config(&self) -> RunConfig {
        RunConfig {
            input: self.input.clone(),
            output_dir: self.output_dir.clone(),
            seed: self.seed,
            threads: self.threads,
            alpha: self.alpha,
            standardize: flag(self.standardize),
            emit_plot_data: flag(self.emit_plot_data),
            ..Default::default()
        }
    }
}

impl SelectionFlags {
    fn apply(&self, c: &mut RunConfig) {
        c.restarts = self.restarts;
        c.tolerance = self.tolerance;
        c.max_iterations = self.max_iterations;
        c.flipped_pseudo_sign = flag(self.flipped_pseudo_sign);
    }
}

fn effective(common: &Common, flags: RunConfig) -> Result<RunConfig, Failure> {
    let base = match &common.config {
        Some(path) => RunConfig::from_file(path).map_err(input_err)?,
        None => RunConfig::default(),
    };
    let eff = base.overlay(flags);
    let alpha = eff.alpha();
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(input_err(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if eff.threads == Some(0) {
        return Err(input_err("thread count must be positive"));
    }
    Ok(eff)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    fs::write(dir.join(name), contents).map_err(|e| input_err(format!("cannot write {}: {e}", dir.join(name).display())))
}

fn prepare_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir).map_err(|e| input_err(format!("cannot create {}: {e}", dir.display())))?;
    write(&dir, "effective-config.toml", &cfg.to_toml())?;
    Ok(dir)
}

fn selection_options(cfg: &RunConfig) -> Result<SelectionOptions, Failure> {
    let d = SelectionOptions::default();
    let sign = if cfg.flipped_pseudo_sign == Some(true) {
        PseudoSign::Flipped
    } else {
        PseudoSign::Corrected
    };
    let opts = SelectionOptions {
        tolerance: cfg.tolerance.unwrap_or(d.tolerance),
        max_iterations: cfg.max_iterations.unwrap_or(d.max_iterations),
        restarts: cfg.restarts.unwrap_or(d.restarts),
        seed: Some(cfg.seed()),
        criterion: Criterion::Pseudo(sign),
        ..d
    };
    opts.validate().map_err(|e| input_err(e.to_string()))?;
    Ok(opts)
}

struct Loaded {
    problem: MetaProblem,
    names: Vec<String>,
}

fn load(cfg: &RunConfig, dir: &Path) -> Result<Loaded, Failure> {
    if cfg.synthetic == Some(true) {
        let corpus = crate::synth::corpus(cfg.seed());
        write(dir, "synthetic-input.json", &write_problem_json(&corpus.problem, Some(&corpus.names)))?;
        return Ok(Loaded {
            problem: corpus.problem,
            names: corpus.names,
        });
    }
    let path = cfg.input.as_ref().ok_or_else(|| input_err("--input is required (or --synthetic)"))?;
    let loaded = load_input(path).map_err(|e| input_err(e.to_string()))?;
    Ok(Loaded {
        problem: loaded.problem,
        names: loaded.covariate_names,
    })
}

fn standardized(problem: &MetaProblem, mode: StandardizeMode) -> Result<(MetaProblem, StandardizationRecord), Failure> {
    standardize(problem, mode).map_err(|e| input_err(format!("cannot standardize: {e}")))
}

fn core_err(e: ham_core::HamError) -> Failure {
    input_err(e.to_string())
}

fn csv_err(e: csv::Error) -> Failure {
    input_err(e.to_string())
}

fn cmd_fit(cfg: &RunConfig) -> Result<Vec<String>, Failure> {
    let dir = prepare_dir(cfg)?;
    let Loaded { problem, names } = load(cfg, &dir)?;
    let alpha = cfg.alpha();
    let estimator = cfg.estimator.unwrap_or(FitEstimator::Ham);
    let std = cfg.standardize == Some(true);
    let mut warnings = Vec::new();
    let k = problem.k();
    let p = problem.p();
    let ids: Vec<String> = problem.studies().iter().map(|s| s.id.clone()).collect();
    let mut diag = json!({
        "estimator": format!("{estimator:?}").to_lowercase(),
        "k": k,
        "p": p,
        "alpha": alpha,
        "standardized": std,
    });
    if k >= 2 {
        let (q, df) = cochran_q(&problem).map_err(core_err)?;
        diag["heterogeneity"] = json!({
            "label": "descriptive",
            "i_squared": i_squared(&problem).map_err(core_err)?,
            "cochran_q": q,
            "df": df,
        });
    }

    let (rows, table): (Vec<FitRow>, Option<IntervalTable>) = match estimator {
        FitEstimator::Fe => {
            // A shared vector can only be mapped back when all studies share scales.
            let (work, rec) = if std {
                let (w, r) = standardized(&problem, StandardizeMode::Pooled)?;
                (w, Some(r))
            } else {
                (problem.clone(), None)
            };
            let mut theta = fixed_effect(&work).map_err(core_err)?;
            let mut cov = fixed_effect_covariance(&work).map_err(core_err)?;
            if let Some(r) = &rec {
                theta = r.back_shared(&theta);
                let s: Vec<f64> = r.scales[0].clone();
                cov = Matrix::from_vec(p, p, (0..p * p).map(|i| cov[(i / p, i % p)] / (s[i / p] * s[i % p])).collect())
                    .expect("p x p");
            }
            let table = interval_table(&["fixed-effect".to_string()], p, &theta, &cov, alpha, None).map_err(core_err)?;
            let rows = (0..p)
                .map(|l| FitRow {
                    study_id: "fixed-effect".into(),
                    covariate: l,
                    estimate: theta[l],
                    pi: None,
                    centroid: None,
                })
                .collect();
            (rows, Some(table))
        }
        FitEstimator::Mle => {
            let est = problem.beta_tilde();
            let table = interval_table(&ids, p, &est, &problem.dense_mle_covariance(), alpha, None).map_err(core_err)?;
            let rows = est
                .iter()
                .enumerate()
                .map(|(i, &e)| FitRow {
                    study_id: ids[i / p].clone(),
                    covariate: i % p,
                    estimate: e,
                    pi: None,
                    centroid: None,
                })
                .collect();
            (rows, Some(table))
        }
        FitEstimator::Ridge => {
            let (work, rec) = if std {
                let (w, r) = standardized(&problem, StandardizeMode::PerStudy)?;
                (w, Some(r))
            } else {
                (problem.clone(), None)
            };
            let opts = selection_options(cfg)?;
            let (lambda, rd) = select_lambda_ridge(&work, &opts).map_err(core_err)?;
            let fit = ridge_fit(&work, lambda).map_err(core_err)?;
            let est = rec.as_ref().map_or(fit.beta_r.clone(), |r| r.back_estimates(&fit.beta_r));
            diag["ridge"] = json!({"lambda": lambda, "umse": rd.objective, "umse_at_zero": rd.objective_at_zero,
                "evaluations": rd.evaluations, "note": rd.note});
            diag["intervals"] = json!("not produced: no interval procedure is defined for the ridge competitor");
            let rows = est
                .iter()
                .enumerate()
                .map(|(i, &e)| FitRow {
                    study_id: ids[i / p].clone(),
                    covariate: i % p,
                    estimate: e,
                    pi: None,
                    centroid: None,
                })
                .collect();
            (rows, None)
        }
        FitEstimator::Ham => {
            let (work, rec) = if std {
                let (w, r) = standardized(&problem, StandardizeMode::PerStudy)?;
                (w, Some(r))
            } else {
                (problem.clone(), None)
            };
            let opts = selection_options(cfg)?;
            let fit = fit_ham(&work, &opts).map_err(core_err)?;
            let (est, cov) = match &rec {
                Some(r) => (r.back_estimates(&fit.beta_hat), r.back_covariance(&fit.covariance)),
                None => (fit.beta_hat.clone(), fit.covariance.clone()),
            };
            let table = interval_table(&ids, p, &est, &cov, alpha, None).map_err(core_err)?;
            let m = &fit.meta;
            if let Some(w) = &m.warning {
                warnings.push(w.clone());
            }
            if let Some(n) = &m.note {
                warnings.push(n.clone());
            }
            diag["selection"] = json!({
                "criterion": m.criterion,
                "objective": m.objective,
                "start_objective": m.start_objective,
                "plug_in_pi_star": m.plug_in_pi_star.map(|c| json!({"value": c.value, "unclamped": c.unclamped})),
                "starts": m.starts,
                "best_start": m.best_start,
                "converged": m.converged,
                "iterations": m.iterations,
                "evaluations": m.evaluations,
                "pi": fit.pi.as_slice(),
            });
            if std {
                diag["centroid_scale"] = json!("standardized units");
            }
            let rows = est
                .iter()
                .enumerate()
                .map(|(i, &e)| FitRow {
                    study_id: ids[i / p].clone(),
                    covariate: i % p,
                    estimate: e,
                    pi: Some(fit.pi.as_slice()[i / p]),
                    centroid: fit.theta_hat.as_ref().map(|t| t[i % p]),
                })
                .collect();
            (rows, Some(table))
        }
    };
    if k == 1 && !warnings.iter().any(|w| w.contains("nothing to borrow")) {
        warnings.push("single study: nothing to borrow".into());
    }
    diag["warnings"] = json!(warnings);
    write(&dir, "fit.csv", &fit_csv(&rows, &names).map_err(csv_err)?)?;
    if let Some(t) = &table {
        write(&dir, "intervals.csv", &intervals_csv(t, &names).map_err(csv_err)?)?;
    }
    write(&dir, "diagnostics.json", &serde_json::to_string_pretty(&diag).expect("json"))?;
    if cfg.emit_plot_data == Some(true) {
        if let Some(t) = &table {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["study_id", "covariate", "estimate", "lower", "upper", "pi"]).map_err(csv_err)?;
            for (r, row) in t.rows.iter().zip(&rows) {
                w.write_record([
                    r.study_id.clone(),
                    names.get(r.covariate).cloned().unwrap_or_default(),
                    format!("{:.8}", r.estimate),
                    format!("{:.8}", r.lower),
                    format!("{:.8}", r.upper),
                    row.pi.map_or_else(String::new, |v| format!("{v:.8}")),
                ])
                .map_err(csv_err)?;
            }
            let bytes = w.into_inner().map_err(|e| input_err(e.to_string()))?;
            write(&dir, "plot-data.csv", &String::from_utf8(bytes).expect("utf-8"))?;
        }
    }
    println!("wrote fit to {}", dir.display());
    Ok(warnings)
}

fn simulation_cells(cfg: &RunConfig) -> Result<Vec<CellSpec>, Failure> {
    let setting = cfg.setting.as_deref().ok_or_else(|| input_err("--setting is required"))?;
    let id = match setting {
        "1" => 1,
        "2" => 2,
        "3" => 3,
        "4" => 4,
        "sel" => 5,
        other => return Err(input_err(format!("unknown setting '{other}' (expected 1, 2, 3, 4 or sel)"))),
    };
    let cells: Vec<CellSpec> = setting_cells(id)
        .into_iter()
        .filter(|c| match c {
            CellSpec::Setting1 { n, p } => {
                cfg.p.is_none_or(|v| v == *p) && cfg.n.as_ref().is_none_or(|v| v.as_slice() == n.as_slice())
            }
            CellSpec::Setting2 { k, heterogeneity } => {
                cfg.k.is_none_or(|v| v == *k) && cfg.heterogeneity.is_none_or(|h| h == *heterogeneity)
            }
            CellSpec::Setting3 { spread } => cfg.spread.is_none_or(|s| s == *spread),
            CellSpec::Setting4 { scenario, n } => {
                cfg.scenario.is_none_or(|s| s == *scenario) && cfg.n.as_ref().is_none_or(|v| v.as_slice() == [*n])
            }
            CellSpec::SelectionStudy { n } => cfg.n.as_ref().is_none_or(|v| v.as_slice() == n.as_slice()),
            CellSpec::Custom { .. } => true,
        })
        .filter(|c| {
            cfg.cells
                .as_ref()
                .is_none_or(|subs| subs.iter().any(|s| c.label().contains(s.as_str())))
        })
        .collect();
    if cells.is_empty() {
        return Err(input_err("no simulation cell matches the given filters"));
    }
    Ok(cells)
}

fn cmd_simulate(cfg: &RunConfig) -> Result<Vec<String>, Failure> {
    let cells = simulation_cells(cfg)?;
    let selection_study = matches!(cells[0], CellSpec::SelectionStudy { .. });
    let mut sim = SimConfig::new(cells, cfg.reps.unwrap_or(1000), cfg.seed());
    sim.alpha = cfg.alpha();
    sim.standardize = cfg.standardize == Some(true);
    sim.threads = cfg.threads;
    sim.estimators = cfg.estimators.clone().unwrap_or_else(|| {
        if selection_study {
            vec![
                EstimatorKind::Mle,
                EstimatorKind::Ham,
                EstimatorKind::HamUmse,
                EstimatorKind::HamBmse,
                EstimatorKind::HamTrueMse,
            ]
        } else {
            vec![EstimatorKind::Mle, EstimatorKind::Ham, EstimatorKind::Ridge]
        }
    });
    let opts = selection_options(cfg)?;
    sim.selection.tolerance = opts.tolerance;
    sim.selection.max_iterations = opts.max_iterations;
    sim.selection.restarts = opts.restarts;
    sim.selection.flipped_pseudo_sign = cfg.flipped_pseudo_sign == Some(true);
    sim.validate().map_err(input_err)?;
    let dir = prepare_dir(cfg)?;
    let report = run_cells(&sim).map_err(input_err)?;
    write(&dir, "report.csv", &report.to_csv().map_err(csv_err)?)?;
    write(&dir, "report.txt", &report.to_table(false))?;
    let timing: String = std::iter::once("cell,runtime_secs\n".to_string())
        .chain(report.cells.iter().map(|c| format!("{},{:.3}\n", c.label, c.runtime_secs)))
        .collect();
    write(&dir, "timing.csv", &timing)?;
    if cfg.emit_plot_data == Some(true) {
        write(&dir, "plot-data.csv", &report.plot_data_csv().map_err(csv_err)?)?;
    }
    print!("{}", report.to_table(true));
    let warnings = report
        .cells
        .iter()
        .flat_map(|c| {
            c.estimators.iter().filter(|e| e.excluded > 0).map(move |e| {
                format!(
                    "{} / {}: {} replicates excluded (first error: {})",
                    c.label,
                    e.estimator.name(),
                    e.excluded,
                    e.first_error.as_deref().unwrap_or("?")
                )
            })
        })
        .collect();
    Ok(warnings)
}

fn cmd_check(cfg: &RunConfig) -> Result<Vec<String>, Failure> {
    let suites: Vec<Suite> = match &cfg.suites {
        Some(list) => list
            .iter()
            .map(|s| Suite::parse(s).ok_or_else(|| input_err(format!("unknown suite '{s}'"))))
            .collect::<Result<_, _>>()?,
        None => Suite::ALL.to_vec(),
    };
    let d = CheckOptions::default();
    let opts = CheckOptions {
        instances: cfg.instances,
        seed: cfg.seed(),
        pseudo_sign: if cfg.inject_pseudo_sign_flip == Some(true) {
            PseudoSign::Flipped
        } else {
            PseudoSign::Corrected
        },
        calibration_replicates: cfg.calibration_replicates.unwrap_or(d.calibration_replicates),
        consistency_replicates: cfg.consistency_replicates.unwrap_or(d.consistency_replicates),
        threads: cfg.threads,
    };
    let dir = prepare_dir(cfg)?;
    let results: Vec<_> = suites.iter().map(|&s| run_suite(s, &opts)).collect();
    let table = results_table(&results);
    print!("{table}");
    write(&dir, "check.txt", &table)?;
    write(&dir, "check.json", &serde_json::to_string_pretty(&results).expect("json"))?;
    if let Some(bad) = results.iter().find(|r| !r.passed) {
        let ce = serde_json::to_string_pretty(&json!({"suite": bad.suite, "summary": bad.summary, "counterexample": bad.counterexample}))
            .expect("json");
        write(&dir, "counterexample.json", &ce)?;
        return Err(Failure {
            code: EXIT_VERIFY,
            message: format!("suite {} failed: {}\n{ce}", bad.suite.name(), bad.summary),
        });
    }
    Ok(Vec::new())
}

fn cmd_compare(cfg: &RunConfig) -> Result<Vec<String>, Failure> {
    let dir = prepare_dir(cfg)?;
    let Loaded { problem, names } = load(cfg, &dir)?;
    if problem.k() < 2 {
        return Err(input_err("compare needs at least two studies"));
    }
    let work = if cfg.standardize == Some(true) {
        standardized(&problem, StandardizeMode::PerStudy)?.0
    } else {
        problem
    };
    let opts = selection_options(cfg)?;
    let report = compare(&work, &names, cfg.alpha(), &opts).map_err(core_err)?;
    write(&dir, "meta-intervals.csv", &report.meta_intervals_csv().map_err(csv_err)?)?;
    write(&dir, "study-intervals.csv", &report.study_intervals_csv().map_err(csv_err)?)?;
    write(&dir, "significance.csv", &report.significance_csv().map_err(csv_err)?)?;
    let mut text = report.to_table();
    if cfg.standardize == Some(true) {
        text.push_str("estimates are on the standardized scale\n");
    }
    write(&dir, "compare.txt", &text)?;
    if cfg.emit_plot_data == Some(true) {
        write(&dir, "plot-data.csv", &report.study_intervals_csv().map_err(csv_err)?)?;
    }
    print!("{text}");
    Ok(report.fit.meta.warning.iter().cloned().collect())
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Fit {
            common,
            selection,
            estimator,
            synthetic,
        } => {
            let mut flags = common.to_config();
            selection.apply(&mut flags);
            flags.estimator = estimator;
            flags.synthetic = flag(synthetic);
            effective(&common, flags).and_then(|c| cmd_fit(&c))
        }
        Command::Simulate {
            common,
            selection,
            setting,
            heterogeneity,
            k,
            p,
            n,
            scenario,
            spread,
            reps,
            cells,
            estimators,
        } => {
            let mut flags = common.to_config();
            selection.apply(&mut flags);
            flags.setting = setting;
            flags.heterogeneity = heterogeneity;
            flags.k = k;
            flags.p = p;
            flags.n = n;
            flags.scenario = scenario;
            flags.spread = spread;
            flags.reps = reps;
            flags.cells = cells;
            flags.estimators = estimators;
            effective(&common, flags).and_then(|c| cmd_simulate(&c))
        }
        Command::Check {
            common,
            suite,
            instances,
            calibration_replicates,
            consistency_replicates,
            inject_pseudo_sign_flip,
        } => {
            let mut flags = common.to_config();
            flags.suites = suite;
            flags.instances = instances;
            flags.calibration_replicates = calibration_replicates;
            flags.consistency_replicates = consistency_replicates;
            flags.inject_pseudo_sign_flip = flag(inject_pseudo_sign_flip);
            effective(&common, flags).and_then(|c| cmd_check(&c))
        }
        Command::Compare {
            common,
            selection,
            synthetic,
        } => {
            let mut flags = common.to_config();
            selection.apply(&mut flags);
            flags.synthetic = flag(synthetic);
            effective(&common, flags).and_then(|c| cmd_compare(&c))
        }
    };
    match outcome {
        Ok(warnings) => {
            for w in warnings {
                eprintln!("warning: {w}");
            }
            EXIT_OK
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

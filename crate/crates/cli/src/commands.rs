use std::fs;
use std::io::{self, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};
use twoway_sketch::gmm::{gmm_fit, GmmOptions, LinearIv};
use twoway_sketch::mestim::{m_fit, LeastSquares, Logistic, LossModel, MOptions};
use twoway_sketch::moments::{mean_inference, Fields, VarianceComponents};
use twoway_sketch::panel::{load_panel, TwoWayPanel};
use twoway_sketch::par::Execution;
use twoway_sketch::simulate::{run_experiments, table_report, DesignSpec};
use twoway_sketch::sizing::choose_c_star;
use twoway_sketch::sketch::{generate_mask, resolve_p_rule, SketchConfig, SketchMask};
use twoway_sketch::{Error, Result};

use crate::{ChoosePArgs, Cli, Command, GmmArgs, Loss, MeanArgs, MfitArgs, SimulateArgs, SketchArgs};

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Mean(args) => mean(cli, args),
        Command::Gmm(args) => gmm(cli, args),
        Command::Mfit(args) => mfit(cli, args),
        Command::ChooseP(args) => choose_p(cli, args),
        Command::Simulate(args) => simulate(cli, args),
    }
}

fn config(cli: &Cli, resolved: Value) -> Value {
    json!({
        "command": cli.command.name(),
        "args": &cli.command,
        "threads": cli.threads,
        "resolved": resolved,
    })
}

fn out_path(command: &Command) -> Option<&Path> {
    match command {
        Command::Mean(a) => a.out.as_deref(),
        Command::Gmm(a) => a.out.as_deref(),
        Command::Mfit(a) => a.out.as_deref(),
        Command::ChooseP(a) => a.out.as_deref(),
        Command::Simulate(a) => a.out.as_deref(),
    }
}

/// Writes to stdout, treating a closed pipe as success.
fn stdout(text: &str) -> Result<()> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn emit(path: Option<&Path>, report: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
    match path {
        Some(p) => fs::write(p, text)?,
        None => stdout(&text)?,
    }
    Ok(())
}

pub fn write_error_report(cli: &Cli, err: &Error) {
    let report = json!({
        "config": config(cli, Value::Null),
        "error": { "code": err.code(), "message": err.to_string() },
    });
    let path = match &cli.command {
        Command::Simulate(a) => a.out.as_ref().map(|d| d.join("report.json")),
        other => out_path(other).map(Path::to_path_buf),
    };
    if let Some(dir) = path.as_ref().and_then(|p| p.parent()).filter(|d| !d.as_os_str().is_empty()) {
        let _ = fs::create_dir_all(dir);
    }
    if let Err(e) = emit(path.as_deref(), &report) {
        eprintln!("could not write error report: {e}");
    }
}

fn vector(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn components(v: &VarianceComponents) -> Value {
    json!({
        "gamma_a": matrix(&v.gamma_a),
        "gamma_b": matrix(&v.gamma_b),
        "lambda_hat": v.lambda_hat,
        "gamma": matrix(&v.gamma),
    })
}

fn load(path: &Path, fields: &[&str]) -> Result<TwoWayPanel> {
    let mut unique: Vec<&str> = Vec::new();
    for f in fields {
        if !unique.contains(f) {
            unique.push(f);
        }
    }
    let panel = load_panel(path, &unique)?;
    log::info!("loaded {} cells, {} x {} clusters", panel.n_obs(), panel.n_rows(), panel.n_cols());
    Ok(panel)
}

/// Draws the mask for the requested rule; returns it with the resolved settings.
fn sketch(panel: &TwoWayPanel, args: &SketchArgs) -> Result<(SketchMask, Value)> {
    let rule = args.rule()?;
    let p = resolve_p_rule(rule, &panel.dims())?;
    let mask = generate_mask(panel, SketchConfig::new(p, args.seed)?)?;
    log::info!("rule {rule}: p = {p}, kept {} of {} cells", mask.l_hat(), panel.n_obs());
    let resolved = json!({ "rule": rule, "p": p, "seed": args.seed, "c_bar": panel.dims().c_bar });
    Ok((mask, resolved))
}

fn mean(cli: &Cli, args: &MeanArgs) -> Result<()> {
    let names: Vec<&str> = args.field.iter().map(String::as_str).collect();
    let panel = load(&args.data, &names)?;
    let (mask, resolved) = sketch(&panel, &args.sketch)?;
    let f = Fields(names.iter().map(|n| panel.field_index(n)).collect::<Result<_>>()?);
    let r = mean_inference(&panel, &mask, &f, args.alpha, args.variance)?;
    let report = json!({
        "config": config(cli, resolved),
        "fields": names,
        "estimate": vector(&r.estimate),
        "std_error": vector(&r.std_error),
        "ci_lower": vector(&r.ci_lower),
        "ci_upper": vector(&r.ci_upper),
        "alpha": r.alpha,
        "variance": components(&r.variance),
        "l_hat": r.l_hat,
        "p": r.p,
        "c_bar": r.c_bar,
        "n_obs": r.n_obs,
        "variance_mode": r.variance_mode,
        "degenerate_flag": r.degenerate_flag,
    });
    emit(args.out.as_deref(), &report)
}

fn gmm(cli: &Cli, args: &GmmArgs) -> Result<()> {
    let x: Vec<&str> = args.x.iter().map(String::as_str).collect();
    let z: Vec<&str> = args.z.iter().map(String::as_str).collect();
    let fields: Vec<&str> =
        std::iter::once(args.y.as_str()).chain(x.iter().copied()).chain(z.iter().copied()).collect();
    let panel = load(&args.data, &fields)?;
    let (mask, resolved) = sketch(&panel, &args.sketch)?;
    let model = LinearIv::from_names(&panel, &args.y, &x, &z)?;
    let options = GmmOptions {
        two_step: args.two_step,
        center_moments: args.center_moments,
        variance_mode: args.variance,
        ..Default::default()
    };
    let fit = gmm_fit(&panel, &mask, &model, &options)?;
    let report = json!({
        "config": config(cli, resolved),
        "parameters": x,
        "theta_hat": vector(&fit.theta_hat),
        "std_error": vector(&fit.std_error),
        "sandwich": matrix(&fit.sandwich),
        "g_bar": vector(&fit.g_bar),
        "g_tilde": matrix(&fit.g_tilde),
        "v_hat": matrix(&fit.v_hat),
        "omega": components(&fit.omega),
        "iterations": fit.iterations,
        "converged": fit.converged,
        "degenerate_flag": fit.degenerate_flag,
        "l_hat": fit.l_hat,
        "p": fit.p,
        "c_bar": fit.c_bar,
    });
    emit(args.out.as_deref(), &report)
}

fn mfit(cli: &Cli, args: &MfitArgs) -> Result<()> {
    let x: Vec<&str> = args.x.iter().map(String::as_str).collect();
    let fields: Vec<&str> = std::iter::once(args.y.as_str()).chain(x.iter().copied()).collect();
    let panel = load(&args.data, &fields)?;
    let (mask, resolved) = sketch(&panel, &args.sketch)?;
    let model: Box<dyn LossModel> = match args.loss {
        Loss::Ls => Box::new(LeastSquares::from_names(&panel, &args.y, &x)?),
        Loss::Logit => Box::new(Logistic::from_names(&panel, &args.y, &x)?),
    };
    let options = MOptions { variance_mode: args.variance, ..Default::default() };
    let fit = m_fit(&panel, &mask, model.as_ref(), &options)?;
    let report = json!({
        "config": config(cli, resolved),
        "parameters": x,
        "theta_hat": vector(&fit.theta_hat),
        "std_error": vector(&fit.std_error),
        "sandwich": matrix(&fit.sandwich),
        "objective": fit.objective,
        "h_tilde": matrix(&fit.h_tilde),
        "sigma": components(&fit.sigma),
        "iterations": fit.iterations,
        "converged": fit.converged,
        "degenerate_flag": fit.degenerate_flag,
        "l_hat": fit.l_hat,
        "p": fit.p,
        "c_bar": fit.c_bar,
    });
    emit(args.out.as_deref(), &report)
}

fn choose_p(cli: &Cli, args: &ChoosePArgs) -> Result<()> {
    let panel = load(&args.data, &[args.field.as_str()])?;
    let f = Fields(vec![panel.field_index(&args.field)?]);
    let result = choose_c_star(&panel, &f, args.c_pre, args.v_max, args.seed)?;
    let resolved = json!({
        "p_pre": (args.c_pre / panel.dims().c_bar as f64).min(1.0),
        "seed": args.seed,
        "c_bar": panel.dims().c_bar,
    });
    let report = json!({ "config": config(cli, resolved), "result": result });
    emit(args.out.as_deref(), &report)
}

fn simulate(cli: &Cli, args: &SimulateArgs) -> Result<()> {
    let execution = if args.serial { Execution::Serial } else { Execution::Parallel };
    let mut rows = Vec::new();
    for &n in &args.sizes {
        let design = DesignSpec::builtin(args.design, n, n)?;
        log::info!("design {} N = M = {n}: {} replications", args.design, args.reps);
        rows.extend(run_experiments(&design, &args.rules, args.reps, args.variance, args.seed, execution)?);
    }
    let table = table_report(&rows)?;
    let design = DesignSpec::builtin(args.design, 1, 1)?;
    let report = json!({
        "config": config(cli, json!({ "family": design.family, "seed": args.seed })),
        "rows": rows,
    });
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("table.txt"), &table.text)?;
            fs::write(dir.join("table.csv"), &table.csv)?;
            emit(Some(&dir.join("report.json")), &report)?;
        }
        None => log::info!("no --out directory given; printing the table only"),
    }
    stdout(&table.text)
}

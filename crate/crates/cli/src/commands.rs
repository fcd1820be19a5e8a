use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use pgeigen::autodiff::MlpModel;
use pgeigen::diagnostics::{filter_segments, gradient_projection, landscape_slice};
use pgeigen::linalg::DenseMatrix;
use pgeigen::quantum_data::{
    generate_dataset, read_dataset, subsample_train, write_dataset, DatasetBundle, SampleRecord,
};
use pgeigen::training::{
    bench_solver, evaluate, evaluate_predictions, multi_run, read_snapshots, train, write_snapshots,
    EvalReport, LossProbe, TrainError,
};

use crate::config::ExperimentConfig;
use crate::manifest::{sha256_hex, Outputs};
use crate::{Cli, CliError, Command, Split};

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Invalid(m) => CliError::Usage(m),
        other => CliError::Runtime(other.to_string()),
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData => "gen-data",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Sweep { .. } => "sweep",
        Command::Bench { .. } => "bench",
        Command::Diag { .. } => "diag",
    }
}

/// Reads an input file and records its digest.
fn read_input(path: &Path, what: &str, out: &mut Outputs) -> Result<Vec<u8>, CliError> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => CliError::Usage(format!("{what} {} not found", path.display())),
        _ => CliError::Runtime(format!("{what} {}: {e}", path.display())),
    })?;
    out.record_input(what, &bytes);
    Ok(bytes)
}

fn dataset(data: Option<&Path>, cfg: &ExperimentConfig, out: &mut Outputs) -> Result<DatasetBundle, CliError> {
    match data {
        Some(path) => {
            let bytes = read_input(path, "dataset", out)?;
            read_dataset(&mut bytes.as_slice())
                .map_err(|e| CliError::Usage(format!("dataset {}: {e}", path.display())))
        }
        None => generate_dataset(&cfg.dataset).map_err(runtime),
    }
}

/// The labeled subset a run trains on.
fn training_bundle(cfg: &ExperimentConfig, bundle: &DatasetBundle, seed: u64) -> Result<DatasetBundle, CliError> {
    let n = cfg.training.train_size;
    if n == 0 {
        return Ok(bundle.clone());
    }
    if n > bundle.train.len() {
        return Err(CliError::Usage(format!(
            "training.train_size {n} exceeds the {} training records",
            bundle.train.len()
        )));
    }
    subsample_train(bundle, n, seed).map_err(runtime)
}

fn checkpoint(path: &Path, what: &str, bundle: &DatasetBundle, out: &mut Outputs) -> Result<MlpModel, CliError> {
    let bytes = read_input(path, what, out)?;
    let model = MlpModel::read_checkpoint(&mut bytes.as_slice())
        .map_err(|e| CliError::Usage(format!("{what} {}: {e}", path.display())))?;
    let d = bundle.dim();
    if model.input_dim() != d * d || model.output_dim() != d + 1 {
        return Err(CliError::Usage(format!(
            "{what} maps {} -> {} but the dataset needs {} -> {}",
            model.input_dim(),
            model.output_dim(),
            d * d,
            d + 1
        )));
    }
    Ok(model)
}

fn add_eval(out: &mut Outputs, report: &EvalReport, samples: bool) -> Result<(), CliError> {
    out.add_with("eval_summary.csv", |w| report.write_summary_csv(w))?;
    out.add_with("eval_bins.csv", |w| report.write_bins_csv(w))?;
    if samples {
        out.add_with("eval_samples.csv", |w| report.write_samples_csv(w))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let name = command_name(&cli.command);
    if let Command::Diag { .. } = cli.command {
        if cli.config.is_some() || cli.seed.is_some() || cli.mode.is_some() {
            return Err(CliError::Usage(
                "diag reads its settings from the run directory; --config, --seed and --mode do not apply".into(),
            ));
        }
    }
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(mode) = cli.mode {
        cfg.mode = mode;
        cfg.sweep.modes = vec![mode];
    }
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::GenData => cfg.dataset.seed = seed,
            _ => cfg.seeds = vec![seed],
        }
    }
    if cli.jobs == Some(0) {
        return Err(CliError::Usage("--jobs must be positive".into()));
    }
    cfg.validate()?;

    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.out.take())
        .unwrap_or_else(|| match &cli.command {
            Command::Diag { run, .. } => run.join("diag"),
            _ => PathBuf::from(format!("pgeigen-{name}")),
        });
    cfg.out = None;
    let mut out = Outputs::new(dir);

    let effective = match cli.command {
        Command::GenData => {
            let bundle = generate_dataset(&cfg.dataset).map_err(runtime)?;
            out.add_with("dataset.bin", |w| write_dataset(&bundle, w))?;
            println!(
                "dataset: {} train, {} validation, {} test records",
                bundle.train.len(),
                bundle.validation.len(),
                bundle.test.len()
            );
            cfg
        }
        Command::Train { data } => {
            cmd_train(&cfg, data.as_deref(), &mut out)?;
            cfg
        }
        Command::Eval {
            checkpoint: ckpt,
            data,
            oracle,
            split,
        } => {
            let bundle = dataset(data.as_deref(), &cfg, &mut out)?;
            let records: &[SampleRecord] = match split {
                Split::Train => &bundle.train,
                Split::Validation => &bundle.validation,
                Split::Test => &bundle.test,
            };
            let report = if oracle {
                let d = bundle.dim();
                let mut flat = Vec::with_capacity(records.len() * (d + 1));
                for r in records {
                    flat.extend_from_slice(&r.y);
                    flat.push(r.b);
                }
                let preds = DenseMatrix::from_vec(records.len(), d + 1, flat).map_err(runtime)?;
                evaluate_predictions(records, &preds, cfg.eval.bin_width)
            } else {
                let path = ckpt.expect("clap requires --checkpoint without --oracle");
                let model = checkpoint(&path, "checkpoint", &bundle, &mut out)?;
                evaluate(&model, records, cfg.eval.bin_width)
            }
            .map_err(train_err)?;
            add_eval(&mut out, &report, true)?;
            println!("mse {} mean cosine {}", report.mse, report.mean_cosine);
            cfg
        }
        Command::Sweep { data } => {
            let bundle = dataset(data.as_deref(), &cfg, &mut out)?;
            let base = cfg.training_config(cfg.mode, cfg.seed());
            let report = multi_run(&base, &bundle, &cfg.sweep.modes, &cfg.seeds, &cfg.sweep.sizes, cli.jobs)
                .map_err(train_err)?;
            out.add_with("sweep.csv", |w| report.write_csv(w))?;
            out.add_with("sweep_runs.csv", |w| report.write_runs_csv(w))?;
            let failures: usize = report.rows.iter().map(|r| r.failures).sum();
            println!("{} runs, {failures} failed", report.runs.len());
            cfg
        }
        Command::Bench {
            checkpoint: ckpt,
            data,
            repetitions,
        } => {
            let bundle = dataset(data.as_deref(), &cfg, &mut out)?;
            let model = checkpoint(&ckpt, "checkpoint", &bundle, &mut out)?;
            let matrices: Vec<DenseMatrix> = bundle.test.iter().map(SampleRecord::matrix).collect();
            let reps = repetitions.unwrap_or(cfg.bench.repetitions);
            let report = bench_solver(&model, &matrices, reps, cfg.training.direction).map_err(train_err)?;
            out.add_with("bench.csv", |w| report.write_csv(w))?;
            for r in &report.rows {
                println!("{}: {:.3e} s/matrix, mean residual {:.3e}", r.method, r.seconds_per_matrix, r.mean_residual);
            }
            cfg
        }
        Command::Diag {
            run,
            data,
            theta_star,
            grid_size,
            range,
        } => {
            let run_cfg = cmd_diag(&run, data.as_deref(), theta_star.as_deref(), grid_size, range, cli.jobs, &mut out)?;
            run_cfg
        }
    };
    // Canonical JSON of the effective config; its digest goes in the manifest.
    let mut text = serde_json::to_string_pretty(&effective).map_err(runtime)?;
    text.push('\n');
    let hash = sha256_hex(text.as_bytes());
    out.add("config.json", text.into_bytes());
    out.commit(name, effective.mode.name(), &effective.seeds, &hash)
}

fn cmd_train(cfg: &ExperimentConfig, data: Option<&Path>, out: &mut Outputs) -> Result<(), CliError> {
    let seed = cfg.seed();
    let bundle = dataset(data, cfg, out)?;
    let sub = training_bundle(cfg, &bundle, seed)?;
    let tc = cfg.training_config(cfg.mode, seed);
    let outcome = train(&tc, &sub).map_err(train_err)?;
    let log = &outcome.log;
    out.add_with("checkpoint.bin", |w| outcome.model.write_checkpoint(w))?;
    out.add_with("best_checkpoint.bin", |w| outcome.best_model.write_checkpoint(w))?;
    out.add_with("runlog.csv", |w| log.write_csv(w))?;
    if !log.snapshots.is_empty() {
        out.add_with("snapshots.bin", |w| write_snapshots(outcome.model.dims(), &log.snapshots, w))?;
    }
    if !sub.test.is_empty() {
        let report = evaluate(&outcome.model, &sub.test, cfg.eval.bin_width).map_err(train_err)?;
        add_eval(out, &report, false)?;
        println!("test mse {} mean cosine {}", report.mse, report.mean_cosine);
    }
    if let Some(m) = log.final_metrics() {
        println!(
            "{} epochs in {:.1} s, final train mse {}, best epoch {}",
            log.records.len(),
            log.total_seconds,
            m.train_mse,
            log.best_epoch
        );
    }
    Ok(())
}

fn cmd_diag(
    run: &Path,
    data: Option<&Path>,
    theta_star: Option<&Path>,
    grid_size: Option<usize>,
    range: Option<f64>,
    jobs: Option<usize>,
    out: &mut Outputs,
) -> Result<ExperimentConfig, CliError> {
    let cfg_bytes = read_input(&run.join("config.json"), "run config", out)?;
    let mut cfg: ExperimentConfig = serde_json::from_slice(&cfg_bytes)
        .map_err(|e| CliError::Usage(format!("run config: {e}")))?;
    if let Some(g) = grid_size {
        cfg.diag.grid_size = g;
    }
    if let Some(r) = range {
        cfg.diag.range = r;
    }
    cfg.validate()?;

    let seed = cfg.seed();
    let bundle = dataset(data, &cfg, out)?;
    let sub = training_bundle(&cfg, &bundle, seed)?;
    let probe = LossProbe::new(&cfg.training_config(cfg.mode, seed), &sub).map_err(train_err)?;
    let dims = probe.dims().to_vec();

    let star_path = theta_star.map(Path::to_path_buf).unwrap_or_else(|| run.join("checkpoint.bin"));
    let star = checkpoint(&star_path, "theta star", &sub, out)?;
    if star.dims() != dims.as_slice() {
        return Err(CliError::Usage(format!(
            "theta star has layers {:?}, the run config gives {dims:?}",
            star.dims()
        )));
    }

    let snap_path = run.join("snapshots.bin");
    if !snap_path.exists() {
        return Err(CliError::Usage(format!(
            "{} has no snapshots.bin; train with training.snapshot_every > 0",
            run.display()
        )));
    }
    let snap_bytes = read_input(&snap_path, "snapshots", out)?;
    let (snap_dims, snapshots) = read_snapshots(&mut snap_bytes.as_slice())
        .map_err(|e| CliError::Usage(format!("snapshots: {e}")))?;
    if snap_dims != dims {
        return Err(CliError::Usage(format!(
            "snapshots have layers {snap_dims:?}, the run config gives {dims:?}"
        )));
    }

    let trace = gradient_projection(&snapshots, star.params(), &cfg.diag.terms, |p, term| {
        probe.term_gradient(p, term)
    })
    .map_err(runtime)?;
    out.add_with("projection.csv", |w| trace.write_csv(w))?;

    if cfg.diag.grid_size > 0 {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(j) = jobs {
            builder = builder.num_threads(j);
        }
        let pool = builder.build().map_err(runtime)?;
        let term = cfg.diag.landscape_loss;
        let grid = pool
            .install(|| {
                landscape_slice(
                    star.params(),
                    &filter_segments(&dims),
                    |p| probe.term_value(p, term),
                    cfg.diag.range,
                    cfg.diag.grid_size,
                    cfg.diag.seed,
                )
            })
            .map_err(runtime)?;
        out.add_with("landscape.csv", |w| grid.write_csv(w))?;
        let missing = grid.values.iter().filter(|v| v.is_none()).count();
        println!("landscape: {} points, {missing} missing", grid.values.len());
    }
    println!("projection: {} rows", trace.rows.len());
    Ok(cfg)
}

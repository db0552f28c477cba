//! One binary for the whole workflow: generate or fit models, certify their
//! contraction, tune observers, check a controller design, run the closed
//! loop from a TOML experiment, and render the resulting trace.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gru_mpc::config::load_experiment;
use gru_mpc::estimation::{
    estimate_lambda, generate_excitation, normalize_dataset, train_gru, Episode, ExcitationKind,
    TrainConfig, TrajectoryPairConfig,
};
use gru_mpc::gru::{deltaiss_certificate, gru_output, gru_step, GruParams, InvariantBox};
use gru_mpc::mpc::check_weights;
use gru_mpc::observer::tune_observer;
use gru_mpc::sim::{add_measurement_noise, run_closed_loop, ClosedLoopTrace};
use gru_mpc::{Error, Result};

mod svg;

#[derive(Parser)]
#[command(
    name = "gru-mpc",
    version,
    about = "Contraction-certified GRU modelling, observers, and box-constrained MPC"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the contraction certificate of a weight file; exits nonzero
    /// when the model is not certified.
    Certify {
        #[arg(long)]
        model: PathBuf,
        /// State box radius the certificate is evaluated on.
        #[arg(long, default_value_t = 1.0)]
        x_check: f64,
    },
    /// Fit innovation gains minimizing the certified observer rate.
    TuneObserver {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        x_check: f64,
        /// Write the gains and rate as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample trajectory pairs and report the empirical contraction rate.
    EstimateLambda {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        x_check: f64,
        #[arg(long, default_value_t = 10_000)]
        pairs: usize,
        #[arg(long, default_value_t = 300)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Resolve an experiment file and print every controller design check.
    DesignMpc {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate a random certified model, shrinking until the rate clears
    /// the requested ceiling.
    Synth {
        #[arg(long)]
        n_x: usize,
        #[arg(long, default_value_t = 1)]
        n_u: usize,
        #[arg(long, default_value_t = 1)]
        n_y: usize,
        #[arg(long, default_value_t = 0.5)]
        scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        max_rate: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drive a model open loop with excitation signals and write one episode
    /// CSV per run: outputs are measured before each input acts, the same
    /// timing the training loss and the closed loop use.
    Excite {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "random-steps")]
        kind: String,
        #[arg(long, default_value_t = 400)]
        length: usize,
        #[arg(long, default_value_t = 8)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        noise_sigma: f64,
    },
    /// Settle the model under a constant input and print the steady output,
    /// one line, space separated.
    SteadyState {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, num_args = 1.., required = true, allow_negative_numbers = true)]
        hold: Vec<f64>,
        #[arg(long, default_value_t = 5_000)]
        steps: usize,
    },
    /// Fit a model to episode CSVs by gradient descent on the simulation
    /// error; writes weights and the normalization manifest.
    Train {
        /// Directory of episode CSVs (every *.csv inside, sorted by name).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        n_x: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        normalization: PathBuf,
        /// Optional JSON training report (loss, rate, certification).
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 400)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        learning_rate: f64,
        #[arg(long, default_value_t = 50)]
        truncation: usize,
        #[arg(long, default_value_t = 20)]
        washout: usize,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 5.0)]
        clip_norm: f64,
        #[arg(long, default_value_t = 0.3)]
        init_scale: f64,
        #[arg(long, default_value_t = 0.0)]
        penalty_weight: f64,
        #[arg(long, default_value_t = 0.95)]
        lambda_target: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the closed loop described by an experiment file; writes the trace
    /// CSV and a manifest JSON of every resolved parameter.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        /// Defaults to the trace path with extension manifest.json.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Render a trace CSV as a standalone SVG.
    Plot {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Certify { model, x_check } => certify(&model, x_check),
        Command::TuneObserver {
            model,
            x_check,
            out,
        } => tune_observer_cmd(&model, x_check, out.as_deref()),
        Command::EstimateLambda {
            model,
            x_check,
            pairs,
            horizon,
            seed,
        } => estimate_lambda_cmd(&model, x_check, pairs, horizon, seed),
        Command::DesignMpc { config } => design_mpc(&config),
        Command::Synth {
            n_x,
            n_u,
            n_y,
            scale,
            seed,
            max_rate,
            out,
        } => synth(n_x, n_u, n_y, scale, seed, max_rate, &out),
        Command::Excite {
            model,
            out_dir,
            kind,
            length,
            episodes,
            seed,
            noise_sigma,
        } => excite(&model, &out_dir, &kind, length, episodes, seed, noise_sigma),
        Command::SteadyState { model, hold, steps } => steady_state(&model, &hold, steps),
        Command::Train {
            data,
            n_x,
            out,
            normalization,
            report,
            epochs,
            learning_rate,
            truncation,
            washout,
            momentum,
            clip_norm,
            init_scale,
            penalty_weight,
            lambda_target,
            seed,
        } => {
            let cfg = TrainConfig {
                learning_rate,
                epochs,
                truncation,
                washout,
                penalty_weight,
                lambda_target,
                momentum,
                clip_norm,
                init_scale,
            };
            train(&data, n_x, &out, &normalization, report.as_deref(), &cfg, seed)
        }
        Command::Simulate {
            config,
            trace,
            manifest,
        } => simulate(&config, &trace, manifest.as_deref()),
        Command::Plot { trace, out } => plot(&trace, &out),
    }
}

fn certify(model: &Path, x_check: f64) -> Result<ExitCode> {
    let p = GruParams::load_json(model)?;
    let bx = InvariantBox::new(x_check)?;
    let cert = deltaiss_certificate(&p, &bx);
    println!(
        "model: {} (n_x = {}, n_u = {}, n_y = {})",
        model.display(),
        p.n_x(),
        p.n_u(),
        p.n_y()
    );
    println!("state box radius: {}", bx.radius());
    println!(
        "gate bounds: sigma_z = {:.6}, sigma_f = {:.6}, phi_r = {:.6}",
        cert.gate_bounds.sigma_z, cert.gate_bounds.sigma_f, cert.gate_bounds.phi_r
    );
    println!(
        "contraction factor endpoints: {:.6} (upper gate), {:.6} (lower gate)",
        cert.kappa_upper, cert.kappa_lower
    );
    println!("mu = {:.6}, lambda = {:.6}", cert.mu, cert.lambda);
    println!("certified: {}", cert.certified);
    Ok(if cert.certified {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn tune_observer_cmd(model: &Path, x_check: f64, out: Option<&Path>) -> Result<ExitCode> {
    let p = GruParams::load_json(model)?;
    let bx = InvariantBox::new(x_check)?;
    let cert = deltaiss_certificate(&p, &bx);
    let design = tune_observer(&p, &bx)?;
    println!(
        "observer rate: lambda_o = {:.6} (endpoints {:.6}, {:.6})",
        design.lambda, design.kappa_upper, design.kappa_lower
    );
    println!(
        "open-loop rate: lambda = {:.6} (observer improves by {:.6})",
        cert.lambda,
        cert.lambda - design.lambda
    );
    if let Some(path) = out {
        std::fs::write(path, design.to_json())?;
        println!("gains written to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn estimate_lambda_cmd(
    model: &Path,
    x_check: f64,
    pairs: usize,
    horizon: usize,
    seed: u64,
) -> Result<ExitCode> {
    let p = GruParams::load_json(model)?;
    let bx = InvariantBox::new(x_check)?;
    let cert = deltaiss_certificate(&p, &bx);
    let hat = estimate_lambda(
        &p,
        &TrajectoryPairConfig {
            n_pairs: pairs,
            horizon,
            mu: cert.mu,
            seed,
            state_box: bx,
        },
    )?;
    println!(
        "empirical rate: {hat:.6} over {pairs} pairs, {horizon} steps (seed {seed})"
    );
    println!(
        "certified rate: {:.6} (certified: {})",
        cert.lambda, cert.certified
    );
    Ok(ExitCode::SUCCESS)
}

fn design_mpc(config: &Path) -> Result<ExitCode> {
    let exp = load_experiment(config)?;
    let m = &exp.manifest;
    let wc = check_weights(&exp.fhocp.q, &exp.fhocp.s)?;
    println!(
        "model: {} (n_x = {}, n_u = {}, n_y = {}), box radius {}",
        m.weights_path, m.n_x, m.n_u, m.n_y, m.x_check
    );
    println!(
        "rate: lambda = {:.6} ({:?}), mu = {:.6}, certified rate = {:.6}",
        m.lambda, m.lambda_source, m.mu, m.certificate.lambda
    );
    println!(
        "weight condition: largest stage eigenvalue {:.6} < smallest terminal eigenvalue {:.6} (margin {:.6}): {}",
        wc.q_max, wc.s_min, wc.margin, wc.ok
    );
    println!(
        "simulation horizon: bound {:.6}, minimum M = {}, configured N = {}, M = {}",
        m.m_bound, m.m_min, m.n, m.m
    );
    let t = &exp.fhocp.target;
    println!(
        "target equilibrium: y = {:?}, u = {:?} (residuals {:.2e} / {:.2e})",
        t.y.as_slice(),
        t.u.as_slice(),
        t.state_residual,
        t.output_residual
    );
    println!(
        "input box: {:?} .. {:?}",
        exp.fhocp.input_box.lo().as_slice(),
        exp.fhocp.input_box.hi().as_slice()
    );
    println!("observer rate: lambda_o = {:.6}", m.observer_lambda);
    Ok(ExitCode::SUCCESS)
}

fn synth(
    n_x: usize,
    n_u: usize,
    n_y: usize,
    scale: f64,
    seed: u64,
    max_rate: f64,
    out: &Path,
) -> Result<ExitCode> {
    let bx = InvariantBox::unit();
    let mut p = GruParams::random_scaled(n_x, n_u, n_y, scale, seed);
    // Shrinking every weight tightens all the certificate norms, so this
    // terminates for any starting draw.
    loop {
        let cert = deltaiss_certificate(&p, &bx);
        if cert.certified && cert.lambda <= max_rate {
            println!("lambda = {:.6} after shrinking to fit", cert.lambda);
            break;
        }
        p.scale_mut(0.8);
    }
    p.save_json(out)?;
    println!("model written to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn excite(
    model: &Path,
    out_dir: &Path,
    kind: &str,
    length: usize,
    episodes: usize,
    seed: u64,
    noise_sigma: f64,
) -> Result<ExitCode> {
    let p = GruParams::load_json(model)?;
    let kind: ExcitationKind = kind.parse()?;
    std::fs::create_dir_all(out_dir)?;
    for e in 0..episodes {
        let inputs = generate_excitation(kind, length, p.n_u(), seed + e as u64)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0123_4567_89AB ^ e as u64);
        let mut x = DVector::zeros(p.n_x());
        let mut outputs = Vec::with_capacity(length);
        for u in &inputs {
            let y = gru_output(&p, &x)?;
            outputs.push(add_measurement_noise(&y, noise_sigma, &mut rng));
            x = gru_step(&p, &x, u)?;
        }
        let path = out_dir.join(format!("episode_{e:02}.csv"));
        Episode::new(inputs, outputs)?.write_csv(&path)?;
    }
    println!(
        "wrote {episodes} episodes of length {length} to {}",
        out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn steady_state(model: &Path, hold: &[f64], steps: usize) -> Result<ExitCode> {
    let p = GruParams::load_json(model)?;
    let u = DVector::from_row_slice(hold);
    let mut x = DVector::zeros(p.n_x());
    for _ in 0..steps {
        x = gru_step(&p, &x, &u)?;
    }
    let y = gru_output(&p, &x)?;
    let line: Vec<String> = y.iter().map(|v| format!("{v:.12e}")).collect();
    println!("{}", line.join(" "));
    Ok(ExitCode::SUCCESS)
}

fn train(
    data: &Path,
    n_x: usize,
    out: &Path,
    normalization: &Path,
    report: Option<&Path>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ExitCode> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(data)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|path| path.extension().is_some_and(|ext| ext == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!(
            "no .csv episodes found in {}",
            data.display()
        )));
    }
    let raw: Vec<Episode> = files
        .iter()
        .map(|f| Episode::read_csv(f))
        .collect::<Result<_>>()?;
    let dataset = normalize_dataset(&raw)?;
    for w in &dataset.warnings {
        eprintln!("warning: {w}");
    }

    let samples: usize = dataset.episodes.iter().map(|e| e.len()).sum();
    println!(
        "training on {} episodes, {samples} samples, state dimension {n_x}",
        dataset.episodes.len()
    );
    let (model, rep) = train_gru(&dataset, n_x, cfg, seed)?;
    model.save_json(out)?;
    std::fs::write(normalization, dataset.normalization.to_json())?;

    let variance = output_variance(&dataset.episodes);
    let ratio = rep.final_mse / variance.max(f64::MIN_POSITIVE);
    println!(
        "final mse {:.6e} on output variance {variance:.6e} (ratio {ratio:.3e})",
        rep.final_mse
    );
    println!(
        "rate after training: lambda = {:.6} (certified: {}), epochs run {}, diverged {}",
        rep.final_lambda, rep.certified, rep.epochs_run, rep.diverged
    );
    println!(
        "weights written to {}, normalization to {}",
        out.display(),
        normalization.display()
    );
    if let Some(path) = report {
        let doc = serde_json::json!({
            "final_mse": rep.final_mse,
            "output_variance": variance,
            "mse_ratio": ratio,
            "final_lambda": rep.final_lambda,
            "certified": rep.certified,
            "epochs_run": rep.epochs_run,
            "diverged": rep.diverged,
        });
        std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn output_variance(episodes: &[Episode]) -> f64 {
    let mut count = 0usize;
    let mut mean = 0.0;
    for ep in episodes {
        for y in &ep.outputs {
            for v in y.iter() {
                mean += v;
                count += 1;
            }
        }
    }
    mean /= count as f64;
    let mut var = 0.0;
    for ep in episodes {
        for y in &ep.outputs {
            for v in y.iter() {
                var += (v - mean).powi(2);
            }
        }
    }
    var / count as f64
}

fn simulate(config: &Path, trace_path: &Path, manifest: Option<&Path>) -> Result<ExitCode> {
    let exp = load_experiment(config)?;
    let trace = run_closed_loop(
        exp.plant.as_ref(),
        &exp.model,
        &exp.observer,
        &exp.fhocp,
        &exp.state_box,
        &exp.schedule,
        &exp.run,
    )?;
    trace.write_csv(trace_path)?;
    let manifest_path = manifest
        .map(Path::to_path_buf)
        .unwrap_or_else(|| trace_path.with_extension("manifest.json"));
    std::fs::write(&manifest_path, exp.manifest.to_json())?;

    let rows = &trace.rows;
    let mean_solve: f64 =
        rows.iter().map(|r| r.solve_seconds).sum::<f64>() / rows.len() as f64;
    let max_solve = rows.iter().map(|r| r.solve_seconds).fold(0.0, f64::max);
    let capped = rows.iter().filter(|r| r.solve_capped).count();
    println!(
        "{} steps; solve time mean {mean_solve:.4}s, max {max_solve:.4}s, iteration-capped {capped}",
        rows.len()
    );

    // Tracking error at the last step of each constant-reference segment.
    let mut boundaries = vec![0usize];
    boundaries.extend(exp.schedule.change_steps());
    boundaries.push(rows.len());
    let span = reference_span(&exp.manifest.reference);
    for w in boundaries.windows(2) {
        let last = &rows[w[1] - 1];
        let err = (&last.y - &last.y_ref).amax();
        let pct = if span > 0.0 {
            format!("{:.4}% of reference span", 100.0 * err / span)
        } else {
            "no span".to_string()
        };
        println!(
            "segment [{}, {}): settled tracking error {err:.4e} ({pct})",
            w[0], w[1]
        );
    }
    println!(
        "trace written to {}, manifest to {}",
        trace_path.display(),
        manifest_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn reference_span(reference: &[(usize, Vec<f64>)]) -> f64 {
    let mut span = 0.0f64;
    if reference.is_empty() {
        return span;
    }
    let n_y = reference[0].1.len();
    for ch in 0..n_y {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (_, v) in reference {
            lo = lo.min(v[ch]);
            hi = hi.max(v[ch]);
        }
        span = span.max(hi - lo);
    }
    span
}

fn plot(trace: &Path, out: &Path) -> Result<ExitCode> {
    let trace = ClosedLoopTrace::read_csv(trace)?;
    std::fs::write(out, svg::render(&trace))?;
    println!("plot written to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

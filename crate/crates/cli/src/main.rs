use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvkit::error::Error;
use mvkit::harness::{self, ExperimentConfig, Method, OUTDIR_ENV};
use mvkit::presets;

#[derive(Parser)]
#[command(name = "mvkit", version, about = "McKean-Vlasov SDE experiments: particles, Picard, Fokker-Planck, Malliavin")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every method listed in a config file.
    Run(RunArgs),
    /// Run only the Fokker-Planck solver of a config file.
    Fp(RunArgs),
    /// Run only the Malliavin diagnostics of a config file.
    Malliavin(RunArgs),
    /// List the built-in presets.
    Presets {
        #[arg(long)]
        json: bool,
    },
    /// Estimate the ellipticity constant of a preset by sampling.
    CheckEllipticity {
        preset: String,
        /// Parameter override, repeatable: --param sigma=0.5
        #[arg(long = "param", value_parser = parse_param)]
        params: Vec<(String, f64)>,
        #[arg(long, default_value_t = 16384)]
        samples: usize,
        #[arg(long, default_value_t = 2000)]
        particles: usize,
        #[arg(long, default_value_t = 100)]
        time_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; falls back to the config, then $MVKIT_OUTDIR, then ./mvkit-out.
    #[arg(long, env = OUTDIR_ENV)]
    outdir: Option<PathBuf>,
    /// Solve the Fokker-Planck equation in its printed form.
    #[arg(long)]
    as_printed: bool,
}

fn parse_param(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or("expected key=value")?;
    let v: f64 = v.parse().map_err(|e| format!("{v}: {e}"))?;
    Ok((k.to_string(), v))
}

fn run(args: RunArgs, only: Option<Method>) -> Result<bool, Error> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.as_printed {
        config.as_printed = true;
    }
    if let Some(m) = only {
        if !config.methods.contains(&m) {
            return Err(Error::config("methods", format!("config does not request `{}`", m.as_str())));
        }
        config.methods = vec![m];
    }
    let out = harness::resolve_output_dir(args.outdir.as_deref(), &config);
    let report = harness::run_experiment(&config, &out)?;
    let report_path = out.join(&report.preset).join("report.json");
    println!("{}", report_path.display());
    let mut ok = true;
    for m in &report.methods {
        match &m.error {
            None => println!("{:<10} ok", m.method.as_str()),
            Some(e) => {
                ok = false;
                println!("{:<10} FAILED: {e}", m.method.as_str());
            }
        }
    }
    for s in &report.snapshots {
        let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.3e}"));
        println!(
            "t={:<8} L1(particles,fp)={} L1(picard,fp)={} W2(particles,picard)={}",
            s.t,
            fmt(s.l1_particles_fp),
            fmt(s.l1_picard_fp),
            fmt(s.w2_particles_picard)
        );
    }
    if let Some(m) = &report.malliavin {
        println!(
            "malliavin: lambda={} ({}) min lambda_min={:.4e} min margin={:.4e} violations={}{}",
            m.lambda,
            m.lambda_source,
            m.min_lambda_min,
            m.min_margin,
            m.violations,
            if m.degenerate { " [degenerate: lambda ~ 0]" } else { "" }
        );
    }
    Ok(ok)
}

fn print_presets(json: bool) {
    let list = harness::list_presets();
    if json {
        println!("{}", serde_json::to_string_pretty(&list).expect("preset table serializes"));
        return;
    }
    for p in list {
        let params: Vec<String> = p.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("{:<14} {}", p.name, p.description);
        println!("{:<14} reference: {}", "", p.reference);
        println!("{:<14} params: {}", "", params.join(" "));
    }
}

fn check(preset: &str, params: Vec<(String, f64)>, samples: usize, particles: usize, steps: usize, seed: u64) -> Result<(), Error> {
    let overrides: BTreeMap<String, f64> = params.into_iter().collect();
    let p = presets::preset(preset, &overrides)?;
    let rep = harness::preset_ellipticity(&p, particles, steps, samples, seed)?;
    println!("preset          {}", p.name);
    println!("samples         {}", rep.n_samples);
    println!("lambda_min      {:.6e}", rep.lambda_min_estimate);
    if let Some(known) = p.known_lambda {
        println!("closed form     {known}");
    }
    println!(
        "argmin          t={:.4} x={:?} s={:?}",
        rep.argmin_point.t, rep.argmin_point.x, rep.argmin_point.s
    );
    if rep.lambda_min_estimate <= mvkit::malliavin::DEGENERATE_LAMBDA {
        println!("warning: the diffusion is degenerate somewhere in the sampled region");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Run(a) => run(a, None),
        Command::Fp(a) => run(a, Some(Method::Fp)),
        Command::Malliavin(a) => run(a, Some(Method::Malliavin)),
        Command::Presets { json } => {
            print_presets(json);
            Ok(true)
        }
        Command::CheckEllipticity {
            preset,
            params,
            samples,
            particles,
            time_steps,
            seed,
        } => check(&preset, params, samples, particles, time_steps, seed).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Config { .. }) { 2 } else { 1 })
        }
    }
}

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kpplab::error::LabError;
use kpplab::front_lab::{fit_shift, FitModel, FrontTrace, Term};
use kpplab::scenario::{
    build_solver, emit_report, run_scenario, trace_front, ResultRecord, ScenarioConfig, ScenarioId,
};
use kpplab::traveling_wave::{solve_profile, ProfileGrid};
use rayon::prelude::*;

const EXIT_ACCEPTANCE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_CONFIG: u8 = 4;

#[derive(Parser)]
#[command(
    name = "kpplab",
    version,
    about = "Fisher-KPP front propagation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for the traveling wave profile at a speed.
    Wave {
        #[arg(long, default_value = "fisher")]
        f: String,
        /// Wave speed; defaults to the minimal speed.
        #[arg(long)]
        speed: Option<f64>,
        /// Write the profile as text here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linear prefactor asymptotics.
    Linear(ConfigArgs),
    /// Integrate to the horizon and write the final field as CSV.
    Simulate(OutputArgs),
    /// Track the level set and write the trace as CSV.
    Track(OutputArgs),
    /// Fit the shift law to a trace.
    Fit {
        /// Trace CSV written by `track`; when absent the configured run is traced.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// `log` (speed and ln t fixed form), `free`, or `critical` (ln ln t).
        #[arg(long, default_value = "log")]
        model: String,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Tune and certify a barrier.
    Barrier(ConfigArgs),
    /// Run one scenario and print its checks.
    Scenario(ConfigArgs),
    /// Run several scenario files in parallel and write a combined report.
    Report {
        /// Scenario config files.
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        outdir: PathBuf,
    },
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Key-value scenario file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    /// `fisher` or `cubic:<a>`.
    #[arg(long)]
    f: Option<String>,
    /// `power`, `localized` or `wave`.
    #[arg(long)]
    data: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    k: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    nu: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    a1: Option<f64>,
    #[arg(long)]
    a2: Option<f64>,
    /// Junction of the initial envelope.
    #[arg(long = "A")]
    junction: Option<f64>,
    #[arg(long)]
    dx: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long, alias = "t_end")]
    t_end: Option<f64>,
    #[arg(long)]
    m: Option<f64>,
    /// Barrier slack exponent.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, alias = "window_lo")]
    window_lo: Option<f64>,
    #[arg(long, alias = "window_hi")]
    window_hi: Option<f64>,
    /// `leading-edge` or `lab`.
    #[arg(long)]
    frame: Option<String>,
    /// Barrier kind, e.g. `h1-upper`.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    outdir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct OutputArgs {
    /// Destination file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

impl ConfigArgs {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        let mut put = |k: &'static str, x: Option<String>| {
            if let Some(x) = x {
                v.push((k, x));
            }
        };
        let num = |x: Option<f64>| x.map(|x| x.to_string());
        put("scenario", self.scenario.clone());
        put("f", self.f.clone());
        put("data", self.data.clone());
        put("k", num(self.k));
        put("nu", num(self.nu));
        put("lambda", num(self.lambda));
        put("a1", num(self.a1));
        put("a2", num(self.a2));
        put("A", num(self.junction));
        put("dx", num(self.dx));
        put("dt", num(self.dt));
        put("t_end", num(self.t_end));
        put("m", num(self.m));
        put("epsilon", num(self.epsilon));
        put("window_lo", num(self.window_lo));
        put("window_hi", num(self.window_hi));
        put("frame", self.frame.clone());
        put("kind", self.kind.clone());
        put(
            "outdir",
            self.outdir.as_ref().map(|p| p.display().to_string()),
        );
        put("seed", self.seed.map(|s| s.to_string()));
        v
    }

    /// Config file (if any) overlaid with flags; `default` names the scenario when neither sets one.
    fn resolve(&self, default: ScenarioId) -> Result<ScenarioConfig, LabError> {
        let mut cfg = match &self.config {
            Some(path) => ScenarioConfig::parse(&fs::read_to_string(path)?)?,
            None => ScenarioConfig::new(default),
        };
        for (k, v) in self.pairs() {
            cfg.set(k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

enum Failure {
    Acceptance,
    Numerical(String),
    Config(String),
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        match e {
            LabError::Config(_) | LabError::Io(_) => Failure::Config(e.to_string()),
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

fn sink(out: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn print_record(r: &ResultRecord) {
    println!("{} [{}]", r.label, if r.passed() { "PASS" } else { "FAIL" });
    for c in &r.checks {
        println!(
            "  {:<44} measured {:+.6} predicted {:+.6} tolerance {:.3e} {}",
            c.name,
            c.measured,
            c.predicted,
            c.tolerance,
            if c.pass { "pass" } else { "FAIL" }
        );
    }
    if let Some(e) = &r.failure {
        println!("  failure: {e}");
    }
    for a in &r.artifacts {
        println!("  wrote {}", a.display());
    }
}

fn verdict(records: &[ResultRecord]) -> Result<(), Failure> {
    if let Some(e) = records.iter().find_map(|r| r.failure.clone()) {
        return Err(Failure::Numerical(e));
    }
    if records.iter().all(|r| r.passed()) {
        Ok(())
    } else {
        Err(Failure::Acceptance)
    }
}

fn run_record(cfg: &ScenarioConfig) -> Result<(), Failure> {
    let r = run_scenario(cfg)?;
    print_record(&r);
    if let Some(dir) = &cfg.outdir {
        emit_report(std::slice::from_ref(&r), dir)?;
    }
    verdict(std::slice::from_ref(&r))
}

fn model_named(name: &str, cfg: &ScenarioConfig) -> Result<FitModel, Failure> {
    let pair = cfg.pair()?;
    Ok(match name {
        "log" => FitModel::log_shift(pair.c_star),
        "free" => FitModel {
            speed: Term::Free,
            ln_t: Term::Free,
            ln_ln_t: Term::Off,
        },
        "critical" => FitModel {
            speed: Term::Fixed(pair.c_star),
            ln_t: Term::Fixed(-1.5 / pair.lambda_star),
            ln_ln_t: Term::Free,
        },
        other => return Err(Failure::Config(format!("unknown fit model '{other}'"))),
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Wave { f, speed, out } => {
            let f: kpplab::scenario::NonlinearitySpec = f.parse()?;
            let f = f.build()?;
            let c = speed.unwrap_or(2.0 * f.fprime0().sqrt());
            let profile = solve_profile(&f, c, ProfileGrid::default())?;
            eprintln!(
                "c = {c}, U^-1(1/2) = {:.8}, max ODE residual = {:.3e}",
                profile.inverse(0.5)?,
                profile.ode_residual_max()
            );
            profile.write_text(sink(&out)?)?;
            Ok(())
        }
        Command::Linear(args) => run_record(&args.resolve(ScenarioId::LinearAsymptotics)?),
        Command::Barrier(args) => run_record(&args.resolve(ScenarioId::BarrierCertificates)?),
        Command::Scenario(args) => {
            if args.config.is_none() && args.scenario.is_none() {
                return Err(Failure::Config(
                    "scenario needs --config or --scenario".into(),
                ));
            }
            run_record(&args.resolve(ScenarioId::PowerAboveCritical)?)
        }
        Command::Simulate(o) => {
            let cfg = o.config.resolve(ScenarioId::PowerAboveCritical)?;
            let mut solver = build_solver(&cfg)?;
            solver.run_until(cfg.t_end, |_| Ok(()))?;
            solver.snapshot().write_csv(sink(&o.out)?)?;
            Ok(())
        }
        Command::Track(o) => {
            let cfg = o.config.resolve(ScenarioId::PowerAboveCritical)?;
            let trace = trace_front(&cfg)?;
            trace.write_csv(cfg.pair()?.c, None, sink(&o.out)?)?;
            Ok(())
        }
        Command::Fit {
            trace,
            model,
            config,
        } => {
            let cfg = config.resolve(ScenarioId::PowerAboveCritical)?;
            let trace = match trace {
                Some(p) => FrontTrace::read_csv(&fs::read_to_string(p)?)?,
                None => trace_front(&cfg)?,
            };
            let window = cfg.window.unwrap_or_else(|| {
                let t_end = trace.samples.last().map_or(cfg.t_end, |s| s.0);
                (t_end / 10.0, t_end)
            });
            let fit = fit_shift(&trace, model_named(&model, &cfg)?, window)?;
            println!("{}", fit.to_string().trim_end());
            Ok(())
        }
        Command::Report { configs, outdir } => {
            let cfgs = configs
                .iter()
                .map(|p| {
                    let mut c = ScenarioConfig::parse(&fs::read_to_string(p)?)?;
                    if c.outdir.is_none() {
                        c.outdir = Some(outdir.join(stem(p)));
                    }
                    c.validate()?;
                    Ok(c)
                })
                .collect::<Result<Vec<_>, LabError>>()?;
            let records = cfgs
                .par_iter()
                .map(run_scenario)
                .collect::<Result<Vec<_>, LabError>>()?;
            records.iter().for_each(print_record);
            let summary = emit_report(&records, &outdir)?;
            println!("wrote {}", summary.display());
            verdict(&records)
        }
    }
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map_or_else(|| "scenario".into(), |s| s.to_string_lossy().into_owned())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Acceptance) => ExitCode::from(EXIT_ACCEPTANCE),
        Err(Failure::Numerical(e)) => {
            eprintln!("numerical failure: {e}");
            ExitCode::from(EXIT_NUMERICAL)
        }
        Err(Failure::Config(e)) => {
            eprintln!("{e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

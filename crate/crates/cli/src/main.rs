//! `misslayer` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 training
//! divergence, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use misslayer::activations::{rbf_expected, relu_expected};
use misslayer::data::{apply_mask, normalize, NormScheme};
use misslayer::density::conditional;
use misslayer::experiments::{emit_report, run_experiment, DatasetSpec, ExperimentConfig};
use misslayer::verification::{
    bench_layer_cost, distinguish_measures, mc_expected_activation, random_gmm, random_instance, random_rbf,
    random_relu, BenchConfig, BenchResult, OracleConfig, Unit, Verdict,
};
use misslayer::{Error, Imputer, ImputerKind, MaskPolicy, VERSION};

#[derive(Parser)]
#[command(name = "misslayer", version, about = "Neural networks on incomplete data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its metrics report.
    Run(Common),
    /// Complete a dataset with an imputation baseline and write it as CSV or JSON.
    Impute(Common),
    /// Check analytic activations against Monte Carlo and probe measure distinguishability.
    Verify(Common),
    /// Time the generalized first layer against a classical one.
    Bench(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::TrainingDiverged { .. } => 3,
        Error::Internal(_) => 1,
        _ => 2,
    }
}

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T, Error> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))
        }
    }
}

/// Envelope shared by the `verify` and `bench` reports.
#[derive(Serialize)]
struct ToolReport<C: Serialize, R: Serialize> {
    experiment: &'static str,
    version: &'static str,
    seed: u64,
    wall_clock_secs: f64,
    config: C,
    results: R,
}

fn write_json(value: &impl Serialize, out: Option<&Path>) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_run(args: &Common) -> Result<(), Error> {
    let path = args
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("run needs --config".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.output = Some(o.clone());
    }
    let report = run_experiment(&cfg)?;
    match &cfg.output {
        Some(p) => emit_report(&report, p),
        None => {
            print!("{}", report.to_json()?);
            eprint!("{}", report.table());
            Ok(())
        }
    }
}

#[derive(Deserialize)]
struct ImputeConfig {
    dataset: DatasetSpec,
    #[serde(default = "MaskPolicy::as_is")]
    mask: MaskPolicy,
    #[serde(default)]
    normalization: Option<NormScheme>,
    imputer: ImputerKind,
}

fn cmd_impute(args: &Common) -> Result<(), Error> {
    let path = args
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("impute needs --config".into()))?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut cfg: ImputeConfig = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    if let (Some(s), ImputerKind::GmmSample { seed, .. }) = (args.seed, &mut cfg.imputer) {
        *seed = s;
    }
    let data = apply_mask(&cfg.dataset.load()?, &cfg.mask)?;
    let data = match cfg.normalization {
        Some(s) => normalize(&data, s),
        None => data,
    };
    let imputer = Imputer::fit(cfg.imputer, &data)?;
    let (filled, stats) = imputer.transform(&data)?;
    let out = args
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("impute needs --out".into()))?;
    if out.extension().is_some_and(|e| e == "json") {
        filled.save_json(out)?;
    } else {
        filled.write_csv(out)?;
    }
    eprintln!(
        "imputed {} cells ({} k-nn column-mean fallbacks) -> {}",
        stats.imputed_cells,
        stats.knn_fallbacks,
        out.display()
    );
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct VerifyConfig {
    oracle: OracleConfig,
    /// Random instances per activation kind.
    instances: usize,
    /// Mixture pairs for the distinguishing probe.
    pairs: usize,
    probes: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            oracle: OracleConfig::default(),
            instances: 50,
            pairs: 20,
            probes: 1000,
        }
    }
}

#[derive(Serialize)]
struct OracleCheck {
    kind: &'static str,
    instance: usize,
    analytic: f64,
    mc_mean: f64,
    std_error: f64,
    z: f64,
    pass: bool,
}

#[derive(Serialize)]
struct PairCheck {
    pair: usize,
    distinct_gap: f64,
    distinct_verdict: Verdict,
    identical_gap: f64,
}

#[derive(Serialize)]
struct VerifyResults {
    activations: Vec<OracleCheck>,
    measures: Vec<PairCheck>,
    all_pass: bool,
}

fn cmd_verify(args: &Common) -> Result<(), Error> {
    let mut cfg: VerifyConfig = read_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.oracle.seed = s;
    }
    cfg.oracle.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.oracle.seed);
    let mut activations = Vec::new();
    for kind in ["relu", "rbf"] {
        for instance in 0..cfg.instances {
            let (gmm, point) = random_instance(&cfg.oracle.ranges, &mut rng);
            let cond = conditional(&gmm, &point)?;
            let (unit, analytic) = if kind == "relu" {
                let u = random_relu(gmm.dim(), &mut rng);
                let v = relu_expected(&u, &cond, &point)?;
                (Unit::Relu(u), v)
            } else {
                let u = random_rbf(gmm.dim(), &mut rng);
                let v = rbf_expected(&u, &cond, &point)?;
                (Unit::Rbf(u), v)
            };
            let seed = cfg.oracle.seed.wrapping_mul(1_000_003).wrapping_add(instance as u64);
            let (mc_mean, std_error) = mc_expected_activation(&unit, &cond, &point, cfg.oracle.samples, seed);
            let diff = (analytic - mc_mean).abs();
            let z = if std_error > 0.0 { diff / std_error } else { 0.0 };
            let pass = diff <= cfg.oracle.k_se * std_error || diff <= 1e-12;
            activations.push(OracleCheck {
                kind,
                instance,
                analytic,
                mc_mean,
                std_error,
                z,
                pass,
            });
        }
    }
    let mut measures = Vec::new();
    for pair in 0..cfg.pairs {
        let d = 1 + pair % 4;
        let a = random_gmm(d, 1 + pair % 3, &cfg.oracle.ranges, &mut rng);
        let b = random_gmm(d, 1 + pair % 3, &cfg.oracle.ranges, &mut rng);
        let seed = cfg.oracle.seed.wrapping_add(pair as u64);
        let distinct = distinguish_measures(&a, &b, cfg.probes, seed)?;
        let same = distinguish_measures(&a, &a.clone(), cfg.probes, seed)?;
        measures.push(PairCheck {
            pair,
            distinct_gap: distinct.max_gap,
            distinct_verdict: distinct.verdict,
            identical_gap: same.max_gap,
        });
    }
    let all_pass = activations.iter().all(|c| c.pass)
        && measures
            .iter()
            .all(|m| m.distinct_verdict == Verdict::Certified && m.identical_gap < 1e-12);
    eprintln!(
        "activations: {}/{} within {} SE; measures: {}/{} certified; overall {}",
        activations.iter().filter(|c| c.pass).count(),
        activations.len(),
        cfg.oracle.k_se,
        measures.iter().filter(|m| m.distinct_verdict == Verdict::Certified).count(),
        measures.len(),
        if all_pass { "PASS" } else { "FAIL" }
    );
    let report = ToolReport {
        experiment: "verify",
        version: VERSION,
        seed: cfg.oracle.seed,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
        results: VerifyResults {
            activations,
            measures,
            all_pass,
        },
    };
    write_json(&report, args.out.as_deref())?;
    if all_pass {
        Ok(())
    } else {
        Err(Error::Internal("verification failed".into()))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct BenchSuite {
    base: BenchConfig,
    components: Vec<usize>,
}

impl Default for BenchSuite {
    fn default() -> Self {
        BenchSuite {
            base: BenchConfig::default(),
            components: vec![1, 2, 4, 8],
        }
    }
}

fn cmd_bench(args: &Common) -> Result<(), Error> {
    let mut cfg: BenchSuite = read_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.base.seed = s;
    }
    let start = Instant::now();
    let mut results: Vec<BenchResult> = Vec::new();
    for &k in &cfg.components {
        let r = bench_layer_cost(&BenchConfig {
            components: k,
            ..cfg.base.clone()
        })?;
        eprintln!(
            "k={k:<3} generalized {:>10.0} ns/point  classical {:>10.0} ns/point  ratio {:.2}",
            r.generalized_ns, r.classical_ns, r.ratio
        );
        results.push(r);
    }
    let report = ToolReport {
        experiment: "bench",
        version: VERSION,
        seed: cfg.base.seed,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
        results,
    };
    write_json(&report, args.out.as_deref())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Impute(a) => cmd_impute(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use corrfactor::benchmark::{rows_tsv, run_benchmark, BenchmarkConfig, Method};
use corrfactor::cbcv::{choose_k, loss_tsv, CbcvConfig, CbcvReport, DEFAULT_ETA, DEFAULT_FOLDS};
use corrfactor::corrconf::estimate_confounders;
use corrfactor::icase::{default_k_max, diagnostics_tsv, run_icase};
use corrfactor::inference::{run_inference, FactorInputs, InferenceOptions, VarianceModel};
use corrfactor::io::{self, format_real, LabeledMatrix};
use corrfactor::linmodel::{CovarianceBasis, DesignMatrices, FeatureMatrix, Polytope};
use corrfactor::simgen::{build_tissue_basis, build_twin_basis, simulate, SimConfig};
use corrfactor::Error;
use log::info;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "corrfactor", version, about = "Latent factors and confounder-adjusted tests for correlated samples")]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "CORRFACTOR_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a simulated dataset with its ground truth.
    Simulate(SimulateArgs),
    /// Choose the number of factors by cross-validation.
    ChooseK(ChooseKArgs),
    /// Estimate factors and reconstruct the confounders.
    Fit(FitArgs),
    /// Confounder-adjusted tests for every feature.
    Infer(InferArgs),
    /// Score methods on simulated replicates.
    Benchmark(BenchmarkArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Residuals {
    Gaussian,
    T,
}

#[derive(Args, Debug)]
struct SimOverrides {
    /// Dataset layout: paper-4.1 (multi-tissue) or paper-5-twin.
    #[arg(long, default_value = "paper-4.1")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Residual distribution; the preset decides when omitted.
    #[arg(long, value_enum)]
    residuals: Option<Residuals>,
    /// Degrees of freedom for t residuals.
    #[arg(long, default_value_t = 4.0)]
    df: f64,
    /// Number of features.
    #[arg(long)]
    p: Option<usize>,
    /// Covariate-to-confounder strength; calibrated when omitted.
    #[arg(long)]
    alpha: Option<f64>,
    /// Identity residual covariance for every feature.
    #[arg(long)]
    independent_noise: bool,
}

impl SimOverrides {
    fn config(&self) -> Result<SimConfig, Error> {
        let mut cfg = SimConfig::preset(&self.preset, self.seed)?;
        match self.residuals {
            Some(Residuals::Gaussian) => cfg.residual_df = f64::INFINITY,
            Some(Residuals::T) => cfg.residual_df = self.df,
            None => {}
        }
        if let Some(p) = self.p {
            cfg.p = p;
        }
        cfg.alpha = self.alpha;
        cfg.independent_noise = self.independent_noise;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    sim: SimOverrides,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Features by samples, with a header of sample ids.
    #[arg(long)]
    input_y: PathBuf,
    /// Samples by covariates of interest.
    #[arg(long)]
    input_x: PathBuf,
    /// Samples by nuisance covariates.
    #[arg(long)]
    input_z: Option<PathBuf>,
    /// Covariance basis JSON; built from --preset when omitted.
    #[arg(long)]
    basis: Option<PathBuf>,
    /// Constraint JSON; from --preset, or the nonnegative orthant, when omitted.
    #[arg(long)]
    polytope: Option<PathBuf>,
    /// Preset supplying the basis and constraints.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RankArgs {
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    folds: usize,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_ETA)]
    eta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ChooseKArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    rank: RankArgs,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    rank: RankArgs,
    /// Number of factors; chosen by cross-validation when omitted.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    rank: RankArgs,
    #[arg(long)]
    k: Option<usize>,
    /// Samples by K matrix used as the confounders instead of estimating them.
    #[arg(long)]
    oracle_c: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "shared-shape")]
    variance_model: VarianceArg,
    /// Skip the bias correction of the confounder regression.
    #[arg(long)]
    naive_omega: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VarianceArg {
    SharedShape,
    PerFeature,
}

impl From<VarianceArg> for VarianceModel {
    fn from(v: VarianceArg) -> Self {
        match v {
            VarianceArg::SharedShape => VarianceModel::SharedShape,
            VarianceArg::PerFeature => VarianceModel::PerFeature,
        }
    }
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    #[command(flatten)]
    sim: SimOverrides,
    #[arg(long, default_value_t = 20)]
    replicates: usize,
    /// Comma-separated: cbcv, pa, icase, svd, svd-ind, oracle.
    #[arg(long, default_value = "cbcv,pa,svd", value_delimiter = ',')]
    methods: Vec<String>,
    #[arg(long, default_value_t = 3)]
    folds: usize,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_ETA)]
    eta: f64,
    #[arg(long, default_value_t = corrfactor::baselines::DEFAULT_PERMUTATIONS)]
    pa_permutations: usize,
    #[arg(long, value_enum, default_value = "shared-shape")]
    variance_model: VarianceArg,
    #[arg(long)]
    out: PathBuf,
}

struct Loaded {
    y: FeatureMatrix,
    design: DesignMatrices,
    basis: CovarianceBasis,
    poly: Polytope,
}

fn preset_basis(name: &str, n: usize) -> Result<(CovarianceBasis, Polytope), Error> {
    let per = |block: usize| {
        if n % block != 0 {
            return Err(Error::DimensionMismatch(format!("preset {name} needs n divisible by {block}, got {n}")));
        }
        Ok(n / block)
    };
    match name {
        "paper-4.1" => build_tissue_basis(per(3)?, 3),
        "paper-5-twin" => build_twin_basis(per(4)?),
        _ => Err(Error::InvalidInput(format!("unknown preset '{name}'"))),
    }
}

fn load(args: &DataArgs) -> Result<Loaded, Error> {
    info!("loading {}", args.input_y.display());
    let y = io::read_feature_matrix(&args.input_y)?;
    let x = io::read_sample_matrix(&args.input_x, &y.sample_ids)?;
    let z = match &args.input_z {
        Some(p) => Some(io::read_sample_matrix(p, &y.sample_ids)?),
        None => None,
    };
    let design = DesignMatrices::new(x, z)?;
    let from_preset = match &args.preset {
        Some(name) => Some(preset_basis(name, y.n())?),
        None => None,
    };
    let basis = match (&args.basis, &from_preset) {
        (Some(p), _) => io::read_json::<CovarianceBasis>(p)?,
        (None, Some((b, _))) => b.clone(),
        (None, None) => return Err(Error::InvalidInput("either --basis or --preset is required".into())),
    };
    basis.validate()?;
    let poly = match (&args.polytope, from_preset) {
        (Some(p), _) => io::read_json::<Polytope>(p)?,
        (None, Some((_, poly))) => poly,
        (None, None) => Polytope::nonnegative(basis.len()),
    };
    if poly.dim() != basis.len() {
        return Err(Error::DimensionMismatch(format!(
            "polytope has dimension {}, basis has {} terms",
            poly.dim(),
            basis.len()
        )));
    }
    if basis.n != y.n() {
        return Err(Error::DimensionMismatch(format!("basis is for n = {}, data has {}", basis.n, y.n())));
    }
    Ok(Loaded { y, design, basis, poly })
}

fn create_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    io::atomic_write(path, text.as_bytes())
}

fn cbcv_summary(report: &CbcvReport, seed: u64) -> serde_json::Value {
    let total: Vec<String> = report.total_loss().iter().map(|v| format_real(*v)).collect();
    json!({
        "k_hat": report.k_hat,
        "F": report.loss.nrows(),
        "K_max": report.k_max,
        "eta": report.eta,
        "seed": seed,
        "total_loss": total,
        "warnings": report.warnings,
    })
}

fn run_choose_k(inputs: &FactorInputs, poly: &Polytope, rank: &RankArgs, out: &Path) -> Result<CbcvReport, Error> {
    let config = CbcvConfig {
        folds: rank.folds,
        k_max: rank.k_max.unwrap_or_else(|| default_k_max(inputs.m())),
        eta: rank.eta,
        seed: rank.seed,
    };
    info!("choose-k: {} folds, K_max {}", config.folds, config.k_max);
    let report = choose_k(&inputs.y2, &inputs.basis_qx, poly, &config)?;
    info!("choose-k: k_hat {}", report.k_hat);
    write_text(&out.join("cbcv_loss.tsv"), &loss_tsv(&report))?;
    io::write_json(&out.join("cbcv.json"), &cbcv_summary(&report, rank.seed))?;
    Ok(report)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), Error> {
    let cfg = args.sim.config()?;
    info!("simulate: {} with seed {}", args.sim.preset, cfg.seed);
    let d = simulate(&cfg)?;
    create_dir(&args.out)?;
    let ids = d.y.sample_ids.clone();
    io::write_feature_matrix(&args.out.join("Y.tsv"), &d.y)?;
    let x = LabeledMatrix {
        corner: "sample_id".into(),
        row_ids: ids.clone(),
        col_ids: (1..=d.design.d()).map(|i| format!("x{i}")).collect(),
        values: d.design.x.clone(),
    };
    io::write_matrix(&args.out.join("X.tsv"), &x)?;
    if let Some(z) = &d.design.z {
        let z = LabeledMatrix {
            corner: "sample_id".into(),
            row_ids: ids,
            col_ids: (1..=z.ncols()).map(|i| format!("z{i}")).collect(),
            values: z.clone(),
        };
        io::write_matrix(&args.out.join("Z.tsv"), &z)?;
    }
    io::write_json(&args.out.join("truth.json"), &json!({ "config": cfg, "truth": d.truth }))?;
    io::write_json(&args.out.join("basis.json"), &d.basis)?;
    io::write_json(&args.out.join("polytope.json"), &d.polytope)?;
    info!("simulate: wrote {}", args.out.display());
    Ok(())
}

fn cmd_choose_k(args: &ChooseKArgs) -> Result<(), Error> {
    let data = load(&args.data)?;
    let inputs = FactorInputs::new(&data.y, &data.design, &data.basis)?;
    create_dir(&args.data.out)?;
    let report = run_choose_k(&inputs, &data.poly, &args.rank, &args.data.out)?;
    println!("{}", cbcv_summary(&report, args.rank.seed));
    Ok(())
}

fn cmd_fit(args: &FitArgs) -> Result<(), Error> {
    let data = load(&args.data)?;
    let out = &args.data.out;
    let inputs = FactorInputs::new(&data.y, &data.design, &data.basis)?;
    create_dir(out)?;
    let k = match args.k {
        Some(k) => k,
        None => run_choose_k(&inputs, &data.poly, &args.rank, out)?.k_hat,
    };
    info!("fit: {k} factors");
    let fits = run_icase(&inputs.y2, &inputs.basis_qx, &data.poly, k)?;
    let fit = fits.last().expect("rank-zero fit is always present");
    let conf = estimate_confounders(&inputs.y, &inputs.x, &inputs.basis, fit)?;
    let c_hat = inputs.to_original(&conf.c_hat);
    let n = data.y.n();
    let factor_ids: Vec<String> = (1..=k).map(|i| format!("c{i}")).collect();
    io::write_matrix(
        &out.join("C_hat.tsv"),
        &LabeledMatrix {
            corner: "sample_id".into(),
            row_ids: data.y.sample_ids.clone(),
            col_ids: factor_ids.clone(),
            values: c_hat,
        },
    )?;
    io::write_matrix(
        &out.join("L_hat.tsv"),
        &LabeledMatrix {
            corner: "feature_id".into(),
            row_ids: data.y.feature_ids.clone(),
            col_ids: factor_ids.clone(),
            values: conf.l_hat.clone(),
        },
    )?;
    io::write_matrix(
        &out.join("Omega_hat.tsv"),
        &LabeledMatrix {
            corner: "covariate".into(),
            row_ids: (1..=data.design.d()).map(|i| format!("x{i}")).collect(),
            col_ids: factor_ids,
            values: conf.omega_hat.clone(),
        },
    )?;
    write_text(&out.join("icase.tsv"), &diagnostics_tsv(&fits))?;
    let tau: Vec<String> = fit.variance.tau.iter().map(|v| format_real(*v)).collect();
    io::write_json(
        &out.join("fit.json"),
        &json!({
            "k": k,
            "n": n,
            "delta2": format_real(fit.variance.delta2),
            "tau": tau,
            "bias_corrected": conf.bias_corrected,
            "identity_residual": format_real(conf.identity_residual()),
        }),
    )?;
    info!("fit: wrote {}", out.display());
    Ok(())
}

fn cmd_infer(args: &InferArgs) -> Result<(), Error> {
    let data = load(&args.data)?;
    let out = &args.data.out;
    create_dir(out)?;
    let oracle_c = match &args.oracle_c {
        Some(p) => Some(io::read_sample_matrix(p, &data.y.sample_ids)?),
        None => None,
    };
    let mut k = args.k;
    if k.is_none() && oracle_c.is_none() {
        let inputs = FactorInputs::new(&data.y, &data.design, &data.basis)?;
        k = Some(run_choose_k(&inputs, &data.poly, &args.rank, out)?.k_hat);
    }
    let options = InferenceOptions {
        k,
        folds: args.rank.folds,
        k_max: args.rank.k_max,
        eta: args.rank.eta,
        seed: args.rank.seed,
        oracle_c,
        naive_omega: args.naive_omega,
        variance_model: args.variance_model.into(),
    };
    info!("infer: {} features", data.y.p());
    let res = run_inference(&data.y, &data.design, &data.basis, &data.poly, &options)?;
    let d = data.design.d();
    let b = data.basis.len();
    let mut text = String::from("feature_id");
    for stat in ["beta", "se", "t", "p", "q"] {
        for j in 1..=d {
            text.push_str(&format!("\t{stat}_{j}"));
        }
    }
    for j in 1..=b {
        text.push_str(&format!("\tv_g_{j}"));
    }
    text.push_str("\tflags\n");
    for f in &res.features {
        text.push_str(&f.feature_id);
        let se = f.se();
        for v in f.beta.iter().chain(se.iter()).chain(f.t.iter()).chain(f.p.iter()).chain(f.q.iter()) {
            text.push('\t');
            text.push_str(&format_real(*v));
        }
        for v in f.v_g.iter() {
            text.push('\t');
            text.push_str(&format_real(*v));
        }
        text.push('\t');
        text.push_str(if f.boundary { "boundary" } else { "." });
        text.push('\n');
    }
    write_text(&out.join("results.tsv"), &text)?;
    io::write_matrix(
        &out.join("C_hat.tsv"),
        &LabeledMatrix {
            corner: "sample_id".into(),
            row_ids: data.y.sample_ids.clone(),
            col_ids: (1..=res.k).map(|i| format!("c{i}")).collect(),
            values: res.c_hat.clone(),
        },
    )?;
    let discoveries: Vec<usize> = (0..d)
        .map(|j| res.features.iter().filter(|f| f.q[j] <= corrfactor::baselines::DEFAULT_Q_THRESHOLD).count())
        .collect();
    io::write_json(
        &out.join("summary.json"),
        &json!({
            "k": res.k,
            "df": res.df,
            "features": res.features.len(),
            "q_threshold": corrfactor::baselines::DEFAULT_Q_THRESHOLD,
            "discoveries": discoveries,
            "variance_model": options.variance_model,
            "oracle_c": args.oracle_c.is_some(),
        }),
    )?;
    info!("infer: wrote {}", out.display());
    Ok(())
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

fn cmd_benchmark(args: &BenchmarkArgs) -> Result<(), Error> {
    let methods = args.methods.iter().map(|m| m.trim().parse()).collect::<Result<Vec<Method>, _>>()?;
    if args.replicates == 0 {
        return Err(Error::InvalidInput("--replicates must be positive".into()));
    }
    let sim = args.sim.config()?;
    let mut config = BenchmarkConfig::new(sim, args.replicates, methods.clone());
    config.folds = args.folds;
    config.k_max = args.k_max;
    config.eta = args.eta;
    config.pa_permutations = args.pa_permutations;
    config.variance_model = args.variance_model.into();
    info!("benchmark: calibrating");
    let config = config.calibrated()?;
    info!("benchmark: {} replicates of {}", args.replicates, args.sim.preset);
    let outcomes = run_benchmark(&config)?;
    let rows: Vec<_> = outcomes.iter().flat_map(|o| o.rows.iter().cloned()).collect();
    create_dir(&args.out)?;
    write_text(&args.out.join("benchmark.tsv"), &rows_tsv(&rows))?;
    let mut summary = BTreeMap::new();
    for m in &methods {
        let of = |f: &dyn Fn(&corrfactor::benchmark::BenchmarkRow) -> Option<f64>| {
            median(rows.iter().filter(|r| r.method == *m).filter_map(f).collect())
        };
        let k_hat = of(&|r| r.k_hat.map(|k| k as f64));
        summary.insert(
            m.name(),
            json!({
                "median_k_hat": k_hat.map(format_real),
                "median_angle_rad": of(&|r| r.angle_rad).map(format_real),
                "median_fdp": of(&|r| r.fdp).map(format_real),
                "median_trp": of(&|r| r.trp).map(format_real),
            }),
        );
    }
    io::write_json(
        &args.out.join("benchmark.json"),
        &json!({
            "preset": args.sim.preset,
            "replicates": args.replicates,
            "seed": args.sim.seed,
            "alpha": config.sim.alpha.map(format_real),
            "methods": summary,
        }),
    )?;
    info!("benchmark: wrote {}", args.out.display());
    Ok(())
}

fn exit_code(e: &Error) -> (u8, &'static str) {
    if e.is_io() {
        (4, "io")
    } else if e.is_numerical() {
        (3, "numerical")
    } else {
        (2, "config")
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("{}", json!({"error": "config", "code": 2, "message": "--threads must be positive"}));
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("{}", json!({"error": "config", "code": 2, "message": e.to_string()}));
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::ChooseK(a) => cmd_choose_k(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Benchmark(a) => cmd_benchmark(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = exit_code(&e);
            eprintln!("{}", json!({"error": kind, "code": code, "message": e.to_string()}));
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_classes_map_to_exit_codes() {
        let io = Error::Io {
            path: "x".into(),
            source: std::io::Error::other("boom"),
        };
        assert_eq!(exit_code(&io).0, 4);
        assert_eq!(exit_code(&Error::Parse("bad".into()).context("reading")).0, 4);
        assert_eq!(exit_code(&Error::SingularGram.context("fold 1")).0, 3);
        assert_eq!(exit_code(&Error::InvalidInput("k".into())).0, 2);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }

    #[test]
    fn preset_basis_checks_sample_count() {
        assert_eq!(preset_basis("paper-4.1", 6).unwrap().0.len(), 6);
        assert!(preset_basis("paper-4.1", 7).is_err());
        assert!(preset_basis("paper-5-twin", 8).is_ok());
        assert!(preset_basis("nope", 8).is_err());
    }
}

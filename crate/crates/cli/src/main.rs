use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use simu_core::config::ExperimentConfig;
use simu_core::masking::MaskStrategy;
use simu_core::pipeline::{AblateParam, Pipeline};
use simu_core::unlearn::Method;
use simu_core::{Error, Result};

/// Environment variable naming the root directory for relative output paths.
const OUT_ENV: &str = "SIMU_OUT";

#[derive(Parser, Debug)]
#[command(name = "simu", version, about = "Neuron-masked second-order unlearning pipeline")]
struct Cli {
    /// Experiment config (TOML). Built-in desk defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of every config section.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Defaults to `io.out_dir`, under $SIMU_OUT if set.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Mask threshold override.
    #[arg(long, global = true)]
    t: Option<f64>,
    /// Attribution step count override.
    #[arg(long, global = true)]
    m: Option<usize>,
    /// GradDiff forget weight override (applies to the selected method, or all).
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// fo, so or simu; `evaluate` also accepts `original`.
    #[arg(long, global = true)]
    method: Option<String>,
    /// dual or forget_only.
    #[arg(long = "mask-strategy", global = true)]
    mask_strategy: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic QA corpus.
    GenData,
    /// Train the original model to the memorization bar.
    Train,
    /// Compute neuron attribution scores on the forget set.
    Attribute,
    /// Threshold scores into the critical-neuron mask.
    Mask,
    /// Run unlearning for one method (default: fo, so and simu).
    Unlearn,
    /// Evaluate one target (default: every checkpoint present).
    Evaluate,
    /// Sweep t, m or the mask strategy.
    Ablate {
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Render report.md and report.csv from the evaluation artifacts.
    Report,
    /// Every stage in order, from gen-data to report.
    Run,
}

fn resolve_out(cli_out: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(p) = cli_out {
        return p.to_path_buf();
    }
    let dir = PathBuf::from(&cfg.io.out_dir);
    match std::env::var_os(OUT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir,
    }
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(t) = cli.t {
        cfg.mask.threshold = t;
    }
    if let Some(m) = cli.m {
        cfg.attribution.m = m;
    }
    if let Some(s) = &cli.mask_strategy {
        cfg.mask.strategy = s.parse()?;
        if !matches!(cfg.mask.strategy, MaskStrategy::Dual | MaskStrategy::ForgetOnly) {
            return Err(Error::Config { field: "mask-strategy".into(), reason: "expected dual or forget_only".into() });
        }
    }
    if let Some(l) = cli.lambda {
        let u = &mut cfg.unlearn;
        match selected_methods(cli)?.as_slice() {
            [Method::FoGradDiff] => u.fo.lambda = l,
            [Method::SoGradDiff] => u.so.lambda = l,
            [Method::SimuGradDiff] => u.simu.lambda = l,
            _ => {
                u.fo.lambda = l;
                u.so.lambda = l;
                u.simu.lambda = l;
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn selected_methods(cli: &Cli) -> Result<Vec<Method>> {
    match cli.method.as_deref() {
        None | Some("original") => Ok(vec![Method::FoGradDiff, Method::SoGradDiff, Method::SimuGradDiff]),
        Some(m) => Ok(vec![m.parse()?]),
    }
}

fn eval_targets(cli: &Cli, p: &Pipeline) -> Result<Vec<String>> {
    match cli.method.as_deref() {
        Some("original") => Ok(vec!["original".into()]),
        Some(m) => Ok(vec![m.parse::<Method>()?.as_str().to_string()]),
        None => {
            let t = p.available_targets();
            if t.is_empty() {
                return Err(Error::MissingArtifact(p.path(simu_core::pipeline::ORIGINAL)));
            }
            Ok(t.into_iter().map(String::from).collect())
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = build_config(cli)?;
    let out = resolve_out(cli.out.as_deref(), &cfg);
    let p = Pipeline::new(cfg, out)?;
    match &cli.cmd {
        Cmd::GenData => {
            let c = p.gen_data()?;
            println!("wrote {} pairs to {}", c.pairs.len(), p.path(simu_core::pipeline::CORPUS).display());
        }
        Cmd::Train => {
            p.train()?;
            println!("wrote {}", p.path(simu_core::pipeline::ORIGINAL).display());
        }
        Cmd::Attribute => {
            let s = p.attribute()?;
            println!("scored {} samples at m={} ({} non-finite terms)", s.header.n_samples, s.m, s.header.nonfinite);
        }
        Cmd::Mask => {
            let (_, stats) = p.mask()?;
            println!("{} of {} neurons selected (per layer {:?})", stats.total, stats.capacity, stats.per_layer);
        }
        Cmd::Unlearn => {
            for m in selected_methods(cli)? {
                let o = p.unlearn(m)?;
                let guarded = o.record.guard_events();
                println!("{}: {} events, {} guarded steps", m.as_str(), o.record.events.len(), guarded);
            }
        }
        Cmd::Evaluate => {
            for t in eval_targets(cli, &p)? {
                let a = p.evaluate(&t)?;
                let r = &a.report;
                println!(
                    "{t}: em_f {:.4} rouge_f {:.4} mia {:.4} em_r {:.4} rouge_r {:.4} agg {:.4}",
                    r.em_forget, r.rouge_forget, r.mia, r.em_retain, r.rouge_retain, r.aggregate
                );
            }
        }
        Cmd::Ablate { param, values } => {
            let param: AblateParam = param.parse()?;
            print!("{}", p.ablate(param, values)?);
        }
        Cmd::Report => print!("{}", p.report()?),
        Cmd::Run => {
            p.gen_data()?;
            p.train()?;
            p.attribute()?;
            p.mask()?;
            for m in [Method::FoGradDiff, Method::SoGradDiff, Method::SimuGradDiff] {
                p.unlearn(m)?;
            }
            for t in simu_core::pipeline::TARGETS {
                p.evaluate(t)?;
            }
            print!("{}", p.report()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

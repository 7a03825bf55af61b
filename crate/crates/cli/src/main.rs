use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lfk::config::RunConfig;
use lfk::ecg::Provider;
use lfk::eikonal::Protocol;
use lfk::pipeline;
use lfk::surrogate::CodeEncoding;
use lfk::Error;

#[derive(Parser)]
#[command(name = "lfk", version, about = "Geometry-conditioned ECG lead-field pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Fail when the acceptance orderings are violated (evaluate).
    #[arg(long, global = true)]
    strict: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderArg {
    Fem,
    Surrogate,
    Pseudo,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Crt,
    Sinus,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncodingArg {
    Pca,
    Sdf,
    All,
}

#[derive(Subcommand)]
enum Command {
    GenGeometries,
    GenLeadfields,
    TrainSdf,
    InferLatents,
    TrainLf {
        #[arg(long, value_enum, default_value = "all")]
        encoding: EncodingArg,
    },
    SimulateEcg {
        #[arg(long, value_enum, default_value = "all")]
        provider: ProviderArg,
        #[arg(long, value_enum, default_value = "all")]
        protocol: ProtocolArg,
        /// Geometry encoding of the surrogate provider.
        #[arg(long, value_enum, default_value = "all")]
        encoding: EncodingArg,
    },
    Evaluate,
    /// Every stage in order.
    Run,
    /// Print the resolved configuration with provenance.
    ShowConfig,
}

fn encodings(e: EncodingArg) -> Vec<CodeEncoding> {
    match e {
        EncodingArg::Pca => vec![CodeEncoding::Pca],
        EncodingArg::Sdf => vec![CodeEncoding::Sdf],
        EncodingArg::All => CodeEncoding::ALL.to_vec(),
    }
}

fn protocols(p: ProtocolArg) -> Vec<Protocol> {
    match p {
        ProtocolArg::Crt => vec![Protocol::Crt],
        ProtocolArg::Sinus => vec![Protocol::Sinus],
        ProtocolArg::All => Protocol::ALL.to_vec(),
    }
}

fn providers(p: ProviderArg) -> Vec<Provider> {
    match p {
        ProviderArg::Fem => vec![Provider::Fem],
        ProviderArg::Surrogate => vec![Provider::Surrogate],
        ProviderArg::Pseudo => vec![Provider::Pseudo],
        ProviderArg::All => vec![Provider::Fem, Provider::Surrogate, Provider::Pseudo],
    }
}

fn simulate(cfg: &RunConfig, prov: ProviderArg, prot: ProtocolArg, enc: EncodingArg) -> lfk::Result<()> {
    for protocol in protocols(prot) {
        for provider in providers(prov) {
            let encs = if provider == Provider::Surrogate { encodings(enc) } else { vec![CodeEncoding::Sdf] };
            for e in encs {
                let files = pipeline::simulate_ecg(cfg, provider, protocol, e)?;
                eprintln!(
                    "simulate-ecg: {} {}: {} files",
                    pipeline::provider_tag(provider, e),
                    protocol.name(),
                    files.len()
                );
            }
        }
    }
    Ok(())
}

fn evaluate(cfg: &RunConfig, strict: bool) -> lfk::Result<()> {
    let s = pipeline::evaluate(cfg, strict)?;
    println!("model,angular_deg,angular_ecg_leads_deg,ecg_rel_l2");
    for r in s.table.iter().chain([&s.pseudo]) {
        println!("{},{:.3},{:.3},{:.5}", r.model, r.angular_deg, r.angular_ecg_leads_deg, r.ecg_rel_l2);
    }
    for c in &s.checks {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(())
}

fn run(cli: &Cli, cfg: &RunConfig) -> lfk::Result<()> {
    match &cli.command {
        Command::GenGeometries => {
            let s = pipeline::gen_geometries(cfg)?;
            eprintln!("gen-geometries: {} train, {} test", s.train.len(), s.test.len());
        }
        Command::GenLeadfields => {
            let r = pipeline::gen_leadfields(cfg)?;
            eprintln!(
                "gen-leadfields: {} solves, mean {:.3} s, max residual {:.2e}",
                r.n_solves, r.mean_solve_seconds, r.max_residual
            );
        }
        Command::TrainSdf => {
            let r = pipeline::train_sdf(cfg)?;
            let m = r.final_mse_mm2.iter().sum::<f64>() / r.final_mse_mm2.len() as f64;
            eprintln!("train-sdf: mean final SDF MSE {m:.3} mm^2");
        }
        Command::InferLatents => {
            let c = pipeline::infer_latents(cfg)?;
            eprintln!("infer-latents: {} test codes", c.len());
        }
        Command::TrainLf { encoding } => {
            for r in pipeline::train_lf(cfg, &encodings(*encoding))? {
                eprintln!("train-lf: {} final loss {:.4e} on {} records", r.encoding.name(), r.final_loss, r.n_records);
            }
        }
        Command::SimulateEcg { provider, protocol, encoding } => simulate(cfg, *provider, *protocol, *encoding)?,
        Command::Evaluate => evaluate(cfg, cli.strict)?,
        Command::Run => {
            pipeline::gen_geometries(cfg)?;
            pipeline::gen_leadfields(cfg)?;
            pipeline::train_sdf(cfg)?;
            pipeline::infer_latents(cfg)?;
            pipeline::train_lf(cfg, &CodeEncoding::ALL)?;
            simulate(cfg, ProviderArg::All, ProtocolArg::All, EncodingArg::All)?;
            evaluate(cfg, cli.strict)?;
        }
        Command::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg.resolved())?);
        }
    }
    Ok(())
}

fn load_config(cli: &Cli) -> lfk::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = &cli.out {
        cfg.set_out(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("LFK_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("warning: could not set thread count: {e}");
        }
    }
    let result = load_config(&cli).and_then(|cfg| run(&cli, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            if let Error::MissingArtifact { stage, .. } = &e {
                eprintln!("hint: run `lfk {stage}` first");
            }
            ExitCode::from(code as u8)
        }
    }
}

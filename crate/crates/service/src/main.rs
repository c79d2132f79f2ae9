use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use drscreen_core::phantom::REFERENCE_MIX;
use drscreen_service::tools::{self, GRADES_FILE};
use drscreen_service::worker::DEFAULT_MAX_UPLOAD;
use drscreen_service::{Server, ServiceConfig};

#[derive(Parser)]
#[command(name = "drscreen", version, about = "Diabetic retinopathy screening of fundus photographs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze one image and print its report.
    Analyze {
        image: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for report.json and overlay.png.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analyze every PNG/JPEG in a directory.
    Batch {
        dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; defaults to `<dir>/results`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a seeded phantom corpus with ground truth.
    GenPhantom {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Proportions of grades 0-3, comma separated.
        #[arg(long, value_delimiter = ',')]
        mix: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1024)]
        width: usize,
        #[arg(long, default_value_t = 768)]
        height: usize,
    },
    /// Quadratic-weighted kappa of predicted against reference grades.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// Grade map or corpus manifest.
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "0.0.0.0")]
        host: String,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = DEFAULT_MAX_UPLOAD)]
        max_upload: usize,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("drscreen: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Analyze { image, config, out } => {
            let cfg = tools::load_config(config.as_deref())?;
            let report = tools::analyze_file(&image, &cfg, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Batch { dir, config, out } => {
            let cfg = tools::load_config(config.as_deref())?;
            let out = out.unwrap_or_else(|| dir.join("results"));
            for e in tools::batch(&dir, &cfg, &out)? {
                let verdict = match (&e.report, &e.error) {
                    (Some(r), _) => match &r.grade {
                        Some(g) => format!("level {} referral {}", g.level, g.referral),
                        None => format!("rejected: {}", r.reason),
                    },
                    (None, Some(err)) => format!("failed: {err}"),
                    (None, None) => unreachable!(),
                };
                println!("{}\t{verdict}", e.name);
            }
            println!("grades written to {}", out.join(GRADES_FILE).display());
        }
        Command::GenPhantom { seed, n, out, mix, width, height } => {
            let mix = match mix.as_deref() {
                Some(&[a, b, c, d]) => [a, b, c, d],
                Some(v) => return Err(format!("--mix needs 4 proportions, got {}", v.len()).into()),
                None => REFERENCE_MIX,
            };
            let manifest = tools::generate_phantoms(seed, n, mix, width, height, &out)?;
            println!("{} phantoms written to {}", manifest.entries.len(), out.display());
        }
        Command::Eval { pred, reference } => {
            let eval = tools::evaluate(&tools::read_grades(&pred)?, &tools::read_grades(&reference)?)?;
            println!("{}", eval.to_text());
        }
        Command::Serve { port, host, data, config, workers, max_upload } => {
            let cfg = ServiceConfig { data_dir: data, workers, max_upload, pipeline: tools::load_config(config.as_deref())? };
            let addr: SocketAddr = format!("{host}:{port}").parse()?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let (server, issues) = Server::start(cfg, addr).await?;
                for issue in issues {
                    eprintln!("skipping {}: {}", issue.path.display(), issue.reason);
                }
                eprintln!("listening on http://{}", server.addr);
                tokio::signal::ctrl_c().await?;
                server.stop().await;
                Ok::<_, Box<dyn std::error::Error>>(())
            })?;
        }
    }
    Ok(())
}

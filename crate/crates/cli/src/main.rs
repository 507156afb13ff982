use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use morphavatar_cli::{router, ServiceState};
use morphavatar_core::morphable_model::SynthParams;
use morphavatar_core::pipeline::{cmd_fit, cmd_generate, cmd_render, cmd_synth_model, view_camera, RunConfig};
use morphavatar_core::AvatarFile;

#[derive(Parser)]
#[command(name = "morphavatar", version, about = "Generate multi-view images from a morphable head model and fit animatable splat avatars")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural morphable model file.
    SynthModel {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        subdiv: Option<u32>,
        #[arg(long)]
        k_id: Option<usize>,
        #[arg(long)]
        k_expr: Option<usize>,
    },
    /// Sample views and expressions and generate images with the oracle denoiser.
    Generate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Fit an avatar to a generated image set.
    Fit {
        #[command(flatten)]
        run: RunArgs,
        /// Directory holding manifest.json; defaults to the configured output directory.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Render one frame of a fitted avatar to PNG.
    Render {
        #[arg(long)]
        avatar: PathBuf,
        /// Comma-separated expression coefficients; zeros when omitted.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        phi: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        azimuth: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        elevation: f64,
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the render API for a fitted avatar.
    Serve {
        #[arg(long)]
        avatar: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        /// Static viewer files served under /ui/.
        #[arg(long, default_value = "ui")]
        ui_dir: PathBuf,
    },
}

fn load_config(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::from_toml_str("", Path::new("."))?,
    };
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &run.out {
        cfg.out = out.clone();
    }
    cfg.fit.seed = cfg.seed;
    Ok(cfg)
}

/// Caps rayon (and the service's worker pool) at `MORPHAVATAR_THREADS`.
fn thread_limit() -> Result<Option<usize>> {
    match std::env::var("MORPHAVATAR_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("MORPHAVATAR_THREADS={v:?} is not a number"))?;
            if n == 0 {
                bail!("MORPHAVATAR_THREADS must be at least 1");
            }
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = thread_limit()?;
    match cli.command {
        Command::SynthModel { run, subdiv, k_id, k_expr } => {
            let cfg = load_config(&run)?;
            let mut p = cfg.model.synth.unwrap_or_default();
            p.seed = run.seed.unwrap_or(p.seed);
            p.n_subdiv = subdiv.unwrap_or(p.n_subdiv);
            p.k_id = k_id.unwrap_or(p.k_id);
            p.k_expr = k_expr.unwrap_or(p.k_expr);
            let path = match &run.out {
                Some(o) => o.clone(),
                None => PathBuf::from("model.mavc"),
            };
            synth(p, &path)?;
        }
        Command::Generate { run } => {
            let cfg = load_config(&run)?;
            let (manifest, _) = cmd_generate(&cfg, &cfg.out)?;
            println!("wrote {} images to {}", manifest.images.len(), cfg.out.display());
        }
        Command::Fit { run, manifest, iterations } => {
            let mut cfg = load_config(&run)?;
            if let Some(n) = iterations {
                cfg.fit.iterations = n;
            }
            let dir = manifest.unwrap_or_else(|| cfg.out.clone());
            let out = cmd_fit(&cfg.fit, &dir, &cfg.out)?;
            let last = out.log.last().map(|c| c.total).unwrap_or(f64::NAN);
            println!("fitted {} splats, final loss {last:.5}, wrote {}", out.avatar.avatar.splats.len(), cfg.out.display());
        }
        Command::Render { avatar, phi, azimuth, elevation, width, height, out } => {
            let file = AvatarFile::read(&avatar)?;
            let phi = phi.unwrap_or_else(|| vec![0.0; file.avatar.model.k_expr]);
            let camera = view_camera(&file.view, azimuth, elevation, width, height)?;
            cmd_render(&file, &phi, &camera, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Serve { avatar, bind, ui_dir } => serve(avatar, bind, ui_dir, threads)?,
    }
    Ok(())
}

fn synth(p: SynthParams, path: &Path) -> Result<()> {
    let m = cmd_synth_model(p, path)?;
    println!("wrote {} ({} vertices, {} triangles)", path.display(), m.num_vertices(), m.triangles.len());
    Ok(())
}

fn serve(avatar: PathBuf, bind: SocketAddr, ui_dir: PathBuf, threads: Option<usize>) -> Result<()> {
    let mut rt = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = threads {
        rt.worker_threads(n).max_blocking_threads(n);
    }
    rt.enable_all().build()?.block_on(async move {
        let state = ServiceState::loading();
        let listener = tokio::net::TcpListener::bind(bind).await.with_context(|| format!("binding {bind}"))?;
        log::info!("listening on http://{bind} (ui from {})", ui_dir.display());
        let loader = state.clone();
        tokio::task::spawn_blocking(move || match AvatarFile::read(&avatar) {
            Ok(a) => {
                log::info!("loaded {} ({} splats)", avatar.display(), a.avatar.splats.len());
                loader.set_avatar(a);
            }
            Err(e) => {
                log::error!("cannot load {}: {e}", avatar.display());
                std::process::exit(1);
            }
        });
        axum::serve(listener, router(state, Some(ui_dir)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(())
}


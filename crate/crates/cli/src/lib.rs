//! The `needle` command line.
//!
//! [`run`] takes the argument vector and two sinks so tests can drive it in
//! process. Exit codes: 0 ok, 1 domain error, 2 usage.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use needle_core::adapter::{decode_image, encode_png};
use needle_core::generation::FeedbackMode;
use needle_core::pipeline::tile_image;
use needle_core::simlab::concentration::CSV_HEADER;
use needle_core::simlab::{
    chernoff_bound, concentration_trial, make_world, run_eval, BernoulliSampler, EvalConfig, MockEmbedder,
    MockGenerator, WorldConfig,
};
use needle_core::tiling::draw_tile_overlay;
use needle_core::{Embedder, Generator, ImageId};
use needle_service::{api, adapter_http, SearchRequest, Service, ServiceConfig, SessionState};
use serde_json::json;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "needle", version, about = "Image retrieval steered by generated guide images")]
pub struct Cli {
    /// Service config file. Falls back to $NEEDLE_CONFIG, then ./needle.toml.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Print JSON on stdout for every subcommand.
    #[arg(long, global = true)]
    json: bool,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tile and embed every image of a dataset, replacing nothing unless --force.
    Index {
        dataset: String,
        #[arg(long)]
        force: bool,
    },
    /// Run one query with feedback off and print the ranked results as JSON.
    Search(SearchArgs),
    /// Serve the HTTP API.
    Serve {
        /// Overrides the configured listen address.
        #[arg(long, value_name = "ADDR")]
        listen: Option<String>,
    },
    /// Synthetic experiments that need no config.
    #[command(subcommand)]
    Simulate(Simulate),
    /// Retrieval quality on a synthetic world with planted targets (JSON).
    Eval(EvalArgs),
    /// Draw the tile boundaries of one image and write its tile manifest.
    Tile {
        image: PathBuf,
        /// Overlay PNG to write.
        #[arg(long, value_name = "PNG")]
        out: PathBuf,
        /// Manifest path; defaults to the overlay path with a .json extension.
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
    },
    /// Serve a mock adapter over the adapter wire protocol.
    MockAdapter(MockAdapterArgs),
}

#[derive(Debug, Args)]
struct SearchArgs {
    text: String,
    #[arg(long)]
    topic: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    dataset: Option<String>,
    /// Only `off` is accepted; guide review needs the web UI.
    #[arg(long, value_enum, default_value_t = FeedbackArg::Off)]
    feedback: FeedbackArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FeedbackArg {
    Off,
}

#[derive(Debug, Subcommand)]
enum Simulate {
    /// Empirical deviation probability of the mean distance vs its analytic bound (CSV).
    Concentration {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also report the bound with m scaled by this many embedders
        /// (JSON field `bound_scaled`; informational only).
        #[arg(long, value_name = "L")]
        embedders: Option<usize>,
    },
    /// Write a synthetic world as PNG files plus world.json.
    World {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        world: WorldArgs,
    },
}

#[derive(Debug, Args)]
struct WorldArgs {
    #[arg(long = "world-seed", alias = "seed", default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    items: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 10)]
    concepts: usize,
    #[arg(long, default_value_t = 0.3)]
    sigma_item: f64,
}

impl WorldArgs {
    fn config(&self) -> WorldConfig {
        WorldConfig {
            seed: self.seed,
            n_items: self.items,
            latent_dim: self.dim,
            n_concepts: self.concepts,
            sigma_item: self.sigma_item,
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    world: WorldArgs,
    #[arg(long, default_value_t = 0.05)]
    sigma_gen: f64,
    #[arg(long, default_value_t = 0.05)]
    sigma_emb: f64,
    #[arg(long, default_value_t = 2)]
    embedders: usize,
    /// Guides per query.
    #[arg(long, default_value_t = 4)]
    m: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 50)]
    queries: usize,
}

#[derive(Debug, Args)]
struct MockAdapterArgs {
    #[arg(value_enum)]
    kind: AdapterKind,
    #[arg(long)]
    id: String,
    #[arg(long, default_value = "127.0.0.1:9000")]
    listen: String,
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    #[command(flatten)]
    world: WorldArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AdapterKind {
    Embedder,
    Generator,
}

/// A failure with its exit code.
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(m: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: m.into() }
    }
    fn domain(m: impl std::fmt::Display) -> Self {
        Self { code: EXIT_DOMAIN, message: m.to_string() }
    }
}

impl From<needle_service::ServiceError> for Failure {
    fn from(e: needle_service::ServiceError) -> Self {
        Self::domain(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::domain(e)
    }
}

type Outcome = Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    init_logging(cli.verbose);
    match dispatch(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .try_init();
}

fn print_json(out: &mut dyn Write, v: &impl serde::Serialize) -> Outcome {
    serde_json::to_writer_pretty(&mut *out, v).map_err(Failure::domain)?;
    writeln!(out)?;
    Ok(())
}

fn load_config(cli: &Cli) -> Result<ServiceConfig, Failure> {
    Ok(ServiceConfig::discover(cli.config.as_deref())?)
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Outcome {
    match &cli.command {
        Command::Index { dataset, force } => index(cli, out, dataset, *force),
        Command::Search(a) => search(cli, out, a),
        Command::Serve { listen } => {
            let mut config = load_config(cli)?;
            if let Some(l) = listen {
                config.listen = l.clone();
            }
            let svc = Arc::new(Service::new(config)?);
            api::run(svc)?;
            Ok(())
        }
        Command::Simulate(Simulate::Concentration {
            m,
            gamma,
            delta,
            trials,
            seed,
            embedders,
        }) => concentration(cli, out, *m, *gamma, *delta, *trials, *seed, *embedders),
        Command::Simulate(Simulate::World { out: dir, world }) => {
            let w = make_world(world.config()).map_err(Failure::domain)?;
            let n = w.export(dir)?;
            if cli.json {
                print_json(out, &json!({"dir": dir, "items": n, "concepts": w.concepts.len()}))
            } else {
                writeln!(out, "wrote {n} images to {}", dir.display())?;
                Ok(())
            }
        }
        Command::Eval(a) => {
            let config = EvalConfig {
                world: a.world.config(),
                sigma_gen: a.sigma_gen,
                sigma_emb: a.sigma_emb,
                embedders: a.embedders,
                m: a.m,
                k: a.k,
                queries: a.queries,
            };
            let report = run_eval(&config).map_err(Failure::domain)?;
            print_json(out, &report)
        }
        Command::Tile { image, out: png, manifest } => tile(cli, out, image, png, manifest.as_deref()),
        Command::MockAdapter(a) => mock_adapter(a),
    }
}

fn index(cli: &Cli, out: &mut dyn Write, dataset: &str, force: bool) -> Outcome {
    let svc = Service::new(load_config(cli)?)?;
    let view = svc.index_blocking(dataset, force, &|p| {
        log::debug!("{}/{} images, {} tiles", p.images_done, p.images_total, p.tiles_done);
    })?;
    if cli.json {
        print_json(out, &view)?;
    }
    match view.state {
        needle_service::JobState::Done => {
            if !cli.json {
                writeln!(out, "indexed {} images of {dataset}", view.count.unwrap_or(0))?;
            }
            Ok(())
        }
        _ => {
            let mut msg = view.error.clone().unwrap_or_else(|| "indexing failed".into());
            for e in &view.errors {
                msg.push_str(&format!("\n  {}: {}", e.file, e.message));
            }
            Err(Failure::domain(msg))
        }
    }
}

fn search(cli: &Cli, out: &mut dyn Write, a: &SearchArgs) -> Outcome {
    if a.text.trim().is_empty() {
        return Err(Failure::usage("query text must not be empty"));
    }
    if a.k == Some(0) {
        return Err(Failure::usage("--k must be at least 1"));
    }
    let FeedbackArg::Off = a.feedback;
    let svc = Service::new(load_config(cli)?)?;
    let view = svc.search(SearchRequest {
        text: a.text.clone(),
        topic: a.topic.clone(),
        k: a.k,
        feedback_mode: Some(FeedbackMode::Off),
        dataset: a.dataset.clone(),
    })?;
    if view.state != SessionState::Done {
        let msg = view.error.as_ref().map_or_else(|| format!("search ended in {:?}", view.state), |e| e.message.clone());
        return Err(Failure::domain(msg));
    }
    let ds = svc.dataset(&view.dataset)?;
    let results: Vec<_> = view
        .results
        .iter()
        .map(|r| {
            json!({
                "rank": r.rank,
                "image_id": r.image_id,
                "score": r.score,
                "file": ds.image_path(r.image_id),
            })
        })
        .collect();
    print_json(
        out,
        &json!({
            "query_id": view.query_id,
            "text": view.text,
            "topic": view.topic,
            "k": view.k,
            "dataset": view.dataset,
            "results": results,
            "guides": view.guides,
        }),
    )
}

#[allow(clippy::too_many_arguments)]
fn concentration(
    cli: &Cli,
    out: &mut dyn Write,
    m: usize,
    gamma: f64,
    delta: f64,
    trials: usize,
    seed: u64,
    embedders: Option<usize>,
) -> Outcome {
    let sampler = BernoulliSampler::new(delta).map_err(|e| Failure::usage(e.to_string()))?;
    let report = concentration_trial(m, gamma, delta, trials, &sampler, seed).map_err(|e| Failure::usage(e.to_string()))?;
    if cli.json {
        let mut v = serde_json::to_value(report).map_err(Failure::domain)?;
        if let Some(l) = embedders {
            v["bound_scaled"] = json!(chernoff_bound(m * l, gamma, delta));
        }
        print_json(out, &v)
    } else {
        writeln!(out, "{CSV_HEADER}")?;
        writeln!(out, "{}", report.csv_row())?;
        if let Some(l) = embedders {
            log::info!("bound with m*{l} samples: {:.6}", chernoff_bound(m * l, gamma, delta));
        }
        Ok(())
    }
}

fn tile(cli: &Cli, out: &mut dyn Write, image: &Path, png: &Path, manifest: Option<&Path>) -> Outcome {
    // Tiling parameters come from the config when one is reachable.
    let options = match load_config(cli) {
        Ok(c) => c.index_options(),
        Err(e) if cli.config.is_some() => return Err(e),
        Err(_) => Default::default(),
    };
    let bytes = std::fs::read(image).map_err(|e| Failure::domain(format!("{}: {e}", image.display())))?;
    let raster = decode_image(&bytes).map_err(|e| Failure::domain(format!("{}: {e}", image.display())))?;
    let entry = tile_image(ImageId(0), &raster, 0, &options).map_err(Failure::domain)?;
    let rects: Vec<_> = entry.tiles.iter().map(|t| t.rect()).collect();
    std::fs::write(png, encode_png(&draw_tile_overlay(&raster, &rects)))?;
    let manifest_path = manifest.map_or_else(|| png.with_extension("json"), Path::to_path_buf);
    let body = serde_json::to_vec_pretty(&[&entry]).map_err(Failure::domain)?;
    std::fs::write(&manifest_path, body)?;
    if cli.json {
        print_json(out, &entry)
    } else {
        writeln!(out, "{} tiles; overlay {}; manifest {}", entry.tiles.len(), png.display(), manifest_path.display())?;
        Ok(())
    }
}

fn mock_adapter(a: &MockAdapterArgs) -> Outcome {
    let world = make_world(a.world.config()).map_err(Failure::domain)?;
    let app = match a.kind {
        AdapterKind::Embedder => {
            let e: Arc<dyn Embedder> = Arc::new(MockEmbedder::for_world(&world, &a.id, a.sigma));
            adapter_http::embedder_router(e)
        }
        AdapterKind::Generator => {
            let g: Arc<dyn Generator> = Arc::new(MockGenerator::new(&a.id, world, a.sigma));
            adapter_http::generator_router(g)
        }
    };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.listen).await?;
        log::info!("mock {:?} {} on {}", a.kind, a.id, listener.local_addr()?);
        axum_serve(listener, app).await
    })?;
    Ok(())
}

async fn axum_serve(listener: tokio::net::TcpListener, app: needle_service::adapter_http::Router) -> std::io::Result<()> {
    needle_service::adapter_http::serve(listener, app, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}

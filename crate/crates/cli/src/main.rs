use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use palmscan_core::config::{AoiSpec, BackendSpec, ProviderSpec, SurveyConfig};
use palmscan_core::error::ProviderError;
use palmscan_core::gateway::backend::answer_manifest;
use palmscan_core::gateway::protocol::serve;
use palmscan_core::linker::write_catalog;
use palmscan_core::pipeline::{Stage, Survey};
use palmscan_core::planner::street_geojson;
use palmscan_core::sim::{
    generate_world, score_run, MockBackend, NoiseModel, SyntheticWorld, WorldParams,
};
use palmscan_core::Error;

#[derive(Parser)]
#[command(
    name = "palmscan",
    version,
    about = "Palm tree survey from aerial and street-level imagery"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Survey config file.
    #[arg(long, default_value = "palmscan.json")]
    config: PathBuf,
    /// Override the area of interest: `south,west,north,east` or a GeoJSON file.
    #[arg(long)]
    aoi: Option<String>,
    /// Override the worker pool width.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the tile and street-sample plans and print the projected cost.
    Plan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dry_run: bool,
    },
    /// Run one stage, or every stage in order.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage: Option<Stage>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Write GeoJSON, heatmaps, hotspots, timelines and the cost report.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Score the registry against a synthetic world.
    Score {
        #[command(flatten)]
        common: Common,
        /// World file; defaults to the simulated provider's world.
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Generate a synthetic world and a config that surveys it.
    Simulate(SimulateArgs),
    /// Serve the simulator's detector over stdin/stdout, or answer a request manifest.
    MockBackend {
        #[arg(long)]
        world: PathBuf,
        /// Noise model as a JSON file; zero noise when absent.
        #[arg(long)]
        noise: Option<PathBuf>,
        /// Answer `requests.jsonl` in this directory instead of serving stdio.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SimulateArgs {
    /// Output directory for world.json, streets.geojson, catalogs and config.json.
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    palms: Option<usize>,
    #[arg(long, default_value_t = 300.0)]
    width_m: f64,
    #[arg(long, default_value_t = 300.0)]
    height_m: f64,
    #[arg(long, default_value_t = 0.0)]
    miss_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    false_positive_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    bbox_jitter: f64,
    /// Run the detector as a `mock-backend` subprocess instead of in-process.
    #[arg(long)]
    stdio: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let core = e.chain().find_map(|c| c.downcast_ref::<Error>());
            if let Some(Error::Provider(p)) = core {
                eprintln!("{}", retry_guidance(p));
            }
            ExitCode::from(core.map_or(1, Error::exit_code) as u8)
        }
    }
}

fn retry_guidance(e: &ProviderError) -> &'static str {
    match e {
        ProviderError::Auth(_) => {
            "hint: check that the environment variable named by `provider.key_env` holds a valid key, then rerun the same stage"
        }
        ProviderError::Quota(_) => {
            "hint: quota or rate limit reached; wait for it to reset or lower `provider.rate_limit`, then rerun. Cached images are not fetched again"
        }
        _ => "hint: rerun the stage; images already in the cache are reused",
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Plan { common, dry_run } => {
            let survey = open(&common)?;
            let plan = survey.plan(dry_run)?;
            print_json(&plan)
        }
        Command::Run {
            common,
            stage,
            dry_run,
        } => {
            let survey = open(&common)?;
            let reports = match stage {
                Some(s) => vec![survey.run_stage(s, dry_run)?],
                None => survey.run_all(dry_run)?,
            };
            for r in &reports {
                for f in &r.failures {
                    log::warn!("{}: {} failed: {}", r.stage, f.image_ref, f.message);
                }
            }
            print_json(&reports)
        }
        Command::Report { common } => {
            let survey = open(&common)?;
            let r = survey.report()?;
            print_json(&r)
        }
        Command::Score { common, world } => {
            let cfg = load_config(&common)?;
            let world_path = match (world, &cfg.provider) {
                (Some(w), _) => w,
                (None, ProviderSpec::Simulated { world }) => world.clone(),
                _ => bail!("--world is required unless the provider is simulated"),
            };
            let world = SyntheticWorld::load(&world_path)?;
            let survey = Survey::open(cfg)?;
            print_json(&score_run(&world, &survey.trees()?))
        }
        Command::Simulate(args) => simulate(args),
        Command::MockBackend {
            world,
            noise,
            manifest,
        } => {
            let world = Arc::new(SyntheticWorld::load(&world)?);
            let noise = match noise {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text)
                        .with_context(|| format!("parsing {}", p.display()))?
                }
                None => NoiseModel::zero(),
            };
            let mock = MockBackend::new(world, noise)?;
            match manifest {
                Some(dir) => answer_manifest(&dir, &mock)?,
                None => {
                    let stdin = std::io::stdin();
                    serve(
                        &mock,
                        BufReader::new(stdin.lock()),
                        std::io::stdout().lock(),
                    )?;
                }
            }
            Ok(())
        }
    }
}

fn load_config(common: &Common) -> Result<SurveyConfig> {
    let mut cfg = SurveyConfig::load(&common.config)?;
    if let Some(a) = &common.aoi {
        cfg.aoi = Some(parse_aoi(a)?);
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_aoi(text: &str) -> Result<AoiSpec, Error> {
    let p = Path::new(text);
    if p.extension().is_some_and(|e| e == "geojson" || e == "json") {
        if !p.is_file() {
            return Err(Error::Config(format!("AOI file {} not found", p.display())));
        }
        return Ok(AoiSpec::File {
            geojson: p.to_path_buf(),
        });
    }
    AoiSpec::parse_box(text)
}

fn open(common: &Common) -> Result<Survey> {
    Ok(Survey::open(load_config(common)?)?)
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let params = WorldParams {
        palm_count: args.palms,
        width_m: args.width_m,
        height_m: args.height_m,
        ..WorldParams::default()
    };
    let noise = NoiseModel {
        miss_rate: args.miss_rate,
        false_positive_rate: args.false_positive_rate,
        bbox_jitter_sigma: args.bbox_jitter,
        ..NoiseModel::zero()
    };
    noise.validate()?;
    let world = generate_world(args.seed, &params)?;
    std::fs::create_dir_all(&args.dir)
        .with_context(|| format!("creating {}", args.dir.display()))?;
    let dir = args.dir.canonicalize()?;
    let world_path = dir.join("world.json");
    world.save(&world_path)?;
    std::fs::write(
        dir.join("streets.geojson"),
        street_geojson(&world.streets).to_string(),
    )?;
    let current: Vec<_> = world.current_panoramas().into_iter().cloned().collect();
    write_catalog(&dir.join("panoramas.jsonl"), &current)?;
    write_catalog(&dir.join("panoramas_history.jsonl"), &world.panoramas)?;

    let backend = if args.stdio {
        let exe = std::env::current_exe()?;
        let mut command = vec![
            exe.display().to_string(),
            "mock-backend".into(),
            "--world".into(),
        ];
        command.push(world_path.display().to_string());
        if noise != NoiseModel::zero() {
            let noise_path = dir.join("noise.json");
            std::fs::write(&noise_path, serde_json::to_string_pretty(&noise)?)?;
            command.extend(["--noise".into(), noise_path.display().to_string()]);
        }
        BackendSpec::Stdio {
            command,
            timeout_s: 30.0,
        }
    } else {
        BackendSpec::Mock {
            world: "world.json".into(),
            noise: noise.clone(),
        }
    };
    let config = serde_json::json!({
        "backend": backend,
        "provider": { "kind": "simulated", "world": "world.json" },
        "output_dir": "out",
        "cache_dir": "cache",
    });
    let config_path = dir.join("config.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&config)? + "\n")?;
    // refuse to leave behind a config that would not load
    SurveyConfig::load(&config_path)?;

    print_json(&serde_json::json!({
        "seed": world.seed,
        "palms": world.palms.len(),
        "visible_palms": world.visible_palms().len(),
        "panoramas": world.panoramas.len(),
        "config": config_path,
    }))
}

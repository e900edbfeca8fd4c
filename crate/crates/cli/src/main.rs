use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use rfsplat::io::{encode_f32, read_dataset, write_dataset, SceneCheckpoint, Split, Target};
use rfsplat::oracle::{
    bench_scene, generate_dataset, gradcheck, gradcheck_case, naive_render, GenerateConfig, GradcheckConfig,
    GradcheckReport,
};
use rfsplat::render::{PreparedScene, RenderPlan, SpectrumFrame};
use rfsplat::scene::AngularGrid;
use rfsplat::train::{evaluate, initial_scene, trace_csv, train_loop, TrainConfig};
use rfsplat::Vec3;

#[derive(Parser)]
#[command(name = "rfsplat", version, about = "Complex-valued Gaussian splatting for RF scenes")]
struct Cli {
    /// JSON configuration file (generate: dataset config, train: training config).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for rendering and gradients.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset from the multipath oracle or a teacher scene.
    Generate,
    /// Fit a scene to a dataset.
    Train(TrainArgs),
    /// Render a checkpoint for one transmitter position.
    Render(RenderArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences on random scenes.
    Gradcheck(GradcheckArgs),
    /// Time the naive and tiled renderers.
    Bench(BenchArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    /// Resume from a checkpoint instead of the cube initialization.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Transmitter position `x,y,z`.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    tx: Vec3,
    /// Use the brute-force renderer.
    #[arg(long)]
    naive: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Also write predicted and target spectra as gnuplot matrices.
    #[arg(long)]
    plot: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    scenes: usize,
    /// Gaussians per scene.
    #[arg(long, default_value_t = 20)]
    gaussians: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Scene sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,1000,10000")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 360)]
    n_az: usize,
    #[arg(long, default_value_t = 90)]
    n_el: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Check(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<rfsplat::Error> for Failure {
    fn from(e: rfsplat::Error) -> Self {
        Failure::Data(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn parse_vec3(s: &str) -> Result<Vec3, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, z] => Ok(Vec3::new(x, y, z)),
        _ => Err(format!("expected x,y,z, got {} values", v.len())),
    }
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let bytes = fs::read(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Usage)?;
    rfsplat::io::from_json(&bytes)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(Failure::Usage)
}

fn out_dir(cli: &Cli) -> Result<&Path, Failure> {
    let dir = cli
        .out
        .as_deref()
        .ok_or_else(|| Failure::Usage(anyhow!("--out is required for this command")))?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Spectrum as a gnuplot matrix: one line per elevation row.
fn gnuplot_matrix(frame: &SpectrumFrame) -> String {
    let mut s = String::new();
    for v in 0..frame.n_el {
        let row: Vec<String> = (0..frame.n_az).map(|u| format!("{:e}", frame.get(u, v))).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

fn cmd_generate(cli: &Cli) -> Outcome {
    let mut cfg: GenerateConfig = read_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.into()))?;
    let dir = out_dir(cli)?;
    let data = generate_dataset(&cfg)?;
    write_dataset(dir, &data)?;
    info!("wrote {} samples to {}", data.samples.len(), dir.display());
    Ok(())
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Outcome {
    let mut cfg: TrainConfig = read_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.iterations {
        cfg.iterations = n;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.into()))?;
    let data = read_dataset(&args.data)?;
    let dir = out_dir(cli)?;
    let mut scene = match &args.init {
        Some(path) => SceneCheckpoint::load(path)?.scene,
        None => initial_scene(&data, &cfg)?,
    };
    let ckpt_dir = dir.join("checkpoints");
    let summary = train_loop(&mut scene, &data, &cfg, Some(&ckpt_dir))?;
    SceneCheckpoint::new(cfg.iterations, &cfg, &scene).save(&dir.join("checkpoint.json"))?;
    fs::write(dir.join("loss.csv"), trace_csv(&summary.trace))?;
    if let (Some(first), Some(last)) = (summary.trace.first(), summary.trace.last()) {
        info!("loss {:.4e} -> {:.4e}", first.total, last.total);
    }
    info!(
        "{} primitives ({} cloned, {} split, {} pruned)",
        scene.len(),
        summary.cloned,
        summary.split,
        summary.pruned
    );
    Ok(())
}

fn cmd_render(cli: &Cli, args: &RenderArgs) -> Outcome {
    let scene = SceneCheckpoint::load(&args.checkpoint)?.scene;
    let dir = out_dir(cli)?;
    let frame = if args.naive {
        naive_render(&PreparedScene::new(&scene, &args.tx)?)
    } else {
        RenderPlan::new(&scene, &args.tx)?.render()
    };
    let power = frame.power();
    fs::write(dir.join("spectrum.f32"), encode_f32(power.data.iter().copied())).context("writing spectrum")?;
    fs::write(dir.join("spectrum.dat"), gnuplot_matrix(&power)).context("writing spectrum")?;
    if let Some(((u, v), p)) = power.argmax() {
        println!("peak {p:e} at ({u}, {v})");
    }
    Ok(())
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Outcome {
    let scene = SceneCheckpoint::load(&args.checkpoint)?.scene;
    let data = read_dataset(&args.data)?;
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let report = evaluate(&scene, &data, split)?;
    match &cli.out {
        Some(_) => {
            let dir = out_dir(cli)?;
            write_json(&dir.join("eval.json"), &report)?;
            if args.plot {
                let plots = dir.join("plots");
                fs::create_dir_all(&plots)?;
                for s in data.split(split) {
                    if let Target::Spectrum(gt) = &s.target {
                        let pred = RenderPlan::new(&scene, &s.tx)?.render().power();
                        fs::write(plots.join(format!("{}_pred.dat", s.id)), gnuplot_matrix(&pred))?;
                        fs::write(plots.join(format!("{}_gt.dat", s.id)), gnuplot_matrix(gt))?;
                    }
                }
            }
        }
        None => println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?
        ),
    }
    Ok(())
}

fn cmd_gradcheck(cli: &Cli, args: &GradcheckArgs) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0));
    let cfg = GradcheckConfig::default();
    let mut total = GradcheckReport { classes: Vec::new() };
    for _ in 0..args.scenes {
        let (scene, tx, gt) = gradcheck_case(&mut rng, args.gaussians)?;
        total.merge(&gradcheck(&scene, &tx, &gt, &cfg)?);
    }
    for c in &total.classes {
        println!(
            "{:<12} max_rel_err {:.3e}  tol {:.0e}  checked {:>6}  skipped {:>4}  kinks {:>4}  {}",
            c.class,
            c.max_rel_err,
            c.tolerance,
            c.checked,
            c.skipped,
            c.kinks,
            if c.passed() { "PASS" } else { "FAIL" }
        );
    }
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir).map_err(anyhow::Error::from)?;
        write_json(&dir.join("gradcheck.json"), &total)?;
    }
    if total.passed() {
        Ok(())
    } else {
        Err(Failure::Check("gradient check failed".into()))
    }
}

#[derive(Serialize)]
struct BenchRow {
    gaussians: usize,
    naive_s: f64,
    tiled_s: f64,
    speedup: Option<f64>,
}

fn best_of(repeats: usize, mut f: impl FnMut()) -> f64 {
    (0..repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

fn cmd_bench(cli: &Cli, args: &BenchArgs) -> Outcome {
    let grid = AngularGrid::degrees(args.n_az, args.n_el).map_err(|e| Failure::Usage(e.into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0));
    let tx = Vec3::new(5.0, 3.0, 1.0);
    let mut rows = Vec::new();
    println!(
        "{:>10} {:>12} {:>12} {:>8}",
        "gaussians", "naive_s", "tiled_s", "speedup"
    );
    for &n in &args.sizes {
        let scene = bench_scene(&mut rng, n, grid);
        let prepared = PreparedScene::new(&scene, &tx)?;
        let naive_s = best_of(args.repeats, || {
            naive_render(&prepared);
        });
        let plan = RenderPlan::new(&scene, &tx)?;
        let tiled_s = best_of(args.repeats, || {
            plan.render();
        });
        let speedup = (n > 0 && tiled_s > 0.0).then(|| naive_s / tiled_s);
        let shown = speedup.map_or("n/a".to_string(), |s| format!("{s:.2}"));
        println!("{n:>10} {naive_s:>12.4e} {tiled_s:>12.4e} {shown:>8}");
        rows.push(BenchRow {
            gaussians: n,
            naive_s,
            tiled_s,
            speedup,
        });
    }
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir).map_err(anyhow::Error::from)?;
        write_json(&dir.join("bench.json"), &rows)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Outcome {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Failure::Usage(anyhow!("--workers must be at least 1")));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            warn!("worker pool already initialized: {e}");
        }
    }
    match &cli.command {
        Command::Generate => cmd_generate(cli),
        Command::Train(a) => cmd_train(cli, a),
        Command::Render(a) => cmd_render(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Gradcheck(a) => cmd_gradcheck(cli, a),
        Command::Bench(a) => cmd_bench(cli, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(3)
        }
    }
}

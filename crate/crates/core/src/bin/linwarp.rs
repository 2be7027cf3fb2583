use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use linwarp::harness::experiment::{self, ExperimentResult, ExperimentSpec, ImageSource};
use linwarp::harness::{
    gen_texture, gradfield, make_alignment_pair, optimize_alignment, sample_perturbation, OptimizerConfig,
};
use linwarp::raster::io::{load_image, save_image};
use linwarp::{rng, AffineParams, Error, Image, LinearizationConfig, Result, SamplerKind, SigmaPolicy};

#[derive(Parser)]
#[command(name = "linwarp", version, about = "Differentiable image warping and alignment experiments")]
struct Cli {
    /// Worker threads for trial-level parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Align one target to its source and print the trajectory as CSV.
    Align(AlignArgs),
    /// Run a trial matrix from a JSON spec and report sampler timings.
    Bench(BenchArgs),
    /// Negative translation gradients on a grid of offsets, as CSV.
    Gradfield(GradfieldArgs),
    /// Sweep the auxiliary-sample spread (in output pixels).
    AblateSigma(AblateArgs),
    /// Sweep the total sample count K.
    AblateK(AblateArgs),
    /// Collapse prevention on vs off under zoom-in.
    AblateCollapse(AblateArgs),
    /// Write a seeded synthetic texture.
    GenTexture(GenTextureArgs),
}

#[derive(Args)]
struct SourceArgs {
    /// Source image (PGM, PPM or PNG).
    #[arg(long, conflicts_with = "texture")]
    src: Option<PathBuf>,
    /// Use a generated texture with this seed instead of a file.
    #[arg(long)]
    texture: Option<u64>,
    #[arg(long, default_value_t = 96)]
    size: usize,
}

impl SourceArgs {
    fn load(&self) -> Result<Image> {
        match (&self.src, self.texture) {
            (Some(p), _) => load_image(p),
            (None, seed) => gen_texture(seed.unwrap_or(0), self.size, self.size, 1),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerName {
    Bilinear,
    Multiscale,
    Linearized,
}

#[derive(Args)]
struct SamplerArgs {
    #[arg(long, value_enum, default_value = "linearized")]
    sampler: SamplerName,
    /// Total samples per pixel, center included.
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Auxiliary spread in output pixels.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 1e-6)]
    epsilon: f64,
    #[arg(long)]
    no_collapse_prevention: bool,
    /// Add the fitted bias to the forward output.
    #[arg(long)]
    bias: bool,
    #[arg(long, default_value_t = 0)]
    sampler_seed: u64,
    /// Blur levels for the multi-scale sampler.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    stds: Vec<f64>,
}

impl SamplerArgs {
    fn kind(&self) -> SamplerKind {
        match self.sampler {
            SamplerName::Bilinear => SamplerKind::Bilinear,
            SamplerName::Multiscale => SamplerKind::Multiscale { stds: self.stds.clone() },
            SamplerName::Linearized => SamplerKind::Linearized(LinearizationConfig {
                k: self.k,
                sigma: SigmaPolicy::OutputPixel { multiplier: self.sigma },
                epsilon: self.epsilon,
                collapse_prevention: !self.no_collapse_prevention,
                include_bias: self.bias,
                seed: self.sampler_seed,
            }),
        }
    }
}

#[derive(Args)]
struct AlignArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
    /// Ground-truth warp as tx,ty,rot,log_sx,log_sy; drawn at random when omitted.
    #[arg(long, allow_hyphen_values = true)]
    gt: Option<AffineParams>,
    #[arg(long, allow_hyphen_values = true)]
    init: Option<AffineParams>,
    #[arg(long, default_value_t = 0)]
    perturb_seed: u64,
    #[arg(long, default_value_t = 1.0)]
    perturb_scale: f64,
    #[arg(long, default_value_t = 4.0)]
    factor: f64,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 1000)]
    max_iters: usize,
    /// Keep the linearized sampler's random samples fixed across iterations.
    #[arg(long)]
    fixed_noise: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON experiment spec.
    #[arg(long)]
    spec: PathBuf,
    /// Directory for trials.csv and recall.csv.
    #[arg(long)]
    out: PathBuf,
    /// Forward/backward calls per sampler for timing; 0 skips timing.
    #[arg(long, default_value_t = 20)]
    timing_calls: usize,
}

#[derive(Args)]
struct GradfieldArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long, default_value_t = 4.0)]
    factor: f64,
    /// Generate the target from the central two-thirds of the source.
    #[arg(long)]
    crop: bool,
    /// Half-width of the offset grid in normalized units.
    #[arg(long, default_value_t = 0.5)]
    extent: f64,
    /// Grid points per axis.
    #[arg(long, default_value_t = 11)]
    n: usize,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Base JSON spec (images, trials, optimizer, linearized settings).
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Sweep values; defaults depend on the ablation.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Args)]
struct GenTextureArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 96)]
    height: usize,
    #[arg(long, default_value_t = 96)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Align(a) => align(a),
        Command::Bench(a) => bench(a),
        Command::Gradfield(a) => gradfield_cmd(a),
        Command::AblateSigma(a) => ablate(a, Ablation::Sigma),
        Command::AblateK(a) => ablate(a, Ablation::K),
        Command::AblateCollapse(a) => ablate(a, Ablation::Collapse),
        Command::GenTexture(a) => gen_texture(a.seed, a.height, a.width, a.channels).and_then(|t| save_image(&t, &a.out)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn align(a: AlignArgs) -> Result<()> {
    let src = a.source.load()?;
    let gt = match a.gt {
        Some(gt) => gt,
        None => sample_perturbation(&mut rng::substream(a.perturb_seed, rng::tag::PERTURBATION, 0), a.perturb_scale),
    };
    let init = a.init.unwrap_or(AffineParams::IDENTITY);
    let target = make_alignment_pair(&src, &gt, a.factor)?;
    let opt = OptimizerConfig {
        learning_rate: a.lr,
        max_iters: a.max_iters,
        resample_noise: !a.fixed_noise,
        ..Default::default()
    };
    let report = optimize_alignment(&src, &target, &init, &a.sampler.kind(), &opt, Some(&gt))?;

    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let io_err = |e: io::Error| Error::Write { path: "<stdout>".into(), source: e };
    writeln!(out, "iteration,loss,tx,ty,rot,log_sx,log_sy").map_err(io_err)?;
    for p in &report.trajectory {
        writeln!(out, "{},{},{}", p.iteration, p.loss, p.params).map_err(io_err)?;
    }
    out.flush().map_err(io_err)?;
    eprintln!("gt: {gt}");
    eprintln!("final: {}", report.final_params);
    eprintln!(
        "iterations: {}  final loss: {:.3e}  corner error: {:.3} px  stop: {:?}",
        report.iterations(),
        report.final_loss,
        report.final_error_px.unwrap_or(f64::NAN),
        report.stop
    );
    Ok(())
}

fn spec_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn write_results(res: &ExperimentResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Write { path: dir.to_path_buf(), source: e })?;
    let create = |name: &str| {
        let p = dir.join(name);
        File::create(&p).map(BufWriter::new).map_err(|e| Error::Write { path: p, source: e })
    };
    res.write_trials_csv(create("trials.csv")?)?;
    res.write_recall_csv(create("recall.csv")?)?;
    Ok(())
}

fn print_summary(spec: &ExperimentSpec, res: &ExperimentResult) {
    println!("sampler,downsample_factor,recall@1px,recall@10px,recall@20px,mean_error_px,aborted");
    for s in &spec.samplers {
        for &f in &spec.downsample_factors {
            let l = s.label();
            println!(
                "{l},{f},{:.3},{:.3},{:.3},{:.3},{}",
                res.recall_at(l, f, 1.0),
                res.recall_at(l, f, 10.0),
                res.recall_at(l, f, 20.0),
                res.mean_error(l, f),
                res.aborted(l, f)
            );
        }
    }
}

fn bench(a: BenchArgs) -> Result<()> {
    let spec = ExperimentSpec::load(&a.spec)?;
    let base = spec_dir(&a.spec);
    let res = experiment::run_experiment(&spec, base)?;
    write_results(&res, &a.out)?;
    print_summary(&spec, &res);
    if a.timing_calls > 0 {
        println!();
        println!("sampler,downsample_factor,forward_ms,backward_ms");
        for t in experiment::time_samplers(&spec, base, a.timing_calls)? {
            println!("{},{},{:.4},{:.4}", t.sampler, t.downsample_factor, t.forward_ms, t.backward_ms);
        }
    }
    Ok(())
}

fn gradfield_cmd(a: GradfieldArgs) -> Result<()> {
    let src = a.source.load()?;
    let base = if a.crop {
        let s = (2.0f64 / 3.0).ln();
        AffineParams::new(0.0, 0.0, 0.0, s, s)
    } else {
        AffineParams::IDENTITY
    };
    let target = make_alignment_pair(&src, &base, a.factor)?;
    let grid = gradfield::square_grid(a.extent, a.n);
    let rows = gradfield::gradient_field(&src, &target, &a.sampler.kind(), &base, &grid)?;

    let (sink, path): (Box<dyn Write>, PathBuf) = match &a.out {
        Some(p) => (Box::new(File::create(p).map_err(|e| Error::Write { path: p.clone(), source: e })?), p.clone()),
        None => (Box::new(io::stdout()), "<stdout>".into()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for r in &rows {
        w.serialize(r).map_err(|e| Error::InvalidParams(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::Write { path, source: e })
}

enum Ablation {
    Sigma,
    K,
    Collapse,
}

fn ablate(a: AblateArgs, which: Ablation) -> Result<()> {
    let (mut base, dir) = match &a.spec {
        Some(p) => (ExperimentSpec::load(p)?, spec_dir(p).to_path_buf()),
        None => (
            ExperimentSpec { images: (0..4).map(ImageSource::texture).collect(), ..Default::default() },
            PathBuf::from("."),
        ),
    };
    if let Some(t) = a.trials {
        base.trials = t;
        base.seeds = None;
    }
    let or = |d: &[f64]| if a.values.is_empty() { d.to_vec() } else { a.values.clone() };
    let spec = match which {
        Ablation::Sigma => experiment::sigma_ablation(&base, &or(&[1.0, 3.0, 6.0])),
        Ablation::K => {
            let ks = or(&[4.0, 8.0, 16.0]);
            if let Some(bad) = ks.iter().find(|k| k.fract() != 0.0 || **k < 2.0) {
                return Err(Error::InvalidSpec(format!("K must be an integer >= 2, got {bad}")));
            }
            experiment::k_ablation(&base, &ks.iter().map(|&k| k as usize).collect::<Vec<_>>())
        }
        Ablation::Collapse => experiment::collapse_ablation(&base, or(&[4.0])[0]),
    };
    let res = experiment::run_experiment(&spec, &dir)?;
    write_results(&res, &a.out)?;
    print_summary(&spec, &res);
    Ok(())
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use refsim_core::eval::{Pipeline, RefMode};
use refsim_core::generative::{LossRegion, SimulateMode};
use refsim_core::imagecore::texture::TextureKind;

mod commands;
mod config;
mod error;

use config::RunConfig;
use error::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "refsim",
    version,
    about = "Simulated reference images for reference-based defect detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an inpainting or VAE reference generator on nominal images.
    TrainGenerator(TrainGeneratorArgs),
    /// Write one simulated reference PNG per input image.
    Simulate(SimulateArgs),
    /// Train the supervised pair segmenter on labeled test items.
    TrainSegmenter(TrainSegmenterArgs),
    /// Build a patch-feature memory bank from nominal images.
    BuildBank(BuildBankArgs),
    /// Run one detector over unlabeled candidate images.
    Detect(DetectArgs),
    /// Run one pipeline and reference mode over a labeled dataset.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic textured dataset.
    MakeSynth(MakeSynthArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Inpaint,
    Vae,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PipelineArg {
    Classic,
    Supervised,
    Membank,
}

impl From<PipelineArg> for Pipeline {
    fn from(p: PipelineArg) -> Self {
        match p {
            PipelineArg::Classic => Pipeline::Classic,
            PipelineArg::Supervised => Pipeline::Supervised,
            PipelineArg::Membank => Pipeline::Membank,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RefModeArg {
    Real,
    SimulatedInpaint,
    SimulatedVae,
}

impl From<RefModeArg> for RefMode {
    fn from(m: RefModeArg) -> Self {
        match m {
            RefModeArg::Real => RefMode::Real,
            RefModeArg::SimulatedInpaint => RefMode::SimulatedInpaint,
            RefModeArg::SimulatedVae => RefMode::SimulatedVae,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SimModeArg {
    Unmasked,
    MaskedStitch,
}

impl From<SimModeArg> for SimulateMode {
    fn from(m: SimModeArg) -> Self {
        match m {
            SimModeArg::Unmasked => SimulateMode::Unmasked,
            SimModeArg::MaskedStitch => SimulateMode::MaskedStitch,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TextureArg {
    Stripes,
    Blobs,
    Grid,
}

impl From<TextureArg> for TextureKind {
    fn from(t: TextureArg) -> Self {
        match t {
            TextureArg::Stripes => TextureKind::Stripes,
            TextureArg::Blobs => TextureKind::Blobs,
            TextureArg::Grid => TextureKind::Grid,
        }
    }
}

/// Options shared by the commands that read a run config.
#[derive(Args, Debug, Default)]
struct Common {
    /// Run config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Synthetic-dataset JSON or MVTec-style directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides every module seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Resample dataset images to SIZE x SIZE while loading.
    #[arg(long)]
    resize: Option<usize>,
    #[arg(long)]
    grayscale: bool,
}

#[derive(Args, Debug, Default)]
struct Models {
    #[arg(long)]
    inpainter: Option<PathBuf>,
    #[arg(long)]
    vae: Option<PathBuf>,
    /// Encoder checkpoint for feature extraction (defaults to --inpainter).
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Precomputed feature grids in the RSFG format.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    segmenter: Option<PathBuf>,
    #[arg(long)]
    bank: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainGeneratorArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[command(flatten)]
    common: Common,
    /// Train on every PNG in a plain directory instead of a dataset's nominal split.
    #[arg(long, conflicts_with = "data")]
    images: Option<PathBuf>,
    /// Acknowledge that an --images trainset is not verified defect-free.
    #[arg(long)]
    accept_possible_defects: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, value_enum)]
    loss_region: Option<LossRegionArg>,
    /// Test-time mode stored in the inpainter checkpoint.
    #[arg(long, value_enum)]
    simulate_mode: Option<SimModeArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossRegionArg {
    Full,
    Hidden,
}

impl From<LossRegionArg> for LossRegion {
    fn from(r: LossRegionArg) -> Self {
        match r {
            LossRegionArg::Full => LossRegion::Full,
            LossRegionArg::Hidden => LossRegion::Hidden,
        }
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A PNG file or a directory of PNGs.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<SimModeArg>,
}

#[derive(Args, Debug)]
struct TrainSegmenterArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    models: Models,
    #[arg(long, value_enum)]
    ref_mode: Option<RefModeArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct BuildBankArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    models: Models,
    #[arg(long, conflicts_with = "data")]
    images: Option<PathBuf>,
    #[arg(long)]
    accept_possible_defects: bool,
    /// Simulate every bank image first (simulated-* modes).
    #[arg(long, value_enum)]
    ref_mode: Option<RefModeArg>,
    /// Encoder layer: enc1 .. enc4.
    #[arg(long)]
    layer: Option<String>,
    /// Greedy coreset fraction in (0, 1].
    #[arg(long, conflicts_with = "no_coreset")]
    coreset: Option<f64>,
    #[arg(long)]
    no_coreset: bool,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    models: Models,
    #[arg(long, value_enum)]
    pipeline: Option<PipelineArg>,
    #[arg(long, value_enum)]
    ref_mode: Option<RefModeArg>,
    /// Candidate PNG or directory of PNGs.
    #[arg(long)]
    input: PathBuf,
    /// Real references with the same file names as the candidates.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Membank decision threshold (defaults to the bank's calibration).
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    models: Models,
    #[arg(long, value_enum)]
    pipeline: Option<PipelineArg>,
    #[arg(long, value_enum)]
    ref_mode: Option<RefModeArg>,
    #[arg(long, value_enum)]
    simulate_mode: Option<SimModeArg>,
    /// Align real references to candidates before differencing (classic).
    #[arg(long)]
    register: bool,
}

#[derive(Args, Debug)]
struct MakeSynthArgs {
    /// A `.json` path writes only the config; otherwise an MVTec-style tree plus `synth.json`.
    #[arg(long)]
    out: PathBuf,
    /// Synthetic-dataset config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    texture: Option<TextureArg>,
    /// Square image side.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_defective: Option<usize>,
    #[arg(long)]
    n_nominal: Option<usize>,
    #[arg(long)]
    defect_delta: Option<f64>,
    #[arg(long)]
    ref_noise_sigma: Option<f64>,
    #[arg(long)]
    ref_misalign_px: Option<u32>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if let Some(s) = self.resize {
            cfg.mvtec.resize = Some((s, s));
        }
        if self.grayscale {
            cfg.mvtec.grayscale = true;
        }
        cfg.apply_seed();
        Ok(cfg)
    }
}

impl Models {
    fn apply(&self, cfg: &mut RunConfig) {
        let m = &mut cfg.models;
        for (flag, field) in [
            (&self.inpainter, &mut m.inpainter),
            (&self.vae, &mut m.vae),
            (&self.backbone, &mut m.backbone),
            (&self.features, &mut m.features),
            (&self.segmenter, &mut m.segmenter),
            (&self.bank, &mut m.bank),
        ] {
            if flag.is_some() {
                field.clone_from(flag);
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::TrainGenerator(a) => commands::train_generator(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::TrainSegmenter(a) => commands::train_segmenter(a),
        Command::BuildBank(a) => commands::build_bank(a),
        Command::Detect(a) => commands::detect(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::MakeSynth(a) => commands::make_synth(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    refsim_core::util::init_thread_pool();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

//! Command-line front end: corpus synthesis, training, inference,
//! evaluation, classical baselines and ablation sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use stripeclean_core::attention::COMBINATIONS;
use stripeclean_core::baselines::{
    gf_destripe, mhe_destripe, GuidedFilterParams, MHE_DEFAULT_HALF_WIDTH,
};
use stripeclean_core::degrade::{
    builtin_textures, load_sources, make_corpus, Augment, Corpus, CorpusConfig, NoiseKind,
    NoiseSampler,
};
use stripeclean_core::evaluation::{compare_dirs, infer_padded, psnr, ssim};
use stripeclean_core::gray::{list_images, read_gray, write_png16, ImageGray};
use stripeclean_core::model::{Checkpoint, Model, ModelConfig, LAYOUTS, RHDWT_VARIANTS};
use stripeclean_core::train::{split_validation, train, Pair, TrainConfig, TrainState};

pub const MANIFEST_FILE: &str = "run_manifest.txt";
pub const ABLATION_HEADER: &str = "variant,psnr,ssim,params,ms_per_iter";

#[derive(Parser, Debug)]
#[command(
    name = "stripeclean",
    version,
    about = "Column-stripe removal for grayscale images"
)]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true, env = "STRIPECLEAN_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Cut clean patches and corrupt them with synthetic stripes.
    Synth(SynthArgs),
    /// Train a restoration network on a corpus.
    Train(TrainArgs),
    /// Restore images with a trained checkpoint.
    Infer(InferArgs),
    /// Score restored images against references.
    Eval(EvalArgs),
    /// Run a training-free destriping method.
    Baseline(BaselineArgs),
    /// Train every variant of an ablation suite under one budget.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["clean_dir", "builtin"])))]
pub struct SynthArgs {
    /// Directory of clean grayscale images.
    #[arg(long)]
    pub clean_dir: Option<PathBuf>,
    /// Use this many generated textures instead of files.
    #[arg(long)]
    pub builtin: Option<usize>,
    /// Side of the generated textures.
    #[arg(long, default_value_t = 128)]
    pub builtin_size: usize,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub patch: usize,
    #[arg(long, value_enum, default_value_t = NoiseFamily::Gaussian)]
    pub noise: NoiseFamily,
    /// Comma-separated family parameters (gaussian: sigma; uniform: mu;
    /// periodic: period,amp_min,amp_max; poly3: s1,s2,s3).
    #[arg(long, value_delimiter = ',')]
    pub params: Vec<f64>,
    /// Use the parameters as given for every record instead of scaling
    /// them by a uniform draw in [0, 1].
    #[arg(long)]
    pub fixed_level: bool,
    /// Add rotated, flipped and rescaled variants of every crop.
    #[arg(long)]
    pub augment: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseFamily {
    Gaussian,
    Uniform,
    Periodic,
    Poly3,
}

impl NoiseFamily {
    fn name(self) -> &'static str {
        match self {
            NoiseFamily::Gaussian => "gaussian",
            NoiseFamily::Uniform => "uniform",
            NoiseFamily::Periodic => "periodic",
            NoiseFamily::Poly3 => "poly3",
        }
    }

    fn default_params(self) -> Vec<f64> {
        match self {
            NoiseFamily::Gaussian | NoiseFamily::Uniform => vec![0.1],
            NoiseFamily::Periodic => vec![8.0, 0.02, 0.05],
            NoiseFamily::Poly3 => vec![0.1, 0.1, 0.1],
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Preset name (arcnet, light, desk, toy) or a key=value config file.
    #[arg(long, default_value = "desk")]
    pub config: String,
    /// Sampler layout override (S0-S3, A1-A3).
    #[arg(long)]
    pub layout: Option<String>,
    /// Wavelet sampler wiring override (V1-V3).
    #[arg(long)]
    pub rhdwt: Option<String>,
    /// Attention branch combination override (K1-K6).
    #[arg(long)]
    pub branches: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub lr_min: f64,
    #[arg(long, default_value_t = 0.05)]
    pub val_fraction: f64,
    /// Keep a numbered checkpoint every this many epochs.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a training checkpoint; its model config wins.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// An image file or a directory of images.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Per-image CSV report.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Mhe,
    Gf,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Column half-width for mhe.
    #[arg(long, default_value_t = MHE_DEFAULT_HALF_WIDTH)]
    pub k: usize,
    /// Window radius for gf.
    #[arg(long, default_value_t = 8)]
    pub radius: usize,
    /// Regularization for gf.
    #[arg(long, default_value_t = 1e-3)]
    pub eps: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Sampling,
    Rhdwt,
    Branches,
}

impl Suite {
    pub fn variants(self) -> &'static [&'static str] {
        match self {
            Suite::Sampling => &LAYOUTS,
            Suite::Rhdwt => &RHDWT_VARIANTS,
            Suite::Branches => &COMBINATIONS,
        }
    }

    pub fn config(self, base: ModelConfig, variant: &str) -> stripeclean_core::Result<ModelConfig> {
        match self {
            Suite::Sampling => base.with_layout(variant),
            Suite::Rhdwt => base.with_rhdwt(variant),
            Suite::Branches => base.with_branches(variant),
        }
    }
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub suite: Suite,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Training epochs per variant.
    #[arg(long, default_value_t = 2)]
    pub budget: usize,
    /// Preset every variant starts from.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.05)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// A failure to be reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Exit status for an error: 2 for usage, configuration and dimension
/// problems, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<stripeclean_core::Error>() {
            return match e {
                stripeclean_core::Error::Config { .. }
                | stripeclean_core::Error::Dimension { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

/// Provenance record written into every output directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub command: String,
    /// The full argument vector, for re-running.
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub version: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Free-form `key=value` configuration lines.
    pub config: String,
    pub wall_seconds: f64,
}

impl RunManifest {
    fn new(command: &str, argv: &[String]) -> Self {
        Self {
            command: command.into(),
            argv: argv.to_vec(),
            version: env!("CARGO_PKG_VERSION").into(),
            ..Default::default()
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command={}", self.command);
        let _ = writeln!(s, "argv={}", self.argv.join("\t"));
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "seed={seed}");
        }
        let _ = writeln!(s, "version={}", self.version);
        for p in &self.inputs {
            let _ = writeln!(s, "input={}", p.display());
        }
        for p in &self.outputs {
            let _ = writeln!(s, "output={}", p.display());
        }
        let _ = writeln!(s, "wall_seconds={:.3}", self.wall_seconds);
        for line in self.config.lines() {
            let _ = writeln!(s, "config.{line}");
        }
        s
    }

    /// Reads back the argument vector stored by [`RunManifest::to_text`].
    pub fn argv_from_text(text: &str) -> Option<Vec<String>> {
        let line = text.lines().find_map(|l| l.strip_prefix("argv="))?;
        Some(line.split('\t').map(String::from).collect())
    }

    fn write(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn run_from_args(argv: &[String]) -> anyhow::Result<()> {
    let cli = Cli::try_parse_from(argv).map_err(|e| UsageError(e.to_string()))?;
    run(cli, argv)
}

pub fn run(cli: Cli, argv: &[String]) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(UsageError("--threads must be at least 1".into()));
        }
        // a second call in the same process keeps the first pool
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            log::debug!("thread pool already configured");
        }
    }
    let start = Instant::now();
    let mut manifest = match &cli.command {
        Command::Synth(a) => synth(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Infer(a) => infer(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Baseline(a) => baseline(a)?,
        Command::Ablate(a) => ablate(a)?,
    };
    let args = RunManifest::new(&manifest.command, argv);
    manifest.argv = args.argv;
    manifest.version = args.version;
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    let dir = match &cli.command {
        Command::Eval(a) => a.report.parent().map(Path::to_path_buf).unwrap_or_default(),
        Command::Synth(SynthArgs { out, .. })
        | Command::Train(TrainArgs { out, .. })
        | Command::Infer(InferArgs { out, .. })
        | Command::Baseline(BaselineArgs { out, .. })
        | Command::Ablate(AblateArgs { out, .. }) => out.clone(),
    };
    manifest.write(if dir.as_os_str().is_empty() {
        Path::new(".")
    } else {
        &dir
    })
}

fn synth(a: &SynthArgs) -> anyhow::Result<RunManifest> {
    let params = if a.params.is_empty() {
        a.noise.default_params()
    } else {
        a.params.clone()
    };
    let kind = NoiseKind::from_parts(a.noise.name(), &params)?;
    let sources: Vec<(String, ImageGray)> = match (&a.clean_dir, a.builtin) {
        (Some(dir), _) => load_sources(dir)?,
        (None, Some(n)) => builtin_textures(n, a.builtin_size, a.seed)
            .into_iter()
            .enumerate()
            .map(|(i, t)| (format!("builtin{i:03}"), t))
            .collect(),
        (None, None) => bail!(UsageError(
            "one of --clean-dir or --builtin is required".into()
        )),
    };
    let cfg = CorpusConfig {
        patch: a.patch,
        count: a.count,
        augment: if a.augment {
            Augment::all()
        } else {
            Augment::default()
        },
        sampler: if a.fixed_level {
            NoiseSampler::Fixed(kind)
        } else {
            NoiseSampler::UpTo(kind)
        },
        seed: a.seed,
    };
    let corpus = make_corpus(&sources, &cfg)?;
    corpus.save(&a.out)?;
    log::info!("wrote {} records to {}", corpus.len(), a.out.display());
    let mut m = RunManifest::new("synth", &[]);
    m.seed = Some(a.seed);
    m.inputs = a.clean_dir.iter().cloned().collect();
    m.outputs = vec![a.out.clone()];
    m.config = format!(
        "noise={kind}\nsampler={}\npatch={}\ncount={}\naugment={}\nsources={}\n",
        if a.fixed_level { "fixed" } else { "upto" },
        a.patch,
        a.count,
        a.augment,
        sources.len()
    );
    Ok(m)
}

/// Resolves `--config`: a preset name or a path to a `key=value` file.
pub fn load_model_config(spec: &str) -> anyhow::Result<ModelConfig> {
    let path = Path::new(spec);
    if path.is_file() {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return ModelConfig::from_text(&text)
            .with_context(|| format!("model config {}", path.display()));
    }
    Ok(ModelConfig::preset(spec)?)
}

fn train_cmd(a: &TrainArgs) -> anyhow::Result<RunManifest> {
    let cfg = TrainConfig {
        batch_size: a.batch,
        epochs: a.epochs,
        lr_init: a.lr,
        lr_min: a.lr_min,
        seed: a.seed,
        checkpoint_every: a.checkpoint_every,
        val_fraction: a.val_fraction,
        ..Default::default()
    };
    cfg.validate()?;
    let corpus = Corpus::load(&a.corpus)?;
    let (train_set, val_set) = split_validation(&corpus, cfg.val_fraction);
    let (mut model, mut state) = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            TrainState::from_checkpoint(&ck, &cfg)?
        }
        None => {
            let mut mc = load_model_config(&a.config)?;
            if let Some(l) = &a.layout {
                mc = mc.with_layout(l)?;
            }
            if let Some(v) = &a.rhdwt {
                mc = mc.with_rhdwt(v)?;
            }
            if let Some(b) = &a.branches {
                mc = mc.with_branches(b)?;
            }
            mc.validate()?;
            if corpus.patch % mc.required_multiple() != 0 {
                bail!(UsageError(format!(
                    "patch size {} is not a multiple of {}",
                    corpus.patch,
                    mc.required_multiple()
                )));
            }
            let model = Model::<f32>::build(&mc, a.seed)?;
            let state = TrainState::fresh(&model, &cfg);
            (model, state)
        }
    };
    log::info!(
        "{} parameters, {} training / {} validation pairs",
        model.num_params(),
        train_set.len(),
        val_set.len()
    );
    let log = train(
        &mut model,
        &mut state,
        &train_set,
        &val_set,
        &cfg,
        Some(&a.out),
    )?;
    if let Some(last) = log.last() {
        log::info!(
            "epoch {}: loss {:.6}, validation PSNR {:.3} dB",
            last.epoch,
            last.train_loss,
            last.val_psnr
        );
    }
    let mut m = RunManifest::new("train", &[]);
    m.seed = Some(a.seed);
    m.inputs = std::iter::once(a.corpus.clone())
        .chain(a.resume.clone())
        .collect();
    m.outputs = vec![a.out.join("last.ckpt"), a.out.join("metrics.csv")];
    m.config = format!(
        "{}batch_size={}\nepochs={}\nlr_init={}\nlr_min={}\nval_fraction={}\n",
        model.config().to_text(),
        cfg.batch_size,
        cfg.epochs,
        cfg.lr_init,
        cfg.lr_min,
        cfg.val_fraction
    );
    Ok(m)
}

/// Image files named by `input`: the file itself or a directory listing.
fn input_images(input: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if input.is_dir() {
        let files = list_images(input)?;
        if files.is_empty() {
            bail!("no images in {}", input.display());
        }
        Ok(files)
    } else if input.is_file() {
        Ok(vec![input.to_path_buf()])
    } else {
        bail!("{} does not exist", input.display())
    }
}

fn output_name(path: &Path) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default();
    PathBuf::from(stem).with_extension("png")
}

/// Applies `f` to every input image in parallel and writes 16-bit PNGs.
fn map_images(
    input: &Path,
    out: &Path,
    f: impl Fn(&ImageGray) -> stripeclean_core::Result<ImageGray> + Sync,
) -> anyhow::Result<usize> {
    let files = input_images(input)?;
    std::fs::create_dir_all(out)?;
    files.par_iter().try_for_each(|p| -> anyhow::Result<()> {
        let img = read_gray(p)?;
        let restored = f(&img).with_context(|| format!("processing {}", p.display()))?;
        write_png16(&out.join(output_name(p)), &restored)?;
        Ok(())
    })?;
    Ok(files.len())
}

fn infer(a: &InferArgs) -> anyhow::Result<RunManifest> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let model = Model::<f32>::from_checkpoint(&ck)?;
    let n = map_images(&a.input, &a.out, |img| infer_padded(&model, img))?;
    log::info!("restored {n} image(s) into {}", a.out.display());
    let mut m = RunManifest::new("infer", &[]);
    m.inputs = vec![a.ckpt.clone(), a.input.clone()];
    m.outputs = vec![a.out.clone()];
    m.config = model.config().to_text();
    Ok(m)
}

fn eval(a: &EvalArgs) -> anyhow::Result<RunManifest> {
    let report = compare_dirs(&a.pred, &a.reference)?;
    if report.rows.is_empty() {
        bail!("no images in {}", a.pred.display());
    }
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&a.report, report.to_csv())
        .with_context(|| format!("writing {}", a.report.display()))?;
    println!("{}", report.summary());
    let mut m = RunManifest::new("eval", &[]);
    m.inputs = vec![a.pred.clone(), a.reference.clone()];
    m.outputs = vec![a.report.clone()];
    Ok(m)
}

fn baseline(a: &BaselineArgs) -> anyhow::Result<RunManifest> {
    let gf = GuidedFilterParams {
        radius: a.radius,
        eps: a.eps,
    };
    let config = match a.method {
        Method::Mhe => format!("method=mhe\nk={}\n", a.k),
        Method::Gf => {
            gf.validate()?;
            format!("method=gf\nradius={}\neps={}\n", a.radius, a.eps)
        }
    };
    let n = map_images(&a.input, &a.out, |img| match a.method {
        Method::Mhe => mhe_destripe(img, a.k),
        Method::Gf => gf_destripe(img, &gf),
    })?;
    log::info!("processed {n} image(s) into {}", a.out.display());
    let mut m = RunManifest::new("baseline", &[]);
    m.inputs = vec![a.input.clone()];
    m.outputs = vec![a.out.clone()];
    m.config = config;
    Ok(m)
}

/// Mean PSNR and SSIM of clamped restorations of `pairs`.
pub fn score_pairs(model: &Model<f32>, pairs: &[Pair]) -> anyhow::Result<(f64, f64)> {
    if pairs.is_empty() {
        bail!(UsageError(
            "no validation pairs; raise --val-fraction".into()
        ));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for pair in pairs {
        let out = infer_padded(model, &pair.degraded)?;
        p += psnr(&out, &pair.clean)?;
        s += ssim(&out, &pair.clean)?;
    }
    let n = pairs.len() as f64;
    Ok((p / n, s / n))
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub psnr: f64,
    pub ssim: f64,
    pub params: usize,
    pub ms_per_iter: f64,
}

impl AblationRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.4},{:.6},{},{:.2}",
            self.variant, self.psnr, self.ssim, self.params, self.ms_per_iter
        )
    }
}

/// Trains each variant of `suite` from `base` with the same seed, split and
/// epoch budget, and scores it on the held-out pairs.
pub fn run_ablation(
    suite: Suite,
    base: &ModelConfig,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> anyhow::Result<Vec<AblationRow>> {
    let (train_set, val_set) = split_validation(corpus, cfg.val_fraction);
    let mut rows = Vec::new();
    for &variant in suite.variants() {
        let mc = suite.config(base.clone(), variant)?;
        let mut model = Model::<f32>::build(&mc, cfg.seed)?;
        let mut state = TrainState::fresh(&model, cfg);
        let t0 = Instant::now();
        train(&mut model, &mut state, &train_set, &val_set, cfg, None)
            .with_context(|| format!("training variant {variant}"))?;
        let ms = t0.elapsed().as_secs_f64() * 1e3 / state.adam.t.max(1) as f64;
        let (psnr, ssim) = score_pairs(&model, &val_set)?;
        let row = AblationRow {
            variant: variant.into(),
            psnr,
            ssim,
            params: model.num_params(),
            ms_per_iter: ms,
        };
        log::info!("{}", row.csv_line());
        rows.push(row);
    }
    Ok(rows)
}

fn ablate(a: &AblateArgs) -> anyhow::Result<RunManifest> {
    let base = ModelConfig::preset(&a.preset)?;
    let cfg = TrainConfig {
        batch_size: a.batch,
        epochs: a.budget,
        seed: a.seed,
        val_fraction: a.val_fraction,
        ..Default::default()
    };
    cfg.validate()?;
    let corpus = Corpus::load(&a.corpus)?;
    let rows = run_ablation(a.suite, &base, &corpus, &cfg)?;
    let mut csv = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        let _ = writeln!(csv, "{}", r.csv_line());
    }
    std::fs::create_dir_all(&a.out)?;
    let path = a.out.join("ablation.csv");
    std::fs::write(&path, csv)?;
    let mut m = RunManifest::new("ablate", &[]);
    m.seed = Some(a.seed);
    m.inputs = vec![a.corpus.clone()];
    m.outputs = vec![path];
    m.config = format!(
        "suite={:?}\npreset={}\nbudget={}\nbatch_size={}\n",
        a.suite, a.preset, a.budget, a.batch
    );
    Ok(m)
}

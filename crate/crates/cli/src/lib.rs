//! The `dorm` command line.
//!
//! Every command is a pure function of its flags, input files and seed, and
//! records its resolved settings in a config-echo JSON next to its outputs.

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dorm_core::backbone::{load_source, pretrain_source, LatentCode, PretrainConfig, SourceGenerator};
use dorm_core::nn::Parameters;
use dorm_core::checkpoint::Checkpoint;
use dorm_core::data::FewShotDataset;
use dorm_core::dorm::{DomainBank, DormGenerator, MAModule, MixSpec};
use dorm_core::encoder::Encoder;
use dorm_core::image::ImageTensor;
use dorm_core::metrics::{evaluate, ClusterDistance, EvalInputs};
use dorm_core::toy::{ToyDomainSpec, ToyStyle};
use dorm_core::training::{
    adapt_few_shot, adapt_one_shot, render_batch, run_ablation, AblationKind, AdaptConfig, AdaptOutcome, Augmentation,
    EvalSetup, TrainingContext,
};
use dorm_core::{DormError, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

/// Exit status for invalid flags or inputs.
pub const EXIT_INVALID: i32 = 2;
/// Exit status for a missing, corrupt or incompatible checkpoint.
pub const EXIT_CHECKPOINT: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_OTHER: i32 = 1;

pub const CONFIG_ECHO: &str = "config.json";

#[derive(Parser, Debug)]
#[command(name = "dorm", version, about = "Few-shot generative domain adaptation by domain re-modulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the source generator and discriminator on an image directory.
    Pretrain(PretrainArgs),
    /// Few-shot adaptation: train one domain module on a handful of images.
    Adapt(AdaptArgs),
    /// One-shot adaptation with the local and consistency losses.
    Adapt1(Adapt1Args),
    /// Render images from the source or one adapted domain.
    Synth(SynthArgs),
    /// Render a hybrid image from several domains at once.
    Mix(MixArgs),
    /// Score one domain with the desk metrics.
    Eval(EvalArgs),
    /// Train and score every variant of one ablation.
    Ablate(AblateArgs),
    /// Write a seeded synthetic shape dataset.
    Maketoy(MaketoyArgs),
    /// Serve the HTTP API over a domain bank.
    Serve(ServeArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct PretrainArgs {
    /// Directory of training images.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON pretraining config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Square image size; must be a power of two.
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub xflip: bool,
}

/// Settings shared by both adaptation commands.
#[derive(Args, Debug, Serialize)]
pub struct AdaptCommon {
    /// Source checkpoint written by `pretrain`.
    #[arg(long)]
    pub source: PathBuf,
    /// Name stored in the module and used as its bank key.
    #[arg(long, default_value = "target")]
    pub domain: String,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON adaptation config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Re-modulation strength during training and the module default.
    #[arg(long)]
    pub alpha: Option<f32>,
    /// Exact number of training steps (otherwise the real-image budget decides).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub head_lr: Option<f64>,
    #[arg(long)]
    pub lambda_ss: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also add the trained module to this bank directory, replacing a same-named one.
    #[arg(long)]
    pub bank: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct AdaptArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: AdaptCommon,
    /// Directory of target images.
    #[arg(long)]
    pub data: PathBuf,
    /// Use only the first N images (sorted by file name).
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub xflip: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct Adapt1Args {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: AdaptCommon,
    /// The single reference image.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub lambda_local: Option<f64>,
    #[arg(long)]
    pub lambda_scc: Option<f64>,
    /// Skip inverting the reference into the latent queue before training.
    #[arg(long)]
    pub no_queue_seed: bool,
}

/// Where adapted domains come from: a bank entry or a lone module file.
#[derive(Args, Debug, Serialize)]
pub struct DomainSource {
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Domain name inside `--bank`.
    #[arg(long)]
    pub domain: Option<String>,
    /// A module checkpoint written by `adapt`, used instead of a bank.
    #[arg(long, conflicts_with_all = ["bank", "domain"])]
    pub module: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub domain: DomainSource,
    /// Domain weight; defaults to the module's stored value (0.2 is a good start for subtle attributes).
    #[arg(long)]
    pub alpha: Option<f32>,
    /// Render the unadapted source generator.
    #[arg(long, conflicts_with_all = ["bank", "domain", "module", "alpha"])]
    pub source_only: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Images for seeds seed, seed+1, ...; files after the first get an index suffix.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Output PNG path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct MixArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    /// Comma-separated `name=weight` pairs; weights must sum to at most 1.
    #[arg(long, default_value = "")]
    pub domains: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub domain: DomainSource,
    #[arg(long)]
    pub alpha: Option<f32>,
    /// The few-shot training images.
    #[arg(long)]
    pub train: PathBuf,
    /// Held-out target images for desk-FID.
    #[arg(long)]
    pub holdout: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// In-cluster distance for intra-LPIPS: to-center or pairwise.
    #[arg(long, default_value = "to-center", value_parser = parse_cluster)]
    pub cluster_distance: ClusterDistance,
    /// Report path (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub holdout: PathBuf,
    /// target-mapping-off, low-affines-off, high-affines-off, alpha-sweep or head-depth.
    #[arg(long, value_parser = parse_kind)]
    pub kind: AblationKind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct MaketoyArgs {
    /// color, grayscale-outline, inverted or textured.
    #[arg(long, default_value = "color", value_parser = parse_style)]
    pub style: ToyStyle,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: IpAddr,
    #[arg(long, default_value_t = dorm_service::DEFAULT_PORT)]
    pub port: u16,
    /// UI bundle served at `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

fn parse_cluster(s: &str) -> std::result::Result<ClusterDistance, String> {
    match s {
        "to-center" => Ok(ClusterDistance::ToCenter),
        "pairwise" => Ok(ClusterDistance::Pairwise),
        _ => Err(format!("expected to-center or pairwise, got {s:?}")),
    }
}

fn parse_kind(s: &str) -> std::result::Result<AblationKind, String> {
    s.parse().map_err(|e: DormError| e.to_string())
}

fn parse_style(s: &str) -> std::result::Result<ToyStyle, String> {
    s.parse().map_err(|e: DormError| e.to_string())
}

/// Map an error to the documented exit status.
pub fn exit_code(e: &DormError) -> i32 {
    match e {
        DormError::InvalidInput(_) => EXIT_INVALID,
        DormError::NotFound(_)
        | DormError::IncompatibleCheckpoint(_)
        | DormError::CorruptCheckpoint(_)
        | DormError::Checksum(_)
        | DormError::VersionMismatch { .. } => EXIT_CHECKPOINT,
        DormError::TrainingDiverged { .. } => EXIT_DIVERGED,
        _ => EXIT_OTHER,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Adapt(a) => cmd_adapt(&a),
        Command::Adapt1(a) => cmd_adapt1(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Mix(a) => cmd_mix(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Maketoy(a) => cmd_maketoy(&a),
        Command::Serve(a) => cmd_serve(&a),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn echo(command: &str, args: &impl Serialize, resolved: Value) -> Value {
    json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "args": args,
        "resolved": resolved,
    })
}

/// `img.png` -> `img.json`.
pub fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let raw = std::fs::read(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => DormError::InvalidInput(format!("config file {} not found", p.display())),
                _ => DormError::Io(e),
            })?;
            serde_json::from_slice(&raw).map_err(|e| DormError::InvalidInput(format!("{}: {e}", p.display())))
        }
    }
}

fn require_dir(dir: &Path, what: &str) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(DormError::InvalidInput(format!("{what} directory {} does not exist", dir.display())))
    }
}

fn load_images(dir: &Path, resolution: usize, what: &str) -> Result<FewShotDataset> {
    require_dir(dir, what)?;
    FewShotDataset::from_dir(dir, resolution)
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let mut cfg: PretrainConfig = read_config(a.config.as_deref())?;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.resolution {
        cfg.backbone.resolution = v;
    }
    cfg.xflip |= a.xflip;
    cfg.out_dir = Some(a.out.clone());
    let data = load_images(&a.data, cfg.backbone.resolution, "data")?;
    write_json(&a.out.join(CONFIG_ECHO), &echo("pretrain", a, serde_json::to_value(&cfg)?))?;
    let out = pretrain_source(&data.images, &cfg)?;
    if let Some(last) = out.logs.last() {
        println!("pretrained {} steps: loss_g {:.4} loss_d {:.4}", cfg.steps, last.loss_g, last.loss_d);
    }
    println!("wrote {}", a.out.join("source.dormckpt").display());
    Ok(())
}

fn adapt_config(c: &AdaptCommon) -> Result<AdaptConfig> {
    let mut cfg: AdaptConfig = read_config(c.config.as_deref())?;
    cfg.domain = c.domain.clone();
    if let Some(v) = c.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = c.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = c.lr {
        cfg.lr = v;
    }
    if let Some(v) = c.head_lr {
        cfg.head_lr = v;
    }
    if let Some(v) = c.lambda_ss {
        cfg.losses.lambda_ss = v;
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.steps {
        cfg = cfg.with_steps(v);
    }
    cfg.out_dir = Some(c.out.clone());
    Ok(cfg)
}

fn finish_adapt(c: &AdaptCommon, source: &SourceGenerator, out: AdaptOutcome) -> Result<()> {
    let samples = c.out.join("samples");
    std::fs::create_dir_all(&samples)?;
    for (i, (_, img)) in out.eval.iter().enumerate() {
        img.save_png(&samples.join(format!("sample_{i:03}.png")))?;
    }
    if let Some(last) = out.logs.last() {
        println!(
            "adapted `{}` for {} steps: adv_g {:.4} adv_d {:.4} l_ss {:.4}",
            c.domain,
            out.logs.len(),
            last.adv_g,
            last.adv_d,
            last.l_ss
        );
    }
    if let Some(dir) = &c.bank {
        let mut bank = if dir.join(dorm_core::dorm::BANK_FILE).exists() {
            DomainBank::load(dir)?
        } else {
            DomainBank::new(source.content_hash())
        };
        bank.replace(out.module)?;
        bank.save(dir)?;
        println!("bank {} now holds {} domain(s)", dir.display(), bank.len());
    }
    Ok(())
}

fn cmd_adapt(a: &AdaptArgs) -> Result<()> {
    let (source, disc) = load_source(&a.common.source)?;
    let mut cfg = adapt_config(&a.common)?;
    if a.xflip {
        cfg.augmentation = Augmentation::Xflip;
    }
    let mut data = load_images(&a.data, source.resolution(), "data")?;
    if let Some(n) = a.shots {
        data = data.take(n)?;
    }
    cfg.validate()?;
    let encoder = Encoder::default_for(source.resolution());
    let files: Vec<String> = data.paths.iter().map(|p| p.display().to_string()).collect();
    write_json(
        &a.common.out.join(CONFIG_ECHO),
        &echo("adapt", a, json!({"config": cfg, "config_hash": cfg.config_hash(), "images": files})),
    )?;
    let ctx = TrainingContext {
        source: &source,
        disc: &disc,
        encoder: &encoder,
    };
    let out = adapt_few_shot(ctx, &data, &cfg)?;
    finish_adapt(&a.common, &source, out)
}

fn cmd_adapt1(a: &Adapt1Args) -> Result<()> {
    let (source, disc) = load_source(&a.common.source)?;
    let mut cfg = adapt_config(&a.common)?;
    if let Some(v) = a.lambda_local {
        cfg.losses.lambda_local = v;
    }
    if let Some(v) = a.lambda_scc {
        cfg.losses.lambda_scc = v;
    }
    if a.no_queue_seed {
        cfg.seed_queue_with_reference = false;
    }
    cfg.validate()?;
    if !a.image.is_file() {
        return Err(DormError::InvalidInput(format!("image {} does not exist", a.image.display())));
    }
    let image = ImageTensor::load(&a.image, source.resolution())?;
    let encoder = Encoder::default_for(source.resolution());
    write_json(
        &a.common.out.join(CONFIG_ECHO),
        &echo("adapt1", a, json!({"config": cfg, "config_hash": cfg.config_hash()})),
    )?;
    let ctx = TrainingContext {
        source: &source,
        disc: &disc,
        encoder: &encoder,
    };
    let out = adapt_one_shot(ctx, &image, &cfg)?;
    finish_adapt(&a.common, &source, out)
}

/// A bank holding exactly the domain `DomainSource` points at, plus its name.
fn resolve_domain(d: &DomainSource, source: &SourceGenerator) -> Result<(DomainBank, String)> {
    match (&d.module, &d.bank, &d.domain) {
        (Some(path), _, _) => {
            let module = MAModule::from_checkpoint(&Checkpoint::load(path)?)?;
            let name = module.domain_name.clone();
            let mut bank = DomainBank::new(source.content_hash());
            bank.insert(module)?;
            Ok((bank, name))
        }
        (None, Some(dir), Some(name)) => {
            let bank = DomainBank::load(dir)?;
            if bank.get(name).is_none() {
                return Err(DormError::NotFound(format!("domain `{name}` in bank {}", dir.display())));
            }
            Ok((bank, name.clone()))
        }
        (None, Some(_), None) => Err(DormError::InvalidInput("--bank needs --domain".into())),
        (None, None, _) => Err(DormError::InvalidInput(
            "give --bank with --domain, --module, or --source-only".into(),
        )),
    }
}

/// `out` for the first image, `out_<i>` for the rest.
pub fn numbered_path(out: &Path, i: usize) -> PathBuf {
    if i == 0 {
        return out.to_path_buf();
    }
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_{i}.png"))
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    if a.count == 0 || a.count > 1024 {
        return Err(DormError::InvalidInput(format!("--count must be in 1..=1024, got {}", a.count)));
    }
    let (source, _) = load_source(&a.source)?;
    let (bank, mix) = if a.source_only {
        (DomainBank::new(source.content_hash()), MixSpec::default())
    } else {
        let (bank, name) = resolve_domain(&a.domain, &source)?;
        let alpha = a.alpha.unwrap_or(bank.get(&name).expect("resolved").default_alpha);
        (bank, MixSpec::single(&name, alpha))
    };
    let gen = DormGenerator::new(&source, &bank)?;
    let seeds: Vec<u64> = (0..a.count as u64).map(|i| a.seed.wrapping_add(i)).collect();
    let mut files = Vec::new();
    for (i, &seed) in seeds.iter().enumerate() {
        let img = gen.generate(&mix, &LatentCode::from_seed(seed, source.config.z_dim), None)?;
        let path = numbered_path(&a.out, i);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        img.save_png(&path)?;
        files.push(path.display().to_string());
    }
    write_json(
        &sidecar_path(&a.out),
        &echo("synth", a, json!({"mix": mix, "seeds": seeds, "files": files, "source_hash": source.content_hash()})),
    )?;
    println!("wrote {} image(s) starting at {}", files.len(), a.out.display());
    Ok(())
}

fn cmd_mix(a: &MixArgs) -> Result<()> {
    let mix: MixSpec = a.domains.parse()?;
    let (source, _) = load_source(&a.source)?;
    let bank = DomainBank::load(&a.bank)?;
    let gen = DormGenerator::new(&source, &bank)?;
    let img = gen.generate(&mix, &LatentCode::from_seed(a.seed, source.config.z_dim), None)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    img.save_png(&a.out)?;
    write_json(
        &sidecar_path(&a.out),
        &echo("mix", a, json!({"mix": mix, "seed": a.seed, "source_hash": source.content_hash(), "bank_hash": bank.bank_hash()})),
    )?;
    println!("wrote {} ({})", a.out.display(), if mix.entries.is_empty() { "source".to_string() } else { mix.to_string() });
    Ok(())
}

fn refs(v: &[ImageTensor]) -> Vec<&ImageTensor> {
    v.iter().collect()
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    if a.samples < 2 {
        return Err(DormError::InvalidInput("--samples must be at least 2".into()));
    }
    let (source, _) = load_source(&a.source)?;
    let (bank, name) = resolve_domain(&a.domain, &source)?;
    let module = bank.get(&name).expect("resolved");
    let alpha = a.alpha.unwrap_or(module.default_alpha);
    let res = source.resolution();
    let train = load_images(&a.train, res, "train")?;
    let holdout = load_images(&a.holdout, res, "holdout")?;
    let setup = EvalSetup {
        holdout: Vec::new(),
        samples: a.samples,
        seed: a.seed,
    };
    let zs = setup.latents(source.config.z_dim);
    let src = render_batch(&source, None, &zs)?;
    let adapted = render_batch(&source, Some((module, alpha)), &zs)?;
    let (src_r, ad_r, tr_r, ho_r) = (refs(&src), refs(&adapted), refs(&train.images), refs(&holdout.images));
    let encoder = Encoder::default_for(res);
    let config_hash = {
        let v = json!({"module": module.content_hash(), "alpha": alpha, "samples": a.samples, "cluster": a.cluster_distance});
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    };
    let report = evaluate(
        &encoder,
        EvalInputs {
            source: &src_r,
            adapted: &ad_r,
            train: &tr_r,
            holdout: &ho_r,
        },
        a.cluster_distance,
        config_hash,
        vec![a.seed],
    )?;
    write_json(&a.out, &report)?;
    write_json(&a.out.with_extension("config.json"), &echo("eval", a, json!({"alpha": alpha})))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let (source, disc) = load_source(&a.source)?;
    let mut base: AdaptConfig = read_config(a.config.as_deref())?;
    base.seed = a.seed;
    if let Some(v) = a.steps {
        base = base.with_steps(v);
    }
    base.out_dir = Some(a.out.clone());
    base.validate()?;
    let res = source.resolution();
    let mut data = load_images(&a.data, res, "data")?;
    if let Some(n) = a.shots {
        data = data.take(n)?;
    }
    let holdout = load_images(&a.holdout, res, "holdout")?;
    let eval = EvalSetup {
        holdout: holdout.images,
        samples: a.samples,
        seed: a.seed,
    };
    let variants: Vec<Value> = a
        .kind
        .variants(&base)
        .into_iter()
        .map(|(name, cfg)| json!({"variant": name, "config_hash": cfg.config_hash()}))
        .collect();
    write_json(
        &a.out.join(CONFIG_ECHO),
        &echo("ablate", a, json!({"base": base, "variants": variants})),
    )?;
    let encoder = Encoder::default_for(res);
    let ctx = TrainingContext {
        source: &source,
        disc: &disc,
        encoder: &encoder,
    };
    let report = run_ablation(ctx, &data, &base, a.kind, &eval)?;
    write_json(&a.out.join("report.json"), &report)?;
    print!("{report}");
    Ok(())
}

fn cmd_maketoy(a: &MaketoyArgs) -> Result<()> {
    let spec = ToyDomainSpec {
        style: a.style,
        count: a.count,
        seed: a.seed,
        resolution: a.resolution,
        ..ToyDomainSpec::default()
    };
    if a.count == 0 {
        return Err(DormError::InvalidInput("--count must be positive".into()));
    }
    let files = spec.save_to_dir(&a.out)?;
    write_json(&a.out.join(CONFIG_ECHO), &echo("maketoy", a, serde_json::to_value(&spec)?))?;
    println!("wrote {} {} image(s) to {}", files.len(), a.style, a.out.display());
    Ok(())
}

fn cmd_serve(a: &ServeArgs) -> Result<()> {
    let mut state = dorm_service::AppState::load(&a.source, &a.bank)?;
    if let Some(dir) = &a.static_dir {
        require_dir(dir, "static")?;
        state = state.with_static_dir(dir);
    }
    let addr = SocketAddr::new(a.bind, a.port);
    println!("serving on http://{addr}");
    dorm_service::serve_blocking(state, addr)?;
    Ok(())
}

//! `cruxgen`: command-line front end for the full pipeline — procedural
//! dataset synthesis, two-stage generator training, downstream training,
//! synthetic-sample generation, annotation, evaluation, and experiments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use cruxgen_core::annotate::{annotate, AnnotateConfig};
use cruxgen_core::ckpt::Checkpoint;
use cruxgen_core::config::ModelConfig;
use cruxgen_core::diffusion::{sample, SampleModel, SamplerConfig};
use cruxgen_core::downstream::{
    train_segmenter, SegTrainConfig, Segmenter, SegmenterConfig,
};
use cruxgen_core::embed2d::TsneConfig;
use cruxgen_core::encoder::{train_encoder, Encoder, EncoderConfig};
use cruxgen_core::harness::{
    augmentation_curve, confidence_gap_report, cross_domain_transfer, diversity_quality,
    dominant_component, component_inside, export_embedding_plot, feature_vector,
    generate_dataset, AugmentationConfig, GenerateConfig, Generator, SyntheticManifest,
};
use cruxgen_core::imageio::{load_gray, save_mask};
use cruxgen_core::metrics::{f1_max, miou_mdice, pixel_ap};
use cruxgen_core::nn::ParamStore;
use cruxgen_core::plot::{plot_lines, plot_scatter};
use cruxgen_core::safe::{
    safe_meta, train_safe, Conditioner, SafeModel, TrainConfig as SafeTrainConfig,
};
use cruxgen_core::scenegen::{
    build_dataset, load_scene, DatasetConfig, DatasetManifest, Domain, SceneEntry, ALL_DOMAINS,
    SPLIT_DOWNSTREAM_TRAIN, SPLIT_HARD_TEST, SPLIT_SCARCE_TRAIN, SPLIT_TEST,
};
use cruxgen_core::wasm::{frozen_hash, init_from_safe, train_wasm, WasmTrainConfig};

// ---- error categories and exit codes ----

enum CliError {
    /// Invalid configuration or flags → exit 2.
    Invalid(String),
    /// Missing prerequisite artifact → exit 3.
    Missing(String),
    /// Runtime failure → exit 1.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Invalid(_) => 2,
            CliError::Missing(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Invalid(m) | CliError::Missing(m) | CliError::Runtime(m) => m,
        }
    }

    fn category(&self) -> &'static str {
        match self {
            CliError::Runtime(_) => "runtime failure",
            CliError::Invalid(_) => "invalid config",
            CliError::Missing(_) => "missing prerequisite",
        }
    }
}

impl From<cruxgen_core::Error> for CliError {
    fn from(e: cruxgen_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Invalid(msg.into())
}

/// Gate on a prerequisite artifact, naming it and the command that makes it.
fn require(path: &Path, produced_by: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(format!(
            "missing artifact {} (run `cruxgen {produced_by}` first)",
            path.display()
        )))
    }
}

// ---- configuration ----

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EncoderTrainSection {
    steps: usize,
    lr: f64,
    seed: u64,
}

impl Default for EncoderTrainSection {
    fn default() -> Self {
        Self { steps: 400, lr: 5e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenerateSection {
    n: usize,
    lambda: f64,
    seed: u64,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self { n: 200, lambda: 0.5, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExperimentSection {
    /// Synthetic-count grid for the augmentation curve.
    sizes: Vec<usize>,
    /// Seeds for curve repetitions (mean ± sd reported when ≥ 2).
    seeds: Vec<u64>,
    /// Reference domain for cross-domain transfer.
    transfer_from: String,
    /// Background domain for cross-domain transfer.
    transfer_to: String,
    transfer_samples: usize,
    tsne: TsneConfig,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            sizes: vec![0, 50, 100, 200],
            seeds: vec![0, 1, 2],
            transfer_from: "stripes".into(),
            transfer_to: "grid".into(),
            transfer_samples: 16,
            tsne: TsneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    seed: u64,
    jobs: usize,
    dataset: DatasetConfig,
    model: ModelConfig,
    encoder: EncoderConfig,
    train_encoder: EncoderTrainSection,
    train_safe: SafeTrainConfig,
    downstream: SegmenterConfig,
    train_downstream: SegTrainConfig,
    train_wasm: WasmTrainConfig,
    sampler: SamplerConfig,
    annotate: AnnotateConfig,
    generate: GenerateSection,
    experiment: ExperimentSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 1,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            encoder: EncoderConfig::default(),
            train_encoder: EncoderTrainSection::default(),
            train_safe: SafeTrainConfig::default(),
            downstream: SegmenterConfig::default(),
            train_downstream: SegTrainConfig::default(),
            train_wasm: WasmTrainConfig::default(),
            sampler: SamplerConfig::default(),
            annotate: AnnotateConfig::default(),
            generate: GenerateSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

// ---- CLI surface ----

#[derive(Parser)]
#[command(name = "cruxgen", version, about = "Unified synthesis of hard samples with pixel annotations on procedural scenes")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Path to a TOML config file (defaults used when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root (default: $CRUXGEN_OUT or ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker-parallelism bound (orchestration is sequential).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Fusion weight override (generation and Stage 2 training).
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Reverse-sampler step-count override.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Classifier-free guidance scale override.
    #[arg(long, global = true)]
    guidance: Option<f64>,
    /// Generic config override, repeatable: --set section.key=value.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Clone)]
enum Command {
    /// Build the procedural scarce-data dataset and its split manifest.
    GenData,
    /// Train the frozen vision encoder, then Stage 1 of the generator.
    TrainSafe,
    /// Train the downstream segmentation model on real data.
    TrainDownstream,
    /// Stage 2: mine hard samples against the frozen downstream model.
    TrainWasm,
    /// Generate synthetic image/annotation pairs with the trained model.
    Generate,
    /// Re-extract annotations for a synthetic manifest and report quality.
    Annotate {
        /// Synthetic manifest to annotate (default: the crucial manifest).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Evaluate the downstream model on the test and hard-test splits.
    Evaluate,
    /// Run a named experiment: gapdist, augcurve, diversity, transfer, embed.
    Experiment { name: String },
    /// Render a PNG plot from a previously written report JSON.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

impl Command {
    fn slug(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainSafe => "train-safe",
            Command::TrainDownstream => "train-downstream",
            Command::TrainWasm => "train-wasm",
            Command::Generate => "generate",
            Command::Annotate { .. } => "annotate",
            Command::Evaluate => "evaluate",
            Command::Experiment { .. } => "experiment",
            Command::Plot { .. } => "plot",
        }
    }
}

// ---- config resolution ----

fn apply_set(doc: &mut toml::Value, key: &str, value: &str) -> CliResult<()> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_table_mut()
            .ok_or_else(|| invalid(format!("config key {key} does not address a table")))?
            .entry(part.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    let leaf = parts.last().unwrap().to_string();
    // parse the value as a TOML literal; anything unparseable is a string
    let parsed: toml::Value = format!("v = {value}")
        .parse::<toml::Value>()
        .ok()
        .and_then(|mut doc| doc.as_table_mut().and_then(|tbl| tbl.remove("v")))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    node.as_table_mut()
        .ok_or_else(|| invalid(format!("config key {key} does not address a table")))?
        .insert(leaf, parsed);
    Ok(())
}

fn resolve_config(common: &CommonArgs) -> CliResult<RunConfig> {
    let mut doc: toml::Value = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                invalid(format!("cannot read config {}: {e}", path.display()))
            })?;
            text.parse().map_err(|e| invalid(format!("config parse error: {e}")))?
        }
        None => toml::Value::Table(Default::default()),
    };
    for s in &common.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| invalid(format!("--set expects key=value, got {s}")))?;
        apply_set(&mut doc, k.trim(), v.trim())?;
    }
    let mut cfg: RunConfig =
        doc.try_into().map_err(|e| invalid(format!("invalid config: {e}")))?;

    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.dataset.seed = seed;
        cfg.train_encoder.seed = seed;
        cfg.train_safe.seed = seed;
        cfg.train_downstream.seed = seed;
        cfg.train_wasm.seed = seed;
        cfg.sampler.seed = seed;
        cfg.generate.seed = seed;
        cfg.experiment.tsne.seed = seed;
    }
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            return Err(invalid("--jobs must be positive"));
        }
        cfg.jobs = jobs;
    }
    if let Some(lambda) = common.lambda {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(invalid(format!("--lambda {lambda} outside [0,1]")));
        }
        cfg.generate.lambda = lambda;
        cfg.train_wasm.lambda = lambda;
    }
    if let Some(steps) = common.steps {
        cfg.sampler.steps = steps;
    }
    if let Some(g) = common.guidance {
        cfg.sampler.guidance = g;
    }

    cfg.model.validate().map_err(|e| invalid(e.to_string()))?;
    cfg.encoder.validate().map_err(|e| invalid(e.to_string()))?;
    let sched = cruxgen_core::diffusion::NoiseSchedule::linear(
        cfg.model.t_train,
        cfg.model.beta_min,
        cfg.model.beta_max,
    )
    .map_err(|e| invalid(e.to_string()))?;
    cfg.sampler.validate(&sched).map_err(|e| invalid(e.to_string()))?;
    if cfg.dataset.image_size != cfg.model.image_size {
        return Err(invalid(format!(
            "dataset image_size {} != model image_size {}",
            cfg.dataset.image_size, cfg.model.image_size
        )));
    }
    Ok(cfg)
}

fn out_root(common: &CommonArgs) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| std::env::var_os("CRUXGEN_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

/// Echo the fully resolved config next to the run's outputs.
fn echo_config(out: &Path, slug: &str, cfg: &RunConfig) -> CliResult<()> {
    write_json(&out.join(format!("{slug}-config.json")), cfg)
}

// ---- artifact paths ----

fn dataset_manifest_path(out: &Path) -> PathBuf {
    out.join("dataset").join("manifest.json")
}

fn encoder_ckpt(out: &Path) -> PathBuf {
    out.join("encoder.ckpt")
}

fn safe_ckpt(out: &Path) -> PathBuf {
    out.join("safe.ckpt")
}

fn downstream_ckpt(out: &Path) -> PathBuf {
    out.join("downstream.ckpt")
}

fn wasm_ckpt(out: &Path) -> PathBuf {
    out.join("wasm.ckpt")
}

fn synth_manifest(out: &Path, tag: &str) -> PathBuf {
    out.join("synthetic").join(tag).join("manifest.json")
}

// ---- checkpoint loading helpers ----

struct LoadedEncoder {
    encoder: Encoder,
    store: ParamStore,
}

fn load_encoder(out: &Path) -> CliResult<LoadedEncoder> {
    let path = encoder_ckpt(out);
    require(&path, "train-safe")?;
    let ckpt = Checkpoint::load(&path)?;
    ckpt.expect_kind("encoder")?;
    let config: EncoderConfig = serde_json::from_str(ckpt.meta("encoder_config")?)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let encoder = Encoder::attach(config);
    Ok(LoadedEncoder { encoder, store: ckpt.params })
}

struct LoadedSafe {
    safe: SafeModel,
    store: ParamStore,
}

fn load_safe(out: &Path) -> CliResult<LoadedSafe> {
    let path = safe_ckpt(out);
    require(&path, "train-safe")?;
    let ckpt = Checkpoint::load(&path)?;
    ckpt.expect_kind("safe")?;
    let model = ModelConfig::from_json(ckpt.meta("model_config")?)?;
    let enc: EncoderConfig = serde_json::from_str(ckpt.meta("encoder_config")?)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let safe = SafeModel::attach(model, enc)?;
    Ok(LoadedSafe { safe, store: ckpt.params })
}

struct LoadedSeg {
    seg: Segmenter,
    store: ParamStore,
}

fn load_downstream(out: &Path) -> CliResult<LoadedSeg> {
    let path = downstream_ckpt(out);
    require(&path, "train-downstream")?;
    let ckpt = Checkpoint::load(&path)?;
    ckpt.expect_kind("downstream")?;
    let config: SegmenterConfig = serde_json::from_str(ckpt.meta("segmenter_config")?)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let seg = Segmenter::attach(config);
    Ok(LoadedSeg { seg, store: ckpt.params })
}

/// The full generator: SAFE + crucial pathway parameters in one store.
struct LoadedGen {
    safe: SafeModel,
    crucial: Conditioner,
    store: ParamStore,
}

fn load_generator(out: &Path, need_crucial: bool) -> CliResult<LoadedGen> {
    let wpath = wasm_ckpt(out);
    if wpath.exists() {
        let ckpt = Checkpoint::load(&wpath)?;
        ckpt.expect_kind("wasm")?;
        let model = ModelConfig::from_json(ckpt.meta("model_config")?)?;
        let enc: EncoderConfig = serde_json::from_str(ckpt.meta("encoder_config")?)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let safe = SafeModel::attach(model, enc)?;
        let crucial = Conditioner::attach("crucial", &safe.model, &safe.enc_config)?;
        return Ok(LoadedGen { safe, crucial, store: ckpt.params });
    }
    if need_crucial {
        return Err(CliError::Missing(format!(
            "missing artifact {} (run `cruxgen train-wasm` first)",
            wpath.display()
        )));
    }
    // SAFE-only generation (λ = 0) can run from the Stage 1 checkpoint
    let loaded = load_safe(out)?;
    let crucial = Conditioner::attach("crucial", &loaded.safe.model, &loaded.safe.enc_config)?;
    Ok(LoadedGen { safe: loaded.safe, crucial, store: loaded.store })
}

fn load_manifest(out: &Path) -> CliResult<DatasetManifest> {
    let path = dataset_manifest_path(out);
    require(&path, "gen-data")?;
    Ok(DatasetManifest::load(&path)?)
}

fn load_synth(path: &Path, produced_by: &str) -> CliResult<SyntheticManifest> {
    require(path, produced_by)?;
    Ok(SyntheticManifest::load(path)?)
}

fn parse_domain(name: &str) -> CliResult<Domain> {
    ALL_DOMAINS
        .into_iter()
        .find(|d| d.name() == name)
        .ok_or_else(|| invalid(format!("unknown domain {name}")))
}

// ---- subcommands ----

fn cmd_gen_data(out: &Path, cfg: &RunConfig) -> CliResult<()> {
    let dir = out.join("dataset");
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    let manifest = build_dataset(&dir, &cfg.dataset)?;
    manifest.save(&dataset_manifest_path(out))?;
    println!(
        "gen-data: {} scenes across {} splits -> {}",
        manifest.scenes.len(),
        manifest.splits.len(),
        dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSafeReport {
    encoder_final_loss: f64,
    encoder_train_accuracy: f64,
    safe_final_loss: f64,
    safe_hash: String,
    encoder_hash: String,
}

fn cmd_train_safe(out: &Path, cfg: &RunConfig) -> CliResult<()> {
    let manifest = load_manifest(out)?;
    let all_entries: Vec<&SceneEntry> = manifest.scenes.values().collect();
    let mut images = Vec::with_capacity(all_entries.len());
    let mut labels = Vec::with_capacity(all_entries.len());
    for e in &all_entries {
        let scene = load_scene(e)?;
        images.push(scene.reference);
        labels.push(e.spec.domain.index());
    }

    // frozen feature extractor, trained once as a domain classifier
    let mut enc_store = ParamStore::new();
    let encoder = Encoder::init(cfg.encoder.clone(), &mut enc_store, cfg.train_encoder.seed)?;
    let enc_report = train_encoder(
        &encoder,
        &mut enc_store,
        &images,
        &labels,
        cfg.train_encoder.steps,
        cfg.train_encoder.lr,
        cfg.train_encoder.seed,
    )?;
    let mut enc_meta = BTreeMap::new();
    enc_meta.insert(
        "encoder_config".to_string(),
        serde_json::to_string(&cfg.encoder).map_err(|e| CliError::Runtime(e.to_string()))?,
    );
    enc_meta.insert("train_accuracy".to_string(), format!("{}", enc_report.train_accuracy));
    let enc_hash = enc_store.content_hash();
    Checkpoint::new("encoder", cfg.train_encoder.seed, enc_store.clone(), enc_meta)
        .save(&encoder_ckpt(out))?;

    // Stage 1
    let mut store = ParamStore::new();
    let safe = SafeModel::init(cfg.model.clone(), cfg.encoder.clone(), &mut store, cfg.train_safe.seed)?;
    let scenes: Vec<_> = manifest
        .split(SPLIT_SCARCE_TRAIN)?
        .iter()
        .map(|e| load_scene(e))
        .collect::<cruxgen_core::Result<_>>()?;
    let report = train_safe(&safe, &mut store, &scenes, &encoder, &enc_store, &cfg.train_safe)?;
    let safe_hash = store.content_hash();
    Checkpoint::new("safe", cfg.train_safe.seed, store, safe_meta(&safe, &enc_hash))
        .save(&safe_ckpt(out))?;

    let summary = TrainSafeReport {
        encoder_final_loss: *enc_report.losses.last().unwrap_or(&f64::NAN),
        encoder_train_accuracy: enc_report.train_accuracy,
        safe_final_loss: *report.losses.last().unwrap_or(&f64::NAN),
        safe_hash,
        encoder_hash: enc_hash,
    };
    write_json(&out.join("train-safe-report.json"), &summary)?;
    println!(
        "train-safe: encoder accuracy {:.3}, final loss {:.6}",
        summary.encoder_train_accuracy, summary.safe_final_loss
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainDownstreamReport {
    final_loss: f64,
    downstream_hash: String,
    train_images: usize,
}

fn cmd_train_downstream(out: &Path, cfg: &RunConfig) -> CliResult<()> {
    let manifest = load_manifest(out)?;
    let entries = manifest.split(SPLIT_DOWNSTREAM_TRAIN)?;
    let mut images = Vec::with_capacity(entries.len());
    let mut masks = Vec::with_capacity(entries.len());
    for e in &entries {
        let scene = load_scene(e)?;
        images.push(scene.reference);
        masks.push(scene.gt_mask);
    }
    let mut store = ParamStore::new();
    let seg = Segmenter::init(cfg.downstream.clone(), &mut store, cfg.train_downstream.seed)?;
    let losses = train_segmenter(&seg, &mut store, &images, &masks, &cfg.train_downstream)?;
    let mut meta = BTreeMap::new();
    meta.insert(
        "segmenter_config".to_string(),
        serde_json::to_string(&cfg.downstream).map_err(|e| CliError::Runtime(e.to_string()))?,
    );
    let hash = store.content_hash();
    Checkpoint::new("downstream", cfg.train_downstream.seed, store, meta)
        .save(&downstream_ckpt(out))?;
    let summary = TrainDownstreamReport {
        final_loss: *losses.last().unwrap_or(&f64::NAN),
        downstream_hash: hash,
        train_images: images.len(),
    };
    write_json(&out.join("train-downstream-report.json"), &summary)?;
    println!("train-downstream: {} images, final loss {:.6}", summary.train_images, summary.final_loss);
    Ok(())
}

#[derive(Serialize)]
struct TrainWasmReport {
    final_loss: f64,
    final_gap: f64,
    frozen_hash: String,
}

fn cmd_train_wasm(out: &Path, cfg: &RunConfig) -> CliResult<()> {
    let manifest = load_manifest(out)?;
    let loaded = load_safe(out)?;
    let seg = load_downstream(out)?;
    let enc = load_encoder(out)?;
    let mut store = loaded.store;
    // downstream and encoder parameters join the store (frozen: Stage 2
    // only updates the crucial pathway)
    for (name, t) in seg.store.iter() {
        store.insert(name, t.clone());
    }
    for (name, t) in enc.store.iter() {
        store.insert(name, t.clone());
    }
    let crucial = init_from_safe(&loaded.safe, &mut store)?;
    let scenes: Vec<_> = manifest
        .split(SPLIT_SCARCE_TRAIN)?
        .iter()
        .map(|e| load_scene(e))
        .collect::<cruxgen_core::Result<_>>()?;
    let items: Vec<_> = scenes
        .iter()
        .map(|s| cruxgen_core::safe::prepare_scene(s, &enc.encoder, &enc.store))
        .collect();
    let report = train_wasm(&loaded.safe, &crucial, &seg.seg, &mut store, &scenes, &items, &cfg.train_wasm)?;

    let mut meta = safe_meta(&loaded.safe, &enc.store.content_hash());
    meta.insert("lambda".to_string(), format!("{}", cfg.train_wasm.lambda));
    meta.insert("frozen_hash".to_string(), frozen_hash(&store));
    let summary = TrainWasmReport {
        final_loss: *report.losses.last().unwrap_or(&f64::NAN),
        final_gap: *report.gaps.last().unwrap_or(&f64::NAN),
        frozen_hash: frozen_hash(&store),
    };
    Checkpoint::new("wasm", cfg.train_wasm.seed, store, meta).save(&wasm_ckpt(out))?;
    write_json(&out.join("train-wasm-report.json"), &summary)?;
    println!("train-wasm: final gap {:.6}", summary.final_gap);
    Ok(())
}

fn cmd_generate(out: &Path, cfg: &RunConfig) -> CliResult<()> {
    let manifest = load_manifest(out)?;
    let lambda = cfg.generate.lambda;
    let loaded = load_generator(out, lambda != 0.0)?;
    let enc = load_encoder(out)?;
    let gen = Generator {
        safe: &loaded.safe,
        crucial: &loaded.crucial,
        store: &loaded.store,
        encoder: &enc.encoder,
        enc_store: &enc.store,
    };
    let refs = manifest.split(SPLIT_SCARCE_TRAIN)?;
    let gen_cfg = GenerateConfig {
        n: cfg.generate.n,
        lambda,
        seed: cfg.generate.seed,
        sampler: cfg.sampler.clone(),
        annotate: cfg.annotate.clone(),
    };
    let tag = if lambda == 0.0 { "easy" } else { "crucial" };
    let dir = out.join("synthetic").join(tag);
    let synth = generate_dataset(&gen, &refs, &dir, &gen_cfg)?;
    synth.save(&synth_manifest(out, tag))?;
    println!("generate: {} {} samples -> {}", synth.samples.len(), tag, dir.display());
    Ok(())
}

#[derive(Serialize)]
struct AnnotateReport {
    samples: usize,
    /// Fraction whose dominant annotation component sits inside the
    /// requested box dilated by 10% of the image width.
    inside_dilated_box_fraction: f64,
    iterations: usize,
    tau: f64,
}

fn cmd_annotate(out: &Path, cfg: &RunConfig, input: Option<PathBuf>) -> CliResult<()> {
    let path = input.unwrap_or_else(|| synth_manifest(out, "crucial"));
    let synth = load_synth(&path, "generate")?;
    let manifest = load_manifest(out)?;
    let loaded = load_generator(out, synth.samples.iter().any(|s| s.lambda != 0.0))?;
    let enc = load_encoder(out)?;
    let gen = Generator {
        safe: &loaded.safe,
        crucial: &loaded.crucial,
        store: &loaded.store,
        encoder: &enc.encoder,
        enc_store: &enc.store,
    };
    let model = SampleModel {
        denoiser: &loaded.safe.denoiser,
        store: &loaded.store,
        sched: &loaded.safe.sched,
    };
    let n = loaded.safe.model.image_size;
    let dilation = n / 10;
    let mut inside = 0usize;
    for s in &synth.samples {
        let entry = manifest
            .scenes
            .get(&s.reference_id)
            .ok_or_else(|| CliError::Runtime(format!("unknown reference scene {}", s.reference_id)))?;
        let scene = load_scene(entry)?;
        let mask = s.bbox.to_mask(n);
        let cond = gen.conditioning(&scene.reference, s.lambda)?;
        let uncond = cruxgen_core::safe::null_cond_tensors(&gen.safe.cond, gen.store, &gen.safe.model);
        let mut sc = cfg.sampler.clone();
        sc.seed = s.sampler_seed;
        let (_, trace) = sample(&model, &scene.background, &mask, &cond, &uncond, &sc)?;
        let (annot, _) = annotate(&trace, n, &cfg.annotate)?;
        save_mask(&s.annotation, &annot)?;
        if let Some(comp) = dominant_component(&annot) {
            if component_inside(s.bbox, dilation, &comp, n) {
                inside += 1;
            }
        }
    }
    let report = AnnotateReport {
        samples: synth.samples.len(),
        inside_dilated_box_fraction: inside as f64 / synth.samples.len() as f64,
        iterations: cfg.annotate.iterations,
        tau: cfg.annotate.tau,
    };
    write_json(&out.join("annotate-report.json"), &report)?;
    println!(
        "annotate: {} samples, {:.1}% inside dilated box",
        report.samples,
        100.0 * report.inside_dilated_box_fraction
    );
    Ok(())
}

#[derive(Serialize)]
struct SplitMetrics {
    split: String,
    images: usize,
    pixel_ap: f64,
    f1_max: f64,
    miou: f64,
    mdice: f64,
}

fn cmd_evaluate(out: &Path, _cfg: &RunConfig) -> CliResult<()> {
    let manifest = load_manifest(out)?;
    let seg = load_downstream(out)?;
    let mut reports = Vec::new();
    for split in [SPLIT_TEST, SPLIT_HARD_TEST] {
        let entries = manifest.split(split)?;
        let mut preds = Vec::with_capacity(entries.len());
        let mut truths = Vec::with_capacity(entries.len());
        for e in &entries {
            let scene = load_scene(e)?;
            preds.push(seg.seg.predict(&seg.store, &scene.reference)?);
            truths.push(scene.gt_mask);
        }
        let (miou, mdice) = miou_mdice(&preds, &truths, 0.5)?;
        reports.push(SplitMetrics {
            split: split.to_string(),
            images: entries.len(),
            pixel_ap: pixel_ap(&preds, &truths)?,
            f1_max: f1_max(&preds, &truths)?,
            miou,
            mdice,
        });
    }
    write_json(&out.join("evaluate-report.json"), &reports)?;
    for r in &reports {
        println!(
            "evaluate[{}]: AP {:.4}, F1-MAX {:.4}, mIoU {:.4}, mDice {:.4}",
            r.split, r.pixel_ap, r.f1_max, r.miou, r.mdice
        );
    }
    Ok(())
}

fn cmd_experiment(out: &Path, cfg: &RunConfig, name: &str) -> CliResult<()> {
    match name {
        "gapdist" => {
            let seg = load_downstream(out)?;
            let easy = load_synth(&synth_manifest(out, "easy"), "generate --lambda 0")?;
            let crucial = load_synth(&synth_manifest(out, "crucial"), "generate")?;
            let report =
                confidence_gap_report(&seg.seg, &seg.store, &[&easy, &crucial], cfg.model.delta)?;
            write_json(&out.join("experiment-gapdist.json"), &report)?;
            for g in &report.groups {
                println!(
                    "gapdist[{:?}]: mean gap {:.6}, median {:.6}, in-box conf {:.4} (n={})",
                    g.tag, g.mean_gap, g.median_gap, g.mean_in_box_confidence, g.count
                );
            }
        }
        "augcurve" => {
            let manifest = load_manifest(out)?;
            let easy = load_synth(&synth_manifest(out, "easy"), "generate --lambda 0")?;
            let crucial = load_synth(&synth_manifest(out, "crucial"), "generate")?;
            let train = manifest.split(SPLIT_DOWNSTREAM_TRAIN)?;
            let test = manifest.split(SPLIT_HARD_TEST)?;
            let aug_cfg = AugmentationConfig {
                sizes: cfg.experiment.sizes.clone(),
                seeds: cfg.experiment.seeds.clone(),
                segmenter: cfg.downstream.clone(),
                train: cfg.train_downstream.clone(),
            };
            let report = augmentation_curve(&train, &easy, &crucial, &test, &aug_cfg)?;
            write_json(&out.join("experiment-augcurve.json"), &report)?;
            let series: Vec<Vec<(f64, f64)>> = [
                cruxgen_core::harness::PathwayTag::Easy,
                cruxgen_core::harness::PathwayTag::Crucial,
            ]
            .iter()
            .map(|tag| {
                report
                    .points
                    .iter()
                    .filter(|p| p.source == *tag)
                    .map(|p| (p.size as f64, p.ap_mean))
                    .collect()
            })
            .collect();
            plot_lines(&out.join("experiment-augcurve.png"), &series)?;
            for p in &report.points {
                println!(
                    "augcurve[{:?} n={}]: AP {:.4} F1 {:.4}",
                    p.source, p.size, p.ap_mean, p.f1_mean
                );
            }
        }
        "diversity" => {
            let manifest = load_manifest(out)?;
            let enc = load_encoder(out)?;
            let crucial = load_synth(&synth_manifest(out, "crucial"), "generate")?;
            let real = manifest.split(SPLIT_TEST)?;
            let report = diversity_quality(&crucial, &real, &enc.encoder, &enc.store)?;
            write_json(&out.join("experiment-diversity.json"), &report)?;
            println!(
                "diversity: IC-dist-analog {:.4}, KID-analog {:.6}, IS-analog {:.4}",
                report.ic_dist_analog, report.kid_analog, report.is_analog
            );
            for w in &report.warnings {
                println!("warning: {w}");
            }
        }
        "transfer" => {
            let manifest = load_manifest(out)?;
            let loaded = load_generator(out, true)?;
            let enc = load_encoder(out)?;
            let seg = load_downstream(out)?;
            let gen = Generator {
                safe: &loaded.safe,
                crucial: &loaded.crucial,
                store: &loaded.store,
                encoder: &enc.encoder,
                enc_store: &enc.store,
            };
            let from = parse_domain(&cfg.experiment.transfer_from)?;
            let to = parse_domain(&cfg.experiment.transfer_to)?;
            let all: Vec<&SceneEntry> = manifest.scenes.values().collect();
            let refs: Vec<&SceneEntry> =
                all.iter().copied().filter(|e| e.spec.domain == from).collect();
            let bgs: Vec<&SceneEntry> =
                all.iter().copied().filter(|e| e.spec.domain == to).collect();
            let (outputs, report) = cross_domain_transfer(
                &gen,
                &refs,
                &bgs,
                Some((&seg.seg, &seg.store)),
                cfg.experiment.transfer_samples,
                cfg.generate.lambda,
                &cfg.sampler,
                cfg.generate.seed,
            )?;
            let dir = out.join("transfer");
            std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(e.to_string()))?;
            for (i, (img, annot, _)) in outputs.iter().enumerate() {
                cruxgen_core::imageio::save_gray(&dir.join(format!("t{i:03}.png")), img)?;
                save_mask(&dir.join(format!("t{i:03}-annot.png")), annot)?;
            }
            write_json(&out.join("experiment-transfer.json"), &report)?;
            println!(
                "transfer {}->{}: compositing ok {:.0}%, centers in box {:.0}%",
                cfg.experiment.transfer_from,
                cfg.experiment.transfer_to,
                100.0 * report.compositing_ok_fraction,
                100.0 * report.center_in_box_fraction
            );
        }
        "embed" => {
            let manifest = load_manifest(out)?;
            let enc = load_encoder(out)?;
            let easy = load_synth(&synth_manifest(out, "easy"), "generate --lambda 0")?;
            let crucial = load_synth(&synth_manifest(out, "crucial"), "generate")?;
            let test = manifest.split(SPLIT_TEST)?;
            let mut groups: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
            let mut bg_feats = Vec::new();
            let mut target_feats = Vec::new();
            for e in &test {
                let scene = load_scene(e)?;
                bg_feats.push(feature_vector(&enc.encoder, &enc.store, &scene.background));
                target_feats.push(feature_vector(&enc.encoder, &enc.store, &scene.reference));
            }
            groups.push(("real-background".into(), bg_feats));
            groups.push(("real-target".into(), target_feats));
            for (name, m) in [("easy", &easy), ("crucial", &crucial)] {
                let feats = m
                    .samples
                    .iter()
                    .map(|s| {
                        let img = load_gray(&s.image)?;
                        Ok(feature_vector(&enc.encoder, &enc.store, &img))
                    })
                    .collect::<cruxgen_core::Result<Vec<_>>>()?;
                groups.push((name.to_string(), feats));
            }
            let report = export_embedding_plot(
                &groups,
                &cfg.experiment.tsne,
                &out.join("experiment-embed.png"),
                &out.join("experiment-embed.json"),
            )?;
            println!(
                "embed: centroid distance to real-background — easy {:.4}, crucial {:.4}",
                report.feature_centroid_dist_to_first[2], report.feature_centroid_dist_to_first[3]
            );
        }
        other => {
            return Err(invalid(format!(
                "unknown experiment {other}; expected gapdist, augcurve, diversity, transfer, embed"
            )))
        }
    }
    Ok(())
}

fn cmd_plot(out: &Path, input: &Path, output: Option<PathBuf>) -> CliResult<()> {
    require(input, "experiment")?;
    let text = std::fs::read_to_string(input).map_err(|e| CliError::Runtime(e.to_string()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| invalid(format!("not a report JSON: {e}")))?;
    let target = output.unwrap_or_else(|| out.join(format!(
        "{}.png",
        input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot")
    )));
    if let Some(points) = value.get("points").and_then(|p| p.as_array()) {
        // augmentation-curve report: one line per source
        let mut by_source: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for p in points {
            let src = p["source"].as_str().unwrap_or("?").to_string();
            let size = p["size"].as_f64().unwrap_or(0.0);
            let ap = p["ap_mean"].as_f64().unwrap_or(0.0);
            by_source.entry(src).or_default().push((size, ap));
        }
        let series: Vec<Vec<(f64, f64)>> = by_source.into_values().collect();
        plot_lines(&target, &series)?;
    } else if let Some(coords) = value.get("coords").and_then(|c| c.as_array()) {
        // embedding report: one scatter group per label
        let groups: Vec<Vec<(f64, f64)>> = coords
            .iter()
            .map(|g| {
                g.as_array()
                    .map(|pts| {
                        pts.iter()
                            .filter_map(|p| {
                                let a = p.as_array()?;
                                Some((a.first()?.as_f64()?, a.get(1)?.as_f64()?))
                            })
                            .collect()
                    })
                    .unwrap_or_default()
            })
            .collect();
        plot_scatter(&target, &groups)?;
    } else {
        return Err(invalid(format!(
            "{} has neither curve points nor embedding coords",
            input.display()
        )));
    }
    println!("plot: {} -> {}", input.display(), target.display());
    Ok(())
}

// ---- entry point ----

fn run(cli: Cli) -> CliResult<()> {
    let cfg = resolve_config(&cli.common)?;
    let out = out_root(&cli.common);
    std::fs::create_dir_all(&out).map_err(|e| CliError::Runtime(e.to_string()))?;
    echo_config(&out, cli.command.slug(), &cfg)?;
    match &cli.command {
        Command::GenData => cmd_gen_data(&out, &cfg),
        Command::TrainSafe => cmd_train_safe(&out, &cfg),
        Command::TrainDownstream => cmd_train_downstream(&out, &cfg),
        Command::TrainWasm => cmd_train_wasm(&out, &cfg),
        Command::Generate => cmd_generate(&out, &cfg),
        Command::Annotate { input } => cmd_annotate(&out, &cfg, input.clone()),
        Command::Evaluate => cmd_evaluate(&out, &cfg),
        Command::Experiment { name } => cmd_experiment(&out, &cfg, name),
        Command::Plot { input, output } => cmd_plot(&out, input, output.clone()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error ({}): {}", e.category(), e.message());
            ExitCode::from(e.code())
        }
    }
}

//! Command-line front end. Every setting can come from a JSON file passed with
//! `--config`; flags given on the command line take precedence.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::container::{self, DType};
use crate::error::{Error, Result};
use crate::evaluate::evaluate;
use crate::model::{Model, ModelConfig, Precision};
use crate::ontology::{
    generate_synthetic_with, load_dataset, required_channels, save_dataset, synthetic_space, FeatureGrid, FeatureStore,
    FrameSpace, GridShape, SituationAnnotation, SyntheticOptions,
};
use crate::optim::OptimizerConfig;
use crate::record::{load_records, save_records};
use crate::retrieval::build_index;
use crate::train::{train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "gsrtr", version, about = "Grounded situation recognition with a transformer")]
pub struct Cli {
    /// JSON run configuration; command-line flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic space, dataset and feature container.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a JSON-lines loss log.
    Train(TrainArgs),
    /// Write top-k grounded predictions for a dataset.
    Predict(PredictArgs),
    /// Score predictions against a dataset.
    Evaluate(EvaluateArgs),
    /// Rank images by grounded similarity to a query image.
    Retrieve(RetrieveArgs),
    /// Export attention maps of one image as CSV matrices.
    DumpAttention(DumpAttentionArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub verbs: Option<usize>,
    #[arg(long)]
    pub roles: Option<usize>,
    #[arg(long)]
    pub nouns: Option<usize>,
    #[arg(long)]
    pub min_roles: Option<usize>,
    #[arg(long)]
    pub max_roles: Option<usize>,
    #[arg(long)]
    pub grid_h: Option<usize>,
    #[arg(long)]
    pub grid_w: Option<usize>,
    /// Probability that a role has no box.
    #[arg(long)]
    pub ungrounded: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub d_v: Option<usize>,
    #[arg(long)]
    pub d_r: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    #[arg(long)]
    pub decoder_layers: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    /// Post-LN residual blocks instead of Pre-LN.
    #[arg(long)]
    pub post_ln: bool,
    /// Dropout inside the transformer.
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Learnable channel mixer before the projection, trained at the backbone rate.
    #[arg(long)]
    pub backbone: bool,
    /// Checkpoint dtype: f64 or f32.
    #[arg(long)]
    pub precision: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub space: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Checkpoint written after every epoch.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Loss log; defaults to `<checkpoint>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub backbone_lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub space: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub space: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    /// Metrics report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Image id of the query.
    #[arg(long)]
    pub query: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Also write the ranking as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DumpAttentionArgs {
    #[arg(long)]
    pub space: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: String,
    /// Verb the decoder is conditioned on; defaults to the top-1 prediction.
    #[arg(long)]
    pub verb: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Synthetic data settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub images: usize,
    pub verbs: usize,
    pub roles: usize,
    pub nouns: usize,
    pub min_roles: usize,
    pub max_roles: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub ungrounded: f64,
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let o = SyntheticOptions::default();
        DataConfig {
            images: 64,
            verbs: 8,
            roles: 6,
            nouns: 12,
            min_roles: 1,
            max_roles: 4,
            grid_h: 4,
            grid_w: 4,
            ungrounded: o.ungrounded_fraction,
            noise: o.noise,
        }
    }
}

/// Contents of a `--config` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub data: DataConfig,
    /// Model overrides applied on top of the desk configuration.
    pub model: Option<serde_json::Value>,
    /// Training overrides applied on top of [`desk_training`].
    pub train: Option<serde_json::Value>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { location: path.display().to_string(), source })
    }
}

/// Training defaults used by the `train` command.
pub fn desk_training() -> TrainConfig {
    TrainConfig {
        epochs: 125,
        optimizer: OptimizerConfig { lr: 1e-3, backbone_lr: 1e-4, clip_norm: 1.0, ..Default::default() },
        ..Default::default()
    }
}

/// Overlays the keys of a JSON object onto `base`.
fn merged<T: Serialize + serde::de::DeserializeOwned>(base: T, over: Option<&serde_json::Value>, what: &str) -> Result<T> {
    let Some(over) = over else { return Ok(base) };
    let mut v = serde_json::to_value(&base).expect("serializable config");
    match (v.as_object_mut(), over.as_object()) {
        (Some(dst), Some(src)) => {
            for (k, x) in src {
                dst.insert(k.clone(), x.clone());
            }
        }
        _ => return Err(Error::validation(format!("config {what}"), "expected a JSON object")),
    }
    serde_json::from_value(v).map_err(|source| Error::Json { location: format!("config {what}"), source })
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require_inputs(paths: &[&Path]) -> Result<()> {
    match paths.iter().find(|p| !p.exists()) {
        Some(p) => Err(Error::validation(p.display().to_string(), "input file does not exist")),
        None => Ok(()),
    }
}

fn require_seed(seed: Option<u64>, cmd: &str) -> Result<u64> {
    seed.ok_or_else(|| Error::InvalidArgument(format!("{cmd} needs --seed (or \"seed\" in the config file)")))
}

struct Loaded {
    space: FrameSpace,
    annotations: Vec<SituationAnnotation>,
    features: FeatureStore,
}

impl Loaded {
    fn read(space: &Path, dataset: &Path) -> Result<Loaded> {
        let space = FrameSpace::load(space)?;
        let annotations = load_dataset(dataset, &space)?;
        let base = dataset.parent().unwrap_or(Path::new("."));
        let features = FeatureStore::load_for(&annotations, base)?;
        Ok(Loaded { space, annotations, features })
    }

    fn pairs(&self) -> Vec<(&SituationAnnotation, &FeatureGrid)> {
        self.annotations.iter().map(|a| (a, self.features.get(&a.image_id).expect("loaded with dataset"))).collect()
    }

    fn grid(&self, image_id: &str) -> Result<(&SituationAnnotation, &FeatureGrid)> {
        let a = self
            .annotations
            .iter()
            .find(|a| a.image_id == image_id)
            .ok_or_else(|| Error::InvalidArgument(format!("image {image_id} not in dataset")))?;
        Ok((a, self.features.get(image_id).expect("loaded with dataset")))
    }
}

fn gen_data(args: GenDataArgs, run: &RunConfig) -> Result<()> {
    let seed = require_seed(args.seed.or(run.seed), "gen-data")?;
    let mut c = run.data.clone();
    set(&mut c.images, args.images);
    set(&mut c.verbs, args.verbs);
    set(&mut c.roles, args.roles);
    set(&mut c.nouns, args.nouns);
    set(&mut c.min_roles, args.min_roles);
    set(&mut c.max_roles, args.max_roles);
    set(&mut c.grid_h, args.grid_h);
    set(&mut c.grid_w, args.grid_w);
    set(&mut c.ungrounded, args.ungrounded);
    set(&mut c.noise, args.noise);

    let space = synthetic_space(c.verbs, c.roles, c.nouns, (c.min_roles, c.max_roles), seed)?;
    let grid = GridShape::new(required_channels(&space), c.grid_h, c.grid_w);
    let opts = SyntheticOptions { ungrounded_fraction: c.ungrounded, noise: c.noise, ..Default::default() };
    let samples = generate_synthetic_with(&space, c.images, grid, seed, &opts)?;

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    space.save(&args.out.join("space.json"))?;
    let arrays: Vec<_> = samples.iter().map(|s| (s.annotation.image_id.clone(), s.features.to_tensor())).collect();
    container::write(&args.out.join("features.gsra"), &arrays, DType::F64)?;
    let anns: Vec<_> = samples
        .into_iter()
        .map(|s| SituationAnnotation { features: Some("features.gsra".into()), ..s.annotation })
        .collect();
    save_dataset(&args.out.join("dataset.jsonl"), &anns)?;
    println!(
        "wrote {} images ({} verbs, {}x{}x{} features) to {}",
        anns.len(),
        space.num_verbs(),
        grid.channels,
        grid.height,
        grid.width,
        args.out.display()
    );
    Ok(())
}

fn model_config(flags: &ModelFlags, run: &RunConfig, first: &FeatureGrid) -> Result<ModelConfig> {
    let base = ModelConfig::desk(first.channels, first.height, first.width);
    let mut cfg = merged(base, run.model.as_ref(), "model")?;
    set(&mut cfg.d, flags.d);
    set(&mut cfg.d_v, flags.d_v);
    set(&mut cfg.d_r, flags.d_r);
    if flags.d_r.is_none() && (flags.d.is_some() || flags.d_v.is_some()) {
        cfg.d_r = cfg.d.saturating_sub(cfg.d_v);
    }
    set(&mut cfg.heads, flags.heads);
    set(&mut cfg.encoder_layers, flags.encoder_layers);
    set(&mut cfg.decoder_layers, flags.decoder_layers);
    set(&mut cfg.ffn_dim, flags.ffn_dim);
    set(&mut cfg.dropout.transformer, flags.dropout);
    if flags.post_ln {
        cfg.pre_ln = false;
    }
    if flags.backbone {
        cfg.backbone = true;
    }
    if let Some(p) = &flags.precision {
        cfg.precision = match p.as_str() {
            "f64" => Precision::F64,
            "f32" => Precision::F32,
            other => return Err(Error::InvalidArgument(format!("precision must be f64 or f32, got {other}"))),
        };
    }
    if (cfg.channels, cfg.grid_h, cfg.grid_w) != (first.channels, first.height, first.width) {
        return Err(Error::validation(
            "model config",
            format!(
                "grid {}x{}x{} does not match features {}x{}x{}",
                cfg.channels, cfg.grid_h, cfg.grid_w, first.channels, first.height, first.width
            ),
        ));
    }
    Ok(cfg)
}

fn train_cmd(args: TrainArgs, run: &RunConfig) -> Result<()> {
    let seed = require_seed(args.seed.or(run.seed), "train")?;
    require_inputs(&[&args.space, &args.dataset])?;
    let data = Loaded::read(&args.space, &args.dataset)?;
    let pairs = data.pairs();
    let first = pairs.first().ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))?.1;
    let mcfg = model_config(&args.model, run, first)?;

    let mut tcfg = merged(desk_training(), run.train.as_ref(), "train")?;
    tcfg.seed = seed;
    set(&mut tcfg.epochs, args.epochs);
    set(&mut tcfg.batch_size, args.batch_size);
    if args.max_steps.is_some() {
        tcfg.max_steps = args.max_steps;
    }
    set(&mut tcfg.optimizer.lr, args.lr);
    set(&mut tcfg.optimizer.backbone_lr, args.backbone_lr);
    set(&mut tcfg.optimizer.weight_decay, args.weight_decay);
    set(&mut tcfg.optimizer.clip_norm, args.clip_norm);
    let log = args.log.unwrap_or_else(|| {
        let mut s = args.checkpoint.clone().into_os_string();
        s.push(".log.jsonl");
        PathBuf::from(s)
    });
    for p in [&args.checkpoint, &log] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    tcfg.checkpoint = Some(args.checkpoint.clone());
    tcfg.log = Some(log.clone());

    let mut model = Model::new(mcfg, &data.space, seed)?;
    println!("model: {} parameters", model.count_parameters());
    let report = train(&mut model, &data.space, &pairs, &tcfg)?;
    if let Some(last) = report.epochs.last() {
        println!(
            "trained {} steps over {} epochs; last epoch loss {:.4} (verb {:.4}, noun {:.4})",
            report.steps,
            report.epochs.len(),
            last.total,
            last.verb,
            last.noun
        );
    }
    println!("checkpoint: {}\nlog: {}", args.checkpoint.display(), log.display());
    Ok(())
}

fn predict_cmd(args: PredictArgs) -> Result<()> {
    require_inputs(&[&args.space, &args.dataset, &args.checkpoint])?;
    let data = Loaded::read(&args.space, &args.dataset)?;
    let (model, _) = Model::load(&args.checkpoint, &data.space)?;
    let records = model.predict_dataset(&data.space, &data.pairs(), args.top_k)?;
    save_records(&args.out, &records)?;
    println!("wrote {} prediction records to {}", records.len(), args.out.display());
    Ok(())
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    require_inputs(&[&args.space, &args.dataset, &args.predictions])?;
    let space = FrameSpace::load(&args.space)?;
    let anns = load_dataset(&args.dataset, &space)?;
    let records = load_records(&args.predictions)?;
    let report = evaluate(&anns, &records, &space)?;
    if let Some(out) = &args.out {
        write_text(out, &serde_json::to_string_pretty(&report).expect("serializable report"))?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn retrieve_cmd(args: RetrieveArgs) -> Result<()> {
    require_inputs(&[&args.predictions])?;
    let records = load_records(&args.predictions)?;
    let index = build_index(records)?;
    let probe = index
        .get(&args.query)
        .ok_or_else(|| Error::InvalidArgument(format!("query image {} not in predictions", args.query)))?
        .clone();
    let hits = index.query(&probe, args.k)?;
    println!("{:>4}  {:<24} {:>8}  top-1 verb", "rank", "image", "score");
    for (i, h) in hits.iter().enumerate() {
        let verb = index.get(&h.image_id).map(|r| r.top1().verb.as_str()).unwrap_or("");
        println!("{:>4}  {:<24} {:>8.4}  {}", i + 1, h.image_id, h.score, verb);
    }
    if let Some(p) = &args.json {
        write_text(p, &serde_json::to_string_pretty(&hits).expect("serializable hits"))?;
    }
    Ok(())
}

fn dump_attention_cmd(args: DumpAttentionArgs) -> Result<()> {
    require_inputs(&[&args.space, &args.dataset, &args.checkpoint])?;
    let data = Loaded::read(&args.space, &args.dataset)?;
    let (model, _) = Model::load(&args.checkpoint, &data.space)?;
    let (ann, grid) = data.grid(&args.image)?;
    let verb = match &args.verb {
        Some(v) => data.space.verb_id(v).ok_or_else(|| Error::validation("--verb", format!("verb \"{v}\" not in space")))?,
        None => model.infer(&data.space, grid, ann.width, ann.height)?.verb,
    };
    let trace = model.extract_attention(&data.space, grid, verb, &args.image)?;
    let files = trace.write_dir(&args.out)?;
    println!(
        "wrote {} attention matrices for {} ({}) to {}",
        files.len().saturating_sub(1),
        args.image,
        data.space.verb_name(verb),
        args.out.display()
    );
    Ok(())
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let run = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let workers = cli.workers.or(run.workers).unwrap_or(1);
    if workers == 0 {
        return Err(Error::InvalidArgument("--workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::GenData(a) => gen_data(a, &run),
        Command::Train(a) => train_cmd(a, &run),
        Command::Predict(a) => predict_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Retrieve(a) => retrieve_cmd(a),
        Command::DumpAttention(a) => dump_attention_cmd(a),
    })
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            exit_code(&e)
        }
    }
}

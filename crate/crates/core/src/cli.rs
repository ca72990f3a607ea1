//! Command-line surface. Every command funnels its randomness through one
//! global seed (flag > `CONTRASTIVE_PATH_SEED` > config file) and writes
//! deterministic artifacts, so reruns with fixed inputs are byte-identical.
//!
//! Exit codes: 0 success, 1 runtime/data error, 2 usage error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{self, TensorEntry};
use crate::cluster::{elbow_scan, explained_variance, minibatch_kmeans, Points};
use crate::config::{self, RunConfig, SEED_ENV};
use crate::data::{
    build_pretraining_set, load_manifests, write_manifest, ManifestRecord, SamplingPolicy, SourceKind,
    TagFilters,
};
use crate::eval::{encode_features, split, sweep, EvalMode, Labels};
use crate::imaging::{load_rgb, save_png, tile_source, ImagePatch, PatchMeta, ResolutionTag};
use crate::model::{init_model, Model};
use crate::rng::RngStream;
use crate::tensorgrad::{grad_check_with_corruption, ParamSpec, Tape, TensorId};
use crate::train::{loss_trace_export, pretrain};

/// Command result: distinguishes usage errors (exit 2) from runtime ones
/// (exit 1) so callers get a stable exit-code contract.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

type CmdResult = Result<(), CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "histossl",
    about = "Contrastive self-supervised pretraining and evaluation for histology-style image patches",
    version
)]
pub struct Cli {
    /// Size of the internal worker pool (0 = number of cores). Never
    /// changes any output, only wall-clock time.
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut source rasters into patches, keeping tissue-bearing ones.
    Tile(TileArgs),
    /// Draw a diversity-sampled pretraining set from manifests.
    Sample(SampleArgs),
    /// Contrastive pretraining on a patch list.
    Pretrain(PretrainArgs),
    /// Linear probe on frozen encoder features.
    Probe(EvalArgs),
    /// Fine-tune all encoder parameters with a fresh head.
    Finetune(EvalArgs),
    /// Mini-batch k-means over a features file.
    Cluster(ClusterArgs),
    /// Render a sweep results CSV as an SVG chart.
    Report(ReportArgs),
    /// Finite-difference verification of the gradient engine.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct TileArgs {
    /// Directory of PNG/BMP source rasters.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 224)]
    pub side: usize,
    #[arg(long, default_value_t = 224)]
    pub stride: usize,
    /// Minimum foreground (tissue) fraction for a patch to be kept.
    #[arg(long = "min-fg", default_value_t = 0.5)]
    pub min_fg: f64,
    #[arg(long, default_value = "dataset")]
    pub dataset_id: String,
    #[arg(long, default_value = "unknown")]
    pub organ: String,
    #[arg(long, default_value = "unknown")]
    pub stain: String,
    /// Resolution tag: 10x, 20x, 40x, or unknown.
    #[arg(long, default_value = "unknown")]
    pub resolution: String,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Manifest files (*.manifest.jsonl).
    #[arg(long, required = true, num_args = 1..)]
    pub manifests: Vec<PathBuf>,
    #[arg(long, default_value_t = 100.0)]
    pub percent: f64,
    /// Per-source patch cap for WSI datasets.
    #[arg(long, default_value_t = 100)]
    pub cap: usize,
    #[arg(long = "filter-resolution")]
    pub filter_resolution: Vec<String>,
    #[arg(long = "filter-organ")]
    pub filter_organ: Vec<String>,
    #[arg(long = "filter-stain")]
    pub filter_stain: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output list (manifest-format JSONL of the selected entries).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Patch list produced by `tile` or `sample` (manifest JSONL).
    #[arg(long)]
    pub list: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Encoder checkpoint (.sslh); omit to evaluate a random init.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// CSV of `path,label` rows; paths resolve relative to this file.
    #[arg(long)]
    pub labels: PathBuf,
    /// Task: classification or regression.
    #[arg(long, default_value = "classification")]
    pub task: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of training labels to use, in percent.
    #[arg(long, default_value_t = 100.0)]
    pub percent: f64,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also save frozen encoder features as a features file.
    #[arg(long = "dump-features")]
    pub dump_features: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    /// Features file: checkpoint container with one `features` entry.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    /// Comma-separated ascending k values for an elbow scan.
    #[arg(long)]
    pub elbow: Option<String>,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value_t = 300)]
    pub iters: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// `ops` checks each primitive; `full` checks the composed
    /// encode -> project -> contrastive-loss pipeline.
    #[arg(long, default_value = "ops")]
    pub mode: String,
    /// Negative control: corrupt analytic gradients and expect failure.
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

/// Parse and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if cli.workers > 0 {
        // ignore failure: the global pool can only be configured once
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global();
    }
    let result = match cli.command {
        Command::Tile(a) => cmd_tile(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Probe(a) => cmd_eval(&a, EvalMode::LinearProbe),
        Command::Finetune(a) => cmd_eval(&a, EvalMode::FineTune),
        Command::Cluster(a) => cmd_cluster(&a),
        Command::Report(a) => cmd_report(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

fn resolve_seed(flag: Option<u64>, config_seed: u64) -> Result<u64, CliError> {
    config::resolve_seed(flag, env_seed().as_deref(), config_seed).map_err(usage)
}

fn parse_resolution(s: &str) -> Result<ResolutionTag, CliError> {
    s.parse::<ResolutionTag>().map_err(usage)
}

fn cmd_tile(a: &TileArgs) -> CmdResult {
    if !(0.0..=1.0).contains(&a.min_fg) {
        return Err(CliError::Usage(format!("--min-fg {} outside [0, 1]", a.min_fg)));
    }
    if a.side == 0 || a.stride == 0 {
        return Err(CliError::Usage("--side and --stride must be >= 1".into()));
    }
    let resolution = parse_resolution(&a.resolution)?;
    let mut sources: Vec<PathBuf> = std::fs::read_dir(&a.input)
        .map_err(|e| CliError::Usage(format!("cannot read --input {}: {e}", a.input.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "bmp")
            )
        })
        .collect();
    sources.sort();
    std::fs::create_dir_all(&a.out).map_err(runtime)?;
    let mut records = Vec::new();
    for src in &sources {
        let source_id = src.file_stem().and_then(|s| s.to_str()).unwrap_or("source").to_string();
        let image = load_rgb(src).map_err(runtime)?;
        let patch_dir = a.out.join(&a.dataset_id).join(&source_id);
        std::fs::create_dir_all(&patch_dir).map_err(runtime)?;
        for mut patch in tile_source(&image, a.side, a.stride, a.min_fg) {
            patch.meta = PatchMeta {
                dataset_id: a.dataset_id.clone(),
                source_id: source_id.clone(),
                x: patch.meta.x,
                y: patch.meta.y,
                resolution_tag: resolution,
            };
            let rel = format!("{}/{}/{}_{}.png", a.dataset_id, source_id, patch.meta.y, patch.meta.x);
            save_png(&patch, &a.out.join(&rel)).map_err(runtime)?;
            records.push(ManifestRecord {
                dataset_id: a.dataset_id.clone(),
                kind: SourceKind::Wsi,
                organ: a.organ.clone(),
                stain: a.stain.clone(),
                resolution_tag: resolution,
                path: rel,
                source_id: source_id.clone(),
                x: patch.meta.x,
                y: patch.meta.y,
            });
        }
    }
    if sources.is_empty() {
        eprintln!("warning: no PNG/BMP sources found in {}", a.input.display());
    }
    let manifest = a.out.join(format!("{}.manifest.jsonl", a.dataset_id));
    write_manifest(&manifest, &records).map_err(runtime)?;
    println!("tiled {} sources into {} patches ({})", sources.len(), records.len(), manifest.display());
    Ok(())
}

fn cmd_sample(a: &SampleArgs) -> CmdResult {
    let seed = resolve_seed(a.seed, 0)?;
    let mut resolutions = Vec::new();
    for r in &a.filter_resolution {
        resolutions.push(parse_resolution(r)?);
    }
    let collection = load_manifests(&a.manifests).map_err(runtime)?;
    let policy = SamplingPolicy {
        per_wsi_cap: a.cap,
        percent: a.percent,
        filters: TagFilters {
            organs: a.filter_organ.clone(),
            stains: a.filter_stain.clone(),
            resolutions,
        },
        seed,
        ..SamplingPolicy::default()
    };
    policy.validate().map_err(usage)?;
    let selected = build_pretraining_set(&collection, &policy).map_err(runtime)?;
    write_manifest(&a.out, &selected).map_err(runtime)?;
    println!("sampled {} of {} entries into {}", selected.len(), collection.total_entries(), a.out.display());
    Ok(())
}

/// Load every patch named by a manifest list; relative paths resolve
/// against the list's own directory.
fn load_listed_patches(list: &Path) -> Result<Vec<ImagePatch>, CliError> {
    let base = list.parent().unwrap_or_else(|| Path::new("."));
    let collection = load_manifests(&[list]).map_err(runtime)?;
    let mut patches = Vec::new();
    for ds in &collection.datasets {
        for rec in &ds.entries {
            let p = PathBuf::from(&rec.path);
            let full = if p.is_absolute() { p } else { base.join(p) };
            let mut patch = load_rgb(&full).map_err(runtime)?;
            patch.meta = PatchMeta {
                dataset_id: rec.dataset_id.clone(),
                source_id: rec.source_id.clone(),
                x: rec.x,
                y: rec.y,
                resolution_tag: rec.resolution_tag,
            };
            patches.push(patch);
        }
    }
    Ok(patches)
}

fn load_run_config(path: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => config::load_config(p).map_err(usage),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_pretrain(a: &PretrainArgs) -> CmdResult {
    let mut cfg = load_run_config(a.config.as_ref())?;
    let seed = resolve_seed(a.seed, cfg.seed)?;
    cfg.apply_seed(seed);
    let patches = load_listed_patches(&a.list)?;
    std::fs::create_dir_all(&a.out).map_err(runtime)?;
    config::write_resolved(&cfg, &a.out.join("resolved_config.toml")).map_err(runtime)?;
    let mut model = init_model(&cfg.encoder, &cfg.projection, seed).map_err(runtime)?;
    let trace = pretrain(&mut model, &patches, &cfg.pretrain, Some(&a.out)).map_err(runtime)?;
    loss_trace_export(&trace, &a.out.join("loss_trace.csv")).map_err(runtime)?;
    match (trace.first_mean(), trace.last_mean()) {
        (Some(first), Some(last)) => {
            println!("pretrained {} epochs: loss {first:.6} -> {last:.6}", trace.rows.len());
        }
        _ => println!("pretrained 0 epochs (no optimization steps)"),
    }
    Ok(())
}

/// Parse a `path,label` CSV. Classification labels must be integers;
/// regression labels any float.
fn load_labeled(labels_path: &Path, task: &str) -> Result<(Vec<ImagePatch>, Labels), CliError> {
    let text = std::fs::read_to_string(labels_path)
        .map_err(|e| CliError::Usage(format!("cannot read --labels {}: {e}", labels_path.display())))?;
    let base = labels_path.parent().unwrap_or_else(|| Path::new("."));
    let mut patches = Vec::new();
    let mut class_labels = Vec::new();
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line.trim() == "path,label" {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let Some((path, label)) = line.split_once(',') else {
            return Err(CliError::Runtime(format!(
                "{}:{}: expected 'path,label'",
                labels_path.display(),
                i + 1
            )));
        };
        let p = PathBuf::from(path.trim());
        let full = if p.is_absolute() { p } else { base.join(p) };
        patches.push(load_rgb(&full).map_err(runtime)?);
        match task {
            "classification" => class_labels.push(label.trim().parse::<usize>().map_err(|_| {
                CliError::Runtime(format!(
                    "{}:{}: bad class label '{label}'",
                    labels_path.display(),
                    i + 1
                ))
            })?),
            "regression" => values.push(label.trim().parse::<f64>().map_err(|_| {
                CliError::Runtime(format!(
                    "{}:{}: bad regression target '{label}'",
                    labels_path.display(),
                    i + 1
                ))
            })?),
            other => return Err(CliError::Usage(format!("unknown --task '{other}'"))),
        }
    }
    let labels = if task == "classification" {
        let k = class_labels.iter().max().map_or(0, |&m| m + 1);
        Labels::Classes { labels: class_labels, k }
    } else {
        Labels::Values(values)
    };
    Ok((patches, labels))
}

fn cmd_eval(a: &EvalArgs, mode: EvalMode) -> CmdResult {
    let mut cfg = load_run_config(a.config.as_ref())?;
    let seed = resolve_seed(a.seed, cfg.seed)?;
    cfg.apply_seed(seed);
    cfg.eval.mode = mode;
    if !(a.percent > 0.0 && a.percent <= 100.0) {
        return Err(CliError::Usage(format!("--percent {} outside (0, 100]", a.percent)));
    }
    let model = match &a.checkpoint {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
            }
            Model::load(path).map_err(runtime)?
        }
        None => init_model(&cfg.encoder, &cfg.projection, seed).map_err(runtime)?,
    };
    let (patches, labels) = load_labeled(&a.labels, &a.task)?;
    if let Some(p) = patches.iter().find(|p| p.width != model.encoder.input_side) {
        return Err(CliError::Runtime(format!(
            "labeled patch side {} does not match model input side {}",
            p.width, model.encoder.input_side
        )));
    }
    let sp = split(&labels, &cfg.split).map_err(runtime)?;
    for w in &sp.warnings {
        eprintln!("warning: {w}");
    }
    std::fs::create_dir_all(&a.out).map_err(runtime)?;
    config::write_resolved(&cfg, &a.out.join("resolved_config.toml")).map_err(runtime)?;
    if let Some(fpath) = &a.dump_features {
        let feat = encode_features(&model, &patches).map_err(runtime)?;
        let entry = TensorEntry::new("features", &[feat.n, feat.d], feat.data);
        checkpoint::save(fpath, &[entry]).map_err(runtime)?;
    }
    let init_name = if a.checkpoint.is_some() { "checkpoint" } else { "random" };
    let table = sweep(
        &[(init_name.to_string(), model)],
        &patches,
        &labels,
        &sp,
        cfg.split.seed,
        &cfg.eval,
        &[a.percent],
        a.repeats,
    )
    .map_err(runtime)?;
    crate::report::write_results(&table, &a.out.join("results.csv")).map_err(runtime)?;
    let agg = &table.aggregates[0];
    println!(
        "{init_name} {} at {}% labels: {} = {:.4} +/- {:.4} over {} runs",
        match mode {
            EvalMode::LinearProbe => "linear probe",
            EvalMode::FineTune => "fine-tune",
        },
        a.percent,
        agg.metric_name,
        agg.mean,
        agg.std,
        a.repeats
    );
    Ok(())
}

fn cmd_cluster(a: &ClusterArgs) -> CmdResult {
    let seed = resolve_seed(a.seed, 0)?;
    let entries = checkpoint::load(&a.features).map_err(runtime)?;
    let feat = checkpoint::find(&entries, "features").map_err(runtime)?;
    if feat.dims.len() != 2 {
        return Err(CliError::Runtime(format!(
            "features entry must be 2-dimensional, got {:?}",
            feat.dims
        )));
    }
    let (n, d) = (feat.dims[0], feat.dims[1]);
    let points = Points::new(&feat.data, n, d).map_err(runtime)?;
    std::fs::create_dir_all(&a.out).map_err(runtime)?;
    match (&a.k, &a.elbow) {
        (Some(k), None) => {
            let model = minibatch_kmeans(&points, *k, a.batch, a.iters, seed).map_err(runtime)?;
            let ev = explained_variance(&points, &model).map_err(runtime)?;
            let mut csv = String::from("index,cluster_id\n");
            for (i, c) in model.assignments.iter().enumerate() {
                csv.push_str(&format!("{i},{c}\n"));
            }
            std::fs::write(a.out.join("assignments.csv"), csv).map_err(runtime)?;
            let centroids: Vec<f32> = model.centroids.iter().map(|&v| v as f32).collect();
            let entry = TensorEntry::new("centroids", &[*k, d], centroids);
            checkpoint::save(&a.out.join("centroids.sslh"), &[entry]).map_err(runtime)?;
            println!("k={k}: inertia {:.4}, explained variance {ev:.4}", model.inertia);
        }
        (None, Some(list)) => {
            let mut ks = Vec::new();
            for part in list.split(',') {
                ks.push(
                    part.trim()
                        .parse::<usize>()
                        .map_err(|_| CliError::Usage(format!("bad k value '{part}' in --elbow")))?,
                );
            }
            let table = elbow_scan(&points, &ks, a.batch, a.iters, seed).map_err(runtime)?;
            let mut csv = String::from("k,explained_variance\n");
            for (k, ev) in &table {
                csv.push_str(&format!("{k},{ev:.6}\n"));
            }
            std::fs::write(a.out.join("elbow.csv"), csv).map_err(runtime)?;
            println!("elbow scan over {} values written", table.len());
        }
        _ => return Err(CliError::Usage("pass exactly one of --k or --elbow".into())),
    }
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> CmdResult {
    let table = crate::report::read_results(&a.results).map_err(runtime)?;
    crate::report::write_sweep_svg(&table, &a.out).map_err(runtime)?;
    println!("chart with {} cells written to {}", table.aggregates.len(), a.out.display());
    Ok(())
}

/// Small deterministic value pool for gradcheck inputs.
fn gradcheck_values(n: usize, label: &str) -> Vec<f64> {
    let mut rng = RngStream::from_parts(&[0x47434845]).derive(label);
    (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

type Check = Box<dyn Fn(&mut Tape<f64>, &[TensorId]) -> crate::tensorgrad::Result<TensorId>>;

fn op_checks() -> Vec<(&'static str, Vec<ParamSpec>, Check)> {
    let mut checks: Vec<(&'static str, Vec<ParamSpec>, Check)> = Vec::new();
    checks.push((
        "linear",
        vec![
            ParamSpec::new("x", &[3, 4], gradcheck_values(12, "lin/x")),
            ParamSpec::new("w", &[4, 2], gradcheck_values(8, "lin/w")),
            ParamSpec::new("b", &[2], gradcheck_values(2, "lin/b")),
        ],
        Box::new(|t, p| {
            let y = t.linear(p[0], p[1], p[2])?;
            t.sum(y)
        }),
    ));
    checks.push((
        "conv2d",
        vec![
            ParamSpec::new("x", &[1, 2, 5, 5], gradcheck_values(50, "conv/x")),
            ParamSpec::new("w", &[3, 2, 3, 3], gradcheck_values(54, "conv/w")),
            ParamSpec::new("b", &[3], gradcheck_values(3, "conv/b")),
        ],
        Box::new(|t, p| {
            let y = t.conv2d(p[0], p[1], p[2], 2, 1)?;
            let r = t.relu(y)?;
            t.sum(r)
        }),
    ));
    checks.push((
        "global_avg_pool",
        vec![ParamSpec::new("x", &[2, 3, 4, 4], gradcheck_values(96, "gap/x"))],
        Box::new(|t, p| {
            let y = t.global_avg_pool(p[0])?;
            t.sum(y)
        }),
    ));
    checks.push((
        "l2_normalize",
        vec![ParamSpec::new("x", &[4, 6], gradcheck_values(24, "l2n/x"))],
        Box::new(|t, p| {
            let y = t.l2_normalize(p[0], 1e-12)?;
            t.sum(y)
        }),
    ));
    checks.push((
        "nt_xent",
        vec![ParamSpec::new("z", &[4, 8], gradcheck_values(32, "ntx/z"))],
        Box::new(|t, p| t.nt_xent(p[0], 0.1)),
    ));
    checks.push((
        "softmax_cross_entropy",
        vec![ParamSpec::new("logits", &[5, 3], gradcheck_values(15, "sce/x"))],
        Box::new(|t, p| t.softmax_cross_entropy(p[0], &[0, 2, 1, 1, 0])),
    ));
    checks.push((
        "l1_loss",
        vec![ParamSpec::new("pred", &[6, 1], gradcheck_values(6, "l1/x"))],
        Box::new(|t, p| t.l1_loss(p[0], &[0.3, -0.2, 0.8, 0.1, -0.9, 0.4])),
    ));
    checks
}

fn full_pipeline_check(corrupt: bool) -> Result<bool, CliError> {
    // a miniature encode -> project -> contrastive-loss graph
    let params = vec![
        ParamSpec::new("conv_w", &[4, 3, 3, 3], gradcheck_values(108, "full/conv_w")),
        ParamSpec::new("conv_b", &[4], gradcheck_values(4, "full/conv_b")),
        ParamSpec::new("fc1_w", &[4, 4], gradcheck_values(16, "full/fc1_w")),
        ParamSpec::new("fc1_b", &[4], gradcheck_values(4, "full/fc1_b")),
        ParamSpec::new("fc2_w", &[4, 3], gradcheck_values(12, "full/fc2_w")),
        ParamSpec::new("fc2_b", &[3], gradcheck_values(3, "full/fc2_b")),
    ];
    let input = gradcheck_values(4 * 3 * 6 * 6, "full/input");
    let f = move |t: &mut Tape<f64>, p: &[TensorId]| {
        let x = t.leaf(&[4, 3, 6, 6], input.clone(), false)?;
        let c = t.conv2d(x, p[0], p[1], 2, 1)?;
        let r = t.relu(c)?;
        let g = t.global_avg_pool(r)?;
        let h = t.linear(g, p[2], p[3])?;
        let h = t.relu(h)?;
        let o = t.linear(h, p[4], p[5])?;
        let z = t.l2_normalize(o, 1e-12)?;
        t.nt_xent(z, 0.1)
    };
    let report = grad_check_with_corruption(&f, &params, 1e-5, corrupt).map_err(runtime)?;
    for (name, err) in &report.per_param {
        println!("  full/{name}: max relative error {err:.3e}");
    }
    Ok(report.passed())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CmdResult {
    let mut all_passed = true;
    match a.mode.as_str() {
        "ops" => {
            for (name, params, f) in op_checks() {
                let report = grad_check_with_corruption(&f, &params, 1e-6, a.corrupt).map_err(runtime)?;
                let status = if report.passed() { "ok" } else { "FAIL" };
                println!("{name}: {status} (max relative error {:.3e})", report.max_error());
                all_passed &= report.passed();
            }
        }
        "full" => {
            all_passed = full_pipeline_check(a.corrupt)?;
            println!("full pipeline: {}", if all_passed { "ok" } else { "FAIL" });
        }
        other => return Err(CliError::Usage(format!("unknown --mode '{other}' (use ops or full)"))),
    }
    if all_passed {
        Ok(())
    } else {
        Err(CliError::Runtime("gradient check failed".into()))
    }
}

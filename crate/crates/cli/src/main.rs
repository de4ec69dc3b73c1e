//! `bgt`: synthesize slides, train, evaluate, cross-validate, predict and
//! export prediction maps.
//!
//! Exit codes: 0 ok, 2 usage, 3 numeric failure, 4 artifact or format
//! mismatch.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bg_triplex::data::{
    load_dataset_with, synth_dataset_with, write_dataset, DatasetManifest, GeneSelection, ProviderKind, SpotDataset,
    SynthConfig, ToySource,
};
use bg_triplex::evaluation::{export_prediction_map, write_prediction_table, MetricsReport, PcchSelector};
use bg_triplex::model::{load_checkpoint, save_checkpoint, GuideMode, ModelConfig, ModelParams};
use bg_triplex::numerics::Tensor;
use bg_triplex::training::{
    cross_validate, select_genes, targets_for, train, write_loss_csv, FoldStrategy, TrainSlide,
};
use bg_triplex::Error;
use clap::{Args, Parser, Subcommand};

use crate::config::{FoldBy, RunConfig};

#[derive(Debug)]
enum Failure {
    Usage(String),
    Numeric(String),
    Artifact(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Numeric(_) => 3,
            Failure::Artifact(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Numeric(m) | Failure::Artifact(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Argument(_) => Failure::Usage(msg),
            Error::NonFinite { .. } | Error::Evaluation(_) | Error::DegenerateAttention | Error::UndefinedMetric(_) => {
                Failure::Numeric(msg)
            }
            Error::Dimension { .. }
            | Error::Parse { .. }
            | Error::Format { .. }
            | Error::Config(_)
            | Error::Json(_)
            | Error::Io { .. } => Failure::Artifact(msg),
        }
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Parser, Debug)]
#[command(name = "bgt", version, about = "Boundary-guided three-branch gene expression prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic slide: spots, expression, BGFT features, manifest.
    Synth(SynthArgs),
    /// Train a model and write its checkpoint and loss log.
    Train(RunFlags),
    /// Score a checkpoint on one or more slides.
    Eval(CheckpointArgs),
    /// Cross-validate over held-out slides or patients.
    Cv(RunFlags),
    /// Write per-spot predictions of every gene.
    Predict(CheckpointArgs),
    /// Write the prediction map of one gene as CSV and PGM.
    ExportMap(ExportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    #[arg(long)]
    genes: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_sd: f64,
    /// Feature tokens per stream (a square number).
    #[arg(long, default_value_t = 4)]
    grid_tokens: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Patient label recorded in the manifest.
    #[arg(long)]
    patient: Option<String>,
    #[arg(short = 'o', long)]
    output: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug, Default)]
struct RunFlags {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset manifest; repeat for several slides.
    #[arg(long = "data")]
    data: Vec<PathBuf>,
    #[arg(short = 'o', long)]
    output: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    #[arg(long)]
    provider: Option<ProviderKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    step_size: Option<usize>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    d_context: Option<usize>,
    #[arg(long)]
    k_genes: Option<usize>,
    #[arg(long)]
    clip_grad_norm: Option<f64>,
    /// Let branch losses back-propagate into the fused prediction.
    #[arg(long)]
    no_distill_detach: bool,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    tokens_per_stream: Option<usize>,
    #[arg(long)]
    guide_mode: Option<GuideMode>,
    #[arg(long)]
    drop_spot: bool,
    #[arg(long)]
    drop_ctx: bool,
    #[arg(long)]
    drop_global: bool,
    #[arg(long)]
    no_edge_spot: bool,
    #[arg(long)]
    no_nuclei_spot: bool,
    #[arg(long)]
    no_edge_ctx: bool,
    #[arg(long)]
    no_nuclei_ctx: bool,
    #[arg(long)]
    pcch_selector: Option<PcchSelector>,
    #[arg(long)]
    top_genes: Option<usize>,
    #[arg(long, value_enum)]
    folds: Option<FoldBy>,
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    gene: String,
    #[command(flatten)]
    inner: CheckpointArgs,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

impl RunFlags {
    /// Config file (or defaults) with every given flag applied on top.
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut c = match &self.config {
            Some(p) => RunConfig::read(p).map_err(Failure::Usage)?,
            None => RunConfig::default(),
        };
        let t = &mut c.train;
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(t.seed, self.seed);
        set!(t.epochs, self.epochs);
        set!(t.lr, self.lr);
        set!(t.step_size, self.step_size);
        set!(t.decay, self.decay);
        set!(t.batch_size, self.batch_size);
        set!(t.lambda, self.lambda);
        set!(t.d_context, self.d_context);
        set!(t.k_genes, self.k_genes);
        if self.clip_grad_norm.is_some() {
            t.clip_grad_norm = self.clip_grad_norm;
        }
        if self.no_distill_detach {
            t.distill_detach = false;
        }
        set!(c.d_model, self.d_model);
        set!(c.n_heads, self.n_heads);
        if self.tokens_per_stream.is_some() {
            c.tokens_per_stream = self.tokens_per_stream;
        }
        set!(c.provider, self.provider);
        set!(c.guide_mode, self.guide_mode);
        set!(c.pcch_selector, self.pcch_selector);
        set!(c.top_genes, self.top_genes);
        set!(c.folds, self.folds);
        if !self.data.is_empty() {
            c.datasets = self.data.clone();
        }
        if self.output.is_some() {
            c.output = self.output.clone();
        }
        let a = &mut c.ablation;
        a.drop_spot |= self.drop_spot;
        a.drop_ctx |= self.drop_ctx;
        a.drop_global |= self.drop_global;
        a.no_edge_spot |= self.no_edge_spot;
        a.no_nuclei_spot |= self.no_nuclei_spot;
        a.no_edge_ctx |= self.no_edge_ctx;
        a.no_nuclei_ctx |= self.no_nuclei_ctx;
        c.validate().map_err(Failure::Usage)?;
        Ok(c)
    }
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    cfg.output.clone().ok_or_else(|| usage("missing output directory (-o)"))
}

/// Creates `dir` and refuses to replace any of `files` unless `force`.
fn claim_outputs(dir: &Path, files: &[PathBuf], force: bool) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Failure::Artifact(format!("{}: {e}", dir.display())))?;
    if !force {
        if let Some(f) = files.iter().find(|f| f.exists()) {
            return Err(usage(format!("{} exists; pass --force to overwrite", f.display())));
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Failure::Artifact(format!("{}: {e}", path.display())))
}

fn load_all(cfg: &RunConfig) -> Result<Vec<(SpotDataset, DatasetManifest)>, Failure> {
    if cfg.datasets.is_empty() {
        return Err(usage("no dataset manifests given (--data)"));
    }
    let mut out = Vec::with_capacity(cfg.datasets.len());
    for p in &cfg.datasets {
        let (ds, m) = load_dataset_with(p, cfg.provider)?;
        if let Some(t) = cfg.tokens_per_stream {
            if ds.tokens_per_stream() != t {
                return Err(Failure::Artifact(format!(
                    "{}: {} tokens per stream, config expects {t}",
                    p.display(),
                    ds.tokens_per_stream()
                )));
            }
        }
        out.push((ds, m));
    }
    Ok(out)
}

fn model_config(cfg: &RunConfig, sel: &GeneSelection, ds: &SpotDataset) -> ModelConfig {
    let mut mc = ModelConfig::new(
        cfg.d_model,
        cfg.n_heads,
        cfg.train.d_context,
        sel.names.len(),
        ds.stream_dims(),
    );
    mc.guide_mode = cfg.guide_mode;
    mc.ablation = cfg.ablation;
    mc.genes = sel.names.clone();
    mc
}

fn stack_rows(parts: &[Tensor]) -> Result<Tensor, Failure> {
    let cols = parts[0].cols();
    let rows = parts.iter().map(Tensor::rows).sum();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Tensor::matrix(rows, cols, data)?)
}

fn table_header() -> String {
    format!("{:<24} {:>10} {:>10} {:>10}", "slide", "MSE", "PCC(M)", "PCC(H)")
}

fn table_row(name: &str, r: &MetricsReport) -> String {
    format!("{:<24} {:>10.4} {:>10.4} {:>10.4}", name, r.mse, r.pcc_m, r.pcc_h)
}

/// Targets for the checkpoint's genes; missing genes are an artifact
/// mismatch.
fn checkpoint_targets(params: &ModelParams, ds: &SpotDataset) -> Result<Tensor, Failure> {
    if params.config.genes.is_empty() {
        return Err(Failure::Artifact("checkpoint records no gene names".into()));
    }
    let sel = GeneSelection {
        indices: Vec::new(),
        names: params.config.genes.clone(),
    };
    targets_for(ds, &sel).map_err(|e| Failure::Artifact(e.to_string()))
}

fn cmd_synth(a: &SynthArgs) -> CmdResult {
    if a.rows == 0 || a.cols == 0 || a.genes == 0 {
        return Err(usage("--rows, --cols and --genes must be positive"));
    }
    if a.output.exists() && !a.force {
        let non_empty = fs::read_dir(&a.output)
            .map(|mut d| d.next().is_some())
            .unwrap_or(true);
        if non_empty {
            return Err(usage(format!(
                "{} exists; pass --force to overwrite",
                a.output.display()
            )));
        }
    }
    let mut sc = SynthConfig::new(a.rows, a.cols, a.genes, a.noise_sd, a.seed);
    sc.grid_tokens = a.grid_tokens;
    let (ds, _) = synth_dataset_with(&sc)?;
    fs::create_dir_all(&a.output).map_err(|e| Failure::Artifact(format!("{}: {e}", a.output.display())))?;
    let toy = ToySource {
        seed: a.seed,
        grid_tokens: sc.grid_tokens,
        dims: sc.dims,
    };
    let manifest = write_dataset(&a.output, &ds, Some(toy))?;
    if let Some(p) = &a.patient {
        let mut m = DatasetManifest::read(&manifest)?;
        m.patient = Some(p.clone());
        write_text(&manifest, &(serde_json::to_string_pretty(&m).unwrap() + "\n"))?;
    }
    println!(
        "wrote {} spots × {} genes to {}",
        ds.len(),
        ds.expr.n_genes(),
        manifest.display()
    );
    Ok(())
}

fn cmd_train(f: &RunFlags) -> CmdResult {
    let cfg = f.resolve()?;
    let out = output_dir(&cfg)?;
    let ck = out.join("model.bgck");
    let loss = out.join("loss.csv");
    let metrics = out.join("train_metrics.json");
    claim_outputs(&out, &[ck.clone(), loss.clone(), metrics.clone()], f.force)?;
    let sets = load_all(&cfg)?;
    let refs: Vec<&SpotDataset> = sets.iter().map(|(d, _)| d).collect();
    let sel = select_genes(&refs, cfg.train.k_genes)?;
    println!("bgt train: {}", cfg.header());
    if sel.names.len() < cfg.train.k_genes {
        println!("k_genes clamped to the {} available genes", sel.names.len());
    }
    let params = ModelParams::init(model_config(&cfg, &sel, refs[0]), cfg.train.seed)?;
    let slides = refs
        .iter()
        .map(|d| Ok(TrainSlide { data: d, targets: targets_for(d, &sel)? }))
        .collect::<Result<Vec<_>, Error>>()?;
    let mut run = train(&slides, params, &cfg.train)?;
    run.params.quantize_f32();
    save_checkpoint(&ck, &run.params)?;
    write_loss_csv(&loss, &run.log)?;
    let preds = refs
        .iter()
        .map(|d| Ok(run.params.forward_slide(d)?.fused))
        .collect::<Result<Vec<_>, Failure>>()?;
    let truths: Vec<Tensor> = slides.iter().map(|s| s.targets.clone()).collect();
    let report = MetricsReport::compute(
        &stack_rows(&preds)?,
        &stack_rows(&truths)?,
        &sel.names,
        cfg.pcch_selector,
        cfg.top_genes,
    )?;
    report.write_json(&metrics)?;
    if let Some(last) = run.log.last() {
        println!("final L_total: {}", last.loss.total);
    }
    println!("train-end {}", table_header());
    println!("train-end {}", table_row("training slides", &report));
    println!("wrote {} and {}", ck.display(), loss.display());
    Ok(())
}

fn cmd_eval(a: &CheckpointArgs) -> CmdResult {
    let cfg = a.run.resolve()?;
    let params = load_checkpoint(&a.checkpoint)?;
    let sets = load_all(&cfg)?;
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    let mut names = Vec::new();
    for (ds, _) in &sets {
        let t = checkpoint_targets(&params, ds)?;
        preds.push(params.forward_slide(ds)?.fused);
        truths.push(t);
        names.push(ds.slide_id.clone());
    }
    let genes = &params.config.genes;
    let report = MetricsReport::compute(
        &stack_rows(&preds)?,
        &stack_rows(&truths)?,
        genes,
        cfg.pcch_selector,
        cfg.top_genes,
    )?;
    println!("{}", table_header());
    println!("{}", table_row(&names.join("+"), &report));
    if let Some(out) = &cfg.output {
        let path = out.join("metrics.json");
        claim_outputs(out, &[path.clone()], a.run.force)?;
        report.write_json(&path)?;
    }
    Ok(())
}

fn cmd_cv(f: &RunFlags) -> CmdResult {
    let cfg = f.resolve()?;
    let out = output_dir(&cfg)?;
    let path = out.join("cv_report.json");
    claim_outputs(&out, &[path.clone()], f.force)?;
    let sets = load_all(&cfg)?;
    let strategy = match cfg.folds {
        FoldBy::Slide => {
            if sets.len() < 2 {
                return Err(usage("leave-one-slide-out needs at least 2 slides"));
            }
            FoldStrategy::LeaveOneSlideOut
        }
        FoldBy::Patient => FoldStrategy::Groups(
            sets.iter()
                .map(|(d, m)| {
                    m.patient
                        .clone()
                        .ok_or_else(|| usage(format!("slide {} has no patient label", d.slide_id)))
                })
                .collect::<Result<_, _>>()?,
        ),
    };
    println!("bgt cv: {}", cfg.header());
    let datasets: Vec<SpotDataset> = sets.into_iter().map(|(d, _)| d).collect();
    let mut template = ModelConfig::new(cfg.d_model, cfg.n_heads, cfg.train.d_context, 1, datasets[0].stream_dims());
    template.guide_mode = cfg.guide_mode;
    template.ablation = cfg.ablation;
    let report = cross_validate(&datasets, &template, &cfg.train, &strategy, cfg.pcch_selector, cfg.top_genes)?;
    println!("{}", table_header());
    for fold in &report.folds {
        println!("{}", table_row(&fold.held_out.join("+"), &fold.metrics));
    }
    println!(
        "{:<24} {:>10} {:>10} {:>10}",
        "mean±sd",
        report.mse.to_string(),
        report.pcc_m.to_string(),
        report.pcc_h.to_string()
    );
    write_text(&path, &(serde_json::to_string_pretty(&report).unwrap() + "\n"))
}

fn cmd_predict(a: &CheckpointArgs) -> CmdResult {
    let cfg = a.run.resolve()?;
    let out = output_dir(&cfg)?;
    let params = load_checkpoint(&a.checkpoint)?;
    let sets = load_all(&cfg)?;
    let paths: Vec<PathBuf> = sets
        .iter()
        .map(|(d, _)| out.join(format!("{}.predictions.tsv", d.slide_id)))
        .collect();
    claim_outputs(&out, &paths, a.run.force)?;
    let genes = if params.config.genes.is_empty() {
        (0..params.config.n_genes).map(|i| format!("out{i}")).collect()
    } else {
        params.config.genes.clone()
    };
    for ((ds, _), path) in sets.iter().zip(&paths) {
        let pred = params.forward_slide(ds)?;
        write_prediction_table(path, &ds.spots, &genes, &pred.fused)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn suggestions(name: &str, genes: &[String]) -> Vec<String> {
    let lower = name.to_lowercase();
    let mut scored: Vec<(usize, &String)> = genes
        .iter()
        .map(|g| (strsim::levenshtein(&lower, &g.to_lowercase()), g))
        .collect();
    scored.sort();
    scored.into_iter().take(3).map(|(_, g)| g.clone()).collect()
}

fn cmd_export_map(a: &ExportArgs) -> CmdResult {
    let cfg = a.inner.run.resolve()?;
    let out = output_dir(&cfg)?;
    let params = load_checkpoint(&a.inner.checkpoint)?;
    let genes = &params.config.genes;
    let Some(j) = genes.iter().position(|g| g == &a.gene) else {
        return Err(usage(format!(
            "unknown gene `{}`; nearest: {}",
            a.gene,
            suggestions(&a.gene, genes).join(", ")
        )));
    };
    let sets = load_all(&cfg)?;
    let files: Vec<(PathBuf, PathBuf)> = sets
        .iter()
        .map(|(d, _)| {
            let stem = format!("{}.{}", d.slide_id, a.gene);
            (out.join(format!("{stem}.csv")), out.join(format!("{stem}.pgm")))
        })
        .collect();
    let all: Vec<PathBuf> = files.iter().flat_map(|(c, p)| [c.clone(), p.clone()]).collect();
    claim_outputs(&out, &all, a.inner.run.force)?;
    for ((ds, _), (csv, pgm)) in sets.iter().zip(&files) {
        let pred = params.forward_slide(ds)?;
        let values: Vec<f64> = (0..ds.len()).map(|i| pred.fused.get(i, j)).collect();
        export_prediction_map(&ds.spots, &values, csv, pgm)?;
        println!("wrote {} and {}", csv.display(), pgm.display());
    }
    Ok(())
}

fn init_threads() -> CmdResult {
    if let Ok(v) = std::env::var("BGT_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("BGT_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(f) => cmd_train(f),
        Command::Eval(a) => cmd_eval(a),
        Command::Cv(f) => cmd_cv(f),
        Command::Predict(a) => cmd_predict(a),
        Command::ExportMap(a) => cmd_export_map(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

//! Subcommands of the `layoutforge` binary.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use layoutforge_core::data::{
    generate_synthetic_corpus, layout_from_json, layout_to_json, load_corpus, save_corpus, CorpusConfig,
};
use layoutforge_core::metrics::{evaluate, render_table, DEFAULT_THRESHOLDS};
use layoutforge_core::pipeline::{scatter_svg, tsne_embed, RankOrder, TsneConfig};
use layoutforge_core::render::DEFAULT_PALETTE;
use layoutforge_core::training::{evaluate_checkpoint, train_from};
use layoutforge_core::{AspectClass, ClassVocab, ModelCheckpoint, TrainingConfig};
use serde_json::Value;

use crate::requests::{run_generate, run_retarget, CanvasSpec, GenerateRequest, RetargetRequest};
use crate::service::{self, Models};

#[derive(Debug, Parser)]
#[command(name = "layoutforge", version, about = "Attribute-conditioned layout generation")]
pub struct Cli {
    /// Storage root for default outputs and the service's job store.
    #[arg(long, env = "LAYOUTFORGE_HOME", default_value = ".layoutforge", global = true)]
    pub home: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic layout corpus as JSON.
    SynthData(SynthArgs),
    /// Train a generator/discriminator pair.
    Train(TrainArgs),
    /// Generate, cluster and rank candidate layouts for element specs.
    Generate(GenerateArgs),
    /// Regenerate a layout for another canvas size.
    Retarget(RetargetArgs),
    /// Print the metric table for a corpus or for a checkpoint's layouts.
    Evaluate(EvaluateArgs),
    /// Plot a candidate set's features with t-SNE, coloured by cluster.
    ClusterPlot(ClusterPlotArgs),
    /// Run the HTTP job service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Corpus config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub size: Option<usize>,
    /// Restrict to one canvas family: portrait, square or landscape.
    #[arg(long)]
    pub aspect: Option<AspectClass>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output JSON file (default: HOME/corpus.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus JSON file.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory (default: HOME/runs/train).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Request JSON with `elements` and `canvas`.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long = "grid-n")]
    pub grid_n: Option<usize>,
    #[arg(long = "rank-order")]
    pub rank_order: Option<RankOrder>,
    /// Output directory (default: HOME/generate).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RetargetArgs {
    /// Adjustment checkpoint trained with order conditioning.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Source layout JSON.
    #[arg(long)]
    pub layout: PathBuf,
    /// Target canvas as WIDTHxHEIGHT pixels.
    #[arg(long)]
    pub canvas: CanvasSpec,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (default: HOME/retarget).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Corpus JSON file.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Evaluate layouts generated from the corpus conditions instead of
    /// the corpus itself.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClusterPlotArgs {
    /// Candidate set JSON written by `generate`.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub perplexity: Option<f64>,
    /// Output SVG (default: HOME/clusters.svg).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Generation checkpoints; one per canvas family.
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    /// Order-conditioned adjustment checkpoint for retargeting.
    #[arg(long)]
    pub adjust_checkpoint: Option<PathBuf>,
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<ModelCheckpoint> {
    ModelCheckpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let home = cli.home;
    match cli.command {
        Command::SynthData(a) => synth(&home, a),
        Command::Train(a) => train(&home, a),
        Command::Generate(a) => generate(&home, a),
        Command::Retarget(a) => retarget(&home, a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::ClusterPlot(a) => cluster_plot(&home, a),
        Command::Serve(a) => serve(&home, a),
    }
}

fn synth(home: &Path, a: SynthArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => toml::from_str::<CorpusConfig>(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => CorpusConfig::default(),
    };
    if let Some(aspect) = a.aspect {
        cfg = CorpusConfig {
            classes: cfg.classes.clone(),
            ..CorpusConfig::for_aspect(aspect, cfg.size, cfg.seed)
        };
    }
    cfg.size = a.size.unwrap_or(cfg.size);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let vocab = ClassVocab::default();
    let layouts = generate_synthetic_corpus(&cfg, &vocab)?;
    let out = a.out.unwrap_or_else(|| home.join("corpus.json"));
    save_corpus(&out, &layouts, &vocab)?;
    println!("wrote {} layouts to {}", layouts.len(), out.display());
    Ok(())
}

fn train(home: &Path, a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainingConfig::load(p)?,
        None => TrainingConfig::default(),
    };
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    let out = a
        .out
        .or(cfg.out_dir.clone())
        .unwrap_or_else(|| home.join("runs").join("train"));
    cfg.out_dir = Some(out.clone());
    let corpus = load_corpus(&a.corpus, &cfg.model.classes)?;
    let resume = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let outcome = train_from(&cfg, &corpus, resume)?;
    if let Some(last) = outcome.losses.last() {
        println!(
            "step {} d_total {:.4} g_total {:.4}",
            last.step, last.d_total, last.g_total
        );
    }
    println!("checkpoint written to {}", out.join("final.lfck").display());
    Ok(())
}

fn generate(home: &Path, a: GenerateArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let mut req: GenerateRequest =
        serde_json::from_str(&read(&a.config)?).with_context(|| format!("parsing {}", a.config.display()))?;
    req.seed = a.seed.unwrap_or(req.seed);
    req.k = a.k.or(req.k);
    req.grid_n = a.grid_n.or(req.grid_n);
    req.rank_order = a.rank_order.or(req.rank_order);
    let (set, output) = run_generate(&req, &ckpt)?;
    let out = a.out.unwrap_or_else(|| home.join("generate"));
    write(
        &out.join("candidates.json"),
        serde_json::to_string_pretty(&output.document)?,
    )?;
    for (n, svg) in output.svgs.iter().enumerate() {
        write(&out.join("svg").join(format!("{n}.svg")), svg)?;
    }
    for c in &set.clusters {
        let best = &set.candidates[c.recommended];
        println!(
            "cluster {}: {} layouts, recommended #{} (cost {:.4})",
            c.cluster,
            c.members.len(),
            c.recommended,
            best.cost.cost
        );
    }
    println!("wrote {} candidates to {}", set.candidates.len(), out.display());
    Ok(())
}

fn retarget(home: &Path, a: RetargetArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let source = layout_from_json(&read(&a.layout)?, &ckpt.config.classes)?;
    let req = RetargetRequest {
        layout: layoutforge_core::data::layout_to_value(&source, &ckpt.config.classes)?,
        canvas: a.canvas,
        seed: a.seed,
    };
    let (layout, output) = run_retarget(&req, &ckpt)?;
    let out = a.out.unwrap_or_else(|| home.join("retarget"));
    write(&out.join("layout.json"), layout_to_json(&layout, &ckpt.config.classes)?)?;
    write(
        &out.join("retarget.json"),
        serde_json::to_string_pretty(&output.document)?,
    )?;
    write(&out.join("layout.svg"), &output.svgs[0])?;
    println!(
        "retargeted to {}x{} ({}), written to {}",
        layout.canvas.width_px,
        layout.canvas.height_px,
        layout.canvas.aspect_class.as_str(),
        out.display()
    );
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> anyhow::Result<()> {
    let (label, report) = match &a.checkpoint {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            let corpus = load_corpus(&a.corpus, &ckpt.config.classes)?;
            (p.display().to_string(), evaluate_checkpoint(&ckpt, &corpus, a.seed)?)
        }
        None => {
            let vocab = ClassVocab::default();
            let corpus = load_corpus(&a.corpus, &vocab)?;
            (
                a.corpus.display().to_string(),
                evaluate(&corpus, &vocab, &DEFAULT_THRESHOLDS)?,
            )
        }
    };
    print!("{}", render_table(&[(label, report.clone())]));
    if let Some(out) = &a.out {
        write(out, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn cluster_plot(home: &Path, a: ClusterPlotArgs) -> anyhow::Result<()> {
    let doc: Value = serde_json::from_str(&read(&a.config)?)?;
    let candidates = doc["candidates"]
        .as_array()
        .context("candidate set has no `candidates` array")?;
    let mut features = Vec::with_capacity(candidates.len());
    let mut clusters = Vec::with_capacity(candidates.len());
    for (i, c) in candidates.iter().enumerate() {
        let f: Vec<f64> =
            serde_json::from_value(c["features"].clone()).with_context(|| format!("candidates[{i}].features"))?;
        features.push(f);
        clusters.push(
            c["cluster"]
                .as_u64()
                .with_context(|| format!("candidates[{i}].cluster"))? as usize,
        );
    }
    let n = features.len();
    if n < 2 {
        bail!("a cluster plot needs at least 2 candidates, got {n}");
    }
    let default = TsneConfig::default();
    let cfg = TsneConfig {
        perplexity: a
            .perplexity
            .unwrap_or_else(|| default.perplexity.min((n - 1) as f64 / 3.0).max(1.0)),
        ..default
    };
    let points = tsne_embed(&features, a.seed, &cfg)?;
    let out = a.out.unwrap_or_else(|| home.join("clusters.svg"));
    write(&out, scatter_svg(&points, &clusters, &DEFAULT_PALETTE))?;
    println!("wrote {} points to {}", n, out.display());
    Ok(())
}

fn serve(home: &Path, a: ServeArgs) -> anyhow::Result<()> {
    let models = Models {
        generators: a
            .checkpoint
            .iter()
            .map(|p| load_checkpoint(p))
            .collect::<anyhow::Result<_>>()?,
        adjust: a.adjust_checkpoint.as_deref().map(load_checkpoint).transpose()?,
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let state = service::start(home.join("service"), models)?;
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .with_context(|| format!("binding {}", a.addr))?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, service::router(state)).await?;
        Ok(())
    })
}

use std::fs;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cellnn::density::{BandwidthRule, ContourSpec};
use cellnn::embed::{Reduction, TsneParams, WeightsMode};
use cellnn::ingest::{
    merge_patch_coordinates, parse_patch_detections, parse_slide_groups, summarize, ColumnMap, TableFormat,
};
use cellnn::io::read_assignment_csv;
use cellnn::quantify::{analyze_roi, BBox, RoiRequest};
use cellnn::signature::SignatureParams;
use cellnn::synth::{generate_tissue, TissueSpec};
use cellnn::{Anchor, CohortTable};
use cellnn_cli::render::{ColorMap, Layers, Marks, RenderOptions};
use cellnn_cli::stages::{self, DensityOptions, PipelineConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cellnn", version, about = "Cell-neighborhood signatures, embeddings and ROI statistics")]
struct Cli {
    /// Worker threads; 1 gives bitwise-reproducible output.
    #[arg(long, global = true, env = "CELLNN_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize a cell table or merge patch-local detections into one.
    Ingest(IngestArgs),
    /// Per-group cell-type counts table.
    Summarize(SummarizeArgs),
    /// kNN composition signature for every cell.
    Signatures(SignaturesArgs),
    /// Deduplicate anchored signatures into a weighted atlas.
    Atlas(AtlasArgs),
    /// Weighted t-SNE layout of an atlas.
    Embed(EmbedArgs),
    /// Per-group KDE grids and HDR contour levels.
    Density(DensityArgs),
    /// Bounding-box fraction ratio and composition, as JSON on stdout.
    Roi(RoiArgs),
    /// SVG scatter/contour figure.
    Render(RenderArgs),
    /// Synthetic cohort with planted motifs.
    Synth(SynthArgs),
    /// Every stage from a cell table to a rendered session directory.
    Pipeline(PipelineArgs),
    /// Serve a session directory over HTTP.
    Serve(ServeArgs),
}

#[derive(Args)]
struct TableArgs {
    #[arg(long)]
    cells: PathBuf,
    /// csv or ndjson; inferred from the extension by default.
    #[arg(long)]
    format: Option<TableFormat>,
    /// Column renames, e.g. `x=centroid_x,cell_type=label`.
    #[arg(long)]
    columns: Option<ColumnMap>,
}

impl TableArgs {
    fn load(&self) -> Result<CohortTable> {
        stages::load_cells(&self.cells, self.format, &self.columns.clone().unwrap_or_default())
    }
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long, conflicts_with_all = ["patches", "slide_groups"])]
    cells: Option<PathBuf>,
    #[arg(long)]
    format: Option<TableFormat>,
    #[arg(long)]
    columns: Option<ColumnMap>,
    /// Patch-local detections CSV.
    #[arg(long, requires = "slide_groups")]
    patches: Option<PathBuf>,
    /// CSV mapping slide_id to group.
    #[arg(long)]
    slide_groups: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SummarizeArgs {
    #[command(flatten)]
    table: TableArgs,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct KnnArgs {
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Neighbors must be strictly closer than this; unbounded by default.
    #[arg(long)]
    max_radius: Option<f64>,
    #[arg(long, default_value_t = cellnn::signature::DEFAULT_LEAF_SIZE)]
    leaf_size: usize,
}

impl KnnArgs {
    fn params(&self) -> SignatureParams {
        SignatureParams {
            k: self.k,
            max_radius: self.max_radius,
            leaf_size: self.leaf_size,
        }
    }
}

#[derive(Args)]
struct SignaturesArgs {
    #[command(flatten)]
    table: TableArgs,
    #[command(flatten)]
    knn: KnnArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AtlasArgs {
    #[command(flatten)]
    table: TableArgs,
    #[arg(long)]
    assignment: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: u32,
    /// neu|epi|lym|pla|eos|con|all
    #[arg(long, default_value = "all")]
    anchor: Anchor,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TsneArgs {
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    /// Barnes-Hut opening angle; 0 for the exact gradient.
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200.0)]
    learning_rate: f64,
    /// multiplicity|uniform
    #[arg(long, default_value = "multiplicity")]
    weights: WeightsMode,
    /// Faster, thread-count-dependent floating-point sums.
    #[arg(long)]
    unordered: bool,
}

impl TsneArgs {
    fn params(&self) -> TsneParams {
        TsneParams {
            perplexity: self.perplexity,
            iterations: self.iters,
            theta: self.theta,
            seed: self.seed,
            learning_rate: self.learning_rate,
            weights: self.weights,
            reduction: if self.unordered { Reduction::Unordered } else { Reduction::Ordered },
            ..TsneParams::default()
        }
    }
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    atlas: PathBuf,
    #[command(flatten)]
    tsne: TsneArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KdeArgs {
    /// Grid cells per axis.
    #[arg(long, default_value_t = cellnn::density::DEFAULT_GRID)]
    grid: usize,
    /// scott or hx,hy
    #[arg(long, default_value = "scott")]
    bandwidth: BandwidthRule,
    /// Comma-separated HDR mass quantiles.
    #[arg(long, value_delimiter = ',', default_values_t = ContourSpec::default().quantiles)]
    quantiles: Vec<f64>,
}

impl KdeArgs {
    fn options(&self) -> Result<DensityOptions> {
        Ok(DensityOptions {
            rule: self.bandwidth,
            grid: self.grid,
            contours: ContourSpec::new(self.quantiles.clone())?,
        })
    }
}

#[derive(Args)]
struct DensityArgs {
    #[arg(long)]
    embedding: PathBuf,
    #[command(flatten)]
    kde: KdeArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RoiArgs {
    #[arg(long)]
    embedding: PathBuf,
    /// xmin,ymin,xmax,ymax
    #[arg(long, allow_hyphen_values = true)]
    bbox: BBox,
    #[arg(long)]
    g1: String,
    #[arg(long)]
    g2: String,
}

#[derive(Args)]
struct FigureArgs {
    /// scatter|contour|both
    #[arg(long, default_value = "both")]
    mode: Layers,
    /// signature (one mark per entry) or cell (one jittered mark per cell)
    #[arg(long, default_value = "signature")]
    marks: Marks,
    #[arg(long, default_value_t = 0.5)]
    jitter: f64,
    /// categorical|colorblind
    #[arg(long, default_value = "categorical")]
    color_map: ColorMap,
    #[arg(long, default_value_t = 800)]
    size: u32,
    /// Overlay boxes, xmin,ymin,xmax,ymax (repeatable).
    #[arg(long = "overlay", allow_hyphen_values = true)]
    overlays: Vec<BBox>,
}

impl FigureArgs {
    fn options(&self, seed: u64) -> RenderOptions {
        RenderOptions {
            layers: self.mode,
            marks: self.marks,
            jitter: self.jitter,
            seed,
            color_map: self.color_map,
            size: self.size,
            bboxes: self.overlays.clone(),
        }
    }
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    embedding: PathBuf,
    /// Directory holding density_<group> files; defaults to the
    /// embedding's directory.
    #[arg(long)]
    density_dir: Option<PathBuf>,
    #[command(flatten)]
    figure: FigureArgs,
    /// Jitter seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// TissueSpec JSON.
    #[arg(long, conflicts_with = "preset")]
    spec: Option<PathBuf>,
    /// Built-in spec: `planted` (A: neu ringed by lym, B: neu ringed by epi).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 4)]
    slides: usize,
    #[arg(long, default_value_t = 2000)]
    background: usize,
    #[arg(long, default_value_t = 25)]
    motifs: usize,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    table: TableArgs,
    #[command(flatten)]
    knn: KnnArgs,
    #[arg(long, default_value = "all")]
    anchor: Anchor,
    #[command(flatten)]
    tsne: TsneArgs,
    #[command(flatten)]
    kde: KdeArgs,
    #[command(flatten)]
    figure: FigureArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    session: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Built UI bundle served under `/`.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
}

fn ingest(a: &IngestArgs) -> Result<()> {
    let cohort = match (&a.cells, &a.patches, &a.slide_groups) {
        (Some(cells), None, None) => stages::load_cells(cells, a.format, &a.columns.clone().unwrap_or_default())?,
        (None, Some(patches), Some(groups)) => {
            let dets = parse_patch_detections(fs::File::open(patches).with_context(|| format!("opening {}", patches.display()))?)
                .with_context(|| format!("reading {}", patches.display()))?;
            let map = parse_slide_groups(fs::File::open(groups).with_context(|| format!("opening {}", groups.display()))?)
                .with_context(|| format!("reading {}", groups.display()))?;
            let cohort = CohortTable::from_detections(merge_patch_coordinates(&dets)?, &map)?;
            let violations = cellnn::ingest::validate(&cohort);
            if !violations.is_empty() {
                bail!("{} validation violation(s) after merging patches", violations.len());
            }
            cohort
        }
        _ => bail!("give either --cells or --patches with --slide-groups"),
    };
    stages::write_cells(&cohort, &a.out)?;
    eprintln!("{} cells, {} slides, {} groups -> {}", cohort.len(), cohort.slide_count(), cohort.groups().len(), a.out.display());
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut spec = match (&a.spec, a.preset.as_deref()) {
        (Some(path), _) => TissueSpec::from_json(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)?,
        (None, Some("planted")) => TissueSpec::planted_pair(a.slides, a.background, a.motifs, 0),
        (None, Some(other)) => bail!("unknown preset '{other}' (available: planted)"),
        (None, None) => bail!("give --spec or --preset"),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    if !spec.motif_isolation_ok() {
        log::warn!(
            "ring radius {} is not below a tenth of the background spacing {:.3}; motifs may not dominate their anchors' neighborhoods",
            spec.ring_radius,
            spec.mean_nn_spacing()
        );
    }
    let cohort = generate_tissue(&spec)?;
    stages::write_cells(&cohort, &a.out)?;
    eprintln!("{} cells, {} slides -> {}", cohort.len(), cohort.slide_count(), a.out.display());
    Ok(())
}

fn density_dir(embedding: &Path, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| embedding.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(&a),
        Command::Summarize(a) => {
            let cohort = a.table.load()?;
            let table = summarize(&cohort);
            print!("{}", table.to_text());
            if let Some(path) = a.csv {
                stages::write_summary(&cohort, &path)?;
            }
            Ok(())
        }
        Command::Signatures(a) => {
            let cohort = a.table.load()?;
            let assignment = stages::signatures_stage(&cohort, &a.knn.params(), &a.out)?;
            eprintln!("{} retained, {} dropped", assignment.retained_count(), assignment.dropped_count());
            Ok(())
        }
        Command::Atlas(a) => {
            let cohort = a.table.load()?;
            let file = fs::File::open(&a.assignment).with_context(|| format!("opening {}", a.assignment.display()))?;
            let assignment = read_assignment_csv(std::io::BufReader::new(file), a.k)
                .with_context(|| format!("reading {}", a.assignment.display()))?;
            let atlas = stages::atlas_stage(&assignment, &cohort, a.anchor, &a.out)?;
            eprintln!("{} signatures, {} anchored cells", atlas.len(), atlas.total_weight());
            Ok(())
        }
        Command::Embed(a) => {
            let atlas = stages::load_atlas(&a.atlas)?;
            let embedding = stages::embed_stage(&atlas, &a.tsne.params(), &a.out)?;
            if let Some(last) = embedding.diagnostics.as_ref().and_then(|d| d.kl_history.last()) {
                eprintln!("final KL {:.6} after {} iterations", last.kl, last.iteration);
            }
            Ok(())
        }
        Command::Density(a) => {
            let embedding = stages::load_embedding(&a.embedding)?;
            let fitted = stages::density_stage(&embedding, &a.kde.options()?, &a.out)?;
            eprintln!("{} density grid(s) -> {}", fitted.len(), a.out.display());
            Ok(())
        }
        Command::Roi(a) => {
            let embedding = stages::load_embedding(&a.embedding)?;
            let request = RoiRequest {
                bbox: a.bbox,
                g1: a.g1,
                g2: a.g2,
            };
            let report = analyze_roi(&embedding, &request)?;
            let mut out = std::io::stdout().lock();
            writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
            Ok(())
        }
        Command::Render(a) => {
            let embedding = stages::load_embedding(&a.embedding)?;
            let density = if a.figure.mode == Layers::Scatter {
                Vec::new()
            } else {
                stages::load_densities(&density_dir(&a.embedding, &a.density_dir), &embedding)?
            };
            stages::render_stage(&embedding, &density, &a.figure.options(a.seed), &a.out)
        }
        Command::Synth(a) => synth(&a),
        Command::Pipeline(a) => {
            let cohort = a.table.load()?;
            let tsne = a.tsne.params();
            let config = PipelineConfig {
                signature: a.knn.params(),
                anchor: a.anchor,
                tsne,
                density: a.kde.options()?,
                render: a.figure.options(tsne.seed),
                out: a.out,
            };
            let embedding = stages::run_pipeline(&cohort, &config)?;
            eprintln!("{} signatures embedded -> {}", embedding.len(), config.out.display());
            Ok(())
        }
        Command::Serve(a) => {
            let session = cellnn_service::Session::load(&a.session)?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(cellnn_service::serve(session, SocketAddr::new(a.host, a.port), a.ui_dir))?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::FAILURE;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

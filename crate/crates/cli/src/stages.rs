//! One function per pipeline stage: compute from in-memory inputs and write
//! that stage's artifacts. The one-shot pipeline and the staged commands
//! call the same functions, so their outputs are byte-identical.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cellnn::density::{
    contour_levels, kde_fit, padded_extent, scott_bandwidth, BandwidthRule, ContourSpec, DensityGrid, GridSpec,
    WeightedPoint,
};
use cellnn::embed::{tsne_embed, Embedding2D, TsneParams};
use cellnn::ingest::{parse_cell_table, summarize, validate, write_cell_table, ColumnMap, TableFormat};
use cellnn::io::{
    contours_name, density_csv_name, density_header, density_header_name, parse_density_header, read_atlas_csv,
    read_density_csv, read_embedding_csv, to_json_pretty, write_assignment_csv, write_atlas_csv, write_density_csv,
    write_embedding_csv, AtlasMeta, ContourFile, Diagnostics,
};
use cellnn::signature::{build_atlas, compute_signatures, SignatureAssignment, SignatureParams};
use cellnn::{Anchor, CohortTable, SignatureAtlas};

use crate::render::{render_svg, RenderOptions};

pub const CELLS_FILE: &str = "cells.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const ASSIGNMENT_FILE: &str = "assignment.csv";
pub const ATLAS_FILE: &str = "atlas.csv";
pub const ATLAS_META_FILE: &str = "atlas.json";
pub const EMBEDDING_FILE: &str = "embedding.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const RENDER_FILE: &str = "render.svg";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn format_for(path: &Path, explicit: Option<TableFormat>) -> TableFormat {
    explicit.unwrap_or_else(|| match path.extension().and_then(|e| e.to_str()) {
        Some("ndjson" | "jsonl") => TableFormat::Ndjson,
        _ => TableFormat::Csv,
    })
}

/// Reads and validates a cell table; any violation is an error.
pub fn load_cells(path: &Path, format: Option<TableFormat>, columns: &ColumnMap) -> Result<CohortTable> {
    let cohort = parse_cell_table(open(path)?, format_for(path, format), columns)
        .with_context(|| format!("reading {}", path.display()))?;
    let violations = validate(&cohort);
    if let Some(v) = violations.first() {
        bail!(
            "{}: {} validation violation(s), first: cell {} breaks {}",
            path.display(),
            violations.len(),
            v.cell_id,
            v.rule
        );
    }
    Ok(cohort)
}

pub fn write_cells(cohort: &CohortTable, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    write_cell_table(cohort, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_summary(cohort: &CohortTable, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    summarize(cohort).write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn signatures_stage(cohort: &CohortTable, params: &SignatureParams, out: &Path) -> Result<SignatureAssignment> {
    let assignment = compute_signatures(cohort, params)?;
    let mut w = create(&out.join(ASSIGNMENT_FILE))?;
    write_assignment_csv(&assignment, &mut w)?;
    w.flush()?;
    if assignment.dropped_count() > 0 {
        log::warn!(
            "{} of {} cells dropped (fewer than {} neighbors)",
            assignment.dropped_count(),
            assignment.len(),
            params.k
        );
    }
    Ok(assignment)
}

pub fn atlas_stage(
    assignment: &SignatureAssignment,
    cohort: &CohortTable,
    anchor: Anchor,
    out: &Path,
) -> Result<SignatureAtlas> {
    let atlas = build_atlas(assignment, cohort, anchor)?;
    write_atlas(&atlas, out)?;
    Ok(atlas)
}

pub fn write_atlas(atlas: &SignatureAtlas, out: &Path) -> Result<()> {
    let mut w = create(&out.join(ATLAS_FILE))?;
    write_atlas_csv(atlas, &mut w)?;
    w.flush()?;
    write_text(&out.join(ATLAS_META_FILE), &to_json_pretty(&AtlasMeta::of(atlas)))
}

/// Reads `atlas.csv` and, when present, the `atlas.json` sidecar beside it.
pub fn load_atlas(path: &Path) -> Result<SignatureAtlas> {
    let atlas = read_atlas_csv(open(path)?).with_context(|| format!("reading {}", path.display()))?;
    let meta_path = path.with_file_name(ATLAS_META_FILE);
    if !meta_path.is_file() {
        return Ok(atlas);
    }
    let meta: AtlasMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)
        .with_context(|| format!("reading {}", meta_path.display()))?;
    meta.apply(atlas).with_context(|| format!("checking {}", meta_path.display()))
}

pub fn embed_stage(atlas: &SignatureAtlas, params: &TsneParams, out: &Path) -> Result<Embedding2D> {
    let embedding = tsne_embed(atlas, params)?;
    for w in &embedding.diagnostics.as_ref().expect("fresh embedding").warnings {
        log::warn!("{w}");
    }
    let mut w = create(&out.join(EMBEDDING_FILE))?;
    write_embedding_csv(&embedding, &mut w)?;
    w.flush()?;
    let diagnostics = Diagnostics::of(&embedding).expect("fresh embedding");
    write_text(&out.join(DIAGNOSTICS_FILE), &to_json_pretty(&diagnostics))?;
    Ok(embedding)
}

/// Reads `embedding.csv`, taking the anchor from a `diagnostics.json`
/// beside it when present.
pub fn load_embedding(path: &Path) -> Result<Embedding2D> {
    let mut embedding = read_embedding_csv(open(path)?).with_context(|| format!("reading {}", path.display()))?;
    let diag_path = path.with_file_name(DIAGNOSTICS_FILE);
    if diag_path.is_file() {
        let diag: Diagnostics = serde_json::from_str(&fs::read_to_string(&diag_path)?)
            .with_context(|| format!("reading {}", diag_path.display()))?;
        embedding.atlas = embedding.atlas.with_anchor(diag.anchor);
        embedding.diagnostics = Some(diag.embed);
    }
    Ok(embedding)
}

#[derive(Debug, Clone)]
pub struct DensityOptions {
    pub rule: BandwidthRule,
    pub grid: usize,
    pub contours: ContourSpec,
}

impl Default for DensityOptions {
    fn default() -> Self {
        Self {
            rule: BandwidthRule::Scott,
            grid: cellnn::density::DEFAULT_GRID,
            contours: ContourSpec::default(),
        }
    }
}

fn group_points(embedding: &Embedding2D, g: usize) -> Vec<WeightedPoint> {
    embedding
        .atlas
        .entries()
        .iter()
        .zip(&embedding.coords)
        .map(|(e, p)| WeightedPoint {
            x: p[0],
            y: p[1],
            w: e.weights[g] as f64,
        })
        .collect()
}

/// Fits one grid per group with positive weight. All grids share one
/// extent (the union of each group's padded box) so they overlay cell for
/// cell.
pub fn fit_densities(embedding: &Embedding2D, options: &DensityOptions) -> Result<Vec<(DensityGrid, ContourFile)>> {
    let groups = embedding.atlas.groups();
    let mut stems = BTreeMap::new();
    for g in groups {
        if let Some(prev) = stems.insert(density_csv_name(g), g) {
            bail!("groups '{prev}' and '{g}' map to the same file name {}", density_csv_name(g));
        }
    }
    let mut fitted = Vec::new();
    let mut extent: Option<[f64; 4]> = None;
    for g in 0..groups.len() {
        if embedding.atlas.group_total(g) == 0 {
            log::warn!("group '{}' has no cells in the atlas; no density fitted", groups[g]);
            continue;
        }
        let points = group_points(embedding, g);
        let bw = match options.rule {
            BandwidthRule::Scott => scott_bandwidth(&points)?.0,
            BandwidthRule::Fixed(bw) => bw,
        };
        let e = padded_extent(&points, bw).expect("positive weight");
        extent = Some(match extent {
            None => e,
            Some(u) => [u[0].min(e[0]), u[1].min(e[1]), u[2].max(e[2]), u[3].max(e[3])],
        });
        fitted.push((g, points));
    }
    let spec = GridSpec {
        nx: options.grid,
        ny: options.grid,
        extent,
    };
    let mut out = Vec::new();
    for (g, points) in fitted {
        let grid = kde_fit(groups[g].clone(), &points, options.rule, &spec)?;
        for flag in &grid.flags {
            log::warn!("group '{}': {flag}", groups[g]);
        }
        let levels = ContourFile::new(&groups[g], &options.contours, contour_levels(&grid, &options.contours));
        out.push((grid, levels));
    }
    Ok(out)
}

pub fn density_stage(
    embedding: &Embedding2D,
    options: &DensityOptions,
    out: &Path,
) -> Result<Vec<(DensityGrid, ContourFile)>> {
    let fitted = fit_densities(embedding, options)?;
    for (grid, levels) in &fitted {
        let mut w = create(&out.join(density_csv_name(&grid.group)))?;
        write_density_csv(grid, &mut w)?;
        w.flush()?;
        write_text(&out.join(density_header_name(&grid.group)), &to_json_pretty(&density_header(grid)))?;
        write_text(&out.join(contours_name(&grid.group)), &to_json_pretty(levels))?;
    }
    Ok(fitted)
}

/// Loads each group's grid and levels from `dir`, skipping groups without
/// a density file.
pub fn load_densities(dir: &Path, embedding: &Embedding2D) -> Result<Vec<(DensityGrid, ContourFile)>> {
    let mut out = Vec::new();
    for g in embedding.atlas.groups() {
        let header_path = dir.join(density_header_name(g));
        if !header_path.is_file() {
            continue;
        }
        let header = parse_density_header(&fs::read_to_string(&header_path)?)
            .with_context(|| format!("reading {}", header_path.display()))?;
        let csv_path = dir.join(density_csv_name(g));
        let grid = read_density_csv(open(&csv_path)?, header).with_context(|| format!("reading {}", csv_path.display()))?;
        let contour_path = dir.join(contours_name(g));
        let levels = if contour_path.is_file() {
            ContourFile::parse(&fs::read_to_string(&contour_path)?)
                .with_context(|| format!("reading {}", contour_path.display()))?
        } else {
            let spec = ContourSpec::default();
            ContourFile::new(g, &spec, contour_levels(&grid, &spec))
        };
        out.push((grid, levels));
    }
    Ok(out)
}

pub fn render_stage(
    embedding: &Embedding2D,
    density: &[(DensityGrid, ContourFile)],
    options: &RenderOptions,
    path: &Path,
) -> Result<()> {
    write_text(path, &render_svg(embedding, density, options)?)
}

/// Everything the one-shot pipeline needs.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub signature: SignatureParams,
    pub anchor: Anchor,
    pub tsne: TsneParams,
    pub density: DensityOptions,
    pub render: RenderOptions,
    pub out: PathBuf,
}

/// Runs every stage on a validated cohort, writing the same files the
/// staged commands write plus `summary.csv` and `render.svg`.
pub fn run_pipeline(cohort: &CohortTable, config: &PipelineConfig) -> Result<Embedding2D> {
    let out = &config.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_summary(cohort, &out.join(SUMMARY_FILE))?;
    let assignment = signatures_stage(cohort, &config.signature, out)?;
    let atlas = atlas_stage(&assignment, cohort, config.anchor, out)?;
    let embedding = embed_stage(&atlas, &config.tsne, out)?;
    let density = density_stage(&embedding, &config.density, out)?;
    render_stage(&embedding, &density, &config.render, &out.join(RENDER_FILE))?;
    Ok(embedding)
}

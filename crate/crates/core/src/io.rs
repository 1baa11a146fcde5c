//! CSV/JSON artifacts exchanged between pipeline stages, the service and
//! the UI. Every reader validates what it loads; every writer is
//! deterministic and round-trips through its reader.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::density::{ContourSpec, DensityGrid};
use crate::embed::{EmbedDiagnostics, EmbedError, Embedding2D};
use crate::ingest::CellType;
use crate::signature::{
    Anchor, AtlasEntry, DropReason, NeighborhoodSignature, SignatureAssignment, SignatureAtlas, SignatureError,
    SignatureOutcome,
};
use crate::SCHEMA_VERSION;

#[derive(Debug, thiserror::Error)]
pub enum ArtifactError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("line {line}: {message}")]
    Format { line: u64, message: String },
    #[error("{0}")]
    Header(String),
    #[error(transparent)]
    Atlas(#[from] SignatureError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

fn format_err(line: u64, message: impl Into<String>) -> ArtifactError {
    ArtifactError::Format {
        line,
        message: message.into(),
    }
}

const TYPE_COLUMNS: [&str; CellType::COUNT] = ["neu", "epi", "lym", "pla", "eos", "con"];
const DROPPED_PREFIX: &str = "dropped:";

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).from_reader(r)
}

/// Checks `fixed` leads the header and returns the remaining group columns.
fn split_header(headers: &csv::StringRecord, fixed: &[&str]) -> Result<Vec<String>, ArtifactError> {
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < fixed.len() || cols[..fixed.len()] != *fixed {
        return Err(ArtifactError::Header(format!(
            "expected header to start with {}, got {}",
            fixed.join(","),
            cols.join(",")
        )));
    }
    let groups: Vec<String> = cols[fixed.len()..].iter().map(|s| s.to_string()).collect();
    if groups.iter().any(|g| g.is_empty()) {
        return Err(ArtifactError::Header("empty group column name".into()));
    }
    Ok(groups)
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> Result<T, ArtifactError> {
    let line = rec.position().map_or(0, |p| p.line());
    let raw = rec.get(i).ok_or_else(|| format_err(line, format!("missing {name}")))?;
    raw.trim()
        .parse()
        .map_err(|_| format_err(line, format!("invalid {name} '{raw}'")))
}

fn parse_signature(rec: &csv::StringRecord, start: usize) -> Result<NeighborhoodSignature, ArtifactError> {
    let mut counts = [0u32; CellType::COUNT];
    for (j, c) in counts.iter_mut().enumerate() {
        *c = field(rec, start + j, TYPE_COLUMNS[j])?;
    }
    if counts.iter().map(|&c| c as u64).sum::<u64>() > u32::MAX as u64 {
        return Err(format_err(rec.position().map_or(0, |p| p.line()), "signature total overflows"));
    }
    Ok(NeighborhoodSignature::new(counts))
}

fn check_sig_id(rec: &csv::StringRecord, sig: &NeighborhoodSignature) -> Result<(), ArtifactError> {
    let id: u64 = field(rec, 0, "sig_id")?;
    if id != sig.code() {
        return Err(format_err(
            rec.position().map_or(0, |p| p.line()),
            format!("sig_id {id} does not match signature code {}", sig.code()),
        ));
    }
    Ok(())
}

fn check_width(rec: &csv::StringRecord, width: usize) -> Result<(), ArtifactError> {
    if rec.len() != width {
        return Err(format_err(
            rec.position().map_or(0, |p| p.line()),
            format!("expected {width} fields, got {}", rec.len()),
        ));
    }
    Ok(())
}

fn infer_k(entries: &[AtlasEntry]) -> Result<u32, ArtifactError> {
    entries
        .first()
        .map(|e| e.signature.k())
        .ok_or_else(|| ArtifactError::Header("no entries".into()))
}

/// `sig_id,neu,epi,lym,pla,eos,con,<group>...`, one row per signature.
pub fn write_atlas_csv<W: Write>(atlas: &SignatureAtlas, w: W) -> Result<(), ArtifactError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["sig_id".to_string()];
    header.extend(TYPE_COLUMNS.iter().map(|s| s.to_string()));
    header.extend(atlas.groups().iter().cloned());
    out.write_record(&header)?;
    for e in atlas.entries() {
        let mut row = vec![e.sig_id().to_string()];
        row.extend(e.signature.counts().iter().map(u32::to_string));
        row.extend(e.weights.iter().map(u64::to_string));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads an atlas CSV; `k` comes from the rows, the anchor defaults to
/// `all` (see [`AtlasMeta`]).
pub fn read_atlas_csv<R: Read>(r: R) -> Result<SignatureAtlas, ArtifactError> {
    let mut rdr = reader(r);
    let mut fixed = vec!["sig_id"];
    fixed.extend(TYPE_COLUMNS);
    let groups = split_header(rdr.headers()?, &fixed)?;
    let width = fixed.len() + groups.len();
    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        check_width(&rec, width)?;
        let signature = parse_signature(&rec, 1)?;
        check_sig_id(&rec, &signature)?;
        let weights = (0..groups.len())
            .map(|g| field(&rec, fixed.len() + g, &groups[g]))
            .collect::<Result<_, _>>()?;
        entries.push(AtlasEntry { signature, weights });
    }
    let k = infer_k(&entries).map_err(|_| ArtifactError::Header("atlas has no entries".into()))?;
    Ok(SignatureAtlas::from_entries(k, Anchor::All, groups, entries)?)
}

/// Atlas sidecar carrying what the CSV cannot: the anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasMeta {
    pub schema_version: u32,
    pub k: u32,
    pub anchor: Anchor,
    pub groups: Vec<String>,
    pub entries: usize,
    pub group_totals: Vec<u64>,
}

impl AtlasMeta {
    pub fn of(atlas: &SignatureAtlas) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            k: atlas.k(),
            anchor: atlas.anchor(),
            groups: atlas.groups().to_vec(),
            entries: atlas.len(),
            group_totals: (0..atlas.groups().len()).map(|g| atlas.group_total(g)).collect(),
        }
    }

    /// Applies the anchor after checking the sidecar describes `atlas`.
    pub fn apply(&self, atlas: SignatureAtlas) -> Result<SignatureAtlas, ArtifactError> {
        if self.k != atlas.k() || self.groups != atlas.groups() || self.entries != atlas.len() {
            return Err(ArtifactError::Header("atlas metadata does not match atlas table".into()));
        }
        Ok(atlas.with_anchor(self.anchor))
    }
}

/// `cell_id,sig_id`; dropped cells carry `dropped:<reason>:<found>` in the
/// second column.
pub fn write_assignment_csv<W: Write>(assignment: &SignatureAssignment, w: W) -> Result<(), ArtifactError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["cell_id", "sig_id"])?;
    for (id, outcome) in assignment.entries() {
        let value = match outcome {
            SignatureOutcome::Retained(s) => s.code().to_string(),
            SignatureOutcome::Dropped(DropReason::InsufficientNeighbors { found }) => {
                format!("{DROPPED_PREFIX}insufficient_neighbors:{found}")
            }
        };
        out.write_record([id.to_string(), value])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_assignment_csv<R: Read>(r: R, k: u32) -> Result<SignatureAssignment, ArtifactError> {
    let mut rdr = reader(r);
    split_header(rdr.headers()?, &["cell_id", "sig_id"]).and_then(|extra| {
        if extra.is_empty() {
            Ok(())
        } else {
            Err(ArtifactError::Header("assignment has extra columns".into()))
        }
    })?;
    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        check_width(&rec, 2)?;
        let line = rec.position().map_or(0, |p| p.line());
        let id: u64 = field(&rec, 0, "cell_id")?;
        let raw = rec[1].trim();
        let outcome = if let Some(reason) = raw.strip_prefix(DROPPED_PREFIX) {
            let found = reason
                .strip_prefix("insufficient_neighbors:")
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| format_err(line, format!("unknown drop reason '{reason}'")))?;
            SignatureOutcome::Dropped(DropReason::InsufficientNeighbors { found })
        } else {
            let code: u64 = raw.parse().map_err(|_| format_err(line, format!("invalid sig_id '{raw}'")))?;
            let sig = NeighborhoodSignature::from_code(code, k)
                .ok_or_else(|| format_err(line, format!("sig_id {code} out of range for k = {k}")))?;
            SignatureOutcome::Retained(sig)
        };
        entries.push((id, outcome));
    }
    Ok(SignatureAssignment::from_entries(k, entries))
}

/// `sig_id,x,y,neu,...,con,<group>...` in atlas order.
pub fn write_embedding_csv<W: Write>(embedding: &Embedding2D, w: W) -> Result<(), ArtifactError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["sig_id", "x", "y"].iter().map(|s| s.to_string()).collect();
    header.extend(TYPE_COLUMNS.iter().map(|s| s.to_string()));
    header.extend(embedding.atlas.groups().iter().cloned());
    out.write_record(&header)?;
    for (e, p) in embedding.atlas.entries().iter().zip(&embedding.coords) {
        let mut row = vec![e.sig_id().to_string(), p[0].to_string(), p[1].to_string()];
        row.extend(e.signature.counts().iter().map(u32::to_string));
        row.extend(e.weights.iter().map(u64::to_string));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_embedding_csv<R: Read>(r: R) -> Result<Embedding2D, ArtifactError> {
    let mut rdr = reader(r);
    let mut fixed = vec!["sig_id", "x", "y"];
    fixed.extend(TYPE_COLUMNS);
    let groups = split_header(rdr.headers()?, &fixed)?;
    let width = fixed.len() + groups.len();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        check_width(&rec, width)?;
        let x: f64 = field(&rec, 1, "x")?;
        let y: f64 = field(&rec, 2, "y")?;
        let signature = parse_signature(&rec, 3)?;
        check_sig_id(&rec, &signature)?;
        let weights = (0..groups.len())
            .map(|g| field(&rec, fixed.len() + g, &groups[g]))
            .collect::<Result<Vec<u64>, _>>()?;
        rows.push((AtlasEntry { signature, weights }, [x, y]));
    }
    rows.sort_by(|a, b| a.0.signature.cmp(&b.0.signature));
    let (entries, coords): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let k = infer_k(&entries).map_err(|_| ArtifactError::Header("embedding has no entries".into()))?;
    let atlas = SignatureAtlas::from_entries(k, Anchor::All, groups, entries)?;
    Ok(Embedding2D::new(atlas, coords)?)
}

/// Run record written next to the embedding. Contains no timings, so it is
/// byte-stable for a fixed seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub schema_version: u32,
    pub k: u32,
    pub anchor: Anchor,
    pub groups: Vec<String>,
    pub atlas_entries: usize,
    #[serde(flatten)]
    pub embed: EmbedDiagnostics,
}

impl Diagnostics {
    pub fn of(embedding: &Embedding2D) -> Option<Self> {
        embedding.diagnostics.clone().map(|embed| Self {
            schema_version: SCHEMA_VERSION,
            k: embedding.atlas.k(),
            anchor: embedding.atlas.anchor(),
            groups: embedding.atlas.groups().to_vec(),
            atlas_entries: embedding.len(),
            embed,
        })
    }
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    s
}

/// File-name stem for a group label: characters outside `[A-Za-z0-9._-]`
/// become `_`.
pub fn group_file_stem(group: &str) -> String {
    group
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
        .collect()
}

pub fn density_csv_name(group: &str) -> String {
    format!("density_{}.csv", group_file_stem(group))
}

pub fn density_header_name(group: &str) -> String {
    format!("density_{}.json", group_file_stem(group))
}

pub fn contours_name(group: &str) -> String {
    format!("contours_{}.json", group_file_stem(group))
}

/// `x_index,y_index,density`, x varying fastest.
pub fn write_density_csv<W: Write>(grid: &DensityGrid, w: W) -> Result<(), ArtifactError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["x_index", "y_index", "density"])?;
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            out.write_record([ix.to_string(), iy.to_string(), format!("{:e}", grid.value(ix, iy))])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityHeader {
    pub schema_version: u32,
    #[serde(flatten)]
    pub grid: DensityGrid,
}

pub fn density_header(grid: &DensityGrid) -> DensityHeader {
    DensityHeader {
        schema_version: SCHEMA_VERSION,
        grid: DensityGrid {
            values: Vec::new(),
            ..grid.clone()
        },
    }
}

/// Upper bound on cells accepted from a header, to keep hostile headers
/// from allocating unbounded grids.
pub const MAX_GRID_CELLS: usize = 1 << 24;

pub fn parse_density_header(text: &str) -> Result<DensityGrid, ArtifactError> {
    let header: DensityHeader = serde_json::from_str(text)?;
    let g = header.grid;
    let cells = g.nx.checked_mul(g.ny).filter(|&c| c > 0 && c <= MAX_GRID_CELLS);
    if cells.is_none() {
        return Err(ArtifactError::Header(format!("unsupported grid shape {}x{}", g.nx, g.ny)));
    }
    let finite = g.origin.iter().chain(&g.cell_size).all(|v| v.is_finite());
    if !finite || g.cell_size[0] <= 0.0 || g.cell_size[1] <= 0.0 {
        return Err(ArtifactError::Header("grid origin and cell size must be finite, cell size positive".into()));
    }
    if !(g.bandwidth.hx > 0.0 && g.bandwidth.hy > 0.0) {
        return Err(ArtifactError::Header("bandwidth must be positive".into()));
    }
    Ok(g)
}

/// Loads the grid values for a header; every cell must appear exactly once.
pub fn read_density_csv<R: Read>(r: R, mut grid: DensityGrid) -> Result<DensityGrid, ArtifactError> {
    let mut rdr = reader(r);
    let extra = split_header(rdr.headers()?, &["x_index", "y_index", "density"])?;
    if !extra.is_empty() {
        return Err(ArtifactError::Header("density grid has extra columns".into()));
    }
    let mut values = vec![f64::NAN; grid.nx * grid.ny];
    let mut seen = 0usize;
    for rec in rdr.records() {
        let rec = rec?;
        check_width(&rec, 3)?;
        let line = rec.position().map_or(0, |p| p.line());
        let ix: usize = field(&rec, 0, "x_index")?;
        let iy: usize = field(&rec, 1, "y_index")?;
        let v: f64 = field(&rec, 2, "density")?;
        if ix >= grid.nx || iy >= grid.ny {
            return Err(format_err(line, format!("cell ({ix}, {iy}) outside {}x{} grid", grid.nx, grid.ny)));
        }
        if !(v.is_finite() && v >= 0.0) {
            return Err(format_err(line, "density must be finite and non-negative"));
        }
        let slot = &mut values[iy * grid.nx + ix];
        if !slot.is_nan() {
            return Err(format_err(line, format!("duplicate cell ({ix}, {iy})")));
        }
        *slot = v;
        seen += 1;
    }
    if seen != values.len() {
        return Err(ArtifactError::Header(format!("{seen} of {} grid cells present", values.len())));
    }
    grid.values = values;
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourFile {
    pub schema_version: u32,
    pub group: String,
    pub quantiles: Vec<f64>,
    /// Density thresholds aligned with `quantiles`.
    pub levels: Vec<f64>,
}

impl ContourFile {
    pub fn new(group: &str, spec: &ContourSpec, levels: Vec<f64>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            group: group.to_string(),
            quantiles: spec.quantiles.clone(),
            levels,
        }
    }

    pub fn parse(text: &str) -> Result<Self, ArtifactError> {
        let file: Self = serde_json::from_str(text)?;
        if file.quantiles.len() != file.levels.len() {
            return Err(ArtifactError::Header("contour quantiles and levels differ in length".into()));
        }
        ContourSpec::new(file.quantiles.clone()).map_err(|e| ArtifactError::Header(e.to_string()))?;
        Ok(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{kde_fit, BandwidthRule, GridSpec, WeightedPoint};

    fn atlas() -> SignatureAtlas {
        let e = |c: [u32; 6], w: Vec<u64>| AtlasEntry {
            signature: NeighborhoodSignature::new(c),
            weights: w,
        };
        SignatureAtlas::from_entries(
            10,
            Anchor::Type(CellType::Neutrophil),
            vec!["A".into(), "B, active".into()],
            vec![e([0, 0, 10, 0, 0, 0], vec![3, 0]), e([1, 4, 5, 0, 0, 0], vec![1, 7])],
        )
        .unwrap()
    }

    #[test]
    fn atlas_round_trip() {
        let a = atlas();
        let mut buf = Vec::new();
        write_atlas_csv(&a, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("sig_id,neu,epi,lym,pla,eos,con,A,\"B, active\"\n"));
        let back = read_atlas_csv(text.as_bytes()).unwrap();
        assert_eq!(back.anchor(), Anchor::All);
        let meta: AtlasMeta = serde_json::from_str(&to_json_pretty(&AtlasMeta::of(&a))).unwrap();
        assert_eq!(meta.apply(back).unwrap(), a);
    }

    #[test]
    fn atlas_rejects_bad_rows() {
        let good = "sig_id,neu,epi,lym,pla,eos,con,A\n";
        assert!(read_atlas_csv(good.as_bytes()).is_err());
        let wrong_id = format!("{good}5,0,0,10,0,0,0,1\n");
        assert!(matches!(read_atlas_csv(wrong_id.as_bytes()), Err(ArtifactError::Format { line: 2, .. })));
        let code = NeighborhoodSignature::new([0, 0, 10, 0, 0, 0]).code();
        let short = format!("{good}{code},0,0,10,0,0,0\n");
        assert!(read_atlas_csv(short.as_bytes()).is_err());
        let bad_header = "sig,neu,epi,lym,pla,eos,con,A\n";
        assert!(matches!(read_atlas_csv(bad_header.as_bytes()), Err(ArtifactError::Header(_))));
    }

    #[test]
    fn assignment_round_trip() {
        let s = NeighborhoodSignature::new([2, 2, 2, 2, 1, 1]);
        let a = SignatureAssignment::from_entries(
            10,
            vec![
                (4, SignatureOutcome::Retained(s)),
                (9, SignatureOutcome::Dropped(DropReason::InsufficientNeighbors { found: 7 })),
            ],
        );
        let mut buf = Vec::new();
        write_assignment_csv(&a, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.ends_with("9,dropped:insufficient_neighbors:7\n"));
        assert_eq!(read_assignment_csv(text.as_bytes(), 10).unwrap(), a);
        assert!(read_assignment_csv("cell_id,sig_id\n1,999999\n".as_bytes(), 10).is_err());
        assert!(read_assignment_csv("cell_id,sig_id\n1,dropped:bored\n".as_bytes(), 10).is_err());
    }

    #[test]
    fn embedding_round_trip() {
        let mut emb = Embedding2D::new(atlas(), vec![[0.1, -2.5e-7], [1.0 / 3.0, 12.0]]).unwrap();
        let mut buf = Vec::new();
        write_embedding_csv(&emb, &mut buf).unwrap();
        let back = read_embedding_csv(buf.as_slice()).unwrap();
        emb.atlas = emb.atlas.with_anchor(Anchor::All);
        assert_eq!(back, emb);
        let mut again = Vec::new();
        write_embedding_csv(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn density_round_trip() {
        let pts = [WeightedPoint { x: 0.0, y: 0.0, w: 2.0 }, WeightedPoint { x: 1.0, y: 0.5, w: 1.0 }];
        let grid = kde_fit("B, active", &pts, BandwidthRule::Scott, &GridSpec { nx: 7, ny: 5, extent: None }).unwrap();
        let mut csv_buf = Vec::new();
        write_density_csv(&grid, &mut csv_buf).unwrap();
        let header = parse_density_header(&to_json_pretty(&density_header(&grid))).unwrap();
        let back = read_density_csv(csv_buf.as_slice(), header).unwrap();
        assert_eq!(back, grid);
        assert_eq!(density_csv_name("B, active"), "density_B__active.csv");
        let last_line = csv_buf[..csv_buf.len() - 1].iter().rposition(|&b| b == b'\n').unwrap();
        let truncated = &csv_buf[..=last_line];
        let header = parse_density_header(&to_json_pretty(&density_header(&grid))).unwrap();
        assert!(read_density_csv(truncated, header).is_err());
        let huge = r#"{"schema_version":1,"group":"A","origin":[0,0],"cell_size":[1,1],"nx":100000,"ny":100000,
            "bandwidth":{"hx":1,"hy":1},"n_eff":1,"total_weight":1,"flags":[]}"#;
        assert!(parse_density_header(huge).is_err());
    }

    #[test]
    fn contour_file_checks() {
        let spec = ContourSpec::default();
        let f = ContourFile::new("A", &spec, vec![0.0; 9]);
        assert_eq!(ContourFile::parse(&to_json_pretty(&f)).unwrap(), f);
        assert!(ContourFile::parse(r#"{"schema_version":1,"group":"A","quantiles":[0.5],"levels":[]}"#).is_err());
    }
}

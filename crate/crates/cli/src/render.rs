//! Static SVG figures: signature scatter and filled HDR density bands.
//!
//! Output is a pure function of the inputs and the jitter seed; numbers are
//! printed at fixed precision so identical inputs give identical bytes.

use std::fmt::Write as _;
use std::str::FromStr;

use cellnn::density::DensityGrid;
use cellnn::embed::Embedding2D;
use cellnn::io::ContourFile;
use cellnn::quantify::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("empty embedding")]
    EmptyEmbedding,
    #[error("contour mode needs at least one density grid")]
    NoDensity,
    #[error("per-cell scatter would draw {0} marks (limit {MAX_CELL_MARKS}); use per-signature marks")]
    TooManyMarks(u64),
    #[error("unknown {what} '{value}'")]
    Unknown { what: &'static str, value: String },
}

pub const MAX_CELL_MARKS: u64 = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Layers {
    Scatter,
    Contour,
    #[default]
    Both,
}

impl FromStr for Layers {
    type Err = RenderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scatter" => Ok(Layers::Scatter),
            "contour" => Ok(Layers::Contour),
            "both" => Ok(Layers::Both),
            _ => Err(RenderError::Unknown {
                what: "render mode",
                value: s.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Marks {
    /// One circle per atlas entry, area proportional to total weight.
    #[default]
    Signature,
    /// One dot per cell, jittered around its signature's location.
    Cell,
}

impl FromStr for Marks {
    type Err = RenderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "signature" => Ok(Marks::Signature),
            "cell" => Ok(Marks::Cell),
            _ => Err(RenderError::Unknown {
                what: "mark mode",
                value: s.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ColorMap {
    #[default]
    Categorical,
    ColorBlind,
}

impl FromStr for ColorMap {
    type Err = RenderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "categorical" => Ok(ColorMap::Categorical),
            "colorblind" => Ok(ColorMap::ColorBlind),
            _ => Err(RenderError::Unknown {
                what: "color map",
                value: s.into(),
            }),
        }
    }
}

impl ColorMap {
    fn palette(&self) -> &'static [&'static str] {
        match self {
            ColorMap::Categorical => &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"],
            ColorMap::ColorBlind => &["#0072b2", "#d55e00", "#009e73", "#cc79a7", "#e69f00", "#56b4e9", "#f0e442", "#000000"],
        }
    }

    pub fn color(&self, group: usize) -> &'static str {
        let p = self.palette();
        p[group % p.len()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOptions {
    pub layers: Layers,
    pub marks: Marks,
    /// Per-cell jitter radius in embedding units.
    pub jitter: f64,
    pub seed: u64,
    pub color_map: ColorMap,
    pub size: u32,
    pub bboxes: Vec<BBox>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            layers: Layers::Both,
            marks: Marks::Signature,
            jitter: 0.5,
            seed: 0,
            color_map: ColorMap::Categorical,
            size: 800,
            bboxes: Vec::new(),
        }
    }
}

const MARGIN: f64 = 40.0;
const LEGEND_WIDTH: f64 = 160.0;

/// Maps embedding coordinates onto the square plot area (y up).
struct Frame {
    x0: f64,
    y0: f64,
    scale: f64,
    side: f64,
}

impl Frame {
    fn new(extent: [f64; 4], side: f64) -> Self {
        let span = (extent[2] - extent[0]).max(extent[3] - extent[1]).max(1e-9);
        let cx = 0.5 * (extent[0] + extent[2]);
        let cy = 0.5 * (extent[1] + extent[3]);
        let scale = side / (1.05 * span);
        Self {
            x0: cx - 0.5 * side / scale,
            y0: cy - 0.5 * side / scale,
            scale,
            side,
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) * self.scale
    }

    fn py(&self, y: f64) -> f64 {
        MARGIN + self.side - (y - self.y0) * self.scale
    }
}

fn union(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])]
}

/// Renders the embedding (and, for contour layers, each group's grid with
/// its levels) as one SVG document.
pub fn render_svg(
    embedding: &Embedding2D,
    density: &[(DensityGrid, ContourFile)],
    options: &RenderOptions,
) -> Result<String, RenderError> {
    let mut extent = embedding.bounds().ok_or(RenderError::EmptyEmbedding)?;
    let contour = matches!(options.layers, Layers::Contour | Layers::Both);
    let scatter = matches!(options.layers, Layers::Scatter | Layers::Both);
    if options.layers == Layers::Contour && density.is_empty() {
        return Err(RenderError::NoDensity);
    }
    if contour {
        for (grid, _) in density {
            extent = union(extent, grid.extent());
        }
    }
    let atlas = &embedding.atlas;
    if scatter && options.marks == Marks::Cell && atlas.total_weight() > MAX_CELL_MARKS {
        return Err(RenderError::TooManyMarks(atlas.total_weight()));
    }
    let side = options.size.max(100) as f64;
    let frame = Frame::new(extent, side);
    let (width, height) = (side + 2.0 * MARGIN + LEGEND_WIDTH, side + 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r##"<rect class="frame" x="{MARGIN:.0}" y="{MARGIN:.0}" width="{side:.0}" height="{side:.0}" fill="none" stroke="#999"/>"##
    );

    if contour {
        for (grid, levels) in density {
            let g = atlas.group_index(&grid.group).unwrap_or(0);
            let color = options.color_map.color(g);
            let _ = writeln!(svg, r#"<g class="bands" data-group="{}" fill="{color}">"#, escape(&grid.group));
            let n = levels.levels.len().max(1) as f64;
            for (li, (&q, &t)) in levels.quantiles.iter().zip(&levels.levels).enumerate() {
                let path = band_path(grid, t, &frame);
                if path.is_empty() {
                    continue;
                }
                let opacity = 0.08 + 0.5 * (li as f64 + 1.0) / n / 1.5;
                let _ = writeln!(svg, r#"<path class="band" data-quantile="{q}" fill-opacity="{opacity:.3}" d="{path}"/>"#);
            }
            let _ = writeln!(svg, "</g>");
        }
    }

    if scatter {
        let _ = writeln!(svg, r#"<g class="scatter">"#);
        let max_w = atlas.entries().iter().map(|e| e.total_weight()).max().unwrap_or(1).max(1) as f64;
        match options.marks {
            Marks::Signature => {
                for (e, p) in atlas.entries().iter().zip(&embedding.coords) {
                    let g = dominant_group(&e.weights, atlas);
                    let r = 1.5 + 6.5 * (e.total_weight() as f64 / max_w).sqrt();
                    let _ = writeln!(
                        svg,
                        r#"<circle class="mark" data-sig="{}" cx="{:.2}" cy="{:.2}" r="{r:.2}" fill="{}" fill-opacity="0.7"/>"#,
                        e.sig_id(),
                        frame.px(p[0]),
                        frame.py(p[1]),
                        options.color_map.color(g)
                    );
                }
            }
            Marks::Cell => {
                let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
                for (e, p) in atlas.entries().iter().zip(&embedding.coords) {
                    for (g, &w) in e.weights.iter().enumerate() {
                        for _ in 0..w {
                            let (dx, dy) = jitter(&mut rng, options.jitter);
                            let _ = writeln!(
                                svg,
                                r#"<circle class="mark" cx="{:.2}" cy="{:.2}" r="1.2" fill="{}" fill-opacity="0.5"/>"#,
                                frame.px(p[0] + dx),
                                frame.py(p[1] + dy),
                                options.color_map.color(g)
                            );
                        }
                    }
                }
            }
        }
        let _ = writeln!(svg, "</g>");
    }

    for b in &options.bboxes {
        let _ = writeln!(
            svg,
            r#"<rect class="bbox" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black" stroke-dasharray="4 2"/>"#,
            frame.px(b.xmin),
            frame.py(b.ymax),
            (b.xmax - b.xmin) * frame.scale,
            (b.ymax - b.ymin) * frame.scale
        );
    }

    let lx = MARGIN + side + 20.0;
    let _ = writeln!(svg, r#"<g class="legend" font-family="sans-serif" font-size="13">"#);
    for (g, label) in atlas.groups().iter().enumerate() {
        let y = MARGIN + 10.0 + 22.0 * g as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{lx:.0}" y="{:.0}" width="14" height="14" fill="{}"/><text x="{:.0}" y="{:.0}">{}</text>"#,
            y - 11.0,
            options.color_map.color(g),
            lx + 20.0,
            y,
            escape(label)
        );
    }
    let _ = writeln!(svg, "</g>");
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Group with the largest share of its own cells at this entry.
fn dominant_group(weights: &[u64], atlas: &cellnn::SignatureAtlas) -> usize {
    let mut best = (0, -1.0);
    for (g, &w) in weights.iter().enumerate() {
        let total = atlas.group_total(g);
        let share = if total > 0 { w as f64 / total as f64 } else { 0.0 };
        if share > best.1 {
            best = (g, share);
        }
    }
    best.0
}

/// Uniform offset in the disc of radius `r`.
fn jitter(rng: &mut ChaCha8Rng, r: f64) -> (f64, f64) {
    if r <= 0.0 {
        return (0.0, 0.0);
    }
    let rho = r * rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    (rho * a.cos(), rho * a.sin())
}

/// Union of grid cells with density ≥ `t`, as one rectangle per row run.
fn band_path(grid: &DensityGrid, t: f64, frame: &Frame) -> String {
    let mut d = String::new();
    let w = grid.cell_size[0] * frame.scale;
    let h = grid.cell_size[1] * frame.scale;
    for iy in 0..grid.ny {
        let mut ix = 0;
        while ix < grid.nx {
            if grid.value(ix, iy) < t || grid.value(ix, iy) <= 0.0 {
                ix += 1;
                continue;
            }
            let start = ix;
            while ix < grid.nx && grid.value(ix, iy) >= t {
                ix += 1;
            }
            let x = frame.px(grid.origin[0] + start as f64 * grid.cell_size[0]);
            let y = frame.py(grid.origin[1] + (iy + 1) as f64 * grid.cell_size[1]);
            let _ = write!(d, "M{x:.2} {y:.2}h{:.2}v{h:.2}h{:.2}z", w * (ix - start) as f64, -w * (ix - start) as f64);
        }
    }
    d
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use cellnn::density::{contour_levels, ContourSpec, DensityGrid};
use cellnn::embed::Embedding2D;
use cellnn::io::{
    contours_name, density_csv_name, density_header_name, parse_density_header, read_atlas_csv, read_density_csv,
    read_embedding_csv, ArtifactError, ContourFile, Diagnostics,
};

pub const EMBEDDING_FILE: &str = "embedding.csv";
pub const ATLAS_FILE: &str = "atlas.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("session {dir}: missing {}", .missing.join(", "))]
    Missing { dir: PathBuf, missing: Vec<String> },
    #[error("{file}: {source}")]
    Artifact {
        file: PathBuf,
        #[source]
        source: ArtifactError,
    },
    #[error("{0}")]
    Inconsistent(String),
    #[error("reading {0}: {1}")]
    Io(PathBuf, std::io::Error),
}

/// Immutable view of one analysis directory.
#[derive(Debug, Clone)]
pub struct Session {
    pub dir: PathBuf,
    pub embedding: Embedding2D,
    pub diagnostics: Diagnostics,
    pub densities: BTreeMap<String, DensityGrid>,
    pub contours: BTreeMap<String, ContourFile>,
}

fn artifact<T>(file: &Path, r: Result<T, ArtifactError>) -> Result<T, SessionError> {
    r.map_err(|source| SessionError::Artifact {
        file: file.to_path_buf(),
        source,
    })
}

fn open(path: &Path) -> Result<BufReader<File>, SessionError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| SessionError::Io(path.to_path_buf(), e))
}

fn read_text(path: &Path) -> Result<String, SessionError> {
    std::fs::read_to_string(path).map_err(|e| SessionError::Io(path.to_path_buf(), e))
}

impl Session {
    /// Loads `embedding.csv`, `atlas.csv`, `diagnostics.json` and every
    /// `density_<group>.csv` (with its `.json` header). Contour files are
    /// optional; missing ones are recomputed at the default quantiles.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, SessionError> {
        let dir = dir.as_ref().to_path_buf();
        let mut missing: Vec<String> = [EMBEDDING_FILE, ATLAS_FILE, DIAGNOSTICS_FILE]
            .iter()
            .filter(|f| !dir.join(f).is_file())
            .map(|f| f.to_string())
            .collect();
        let mut density_files = Vec::new();
        if let Ok(listing) = std::fs::read_dir(&dir) {
            for entry in listing.flatten() {
                let name = entry.file_name().to_string_lossy().into_owned();
                if name.starts_with("density_") && name.ends_with(".csv") {
                    density_files.push(name);
                }
            }
        }
        density_files.sort();
        if density_files.is_empty() {
            missing.push("density_*.csv".into());
        }
        for csv_name in &density_files {
            let header = format!("{}.json", csv_name.trim_end_matches(".csv"));
            if !dir.join(&header).is_file() {
                missing.push(header);
            }
        }
        if !missing.is_empty() {
            return Err(SessionError::Missing { dir, missing });
        }

        let path = dir.join(DIAGNOSTICS_FILE);
        let diagnostics: Diagnostics = artifact(&path, serde_json::from_str(&read_text(&path)?).map_err(Into::into))?;
        let path = dir.join(EMBEDDING_FILE);
        let mut embedding = artifact(&path, read_embedding_csv(open(&path)?))?;
        embedding.atlas = embedding.atlas.with_anchor(diagnostics.anchor);
        let path = dir.join(ATLAS_FILE);
        let atlas = artifact(&path, read_atlas_csv(open(&path)?))?.with_anchor(diagnostics.anchor);
        if atlas != embedding.atlas {
            return Err(SessionError::Inconsistent(format!("{ATLAS_FILE} does not match {EMBEDDING_FILE}")));
        }
        if diagnostics.groups != embedding.atlas.groups() || diagnostics.k != embedding.atlas.k() {
            return Err(SessionError::Inconsistent(format!("{DIAGNOSTICS_FILE} does not match {EMBEDDING_FILE}")));
        }

        let mut densities = BTreeMap::new();
        let mut contours = BTreeMap::new();
        for csv_name in &density_files {
            let header_path = dir.join(format!("{}.json", csv_name.trim_end_matches(".csv")));
            let header = artifact(&header_path, parse_density_header(&read_text(&header_path)?))?;
            if density_csv_name(&header.group) != *csv_name || density_header_name(&header.group) != header_path.file_name().unwrap().to_string_lossy() {
                return Err(SessionError::Inconsistent(format!(
                    "{csv_name} holds group '{}'",
                    header.group
                )));
            }
            if embedding.atlas.group_index(&header.group).is_none() {
                return Err(SessionError::Inconsistent(format!(
                    "{csv_name}: group '{}' is not in the embedding",
                    header.group
                )));
            }
            let csv_path = dir.join(csv_name);
            let grid = artifact(&csv_path, read_density_csv(open(&csv_path)?, header))?;
            let contour_path = dir.join(contours_name(&grid.group));
            let contour = if contour_path.is_file() {
                artifact(&contour_path, ContourFile::parse(&read_text(&contour_path)?))?
            } else {
                let spec = ContourSpec::default();
                ContourFile::new(&grid.group, &spec, contour_levels(&grid, &spec))
            };
            contours.insert(grid.group.clone(), contour);
            densities.insert(grid.group.clone(), grid);
        }
        Ok(Self {
            dir,
            embedding,
            diagnostics,
            densities,
            contours,
        })
    }
}

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use serde_json::Value;

use super::{Cell, CellType, CohortTable, IngestError};

/// Supported cell-table encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TableFormat {
    #[default]
    Csv,
    Ndjson,
}

impl FromStr for TableFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(TableFormat::Csv),
            "ndjson" | "jsonl" => Ok(TableFormat::Ndjson),
            other => Err(IngestError::ColumnMap(format!("unknown table format '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnRole {
    CellId,
    SlideId,
    Group,
    CellType,
    X,
    Y,
}

impl ColumnRole {
    const ALL: [ColumnRole; 6] = [
        ColumnRole::CellId,
        ColumnRole::SlideId,
        ColumnRole::Group,
        ColumnRole::CellType,
        ColumnRole::X,
        ColumnRole::Y,
    ];

    pub fn canonical_name(self) -> &'static str {
        match self {
            ColumnRole::CellId => "cell_id",
            ColumnRole::SlideId => "slide_id",
            ColumnRole::Group => "group",
            ColumnRole::CellType => "cell_type",
            ColumnRole::X => "x",
            ColumnRole::Y => "y",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ColumnRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_name())
    }
}

impl FromStr for ColumnRole {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|r| r.canonical_name() == s.trim())
            .ok_or_else(|| IngestError::ColumnMap(format!("unknown column role '{s}'")))
    }
}

/// Maps each column role to the header name it is read from.
///
/// `cell_id` is optional: when its column is absent, ids are assigned
/// sequentially from zero in input order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMap {
    names: [String; 6],
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            names: ColumnRole::ALL.map(|r| r.canonical_name().to_string()),
        }
    }
}

impl ColumnMap {
    pub fn with(mut self, role: ColumnRole, column: impl Into<String>) -> Self {
        self.names[role.index()] = column.into();
        self
    }

    pub fn column(&self, role: ColumnRole) -> &str {
        &self.names[role.index()]
    }
}

/// Parses `role=column,role=column`; unspecified roles keep their canonical
/// names.
impl FromStr for ColumnMap {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut map = ColumnMap::default();
        for pair in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (role, column) = pair
                .split_once('=')
                .ok_or_else(|| IngestError::ColumnMap(format!("expected role=column, got '{pair}'")))?;
            map = map.with(role.parse()?, column.trim());
        }
        Ok(map)
    }
}

struct RawRow<'a> {
    line: u64,
    cell_id: Option<&'a str>,
    slide_id: &'a str,
    group: &'a str,
    cell_type: &'a str,
    x: &'a str,
    y: &'a str,
}

fn parse_coordinate(raw: &str, column: &str, line: u64) -> Result<f64, IngestError> {
    let value: f64 = raw.trim().parse().map_err(|_| IngestError::Malformed {
        line,
        message: format!("invalid number '{raw}' in column '{column}'"),
    })?;
    if !value.is_finite() {
        return Err(IngestError::NonFinite { line });
    }
    Ok(value)
}

fn build_cell(row: RawRow<'_>, next_id: u64, map: &ColumnMap) -> Result<Cell, IngestError> {
    let cell_id = match row.cell_id {
        Some(raw) => raw.trim().parse().map_err(|_| IngestError::Malformed {
            line: row.line,
            message: format!("invalid cell id '{raw}'"),
        })?,
        None => next_id,
    };
    let cell_type = row
        .cell_type
        .parse::<CellType>()
        .map_err(|e| IngestError::UnknownCellType {
            token: e.0,
            line: row.line,
        })?;
    Ok(Cell {
        cell_id,
        slide_id: row.slide_id.to_string(),
        group: row.group.to_string(),
        cell_type,
        x: parse_coordinate(row.x, map.column(ColumnRole::X), row.line)?,
        y: parse_coordinate(row.y, map.column(ColumnRole::Y), row.line)?,
    })
}

/// Reads a cell table. Cells keep input order; line numbers in errors are
/// 1-based and count the CSV header as line 1.
pub fn parse_cell_table<R: Read>(
    source: R,
    format: TableFormat,
    columns: &ColumnMap,
) -> Result<CohortTable, IngestError> {
    let cells = match format {
        TableFormat::Csv => parse_csv(source, columns)?,
        TableFormat::Ndjson => parse_ndjson(source, columns)?,
    };
    Ok(CohortTable::from_cells(cells))
}

fn parse_csv<R: Read>(source: R, columns: &ColumnMap) -> Result<Vec<Cell>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| csv_error(e, 1))?
        .clone();
    let locate = |role: ColumnRole| headers.iter().position(|h| h == columns.column(role));
    let required = |role: ColumnRole| {
        locate(role).ok_or_else(|| IngestError::MissingColumn {
            role,
            column: columns.column(role).to_string(),
        })
    };
    let slide = required(ColumnRole::SlideId)?;
    let group = required(ColumnRole::Group)?;
    let kind = required(ColumnRole::CellType)?;
    let xcol = required(ColumnRole::X)?;
    let ycol = required(ColumnRole::Y)?;
    let idcol = locate(ColumnRole::CellId);

    let mut cells = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let line = reader.position().line();
        match reader.read_record(&mut record) {
            Ok(true) => {}
            Ok(false) => break,
            Err(e) => return Err(csv_error(e, line)),
        }
        let line = record.position().map_or(line, |p| p.line());
        let field = |i: usize| {
            record.get(i).ok_or_else(|| IngestError::Malformed {
                line,
                message: format!("missing field {}", i + 1),
            })
        };
        let row = RawRow {
            line,
            cell_id: idcol.map(field).transpose()?,
            slide_id: field(slide)?,
            group: field(group)?,
            cell_type: field(kind)?,
            x: field(xcol)?,
            y: field(ycol)?,
        };
        cells.push(build_cell(row, cells.len() as u64, columns)?);
    }
    Ok(cells)
}

fn csv_error(e: csv::Error, fallback_line: u64) -> IngestError {
    let line = e.position().map_or(fallback_line, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => IngestError::Io(io),
        other => IngestError::Malformed {
            line,
            message: format!("{other:?}"),
        },
    }
}

fn json_text(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_ndjson<R: Read>(source: R, columns: &ColumnMap) -> Result<Vec<Cell>, IngestError> {
    let mut cells = Vec::new();
    for (i, line) in BufReader::new(source).lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| IngestError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let object = value.as_object().ok_or_else(|| IngestError::Malformed {
            line: line_no,
            message: "expected a JSON object".into(),
        })?;
        let get = |role: ColumnRole| -> Result<Option<String>, IngestError> {
            match object.get(columns.column(role)) {
                None => Ok(None),
                Some(v) => json_text(v).map(Some).ok_or_else(|| IngestError::Malformed {
                    line: line_no,
                    message: format!("field '{}' must be a string or number", columns.column(role)),
                }),
            }
        };
        let required = |role: ColumnRole| {
            get(role)?.ok_or_else(|| IngestError::MissingColumn {
                role,
                column: columns.column(role).to_string(),
            })
        };
        let cell_id = get(ColumnRole::CellId)?;
        let slide_id = required(ColumnRole::SlideId)?;
        let group = required(ColumnRole::Group)?;
        let cell_type = required(ColumnRole::CellType)?;
        let x = required(ColumnRole::X)?;
        let y = required(ColumnRole::Y)?;
        let row = RawRow {
            line: line_no,
            cell_id: cell_id.as_deref(),
            slide_id: &slide_id,
            group: &group,
            cell_type: &cell_type,
            x: &x,
            y: &y,
        };
        cells.push(build_cell(row, cells.len() as u64, columns)?);
    }
    Ok(cells)
}

/// Writes the canonical CSV schema (`cell_id,slide_id,group,cell_type,x,y`).
/// Coordinates use the shortest representation that parses back exactly.
pub fn write_cell_table<W: Write>(cohort: &CohortTable, out: W) -> Result<(), IngestError> {
    let mut writer = csv::Writer::from_writer(out);
    let header = ColumnRole::ALL.map(ColumnRole::canonical_name);
    writer.write_record(header).map_err(|e| csv_error(e, 0))?;
    for cell in cohort.cells() {
        writer
            .write_record([
                cell.cell_id.to_string().as_str(),
                &cell.slide_id,
                &cell.group,
                cell.cell_type.short_name(),
                &cell.x.to_string(),
                &cell.y.to_string(),
            ])
            .map_err(|e| csv_error(e, 0))?;
    }
    writer.flush()?;
    Ok(())
}

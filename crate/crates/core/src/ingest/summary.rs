use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use super::{CellType, CohortTable};

/// Per-group biopsy counts and per-type cell counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SummaryTable {
    pub groups: Vec<String>,
    /// Distinct slides per group.
    pub biopsies: Vec<usize>,
    /// `counts[type ordinal][group index]`.
    pub counts: [Vec<usize>; CellType::COUNT],
}

pub const BIOPSY_ROW_LABEL: &str = "Sample biopsies";

pub fn summarize(cohort: &CohortTable) -> SummaryTable {
    let groups: Vec<String> = cohort.groups().iter().cloned().collect();
    let column: BTreeMap<&str, usize> = groups
        .iter()
        .enumerate()
        .map(|(i, g)| (g.as_str(), i))
        .collect();
    let mut counts: [Vec<usize>; CellType::COUNT] = std::array::from_fn(|_| vec![0; groups.len()]);
    let mut slides: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); groups.len()];
    for cell in cohort.cells() {
        let g = column[cell.group.as_str()];
        counts[cell.cell_type.ordinal()][g] += 1;
        slides[g].insert(cell.slide_id.as_str());
    }
    SummaryTable {
        biopsies: slides.iter().map(BTreeSet::len).collect(),
        groups,
        counts,
    }
}

impl SummaryTable {
    pub fn total_cells(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    fn rows(&self) -> impl Iterator<Item = (&'static str, &[usize])> {
        std::iter::once((BIOPSY_ROW_LABEL, self.biopsies.as_slice())).chain(
            CellType::ALL
                .iter()
                .map(|t| (t.table_label(), self.counts[t.ordinal()].as_slice())),
        )
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        let mut header = vec!["row".to_string()];
        header.extend(self.groups.iter().cloned());
        writer.write_record(&header)?;
        for (label, values) in self.rows() {
            let mut record = vec![label.to_string()];
            record.extend(values.iter().map(usize::to_string));
            writer.write_record(&record)?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Aligned plain-text rendering with thousands separators.
    pub fn to_text(&self) -> String {
        let label_width = self
            .rows()
            .map(|(l, _)| l.len())
            .max()
            .unwrap_or(0)
            .max("Count".len());
        let cells: Vec<Vec<String>> = self
            .rows()
            .map(|(_, v)| v.iter().map(|&n| thousands(n)).collect())
            .collect();
        let widths: Vec<usize> = self
            .groups
            .iter()
            .enumerate()
            .map(|(g, name)| cells.iter().map(|r| r[g].len()).max().unwrap_or(0).max(name.len()))
            .collect();

        let mut text = String::new();
        let _ = write!(text, "{:<label_width$}", "Count");
        for (name, w) in self.groups.iter().zip(&widths) {
            let _ = write!(text, " | {name:>w$}");
        }
        text.push('\n');
        let rule_len = label_width + widths.iter().map(|w| w + 3).sum::<usize>();
        text.push_str(&"-".repeat(rule_len));
        text.push('\n');
        for ((label, _), row) in self.rows().zip(&cells) {
            let _ = write!(text, "{label:<label_width$}");
            for (value, w) in row.iter().zip(&widths) {
                let _ = write!(text, " | {value:>w$}");
            }
            text.push('\n');
        }
        text
    }
}

fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Cell;
    use proptest::prelude::*;

    fn cell(id: u64, slide: &str, group: &str, t: CellType) -> Cell {
        Cell {
            cell_id: id,
            slide_id: slide.into(),
            group: group.into(),
            cell_type: t,
            x: id as f64,
            y: 0.0,
        }
    }

    #[test]
    fn fixture_counts() {
        use CellType::*;
        let cohort = CohortTable::from_cells(vec![
            cell(0, "s1", "A", Neutrophil),
            cell(1, "s1", "A", Neutrophil),
            cell(2, "s1", "A", Neutrophil),
            cell(3, "s1", "A", Epithelial),
            cell(4, "s2", "B", Lymphocyte),
            cell(5, "s2", "B", Lymphocyte),
        ]);
        let table = summarize(&cohort);
        assert_eq!(table.groups, ["A", "B"]);
        assert_eq!(table.biopsies, [1, 1]);
        assert_eq!(table.counts[Neutrophil.ordinal()], [3, 0]);
        assert_eq!(table.counts[Epithelial.ordinal()], [1, 0]);
        assert_eq!(table.counts[Lymphocyte.ordinal()], [0, 2]);
        for t in [Plasma, Eosinophil, Connective] {
            assert_eq!(table.counts[t.ordinal()], [0, 0]);
        }
        assert_eq!(table.total_cells(), 6);
    }

    #[test]
    fn empty_cohort() {
        let table = summarize(&CohortTable::default());
        assert!(table.groups.is_empty());
        assert_eq!(table.total_cells(), 0);
        assert!(table.biopsies.is_empty());
    }

    #[test]
    fn row_order_follows_published_layout() {
        let table = summarize(&CohortTable::from_cells(vec![cell(0, "s", "A", CellType::Plasma)]));
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let labels: Vec<_> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(
            labels,
            [
                "Sample biopsies",
                "Neutrophils (neu)",
                "Epithelial cell (epi)",
                "Lymphocytes (lym)",
                "Plasma cell (pla)",
                "Eosinophils (eos)",
                "Connective tissue (con)",
            ]
        );
        let plain = table.to_text();
        assert!(plain.lines().nth(2).unwrap().starts_with("Sample biopsies"));
    }

    #[test]
    fn thousands_separator() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(999), "999");
        assert_eq!(thousands(5_528_718), "5,528,718");
    }

    proptest! {
        #[test]
        fn columns_sum_to_group_sizes(rows in prop::collection::vec((0usize..3, 0usize..4, 0usize..6), 0..200)) {
            let cells: Vec<Cell> = rows.iter().enumerate().map(|(i, &(g, s, t))| Cell {
                cell_id: i as u64,
                slide_id: format!("s{s}"),
                group: format!("g{g}"),
                cell_type: CellType::from_ordinal(t).unwrap(),
                x: 0.0,
                y: 0.0,
            }).collect();
            let cohort = CohortTable::from_cells(cells);
            let table = summarize(&cohort);
            prop_assert_eq!(table.total_cells(), cohort.len());
            for (gi, g) in table.groups.iter().enumerate() {
                let column: usize = table.counts.iter().map(|c| c[gi]).sum();
                let expected = cohort.cells().iter().filter(|c| &c.group == g).count();
                prop_assert_eq!(column, expected);
            }
        }
    }
}

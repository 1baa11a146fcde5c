#![no_main]
use libfuzzer_sys::fuzz_target;

use cellnn::ingest::{parse_cell_table, write_cell_table, ColumnMap, TableFormat};

fuzz_target!(|data: &[u8]| {
    let columns = ColumnMap::default();
    if let Ok(cohort) = parse_cell_table(data, TableFormat::Csv, &columns) {
        let mut out = Vec::new();
        write_cell_table(&cohort, &mut out).unwrap();
        let again = parse_cell_table(&out[..], TableFormat::Csv, &columns).unwrap();
        assert_eq!(cohort, again);
    }
});

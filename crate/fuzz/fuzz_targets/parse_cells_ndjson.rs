#![no_main]
use libfuzzer_sys::fuzz_target;

use cellnn::ingest::{parse_cell_table, ColumnMap, TableFormat};

fuzz_target!(|data: &[u8]| {
    let _ = parse_cell_table(data, TableFormat::Ndjson, &ColumnMap::default());
});

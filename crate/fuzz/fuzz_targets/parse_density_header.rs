#![no_main]
use libfuzzer_sys::fuzz_target;

use cellnn::io::{parse_density_header, read_density_csv, ContourFile};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = ContourFile::parse(text);
    let (head, body) = text.split_once('\n').unwrap_or((text, ""));
    if let Ok(grid) = parse_density_header(head) {
        if grid.nx * grid.ny <= 4096 {
            let _ = read_density_csv(body.as_bytes(), grid);
        }
    }
});

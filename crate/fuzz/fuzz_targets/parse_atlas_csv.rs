#![no_main]
use libfuzzer_sys::fuzz_target;

use cellnn::io::{read_atlas_csv, write_atlas_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(atlas) = read_atlas_csv(data) {
        let mut out = Vec::new();
        write_atlas_csv(&atlas, &mut out).unwrap();
        let again = read_atlas_csv(&out[..]).unwrap();
        assert_eq!(atlas.entries(), again.entries());
    }
});

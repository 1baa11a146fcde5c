#![no_main]
use libfuzzer_sys::fuzz_target;

use cellnn::ingest::{parse_patch_detections, parse_slide_groups};

fuzz_target!(|data: &[u8]| {
    let _ = parse_patch_detections(data);
    let _ = parse_slide_groups(data);
});

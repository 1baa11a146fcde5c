#![no_main]
use libfuzzer_sys::fuzz_target;

use cellnn::quantify::BBox;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(b) = text.parse::<BBox>() {
            assert!(b.xmin <= b.xmax && b.ymin <= b.ymax);
            assert_eq!(b.to_string().parse::<BBox>().unwrap(), b);
        }
    }
});

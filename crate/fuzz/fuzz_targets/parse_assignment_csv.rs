#![no_main]
use libfuzzer_sys::fuzz_target;

use cellnn::io::read_assignment_csv;

fuzz_target!(|data: &[u8]| {
    if let Some((&k, rest)) = data.split_first() {
        let _ = read_assignment_csv(rest, u32::from(k % 32));
    }
});

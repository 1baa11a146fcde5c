#![no_main]
use libfuzzer_sys::fuzz_target;

use cellnn::io::read_embedding_csv;

fuzz_target!(|data: &[u8]| {
    if let Ok(emb) = read_embedding_csv(data) {
        assert_eq!(emb.coords.len(), emb.atlas.len());
    }
});

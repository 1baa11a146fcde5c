#![no_main]
use libfuzzer_sys::fuzz_target;

use cellnn::synth::TissueSpec;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(spec) = TissueSpec::from_json(text) {
            let _ = spec.mean_nn_spacing();
            let _ = spec.motif_isolation_ok();
        }
    }
});

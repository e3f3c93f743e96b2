#![no_main]

use libfuzzer_sys::fuzz_target;
use primseg::synth::SceneSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = serde_json::from_str::<SceneSpec>(text) {
        let _ = spec.validate();
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use primseg::segmentation::parse_segmentation;
use primseg::synth::parse_ground_truth;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(seg) = parse_segmentation(text) {
        assert!(seg.validate().is_ok());
    }
    if let Ok((seg, surfaces)) = parse_ground_truth(text) {
        assert!(surfaces.is_empty() || surfaces.len() == seg.num_segments());
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cloud) = primseg::io::parse_ply(text) {
            assert!(cloud.positions().iter().all(|p| p.iter().all(|x| x.is_finite())));
        }
    }
});

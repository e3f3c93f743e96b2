#![no_main]

use libfuzzer_sys::fuzz_target;
use primseg::io::{parse_xyz, write_xyz};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cloud) = parse_xyz(text) {
        let mut out = Vec::new();
        write_xyz(&cloud, &mut out).unwrap();
        let again = parse_xyz(std::str::from_utf8(&out).unwrap()).expect("written cloud parses");
        assert_eq!(again.positions(), cloud.positions());
        assert_eq!(again.normals(), cloud.normals());
    }
});

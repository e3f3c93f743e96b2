#![no_main]

use libfuzzer_sys::fuzz_target;
use primseg::linalg::SymmetricMatrix;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    // Keep allocations bounded: the header declares n and the body holds n(n+1)/2 values.
    if text.len() > 1 << 16 {
        return;
    }
    if let Ok(m) = SymmetricMatrix::read_lower(text) {
        for i in 0..m.n() {
            for j in 0..=i {
                assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
    }
});

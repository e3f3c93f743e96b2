#![no_main]

use libfuzzer_sys::fuzz_target;
use primseg::estimation::{parse_attributes, write_attributes};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(attrs) = parse_attributes(text, None) {
        let mut out = Vec::new();
        write_attributes(&attrs, &mut out).unwrap();
        let again = parse_attributes(std::str::from_utf8(&out).unwrap(), Some(attrs.len())).expect("written attributes parse");
        assert_eq!(again.len(), attrs.len());
    }
});

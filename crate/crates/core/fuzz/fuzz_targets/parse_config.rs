#![no_main]

use libfuzzer_sys::fuzz_target;
use primseg::config::Config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = Config::from_json_str(text) {
        let again = Config::from_json_str(&serde_json::to_string(&cfg).unwrap()).expect("serialized config loads");
        assert_eq!(again, cfg);
    }
});

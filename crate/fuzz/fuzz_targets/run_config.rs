#![no_main]

use libfuzzer_sys::fuzz_target;
use scorp_cli::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let mut cfg = RunConfig::default();
        if cfg.merge_text(text, "fuzz").is_ok() {
            let mut again = RunConfig::default();
            again.merge_text(&cfg.to_text(), "echo").expect("re-parse");
            assert_eq!(again, cfg);
        }
    }
});

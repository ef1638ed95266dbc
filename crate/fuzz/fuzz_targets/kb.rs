#![no_main]

use libfuzzer_sys::fuzz_target;
use scorp_core::lexicon::parse_kb;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(records) = parse_kb(text, "fuzz") {
            assert!(records.iter().all(|r| !r.word.is_empty() && !r.sememes.is_empty()));
        }
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use scorp_core::evaluation::ScoreDump;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(dump) = ScoreDump::parse(text, "fuzz") {
            let again = ScoreDump::parse(&dump.to_tsv(), "echo").expect("re-parse");
            assert_eq!(again, dump);
        }
    }
});

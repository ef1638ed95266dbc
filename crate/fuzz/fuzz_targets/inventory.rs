#![no_main]

use libfuzzer_sys::fuzz_target;
use scorp_core::lexicon::SememeInventory;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(inv) = SememeInventory::parse_tsv(text, "fuzz") {
            let again = SememeInventory::parse_tsv(&inv.to_tsv(), "echo").expect("re-parse");
            assert_eq!(again, inv);
        }
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use scorp_core::embeddings::EmbeddingTable;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(table) = EmbeddingTable::parse(text, "fuzz") {
            for w in table.words() {
                let v = table.get(w).expect("listed word has a vector");
                assert_eq!(v.len(), table.dim());
                assert!(v.iter().all(|x| x.is_finite()));
            }
        }
    }
});

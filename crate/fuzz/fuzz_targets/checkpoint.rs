#![no_main]

use libfuzzer_sys::fuzz_target;
use scorp_core::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        // One encode normalizes the metadata block; after that bytes are a fixpoint.
        let bytes = ck.encode();
        let again = Checkpoint::decode(&bytes).expect("re-decode");
        assert_eq!(again.encode(), bytes);
    }
});

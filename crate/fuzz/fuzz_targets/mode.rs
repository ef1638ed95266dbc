#![no_main]

use libfuzzer_sys::fuzz_target;
use scorp_core::models::Mode;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(mode) = text.parse::<Mode>() {
            assert_eq!(mode.to_string().parse::<Mode>().expect("re-parse"), mode);
        }
    }
});

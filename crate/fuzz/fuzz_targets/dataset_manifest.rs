#![no_main]

use libfuzzer_sys::fuzz_target;
use ttt_seg::dataio::DatasetManifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = DatasetManifest::parse(text);
    }
});

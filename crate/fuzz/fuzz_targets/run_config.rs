#![no_main]

use libfuzzer_sys::fuzz_target;
use ttt_seg::config::RunConfig;

// Lines after the first NUL are `key=value` overrides.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (doc, rest) = text.split_once('\0').unwrap_or((text, ""));
    let overrides: Vec<String> = rest.lines().map(str::to_string).collect();
    let _ = RunConfig::parse(Some(doc), &overrides);
});

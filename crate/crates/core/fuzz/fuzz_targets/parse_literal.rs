#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| harland::fuzzing::parse_literal_text(data));

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    emd_core::fuzzing::checkpoint(data);
});

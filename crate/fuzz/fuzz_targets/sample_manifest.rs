#![no_main]

use libfuzzer_sys::fuzz_target;
use vidanim::eval::SampleManifest;

fuzz_target!(|data: &[u8]| {
    let _ = SampleManifest::parse(data);
});

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = vidanim::dataset::decode_png(data) {
        assert_eq!(t.dims()[0], 3);
    }
});

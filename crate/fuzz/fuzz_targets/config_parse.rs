#![no_main]

use libfuzzer_sys::fuzz_target;
use vidanim::Config;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = Config::parse_str(text) {
            let again = Config::parse_str(&cfg.render()).expect("rendered config must parse");
            assert_eq!(again.render(), cfg.render());
        }
    }
});

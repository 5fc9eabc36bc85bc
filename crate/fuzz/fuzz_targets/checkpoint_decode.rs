#![no_main]

use libfuzzer_sys::fuzz_target;
use vidanim::checkpoint::decode;

// Input layout: a little-endian u32 manifest length, the manifest bytes, then the bytes
// served for every tensor file the manifest names.
fuzz_target!(|data: &[u8]| {
    if data.len() < 4 {
        return;
    }
    let n = u32::from_le_bytes([data[0], data[1], data[2], data[3]]) as usize;
    let rest = &data[4..];
    let (manifest, blob) = rest.split_at(n.min(rest.len()));
    let _ = decode(manifest, &mut |_| Ok(blob.to_vec()));
});

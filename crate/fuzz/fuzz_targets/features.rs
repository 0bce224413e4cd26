#![no_main]

use libfuzzer_sys::fuzz_target;
use multibisage::features::parse_features;

// BSFT stores rows in file order and rejects non-finite values, so an
// accepted buffer is already canonical: rewrite must reproduce it.
fuzz_target!(|data: &[u8]| {
    let Ok(store) = parse_features(data) else {
        return;
    };
    let mut buf = Vec::new();
    store.write_bsft(&mut buf).unwrap();
    assert_eq!(data, buf.as_slice());
});

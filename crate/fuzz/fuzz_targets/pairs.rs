#![no_main]

use libfuzzer_sys::fuzz_target;
use multibisage::synth::{parse_pairs, write_pairs};

fuzz_target!(|data: &[u8]| {
    let Ok(pairs) = parse_pairs(data) else {
        return;
    };
    let mut buf = Vec::new();
    write_pairs(&pairs, &mut buf).unwrap();
    let again = parse_pairs(&buf).expect("canonical form reparses");
    assert_eq!(pairs, again);
});

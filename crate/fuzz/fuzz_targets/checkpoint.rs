#![no_main]

use libfuzzer_sys::fuzz_target;
use multibisage::checkpoint::parse_checkpoint;

// BSCK keeps entries in file order and stores raw f32 bits, so an
// accepted buffer rewrites to itself exactly.
fuzz_target!(|data: &[u8]| {
    let Ok(ck) = parse_checkpoint(data) else {
        return;
    };
    let mut buf = Vec::new();
    ck.write(&mut buf).unwrap();
    assert_eq!(data, buf.as_slice());
});

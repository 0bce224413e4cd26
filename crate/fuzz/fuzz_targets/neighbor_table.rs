#![no_main]

use libfuzzer_sys::fuzz_target;
use multibisage::walk::parse_neighbor_table;

// write_tsv emits groups in sorted key order, so one write canonicalizes
// and a second round trip must be byte-stable.
fuzz_target!(|data: &[u8]| {
    let Ok(table) = parse_neighbor_table(data) else {
        return;
    };
    let mut b1 = Vec::new();
    table.write_tsv(&mut b1).unwrap();
    let again = parse_neighbor_table(&b1).expect("canonical form reparses");
    let mut b2 = Vec::new();
    again.write_tsv(&mut b2).unwrap();
    assert_eq!(b1, b2);
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use multibisage::graph::parse_edge_list;

// Accepted input must survive a serialize/reparse cycle unchanged.
fuzz_target!(|data: &[u8]| {
    let Ok(edges) = parse_edge_list(data) else {
        return;
    };
    let mut buf = Vec::new();
    for (p, c) in &edges {
        buf.extend_from_slice(format!("{p}\t{c}\n").as_bytes());
    }
    let again = parse_edge_list(&buf).expect("canonical form reparses");
    assert_eq!(edges, again);
});

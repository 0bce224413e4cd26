#![no_main]

use libfuzzer_sys::fuzz_target;
use multibisage::pipeline::{parse_graph_subset, subset_label};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    for num_graphs in [1usize, 3, 6] {
        let Ok(ids) = parse_graph_subset(text, num_graphs) else {
            continue;
        };
        assert!(!ids.is_empty());
        assert!(ids.iter().all(|&i| (i as usize) < num_graphs));
        // Accepted subsets round-trip through their canonical label.
        let again = parse_graph_subset(&subset_label(&ids), num_graphs).unwrap();
        assert_eq!(ids, again);
    }
});

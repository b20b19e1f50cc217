#![allow(dead_code)]

use std::fs;
use std::path::PathBuf;

use resmonet_core::graph::{assemble_resmonet, parse_graph, ResMoNetConfig};
use resmonet_core::ModelGraph;

pub fn fixture(name: &str) -> PathBuf {
    // Resolves from any crate in the workspace.
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

/// Hand-written graph files plus ResMoNet variants over depths, input sizes
/// and class counts.
pub fn corpus() -> Vec<(String, ModelGraph)> {
    let mut out = Vec::new();
    let mut files: Vec<PathBuf> = fs::read_dir(fixture("graphs"))
        .expect("graph fixtures")
        .map(|e| e.expect("entry").path())
        .collect();
    files.sort();
    for path in files {
        let text = fs::read_to_string(&path).expect("readable");
        let graph = parse_graph(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        out.push((path.file_name().unwrap().to_string_lossy().into_owned(), graph));
    }
    for (m, r) in [(1, 1), (1, 2), (2, 1), (1, 3), (3, 3)] {
        let g = assemble_resmonet(&ResMoNetConfig::default().with_depths(m, r)).expect("assembles");
        out.push((format!("resmonet m={m} r={r}"), g));
    }
    for side in [32, 48, 64] {
        for (m, r) in [(1, 1), (2, 2)] {
            let cfg = ResMoNetConfig::desk(side).with_depths(m, r);
            out.push((format!("desk{side} m={m} r={r}"), assemble_resmonet(&cfg).expect("assembles")));
        }
    }
    for classes in [2, 5, 10] {
        let cfg = ResMoNetConfig::desk(32).with_classes(classes);
        out.push((format!("desk32 classes={classes}"), assemble_resmonet(&cfg).expect("assembles")));
    }
    out
}

//! Prints a ResMoNet graph file.
//!
//! ```text
//! cargo run -p resmonet-core --example print_graph -- default > models/resmonet.graph
//! cargo run -p resmonet-core --example print_graph -- desk > models/resmonet-desk32.graph
//! ```

use resmonet_core::graph::{assemble_resmonet, format_graph, ResMoNetConfig};
use resmonet_core::synthetic::DESK_SIDE;

fn main() {
    let cfg = match std::env::args().nth(1).as_deref() {
        Some("default") | None => ResMoNetConfig::default(),
        Some("desk") => ResMoNetConfig::desk(DESK_SIDE),
        Some(other) => {
            eprintln!("unknown profile `{other}` (expected default or desk)");
            std::process::exit(1);
        }
    };
    let graph = assemble_resmonet(&cfg).expect("built-in profiles are valid");
    print!("{}", format_graph(&graph));
}

//! Print the compile decisions and simulated makespans of every corpus graph.
//!
//! `cargo run --example corpus_report -p dpuc-core`

use dpuc::compile::{compile, CompileOptions};
use dpuc::hw::MachineConfig;

fn main() {
    let cfg = MachineConfig::default();
    for (name, g) in dpuc::corpus::all() {
        let c = compile(&g, &cfg, &CompileOptions::default()).expect("corpus graph compiles");
        let seq = compile(&g, &cfg, &CompileOptions { pipelined: false, ..Default::default() })
            .expect("corpus graph compiles");
        println!(
            "{name}: makespan {} (sequential {}), {} instructions",
            c.report.makespan, seq.report.makespan, c.report.instructions
        );
        for n in &c.report.nodes {
            let fusion = n.fusion.filter(|f| f.enabled).map_or("-".to_string(), |f| format!("h_c={} k={}", f.h_c, f.k));
            println!(
                "  node {} {}: {} tiles ({} strips, {} slabs), {} groups, fusion {fusion}",
                n.id, n.op, n.tiles, n.strips, n.slabs, n.groups
            );
        }
    }
}

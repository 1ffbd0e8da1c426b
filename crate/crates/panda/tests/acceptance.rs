//! Acceptance run over the synthetic benchmark: one line per criterion.

use panda::bench::{run_all, BenchConfig};

fn main() {
    let results = run_all(&BenchConfig::default());
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

//! Run the small-scale forgetting experiment for one seed and print the
//! old-center/new-center Dice pair per fine-tuning strategy.
//!
//! Usage: `cargo run --release --example forgetting -- [epochs] [seed]`

use promptseg::pipeline::run_forgetting;
use promptseg::tuning::TuningStrategy;

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(6);
    let seed: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let start = std::time::Instant::now();
    let out = run_forgetting(seed, epochs).expect("experiment failed");
    println!("seed {seed}, {epochs} fine-tune epochs:");
    for &s in &TuningStrategy::ALL {
        let (old, new) = out.scores[&s];
        println!("  {:>8}  old {old:.4}  new {new:.4}", s.name());
    }
    println!(
        "adaptation on the new center: {}",
        if out.adaptation_holds() { "every strategy beats the baseline" } else { "not universal" }
    );
    println!(
        "forgetting order: full {} deep prompts",
        if out.forgetting_ordered() { "drops at least as much as" } else { "drops less than" }
    );
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
}

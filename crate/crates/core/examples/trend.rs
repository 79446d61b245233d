//! Deep supervision against the single-decoder baseline on the desk-scale
//! setup: validation loss, mid-layer CKA and probe accuracy per seed.
//! Each seed takes several minutes on one core.
//!
//!     cargo run --release --example trend -- [seeds...]

use tapmim::experiments::{run_trend, trend_tables, TrendSetup};
use tapmim::training::Mode;

fn main() -> tapmim::Result<()> {
    let mut seeds: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if seeds.is_empty() {
        seeds.push(0);
    }
    let setup = TrendSetup::desk();
    println!("{} steps per run, taps {:?}", setup.steps(), setup.model.tap_indices);
    let (train, val) = setup.data()?;
    let mut runs = Vec::new();
    for seed in seeds {
        for mode in [Mode::DeepMim, Mode::BaselineMae] {
            let r = run_trend(&setup, &train, &val, seed, mode)?;
            eprintln!("seed {seed} {mode}: {:.0}s", r.seconds);
            runs.push(r);
        }
    }
    print!("{}", trend_tables(&runs));
    Ok(())
}

//! Runs every finite-difference check on three seeds.

use fusewright::gradsuite::{names, run, TOLERANCE};

fn main() -> fusewright::Result<()> {
    let mut worst = 0.0f64;
    for name in names() {
        let e = run(name, &[0, 1, 2])?;
        worst = worst.max(e);
        println!("{name:24} {e:.2e}");
    }
    println!("worst {worst:.2e} (tolerance {TOLERANCE:e})");
    Ok(())
}

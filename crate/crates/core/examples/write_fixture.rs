//! Writes the synthetic fixture to a directory (default `fixtures/synthetic`).

use std::path::PathBuf;

use streamtemp::fixture::{generate, FixtureConfig};

fn main() -> streamtemp::Result<()> {
    let dir = std::env::args().nth(1).map_or_else(|| PathBuf::from("fixtures/synthetic"), PathBuf::from);
    generate(&FixtureConfig::default()).write(&dir)?;
    println!("fixture written to {}", dir.display());
    Ok(())
}

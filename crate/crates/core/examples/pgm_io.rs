//! Writes a PGM and checks that reading and rewriting it is bit-exact.

use fusewright::data::{read_image, write_image, Image};

fn main() -> fusewright::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| fusewright::Error::Input(e.to_string()))?;
    let a = dir.path().join("a.pgm");
    let b = dir.path().join("b.pgm");
    let img = Image::new(8, 8, (0..64).map(|i| i as f64 / 63.0).collect())?;
    write_image(&a, &img)?;
    write_image(&b, &read_image(&a)?)?;
    let same = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    println!("read -> write identical: {same}");
    Ok(())
}

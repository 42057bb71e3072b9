//! Encodes task instructions, compares them, and round-trips an exported vector.

use fusewright::instruct;
use fusewright::tasks::TaskKind;

fn main() -> fusewright::Result<()> {
    let embs: Vec<_> = TaskKind::ALL
        .iter()
        .map(|k| instruct::encode_text(k.instruction()))
        .collect::<Result<_, _>>()?;
    for (i, a) in embs.iter().enumerate() {
        for b in &embs[i + 1..] {
            println!("cos({:?}, {:?}) = {:.3}", a.text, b.text, instruct::cosine(&a.vector, &b.vector));
        }
    }
    let dir = tempfile::tempdir().map_err(|e| fusewright::Error::Input(e.to_string()))?;
    let p = dir.path().join("seg.emb");
    instruct::export_embedding(&p, &embs[0].vector)?;
    let back = instruct::import_embedding(&p, instruct::EMBED_DIM)?;
    println!("imported vector equals original: {}", back.vector == embs[0].vector);
    Ok(())
}

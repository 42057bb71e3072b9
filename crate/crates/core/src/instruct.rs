//! Instruction embeddings: a deterministic bag-of-token hash encoder and a
//! binary import/export path for vectors computed elsewhere.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const EMBED_DIM: usize = 64;
const MAGIC: &[u8; 6] = b"FTEMB1";
const HASH_SEED: &[u8] = b"fusewright-token-v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Source {
    Builtin,
    Imported,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub source: Source,
    /// Instruction text, or the file path for imported vectors.
    pub text: String,
}

fn token_vector(token: &str, dim: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(HASH_SEED);
    h.update(token.as_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Numeric(format!("cannot normalize vector of norm {n}")));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

/// Encodes an instruction with the default dimension.
pub fn encode_text(instruction: &str) -> Result<Embedding> {
    encode_text_dim(instruction, EMBED_DIM)
}

pub fn encode_text_dim(instruction: &str, dim: usize) -> Result<Embedding> {
    let lower = instruction.to_lowercase();
    let tokens: Vec<&str> = lower.split_whitespace().collect();
    if tokens.is_empty() || dim == 0 {
        return Err(Error::Input("instruction is empty".into()));
    }
    let mut acc = vec![0.0; dim];
    for t in &tokens {
        for (a, v) in acc.iter_mut().zip(token_vector(t, dim)) {
            *a += v;
        }
    }
    let n = tokens.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    normalize(&mut acc)?;
    Ok(Embedding {
        vector: acc,
        source: Source::Builtin,
        text: instruction.to_string(),
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Fails when any two instructions encode to (nearly) collinear vectors.
pub fn check_distinct(instructions: &[&str]) -> Result<()> {
    let embs = instructions
        .iter()
        .map(|s| encode_text(s))
        .collect::<Result<Vec<_>>>()?;
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            if cosine(&embs[i].vector, &embs[j].vector).abs() > 1.0 - 1e-6 {
                return Err(Error::Config(format!(
                    "instructions {:?} and {:?} are collinear",
                    instructions[i], instructions[j]
                )));
            }
        }
    }
    Ok(())
}

pub fn export_embedding(path: &Path, vector: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(10 + 8 * vector.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(vector.len() as u32).to_le_bytes());
    for v in vector {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads an embedding file and normalizes it to unit length. A vector that is
/// already unit length is kept bit-for-bit, so exported builtins re-import exactly.
pub fn import_embedding(path: &Path, dim: usize) -> Result<Embedding> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::Format(format!("{} is not an embedding file", path.display())));
    }
    let len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    if len != dim {
        return Err(Error::Format(format!("embedding has length {len}, expected {dim}")));
    }
    if bytes.len() != 10 + 8 * len {
        return Err(Error::Format(format!("embedding payload size mismatch in {}", path.display())));
    }
    let mut vector: Vec<f64> = bytes[10..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("embedding has non-finite entries".into()));
    }
    let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-12 {
        normalize(&mut vector)?;
    }
    Ok(Embedding {
        vector,
        source: Source::Imported,
        text: path.display().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_unit() {
        let a = encode_text("segment the road scene").unwrap();
        let b = encode_text("segment the road scene").unwrap();
        assert_eq!(a, b);
        let n: f64 = a.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn case_and_spacing_do_not_matter() {
        let a = encode_text("Detect  Objects").unwrap();
        let b = encode_text("detect objects").unwrap();
        assert_eq!(a.vector, b.vector);
    }

    #[test]
    fn distinct_instructions_differ() {
        let a = encode_text("detect objects").unwrap();
        let b = encode_text("segment every pixel").unwrap();
        assert!(cosine(&a.vector, &b.vector) < 1.0 - 1e-6);
        assert!(encode_text("   ").is_err());
    }

    #[test]
    fn import_normalizes_and_checks_length() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ones.emb");
        export_embedding(&p, &[1.0; 64]).unwrap();
        let e = import_embedding(&p, 64).unwrap();
        assert!(e.vector.iter().all(|v| (v - 0.125).abs() < 1e-15));
        assert_eq!(e.source, Source::Imported);

        export_embedding(&p, &vec![0.5; 4096]).unwrap();
        assert!(matches!(import_embedding(&p, 64), Err(Error::Format(_))));

        let v = encode_text("highlight the salient object").unwrap().vector;
        export_embedding(&p, &v).unwrap();
        assert_eq!(import_embedding(&p, 64).unwrap().vector, v);
        assert!(matches!(
            import_embedding(&dir.path().join("absent.emb"), 64),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn import_rejects_nan() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nan.emb");
        let mut v = vec![1.0; 64];
        v[3] = f64::NAN;
        export_embedding(&p, &v).unwrap();
        assert!(matches!(import_embedding(&p, 64), Err(Error::Numeric(_))));
    }
}

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Raw bytes of a corpus file; bytes are the vocabulary, no normalization.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("corpus {} is empty", path.display()),
        )));
    }
    Ok(bytes)
}

/// Next-byte prediction windows: `targets[i][j] == inputs[i][j + 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<Vec<u8>>,
    pub targets: Vec<Vec<u8>>,
    pub offsets: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Draws `batch_size` windows with offsets uniform in
/// `0..=len - context_len - 1`.
pub fn sample_batch(
    corpus: &[u8],
    batch_size: usize,
    context_len: usize,
    rng: &mut impl Rng,
) -> Result<Batch> {
    if corpus.len() <= context_len {
        return Err(Error::contract(format!(
            "corpus of {} bytes is too short for context length {context_len}",
            corpus.len()
        )));
    }
    if batch_size == 0 || context_len == 0 {
        return Err(Error::contract("batch_size and context_len must be positive"));
    }
    let max_offset = corpus.len() - context_len - 1;
    let mut batch = Batch {
        inputs: Vec::with_capacity(batch_size),
        targets: Vec::with_capacity(batch_size),
        offsets: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        let o = rng.gen_range(0..=max_offset);
        batch.inputs.push(corpus[o..o + context_len].to_vec());
        batch.targets.push(corpus[o + 1..o + context_len + 1].to_vec());
        batch.offsets.push(o);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    #[test]
    fn corpus_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let all: Vec<u8> = (0..=255).collect();
        fs::write(&path, &all).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), all);
        fs::write(&path, b"hello").unwrap();
        assert_eq!(load_corpus(&path).unwrap().len(), 5);
        fs::write(&path, b"").unwrap();
        assert!(matches!(load_corpus(&path), Err(Error::Io(_))));
        assert!(matches!(load_corpus(dir.path().join("missing")), Err(Error::Io(_))));
    }

    #[test]
    fn shift_and_bounds() {
        let corpus: Vec<u8> = (0..20).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = BTreeSet::new();
        for _ in 0..400 {
            let b = sample_batch(&corpus, 4, 6, &mut rng).unwrap();
            for (i, (inp, tgt)) in b.inputs.iter().zip(&b.targets).enumerate() {
                assert_eq!(&inp[1..], &tgt[..5]);
                assert_eq!(inp[0] as usize, b.offsets[i]);
                seen.insert(b.offsets[i]);
            }
        }
        // every legal offset is reachable and nothing beyond it
        assert_eq!(seen, (0..=13).collect());
    }

    #[test]
    fn seeded_batches_repeat() {
        let corpus = b"the quick brown fox jumps over the lazy dog".to_vec();
        let a = sample_batch(&corpus, 3, 8, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_batch(&corpus, 3, 8, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(sample_batch(&corpus[..8], 1, 8, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}

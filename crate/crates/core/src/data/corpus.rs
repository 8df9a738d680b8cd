//! Corpus loading, document packing and indexed window sampling.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::bpe::{Tokenizer, BOS};
use crate::error::{bail, Result};
use crate::rng;

#[derive(Debug, Clone)]
pub struct Document {
    pub name: String,
    pub text: Vec<u8>,
}

/// Reads UTF-8 text files. Directories expand to their regular files in name order.
pub fn load_documents(paths: &[PathBuf]) -> Result<Vec<Document>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            entries.sort();
            files.extend(entries);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            bail!(Data, "corpus path {} does not exist", p.display());
        }
    }
    let mut docs = Vec::with_capacity(files.len());
    for f in files {
        let text = std::fs::read(&f)?;
        if std::str::from_utf8(&text).is_err() {
            bail!(Data, "{} is not valid UTF-8", f.display());
        }
        if !text.is_empty() {
            docs.push(Document { name: file_name(&f), text });
        }
    }
    if docs.is_empty() {
        bail!(Data, "corpus is empty");
    }
    Ok(docs)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Concatenates documents, each preceded by BOS.
pub fn pack(docs: &[Vec<u32>]) -> Vec<u32> {
    let mut out = Vec::with_capacity(docs.iter().map(|d| d.len() + 1).sum());
    for d in docs {
        out.push(BOS);
        out.extend_from_slice(d);
    }
    out
}

/// Tokenized corpus split into a packed training stream and a held-out tail.
#[derive(Debug, Clone)]
pub struct TokenCorpus {
    pub train: Vec<u32>,
    /// Held-out tail of each document, unpacked.
    pub heldout_docs: Vec<Vec<u32>>,
    pub heldout: Vec<u32>,
}

impl TokenCorpus {
    /// Holds out the last `heldout_frac` of every document's tokens.
    pub fn build(tok: &Tokenizer, docs: &[Document], heldout_frac: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&heldout_frac) {
            bail!(Config, "heldout_frac must be in [0, 1), got {heldout_frac}");
        }
        let texts: Vec<Vec<u8>> = docs.iter().map(|d| d.text.clone()).collect();
        let ids = tok.encode_docs(&texts);
        let mut train = Vec::new();
        let mut heldout_docs = Vec::new();
        for d in ids {
            let cut = d.len() - (d.len() as f64 * heldout_frac).floor() as usize;
            train.push(d[..cut].to_vec());
            if cut < d.len() {
                heldout_docs.push(d[cut..].to_vec());
            }
        }
        let heldout = pack(&heldout_docs);
        Ok(TokenCorpus { train: pack(&train), heldout_docs, heldout })
    }
}

/// Indexed access to non-overlapping windows of a token stream, visited in a
/// fresh shuffled order every epoch. Batch `b` depends only on
/// `(stream, window, seed, b)`, so resuming at a batch index replays exactly.
#[derive(Debug, Clone)]
pub struct WindowSampler {
    window: usize,
    n_windows: usize,
    seed: u64,
    shuffle: bool,
}

impl WindowSampler {
    pub fn new(stream_len: usize, window: usize, seed: u64, shuffle: bool) -> Result<Self> {
        if window == 0 {
            bail!(Config, "window length must be positive");
        }
        let n_windows = stream_len / window;
        if n_windows == 0 {
            bail!(Data, "stream of {stream_len} tokens is shorter than one window of {window}");
        }
        Ok(WindowSampler { window, n_windows, seed, shuffle })
    }

    pub fn n_windows(&self) -> usize {
        self.n_windows
    }

    fn order(&self, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n_windows).collect();
        if self.shuffle {
            idx.shuffle(&mut rng::stream(self.seed, "order", epoch as u64));
        }
        idx
    }

    /// Window ids making up batch `batch_idx` of `n` windows.
    pub fn window_ids(&self, batch_idx: u64, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        let mut cached: Option<(usize, Vec<usize>)> = None;
        for k in 0..n {
            let g = batch_idx as usize * n + k;
            let (epoch, pos) = (g / self.n_windows, g % self.n_windows);
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, self.order(epoch)));
            }
            out.push(cached.as_ref().unwrap().1[pos]);
        }
        out
    }

    /// The `n` windows of batch `batch_idx`, concatenated.
    pub fn batch_tokens(&self, stream: &[u32], batch_idx: u64, n: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(n * self.window);
        for w in self.window_ids(batch_idx, n) {
            out.extend_from_slice(&stream[w * self.window..(w + 1) * self.window]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::super::batch::make_clm_batch;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn packing_and_windows_match_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let docs: Vec<Vec<u32>> = (0..40).map(|_| (0..rng.gen_range(100..500)).map(|_| rng.gen_range(4..300)).collect()).collect();
        let stream = pack(&docs);
        assert!(stream.len() >= 10_000);

        let mut oracle = Vec::new();
        for d in &docs {
            oracle.push(BOS);
            oracle.extend(d.iter().copied());
        }
        assert_eq!(stream, oracle);

        let l = 32;
        let sampler = WindowSampler::new(stream.len(), l + 1, 0, false).unwrap();
        let n = 8;
        for b in 0..(sampler.n_windows() / n) as u64 {
            let toks = sampler.batch_tokens(&stream, b, n);
            let batch = make_clm_batch(&toks, n, l).unwrap();
            for i in 0..n {
                let start = (b as usize * n + i) * (l + 1);
                assert_eq!(&batch.x[i * l..(i + 1) * l], &oracle[start..start + l]);
                assert_eq!(&batch.targets[i * l..(i + 1) * l], &oracle[start + 1..start + l + 1]);
            }
        }
    }

    #[test]
    fn shuffled_epochs_visit_every_window_once() {
        let s = WindowSampler::new(1000, 10, 9, true).unwrap();
        let ids = s.window_ids(0, 100);
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(ids, (0..100).collect::<Vec<_>>());
        assert_eq!(s.window_ids(3, 7), s.window_ids(3, 7));
        assert_ne!(s.window_ids(0, 100), s.window_ids(1, 100));
    }

    #[test]
    fn heldout_split_takes_document_tails() {
        let docs = vec![
            Document { name: "a".into(), text: b"one two three four five six seven eight nine ten".to_vec() },
            Document { name: "b".into(), text: b"alpha beta gamma delta".to_vec() },
        ];
        let texts: Vec<&[u8]> = docs.iter().map(|d| d.text.as_slice()).collect();
        let tok = super::super::bpe::train_bpe(texts, 40).unwrap();
        let c = TokenCorpus::build(&tok, &docs, 0.25).unwrap();
        let full: Vec<Vec<u32>> = docs.iter().map(|d| tok.encode_bytes(&d.text)).collect();
        let mut rebuilt = Vec::new();
        let mut h = c.heldout_docs.iter();
        for (i, part) in c.train.split(|&t| t == BOS).skip(1).enumerate() {
            let mut d = part.to_vec();
            d.extend(h.next().unwrap());
            assert_eq!(d, full[i]);
            rebuilt.push(d);
        }
        assert_eq!(rebuilt.len(), 2);
    }

    #[test]
    fn load_documents_reports_missing_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_documents(&[dir.path().join("nope")]), Err(crate::HlmError::Data(_))));
        assert!(matches!(load_documents(&[dir.path().to_path_buf()]), Err(crate::HlmError::Data(_))));
        std::fs::write(dir.path().join("b.txt"), "second").unwrap();
        std::fs::write(dir.path().join("a.txt"), "first").unwrap();
        let docs = load_documents(&[dir.path().to_path_buf()]).unwrap();
        assert_eq!(docs.iter().map(|d| d.name.as_str()).collect::<Vec<_>>(), ["a.txt", "b.txt"]);
    }
}

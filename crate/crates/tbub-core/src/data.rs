//! Corpus ingestion, byte-level tokenization, batch sampling, and the
//! synthetic key-value lookup task.

use crate::error::{Error, Result};
use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
/// 256 byte values plus bos/eos/pad.
pub const VOCAB_SIZE: usize = 259;

const MAGIC: &[u8; 4] = b"TBTK";
const FORMAT_VERSION: u32 = 1;

/// Byte-level tokenizer. Kept behind a trait so a subword tokenizer can be
/// plugged in without touching the store format.
pub trait Tokenizer {
    fn vocab_size(&self) -> usize;
    /// Encode one document (a bos marker is prepended).
    fn encode_document(&self, bytes: &[u8]) -> Vec<u32>;
    /// Inverse of encode modulo inserted marker tokens.
    fn decode(&self, ids: &[u32]) -> Vec<u8>;
}

pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    fn encode_document(&self, bytes: &[u8]) -> Vec<u32> {
        let mut out = Vec::with_capacity(bytes.len() + 1);
        out.push(BOS as u32);
        out.extend(bytes.iter().map(|&b| b as u32));
        out
    }

    fn decode(&self, ids: &[u32]) -> Vec<u8> {
        ids.iter()
            .filter(|&&id| id < 256)
            .map(|&id| id as u8)
            .collect()
    }
}

/// Flat token-id store with a small binary header.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStore {
    pub vocab_size: u32,
    pub ids: Vec<u32>,
}

impl TokenStore {
    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.vocab_size.to_le_bytes())?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        for id in &self.ids {
            w.write_all(&id.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TokenStore> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a token store (bad magic)".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported store version {version}")));
        }
        r.read_exact(&mut u32buf)?;
        let vocab_size = u32::from_le_bytes(u32buf);
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let count = u64::from_le_bytes(u64buf) as usize;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != count * 4 {
            return Err(Error::Format(format!(
                "payload holds {} bytes for {count} ids",
                payload.len()
            )));
        }
        let ids = payload
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect::<Vec<u32>>();
        if ids.iter().any(|&id| id >= vocab_size) {
            return Err(Error::Format("token id outside vocabulary".into()));
        }
        Ok(TokenStore { vocab_size, ids })
    }
}

/// Tokenize raw bytes: a bos marker starts every document. When a delimiter
/// is given, documents end after each occurrence and the delimiter bytes stay
/// in the stream, so decoding reproduces the input exactly.
pub fn tokenize_bytes(bytes: &[u8], delimiter: Option<&[u8]>) -> TokenStore {
    let tok = ByteTokenizer;
    let mut ids = Vec::with_capacity(bytes.len() + 16);
    if bytes.is_empty() {
        return TokenStore {
            vocab_size: VOCAB_SIZE as u32,
            ids,
        };
    }
    match delimiter {
        None => ids.extend(tok.encode_document(bytes)),
        Some(delim) if delim.is_empty() => ids.extend(tok.encode_document(bytes)),
        Some(delim) => {
            let mut start = 0;
            while start < bytes.len() {
                let end = bytes[start..]
                    .windows(delim.len())
                    .position(|w| w == delim)
                    .map(|p| start + p + delim.len())
                    .unwrap_or(bytes.len());
                ids.extend(tok.encode_document(&bytes[start..end]));
                start = end;
            }
        }
    }
    TokenStore {
        vocab_size: VOCAB_SIZE as u32,
        ids,
    }
}

/// Read a text file, tokenize it, and write the store. Deterministic for a
/// given input.
pub fn ingest(text_path: &Path, out_path: &Path, delimiter: Option<&[u8]>) -> Result<TokenStore> {
    let bytes = std::fs::read(text_path)?;
    let store = tokenize_bytes(&bytes, delimiter);
    store.save(out_path)?;
    Ok(store)
}

/// One training batch: targets are the inputs shifted by one raw-stream
/// position.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

/// Sample `batch` windows of length `block` at independent uniform offsets.
/// Document boundaries are crossed freely; no masking.
pub fn sample_batch<R: Rng>(
    store: &TokenStore,
    batch: usize,
    block: usize,
    rng: &mut R,
) -> Result<Batch> {
    if store.count() < block + 1 {
        return Err(Error::Arg(format!(
            "store holds {} tokens; need at least {}",
            store.count(),
            block + 1
        )));
    }
    let max_offset = store.count() - block - 1;
    let mut inputs = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch);
    for _ in 0..batch {
        let o = rng.gen_range(0..=max_offset);
        inputs.push(store.ids[o..o + block].iter().map(|&t| t as usize).collect());
        targets.push(
            store.ids[o + 1..o + block + 1]
                .iter()
                .map(|&t| t as usize)
                .collect(),
        );
    }
    Ok(Batch { inputs, targets })
}

/// One synthetic lookup sequence: key:value pairs, then a query whose answer
/// is the value bound to the queried key earlier in the sequence.
#[derive(Debug, Clone)]
pub struct LookupSample {
    pub bytes: Vec<u8>,
    /// Byte positions of the query section ('?' through '='), where the model
    /// must retrieve.
    pub query_span: (usize, usize),
    /// Position of the answer value byte.
    pub answer_pos: usize,
}

/// Generate "k1:v1;k2:v2;...?kq=vq" with distinct letter keys and digit
/// values. The queried key always appears earlier.
pub fn gen_lookup_task<R: Rng>(n_pairs: usize, rng: &mut R) -> LookupSample {
    assert!(n_pairs >= 1, "need at least one pair");
    assert!(n_pairs <= 26, "keys are single letters");
    // distinct keys via partial shuffle
    let mut letters: Vec<u8> = (b'a'..=b'z').collect();
    for i in 0..n_pairs {
        let j = rng.gen_range(i..letters.len());
        letters.swap(i, j);
    }
    let keys = &letters[..n_pairs];
    let vals: Vec<u8> = (0..n_pairs).map(|_| b'0' + rng.gen_range(0..10u8)).collect();
    let mut bytes = Vec::new();
    for (i, (&k, &v)) in keys.iter().zip(&vals).enumerate() {
        if i > 0 {
            bytes.push(b';');
        }
        bytes.extend_from_slice(&[k, b':', v]);
    }
    let q = rng.gen_range(0..n_pairs);
    let query_start = bytes.len();
    bytes.extend_from_slice(&[b'?', keys[q], b'=']);
    let answer_pos = bytes.len();
    bytes.push(vals[q]);
    LookupSample {
        query_span: (query_start, answer_pos - 1),
        answer_pos,
        bytes,
    }
}

/// Zero-parameter reference solver: copy the value bound to the queried key.
/// Correct on every generated sample by construction.
pub fn lookup_oracle(bytes: &[u8]) -> Option<u8> {
    let q = bytes.iter().position(|&b| b == b'?')?;
    let key = *bytes.get(q + 1)?;
    let mut i = 0;
    while i + 2 < q {
        if bytes[i] == key && bytes[i + 1] == b':' {
            return Some(bytes[i + 2]);
        }
        i += 4; // "k:v;" stride
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ingest_prepends_bos() {
        let store = tokenize_bytes(b"ab", None);
        assert_eq!(store.ids, vec![BOS as u32, 97, 98]);
    }

    #[test]
    fn empty_input_gives_empty_store() {
        let dir = tempfile::tempdir().unwrap();
        let txt = dir.path().join("empty.txt");
        std::fs::File::create(&txt).unwrap();
        let out = dir.path().join("empty.tok");
        let store = ingest(&txt, &out, None).unwrap();
        assert_eq!(store.count(), 0);
        let back = TokenStore::load(&out).unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn round_trip_reproduces_bytes_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut sample = Vec::with_capacity(1024);
        for _ in 0..1024 {
            sample.push(rng.gen::<u8>());
        }
        let store = tokenize_bytes(&sample, Some(b"\n\n"));
        let tok = ByteTokenizer;
        assert_eq!(tok.decode(&store.ids), sample);
    }

    #[test]
    fn delimiter_marks_each_document() {
        let store = tokenize_bytes(b"one\n\ntwo", Some(b"\n\n"));
        let boses = store.ids.iter().filter(|&&t| t == BOS as u32).count();
        assert_eq!(boses, 2);
        assert_eq!(store.ids[0], BOS as u32);
        let tok = ByteTokenizer;
        assert_eq!(tok.decode(&store.ids), b"one\n\ntwo");
    }

    #[test]
    fn store_save_load_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let txt = dir.path().join("t.txt");
        std::fs::write(&txt, "hello corpus").unwrap();
        let out = dir.path().join("t.tok");
        let store = ingest(&txt, &out, None).unwrap();
        let back = TokenStore::load(&out).unwrap();
        assert_eq!(store, back);
        // ingest is deterministic: same input, same bytes on disk
        let out2 = dir.path().join("t2.tok");
        ingest(&txt, &out2, None).unwrap();
        assert_eq!(
            std::fs::read(&out).unwrap(),
            std::fs::read(&out2).unwrap()
        );
    }

    #[test]
    fn sampling_needs_block_plus_one() {
        let store = TokenStore {
            vocab_size: VOCAB_SIZE as u32,
            ids: (0..8u32).collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_batch(&store, 1, 8, &mut rng).is_err());
        // count = block + 1: only offset 0 possible
        let b = sample_batch(&store, 3, 7, &mut rng).unwrap();
        for (inp, tgt) in b.inputs.iter().zip(&b.targets) {
            assert_eq!(inp, &(0..7).collect::<Vec<usize>>());
            assert_eq!(tgt, &(1..8).collect::<Vec<usize>>());
        }
    }

    #[test]
    fn targets_are_stream_successors() {
        let store = TokenStore {
            vocab_size: VOCAB_SIZE as u32,
            ids: (0..100u32).collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_batch(&store, 8, 16, &mut rng).unwrap();
        for (inp, tgt) in b.inputs.iter().zip(&b.targets) {
            for i in 0..16 {
                assert_eq!(tgt[i], inp[i] + 1);
            }
        }
    }

    #[test]
    fn fixed_seed_reproduces_batches() {
        let store = TokenStore {
            vocab_size: VOCAB_SIZE as u32,
            ids: (0..500).map(|i| (i % 256) as u32).collect(),
        };
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let ba = sample_batch(&store, 4, 32, &mut a).unwrap();
            let bb = sample_batch(&store, 4, 32, &mut b).unwrap();
            assert_eq!(ba.inputs, bb.inputs);
            assert_eq!(ba.targets, bb.targets);
        }
    }

    /// Offsets must be uniform: chi-square over bins at p > 0.001.
    #[test]
    fn offsets_are_uniform_by_chi_square() {
        let block = 16;
        // ids below 256 equal their index, so a window's first token IS its offset
        let store = TokenStore {
            vocab_size: VOCAB_SIZE as u32,
            ids: (0..216u32).collect(),
        };
        let n_offsets = store.count() - block; // 0..=count-block-1 inclusive
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 100_000;
        let bins = 20;
        let mut counts = vec![0usize; bins];
        for _ in 0..draws {
            let b = sample_batch(&store, 1, block, &mut rng).unwrap();
            let off = b.inputs[0][0];
            counts[(off * bins) / n_offsets] += 1;
        }
        // bins are equal-width over offsets; expected count per bin
        let mut chi2 = 0.0;
        for (bi, &c) in counts.iter().enumerate() {
            let lo = (bi * n_offsets).div_ceil(bins);
            let hi = ((bi + 1) * n_offsets).div_ceil(bins);
            let expect = draws as f64 * (hi - lo) as f64 / n_offsets as f64;
            chi2 += (c as f64 - expect).powi(2) / expect;
        }
        // Wilson-Hilferty critical value at p = 0.001, df = bins - 1
        let df = (bins - 1) as f64;
        let z = 3.0902; // z(0.999)
        let crit = df * (1.0 - 2.0 / (9.0 * df) + z * (2.0 / (9.0 * df)).sqrt()).powi(3);
        assert!(chi2 < crit, "chi2 {chi2} >= critical {crit}");
    }

    #[test]
    fn lookup_single_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = gen_lookup_task(1, &mut rng);
        // "k:v?k=v"
        assert_eq!(s.bytes.len(), 7);
        assert_eq!(s.bytes[s.answer_pos], s.bytes[2]);
        assert_eq!(s.bytes[s.query_span.0], b'?');
    }

    #[test]
    fn lookup_query_key_appears_earlier_and_oracle_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let n = rng.gen_range(1..=8);
            let s = gen_lookup_task(n, &mut rng);
            let qpos = s.query_span.0;
            let key = s.bytes[qpos + 1];
            let earlier = s.bytes[..qpos].iter().position(|&b| b == key);
            assert!(earlier.is_some(), "query key must appear earlier");
            assert_eq!(lookup_oracle(&s.bytes), Some(s.bytes[s.answer_pos]));
        }
    }
}

//! Embedding tables, the EMB1 binary format, and the cosine/centroid math
//! shared by clustering, cleansing, combination and scoring.
//!
//! EMB1 layout, little-endian throughout:
//!
//! ```text
//! "EMB1" | u32 dim | u64 count | count × ( u16 id_len | id bytes (UTF-8) | dim × f32 )
//! ```
//!
//! Records are written in ascending byte order of their ids. Vectors are stored
//! raw; similarity routines normalize on the fly and accumulate in `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB1_HEADER_LEN: usize = 16;

const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("not an EMB1 file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("file truncated at byte {offset} (needed {needed} more)")]
    TruncatedFile { offset: usize, needed: usize },
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("duplicate embedding id {0:?}")]
    DuplicateId(String),
    #[error("embedding {id:?} violates invariant: {rule}")]
    InvariantViolation { id: String, rule: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("empty input")]
    EmptyInput,
    #[error("mean vector has (near) zero norm")]
    ZeroMean,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = EmbeddingError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Face,
}

impl Modality {
    /// Infers the modality from the `*.audio.emb` / `*.face.emb` naming convention.
    pub fn from_path(path: &Path) -> Option<Modality> {
        let name = path.file_name()?.to_str()?;
        if name.ends_with(".audio.emb") {
            Some(Modality::Audio)
        } else if name.ends_with(".face.emb") {
            Some(Modality::Face)
        } else {
            None
        }
    }
}

/// Id-keyed vectors of one dimension and one modality. Iteration is in ascending id order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    modality: Modality,
    entries: BTreeMap<String, Vec<f32>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, modality: Modality) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, modality, entries: BTreeMap::new() }
    }

    pub fn from_entries<I, S>(dim: usize, modality: Modality, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: Into<String>,
    {
        let mut table = Self::new(dim, modality);
        for (id, v) in entries {
            table.insert(id, v)?;
        }
        Ok(table)
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(EmbeddingError::DimensionMismatch { expected: self.dim, got: vector.len() });
        }
        if let Some(i) = vector.iter().position(|x| !x.is_finite()) {
            return Err(EmbeddingError::InvariantViolation {
                id,
                rule: format!("component {i} is not finite"),
            });
        }
        if id.len() > u16::MAX as usize {
            return Err(EmbeddingError::InvariantViolation { id, rule: "id longer than 65535 bytes".into() });
        }
        if self.entries.contains_key(&id) {
            return Err(EmbeddingError::DuplicateId(id));
        }
        self.entries.insert(id, vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Sub-table restricted to `ids` (ids absent from `self` are skipped).
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> EmbeddingTable {
        let mut out = EmbeddingTable::new(self.dim, self.modality);
        for id in ids {
            if let Some(v) = self.entries.get(id) {
                out.entries.insert(id.to_owned(), v.clone());
            }
        }
        out
    }
}

/// Serializes a table to EMB1 bytes.
pub fn encode_emb1(table: &EmbeddingTable) -> Vec<u8> {
    let rec_len: usize = table.entries.keys().map(|k| 2 + k.len() + 4 * table.dim).sum();
    let mut buf = Vec::with_capacity(EMB1_HEADER_LEN + rec_len);
    buf.extend_from_slice(EMB1_MAGIC);
    buf.extend_from_slice(&(table.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(table.entries.len() as u64).to_le_bytes());
    for (id, v) in &table.entries {
        buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

/// Writes `table` to `path` in EMB1 format.
pub fn write_embeddings(table: &EmbeddingTable, path: &Path) -> Result<()> {
    fs::write(path, encode_emb1(table))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let remaining = self.buf.len() - self.pos;
        if remaining < n {
            return Err(EmbeddingError::TruncatedFile { offset: self.buf.len(), needed: n - remaining });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

/// Parses EMB1 bytes.
pub fn decode_emb1(bytes: &[u8], modality: Modality) -> Result<EmbeddingTable> {
    if bytes.len() >= 4 && &bytes[..4] != EMB1_MAGIC {
        return Err(EmbeddingError::BadMagic(bytes[..4].try_into().expect("4 bytes")));
    }
    let mut cur = Cursor { buf: bytes, pos: 0 };
    cur.take(4)?;
    let dim = u32::from_le_bytes(cur.array()?) as usize;
    let count = u64::from_le_bytes(cur.array()?);
    if dim == 0 {
        return Err(EmbeddingError::InvariantViolation { id: String::new(), rule: "dim must be positive".into() });
    }
    let mut table = EmbeddingTable::new(dim, modality);
    for _ in 0..count {
        let id_len = u16::from_le_bytes(cur.array()?) as usize;
        let id = std::str::from_utf8(cur.take(id_len)?)
            .map_err(|e| EmbeddingError::InvariantViolation { id: String::new(), rule: format!("id is not UTF-8: {e}") })?
            .to_owned();
        let raw = cur.take(4 * dim)?;
        let v = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        table.insert(id, v)?;
    }
    if cur.pos != bytes.len() {
        return Err(EmbeddingError::TrailingBytes(bytes.len() - cur.pos));
    }
    Ok(table)
}

/// Reads an EMB1 file. Modality follows the file name, defaulting to audio.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let modality = Modality::from_path(path).unwrap_or(Modality::Audio);
    read_embeddings_as(path, modality)
}

pub fn read_embeddings_as(path: &Path, modality: Modality) -> Result<EmbeddingTable> {
    let bytes = fs::read(path)?;
    decode_emb1(&bytes, modality)
}

/// Scalar types accepted by the vector math.
pub trait Component: Copy + Send + Sync {
    fn to_f64(self) -> f64;
}

impl Component for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Component for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

#[inline]
pub fn dot<A: Component, B: Component>(a: &[A], b: &[B]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.to_f64() * y.to_f64()).sum()
}

#[inline]
pub fn norm<A: Component>(a: &[A]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine of the angle between two nonzero vectors, clamped to `[-1, 1]`.
pub fn cosine_similarity<A: Component, B: Component>(a: &[A], b: &[B]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EmbeddingError::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    let (na, nb) = (norm(a), norm(b));
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `v / ‖v‖`.
pub fn normalize<A: Component>(v: &[A]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n < ZERO_NORM {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok(v.iter().map(|&x| x.to_f64() / n).collect())
}

fn mean<'a, A: Component + 'a>(vectors: impl IntoIterator<Item = &'a [A]>) -> Result<Vec<f64>> {
    let mut it = vectors.into_iter();
    let first = it.next().ok_or(EmbeddingError::EmptyInput)?;
    let mut acc: Vec<f64> = first.iter().map(|&x| x.to_f64()).collect();
    let mut n = 1usize;
    for v in it {
        if v.len() != acc.len() {
            return Err(EmbeddingError::DimensionMismatch { expected: acc.len(), got: v.len() });
        }
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += x.to_f64();
        }
        n += 1;
    }
    let n = n as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Mean of the inputs, L2-normalized.
pub fn centroid<'a, A: Component + 'a>(vectors: impl IntoIterator<Item = &'a [A]>) -> Result<Vec<f64>> {
    let m = mean(vectors)?;
    normalize(&m).map_err(|_| EmbeddingError::ZeroMean)
}

/// Plain arithmetic mean of per-frame face embeddings (not renormalized).
pub fn aggregate_frame_embeddings<'a, A: Component + 'a>(frames: impl IntoIterator<Item = &'a [A]>) -> Result<Vec<f64>> {
    mean(frames)
}

/// Row-major block of unit vectors for repeated pairwise cosines.
#[derive(Debug, Clone)]
pub struct UnitRows {
    dim: usize,
    data: Vec<f64>,
}

impl UnitRows {
    /// Normalizes every row; `label` names the offending row on a zero vector.
    pub fn from_rows<'a, A: Component + 'a>(
        dim: usize,
        rows: impl IntoIterator<Item = (&'a str, &'a [A])>,
    ) -> Result<Self> {
        let mut data = Vec::new();
        for (id, r) in rows {
            if r.len() != dim {
                return Err(EmbeddingError::DimensionMismatch { expected: dim, got: r.len() });
            }
            let u = normalize(r).map_err(|_| EmbeddingError::InvariantViolation {
                id: id.to_owned(),
                rule: "zero-norm vector".into(),
            })?;
            data.extend(u);
        }
        Ok(Self { dim, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Cosine between rows `i` and `j`, clamped to `[-1, 1]`.
    #[inline]
    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        dot(self.row(i), self.row(j)).clamp(-1.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(entries: &[(&str, Vec<f32>)]) -> EmbeddingTable {
        let dim = entries.first().map_or(4, |e| e.1.len());
        EmbeddingTable::from_entries(dim, Modality::Audio, entries.iter().cloned()).unwrap()
    }

    #[test]
    fn header_and_record_sizes() {
        let t = table(&[("b", vec![1.0, 2.0, 3.0, 4.0]), ("a", vec![0.5; 4])]);
        let bytes = encode_emb1(&t);
        assert_eq!(bytes.len(), 16 + 2 * (2 + 1 + 16));
        assert_eq!(&bytes[..4], b"EMB1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 4);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        // ascending id order: "a" first
        assert_eq!(&bytes[16..19], &[1, 0, b'a']);
    }

    #[test]
    fn empty_table_is_header_only() {
        let t = EmbeddingTable::new(192, Modality::Face);
        let bytes = encode_emb1(&t);
        assert_eq!(bytes.len(), 16);
        assert_eq!(decode_emb1(&bytes, Modality::Face).unwrap(), t);
    }

    #[test]
    fn nan_rejected_before_write() {
        let mut t = EmbeddingTable::new(2, Modality::Audio);
        assert!(matches!(t.insert("x", vec![f32::NAN, 0.0]), Err(EmbeddingError::InvariantViolation { .. })));
        assert!(matches!(t.insert("x", vec![1.0]), Err(EmbeddingError::DimensionMismatch { .. })));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let t = table(&[("a", vec![1.0, 2.0, 3.0, 4.0])]);
        let mut bytes = encode_emb1(&t);
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_emb1(&bad, Modality::Audio), Err(EmbeddingError::BadMagic(m)) if &m == b"XXXX"));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode_emb1(&bytes, Modality::Audio), Err(EmbeddingError::TruncatedFile { .. })));
        assert!(matches!(decode_emb1(&bytes[..10], Modality::Audio), Err(EmbeddingError::TruncatedFile { .. })));
    }

    #[test]
    fn duplicate_ids_on_read() {
        let t = table(&[("a", vec![1.0, 0.0])]);
        let mut bytes = encode_emb1(&t);
        let rec = bytes[16..].to_vec();
        bytes.extend_from_slice(&rec);
        bytes[8..16].copy_from_slice(&2u64.to_le_bytes());
        assert!(matches!(decode_emb1(&bytes, Modality::Audio), Err(EmbeddingError::DuplicateId(id)) if id == "a"));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode_emb1(&table(&[("a", vec![1.0, 0.0])]));
        bytes.push(0);
        assert!(matches!(decode_emb1(&bytes, Modality::Audio), Err(EmbeddingError::TrailingBytes(1))));
    }

    #[test]
    fn modality_from_filename() {
        assert_eq!(Modality::from_path(Path::new("x/corpus.audio.emb")), Some(Modality::Audio));
        assert_eq!(Modality::from_path(Path::new("corpus.face.emb")), Some(Modality::Face));
        assert_eq!(Modality::from_path(Path::new("corpus.emb")), None);
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[0.3f32, -1.2, 2.0], &[0.3f32, -1.2, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0f64, 0.0], &[0.0f64, 3.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[1.0f64, 0.0], &[-1.0f64, 0.0]).unwrap(), -1.0);
        assert!(matches!(cosine_similarity(&[0.0f64, 0.0], &[1.0f64, 0.0]), Err(EmbeddingError::ZeroVector)));
        assert!(matches!(cosine_similarity(&[1.0f64], &[1.0f64, 0.0]), Err(EmbeddingError::DimensionMismatch { .. })));
    }

    #[test]
    fn centroid_examples() {
        let v = [3.0f64, 4.0];
        assert_eq!(centroid([&v[..]]).unwrap(), vec![0.6, 0.8]);
        let c = centroid([&[1.0f64, 0.0][..], &[0.0, 1.0][..]]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((c[0] - h).abs() < 1e-15 && (c[1] - h).abs() < 1e-15);
        assert!(matches!(centroid([&[1.0f64, 2.0][..], &[-1.0, -2.0][..]]), Err(EmbeddingError::ZeroMean)));
        assert!(matches!(centroid(std::iter::empty::<&[f64]>()), Err(EmbeddingError::EmptyInput)));
    }

    #[test]
    fn frame_aggregation_is_raw_mean() {
        let f = [0.25f32, -3.0, 7.5];
        assert_eq!(aggregate_frame_embeddings([&f[..]]).unwrap(), vec![0.25, -3.0, 7.5]);
        assert_eq!(aggregate_frame_embeddings([&[2.0f32, 0.0][..], &[0.0, 2.0][..]]).unwrap(), vec![1.0, 1.0]);
        let copies = vec![&f[..]; 100];
        assert_eq!(aggregate_frame_embeddings(copies).unwrap(), vec![0.25, -3.0, 7.5]);
        assert!(matches!(aggregate_frame_embeddings(std::iter::empty::<&[f32]>()), Err(EmbeddingError::EmptyInput)));
    }

    fn arb_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, dim).prop_filter("nonzero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(a in arb_vec(8), b in arb_vec(8), alpha in 0.01f64..100.0) {
            let ab = cosine_similarity(&a, &b).unwrap();
            let ba = cosine_similarity(&b, &a).unwrap();
            let scaled: Vec<f64> = a.iter().map(|x| x * alpha).collect();
            let sb = cosine_similarity(&scaled, &b).unwrap();
            prop_assert!((ab - ba).abs() < 1e-6);
            prop_assert!((ab - sb).abs() < 1e-6);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn centroid_has_unit_norm(vs in proptest::collection::vec(arb_vec(6), 1..10)) {
            let refs: Vec<&[f64]> = vs.iter().map(Vec::as_slice).collect();
            if let Ok(c) = centroid(refs) {
                prop_assert!((norm(&c) - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn frame_mean_is_permutation_invariant(vs in proptest::collection::vec(arb_vec(5), 1..12), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = vs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = aggregate_frame_embeddings(vs.iter().map(Vec::as_slice)).unwrap();
            let b = aggregate_frame_embeddings(shuffled.iter().map(Vec::as_slice)).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn emb1_round_trip_is_bit_exact(rows in proptest::collection::btree_map("[a-z0-9/_-]{1,16}", proptest::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 3), 0..20)) {
            let t = EmbeddingTable::from_entries(3, Modality::Audio, rows).unwrap();
            let back = decode_emb1(&encode_emb1(&t), Modality::Audio).unwrap();
            prop_assert_eq!(back.len(), t.len());
            for ((ia, va), (ib, vb)) in t.iter().zip(back.iter()) {
                prop_assert_eq!(ia, ib);
                let bits_a: Vec<u32> = va.iter().map(|x| x.to_bits()).collect();
                let bits_b: Vec<u32> = vb.iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }
}

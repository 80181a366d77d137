//! Embedding stores, TREC qrels/run files, training pairs and the synthetic
//! multi-domain rotation task.
//!
//! Store layout (`SBMV`, little-endian):
//!
//! ```text
//! magic "SBMV" | u32 version = 1 | u32 dim | u64 count
//! per entry: u32 id byte length | id bytes (UTF-8) | dim x f32
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::{norm, Matrix, SeededRng};
use crate::{Error, Result};

pub const STORE_MAGIC: &[u8; 4] = b"SBMV";
pub const STORE_VERSION: u32 = 1;
pub const STORE_HEADER_LEN: usize = 20;

/// query-id -> doc-id -> grade.
pub type Qrels = BTreeMap<String, BTreeMap<String, i64>>;

/// query-id -> ranked (doc-id, score), best first.
pub type Run = BTreeMap<String, Vec<(String, f64)>>;

/// Id-addressed matrix of fixed-dimension vectors, widened to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f64>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, vector: &[f64]) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "vector for '{id}' has dim {}, store dim is {}",
                vector.len(),
                self.dim
            )));
        }
        if self.index.contains_key(&id) {
            return Err(Error::Data(format!("duplicate id '{id}'")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.position(id).map(|i| self.vector(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), self.vector(i)))
    }
}

pub fn write_store<W: Write>(store: &EmbeddingStore, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(STORE_HEADER_LEN + store.len() * (8 + 4 * store.dim));
    buf.extend_from_slice(STORE_MAGIC);
    buf.extend_from_slice(&STORE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (id, v) in store.iter() {
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        for &x in v {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_store<R: Read>(mut r: R) -> Result<EmbeddingStore> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_store(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn decode_store(bytes: &[u8]) -> Result<EmbeddingStore> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != STORE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected SBMV".into(),
        });
    }
    let version = cur.u32("version")?;
    if version != STORE_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported store version {version}"),
        });
    }
    let dim = cur.u32("dim")? as usize;
    let count = u64::from_le_bytes(cur.take(8, "count")?.try_into().unwrap());
    // Each entry needs at least its length prefix and vector.
    let min_entry = 4 + 4 * dim as u64;
    let remaining = (bytes.len() - STORE_HEADER_LEN) as u64;
    if count.saturating_mul(min_entry) > remaining {
        return Err(Error::Format {
            offset: 12,
            message: format!("declared {count} entries do not fit in {remaining} bytes"),
        });
    }
    let mut store = EmbeddingStore::new(dim);
    let mut vector = vec![0.0; dim];
    for k in 0..count {
        let at = cur.pos as u64;
        let id_len = cur.u32("id length")? as usize;
        let id = std::str::from_utf8(cur.take(id_len, "id")?).map_err(|_| Error::Format {
            offset: at + 4,
            message: format!("entry {k} id is not UTF-8"),
        })?;
        let raw = cur.take(4 * dim, "vector")?;
        for (v, c) in vector.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(c.try_into().unwrap()) as f64;
        }
        store.push(id, &vector).map_err(|e| Error::Format {
            offset: at,
            message: e.to_string(),
        })?;
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos as u64,
            message: format!("{} trailing bytes after last entry", bytes.len() - cur.pos),
        });
    }
    Ok(store)
}

pub fn save_store(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_store(store, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    decode_store(&std::fs::read(path)?)
}

/// Parsed qrels plus the number of duplicate (query, doc) lines that were
/// overwritten.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedQrels {
    pub qrels: Qrels,
    pub duplicates: usize,
}

/// Parses `query-id 0 doc-id grade` lines. Blank lines are skipped; a
/// repeated (query, doc) pair keeps the last grade.
pub fn parse_qrels<R: BufRead>(reader: R) -> Result<ParsedQrels> {
    let mut qrels = Qrels::new();
    let mut duplicates = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let grade: i64 = fields[3].parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("grade '{}' is not an integer", fields[3]),
        })?;
        if grade < 0 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("negative grade {grade}"),
            });
        }
        let prev = qrels
            .entry(fields[0].to_string())
            .or_default()
            .insert(fields[2].to_string(), grade);
        if prev.is_some() {
            duplicates += 1;
        }
    }
    Ok(ParsedQrels { qrels, duplicates })
}

pub fn load_qrels(path: impl AsRef<Path>) -> Result<ParsedQrels> {
    parse_qrels(BufReader::new(std::fs::File::open(path)?))
}

pub fn write_qrels<W: Write>(qrels: &Qrels, mut w: W) -> Result<()> {
    let mut out = String::new();
    for (q, docs) in qrels {
        for (d, g) in docs {
            writeln!(out, "{q} 0 {d} {g}").unwrap();
        }
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

/// Parses `query-id Q0 doc-id rank score tag` lines. Ranks must run 1, 2, …
/// per query in file order and scores must not increase.
pub fn parse_run<R: BufRead>(reader: R) -> Result<Run> {
    let mut run = Run::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            line: lineno,
            message,
        };
        if fields.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", fields.len())));
        }
        let rank: usize = fields[3]
            .parse()
            .map_err(|_| err(format!("rank '{}' is not a positive integer", fields[3])))?;
        let score: f64 = fields[4]
            .parse()
            .map_err(|_| err(format!("score '{}' is not a number", fields[4])))?;
        if !score.is_finite() {
            return Err(err("score is not finite".into()));
        }
        let ranked = run.entry(fields[0].to_string()).or_default();
        if rank != ranked.len() + 1 {
            return Err(err(format!(
                "rank {rank} out of sequence for query '{}' (expected {})",
                fields[0],
                ranked.len() + 1
            )));
        }
        if let Some((_, prev)) = ranked.last() {
            if score > *prev {
                return Err(err(format!("score {score} increases over previous {prev}")));
            }
        }
        if ranked.iter().any(|(d, _)| d == fields[2]) {
            return Err(err(format!(
                "document '{}' repeated for query '{}'",
                fields[2], fields[0]
            )));
        }
        ranked.push((fields[2].to_string(), score));
    }
    Ok(run)
}

pub fn load_run(path: impl AsRef<Path>) -> Result<Run> {
    parse_run(BufReader::new(std::fs::File::open(path)?))
}

pub fn write_run<W: Write>(run: &Run, tag: &str, mut w: W) -> Result<()> {
    let mut out = String::new();
    for (q, ranked) in run {
        for (rank, (d, score)) in ranked.iter().enumerate() {
            writeln!(out, "{q} Q0 {d} {} {score:.6} {tag}", rank + 1).unwrap();
        }
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

/// One (query, positive document) pair per judgment with grade > 0, sorted
/// by query id then doc id.
pub fn pairs_from_qrels(qrels: &Qrels) -> Vec<(String, String)> {
    qrels
        .iter()
        .flat_map(|(q, docs)| {
            docs.iter()
                .filter(|(_, &g)| g > 0)
                .map(move |(d, _)| (q.clone(), d.clone()))
        })
        .collect()
}

/// Splits qrels by query into (train, test), with `ceil(test_fraction * n)`
/// seeded-shuffled queries held out.
pub fn split_qrels(qrels: &Qrels, test_fraction: f64, seed: u64) -> Result<(Qrels, Qrels)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let mut queries: Vec<&String> = qrels.keys().collect();
    SeededRng::new(seed).shuffle(&mut queries);
    let n_test = (test_fraction * queries.len() as f64).ceil() as usize;
    let cut = queries.len() - n_test.min(queries.len());
    let mut train = Qrels::new();
    let mut test = Qrels::new();
    for (i, q) in queries.into_iter().enumerate() {
        let target = if i < cut { &mut train } else { &mut test };
        target.insert(q.clone(), qrels[q].clone());
    }
    Ok((train, test))
}

/// Parameters of the synthetic multi-domain rotation task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub domains: usize,
    pub docs_per_domain: usize,
    pub queries_per_domain: usize,
    pub noise: f64,
    pub seed: u64,
    /// Dimension of the subspace each domain's rotation acts on. `None`
    /// rotates the full space.
    #[serde(default)]
    pub rotation_dim: Option<usize>,
    /// Norm of the per-domain offset added to document vectors before
    /// normalisation. Zero gives isotropic documents.
    #[serde(default)]
    pub domain_offset: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config("synthetic dim must be at least 2".into()));
        }
        if self.domains == 0 {
            return Err(Error::Config("need at least one domain".into()));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Config(
                "noise must be finite and non-negative".into(),
            ));
        }
        if self.queries_per_domain > self.docs_per_domain {
            return Err(Error::Config(
                "queries per domain cannot exceed docs per domain".into(),
            ));
        }
        if let Some(r) = self.rotation_dim {
            if r < 2 || r > self.dim {
                return Err(Error::Config(format!(
                    "rotation dim must be in 2..={}, got {r}",
                    self.dim
                )));
            }
        }
        if !(self.domain_offset >= 0.0) || !self.domain_offset.is_finite() {
            return Err(Error::Config(
                "domain offset must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Output of [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub queries: EmbeddingStore,
    pub docs: EmbeddingStore,
    pub qrels: Qrels,
}

fn gaussian_vec(d: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..d).map(|_| rng.gaussian()).collect()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        for x in v {
            *x /= n;
        }
    }
}

/// Modified Gram–Schmidt on the columns of a Gaussian matrix. Columns are
/// flipped so the triangular factor has a positive diagonal, which makes the
/// result Haar-distributed; the last column is then negated if needed so the
/// determinant is +1.
pub fn random_rotation(d: usize, rng: &mut SeededRng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = (0..d).map(|_| gaussian_vec(d, rng)).collect();
    for j in 0..d {
        for k in 0..j {
            let (done, rest) = cols.split_at_mut(j);
            let proj: f64 = crate::numerics::dot(&done[k], &rest[0]);
            crate::numerics::axpy(&mut rest[0], -proj, &done[k]);
        }
        normalize(&mut cols[j]);
    }
    let mut m = Matrix::zeros(d, d);
    for (j, c) in cols.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            m.set(i, j, v);
        }
    }
    if determinant_sign(&m) < 0.0 {
        for i in 0..d {
            m.set(i, d - 1, -m.get(i, d - 1));
        }
    }
    m
}

fn determinant_sign(m: &Matrix) -> f64 {
    // Gaussian elimination with partial pivoting.
    let n = m.rows();
    let mut a = m.clone();
    let mut sign = 1.0;
    for c in 0..n {
        let pivot = (c..n)
            .max_by(|&i, &j| a.get(i, c).abs().total_cmp(&a.get(j, c).abs()))
            .unwrap();
        if a.get(pivot, c) == 0.0 {
            return 0.0;
        }
        if pivot != c {
            for k in 0..n {
                let t = a.get(c, k);
                a.set(c, k, a.get(pivot, k));
                a.set(pivot, k, t);
            }
            sign = -sign;
        }
        if a.get(c, c) < 0.0 {
            sign = -sign;
        }
        for r in c + 1..n {
            let f = a.get(r, c) / a.get(c, c);
            for k in c..n {
                a.set(r, k, a.get(r, k) - f * a.get(c, k));
            }
        }
    }
    sign
}

/// Per-domain rotation operator: a random rotation of a random
/// `rotation_dim`-dimensional subspace, identity on its complement.
fn domain_rotation(dim: usize, rotation_dim: usize, rng: &mut SeededRng) -> Matrix {
    if rotation_dim == dim {
        return random_rotation(dim, rng);
    }
    // Orthonormal basis of the subspace: first columns of a random rotation.
    let frame = random_rotation(dim, rng);
    let inner = random_rotation(rotation_dim, rng);
    // R = I + B (Q - I) Bᵀ with B = frame[:, ..rotation_dim].
    let mut r = Matrix::identity(dim);
    for i in 0..dim {
        for j in 0..dim {
            let mut acc = 0.0;
            for a in 0..rotation_dim {
                for b in 0..rotation_dim {
                    let q = inner.get(a, b) - if a == b { 1.0 } else { 0.0 };
                    acc += frame.get(i, a) * q * frame.get(j, b);
                }
            }
            r.set(i, j, r.get(i, j) + acc);
        }
    }
    r
}

/// Builds the multi-domain rotation task.
///
/// For domain `j`: a rotation `R_j`, documents `normalize(offset_j + g)` with
/// `g` Gaussian, and for each of the first `queries_per_domain` documents a
/// query `normalize(R_j e + noise * g')`. Each query's only relevant document
/// is its source. Ids are `d{j}-{i}` and `q{j}-{i}`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let d = spec.dim;
    let rotation_dim = spec.rotation_dim.unwrap_or(d);
    let mut rng = SeededRng::new(spec.seed);
    let mut queries = EmbeddingStore::new(d);
    let mut docs = EmbeddingStore::new(d);
    let mut qrels = Qrels::new();
    let id_width = spec.docs_per_domain.saturating_sub(1).to_string().len();
    for j in 0..spec.domains {
        let rotation = domain_rotation(d, rotation_dim, &mut rng);
        let mut offset = gaussian_vec(d, &mut rng);
        normalize(&mut offset);
        for x in &mut offset {
            *x *= spec.domain_offset;
        }
        let mut domain_docs = Vec::with_capacity(spec.docs_per_domain);
        for i in 0..spec.docs_per_domain {
            let mut e = gaussian_vec(d, &mut rng);
            normalize(&mut e);
            crate::numerics::add_assign(&mut e, &offset);
            normalize(&mut e);
            let id = format!("d{j}-{i:0id_width$}");
            docs.push(id.clone(), &e)?;
            domain_docs.push((id, e));
        }
        for (i, (doc_id, e)) in domain_docs.iter().take(spec.queries_per_domain).enumerate() {
            let mut q = crate::numerics::matvec(&rotation, e)?;
            for x in &mut q {
                *x += spec.noise * rng.gaussian();
            }
            normalize(&mut q);
            let qid = format!("q{j}-{i:0id_width$}");
            queries.push(qid.clone(), &q)?;
            qrels.entry(qid).or_default().insert(doc_id.clone(), 1);
        }
    }
    Ok(SyntheticData {
        queries,
        docs,
        qrels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_bytes(s: &EmbeddingStore) -> Vec<u8> {
        let mut b = Vec::new();
        write_store(s, &mut b).unwrap();
        b
    }

    #[test]
    fn empty_store_is_header_only() {
        let s = EmbeddingStore::new(4);
        let b = store_bytes(&s);
        assert_eq!(b.len(), 20);
        assert_eq!(read_store(b.as_slice()).unwrap(), s);
    }

    #[test]
    fn single_entry_round_trip() {
        let mut s = EmbeddingStore::new(4);
        s.push("q1", &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let back = read_store(store_bytes(&s).as_slice()).unwrap();
        assert_eq!(back.ids(), &["q1".to_string()]);
        assert_eq!(back.get("q1").unwrap(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn truncated_store_reports_offset() {
        let mut s = EmbeddingStore::new(3);
        s.push("a", &[1.0, 2.0, 3.0]).unwrap();
        s.push("bb", &[4.0, 5.0, 6.0]).unwrap();
        let b = store_bytes(&s);
        // Second record starts at 20 + 4 + 1 + 12 = 37; cut inside its vector.
        let cut = &b[..37 + 4 + 2 + 5];
        match read_store(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("unexpected {other:?}"),
        }
        // Count check passes when the tail is only partly missing.
        let mut s3 = EmbeddingStore::new(1);
        s3.push("abcdefgh", &[1.0]).unwrap();
        s3.push("x", &[2.0]).unwrap();
        let b = store_bytes(&s3);
        let cut = &b[..b.len() - 2];
        match read_store(cut) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, (20 + 4 + 8 + 4 + 4 + 1) as u64, "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = store_bytes(&EmbeddingStore::new(2));
        b[0] = b'Z';
        assert!(matches!(
            read_store(b.as_slice()),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut b = store_bytes(&EmbeddingStore::new(2));
        b[4] = 2;
        assert!(matches!(
            read_store(b.as_slice()),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut s = EmbeddingStore::new(1);
        s.push("a", &[1.0]).unwrap();
        assert!(matches!(s.push("a", &[2.0]), Err(Error::Data(_))));
    }

    #[test]
    fn qrels_parsing() {
        let p = parse_qrels("q1 0 d1 1\n".as_bytes()).unwrap();
        assert_eq!(p.qrels["q1"]["d1"], 1);

        let text = "q1 0 d1 2\nq1 0 d2 0\nq2 0 d7 1\n";
        let p = parse_qrels(text.as_bytes()).unwrap();
        let mut expected = Qrels::new();
        expected.insert("q1".into(), [("d1".into(), 2), ("d2".into(), 0)].into());
        expected.insert("q2".into(), [("d7".into(), 1)].into());
        assert_eq!(p.qrels, expected);
        assert_eq!(p.duplicates, 0);

        let p = parse_qrels("q1 0 d1 1\nq1 0 d1 3\n".as_bytes()).unwrap();
        assert_eq!(p.qrels["q1"]["d1"], 3);
        assert_eq!(p.duplicates, 1);

        match parse_qrels("q1 0 d1 1\nq1 d2 1\n".as_bytes()) {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_qrels("q1 0 d1 x\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn run_parsing_enforces_order() {
        let ok = "q1 Q0 d1 1 0.900000 t\nq1 Q0 d2 2 0.500000 t\n";
        let run = parse_run(ok.as_bytes()).unwrap();
        assert_eq!(run["q1"], vec![("d1".into(), 0.9), ("d2".into(), 0.5)]);

        let bad = "q1 Q0 d1 1 0.5 t\nq1 Q0 d2 2 0.9 t\n";
        assert!(matches!(
            parse_run(bad.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        let bad = "q1 Q0 d1 1 0.5 t\nq1 Q0 d2 3 0.4 t\n";
        assert!(matches!(
            parse_run(bad.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        let bad = "q1 Q0 d1 1 0.5 t\nq1 Q0 d1 2 0.4 t\n";
        assert!(matches!(
            parse_run(bad.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn run_writer_format() {
        let mut run = Run::new();
        run.insert(
            "q1".into(),
            vec![("d3".into(), 0.25), ("d1".into(), -1.0 / 3.0)],
        );
        let mut out = Vec::new();
        write_run(&run, "sbmoe", &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "q1 Q0 d3 1 0.250000 sbmoe\nq1 Q0 d1 2 -0.333333 sbmoe\n"
        );
    }

    #[test]
    fn pairs_cases() {
        let mut q = Qrels::new();
        q.insert("q1".into(), [("d1".into(), 0), ("d2".into(), 0)].into());
        assert!(pairs_from_qrels(&q).is_empty());

        let mut q = Qrels::new();
        q.insert("q1".into(), [("d2".into(), 2), ("d1".into(), 1)].into());
        assert_eq!(
            pairs_from_qrels(&q),
            vec![("q1".into(), "d1".into()), ("q1".into(), "d2".into())]
        );

        q.insert(
            "q0".into(),
            [("z".into(), 1), ("a".into(), 3), ("m".into(), 0)].into(),
        );
        let pairs = pairs_from_qrels(&q);
        let expected: Vec<(String, String)> =
            [("q0", "a"), ("q0", "z"), ("q1", "d1"), ("q1", "d2")]
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect();
        assert_eq!(pairs, expected);
    }

    #[test]
    fn split_is_partition() {
        let mut q = Qrels::new();
        for i in 0..10 {
            q.insert(format!("q{i}"), [(format!("d{i}"), 1)].into());
        }
        let (train, test) = split_qrels(&q, 0.25, 42).unwrap();
        assert_eq!(test.len(), 3);
        assert_eq!(train.len(), 7);
        assert!(train.keys().all(|k| !test.contains_key(k)));
        assert_eq!(split_qrels(&q, 0.25, 42).unwrap().1, test);
        assert!(split_qrels(&q, 1.0, 42).is_err());
    }

    #[test]
    fn rotations_are_special_orthogonal() {
        let mut rng = SeededRng::new(3);
        for d in [2, 3, 8] {
            let r = random_rotation(d, &mut rng);
            for i in 0..d {
                for j in 0..d {
                    let dot: f64 = (0..d).map(|k| r.get(k, i) * r.get(k, j)).sum();
                    let expected = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expected).abs() < 1e-12);
                }
            }
            assert_eq!(determinant_sign(&r), 1.0);
        }
        let r = domain_rotation(6, 3, &mut rng);
        let x = [0.3, -0.1, 0.8, 0.0, 1.2, -0.5];
        let y = crate::numerics::matvec(&r, &x).unwrap();
        assert!((norm(&x) - norm(&y)).abs() < 1e-12);
        assert_eq!(determinant_sign(&r), 1.0);
    }

    fn spec(domains: usize, noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            dim: 8,
            domains,
            docs_per_domain: 20,
            queries_per_domain: 10,
            noise,
            seed: 42,
            rotation_dim: None,
            domain_offset: 0.0,
        }
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let s = spec(3, 0.05);
        let a = generate_synthetic(&s).unwrap();
        let b = generate_synthetic(&s).unwrap();
        assert_eq!(store_bytes(&a.docs), store_bytes(&b.docs));
        assert_eq!(store_bytes(&a.queries), store_bytes(&b.queries));
        assert_eq!(a.qrels, b.qrels);
        assert_eq!(a.docs.len(), 60);
        assert_eq!(a.queries.len(), 30);
        for j in 0..3 {
            let prefix = format!("d{j}-");
            assert_eq!(
                a.docs
                    .ids()
                    .iter()
                    .filter(|id| id.starts_with(&prefix))
                    .count(),
                20
            );
        }
        for judged in a.qrels.values() {
            assert_eq!(judged.len(), 1);
            assert!(a.docs.get(judged.keys().next().unwrap()).is_some());
        }
        for (_, v) in a.queries.iter() {
            assert!((norm(v) - 1.0).abs() < 1e-6);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn store_round_trip_is_bit_exact(
                dim in 1usize..6,
                raw in prop::collection::vec(any::<u32>(), 0..40),
            ) {
                let mut s = EmbeddingStore::new(dim);
                for (k, chunk) in raw.chunks_exact(dim).enumerate() {
                    let v: Vec<f64> = chunk
                        .iter()
                        .map(|&bits| {
                            let f = f32::from_bits(bits);
                            if f.is_finite() { f as f64 } else { -0.0 }
                        })
                        .collect();
                    s.push(format!("id-{k}-é"), &v).unwrap();
                }
                let bytes = store_bytes(&s);
                let back = read_store(bytes.as_slice()).unwrap();
                prop_assert_eq!(store_bytes(&back), bytes);
                for (a, b) in s.iter().zip(back.iter()) {
                    prop_assert_eq!(a.0, b.0);
                    for (x, y) in a.1.iter().zip(b.1) {
                        prop_assert_eq!(x.to_bits(), y.to_bits());
                    }
                }
            }

            #[test]
            fn run_write_parse_round_trip(
                scores in prop::collection::vec(-1000.0f64..1000.0, 1..30),
            ) {
                let mut sorted: Vec<f64> = scores.iter().map(|s| (s * 1e6).round() / 1e6).collect();
                sorted.sort_by(|a, b| b.total_cmp(a));
                let mut run = Run::new();
                run.insert(
                    "q".into(),
                    sorted.iter().enumerate().map(|(i, &s)| (format!("d{i}"), s)).collect(),
                );
                let mut buf = Vec::new();
                write_run(&run, "t", &mut buf).unwrap();
                let back = parse_run(buf.as_slice()).unwrap();
                prop_assert_eq!(back, run);
            }
        }
    }
}

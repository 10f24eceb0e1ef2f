//! Exact and near-duplicate removal.
//!
//! Near duplicates are found with word-shingle MinHash signatures bucketed by
//! LSH bands. Candidate pairs are confirmed on the signature-estimated
//! Jaccard similarity and merged into clusters with union-find; each cluster
//! keeps its longest member.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::doc::{CleanDocument, DocId};

/// Mersenne prime 2^61 - 1, the modulus of the permutation family.
pub const MERSENNE_61: u64 = (1 << 61) - 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DedupError {
    #[error("empty document reached dedup: {0}")]
    EmptyDocument(DocId),
    #[error("incomparable signatures (k {0} vs {1}, seed {2} vs {3})")]
    Incomparable(usize, usize, u64, u64),
    #[error("invalid LSH parameters: {0}")]
    InvalidParams(String),
}

/// Hashed w-word windows of one document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShingleSet {
    pub doc_id: DocId,
    /// Sorted, distinct.
    pub shingles: Vec<u64>,
    pub w: usize,
}

impl ShingleSet {
    pub fn len(&self) -> usize {
        self.shingles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shingles.is_empty()
    }
}

/// FNV-1a with a splitmix64 finalizer. Stable across platforms and releases.
pub fn stable_hash64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

pub fn shingles(doc_id: DocId, text: &str, w: usize) -> Result<ShingleSet, DedupError> {
    assert!(w >= 1, "shingle width must be >= 1");
    let lower = text.to_lowercase();
    let words: Vec<&str> = lower.split_whitespace().collect();
    if words.is_empty() {
        return Err(DedupError::EmptyDocument(doc_id));
    }
    let mut set: Vec<u64> = if words.len() < w {
        vec![stable_hash64(words.join(" ").as_bytes())]
    } else {
        words
            .windows(w)
            .map(|win| stable_hash64(win.join(" ").as_bytes()))
            .collect()
    };
    set.sort_unstable();
    set.dedup();
    Ok(ShingleSet {
        doc_id,
        shingles: set,
        w,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinHashSignature {
    pub doc_id: DocId,
    pub values: Vec<u64>,
    pub seed: u64,
}

impl MinHashSignature {
    pub fn k(&self) -> usize {
        self.values.len()
    }
}

#[inline]
fn mod_mersenne(x: u128) -> u64 {
    let p = MERSENNE_61 as u128;
    let folded = (x & p) + (x >> 61);
    let folded = (folded & p) + (folded >> 61);
    let r = folded as u64;
    if r >= MERSENNE_61 {
        r - MERSENNE_61
    } else {
        r
    }
}

/// k universal hash functions `h_i(x) = (a_i x + b_i) mod (2^61 - 1)` with
/// coefficients drawn from `seed`.
#[derive(Debug, Clone)]
pub struct MinHasher {
    coeffs: Vec<(u64, u64)>,
    seed: u64,
}

impl MinHasher {
    pub fn new(k: usize, seed: u64) -> Self {
        assert!(k >= 1, "k must be >= 1");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs = (0..k)
            .map(|_| {
                let a = rng.random_range(1..MERSENNE_61);
                let b = rng.random_range(0..MERSENNE_61);
                (a, b)
            })
            .collect();
        MinHasher { coeffs, seed }
    }

    pub fn k(&self) -> usize {
        self.coeffs.len()
    }

    pub fn sign(&self, s: &ShingleSet) -> MinHashSignature {
        assert!(!s.is_empty(), "cannot sign an empty shingle set");
        let values = self
            .coeffs
            .iter()
            .map(|&(a, b)| {
                s.shingles
                    .iter()
                    .map(|&x| mod_mersenne(a as u128 * x as u128 + b as u128))
                    .min()
                    .unwrap()
            })
            .collect();
        MinHashSignature {
            doc_id: s.doc_id,
            values,
            seed: self.seed,
        }
    }
}

pub fn minhash_sign(s: &ShingleSet, k: usize, seed: u64) -> MinHashSignature {
    MinHasher::new(k, seed).sign(s)
}

/// Fraction of signature positions that agree.
pub fn est_jaccard(a: &MinHashSignature, b: &MinHashSignature) -> Result<f64, DedupError> {
    if a.k() != b.k() || a.seed != b.seed {
        return Err(DedupError::Incomparable(a.k(), b.k(), a.seed, b.seed));
    }
    let agree = a.values.iter().zip(&b.values).filter(|(x, y)| x == y).count();
    Ok(agree as f64 / a.k() as f64)
}

/// Probability that a pair with similarity `s` shares at least one band.
pub fn collision_probability(s: f64, b: usize, r: usize) -> f64 {
    1.0 - (1.0 - s.powi(r as i32)).powi(b as i32)
}

fn simpson<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let h = (hi - lo) / n as f64;
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + i as f64 * h);
    }
    acc * h / 3.0
}

/// False-positive plus false-negative area of the banding S-curve against the
/// step at `threshold`.
pub fn banding_error(threshold: f64, b: usize, r: usize) -> f64 {
    const INTERVALS: usize = 2000;
    let fp = simpson(|s| collision_probability(s, b, r), 0.0, threshold, INTERVALS);
    let fnr = simpson(
        |s| 1.0 - collision_probability(s, b, r),
        threshold,
        1.0,
        INTERVALS,
    );
    fp + fnr
}

/// Exhaustive search for the (bands, rows) pair minimizing [`banding_error`].
/// Errors within 1e-12 count as ties, resolved toward fewer bands and then
/// fewer rows.
pub fn choose_lsh_params(k: usize, threshold: f64) -> Result<(usize, usize), DedupError> {
    if k < 2 {
        return Err(DedupError::InvalidParams(format!("k = {k} must be >= 2")));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(DedupError::InvalidParams(format!(
            "threshold {threshold} must lie in (0, 1)"
        )));
    }
    let mut best = (f64::INFINITY, 1, 1);
    for b in 1..=k {
        for r in 1..=k / b {
            let err = banding_error(threshold, b, r);
            if err < best.0 - 1e-12 {
                best = (err, b, r);
            }
        }
    }
    Ok((best.1, best.2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LshParams {
    pub k: usize,
    pub threshold: f64,
    pub b: usize,
    pub r: usize,
}

impl LshParams {
    /// Picks (b, r) by [`choose_lsh_params`].
    pub fn tuned(k: usize, threshold: f64) -> Result<Self, DedupError> {
        let (b, r) = choose_lsh_params(k, threshold)?;
        Ok(LshParams { k, threshold, b, r })
    }

    pub fn validate(&self) -> Result<(), DedupError> {
        if self.b == 0 || self.r == 0 || self.b * self.r > self.k {
            return Err(DedupError::InvalidParams(format!(
                "need b >= 1, r >= 1, b*r <= k (b={}, r={}, k={})",
                self.b, self.r, self.k
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(DedupError::InvalidParams(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

impl Default for LshParams {
    fn default() -> Self {
        // choose_lsh_params(128, 0.8)
        LshParams {
            k: 128,
            threshold: 0.8,
            b: 9,
            r: 13,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DedupConfig {
    pub lsh: LshParams,
    pub shingle_width: usize,
    pub seed: u64,
}

impl Default for DedupConfig {
    fn default() -> Self {
        DedupConfig {
            lsh: LshParams::default(),
            shingle_width: 5,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DupCluster {
    pub canonical: DocId,
    pub members: Vec<DocId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupReport {
    pub input: usize,
    pub exact_dropped: usize,
    pub near_dropped: usize,
    pub clusters: usize,
}

/// Keeps the first document for each distinct text.
pub fn exact_dedup(docs: Vec<CleanDocument>) -> (Vec<CleanDocument>, usize) {
    let mut seen: HashSet<[u8; 32]> = HashSet::with_capacity(docs.len());
    let mut kept = Vec::with_capacity(docs.len());
    let mut dropped = 0;
    for doc in docs {
        let digest: [u8; 32] = Sha256::digest(doc.text.as_bytes()).into();
        if seen.insert(digest) {
            kept.push(doc);
        } else {
            dropped += 1;
        }
    }
    (kept, dropped)
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller index becomes the root so results don't depend on
            // pair visiting order
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

#[derive(Debug, Clone)]
pub struct NearDedupOutput {
    pub kept: Vec<CleanDocument>,
    pub clusters: Vec<DupCluster>,
    pub signatures: Vec<MinHashSignature>,
    pub report: DedupReport,
}

/// LSH near-duplicate removal over an exact-deduplicated stream.
pub fn near_dedup(
    docs: Vec<CleanDocument>,
    cfg: &DedupConfig,
) -> Result<NearDedupOutput, DedupError> {
    let params = &cfg.lsh;
    params.validate()?;
    let hasher = MinHasher::new(params.k, cfg.seed);

    let signatures: Vec<MinHashSignature> = docs
        .par_iter()
        .map(|d| shingles(d.id, &d.text, cfg.shingle_width).map(|s| hasher.sign(&s)))
        .collect::<Result<_, _>>()?;

    let mut uf = UnionFind::new(docs.len());
    let mut checked: HashSet<(usize, usize)> = HashSet::new();
    for band in 0..params.b {
        let lo = band * params.r;
        let hi = lo + params.r;
        let mut buckets: HashMap<Vec<u64>, Vec<usize>> = HashMap::new();
        for (i, sig) in signatures.iter().enumerate() {
            buckets.entry(sig.values[lo..hi].to_vec()).or_default().push(i);
        }
        let mut groups: Vec<Vec<usize>> = buckets.into_values().filter(|g| g.len() > 1).collect();
        groups.sort_unstable();
        for group in groups {
            for (x, &i) in group.iter().enumerate() {
                for &j in &group[x + 1..] {
                    if !checked.insert((i, j)) {
                        continue;
                    }
                    if est_jaccard(&signatures[i], &signatures[j])? >= params.threshold {
                        uf.union(i, j);
                    }
                }
            }
        }
    }

    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..docs.len() {
        let root = uf.find(i);
        components.entry(root).or_default().push(i);
    }

    let mut drop = vec![false; docs.len()];
    let mut clusters = Vec::new();
    for members in components.into_values().filter(|m| m.len() > 1) {
        let canonical = *members
            .iter()
            .max_by(|&&a, &&b| {
                docs[a]
                    .byte_len()
                    .cmp(&docs[b].byte_len())
                    .then_with(|| docs[b].id.cmp(&docs[a].id))
            })
            .unwrap();
        for &m in &members {
            drop[m] = m != canonical;
        }
        clusters.push(DupCluster {
            canonical: docs[canonical].id,
            members: members.iter().map(|&m| docs[m].id).collect(),
        });
    }

    let input = docs.len();
    let kept: Vec<CleanDocument> = docs
        .into_iter()
        .zip(&drop)
        .filter(|(_, &d)| !d)
        .map(|(doc, _)| doc)
        .collect();
    let report = DedupReport {
        input,
        exact_dropped: 0,
        near_dropped: input - kept.len(),
        clusters: clusters.len(),
    };
    Ok(NearDedupOutput {
        kept,
        clusters,
        signatures,
        report,
    })
}

/// Exact then near dedup, as one stage.
pub fn dedup_all(
    docs: Vec<CleanDocument>,
    cfg: &DedupConfig,
) -> Result<NearDedupOutput, DedupError> {
    let input = docs.len();
    let (docs, exact_dropped) = exact_dedup(docs);
    let mut out = near_dedup(docs, cfg)?;
    out.report.input = input;
    out.report.exact_dropped = exact_dropped;
    Ok(out)
}

/// Binary records: 16-byte doc id followed by k little-endian u64 values.
pub fn write_signatures(path: &Path, sigs: &[MinHashSignature]) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for sig in sigs {
        out.write_all(&sig.doc_id.0)?;
        for v in &sig.values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

pub fn read_signatures(path: &Path, k: usize, seed: u64) -> io::Result<Vec<MinHashSignature>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let record = 16 + 8 * k;
    if bytes.len() % record != 0 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!(
                "signature file length {} is not a multiple of {record}",
                bytes.len()
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(record)
        .map(|rec| MinHashSignature {
            doc_id: DocId(rec[..16].try_into().unwrap()),
            values: rec[16..]
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            seed,
        })
        .collect())
}

//! p-stable locality-sensitive hashing for Euclidean nearest neighbours.
//!
//! A hash is `h(z) = ⌊(w·z + c)/r⌋` with `w ~ N(0, I)` and `c ~ U[0, r)`. Each of
//! `T` tables concatenates `m` hashes into a composite key, mixed to 64 bits for
//! addressing. A query gathers the rows sharing its bucket in any table,
//! re-ranks them by exact distance and keeps the `k` closest, ties going to the
//! lower row id.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::latent::{squared_distance, LatentTable};

#[derive(Clone, Debug, PartialEq)]
pub struct HashFunction {
    pub w: Vec<f64>,
    pub c: f64,
    pub r: f64,
}

impl HashFunction {
    pub fn draw(dim: usize, r: f64, rng: &mut impl Rng) -> Self {
        let w = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let c = rng.random_range(0.0..r);
        HashFunction { w, c, r }
    }

    fn apply(&self, z: &[f64]) -> i64 {
        let dot: f64 = self.w.iter().zip(z).map(|(a, b)| a * b).sum();
        ((dot + self.c) / self.r).floor() as i64
    }
}

pub fn hash_value(h: &HashFunction, z: &[f64]) -> Result<i64> {
    if z.len() != h.w.len() {
        return Err(Error::Dimension { expected: h.w.len(), got: z.len() });
    }
    Ok(h.apply(z))
}

fn mix_key(values: impl Iterator<Item = i64>) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for v in values {
        h ^= v as u64;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 29;
        h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 32;
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LshParams {
    pub tables: usize,
    pub hashes: usize,
    pub width: f64,
    pub seed: u64,
}

impl LshParams {
    pub fn validate(&self) -> Result<()> {
        if self.tables == 0 {
            return Err(Error::config("lsh.tables", "must be at least 1"));
        }
        if self.hashes == 0 {
            return Err(Error::config("lsh.hashes", "must be at least 1"));
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::config("lsh.width", "must be finite and > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborMode {
    /// Only rows that received the queried action.
    ActionStratified,
    /// All rows regardless of action.
    Unrestricted,
}

impl NeighborMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "action_stratified" | "stratified" => Some(NeighborMode::ActionStratified),
            "unrestricted" => Some(NeighborMode::Unrestricted),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NeighborMode::ActionStratified => "action_stratified",
            NeighborMode::Unrestricted => "unrestricted",
        }
    }

    fn admits(self, row_action: usize, action: usize) -> bool {
        self == NeighborMode::Unrestricted || row_action == action
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryConfig {
    pub k: usize,
    pub mode: NeighborMode,
    /// Largest number of candidates re-ranked; `None` re-ranks every candidate.
    pub candidate_cap: Option<usize>,
    pub fallback: bool,
}

impl QueryConfig {
    pub fn new(k: usize) -> Self {
        QueryConfig { k, mode: NeighborMode::Unrestricted, candidate_cap: None, fallback: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("estimator.k", "must be at least 1"));
        }
        if let Some(cap) = self.candidate_cap {
            if cap < self.k {
                return Err(Error::config("lsh.candidate_cap", "must be at least k"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbors {
    /// `(row id, Euclidean distance)`, closest first.
    pub items: Vec<(usize, f64)>,
    pub fell_back: bool,
    /// Distinct eligible rows whose distance was computed.
    pub examined: usize,
}

#[derive(Clone, Debug)]
pub struct LshIndex {
    params: LshParams,
    functions: Vec<HashFunction>,
    buckets: Vec<HashMap<u64, Vec<u32>>>,
    rows: LatentTable,
}

fn draw_functions(params: &LshParams, dim: usize) -> Vec<HashFunction> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    (0..params.tables * params.hashes).map(|_| HashFunction::draw(dim, params.width, &mut rng)).collect()
}

pub fn build_index(rows: LatentTable, params: LshParams) -> Result<LshIndex> {
    params.validate()?;
    if rows.is_empty() {
        return Err(Error::Empty("index rows"));
    }
    let functions = draw_functions(&params, rows.dim());
    let buckets = (0..params.tables)
        .into_par_iter()
        .map(|t| {
            let fs = &functions[t * params.hashes..(t + 1) * params.hashes];
            let mut map: HashMap<u64, Vec<u32>> = HashMap::new();
            for i in 0..rows.len() {
                let z = rows.row(i);
                map.entry(mix_key(fs.iter().map(|f| f.apply(z)))).or_default().push(i as u32);
            }
            map
        })
        .collect();
    Ok(LshIndex { params, functions, buckets, rows })
}

impl LshIndex {
    pub fn params(&self) -> &LshParams {
        &self.params
    }

    pub fn rows(&self) -> &LatentTable {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Stored (row, table) entries; equals rows × tables.
    pub fn entry_count(&self) -> usize {
        self.buckets.iter().map(|b| b.values().map(Vec::len).sum::<usize>()).sum()
    }

    /// Composite bucket key of `z` in table `t`.
    pub fn key(&self, t: usize, z: &[f64]) -> u64 {
        let h = self.params.hashes;
        mix_key(self.functions[t * h..(t + 1) * h].iter().map(|f| f.apply(z)))
    }

    pub fn bucket(&self, t: usize, key: u64) -> &[u32] {
        self.buckets[t].get(&key).map_or(&[], Vec::as_slice)
    }

    fn eligible(&self, action: usize, mode: NeighborMode) -> usize {
        match mode {
            NeighborMode::Unrestricted => self.rows.len(),
            NeighborMode::ActionStratified => self.rows.stratum(action).count(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = IndexHeader {
            format: INDEX_FORMAT.to_string(),
            params: self.params,
            dim: self.rows.dim(),
            rows: self.rows.len(),
        };
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for table in &self.buckets {
            let mut keys: Vec<&u64> = table.keys().collect();
            keys.sort();
            w.write_all(&(keys.len() as u64).to_le_bytes())?;
            for k in keys {
                let ids = &table[k];
                w.write_all(&k.to_le_bytes())?;
                w.write_all(&(ids.len() as u32).to_le_bytes())?;
                for id in ids {
                    w.write_all(&id.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads buckets written by [`LshIndex::save`] for the same `rows`; hash
    /// functions are redrawn from the stored seed.
    pub fn load(path: &Path, rows: LatentTable) -> Result<LshIndex> {
        let bad = |message: String| Error::Format { path: path.to_path_buf(), message };
        let mut r = BufReader::new(File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: IndexHeader = serde_json::from_str(line.trim_end())?;
        if header.format != INDEX_FORMAT {
            return Err(bad(format!("unknown format {}", header.format)));
        }
        if header.rows != rows.len() || header.dim != rows.dim() {
            return Err(bad(format!("index holds {}×{}, rows are {}×{}", header.rows, header.dim, rows.len(), rows.dim())));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = bytes.as_slice();
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(bad("truncated bucket data".to_string()));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        let mut buckets = Vec::with_capacity(header.params.tables);
        for _ in 0..header.params.tables {
            let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
            let mut map = HashMap::with_capacity(count as usize);
            for _ in 0..count {
                let key = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
                let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
                let ids = take(4 * len)?.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                map.insert(key, ids);
            }
            buckets.push(map);
        }
        let functions = draw_functions(&header.params, rows.dim());
        Ok(LshIndex { params: header.params, functions, buckets, rows })
    }
}

const INDEX_FORMAT: &str = "latent-match-lsh/1";

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    format: String,
    params: LshParams,
    dim: usize,
    rows: usize,
}

fn by_distance(a: &(usize, f64), b: &(usize, f64)) -> std::cmp::Ordering {
    a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))
}

/// Keeps the `k` smallest by (distance, id), sorted.
fn smallest(mut scored: Vec<(usize, f64)>, k: usize) -> Vec<(usize, f64)> {
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, by_distance);
        scored.truncate(k);
    }
    scored.sort_by(by_distance);
    scored
}

pub fn query_knn(index: &LshIndex, z: &[f64], action: usize, cfg: &QueryConfig) -> Result<Neighbors> {
    cfg.validate()?;
    if z.len() != index.rows.dim() {
        return Err(Error::Dimension { expected: index.rows.dim(), got: z.len() });
    }
    let available = index.eligible(action, cfg.mode);
    if cfg.k > available {
        return Err(Error::Starvation { action, available, k: cfg.k });
    }
    let mut ids: Vec<u32> = Vec::new();
    for t in 0..index.params.tables {
        let bucket = index.bucket(t, index.key(t, z));
        ids.extend(bucket.iter().filter(|&&i| cfg.mode.admits(index.rows.meta(i as usize).action, action)));
    }
    ids.sort_unstable();
    let mut candidates: Vec<(u32, usize)> = Vec::new();
    for id in ids {
        match candidates.last_mut() {
            Some((last, n)) if *last == id => *n += 1,
            _ => candidates.push((id, 1)),
        }
    }
    if let Some(cap) = cfg.candidate_cap {
        if candidates.len() > cap {
            // rows colliding in more tables are likelier to be close
            candidates.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            candidates.truncate(cap);
        }
    }
    if candidates.len() < cfg.k && cfg.fallback {
        let items = brute_force_knn(&index.rows, z, action, cfg.k, cfg.mode)?;
        return Ok(Neighbors { items, fell_back: true, examined: available });
    }
    let examined = candidates.len();
    let scored = candidates
        .into_iter()
        .map(|(i, _)| (i as usize, squared_distance(index.rows.row(i as usize), z)))
        .collect();
    let items = smallest(scored, cfg.k).into_iter().map(|(i, d2)| (i, d2.sqrt())).collect();
    Ok(Neighbors { items, fell_back: false, examined })
}

/// Exact `k` nearest eligible rows with the same ordering rule as [`query_knn`].
pub fn brute_force_knn(rows: &LatentTable, z: &[f64], action: usize, k: usize, mode: NeighborMode) -> Result<Vec<(usize, f64)>> {
    if z.len() != rows.dim() {
        return Err(Error::Dimension { expected: rows.dim(), got: z.len() });
    }
    if k == 0 {
        return Err(Error::config("estimator.k", "must be at least 1"));
    }
    let scored: Vec<(usize, f64)> = (0..rows.len())
        .filter(|&i| mode.admits(rows.meta(i).action, action))
        .map(|i| (i, squared_distance(rows.row(i), z)))
        .collect();
    if scored.len() < k {
        return Err(Error::Starvation { action, available: scored.len(), k });
    }
    Ok(smallest(scored, k).into_iter().map(|(i, d2)| (i, d2.sqrt())).collect())
}

/// Share of the true `k` nearest neighbours found by the approximate query.
pub fn recall(approx: &[(usize, f64)], exact: &[(usize, f64)]) -> f64 {
    if exact.is_empty() {
        return 1.0;
    }
    let hits = exact.iter().filter(|(i, _)| approx.iter().any(|(j, _)| j == i)).count();
    hits as f64 / exact.len() as f64
}

/// Monte Carlo estimate of `P[h(x) = h(y)]` for `‖x − y‖ = d`, drawing a fresh
/// hash per trial.
pub fn collision_rate(r: f64, d: f64, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, y) = ([0.0], [d]);
    let mut hits = 0usize;
    for _ in 0..trials {
        let h = HashFunction::draw(1, r, &mut rng);
        if h.apply(&x) == h.apply(&y) {
            hits += 1;
        }
    }
    hits as f64 / trials.max(1) as f64
}

/// Closed-form collision probability of one Gaussian hash at distance `d`:
/// `1 − 2Φ(−r/d) − (2d/(√(2π) r))(1 − exp(−r²/(2d²)))`.
pub fn collision_probability(r: f64, d: f64) -> f64 {
    if d <= 0.0 {
        return 1.0;
    }
    let x = r / d;
    let phi = Normal::standard().cdf(-x);
    1.0 - 2.0 * phi - 2.0 / ((2.0 * std::f64::consts::PI).sqrt() * x) * (1.0 - (-x * x / 2.0).exp())
}

/// Width factor applied to the sampled median pairwise distance.
pub const DEFAULT_WIDTH_FACTOR: f64 = 3.0;

/// Median Euclidean distance over up to `pairs` random row pairs.
pub fn median_pairwise_distance(rows: &LatentTable, pairs: usize, seed: u64) -> Result<f64> {
    if rows.len() < 2 {
        return Err(Error::Empty("rows for pairwise distances"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d: Vec<f64> = (0..pairs.max(1))
        .map(|_| {
            let i = rng.random_range(0..rows.len());
            let mut j = rng.random_range(0..rows.len() - 1);
            if j >= i {
                j += 1;
            }
            squared_distance(rows.row(i), rows.row(j)).sqrt()
        })
        .collect();
    let mid = d.len() / 2;
    d.select_nth_unstable_by(mid, f64::total_cmp);
    Ok(d[mid])
}

pub fn default_width(rows: &LatentTable, seed: u64) -> Result<f64> {
    let w = DEFAULT_WIDTH_FACTOR * median_pairwise_distance(rows, 2000, seed)?;
    Ok(if w > 0.0 { w } else { 1.0 })
}

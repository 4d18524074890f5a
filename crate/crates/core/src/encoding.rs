//! Fixed-size ordinally forgetting encoding (FOFE).
//!
//! A sequence `w_1 .. w_T` over a vocabulary `V` is folded into a single
//! `|V|`-dimensional vector by the recursion
//!
//! ```text
//! z_0 = 0
//! z_t = alpha * z_{t-1} + e_t
//! ```
//!
//! where `e_t` is the one-hot vector of `w_t`. The most recent symbol carries
//! weight 1 and older symbols decay geometrically, so the code keeps both the
//! content and the order of the sequence in a size that does not depend on `T`.
//!
//! Codes are stored sparsely: a sequence of length `L` touches at most `L`
//! indices while `|V|` is usually in the tens of thousands. Dense vectors only
//! appear after projection (see [`crate::features`]).

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Symbol reserved for out-of-vocabulary tokens.
pub const UNK: &str = "<unk>";
/// Symbol used to pad short character sequences.
pub const PAD: &str = "<pad>";

/// Weights that decay below this value are dropped from sparse codes.
pub const DEFAULT_WEIGHT_FLOOR: f64 = 1e-12;

/// Largest number of sequences [`uniqueness_check`] will enumerate by default.
pub const DEFAULT_ENUMERATION_BUDGET: u128 = 1_000_000;

/// Ordered set of distinct symbols with a designated unknown-symbol slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
    unk_id: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered symbol list that must contain [`UNK`]
    /// exactly once.
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::InvalidParameter(format!(
                    "empty symbol at vocabulary position {i}"
                )));
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::InvalidParameter(format!(
                    "duplicate vocabulary symbol {s:?}"
                )));
            }
        }
        let unk_id = *index
            .get(UNK)
            .ok_or_else(|| Error::InvalidParameter(format!("vocabulary lacks {UNK}")))?;
        Ok(Self {
            symbols,
            index,
            unk_id,
        })
    }

    /// Builds a vocabulary from distinct tokens, appending [`UNK`] at the end.
    /// Repeated tokens and literal `<unk>` entries are skipped.
    pub fn with_unk<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut symbols = Vec::new();
        let mut index = HashMap::new();
        for t in tokens {
            let t = t.into();
            if t == UNK || t.is_empty() || index.contains_key(&t) {
                continue;
            }
            index.insert(t.clone(), symbols.len());
            symbols.push(t);
        }
        let unk_id = symbols.len();
        index.insert(UNK.to_string(), unk_id);
        symbols.push(UNK.to_string());
        Self {
            symbols,
            index,
            unk_id,
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        self.unk_id
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol_at(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    /// Index of `symbol`, if present.
    pub fn get(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    /// Index of `symbol`, falling back to the unknown slot.
    pub fn lookup(&self, symbol: &str) -> usize {
        self.get(symbol).unwrap_or(self.unk_id)
    }

    pub fn lookup_char(&self, c: char) -> usize {
        let mut buf = [0u8; 4];
        self.lookup(c.encode_utf8(&mut buf))
    }

    pub fn lookup_all<S: AsRef<str>>(&self, symbols: &[S]) -> Vec<usize> {
        symbols.iter().map(|s| self.lookup(s.as_ref())).collect()
    }

    /// Parses the one-symbol-per-line file format.
    pub fn from_text(text: &str) -> Result<Self> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        if body.is_empty() {
            return Err(Error::parse("vocabulary", "empty vocabulary file"));
        }
        let mut symbols = Vec::new();
        for (lineno, line) in body.split('\n').enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.is_empty() {
                return Err(Error::parse(
                    format!("vocabulary line {}", lineno + 1),
                    "empty symbol",
                ));
            }
            symbols.push(line.to_string());
        }
        Self::new(symbols).map_err(|e| Error::parse("vocabulary", e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.symbols {
            out.push_str(s);
            out.push('\n');
        }
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Parse { location, message } => Error::Parse {
                location: format!("{}: {location}", path.display()),
                message,
            },
            other => other,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the serialized vocabulary, used to pair models with vocab files.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Forgetting factor, guaranteed to lie in the open interval (0, 1).
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Alpha(f64);

impl Alpha {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value < 1.0 {
            Ok(Self(value))
        } else {
            Err(Error::InvalidParameter(format!(
                "forgetting factor must lie in (0, 1), got {value}"
            )))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Alpha {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Alpha::new(value)
    }
}

impl From<Alpha> for f64 {
    fn from(a: Alpha) -> f64 {
        a.0
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Sparse non-negative vector with entries kept sorted by index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseVector {
    entries: Vec<(usize, f64)>,
    dim: usize,
}

impl SparseVector {
    pub fn zeros(dim: usize) -> Self {
        Self {
            entries: Vec::new(),
            dim,
        }
    }

    /// Bag-of-words vector: each index weighted by its multiplicity.
    pub fn from_counts(ids: &[usize], dim: usize) -> Self {
        let mut sorted = ids.to_vec();
        sorted.sort_unstable();
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(sorted.len());
        for id in sorted {
            assert!(id < dim, "index {id} out of range for dimension {dim}");
            match entries.last_mut() {
                Some((last, w)) if *last == id => *w += 1.0,
                _ => entries.push((id, 1.0)),
            }
        }
        Self { entries, dim }
    }

    /// Builds a vector from unsorted `(index, weight)` pairs, summing duplicates
    /// and dropping zeros.
    pub fn from_entries(mut pairs: Vec<(usize, f64)>, dim: usize) -> Result<Self> {
        pairs.sort_by_key(|&(i, _)| i);
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(pairs.len());
        for (i, w) in pairs {
            if i >= dim {
                return Err(Error::InvalidParameter(format!(
                    "index {i} out of range for dimension {dim}"
                )));
            }
            if !w.is_finite() {
                return Err(Error::InvalidParameter(format!("non-finite weight at {i}")));
            }
            match entries.last_mut() {
                Some((last, acc)) if *last == i => *acc += w,
                _ => entries.push((i, w)),
            }
        }
        entries.retain(|&(_, w)| w != 0.0);
        Ok(Self { entries, dim })
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> f64 {
        match self.entries.binary_search_by_key(&index, |&(i, _)| i) {
            Ok(pos) => self.entries[pos].1,
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(i, w) in &self.entries {
            out[i] = w;
        }
        out
    }

    /// Largest absolute coordinate difference.
    pub fn max_abs_diff(&self, other: &SparseVector) -> f64 {
        let (mut a, mut b) = (self.entries.iter().peekable(), other.entries.iter().peekable());
        let mut best = 0.0f64;
        loop {
            let d = match (a.peek(), b.peek()) {
                (None, None) => break,
                (Some(&&(_, w)), None) => {
                    a.next();
                    w.abs()
                }
                (None, Some(&&(_, w))) => {
                    b.next();
                    w.abs()
                }
                (Some(&&(i, wi)), Some(&&(j, wj))) => {
                    if i == j {
                        a.next();
                        b.next();
                        (wi - wj).abs()
                    } else if i < j {
                        a.next();
                        wi.abs()
                    } else {
                        b.next();
                        wj.abs()
                    }
                }
            };
            best = best.max(d);
        }
        best
    }

    /// One recursion step: scale every weight by `alpha`, drop weights under
    /// `floor`, then add 1 at `id`.
    fn forget_and_push(&mut self, id: usize, alpha: f64, floor: f64) {
        assert!(id < self.dim, "index {id} out of range for dimension {}", self.dim);
        for e in &mut self.entries {
            e.1 *= alpha;
        }
        self.entries.retain(|&(_, w)| w >= floor);
        match self.entries.binary_search_by_key(&id, |&(i, _)| i) {
            Ok(pos) => self.entries[pos].1 += 1.0,
            Err(pos) => self.entries.insert(pos, (id, 1.0)),
        }
    }
}

/// FOFE code of one sequence: a sparse `|V|`-dimensional vector plus the
/// forgetting factor that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct FofeCode {
    vector: SparseVector,
    alpha: Alpha,
}

impl FofeCode {
    pub fn zero(dim: usize, alpha: Alpha) -> Self {
        Self {
            vector: SparseVector::zeros(dim),
            alpha,
        }
    }

    pub fn alpha(&self) -> Alpha {
        self.alpha
    }

    pub fn vector(&self) -> &SparseVector {
        &self.vector
    }

    pub fn into_vector(self) -> SparseVector {
        self.vector
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        self.vector.entries()
    }

    pub fn dim(&self) -> usize {
        self.vector.dim()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.vector.get(index)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        self.vector.to_dense()
    }
}

/// Stateless FOFE encoder for a fixed forgetting factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Encoder {
    alpha: Alpha,
    floor: f64,
}

impl Encoder {
    pub fn new(alpha: f64) -> Result<Self> {
        Ok(Self::from_alpha(Alpha::new(alpha)?))
    }

    pub fn from_alpha(alpha: Alpha) -> Self {
        Self {
            alpha,
            floor: DEFAULT_WEIGHT_FLOOR,
        }
    }

    /// Overrides the weight floor below which decayed entries are dropped.
    /// A floor of 0 keeps everything.
    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor.max(0.0);
        self
    }

    pub fn alpha(&self) -> Alpha {
        self.alpha
    }

    /// Appends `id` to the sequence encoded by `code`.
    pub fn push(&self, code: &mut FofeCode, id: usize) {
        code.vector.forget_and_push(id, self.alpha.get(), self.floor);
    }

    /// Encodes a sequence of symbol ids.
    ///
    /// # Panics
    /// Panics if an id is not below `dim`.
    pub fn encode_ids<I>(&self, ids: I, dim: usize) -> FofeCode
    where
        I: IntoIterator<Item = usize>,
    {
        let mut code = FofeCode::zero(dim, self.alpha);
        for id in ids {
            self.push(&mut code, id);
        }
        code
    }

    pub fn encode<S: AsRef<str>>(&self, seq: &[S], vocab: &Vocabulary) -> FofeCode {
        self.encode_ids(seq.iter().map(|s| vocab.lookup(s.as_ref())), vocab.len())
    }

    /// Element `t` is the code of `ids[..=t]`, built in one left-to-right pass.
    pub fn prefixes_ids(&self, ids: &[usize], dim: usize) -> Vec<FofeCode> {
        let mut out = Vec::with_capacity(ids.len());
        let mut code = FofeCode::zero(dim, self.alpha);
        for &id in ids {
            self.push(&mut code, id);
            out.push(code.clone());
        }
        out
    }

    /// Element `t` is the code of `ids[t..]` read right to left, so the last
    /// symbol is the oldest and `ids[t]` the most recent.
    pub fn suffixes_ids(&self, ids: &[usize], dim: usize) -> Vec<FofeCode> {
        let mut out = Vec::with_capacity(ids.len());
        let mut code = FofeCode::zero(dim, self.alpha);
        for &id in ids.iter().rev() {
            self.push(&mut code, id);
            out.push(code.clone());
        }
        out.reverse();
        out
    }

    pub fn encode_all_prefixes<S: AsRef<str>>(
        &self,
        sentence: &[S],
        vocab: &Vocabulary,
    ) -> Vec<FofeCode> {
        self.prefixes_ids(&vocab.lookup_all(sentence), vocab.len())
    }

    pub fn encode_all_suffixes<S: AsRef<str>>(
        &self,
        sentence: &[S],
        vocab: &Vocabulary,
    ) -> Vec<FofeCode> {
        self.suffixes_ids(&vocab.lookup_all(sentence), vocab.len())
    }
}

/// Encodes `seq` left to right. Symbols missing from `vocab` map to its unknown slot.
pub fn encode<S: AsRef<str>>(seq: &[S], vocab: &Vocabulary, alpha: f64) -> Result<FofeCode> {
    Ok(Encoder::new(alpha)?.encode(seq, vocab))
}

pub fn encode_all_prefixes<S: AsRef<str>>(
    sentence: &[S],
    vocab: &Vocabulary,
    alpha: f64,
) -> Result<Vec<FofeCode>> {
    Ok(Encoder::new(alpha)?.encode_all_prefixes(sentence, vocab))
}

pub fn encode_all_suffixes<S: AsRef<str>>(
    sentence: &[S],
    vocab: &Vocabulary,
    alpha: f64,
) -> Result<Vec<FofeCode>> {
    Ok(Encoder::new(alpha)?.encode_all_suffixes(sentence, vocab))
}

/// Outcome of an exhaustive uniqueness enumeration.
#[derive(Clone, Debug, PartialEq)]
pub struct UniquenessReport {
    /// Number of sequences enumerated (all lengths `1..=max_len`).
    pub sequences: usize,
    /// Number of pairs whose codes are within `tol` in max-norm.
    pub colliding_pairs: usize,
    /// First colliding pair found, as symbol-id sequences.
    pub example: Option<(Vec<usize>, Vec<usize>)>,
}

impl UniquenessReport {
    pub fn is_unique(&self) -> bool {
        self.colliding_pairs == 0
    }
}

/// Number of nonempty sequences of length at most `max_len` over `vocab_size` symbols.
pub fn sequence_count(vocab_size: usize, max_len: usize) -> Option<u128> {
    let v = vocab_size as u128;
    let mut total: u128 = 0;
    let mut level: u128 = 1;
    for _ in 0..max_len {
        level = level.checked_mul(v)?;
        total = total.checked_add(level)?;
    }
    Some(total)
}

/// Enumerates every sequence of length `1..=max_len` over `vocab_size` symbols
/// and reports whether all their codes are pairwise more than `tol` apart in
/// max-norm.
pub fn uniqueness_check(
    vocab_size: usize,
    max_len: usize,
    alpha: f64,
    tol: f64,
    budget: u128,
) -> Result<UniquenessReport> {
    let alpha = Alpha::new(alpha)?;
    if vocab_size == 0 {
        return Err(Error::InvalidParameter("vocab_size must be positive".into()));
    }
    if tol.is_nan() || tol < 0.0 {
        return Err(Error::InvalidParameter(format!("tolerance must be >= 0, got {tol}")));
    }
    let needed = sequence_count(vocab_size, max_len).unwrap_or(u128::MAX);
    if needed > budget {
        return Err(Error::Budget { needed, budget });
    }
    let n = needed as usize;
    let v = vocab_size;
    let a = alpha.get();

    // Dense codes, one row of `v` values per sequence, generated level by level.
    let mut codes: Vec<f64> = Vec::with_capacity(n * v);
    let mut parent: Vec<(Option<usize>, usize)> = Vec::with_capacity(n);
    let mut level_start = 0usize;
    for len in 1..=max_len {
        let level_end = codes.len() / v;
        let parents: Vec<Option<usize>> = if len == 1 {
            vec![None]
        } else {
            (level_start..level_end).map(Some).collect()
        };
        level_start = level_end;
        for p in parents {
            for sym in 0..v {
                let base = codes.len();
                match p {
                    Some(pi) => {
                        for k in 0..v {
                            codes.push(a * codes[pi * v + k]);
                        }
                    }
                    None => codes.extend(std::iter::repeat_n(0.0, v)),
                }
                codes[base + sym] += 1.0;
                parent.push((p, sym));
            }
        }
    }
    debug_assert_eq!(parent.len(), n);

    // Sort by a fixed generic linear key; two codes within `tol` in max-norm
    // have keys within `tol * sum(weights)`.
    let weights: Vec<f64> = (0..v).map(|k| 1.0 + (k as f64 + 2.0).sqrt().fract()).collect();
    let window = tol * weights.iter().sum::<f64>();
    let keys: Vec<f64> = (0..n)
        .map(|i| (0..v).map(|k| weights[k] * codes[i * v + k]).sum())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| keys[x].total_cmp(&keys[y]));

    let sequence_of = |mut i: usize| {
        let mut seq = Vec::new();
        loop {
            let (p, sym) = parent[i];
            seq.push(sym);
            match p {
                Some(pi) => i = pi,
                None => break,
            }
        }
        seq.reverse();
        seq
    };

    let mut colliding_pairs = 0usize;
    let mut example = None;
    for (pos, &i) in order.iter().enumerate() {
        for &j in &order[pos + 1..] {
            if keys[j] - keys[i] > window {
                break;
            }
            let dist = (0..v)
                .map(|k| (codes[i * v + k] - codes[j * v + k]).abs())
                .fold(0.0, f64::max);
            if dist <= tol {
                colliding_pairs += 1;
                if example.is_none() {
                    example = Some((sequence_of(i), sequence_of(j)));
                }
            }
        }
    }

    Ok(UniquenessReport {
        sequences: n,
        colliding_pairs,
        example,
    })
}

/// True iff all codes of sequences up to `max_len` are pairwise distinct.
pub fn uniqueness_oracle(vocab_size: usize, max_len: usize, alpha: f64, tol: f64) -> Result<bool> {
    uniqueness_check(vocab_size, max_len, alpha, tol, DEFAULT_ENUMERATION_BUDGET)
        .map(|r| r.is_unique())
}

//! Fixed-size input vectors for fragments.
//!
//! Each fragment is described by up to thirteen blocks, concatenated in a fixed
//! order given by [`FeatureLayout`]:
//!
//! * five word-level blocks per casing (case-sensitive over digit-normalized
//!   tokens, case-insensitive over their lowercased forms): the bag of words of
//!   the fragment, and FOFE codes of the left context including / excluding the
//!   fragment and of the right context including / excluding it. Right contexts
//!   are read right to left, so the word next to the fragment is the most
//!   recent;
//! * left-to-right and right-to-left character FOFE codes of the fragment text;
//! * a character CNN over the fragment text.
//!
//! Sparse blocks are turned into dense ones by multiplying with a projection
//! matrix (one per casing, one for characters). Producers build the sparse
//! [`FragmentInput`]; projection happens on the consumer side so that the
//! matrices can be fine-tuned.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayViewMut1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, Vocabularies};
use crate::encoding::{Alpha, Encoder, FofeCode, SparseVector, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::network::Activation;

/// Which projection matrix a sparse block is multiplied with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Table {
    Cased,
    Uncased,
    Chars,
}

impl Table {
    pub const ALL: [Table; 3] = [Table::Cased, Table::Uncased, Table::Chars];

    pub fn name(self) -> &'static str {
        match self {
            Table::Cased => "cased",
            Table::Uncased => "uncased",
            Table::Chars => "chars",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WordFeature {
    Bow,
    LeftIncl,
    LeftExcl,
    RightIncl,
    RightExcl,
}

impl WordFeature {
    pub const ALL: [WordFeature; 5] = [
        WordFeature::Bow,
        WordFeature::LeftIncl,
        WordFeature::LeftExcl,
        WordFeature::RightIncl,
        WordFeature::RightExcl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WordFeature::Bow => "bow",
            WordFeature::LeftIncl => "left_incl",
            WordFeature::LeftExcl => "left_excl",
            WordFeature::RightIncl => "right_incl",
            WordFeature::RightExcl => "right_excl",
        }
    }
}

/// Enabled word-level blocks for one casing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordFeatureSet {
    pub bow: bool,
    pub left_incl: bool,
    pub left_excl: bool,
    pub right_incl: bool,
    pub right_excl: bool,
}

impl WordFeatureSet {
    pub fn all() -> Self {
        Self {
            bow: true,
            left_incl: true,
            left_excl: true,
            right_incl: true,
            right_excl: true,
        }
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn bow_only() -> Self {
        Self {
            bow: true,
            ..Self::default()
        }
    }

    pub fn context_incl() -> Self {
        Self {
            left_incl: true,
            right_incl: true,
            ..Self::default()
        }
    }

    pub fn context_excl() -> Self {
        Self {
            left_excl: true,
            right_excl: true,
            ..Self::default()
        }
    }

    pub fn contains(&self, f: WordFeature) -> bool {
        match f {
            WordFeature::Bow => self.bow,
            WordFeature::LeftIncl => self.left_incl,
            WordFeature::LeftExcl => self.left_excl,
            WordFeature::RightIncl => self.right_incl,
            WordFeature::RightExcl => self.right_excl,
        }
    }

    fn set(&mut self, f: WordFeature) {
        match f {
            WordFeature::Bow => self.bow = true,
            WordFeature::LeftIncl => self.left_incl = true,
            WordFeature::LeftExcl => self.left_excl = true,
            WordFeature::RightIncl => self.right_incl = true,
            WordFeature::RightExcl => self.right_excl = true,
        }
    }

    fn any(&self) -> bool {
        WordFeature::ALL.iter().any(|&f| self.contains(f))
    }

    fn needs_prefixes(&self) -> bool {
        self.left_incl || self.left_excl
    }

    fn needs_suffixes(&self) -> bool {
        self.right_incl || self.right_excl
    }
}

/// Which blocks are enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSelection {
    pub cased: WordFeatureSet,
    pub uncased: WordFeatureSet,
    pub char_fofe: bool,
    pub char_cnn: bool,
}

impl FeatureSelection {
    /// Named presets mirroring common ablation rows.
    pub const PRESETS: [&'static str; 17] = [
        "uncased-context-incl",
        "uncased-context-excl",
        "uncased-bow",
        "cased-context-incl",
        "cased-context-excl",
        "cased-bow",
        "context-incl",
        "context-excl",
        "bow",
        "char-fofe",
        "char-cnn",
        "all-uncased",
        "all-cased",
        "all-word",
        "all-word+char-fofe",
        "all-word+char-cnn",
        "all",
    ];

    fn words(cased: WordFeatureSet, uncased: WordFeatureSet) -> Self {
        Self {
            cased,
            uncased,
            char_fofe: false,
            char_cnn: false,
        }
    }

    pub fn all() -> Self {
        Self {
            char_fofe: true,
            char_cnn: true,
            ..Self::all_word()
        }
    }

    pub fn all_word() -> Self {
        Self::words(WordFeatureSet::all(), WordFeatureSet::all())
    }

    pub fn preset(name: &str) -> Option<Self> {
        let none = WordFeatureSet::none();
        let sel = match name {
            "uncased-context-incl" => Self::words(none, WordFeatureSet::context_incl()),
            "uncased-context-excl" => Self::words(none, WordFeatureSet::context_excl()),
            "uncased-bow" => Self::words(none, WordFeatureSet::bow_only()),
            "cased-context-incl" => Self::words(WordFeatureSet::context_incl(), none),
            "cased-context-excl" => Self::words(WordFeatureSet::context_excl(), none),
            "cased-bow" => Self::words(WordFeatureSet::bow_only(), none),
            "context-incl" => Self::words(WordFeatureSet::context_incl(), WordFeatureSet::context_incl()),
            "context-excl" => Self::words(WordFeatureSet::context_excl(), WordFeatureSet::context_excl()),
            "bow" => Self::words(WordFeatureSet::bow_only(), WordFeatureSet::bow_only()),
            "char-fofe" => Self {
                char_fofe: true,
                ..Self::words(none, none)
            },
            "char-cnn" => Self {
                char_cnn: true,
                ..Self::words(none, none)
            },
            "all-uncased" => Self::words(none, WordFeatureSet::all()),
            "all-cased" => Self::words(WordFeatureSet::all(), none),
            "all-word" => Self::all_word(),
            "all-word+char-fofe" => Self {
                char_fofe: true,
                ..Self::all_word()
            },
            "all-word+char-cnn" => Self {
                char_cnn: true,
                ..Self::all_word()
            },
            "all" => Self::all(),
            _ => return None,
        };
        Some(sel)
    }

    /// Accepts a preset name or a comma-separated block list such as
    /// `cased.bow,uncased.left_excl,char.fofe,char.cnn`.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if let Some(sel) = Self::preset(text) {
            return Ok(sel);
        }
        let mut sel = Self::words(WordFeatureSet::none(), WordFeatureSet::none());
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "char.fofe" => sel.char_fofe = true,
                "char.cnn" => sel.char_cnn = true,
                _ => {
                    let (casing, feature) = item.split_once('.').ok_or_else(|| bad_feature(item))?;
                    let feature = WordFeature::ALL
                        .into_iter()
                        .find(|f| f.name() == feature)
                        .ok_or_else(|| bad_feature(item))?;
                    match casing {
                        "cased" => sel.cased.set(feature),
                        "uncased" => sel.uncased.set(feature),
                        _ => return Err(bad_feature(item)),
                    }
                }
            }
        }
        if sel.is_empty() {
            return Err(Error::InvalidParameter(format!("feature selection {text:?} enables nothing")));
        }
        Ok(sel)
    }

    pub fn is_empty(&self) -> bool {
        !self.cased.any() && !self.uncased.any() && !self.char_fofe && !self.char_cnn
    }
}

fn bad_feature(item: &str) -> Error {
    Error::InvalidParameter(format!(
        "unknown feature {item:?}; expected a preset ({}) or <cased|uncased>.<bow|left_incl|left_excl|right_incl|right_excl>, char.fofe, char.cnn",
        FeatureSelection::PRESETS.join(", ")
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    /// `(kernel height, number of kernels)` per group.
    pub groups: Vec<(usize, usize)>,
    pub activation: Activation,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            groups: vec![(2, 32), (3, 32), (4, 32)],
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub selection: FeatureSelection,
    pub word_dim: usize,
    pub char_dim: usize,
    pub word_alpha: Alpha,
    pub char_alpha: Alpha,
    pub cnn: CnnConfig,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            selection: FeatureSelection::all(),
            word_dim: 256,
            char_dim: 64,
            word_alpha: Alpha::new(0.5).expect("constant"),
            char_alpha: Alpha::new(0.8).expect("constant"),
            cnn: CnnConfig::default(),
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.selection.is_empty() {
            return Err(Error::InvalidParameter("no features enabled".into()));
        }
        if self.word_dim == 0 || self.char_dim == 0 {
            return Err(Error::InvalidParameter("embedding dimensions must be positive".into()));
        }
        if self.selection.char_cnn {
            if self.cnn.groups.is_empty() || self.cnn.groups.iter().any(|&(h, n)| h == 0 || n == 0) {
                return Err(Error::InvalidParameter(
                    "CNN groups need positive heights and kernel counts".into(),
                ));
            }
            if self.cnn.activation == Activation::Softmax {
                return Err(Error::InvalidParameter("CNN activation must be sigmoid or relu".into()));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> FeatureLayout {
        let mut segments = Vec::new();
        let mut offset = 0;
        let mut push = |kind: BlockKind, width: usize| {
            segments.push(Segment { kind, offset, width });
            offset += width;
        };
        for (table, set) in [(Table::Cased, self.selection.cased), (Table::Uncased, self.selection.uncased)] {
            for f in WordFeature::ALL {
                if set.contains(f) {
                    push(BlockKind::Word(table, f), self.word_dim);
                }
            }
        }
        if self.selection.char_fofe {
            push(BlockKind::CharFofeL2R, self.char_dim);
            push(BlockKind::CharFofeR2L, self.char_dim);
        }
        if self.selection.char_cnn {
            push(BlockKind::CharCnn, self.cnn.groups.iter().map(|&(_, n)| n).sum());
        }
        FeatureLayout {
            segments,
            total_width: offset,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Word(Table, WordFeature),
    CharFofeL2R,
    CharFofeR2L,
    CharCnn,
}

impl BlockKind {
    /// Projection table for sparse blocks; `None` for the CNN block.
    pub fn table(self) -> Option<Table> {
        match self {
            BlockKind::Word(t, _) => Some(t),
            BlockKind::CharFofeL2R | BlockKind::CharFofeR2L => Some(Table::Chars),
            BlockKind::CharCnn => None,
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockKind::Word(t, w) => write!(f, "{}.{}", t.name(), w.name()),
            BlockKind::CharFofeL2R => f.write_str("char.fofe_l2r"),
            BlockKind::CharFofeR2L => f.write_str("char.fofe_r2l"),
            BlockKind::CharCnn => f.write_str("char.cnn"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub kind: BlockKind,
    pub offset: usize,
    pub width: usize,
}

impl Segment {
    pub fn name(&self) -> String {
        self.kind.to_string()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.width
    }
}

/// Ordered, contiguous blocks covering `[0, total_width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLayout {
    pub segments: Vec<Segment>,
    pub total_width: usize,
}

impl FeatureLayout {
    pub fn segment(&self, kind: BlockKind) -> Option<&Segment> {
        self.segments.iter().find(|s| s.kind == kind)
    }
}

/// Sparse content of one block before projection.
#[derive(Clone, Debug, PartialEq)]
pub enum BlockInput {
    Sparse(SparseVector),
    /// Character ids for the CNN, padded to the tallest kernel.
    Chars(Vec<usize>),
}

/// Everything a consumer needs to compute one fragment's dense features;
/// blocks line up with the layout's segments.
#[derive(Clone, Debug, PartialEq)]
pub struct FragmentInput {
    pub blocks: Vec<BlockInput>,
}

#[derive(Clone, Debug)]
struct CasingCodes {
    ids: Vec<usize>,
    dim: usize,
    prefixes: Vec<FofeCode>,
    suffixes: Vec<FofeCode>,
}

impl CasingCodes {
    fn new(ids: Vec<usize>, dim: usize, set: WordFeatureSet, encoder: &Encoder) -> Self {
        let prefixes = if set.needs_prefixes() {
            encoder.prefixes_ids(&ids, dim)
        } else {
            Vec::new()
        };
        let suffixes = if set.needs_suffixes() {
            encoder.suffixes_ids(&ids, dim)
        } else {
            Vec::new()
        };
        Self {
            ids,
            dim,
            prefixes,
            suffixes,
        }
    }

    fn block(&self, f: WordFeature, start: usize, end: usize) -> SparseVector {
        let len = self.ids.len();
        match f {
            WordFeature::Bow => SparseVector::from_counts(&self.ids[start..end], self.dim),
            WordFeature::LeftIncl => self.prefixes[end - 1].vector().clone(),
            WordFeature::LeftExcl if start == 0 => SparseVector::zeros(self.dim),
            WordFeature::LeftExcl => self.prefixes[start - 1].vector().clone(),
            WordFeature::RightIncl => self.suffixes[start].vector().clone(),
            WordFeature::RightExcl if end == len => SparseVector::zeros(self.dim),
            WordFeature::RightExcl => self.suffixes[end].vector().clone(),
        }
    }
}

/// All FOFE codes of one sentence, computed in one pass per direction and
/// casing, from which any fragment's [`FragmentInput`] is sliced.
#[derive(Clone, Debug)]
pub struct SentenceCodes {
    len: usize,
    config: FeatureConfig,
    layout: FeatureLayout,
    cased: Option<CasingCodes>,
    uncased: Option<CasingCodes>,
    token_chars: Vec<Vec<usize>>,
    space_id: usize,
    pad_id: usize,
    char_dim: usize,
}

impl SentenceCodes {
    pub fn new(sentence: &Sentence, vocabs: &Vocabularies, config: &FeatureConfig) -> Self {
        let sel = config.selection;
        let word_encoder = Encoder::from_alpha(config.word_alpha);
        let cased = sel.cased.any().then(|| {
            CasingCodes::new(
                vocabs.cased.lookup_all(&sentence.tokens_norm),
                vocabs.cased.len(),
                sel.cased,
                &word_encoder,
            )
        });
        let uncased = sel.uncased.any().then(|| {
            CasingCodes::new(
                vocabs.uncased.lookup_all(&sentence.tokens_lower),
                vocabs.uncased.len(),
                sel.uncased,
                &word_encoder,
            )
        });
        let token_chars = if sel.char_fofe || sel.char_cnn {
            sentence
                .tokens_raw
                .iter()
                .map(|t| t.chars().map(|c| vocabs.chars.lookup_char(c)).collect())
                .collect()
        } else {
            Vec::new()
        };
        Self {
            len: sentence.len(),
            config: config.clone(),
            layout: config.layout(),
            cased,
            uncased,
            token_chars,
            space_id: vocabs.chars.lookup_char(' '),
            pad_id: vocabs.chars.lookup(PAD),
            char_dim: vocabs.chars.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn char_ids(&self, start: usize, end: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, chars) in self.token_chars[start..end].iter().enumerate() {
            if i > 0 {
                out.push(self.space_id);
            }
            out.extend_from_slice(chars);
        }
        out
    }

    pub fn fragment(&self, start: usize, end: usize) -> Result<FragmentInput> {
        if start >= end || end > self.len {
            return Err(Error::InvalidSpan {
                start,
                end,
                len: self.len,
            });
        }
        let char_encoder = Encoder::from_alpha(self.config.char_alpha);
        let chars = if self.token_chars.is_empty() {
            Vec::new()
        } else {
            self.char_ids(start, end)
        };
        let mut blocks = Vec::with_capacity(self.layout.segments.len());
        for seg in &self.layout.segments {
            let block = match seg.kind {
                BlockKind::Word(table, f) => {
                    let codes = match table {
                        Table::Cased => self.cased.as_ref(),
                        _ => self.uncased.as_ref(),
                    }
                    .expect("casing codes exist for enabled blocks");
                    BlockInput::Sparse(codes.block(f, start, end))
                }
                BlockKind::CharFofeL2R => BlockInput::Sparse(
                    char_encoder.encode_ids(chars.iter().copied(), self.char_dim).into_vector(),
                ),
                BlockKind::CharFofeR2L => BlockInput::Sparse(
                    char_encoder.encode_ids(chars.iter().rev().copied(), self.char_dim).into_vector(),
                ),
                BlockKind::CharCnn => {
                    let tallest = self.config.cnn.groups.iter().map(|&(h, _)| h).max().unwrap_or(1);
                    let mut padded = chars.clone();
                    padded.resize(padded.len().max(tallest), self.pad_id);
                    BlockInput::Chars(padded)
                }
            };
            blocks.push(block);
        }
        Ok(FragmentInput { blocks })
    }
}

/// A trainable `rows × dim` matrix that maps sparse codes to dense vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMatrix {
    pub values: Array2<f64>,
    pub trainable: bool,
}

impl ProjectionMatrix {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            values: Array2::zeros((rows, dim)),
            trainable: true,
        }
    }

    /// Uniform initialization in `±1/sqrt(dim)`.
    pub fn random<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim.max(1) as f64).sqrt();
        Self {
            values: Array2::from_shape_simple_fn((rows, dim), || rng.random_range(-bound..bound)),
            trainable: true,
        }
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// `out += code · M`, gathering only the rows the code touches.
    pub fn project_into(&self, code: &SparseVector, mut out: ArrayViewMut1<f64>) -> Result<()> {
        if code.dim() != self.rows() {
            return Err(Error::Shape {
                expected: format!("code over {} rows", self.rows()),
                got: format!("code over {}", code.dim()),
            });
        }
        for &(row, w) in code.entries() {
            out.scaled_add(w, &self.values.row(row));
        }
        Ok(())
    }

    pub fn project(&self, code: &SparseVector) -> Result<Array1<f64>> {
        let mut out = Array1::zeros(self.dim());
        self.project_into(code, out.view_mut())?;
        Ok(out)
    }

    /// Overwrites rows from a text embedding file (`<rows> <dim>` header, then
    /// `token v1 .. vd` per line). Tokens not in `vocab` are skipped; with
    /// `fold_case`, tokens are lowercased and the first occurrence wins.
    /// Returns the number of rows initialized.
    pub fn load_pretrained(&mut self, path: &Path, vocab: &Vocabulary, fold_case: bool) -> Result<usize> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let loc = |line: usize| format!("{}:{line}", path.display());
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse(loc(1), "missing header"))?;
        let mut fields = header.split_whitespace();
        let parse_usize = |s: Option<&str>| s.and_then(|s| s.parse::<usize>().ok());
        let (rows, dim) = match (parse_usize(fields.next()), parse_usize(fields.next())) {
            (Some(r), Some(d)) => (r, d),
            _ => return Err(Error::parse(loc(1), "header must be \"<rows> <dim>\"")),
        };
        if dim != self.dim() {
            return Err(Error::Shape {
                expected: format!("embedding dimension {}", self.dim()),
                got: format!("{dim} in {}", path.display()),
            });
        }
        let mut filled = vec![false; self.rows()];
        let mut seen = 0;
        let mut count = 0;
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            seen += 1;
            let mut parts = line.split_whitespace();
            let token = parts.next().expect("nonempty line");
            let values: Vec<f64> = parts
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(loc(i + 2), e.to_string()))?;
            if values.len() != dim {
                return Err(Error::parse(loc(i + 2), format!("expected {dim} values, found {}", values.len())));
            }
            let key = if fold_case { token.to_lowercase() } else { token.to_string() };
            if let Some(row) = vocab.get(&key) {
                if !filled[row] {
                    self.values.row_mut(row).assign(&Array1::from(values));
                    filled[row] = true;
                    count += 1;
                }
            }
        }
        if seen != rows {
            return Err(Error::parse(loc(1), format!("header announces {rows} rows, file has {seen}")));
        }
        Ok(count)
    }
}

/// Kernels of one height.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelGroup {
    /// `count × height × char_dim`.
    pub kernels: Array3<f64>,
}

impl KernelGroup {
    pub fn height(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn count(&self) -> usize {
        self.kernels.shape()[0]
    }
}

/// Character CNN: each kernel slides over the embedded character matrix and
/// the activations are max-pooled over positions.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnKernelGroup {
    pub groups: Vec<KernelGroup>,
    pub activation: Activation,
}

/// Winning window of each kernel, kept for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnTrace {
    /// `(window start, pre-activation)` per kernel in output order.
    pub winners: Vec<(usize, f64)>,
}

impl CnnKernelGroup {
    pub fn random<R: Rng + ?Sized>(config: &CnnConfig, char_dim: usize, rng: &mut R) -> Self {
        let groups = config
            .groups
            .iter()
            .map(|&(h, n)| {
                let bound = (6.0 / (h * char_dim + n) as f64).sqrt();
                KernelGroup {
                    kernels: Array3::from_shape_simple_fn((n, h, char_dim), || rng.random_range(-bound..bound)),
                }
            })
            .collect();
        Self {
            groups,
            activation: config.activation,
        }
    }

    pub fn output_width(&self) -> usize {
        self.groups.iter().map(KernelGroup::count).sum()
    }

    pub fn max_height(&self) -> usize {
        self.groups.iter().map(KernelGroup::height).max().unwrap_or(0)
    }

    /// Max-pooled kernel responses for a character id sequence at least as long
    /// as the tallest kernel.
    pub fn forward(&self, chars: &[usize], embedding: ArrayView2<f64>) -> Result<(Array1<f64>, CnnTrace)> {
        if chars.len() < self.max_height() {
            return Err(Error::InvalidParameter(format!(
                "character sequence of length {} is shorter than kernel height {}",
                chars.len(),
                self.max_height()
            )));
        }
        let mut out = Array1::zeros(self.output_width());
        let mut winners = Vec::with_capacity(self.output_width());
        let mut k = 0;
        for group in &self.groups {
            let h = group.height();
            for kernel in group.kernels.outer_iter() {
                let mut best = (0usize, f64::NEG_INFINITY);
                for start in 0..=chars.len() - h {
                    let mut z = 0.0;
                    for (a, row) in kernel.outer_iter().enumerate() {
                        z += row.dot(&embedding.row(chars[start + a]));
                    }
                    if z > best.1 {
                        best = (start, z);
                    }
                }
                // the activation is monotone, so the largest pre-activation wins
                out[k] = self.activation.apply_scalar(best.1);
                winners.push(best);
                k += 1;
            }
        }
        Ok((out, CnnTrace { winners }))
    }

    /// Accumulates gradients of the pooled outputs into kernel and character
    /// embedding gradients.
    pub fn backward(
        &self,
        chars: &[usize],
        embedding: ArrayView2<f64>,
        trace: &CnnTrace,
        grad_out: ndarray::ArrayView1<f64>,
        kernel_grads: &mut [Array3<f64>],
        char_rows: &mut BTreeMap<usize, Array1<f64>>,
    ) {
        let mut k = 0;
        for (g, group) in self.groups.iter().enumerate() {
            for (n, kernel) in group.kernels.outer_iter().enumerate() {
                let (start, z) = trace.winners[k];
                let dz = grad_out[k] * self.activation.derivative_from_input(z);
                k += 1;
                if dz == 0.0 {
                    continue;
                }
                for (a, frow) in kernel.outer_iter().enumerate() {
                    let c = chars[start + a];
                    kernel_grads[g]
                        .slice_mut(s![n, a, ..])
                        .scaled_add(dz, &embedding.row(c));
                    char_rows
                        .entry(c)
                        .or_insert_with(|| Array1::zeros(embedding.ncols()))
                        .scaled_add(dz, &frow);
                }
            }
        }
    }
}

/// All projection parameters of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub cased: ProjectionMatrix,
    pub uncased: ProjectionMatrix,
    /// Shared by the character FOFE blocks and the CNN.
    pub chars: ProjectionMatrix,
    pub cnn: Option<CnnKernelGroup>,
}

impl Embeddings {
    pub fn random<R: Rng + ?Sized>(config: &FeatureConfig, vocabs: [usize; 3], rng: &mut R) -> Self {
        Self {
            cased: ProjectionMatrix::random(vocabs[0], config.word_dim, rng),
            uncased: ProjectionMatrix::random(vocabs[1], config.word_dim, rng),
            chars: ProjectionMatrix::random(vocabs[2], config.char_dim, rng),
            cnn: config
                .selection
                .char_cnn
                .then(|| CnnKernelGroup::random(&config.cnn, config.char_dim, rng)),
        }
    }

    pub fn table(&self, t: Table) -> &ProjectionMatrix {
        match t {
            Table::Cased => &self.cased,
            Table::Uncased => &self.uncased,
            Table::Chars => &self.chars,
        }
    }

    pub fn table_mut(&mut self, t: Table) -> &mut ProjectionMatrix {
        match t {
            Table::Cased => &mut self.cased,
            Table::Uncased => &mut self.uncased,
            Table::Chars => &mut self.chars,
        }
    }

    pub fn vocab_sizes(&self) -> [usize; 3] {
        [self.cased.rows(), self.uncased.rows(), self.chars.rows()]
    }

    /// Writes the dense features of `input` into `out` (width
    /// `layout.total_width`). Returns the CNN trace when the layout has a CNN
    /// block.
    pub fn project_into(
        &self,
        layout: &FeatureLayout,
        input: &FragmentInput,
        mut out: ArrayViewMut1<f64>,
    ) -> Result<Option<CnnTrace>> {
        if input.blocks.len() != layout.segments.len() || out.len() != layout.total_width {
            return Err(Error::Shape {
                expected: format!("{} blocks / width {}", layout.segments.len(), layout.total_width),
                got: format!("{} blocks / width {}", input.blocks.len(), out.len()),
            });
        }
        out.fill(0.0);
        let mut trace = None;
        for (seg, block) in layout.segments.iter().zip(&input.blocks) {
            let dst = out.slice_mut(s![seg.range()]);
            match (seg.kind.table(), block) {
                (Some(t), BlockInput::Sparse(code)) => self.table(t).project_into(code, dst)?,
                (None, BlockInput::Chars(chars)) => {
                    let cnn = self
                        .cnn
                        .as_ref()
                        .ok_or_else(|| Error::InvalidParameter("model has no CNN kernels".into()))?;
                    let (y, tr) = cnn.forward(chars, self.chars.values.view())?;
                    let mut dst = dst;
                    dst.assign(&y);
                    trace = Some(tr);
                }
                _ => {
                    return Err(Error::Shape {
                        expected: format!("input matching block {}", seg.kind),
                        got: "mismatched block input".into(),
                    })
                }
            }
        }
        Ok(trace)
    }

    pub fn project(&self, layout: &FeatureLayout, input: &FragmentInput) -> Result<Array1<f64>> {
        let mut out = Array1::zeros(layout.total_width);
        self.project_into(layout, input, out.view_mut())?;
        Ok(out)
    }
}

/// Dense feature vector of one fragment.
pub fn assemble(
    sentence: &Sentence,
    start: usize,
    end: usize,
    config: &FeatureConfig,
    vocabs: &Vocabularies,
    embeddings: &Embeddings,
) -> Result<Array1<f64>> {
    let codes = SentenceCodes::new(sentence, vocabs, config);
    let input = codes.fragment(start, end)?;
    embeddings.project(&config.layout(), &input)
}

/// The ten projected word-level blocks of a fragment (both casings, all five
/// features), whatever the config's selection.
pub fn word_features(
    sentence: &Sentence,
    start: usize,
    end: usize,
    config: &FeatureConfig,
    vocabs: &Vocabularies,
    embeddings: &Embeddings,
) -> Result<(Array1<f64>, FeatureLayout)> {
    let config = FeatureConfig {
        selection: FeatureSelection::all_word(),
        ..config.clone()
    };
    let v = assemble(sentence, start, end, &config, vocabs, embeddings)?;
    Ok((v, config.layout()))
}

fn fragment_char_ids(text: &str, char_vocab: &Vocabulary) -> Result<Vec<usize>> {
    if text.is_empty() {
        return Err(Error::InvalidSpan { start: 0, end: 0, len: 0 });
    }
    Ok(text.chars().map(|c| char_vocab.lookup_char(c)).collect())
}

/// Projected left-to-right and right-to-left character FOFE codes of a
/// fragment's text, concatenated.
pub fn char_fofe_features(
    text: &str,
    char_vocab: &Vocabulary,
    projection: &ProjectionMatrix,
    alpha: Alpha,
) -> Result<Array1<f64>> {
    let ids = fragment_char_ids(text, char_vocab)?;
    let enc = Encoder::from_alpha(alpha);
    let l2r = projection.project(enc.encode_ids(ids.iter().copied(), char_vocab.len()).vector())?;
    let r2l = projection.project(enc.encode_ids(ids.iter().rev().copied(), char_vocab.len()).vector())?;
    Ok(ndarray::concatenate![ndarray::Axis(0), l2r, r2l])
}

/// Character CNN output for a fragment's text; short texts are padded with
/// `<pad>` up to the tallest kernel.
pub fn char_cnn_features(
    text: &str,
    char_vocab: &Vocabulary,
    embedding: &ProjectionMatrix,
    kernels: &CnnKernelGroup,
) -> Result<Array1<f64>> {
    let mut ids = fragment_char_ids(text, char_vocab)?;
    ids.resize(ids.len().max(kernels.max_height()), char_vocab.lookup(PAD));
    Ok(kernels.forward(&ids, embedding.values.view())?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocab;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sentence(text: &str) -> Sentence {
        Sentence::new("d", text.split(' ').map(String::from).collect(), vec![]).unwrap()
    }

    fn small_config(selection: FeatureSelection) -> FeatureConfig {
        FeatureConfig {
            selection,
            word_dim: 4,
            char_dim: 3,
            cnn: CnnConfig {
                groups: vec![(2, 2), (3, 1)],
                activation: Activation::Relu,
            },
            ..FeatureConfig::default()
        }
    }

    #[test]
    fn layout_is_contiguous() {
        for name in FeatureSelection::PRESETS {
            let cfg = small_config(FeatureSelection::preset(name).unwrap());
            let layout = cfg.layout();
            let mut offset = 0;
            for seg in &layout.segments {
                assert_eq!(seg.offset, offset);
                offset += seg.width;
            }
            assert_eq!(offset, layout.total_width);
        }
    }

    #[test]
    fn preset_block_counts() {
        let word = small_config(FeatureSelection::preset("all-word").unwrap()).layout();
        assert_eq!(word.segments.len(), 10);
        let all = small_config(FeatureSelection::all()).layout();
        assert_eq!(all.segments.len(), 13);
        assert_eq!(all.total_width, 10 * 4 + 2 * 3 + 3);
    }

    #[test]
    fn selection_parsing() {
        let sel = FeatureSelection::parse("cased.bow, uncased.left_excl,char.cnn").unwrap();
        assert!(sel.cased.bow && sel.uncased.left_excl && sel.char_cnn);
        assert!(!sel.char_fofe && !sel.cased.left_excl);
        assert!(FeatureSelection::parse("cased.nope").is_err());
        assert!(FeatureSelection::parse("").is_err());
        assert_eq!(FeatureSelection::parse("all").unwrap(), FeatureSelection::all());
    }

    #[test]
    fn figure_contexts() {
        let s = sentence("puck from space for the Toronto Maple Leafs ' home opener against");
        let vocabs = build_vocab(std::slice::from_ref(&s), 1).unwrap();
        let cfg = small_config(FeatureSelection::all_word());
        let codes = SentenceCodes::new(&s, &vocabs, &cfg);
        let input = codes.fragment(5, 8).unwrap();
        let layout = cfg.layout();
        let block = |kind| {
            let i = layout.segments.iter().position(|seg| seg.kind == kind).unwrap();
            match &input.blocks[i] {
                BlockInput::Sparse(v) => v.clone(),
                _ => unreachable!(),
            }
        };
        let enc = Encoder::new(0.5).unwrap();
        let left: Vec<&str> = "puck from space for the Toronto Maple Leafs".split(' ').collect();
        assert_eq!(
            &block(BlockKind::Word(Table::Cased, WordFeature::LeftIncl)),
            enc.encode(&left, &vocabs.cased).vector()
        );
        let right: Vec<&str> = "against opener home ' Leafs Maple Toronto".split(' ').collect();
        assert_eq!(
            &block(BlockKind::Word(Table::Cased, WordFeature::RightIncl)),
            enc.encode(&right, &vocabs.cased).vector()
        );
        let right_excl: Vec<&str> = "against opener home '".split(' ').collect();
        assert_eq!(
            &block(BlockKind::Word(Table::Cased, WordFeature::RightExcl)),
            enc.encode(&right_excl, &vocabs.cased).vector()
        );
        let left_excl: Vec<&str> = "puck from space for the".split(' ').collect();
        assert_eq!(
            &block(BlockKind::Word(Table::Uncased, WordFeature::LeftExcl)),
            enc.encode(&left_excl, &vocabs.uncased).vector()
        );
    }

    #[test]
    fn whole_sentence_fragment_has_empty_exclusive_contexts() {
        let s = sentence("Toronto");
        let vocabs = build_vocab(std::slice::from_ref(&s), 1).unwrap();
        let cfg = small_config(FeatureSelection::all_word());
        let input = SentenceCodes::new(&s, &vocabs, &cfg).fragment(0, 1).unwrap();
        for (seg, block) in cfg.layout().segments.iter().zip(&input.blocks) {
            if let (BlockKind::Word(_, WordFeature::LeftExcl | WordFeature::RightExcl), BlockInput::Sparse(v)) =
                (seg.kind, block)
            {
                assert!(v.is_zero(), "{}", seg.name());
            }
        }
    }

    #[test]
    fn bow_counts_multiplicity() {
        let s = sentence("A B A");
        let vocabs = build_vocab(std::slice::from_ref(&s), 1).unwrap();
        let cfg = small_config(FeatureSelection::preset("cased-bow").unwrap());
        let input = SentenceCodes::new(&s, &vocabs, &cfg).fragment(0, 3).unwrap();
        let BlockInput::Sparse(v) = &input.blocks[0] else { unreachable!() };
        // brute-force count over the raw tokens
        for (i, sym) in vocabs.cased.symbols().iter().enumerate() {
            let count = s.tokens_raw.iter().filter(|t| *t == sym).count() as f64;
            assert_eq!(v.get(i), count);
        }
        assert_eq!(v.get(vocabs.cased.lookup("A")), 2.0);
        assert_eq!(v.get(vocabs.cased.lookup("B")), 1.0);
    }

    #[test]
    fn invalid_span() {
        let s = sentence("a b");
        let vocabs = build_vocab(std::slice::from_ref(&s), 1).unwrap();
        let codes = SentenceCodes::new(&s, &vocabs, &small_config(FeatureSelection::all()));
        assert!(matches!(codes.fragment(1, 1), Err(Error::InvalidSpan { .. })));
        assert!(matches!(codes.fragment(0, 3), Err(Error::InvalidSpan { .. })));
    }

    #[test]
    fn char_fofe_raw_codes() {
        let v = Vocabulary::with_unk(["a", "b"]);
        let identity = ProjectionMatrix {
            values: Array2::eye(3),
            trainable: false,
        };
        let a = Alpha::new(0.8).unwrap();
        let out = char_fofe_features("ab", &v, &identity, a).unwrap();
        assert_eq!(out.to_vec(), vec![0.8, 1.0, 0.0, 1.0, 0.8, 0.0]);
        let pal = char_fofe_features("aba", &v, &identity, a).unwrap();
        assert_eq!(pal.slice(s![..3]), pal.slice(s![3..]));
        assert!(char_fofe_features("", &v, &identity, a).is_err());
    }

    #[test]
    fn multi_word_fragment_is_one_char_sequence() {
        let s = sentence("the Toronto Maple Leafs");
        let vocabs = build_vocab(std::slice::from_ref(&s), 1).unwrap();
        let cfg = small_config(FeatureSelection::preset("char-fofe").unwrap());
        let input = SentenceCodes::new(&s, &vocabs, &cfg).fragment(1, 4).unwrap();
        let enc = Encoder::from_alpha(cfg.char_alpha);
        let ids: Vec<usize> = "Toronto Maple Leafs".chars().map(|c| vocabs.chars.lookup_char(c)).collect();
        assert_eq!(input.blocks[0], BlockInput::Sparse(enc.encode_ids(ids.clone(), vocabs.chars.len()).into_vector()));
        assert_eq!(
            input.blocks[1],
            BlockInput::Sparse(enc.encode_ids(ids.into_iter().rev(), vocabs.chars.len()).into_vector())
        );
    }

    fn cnn(groups: Vec<(usize, usize)>, dim: usize, seed: u64) -> CnnKernelGroup {
        CnnKernelGroup::random(
            &CnnConfig {
                groups,
                activation: Activation::Relu,
            },
            dim,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
    }

    #[test]
    fn cnn_single_window() {
        let k = cnn(vec![(3, 1)], 2, 3);
        let m = Array2::from_shape_fn((4, 2), |(i, j)| (i * 2 + j) as f64 * 0.1 - 0.2);
        let (y, tr) = k.forward(&[0, 1, 2], m.view()).unwrap();
        let f = k.groups[0].kernels.slice(s![0, .., ..]);
        let mut z = 0.0;
        for a in 0..3 {
            for d in 0..2 {
                z += f[[a, d]] * m[[a, d]];
            }
        }
        assert_eq!(tr.winners, vec![(0, z)]);
        assert!((y[0] - z.max(0.0)).abs() < 1e-15);
    }

    #[test]
    fn cnn_zero_embedding_relu_is_zero() {
        let k = cnn(vec![(2, 3), (3, 2)], 4, 1);
        let (y, _) = k.forward(&[0, 1, 2, 1], Array2::zeros((3, 4)).view()).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cnn_one_by_one_kernel_against_enumeration() {
        let mut k = cnn(vec![(1, 1)], 3, 0);
        k.groups[0].kernels = Array3::from_shape_vec((1, 1, 3), vec![1.0, -2.0, 0.5]).unwrap();
        let m = Array2::eye(3);
        let (y, _) = k.forward(&[2, 0, 1], m.view()).unwrap();
        let per_position: Vec<f64> = [2usize, 0, 1]
            .iter()
            .map(|&c| (0..3).map(|d| k.groups[0].kernels[[0, 0, d]] * m[[c, d]]).sum::<f64>().max(0.0))
            .collect();
        let expected = per_position.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(y[0], expected);
        assert_eq!(y[0], 1.0);
    }

    #[test]
    fn cnn_pads_short_fragments() {
        let s = sentence("a");
        let vocabs = build_vocab(std::slice::from_ref(&s), 1).unwrap();
        let k = cnn(vec![(2, 2), (4, 1)], 3, 9);
        let emb = ProjectionMatrix::random(vocabs.chars.len(), 3, &mut ChaCha8Rng::seed_from_u64(2));
        let y = char_cnn_features("a", &vocabs.chars, &emb, &k).unwrap();
        assert_eq!(y.len(), 3);
        let cfg = small_config(FeatureSelection::preset("char-cnn").unwrap());
        let input = SentenceCodes::new(&s, &vocabs, &cfg).fragment(0, 1).unwrap();
        let pad = vocabs.chars.lookup(PAD);
        assert_eq!(input.blocks[0], BlockInput::Chars(vec![vocabs.chars.lookup_char('a'), pad, pad]));
    }

    #[test]
    fn pretrained_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        std::fs::write(&path, "3 2\nToronto 1 2\ntoronto 3 4\nzzz 5 6\n").unwrap();
        let vocab = Vocabulary::with_unk(["toronto", "x"]);
        let mut m = ProjectionMatrix::zeros(vocab.len(), 2);
        assert_eq!(m.load_pretrained(&path, &vocab, true).unwrap(), 1);
        assert_eq!(m.values.row(0).to_vec(), vec![1.0, 2.0]);
        assert_eq!(m.values.row(1).to_vec(), vec![0.0, 0.0]);

        std::fs::write(&path, "1 3\nx 1 2 3\n").unwrap();
        assert!(matches!(m.load_pretrained(&path, &vocab, false), Err(Error::Shape { .. })));
        std::fs::write(&path, "2 2\nx 1 2\n").unwrap();
        assert!(m.load_pretrained(&path, &vocab, false).is_err());
    }
}

//! Radical/structure captions: token vocabulary, tree form, and the brace
//! grammar linking the two.
//!
//! A caption is either a single radical token or a structure token followed
//! by its children wrapped in braces, e.g. `stl { r1 r2 }`. Children may be
//! captions themselves.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const SOS: &str = "<sos>";
pub const EOS: &str = "<eos>";
pub const OPEN: &str = "{";
pub const CLOSE: &str = "}";
pub const SOS_INDEX: usize = 0;
pub const EOS_INDEX: usize = 1;

/// Spatial arrangement of a node's children.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureKind {
    /// left-right
    A,
    /// top-bottom
    D,
    /// top-left surround
    Stl,
    /// top-right surround
    Str,
    /// bottom-left surround
    Sbl,
    /// left surround
    Sl,
    /// bottom surround
    Sb,
    /// top surround
    St,
    /// full surround
    S,
    /// within
    W,
}

impl StructureKind {
    pub const ALL: [StructureKind; 10] = [
        StructureKind::A,
        StructureKind::D,
        StructureKind::Stl,
        StructureKind::Str,
        StructureKind::Sbl,
        StructureKind::Sl,
        StructureKind::Sb,
        StructureKind::St,
        StructureKind::S,
        StructureKind::W,
    ];

    pub fn token(self) -> &'static str {
        match self {
            StructureKind::A => "a",
            StructureKind::D => "d",
            StructureKind::Stl => "stl",
            StructureKind::Str => "str",
            StructureKind::Sbl => "sbl",
            StructureKind::Sl => "sl",
            StructureKind::Sb => "sb",
            StructureKind::St => "st",
            StructureKind::S => "s",
            StructureKind::W => "w",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.token() == token)
    }

    /// Left-right and top-bottom admit any number of parts; the surround
    /// and within kinds always pair an outer part with an inner one.
    pub fn accepts_children(self, n: usize) -> bool {
        match self {
            StructureKind::A | StructureKind::D => n >= 2,
            _ => n == 2,
        }
    }

    pub fn is_stacking(self) -> bool {
        matches!(self, StructureKind::A | StructureKind::D)
    }
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// What went wrong while reading a caption, and where (token index; equal
/// to the token count when input ended early).
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CaptionError {
    #[error("empty caption")]
    Empty,
    #[error("token {pos}: unknown token {token:?}")]
    UnknownToken { pos: usize, token: String },
    #[error("token {pos}: reserved token {token:?} inside caption")]
    Reserved { pos: usize, token: String },
    #[error("token {pos}: structure {kind} must be followed by \"{{\"")]
    MissingOpen { pos: usize, kind: StructureKind },
    #[error("token {pos}: unbalanced braces")]
    Unbalanced { pos: usize },
    #[error("token {pos}: \"{{\" without a structure token")]
    StrayOpen { pos: usize },
    #[error("token {pos}: structure {kind} cannot take {count} children")]
    Arity {
        pos: usize,
        kind: StructureKind,
        count: usize,
    },
    #[error("token {pos}: trailing tokens after a complete caption")]
    Trailing { pos: usize },
    #[error("index {0} outside the vocabulary")]
    UnknownIndex(usize),
    #[error("vocabulary line {line}: {msg}")]
    VocabularyFormat { line: usize, msg: String },
}

impl CaptionError {
    /// Token position the error refers to, when it has one.
    pub fn position(&self) -> Option<usize> {
        match self {
            CaptionError::UnknownToken { pos, .. }
            | CaptionError::Reserved { pos, .. }
            | CaptionError::MissingOpen { pos, .. }
            | CaptionError::Unbalanced { pos }
            | CaptionError::StrayOpen { pos }
            | CaptionError::Arity { pos, .. }
            | CaptionError::Trailing { pos } => Some(*pos),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum CaptionTree {
    Leaf(String),
    Node {
        kind: StructureKind,
        children: Vec<CaptionTree>,
    },
}

impl CaptionTree {
    pub fn leaf(token: impl Into<String>) -> Self {
        CaptionTree::Leaf(token.into())
    }

    pub fn node(kind: StructureKind, children: Vec<CaptionTree>) -> Self {
        CaptionTree::Node { kind, children }
    }

    /// Radical tokens in pre-order (writing order).
    pub fn leaves(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            CaptionTree::Leaf(t) => out.push(t),
            CaptionTree::Node { children, .. } => {
                children.iter().for_each(|c| c.collect_leaves(out))
            }
        }
    }

    pub fn internal_nodes(&self) -> usize {
        match self {
            CaptionTree::Leaf(_) => 0,
            CaptionTree::Node { children, .. } => {
                1 + children
                    .iter()
                    .map(CaptionTree::internal_nodes)
                    .sum::<usize>()
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            CaptionTree::Leaf(_) => 0,
            CaptionTree::Node { children, .. } => {
                1 + children.iter().map(CaptionTree::depth).max().unwrap_or(0)
            }
        }
    }

    /// Pre-order token emission: `kind { children... }`, leaves as themselves.
    pub fn serialize(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.emit(&mut out);
        out
    }

    fn emit(&self, out: &mut Vec<String>) {
        match self {
            CaptionTree::Leaf(t) => out.push(t.clone()),
            CaptionTree::Node { kind, children } => {
                out.push(kind.token().to_string());
                out.push(OPEN.to_string());
                children.iter().for_each(|c| c.emit(out));
                out.push(CLOSE.to_string());
            }
        }
    }
}

impl fmt::Display for CaptionTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize().join(" "))
    }
}

/// Bijection between tokens and output indices.
///
/// Layout: `<sos>`, `<eos>`, the ten structure tokens, `{`, `}`, then the
/// radicals in the order given.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const FIXED: usize = 14;

    pub fn with_radicals<I, S>(radicals: I) -> Result<Self, CaptionError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = vec![SOS.into(), EOS.into()];
        tokens.extend(StructureKind::ALL.iter().map(|k| k.token().to_string()));
        tokens.push(OPEN.into());
        tokens.push(CLOSE.into());
        tokens.extend(radicals.into_iter().map(Into::into));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self, CaptionError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(CaptionError::VocabularyFormat {
                    line: i,
                    msg: format!("token {t:?} is empty or contains whitespace"),
                });
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(CaptionError::VocabularyFormat {
                    line: i,
                    msg: format!("duplicate token {t:?}"),
                });
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Reads the one-token-per-line file format; the line number is the index.
    pub fn parse_file(text: &str) -> Result<Self, CaptionError> {
        let tokens: Vec<String> = text
            .lines()
            .map(|l| l.trim_end_matches('\r').to_string())
            .collect();
        let vocab = Self::from_tokens(tokens)?;
        let fixed = Self::with_radicals(Vec::<String>::new())?;
        for (i, expected) in fixed.tokens.iter().enumerate() {
            match vocab.tokens.get(i) {
                Some(t) if t == expected => {}
                other => {
                    return Err(CaptionError::VocabularyFormat {
                        line: i,
                        msg: format!("expected {expected:?}, found {other:?}"),
                    })
                }
            }
        }
        Ok(vocab)
    }

    pub fn to_file_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    /// Hex SHA-256 of the file form; checkpoints record it.
    pub fn hash(&self) -> String {
        crate::numcore::checkpoint::sha256_hex(self.to_file_text().as_bytes())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn radicals(&self) -> &[String] {
        &self.tokens[Self::FIXED..]
    }

    pub fn is_radical(&self, token: &str) -> bool {
        self.index_of(token).is_some_and(|i| i >= Self::FIXED)
    }
}

/// Parses a token list into the unique tree whose serialization it is.
pub fn parse<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> Result<CaptionTree, CaptionError> {
    if tokens.is_empty() {
        return Err(CaptionError::Empty);
    }
    let mut parser = Parser {
        tokens,
        vocab,
        pos: 0,
    };
    let tree = parser.tree()?;
    if parser.pos < tokens.len() {
        let pos = parser.pos;
        return Err(if tokens[pos].as_ref() == CLOSE {
            CaptionError::Unbalanced { pos }
        } else {
            CaptionError::Trailing { pos }
        });
    }
    Ok(tree)
}

struct Parser<'a, S> {
    tokens: &'a [S],
    vocab: &'a Vocabulary,
    pos: usize,
}

impl<S: AsRef<str>> Parser<'_, S> {
    fn tree(&mut self) -> Result<CaptionTree, CaptionError> {
        let pos = self.pos;
        let Some(tok) = self.tokens.get(pos).map(AsRef::as_ref) else {
            return Err(CaptionError::Unbalanced { pos });
        };
        self.pos += 1;
        if let Some(kind) = StructureKind::from_token(tok) {
            if self.tokens.get(self.pos).map(AsRef::as_ref) != Some(OPEN) {
                return Err(CaptionError::MissingOpen {
                    pos: self.pos,
                    kind,
                });
            }
            let open = self.pos;
            self.pos += 1;
            let mut children = Vec::new();
            loop {
                match self.tokens.get(self.pos).map(AsRef::as_ref) {
                    None => return Err(CaptionError::Unbalanced { pos: open }),
                    Some(CLOSE) => {
                        self.pos += 1;
                        break;
                    }
                    Some(_) => children.push(self.tree()?),
                }
            }
            if !kind.accepts_children(children.len()) {
                return Err(CaptionError::Arity {
                    pos,
                    kind,
                    count: children.len(),
                });
            }
            return Ok(CaptionTree::Node { kind, children });
        }
        match tok {
            OPEN => Err(CaptionError::StrayOpen { pos }),
            CLOSE => Err(CaptionError::Unbalanced { pos }),
            SOS | EOS => Err(CaptionError::Reserved {
                pos,
                token: tok.to_string(),
            }),
            t if self.vocab.is_radical(t) => Ok(CaptionTree::Leaf(t.to_string())),
            t => Err(CaptionError::UnknownToken {
                pos,
                token: t.to_string(),
            }),
        }
    }
}

/// Token indices with `<eos>` appended.
pub fn encode<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> Result<Vec<usize>, CaptionError> {
    if tokens.is_empty() {
        return Err(CaptionError::Empty);
    }
    let mut out = tokens
        .iter()
        .enumerate()
        .map(|(pos, t)| match vocab.index_of(t.as_ref()) {
            Some(SOS_INDEX) | Some(EOS_INDEX) => Err(CaptionError::Reserved {
                pos,
                token: t.as_ref().to_string(),
            }),
            Some(i) => Ok(i),
            None => Err(CaptionError::UnknownToken {
                pos,
                token: t.as_ref().to_string(),
            }),
        })
        .collect::<Result<Vec<_>, _>>()?;
    out.push(EOS_INDEX);
    Ok(out)
}

/// Tokens for `indices`, stopping at the first `<eos>`.
pub fn decode(indices: &[usize], vocab: &Vocabulary) -> Result<Vec<String>, CaptionError> {
    indices
        .iter()
        .take_while(|&&i| i != EOS_INDEX)
        .map(|&i| {
            vocab
                .token(i)
                .map(str::to_string)
                .ok_or(CaptionError::UnknownIndex(i))
        })
        .collect()
}

fn leaf_tokens<S: AsRef<str>>(caption: &[S]) -> impl Iterator<Item = &str> {
    caption
        .iter()
        .map(AsRef::as_ref)
        .filter(|t| StructureKind::from_token(t).is_none() && *t != OPEN && *t != CLOSE)
}

/// Outcome of [`radical_coverage`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageReport {
    pub covered: bool,
    pub missing: BTreeSet<String>,
}

/// Whether every radical used by `test` captions also appears in `train`.
pub fn radical_coverage<S: AsRef<str>>(train: &[Vec<S>], test: &[Vec<S>]) -> CoverageReport {
    let seen: BTreeSet<&str> = train.iter().flat_map(|c| leaf_tokens(c)).collect();
    let missing: BTreeSet<String> = test
        .iter()
        .flat_map(|c| leaf_tokens(c))
        .filter(|t| !seen.contains(t))
        .map(str::to_string)
        .collect();
    CoverageReport {
        covered: missing.is_empty(),
        missing,
    }
}

/// Random caption tree over `radicals` and `kinds`, at most `max_depth`
/// structure levels deep. Stacking kinds occasionally get three parts.
pub fn random_tree<R: Rng>(
    rng: &mut R,
    radicals: &[String],
    kinds: &[StructureKind],
    max_depth: usize,
) -> CaptionTree {
    if max_depth == 0 || kinds.is_empty() || rng.random_bool(0.3) {
        return CaptionTree::Leaf(radicals.choose(rng).expect("non-empty radicals").clone());
    }
    let kind = *kinds.choose(rng).expect("non-empty kinds");
    let n = if kind.is_stacking() && rng.random_bool(0.2) {
        3
    } else {
        2
    };
    let children = (0..n)
        .map(|_| random_tree(rng, radicals, kinds, max_depth - 1))
        .collect();
    CaptionTree::Node { kind, children }
}

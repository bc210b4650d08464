//! Words over the alphabet `{1, …, d}`.
//!
//! Every matrix in the crate (β, Malliavin, Gram) indexes its rows and
//! columns by the order produced by [`enumerate`]: shorter words first, then
//! lexicographic on letters.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::{Error, Result};

/// A finite sequence of letters in `1..=d`. The empty word is `()`.
#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct Word(Vec<u8>);

impl Word {
    pub fn empty() -> Self {
        Word(Vec::new())
    }

    pub fn letter(i: u8) -> Self {
        assert!(i >= 1, "letters start at 1");
        Word(vec![i])
    }

    /// Builds a word, rejecting the letter 0.
    pub fn new(letters: Vec<u8>) -> Result<Self> {
        if letters.iter().any(|&l| l == 0) {
            return Err(Error::Domain("word letters must be >= 1".into()));
        }
        Ok(Word(letters))
    }

    pub fn letters(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `self ∗ other`.
    pub fn concat(&self, other: &Word) -> Word {
        let mut letters = Vec::with_capacity(self.len() + other.len());
        letters.extend_from_slice(&self.0);
        letters.extend_from_slice(&other.0);
        Word(letters)
    }

    /// `self ∗ (j)`.
    pub fn push(&self, j: u8) -> Word {
        let mut letters = self.0.clone();
        letters.push(j);
        Word(letters)
    }

    /// True when every letter lies in `1..=d`.
    pub fn fits_alphabet(&self, d: usize) -> bool {
        self.0.iter().all(|&l| l >= 1 && (l as usize) <= d)
    }

    /// If `self = prefix ∗ K`, returns `K`.
    pub fn strip_prefix(&self, prefix: &Word) -> Option<Word> {
        self.0.strip_prefix(prefix.letters()).map(|rest| Word(rest.to_vec()))
    }
}

impl Ord for Word {
    fn cmp(&self, other: &Self) -> Ordering {
        self.len().cmp(&other.len()).then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for Word {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (k, l) in self.0.iter().enumerate() {
            if k > 0 {
                f.write_str(",")?;
            }
            write!(f, "{l}")?;
        }
        f.write_str(")")
    }
}

impl fmt::Debug for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl serde::Serialize for Word {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl FromStr for Word {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse {
            line: 0,
            msg: format!("invalid word {s:?}"),
        };
        let inner = s
            .trim()
            .strip_prefix('(')
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(bad)?;
        if inner.trim().is_empty() {
            return Ok(Word::empty());
        }
        let letters = inner
            .split(',')
            .map(|t| t.trim().parse::<u8>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        Word::new(letters).map_err(|_| bad())
    }
}

/// All words of length at most `m` over `{1..d}`, length-then-lexicographic.
pub fn enumerate(d: usize, m: usize, include_empty: bool) -> Vec<Word> {
    assert!(d >= 1 && d < 256, "alphabet size must be in 1..256");
    let mut out = Vec::new();
    if include_empty {
        out.push(Word::empty());
    }
    let mut level = vec![Word::empty()];
    for _ in 0..m {
        let mut next = Vec::with_capacity(level.len() * d);
        for w in &level {
            for j in 1..=d as u8 {
                next.push(w.push(j));
            }
        }
        out.extend(next.iter().cloned());
        level = next;
    }
    out
}

/// A fixed ordered list of words with constant-time index lookup.
///
/// Indices are computed arithmetically from the base-`d` code of a word, so
/// the basis must be a full [`enumerate`] range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordBasis {
    d: usize,
    max_len: usize,
    include_empty: bool,
    words: Vec<Word>,
    // offsets[k] = index of the first word of length k
    offsets: Vec<usize>,
}

impl WordBasis {
    pub fn new(d: usize, max_len: usize, include_empty: bool) -> Self {
        let words = enumerate(d, max_len, include_empty);
        let mut offsets = Vec::with_capacity(max_len + 2);
        let mut acc = 0usize;
        for k in 0..=max_len + 1 {
            offsets.push(acc);
            if k > 0 || include_empty {
                acc += d.pow(k as u32);
            }
        }
        WordBasis {
            d,
            max_len,
            include_empty,
            words,
            offsets,
        }
    }

    pub fn alphabet(&self) -> usize {
        self.d
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn includes_empty(&self) -> bool {
        self.include_empty
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[Word] {
        &self.words
    }

    pub fn word(&self, idx: usize) -> &Word {
        &self.words[idx]
    }

    /// Index of the first word of length `k`.
    pub fn offset(&self, k: usize) -> usize {
        self.offsets[k]
    }

    /// Base-`d` code of a word (letters shifted to `0..d`).
    pub fn code(&self, w: &Word) -> usize {
        w.letters()
            .iter()
            .fold(0usize, |acc, &l| acc * self.d + (l as usize - 1))
    }

    pub fn index_of(&self, w: &Word) -> Option<usize> {
        if w.len() > self.max_len || !w.fits_alphabet(self.d) {
            return None;
        }
        if w.is_empty() && !self.include_empty {
            return None;
        }
        Some(self.offsets[w.len()] + self.code(w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(s: &str) -> Word {
        s.parse().unwrap()
    }

    #[test]
    fn concat_examples() {
        assert_eq!(w("(1,2)").concat(&w("(3)")), w("(1,2,3)"));
        assert_eq!(Word::empty().concat(&w("(2)")), w("(2)"));
        assert_eq!(w("(1)").concat(&Word::empty()), w("(1)"));
    }

    #[test]
    fn enumerate_examples() {
        let words = enumerate(2, 2, false);
        let shown: Vec<String> = words.iter().map(|w| w.to_string()).collect();
        assert_eq!(shown, ["(1)", "(2)", "(1,1)", "(1,2)", "(2,1)", "(2,2)"]);
        assert_eq!(enumerate(1, 0, true), vec![Word::empty()]);
        assert_eq!(enumerate(3, 1, false), vec![w("(1)"), w("(2)"), w("(3)")]);
    }

    #[test]
    fn enumeration_sizes() {
        for d in 1..=3usize {
            for m in 0..=4usize {
                let expected: usize = (1..=m).map(|k| d.pow(k as u32)).sum();
                assert_eq!(enumerate(d, m, false).len(), expected);
                assert_eq!(enumerate(d, m, true).len(), expected + 1);
            }
        }
    }

    #[test]
    fn enumeration_is_sorted_by_ord() {
        let words = enumerate(3, 3, true);
        let mut sorted = words.clone();
        sorted.sort();
        assert_eq!(words, sorted);
    }

    #[test]
    fn serialization() {
        assert_eq!(Word::empty().to_string(), "()");
        assert_eq!(w("(1,2,1)").to_string(), "(1,2,1)");
        assert_eq!(w("( 1, 2 )"), w("(1,2)"));
        assert!("(0)".parse::<Word>().is_err());
        assert!("1,2".parse::<Word>().is_err());
        assert_eq!(w("()"), Word::empty());
    }

    #[test]
    fn basis_index_matches_enumeration() {
        for &(d, m, e) in &[(1, 3, true), (2, 3, false), (3, 2, true), (2, 4, true)] {
            let basis = WordBasis::new(d, m, e);
            for (i, word) in basis.words().iter().enumerate() {
                assert_eq!(basis.index_of(word), Some(i));
            }
            assert_eq!(basis.index_of(&Word::new(vec![1; m + 1]).unwrap()), None);
        }
        assert_eq!(WordBasis::new(2, 2, false).index_of(&Word::empty()), None);
    }

    #[test]
    fn strip_prefix() {
        assert_eq!(w("(1,2,2)").strip_prefix(&w("(1)")), Some(w("(2,2)")));
        assert_eq!(w("(1,2)").strip_prefix(&w("(2)")), None);
    }

    fn arb_word() -> impl Strategy<Value = Word> {
        prop::collection::vec(1u8..=3, 0..5).prop_map(|v| Word::new(v).unwrap())
    }

    proptest! {
        #[test]
        fn concat_is_associative_with_identity(a in arb_word(), b in arb_word(), c in arb_word()) {
            prop_assert_eq!(a.concat(&b).concat(&c), a.concat(&b.concat(&c)));
            prop_assert_eq!(a.concat(&Word::empty()), a.clone());
            prop_assert_eq!(Word::empty().concat(&a), a.clone());
            prop_assert_eq!(a.concat(&b).len(), a.len() + b.len());
        }

        #[test]
        fn display_parse_roundtrip(a in arb_word()) {
            prop_assert_eq!(a.to_string().parse::<Word>().unwrap(), a);
        }
    }
}

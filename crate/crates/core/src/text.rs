//! Tokenization, document-frequency statistics, and salient-token selection.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::history::History;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const UNK: u32 = 4;
/// Number of reserved ids preceding any content token.
pub const RESERVED: usize = 5;

const RESERVED_NAMES: [&str; RESERVED] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];

pub fn is_reserved(id: u32) -> bool {
    (id as usize) < RESERVED
}

pub type TokenSeq = Vec<u32>;

/// Dense vocabulary: reserved ids 0..4, then content tokens in insertion order.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from content tokens. Tokens are lowercased and
    /// deduplicated; the five reserved ids come first.
    pub fn new<I, S>(content: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        let mut lookup: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for tok in content {
            let tok = tok.as_ref().to_lowercase();
            if !lookup.contains_key(&tok) {
                lookup.insert(tok.clone(), tokens.len() as u32);
                tokens.push(tok);
            }
        }
        Vocab { tokens, lookup }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.lookup.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    /// Content ids (everything past the reserved block).
    pub fn content_ids(&self) -> impl Iterator<Item = u32> + '_ {
        (RESERVED as u32..self.size() as u32).into_iter()
    }

    /// One content token per line; line number = id - RESERVED.
    pub fn to_file(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for tok in &self.tokens[RESERVED..] {
            writeln!(f, "{tok}")?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut content = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line?;
            let tok = line.trim();
            if !tok.is_empty() {
                content.push(tok.to_string());
            }
        }
        Ok(Vocab::new(content))
    }
}

/// Lowercasing whitespace tokenizer; unknown tokens map to UNK.
pub fn tokenize(text: &str, vocab: &Vocab) -> TokenSeq {
    text.split_whitespace()
        .map(|w| vocab.id(&w.to_lowercase()).unwrap_or(UNK))
        .collect()
}

/// Inverse of [`tokenize`] up to whitespace normalization.
pub fn detokenize(ids: &[u32], vocab: &Vocab) -> String {
    ids.iter()
        .map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Smoothed inverse document frequency per token id, in nats.
#[derive(Debug, Clone)]
pub struct IdfTable {
    idf: Vec<f64>,
}

impl IdfTable {
    pub fn from_values(idf: Vec<f64>) -> Self {
        IdfTable { idf }
    }

    pub fn idf(&self, id: u32) -> f64 {
        self.idf[id as usize]
    }

    pub fn len(&self) -> usize {
        self.idf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idf.is_empty()
    }

    /// Median idf over content ids; pruning treats anything below this as
    /// low-salience.
    pub fn content_median(&self) -> f64 {
        let mut vals: Vec<f64> = self.idf[RESERVED.min(self.idf.len())..].to_vec();
        if vals.is_empty() {
            return 0.0;
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mid = vals.len() / 2;
        if vals.len() % 2 == 1 {
            vals[mid]
        } else {
            0.5 * (vals[mid - 1] + vals[mid])
        }
    }
}

/// idf(w) = ln((1 + D) / (1 + df(w))) + 1. Tokens absent from the corpus get
/// the maximal value ln(1 + D) + 1. Every vocabulary id has an entry.
pub fn compute_idf(corpus: &[TokenSeq], vocab: &Vocab) -> Result<IdfTable> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let d = corpus.len() as f64;
    let mut df = vec![0u64; vocab.size()];
    let mut seen = vec![false; vocab.size()];
    for doc in corpus {
        seen.iter_mut().for_each(|s| *s = false);
        for &id in doc {
            let idx = id as usize;
            if idx < seen.len() && !seen[idx] {
                seen[idx] = true;
                df[idx] += 1;
            }
        }
    }
    let idf = df
        .iter()
        .map(|&n| ((1.0 + d) / (1.0 + n as f64)).ln() + 1.0)
        .collect();
    Ok(IdfTable { idf })
}

/// How a salient set was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SalientSource {
    IdfTopK,
    Keywords,
}

/// Sorted, distinct history positions designated as salient.
#[derive(Debug, Clone)]
pub struct SalientSet {
    indices: Vec<usize>,
    source: SalientSource,
}

impl SalientSet {
    pub fn new(mut indices: Vec<usize>, source: SalientSource) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(Error::NoSalientCandidates);
        }
        Ok(SalientSet { indices, source })
    }

    /// Empty set; only used as a neutral "protect nothing" argument.
    pub fn empty(source: SalientSource) -> Self {
        SalientSet {
            indices: Vec::new(),
            source,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.indices.binary_search(&pos).is_ok()
    }

    pub fn source(&self) -> SalientSource {
        self.source
    }
}

/// Positions of the `k` distinct content token types with highest idf over
/// the whole history. All positions of a selected type are included; idf ties
/// break toward the type whose first occurrence is earlier.
pub fn select_salient(history: &History, idf: &IdfTable, k: usize) -> Result<SalientSet> {
    assert!(k >= 1, "k must be at least 1");
    select_salient_in(history, idf, k, 0..history.len())
}

/// [`select_salient`] restricted to a position range (the "coverage from the
/// current prompt only" ablation passes the latest prompt's span).
pub fn select_salient_in(
    history: &History,
    idf: &IdfTable,
    k: usize,
    range: std::ops::Range<usize>,
) -> Result<SalientSet> {
    // token type -> (first position, all positions in range)
    let mut first_pos: HashMap<u32, usize> = HashMap::new();
    let mut positions: HashMap<u32, Vec<usize>> = HashMap::new();
    for pos in range {
        if !history.is_content(pos) {
            continue;
        }
        let id = history.id_at(pos).expect("content token has id");
        first_pos.entry(id).or_insert(pos);
        positions.entry(id).or_default().push(pos);
    }
    if positions.is_empty() {
        return Err(Error::NoSalientCandidates);
    }
    let mut types: Vec<u32> = positions.keys().copied().collect();
    types.sort_by(|a, b| {
        idf.idf(*b)
            .partial_cmp(&idf.idf(*a))
            .unwrap()
            .then(first_pos[a].cmp(&first_pos[b]))
    });
    let mut indices = Vec::new();
    for id in types.into_iter().take(k) {
        indices.extend_from_slice(&positions[&id]);
    }
    SalientSet::new(indices, SalientSource::IdfTopK)
}

/// Explicit-keyword mode: positions of any history token whose id is in
/// `keywords`. Bypasses idf entirely.
pub fn select_keywords(history: &History, keywords: &[u32]) -> Result<SalientSet> {
    let mut indices = Vec::new();
    for pos in 0..history.len() {
        if !history.is_content(pos) {
            continue;
        }
        let id = history.id_at(pos).expect("content token has id");
        if keywords.contains(&id) {
            indices.push(pos);
        }
    }
    if indices.is_empty() {
        return Err(Error::NoSalientCandidates);
    }
    SalientSet::new(indices, SalientSource::Keywords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::History;
    use proptest::prelude::*;

    fn vocab4() -> Vocab {
        Vocab::new(["solve", "3", "plus", "4"])
    }

    #[test]
    fn reserved_ids_are_stable() {
        let v = vocab4();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id("<sep>"), Some(SEP));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id("solve"), Some(5));
        // Dense ids: lookup(tokens[i]) == i.
        for i in 0..v.size() as u32 {
            assert_eq!(v.id(v.token(i)), Some(i));
        }
    }

    #[test]
    fn tokenize_empty_is_empty() {
        assert!(tokenize("", &vocab4()).is_empty());
    }

    #[test]
    fn tokenize_case_folds() {
        let v = Vocab::new(["add"]);
        let ids = tokenize("Add Add add", &v);
        assert_eq!(ids, vec![5, 5, 5]);
    }

    #[test]
    fn tokenize_round_trips() {
        let v = vocab4();
        let ids = tokenize("solve 3 plus 4", &v);
        assert_eq!(ids.len(), 4);
        assert_eq!(detokenize(&ids, &v), "solve 3 plus 4");
    }

    #[test]
    fn unknown_maps_to_unk() {
        let v = vocab4();
        assert_eq!(tokenize("zzz", &v), vec![UNK]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::new(["alpha", "beta", "gamma"]);
        v.to_file(&path).unwrap();
        let back = Vocab::from_file(&path).unwrap();
        assert_eq!(back.size(), v.size());
        for i in 0..v.size() as u32 {
            assert_eq!(back.token(i), v.token(i));
        }
    }

    #[test]
    fn idf_empty_corpus_errors() {
        let v = vocab4();
        assert!(matches!(compute_idf(&[], &v), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn idf_values_match_formula() {
        let v = Vocab::new(["a", "b"]);
        let a = v.id("a").unwrap();
        let b = v.id("b").unwrap();
        // D = 1, token present: ln(2/2) + 1 = 1.
        let t = compute_idf(&[vec![a]], &v).unwrap();
        assert_eq!(t.idf(a), 1.0);
        // D = 2, df = 1: ln(3/2) + 1.
        let t = compute_idf(&[vec![a], vec![]], &v).unwrap();
        assert!((t.idf(a) - (1.5f64.ln() + 1.0)).abs() < 1e-15);
        assert!((t.idf(a) - 1.4054651081081644).abs() < 1e-12);
        // D = 2, df = 0: ln(3) + 1.
        assert!((t.idf(b) - (3f64.ln() + 1.0)).abs() < 1e-15);
        assert!((t.idf(b) - 2.0986122886681098).abs() < 1e-12);
    }

    #[test]
    fn idf_covers_whole_vocab() {
        let v = vocab4();
        let t = compute_idf(&[vec![5]], &v).unwrap();
        assert_eq!(t.len(), v.size());
        assert!((0..v.size() as u32).all(|id| t.idf(id) >= 0.0));
    }

    fn history_of(ids: &[u32]) -> History {
        let mut h = History::with_bos();
        h.push_prompt(ids, 1);
        h
    }

    #[test]
    fn salient_single_type_selects_all_positions() {
        let h = history_of(&[7, 7, 7]);
        let idf = IdfTable::from_values(vec![1.0; 8]);
        let s = select_salient(&h, &idf, 1).unwrap();
        assert_eq!(s.indices(), &[1, 2, 3]);
    }

    #[test]
    fn salient_ranks_by_idf() {
        // history [a, b, c] with idf a=2.0, b=1.0, c=1.5, k=2 -> a and c.
        let h = history_of(&[5, 6, 7]);
        let mut idf = vec![0.0; 8];
        idf[5] = 2.0;
        idf[6] = 1.0;
        idf[7] = 1.5;
        let s = select_salient(&h, &IdfTable::from_values(idf), 2).unwrap();
        assert_eq!(s.indices(), &[1, 3]);
    }

    #[test]
    fn salient_requires_content() {
        let h = History::with_bos();
        let idf = IdfTable::from_values(vec![1.0; 8]);
        assert!(matches!(
            select_salient(&h, &idf, 1),
            Err(Error::NoSalientCandidates)
        ));
    }

    #[test]
    fn keyword_mode_finds_all_occurrences() {
        let mut h = History::with_bos();
        h.push_prompt(&[9, 5, 6, 9], 1); // positions 1..=4
        let s = select_keywords(&h, &[9]).unwrap();
        assert_eq!(s.indices(), &[1, 4]);
    }

    #[test]
    fn idf_tie_breaks_toward_earlier_position() {
        let h = history_of(&[6, 5]); // both idf 1.0; 6 appears first
        let idf = IdfTable::from_values(vec![1.0; 8]);
        let s = select_salient(&h, &idf, 1).unwrap();
        assert_eq!(s.indices(), &[1]);
    }

    proptest! {
        // Adding a document containing token w never increases idf(w).
        #[test]
        fn idf_monotone_in_df(df in 0usize..20, extra in 1usize..5) {
            let v = Vocab::new(["w"]);
            let w = v.id("w").unwrap();
            let mut corpus: Vec<TokenSeq> = vec![vec![]; 20];
            for doc in corpus.iter_mut().take(df) {
                doc.push(w);
            }
            let before = compute_idf(&corpus, &v).unwrap().idf(w);
            for _ in 0..extra {
                corpus.push(vec![w]);
            }
            let after = compute_idf(&corpus, &v).unwrap().idf(w);
            prop_assert!(after <= before + 1e-15);
        }

        // Salient selection depends only on idf values, not insertion order
        // (the table is an id-indexed vector, so this asserts permutation of
        // equal-idf types resolves by position).
        #[test]
        fn salient_nonempty_for_content(ids in proptest::collection::vec(5u32..12, 1..10), k in 1usize..4) {
            let h = history_of(&ids);
            let idf = IdfTable::from_values((0..12).map(|i| (i % 5) as f64).collect());
            let s = select_salient(&h, &idf, k).unwrap();
            prop_assert!(!s.is_empty());
            prop_assert!(s.indices().iter().all(|&p| p >= 1 && p <= ids.len()));
        }
    }
}

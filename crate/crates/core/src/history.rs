//! Dialogue / reasoning histories: ordered token entries with origin tags,
//! plus the pruning and truncation passes that bound history growth.

use crate::error::{Error, Result};
use crate::text::{IdfTable, SalientSet};

/// Where a history token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// BOS, SEP, answer markers and other scaffolding. Never salient,
    /// never prunable, never part of an n-gram match.
    Structural,
    /// Token of the user prompt issued at `turn` (1-based).
    Prompt { turn: u32 },
    /// Token of the model response generated at `turn` (1-based).
    Response { turn: u32 },
}

/// One position of a history.
#[derive(Debug, Clone)]
pub enum HistEntry {
    Tok { id: u32, origin: Origin },
    /// Pseudo-token standing in for truncated context. Carries the mean of
    /// the dropped tokens' encoder states; excluded from salience and
    /// n-gram matching.
    Summary { embedding: Vec<f64> },
}

/// Ordered token sequence of everything the policy conditions on at a turn.
#[derive(Debug, Clone, Default)]
pub struct History {
    entries: Vec<HistEntry>,
}

impl History {
    /// Fresh history holding only BOS.
    pub fn with_bos() -> Self {
        History {
            entries: vec![HistEntry::Tok {
                id: crate::text::BOS,
                origin: Origin::Structural,
            }],
        }
    }

    pub fn from_entries(entries: Vec<HistEntry>) -> Self {
        History { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[HistEntry] {
        &self.entries
    }

    /// Token id at `pos`; `None` for the SUMMARY pseudo-token.
    pub fn id_at(&self, pos: usize) -> Option<u32> {
        match &self.entries[pos] {
            HistEntry::Tok { id, .. } => Some(*id),
            HistEntry::Summary { .. } => None,
        }
    }

    /// True when the position holds a non-reserved prompt/response token.
    pub fn is_content(&self, pos: usize) -> bool {
        match &self.entries[pos] {
            HistEntry::Tok { id, origin } => {
                !matches!(origin, Origin::Structural) && !crate::text::is_reserved(*id)
            }
            HistEntry::Summary { .. } => false,
        }
    }

    pub fn push_tok(&mut self, id: u32, origin: Origin) {
        self.entries.push(HistEntry::Tok { id, origin });
    }

    pub fn push_sep(&mut self) {
        self.push_tok(crate::text::SEP, Origin::Structural);
    }

    pub fn push_prompt(&mut self, tokens: &[u32], turn: u32) {
        for &id in tokens {
            if crate::text::is_reserved(id) {
                self.push_tok(id, Origin::Structural);
            } else {
                self.push_tok(id, Origin::Prompt { turn });
            }
        }
    }

    pub fn push_response(&mut self, tokens: &[u32], turn: u32) {
        for &id in tokens {
            if crate::text::is_reserved(id) {
                self.push_tok(id, Origin::Structural);
            } else {
                self.push_tok(id, Origin::Response { turn });
            }
        }
    }

    /// Positions covered by the prompt of the given turn.
    pub fn prompt_positions(&self, turn: u32) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| {
                matches!(e, HistEntry::Tok { origin: Origin::Prompt { turn: t }, .. } if *t == turn)
            })
            .map(|(i, _)| i)
            .collect()
    }
}

/// Result of a pruning pass.
#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub history: History,
    /// Old position -> new position; `None` for removed tokens.
    pub remap: Vec<Option<usize>>,
    /// Set when the length target could not be met because every remaining
    /// candidate is protected.
    pub exhausted: bool,
}

impl PruneOutcome {
    fn identity(history: &History) -> Self {
        PruneOutcome {
            history: history.clone(),
            remap: (0..history.len()).map(Some).collect(),
            exhausted: false,
        }
    }
}

/// Drops low-salience tokens (negligible attention mass AND below-median IDF)
/// until the history fits `max_len` or no removable candidates remain.
///
/// Salient-set members, structural tokens, and SUMMARY entries are never
/// removed. Candidates are removed oldest-first.
pub fn prune_history(
    history: &History,
    attn_mass: &[f64],
    idf: &IdfTable,
    max_len: usize,
    mass_floor: f64,
    protected: &SalientSet,
) -> PruneOutcome {
    assert_eq!(
        attn_mass.len(),
        history.len(),
        "attention mass must align with history"
    );
    if history.len() <= max_len {
        return PruneOutcome::identity(history);
    }
    let median = idf.content_median();
    let mut keep = vec![true; history.len()];
    let mut len = history.len();
    for pos in 0..history.len() {
        if len <= max_len {
            break;
        }
        if !history.is_content(pos) || protected.contains(pos) {
            continue;
        }
        let id = history.id_at(pos).expect("content token has id");
        if attn_mass[pos] < mass_floor && idf.idf(id) < median {
            keep[pos] = false;
            len -= 1;
        }
    }
    let exhausted = len > max_len;
    let mut remap = Vec::with_capacity(history.len());
    let mut entries = Vec::with_capacity(len);
    for (pos, entry) in history.entries.iter().enumerate() {
        if keep[pos] {
            remap.push(Some(entries.len()));
            entries.push(entry.clone());
        } else {
            remap.push(None);
        }
    }
    PruneOutcome {
        history: History { entries },
        remap,
        exhausted,
    }
}

/// Result of a truncation pass. `summary` is `None` when the history already
/// fit the window and nothing was dropped.
#[derive(Debug, Clone)]
pub struct TruncateOutcome {
    pub history: History,
    pub summary: Option<Vec<f64>>,
}

/// Keeps the most recent `m` tokens and folds everything older into a single
/// SUMMARY pseudo-token whose embedding is the mean of the dropped tokens'
/// encoder states.
pub fn truncate_history(
    history: &History,
    m: usize,
    encoder_states: &[Vec<f64>],
) -> Result<TruncateOutcome> {
    if m < 2 {
        return Err(Error::TruncationWindow { m });
    }
    assert_eq!(
        encoder_states.len(),
        history.len(),
        "encoder states must align with history"
    );
    if history.len() <= m {
        return Ok(TruncateOutcome {
            history: history.clone(),
            summary: None,
        });
    }
    let dropped = history.len() - m;
    let dim = encoder_states[0].len();
    let mut mean = vec![0.0; dim];
    for state in &encoder_states[..dropped] {
        for (acc, &x) in mean.iter_mut().zip(state) {
            *acc += x;
        }
    }
    for acc in &mut mean {
        *acc /= dropped as f64;
    }
    let mut entries = Vec::with_capacity(m + 1);
    entries.push(HistEntry::Summary {
        embedding: mean.clone(),
    });
    entries.extend(history.entries[dropped..].iter().cloned());
    Ok(TruncateOutcome {
        history: History { entries },
        summary: Some(mean),
    })
}

//! Text and tagged-corpus handling: vocabulary construction, id streams,
//! and contiguous language-model batching.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::embedding::OrderStrategy;

pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_ID: usize = 0;
pub const EOS_ID: usize = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus is empty")]
    Empty,
    #[error("corpus of {tokens} tokens cannot fill {batch_size} streams of at least 2 tokens")]
    TooSmall { tokens: usize, batch_size: usize },
    #[error("line {line}: expected 'token<TAB>tag', got '{content}'")]
    MalformedTagged { line: usize, content: String },
}

/// Whitespace tokens with an end-of-sentence marker appended per non-empty
/// line.
pub fn load_text_corpus(path: impl AsRef<Path>) -> Result<Vec<String>, CorpusError> {
    let text = fs::read_to_string(path)?;
    let mut tokens = Vec::new();
    for line in text.lines() {
        let mut any = false;
        for tok in line.split_whitespace() {
            tokens.push(tok.to_string());
            any = true;
        }
        if any {
            tokens.push(EOS_TOKEN.to_string());
        }
    }
    Ok(tokens)
}

/// Word ids in descending frequency order. Ids 0 and 1 are pinned to the
/// unknown and end-of-sentence markers; words seen fewer than `min_count`
/// times fold into the unknown bucket.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    freqs: Vec<u64>,
    strategy: OrderStrategy,
}

impl Vocabulary {
    pub fn build<S: AsRef<str>>(tokens: &[S], min_count: u64) -> Result<Vocabulary, CorpusError> {
        if tokens.is_empty() {
            return Err(CorpusError::Empty);
        }
        let mut counts: HashMap<&str, (u64, usize)> = HashMap::new();
        for (pos, tok) in tokens.iter().enumerate() {
            let e = counts.entry(tok.as_ref()).or_insert((0, pos));
            e.0 += 1;
        }
        let mut unk_count = counts.remove(UNK_TOKEN).map_or(0, |(c, _)| c);
        let eos_count = counts.remove(EOS_TOKEN).map_or(0, |(c, _)| c);
        let mut ranked: Vec<(&str, u64, usize)> = Vec::new();
        for (word, (count, first)) in counts {
            if count < min_count {
                unk_count += count;
            } else {
                ranked.push((word, count, first));
            }
        }
        ranked.sort_by_key(|&(_, count, first)| (std::cmp::Reverse(count), first));

        let mut words = vec![UNK_TOKEN.to_string(), EOS_TOKEN.to_string()];
        let mut freqs = vec![unk_count, eos_count];
        for (word, count, _) in ranked {
            words.push(word.to_string());
            freqs.push(count);
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Vocabulary { words, index, freqs, strategy: OrderStrategy::Up })
    }

    /// Same counting, but non-special ids follow the ordering strategy:
    /// "up" is descending frequency, "down" the exact reverse, "none" a
    /// seeded shuffle. Specials stay pinned at ids 0 and 1, so the unknown
    /// bucket always has a full-length row in a sparse embedding.
    pub fn build_ordered<S: AsRef<str>>(
        tokens: &[S],
        min_count: u64,
        strategy: OrderStrategy,
        seed: u64,
    ) -> Result<Vocabulary, CorpusError> {
        let up = Self::build(tokens, min_count)?;
        let special_freqs = [up.freqs[UNK_ID], up.freqs[EOS_ID]];
        let mut tail: Vec<(String, u64)> = up
            .words
            .into_iter()
            .zip(up.freqs)
            .skip(2)
            .collect();
        match strategy {
            OrderStrategy::Up => {}
            OrderStrategy::Down => tail.reverse(),
            OrderStrategy::None => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                tail.shuffle(&mut rng);
            }
        }
        let mut words = vec![UNK_TOKEN.to_string(), EOS_TOKEN.to_string()];
        let mut freqs = vec![special_freqs[0], special_freqs[1]];
        for (w, f) in tail {
            words.push(w);
            freqs.push(f);
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Vocabulary { words, index, freqs, strategy })
    }

    pub fn strategy(&self) -> OrderStrategy {
        self.strategy
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(|s| s.as_str())
    }

    /// Build-time occurrence counts per id; the unknown bucket aggregates
    /// everything folded into it.
    pub fn frequencies(&self) -> &[u64] {
        &self.freqs
    }

    pub fn numericalize<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(UNK_ID)).collect()
    }

    pub fn denumericalize(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&id| self.words.get(id).cloned().unwrap_or_else(|| UNK_TOKEN.to_string())).collect()
    }

    /// Lines of `word<TAB>count` in id order, for inspection.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (w, f) in self.words.iter().zip(&self.freqs) {
            out.push_str(w);
            out.push('\t');
            out.push_str(&f.to_string());
            out.push('\n');
        }
        out
    }

    /// Inverse of [`to_tsv`], for checkpoint restore. Ids follow line order,
    /// so the stored strategy tag is whatever the saver used.
    pub fn from_tsv(text: &str, strategy: OrderStrategy) -> Result<Vocabulary, CorpusError> {
        let mut words = Vec::new();
        let mut freqs = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let Some((word, count)) = line.split_once('\t') else {
                return Err(CorpusError::MalformedTagged { line: idx + 1, content: line.to_string() });
            };
            let count: u64 = count.parse().map_err(|_| CorpusError::MalformedTagged {
                line: idx + 1,
                content: line.to_string(),
            })?;
            words.push(word.to_string());
            freqs.push(count);
        }
        if words.len() < 2 || words[UNK_ID] != UNK_TOKEN || words[EOS_ID] != EOS_TOKEN {
            return Err(CorpusError::Empty);
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Vocabulary { words, index, freqs, strategy })
    }
}

/// One truncated-backpropagation segment. Ids are step-major: row t*batch+b
/// is stream b at step t, and targets are inputs shifted one step forward
/// within each stream.
#[derive(Clone, Debug, PartialEq)]
pub struct LmBatch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
}

/// Splits an id stream into `batch_size` equal contiguous streams (tail
/// dropped) and cuts them into segments of at most `bptt` steps. Stream
/// state carries across segments, so a trainer can thread recurrent state
/// through the returned sequence in order.
pub fn lm_batches(
    ids: &[usize],
    batch_size: usize,
    bptt: usize,
) -> Result<Vec<LmBatch>, CorpusError> {
    assert!(batch_size >= 1 && bptt >= 1, "batch_size and bptt must be positive");
    let stream_len = ids.len() / batch_size;
    if stream_len < 2 {
        return Err(CorpusError::TooSmall { tokens: ids.len(), batch_size });
    }
    let stream = |b: usize| &ids[b * stream_len..(b + 1) * stream_len];
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < stream_len {
        let steps = bptt.min(stream_len - 1 - start);
        let mut inputs = Vec::with_capacity(steps * batch_size);
        let mut targets = Vec::with_capacity(steps * batch_size);
        for t in 0..steps {
            for b in 0..batch_size {
                inputs.push(stream(b)[start + t]);
                targets.push(stream(b)[start + t + 1]);
            }
        }
        out.push(LmBatch { inputs, targets, steps, batch: batch_size });
        start += steps;
    }
    Ok(out)
}

/// Tokens and tags in parallel, one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

/// Reads `token<TAB>tag` lines; a blank line closes a sentence.
pub fn load_tagged_corpus(path: impl AsRef<Path>) -> Result<Vec<TaggedSentence>, CorpusError> {
    let text = fs::read_to_string(path)?;
    let mut sentences = Vec::new();
    let mut current = TaggedSentence { tokens: Vec::new(), tags: Vec::new() };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            if !current.tokens.is_empty() {
                sentences.push(std::mem::replace(
                    &mut current,
                    TaggedSentence { tokens: Vec::new(), tags: Vec::new() },
                ));
            }
            continue;
        }
        let (token, tag) = line
            .split_once('\t')
            .ok_or_else(|| CorpusError::MalformedTagged { line: i + 1, content: line.to_string() })?;
        if token.is_empty() || tag.is_empty() {
            return Err(CorpusError::MalformedTagged { line: i + 1, content: line.to_string() });
        }
        current.tokens.push(token.to_string());
        current.tags.push(tag.to_string());
    }
    if !current.tokens.is_empty() {
        sentences.push(current);
    }
    if sentences.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(sentences)
}

pub fn write_tagged_corpus(
    path: impl AsRef<Path>,
    sentences: &[TaggedSentence],
) -> Result<(), CorpusError> {
    let mut f = fs::File::create(path)?;
    for s in sentences {
        for (tok, tag) in s.tokens.iter().zip(&s.tags) {
            writeln!(f, "{tok}\t{tag}")?;
        }
        writeln!(f)?;
    }
    Ok(())
}

/// Tag inventory in descending frequency order, no reserved ids.
#[derive(Clone, Debug)]
pub struct TagSet {
    tags: Vec<String>,
    index: HashMap<String, usize>,
}

impl TagSet {
    pub fn build(sentences: &[TaggedSentence]) -> TagSet {
        let mut counts: HashMap<&str, (u64, usize)> = HashMap::new();
        let mut pos = 0usize;
        for s in sentences {
            for tag in &s.tags {
                let e = counts.entry(tag).or_insert((0, pos));
                e.0 += 1;
                pos += 1;
            }
        }
        let mut ranked: Vec<(&str, u64, usize)> = counts
            .into_iter()
            .map(|(tag, (count, first))| (tag, count, first))
            .collect();
        ranked.sort_by_key(|&(_, count, first)| (std::cmp::Reverse(count), first));
        let tags: Vec<String> = ranked.into_iter().map(|(t, _, _)| t.to_string()).collect();
        let index = tags.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        TagSet { tags, index }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn id(&self, tag: &str) -> Option<usize> {
        self.index.get(tag).copied()
    }

    pub fn tag(&self, id: usize) -> Option<&str> {
        self.tags.get(id).map(|s| s.as_str())
    }

    /// Rebuilds a tag inventory from names in id order (checkpoint restore).
    pub fn from_names(tags: Vec<String>) -> TagSet {
        let index = tags.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        TagSet { tags, index }
    }
}

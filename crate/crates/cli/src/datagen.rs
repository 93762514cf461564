//! Deterministic synthetic corpora for the desk-scale studies.
//!
//! Recite: one fixed line, repeated. The line is an Eulerian circuit over a
//! multigraph whose node degrees follow a Zipf law, so word frequencies look
//! like natural text (which gives plain SGD its early unigram progress),
//! while every ordered word pair occurs at most once, which makes the whole
//! stream exactly predictable from the previous two tokens.
//!
//! Tagging: token-salad sentences over two pools. Pool A words each carry one
//! of six tags and most of the token mass; pool B is a large uniform tail
//! that always tags X. Sentences end with "." tagged P.

use std::collections::HashSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparseq_core::corpus::TaggedSentence;

pub const RECITE_LINES: usize = 11;
pub const RECITE_WORDS: usize = 900;
/// Tokens per line: edges of the circuit.
pub const RECITE_LINE_TOKENS: usize = 4500;

pub const POS_TRAIN_SENTENCES: usize = 1400;
pub const POS_EVAL_SENTENCES: usize = 400;
pub const POS_COMMON_POOL: usize = 60;
pub const POS_RARE_POOL: usize = 2000;
pub const POS_COMMON_MASS: f64 = 0.72;
pub const POS_TAGS: usize = 6;

const CONSONANTS: [&str; 10] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r"];
const VOWELS: [&str; 3] = ["a", "i", "o"];

fn syllables() -> Vec<String> {
    let mut out = Vec::with_capacity(30);
    for c in CONSONANTS {
        for v in VOWELS {
            out.push(format!("{c}{v}"));
        }
    }
    out
}

/// A word occurring k times in the line needs k distinct successors, so the
/// cap keeps the repair loop's collision rate low.
const WORD_FREQ_CAP: usize = 150;

/// Zipf-shaped per-word counts clamped to [1, cap], summing exactly to
/// `total`.
fn zipf_degrees(n: usize, total: usize, cap: usize) -> Vec<usize> {
    assert!(n <= total && total <= n * cap);
    let weight = |c: f64, r: usize| ((c / (r + 1) as f64).round() as usize).clamp(1, cap);
    let sum = |c: f64| (0..n).map(|r| weight(c, r)).sum::<usize>();
    let mut lo = 0.0;
    let mut hi = total as f64;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if sum(mid) < total {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut deg: Vec<usize> = (0..n).map(|r| weight(hi, r)).collect();
    let sum: usize = deg.iter().sum();
    assert!(sum >= total);
    let mut excess = sum - total;
    let mut r = 0;
    while excess > 0 {
        if deg[r] > 1 {
            deg[r] -= 1;
            excess -= 1;
        }
        r = (r + 1) % n;
    }
    deg
}

fn root(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Eulerian circuit over a random balanced multigraph with the given out
/// degrees, as a walk of `deg.sum()` nodes starting at node 0. The closing
/// edge back to node 0 is implied. No ordered pair of adjacent nodes repeats
/// anywhere in the walk.
fn eulerian_circuit(deg: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = deg.len();
    let edges: usize = deg.iter().sum();
    let from: Vec<usize> = (0..n)
        .flat_map(|w| std::iter::repeat(w).take(deg[w]))
        .collect();
    let mut to = from.clone();
    to.shuffle(rng);

    // Target swaps preserve every in and out degree, so the graph stays
    // balanced through both repair stages.
    let mut settled = false;
    for _ in 0..10_000 {
        let mut seen = HashSet::with_capacity(edges);
        let dups: Vec<usize> = (0..edges)
            .filter(|&i| !seen.insert((from[i], to[i])))
            .collect();
        if !dups.is_empty() {
            for i in dups {
                let j = rng.gen_range(0..edges);
                to.swap(i, j);
            }
            continue;
        }
        let mut parent: Vec<usize> = (0..n).collect();
        for i in 0..edges {
            let (a, b) = (root(&mut parent, from[i]), root(&mut parent, to[i]));
            if a != b {
                parent[a] = b;
            }
        }
        let mut reps = Vec::new();
        let mut roots = HashSet::new();
        for i in 0..edges {
            if roots.insert(root(&mut parent, from[i])) {
                reps.push(i);
                if reps.len() > 1 {
                    break;
                }
            }
        }
        if reps.len() == 1 {
            settled = true;
            break;
        }
        to.swap(reps[0], reps[1]);
    }
    assert!(settled, "graph repair did not converge");

    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..edges {
        adj[from[i]].push(to[i]);
    }
    let mut stack = vec![0usize];
    let mut circuit = Vec::with_capacity(edges + 1);
    while let Some(&v) = stack.last() {
        match adj[v].pop() {
            Some(next) => stack.push(next),
            None => circuit.push(stack.pop().unwrap()),
        }
    }
    circuit.reverse();
    assert_eq!(circuit.len(), edges + 1, "disconnected multigraph");
    circuit.pop();
    circuit
}

/// The fixed recitation line. Word frequencies follow the clamped Zipf
/// counts; every adjacent ordered pair occurs at most once, so two tokens of
/// context always pin down the next token.
pub fn recite_line(seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let syl = syllables();
    let mut words = Vec::with_capacity(RECITE_WORDS);
    for a in &syl {
        for b in &syl {
            words.push(format!("{a}{b}"));
        }
    }
    words.shuffle(&mut rng);
    let deg = zipf_degrees(RECITE_WORDS, RECITE_LINE_TOKENS, WORD_FREQ_CAP);
    let circuit = eulerian_circuit(&deg, &mut rng);
    circuit.into_iter().map(|w| words[w].clone()).collect()
}

/// One line per recitation. The line break contributes the end-of-line
/// token, whose predecessor and successor are also fixed.
pub fn recite_corpus(seed: u64) -> String {
    let line = recite_line(seed).join(" ");
    let mut out = String::with_capacity((line.len() + 1) * RECITE_LINES);
    for _ in 0..RECITE_LINES {
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub struct PosCorpus {
    pub train: Vec<TaggedSentence>,
    pub valid: Vec<TaggedSentence>,
    pub test: Vec<TaggedSentence>,
}

fn zipf_weights(n: usize) -> Vec<f64> {
    (0..n).map(|r| 1.0 / (r + 1) as f64).collect()
}

pub fn pos_corpus(seed: u64) -> PosCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let syl = syllables();

    // Common pool: two-syllable words, word i tagged T{i%6+1}.
    let mut pairs = Vec::with_capacity(900);
    for a in &syl {
        for b in &syl {
            pairs.push(format!("{a}{b}"));
        }
    }
    pairs.shuffle(&mut rng);
    let common: Vec<(String, String)> = pairs
        .into_iter()
        .take(POS_COMMON_POOL)
        .enumerate()
        .map(|(i, w)| (w, format!("T{}", i % POS_TAGS + 1)))
        .collect();

    // Rare pool: three-syllable words, all tagged X.
    let mut triple_ix: Vec<usize> = (0..30 * 30 * 30).collect();
    triple_ix.shuffle(&mut rng);
    let rare: Vec<String> = triple_ix
        .into_iter()
        .take(POS_RARE_POOL)
        .map(|ix| format!("{}{}{}", syl[ix / 900], syl[(ix / 30) % 30], syl[ix % 30]))
        .collect();

    let common_dist = WeightedIndex::new(zipf_weights(POS_COMMON_POOL)).expect("weights");

    // Rare words are drawn uniformly: most types end up with a handful of
    // training occurrences, so the X tag has to come from generalization,
    // not per-word memorization.
    let sentence = |rng: &mut ChaCha8Rng| {
        let len = rng.gen_range(6..=12);
        let mut tokens = Vec::with_capacity(len + 1);
        let mut tags = Vec::with_capacity(len + 1);
        for _ in 0..len {
            if rng.gen::<f64>() < POS_COMMON_MASS {
                let (w, t) = &common[common_dist.sample(rng)];
                tokens.push(w.clone());
                tags.push(t.clone());
            } else {
                tokens.push(rare[rng.gen_range(0..POS_RARE_POOL)].clone());
                tags.push("X".to_string());
            }
        }
        tokens.push(".".to_string());
        tags.push("P".to_string());
        TaggedSentence { tokens, tags }
    };

    let take = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| sentence(rng)).collect();
    let train = take(&mut rng, POS_TRAIN_SENTENCES);
    let valid = take(&mut rng, POS_EVAL_SENTENCES);
    let test = take(&mut rng, POS_EVAL_SENTENCES);
    PosCorpus { train, valid, test }
}

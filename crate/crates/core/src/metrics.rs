//! BLEU-N and CIDEr-D caption scores over token sequences.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use crate::error::{config_err, Result};

pub const MAX_N: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_SCALE: f64 = 10.0;

type Counts<W> = HashMap<Vec<W>, usize>;

/// Counts of every n-gram of order `n` in `tokens`.
pub fn ngram_counts<W: Clone + Eq + Hash>(tokens: &[W], n: usize) -> Counts<W> {
    let mut c = HashMap::new();
    if n == 0 || tokens.len() < n {
        return c;
    }
    for win in tokens.windows(n) {
        *c.entry(win.to_vec()).or_insert(0) += 1;
    }
    c
}

/// Matched (clipped) and total n-gram counts of a candidate, per order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matched: [usize; MAX_N],
    pub total: [usize; MAX_N],
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn of<W: Clone + Eq + Hash>(candidate: &[W], refs: &[Vec<W>]) -> Self {
        let mut s = Self {
            cand_len: candidate.len(),
            ref_len: closest_ref_len(candidate.len(), refs),
            ..Self::default()
        };
        for n in 1..=MAX_N {
            let cand = ngram_counts(candidate, n);
            let mut max_ref: Counts<W> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            s.total[n - 1] = cand.values().sum();
            s.matched[n - 1] = cand
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum();
        }
        s
    }

    pub fn add(&mut self, o: &Self) {
        for n in 0..MAX_N {
            self.matched[n] += o.matched[n];
            self.total[n] += o.total[n];
        }
        self.cand_len += o.cand_len;
        self.ref_len += o.ref_len;
    }

    /// Unsmoothed BLEU-`n`: zero whenever some precision up to `n` is zero.
    pub fn score(&self, n: usize) -> f64 {
        assert!((1..=MAX_N).contains(&n), "BLEU order must be 1..=4");
        if self.cand_len == 0 {
            return 0.0;
        }
        let mut log_p = 0.0;
        for k in 0..n {
            if self.matched[k] == 0 || self.total[k] == 0 {
                return 0.0;
            }
            log_p += (self.matched[k] as f64 / self.total[k] as f64).ln();
        }
        let bp = if self.cand_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        } else {
            1.0
        };
        bp * (log_p / n as f64).exp()
    }
}

/// Reference length closest to `c`, the shorter one on ties.
pub fn closest_ref_len<W>(c: usize, refs: &[Vec<W>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Sentence BLEU-`n`; an empty candidate scores 0.
pub fn bleu<W: Clone + Eq + Hash>(candidate: &[W], refs: &[Vec<W>], n: usize) -> f64 {
    BleuStats::of(candidate, refs).score(n)
}

/// Corpus BLEU-`n` from pooled counts and lengths.
pub fn corpus_bleu<W: Clone + Eq + Hash>(candidates: &[Vec<W>], refs: &[Vec<Vec<W>>], n: usize) -> f64 {
    let mut total = BleuStats::default();
    for (c, r) in candidates.iter().zip(refs) {
        total.add(&BleuStats::of(c, r));
    }
    total.score(n)
}

/// Document frequencies of the n-grams (orders 1..=4) of a reference corpus;
/// each document is the reference set of one image.
#[derive(Clone, Debug)]
pub struct NGramStats<W> {
    df: HashMap<Vec<W>, usize>,
    docs: usize,
}

impl<W: Clone + Eq + Hash> NGramStats<W> {
    pub fn new(corpus: &[Vec<Vec<W>>]) -> Self {
        let mut df = HashMap::new();
        for refs in corpus {
            let mut seen = HashSet::new();
            for r in refs {
                for n in 1..=MAX_N {
                    for g in ngram_counts(r, n).into_keys() {
                        seen.insert(g);
                    }
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        Self {
            df,
            docs: corpus.len(),
        }
    }

    pub fn docs(&self) -> usize {
        self.docs
    }

    pub fn df(&self, gram: &[W]) -> usize {
        self.df.get(gram).copied().unwrap_or(0)
    }

    fn vector(&self, tokens: &[W]) -> ([HashMap<Vec<W>, f64>; MAX_N], [f64; MAX_N]) {
        let log_docs = (self.docs as f64).ln();
        let mut vec: [HashMap<Vec<W>, f64>; MAX_N] = Default::default();
        let mut norm = [0.0; MAX_N];
        for n in 1..=MAX_N {
            for (g, tf) in ngram_counts(tokens, n) {
                let idf = log_docs - (self.df(&g).max(1) as f64).ln();
                let v = tf as f64 * idf;
                norm[n - 1] += v * v;
                vec[n - 1].insert(g, v);
            }
        }
        (vec, norm.map(f64::sqrt))
    }

    /// CIDEr-D of one candidate against its references.
    pub fn cider_d(&self, candidate: &[W], refs: &[Vec<W>]) -> Result<f64> {
        if self.docs == 0 {
            return Err(config_err("CIDEr-D needs non-empty n-gram statistics"));
        }
        if refs.is_empty() {
            return Ok(0.0);
        }
        let (vc, nc) = self.vector(candidate);
        let mut sum = [0.0; MAX_N];
        for r in refs {
            let (vr, nr) = self.vector(r);
            let delta = candidate.len() as f64 - r.len() as f64;
            let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            for n in 0..MAX_N {
                let mut val: f64 = vc[n]
                    .iter()
                    .map(|(g, &c)| {
                        let rv = vr[n].get(g).copied().unwrap_or(0.0);
                        c.min(rv) * rv
                    })
                    .sum();
                if nc[n] != 0.0 && nr[n] != 0.0 {
                    val /= nc[n] * nr[n];
                }
                sum[n] += val * penalty;
            }
        }
        let mean_n = sum.iter().sum::<f64>() / MAX_N as f64;
        Ok(CIDER_SCALE * mean_n / refs.len() as f64)
    }

    /// Per-candidate CIDEr-D scores and their mean.
    pub fn cider_d_corpus(&self, candidates: &[Vec<W>], refs: &[Vec<Vec<W>>]) -> Result<(Vec<f64>, f64)> {
        let scores = candidates
            .iter()
            .zip(refs)
            .map(|(c, r)| self.cider_d(c, r))
            .collect::<Result<Vec<_>>>()?;
        let mean = if scores.is_empty() {
            0.0
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        };
        Ok((scores, mean))
    }
}

/// Lowercased whitespace tokens.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

//! Greedy, sampling and beam-search decoding over any next-token scorer.

use std::cmp::Ordering;

use dtnet_tensor::RngState;

use crate::error::{config_err, Result};

/// Next-token log-probabilities for a set of prefixes.
pub trait StepScorer {
    /// `sources[i]` is the sample row `prefixes[i]` belongs to; every prefix
    /// starts with the start token and all prefixes have equal length.
    fn next_log_probs(&mut self, sources: &[usize], prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeSpec {
    pub bos: usize,
    /// Token that retires a hypothesis; `None` decodes exactly `max_len` tokens.
    pub eos: Option<usize>,
    /// Maximum generated tokens, the end token included.
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens without the start and end tokens.
    pub tokens: Vec<usize>,
    /// Sum of per-step log-probabilities, the end token included.
    pub log_prob: f64,
    pub finished: bool,
}

fn check(spec: &DecodeSpec) -> Result<()> {
    if spec.max_len == 0 {
        return Err(config_err("max_len must be at least 1"));
    }
    Ok(())
}

/// Stepwise selection shared by greedy and sampling.
fn stepwise<S: StepScorer>(
    scorer: &mut S,
    samples: usize,
    spec: DecodeSpec,
    mut choose: impl FnMut(&[f64]) -> usize,
) -> Result<Vec<Hypothesis>> {
    check(&spec)?;
    let mut hyps = vec![
        Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        };
        samples
    ];
    let mut alive: Vec<usize> = (0..samples).collect();
    for _ in 0..spec.max_len {
        if alive.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = alive
            .iter()
            .map(|&s| std::iter::once(spec.bos).chain(hyps[s].tokens.iter().copied()).collect())
            .collect();
        let lps = scorer.next_log_probs(&alive, &prefixes)?;
        let mut next = Vec::with_capacity(alive.len());
        for (&s, lp) in alive.iter().zip(&lps) {
            let tok = choose(lp);
            let h = &mut hyps[s];
            h.log_prob += lp[tok];
            if Some(tok) == spec.eos {
                h.finished = true;
            } else {
                h.tokens.push(tok);
                next.push(s);
            }
        }
        alive = next;
    }
    Ok(hyps)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

pub fn greedy<S: StepScorer>(scorer: &mut S, samples: usize, spec: DecodeSpec) -> Result<Vec<Hypothesis>> {
    stepwise(scorer, samples, spec, argmax)
}

/// Draws each token from the softmax distribution.
pub fn sample<S: StepScorer>(
    scorer: &mut S,
    samples: usize,
    spec: DecodeSpec,
    rng: &mut RngState,
) -> Result<Vec<Hypothesis>> {
    stepwise(scorer, samples, spec, |lp| {
        let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        rng.categorical(&p)
    })
}

struct Candidate {
    score: f64,
    parent: usize,
    token: usize,
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.token.cmp(&b.token))
        .then(a.parent.cmp(&b.parent))
}

/// Beam search keeping the `k` best extensions per step by summed
/// log-probability; hypotheses ending in the end token retire. Returns at
/// most `k` hypotheses per sample, best first.
pub fn beam<S: StepScorer>(
    scorer: &mut S,
    samples: usize,
    k: usize,
    spec: DecodeSpec,
) -> Result<Vec<Vec<Hypothesis>>> {
    check(&spec)?;
    if k == 0 {
        return Err(config_err("beam size must be at least 1"));
    }
    let start = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    let mut alive: Vec<Vec<Hypothesis>> = vec![vec![start]; samples];
    let mut done: Vec<Vec<Hypothesis>> = vec![Vec::new(); samples];
    for _ in 0..spec.max_len {
        let mut sources = Vec::new();
        let mut prefixes = Vec::new();
        for (s, hs) in alive.iter().enumerate() {
            for h in hs {
                sources.push(s);
                prefixes.push(std::iter::once(spec.bos).chain(h.tokens.iter().copied()).collect());
            }
        }
        if sources.is_empty() {
            break;
        }
        let lps = scorer.next_log_probs(&sources, &prefixes)?;
        let mut row = 0;
        for s in 0..samples {
            let hs = std::mem::take(&mut alive[s]);
            let mut cands = Vec::with_capacity(hs.len() * lps.get(row).map_or(0, Vec::len));
            for (parent, h) in hs.iter().enumerate() {
                for (token, &lp) in lps[row + parent].iter().enumerate() {
                    cands.push(Candidate {
                        score: h.log_prob + lp,
                        parent,
                        token,
                    });
                }
            }
            row += hs.len();
            cands.sort_by(rank);
            for c in cands.into_iter().take(k) {
                let mut tokens = hs[c.parent].tokens.clone();
                let finished = Some(c.token) == spec.eos;
                if !finished {
                    tokens.push(c.token);
                }
                let h = Hypothesis {
                    tokens,
                    log_prob: c.score,
                    finished,
                };
                if finished {
                    done[s].push(h);
                } else {
                    alive[s].push(h);
                }
            }
        }
    }
    Ok(done
        .into_iter()
        .zip(alive)
        .map(|(mut d, a)| {
            d.extend(a);
            d.sort_by(|x, y| {
                y.log_prob
                    .partial_cmp(&x.log_prob)
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| x.tokens.cmp(&y.tokens))
            });
            d.truncate(k);
            d
        })
        .collect())
}

//! Transcription oracles for the caption metrics.

use std::collections::BTreeMap;

use dtnet_tensor::RngState;

pub type Doc = Vec<String>;

pub fn grams(s: &[String], n: usize) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    if s.len() >= n {
        for i in 0..=s.len() - n {
            *m.entry(s[i..i + n].join(" ")).or_insert(0.0) += 1.0;
        }
    }
    m
}

/// Pooled clipped precisions with the closest-length brevity penalty.
pub fn bleu_oracle(cands: &[Doc], refs: &[Vec<Doc>], order: usize) -> f64 {
    let mut matched = vec![0.0; order];
    let mut total = vec![0.0; order];
    let (mut c_len, mut r_len) = (0.0, 0.0);
    for (c, rs) in cands.iter().zip(refs) {
        c_len += c.len() as f64;
        let mut best = rs[0].len();
        for r in rs {
            let (d, bd) = (r.len().abs_diff(c.len()), best.abs_diff(c.len()));
            if d < bd || (d == bd && r.len() < best) {
                best = r.len();
            }
        }
        r_len += best as f64;
        for n in 1..=order {
            for (g, cnt) in grams(c, n) {
                let clip = rs.iter().map(|r| grams(r, n).get(&g).copied().unwrap_or(0.0)).fold(0.0, f64::max);
                matched[n - 1] += cnt.min(clip);
                total[n - 1] += cnt;
            }
        }
    }
    if c_len == 0.0 || matched.iter().any(|&m| m == 0.0) {
        return 0.0;
    }
    let bp = if c_len < r_len { (1.0 - r_len / c_len).exp() } else { 1.0 };
    let logs: f64 = matched.iter().zip(&total).map(|(m, t)| (m / t).ln()).sum();
    bp * (logs / order as f64).exp()
}

/// Clipped tf-idf cosine per order with the Gaussian length penalty,
/// averaged over orders and references and scaled by ten.
pub fn cider_oracle(cand: &Doc, refs: &[Doc], corpus: &[Vec<Doc>]) -> f64 {
    let n_docs = corpus.len() as f64;
    let df = |g: &str, n: usize| {
        corpus
            .iter()
            .filter(|rs| rs.iter().any(|r| grams(r, n).contains_key(g)))
            .count()
            .max(1) as f64
    };
    let vector = |s: &Doc, n: usize| -> BTreeMap<String, f64> {
        grams(s, n)
            .into_iter()
            .map(|(g, tf)| {
                let w = tf * (n_docs.ln() - df(&g, n).ln());
                (g, w)
            })
            .collect()
    };
    let norm = |v: &BTreeMap<String, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let mut total = 0.0;
    for r in refs {
        let delta = cand.len() as f64 - r.len() as f64;
        let pen = (-delta * delta / 72.0).exp();
        for n in 1..=4 {
            let vc = vector(cand, n);
            let vr = vector(r, n);
            let mut dot = 0.0;
            for (g, c) in &vc {
                if let Some(rv) = vr.get(g) {
                    dot += c.min(*rv) * rv;
                }
            }
            let (a, b) = (norm(&vc), norm(&vr));
            if a != 0.0 && b != 0.0 {
                dot /= a * b;
            }
            total += pen * dot / 4.0;
        }
    }
    10.0 * total / refs.len() as f64
}


/// Ten images with two or three references each and a noisy candidate.
pub fn corpus() -> (Vec<Doc>, Vec<Vec<Doc>>) {
    let words = ["a", "red", "blue", "patch", "top", "left", "bottom", "right", "mostly", "with", "marks"];
    let mut rng = RngState::new(2024);
    let sentence = |rng: &mut RngState| -> Doc {
        let len = 2 + rng.below(6);
        (0..len).map(|_| words[rng.below(words.len())].to_owned()).collect()
    };
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..10 {
        let rs: Vec<Doc> = (0..2 + rng.below(2)).map(|_| sentence(&mut rng)).collect();
        let mut c = rs[0].clone();
        if c.len() > 2 {
            let i = rng.below(c.len());
            c[i] = words[rng.below(words.len())].to_owned();
        }
        if rng.below(2) == 0 {
            c.push("marks".into());
        }
        cands.push(c);
        refs.push(rs);
    }
    (cands, refs)
}

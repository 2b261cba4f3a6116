//! Token vocabulary and padded caption batches.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{DtnError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens followed by `words` in order, duplicates dropped.
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for w in RESERVED.iter().copied().map(str::to_owned) {
            v.push(w);
        }
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !v.index.contains_key(&w) {
                v.push(w);
            }
        }
        v
    }

    fn push(&mut self, w: String) {
        self.index.insert(w.clone(), self.tokens.len());
        self.tokens.push(w);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace tokenization, lowercased; unknown words map to `UNK`.
    pub fn encode(&self, caption: &str) -> Vec<usize> {
        caption
            .split_whitespace()
            .map(|w| self.id(&w.to_lowercase()).unwrap_or(UNK))
            .collect()
    }

    /// Joins tokens with spaces, stopping at the first `EOS`, skipping `PAD`/`BOS`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str, path: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(DtnError::Format {
                path: path.into(),
                msg: format!("vocabulary must start with {}", RESERVED.join(", ")),
            });
        }
        let mut v = Self::new(std::iter::empty::<&str>());
        for (n, line) in lines.iter().enumerate().skip(RESERVED.len()) {
            if line.is_empty() || v.index.contains_key(*line) {
                return Err(DtnError::Format {
                    path: path.into(),
                    msg: format!("line {}: empty or duplicate token {line:?}", n + 1),
                });
            }
            v.push((*line).to_owned());
        }
        Ok(v)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }
}

/// Teacher-forcing batch: `inputs` start with `BOS`, `targets` end with `EOS`,
/// both `[B,T]` row-major and padded with `PAD`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionBatch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    /// Valid positions per row (words + 1).
    pub lengths: Vec<usize>,
    pub batch: usize,
    pub steps: usize,
}

impl CaptionBatch {
    pub fn from_captions(captions: &[Vec<usize>]) -> Self {
        let steps = captions.iter().map(|c| c.len() + 1).max().unwrap_or(0);
        let batch = captions.len();
        let mut inputs = vec![PAD; batch * steps];
        let mut targets = vec![PAD; batch * steps];
        for (b, cap) in captions.iter().enumerate() {
            let row = b * steps;
            inputs[row] = BOS;
            for (t, &w) in cap.iter().enumerate() {
                inputs[row + t + 1] = w;
                targets[row + t] = w;
            }
            targets[row + cap.len()] = EOS;
        }
        Self {
            inputs,
            targets,
            lengths: captions.iter().map(|c| c.len() + 1).collect(),
            batch,
            steps,
        }
    }

    /// 1.0 on valid positions, 0.0 on padding.
    pub fn mask(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.batch * self.steps];
        for (b, &len) in self.lengths.iter().enumerate() {
            m[b * self.steps..b * self.steps + len].fill(1.0);
        }
        m
    }
}

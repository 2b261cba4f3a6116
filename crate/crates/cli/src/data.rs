//! Dataset splits, seeds and run directories.

use std::path::{Path, PathBuf};

use dtnet_core::datagen::{gen_dataset, task_vocabulary, Dataset};
use dtnet_core::vocab::Vocabulary;
use dtnet_tensor::RngState;

use crate::config::RunConfig;
use crate::error::Result;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_FILE: &str = "config.txt";

/// Independent random streams derived from the run seed.
pub struct Seeds {
    root: RngState,
}

impl Seeds {
    pub fn new(seed: u64) -> Self {
        Self {
            root: RngState::new(seed),
        }
    }

    pub fn data(&self, split: usize) -> RngState {
        self.root.fork(1).fork(split as u64)
    }

    pub fn init(&self) -> u64 {
        self.root.fork(2).next_u64()
    }

    pub fn train(&self) -> RngState {
        self.root.fork(3)
    }

    pub fn diverse(&self) -> RngState {
        self.root.fork(4)
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub vocab: Vocabulary,
}

impl Splits {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let seeds = Seeds::new(cfg.seed);
        let sizes = [cfg.n_train, cfg.n_val, cfg.n_test];
        let mut sets = Vec::new();
        for (i, n) in sizes.into_iter().enumerate() {
            sets.push(gen_dataset(&mut seeds.data(i), n / 2, cfg.grid(), cfg.noise_sigma)?);
        }
        let test = sets.pop().expect("three splits");
        let val = sets.pop().expect("three splits");
        let train = sets.pop().expect("three splits");
        Ok(Self {
            train,
            val,
            test,
            vocab: task_vocabulary(),
        })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: Dataset::read(dir, "train")?,
            val: Dataset::read(dir, "val")?,
            test: Dataset::read(dir, "test")?,
            vocab: Vocabulary::read(&dir.join(VOCAB_FILE))?,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, d) in SPLITS.iter().zip([&self.train, &self.val, &self.test]) {
            d.write(dir, name)?;
        }
        self.vocab.write(&dir.join(VOCAB_FILE))?;
        Ok(())
    }

    /// Reads `data_dir` when set, otherwise regenerates from the seed.
    pub fn for_config(cfg: &RunConfig) -> Result<Self> {
        if cfg.data_dir.0.is_empty() {
            Self::generate(cfg)
        } else {
            Self::read(Path::new(&cfg.data_dir.0))
        }
    }

    pub fn split(&self, name: &str) -> &Dataset {
        match name {
            "train" => &self.train,
            "val" => &self.val,
            _ => &self.test,
        }
    }

    /// Token ids of every caption in a split.
    pub fn encoded(&self, d: &Dataset) -> Vec<Vec<usize>> {
        d.captions.iter().map(|c| self.vocab.encode(c)).collect()
    }
}

/// `out_dir/run_name`, or `out_dir/<timestamp>-seed<seed>` when the name is
/// empty. The effective config is written inside.
pub fn create_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let base = Path::new(&cfg.out_dir.0);
    let name = if cfg.run_name.0.is_empty() {
        format!("{}-seed{}", chrono::Local::now().format("%Y%m%d-%H%M%S"), cfg.seed)
    } else {
        cfg.run_name.0.clone()
    };
    let mut dir = base.join(&name);
    let mut n = 2;
    while cfg.run_name.0.is_empty() && dir.exists() {
        dir = base.join(format!("{name}-{n}"));
        n += 1;
    }
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    Ok(dir)
}

//! Flat `key = value` run configuration.
//!
//! Every key has a default. Files allow `#` comments and blank lines; the
//! command line uses `--key value`. Unknown keys and bad values are collected
//! and reported together.

use std::fmt::Write as _;
use std::path::Path;

use dtnet_core::config::{format_cells, parse_cells};
use dtnet_core::datagen::GridSpec;
use dtnet_core::training::Schedule;
use dtnet_core::{Arrangement, EncoderConfig, Grouping, ModelConfig, RouterVariant, RoutingType};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainPhase {
    Ce,
    Scst,
    Both,
}

impl std::str::FromStr for TrainPhase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ce" => Ok(Self::Ce),
            "scst" => Ok(Self::Scst),
            "both" => Ok(Self::Both),
            _ => Err(format!("expected ce, scst or both, got {s:?}")),
        }
    }
}

impl std::fmt::Display for TrainPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ce => "ce",
            Self::Scst => "scst",
            Self::Both => "both",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoutingKind {
    Soft,
    Hard,
}

impl std::str::FromStr for RoutingKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "soft" => Ok(Self::Soft),
            "hard" => Ok(Self::Hard),
            _ => Err(format!("expected soft or hard, got {s:?}")),
        }
    }
}

impl std::fmt::Display for RoutingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Soft => "soft",
            Self::Hard => "hard",
        })
    }
}

/// Comma-separated cell list kept as parsed kinds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cells(pub Vec<dtnet_core::CellKind>);

impl std::str::FromStr for Cells {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        parse_cells(s).map(Cells).map_err(|e| e.to_string())
    }
}

impl std::fmt::Display for Cells {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&format_cells(&self.0))
    }
}

/// Plain string value; `""` is written as an empty value.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Text(pub String);

impl std::str::FromStr for Text {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(Text(s.to_owned()))
    }
}

impl std::fmt::Display for Text {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr;)*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            fn set_one(&mut self, key: &str, value: &str) -> Result<(), String> {
                match key {
                    $(stringify!($key) => {
                        self.$key = value
                            .parse::<$ty>()
                            .map_err(|e| format!("{key}: {e}"))?;
                        Ok(())
                    })*
                    _ => Err(format!("unknown key {key:?}")),
                }
            }

            /// Every key in declaration order.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(writeln!(out, "{} = {}", stringify!($key), self.$key).expect("string write");)*
                out
            }
        }
    };
}

run_config! {
    seed: u64 = 0;
    /// Run directory name under `out_dir`; empty means timestamp plus seed.
    run_name: Text = Text::default();
    out_dir: Text = Text("runs".into());
    /// Dataset directory written by gen-data; empty regenerates from the seed.
    data_dir: Text = Text::default();
    /// Checkpoint to start from (train) or to inspect (other commands).
    checkpoint: Text = Text::default();

    grid_h: usize = 7;
    grid_w: usize = 7;
    channels: usize = 32;
    noise_sigma: f64 = 0.1;
    n_train: usize = 2000;
    n_val: usize = 200;
    n_test: usize = 200;

    layers: usize = 2;
    d_model: usize = 64;
    heads: usize = 4;
    spatial_cells: Cells = Cells(vec![
        dtnet_core::CellKind::Gmc,
        dtnet_core::CellKind::Lmc,
        dtnet_core::CellKind::Amc,
    ]);
    channel_cells: Cells = Cells(vec![dtnet_core::CellKind::Cpc, dtnet_core::CellKind::Cac]);
    arrangement: Arrangement = Arrangement::SThenC;
    grouping: Grouping = Grouping::Grouped;
    router: RouterVariant = RouterVariant::Scjr;
    routing: RoutingKind = RoutingKind::Soft;
    temperature: f64 = 1.0;
    decoder_layers: usize = 1;
    max_len: usize = 8;

    phase: TrainPhase = TrainPhase::Both;
    /// Hard cap on optimizer steps across phases; 0 follows the schedule.
    steps: usize = 0;
    batch_size: usize = 16;
    ce_epochs: usize = 12;
    scst_epochs: usize = 1;
    /// SCST batches per epoch; 0 runs a full pass.
    scst_steps_per_epoch: usize = 20;
    warmup_epochs: usize = 4;
    lr_peak: f64 = 1e-4;
    lr_scale: f64 = 10.0;
    clip: f64 = 5.0;
    scst_beam: usize = 5;
    /// Stop CE once validation exact-caption accuracy reaches this; 0 disables.
    early_stop: f64 = 0.99;
    /// Extra checkpoint every N steps; 0 writes only the final one.
    checkpoint_every: usize = 0;

    eval_beam: usize = 3;
    eval_split: Text = Text("test".into());
    threshold: f64 = 0.3;
    sample_id: u64 = 0;
    samples: usize = 4;
}

impl RunConfig {
    /// Applies `key = value` pairs, collecting every problem.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<(), CliError> {
        let mut bad = Vec::new();
        for (k, v) in pairs {
            if let Err(e) = self.set_one(k, v) {
                bad.push(e);
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(bad))
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        self.apply([(key, value)])
    }

    /// Parses the text form; unknown keys are errors.
    pub fn parse_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        let mut pairs = Vec::new();
        let mut bad = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => pairs.push((k.trim(), v.trim())),
                None => bad.push(format!("{origin}:{}: expected `key = value`", n + 1)),
            }
        }
        if let Err(CliError::Config(mut more)) = self.apply(pairs) {
            bad.append(&mut more);
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(bad))
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::default();
        cfg.parse_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            h: self.grid_h,
            w: self.grid_w,
            c: self.channels,
        }
    }

    pub fn routing_type(&self) -> RoutingType {
        match self.routing {
            RoutingKind::Soft => RoutingType::Soft,
            RoutingKind::Hard => RoutingType::Hard {
                temperature: self.temperature,
            },
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            spatial_cells: self.spatial_cells.0.clone(),
            channel_cells: self.channel_cells.0.clone(),
            arrangement: self.arrangement,
            grouping: self.grouping,
            router: self.router,
            routing: self.routing_type(),
            custom_groups: None,
        }
    }

    pub fn model(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder(),
            feature_dim: self.channels,
            decoder_layers: self.decoder_layers,
            vocab,
            max_len: self.max_len,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            warmup_epochs: self.warmup_epochs,
            peak: self.lr_peak,
            scale: self.lr_scale,
        }
    }

    /// Every semantic problem at once.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut bad = Vec::new();
        if let Err(e) = self.grid().validate() {
            bad.push(format!("grid_h/grid_w/channels: {e}"));
        }
        if let Err(e) = self.encoder().validate() {
            bad.push(format!("encoder: {e}"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            bad.push(format!("noise_sigma: must be non-negative, got {}", self.noise_sigma));
        }
        for (key, n) in [("n_train", self.n_train), ("n_val", self.n_val), ("n_test", self.n_test)] {
            if n == 0 || n % 2 != 0 {
                bad.push(format!("{key}: must be a positive even number, got {n}"));
            }
        }
        let positive = [
            ("decoder_layers", self.decoder_layers),
            ("max_len", self.max_len),
            ("batch_size", self.batch_size),
            ("eval_beam", self.eval_beam),
            ("samples", self.samples),
        ];
        for (key, n) in positive {
            if n == 0 {
                bad.push(format!("{key}: must be positive"));
            }
        }
        if self.scst_beam < 2 {
            bad.push(format!("scst_beam: needs at least 2, got {}", self.scst_beam));
        }
        if self.warmup_epochs == 0 {
            bad.push("warmup_epochs: must be positive".into());
        }
        for (key, v) in [("lr_peak", self.lr_peak), ("lr_scale", self.lr_scale), ("clip", self.clip)] {
            if !(v > 0.0 && v.is_finite()) {
                bad.push(format!("{key}: must be positive, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.early_stop) {
            bad.push(format!("early_stop: must lie in [0,1], got {}", self.early_stop));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            bad.push(format!("threshold: must lie in (0,1), got {}", self.threshold));
        }
        if !["train", "val", "test"].contains(&self.eval_split.0.as_str()) {
            bad.push(format!("eval_split: expected train, val or test, got {:?}", self.eval_split.0));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(bad))
        }
    }
}

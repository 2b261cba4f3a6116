//! The five subcommands. Each returns a summary struct so tests can drive
//! them without parsing output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dtnet_core::checkpoint;
use dtnet_core::datagen::{write_captions, Dataset, Family};
use dtnet_core::encoder::{path_vector, LayerTrace, RouteOpts};
use dtnet_core::metrics::{corpus_bleu, NGramStats};
use dtnet_core::router::{argmax, discretize_paths};
use dtnet_core::training::{Adam, Phase};
use dtnet_core::{Captioner32, DecodeMode, RoutingType};
use dtnet_tensor::RngState;

use crate::config::{RunConfig, TrainPhase};
use crate::data::{create_run_dir, Seeds, Splits};
use crate::error::{CliError, Result};

/// Samples per forward pass outside training.
const EVAL_BATCH: usize = 50;

pub const CHECKPOINT_FILE: &str = "final.dtnc";

fn checked(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    create_run_dir(cfg)
}

pub fn gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = checked(cfg)?;
    let target = if cfg.data_dir.0.is_empty() {
        dir.join("data")
    } else {
        PathBuf::from(&cfg.data_dir.0)
    };
    Splits::generate(cfg)?.write(&target)?;
    Ok(target)
}

/// Fresh model from the run seed, overwritten by `checkpoint` when set.
pub fn build_model(cfg: &RunConfig, splits: &Splits) -> Result<Captioner32> {
    let mut model = Captioner32::new(&cfg.model(splits.vocab.len()), Seeds::new(cfg.seed).init())?;
    if !cfg.checkpoint.0.is_empty() {
        checkpoint::load(&mut model, Path::new(&cfg.checkpoint.0))?;
    }
    Ok(model)
}

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub steps: usize,
    /// CE epochs actually run.
    pub ce_epochs: usize,
    /// Greedy exact-caption accuracy on the validation split after each CE epoch.
    pub val_exact: Vec<f64>,
    pub model: Captioner32,
    pub splits: Splits,
}

fn batches(rng: &mut RngState, n: usize, size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    dir: &'a Path,
    log: BufWriter<File>,
    step: usize,
}

impl Trainer<'_> {
    fn done(&self) -> bool {
        self.cfg.steps > 0 && self.step >= self.cfg.steps
    }

    fn record(&mut self, model: &Captioner32, loss: f64, lr: f64, reward: Option<f64>) -> Result<()> {
        self.step += 1;
        match reward {
            Some(r) => writeln!(self.log, "{} {loss:.6} {lr:.3e} {r:.6}", self.step)?,
            None => writeln!(self.log, "{} {loss:.6} {lr:.3e}", self.step)?,
        }
        let every = self.cfg.checkpoint_every;
        if every > 0 && self.step % every == 0 {
            checkpoint::save(model, &self.dir.join(format!("step-{:06}.dtnc", self.step)))?;
        }
        Ok(())
    }
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let dir = checked(cfg)?;
    let splits = Splits::for_config(cfg)?;
    if splits.train.is_empty() {
        return Err(CliError::config("training split is empty"));
    }
    let mut model = build_model(cfg, &splits)?;
    splits.vocab.write(&dir.join(crate::data::VOCAB_FILE))?;
    let mut rng = Seeds::new(cfg.seed).train();
    let mut opt = Adam::new(&model.params);
    let schedule = cfg.schedule();
    let mut t = Trainer {
        cfg,
        dir: &dir,
        log: BufWriter::new(File::create(dir.join("train.log"))?),
        step: 0,
    };
    let mut epochs_log = BufWriter::new(File::create(dir.join("epochs.log"))?);
    let train_caps = splits.encoded(&splits.train);
    let mut val_exact = Vec::new();
    let mut ce_epochs = 0;

    if cfg.phase != TrainPhase::Scst {
        'ce: for epoch in 0..cfg.ce_epochs {
            let lr = schedule.lr(Phase::Ce, epoch);
            for idx in batches(&mut rng, splits.train.len(), cfg.batch_size) {
                let feats = splits.train.batch_features(&idx);
                let caps: Vec<_> = idx.iter().map(|&i| train_caps[i].clone()).collect();
                let s = model.ce_step(&feats, &caps, &mut opt, lr, cfg.clip, &mut rng)?;
                t.record(&model, s.loss, lr, None)?;
                if t.done() {
                    ce_epochs = epoch + 1;
                    break 'ce;
                }
            }
            ce_epochs = epoch + 1;
            if !splits.val.is_empty() {
                let acc = exact_accuracy(&mut model, &splits.val, &splits, DecodeMode::Greedy)?;
                writeln!(epochs_log, "ce epoch {epoch} step {} val_exact {acc:.4}", t.step)?;
                val_exact.push(acc);
                if cfg.early_stop > 0.0 && acc >= cfg.early_stop {
                    break;
                }
            }
        }
    }

    if cfg.phase != TrainPhase::Ce && !t.done() {
        let refs: Vec<Vec<Vec<usize>>> = train_caps.iter().map(|c| vec![c.clone()]).collect();
        let stats = NGramStats::new(&refs);
        let first = if cfg.phase == TrainPhase::Scst { cfg.ce_epochs } else { ce_epochs };
        'scst: for e in 0..cfg.scst_epochs {
            let epoch = first + e;
            let lr = schedule.lr(Phase::Scst, epoch);
            let mut all = batches(&mut rng, splits.train.len(), cfg.batch_size);
            if cfg.scst_steps_per_epoch > 0 {
                all.truncate(cfg.scst_steps_per_epoch);
            }
            for idx in all {
                let feats = splits.train.batch_features(&idx);
                let r: Vec<_> = idx.iter().map(|&i| refs[i].clone()).collect();
                let s = model.scst_step(&feats, &r, &stats, cfg.scst_beam, &mut opt, lr, cfg.clip, &mut rng)?;
                t.record(&model, s.loss, lr, s.reward)?;
                if t.done() {
                    break 'scst;
                }
            }
            writeln!(epochs_log, "scst epoch {epoch} step {}", t.step)?;
        }
    }

    t.log.flush()?;
    epochs_log.flush()?;
    let steps = t.step;
    let path = dir.join(CHECKPOINT_FILE);
    checkpoint::save(&model, &path)?;
    Ok(TrainOutcome {
        run_dir: dir,
        checkpoint: path,
        steps,
        ce_epochs,
        val_exact,
        model,
        splits,
    })
}

/// Best caption per sample, decoded in chunks.
pub fn captions(model: &mut Captioner32, data: &Dataset, mode: DecodeMode) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        out.extend(model.caption(&data.batch_features(idx), mode)?);
    }
    Ok(out)
}

pub fn exact_accuracy(model: &mut Captioner32, data: &Dataset, splits: &Splits, mode: DecodeMode) -> Result<f64> {
    let hyps = captions(model, data, mode)?;
    let refs = splits.encoded(data);
    Ok(exact_fraction(&hyps, &refs))
}

fn exact_fraction(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    if hyps.is_empty() {
        return 0.0;
    }
    hyps.iter().zip(refs).filter(|(h, r)| h == r).count() as f64 / hyps.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub samples: usize,
    pub bleu1: f64,
    pub bleu4: f64,
    /// CIDEr-D in table units (x100).
    pub cider_d: f64,
    pub exact: f64,
}

impl Scores {
    /// Corpus scores of token captions against one reference each. Empty
    /// candidates score zero.
    pub fn of(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<Self> {
        let ref_sets: Vec<Vec<Vec<usize>>> = refs.iter().map(|r| vec![r.clone()]).collect();
        let cider_d = if ref_sets.is_empty() {
            0.0
        } else {
            100.0 * NGramStats::new(&ref_sets).cider_d_corpus(hyps, &ref_sets)?.1
        };
        Ok(Self {
            samples: hyps.len(),
            bleu1: corpus_bleu(hyps, &ref_sets, 1),
            bleu4: corpus_bleu(hyps, &ref_sets, 4),
            cider_d,
            exact: exact_fraction(hyps, refs),
        })
    }

    /// Aligned table followed by a `key=value` block.
    pub fn report(&self, split: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10}{:>10}", "metric", split);
        for (name, v) in [
            ("BLEU-1", self.bleu1),
            ("BLEU-4", self.bleu4),
            ("CIDEr-D", self.cider_d),
            ("exact", self.exact),
        ] {
            let _ = writeln!(s, "{name:<10}{v:>10.4}");
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "split={split}");
        let _ = writeln!(s, "samples={}", self.samples);
        let _ = writeln!(s, "bleu1={:.6}", self.bleu1);
        let _ = writeln!(s, "bleu4={:.6}", self.bleu4);
        let _ = writeln!(s, "cider_d={:.6}", self.cider_d);
        let _ = writeln!(s, "exact={:.6}", self.exact);
        s
    }
}

/// Scores of one split plus the generated token ids in sample order.
pub fn evaluate(
    model: &mut Captioner32,
    splits: &Splits,
    split: &str,
    beam: usize,
) -> Result<(Scores, Vec<Vec<usize>>)> {
    let data = splits.split(split);
    let mode = if beam > 1 { DecodeMode::Beam(beam) } else { DecodeMode::Greedy };
    let hyps = captions(model, data, mode)?;
    Ok((Scores::of(&hyps, &splits.encoded(data))?, hyps))
}

pub struct EvalOutcome {
    pub run_dir: PathBuf,
    pub scores: Scores,
    pub report: String,
    /// Decoded caption per sample of the evaluated split.
    pub captions: Vec<String>,
}

pub fn eval(cfg: &RunConfig) -> Result<EvalOutcome> {
    let dir = checked(cfg)?;
    let splits = Splits::for_config(cfg)?;
    let mut model = build_model(cfg, &splits)?;
    let (scores, hyps) = evaluate(&mut model, &splits, &cfg.eval_split.0, cfg.eval_beam)?;
    let report = scores.report(&cfg.eval_split.0);
    std::fs::write(dir.join("report.txt"), &report)?;
    let captions: Vec<String> = hyps.iter().map(|h| splits.vocab.decode(h)).collect();
    write_captions(&dir.join("captions.tsv"), &splits.split(&cfg.eval_split.0).ids, &captions)?;
    Ok(EvalOutcome {
        run_dir: dir,
        scores,
        report,
        captions,
    })
}

#[derive(Clone, Debug)]
pub struct RouteReport {
    /// `id layer space weights... active` lines, tab-separated.
    pub lines: Vec<String>,
    /// Active cells per sample (all layers and spaces) -> number of samples.
    pub histogram: BTreeMap<usize, usize>,
    /// Concatenated path weights per sample.
    pub paths: Vec<Vec<f64>>,
    pub families: Vec<Family>,
}

impl RouteReport {
    pub fn histogram_text(&self) -> String {
        let mut s = String::from("active_cells\tsamples\n");
        for (k, v) in &self.histogram {
            let _ = writeln!(s, "{k}\t{v}");
        }
        s
    }
}

fn space_names(model: &Captioner32) -> Vec<Vec<(String, Vec<&'static str>)>> {
    model
        .net
        .encoder
        .layers
        .iter()
        .map(|l| {
            l.blocks
                .iter()
                .map(|b| (b.group.name.clone(), b.cells.iter().map(|c| c.kind().tag()).collect()))
                .collect()
        })
        .collect()
}

/// Eval-mode path weights of every sample in `data`.
pub fn inspect_routes(model: &mut Captioner32, data: &Dataset, threshold: f64) -> Result<RouteReport> {
    let names = space_names(model);
    let mut report = RouteReport {
        lines: Vec::new(),
        histogram: BTreeMap::new(),
        paths: Vec::new(),
        families: Vec::new(),
    };
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let traces = model.trace(&data.batch_features(idx))?;
        let active: Vec<Vec<Vec<Vec<usize>>>> = traces
            .iter()
            .map(|t| t.spaces.iter().map(|s| discretize_paths(s, threshold)).collect())
            .collect::<dtnet_core::Result<_>>()?;
        for (b, &i) in idx.iter().enumerate() {
            let mut count = 0;
            for (t, layer_active) in traces.iter().zip(&active) {
                for (k, space) in t.spaces.iter().enumerate() {
                    let (name, tags) = &names[t.layer][k];
                    let weights: Vec<String> = space.row(b).iter().map(|w| format!("{w:.6}")).collect();
                    let on: Vec<&str> = layer_active[k][b].iter().map(|&c| tags[c]).collect();
                    count += on.len();
                    report.lines.push(format!(
                        "{}\t{}\t{name}\t{}\t{}",
                        data.ids[i],
                        t.layer,
                        weights.join("\t"),
                        on.join(",")
                    ));
                }
            }
            *report.histogram.entry(count).or_default() += 1;
            report.paths.push(path_vector(&traces, b));
            report.families.push(data.family(i));
        }
    }
    Ok(report)
}

pub struct RouteOutcome {
    pub run_dir: PathBuf,
    pub report: RouteReport,
}

pub fn route_inspect(cfg: &RunConfig) -> Result<RouteOutcome> {
    let dir = checked(cfg)?;
    let splits = Splits::for_config(cfg)?;
    let mut model = build_model(cfg, &splits)?;
    let report = inspect_routes(&mut model, splits.split(&cfg.eval_split.0), cfg.threshold)?;
    let mut tsv = report.lines.join("\n");
    tsv.push('\n');
    std::fs::write(dir.join("routes.tsv"), tsv)?;
    std::fs::write(dir.join("histogram.tsv"), report.histogram_text())?;
    Ok(RouteOutcome { run_dir: dir, report })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiverseCaption {
    /// Chosen cell per layer and routing space.
    pub path: Vec<&'static str>,
    pub caption: String,
}

fn hard_path(model: &Captioner32, traces: &[LayerTrace<f32>]) -> Vec<&'static str> {
    let names = space_names(model);
    traces
        .iter()
        .flat_map(|t| {
            let names = &names[t.layer];
            t.spaces
                .iter()
                .enumerate()
                .map(move |(k, s)| names[k].1[argmax(s.row(0))])
        })
        .collect()
}

/// `k` greedy captions of sample `i`, each under an independently sampled
/// hard path.
pub fn diverse_captions(
    model: &mut Captioner32,
    splits: &Splits,
    data: &Dataset,
    i: usize,
    k: usize,
    rng: &mut RngState,
) -> Result<Vec<DiverseCaption>> {
    let feats = data.batch_features(&[i]);
    let hard = match model.cfg.encoder.routing {
        RoutingType::Hard { temperature } => RoutingType::Hard { temperature },
        RoutingType::Soft => RoutingType::Hard { temperature: 1.0 },
    };
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut opts = RouteOpts {
            rng: Some(&mut *rng),
            routing: Some(hard),
            trace: true,
            ..RouteOpts::default()
        };
        let (memory, traces) = model.encode_memory(&feats, &mut opts)?;
        let hyp = model.greedy_from_memory(&memory, 1)?.remove(0);
        out.push(DiverseCaption {
            path: hard_path(model, &traces),
            caption: splits.vocab.decode(&hyp.tokens),
        });
    }
    Ok(out)
}

pub struct DiverseOutcome {
    pub run_dir: PathBuf,
    pub captions: Vec<DiverseCaption>,
}

pub fn diverse_sample(cfg: &RunConfig) -> Result<DiverseOutcome> {
    let dir = checked(cfg)?;
    let splits = Splits::for_config(cfg)?;
    let mut model = build_model(cfg, &splits)?;
    let data = splits.split(&cfg.eval_split.0);
    let i = data
        .ids
        .iter()
        .position(|&id| id == cfg.sample_id)
        .ok_or_else(|| CliError::config(format!("sample_id: no sample {} in {}", cfg.sample_id, cfg.eval_split)))?;
    let mut rng = Seeds::new(cfg.seed).diverse();
    let captions = diverse_captions(&mut model, &splits, data, i, cfg.samples, &mut rng)?;
    let mut text = String::new();
    for c in &captions {
        let _ = writeln!(text, "{}\t{}", c.path.join(","), c.caption);
    }
    std::fs::write(dir.join("diverse.txt"), text)?;
    Ok(DiverseOutcome { run_dir: dir, captions })
}

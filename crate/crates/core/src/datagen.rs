//! Synthetic grid-captioning task and its file formats.
//!
//! The last quarter of the channels marks cells; the rest is split evenly
//! between the colors (leftover channels carry only noise).
//! LOCAL samples plant a 2x2 patch of one color and are captioned with its
//! color and coarse position. GLOBAL samples tint the whole grid toward a
//! dominant color and sprinkle 1-4 marked cells; the caption names the color
//! and the parity of the mark count.

use std::io::{Read, Write};
use std::path::Path;

use dtnet_tensor::codec::{put_f32s, put_u32, put_u64, ByteReader};
use dtnet_tensor::{RngState, Scalar, Tensor, TensorError};

use crate::error::{config_err, DtnError, Result};
use crate::vocab::Vocabulary;

pub const FEATURE_MAGIC: &[u8; 4] = b"DTNF";
pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
const MAX_SAMPLE_VALUES: usize = 1 << 24;
pub const MAX_MARKS: usize = 2;
/// Marked cells stand out well above the unit-height color patches so that
/// the mark count survives spatial pooling.
pub const MARK_VALUE: f32 = 3.0;
const ROWS: [&str; 3] = ["top", "middle", "bottom"];
const COLS: [&str; 3] = ["left", "center", "right"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Local,
    Global,
}

impl Family {
    /// Family implied by a caption's wording.
    pub fn of_caption(caption: &str) -> Family {
        if caption.starts_with("mostly") {
            Family::Global
        } else {
            Family::Local
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { h: 7, w: 7, c: 32 }
    }
}

impl GridSpec {
    pub fn cells(&self) -> usize {
        self.h * self.w * self.c
    }

    /// Channels given to each color.
    pub fn per_color(&self) -> usize {
        (self.c - self.c / 4) / COLORS.len()
    }

    /// First marker channel; markers run to the end.
    pub fn marker_base(&self) -> usize {
        self.c - self.c / 4
    }

    fn color_range(&self, k: usize) -> std::ops::Range<usize> {
        k * self.per_color()..(k + 1) * self.per_color()
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.h < 3 || self.w < 3 {
            bad.push(format!("grid must be at least 3x3, got {}x{}", self.h, self.w));
        }
        if self.c < 16 {
            bad.push(format!("need at least 16 channels, got {}", self.c));
        }
        if self.cells() > MAX_SAMPLE_VALUES {
            bad.push(format!("grid {}x{}x{} is too large", self.h, self.w, self.c));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(config_err(bad.join("; ")))
        }
    }
}

/// Samples with row-major `[H,W,C]` features and their captions.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub grid: GridSpec,
    pub ids: Vec<u64>,
    pub features: Vec<f32>,
    pub captions: Vec<String>,
}

impl Dataset {
    pub fn empty(grid: GridSpec) -> Self {
        Self {
            grid,
            ids: Vec::new(),
            features: Vec::new(),
            captions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.grid.cells();
        &self.features[i * n..(i + 1) * n]
    }

    /// Features of the listed samples as `[B,H,W,C]`.
    pub fn batch_features<T: Scalar>(&self, idx: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(idx.len() * self.grid.cells());
        for &i in idx {
            data.extend(self.sample(i).iter().map(|&v| T::of(v as f64)));
        }
        let g = self.grid;
        Tensor::new(&[idx.len(), g.h, g.w, g.c], data).expect("sizes agree")
    }

    pub fn family(&self, i: usize) -> Family {
        Family::of_caption(&self.captions[i])
    }

    pub fn write(&self, dir: &Path, split: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_features(&dir.join(format!("{split}.feat")), self)?;
        write_captions(&dir.join(format!("{split}.cap")), &self.ids, &self.captions)
    }

    pub fn read(dir: &Path, split: &str) -> Result<Self> {
        let mut d = read_features(&dir.join(format!("{split}.feat")))?;
        let caps = read_captions(&dir.join(format!("{split}.cap")))?;
        if caps.len() != d.len() || caps.iter().zip(&d.ids).any(|((id, _), want)| id != want) {
            return Err(DtnError::Format {
                path: dir.join(format!("{split}.cap")).display().to_string(),
                msg: "caption ids do not match the feature file".into(),
            });
        }
        d.captions = caps.into_iter().map(|(_, c)| c).collect();
        Ok(d)
    }
}

fn fill_normal(buf: &mut [f32], sigma: f64, rng: &mut RngState) {
    if sigma > 0.0 {
        for v in buf {
            *v += (sigma * rng.normal()) as f32;
        }
    }
}

fn plant_local(g: GridSpec, buf: &mut [f32], rng: &mut RngState) -> String {
    let color = rng.below(COLORS.len());
    let r = rng.below(g.h - 1);
    let c = rng.below(g.w - 1);
    let range = g.color_range(color);
    for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let base = ((r + dr) * g.w + (c + dc)) * g.c;
        buf[base + range.start..base + range.end].fill(1.0);
    }
    format!(
        "{} patch {} {}",
        COLORS[color],
        ROWS[bucket(r, g.h - 1)],
        COLS[bucket(c, g.w - 1)]
    )
}

/// Splits `0..n` into three nearly equal ranges.
fn bucket(pos: usize, n: usize) -> usize {
    (pos * 3 / n).min(2)
}

fn plant_global(g: GridSpec, buf: &mut [f32], rng: &mut RngState) -> String {
    let color = rng.below(COLORS.len());
    let colored = COLORS.len() * g.per_color();
    for cell in buf.chunks_mut(g.c) {
        for v in &mut cell[..colored] {
            *v = rng.uniform_in(0.0, 0.3) as f32;
        }
        for v in &mut cell[g.color_range(color)] {
            *v += 0.4;
        }
    }
    let marks = 1 + rng.below(MAX_MARKS);
    let mut cells: Vec<usize> = (0..g.h * g.w).collect();
    rng.shuffle(&mut cells);
    for &cell in &cells[..marks] {
        buf[cell * g.c + g.marker_base()..(cell + 1) * g.c].fill(MARK_VALUE);
    }
    let parity = if marks % 2 == 1 { "odd" } else { "even" };
    format!("mostly {} with {parity} marks", COLORS[color])
}

/// `n_per_family` samples of each family, alternating LOCAL and GLOBAL,
/// with ids `0..2n` and additive Gaussian noise of std `noise_sigma`.
pub fn gen_dataset(rng: &mut RngState, n_per_family: usize, grid: GridSpec, noise_sigma: f64) -> Result<Dataset> {
    grid.validate()?;
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(config_err(format!("noise_sigma must be non-negative, got {noise_sigma}")));
    }
    let mut d = Dataset::empty(grid);
    for i in 0..2 * n_per_family {
        let mut buf = vec![0.0f32; grid.cells()];
        let caption = if i % 2 == 0 {
            plant_local(grid, &mut buf, rng)
        } else {
            plant_global(grid, &mut buf, rng)
        };
        fill_normal(&mut buf, noise_sigma, rng);
        d.ids.push(i as u64);
        d.features.extend_from_slice(&buf);
        d.captions.push(caption);
    }
    Ok(d)
}

/// Every word any generated caption can use.
pub fn task_vocabulary() -> Vocabulary {
    let mut words: Vec<&str> = COLORS.to_vec();
    words.push("patch");
    words.extend(ROWS);
    words.extend(COLS);
    words.extend(["mostly", "with", "odd", "even", "marks"]);
    Vocabulary::new(words)
}

/// Reads the caption back from noiseless features.
pub fn rule_decode(g: GridSpec, feat: &[f32]) -> String {
    let cell = |r: usize, c: usize| &feat[(r * g.w + c) * g.c..(r * g.w + c + 1) * g.c];
    let color_mass = |v: &[f32], k: usize| -> f32 { v[g.color_range(k)].iter().sum() };
    let mb = g.marker_base();
    let marks = (0..g.h * g.w)
        .filter(|&i| {
            let v = cell(i / g.w, i % g.w);
            v[mb..].iter().sum::<f32>() / (g.c - mb) as f32 > 0.5
        })
        .count();
    if marks > 0 {
        let totals: Vec<f32> = (0..COLORS.len())
            .map(|k| (0..g.h * g.w).map(|i| color_mass(cell(i / g.w, i % g.w), k)).sum())
            .collect();
        let color = argmax_f32(&totals);
        let parity = if marks % 2 == 1 { "odd" } else { "even" };
        return format!("mostly {} with {parity} marks", COLORS[color]);
    }
    let mut best = (f32::MIN, 0, 0, 0);
    for r in 0..g.h - 1 {
        for c in 0..g.w - 1 {
            for k in 0..COLORS.len() {
                let s = color_mass(cell(r, c), k)
                    + color_mass(cell(r, c + 1), k)
                    + color_mass(cell(r + 1, c), k)
                    + color_mass(cell(r + 1, c + 1), k);
                if s > best.0 {
                    best = (s, r, c, k);
                }
            }
        }
    }
    let (_, r, c, k) = best;
    format!(
        "{} patch {} {}",
        COLORS[k],
        ROWS[bucket(r, g.h - 1)],
        COLS[bucket(c, g.w - 1)]
    )
}

fn argmax_f32(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Spatial mean of every channel, `[C]` per sample.
pub fn pooled_features(d: &Dataset, i: usize) -> Vec<f64> {
    let g = d.grid;
    let mut out = vec![0.0; g.c];
    for cell in d.sample(i).chunks(g.c) {
        for (o, &v) in out.iter_mut().zip(cell) {
            *o += v as f64;
        }
    }
    let n = (g.h * g.w) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

fn format_err(path: &Path, e: TensorError) -> DtnError {
    match e {
        TensorError::Io(e) => DtnError::Io(e),
        other => DtnError::Format {
            path: path.display().to_string(),
            msg: other.to_string(),
        },
    }
}

pub fn encode_features(d: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + d.len() * (8 + 4 * d.grid.cells()));
    out.extend_from_slice(FEATURE_MAGIC);
    let header = [d.len(), d.grid.h, d.grid.w, d.grid.c];
    for v in header {
        put_u32(&mut out, v as u32).expect("vec write");
    }
    for i in 0..d.len() {
        put_u64(&mut out, d.ids[i]).expect("vec write");
        put_f32s(&mut out, d.sample(i).iter().copied()).expect("vec write");
    }
    out
}

pub fn decode_features<R: Read>(r: R) -> Result<Dataset, TensorError> {
    let mut r = ByteReader::new(r);
    r.expect_magic(FEATURE_MAGIC)?;
    let count = r.u32("sample count")? as usize;
    let grid = GridSpec {
        h: r.u32("grid height")? as usize,
        w: r.u32("grid width")? as usize,
        c: r.u32("channel count")? as usize,
    };
    if grid.cells() > MAX_SAMPLE_VALUES {
        return Err(TensorError::Format {
            offset: 8,
            msg: format!("implausible grid {}x{}x{}", grid.h, grid.w, grid.c),
        });
    }
    let mut d = Dataset::empty(grid);
    for i in 0..count {
        d.ids.push(r.u64(&format!("id of sample {i}"))?);
        d.features.extend(r.f32s(grid.cells(), &format!("features of sample {i}"))?);
    }
    r.expect_eof()?;
    d.captions = vec![String::new(); count];
    Ok(d)
}

pub fn write_features(path: &Path, d: &Dataset) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_features(d))?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    decode_features(std::io::BufReader::new(f)).map_err(|e| format_err(path, e))
}

pub fn write_captions(path: &Path, ids: &[u64], captions: &[String]) -> Result<()> {
    let mut s = String::new();
    for (id, c) in ids.iter().zip(captions) {
        s.push_str(&format!("{id}\t{c}\n"));
    }
    Ok(std::fs::write(path, s)?)
}

pub fn read_captions(path: &Path) -> Result<Vec<(u64, String)>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            let bad = || DtnError::Format {
                path: path.display().to_string(),
                msg: format!("line {}: expected id<TAB>caption", n + 1),
            };
            let (id, cap) = line.split_once('\t').ok_or_else(bad)?;
            Ok((id.parse().map_err(|_| bad())?, cap.to_owned()))
        })
        .collect()
}

//! Single-file checkpoints: a text manifest followed by DTNT blobs.
//!
//! ```text
//! dtnet-checkpoint 1
//! param in_proj.W 1032
//! buffer enc.0.lmc.s0.bn_id.running_mean 264
//! ...
//! <empty line>
//! <blobs in manifest order>
//! ```
//!
//! Entries keep the store's registration order, so identical models give
//! identical bytes.

use std::io::Read;
use std::path::Path;

use dtnet_tensor::{Scalar, Tensor};

use crate::error::{DtnError, Result};
use crate::model::Captioner;

pub const HEADER: &str = "dtnet-checkpoint 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    Param,
    Buffer,
}

impl EntryKind {
    fn tag(self) -> &'static str {
        match self {
            EntryKind::Param => "param",
            EntryKind::Buffer => "buffer",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T> {
    pub kind: EntryKind,
    pub name: String,
    pub value: Tensor<T>,
}

fn buffers<T: Scalar>(model: &Captioner<T>) -> Vec<(String, Tensor<T>)> {
    let mut out = Vec::new();
    for (name, bn) in model.net.encoder.bn_states() {
        let n = bn.channels();
        out.push((
            format!("{name}.running_mean"),
            Tensor::new(&[n], bn.running_mean.clone()).expect("length matches"),
        ));
        out.push((
            format!("{name}.running_var"),
            Tensor::new(&[n], bn.running_var.clone()).expect("length matches"),
        ));
    }
    out
}

/// Every parameter then every batch-norm buffer.
pub fn entries<T: Scalar>(model: &Captioner<T>) -> Vec<Entry<T>> {
    let mut out: Vec<Entry<T>> = model
        .params
        .iter()
        .map(|(_, p)| Entry {
            kind: EntryKind::Param,
            name: p.name.clone(),
            value: p.value.clone(),
        })
        .collect();
    out.extend(buffers(model).into_iter().map(|(name, value)| Entry {
        kind: EntryKind::Buffer,
        name,
        value,
    }));
    out
}

pub fn encode<T: Scalar>(entries: &[Entry<T>]) -> Vec<u8> {
    let blobs: Vec<Vec<u8>> = entries.iter().map(|e| e.value.to_dtnt_bytes()).collect();
    let mut manifest = format!("{HEADER}\n");
    for (e, b) in entries.iter().zip(&blobs) {
        manifest.push_str(&format!("{} {} {}\n", e.kind.tag(), e.name, b.len()));
    }
    manifest.push('\n');
    let mut out = manifest.into_bytes();
    for b in blobs {
        out.extend(b);
    }
    out
}

fn bad(path: &str, msg: impl Into<String>) -> DtnError {
    DtnError::Format {
        path: path.to_owned(),
        msg: msg.into(),
    }
}

pub fn decode<T: Scalar>(bytes: &[u8], path: &str) -> Result<Vec<Entry<T>>> {
    let end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| bad(path, "manifest is not terminated by an empty line"))?;
    let manifest = std::str::from_utf8(&bytes[..end]).map_err(|_| bad(path, "manifest is not UTF-8"))?;
    let mut lines = manifest.lines();
    if lines.next() != Some(HEADER) {
        return Err(bad(path, format!("expected header {HEADER:?}")));
    }
    let mut offset = end + 2;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(' ').collect();
        let [kind, name, len] = fields[..] else {
            return Err(bad(path, format!("manifest line {}: expected `kind name bytes`", i + 2)));
        };
        let kind = match kind {
            "param" => EntryKind::Param,
            "buffer" => EntryKind::Buffer,
            other => return Err(bad(path, format!("manifest line {}: unknown kind {other:?}", i + 2))),
        };
        let len: usize = len
            .parse()
            .map_err(|_| bad(path, format!("manifest line {}: bad length {len:?}", i + 2)))?;
        let blob = bytes
            .get(offset..offset + len)
            .ok_or_else(|| bad(path, format!("byte {offset}: blob for {name} is truncated")))?;
        let value = Tensor::from_dtnt_bytes(blob)
            .map_err(|e| bad(path, format!("blob for {name} starting at byte {offset}: {e}")))?;
        out.push(Entry {
            kind,
            name: name.to_owned(),
            value,
        });
        offset += len;
    }
    if offset != bytes.len() {
        return Err(bad(path, format!("byte {offset}: trailing data after the last blob")));
    }
    Ok(out)
}

/// Writes every entry in registration order.
pub fn save<T: Scalar>(model: &Captioner<T>, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, encode(&entries(model)))?)
}

/// Overwrites a model's parameters and buffers; names and shapes must match exactly.
pub fn restore<T: Scalar>(model: &mut Captioner<T>, entries: Vec<Entry<T>>, path: &str) -> Result<()> {
    let want = self::entries(model);
    if want.len() != entries.len() {
        return Err(bad(
            path,
            format!("checkpoint has {} entries, model needs {}", entries.len(), want.len()),
        ));
    }
    for (w, e) in want.iter().zip(&entries) {
        if w.kind != e.kind || w.name != e.name || w.value.shape() != e.value.shape() {
            return Err(bad(
                path,
                format!(
                    "entry {} {:?} does not match model entry {} {:?}",
                    e.name,
                    e.value.shape(),
                    w.name,
                    w.value.shape()
                ),
            ));
        }
    }
    let mut it = entries.into_iter();
    for p in model.params.iter_mut() {
        p.value = it.next().expect("counts checked").value;
    }
    for (_, bn) in model.net.encoder.bn_states_mut() {
        bn.running_mean = it.next().expect("counts checked").value.into_data();
        bn.running_var = it.next().expect("counts checked").value.into_data();
    }
    Ok(())
}

pub fn load<T: Scalar>(model: &mut Captioner<T>, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let shown = path.display().to_string();
    let entries = decode(&bytes, &shown)?;
    restore(model, entries, &shown)
}

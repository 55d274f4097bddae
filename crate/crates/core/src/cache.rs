//! Per-layer prompt and response feature caches.
//!
//! Each side of each layer stores the four features the layer splits on:
//! post-projection keys and values, the attention output after the output
//! projection, and the FFN output before its residual add. Every row carries
//! the step of its last write so staleness can be audited.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::{check_indices, scatter_rows_into, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Prompt,
    Response,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Prompt => "prompt",
            Side::Response => "response",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Feature {
    Key,
    Value,
    AttnOut,
    FfnOut,
}

impl Feature {
    pub const ALL: [Feature; 4] = [Feature::Key, Feature::Value, Feature::AttnOut, Feature::FfnOut];

    fn slot(self) -> usize {
        self as usize
    }
}

/// The four cached matrices of one layer and one side.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFeatures {
    pub k: Matrix,
    pub v: Matrix,
    pub attn_out: Matrix,
    pub ffn_out: Matrix,
}

impl LayerFeatures {
    pub fn zeros(rows: usize, hidden_dim: usize) -> Self {
        Self {
            k: Matrix::zeros(rows, hidden_dim),
            v: Matrix::zeros(rows, hidden_dim),
            attn_out: Matrix::zeros(rows, hidden_dim),
            ffn_out: Matrix::zeros(rows, hidden_dim),
        }
    }

    pub fn get(&self, feature: Feature) -> &Matrix {
        match feature {
            Feature::Key => &self.k,
            Feature::Value => &self.v,
            Feature::AttnOut => &self.attn_out,
            Feature::FfnOut => &self.ffn_out,
        }
    }

    fn get_mut(&mut self, feature: Feature) -> &mut Matrix {
        match feature {
            Feature::Key => &mut self.k,
            Feature::Value => &mut self.v,
            Feature::AttnOut => &mut self.attn_out,
            Feature::FfnOut => &mut self.ffn_out,
        }
    }

    pub fn rows(&self) -> usize {
        self.k.rows()
    }

    /// Checks that all four matrices are `rows × hidden_dim`.
    pub fn check_shape(&self, rows: usize, hidden_dim: usize) -> Result<()> {
        for f in Feature::ALL {
            let m = self.get(f);
            contract!(
                m.rows() == rows && m.cols() == hidden_dim,
                "{f:?} is {}x{}, expected {rows}x{hidden_dim}",
                m.rows(),
                m.cols()
            );
        }
        Ok(())
    }

    pub fn elements(&self) -> usize {
        Feature::ALL.iter().map(|&f| self.get(f).data().len()).sum()
    }
}

/// Which rows a recorded write touched.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RowSet {
    All,
    Rows(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WriteEvent {
    pub step: usize,
    pub layer: usize,
    pub side: Side,
    pub feature: Feature,
    pub rows: RowSet,
}

#[derive(Clone, Debug)]
struct Entry {
    feats: LayerFeatures,
    /// Per feature: has it been written wholesale since the last reset?
    warm: [bool; 4],
    /// Per feature, per row: step of the last write.
    last_write: [Vec<Option<usize>>; 4],
}

impl Entry {
    fn cold(rows: usize, hidden_dim: usize) -> Self {
        Self {
            feats: LayerFeatures::zeros(rows, hidden_dim),
            warm: [false; 4],
            last_write: std::array::from_fn(|_| vec![None; rows]),
        }
    }

    fn is_warm(&self) -> bool {
        self.warm.iter().all(|&w| w)
    }
}

#[derive(Clone, Debug)]
pub struct DualCache {
    prompt: Vec<Entry>,
    response: Vec<Entry>,
    prompt_len: usize,
    response_len: usize,
    hidden_dim: usize,
    log: Option<Vec<WriteEvent>>,
}

impl DualCache {
    /// Zero-filled, cold cache. `prompt_len` may be 0.
    pub fn new(num_layers: usize, prompt_len: usize, response_len: usize, hidden_dim: usize) -> Result<Self> {
        if num_layers == 0 || response_len == 0 || hidden_dim == 0 {
            return Err(Error::Config(format!(
                "cache needs at least one layer, response row and feature (got {num_layers}, {response_len}, {hidden_dim})"
            )));
        }
        Ok(Self {
            prompt: (0..num_layers).map(|_| Entry::cold(prompt_len, hidden_dim)).collect(),
            response: (0..num_layers).map(|_| Entry::cold(response_len, hidden_dim)).collect(),
            prompt_len,
            response_len,
            hidden_dim,
            log: None,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.prompt.len()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn response_len(&self) -> usize {
        self.response_len
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn side_len(&self, side: Side) -> usize {
        match side {
            Side::Prompt => self.prompt_len,
            Side::Response => self.response_len,
        }
    }

    /// Starts recording every write. Used by tests and audits.
    pub fn enable_write_log(&mut self) {
        self.log.get_or_insert_with(Vec::new);
    }

    pub fn write_log(&self) -> &[WriteEvent] {
        self.log.as_deref().unwrap_or(&[])
    }

    fn entries(&self, side: Side) -> &[Entry] {
        match side {
            Side::Prompt => &self.prompt,
            Side::Response => &self.response,
        }
    }

    fn entry(&self, layer: usize, side: Side) -> Result<&Entry> {
        self.entries(side)
            .get(layer)
            .ok_or_else(|| Error::Contract(format!("layer {layer} out of range for {} layers", self.prompt.len())))
    }

    fn entry_mut(&mut self, layer: usize, side: Side) -> Result<&mut Entry> {
        let n = self.prompt.len();
        let entries = match side {
            Side::Prompt => &mut self.prompt,
            Side::Response => &mut self.response,
        };
        entries
            .get_mut(layer)
            .ok_or_else(|| Error::Contract(format!("layer {layer} out of range for {n} layers")))
    }

    pub fn is_warm(&self, layer: usize, side: Side) -> bool {
        self.entry(layer, side).map(Entry::is_warm).unwrap_or(false)
    }

    /// Reads a fully written entry; cold entries are an error.
    pub fn read(&self, layer: usize, side: Side) -> Result<&LayerFeatures> {
        let e = self.entry(layer, side)?;
        if !e.is_warm() {
            return Err(Error::ColdCache {
                layer,
                side: side.name(),
            });
        }
        Ok(&e.feats)
    }

    /// Marks every entry cold. Contents are left in place but can no longer
    /// be read.
    pub fn invalidate(&mut self) {
        for e in self.prompt.iter_mut().chain(self.response.iter_mut()) {
            e.warm = [false; 4];
        }
    }

    fn record(&mut self, step: usize, layer: usize, side: Side, feature: Feature, rows: RowSet) {
        if let Some(log) = self.log.as_mut() {
            log.push(WriteEvent {
                step,
                layer,
                side,
                feature,
                rows,
            });
        }
    }

    /// Replaces all four features of one layer and side.
    pub fn replace_segment(&mut self, layer: usize, side: Side, feats: LayerFeatures, step: usize) -> Result<()> {
        feats.check_shape(self.side_len(side), self.hidden_dim)?;
        let e = self.entry_mut(layer, side)?;
        e.feats = feats;
        e.warm = [true; 4];
        for rows in &mut e.last_write {
            rows.fill(Some(step));
        }
        for f in Feature::ALL {
            self.record(step, layer, side, f, RowSet::All);
        }
        Ok(())
    }

    /// Replaces a single feature matrix wholesale.
    pub fn replace_feature(
        &mut self,
        layer: usize,
        side: Side,
        feature: Feature,
        m: Matrix,
        step: usize,
    ) -> Result<()> {
        let rows = self.side_len(side);
        contract!(
            m.rows() == rows && m.cols() == self.hidden_dim,
            "{feature:?} replacement is {}x{}, expected {rows}x{}",
            m.rows(),
            m.cols(),
            self.hidden_dim
        );
        let e = self.entry_mut(layer, side)?;
        *e.feats.get_mut(feature) = m;
        e.warm[feature.slot()] = true;
        e.last_write[feature.slot()].fill(Some(step));
        self.record(step, layer, side, feature, RowSet::All);
        Ok(())
    }

    /// Overwrites rows `idx` of the named features. Values cannot be
    /// scatter-updated; they are only ever replaced wholesale.
    pub fn scatter_update_segment(
        &mut self,
        layer: usize,
        side: Side,
        idx: &[usize],
        updates: &[(Feature, &Matrix)],
        step: usize,
    ) -> Result<()> {
        check_indices(idx, self.side_len(side))?;
        for (f, m) in updates {
            contract!(*f != Feature::Value, "value rows are never scatter-updated");
            contract!(
                m.rows() == idx.len() && m.cols() == self.hidden_dim,
                "{f:?} update is {}x{}, expected {}x{}",
                m.rows(),
                m.cols(),
                idx.len(),
                self.hidden_dim
            );
        }
        let e = self.entry_mut(layer, side)?;
        for (f, _) in updates {
            if !e.warm[f.slot()] {
                return Err(Error::ColdCache {
                    layer,
                    side: side.name(),
                });
            }
        }
        for (f, m) in updates {
            scatter_rows_into(e.feats.get_mut(*f), idx, m)?;
            for &i in idx {
                e.last_write[f.slot()][i] = Some(step);
            }
        }
        if !idx.is_empty() {
            for (f, _) in updates {
                self.record(step, layer, side, *f, RowSet::Rows(idx.to_vec()));
            }
        }
        Ok(())
    }

    /// Stored `f32` elements across both sides and all layers.
    pub fn memory_elements(&self) -> usize {
        self.prompt
            .iter()
            .chain(&self.response)
            .map(|e| e.feats.elements())
            .sum()
    }

    /// Largest `last_write - now` over every written row of `side`, where
    /// steps count down. `None` if nothing on that side was ever written.
    pub fn max_age(&self, side: Side, now: usize) -> Option<usize> {
        self.entries(side)
            .iter()
            .flat_map(|e| e.last_write.iter().flatten())
            .flatten()
            .map(|&w| w.saturating_sub(now))
            .max()
    }

    /// Step of the last write to one row of one feature.
    pub fn last_write(&self, layer: usize, side: Side, feature: Feature, row: usize) -> Option<usize> {
        self.entry(layer, side)
            .ok()
            .and_then(|e| e.last_write[feature.slot()].get(row).copied().flatten())
    }

    /// Writes one cached matrix in the flat dump format.
    pub fn dump_entry(&self, layer: usize, side: Side, feature: Feature, path: &Path) -> Result<()> {
        let e = self.entry(layer, side)?;
        write_matrix_dump(path, e.feats.get(feature))
            .map_err(|err| Error::Contract(format!("dump to {}: {err}", path.display())))
    }
}

/// Flat binary dump: `rows` and `cols` as little-endian `u64`, then the
/// row-major values as little-endian `f32`.
pub fn write_matrix_dump(path: &Path, m: &Matrix) -> io::Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * m.data().len());
    buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)
}

pub fn read_matrix_dump(path: &Path) -> io::Result<Matrix> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| io::Error::new(io::ErrorKind::InvalidData, msg.to_string());
    if bytes.len() < 16 {
        return Err(bad("dump shorter than its header"));
    }
    let rows = u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if rows.checked_mul(cols).and_then(|n| n.checked_mul(4)) != Some(body.len()) {
        return Err(bad("dump body does not match its header"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Matrix::from_vec(rows, cols, data).map_err(|e| bad(&e.to_string()))
}

//! Count time series tables: CSV ingestion, daily profiles, normalization.

use std::collections::{BTreeMap, HashSet};
use std::io::Read;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Node-by-slot matrix of non-negative counts on a uniform slot grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    pub node_ids: Vec<String>,
    /// `[nodes × slots]`
    pub values: Array2<f64>,
    pub granularity_minutes: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsvLayout {
    /// `node_id,slot_0,...,slot_{n-1}`
    #[default]
    Wide,
    /// `node_id,timestamp,value` with integer slot timestamps.
    Long,
}

fn ingest(row: usize, message: impl Into<String>) -> Error {
    Error::Ingest {
        row,
        message: message.into(),
    }
}

fn parse_count(raw: &str, row: usize) -> Result<f64> {
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| ingest(row, format!("`{raw}` is not a number")))?;
    if !v.is_finite() || v < 0.0 {
        return Err(ingest(row, format!("value {v} must be a finite non-negative count")));
    }
    Ok(v)
}

impl SeriesTable {
    pub fn new(node_ids: Vec<String>, values: Array2<f64>, granularity_minutes: u32) -> Result<Self> {
        if node_ids.len() != values.nrows() {
            return Err(Error::dim(format!(
                "{} node ids for {} rows",
                node_ids.len(),
                values.nrows()
            )));
        }
        let mut seen = HashSet::new();
        for (i, id) in node_ids.iter().enumerate() {
            if !seen.insert(id) {
                return Err(ingest(i + 2, format!("duplicate node_id `{id}`")));
            }
        }
        if let Some(((r, c), v)) = values.indexed_iter().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(ingest(r + 2, format!("slot {c} has invalid value {v}")));
        }
        if granularity_minutes == 0 {
            return Err(Error::config("granularity_minutes must be positive"));
        }
        Ok(SeriesTable {
            node_ids,
            values,
            granularity_minutes,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_slots(&self) -> usize {
        self.values.ncols()
    }

    /// Slot indices; always the contiguous range `0..num_slots`.
    pub fn timestamps(&self) -> std::ops::Range<usize> {
        0..self.num_slots()
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.node_ids.iter().position(|n| n == id)
    }

    pub fn load_csv(path: &Path, layout: CsvLayout, granularity_minutes: u32) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(f, layout, granularity_minutes)
    }

    pub fn read_csv<R: Read>(reader: R, layout: CsvLayout, granularity_minutes: u32) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        match layout {
            CsvLayout::Wide => Self::read_wide(&mut rdr, granularity_minutes),
            CsvLayout::Long => Self::read_long(&mut rdr, granularity_minutes),
        }
    }

    fn read_wide<R: Read>(rdr: &mut csv::Reader<R>, granularity: u32) -> Result<Self> {
        let width = rdr.headers()?.len();
        if width < 2 {
            return Err(ingest(1, "header needs node_id and at least one slot column"));
        }
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 2;
            let rec = rec?;
            if rec.len() != width {
                return Err(ingest(row, format!("expected {width} fields, found {}", rec.len())));
            }
            ids.push(rec[0].to_string());
            for f in rec.iter().skip(1) {
                data.push(parse_count(f, row)?);
            }
        }
        if ids.is_empty() {
            return Err(ingest(1, "no data rows"));
        }
        let values = Array2::from_shape_vec((ids.len(), width - 1), data).map_err(|e| Error::dim(e.to_string()))?;
        Self::new(ids, values, granularity)
    }

    fn read_long<R: Read>(rdr: &mut csv::Reader<R>, granularity: u32) -> Result<Self> {
        let mut by_node: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
        let mut order: Vec<String> = Vec::new();
        let mut last_row: BTreeMap<String, usize> = BTreeMap::new();
        let (mut lo, mut hi) = (usize::MAX, 0usize);
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 2;
            let rec = rec?;
            if rec.len() != 3 {
                return Err(ingest(row, format!("expected 3 fields, found {}", rec.len())));
            }
            let slot: usize = rec[1]
                .parse()
                .map_err(|_| ingest(row, format!("timestamp `{}` is not a slot index", &rec[1])))?;
            let v = parse_count(&rec[2], row)?;
            let id = rec[0].to_string();
            let slots = by_node.entry(id.clone()).or_insert_with(|| {
                order.push(id.clone());
                BTreeMap::new()
            });
            if slots.insert(slot, v).is_some() {
                return Err(ingest(row, format!("duplicate entry for node `{id}` slot {slot}")));
            }
            last_row.insert(id, row);
            lo = lo.min(slot);
            hi = hi.max(slot);
        }
        if order.is_empty() {
            return Err(ingest(1, "no data rows"));
        }
        let n = hi - lo + 1;
        let mut values = Array2::zeros((order.len(), n));
        for (r, id) in order.iter().enumerate() {
            let slots = &by_node[id];
            for s in lo..=hi {
                let v = slots
                    .get(&s)
                    .ok_or_else(|| ingest(last_row[id], format!("node `{id}` is missing slot {s}")))?;
                values[(r, s - lo)] = *v;
            }
        }
        Self::new(order, values, granularity)
    }

    /// Write in wide layout with integer-looking values kept exact.
    pub fn to_wide_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["node_id".to_string()];
        header.extend((0..self.num_slots()).map(|s| format!("slot_{s}")));
        w.write_record(&header)?;
        for (i, id) in self.node_ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(self.values.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }

    /// Mean value per slot-of-day over the complete days in `[0, span_end)`.
    pub fn daily_profile(&self, node: usize, slots_per_day: usize, span_end: usize) -> Result<Vec<f64>> {
        daily_profile(
            self.values.row(node).as_slice().expect("standard layout"),
            slots_per_day,
            span_end,
        )
    }

    /// `[nodes × slots_per_day]` profile matrix.
    pub fn daily_profiles(&self, slots_per_day: usize, span_end: usize) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((self.num_nodes(), slots_per_day));
        for i in 0..self.num_nodes() {
            let p = self.daily_profile(i, slots_per_day, span_end)?;
            out.row_mut(i).assign(&ndarray::Array1::from(p));
        }
        Ok(out)
    }
}

/// Per-slot-of-day mean over the complete days of `series[..span_end]`.
pub fn daily_profile(series: &[f64], slots_per_day: usize, span_end: usize) -> Result<Vec<f64>> {
    if slots_per_day == 0 {
        return Err(Error::config("slots_per_day must be positive"));
    }
    let span = span_end.min(series.len());
    let days = span / slots_per_day;
    if days == 0 {
        return Err(Error::contract(format!(
            "profile span of {span} slots is shorter than one day ({slots_per_day} slots)"
        )));
    }
    let mut p = vec![0.0; slots_per_day];
    for d in 0..days {
        for (s, acc) in p.iter_mut().enumerate() {
            *acc += series[d * slots_per_day + s];
        }
    }
    p.iter_mut().for_each(|v| *v /= days as f64);
    Ok(p)
}

/// Per-row z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Statistics of each row over columns `[0, span_end)`. A zero standard
    /// deviation is replaced by 1 so constant rows map to zero.
    pub fn fit(values: &Array2<f64>, span_end: usize) -> Self {
        let span = values.slice(ndarray::s![.., ..span_end.min(values.ncols())]);
        let mean: Vec<f64> = span
            .mean_axis(Axis(1))
            .map_or_else(|| vec![0.0; values.nrows()], |m| m.to_vec());
        let std = span
            .rows()
            .into_iter()
            .zip(&mean)
            .map(|(r, m)| {
                let var = r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / r.len().max(1) as f64;
                let s = var.sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        NormStats { mean, std }
    }

    pub fn normalize(&self, row: usize, x: f64) -> f64 {
        (x - self.mean[row]) / self.std[row]
    }

    pub fn denormalize(&self, row: usize, z: f64) -> f64 {
        z * self.std[row] + self.mean[row]
    }
}

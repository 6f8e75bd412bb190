//! Test-split evaluation of a trained model and the reference predictors.

use std::path::Path;

use ndarray::Array2;
use serde::Serialize;

use crate::baselines::{
    bottom_up, middle_out, top_down, GruBaseline, HistoricalAverage, PredictionSet, ProportionTable,
};
use crate::batch::{Dataset, SampleBatch};
use crate::error::{Error, Result};
use crate::graph::{MultiLayerGraph, NodeRef, BOTTOM, MIDDLE, TOP};
use crate::io::write_atomic;
use crate::metrics::{HierarchicalErrorRow, MetricsAccumulator, MetricsReport};
use crate::model::HierarchicalForecaster;
use crate::par::{self, Execution};
use crate::train::TrainedModel;
use crate::windows::{Split, WindowedSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Baseline {
    Ha,
    Gru,
    Bu,
    Mo,
    Td,
}

impl Baseline {
    pub const ALL: [Baseline; 5] = [Baseline::Ha, Baseline::Gru, Baseline::Bu, Baseline::Mo, Baseline::Td];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Ha => "ha",
            Baseline::Gru => "gru",
            Baseline::Bu => "bu",
            Baseline::Mo => "mo",
            Baseline::Td => "td",
        }
    }

    /// Comma-separated names; duplicates collapse, order follows the input.
    pub fn parse_list(s: &str) -> Result<Vec<Baseline>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let b: Baseline = part.parse()?;
            if !out.contains(&b) {
                out.push(b);
            }
        }
        Ok(out)
    }
}

impl std::str::FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::config(format!("unknown baseline `{s}` (ha, gru, bu, mo, td)")))
    }
}

/// What to evaluate besides the model itself.
#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub baselines: Vec<Baseline>,
    /// Add a predictor that returns the actual values.
    pub oracle: bool,
}

/// Reports in a fixed mode order plus every hierarchical-error row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub reports: Vec<MetricsReport>,
    #[serde(skip)]
    pub hierarchical_rows: Vec<(String, HierarchicalErrorRow)>,
}

impl Evaluation {
    pub fn report(&self, mode: &str) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| r.mode == mode)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.reports)?)
    }

    pub fn per_node_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["mode", "node_id", "layer", "mae", "rmse"])?;
        for r in &self.reports {
            for n in &r.per_node {
                w.write_record([&r.mode, &n.node_id, &n.layer, &n.mae.to_string(), &n.rmse.to_string()])?;
            }
        }
        finish_csv(w)
    }

    /// Long format: one row per mode, origin, step and parent.
    pub fn hierarchical_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["mode", "t_origin", "step", "parent", "error"])?;
        for (mode, r) in &self.hierarchical_rows {
            w.write_record([
                mode,
                &r.t_origin.to_string(),
                &r.step.to_string(),
                &r.parent,
                &r.error.to_string(),
            ])?;
        }
        finish_csv(w)
    }

    /// `metrics.json`, `per_node.csv` and `hierarchical_error.csv` in `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("metrics.json"), self.to_json()?.as_bytes())?;
        write_atomic(&dir.join("per_node.csv"), &self.per_node_csv()?)?;
        write_atomic(&dir.join("hierarchical_error.csv"), &self.hierarchical_csv()?)
    }
}

pub(crate) fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn layer_forecast(
    graph: &MultiLayerGraph,
    model_rows: &Array2<f64>,
    fallback: &PredictionSet,
    layer: usize,
) -> Array2<f64> {
    let mut out = fallback.layers[layer].clone();
    for i in 0..graph.layer_size(layer) {
        if let Some(r) = graph.prediction_index(NodeRef { layer, index: i }) {
            out.row_mut(i).assign(&model_rows.row(r));
        }
    }
    out
}

struct Context<'a> {
    model: &'a HierarchicalForecaster,
    data: &'a Dataset,
    trained: &'a TrainedModel,
    scale: f64,
    ha: Option<HistoricalAverage>,
    props: Option<ProportionTable>,
    gru: Option<(GruBaseline, crate::params::ParameterStore)>,
    modes: Vec<String>,
    opts: &'a EvalOptions,
}

impl Context<'_> {
    /// Forecasts of every mode for one chunk of samples, sample-major.
    fn chunk(&self, samples: &[WindowedSample]) -> Result<Vec<Vec<Array2<f64>>>> {
        let cfg = &self.model.config;
        let g = &self.data.graph;
        let batch = SampleBatch::build(self.data, samples, &cfg.patch, cfg.aggregator)?;
        let f = self.model.predict(
            &self.trained.base,
            self.trained.coordination.as_ref(),
            &batch,
            self.scale,
        )?;
        let initial = batch.unbatch(&f.initial)?;
        let coordinated = f.coordinated.as_ref().map(|c| batch.unbatch(c)).transpose()?;
        let gru = match &self.gru {
            Some((m, p)) => Some(batch.unbatch(&m.predict(p, g, &batch)?)?),
            None => None,
        };
        let mut out = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let mut per = vec![initial[i].clone()];
            if let Some(c) = &coordinated {
                per.push(c[i].clone());
            }
            let ha = self.ha.as_ref().map(|h| h.forecast_layers(s.t_origin));
            for b in &self.opts.baselines {
                let ha = ha.as_ref().expect("fitted whenever a baseline is requested");
                let set = match b {
                    Baseline::Ha => ha.clone(),
                    Baseline::Gru => {
                        per.push(gru.as_ref().expect("trained when requested")[i].clone());
                        continue;
                    }
                    Baseline::Bu => bottom_up(&layer_forecast(g, &initial[i], ha, BOTTOM), g)?,
                    Baseline::Mo => middle_out(
                        &layer_forecast(g, &initial[i], ha, MIDDLE),
                        self.props.as_ref().expect("fitted"),
                        g,
                    )?,
                    Baseline::Td => top_down(
                        &layer_forecast(g, &initial[i], ha, TOP),
                        self.props.as_ref().expect("fitted"),
                        g,
                    )?,
                };
                per.push(set.prediction_rows(g));
            }
            if self.opts.oracle {
                per.push(self.data.actual(s));
            }
            out.push(per);
        }
        Ok(out)
    }
}

/// Evaluate on every stride-1 window of `split`. Reports come in the order
/// model (`tp`, then `hp` if coordinated), requested baselines, `oracle`.
pub fn evaluate(
    model: &HierarchicalForecaster,
    data: &Dataset,
    trained: &TrainedModel,
    split: Split,
    opts: &EvalOptions,
    exec: Execution,
) -> Result<Evaluation> {
    let cfg = &model.config;
    let samples = data.windows(split)?;
    if samples.is_empty() {
        return Err(Error::config(format!("the {split:?} split holds no complete window")));
    }
    let needs_ha = !opts.baselines.is_empty();
    let gru = if opts.baselines.contains(&Baseline::Gru) {
        let m = GruBaseline::new(cfg.baseline_hidden, cfg.horizon);
        let (p, _) = m.train(data, cfg, exec)?;
        Some((m, p))
    } else {
        None
    };
    let mut modes = vec!["tp".to_string()];
    if trained.coordination.is_some() {
        modes.push("hp".into());
    }
    modes.extend(opts.baselines.iter().map(|b| b.name().to_string()));
    if opts.oracle {
        modes.push("oracle".into());
    }
    let ctx = Context {
        model,
        data,
        trained,
        scale: data.coordination_scale(),
        ha: needs_ha
            .then(|| HistoricalAverage::fit(data, cfg.slots_per_day))
            .transpose()?,
        props: needs_ha.then(|| ProportionTable::from_dataset(data)).transpose()?,
        gru,
        modes,
        opts,
    };
    let chunks: Vec<&[WindowedSample]> = samples.chunks(cfg.batch_size).collect();
    let forecasts = par::try_map_slice(exec, &chunks, |c| ctx.chunk(c))?;

    let mut accs: Vec<MetricsAccumulator<'_>> = ctx
        .modes
        .iter()
        .map(|_| MetricsAccumulator::new(&data.graph, cfg.horizon))
        .collect();
    for (s, per) in samples.iter().zip(forecasts.into_iter().flatten()) {
        let actual = data.actual(s);
        for (acc, pred) in accs.iter_mut().zip(&per) {
            acc.add(s.t_origin, pred, &actual)?;
        }
    }
    let mut reports = Vec::with_capacity(ctx.modes.len());
    let mut hierarchical_rows = Vec::new();
    for (acc, mode) in accs.into_iter().zip(&ctx.modes) {
        let (report, rows) = acc.finish(mode);
        reports.push(report);
        hierarchical_rows.extend(rows.into_iter().map(|r| (mode.clone(), r)));
    }
    Ok(Evaluation {
        reports,
        hierarchical_rows,
    })
}

//! Recurrent forecasting heads, the learnable coordination map and the
//! smooth quadratic loss.

use std::sync::Arc;

use ndarray::Array2;

use crate::config::{CoordinationInit, LossHorizon};
use crate::error::{Error, Result};
use crate::graph::{HierarchyMatrix, MultiLayerGraph, NodeRef, BOTTOM, LAYER_NAMES, MIDDLE, NUM_LAYERS, TOP};
use crate::params::{ParamScope, ParameterStore};
use crate::sparse::Csr;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// GRU cell with one bias per gate:
///
/// ```text
/// z  = σ(x·Wz + h·Uz + bz)
/// r  = σ(x·Wr + h·Ur + br)
/// n  = tanh(x·Wn + (r ⊙ h)·Un + bn)
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn num_params(&self) -> usize {
        3 * (self.hidden * (self.input + self.hidden) + self.hidden)
    }

    pub fn register(&self, store: &mut ParameterStore, seed: u64) -> Result<()> {
        let (i, h) = (self.input, self.hidden);
        for g in ["z", "r", "n"] {
            store.init_uniform(&format!("{}.w_{g}", self.prefix), &[i, h], h, seed)?;
            store.init_uniform(&format!("{}.u_{g}", self.prefix), &[h, h], h, seed)?;
            store.init_uniform(&format!("{}.b_{g}", self.prefix), &[1, h], h, seed)?;
        }
        Ok(())
    }

    fn gate(&self, tape: &mut Tape, scope: &mut ParamScope<'_>, g: &str, x: Var, h: Var) -> Result<Var> {
        let w = scope.get(tape, &format!("{}.w_{g}", self.prefix))?;
        let u = scope.get(tape, &format!("{}.u_{g}", self.prefix))?;
        let b = scope.get(tape, &format!("{}.b_{g}", self.prefix))?;
        let xw = tape.affine(x, w, b)?;
        let hu = tape.matmul(h, u)?;
        tape.add(xw, hu)
    }

    pub fn step(&self, tape: &mut Tape, scope: &mut ParamScope<'_>, x: Var, h: Var) -> Result<Var> {
        let z = self.gate(tape, scope, "z", x, h)?;
        let z = tape.sigmoid(z);
        let r = self.gate(tape, scope, "r", x, h)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let n = self.gate(tape, scope, "n", x, rh)?;
        let n = tape.tanh(n);
        // h' = n + z ⊙ (h − n)
        let d = tape.sub(h, n)?;
        let zd = tape.mul(z, d)?;
        tape.add(n, zd)
    }

    /// Final hidden state after consuming `steps` (each `[R × input]`) from
    /// a zero state.
    pub fn run(&self, tape: &mut Tape, scope: &mut ParamScope<'_>, steps: &[Var]) -> Result<Var> {
        let rows = match steps.first() {
            Some(s) => tape.shape(*s)[0],
            None => return Err(Error::contract("a GRU needs at least one step")),
        };
        let mut h = tape.constant(Tensor::zeros(&[rows, self.hidden]));
        for &x in steps {
            h = self.step(tape, scope, x, h)?;
        }
        Ok(h)
    }
}

/// GRU over a sequence followed by an affine map to the horizon.
#[derive(Debug, Clone)]
pub struct GruHead {
    pub prefix: String,
    pub cell: GruCell,
    pub horizon: usize,
}

impl GruHead {
    pub fn new(prefix: &str, input: usize, hidden: usize, horizon: usize) -> Self {
        GruHead {
            prefix: prefix.to_string(),
            cell: GruCell {
                prefix: format!("{prefix}.gru"),
                input,
                hidden,
            },
            horizon,
        }
    }

    pub fn num_params(&self) -> usize {
        self.cell.num_params() + self.cell.hidden * self.horizon + self.horizon
    }

    pub fn register(&self, store: &mut ParameterStore, seed: u64) -> Result<()> {
        self.cell.register(store, seed)?;
        let h = self.cell.hidden;
        store.init_uniform(&format!("{}.output.weight", self.prefix), &[h, self.horizon], h, seed)?;
        store.init_uniform(&format!("{}.output.bias", self.prefix), &[1, self.horizon], h, seed)
    }

    /// `[R × steps·input]` read as `steps` consecutive chunks, to `[R × T]`.
    pub fn forward(&self, tape: &mut Tape, scope: &mut ParamScope<'_>, sequence: Var) -> Result<Var> {
        let width = tape.shape(sequence)[1];
        let d = self.cell.input;
        if !width.is_multiple_of(d) || width == 0 {
            return Err(Error::dim(format!(
                "sequence width {width} is not a positive multiple of step width {d}"
            )));
        }
        let steps = (0..width / d)
            .map(|a| tape.slice(sequence, 1, a * d, (a + 1) * d))
            .collect::<Result<Vec<_>>>()?;
        let h = self.cell.run(tape, scope, &steps)?;
        let w = scope.get(tape, &format!("{}.output.weight", self.prefix))?;
        let b = scope.get(tape, &format!("{}.output.bias", self.prefix))?;
        tape.affine(h, w, b)
    }
}

/// Heads of the whole graph: one per cluster for bottom nodes and one for
/// each non-bottom layer that is forecast.
#[derive(Debug, Clone)]
pub struct ForecastHeads {
    pub clusters: Vec<GruHead>,
    pub middle: Option<GruHead>,
    pub top: Option<GruHead>,
    /// Cluster of every bottom node.
    pub cluster_of: Vec<usize>,
}

impl ForecastHeads {
    pub fn new(graph: &MultiLayerGraph, step_dim: usize, hidden: usize, horizon: usize) -> Self {
        let forecast = |l: usize| graph.prediction_layer.iter().any(|n| n.layer == l);
        let head = |name: String| GruHead::new(&format!("heads.{name}"), step_dim, hidden, horizon);
        ForecastHeads {
            clusters: (0..graph.layer_size(MIDDLE))
                .map(|c| head(format!("cluster_{c}")))
                .collect(),
            middle: forecast(MIDDLE).then(|| head(LAYER_NAMES[MIDDLE].into())),
            top: forecast(TOP).then(|| head(LAYER_NAMES[TOP].into())),
            cluster_of: graph.parents[BOTTOM].clone(),
        }
    }

    pub fn register(&self, store: &mut ParameterStore, seed: u64) -> Result<()> {
        for h in self.clusters.iter().chain(&self.middle).chain(&self.top) {
            h.register(store, seed)?;
        }
        Ok(())
    }

    /// Batched bottom rows grouped by cluster, for `copies` stacked samples.
    pub fn cluster_rows(&self, copies: usize) -> Result<Vec<Vec<usize>>> {
        let v = self.cluster_of.len();
        let mut rows = vec![Vec::new(); self.clusters.len()];
        for b in 0..copies {
            for (i, &c) in self.cluster_of.iter().enumerate() {
                rows.get_mut(c)
                    .ok_or_else(|| Error::Mapping(format!("bottom node {i} is in unknown cluster {c}")))?
                    .push(b * v + i);
            }
        }
        Ok(rows)
    }

    /// Per-layer forecasts `[rows × T]`; `None` for layers not forecast.
    pub fn forward(
        &self,
        tape: &mut Tape,
        scope: &mut ParamScope<'_>,
        features: [Var; NUM_LAYERS],
        cluster_rows: &[Vec<usize>],
    ) -> Result<[Option<Var>; NUM_LAYERS]> {
        let total: usize = cluster_rows.iter().map(Vec::len).sum();
        let mut order: Vec<usize> = Vec::with_capacity(total);
        let mut parts = Vec::new();
        for (head, rows) in self.clusters.iter().zip(cluster_rows) {
            if rows.is_empty() {
                continue;
            }
            let x = tape.gather_rows(features[BOTTOM], rows)?;
            parts.push(head.forward(tape, scope, x)?);
            order.extend(rows);
        }
        let mut inverse = vec![0; total];
        for (pos, &row) in order.iter().enumerate() {
            inverse[row] = pos;
        }
        let stacked = tape.concat(&parts, 0)?;
        let bottom = tape.gather_rows(stacked, &inverse)?;
        let middle = match &self.middle {
            Some(h) => Some(h.forward(tape, scope, features[MIDDLE])?),
            None => None,
        };
        let top = match &self.top {
            Some(h) => Some(h.forward(tape, scope, features[TOP])?),
            None => None,
        };
        Ok([Some(bottom), middle, top])
    }
}

/// Row of the stacked per-layer outputs `[bottom; middle; top]` holding
/// each prediction node, for `copies` samples in prediction-layer order.
pub fn prediction_rows(graph: &MultiLayerGraph, copies: usize) -> Vec<usize> {
    let sizes = graph.layer_sizes();
    let offset = |layer: usize| -> usize { (0..layer).map(|l| copies * sizes[l]).sum() };
    (0..copies)
        .flat_map(|b| {
            graph
                .prediction_layer
                .iter()
                .map(move |n| offset(n.layer) + b * sizes[n.layer] + n.index)
        })
        .collect()
}

/// Learnable linear map from all initial forecasts of one sample to the
/// bottom block, followed by the hierarchy matrix.
#[derive(Debug, Clone)]
pub struct CoordinationHead {
    pub prefix: String,
    pub prediction_nodes: usize,
    pub bottom_nodes: usize,
    pub horizon: usize,
}

impl CoordinationHead {
    pub fn new(graph: &MultiLayerGraph, horizon: usize) -> Self {
        CoordinationHead {
            prefix: "coordination".into(),
            prediction_nodes: graph.prediction_layer.len(),
            bottom_nodes: graph.layer_size(BOTTOM),
            horizon,
        }
    }

    fn weight_path(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    fn bias_path(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn register(
        &self,
        store: &mut ParameterStore,
        graph: &MultiLayerGraph,
        init: CoordinationInit,
        seed: u64,
    ) -> Result<()> {
        let (inp, out) = (self.prediction_nodes * self.horizon, self.bottom_nodes * self.horizon);
        match init {
            CoordinationInit::Random => store.init_uniform(&self.weight_path(), &[inp, out], inp, seed)?,
            CoordinationInit::Selector => store.insert(&self.weight_path(), self.selector(graph)?)?,
        }
        store.init_zeros(&self.bias_path(), &[1, out])
    }

    /// Weight that copies every bottom node's own initial forecast.
    pub fn selector(&self, graph: &MultiLayerGraph) -> Result<Tensor> {
        let t = self.horizon;
        let out = self.bottom_nodes * t;
        let mut w = Tensor::zeros(&[self.prediction_nodes * t, out]);
        for b in 0..self.bottom_nodes {
            let p = graph
                .prediction_index(NodeRef {
                    layer: BOTTOM,
                    index: b,
                })
                .ok_or_else(|| Error::config("coordination needs every bottom node in the prediction layer"))?;
            for s in 0..t {
                w.data[(p * t + s) * out + b * t + s] = 1.0;
            }
        }
        Ok(w)
    }

    /// `[B·V_pr × T]` in, `[B·V_pr × T]` out. The map is applied to
    /// `initial / scale` and the result multiplied back by `scale`, so the
    /// bias lives on a unit scale. `hr` is the block-diagonal hierarchy
    /// matrix for the `B` samples.
    pub fn forward(
        &self,
        tape: &mut Tape,
        scope: &mut ParamScope<'_>,
        initial: Var,
        hr: Arc<Csr>,
        scale: f64,
    ) -> Result<Var> {
        let (vp, t) = (self.prediction_nodes, self.horizon);
        let shape = tape.shape(initial).to_vec();
        if shape.len() != 2 || shape[1] != t || !shape[0].is_multiple_of(vp) {
            return Err(Error::contract(format!(
                "initial forecasts {shape:?} do not hold {vp} prediction nodes by {t} steps"
            )));
        }
        let b = shape[0] / vp;
        if hr.rows != b * vp || hr.cols != b * self.bottom_nodes {
            return Err(Error::contract(format!(
                "hierarchy matrix {}×{} does not match {b} samples of {vp} prediction and {} bottom nodes",
                hr.rows, hr.cols, self.bottom_nodes
            )));
        }
        let w = scope.get(tape, &self.weight_path())?;
        let bias = scope.get(tape, &self.bias_path())?;
        let x = tape.scale(initial, 1.0 / scale);
        let flat = tape.reshape(x, &[b, vp * t])?;
        let block = tape.affine(flat, w, bias)?;
        let block = tape.reshape(block, &[b * self.bottom_nodes, t])?;
        let y = tape.spmm(hr, block)?;
        Ok(tape.scale(y, scale))
    }

    /// Coordinate one sample's initial forecasts outside training.
    pub fn apply(
        &self,
        store: &ParameterStore,
        initial: &Array2<f64>,
        hr: &HierarchyMatrix,
        scale: f64,
    ) -> Result<Array2<f64>> {
        if hr.matrix.nrows() != initial.nrows() {
            return Err(Error::contract(format!(
                "hierarchy matrix has {} rows for {} forecast rows",
                hr.matrix.nrows(),
                initial.nrows()
            )));
        }
        let mut tape = Tape::new();
        let mut scope = ParamScope::frozen(store);
        let x = tape.constant(Tensor::from_array(initial));
        let y = self.forward(&mut tape, &mut scope, x, Arc::new(Csr::from_dense(&hr.matrix)), scale)?;
        Ok(tape.value(y).to_array2())
    }
}

/// Mean over rows of `(1/T)·Σ e²/(e² + z)`. With [`LossHorizon::Literal`]
/// the sum skips the first horizon step.
pub fn sql_loss(tape: &mut Tape, pred: Var, actual: Var, z: f64, horizon: LossHorizon) -> Result<Var> {
    if !(z > 0.0 && z < 1.0) {
        return Err(Error::config(format!("loss constant z = {z} must lie in (0, 1)")));
    }
    let shape = tape.shape(pred).to_vec();
    if shape != tape.shape(actual) || shape.len() != 2 {
        return Err(Error::dim(format!(
            "loss inputs {shape:?} and {:?} differ",
            tape.shape(actual)
        )));
    }
    let (rows, t) = (shape[0], shape[1]);
    let e = tape.sub(pred, actual)?;
    let e2 = tape.square(e);
    let zc = tape.constant(Tensor::scalar(z));
    let denom = tape.add(e2, zc)?;
    let q = tape.div(e2, denom)?;
    let q = match horizon {
        LossHorizon::Full => q,
        LossHorizon::Literal if t > 1 => tape.slice(q, 1, 1, t)?,
        LossHorizon::Literal => return Ok(tape.constant(Tensor::scalar(0.0))),
    };
    let s = tape.sum(q);
    Ok(tape.scale(s, 1.0 / (rows * t) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_leaf_grads, check_store_grads, uniform_tensor};
    use crate::graph::{build_hierarchy, build_hr, PredictionLayerMode};
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("n{i}")).collect()
    }

    fn scalar_loss(pred: &[f64], actual: &[f64], rows: usize, z: f64, h: LossHorizon) -> f64 {
        let t = pred.len() / rows;
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![rows, t], pred.to_vec()).unwrap());
        let a = tape.constant(Tensor::new(vec![rows, t], actual.to_vec()).unwrap());
        let l = sql_loss(&mut tape, p, a, z, h).unwrap();
        tape.value(l).data[0]
    }

    #[test]
    fn zero_parameters_give_output_bias() {
        let head = GruHead::new("h", 3, 4, 2);
        let mut s = ParameterStore::new();
        head.register(&mut s, 1).unwrap();
        for (k, t) in s.iter_mut() {
            if k != "h.output.bias" {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::new();
        let mut scope = ParamScope::new(&s);
        let x = tape.constant(Tensor::zeros(&[2, 6]));
        let y = head.forward(&mut tape, &mut scope, x).unwrap();
        let b = &s.get("h.output.bias").unwrap().data;
        assert_eq!(tape.value(y).data, [b.clone(), b.clone()].concat());
    }

    #[test]
    fn saturated_update_gate_keeps_zero_state() {
        let head = GruHead::new("h", 3, 4, 2);
        let mut s = ParameterStore::new();
        head.register(&mut s, 2).unwrap();
        s.get_mut("h.gru.b_z").unwrap().data.iter_mut().for_each(|v| *v = 60.0);
        let mut tape = Tape::new();
        let mut scope = ParamScope::new(&s);
        let x = tape.constant(uniform_tensor(&[2, 9], 3));
        let steps: Vec<Var> = (0..3).map(|a| tape.slice(x, 1, a * 3, a * 3 + 3).unwrap()).collect();
        let h = head.cell.run(&mut tape, &mut scope, &steps).unwrap();
        assert!(tape.value(h).data.iter().all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn gru_gates_match_a_scalar_reference() {
        let cell = GruCell {
            prefix: "c".into(),
            input: 1,
            hidden: 1,
        };
        let mut s = ParameterStore::new();
        cell.register(&mut s, 4).unwrap();
        let p = |n: &str| s.get(&format!("c.{n}")).unwrap().data[0];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let xs = [0.3, -0.7, 0.9];
        let mut h = 0.0;
        for &x in &xs {
            let z = sig(x * p("w_z") + h * p("u_z") + p("b_z"));
            let r = sig(x * p("w_r") + h * p("u_r") + p("b_r"));
            let n = (x * p("w_n") + r * h * p("u_n") + p("b_n")).tanh();
            h = (1.0 - z) * n + z * h;
        }
        let mut tape = Tape::new();
        let mut scope = ParamScope::new(&s);
        let steps: Vec<Var> = xs.iter().map(|&x| tape.constant(Tensor::filled(&[1, 1], x))).collect();
        let out = cell.run(&mut tape, &mut scope, &steps).unwrap();
        assert!((tape.value(out).data[0] - h).abs() < 1e-15);
    }

    #[test]
    fn gru_head_gradients() {
        let head = GruHead::new("h", 2, 3, 2);
        let mut s = ParameterStore::new();
        head.register(&mut s, 5).unwrap();
        assert_eq!(s.num_values(), head.num_params());
        let x0 = uniform_tensor(&[2, 6], 6);
        let report = check_store_grads(&s, |tape, scope| {
            let x = tape.constant(x0.clone());
            let y = head.forward(tape, scope, x)?;
            let y = tape.square(y);
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
        assert_eq!(report.entries, head.num_params());
    }

    #[test]
    fn same_cluster_same_features_same_forecast() {
        let g = build_hierarchy(&ids(3), &[], &[0, 1, 0], PredictionLayerMode::All).unwrap();
        let heads = ForecastHeads::new(&g, 2, 3, 4);
        let mut s = ParameterStore::new();
        heads.register(&mut s, 7).unwrap();
        let row = uniform_tensor(&[1, 4], 8).data;
        let mut tape = Tape::new();
        let mut scope = ParamScope::new(&s);
        let b = tape.constant(Tensor::new(vec![3, 4], row.repeat(3)).unwrap());
        let m = tape.constant(uniform_tensor(&[2, 4], 9));
        let t = tape.constant(uniform_tensor(&[1, 4], 10));
        let out = heads
            .forward(&mut tape, &mut scope, [b, m, t], &heads.cluster_rows(1).unwrap())
            .unwrap();
        let v = &tape.value(out[0].unwrap()).data;
        assert_eq!(v[0..4], v[8..12]);
        assert_ne!(v[0..4], v[4..8]);
    }

    #[test]
    fn unknown_cluster_is_a_mapping_error() {
        let g = build_hierarchy(&ids(2), &[], &[0, 1], PredictionLayerMode::All).unwrap();
        let mut heads = ForecastHeads::new(&g, 2, 3, 4);
        heads.cluster_of[1] = 5;
        assert!(matches!(heads.cluster_rows(1), Err(Error::Mapping(_))));
    }

    #[test]
    fn layers_outside_the_prediction_layer_get_no_head() {
        let g = build_hierarchy(&ids(2), &[], &[0, 1], PredictionLayerMode::BottomTop).unwrap();
        let heads = ForecastHeads::new(&g, 2, 3, 4);
        assert!(heads.middle.is_none() && heads.top.is_some());
        assert_eq!(prediction_rows(&g, 2), vec![0, 1, 8, 2, 3, 9]);
    }

    /// A = B + C with prediction layer {A, B, C}.
    fn abc() -> (MultiLayerGraph, HierarchyMatrix) {
        let mut g = build_hierarchy(&ids(2), &[], &[0, 0], PredictionLayerMode::All).unwrap();
        g.prediction_layer = vec![
            NodeRef {
                layer: MIDDLE,
                index: 0,
            },
            NodeRef {
                layer: BOTTOM,
                index: 0,
            },
            NodeRef {
                layer: BOTTOM,
                index: 1,
            },
        ];
        let hr = build_hr(&g).unwrap();
        (g, hr)
    }

    #[test]
    fn selector_gives_bottom_up_of_initial_bottom_forecasts() {
        let (g, hr) = abc();
        let head = CoordinationHead::new(&g, 2);
        let mut s = ParameterStore::new();
        head.register(&mut s, &g, CoordinationInit::Selector, 0).unwrap();
        let initial = Array2::from_shape_vec((3, 2), vec![9.0, 9.5, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let y = head.apply(&s, &initial, &hr, 4.0).unwrap();
        assert_eq!(
            y,
            Array2::from_shape_vec((3, 2), vec![6.0, 8.0, 2.0, 3.0, 4.0, 5.0]).unwrap()
        );
    }

    #[test]
    fn zero_initial_gives_zero() {
        let (g, hr) = abc();
        let head = CoordinationHead::new(&g, 3);
        let mut s = ParameterStore::new();
        head.register(&mut s, &g, CoordinationInit::Random, 1).unwrap();
        let y = head.apply(&s, &Array2::zeros((3, 3)), &hr, 1.0).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mismatched_hierarchy_is_a_contract_error() {
        let (g, hr) = abc();
        let head = CoordinationHead::new(&g, 2);
        let mut s = ParameterStore::new();
        head.register(&mut s, &g, CoordinationInit::Random, 1).unwrap();
        assert!(matches!(
            head.apply(&s, &Array2::zeros((4, 2)), &hr, 1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn coordination_gradients() {
        let (g, hr) = abc();
        let head = CoordinationHead::new(&g, 2);
        let mut s = ParameterStore::new();
        head.register(&mut s, &g, CoordinationInit::Random, 3).unwrap();
        s.get_mut("coordination.bias").unwrap().data = uniform_tensor(&[1, 4], 4).data;
        let x0 = uniform_tensor(&[6, 2], 5);
        let hr2 = Arc::new(Csr::from_dense(&hr.matrix).block_diagonal(2));
        let report = check_store_grads(&s, |tape, scope| {
            let x = tape.constant(x0.clone());
            let y = head.forward(tape, scope, x, hr2.clone(), 3.0)?;
            let y = tape.tanh(y);
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
    }

    #[test]
    fn sql_loss_values() {
        assert_eq!(scalar_loss(&[1.0, 2.0], &[1.0, 2.0], 1, 0.5, LossHorizon::Full), 0.0);
        // e = 1 at the second of two steps: (1/2)·(1/1.5)
        let l = scalar_loss(&[0.0, 1.0], &[0.0, 0.0], 1, 0.5, LossHorizon::Literal);
        assert!((l - 1.0 / 3.0).abs() < 1e-15);
        // the literal form ignores the first step entirely
        let l = scalar_loss(&[5.0, 0.0], &[0.0, 0.0], 1, 0.5, LossHorizon::Literal);
        assert_eq!(l, 0.0);
        let l = scalar_loss(&[5.0, 0.0], &[0.0, 0.0], 1, 0.5, LossHorizon::Full);
        assert!((l - 0.5 * 25.0 / 25.5).abs() < 1e-15);
    }

    #[test]
    fn sql_loss_rejects_bad_z() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::zeros(&[1, 2]));
        for z in [0.0, 1.0, -0.5, 2.0] {
            assert!(matches!(
                sql_loss(&mut tape, p, p, z, LossHorizon::Full),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn sql_loss_gradient() {
        let a = uniform_tensor(&[3, 4], 11);
        for h in [LossHorizon::Full, LossHorizon::Literal] {
            check_leaf_grads(&[uniform_tensor(&[3, 4], 12)], |tape, v| {
                let ac = tape.constant(a.clone());
                sql_loss(tape, v[0], ac, 0.3, h)
            });
        }
    }

    proptest! {
        #[test]
        fn sql_loss_is_bounded(
            rows in 1usize..4,
            t in 1usize..6,
            mag in 0.0f64..1e6,
            z in 0.01f64..0.99,
            seed in 0u64..1000,
        ) {
            let e = uniform_tensor(&[rows, t], seed);
            let pred: Vec<f64> = e.data.iter().map(|v| v * mag).collect();
            let zero = vec![0.0; rows * t];
            let lit = scalar_loss(&pred, &zero, rows, z, LossHorizon::Literal);
            prop_assert!(lit >= 0.0 && lit <= (t as f64 - 1.0) / t as f64 + 1e-12);
            let full = scalar_loss(&pred, &zero, rows, z, LossHorizon::Full);
            prop_assert!((0.0..=1.0).contains(&full));
        }

        #[test]
        fn coordinated_parents_equal_child_sums(seed in 0u64..10_000, scale in 0.1f64..1e4) {
            let g = build_hierarchy(&ids(5), &[], &[0, 1, 0, 2, 1], PredictionLayerMode::All).unwrap();
            let hr = build_hr(&g).unwrap();
            let head = CoordinationHead::new(&g, 3);
            let mut s = ParameterStore::new();
            head.register(&mut s, &g, CoordinationInit::Random, seed).unwrap();
            s.get_mut("coordination.bias").unwrap().data = uniform_tensor(&[1, 15], seed + 1).data;
            let init = uniform_tensor(&[g.prediction_layer.len(), 3], seed + 2).to_array2() * scale;
            let y = head.apply(&s, &init, &hr, scale).unwrap();
            for (r, n) in g.prediction_layer.iter().enumerate() {
                if n.layer == BOTTOM {
                    continue;
                }
                let kids = g.children(*n);
                for step in 0..3 {
                    let sum: f64 = kids
                        .iter()
                        .map(|&c| y[(g.prediction_index(NodeRef { layer: n.layer - 1, index: c }).unwrap(), step)])
                        .sum();
                    prop_assert!((sum - y[(r, step)]).abs() <= 1e-12 * (1.0 + sum.abs()));
                }
            }
        }
    }
}

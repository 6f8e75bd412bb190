//! Horizontal message passing inside each layer followed by one top-down
//! sweep that hands parent features to children.

use std::sync::Arc;

use crate::config::Aggregator;
use crate::error::{Error, Result};
use crate::graph::{MultiLayerGraph, BOTTOM, LAYER_NAMES, MIDDLE, NUM_LAYERS, TOP};
use crate::params::{ParamScope, ParameterStore};
use crate::sparse::Csr;
use crate::tape::{Tape, Var};

/// Aggregation matrix of one layer: row `v` holds the weights applied to
/// the neighbours of `v`. Isolated nodes get an empty row.
pub fn aggregation_matrix(graph: &MultiLayerGraph, layer: usize, aggregator: Aggregator) -> Csr {
    let n = graph.layer_size(layer);
    let mut triplets = Vec::new();
    for (v, nb) in graph.neighbours(layer).iter().enumerate() {
        let w = match aggregator {
            Aggregator::Mean => 1.0 / nb.len().max(1) as f64,
            Aggregator::Sum => 1.0,
        };
        triplets.extend(nb.iter().map(|&u| (v, u, w)));
    }
    Csr::from_triplets(n, n, triplets)
}

/// Parent row of every row of `layer` when `copies` samples are stacked.
pub fn parent_rows(graph: &MultiLayerGraph, layer: usize, copies: usize) -> Result<Vec<usize>> {
    if layer >= TOP {
        return Err(Error::Graph(format!("layer {layer} has no parents")));
    }
    let below = graph.layer_size(layer);
    let above = graph.layer_size(layer + 1);
    let parents = &graph.parents[layer];
    if parents.len() != below || parents.iter().any(|&p| p >= above) {
        return Err(Error::Graph(format!(
            "{} layer has nodes without a valid parent",
            LAYER_NAMES[layer]
        )));
    }
    Ok((0..copies)
        .flat_map(|b| parents.iter().map(move |&p| b * above + p))
        .collect())
}

/// Horizontal update of one layer: `relu(affine([x ‖ ρ(neighbours)]))`.
#[derive(Debug, Clone)]
pub struct HorizontalPass {
    pub prefix: String,
    pub dim: usize,
}

impl HorizontalPass {
    pub fn register(&self, store: &mut ParameterStore, seed: u64) -> Result<()> {
        let f = self.dim;
        store.init_uniform(&format!("{}.weight", self.prefix), &[2 * f, f], 2 * f, seed)?;
        store.init_uniform(&format!("{}.bias", self.prefix), &[1, f], 2 * f, seed)
    }

    pub fn forward(&self, tape: &mut Tape, scope: &mut ParamScope<'_>, x: Var, aggregation: Arc<Csr>) -> Result<Var> {
        let w = scope.get(tape, &format!("{}.weight", self.prefix))?;
        let b = scope.get(tape, &format!("{}.bias", self.prefix))?;
        let m = tape.spmm(aggregation, x)?;
        let joined = tape.concat(&[x, m], 1)?;
        let y = tape.affine(joined, w, b)?;
        Ok(tape.relu(y))
    }
}

/// Parent-to-child update: `relu(affine([h ‖ h_parent · M]))`.
#[derive(Debug, Clone)]
pub struct HierarchicalPass {
    pub prefix: String,
    pub dim: usize,
}

impl HierarchicalPass {
    pub fn register(&self, store: &mut ParameterStore, seed: u64) -> Result<()> {
        let f = self.dim;
        store.init_uniform(&format!("{}.transfer", self.prefix), &[f, f], f, seed)?;
        store.init_uniform(&format!("{}.weight", self.prefix), &[2 * f, f], 2 * f, seed)?;
        store.init_uniform(&format!("{}.bias", self.prefix), &[1, f], 2 * f, seed)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        scope: &mut ParamScope<'_>,
        child: Var,
        parent: Var,
        parent_rows: &[usize],
    ) -> Result<Var> {
        let m = scope.get(tape, &format!("{}.transfer", self.prefix))?;
        let w = scope.get(tape, &format!("{}.weight", self.prefix))?;
        let b = scope.get(tape, &format!("{}.bias", self.prefix))?;
        let gathered = tape.gather_rows(parent, parent_rows)?;
        let message = tape.matmul(gathered, m)?;
        let joined = tape.concat(&[child, message], 1)?;
        let y = tape.affine(joined, w, b)?;
        Ok(tape.relu(y))
    }
}

/// Per-layer structure a forward pass needs, for `copies` stacked samples.
#[derive(Debug, Clone)]
pub struct GraphOperators {
    pub copies: usize,
    pub aggregation: [Arc<Csr>; NUM_LAYERS],
    /// Parent rows of the bottom and middle layers.
    pub parent_rows: [Vec<usize>; 2],
}

impl GraphOperators {
    pub fn new(graph: &MultiLayerGraph, aggregator: Aggregator, copies: usize) -> Result<Self> {
        let agg = |l: usize| Arc::new(aggregation_matrix(graph, l, aggregator).block_diagonal(copies));
        Ok(GraphOperators {
            copies,
            aggregation: [agg(BOTTOM), agg(MIDDLE), agg(TOP)],
            parent_rows: [parent_rows(graph, BOTTOM, copies)?, parent_rows(graph, MIDDLE, copies)?],
        })
    }
}

/// All message-passing parameters.
#[derive(Debug, Clone)]
pub struct Hmgnn {
    pub dim: usize,
    pub horizontal: [HorizontalPass; NUM_LAYERS],
    /// Top to middle, then middle to bottom.
    pub top_down: [HierarchicalPass; 2],
}

impl Hmgnn {
    pub fn new(dim: usize) -> Self {
        let h = |l: usize| HorizontalPass {
            prefix: format!("hmgnn.horizontal.{}", LAYER_NAMES[l]),
            dim,
        };
        let d = |name: &str| HierarchicalPass {
            prefix: format!("hmgnn.hierarchical.{name}"),
            dim,
        };
        Hmgnn {
            dim,
            horizontal: [h(BOTTOM), h(MIDDLE), h(TOP)],
            top_down: [d("top_to_middle"), d("middle_to_bottom")],
        }
    }

    pub fn register(&self, store: &mut ParameterStore, seed: u64) -> Result<()> {
        for h in &self.horizontal {
            h.register(store, seed)?;
        }
        for d in &self.top_down {
            d.register(store, seed)?;
        }
        Ok(())
    }

    /// Horizontal features of every layer, each read from the old values.
    pub fn horizontal_pass(
        &self,
        tape: &mut Tape,
        scope: &mut ParamScope<'_>,
        inputs: [Var; NUM_LAYERS],
        ops: &GraphOperators,
    ) -> Result<[Var; NUM_LAYERS]> {
        let mut out = inputs;
        for l in 0..NUM_LAYERS {
            out[l] = self.horizontal[l].forward(tape, scope, inputs[l], ops.aggregation[l].clone())?;
        }
        Ok(out)
    }

    /// Top-down sweep; the middle layer is updated first and the bottom
    /// layer reads the updated middle features. The top layer is unchanged.
    pub fn hierarchical_pass(
        &self,
        tape: &mut Tape,
        scope: &mut ParamScope<'_>,
        h: [Var; NUM_LAYERS],
        ops: &GraphOperators,
    ) -> Result<[Var; NUM_LAYERS]> {
        let middle = self.top_down[0].forward(tape, scope, h[MIDDLE], h[TOP], &ops.parent_rows[1])?;
        let bottom = self.top_down[1].forward(tape, scope, h[BOTTOM], middle, &ops.parent_rows[0])?;
        Ok([bottom, middle, h[TOP]])
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        scope: &mut ParamScope<'_>,
        inputs: [Var; NUM_LAYERS],
        ops: &GraphOperators,
    ) -> Result<[Var; NUM_LAYERS]> {
        let h = self.horizontal_pass(tape, scope, inputs, ops)?;
        self.hierarchical_pass(tape, scope, h, ops)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_store_grads, uniform_tensor};
    use crate::graph::{build_hierarchy, PredictionLayerMode};
    use crate::tensor::Tensor;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("n{i}")).collect()
    }

    /// Weight `[2F × F]` that copies the first (or second) half of the input.
    fn pass_through(f: usize, second: bool) -> Tensor {
        let mut w = Tensor::zeros(&[2 * f, f]);
        let off = if second { f } else { 0 };
        (0..f).for_each(|i| w.data[(off + i) * f + i] = 1.0);
        w
    }

    fn trivial_store(f: usize) -> ParameterStore {
        let net = Hmgnn::new(f);
        let mut s = ParameterStore::new();
        net.register(&mut s, 0).unwrap();
        for l in LAYER_NAMES {
            *s.get_mut(&format!("hmgnn.horizontal.{l}.weight")).unwrap() = pass_through(f, false);
            *s.get_mut(&format!("hmgnn.horizontal.{l}.bias")).unwrap() = Tensor::zeros(&[1, f]);
        }
        for t in ["top_to_middle", "middle_to_bottom"] {
            *s.get_mut(&format!("hmgnn.hierarchical.{t}.transfer")).unwrap() = Tensor::zeros(&[f, f]);
            *s.get_mut(&format!("hmgnn.hierarchical.{t}.weight")).unwrap() = pass_through(f, false);
            *s.get_mut(&format!("hmgnn.hierarchical.{t}.bias")).unwrap() = Tensor::zeros(&[1, f]);
        }
        s
    }

    fn nonneg(shape: &[usize], seed: u64) -> Tensor {
        let mut t = uniform_tensor(shape, seed);
        t.data.iter_mut().for_each(|v| *v = v.abs());
        t
    }

    #[test]
    fn isolated_node_sees_zero_message() {
        let f = 3;
        let pass = HorizontalPass {
            prefix: "h".into(),
            dim: f,
        };
        let mut s = ParameterStore::new();
        pass.register(&mut s, 1).unwrap();
        let x0 = uniform_tensor(&[1, f], 2);
        let mut tape = Tape::new();
        let mut scope = ParamScope::new(&s);
        let x = tape.constant(x0.clone());
        let y = pass
            .forward(&mut tape, &mut scope, x, Arc::new(Csr::from_triplets(1, 1, vec![])))
            .unwrap();
        let w = s.get("h.weight").unwrap();
        let b = s.get("h.bias").unwrap();
        for j in 0..f {
            let pre: f64 = b.data[j] + (0..f).map(|i| x0.data[i] * w.data[i * f + j]).sum::<f64>();
            assert!((tape.value(y).data[j] - pre.max(0.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn equal_neighbours_with_mean_give_equal_outputs() {
        let g = build_hierarchy(&ids(2), &[(0, 1)], &[0, 0], PredictionLayerMode::All).unwrap();
        let pass = HorizontalPass {
            prefix: "h".into(),
            dim: 4,
        };
        let mut s = ParameterStore::new();
        pass.register(&mut s, 3).unwrap();
        let row = uniform_tensor(&[1, 4], 4).data;
        let mut tape = Tape::new();
        let mut scope = ParamScope::new(&s);
        let x = tape.constant(Tensor::new(vec![2, 4], [row.clone(), row].concat()).unwrap());
        let agg = Arc::new(aggregation_matrix(&g, BOTTOM, Aggregator::Mean));
        let y = pass.forward(&mut tape, &mut scope, x, agg).unwrap();
        let v = &tape.value(y).data;
        assert_eq!(v[..4], v[4..]);
    }

    #[test]
    fn path_graph_sum_aggregation() {
        let g = build_hierarchy(&ids(3), &[(0, 1), (1, 2)], &[0, 0, 0], PredictionLayerMode::All).unwrap();
        let f = 2;
        let pass = HorizontalPass {
            prefix: "h".into(),
            dim: f,
        };
        let mut s = ParameterStore::new();
        pass.register(&mut s, 3).unwrap();
        *s.get_mut("h.weight").unwrap() = pass_through(f, true);
        *s.get_mut("h.bias").unwrap() = Tensor::zeros(&[1, f]);
        let x0 = nonneg(&[3, f], 5);
        let mut tape = Tape::new();
        let mut scope = ParamScope::new(&s);
        let x = tape.constant(x0.clone());
        let agg = Arc::new(aggregation_matrix(&g, BOTTOM, Aggregator::Sum));
        let y = pass.forward(&mut tape, &mut scope, x, agg).unwrap();
        let v = &tape.value(y).data;
        for j in 0..f {
            assert_eq!(v[f + j], x0.data[j] + x0.data[2 * f + j]);
            assert_eq!(v[j], x0.data[f + j]);
        }
    }

    fn run(store: &ParameterStore, g: &MultiLayerGraph, inputs: &[Tensor; 3], aggregator: Aggregator) -> [Vec<f64>; 3] {
        let net = Hmgnn::new(inputs[0].cols());
        let ops = GraphOperators::new(g, aggregator, 1).unwrap();
        let mut tape = Tape::new();
        let mut scope = ParamScope::new(store);
        let x = [0, 1, 2].map(|l| tape.constant(inputs[l].clone()));
        let y = net.forward(&mut tape, &mut scope, x, &ops).unwrap();
        y.map(|v| tape.value(v).data.clone())
    }

    #[test]
    fn trivial_settings_pass_features_through() {
        let g = build_hierarchy(&ids(4), &[(0, 1), (2, 3)], &[0, 0, 1, 1], PredictionLayerMode::All).unwrap();
        let f = 3;
        let inputs = [nonneg(&[4, f], 1), nonneg(&[2, f], 2), nonneg(&[1, f], 3)];
        let out = run(&trivial_store(f), &g, &inputs, Aggregator::Mean);
        for l in 0..3 {
            assert_eq!(out[l], inputs[l].data);
        }
    }

    #[test]
    fn siblings_receive_the_same_parent_message() {
        let g = build_hierarchy(&ids(2), &[], &[0, 0], PredictionLayerMode::All).unwrap();
        let f = 3;
        let mut s = trivial_store(f);
        *s.get_mut("hmgnn.hierarchical.middle_to_bottom.weight").unwrap() = pass_through(f, true);
        *s.get_mut("hmgnn.hierarchical.middle_to_bottom.transfer").unwrap() = uniform_tensor(&[f, f], 9);
        let inputs = [nonneg(&[2, f], 1), nonneg(&[1, f], 2), nonneg(&[1, f], 3)];
        let out = run(&s, &g, &inputs, Aggregator::Mean);
        assert_eq!(out[0][..f], out[0][f..]);
    }

    #[test]
    fn chain_composes_by_hand() {
        let g = build_hierarchy(&ids(1), &[], &[0], PredictionLayerMode::All).unwrap();
        let f = 2;
        let net = Hmgnn::new(f);
        let mut s = ParameterStore::new();
        net.register(&mut s, 11).unwrap();
        let inputs = [
            uniform_tensor(&[1, f], 1),
            uniform_tensor(&[1, f], 2),
            uniform_tensor(&[1, f], 3),
        ];
        let out = run(&s, &g, &inputs, Aggregator::Mean);

        // single nodes have no neighbours: h = relu(W[x ‖ 0] + b)
        let affine = |x: &[f64], m: &[f64], prefix: &str| -> Vec<f64> {
            let w = s.get(&format!("{prefix}.weight")).unwrap();
            let b = s.get(&format!("{prefix}.bias")).unwrap();
            let joined = [x, m].concat();
            (0..f)
                .map(|j| {
                    let v = b.data[j] + (0..2 * f).map(|i| joined[i] * w.data[i * f + j]).sum::<f64>();
                    v.max(0.0)
                })
                .collect()
        };
        let times = |x: &[f64], prefix: &str| -> Vec<f64> {
            let m = s.get(&format!("{prefix}.transfer")).unwrap();
            (0..f).map(|j| (0..f).map(|i| x[i] * m.data[i * f + j]).sum()).collect()
        };
        let zero = vec![0.0; f];
        let h: Vec<Vec<f64>> = (0..3)
            .map(|l| affine(&inputs[l].data, &zero, &format!("hmgnn.horizontal.{}", LAYER_NAMES[l])))
            .collect();
        let mid = affine(
            &h[1],
            &times(&h[2], "hmgnn.hierarchical.top_to_middle"),
            "hmgnn.hierarchical.top_to_middle",
        );
        let bottom = affine(
            &h[0],
            &times(&mid, "hmgnn.hierarchical.middle_to_bottom"),
            "hmgnn.hierarchical.middle_to_bottom",
        );
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-14);
        assert!(close(&out[0], &bottom));
        assert!(close(&out[1], &mid));
        assert!(close(&out[2], &h[2]));
    }

    #[test]
    fn bottom_permutation_permutes_outputs() {
        let f = 3;
        let edges = [(0, 1), (1, 2), (2, 3), (0, 4)];
        let assign = [0, 0, 1, 1, 1];
        let g = build_hierarchy(&ids(5), &edges, &assign, PredictionLayerMode::All).unwrap();
        let net = Hmgnn::new(f);
        let mut s = ParameterStore::new();
        net.register(&mut s, 5).unwrap();
        let inputs = [
            uniform_tensor(&[5, f], 1),
            uniform_tensor(&[2, f], 2),
            uniform_tensor(&[1, f], 3),
        ];
        let base = run(&s, &g, &inputs, Aggregator::Mean);

        // new position i holds old node perm[i]; cluster labels keep first-seen order
        let perm = [1, 0, 4, 3, 2];
        let inv: Vec<usize> = (0..5).map(|o| perm.iter().position(|&p| p == o).unwrap()).collect();
        let pedges: Vec<(usize, usize)> = edges.iter().map(|&(a, b)| (inv[a], inv[b])).collect();
        let passign: Vec<usize> = perm.iter().map(|&o| assign[o]).collect();
        let pids: Vec<String> = perm.iter().map(|&o| format!("n{o}")).collect();
        let pg = build_hierarchy(&pids, &pedges, &passign, PredictionLayerMode::All).unwrap();
        let mut px = inputs.clone();
        for (i, &o) in perm.iter().enumerate() {
            px[0].data[i * f..(i + 1) * f].copy_from_slice(&inputs[0].data[o * f..(o + 1) * f]);
        }
        let out = run(&s, &pg, &px, Aggregator::Mean);
        for (i, &o) in perm.iter().enumerate() {
            for j in 0..f {
                assert!((out[0][i * f + j] - base[0][o * f + j]).abs() < 1e-14);
            }
        }
        assert_eq!(out[1], base[1]);
        assert_eq!(out[2], base[2]);
    }

    #[test]
    fn zeroing_an_input_only_moves_its_neighbourhood() {
        let f = 3;
        let g = build_hierarchy(
            &ids(5),
            &[(0, 1), (1, 2), (3, 4)],
            &[0, 0, 0, 1, 1],
            PredictionLayerMode::All,
        )
        .unwrap();
        let pass = HorizontalPass {
            prefix: "h".into(),
            dim: f,
        };
        let mut s = ParameterStore::new();
        pass.register(&mut s, 5).unwrap();
        let x0 = uniform_tensor(&[5, f], 6);
        let eval = |x: &Tensor| {
            let mut tape = Tape::new();
            let mut scope = ParamScope::new(&s);
            let xv = tape.constant(x.clone());
            let agg = Arc::new(aggregation_matrix(&g, BOTTOM, Aggregator::Mean));
            let y = pass.forward(&mut tape, &mut scope, xv, agg).unwrap();
            tape.value(y).data.clone()
        };
        let base = eval(&x0);
        let nb = g.neighbours(BOTTOM);
        for u in 0..5 {
            let mut x = x0.clone();
            x.data[u * f..(u + 1) * f].iter_mut().for_each(|v| *v = 0.0);
            let y = eval(&x);
            for v in 0..5 {
                if v != u && !nb[u].contains(&v) {
                    assert_eq!(y[v * f..(v + 1) * f], base[v * f..(v + 1) * f]);
                }
            }
        }
    }

    #[test]
    fn hierarchical_influence() {
        let f = 3;
        // no horizontal middle edges: two clusters of two
        let mut g = build_hierarchy(&ids(4), &[], &[0, 0, 1, 1], PredictionLayerMode::All).unwrap();
        g.edges[MIDDLE].clear();
        let net = Hmgnn::new(f);
        let mut s = ParameterStore::new();
        net.register(&mut s, 21).unwrap();
        // positive biases keep every unit active so influence is visible
        for (k, t) in s.iter_mut() {
            if k.ends_with("bias") {
                t.data.iter_mut().for_each(|v| *v = 1.0 + v.abs());
            }
        }
        let inputs = [
            uniform_tensor(&[4, f], 1),
            uniform_tensor(&[2, f], 2),
            uniform_tensor(&[1, f], 3),
        ];
        let base = run(&s, &g, &inputs, Aggregator::Mean);
        let changed = |a: &[f64], b: &[f64], node: usize| a[node * f..(node + 1) * f] != b[node * f..(node + 1) * f];

        let mut top = inputs.clone();
        top[2].data.iter_mut().for_each(|v| *v += 0.5);
        let out = run(&s, &g, &top, Aggregator::Mean);
        assert!((0..4).all(|b| changed(&out[0], &base[0], b)));

        let mut mid = inputs.clone();
        mid[1].data[..f].iter_mut().for_each(|v| *v += 0.5);
        let out = run(&s, &g, &mid, Aggregator::Mean);
        assert!(changed(&out[0], &base[0], 0) && changed(&out[0], &base[0], 1));
        assert!(!changed(&out[0], &base[0], 2) && !changed(&out[0], &base[0], 3));
    }

    #[test]
    fn all_parameters_pass_gradient_check() {
        let g = build_hierarchy(&ids(3), &[(0, 1)], &[0, 0, 1], PredictionLayerMode::All).unwrap();
        let f = 2;
        let net = Hmgnn::new(f);
        let mut s = ParameterStore::new();
        net.register(&mut s, 4).unwrap();
        for (_, t) in s.iter_mut() {
            t.data.iter_mut().for_each(|v| *v += 0.3);
        }
        let inputs = [
            uniform_tensor(&[3, f], 1),
            uniform_tensor(&[2, f], 2),
            uniform_tensor(&[1, f], 3),
        ];
        let ops = GraphOperators::new(&g, Aggregator::Mean, 1).unwrap();
        let report = check_store_grads(&s, |tape, scope| {
            let x = [0, 1, 2].map(|l| tape.constant(inputs[l].clone()));
            let y = net.forward(tape, scope, x, &ops)?;
            let all = tape.concat(&y, 0)?;
            let sq = tape.square(all);
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
        assert_eq!(report.entries, s.num_values());
    }
}

//! Heterogeneous spatial graphs and the message-passing layer over them.
//!
//! One layer, for every node `j` of every class:
//!
//! ```text
//! m_{i→j} = W_x[c] x_i + W_e[c] e_{i→j} + b[c]        (c = edge class)
//! a_j     = max over all incoming m_{i→j}              (zeros if none)
//! u_j     = F [a_j ⊕ S x_j] + f
//! x_j'    = GRU(h = x_j, input = u_j)
//! ```
//!
//! The message linear on `[x_i ⊕ e_{i→j}]` is split into its two column
//! blocks so node projections can be computed once per node and gathered.

use diffmath::nn::{GruCell, Linear};
use diffmath::{ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::geometry::{FreqBank, Pose2};

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSet {
    /// Message weight slot (the discrete edge class).
    pub slot: usize,
    pub src_class: usize,
    pub dst_class: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl EdgeSet {
    pub fn new(slot: usize, src_class: usize, dst_class: usize, pairs: &[(usize, usize)]) -> Self {
        Self {
            slot,
            src_class,
            dst_class,
            src: pairs.iter().map(|p| p.0).collect(),
            dst: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph {
    /// Per node class, one pose per node.
    pub poses: Vec<Vec<Pose2>>,
    pub edge_sets: Vec<EdgeSet>,
}

impl HeteroGraph {
    pub fn num_classes(&self) -> usize {
        self.poses.len()
    }

    pub fn num_nodes(&self, class: usize) -> usize {
        self.poses[class].len()
    }

    pub fn num_edges(&self) -> usize {
        self.edge_sets.iter().map(EdgeSet::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (k, es) in self.edge_sets.iter().enumerate() {
            if es.src_class >= self.num_classes() || es.dst_class >= self.num_classes() {
                return Err(CoreError::Shape(format!("edge set {k} references a missing node class")));
            }
            if es.src.len() != es.dst.len() {
                return Err(CoreError::Shape(format!("edge set {k} has mismatched endpoint lists")));
            }
            let (ns, nd) = (self.num_nodes(es.src_class), self.num_nodes(es.dst_class));
            if es.src.iter().any(|&s| s >= ns) || es.dst.iter().any(|&d| d >= nd) {
                return Err(CoreError::Shape(format!("edge set {k} has an out-of-range endpoint")));
            }
        }
        Ok(())
    }

    /// Raw geometry rows (`E × bank.width()`) for one edge set.
    pub fn raw_geometry(&self, bank: &FreqBank, set: usize) -> Vec<f64> {
        let es = &self.edge_sets[set];
        let (ps, pd) = (&self.poses[es.src_class], &self.poses[es.dst_class]);
        bank.matrix(es.src.iter().zip(&es.dst).map(|(&s, &d)| (&ps[s], &pd[d])))
    }
}

/// Edge attributes supplied to a layer for one edge set.
#[derive(Clone, Debug)]
pub enum EdgeAttr {
    /// One attribute row per edge.
    Rows(Var),
    /// Attribute rows of unique edges plus the per-edge row index.
    Gathered { unique: Var, index: Vec<usize> },
    /// No attributes: messages depend on the source features only.
    Absent,
}

#[derive(Clone, Debug)]
pub struct HmpLayer {
    pub msg_x: Vec<Linear>,
    pub msg_e: Vec<Linear>,
    pub self_proj: Vec<Linear>,
    pub fusion: Vec<Linear>,
    pub gru: Vec<GruCell>,
    pub width: usize,
    pub attr_dim: usize,
}

impl HmpLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        node_classes: usize,
        edge_slots: usize,
        width: usize,
        attr_dim: usize,
    ) -> Result<Self> {
        let mut msg_x = Vec::with_capacity(edge_slots);
        let mut msg_e = Vec::with_capacity(edge_slots);
        for c in 0..edge_slots {
            msg_x.push(Linear::new(store, rng, &format!("{name}.msg{c}.x"), width, width)?);
            msg_e.push(Linear::without_bias(store, rng, &format!("{name}.msg{c}.e"), attr_dim, width)?);
        }
        let mut self_proj = Vec::new();
        let mut fusion = Vec::new();
        let mut gru = Vec::new();
        for k in 0..node_classes {
            self_proj.push(Linear::new(store, rng, &format!("{name}.node{k}.self"), width, width)?);
            fusion.push(Linear::new(store, rng, &format!("{name}.node{k}.fuse"), 2 * width, width)?);
            gru.push(GruCell::new(store, rng, &format!("{name}.node{k}.gru"), width, width)?);
        }
        Ok(Self {
            msg_x,
            msg_e,
            self_proj,
            fusion,
            gru,
            width,
            attr_dim,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        graph: &HeteroGraph,
        x: &[Var],
        attrs: &[EdgeAttr],
    ) -> Result<Vec<Var>> {
        let nc = graph.num_classes();
        if x.len() != nc || self.gru.len() != nc {
            return Err(CoreError::Shape(format!(
                "layer has {} node classes, graph {}, features {}",
                self.gru.len(),
                nc,
                x.len()
            )));
        }
        if attrs.len() != graph.edge_sets.len() {
            return Err(CoreError::Shape("one attribute entry per edge set required".into()));
        }
        for (c, &v) in x.iter().enumerate() {
            let shape = tape.value(v).dims2();
            if shape != (graph.num_nodes(c), self.width) {
                return Err(CoreError::Shape(format!(
                    "class {c} features are {shape:?}, expected ({}, {})",
                    graph.num_nodes(c),
                    self.width
                )));
            }
        }

        let mut incoming: Vec<(Vec<Var>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); nc];
        for (es, attr) in graph.edge_sets.iter().zip(attrs) {
            if es.is_empty() {
                continue;
            }
            if es.slot >= self.msg_x.len() {
                return Err(CoreError::Shape(format!("edge slot {} not in layer", es.slot)));
            }
            let src = x[es.src_class];
            let n_src = graph.num_nodes(es.src_class);
            let from_nodes = if es.len() < n_src {
                let rows = tape.gather_rows(src, &es.src)?;
                self.msg_x[es.slot].forward(tape, store, rows)?
            } else {
                let proj = self.msg_x[es.slot].forward(tape, store, src)?;
                tape.gather_rows(proj, &es.src)?
            };
            let msg = match attr {
                EdgeAttr::Rows(a) => {
                    let e = self.msg_e[es.slot].forward(tape, store, *a)?;
                    tape.add(from_nodes, e)?
                }
                EdgeAttr::Gathered { unique, index } => {
                    let e = self.msg_e[es.slot].forward(tape, store, *unique)?;
                    let e = tape.gather_rows(e, index)?;
                    tape.add(from_nodes, e)?
                }
                EdgeAttr::Absent => from_nodes,
            };
            let slot = &mut incoming[es.dst_class];
            slot.0.push(msg);
            slot.1.extend_from_slice(&es.dst);
        }

        let mut out = Vec::with_capacity(nc);
        for c in 0..nc {
            let n = graph.num_nodes(c);
            let (msgs, seg) = &incoming[c];
            let agg = if msgs.is_empty() {
                tape.constant(Tensor::zeros(&[n, self.width]))?
            } else {
                let all = if msgs.len() == 1 { msgs[0] } else { tape.concat_rows(msgs)? };
                tape.segment_max(all, seg, n)?
            };
            let sp = self.self_proj[c].forward(tape, store, x[c])?;
            let cat = tape.concat_cols(&[agg, sp])?;
            let fused = self.fusion[c].forward(tape, store, cat)?;
            out.push(self.gru[c].forward(tape, store, x[c], fused)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct HmpStack {
    pub layers: Vec<HmpLayer>,
}

impl HmpStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        depth: usize,
        node_classes: usize,
        edge_slots: usize,
        width: usize,
        attr_dim: usize,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|l| HmpLayer::new(store, rng, &format!("{name}.{l}"), node_classes, edge_slots, width, attr_dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        graph: &HeteroGraph,
        x: &[Var],
        attrs: &[EdgeAttr],
    ) -> Result<Vec<Var>> {
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = layer.forward(tape, store, graph, &h, attrs)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffmath::gradcheck::check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn line_poses(n: usize) -> Vec<Pose2> {
        (0..n).map(|i| Pose2::from_angle([i as f64, 0.0], 0.0)).collect()
    }

    fn run(layer_or_stack: &HmpStack, store: &ParamStore<f64>, g: &HeteroGraph, x: &[Tensor<f64>], attrs: &[Option<Tensor<f64>>]) -> Vec<Tensor<f64>> {
        let mut tape = Tape::new();
        let xv: Vec<Var> = x.iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
        let av: Vec<EdgeAttr> = attrs
            .iter()
            .map(|a| match a {
                Some(t) => EdgeAttr::Rows(tape.constant(t.clone()).unwrap()),
                None => EdgeAttr::Absent,
            })
            .collect();
        let out = layer_or_stack.forward(&mut tape, store, g, &xv, &av).unwrap();
        out.iter().map(|&v| tape.value(v).clone()).collect()
    }

    #[test]
    fn isolated_nodes_use_neutral_message() {
        let mut store = ParamStore::new();
        let stack = HmpStack::new(&mut store, &mut rng(0), "h", 1, 1, 2, 4, 3).unwrap();
        let g = HeteroGraph {
            poses: vec![line_poses(3)],
            edge_sets: vec![],
        };
        let x = random(&mut rng(1), 3, 4);
        let out = run(&stack, &store, &g, &[x.clone()], &[]);

        let l = &stack.layers[0];
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let zeros = tape.constant(Tensor::zeros(&[3, 4])).unwrap();
        let sp = l.self_proj[0].forward(&mut tape, &store, xv).unwrap();
        let cat = tape.concat_cols(&[zeros, sp]).unwrap();
        let fused = l.fusion[0].forward(&mut tape, &store, cat).unwrap();
        let expected = l.gru[0].forward(&mut tape, &store, xv, fused).unwrap();
        assert_eq!(&out[0], tape.value(expected));
    }

    fn sample_graph(r: &mut ChaCha8Rng, n: usize, e: usize) -> (HeteroGraph, Vec<Option<Tensor<f64>>>) {
        let pairs: Vec<(usize, usize)> = (0..e).map(|_| (r.gen_range(0..n), r.gen_range(0..n))).collect();
        let half = e / 2;
        let g = HeteroGraph {
            poses: vec![line_poses(n)],
            edge_sets: vec![EdgeSet::new(0, 0, 0, &pairs[..half]), EdgeSet::new(1, 0, 0, &pairs[half..])],
        };
        let attrs = vec![Some(random(r, half, 3)), Some(random(r, e - half, 3))];
        (g, attrs)
    }

    #[test]
    fn edge_storage_order_does_not_matter() {
        let mut r = rng(2);
        let mut store = ParamStore::new();
        let stack = HmpStack::new(&mut store, &mut r, "h", 2, 1, 2, 4, 3).unwrap();
        let (g, attrs) = sample_graph(&mut r, 6, 20);
        let x = random(&mut r, 6, 4);
        let base = run(&stack, &store, &g, &[x.clone()], &attrs);

        let mut g2 = g.clone();
        let mut attrs2 = attrs.clone();
        for (es, a) in g2.edge_sets.iter_mut().zip(attrs2.iter_mut()) {
            let n = es.len();
            let perm: Vec<usize> = (0..n).rev().collect();
            es.src = perm.iter().map(|&p| es.src[p]).collect();
            es.dst = perm.iter().map(|&p| es.dst[p]).collect();
            let t = a.as_ref().unwrap();
            *a = Some(Tensor::from_rows(&perm.iter().map(|&p| t.row(p).to_vec()).collect::<Vec<_>>()).unwrap());
        }
        assert_eq!(run(&stack, &store, &g2, &[x], &attrs2), base);
    }

    #[test]
    fn node_permutation_permutes_outputs() {
        let mut r = rng(3);
        let mut store = ParamStore::new();
        let stack = HmpStack::new(&mut store, &mut r, "h", 1, 1, 2, 4, 3).unwrap();
        let (g, attrs) = sample_graph(&mut r, 6, 20);
        let x = random(&mut r, 6, 4);
        let base = run(&stack, &store, &g, &[x.clone()], &attrs);
        let perm = [3usize, 0, 5, 1, 4, 2]; // new index i holds old node perm[i]
        let mut inv = [0usize; 6];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let mut g2 = g.clone();
        for es in &mut g2.edge_sets {
            es.src.iter_mut().for_each(|s| *s = inv[*s]);
            es.dst.iter_mut().for_each(|d| *d = inv[*d]);
        }
        let x2 = Tensor::from_rows(&perm.iter().map(|&p| x.row(p).to_vec()).collect::<Vec<_>>()).unwrap();
        let out = run(&stack, &store, &g2, &[x2], &attrs);
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in out[0].row(i).iter().zip(base[0].row(p)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    fn sigmoid(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    fn lin(store: &ParamStore<f64>, l: &Linear, x: &[f64]) -> Vec<f64> {
        let w = store.value(l.weight);
        (0..l.dout)
            .map(|o| {
                let mut s = l.bias.map_or(0.0, |b| store.value(b).data()[o]);
                for (i, xi) in x.iter().enumerate() {
                    s += xi * w.get(i, o);
                }
                s
            })
            .collect()
    }

    #[test]
    fn three_node_line_matches_scalar_trace() {
        // 0 -> 1 -> 2 with edge class 0, plus 2 -> 1 with edge class 1
        let mut r = rng(4);
        let mut store = ParamStore::new();
        let stack = HmpStack::new(&mut store, &mut r, "h", 1, 1, 2, 3, 2).unwrap();
        let g = HeteroGraph {
            poses: vec![line_poses(3)],
            edge_sets: vec![EdgeSet::new(0, 0, 0, &[(0, 1), (1, 2)]), EdgeSet::new(1, 0, 0, &[(2, 1)])],
        };
        let x = random(&mut r, 3, 3);
        let a0 = random(&mut r, 2, 2);
        let a1 = random(&mut r, 1, 2);
        let out = run(&stack, &store, &g, &[x.clone()], &[Some(a0.clone()), Some(a1.clone())]);

        let l = &stack.layers[0];
        let msg = |slot: usize, src: usize, attr: &[f64]| -> Vec<f64> {
            let a = lin(&store, &l.msg_x[slot], x.row(src));
            let b = lin(&store, &l.msg_e[slot], attr);
            a.iter().zip(&b).map(|(u, v)| u + v).collect()
        };
        let incoming: Vec<Vec<Vec<f64>>> = vec![
            vec![],
            vec![msg(0, 0, a0.row(0)), msg(1, 2, a1.row(0))],
            vec![msg(0, 1, a0.row(1))],
        ];
        for j in 0..3 {
            let agg: Vec<f64> = (0..3)
                .map(|c| incoming[j].iter().map(|m| m[c]).fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v)))).unwrap_or(0.0))
                .collect();
            let sp = lin(&store, &l.self_proj[0], x.row(j));
            let cat: Vec<f64> = agg.iter().chain(&sp).copied().collect();
            let u = lin(&store, &l.fusion[0], &cat);
            let gi = lin(&store, &l.gru[0].input, &u);
            let gh = lin(&store, &l.gru[0].hidden, x.row(j));
            for c in 0..3 {
                let rg = sigmoid(gi[c] + gh[c]);
                let z = sigmoid(gi[3 + c] + gh[3 + c]);
                let n = (gi[6 + c] + rg * gh[6 + c]).tanh();
                let h = x.get(j, c);
                let expected = (1.0 - z) * h + z * n;
                assert!((out[0].get(j, c) - expected).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn stack_of_one_equals_layer_and_closed_gates_keep_state() {
        let mut r = rng(5);
        let mut store = ParamStore::new();
        let stack = HmpStack::new(&mut store, &mut r, "h", 3, 1, 2, 4, 3).unwrap();
        let (g, attrs) = sample_graph(&mut r, 5, 12);
        let x = random(&mut r, 5, 4);

        let single = HmpStack {
            layers: vec![stack.layers[0].clone()],
        };
        let a = run(&single, &store, &g, &[x.clone()], &attrs);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let av: Vec<EdgeAttr> = attrs.iter().map(|t| EdgeAttr::Rows(tape.constant(t.clone().unwrap()).unwrap())).collect();
        let b = stack.layers[0].forward(&mut tape, &store, &g, &[xv], &av).unwrap();
        assert_eq!(&a[0], tape.value(b[0]));

        for layer in &stack.layers {
            let id = layer.gru[0].input.bias.unwrap();
            let mut bias = store.value(id).data().to_vec();
            bias[4..8].iter_mut().for_each(|v| *v = -80.0);
            *store.value_mut(id) = Tensor::vector(bias);
        }
        let kept = run(&stack, &store, &g, &[x.clone()], &attrs);
        assert!(kept[0].max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn dilated_successors_extend_receptive_field() {
        let n = 40;
        let mut sets = vec![];
        for k in 1..=5usize {
            let pairs: Vec<(usize, usize)> = (0..n - k).map(|i| (i, i + k)).collect();
            sets.push(EdgeSet::new(k - 1, 0, 0, &pairs));
        }
        let g = HeteroGraph {
            poses: vec![line_poses(n)],
            edge_sets: sets,
        };
        let mut r = rng(6);
        let mut store = ParamStore::new();
        let stack = HmpStack::new(&mut store, &mut r, "h", 2, 1, 5, 4, 3).unwrap();
        let attrs: Vec<Option<Tensor<f64>>> = g.edge_sets.iter().map(|es| Some(random(&mut r, es.len(), 3))).collect();
        let x = random(&mut r, n, 4);
        let base = run(&stack, &store, &g, &[x.clone()], &attrs);
        // max pooling can hide a single perturbation, so union over several
        let mut changed = vec![false; n];
        for _ in 0..8 {
            let mut bumped = x.clone();
            for v in &mut bumped.data_mut()[..4] {
                *v += r.gen_range(-2.0..2.0);
            }
            let out = run(&stack, &store, &g, &[bumped], &attrs);
            for (i, c) in changed.iter_mut().enumerate() {
                *c |= out[0].row(i) != base[0].row(i);
            }
        }
        for (i, c) in changed.iter().enumerate() {
            assert_eq!(*c, i <= 10, "node {i}");
        }
    }

    #[test]
    fn layer_gradient_matches_finite_differences() {
        let mut r = rng(7);
        let mut store = ParamStore::new();
        let stack = HmpStack::new(&mut store, &mut r, "h", 1, 2, 3, 3, 2).unwrap();
        let g = HeteroGraph {
            poses: vec![line_poses(3), line_poses(2)],
            edge_sets: vec![
                EdgeSet::new(0, 0, 0, &[(0, 1), (1, 2), (2, 0)]),
                EdgeSet::new(1, 1, 0, &[(0, 2), (1, 2)]),
                EdgeSet::new(2, 0, 1, &[(0, 0), (2, 1)]),
            ],
        };
        let x0 = random(&mut r, 3, 3);
        let x1 = random(&mut r, 2, 3);
        let attrs: Vec<Tensor<f64>> = g.edge_sets.iter().map(|es| random(&mut r, es.len(), 2)).collect();
        let report = check_params(
            &mut store,
            |tape, store| {
                let a = tape.constant(x0.clone())?;
                let b = tape.constant(x1.clone())?;
                let av: Vec<EdgeAttr> = attrs.iter().map(|t| tape.constant(t.clone()).map(EdgeAttr::Rows)).collect::<diffmath::Result<_>>()?;
                let out = stack
                    .forward(tape, store, &g, &[a, b], &av)
                    .map_err(|e| diffmath::DiffError::InvalidArgument(e.to_string()))?;
                let cat = tape.concat_rows(&out)?;
                let sq = tape.mul(cat, cat)?;
                tape.sum(sq)
            },
            1e-6,
            None,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let mut store = ParamStore::new();
        let stack = HmpStack::new(&mut store, &mut rng(0), "h", 1, 1, 1, 4, 3).unwrap();
        let g = HeteroGraph {
            poses: vec![line_poses(2)],
            edge_sets: vec![],
        };
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[2, 5])).unwrap();
        assert!(stack.forward(&mut tape, &store, &g, &[x], &[]).is_err());
    }
}

//! Continuous relaxation of the cell space and its discretization.
//!
//! Every candidate edge `(i, j)` into an intermediate node carries logits
//! over an op set. A mixed op is the softmax-weighted sum of the op outputs.
//! Discretization keeps, per intermediate node, the two incoming edges whose
//! best non-zero op has the largest weight after renormalizing over the
//! non-zero ops, each labeled with that op.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cellgraph::{ensure_valid, CellSpec, Edge, Genotype, OpKind, SpaceTag};
use crate::error::{Error, Result};
use crate::gradcore::{mse, Adam, AdamConfig, Array, Graph, Sgd, SgdConfig, Var};

pub type EdgeLogits = BTreeMap<(usize, usize), Vec<f64>>;

/// Architecture logits for a normal/reduce cell pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxationState {
    pub node_count: usize,
    pub op_set: Vec<OpKind>,
    pub normal: EdgeLogits,
    pub reduce: EdgeLogits,
}

/// Every `(i, j)` with `j` intermediate and `i < j`.
pub fn candidate_edges(node_count: usize) -> Vec<(usize, usize)> {
    (2..node_count.saturating_sub(1)).flat_map(|j| (0..j).map(move |i| (i, j))).collect()
}

impl RelaxationState {
    pub fn new(node_count: usize, op_set: Vec<OpKind>) -> Result<Self> {
        Self::with_logits(node_count, op_set, |_| 0.0)
    }

    /// Logits drawn uniformly from `[-scale, scale)`.
    pub fn random<R: Rng + ?Sized>(node_count: usize, op_set: Vec<OpKind>, scale: f64, rng: &mut R) -> Result<Self> {
        Self::with_logits(node_count, op_set, |_| rng.random_range(-scale..scale))
    }

    fn with_logits(node_count: usize, op_set: Vec<OpKind>, mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        if node_count < 4 {
            return Err(Error::InvalidArgument(format!("node count {node_count} is below 4")));
        }
        if op_set.len() < 2 {
            return Err(Error::InvalidArgument("op set needs at least two ops".into()));
        }
        let mut cell = || -> EdgeLogits {
            candidate_edges(node_count).into_iter().map(|e| (e, (0..op_set.len()).map(&mut f).collect())).collect()
        };
        let normal = cell();
        let reduce = cell();
        Ok(Self { node_count, op_set, normal, reduce })
    }

    pub fn space(&self) -> SpaceTag {
        if self.op_set.iter().all(|op| *op == OpKind::Zero || op.allowed_in_sphynx()) {
            SpaceTag::Sphynx
        } else {
            SpaceTag::Legacy
        }
    }

    pub fn cell(&self, reduce: bool) -> &EdgeLogits {
        if reduce {
            &self.reduce
        } else {
            &self.normal
        }
    }

    /// Logits in a fixed order: normal edges then reduce edges, each sorted.
    pub fn flatten(&self) -> Vec<Array> {
        self.normal.values().chain(self.reduce.values()).map(|v| Array::vector(v.clone())).collect()
    }

    fn assign(&mut self, arrays: &[Array]) {
        let mut it = arrays.iter();
        for v in self.normal.values_mut().chain(self.reduce.values_mut()) {
            *v = it.next().expect("one array per edge").data().to_vec();
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ThetaFile::from(self)).expect("theta serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ThetaFile = serde_json::from_str(text)?;
        f.try_into()
    }
}

/// On-disk shape: edges keyed `"i-j"`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ThetaFile {
    node_count: usize,
    op_set: Vec<OpKind>,
    normal: BTreeMap<String, Vec<f64>>,
    reduce: BTreeMap<String, Vec<f64>>,
}

impl From<&RelaxationState> for ThetaFile {
    fn from(s: &RelaxationState) -> Self {
        let keyed = |m: &EdgeLogits| m.iter().map(|((i, j), v)| (format!("{i}-{j}"), v.clone())).collect();
        ThetaFile {
            node_count: s.node_count,
            op_set: s.op_set.clone(),
            normal: keyed(&s.normal),
            reduce: keyed(&s.reduce),
        }
    }
}

impl TryFrom<ThetaFile> for RelaxationState {
    type Error = Error;

    fn try_from(f: ThetaFile) -> Result<Self> {
        let k = f.op_set.len();
        let parse = |m: BTreeMap<String, Vec<f64>>| -> Result<EdgeLogits> {
            m.into_iter()
                .map(|(key, v)| {
                    let bad = || Error::InvalidArgument(format!("edge key {key:?} is not \"i-j\""));
                    let (a, b) = key.split_once('-').ok_or_else(bad)?;
                    let edge = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                    if v.len() != k {
                        return Err(Error::InvalidArgument(format!("edge {key} has {} logits for {k} ops", v.len())));
                    }
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(Error::NonFinite(format!("logits of edge {key}")));
                    }
                    Ok((edge, v))
                })
                .collect()
        };
        if k < 2 {
            return Err(Error::InvalidArgument("op set needs at least two ops".into()));
        }
        Ok(RelaxationState {
            node_count: f.node_count,
            op_set: f.op_set,
            normal: parse(f.normal)?,
            reduce: parse(f.reduce)?,
        })
    }
}

/// `sum_o softmax(theta)_o * outputs[o]`.
pub fn mixed_op(theta_edge: &[f64], outputs: &[Array]) -> Result<Array> {
    let mut g = Graph::new();
    let theta = g.leaf(Array::vector(theta_edge.to_vec()));
    let outs: Vec<Var> = outputs.iter().map(|o| g.leaf(o.clone())).collect();
    let m = mixed_op_var(&mut g, theta, &outs)?;
    Ok(g.value(m).clone())
}

/// Differentiable mixed op on a graph.
pub fn mixed_op_var(g: &mut Graph, theta: Var, outputs: &[Var]) -> Result<Var> {
    if g.value(theta).len() != outputs.len() || outputs.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "mixed_op",
            detail: format!("{} logits for {} op outputs", g.value(theta).len(), outputs.len()),
        });
    }
    let alpha = g.softmax(theta);
    let mut acc = g.scale_by(outputs[0], alpha, 0)?;
    for (o, &out) in outputs.iter().enumerate().skip(1) {
        let term = g.scale_by(out, alpha, o)?;
        acc = g.add(acc, term)?;
    }
    Ok(acc)
}

/// Best non-zero op of an edge and its weight renormalized over non-zero ops.
/// Ties go to the lowest op index.
pub fn edge_strength(theta_edge: &[f64], op_set: &[OpKind]) -> Option<(usize, f64)> {
    let live: Vec<usize> = (0..op_set.len()).filter(|&o| op_set[o] != OpKind::Zero).collect();
    let m = live.iter().map(|&o| theta_edge[o]).fold(f64::NEG_INFINITY, f64::max);
    // summed in sorted order so edges holding permuted logits tie exactly
    let mut terms: Vec<f64> = live.iter().map(|&o| (theta_edge[o] - m).exp()).collect();
    terms.sort_by(f64::total_cmp);
    let denom: f64 = terms.iter().sum();
    let mut best: Option<(usize, f64)> = None;
    for &o in &live {
        let w = (theta_edge[o] - m).exp() / denom;
        if best.is_none_or(|(_, bw)| w > bw) {
            best = Some((o, w));
        }
    }
    best
}

fn discretize_cell(logits: &EdgeLogits, node_count: usize, op_set: &[OpKind]) -> Result<CellSpec> {
    let mut edges = Vec::new();
    for j in 2..node_count - 1 {
        let mut ranked: Vec<(usize, usize, f64)> = Vec::new();
        for (&(i, jj), theta) in logits {
            if jj == j {
                let (op, w) = edge_strength(theta, op_set)
                    .ok_or_else(|| Error::InvalidArgument("op set has no non-zero op".into()))?;
                ranked.push((i, op, w));
            }
        }
        if ranked.len() < 2 {
            return Err(Error::InvalidArgument(format!("node {j} has {} incoming edges, needs 2", ranked.len())));
        }
        // strongest first; equal strength keeps the lower source
        ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        let mut kept = ranked[..2].to_vec();
        kept.sort_by_key(|r| r.0);
        edges.extend(kept.into_iter().map(|(i, op, _)| Edge::new(i, j, op_set[op])));
    }
    Ok(CellSpec::new(node_count, edges))
}

pub fn discretize(state: &RelaxationState) -> Result<Genotype> {
    for (&(i, j), v) in state.normal.iter().chain(&state.reduce) {
        if i >= j || j < 2 || j + 1 >= state.node_count {
            return Err(Error::InvalidArgument(format!("edge ({i},{j}) is not a candidate edge")));
        }
        if v.len() != state.op_set.len() {
            return Err(Error::InvalidArgument(format!("edge ({i},{j}) has {} logits", v.len())));
        }
    }
    let genotype = Genotype {
        normal: discretize_cell(&state.normal, state.node_count, &state.op_set)?,
        reduce: discretize_cell(&state.reduce, state.node_count, &state.op_set)?,
        space: state.space(),
    };
    ensure_valid(&genotype)?;
    Ok(genotype)
}

// ---------------------------------------------------------------------------
// bilevel search

/// A model built from mixed ops. `theta` holds one graph variable per edge
/// in [`RelaxationState::flatten`] order.
pub trait Surrogate {
    type Batch;

    fn init_weights(&self) -> Vec<Array>;

    fn loss(
        &self,
        g: &mut Graph,
        state: &RelaxationState,
        theta: &[Var],
        weights: &[Var],
        batch: &Self::Batch,
    ) -> Result<Var>;
}

/// Alternating first-order updates of weights (train split) and logits
/// (validation split).
#[derive(Debug, Clone)]
pub struct Bilevel {
    pub state: RelaxationState,
    pub weights: Vec<Array>,
    w_opt: Sgd,
    theta_opt: Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub train: f64,
    pub val: f64,
}

impl Bilevel {
    pub fn new<S: Surrogate>(state: RelaxationState, surrogate: &S, weights: SgdConfig, theta: AdamConfig) -> Self {
        Self { state, weights: surrogate.init_weights(), w_opt: Sgd::new(weights), theta_opt: Adam::new(theta) }
    }

    fn evaluate<S: Surrogate>(&self, s: &S, batch: &S::Batch) -> Result<(Graph, Vec<Var>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let theta: Vec<Var> = self.state.flatten().into_iter().map(|a| g.leaf(a)).collect();
        let w: Vec<Var> = self.weights.iter().map(|a| g.leaf(a.clone())).collect();
        let l = s.loss(&mut g, &self.state, &theta, &w, batch)?;
        let v = g.value(l).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("surrogate loss {v}")));
        }
        Ok((g, theta, w, l))
    }

    pub fn loss<S: Surrogate>(&self, s: &S, batch: &S::Batch) -> Result<f64> {
        let (g, _, _, l) = self.evaluate(s, batch)?;
        Ok(g.value(l).item())
    }

    /// Weight update only (logits frozen).
    pub fn weight_step<S: Surrogate>(&mut self, s: &S, batch: &S::Batch) -> Result<f64> {
        let (g, _, w, l) = self.evaluate(s, batch)?;
        let grads = g.backward(l);
        let gw: Vec<Array> = w.iter().map(|&v| grads.wrt(&g, v)).collect();
        self.w_opt.step(&mut self.weights, &gw)?;
        Ok(g.value(l).item())
    }

    /// Logit update only (weights frozen).
    pub fn theta_step<S: Surrogate>(&mut self, s: &S, batch: &S::Batch) -> Result<f64> {
        let (g, theta, _, l) = self.evaluate(s, batch)?;
        let grads = g.backward(l);
        let gt: Vec<Array> = theta.iter().map(|&v| grads.wrt(&g, v)).collect();
        let mut flat = self.state.flatten();
        self.theta_opt.step(&mut flat, &gt)?;
        self.state.assign(&flat);
        Ok(g.value(l).item())
    }
}

/// One alternating update: weights on `train`, then logits on `val`.
pub fn bilevel_step<S: Surrogate>(search: &mut Bilevel, s: &S, train: &S::Batch, val: &S::Batch) -> Result<StepLosses> {
    let train = search.weight_step(s, train)?;
    let val = search.theta_step(s, val)?;
    Ok(StepLosses { train, val })
}

/// Scalar toy: every op multiplies its input by a fixed gain. Each
/// intermediate node averages its mixed incoming edges; the prediction is
/// the last intermediate node plus a learned bias. Only the normal cell is
/// used.
#[derive(Debug, Clone)]
pub struct ScalarToy {
    pub gains: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ScalarBatch {
    pub x: Array,
    pub y: Array,
}

impl ScalarBatch {
    /// Targets `slope * x` on a fixed grid of inputs in `[-1, 1]`.
    pub fn linear(n: usize, slope: f64) -> Self {
        let xs: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n.max(2) - 1) as f64).collect();
        let ys = xs.iter().map(|x| slope * x).collect();
        Self { x: Array::new(vec![n, 1], xs).expect("column"), y: Array::new(vec![n, 1], ys).expect("column") }
    }
}

impl Surrogate for ScalarToy {
    type Batch = ScalarBatch;

    fn init_weights(&self) -> Vec<Array> {
        vec![Array::vector(vec![0.5])]
    }

    fn loss(
        &self,
        g: &mut Graph,
        state: &RelaxationState,
        theta: &[Var],
        weights: &[Var],
        batch: &ScalarBatch,
    ) -> Result<Var> {
        if self.gains.len() != state.op_set.len() {
            return Err(Error::InvalidArgument(format!("{} gains for {} ops", self.gains.len(), state.op_set.len())));
        }
        let x = g.leaf(batch.x.clone());
        let gains = g.leaf(Array::vector(self.gains.clone()));
        let mut nodes = vec![x, x];
        let index: BTreeMap<(usize, usize), usize> = state.normal.keys().enumerate().map(|(i, &e)| (e, i)).collect();
        for j in 2..state.node_count - 1 {
            let mut sum: Option<Var> = None;
            let mut count = 0;
            for (i, &node) in nodes.iter().enumerate().take(j) {
                let Some(&t) = index.get(&(i, j)) else { continue };
                let outs = (0..self.gains.len()).map(|o| g.scale_by(node, gains, o)).collect::<Result<Vec<_>>>()?;
                let m = mixed_op_var(g, theta[t], &outs)?;
                sum = Some(match sum {
                    Some(s) => g.add(s, m)?,
                    None => m,
                });
                count += 1;
            }
            let s = sum.ok_or_else(|| Error::InvalidArgument(format!("node {j} has no incoming edges")))?;
            nodes.push(g.scale(s, 1.0 / count as f64));
        }
        let last = *nodes.last().expect("at least one intermediate");
        let pred = g.add_row(last, weights[0])?;
        mse(g, pred, &batch.y)
    }
}

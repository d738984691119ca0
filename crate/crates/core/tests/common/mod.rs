//! Reference implementations used as test oracles. None of these call into
//! the library's counting, sampling or protocol code; they recompute the
//! expected values from first principles.
#![allow(dead_code)]

pub mod gradcheck;

use std::path::PathBuf;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use reluplan::cellgraph::{CellSpec, Edge, Genotype, OpKind, SpaceTag};
use reluplan::latency::RunRecord;
use reluplan::pisim::{DenseLayer, Model};
use reluplan::relaxation::{EdgeLogits, RelaxationState};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures")).join(name)
}

pub fn read_fixture(name: &str) -> String {
    std::fs::read_to_string(fixture(name)).unwrap_or_else(|e| panic!("fixture {name}: {e}"))
}

// ---------------------------------------------------------------------------
// ReLU ledgers

/// Per-cell ReLUs by walking the cells one at a time. `factor` is the channel
/// multiplier at each reduce (4 for ReLU balancing, 2 for FLOP balancing).
pub fn cell_relus(h0: u64, w0: u64, c: u64, d: usize, placement: (usize, usize), factor: u64) -> Vec<u64> {
    let (mut h, mut w, mut ch) = (h0, w0, c);
    let mut out = Vec::with_capacity(d);
    for i in 0..d {
        if i == placement.0 || i == placement.1 {
            h /= 2;
            w /= 2;
            ch *= factor;
        }
        out.push(h * w * ch);
    }
    out
}

/// ReLUs of the three-conv stem on a 224x224 input, layer by layer: the
/// first conv has no ReLU in front, the other two are ReLU-Conv-BN.
pub fn imagenet_stem_relus(c: u64) -> [u64; 3] {
    let mut res = 224;
    let mut channels = 3;
    let mut out = [0; 3];
    for (i, (cout, pre_relu)) in [(c / 2, false), (c, true), (c, true)].into_iter().enumerate() {
        out[i] = if pre_relu { res * res * channels } else { 0 };
        res /= 2;
        channels = cout;
    }
    out
}

/// Every `(C, D)` in the ranges within tolerance, sorted like the planner.
pub fn budget_brute(budget: u64, h0: u64, w0: u64, cs: (u64, u64), ds: (u64, u64), tol: f64) -> Vec<(u64, u64, u64)> {
    let mut out = Vec::new();
    for c in cs.0..=cs.1 {
        for d in ds.0..=ds.1 {
            let r = h0 * w0 * c * d;
            let dev = (r as i128 - budget as i128).unsigned_abs() as f64;
            if dev <= tol * budget as f64 {
                out.push((c, d, r));
            }
        }
    }
    out.sort_by_key(|&(c, d, r)| ((r as i128 - budget as i128).unsigned_abs(), c, d));
    out
}

// ---------------------------------------------------------------------------
// numerics

/// Central finite differences of a scalar function.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&p, &q)| (p - q).abs() / p.abs().max(q.abs()).max(1.0)).fold(0.0, f64::max)
}

/// Draws whose top two perturbed logits are within `tau * ln(1e3 * K)` of
/// each other can keep more than 1e-3 of relaxed mass off the winner at
/// small `tau`; they are counted rather than asserted.
pub fn near_tie(beta: &[f64], noise: &[f64], tau: f64) -> bool {
    // the log-normalizer shifts every entry equally, so raw logits suffice
    let mut z: Vec<f64> = beta.iter().zip(noise).map(|(a, b)| a + b).collect();
    z.sort_by(|a, b| b.total_cmp(a));
    z[0] - z[1] < tau * (1e3 * beta.len() as f64).ln()
}

/// Softmax probabilities computed without the library.
pub fn softmax_probs(beta: &[f64]) -> Vec<f64> {
    let m = beta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = beta.iter().map(|b| (b - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Direct categorical sampler by inverse CDF.
pub fn categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Pearson statistic and its upper-tail p-value computed from the regularized
/// incomplete gamma by series expansion.
pub fn chi2_p_value(observed: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = observed.iter().sum();
    let stat: f64 = observed
        .iter()
        .zip(probs)
        .map(|(&o, &p)| {
            let e = p * n as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let k = (observed.len() - 1) as f64;
    1.0 - lower_gamma_regularized(k / 2.0, stat / 2.0)
}

fn lower_gamma_regularized(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x > a + 1.0 {
        // continued fraction for the upper tail
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / 1e-300;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            d = if d.abs() < 1e-300 { 1e-300 } else { d };
            c = b + an / c;
            c = if c.abs() < 1e-300 { 1e-300 } else { c };
            d = 1.0 / d;
            h *= d * c;
            if (d * c - 1.0).abs() < 1e-15 {
                break;
            }
        }
        return 1.0 - (-x + a * x.ln() - ln_gamma(a)).exp() * h;
    }
    let mut sum = 1.0 / a;
    let mut term = sum;
    let mut ap = a;
    for _ in 0..1000 {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * 1e-16 {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

// ---------------------------------------------------------------------------
// discretization

pub fn sphynx_ops() -> Vec<OpKind> {
    OpKind::SPHYNX.to_vec()
}

pub fn legacy_ops() -> Vec<OpKind> {
    use OpKind::*;
    vec![Zero, MaxPool3x3, AvgPool3x3, Identity, SepConv3x3, SepConv5x5, SepDilConv3x3, SepDilConv5x5]
}

/// Random state with either continuous logits or logits from a small grid
/// (which makes ties common).
pub fn fuzz_state(rng: &mut ChaCha8Rng) -> RelaxationState {
    let n = rng.random_range(4..9);
    let ops = if rng.random_bool(0.5) { sphynx_ops() } else { legacy_ops() };
    let mut state = RelaxationState::new(n, ops).unwrap();
    let quantized = rng.random_bool(0.4);
    for v in state.normal.values_mut().chain(state.reduce.values_mut()).flat_map(|v| v.iter_mut()) {
        *v = if quantized { rng.random_range(-2..=2) as f64 } else { rng.random_range(-4.0..4.0) };
    }
    state
}

/// Ranks every (edge, non-zero op) weight of one cell and keeps, per node,
/// the pair of edges with the lexicographically best strengths.
pub fn discretize_cell_brute(logits: &EdgeLogits, n: usize, ops: &[OpKind]) -> CellSpec {
    let mut edges = Vec::new();
    for j in 2..n - 1 {
        // (src, best op, strength)
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (&(i, jj), theta) in logits {
            if jj != j {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for o in 0..ops.len() {
                if ops[o] == OpKind::Zero {
                    continue;
                }
                let mut terms: Vec<f64> =
                    (0..ops.len()).filter(|&q| ops[q] != OpKind::Zero).map(|q| (theta[q] - theta[o]).exp()).collect();
                // weight of o is 1 / sum_q exp(theta_q - theta_o); only the
                // maximum matters, where this matches the stable form
                terms.sort_by(f64::total_cmp);
                let w = 1.0 / terms.iter().sum::<f64>();
                let is_max = (0..ops.len()).filter(|&q| ops[q] != OpKind::Zero).all(|q| theta[q] <= theta[o]);
                if is_max && best.is_none() {
                    best = Some((o, w));
                }
            }
            let (o, w) = best.expect("a non-zero op exists");
            cands.push((i, o, w));
        }
        let mut pick: Option<(usize, usize)> = None;
        for a in 0..cands.len() {
            for b in a + 1..cands.len() {
                let better = match pick {
                    None => true,
                    Some((pa, pb)) => pair_key(&cands, a, b) > pair_key(&cands, pa, pb),
                };
                if better {
                    pick = Some((a, b));
                }
            }
        }
        let (a, b) = pick.expect("at least two incoming edges");
        let mut kept = [cands[a], cands[b]];
        kept.sort_by_key(|c| c.0);
        edges.extend(kept.iter().map(|&(i, o, _)| Edge::new(i, j, ops[o])));
    }
    CellSpec::new(n, edges)
}

// strengths high-to-low, then sources low-to-high (negated for the max)
fn pair_key(c: &[(usize, usize, f64)], a: usize, b: usize) -> (OrdF, OrdF, i64, i64) {
    let (hi, lo) = if c[a].2 > c[b].2 || (c[a].2 == c[b].2 && c[a].0 < c[b].0) { (a, b) } else { (b, a) };
    (OrdF(c[hi].2), OrdF(c[lo].2), -(c[hi].0 as i64), -(c[lo].0 as i64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF(f64);

impl Eq for OrdF {}
impl PartialOrd for OrdF {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrdF {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

pub fn discretize_brute(state: &RelaxationState) -> Genotype {
    let space = if state.op_set.iter().all(|o| matches!(o, OpKind::Zero) || o.allowed_in_sphynx()) {
        SpaceTag::Sphynx
    } else {
        SpaceTag::Legacy
    };
    Genotype {
        normal: discretize_cell_brute(&state.normal, state.node_count, &state.op_set),
        reduce: discretize_cell_brute(&state.reduce, state.node_count, &state.op_set),
        space,
    }
}

// ---------------------------------------------------------------------------
// protocol

pub fn random_input(n: usize, bound: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// The first `k` layers of `model`, each with an explicit ReLU flag matching
/// its role in the full model.
pub fn prefix(model: &Model, k: usize) -> Model {
    let n = model.layers.len();
    let mut m = model.clone();
    m.layers.truncate(k);
    for (i, l) in m.layers.iter_mut().enumerate() {
        l.relu = Some(model.layers[i].relu.unwrap_or(i + 1 < n));
    }
    m
}

/// Two-layer model over p = 101 with no fractional bits.
pub fn small_field_model() -> Model {
    Model {
        layers: vec![
            DenseLayer { weights: vec![vec![1.0, -1.0], vec![2.0, 1.0]], bias: vec![0.0, 1.0], relu: None },
            DenseLayer { weights: vec![vec![1.0, 1.0]], bias: vec![0.0], relu: None },
        ],
        scale_bits: 0,
        modulus: 101,
        guard_bits: 1,
    }
}

/// Single-party fixed-point forward pass on plain integers: weights at
/// scale s, biases at 2s, floor truncation after each layer. Returns the
/// output at scale s, or the index of the first layer whose pre-truncation
/// value reaches `(p / 2) >> guard`.
pub fn fixed_point_forward(model: &Model, x: &[f64]) -> Result<Vec<i128>, usize> {
    let s = model.scale_bits;
    let bound = (model.modulus as i128 / 2) >> model.guard_bits;
    let q = |v: f64, bits: u32| (v * 2f64.powi(bits as i32)).round() as i128;
    let mut y: Vec<i128> = x.iter().map(|&v| q(v, s)).collect();
    let n = model.layers.len();
    for (li, l) in model.layers.iter().enumerate() {
        let relu = l.relu.unwrap_or(li + 1 < n);
        let mut next = Vec::with_capacity(l.weights.len());
        for (row, &b) in l.weights.iter().zip(&l.bias) {
            let z: i128 = row.iter().zip(&y).map(|(&w, &v)| q(w, s) * v).sum::<i128>() + q(b, 2 * s);
            if z.abs() >= bound {
                return Err(li);
            }
            let z = if relu { z.max(0) } else { z };
            next.push(z >> s);
        }
        y = next;
    }
    Ok(y)
}

/// Maps signed integers to their field representatives.
pub fn to_field(values: &[i128], p: u64) -> Vec<u64> {
    values.iter().map(|&v| v.rem_euclid(p as i128) as u64).collect()
}

/// Real-arithmetic forward pass.
pub fn real_forward(model: &Model, x: &[f64]) -> Vec<f64> {
    let n = model.layers.len();
    let mut y = x.to_vec();
    for (li, l) in model.layers.iter().enumerate() {
        let relu = l.relu.unwrap_or(li + 1 < n);
        y = l
            .weights
            .iter()
            .zip(&l.bias)
            .map(|(row, &b)| {
                let z = row.iter().zip(&y).map(|(w, v)| w * v).sum::<f64>() + b;
                if relu {
                    z.max(0.0)
                } else {
                    z
                }
            })
            .collect();
    }
    y
}

/// Dense model with the given layer sizes and weights in `[-scale, scale)`.
pub fn random_model<R: Rng>(dims: &[usize], scale: f64, rng: &mut R) -> Model {
    let layers = dims
        .windows(2)
        .map(|d| DenseLayer {
            weights: (0..d[1]).map(|_| (0..d[0]).map(|_| rng.random_range(-scale..scale)).collect()).collect(),
            bias: (0..d[1]).map(|_| rng.random_range(-scale..scale)).collect(),
            relu: None,
        })
        .collect();
    Model::new(layers)
}

// ---------------------------------------------------------------------------
// frontiers

/// Labels of records not dominated by any other, by pairwise comparison.
pub fn pareto_brute(records: &[RunRecord]) -> Vec<String> {
    let mut out: Vec<&RunRecord> = records
        .iter()
        .filter(|r| {
            let acc = r.accuracy_pct.unwrap();
            !records.iter().any(|o| {
                let oa = o.accuracy_pct.unwrap();
                o.latency_ms <= r.latency_ms && oa >= acc && (o.latency_ms < r.latency_ms || oa > acc)
            })
        })
        .collect();
    out.sort_by(|a, b| a.latency_ms.total_cmp(&b.latency_ms).then(a.label.cmp(&b.label)));
    out.into_iter().map(|r| r.label.clone()).collect()
}

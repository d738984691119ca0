//! Gumbel-sampled bilevel search over reduce-cell placements, plus the
//! exhaustive grid search used to check it.
//!
//! Each placement is a *branch*: a candidate network with its own weights.
//! The search alternates a weight step on the branch sampled for a training
//! minibatch with a logit step on a validation minibatch. The logit step uses
//! the straight-through estimator: the forward pass is the hard one-hot
//! sample, the gradient flows through the relaxed weights, which needs every
//! branch's validation loss (forward only, no weight gradients).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::accounting::{Balancing, NetworkPlan};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::gradcore::{
    argmax, cross_entropy, gumbel_noise, gumbel_st_var, log_softmax, mse, softmax, Adam, AdamConfig, Array, Graph, Sgd,
    SgdConfig, TauSchedule, Var,
};
use crate::skeleton::enumerate_placements;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// A family of candidate networks sharing one data source.
pub trait Evaluator: Sync {
    type Batch: Send + Sync;

    fn branch_count(&self) -> usize;

    fn label(&self, branch: usize) -> String {
        branch.to_string()
    }

    fn init_params(&self, branch: usize, rng: &mut ChaCha8Rng) -> Vec<Array>;

    fn sample_batch(&self, split: Split, size: usize, rng: &mut ChaCha8Rng) -> Self::Batch;

    /// Scalar loss of `branch` with `params` already placed on `g`.
    fn loss(&self, g: &mut Graph, branch: usize, params: &[Var], batch: &Self::Batch) -> Result<Var>;
}

fn eval_loss<E: Evaluator>(ev: &E, branch: usize, params: &[Array], batch: &E::Batch) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let l = ev.loss(&mut g, branch, &vars, batch)?;
    Ok(g.value(l).item())
}

fn train_step<E: Evaluator>(
    ev: &E,
    branch: usize,
    params: &mut [Array],
    opt: &mut Sgd,
    batch: &E::Batch,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let l = ev.loss(&mut g, branch, &vars, batch)?;
    let value = g.value(l).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss {value}")));
    }
    let grads = g.backward(l);
    let grads: Vec<Array> = vars.iter().map(|&v| grads.wrt(&g, v)).collect();
    opt.step(params, &grads)?;
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub tau: TauSchedule,
    pub weights: SgdConfig,
    pub beta: AdamConfig,
    /// Validation batches averaged for the grid table.
    pub eval_batches: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            epochs: 600,
            batches_per_epoch: 10,
            batch_size: 64,
            tau: TauSchedule::default(),
            weights: SgdConfig::default(),
            beta: AdamConfig::default(),
            eval_batches: 4,
            seed: 0,
        }
    }
}

impl SearchConfig {
    /// Small budget for tests and the CLI defaults. Weight steps converge a
    /// branch within a few samples; a larger logit rate lets the first
    /// trained branches win on uniform families.
    pub fn desk() -> Self {
        Self {
            epochs: 40,
            batches_per_epoch: 10,
            batch_size: 64,
            weights: SgdConfig { lr: 0.2, momentum: 0.0, weight_decay: 0.0 },
            beta: AdamConfig { lr: 0.01, weight_decay: 0.0, ..AdamConfig::default() },
            ..Self::default()
        }
    }

    fn check(&self) -> Result<()> {
        if self.epochs == 0 || self.batches_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs, batches and batch size must be positive".into()));
        }
        if !(self.tau.start >= self.tau.end && self.tau.end > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tau schedule {} -> {} must satisfy start >= end > 0",
                self.tau.start, self.tau.end
            )));
        }
        Ok(())
    }
}

/// Logits over placements and the current temperature.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlacementState {
    pub beta: Vec<f64>,
    pub tau: f64,
    pub step: u64,
}

impl PlacementState {
    pub fn new(k: usize, tau: f64) -> Self {
        Self { beta: vec![0.0; k], tau, step: 0 }
    }

    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&Array::vector(self.beta.clone())).into_data()
    }
}

/// Argmax of `log softmax(beta)`, lowest index on ties.
pub fn pick_final(beta: &[f64]) -> usize {
    argmax(log_softmax(&Array::vector(beta.to_vec())).data())
}

/// Shannon entropy (nats) of `softmax(beta)`.
pub fn entropy(beta: &[f64]) -> f64 {
    softmax(&Array::vector(beta.to_vec())).data().iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub epoch: usize,
    pub tau: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub beta: Vec<f64>,
}

/// Gradient-step bookkeeping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StepCounters {
    pub weight_steps: u64,
    pub beta_steps: u64,
    /// Forward-only branch evaluations spent on logit gradients.
    pub forward_evals: u64,
}

impl StepCounters {
    pub fn gradient_steps(&self) -> u64 {
        self.weight_steps + self.beta_steps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchResult {
    pub final_beta: Vec<f64>,
    pub picked: usize,
    pub picked_label: String,
    pub trajectory: Vec<TrajectoryRow>,
    pub counters: StepCounters,
}

impl SearchResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("search result serializes")
    }

    /// Columns `epoch,tau,train_loss,val_loss,beta_0..beta_{K-1}`.
    pub fn trajectory_csv(&self) -> Result<String> {
        let k = self.final_beta.len();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["epoch".to_string(), "tau".into(), "train_loss".into(), "val_loss".into()];
        header.extend((0..k).map(|i| format!("beta_{i}")));
        w.write_record(&header)?;
        for r in &self.trajectory {
            let mut rec =
                vec![r.epoch.to_string(), r.tau.to_string(), r.train_loss.to_string(), r.val_loss.to_string()];
            rec.extend(r.beta.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
    }
}

fn diverged(epoch: usize, branch: usize) -> Error {
    Error::SearchDiverged { epoch, branch }
}

/// Hooks for observing a search; used by isolation tests.
pub trait SearchObserver {
    /// Whether the hooks want parameter snapshots (copying them is not free).
    const SNAPSHOTS: bool = true;

    fn weight_step(&mut self, _branch: usize, _before: &[Vec<Array>], _after: &[Vec<Array>]) {}
    fn beta_step(&mut self, _before: &[Vec<Array>], _after: &[Vec<Array>]) {}
}

impl SearchObserver for () {
    const SNAPSHOTS: bool = false;
}

pub fn run_search<E: Evaluator>(ev: &E, config: &SearchConfig, exec: Exec) -> Result<SearchResult> {
    run_search_observed(ev, config, exec, &mut ())
}

/// Alternating first-order search. One minibatch is one branch sample.
pub fn run_search_observed<E: Evaluator, O: SearchObserver>(
    ev: &E,
    config: &SearchConfig,
    exec: Exec,
    observer: &mut O,
) -> Result<SearchResult> {
    config.check()?;
    let k = ev.branch_count();
    if k == 0 {
        return Err(Error::InvalidArgument("evaluator has no branches".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params: Vec<Vec<Array>> = (0..k).map(|b| ev.init_params(b, &mut rng)).collect();
    let mut w_opts: Vec<Sgd> = (0..k).map(|_| Sgd::new(config.weights)).collect();
    let mut beta_opt = Adam::new(config.beta);
    let mut state = PlacementState::new(k, config.tau.start);
    let mut counters = StepCounters::default();
    let mut trajectory = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        state.tau = config.tau.at(epoch, config.epochs);
        let (mut train_sum, mut val_sum) = (0.0, 0.0);
        for _ in 0..config.batches_per_epoch {
            // weight step on the sampled branch
            let batch = ev.sample_batch(Split::Train, config.batch_size, &mut rng);
            let noise = gumbel_noise(k, &mut rng);
            let branch = gumbel_index(&state.beta, &noise);
            let before = observe_copy::<O>(&params);
            let loss = train_step(ev, branch, &mut params[branch], &mut w_opts[branch], &batch)
                .map_err(|_| diverged(epoch, branch))?;
            if let Some(b) = before {
                observer.weight_step(branch, &b, &params);
            }
            counters.weight_steps += 1;
            train_sum += loss;

            // logit step through the relaxed sample
            let batch = ev.sample_batch(Split::Val, config.batch_size, &mut rng);
            let noise = gumbel_noise(k, &mut rng);
            let losses = exec.try_map_range(k, |b| {
                let l = eval_loss(ev, b, &params[b], &batch).map_err(|_| diverged(epoch, b))?;
                if l.is_finite() {
                    Ok(l)
                } else {
                    Err(diverged(epoch, b))
                }
            })?;
            counters.forward_evals += k as u64;
            let mut g = Graph::new();
            let beta = g.leaf(Array::vector(state.beta.clone()));
            let (st, sampled) = gumbel_st_var(&mut g, beta, &noise, state.tau)?;
            let items = losses.iter().map(|&l| Array::scalar(l)).collect();
            let f = g.weighted_sum(st, items)?;
            let grad = g.backward(f).wrt(&g, beta);
            let before = observe_copy::<O>(&params);
            let mut b = [Array::vector(std::mem::take(&mut state.beta))];
            beta_opt.step(&mut b, &[grad])?;
            state.beta = b[0].data().to_vec();
            if !state.beta.iter().all(|v| v.is_finite()) {
                return Err(diverged(epoch, sampled));
            }
            if let Some(b) = before {
                observer.beta_step(&b, &params);
            }
            state.step += 1;
            counters.beta_steps += 1;
            val_sum += losses[sampled];
        }
        let n = config.batches_per_epoch as f64;
        trajectory.push(TrajectoryRow {
            epoch,
            tau: state.tau,
            train_loss: train_sum / n,
            val_loss: val_sum / n,
            beta: state.beta.clone(),
        });
    }
    let picked = pick_final(&state.beta);
    Ok(SearchResult { final_beta: state.beta, picked, picked_label: ev.label(picked), trajectory, counters })
}

fn gumbel_index(beta: &[f64], noise: &[f64]) -> usize {
    let lp = log_softmax(&Array::vector(beta.to_vec()));
    let z: Vec<f64> = lp.data().iter().zip(noise).map(|(a, b)| a + b).collect();
    argmax(&z)
}

fn observe_copy<O: SearchObserver>(params: &[Vec<Array>]) -> Option<Vec<Vec<Array>>> {
    O::SNAPSHOTS.then(|| params.to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub branch: usize,
    pub label: String,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub counters: StepCounters,
    /// Training epochs consumed over all branches.
    pub epochs: u64,
}

impl GridResult {
    /// Branch with the lowest converged validation loss (lowest index on ties).
    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (i, r) in self.rows.iter().enumerate() {
            if r.val_loss < self.rows[best].val_loss {
                best = i;
            }
        }
        self.rows[best].branch
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["branch", "label", "val_loss"])?;
        for r in &self.rows {
            w.write_record([r.branch.to_string(), r.label.clone(), r.val_loss.to_string()])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
    }
}

/// Trains every branch on its own seeded stream with the same budget.
pub fn grid_search<E: Evaluator>(ev: &E, config: &SearchConfig, exec: Exec) -> Result<GridResult> {
    config.check()?;
    let k = ev.branch_count();
    let rows = exec.try_map_range(k, |branch| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(branch as u64 + 1);
        let mut params = ev.init_params(branch, &mut rng);
        let mut opt = Sgd::new(config.weights);
        for epoch in 0..config.epochs {
            for _ in 0..config.batches_per_epoch {
                let batch = ev.sample_batch(Split::Train, config.batch_size, &mut rng);
                train_step(ev, branch, &mut params, &mut opt, &batch).map_err(|_| diverged(epoch, branch))?;
            }
        }
        let mut total = 0.0;
        for _ in 0..config.eval_batches.max(1) {
            let batch = ev.sample_batch(Split::Val, config.batch_size, &mut rng);
            total += eval_loss(ev, branch, &params, &batch)?;
        }
        let val_loss = total / config.eval_batches.max(1) as f64;
        if !val_loss.is_finite() {
            return Err(diverged(config.epochs, branch));
        }
        Ok(GridRow { branch, label: ev.label(branch), val_loss })
    })?;
    let steps = (k * config.epochs * config.batches_per_epoch) as u64;
    Ok(GridResult {
        rows,
        counters: StepCounters { weight_steps: steps, beta_steps: 0, forward_evals: (k * config.eval_batches) as u64 },
        epochs: (k * config.epochs) as u64,
    })
}

// ---------------------------------------------------------------------------
// built-in evaluators

fn normal_array(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| -> f64 { StandardNormal.sample(rng) }).collect();
    Array::new(shape.to_vec(), data).expect("shape matches")
}

/// Inputs, clean targets and one noisy copy of the targets per branch.
#[derive(Debug, Clone)]
pub struct RegressionBatch {
    pub x: Array,
    pub noisy: Vec<Array>,
}

/// Linear regression shared by all branches, where branch `j` sees targets
/// corrupted by Gaussian noise of variance `noise_var[j]`. Each branch's loss
/// is a quadratic bowl whose floor is its noise variance, so the ordering of
/// achievable validation losses is known by construction.
#[derive(Debug, Clone)]
pub struct PlantedRegression {
    pub dim: usize,
    pub teacher: Vec<f64>,
    pub noise_var: Vec<f64>,
}

impl PlantedRegression {
    /// `k` branches; `best` has noise variance 0.1, the others at least 0.7.
    pub fn planted(k: usize, best: usize, seed: u64) -> Self {
        let noise_var = (0..k).map(|j| if j == best { 0.1 } else { 0.7 + 0.1 * j as f64 }).collect();
        Self::with_noise(noise_var, seed)
    }

    /// Every branch has the same noise level.
    pub fn uniform(k: usize, seed: u64) -> Self {
        Self::with_noise(vec![0.5; k], seed)
    }

    pub fn with_noise(noise_var: Vec<f64>, seed: u64) -> Self {
        let dim = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let teacher = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self { dim, teacher, noise_var }
    }

    /// Lowest reachable validation loss of each branch.
    pub fn bayes_loss(&self) -> &[f64] {
        &self.noise_var
    }
}

impl Evaluator for PlantedRegression {
    type Batch = RegressionBatch;

    fn branch_count(&self) -> usize {
        self.noise_var.len()
    }

    fn init_params(&self, _branch: usize, rng: &mut ChaCha8Rng) -> Vec<Array> {
        vec![Array::random_uniform(&[self.dim, 1], 0.1, rng), Array::zeros(&[1])]
    }

    fn sample_batch(&self, _split: Split, size: usize, rng: &mut ChaCha8Rng) -> RegressionBatch {
        let x = normal_array(&[size, self.dim], rng);
        let clean: Vec<f64> =
            x.data().chunks(self.dim).map(|r| r.iter().zip(&self.teacher).map(|(a, b)| a * b).sum()).collect();
        let noisy = self
            .noise_var
            .iter()
            .map(|&v| {
                let sd = v.sqrt();
                let data = clean
                    .iter()
                    .map(|&c| {
                        let e: f64 = StandardNormal.sample(rng);
                        c + sd * e
                    })
                    .collect();
                Array::new(vec![size, 1], data).expect("column")
            })
            .collect();
        RegressionBatch { x, noisy }
    }

    fn loss(&self, g: &mut Graph, branch: usize, params: &[Var], batch: &RegressionBatch) -> Result<Var> {
        let x = g.leaf(batch.x.clone());
        let z = g.matmul(x, params[0])?;
        let pred = g.add_row(z, params[1])?;
        mse(g, pred, &batch.noisy[branch])
    }
}

#[derive(Debug, Clone)]
pub struct ClassBatch {
    pub x: Array,
    pub labels: Vec<usize>,
}

/// Branch `i` is a dense ReLU network with one hidden layer per cell, whose
/// width follows the per-cell ReLU count of placement `i` under FLOP
/// balancing (relative to the first cell). Earlier reduces give narrower
/// layers. The task is classification against a fixed random teacher.
#[derive(Debug, Clone)]
pub struct SurrogateSkeleton {
    pub placements: Vec<(usize, usize)>,
    pub widths: Vec<Vec<usize>>,
    pub input_dim: usize,
    pub classes: usize,
    teacher: Vec<Array>,
}

impl SurrogateSkeleton {
    pub fn new(depth: usize, base_width: usize, seed: u64) -> Result<Self> {
        let placements = enumerate_placements(depth)?;
        let mut widths = Vec::with_capacity(placements.len());
        for &p in &placements {
            let plan = NetworkPlan::new(16, 16, 4, depth, p).with_balancing(Balancing::Flop);
            let dims = plan.cell_dims();
            let first = (16 * 16 * 4) as f64;
            widths.push(
                dims.iter()
                    .map(|d| ((base_width as f64 * d.volume() as f64 / first).round() as usize).max(1))
                    .collect(),
            );
        }
        let (input_dim, classes) = (8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let teacher = vec![normal_array(&[input_dim, 16], &mut rng), normal_array(&[16, classes], &mut rng)];
        Ok(Self { placements, widths, input_dim, classes, teacher })
    }
}

impl Evaluator for SurrogateSkeleton {
    type Batch = ClassBatch;

    fn branch_count(&self) -> usize {
        self.placements.len()
    }

    fn label(&self, branch: usize) -> String {
        let (a, b) = self.placements[branch];
        format!("({a},{b})")
    }

    fn init_params(&self, branch: usize, rng: &mut ChaCha8Rng) -> Vec<Array> {
        let mut out = Vec::new();
        let mut fan_in = self.input_dim;
        for &w in self.widths[branch].iter().chain(std::iter::once(&self.classes)) {
            let scale = (1.0 / fan_in as f64).sqrt();
            out.push(Array::random_uniform(&[fan_in, w], scale, rng));
            out.push(Array::zeros(&[w]));
            fan_in = w;
        }
        out
    }

    fn sample_batch(&self, _split: Split, size: usize, rng: &mut ChaCha8Rng) -> ClassBatch {
        let x = normal_array(&[size, self.input_dim], rng);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let w0 = g.leaf(self.teacher[0].clone());
        let w1 = g.leaf(self.teacher[1].clone());
        let h = g.matmul(xv, w0).expect("teacher dims");
        let h = g.relu(h);
        let logits = g.matmul(h, w1).expect("teacher dims");
        let labels = g.value(logits).data().chunks(self.classes).map(argmax).collect();
        ClassBatch { x, labels }
    }

    fn loss(&self, g: &mut Graph, _branch: usize, params: &[Var], batch: &ClassBatch) -> Result<Var> {
        let mut h = g.leaf(batch.x.clone());
        let layers = params.len() / 2;
        for l in 0..layers {
            let z = g.matmul(h, params[2 * l])?;
            h = g.add_row(z, params[2 * l + 1])?;
            if l + 1 < layers {
                h = g.relu(h);
            }
        }
        cross_entropy(g, h, &batch.labels)
    }
}

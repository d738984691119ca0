//! ReLU, FLOP and parameter ledgers.
//!
//! Three counting regimes are supported:
//!
//! * ReLU balancing (the ReLU-free cell space): the only nonlinearity is the
//!   Conv1x1-BN-ReLU post-processing at each cell output, and channels
//!   quadruple whenever the resolution halves, so every cell costs
//!   `H0 * W0 * C` ReLUs wherever the reduce cells sit.
//! * FLOP balancing: channels double at each reduce, so a cell's ReLU cost
//!   depends on how many reduce cells precede it.
//! * Legacy micro-search cells: every convolution module is ReLU-Conv-BN, and
//!   each cell pays `2 * 4 * H * W * C` ReLUs of input pre-processing.
//!
//! FLOPs are `2 * MACs`; BN and ReLU are free. Parameters include two BN
//! parameters per output channel of every conv.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cellgraph::{self, CellDims, CellKind, CellSpec, Genotype, OpKind, SpaceTag};
use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stem {
    Direct,
    Imagenet3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Balancing {
    Relu,
    Flop,
}

impl Balancing {
    /// Channel multiplier applied at each reduce cell.
    pub fn channel_factor(self) -> u64 {
        match self {
            Balancing::Relu => 4,
            Balancing::Flop => 2,
        }
    }
}

/// Input side of the ImageNet three-conv stem.
pub const IMAGENET_INPUT: u64 = 224;
/// Cell resolution after the ImageNet stem.
pub const IMAGENET_CELL_RES: u64 = 28;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkPlan {
    pub h0: u64,
    pub w0: u64,
    pub channels: u64,
    pub depth: usize,
    /// Absolute cell indices of the two reduce cells; stored sorted.
    pub placement: (usize, usize),
    pub stem: Stem,
    pub balancing: Balancing,
    pub genotype: Genotype,
    pub num_classes: u64,
}

impl NetworkPlan {
    pub fn new(h0: u64, w0: u64, channels: u64, depth: usize, placement: (usize, usize)) -> Self {
        let placement = if placement.0 <= placement.1 { placement } else { (placement.1, placement.0) };
        Self {
            h0,
            w0,
            channels,
            depth,
            placement,
            stem: Stem::Direct,
            balancing: Balancing::Relu,
            genotype: cellgraph::reference_sphynx_genotype(),
            num_classes: 100,
        }
    }

    pub fn with_stem(mut self, stem: Stem) -> Self {
        self.stem = stem;
        self
    }

    pub fn with_balancing(mut self, balancing: Balancing) -> Self {
        self.balancing = balancing;
        self
    }

    pub fn with_genotype(mut self, genotype: Genotype) -> Self {
        self.genotype = genotype;
        self
    }

    pub fn with_classes(mut self, classes: u64) -> Self {
        self.num_classes = classes;
        self
    }

    /// Conventional placement at `D/3` and `2D/3`.
    pub fn default_placement(depth: usize) -> (usize, usize) {
        let a = depth / 3;
        let mut b = 2 * depth / 3;
        if b == a {
            b = a + 1;
        }
        (a, b)
    }

    pub fn is_reduce(&self, index: usize) -> bool {
        index == self.placement.0 || index == self.placement.1
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 1 {
            return Err(Error::InvalidPlan("channel count must be at least 1".into()));
        }
        if self.depth < 2 {
            return Err(Error::InvalidPlan(format!("depth {} is below 2", self.depth)));
        }
        let (a, b) = self.placement;
        if a == b {
            return Err(Error::InvalidPlan(format!("reduce indices must differ, got ({a}, {b})")));
        }
        if b >= self.depth {
            return Err(Error::InvalidPlan(format!("reduce index {b} is out of range for depth {}", self.depth)));
        }
        if self.h0 == 0 || self.w0 == 0 || !self.h0.is_multiple_of(4) || !self.w0.is_multiple_of(4) {
            return Err(Error::InvalidPlan(format!(
                "spatial size {}x{} must be positive and divisible by 4",
                self.h0, self.w0
            )));
        }
        if self.stem == Stem::Imagenet3 {
            if self.h0 != IMAGENET_CELL_RES || self.w0 != IMAGENET_CELL_RES {
                return Err(Error::InvalidPlan(format!(
                    "imagenet3 stem implies a 28x28 cell input, got {}x{}",
                    self.h0, self.w0
                )));
            }
            if !self.channels.is_multiple_of(2) {
                return Err(Error::StemChannelSplit(self.channels as usize));
            }
        }
        if self.genotype.normal.node_count != self.genotype.reduce.node_count {
            return Err(Error::InvalidGenotype("normal and reduce node counts differ".into()));
        }
        Ok(())
    }

    /// Output dims of each cell under the plan's balancing rule.
    pub fn cell_dims(&self) -> Vec<CellDims> {
        let factor = self.balancing.channel_factor();
        (0..self.depth)
            .map(|i| {
                let reduces = [self.placement.0, self.placement.1].iter().filter(|&&r| r <= i).count() as u32;
                CellDims::new(self.h0 >> reduces, self.w0 >> reduces, self.channels * factor.pow(reduces))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OpCost {
    pub macs: u64,
    pub params: u64,
}

impl OpCost {
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

impl std::ops::Add for OpCost {
    type Output = OpCost;
    fn add(self, o: OpCost) -> OpCost {
        OpCost { macs: self.macs + o.macs, params: self.params + o.params }
    }
}

impl std::ops::AddAssign for OpCost {
    fn add_assign(&mut self, o: OpCost) {
        *self = *self + o;
    }
}

impl std::iter::Sum for OpCost {
    fn sum<I: Iterator<Item = OpCost>>(iter: I) -> OpCost {
        iter.fold(OpCost::default(), |a, b| a + b)
    }
}

/// `k x k` conv producing `cout x h x w` from `cin` channels, followed by BN.
pub fn conv_cost(k: u64, cin: u64, cout: u64, h: u64, w: u64) -> OpCost {
    OpCost { macs: k * k * cin * cout * h * w, params: k * k * cin * cout + 2 * cout }
}

/// Depthwise `k x k` plus pointwise conv, followed by BN.
pub fn separable_cost(k: u64, cin: u64, cout: u64, h: u64, w: u64) -> OpCost {
    OpCost { macs: (k * k * cin + cin * cout) * h * w, params: k * k * cin + cin * cout + 2 * cout }
}

/// Dense layer `cin -> cout` with bias.
pub fn linear_cost(cin: u64, cout: u64) -> OpCost {
    OpCost { macs: cin * cout, params: cin * cout + cout }
}

/// Per-row ledger entry. `index` is the cell position, or `stem1`.. for stems.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub index: String,
    pub kind: String,
    pub h: u64,
    pub w: u64,
    pub c: u64,
    pub relus: u64,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostLedger {
    pub relus: u64,
    pub stem_relus: u64,
    pub per_cell_relus: Vec<u64>,
    /// Max-pool comparisons, tallied apart from ReLUs.
    pub maxpool_units: u64,
    pub flops: u64,
    pub params: u64,
    pub rows: Vec<LayerCost>,
}

impl CostLedger {
    fn from_rows(rows: Vec<LayerCost>, head: OpCost, maxpool_units: u64) -> Self {
        let stem_relus = rows.iter().filter(|r| r.kind == "stem").map(|r| r.relus).sum();
        let per_cell_relus: Vec<u64> =
            rows.iter().filter(|r| r.kind == "normal" || r.kind == "reduce").map(|r| r.relus).collect();
        let relus = stem_relus + per_cell_relus.iter().sum::<u64>();
        let flops = rows.iter().map(|r| r.flops).sum::<u64>() + head.flops();
        let params = rows.iter().map(|r| r.params).sum::<u64>() + head.params;
        CostLedger { relus, stem_relus, per_cell_relus, maxpool_units, flops, params, rows }
    }

    /// Additivity invariant: total equals stem plus all cells.
    pub fn is_consistent(&self) -> bool {
        self.relus == self.stem_relus + self.per_cell_relus.iter().sum::<u64>()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ledger serializes")
    }

    /// CSV with columns `cell_index,H,W,C,relus,flops,params`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["cell_index", "H", "W", "C", "relus", "flops", "params"])?;
        for r in &self.rows {
            wtr.write_record([
                r.index.clone(),
                r.h.to_string(),
                r.w.to_string(),
                r.c.to_string(),
                r.relus.to_string(),
                r.flops.to_string(),
                r.params.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory csv");
        String::from_utf8(buf).expect("utf8 csv")
    }
}

// ---------------------------------------------------------------------------
// stems

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StemLayer {
    pub name: &'static str,
    pub in_res: u64,
    pub out_res: u64,
    pub cin: u64,
    pub cout: u64,
    /// Whether a ReLU precedes the conv (ReLU-Conv-BN).
    pub pre_relu: bool,
}

impl StemLayer {
    /// ReLUs evaluated on this layer's input.
    pub fn relus(&self) -> u64 {
        if self.pre_relu {
            self.in_res * self.in_res * self.cin
        } else {
            0
        }
    }

    pub fn cost(&self) -> OpCost {
        conv_cost(3, self.cin, self.cout, self.out_res, self.out_res)
    }
}

/// The three stride-2 stem convolutions used for 224x224 inputs.
pub fn imagenet_stem_layers(channels: u64) -> Result<[StemLayer; 3]> {
    if channels == 0 || !channels.is_multiple_of(2) {
        return Err(Error::StemChannelSplit(channels as usize));
    }
    let half = channels / 2;
    Ok([
        StemLayer { name: "stem1", in_res: 224, out_res: 112, cin: 3, cout: half, pre_relu: false },
        StemLayer { name: "stem2", in_res: 112, out_res: 56, cin: half, cout: channels, pre_relu: true },
        StemLayer { name: "stem3", in_res: 56, out_res: 28, cin: channels, cout: channels, pre_relu: true },
    ])
}

/// `(h, c)` of a tensor.
type Shape = (u64, u64);

/// Stem rows and the shapes of the two tensors feeding cell 0.
fn stem_rows(plan: &NetworkPlan) -> Result<(Vec<LayerCost>, [Shape; 2])> {
    match plan.stem {
        Stem::Direct => {
            let cost = conv_cost(3, 3, plan.channels, plan.h0, plan.w0);
            let row = LayerCost {
                index: "stem".into(),
                kind: "stem".into(),
                h: plan.h0,
                w: plan.w0,
                c: plan.channels,
                relus: 0,
                flops: cost.flops(),
                params: cost.params,
            };
            Ok((vec![row], [(plan.h0, plan.channels); 2]))
        }
        Stem::Imagenet3 => {
            let layers = imagenet_stem_layers(plan.channels)?;
            let rows = layers
                .iter()
                .map(|l| {
                    let cost = l.cost();
                    LayerCost {
                        index: l.name.into(),
                        kind: "stem".into(),
                        h: l.out_res,
                        w: l.out_res,
                        c: l.cout,
                        relus: l.relus(),
                        flops: cost.flops(),
                        params: cost.params,
                    }
                })
                .collect();
            Ok((rows, [(56, plan.channels), (28, plan.channels)]))
        }
    }
}

// ---------------------------------------------------------------------------
// per-edge FLOPs

/// Cost of one cell edge reading a `(hs, cs)` tensor into a node of `dims`.
fn edge_cost(op: OpKind, hs: u64, cs: u64, dims: CellDims) -> OpCost {
    let (h, w, c) = (dims.h, dims.w, dims.c);
    match op {
        OpKind::Zero => OpCost::default(),
        OpKind::Conv3x3 | OpKind::Conv5x5 | OpKind::DilConv3x3 | OpKind::DilConv5x5 => {
            conv_cost(op.kernel().unwrap() as u64, cs, c, h, w)
        }
        OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
            let k = op.kernel().unwrap() as u64;
            separable_cost(k, cs, c, h, w) + separable_cost(k, c, c, h, w)
        }
        OpKind::SepDilConv3x3 | OpKind::SepDilConv5x5 => separable_cost(op.kernel().unwrap() as u64, cs, c, h, w),
        OpKind::Identity | OpKind::AvgPool3x3 | OpKind::MaxPool3x3 => {
            if hs == h && cs == c {
                OpCost::default()
            } else {
                // resolution or width mismatch: 1x1 projection
                conv_cost(1, cs, c, h, w)
            }
        }
    }
}

fn node_source(node: usize, inputs: [(u64, u64); 2], dims: CellDims) -> (u64, u64) {
    if node < 2 {
        inputs[node]
    } else {
        (dims.h, dims.c)
    }
}

/// Linear (FLOP/param) cost of a ReLU-free cell, including its 1x1 output projection.
fn sphynx_cell_cost(cell: &CellSpec, inputs: [(u64, u64); 2], dims: CellDims) -> OpCost {
    let edges: OpCost = cell
        .edges
        .iter()
        .map(|e| {
            let (hs, cs) = node_source(e.src, inputs, dims);
            edge_cost(e.op, hs, cs, dims)
        })
        .sum();
    let concat = cell.intermediate_count() as u64 * dims.c;
    edges + conv_cost(1, concat, dims.c, dims.h, dims.w)
}

/// Linear cost of a legacy cell, including its two 1x1 input pre-processing convs.
fn legacy_cell_cost(cell: &CellSpec, inputs: [(u64, u64); 2], dims: CellDims) -> OpCost {
    let pre: OpCost = inputs.iter().map(|&(_, cs)| conv_cost(1, cs, dims.c, dims.h, dims.w)).sum();
    let processed = [(dims.h, dims.c); 2];
    let edges: OpCost = cell
        .edges
        .iter()
        .map(|e| {
            let (hs, cs) = node_source(e.src, processed, dims);
            edge_cost(e.op, hs, cs, dims)
        })
        .sum();
    pre + edges
}

// ---------------------------------------------------------------------------
// counting

fn require_space(genotype: &Genotype, expected: SpaceTag) -> Result<()> {
    if genotype.space != expected {
        return Err(Error::SpaceMismatch { expected: expected.to_string(), found: genotype.space.to_string() });
    }
    Ok(())
}

/// Ledger for ReLU-free cells, shared by both balancing rules: each cell's
/// single post-processing ReLU layer costs `H_i * W_i * C_i`.
fn count_post_processed(plan: &NetworkPlan) -> Result<CostLedger> {
    plan.validate()?;
    let (mut rows, mut inputs) = stem_rows(plan)?;
    let intermediates = plan.genotype.normal.intermediate_count() as u64;
    for (i, dims) in plan.cell_dims().into_iter().enumerate() {
        let kind = if plan.is_reduce(i) { CellKind::Reduce } else { CellKind::Normal };
        let cell = plan.genotype.cell(kind);
        let cost = sphynx_cell_cost(cell, inputs, dims);
        rows.push(LayerCost {
            index: i.to_string(),
            kind: if kind == CellKind::Reduce { "reduce" } else { "normal" }.into(),
            h: dims.h,
            w: dims.w,
            c: dims.c,
            relus: dims.volume(),
            flops: cost.flops(),
            params: cost.params,
        });
        debug_assert!(intermediates >= 1);
        inputs = [inputs[1], (dims.h, dims.c)];
    }
    let head = linear_cost(inputs[1].1, plan.num_classes);
    Ok(CostLedger::from_rows(rows, head, 0))
}

/// ReLU-balanced count: `stem + H0 * W0 * C * D`, independent of placement.
pub fn count_sphynx(plan: &NetworkPlan) -> Result<CostLedger> {
    if plan.balancing != Balancing::Relu {
        return Err(Error::InvalidPlan("count_sphynx needs balancing = relu".into()));
    }
    count_post_processed(plan)
}

/// FLOP-balanced count: channels double at each reduce, so the total depends on placement.
pub fn count_flop_balanced(plan: &NetworkPlan) -> Result<CostLedger> {
    if plan.balancing != Balancing::Flop {
        return Err(Error::InvalidPlan("count_flop_balanced needs balancing = flop".into()));
    }
    count_post_processed(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LegacyOptions {
    /// Apply ReLU sharing inside each cell before counting.
    pub share_relus: bool,
    /// Count two ReLU layers for non-dilated separable convs (the stacked
    /// ReLU-SepConv-BN pair some implementations use).
    pub double_separable: bool,
}

/// ReLUs of one legacy cell at `dims`: conv modules, then pre-processing.
/// Returns `(relus, maxpool_units)`.
pub fn legacy_cell_relus(cell: &CellSpec, dims: CellDims, opts: LegacyOptions) -> (u64, u64) {
    let map = dims.volume();
    let mut relus = 0;
    let mut pools = 0;
    for e in &cell.edges {
        if e.op.is_conv() {
            let stacked = opts.double_separable && matches!(e.op, OpKind::SepConv3x3 | OpKind::SepConv5x5);
            relus += if stacked { 2 * map } else { map };
        } else if e.op == OpKind::MaxPool3x3 {
            pools += map;
        }
    }
    if opts.share_relus {
        let (_, saved) = cellgraph::relu_sharing_pass(cell, dims);
        relus -= saved;
    }
    relus += 2 * 4 * map;
    (relus, pools)
}

/// Legacy micro-search ledger. Cell dims follow `plan.balancing`.
pub fn count_legacy(plan: &NetworkPlan, genotype: &Genotype, opts: LegacyOptions) -> Result<CostLedger> {
    require_space(genotype, SpaceTag::Legacy)?;
    plan.validate()?;
    let (mut rows, mut inputs) = stem_rows(plan)?;
    let mut maxpool_units = 0;
    let concat = genotype.normal.intermediate_count() as u64;
    for (i, dims) in plan.cell_dims().into_iter().enumerate() {
        let kind = if plan.is_reduce(i) { CellKind::Reduce } else { CellKind::Normal };
        let cell = genotype.cell(kind);
        let (relus, pools) = legacy_cell_relus(cell, dims, opts);
        maxpool_units += pools;
        let cost = legacy_cell_cost(cell, inputs, dims);
        rows.push(LayerCost {
            index: i.to_string(),
            kind: if kind == CellKind::Reduce { "reduce" } else { "normal" }.into(),
            h: dims.h,
            w: dims.w,
            c: dims.c,
            relus,
            flops: cost.flops(),
            params: cost.params,
        });
        inputs = [inputs[1], (dims.h, concat * dims.c)];
    }
    let head = linear_cost(inputs[1].1, plan.num_classes);
    Ok(CostLedger::from_rows(rows, head, maxpool_units))
}

/// Full ledger for a plan, dispatching on the genotype's space and the
/// plan's balancing rule.
pub fn count_flops_params(plan: &NetworkPlan) -> Result<CostLedger> {
    match (plan.genotype.space, plan.balancing) {
        (SpaceTag::Legacy, _) => count_legacy(plan, &plan.genotype, LegacyOptions::default()),
        (SpaceTag::Sphynx, Balancing::Relu) => count_sphynx(plan),
        (SpaceTag::Sphynx, Balancing::Flop) => count_flop_balanced(plan),
    }
}

// ---------------------------------------------------------------------------
// budget planning

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetCandidate {
    pub channels: u64,
    pub depth: u64,
    pub relus: u64,
}

impl BudgetCandidate {
    pub fn deviation(&self, budget: u64) -> u64 {
        self.relus.abs_diff(budget)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetQuery {
    pub budget: u64,
    pub h0: u64,
    pub w0: u64,
    pub channels: std::ops::RangeInclusive<u64>,
    pub depths: std::ops::RangeInclusive<u64>,
    pub tol_fraction: f64,
}

/// Every `(C, D)` whose ReLU-balanced total `H0 * W0 * C * D` lies within
/// `tol_fraction * budget` of the budget, sorted by deviation then `C`.
pub fn plan_budget(query: &BudgetQuery, exec: Exec) -> Result<Vec<BudgetCandidate>> {
    if query.budget == 0 {
        return Err(Error::InvalidArgument("budget must be positive".into()));
    }
    if query.channels.is_empty() || query.depths.is_empty() {
        return Err(Error::InvalidArgument("channel and depth ranges must be nonempty".into()));
    }
    if query.tol_fraction.is_nan() || query.tol_fraction < 0.0 {
        return Err(Error::InvalidArgument("tolerance must be nonnegative".into()));
    }
    let slack = query.tol_fraction * query.budget as f64;
    let per_unit = query.h0 * query.w0;
    let channels: Vec<u64> = query.channels.clone().collect();
    let rows = exec.map_slice(&channels, |&c| {
        query
            .depths
            .clone()
            .map(|d| BudgetCandidate { channels: c, depth: d, relus: per_unit * c * d })
            .filter(|cand| cand.deviation(query.budget) as f64 <= slack)
            .collect::<Vec<_>>()
    });
    let mut out: Vec<BudgetCandidate> = rows.into_iter().flatten().collect();
    out.sort_by_key(|c| (c.deviation(query.budget), c.channels, c.depth));
    Ok(out)
}

pub fn budget_csv(rows: &[BudgetCandidate]) -> String {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["C", "D", "relus"]).expect("csv header");
    for r in rows {
        wtr.write_record([r.channels.to_string(), r.depth.to_string(), r.relus.to_string()]).expect("csv row");
    }
    String::from_utf8(wtr.into_inner().expect("flush")).expect("utf8")
}

// ---------------------------------------------------------------------------
// generic layered (chain) networks

/// One layer of a chain network such as VGG or ResNet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase", deny_unknown_fields)]
pub enum ChainLayer {
    Conv {
        kernel: u64,
        #[serde(default = "one")]
        stride: u64,
        out: u64,
        #[serde(default)]
        relu: bool,
    },
    Maxpool {
        #[serde(default = "two")]
        stride: u64,
    },
    Avgpool {
        #[serde(default = "two")]
        stride: u64,
    },
    /// Global average pool to `1 x 1`.
    Gap,
    Linear {
        out: u64,
        #[serde(default)]
        relu: bool,
    },
    /// Remembers the current tensor as a residual source.
    Mark,
    /// 1x1 projection of the marked tensor to the current shape (off the main path).
    Project,
    /// Standalone ReLU on the current tensor (e.g. after a residual add).
    Relu,
}

fn one() -> u64 {
    1
}
fn two() -> u64 {
    2
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainNetwork {
    pub name: String,
    /// `[H, W, C]` of the input image.
    pub input: [u64; 3],
    pub layers: Vec<ChainLayer>,
}

impl ChainNetwork {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Per-layer ReLU and FLOP tally for a chain network; max-pools go to
/// `maxpool_units`.
pub fn count_chain(net: &ChainNetwork) -> Result<CostLedger> {
    let [mut h, mut w, mut c] = net.input;
    let mut mark = (h, w, c);
    let mut rows = Vec::new();
    let mut pools = 0;
    for (i, layer) in net.layers.iter().enumerate() {
        let (relus, cost) = match *layer {
            ChainLayer::Conv { kernel, stride, out, relu } => {
                if stride == 0 {
                    return Err(Error::InvalidArgument(format!("layer {i}: zero stride")));
                }
                h = h.div_ceil(stride);
                w = w.div_ceil(stride);
                let cost = conv_cost(kernel, c, out, h, w);
                c = out;
                (if relu { h * w * c } else { 0 }, cost)
            }
            ChainLayer::Maxpool { stride } => {
                h = h.div_ceil(stride.max(1));
                w = w.div_ceil(stride.max(1));
                pools += h * w * c;
                (0, OpCost::default())
            }
            ChainLayer::Avgpool { stride } => {
                h = h.div_ceil(stride.max(1));
                w = w.div_ceil(stride.max(1));
                (0, OpCost::default())
            }
            ChainLayer::Gap => {
                h = 1;
                w = 1;
                (0, OpCost::default())
            }
            ChainLayer::Linear { out, relu } => {
                let cost = linear_cost(h * w * c, out);
                h = 1;
                w = 1;
                c = out;
                (if relu { c } else { 0 }, cost)
            }
            ChainLayer::Mark => {
                mark = (h, w, c);
                (0, OpCost::default())
            }
            ChainLayer::Project => {
                if mark.2 == c && mark.0 == h {
                    (0, OpCost::default())
                } else {
                    (0, conv_cost(1, mark.2, c, h, w))
                }
            }
            ChainLayer::Relu => (h * w * c, OpCost::default()),
        };
        rows.push(LayerCost {
            index: i.to_string(),
            kind: "normal".into(),
            h,
            w,
            c,
            relus,
            flops: cost.flops(),
            params: cost.params,
        });
    }
    Ok(CostLedger::from_rows(rows, OpCost::default(), pools))
}

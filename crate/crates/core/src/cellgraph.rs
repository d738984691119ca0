//! Normal/reduce cell DAGs.
//!
//! A cell has `N` nodes: inputs `0` and `1` (outputs of the two previous
//! cells), intermediates `2..=N-2`, and an implicit output node `N-1` that
//! concatenates every intermediate. Only edges into intermediates are stored.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default node count of a cell (two inputs, four intermediates, one output).
pub const DEFAULT_NODE_COUNT: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "conv3x3")]
    Conv3x3,
    #[serde(rename = "conv5x5")]
    Conv5x5,
    #[serde(rename = "dilconv3x3")]
    DilConv3x3,
    #[serde(rename = "dilconv5x5")]
    DilConv5x5,
    #[serde(rename = "avgpool3x3")]
    AvgPool3x3,
    #[serde(rename = "identity")]
    Identity,
    #[serde(rename = "zero")]
    Zero,
    #[serde(rename = "maxpool3x3")]
    MaxPool3x3,
    #[serde(rename = "sepconv3x3")]
    SepConv3x3,
    #[serde(rename = "sepconv5x5")]
    SepConv5x5,
    #[serde(rename = "sepdilconv3x3")]
    SepDilConv3x3,
    #[serde(rename = "sepdilconv5x5")]
    SepDilConv5x5,
}

impl OpKind {
    pub const ALL: [OpKind; 12] = [
        OpKind::Conv3x3,
        OpKind::Conv5x5,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
        OpKind::AvgPool3x3,
        OpKind::Identity,
        OpKind::Zero,
        OpKind::MaxPool3x3,
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::SepDilConv3x3,
        OpKind::SepDilConv5x5,
    ];

    /// Operations of the ReLU-free search space (zero only during search).
    pub const SPHYNX: [OpKind; 7] = [
        OpKind::Conv3x3,
        OpKind::Conv5x5,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
        OpKind::AvgPool3x3,
        OpKind::Identity,
        OpKind::Zero,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv3x3 => "conv3x3",
            OpKind::Conv5x5 => "conv5x5",
            OpKind::DilConv3x3 => "dilconv3x3",
            OpKind::DilConv5x5 => "dilconv5x5",
            OpKind::AvgPool3x3 => "avgpool3x3",
            OpKind::Identity => "identity",
            OpKind::Zero => "zero",
            OpKind::MaxPool3x3 => "maxpool3x3",
            OpKind::SepConv3x3 => "sepconv3x3",
            OpKind::SepConv5x5 => "sepconv5x5",
            OpKind::SepDilConv3x3 => "sepdilconv3x3",
            OpKind::SepDilConv5x5 => "sepdilconv5x5",
        }
    }

    pub fn allowed_in_sphynx(self) -> bool {
        Self::SPHYNX.contains(&self)
    }

    /// Whether the op is a convolution module (carries a ReLU in legacy cells).
    pub fn is_conv(self) -> bool {
        matches!(
            self,
            OpKind::Conv3x3
                | OpKind::Conv5x5
                | OpKind::DilConv3x3
                | OpKind::DilConv5x5
                | OpKind::SepConv3x3
                | OpKind::SepConv5x5
                | OpKind::SepDilConv3x3
                | OpKind::SepDilConv5x5
        )
    }

    pub fn is_separable(self) -> bool {
        matches!(self, OpKind::SepConv3x3 | OpKind::SepConv5x5 | OpKind::SepDilConv3x3 | OpKind::SepDilConv5x5)
    }

    /// Spatial kernel size, if the op has one.
    pub fn kernel(self) -> Option<usize> {
        match self {
            OpKind::Conv3x3
            | OpKind::DilConv3x3
            | OpKind::AvgPool3x3
            | OpKind::MaxPool3x3
            | OpKind::SepConv3x3
            | OpKind::SepDilConv3x3 => Some(3),
            OpKind::Conv5x5 | OpKind::DilConv5x5 | OpKind::SepConv5x5 | OpKind::SepDilConv5x5 => Some(5),
            OpKind::Identity | OpKind::Zero => None,
        }
    }

    /// The op used in its place when a legacy cell is moved to the ReLU-free space.
    pub fn to_sphynx(self) -> OpKind {
        match self {
            OpKind::SepConv3x3 => OpKind::Conv3x3,
            OpKind::SepConv5x5 => OpKind::Conv5x5,
            OpKind::SepDilConv3x3 => OpKind::DilConv3x3,
            OpKind::SepDilConv5x5 => OpKind::DilConv5x5,
            OpKind::MaxPool3x3 => OpKind::AvgPool3x3,
            other => other,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::InvalidGenotype(format!("unknown op '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub op: OpKind,
}

impl Edge {
    pub fn new(src: usize, dst: usize, op: OpKind) -> Self {
        Self { src, dst, op }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellSpec {
    pub node_count: usize,
    pub edges: Vec<Edge>,
}

impl CellSpec {
    pub fn new(node_count: usize, edges: Vec<Edge>) -> Self {
        Self { node_count, edges }
    }

    pub fn output_node(&self) -> usize {
        self.node_count - 1
    }

    /// Intermediate node indices `2..=N-2`.
    pub fn intermediates(&self) -> std::ops::RangeInclusive<usize> {
        2..=self.node_count.saturating_sub(2)
    }

    pub fn intermediate_count(&self) -> usize {
        self.node_count.saturating_sub(3)
    }

    /// Multiset of ops on the edges, used to check that passes keep functionality.
    pub fn op_multiset(&self) -> BTreeMap<OpKind, usize> {
        let mut m = BTreeMap::new();
        for e in &self.edges {
            *m.entry(e.op).or_insert(0) += 1;
        }
        m
    }

    pub fn topology(&self) -> BTreeSet<(usize, usize)> {
        self.edges.iter().map(|e| (e.src, e.dst)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceTag {
    Sphynx,
    Legacy,
}

impl fmt::Display for SpaceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpaceTag::Sphynx => "sphynx",
            SpaceTag::Legacy => "legacy",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Genotype {
    pub normal: CellSpec,
    pub reduce: CellSpec,
    pub space: SpaceTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Normal,
    Reduce,
}

impl Genotype {
    pub fn node_count(&self) -> usize {
        self.normal.node_count
    }

    pub fn cell(&self, kind: CellKind) -> &CellSpec {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduce => &self.reduce,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GenotypeFile = serde_json::from_str(text)?;
        Ok(file.into())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&GenotypeFile::from(self)).expect("genotype serializes")
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk shape: `{"n": 7, "normal": [[op, src, dst], ...], "reduce": [...], "space": "sphynx"}`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenotypeFile {
    n: usize,
    normal: Vec<(OpKind, usize, usize)>,
    reduce: Vec<(OpKind, usize, usize)>,
    space: SpaceTag,
}

impl From<GenotypeFile> for Genotype {
    fn from(f: GenotypeFile) -> Self {
        let cell = |edges: Vec<(OpKind, usize, usize)>| {
            CellSpec::new(f.n, edges.into_iter().map(|(op, s, d)| Edge::new(s, d, op)).collect())
        };
        Genotype { normal: cell(f.normal), reduce: cell(f.reduce), space: f.space }
    }
}

impl From<&Genotype> for GenotypeFile {
    fn from(g: &Genotype) -> Self {
        let edges = |c: &CellSpec| c.edges.iter().map(|e| (e.op, e.src, e.dst)).collect();
        GenotypeFile { n: g.normal.node_count, normal: edges(&g.normal), reduce: edges(&g.reduce), space: g.space }
    }
}

// ---------------------------------------------------------------------------
// validation

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// "normal", "reduce", or "genotype" for cross-cell rules.
    pub cell: String,
    pub edge: Option<usize>,
    pub rule: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn has_rule(&self, rule: &str) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }
}

pub mod rules {
    pub const NODE_COUNT: &str = "node count";
    pub const NODE_COUNT_MISMATCH: &str = "node count mismatch";
    pub const ACYCLICITY: &str = "acyclicity";
    pub const EDGE_TARGET: &str = "edge target";
    pub const EDGE_SOURCE: &str = "edge source";
    pub const IN_DEGREE: &str = "in-degree";
    pub const ZERO_OP: &str = "zero op in final genotype";
    pub const FORBIDDEN_SPHYNX: &str = "forbidden op in sphynx space";
    pub const DUPLICATE_EDGE: &str = "duplicate edge";
}

fn validate_cell(name: &str, cell: &CellSpec, space: SpaceTag, out: &mut Vec<Violation>) {
    let mut push = |edge: Option<usize>, rule: &str, message: String| {
        out.push(Violation { cell: name.to_string(), edge, rule: rule.to_string(), message });
    };
    let n = cell.node_count;
    if n < 4 {
        push(None, rules::NODE_COUNT, format!("node count {n} is below the minimum of 4"));
        return;
    }
    let mut indegree = vec![0usize; n];
    let mut seen = BTreeSet::new();
    for (i, e) in cell.edges.iter().enumerate() {
        if e.src >= e.dst {
            push(Some(i), rules::ACYCLICITY, format!("edge {i} ({} -> {}) does not go forward", e.src, e.dst));
        }
        if e.dst < 2 || e.dst > n - 2 {
            push(Some(i), rules::EDGE_TARGET, format!("edge {i} targets node {} which is not intermediate", e.dst));
        } else {
            indegree[e.dst] += 1;
        }
        if e.src > n - 2 {
            push(
                Some(i),
                rules::EDGE_SOURCE,
                format!("edge {i} leaves node {} which is the output or out of range", e.src),
            );
        }
        if !seen.insert((e.src, e.dst)) {
            push(Some(i), rules::DUPLICATE_EDGE, format!("edge {i} repeats ({} -> {})", e.src, e.dst));
        }
        if e.op == OpKind::Zero {
            push(Some(i), rules::ZERO_OP, format!("edge {i} uses the zero op"));
        } else if space == SpaceTag::Sphynx && !e.op.allowed_in_sphynx() {
            push(Some(i), rules::FORBIDDEN_SPHYNX, format!("edge {i} uses {} which is not in the sphynx op set", e.op));
        }
    }
    for (node, &deg) in indegree.iter().enumerate().take(n - 1).skip(2) {
        if deg != 2 {
            push(None, rules::IN_DEGREE, format!("node {node} has {deg} incoming edges, expected 2"));
        }
    }
}

/// Checks every structural and op-set rule for the genotype's claimed space.
/// Violations are returned as data.
pub fn validate(genotype: &Genotype) -> ValidationReport {
    let mut violations = Vec::new();
    if genotype.normal.node_count != genotype.reduce.node_count {
        violations.push(Violation {
            cell: "genotype".into(),
            edge: None,
            rule: rules::NODE_COUNT_MISMATCH.into(),
            message: format!(
                "normal has {} nodes, reduce has {}",
                genotype.normal.node_count, genotype.reduce.node_count
            ),
        });
    }
    validate_cell("normal", &genotype.normal, genotype.space, &mut violations);
    validate_cell("reduce", &genotype.reduce, genotype.space, &mut violations);
    ValidationReport { ok: violations.is_empty(), violations }
}

pub fn ensure_valid(genotype: &Genotype) -> Result<()> {
    let report = validate(genotype);
    if report.ok {
        Ok(())
    } else {
        let msgs: Vec<_> = report.violations.iter().map(|v| format!("{}: {}", v.cell, v.message)).collect();
        Err(Error::InvalidGenotype(msgs.join("; ")))
    }
}

// ---------------------------------------------------------------------------
// legacy conversion

/// Moves a legacy genotype into the ReLU-free space: separable convs become
/// vanilla convs, max-pools become average pools, and the space tag switches
/// (which implies Conv-BN modules and a single cell-end nonlinearity).
/// Topology is unchanged. Already-converted genotypes pass through.
pub fn convert_legacy(genotype: &Genotype) -> Result<Genotype> {
    ensure_valid(genotype)?;
    let convert = |cell: &CellSpec| CellSpec {
        node_count: cell.node_count,
        edges: cell.edges.iter().map(|e| Edge::new(e.src, e.dst, e.op.to_sphynx())).collect(),
    };
    Ok(Genotype { normal: convert(&genotype.normal), reduce: convert(&genotype.reduce), space: SpaceTag::Sphynx })
}

// ---------------------------------------------------------------------------
// ReLU sharing

/// Spatial/channel extent shared by all nodes of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellDims {
    pub h: u64,
    pub w: u64,
    pub c: u64,
}

impl CellDims {
    pub fn new(h: u64, w: u64, c: u64) -> Self {
        Self { h, w, c }
    }

    pub fn volume(&self) -> u64 {
        self.h * self.w * self.c
    }
}

/// A node whose ReLU is computed once and fed to several convolution modules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SharedRelu {
    pub node: usize,
    /// Indices (into `CellSpec::edges`) of the conv edges reading the shared map.
    pub consumers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedCell {
    pub cell: CellSpec,
    pub shared: Vec<SharedRelu>,
}

impl SharedCell {
    /// Number of ReLU layers the cell's convolution modules evaluate after sharing.
    pub fn relu_layers(&self) -> usize {
        let conv_edges = self.cell.edges.iter().filter(|e| e.op.is_conv()).count();
        let saved: usize = self.shared.iter().map(|s| s.consumers.len() - 1).sum();
        conv_edges - saved
    }
}

/// Records one shared ReLU for every node feeding two or more convolution
/// modules. Returns the annotated cell and the number of ReLUs saved, which is
/// `sum((k - 1) * H * W * C)` over nodes with fan-out `k`.
pub fn relu_sharing_pass(cell: &CellSpec, dims: CellDims) -> (SharedCell, u64) {
    let mut by_node: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in cell.edges.iter().enumerate() {
        if e.op.is_conv() {
            by_node.entry(e.src).or_default().push(i);
        }
    }
    let shared: Vec<SharedRelu> = by_node
        .into_iter()
        .filter(|(_, consumers)| consumers.len() >= 2)
        .map(|(node, consumers)| SharedRelu { node, consumers })
        .collect();
    let saved = shared.iter().map(|s| (s.consumers.len() as u64 - 1) * dims.volume()).sum();
    (SharedCell { cell: cell.clone(), shared }, saved)
}

// ---------------------------------------------------------------------------
// DOT export

fn write_cell_dot(out: &mut String, name: &str, cell: &CellSpec) {
    let n = cell.node_count;
    let _ = writeln!(out, "  subgraph cluster_{name} {{");
    let _ = writeln!(out, "    label=\"{name}\";");
    for node in 0..n {
        let shape = if node < 2 || node == n - 1 { "box" } else { "ellipse" };
        let _ = writeln!(out, "    {name}_N{node} [label=\"N{node}\", shape={shape}];");
    }
    for e in &cell.edges {
        let _ = writeln!(out, "    {name}_N{} -> {name}_N{} [label=\"{}\"];", e.src, e.dst, e.op);
    }
    for node in cell.intermediates() {
        let _ = writeln!(out, "    {name}_N{node} -> {name}_N{} [style=dashed];", n - 1);
    }
    let _ = writeln!(out, "  }}");
}

/// Single-cell DOT digraph.
pub fn cell_to_dot(name: &str, cell: &CellSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "digraph {name} {{");
    let _ = writeln!(out, "  rankdir=LR;");
    write_cell_dot(&mut out, name, cell);
    out.push_str("}\n");
    out
}

/// Deterministic DOT text for both cells. Op edges carry labels; the implicit
/// concatenation into the output node is drawn dashed and unlabeled.
pub fn to_dot(genotype: &Genotype) -> Result<String> {
    ensure_valid(genotype)?;
    let mut out = String::new();
    let _ = writeln!(out, "digraph genotype {{");
    let _ = writeln!(out, "  rankdir=LR;");
    let _ = writeln!(out, "  label=\"space={}\";", genotype.space);
    write_cell_dot(&mut out, "normal", &genotype.normal);
    write_cell_dot(&mut out, "reduce", &genotype.reduce);
    out.push_str("}\n");
    Ok(out)
}

// ---------------------------------------------------------------------------
// fixtures

/// Reference seven-node genotype in the ReLU-free space, shipped for tests and
/// as the CLI default.
pub fn reference_sphynx_genotype() -> Genotype {
    use OpKind::*;
    let normal = vec![
        Edge::new(0, 2, Conv3x3),
        Edge::new(1, 2, Identity),
        Edge::new(0, 3, Conv5x5),
        Edge::new(2, 3, DilConv3x3),
        Edge::new(1, 4, AvgPool3x3),
        Edge::new(3, 4, Conv3x3),
        Edge::new(2, 5, Identity),
        Edge::new(4, 5, Conv5x5),
    ];
    let reduce = vec![
        Edge::new(0, 2, Conv5x5),
        Edge::new(1, 2, AvgPool3x3),
        Edge::new(1, 3, Conv3x3),
        Edge::new(2, 3, DilConv5x5),
        Edge::new(0, 4, Conv3x3),
        Edge::new(3, 4, Identity),
        Edge::new(2, 5, Conv3x3),
        Edge::new(4, 5, AvgPool3x3),
    ];
    Genotype { normal: CellSpec::new(7, normal), reduce: CellSpec::new(7, reduce), space: SpaceTag::Sphynx }
}

/// The publicly released DARTS (second-order) cells, in the legacy space.
pub fn darts_v2_genotype() -> Genotype {
    use OpKind::*;
    let normal = vec![
        Edge::new(0, 2, SepConv3x3),
        Edge::new(1, 2, SepConv3x3),
        Edge::new(0, 3, SepConv3x3),
        Edge::new(1, 3, SepConv3x3),
        Edge::new(1, 4, SepConv3x3),
        Edge::new(0, 4, Identity),
        Edge::new(0, 5, Identity),
        Edge::new(2, 5, SepDilConv3x3),
    ];
    let reduce = vec![
        Edge::new(0, 2, MaxPool3x3),
        Edge::new(1, 2, MaxPool3x3),
        Edge::new(2, 3, Identity),
        Edge::new(1, 3, MaxPool3x3),
        Edge::new(0, 4, MaxPool3x3),
        Edge::new(2, 4, Identity),
        Edge::new(2, 5, Identity),
        Edge::new(1, 5, MaxPool3x3),
    ];
    Genotype { normal: CellSpec::new(7, normal), reduce: CellSpec::new(7, reduce), space: SpaceTag::Legacy }
}

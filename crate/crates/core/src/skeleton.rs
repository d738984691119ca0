//! Concrete stage lists for a plan, and reduce-cell placement enumeration.

use serde::Serialize;

use crate::accounting::{imagenet_stem_layers, Balancing, NetworkPlan, Stem, StemLayer};
use crate::cellgraph::CellKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum Stage {
    Stem {
        name: String,
        h_in: u64,
        w_in: u64,
        h: u64,
        w: u64,
        c_in: u64,
        c_out: u64,
        relus: u64,
    },
    Cell {
        kind: CellKind,
        index: usize,
        h_in: u64,
        w_in: u64,
        h: u64,
        w: u64,
        c_in: u64,
        c_out: u64,
        /// Stage indices of the two inputs (previous-previous, previous).
        inputs: [usize; 2],
        relus: u64,
    },
    Post {
        c_in: u64,
        classes: u64,
    },
}

impl Stage {
    pub fn relus(&self) -> u64 {
        match self {
            Stage::Stem { relus, .. } | Stage::Cell { relus, .. } => *relus,
            Stage::Post { .. } => 0,
        }
    }

    /// `(h, w, c)` produced by the stage.
    pub fn output_dims(&self) -> (u64, u64, u64) {
        match self {
            Stage::Stem { h, w, c_out, .. } | Stage::Cell { h, w, c_out, .. } => (*h, *w, *c_out),
            Stage::Post { classes, .. } => (1, 1, *classes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Skeleton {
    pub stages: Vec<Stage>,
    /// Normal-cell run lengths before, between and after the reduce cells.
    pub segments: [usize; 3],
}

impl Skeleton {
    pub fn total_relus(&self) -> u64 {
        self.stages.iter().map(Stage::relus).sum()
    }

    pub fn cells(&self) -> impl Iterator<Item = &Stage> {
        self.stages.iter().filter(|s| matches!(s, Stage::Cell { .. }))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("skeleton serializes")
    }
}

/// Stem stages for 224x224 inputs: Conv-BN to `C/2`, then two ReLU-Conv-BN
/// layers, each halving the resolution down to 28x28.
pub fn imagenet_stem(channels: u64) -> Result<Vec<Stage>> {
    Ok(imagenet_stem_layers(channels)?.iter().map(stem_stage).collect())
}

fn stem_stage(l: &StemLayer) -> Stage {
    Stage::Stem {
        name: l.name.to_string(),
        h_in: l.in_res,
        w_in: l.in_res,
        h: l.out_res,
        w: l.out_res,
        c_in: l.cin,
        c_out: l.cout,
        relus: l.relus(),
    }
}

/// Lays out stems, `D` cells with reduce cells at the plan's placement, and
/// the pooling/classifier head. Dims are chained stage by stage.
pub fn build_skeleton(plan: &NetworkPlan) -> Result<Skeleton> {
    plan.validate()?;
    let mut stages = match plan.stem {
        Stem::Direct => vec![Stage::Stem {
            name: "stem".into(),
            h_in: plan.h0,
            w_in: plan.w0,
            h: plan.h0,
            w: plan.w0,
            c_in: 3,
            c_out: plan.channels,
            relus: 0,
        }],
        Stem::Imagenet3 => imagenet_stem(plan.channels)?,
    };
    // direct stem feeds both inputs of cell 0; the imagenet stem feeds its last two layers
    let last = stages.len() - 1;
    let mut prev_prev = if plan.stem == Stem::Imagenet3 { last - 1 } else { last };
    let mut prev = last;
    let factor = match plan.balancing {
        Balancing::Relu => 4,
        Balancing::Flop => 2,
    };
    for index in 0..plan.depth {
        let (h_in, w_in, c_in) = stages[prev].output_dims();
        let (kind, h, w, c_out) = if plan.is_reduce(index) {
            (CellKind::Reduce, h_in / 2, w_in / 2, c_in * factor)
        } else {
            (CellKind::Normal, h_in, w_in, c_in)
        };
        stages.push(Stage::Cell {
            kind,
            index,
            h_in,
            w_in,
            h,
            w,
            c_in,
            c_out,
            inputs: [prev_prev, prev],
            relus: h * w * c_out,
        });
        prev_prev = prev;
        prev = stages.len() - 1;
    }
    let (_, _, c_last) = stages[prev].output_dims();
    stages.push(Stage::Post { c_in: c_last, classes: plan.num_classes });
    let (a, b) = plan.placement;
    Ok(Skeleton { stages, segments: [a, b - a - 1, plan.depth - b - 1] })
}

/// Every unordered pair `(i, j)`, `0 <= i < j < D`, in lexicographic order.
pub fn enumerate_placements(depth: usize) -> Result<Vec<(usize, usize)>> {
    if depth < 2 {
        return Err(Error::InvalidArgument(format!("depth {depth} is below 2")));
    }
    Ok((0..depth).flat_map(|i| (i + 1..depth).map(move |j| (i, j))).collect())
}

/// Placements whose second index stays below `D - 1` (the last cell is never
/// a reduce cell); `C(D-1, 2)` candidates.
pub fn enumerate_placements_excluding_last(depth: usize) -> Result<Vec<(usize, usize)>> {
    Ok(enumerate_placements(depth)?.into_iter().filter(|&(_, j)| j + 1 < depth).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accounting::count_sphynx;

    #[test]
    fn segments_follow_placement() {
        let s = build_skeleton(&NetworkPlan::new(32, 32, 5, 8, (1, 3))).unwrap();
        assert_eq!(s.segments, [1, 1, 4]);
        let s = build_skeleton(&NetworkPlan::new(32, 32, 5, 5, (0, 1))).unwrap();
        assert_eq!(s.segments, [0, 0, 3]);
    }

    #[test]
    fn placement_out_of_range() {
        assert!(build_skeleton(&NetworkPlan::new(32, 32, 5, 3, (0, 5))).is_err());
    }

    #[test]
    fn placements_small_depths() {
        let p = enumerate_placements(5).unwrap();
        assert_eq!(p.len(), 10);
        assert_eq!(&p[..2], &[(0, 1), (0, 2)]);
        assert_eq!(enumerate_placements(8).unwrap().len(), 28);
        assert_eq!(enumerate_placements(2).unwrap(), vec![(0, 1)]);
        assert!(enumerate_placements(1).is_err());
        assert_eq!(enumerate_placements_excluding_last(5).unwrap().len(), 6);
        assert_eq!(enumerate_placements_excluding_last(8).unwrap().len(), 21);
    }

    #[test]
    fn stem_relus() {
        let total = |c| imagenet_stem(c).unwrap().iter().map(Stage::relus).sum::<u64>();
        assert_eq!(total(10), 94_080);
        assert_eq!(total(20), 188_160);
        assert!(imagenet_stem(3).is_err());
    }

    #[test]
    fn skeleton_agrees_with_ledger() {
        let p = NetworkPlan::new(28, 28, 20, 10, (1, 5)).with_stem(Stem::Imagenet3);
        let s = build_skeleton(&p).unwrap();
        assert_eq!(s.total_relus(), 344_960);
        assert_eq!(s.total_relus(), count_sphynx(&p).unwrap().relus);
    }

    #[test]
    fn wiring() {
        let s = build_skeleton(&NetworkPlan::new(32, 32, 5, 4, (1, 2))).unwrap();
        let inputs: Vec<[usize; 2]> = s
            .cells()
            .map(|c| match c {
                Stage::Cell { inputs, .. } => *inputs,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(inputs, vec![[0, 0], [0, 1], [1, 2], [2, 3]]);
    }
}

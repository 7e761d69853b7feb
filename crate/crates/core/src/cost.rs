//! Static parameter and FLOP accounting.
//!
//! FLOPs are reported under two conventions:
//!   * `flops` — 2·MACs (multiply and add counted separately), the
//!     convention most detector papers and the ultralytics profiler use;
//!   * `macs`  — raw multiply-accumulate count (`flops / 2`).
//!
//! Headline FLOPs exclude bias additions and activations; parameters
//! include biases.

use crate::blocks::ledh_groups;
use crate::error::Result;
use crate::graph::{ArchGraph, InputRef, NodeKind};
use crate::tensor::ConvSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Cost {
    pub params: u64,
    /// Factor-2 convention (2 · MACs).
    pub flops: u64,
}

impl Cost {
    pub fn macs(&self) -> u64 {
        self.flops / 2
    }

    fn accumulate(&mut self, other: Cost) {
        self.params += other.params;
        self.flops += other.flops;
    }
}

/// Cost of one convolution producing an `h`×`w` output map.
pub fn count_conv(spec: &ConvSpec, h: usize, w: usize) -> Cost {
    let weights = spec.weight_len() as u64;
    let bias = spec.bias_len() as u64;
    Cost {
        params: weights + bias,
        flops: 2 * weights * (h as u64) * (w as u64),
    }
}

/// Cost of a ghost module over an `h`×`w` output map: a dense primary conv
/// producing c2/2 maps plus a depthwise cheap-operation conv producing the
/// other c2/2. Both terms are bias-free.
pub fn count_ghost(c1: usize, c2: usize, k_m: usize, k_c: usize, h: usize, w: usize) -> Cost {
    let half = (c2 / 2) as u64;
    let primary = (c1 as u64) * half * (k_m * k_m) as u64;
    let cheap = half * (k_c * k_c) as u64;
    Cost {
        params: primary + cheap,
        flops: 2 * (primary + cheap) * (h as u64) * (w as u64),
    }
}

#[derive(Debug, Clone)]
pub struct LayerCost {
    pub id: usize,
    pub kind: &'static str,
    pub cost: Cost,
}

#[derive(Debug, Clone)]
pub struct CostReport {
    pub input_shape: (usize, usize, usize),
    pub per_layer: Vec<LayerCost>,
    pub total: Cost,
    pub notes: Vec<String>,
}

/// Walk an inferred graph and total parameters and FLOPs per layer.
///
/// All convs inside a composite block execute at the block's output
/// resolution (the only stride-carrying conv is always the first one), so
/// each node's plan is costed at its inferred output map size.
pub fn analyze(g: &ArchGraph) -> Result<CostReport> {
    let mut per_layer = Vec::with_capacity(g.nodes.len());
    let mut total = Cost::default();
    let mut notes = Vec::new();

    for node in &g.nodes {
        let (.., h, w) = node
            .out_shape
            .ok_or_else(|| crate::error::Error::Usage(format!("node {} has no inferred shape; run shape inference first", node.id)))?;
        let c_in = match node.inputs[0] {
            InputRef::Source => g.input_shape.0,
            InputRef::Node(i) => g.nodes[i].out_shape.unwrap().0,
        };
        let mut cost = Cost::default();
        for spec in crate::graph::node_plan(&node.kind, c_in)? {
            cost.accumulate(count_conv(&spec, h, w));
        }
        if let NodeKind::LedhHead { .. } = node.kind {
            let (groups, rounded) = ledh_groups(c_in, 16)?;
            if rounded {
                notes.push(format!(
                    "node {}: ledh group count rounded down to {} (largest divisor of {} not above {}/16)",
                    node.id, groups, c_in, c_in
                ));
            }
        }
        total.accumulate(cost);
        per_layer.push(LayerCost {
            id: node.id,
            kind: node.kind.name(),
            cost,
        });
    }

    Ok(CostReport {
        input_shape: g.input_shape,
        per_layer,
        total,
        notes,
    })
}

impl CostReport {
    pub fn render(&self) -> String {
        let (c, h, w) = self.input_shape;
        let mut out = format!("input {c}x{h}x{w}\n");
        out.push_str(&format!("{:>4}  {:<14} {:>12} {:>16}\n", "id", "kind", "params", "flops"));
        for l in &self.per_layer {
            out.push_str(&format!(
                "{:>4}  {:<14} {:>12} {:>16}\n",
                l.id, l.kind, l.cost.params, l.cost.flops
            ));
        }
        out.push_str(&format!(
            "total params {} ({:.3}M)\n",
            self.total.params,
            self.total.params as f64 / 1e6
        ));
        out.push_str(&format!(
            "total flops  {} ({:.3}G, 2*MACs convention; {:.3}G as MACs)\n",
            self.total.flops,
            self.total.flops as f64 / 1e9,
            self.total.macs() as f64 / 1e9
        ));
        for n in &self.notes {
            out.push_str(&format!("note: {n}\n"));
        }
        out
    }
}

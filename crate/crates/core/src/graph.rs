//! Architecture graphs: a line-oriented `.cfg` parser, static shape
//! inference and forward execution.
//!
//! Config grammar (UTF-8, `#` comments, one layer per line):
//!
//! ```text
//! [meta]
//! nc = 2
//! input = 3x640x640
//!
//! [layers]
//! 0: conv(from=input, c2=16, k=3, s=2)
//! 1: concat(from=0,0)
//! ```
//!
//! Layer ids must be sequential from 0; `from` may reference only earlier
//! ids (or the special source `input`), which makes the node list
//! topologically ordered by construction. Argument values are integer
//! literals or names of `[meta]` keys.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::blocks::{
    ghost_plan, gs_bottleneck, gs_bottleneck_plan, gs_conv, gs_conv_plan, ghost_conv,
    ledh_groups, ledh_level_forward, ledh_level_plan, plain_head_level_forward,
    plain_head_level_plan, vov_gscspc, vov_gscspc_plan, GhostSpec, HeadOutput,
};
use crate::error::{Error, Result};
use crate::tensor::{
    add, concat_channels, conv2d, maxpool, silu, ConvSpec, Tensor, WeightBlock,
};
use crate::weights::{seeded_blocks, WeightStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputRef {
    /// The graph input.
    Source,
    Node(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeKind {
    Conv {
        c2: usize,
        k: usize,
        stride: usize,
        act: bool,
    },
    GhostConv {
        c2: usize,
        k_m: usize,
        k_c: usize,
        stride: usize,
    },
    GsConv {
        c2: usize,
        stride: usize,
    },
    GsBottleneck,
    VovGscspc {
        c2: usize,
    },
    /// Cross-stage block proxy for the baseline's C3k2 modules, built from
    /// standard convs: 1x1 split, `n` residual modules at hidden width `h`,
    /// 1x1 fuse. `deep` swaps the plain residual for a two-level one.
    C3k2Proxy {
        c2: usize,
        n: usize,
        deep: bool,
        hidden: usize,
    },
    /// SPPF proxy: 1x1 squeeze, three chained 5x5 maxpools, concat, 1x1 fuse.
    SppfProxy {
        c2: usize,
        k: usize,
    },
    Upsample,
    Concat,
    LedhHead {
        nc: usize,
        r: usize,
    },
    PlainHead {
        nc: usize,
        r: usize,
        w_reg: usize,
        w_cls: usize,
    },
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Conv { .. } => "conv",
            NodeKind::GhostConv { .. } => "ghost_conv",
            NodeKind::GsConv { .. } => "gs_conv",
            NodeKind::GsBottleneck => "gs_bottleneck",
            NodeKind::VovGscspc { .. } => "vov_gscspc",
            NodeKind::C3k2Proxy { .. } => "c3k2_proxy",
            NodeKind::SppfProxy { .. } => "sppf_proxy",
            NodeKind::Upsample => "upsample",
            NodeKind::Concat => "concat",
            NodeKind::LedhHead { .. } => "ledh_head",
            NodeKind::PlainHead { .. } => "plain_head",
        }
    }

    pub fn is_head(&self) -> bool {
        matches!(self, NodeKind::LedhHead { .. } | NodeKind::PlainHead { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub id: usize,
    pub inputs: Vec<InputRef>,
    pub kind: NodeKind,
    /// (c, h, w), populated by `infer_shapes`.
    pub out_shape: Option<(usize, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchGraph {
    pub nodes: Vec<LayerNode>,
    /// (c, h, w) of the graph input.
    pub input_shape: (usize, usize, usize),
    /// Node ids of the detection-head nodes, in config order.
    pub head_levels: Vec<usize>,
}

pub const DEFAULT_INPUT_SHAPE: (usize, usize, usize) = (3, 640, 640);

/// Conv plan of the `deep` c3k2 residual module at hidden width `h`.
fn deep_module_plan(h: usize) -> Vec<ConvSpec> {
    let h2 = h / 2;
    vec![
        ConvSpec::new(h, h2, 1),
        ConvSpec::new(h2, h2, 3),
        ConvSpec::new(h2, h2, 3),
        ConvSpec::new(h2, h2, 3),
        ConvSpec::new(h2, h2, 3),
        ConvSpec::new(h, h2, 1),
        ConvSpec::new(2 * h2, h, 1),
    ]
}

/// Conv plan of one c3k2 proxy.
fn c3k2_plan(c1: usize, c2: usize, n: usize, deep: bool, hidden: usize) -> Result<Vec<ConvSpec>> {
    if hidden == 0 || (deep && hidden % 2 != 0) {
        return Err(Error::config(format!("c3k2_proxy hidden width {hidden} invalid")));
    }
    let mut plan = vec![ConvSpec::new(c1, 2 * hidden, 1)];
    for _ in 0..n {
        if deep {
            plan.extend(deep_module_plan(hidden));
        } else {
            plan.push(ConvSpec::new(hidden, hidden / 2, 3));
            plan.push(ConvSpec::new(hidden / 2, hidden, 3));
        }
    }
    plan.push(ConvSpec::new((2 + n) * hidden, c2, 1));
    Ok(plan)
}

fn sppf_plan(c1: usize, c2: usize) -> Result<Vec<ConvSpec>> {
    if c1 % 2 != 0 {
        return Err(Error::config(format!("sppf_proxy input channels {c1} must be even")));
    }
    let half = c1 / 2;
    Ok(vec![ConvSpec::new(c1, half, 1), ConvSpec::new(4 * half, c2, 1)])
}

/// Conv plan of one node given its input channel count. Kinds without
/// parameters (upsample, concat) return an empty plan.
pub fn node_plan(kind: &NodeKind, c_in: usize) -> Result<Vec<ConvSpec>> {
    match *kind {
        NodeKind::Conv { c2, k, stride, .. } => Ok(vec![ConvSpec::new(c_in, c2, k).stride(stride)]),
        NodeKind::GhostConv { c2, k_m, k_c, stride } => ghost_plan(
            &GhostSpec::new(c_in, c2).kernels(k_m, k_c).stride(stride),
        ),
        NodeKind::GsConv { c2, stride } => gs_conv_plan(c_in, c2, stride),
        NodeKind::GsBottleneck => gs_bottleneck_plan(c_in),
        NodeKind::VovGscspc { c2 } => vov_gscspc_plan(c_in, c2),
        NodeKind::C3k2Proxy { c2, n, deep, hidden } => c3k2_plan(c_in, c2, n, deep, hidden),
        NodeKind::SppfProxy { c2, .. } => sppf_plan(c_in, c2),
        NodeKind::Upsample | NodeKind::Concat => Ok(vec![]),
        NodeKind::LedhHead { nc, r } => ledh_level_plan(c_in, nc, r, 16),
        NodeKind::PlainHead { nc, r, w_reg, w_cls } => {
            plain_head_level_plan(c_in, nc, r, w_reg, w_cls)
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

fn resolve(token: &str, meta: &BTreeMap<String, usize>, line: usize) -> Result<usize> {
    if let Ok(v) = token.parse::<usize>() {
        return Ok(v);
    }
    meta.get(token)
        .copied()
        .ok_or_else(|| Error::parse(line, format!("unknown value `{token}`")))
}

pub fn parse_config(text: &str) -> Result<ArchGraph> {
    #[derive(PartialEq)]
    enum Section {
        None,
        Meta,
        Layers,
    }
    let mut section = Section::None;
    let mut meta: BTreeMap<String, usize> = BTreeMap::new();
    let mut input_shape = DEFAULT_INPUT_SHAPE;
    let mut nodes: Vec<LayerNode> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if line == "[meta]" {
            section = Section::Meta;
            continue;
        }
        if line == "[layers]" {
            section = Section::Layers;
            continue;
        }
        if line.starts_with('[') {
            return Err(Error::parse(lineno, format!("unknown section `{line}`")));
        }
        match section {
            Section::None => {
                return Err(Error::parse(lineno, "content before any section header"))
            }
            Section::Meta => {
                let (key, value) = line
                    .split_once('=')
                    .ok_or_else(|| Error::parse(lineno, "expected `key = value`"))?;
                let key = key.trim();
                let value = value.trim();
                if key == "input" {
                    let dims: Vec<&str> = value.split('x').collect();
                    if dims.len() != 3 {
                        return Err(Error::parse(lineno, "input must be CxHxW"));
                    }
                    let mut parsed = [0usize; 3];
                    for (i, d) in dims.iter().enumerate() {
                        parsed[i] = d
                            .trim()
                            .parse()
                            .map_err(|_| Error::parse(lineno, format!("bad input dim `{d}`")))?;
                    }
                    input_shape = (parsed[0], parsed[1], parsed[2]);
                } else {
                    let v: usize = value
                        .parse()
                        .map_err(|_| Error::parse(lineno, format!("bad meta value `{value}`")))?;
                    meta.insert(key.to_string(), v);
                }
            }
            Section::Layers => {
                let node = parse_layer_line(line, lineno, &meta, nodes.len())?;
                nodes.push(node);
            }
        }
    }

    let head_levels = nodes
        .iter()
        .filter(|n| n.kind.is_head())
        .map(|n| n.id)
        .collect();
    Ok(ArchGraph {
        nodes,
        input_shape,
        head_levels,
    })
}

fn parse_layer_line(
    line: &str,
    lineno: usize,
    meta: &BTreeMap<String, usize>,
    expected_id: usize,
) -> Result<LayerNode> {
    let (id_str, rest) = line
        .split_once(':')
        .ok_or_else(|| Error::parse(lineno, "expected `id: kind(...)`"))?;
    let id: usize = id_str
        .trim()
        .parse()
        .map_err(|_| Error::parse(lineno, format!("bad layer id `{}`", id_str.trim())))?;
    if id != expected_id {
        return Err(Error::parse(
            lineno,
            format!("layer ids must be sequential: expected {expected_id}, got {id}"),
        ));
    }
    let rest = rest.trim();
    let open = rest
        .find('(')
        .ok_or_else(|| Error::parse(lineno, "expected `kind(args)`"))?;
    if !rest.ends_with(')') {
        return Err(Error::parse(lineno, "missing closing `)`"));
    }
    let kind_name = rest[..open].trim();
    let args_str = &rest[open + 1..rest.len() - 1];

    let mut inputs: Vec<InputRef> = Vec::new();
    let mut args: BTreeMap<String, usize> = BTreeMap::new();
    let mut act = true;
    for part in args_str.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        // `from=` lists use commas too, so accept bare continuation tokens
        // (`from=11,6` splits into `from=11` and `6`).
        if let Some((key, value)) = part.split_once('=') {
            let key = key.trim();
            let value = value.trim();
            match key {
                "from" => {
                    inputs.push(parse_input_ref(value, id, lineno)?);
                }
                "act" => {
                    act = match value {
                        "none" => false,
                        "silu" => true,
                        other => {
                            return Err(Error::parse(lineno, format!("unknown activation `{other}`")))
                        }
                    };
                }
                _ => {
                    args.insert(key.to_string(), resolve(value, meta, lineno)?);
                }
            }
        } else if !inputs.is_empty() && args.is_empty() {
            inputs.push(parse_input_ref(part, id, lineno)?);
        } else {
            return Err(Error::parse(lineno, format!("unexpected token `{part}`")));
        }
    }
    if inputs.is_empty() {
        return Err(Error::parse(lineno, "layer must declare `from=`"));
    }

    let get = |k: &str| -> Result<usize> {
        args.get(k)
            .copied()
            .ok_or_else(|| Error::parse(lineno, format!("{kind_name} missing `{k}=`")))
    };
    let get_or = |k: &str, default: usize| args.get(k).copied().unwrap_or(default);

    let kind = match kind_name {
        "conv" => NodeKind::Conv {
            c2: get("c2")?,
            k: get_or("k", 3),
            stride: get_or("s", 1),
            act,
        },
        "ghost_conv" => NodeKind::GhostConv {
            c2: get("c2")?,
            k_m: get_or("km", 3),
            k_c: get_or("kc", 5),
            stride: get_or("s", 1),
        },
        "gs_conv" => NodeKind::GsConv {
            c2: get("c2")?,
            stride: get_or("s", 1),
        },
        "gs_bottleneck" => NodeKind::GsBottleneck,
        "vov_gscspc" => NodeKind::VovGscspc { c2: get("c2")? },
        "c3k2_proxy" => {
            let c2 = get("c2")?;
            NodeKind::C3k2Proxy {
                c2,
                n: get_or("n", 1),
                deep: get_or("deep", 0) != 0,
                hidden: get_or("h", c2 / 2),
            }
        }
        "sppf_proxy" => NodeKind::SppfProxy {
            c2: get("c2")?,
            k: get_or("k", 5),
        },
        "upsample" => NodeKind::Upsample,
        "concat" => NodeKind::Concat,
        "ledh_head" => NodeKind::LedhHead {
            nc: get("nc")?,
            r: get_or("r", 16),
        },
        "plain_head" => NodeKind::PlainHead {
            nc: get("nc")?,
            r: get_or("r", 16),
            w_reg: get_or("wreg", 64),
            w_cls: get_or("wcls", 64),
        },
        other => return Err(Error::parse(lineno, format!("unknown layer kind `{other}`"))),
    };

    if matches!(kind, NodeKind::Concat) {
        if inputs.len() < 2 {
            return Err(Error::parse(lineno, "concat needs at least two inputs"));
        }
    } else if inputs.len() != 1 {
        return Err(Error::parse(
            lineno,
            format!("{kind_name} takes exactly one input, got {}", inputs.len()),
        ));
    }

    Ok(LayerNode {
        id,
        inputs,
        kind,
        out_shape: None,
    })
}

fn parse_input_ref(token: &str, node_id: usize, lineno: usize) -> Result<InputRef> {
    if token == "input" {
        return Ok(InputRef::Source);
    }
    let referenced: usize = token
        .parse()
        .map_err(|_| Error::parse(lineno, format!("bad input reference `{token}`")))?;
    if referenced >= node_id {
        return Err(Error::parse(
            lineno,
            format!("node {node_id} references node {referenced}, which is not an earlier layer"),
        ));
    }
    Ok(InputRef::Node(referenced))
}

// ---------------------------------------------------------------------------
// Emission (round-trippable)
// ---------------------------------------------------------------------------

impl ArchGraph {
    /// Serialize back to config text. `parse_config(g.emit())` reproduces
    /// the same graph (shapes excluded; they are re-inferable).
    pub fn emit(&self) -> String {
        let (c, h, w) = self.input_shape;
        let mut out = format!("[meta]\ninput = {c}x{h}x{w}\n\n[layers]\n");
        for node in &self.nodes {
            let from = node
                .inputs
                .iter()
                .map(|r| match r {
                    InputRef::Source => "input".to_string(),
                    InputRef::Node(i) => i.to_string(),
                })
                .collect::<Vec<_>>()
                .join(",");
            let args = match &node.kind {
                NodeKind::Conv { c2, k, stride, act } => {
                    let mut s = format!("c2={c2}, k={k}, s={stride}");
                    if !act {
                        s.push_str(", act=none");
                    }
                    s
                }
                NodeKind::GhostConv { c2, k_m, k_c, stride } => {
                    format!("c2={c2}, km={k_m}, kc={k_c}, s={stride}")
                }
                NodeKind::GsConv { c2, stride } => format!("c2={c2}, s={stride}"),
                NodeKind::GsBottleneck => String::new(),
                NodeKind::VovGscspc { c2 } => format!("c2={c2}"),
                NodeKind::C3k2Proxy { c2, n, deep, hidden } => {
                    format!("c2={c2}, n={n}, deep={}, h={hidden}", *deep as usize)
                }
                NodeKind::SppfProxy { c2, k } => format!("c2={c2}, k={k}"),
                NodeKind::Upsample | NodeKind::Concat => String::new(),
                NodeKind::LedhHead { nc, r } => format!("nc={nc}, r={r}"),
                NodeKind::PlainHead { nc, r, w_reg, w_cls } => {
                    format!("nc={nc}, r={r}, wreg={w_reg}, wcls={w_cls}")
                }
            };
            let sep = if args.is_empty() { "" } else { ", " };
            let _ = writeln!(out, "{}: {}(from={from}{sep}{args})", node.id, node.kind.name());
        }
        out
    }

    fn input_shapes_of(&self, node: &LayerNode) -> Result<Vec<(usize, usize, usize)>> {
        node.inputs
            .iter()
            .map(|r| match r {
                InputRef::Source => Ok(self.input_shape),
                InputRef::Node(i) => self.nodes[*i]
                    .out_shape
                    .ok_or_else(|| Error::Usage(format!("node {i} has no inferred shape"))),
            })
            .collect()
    }

    /// Static shape inference: populates `out_shape` on every node and
    /// validates concat spatial agreement plus the head pyramid ordering.
    pub fn infer_shapes(mut self) -> Result<ArchGraph> {
        for idx in 0..self.nodes.len() {
            let node = self.nodes[idx].clone();
            let ins = self.input_shapes_of(&node)?;
            let shape = infer_node_shape(&node, &ins)?;
            self.nodes[idx].out_shape = Some(shape);
        }
        self.validate_head_pyramid()?;
        Ok(self)
    }

    /// Head spatial sizes must strictly halve from the shallowest level down.
    fn validate_head_pyramid(&self) -> Result<()> {
        let mut sizes: Vec<(usize, usize, usize)> = Vec::new();
        for &id in &self.head_levels {
            let (_, h, w) = self.nodes[id].out_shape.ok_or_else(|| {
                Error::Usage(format!("head node {id} has no inferred shape"))
            })?;
            let input_c = match self.nodes[id].inputs[0] {
                InputRef::Source => self.input_shape.0,
                InputRef::Node(i) => self.nodes[i].out_shape.unwrap().0,
            };
            sizes.push((h, w, input_c));
        }
        let mut sorted = sizes.clone();
        sorted.sort_by(|a, b| b.0.cmp(&a.0));
        for pair in sorted.windows(2) {
            let (h0, w0, _) = pair[0];
            let (h1, w1, _) = pair[1];
            if h1 * 2 != h0 || w1 * 2 != w0 {
                return Err(Error::config(format!(
                    "head levels must strictly halve: {h0}x{w0} followed by {h1}x{w1}"
                )));
            }
        }
        Ok(())
    }

    /// Exactly four strictly-halving head levels (P2..P5), required before
    /// decoding detections with strides (4, 8, 16, 32).
    pub fn validate_four_level_pyramid(&self) -> Result<()> {
        if self.head_levels.len() != 4 {
            return Err(Error::config(format!(
                "wrong head-level count: expected 4, got {}",
                self.head_levels.len()
            )));
        }
        self.validate_head_pyramid()
    }

    /// Conv plans of every node, keyed by id (empty plans omitted).
    pub fn plans(&self) -> Result<BTreeMap<usize, Vec<ConvSpec>>> {
        let mut out = BTreeMap::new();
        for node in &self.nodes {
            let ins = self.input_shapes_of(node)?;
            let plan = node_plan(&node.kind, ins[0].0)?;
            if !plan.is_empty() {
                out.insert(node.id, plan);
            }
        }
        Ok(out)
    }

    /// Deterministic seeded weights for every parameterized node.
    pub fn seeded_weights(&self, seed: u64) -> Result<WeightStore> {
        let mut store = WeightStore::default();
        for (id, plan) in self.plans()? {
            store.nodes.insert(id, seeded_blocks(&plan, seed.wrapping_add(id as u64)));
        }
        Ok(store)
    }
}

fn infer_node_shape(
    node: &LayerNode,
    ins: &[(usize, usize, usize)],
) -> Result<(usize, usize, usize)> {
    let (c_in, h, w) = ins[0];
    match &node.kind {
        NodeKind::Concat => {
            let mut c_total = 0;
            for (i, &(c, ih, iw)) in ins.iter().enumerate() {
                if (ih, iw) != (h, w) {
                    return Err(Error::shape(
                        "concat",
                        format!(
                            "node {}: input {} from {:?} is {ih}x{iw}, input 0 from {:?} is {h}x{w}",
                            node.id, i, node.inputs[i], node.inputs[0]
                        ),
                    ));
                }
                c_total += c;
            }
            Ok((c_total, h, w))
        }
        NodeKind::Upsample => Ok((c_in, 2 * h, 2 * w)),
        NodeKind::LedhHead { nc, r } => {
            ledh_groups(c_in, 16)?;
            Ok((4 * r + nc, h, w))
        }
        NodeKind::PlainHead { nc, r, .. } => Ok((4 * r + nc, h, w)),
        kind => {
            let plan = node_plan(kind, c_in)?;
            // first planned conv carries the stride for every conv kind
            let (oh, ow) = plan[0].out_hw(h, w)?;
            let c_out = match kind {
                NodeKind::Conv { c2, .. }
                | NodeKind::GhostConv { c2, .. }
                | NodeKind::GsConv { c2, .. }
                | NodeKind::VovGscspc { c2 }
                | NodeKind::C3k2Proxy { c2, .. }
                | NodeKind::SppfProxy { c2, .. } => *c2,
                NodeKind::GsBottleneck => c_in / 2,
                _ => unreachable!(),
            };
            Ok((c_out, oh, ow))
        }
    }
}

// ---------------------------------------------------------------------------
// Forward execution
// ---------------------------------------------------------------------------

/// Result of a full forward pass.
#[derive(Debug)]
pub struct ForwardResult {
    /// (head node id, output) in config order.
    pub heads: Vec<(usize, HeadOutput)>,
    /// Dynamic (c, h, w) of every node, indexed by node id.
    pub node_shapes: Vec<(usize, usize, usize)>,
}

/// Execute the graph on `x`. Shapes must have been inferred (forward
/// verifies dynamic shapes against them node by node).
pub fn forward(g: &ArchGraph, x: &Tensor, store: &WeightStore) -> Result<ForwardResult> {
    let (n, c, h, w) = x.shape();
    if (c, h, w) != g.input_shape {
        return Err(Error::shape(
            "forward",
            format!("input is ({c},{h},{w}), graph expects {:?}", g.input_shape),
        ));
    }
    let _ = n;
    let mut outputs: Vec<Option<Tensor>> = vec![None; g.nodes.len()];
    let mut heads = Vec::new();
    let mut node_shapes = Vec::with_capacity(g.nodes.len());

    for node in &g.nodes {
        let ins: Vec<&Tensor> = node
            .inputs
            .iter()
            .map(|r| match r {
                InputRef::Source => x,
                InputRef::Node(i) => outputs[*i].as_ref().expect("topological order"),
            })
            .collect();
        let out = forward_node(node, &ins, store, &mut heads)?;
        let (_, oc, oh, ow) = out.shape();
        node_shapes.push((oc, oh, ow));
        if let Some((sc, sh, sw)) = node.out_shape {
            if (sc, sh, sw) != (oc, oh, ow) {
                return Err(Error::shape(
                    "forward",
                    format!(
                        "node {}: dynamic shape ({oc},{oh},{ow}) != inferred ({sc},{sh},{sw})",
                        node.id
                    ),
                ));
            }
        }
        outputs[node.id] = Some(out);
    }
    Ok(ForwardResult { heads, node_shapes })
}

fn forward_node(
    node: &LayerNode,
    ins: &[&Tensor],
    store: &WeightStore,
    heads: &mut Vec<(usize, HeadOutput)>,
) -> Result<Tensor> {
    let x = ins[0];
    match &node.kind {
        NodeKind::Upsample => Ok(crate::tensor::upsample2x_nearest(x)),
        NodeKind::Concat => concat_channels(ins),
        NodeKind::Conv { c2: _, act, .. } => {
            let plan = node_plan(&node.kind, x.c())?;
            let ws = store.get(node.id)?;
            let y = conv2d(x, &plan[0], &ws[0])?;
            Ok(if *act { silu(&y) } else { y })
        }
        NodeKind::GhostConv { c2, k_m, k_c, stride } => {
            let spec = GhostSpec::new(x.c(), *c2).kernels(*k_m, *k_c).stride(*stride);
            ghost_conv(x, &spec, store.get(node.id)?)
        }
        NodeKind::GsConv { c2, stride } => gs_conv(x, *c2, *stride, store.get(node.id)?),
        NodeKind::GsBottleneck => gs_bottleneck(x, store.get(node.id)?),
        NodeKind::VovGscspc { c2 } => vov_gscspc(x, *c2, store.get(node.id)?),
        NodeKind::C3k2Proxy { c2: _, n, deep, hidden } => {
            c3k2_forward(x, *n, *deep, *hidden, store.get(node.id)?)
        }
        NodeKind::SppfProxy { k, .. } => {
            let plan = node_plan(&node.kind, x.c())?;
            let ws = store.get(node.id)?;
            let y0 = silu(&conv2d(x, &plan[0], &ws[0])?);
            let p1 = maxpool(&y0, *k, 1)?;
            let p2 = maxpool(&p1, *k, 1)?;
            let p3 = maxpool(&p2, *k, 1)?;
            let cat = concat_channels(&[&y0, &p1, &p2, &p3])?;
            Ok(silu(&conv2d(&cat, &plan[1], &ws[1])?))
        }
        NodeKind::LedhHead { nc, r } => {
            let out = ledh_level_forward(x, *nc, *r, 16, store.get(node.id)?)?;
            let combined = out.combined()?;
            heads.push((node.id, out));
            Ok(combined)
        }
        NodeKind::PlainHead { nc, r, w_reg, w_cls } => {
            let out = plain_head_level_forward(x, *nc, *r, *w_reg, *w_cls, store.get(node.id)?)?;
            let combined = out.combined()?;
            heads.push((node.id, out));
            Ok(combined)
        }
    }
}

/// Forward of the c3k2 proxy: 1x1 to 2h, split, n residual modules chained
/// on the second half, concat of all intermediates, 1x1 fuse.
fn c3k2_forward(
    x: &Tensor,
    n: usize,
    deep: bool,
    hidden: usize,
    ws: &[WeightBlock],
) -> Result<Tensor> {
    let plan = c3k2_plan(x.c(), 0, n, deep, hidden)?; // c2 only affects last spec
    let split = silu(&conv2d(x, &plan[0], &ws[0])?);
    let a = split.slice_channels(0, hidden)?;
    let mut parts = vec![a, split.slice_channels(hidden, hidden)?];
    let mut wi = 1;
    for _ in 0..n {
        let prev = parts.last().unwrap();
        let next = if deep {
            let y = deep_module_forward(prev, hidden, &ws[wi..wi + 7])?;
            wi += 7;
            y
        } else {
            let t = silu(&conv2d(prev, &plan[wi], &ws[wi])?);
            let t = silu(&conv2d(&t, &plan[wi + 1], &ws[wi + 1])?);
            wi += 2;
            add(prev, &t)?
        };
        parts.push(next);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let cat = concat_channels(&refs)?;
    // rebuild the fuse spec with the true output width
    let fuse = &ws[wi];
    let c2 = fuse.b.as_ref().map(|b| b.len()).unwrap_or_else(|| {
        fuse.w.len() / ((2 + n) * hidden)
    });
    let fuse_spec = ConvSpec::new((2 + n) * hidden, c2, 1);
    Ok(silu(&conv2d(&cat, &fuse_spec, fuse)?))
}

fn deep_module_forward(x: &Tensor, hidden: usize, ws: &[WeightBlock]) -> Result<Tensor> {
    let plan = deep_module_plan(hidden);
    let mut p = silu(&conv2d(x, &plan[0], &ws[0])?);
    for step in 0..2 {
        let t = silu(&conv2d(&p, &plan[1 + 2 * step], &ws[1 + 2 * step])?);
        let t = silu(&conv2d(&t, &plan[2 + 2 * step], &ws[2 + 2 * step])?);
        p = add(&p, &t)?;
    }
    let q = silu(&conv2d(x, &plan[5], &ws[5])?);
    let cat = concat_channels(&[&p, &q])?;
    Ok(silu(&conv2d(&cat, &plan[6], &ws[6])?))
}

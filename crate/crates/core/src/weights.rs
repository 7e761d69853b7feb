//! Deterministic weight initialization and the on-disk weight store.
//!
//! Store layout: a flat little-endian f64 blob plus a sidecar manifest of
//! text lines `node_id offset length` (offset and length counted in f64
//! elements). Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Tensor, WeightBlock};

/// Fixed default seed used by every CLI subcommand unless overridden.
pub const DEFAULT_SEED: u64 = 20250826;

/// Deterministic pseudo-random tensor with entries in [-1, 1].
pub fn seeded_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(n, c, h, w, data).expect("valid shape")
}

/// Deterministic weight blocks for a conv plan. Kernel entries are uniform
/// in +-1/sqrt(fan_in) so deep stacks stay bounded; biases are zero.
pub fn seeded_blocks(plan: &[ConvSpec], seed: u64) -> Vec<WeightBlock> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    plan.iter()
        .map(|spec| {
            let fan_in = (spec.c1 / spec.groups) * spec.k * spec.k;
            let scale = 1.0 / (fan_in as f64).sqrt();
            WeightBlock {
                w: (0..spec.weight_len())
                    .map(|_| rng.gen_range(-scale..scale))
                    .collect(),
                b: if spec.has_bias {
                    Some(vec![0.0; spec.c2])
                } else {
                    None
                },
            }
        })
        .collect()
}

/// All weights of a graph, keyed by node id. Each node owns the weight
/// blocks of its conv plan, in plan order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    pub nodes: BTreeMap<usize, Vec<WeightBlock>>,
}

impl WeightStore {
    pub fn get(&self, node_id: usize) -> Result<&[WeightBlock]> {
        self.nodes
            .get(&node_id)
            .map(|v| v.as_slice())
            .ok_or(Error::MissingWeights(node_id))
    }

    /// Total number of stored scalars (weights + biases).
    pub fn scalar_count(&self) -> usize {
        self.nodes
            .values()
            .flat_map(|blocks| blocks.iter().map(WeightBlock::scalar_count))
            .sum()
    }

    fn node_flat(blocks: &[WeightBlock]) -> Vec<f64> {
        let mut out = Vec::new();
        for wb in blocks {
            out.extend_from_slice(&wb.w);
            if let Some(b) = &wb.b {
                out.extend_from_slice(b);
            }
        }
        out
    }

    /// Write `<path>.bin` (blob) and `<path>.manifest` (offset table).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut blob: Vec<u8> = Vec::new();
        let mut manifest = String::new();
        let mut offset = 0usize;
        for (&id, blocks) in &self.nodes {
            let flat = Self::node_flat(blocks);
            manifest.push_str(&format!("{id} {offset} {}\n", flat.len()));
            for v in &flat {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += flat.len();
        }
        fs::write(path.with_extension("bin"), blob)?;
        fs::write(path.with_extension("manifest"), manifest)?;
        Ok(())
    }

    /// Load a store previously written by [`save`], re-splitting each node's
    /// flat data according to `plans` (node id -> conv plan).
    pub fn load(path: &Path, plans: &BTreeMap<usize, Vec<ConvSpec>>) -> Result<WeightStore> {
        let blob = fs::read(path.with_extension("bin"))?;
        if blob.len() % 8 != 0 {
            return Err(Error::Usage("weight blob length not a multiple of 8".into()));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let manifest = fs::read_to_string(path.with_extension("manifest"))?;
        let mut store = WeightStore::default();
        for (lineno, line) in manifest.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::parse(lineno + 1, "expected `node_id offset length`"));
            }
            let id: usize = parts[0]
                .parse()
                .map_err(|_| Error::parse(lineno + 1, "bad node id"))?;
            let offset: usize = parts[1]
                .parse()
                .map_err(|_| Error::parse(lineno + 1, "bad offset"))?;
            let length: usize = parts[2]
                .parse()
                .map_err(|_| Error::parse(lineno + 1, "bad length"))?;
            if offset + length > values.len() {
                return Err(Error::parse(lineno + 1, "entry exceeds blob size"));
            }
            let plan = plans
                .get(&id)
                .ok_or_else(|| Error::Usage(format!("manifest node {id} not in graph")))?;
            let mut cursor = offset;
            let mut blocks = Vec::with_capacity(plan.len());
            for spec in plan {
                let wlen = spec.weight_len();
                let blen = spec.bias_len();
                if cursor + wlen + blen > offset + length {
                    return Err(Error::MissingWeights(id));
                }
                let w = values[cursor..cursor + wlen].to_vec();
                cursor += wlen;
                let b = if blen > 0 {
                    let b = values[cursor..cursor + blen].to_vec();
                    cursor += blen;
                    Some(b)
                } else {
                    None
                };
                blocks.push(WeightBlock { w, b });
            }
            if cursor != offset + length {
                return Err(Error::MissingWeights(id));
            }
            store.nodes.insert(id, blocks);
        }
        Ok(store)
    }
}

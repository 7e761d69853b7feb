//! Acceptance suite: one test per top-level claim, each printing a
//! PASS/FAIL line (visible with `--nocapture`; assertions enforce the same
//! conditions either way).

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sbp_core::blocks::*;
use sbp_core::cost::analyze;
use sbp_core::eval::{self, evaluate, Detection, GroundTruth};
use sbp_core::graph::{forward, parse_config, NodeKind};
use sbp_core::losses::*;
use sbp_core::tensor::*;
use sbp_core::weights::{seeded_blocks, seeded_tensor};

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn load(name: &str) -> sbp_core::graph::ArchGraph {
    let text = std::fs::read_to_string(config_path(name)).unwrap();
    parse_config(&text).unwrap().infer_shapes().unwrap()
}

fn pass(n: usize, what: &str) {
    println!("PASS criterion {n}: {what}");
}

/// 1. Ghost parameter ratio: exact rational identity with the closed form
///    (k_m^2 + k_c^2/c1) / (2 k^2) and within the 48%-55% band for
///    c1 in {64, 128, 256}.
#[test]
fn criterion_1_ghost_ratio() {
    for c1 in [64usize, 128, 256] {
        let c2 = c1;
        let spec = GhostSpec::new(c1, c2); // k_m = 3, k_c = 5
        let plan = ghost_plan(&spec).unwrap();
        let p_g: u128 = plan.iter().map(|s| s.weight_len() as u128).sum();
        let sc = ConvSpec::new(c1, c2, 3).bias(false);
        let p_sc = sc.weight_len() as u128;

        // ratio == (k_m^2 + k_c^2/c1) / (2 k^2), cross-multiplied exactly
        let (km2, kc2, k2) = (9u128, 25u128, 9u128);
        assert_eq!(
            p_g * 2 * k2 * c1 as u128,
            p_sc * (km2 * c1 as u128 + kc2),
            "ghost ratio identity failed for c1={c1}"
        );

        let ratio = p_g as f64 / p_sc as f64;
        assert!(
            (0.48..=0.55).contains(&ratio),
            "ratio {ratio} outside [0.48, 0.55] for c1={c1}"
        );
    }
    pass(1, "ghost/standard parameter ratio is the closed form and lies in [0.48, 0.55]");
}

/// 2. Cost totals: full config within +-15% of 2.04M params / 5.8 GFLOPs
///    (under at least one FLOP convention) and the baseline within +-15% of
///    2.58M / 6.3 GFLOPs.
#[test]
fn criterion_2_cost_totals() {
    let within = |value: f64, target: f64| (value - target).abs() / target <= 0.15;
    let flops_ok = |flops: u64, target: f64| {
        within(flops as f64, target) || within(flops as f64 / 2.0, target)
    };

    let sbp = analyze(&load("sbp-yolo.cfg")).unwrap();
    assert!(within(sbp.total.params as f64, 2.04e6), "sbp params {}", sbp.total.params);
    assert!(flops_ok(sbp.total.flops, 5.8e9), "sbp flops {}", sbp.total.flops);

    let base = analyze(&load("yolov11n.cfg")).unwrap();
    assert!(within(base.total.params as f64, 2.58e6), "baseline params {}", base.total.params);
    assert!(flops_ok(base.total.flops, 6.3e9), "baseline flops {}", base.total.flops);

    pass(2, "cost totals within 15% of 2.04M/5.8G (full) and 2.58M/6.3G (baseline)");
}

/// 3. Lightweight-head efficiency: swapping the dense 4-level heads for the
///    grouped shared-stack heads cuts total FLOPs by 25%-45%.
#[test]
fn criterion_3_head_flop_reduction() {
    let dense = analyze(&load("yolov11n-p2.cfg")).unwrap().total.flops as f64;
    let light = analyze(&load("yolov11n-p2-ledh.cfg")).unwrap().total.flops as f64;
    let reduction = (dense - light) / dense * 100.0;
    assert!(
        (25.0..=45.0).contains(&reduction),
        "FLOP reduction {reduction:.1}% outside [25, 45]"
    );
    pass(3, "dense->grouped head swap reduces total FLOPs by 25%-45%");
}

/// 4. Block forwards match independent primitive-by-primitive composition
///    oracles on 20 random inputs each, max abs diff < 1e-12.
#[test]
fn criterion_4_block_composition_oracles() {
    let diff = |a: &Tensor, b: &Tensor| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    for trial in 0..20u64 {
        let seed = 1000 + trial;

        // ghost_conv
        let gspec = GhostSpec::new(6, 8);
        let plan = ghost_plan(&gspec).unwrap();
        let ws = seeded_blocks(&plan, seed);
        let x = seeded_tensor(1, 6, 7, 7, seed + 50);
        let got = ghost_conv(&x, &gspec, &ws).unwrap();
        let y1 = silu(&conv2d(&x, &plan[0], &ws[0]).unwrap());
        let y2 = silu(&depthwise_conv2d(&y1, 5, &ws[1]).unwrap());
        let want = concat_channels(&[&y1, &y2]).unwrap();
        assert!(diff(&got, &want) < 1e-12, "ghost mismatch at trial {trial}");

        // gs_conv
        let plan = gs_conv_plan(6, 8, 1).unwrap();
        let ws = seeded_blocks(&plan, seed + 1);
        let got = gs_conv(&x, 8, 1, &ws).unwrap();
        let y1 = silu(&conv2d(&x, &plan[0], &ws[0]).unwrap());
        let y2 = silu(&depthwise_conv2d(&y1, 3, &ws[1]).unwrap());
        let want = channel_shuffle(&concat_channels(&[&y1, &y2]).unwrap(), 2).unwrap();
        assert!(diff(&got, &want) < 1e-12, "gs_conv mismatch at trial {trial}");

        // gs_bottleneck (inner width c1/2 must itself be even: c1 = 8)
        let xb = seeded_tensor(1, 8, 7, 7, seed + 60);
        let plan = gs_bottleneck_plan(8).unwrap();
        let ws = seeded_blocks(&plan, seed + 2);
        let got = gs_bottleneck(&xb, &ws).unwrap();
        let m = silu(&conv2d(&xb, &plan[0], &ws[0]).unwrap());
        let m = gs_conv(&m, 4, 1, &ws[1..3]).unwrap();
        let m = gs_conv(&m, 4, 1, &ws[3..5]).unwrap();
        let s = silu(&conv2d(&xb, &plan[5], &ws[5]).unwrap());
        let want = add(&m, &s).unwrap();
        assert!(diff(&got, &want) < 1e-12, "gs_bottleneck mismatch at trial {trial}");

        // vov_gscspc
        let plan = vov_gscspc_plan(8, 10).unwrap();
        let ws = seeded_blocks(&plan, seed + 3);
        let got = vov_gscspc(&xb, 10, &ws).unwrap();
        let a = gs_bottleneck(&xb, &ws[0..6]).unwrap();
        let b = silu(&conv2d(&xb, &plan[6], &ws[6]).unwrap());
        let cat = concat_channels(&[&a, &b]).unwrap();
        let want = silu(&conv2d(&cat, &plan[7], &ws[7]).unwrap());
        assert!(diff(&got, &want) < 1e-12, "vov_gscspc mismatch at trial {trial}");
    }
    pass(4, "ghost/gs_conv/gs_bottleneck/vov forwards match composition oracles < 1e-12");
}

fn fd_grad(pb: &BBox, gt: &BBox, p: &HybridLossParams) -> [f64; 4] {
    let eps = 1e-6;
    let mut out = [0.0; 4];
    for i in 0..4 {
        let mut lo = *pb;
        let mut hi = *pb;
        match i {
            0 => {
                lo.cx -= eps;
                hi.cx += eps;
            }
            1 => {
                lo.cy -= eps;
                hi.cy += eps;
            }
            2 => {
                lo.w -= eps;
                hi.w += eps;
            }
            _ => {
                lo.h -= eps;
                hi.h += eps;
            }
        }
        out[i] = (hybrid_loss(&hi, gt, p).0 - hybrid_loss(&lo, gt, p).0) / (2.0 * eps);
    }
    out
}

/// 5. Loss correctness: analytic vs finite-difference gradients, the
///    exp(-2) spot value, and informative gradients on disjoint pairs.
#[test]
fn criterion_5_loss_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut rand_box = |rng: &mut ChaCha8Rng| {
        BBox::new(
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(0.5..8.0),
            rng.gen_range(0.5..8.0),
        )
        .unwrap()
    };
    for alpha in [0.0, 0.5, 1.0] {
        let p = HybridLossParams::new(0.5, alpha).unwrap();
        let mut checked = 0;
        while checked < 1000 {
            let a = rand_box(&mut rng);
            let b = rand_box(&mut rng);
            if iou(&a, &b) > 1.0 - 1e-6 {
                continue; // degenerate for FD
            }
            let (_, g) = hybrid_loss(&a, &b, &p);
            let fd = fd_grad(&a, &b, &p);
            let scale = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
            for i in 0..4 {
                let rel = (g[i] - fd[i]).abs() / scale;
                assert!(rel < 1e-4, "alpha {alpha} rel err {rel:.2e}");
            }
            checked += 1;
        }
    }

    // unit-offset spot value
    let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
    let b = BBox::new(1.0, 0.0, 2.0, 2.0).unwrap();
    assert!((nwd(&a, &b, 0.5) - (-2.0f64).exp()).abs() < 1e-12);

    // disjoint pairs: IoU gradient exactly zero, NWD gradient norm > 0
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let a = BBox::new(
            rng.gen_range(-5.0..0.0) - 10.0,
            rng.gen_range(-5.0..5.0),
            rng.gen_range(0.5..4.0),
            rng.gen_range(0.5..4.0),
        )
        .unwrap();
        let b = BBox::new(
            rng.gen_range(0.0..5.0) + 10.0,
            rng.gen_range(-5.0..5.0),
            rng.gen_range(0.5..4.0),
            rng.gen_range(0.5..4.0),
        )
        .unwrap();
        assert_eq!(iou(&a, &b), 0.0);
        let (_, ig) = iou_grad(&a, &b);
        assert_eq!(ig, [0.0; 4], "IoU gradient must vanish on disjoint boxes");
        let (_, ng) = nwd_grad(&a, &b, 0.5);
        let norm = ng.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 0.0, "NWD gradient must stay informative");
    }
    pass(5, "hybrid-loss gradients match finite differences; NWD informative where IoU is flat");
}

/// Independent exhaustive greedy matcher + AP, written against the
/// documented rules rather than sharing code with the library.
fn oracle_eval(dets: &[Detection], gts: &[GroundTruth], thr: f64, class_id: usize) -> f64 {
    let mut ds: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class_id).collect();
    let gs: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == class_id).collect();
    if gs.is_empty() {
        return f64::NAN;
    }
    ds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut used = vec![false; gs.len()];
    let mut flags = Vec::new();
    for d in &ds {
        let mut best_i = usize::MAX;
        let mut best_v = -1.0;
        for (i, g) in gs.iter().enumerate() {
            if used[i] || g.image_id != d.image_id {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= thr && v > best_v {
                best_v = v;
                best_i = i;
            }
        }
        if best_i != usize::MAX {
            used[best_i] = true;
            flags.push(true);
        } else {
            flags.push(false);
        }
    }
    // AP as sum over recall steps of the best precision at or beyond them
    let n_gt = gs.len();
    let mut ap = 0.0;
    let mut tp = 0;
    let mut last_recall = 0.0;
    for k in 0..flags.len() {
        if !flags[k] {
            continue;
        }
        tp += 1;
        let recall = tp as f64 / n_gt as f64;
        // best precision at any cutoff with recall >= this one
        let mut best_p = 0.0f64;
        let mut t2 = 0;
        for (j, &f) in flags.iter().enumerate() {
            if f {
                t2 += 1;
            }
            if t2 >= tp {
                best_p = best_p.max(t2 as f64 / (j + 1) as f64);
            }
        }
        ap += (recall - last_recall) * best_p;
        last_recall = recall;
    }
    ap
}

/// 6. Evaluator equivalence with the exhaustive oracle on 200 random
///    instances, plus bit-for-bit agreement with the committed golden file.
#[test]
fn criterion_6_evaluator_oracle_and_golden() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for inst in 0..200 {
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for img in ["a", "b"] {
            for class_id in 0..2usize {
                for _ in 0..rng.gen_range(0..=5) {
                    gts.push(GroundTruth {
                        image_id: img.to_string(),
                        class_id,
                        bbox: BBox::new(
                            rng.gen_range(0..20) as f64,
                            rng.gen_range(0..20) as f64,
                            rng.gen_range(2..8) as f64,
                            rng.gen_range(2..8) as f64,
                        )
                        .unwrap(),
                    });
                }
                for i in 0..rng.gen_range(0..=5usize) {
                    dets.push(Detection {
                        image_id: img.to_string(),
                        class_id,
                        bbox: BBox::new(
                            rng.gen_range(0..20) as f64,
                            rng.gen_range(0..20) as f64,
                            rng.gen_range(2..8) as f64,
                            rng.gen_range(2..8) as f64,
                        )
                        .unwrap(),
                        score: 0.95 - 0.03 * (i as f64) - 0.001 * (dets.len() as f64),
                    });
                }
            }
        }
        if gts.is_empty() {
            continue;
        }
        let r = evaluate(&dets, &gts).unwrap();
        for c in &r.per_class {
            for (ti, &thr) in r.thresholds.iter().enumerate() {
                let want = oracle_eval(&dets, &gts, thr, c.class_id);
                assert_eq!(
                    c.ap[ti].to_bits(),
                    want.to_bits(),
                    "instance {inst} class {} thr {thr}: {} vs oracle {}",
                    c.class_id,
                    c.ap[ti],
                    want
                );
            }
        }
    }

    // committed golden fixture, bit for bit
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let dets =
        eval::parse_detections(&std::fs::read_to_string(dir.join("golden_dets.txt")).unwrap())
            .unwrap();
    let gts =
        eval::parse_ground_truths(&std::fs::read_to_string(dir.join("golden_gts.txt")).unwrap())
            .unwrap();
    let rendered = evaluate(&dets, &gts).unwrap().render();
    let expected = std::fs::read_to_string(dir.join("golden_eval_expected.txt")).unwrap();
    assert_eq!(rendered, expected, "golden eval output drifted");

    pass(6, "evaluate matches the exhaustive greedy oracle and the golden fixture bit-for-bit");
}

/// 7. Shape fidelity: full-config forward at (3, 640, 640) produces head
///    maps at 160/80/40/20 with 4r + n_c channels, the stem conv emits
///    (16, 320, 320), and static inference equals dynamic shapes everywhere.
#[test]
fn criterion_7_shape_fidelity() {
    let g = load("sbp-yolo.cfg");
    g.validate_four_level_pyramid().unwrap();
    let store = g.seeded_weights(1).unwrap();
    let x = seeded_tensor(1, 3, 640, 640, 2);
    let res = forward(&g, &x, &store).unwrap();

    assert_eq!(res.node_shapes[0], (16, 320, 320), "stem conv shape");
    for (node, &shape) in g.nodes.iter().zip(&res.node_shapes) {
        assert_eq!(node.out_shape, Some(shape), "static/dynamic mismatch at node {}", node.id);
    }

    let mut sizes: Vec<usize> = Vec::new();
    for (id, head) in &res.heads {
        let node = &g.nodes[*id];
        let (nc, r) = match node.kind {
            NodeKind::LedhHead { nc, r } => (nc, r),
            NodeKind::PlainHead { nc, r, .. } => (nc, r),
            _ => unreachable!(),
        };
        assert_eq!(head.reg.c(), 4 * r);
        assert_eq!(head.cls.c(), nc);
        assert_eq!(head.combined().unwrap().c(), 4 * r + nc);
        sizes.push(head.reg.h());
    }
    sizes.sort_unstable();
    assert_eq!(sizes, vec![20, 40, 80, 160]);
    pass(7, "forward head maps at 160/80/40/20 with 4r+n_c channels; static == dynamic shapes");
}

/// 8. Explicit non-reproducibility: trained-model accuracy (mAP 86.6/87.0)
///    and embedded-hardware throughput (139.5 FPS) require weights, the
///    assembled dataset and the target device — none of which exist at desk
///    scale. They are deliberately replaced by the formula identities,
///    composition oracles, gradient checks and golden files above.
#[test]
fn criterion_8_non_reproducible_scope() {
    let replaced = [
        "trained mAP values (no trained weights, no dataset)",
        "device throughput (no target hardware)",
    ];
    assert_eq!(replaced.len(), 2);
    pass(8, "accuracy/FPS claims out of scope; covered by criteria 1-7 proxies instead");
}

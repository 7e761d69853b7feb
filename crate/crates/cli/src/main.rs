//! `sbp` — analyze, run and evaluate detector architecture configs.
//!
//! Exit codes: 0 success, 1 check failure (e.g. a failed gradient check),
//! 2 input/usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sbp_core::blocks::decode_detections;
use sbp_core::cost::analyze;
use sbp_core::error::Error;
use sbp_core::eval::{evaluate, parse_detections, parse_ground_truths};
use sbp_core::graph::{forward, parse_config, ArchGraph};
use sbp_core::losses::{hybrid_loss, BBox, HybridLossParams};
use sbp_core::weights::{WeightStore, DEFAULT_SEED};

#[derive(Parser)]
#[command(name = "sbp", version, about = "detector architecture toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Upper bound on worker threads (results are independent of it; the
    /// current implementation is single-threaded).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Output directory for reports and the run manifest.
    #[arg(long, global = true, default_value = "sbp-out")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Convention {
    /// Report both conventions.
    Both,
    /// 2 x multiply-accumulates (the usual detector-paper convention).
    Flops,
    /// Raw multiply-accumulate count.
    Macs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ApInterp {
    /// All-point (continuous) interpolation. The only mode implemented;
    /// the flag reserves room for a 101-point mode.
    Continuous,
}

#[derive(Subcommand)]
enum Command {
    /// Static per-layer parameter/FLOP report for a config.
    Analyze {
        config: PathBuf,
        /// Override the square input size from the config.
        #[arg(long)]
        input: Option<usize>,
        #[arg(long, value_enum, default_value_t = Convention::Both)]
        convention: Convention,
    },
    /// Run a config forward on a seeded input and dump shapes/statistics.
    Forward {
        config: PathBuf,
        #[arg(long)]
        input: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Load weights from this manifest path instead of seeding them.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Save the (seeded or loaded) weights to this manifest path.
        #[arg(long)]
        save_weights: Option<PathBuf>,
        /// Also decode detections from the head outputs.
        #[arg(long)]
        decode: bool,
        #[arg(long, default_value_t = 0.25)]
        score_threshold: f64,
        #[arg(long, default_value_t = 0.7)]
        nms_threshold: f64,
    },
    /// Check analytic hybrid-loss gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// IoU mixing ratio; checks all of {0, 0.5, 1} when omitted.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 0.5)]
        c_norm: f64,
        /// Emit a gradient-vs-offset table for a disjoint-box sweep.
        #[arg(long)]
        sweep_offset: bool,
    },
    /// Score a detections file against a ground-truth file (mAP).
    Eval {
        detections: PathBuf,
        ground_truths: PathBuf,
        #[arg(long, value_enum, default_value_t = ApInterp::Continuous)]
        ap_interp: ApInterp,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode, Error> {
    fs::create_dir_all(&cli.out)?;
    let mut manifest = Manifest::new(&cli.out);
    let code = match &cli.command {
        Command::Analyze {
            config,
            input,
            convention,
        } => cmd_analyze(cli, &mut manifest, config, *input, *convention)?,
        Command::Forward {
            config,
            input,
            seed,
            weights,
            save_weights,
            decode,
            score_threshold,
            nms_threshold,
        } => cmd_forward(
            cli,
            &mut manifest,
            config,
            *input,
            *seed,
            weights.as_deref(),
            save_weights.as_deref(),
            *decode,
            *score_threshold,
            *nms_threshold,
        )?,
        Command::Gradcheck {
            trials,
            seed,
            alpha,
            c_norm,
            sweep_offset,
        } => cmd_gradcheck(cli, &mut manifest, *trials, *seed, *alpha, *c_norm, *sweep_offset)?,
        Command::Eval {
            detections,
            ground_truths,
            ap_interp: _,
        } => cmd_eval(cli, &mut manifest, detections, ground_truths)?,
    };
    manifest.write()?;
    Ok(code)
}

struct Manifest {
    out_dir: PathBuf,
    lines: Vec<String>,
}

impl Manifest {
    fn new(out_dir: &Path) -> Self {
        let version = env!("CARGO_PKG_VERSION");
        Manifest {
            out_dir: out_dir.to_path_buf(),
            lines: vec![format!("version {version}")],
        }
    }

    fn field(&mut self, key: &str, value: impl std::fmt::Display) {
        self.lines.push(format!("{key} {value}"));
    }

    fn write(&self) -> Result<(), Error> {
        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut text = format!("timestamp {ts}\n");
        for l in &self.lines {
            text.push_str(l);
            text.push('\n');
        }
        fs::write(self.out_dir.join("manifest.txt"), text)?;
        Ok(())
    }
}

fn load_graph(config: &Path, input: Option<usize>) -> Result<ArchGraph, Error> {
    let text = fs::read_to_string(config)
        .map_err(|e| Error::Usage(format!("cannot read {}: {e}", config.display())))?;
    let mut g = parse_config(&text)?;
    if let Some(size) = input {
        g.input_shape = (g.input_shape.0, size, size);
    }
    g.infer_shapes()
}

fn emit(cli: &Cli, manifest: &mut Manifest, name: &str, text: &str) -> Result<(), Error> {
    print!("{text}");
    let path = cli.out.join(name);
    fs::write(&path, text)?;
    manifest.field("output", path.display());
    Ok(())
}

fn cmd_analyze(
    cli: &Cli,
    manifest: &mut Manifest,
    config: &Path,
    input: Option<usize>,
    convention: Convention,
) -> Result<ExitCode, Error> {
    manifest.field("subcommand", "analyze");
    manifest.field("config", config.display());
    let conv_name = match convention {
        Convention::Both => "both",
        Convention::Flops => "flops",
        Convention::Macs => "macs",
    };
    manifest.field("convention", conv_name);
    let g = load_graph(config, input)?;
    let report = analyze(&g)?;
    let mut text = report.render();
    match convention {
        Convention::Both => {}
        Convention::Flops => {
            text.push_str(&format!("headline flops  {}\n", report.total.flops))
        }
        Convention::Macs => text.push_str(&format!("headline macs   {}\n", report.total.macs())),
    }
    emit(cli, manifest, "analyze.txt", &text)?;
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_forward(
    cli: &Cli,
    manifest: &mut Manifest,
    config: &Path,
    input: Option<usize>,
    seed: u64,
    weights: Option<&Path>,
    save_weights: Option<&Path>,
    decode: bool,
    score_threshold: f64,
    nms_threshold: f64,
) -> Result<ExitCode, Error> {
    manifest.field("subcommand", "forward");
    manifest.field("config", config.display());
    manifest.field("seed", seed);
    let g = load_graph(config, input)?;
    let store = match weights {
        Some(p) => {
            manifest.field("weights", p.display());
            WeightStore::load(p, &g.plans()?)?
        }
        None => g.seeded_weights(seed)?,
    };
    if let Some(p) = save_weights {
        store.save(p)?;
        manifest.field("saved_weights", p.display());
    }
    let (c, h, w) = g.input_shape;
    let x = sbp_core::weights::seeded_tensor(1, c, h, w, seed ^ 0x5eed);
    let result = forward(&g, &x, &store)?;

    let mut text = format!("input 1x{c}x{h}x{w}\n");
    for (node, &(oc, oh, ow)) in g.nodes.iter().zip(&result.node_shapes) {
        text.push_str(&format!(
            "{:>4}  {:<14} {}x{}x{}\n",
            node.id,
            node.kind.name(),
            oc,
            oh,
            ow
        ));
    }
    for (id, head) in &result.heads {
        let (_, cr, hh, ww) = head.reg.shape();
        let (_, cc, ..) = head.cls.shape();
        let stats = |d: &[f64]| {
            let mn = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let mx = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            format!("min {mn:.6} max {mx:.6} mean {mean:.6}")
        };
        text.push_str(&format!(
            "head {id}: map {hh}x{ww} reg {cr}ch [{}] cls {cc}ch [{}]\n",
            stats(head.reg.data()),
            stats(head.cls.data())
        ));
    }
    if decode {
        g.validate_four_level_pyramid()?;
        let (n_c, r) = head_dims(&g)?;
        let mut outs: Vec<_> = result.heads.iter().map(|(_, h)| h.clone()).collect();
        // order by descending spatial size: strides 4, 8, 16, 32
        outs.sort_by(|a, b| b.reg.h().cmp(&a.reg.h()));
        let dets = decode_detections(&outs, &[4, 8, 16, 32], n_c, r, score_threshold, nms_threshold)?;
        text.push_str(&format!("decoded {} detections\n", dets.len()));
        for d in dets.iter().take(20) {
            text.push_str(&format!(
                "det class {} score {:.4} box {:.1} {:.1} {:.1} {:.1}\n",
                d.class_id, d.score, d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h
            ));
        }
    }
    emit(cli, manifest, "forward.txt", &text)?;
    Ok(ExitCode::SUCCESS)
}

fn head_dims(g: &ArchGraph) -> Result<(usize, usize), Error> {
    use sbp_core::graph::NodeKind;
    for node in &g.nodes {
        match node.kind {
            NodeKind::LedhHead { nc, r } | NodeKind::PlainHead { nc, r, .. } => {
                return Ok((nc, r))
            }
            _ => {}
        }
    }
    Err(Error::config("config has no detection heads"))
}

fn cmd_gradcheck(
    cli: &Cli,
    manifest: &mut Manifest,
    trials: usize,
    seed: u64,
    alpha: Option<f64>,
    c_norm: f64,
    sweep_offset: bool,
) -> Result<ExitCode, Error> {
    manifest.field("subcommand", "gradcheck");
    manifest.field("seed", seed);
    manifest.field("trials", trials);
    let alphas: Vec<f64> = match alpha {
        Some(a) => vec![a],
        None => vec![0.0, 0.5, 1.0],
    };
    let mut text = String::new();
    let mut ok = true;
    for &a in &alphas {
        let params = HybridLossParams::new(c_norm, a)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut max_rel = 0.0f64;
        let mut checked = 0usize;
        while checked < trials {
            let pb = random_box(&mut rng);
            let gt = random_box(&mut rng);
            // skip near-degenerate geometry where FD itself is unreliable
            if sbp_core::losses::iou(&pb, &gt) > 1.0 - 1e-6 {
                continue;
            }
            let (_, grad) = hybrid_loss(&pb, &gt, &params);
            let fd = fd_grad(&pb, &gt, &params);
            let gnorm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = gnorm.max(1e-3);
            for i in 0..4 {
                let rel = (grad[i] - fd[i]).abs() / scale;
                max_rel = max_rel.max(rel);
            }
            checked += 1;
        }
        let pass = max_rel < 1e-4;
        ok &= pass;
        text.push_str(&format!(
            "alpha {a:.2} trials {trials} max_rel_err {max_rel:.3e} {}\n",
            if pass { "PASS" } else { "FAIL" }
        ));
    }
    if sweep_offset {
        let params = HybridLossParams::new(c_norm, alphas[0])?;
        text.push_str("offset loss grad_cx grad_norm\n");
        let gt = BBox::new(0.0, 0.0, 2.0, 2.0)?;
        for step in 0..=10 {
            let dx = step as f64; // boxes disjoint once dx >= 2
            let pb = BBox::new(dx, 0.0, 2.0, 2.0)?;
            let (loss, grad) = hybrid_loss(&pb, &gt, &params);
            let gnorm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            text.push_str(&format!("{dx:.1} {loss:.6} {:.6e} {gnorm:.6e}\n", grad[0]));
        }
    }
    emit(cli, manifest, "gradcheck.txt", &text)?;
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(
        rng.gen_range(-10.0..10.0),
        rng.gen_range(-10.0..10.0),
        rng.gen_range(0.5..8.0),
        rng.gen_range(0.5..8.0),
    )
    .expect("positive sizes by construction")
}

fn fd_grad(pb: &BBox, gt: &BBox, params: &HybridLossParams) -> [f64; 4] {
    let eps = 1e-6;
    let mut out = [0.0; 4];
    for i in 0..4 {
        let mut lo = *pb;
        let mut hi = *pb;
        let (fl, fh) = match i {
            0 => (&mut lo.cx, &mut hi.cx),
            1 => (&mut lo.cy, &mut hi.cy),
            2 => (&mut lo.w, &mut hi.w),
            _ => (&mut lo.h, &mut hi.h),
        };
        *fl -= eps;
        *fh += eps;
        let (ll, _) = hybrid_loss(&lo, gt, params);
        let (lh, _) = hybrid_loss(&hi, gt, params);
        out[i] = (lh - ll) / (2.0 * eps);
    }
    out
}

fn cmd_eval(
    cli: &Cli,
    manifest: &mut Manifest,
    detections: &Path,
    ground_truths: &Path,
) -> Result<ExitCode, Error> {
    manifest.field("subcommand", "eval");
    manifest.field("detections", detections.display());
    manifest.field("ground_truths", ground_truths.display());
    let dets = parse_detections(&fs::read_to_string(detections).map_err(|e| {
        Error::Usage(format!("cannot read {}: {e}", detections.display()))
    })?)?;
    let gts = parse_ground_truths(&fs::read_to_string(ground_truths).map_err(|e| {
        Error::Usage(format!("cannot read {}: {e}", ground_truths.display()))
    })?)?;
    let result = evaluate(&dets, &gts)?;
    emit(cli, manifest, "eval.txt", &result.render())?;
    Ok(ExitCode::SUCCESS)
}

//! Box losses: IoU, squared 2-Wasserstein distance, normalized Wasserstein
//! distance (NWD) and the hybrid objective, with analytic gradients with
//! respect to the predicted box.
//!
//! Boxes are modeled as 2-D Gaussians with mean (cx, cy) and diagonal
//! covariance diag(w^2/4, h^2/4), which gives the closed form
//! W2^2 = dcx^2 + dcy^2 + (dw/2)^2 + (dh/2)^2.

use crate::error::{Error, Result};

/// Axis-aligned box in center-size parameterization, absolute pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::config(format!(
                "degenerate box: w={w}, h={h} (both must be > 0)"
            )));
        }
        Ok(BBox { cx, cy, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn x1(&self) -> f64 {
        self.cx - 0.5 * self.w
    }
    pub fn y1(&self) -> f64 {
        self.cy - 0.5 * self.h
    }
    pub fn x2(&self) -> f64 {
        self.cx + 0.5 * self.w
    }
    pub fn y2(&self) -> f64 {
        self.cy + 0.5 * self.h
    }
}

/// Hybrid loss parameters: the Wasserstein normalization constant and the
/// mixing weight of the IoU term (1 = pure IoU, 0 = pure NWD).
#[derive(Debug, Clone, Copy)]
pub struct HybridLossParams {
    pub c_norm: f64,
    pub iou_ratio: f64,
}

impl HybridLossParams {
    pub fn new(c_norm: f64, iou_ratio: f64) -> Result<Self> {
        if !(c_norm > 0.0) {
            return Err(Error::config(format!("C must be > 0, got {c_norm}")));
        }
        if !(0.0..=1.0).contains(&iou_ratio) {
            return Err(Error::config(format!(
                "iou_ratio must be in [0, 1], got {iou_ratio}"
            )));
        }
        Ok(HybridLossParams { c_norm, iou_ratio })
    }
}

impl Default for HybridLossParams {
    fn default() -> Self {
        HybridLossParams {
            c_norm: 0.5,
            iou_ratio: 0.5,
        }
    }
}

/// Intersection-over-union of two axis-aligned boxes; 0 when disjoint.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// IoU and its gradient with respect to (a.cx, a.cy, a.w, a.h). The gradient
/// is defined as 0 on the open set where the boxes are disjoint.
pub fn iou_grad(a: &BBox, b: &BBox) -> (f64, [f64; 4]) {
    let iw = a.x2().min(b.x2()) - a.x1().max(b.x1());
    let ih = a.y2().min(b.y2()) - a.y1().max(b.y1());
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let v = inter / union;

    // subgradients of the interval endpoints w.r.t. a
    let right_active = if a.x2() < b.x2() { 1.0 } else { 0.0 }; // d min / d a.x2
    let left_active = if a.x1() > b.x1() { 1.0 } else { 0.0 }; // d max / d a.x1
    let top_active = if a.y1() > b.y1() { 1.0 } else { 0.0 };
    let bottom_active = if a.y2() < b.y2() { 1.0 } else { 0.0 };

    let diw = [
        right_active - left_active,              // d iw / d cx
        0.0,                                     // d iw / d cy
        0.5 * right_active + 0.5 * left_active,  // d iw / d w
        0.0,
    ];
    let dih = [
        0.0,
        bottom_active - top_active,
        0.0,
        0.5 * bottom_active + 0.5 * top_active,
    ];
    let da = [0.0, 0.0, a.h, a.w]; // d area(a) / d params

    let mut grad = [0.0; 4];
    for i in 0..4 {
        let dinter = ih * diw[i] + iw * dih[i];
        // d(inter/union) with d union = d area(a) - d inter
        grad[i] = (dinter * union - inter * (da[i] - dinter)) / (union * union);
    }
    (v, grad)
}

/// Squared 2-Wasserstein distance between the Gaussians of two boxes.
pub fn wasserstein_sq(a: &BBox, b: &BBox) -> f64 {
    let dcx = a.cx - b.cx;
    let dcy = a.cy - b.cy;
    let dw = 0.5 * (a.w - b.w);
    let dh = 0.5 * (a.h - b.h);
    dcx * dcx + dcy * dcy + dw * dw + dh * dh
}

fn wasserstein_sq_grad(a: &BBox, b: &BBox) -> [f64; 4] {
    [
        2.0 * (a.cx - b.cx),
        2.0 * (a.cy - b.cy),
        0.5 * (a.w - b.w),
        0.5 * (a.h - b.h),
    ]
}

/// Normalized Wasserstein distance: exp(-sqrt(W2^2) / C), in (0, 1].
pub fn nwd(a: &BBox, b: &BBox, c_norm: f64) -> f64 {
    (-wasserstein_sq(a, b).sqrt() / c_norm).exp()
}

/// NWD and its gradient with respect to the predicted box `a`. The gradient
/// is singular at identical boxes (W2 = 0); it is returned as zero there.
pub fn nwd_grad(a: &BBox, b: &BBox, c_norm: f64) -> (f64, [f64; 4]) {
    let w2 = wasserstein_sq(a, b);
    let d = w2.sqrt();
    let v = (-d / c_norm).exp();
    if d == 0.0 {
        return (v, [0.0; 4]);
    }
    let dw2 = wasserstein_sq_grad(a, b);
    // d/dp exp(-sqrt(w2)/C) = v * (-1 / (2 C sqrt(w2))) * d w2/dp
    let scale = -v / (2.0 * c_norm * d);
    (v, [
        scale * dw2[0],
        scale * dw2[1],
        scale * dw2[2],
        scale * dw2[3],
    ])
}

/// Hybrid objective (1-a)(1-NWD) + a(1-IoU) and its analytic gradient with
/// respect to (a.cx, a.cy, a.w, a.h).
pub fn hybrid_loss(a: &BBox, b: &BBox, p: &HybridLossParams) -> (f64, [f64; 4]) {
    let (nwd_v, nwd_g) = nwd_grad(a, b, p.c_norm);
    let (iou_v, iou_g) = iou_grad(a, b);
    let alpha = p.iou_ratio;
    let loss = (1.0 - alpha) * (1.0 - nwd_v) + alpha * (1.0 - iou_v);
    let mut grad = [0.0; 4];
    for i in 0..4 {
        grad[i] = -(1.0 - alpha) * nwd_g[i] - alpha * iou_g[i];
    }
    (loss, grad)
}

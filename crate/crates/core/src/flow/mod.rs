//! Appearance flow: bilinear warps driven by dense fields of absolute source
//! coordinates, ground-truth flows for known transforms, and the
//! keypoint-to-pixel flow distillation loss.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::tensor::graph::neighbours;
use crate::tensor::{Graph, Tensor, Var};

mod shapes;

pub use shapes::{
    render_shape, student_input, teacher_input, train_flow_predictors, viewpoint_transform, FlowMetrics, FlowNet, FlowTrainConfig, ShapeExample,
    ShapeSet, TrainedFlow,
};

/// `H x W x C` image with values in `[0, 1]`, row-major with interleaved
/// channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(invalid("image extents must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch {
                op: "image",
                left: vec![height, width, channels],
                right: vec![data.len()],
            });
        }
        if let Some(&v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::NotAProbability { what: "pixel", value: v });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// `[1, H, W, C]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width, self.channels], self.data.clone()).expect("extents checked")
    }

    /// Inverse of [`to_tensor`](Self::to_tensor); values are clamped into
    /// `[0, 1]` to absorb rounding.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (h, w, c) = match s {
            [1, h, w, c] | [h, w, c] => (*h, *w, *c),
            _ => return Err(invalid("expected a [1, H, W, C] or [H, W, C] tensor")),
        };
        if !t.all_finite() {
            return Err(Error::NonFinite { op: "image", index: 0 });
        }
        Self::new(h, w, c, t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Smallest and largest pixel value.
    pub fn range(&self) -> (f64, f64) {
        self.min_max()
    }
}

/// Per target pixel, the absolute source coordinate `(F_x, F_y)` to sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FlowField {
    /// `data` interleaves `(F_x, F_y)` per pixel in row-major order.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("flow extents must be positive"));
        }
        if data.len() != height * width * 2 {
            return Err(Error::ShapeMismatch {
                op: "flow",
                left: vec![height, width, 2],
                right: vec![data.len()],
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "flow", index });
        }
        Ok(Self { height, width, data })
    }

    /// `F_x = j`, `F_y = i`.
    pub fn identity(height: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(height * width * 2);
        for i in 0..height {
            for j in 0..width {
                data.push(j as f64);
                data.push(i as f64);
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `(F_x, F_y)` at target pixel `(i, j)`.
    pub fn at(&self, i: usize, j: usize) -> (f64, f64) {
        let p = 2 * (i * self.width + j);
        (self.data[p], self.data[p + 1])
    }

    /// `[1, H, W, 2]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width, 2], self.data.clone()).expect("extents checked")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [1, h, w, 2] | [h, w, 2] => Self::new(*h, *w, t.data().to_vec()),
            s => Err(invalid(alloc::format!("expected a [1, H, W, 2] flow tensor, got {s:?}"))),
        }
    }
}

/// `K` image-space keypoints with visibility flags.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    points: Vec<(f64, f64)>,
    visible: Vec<bool>,
}

impl KeypointSet {
    pub fn new(points: Vec<(f64, f64)>, visible: Vec<bool>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty { what: "keypoints" });
        }
        if points.len() != visible.len() {
            return Err(invalid("one visibility flag per keypoint"));
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::NonFinite { op: "keypoints", index: 0 });
        }
        Ok(Self { points, visible })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn visible(&self) -> &[bool] {
        &self.visible
    }
}

/// One-hot elevation bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewpointCode {
    bins: usize,
    active: usize,
}

impl ViewpointCode {
    /// Elevation range covered by the bins, in degrees.
    pub const MAX_ELEVATION: f64 = 30.0;

    pub fn new(bins: usize, active: usize) -> Result<Self> {
        if bins == 0 || active >= bins {
            return Err(invalid("viewpoint bin out of range"));
        }
        Ok(Self { bins, active })
    }

    /// Nearest bin to an elevation in `[0, 30]` degrees.
    pub fn from_elevation(bins: usize, degrees: f64) -> Result<Self> {
        if !(0.0..=Self::MAX_ELEVATION).contains(&degrees) || bins == 0 {
            return Err(invalid("elevation outside [0, 30] degrees"));
        }
        let idx = if bins == 1 {
            0
        } else {
            libm::round(degrees / Self::MAX_ELEVATION * (bins - 1) as f64) as usize
        };
        Self::new(bins, idx)
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn active(&self) -> usize {
        self.active
    }

    /// Elevation at the bin centre.
    pub fn elevation(&self) -> f64 {
        if self.bins == 1 {
            0.0
        } else {
            Self::MAX_ELEVATION * self.active as f64 / (self.bins - 1) as f64
        }
    }

    pub fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.bins];
        v[self.active] = 1.0;
        v
    }
}

/// Plane transform `p' = A p + t` on `(x, y)` image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2 {
    pub matrix: [[f64; 2]; 2],
    pub offset: [f64; 2],
}

impl Affine2 {
    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0], [0.0, 1.0]],
            offset: [0.0, 0.0],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            offset: [dx, dy],
            ..Self::identity()
        }
    }

    /// Counter-clockwise in `(x, y)` coordinates about `(cx, cy)`.
    pub fn rotation_about(degrees: f64, cx: f64, cy: f64) -> Self {
        let (s, c) = libm::sincos(degrees.to_radians());
        Self::about([[c, -s], [s, c]], cx, cy)
    }

    pub fn scale_about(sx: f64, sy: f64, cx: f64, cy: f64) -> Self {
        Self::about([[sx, 0.0], [0.0, sy]], cx, cy)
    }

    fn about(m: [[f64; 2]; 2], cx: f64, cy: f64) -> Self {
        Self {
            matrix: m,
            offset: [cx - m[0][0] * cx - m[0][1] * cy, cy - m[1][0] * cx - m[1][1] * cy],
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.matrix;
        (m[0][0] * x + m[0][1] * y + self.offset[0], m[1][0] * x + m[1][1] * y + self.offset[1])
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &Self) -> Self {
        let (a, b) = (&next.matrix, &self.matrix);
        let mut m = [[0.0; 2]; 2];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
        }
        let (ox, oy) = next.apply(self.offset[0], self.offset[1]);
        Self { matrix: m, offset: [ox, oy] }
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        if !(det.abs() > 1e-12) || !det.is_finite() {
            return Err(Error::NonInvertible { det });
        }
        let m = &self.matrix;
        let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
        let t = self.offset;
        Ok(Self {
            matrix: inv,
            offset: [-(inv[0][0] * t[0] + inv[0][1] * t[1]), -(inv[1][0] * t[0] + inv[1][1] * t[1])],
        })
    }
}

fn check_spatial(op: &'static str, img: &Image, flow: &FlowField) -> Result<()> {
    if img.height != flow.height || img.width != flow.width {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![img.height, img.width],
            right: vec![flow.height, flow.width],
        });
    }
    Ok(())
}

/// Resamples `source` at the coordinates in `flow`; neighbours outside the
/// image contribute zero. Agrees exactly with
/// [`Graph::bilinear_warp`].
pub fn bilinear_warp(source: &Image, flow: &FlowField) -> Result<Image> {
    check_spatial("bilinear_warp", source, flow)?;
    let (h, w, c) = (source.height, source.width, source.channels);
    let mut out = vec![0.0; h * w * c];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let dst = &mut out[p * c..(p + 1) * c];
            for tap in neighbours(flow.data[2 * p], flow.data[2 * p + 1], h, w).iter().flatten() {
                if tap.weight == 0.0 {
                    continue;
                }
                let src = (tap.y * w + tap.x) * c;
                for (ch, o) in dst.iter_mut().enumerate() {
                    *o += source.data[src + ch] * tap.weight;
                }
            }
        }
    }
    // weights are a partition of unity or less, so only rounding can leave [0, 1]
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Image::new(h, w, c, out)
}

/// Exact source coordinate of every target pixel under `transform`, which
/// maps source positions to target positions.
pub fn synthetic_flow(transform: &Affine2, height: usize, width: usize) -> Result<FlowField> {
    if height == 0 || width == 0 {
        return Err(invalid("flow extents must be positive"));
    }
    let inv = transform.inverse()?;
    let mut data = Vec::with_capacity(height * width * 2);
    for i in 0..height {
        for j in 0..width {
            let (x, y) = inv.apply(j as f64, i as f64);
            data.push(x);
            data.push(y);
        }
    }
    FlowField::new(height, width, data)
}

/// Flow equivalent to warping by `first` and then by `second`: `first`
/// resampled at the coordinates of `second`. Exact wherever `first` is
/// affine over the sampled neighbourhood.
pub fn compose_flows(first: &FlowField, second: &FlowField) -> Result<FlowField> {
    if first.height != second.height || first.width != second.width {
        return Err(Error::ShapeMismatch {
            op: "compose_flows",
            left: vec![first.height, first.width],
            right: vec![second.height, second.width],
        });
    }
    let mut g = Graph::new();
    let a = g.constant(&first.to_tensor());
    let b = g.constant(&second.to_tensor());
    let out = g.bilinear_warp(a, b)?;
    FlowField::new(first.height, first.width, g.data(out).to_vec())
}

/// Mean absolute difference between two images.
pub fn l1_recon_error(predicted: &Image, target: &Image) -> Result<f64> {
    if (predicted.height, predicted.width, predicted.channels) != (target.height, target.width, target.channels) {
        return Err(Error::ShapeMismatch {
            op: "l1_recon_error",
            left: vec![predicted.height, predicted.width, predicted.channels],
            right: vec![target.height, target.width, target.channels],
        });
    }
    let total: f64 = predicted.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / predicted.data.len() as f64)
}

/// Components of the distillation objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillLoss {
    pub total: f64,
    pub flow: f64,
    pub image: f64,
}

/// Graph form of [`distill_loss`] on batched `[B, H, W, 2]` flows and
/// `[B, H, W, C]` images. Returns `(L, L_flow, L_image)`.
pub fn distill_loss_graph(g: &mut Graph, student_flow: Var, teacher_flow: Var, source: Var, target: Var, lambda: f64) -> Result<(Var, Var, Var)> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(invalid("lambda must be finite and nonnegative"));
    }
    let diff = g.sub(student_flow, teacher_flow)?;
    let diff = g.abs(diff)?;
    let l_flow = g.mean_all(diff)?;
    let warped = g.bilinear_warp(source, student_flow)?;
    let err = g.sub(warped, target)?;
    let err = g.abs(err)?;
    let l_image = g.mean_all(err)?;
    let weighted = g.scale(l_image, lambda)?;
    let total = g.add(l_flow, weighted)?;
    Ok((total, l_flow, l_image))
}

/// `L = |F_kpt - F_pix|_1 + λ |warp(I_s, F_kpt) - I_t|_1`, both means.
pub fn distill_loss(keypoint_flow: &FlowField, pixel_flow: &FlowField, source: &Image, target: &Image, lambda: f64) -> Result<DistillLoss> {
    check_spatial("distill_loss", source, keypoint_flow)?;
    check_spatial("distill_loss", source, pixel_flow)?;
    check_spatial("distill_loss", target, keypoint_flow)?;
    if source.channels != target.channels {
        return Err(Error::ShapeMismatch {
            op: "distill_loss",
            left: vec![source.channels],
            right: vec![target.channels],
        });
    }
    let mut g = Graph::new();
    let fk = g.constant(&keypoint_flow.to_tensor());
    let fp = g.constant(&pixel_flow.to_tensor());
    let s = g.constant(&source.to_tensor());
    let t = g.constant(&target.to_tensor());
    let (l, lf, li) = distill_loss_graph(&mut g, fk, fp, s, t, lambda)?;
    Ok(DistillLoss {
        total: g.item(l)?,
        flow: g.item(lf)?,
        image: g.item(li)?,
    })
}

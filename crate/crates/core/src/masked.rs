//! Masked linear layers with learnable per-row thresholds, and the two models
//! built from them: the feature adaptation module (FAM) and the private MLP.
//!
//! A masked layer computes the mean weight magnitude of each output row,
//! `u_i = mean_j |W_ij|`, keeps the row when `u_i >= kappa_i` and zeroes the
//! whole row (weights and bias) otherwise, so `y_i = m_i (W_i x + b_i)`.
//!
//! The hard mask has zero derivative almost everywhere. Thresholds are
//! trained with a straight-through surrogate: inside a window
//! `|u_i - kappa_i| <= mask_window`, `dm/dkappa = -1` and `dm/du = +1`.
//! The surrogate is exactly the derivative of the *anchored relaxation*
//! `m_i(theta) = m_i(theta0) + s_i ((u_i - kappa_i)(theta) - (u_i - kappa_i)(theta0))`,
//! with the window indicator `s_i` frozen at `theta0`. That relaxation agrees
//! with the hard forward at `theta0`, which is what the gradient checks use.

use rand::Rng;
use rand_distr::Uniform;

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Matrix};
use crate::params::{ParamSpec, Parameterized};

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLinear {
    /// `n_out x n_in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub kappa: Vec<f64>,
    pub mask_window: f64,
    /// When false the mask is all ones and `kappa` receives no gradient.
    pub masking: bool,
}

/// Mask values and surrogate slopes for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskState {
    pub values: Vec<f64>,
    pub slope: Vec<f64>,
}

/// Frozen linearization point for the relaxed mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskAnchor {
    hard: Vec<f64>,
    slope: Vec<f64>,
    gap: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    pub mask: MaskState,
    /// Unmasked pre-activation `W x + b`, one row per batch sample.
    pub pre: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub kappa: Vec<f64>,
}

/// `u_i = (1/n_in) sum_j |W_ij|`.
pub fn mean_magnitude(weight: &Matrix) -> Vec<f64> {
    (0..weight.rows)
        .map(|r| weight.row(r).iter().map(|v| v.abs()).sum::<f64>() / weight.cols as f64)
        .collect()
}

/// `m_i = 1` iff `u_i >= kappa_i`.
pub fn compute_mask(u: &[f64], kappa: &[f64]) -> Vec<f64> {
    u.iter()
        .zip(kappa)
        .map(|(u, k)| if u >= k { 1.0 } else { 0.0 })
        .collect()
}

impl MaskedLinear {
    /// Uniform `(-1/sqrt(n_in), 1/sqrt(n_in))` weights and biases, zero thresholds.
    pub fn init<R: Rng>(n_in: usize, n_out: usize, mask_window: f64, rng: &mut R) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        let dist = Uniform::new(-bound, bound).expect("valid bound");
        let weight = Matrix {
            rows: n_out,
            cols: n_in,
            data: (0..n_in * n_out).map(|_| rng.sample(dist)).collect(),
        };
        let bias = (0..n_out).map(|_| rng.sample(dist)).collect();
        Self {
            weight,
            bias,
            kappa: vec![0.0; n_out],
            mask_window,
            masking: true,
        }
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(n_out, n_in),
            bias: vec![0.0; n_out],
            kappa: vec![0.0; n_out],
            mask_window: 1.0,
            masking: true,
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.cols
    }

    pub fn n_out(&self) -> usize {
        self.weight.rows
    }

    fn gap(&self) -> Vec<f64> {
        mean_magnitude(&self.weight)
            .iter()
            .zip(&self.kappa)
            .map(|(u, k)| u - k)
            .collect()
    }

    pub fn hard_mask(&self) -> MaskState {
        let n = self.n_out();
        if !self.masking {
            return MaskState {
                values: vec![1.0; n],
                slope: vec![0.0; n],
            };
        }
        let u = mean_magnitude(&self.weight);
        let values = compute_mask(&u, &self.kappa);
        let slope = u
            .iter()
            .zip(&self.kappa)
            .map(|(u, k)| {
                if (u - k).abs() <= self.mask_window {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        MaskState { values, slope }
    }

    pub fn anchor(&self) -> MaskAnchor {
        let hard = self.hard_mask();
        MaskAnchor {
            hard: hard.values,
            slope: hard.slope,
            gap: self.gap(),
        }
    }

    fn mask_state(&self, anchor: Option<&MaskAnchor>) -> MaskState {
        match anchor {
            None => self.hard_mask(),
            Some(a) => {
                let values = self
                    .gap()
                    .iter()
                    .enumerate()
                    .map(|(i, g)| a.hard[i] + a.slope[i] * (g - a.gap[i]))
                    .collect();
                MaskState {
                    values,
                    slope: a.slope.clone(),
                }
            }
        }
    }

    /// Batched forward; `x` is `B x n_in`.
    pub fn forward(&self, x: &Matrix, anchor: Option<&MaskAnchor>) -> Result<(Matrix, LayerCache)> {
        if x.cols != self.n_in() {
            return Err(Error::mismatch(self.n_in(), x.cols, "masked layer input"));
        }
        let mask = self.mask_state(anchor);
        let mut pre = Matrix::zeros(x.rows, self.n_out());
        let mut y = Matrix::zeros(x.rows, self.n_out());
        for s in 0..x.rows {
            let xs = x.row(s);
            for i in 0..self.n_out() {
                let p = crate::numerics::dot(self.weight.row(i), xs) + self.bias[i];
                pre.set(s, i, p);
                y.set(s, i, mask.values[i] * p);
            }
        }
        Ok((y, LayerCache { mask, pre }))
    }

    /// Batched backward. Returns parameter gradients and the input gradient.
    pub fn backward(
        &self,
        x: &Matrix,
        cache: &LayerCache,
        grad_y: &Matrix,
    ) -> (LayerGrads, Matrix) {
        let (n_in, n_out) = (self.n_in(), self.n_out());
        let m = &cache.mask;
        let mut gw = Matrix::zeros(n_out, n_in);
        let mut gb = vec![0.0; n_out];
        let mut gk = vec![0.0; n_out];
        let mut gx = Matrix::zeros(x.rows, n_in);
        // d/dm_i accumulated over the batch.
        let mut gmask = vec![0.0; n_out];
        for s in 0..x.rows {
            let xs = x.row(s);
            for i in 0..n_out {
                let g = grad_y.get(s, i);
                if g == 0.0 {
                    continue;
                }
                gmask[i] += g * cache.pre.get(s, i);
                let gm = g * m.values[i];
                if gm != 0.0 {
                    gb[i] += gm;
                    let w_row = self.weight.row(i);
                    let gw_row = gw.row_mut(i);
                    for j in 0..n_in {
                        gw_row[j] += gm * xs[j];
                    }
                    let gx_row = gx.row_mut(s);
                    for j in 0..n_in {
                        gx_row[j] += gm * w_row[j];
                    }
                }
            }
        }
        for i in 0..n_out {
            if m.slope[i] == 0.0 || gmask[i] == 0.0 {
                continue;
            }
            let through = gmask[i] * m.slope[i];
            gk[i] = -through;
            let scale = through / n_in as f64;
            let w_row = self.weight.row(i);
            let gw_row = gw.row_mut(i);
            for j in 0..n_in {
                gw_row[j] += scale * sign(w_row[j]);
            }
        }
        (
            LayerGrads {
                weight: gw,
                bias: gb,
                kappa: gk,
            },
            gx,
        )
    }

    /// Single-vector hard-mask forward.
    pub fn masked_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.forward(&xm, None)?.0.data)
    }

    /// Single-vector backward under the hard mask with surrogate threshold gradients.
    pub fn masked_backward(&self, x: &[f64], upstream: &[f64]) -> Result<(LayerGrads, Vec<f64>)> {
        if upstream.len() != self.n_out() {
            return Err(Error::mismatch(
                self.n_out(),
                upstream.len(),
                "upstream gradient",
            ));
        }
        let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
        let (_, cache) = self.forward(&xm, None)?;
        let gy = Matrix::from_vec(1, upstream.len(), upstream.to_vec())?;
        let (g, gx) = self.backward(&xm, &cache, &gy);
        Ok((g, gx.data))
    }

    fn specs(&self, prefix: &str) -> Vec<ParamSpec> {
        vec![
            ParamSpec {
                name: format!("{prefix}.weight"),
                shape: vec![self.n_out(), self.n_in()],
                decay: true,
            },
            ParamSpec {
                name: format!("{prefix}.bias"),
                shape: vec![self.n_out()],
                decay: false,
            },
            ParamSpec {
                name: format!("{prefix}.kappa"),
                shape: vec![self.n_out()],
                decay: false,
            },
        ]
    }

    fn slices(&self) -> [&[f64]; 3] {
        [&self.weight.data, &self.bias, &self.kappa]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 3] {
        [&mut self.weight.data, &mut self.bias, &mut self.kappa]
    }
}

impl LayerGrads {
    fn into_vecs(self) -> [Vec<f64>; 3] {
        [self.weight.data, self.bias, self.kappa]
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Feature adaptation module: `MaskedLinear(D,D) -> ReLU -> MaskedLinear(D,D) -> sigmoid`.
///
/// The output is a gate in `[0,1]^D` applied elementwise to the image feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FamModel {
    pub layer1: MaskedLinear,
    pub layer2: MaskedLinear,
}

#[derive(Debug, Clone)]
pub struct FamCache {
    l1: LayerCache,
    hidden: Matrix,
    l2: LayerCache,
    pub gate: Matrix,
}

impl FamModel {
    pub fn init<R: Rng>(dim: usize, mask_window: f64, masking: bool, rng: &mut R) -> Self {
        let mut layer1 = MaskedLinear::init(dim, dim, mask_window, rng);
        let mut layer2 = MaskedLinear::init(dim, dim, mask_window, rng);
        layer1.masking = masking;
        layer2.masking = masking;
        Self { layer1, layer2 }
    }

    /// A FAM whose gate is constantly 1 (`open`) or 0.
    ///
    /// `sigmoid(+-1000)` is exactly 1 or 0 in `f64`.
    pub fn constant_gate(dim: usize, open: bool) -> Self {
        let layer1 = MaskedLinear::zeros(dim, dim);
        let mut layer2 = MaskedLinear::zeros(dim, dim);
        layer2.bias = vec![if open { 1000.0 } else { -1000.0 }; dim];
        Self { layer1, layer2 }
    }

    pub fn dim(&self) -> usize {
        self.layer1.n_in()
    }

    pub fn anchors(&self) -> Vec<MaskAnchor> {
        vec![self.layer1.anchor(), self.layer2.anchor()]
    }

    /// Masked features `att(I) * I` for a batch of image features.
    pub fn forward(
        &self,
        images: &Matrix,
        anchors: Option<&[MaskAnchor]>,
    ) -> Result<(Matrix, FamCache)> {
        let (a1, a2) = split_anchors(anchors);
        let (z1, l1) = self.layer1.forward(images, a1)?;
        let hidden = Matrix {
            rows: z1.rows,
            cols: z1.cols,
            data: z1.data.iter().map(|&v| relu(v)).collect(),
        };
        let (z2, l2) = self.layer2.forward(&hidden, a2)?;
        let gate = Matrix {
            rows: z2.rows,
            cols: z2.cols,
            data: z2.data.iter().map(|&v| sigmoid(v)).collect(),
        };
        let masked = Matrix {
            rows: images.rows,
            cols: images.cols,
            data: gate
                .data
                .iter()
                .zip(&images.data)
                .map(|(g, x)| g * x)
                .collect(),
        };
        Ok((
            masked,
            FamCache {
                l1,
                hidden,
                l2,
                gate,
            },
        ))
    }

    /// Parameter gradients given the gradient with respect to the masked features.
    pub fn backward(
        &self,
        images: &Matrix,
        cache: &FamCache,
        grad_masked: &Matrix,
    ) -> Vec<Vec<f64>> {
        let gz2 = Matrix {
            rows: images.rows,
            cols: images.cols,
            data: grad_masked
                .data
                .iter()
                .zip(&images.data)
                .zip(&cache.gate.data)
                .map(|((g, x), a)| g * x * a * (1.0 - a))
                .collect(),
        };
        let (g2, gh) = self.layer2.backward(&cache.hidden, &cache.l2, &gz2);
        let mut gz1 = gh;
        for (g, h) in gz1.data.iter_mut().zip(&cache.hidden.data) {
            if *h <= 0.0 {
                *g = 0.0;
            }
        }
        let (g1, _) = self.layer1.backward(images, &cache.l1, &gz1);
        g1.into_vecs().into_iter().chain(g2.into_vecs()).collect()
    }

    /// Single-vector convenience: `att(I) * I`.
    pub fn apply(&self, image: &[f64]) -> Result<Vec<f64>> {
        if image.len() != self.dim() {
            return Err(Error::mismatch(self.dim(), image.len(), "FAM input"));
        }
        let x = Matrix::from_vec(1, image.len(), image.to_vec())?;
        Ok(self.forward(&x, None)?.0.data)
    }
}

impl Parameterized for FamModel {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = self.layer1.specs("layer1");
        v.extend(self.layer2.specs("layer2"));
        v
    }

    fn param_slices(&self) -> Vec<&[f64]> {
        self.layer1
            .slices()
            .into_iter()
            .chain(self.layer2.slices())
            .collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let Self { layer1, layer2 } = self;
        layer1
            .slices_mut()
            .into_iter()
            .chain(layer2.slices_mut())
            .collect()
    }
}

/// Private local classifier: `MaskedLinear(D,H) -> ReLU -> MaskedLinear(H,C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub hidden: MaskedLinear,
    pub output: MaskedLinear,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    l1: LayerCache,
    activ: Matrix,
    l2: LayerCache,
}

impl MlpModel {
    pub fn init<R: Rng>(
        dim: usize,
        hidden: usize,
        classes: usize,
        mask_window: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: MaskedLinear::init(dim, hidden, mask_window, rng),
            output: MaskedLinear::init(hidden, classes, mask_window, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.output.n_out()
    }

    pub fn anchors(&self) -> Vec<MaskAnchor> {
        vec![self.hidden.anchor(), self.output.anchor()]
    }

    /// Logits for a batch of (masked) features.
    pub fn forward(
        &self,
        x: &Matrix,
        anchors: Option<&[MaskAnchor]>,
    ) -> Result<(Matrix, MlpCache)> {
        let (a1, a2) = split_anchors(anchors);
        let (z1, l1) = self.hidden.forward(x, a1)?;
        let activ = Matrix {
            rows: z1.rows,
            cols: z1.cols,
            data: z1.data.iter().map(|&v| relu(v)).collect(),
        };
        let (logits, l2) = self.output.forward(&activ, a2)?;
        Ok((logits, MlpCache { l1, activ, l2 }))
    }

    /// Parameter gradients and the gradient with respect to the input.
    pub fn backward(
        &self,
        x: &Matrix,
        cache: &MlpCache,
        grad_logits: &Matrix,
    ) -> (Vec<Vec<f64>>, Matrix) {
        let (g2, ga) = self.output.backward(&cache.activ, &cache.l2, grad_logits);
        let mut gz1 = ga;
        for (g, a) in gz1.data.iter_mut().zip(&cache.activ.data) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
        let (g1, gx) = self.hidden.backward(x, &cache.l1, &gz1);
        (
            g1.into_vecs().into_iter().chain(g2.into_vecs()).collect(),
            gx,
        )
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.forward(&xm, None)?.0.data)
    }
}

impl Parameterized for MlpModel {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = self.hidden.specs("hidden");
        v.extend(self.output.specs("output"));
        v
    }

    fn param_slices(&self) -> Vec<&[f64]> {
        self.hidden
            .slices()
            .into_iter()
            .chain(self.output.slices())
            .collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let Self { hidden, output } = self;
        hidden
            .slices_mut()
            .into_iter()
            .chain(output.slices_mut())
            .collect()
    }
}

fn split_anchors(anchors: Option<&[MaskAnchor]>) -> (Option<&MaskAnchor>, Option<&MaskAnchor>) {
    match anchors {
        Some([a, b]) => (Some(a), Some(b)),
        _ => (None, None),
    }
}

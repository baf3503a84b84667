//! Boundary generation network: a shared temporal base, the temporal
//! assessment head (start/end probabilities) and the proposal assessment head
//! (dense duration x start confidence maps built through the matching layer).
//!
//! Layer layout:
//!
//! | id | layer                                   | output            |
//! |----|-----------------------------------------|-------------------|
//! | 1  | conv1d base1 x3, ReLU                   | `base1 x T`       |
//! | 2  | conv1d base2 x3, ReLU                   | `base2 x T`       |
//! | 3  | conv1d base3 x3, ReLU                   | `base3 x T`       |
//! | 4  | conv1d 2 x3, sigmoid                    | `2 x T`           |
//! | 5  | matching layer on layer 2               | `base2 x N x D x T` |
//! | 6  | conv3d pam3d x N x1x1, stride N, ReLU   | `pam3d x 1 x D x T` |
//! | 7  | squeeze                                 | `pam3d x D x T`   |
//! | 8  | conv2d pam2d 1x1, ReLU                  | `pam2d x D x T`   |
//! | 9  | conv2d pam2d 3x3 pad 1, ReLU            | `pam2d x D x T`   |
//! | 10 | conv2d 2 1x1, sigmoid                   | `2 x D x T`       |

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{relu_backward_inplace, relu_inplace, sigmoid, Conv1d, Conv2d, ParamId, ParamSet};

/// Sparse linear-interpolation weights lifting a `T`-length sequence to
/// `num_samples` points per proposal cell.
///
/// Cell `(d, t)` with `d` in `1..=D` stands for the proposal `[t, t + d]`
/// and is valid iff `t + d <= T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    pub temporal_scale: usize,
    pub max_duration: usize,
    pub num_samples: usize,
    pub extension_ratio: f64,
    /// Per cell (row-major over `(d - 1, t)`): `(sample k, snippet j, weight)`.
    cells: Vec<Vec<(usize, usize, f64)>>,
}

impl SamplingMask {
    pub fn build(temporal_scale: usize, max_duration: usize, num_samples: usize, extension_ratio: f64) -> Result<Self> {
        if num_samples < 2 {
            return Err(Error::config("model.num_samples", "must be at least 2"));
        }
        if temporal_scale == 0 || max_duration == 0 {
            return Err(Error::config("model.temporal_scale", "sampling grid must be non-empty"));
        }
        let t_max = temporal_scale;
        let last = (t_max - 1) as f64;
        let mut cells = Vec::with_capacity(max_duration * t_max);
        for d in 1..=max_duration {
            for t in 0..t_max {
                let mut entries = Vec::new();
                if t + d <= t_max {
                    let d_f = d as f64;
                    let start = t as f64 - extension_ratio * d_f;
                    let step = (d_f + 2.0 * extension_ratio * d_f) / (num_samples - 1) as f64;
                    for k in 0..num_samples {
                        let pos = (start + k as f64 * step).clamp(0.0, last);
                        let lo = pos.floor();
                        let frac = pos - lo;
                        let lo = lo as usize;
                        if frac == 0.0 || lo + 1 > t_max - 1 {
                            entries.push((k, lo, 1.0));
                        } else {
                            entries.push((k, lo, 1.0 - frac));
                            entries.push((k, lo + 1, frac));
                        }
                    }
                }
                cells.push(entries);
            }
        }
        Ok(SamplingMask {
            temporal_scale,
            max_duration,
            num_samples,
            extension_ratio,
            cells,
        })
    }

    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        Self::build(cfg.temporal_scale, cfg.max_duration, cfg.num_samples, cfg.extension_ratio)
    }

    pub fn is_valid(&self, d: usize, t: usize) -> bool {
        d >= 1 && d <= self.max_duration && t < self.temporal_scale && t + d <= self.temporal_scale
    }

    fn cell_index(&self, d: usize, t: usize) -> usize {
        (d - 1) * self.temporal_scale + t
    }

    /// Non-zero entries `(sample, snippet, weight)` of cell `(d, t)`.
    pub fn cell(&self, d: usize, t: usize) -> &[(usize, usize, f64)] {
        &self.cells[self.cell_index(d, t)]
    }

    /// Dense lookup of `W[j, k, d, t]`.
    pub fn weight(&self, snippet: usize, sample: usize, d: usize, t: usize) -> f64 {
        self.cell(d, t)
            .iter()
            .filter(|&&(k, j, _)| k == sample && j == snippet)
            .map(|&(_, _, w)| w)
            .sum()
    }

    pub fn valid_mask(&self) -> Array2<bool> {
        Array2::from_shape_fn((self.max_duration, self.temporal_scale), |(r, t)| self.is_valid(r + 1, t))
    }
}

/// Network outputs for one video. Maps are `D x T`; row `d - 1` holds duration `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryOutputs {
    pub p_start: Array1<f64>,
    pub p_end: Array1<f64>,
    pub p_cc: Array2<f64>,
    pub p_cr: Array2<f64>,
    pub valid_mask: Array2<bool>,
}

impl BoundaryOutputs {
    pub fn temporal_scale(&self) -> usize {
        self.p_start.len()
    }

    pub fn max_duration(&self) -> usize {
        self.p_cc.nrows()
    }

    pub fn cc(&self, d: usize, t: usize) -> f64 {
        self.p_cc[[d - 1, t]]
    }

    pub fn cr(&self, d: usize, t: usize) -> f64 {
        self.p_cr[[d - 1, t]]
    }
}

/// Gradients of a scalar loss with respect to every [`BoundaryOutputs`] map.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub p_start: Array1<f64>,
    pub p_end: Array1<f64>,
    pub p_cc: Array2<f64>,
    pub p_cr: Array2<f64>,
}

impl OutputGrads {
    pub fn zeros(t: usize, d: usize) -> Self {
        OutputGrads {
            p_start: Array1::zeros(t),
            p_end: Array1::zeros(t),
            p_cc: Array2::zeros((d, t)),
            p_cr: Array2::zeros((d, t)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundaryNet {
    pub base1: Conv1d,
    pub base2: Conv1d,
    pub base3: Conv1d,
    pub tam: Conv1d,
    pub match_weight: ParamId,
    pub match_bias: ParamId,
    pub pam1: Conv2d,
    pub pam2: Conv2d,
    pub pam3: Conv2d,
    pub mask: SamplingMask,
}

/// Intermediate activations kept for the backward pass. Sequence maps are
/// `channels x T`; proposal maps are `(D * T) x channels`.
pub struct NetCache {
    col1: Array2<f64>,
    o1: Array2<f64>,
    col2: Array2<f64>,
    pub o2: Array2<f64>,
    col3: Array2<f64>,
    pub o3: Array2<f64>,
    col4: Array2<f64>,
    tam: Array2<f64>,
    pub o6: Array2<f64>,
    pub o8: Array2<f64>,
    col9: Option<Array2<f64>>,
    pub o9: Array2<f64>,
    op: Array2<f64>,
}

impl BoundaryNet {
    pub fn new<R: Rng>(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let w = &cfg.widths;
        let n = cfg.num_samples;
        let bound = (1.0 / (w.base2 * n) as f64).sqrt();
        Ok(BoundaryNet {
            base1: Conv1d::new(params, "boundary.base1", cfg.feature_dim, w.base1, rng),
            base2: Conv1d::new(params, "boundary.base2", w.base1, w.base2, rng),
            base3: Conv1d::new(params, "boundary.base3", w.base2, w.base3, rng),
            tam: Conv1d::new(params, "boundary.tam", w.base3, 2, rng),
            match_weight: params.add_uniform("boundary.pam_3d.weight", &[w.pam3d, w.base2, n, 1, 1], bound, rng),
            match_bias: params.add_uniform("boundary.pam_3d.bias", &[w.pam3d], bound, rng),
            pam1: Conv2d::new(params, "boundary.pam_2d_1", w.pam3d, w.pam2d, 1, rng),
            pam2: Conv2d::new(params, "boundary.pam_2d_2", w.pam2d, w.pam2d, 3, rng),
            pam3: Conv2d::new(params, "boundary.pam_2d_3", w.pam2d, 2, 1, rng),
            mask: SamplingMask::from_config(cfg)?,
        })
    }

    fn t(&self) -> usize {
        self.mask.temporal_scale
    }

    fn d(&self) -> usize {
        self.mask.max_duration
    }

    /// Layers 1-3 on a `C x T` map. Returns `(O2, O3)`, channel-major.
    pub fn base_forward(&self, p: &ParamSet, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if x.ncols() < 3 {
            return Err(Error::shape("boundary network input length", ">= 3", x.ncols()));
        }
        if x.nrows() != self.base1.input {
            return Err(Error::shape("boundary network input channels", self.base1.input, x.nrows()));
        }
        let (mut o1, _) = self.base1.forward(p, x);
        relu_inplace(&mut o1);
        let (mut o2, _) = self.base2.forward(p, o1.view());
        relu_inplace(&mut o2);
        let (mut o3, _) = self.base3.forward(p, o2.view());
        relu_inplace(&mut o3);
        Ok((o2, o3))
    }

    /// Layer 4: `(P_S, P_E)` from O3.
    pub fn tam_forward(&self, p: &ParamSet, o3: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
        let (z, _) = self.tam.forward(p, o3);
        let probs = z.mapv(sigmoid);
        (probs.row(0).to_owned(), probs.row(1).to_owned())
    }

    /// Layer 5 as an explicit dense tensor `O5[c, k, d - 1, t]`.
    pub fn matching_layer(&self, o2: ArrayView2<f64>) -> Array4<f64> {
        let (ch, t_len) = o2.dim();
        let n = self.mask.num_samples;
        let mut out = Array4::zeros((ch, n, self.d(), t_len));
        for d in 1..=self.d() {
            for t in 0..t_len {
                for &(k, j, w) in self.mask.cell(d, t) {
                    let mut dst = out.slice_mut(s![.., k, d - 1, t]);
                    dst.scaled_add(w, &o2.column(j));
                }
            }
        }
        out
    }

    /// Layers 5-6 fused: returns the pre-activation `(D*T) x pam3d` map and the
    /// per-sample projections `Ut[k*T + j, o] = sum_c w[o, c, k] O2[c, j]`.
    fn match_project(&self, p: &ParamSet, o2: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let n = self.mask.num_samples;
        let t_len = self.t();
        let w = p.get(self.match_weight);
        let out_ch = w.nrows();
        let mut ut = Array2::zeros((n * t_len, out_ch));
        let o2t = o2.t();
        for k in 0..n {
            let wk = w.slice(s![.., k..;n]);
            ndarray::linalg::general_mat_mul(1.0, &o2t, &wk.t(), 0.0, &mut ut.slice_mut(s![k * t_len..(k + 1) * t_len, ..]));
        }
        let bias = p.vector(self.match_bias);
        let cells = self.d() * t_len;
        let mut pre = Array2::zeros((cells, out_ch));
        for (ci, mut row) in pre.rows_mut().into_iter().enumerate() {
            row.assign(&bias);
            let rs = row.as_slice_mut().expect("contiguous");
            for &(k, j, wt) in &self.mask.cells[ci] {
                let src = ut.row(k * t_len + j);
                let src = src.as_slice().expect("contiguous");
                for (a, b) in rs.iter_mut().zip(src) {
                    *a += wt * b;
                }
            }
        }
        (pre, ut)
    }

    /// Layers 5-10 from O2. Returns `(P_cc, P_cr, valid_mask)`.
    pub fn pam_forward(&self, p: &ParamSet, o2: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>, Array2<bool>)> {
        if o2.dim() != (self.base2.output, self.t()) {
            return Err(Error::shape(
                "matching layer input",
                format!("{}x{}", self.base2.output, self.t()),
                format!("{}x{}", o2.nrows(), o2.ncols()),
            ));
        }
        let (o6, o8, _, o9, op) = self.pam_layers(p, o2);
        drop((o6, o8, o9));
        let (cc, cr) = self.split_maps(&op);
        Ok((cc, cr, self.mask.valid_mask()))
    }

    #[allow(clippy::type_complexity)]
    fn pam_layers(
        &self,
        p: &ParamSet,
        o2: ArrayView2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Option<Array2<f64>>, Array2<f64>, Array2<f64>) {
        let (rows, cols) = (self.d(), self.t());
        let (mut o6, _) = self.match_project(p, o2);
        relu_inplace(&mut o6);
        let (mut o8, _) = self.pam1.forward(p, o6.view(), rows, cols);
        relu_inplace(&mut o8);
        let (mut o9, col9) = self.pam2.forward(p, o8.view(), rows, cols);
        relu_inplace(&mut o9);
        let (z, _) = self.pam3.forward(p, o9.view(), rows, cols);
        (o6, o8, col9, o9, z.mapv(sigmoid))
    }

    fn split_maps(&self, op: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let shape = (self.d(), self.t());
        let cc = op.column(0).to_owned().into_shape_with_order(shape).expect("cells");
        let cr = op.column(1).to_owned().into_shape_with_order(shape).expect("cells");
        (cc, cr)
    }

    /// Full forward pass on a `T x C` feature sequence.
    pub fn forward(&self, p: &ParamSet, features: ArrayView2<f64>) -> Result<(BoundaryOutputs, NetCache)> {
        if features.dim() != (self.t(), self.base1.input) {
            return Err(Error::shape(
                "boundary network input",
                format!("{}x{}", self.t(), self.base1.input),
                format!("{}x{}", features.nrows(), features.ncols()),
            ));
        }
        let x = features.t();
        let (mut o1, col1) = self.base1.forward(p, x);
        relu_inplace(&mut o1);
        let (mut o2, col2) = self.base2.forward(p, o1.view());
        relu_inplace(&mut o2);
        let (mut o3, col3) = self.base3.forward(p, o2.view());
        relu_inplace(&mut o3);
        let (z4, col4) = self.tam.forward(p, o3.view());
        let tam = z4.mapv(sigmoid);

        let (o6, o8, col9, o9, op) = self.pam_layers(p, o2.view());
        let (p_cc, p_cr) = self.split_maps(&op);
        let outputs = BoundaryOutputs {
            p_start: tam.row(0).to_owned(),
            p_end: tam.row(1).to_owned(),
            p_cc,
            p_cr,
            valid_mask: self.mask.valid_mask(),
        };
        let cache = NetCache {
            col1,
            o1,
            col2,
            o2,
            col3,
            o3,
            col4,
            tam,
            o6,
            o8,
            col9,
            o9,
            op,
        };
        Ok((outputs, cache))
    }

    /// Accumulates parameter gradients and returns `dL/dF` (`T x C`).
    pub fn backward(&self, p: &ParamSet, g: &mut ParamSet, cache: &NetCache, grads: &OutputGrads) -> Array2<f64> {
        let (rows, cols) = (self.d(), self.t());
        let t_len = cols;

        // layer 4
        let mut dz4 = Array2::zeros((2, t_len));
        dz4.row_mut(0).assign(&grads.p_start);
        dz4.row_mut(1).assign(&grads.p_end);
        dz4.zip_mut_with(&cache.tam, |d, &y| *d *= y * (1.0 - y));
        let mut do3 = self.tam.backward(p, g, &cache.col4, dz4.view());

        // layer 10
        let cells = rows * cols;
        let mut dz10 = Array2::zeros((cells, 2));
        dz10.column_mut(0)
            .assign(&ArrayView1::from(grads.p_cc.as_slice().expect("contiguous")));
        dz10.column_mut(1)
            .assign(&ArrayView1::from(grads.p_cr.as_slice().expect("contiguous")));
        dz10.zip_mut_with(&cache.op, |d, &y| *d *= y * (1.0 - y));
        let mut do9 = self.pam3.backward(p, g, cache.o9.view(), None, dz10.view(), rows, cols);
        relu_backward_inplace(&mut do9, &cache.o9);
        let mut do8 = self
            .pam2
            .backward(p, g, cache.o8.view(), cache.col9.as_ref(), do9.view(), rows, cols);
        relu_backward_inplace(&mut do8, &cache.o8);
        let mut do6 = self.pam1.backward(p, g, cache.o6.view(), None, do8.view(), rows, cols);
        relu_backward_inplace(&mut do6, &cache.o6);

        // layers 5-6
        g.get_mut(self.match_bias)
            .row_mut(0)
            .scaled_add(1.0, &do6.sum_axis(Axis(0)));
        let n = self.mask.num_samples;
        let out_ch = do6.ncols();
        let mut dut = Array2::<f64>::zeros((n * t_len, out_ch));
        for (ci, row) in do6.rows().into_iter().enumerate() {
            let src = row.as_slice().expect("contiguous");
            for &(k, j, wt) in &self.mask.cells[ci] {
                let mut dst = dut.row_mut(k * t_len + j);
                let dst = dst.as_slice_mut().expect("contiguous");
                for (a, b) in dst.iter_mut().zip(src) {
                    *a += wt * b;
                }
            }
        }
        let mut do2t = Array2::<f64>::zeros((t_len, self.base2.output));
        {
            let w = p.get(self.match_weight);
            let gw = g.get_mut(self.match_weight);
            let o2t = cache.o2.t();
            for k in 0..n {
                let dk = dut.slice(s![k * t_len..(k + 1) * t_len, ..]);
                ndarray::linalg::general_mat_mul(1.0, &dk.t(), &o2t, 1.0, &mut gw.slice_mut(s![.., k..;n]));
                ndarray::linalg::general_mat_mul(1.0, &dk, &w.slice(s![.., k..;n]), 1.0, &mut do2t);
            }
        }

        // base
        relu_backward_inplace(&mut do3, &cache.o3);
        let mut do2 = self.base3.backward(p, g, &cache.col3, do3.view());
        do2 += &do2t.t();
        relu_backward_inplace(&mut do2, &cache.o2);
        let mut do1 = self.base2.backward(p, g, &cache.col2, do2.view());
        relu_backward_inplace(&mut do1, &cache.o1);
        let dx = self.base1.backward(p, g, &cache.col1, do1.view());
        dx.reversed_axes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NetWidths;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(t: usize, d: usize, c: usize) -> ModelConfig {
        ModelConfig {
            temporal_scale: t,
            max_duration: d,
            feature_dim: c,
            num_samples: 4,
            heads: 1,
            widths: NetWidths {
                base1: 5,
                base2: 3,
                base3: 4,
                pam3d: 6,
                pam2d: 3,
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn sampling_mask_hand_interpolation() {
        let m = SamplingMask::build(10, 10, 4, 0.0).unwrap();
        // positions 2, 3.333, 4.667, 6
        assert_eq!(m.weight(2, 0, 4, 2), 1.0);
        assert!((m.weight(3, 1, 4, 2) - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.weight(4, 1, 4, 2) - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.weight(4, 2, 4, 2) - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.weight(5, 2, 4, 2) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.weight(6, 3, 4, 2), 1.0);
    }

    #[test]
    fn sampling_columns_partition_unity_and_invalid_cells_empty() {
        let m = SamplingMask::build(12, 12, 8, 0.25).unwrap();
        for d in 1..=12 {
            for t in 0..12 {
                if m.is_valid(d, t) {
                    for k in 0..8 {
                        let s: f64 = (0..12).map(|j| m.weight(j, k, d, t)).sum();
                        assert!((s - 1.0).abs() < 1e-12);
                    }
                } else {
                    assert!(m.cell(d, t).is_empty());
                }
            }
        }
        assert!(SamplingMask::build(4, 4, 1, 0.0).is_err());
    }

    #[test]
    fn output_shapes_and_ranges() {
        let cfg = small_cfg(7, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        let net = BoundaryNet::new(&mut p, &cfg, &mut rng).unwrap();
        let f = Array2::from_shape_fn((7, 6), |_| rng.gen_range(-1.0..1.0));
        let (out, cache) = net.forward(&p, f.view()).unwrap();
        assert_eq!(out.p_start.len(), 7);
        assert_eq!(out.p_cc.dim(), (4, 7));
        assert_eq!(out.p_cr.dim(), (4, 7));
        assert_eq!(cache.o2.dim(), (3, 7));
        assert_eq!(cache.o3.dim(), (4, 7));
        for v in out.p_start.iter().chain(out.p_cc.iter()) {
            assert!(*v > 0.0 && *v < 1.0);
        }
        assert!(!out.valid_mask[[3, 4]]);
        assert!(out.valid_mask[[3, 3]]);
        assert!(net.forward(&p, Array2::zeros((6, 6)).view()).is_err());
    }

    #[test]
    fn zero_net_zero_input() {
        let cfg = small_cfg(5, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamSet::new();
        let net = BoundaryNet::new(&mut p, &cfg, &mut rng).unwrap();
        p.fill(0.0);
        let (out, cache) = net.forward(&p, Array2::zeros((5, 2)).view()).unwrap();
        assert!(cache.o2.iter().all(|&v| v == 0.0));
        assert!(cache.o3.iter().all(|&v| v == 0.0));
        assert!(out.p_start.iter().all(|&v| v == 0.5));
        assert!(out.p_cr.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn constant_sequence_matches_to_constant() {
        let cfg = small_cfg(9, 9, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::new();
        let net = BoundaryNet::new(&mut p, &cfg, &mut rng).unwrap();
        let mut o2 = Array2::zeros((3, 9));
        for c in 0..3 {
            o2.row_mut(c).fill(c as f64 + 0.5);
        }
        let o5 = net.matching_layer(o2.view());
        for d in 1..=9 {
            for t in 0..9 {
                if net.mask.is_valid(d, t) {
                    for c in 0..3 {
                        for k in 0..4 {
                            assert!((o5[[c, k, d - 1, t]] - (c as f64 + 0.5)).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    /// Layers 5-6 through the sparse projection must equal the dense
    /// contraction of the explicit matching tensor with the 3-D kernel.
    #[test]
    fn fused_projection_matches_dense_contraction() {
        let cfg = small_cfg(6, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ParamSet::new();
        let net = BoundaryNet::new(&mut p, &cfg, &mut rng).unwrap();
        let o2 = Array2::from_shape_fn((3, 6), |_| rng.gen_range(-1.0..1.0));
        let (pre, _) = net.match_project(&p, o2.view());
        let o5 = net.matching_layer(o2.view());
        let w = p.get(net.match_weight);
        let b = p.vector(net.match_bias);
        for o in 0..6 {
            for d in 1..=4 {
                for t in 0..6 {
                    let mut acc = b[o];
                    for c in 0..3 {
                        for k in 0..4 {
                            acc += w[[o, c * 4 + k]] * o5[[c, k, d - 1, t]];
                        }
                    }
                    assert!((acc - pre[[(d - 1) * 6 + t, o]]).abs() < 1e-12);
                }
            }
        }
    }
}

//! Parameter storage and the dense building blocks (affine maps, layer norm,
//! convolutions) with hand-written backward passes.
//!
//! All arithmetic is `f64`. Every parameter is a named tensor with a logical
//! shape, stored as a row-major matrix whose first axis is the leading
//! dimension of that shape.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Array2<f64>,
}

/// Ordered, named collection of parameter tensors. Gradients and optimizer
/// moments use the same container.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

fn storage_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [first, rest @ ..] => (*first, rest.iter().product()),
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], value: Array2<f64>) -> ParamId {
        assert_eq!(value.dim(), storage_dims(shape), "storage does not match logical shape");
        let name = name.into();
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            shape: shape.to_vec(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_uniform<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut R) -> ParamId {
        let (r, c) = storage_dims(shape);
        let v = Array2::from_shape_fn((r, c), |_| rng.gen_range(-bound..=bound));
        self.add(name, shape, v)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], c: f64) -> ParamId {
        let dims = storage_dims(shape);
        self.add(name, shape, Array2::from_elem(dims, c))
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    /// Row vector parameters (biases, norms) as a 1-D view.
    pub fn vector(&self, id: ParamId) -> ndarray::ArrayView1<'_, f64> {
        self.entries[id.0].value.row(0)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    value: Array2::zeros(e.value.dim()),
                })
                .collect(),
        }
    }

    pub fn fill(&mut self, v: f64) {
        for e in &mut self.entries {
            e.value.fill(v);
        }
    }

    /// `self += alpha * other`, entry by entry.
    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) {
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.value.scaled_add(alpha, &b.value);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for e in &mut self.entries {
            e.value *= alpha;
        }
    }

    /// Rounds every value to the nearest `f32`, the precision stored in checkpoints.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            e.value.mapv_inplace(|v| v as f32 as f64);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.iter().all(|v| v.is_finite()))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Affine map over rows: `y = x W^T + b` with `W: out x in`, `b: 1 x out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (1.0 / input as f64).sqrt();
        Linear {
            weight: params.add_uniform(format!("{name}.weight"), &[output, input], bound, rng),
            bias: params.add_uniform(format!("{name}.bias"), &[output], bound, rng),
        }
    }

    pub fn forward(&self, p: &ParamSet, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&p.get(self.weight).t());
        y += &p.vector(self.bias);
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, p: &ParamSet, g: &mut ParamSet, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        ndarray::linalg::general_mat_mul(1.0, &dy.t(), &x, 1.0, g.get_mut(self.weight));
        g.get_mut(self.bias).row_mut(0).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        dy.dot(p.get(self.weight))
    }
}

/// Layer normalisation over the last axis of a row matrix.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: params.add_const(format!("{name}.gamma"), &[dim], 1.0),
            beta: params.add_const(format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, p: &ParamSet, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let n = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            *is = 1.0 / (var + LN_EPS).sqrt();
            row *= *is;
        }
        let mut y = &xhat * &p.vector(self.gamma);
        y += &p.vector(self.beta);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &ParamSet, g: &mut ParamSet, cache: &LayerNormCache, dy: ArrayView2<f64>) -> Array2<f64> {
        let n = dy.ncols() as f64;
        g.get_mut(self.gamma)
            .row_mut(0)
            .scaled_add(1.0, &(&dy * &cache.xhat).sum_axis(Axis(0)));
        g.get_mut(self.beta).row_mut(0).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        let dxhat = &dy * &p.vector(self.gamma);
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let dh = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let mean_dh = dh.sum() / n;
            let mean_dh_xh = dh.dot(&xh) / n;
            let is = cache.inv_std[i];
            Zip::from(dx.row_mut(i))
                .and(&dh)
                .and(&xh)
                .for_each(|d, &a, &b| *d = is * (a - mean_dh - b * mean_dh_xh));
        }
        dx
    }
}

/// Row-wise softmax.
pub fn softmax_rows(mut x: Array2<f64>) -> Array2<f64> {
    for mut row in x.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    x
}

/// 1-D convolution over a `channels x T` map with kernel 3, stride 1, zero "same" padding.
#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

pub const KERNEL: usize = 3;

impl Conv1d {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (1.0 / (input * KERNEL) as f64).sqrt();
        Conv1d {
            weight: params.add_uniform(format!("{name}.weight"), &[output, input, KERNEL], bound, rng),
            bias: params.add_uniform(format!("{name}.bias"), &[output], bound, rng),
            input,
            output,
        }
    }

    /// `col[(c*3 + k), t] = x[c, t + k - 1]`, zero outside the sequence.
    pub fn im2col(x: ArrayView2<f64>) -> Array2<f64> {
        let (c, t) = x.dim();
        let mut col = Array2::zeros((c * KERNEL, t));
        for ci in 0..c {
            let src = x.row(ci);
            col.slice_mut(s![ci * KERNEL, 1..]).assign(&src.slice(s![..t - 1]));
            col.row_mut(ci * KERNEL + 1).assign(&src);
            col.slice_mut(s![ci * KERNEL + 2, ..t - 1]).assign(&src.slice(s![1..]));
        }
        col
    }

    pub fn col2im(col: ArrayView2<f64>, channels: usize) -> Array2<f64> {
        let t = col.ncols();
        let mut x = Array2::zeros((channels, t));
        for ci in 0..channels {
            let mut dst = x.row_mut(ci);
            dst.slice_mut(s![..t - 1]).scaled_add(1.0, &col.slice(s![ci * KERNEL, 1..]));
            dst.scaled_add(1.0, &col.row(ci * KERNEL + 1));
            dst.slice_mut(s![1..]).scaled_add(1.0, &col.slice(s![ci * KERNEL + 2, ..t - 1]));
        }
        x
    }

    /// Returns the pre-activation output and the im2col buffer used for backward.
    pub fn forward(&self, p: &ParamSet, x: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let col = Self::im2col(x);
        let mut y = p.get(self.weight).dot(&col);
        let b = p.vector(self.bias);
        for (mut row, &bi) in y.rows_mut().into_iter().zip(b.iter()) {
            row += bi;
        }
        (y, col)
    }

    pub fn backward(&self, p: &ParamSet, g: &mut ParamSet, col: &Array2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        ndarray::linalg::general_mat_mul(1.0, &dy, &col.t(), 1.0, g.get_mut(self.weight));
        g.get_mut(self.bias).row_mut(0).scaled_add(1.0, &dy.sum_axis(Axis(1)));
        let dcol = p.get(self.weight).t().dot(&dy);
        Self::col2im(dcol.view(), self.input)
    }
}

/// 2-D convolution over a `(D x T) x channels` map (positions as rows),
/// kernel `k x k` with padding `k / 2`.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, input: usize, output: usize, kernel: usize, rng: &mut R) -> Self {
        let bound = (1.0 / (input * kernel * kernel) as f64).sqrt();
        Conv2d {
            weight: params.add_uniform(format!("{name}.weight"), &[output, input, kernel, kernel], bound, rng),
            bias: params.add_uniform(format!("{name}.bias"), &[output], bound, rng),
            input,
            output,
            kernel,
        }
    }

    /// `col[pos(h, w), c*k*k + i*k + j] = x[pos(h + i - pad, w + j - pad), c]`.
    fn im2col(&self, x: ArrayView2<f64>, rows: usize, cols: usize) -> Array2<f64> {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let c = x.ncols();
        let mut col = Array2::zeros((rows * cols, c * k * k));
        for h in 0..rows {
            for w in 0..cols {
                let pos = h * cols + w;
                let mut out = col.row_mut(pos);
                for i in 0..k {
                    let hh = h as isize + i as isize - pad;
                    if hh < 0 || hh >= rows as isize {
                        continue;
                    }
                    for j in 0..k {
                        let ww = w as isize + j as isize - pad;
                        if ww < 0 || ww >= cols as isize {
                            continue;
                        }
                        let src = x.row(hh as usize * cols + ww as usize);
                        let off = i * k + j;
                        for ci in 0..c {
                            out[ci * k * k + off] = src[ci];
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: ArrayView2<f64>, rows: usize, cols: usize) -> Array2<f64> {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let c = self.input;
        let mut x = Array2::zeros((rows * cols, c));
        for h in 0..rows {
            for w in 0..cols {
                let src = col.row(h * cols + w);
                for i in 0..k {
                    let hh = h as isize + i as isize - pad;
                    if hh < 0 || hh >= rows as isize {
                        continue;
                    }
                    for j in 0..k {
                        let ww = w as isize + j as isize - pad;
                        if ww < 0 || ww >= cols as isize {
                            continue;
                        }
                        let mut dst = x.row_mut(hh as usize * cols + ww as usize);
                        let off = i * k + j;
                        for ci in 0..c {
                            dst[ci] += src[ci * k * k + off];
                        }
                    }
                }
            }
        }
        x
    }

    /// Returns the pre-activation output and, for kernels larger than 1, the im2col buffer.
    pub fn forward(&self, p: &ParamSet, x: ArrayView2<f64>, rows: usize, cols: usize) -> (Array2<f64>, Option<Array2<f64>>) {
        let (mut y, col) = if self.kernel == 1 {
            (x.dot(&p.get(self.weight).t()), None)
        } else {
            let col = self.im2col(x, rows, cols);
            (col.dot(&p.get(self.weight).t()), Some(col))
        };
        y += &p.vector(self.bias);
        (y, col)
    }

    pub fn backward(
        &self,
        p: &ParamSet,
        g: &mut ParamSet,
        x: ArrayView2<f64>,
        col: Option<&Array2<f64>>,
        dy: ArrayView2<f64>,
        rows: usize,
        cols: usize,
    ) -> Array2<f64> {
        g.get_mut(self.bias).row_mut(0).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        match col {
            None => {
                ndarray::linalg::general_mat_mul(1.0, &dy.t(), &x, 1.0, g.get_mut(self.weight));
                dy.dot(p.get(self.weight))
            }
            Some(col) => {
                ndarray::linalg::general_mat_mul(1.0, &dy.t(), col, 1.0, g.get_mut(self.weight));
                let dcol = dy.dot(p.get(self.weight));
                self.col2im(dcol.view(), rows, cols)
            }
        }
    }
}

pub fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `dy` wherever the forward ReLU output was not positive.
pub fn relu_backward_inplace(dy: &mut Array2<f64>, out: &Array2<f64>) {
    Zip::from(dy).and(out).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of `sum(w .* f(p))` against the analytic backward.
    fn check<F, B>(params: &mut ParamSet, x: &Array2<f64>, weights: &Array2<f64>, f: F, b: B)
    where
        F: Fn(&ParamSet, &Array2<f64>) -> Array2<f64>,
        B: Fn(&ParamSet, &mut ParamSet, &Array2<f64>, &Array2<f64>) -> Array2<f64>,
    {
        let loss = |p: &ParamSet, x: &Array2<f64>| (f(p, x) * weights).sum();
        let mut g = params.zeros_like();
        let dx = b(params, &mut g, x, weights);
        let h = 1e-6;
        for i in 0..params.len() {
            let n = params.entries()[i].value.len();
            for j in 0..n {
                let orig = params.entries()[i].value.as_slice().unwrap()[j];
                params.entries_mut()[i].value.as_slice_mut().unwrap()[j] = orig + h;
                let up = loss(params, x);
                params.entries_mut()[i].value.as_slice_mut().unwrap()[j] = orig - h;
                let dn = loss(params, x);
                params.entries_mut()[i].value.as_slice_mut().unwrap()[j] = orig;
                let num = (up - dn) / (2.0 * h);
                let ana = g.entries()[i].value.as_slice().unwrap()[j];
                assert!((num - ana).abs() < 1e-6, "{} [{j}]: {num} vs {ana}", params.entries()[i].name);
            }
        }
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let orig = x.as_slice().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + h;
            let up = loss(params, &xp);
            xp.as_slice_mut().unwrap()[idx] = orig - h;
            let dn = loss(params, &xp);
            xp.as_slice_mut().unwrap()[idx] = orig;
            let num = (up - dn) / (2.0 * h);
            assert!((num - dx.as_slice().unwrap()[idx]).abs() < 1e-6, "input [{idx}]");
        }
    }

    #[test]
    fn linear_gradients() {
        let mut r = rng();
        let mut p = ParamSet::new();
        let lin = Linear::new(&mut p, "lin", 4, 3, &mut r);
        let x = rand_mat(5, 4, &mut r);
        let w = rand_mat(5, 3, &mut r);
        check(&mut p, &x, &w, |p, x| lin.forward(p, x.view()), |p, g, x, dy| lin.backward(p, g, x.view(), dy.view()));
    }

    #[test]
    fn layer_norm_gradients() {
        let mut r = rng();
        let mut p = ParamSet::new();
        let ln = LayerNorm::new(&mut p, "ln", 6);
        p.get_mut(ln.gamma).mapv_inplace(|_| r.gen_range(0.5..1.5));
        p.get_mut(ln.beta).mapv_inplace(|_| r.gen_range(-0.5..0.5));
        let x = rand_mat(3, 6, &mut r);
        let w = rand_mat(3, 6, &mut r);
        check(
            &mut p,
            &x,
            &w,
            |p, x| ln.forward(p, x.view()).0,
            |p, g, x, dy| {
                let (_, cache) = ln.forward(p, x.view());
                ln.backward(p, g, &cache, dy.view())
            },
        );
    }

    #[test]
    fn conv1d_gradients_and_impulse() {
        let mut r = rng();
        let mut p = ParamSet::new();
        let conv = Conv1d::new(&mut p, "conv", 2, 3, &mut r);
        let x = rand_mat(2, 7, &mut r);
        let w = rand_mat(3, 7, &mut r);
        check(
            &mut p,
            &x,
            &w,
            |p, x| conv.forward(p, x.view()).0,
            |p, g, x, dy| {
                let (_, col) = conv.forward(p, x.view());
                conv.backward(p, g, &col, dy.view())
            },
        );

        // Single channel, taps (1, 2, 3), no bias, impulse at t=2:
        // y[t] = x[t-1] + 2 x[t] + 3 x[t+1] -> y = [0, 3, 2, 1, 0].
        let mut p = ParamSet::new();
        let conv = Conv1d::new(&mut p, "c", 1, 1, &mut r);
        *p.get_mut(conv.weight) = Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        p.get_mut(conv.bias).fill(0.0);
        let x = Array2::from_shape_vec((1, 5), vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let (y, _) = conv.forward(&p, x.view());
        assert_eq!(y.row(0).to_vec(), vec![0.0, 3.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn conv2d_gradients() {
        let mut r = rng();
        for k in [1, 3] {
            let mut p = ParamSet::new();
            let conv = Conv2d::new(&mut p, "conv", 2, 3, k, &mut r);
            let (rows, cols) = (3, 4);
            let x = rand_mat(rows * cols, 2, &mut r);
            let w = rand_mat(rows * cols, 3, &mut r);
            check(
                &mut p,
                &x,
                &w,
                |p, x| conv.forward(p, x.view(), rows, cols).0,
                |p, g, x, dy| {
                    let (_, col) = conv.forward(p, x.view(), rows, cols);
                    conv.backward(p, g, x.view(), col.as_ref(), dy.view(), rows, cols)
                },
            );
        }
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut r = rng();
        let mut p = ParamSet::new();
        let conv = Conv2d::new(&mut p, "conv", 2, 2, 3, &mut r);
        let (rows, cols) = (3, 5);
        let x = rand_mat(rows * cols, 2, &mut r);
        let (y, _) = conv.forward(&p, x.view(), rows, cols);
        let w = p.get(conv.weight);
        let b = p.vector(conv.bias);
        for o in 0..2 {
            for h in 0..rows as isize {
                for wc in 0..cols as isize {
                    let mut acc = b[o];
                    for c in 0..2 {
                        for i in 0..3isize {
                            for j in 0..3isize {
                                let (hh, ww) = (h + i - 1, wc + j - 1);
                                if hh >= 0 && hh < rows as isize && ww >= 0 && ww < cols as isize {
                                    acc += w[[o, c * 9 + (i * 3 + j) as usize]] * x[[(hh * cols as isize + ww) as usize, c]];
                                }
                            }
                        }
                    }
                    assert!((acc - y[[(h * cols as isize + wc) as usize, o]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn round_to_f32_is_idempotent() {
        let mut p = ParamSet::new();
        p.add("a", &[2], Array2::from_shape_vec((1, 2), vec![0.1, 1.0 / 3.0]).unwrap());
        p.round_to_f32();
        let once = p.clone();
        p.round_to_f32();
        assert_eq!(p, once);
        assert_eq!(p.get(ParamId(0))[[0, 0]], 0.1f32 as f64);
    }
}

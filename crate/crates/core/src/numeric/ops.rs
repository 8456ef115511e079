//! Differentiable primitives recorded on the [`Tape`].
//!
//! Each operation validates shapes, computes the forward value, and registers
//! a [`GradFn`] carrying just enough state to push gradients back to its
//! inputs. All loops are plain row-major scans; at the sizes this crate
//! targets that is faster to verify than to optimize.

use crate::error::{Error, Result};
use crate::numeric::tape::{GradFn, Tape, Var};
use crate::numeric::tensor::{for_each_lane, Tensor};

const INV_SQRT_2PI: f64 = 0.3989422804014327;

/// Standard normal CDF via the exact erf form.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// GELU on a plain value: x * Phi(x).
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    x * norm_cdf(x)
}

#[inline]
fn gelu_grad_scalar(x: f64) -> f64 {
    norm_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

// ── plain-tensor forward kernels (shared by tape ops and tests) ──────

/// Softmax along `axis` with max-subtraction.
pub fn softmax_value(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis(x, axis)?;
    let mut out = x.clone();
    let n = x.shape()[axis];
    for_each_lane(x.shape(), axis, |start, stride| {
        let data = out.data_mut();
        let mut max = f64::NEG_INFINITY;
        for t in 0..n {
            max = max.max(data[start + t * stride]);
        }
        let mut sum = 0.0;
        for t in 0..n {
            let e = (data[start + t * stride] - max).exp();
            data[start + t * stride] = e;
            sum += e;
        }
        for t in 0..n {
            data[start + t * stride] /= sum;
        }
    });
    Ok(out)
}

/// L2 normalization along `axis` with the zero-vector guard `max(norm, eps)`.
pub fn l2_normalize_value(x: &Tensor, axis: usize, eps: f64) -> Result<Tensor> {
    check_axis(x, axis)?;
    let mut out = x.clone();
    let n = x.shape()[axis];
    for_each_lane(x.shape(), axis, |start, stride| {
        let data = out.data_mut();
        let mut sq = 0.0;
        for t in 0..n {
            let v = data[start + t * stride];
            sq += v * v;
        }
        let denom = sq.sqrt().max(eps);
        for t in 0..n {
            data[start + t * stride] /= denom;
        }
    });
    Ok(out)
}

/// Rows [from, to) along axis 1 of a rank-3 tensor, as a plain value.
pub fn slice_time_value(x: &Tensor, from: usize, to: usize) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::Dim(format!("slice_time wants rank 3, got {:?}", x.shape())));
    }
    let (b, l, k) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if from >= to || to > l {
        return Err(Error::Dim(format!(
            "slice [{from}, {to}) out of range for length {l}"
        )));
    }
    let sl = to - from;
    let mut out = vec![0.0; b * sl * k];
    for bi in 0..b {
        for t in 0..sl {
            let src = (bi * l + (t + from)) * k;
            let dst = (bi * sl + t) * k;
            out[dst..dst + k].copy_from_slice(&x.data()[src..src + k]);
        }
    }
    Tensor::new(vec![b, sl, k], out)
}

fn check_axis(x: &Tensor, axis: usize) -> Result<()> {
    if axis >= x.rank() {
        return Err(Error::Dim(format!(
            "axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    if x.shape()[axis] == 0 {
        return Err(Error::Dim(format!(
            "axis {axis} is empty in shape {:?}",
            x.shape()
        )));
    }
    Ok(())
}

// ── elementwise / scalar ─────────────────────────────────────────────

struct AddGrad;
impl GradFn for AddGrad {
    fn backward(&self, g: &Tensor, _: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![
            needs[0].then(|| g.clone()),
            needs[1].then(|| g.clone()),
        ]
    }
}

struct SubGrad;
impl GradFn for SubGrad {
    fn backward(&self, g: &Tensor, _: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![
            needs[0].then(|| g.clone()),
            needs[1].then(|| g.map(|v| -v)),
        ]
    }
}

struct MulGrad;
impl GradFn for MulGrad {
    fn backward(&self, g: &Tensor, inp: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![
            needs[0].then(|| g.zip_with(inp[1], |a, b| a * b).unwrap()),
            needs[1].then(|| g.zip_with(inp[0], |a, b| a * b).unwrap()),
        ]
    }
}

struct ScaleGrad {
    factor: f64,
}
impl GradFn for ScaleGrad {
    fn backward(&self, g: &Tensor, _: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| g.map(|v| v * self.factor))]
    }
}

struct PassGrad;
impl GradFn for PassGrad {
    fn backward(&self, g: &Tensor, _: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| g.clone())]
    }
}

struct GeluGrad;
impl GradFn for GeluGrad {
    fn backward(&self, g: &Tensor, inp: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| g.zip_with(inp[0], |gv, x| gv * gelu_grad_scalar(x)).unwrap())]
    }
}

struct ReluGrad;
impl GradFn for ReluGrad {
    fn backward(&self, g: &Tensor, inp: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| g.zip_with(inp[0], |gv, x| if x > 0.0 { gv } else { 0.0 }).unwrap())]
    }
}

// ── reductions ───────────────────────────────────────────────────────

struct SumGrad;
impl GradFn for SumGrad {
    fn backward(&self, g: &Tensor, inp: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let gv = g.data()[0];
        vec![needs[0].then(|| Tensor::filled(inp[0].shape(), gv))]
    }
}

struct MeanGrad;
impl GradFn for MeanGrad {
    fn backward(&self, g: &Tensor, inp: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let gv = g.data()[0] / inp[0].len() as f64;
        vec![needs[0].then(|| Tensor::filled(inp[0].shape(), gv))]
    }
}

// ── lane-wise normalizations ─────────────────────────────────────────

struct SoftmaxGrad {
    axis: usize,
}
impl GradFn for SoftmaxGrad {
    fn backward(&self, g: &Tensor, _: &[&Tensor], out: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        if !needs[0] {
            return vec![None];
        }
        let mut gx = Tensor::zeros(out.shape());
        let n = out.shape()[self.axis];
        for_each_lane(out.shape(), self.axis, |start, stride| {
            let mut dot = 0.0;
            for t in 0..n {
                let i = start + t * stride;
                dot += g.data()[i] * out.data()[i];
            }
            for t in 0..n {
                let i = start + t * stride;
                gx.data_mut()[i] = out.data()[i] * (g.data()[i] - dot);
            }
        });
        vec![Some(gx)]
    }
}

struct LogSoftmaxGrad {
    axis: usize,
}
impl GradFn for LogSoftmaxGrad {
    fn backward(&self, g: &Tensor, _: &[&Tensor], out: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        if !needs[0] {
            return vec![None];
        }
        let mut gx = Tensor::zeros(out.shape());
        let n = out.shape()[self.axis];
        for_each_lane(out.shape(), self.axis, |start, stride| {
            let mut gsum = 0.0;
            for t in 0..n {
                gsum += g.data()[start + t * stride];
            }
            for t in 0..n {
                let i = start + t * stride;
                gx.data_mut()[i] = g.data()[i] - out.data()[i].exp() * gsum;
            }
        });
        vec![Some(gx)]
    }
}

struct L2NormalizeGrad {
    axis: usize,
    eps: f64,
}
impl GradFn for L2NormalizeGrad {
    fn backward(&self, g: &Tensor, inp: &[&Tensor], out: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        if !needs[0] {
            return vec![None];
        }
        let x = inp[0];
        let mut gx = Tensor::zeros(x.shape());
        let n = x.shape()[self.axis];
        for_each_lane(x.shape(), self.axis, |start, stride| {
            let mut sq = 0.0;
            for t in 0..n {
                let v = x.data()[start + t * stride];
                sq += v * v;
            }
            let norm = sq.sqrt();
            if norm >= self.eps {
                // y = x / norm: g/norm minus the radial component.
                let mut dot = 0.0;
                for t in 0..n {
                    let i = start + t * stride;
                    dot += g.data()[i] * out.data()[i];
                }
                for t in 0..n {
                    let i = start + t * stride;
                    gx.data_mut()[i] = (g.data()[i] - out.data()[i] * dot) / norm;
                }
            } else {
                // Clamped branch y = x / eps is linear.
                for t in 0..n {
                    let i = start + t * stride;
                    gx.data_mut()[i] = g.data()[i] / self.eps;
                }
            }
        });
        vec![Some(gx)]
    }
}

// ── linear algebra ──────────────────────────────────────────────────

struct MatMulGrad {
    m: usize,
    k: usize,
    n: usize,
}
impl GradFn for MatMulGrad {
    fn backward(&self, g: &Tensor, inp: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let a = inp[0].data();
        let b = inp[1].data();
        let gd = g.data();
        let ga = needs[0].then(|| {
            let mut out = vec![0.0; m * k];
            for i in 0..m {
                for j in 0..n {
                    let gij = gd[i * n + j];
                    for p in 0..k {
                        out[i * k + p] += gij * b[p * n + j];
                    }
                }
            }
            Tensor::new(vec![m, k], out).unwrap()
        });
        let gb = needs[1].then(|| {
            let mut out = vec![0.0; k * n];
            for i in 0..m {
                for p in 0..k {
                    let aip = a[i * k + p];
                    for j in 0..n {
                        out[p * n + j] += aip * gd[i * n + j];
                    }
                }
            }
            Tensor::new(vec![k, n], out).unwrap()
        });
        vec![ga, gb]
    }
}

struct LinearGrad {
    rows: usize,
    din: usize,
    dout: usize,
}
impl GradFn for LinearGrad {
    fn backward(&self, g: &Tensor, inp: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (r, din, dout) = (self.rows, self.din, self.dout);
        let x = inp[0].data();
        let w = inp[1].data();
        let gd = g.data();
        let gx = needs[0].then(|| {
            let mut out = vec![0.0; r * din];
            for row in 0..r {
                for o in 0..dout {
                    let gro = gd[row * dout + o];
                    for i in 0..din {
                        out[row * din + i] += gro * w[i * dout + o];
                    }
                }
            }
            Tensor::new(inp[0].shape().to_vec(), out).unwrap()
        });
        let gw = needs[1].then(|| {
            let mut out = vec![0.0; din * dout];
            for row in 0..r {
                for i in 0..din {
                    let xri = x[row * din + i];
                    for o in 0..dout {
                        out[i * dout + o] += xri * gd[row * dout + o];
                    }
                }
            }
            Tensor::new(vec![din, dout], out).unwrap()
        });
        let gb = needs[2].then(|| {
            let mut out = vec![0.0; dout];
            for row in 0..r {
                for o in 0..dout {
                    out[o] += gd[row * dout + o];
                }
            }
            Tensor::new(vec![dout], out).unwrap()
        });
        vec![gx, gw, gb]
    }
}

struct WeightNormLinearGrad {
    rows: usize,
    din: usize,
    dout: usize,
    /// Column norms of v, captured at forward time.
    norms: Vec<f64>,
}
impl GradFn for WeightNormLinearGrad {
    fn backward(&self, g: &Tensor, inp: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (r, din, dout) = (self.rows, self.din, self.dout);
        let x = inp[0].data();
        let v = inp[1].data();
        let gain = inp[2].data();
        let gd = g.data();

        // A[i,o] = sum_r x[r,i] g[r,o]: gradient w.r.t. the effective weight.
        let need_vw = needs[1] || needs[2];
        let a = if need_vw {
            let mut a = vec![0.0; din * dout];
            for row in 0..r {
                for i in 0..din {
                    let xri = x[row * din + i];
                    for o in 0..dout {
                        a[i * dout + o] += xri * gd[row * dout + o];
                    }
                }
            }
            a
        } else {
            Vec::new()
        };

        let gx = needs[0].then(|| {
            let mut out = vec![0.0; r * din];
            for row in 0..r {
                for o in 0..dout {
                    let gro = gd[row * dout + o];
                    let go_n = gain[o] / self.norms[o];
                    for i in 0..din {
                        out[row * din + i] += gro * go_n * v[i * dout + o];
                    }
                }
            }
            Tensor::new(inp[0].shape().to_vec(), out).unwrap()
        });

        // av[o] = sum_i A[i,o] v[i,o]
        let av: Vec<f64> = if need_vw {
            (0..dout)
                .map(|o| (0..din).map(|i| a[i * dout + o] * v[i * dout + o]).sum())
                .collect()
        } else {
            Vec::new()
        };

        let gv = needs[1].then(|| {
            let mut out = vec![0.0; din * dout];
            for o in 0..dout {
                let n = self.norms[o];
                let go = gain[o];
                for i in 0..din {
                    out[i * dout + o] =
                        go / n * (a[i * dout + o] - v[i * dout + o] * av[o] / (n * n));
                }
            }
            Tensor::new(vec![din, dout], out).unwrap()
        });

        let ggain = needs[2].then(|| {
            let out: Vec<f64> = (0..dout).map(|o| av[o] / self.norms[o]).collect();
            Tensor::new(vec![dout], out).unwrap()
        });

        let gb = needs[3].then(|| {
            let mut out = vec![0.0; dout];
            for row in 0..r {
                for o in 0..dout {
                    out[o] += gd[row * dout + o];
                }
            }
            Tensor::new(vec![dout], out).unwrap()
        });

        vec![gx, gv, ggain, gb]
    }
}

struct Conv1dCausalGrad {
    dilation: usize,
}
impl GradFn for Conv1dCausalGrad {
    fn backward(&self, g: &Tensor, inp: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let z = inp[0];
        let kernel = inp[1];
        let (batch, cin, len) = (z.shape()[0], z.shape()[1], z.shape()[2]);
        let (cout, _, kw) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
        let d = self.dilation;
        let gd = g.data();

        let gz = needs[0].then(|| {
            let mut out = vec![0.0; z.len()];
            for b in 0..batch {
                for o in 0..cout {
                    for c in 0..cin {
                        for i in 0..kw {
                            let kval = kernel.data()[(o * cin + c) * kw + i];
                            if kval == 0.0 {
                                continue;
                            }
                            for s in (d * i)..len {
                                out[(b * cin + c) * len + (s - d * i)] +=
                                    kval * gd[(b * cout + o) * len + s];
                            }
                        }
                    }
                }
            }
            Tensor::new(z.shape().to_vec(), out).unwrap()
        });

        let gk = needs[1].then(|| {
            let mut out = vec![0.0; kernel.len()];
            for b in 0..batch {
                for o in 0..cout {
                    for c in 0..cin {
                        for i in 0..kw {
                            let mut acc = 0.0;
                            for s in (d * i)..len {
                                acc += gd[(b * cout + o) * len + s]
                                    * z.data()[(b * cin + c) * len + (s - d * i)];
                            }
                            out[(o * cin + c) * kw + i] += acc;
                        }
                    }
                }
            }
            Tensor::new(kernel.shape().to_vec(), out).unwrap()
        });

        vec![gz, gk]
    }
}

// ── shape ops ───────────────────────────────────────────────────────

struct SliceTimeGrad {
    from: usize,
}
impl GradFn for SliceTimeGrad {
    fn backward(&self, g: &Tensor, inp: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        if !needs[0] {
            return vec![None];
        }
        let full = inp[0].shape();
        let (b, l, k) = (full[0], full[1], full[2]);
        let sliced = g.shape()[1];
        let mut out = vec![0.0; b * l * k];
        for bi in 0..b {
            for t in 0..sliced {
                let src = (bi * sliced + t) * k;
                let dst = (bi * l + (t + self.from)) * k;
                out[dst..dst + k].copy_from_slice(&g.data()[src..src + k]);
            }
        }
        vec![Some(Tensor::new(full.to_vec(), out).unwrap())]
    }
}

struct Permute12Grad;
impl GradFn for Permute12Grad {
    fn backward(&self, g: &Tensor, inp: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        if !needs[0] {
            return vec![None];
        }
        vec![Some(permute_12_value(g, inp[0].shape()))]
    }
}

fn permute_12_value(x: &Tensor, out_shape: &[usize]) -> Tensor {
    let (a, b, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0; x.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                out[(i * c + k) * b + j] = x.data()[(i * b + j) * c + k];
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out).unwrap()
}

// ── tape methods ─────────────────────────────────────────────────────

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(self.value(b), |x, y| x + y)?;
        self.push_op(v, vec![a, b], Box::new(AddGrad))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(self.value(b), |x, y| x - y)?;
        self.push_op(v, vec![a, b], Box::new(SubGrad))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        self.push_op(v, vec![a, b], Box::new(MulGrad))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * factor);
        self.push_op(v, vec![a], Box::new(ScaleGrad { factor }))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push_op(v, vec![a], Box::new(PassGrad))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(gelu_scalar);
        self.push_op(v, vec![a], Box::new(GeluGrad))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push_op(v, vec![a], Box::new(ReluGrad))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push_op(v, vec![a], Box::new(SumGrad))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Usage("mean of an empty tensor".into()));
        }
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push_op(v, vec![a], Box::new(MeanGrad))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = softmax_value(self.value(a), axis)?;
        self.push_op(v, vec![a], Box::new(SoftmaxGrad { axis }))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        check_axis(x, axis)?;
        let mut out = x.clone();
        let n = x.shape()[axis];
        for_each_lane(x.shape(), axis, |start, stride| {
            let data = out.data_mut();
            let mut max = f64::NEG_INFINITY;
            for t in 0..n {
                max = max.max(data[start + t * stride]);
            }
            let mut sum = 0.0;
            for t in 0..n {
                sum += (data[start + t * stride] - max).exp();
            }
            let lse = max + sum.ln();
            for t in 0..n {
                data[start + t * stride] -= lse;
            }
        });
        self.push_op(out, vec![a], Box::new(LogSoftmaxGrad { axis }))
    }

    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        const EPS: f64 = 1e-12;
        let v = l2_normalize_value(self.value(a), axis, EPS)?;
        self.push_op(v, vec![a], Box::new(L2NormalizeGrad { axis, eps: EPS }))
    }

    /// 2-D matrix product `a[M,K] x b[K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::Dim(format!(
                "matmul shapes {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av.data()[i * k + p];
                for j in 0..n {
                    out[i * n + j] += aip * bv.data()[p * n + j];
                }
            }
        }
        let v = Tensor::new(vec![m, n], out)?;
        self.push_op(v, vec![a, b], Box::new(MatMulGrad { m, k, n }))
    }

    /// Affine map over the trailing axis: y = x W + b with x: [*, Din].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.rank() != 2 {
            return Err(Error::Dim(format!("weight must be rank 2, got {:?}", wv.shape())));
        }
        let (din, dout) = (wv.shape()[0], wv.shape()[1]);
        let (rows, xcols) = xv.as_matrix_rows()?;
        if xcols != din || bv.shape() != [dout] {
            return Err(Error::Dim(format!(
                "linear: x {:?}, w {:?}, b {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![0.0; rows * dout];
        for r in 0..rows {
            out[r * dout..(r + 1) * dout].copy_from_slice(bv.data());
            for i in 0..din {
                let xri = xv.data()[r * din + i];
                if xri == 0.0 {
                    continue;
                }
                for o in 0..dout {
                    out[r * dout + o] += xri * wv.data()[i * dout + o];
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let v = Tensor::new(shape, out)?;
        self.push_op(v, vec![x, w, b], Box::new(LinearGrad { rows, din, dout }))
    }

    /// Linear layer with weight normalization: the effective weight column
    /// for output o is gain[o] * v[:,o] / ||v[:,o]||.
    pub fn weight_norm_linear(&mut self, x: Var, v: Var, gain: Var, b: Var) -> Result<Var> {
        let (xv, vv, gv, bv) = (self.value(x), self.value(v), self.value(gain), self.value(b));
        if vv.rank() != 2 {
            return Err(Error::Dim(format!("v must be rank 2, got {:?}", vv.shape())));
        }
        let (din, dout) = (vv.shape()[0], vv.shape()[1]);
        let (rows, xcols) = xv.as_matrix_rows()?;
        if xcols != din || gv.shape() != [dout] || bv.shape() != [dout] {
            return Err(Error::Dim(format!(
                "weight_norm_linear: x {:?}, v {:?}, gain {:?}, b {:?}",
                xv.shape(),
                vv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let mut norms = vec![0.0; dout];
        for o in 0..dout {
            let mut sq = 0.0;
            for i in 0..din {
                let val = vv.data()[i * dout + o];
                sq += val * val;
            }
            norms[o] = sq.sqrt();
            if norms[o] == 0.0 {
                return Err(Error::NonFinite(format!(
                    "weight-norm column {o} has zero norm"
                )));
            }
        }
        let mut out = vec![0.0; rows * dout];
        for r in 0..rows {
            for o in 0..dout {
                let mut acc = 0.0;
                for i in 0..din {
                    acc += xv.data()[r * din + i] * vv.data()[i * dout + o];
                }
                out[r * dout + o] = gv.data()[o] * acc / norms[o] + bv.data()[o];
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::new(shape, out)?;
        self.push_op(
            value,
            vec![x, v, gain, b],
            Box::new(WeightNormLinearGrad { rows, din, dout, norms }),
        )
    }

    /// Dilated causal 1-D convolution with implicit left zero-padding:
    /// out[b,o,s] = sum_{c,i} kernel[o,c,i] * z[b,c,s - d*i].
    ///
    /// Output length equals input length; dilation 1 is the ordinary
    /// causal convolution.
    pub fn conv1d_causal(&mut self, z: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let (zv, kv) = (self.value(z), self.value(kernel));
        if dilation == 0 {
            return Err(Error::Param("conv dilation must be >= 1".into()));
        }
        if zv.rank() != 3 || kv.rank() != 3 {
            return Err(Error::Dim(format!(
                "conv1d_causal wants rank-3 input and kernel, got {:?} and {:?}",
                zv.shape(),
                kv.shape()
            )));
        }
        let (batch, cin, len) = (zv.shape()[0], zv.shape()[1], zv.shape()[2]);
        let (cout, kcin, kw) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
        if kw == 0 {
            return Err(Error::Param("empty convolution kernel".into()));
        }
        if kcin != cin {
            return Err(Error::Dim(format!(
                "kernel expects {kcin} input channels, data has {cin}"
            )));
        }
        let mut out = vec![0.0; batch * cout * len];
        for b in 0..batch {
            for o in 0..cout {
                let obase = (b * cout + o) * len;
                for c in 0..cin {
                    let zbase = (b * cin + c) * len;
                    for i in 0..kw {
                        let kval = kv.data()[(o * cin + c) * kw + i];
                        if kval == 0.0 {
                            continue;
                        }
                        for s in (dilation * i)..len {
                            out[obase + s] += kval * zv.data()[zbase + s - dilation * i];
                        }
                    }
                }
            }
        }
        let v = Tensor::new(vec![batch, cout, len], out)?;
        self.push_op(v, vec![z, kernel], Box::new(Conv1dCausalGrad { dilation }))
    }

    /// Slice `[from, to)` along axis 1 of a rank-3 tensor.
    pub fn slice_time(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let v = slice_time_value(self.value(x), from, to)?;
        self.push_op(v, vec![x], Box::new(SliceTimeGrad { from }))
    }

    /// Swap axes 1 and 2 of a rank-3 tensor ([B,L,C] <-> [B,C,L]).
    pub fn permute_12(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(Error::Dim(format!("permute_12 wants rank 3, got {:?}", xv.shape())));
        }
        let out_shape = vec![xv.shape()[0], xv.shape()[2], xv.shape()[1]];
        let v = permute_12_value(xv, &out_shape);
        self.push_op(v, vec![x], Box::new(Permute12Grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_case() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_forced_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let w = tape.constant(t(&[2, 1], &[2.0, 3.0]));
        let b = tape.constant(t(&[1], &[1.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
    }

    #[test]
    fn linear_shape_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
        let w = tape.constant(t(&[2, 1], &[2.0, 3.0]));
        let b = tape.constant(t(&[1], &[1.0]));
        assert!(matches!(tape.linear(x, w, b), Err(Error::Dim(_))));
    }

    #[test]
    fn conv_dilated_matches_direct_summation() {
        // z=[1,2,3,4,5], kernel=[1,1], d=2 -> [1,2,4,6,8]
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1, 1, 5], &[1.0, 2.0, 3.0, 4.0, 5.0]));
        let k = tape.constant(t(&[1, 1, 2], &[1.0, 1.0]));
        let y = tape.conv1d_causal(z, k, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_identity_kernel_passes_through() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1, 1, 4], &[4.0, -1.0, 0.5, 2.0]));
        let k = tape.constant(t(&[1, 1, 1], &[1.0]));
        for d in [1, 3, 7] {
            let y = tape.conv1d_causal(z, k, d).unwrap();
            assert_eq!(tape.value(y).data(), &[4.0, -1.0, 0.5, 2.0]);
        }
    }

    #[test]
    fn conv_pure_shift() {
        // z=[1,2,3], kernel=[0,1], d=1 -> [0,1,2]
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1, 1, 3], &[1.0, 2.0, 3.0]));
        let k = tape.constant(t(&[1, 1, 2], &[0.0, 1.0]));
        let y = tape.conv1d_causal(z, k, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn conv_rejects_bad_params() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1, 1, 3], &[1.0, 2.0, 3.0]));
        let k = tape.constant(t(&[1, 1, 2], &[0.0, 1.0]));
        assert!(matches!(tape.conv1d_causal(z, k, 0), Err(Error::Param(_))));
        let empty = tape.constant(Tensor::zeros(&[1, 1, 0]));
        assert!(matches!(tape.conv1d_causal(z, empty, 1), Err(Error::Param(_))));
    }

    #[test]
    fn gelu_zero_and_symmetry() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        // Phi(x) + Phi(-x) = 1, so gelu(x) - gelu(-x) = x for all x
        for &x in &[0.3, -1.7, 2.5, 10.0, -0.001] {
            let lhs = gelu_scalar(x) - gelu_scalar(-x);
            assert!((lhs - x).abs() < 1e-14, "x={x}: {lhs}");
        }
    }

    #[test]
    fn gelu_matches_series_erf_oracle_at_one() {
        // Independent high-precision erf via its Maclaurin series.
        fn erf_series(x: f64) -> f64 {
            let mut term = x;
            let mut sum = x;
            for n in 1..60 {
                let nf = n as f64;
                term *= -x * x / nf;
                sum += term / (2.0 * nf + 1.0);
            }
            sum * 2.0 / std::f64::consts::PI.sqrt()
        }
        let expected = 1.0 * 0.5 * (1.0 + erf_series(1.0 / std::f64::consts::SQRT_2));
        assert!((gelu_scalar(1.0) - expected).abs() < 1e-12);
    }

    #[test]
    fn softmax_symmetry_and_ratio() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let c = 17.3;
        let x2 = tape.constant(t(&[2], &[c, c + (2.0f64).ln()]));
        let y2 = tape.softmax(x2, 0).unwrap();
        let out = tape.value(y2).data();
        assert!((out[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((out[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_naive_formula_and_sums_to_one() {
        let vals = [0.31, -1.2, 0.77, 0.05];
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &vals));
        let y = tape.softmax(x, 0).unwrap();
        let naive_denom: f64 = vals.iter().map(|v| v.exp()).sum();
        let mut total = 0.0;
        for (i, &v) in tape.value(y).data().iter().enumerate() {
            assert!((v - vals[i].exp() / naive_denom).abs() < 1e-12);
            total += v;
        }
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant() {
        let vals = [0.9, -0.4, 2.2];
        let shifted: Vec<f64> = vals.iter().map(|v| v + 123.456).collect();
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &vals));
        let b = tape.constant(Tensor::from_vec(shifted));
        let ya = tape.softmax(a, 0).unwrap();
        let yb = tape.softmax(b, 0).unwrap();
        for (x, y) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.l2_normalize(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.6, 0.8]);

        // eps-guarded zero vector maps to zero
        let z = tape.constant(t(&[2], &[0.0, 0.0]));
        let yz = tape.l2_normalize(z, 0).unwrap();
        assert_eq!(tape.value(yz).data(), &[0.0, 0.0]);

        // unit vector is a fixed point
        let u = tape.constant(t(&[2], &[0.6, 0.8]));
        let yu = tape.l2_normalize(u, 0).unwrap();
        for (a, b) in tape.value(yu).data().iter().zip(tape.value(u).data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_sum_of_params_is_all_ones() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let loss = tape.sum(w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let detached = tape.stop_gradient(w);
        let loss = tape.sum(detached).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get_or_zeros(w, &[2]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn repeated_parent_accumulates() {
        // loss = sum(w * w) => grad = 2w
        let mut tape = Tape::new();
        let w = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[1e308]));
        let b = tape.constant(t(&[1], &[1e308]));
        assert!(matches!(tape.add(a, b), Err(Error::NonFinite(_))));
    }

    #[test]
    fn causality_of_dilated_conv() {
        // Perturbing position s never changes outputs before s.
        let base: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).sin()).collect();
        let kernel = t(&[1, 1, 3], &[0.4, -0.3, 0.9]);
        for d in [1, 2, 4] {
            for s in 0..9 {
                let mut tape = Tape::new();
                let z0 = tape.constant(t(&[1, 1, 9], &base));
                let k0 = tape.constant(kernel.clone());
                let y0 = tape.conv1d_causal(z0, k0, d).unwrap();
                let mut pert = base.clone();
                pert[s] += 3.5;
                let z1 = tape.constant(t(&[1, 1, 9], &pert));
                let k1 = tape.constant(kernel.clone());
                let y1 = tape.conv1d_causal(z1, k1, d).unwrap();
                for pos in 0..s {
                    assert_eq!(
                        tape.value(y0).data()[pos],
                        tape.value(y1).data()[pos],
                        "d={d}, s={s}, pos={pos}"
                    );
                }
            }
        }
    }

    #[test]
    fn slice_and_permute_round_trip() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s = tape.slice_time(x, 1, 3).unwrap();
        assert_eq!(tape.value(s).shape(), &[1, 2, 2]);
        assert_eq!(tape.value(s).data(), &[3.0, 4.0, 5.0, 6.0]);

        let p = tape.permute_12(x).unwrap();
        let back = tape.permute_12(p).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
    }
}

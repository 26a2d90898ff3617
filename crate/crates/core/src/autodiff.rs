//! Minimal reverse-mode autodiff over 2-d `f64` tensors.
//!
//! Everything in the denoisers, the blender and the metric embedders is a
//! sequence of tokens (rows) times channels (columns), so a 2-d tape is
//! all the models need. A fresh tape is built per forward pass; `backward`
//! walks it once in reverse.

use ndarray::{Array1, Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// broadcast a (1 x n) row over every row of a (m x n) tensor
    AddRow(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Gelu(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    LayerNorm(Var, Var, Var, f64),
    MeanAbs(Var),
    MeanSmoothAbs(Var, f64),
    MeanSq(Var),
    MeanRows(Var),
    L2NormalizeRows(Var, f64),
    MulConst(Var, Array2<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.nodes[row.0].value.row(0).to_owned();
        let v = &self.nodes[a.0].value + &r;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(&self.nodes[a.0].value);
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(gelu_scalar);
        self.push(v, Op::Gelu(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("row concat");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("col concat");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .slice(ndarray::s![start..end, ..])
            .to_owned();
        self.push(v, Op::SliceRows(a, start, end))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .slice(ndarray::s![.., start..end])
            .to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    /// Per-row layer normalization with learnable gain/bias rows (1 x n).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let x = &self.nodes[a.0].value;
        let g = self.nodes[gain.0].value.row(0).to_owned();
        let b = self.nodes[bias.0].value.row(0).to_owned();
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = (var + eps).sqrt();
            for (v, (gi, bi)) in row.iter_mut().zip(g.iter().zip(b.iter())) {
                *v = (*v - mean) / sd * gi + bi;
            }
        }
        self.push(out, Op::LayerNorm(a, gain, bias, eps))
    }

    /// Mean absolute value of all entries -> (1 x 1).
    pub fn mean_abs(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let v = x.iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64;
        self.push(Array2::from_elem((1, 1), v), Op::MeanAbs(a))
    }

    /// Smoothed absolute mean `mean(sqrt(x^2 + eps^2))`; differentiable at 0.
    pub fn mean_smooth_abs(&mut self, a: Var, eps: f64) -> Var {
        let x = &self.nodes[a.0].value;
        let v = x.iter().map(|v| (v * v + eps * eps).sqrt()).sum::<f64>() / x.len() as f64;
        self.push(Array2::from_elem((1, 1), v), Op::MeanSmoothAbs(a, eps))
    }

    pub fn mean_sq(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let v = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        self.push(Array2::from_elem((1, 1), v), Op::MeanSq(a))
    }

    /// Mean over rows -> (1 x n).
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let m = x.nrows() as f64;
        let v = (x.sum_axis(Axis(0)) / m).insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = &self.nodes[a.0].value;
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        self.push(out, Op::L2NormalizeRows(a, eps))
    }

    pub fn mul_const(&mut self, a: Var, c: &Array2<f64>) -> Var {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::MulConst(a, c.clone()))
    }

    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        let l = &self.nodes[loss.0].value;
        assert_eq!(l.dim(), (1, 1), "backward expects a scalar loss");
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        let accum = |grads: &mut Vec<Option<Array2<f64>>>, v: Var, delta: Array2<f64>| {
            match &mut grads[v.0] {
                Some(g) => *g += &delta,
                slot => *slot = Some(delta),
            }
        };

        for i in (0..self.nodes.len()).rev() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => continue,
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[b.0].value.t());
                    let db = self.nodes[a.0].value.t().dot(&g);
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.nodes[b.0].value;
                    let db = &g * &self.nodes[a.0].value;
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::Scale(a, c) => accum(&mut grads, *a, &g * *c),
                Op::AddRow(a, row) => {
                    accum(&mut grads, *a, g.clone());
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accum(&mut grads, *row, dr);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut dx = &g * y;
                    for (mut row, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let s: f64 = row.sum();
                        for (v, yv) in row.iter_mut().zip(yrow) {
                            *v -= s * yv;
                        }
                    }
                    accum(&mut grads, *a, dx);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = self.nodes[i].value.mapv(f64::exp);
                    let mut dx = g.clone();
                    for (mut row, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let s: f64 = row.sum();
                        for (v, yv) in row.iter_mut().zip(yrow) {
                            *v -= s * yv;
                        }
                    }
                    accum(&mut grads, *a, dx);
                }
                Op::Gelu(a) => {
                    let dx = &g * &self.nodes[a.0].value.mapv(gelu_grad_scalar);
                    accum(&mut grads, *a, dx);
                }
                Op::Transpose(a) => accum(&mut grads, *a, g.t().to_owned()),
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.nodes[p.0].value.nrows();
                        let gp = g.slice(ndarray::s![offset..offset + rows, ..]).to_owned();
                        accum(&mut grads, *p, gp);
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.nodes[p.0].value.ncols();
                        let gp = g.slice(ndarray::s![.., offset..offset + cols]).to_owned();
                        accum(&mut grads, *p, gp);
                        offset += cols;
                    }
                }
                Op::SliceRows(a, start, _end) => {
                    let mut da = Array2::zeros(self.nodes[a.0].value.dim());
                    da.slice_mut(ndarray::s![*start..*start + g.nrows(), ..])
                        .assign(&g);
                    accum(&mut grads, *a, da);
                }
                Op::SliceCols(a, start, _end) => {
                    let mut da = Array2::zeros(self.nodes[a.0].value.dim());
                    da.slice_mut(ndarray::s![.., *start..*start + g.ncols()])
                        .assign(&g);
                    accum(&mut grads, *a, da);
                }
                Op::LayerNorm(a, gain, bias, eps) => {
                    let x = &self.nodes[a.0].value;
                    let gv = self.nodes[gain.0].value.row(0).to_owned();
                    let n = x.ncols() as f64;
                    let mut dx = Array2::zeros(x.dim());
                    let mut dgain = Array1::<f64>::zeros(x.ncols());
                    let mut dbias = Array1::<f64>::zeros(x.ncols());
                    for (ri, (xrow, grow)) in x.rows().into_iter().zip(g.rows()).enumerate() {
                        let mean = xrow.sum() / n;
                        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let sd = (var + eps).sqrt();
                        let xhat: Vec<f64> = xrow.iter().map(|v| (v - mean) / sd).collect();
                        let dxhat: Vec<f64> = grow
                            .iter()
                            .zip(gv.iter())
                            .map(|(gi, wi)| gi * wi)
                            .collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / n;
                        let mean_dxhat_xhat = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(d, h)| d * h)
                            .sum::<f64>()
                            / n;
                        for c in 0..x.ncols() {
                            dx[(ri, c)] =
                                (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat) / sd;
                            dgain[c] += grow[c] * xhat[c];
                            dbias[c] += grow[c];
                        }
                    }
                    accum(&mut grads, *a, dx);
                    accum(&mut grads, *gain, dgain.insert_axis(Axis(0)));
                    accum(&mut grads, *bias, dbias.insert_axis(Axis(0)));
                }
                Op::MeanAbs(a) => {
                    let scale = g[(0, 0)] / self.nodes[a.0].value.len() as f64;
                    let da = self.nodes[a.0].value.mapv(|v| {
                        if v > 0.0 {
                            scale
                        } else if v < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    });
                    accum(&mut grads, *a, da);
                }
                Op::MeanSmoothAbs(a, eps) => {
                    let scale = g[(0, 0)] / self.nodes[a.0].value.len() as f64;
                    let da = self.nodes[a.0]
                        .value
                        .mapv(|v| scale * v / (v * v + eps * eps).sqrt());
                    accum(&mut grads, *a, da);
                }
                Op::MeanSq(a) => {
                    let scale = 2.0 * g[(0, 0)] / self.nodes[a.0].value.len() as f64;
                    let da = self.nodes[a.0].value.mapv(|v| scale * v);
                    accum(&mut grads, *a, da);
                }
                Op::MeanRows(a) => {
                    let m = self.nodes[a.0].value.nrows();
                    let row = g.row(0).to_owned() / m as f64;
                    let da = Array2::from_shape_fn(self.nodes[a.0].value.dim(), |(_, c)| row[c]);
                    accum(&mut grads, *a, da);
                }
                Op::L2NormalizeRows(a, eps) => {
                    let x = &self.nodes[a.0].value;
                    let y = &self.nodes[i].value;
                    let mut dx = Array2::zeros(x.dim());
                    for (ri, (xrow, (yrow, grow))) in x
                        .rows()
                        .into_iter()
                        .zip(y.rows().into_iter().zip(g.rows()))
                        .enumerate()
                    {
                        let n = xrow.iter().map(|v| v * v).sum::<f64>().sqrt().max(*eps);
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for c in 0..x.ncols() {
                            dx[(ri, c)] = (grow[c] - yrow[c] * dot) / n;
                        }
                    }
                    accum(&mut grads, *a, dx);
                }
                Op::MulConst(a, c) => {
                    accum(&mut grads, *a, &g * c);
                }
            }
        }
        Grads { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences against the analytic gradient for a
    /// composite expression exercising every op.
    #[test]
    fn finite_difference_probe_all_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let a0 = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let w0 = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-0.7..0.7));
        let gain0 = Array2::from_shape_fn((1, 4), |_| rng.gen_range(0.5..1.5));
        let bias0 = Array2::from_shape_fn((1, 4), |_| rng.gen_range(-0.2..0.2));
        let target = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0));

        let eval = |a: &Array2<f64>,
                    w: &Array2<f64>,
                    gain: &Array2<f64>,
                    bias: &Array2<f64>|
         -> (f64, Tape, [Var; 4]) {
            let mut t = Tape::new();
            let va = t.leaf(a.clone());
            let vw = t.leaf(w.clone());
            let vgain = t.leaf(gain.clone());
            let vbias = t.leaf(bias.clone());
            let h = t.matmul(va, vw);
            let h = t.add_row(h, vbias);
            let h = t.layer_norm(h, vgain, vbias, 1e-5);
            let h = t.gelu(h);
            let attn_scores = {
                let ht = t.transpose(h);
                let s = t.matmul(h, ht);
                t.scale(s, 0.5)
            };
            let attn = t.softmax_rows(attn_scores);
            let h = t.matmul(attn, h);
            let h = t.l2_normalize_rows(h, 1e-12);
            let left = t.slice_cols(h, 0, 2);
            let right = t.slice_cols(h, 2, 4);
            let joined = t.add(left, right);
            let tgt = t.leaf(target.clone());
            let diff = t.sub(joined, tgt);
            let loss = t.mean_smooth_abs(diff, 1e-3);
            let l = t.value(loss)[(0, 0)];
            (l, t, [va, vw, vgain, vbias])
        };

        let (_, tape, vars) = eval(&a0, &w0, &gain0, &bias0);
        let loss_var = Var(tape.len() - 1);
        let grads = tape.backward(loss_var);

        let eps = 1e-6;
        let inputs = [&a0, &w0, &gain0, &bias0];
        for (vi, base) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[vi]).unwrap();
            for idx in 0..base.len().min(8) {
                let (r, c) = (idx / base.ncols(), idx % base.ncols());
                let mut plus = (*base).clone();
                plus[(r, c)] += eps;
                let mut minus = (*base).clone();
                minus[(r, c)] -= eps;
                let args_p: Vec<Array2<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, v)| if k == vi { plus.clone() } else { (*v).clone() })
                    .collect();
                let args_m: Vec<Array2<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, v)| if k == vi { minus.clone() } else { (*v).clone() })
                    .collect();
                let (lp, _, _) = eval(&args_p[0], &args_p[1], &args_p[2], &args_p[3]);
                let (lm, _, _) = eval(&args_m[0], &args_m[1], &args_m[2], &args_m[3]);
                let fd = (lp - lm) / (2.0 * eps);
                let an = analytic[(r, c)];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((an - fd) / denom).abs() < 1e-3,
                    "var {vi} entry ({r},{c}): analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.leaf(Array2::from_shape_fn((5, 7), |(i, j)| (i * j) as f64 * 0.3 - 1.0));
        let s = t.softmax_rows(x);
        for row in t.value(s).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_and_slice_roundtrip_gradients() {
        let mut t = Tape::new();
        let a = t.leaf(Array2::from_elem((2, 3), 1.0));
        let b = t.leaf(Array2::from_elem((2, 3), 2.0));
        let cat = t.concat_cols(&[a, b]);
        let back = t.slice_cols(cat, 3, 6);
        let loss = t.mean_sq(back);
        let grads = t.backward(loss);
        assert!(grads.get(a).unwrap().iter().all(|v| *v == 0.0));
        assert!(grads.get(b).unwrap().iter().all(|v| *v != 0.0));
    }
}

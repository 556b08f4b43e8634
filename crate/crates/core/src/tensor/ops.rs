//! Differentiable operations on [`Var`].

use std::rc::Rc;

use super::kernels::{self, gemm, gemm_strided};
use super::{Backward, Tensor, Var};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn row_broadcast(op: &'static str, x: &Var<'_>, row: &Var<'_>) -> Result<(usize, usize)> {
    let (m, n) = x.value().dims2()?;
    if row.shape() != [n] {
        return Err(Error::shape(op, x.shape(), row.shape()));
    }
    Ok((m, n))
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("shape bookkeeping")
}

/// Sums the rows of an `[m, n]` buffer.
fn column_sums(data: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for row in data.chunks(n) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out
}

struct AddBack;

impl Backward for AddBack {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.clone()), Some(grad.clone())])
    }
}

struct MulBack {
    a: Rc<Tensor>,
    b: Rc<Tensor>,
}

impl Backward for MulBack {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let ga = needs[0].then(|| grad.mul(&self.b)).transpose()?;
        let gb = needs[1].then(|| grad.mul(&self.a)).transpose()?;
        Ok(vec![ga, gb])
    }
}

struct AddRowBack {
    n: usize,
}

impl Backward for AddRowBack {
    fn name(&self) -> &'static str {
        "add_row"
    }
    fn backward(&self, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let gb = needs[1].then(|| tensor(&[self.n], column_sums(grad.data(), self.n)));
        Ok(vec![Some(grad.clone()), gb])
    }
}

struct MulRowBack {
    x: Rc<Tensor>,
    row: Rc<Tensor>,
}

impl Backward for MulRowBack {
    fn name(&self) -> &'static str {
        "mul_row"
    }
    fn backward(&self, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let n = self.row.len();
        let gx = needs[0].then(|| {
            let mut g = grad.clone();
            for r in g.data_mut().chunks_mut(n) {
                r.iter_mut().zip(self.row.data()).for_each(|(v, s)| *v *= s);
            }
            g
        });
        let grow = needs[1].then(|| {
            let mut out = vec![0.0; n];
            for (gr, xr) in grad.data().chunks(n).zip(self.x.data().chunks(n)) {
                for ((o, g), x) in out.iter_mut().zip(gr).zip(xr) {
                    *o += g * x;
                }
            }
            tensor(&[n], out)
        });
        Ok(vec![gx, grow])
    }
}

struct ScaleBack(f64);

impl Backward for ScaleBack {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.scale(self.0))])
    }
}

struct MatmulBack {
    a: Rc<Tensor>,
    b: Rc<Tensor>,
}

impl Backward for MatmulBack {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (m, k) = self.a.dims2()?;
        let (_, n) = self.b.dims2()?;
        // dA = dY · Bᵀ, dB = Aᵀ · dY
        let ga = needs[0].then(|| {
            let mut out = vec![0.0; m * k];
            gemm(m, n, k, grad.data(), false, self.b.data(), true, &mut out, false);
            tensor(&[m, k], out)
        });
        let gb = needs[1].then(|| {
            let mut out = vec![0.0; k * n];
            gemm(k, m, n, self.a.data(), true, grad.data(), false, &mut out, false);
            tensor(&[k, n], out)
        });
        Ok(vec![ga, gb])
    }
}

/// Pointwise map with a known derivative.
struct UnaryBack {
    name: &'static str,
    x: Rc<Tensor>,
    deriv: fn(f64) -> f64,
}

impl Backward for UnaryBack {
    fn name(&self) -> &'static str {
        self.name
    }
    fn backward(&self, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let data = grad
            .data()
            .iter()
            .zip(self.x.data())
            .map(|(g, &x)| g * (self.deriv)(x))
            .collect();
        Ok(vec![Some(tensor(grad.shape(), data))])
    }
}

struct LayerNormBack {
    xhat: Vec<f64>,
    inv: Vec<f64>,
    gain: Rc<Tensor>,
    shape: Vec<usize>,
}

impl Backward for LayerNormBack {
    fn name(&self) -> &'static str {
        "layer_norm"
    }
    fn backward(&self, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let d = self.gain.len();
        let g = self.gain.data();
        let mut gx = vec![0.0; grad.len()];
        let mut ggain = vec![0.0; d];
        let mut gbias = vec![0.0; d];
        let mut dxhat = vec![0.0; d];
        for (r, (gy, xh)) in grad.data().chunks(d).zip(self.xhat.chunks(d)).enumerate() {
            for j in 0..d {
                ggain[j] += gy[j] * xh[j];
                gbias[j] += gy[j];
                dxhat[j] = gy[j] * g[j];
            }
            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let out = &mut gx[r * d..(r + 1) * d];
            for j in 0..d {
                out[j] = self.inv[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
            }
        }
        Ok(vec![
            needs[0].then(|| tensor(&self.shape, gx)),
            needs[1].then(|| tensor(&[d], ggain)),
            needs[2].then(|| tensor(&[d], gbias)),
        ])
    }
}

struct SoftmaxBack {
    y: Rc<Tensor>,
}

impl Backward for SoftmaxBack {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let n = *self.y.shape().last().unwrap_or(&1);
        let mut out = vec![0.0; grad.len()];
        for ((o, g), y) in out
            .chunks_mut(n)
            .zip(grad.data().chunks(n))
            .zip(self.y.data().chunks(n))
        {
            let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
            for j in 0..n {
                o[j] = y[j] * (g[j] - dot);
            }
        }
        Ok(vec![Some(tensor(grad.shape(), out))])
    }
}

struct FlipBack;

impl Backward for FlipBack {
    fn name(&self) -> &'static str {
        "flip_seq"
    }
    fn backward(&self, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.flip_seq()?)])
    }
}

struct ShiftBack;

impl Backward for ShiftBack {
    fn name(&self) -> &'static str {
        "shift_seq"
    }
    fn backward(&self, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (l, d) = grad.dims2()?;
        let mut out = vec![0.0; l * d];
        kernels::unshift_rows(grad.data(), &mut out, l, d);
        Ok(vec![Some(tensor(&[l, d], out))])
    }
}

struct IndexRowsBack {
    rows: usize,
    cols: usize,
    index: Vec<usize>,
}

impl Backward for IndexRowsBack {
    fn name(&self) -> &'static str {
        "index_rows"
    }
    fn backward(&self, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let c = self.cols;
        let mut out = vec![0.0; self.rows * c];
        for (k, &i) in self.index.iter().enumerate() {
            for (o, g) in out[i * c..(i + 1) * c].iter_mut().zip(grad.row(k)) {
                *o += g;
            }
        }
        Ok(vec![Some(tensor(&[self.rows, c], out))])
    }
}

struct SumBack {
    shape: Vec<usize>,
}

impl Backward for SumBack {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(Tensor::full(self.shape.clone(), grad.item()?))])
    }
}

struct WeightedSumBack {
    weights: Tensor,
}

impl Backward for WeightedSumBack {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }
    fn backward(&self, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(self.weights.scale(grad.item()?))])
    }
}

/// Rows of the attention score matrix processed at once.
const ATTENTION_BLOCK: usize = 64;

struct AttentionBack {
    q: Rc<Tensor>,
    k: Rc<Tensor>,
    v: Rc<Tensor>,
    heads: usize,
    lse: Vec<f64>,
}

impl Backward for AttentionBack {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn backward(&self, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (l, e) = self.q.dims2()?;
        let dh = e / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (q, k, v) = (self.q.data(), self.k.data(), self.v.data());
        let dout = grad.data();
        let mut dq = vec![0.0; l * e];
        let mut dk = vec![0.0; l * e];
        let mut dv = vec![0.0; l * e];
        let mut p = vec![0.0; ATTENTION_BLOCK.min(l) * l];
        let mut dp = vec![0.0; ATTENTION_BLOCK.min(l) * l];
        for h in 0..self.heads {
            let col = h * dh;
            for start in (0..l).step_by(ATTENTION_BLOCK) {
                let nb = ATTENTION_BLOCK.min(l - start);
                let p = &mut p[..nb * l];
                let dp = &mut dp[..nb * l];
                // recompute probabilities from the saved log-sum-exp
                gemm_strided(nb, dh, l, &q[start * e + col..], e, 1, &k[col..], 1, e, p, l, 1, false);
                for (i, row) in p.chunks_mut(l).enumerate() {
                    let lse = self.lse[h * l + start + i];
                    row.iter_mut().for_each(|s| *s = (*s * scale - lse).exp());
                }
                let dout_blk = &dout[start * e + col..];
                // dV += Pᵀ dO
                gemm_strided(l, nb, dh, p, 1, l, dout_blk, e, 1, &mut dv[col..], e, 1, true);
                // dP = dO Vᵀ
                gemm_strided(nb, dh, l, dout_blk, e, 1, &v[col..], 1, e, dp, l, 1, false);
                for (prow, dprow) in p.chunks(l).zip(dp.chunks_mut(l)) {
                    let dot: f64 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                    for (ds, pv) in dprow.iter_mut().zip(prow) {
                        *ds = pv * (*ds - dot) * scale;
                    }
                }
                // dQ = dS K, dK += dSᵀ Q
                gemm_strided(nb, l, dh, dp, l, 1, &k[col..], e, 1, &mut dq[start * e + col..], e, 1, false);
                gemm_strided(l, nb, dh, dp, 1, l, &q[start * e + col..], e, 1, &mut dk[col..], e, 1, true);
            }
        }
        Ok(vec![
            Some(tensor(&[l, e], dq)),
            Some(tensor(&[l, e], dk)),
            Some(tensor(&[l, e], dv)),
        ])
    }
}

/// Multi-head scaled dot-product attention over `[L, E]` projections.
///
/// Scores are formed in blocks of rows so memory stays `O(L · E)`; the
/// backward pass recomputes each block from the saved row log-sum-exps.
/// Returns the output and the per-(head, row) log-sum-exp.
pub(crate) fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(Tensor, Vec<f64>)> {
    let (l, e) = q.dims2()?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    if heads == 0 || e % heads != 0 {
        return Err(Error::Config(format!(
            "embedding size {e} is not divisible by {heads} heads"
        )));
    }
    let dh = e / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; l * e];
    let mut lse = vec![0.0; heads * l];
    let mut s = vec![0.0; ATTENTION_BLOCK.min(l) * l];
    for h in 0..heads {
        let col = h * dh;
        for start in (0..l).step_by(ATTENTION_BLOCK) {
            let nb = ATTENTION_BLOCK.min(l - start);
            let s = &mut s[..nb * l];
            gemm_strided(nb, dh, l, &q.data()[start * e + col..], e, 1, &k.data()[col..], 1, e, s, l, 1, false);
            for (i, row) in s.chunks_mut(l).enumerate() {
                row.iter_mut().for_each(|x| *x *= scale);
                lse[h * l + start + i] = kernels::softmax_in_place(row);
            }
            gemm_strided(nb, l, dh, s, l, 1, &v.data()[col..], e, 1, &mut out[start * e + col..], e, 1, false);
        }
    }
    Ok((tensor(&[l, e], out), lse))
}

impl<'t> Var<'t> {
    pub fn add(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        same_shape("add", self, rhs)?;
        let value = self.value().add(rhs.value())?;
        self.tape.record(&[self, rhs], value, || AddBack)
    }

    pub fn mul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        same_shape("mul", self, rhs)?;
        let value = self.value().mul(rhs.value())?;
        self.tape.record(&[self, rhs], value, || MulBack {
            a: self.saved(),
            b: rhs.saved(),
        })
    }

    /// `[m, n] + [n]`, broadcasting over rows.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        let (_, n) = row_broadcast("add_row", self, row)?;
        let mut out = self.value().data().to_vec();
        for r in out.chunks_mut(n) {
            r.iter_mut().zip(row.value().data()).for_each(|(a, b)| *a += b);
        }
        let value = tensor(self.shape(), out);
        self.tape.record(&[self, row], value, || AddRowBack { n })
    }

    /// `[m, n] ⊙ [n]`, broadcasting over rows.
    pub fn mul_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        let (_, n) = row_broadcast("mul_row", self, row)?;
        let mut out = self.value().data().to_vec();
        for r in out.chunks_mut(n) {
            r.iter_mut().zip(row.value().data()).for_each(|(a, b)| *a *= b);
        }
        let value = tensor(self.shape(), out);
        self.tape.record(&[self, row], value, || MulRowBack {
            x: self.saved(),
            row: row.saved(),
        })
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        let value = self.value().scale(c);
        self.tape.record(&[self], value, || ScaleBack(c))
    }

    pub fn matmul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        let value = self.value().matmul(rhs.value())?;
        self.tape.record(&[self, rhs], value, || MatmulBack {
            a: self.saved(),
            b: rhs.saved(),
        })
    }

    /// `self · weight + bias` for `[m, in] · [in, out]`.
    pub fn linear(&self, weight: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add_row(b),
            None => Ok(y),
        }
    }

    fn unary(&self, name: &'static str, f: fn(f64) -> f64, deriv: fn(f64) -> f64) -> Result<Var<'t>> {
        let value = self.value().map(f);
        self.tape.record(&[self], value, || UnaryBack {
            name,
            x: self.saved(),
            deriv,
        })
    }

    pub fn silu(&self) -> Result<Var<'t>> {
        self.unary("silu", kernels::silu, kernels::silu_grad)
    }

    pub fn gelu(&self) -> Result<Var<'t>> {
        self.unary("gelu", kernels::gelu, kernels::gelu_grad)
    }

    pub fn softplus(&self) -> Result<Var<'t>> {
        self.unary("softplus", kernels::softplus, kernels::sigmoid)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, f64::exp)
    }

    /// Layer normalisation over the last axis with [`super::LAYER_NORM_EPS`].
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        let d = gain.value().len();
        if self.shape().last() != Some(&d) || bias.shape() != [d] {
            return Err(Error::shape("layer_norm", self.shape(), gain.shape()));
        }
        let x = self.value().data();
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut inv = vec![0.0; rows];
        for (r, (src, dst)) in x.chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
            let (mean, iv) = kernels::mean_inv_std(src, super::LAYER_NORM_EPS);
            inv[r] = iv;
            for (o, v) in dst.iter_mut().zip(src) {
                *o = (v - mean) * iv;
            }
        }
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for ((o, g), b) in row.iter_mut().zip(gain.value().data()).zip(bias.value().data()) {
                *o = *o * g + b;
            }
        }
        let value = tensor(self.shape(), out);
        let shape = self.shape().to_vec();
        self.tape.record(&[self, gain, bias], value, || LayerNormBack {
            xhat,
            inv,
            gain: gain.saved(),
            shape,
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let axis = self.shape().len().saturating_sub(1);
        let value = self.value().softmax(axis)?;
        let y = Rc::new(value.clone());
        self.tape.record(&[self], value, || SoftmaxBack { y })
    }

    pub fn flip_seq(&self) -> Result<Var<'t>> {
        let value = self.value().flip_seq()?;
        self.tape.record(&[self], value, || FlipBack)
    }

    pub fn shift_seq(&self) -> Result<Var<'t>> {
        let value = self.value().shift_seq()?;
        self.tape.record(&[self], value, || ShiftBack)
    }

    /// Gathers rows `index` of a matrix (embedding lookup, query selection).
    pub fn index_rows(&self, index: &[usize]) -> Result<Var<'t>> {
        let (rows, cols) = self.value().dims2()?;
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(Error::Contract(format!(
                    "row index {i} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(self.value().row(i));
        }
        let value = tensor(&[index.len(), cols], out);
        let index = index.to_vec();
        self.tape.record(&[self], value, || IndexRowsBack { rows, cols, index })
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let value = Tensor::scalar(self.value().data().iter().sum());
        let shape = self.shape().to_vec();
        self.tape.record(&[self], value, || SumBack { shape })
    }

    /// `Σ self ⊙ weights` with constant `weights`.
    pub fn weighted_sum(&self, weights: &Tensor) -> Result<Var<'t>> {
        if weights.shape() != self.shape() {
            return Err(Error::shape("weighted_sum", self.shape(), weights.shape()));
        }
        let s = self
            .value()
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        let weights = weights.clone();
        self.tape
            .record(&[self], Tensor::scalar(s), || WeightedSumBack { weights })
    }

    /// Multi-head self-attention core: `softmax(Q Kᵀ / √d_h) V` per head,
    /// with no mask and no positional information.
    pub fn attention(&self, k: &Var<'t>, v: &Var<'t>, heads: usize) -> Result<Var<'t>> {
        let (value, lse) = attention_forward(self.value(), k.value(), v.value(), heads)?;
        self.tape.record(&[self, k, v], value, || AttentionBack {
            q: self.saved(),
            k: k.saved(),
            v: v.saved(),
            heads,
            lse,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;
    use crate::rng::{rng_from_seed, standard_normal};
    use crate::testing::{check_gradients, random_tensor};

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.leaf(random_tensor(&[3, 2], 1));
        let loss = x.sum().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert!(g.get(&x).unwrap().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn square_gives_double() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let loss = x.mul(&x).unwrap().sum().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(random_tensor(&[2], 1));
        assert!(matches!(tape.backward(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn second_backward_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(random_tensor(&[2], 1));
        let loss = x.exp().unwrap().sum().unwrap();
        tape.backward(&loss).unwrap();
        assert!(tape.backward(&loss).is_err());
    }

    #[test]
    fn each_node_visited_once() {
        let tape = Tape::new();
        let x = tape.leaf(random_tensor(&[4], 3));
        let a = x.exp().unwrap();
        let b = a.mul(&x).unwrap();
        let c = b.add(&a).unwrap();
        let loss = c.sum().unwrap();
        // exp, mul, add, sum
        assert_eq!(tape.backward(&loss).unwrap().nodes_visited(), 4);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::inference();
        let x = tape.leaf(random_tensor(&[4, 4], 3));
        let y = x.matmul(&x).unwrap().silu().unwrap();
        assert!(tape.is_empty());
        assert!(!y.requires_grad());
    }

    #[test]
    fn overflow_is_an_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new([1], vec![1000.0]).unwrap());
        assert!(matches!(x.exp(), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        for seed in 0..5 {
            let shapes = [vec![3, 4], vec![4, 5], vec![5], vec![3, 5], vec![4], vec![4]];
            let inputs: Vec<Tensor> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| random_tensor(s, seed * 10 + i as u64))
                .collect();
            check_gradients(&inputs, seed, |t, v| {
                let (x, w, b, other, g, beta) = (&v[0], &v[1], &v[2], &v[3], &v[4], &v[5]);
                let h = x.layer_norm(g, beta)?.linear(w, Some(b))?;
                let h = h.gelu()?.mul(other)?.silu()?.add(&h.softplus()?)?;
                let h = h.softmax()?.mul_row(b)?.scale(0.7)?;
                let h = h.flip_seq()?.shift_seq()?.index_rows(&[2, 0, 2])?;
                let _ = t;
                h.exp()
            });
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        for seed in 0..5 {
            let inputs: Vec<Tensor> = (0..3).map(|i| random_tensor(&[70, 4], seed * 3 + i)).collect();
            check_gradients(&inputs, seed, |_, v| v[0].attention(&v[1], &v[2], 2));
        }
    }

    #[test]
    fn attention_matches_naive_softmax() {
        let mut rng = rng_from_seed(4);
        let (l, e, heads) = (5, 6, 3);
        let mk = |rng: &mut crate::rng::Rng| Tensor::from_fn([l, e], |_| standard_normal(rng));
        let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let (out, _) = attention_forward(&q, &k, &v, heads).unwrap();
        let dh = e / heads;
        for h in 0..heads {
            for i in 0..l {
                let scores: Vec<f64> = (0..l)
                    .map(|j| (0..dh).map(|d| q.row(i)[h * dh + d] * k.row(j)[h * dh + d]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for d in 0..dh {
                    let expect: f64 = (0..l).map(|j| scores[j].exp() / z * v.row(j)[h * dh + d]).sum();
                    assert!((out.row(i)[h * dh + d] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let t = random_tensor(&[3, 6], 1);
        assert!(attention_forward(&t, &t, &t, 4).is_err());
    }
}

//! Sequence mixing with diagonal selective state-space recurrences.
//!
//! For every channel `c` and state index `n` the scan runs
//!
//! ```text
//! h[t] = A[t] · h[t-1] + B[t] · x[t]        h[-1] = 0
//! y[t] = Σₙ C[t] · h[t] + D · x[t]
//! ```
//!
//! which is multiplication of `x` by a lower-triangular (semiseparable)
//! matrix. [`materialize_semiseparable`] builds that matrix densely as a
//! test oracle. The bidirectional mixer [`hydra_mix`] combines a shifted
//! forward scan, a shifted scan over the reversed sequence, and a diagonal
//! skip; [`materialize_quasiseparable`] is its dense counterpart.

mod hydra;
mod scan_op;

pub use hydra::{hydra_mix, materialize_quasiseparable};
pub use scan_op::selective_scan_var;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest sequence length the dense `O(L²)` oracles accept by default.
pub const ORACLE_CAP: usize = 256;

/// Discretised per-position parameters of a diagonal selective SSM.
///
/// `decay`, `input` and `output` are `[L, channels, state_dim]` row-major;
/// `skip` has one entry per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmLayerParams {
    len: usize,
    channels: usize,
    state_dim: usize,
    decay: Vec<f64>,
    input: Vec<f64>,
    output: Vec<f64>,
    skip: Vec<f64>,
}

impl SsmLayerParams {
    pub fn new(
        len: usize,
        channels: usize,
        state_dim: usize,
        decay: Vec<f64>,
        input: Vec<f64>,
        output: Vec<f64>,
        skip: Vec<f64>,
    ) -> Result<Self> {
        let n = len * channels * state_dim;
        for (name, v) in [("decay", &decay), ("input", &input), ("output", &output)] {
            if v.len() != n {
                return Err(Error::Contract(format!(
                    "{name} has {} entries, expected {len}×{channels}×{state_dim}",
                    v.len()
                )));
            }
        }
        if skip.len() != channels {
            return Err(Error::Contract(format!(
                "skip has {} entries for {channels} channels",
                skip.len()
            )));
        }
        if let Some(a) = decay.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Contract(format!("decay {a} outside [0, 1]")));
        }
        Ok(SsmLayerParams {
            len,
            channels,
            state_dim,
            decay,
            input,
            output,
            skip,
        })
    }

    /// Builds parameters the way a selective layer does: per-channel step
    /// sizes `delta [L, D]`, continuous decay rates `a_cont [D, N]` and
    /// input/output maps `b [L, N]`, `c [L, N]` shared by all channels.
    pub fn from_selective(delta: &Tensor, a_cont: &Tensor, b: &Tensor, c: &Tensor, skip: Vec<f64>) -> Result<Self> {
        let (len, channels) = delta.dims2()?;
        let (_, state_dim) = a_cont.dims2()?;
        if c.shape() != b.shape() {
            return Err(Error::shape("from_selective", b.shape(), c.shape()));
        }
        let (decay, input) = discretize(delta, a_cont, b)?;
        let mut output = vec![0.0; len * channels * state_dim];
        for t in 0..len {
            for ch in 0..channels {
                let at = (t * channels + ch) * state_dim;
                output[at..at + state_dim].copy_from_slice(c.row(t));
            }
        }
        Self::new(len, channels, state_dim, decay.into_data(), input.into_data(), output, skip)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn decay(&self) -> &[f64] {
        &self.decay
    }

    pub fn skip(&self) -> &[f64] {
        &self.skip
    }

    /// Same parameters with the position axis reversed.
    pub fn reversed(&self) -> Self {
        let block = self.channels * self.state_dim;
        let rev = |v: &[f64]| -> Vec<f64> { v.chunks(block).rev().flatten().copied().collect() };
        SsmLayerParams {
            decay: rev(&self.decay),
            input: rev(&self.input),
            output: rev(&self.output),
            ..self.clone()
        }
    }

    pub fn with_skip(mut self, skip: Vec<f64>) -> Result<Self> {
        if skip.len() != self.channels {
            return Err(Error::Contract("skip length".into()));
        }
        self.skip = skip;
        Ok(self)
    }

    fn idx(&self, t: usize, c: usize) -> usize {
        (t * self.channels + c) * self.state_dim
    }
}

/// Zero-order-hold discretisation of a diagonal SSM.
///
/// Returns `A[t,c,n] = exp(Δ[t,c] · a_cont[c,n])` and
/// `B[t,c,n] = Δ[t,c] · b_raw[t,n]`, both `[L, D, N]`.
pub fn discretize(delta: &Tensor, a_cont: &Tensor, b_raw: &Tensor) -> Result<(Tensor, Tensor)> {
    let (len, channels) = delta.dims2()?;
    let (ach, state_dim) = a_cont.dims2()?;
    if ach != channels {
        return Err(Error::shape("discretize", delta.shape(), a_cont.shape()));
    }
    if b_raw.shape() != [len, state_dim] {
        return Err(Error::shape("discretize", delta.shape(), b_raw.shape()));
    }
    if let Some(d) = delta.data().iter().find(|d| !(**d > 0.0)) {
        return Err(Error::Contract(format!("step size must be positive, got {d}")));
    }
    if let Some(a) = a_cont.data().iter().find(|a| !(**a < 0.0)) {
        return Err(Error::Contract(format!("continuous decay must be negative, got {a}")));
    }
    let mut decay = Vec::with_capacity(len * channels * state_dim);
    let mut input = Vec::with_capacity(len * channels * state_dim);
    for t in 0..len {
        for c in 0..channels {
            let dt = delta.row(t)[c];
            for n in 0..state_dim {
                decay.push((dt * a_cont.row(c)[n]).exp());
                input.push(dt * b_raw.row(t)[n]);
            }
        }
    }
    let shape = [len, channels, state_dim];
    Ok((Tensor::new(shape, decay)?, Tensor::new(shape, input)?))
}

fn check_input(x: &Tensor, p: &SsmLayerParams) -> Result<(usize, usize)> {
    let (len, channels) = x.dims2()?;
    if len != p.len || channels != p.channels {
        return Err(Error::shape(
            "selective_scan",
            x.shape(),
            &[p.len, p.channels, p.state_dim],
        ));
    }
    Ok((len, channels))
}

/// Sequential evaluation of the recurrence; `O(L · D · N)`.
pub fn selective_scan(x: &Tensor, p: &SsmLayerParams) -> Result<Tensor> {
    scan_impl(x, p, true)
}

pub(crate) fn scan_impl(x: &Tensor, p: &SsmLayerParams, with_skip: bool) -> Result<Tensor> {
    let (len, channels) = check_input(x, p)?;
    let ns = p.state_dim;
    let mut h = vec![0.0; channels * ns];
    let mut y = vec![0.0; len * channels];
    for t in 0..len {
        for c in 0..channels {
            let xv = x.row(t)[c];
            let at = p.idx(t, c);
            let hc = &mut h[c * ns..(c + 1) * ns];
            let mut acc = 0.0;
            for n in 0..ns {
                hc[n] = p.decay[at + n] * hc[n] + p.input[at + n] * xv;
                acc += p.output[at + n] * hc[n];
            }
            if with_skip {
                acc += p.skip[c] * xv;
            }
            y[t * channels + c] = acc;
        }
    }
    Tensor::new([len, channels], y)
}

/// Dense per-channel `L × L` mixing matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct MixMatrix {
    len: usize,
    channels: usize,
    data: Vec<f64>,
}

impl MixMatrix {
    pub(crate) fn zeros(len: usize, channels: usize) -> Self {
        MixMatrix {
            len,
            channels,
            data: vec![0.0; channels * len * len],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, channel: usize, i: usize, j: usize) -> f64 {
        self.data[(channel * self.len + i) * self.len + j]
    }

    pub(crate) fn set(&mut self, channel: usize, i: usize, j: usize, v: f64) {
        self.data[(channel * self.len + i) * self.len + j] = v;
    }

    /// `y[:, c] = M_c · x[:, c]` for every channel.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (len, channels) = x.dims2()?;
        if len != self.len || channels != self.channels {
            return Err(Error::shape("MixMatrix::apply", x.shape(), &[self.channels, self.len, self.len]));
        }
        let mut y = vec![0.0; len * channels];
        for c in 0..channels {
            for i in 0..len {
                y[i * channels + c] = (0..len).map(|j| self.get(c, i, j) * x.row(j)[c]).sum();
            }
        }
        Tensor::new([len, channels], y)
    }
}

fn check_cap(len: usize) -> Result<()> {
    if len > ORACLE_CAP {
        return Err(Error::OracleCap { len, cap: ORACLE_CAP });
    }
    Ok(())
}

/// Dense lower-triangular matrix the scan multiplies by:
/// `M[i][j] = Σₙ C[i] · (∏_{k=j+1..=i} A[k]) · B[j]` for `j ≤ i`, plus `D` on
/// the diagonal.
pub fn materialize_semiseparable(p: &SsmLayerParams) -> Result<MixMatrix> {
    check_cap(p.len)?;
    Ok(semiseparable_unchecked(p, true))
}

pub(crate) fn semiseparable_unchecked(p: &SsmLayerParams, with_skip: bool) -> MixMatrix {
    let (len, ns) = (p.len, p.state_dim);
    let mut m = MixMatrix::zeros(len, p.channels);
    let mut prod = vec![0.0; ns];
    for c in 0..p.channels {
        for j in 0..len {
            prod.iter_mut().for_each(|v| *v = 1.0);
            for i in j..len {
                if i > j {
                    let a = &p.decay[p.idx(i, c)..p.idx(i, c) + ns];
                    prod.iter_mut().zip(a).for_each(|(v, a)| *v *= a);
                }
                let b = &p.input[p.idx(j, c)..p.idx(j, c) + ns];
                let co = &p.output[p.idx(i, c)..p.idx(i, c) + ns];
                let mut v: f64 = (0..ns).map(|n| co[n] * prod[n] * b[n]).sum();
                if i == j && with_skip {
                    v += p.skip[c];
                }
                m.set(c, i, j, v);
            }
        }
    }
    m
}

use super::{check_cap, scan_impl, semiseparable_unchecked, MixMatrix, SsmLayerParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_pair(fwd: &SsmLayerParams, bwd: &SsmLayerParams, d_skip: &[f64]) -> Result<()> {
    if fwd.len() != bwd.len() || fwd.channels() != bwd.channels() || d_skip.len() != fwd.channels() {
        return Err(Error::shape(
            "hydra_mix",
            &[fwd.len(), fwd.channels()],
            &[bwd.len(), bwd.channels(), d_skip.len()],
        ));
    }
    Ok(())
}

/// Bidirectional quasiseparable mixing:
///
/// ```text
/// y = shift(scan_fwd(x)) + flip(shift(scan_bwd(flip(x)))) + d_skip ⊙ x
/// ```
///
/// `bwd` is indexed by original positions and is reversed together with
/// `x`. Both inner scans ignore their own `skip`; position `t` reaches its
/// own output only through `d_skip`, earlier positions only through the
/// forward branch and later positions only through the backward branch.
pub fn hydra_mix(x: &Tensor, fwd: &SsmLayerParams, bwd: &SsmLayerParams, d_skip: &[f64]) -> Result<Tensor> {
    check_pair(fwd, bwd, d_skip)?;
    let forward = scan_impl(x, fwd, false)?.shift_seq()?;
    let backward = scan_impl(&x.flip_seq()?, &bwd.reversed(), false)?
        .shift_seq()?
        .flip_seq()?;
    let channels = fwd.channels();
    let mut y = forward.add(&backward)?;
    for (yr, xr) in y.data_mut().chunks_mut(channels).zip(x.data().chunks(channels)) {
        for ((v, xv), d) in yr.iter_mut().zip(xr).zip(d_skip) {
            *v += d * xv;
        }
    }
    Ok(y)
}

/// Dense matrix of [`hydra_mix`]: strictly lower part from the shifted
/// forward semiseparable matrix, strictly upper part from the shifted
/// backward one under index reversal, `d_skip` on the diagonal.
pub fn materialize_quasiseparable(fwd: &SsmLayerParams, bwd: &SsmLayerParams, d_skip: &[f64]) -> Result<MixMatrix> {
    check_pair(fwd, bwd, d_skip)?;
    check_cap(fwd.len())?;
    let len = fwd.len();
    let lower = semiseparable_unchecked(fwd, false);
    let upper = semiseparable_unchecked(&bwd.reversed(), false);
    let mut m = MixMatrix::zeros(len, fwd.channels());
    for c in 0..fwd.channels() {
        for i in 0..len {
            for j in 0..len {
                let v = if i > j {
                    lower.get(c, i - 1, j)
                } else if i < j {
                    let (ri, rj) = (len - 1 - i, len - 1 - j);
                    upper.get(c, ri - 1, rj)
                } else {
                    d_skip[c]
                };
                m.set(c, i, j, v);
            }
        }
    }
    Ok(m)
}

use rand::Rng as _;

use super::params::{BoundParams, Init, Norm, ParamId};
use super::{BackboneKind, ModelConfig};
use crate::error::Result;
use crate::ssm::selective_scan_var;
use crate::tensor::{Tensor, Var};

/// Range of `softplus(dt bias)` at initialisation.
const DT_INIT_RANGE: (f64, f64) = (1e-3, 1e-1);

/// Projections producing the input-dependent `Δ`, `B`, `C` of one scan
/// direction, plus its continuous decay rates.
#[derive(Clone, Debug)]
struct Direction {
    w_dt: ParamId,
    b_dt: ParamId,
    w_b: ParamId,
    w_c: ParamId,
    a_log: ParamId,
}

impl Direction {
    fn new(init: &mut Init<'_>, prefix: &str, width: usize, state: usize) -> Self {
        let name = |s: &str| format!("{prefix}.{s}");
        let w_dt = init.linear(&name("dt.weight"), width, width);
        let (lo, hi) = (DT_INIT_RANGE.0.ln(), DT_INIT_RANGE.1.ln());
        let rng = &mut *init.rng;
        let b_dt = Tensor::from_fn([width], |_| {
            let dt: f64 = rng.gen_range(lo..hi).exp();
            // inverse softplus
            dt + (-(-dt).exp_m1()).ln()
        });
        let b_dt = init.tensor(&name("dt.bias"), b_dt);
        let w_b = init.linear(&name("b.weight"), width, state);
        let w_c = init.linear(&name("c.weight"), width, state);
        // decay rates 1..=N for every channel
        let a_log = Tensor::from_fn([width, state], |i| ((i % state) as f64 + 1.0).ln());
        let a_log = init.tensor(&name("a_log"), a_log);
        Direction {
            w_dt,
            b_dt,
            w_b,
            w_c,
            a_log,
        }
    }

    /// `(Δ, B, C)` computed from the mixer input `v`.
    fn project<'t>(&self, p: &BoundParams<'t>, v: &Var<'t>) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let dt = v.linear(p.get(self.w_dt), Some(p.get(self.b_dt)))?.softplus()?;
        Ok((dt, v.matmul(p.get(self.w_b))?, v.matmul(p.get(self.w_c))?))
    }
}

/// Pre-norm selective state-space layer:
///
/// ```text
/// u = LN(x);  v = silu(u·Wx);  g = silu(u·Wz)
/// y = mix(v) + D ⊙ v
/// h = x + (y ⊙ g)·Wout
/// out = h + (silu(LN(h)·Wg) ⊙ LN(h)·Wu)·Wd
/// ```
///
/// `mix` is a causal selective scan (unidirectional) or the shifted
/// forward-plus-backward composition (bidirectional). `Δ`, `B`, `C` are
/// linear functions of `v`, which makes the scan selective.
#[derive(Clone, Debug)]
pub struct SsmBlock {
    kind: BackboneKind,
    norm1: Norm,
    w_x: ParamId,
    w_z: ParamId,
    forward_dir: Direction,
    backward_dir: Option<Direction>,
    d_skip: ParamId,
    w_out: ParamId,
    b_out: ParamId,
    norm2: Norm,
    w_gate: ParamId,
    w_up: ParamId,
    w_down: ParamId,
    b_down: ParamId,
}

impl SsmBlock {
    pub(crate) fn new(init: &mut Init<'_>, prefix: &str, cfg: &ModelConfig, kind: BackboneKind) -> Self {
        let (e, h, n) = (cfg.embed_dim, cfg.hidden_dim, cfg.state_dim);
        let name = |s: &str| format!("{prefix}.{s}");
        SsmBlock {
            kind,
            norm1: Norm::new(init, &name("norm1"), e),
            w_x: init.linear(&name("mixer.in_x"), e, e),
            w_z: init.linear(&name("mixer.in_z"), e, e),
            forward_dir: Direction::new(init, &name("mixer.fwd"), e, n),
            backward_dir: (kind == BackboneKind::Bidirectional).then(|| Direction::new(init, &name("mixer.bwd"), e, n)),
            d_skip: init.constant(&name("mixer.d_skip"), &[e], 1.0),
            w_out: init.linear(&name("mixer.out.weight"), e, e),
            b_out: init.constant(&name("mixer.out.bias"), &[e], 0.0),
            norm2: Norm::new(init, &name("norm2"), e),
            w_gate: init.linear(&name("ffn.gate"), e, h),
            w_up: init.linear(&name("ffn.up"), e, h),
            w_down: init.linear(&name("ffn.down"), h, e),
            b_down: init.constant(&name("ffn.down_bias"), &[e], 0.0),
        }
    }

    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    /// Sequence mixing of `v` without the skip term.
    pub fn mix<'t>(&self, p: &BoundParams<'t>, v: &Var<'t>) -> Result<Var<'t>> {
        let (dt, b, c) = self.forward_dir.project(p, v)?;
        let fwd = selective_scan_var(v, &dt, p.get(self.forward_dir.a_log), &b, &c)?;
        let Some(bwd_dir) = &self.backward_dir else {
            return Ok(fwd);
        };
        let (dt, b, c) = bwd_dir.project(p, v)?;
        let bwd = selective_scan_var(
            &v.flip_seq()?,
            &dt.flip_seq()?,
            p.get(bwd_dir.a_log),
            &b.flip_seq()?,
            &c.flip_seq()?,
        )?;
        fwd.shift_seq()?.add(&bwd.shift_seq()?.flip_seq()?)
    }

    /// The gated projection feeding the mixer, `silu(LN(x)·Wx)`.
    pub fn mixer_input<'t>(&self, p: &BoundParams<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        self.norm1.apply(p, x)?.matmul(p.get(self.w_x))?.silu()
    }

    pub fn forward<'t>(&self, p: &BoundParams<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let u = self.norm1.apply(p, x)?;
        let v = u.matmul(p.get(self.w_x))?.silu()?;
        let gate = u.matmul(p.get(self.w_z))?.silu()?;
        let y = self.mix(p, &v)?.add(&v.mul_row(p.get(self.d_skip))?)?;
        let h = x.add(&y.mul(&gate)?.linear(p.get(self.w_out), Some(p.get(self.b_out)))?)?;
        let r = self.norm2.apply(p, &h)?;
        let ff = r
            .matmul(p.get(self.w_gate))?
            .silu()?
            .mul(&r.matmul(p.get(self.w_up))?)?
            .linear(p.get(self.w_down), Some(p.get(self.b_down)))?;
        h.add(&ff)
    }

    /// Ids of the two residual-branch output projections (weights and
    /// biases); zeroing them turns the block into the identity.
    pub fn output_projections(&self) -> [ParamId; 4] {
        [self.w_out, self.b_out, self.w_down, self.b_down]
    }

    /// `(Δ, B, C, a_log)` of the forward or backward direction for mixer
    /// input `v`, as plain tensors.
    pub fn selective_params(&self, p: &BoundParams<'_>, v: &Var<'_>, backward: bool) -> Result<Option<[Tensor; 4]>> {
        let dir = if backward {
            match &self.backward_dir {
                Some(d) => d,
                None => return Ok(None),
            }
        } else {
            &self.forward_dir
        };
        let (dt, b, c) = dir.project(p, v)?;
        Ok(Some([
            dt.value().clone(),
            b.value().clone(),
            c.value().clone(),
            p.get(dir.a_log).value().clone(),
        ]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::small;
    use crate::model::PfnModel;
    use crate::ssm::{hydra_mix, selective_scan, SsmLayerParams};
    use crate::tensor::Tape;
    use crate::testing::{check_gradients, random_tensor};

    fn block(m: &PfnModel) -> &SsmBlock {
        m.ssm_block(0).unwrap()
    }

    fn run(m: &PfnModel, x: &Tensor) -> Tensor {
        let tape = Tape::inference();
        let p = m.bind(&tape);
        block(m).forward(&p, &tape.constant(x.clone())).unwrap().value().clone()
    }

    #[test]
    fn dt_bias_initialised_in_range() {
        let m = small(BackboneKind::Bidirectional, 1, 2);
        for dir in ["fwd", "bwd"] {
            let b = m.params().by_name(&format!("layers.0.mixer.{dir}.dt.bias")).unwrap();
            for v in b.data() {
                let dt = crate::tensor::kernels::softplus(*v);
                assert!((0.001 - 1e-12..=0.1 + 1e-12).contains(&dt), "{dt}");
            }
        }
    }

    #[test]
    fn zero_output_projections_give_identity() {
        for kind in [BackboneKind::Unidirectional, BackboneKind::Bidirectional] {
            let mut m = small(kind, 1, 3);
            for id in block(&m).output_projections() {
                m.params_mut().get_mut(id).data_mut().fill(0.0);
            }
            let x = random_tensor(&[6, 8], 4);
            assert_eq!(run(&m, &x), x);
        }
    }

    #[test]
    fn unidirectional_causality_bitwise() {
        let m = small(BackboneKind::Unidirectional, 1, 5);
        let x = random_tensor(&[8, 8], 6);
        let base = run(&m, &x);
        for t in 0..8 {
            let mut xp = x.clone();
            xp.data_mut()[t * 8 + 3] += 1.0;
            let y = run(&m, &xp);
            assert_eq!(&y.data()[..t * 8], &base.data()[..t * 8]);
        }
    }

    #[test]
    fn bidirectional_sees_the_future() {
        let m = small(BackboneKind::Bidirectional, 1, 7);
        let x = random_tensor(&[8, 8], 8);
        let base = run(&m, &x);
        let mut xp = x.clone();
        // a single entry: LayerNorm erases a row-constant shift
        xp.data_mut()[7 * 8 + 2] += 1.0;
        let y = run(&m, &xp);
        let delta = (0..8).map(|j| (y.row(0)[j] - base.row(0)[j]).abs()).fold(0.0, f64::max);
        assert!(delta > 1e-12, "{delta}");
    }

    #[test]
    fn mixer_matches_reference_kernels() {
        for kind in [BackboneKind::Unidirectional, BackboneKind::Bidirectional] {
            let m = small(kind, 1, 9);
            let b = block(&m);
            let tape = Tape::inference();
            let p = m.bind(&tape);
            let x = tape.constant(random_tensor(&[7, 8], 10));
            let v = b.mixer_input(&p, &x).unwrap();
            let mixed = b.mix(&p, &v).unwrap();
            let params = |backward| {
                let [dt, bb, cc, a_log] = b.selective_params(&p, &v, backward).unwrap().unwrap();
                SsmLayerParams::from_selective(&dt, &a_log.map(|a| -a.exp()), &bb, &cc, vec![0.0; 8]).unwrap()
            };
            let expect = match kind {
                BackboneKind::Unidirectional => selective_scan(v.value(), &params(false)).unwrap(),
                _ => hydra_mix(v.value(), &params(false), &params(true), &[0.0; 8]).unwrap(),
            };
            assert!(mixed.value().max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn block_gradients() {
        for kind in [BackboneKind::Unidirectional, BackboneKind::Bidirectional] {
            let mut m = small(kind, 1, 11);
            // Δ ≈ 1 so the decay-rate gradients sit well above finite-difference noise
            for dir in ["fwd", "bwd"] {
                if let Some(b) = m.params_mut().by_name_mut(&format!("layers.0.mixer.{dir}.dt.bias")) {
                    b.data_mut().fill(0.5);
                }
            }
            for seed in 0..5 {
                let mut inputs = vec![random_tensor(&[5, 8], 200 + seed)];
                inputs.extend(m.params().tensors().iter().cloned());
                check_gradients(&inputs, seed, |_, v| {
                    block(&m).forward(&BoundParams::from_vars(v[1..].to_vec()), &v[0])
                });
            }
        }
    }
}

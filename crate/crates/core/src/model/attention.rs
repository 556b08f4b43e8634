use super::params::{BoundParams, Init, Norm, ParamId};
use super::ModelConfig;
use crate::error::Result;
use crate::tensor::Var;

/// Pre-norm transformer encoder layer:
/// `h = x + Wo·MHA(LN(x))`, `out = h + FFN(LN(h))` with a GELU feed-forward.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    heads: usize,
    norm1: Norm,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    norm2: Norm,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl AttentionBlock {
    pub(crate) fn new(init: &mut Init<'_>, prefix: &str, cfg: &ModelConfig) -> Self {
        let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
        let name = |s: &str| format!("{prefix}.{s}");
        AttentionBlock {
            heads: cfg.num_heads,
            norm1: Norm::new(init, &name("norm1"), e),
            wq: init.linear(&name("attn.wq"), e, e),
            wk: init.linear(&name("attn.wk"), e, e),
            wv: init.linear(&name("attn.wv"), e, e),
            wo: init.linear(&name("attn.wo"), e, e),
            bo: init.constant(&name("attn.bo"), &[e], 0.0),
            norm2: Norm::new(init, &name("norm2"), e),
            w1: init.linear(&name("ffn.w1"), e, h),
            b1: init.constant(&name("ffn.b1"), &[h], 0.0),
            w2: init.linear(&name("ffn.w2"), h, e),
            b2: init.constant(&name("ffn.b2"), &[e], 0.0),
        }
    }

    /// Value projection followed by the output projection, i.e. what the
    /// attention sublayer reduces to over a single token.
    pub fn value_path<'t>(&self, p: &BoundParams<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        self.norm1
            .apply(p, x)?
            .matmul(p.get(self.wv))?
            .linear(p.get(self.wo), Some(p.get(self.bo)))
    }

    /// The attention sublayer alone (without residual).
    pub fn attend<'t>(&self, p: &BoundParams<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let u = self.norm1.apply(p, x)?;
        let q = u.matmul(p.get(self.wq))?;
        let k = u.matmul(p.get(self.wk))?;
        let v = u.matmul(p.get(self.wv))?;
        q.attention(&k, &v, self.heads)?
            .linear(p.get(self.wo), Some(p.get(self.bo)))
    }

    pub fn forward<'t>(&self, p: &BoundParams<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let h = x.add(&self.attend(p, x)?)?;
        let f = self
            .norm2
            .apply(p, &h)?
            .linear(p.get(self.w1), Some(p.get(self.b1)))?
            .gelu()?
            .linear(p.get(self.w2), Some(p.get(self.b2)))?;
        h.add(&f)
    }
}

#[cfg(test)]
mod tests {
    use crate::model::tests::small;
    use crate::model::{BackboneKind, BoundParams, ModelConfig, PfnModel};
    use crate::tensor::{Tape, Tensor};
    use crate::testing::{check_gradients, random_tensor};

    #[test]
    fn single_token_reduces_to_value_path() {
        let m = small(BackboneKind::Attention, 1, 3);
        let block = m.attention_block(0).unwrap();
        let tape = Tape::inference();
        let p = m.bind(&tape);
        let x = tape.constant(random_tensor(&[1, 8], 4));
        let a = block.attend(&p, &x).unwrap();
        let v = block.value_path(&p, &x).unwrap();
        assert!(a.value().max_abs_diff(v.value()) < 1e-14);
    }

    #[test]
    fn permutation_equivariance() {
        let m = small(BackboneKind::Attention, 1, 5);
        let block = m.attention_block(0).unwrap();
        let tape = Tape::inference();
        let p = m.bind(&tape);
        let x = random_tensor(&[6, 8], 6);
        let perm = [3, 0, 5, 1, 4, 2];
        let xp = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let y = block.forward(&p, &tape.constant(x)).unwrap();
        let yp = block.forward(&p, &tape.constant(xp)).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((yp.value().row(k)[j] - y.value().row(i)[j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn head_count_changes_output() {
        let mk = |heads| {
            let mut cfg = ModelConfig::new(BackboneKind::Attention);
            cfg.embed_dim = 8;
            cfg.num_heads = heads;
            cfg.num_layers = 1;
            cfg.seed = 9;
            PfnModel::new(cfg).unwrap()
        };
        let (one, two) = (mk(1), mk(2));
        assert_eq!(one.params().num_scalars(), two.params().num_scalars());
        let x = random_tensor(&[5, 8], 10);
        let run = |m: &PfnModel| {
            let tape = Tape::inference();
            let p = m.bind(&tape);
            let out = m.attention_block(0).unwrap().forward(&p, &tape.constant(x.clone())).unwrap();
            out.value().clone()
        };
        assert!(run(&one).max_abs_diff(&run(&two)) > 1e-6);
    }

    #[test]
    fn block_gradients() {
        let m = small(BackboneKind::Attention, 1, 12);
        let block = m.attention_block(0).unwrap();
        for seed in 0..5 {
            let mut inputs = vec![random_tensor(&[5, 8], 100 + seed)];
            inputs.extend(m.params().tensors().iter().cloned());
            check_gradients(&inputs, seed, |_, v| {
                block.forward(&BoundParams::from_vars(v[1..].to_vec()), &v[0])
            });
        }
    }
}

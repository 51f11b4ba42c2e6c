use std::sync::Arc;

use bvos_tensor::Var;
use rand::Rng;

use crate::attention::{ops, BilateralMask};
use crate::error::Result;
use crate::layers::{Linear, Norm};
use crate::params::{Bound, Params};

/// Query, key, value and output projections of one attention branch.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttnWeights {
    fn new<R: Rng + ?Sized>(p: &mut Params, name: &str, c: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(p, &format!("{name}.q"), c, c, rng),
            k: Linear::new(p, &format!("{name}.k"), c, c, rng),
            v: Linear::new(p, &format!("{name}.v"), c, c, rng),
            o: Linear::new(p, &format!("{name}.o"), c, c, rng),
        }
    }
}

/// Inputs shared by every block for one query frame.
pub(crate) struct BlockContext<'t> {
    /// `[N×C]` position embedding of the query grid.
    pub pos: Var<'t>,
    /// `[T·N×C]` position embedding repeated per memory frame.
    pub mem_pos: Var<'t>,
    /// `[T·N×C]` memory frame features (keys).
    pub mem_keys: Var<'t>,
    /// `[T·N×C]` memory features with identity embeddings (values).
    pub mem_values: Var<'t>,
    pub mask: Arc<BilateralMask>,
    /// `[N×1]` bilateral encoding, added to admitted scores.
    pub encoding: Var<'t>,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Block {
    pub ln_self: Norm,
    pub self_attn: AttnWeights,
    pub ln_cross: Norm,
    pub ln_mem: Norm,
    pub cross: AttnWeights,
    pub bilateral: AttnWeights,
    pub ln_mlp: Norm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(p: &mut Params, name: &str, c: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            ln_self: Norm::new(p, &format!("{name}.ln_self"), c),
            self_attn: AttnWeights::new(p, &format!("{name}.self"), c, rng),
            ln_cross: Norm::new(p, &format!("{name}.ln_cross"), c),
            ln_mem: Norm::new(p, &format!("{name}.ln_mem"), c),
            cross: AttnWeights::new(p, &format!("{name}.cross"), c, rng),
            bilateral: AttnWeights::new(p, &format!("{name}.bilateral"), c, rng),
            ln_mlp: Norm::new(p, &format!("{name}.ln_mlp"), c),
            mlp_in: Linear::new(p, &format!("{name}.mlp_in"), c, hidden, rng),
            mlp_out: Linear::new(p, &format!("{name}.mlp_out"), hidden, c, rng),
        }
    }

    /// Pre-norm block:
    ///
    /// ```text
    /// x1 = x  + SelfAttn(LN(x))
    /// b  = LN(x1 + pos)
    /// x2 = x1 + CrossAttn(b, mem) + BilateralAttn(b, mem, M, E)
    /// x3 = x2 + MLP(LN(x2))
    /// ```
    ///
    /// Memory keys carry the position embedding; memory tokens are normalised
    /// per block.
    pub fn forward<'t>(&self, b: &Bound<'t>, x: Var<'t>, ctx: &BlockContext<'t>) -> Result<Var<'t>> {
        let n = x.shape()[0];
        let h = self.ln_self.apply(b, x)?;
        let sa = &self.self_attn;
        let attn = ops::global_attention(sa.q.apply(b, h)?, sa.k.apply(b, h)?, sa.v.apply(b, h)?, ctx.heads, n)?;
        let x1 = x.add(sa.o.apply(b, attn)?)?;

        let query = self.ln_cross.apply(b, x1.add(ctx.pos)?)?;
        let keys = self.ln_mem.apply(b, ctx.mem_keys.add(ctx.mem_pos)?)?;
        let values = self.ln_mem.apply(b, ctx.mem_values)?;
        let ca = &self.cross;
        let cross = ops::global_attention(
            ca.q.apply(b, query)?,
            ca.k.apply(b, keys)?,
            ca.v.apply(b, values)?,
            ctx.heads,
            n,
        )?;
        let ba = &self.bilateral;
        let bilateral = ops::windowed_attention(
            ba.q.apply(b, query)?,
            ba.k.apply(b, keys)?,
            ba.v.apply(b, values)?,
            ctx.mask.clone(),
            Some(ctx.encoding),
            ctx.heads,
        )?;
        let x2 = x1.add(ca.o.apply(b, cross)?)?.add(ba.o.apply(b, bilateral)?)?;

        let hidden = self.mlp_in.apply(b, self.ln_mlp.apply(b, x2)?)?.gelu();
        Ok(x2.add(self.mlp_out.apply(b, hidden)?)?)
    }
}

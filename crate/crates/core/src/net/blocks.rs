//! Building blocks of the temporal U-Net.
//!
//! Feature maps flow as `[N, C, D]` with `N = B·S` (batch times stacked steps),
//! `C` channels and `D` spatial positions. Spatial layers treat each of the
//! `N` frames independently; temporal layers regroup to `[B·D, S, C]`.

use super::config::norm_groups;
use super::weights::{Init, ParamBuilder};
use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::Scalar;

/// Forward context: the tape plus a [`Var`] for every parameter.
pub(crate) struct Fwd<'g, 'w, T> {
    pub g: &'g mut Graph<'w, T>,
    pub p: Vec<Var>,
}

impl<T: Scalar> Fwd<'_, '_, T> {
    pub fn v(&self, idx: usize) -> Var {
        self.p[idx]
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LinearP {
    pub w: usize,
    pub b: usize,
}

impl LinearP {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, fin: usize, fout: usize, zero: bool) -> Self {
        let init = if zero { Init::Zeros } else { Init::Fan(fin) };
        LinearP {
            w: pb.add(&format!("{name}.weight"), &[fin, fout], init),
            b: pb.add(&format!("{name}.bias"), &[fout], Init::Zeros),
        }
    }

    pub fn fwd<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let (w, b) = (f.v(self.w), f.v(self.b));
        f.g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvP {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvP {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        zero: bool,
    ) -> Self {
        let init = if zero { Init::Zeros } else { Init::Fan(cin * kernel) };
        ConvP {
            w: pb.add(&format!("{name}.weight"), &[cout, cin, kernel], init),
            b: pb.add(&format!("{name}.bias"), &[cout], Init::Zeros),
            stride,
            pad: kernel / 2,
        }
    }

    pub fn fwd<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let (w, b) = (f.v(self.w), f.v(self.b));
        f.g.conv1d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct NormP {
    pub gamma: usize,
    pub beta: usize,
    pub groups: usize,
}

impl NormP {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, channels: usize) -> Self {
        NormP {
            gamma: pb.add(&format!("{name}.gamma"), &[channels], Init::Ones),
            beta: pb.add(&format!("{name}.beta"), &[channels], Init::Zeros),
            groups: norm_groups(channels),
        }
    }

    pub fn fwd<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let (g, b) = (f.v(self.gamma), f.v(self.beta));
        f.g.group_norm(x, g, b, self.groups)
    }
}

/// Two-layer MLP with SiLU in between.
#[derive(Clone, Debug)]
pub(crate) struct MlpP {
    pub l1: LinearP,
    pub l2: LinearP,
}

impl MlpP {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, fin: usize, hidden: usize, fout: usize) -> Self {
        MlpP {
            l1: LinearP::new(pb, &format!("{name}.0"), fin, hidden, false),
            l2: LinearP::new(pb, &format!("{name}.1"), hidden, fout, false),
        }
    }

    pub fn fwd<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let h = self.l1.fwd(f, x)?;
        let h = f.g.silu(h);
        self.l2.fwd(f, h)
    }
}

/// Multi-head scaled dot-product attention with separate q/k/v/out projections.
#[derive(Clone, Debug)]
pub(crate) struct AttnP {
    pub q: LinearP,
    pub k: LinearP,
    pub v: LinearP,
    pub o: LinearP,
    pub heads: usize,
    pub width: usize,
}

impl AttnP {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, width: usize, kv_in: usize, heads: usize) -> Self {
        AttnP {
            q: LinearP::new(pb, &format!("{name}.q"), width, width, false),
            k: LinearP::new(pb, &format!("{name}.k"), kv_in, width, false),
            v: LinearP::new(pb, &format!("{name}.v"), kv_in, width, false),
            o: LinearP::new(pb, &format!("{name}.out"), width, width, true),
            heads,
            width,
        }
    }

    /// `queries[Bt, Lq, C]`, `context[Bt, Lk, kv_in]` → `[Bt, Lq, C]`.
    pub fn fwd<T: Scalar>(&self, f: &mut Fwd<T>, queries: Var, context: Var) -> Result<Var> {
        let qs = f.g.shape(queries).to_vec();
        let (bt, lq) = (qs[0], qs[1]);
        let lk = f.g.shape(context)[1];
        let (h, c) = (self.heads, self.width);
        let dh = c / h;
        let q = self.q.fwd(f, queries)?;
        let k = self.k.fwd(f, context)?;
        let v = self.v.fwd(f, context)?;
        let split = |f: &mut Fwd<T>, x: Var, l: usize| -> Result<Var> {
            if h == 1 {
                return Ok(x);
            }
            let x = f.g.reshape(x, &[bt, l, h, dh])?;
            let x = f.g.permute(x, &[0, 2, 1, 3])?;
            f.g.reshape(x, &[bt * h, l, dh])
        };
        let q = split(f, q, lq)?;
        let k = split(f, k, lk)?;
        let v = split(f, v, lk)?;
        let s = f.g.bmm(q, k, true)?;
        let s = f.g.scale(s, T::one() / T::from_usize_lossy(dh).sqrt());
        let a = f.g.softmax(s);
        let o = f.g.bmm(a, v, false)?;
        let o = if h == 1 {
            o
        } else {
            let o = f.g.reshape(o, &[bt, h, lq, dh])?;
            let o = f.g.permute(o, &[0, 2, 1, 3])?;
            f.g.reshape(o, &[bt, lq, c])?
        };
        self.o.fwd(f, o)
    }
}

/// Conv ResNet block with noise-conditioned scale/shift between the convolutions.
#[derive(Clone, Debug)]
pub(crate) struct ResnetP {
    pub norm1: NormP,
    pub conv1: ConvP,
    pub emb_scale: LinearP,
    pub emb_shift: LinearP,
    pub norm2: NormP,
    pub conv2: ConvP,
    pub skip: Option<ConvP>,
}

impl ResnetP {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, cin: usize, cout: usize, emb_dim: usize) -> Self {
        ResnetP {
            norm1: NormP::new(pb, &format!("{name}.norm1"), cin),
            conv1: ConvP::new(pb, &format!("{name}.conv1"), cin, cout, 3, 1, false),
            emb_scale: LinearP::new(pb, &format!("{name}.emb_scale"), emb_dim, cout, false),
            emb_shift: LinearP::new(pb, &format!("{name}.emb_shift"), emb_dim, cout, false),
            norm2: NormP::new(pb, &format!("{name}.norm2"), cout),
            conv2: ConvP::new(pb, &format!("{name}.conv2"), cout, cout, 3, 1, true),
            skip: (cin != cout).then(|| ConvP::new(pb, &format!("{name}.skip"), cin, cout, 1, 1, false)),
        }
    }

    /// `x[N, Cin, D]`, `emb_act[N, E]` (already passed through SiLU).
    pub fn fwd<T: Scalar>(&self, f: &mut Fwd<T>, x: Var, emb_act: Var) -> Result<Var> {
        let n = f.g.shape(x)[0];
        let h = self.norm1.fwd(f, x)?;
        let h = f.g.silu(h);
        let h = self.conv1.fwd(f, h)?;
        let cout = f.g.shape(h)[1];
        let scale = self.emb_scale.fwd(f, emb_act)?;
        let scale = f.g.reshape(scale, &[n, cout, 1])?;
        let shift = self.emb_shift.fwd(f, emb_act)?;
        let shift = f.g.reshape(shift, &[n, cout, 1])?;
        let h = self.norm2.fwd(f, h)?;
        let h = modulate(f, h, scale, shift)?;
        let h = f.g.silu(h);
        let h = self.conv2.fwd(f, h)?;
        let skip = match &self.skip {
            Some(s) => s.fwd(f, x)?,
            None => x,
        };
        f.g.add(skip, h)
    }
}

/// `h·(1 + scale) + shift`.
pub(crate) fn modulate<T: Scalar>(f: &mut Fwd<T>, h: Var, scale: Var, shift: Var) -> Result<Var> {
    let s1 = f.g.add_scalar(scale, T::one());
    let h = f.g.mul(h, s1)?;
    f.g.add(h, shift)
}

/// Self-attention over spatial positions, then cross-attention into the
/// step's condition embedding.
#[derive(Clone, Debug)]
pub(crate) struct SpatialP {
    pub norm_self: NormP,
    pub self_attn: AttnP,
    pub norm_cross: NormP,
    pub cross_attn: AttnP,
}

impl SpatialP {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, width: usize, cond_dim: usize, heads: usize) -> Self {
        SpatialP {
            norm_self: NormP::new(pb, &format!("{name}.norm_self"), width),
            self_attn: AttnP::new(pb, &format!("{name}.self"), width, width, heads),
            norm_cross: NormP::new(pb, &format!("{name}.norm_cross"), width),
            cross_attn: AttnP::new(pb, &format!("{name}.cross"), width, cond_dim, heads),
        }
    }

    /// `x[N, C, D]`, `cond[N, 1, cond_dim]`.
    pub fn fwd<T: Scalar>(&self, f: &mut Fwd<T>, x: Var, cond: Var) -> Result<Var> {
        let h = self.norm_self.fwd(f, x)?;
        let tok = f.g.permute(h, &[0, 2, 1])?;
        let a = self.self_attn.fwd(f, tok, tok)?;
        let a = f.g.permute(a, &[0, 2, 1])?;
        let x = f.g.add(x, a)?;
        let h = self.norm_cross.fwd(f, x)?;
        let tok = f.g.permute(h, &[0, 2, 1])?;
        let a = self.cross_attn.fwd(f, tok, cond)?;
        let a = f.g.permute(a, &[0, 2, 1])?;
        f.g.add(x, a)
    }
}

/// Scale/shift by temporal (and noise) embeddings, then full attention across steps.
#[derive(Clone, Debug)]
pub(crate) struct TemporalP {
    pub norm: NormP,
    pub mod_scale: LinearP,
    pub mod_shift: LinearP,
    pub attn: AttnP,
}

impl TemporalP {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, width: usize, emb_dim: usize, heads: usize) -> Self {
        TemporalP {
            norm: NormP::new(pb, &format!("{name}.norm"), width),
            mod_scale: LinearP::new(pb, &format!("{name}.mod_scale"), emb_dim, width, false),
            mod_shift: LinearP::new(pb, &format!("{name}.mod_shift"), emb_dim, width, false),
            attn: AttnP::new(pb, &format!("{name}.attn"), width, width, heads),
        }
    }

    /// `x[B·S, C, D]`, `step_emb_act[B·S, E]`.
    pub fn fwd<T: Scalar>(&self, f: &mut Fwd<T>, x: Var, step_emb_act: Var, batch: usize) -> Result<Var> {
        let s = f.g.shape(x).to_vec();
        let (n, c, d) = (s[0], s[1], s[2]);
        let steps = n / batch;
        let h = self.norm.fwd(f, x)?;
        let scale = self.mod_scale.fwd(f, step_emb_act)?;
        let scale = f.g.reshape(scale, &[n, c, 1])?;
        let shift = self.mod_shift.fwd(f, step_emb_act)?;
        let shift = f.g.reshape(shift, &[n, c, 1])?;
        let h = modulate(f, h, scale, shift)?;
        let h = f.g.reshape(h, &[batch, steps, c, d])?;
        let h = f.g.permute(h, &[0, 3, 1, 2])?;
        let tok = f.g.reshape(h, &[batch * d, steps, c])?;
        let a = self.attn.fwd(f, tok, tok)?;
        let a = f.g.reshape(a, &[batch, d, steps, c])?;
        let a = f.g.permute(a, &[0, 2, 3, 1])?;
        let a = f.g.reshape(a, &[n, c, d])?;
        f.g.add(x, a)
    }
}

/// ResNet → spatial attention → temporal attention.
#[derive(Clone, Debug)]
pub(crate) struct LevelP {
    pub resnet: ResnetP,
    pub spatial: SpatialP,
    pub temporal: TemporalP,
}

impl LevelP {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: &super::NetConfig,
    ) -> Self {
        LevelP {
            resnet: ResnetP::new(pb, &format!("{name}.resnet"), cin, cout, cfg.emb_dim),
            spatial: SpatialP::new(pb, &format!("{name}.spatial"), cout, cfg.cond_dim, cfg.heads),
            temporal: TemporalP::new(pb, &format!("{name}.temporal"), cout, cfg.emb_dim, cfg.heads),
        }
    }

    pub fn fwd<T: Scalar>(&self, f: &mut Fwd<T>, x: Var, e: &Embeddings, batch: usize) -> Result<Var> {
        let h = self.resnet.fwd(f, x, e.noise_act)?;
        let h = self.spatial.fwd(f, h, e.cond)?;
        self.temporal.fwd(f, h, e.step_act, batch)
    }
}

/// Per-frame embeddings shared by every level.
pub(crate) struct Embeddings {
    /// SiLU of the noise embedding, `[N, E]`.
    pub noise_act: Var,
    /// SiLU of (noise + temporal position) embedding, `[N, E]`.
    pub step_act: Var,
    /// Condition tokens, `[N, 1, cond_dim]`.
    pub cond: Var,
}

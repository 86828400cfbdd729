//! Training objectives, built as graph ops so every term is differentiable.
//!
//! Tensors are NCHW: images and weight maps `[N,1,H,W]`, probabilities and
//! one-hot labels `[N,2,H,W]`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Real, Tensor, Var, VarStore};
use crate::error::{Error, Result};
use crate::nets::ContextEncoder;

pub const PROB_CLAMP: f64 = 1e-7;
pub const DICE_EPS_M: f64 = 1e-6;
pub const DICE_EPS_D: f64 = 1e-5;

fn check_same<F: Real>(g: &Graph<F>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// `√(Σ (A·(I_g − I_d))² / N)`.
pub fn weighted_l2<F: Real>(g: &mut Graph<F>, i_g: Var, i_d: Var, a: Var) -> Result<Var> {
    check_same(g, i_g, i_d, "weighted_l2")?;
    check_same(g, i_g, a, "weighted_l2 weights")?;
    let d = g.sub(i_g, i_d);
    let ad = g.mul(a, d);
    let sq = g.square(ad);
    let m = g.mean_all(sq);
    Ok(g.sqrt(m))
}

/// Mean absolute difference of two `[N,16,1,1]` context vectors.
pub fn vector_l1<F: Real>(g: &mut Graph<F>, u: Var, v: Var) -> Result<Var> {
    check_same(g, u, v, "vector_l1")?;
    let d = g.sub(u, v);
    let a = g.abs(d);
    Ok(g.mean_all(a))
}

pub fn contextual_l1<F: Real>(
    g: &mut Graph<F>,
    vs: &VarStore<F>,
    ctx: &ContextEncoder,
    i_g: Var,
    i_d: Var,
) -> Result<Var> {
    check_same(g, i_g, i_d, "contextual_l1")?;
    let u = ctx.forward(g, vs, i_g);
    let v = ctx.forward(g, vs, i_d);
    vector_l1(g, u, v)
}

#[derive(Debug, Clone, Copy)]
pub struct SynthesisTerms {
    pub l_l: Var,
    pub l_h: Var,
    pub total: Var,
}

/// `ℓ_l + γ·ℓ_h`; also the extractor loss when fed `F_h` instead of `I_g`.
pub fn synthesis_loss<F: Real>(
    g: &mut Graph<F>,
    vs: &VarStore<F>,
    ctx: &ContextEncoder,
    img: Var,
    i_d: Var,
    a: Var,
    gamma: f64,
) -> Result<SynthesisTerms> {
    let l_l = weighted_l2(g, img, i_d, a)?;
    let l_h = contextual_l1(g, vs, ctx, img, i_d)?;
    let scaled = g.mul_scalar(l_h, gamma);
    let total = g.add(l_l, scaled);
    Ok(SynthesisTerms { l_l, l_h, total })
}

/// `Σ_i A_i Σ_c −Y log P / Σ_i A_i` with `P` clamped to `[1e−7, 1−1e−7]`.
pub fn weighted_cross_entropy<F: Real>(g: &mut Graph<F>, p: Var, y: Var, a: Var) -> Result<Var> {
    check_same(g, p, y, "weighted_cross_entropy")?;
    let ps = g.shape(p).to_vec();
    let as_ = g.shape(a).to_vec();
    if as_.len() != 4 || as_[0] != ps[0] || as_[1] != 1 || as_[2..] != ps[2..] {
        return Err(Error::Shape(format!("weights {as_:?} do not match probabilities {ps:?}")));
    }
    let a_sum = g.value(a).sum();
    if a_sum <= F::zero() {
        return Err(Error::Invalid("weight map sums to zero".into()));
    }
    let pc = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let lp = g.log(pc);
    let ylp = g.mul(y, lp);
    let per_voxel = g.sum_axes(ylp, &[1]);
    let weighted = g.mul(a, per_voxel);
    let num = g.sum_all(weighted);
    Ok(g.mul_scalar(num, -1.0 / a_sum.as_f64()))
}

/// `1 − L_GD`, the weighted Dice ratio, bounded below by `ε_d / den`.
fn dice_ratio<F: Real>(g: &mut Graph<F>, p: Var, y: Var) -> Result<Var> {
    check_same(g, p, y, "generalized_dice")?;
    let (n, c, h, w) = g.value(y).dims4();
    let yd = g.value(y).data();
    let mut m = vec![F::zero(); c];
    for (k, mk) in m.iter_mut().enumerate() {
        let mut s = 0.0;
        for b in 0..n {
            let off = (b * c + k) * h * w;
            s += yd[off..off + h * w].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        *mk = F::of(1.0 / (s * s + DICE_EPS_M));
    }
    let m = g.constant(Tensor::from_vec(&[1, c, 1, 1], m));
    let yp = g.mul(y, p);
    let inter = g.sum_axes(yp, &[0, 2, 3]);
    let wi = g.mul(m, inter);
    let num = g.sum_all(wi);
    let num = g.add_scalar(num, DICE_EPS_D);
    let ypp = g.add(y, p);
    let tot = g.sum_axes(ypp, &[0, 2, 3]);
    let wt = g.mul(m, tot);
    let den = g.sum_all(wt);
    let den = g.add_scalar(den, DICE_EPS_D);
    let frac = g.div(num, den);
    Ok(g.mul_scalar(frac, 2.0))
}

/// Generalised Dice loss with class weights `1/((ΣY_c)² + ε_m)`.
pub fn generalized_dice<F: Real>(g: &mut Graph<F>, p: Var, y: Var) -> Result<Var> {
    let r = dice_ratio(g, p, y)?;
    let neg = g.neg(r);
    Ok(g.add_scalar(neg, 1.0))
}

/// `−log(1 − L_GD)`.
pub fn hardness_from_gd<F: Real>(g: &mut Graph<F>, gd: Var) -> Var {
    let one_minus = g.mul_scalar(gd, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let l = g.log(one_minus);
    g.neg(l)
}

/// Same value as `hardness_from_gd(generalized_dice(..))`, taken as the log
/// of the ratio so a near-total miss cannot round `1 − L_GD` to zero in f32.
pub fn hardness_generalized_dice<F: Real>(g: &mut Graph<F>, p: Var, y: Var) -> Result<Var> {
    let r = dice_ratio(g, p, y)?;
    let l = g.log(r);
    Ok(g.neg(l))
}

#[derive(Debug, Clone, Copy)]
pub struct SegmentationTerms {
    pub wce: Var,
    pub hgd: Var,
    pub total: Var,
}

pub fn segmentation_loss<F: Real>(
    g: &mut Graph<F>,
    p: Var,
    y: Var,
    a: Var,
) -> Result<SegmentationTerms> {
    let wce = weighted_cross_entropy(g, p, y, a)?;
    let hgd = hardness_generalized_dice(g, p, y)?;
    let total = g.add(wce, hgd);
    Ok(SegmentationTerms { wce, hgd, total })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma: 1.2 }
    }
}

/// Tensors entering the overall objective. `i_g`/`f_h` are absent for
/// pipelines without synthesis, in which case `L_g = L_e = 0`.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs {
    pub probs: Var,
    pub y: Var,
    pub a: Var,
    pub i_d: Var,
    pub i_g: Option<Var>,
    pub f_h: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub synth: Option<SynthesisTerms>,
    pub extract: Option<SynthesisTerms>,
    pub seg: SegmentationTerms,
    pub total: Var,
}

pub fn overall_loss<F: Real>(
    g: &mut Graph<F>,
    vs: &VarStore<F>,
    ctx: Option<&ContextEncoder>,
    inp: &LossInputs,
    w: LossWeights,
) -> Result<LossTerms> {
    let seg = segmentation_loss(g, inp.probs, inp.y, inp.a)?;
    let mut total = seg.total;
    let mut run = |img: Option<Var>, coef: f64, g: &mut Graph<F>| -> Result<Option<SynthesisTerms>> {
        let Some(img) = img else { return Ok(None) };
        let ctx = ctx.ok_or_else(|| Error::Invalid("synthesis loss needs a context encoder".into()))?;
        let t = synthesis_loss(g, vs, ctx, img, inp.i_d, inp.a, w.gamma)?;
        let s = g.mul_scalar(t.total, coef);
        total = g.add(total, s);
        Ok(Some(t))
    };
    let synth = run(inp.i_g, w.alpha, g)?;
    let extract = run(inp.f_h, w.beta, g)?;
    Ok(LossTerms { synth, extract, seg, total })
}

/// Scalar values of every loss term for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_l: f64,
    pub l_h: f64,
    pub l_g: f64,
    pub l_e: f64,
    pub l_wce: f64,
    pub l_hgd: f64,
    pub l_s: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,epoch,l_l,l_h,L_g,L_e,L_WCE,L_HGD,L_s,L_total";

    pub fn from_terms<F: Real>(g: &Graph<F>, t: &LossTerms) -> Self {
        let v = |x: Var| g.value(x).item().as_f64();
        let (l_l, l_h, l_g) = t
            .synth
            .map(|s| (v(s.l_l), v(s.l_h), v(s.total)))
            .unwrap_or_default();
        Self {
            l_l,
            l_h,
            l_g,
            l_e: t.extract.map(|s| v(s.total)).unwrap_or(0.0),
            l_wce: v(t.seg.wce),
            l_hgd: v(t.seg.hgd),
            l_s: v(t.seg.total),
            l_total: v(t.total),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|x| x.is_finite())
    }

    pub fn fields(&self) -> [f64; 8] {
        [
            self.l_l, self.l_h, self.l_g, self.l_e, self.l_wce, self.l_hgd, self.l_s, self.l_total,
        ]
    }

    pub fn csv_row(&self, step: usize, epoch: usize) -> String {
        let mut s = format!("{step},{epoch}");
        for x in self.fields() {
            let _ = write!(s, ",{x}");
        }
        s
    }

    pub fn parse_csv_row(line: &str) -> Result<(usize, usize, Self)> {
        let parts: Vec<&str> = line.trim().split(',').collect();
        if parts.len() != 10 {
            return Err(Error::Invalid(format!("loss log row has {} fields", parts.len())));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Invalid(format!("bad number {s:?} in loss log")))
        };
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Invalid(format!("bad integer {s:?} in loss log")))
        };
        let f: Vec<f64> = parts[2..].iter().map(|s| num(s)).collect::<Result<_>>()?;
        Ok((
            int(parts[0])?,
            int(parts[1])?,
            Self {
                l_l: f[0],
                l_h: f[1],
                l_g: f[2],
                l_e: f[3],
                l_wce: f[4],
                l_hgd: f[5],
                l_s: f[6],
                l_total: f[7],
            },
        ))
    }
}

/// Scalar evaluation helpers over plain tensors (no gradients).
pub mod eval {
    use super::*;

    fn run(f: impl FnOnce(&mut Graph<f64>) -> Result<Var>) -> Result<f64> {
        let mut g = Graph::new(false);
        let v = f(&mut g)?;
        Ok(g.value(v).item())
    }

    pub fn weighted_l2(i_g: &Tensor<f64>, i_d: &Tensor<f64>, a: &Tensor<f64>) -> Result<f64> {
        run(|g| {
            let (x, y, w) = (g.constant(i_g.clone()), g.constant(i_d.clone()), g.constant(a.clone()));
            super::weighted_l2(g, x, y, w)
        })
    }

    pub fn vector_l1(u: &Tensor<f64>, v: &Tensor<f64>) -> Result<f64> {
        run(|g| {
            let (x, y) = (g.constant(u.clone()), g.constant(v.clone()));
            super::vector_l1(g, x, y)
        })
    }

    pub fn weighted_cross_entropy(p: &Tensor<f64>, y: &Tensor<f64>, a: &Tensor<f64>) -> Result<f64> {
        run(|g| {
            let (p, y, a) = (g.constant(p.clone()), g.constant(y.clone()), g.constant(a.clone()));
            super::weighted_cross_entropy(g, p, y, a)
        })
    }

    pub fn generalized_dice(p: &Tensor<f64>, y: &Tensor<f64>) -> Result<f64> {
        run(|g| {
            let (p, y) = (g.constant(p.clone()), g.constant(y.clone()));
            super::generalized_dice(g, p, y)
        })
    }

    pub fn hardness_from_gd(gd: f64) -> f64 {
        -(1.0 - gd).ln()
    }

    pub fn hardness_generalized_dice(p: &Tensor<f64>, y: &Tensor<f64>) -> Result<f64> {
        run(|g| {
            let (p, y) = (g.constant(p.clone()), g.constant(y.clone()));
            super::hardness_generalized_dice(g, p, y)
        })
    }

    pub fn segmentation_loss(p: &Tensor<f64>, y: &Tensor<f64>, a: &Tensor<f64>) -> Result<f64> {
        run(|g| {
            let (p, y, a) = (g.constant(p.clone()), g.constant(y.clone()), g.constant(a.clone()));
            Ok(super::segmentation_loss(g, p, y, a)?.total)
        })
    }
}

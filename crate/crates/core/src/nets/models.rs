use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, ConvBlock, NormKind, UpConv};
use crate::autograd::{Graph, Real, Var, VarStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_ch: usize,
    pub out_ch: usize,
    pub base_ch: usize,
    pub depth: usize,
    pub use_se: bool,
    pub norm_kind: NormKind,
}

impl UNetConfig {
    /// Channels of encoder level `i` (0..=depth).
    pub fn channels(&self, level: usize) -> usize {
        self.base_ch << level
    }

    pub fn encoder_ladder(&self) -> Vec<usize> {
        (0..=self.depth).map(|i| self.channels(i)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub config: UNetConfig,
    encoder: Vec<ConvBlock>,
    ups: Vec<UpConv>,
    decoder: Vec<ConvBlock>,
    head: Conv2d,
}

impl UNet {
    pub fn new<F: Real, R: Rng>(
        vs: &mut VarStore<F>,
        name: &str,
        config: UNetConfig,
        rng: &mut R,
    ) -> Self {
        let c = |i| config.channels(i);
        let mut encoder = Vec::new();
        for i in 0..=config.depth {
            let c_in = if i == 0 { config.in_ch } else { c(i - 1) };
            encoder.push(ConvBlock::new(
                vs,
                &format!("{name}.enc{i}"),
                c_in,
                c(i),
                config.norm_kind,
                config.use_se,
                rng,
            ));
        }
        let mut ups = Vec::new();
        let mut decoder = Vec::new();
        for i in 0..config.depth {
            ups.push(UpConv::new(vs, &format!("{name}.up{i}"), c(i + 1), c(i), rng));
            decoder.push(ConvBlock::new(
                vs,
                &format!("{name}.dec{i}"),
                2 * c(i),
                c(i),
                config.norm_kind,
                false,
                rng,
            ));
        }
        let head = Conv2d::new(vs, &format!("{name}.head"), c(0), config.out_ch, 1, 1, 0, true, rng);
        Self { config, encoder, ups, decoder, head }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = 1usize << self.config.depth;
        if shape.len() != 4 || shape[1] != self.config.in_ch {
            return Err(Error::Shape(format!(
                "unet expects {} input channels, got shape {shape:?}",
                self.config.in_ch
            )));
        }
        if shape[2] % m != 0 || shape[3] % m != 0 {
            return Err(Error::Shape(format!(
                "spatial dims {}x{} not divisible by {m}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    /// Raw head output (no activation).
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, vs: &VarStore<F>, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let depth = self.config.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut h = x;
        for (i, block) in self.encoder.iter().enumerate() {
            h = block.forward(g, vs, h);
            if i < depth {
                skips.push(h);
                h = g.max_pool2(h);
            }
        }
        for i in (0..depth).rev() {
            let up = self.ups[i].forward(g, vs, h);
            let cat = g.concat_channels(&[skips[i], up]);
            h = self.decoder[i].forward(g, vs, cat);
        }
        Ok(self.head.forward(g, vs, h))
    }
}

pub const CONTEXT_CHANNELS: [usize; 6] = [1, 8, 16, 32, 32, 16];
pub const CONTEXT_DIM: usize = 16;

/// Five 3×3 stride-2 convolutions with adaptive pooling to 8×8 after the
/// third and to 1×1 after the fifth; yields a 16-vector per image.
#[derive(Debug, Clone)]
pub struct ContextEncoder {
    convs: Vec<Conv2d>,
}

impl ContextEncoder {
    pub fn new<F: Real, R: Rng>(vs: &mut VarStore<F>, name: &str, rng: &mut R) -> Self {
        let convs = (0..5)
            .map(|i| {
                Conv2d::new(
                    vs,
                    &format!("{name}.conv{i}"),
                    CONTEXT_CHANNELS[i],
                    CONTEXT_CHANNELS[i + 1],
                    3,
                    2,
                    1,
                    true,
                    rng,
                )
            })
            .collect();
        Self { convs }
    }

    /// Output shape `[N, 16, 1, 1]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, vs: &VarStore<F>, x: Var) -> Var {
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, vs, h);
            h = g.relu(h);
            if i == 2 {
                h = g.adaptive_avg_pool(h, 8, 8);
            }
        }
        g.adaptive_avg_pool(h, 1, 1)
    }
}

/// Which tensors feed the segmenter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    CtaOnly,
    FoOnly,
    PseudoDwiFull,
    FoPlusPseudo,
    RealDwi,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::CtaOnly,
        Variant::FoOnly,
        Variant::PseudoDwiFull,
        Variant::FoPlusPseudo,
        Variant::RealDwi,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::CtaOnly => "cta_only",
            Variant::FoOnly => "f_o_only",
            Variant::PseudoDwiFull => "pseudo_dwi_full",
            Variant::FoPlusPseudo => "f_o_plus_pseudo",
            Variant::RealDwi => "real_dwi",
        }
    }

    /// Whether the extractor, generator and context encoder are in use.
    pub fn uses_synthesis(self) -> bool {
        matches!(self, Variant::PseudoDwiFull | Variant::FoPlusPseudo)
    }

    pub fn segmenter_in_ch(self, c_e: usize) -> usize {
        match self {
            Variant::CtaOnly => c_e,
            Variant::FoOnly => 4,
            Variant::PseudoDwiFull | Variant::RealDwi => 1,
            Variant::FoPlusPseudo => 5,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub variant: Variant,
    pub c_e: usize,
    pub base_ch: usize,
    pub depth: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            variant: Variant::PseudoDwiFull,
            c_e: 6,
            base_ch: 32,
            depth: 4,
        }
    }
}

impl ArchConfig {
    pub fn extractor(&self) -> UNetConfig {
        UNetConfig {
            in_ch: self.c_e,
            out_ch: 1,
            base_ch: self.base_ch,
            depth: self.depth,
            use_se: false,
            norm_kind: NormKind::Batch,
        }
    }

    /// Input order `[CBF, CBV, MTT, Tmax, F_l, F_h]`.
    pub fn generator(&self) -> UNetConfig {
        UNetConfig { in_ch: 6, ..self.extractor() }
    }

    pub fn segmenter(&self) -> UNetConfig {
        UNetConfig {
            in_ch: self.variant.segmenter_in_ch(self.c_e),
            out_ch: 2,
            base_ch: self.base_ch,
            depth: self.depth,
            use_se: true,
            norm_kind: NormKind::Switchable,
        }
    }
}

/// Parameter-name prefixes of the four networks.
pub const PREFIX_E: &str = "e.";
pub const PREFIX_G: &str = "g.";
pub const PREFIX_C: &str = "c.";
pub const PREFIX_S: &str = "s.";

/// Batched slice inputs; which ones are needed depends on the variant.
#[derive(Debug, Clone, Copy, Default)]
pub struct PipelineInputs {
    /// `[N,4,H,W]`: CBF, CBV, MTT, Tmax.
    pub f_o: Option<Var>,
    pub f_l: Option<Var>,
    pub i_star: Option<Var>,
    pub dwi: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct PipelineOutputs {
    pub f_h: Option<Var>,
    pub i_g: Option<Var>,
    pub logits: Var,
    pub probs: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub arch: ArchConfig,
    pub extractor: Option<UNet>,
    pub generator: Option<UNet>,
    pub context: Option<ContextEncoder>,
    pub segmenter: UNet,
}

fn need(v: Option<Var>, what: &str, variant: Variant) -> Result<Var> {
    v.ok_or_else(|| Error::Invalid(format!("variant {variant} needs {what}")))
}

impl Model {
    /// Registers every network's parameters (names prefixed `e.`/`g.`/`c.`/`s.`).
    pub fn new<F: Real, R: Rng>(arch: ArchConfig, vs: &mut VarStore<F>, rng: &mut R) -> Self {
        let synth = arch.variant.uses_synthesis();
        let extractor = synth.then(|| UNet::new(vs, "e", arch.extractor(), rng));
        let generator = synth.then(|| UNet::new(vs, "g", arch.generator(), rng));
        let context = synth.then(|| ContextEncoder::new(vs, "c", rng));
        let segmenter = UNet::new(vs, "s", arch.segmenter(), rng);
        Self { arch, extractor, generator, context, segmenter }
    }

    /// `F_h = σ(Φ_e(I*))`.
    pub fn extract<F: Real>(&self, g: &mut Graph<F>, vs: &VarStore<F>, i_star: Var) -> Result<Var> {
        let net = self.extractor.as_ref().ok_or_else(|| Error::Invalid("no extractor".into()))?;
        let h = net.forward(g, vs, i_star)?;
        Ok(g.sigmoid(h))
    }

    /// `I_g = σ(Φ_g([F_o, F_l, F_h]))`.
    pub fn generate<F: Real>(
        &self,
        g: &mut Graph<F>,
        vs: &VarStore<F>,
        f_o: Var,
        f_l: Var,
        f_h: Var,
    ) -> Result<Var> {
        let net = self.generator.as_ref().ok_or_else(|| Error::Invalid("no generator".into()))?;
        let cat = g.concat_channels(&[f_o, f_l, f_h]);
        let h = net.forward(g, vs, cat)?;
        Ok(g.sigmoid(h))
    }

    pub fn context<F: Real>(&self, g: &mut Graph<F>, vs: &VarStore<F>, img: Var) -> Result<Var> {
        let net = self.context.as_ref().ok_or_else(|| Error::Invalid("no context encoder".into()))?;
        Ok(net.forward(g, vs, img))
    }

    /// Logits and channel softmax of the segmenter.
    pub fn segment<F: Real>(&self, g: &mut Graph<F>, vs: &VarStore<F>, x: Var) -> Result<(Var, Var)> {
        let logits = self.segmenter.forward(g, vs, x)?;
        let probs = g.softmax_channels(logits);
        Ok((logits, probs))
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        vs: &VarStore<F>,
        inp: &PipelineInputs,
    ) -> Result<PipelineOutputs> {
        let v = self.arch.variant;
        let (f_h, i_g, seg_in) = match v {
            Variant::CtaOnly => (None, None, need(inp.i_star, "I*", v)?),
            Variant::FoOnly => (None, None, need(inp.f_o, "F_o", v)?),
            Variant::RealDwi => (None, None, need(inp.dwi, "dwi", v)?),
            Variant::PseudoDwiFull | Variant::FoPlusPseudo => {
                let f_o = need(inp.f_o, "F_o", v)?;
                let f_l = need(inp.f_l, "F_l", v)?;
                let f_h = self.extract(g, vs, need(inp.i_star, "I*", v)?)?;
                let i_g = self.generate(g, vs, f_o, f_l, f_h)?;
                let seg_in = if v == Variant::FoPlusPseudo {
                    g.concat_channels(&[f_o, i_g])
                } else {
                    i_g
                };
                (Some(f_h), Some(i_g), seg_in)
            }
        };
        let (logits, probs) = self.segment(g, vs, seg_in)?;
        Ok(PipelineOutputs { f_h, i_g, logits, probs })
    }
}

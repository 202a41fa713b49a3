//! The anticipation network: encoders, fusion, temporal model and risk head.

pub mod encoders;
pub mod fusion;
pub mod head;
pub mod temporal;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ensure_finite, Tensor};

/// Sizes of every layer. `grid` is the raw input resolution `H = W`, `feat`
/// the feature-map resolution `h = w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub grid: usize,
    pub feat: usize,
    pub channels: usize,
    pub refine_channels: usize,
    pub hidden: usize,
    pub bases: usize,
    pub vocab: usize,
    pub tokens: usize,
    pub scene_widths: [usize; 2],
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            grid: 32,
            feat: 8,
            channels: 16,
            refine_channels: 8,
            hidden: 16,
            bases: 4,
            vocab: 64,
            tokens: 32,
            scene_widths: [4, 8],
        }
    }
}

impl ModelDims {
    /// The miniature network used for end-to-end gradient checks.
    pub fn miniature() -> Self {
        Self {
            grid: 16,
            feat: 4,
            channels: 4,
            refine_channels: 4,
            hidden: 3,
            bases: 2,
            vocab: 16,
            tokens: 8,
            scene_widths: [2, 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.feat == 0 || self.grid != 4 * self.feat {
            return bad("grid must be exactly 4x the feature resolution (two stride-2 stages)");
        }
        if self.channels < 4 || self.channels % 4 != 0 {
            return bad("channels must be a positive multiple of 4");
        }
        if self.refine_channels < 4 || self.refine_channels % 4 != 0 {
            return bad("refine channels must be a positive multiple of 4");
        }
        if self.hidden == 0 || self.bases == 0 || self.vocab < 2 || self.tokens == 0 {
            return bad("hidden, bases, vocab and tokens must be positive");
        }
        if self.scene_widths.contains(&0) {
            return bad("scene widths must be positive");
        }
        Ok(())
    }
}

/// Full model or one of the module knockouts used by the ablation harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Attention maps are average-pooled and linearly lifted, skipping the refiner.
    NoRefiner,
    /// Modalities are averaged, skipping co-activation fusion and basis decomposition.
    NoFusion,
    /// A per-frame MLP replaces the bidirectional GRU.
    NoRecurrence,
}

impl Variant {
    pub fn code(self) -> u8 {
        match self {
            Variant::Full => 0,
            Variant::NoRefiner => 1,
            Variant::NoFusion => 2,
            Variant::NoRecurrence => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Variant::Full,
            1 => Variant::NoRefiner,
            2 => Variant::NoFusion,
            3 => Variant::NoRecurrence,
            _ => return None,
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRefiner => "-MFE",
            Variant::NoFusion => "-AHF",
            Variant::NoRecurrence => "-BiGRU",
        }
    }
}

/// Whether the backward GRU direction may look at later frames of the clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalMode {
    Bidirectional,
    /// Forward direction only; the backward half of the state is zero.
    Causal,
}

/// Named parameter tensors in a stable (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Registers (or fetches) the parameter as a graph leaf.
    pub fn var(&self, g: &mut Graph, name: &str) -> Result<Var> {
        Ok(g.param(name, self.get(name)?))
    }
}

/// Fills parameters in a fixed call order from one seeded stream.
pub(crate) struct Init<'a> {
    pub params: &'a mut Params,
    pub rng: &'a mut Rng,
}

impl Init<'_> {
    /// Uniform in `±sqrt(3 / fan_in)` (unit-variance fan-in scaling).
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let a = (3.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| self.rng.range(-a, a));
        self.params.insert(name, t);
    }

    /// Uniform in `±sqrt(6 / fan_in)`, for layers followed by a relu.
    pub fn uniform_relu(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let a = (6.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| self.rng.range(-a, a));
        self.params.insert(name, t);
    }

    pub fn fill(&mut self, name: &str, shape: &[usize], value: f64) {
        self.params.insert(name, Tensor::full(shape, value));
    }
}

/// Per-sequence network input. `scene` is `[T,H,W,3]`, `attention` is
/// `[T,H,W,1]`, `tokens` holds the padded token ids.
#[derive(Clone, Debug)]
pub struct SequenceInput<'a> {
    pub scene: &'a Tensor,
    pub attention: &'a Tensor,
    pub tokens: &'a [u16],
}

/// Graph handles produced by one forward pass over a sequence.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[T,1]` accident probabilities.
    pub prob: Var,
    /// `[T, h*w]` spatial risk distributions.
    pub risk_map: Var,
    /// `[T,c]` pooled context features.
    pub context: Var,
    /// `[T,2d]` temporal states.
    pub states: Var,
    /// `[T,h,w,c]` visual-centric features.
    pub visual: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    pub variant: Variant,
    pub mode: TemporalMode,
    pub params: Params,
}

pub const LAMBDA_MAX: f64 = 0.2;
pub const LAMBDA_INIT: f64 = 0.1;

impl Model {
    pub fn new(dims: ModelDims, variant: Variant, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut params = Params::default();
        let mut rng = Rng::new(seed);
        {
            let mut init = Init {
                params: &mut params,
                rng: &mut rng,
            };
            encoders::init(&mut init, &dims, variant);
            fusion::init(&mut init, &dims, variant);
            temporal::init(&mut init, &dims, variant);
            head::init(&mut init, &dims);
        }
        Ok(Self {
            dims,
            variant,
            mode: TemporalMode::Bidirectional,
            params,
        })
    }

    pub fn lambdas(&self) -> (f64, f64) {
        let l1 = self.params.get(head::LAMBDA1).map(|t| t.item()).unwrap_or(0.0);
        let l2 = self.params.get(head::LAMBDA2).map(|t| t.item()).unwrap_or(0.0);
        (l1, l2)
    }

    pub fn set_lambdas(&mut self, l1: f64, l2: f64) {
        self.params
            .insert(head::LAMBDA1, Tensor::full(&[], l1.clamp(0.0, LAMBDA_MAX)));
        self.params
            .insert(head::LAMBDA2, Tensor::full(&[], l2.clamp(0.0, LAMBDA_MAX)));
    }

    fn check_input(&self, input: &SequenceInput) -> Result<usize> {
        let d = &self.dims;
        let s = input.scene.shape();
        if s.len() != 4 || s[1] != d.grid || s[2] != d.grid || s[3] != 3 {
            return Err(Error::Dimension(format!(
                "scene must be [T,{g},{g},3], got {s:?}",
                g = d.grid
            )));
        }
        let a = input.attention.shape();
        if a != [s[0], d.grid, d.grid, 1] {
            return Err(Error::Dimension(format!(
                "attention must be [{},{g},{g},1], got {a:?}",
                s[0],
                g = d.grid
            )));
        }
        ensure_finite(input.scene, "scene input")?;
        ensure_finite(input.attention, "attention input")?;
        Ok(s[0])
    }

    /// Builds the full forward pass for one sequence on `g`.
    pub fn forward(&self, g: &mut Graph, input: &SequenceInput) -> Result<ForwardVars> {
        self.check_input(input)?;
        let p = &self.params;
        let d = &self.dims;
        let scene = g.leaf(input.scene.clone());
        let attention = g.leaf(input.attention.clone());

        let f_r = encoders::encode_scene(g, p, scene)?;
        let f_c = encoders::encode_text(g, p, d, input.tokens)?;
        let f_f = match self.variant {
            Variant::NoRefiner => encoders::raw_attention(g, p, d, attention)?,
            _ => encoders::refine_attention(g, p, d, attention)?.features,
        };

        let (visual, context) = match self.variant {
            Variant::NoFusion => fusion::mean_fusion(g, f_r, f_c, f_f)?,
            _ => {
                let aligned = fusion::align_and_recalibrate(g, p, d, [f_r, f_c, f_f])?;
                let fused = fusion::coat_fuse(g, p, d, &aligned)?;
                let visual = fusion::biba_visual(g, p, d, fused)?;
                let context = fusion::biba_context_vec(g, p, d, fused)?;
                (visual, context)
            }
        };

        let pooled = temporal::pool_inputs(g, visual, context)?;
        let states = match self.variant {
            Variant::NoRecurrence => temporal::frame_mlp(g, p, pooled)?,
            _ => temporal::run_bidirectional(g, p, d, pooled, self.mode)?,
        };
        let prob = head::predict_probability(g, p, d, states, context)?;
        let risk_map = head::risk_map(g, p, d, states, visual)?;
        Ok(ForwardVars {
            prob,
            risk_map,
            context,
            states,
            visual,
        })
    }
}

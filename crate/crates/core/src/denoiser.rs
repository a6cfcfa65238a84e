//! The clean-state predictor `x_θ(x_t, t, x̂_0)`.
//!
//! Layout, for a sequence of `L` positions and hidden width `H`:
//!
//! 1. `h = embed[x_t]` (`(V+1)×H` table, mask included).
//! 2. Self-conditioning, when attached: `s = x̂_0 · proj` with `proj: V×H`.
//!    Add mode uses `h + s`; concat mode uses `[h ‖ s] · fuse + b` with
//!    `fuse: 2H×H`. The null estimate is the zero matrix.
//! 3. Optional time embedding `+ time_embed[t]`.
//! 4. `B` mixing blocks, each `h += tanh(P·h)` then `h += tanh(h·W + c)`,
//!    where `P: L×L` mixes positions in both directions.
//! 5. `softmax(h·head + b)` over the `V` clean tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{CleanStateEstimate, LatentSeq, Vocab};
use crate::error::{Error, Result};
use crate::gradcore::{Graph, NodeId, ParamKey, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Concat,
    Add,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub vocab: usize,
    pub seq_len: usize,
    pub hidden: usize,
    pub blocks: usize,
    /// `Some(T)` enables a learned `(T+1)×H` time embedding.
    pub time_steps: Option<usize>,
}

impl DenoiserConfig {
    /// `V=4, L=16, H=32, B=2`, no time embedding.
    pub fn desk_default() -> Self {
        Self {
            vocab: 4,
            seq_len: 16,
            hidden: 32,
            blocks: 2,
            time_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        Vocab::new(self.vocab)?;
        if self.hidden < 2 {
            return Err(Error::Config("hidden width must be at least 2".into()));
        }
        if self.seq_len == 0 {
            return Err(Error::Config("sequence length must be positive".into()));
        }
        if self.time_steps == Some(0) {
            return Err(Error::Config("time embedding needs at least one step".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixBlock {
    pub pos_mix: Tensor,
    pub channel: Tensor,
    pub channel_bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FuseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfCondLayers {
    pub fusion: FusionMode,
    pub proj: Tensor,
    /// Present exactly in concat mode.
    pub fuse: Option<FuseLayer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub embed: Tensor,
    pub time_embed: Option<Tensor>,
    pub self_cond: Option<SelfCondLayers>,
    pub blocks: Vec<MixBlock>,
    pub head: Tensor,
    pub head_bias: Tensor,
}

/// How the self-conditioning input enters a graph.
#[derive(Clone, Copy, Debug)]
pub enum ScInput<'a> {
    Null,
    Estimate(&'a CleanStateEstimate),
    /// An existing `L×V` node, e.g. a stop-gradient of an earlier pass.
    Node(NodeId),
}

/// Parameter nodes registered in one graph, in [`DenoiserParams::named`] order.
#[derive(Clone, Debug)]
pub struct ParamHandles {
    embed: NodeId,
    time_embed: Option<NodeId>,
    proj: Option<NodeId>,
    fuse: Option<(NodeId, NodeId)>,
    blocks: Vec<(NodeId, NodeId, NodeId)>,
    head: NodeId,
    head_bias: NodeId,
}

impl DenoiserParams {
    /// Fresh random weights. `self_cond = Some(mode)` adds small random
    /// self-conditioning layers; retrofitting a trained model goes through
    /// [`DenoiserParams::attach_self_conditioning`] instead.
    pub fn init<R: Rng + ?Sized>(
        config: DenoiserConfig,
        self_cond: Option<FusionMode>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (v, l, h) = (config.vocab, config.seq_len, config.hidden);
        let embed = Tensor::random_normal(v + 1, h, 1.0, rng);
        let time_embed = config
            .time_steps
            .map(|steps| Tensor::random_normal(steps + 1, h, 0.1, rng));
        let blocks = (0..config.blocks)
            .map(|_| MixBlock {
                pos_mix: Tensor::random_normal(l, l, 1.0 / (l as f64).sqrt(), rng),
                channel: Tensor::random_normal(h, h, 1.0 / (h as f64).sqrt(), rng),
                channel_bias: Tensor::zeros(1, h),
            })
            .collect();
        let head = Tensor::random_normal(h, v, 0.1 / (h as f64).sqrt(), rng);
        let self_cond = self_cond.map(|fusion| SelfCondLayers {
            fusion,
            proj: Tensor::random_normal(v, h, 0.1, rng),
            fuse: (fusion == FusionMode::Concat).then(|| FuseLayer {
                weight: Tensor::random_normal(2 * h, h, 1.0 / ((2 * h) as f64).sqrt(), rng),
                bias: Tensor::zeros(1, h),
            }),
        });
        Ok(Self {
            config,
            embed,
            time_embed,
            self_cond,
            blocks,
            head,
            head_bias: Tensor::zeros(1, v),
        })
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.config.vocab).expect("validated config")
    }

    pub fn fusion(&self) -> Option<FusionMode> {
        self.self_cond.as_ref().map(|sc| sc.fusion)
    }

    /// Adds self-conditioning layers that leave every output unchanged.
    ///
    /// Add mode gets `proj = 0`. Concat mode gets `fuse = [I; 0]` with zero
    /// bias and a small random `proj`; zeroing both would make each block's
    /// gradient vanish through the other. Existing weights are copied as is.
    pub fn attach_self_conditioning<R: Rng + ?Sized>(
        &self,
        fusion: FusionMode,
        rng: &mut R,
    ) -> Result<Self> {
        if self.self_cond.is_some() {
            return Err(Error::Usage("self-conditioning layers are already attached".into()));
        }
        let (v, h) = (self.config.vocab, self.config.hidden);
        let (proj, fuse) = match fusion {
            FusionMode::Add => (Tensor::zeros(v, h), None),
            FusionMode::Concat => {
                let mut weight = Tensor::zeros(2 * h, h);
                for i in 0..h {
                    weight.set(i, i, 1.0);
                }
                let fuse = FuseLayer {
                    weight,
                    bias: Tensor::zeros(1, h),
                };
                (Tensor::random_normal(v, h, 0.1, rng), Some(fuse))
            }
        };
        let mut out = self.clone();
        out.self_cond = Some(SelfCondLayers { fusion, proj, fuse });
        Ok(out)
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("embed".into(), &self.embed)];
        if let Some(t) = &self.time_embed {
            out.push(("time_embed".into(), t));
        }
        if let Some(sc) = &self.self_cond {
            out.push(("sc.proj".into(), &sc.proj));
            if let Some(f) = &sc.fuse {
                out.push(("sc.fuse.weight".into(), &f.weight));
                out.push(("sc.fuse.bias".into(), &f.bias));
            }
        }
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.pos_mix"), &b.pos_mix));
            out.push((format!("block{i}.channel"), &b.channel));
            out.push((format!("block{i}.channel_bias"), &b.channel_bias));
        }
        out.push(("head".into(), &self.head));
        out.push(("head_bias".into(), &self.head_bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![("embed".into(), &mut self.embed)];
        if let Some(t) = &mut self.time_embed {
            out.push(("time_embed".into(), t));
        }
        if let Some(sc) = &mut self.self_cond {
            out.push(("sc.proj".into(), &mut sc.proj));
            if let Some(f) = &mut sc.fuse {
                out.push(("sc.fuse.weight".into(), &mut f.weight));
                out.push(("sc.fuse.bias".into(), &mut f.bias));
            }
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.pos_mix"), &mut b.pos_mix));
            out.push((format!("block{i}.channel"), &mut b.channel));
            out.push((format!("block{i}.channel_bias"), &mut b.channel_bias));
        }
        out.push(("head".into(), &mut self.head));
        out.push(("head_bias".into(), &mut self.head_bias));
        out
    }

    /// Rebuilds parameters from named tensors, e.g. a loaded checkpoint.
    pub fn from_named(
        config: DenoiserConfig,
        fusion: Option<FusionMode>,
        tensors: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::stream(0, 0);
        let mut params = Self::init(config, fusion, &mut rng)?;
        let slots = params.named_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, found {}",
                slots.len(),
                tensors.len()
            )));
        }
        for ((name, slot), (got_name, value)) in slots.into_iter().zip(tensors) {
            if name != got_name {
                return Err(Error::Config(format!(
                    "expected tensor `{name}`, found `{got_name}`"
                )));
            }
            if slot.shape() != value.shape() {
                return Err(Error::Config(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
        Ok(params)
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every tensor as a trainable leaf; `ParamKey(i)` is the `i`-th
    /// entry of [`DenoiserParams::named`].
    pub fn register(&self, g: &mut Graph) -> ParamHandles {
        let mut key = 0usize;
        let mut add = |g: &mut Graph, t: &Tensor| {
            let id = g.param(ParamKey(key), t.clone());
            key += 1;
            id
        };
        let embed = add(g, &self.embed);
        let time_embed = self.time_embed.as_ref().map(|t| add(g, t));
        let (proj, fuse) = match &self.self_cond {
            Some(sc) => {
                let proj = add(g, &sc.proj);
                let fuse = sc
                    .fuse
                    .as_ref()
                    .map(|f| (add(g, &f.weight), add(g, &f.bias)));
                (Some(proj), fuse)
            }
            None => (None, None),
        };
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                (
                    add(g, &b.pos_mix),
                    add(g, &b.channel),
                    add(g, &b.channel_bias),
                )
            })
            .collect();
        let head = add(g, &self.head);
        let head_bias = add(g, &self.head_bias);
        ParamHandles {
            embed,
            time_embed,
            proj,
            fuse,
            blocks,
            head,
            head_bias,
        }
    }

    /// Row of the time-embedding table for step `t` of a `steps`-step
    /// schedule. The model's own resolution must be a multiple of `steps`.
    pub fn time_index(&self, t: usize, steps: usize) -> Result<usize> {
        match self.config.time_steps {
            None => Ok(0),
            Some(own) if steps > 0 && own % steps == 0 && t <= steps => Ok(t * (own / steps)),
            Some(own) => Err(Error::Config(format!(
                "time embedding trained with {own} steps cannot serve a {steps}-step schedule"
            ))),
        }
    }

    /// Appends one forward pass to `g` and returns the `L×V` probability node.
    pub fn build(
        &self,
        g: &mut Graph,
        handles: &ParamHandles,
        x_t: &LatentSeq,
        time_index: usize,
        sc: ScInput<'_>,
    ) -> Result<NodeId> {
        let (v, l) = (self.config.vocab, self.config.seq_len);
        if x_t.len() != l || x_t.vocab().size() != v {
            return Err(Error::Config(format!(
                "model expects length {l} over {v} tokens, got length {} over {}",
                x_t.len(),
                x_t.vocab().size()
            )));
        }
        let mut h = g.gather(handles.embed, x_t.tokens().to_vec())?;

        if let (Some(layers), Some(proj)) = (&self.self_cond, handles.proj) {
            let sc_node = match sc {
                ScInput::Null => g.constant(Tensor::zeros(l, v)),
                ScInput::Estimate(est) => {
                    if est.len() != l || est.vocab() != v {
                        return Err(Error::Config(format!(
                            "self-conditioning estimate is {}x{}, expected {l}x{v}",
                            est.len(),
                            est.vocab()
                        )));
                    }
                    g.constant(Tensor::from_vec(l, v, est.dense())?)
                }
                ScInput::Node(id) => {
                    if g.shape_of(id) != (l, v) {
                        return Err(Error::Config("self-conditioning node has wrong shape".into()));
                    }
                    id
                }
            };
            let projected = g.matmul(sc_node, proj)?;
            h = match (layers.fusion, handles.fuse) {
                (FusionMode::Add, _) => g.add(h, projected)?,
                (FusionMode::Concat, Some((w, b))) => {
                    let cat = g.concat_cols(h, projected)?;
                    let fused = g.matmul(cat, w)?;
                    g.add_row(fused, b)?
                }
                (FusionMode::Concat, None) => {
                    return Err(Error::Config("concat fusion without fuse layer".into()))
                }
            };
        }

        if let Some(te) = handles.time_embed {
            let rows = g.gather(te, vec![time_index; l])?;
            h = g.add(h, rows)?;
        }

        for &(pos_mix, channel, bias) in &handles.blocks {
            let mixed = g.matmul(pos_mix, h)?;
            let act = g.tanh(mixed)?;
            h = g.add(h, act)?;
            let ch = g.matmul(h, channel)?;
            let ch = g.add_row(ch, bias)?;
            let act = g.tanh(ch)?;
            h = g.add(h, act)?;
        }

        let logits = g.matmul(h, handles.head)?;
        let logits = g.add_row(logits, handles.head_bias)?;
        g.softmax_rows(logits)
    }

    /// One standalone forward pass.
    pub fn forward(
        &self,
        x_t: &LatentSeq,
        steps: usize,
        sc: &CleanStateEstimate,
    ) -> Result<CleanStateEstimate> {
        let mut g = Graph::new();
        let handles = self.register(&mut g);
        let t_idx = self.time_index(x_t.t(), steps)?;
        let input = if sc.is_null() {
            ScInput::Null
        } else {
            ScInput::Estimate(sc)
        };
        let probs = self.build(&mut g, &handles, x_t, t_idx, input)?;
        g.set_output(probs)?;
        let out = g.forward_eval(&[])?;
        CleanStateEstimate::from_probs(out.rows(), out.cols(), out.as_slice().to_vec())
    }
}

/// Anything that maps a latent (and optional previous estimate) to a
/// clean-state estimate.
pub trait Denoiser: Sync {
    fn vocab(&self) -> Vocab;

    /// `steps` is the `T` of the schedule the latent's `t` refers to.
    fn denoise(
        &self,
        x_t: &LatentSeq,
        steps: usize,
        sc: &CleanStateEstimate,
    ) -> Result<CleanStateEstimate>;
}

impl Denoiser for DenoiserParams {
    fn vocab(&self) -> Vocab {
        DenoiserParams::vocab(self)
    }

    fn denoise(
        &self,
        x_t: &LatentSeq,
        steps: usize,
        sc: &CleanStateEstimate,
    ) -> Result<CleanStateEstimate> {
        self.forward(x_t, steps, sc)
    }
}

use serde::{Deserialize, Serialize};

use super::lora::{lora_forward, LoraAdapter, LoraSettings, LoraVars};
use super::params::{Bound, ParamId, ParamStore};
use super::{Embeddings, Encoder, EncoderInputs, Mode, Strategy};
use crate::autodiff::{Tape, Tensor, Var};
use crate::{Error, Result, Rng, Scalar};

/// Shape of both towers. Both project into the same `embed_dim` space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TowerConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    /// Context tokens placed before each class token on the text side.
    pub ctx_len: usize,
    /// Needed to size the prompt bank.
    pub num_classes: usize,
    /// Seed of the frozen backbone weights and shared context tokens.
    pub seed: u64,
    /// Seed of adapter and prompt initialization.
    pub adapter_seed: u64,
    pub lora: LoraSettings,
    pub tau: f64,
}

impl Default for TowerConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden_dim: 16,
            embed_dim: 16,
            num_blocks: 2,
            ctx_len: 4,
            num_classes: 10,
            seed: 0,
            adapter_seed: 0,
            lora: LoraSettings::default(),
            tau: 0.01,
        }
    }
}

impl TowerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("num_blocks", self.num_blocks),
            ("ctx_len", self.ctx_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        self.lora.validate()
    }
}

// row-vector convention: a weight of shape out×in maps token rows via h·Wᵀ
#[derive(Clone, Debug)]
struct Linear {
    weight: ParamId,
    adapter: Option<usize>,
}

#[derive(Clone, Debug)]
struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Clone, Debug)]
struct Tower {
    input: ParamId,
    blocks: Vec<Block>,
    projector: ParamId,
}

/// Learnable per-class context vectors (`K × ctx_len × input_dim`). The
/// class tokens that follow them come from the task and stay fixed.
#[derive(Clone, Debug)]
pub struct PromptBank {
    pub context: ParamId,
    pub classes: usize,
    pub ctx_len: usize,
}

/// Vision tower `g(·; θ_v)` and text tower `f(·; θ_t)`.
///
/// Each tower reads a sequence of `ctx_len` context tokens followed by one
/// content token (an image, or a class token) through an input embedding,
/// `num_blocks` residual single-head causal attention blocks with a tanh
/// feed-forward, and a final projector applied to the content position,
/// followed by row normalization. Both towers start from identical backbone
/// weights and the same context, which stands in for a pretrained, aligned
/// pair: at initialization an image equal to a class token embeds exactly
/// onto that class.
///
/// Context positions never see the content token, so their states are
/// computed once per forward and shared by every content row.
#[derive(Clone, Debug)]
pub struct TwoTowerModel<T = f64> {
    cfg: TowerConfig,
    strategy: Strategy,
    params: ParamStore<T>,
    vision: Tower,
    text: Tower,
    vision_context: ParamId,
    text_context: ParamId,
    prompt: Option<PromptBank>,
    adapters: Vec<LoraAdapter>,
    tau: T,
}

struct Init<'a> {
    rng: &'a mut Rng,
    hidden: usize,
}

impl Init<'_> {
    // input and projector are semi-orthogonal so cosines survive the towers
    fn tower_weights<T: Scalar>(&mut self, cfg: &TowerConfig) -> Vec<(String, Tensor<T>)> {
        let h = self.hidden;
        let scale = 0.5 / (h as f64).sqrt();
        let mut out = vec![("input".to_string(), self.rng.orthogonal(h, cfg.input_dim))];
        for b in 0..cfg.num_blocks {
            for (name, gain) in [("q", 2.0), ("k", 2.0), ("v", 1.0), ("out", 1.0), ("ff_in", 1.0), ("ff_out", 1.0)] {
                out.push((format!("block{b}.{name}"), self.rng.gaussian(&[h, h], gain * scale)));
            }
        }
        out.push(("projector".to_string(), self.rng.orthogonal(cfg.embed_dim, h)));
        out
    }
}

/// Builds both towers with the trainable mask set for `strategy`.
pub fn build_model<T: Scalar>(cfg: &TowerConfig, strategy: Strategy) -> Result<TwoTowerModel<T>> {
    cfg.validate()?;
    if strategy == Strategy::Lora && cfg.lora.rank >= cfg.hidden_dim {
        return Err(Error::Config(format!(
            "LoRA rank {} must be below the smallest adapted extent {}",
            cfg.lora.rank, cfg.hidden_dim
        )));
    }
    let base = Rng::new(cfg.seed);
    let mut backbone_rng = base.fork(0);
    let weights: Vec<(String, Tensor<T>)> = Init {
        rng: &mut backbone_rng,
        hidden: cfg.hidden_dim,
    }
    .tower_weights(cfg);
    let context: Tensor<T> = base
        .fork(1)
        .gaussian(&[cfg.ctx_len, cfg.input_dim], 0.1 / (cfg.input_dim as f64).sqrt());
    let mut adapter_rng = Rng::new(cfg.adapter_seed).fork(2);

    let mut params = ParamStore::new();
    let mut adapters = Vec::new();
    let mut build_tower = |prefix: &str, params: &mut ParamStore<T>| -> Tower {
        let mut ids = Vec::with_capacity(weights.len());
        for (name, w) in &weights {
            let trainable = strategy == Strategy::Lvp && prefix == "vision" && name == "projector";
            ids.push(params.insert(format!("{prefix}.{name}"), w.clone(), trainable));
        }
        let mut attach = |id: ParamId, adapt: bool, params: &mut ParamStore<T>| -> Linear {
            if !(adapt && strategy == Strategy::Lora) {
                return Linear { weight: id, adapter: None };
            }
            let target = params.name(id).to_string();
            let (m, n) = (params.get(id).rows(), params.get(id).cols());
            let r = cfg.lora.rank;
            let a = params.insert(format!("{target}.lora_a"), adapter_rng.kaiming(&[r, n]), true);
            let b = params.insert(format!("{target}.lora_b"), Tensor::zeros(&[m, r]), true);
            adapters.push(LoraAdapter {
                target,
                target_id: id,
                a,
                b,
                rank: r,
                gamma: cfg.lora.gamma(),
                dropout: cfg.lora.dropout,
            });
            Linear {
                weight: id,
                adapter: Some(adapters.len() - 1),
            }
        };
        let blocks = (0..cfg.num_blocks)
            .map(|b| {
                let base = 1 + 6 * b;
                Block {
                    q: attach(ids[base], true, params),
                    k: attach(ids[base + 1], true, params),
                    v: attach(ids[base + 2], true, params),
                    out: attach(ids[base + 3], false, params),
                    ff_in: attach(ids[base + 4], false, params),
                    ff_out: attach(ids[base + 5], false, params),
                }
            })
            .collect();
        Tower {
            input: ids[0],
            blocks,
            projector: ids[ids.len() - 1],
        }
    };
    let vision = build_tower("vision", &mut params);
    let text = build_tower("text", &mut params);

    let vision_context = params.insert("vision.context", context.clone(), false);
    let text_context = params.insert("text.context", context.clone(), false);
    let prompt = if strategy == Strategy::Prompt {
        let k = cfg.num_classes;
        let mut bank = Vec::with_capacity(k * context.numel());
        for _ in 0..k {
            bank.extend_from_slice(context.data());
        }
        let bank = Tensor::new(vec![k, context.rows(), cfg.input_dim], bank)?;
        Some(PromptBank {
            context: params.insert("prompt.context", bank, true),
            classes: k,
            ctx_len: context.rows(),
        })
    } else {
        None
    };

    Ok(TwoTowerModel {
        cfg: cfg.clone(),
        strategy,
        params,
        vision,
        text,
        vision_context,
        text_context,
        prompt,
        adapters,
        tau: T::lit(cfg.tau),
    })
}

impl<T: Scalar> TwoTowerModel<T> {
    pub fn config(&self) -> &TowerConfig {
        &self.cfg
    }

    pub fn prompt_bank(&self) -> Option<&PromptBank> {
        self.prompt.as_ref()
    }

    fn adapter_vars(&self, bound: &Bound, idx: Option<usize>) -> Option<LoraVars> {
        idx.map(|i| {
            let ad = &self.adapters[i];
            LoraVars {
                a: bound[ad.a],
                b: bound[ad.b],
                gamma: ad.gamma,
                dropout: ad.dropout,
            }
        })
    }

    fn linear(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        layer: &Linear,
        x: Var,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let ad = self.adapter_vars(bound, layer.adapter);
        lora_forward(tape, x, bound[layer.weight], ad.as_ref(), mode)
    }

    /// Content embeddings for `content` rows behind `prefix`, which holds
    /// either one shared context or one context per content row.
    fn run_tower(
        &self,
        tower: &Tower,
        tape: &mut Tape<T>,
        bound: &Bound,
        prefix: Var,
        content: Var,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let l = self.cfg.ctx_len;
        let mut hp = tape.matmul_nt(prefix, bound[tower.input])?;
        let mut hc = tape.matmul_nt(content, bound[tower.input])?;
        let last = tower.blocks.len() - 1;
        for (b, block) in tower.blocks.iter().enumerate() {
            let qc = self.linear(tape, bound, &block.q, hc, mode)?;
            let kc = self.linear(tape, bound, &block.k, hc, mode)?;
            let vc = self.linear(tape, bound, &block.v, hc, mode)?;
            let kp = self.linear(tape, bound, &block.k, hp, mode)?;
            let vp = self.linear(tape, bound, &block.v, hp, mode)?;
            let att = tape.prefix_attention(qc, kc, vc, kp, vp, l)?;
            hc = self.residual(tape, bound, block, hc, att, mode)?;
            // the prefix after the last block feeds nothing
            if b < last {
                let qp = self.linear(tape, bound, &block.q, hp, mode)?;
                let att = tape.causal_attention(qp, kp, vp, l)?;
                hp = self.residual(tape, bound, block, hp, att, mode)?;
            }
        }
        let e = tape.matmul_nt(hc, bound[tower.projector])?;
        tape.l2_normalize_rows(e)
    }

    fn residual(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        block: &Block,
        h: Var,
        att: Var,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let o = self.linear(tape, bound, &block.out, att, mode)?;
        let h = tape.add(h, o)?;
        let f = self.linear(tape, bound, &block.ff_in, h, mode)?;
        let f = tape.tanh(f);
        let f = self.linear(tape, bound, &block.ff_out, f, mode)?;
        tape.add(h, f)
    }

    fn check_width(&self, t: &Tensor<T>, op: &'static str) -> Result<()> {
        if t.cols() != self.cfg.input_dim {
            return Err(Error::Dimension {
                op,
                left: vec![t.rows(), t.cols()],
                right: vec![self.cfg.input_dim],
            });
        }
        Ok(())
    }

    /// Vision embeddings `f_i = g(x_i; θ_v)` on the tape, one per image row.
    pub fn encode_images_on(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        images: &Tensor<T>,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        self.check_width(images, "encode_images")?;
        let x = tape.constant(images);
        self.run_tower(&self.vision, tape, bound, bound[self.vision_context], x, mode)
    }

    /// Text embeddings `t_k = f(c_k; θ_t)` on the tape, one per class token row.
    pub fn encode_classes_on(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        class_tokens: &Tensor<T>,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        self.check_width(class_tokens, "encode_classes")?;
        let k = class_tokens.rows();
        if k < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {k}")));
        }
        let prefix = match &self.prompt {
            Some(bank) if bank.classes != k => {
                return Err(Error::Config(format!(
                    "prompt bank holds {} classes but {k} class tokens were given",
                    bank.classes
                )))
            }
            Some(bank) => bound[bank.context],
            None => bound[self.text_context],
        };
        let x = tape.constant(class_tokens);
        self.run_tower(&self.text, tape, bound, prefix, x, mode)
    }

    /// Evaluation-mode image embeddings.
    pub fn encode_images(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let v = self.encode_images_on(&mut tape, &bound, images, &mut Mode::Eval)?;
        Ok(tape.to_tensor(v))
    }

    /// Evaluation-mode class embeddings.
    pub fn encode_classes(&self, class_tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let v = self.encode_classes_on(&mut tape, &bound, class_tokens, &mut Mode::Eval)?;
        Ok(tape.to_tensor(v))
    }
}

impl<T: Scalar> Encoder<T> for TwoTowerModel<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn strategy(&self) -> Strategy {
        self.strategy
    }

    fn tau(&self) -> T {
        self.tau
    }

    fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    fn text_frozen(&self) -> bool {
        self.params
            .iter()
            .all(|(_, name, t)| !t.requires_grad() || !(name.starts_with("text.") || name.starts_with("prompt.")))
    }

    fn embed(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        inputs: &EncoderInputs<'_, T>,
        mode: &mut Mode<'_>,
    ) -> Result<Embeddings> {
        let images = self.encode_images_on(tape, bound, inputs.images, mode)?;
        let classes = self.encode_classes_on(tape, bound, inputs.classes, mode)?;
        Ok(Embeddings { images, classes })
    }
}

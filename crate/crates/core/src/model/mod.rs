//! 3D ViT encoder with a UNETR-style skip-connection decoder and prompt
//! injection (shallow and deep variants).

mod forward;
mod loss;

pub use forward::ForwardPass;
pub use loss::{cross_entropy_loss, soft_dice_loss};

use indexmap::IndexMap;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{NdArray, Scalar};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Architecture of the segmentation backbone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input spatial extents (voxels), each divisible by `patch`.
    pub spatial: [usize; 3],
    /// Input channels (CT-like + PET-like).
    pub in_channels: usize,
    /// Cubic patch edge; must be a power of two.
    pub patch: usize,
    /// Token embedding dimension, divisible by `heads`.
    pub embed_dim: usize,
    /// Number of encoder layers.
    pub layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
    /// Encoder layers whose patch-token states feed the decoder; sorted,
    /// last element must equal `layers`.
    pub skip_layers: Vec<usize>,
    /// Channel plan for the merge stages (one per non-final skip layer).
    pub decoder_channels: Vec<usize>,
    /// Channels of the final refinement block before the 1³ head.
    pub final_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            spatial: [32, 32, 32],
            in_channels: 2,
            patch: 8,
            embed_dim: 256,
            layers: 12,
            heads: 8,
            mlp_dim: 1024,
            num_classes: 3,
            skip_layers: vec![3, 6, 9, 12],
            decoder_channels: vec![64, 32, 16],
            final_channels: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for &e in &self.spatial {
            if e == 0 || e % self.patch != 0 {
                return Err(Error::Config(format!(
                    "spatial extent {} not divisible by patch {}",
                    e, self.patch
                )));
            }
        }
        if !self.patch.is_power_of_two() {
            return Err(Error::Config(format!(
                "patch edge {} must be a power of two",
                self.patch
            )));
        }
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.layers == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::Config("layers/classes/channels must be positive".into()));
        }
        let mut prev = 0;
        for &s in &self.skip_layers {
            if s <= prev || s > self.layers {
                return Err(Error::Config(format!(
                    "skip_layers {:?} must be sorted and within 1..={}",
                    self.skip_layers, self.layers
                )));
            }
            prev = s;
        }
        if self.skip_layers.last() != Some(&self.layers) {
            return Err(Error::Config(format!(
                "last skip layer must be the final layer {}",
                self.layers
            )));
        }
        if self.decoder_channels.len() + 1 != self.skip_layers.len() {
            return Err(Error::Config(format!(
                "decoder_channels length {} must be one less than skip count {}",
                self.decoder_channels.len(),
                self.skip_layers.len()
            )));
        }
        if self.final_channels == 0 {
            return Err(Error::Config("final_channels must be positive".into()));
        }
        Ok(())
    }

    /// Patch-grid extents per axis.
    pub fn grid(&self) -> [usize; 3] {
        [
            self.spatial[0] / self.patch,
            self.spatial[1] / self.patch,
            self.spatial[2] / self.patch,
        ]
    }

    /// Token count n = H·W·D / K³.
    pub fn token_count(&self) -> usize {
        let g = self.grid();
        g[0] * g[1] * g[2]
    }

    pub fn patch_features(&self) -> usize {
        self.patch * self.patch * self.patch * self.in_channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Where and how many prompts are injected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    None,
    Shallow,
    Deep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub mode: PromptMode,
    /// Prompt count per injection site.
    pub count: usize,
    /// Layer indices (1-based) where fresh prompts are injected. Deep mode
    /// only; shallow mode is always `[1]`.
    pub sites: Vec<usize>,
    /// Half-width of the uniform init range; 0 selects the fan-in default
    /// sqrt(6 / (K³·C + d)).
    pub init_scale: f64,
}

impl PromptConfig {
    pub fn none() -> Self {
        PromptConfig {
            mode: PromptMode::None,
            count: 0,
            sites: vec![],
            init_scale: 0.0,
        }
    }

    pub fn shallow(count: usize) -> Self {
        PromptConfig {
            mode: PromptMode::Shallow,
            count,
            sites: vec![1],
            init_scale: 0.0,
        }
    }

    /// Deep prompts at layer 1 plus the layer after each non-final skip
    /// export. For skip layers {3,6,9,12} this is {1,4,7,10}.
    pub fn deep_default_sites(model: &ModelConfig, count: usize) -> Self {
        let mut sites = vec![1];
        for &s in &model.skip_layers {
            if s < model.layers && s + 1 <= model.layers && !sites.contains(&(s + 1)) {
                sites.push(s + 1);
            }
        }
        sites.sort_unstable();
        PromptConfig {
            mode: PromptMode::Deep,
            count,
            sites,
            init_scale: 0.0,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        match self.mode {
            PromptMode::None => {
                if self.count != 0 {
                    return Err(Error::Config("mode none requires prompt count 0".into()));
                }
            }
            PromptMode::Shallow => {
                if self.sites != [1] {
                    return Err(Error::Config(format!(
                        "shallow mode requires sites == [1], got {:?}",
                        self.sites
                    )));
                }
            }
            PromptMode::Deep => {
                if self.sites.is_empty() {
                    return Err(Error::Config("deep mode requires at least one site".into()));
                }
                let mut prev = 0;
                for &s in &self.sites {
                    if s <= prev || s > model.layers {
                        return Err(Error::Config(format!(
                            "prompt sites {:?} must be sorted and within 1..={}",
                            self.sites, model.layers
                        )));
                    }
                    prev = s;
                }
            }
        }
        Ok(())
    }

    pub fn active_sites(&self) -> &[usize] {
        match self.mode {
            PromptMode::None => &[],
            _ => &self.sites,
        }
    }
}

/// One named parameter tensor.
#[derive(Clone, Debug)]
pub struct Param<F: Scalar> {
    pub value: NdArray<F>,
    pub learnable: bool,
}

/// One merge stage of the decoder.
#[derive(Clone, Debug)]
pub struct StageSpec {
    pub index: usize,
    /// Skip layer merged at this stage (deep → shallow order).
    pub skip_layer: usize,
    /// 2 for a stride-2 transpose conv, 1 for a stride-1 conv stage.
    pub stride: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    /// Stride-2 steps in the skip path chain up to this stage's resolution.
    pub skip_doublings: usize,
}

/// Resolved decoder structure for a config.
#[derive(Clone, Debug)]
pub struct DecoderPlan {
    pub stages: Vec<StageSpec>,
    /// Channel pairs for trailing stride-2 transpose convs after all merges.
    pub leftover: Vec<(usize, usize)>,
    /// Input channels of the final refinement conv.
    pub final_in: usize,
}

impl DecoderPlan {
    pub fn build(cfg: &ModelConfig) -> DecoderPlan {
        let doublings_total = cfg.patch.trailing_zeros() as usize;
        let merges = cfg.skip_layers.len() - 1;
        let mut stages = Vec::with_capacity(merges);
        let mut in_ch = cfg.embed_dim;
        let mut used = 0;
        for j in 0..merges {
            let stride = if used < doublings_total { 2 } else { 1 };
            if stride == 2 {
                used += 1;
            }
            // merge order: deepest non-final skip first
            let skip_layer = cfg.skip_layers[merges - 1 - j];
            let out_ch = cfg.decoder_channels[j];
            stages.push(StageSpec {
                index: j,
                skip_layer,
                stride,
                in_ch,
                out_ch,
                skip_doublings: used,
            });
            in_ch = out_ch;
        }
        let mut leftover = Vec::new();
        let remaining = doublings_total - used;
        for t in 0..remaining {
            let out = if t + 1 == remaining { cfg.final_channels } else { in_ch };
            leftover.push((in_ch, out));
            in_ch = out;
        }
        DecoderPlan {
            stages,
            leftover,
            final_in: in_ch,
        }
    }
}

/// The full parameter set: encoder, decoder, head, and prompt matrices.
///
/// Parameters live in an insertion-ordered registry keyed by stable names,
/// which checkpointing, counting, and freeze enforcement all walk.
#[derive(Clone, Debug)]
pub struct SegModel<F: Scalar> {
    pub config: ModelConfig,
    pub prompt: PromptConfig,
    params: IndexMap<String, Param<F>>,
}

impl<F: Scalar> SegModel<F> {
    /// Deterministic initialization from a seed.
    pub fn init(config: ModelConfig, prompt: PromptConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        prompt.validate(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();

        let d = config.embed_dim;
        let n = config.token_count();
        let pf = config.patch_features();

        let normal = |params: &mut IndexMap<String, Param<F>>,
                          name: &str,
                          shape: Vec<usize>,
                          std: f64,
                          rng: &mut ChaCha8Rng| {
            let numel: usize = shape.iter().product();
            let data: Vec<F> = (0..numel)
                .map(|_| F::of_f64(rng.sample::<f64, _>(rand_distr::StandardNormal) * std))
                .collect();
            params.insert(
                name.to_string(),
                Param {
                    value: NdArray::new(shape, data).unwrap(),
                    learnable: false,
                },
            );
        };
        let zeros = |params: &mut IndexMap<String, Param<F>>, name: &str, shape: Vec<usize>| {
            params.insert(
                name.to_string(),
                Param {
                    value: NdArray::zeros(shape),
                    learnable: false,
                },
            );
        };
        let ones = |params: &mut IndexMap<String, Param<F>>, name: &str, shape: Vec<usize>| {
            params.insert(
                name.to_string(),
                Param {
                    value: NdArray::filled(shape, F::one()),
                    learnable: false,
                },
            );
        };

        normal(&mut params, "embed.w", vec![pf, d], (1.0 / pf as f64).sqrt(), &mut rng);
        zeros(&mut params, "embed.b", vec![d]);
        // positional embedding has exactly n rows; prompt rows never get one
        normal(&mut params, "embed.pos", vec![n, d], 0.02, &mut rng);

        let wstd = (1.0 / d as f64).sqrt();
        for i in 1..=config.layers {
            ones(&mut params, &format!("enc.{i}.ln1.g"), vec![d]);
            zeros(&mut params, &format!("enc.{i}.ln1.b"), vec![d]);
            for nm in ["wq", "wk", "wv", "wo"] {
                normal(&mut params, &format!("enc.{i}.msa.{nm}"), vec![d, d], wstd, &mut rng);
            }
            for nm in ["bq", "bk", "bv", "bo"] {
                zeros(&mut params, &format!("enc.{i}.msa.{nm}"), vec![d]);
            }
            ones(&mut params, &format!("enc.{i}.ln2.g"), vec![d]);
            zeros(&mut params, &format!("enc.{i}.ln2.b"), vec![d]);
            normal(&mut params, &format!("enc.{i}.mlp.w1"), vec![d, config.mlp_dim], wstd, &mut rng);
            zeros(&mut params, &format!("enc.{i}.mlp.b1"), vec![config.mlp_dim]);
            normal(
                &mut params,
                &format!("enc.{i}.mlp.w2"),
                vec![config.mlp_dim, d],
                (1.0 / config.mlp_dim as f64).sqrt(),
                &mut rng,
            );
            zeros(&mut params, &format!("enc.{i}.mlp.b2"), vec![d]);
        }

        let plan = DecoderPlan::build(&config);
        for st in &plan.stages {
            let j = st.index;
            if st.stride == 2 {
                let std = (1.0 / (st.in_ch * 8) as f64).sqrt();
                normal(&mut params, &format!("dec.{j}.up.w"), vec![st.in_ch, st.out_ch, 2, 2, 2], std, &mut rng);
            } else {
                let std = (1.0 / (st.in_ch * 27) as f64).sqrt();
                normal(&mut params, &format!("dec.{j}.up.w"), vec![st.out_ch, st.in_ch, 3, 3, 3], std, &mut rng);
            }
            zeros(&mut params, &format!("dec.{j}.up.b"), vec![st.out_ch]);
            // skip path: project d -> out_ch, with one transpose conv per doubling
            if st.skip_doublings == 0 {
                let std = (1.0 / d as f64).sqrt();
                normal(&mut params, &format!("dec.{j}.skip.0.w"), vec![st.out_ch, d, 1, 1, 1], std, &mut rng);
                zeros(&mut params, &format!("dec.{j}.skip.0.b"), vec![st.out_ch]);
            } else {
                for t in 0..st.skip_doublings {
                    let cin = if t == 0 { d } else { st.out_ch };
                    let std = (1.0 / (cin * 8) as f64).sqrt();
                    normal(&mut params, &format!("dec.{j}.skip.{t}.w"), vec![cin, st.out_ch, 2, 2, 2], std, &mut rng);
                    zeros(&mut params, &format!("dec.{j}.skip.{t}.b"), vec![st.out_ch]);
                }
            }
            let std = (1.0 / (2 * st.out_ch * 27) as f64).sqrt();
            normal(&mut params, &format!("dec.{j}.fuse.w"), vec![st.out_ch, 2 * st.out_ch, 3, 3, 3], std, &mut rng);
            zeros(&mut params, &format!("dec.{j}.fuse.b"), vec![st.out_ch]);
        }
        for (t, &(cin, cout)) in plan.leftover.iter().enumerate() {
            let std = (1.0 / (cin * 8) as f64).sqrt();
            normal(&mut params, &format!("dec.up.{t}.w"), vec![cin, cout, 2, 2, 2], std, &mut rng);
            zeros(&mut params, &format!("dec.up.{t}.b"), vec![cout]);
        }
        let std = (1.0 / (plan.final_in * 27) as f64).sqrt();
        normal(&mut params, "dec.final.w", vec![config.final_channels, plan.final_in, 3, 3, 3], std, &mut rng);
        zeros(&mut params, "dec.final.b", vec![config.final_channels]);
        let std = (1.0 / config.final_channels as f64).sqrt();
        normal(&mut params, "head.w", vec![config.num_classes, config.final_channels, 1, 1, 1], std, &mut rng);
        zeros(&mut params, "head.b", vec![config.num_classes]);

        // prompts: uniform in [-s, s], s from the embedding fan-in unless
        // overridden: s = sqrt(6 / (K³·C + d))
        let s = if prompt.init_scale > 0.0 {
            prompt.init_scale
        } else {
            (6.0 / (pf + d) as f64).sqrt()
        };
        for &site in prompt.active_sites() {
            let data: Vec<F> = (0..prompt.count * d)
                .map(|_| F::of_f64(rng.gen_range(-s..=s)))
                .collect();
            params.insert(
                format!("prompt.{site}"),
                Param {
                    value: NdArray::new(vec![prompt.count, d], data).unwrap(),
                    learnable: false,
                },
            );
        }

        Ok(SegModel { config, prompt, params })
    }

    pub fn plan(&self) -> DecoderPlan {
        DecoderPlan::build(&self.config)
    }

    pub fn param(&self, name: &str) -> &Param<F> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Param<F> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Param<F>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<F>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn total_scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn set_all_frozen(&mut self) {
        for p in self.params.values_mut() {
            p.learnable = false;
        }
    }

    /// Convert every parameter to another precision (used for 64-bit
    /// gradient-check runs).
    pub fn cast<G: Scalar>(&self) -> SegModel<G> {
        SegModel {
            config: self.config.clone(),
            prompt: self.prompt.clone(),
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast::<G>(),
                            learnable: p.learnable,
                        },
                    )
                })
                .collect(),
        }
    }
}

//! The three era-recognition networks.
//!
//! - audio-cnn: conv encoder -> classifier, trained with cross-entropy only.
//! - audio-suc: the same encoder plus a projection head g_theta feeding the
//!   era-contrastive loss on the audio embedding.
//! - audioart-mmc: encoder + biography projection fused by a two-token
//!   transformer stack into a multimodal embedding h_m; the classifier and
//!   g_theta read h_m, and text-shuffled fusion views feed the MMC loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::ViewAssignments;
use crate::nncore::{
    load_checkpoint, save_checkpoint, LayerSpec, Mode, ParamStore, Sequential, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    AudioCnn,
    AudioSuc,
    AudioartMmc,
}

impl Variant {
    pub fn needs_bios(self) -> bool {
        matches!(self, Variant::AudioartMmc)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio-cnn" => Ok(Variant::AudioCnn),
            "audio-suc" => Ok(Variant::AudioSuc),
            "audioart-mmc" => Ok(Variant::AudioartMmc),
            other => Err(Error::Config(format!("unknown variant: {other}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::AudioCnn => "audio-cnn",
            Variant::AudioSuc => "audio-suc",
            Variant::AudioartMmc => "audioart-mmc",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AudioEncoderConfig {
    /// Input mel bands (checked against incoming tensors).
    pub n_mels: usize,
    pub block_channels: Vec<usize>,
    /// d_h.
    pub embed_dim: usize,
    pub n_classes: usize,
}

impl Default for AudioEncoderConfig {
    fn default() -> Self {
        AudioEncoderConfig {
            n_mels: 224,
            block_channels: vec![32, 64, 128, 128, 64],
            embed_dim: 64,
            n_classes: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FusionConfig {
    pub n_blocks: usize,
    pub heads: usize,
    pub d_k: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { n_blocks: 2, heads: 4, d_k: 32 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub encoder: AudioEncoderConfig,
    pub fusion: FusionConfig,
    /// EC projection output width.
    pub d_z: usize,
    /// Ingested biography width (audioart-mmc only).
    pub bio_dim: usize,
    /// Bias-free, activation-free g_theta for scale-invariance diagnostics.
    pub ec_linear_diagnostic: bool,
}

impl ModelConfig {
    pub fn new(variant: Variant, encoder: AudioEncoderConfig) -> Self {
        ModelConfig {
            variant,
            encoder,
            fusion: FusionConfig::default(),
            d_z: 32,
            bio_dim: 0,
            ec_linear_diagnostic: false,
        }
    }

    fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.block_channels.is_empty() || e.embed_dim < 1 || e.n_classes < 2 {
            return Err(Error::Config(
                "encoder needs at least one block, embed_dim >= 1, n_classes >= 2".into(),
            ));
        }
        if e.n_mels >> e.block_channels.len() == 0 {
            return Err(Error::Config(format!(
                "input spatial dims too small for the pool depth: {} bands through {} halvings",
                e.n_mels,
                e.block_channels.len()
            )));
        }
        if self.variant == Variant::AudioartMmc {
            if self.bio_dim == 0 {
                return Err(Error::Config("audioart-mmc needs bio_dim > 0".into()));
            }
            let f = &self.fusion;
            if f.heads * f.d_k != 2 * e.embed_dim {
                return Err(Error::Config(format!(
                    "fusion invariant violated: heads ({}) * d_k ({}) must equal 2*embed_dim ({})",
                    f.heads,
                    f.d_k,
                    2 * e.embed_dim
                )));
            }
            if f.n_blocks == 0 {
                return Err(Error::Config("fusion needs at least one block".into()));
            }
        }
        Ok(())
    }
}

/// One training batch as tensors, plus the MMC view plan.
pub struct BatchInputs<'a> {
    /// `[B, 1, n_mels, frames]`
    pub mel: &'a Tensor,
    /// `[B, bio_dim]`, required by audioart-mmc
    pub bios: Option<&'a Tensor>,
    /// text-shuffle negatives per anchor (audioart-mmc training only)
    pub views: Option<&'a ViewAssignments>,
}

/// Everything the losses need from one forward pass.
pub struct ForwardPass {
    pub h_a: Tensor,
    pub logits: Tensor,
    pub z: Option<Tensor>,
    pub h_m: Option<Tensor>,
    /// f_T(t_i), normalized
    pub mmc_anchors: Option<Tensor>,
    /// per anchor `[1 + K_i, d_h]` of normalized fusion outputs, row 0 matched
    pub mmc_views: Option<Vec<Tensor>>,
    view_layout: Option<ViewLayout>,
}

/// Gradients flowing back from the losses.
pub struct LossGrads {
    pub dlogits: Tensor,
    pub dz: Option<Tensor>,
    pub dmmc_anchors: Option<Tensor>,
    pub dmmc_views: Option<Vec<Tensor>>,
}

struct ViewLayout {
    /// (audio row, text row) per fused row, matched rows first per anchor
    pairs: Vec<(usize, usize)>,
    /// start offset of each anchor's rows in the flat layout
    starts: Vec<usize>,
    batch: usize,
}

/// A configured network with its parameters and forward/backward machinery.
pub struct ModelGraph {
    pub config: ModelConfig,
    pub params: ParamStore,
    encoder: Sequential,
    classifier: Sequential,
    g_theta: Option<Sequential>,
    text_proj: Option<Sequential>,
    f_t: Option<Sequential>,
    fusion: Option<FusionModule>,
    view_norm: Option<crate::nncore::L2Normalize>,
}

impl ModelGraph {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let e = &config.encoder;

        let mut specs = Vec::new();
        let mut prev = 1;
        for &ch in &e.block_channels {
            specs.push(LayerSpec::Conv3x3 { in_ch: prev, out_ch: ch });
            specs.push(LayerSpec::BatchNorm { channels: ch });
            specs.push(LayerSpec::Elu);
            specs.push(LayerSpec::AvgPool2x2);
            prev = ch;
        }
        specs.push(LayerSpec::GlobalAvgPool);
        specs.push(LayerSpec::Linear { in_dim: prev, out_dim: e.embed_dim, bias: true });
        let encoder = Sequential::from_specs("encoder", &specs, &mut params, &mut rng)?;

        let classifier = Sequential::from_specs(
            "classifier",
            &[LayerSpec::Linear { in_dim: e.embed_dim, out_dim: e.n_classes, bias: true }],
            &mut params,
            &mut rng,
        )?;

        let g_theta = match config.variant {
            Variant::AudioCnn => None,
            _ => {
                let d = e.embed_dim;
                let specs: Vec<LayerSpec> = if config.ec_linear_diagnostic {
                    vec![
                        LayerSpec::Linear { in_dim: d, out_dim: d, bias: false },
                        LayerSpec::Linear { in_dim: d, out_dim: config.d_z, bias: false },
                        LayerSpec::L2Normalize,
                    ]
                } else {
                    vec![
                        LayerSpec::Linear { in_dim: d, out_dim: d, bias: true },
                        LayerSpec::Elu,
                        LayerSpec::Linear { in_dim: d, out_dim: config.d_z, bias: true },
                        LayerSpec::L2Normalize,
                    ]
                };
                Some(Sequential::from_specs("g_theta", &specs, &mut params, &mut rng)?)
            }
        };

        let (text_proj, f_t, fusion, view_norm) = if config.variant == Variant::AudioartMmc {
            let d = e.embed_dim;
            let text_proj = Sequential::from_specs(
                "text_proj",
                &[LayerSpec::Linear { in_dim: config.bio_dim, out_dim: d, bias: true }],
                &mut params,
                &mut rng,
            )?;
            let f_t = Sequential::from_specs(
                "f_t",
                &[
                    LayerSpec::Linear { in_dim: d, out_dim: d, bias: true },
                    LayerSpec::L2Normalize,
                ],
                &mut params,
                &mut rng,
            )?;
            let fusion = FusionModule::new(&config, &mut params, &mut rng)?;
            (
                Some(text_proj),
                Some(f_t),
                Some(fusion),
                Some(crate::nncore::L2Normalize::new()),
            )
        } else {
            (None, None, None, None)
        };

        Ok(ModelGraph {
            config,
            params,
            encoder,
            classifier,
            g_theta,
            text_proj,
            f_t,
            fusion,
            view_norm,
        })
    }

    fn check_mel(&self, mel: &Tensor) -> Result<()> {
        let s = mel.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != self.config.encoder.n_mels {
            return Err(Error::shape(
                "model input",
                format!("expected [B, 1, {}, F], got {:?}", self.config.encoder.n_mels, s),
            ));
        }
        Ok(())
    }

    /// Audio embedding + logits without the multimodal machinery; the
    /// audio-cnn/audio-suc classification path.
    pub fn encode_audio(&mut self, mel: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        self.check_mel(mel)?;
        let h_a = self.encoder.forward(mel, &self.params, mode)?;
        let logits = self.classifier.forward(&h_a, &self.params, mode)?;
        Ok((h_a, logits))
    }

    /// Full training-time forward for the configured variant.
    pub fn forward(&mut self, inputs: &BatchInputs, mode: Mode) -> Result<ForwardPass> {
        self.check_mel(inputs.mel)?;
        let b = inputs.mel.shape()[0];
        let h_a = self.encoder.forward(inputs.mel, &self.params, mode)?;
        match self.config.variant {
            Variant::AudioCnn => {
                let logits = self.classifier.forward(&h_a, &self.params, mode)?;
                Ok(ForwardPass {
                    h_a,
                    logits,
                    z: None,
                    h_m: None,
                    mmc_anchors: None,
                    mmc_views: None,
                    view_layout: None,
                })
            }
            Variant::AudioSuc => {
                let logits = self.classifier.forward(&h_a, &self.params, mode)?;
                let z = self
                    .g_theta
                    .as_mut()
                    .expect("audio-suc has g_theta")
                    .forward(&h_a, &self.params, mode)?;
                Ok(ForwardPass {
                    h_a,
                    logits,
                    z: Some(z),
                    h_m: None,
                    mmc_anchors: None,
                    mmc_views: None,
                    view_layout: None,
                })
            }
            Variant::AudioartMmc => {
                let bios = inputs.bios.ok_or_else(|| {
                    Error::Config("audioart-mmc forward needs biography embeddings".into())
                })?;
                if bios.shape() != [b, self.config.bio_dim] {
                    return Err(Error::shape(
                        "bios",
                        format!("{:?} vs [{b}, {}]", bios.shape(), self.config.bio_dim),
                    ));
                }
                let t = self
                    .text_proj
                    .as_mut()
                    .expect("mmc has text_proj")
                    .forward(bios, &self.params, mode)?;

                // one fused row per (audio, text) view; matched rows first
                let layout = build_layout(b, inputs.views);
                let fusion = self.fusion.as_mut().expect("mmc has fusion");
                let h_m_all = fusion.forward(&h_a, &t, &layout, &self.params, mode)?;

                let d = self.config.encoder.embed_dim;
                let mut h_m = Tensor::zeros(&[b, d]);
                for i in 0..b {
                    h_m.row_mut(i).copy_from_slice(h_m_all.row(layout.starts[i]));
                }
                let logits = self.classifier.forward(&h_m, &self.params, mode)?;
                let z = self
                    .g_theta
                    .as_mut()
                    .expect("mmc has g_theta")
                    .forward(&h_m, &self.params, mode)?;

                let (anchors, views) = if inputs.views.is_some() {
                    let anchors = self
                        .f_t
                        .as_mut()
                        .expect("mmc has f_t")
                        .forward(&t, &self.params, mode)?;
                    let normed = crate::nncore::Layer::forward(
                        self.view_norm.as_mut().expect("mmc has view_norm"),
                        &h_m_all,
                        &self.params,
                        mode,
                    )?;
                    let mut views_out = Vec::with_capacity(b);
                    for i in 0..b {
                        let start = layout.starts[i];
                        let end = if i + 1 < b { layout.starts[i + 1] } else { layout.pairs.len() };
                        let mut group = Tensor::zeros(&[end - start, d]);
                        for (r, row) in (start..end).enumerate() {
                            group.row_mut(r).copy_from_slice(normed.row(row));
                        }
                        views_out.push(group);
                    }
                    (Some(anchors), Some(views_out))
                } else {
                    (None, None)
                };

                Ok(ForwardPass {
                    h_a,
                    logits,
                    z: Some(z),
                    h_m: Some(h_m),
                    mmc_anchors: anchors,
                    mmc_views: views,
                    view_layout: Some(layout),
                })
            }
        }
    }

    /// Backpropagate loss gradients through the cached forward, accumulating
    /// into `self.params`.
    pub fn backward(&mut self, pass: &ForwardPass, grads: &LossGrads) -> Result<()> {
        match self.config.variant {
            Variant::AudioCnn => {
                let d_ha = self.classifier.backward(&grads.dlogits, &mut self.params)?;
                self.encoder.backward(&d_ha, &mut self.params)?;
            }
            Variant::AudioSuc => {
                let mut d_ha = self.classifier.backward(&grads.dlogits, &mut self.params)?;
                if let Some(dz) = &grads.dz {
                    let from_ec = self
                        .g_theta
                        .as_mut()
                        .expect("audio-suc has g_theta")
                        .backward(dz, &mut self.params)?;
                    d_ha.add_assign(&from_ec)?;
                }
                self.encoder.backward(&d_ha, &mut self.params)?;
            }
            Variant::AudioartMmc => {
                let layout = pass
                    .view_layout
                    .as_ref()
                    .ok_or_else(|| Error::Config("backward without mmc forward".into()))?;
                let b = layout.batch;
                let d = self.config.encoder.embed_dim;
                let v = layout.pairs.len();

                let mut d_hm = self.classifier.backward(&grads.dlogits, &mut self.params)?;
                if let Some(dz) = &grads.dz {
                    let from_ec = self
                        .g_theta
                        .as_mut()
                        .expect("mmc has g_theta")
                        .backward(dz, &mut self.params)?;
                    d_hm.add_assign(&from_ec)?;
                }

                // gradient w.r.t. every fused row
                let mut d_hm_all = Tensor::zeros(&[v, d]);
                if let Some(dviews) = &grads.dmmc_views {
                    let mut flat = Tensor::zeros(&[v, d]);
                    for (i, group) in dviews.iter().enumerate() {
                        let start = layout.starts[i];
                        for r in 0..group.shape()[0] {
                            flat.row_mut(start + r).copy_from_slice(group.row(r));
                        }
                    }
                    let back = crate::nncore::Layer::backward(
                        self.view_norm.as_mut().expect("mmc has view_norm"),
                        &flat,
                        &mut self.params,
                    )?;
                    d_hm_all.add_assign(&back)?;
                }
                for i in 0..b {
                    let start = layout.starts[i];
                    for (dst, src) in d_hm_all.row_mut(start).iter_mut().zip(d_hm.row(i)) {
                        *dst += src;
                    }
                }

                let fusion = self.fusion.as_mut().expect("mmc has fusion");
                let (da_rows, dt_rows) = fusion.backward(&d_hm_all, &mut self.params)?;

                // scatter per-row gradients back to batch positions
                let mut d_ha = Tensor::zeros(&[b, d]);
                let mut d_t = Tensor::zeros(&[b, d]);
                for (row, &(ai, ti)) in layout.pairs.iter().enumerate() {
                    for (dst, src) in d_ha.row_mut(ai).iter_mut().zip(da_rows.row(row)) {
                        *dst += src;
                    }
                    for (dst, src) in d_t.row_mut(ti).iter_mut().zip(dt_rows.row(row)) {
                        *dst += src;
                    }
                }
                if let Some(danchors) = &grads.dmmc_anchors {
                    let from_ft = self
                        .f_t
                        .as_mut()
                        .expect("mmc has f_t")
                        .backward(danchors, &mut self.params)?;
                    d_t.add_assign(&from_ft)?;
                }
                self.text_proj
                    .as_mut()
                    .expect("mmc has text_proj")
                    .backward(&d_t, &mut self.params)?;
                self.encoder.backward(&d_ha, &mut self.params)?;
            }
        }
        Ok(())
    }

    /// Classification logits for evaluation (no contrastive machinery).
    pub fn predict_logits(&mut self, mel: &Tensor, bios: Option<&Tensor>) -> Result<Tensor> {
        let inputs = BatchInputs { mel, bios, views: None };
        let pass = self.forward(&inputs, Mode::Eval)?;
        Ok(pass.logits)
    }

    /// Embeddings for export. `h_m` exists only on audioart-mmc; `z` only
    /// where g_theta exists.
    pub fn embed(&mut self, mel: &Tensor, bios: Option<&Tensor>, layer: EmbeddingLayer) -> Result<Tensor> {
        let inputs = BatchInputs { mel, bios, views: None };
        let pass = self.forward(&inputs, Mode::Eval)?;
        match layer {
            EmbeddingLayer::HA => Ok(pass.h_a),
            EmbeddingLayer::HM => pass.h_m.ok_or_else(|| {
                Error::Config(format!("variant {} has no multimodal embedding", self.config.variant))
            }),
            EmbeddingLayer::Z => pass.z.ok_or_else(|| {
                Error::Config(format!("variant {} has no projection head", self.config.variant))
            }),
        }
    }

    /// All non-trainable buffers (BN running stats) across the graph parts.
    pub fn buffers(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = self.encoder.buffers();
        out.extend(self.classifier.buffers());
        if let Some(g) = &self.g_theta {
            out.extend(g.buffers());
        }
        if let Some(t) = &self.text_proj {
            out.extend(t.buffers());
        }
        if let Some(f) = &self.f_t {
            out.extend(f.buffers());
        }
        if let Some(fu) = &self.fusion {
            out.extend(fu.buffers());
        }
        out
    }

    pub fn set_buffer(&mut self, name: &str, values: &[f64]) -> Result<()> {
        for part in [&mut self.encoder, &mut self.classifier]
            .into_iter()
            .chain(self.g_theta.as_mut())
            .chain(self.text_proj.as_mut())
            .chain(self.f_t.as_mut())
        {
            if part.buffers().iter().any(|(n, _)| n == name) {
                return part.set_buffer(name, values);
            }
        }
        if let Some(fu) = &mut self.fusion {
            return fu.set_buffer(name, values);
        }
        Err(Error::Config(format!("no buffer named {name}")))
    }

    pub fn save(&self, path: &Path, train_config: serde_json::Value) -> Result<()> {
        save_checkpoint(
            path,
            serde_json::to_value(&self.config)?,
            train_config,
            &self.params,
            &self.buffers(),
        )
    }

    /// Rebuild a graph from a checkpoint, restoring parameters and buffers.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let ck = load_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_value(ck.header.model.clone())?;
        let mut graph = ModelGraph::new(config, 0)?;
        for (name, tensor) in &ck.tensors {
            if graph.params.contains(name) {
                let value = graph.params.value_mut(name);
                if value.shape() != tensor.shape() {
                    return Err(Error::Format(format!(
                        "checkpoint tensor {name} has shape {:?}, graph expects {:?}",
                        tensor.shape(),
                        value.shape()
                    )));
                }
                value.values_mut().copy_from_slice(tensor.values());
            } else {
                graph.set_buffer(name, tensor.values())?;
            }
        }
        Ok((graph, ck.header.train))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingLayer {
    HA,
    HM,
    Z,
}

impl std::str::FromStr for EmbeddingLayer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h_a" => Ok(EmbeddingLayer::HA),
            "h_m" => Ok(EmbeddingLayer::HM),
            "z" => Ok(EmbeddingLayer::Z),
            other => Err(Error::Config(format!("unknown embedding layer: {other}"))),
        }
    }
}

fn build_layout(batch: usize, views: Option<&ViewAssignments>) -> ViewLayout {
    let mut pairs = Vec::new();
    let mut starts = Vec::with_capacity(batch);
    for i in 0..batch {
        starts.push(pairs.len());
        pairs.push((i, i));
        if let Some(v) = views {
            for &k in &v[i] {
                pairs.push((i, k));
            }
        }
    }
    ViewLayout { pairs, starts, batch }
}

/// Two-token transformer fusion: each modality embedding is lifted to width
/// 2*d_h, tagged with a learned modality embedding, run through the
/// attention blocks, mean-pooled, and projected back to d_h.
struct FusionModule {
    lift_a: Sequential,
    lift_t: Sequential,
    emb_a_name: String,
    emb_t_name: String,
    blocks: Sequential,
    out_proj: Sequential,
    token_dim: usize,
    cached_rows: Option<usize>,
}

impl FusionModule {
    fn new(config: &ModelConfig, params: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = config.encoder.embed_dim;
        let token_dim = 2 * d;
        let lift_a = Sequential::from_specs(
            "fusion.lift_a",
            &[LayerSpec::Linear { in_dim: d, out_dim: token_dim, bias: true }],
            params,
            rng,
        )?;
        let lift_t = Sequential::from_specs(
            "fusion.lift_t",
            &[LayerSpec::Linear { in_dim: d, out_dim: token_dim, bias: true }],
            params,
            rng,
        )?;
        let emb_a_name = "fusion.emb_a".to_string();
        let emb_t_name = "fusion.emb_t".to_string();
        params.insert(&emb_a_name, Tensor::zeros(&[token_dim]))?;
        params.insert(&emb_t_name, Tensor::zeros(&[token_dim]))?;
        let block_specs: Vec<LayerSpec> = (0..config.fusion.n_blocks)
            .map(|_| LayerSpec::MhaBlock {
                dim: token_dim,
                heads: config.fusion.heads,
                d_k: config.fusion.d_k,
            })
            .collect();
        let blocks = Sequential::from_specs("fusion.blocks", &block_specs, params, rng)?;
        let out_proj = Sequential::from_specs(
            "fusion.out",
            &[LayerSpec::Linear { in_dim: token_dim, out_dim: d, bias: true }],
            params,
            rng,
        )?;
        Ok(FusionModule {
            lift_a,
            lift_t,
            emb_a_name,
            emb_t_name,
            blocks,
            out_proj,
            token_dim,
            cached_rows: None,
        })
    }

    /// `h_a`/`t` are `[B, d_h]`; `layout` lists the fused (audio, text) rows.
    /// Returns `[V, d_h]`.
    fn forward(
        &mut self,
        h_a: &Tensor,
        t: &Tensor,
        layout: &ViewLayout,
        params: &ParamStore,
        mode: Mode,
    ) -> Result<Tensor> {
        let v = layout.pairs.len();
        let d = h_a.shape()[1];
        // gather per-row modality inputs
        let mut a_rows = Tensor::zeros(&[v, d]);
        let mut t_rows = Tensor::zeros(&[v, d]);
        for (row, &(ai, ti)) in layout.pairs.iter().enumerate() {
            a_rows.row_mut(row).copy_from_slice(h_a.row(ai));
            t_rows.row_mut(row).copy_from_slice(t.row(ti));
        }
        let tok_a = self.lift_a.forward(&a_rows, params, mode)?;
        let tok_t = self.lift_t.forward(&t_rows, params, mode)?;
        let emb_a = params.value(&self.emb_a_name);
        let emb_t = params.value(&self.emb_t_name);
        let td = self.token_dim;
        let mut tokens = Tensor::zeros(&[v, 2, td]);
        {
            let tv = tokens.values_mut();
            for row in 0..v {
                for k in 0..td {
                    tv[(row * 2) * td + k] = tok_a.values()[row * td + k] + emb_a.values()[k];
                    tv[(row * 2 + 1) * td + k] = tok_t.values()[row * td + k] + emb_t.values()[k];
                }
            }
        }
        let encoded = self.blocks.forward(&tokens, params, mode)?;
        // mean over the two tokens
        let mut pooled = Tensor::zeros(&[v, td]);
        {
            let ev = encoded.values();
            let pv = pooled.values_mut();
            for row in 0..v {
                for k in 0..td {
                    pv[row * td + k] = 0.5 * (ev[(row * 2) * td + k] + ev[(row * 2 + 1) * td + k]);
                }
            }
        }
        self.cached_rows = Some(v);
        self.out_proj.forward(&pooled, params, mode)
    }

    /// Returns gradients w.r.t. the gathered per-row audio and text inputs.
    fn backward(&mut self, grad_out: &Tensor, params: &mut ParamStore) -> Result<(Tensor, Tensor)> {
        let v = self.cached_rows.ok_or(Error::NoCachedActivations)?;
        let td = self.token_dim;
        let d_pooled = self.out_proj.backward(grad_out, params)?;
        let mut d_encoded = Tensor::zeros(&[v, 2, td]);
        {
            let dv = d_encoded.values_mut();
            for row in 0..v {
                for k in 0..td {
                    let g = 0.5 * d_pooled.values()[row * td + k];
                    dv[(row * 2) * td + k] = g;
                    dv[(row * 2 + 1) * td + k] = g;
                }
            }
        }
        let d_tokens = self.blocks.backward(&d_encoded, params)?;
        let mut d_tok_a = Tensor::zeros(&[v, td]);
        let mut d_tok_t = Tensor::zeros(&[v, td]);
        let mut d_emb_a = Tensor::zeros(&[td]);
        let mut d_emb_t = Tensor::zeros(&[td]);
        {
            let dv = d_tokens.values();
            for row in 0..v {
                for k in 0..td {
                    let ga = dv[(row * 2) * td + k];
                    let gt = dv[(row * 2 + 1) * td + k];
                    d_tok_a.values_mut()[row * td + k] = ga;
                    d_tok_t.values_mut()[row * td + k] = gt;
                    d_emb_a.values_mut()[k] += ga;
                    d_emb_t.values_mut()[k] += gt;
                }
            }
        }
        params.accumulate_grad(&self.emb_a_name, &d_emb_a)?;
        params.accumulate_grad(&self.emb_t_name, &d_emb_t)?;
        let da_rows = self.lift_a.backward(&d_tok_a, params)?;
        let dt_rows = self.lift_t.backward(&d_tok_t, params)?;
        Ok((da_rows, dt_rows))
    }

    fn buffers(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = self.lift_a.buffers();
        out.extend(self.lift_t.buffers());
        out.extend(self.blocks.buffers());
        out.extend(self.out_proj.buffers());
        out
    }

    fn set_buffer(&mut self, name: &str, values: &[f64]) -> Result<()> {
        for part in [&mut self.lift_a, &mut self.lift_t, &mut self.blocks, &mut self.out_proj] {
            if part.buffers().iter().any(|(n, _)| n == name) {
                return part.set_buffer(name, values);
            }
        }
        Err(Error::Config(format!("no buffer named {name}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_encoder(n_mels: usize, classes: usize) -> AudioEncoderConfig {
        AudioEncoderConfig {
            n_mels,
            block_channels: vec![4, 8],
            embed_dim: 8,
            n_classes: classes,
        }
    }

    fn random_mel(rng: &mut ChaCha8Rng, b: usize, mels: usize, frames: usize) -> Tensor {
        let n = b * mels * frames;
        Tensor::from_values(&[b, 1, mels, frames], (0..n).map(|_| rng.gen_range(0.0..2.0)).collect())
            .unwrap()
    }

    fn mmc_config() -> ModelConfig {
        ModelConfig {
            variant: Variant::AudioartMmc,
            encoder: tiny_encoder(8, 4),
            fusion: FusionConfig { n_blocks: 2, heads: 2, d_k: 8 },
            d_z: 6,
            bio_dim: 12,
            ec_linear_diagnostic: false,
        }
    }

    #[test]
    fn default_audio_cnn_dimension_arithmetic() {
        // [1, 1, 224, 256] through five halvings lands on [7, 8]; the
        // classifier then yields [1, C]
        let cfg = ModelConfig::new(Variant::AudioCnn, AudioEncoderConfig::default());
        let mut g = ModelGraph::new(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_mel(&mut rng, 1, 224, 256);
        let (h_a, logits) = g.encode_audio(&x, Mode::Eval).unwrap();
        assert_eq!(h_a.shape(), &[1, 64]);
        assert_eq!(logits.shape(), &[1, 64]);
    }

    #[test]
    fn too_deep_pooling_is_a_config_error() {
        let cfg = ModelConfig::new(
            Variant::AudioCnn,
            AudioEncoderConfig {
                n_mels: 8,
                block_channels: vec![4, 4, 4, 4],
                embed_dim: 4,
                n_classes: 4,
            },
        );
        assert!(ModelGraph::new(cfg, 0).is_err());
    }

    #[test]
    fn zero_weights_give_equal_logits() {
        let cfg = ModelConfig::new(Variant::AudioCnn, tiny_encoder(8, 5));
        let mut g = ModelGraph::new(cfg, 3).unwrap();
        let names: Vec<String> = g.params.names().map(String::from).collect();
        for name in &names {
            g.params.value_mut(name).values_mut().fill(0.0);
        }
        // BN gammas back to one so eval stays affine
        for name in names.iter().filter(|n| n.ends_with(".gamma")) {
            g.params.value_mut(name).values_mut().fill(1.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_mel(&mut rng, 2, 8, 8);
        let (_, logits) = g.encode_audio(&x, Mode::Eval).unwrap();
        for i in 0..2 {
            let row = logits.row(i);
            for &v in row {
                assert!((v - row[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_inputs_produce_identical_embeddings() {
        let cfg = ModelConfig::new(Variant::AudioSuc, tiny_encoder(8, 4));
        let mut g = ModelGraph::new(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_mel(&mut rng, 1, 8, 8);
        let (h1, _) = g.encode_audio(&x, Mode::Eval).unwrap();
        let (h2, _) = g.encode_audio(&x, Mode::Eval).unwrap();
        assert_eq!(h1.values(), h2.values());
    }

    #[test]
    fn classifier_scaling_preserves_argmax() {
        let cfg = ModelConfig::new(Variant::AudioCnn, tiny_encoder(8, 6));
        let mut g = ModelGraph::new(cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_mel(&mut rng, 1, 8, 8);
        let (_, logits1) = g.encode_audio(&x, Mode::Eval).unwrap();
        for name in ["classifier.0.w", "classifier.0.b"] {
            g.params.value_mut(name).scale(3.0);
        }
        let (_, logits2) = g.encode_audio(&x, Mode::Eval).unwrap();
        let argmax = |t: &Tensor| -> usize {
            t.row(0)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(argmax(&logits1), argmax(&logits2));
        for (a, b) in logits1.values().iter().zip(logits2.values()) {
            assert!((3.0 * a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_head_output_is_unit_norm() {
        let cfg = ModelConfig::new(Variant::AudioSuc, tiny_encoder(8, 4));
        let mut g = ModelGraph::new(cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_mel(&mut rng, 3, 8, 8);
        let pass = g
            .forward(&BatchInputs { mel: &x, bios: None, views: None }, Mode::Eval)
            .unwrap();
        let z = pass.z.unwrap();
        assert_eq!(z.shape(), &[3, 32]);
        for i in 0..3 {
            let n: f64 = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn diagnostic_projection_is_scale_invariant() {
        let mut cfg = ModelConfig::new(Variant::AudioSuc, tiny_encoder(8, 4));
        cfg.ec_linear_diagnostic = true;
        let mut g = ModelGraph::new(cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = Tensor::from_values(&[1, 8], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let g_theta = g.g_theta.as_mut().unwrap();
        let z1 = g_theta.forward(&h, &g.params, Mode::Eval).unwrap();
        let h2 = h.map(|v| 2.0 * v);
        let z2 = g_theta.forward(&h2, &g.params, Mode::Eval).unwrap();
        for (a, b) in z1.values().iter().zip(z2.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn suc_extends_cnn_by_exactly_the_projection_head() {
        let cnn = ModelGraph::new(ModelConfig::new(Variant::AudioCnn, tiny_encoder(8, 4)), 13).unwrap();
        let suc = ModelGraph::new(ModelConfig::new(Variant::AudioSuc, tiny_encoder(8, 4)), 13).unwrap();
        let cnn_names: std::collections::HashSet<String> =
            cnn.params.names().map(String::from).collect();
        let suc_names: std::collections::HashSet<String> =
            suc.params.names().map(String::from).collect();
        assert!(cnn_names.is_subset(&suc_names));
        let extra: Vec<&String> = suc_names.difference(&cnn_names).collect();
        assert!(!extra.is_empty());
        assert!(extra.iter().all(|n| n.starts_with("g_theta.")), "{extra:?}");
    }

    #[test]
    fn fusion_invariant_is_enforced() {
        let mut cfg = mmc_config();
        cfg.fusion.heads = 3; // 3 * 8 != 16
        assert!(ModelGraph::new(cfg, 0).is_err());
    }

    #[test]
    fn mmc_forward_shapes_and_norms() {
        let mut g = ModelGraph::new(mmc_config(), 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let b = 4;
        let x = random_mel(&mut rng, b, 8, 8);
        let bios = Tensor::from_values(
            &[b, 12],
            (0..b * 12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let views: ViewAssignments = vec![vec![1], vec![0], vec![3], vec![2]];
        let pass = g
            .forward(&BatchInputs { mel: &x, bios: Some(&bios), views: Some(&views) }, Mode::Train)
            .unwrap();
        assert_eq!(pass.h_m.as_ref().unwrap().shape(), &[4, 8]);
        assert_eq!(pass.logits.shape(), &[4, 4]);
        let anchors = pass.mmc_anchors.as_ref().unwrap();
        for i in 0..b {
            let n: f64 = anchors.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let mmc_views = pass.mmc_views.as_ref().unwrap();
        assert_eq!(mmc_views.len(), 4);
        for group in mmc_views {
            assert_eq!(group.shape(), &[2, 8]);
            for r in 0..2 {
                let n: f64 = group.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mmc_logits_depend_on_the_text_modality() {
        let mut g = ModelGraph::new(mmc_config(), 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random_mel(&mut rng, 1, 8, 8);
        let bios = Tensor::from_values(&[1, 12], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let l1 = g.predict_logits(&x, Some(&bios)).unwrap();
        let zero_bios = Tensor::zeros(&[1, 12]);
        let l2 = g.predict_logits(&x, Some(&zero_bios)).unwrap();
        let diff: f64 = l1
            .values()
            .iter()
            .zip(l2.values())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6, "logits identical with zeroed biography");
    }

    #[test]
    fn fusion_is_asymmetric_in_modalities() {
        let mut g = ModelGraph::new(mmc_config(), 18).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let a = Tensor::from_values(&[1, 8], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let t = Tensor::from_values(&[1, 8], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let layout = build_layout(1, None);
        let fusion = g.fusion.as_mut().unwrap();
        let out1 = fusion.forward(&a, &t, &layout, &g.params, Mode::Eval).unwrap();
        let out2 = fusion.forward(&t, &a, &layout, &g.params, Mode::Eval).unwrap();
        let diff: f64 = out1
            .values()
            .iter()
            .zip(out2.values())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-9, "swapping modalities left the fusion output unchanged");
    }

    #[test]
    fn missing_bios_is_a_config_error() {
        let mut g = ModelGraph::new(mmc_config(), 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_mel(&mut rng, 1, 8, 8);
        assert!(g.predict_logits(&x, None).is_err());
    }

    #[test]
    fn band_count_mismatch_is_rejected() {
        let cfg = ModelConfig::new(Variant::AudioCnn, tiny_encoder(8, 4));
        let mut g = ModelGraph::new(cfg, 22).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = random_mel(&mut rng, 1, 16, 8);
        assert!(g.encode_audio(&x, Mode::Eval).is_err());
    }

    #[test]
    fn checkpoint_round_trip_restores_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.erac");
        let mut g = ModelGraph::new(mmc_config(), 24).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let x = random_mel(&mut rng, 2, 8, 8);
        let bios = Tensor::from_values(
            &[2, 12],
            (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let before = g.predict_logits(&x, Some(&bios)).unwrap();
        g.save(&path, serde_json::json!({"epochs": 1})).unwrap();
        let (mut loaded, train_cfg) = ModelGraph::load(&path).unwrap();
        assert_eq!(train_cfg["epochs"], 1);
        let after = loaded.predict_logits(&x, Some(&bios)).unwrap();
        for (a, b) in before.values().iter().zip(after.values()) {
            // parameters pass through f32 storage
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn all_embeddings_finite_on_random_inputs() {
        let mut g = ModelGraph::new(mmc_config(), 26).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        for _ in 0..50 {
            let x = random_mel(&mut rng, 2, 8, 8);
            let bios = Tensor::from_values(
                &[2, 12],
                (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let views: ViewAssignments = vec![vec![1], vec![0]];
            let pass = g
                .forward(
                    &BatchInputs { mel: &x, bios: Some(&bios), views: Some(&views) },
                    Mode::Train,
                )
                .unwrap();
            assert!(pass.h_a.is_finite());
            assert!(pass.logits.is_finite());
            assert!(pass.z.as_ref().unwrap().is_finite());
            assert!(pass.h_m.as_ref().unwrap().is_finite());
        }
    }
}

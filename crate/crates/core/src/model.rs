//! The PAT network: convolutional stem, pixel-context encoder, part-prototype
//! decoder and the retrieval embedding.
//!
//! Batched graph entry points take images as `[B, H, W, 3]`. The inference
//! helpers ([`PatModel::forward`], [`PatModel::forward_batch`]) return plain
//! tensors in [`PatOutput`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::losses::ClassifierHead;
use crate::nn::{transformer_sublayer, AttentionParams, Conv2dParams, FfnParams, LayerNormParams};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Result, Tensor, TensorError};

/// Architecture hyper-parameters and ablation toggles.
#[derive(Clone, Debug, PartialEq)]
pub struct PatConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Output channels of the 3x3 stem stages.
    pub stem_channels: Vec<usize>,
    /// Stride of each stem stage; their product is the downsampling factor.
    pub stem_strides: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Number of part prototypes K.
    pub prototypes: usize,
    pub positional_embedding: bool,
    pub use_encoder: bool,
    pub use_decoder: bool,
}

impl Default for PatConfig {
    fn default() -> Self {
        PatConfig {
            image_height: 64,
            image_width: 32,
            stem_channels: vec![16, 32, 64],
            stem_strides: vec![2, 2, 2],
            d_model: 64,
            heads: 4,
            d_ff: 256,
            enc_layers: 1,
            dec_layers: 1,
            prototypes: 4,
            positional_embedding: true,
            use_encoder: true,
            use_decoder: true,
        }
    }
}

impl PatConfig {
    pub fn downsample(&self) -> usize {
        self.stem_strides.iter().product()
    }

    /// Feature-map extents `(h, w)`.
    pub fn grid(&self) -> (usize, usize) {
        let f = self.downsample();
        (self.image_height / f, self.image_width / f)
    }

    pub fn embedding_dim(&self) -> usize {
        if self.use_decoder {
            (self.prototypes + 1) * self.d_model
        } else {
            self.d_model
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TensorError::Invalid { op: "pat_config", msg });
        if self.stem_channels.len() != self.stem_strides.len() {
            return bad("stem_channels and stem_strides differ in length".into());
        }
        if self.stem_strides.contains(&0) || self.stem_channels.contains(&0) {
            return bad("stem strides and channels must be positive".into());
        }
        let f = self.downsample();
        if self.image_height % f != 0 || self.image_width % f != 0 || self.image_height < f || self.image_width < f {
            return bad(format!(
                "image {}x{} is not a positive multiple of the downsampling factor {f}",
                self.image_height, self.image_width
            ));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.d_ff == 0 || self.prototypes == 0 {
            return bad("d_ff and prototypes must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub attn: AttentionParams,
    pub norm1: LayerNormParams,
    pub ffn: FfnParams,
    pub norm2: LayerNormParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock {
    pub self_attn: AttentionParams,
    pub norm1: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub ffn: FfnParams,
    pub norm3: LayerNormParams,
}

/// Identity classifiers: one for the global feature and one per prototype.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHeads {
    pub global: ClassifierHead,
    pub parts: Vec<ClassifierHead>,
}

/// Per-prototype attention distributions over the `h x w` feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PartMasks<T> {
    pub h: usize,
    pub w: usize,
    /// `[K, h * w]`, each row non-negative and summing to one.
    pub weights: Tensor<T>,
}

impl<T: Real> PartMasks<T> {
    pub fn count(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Mask of prototype `i` as an `[h, w]` map.
    pub fn mask(&self, i: usize) -> Tensor<T> {
        Tensor::new(&[self.h, self.w], self.weights.row(i).to_vec()).expect("mask extent")
    }
}

/// Inference result for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PatOutput<T> {
    /// `f^g`, `[d]`.
    pub global_feature: Tensor<T>,
    /// `[K, d]`; `None` when the decoder is disabled.
    pub part_features: Option<Tensor<T>>,
    pub masks: Option<PartMasks<T>>,
    /// `[f^g, f_1, ..., f_K]`.
    pub embedding: Tensor<T>,
}

/// Graph handles produced by [`PatModel::forward_graph`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[B, h, w, d]`
    pub feature_map: Var,
    /// `[B, hw, d]`
    pub f_att: Var,
    /// `[B, d]`
    pub global: Var,
    /// `[B, K, d]`
    pub parts: Option<Var>,
    /// Head-averaged cross-attention weights `[B, K, hw]`.
    pub masks: Option<Var>,
    /// `[B, (K + 1) d]` or `[B, d]` without decoder.
    pub embedding: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatModel<T> {
    pub config: PatConfig,
    pub num_identities: usize,
    pub store: ParamStore<T>,
    pub stem: Vec<Conv2dParams>,
    pub reduce: Conv2dParams,
    pub pos_embed: ParamId,
    pub encoder: Vec<EncoderBlock>,
    pub prototypes: ParamId,
    pub decoder: Vec<DecoderBlock>,
    pub heads: ClassifierHeads,
}

impl<T: Real> PatModel<T> {
    /// Builds every component regardless of toggles so the parameter layout
    /// depends only on dimensions; disabled components are never bound.
    pub fn new(config: PatConfig, num_identities: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_identities < 2 {
            return Err(TensorError::Invalid {
                op: "pat_model",
                msg: format!("need at least 2 identities, got {num_identities}"),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let dk = d / config.heads;

        let mut stem = Vec::new();
        let mut in_c = 3;
        for (i, (&c, &s)) in config.stem_channels.iter().zip(&config.stem_strides).enumerate() {
            stem.push(Conv2dParams::new(&mut store, &format!("stem.{i}"), 3, in_c, c, s, &mut rng));
            in_c = c;
        }
        let reduce = Conv2dParams::new(&mut store, "stem.reduce", 1, in_c, d, 1, &mut rng);
        let (h, w) = config.grid();
        let pos_embed = store.add_uniform("encoder.pos_embed", &[h * w, d], d, &mut rng);

        let encoder = (0..config.enc_layers)
            .map(|l| {
                let p = format!("encoder.{l}");
                EncoderBlock {
                    attn: AttentionParams::new(&mut store, &format!("{p}.attn"), d, config.heads, dk, dk, &mut rng),
                    norm1: LayerNormParams::new(&mut store, &format!("{p}.norm1"), d),
                    ffn: FfnParams::new(&mut store, &format!("{p}.ffn"), d, config.d_ff, &mut rng),
                    norm2: LayerNormParams::new(&mut store, &format!("{p}.norm2"), d),
                }
            })
            .collect();

        let prototypes = store.add_uniform("decoder.prototypes", &[config.prototypes, d], d, &mut rng);
        let decoder = (0..config.dec_layers)
            .map(|l| {
                let p = format!("decoder.{l}");
                DecoderBlock {
                    self_attn: AttentionParams::new(&mut store, &format!("{p}.self_attn"), d, config.heads, dk, dk, &mut rng),
                    norm1: LayerNormParams::new(&mut store, &format!("{p}.norm1"), d),
                    cross_attn: AttentionParams::new(&mut store, &format!("{p}.cross_attn"), d, config.heads, dk, dk, &mut rng),
                    norm2: LayerNormParams::new(&mut store, &format!("{p}.norm2"), d),
                    ffn: FfnParams::new(&mut store, &format!("{p}.ffn"), d, config.d_ff, &mut rng),
                    norm3: LayerNormParams::new(&mut store, &format!("{p}.norm3"), d),
                }
            })
            .collect();

        let heads = ClassifierHeads {
            global: ClassifierHead::new(&mut store, "head.global", d, num_identities, &mut rng),
            parts: (0..config.prototypes)
                .map(|i| ClassifierHead::new(&mut store, &format!("head.part{i}"), d, num_identities, &mut rng))
                .collect(),
        };

        Ok(PatModel {
            config,
            num_identities,
            store,
            stem,
            reduce,
            pos_embed,
            encoder,
            prototypes,
            decoder,
            heads,
        })
    }

    /// Same architecture and values in another scalar type.
    pub fn cast<U: Real>(&self) -> PatModel<U> {
        PatModel {
            config: self.config.clone(),
            num_identities: self.num_identities,
            store: self.store.cast(),
            stem: self.stem.clone(),
            reduce: self.reduce.clone(),
            pos_embed: self.pos_embed,
            encoder: self.encoder.clone(),
            prototypes: self.prototypes,
            decoder: self.decoder.clone(),
            heads: self.heads.clone(),
        }
    }

    /// `[B, H, W, 3] -> [B, h, w, d]`: 3x3 conv + ReLU stages, then the 1x1
    /// channel reduction to `d`.
    pub fn stem_forward(&self, g: &mut Graph<T>, images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[3] != 3 {
            return Err(TensorError::Invalid {
                op: "stem_forward",
                msg: format!("expected [B, H, W, 3] images, got {s:?}"),
            });
        }
        let f = self.config.downsample();
        if s[1] % f != 0 || s[2] % f != 0 {
            return Err(TensorError::Invalid {
                op: "stem_forward",
                msg: format!("image {}x{} not divisible by downsampling factor {f}", s[1], s[2]),
            });
        }
        let mut x = images;
        for conv in &self.stem {
            x = conv.forward(g, &self.store, x)?;
            x = g.relu(x);
        }
        self.reduce.forward(g, &self.store, x)
    }

    /// `[B, h, w, d] -> F^att [B, hw, d]`. With the encoder disabled this is
    /// just the flattened feature map.
    pub fn encoder_forward(&self, g: &mut Graph<T>, fmap: Var) -> Result<Var> {
        let s = g.shape(fmap).to_vec();
        if s.len() != 4 || s[3] != self.config.d_model {
            return Err(TensorError::Invalid {
                op: "encoder_forward",
                msg: format!("expected [B, h, w, {}] feature map, got {s:?}", self.config.d_model),
            });
        }
        let (b, hw, d) = (s[0], s[1] * s[2], s[3]);
        let mut x = g.reshape(fmap, &[b, hw, d])?;
        if !self.config.use_encoder {
            return Ok(x);
        }
        if self.config.positional_embedding {
            let pos = g.param(&self.store, self.pos_embed);
            x = g.add_broadcast(x, pos)?;
        }
        for block in &self.encoder {
            let a = block.attn.forward(g, &self.store, x, x, x)?;
            x = transformer_sublayer(g, &self.store, &block.norm1, x, a.output)?;
            let f = block.ffn.forward(g, &self.store, x)?;
            x = transformer_sublayer(g, &self.store, &block.norm2, x, f)?;
        }
        Ok(x)
    }

    /// Global average pooling over positions: `[B, hw, d] -> [B, d]`.
    pub fn global_feature(&self, g: &mut Graph<T>, f_att: Var) -> Result<Var> {
        g.mean_axis(f_att, 1)
    }

    /// Prototype self-attention, cross-attention onto the pixels of `f_att`
    /// and the FFN, each wrapped in residual + layer norm. Returns part
    /// features `[B, K, d]` and head-averaged masks `[B, K, hw]` of the last
    /// block.
    pub fn decoder_forward(&self, g: &mut Graph<T>, f_att: Var) -> Result<(Var, Var)> {
        let s = g.shape(f_att).to_vec();
        if s.len() != 3 || s[2] != self.config.d_model {
            return Err(TensorError::Invalid {
                op: "decoder_forward",
                msg: format!("expected [B, hw, {}] features, got {s:?}", self.config.d_model),
            });
        }
        let (b, d, k) = (s[0], s[2], self.config.prototypes);
        let protos = g.param(&self.store, self.prototypes);
        let mut q = g.reshape(protos, &[1, k, d])?;
        let mut masks = None;
        for (l, block) in self.decoder.iter().enumerate() {
            let sa = block.self_attn.forward(g, &self.store, q, q, q)?;
            q = transformer_sublayer(g, &self.store, &block.norm1, q, sa.output)?;
            if l == 0 {
                // prototype self-attention does not see the image; expand once
                let r = g.repeat(q, b)?;
                q = g.reshape(r, &[b, k, d])?;
            }
            let ca = block.cross_attn.forward(g, &self.store, q, f_att, f_att)?;
            q = transformer_sublayer(g, &self.store, &block.norm2, q, ca.output)?;
            let f = block.ffn.forward(g, &self.store, q)?;
            q = transformer_sublayer(g, &self.store, &block.norm3, q, f)?;
            masks = Some(ca.weights);
        }
        let weights = masks.ok_or(TensorError::Invalid {
            op: "decoder_forward",
            msg: "decoder has no blocks".into(),
        })?;
        let masks = g.mean_axis(weights, 1)?;
        Ok((q, masks))
    }

    /// `[f^g, f_1, ..., f_K]` per image.
    pub fn embedding(&self, g: &mut Graph<T>, global: Var, parts: Option<Var>) -> Result<Var> {
        match parts {
            None => Ok(global),
            Some(p) => {
                let s = g.shape(p).to_vec();
                let flat = g.reshape(p, &[s[0], s[1] * s[2]])?;
                g.concat_last(&[global, flat])
            }
        }
    }

    /// Full pipeline on `[B, H, W, 3]` images.
    pub fn forward_graph(&self, g: &mut Graph<T>, images: Var) -> Result<ForwardVars> {
        let feature_map = self.stem_forward(g, images)?;
        let f_att = self.encoder_forward(g, feature_map)?;
        let global = self.global_feature(g, f_att)?;
        let (parts, masks) = if self.config.use_decoder && !self.decoder.is_empty() {
            let (p, m) = self.decoder_forward(g, f_att)?;
            (Some(p), Some(m))
        } else {
            (None, None)
        };
        let embedding = self.embedding(g, global, parts)?;
        Ok(ForwardVars {
            feature_map,
            f_att,
            global,
            parts,
            masks,
            embedding,
        })
    }

    fn check_image(&self, img: &Tensor<T>) -> Result<()> {
        let want = [self.config.image_height, self.config.image_width, 3];
        if img.shape() != want {
            return Err(TensorError::Shape {
                op: "forward",
                lhs: img.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        Ok(())
    }

    /// Inference on several `[H, W, 3]` images at once.
    pub fn forward_batch(&self, images: &[Tensor<T>]) -> Result<Vec<PatOutput<T>>> {
        for img in images {
            self.check_image(img)?;
        }
        let mut g = Graph::new();
        let batch = g.constant(Tensor::stack(images)?);
        let fv = self.forward_graph(&mut g, batch)?;
        let (h, w) = {
            let s = g.shape(fv.feature_map);
            (s[1], s[2])
        };
        Ok((0..images.len())
            .map(|i| PatOutput {
                global_feature: g.value(fv.global).index_first(i),
                part_features: fv.parts.map(|p| g.value(p).index_first(i)),
                masks: fv.masks.map(|m| PartMasks {
                    h,
                    w,
                    weights: g.value(m).index_first(i),
                }),
                embedding: g.value(fv.embedding).index_first(i),
            })
            .collect())
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<PatOutput<T>> {
        Ok(self.forward_batch(std::slice::from_ref(image))?.remove(0))
    }
}

/// Elementwise maximum over prototypes as an `[h, w]` map, divided by its
/// maximum so the peak is 1.
pub fn fuse_masks<T: Real>(masks: &PartMasks<T>) -> Tensor<T> {
    let hw = masks.h * masks.w;
    let mut fused = vec![T::zero(); hw];
    for k in 0..masks.count() {
        for (f, &m) in fused.iter_mut().zip(masks.weights.row(k)) {
            *f = f.max(m);
        }
    }
    let peak = fused.iter().copied().fold(T::zero(), T::max);
    if peak > T::zero() {
        fused.iter_mut().for_each(|v| *v = *v / peak);
    }
    Tensor::new(&[masks.h, masks.w], fused).expect("mask extent")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PatConfig {
        PatConfig {
            image_height: 16,
            image_width: 8,
            stem_channels: vec![4, 4, 4],
            d_model: 8,
            heads: 2,
            d_ff: 16,
            prototypes: 3,
            ..PatConfig::default()
        }
    }

    #[test]
    fn default_stem_gives_eighth_resolution() {
        let m = PatModel::<f32>::new(PatConfig::default(), 4, 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 64, 32, 3]));
        let f = m.stem_forward(&mut g, x).unwrap();
        assert_eq!(g.shape(f), &[1, 8, 4, 64]);
    }

    #[test]
    fn zero_image_and_biases_give_zero_features() {
        let mut m = PatModel::<f64>::new(tiny(), 3, 1).unwrap();
        let biases: Vec<ParamId> = m.stem.iter().map(|c| c.bias).chain([m.reduce.bias]).collect();
        for b in biases {
            m.store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 16, 8, 3]));
        let f = m.stem_forward(&mut g, x).unwrap();
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stem_rejects_indivisible_extents() {
        let m = PatModel::<f64>::new(tiny(), 3, 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 12, 8, 3]));
        assert!(m.stem_forward(&mut g, x).is_err());
        let mut bad = tiny();
        bad.image_height = 20;
        assert!(PatModel::<f64>::new(bad, 3, 1).is_err());
    }

    #[test]
    fn embedding_layout() {
        let m = PatModel::<f64>::new(tiny(), 3, 2).unwrap();
        let img = Tensor::from_fn(&[16, 8, 3], |i| ((i * 7) % 11) as f64 / 11.0);
        let out = m.forward(&img).unwrap();
        assert_eq!(out.embedding.len(), 4 * 8);
        assert_eq!(&out.embedding.data()[..8], out.global_feature.data());
        assert_eq!(&out.embedding.data()[8..], out.part_features.as_ref().unwrap().data());
        let masks = out.masks.unwrap();
        assert_eq!((masks.h, masks.w, masks.count()), (2, 1, 3));
    }

    #[test]
    fn fuse_single_and_disjoint() {
        let single = PartMasks {
            h: 1,
            w: 4,
            weights: Tensor::<f64>::from_f64(&[1, 4], &[0.1, 0.2, 0.5, 0.2]).unwrap(),
        };
        assert_eq!(fuse_masks(&single).data(), &[0.2, 0.4, 1.0, 0.4]);
        let disjoint = PartMasks {
            h: 2,
            w: 2,
            weights: Tensor::<f64>::from_f64(&[2, 4], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        };
        assert_eq!(fuse_masks(&disjoint).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn toggles_change_embedding_width() {
        let mut cfg = tiny();
        cfg.use_decoder = false;
        let m = PatModel::<f64>::new(cfg.clone(), 3, 2).unwrap();
        let out = m.forward(&Tensor::zeros(&[16, 8, 3])).unwrap();
        assert_eq!(out.embedding.len(), 8);
        assert!(out.masks.is_none());
        assert_eq!(cfg.embedding_dim(), 8);
    }
}

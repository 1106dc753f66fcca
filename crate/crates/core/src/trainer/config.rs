//! Run configuration as `key = value` text.

use crate::kvconfig::{fmt_bool, fmt_list, ConfigError, KvFile};
use crate::losses::LossWeights;
use crate::model::PatConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factors: Vec<f64>,
    pub batch_p: usize,
    pub batch_k: usize,
    pub prototypes: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub stem_channels: Vec<usize>,
    pub stem_strides: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub lambda_cls: f64,
    pub lambda_tri: f64,
    pub margin: f64,
    pub seed: u64,
    /// Checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub weight_decay: f64,
    /// 0 means "one more than the largest label in the training data".
    pub num_identities: usize,
    pub positional_embedding: bool,
    pub diversity: bool,
    pub decoder: bool,
    pub encoder: bool,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = PatConfig::default();
        TrainConfig {
            epochs: 200,
            base_lr: 3.5e-4,
            decay_epochs: vec![80, 140],
            decay_factors: vec![0.1, 0.01],
            batch_p: 4,
            batch_k: 4,
            prototypes: m.prototypes,
            image_height: m.image_height,
            image_width: m.image_width,
            stem_channels: m.stem_channels,
            stem_strides: m.stem_strides,
            d_model: m.d_model,
            heads: m.heads,
            d_ff: m.d_ff,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            lambda_cls: 1.0,
            lambda_tri: 1.0,
            margin: 0.3,
            seed: 0,
            checkpoint_interval: 50,
            weight_decay: 0.0,
            num_identities: 0,
            positional_embedding: m.positional_embedding,
            diversity: true,
            decoder: m.use_decoder,
            encoder: m.use_encoder,
            augment: true,
        }
    }
}

macro_rules! scalar_keys {
    ($m:ident) => {
        $m!(
            epochs,
            base_lr,
            batch_p,
            batch_k,
            prototypes,
            image_height,
            image_width,
            d_model,
            heads,
            d_ff,
            enc_layers,
            dec_layers,
            lambda_cls,
            lambda_tri,
            margin,
            seed,
            checkpoint_interval,
            weight_decay,
            num_identities
        )
    };
}

macro_rules! list_keys {
    ($m:ident) => {
        $m!(decay_epochs, decay_factors, stem_channels, stem_strides)
    };
}

macro_rules! bool_keys {
    ($m:ident) => {
        $m!(positional_embedding, diversity, decoder, encoder, augment)
    };
}

impl TrainConfig {
    /// Parses `text` on top of the defaults, then applies `overrides`
    /// (`key=value` strings) in order.
    pub fn parse_with(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut kv = KvFile::parse(text)?;
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: 0,
                text: o.clone(),
            })?;
            kv.set(k.trim(), v.trim());
        }
        let mut c = TrainConfig::default();
        macro_rules! take {
            ($($f:ident),*) => {$( if let Some(v) = kv.take(stringify!($f))? { c.$f = v; } )*};
        }
        macro_rules! take_list {
            ($($f:ident),*) => {$( if let Some(v) = kv.take_list(stringify!($f))? { c.$f = v; } )*};
        }
        macro_rules! take_bool {
            ($($f:ident),*) => {$( if let Some(v) = kv.take_bool(stringify!($f))? { c.$f = v; } )*};
        }
        scalar_keys!(take);
        list_keys!(take_list);
        bool_keys!(take_bool);
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::parse_with(text, &[])
    }

    /// Every key, one per line; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        macro_rules! put {
            ($($f:ident),*) => {$( out.push_str(&format!("{} = {}\n", stringify!($f), self.$f)); )*};
        }
        macro_rules! put_list {
            ($($f:ident),*) => {$( out.push_str(&format!("{} = {}\n", stringify!($f), fmt_list(&self.$f))); )*};
        }
        macro_rules! put_bool {
            ($($f:ident),*) => {$( out.push_str(&format!("{} = {}\n", stringify!($f), fmt_bool(self.$f))); )*};
        }
        scalar_keys!(put);
        list_keys!(put_list);
        bool_keys!(put_bool);
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.decay_epochs.len() != self.decay_factors.len() {
            return bad("decay_epochs and decay_factors differ in length".into());
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("decay_epochs must be strictly increasing, got {:?}", self.decay_epochs));
        }
        if self.decay_factors.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return bad("decay factors must lie in (0, 1]".into());
        }
        if self.decay_factors.windows(2).any(|w| w[0] < w[1]) {
            return bad("decay factors must not increase".into());
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative".into());
        }
        self.loss_weights().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.batch_p < 2 || self.batch_k < 2 {
            return bad("batch_p and batch_k must be at least 2".into());
        }
        Ok(())
    }

    pub fn model_config(&self) -> PatConfig {
        PatConfig {
            image_height: self.image_height,
            image_width: self.image_width,
            stem_channels: self.stem_channels.clone(),
            stem_strides: self.stem_strides.clone(),
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            prototypes: self.prototypes,
            positional_embedding: self.positional_embedding,
            use_encoder: self.encoder,
            use_decoder: self.decoder,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_cls: self.lambda_cls,
            lambda_tri: self.lambda_tri,
            margin_alpha: self.margin,
        }
    }
}

/// Step decay: `base_lr` times the factor of the last milestone reached.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let factor = cfg
        .decay_epochs
        .iter()
        .zip(&cfg.decay_factors)
        .filter(|(&m, _)| epoch >= m)
        .map(|(_, &f)| f)
        .last()
        .unwrap_or(1.0);
    cfg.base_lr * factor
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_milestones() {
        let cfg = TrainConfig {
            epochs: 120,
            decay_epochs: vec![40, 70],
            ..TrainConfig::default()
        };
        assert_eq!(lr_at_epoch(&cfg, 0), 3.5e-4);
        assert_eq!(lr_at_epoch(&cfg, 39), 3.5e-4);
        assert!((lr_at_epoch(&cfg, 40) - 3.5e-5).abs() < 1e-18);
        assert!((lr_at_epoch(&cfg, 70) - 3.5e-6).abs() < 1e-18);
        assert!((0..119).all(|e| lr_at_epoch(&cfg, e + 1) <= lr_at_epoch(&cfg, e)));
    }

    #[test]
    fn text_round_trip_and_overrides() {
        let cfg = TrainConfig {
            base_lr: 1e-3,
            seed: 42,
            diversity: false,
            stem_channels: vec![8, 16, 32],
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let o = TrainConfig::parse_with("epochs = 3\n", &["diversity=off".into(), "epochs=5".into()]).unwrap();
        assert_eq!(o.epochs, 5);
        assert!(!o.diversity && o.decoder);
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(TrainConfig::parse("decay_epochs = 80, 40").is_err());
        assert!(TrainConfig::parse("base_lr = 0").is_err());
        assert!(TrainConfig::parse("decay_factors = 0.1").is_err());
        assert!(TrainConfig::parse("learning_rate = 0.1").is_err());
        assert!(TrainConfig::parse("batch_k = 1").is_err());
    }
}

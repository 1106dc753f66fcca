//! Training: configuration, learning-rate schedule, optimizer, checkpoints
//! and the epoch loop.

mod checkpoint;
mod config;
mod optim;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError, NamedArray, RngState};
pub use config::{lr_at_epoch, TrainConfig};
pub use optim::{Adam, NonFiniteGradient, BETA1, BETA2, EPSILON};

use crate::autodiff::Graph;
use crate::data::{augment, AugmentConfig, Dataset, PersonImage, PkSampler};
use crate::kvconfig::ConfigError;
use crate::losses::total_loss;
use crate::model::PatModel;
use crate::tensor::{Tensor, TensorError};

pub const METRICS_HEADER: &str = "epoch,lr,loss_total,loss_en,loss_div,loss_dis";

/// Mixed into the configured seed so batch order and model init differ.
const SAMPLER_SALT: u64 = 0x5bd1_e995_0000_0001;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (batch seed {batch_seed})")]
    NonFiniteLoss { epoch: usize, batch: usize, batch_seed: u64 },
    #[error("non-finite gradient for parameter `{param}` at epoch {epoch}, batch {batch} (batch seed {batch_seed})")]
    NonFiniteGradient {
        param: String,
        epoch: usize,
        batch: usize,
        batch_seed: u64,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Mean loss terms over one epoch's batches; absent terms are 0.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub encoder: f64,
    pub diversity: f64,
    pub discriminability: f64,
}

impl EpochMetrics {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.lr, self.total, self.encoder, self.diversity, self.discriminability
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub encoder: f64,
    pub diversity: f64,
    pub discriminability: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: PatModel<f32>,
    pub optimizer: Adam<f32>,
    /// Completed epochs.
    pub epoch: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh model; `num_identities` replaces a zero in the config.
    pub fn new(config: &TrainConfig, num_identities: usize) -> Result<Self, TrainError> {
        let mut config = config.clone();
        if config.num_identities == 0 {
            config.num_identities = num_identities;
        }
        config.validate()?;
        let model = PatModel::new(config.model_config(), config.num_identities, config.seed)?;
        let optimizer = Adam::new(model.store.len(), config.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Trainer {
            config,
            model,
            optimizer,
            epoch: 0,
            rng,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let store = &self.model.store;
        let params = store
            .entries()
            .iter()
            .map(|e| NamedArray {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                values: e.value.data().to_vec(),
            })
            .collect();
        let mut optimizer = Vec::new();
        for id in store.ids() {
            if let Some((m, v)) = &self.optimizer.moments[id.index()] {
                for (tag, t) in [("m", m), ("v", v)] {
                    optimizer.push(NamedArray {
                        name: format!("adam.{tag}.{}", store.name(id)),
                        shape: t.shape().to_vec(),
                        values: t.data().to_vec(),
                    });
                }
            }
        }
        Checkpoint {
            config: self.config.to_text(),
            params,
            optimizer,
            optimizer_step: self.optimizer.step,
            epoch: self.epoch as u64,
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let config = TrainConfig::parse(&ckpt.config)?;
        if config.num_identities < 2 {
            return Err(CheckpointError::Malformed("config lacks num_identities".into()).into());
        }
        let mut t = Trainer::new(&config, config.num_identities)?;
        load_params(&mut t.model, &ckpt.params)?;
        let store = &t.model.store;
        let mut moments: Vec<Option<(Tensor<f32>, Tensor<f32>)>> = vec![None; store.len()];
        for pair in ckpt.optimizer.chunks(2) {
            let [m, v] = pair else {
                return Err(CheckpointError::Malformed("optimizer arrays come in m/v pairs".into()).into());
            };
            let name = m
                .name
                .strip_prefix("adam.m.")
                .filter(|n| v.name.strip_prefix("adam.v.") == Some(n))
                .ok_or_else(|| CheckpointError::Malformed(format!("unexpected optimizer arrays {} / {}", m.name, v.name)))?;
            let id = store
                .find(name)
                .ok_or_else(|| CheckpointError::Malformed(format!("optimizer state for unknown parameter {name}")))?;
            moments[id.index()] = Some((to_tensor(m, store.get(id).shape())?, to_tensor(v, store.get(id).shape())?));
        }
        t.optimizer.moments = moments;
        t.optimizer.step = ckpt.optimizer_step;
        t.epoch = ckpt.epoch as usize;
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        t.rng = rng;
        Ok(t)
    }

    /// One forward/backward/update on a batch. `images` are used as given.
    pub fn step(&mut self, images: &[PersonImage], lr: f64) -> Result<(StepLosses, Vec<(String, bool)>), TrainError> {
        let labels: Vec<usize> = images.iter().map(|i| i.identity).collect();
        let pixels: Vec<Tensor<f32>> = images.iter().map(|i| i.pixels.clone()).collect();
        let mut g = Graph::<f32>::new();
        let batch = g.constant(Tensor::stack(&pixels)?);
        let model = &self.model;
        let fv = model.forward_graph(&mut g, batch)?;
        let weights = self.config.loss_weights();
        let terms = total_loss(
            &mut g,
            &model.store,
            &fv,
            &labels,
            &model.heads,
            &weights,
            self.config.diversity,
        )?;
        let value = |v: Option<crate::autodiff::Var>| v.map_or(0.0, |v| g.value(v).item() as f64);
        let losses = StepLosses {
            total: value(Some(terms.total)),
            encoder: value(Some(terms.encoder)),
            diversity: value(terms.diversity),
            discriminability: value(terms.discriminability),
        };
        if !losses.total.is_finite() {
            return Err(TensorError::Degenerate {
                op: "total_loss",
                msg: "non-finite".into(),
            }
            .into());
        }
        g.backward(terms.total)?;
        let global = g.value(fv.global).clone();
        let parts = fv.parts.map(|p| g.value(p).clone());
        let grads = g.param_grads();
        let touched: Vec<(String, bool)> = grads
            .iter()
            .map(|(id, gr)| (model.store.name(*id).to_string(), gr.iter().any(|&v| v != 0.0)))
            .collect();
        self.optimizer
            .step(&mut self.model.store, &grads, lr)
            .map_err(|e| TrainError::NonFiniteGradient {
                param: e.param,
                epoch: self.epoch,
                batch: 0,
                batch_seed: 0,
            })?;
        drop(g);

        let heads = &self.model.heads;
        heads.global.update_running_stats(&mut self.model.store, &global);
        if let Some(p) = parts {
            let (b, k, d) = (p.shape()[0], p.shape()[1], p.shape()[2]);
            for (i, head) in heads.parts.iter().enumerate() {
                let rows = Tensor::from_fn(&[b, d], |j| p.data()[(j / d) * k * d + i * d + j % d]);
                head.update_running_stats(&mut self.model.store, &rows);
            }
        }
        Ok((losses, touched))
    }

    /// Runs the next epoch over PK batches of `data`.
    pub fn run_epoch(&mut self, data: &Dataset, sampler: &PkSampler) -> Result<EpochMetrics, TrainError> {
        let e = self.epoch;
        let lr = lr_at_epoch(&self.config, e);
        let aug = if self.config.augment {
            AugmentConfig::for_height(self.config.image_height)
        } else {
            AugmentConfig::disabled()
        };
        let batches = sampler.epoch(e as u64);
        let mut sums = [0.0f64; 4];
        for (bi, batch) in batches.iter().enumerate() {
            let batch_seed = self.rng.next_u64();
            let mut brng = ChaCha8Rng::seed_from_u64(batch_seed);
            let images: Vec<PersonImage> = batch.iter().map(|&i| augment(&data.images[i], &aug, &mut brng)).collect();
            let (l, _) = self.step(&images, lr).map_err(|err| match err {
                TrainError::Tensor(TensorError::Degenerate { op: "total_loss", .. }) => TrainError::NonFiniteLoss {
                    epoch: e + 1,
                    batch: bi,
                    batch_seed,
                },
                TrainError::NonFiniteGradient { param, .. } => TrainError::NonFiniteGradient {
                    param,
                    epoch: e + 1,
                    batch: bi,
                    batch_seed,
                },
                other => other,
            })?;
            for (s, v) in sums.iter_mut().zip([l.total, l.encoder, l.diversity, l.discriminability]) {
                *s += v;
            }
        }
        self.epoch += 1;
        let n = batches.len().max(1) as f64;
        Ok(EpochMetrics {
            epoch: self.epoch,
            lr,
            total: sums[0] / n,
            encoder: sums[1] / n,
            diversity: sums[2] / n,
            discriminability: sums[3] / n,
        })
    }
}

fn to_tensor(a: &NamedArray, want: &[usize]) -> Result<Tensor<f32>, CheckpointError> {
    if a.shape != want {
        return Err(CheckpointError::Malformed(format!(
            "array {} has shape {:?}, model expects {want:?}",
            a.name, a.shape
        )));
    }
    Tensor::new(&a.shape, a.values.clone()).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

fn load_params(model: &mut PatModel<f32>, arrays: &[NamedArray]) -> Result<(), CheckpointError> {
    if arrays.len() != model.store.len() {
        return Err(CheckpointError::Malformed(format!(
            "checkpoint has {} parameter arrays, model has {}",
            arrays.len(),
            model.store.len()
        )));
    }
    for a in arrays {
        let id = model
            .store
            .find(&a.name)
            .ok_or_else(|| CheckpointError::Malformed(format!("unknown parameter {}", a.name)))?;
        let t = to_tensor(a, model.store.get(id).shape())?;
        *model.store.get_mut(id) = t;
    }
    Ok(())
}

/// Restores just the model from a checkpoint.
pub fn load_model(ckpt: &Checkpoint) -> Result<PatModel<f32>, TrainError> {
    Ok(Trainer::from_checkpoint(ckpt)?.model)
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("ckpt_{epoch:04}.bin"))
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T, TrainError> {
    r.map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Trains for `config.epochs` epochs (counting those already in `resume`),
/// appending to `<out_dir>/metrics.csv` and writing `ckpt_<epoch>.bin` every
/// `checkpoint_interval` epochs and at the end. A zero-epoch run writes the
/// initial checkpoint.
pub fn train(
    config: &TrainConfig,
    data: &Dataset,
    out_dir: &Path,
    resume: Option<&Checkpoint>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Trainer, TrainError> {
    io(out_dir, fs::create_dir_all(out_dir))?;
    let mut trainer = match resume {
        None => Trainer::new(config, data.num_identities())?,
        Some(ckpt) => {
            let t = Trainer::from_checkpoint(ckpt)?;
            let mut expect = config.clone();
            expect.epochs = t.config.epochs;
            expect.checkpoint_interval = t.config.checkpoint_interval;
            if expect.num_identities == 0 {
                expect.num_identities = t.config.num_identities;
            }
            if expect != t.config {
                return Err(ConfigError::Invalid("configuration differs from the checkpoint being resumed".into()).into());
            }
            let mut t = t;
            t.config.epochs = config.epochs;
            t.config.checkpoint_interval = config.checkpoint_interval;
            t
        }
    };
    if let Some(&bad) = data.labels().iter().find(|&&l| l >= trainer.config.num_identities) {
        return Err(ConfigError::Invalid(format!(
            "label {bad} outside the {} identities the model classifies",
            trainer.config.num_identities
        ))
        .into());
    }
    let sampler = PkSampler::new(
        &data.labels(),
        trainer.config.batch_p,
        trainer.config.batch_k,
        trainer.config.seed ^ SAMPLER_SALT,
    )?;

    let metrics_path = out_dir.join("metrics.csv");
    let mut log = String::from(METRICS_HEADER);
    log.push('\n');
    if trainer.epoch > 0 {
        // keep the lines of the run being resumed
        if let Ok(old) = fs::read_to_string(&metrics_path) {
            for line in old.lines().skip(1) {
                match line.split(',').next().and_then(|e| e.parse::<usize>().ok()) {
                    Some(e) if e <= trainer.epoch => {
                        log.push_str(line);
                        log.push('\n');
                    }
                    _ => {}
                }
            }
        }
    }
    io(&metrics_path, fs::write(&metrics_path, &log))?;
    let mut file: File = io(&metrics_path, OpenOptions::new().append(true).open(&metrics_path))?;

    if trainer.epoch >= trainer.config.epochs && trainer.epoch == 0 {
        trainer.checkpoint().save(&checkpoint_path(out_dir, 0))?;
    }
    while trainer.epoch < trainer.config.epochs {
        let m = trainer.run_epoch(data, &sampler)?;
        io(&metrics_path, writeln!(file, "{}", m.csv_line()))?;
        on_epoch(&m);
        let interval = trainer.config.checkpoint_interval;
        if trainer.epoch == trainer.config.epochs || (interval > 0 && trainer.epoch % interval == 0) {
            trainer.checkpoint().save(&checkpoint_path(out_dir, trainer.epoch))?;
        }
    }
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            image_height: 16,
            image_width: 8,
            stem_channels: vec![4, 8],
            stem_strides: vec![2, 2],
            d_model: 8,
            heads: 2,
            d_ff: 16,
            prototypes: 2,
            batch_p: 2,
            batch_k: 2,
            ..TrainConfig::default()
        }
    }

    pub(crate) fn tiny_data() -> Dataset {
        Dataset::from_images(
            synth_generate(&SynthConfig {
                num_identities: 3,
                images_per_identity: 4,
                height: 16,
                width: 8,
                ..SynthConfig::default()
            })
            .unwrap(),
        )
    }

    #[test]
    fn checkpoint_round_trip_restores_state() {
        let cfg = tiny_config();
        let data = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let t = train(&cfg, &data, dir.path(), None, |_| {}).unwrap();
        let ckpt = t.checkpoint();
        let back = Trainer::from_checkpoint(&ckpt).unwrap();
        assert_eq!(back.checkpoint().to_bytes(), ckpt.to_bytes());
        let img = &data.images[0].pixels;
        assert_eq!(t.model.forward(img).unwrap().embedding, back.model.forward(img).unwrap().embedding);
    }

    #[test]
    fn zero_epochs_writes_initial_checkpoint_only() {
        let cfg = TrainConfig { epochs: 0, ..tiny_config() };
        let dir = tempfile::tempdir().unwrap();
        train(&cfg, &tiny_data(), dir.path(), None, |_| {}).unwrap();
        assert!(checkpoint_path(dir.path(), 0).exists());
        assert_eq!(fs::read_to_string(dir.path().join("metrics.csv")).unwrap(), format!("{METRICS_HEADER}\n"));
    }

    #[test]
    fn disabled_decoder_never_touches_prototypes() {
        let cfg = TrainConfig {
            decoder: false,
            ..tiny_config()
        };
        let data = tiny_data();
        let mut t = Trainer::new(&cfg, 3).unwrap();
        let before = t.model.store.clone();
        // two images each of two identities
        let batch: Vec<_> = [0, 1, 4, 5].iter().map(|&i| data.images[i].clone()).collect();
        assert_ne!(batch[0].identity, batch[2].identity);
        let (losses, touched) = t.step(&batch, 1e-2).unwrap();
        assert_eq!((losses.diversity, losses.discriminability), (0.0, 0.0));
        assert!(touched.iter().all(|(n, _)| !n.starts_with("decoder") && !n.starts_with("head.part")));
        let p = t.model.prototypes;
        assert_eq!(t.model.store.get(p), before.get(p));
    }

    #[test]
    fn labels_beyond_classifier_are_rejected() {
        let cfg = TrainConfig {
            num_identities: 2,
            ..tiny_config()
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            train(&cfg, &tiny_data(), dir.path(), None, |_| {}),
            Err(TrainError::Config(_))
        ));
    }
}

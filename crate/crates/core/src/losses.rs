//! Training objectives: BN-neck identity classification, batch-hard
//! triplet, part diversity, part discriminability, encoder loss and their
//! unweighted sum.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::model::{ClassifierHeads, ForwardVars};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Result, Tensor, TensorError};

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const RUNNING_STATS_MOMENTUM: f64 = 0.1;

/// Batch normalization followed by a bias-free linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    /// `[d, num_identities]`
    pub weight: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl ClassifierHead {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, prefix: &str, d: usize, classes: usize, rng: &mut R) -> Self {
        ClassifierHead {
            bn_gamma: store.add_const(format!("{prefix}.bn_gamma"), &[d], 1.0),
            bn_beta: store.add_const(format!("{prefix}.bn_beta"), &[d], 0.0),
            weight: store.add_uniform(format!("{prefix}.weight"), &[d, classes], d, rng),
            running_mean: store.add(format!("{prefix}.running_mean"), Tensor::zeros(&[d]), false),
            running_var: store.add(format!("{prefix}.running_var"), Tensor::full(&[d], T::one()), false),
        }
    }

    pub fn classes<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).shape()[1]
    }

    /// Training-mode logits `[B, C]` from features `[B, d]`.
    pub fn logits<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        let gamma = g.param(store, self.bn_gamma);
        let beta = g.param(store, self.bn_beta);
        let w = g.param(store, self.weight);
        let (normed, _, _) = g.batch_norm(features, gamma, beta, T::lit(BATCH_NORM_EPS))?;
        g.matmul(normed, w)
    }

    /// Exponential moving average of the batch statistics of `features`
    /// (`[B, d]`, unbiased variance as in common BN implementations).
    pub fn update_running_stats<T: Real>(&self, store: &mut ParamStore<T>, features: &Tensor<T>) {
        let d = features.shape()[1];
        let b = features.shape()[0];
        let m = T::lit(RUNNING_STATS_MOMENTUM);
        let mut mean = vec![T::zero(); d];
        for r in 0..b {
            for (j, mv) in mean.iter_mut().enumerate() {
                *mv += features.data()[r * d + j];
            }
        }
        mean.iter_mut().for_each(|v| *v = *v / T::lit(b as f64));
        let mut var = vec![T::zero(); d];
        for r in 0..b {
            for (j, vv) in var.iter_mut().enumerate() {
                let c = features.data()[r * d + j] - mean[j];
                *vv += c * c;
            }
        }
        let denom = T::lit((b.max(2) - 1) as f64);
        var.iter_mut().for_each(|v| *v = *v / denom);
        for (id, batch) in [(self.running_mean, &mean), (self.running_var, &var)] {
            for (r, &s) in store.get_mut(id).data_mut().iter_mut().zip(batch.iter()) {
                *r = (T::one() - m) * *r + m * s;
            }
        }
    }

    /// Inference logits for one feature vector using the running statistics.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, feature: &[T]) -> Vec<T> {
        let gamma = store.get(self.bn_gamma).data();
        let beta = store.get(self.bn_beta).data();
        let mean = store.get(self.running_mean).data();
        let var = store.get(self.running_var).data();
        let w = store.get(self.weight);
        let c = w.shape()[1];
        let eps = T::lit(BATCH_NORM_EPS);
        let normed: Vec<T> = feature
            .iter()
            .enumerate()
            .map(|(j, &f)| (f - mean[j]) / (var[j] + eps).sqrt() * gamma[j] + beta[j])
            .collect();
        (0..c)
            .map(|k| normed.iter().enumerate().map(|(j, &v)| v * w.data()[j * c + k]).sum())
            .collect()
    }
}

/// Weights of the classification and triplet terms, and the triplet margin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_tri: f64,
    pub margin_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 1.0,
            lambda_tri: 1.0,
            margin_alpha: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda_cls, self.lambda_tri, self.margin_alpha]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(TensorError::Invalid {
                op: "loss_weights",
                msg: format!("weights and margin must be finite and non-negative: {self:?}"),
            })
        }
    }
}

/// Mean cross-entropy of the BN-neck classifier on `features[B, d]`.
pub fn id_classification_loss<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    features: Var,
    labels: &[usize],
    head: &ClassifierHead,
) -> Result<Var> {
    let classes = head.classes(store);
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(TensorError::LabelOutOfRange { label: bad, classes });
    }
    let logits = head.logits(g, store, features)?;
    g.cross_entropy(logits, labels)
}

/// Batch-hard triplet loss with Euclidean distances on `features[B, d]`.
pub fn triplet_loss_batch_hard<T: Real>(g: &mut Graph<T>, features: Var, labels: &[usize], margin: f64) -> Result<Var> {
    g.triplet_batch_hard(features, labels, T::lit(margin))
}

/// Mean pairwise cosine similarity over ordered pairs `i != j` of part
/// features, averaged over the batch. Accepts `[K, d]` or `[B, K, d]`.
pub fn diversity_loss<T: Real>(g: &mut Graph<T>, part_features: Var) -> Result<Var> {
    let s = g.shape(part_features).to_vec();
    let parts = match s.len() {
        2 => g.reshape(part_features, &[1, s[0], s[1]])?,
        3 => part_features,
        _ => {
            return Err(TensorError::Invalid {
                op: "diversity_loss",
                msg: format!("expected [K, d] or [B, K, d], got {s:?}"),
            })
        }
    };
    let s = g.shape(parts).to_vec();
    let (b, k) = (s[0], s[1]);
    if k < 2 {
        return Err(TensorError::Invalid {
            op: "diversity_loss",
            msg: format!("need at least 2 part features, got {k}"),
        });
    }
    let unit = g.l2_normalize(parts).map_err(|_| TensorError::Degenerate {
        op: "diversity_loss",
        msg: "zero-norm part feature".into(),
    })?;
    let gram = g.bmm(unit, unit, true)?;
    let off_diag = g.constant(Tensor::from_fn(&[b, k, k], |i| {
        let r = i % (k * k);
        if r / k == r % k {
            T::zero()
        } else {
            T::one()
        }
    }));
    let masked = g.mul(gram, off_diag)?;
    let total = g.sum(masked);
    Ok(g.mul_scalar(total, T::one() / T::lit((b * k * (k - 1)) as f64)))
}

fn weighted_sum<T: Real>(g: &mut Graph<T>, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let scaled = if w == 1.0 { v } else { g.mul_scalar(v, T::lit(w)) };
        acc = Some(match acc {
            None => scaled,
            Some(a) => g.add(a, scaled)?,
        });
    }
    Ok(acc.unwrap_or_else(|| g.constant(Tensor::scalar(T::zero()))))
}

/// `lambda_cls * L_cls(f) + lambda_tri * L_tri(f)`; zero-weight terms are not
/// evaluated.
fn cls_plus_triplet<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    features: Var,
    labels: &[usize],
    head: &ClassifierHead,
    weights: &LossWeights,
) -> Result<Vec<(f64, Var)>> {
    let mut terms = Vec::with_capacity(2);
    if weights.lambda_cls != 0.0 {
        terms.push((weights.lambda_cls, id_classification_loss(g, store, features, labels, head)?));
    }
    if weights.lambda_tri != 0.0 {
        terms.push((
            weights.lambda_tri,
            triplet_loss_batch_hard(g, features, labels, weights.margin_alpha)?,
        ));
    }
    Ok(terms)
}

/// Encoder loss on the global features `[B, d]`.
pub fn encoder_loss<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    global_features: Var,
    labels: &[usize],
    head: &ClassifierHead,
    weights: &LossWeights,
) -> Result<Var> {
    let terms = cls_plus_triplet(g, store, global_features, labels, head, weights)?;
    weighted_sum(g, &terms)
}

/// Sum over prototypes of classification and triplet losses on
/// `part_features[B, K, d]`, each prototype with its own head and triplets
/// formed within the same prototype index.
pub fn discriminability_loss<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    part_features: Var,
    labels: &[usize],
    heads: &[ClassifierHead],
    weights: &LossWeights,
) -> Result<Var> {
    let s = g.shape(part_features).to_vec();
    if s.len() != 3 || s[1] != heads.len() {
        return Err(TensorError::Invalid {
            op: "discriminability_loss",
            msg: format!("part features {s:?} against {} heads", heads.len()),
        });
    }
    let (b, k, d) = (s[0], s[1], s[2]);
    let mut terms = Vec::new();
    for (i, head) in heads.iter().enumerate().take(k) {
        let fi = g.narrow(part_features, 1, i, 1)?;
        let fi = g.reshape(fi, &[b, d])?;
        terms.extend(cls_plus_triplet(g, store, fi, labels, head, weights)?);
    }
    weighted_sum(g, &terms)
}

/// The loss terms of one training batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub encoder: Var,
    pub diversity: Option<Var>,
    pub discriminability: Option<Var>,
}

/// `L_En + L_div + L_dis`. Without part features only `L_En` remains;
/// `use_diversity = false` drops `L_div` alone.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    outputs: &ForwardVars,
    labels: &[usize],
    heads: &ClassifierHeads,
    weights: &LossWeights,
    use_diversity: bool,
) -> Result<LossTerms> {
    weights.validate()?;
    let encoder = encoder_loss(g, store, outputs.global, labels, &heads.global, weights)?;
    let mut total = encoder;
    let mut diversity = None;
    let mut discriminability = None;
    if let Some(parts) = outputs.parts {
        if use_diversity {
            let dv = diversity_loss(g, parts)?;
            total = g.add(total, dv)?;
            diversity = Some(dv);
        }
        let ds = discriminability_loss(g, store, parts, labels, &heads.parts, weights)?;
        total = g.add(total, ds)?;
        discriminability = Some(ds);
    }
    Ok(LossTerms {
        total,
        encoder,
        diversity,
        discriminability,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn diversity_analytic_cases() {
        let mut g = Graph::<f64>::new();
        let same = g.constant(t(&[3, 2], &[0.6, 0.8, 0.6, 0.8, 0.6, 0.8]));
        let v = diversity_loss(&mut g, same).unwrap();
        assert!((g.value(v).item() - 1.0).abs() < 1e-15);
        let ortho = g.constant(t(&[3, 3], &[2.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.5]));
        let v = diversity_loss(&mut g, ortho).unwrap();
        assert_eq!(g.value(v).item(), 0.0);
        let half = g.constant(t(&[2, 2], &[1.0, 0.0, 0.5, 0.75f64.sqrt()]));
        let v = diversity_loss(&mut g, half).unwrap();
        assert!((g.value(v).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn diversity_rejects_zero_and_single() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(t(&[2, 2], &[0.0, 0.0, 1.0, 0.0]));
        assert!(matches!(diversity_loss(&mut g, z), Err(TensorError::Degenerate { .. })));
        let one = g.constant(t(&[1, 2], &[1.0, 0.0]));
        assert!(diversity_loss(&mut g, one).is_err());
    }

    #[test]
    fn triplet_margin_cases() {
        let labels = [0, 0, 1, 1];
        let mut g = Graph::<f64>::new();
        let far = g.constant(t(&[4, 2], &[0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 5.0, 0.0]));
        let l = triplet_loss_batch_hard(&mut g, far, &labels, 0.3).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        // unit square, identities on opposite edges: d_ap = 1 = d_an everywhere
        let eq = g.constant(t(&[4, 2], &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let l = triplet_loss_batch_hard(&mut g, eq, &[0, 0, 1, 1], 0.3).unwrap();
        assert!((g.value(l).item() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn triplet_requires_positive_and_negative() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            triplet_loss_batch_hard(&mut g, x, &[0, 0, 1], 0.3),
            Err(TensorError::Sampling(_))
        ));
        assert!(matches!(
            triplet_loss_batch_hard(&mut g, x, &[0, 0, 0], 0.3),
            Err(TensorError::Sampling(_))
        ));
    }

    #[test]
    fn classification_uniform_and_saturated() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rand::thread_rng();
        let head = ClassifierHead::new(&mut store, "h", 2, 4, &mut rng);
        // zero weight -> uniform logits -> ln 4
        *store.get_mut(head.weight) = Tensor::zeros(&[2, 4]);
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1.0, 2.0, -1.0, 0.5]));
        let l = id_classification_loss(&mut g, &store, x, &[1, 3], &head).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            id_classification_loss(&mut g, &store, x, &[1, 4], &head),
            Err(TensorError::LabelOutOfRange { .. })
        ));
        // batch-normed features are (+-1, +-1); weight column picks the sign pattern
        *store.get_mut(head.weight) = t(&[2, 4], &[0.0, 60.0, 0.0, -60.0, 0.0, 60.0, 0.0, -60.0]);
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1.0, 2.0, -1.0, 0.5]));
        let l = id_classification_loss(&mut g, &store, x, &[1, 3], &head).unwrap();
        assert!(g.value(l).item() < 1e-30);
    }

    #[test]
    fn zero_weights_give_zero_loss() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rand::thread_rng();
        let heads: Vec<_> = (0..2).map(|i| ClassifierHead::new(&mut store, &format!("h{i}"), 2, 2, &mut rng)).collect();
        let w = LossWeights {
            lambda_cls: 0.0,
            lambda_tri: 0.0,
            margin_alpha: 0.3,
        };
        let mut g = Graph::new();
        let parts = g.constant(Tensor::from_fn(&[4, 2, 2], |i| i as f64));
        let l = discriminability_loss(&mut g, &store, parts, &[0, 0, 1, 1], &heads, &w).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn running_stats_move_towards_batch() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rand::thread_rng();
        let head = ClassifierHead::new(&mut store, "h", 1, 2, &mut rng);
        head.update_running_stats(&mut store, &t(&[2, 1], &[1.0, 3.0]));
        assert!((store.get(head.running_mean).data()[0] - 0.2).abs() < 1e-12);
        // unbiased var of {1,3} = 2 -> 0.9 * 1 + 0.1 * 2
        assert!((store.get(head.running_var).data()[0] - 1.1).abs() < 1e-12);
        assert_eq!(head.predict(&store, &[2.0]).len(), 2);
    }
}

//! Retrieval evaluation: embeddings, distance matrices, CMC and mAP under
//! the cross-camera protocol, and part-mask export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{save_pgm, Dataset, ImageError, PersonImage, Split};
use crate::model::{fuse_masks, PatModel};
use crate::tensor::{Real, Tensor, TensorError};

const BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ImageError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("the model has no decoder, so it produces no part masks")]
    NoMasks,
    #[error("{0}")]
    Split(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub embedding: Vec<f32>,
    pub identity: usize,
    pub camera: usize,
    pub is_query: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            _ => Err(format!("unknown metric {s:?}, expected cosine or euclidean")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Meta {
    pub identity: usize,
    pub camera: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    /// `cmc[k - 1]` is the rank-k accuracy.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// `(query index, AP)` for every query that has a valid match.
    pub ap: Vec<(usize, f64)>,
    /// Queries without any valid gallery match.
    pub dropped: Vec<usize>,
}

impl RetrievalResult {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc.get(k - 1).or(self.cmc.last()).copied().unwrap_or(0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,accuracy\n");
        for (k, a) in self.cmc.iter().enumerate() {
            writeln!(s, "{},{a}", k + 1).expect("string write");
        }
        s.push_str("\nquery_index,ap\n");
        for (q, ap) in &self.ap {
            writeln!(s, "{q},{ap}").expect("string write");
        }
        writeln!(s, "\nmAP,{}", self.map).expect("string write");
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "Rank-1: {:.4}  Rank-5: {:.4}  Rank-10: {:.4}  mAP: {:.4}",
            self.rank(1),
            self.rank(5),
            self.rank(10),
            self.map
        )
    }
}

/// One record per image, no augmentation, batched inference.
pub fn extract_embeddings<T: Real>(model: &PatModel<T>, images: &[&PersonImage], is_query: &[bool]) -> Result<Vec<EmbeddingRecord>, EvalError> {
    let mut out = Vec::with_capacity(images.len());
    for (chunk, flags) in images.chunks(BATCH).zip(is_query.chunks(BATCH)) {
        let px: Vec<Tensor<T>> = chunk.iter().map(|i| i.pixels.cast()).collect();
        for ((o, img), &q) in model.forward_batch(&px)?.into_iter().zip(chunk).zip(flags) {
            out.push(EmbeddingRecord {
                embedding: o.embedding.data().iter().map(|v| v.as_f64() as f32).collect(),
                identity: img.identity,
                camera: img.camera,
                is_query: q,
            });
        }
    }
    Ok(out)
}

/// `[nq, ng]` distances, computed in f64.
pub fn distance_matrix(queries: &[Vec<f32>], gallery: &[Vec<f32>], metric: Metric) -> Result<Tensor<f64>, TensorError> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(TensorError::Invalid {
            op: "distance_matrix",
            msg: "empty query or gallery set".into(),
        });
    }
    let dim = queries[0].len();
    if let Some(bad) = queries.iter().chain(gallery).find(|v| v.len() != dim) {
        return Err(TensorError::Shape {
            op: "distance_matrix",
            lhs: vec![dim],
            rhs: vec![bad.len()],
        });
    }
    let norm = |v: &[f32]| v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if metric == Metric::Cosine && queries.iter().chain(gallery).any(|v| norm(v) == 0.0) {
        return Err(TensorError::Degenerate {
            op: "distance_matrix",
            msg: "zero-norm embedding under cosine distance".into(),
        });
    }
    let (nq, ng) = (queries.len(), gallery.len());
    let gn: Vec<f64> = gallery.iter().map(|v| norm(v)).collect();
    let mut d = Vec::with_capacity(nq * ng);
    for q in queries {
        let qn = norm(q);
        for (g, &gnorm) in gallery.iter().zip(&gn) {
            d.push(match metric {
                Metric::Cosine => {
                    let dot: f64 = q.iter().zip(g).map(|(&a, &b)| a as f64 * b as f64).sum();
                    1.0 - dot / (qn * gnorm)
                }
                Metric::Euclidean => q.iter().zip(g).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>().sqrt(),
            });
        }
    }
    Tensor::new(&[nq, ng], d)
}

/// Cross-camera CMC and mAP. Gallery items sharing both identity and camera
/// with the query are ignored. Ties in distance keep the order of a
/// `tie_seed`-shuffled gallery.
pub fn evaluate(dist: &Tensor<f64>, queries: &[Meta], gallery: &[Meta], max_rank: usize, tie_seed: u64) -> Result<RetrievalResult, TensorError> {
    if dist.shape() != [queries.len(), gallery.len()] {
        return Err(TensorError::Shape {
            op: "evaluate",
            lhs: dist.shape().to_vec(),
            rhs: vec![queries.len(), gallery.len()],
        });
    }
    if max_rank == 0 {
        return Err(TensorError::Invalid {
            op: "evaluate",
            msg: "max_rank must be positive".into(),
        });
    }
    let mut base: Vec<usize> = (0..gallery.len()).collect();
    base.shuffle(&mut ChaCha8Rng::seed_from_u64(tie_seed));

    let mut hits_at = vec![0usize; max_rank];
    let mut ap = Vec::new();
    let mut dropped = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        let row = dist.row(qi);
        let mut order: Vec<usize> = base
            .iter()
            .copied()
            .filter(|&j| !(gallery[j].identity == q.identity && gallery[j].camera == q.camera))
            .collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
        let relevant: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|(_, &j)| gallery[j].identity == q.identity)
            .map(|(pos, _)| pos)
            .collect();
        let Some(&first) = relevant.first() else {
            dropped.push(qi);
            continue;
        };
        for h in hits_at.iter_mut().skip(first) {
            *h += 1;
        }
        let precision_sum: f64 = relevant.iter().enumerate().map(|(n, &pos)| (n + 1) as f64 / (pos + 1) as f64).sum();
        ap.push((qi, precision_sum / relevant.len() as f64));
    }
    let valid = ap.len();
    let cmc = hits_at.iter().map(|&h| if valid == 0 { 0.0 } else { h as f64 / valid as f64 }).collect();
    let map = if valid == 0 { 0.0 } else { ap.iter().map(|a| a.1).sum::<f64>() / valid as f64 };
    Ok(RetrievalResult { cmc, map, ap, dropped })
}

/// Embeds the query and gallery splits of `data` and evaluates them.
pub fn evaluate_dataset<T: Real>(model: &PatModel<T>, data: &Dataset, metric: Metric, max_rank: usize, tie_seed: u64) -> Result<RetrievalResult, EvalError> {
    let qi = data.indices(Split::Query);
    let gi = data.indices(Split::Gallery);
    if qi.is_empty() || gi.is_empty() {
        return Err(EvalError::Split(format!(
            "need both queries and gallery images, found {} and {}",
            qi.len(),
            gi.len()
        )));
    }
    let images: Vec<&PersonImage> = qi.iter().chain(&gi).map(|&i| &data.images[i]).collect();
    let flags: Vec<bool> = (0..images.len()).map(|i| i < qi.len()).collect();
    let recs = extract_embeddings(model, &images, &flags)?;
    let (q, g) = recs.split_at(qi.len());
    let emb = |r: &[EmbeddingRecord]| r.iter().map(|r| r.embedding.clone()).collect::<Vec<_>>();
    let meta = |r: &[EmbeddingRecord]| {
        r.iter()
            .map(|r| Meta {
                identity: r.identity,
                camera: r.camera,
            })
            .collect::<Vec<_>>()
    };
    let dist = distance_matrix(&emb(q), &emb(g), metric)?;
    Ok(evaluate(&dist, &meta(q), &meta(g), max_rank, tie_seed)?)
}

/// Mean cosine similarity over all ordered pairs of distinct part features,
/// averaged over `images`.
pub fn mean_part_cosine<T: Real>(model: &PatModel<T>, images: &[&PersonImage]) -> Result<f64, EvalError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in images.chunks(BATCH) {
        let px: Vec<Tensor<T>> = chunk.iter().map(|i| i.pixels.cast()).collect();
        for o in model.forward_batch(&px)? {
            let parts = o.part_features.ok_or(EvalError::NoMasks)?;
            let k = parts.shape()[0];
            for i in 0..k {
                for j in 0..k {
                    if i != j {
                        let (a, b) = (parts.row(i), parts.row(j));
                        let dot: f64 = a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
                        let na = a.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
                        let nb = b.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
                        total += dot / (na * nb);
                        n += 1;
                    }
                }
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// The fused mask at image resolution (nearest-neighbour upsampling).
pub fn fused_mask_pixels<T: Real>(model: &PatModel<T>, image: &PersonImage) -> Result<Vec<f64>, EvalError> {
    let out = model.forward(&image.pixels.cast())?;
    let masks = out.masks.ok_or(EvalError::NoMasks)?;
    let fused = fuse_masks(&masks);
    let (h, w) = (image.height(), image.width());
    Ok((0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            fused.data()[(y * masks.h / h) * masks.w + x * masks.w / w].as_f64()
        })
        .collect())
}

/// Writes `part_<i>.pgm` (each scaled by its own maximum) and `fused.pgm`.
pub fn export_masks<T: Real>(model: &PatModel<T>, image: &Tensor<f32>, out_dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let out = model.forward(&image.cast())?;
    let masks = out.masks.ok_or(EvalError::NoMasks)?;
    fs::create_dir_all(out_dir).map_err(|source| EvalError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    let mut save = |name: String, map: Tensor<f32>| -> Result<(), EvalError> {
        let path = out_dir.join(name);
        save_pgm(&path, &map).map_err(|source| EvalError::Image { path: path.clone(), source })?;
        written.push(path);
        Ok(())
    };
    for k in 0..masks.count() {
        let m = masks.mask(k);
        let peak = m.data().iter().fold(T::zero(), |a, &b| a.max(b));
        let scaled = m.data().iter().map(|&v| if peak > T::zero() { (v / peak).as_f64() as f32 } else { 0.0 }).collect();
        save(format!("part_{k}.pgm"), Tensor::new(&[masks.h, masks.w], scaled)?)?;
    }
    save("fused.pgm".into(), fuse_masks(&masks).cast())?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(v: &[(usize, usize)]) -> Vec<Meta> {
        v.iter().map(|&(identity, camera)| Meta { identity, camera }).collect()
    }

    #[test]
    fn perfect_retrieval() {
        let d = Tensor::from_f64(&[1, 3], &[0.1, 0.5, 0.9]).unwrap();
        let r = evaluate(&d, &meta(&[(0, 0)]), &meta(&[(0, 1), (1, 1), (2, 1)]), 3, 0).unwrap();
        assert_eq!(r.cmc, vec![1.0; 3]);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn two_matches_at_ranks_one_and_three() {
        let d = Tensor::from_f64(&[1, 5], &[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let g = meta(&[(0, 1), (1, 1), (0, 1), (2, 1), (3, 1)]);
        let r = evaluate(&d, &meta(&[(0, 0)]), &g, 5, 0).unwrap();
        assert!((r.map - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn same_camera_matches_are_excluded() {
        let d = Tensor::from_f64(&[2, 2], &[0.1, 0.2, 0.1, 0.2]).unwrap();
        // query 0 only matches on its own camera; query 1 matches at rank 2 after exclusion of nothing
        let r = evaluate(&d, &meta(&[(0, 0), (1, 0)]), &meta(&[(0, 0), (1, 1)]), 2, 0).unwrap();
        assert_eq!(r.dropped, vec![0]);
        assert_eq!(r.ap, vec![(1, 0.5)]);
        assert_eq!(r.cmc, vec![0.0, 1.0]);
    }

    #[test]
    fn cosine_and_euclidean_cells() {
        let q = vec![vec![1.0, 0.0]];
        let g = vec![vec![1.0, 0.0], vec![0.0, 2.0]];
        let d = distance_matrix(&q, &g, Metric::Cosine).unwrap();
        assert_eq!(d.data(), &[0.0, 1.0]);
        let e = distance_matrix(&q, &g, Metric::Euclidean).unwrap();
        assert!((e.data()[1] - 5f64.sqrt()).abs() < 1e-15);
        assert!(matches!(
            distance_matrix(&q, &[vec![0.0, 0.0]], Metric::Cosine),
            Err(TensorError::Degenerate { .. })
        ));
    }

    #[test]
    fn csv_layout() {
        let r = RetrievalResult {
            cmc: vec![0.5, 1.0],
            map: 0.75,
            ap: vec![(0, 1.0), (1, 0.5)],
            dropped: vec![],
        };
        assert_eq!(r.to_csv(), "rank,accuracy\n1,0.5\n2,1\n\nquery_index,ap\n0,1\n1,0.5\n\nmAP,0.75\n");
        assert_eq!(r.rank(10), 1.0);
    }
}

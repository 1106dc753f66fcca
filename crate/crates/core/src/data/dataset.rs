//! On-disk datasets.
//!
//! Layout: `<root>/<identity>/<camera>_<index>.ppm`. An optional
//! `<root>/manifest.csv` with header `path,identity,camera,occluded` (plus an
//! optional `split` column holding `query` or `gallery`) lists the images and
//! carries the occlusion flag. Without a manifest the tree is scanned and
//! every image is treated as unoccluded.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::image_io::{load_ppm, save_ppm, ImageError};
use super::PersonImage;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ImageError,
    },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("{path}: {msg}")]
    Layout { path: PathBuf, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<PersonImage>,
    /// Paths relative to the root, parallel to `images`.
    pub paths: Vec<String>,
    /// Explicit split overrides from the manifest.
    pub splits: Vec<Option<Split>>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Dataset {
    /// Wraps in-memory images with the canonical relative paths.
    pub fn from_images(images: Vec<PersonImage>) -> Self {
        let mut next = std::collections::BTreeMap::<usize, usize>::new();
        let paths = images
            .iter()
            .map(|img| {
                let n = next.entry(img.identity).or_insert(0);
                *n += 1;
                format!("{}/{}_{:04}.ppm", img.identity, img.camera, *n - 1)
            })
            .collect();
        let splits = vec![None; images.len()];
        Dataset { images, paths, splits }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|i| i.identity).collect()
    }

    pub fn num_identities(&self) -> usize {
        self.images.iter().map(|i| i.identity + 1).max().unwrap_or(0)
    }

    /// Manifest override, else occluded images are queries.
    pub fn split(&self, i: usize) -> Split {
        self.splits[i].unwrap_or(if self.images[i].occluded { Split::Query } else { Split::Gallery })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split(i) == split).collect()
    }

    /// Writes every image and `manifest.csv` under `root`.
    pub fn save(&self, root: &Path) -> Result<(), DatasetError> {
        let mut manifest = String::from("path,identity,camera,occluded");
        let with_split = self.splits.iter().any(Option::is_some);
        if with_split {
            manifest.push_str(",split");
        }
        manifest.push('\n');
        for (i, (img, rel)) in self.images.iter().zip(&self.paths).enumerate() {
            let path = root.join(rel);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            save_ppm(&path, &img.pixels).map_err(|source| DatasetError::Image { path: path.clone(), source })?;
            manifest.push_str(&format!("{rel},{},{},{}", img.identity, img.camera, u8::from(img.occluded)));
            if with_split {
                manifest.push(',');
                manifest.push_str(match self.split(i) {
                    Split::Query => "query",
                    Split::Gallery => "gallery",
                });
            }
            manifest.push('\n');
        }
        let mpath = root.join("manifest.csv");
        fs::write(&mpath, manifest).map_err(io_err(&mpath))
    }

    pub fn load(root: &Path) -> Result<Self, DatasetError> {
        let mpath = root.join("manifest.csv");
        if mpath.exists() {
            Self::load_manifest(root, &fs::read_to_string(&mpath).map_err(io_err(&mpath))?)
        } else {
            Self::scan(root)
        }
    }

    fn load_manifest(root: &Path, text: &str) -> Result<Self, DatasetError> {
        let mut lines = text.lines().enumerate();
        let header: Vec<&str> = match lines.next() {
            Some((_, h)) => h.split(',').map(str::trim).collect(),
            None => return Err(DatasetError::Manifest { line: 1, msg: "empty manifest".into() }),
        };
        let with_split = match header.as_slice() {
            ["path", "identity", "camera", "occluded"] => false,
            ["path", "identity", "camera", "occluded", "split"] => true,
            _ => {
                return Err(DatasetError::Manifest {
                    line: 1,
                    msg: format!("unexpected header {header:?}"),
                })
            }
        };
        let mut ds = Dataset {
            images: Vec::new(),
            paths: Vec::new(),
            splits: Vec::new(),
        };
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| DatasetError::Manifest { line: n + 1, msg };
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != header.len() {
                return Err(bad(format!("expected {} columns, got {}", header.len(), cols.len())));
            }
            let num = |s: &str, what: &str| s.parse::<usize>().map_err(|e| bad(format!("{what} {s:?}: {e}")));
            let identity = num(cols[1], "identity")?;
            let camera = num(cols[2], "camera")?;
            let occluded = match cols[3] {
                "1" | "true" => true,
                "0" | "false" => false,
                s => return Err(bad(format!("occluded flag {s:?}"))),
            };
            let split = if with_split {
                match cols[4] {
                    "query" => Some(Split::Query),
                    "gallery" => Some(Split::Gallery),
                    "" => None,
                    s => return Err(bad(format!("split {s:?}"))),
                }
            } else {
                None
            };
            let path = root.join(cols[0]);
            let pixels = load_ppm(&path).map_err(|source| DatasetError::Image { path, source })?;
            ds.images.push(PersonImage {
                pixels,
                identity,
                camera,
                occluded,
                regions: None,
            });
            ds.paths.push(cols[0].to_string());
            ds.splits.push(split);
        }
        Ok(ds)
    }

    fn scan(root: &Path) -> Result<Self, DatasetError> {
        let mut found = Vec::new();
        for entry in fs::read_dir(root).map_err(io_err(root))? {
            let dir = entry.map_err(io_err(root))?.path();
            if !dir.is_dir() {
                continue;
            }
            let layout = |msg: &str| DatasetError::Layout {
                path: dir.clone(),
                msg: msg.to_string(),
            };
            let identity: usize = dir
                .file_name()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| layout("identity directory name is not a number"))?;
            for f in fs::read_dir(&dir).map_err(io_err(&dir))? {
                let path = f.map_err(io_err(&dir))?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("ppm") {
                    continue;
                }
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                let camera: usize = stem
                    .split_once('_')
                    .and_then(|(c, i)| i.parse::<usize>().ok().and(c.parse().ok()))
                    .ok_or_else(|| DatasetError::Layout {
                        path: path.clone(),
                        msg: "expected <camera>_<index>.ppm".into(),
                    })?;
                let rel = path.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
                found.push((rel, identity, camera, path));
            }
        }
        found.sort();
        let mut ds = Dataset {
            images: Vec::new(),
            paths: Vec::new(),
            splits: Vec::new(),
        };
        for (rel, identity, camera, path) in found {
            let pixels = load_ppm(&path).map_err(|source| DatasetError::Image { path, source })?;
            ds.images.push(PersonImage {
                pixels,
                identity,
                camera,
                occluded: false,
                regions: None,
            });
            ds.paths.push(rel);
            ds.splits.push(None);
        }
        if ds.is_empty() {
            return Err(DatasetError::Layout {
                path: root.to_path_buf(),
                msg: "no images found".into(),
            });
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    fn small() -> Dataset {
        Dataset::from_images(
            synth_generate(&SynthConfig {
                num_identities: 3,
                images_per_identity: 4,
                seed: 2,
                ..SynthConfig::default()
            })
            .unwrap(),
        )
    }

    fn strip(mut ds: Dataset) -> Dataset {
        for img in &mut ds.images {
            img.regions = None;
        }
        ds
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        // 8-bit storage quantises pixels
        assert_eq!(back.labels(), ds.labels());
        assert_eq!(back.paths, ds.paths);
        assert!(back.images.iter().zip(&ds.images).all(|(a, b)| a.occluded == b.occluded && a.camera == b.camera));
        assert!(back.images[0].pixels.max_abs_diff(&ds.images[0].pixels) <= 0.5 / 255.0 + 1e-6);
        let again = tempfile::tempdir().unwrap();
        back.save(again.path()).unwrap();
        assert_eq!(strip(Dataset::load(again.path()).unwrap()), strip(back));
    }

    #[test]
    fn scan_without_manifest() {
        let dir = tempfile::tempdir().unwrap();
        small().save(dir.path()).unwrap();
        fs::remove_file(dir.path().join("manifest.csv")).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.len(), 12);
        assert_eq!(ds.paths[0], "0/0_0000.ppm");
        assert!(ds.indices(Split::Query).is_empty());
    }

    #[test]
    fn split_column_overrides_occlusion() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = small();
        ds.splits[0] = Some(Split::Query);
        ds.images[0].occluded = false;
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.split(0), Split::Query);
    }

    #[test]
    fn bad_manifest_rows_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("manifest.csv"), "path,identity,camera,occluded\na.ppm,x,0,0\n").unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(DatasetError::Manifest { line: 2, .. })));
    }
}

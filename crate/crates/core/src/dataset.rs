//! Procedural shapes dataset: one coloured primitive on a tinted background.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{virtual_save, QuantizedImage};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross];

    pub fn label(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).expect("listed")
    }

    /// Whether `(dx, dy)`, relative to the centre, lies inside a shape of half-size `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
            ShapeKind::Triangle => {
                // apex up; base at dy = r
                let top = -r;
                dy >= top && dy <= r && dx.abs() <= (dy - top) * 0.5
            }
            ShapeKind::Cross => {
                let arm = r * 0.35;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapesConfig {
    pub count: usize,
    pub image_size: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self { count: 1024, image_size: 32, channels: 3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage<S> {
    /// `c x h x w` values in `[-1, 1]`, already on the 8-bit grid.
    pub image: Tensor<S>,
    pub label: usize,
    pub kind: ShapeKind,
}

fn colour<R: Rng>(rng: &mut R, channels: usize) -> Vec<f64> {
    (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn far_enough(a: &[f64], b: &[f64]) -> bool {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    d.sqrt() > 0.6
}

/// Render `cfg.count` images, classes assigned round-robin.
pub fn generate_shapes<S: Scalar>(cfg: &ShapesConfig) -> Result<Vec<LabeledImage<S>>> {
    if cfg.count == 0 {
        return Err(Error::EmptyDataset);
    }
    if cfg.image_size < 8 || !(cfg.channels == 1 || cfg.channels == 3) {
        return Err(Error::InvalidArgument("need image_size >= 8 and 1 or 3 channels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.image_size;
    let ss = 4; // supersampling per axis
    (0..cfg.count)
        .map(|i| {
            let kind = ShapeKind::ALL[i % ShapeKind::ALL.len()];
            let bg = colour(&mut rng, cfg.channels);
            let mut fg = colour(&mut rng, cfg.channels);
            while !far_enough(&bg, &fg) {
                fg = colour(&mut rng, cfg.channels);
            }
            let size = n as f64;
            let r = rng.random_range(0.22 * size..0.34 * size);
            let cx = rng.random_range(r..size - r);
            let cy = rng.random_range(r..size - r);
            let mut data = vec![0.0; cfg.channels * n * n];
            for y in 0..n {
                for x in 0..n {
                    let mut cover = 0usize;
                    for sy in 0..ss {
                        for sx in 0..ss {
                            let px = x as f64 + (sx as f64 + 0.5) / ss as f64;
                            let py = y as f64 + (sy as f64 + 0.5) / ss as f64;
                            cover += kind.contains(px - cx, py - cy, r) as usize;
                        }
                    }
                    let a = cover as f64 / (ss * ss) as f64;
                    for c in 0..cfg.channels {
                        data[c * n * n + y * n + x] = a * fg[c] + (1.0 - a) * bg[c];
                    }
                }
            }
            let raw = Tensor::new(&[cfg.channels, n, n], data.into_iter().map(S::of).collect())?;
            // snap onto the 8-bit grid so the in-memory set equals the one written to disk
            let image = virtual_save(&raw)?.unscale();
            Ok(LabeledImage { image, label: kind.label(), kind })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub label: usize,
    pub kind: ShapeKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: ShapesConfig,
    pub classes: Vec<ShapeKind>,
    pub items: Vec<ManifestEntry>,
}

/// Write every image as PNG plus `manifest.json` into `dir`.
pub fn write_dataset<S: Scalar>(dir: &Path, cfg: &ShapesConfig, items: &[LabeledImage<S>]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let file = format!("img_{i:05}.png");
        virtual_save(&item.image)?.save_png(&dir.join(&file))?;
        entries.push(ManifestEntry { file, label: item.label, kind: item.kind });
    }
    let manifest = DatasetManifest { config: *cfg, classes: ShapeKind::ALL.to_vec(), items: entries };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_dataset<S: Scalar>(dir: &Path) -> Result<(DatasetManifest, Vec<LabeledImage<S>>)> {
    let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let items = manifest
        .items
        .iter()
        .map(|e| {
            let q = QuantizedImage::<S>::load_png(&dir.join(&e.file), manifest.config.channels)?;
            Ok(LabeledImage { image: q.unscale(), label: e.label, kind: e.kind })
        })
        .collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok((manifest, items))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let cfg = ShapesConfig { count: 8, image_size: 16, channels: 3, seed: 3 };
        let a = generate_shapes::<f32>(&cfg).unwrap();
        let b = generate_shapes::<f32>(&cfg).unwrap();
        assert_eq!(a, b);
        let labels: Vec<_> = a.iter().map(|i| i.label).collect();
        assert_eq!(labels, vec![0, 1, 2, 3, 0, 1, 2, 3]);
        for item in &a {
            assert_eq!(item.image.shape(), &[3, 16, 16]);
            assert!(item.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn images_are_not_flat() {
        let cfg = ShapesConfig { count: 4, image_size: 16, channels: 1, seed: 0 };
        for item in generate_shapes::<f64>(&cfg).unwrap() {
            assert!(item.image.std() > 0.05);
        }
    }

    #[test]
    fn disk_roundtrip_is_exact() {
        let cfg = ShapesConfig { count: 6, image_size: 16, channels: 3, seed: 1 };
        let items = generate_shapes::<f32>(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &cfg, &items).unwrap();
        let (manifest, back) = read_dataset::<f32>(dir.path()).unwrap();
        assert_eq!(manifest.items.len(), 6);
        assert_eq!(back, items);
    }

    #[test]
    fn rejects_empty() {
        let cfg = ShapesConfig { count: 0, ..Default::default() };
        assert!(generate_shapes::<f32>(&cfg).is_err());
    }
}

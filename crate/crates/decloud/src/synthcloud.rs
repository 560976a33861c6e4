//! Procedural paired (clean, cloudy) corpus generation.
//!
//! Terrain scenes come from fractal value noise through a fixed palette;
//! clouds are noise-derived alpha masks composited over the clean scene.
//! Thin and thick clouds are defined by executable alpha statistics: thin
//! masks stay semi-transparent (max <= 0.6, mean in [0.15, 0.35]), thick
//! masks have an opaque core (alpha >= 0.95 on >= 20% of pixels) with
//! feathered edges.

use crate::error::{Error, Result};
use crate::imagery::{save_image, Image};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudType {
    Thin,
    Thick,
}

impl std::fmt::Display for CloudType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CloudType::Thin => write!(f, "thin"),
            CloudType::Thick => write!(f, "thick"),
        }
    }
}

impl std::str::FromStr for CloudType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "thin" => Ok(CloudType::Thin),
            "thick" => Ok(CloudType::Thick),
            other => Err(Error::Config(format!(
                "unknown cloud type '{other}', valid prompts are: thin, thick"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One dataset row: a (cloudy, clean) pair with its label and, once the
/// corpus has been grouped, its complexity score and curriculum group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplePair {
    pub id: String,
    pub clean: PathBuf,
    pub cloudy: PathBuf,
    pub cloud_type: CloudType,
    pub split: Split,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group: Option<usize>,
}

/// In-memory corpus manifest; serialized as JSON-lines, one pair per line,
/// with paths relative to the manifest file.
#[derive(Debug, Clone)]
pub struct CorpusManifest {
    pub version: u32,
    pub seed: u64,
    pub entries: Vec<SamplePair>,
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
}

impl CorpusManifest {
    pub fn train(&self) -> impl Iterator<Item = &SamplePair> {
        self.entries.iter().filter(|e| e.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &SamplePair> {
        self.entries.iter().filter(|e| e.split == Split::Test)
    }

    pub fn clean_path(&self, e: &SamplePair) -> PathBuf {
        self.root.join(&e.clean)
    }

    pub fn cloudy_path(&self, e: &SamplePair) -> PathBuf {
        self.root.join(&e.cloudy)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(format!("write {}", path.display()), e))?;
        let meta = serde_json::json!({ "version": self.version, "seed": self.seed });
        let meta_path = path.with_extension("meta.json");
        fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap())
            .map_err(|e| Error::io(format!("write {}", meta_path.display()), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CorpusManifest> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: SamplePair = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })?;
            if !seen.insert(entry.id.clone()) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    reason: format!("duplicate id '{}'", entry.id),
                });
            }
            entries.push(entry);
        }
        let (mut version, mut seed) = (MANIFEST_VERSION, 0u64);
        let meta_path = path.with_extension("meta.json");
        if let Ok(meta) = fs::read_to_string(&meta_path) {
            if let Ok(v) = serde_json::from_str::<serde_json::Value>(&meta) {
                version = v["version"].as_u64().unwrap_or(1) as u32;
                seed = v["seed"].as_u64().unwrap_or(0);
            }
        }
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(CorpusManifest {
            version,
            seed,
            entries,
            root,
        })
    }
}

/// Bilinearly interpolated lattice noise in [0,1], deterministic in seed.
fn value_noise(seed: u64, size: usize, cell: usize) -> Vec<f64> {
    let grid = size / cell + 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lattice: Vec<f64> = (0..grid * grid).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut out = vec![0.0; size * size];
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    for y in 0..size {
        for x in 0..size {
            let fx = x as f64 / cell as f64;
            let fy = y as f64 / cell as f64;
            let (x0, y0) = (fx as usize, fy as usize);
            let (tx, ty) = (smooth(fx - x0 as f64), smooth(fy - y0 as f64));
            let v00 = lattice[y0 * grid + x0];
            let v10 = lattice[y0 * grid + x0 + 1];
            let v01 = lattice[(y0 + 1) * grid + x0];
            let v11 = lattice[(y0 + 1) * grid + x0 + 1];
            let top = v00 + (v10 - v00) * tx;
            let bot = v01 + (v11 - v01) * tx;
            out[y * size + x] = top + (bot - top) * ty;
        }
    }
    out
}

/// 4-octave fractal value noise, persistence 0.5, min-max normalized to [0,1].
fn fractal_noise(seed: u64, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    let mut amplitude = 1.0;
    let mut cell = (size / 4).max(2);
    for octave in 0..4 {
        let layer = value_noise(seed.wrapping_add(octave * 0x9e37_79b9), size, cell);
        for (o, l) in out.iter_mut().zip(&layer) {
            *o += amplitude * l;
        }
        amplitude *= 0.5;
        cell = (cell / 2).max(2);
    }
    let min = out.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(1e-12);
    for v in &mut out {
        *v = (*v - min) / span;
    }
    out
}

fn check_size(size: usize) -> Result<()> {
    if !(16..=512).contains(&size) {
        return Err(Error::domain(format!(
            "terrain size {size} outside [16, 512]"
        )));
    }
    Ok(())
}

/// Fractal-noise heightfield through a fixed water/lowland/highland palette.
pub fn gen_terrain(seed: u64, size: usize) -> Result<Image> {
    check_size(size)?;
    let height = fractal_noise(seed, size);
    // palette stops: deep water, shallow water, lowland green, highland brown
    const STOPS: [(f64, [f64; 3]); 5] = [
        (0.00, [0.10, 0.20, 0.45]),
        (0.35, [0.20, 0.40, 0.60]),
        (0.45, [0.25, 0.45, 0.20]),
        (0.75, [0.45, 0.38, 0.22]),
        (1.00, [0.55, 0.48, 0.35]),
    ];
    let mut pixels = vec![0.0; size * size * 3];
    for i in 0..size * size {
        let h = height[i];
        let mut color = STOPS[STOPS.len() - 1].1;
        for w in STOPS.windows(2) {
            let ((h0, c0), (h1, c1)) = (w[0], w[1]);
            if h <= h1 {
                let t = ((h - h0) / (h1 - h0)).clamp(0.0, 1.0);
                for c in 0..3 {
                    color[c] = c0[c] + (c1[c] - c0[c]) * t;
                }
                break;
            }
        }
        for c in 0..3 {
            pixels[i * 3 + c] = color[c].clamp(0.0, 1.0);
        }
    }
    Image::new(size, size, pixels)
}

/// Noise-derived cloud alpha mask and near-white cloud color layer.
pub fn gen_cloud(seed: u64, size: usize, cloud_type: CloudType) -> Result<(Vec<f64>, Image)> {
    check_size(size)?;
    let noise = fractal_noise(seed.wrapping_mul(31).wrapping_add(17), size);
    let alpha = match cloud_type {
        CloudType::Thin => {
            // target mean 0.25, hard max 0.55 < 0.6
            let mean: f64 = noise.iter().sum::<f64>() / noise.len() as f64;
            let b = (0.30 / (1.0 - mean).max(0.5)).min(0.55);
            let a = 0.55 - b;
            noise
                .iter()
                .map(|&n| (a + b * n).clamp(0.0, 0.55))
                .collect::<Vec<f64>>()
        }
        CloudType::Thick => {
            // opaque core over the top quartile of the noise, feathered below
            let mut sorted = noise.clone();
            sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let tau = sorted[(sorted.len() as f64 * 0.75) as usize];
            let feather = 0.18;
            noise
                .iter()
                .map(|&n| {
                    let t = ((n - (tau - feather)) / feather).clamp(0.0, 1.0);
                    t * t * (3.0 - 2.0 * t)
                })
                .collect::<Vec<f64>>()
        }
    };
    let gray = value_noise(seed.wrapping_mul(101).wrapping_add(3), size, (size / 8).max(2));
    let mut pixels = vec![0.0; size * size * 3];
    for i in 0..size * size {
        let shade = 0.90 + 0.08 * gray[i];
        for c in 0..3 {
            pixels[i * 3 + c] = (shade - 0.01 * c as f64).clamp(0.0, 1.0);
        }
    }
    Ok((alpha, Image::new(size, size, pixels)?))
}

/// Per-pixel blend: cloudy = (1 - alpha) * clean + alpha * cloud_color.
pub fn composite(clean: &Image, alpha: &[f64], cloud_color: &Image) -> Result<Image> {
    if !clean.same_dims(cloud_color) || alpha.len() != clean.width() * clean.height() {
        return Err(Error::shape(
            "composite inputs must share dimensions".to_string(),
        ));
    }
    let (w, h) = (clean.width(), clean.height());
    let mut pixels = vec![0.0; w * h * 3];
    for i in 0..w * h {
        let a = alpha[i];
        for c in 0..3 {
            pixels[i * 3 + c] =
                ((1.0 - a) * clean.pixels()[i * 3 + c] + a * cloud_color.pixels()[i * 3 + c])
                    .clamp(0.0, 1.0);
        }
    }
    Image::new(w, h, pixels)
}

/// Generates `n` paired images plus `manifest.jsonl` under `out_dir`.
/// The train/test split is an 80/20 seeded shuffle.
pub fn gen_corpus(
    seed: u64,
    n: usize,
    size: usize,
    thin_fraction: f64,
    out_dir: impl AsRef<Path>,
    force: bool,
) -> Result<CorpusManifest> {
    if n < 10 {
        return Err(Error::domain(format!("corpus size {n} below minimum 10")));
    }
    if !(0.0..=1.0).contains(&thin_fraction) {
        return Err(Error::domain(format!(
            "thin_fraction {thin_fraction} outside [0,1]"
        )));
    }
    check_size(size)?;
    let out_dir = out_dir.as_ref();
    if out_dir.exists() {
        let non_empty = fs::read_dir(out_dir)
            .map_err(|e| Error::io(format!("read {}", out_dir.display()), e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                out_dir.display()
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("create {}", out_dir.display()), e))?;

    let n_thin = (n as f64 * thin_fraction).round() as usize;
    let n_train = (n as f64 * 0.8).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0511);
    order.shuffle(&mut rng);
    let train_set: std::collections::HashSet<usize> =
        order[..n_train].iter().copied().collect();

    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let cloud_type = if i < n_thin {
            CloudType::Thin
        } else {
            CloudType::Thick
        };
        let id = format!("pair{i:04}");
        let pair_seed = seed.wrapping_mul(1000).wrapping_add(i as u64);
        let clean = gen_terrain(pair_seed, size)?;
        let (alpha, color) = gen_cloud(pair_seed, size, cloud_type)?;
        let cloudy = composite(&clean, &alpha, &color)?;
        let clean_rel = PathBuf::from(format!("{id}_clean.png"));
        let cloudy_rel = PathBuf::from(format!("{id}_cloudy.png"));
        save_image(&clean, out_dir.join(&clean_rel))?;
        save_image(&cloudy, out_dir.join(&cloudy_rel))?;
        entries.push(SamplePair {
            id,
            clean: clean_rel,
            cloudy: cloudy_rel,
            cloud_type,
            split: if train_set.contains(&i) {
                Split::Train
            } else {
                Split::Test
            },
            score: None,
            group: None,
        });
    }
    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        seed,
        entries,
        root: out_dir.to_path_buf(),
    };
    manifest.save(out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Builds a manifest from two directories of identically named paired files
/// (RICE-style layout). The split is a seeded 80/20 shuffle.
pub fn ingest_paired_dirs(
    clean_dir: impl AsRef<Path>,
    cloudy_dir: impl AsRef<Path>,
    cloud_type: CloudType,
    seed: u64,
    manifest_path: impl AsRef<Path>,
) -> Result<CorpusManifest> {
    let (clean_dir, cloudy_dir) = (clean_dir.as_ref(), cloudy_dir.as_ref());
    let manifest_path = manifest_path.as_ref();
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut names: Vec<String> = fs::read_dir(clean_dir)
        .map_err(|e| Error::io(format!("read {}", clean_dir.display()), e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".png") || n.ends_with(".ppm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Config(format!(
            "no .png/.ppm files in {}",
            clean_dir.display()
        )));
    }
    let mut order: Vec<usize> = (0..names.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = (names.len() as f64 * 0.8).round() as usize;
    let train_set: std::collections::HashSet<usize> =
        order[..n_train].iter().copied().collect();
    let rel = |p: &Path| -> PathBuf {
        p.strip_prefix(&root).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
    };
    let mut entries = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let cloudy = cloudy_dir.join(name);
        if !cloudy.exists() {
            return Err(Error::Config(format!(
                "no cloudy counterpart for {name} in {}",
                cloudy_dir.display()
            )));
        }
        entries.push(SamplePair {
            id: name.trim_end_matches(".png").trim_end_matches(".ppm").to_string(),
            clean: rel(&clean_dir.join(name)),
            cloudy: rel(&cloudy),
            cloud_type,
            split: if train_set.contains(&i) {
                Split::Train
            } else {
                Split::Test
            },
            score: None,
            group: None,
        });
    }
    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        seed,
        entries,
        root,
    };
    manifest.save(manifest_path)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn terrain_deterministic_and_in_range() {
        let a = gen_terrain(1, 16).unwrap();
        let b = gen_terrain(1, 16).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.width(), 16);
        assert!(a.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn terrain_seeds_differ() {
        let a = gen_terrain(1, 32).unwrap();
        let b = gen_terrain(2, 32).unwrap();
        let differing = a
            .pixels()
            .iter()
            .zip(b.pixels())
            .filter(|(x, y)| (**x - **y).abs() > 1e-9)
            .count();
        assert!(
            differing as f64 > 0.5 * a.pixels().len() as f64,
            "only {differing} of {} values differ",
            a.pixels().len()
        );
    }

    #[test]
    fn terrain_size_bounds() {
        assert!(gen_terrain(1, 8).is_err());
        assert!(gen_terrain(1, 1024).is_err());
    }

    #[test]
    fn thin_cloud_statistics() {
        for seed in 0..20 {
            let (alpha, _) = gen_cloud(seed, 32, CloudType::Thin).unwrap();
            let max = alpha.iter().cloned().fold(0.0, f64::max);
            let mean = alpha.iter().sum::<f64>() / alpha.len() as f64;
            assert!(max <= 0.6, "seed {seed}: thin max {max}");
            assert!(
                (0.15..=0.35).contains(&mean),
                "seed {seed}: thin mean {mean}"
            );
        }
    }

    #[test]
    fn thick_cloud_statistics() {
        for seed in 0..20 {
            let (alpha, _) = gen_cloud(seed, 32, CloudType::Thick).unwrap();
            let core = alpha.iter().filter(|&&a| a >= 0.95).count() as f64 / alpha.len() as f64;
            assert!(core >= 0.20, "seed {seed}: thick core fraction {core}");
        }
    }

    #[test]
    fn composite_endpoints_and_blend() {
        let clean = Image::filled(16, 16, 0.2).unwrap();
        let color = Image::filled(16, 16, 1.0).unwrap();
        let zero = vec![0.0; 256];
        let one = vec![1.0; 256];
        let half = vec![0.5; 256];
        assert_eq!(composite(&clean, &zero, &color).unwrap(), clean);
        assert_eq!(composite(&clean, &one, &color).unwrap(), color);
        let mid = composite(&clean, &half, &color).unwrap();
        assert!(mid.pixels().iter().all(|&v| (v - 0.6).abs() < 1e-12));
    }

    #[test]
    fn composite_alpha_monotone() {
        let clean = Image::filled(16, 16, 0.3).unwrap();
        let color = Image::filled(16, 16, 0.9).unwrap();
        let mut last = 0.0;
        for a in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let img = composite(&clean, &vec![a; 256], &color).unwrap();
            let v = img.get(0, 0, 0);
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn corpus_split_counts_and_determinism() {
        let dir = tempdir().unwrap();
        let m = gen_corpus(7, 10, 16, 0.5, dir.path().join("c"), false).unwrap();
        assert_eq!(m.entries.len(), 10);
        let thin = m
            .entries
            .iter()
            .filter(|e| e.cloud_type == CloudType::Thin)
            .count();
        assert_eq!(thin, 5);
        assert_eq!(m.train().count(), 8);
        assert_eq!(m.test().count(), 2);

        let bytes1 = fs::read(dir.path().join("c/manifest.jsonl")).unwrap();
        gen_corpus(7, 10, 16, 0.5, dir.path().join("c"), true).unwrap();
        let bytes2 = fs::read(dir.path().join("c/manifest.jsonl")).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn corpus_refuses_nonempty_dir() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("c");
        fs::create_dir_all(&out).unwrap();
        fs::write(out.join("existing.txt"), "x").unwrap();
        assert!(gen_corpus(7, 10, 16, 0.5, &out, false).is_err());
        assert!(gen_corpus(7, 10, 16, 0.5, &out, true).is_ok());
    }

    #[test]
    fn manifest_roundtrip_and_loadable_entries() {
        let dir = tempdir().unwrap();
        let m = gen_corpus(3, 10, 16, 0.3, dir.path().join("c"), false).unwrap();
        let loaded = CorpusManifest::load(dir.path().join("c/manifest.jsonl")).unwrap();
        assert_eq!(loaded.entries.len(), m.entries.len());
        assert_eq!(loaded.seed, 3);
        for e in &loaded.entries {
            let clean = crate::imagery::load_image(loaded.clean_path(e)).unwrap();
            let cloudy = crate::imagery::load_image(loaded.cloudy_path(e)).unwrap();
            assert!(clean.same_dims(&cloudy));
        }
    }

    #[test]
    fn corpus_rejects_bad_args() {
        let dir = tempdir().unwrap();
        assert!(gen_corpus(1, 5, 16, 0.5, dir.path().join("a"), false).is_err());
        assert!(gen_corpus(1, 10, 16, 1.5, dir.path().join("b"), false).is_err());
    }
}

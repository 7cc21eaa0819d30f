//! Dataset sources: Omniglot glyphs on disk, synthetic Gaussian clusters,
//! and a CSV form for materialized synthetic sets.

use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::episode::Dataset;
use crate::error::{Error, Result};
use crate::params::seeded_rng;

/// Environment variable naming the default dataset root.
pub const DATA_DIR_ENV: &str = "CONCEPT_DATA_DIR";

pub const OMNIGLOT_SIDE: usize = 28;
pub const OMNIGLOT_TRAIN_CLASSES: usize = 1200;
const OMNIGLOT_DIRS: [&str; 2] = ["images_background", "images_evaluation"];

fn load_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| load_err(dir, e.to_string()))? {
        let path = entry.map_err(|e| load_err(dir, e.to_string()))?.path();
        if path.is_dir() == want_dirs {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Box-filter resize of a single-channel `h × w` image: each output pixel
/// averages the source area it covers, with fractional edge weights.
pub fn area_resize(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let weights = |n_in: usize, n_out: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
                let mut taps = Vec::new();
                let mut i = lo.floor() as usize;
                while (i as f64) < hi && i < n_in {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    if overlap > 0.0 {
                        taps.push((i, overlap / scale));
                    }
                    i += 1;
                }
                taps
            })
            .collect()
    };
    let (rows, cols) = (weights(h, out_h), weights(w, out_w));
    let mut out = vec![0.0; out_h * out_w];
    for (oy, ry) in rows.iter().enumerate() {
        for (ox, cx) in cols.iter().enumerate() {
            let mut acc = 0.0;
            for &(y, wy) in ry {
                for &(x, wx) in cx {
                    acc += wy * wx * src[y * w + x];
                }
            }
            out[oy * out_w + ox] = acc;
        }
    }
    out
}

/// Decodes a glyph as `[1 × 28 × 28]` with ink = 1 and paper = 0.
pub fn load_glyph(path: &Path) -> Result<Array> {
    let img = image::open(path)
        .map_err(|e| load_err(path, format!("cannot decode image: {e}")))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let ink: Vec<f64> = img.pixels().map(|p| 1.0 - f64::from(p.0[0]) / 255.0).collect();
    let data = area_resize(&ink, h, w, OMNIGLOT_SIDE, OMNIGLOT_SIDE);
    Array::new(vec![1, OMNIGLOT_SIDE, OMNIGLOT_SIDE], data)
}

/// Loads every character of both Omniglot splits, sorted by path, and
/// assigns the first 1,200 to training and the rest to evaluation.
pub fn load_omniglot(root: &Path) -> Result<(Dataset, Dataset)> {
    let mut characters = Vec::new();
    for split in OMNIGLOT_DIRS {
        let dir = root.join(split);
        if !dir.is_dir() {
            return Err(load_err(
                root,
                format!("expected directories {OMNIGLOT_DIRS:?} of <alphabet>/<character>/*.png; missing {split}"),
            ));
        }
        for alphabet in sorted_entries(&dir, true)? {
            characters.extend(sorted_entries(&alphabet, true)?);
        }
    }
    if characters.len() <= OMNIGLOT_TRAIN_CLASSES {
        return Err(load_err(
            root,
            format!(
                "found {} characters, need more than {OMNIGLOT_TRAIN_CLASSES}",
                characters.len()
            ),
        ));
    }
    let mut classes = Vec::with_capacity(characters.len());
    let mut names = Vec::with_capacity(characters.len());
    for dir in &characters {
        let files: Vec<PathBuf> = sorted_entries(dir, false)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        if files.is_empty() {
            return Err(load_err(dir, "character directory holds no PNG files"));
        }
        classes.push(files.iter().map(|f| load_glyph(f)).collect::<Result<Vec<_>>>()?);
        names.push(dir.strip_prefix(root).unwrap_or(dir).display().to_string());
    }
    let all = Dataset::new(vec![1, OMNIGLOT_SIDE, OMNIGLOT_SIDE], classes, names)?;
    all.split_classes(OMNIGLOT_TRAIN_CLASSES)
}

/// Quarter-turn clockwise of a `[.., n, n]` image.
pub fn rotate90(img: &Array) -> Result<Array> {
    let shape = img.shape();
    let n = shape[shape.len() - 1];
    if shape.len() < 2 || shape[shape.len() - 2] != n {
        return Err(Error::dim("rotate90", format!("image must be square, got {shape:?}")));
    }
    let plane = n * n;
    let mut out = vec![0.0; img.len()];
    for (p, chunk) in img.data().chunks(plane).enumerate() {
        for y in 0..n {
            for x in 0..n {
                out[p * plane + x * n + (n - 1 - y)] = chunk[y * n + x];
            }
        }
    }
    Array::new(shape.to_vec(), out)
}

/// Each class becomes four: its samples rotated by 0°, 90°, 180°, 270°.
pub fn augment_rotations(dataset: &Dataset) -> Result<Dataset> {
    let mut classes = Vec::with_capacity(dataset.n_classes() * 4);
    let mut names = Vec::with_capacity(dataset.n_classes() * 4);
    for c in 0..dataset.n_classes() {
        let mut current: Vec<Array> = dataset.samples(c).to_vec();
        for quarter in 0..4 {
            if quarter > 0 {
                current = current.iter().map(rotate90).collect::<Result<_>>()?;
            }
            classes.push(current.clone());
            names.push(format!("{}@{}", dataset.name(c), quarter * 90));
        }
    }
    Dataset::new(dataset.input_shape().to_vec(), classes, names)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub dimension: usize,
    /// Standard deviation of the class centers.
    pub center_scale: f64,
    /// Within-class noise standard deviation.
    pub sigma: f64,
    pub samples_per_class: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.dimension == 0 || self.samples_per_class == 0 {
            return Err(Error::Config("synthetic counts must be positive".into()));
        }
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            return Err(Error::Config(format!("synthetic sigma must be positive, got {}", self.sigma)));
        }
        if !self.center_scale.is_finite() || self.center_scale < 0.0 {
            return Err(Error::Config("synthetic center_scale must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMeta {
    pub spec: SyntheticSpec,
    pub seed: u64,
    /// Minimum distance between class centers over `sigma`.
    pub separability: f64,
    pub centers: Vec<Vec<f64>>,
}

pub fn min_center_distance(centers: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            let d = centers[i]
                .iter()
                .zip(&centers[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Gaussian clusters: centers from `N(0, center_scale²)`, samples as
/// `center + sigma · N(0, 1)`.
pub fn make_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, SyntheticMeta)> {
    spec.validate()?;
    let mut rng = seeded_rng(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let centers: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| (0..spec.dimension).map(|_| spec.center_scale * normal()).collect())
        .collect();
    let classes = centers
        .iter()
        .map(|c| {
            (0..spec.samples_per_class)
                .map(|_| Array::new(vec![spec.dimension], c.iter().map(|m| m + spec.sigma * normal()).collect()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let names = (0..spec.n_classes).map(|c| format!("class{c}")).collect();
    let dataset = Dataset::new(vec![spec.dimension], classes, names)?;
    let separability = if spec.n_classes > 1 {
        min_center_distance(&centers) / spec.sigma
    } else {
        f64::INFINITY
    };
    Ok((
        dataset,
        SyntheticMeta {
            spec: spec.clone(),
            seed,
            separability,
            centers,
        },
    ))
}

pub const SAMPLES_FILE: &str = "samples.csv";
pub const META_FILE: &str = "meta.json";

/// Writes `samples.csv` (`class,x0,x1,...`) and `meta.json` into `dir`.
pub fn write_csv_dataset(dir: &Path, dataset: &Dataset, meta: &SyntheticMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(SAMPLES_FILE))?;
    let dim: usize = dataset.input_shape().iter().product();
    let mut header = vec!["class".to_string()];
    header.extend((0..dim).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for c in 0..dataset.n_classes() {
        for s in dataset.samples(c) {
            let mut row = vec![c.to_string()];
            row.extend(s.data().iter().map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

/// Reads a dataset written by [`write_csv_dataset`].
pub fn read_csv_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(SAMPLES_FILE);
    let mut r = csv::Reader::from_path(&path).map_err(|e| load_err(&path, e.to_string()))?;
    let mut classes: Vec<Vec<Array>> = Vec::new();
    let mut dim = None;
    for (line, record) in r.records().enumerate() {
        let record = record?;
        let bad = |what: &str| load_err(&path, format!("row {}: {what}", line + 1));
        let class: usize = record.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad class id"))?;
        let values = record
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|_| bad("bad number")))
            .collect::<Result<Vec<_>>>()?;
        if *dim.get_or_insert(values.len()) != values.len() || values.is_empty() {
            return Err(bad("inconsistent width"));
        }
        if class >= classes.len() {
            classes.resize_with(class + 1, Vec::new);
        }
        classes[class].push(Array::new(vec![values.len()], values)?);
    }
    let dim = dim.ok_or_else(|| load_err(&path, "no samples"))?;
    let names = (0..classes.len()).map(|c| format!("class{c}")).collect();
    Dataset::new(vec![dim], classes, names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sigma: f64) -> SyntheticSpec {
        SyntheticSpec {
            n_classes: 5,
            dimension: 4,
            center_scale: 1.0,
            sigma,
            samples_per_class: 30,
        }
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let (d, _) = make_synthetic(&spec(0.1), 7).unwrap();
        assert_eq!(d.n_samples(), 150);
        assert_eq!(make_synthetic(&spec(0.1), 7).unwrap().0, d);
        assert_ne!(make_synthetic(&spec(0.1), 8).unwrap().0, d);
    }

    #[test]
    fn vanishing_noise_collapses_classes() {
        let (d, _) = make_synthetic(&spec(1e-300), 1).unwrap();
        for c in 0..d.n_classes() {
            assert!(d.samples(c).iter().all(|s| s == &d.samples(c)[0]));
        }
        assert!(make_synthetic(&spec(0.0), 1).is_err());
    }

    #[test]
    fn separability_matches_recomputation() {
        let (_, meta) = make_synthetic(&spec(0.2), 3).unwrap();
        assert_eq!(meta.separability, min_center_distance(&meta.centers) / 0.2);
    }

    #[test]
    fn csv_round_trip() {
        let (d, meta) = make_synthetic(&spec(0.3), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_csv_dataset(dir.path(), &d, &meta).unwrap();
        let back = read_csv_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn rotations() {
        let img = Array::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = rotate90(&img).unwrap();
        assert_eq!(r.data(), &[3.0, 1.0, 4.0, 2.0]);
        let mut back = img.clone();
        for _ in 0..4 {
            back = rotate90(&back).unwrap();
        }
        assert_eq!(back, img);
        assert!(rotate90(&Array::zeros(&[1, 2, 3])).is_err());

        let solid = Array::full(&[1, 2, 2], 1.0);
        let d = Dataset::new(vec![1, 2, 2], vec![vec![solid; 20]], vec!["a".into()]).unwrap();
        let aug = augment_rotations(&d).unwrap();
        assert_eq!(aug.n_classes(), 4);
        assert!((0..4).all(|c| aug.samples(c).len() == 20));
    }

    #[test]
    fn area_resize_preserves_mean() {
        let src: Vec<f64> = (0..105 * 105).map(|i| ((i * 37) % 11) as f64).collect();
        let out = area_resize(&src, 105, 105, 28, 28);
        let mean_in = src.iter().sum::<f64>() / src.len() as f64;
        let mean_out = out.iter().sum::<f64>() / out.len() as f64;
        assert!((mean_in - mean_out).abs() < 1e-9);
        assert_eq!(area_resize(&[1.0, 2.0, 3.0, 4.0], 2, 2, 1, 1), vec![2.5]);
    }

    #[test]
    fn omniglot_layout() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_omniglot(dir.path()), Err(Error::Load { .. })));

        let mut glyph = image::GrayImage::new(105, 105);
        for p in glyph.pixels_mut() {
            p.0[0] = 255;
        }
        glyph.put_pixel(0, 0, image::Luma([0]));
        let ch = dir.path().join("images_background/Alpha/character01");
        fs::create_dir_all(&ch).unwrap();
        glyph.save(ch.join("a.png")).unwrap();
        let x = load_glyph(&ch.join("a.png")).unwrap();
        assert_eq!(x.shape(), &[1, 28, 28]);
        assert!(x.data()[0] > 0.0 && x.data()[1..].iter().all(|&v| v == 0.0));

        fs::write(ch.join("b.png"), b"not an image").unwrap();
        match load_glyph(&ch.join("b.png")) {
            Err(Error::Load { path, .. }) => assert!(path.ends_with("b.png")),
            other => panic!("expected a load error, got {other:?}"),
        }
    }
}

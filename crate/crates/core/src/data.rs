//! Datasets: IDX image files, the forest cover CSV, seeded subsets, bilinear
//! upscaling and synthetic point clouds.
//!
//! Nothing here touches the network; files are read from a local data root
//! (`$SLOPE_DATA_DIR`, default `./data`).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::nn::InputShape;
use crate::rng::{permutation, seeded, Stream};

pub const DATA_DIR_ENV: &str = "SLOPE_DATA_DIR";
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const COVTYPE_FEATURES: usize = 54;
pub const COVTYPE_CONTINUOUS: usize = 10;
pub const COVTYPE_CLASSES: usize = 7;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn format_err(path: &Path, msg: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Root directory for dataset files.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Labelled points, one per row of `features`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub shape: InputShape,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, n_classes: usize, shape: InputShape) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if shape.len() != features.cols() {
            return Err(DataError::Invalid(format!(
                "shape holds {} values, rows have {}",
                shape.len(),
                features.cols()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(DataError::Invalid(format!("label {bad} >= {n_classes} classes")));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
            shape,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Rows `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let d = self.features.cols();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        Dataset {
            features: Matrix::new(indices.len(), d, data).expect("selected rows"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            shape: self.shape,
        }
    }

    /// Disjoint seeded subsets of sizes `n_a` and `n_b`, drawn uniformly
    /// without replacement.
    pub fn split(&self, seed: u64, n_a: usize, n_b: usize) -> Result<(Dataset, Dataset)> {
        if n_a + n_b > self.len() {
            return Err(DataError::Invalid(format!(
                "requested {n_a} + {n_b} points from a dataset of {}",
                self.len()
            )));
        }
        let perm = permutation(self.len(), &mut seeded(seed, Stream::Subset));
        Ok((self.select(&perm[..n_a]), self.select(&perm[n_a..n_a + n_b])))
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Reads an IDX image file and its label file. Pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read(images)?;
    if img.len() < 16 {
        return Err(format_err(images, "truncated header"));
    }
    let magic = be_u32(&img, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(images, format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let (n, h, w) = (be_u32(&img, 4) as usize, be_u32(&img, 8) as usize, be_u32(&img, 12) as usize);
    let body = &img[16..];
    if body.len() != n * h * w {
        return Err(format_err(
            images,
            format!("expected {} pixel bytes for {n} images of {h}x{w}, found {}", n * h * w, body.len()),
        ));
    }

    let lab = read(labels)?;
    if lab.len() < 8 {
        return Err(format_err(labels, "truncated header"));
    }
    let magic = be_u32(&lab, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(labels, format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let m = be_u32(&lab, 4) as usize;
    if lab.len() - 8 != m {
        return Err(format_err(labels, format!("header declares {m} labels, file holds {}", lab.len() - 8)));
    }
    if m != n {
        return Err(format_err(labels, format!("{m} labels for {n} images")));
    }
    let label_vals: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let n_classes = label_vals.iter().max().map_or(0, |&m| m + 1).max(10);
    let features = Matrix::new(n, h * w, body.iter().map(|&b| f64::from(b) / 255.0).collect())
        .map_err(|e| format_err(images, e.to_string()))?;
    Dataset::new(
        features,
        label_vals,
        n_classes,
        InputShape::Image {
            height: h,
            width: w,
            channels: 1,
        },
    )
}

/// Writes raw IDX image and label files. `pixels` holds `labels.len()`
/// images of `height x width` bytes each, row-major.
pub fn write_idx(images: &Path, labels: &Path, height: usize, width: usize, pixels: &[u8], label_bytes: &[u8]) -> Result<()> {
    let n = label_bytes.len();
    if pixels.len() != n * height * width {
        return Err(DataError::Invalid(format!(
            "{} pixel bytes for {n} images of {height}x{width}",
            pixels.len()
        )));
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, height as u32, width as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend_from_slice(label_bytes);
    for (path, bytes) in [(images, img), (labels, lab)] {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|source| DataError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        fs::write(path, bytes).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    Ok(())
}

/// Datasets the experiments know how to locate under the data root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Mnist,
    Kmnist,
    Fashion,
    Covtype,
}

impl DatasetId {
    pub const ALL: [DatasetId; 4] = [DatasetId::Mnist, DatasetId::Kmnist, DatasetId::Fashion, DatasetId::Covtype];

    pub fn name(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::Kmnist => "kmnist",
            DatasetId::Fashion => "fashion",
            DatasetId::Covtype => "covtype",
        }
    }

    pub fn is_image(self) -> bool {
        self != DatasetId::Covtype
    }

    /// Files expected under `root` for this dataset.
    pub fn files(self, root: &Path) -> Vec<PathBuf> {
        let dir = root.join(self.name());
        match self {
            DatasetId::Covtype => vec![dir.join("covtype.data")],
            _ => vec![dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte")],
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetId::Mnist),
            "kmnist" => Ok(DatasetId::Kmnist),
            "fashion" | "fashionmnist" | "fashion-mnist" => Ok(DatasetId::Fashion),
            "covtype" | "forest" | "forestcover" => Ok(DatasetId::Covtype),
            other => Err(format!("unknown dataset '{other}' (expected mnist, kmnist, fashion or covtype)")),
        }
    }
}

/// Train/validation subsets of a dataset found under `root`. Image datasets
/// draw both subsets from their training file; the forest cover set goes
/// through [`load_covtype`].
pub fn load_split(root: &Path, id: DatasetId, seed: u64, n_train: usize, n_val: usize) -> Result<(Dataset, Dataset)> {
    let files = id.files(root);
    match id {
        DatasetId::Covtype => load_covtype(&files[0], seed, n_train + n_val, n_train),
        _ => load_idx(&files[0], &files[1])?.split(seed, n_train, n_val),
    }
}

/// Reads the forest cover CSV (54 features then a 1-based class label), takes
/// a seeded subsample of `n_total` rows split into `n_train` / rest, and
/// standardizes the continuous columns with training-split statistics.
pub fn load_covtype(path: &Path, seed: u64, n_total: usize, n_train: usize) -> Result<(Dataset, Dataset)> {
    let text = String::from_utf8(read(path)?).map_err(|_| format_err(path, "not UTF-8"))?;
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != COVTYPE_FEATURES + 1 {
            return Err(format_err(
                path,
                format!("line {}: expected {} fields, found {}", lineno + 1, COVTYPE_FEATURES + 1, fields.len()),
            ));
        }
        for f in &fields[..COVTYPE_FEATURES] {
            let v: f64 = f
                .parse()
                .map_err(|_| format_err(path, format!("line {}: bad number '{f}'", lineno + 1)))?;
            feats.push(v);
        }
        let label: usize = fields[COVTYPE_FEATURES]
            .parse()
            .map_err(|_| format_err(path, format!("line {}: bad label", lineno + 1)))?;
        if !(1..=COVTYPE_CLASSES).contains(&label) {
            return Err(format_err(path, format!("line {}: label {label} outside 1..=7", lineno + 1)));
        }
        labels.push(label - 1);
    }
    if n_train > n_total {
        return Err(DataError::Invalid(format!("n_train {n_train} exceeds n_total {n_total}")));
    }
    let all = Dataset::new(
        Matrix::new(labels.len(), COVTYPE_FEATURES, feats).map_err(|e| format_err(path, e.to_string()))?,
        labels,
        COVTYPE_CLASSES,
        InputShape::Flat(COVTYPE_FEATURES),
    )?;
    let (mut train, mut val) = all.split(seed, n_train, n_total - n_train)?;
    let (mu, sd) = column_moments(&train.features, COVTYPE_CONTINUOUS);
    standardize(&mut train.features, &mu, &sd);
    standardize(&mut val.features, &mu, &sd);
    Ok((train, val))
}

/// Mean and population standard deviation of the first `k` columns.
fn column_moments(m: &Matrix, k: usize) -> (Vec<f64>, Vec<f64>) {
    let n = m.rows() as f64;
    let mut mu = vec![0.0; k];
    for r in 0..m.rows() {
        for (c, v) in m.row(r)[..k].iter().enumerate() {
            mu[c] += v;
        }
    }
    mu.iter_mut().for_each(|v| *v /= n);
    let mut var = vec![0.0; k];
    for r in 0..m.rows() {
        for (c, v) in m.row(r)[..k].iter().enumerate() {
            var[c] += (v - mu[c]) * (v - mu[c]);
        }
    }
    let sd = var.iter().map(|v| (v / n).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
    (mu, sd)
}

fn standardize(m: &mut Matrix, mu: &[f64], sd: &[f64]) {
    for r in 0..m.rows() {
        for (c, v) in m.row_mut(r)[..mu.len()].iter_mut().enumerate() {
            *v = (*v - mu[c]) / sd[c];
        }
    }
}

/// Source sample positions and weights for one output axis under the
/// half-pixel-centre convention `src = (i + 0.5) * old / new - 0.5`.
fn axis_taps(old: usize, new: usize) -> Vec<(usize, usize, f64)> {
    let scale = old as f64 / new as f64;
    (0..new)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (old - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(old - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear upscaling of every image to `new_h x new_w`.
pub fn bilinear_resize(ds: &Dataset, new_h: usize, new_w: usize) -> Result<Dataset> {
    let InputShape::Image {
        height,
        width,
        channels,
    } = ds.shape
    else {
        return Err(DataError::Invalid("bilinear_resize needs an image dataset".into()));
    };
    if new_h < height || new_w < width {
        return Err(DataError::Invalid(format!(
            "cannot downsample {height}x{width} to {new_h}x{new_w}"
        )));
    }
    let ty = axis_taps(height, new_h);
    let tx = axis_taps(width, new_w);
    let out_len = channels * new_h * new_w;
    let mut data = Vec::with_capacity(ds.len() * out_len);
    for r in 0..ds.len() {
        let img = ds.point(r);
        for c in 0..channels {
            let plane = &img[c * height * width..(c + 1) * height * width];
            for &(y0, y1, wy) in &ty {
                for &(x0, x1, wx) in &tx {
                    let top = plane[y0 * width + x0] * (1.0 - wx) + plane[y0 * width + x1] * wx;
                    let bot = plane[y1 * width + x0] * (1.0 - wx) + plane[y1 * width + x1] * wx;
                    data.push(top * (1.0 - wy) + bot * wy);
                }
            }
        }
    }
    Dataset::new(
        Matrix::new(ds.len(), out_len, data).expect("resized rows"),
        ds.labels.clone(),
        ds.n_classes,
        InputShape::Image {
            height: new_h,
            width: new_w,
            channels,
        },
    )
}

/// `n` points uniform on the Euclidean sphere of `radius` around `center`,
/// one per row.
pub fn sample_sphere(center: &[f64], radius: f64, n: usize, seed: u64) -> Result<Matrix> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(DataError::Invalid(format!("sphere radius must be positive, got {radius}")));
    }
    let d = center.len();
    let mut rng = seeded(seed, Stream::Sphere);
    let mut out = Matrix::zeros(n, d);
    let mut g = vec![0.0; d];
    for r in 0..n {
        let norm = loop {
            g.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                break norm;
            }
        };
        for ((o, gi), c) in out.row_mut(r).iter_mut().zip(&g).zip(center) {
            *o = c + radius * gi / norm;
        }
    }
    Ok(out)
}

/// `||x - y||_2` for `n_pairs` independent standard normal pairs in
/// `n_dim` dimensions.
pub fn gaussian_pair_distances(n_dim: usize, n_pairs: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed, Stream::Gaussian);
    (0..n_pairs)
        .map(|_| {
            (0..n_dim)
                .map(|_| {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    let y: f64 = StandardNormal.sample(&mut rng);
                    (x - y) * (x - y)
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_ds(pixels: Vec<f64>, h: usize, w: usize) -> Dataset {
        Dataset::new(
            Matrix::new(1, h * w, pixels).unwrap(),
            vec![0],
            1,
            InputShape::Image {
                height: h,
                width: w,
                channels: 1,
            },
        )
        .unwrap()
    }

    #[test]
    fn resize_identity_constant_and_checkerboard() {
        let ds = image_ds((0..9).map(f64::from).collect(), 3, 3);
        assert_eq!(bilinear_resize(&ds, 3, 3).unwrap(), ds);
        let c = bilinear_resize(&image_ds(vec![0.7; 4], 2, 2), 5, 7).unwrap();
        assert!(c.features.as_slice().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let cb = bilinear_resize(&image_ds(vec![0.0, 1.0, 1.0, 0.0], 2, 2), 3, 3).unwrap();
        assert!((cb.point(0)[4] - 0.5).abs() < 1e-15);
        // Corners clamp onto the source corners.
        assert_eq!(cb.point(0)[0], 0.0);
        assert_eq!(cb.point(0)[2], 1.0);
        assert!(bilinear_resize(&ds, 2, 2).is_err());
    }

    #[test]
    fn sphere_points_lie_on_sphere() {
        let c = [1.0, -2.0, 0.5];
        let pts = sample_sphere(&c, 0.25, 50, 3).unwrap();
        for r in 0..pts.rows() {
            let d: f64 = pts.row(r).iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!((d - 0.25).abs() <= 1e-10 * 0.25);
        }
        assert_eq!(sample_sphere(&c, 1.0, 1, 9).unwrap(), sample_sphere(&c, 1.0, 1, 9).unwrap());
        assert!(sample_sphere(&c, 0.0, 1, 9).is_err());
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let ds = Dataset::new(
            Matrix::new(20, 1, (0..20).map(f64::from).collect()).unwrap(),
            vec![0; 20],
            1,
            InputShape::Flat(1),
        )
        .unwrap();
        let (a, b) = ds.split(4, 8, 2).unwrap();
        let (a2, b2) = ds.split(4, 8, 2).unwrap();
        assert_eq!((&a, &b), (&a2, &b2));
        let mut seen: Vec<f64> = a.features.as_slice().iter().chain(b.features.as_slice()).copied().collect();
        seen.sort_by(f64::total_cmp);
        seen.dedup();
        assert_eq!(seen.len(), 10);
        assert!(ds.split(4, 15, 6).is_err());
    }
}

//! Datasets, IDX ingestion, synthetic blobs and fixed stratified splits.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numkit::{permutation, Matrix, RngStream};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Feature matrix with labels. Features lie in [0, 1] and labels in
/// `0..n_classes`; both are checked on construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    name: String,
    x: Matrix,
    y: Vec<usize>,
    n_classes: usize,
    /// (height, width) when the features are a flattened single-channel image.
    image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        x: Matrix,
        y: Vec<usize>,
        n_classes: usize,
        image_shape: Option<(usize, usize)>,
    ) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::Dataset(format!(
                "{} feature rows but {} labels",
                x.rows(),
                y.len()
            )));
        }
        if let Some(bad) = y.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Dataset(format!("label {bad} outside 0..{n_classes}")));
        }
        if x.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Dataset("feature values must lie in [0, 1]".into()));
        }
        if let Some((h, w)) = image_shape {
            if h * w != x.cols() {
                return Err(Error::Dataset(format!(
                    "image shape {h}x{w} does not match {} features",
                    x.cols()
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            x,
            y,
            n_classes,
            image_shape,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.image_shape
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.y {
            counts[l] += 1;
        }
        counts
    }

    /// Rows `idx`, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            n_classes: self.n_classes,
            image_shape: self.image_shape,
        }
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.to_owned(),
            offset: offset as u64,
            msg: "truncated header".into(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != expected {
        return Err(Error::Format {
            path: path.to_owned(),
            offset: 0,
            msg: format!("magic {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

/// Reads an IDX image file (`0x00000803`) and label file (`0x00000801`).
/// Pixels are divided by 255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = fs::read(ip)?;
    let labels = fs::read(lp)?;

    check_magic(&images, IDX_IMAGES_MAGIC, ip)?;
    let n = read_u32(&images, 4, ip)? as usize;
    let h = read_u32(&images, 8, ip)? as usize;
    let w = read_u32(&images, 12, ip)? as usize;
    let need = 16 + n * h * w;
    if images.len() < need {
        return Err(Error::Format {
            path: ip.to_owned(),
            offset: images.len() as u64,
            msg: format!("truncated pixel data: {} of {need} bytes", images.len()),
        });
    }

    check_magic(&labels, IDX_LABELS_MAGIC, lp)?;
    let nl = read_u32(&labels, 4, lp)? as usize;
    if nl != n {
        return Err(Error::Format {
            path: lp.to_owned(),
            offset: 4,
            msg: format!("label count {nl} does not match image count {n}"),
        });
    }
    if labels.len() < 8 + n {
        return Err(Error::Format {
            path: lp.to_owned(),
            offset: labels.len() as u64,
            msg: format!("truncated label data: {} of {} bytes", labels.len(), 8 + n),
        });
    }

    let x: Vec<f64> = images[16..need].iter().map(|&p| f64::from(p) / 255.0).collect();
    let y: Vec<usize> = labels[8..8 + n].iter().map(|&l| usize::from(l)).collect();
    let n_classes = y.iter().max().map_or(0, |m| m + 1);
    let name = ip
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(name, Matrix::from_vec(n, h * w, x)?, y, n_classes, Some((h, w)))
}

/// Inverse of [`load_idx`]; pixels are quantized to `round(255·v)`.
pub fn write_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = ds.image_shape.unwrap_or((1, ds.n_features()));
    let n = ds.len() as u32;
    let mut img = Vec::with_capacity(16 + ds.x.as_slice().len());
    for v in [IDX_IMAGES_MAGIC, n, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.x.as_slice().iter().map(|v| (v * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    for v in [IDX_LABELS_MAGIC, n] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    for &l in &ds.y {
        let byte = u8::try_from(l).map_err(|_| Error::Dataset(format!("label {l} does not fit a byte")))?;
        lab.push(byte);
    }
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}

/// Noise level of every blob, in feature units.
pub const BLOB_NOISE: f64 = 0.05;

/// Isotropic Gaussian blobs around 0.5, clipped to [0, 1].
///
/// Class offsets are random directions of length `separation·σ/√2`, so two
/// class means sit about `separation` noise standard deviations apart.
/// Rows are interleaved by class.
pub fn synth_blobs(
    n_per_class: usize,
    d: usize,
    n_classes: usize,
    separation: f64,
    stream: &mut RngStream,
) -> Result<Dataset> {
    if d < 2 || n_classes < 2 {
        return Err(Error::Config("synth_blobs needs d >= 2 and n_classes >= 2".into()));
    }
    let radius = separation * BLOB_NOISE / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| {
            let dir: Vec<f64> = (0..d).map(|_| stream.normal()).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            dir.iter().map(|v| 0.5 + radius * v / norm).collect()
        })
        .collect();
    let mut x = Vec::with_capacity(n_per_class * n_classes * d);
    let mut y = Vec::with_capacity(n_per_class * n_classes);
    for _ in 0..n_per_class {
        for (c, mu) in means.iter().enumerate() {
            x.extend(mu.iter().map(|m| (m + BLOB_NOISE * stream.normal()).clamp(0.0, 1.0)));
            y.push(c);
        }
    }
    Dataset::new(
        format!("blobs-d{d}-k{n_classes}-sep{separation}"),
        Matrix::from_vec(y.len(), d, x)?,
        y,
        n_classes,
        None,
    )
}

/// Keeps only `class_a` (relabelled 0) and `class_b` (relabelled 1).
pub fn binary_subset(ds: &Dataset, class_a: usize, class_b: usize) -> Result<Dataset> {
    if class_a == class_b {
        return Err(Error::Dataset(format!("binary subset needs two distinct labels, got {class_a} twice")));
    }
    let counts = ds.class_counts();
    for c in [class_a, class_b] {
        if counts.get(c).copied().unwrap_or(0) == 0 {
            return Err(Error::Dataset(format!("label {c} is absent")));
        }
    }
    let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.y[i] == class_a || ds.y[i] == class_b).collect();
    let mut sub = ds.subset(&idx);
    sub.y = sub.y.iter().map(|&l| usize::from(l == class_b)).collect();
    sub.n_classes = 2;
    sub.name = format!("{}[{class_a}v{class_b}]", ds.name);
    Ok(sub)
}

/// Train/test partition of a dataset's row indices. Both sides are sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl Split {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("split serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// SHA-256 of the JSON encoding, hex.
    pub fn content_hash(&self) -> String {
        hex_digest(self.to_json().as_bytes())
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::Dataset("split sides must be non-empty".into()));
        }
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.test) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Dataset(format!("split index {i} out of range or repeated")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Dataset("split does not cover every sample".into()));
        }
        Ok(())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-class quotas summing to `round(total·fraction)` with each class within
/// one sample of its exact share (largest-remainder rounding).
fn stratified_quotas(counts: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let target = (total as f64 * fraction).round() as usize;
    let exact: Vec<f64> = counts.iter().map(|&c| c as f64 * fraction).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = target.saturating_sub(quotas.iter().sum());
    for &c in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if quotas[c] < counts[c] {
            quotas[c] += 1;
            missing -= 1;
        }
    }
    quotas
}

fn class_members(ds: &Dataset) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); ds.n_classes];
    for (i, &l) in ds.y.iter().enumerate() {
        members[l].push(i);
    }
    members
}

/// Stratified train/test split. Every present class needs at least two
/// samples so that both sides see it.
pub fn fixed_split(ds: &Dataset, test_fraction: f64, stream: &mut RngStream) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test_fraction {test_fraction} outside (0, 1)")));
    }
    let members = class_members(ds);
    for (c, m) in members.iter().enumerate() {
        if m.len() == 1 {
            return Err(Error::Dataset(format!("class {c} has a single sample; cannot stratify")));
        }
    }
    let counts: Vec<usize> = members.iter().map(Vec::len).collect();
    let mut quotas = stratified_quotas(&counts, test_fraction);
    for (q, &c) in quotas.iter_mut().zip(&counts) {
        if c >= 2 {
            *q = (*q).clamp(1, c - 1);
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, m) in members.iter().enumerate() {
        if m.is_empty() {
            continue;
        }
        let perm = permutation(m.len(), &mut stream.child(&format!("class={c}")));
        for (rank, &p) in perm.iter().enumerate() {
            if rank < quotas[c] {
                test.push(m[p]);
            } else {
                train.push(m[p]);
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    let split = Split {
        train,
        test,
        seed: stream.master_seed(),
    };
    split.validate(ds.len())?;
    Ok(split)
}

/// `n` row indices drawn stratified by class, sorted.
pub fn stratified_sample(ds: &Dataset, n: usize, stream: &mut RngStream) -> Result<Vec<usize>> {
    if n > ds.len() {
        return Err(Error::Dataset(format!("cannot draw {n} of {} samples", ds.len())));
    }
    let members = class_members(ds);
    let counts: Vec<usize> = members.iter().map(Vec::len).collect();
    let quotas = stratified_quotas(&counts, n as f64 / ds.len() as f64);
    let mut out = Vec::with_capacity(n);
    for (c, m) in members.iter().enumerate() {
        let perm = permutation(m.len(), &mut stream.child(&format!("class={c}")));
        out.extend(perm.iter().take(quotas[c]).map(|&p| m[p]));
    }
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::derive_stream;

    fn tiny_idx(dir: &Path, n_img: u32, n_lab: u32, img_magic: u32, lab_magic: u32) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("img");
        let lp = dir.join("lab");
        let mut img = Vec::new();
        for v in [img_magic, n_img, 2, 2] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend((0..n_img * 4).map(|i| (i % 256) as u8));
        let mut lab = Vec::new();
        for v in [lab_magic, n_lab] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend((0..n_lab).map(|i| (i % 3) as u8));
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = tiny_idx(dir.path(), 5, 5, IDX_IMAGES_MAGIC, IDX_IMAGES_MAGIC);
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");

        let (ip, lp) = tiny_idx(dir.path(), 100, 99, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC);
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(err.to_string().contains("label count 99"), "{err}");

        let (ip, lp) = tiny_idx(dir.path(), 5, 5, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC);
        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
    }

    #[test]
    fn idx_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = tiny_idx(dir.path(), 7, 7, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!((ds.len(), ds.n_features(), ds.n_classes()), (7, 4, 3));
        let (ip2, lp2) = (dir.path().join("i2"), dir.path().join("l2"));
        write_idx(&ds, &ip2, &lp2).unwrap();
        assert_eq!(fs::read(&ip).unwrap(), fs::read(&ip2).unwrap());
        let back = load_idx(&ip2, &lp2).unwrap();
        assert_eq!(back.x(), ds.x());
        assert_eq!(back.y(), ds.y());
    }

    #[test]
    fn blobs_are_deterministic_and_bounded() {
        let a = synth_blobs(20, 5, 3, 4.0, &mut derive_stream(1, "blobs")).unwrap();
        let b = synth_blobs(20, 5, 3, 4.0, &mut derive_stream(1, "blobs")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 60);
        assert!(synth_blobs(5, 1, 3, 1.0, &mut derive_stream(1, "x")).is_err());
    }

    #[test]
    fn binary_subset_relabels() {
        let ds = synth_blobs(10, 3, 4, 3.0, &mut derive_stream(2, "b")).unwrap();
        let sub = binary_subset(&ds, 3, 1).unwrap();
        assert_eq!(sub.n_classes(), 2);
        assert_eq!(sub.len(), 20);
        // interleaved classes 0,1,2,3 → only 1 and 3 kept, 3 ↦ 0 and 1 ↦ 1
        assert_eq!(&sub.y()[..4], &[1, 0, 1, 0]);
        assert!(binary_subset(&ds, 2, 2).is_err());
        let err = binary_subset(&ds, 0, 9).unwrap_err();
        assert!(err.to_string().contains("label 9"));
    }

    #[test]
    fn blobs_two_class_binary_is_identity() {
        let ds = synth_blobs(10, 3, 2, 3.0, &mut derive_stream(2, "b2")).unwrap();
        let sub = binary_subset(&ds, 0, 1).unwrap();
        assert_eq!(sub.x(), ds.x());
        assert_eq!(sub.y(), ds.y());
    }

    #[test]
    fn split_sizes_and_strata() {
        let ds = synth_blobs(100, 2, 10, 2.0, &mut derive_stream(3, "s")).unwrap();
        let s1 = fixed_split(&ds, 0.2, &mut derive_stream(3, "split")).unwrap();
        let s2 = fixed_split(&ds, 0.2, &mut derive_stream(3, "split")).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.test.len(), 200);
        assert_eq!(s1.train.len(), 800);
        assert_eq!(Split::from_json(&s1.to_json()).unwrap(), s1);
        assert_eq!(s1.content_hash(), s2.content_hash());
    }

    #[test]
    fn split_strata_uneven_classes() {
        let y: Vec<usize> = (0..97).map(|i| if i < 13 { 0 } else if i < 50 { 1 } else { 2 }).collect();
        let x = Matrix::zeros(97, 2);
        let ds = Dataset::new("uneven", x, y, 3, None).unwrap();
        let split = fixed_split(&ds, 0.3, &mut derive_stream(9, "u")).unwrap();
        assert_eq!(split.test.len(), (97.0f64 * 0.3).round() as usize);
        let counts = ds.class_counts();
        for c in 0..3 {
            let in_test = split.test.iter().filter(|&&i| ds.y()[i] == c).count() as f64;
            assert!((in_test - counts[c] as f64 * 0.3).abs() <= 1.0);
        }
    }

    #[test]
    fn split_rejects_singleton_class() {
        let ds = Dataset::new("s", Matrix::zeros(3, 2), vec![0, 0, 1], 2, None).unwrap();
        assert!(fixed_split(&ds, 0.5, &mut derive_stream(1, "x")).is_err());
        assert!(fixed_split(&ds, 1.0, &mut derive_stream(1, "x")).is_err());
    }
}

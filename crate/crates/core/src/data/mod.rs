//! MNIST ingestion and synthesis of datasets with planted spurious patches.

pub mod idx;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    /// Row in the source IDX file.
    pub source_index: usize,
    pub has_patch_a: bool,
    pub has_patch_b: bool,
}

/// Images in `[0, 1]` with class labels and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `[N, C, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub meta: Vec<SampleMeta>,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, meta: Vec<SampleMeta>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Input(format!("images must be [N, C, H, W], got {:?}", images.shape())));
        }
        let n = images.shape()[0];
        if labels.len() != n || meta.len() != n {
            return Err(Error::Input(format!(
                "{n} images but {} labels and {} meta records",
                labels.len(),
                meta.len()
            )));
        }
        Ok(LabeledDataset { images, labels, meta })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.outer(i)
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: self.images.gather_outer(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            meta: indices.iter().map(|&i| self.meta[i]).collect(),
        }
    }

    /// First `n` samples (all of them if `n >= len`).
    pub fn head(&self, n: usize) -> LabeledDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut c = vec![0; num_classes];
        for &y in &self.labels {
            if y < num_classes {
                c[y] += 1;
            }
        }
        c
    }

    /// Tensors for the `MTCK` container: `images`, `labels`, `source_index`,
    /// `patch_a`, `patch_b`.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let n = self.len();
        let col = |f: &dyn Fn(&SampleMeta) -> f64| {
            Tensor::new(vec![n], self.meta.iter().map(f).collect()).expect("length n")
        };
        vec![
            ("images".into(), self.images.clone()),
            (
                "labels".into(),
                Tensor::new(vec![n], self.labels.iter().map(|&y| y as f64).collect()).expect("length n"),
            ),
            ("source_index".into(), col(&|m| m.source_index as f64)),
            ("patch_a".into(), col(&|m| f64::from(u8::from(m.has_patch_a)))),
            ("patch_b".into(), col(&|m| f64::from(u8::from(m.has_patch_b)))),
        ]
    }

    pub fn from_tensors(mut tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let images = container::take_named(&mut tensors, "images")?;
        let as_index = |t: Tensor, what: &str| -> Result<Vec<usize>> {
            t.data()
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 && v < 9.0e15 {
                        Ok(v as usize)
                    } else {
                        Err(Error::Input(format!("{what} entry {v} is not a nonnegative integer")))
                    }
                })
                .collect()
        };
        let labels = as_index(container::take_named(&mut tensors, "labels")?, "labels")?;
        let src = as_index(container::take_named(&mut tensors, "source_index")?, "source_index")?;
        let pa = container::take_named(&mut tensors, "patch_a")?;
        let pb = container::take_named(&mut tensors, "patch_b")?;
        if src.len() != labels.len() || pa.len() != labels.len() || pb.len() != labels.len() {
            return Err(Error::Input("dataset columns differ in length".into()));
        }
        let meta = src
            .iter()
            .zip(pa.data().iter().zip(pb.data()))
            .map(|(&source_index, (&a, &b))| SampleMeta {
                source_index,
                has_patch_a: a != 0.0,
                has_patch_b: b != 0.0,
            })
            .collect();
        LabeledDataset::new(images, labels, meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let t = self.to_tensors();
        container::write_file(path, t.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(container::read_file(path)?)
    }
}

/// Reads an IDX image/label pair into a single-channel dataset scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img = idx::read_images(images_path)?;
    let labels = idx::read_labels(labels_path)?;
    from_idx(img, &labels, images_path, labels_path)
}

pub fn from_idx(img: idx::IdxImages, labels: &[u8], images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    if img.count != labels.len() {
        return Err(Error::CountMismatch {
            images_file: images_path.to_path_buf(),
            labels_file: labels_path.to_path_buf(),
            images: img.count,
            labels: labels.len(),
        });
    }
    let n = img.count;
    let data = img.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let images = Tensor::new(vec![n, 1, img.rows, img.cols], data)
        .map_err(|_| Error::Input(format!("{}: empty image file", images_path.display())))?;
    let meta = (0..n)
        .map(|i| SampleMeta {
            source_index: i,
            ..SampleMeta::default()
        })
        .collect();
    LabeledDataset::new(images, labels.iter().map(|&y| usize::from(y)).collect(), meta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

/// A square patch planted on a class-conditional fraction of samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub patch_size: usize,
    /// RGB in `[0, 1]`.
    pub color: [f64; 3],
    pub corner: Corner,
    /// Gap in pixels between the patch and the image border.
    pub offset: usize,
    pub p_class0: f64,
    pub p_class1: f64,
    pub seed: u64,
}

impl BiasSpec {
    /// 4×4 blue square near the top-left corner on 99% of class 0 and 1% of class 1.
    pub fn blue_top_left(seed: u64) -> Self {
        BiasSpec {
            patch_size: 4,
            color: [0.0, 0.0, 1.0],
            corner: Corner::TopLeft,
            offset: 1,
            p_class0: 0.99,
            p_class1: 0.01,
            seed,
        }
    }

    /// Red counterpart near the bottom-right corner, same proportions.
    pub fn red_bottom_right(seed: u64) -> Self {
        BiasSpec {
            color: [1.0, 0.0, 0.0],
            corner: Corner::BottomRight,
            ..Self::blue_top_left(seed)
        }
    }

    /// `(row0, col0)` of the patch in an `h × w` image.
    pub fn origin(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = self.offset + self.patch_size;
        if self.patch_size == 0 || span > h || span > w {
            return Err(Error::Config(format!(
                "patch of size {} at offset {} does not fit a {h}x{w} image",
                self.patch_size, self.offset
            )));
        }
        let r = match self.corner {
            Corner::TopLeft | Corner::TopRight => self.offset,
            Corner::BottomLeft | Corner::BottomRight => h - span,
        };
        let c = match self.corner {
            Corner::TopLeft | Corner::BottomLeft => self.offset,
            Corner::TopRight | Corner::BottomRight => w - span,
        };
        Ok((r, c))
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        for (name, p) in [("p_class0", self.p_class0), ("p_class1", self.p_class1)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config(format!("patch color {:?} outside [0, 1]", self.color)));
        }
        self.origin(h, w).map(|_| ())
    }

    /// Flat `(row, col)` pixel set covered by the patch.
    pub fn pixels(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let (r0, c0) = self.origin(h, w)?;
        let s = self.patch_size;
        Ok((r0..r0 + s).flat_map(|r| (c0..c0 + s).map(move |c| (r, c))).collect())
    }

    /// Overwrites the patch area of one `[3, H, W]` image with `color`.
    pub fn paint(&self, image: &mut [f64], h: usize, w: usize) -> Result<()> {
        if image.len() != 3 * h * w {
            return Err(Error::Input("patches need RGB images".into()));
        }
        for (r, c) in self.pixels(h, w)? {
            for (ch, &v) in self.color.iter().enumerate() {
                image[(ch * h + r) * w + c] = v;
            }
        }
        Ok(())
    }
}

/// How the training pool is split and subsampled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Fraction of the shuffled pool held out (taken from its end) for validation.
    pub val_fraction: f64,
    /// Keep only this many samples of the shuffled pool before splitting.
    pub pool_limit: Option<usize>,
    /// Keep only the first this-many test samples.
    pub test_limit: Option<usize>,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            val_fraction: 0.1,
            pool_limit: None,
            test_limit: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasedSplits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    /// Untouched test images, binary labels.
    pub test_original: LabeledDataset,
    /// Every class-1 test image carries every patch; class 0 untouched.
    pub test_biased: LabeledDataset,
}

/// Digits 0–4 → class 0, 5–9 → class 1, grayscale replicated to RGB.
pub fn binarize(raw: &LabeledDataset) -> Result<LabeledDataset> {
    let [c, h, w] = raw.image_shape();
    if c != 1 {
        return Err(Error::Input(format!("expected single-channel digits, got {c} channels")));
    }
    if let Some((i, &y)) = raw.labels.iter().enumerate().find(|(_, &y)| y > 9) {
        return Err(Error::Input(format!("sample {i} has digit label {y}")));
    }
    let n = raw.len();
    let plane = h * w;
    let mut data = Vec::with_capacity(n * 3 * plane);
    for i in 0..n {
        let img = raw.image(i);
        for _ in 0..3 {
            data.extend_from_slice(img);
        }
    }
    LabeledDataset::new(
        Tensor::new(vec![n, 3, h, w], data)?,
        raw.labels.iter().map(|&y| usize::from(y >= 5)).collect(),
        raw.meta.clone(),
    )
}

/// `⌊p·n⌋`, robust to products like `0.29·100` landing a hair below an integer.
pub fn patched_count(p: f64, n: usize) -> usize {
    ((p * n as f64) + 1e-9).floor() as usize
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Plants each patch on exactly `⌊p_c·n_c⌋` seeded-randomly chosen samples of class `c`.
fn plant(ds: &mut LabeledDataset, patches: &[BiasSpec], split_id: u64) -> Result<()> {
    let [_, h, w] = ds.image_shape();
    for (j, spec) in patches.iter().enumerate() {
        let mut rng = rng_for(spec.seed, ((j as u64) << 8) | split_id);
        for (class, p) in [(0, spec.p_class0), (1, spec.p_class1)] {
            let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
            idx.shuffle(&mut rng);
            let k = patched_count(p, idx.len());
            for &i in &idx[..k] {
                spec.paint(ds.images.outer_mut(i), h, w)?;
                mark(&mut ds.meta[i], j);
            }
        }
    }
    Ok(())
}

fn mark(m: &mut SampleMeta, patch: usize) {
    if patch == 0 {
        m.has_patch_a = true;
    } else {
        m.has_patch_b = true;
    }
}

fn check_patches(patches: &[BiasSpec], h: usize, w: usize) -> Result<()> {
    if patches.len() > 2 {
        return Err(Error::Config("at most two patches are supported".into()));
    }
    for p in patches {
        p.validate(h, w)?;
    }
    if let [a, b] = patches {
        let pa = a.pixels(h, w)?;
        let pb = b.pixels(h, w)?;
        if pa.iter().any(|px| pb.contains(px)) {
            return Err(Error::Config("patch regions overlap".into()));
        }
    }
    Ok(())
}

/// Binarizes 10-class digits and builds biased train/validation splits and
/// the two test sets, for one or two planted patches.
pub fn bias_splits(
    train_raw: &LabeledDataset,
    test_raw: &LabeledDataset,
    patches: &[BiasSpec],
    split: &SplitConfig,
) -> Result<BiasedSplits> {
    if !(0.0..1.0).contains(&split.val_fraction) {
        return Err(Error::Config(format!("val_fraction must be in [0, 1), got {}", split.val_fraction)));
    }
    let pool = binarize(train_raw)?;
    let test = binarize(test_raw)?;
    let [_, h, w] = pool.image_shape();
    if test.image_shape() != pool.image_shape() {
        return Err(Error::Input("train and test images differ in shape".into()));
    }
    check_patches(patches, h, w)?;

    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng_for(split.seed, 0));
    if let Some(limit) = split.pool_limit {
        order.truncate(limit);
    }
    let n_val = (split.val_fraction * order.len() as f64).floor() as usize;
    let (train_idx, val_idx) = order.split_at(order.len() - n_val);
    let mut train = pool.subset(train_idx);
    let mut val = pool.subset(val_idx);
    plant(&mut train, patches, 1)?;
    plant(&mut val, patches, 2)?;

    let test_original = match split.test_limit {
        Some(n) => test.head(n),
        None => test,
    };
    let mut test_biased = test_original.clone();
    for i in 0..test_biased.len() {
        if test_biased.labels[i] == 1 {
            for (j, spec) in patches.iter().enumerate() {
                spec.paint(test_biased.images.outer_mut(i), h, w)?;
                mark(&mut test_biased.meta[i], j);
            }
        }
    }
    Ok(BiasedSplits {
        train,
        val,
        test_original,
        test_biased,
    })
}

/// Single blue-patch variant.
pub fn binarize_and_bias(
    train_raw: &LabeledDataset,
    test_raw: &LabeledDataset,
    bias: &BiasSpec,
    split: &SplitConfig,
) -> Result<BiasedSplits> {
    bias_splits(train_raw, test_raw, std::slice::from_ref(bias), split)
}

/// Two independent patches (A, B) on disjoint corners.
pub fn two_patch_variant(
    train_raw: &LabeledDataset,
    test_raw: &LabeledDataset,
    a: &BiasSpec,
    b: &BiasSpec,
    split: &SplitConfig,
) -> Result<BiasedSplits> {
    bias_splits(train_raw, test_raw, &[a.clone(), b.clone()], split)
}

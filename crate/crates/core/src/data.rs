use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub const CIFAR10_RECORD: usize = 3073;
pub const CIFAR10_CLASSES: usize = 10;
pub const CIFAR10_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// Peak deviation of a synthetic class template from its channel offset.
pub const SYNTH_CONTRAST: f32 = 0.05;
pub const SYNTH_NOISE: f32 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// Images `[M, C, H, W]` with one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    tag: SplitTag,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, tag: SplitTag) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::Dataset(format!("images must be [M, C, H, W], got {shape:?}")));
        }
        if shape[0] != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                shape[0],
                labels.len()
            )));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Dataset(format!(
                "label {l} of sample {i} is outside 0..{num_classes}"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            tag,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn tag(&self) -> SplitTag {
        self.tag
    }

    pub fn with_tag(mut self, tag: SplitTag) -> Self {
        self.tag = tag;
        self
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// The samples at `rows`, in that order.
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        if rows.is_empty() {
            return Err(Error::Dataset("subset would be empty".into()));
        }
        let images = self.images.gather_outer(rows)?;
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        Dataset::new(images, labels, self.num_classes, self.tag)
    }
}

/// Reads CIFAR-10 binary batch files: 1 label byte then 3072 channel-planar
/// pixel bytes per record. Pixels are scaled to `[0, 1]`.
pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        let records = bytes.len() / CIFAR10_RECORD;
        if bytes.len() % CIFAR10_RECORD != 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                record: CIFAR10_RECORD,
                actual: bytes.len(),
                expected: records * CIFAR10_RECORD,
                records,
            });
        }
        for (r, rec) in bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
            let label = rec[0];
            if label as usize >= CIFAR10_CLASSES {
                return Err(Error::CorruptRecord {
                    path: path.to_path_buf(),
                    record: r,
                    label,
                    classes: CIFAR10_CLASSES,
                });
            }
            labels.push(label as usize);
            pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(Error::Dataset("CIFAR-10 files contain no records".into()));
    }
    let images = Tensor::new(&[labels.len(), 3, 32, 32], pixels)?;
    Dataset::new(images, labels, CIFAR10_CLASSES, SplitTag::Train)
}

/// Writes records in CIFAR-10 binary layout; `images` must be `[M, 3, 32, 32]`
/// with values in `[0, 1]`.
pub fn write_cifar10_binary(path: &Path, images: &Tensor, labels: &[u8]) -> Result<()> {
    if images.shape() != [labels.len(), 3, 32, 32] {
        return Err(Error::Dataset(format!(
            "expected images [{}, 3, 32, 32], got {:?}",
            labels.len(),
            images.shape()
        )));
    }
    let mut out = Vec::with_capacity(labels.len() * CIFAR10_RECORD);
    for (l, px) in labels.iter().zip(images.data().chunks_exact(3072)) {
        out.push(*l);
        out.extend(px.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// t in cycles; values in [-1, 1]. Basic arithmetic only, so results are
// bit-identical on every IEEE-754 platform.
fn triangle(t: f32) -> f32 {
    let f = t - t.floor();
    4.0 * (f - 0.5).abs() - 1.0
}

/// Deterministic class-conditional images. Each class has a per-channel
/// grating template (its own spatial frequency, phase and colour offset);
/// every sample adds independent uniform noise of amplitude
/// [`SYNTH_NOISE`] and is clamped to `[0, 1]`. Samples are class-major.
pub fn synth_dataset(num_classes: usize, per_class: usize, shape: [usize; 3], seed: u64) -> Result<Dataset> {
    synth_dataset_with_contrast(num_classes, per_class, shape, seed, SYNTH_CONTRAST)
}

/// [`synth_dataset`] with an explicit template contrast.
pub fn synth_dataset_with_contrast(
    num_classes: usize,
    per_class: usize,
    shape: [usize; 3],
    seed: u64,
    contrast: f32,
) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 {
        return Err(Error::Dataset(format!(
            "synthetic dataset would be empty ({num_classes} classes × {per_class} samples)"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::Dataset(format!("sample shape {shape:?} has a zero extent")));
    }
    let [c, h, w] = shape;
    let mut rng = Rng::derive(seed, 0);
    let mut freqs: Vec<(f32, f32)> = (0..4)
        .flat_map(|fy| (0..4).map(move |fx| (fx as f32, fy as f32)))
        .filter(|&f| f != (0.0, 0.0))
        .collect();
    rng.shuffle(&mut freqs);
    let plane = h * w;
    let mut templates = vec![0.0f32; num_classes * c * plane];
    for k in 0..num_classes {
        let (fx, fy) = freqs[k % freqs.len()];
        for ch in 0..c {
            let phase = rng.uniform();
            let offset = 0.5 + contrast * (rng.uniform() - 0.5);
            let t = &mut templates[(k * c + ch) * plane..][..plane];
            for y in 0..h {
                for x in 0..w {
                    let cyc = fx * x as f32 / w as f32 + fy * y as f32 / h as f32 + phase;
                    t[y * w + x] = offset + contrast * triangle(cyc);
                }
            }
        }
    }
    let mut noise = Rng::derive(seed, 1);
    let sample = c * plane;
    let mut data = Vec::with_capacity(num_classes * per_class * sample);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for k in 0..num_classes {
        let t = &templates[k * sample..][..sample];
        for _ in 0..per_class {
            data.extend(
                t.iter()
                    .map(|&v| (v + SYNTH_NOISE * (2.0 * noise.uniform() - 1.0)).clamp(0.0, 1.0)),
            );
            labels.push(k);
        }
    }
    let images = Tensor::new(&[labels.len(), c, h, w], data)?;
    Dataset::new(images, labels, num_classes, SplitTag::Train)
}

/// Per-channel `(x - mean) / std`.
pub fn normalize(ds: &Dataset, mean: &[f32], std: &[f32]) -> Result<Dataset> {
    let [c, h, w] = ds.sample_shape();
    if mean.len() != c || std.len() != c {
        return Err(Error::Dataset(format!(
            "normalization needs {c} means and stds, got {} and {}",
            mean.len(),
            std.len()
        )));
    }
    if let Some(i) = std.iter().position(|&s| s == 0.0 || !s.is_finite()) {
        return Err(Error::Dataset(format!(
            "std of channel {i} is {}; must be finite and non-zero",
            std[i]
        )));
    }
    let mut out = ds.clone();
    let plane = h * w;
    for (i, v) in out.images.data_mut().iter_mut().enumerate() {
        let ch = (i / plane) % c;
        *v = (*v - mean[ch]) / std[ch];
    }
    Ok(out)
}

/// Seeded shuffle, then the first `round(fractions.0 · M)` samples become the
/// training part and the rest the validation part.
pub fn split(ds: &Dataset, fractions: (f64, f64), seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = fractions;
    if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || ((a + b) - 1.0).abs() > 1e-9 {
        return Err(Error::Dataset(format!(
            "split fractions ({a}, {b}) must lie in [0, 1] and sum to 1"
        )));
    }
    let m = ds.len();
    let n_train = (a * m as f64).round() as usize;
    if n_train == 0 || n_train == m {
        return Err(Error::Dataset(format!(
            "split ({a}, {b}) of {m} samples leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    Rng::new(seed).shuffle(&mut order);
    let train = ds.subset(&order[..n_train])?.with_tag(SplitTag::Train);
    let val = ds.subset(&order[n_train..])?.with_tag(SplitTag::Val);
    Ok((train, val))
}

/// Iterator over `(images, labels)` mini-batches covering every sample once.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batches(ds: &Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::Dataset("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if let Some(seed) = shuffle_seed {
        Rng::new(seed).shuffle(&mut order);
    }
    Ok(Batches {
        ds,
        order,
        batch_size,
        pos: 0,
    })
}

impl Batches<'_> {
    /// Sample indices in visiting order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let rows = &self.order[self.pos..end];
        self.pos = end;
        let images = if rows.windows(2).all(|p| p[1] == p[0] + 1) {
            self.ds.images.slice_outer(rows[0], rows.len())
        } else {
            self.ds.images.gather_outer(rows)
        }
        .expect("batch rows are in range");
        Some((images, rows.iter().map(|&r| self.ds.labels[r]).collect()))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

impl ExactSizeIterator for Batches<'_> {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sizes_split_130_by_128() {
        let ds = synth_dataset(2, 65, [1, 2, 2], 0).unwrap();
        let sizes: Vec<usize> = batches(&ds, 128, None).unwrap().map(|(_, l)| l.len()).collect();
        assert_eq!(sizes, vec![128, 2]);
    }

    #[test]
    fn unshuffled_batches_are_in_index_order() {
        let ds = synth_dataset(3, 4, [1, 2, 2], 0).unwrap();
        let labels: Vec<usize> = batches(&ds, 5, None).unwrap().flat_map(|(_, l)| l).collect();
        assert_eq!(labels, ds.labels());
    }

    #[test]
    fn synth_is_deterministic_and_rejects_empty() {
        let a = synth_dataset(4, 8, [3, 16, 16], 11).unwrap();
        let b = synth_dataset(4, 8, [3, 16, 16], 11).unwrap();
        assert_eq!(a, b);
        assert!(a.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(synth_dataset(4, 0, [3, 16, 16], 11), Err(Error::Dataset(_))));
    }

    #[test]
    fn normalize_examples() {
        let ds = synth_dataset(2, 3, [2, 3, 3], 1).unwrap();
        assert_eq!(normalize(&ds, &[0.0, 0.0], &[1.0, 1.0]).unwrap(), ds);
        let c = Dataset::new(Tensor::full(&[2, 2, 3, 3], 0.3), vec![0, 1], 2, SplitTag::Train).unwrap();
        let z = normalize(&c, &[0.3, 0.3], &[1.0, 1.0]).unwrap();
        assert!(z.images().data().iter().all(|&v| v == 0.0));
        assert!(normalize(&c, &[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn split_examples() {
        let ds = synth_dataset(4, 25, [1, 2, 2], 3).unwrap();
        let (tr, va) = split(&ds, (0.8, 0.2), 9).unwrap();
        assert_eq!((tr.len(), va.len()), (80, 20));
        assert_eq!(split(&ds, (0.8, 0.2), 9).unwrap(), (tr, va));
        assert!(split(&ds, (0.8, 0.3), 9).is_err());
    }
}

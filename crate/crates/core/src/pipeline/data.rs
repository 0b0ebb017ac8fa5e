//! Labeled image sets, their latent encodings, and a nearest-centroid
//! classifier used to score samples.

use super::config::{DatasetSpec, GeneratorKind};
use super::sample::sample_images;
use crate::error::{contract, Error, Result};
use crate::models::{DiTModel, ToyAutoencoder};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Images `[N, 3, H, W]` in `[−1, 1]` with one class label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub val: Dataset,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(contract!("{} labels for images {:?}", labels.len(), images.shape()));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> Result<Tensor> {
        self.images.index0(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Tensor, usize)> + '_ {
        (0..self.len()).map(|i| (self.image(i).expect("index in range"), self.labels[i]))
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let imgs: Vec<Tensor> = idx.iter().map(|&i| self.image(i)).collect::<Result<_>>()?;
        Dataset::new(Tensor::stack(&imgs)?, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

const PALETTE: [[f32; 3]; 10] = [
    [0.9, -0.7, -0.7],
    [-0.7, 0.85, -0.7],
    [-0.6, -0.5, 0.95],
    [0.9, 0.85, -0.8],
    [0.9, -0.6, 0.9],
    [-0.7, 0.9, 0.9],
    [0.95, 0.15, -0.85],
    [0.15, -0.8, 0.8],
    [0.9, 0.9, 0.9],
    [-0.9, 0.2, 0.25],
];

fn class_color(k: usize) -> [f32; 3] {
    if k < PALETTE.len() {
        return PALETTE[k];
    }
    let h = k as f32 * 0.618_034;
    let f = |o: f32| ((h + o) * std::f32::consts::TAU).sin() * 0.9;
    [f(0.0), f(1.0 / 3.0), f(2.0 / 3.0)]
}

/// Whether `(u, v)` (offsets from the center, in radii) lies inside shape `kind`.
fn inside(kind: usize, u: f32, v: f32) -> bool {
    match kind {
        0 => u * u + v * v <= 1.0,
        1 => u.abs() <= 0.85 && v.abs() <= 0.85,
        2 => (-1.0..=0.8).contains(&v) && u.abs() <= (v + 1.0) * 0.55,
        3 => {
            let r2 = u * u + v * v;
            (0.45..=1.0).contains(&r2)
        }
        _ => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
    }
}

/// One procedural image `[3, size, size]` of class `k`.
pub fn render_shape(k: usize, size: usize, rng: &mut Rng) -> Tensor {
    let s = size as f32;
    let kind = k % 5;
    let color = class_color(k);
    let jitter = s / 8.0;
    let cx = s / 2.0 + rng.uniform_in(-jitter, jitter);
    let cy = s / 2.0 + rng.uniform_in(-jitter, jitter);
    let radius = s * rng.uniform_in(0.2, 0.32);
    let fg: Vec<f32> = color
        .iter()
        .map(|c| (c + rng.uniform_in(-0.1, 0.1)).clamp(-1.0, 1.0))
        .collect();
    let bg = -0.75 + rng.uniform_in(-0.1, 0.1);
    let mut data = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            // 2×2 supersampling for soft edges.
            let mut cover = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let u = (x as f32 + ox - cx) / radius;
                let v = (y as f32 + oy - cy) / radius;
                if inside(kind, u, v) {
                    cover += 0.25;
                }
            }
            for c in 0..3 {
                data[c * size * size + y * size + x] = bg + cover * (fg[c] - bg);
            }
        }
    }
    Tensor::new(vec![3, size, size], data).expect("image shape")
}

const TRAIN_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;

fn procedural(spec: &DatasetSpec, per_class: usize, stream: u64) -> Result<Dataset> {
    let k = spec.num_classes;
    let root = Rng::new(spec.seed.unwrap_or(0)).fork(stream);
    let n = k * per_class;
    let mut imgs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        imgs.push(render_shape(class, spec.image_size, &mut root.fork(i as u64)));
        labels.push(class);
    }
    Dataset::new(Tensor::stack(&imgs)?, labels)
}

fn synthetic(
    spec: &DatasetSpec,
    per_class: usize,
    stream: u64,
    model: &DiTModel,
    ae: &ToyAutoencoder,
) -> Result<Dataset> {
    let k = spec.num_classes;
    let n = k * per_class;
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut rng = Rng::new(spec.seed.unwrap_or(0)).fork(stream);
    let mut parts = Vec::new();
    for chunk in labels.chunks(64) {
        let classes: Vec<Option<usize>> = chunk.iter().map(|&c| Some(c)).collect();
        parts.push(sample_images(
            model,
            ae,
            &classes,
            spec.sample_w,
            spec.sample_steps,
            &mut rng,
        )?);
    }
    let images = concat(&parts)?;
    Dataset::new(images, labels)
}

/// Concatenates tensors along the leading axis.
pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| contract!("nothing to concatenate"))?;
    let tail = first.shape()[1..].to_vec();
    let mut data = Vec::new();
    let mut n = 0;
    for p in parts {
        if p.shape()[1..] != tail[..] {
            return Err(contract!("cannot concatenate {:?} with {:?}", p.shape(), first.shape()));
        }
        n += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![n];
    shape.extend(tail);
    Tensor::new(shape, data)
}

/// Deterministic labeled train/validation sets. Sample `i` has class
/// `i mod num_classes`. The base-model generator needs a trained model and
/// its autoencoder.
pub fn gen_dataset(spec: &DatasetSpec, base: Option<(&DiTModel, &ToyAutoencoder)>) -> Result<DataSplit> {
    if spec.num_classes == 0 || spec.per_class == 0 || spec.val_per_class == 0 {
        return Err(Error::Config("dataset counts must be positive".into()));
    }
    match spec.kind {
        GeneratorKind::Procedural => Ok(DataSplit {
            train: procedural(spec, spec.per_class, TRAIN_STREAM)?,
            val: procedural(spec, spec.val_per_class, VAL_STREAM)?,
        }),
        GeneratorKind::BaseModel => {
            let (model, ae) = base
                .ok_or_else(|| Error::State("base-model dataset generation needs a trained base checkpoint".into()))?;
            if model.config().num_classes < spec.num_classes {
                return Err(contract!(
                    "model knows {} classes, dataset wants {}",
                    model.config().num_classes,
                    spec.num_classes
                ));
            }
            Ok(DataSplit {
                train: synthetic(spec, spec.per_class, TRAIN_STREAM, model, ae)?,
                val: synthetic(spec, spec.val_per_class, VAL_STREAM, model, ae)?,
            })
        }
    }
}

/// Latents `[N, c, h, w]` aligned index-by-index with a [`Dataset`].
#[derive(Clone, Debug)]
pub struct LatentSet {
    pub latents: Tensor,
    pub labels: Vec<usize>,
}

impl LatentSet {
    pub fn encode(ae: &ToyAutoencoder, data: &Dataset) -> Result<Self> {
        let n = data.len();
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + 256).min(n);
            let idx: Vec<usize> = (start..end).collect();
            parts.push(ae.encode(&data.subset(&idx)?.images)?);
            start = end;
        }
        Ok(Self {
            latents: concat(&parts)?,
            labels: data.labels.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn latent(&self, i: usize) -> Result<Tensor> {
        self.latents.index0(i)
    }

    /// Stacked latents and labels for the given indices.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let xs: Vec<Tensor> = idx.iter().map(|&i| self.latent(i)).collect::<Result<_>>()?;
        Ok((Tensor::stack(&xs)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Train and validation latents of one latent space.
#[derive(Clone, Debug)]
pub struct LatentData {
    pub train: LatentSet,
    pub val: LatentSet,
}

impl LatentData {
    pub fn encode(ae: &ToyAutoencoder, split: &DataSplit) -> Result<Self> {
        Ok(Self {
            train: LatentSet::encode(ae, &split.train)?,
            val: LatentSet::encode(ae, &split.val)?,
        })
    }
}

/// Nearest-centroid classifier over coarse image features (an `8×8`
/// average-pooled copy of each image).
#[derive(Clone, Debug)]
pub struct CentroidClassifier {
    centroids: Vec<Vec<f64>>,
}

fn features(image: &Tensor) -> Result<Vec<f64>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(contract!("expected an image [3, H, W], got {s:?}"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (gh, gw) = (h.min(8), w.min(8));
    let (bh, bw) = (h / gh, w / gw);
    let mut out = vec![0.0f64; c * gh * gw];
    let d = image.data();
    for ch in 0..c {
        for y in 0..gh * bh {
            for x in 0..gw * bw {
                out[ch * gh * gw + (y / bh) * gw + x / bw] += d[ch * h * w + y * w + x] as f64;
            }
        }
    }
    let norm = (bh * bw) as f64;
    out.iter_mut().for_each(|v| *v /= norm);
    // Mean color of pixels that differ from the corner (background) pixel,
    // weighted to dominate the coarse layout.
    let plane = h * w;
    let corner: Vec<f32> = (0..c).map(|ch| d[ch * plane]).collect();
    let mut color = vec![0.0f64; c];
    let mut n = 0usize;
    for p in 0..plane {
        let diff: f32 = (0..c).map(|ch| (d[ch * plane + p] - corner[ch]).abs()).sum();
        if diff > 0.5 {
            (0..c).for_each(|ch| color[ch] += d[ch * plane + p] as f64);
            n += 1;
        }
    }
    let weight = (gh * gw) as f64;
    out.extend(color.iter().map(|v| weight * v / n.max(1) as f64));
    Ok(out)
}

impl CentroidClassifier {
    pub fn fit(data: &Dataset) -> Result<Self> {
        let k = data.num_classes();
        let mut sums: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut counts = vec![0usize; k];
        for (img, label) in data.iter() {
            let f = features(&img)?;
            if sums.is_empty() {
                sums = vec![vec![0.0; f.len()]; k];
            }
            sums[label].iter_mut().zip(&f).for_each(|(s, v)| *s += v);
            counts[label] += 1;
        }
        if counts.contains(&0) {
            return Err(contract!("every class needs at least one example"));
        }
        let centroids = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect())
            .collect();
        Ok(Self { centroids })
    }

    pub fn classify(&self, image: &Tensor) -> Result<usize> {
        let f = features(image)?;
        let dist = |c: &Vec<f64>| c.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        Ok(self
            .centroids
            .iter()
            .enumerate()
            .min_by(|a, b| dist(a.1).total_cmp(&dist(b.1)))
            .map(|(i, _)| i)
            .expect("at least one class"))
    }

    /// Fraction of `images` `[N, 3, H, W]` classified as their intended label.
    pub fn consistency(&self, images: &Tensor, labels: &[usize]) -> Result<f64> {
        let mut hits = 0;
        for (i, &l) in labels.iter().enumerate() {
            if self.classify(&images.index0(i)?)? == l {
                hits += 1;
            }
        }
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DatasetSpec {
        DatasetSpec {
            per_class: 4,
            val_per_class: 2,
            seed: Some(3),
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn deterministic_and_counted() {
        let a = gen_dataset(&spec(), None).unwrap();
        let b = gen_dataset(&spec(), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 40);
        assert_eq!(a.val.len(), 20);
        assert!(a.train.labels.iter().all(|&l| l < 10));
        assert!(a.train.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_ne!(a.train.images, a.val.images.clone());
    }

    #[test]
    fn base_model_mode_needs_model() {
        let s = DatasetSpec {
            kind: GeneratorKind::BaseModel,
            ..spec()
        };
        assert!(matches!(gen_dataset(&s, None), Err(Error::State(_))));
    }

    #[test]
    fn centroids_separate_procedural_classes() {
        let d = gen_dataset(&spec(), None).unwrap();
        let clf = CentroidClassifier::fit(&d.train).unwrap();
        let acc = clf.consistency(&d.val.images, &d.val.labels).unwrap();
        assert!(acc >= 0.9, "accuracy {acc}");
    }
}

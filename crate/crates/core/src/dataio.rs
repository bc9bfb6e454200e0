//! Synthetic segmentation data, dataset and prediction persistence, and
//! PGM mask export.
//!
//! Images are zero background plus Gaussian noise, with axis-aligned
//! ellipses and rectangles painted on top. A shape of class `c` sets the
//! noiseless intensity of the pixels it covers to `c/C` and their label to
//! `c`; later shapes overwrite earlier ones in both.

use crate::error::{Error, Result};
use crate::metrics::LabelMask;
use crate::tensor::{decode_tsr, encode_tsr, DType, Rng, Tensor};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const DATASET_FORMAT: &str = "ttt-seg-dataset/1";
pub const PREDICTIONS_FORMAT: &str = "ttt-seg-predictions/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    /// Background plus `num_classes − 1` shape classes.
    pub num_classes: usize,
    pub input_channels: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub samples: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 3,
            input_channels: 1,
            min_shapes: 1,
            max_shapes: 3,
            noise_std: 0.1,
            seed: 0,
            samples: 1000,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, m: String| Err(Error::InvalidConfig(format!("{key}: {m}")));
        if self.height < 4 || self.width < 4 {
            return bad("height", format!("image must be at least 4×4, got {}×{}", self.height, self.width));
        }
        if !(2..=256).contains(&self.num_classes) {
            return bad("num_classes", format!("must lie in 2..=256, got {}", self.num_classes));
        }
        if self.input_channels == 0 {
            return bad("input_channels", "must be positive".into());
        }
        if self.min_shapes > self.max_shapes {
            return bad("min_shapes", format!("{} exceeds max_shapes {}", self.min_shapes, self.max_shapes));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std", format!("must be finite and non-negative, got {}", self.noise_std));
        }
        if self.samples == 0 {
            return bad("samples", "must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `inC × H × W`.
    pub image: Tensor,
    /// `H × W` class indices.
    pub labels: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub samples: Vec<Sample>,
}

pub fn sample_id(index: usize) -> String {
    format!("case_{index:05}")
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse { ci: f64, cj: f64, ri: f64, rj: f64 },
    Rect { i0: usize, i1: usize, j0: usize, j1: usize },
}

impl Shape {
    fn random(rng: &mut Rng, h: usize, w: usize) -> Shape {
        let (hf, wf) = (h as f64, w as f64);
        if rng.bernoulli(0.5) {
            let ri = rng.uniform(hf / 10.0, hf / 4.0);
            let rj = rng.uniform(wf / 10.0, wf / 4.0);
            let ci = rng.uniform(ri, hf - 1.0 - ri);
            let cj = rng.uniform(rj, wf - 1.0 - rj);
            Shape::Ellipse { ci, cj, ri, rj }
        } else {
            let sh = (h / 5).max(2) + rng.below((h / 4).max(1));
            let sw = (w / 5).max(2) + rng.below((w / 4).max(1));
            let (sh, sw) = (sh.min(h), sw.min(w));
            let i0 = rng.below(h - sh + 1);
            let j0 = rng.below(w - sw + 1);
            Shape::Rect { i0, i1: i0 + sh, j0, j1: j0 + sw }
        }
    }

    fn contains(&self, i: usize, j: usize) -> bool {
        match *self {
            Shape::Ellipse { ci, cj, ri, rj } => {
                let (di, dj) = ((i as f64 - ci) / ri, (j as f64 - cj) / rj);
                di * di + dj * dj <= 1.0
            }
            Shape::Rect { i0, i1, j0, j1 } => (i0..i1).contains(&i) && (j0..j1).contains(&j),
        }
    }
}

/// Generates sample `index` of `spec`; depends only on `(spec, index)`.
pub fn generate_sample(spec: &SyntheticSpec, index: usize) -> Sample {
    let (h, w, c) = (spec.height, spec.width, spec.num_classes);
    let mut rng = Rng::derive(spec.seed, index as u64);
    let count = spec.min_shapes + rng.below(spec.max_shapes - spec.min_shapes + 1);
    let mut clean = vec![0.0; h * w];
    let mut labels = vec![0.0; h * w];
    for _ in 0..count {
        let class = 1 + rng.below(c - 1);
        let shape = Shape::random(&mut rng, h, w);
        let intensity = class as f64 / c as f64;
        for i in 0..h {
            for j in 0..w {
                if shape.contains(i, j) {
                    clean[i * w + j] = intensity;
                    labels[i * w + j] = class as f64;
                }
            }
        }
    }
    let mut image = Vec::with_capacity(spec.input_channels * h * w);
    for _ in 0..spec.input_channels {
        image.extend(clean.iter().map(|&v| v + spec.noise_std * rng.standard_normal()));
    }
    Sample {
        id: sample_id(index),
        image: Tensor::from_parts(vec![spec.input_channels, h, w], image),
        labels: Tensor::from_parts(vec![h, w], labels),
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.samples).map(|i| generate_sample(spec, i)).collect();
    Ok(Dataset { spec: spec.clone(), samples })
}

impl Dataset {
    /// Stacks the given samples into `N×inC×H×W` images and `N×H×W` labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let imgs: Vec<Tensor> = indices
            .iter()
            .map(|&i| {
                let s = &self.samples[i].image;
                s.reshape([1, s.shape()[0], s.shape()[1], s.shape()[2]])
            })
            .collect::<Result<_>>()?;
        let labs: Vec<Tensor> = indices
            .iter()
            .map(|&i| {
                let l = &self.samples[i].labels;
                l.reshape([1, l.shape()[0], l.shape()[1]])
            })
            .collect::<Result<_>>()?;
        let x = Tensor::concat(&imgs.iter().collect::<Vec<_>>(), 0)?;
        let y = Tensor::concat(&labs.iter().collect::<Vec<_>>(), 0)?;
        Ok((x, y))
    }

    /// Indices of the 80/20 train/validation split by hash of sample id.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.samples.len()).partition(|&i| !is_validation(&self.samples[i].id))
    }
}

/// FNV-1a: every fifth bucket of the id hash is validation.
pub fn is_validation(id: &str) -> bool {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h.is_multiple_of(5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub image: String,
    pub labels: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub spec: SyntheticSpec,
    pub samples: Vec<SampleEntry>,
}

fn check_file_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
        return Err(Error::Consistency(format!("unsafe file name {name:?} in manifest")));
    }
    Ok(())
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(text)?;
        if m.format != DATASET_FORMAT {
            return Err(Error::Consistency(format!("unknown dataset format {:?}", m.format)));
        }
        m.spec.validate()?;
        for s in &m.samples {
            check_file_name(&s.image)?;
            check_file_name(&s.labels)?;
        }
        Ok(m)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_tensor(dir: &Path, file: &str) -> Result<Tensor> {
    let path = dir.join(file);
    if !path.is_file() {
        return Err(Error::Consistency(format!("manifest lists missing file {file}")));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(decode_tsr(&bytes)?.tensor)
}

pub fn save_dataset(d: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(d.samples.len());
    for s in &d.samples {
        let e = SampleEntry { id: s.id.clone(), image: format!("{}_image.tsr", s.id), labels: format!("{}_labels.tsr", s.id) };
        check_file_name(&e.image)?;
        let p = dir.join(&e.image);
        fs::write(&p, encode_tsr(&s.image, DType::F64)?).map_err(|err| Error::io(&p, err))?;
        let p = dir.join(&e.labels);
        fs::write(&p, encode_tsr(&s.labels, DType::U8)?).map_err(|err| Error::io(&p, err))?;
        entries.push(e);
    }
    let m = DatasetManifest { format: DATASET_FORMAT.into(), spec: d.spec.clone(), samples: entries };
    write_json(&dir.join(MANIFEST_FILE), &m)
}

/// Loads a dataset; either every sample is read and verified or an error
/// is returned.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m = DatasetManifest::parse(&text)?;
    let spec = m.spec;
    let mut samples = Vec::with_capacity(m.samples.len());
    for e in &m.samples {
        let image = read_tensor(dir, &e.image)?;
        let labels = read_tensor(dir, &e.labels)?;
        if image.shape() != [spec.input_channels, spec.height, spec.width] {
            return Err(Error::Consistency(format!(
                "{}: image shape {:?}, manifest says {:?}",
                e.image,
                image.shape(),
                [spec.input_channels, spec.height, spec.width]
            )));
        }
        if labels.shape() != [spec.height, spec.width] {
            return Err(Error::Consistency(format!(
                "{}: label shape {:?}, manifest says {:?}",
                e.labels,
                labels.shape(),
                [spec.height, spec.width]
            )));
        }
        if labels.data().iter().any(|&l| l >= spec.num_classes as f64) {
            return Err(Error::Consistency(format!("{}: label outside 0..{}", e.labels, spec.num_classes)));
        }
        samples.push(Sample { id: e.id.clone(), image, labels });
    }
    Ok(Dataset { spec, samples })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionEntry {
    pub id: String,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionsManifest {
    pub format: String,
    pub num_classes: usize,
    pub masks: Vec<PredictionEntry>,
}

pub fn save_predictions(masks: &[(String, LabelMask)], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let num_classes = masks.first().map_or(2, |(_, m)| m.num_classes());
    let mut entries = Vec::with_capacity(masks.len());
    for (id, m) in masks {
        let file = format!("{id}_pred.tsr");
        check_file_name(&file)?;
        let p = dir.join(&file);
        fs::write(&p, encode_tsr(&m.to_tensor(), DType::U8)?).map_err(|e| Error::io(&p, e))?;
        entries.push(PredictionEntry { id: id.clone(), file });
    }
    let m = PredictionsManifest { format: PREDICTIONS_FORMAT.into(), num_classes, masks: entries };
    write_json(&dir.join(MANIFEST_FILE), &m)
}

pub fn load_predictions(dir: &Path) -> Result<Vec<(String, LabelMask)>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: PredictionsManifest = serde_json::from_str(&text)?;
    if m.format != PREDICTIONS_FORMAT {
        return Err(Error::Consistency(format!("unknown predictions format {:?}", m.format)));
    }
    m.masks
        .iter()
        .map(|e| {
            check_file_name(&e.file)?;
            let t = read_tensor(dir, &e.file)?;
            let mask = LabelMask::from_tensor(&t, m.num_classes)
                .map_err(|err| Error::Consistency(format!("{}: {err}", e.file)))?;
            Ok((e.id.clone(), mask))
        })
        .collect()
}

/// Binary PGM bytes with class `c` drawn as `⌊255·c/(C−1)⌋`.
pub fn mask_to_pgm(mask: &LabelMask) -> Result<Vec<u8>> {
    let c = mask.num_classes();
    if c > 256 {
        return Err(Error::InvalidArgument(format!("PGM export supports at most 256 classes, got {c}")));
    }
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    let denom = (c.max(2) - 1) as u64;
    out.extend(mask.labels().iter().map(|&l| (255 * l as u64 / denom) as u8));
    Ok(out)
}

pub fn export_mask_pgm(mask: &LabelMask, path: &Path) -> Result<()> {
    let bytes = mask_to_pgm(mask)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(samples: usize) -> SyntheticSpec {
        SyntheticSpec { height: 16, width: 16, samples, seed: 7, ..Default::default() }
    }

    #[test]
    fn empty_scene() {
        let spec = SyntheticSpec { noise_std: 0.0, min_shapes: 0, max_shapes: 0, ..small(3) };
        let d = generate(&spec).unwrap();
        for s in &d.samples {
            assert!(s.image.data().iter().all(|&v| v == 0.0));
            assert!(s.labels.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn deterministic_and_per_sample_seeded() {
        let a = generate(&small(5)).unwrap();
        assert_eq!(a, generate(&small(5)).unwrap());
        assert_eq!(generate_sample(&small(5), 3), a.samples[3]);
        assert_ne!(a.samples[0], a.samples[1]);
    }

    #[test]
    fn class_coverage() {
        let spec = SyntheticSpec { samples: 1000, ..small(0) };
        let d = generate(&spec).unwrap();
        for c in 0..3 {
            assert!(d.samples.iter().any(|s| s.labels.data().contains(&(c as f64))), "class {c}");
        }
    }

    #[test]
    fn shapes_are_brighter_than_background() {
        let spec = SyntheticSpec { noise_std: 0.0, ..small(50) };
        for s in generate(&spec).unwrap().samples {
            for (&v, &l) in s.image.data().iter().zip(s.labels.data()) {
                if l > 0.0 {
                    assert_eq!(v, l / 3.0);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn invalid_spec_names_key() {
        let spec = SyntheticSpec { num_classes: 1, ..small(2) };
        assert!(matches!(generate(&spec), Err(Error::InvalidConfig(m)) if m.starts_with("num_classes")));
        let spec = SyntheticSpec { noise_std: -1.0, ..small(2) };
        assert!(matches!(generate(&spec), Err(Error::InvalidConfig(m)) if m.starts_with("noise_std")));
    }

    #[test]
    fn split_is_roughly_eighty_twenty() {
        let d = generate(&SyntheticSpec { samples: 1000, height: 4, width: 4, ..Default::default() }).unwrap();
        let (train, val) = d.split();
        assert_eq!(train.len() + val.len(), 1000);
        assert!((150..250).contains(&val.len()), "{}", val.len());
        assert_eq!(d.split(), (train, val));
    }

    #[test]
    fn dataset_round_trip() {
        let d = generate(&small(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), d);
    }

    #[test]
    fn missing_and_truncated_files() {
        let d = generate(&small(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let p = dir.path().join("case_00001_image.tsr");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..20]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
        fs::remove_file(&p).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Consistency(m)) => assert!(m.contains("case_00001_image.tsr")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn predictions_round_trip() {
        let m = LabelMask::from_indices(2, 3, vec![0, 1, 2, 2, 1, 0], 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_predictions(&[("a".into(), m.clone())], dir.path()).unwrap();
        assert_eq!(load_predictions(dir.path()).unwrap(), vec![("a".to_string(), m)]);
    }

    #[test]
    fn pgm_encoding() {
        let bg = LabelMask::from_indices(64, 64, vec![0; 64 * 64], 2).unwrap();
        let bytes = mask_to_pgm(&bg).unwrap();
        assert!(bytes.starts_with(b"P5\n64 64\n255\n"));
        assert!(bytes[13..].iter().all(|&b| b == 0));
        assert_eq!(bytes.len(), 13 + 64 * 64);
        let fg = LabelMask::from_indices(1, 2, vec![1, 0], 2).unwrap();
        assert_eq!(&mask_to_pgm(&fg).unwrap()[11..], &[255, 0]);
        let three = LabelMask::from_indices(1, 3, vec![0, 1, 2], 3).unwrap();
        assert_eq!(&mask_to_pgm(&three).unwrap()[11..], &[0, 127, 255]);
        let many = LabelMask::from_indices(1, 1, vec![0], 300).unwrap();
        assert!(matches!(mask_to_pgm(&many), Err(Error::InvalidArgument(_))));
    }
}

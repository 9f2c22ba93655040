//! Feature and label files, dataset manifests and the synthetic
//! planted-offset generator.
//!
//! Feature file (`TGMF`), little-endian:
//!
//! ```text
//! offset 0   magic  b"TGMF"
//! offset 4   u32    version (1)
//! offset 8   u32    c
//! offset 12  u32    d
//! offset 16  u32    t
//! offset 20  f32 × c·d·t, c-major, then d, then t
//! ```
//!
//! Label file (`TGML`): magic, u32 version (1), u32 num_classes, u32 t, then
//! `t · num_classes` bytes, each 0 or 1, frame-major.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Result, Scalar, TgmError};

pub const FEATURE_MAGIC: &[u8; 4] = b"TGMF";
pub const LABEL_MAGIC: &[u8; 4] = b"TGML";
pub const FORMAT_VERSION: u32 = 1;

/// A `C × D × T` feature tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<S> {
    pub values: Array3<S>,
}

impl<S: Scalar> FeatureSequence<S> {
    pub fn new(values: Array3<S>) -> Result<Self> {
        if values.dim().2 == 0 {
            return Err(TgmError::config("a feature sequence needs at least one frame"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TgmError::config("feature values must be finite"));
        }
        Ok(Self {
            values: values.as_standard_layout().into_owned(),
        })
    }

    /// A single-channel sequence from a `D × T` matrix.
    pub fn from_frames(frames: Array2<S>) -> Result<Self> {
        Self::new(frames.insert_axis(ndarray::Axis(0)))
    }

    pub fn c(&self) -> usize {
        self.values.dim().0
    }

    pub fn d(&self) -> usize {
        self.values.dim().1
    }

    pub fn t(&self) -> usize {
        self.values.dim().2
    }
}

/// Multi-hot ground truth, `z[[t, class]]` in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameLabels {
    pub z: Array2<u8>,
}

impl FrameLabels {
    pub fn new(z: Array2<u8>) -> Result<Self> {
        if z.iter().any(|&v| v > 1) {
            return Err(TgmError::config("labels must be 0 or 1"));
        }
        if z.nrows() == 0 {
            return Err(TgmError::config("labels need at least one frame"));
        }
        Ok(Self {
            z: z.as_standard_layout().into_owned(),
        })
    }

    pub fn zeros(t: usize, num_classes: usize) -> Self {
        Self {
            z: Array2::zeros((t, num_classes)),
        }
    }

    pub fn t(&self) -> usize {
        self.z.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.z.ncols()
    }

    pub fn positives(&self, class: usize) -> usize {
        self.z.column(class).iter().map(|&v| v as usize).sum()
    }
}

/// One video: features plus aligned labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<S> {
    pub features: FeatureSequence<S>,
    pub labels: FrameLabels,
}

impl<S: Scalar> Sample<S> {
    pub fn new(features: FeatureSequence<S>, labels: FrameLabels) -> Result<Self> {
        if features.t() != labels.t() {
            return Err(TgmError::config(format!(
                "features have {} frames but labels have {}",
                features.t(),
                labels.t()
            )));
        }
        Ok(Self { features, labels })
    }
}

// --- binary formats ---------------------------------------------------------

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(TgmError::format(
                self.pos as u64,
                format!("truncated: expected {n} bytes of {what}, {} remain", self.bytes.len() - self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expect {
            return Err(TgmError::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expect)
                ),
            ));
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn version(&mut self, expect: u32) -> Result<()> {
        let at = self.pos as u64;
        let v = self.u32("version")?;
        if v != expect {
            return Err(TgmError::format(at, format!("unsupported version {v}, expected {expect}")));
        }
        Ok(())
    }

    fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(TgmError::format(
                self.pos as u64,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn dim_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| TgmError::config(format!("{what} = {value} does not fit in u32")))
}

pub fn encode_features<S: Scalar>(seq: &FeatureSequence<S>) -> Result<Vec<u8>> {
    let (c, d, t) = seq.values.dim();
    let mut out = Vec::with_capacity(20 + 4 * seq.values.len());
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [FORMAT_VERSION, dim_u32(c, "c")?, dim_u32(d, "d")?, dim_u32(t, "t")?] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in seq.values.iter() {
        let x = v.to_f32().unwrap_or(f32::NAN);
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features<S: Scalar>(bytes: &[u8]) -> Result<FeatureSequence<S>> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let c = r.u32("c")? as usize;
    let d = r.u32("d")? as usize;
    let t_at = r.offset();
    let t = r.u32("t")? as usize;
    if t == 0 {
        return Err(TgmError::format(t_at, "t must be at least 1"));
    }
    let count = c
        .checked_mul(d)
        .and_then(|n| n.checked_mul(t))
        .ok_or_else(|| TgmError::format(8, "dimensions overflow"))?;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.offset();
        let x = f32::from_le_bytes(r.take(4, "feature values")?.try_into().expect("4 bytes"));
        if !x.is_finite() {
            return Err(TgmError::format(at, format!("non-finite feature value {x}")));
        }
        values.push(S::from_f32(x).expect("f32 converts to Scalar"));
    }
    r.finish()?;
    let values = Array3::from_shape_vec((c, d, t), values).expect("count matches shape");
    Ok(FeatureSequence { values })
}

pub fn save_features<S: Scalar>(path: impl AsRef<Path>, seq: &FeatureSequence<S>) -> Result<()> {
    fs::write(path, encode_features(seq)?)?;
    Ok(())
}

pub fn load_features<S: Scalar>(path: impl AsRef<Path>) -> Result<FeatureSequence<S>> {
    decode_features(&fs::read(path)?)
}

pub fn encode_labels(labels: &FrameLabels) -> Result<Vec<u8>> {
    let (t, n) = labels.z.dim();
    let mut out = Vec::with_capacity(16 + t * n);
    out.extend_from_slice(LABEL_MAGIC);
    for v in [FORMAT_VERSION, dim_u32(n, "num_classes")?, dim_u32(t, "t")?] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(labels.z.iter().copied());
    Ok(out)
}

pub fn decode_labels(bytes: &[u8]) -> Result<FrameLabels> {
    let mut r = Reader::new(bytes);
    r.magic(LABEL_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let n = r.u32("num_classes")? as usize;
    let t_at = r.offset();
    let t = r.u32("t")? as usize;
    if t == 0 {
        return Err(TgmError::format(t_at, "t must be at least 1"));
    }
    let count = t
        .checked_mul(n)
        .ok_or_else(|| TgmError::format(8, "dimensions overflow"))?;
    let start = r.offset();
    let body = r.take(count, "label bytes")?;
    if let Some(i) = body.iter().position(|&b| b > 1) {
        return Err(TgmError::format(start + i as u64, format!("label byte {} is not 0 or 1", body[i])));
    }
    r.finish()?;
    let z = Array2::from_shape_vec((t, n), body.to_vec()).expect("count matches shape");
    Ok(FrameLabels { z })
}

pub fn save_labels(path: impl AsRef<Path>, labels: &FrameLabels) -> Result<()> {
    fs::write(path, encode_labels(labels)?)?;
    Ok(())
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<FrameLabels> {
    decode_labels(&fs::read(path)?)
}

// --- manifests ----------------------------------------------------------------

/// One manifest entry; relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub features: PathBuf,
    pub labels: PathBuf,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let entries: Vec<ManifestEntry> = serde_json::from_slice(&fs::read(path)?)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(entries
        .into_iter()
        .map(|e| ManifestEntry {
            features: base.join(e.features),
            labels: base.join(e.labels),
        })
        .collect())
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(entries)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Loads every pair listed in a manifest, checking frame counts agree.
pub fn load_dataset<S: Scalar>(manifest: impl AsRef<Path>) -> Result<Vec<Sample<S>>> {
    read_manifest(manifest)?
        .iter()
        .map(|e| Sample::new(load_features(&e.features)?, load_labels(&e.labels)?))
        .collect()
}

/// Writes `video_NNNN.tgmf`/`.tgml` pairs and `manifest.json` into `dir`
/// and returns the manifest path.
pub fn save_dataset<S: Scalar>(dir: impl AsRef<Path>, samples: &[Sample<S>]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let entry = ManifestEntry {
            features: PathBuf::from(format!("video_{i:04}.tgmf")),
            labels: PathBuf::from(format!("video_{i:04}.tgml")),
        };
        save_features(dir.join(&entry.features), &sample.features)?;
        save_labels(dir.join(&entry.labels), &sample.labels)?;
        entries.push(entry);
    }
    let manifest = dir.join("manifest.json");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Deterministic 80/20 split of video indices: `(train, validation)`.
pub fn split_train_val(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_val = if n >= 2 { (n / 5).max(1) } else { 0 };
    let val = idx.split_off(n - n_val);
    (idx, val)
}

// --- synthetic generator -------------------------------------------------------

/// Parameters of the planted-offset benchmark.
///
/// An event of class `c` adds that class's trigger direction to the features
/// during `[t0, t0 + duration)` and marks class `c` active during
/// `[t0 + delay_c, t0 + delay_c + duration)`. Trigger directions are random
/// orthonormal vectors derived from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_videos: usize,
    pub d: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub num_classes: usize,
    pub delays: Vec<usize>,
    pub duration: usize,
    pub noise_std: f64,
    pub events_per_video: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_videos: 200,
            d: 16,
            t_min: 80,
            t_max: 120,
            num_classes: 5,
            delays: vec![0, 2, 4, 6, 8],
            duration: 3,
            noise_std: 0.5,
            events_per_video: 6,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TgmError::config(m));
        if self.num_videos == 0 || self.d == 0 || self.num_classes == 0 || self.duration == 0 {
            return bad("num_videos, d, num_classes and duration must be positive".into());
        }
        if self.t_min == 0 || self.t_min > self.t_max {
            return bad(format!("need 1 <= t_min <= t_max, got {}..{}", self.t_min, self.t_max));
        }
        if self.delays.len() != self.num_classes {
            return bad(format!("{} delays for {} classes", self.delays.len(), self.num_classes));
        }
        if self.num_classes > self.d {
            return bad(format!(
                "{} orthogonal trigger directions do not fit in d = {}",
                self.num_classes, self.d
            ));
        }
        if let Some(&delay) = self.delays.iter().find(|&&dl| dl + self.duration >= self.t_min) {
            return bad(format!(
                "delay {delay} + duration {} must be below t_min {}",
                self.duration, self.t_min
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!("noise_std must be finite and nonnegative, got {}", self.noise_std));
        }
        Ok(())
    }
}

/// A generated dataset together with the planted trigger directions.
#[derive(Debug, Clone)]
pub struct Synthetic<S> {
    /// `num_classes × d`, orthonormal rows.
    pub directions: Array2<f64>,
    pub samples: Vec<Sample<S>>,
}

fn orthonormal_rows<R: Rng>(count: usize, d: usize, rng: &mut R) -> Array2<f64> {
    let mut rows = Array2::<f64>::zeros((count, d));
    let mut i = 0;
    while i < count {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for j in 0..i {
            let dot: f64 = rows.row(j).iter().zip(&v).map(|(a, b)| a * b).sum();
            for (x, r) in v.iter_mut().zip(rows.row(j)) {
                *x -= dot * r;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        for (slot, x) in rows.row_mut(i).iter_mut().zip(v) {
            *slot = x / norm;
        }
        i += 1;
    }
    rows
}

/// Generates the planted-offset dataset. Feature values are rounded through
/// `f32`, so the in-memory data equals what a `TGMF` round trip returns.
pub fn gen_synthetic<S: Scalar>(spec: &SynthSpec) -> Result<Synthetic<S>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let directions = orthonormal_rows(spec.num_classes, spec.d, &mut rng);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| TgmError::config(e.to_string()))?;
    let mut samples = Vec::with_capacity(spec.num_videos);
    for _ in 0..spec.num_videos {
        let t = rng.random_range(spec.t_min..=spec.t_max);
        let mut frames = Array2::<f64>::from_shape_simple_fn((spec.d, t), || noise.sample(&mut rng));
        let mut z = Array2::<u8>::zeros((t, spec.num_classes));
        for _ in 0..spec.events_per_video {
            let class = rng.random_range(0..spec.num_classes);
            let delay = spec.delays[class];
            let t0 = rng.random_range(0..=t - delay - spec.duration);
            for tt in t0..t0 + spec.duration {
                for (dd, &u) in directions.row(class).iter().enumerate() {
                    frames[[dd, tt]] += u;
                }
                z[[tt + delay, class]] = 1;
            }
        }
        let values = frames.mapv(|v| S::from_f32(v as f32).expect("f32 converts to Scalar"));
        samples.push(Sample::new(FeatureSequence::from_frames(values)?, FrameLabels::new(z)?)?);
    }
    Ok(Synthetic { directions, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_features() -> FeatureSequence<f64> {
        let values = Array3::from_shape_fn((1, 4, 7), |(_, d, t)| (d as f64 - 1.5) * 0.37 + t as f64 * 1.25);
        FeatureSequence::new(values).unwrap()
    }

    #[test]
    fn header_only_file_truncates_at_20() {
        let bytes = encode_features(&sample_features()).unwrap();
        match decode_features::<f64>(&bytes[..20]) {
            Err(TgmError::Format { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_features(&sample_features()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_features::<f64>(&bytes), Err(TgmError::Format { offset: 0, .. })));
        let mut bytes = encode_features(&sample_features()).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode_features::<f64>(&bytes), Err(TgmError::Format { offset: 4, .. })));
        let mut bytes = encode_features(&sample_features()).unwrap();
        bytes.push(0);
        assert!(matches!(decode_features::<f64>(&bytes), Err(TgmError::Format { offset: 132, .. })));
    }

    #[test]
    fn label_byte_out_of_range() {
        let mut labels = FrameLabels::zeros(3, 2);
        labels.z[[1, 1]] = 1;
        let mut bytes = encode_labels(&labels).unwrap();
        assert_eq!(decode_labels(&bytes).unwrap(), labels);
        bytes[16 + 4] = 2;
        assert!(matches!(decode_labels(&bytes), Err(TgmError::Format { offset: 20, .. })));
        assert!(FrameLabels::new(Array2::from_elem((2, 2), 3)).is_err());
    }

    #[test]
    fn frame_mismatch_detected() {
        assert!(Sample::new(sample_features(), FrameLabels::zeros(6, 2)).is_err());
        assert!(Sample::new(sample_features(), FrameLabels::zeros(7, 2)).is_ok());
    }

    #[test]
    fn spec_validation() {
        assert!(SynthSpec::default().validate().is_ok());
        let mut s = SynthSpec::default();
        s.delays[4] = 77;
        assert!(s.validate().is_err());
        let s = SynthSpec {
            num_classes: 17,
            delays: vec![0; 17],
            ..Default::default()
        };
        assert!(s.validate().is_err());
        let s: std::result::Result<SynthSpec, _> = serde_json::from_str(r#"{"num_videos": 3, "bogus": 1}"#);
        assert!(s.is_err());
    }

    #[test]
    fn directions_are_orthonormal() {
        let syn = gen_synthetic::<f64>(&SynthSpec {
            num_videos: 2,
            ..SynthSpec::default()
        })
        .unwrap();
        let gram = syn.directions.dot(&syn.directions.t());
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn split_is_eighty_twenty() {
        let (train, val) = split_train_val(200, 5);
        assert_eq!((train.len(), val.len()), (160, 40));
        let mut all: Vec<_> = train.iter().chain(&val).copied().collect();
        all.sort();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        assert_eq!(split_train_val(200, 5), (train, val));
    }
}

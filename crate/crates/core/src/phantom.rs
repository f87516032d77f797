//! Synthetic brain-like phantom slices, anomaly injection and dataset files.
//!
//! A phantom is an ellipse of tissue on a zero background. The interior is a
//! smooth field (a few low-frequency cosines around 1.0) plus fine texture.
//! Anomalies are rendered fully inside the ellipse.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

pub use crate::codec::{load_tensor, save_tensor};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeedStream};
use crate::tensor::Tensor;

const MAX_PLACEMENT_TRIES: usize = 100;
const MAX_ANOMALY_SEEDS: u64 = 16;
const SPLIT_STRIDE: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Normal,
    Anomalous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Square,
    /// Annulus with inner radius `0.6 r`.
    Ring,
    /// Gaussian bump with standard deviation `r / 2`, cut at radius `r`.
    Blob,
}

impl ShapeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::Disc => "disc",
            ShapeKind::Square => "square",
            ShapeKind::Ring => "ring",
            ShapeKind::Blob => "blob",
        }
    }
}

/// Which kind of anomaly the test split receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnomalyFamily {
    /// Hard-edged discs, squares and rings.
    Objects,
    /// Smooth blobs with graded edges.
    Blobs,
}

impl fmt::Display for AnomalyFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnomalyFamily::Objects => "objects",
            AnomalyFamily::Blobs => "blobs",
        })
    }
}

impl FromStr for AnomalyFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "objects" => Ok(AnomalyFamily::Objects),
            "blobs" => Ok(AnomalyFamily::Blobs),
            other => Err(Error::Config(format!(
                "unknown anomaly family {other:?} (expected objects or blobs)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnomalyMeta {
    pub kind: ShapeKind,
    /// `(row, col)` in pixel units.
    pub center: (f64, f64),
    pub radius: f64,
    /// Signed offset added at full strength, in standardized units.
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    /// `(1, S, S)`.
    pub image: Tensor,
    /// Row-major `S * S` foreground mask.
    pub mask: Vec<bool>,
    pub label: Label,
    pub seed: u64,
    pub anomaly: Option<AnomalyMeta>,
}

impl PhantomSample {
    pub fn size(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Unstandardized phantom: tissue around 1.0, background exactly 0.
pub fn generate_phantom(seed: u64, size: usize) -> Result<PhantomSample> {
    if size == 0 || !size.is_multiple_of(16) {
        return Err(Error::Invalid(format!(
            "phantom size must be a positive multiple of 16, got {size}"
        )));
    }
    let s = size as f64;
    let mut rng = SeedStream::new(seed);

    let a = rng.uniform_in(0.34, 0.44) * s;
    let b = rng.uniform_in(0.30, 0.40) * s;
    let theta = rng.uniform_in(0.0, PI);
    let (cy, cx) = (
        s / 2.0 + rng.uniform_in(-0.03, 0.03) * s,
        s / 2.0 + rng.uniform_in(-0.03, 0.03) * s,
    );
    let (sin, cos) = theta.sin_cos();

    let mut mask = vec![false; size * size];
    for r in 0..size {
        for c in 0..size {
            let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            mask[r * size + c] = (u / a).powi(2) + (v / b).powi(2) <= 1.0;
        }
    }

    let n_waves = rng.int_in(3, 6);
    let waves: Vec<(f64, f64, f64, f64)> = (0..n_waves)
        .map(|_| {
            let cycles = rng.uniform_in(0.5, 2.0);
            let dir = rng.uniform_in(0.0, 2.0 * PI);
            let amp = rng.uniform_in(0.05, 0.2);
            let phase = rng.uniform_in(0.0, 2.0 * PI);
            (
                2.0 * PI * cycles * dir.cos() / s,
                2.0 * PI * cycles * dir.sin() / s,
                amp,
                phase,
            )
        })
        .collect();

    let noise: Vec<f64> = (0..size * size).map(|_| 0.15 * rng.normal()).collect();
    let mut data = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let i = r * size + c;
            if !mask[i] {
                continue;
            }
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let field: f64 = 1.0
                + waves
                    .iter()
                    .map(|&(kx, ky, amp, ph)| amp * (kx * x + ky * y + ph).cos())
                    .sum::<f64>();
            let mut tex = 0.0;
            let mut cnt = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < size && (cc as usize) < size {
                        tex += noise[rr as usize * size + cc as usize];
                        cnt += 1.0;
                    }
                }
            }
            data[i] = field + tex / cnt;
        }
    }
    Ok(PhantomSample {
        image: Tensor::new(vec![1, size, size], data)?,
        mask,
        label: Label::Normal,
        seed,
        anomaly: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnomalyConfig {
    pub family: AnomalyFamily,
    /// Radius range as fractions of the image size.
    pub radius_frac: (f64, f64),
    /// Magnitude range of the intensity offset; the sign is random.
    pub offset: (f64, f64),
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        AnomalyConfig {
            family: AnomalyFamily::Objects,
            radius_frac: (0.08, 0.20),
            offset: (1.0, 2.0),
        }
    }
}

impl AnomalyConfig {
    pub fn with_family(family: AnomalyFamily) -> Self {
        AnomalyConfig {
            family,
            ..AnomalyConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.offset;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Invalid(format!(
                "anomaly offset range must satisfy 0 < lo <= hi, got {:?}",
                self.offset
            )));
        }
        let (rlo, rhi) = self.radius_frac;
        if !(rlo > 0.0 && rlo <= rhi && rhi < 0.5) {
            return Err(Error::Invalid(format!(
                "anomaly radius range must satisfy 0 < lo <= hi < 0.5, got {:?}",
                self.radius_frac
            )));
        }
        Ok(())
    }
}

/// Strength in `[0, 1]` of a shape at pixel offset `(dy, dx)` from its center; 0 is outside.
fn shape_weight(kind: ShapeKind, dy: f64, dx: f64, r: f64) -> f64 {
    let d2 = dy * dy + dx * dx;
    match kind {
        ShapeKind::Disc => f64::from(u8::from(d2 <= r * r)),
        ShapeKind::Square => f64::from(u8::from(dy.abs() <= r && dx.abs() <= r)),
        ShapeKind::Ring => f64::from(u8::from(d2 <= r * r && d2 >= (0.6 * r).powi(2))),
        ShapeKind::Blob => {
            if d2 <= r * r {
                (-d2 / (2.0 * (r / 2.0).powi(2))).exp()
            } else {
                0.0
            }
        }
    }
}

/// Pixels covered by a shape, with their weights.
fn footprint(kind: ShapeKind, center: (f64, f64), r: f64, size: usize) -> Option<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    let lo_r = (center.0 - r - 1.0).floor().max(0.0) as usize;
    let lo_c = (center.1 - r - 1.0).floor().max(0.0) as usize;
    let hi_r = ((center.0 + r + 1.0).ceil() as usize).min(size);
    let hi_c = ((center.1 + r + 1.0).ceil() as usize).min(size);
    // shapes touching the border are rejected by the caller through the mask check
    for row in lo_r..hi_r {
        for col in lo_c..hi_c {
            let w = shape_weight(kind, row as f64 + 0.5 - center.0, col as f64 + 0.5 - center.1, r);
            if w > 0.0 {
                out.push((row * size + col, w));
            }
        }
    }
    (!out.is_empty()).then_some(out)
}

/// Renders one random shape fully inside the foreground and marks the sample anomalous.
pub fn inject_anomaly(sample: &PhantomSample, seed: u64, cfg: &AnomalyConfig) -> Result<PhantomSample> {
    cfg.validate()?;
    if sample.label != Label::Normal {
        return Err(Error::Invalid("inject_anomaly expects a normal sample".into()));
    }
    let size = sample.size();
    let s = size as f64;
    let mut rng = SeedStream::new(seed);
    let kind = match cfg.family {
        AnomalyFamily::Objects => [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Ring][rng.int_in(0, 2)],
        AnomalyFamily::Blobs => ShapeKind::Blob,
    };
    let radius = rng.uniform_in(cfg.radius_frac.0, cfg.radius_frac.1) * s;
    let magnitude = rng.uniform_in(cfg.offset.0, cfg.offset.1);
    let intensity = if rng.uniform() < 0.5 { -magnitude } else { magnitude };

    for _ in 0..MAX_PLACEMENT_TRIES {
        let center = (rng.uniform_in(radius, s - radius), rng.uniform_in(radius, s - radius));
        let Some(fp) = footprint(kind, center, radius, size) else {
            continue;
        };
        // shapes must not reach the image border (their footprint would be clipped)
        let clipped =
            center.0 - radius < 0.0 || center.1 - radius < 0.0 || center.0 + radius > s || center.1 + radius > s;
        if clipped || !fp.iter().all(|&(i, _)| sample.mask[i]) {
            continue;
        }
        let mut out = sample.clone();
        let data = out.image.data_mut();
        for (i, w) in fp {
            data[i] += intensity * w;
        }
        out.label = Label::Anomalous;
        out.anomaly = Some(AnomalyMeta {
            kind,
            center,
            radius,
            intensity,
        });
        return Ok(out);
    }
    Err(Error::AnomalyDoesNotFit {
        tries: MAX_PLACEMENT_TRIES,
    })
}

/// Affine map to zero mean and unit variance, fitted on the training split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

impl Standardization {
    pub fn fit(images: &[&Tensor]) -> Result<Self> {
        let n: usize = images.iter().map(|t| t.numel()).sum();
        if n == 0 {
            return Err(Error::Invalid("cannot standardize an empty set".into()));
        }
        let mean = images.iter().map(|t| t.sum()).sum::<f64>() / n as f64;
        let var = images
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        if !(var > 0.0) {
            return Err(Error::Numerical("training images have zero variance".into()));
        }
        Ok(Standardization { mean, std: var.sqrt() })
    }

    pub fn apply(&self, t: &Tensor) -> Tensor {
        t.map(|v| (v - self.mean) / self.std)
    }

    /// Value of a raw zero pixel after standardization.
    pub fn zero_level(&self) -> f64 {
        -self.mean / self.std
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub anomaly_fraction: f64,
    pub image_size: usize,
    pub master_seed: u64,
    pub family: AnomalyFamily,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_train: 2000,
            n_val: 0,
            n_test: 400,
            anomaly_fraction: 0.5,
            image_size: 32,
            master_seed: 0,
            family: AnomalyFamily::Objects,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.anomaly_fraction) {
            return Err(Error::Config(format!(
                "anomaly_fraction must lie in [0, 1], got {}",
                self.anomaly_fraction
            )));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 16, got {}",
                self.image_size
            )));
        }
        if self.n_train.max(self.n_val).max(self.n_test) as u64 >= SPLIT_STRIDE {
            return Err(Error::Config("split sizes must stay below 2^40".into()));
        }
        Ok(())
    }

    /// Number of anomalous test slices.
    pub fn n_anomalous(&self) -> usize {
        (self.anomaly_fraction * self.n_test as f64).round() as usize
    }

    /// Seed of slice `index` in split `split` (0 train, 1 val, 2 test); splits never share seeds.
    pub fn slice_seed(&self, split: u64, index: usize) -> u64 {
        self.master_seed
            .wrapping_add(split * SPLIT_STRIDE)
            .wrapping_add(index as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub standardization: Standardization,
}

impl DatasetManifest {
    pub fn to_kv(&self) -> KeyValues {
        let s = &self.spec;
        let mut kv = KeyValues::new();
        kv.set("format", "pchvae-dataset-1");
        kv.set("n_train", s.n_train);
        kv.set("n_val", s.n_val);
        kv.set("n_test", s.n_test);
        kv.set("anomaly_fraction", s.anomaly_fraction);
        kv.set("image_size", s.image_size);
        kv.set("master_seed", s.master_seed);
        kv.set("anomaly_family", s.family);
        kv.set("standardization_mean", self.standardization.mean);
        kv.set("standardization_std", self.standardization.std);
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let spec = DatasetSpec {
            n_train: kv.require("n_train")?,
            n_val: kv.require("n_val")?,
            n_test: kv.require("n_test")?,
            anomaly_fraction: kv.require("anomaly_fraction")?,
            image_size: kv.require("image_size")?,
            master_seed: kv.require("master_seed")?,
            family: kv.require("anomaly_family")?,
        };
        spec.validate()?;
        Ok(DatasetManifest {
            spec,
            standardization: Standardization {
                mean: kv.require("standardization_mean")?,
                std: kv.require("standardization_std")?,
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// `(n_train, 1, S, S)`, standardized.
    pub train: Tensor,
    pub val: Option<Tensor>,
    pub test: Tensor,
    pub test_labels: Vec<Label>,
    pub test_meta: Vec<Option<AnomalyMeta>>,
}

fn split_images(spec: &DatasetSpec, split: u64, n: usize) -> Result<Vec<PhantomSample>> {
    (0..n)
        .map(|i| generate_phantom(spec.slice_seed(split, i), spec.image_size))
        .collect()
}

fn stack_images(samples: &[PhantomSample]) -> Result<Tensor> {
    let imgs: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    Tensor::stack(&imgs)
}

/// Builds every split from `spec`; the result depends on nothing else.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let train_raw = split_images(spec, 0, spec.n_train)?;
    let standardization = Standardization::fit(&train_raw.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let standardize = |mut v: Vec<PhantomSample>| {
        for s in &mut v {
            s.image = standardization.apply(&s.image);
        }
        v
    };
    let train = stack_images(&standardize(train_raw))?;
    let val = if spec.n_val > 0 {
        Some(stack_images(&standardize(split_images(spec, 1, spec.n_val)?))?)
    } else {
        None
    };

    let mut test = standardize(split_images(spec, 2, spec.n_test)?);
    let order = SeedStream::new(derive_seed(spec.master_seed, &[3])).permutation(spec.n_test);
    let cfg = AnomalyConfig::with_family(spec.family);
    for &i in &order[..spec.n_anomalous()] {
        let mut last = None;
        for attempt in 0..MAX_ANOMALY_SEEDS {
            match inject_anomaly(&test[i], derive_seed(test[i].seed, &[4, attempt]), &cfg) {
                Ok(s) => {
                    last = Some(Ok(s));
                    break;
                }
                Err(e @ Error::AnomalyDoesNotFit { .. }) => last = Some(Err(e)),
                Err(e) => return Err(e),
            }
        }
        test[i] = last.expect("at least one attempt")?;
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            spec: *spec,
            standardization,
        },
        train,
        val,
        test: stack_images(&test)?,
        test_labels: test.iter().map(|s| s.label).collect(),
        test_meta: test.iter().map(|s| s.anomaly).collect(),
    })
}

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const TRAIN_FILE: &str = "train.pcht";
pub const VAL_FILE: &str = "val.pcht";
pub const TEST_FILE: &str = "test.pcht";
pub const LABELS_FILE: &str = "test_labels.pcht";
pub const META_FILE: &str = "test_meta.csv";

impl Dataset {
    pub fn image_size(&self) -> usize {
        self.manifest.spec.image_size
    }

    /// `1.0` for anomalous test slices, `0.0` otherwise.
    pub fn label_values(&self) -> Vec<f64> {
        self.test_labels
            .iter()
            .map(|l| f64::from(u8::from(*l == Label::Anomalous)))
            .collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write =
            |name: &str, bytes: &[u8]| fs::write(dir.join(name), bytes).map_err(|e| Error::io(dir.join(name), e));
        write(MANIFEST_FILE, self.manifest.to_kv().render().as_bytes())?;
        save_tensor(dir.join(TRAIN_FILE), &self.train)?;
        if let Some(v) = &self.val {
            save_tensor(dir.join(VAL_FILE), v)?;
        }
        save_tensor(dir.join(TEST_FILE), &self.test)?;
        save_tensor(
            dir.join(LABELS_FILE),
            &Tensor::new(vec![self.test_labels.len()], self.label_values())?,
        )?;
        let mut csv = String::from("index,label,kind,center_row,center_col,radius,intensity\n");
        for (i, m) in self.test_meta.iter().enumerate() {
            match m {
                Some(m) => csv.push_str(&format!(
                    "{i},1,{},{},{},{},{}\n",
                    m.kind.as_str(),
                    m.center.0,
                    m.center.1,
                    m.radius,
                    m.intensity
                )),
                None => csv.push_str(&format!("{i},0,,,,,\n")),
            }
        }
        write(META_FILE, csv.as_bytes())
    }

    /// Loads a directory written by [`Dataset::save`] or any PCHT stacks with a matching manifest.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest = DatasetManifest::from_kv(&KeyValues::parse(&text)?)?;
        let spec = manifest.spec;
        let s = spec.image_size;
        let check = |t: &Tensor, n: usize, what: &str| -> Result<()> {
            if t.shape() != [n, 1, s, s] {
                return Err(Error::Invalid(format!(
                    "{what} has shape {:?}, manifest says ({n}, 1, {s}, {s})",
                    t.shape()
                )));
            }
            Ok(())
        };
        let train = load_tensor(dir.join(TRAIN_FILE))?;
        check(&train, spec.n_train, "train split")?;
        let val = if spec.n_val > 0 {
            let v = load_tensor(dir.join(VAL_FILE))?;
            check(&v, spec.n_val, "val split")?;
            Some(v)
        } else {
            None
        };
        let test = load_tensor(dir.join(TEST_FILE))?;
        check(&test, spec.n_test, "test split")?;
        let labels = load_tensor(dir.join(LABELS_FILE))?;
        if labels.shape() != [spec.n_test] {
            return Err(Error::Invalid(format!(
                "labels have shape {:?}, expected ({})",
                labels.shape(),
                spec.n_test
            )));
        }
        let test_labels = labels
            .data()
            .iter()
            .map(|&v| match v {
                0.0 => Ok(Label::Normal),
                1.0 => Ok(Label::Anomalous),
                other => Err(Error::Invalid(format!("label value {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let meta_path = dir.join(META_FILE);
        let test_meta = match fs::read_to_string(&meta_path) {
            Ok(text) => parse_meta(&text, spec.n_test)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => vec![None; spec.n_test],
            Err(e) => return Err(Error::io(meta_path, e)),
        };
        Ok(Dataset {
            manifest,
            train,
            val,
            test,
            test_labels,
            test_meta,
        })
    }
}

fn parse_meta(text: &str, n: usize) -> Result<Vec<Option<AnomalyMeta>>> {
    let mut out = vec![None; n];
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Invalid(format!("malformed anomaly metadata line {line:?}"));
        if f.len() != 7 {
            return Err(bad());
        }
        let i: usize = f[0].parse().map_err(|_| bad())?;
        if i >= n {
            return Err(bad());
        }
        if f[1] == "1" {
            let kind = match f[2] {
                "disc" => ShapeKind::Disc,
                "square" => ShapeKind::Square,
                "ring" => ShapeKind::Ring,
                "blob" => ShapeKind::Blob,
                _ => return Err(bad()),
            };
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            out[i] = Some(AnomalyMeta {
                kind,
                center: (num(f[3])?, num(f[4])?),
                radius: num(f[5])?,
                intensity: num(f[6])?,
            });
        }
    }
    Ok(out)
}

/// Writes a 16-bit binary PGM, min-max scaled; a constant image maps to mid-scale.
pub fn export_pgm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(image)?).map_err(|e| Error::io(path, e))
}

pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let sh = image.shape();
    if sh.len() < 2 || sh[..sh.len() - 2].iter().product::<usize>() != 1 {
        return Err(Error::shape(
            "export_pgm",
            format!("expected a single 2-D slice, got {sh:?}"),
        ));
    }
    let (h, w) = (sh[sh.len() - 2], sh[sh.len() - 1]);
    let lo = image.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = image.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Numerical("image contains non-finite values".into()));
    }
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in image.data() {
        let q: u16 = if hi > lo {
            ((v - lo) / (hi - lo) * 65535.0).round() as u16
        } else {
            32768
        };
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::sha256_hex;

    fn bytes_of(t: &Tensor) -> Vec<u8> {
        t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn phantom_is_deterministic_with_zero_background() {
        let a = generate_phantom(42, 32).unwrap();
        let b = generate_phantom(42, 32).unwrap();
        assert_eq!(bytes_of(&a.image), bytes_of(&b.image));
        let fg = a.mask.iter().filter(|&&m| m).count();
        assert!(fg > 200 && fg < 900, "{fg}");
        for (v, m) in a.image.data().iter().zip(&a.mask) {
            if !m {
                assert_eq!(*v, 0.0);
            } else {
                assert!(*v > 0.0);
            }
        }
        assert!(generate_phantom(1, 24).is_err());
    }

    #[test]
    fn different_seeds_differ() {
        let hashes: std::collections::HashSet<String> = (0..200)
            .map(|s| sha256_hex(&bytes_of(&generate_phantom(s, 32).unwrap().image)))
            .collect();
        assert_eq!(hashes.len(), 200);
    }

    #[test]
    fn anomaly_stays_inside_mask_and_is_strong() {
        for seed in 0..60 {
            let p = generate_phantom(seed, 32).unwrap();
            let q = inject_anomaly(&p, 1000 + seed, &AnomalyConfig::default()).unwrap();
            assert_eq!(q.label, Label::Anomalous);
            let meta = q.anomaly.unwrap();
            let mut changed = 0;
            let mut total = 0.0;
            for (i, (a, b)) in p.image.data().iter().zip(q.image.data()).enumerate() {
                if a != b {
                    assert!(p.mask[i], "seed {seed}: pixel {i} outside mask changed");
                    changed += 1;
                    total += (a - b).abs();
                }
            }
            assert!(changed > 0);
            assert!(total / changed as f64 >= 1.0 - 1e-12, "{meta:?}");
            assert!(inject_anomaly(&q, 5, &AnomalyConfig::default()).is_err());
        }
        for seed in 0..20 {
            let p = generate_phantom(seed, 32).unwrap();
            let q = inject_anomaly(&p, seed, &AnomalyConfig::with_family(AnomalyFamily::Blobs)).unwrap();
            assert_eq!(q.anomaly.unwrap().kind, ShapeKind::Blob);
        }
    }

    #[test]
    fn zero_offset_rejected() {
        let p = generate_phantom(3, 32).unwrap();
        let cfg = AnomalyConfig {
            offset: (0.0, 0.0),
            ..AnomalyConfig::default()
        };
        assert!(inject_anomaly(&p, 1, &cfg).is_err());
    }

    #[test]
    fn oversized_shape_does_not_fit() {
        let p = generate_phantom(3, 32).unwrap();
        let cfg = AnomalyConfig {
            radius_frac: (0.45, 0.49),
            ..AnomalyConfig::default()
        };
        assert!(matches!(
            inject_anomaly(&p, 1, &cfg),
            Err(Error::AnomalyDoesNotFit { tries: 100 })
        ));
    }

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            n_train: 40,
            n_val: 3,
            n_test: 20,
            anomaly_fraction: 0.5,
            image_size: 16,
            master_seed: 9,
            family: AnomalyFamily::Objects,
        }
    }

    #[test]
    fn dataset_properties() {
        let d = generate_dataset(&small_spec()).unwrap();
        let n = d.train.numel() as f64;
        let mean = d.train.sum() / n;
        let std = (d.train.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6);
        assert_eq!(d.test_labels.iter().filter(|l| **l == Label::Anomalous).count(), 10);
        for (l, m) in d.test_labels.iter().zip(&d.test_meta) {
            assert_eq!(*l == Label::Anomalous, m.is_some());
        }
        // background sits at the standardized zero level
        let zero = d.manifest.standardization.zero_level();
        assert!(d.train.data().iter().filter(|&&v| v == zero).count() > 0);

        let again = generate_dataset(&d.manifest.spec).unwrap();
        assert_eq!(again, d);
        let none = generate_dataset(&DatasetSpec {
            anomaly_fraction: 0.0,
            ..small_spec()
        })
        .unwrap();
        assert!(none.test_labels.iter().all(|l| *l == Label::Normal));
    }

    #[test]
    fn save_load_round_trip() {
        let d = generate_dataset(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, d);
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let m = DatasetManifest::from_kv(&KeyValues::parse(&text).unwrap()).unwrap();
        assert_eq!(m, d.manifest);
    }

    #[test]
    fn pgm_format() {
        let img = Tensor::from_fn(&[1, 2, 3], |i| i as f64);
        let b = encode_pgm(&img).unwrap();
        assert!(b.starts_with(b"P5\n3 2\n65535\n"));
        let body = &b[b"P5\n3 2\n65535\n".len()..];
        assert_eq!(body.len(), 12);
        let px: Vec<u16> = body.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
        assert_eq!(px[0], 0);
        assert_eq!(px[5], 65535);
        assert!(px.windows(2).all(|w| w[0] <= w[1]));

        let flat = encode_pgm(&Tensor::full(&[4, 4], 3.0)).unwrap();
        let body = &flat[b"P5\n4 4\n65535\n".len()..];
        assert!(body.chunks(2).all(|c| u16::from_be_bytes([c[0], c[1]]) == 32768));
        assert!(encode_pgm(&Tensor::zeros(&[2, 4, 4])).is_err());
    }
}

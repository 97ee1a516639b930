//! Labelled feature vectors: synthetic generation, file formats,
//! class-disjoint splits and balanced batch sampling.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BINARY_MAGIC: &[u8; 8] = b"THSGDATA";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    features: Tensor<f64>,
    labels: Vec<usize>,
    class_count: usize,
}

impl FeatureDataset {
    /// Checks that labels lie in `[0, class_count)` and no class is empty.
    pub fn new(features: Tensor<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::contract(format!("{} feature rows but {} labels", features.rows(), labels.len())));
        }
        let mut sizes = vec![0usize; class_count];
        for (i, &l) in labels.iter().enumerate() {
            if l >= class_count {
                return Err(Error::contract(format!("sample {i} has label {l} >= class count {class_count}")));
            }
            sizes[l] += 1;
        }
        if let Some(c) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::contract(format!("class {c} has no samples")));
        }
        Ok(Self { features, labels, class_count })
    }

    pub fn features(&self) -> &Tensor<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Sample indices grouped by class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_count];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Rows and labels at `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> Result<(Tensor<f64>, Vec<usize>)> {
        let x = self.features.select_rows(indices)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Class centers on a sphere of radius `center_scale`, samples with
/// isotropic Gaussian noise. Values are rounded to `f32` so the dataset
/// survives the binary format unchanged.
pub fn generate_gaussian_mixture(
    classes: usize,
    per_class: usize,
    dim: usize,
    center_scale: f64,
    noise_scale: f64,
    seed: u64,
) -> Result<FeatureDataset> {
    if classes < 2 || per_class < 2 || dim == 0 {
        return Err(Error::Config(format!(
            "need classes >= 2, per_class >= 2, dim >= 1 (got {classes}, {per_class}, {dim})"
        )));
    }
    if !(noise_scale >= 0.0) || !center_scale.is_finite() {
        return Err(Error::Config(format!("invalid scales: center {center_scale}, noise {noise_scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut c: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        c.iter_mut().for_each(|v| *v *= center_scale / norm);
        centers.push(c);
    }
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &c in center {
                let z: f64 = rng.sample(StandardNormal);
                data.push((c + noise_scale * z) as f32 as f64);
            }
            labels.push(label);
        }
    }
    FeatureDataset::new(Tensor::new(labels.len(), dim, data)?, labels, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Csv,
    Binary,
}

impl DataFormat {
    /// `.csv` means CSV; anything else is treated as binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::Binary,
        }
    }
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(DataFormat::Csv),
            "binary" | "bin" => Ok(DataFormat::Binary),
            _ => Err(Error::Config(format!("unknown data format '{s}'"))),
        }
    }
}

pub fn load_features(path: &Path, format: DataFormat) -> Result<FeatureDataset> {
    match format {
        DataFormat::Csv => read_csv(BufReader::new(fs::File::open(path)?)),
        DataFormat::Binary => decode_binary(&fs::read(path)?),
    }
}

pub fn write_features(ds: &FeatureDataset, path: &Path, format: DataFormat) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    match format {
        DataFormat::Csv => write_csv(ds, &mut out)?,
        DataFormat::Binary => out.write_all(&encode_binary(ds)?)?,
    }
    out.flush()?;
    Ok(())
}

/// One `label,f1,…,fd` row per sample. The class count is `max label + 1`.
pub fn write_csv<W: Write>(ds: &FeatureDataset, out: &mut W) -> Result<()> {
    for (i, &label) in ds.labels.iter().enumerate() {
        write!(out, "{label}")?;
        for v in ds.features.row(i) {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_csv<R: BufRead>(input: R) -> Result<FeatureDataset> {
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut dim = None;
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::ParseLine { line: line_no, message };
        let mut fields = line.split(',');
        let label_field = fields.next().unwrap_or_default().trim();
        let label: usize = label_field.parse().map_err(|_| err(format!("bad label '{label_field}'")))?;
        let start = data.len();
        for f in fields {
            let f = f.trim();
            let v: f64 = f.parse().map_err(|_| err(format!("bad value '{f}'")))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite value '{f}'")));
            }
            data.push(v);
        }
        let width = data.len() - start;
        match dim {
            None if width == 0 => return Err(err("row has no features".into())),
            None => dim = Some(width),
            Some(d) if d != width => return Err(err(format!("expected {d} features, found {width}"))),
            _ => {}
        }
        labels.push(label);
    }
    let dim = dim.ok_or_else(|| Error::ParseLine { line: 0, message: "file has no rows".into() })?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    FeatureDataset::new(Tensor::new(labels.len(), dim, data)?, labels, classes)
}

pub fn encode_binary(ds: &FeatureDataset) -> Result<Vec<u8>> {
    let to_u32 =
        |v: usize, what: &str| u32::try_from(v).map_err(|_| Error::contract(format!("{what} {v} does not fit in u32")));
    let mut out = Vec::with_capacity(20 + ds.features.len() * 4 + ds.len() * 4);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&to_u32(ds.len(), "sample count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(ds.dim(), "dimension")?.to_le_bytes());
    out.extend_from_slice(&to_u32(ds.class_count, "class count")?.to_le_bytes());
    for &v in ds.features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &l in &ds.labels {
        out.extend_from_slice(&to_u32(l, "label")?.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos as u64,
                message: format!("truncated file while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_binary(bytes: &[u8]) -> Result<FeatureDataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8, "magic")? != BINARY_MAGIC {
        return Err(Error::Parse { offset: 0, message: "bad magic, expected THSGDATA".into() });
    }
    let n = cur.u32("sample count")? as usize;
    let dim = cur.u32("dimension")? as usize;
    let classes = cur.u32("class count")? as usize;
    let expected = n
        .checked_mul(dim)
        .and_then(|v| v.checked_add(n))
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(cur.pos));
    if expected != Some(bytes.len()) {
        return Err(Error::Parse {
            offset: cur.pos as u64,
            message: format!("header says {n}x{dim} but file has {} bytes", bytes.len()),
        });
    }
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n * dim {
        let offset = cur.pos;
        let v = f32::from_le_bytes(cur.take(4, "features")?.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::Parse { offset: offset as u64, message: "non-finite feature".into() });
        }
        data.push(v as f64);
    }
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let offset = cur.pos;
        let l = cur.u32("labels")? as usize;
        if l >= classes {
            return Err(Error::Parse {
                offset: offset as u64,
                message: format!("sample {i} has label {l} >= class count {classes}"),
            });
        }
        labels.push(l);
    }
    FeatureDataset::new(Tensor::new(n, dim, data)?, labels, classes)
}

/// Disjoint class-index sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
}

/// Shuffles class indices with `seed` and puts the first
/// `⌈fraction·C⌉` into the training side.
pub fn class_split(class_count: usize, train_fraction: f64, seed: u64) -> Result<Split> {
    if class_count < 2 {
        return Err(Error::contract(format!("cannot split {class_count} class(es)")));
    }
    let n_train = (train_fraction * class_count as f64).ceil();
    if !(n_train >= 1.0 && n_train < class_count as f64) {
        return Err(Error::contract(format!(
            "train fraction {train_fraction} leaves one side of a {class_count}-class split empty"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = sample(&mut rng, class_count, class_count).into_vec();
    let (train, test) = order.split_at(n_train as usize);
    let (mut train_classes, mut test_classes) = (train.to_vec(), test.to_vec());
    train_classes.sort_unstable();
    test_classes.sort_unstable();
    Ok(Split { train_classes, test_classes })
}

impl FeatureDataset {
    /// Samples of the given classes, relabelled densely in the order given.
    pub fn restrict(&self, classes: &[usize]) -> Result<FeatureDataset> {
        let mut map = vec![None; self.class_count];
        for (new, &old) in classes.iter().enumerate() {
            map[old] = Some(new);
        }
        let (indices, labels): (Vec<usize>, Vec<usize>) =
            self.labels.iter().enumerate().filter_map(|(i, &l)| map[l].map(|n| (i, n))).unzip();
        FeatureDataset::new(self.features.select_rows(&indices)?, labels, classes.len())
    }
}

pub fn split_by_class(ds: &FeatureDataset, train_fraction: f64, seed: u64) -> Result<(FeatureDataset, FeatureDataset)> {
    let split = class_split(ds.class_count, train_fraction, seed)?;
    Ok((ds.restrict(&split.train_classes)?, ds.restrict(&split.test_classes)?))
}

/// Draws `P` distinct classes and `K` samples from each. Classes with fewer
/// than `K` samples are drawn with replacement.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    by_class: Vec<Vec<usize>>,
    p: usize,
    k: usize,
}

impl BalancedSampler {
    pub fn new(ds: &FeatureDataset, p: usize, k: usize) -> Result<Self> {
        if p > ds.class_count || p == 0 || k == 0 {
            return Err(Error::contract(format!("cannot draw P={p} classes x K={k} from {} classes", ds.class_count)));
        }
        Ok(Self { by_class: ds.class_indices(), p, k })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size());
        for c in sample(rng, self.by_class.len(), self.p) {
            let members = &self.by_class[c];
            if members.len() >= self.k {
                out.extend(sample(rng, members.len(), self.k).into_iter().map(|i| members[i]));
            } else {
                out.extend((0..self.k).map(|_| members[rng.random_range(0..members.len())]));
            }
        }
        out
    }
}

pub fn sample_balanced_batch<R: Rng + ?Sized>(
    ds: &FeatureDataset,
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    Ok(BalancedSampler::new(ds, p, k)?.sample(rng))
}

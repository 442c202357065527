//! Embedding banks: the FEMB file format, stratified splits, Dirichlet client
//! partitioning, and the synthetic feature-shift generator.
//!
//! FEMB layout, every multi-byte field big-endian:
//!
//! ```text
//! magic "FEMB" | version u16 = 1 | D u32 | C u32 | N u32
//! C x (name len u16 | utf-8 name)
//! C x D float32 text features
//! N x (label u16 | D float32 image feature)
//! ```

use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm, orthonormal_factor, Matrix};
use crate::rng::{stream, StreamId};

pub const MAGIC: &[u8; 4] = b"FEMB";
pub const VERSION: u16 = 1;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum BankError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported bank version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated bank file")]
    Truncated,
    #[error("sample {index} has label {label} but the bank has {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("non-finite feature value in {0}")]
    NonFinite(String),
    #[error("class name {0} is not utf-8")]
    InvalidName(usize),
    #[error("{0} trailing bytes after the last sample")]
    TrailingBytes(usize),
}

/// Precomputed image features with labels, plus one text feature per class.
///
/// Values are held as `f64` but always originate from `f32`, the on-disk
/// precision, so writing and reloading a bank is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    pub class_names: Vec<String>,
    /// `C x D`.
    pub text: Matrix,
    pub labels: Vec<usize>,
    /// `N x D`.
    pub features: Matrix,
}

impl EmbeddingBank {
    pub fn new(
        class_names: Vec<String>,
        text: Matrix,
        labels: Vec<usize>,
        features: Matrix,
    ) -> Result<Self> {
        if text.rows != class_names.len() {
            return Err(Error::mismatch(
                class_names.len(),
                text.rows,
                "text features per class",
            ));
        }
        if features.rows != labels.len() {
            return Err(Error::mismatch(
                labels.len(),
                features.rows,
                "features per label",
            ));
        }
        if features.rows > 0 && features.cols != text.cols {
            return Err(Error::mismatch(
                text.cols,
                features.cols,
                "image vs text feature dim",
            ));
        }
        for (index, &label) in labels.iter().enumerate() {
            if label >= class_names.len() {
                return Err(BankError::LabelOutOfRange {
                    index,
                    label,
                    classes: class_names.len(),
                }
                .into());
            }
        }
        if !text.is_finite() || !features.is_finite() {
            return Err(BankError::NonFinite("bank".into()).into());
        }
        Ok(Self {
            class_names,
            text,
            labels,
            features,
        })
    }

    pub fn dim(&self) -> usize {
        self.text.cols
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Errors unless the bank holds at least one sample.
    pub fn require_nonempty(&self, what: &str) -> Result<()> {
        if self.is_empty() {
            Err(Error::Empty(format!("{what} bank has no samples")))
        } else {
            Ok(())
        }
    }

    /// New bank holding the given samples in the given order.
    pub fn subset(&self, indices: &[usize]) -> EmbeddingBank {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        EmbeddingBank {
            class_names: self.class_names.clone(),
            text: self.text.clone(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            features: Matrix {
                rows: indices.len(),
                cols: d,
                data,
            },
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (d, c, n) = (self.dim(), self.classes(), self.len());
        let mut out = Vec::with_capacity(18 + 4 * c * d + n * (2 + 4 * d));
        out.extend_from_slice(MAGIC);
        out.write_u16::<BigEndian>(VERSION)?;
        for v in [d, c, n] {
            out.write_u32::<BigEndian>(
                u32::try_from(v).map_err(|_| Error::Serialization("bank too large".into()))?,
            )?;
        }
        for name in &self.class_names {
            let b = name.as_bytes();
            out.write_u16::<BigEndian>(
                u16::try_from(b.len())
                    .map_err(|_| Error::Serialization("class name too long".into()))?,
            )?;
            out.extend_from_slice(b);
        }
        for &v in &self.text.data {
            out.write_f32::<BigEndian>(v as f32)?;
        }
        for s in 0..n {
            out.write_u16::<BigEndian>(
                u16::try_from(self.labels[s])
                    .map_err(|_| Error::Serialization("label exceeds u16".into()))?,
            )?;
            for &v in self.features.row(s) {
                out.write_f32::<BigEndian>(v as f32)?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, BankError> {
        let mut cur = bytes;
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic)
            .map_err(|_| BankError::Truncated)?;
        if &magic != MAGIC {
            return Err(BankError::BadMagic);
        }
        let version = cur
            .read_u16::<BigEndian>()
            .map_err(|_| BankError::Truncated)?;
        if version != VERSION {
            return Err(BankError::UnsupportedVersion(version));
        }
        let mut header = [0usize; 3];
        for h in &mut header {
            *h = cur
                .read_u32::<BigEndian>()
                .map_err(|_| BankError::Truncated)? as usize;
        }
        let [d, c, n] = header;
        let mut class_names = Vec::with_capacity(c.min(1 << 16));
        for i in 0..c {
            let len = cur
                .read_u16::<BigEndian>()
                .map_err(|_| BankError::Truncated)? as usize;
            if cur.len() < len {
                return Err(BankError::Truncated);
            }
            let name = std::str::from_utf8(&cur[..len]).map_err(|_| BankError::InvalidName(i))?;
            class_names.push(name.to_string());
            cur = &cur[len..];
        }
        let need = |count: usize| count.checked_mul(4).ok_or(BankError::Truncated);
        let text_bytes = need(c.checked_mul(d).ok_or(BankError::Truncated)?)?;
        if cur.len() < text_bytes {
            return Err(BankError::Truncated);
        }
        let text_data = read_f32s(&cur[..text_bytes]);
        cur = &cur[text_bytes..];
        if text_data.iter().any(|v| !v.is_finite()) {
            return Err(BankError::NonFinite("text features".into()));
        }
        let record = 2 + need(d)?;
        if cur.len() < n.checked_mul(record).ok_or(BankError::Truncated)? {
            return Err(BankError::Truncated);
        }
        let mut labels = Vec::with_capacity(n);
        let mut feats = Vec::with_capacity(n * d);
        for index in 0..n {
            let label = u16::from_be_bytes([cur[0], cur[1]]) as usize;
            if label >= c {
                return Err(BankError::LabelOutOfRange {
                    index,
                    label,
                    classes: c,
                });
            }
            let row = read_f32s(&cur[2..record]);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(BankError::NonFinite(format!("sample {index}")));
            }
            labels.push(label);
            feats.extend(row);
            cur = &cur[record..];
        }
        if !cur.is_empty() {
            return Err(BankError::TrailingBytes(cur.len()));
        }
        Ok(EmbeddingBank {
            class_names,
            text: Matrix {
                rows: c,
                cols: d,
                data: text_data,
            },
            labels,
            features: Matrix {
                rows: n,
                cols: d,
                data: feats,
            },
        })
    }
}

fn read_f32s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_be_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect()
}

pub fn load_bank(path: &Path) -> Result<EmbeddingBank> {
    let bytes = std::fs::read(path)?;
    Ok(EmbeddingBank::from_bytes(&bytes)?)
}

pub fn write_bank(bank: &EmbeddingBank, path: &Path) -> Result<()> {
    std::fs::write(path, bank.to_bytes()?)?;
    Ok(())
}

/// Largest-remainder apportionment of `total` items by `weights`.
///
/// Ties in the remainder go to the earlier index.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || !(sum > 0.0) {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BankSplit {
    pub train: EmbeddingBank,
    pub val: EmbeddingBank,
    pub test: EmbeddingBank,
    pub warnings: Vec<String>,
}

/// Stratified train/val/test split. `bank_id` selects the shuffle stream so
/// different clients' banks are shuffled independently.
pub fn split_bank(bank: &EmbeddingBank, spec: &SplitSpec, bank_id: usize) -> Result<BankSplit> {
    let fr = [spec.train, spec.val, spec.test];
    if fr.iter().any(|f| *f < 0.0) || ((fr.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "split fractions {fr:?} must be >= 0 and sum to 1"
        )));
    }
    if bank.len() < 5 {
        return Err(Error::InvalidInput(format!(
            "need at least 5 samples to split, got {}",
            bank.len()
        )));
    }
    let mut rng = stream(spec.seed, StreamId::Split(bank_id));
    let mut parts: [Vec<usize>; 3] = Default::default();
    let mut warnings = Vec::new();
    for class in 0..bank.classes() {
        let mut idx: Vec<usize> = (0..bank.len())
            .filter(|&i| bank.labels[i] == class)
            .collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let counts = if idx.len() < 3 {
            warnings.push(format!(
                "class `{}` has only {} samples; assigning train first",
                bank.class_names[class],
                idx.len()
            ));
            let mut c = [0usize; 3];
            for k in 0..idx.len() {
                c[k] = 1;
            }
            c.to_vec()
        } else {
            largest_remainder(idx.len(), &fr)
        };
        let mut start = 0;
        for (part, &n) in parts.iter_mut().zip(&counts) {
            part.extend_from_slice(&idx[start..start + n]);
            start += n;
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(BankSplit {
        train: bank.subset(&parts[0]),
        val: bank.subset(&parts[1]),
        test: bank.subset(&parts[2]),
        warnings,
    })
}

/// Maximum number of Dirichlet draws before giving up on empty clients.
pub const DIRICHLET_RETRIES: usize = 10;

/// Samples a Dirichlet(alpha, ..., alpha) vector of length `k` by Gamma normalization.
pub fn sample_dirichlet<R: Rng>(k: usize, alpha: f64, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::InvalidInput(format!("Dirichlet alpha {alpha}: {e}")))?;
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return Ok(draws.iter().map(|g| g / sum).collect());
        }
    }
}

/// Splits a bank across `clients` with per-class Dirichlet(alpha) proportions.
pub fn dirichlet_partition(
    bank: &EmbeddingBank,
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<EmbeddingBank>> {
    if clients < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 clients, got {clients}"
        )));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidInput(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let mut rng = stream(seed, StreamId::Dirichlet);
    let by_class: Vec<Vec<usize>> = (0..bank.classes())
        .map(|c| (0..bank.len()).filter(|&i| bank.labels[i] == c).collect())
        .collect();
    for _ in 0..DIRICHLET_RETRIES {
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); clients];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let props = sample_dirichlet(clients, alpha, &mut rng)?;
            let counts = largest_remainder(members.len(), &props);
            let mut start = 0;
            for (client, &n) in counts.iter().enumerate() {
                assigned[client].extend_from_slice(&members[start..start + n]);
                start += n;
            }
        }
        if assigned.iter().all(|a| !a.is_empty()) {
            return Ok(assigned
                .into_iter()
                .map(|mut a| {
                    a.sort_unstable();
                    bank.subset(&a)
                })
                .collect());
        }
    }
    Err(Error::Partition(format!(
        "some client received no samples after {DIRICHLET_RETRIES} Dirichlet draws"
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftMode {
    Rotation,
    Scaling,
    None,
}

impl std::str::FromStr for ShiftMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotation" => Ok(ShiftMode::Rotation),
            "scaling" => Ok(ShiftMode::Scaling),
            "none" => Ok(ShiftMode::None),
            other => Err(Error::InvalidInput(format!("unknown shift mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub clients: usize,
    pub dim: usize,
    pub classes: usize,
    pub n_per_client: usize,
    pub shift: ShiftMode,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            clients: 3,
            dim: 32,
            classes: 4,
            n_per_client: 200,
            shift: ShiftMode::Rotation,
            sigma: 0.15,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub clients: Vec<EmbeddingBank>,
    pub global: EmbeddingBank,
}

fn haar_orthogonal<R: Rng>(d: usize, rng: &mut R) -> Result<Matrix> {
    let g = Matrix {
        rows: d,
        cols: d,
        data: (0..d * d).map(|_| StandardNormal.sample(rng)).collect(),
    };
    orthonormal_factor(&g)
}

fn client_transform<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Result<Matrix> {
    let d = spec.dim;
    match spec.shift {
        ShiftMode::Rotation => haar_orthogonal(d, rng),
        ShiftMode::Scaling => {
            let dist = Uniform::new(0.5, 2.0).expect("valid range");
            let mut m = Matrix::zeros(d, d);
            for i in 0..d {
                m.set(i, i, dist.sample(rng));
            }
            Ok(m)
        }
        ShiftMode::None => {
            let mut m = Matrix::zeros(d, d);
            for i in 0..d {
                m.set(i, i, 1.0);
            }
            Ok(m)
        }
    }
}

fn emit_bank<R: Rng>(
    spec: &SynthSpec,
    prototypes: &Matrix,
    names: &[String],
    transform: &Matrix,
    rng: &mut R,
) -> Result<EmbeddingBank> {
    let (d, c, n) = (spec.dim, spec.classes, spec.n_per_client);
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let y = i % c;
        let noisy: Vec<f64> = prototypes
            .row(y)
            .iter()
            .map(|p| {
                let z: f64 = StandardNormal.sample(rng);
                p + spec.sigma * z
            })
            .collect();
        let x = transform.matvec(&noisy)?;
        labels.push(y);
        data.extend(x.iter().map(|v| *v as f32 as f64));
    }
    EmbeddingBank::new(
        names.to_vec(),
        prototypes.clone(),
        labels,
        Matrix {
            rows: n,
            cols: d,
            data,
        },
    )
}

/// Generates `clients` banks plus one global bank, each seen through its own
/// feature-space transform of shared class prototypes.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<SyntheticData> {
    if spec.classes < 2 || spec.dim < spec.classes {
        return Err(Error::InvalidInput(format!(
            "need D >= C >= 2, got D={} C={}",
            spec.dim, spec.classes
        )));
    }
    if spec.clients == 0 || spec.n_per_client == 0 {
        return Err(Error::InvalidInput(
            "need at least one client and one sample per client".into(),
        ));
    }
    if !(spec.sigma >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "sigma must be >= 0, got {}",
            spec.sigma
        )));
    }
    let mut rng = stream(spec.seed, StreamId::Synthetic);
    let (d, c) = (spec.dim, spec.classes);
    let mut proto = Vec::with_capacity(c * d);
    for _ in 0..c {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = norm(&v);
        proto.extend(v.iter().map(|x| (x / n) as f32 as f64));
    }
    let prototypes = Matrix {
        rows: c,
        cols: d,
        data: proto,
    };
    let names: Vec<String> = (0..c).map(|i| format!("class{i}")).collect();
    let mut clients = Vec::with_capacity(spec.clients);
    for _ in 0..spec.clients {
        let t = client_transform(spec, &mut rng)?;
        clients.push(emit_bank(spec, &prototypes, &names, &t, &mut rng)?);
    }
    let t = client_transform(spec, &mut rng)?;
    let global = emit_bank(spec, &prototypes, &names, &t, &mut rng)?;
    Ok(SyntheticData { clients, global })
}

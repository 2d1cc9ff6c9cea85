//! Versioned model container.
//!
//! Layout (little-endian):
//!
//! | field        | size            |
//! |--------------|-----------------|
//! | magic        | 8 (`TCENSMDL`)  |
//! | version      | u32             |
//! | kind tag     | u8              |
//! | header len   | u32             |
//! | header       | JSON            |
//! | value count  | u64             |
//! | payload      | f64 × count     |
//! | checksum     | 32 (SHA-256 of everything above) |

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::{ExpertModel, TaskScorer};
use crate::error::{Error, Result};
use crate::indomain::{DistanceMeasure, GaussianModel, InDomainModel, LofIndex};
use crate::losses::Center;
use crate::merge::{InputStats, MergedInDomain};
use crate::nn::DenseNet;

pub const MAGIC: &[u8; 8] = b"TCENSMDL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Expert(ExpertModel),
    InDomain(InDomainModel),
    MergedInDomain(MergedInDomain),
}

impl Model {
    pub fn kind_name(&self) -> &'static str {
        kind_name(self.tag())
    }

    fn tag(&self) -> u8 {
        match self {
            Model::Expert(_) => 1,
            Model::InDomain(_) => 2,
            Model::MergedInDomain(_) => 3,
        }
    }
}

fn kind_name(tag: u8) -> &'static str {
    match tag {
        1 => "expert",
        2 => "in_domain",
        3 => "merged_in_domain",
        _ => "unknown",
    }
}

type Shape = Vec<(usize, usize, u8)>;

#[derive(Debug, Serialize, Deserialize)]
struct ExpertHeader {
    task_id: usize,
    class_count: usize,
    net: Shape,
    stats_dim: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum DmHeader {
    Lof {
        k: usize,
        n: usize,
        dim: usize,
    },
    Mahalanobis {
        dim: usize,
        eps: f64,
        #[serde(default)]
        per_dim: bool,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct InDomainHeader {
    fe: Shape,
    center_dim: usize,
    dm: DmHeader,
    fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct MergedHeader {
    a: InDomainHeader,
    b: InDomainHeader,
    a_values: usize,
}

fn expert_parts(e: &ExpertModel, payload: &mut Vec<f64>) -> ExpertHeader {
    payload.extend(e.net.params_flat());
    if let Some(s) = &e.input_stats {
        payload.extend(&s.mean);
        payload.extend(&s.std);
    }
    ExpertHeader {
        task_id: e.task_id,
        class_count: e.class_count,
        net: e.net.encode_shape(),
        stats_dim: e.input_stats.as_ref().map(|s| s.dim()),
    }
}

fn in_domain_parts(m: &InDomainModel, payload: &mut Vec<f64>) -> InDomainHeader {
    payload.extend(m.fe().params_flat());
    payload.extend(m.center().0.iter());
    let dm = match m.distance_measure() {
        DistanceMeasure::Lof(l) => {
            payload.extend(l.points().iter());
            payload.extend(l.k_distances());
            payload.extend(l.lrd());
            DmHeader::Lof {
                k: l.k(),
                n: l.len(),
                dim: l.dim(),
            }
        }
        DistanceMeasure::Mahalanobis(g) => {
            payload.extend(g.mean().iter());
            payload.extend(g.inverse_covariance().iter());
            DmHeader::Mahalanobis {
                dim: g.dim(),
                eps: g.eps(),
                per_dim: g.is_per_dimension(),
            }
        }
    };
    InDomainHeader {
        fe: m.fe().encode_shape(),
        center_dim: m.center().dim(),
        dm,
        fingerprint: m.fingerprint().to_string(),
    }
}

/// Serializes a model into container bytes.
pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut payload = Vec::new();
    let header = match model {
        Model::Expert(e) => serde_json::to_vec(&expert_parts(e, &mut payload)),
        Model::InDomain(m) => serde_json::to_vec(&in_domain_parts(m, &mut payload)),
        Model::MergedInDomain(m) => {
            let a = in_domain_parts(&m.a, &mut payload);
            let a_values = payload.len();
            let b = in_domain_parts(&m.b, &mut payload);
            serde_json::to_vec(&MergedHeader { a, b, a_values })
        }
    }
    .expect("header serializes");
    let mut out = Vec::with_capacity(8 + 4 + 1 + 4 + header.len() + 8 + 8 * payload.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(model.tag());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    for v in &payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated container at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

struct Values<'a> {
    data: &'a [f64],
    pos: usize,
}

impl<'a> Values<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [f64]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format("parameter payload too short".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Format("trailing parameter payload".into()));
        }
        Ok(())
    }
}

fn shape_len(shape: &Shape) -> usize {
    shape.iter().map(|&(o, i, _)| o * i + o).sum()
}

fn read_expert(h: ExpertHeader, v: &mut Values<'_>) -> Result<ExpertModel> {
    let net = DenseNet::decode(&h.net, v.take(shape_len(&h.net))?)?;
    let input_stats = match h.stats_dim {
        Some(d) => Some(InputStats {
            mean: v.take(d)?.to_vec(),
            std: v.take(d)?.to_vec(),
        }),
        None => None,
    };
    if net.output_dim() != h.class_count {
        return Err(Error::Format(format!(
            "class count {} does not match the network output",
            h.class_count
        )));
    }
    Ok(ExpertModel::new(net, h.task_id, input_stats))
}

fn read_in_domain(h: InDomainHeader, v: &mut Values<'_>) -> Result<InDomainModel> {
    let fe = DenseNet::decode(&h.fe, v.take(shape_len(&h.fe))?)?;
    let center = Center(Array1::from_vec(v.take(h.center_dim)?.to_vec()));
    let dm = match h.dm {
        DmHeader::Lof { k, n, dim } => {
            let points = Array2::from_shape_vec((n, dim), v.take(n * dim)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
            let kd = v.take(n)?.to_vec();
            let lrd = v.take(n)?.to_vec();
            DistanceMeasure::Lof(LofIndex::from_parts(points, k, kd, lrd)?)
        }
        DmHeader::Mahalanobis { dim, eps, per_dim } => {
            let mean = Array1::from_vec(v.take(dim)?.to_vec());
            let inv = Array2::from_shape_vec((dim, dim), v.take(dim * dim)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
            DistanceMeasure::Mahalanobis(GaussianModel::from_parts(mean, inv, eps, per_dim)?)
        }
    };
    InDomainModel::from_parts(fe, center, dm, h.fingerprint)
}

/// Parses container bytes, verifying magic, version and checksum.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a model container (bad magic)".into()));
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity);
    }
    let tag = r.take(1)?[0];
    let header_len = r.u32()? as usize;
    let header = r.take(header_len)?;
    let count = r.u64()? as usize;
    let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Format("payload size overflows".into()))?)?;
    if r.pos != body.len() {
        return Err(Error::Format("unexpected bytes before checksum".into()));
    }
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut v = Values { data: &data, pos: 0 };
    let model = match tag {
        1 => Model::Expert(read_expert(serde_json::from_slice(header)?, &mut v)?),
        2 => Model::InDomain(read_in_domain(serde_json::from_slice(header)?, &mut v)?),
        3 => {
            let h: MergedHeader = serde_json::from_slice(header)?;
            let a = read_in_domain(h.a, &mut v)?;
            if v.pos != h.a_values {
                return Err(Error::Format("merged payload split does not match the header".into()));
            }
            let b = read_in_domain(h.b, &mut v)?;
            Model::MergedInDomain(MergedInDomain { a, b })
        }
        other => return Err(Error::Format(format!("unknown model kind tag {other}"))),
    };
    v.finish()?;
    Ok(model)
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    from_bytes(&bytes)
}

pub fn load_expert(path: &Path) -> Result<ExpertModel> {
    match load_model(path)? {
        Model::Expert(e) => Ok(e),
        other => Err(Error::KindMismatch {
            expected: "expert".into(),
            found: other.kind_name().into(),
        }),
    }
}

/// Loads an in-domain model or a merged pair, either of which can fill an
/// ensemble slot.
pub fn load_scorer(path: &Path) -> Result<TaskScorer> {
    match load_model(path)? {
        Model::InDomain(m) => Ok(TaskScorer::Single(m)),
        Model::MergedInDomain(m) => Ok(TaskScorer::Merged(m)),
        other => Err(Error::KindMismatch {
            expected: "in_domain".into(),
            found: other.kind_name().into(),
        }),
    }
}

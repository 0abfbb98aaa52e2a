//! Self-contained binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! b"DVBE"  u32 version
//! u32 meta_len, meta_len bytes of UTF-8 `key=value` lines
//! u32 tensor_count
//! per tensor: u32 name_len, name bytes, u32 rank, rank × u64 dims, f64 payload
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::amse::{AmseModel, EmbedKind};
use crate::autos2v::{cell_edges, Arch, ArchParams, CellSpec, EdgeWeights, S2vModel};
use crate::dataio::ClassId;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::Parameters;
use crate::trainer::Dvbe;

const MAGIC: &[u8; 4] = b"DVBE";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub models: Dvbe,
    /// Calibrated gate threshold, if one was stored.
    pub tau: Option<f64>,
}

fn ids(v: &[ClassId]) -> String {
    v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let m = &ck.models;
    let mut meta = vec![
        format!("embed_kind={}", m.amse.kind.name()),
        format!("use_normalization={}", m.amse.use_normalization),
        format!("seen_classes={}", ids(&m.amse.classes)),
        format!("classes={}", ids(&m.s2v.classes)),
    ];
    match &m.s2v.arch {
        Arch::Continuous(a) => meta.push(format!("search_nodes={}", a.n_nodes)),
        Arch::Discrete(c) => meta.extend(c.to_text().lines().map(|l| format!("cell={l}"))),
    }
    if let Some(t) = ck.tau {
        meta.push(format!("tau={:016x}", t.to_bits()));
    }
    let meta = meta.join("\n");

    let mut tensors = m.all_params();
    tensors.push(("s2v.adjacency".into(), &m.s2v.adjacency));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::parse("checkpoint is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::parse("checkpoint text is not UTF-8"))
    }
}

fn parse_ids(s: &str) -> Result<Vec<ClassId>> {
    s.split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::parse(format!("bad class id {t:?}"))))
        .collect()
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::parse("not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::parse(format!("unsupported checkpoint version {version}")));
    }
    let meta_text = r.string()?;
    let mut meta: BTreeMap<&str, &str> = BTreeMap::new();
    let mut cell_lines = Vec::new();
    for line in meta_text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::parse(format!("bad metadata line {line:?}")))?;
        if k == "cell" {
            cell_lines.push(v);
        } else {
            meta.insert(k, v);
        }
    }
    let get = |k: &str| meta.get(k).copied().ok_or_else(|| Error::parse(format!("checkpoint lacks {k}")));

    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::parse("tensor too large"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.insert(name, Tensor::new(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::parse("trailing bytes after checkpoint"));
    }
    let mut take = |name: &str| tensors.remove(name).ok_or_else(|| Error::parse(format!("checkpoint lacks tensor {name}")));

    let kind: EmbedKind = get("embed_kind")?.parse()?;
    let use_normalization = get("use_normalization")?
        .parse()
        .map_err(|_| Error::parse("use_normalization must be true or false"))?;
    let mut amse = AmseModel {
        kind,
        classes: parse_ids(get("seen_classes")?)?,
        reduce1_w: Tensor::scalar(0.0),
        reduce1_b: Tensor::scalar(0.0),
        reduce2_w: Tensor::scalar(0.0),
        reduce2_b: Tensor::scalar(0.0),
        spatial_w: Tensor::scalar(0.0),
        spatial_b: Tensor::scalar(0.0),
        channel_w: Tensor::scalar(0.0),
        channel_b: Tensor::scalar(0.0),
        classifier: Tensor::scalar(0.0),
        use_normalization,
    };
    for (name, slot) in amse.params_mut() {
        *slot = take(&name)?;
    }

    let arch = if cell_lines.is_empty() {
        let n_nodes: usize = get("search_nodes")?.parse().map_err(|_| Error::parse("bad search_nodes"))?;
        Arch::Continuous(ArchParams { n_nodes, alpha: BTreeMap::new() })
    } else {
        Arch::Discrete(CellSpec::from_text(&cell_lines.join("\n"))?)
    };
    let edges = cell_edges(arch.n_nodes())
        .into_iter()
        .map(|e| {
            let empty = EdgeWeights { fc_w: Tensor::scalar(0.0), fc_b: Tensor::scalar(0.0), gc_w: Tensor::scalar(0.0) };
            (e, empty)
        })
        .collect();
    let mut s2v = S2vModel {
        fv_w: Tensor::scalar(0.0),
        fv_b: Tensor::scalar(0.0),
        proj: Tensor::scalar(0.0),
        edges,
        adjacency: take("s2v.adjacency")?,
        classes: parse_ids(get("classes")?)?,
        arch,
    };
    for (name, slot) in s2v.params_mut() {
        *slot = take(&name)?;
    }
    if let Arch::Continuous(a) = &mut s2v.arch {
        for e in cell_edges(a.n_nodes) {
            a.alpha.insert(e, take(&format!("s2v.alpha.{}_{}", e.0, e.1))?);
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::parse(format!("unexpected tensor {extra}")));
    }

    let tau = match meta.get("tau") {
        Some(hex) => Some(f64::from_bits(
            u64::from_str_radix(hex, 16).map_err(|_| Error::parse(format!("bad tau {hex:?}")))?,
        )),
        None => None,
    };
    Ok(Checkpoint { models: Dvbe { amse, s2v }, tau })
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode(ck))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_gzsl, SynthConfig};
    use crate::trainer::ModelConfig;

    fn ds() -> crate::dataio::GzslDataset {
        synth_gzsl(&SynthConfig { samples_per_class: 5, feat_dims: (2, 2, 8), ..Default::default() }).unwrap()
    }

    #[test]
    fn continuous_round_trip() {
        let models = Dvbe::init(&ds(), &ModelConfig::default(), None, 4).unwrap();
        let ck = Checkpoint { models, tau: None };
        let bytes = encode(&ck);
        assert_eq!(decode(&bytes).unwrap(), ck);
        assert_eq!(encode(&decode(&bytes).unwrap()), bytes);
    }

    #[test]
    fn discrete_round_trip_keeps_tau_bits() {
        let model = ModelConfig { embed_kind: EmbedKind::FirstOrder, use_normalization: false, ..Default::default() };
        let models = Dvbe::init(&ds(), &model, Some(CellSpec::two_layer_fc()), 4).unwrap();
        let ck = Checkpoint { models, tau: Some(0.1 + 0.2) };
        assert_eq!(decode(&encode(&ck)).unwrap(), ck);
    }

    #[test]
    fn corrupt_input_is_parse_error() {
        let models = Dvbe::init(&ds(), &ModelConfig::default(), None, 4).unwrap();
        let bytes = encode(&Checkpoint { models, tau: None });
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Parse(_))));
        assert!(matches!(decode(b"NOPE"), Err(Error::Parse(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Parse(_))));
    }
}

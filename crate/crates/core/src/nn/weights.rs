//! Binary weight files.
//!
//! ```text
//! magic      4 bytes   "HSSW"
//! version    u16 LE    1
//! count      u16 LE    number of tensors
//! per tensor:
//!   name_len u16 LE, name (UTF-8, name_len bytes)
//!   rank     u32 LE, dims (rank × u32 LE)
//!   data     product(dims) × f32 LE, row-major
//! ```
//!
//! Tensors appear in network parameter order (`<layer>.weight`,
//! `<layer>.bias`). Learning-rate groups are not stored; they come from the
//! network the file is loaded into.

use super::network::{LrGroup, Network, Param, ParamSlot, Params};
use super::{NnError, Result, Scalar, Tensor};

pub const WEIGHT_MAGIC: &[u8; 4] = b"HSSW";
pub const WEIGHT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Ignore stored `Head` tensors and initialize fresh ones instead.
    pub skip_head: bool,
    /// Seed for the fresh head when `skip_head` is set.
    pub head_seed: u64,
}

pub fn save_weights<T: Scalar>(params: &Params<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.tensors.len() as u16).to_le_bytes());
    for p in &params.tensors {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.shape.len() as u32).to_le_bytes());
        for &d in &p.tensor.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &p.tensor.data {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(NnError::TruncatedFile)?;
        let s = self.buf.get(self.pos..end).ok_or(NnError::TruncatedFile)?;
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn parse_entries(bytes: &[u8]) -> Result<Vec<Entry>> {
    if bytes.len() < 4 || &bytes[..4] != WEIGHT_MAGIC {
        return Err(NnError::BadMagic);
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u16()?;
    if version != WEIGHT_VERSION {
        return Err(NnError::UnsupportedVersion(version));
    }
    let count = r.u16()?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| NnError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(NnError::Malformed(format!("{name}: rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| NnError::Malformed(format!("{name}: shape overflow")))?;
        let raw = r.take(n.checked_mul(4).ok_or(NnError::TruncatedFile)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push(Entry { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(NnError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

/// Loads a weight file into the parameter layout of `net`. Every expected
/// tensor must be present with the expected shape, except `Head` tensors
/// when [`LoadOptions::skip_head`] is set; those are freshly initialized.
pub fn load_weights(bytes: &[u8], net: &Network, opts: LoadOptions) -> Result<Params<f32>> {
    let entries = parse_entries(bytes)?;
    let fresh: Params<f32> = net.init_params(opts.head_seed);
    let layout = net.param_layout();
    for e in &entries {
        if !layout.iter().any(|slot| slot.name == e.name) {
            return Err(NnError::ShapeMismatch(format!("unexpected tensor {}", e.name)));
        }
    }
    let mut tensors = Vec::with_capacity(layout.len());
    for (slot, init) in layout.into_iter().zip(fresh.tensors) {
        let ParamSlot {
            name,
            group,
            lr_scale,
            shape,
            ..
        } = slot;
        if group == LrGroup::Head && opts.skip_head {
            tensors.push(init);
            continue;
        }
        let entry = entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| NnError::ShapeMismatch(format!("missing tensor {name}")))?;
        if entry.shape != shape {
            return Err(NnError::ShapeMismatch(format!(
                "{name}: file has {:?}, network expects {shape:?}",
                entry.shape
            )));
        }
        tensors.push(Param {
            name,
            group,
            lr_scale,
            tensor: Tensor::new(shape, entry.data.clone())?,
        });
    }
    Ok(Params { tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerKind, LayerSpec};

    fn net(classes: usize) -> Network {
        Network::new(
            [2, 4, 4],
            vec![
                LayerSpec::new(
                    "conv1",
                    LayerKind::Conv3x3 {
                        in_channels: 2,
                        out_channels: 3,
                    },
                    LrGroup::Backbone,
                ),
                LayerSpec::new("relu1", LayerKind::Relu, LrGroup::Backbone),
                LayerSpec::new(
                    "fc",
                    LayerKind::Dense {
                        inputs: 48,
                        units: classes,
                    },
                    LrGroup::Head,
                ),
                LayerSpec::new("loss", LayerKind::SoftmaxXent, LrGroup::Head),
            ],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let n = net(5);
        let p: Params<f32> = n.init_params(3);
        let bytes = save_weights(&p);
        assert_eq!(&bytes[..4], b"HSSW");
        assert_eq!(load_weights(&bytes, &n, LoadOptions::default()).unwrap(), p);
    }

    #[test]
    fn header_fields_are_little_endian() {
        let n = net(2);
        let bytes = save_weights(&n.init_params::<f32>(0));
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..8], &[4, 0]);
        // first entry: name "conv1.weight"
        assert_eq!(&bytes[8..10], &[12, 0]);
        assert_eq!(&bytes[10..22], b"conv1.weight");
        assert_eq!(&bytes[22..26], &[4, 0, 0, 0]);
        assert_eq!(&bytes[26..30], &[3, 0, 0, 0]);
    }

    #[test]
    fn different_head_needs_skip_head() {
        let pretext = net(7);
        let p: Params<f32> = pretext.init_params(1);
        let bytes = save_weights(&p);
        let target = net(2);
        let err = load_weights(&bytes, &target, LoadOptions::default()).unwrap_err();
        assert!(matches!(err, NnError::ShapeMismatch(ref m) if m.starts_with("fc.weight")));
        let loaded = load_weights(
            &bytes,
            &target,
            LoadOptions {
                skip_head: true,
                head_seed: 9,
            },
        )
        .unwrap();
        assert_eq!(loaded.tensors[0], p.tensors[0]);
        assert_eq!(loaded.tensors[1], p.tensors[1]);
        assert_eq!(loaded.get("fc.weight").unwrap().tensor.shape, vec![2, 48]);
    }

    #[test]
    fn backbone_mismatch_is_fatal_even_with_skip_head() {
        let p: Params<f32> = net(2).init_params(1);
        let bytes = save_weights(&p);
        let other = Network::new(
            [1, 4, 4],
            vec![
                LayerSpec::new(
                    "conv1",
                    LayerKind::Conv3x3 {
                        in_channels: 1,
                        out_channels: 3,
                    },
                    LrGroup::Backbone,
                ),
                LayerSpec::new("fc", LayerKind::Dense { inputs: 48, units: 2 }, LrGroup::Head),
                LayerSpec::new("loss", LayerKind::SoftmaxXent, LrGroup::Head),
            ],
        )
        .unwrap();
        let opts = LoadOptions {
            skip_head: true,
            head_seed: 0,
        };
        assert!(matches!(
            load_weights(&bytes, &other, opts),
            Err(NnError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn corrupt_files() {
        let n = net(2);
        let mut bytes = save_weights(&n.init_params::<f32>(0));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(
            load_weights(&bad, &n, LoadOptions::default()).unwrap_err(),
            NnError::BadMagic
        );
        assert_eq!(
            load_weights(b"HS", &n, LoadOptions::default()).unwrap_err(),
            NnError::BadMagic
        );
        bytes.truncate(bytes.len() - 3);
        assert_eq!(
            load_weights(&bytes, &n, LoadOptions::default()).unwrap_err(),
            NnError::TruncatedFile
        );
        let mut v2 = save_weights(&n.init_params::<f32>(0));
        v2[4] = 2;
        assert_eq!(
            load_weights(&v2, &n, LoadOptions::default()).unwrap_err(),
            NnError::UnsupportedVersion(2)
        );
    }
}

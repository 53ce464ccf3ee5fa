//! Critical-neuron masks: relative thresholding of attribution scores and
//! forget-only / dual variants.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionScores;
use crate::error::{Error, Result};
use crate::model::Reader;

pub const MASK_MAGIC: &[u8; 8] = b"SIMUMASK";
pub const MASK_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Every forget-critical neuron, including those also critical for retain.
    #[default]
    Dual,
    /// Forget-critical and not retain-critical.
    ForgetOnly,
    AllOnes,
    /// Built directly rather than derived from scores.
    Custom,
}

impl MaskStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskStrategy::Dual => "dual",
            MaskStrategy::ForgetOnly => "forget_only",
            MaskStrategy::AllOnes => "all_ones",
            MaskStrategy::Custom => "custom",
        }
    }
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(MaskStrategy::Dual),
            "forget_only" => Ok(MaskStrategy::ForgetOnly),
            "all_ones" => Ok(MaskStrategy::AllOnes),
            "custom" => Ok(MaskStrategy::Custom),
            other => Err(Error::Config {
                field: "mask_strategy".into(),
                reason: format!("unknown strategy `{other}` (expected dual or forget_only)"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MaskMeta {
    pub t: Option<f64>,
    pub m: Option<usize>,
    pub source_hashes: Vec<String>,
    pub strategy: MaskStrategy,
    #[serde(default)]
    pub config_hash: String,
}

/// Per-layer bit vectors over MLP output neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronMask {
    layers: Vec<Vec<bool>>,
    pub meta: MaskMeta,
}

impl NeuronMask {
    pub fn from_layers(layers: Vec<Vec<bool>>, meta: MaskMeta) -> Result<Self> {
        if layers.is_empty() || layers[0].is_empty() {
            return Err(Error::contract("mask needs at least one layer and one neuron"));
        }
        let w = layers[0].len();
        if layers.iter().any(|l| l.len() != w) {
            return Err(Error::contract("mask layers differ in width"));
        }
        Ok(NeuronMask { layers, meta })
    }

    pub fn all_ones(n_layers: usize, width: usize) -> Self {
        NeuronMask {
            layers: vec![vec![true; width]; n_layers],
            meta: MaskMeta { strategy: MaskStrategy::AllOnes, ..MaskMeta::default() },
        }
    }

    pub fn empty(n_layers: usize, width: usize) -> Self {
        NeuronMask {
            layers: vec![vec![false; width]; n_layers],
            meta: MaskMeta { strategy: MaskStrategy::Custom, ..MaskMeta::default() },
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn layer(&self, l: usize) -> &[bool] {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.layers
    }

    pub fn get(&self, l: usize, k: usize) -> bool {
        self.layers[l][k]
    }

    pub fn set(&mut self, l: usize, k: usize, bit: bool) {
        self.layers[l][k] = bit;
    }

    pub fn check_dims(&self, n_layers: usize, width: usize) -> Result<()> {
        if self.n_layers() != n_layers || self.width() != width {
            return Err(Error::contract(format!(
                "mask is {}x{}, model needs {n_layers}x{width}",
                self.n_layers(),
                self.width()
            )));
        }
        Ok(())
    }

    /// True iff every set bit here is also set in `other`.
    pub fn is_subset_of(&self, other: &NeuronMask) -> bool {
        self.layers
            .iter()
            .zip(&other.layers)
            .all(|(a, b)| a.iter().zip(b).all(|(&x, &y)| !x || y))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MASK_MAGIC);
        out.extend_from_slice(&MASK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_layers() as u64).to_le_bytes());
        out.extend_from_slice(&(self.width() as u64).to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for layer in &self.layers {
            out.extend_from_slice(&pack_bits(layer));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0, origin };
        if r.take(8)? != MASK_MAGIC {
            return Err(Error::format(origin, "bad magic"));
        }
        let version = r.u32()?;
        if version != MASK_VERSION {
            return Err(Error::format(origin, format!("unsupported version {version}")));
        }
        let n_layers = r.u64()? as usize;
        let width = r.u64()? as usize;
        if n_layers == 0 || width == 0 || n_layers > 1 << 16 || width > 1 << 24 {
            return Err(Error::format(origin, format!("bad shape {n_layers}x{width}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: MaskMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::format(origin, e.to_string()))?;
        let nbytes = width.div_ceil(8);
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let packed = r.take(nbytes)?;
            layers.push(unpack_bits(packed, width).ok_or_else(|| Error::format(origin, format!("layer {l}: nonzero padding")))?);
        }
        if r.remaining() != 0 {
            return Err(Error::format(origin, "trailing bytes"));
        }
        Ok(NeuronMask { layers, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        NeuronMask::from_bytes(&bytes, path)
    }

    /// `layer,neuron` rows for every set bit.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,neuron\n");
        for (l, layer) in self.layers.iter().enumerate() {
            for (k, &b) in layer.iter().enumerate() {
                if b {
                    s.push_str(&format!("{l},{k}\n"));
                }
            }
        }
        s
    }
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(packed: &[u8], width: usize) -> Option<Vec<bool>> {
    let bits: Vec<bool> = (0..width).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
    let used = width % 8;
    if used != 0 && packed[packed.len() - 1] >> used != 0 {
        return None;
    }
    Some(bits)
}

/// Per-layer relative threshold on raw scores: bit = 1 iff
/// `score > t * max(layer)`; layers whose maximum is not positive are empty.
pub fn threshold_layers(scores: &[Vec<f64>], t: f64) -> Result<Vec<Vec<bool>>> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Config { field: "t".into(), reason: format!("threshold {t} outside (0,1]") });
    }
    Ok(scores
        .iter()
        .map(|layer| {
            let max = layer.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max <= 0.0 {
                return vec![false; layer.len()];
            }
            let cutoff = t * max;
            layer.iter().map(|&s| s > cutoff).collect()
        })
        .collect())
}

pub fn threshold_mask(scores: &AttributionScores, t: f64) -> Result<NeuronMask> {
    let layers = threshold_layers(&scores.layers, t)?;
    NeuronMask::from_layers(
        layers,
        MaskMeta {
            t: Some(t),
            m: Some(scores.m),
            source_hashes: vec![scores.content_hash()],
            strategy: MaskStrategy::Dual,
            config_hash: scores.header.config_hash.clone(),
        },
    )
}

pub fn merge_masks(forget: &NeuronMask, retain: &NeuronMask, strategy: MaskStrategy) -> Result<NeuronMask> {
    retain.check_dims(forget.n_layers(), forget.width())?;
    let layers = match strategy {
        MaskStrategy::Dual => forget.layers.clone(),
        MaskStrategy::ForgetOnly => forget
            .layers
            .iter()
            .zip(&retain.layers)
            .map(|(f, r)| f.iter().zip(r).map(|(&a, &b)| a && !b).collect())
            .collect(),
        other => return Err(Error::contract(format!("cannot merge with strategy {}", other.as_str()))),
    };
    let mut source_hashes = forget.meta.source_hashes.clone();
    source_hashes.extend(retain.meta.source_hashes.iter().cloned());
    NeuronMask::from_layers(
        layers,
        MaskMeta { t: forget.meta.t, m: forget.meta.m, source_hashes, strategy, config_hash: forget.meta.config_hash.clone() },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub per_layer: Vec<usize>,
    pub total: usize,
    pub capacity: usize,
    pub density: f64,
    pub empty_layers: Vec<usize>,
}

pub fn mask_stats(mask: &NeuronMask) -> MaskStats {
    let per_layer: Vec<usize> = mask.layers.iter().map(|l| l.iter().filter(|&&b| b).count()).collect();
    let total = per_layer.iter().sum();
    let capacity = mask.n_layers() * mask.width();
    MaskStats {
        empty_layers: per_layer.iter().enumerate().filter(|(_, &c)| c == 0).map(|(l, _)| l).collect(),
        per_layer,
        total,
        capacity,
        density: if capacity == 0 { 0.0 } else { total as f64 / capacity as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_layer(scores: Vec<f64>, t: f64) -> Vec<bool> {
        threshold_layers(&[scores], t).unwrap().remove(0)
    }

    #[test]
    fn worked_threshold() {
        assert_eq!(one_layer(vec![0.9, 0.3, 0.05], 0.3), vec![true, true, false]);
    }

    #[test]
    fn t_one_is_strict() {
        assert_eq!(one_layer(vec![0.9, 0.3, 0.05], 1.0), vec![false, false, false]);
        assert_eq!(one_layer(vec![0.5, 0.5], 1.0), vec![false, false]);
    }

    #[test]
    fn nonpositive_max_gives_empty_layer() {
        assert_eq!(one_layer(vec![-0.1, -0.5, -2.0], 0.5), vec![false; 3]);
        assert_eq!(one_layer(vec![0.0, 0.0], 0.1), vec![false; 2]);
    }

    #[test]
    fn t_out_of_range_rejected() {
        assert!(threshold_layers(&[vec![1.0]], 0.0).is_err());
        assert!(threshold_layers(&[vec![1.0]], 1.5).is_err());
        assert!(threshold_layers(&[vec![1.0]], f64::NAN).is_err());
    }

    #[test]
    fn merge_with_empty_retain() {
        let mut f = NeuronMask::empty(2, 4);
        f.set(0, 1, true);
        f.set(1, 3, true);
        let r = NeuronMask::empty(2, 4);
        for s in [MaskStrategy::Dual, MaskStrategy::ForgetOnly] {
            assert_eq!(merge_masks(&f, &r, s).unwrap().layers(), f.layers());
        }
    }

    #[test]
    fn forget_only_drops_dual_neurons() {
        let f = NeuronMask::from_layers(vec![vec![true, true, false]], MaskMeta::default()).unwrap();
        let r = NeuronMask::from_layers(vec![vec![true, false, true]], MaskMeta::default()).unwrap();
        let fo = merge_masks(&f, &r, MaskStrategy::ForgetOnly).unwrap();
        assert_eq!(fo.layer(0), &[false, true, false]);
        assert_eq!(merge_masks(&f, &r, MaskStrategy::Dual).unwrap().layer(0), &[true, true, false]);
    }

    #[test]
    fn stats_extremes() {
        let s = mask_stats(&NeuronMask::all_ones(4, 64));
        assert_eq!((s.total, s.density), (256, 1.0));
        let s = mask_stats(&NeuronMask::empty(4, 64));
        assert_eq!((s.total, s.density), (0, 0.0));
        assert_eq!(s.empty_layers, vec![0, 1, 2, 3]);
    }

    #[test]
    fn bytes_roundtrip_and_corruption() {
        let mut m = NeuronMask::empty(3, 13);
        m.set(0, 0, true);
        m.set(1, 12, true);
        m.set(2, 7, true);
        m.meta = MaskMeta {
            t: Some(0.3),
            m: Some(5),
            source_hashes: vec!["ab".into()],
            strategy: MaskStrategy::Dual,
            config_hash: "cd".into(),
        };
        let bytes = m.to_bytes().unwrap();
        let p = Path::new("mem");
        let back = NeuronMask::from_bytes(&bytes, p).unwrap();
        assert_eq!(back, m);
        assert_eq!(mask_stats(&back), mask_stats(&m));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(NeuronMask::from_bytes(&bad, p), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(NeuronMask::from_bytes(&bad, p).is_err());
        assert!(NeuronMask::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() |= 0x80;
        assert!(NeuronMask::from_bytes(&bad, p).is_err());
    }

    #[test]
    fn csv_lists_set_bits() {
        let mut m = NeuronMask::empty(2, 3);
        m.set(1, 2, true);
        assert_eq!(m.to_csv(), "layer,neuron\n1,2\n");
    }
}

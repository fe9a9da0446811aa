//! The composed layer: learned scalar mixtures of encoder sub-layer outputs
//! that become the cross-attention key and value sources of each decoder
//! layer.
//!
//! For decoder layer `l` and collected representations `H_1 .. H_C`:
//!
//! ```text
//! key_l   = Σ_i keys[l, i]   · H_i
//! value_l = Σ_i values[l, i] · H_i
//! ```
//!
//! The scalars are raw and unconstrained. A per-layer table holds `2·N`
//! vectors of `C` scalars; a shared table holds one key vector and one value
//! vector used by every decoder layer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transformer::EncoderTrace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionMode {
    /// Every decoder layer reads the topmost encoder output.
    Baseline,
    /// One composed key/value pair shared by all decoder layers.
    Shared,
    /// A distinct composed key/value pair per decoder layer.
    PerLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectMode {
    SaOnly,
    FfOnly,
    SaAndFf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sublayer {
    SelfAttention,
    FeedForward,
}

/// Identifies one collected representation, e.g. `L2.FF`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RepId {
    /// 1-based encoder layer.
    pub layer: usize,
    pub sublayer: Sublayer,
}

/// Inclusive 1-based range of encoder layers to collect from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRange {
    pub first: usize,
    pub last: usize,
}

impl LayerRange {
    pub fn all(enc_layers: usize) -> Self {
        LayerRange { first: 1, last: enc_layers }
    }

    pub fn len(&self) -> usize {
        self.last + 1 - self.first
    }

    pub fn is_empty(&self) -> bool {
        self.last < self.first
    }

    pub fn validate(&self, enc_layers: usize) -> Result<()> {
        if self.first == 0 || self.first > self.last || self.last > enc_layers {
            return Err(Error::Config(format!(
                "layer range {self} must be nonempty and within 1..{enc_layers}"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for LayerRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.first, self.last)
    }
}

impl FromStr for LayerRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("layer range {s:?} is not of the form a..b"));
        let (a, b) = s.split_once("..").ok_or_else(bad)?;
        let first = a.trim().parse().map_err(|_| bad())?;
        let last = b.trim().parse().map_err(|_| bad())?;
        let range = LayerRange { first, last };
        if range.first == 0 || range.first > range.last {
            return Err(bad());
        }
        Ok(range)
    }
}

impl fmt::Display for RepId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.sublayer {
            Sublayer::SelfAttention => "SA",
            Sublayer::FeedForward => "FF",
        };
        write!(f, "L{}.{}", self.layer, tag)
    }
}

impl FromStr for RepId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Data(format!("bad representation id {s:?}"));
        let rest = s.strip_prefix('L').ok_or_else(bad)?;
        let (layer, tag) = rest.split_once('.').ok_or_else(bad)?;
        let sublayer = match tag {
            "SA" => Sublayer::SelfAttention,
            "FF" => Sublayer::FeedForward,
            _ => return Err(bad()),
        };
        Ok(RepId { layer: layer.parse().map_err(|_| bad())?, sublayer })
    }
}

macro_rules! keyword_enum {
    ($ty:ty, $($variant:path => $word:literal),+ $(,)?) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $word),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($variant),)+
                    _ => Err(Error::Config(format!(
                        "unknown {} {s:?}", stringify!($ty)
                    ))),
                }
            }
        }
    };
}

keyword_enum!(CompositionMode,
    CompositionMode::Baseline => "baseline",
    CompositionMode::Shared => "shared",
    CompositionMode::PerLayer => "per_layer",
);

impl CollectMode {
    /// Command-line spelling: `sa`, `ff` or `both`.
    pub fn from_flag(s: &str) -> Result<Self> {
        match s {
            "sa" | "sa_only" => Ok(CollectMode::SaOnly),
            "ff" | "ff_only" => Ok(CollectMode::FfOnly),
            "both" | "sa_and_ff" => Ok(CollectMode::SaAndFf),
            _ => Err(Error::Config(format!("unknown collect mode {s:?}"))),
        }
    }
}

keyword_enum!(CollectMode,
    CollectMode::SaOnly => "sa",
    CollectMode::FfOnly => "ff",
    CollectMode::SaAndFf => "both",
);

/// Ordered identifiers of the representations collected under a mode:
/// layer ascending, self-attention before feed-forward within a layer.
/// The embedding output is never collected.
pub fn collected_ids(enc_layers: usize, mode: CollectMode, range: LayerRange) -> Result<Vec<RepId>> {
    range.validate(enc_layers)?;
    let mut ids = Vec::new();
    for layer in range.first..=range.last {
        if mode != CollectMode::FfOnly {
            ids.push(RepId { layer, sublayer: Sublayer::SelfAttention });
        }
        if mode != CollectMode::SaOnly {
            ids.push(RepId { layer, sublayer: Sublayer::FeedForward });
        }
    }
    if ids.is_empty() {
        return Err(Error::Config("collection selects no representations".into()));
    }
    Ok(ids)
}

#[derive(Clone, Debug)]
pub struct CollectedReps {
    pub ids: Vec<RepId>,
    pub mats: Vec<Tensor>,
}

impl CollectedReps {
    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }
}

pub fn collect(trace: &EncoderTrace, mode: CollectMode, range: LayerRange) -> Result<CollectedReps> {
    let ids = collected_ids(trace.layers(), mode, range)?;
    let mats = ids
        .iter()
        .map(|id| match id.sublayer {
            Sublayer::SelfAttention => trace.sa[id.layer - 1].clone(),
            Sublayer::FeedForward => trace.ff[id.layer - 1].clone(),
        })
        .collect();
    Ok(CollectedReps { ids, mats })
}

/// Mixing scalars for keys and values.
///
/// `keys` and `values` are `R × C` with `R = N` in per-layer mode and
/// `R = 1` in shared mode.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositionTable {
    pub mode: CompositionMode,
    pub ids: Vec<RepId>,
    pub dec_layers: usize,
    pub keys: Tensor,
    pub values: Tensor,
}

impl CompositionTable {
    /// Every scalar starts at `1/C`, so the initial sources are the mean of
    /// the collected representations.
    pub fn init(
        mode: CompositionMode,
        enc_layers: usize,
        dec_layers: usize,
        collect: CollectMode,
        range: LayerRange,
    ) -> Result<Self> {
        let rows = match mode {
            CompositionMode::Baseline => {
                return Err(Error::Config("baseline mode has no composition table".into()))
            }
            CompositionMode::Shared => 1,
            CompositionMode::PerLayer => dec_layers,
        };
        let ids = collected_ids(enc_layers, collect, range)?;
        let c = ids.len();
        let fill = Tensor::full(&[rows, c], 1.0 / c as f64);
        Ok(CompositionTable { mode, ids, dec_layers, keys: fill.clone(), values: fill })
    }

    pub fn width(&self) -> usize {
        self.ids.len()
    }

    pub fn param_count(&self) -> usize {
        self.keys.len() + self.values.len()
    }

    fn row_for(&self, layer: usize) -> Result<usize> {
        if layer == 0 || layer > self.dec_layers {
            return Err(Error::Config(format!(
                "decoder layer {layer} outside 1..{}",
                self.dec_layers
            )));
        }
        Ok(match self.mode {
            CompositionMode::PerLayer => layer - 1,
            _ => 0,
        })
    }

    pub fn key_weights(&self, layer: usize) -> Result<&[f64]> {
        let r = self.row_for(layer)?;
        Ok(self.keys.row(r))
    }

    pub fn value_weights(&self, layer: usize) -> Result<&[f64]> {
        let r = self.row_for(layer)?;
        Ok(self.values.row(r))
    }

    /// Key and value source representations for 1-based decoder `layer`.
    pub fn compose(&self, reps: &CollectedReps, layer: usize) -> Result<(Tensor, Tensor)> {
        if reps.len() != self.width() {
            return Err(Error::Config(format!(
                "table mixes {} representations, {} collected",
                self.width(),
                reps.len()
            )));
        }
        let key = weighted_sum(&reps.mats, self.key_weights(layer)?)?;
        let value = weighted_sum(&reps.mats, self.value_weights(layer)?)?;
        Ok((key, value))
    }

    /// Column `l-1` of the returned `C × N` matrices is decoder layer `l`.
    pub fn export_matrices(&self) -> (Tensor, Tensor) {
        let c = self.width();
        let n = self.dec_layers;
        let build = |src: &Tensor| {
            let mut m = Tensor::zeros(&[c, n]);
            for l in 0..n {
                let r = if self.mode == CompositionMode::PerLayer { l } else { 0 };
                for i in 0..c {
                    m.data_mut()[i * n + l] = src.get(r, i);
                }
            }
            m
        };
        (build(&self.keys), build(&self.values))
    }

    /// CSV with header `rep_id,dec1..decN`, one row per collected representation.
    pub fn to_csv(&self) -> Result<(String, String)> {
        let (k, v) = self.export_matrices();
        Ok((self.matrix_csv(&k)?, self.matrix_csv(&v)?))
    }

    fn matrix_csv(&self, m: &Tensor) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["rep_id".to_string()];
        header.extend((1..=self.dec_layers).map(|l| format!("dec{l}")));
        w.write_record(&header)?;
        for (i, id) in self.ids.iter().enumerate() {
            let mut rec = vec![id.to_string()];
            rec.extend(m.row(i).iter().map(|x| format!("{x:?}")));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Parses the two CSVs written by [`CompositionTable::to_csv`].
    pub fn from_csv(mode: CompositionMode, keys_csv: &str, values_csv: &str) -> Result<Self> {
        let (ids, keys) = parse_matrix(keys_csv)?;
        let (ids_v, values) = parse_matrix(values_csv)?;
        if ids != ids_v || keys.shape() != values.shape() {
            return Err(Error::Data("key and value tables disagree in layout".into()));
        }
        let [c, n] = keys.dims2()?;
        let collapse = |m: &Tensor| -> Result<Tensor> {
            match mode {
                CompositionMode::PerLayer => m.transpose(),
                CompositionMode::Shared => {
                    let first: Vec<f64> = (0..c).map(|i| m.get(i, 0)).collect();
                    if (0..n).any(|l| (0..c).any(|i| m.get(i, l) != first[i])) {
                        return Err(Error::Data("shared table has differing columns".into()));
                    }
                    Tensor::new(vec![1, c], first)
                }
                CompositionMode::Baseline => {
                    Err(Error::Config("baseline mode has no composition table".into()))
                }
            }
        };
        Ok(CompositionTable { mode, ids, dec_layers: n, keys: collapse(&keys)?, values: collapse(&values)? })
    }
}

fn parse_matrix(text: &str) -> Result<(Vec<RepId>, Tensor)> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let n = r.headers()?.len().saturating_sub(1);
    if n == 0 {
        return Err(Error::Data("composition CSV has no decoder columns".into()));
    }
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        ids.push(rec[0].parse()?);
        for field in rec.iter().skip(1) {
            data.push(field.parse::<f64>().map_err(|e| Error::Data(format!("{field:?}: {e}")))?);
        }
    }
    if ids.is_empty() {
        return Err(Error::Data("composition CSV has no rows".into()));
    }
    let m = Tensor::new(vec![ids.len(), n], data)?;
    Ok((ids, m))
}

/// `Σ_i weights[i] · mats[i]`.
pub fn weighted_sum(mats: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    if mats.len() != weights.len() || mats.is_empty() {
        return Err(Error::Config(format!(
            "{} weights for {} representations",
            weights.len(),
            mats.len()
        )));
    }
    let mut out = Tensor::zeros(mats[0].shape());
    for (m, &w) in mats.iter().zip(weights) {
        if m.shape() != out.shape() {
            return Err(Error::Shape(format!(
                "collected representations disagree: {:?} vs {:?}",
                m.shape(),
                out.shape()
            )));
        }
        for (o, &x) in out.data_mut().iter_mut().zip(m.data()) {
            *o += w * x;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(ids: &[RepId]) -> Vec<String> {
        ids.iter().map(ToString::to_string).collect()
    }

    #[test]
    fn ordering_layer_then_sublayer() {
        let ids = collected_ids(2, CollectMode::SaAndFf, LayerRange::all(2)).unwrap();
        assert_eq!(names(&ids), ["L1.SA", "L1.FF", "L2.SA", "L2.FF"]);
        let ids = collected_ids(3, CollectMode::FfOnly, LayerRange::all(3)).unwrap();
        assert_eq!(names(&ids), ["L1.FF", "L2.FF", "L3.FF"]);
    }

    #[test]
    fn top_half_collection() {
        let ids = collected_ids(6, CollectMode::SaAndFf, LayerRange { first: 4, last: 6 }).unwrap();
        assert_eq!(ids.len(), 6);
        assert_eq!(ids[0].to_string(), "L4.SA");
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(collected_ids(2, CollectMode::SaAndFf, LayerRange { first: 0, last: 1 }).is_err());
        assert!(collected_ids(2, CollectMode::SaAndFf, LayerRange { first: 2, last: 3 }).is_err());
        assert!("3..1".parse::<LayerRange>().is_err());
        assert_eq!("2..2".parse::<LayerRange>().unwrap(), LayerRange { first: 2, last: 2 });
    }

    #[test]
    fn init_is_uniform_and_counts_match() {
        let t = CompositionTable::init(CompositionMode::PerLayer, 2, 2, CollectMode::SaAndFf, LayerRange::all(2))
            .unwrap();
        assert!(t.keys.data().iter().chain(t.values.data()).all(|&w| w == 0.25));
        let t = CompositionTable::init(CompositionMode::PerLayer, 6, 6, CollectMode::SaAndFf, LayerRange::all(6))
            .unwrap();
        assert_eq!(t.param_count(), 144);
        for n in [1, 3, 6] {
            let t = CompositionTable::init(CompositionMode::Shared, 6, n, CollectMode::SaAndFf, LayerRange::all(6))
                .unwrap();
            assert_eq!(t.param_count(), 24);
        }
        assert!(CompositionTable::init(CompositionMode::Baseline, 2, 2, CollectMode::SaAndFf, LayerRange::all(2))
            .is_err());
    }

    #[test]
    fn selector_weights_pick_one_representation() {
        let mats: Vec<Tensor> = (0..4).map(|i| Tensor::full(&[3, 2], i as f64 + 0.5)).collect();
        let out = weighted_sum(&mats, &[0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(out, mats[3]);
    }

    #[test]
    fn layer_out_of_range() {
        let t = CompositionTable::init(CompositionMode::PerLayer, 2, 2, CollectMode::SaAndFf, LayerRange::all(2))
            .unwrap();
        assert!(t.key_weights(0).is_err());
        assert!(t.key_weights(3).is_err());
    }

    #[test]
    fn csv_header_and_round_trip() {
        let mut t = CompositionTable::init(CompositionMode::PerLayer, 2, 3, CollectMode::SaAndFf, LayerRange::all(2))
            .unwrap();
        t.keys.data_mut()[5] = -0.1234567890123;
        t.values.data_mut()[0] = 1e-17;
        let (k, v) = t.to_csv().unwrap();
        assert!(k.starts_with("rep_id,dec1,dec2,dec3\nL1.SA,"));
        assert_eq!(k.lines().count(), 5);
        assert_eq!(CompositionTable::from_csv(CompositionMode::PerLayer, &k, &v).unwrap(), t);

        let shared = CompositionTable::init(CompositionMode::Shared, 2, 3, CollectMode::FfOnly, LayerRange::all(2))
            .unwrap();
        let (k, v) = shared.to_csv().unwrap();
        assert_eq!(CompositionTable::from_csv(CompositionMode::Shared, &k, &v).unwrap(), shared);
    }
}

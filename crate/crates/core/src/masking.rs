//! MLM corruption.
//!
//! A fixed count `k = max(1, round(0.15 n))` of the `n` maskable positions is
//! drawn without replacement. Each chosen position becomes MASK (80%), stays
//! unchanged (10%) or takes a uniformly random text token (10%); all of them
//! carry a prediction label.

use rand::seq::index;
use rand::Rng;

use crate::bpe::SpecialIds;
use crate::error::{Error, Result};
use crate::packing::{TokenCount, TrainingInstance};
use crate::rng::{self, tag};

/// Label value meaning "no prediction at this position".
pub const NO_PRED: u32 = u32::MAX;
pub const SELECT_RATE: f64 = 0.15;
pub const MASK_SHARE: f64 = 0.8;
pub const KEEP_SHARE: f64 = 0.1;
/// Number of precomputed patterns per instance under static masking.
pub const STATIC_REPLICAS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Corruption {
    Mask,
    Keep,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskingMode {
    Static,
    Dynamic,
}

impl MaskingMode {
    pub fn name(self) -> &'static str {
        match self {
            MaskingMode::Static => "static",
            MaskingMode::Dynamic => "dynamic",
        }
    }
}

impl std::str::FromStr for MaskingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "static" => Ok(MaskingMode::Static),
            "dynamic" => Ok(MaskingMode::Dynamic),
            other => Err(Error::Argument(format!("unknown masking mode {other:?}"))),
        }
    }
}

impl serde::Serialize for MaskingMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> serde::Deserialize<'de> for MaskingMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedExample {
    pub input_ids: Vec<u32>,
    /// Original id at selected positions, [`NO_PRED`] elsewhere.
    pub labels: Vec<u32>,
    /// Sorted selected positions.
    pub mask_positions: Vec<usize>,
    /// What happened at each selected position, aligned with `mask_positions`.
    pub corruption: Vec<Corruption>,
    pub segment_ids: Vec<u8>,
    pub nsp_label: Option<bool>,
}

impl MaskedExample {
    /// The pre-mask token sequence.
    pub fn restore(&self) -> Vec<u32> {
        let mut ids = self.input_ids.clone();
        for &p in &self.mask_positions {
            ids[p] = self.labels[p];
        }
        ids
    }
}

impl TokenCount for MaskedExample {
    fn token_count(&self) -> usize {
        self.input_ids.len()
    }
}

pub fn selection_count(maskable: usize) -> usize {
    ((SELECT_RATE * maskable as f64).round() as usize).max(1)
}

pub fn apply_mask<R: Rng>(
    inst: &TrainingInstance,
    specials: SpecialIds,
    rng: &mut R,
) -> Result<MaskedExample> {
    let candidates: Vec<usize> = inst
        .tokens
        .iter()
        .enumerate()
        .filter(|&(_, &t)| !specials.is_special(t))
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return Err(Error::Data("instance has no maskable tokens".into()));
    }
    let k = selection_count(candidates.len());
    let mut mask_positions: Vec<usize> = index::sample(rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    mask_positions.sort_unstable();

    let mut input_ids = inst.tokens.clone();
    let mut labels = vec![NO_PRED; input_ids.len()];
    let mut corruption = Vec::with_capacity(k);
    for &p in &mask_positions {
        labels[p] = inst.tokens[p];
        let u: f64 = rng.gen();
        let action = if u < MASK_SHARE {
            input_ids[p] = specials.mask;
            Corruption::Mask
        } else if u < MASK_SHARE + KEEP_SHARE {
            Corruption::Keep
        } else {
            input_ids[p] = rng.gen_range(0..specials.text_size);
            Corruption::Random
        };
        corruption.push(action);
    }
    Ok(MaskedExample {
        input_ids,
        labels,
        mask_positions,
        corruption,
        segment_ids: inst.segment_ids.clone(),
        nsp_label: inst.nsp_label,
    })
}

/// Ten fixed patterns for one instance; epoch `e` uses replica `e mod 10`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaticMaskSet {
    pub instance_id: u64,
    pub replicas: Vec<MaskedExample>,
}

impl StaticMaskSet {
    pub fn replica_for_epoch(epoch: u64) -> usize {
        (epoch % STATIC_REPLICAS as u64) as usize
    }

    pub fn for_epoch(&self, epoch: u64) -> &MaskedExample {
        &self.replicas[Self::replica_for_epoch(epoch)]
    }

    /// Replica index used at each of the first `epochs` epochs.
    pub fn schedule(epochs: u64) -> Vec<usize> {
        (0..epochs).map(Self::replica_for_epoch).collect()
    }
}

fn static_replica(
    inst: &TrainingInstance,
    instance_id: u64,
    replica: usize,
    global_seed: u64,
    specials: SpecialIds,
) -> Result<MaskedExample> {
    let mut rng = rng::keyed_rng(&[global_seed, tag::STATIC_MASK, instance_id, replica as u64]);
    apply_mask(inst, specials, &mut rng)
}

pub fn build_static_masks(
    inst: &TrainingInstance,
    instance_id: u64,
    global_seed: u64,
    specials: SpecialIds,
) -> Result<StaticMaskSet> {
    let replicas = (0..STATIC_REPLICAS)
        .map(|r| static_replica(inst, instance_id, r, global_seed, specials))
        .collect::<Result<_>>()?;
    Ok(StaticMaskSet {
        instance_id,
        replicas,
    })
}

/// A fresh pattern for one presentation of an instance.
pub fn dynamic_mask(
    inst: &TrainingInstance,
    instance_id: u64,
    epoch: u64,
    seed: u64,
    specials: SpecialIds,
) -> Result<MaskedExample> {
    let mut rng = rng::keyed_rng(&[seed, tag::DYNAMIC_MASK, epoch, instance_id]);
    apply_mask(inst, specials, &mut rng)
}

/// The pattern an instance receives at `epoch` under `mode`. For static
/// masking this equals replica `epoch mod 10` of [`build_static_masks`].
pub fn mask_for_epoch(
    mode: MaskingMode,
    inst: &TrainingInstance,
    instance_id: u64,
    epoch: u64,
    seed: u64,
    specials: SpecialIds,
) -> Result<MaskedExample> {
    match mode {
        MaskingMode::Dynamic => dynamic_mask(inst, instance_id, epoch, seed, specials),
        MaskingMode::Static => static_replica(
            inst,
            instance_id,
            StaticMaskSet::replica_for_epoch(epoch),
            seed,
            specials,
        ),
    }
}

/// Epoch-major stream of dynamically masked examples; instance ids are
/// positions in `instances`.
pub fn dynamic_stream<'a>(
    instances: &'a [TrainingInstance],
    seed: u64,
    specials: SpecialIds,
    epochs: u64,
) -> impl Iterator<Item = Result<MaskedExample>> + 'a {
    (0..epochs).flat_map(move |epoch| {
        instances
            .iter()
            .enumerate()
            .map(move |(id, inst)| dynamic_mask(inst, id as u64, epoch, seed, specials))
    })
}

/// Tallies of corruption outcomes over many examples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MaskTally {
    pub maskable: usize,
    pub selected: usize,
    pub masked: usize,
    pub kept: usize,
    pub random: usize,
    pub special_selected: usize,
}

impl MaskTally {
    pub fn add(&mut self, original: &[u32], ex: &MaskedExample, specials: SpecialIds) {
        self.maskable += original.iter().filter(|&&t| !specials.is_special(t)).count();
        self.selected += ex.mask_positions.len();
        self.special_selected += ex
            .mask_positions
            .iter()
            .filter(|&&p| specials.is_special(original[p]))
            .count();
        for c in &ex.corruption {
            match c {
                Corruption::Mask => self.masked += 1,
                Corruption::Keep => self.kept += 1,
                Corruption::Random => self.random += 1,
            }
        }
    }

    pub fn selected_fraction(&self) -> f64 {
        self.selected as f64 / self.maskable.max(1) as f64
    }

    pub fn shares(&self) -> (f64, f64, f64) {
        let n = self.selected.max(1) as f64;
        (
            self.masked as f64 / n,
            self.kept as f64 / n,
            self.random as f64 / n,
        )
    }
}

//! The loss weight vector and the weighted total loss.
//!
//! The index set is fixed: ten task weights followed by six distillation
//! weights. Keys are modality letter + task letter for tasks (`RS` is RGB
//! shuffle) and source letter + `D` + layer for distillation (`AD2` distills
//! the audio embedding).

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use rand::Rng as _;

use crate::distill::DistillSlot;
use crate::error::{Error, Result};
use crate::model::Modality;

/// Self-supervised task kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskId {
    /// Frame shuffle detection.
    Shuffle,
    /// Backward (reversed) playback detection.
    Reverse,
    /// Mean color regression from grey.
    Colorize,
    /// Audio alignment.
    AudioAlign,
    /// Future frame prediction.
    FuturePredict,
    /// Flow regression from RGB.
    RgbToFlow,
    /// Joint embedding with grey.
    Embed,
}

impl TaskId {
    pub fn letter(self) -> char {
        match self {
            TaskId::Shuffle => 'S',
            TaskId::Reverse => 'B',
            TaskId::Colorize => 'C',
            TaskId::AudioAlign => 'A',
            TaskId::FuturePredict => 'P',
            TaskId::RgbToFlow => 'F',
            TaskId::Embed => 'E',
        }
    }
}

pub const NUM_WEIGHTS: usize = 16;
pub const NUM_TASK_WEIGHTS: usize = 10;

/// One coordinate of the weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LossKey {
    Task(Modality, TaskId),
    Distill(DistillSlot),
}

impl LossKey {
    /// Canonical order.
    pub const ALL: [LossKey; NUM_WEIGHTS] = [
        LossKey::Task(Modality::Rgb, TaskId::Shuffle),
        LossKey::Task(Modality::Rgb, TaskId::Reverse),
        LossKey::Task(Modality::Rgb, TaskId::AudioAlign),
        LossKey::Task(Modality::Rgb, TaskId::FuturePredict),
        LossKey::Task(Modality::Rgb, TaskId::RgbToFlow),
        LossKey::Task(Modality::Rgb, TaskId::Embed),
        LossKey::Task(Modality::Flow, TaskId::Shuffle),
        LossKey::Task(Modality::Flow, TaskId::Reverse),
        LossKey::Task(Modality::Flow, TaskId::AudioAlign),
        LossKey::Task(Modality::Grey, TaskId::Colorize),
        LossKey::Distill(DistillSlot::ALL[0]),
        LossKey::Distill(DistillSlot::ALL[1]),
        LossKey::Distill(DistillSlot::ALL[2]),
        LossKey::Distill(DistillSlot::ALL[3]),
        LossKey::Distill(DistillSlot::ALL[4]),
        LossKey::Distill(DistillSlot::ALL[5]),
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).expect("key in canonical set")
    }

    pub fn code(self) -> String {
        match self {
            LossKey::Task(m, t) => format!("{}{}", m.letter(), t.letter()),
            LossKey::Distill(s) => format!("{}D{}", s.source.letter(), s.layer.number()),
        }
    }

    /// Heatmap column label: the task letter, or `D1`/`D2`.
    pub fn column(self) -> String {
        match self {
            LossKey::Task(_, t) => t.letter().to_string(),
            LossKey::Distill(s) => format!("D{}", s.layer.number()),
        }
    }

    pub fn row(self) -> Modality {
        match self {
            LossKey::Task(m, _) => m,
            LossKey::Distill(s) => s.source,
        }
    }

    pub fn is_distill(self) -> bool {
        matches!(self, LossKey::Distill(_))
    }
}

impl fmt::Display for LossKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

impl FromStr for LossKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKey::ALL
            .into_iter()
            .find(|k| k.code() == s)
            .ok_or_else(|| Error::format("loss key", format!("unknown key `{s}`")))
    }
}

macro_rules! keyed_vector {
    ($name:ident) => {
        impl $name {
            pub fn from_array(values: [f64; NUM_WEIGHTS]) -> Self {
                Self(values)
            }

            pub fn filled(value: f64) -> Self {
                Self([value; NUM_WEIGHTS])
            }

            pub fn values(&self) -> &[f64; NUM_WEIGHTS] {
                &self.0
            }

            pub fn iter(&self) -> impl Iterator<Item = (LossKey, f64)> + '_ {
                LossKey::ALL.iter().map(|&k| (k, self.0[k.index()]))
            }
        }

        impl Index<LossKey> for $name {
            type Output = f64;
            fn index(&self, k: LossKey) -> &f64 {
                &self.0[k.index()]
            }
        }

        impl IndexMut<LossKey> for $name {
            fn index_mut(&mut self, k: LossKey) -> &mut f64 {
                &mut self.0[k.index()]
            }
        }
    };
}

/// The search-space individual: one weight per component loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights([f64; NUM_WEIGHTS]);

/// Per-component loss values, keyed like [`LossWeights`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentLosses([f64; NUM_WEIGHTS]);

keyed_vector!(LossWeights);
keyed_vector!(ComponentLosses);

impl LossWeights {
    pub fn zeros() -> Self {
        Self::filled(0.0)
    }

    /// Every coordinate i.i.d. uniform on `[0, 1]`.
    pub fn random(r: &mut crate::rng::Rng) -> Self {
        let mut v = [0.0; NUM_WEIGHTS];
        for x in v.iter_mut() {
            *x = r.random_range(0.0..=1.0);
        }
        Self(v)
    }

    pub fn values_mut(&mut self) -> &mut [f64; NUM_WEIGHTS] {
        &mut self.0
    }

    /// Every coordinate outside `[0, 1]` (or non-finite), by key.
    pub fn violations(&self) -> Vec<String> {
        self.iter()
            .filter(|(_, v)| !(0.0..=1.0).contains(v))
            .map(|(k, v)| format!("{k} = {v} is outside [0, 1]"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidWeights(v))
        }
    }

    /// Parses `key = value` entries into weights. Reports every missing,
    /// unknown, duplicated, malformed or out-of-range entry at once.
    pub fn from_entries<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut seen: BTreeMap<LossKey, f64> = BTreeMap::new();
        let mut problems = Vec::new();
        let mut count = 0;
        for (key, raw) in entries {
            count += 1;
            let key = key.trim();
            let Ok(k) = key.parse::<LossKey>() else {
                problems.push(format!("unknown key `{key}`"));
                continue;
            };
            let Ok(v) = raw.trim().parse::<f64>() else {
                problems.push(format!("{key}: `{}` is not a number", raw.trim()));
                continue;
            };
            if !(0.0..=1.0).contains(&v) {
                problems.push(format!("{key} = {v} is outside [0, 1]"));
            }
            if seen.insert(k, v).is_some() {
                problems.push(format!("duplicate key `{key}`"));
            }
        }
        for k in LossKey::ALL {
            if !seen.contains_key(&k) {
                problems.push(format!("missing key `{k}`"));
            }
        }
        if count != NUM_WEIGHTS {
            problems.push(format!("expected {NUM_WEIGHTS} entries, found {count}"));
        }
        if !problems.is_empty() {
            return Err(Error::InvalidWeights(problems));
        }
        let mut w = Self::zeros();
        for (k, v) in seen {
            w[k] = v;
        }
        Ok(w)
    }

    /// Canonical text: one `key = value` line per entry in canonical order,
    /// six decimal digits.
    pub fn to_canonical_string(&self) -> String {
        self.iter().map(|(k, v)| format!("{k} = {v:.6}\n")).collect()
    }

    /// Parses canonical text. Blank lines and `#` comments are ignored.
    pub fn parse_canonical(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut problems = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => entries.push((k, v)),
                None => problems.push(format!("line {}: expected `key = value`", n + 1)),
            }
        }
        match Self::from_entries(entries) {
            Ok(w) if problems.is_empty() => Ok(w),
            Ok(_) => Err(Error::InvalidWeights(problems)),
            Err(Error::InvalidWeights(more)) => {
                problems.extend(more);
                Err(Error::InvalidWeights(problems))
            }
            Err(e) => Err(e),
        }
    }

    /// Rounds every coordinate to the six-digit canonical precision.
    pub fn quantized(&self) -> Self {
        Self::parse_canonical(&self.to_canonical_string()).expect("canonical text parses")
    }
}

impl ComponentLosses {
    pub fn all_nonnegative(&self) -> bool {
        self.0.iter().all(|&v| v >= 0.0 && v.is_finite())
    }
}

/// The weighted total `Σ λ_k · L_k` over all sixteen components.
pub fn total_loss(w: &LossWeights, c: &ComponentLosses) -> f64 {
    LossKey::ALL.iter().map(|&k| w[k] * c[k]).sum()
}

/// Checks a weight map given as raw key/value pairs, returning every
/// violation. Used for externally supplied weights.
pub fn validate_map(entries: &BTreeMap<String, f64>) -> std::result::Result<(), Vec<String>> {
    let texts: Vec<(String, String)> = entries.iter().map(|(k, v)| (k.clone(), v.to_string())).collect();
    match LossWeights::from_entries(texts.iter().map(|(k, v)| (k.as_str(), v.as_str()))) {
        Ok(_) => Ok(()),
        Err(Error::InvalidWeights(v)) => Err(v),
        Err(e) => Err(vec![e.to_string()]),
    }
}

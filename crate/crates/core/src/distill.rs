//! Cross-modal activation matching into the RGB network.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{ActivationTrace, Modality};
use crate::tensor::Tensor;

/// Which activation a distillation penalty compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Layer {
    /// Output of the first block.
    Block1,
    Embedding,
}

impl Layer {
    pub fn number(self) -> u8 {
        match self {
            Layer::Block1 => 1,
            Layer::Embedding => 2,
        }
    }

    pub fn pick<T>(self, trace: &ActivationTrace<T>) -> &T {
        match self {
            Layer::Block1 => &trace.layer1,
            Layer::Embedding => &trace.embedding,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DistillSlot {
    pub source: Modality,
    pub layer: Layer,
}

impl DistillSlot {
    pub const ALL: [DistillSlot; 6] = [
        DistillSlot::new(Modality::Audio, Layer::Block1),
        DistillSlot::new(Modality::Audio, Layer::Embedding),
        DistillSlot::new(Modality::Flow, Layer::Block1),
        DistillSlot::new(Modality::Flow, Layer::Embedding),
        DistillSlot::new(Modality::Grey, Layer::Block1),
        DistillSlot::new(Modality::Grey, Layer::Embedding),
    ];

    pub const fn new(source: Modality, layer: Layer) -> Self {
        Self { source, layer }
    }
}

/// Whether distillation gradients reach the source (non-RGB) network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    /// Both networks move toward each other.
    #[default]
    Bidirectional,
    /// Only the RGB network is pulled toward the source activations.
    StopSource,
}

/// Graph-level penalty: mean squared difference at the slot's layer.
pub fn distill_node(
    g: &mut Graph,
    main: &ActivationTrace<NodeId>,
    other: &ActivationTrace<NodeId>,
    slot: DistillSlot,
    mode: DistillMode,
) -> Result<NodeId> {
    let a = *slot.layer.pick(main);
    let mut b = *slot.layer.pick(other);
    check_aligned(g.value(a), g.value(b))?;
    if mode == DistillMode::StopSource {
        b = g.detach(b)?;
    }
    g.mse(a, b)
}

/// Value-level penalty between two traces of the same clips.
pub fn distill_loss(main: &ActivationTrace, other: &ActivationTrace, slot: DistillSlot) -> Result<f64> {
    let (a, b) = (slot.layer.pick(main), slot.layer.pick(other));
    check_aligned(a, b)?;
    a.same_shape(b, "distill_loss")?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum();
    Ok(s / a.len() as f64)
}

fn check_aligned(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() != b.rows() {
        return Err(Error::BatchMisaligned {
            left: a.rows(),
            right: b.rows(),
        });
    }
    Ok(())
}

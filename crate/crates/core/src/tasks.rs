//! Self-supervised tasks. Each builds one component loss on a shared graph.
//!
//! | key | encoder(s)  | target                                          | loss      |
//! |-----|-------------|-------------------------------------------------|-----------|
//! | RS  | rgb         | were the frames shuffled?                       | logistic  |
//! | RB  | rgb         | were the frames reversed?                       | logistic  |
//! | RA  | rgb + audio | is the audio track aligned with the clip?       | logistic  |
//! | RP  | rgb         | last 4 grey frames from the unmasked prefix     | mse       |
//! | RF  | rgb         | flow field                                      | mse       |
//! | RE  | rgb + grey  | paired embeddings close, unpaired ≥ margin apart| contrastive |
//! | FS  | flow        | were the flow frames shuffled?                  | logistic  |
//! | FB  | flow        | were the flow frames reversed?                  | logistic  |
//! | FA  | flow + audio| is the audio track aligned with the clip?       | logistic  |
//! | GC  | grey        | per-channel mean color                          | mse       |

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::autodiff::{Graph, NodeId};
use crate::distill::{distill_node, DistillMode, DistillSlot};
use crate::error::{Error, Result};
use crate::model::{encode_node, stack_rows, ActivationTrace, AlignHead, Linear, Model, Modality, FUTURE_FRAMES};
use crate::rng::{self, stream, Rng};
use crate::synth::{misaligned_audio, MultiModalClip};
use crate::tensor::Tensor;
use crate::weights::{ComponentLosses, LossKey, LossWeights, TaskId};

pub const EMBED_MARGIN: f64 = 1.0;

/// Builds component losses for one batch on a single graph, sharing the
/// plain forward pass of each encoder between tasks.
pub struct LossBuilder<'a> {
    graph: Graph,
    model: Model<NodeId>,
    clips: &'a [&'a MultiModalClip],
    pool: &'a [MultiModalClip],
    seed: u64,
    mode: DistillMode,
    traces: [Option<ActivationTrace<NodeId>>; 4],
}

impl<'a> LossBuilder<'a> {
    pub fn new(
        model: &Model,
        clips: &'a [&'a MultiModalClip],
        pool: &'a [MultiModalClip],
        seed: u64,
        mode: DistillMode,
    ) -> Self {
        let mut graph = Graph::new();
        let bound = model.bind(&mut graph);
        Self {
            graph,
            model: bound,
            clips,
            pool,
            seed,
            mode,
            traces: [None, None, None, None],
        }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn into_graph(self) -> Graph {
        self.graph
    }

    pub fn bound(&self) -> &Model<NodeId> {
        &self.model
    }

    fn task_rng(&self, key: LossKey) -> Rng {
        rng::rng(self.seed, &[stream::TASK, key.index() as u64])
    }

    /// Forward pass of one encoder on the unmodified batch.
    pub fn trace(&mut self, m: Modality) -> Result<ActivationTrace<NodeId>> {
        let slot = m as usize;
        if let Some(t) = &self.traces[slot] {
            return Ok(t.clone());
        }
        let rows = stack_rows(self.clips.iter().map(|c| m.of_clip(c).data()));
        let t = self.encode_rows(m, rows)?;
        self.traces[slot] = Some(t.clone());
        Ok(t)
    }

    fn encode_rows(&mut self, m: Modality, rows: Tensor) -> Result<ActivationTrace<NodeId>> {
        let x = self.graph.constant(rows);
        let enc = self.model.encoder(m).clone();
        encode_node(&mut self.graph, &enc, x)
    }

    fn linear_head(&mut self, head: &Linear<NodeId>, x: NodeId) -> Result<NodeId> {
        self.graph.affine(x, head.weight, head.bias)
    }

    pub fn loss(&mut self, key: LossKey) -> Result<NodeId> {
        match key {
            LossKey::Task(m, TaskId::Shuffle) => self.order_task(key, m, FrameEdit::Shuffle),
            LossKey::Task(m, TaskId::Reverse) => self.order_task(key, m, FrameEdit::Reverse),
            LossKey::Task(m, TaskId::AudioAlign) => self.audio_align(key, m),
            LossKey::Task(Modality::Rgb, TaskId::FuturePredict) => self.future_predict(),
            LossKey::Task(Modality::Rgb, TaskId::RgbToFlow) => self.rgb_to_flow(),
            LossKey::Task(Modality::Rgb, TaskId::Embed) => self.joint_embed(),
            LossKey::Task(Modality::Grey, TaskId::Colorize) => self.colorize(),
            LossKey::Distill(slot) => self.distill(slot),
            LossKey::Task(m, t) => unreachable!("unsupported task cell {m:?}/{t:?}"),
        }
    }

    /// `Σ_k λ_k · L_k` over the components with nonzero weight; `None` when
    /// every weight is zero.
    pub fn total(&mut self, w: &LossWeights) -> Result<Option<NodeId>> {
        let mut total = None;
        for (key, lambda) in w.iter() {
            if lambda == 0.0 {
                continue;
            }
            let l = self.loss(key)?;
            let scaled = self.graph.scale(l, lambda)?;
            total = Some(match total {
                None => scaled,
                Some(acc) => self.graph.add(acc, scaled)?,
            });
        }
        Ok(total)
    }

    /// Shuffle or reverse detection on a frame sequence.
    fn order_task(&mut self, key: LossKey, m: Modality, edit: FrameEdit) -> Result<NodeId> {
        let mut r = self.task_rng(key);
        let frames = m.of_clip(self.clips[0]).shape()[0];
        if frames < 3 {
            return Err(Error::InvalidSpec(format!("{m:?} order tasks need >= 3 frames, got {frames}")));
        }
        let mut labels = Vec::with_capacity(self.clips.len());
        let mut rows = Vec::with_capacity(self.clips.len());
        for clip in self.clips {
            let data = m.of_clip(clip).data();
            if r.random_bool(0.5) {
                let order = match edit {
                    FrameEdit::Shuffle => non_identity_permutation(frames, &mut r),
                    FrameEdit::Reverse => (0..frames).rev().collect(),
                };
                rows.push(reorder_frames(data, frames, &order));
                labels.push(1.0);
            } else {
                rows.push(data.to_vec());
                labels.push(0.0);
            }
        }
        let trace = self.encode_rows(m, stack_rows(rows.iter().map(Vec::as_slice)))?;
        let head = match (m, edit) {
            (Modality::Rgb, FrameEdit::Shuffle) => self.model.heads.rgb_shuffle.clone(),
            (Modality::Rgb, FrameEdit::Reverse) => self.model.heads.rgb_reverse.clone(),
            (Modality::Flow, FrameEdit::Shuffle) => self.model.heads.flow_shuffle.clone(),
            (Modality::Flow, FrameEdit::Reverse) => self.model.heads.flow_reverse.clone(),
            _ => unreachable!("order tasks run on rgb and flow"),
        };
        let logit = self.linear_head(&head, trace.embedding)?;
        self.graph.binary_ce(logit, &labels)
    }

    fn audio_align(&mut self, key: LossKey, m: Modality) -> Result<NodeId> {
        if self.pool.len() < 2 {
            return Err(Error::PoolTooSmall(self.pool.len()));
        }
        let mut r = self.task_rng(key);
        let mut labels = Vec::with_capacity(self.clips.len());
        let mut audio = Vec::with_capacity(self.clips.len());
        for clip in self.clips {
            if r.random_bool(0.5) {
                audio.push(clip.audio.clone());
                labels.push(1.0);
            } else {
                audio.push(misaligned_audio(clip, self.pool, &mut r)?);
                labels.push(0.0);
            }
        }
        let main = self.trace(m)?.embedding;
        let sound = self.encode_rows(Modality::Audio, stack_rows(audio.iter().map(Tensor::data)))?;
        let head: AlignHead<NodeId> = match m {
            Modality::Rgb => self.model.heads.rgb_align.clone(),
            Modality::Flow => self.model.heads.flow_align.clone(),
            _ => unreachable!("alignment runs on rgb and flow"),
        };
        let a = self.graph.affine(main, head.main, head.bias)?;
        let b = self.graph.matmul(sound.embedding, head.audio)?;
        let logit = self.graph.add(a, b)?;
        self.graph.binary_ce(logit, &labels)
    }

    fn future_predict(&mut self) -> Result<NodeId> {
        let shape = self.clips[0].rgb.shape().to_vec();
        let (frames, plane) = (shape[0], shape[2] * shape[3]);
        if frames < FUTURE_FRAMES + 1 {
            return Err(Error::InvalidSpec(format!(
                "future prediction needs >= {} frames, got {frames}",
                FUTURE_FRAMES + 1
            )));
        }
        let visible = (frames - FUTURE_FRAMES) * 3 * plane;
        let masked = stack_rows(
            self.clips
                .iter()
                .map(|c| {
                    let mut d = c.rgb.data().to_vec();
                    d[visible..].iter_mut().for_each(|v| *v = 0.0);
                    d
                })
                .collect::<Vec<_>>()
                .iter()
                .map(Vec::as_slice),
        );
        let target = stack_rows(
            self.clips
                .iter()
                .map(|c| &c.grey.data()[(frames - FUTURE_FRAMES) * plane..]),
        );
        let trace = self.encode_rows(Modality::Rgb, masked)?;
        let head = self.model.heads.rgb_future.clone();
        let pred = self.linear_head(&head, trace.embedding)?;
        let t = self.graph.constant(target);
        self.graph.mse(pred, t)
    }

    fn rgb_to_flow(&mut self) -> Result<NodeId> {
        let emb = self.trace(Modality::Rgb)?.embedding;
        let head = self.model.heads.rgb_flow.clone();
        let pred = self.linear_head(&head, emb)?;
        let t = self.graph.constant(stack_rows(self.clips.iter().map(|c| c.flow.data())));
        self.graph.mse(pred, t)
    }

    fn joint_embed(&mut self) -> Result<NodeId> {
        if self.clips.len() < 2 {
            return Err(Error::BatchTooSmall {
                needed: 2,
                got: self.clips.len(),
            });
        }
        let rgb = self.trace(Modality::Rgb)?.embedding;
        let grey = self.trace(Modality::Grey)?.embedding;
        self.graph.margin_contrastive(rgb, grey, EMBED_MARGIN)
    }

    fn colorize(&mut self) -> Result<NodeId> {
        let emb = self.trace(Modality::Grey)?.embedding;
        let head = self.model.heads.grey_colorize.clone();
        let pred = self.linear_head(&head, emb)?;
        let means: Vec<Vec<f64>> = self.clips.iter().map(|c| channel_means(&c.rgb).to_vec()).collect();
        let t = self.graph.constant(stack_rows(means.iter().map(Vec::as_slice)));
        self.graph.mse(pred, t)
    }

    fn distill(&mut self, slot: DistillSlot) -> Result<NodeId> {
        let main = self.trace(Modality::Rgb)?;
        let other = self.trace(slot.source)?;
        distill_node(&mut self.graph, &main, &other, slot, self.mode)
    }
}

#[derive(Debug, Clone, Copy)]
enum FrameEdit {
    Shuffle,
    Reverse,
}

/// Uniform over the `n! − 1` non-identity orderings (rejection sampling).
pub(crate) fn non_identity_permutation(n: usize, r: &mut Rng) -> Vec<usize> {
    assert!(n >= 2);
    let mut order: Vec<usize> = (0..n).collect();
    loop {
        order.shuffle(r);
        if order.iter().enumerate().any(|(i, &o)| i != o) {
            return order;
        }
    }
}

/// Rearranges the leading-axis frames of a flattened clip tensor so that
/// output frame `i` is input frame `order[i]`.
pub fn reorder_frames(data: &[f64], frames: usize, order: &[usize]) -> Vec<f64> {
    let f = data.len() / frames;
    order.iter().flat_map(|&o| data[o * f..(o + 1) * f].iter().copied()).collect()
}

/// Mean of each color channel over all frames and pixels.
pub fn channel_means(rgb: &Tensor) -> [f64; 3] {
    let s = rgb.shape();
    let plane = s[2] * s[3];
    let mut out = [0.0; 3];
    for t in 0..s[0] {
        for (c, o) in out.iter_mut().enumerate() {
            let base = (t * 3 + c) * plane;
            *o += rgb.data()[base..base + plane].iter().sum::<f64>();
        }
    }
    out.map(|v| v / (s[0] * plane) as f64)
}

/// Every component loss of the weight index set on one batch.
pub fn compute_all_losses(
    model: &Model,
    clips: &[&MultiModalClip],
    pool: &[MultiModalClip],
    seed: u64,
    mode: DistillMode,
) -> Result<ComponentLosses> {
    let mut b = LossBuilder::new(model, clips, pool, seed, mode);
    let mut out = ComponentLosses::filled(0.0);
    for key in LossKey::ALL {
        let id = b.loss(key)?;
        let v = b.graph().value(id).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("component loss"));
        }
        out[key] = v;
    }
    Ok(out)
}

/// Value of one component loss.
pub fn task_loss(
    model: &Model,
    key: LossKey,
    clips: &[&MultiModalClip],
    pool: &[MultiModalClip],
    seed: u64,
) -> Result<f64> {
    let mut b = LossBuilder::new(model, clips, pool, seed, DistillMode::default());
    let id = b.loss(key)?;
    Ok(b.graph().value(id).item())
}

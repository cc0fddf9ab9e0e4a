//! Per-modality encoders and the task heads that sit on top of them.
//!
//! Parameter containers are generic over `P` so that the same structure holds
//! either concrete tensors (`P = Tensor`) or their graph leaves
//! (`P = NodeId`) after [`Model::bind`].

use rand::Rng as _;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::synth::{DatasetSpec, MultiModalClip};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Rgb,
    Audio,
    Flow,
    Grey,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Rgb, Modality::Audio, Modality::Flow, Modality::Grey];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Audio => "audio",
            Modality::Flow => "flow",
            Modality::Grey => "grey",
        }
    }

    /// First letter used in weight keys and heatmap rows.
    pub fn letter(self) -> char {
        match self {
            Modality::Rgb => 'R',
            Modality::Audio => 'A',
            Modality::Flow => 'F',
            Modality::Grey => 'G',
        }
    }

    pub fn input_dim(self, spec: &DatasetSpec) -> usize {
        match self {
            Modality::Rgb => spec.rgb_dim(),
            Modality::Audio => spec.audio_len,
            Modality::Flow => spec.flow_dim(),
            Modality::Grey => spec.grey_dim(),
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    pub fn of_clip(self, clip: &MultiModalClip) -> &Tensor {
        match self {
            Modality::Rgb => &clip.rgb,
            Modality::Audio => &clip.audio,
            Modality::Flow => &clip.flow,
            Modality::Grey => &clip.grey,
        }
    }
}

/// Encoder widths. The embedding width is shared by every modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub hidden: usize,
    pub embed: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self { hidden: 64, embed: 16 }
    }
}

/// Number of future grey frames the prediction head regresses.
pub const FUTURE_FRAMES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<P = Tensor> {
    pub weight: P,
    pub bias: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<P = Tensor> {
    pub modality: Modality,
    pub block1: Linear<P>,
    pub block2: Linear<P>,
}

/// Scores a (main embedding, audio embedding) pair with one logit.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignHead<P = Tensor> {
    pub main: P,
    pub audio: P,
    pub bias: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heads<P = Tensor> {
    pub rgb_shuffle: Linear<P>,
    pub rgb_reverse: Linear<P>,
    pub rgb_align: AlignHead<P>,
    pub rgb_future: Linear<P>,
    pub rgb_flow: Linear<P>,
    pub flow_shuffle: Linear<P>,
    pub flow_reverse: Linear<P>,
    pub flow_align: AlignHead<P>,
    pub grey_colorize: Linear<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<P = Tensor> {
    pub encoders: [Encoder<P>; 4],
    pub heads: Heads<P>,
}

impl<P> Linear<P> {
    fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Linear<Q> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    fn visit<'a>(&'a self, out: &mut Vec<&'a P>) {
        out.extend([&self.weight, &self.bias]);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        out.extend([&mut self.weight, &mut self.bias]);
    }
}

impl<P> AlignHead<P> {
    fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> AlignHead<Q> {
        AlignHead {
            main: f(&self.main),
            audio: f(&self.audio),
            bias: f(&self.bias),
        }
    }

    fn visit<'a>(&'a self, out: &mut Vec<&'a P>) {
        out.extend([&self.main, &self.audio, &self.bias]);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        out.extend([&mut self.main, &mut self.audio, &mut self.bias]);
    }
}

impl<P> Encoder<P> {
    fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Encoder<Q> {
        Encoder {
            modality: self.modality,
            block1: self.block1.map(f),
            block2: self.block2.map(f),
        }
    }

    pub fn map_params<Q>(&self, mut f: impl FnMut(&P) -> Q) -> Encoder<Q> {
        self.map(&mut f)
    }

    pub fn params(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.block1.visit(&mut out);
        self.block2.visit(&mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        self.block1.visit_mut(&mut out);
        self.block2.visit_mut(&mut out);
        out
    }
}

impl<P> Heads<P> {
    fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Heads<Q> {
        Heads {
            rgb_shuffle: self.rgb_shuffle.map(f),
            rgb_reverse: self.rgb_reverse.map(f),
            rgb_align: self.rgb_align.map(f),
            rgb_future: self.rgb_future.map(f),
            rgb_flow: self.rgb_flow.map(f),
            flow_shuffle: self.flow_shuffle.map(f),
            flow_reverse: self.flow_reverse.map(f),
            flow_align: self.flow_align.map(f),
            grey_colorize: self.grey_colorize.map(f),
        }
    }

    fn visit<'a>(&'a self, out: &mut Vec<&'a P>) {
        self.rgb_shuffle.visit(out);
        self.rgb_reverse.visit(out);
        self.rgb_align.visit(out);
        self.rgb_future.visit(out);
        self.rgb_flow.visit(out);
        self.flow_shuffle.visit(out);
        self.flow_reverse.visit(out);
        self.flow_align.visit(out);
        self.grey_colorize.visit(out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        self.rgb_shuffle.visit_mut(out);
        self.rgb_reverse.visit_mut(out);
        self.rgb_align.visit_mut(out);
        self.rgb_future.visit_mut(out);
        self.rgb_flow.visit_mut(out);
        self.flow_shuffle.visit_mut(out);
        self.flow_reverse.visit_mut(out);
        self.flow_align.visit_mut(out);
        self.grey_colorize.visit_mut(out);
    }
}

impl<P> Model<P> {
    pub fn encoder(&self, m: Modality) -> &Encoder<P> {
        &self.encoders[m.index()]
    }

    pub fn encoder_mut(&mut self, m: Modality) -> &mut Encoder<P> {
        &mut self.encoders[m.index()]
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> Model<Q> {
        Model {
            encoders: [
                self.encoders[0].map(&mut f),
                self.encoders[1].map(&mut f),
                self.encoders[2].map(&mut f),
                self.encoders[3].map(&mut f),
            ],
            heads: self.heads.map(&mut f),
        }
    }

    /// Every parameter in a fixed traversal order.
    pub fn params(&self) -> Vec<&P> {
        let mut out = Vec::new();
        for e in &self.encoders {
            e.block1.visit(&mut out);
            e.block2.visit(&mut out);
        }
        self.heads.visit(&mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        for e in &mut self.encoders {
            e.block1.visit_mut(&mut out);
            e.block2.visit_mut(&mut out);
        }
        self.heads.visit_mut(&mut out);
        out
    }
}

fn uniform(shape: &[usize], bound: f64, r: &mut crate::rng::Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

fn linear(fan_in: usize, fan_out: usize, bound: f64, r: &mut crate::rng::Rng) -> Linear {
    Linear {
        weight: uniform(&[fan_in, fan_out], bound, r),
        bias: Tensor::zeros(&[fan_out]),
    }
}

fn align_head(embed: usize, r: &mut crate::rng::Rng) -> AlignHead {
    let bound = (3.0 / embed as f64).sqrt();
    AlignHead {
        main: uniform(&[embed, 1], bound, r),
        audio: uniform(&[embed, 1], bound, r),
        bias: Tensor::zeros(&[1]),
    }
}

impl Model {
    /// Seeded initialization: ReLU blocks use He-uniform bounds, heads use
    /// Glorot-uniform bounds, all biases start at zero.
    pub fn init(spec: &DatasetSpec, dims: Dims, seed: u64) -> Self {
        let mut r = rng::rng(seed, &[stream::INIT]);
        let he = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
        let glorot = |a: usize, b: usize| (6.0 / (a + b) as f64).sqrt();
        let encoder = |m: Modality, r: &mut crate::rng::Rng| {
            let d = m.input_dim(spec);
            Encoder {
                modality: m,
                block1: linear(d, dims.hidden, he(d), r),
                block2: linear(dims.hidden, dims.embed, he(dims.hidden), r),
            }
        };
        let encoders = [
            encoder(Modality::Rgb, &mut r),
            encoder(Modality::Audio, &mut r),
            encoder(Modality::Flow, &mut r),
            encoder(Modality::Grey, &mut r),
        ];
        let e = dims.embed;
        let future = FUTURE_FRAMES * spec.pixels();
        let heads = Heads {
            rgb_shuffle: linear(e, 1, glorot(e, 1), &mut r),
            rgb_reverse: linear(e, 1, glorot(e, 1), &mut r),
            rgb_align: align_head(e, &mut r),
            rgb_future: linear(e, future, glorot(e, future), &mut r),
            rgb_flow: linear(e, spec.flow_dim(), glorot(e, spec.flow_dim()), &mut r),
            flow_shuffle: linear(e, 1, glorot(e, 1), &mut r),
            flow_reverse: linear(e, 1, glorot(e, 1), &mut r),
            flow_align: align_head(e, &mut r),
            grey_colorize: linear(e, 3, glorot(e, 3), &mut r),
        };
        Model { encoders, heads }
    }

    /// Same shapes, every parameter zero.
    pub fn zeroed(&self) -> Self {
        self.map(|t| Tensor::zeros(t.shape()))
    }

    pub fn dims(&self) -> Dims {
        let rgb = self.encoder(Modality::Rgb);
        Dims {
            hidden: rgb.block1.weight.shape()[1],
            embed: rgb.block2.weight.shape()[1],
        }
    }

    /// Registers every tensor as a parameter leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Model<NodeId> {
        self.map(|t| g.param(t.clone()))
    }

    /// Plain SGD step: `θ ← θ − lr·∂L/∂θ` for every bound parameter.
    pub fn sgd_step(
        &mut self,
        bound: &Model<NodeId>,
        grads: &std::collections::BTreeMap<NodeId, Tensor>,
        lr: f64,
    ) {
        for (t, id) in self.params_mut().into_iter().zip(bound.params()) {
            if let Some(g) = grads.get(id) {
                t.axpy(-lr, g);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|t| t.all_finite())
    }
}

/// Activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace<T = Tensor> {
    pub layer1: T,
    pub embedding: T,
}

/// A flattened batch of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalInput {
    pub modality: Modality,
    pub data: Tensor,
}

impl ModalInput {
    pub fn stack(modality: Modality, clips: &[&MultiModalClip]) -> Self {
        let data = stack_rows(clips.iter().map(|c| modality.of_clip(c).data()));
        Self { modality, data }
    }
}

/// Stacks equal-length rows into a matrix.
pub fn stack_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    let mut width = 0;
    for r in rows {
        width = r.len();
        data.extend_from_slice(r);
        n += 1;
    }
    Tensor::matrix(n, width, data).expect("stacked rows")
}

/// Graph-level forward pass of one encoder.
pub fn encode_node(g: &mut Graph, enc: &Encoder<NodeId>, x: NodeId) -> Result<ActivationTrace<NodeId>> {
    let h = g.affine(x, enc.block1.weight, enc.block1.bias)?;
    let layer1 = g.relu(h)?;
    let z = g.affine(layer1, enc.block2.weight, enc.block2.bias)?;
    let embedding = g.relu(z)?;
    Ok(ActivationTrace { layer1, embedding })
}

/// Value-level forward pass.
pub fn encode(enc: &Encoder, input: &ModalInput) -> Result<ActivationTrace> {
    if enc.modality != input.modality {
        return Err(Error::ModalityMismatch {
            expected: enc.modality.name(),
            actual: input.modality.name(),
        });
    }
    let mut g = Graph::new();
    let bound = enc.map(&mut |t: &Tensor| g.constant(t.clone()));
    let x = g.constant(input.data.clone());
    let tr = encode_node(&mut g, &bound, x)?;
    Ok(ActivationTrace {
        layer1: g.value(tr.layer1).clone(),
        embedding: g.value(tr.embedding).clone(),
    })
}

/// Embeddings of `clips` under one encoder, as an `N×embed` matrix.
pub fn embed_clips(enc: &Encoder, clips: &[&MultiModalClip]) -> Result<Tensor> {
    Ok(encode(enc, &ModalInput::stack(enc.modality, clips))?.embedding)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd_check;
    use crate::synth::gen_dataset;

    fn tiny_spec() -> DatasetSpec {
        DatasetSpec {
            n_clips: 6,
            classes: 3,
            frames: 5,
            height: 3,
            width: 3,
            audio_len: 8,
            seed: 4,
        }
    }

    #[test]
    fn zero_encoder_embeds_to_zero() {
        let spec = tiny_spec();
        let clips = gen_dataset(&spec).unwrap();
        let refs: Vec<_> = clips.iter().collect();
        let model = Model::init(&spec, Dims::default(), 1).zeroed();
        let tr = encode(model.encoder(Modality::Rgb), &ModalInput::stack(Modality::Rgb, &refs)).unwrap();
        assert_eq!(tr.embedding.shape(), &[6, 16]);
        assert!(tr.embedding.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_is_deterministic_and_checks_modality() {
        let spec = tiny_spec();
        let clips = gen_dataset(&spec).unwrap();
        let refs: Vec<_> = clips.iter().collect();
        let model = Model::init(&spec, Dims::default(), 1);
        let input = ModalInput::stack(Modality::Flow, &refs);
        let a = encode(model.encoder(Modality::Flow), &input).unwrap();
        let b = encode(model.encoder(Modality::Flow), &input).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            encode(model.encoder(Modality::Rgb), &input),
            Err(Error::ModalityMismatch { .. })
        ));
    }

    #[test]
    fn embedding_sum_gradient_matches_fd() {
        let spec = tiny_spec();
        let clips = gen_dataset(&spec).unwrap();
        let refs: Vec<_> = clips.iter().take(3).collect();
        let model = Model::init(&spec, Dims { hidden: 8, embed: 4 }, 2);
        let mut g = Graph::new();
        let enc = model.encoder(Modality::Audio).map(&mut |t: &Tensor| g.param(t.clone()));
        let x = g.constant(ModalInput::stack(Modality::Audio, &refs).data);
        let tr = encode_node(&mut g, &enc, x).unwrap();
        let s = g.sum(tr.embedding).unwrap();
        assert!(fd_check(&g, s, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn bind_preserves_order() {
        let spec = tiny_spec();
        let model = Model::init(&spec, Dims { hidden: 4, embed: 2 }, 3);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        for (t, id) in model.params().into_iter().zip(bound.params()) {
            assert_eq!(t, g.value(*id));
        }
        assert_eq!(g.parameters().len(), model.params().len());
    }
}

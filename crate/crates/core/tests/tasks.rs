use std::f64::consts::LN_2;

use evoloss::autodiff::{fd_check, NodeId};
use evoloss::distill::{DistillMode, DistillSlot};
use evoloss::model::{Dims, Modality, Model};
use evoloss::rng;
use evoloss::synth::{gen_dataset, DatasetSpec, MultiModalClip};
use evoloss::tasks::{channel_means, compute_all_losses, task_loss, LossBuilder};
use evoloss::tensor::Tensor;
use evoloss::train::{train, TrainConfig};
use evoloss::weights::{total_loss, LossKey, LossWeights, TaskId};
use proptest::prelude::*;
use rand::Rng as _;

fn key(code: &str) -> LossKey {
    code.parse().unwrap()
}

fn small(seed: u64) -> DatasetSpec {
    DatasetSpec {
        n_clips: 12,
        classes: 3,
        frames: 5,
        height: 3,
        width: 4,
        audio_len: 8,
        seed,
    }
}

/// Seeded model with jittered parameters so no pre-activation sits on a relu kink.
fn jittered(spec: &DatasetSpec, seed: u64) -> Model {
    let mut m = Model::init(spec, Dims { hidden: 6, embed: 3 }, seed);
    let mut r = rng::rng(seed, &[1]);
    for t in m.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.1..0.1));
    }
    m
}

fn mean_sq<'a>(rows: impl Iterator<Item = &'a [f64]>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for r in rows {
        s += r.iter().map(|v| v * v).sum::<f64>();
        n += r.len();
    }
    s / n as f64
}

#[test]
fn zero_parameters_give_closed_forms() {
    let spec = DatasetSpec {
        n_clips: 32,
        ..DatasetSpec::default()
    };
    let clips = gen_dataset(&spec).unwrap();
    let batch: Vec<&MultiModalClip> = clips.iter().take(16).collect();
    let zero = Model::init(&spec, Dims::default(), 0).zeroed();
    let c = compute_all_losses(&zero, &batch, &clips, 3, DistillMode::default()).unwrap();

    for k in LossKey::ALL {
        assert!(c[k] >= 0.0 && c[k].is_finite(), "{k}");
        match k {
            LossKey::Task(_, TaskId::Shuffle | TaskId::Reverse | TaskId::AudioAlign) => {
                assert!((c[k] - LN_2).abs() < 1e-15, "{k}: {}", c[k])
            }
            LossKey::Distill(_) => assert_eq!(c[k], 0.0),
            _ => {}
        }
    }
    let plane = spec.height * spec.width;
    let future = mean_sq(batch.iter().map(|c| &c.grey.data()[(spec.frames - 4) * plane..]));
    let flow = mean_sq(batch.iter().map(|c| c.flow.data()));
    let means: Vec<[f64; 3]> = batch.iter().map(|c| channel_means(&c.rgb)).collect();
    let color = mean_sq(means.iter().map(|m| m.as_slice()));
    assert!((c[key("RP")] - future).abs() < 1e-12);
    assert!((c[key("RF")] - flow).abs() < 1e-12);
    assert!((c[key("GC")] - color).abs() < 1e-12);
    // collapsed embeddings: no positive gap, every negative pair short of the margin by 1
    assert!((c[key("RE")] - 1.0).abs() < 1e-12);
}

#[test]
fn channel_means_are_true_means() {
    let clips = gen_dataset(&small(2)).unwrap();
    let rgb = &clips[0].rgb;
    let s = rgb.shape();
    let plane = s[2] * s[3];
    let m = channel_means(rgb);
    for (c, mc) in m.iter().enumerate() {
        let sum: f64 = (0..s[0]).map(|t| rgb.data()[(t * 3 + c) * plane..(t * 3 + c + 1) * plane].iter().sum::<f64>()).sum();
        assert!((mc - sum / (s[0] * plane) as f64).abs() < 1e-12);
    }
}

#[test]
fn static_clip_has_zero_flow_loss_under_zero_head() {
    let spec = small(3);
    let mut clip = gen_dataset(&spec).unwrap().remove(0);
    let frame_len = clip.rgb.len() / spec.frames;
    let first = clip.rgb.data()[..frame_len].to_vec();
    let data: Vec<f64> = (0..spec.frames).flat_map(|_| first.iter().copied()).collect();
    clip.rgb = Tensor::new(clip.rgb.shape().to_vec(), data).unwrap();
    clip.grey = evoloss::synth::derive_grey(&clip.rgb);
    clip.flow = evoloss::synth::derive_flow_from_grey(&clip.grey);
    let plane = spec.height * spec.width;
    for t in 0..spec.frames - 1 {
        assert!(clip.flow.data()[t * 2 * plane..t * 2 * plane + plane].iter().all(|v| *v == 0.0));
    }
    // zero out the shifted-difference channel too so the whole target vanishes
    let flow: Vec<f64> = vec![0.0; clip.flow.len()];
    clip.flow = Tensor::new(clip.flow.shape().to_vec(), flow).unwrap();
    let zero = Model::init(&spec, Dims::default(), 0).zeroed();
    let pool = vec![clip.clone(), clip.clone()];
    assert_eq!(task_loss(&zero, key("RF"), &[&clip], &pool, 0).unwrap(), 0.0);
}

#[test]
fn every_component_passes_gradient_check() {
    for seed in 0..5 {
        let spec = small(seed);
        let clips = gen_dataset(&spec).unwrap();
        let batch: Vec<&MultiModalClip> = clips.iter().take(5).collect();
        let model = jittered(&spec, seed);
        for k in LossKey::ALL {
            let mut b = LossBuilder::new(&model, &batch, &clips, seed, DistillMode::Bidirectional);
            let id = b.loss(k).unwrap();
            let err = fd_check(b.graph(), id, 1e-5).unwrap();
            assert!(err < 1e-4, "{k} seed {seed}: {err}");
        }
    }
}

fn encoder_grads(model: &Model, k: LossKey, m: Modality, batch: &[&MultiModalClip], pool: &[MultiModalClip], mode: DistillMode) -> Vec<f64> {
    let mut b = LossBuilder::new(model, batch, pool, 0, mode);
    let id = b.loss(k).unwrap();
    let grads = b.graph().backward(id).unwrap();
    b.bound().encoder(m).params().into_iter().flat_map(|p| grads[p].data().to_vec()).collect()
}

#[test]
fn stop_source_only_moves_the_rgb_network() {
    let spec = small(9);
    let clips = gen_dataset(&spec).unwrap();
    let batch: Vec<&MultiModalClip> = clips.iter().take(5).collect();
    let model = jittered(&spec, 9);
    for slot in DistillSlot::ALL {
        let k = LossKey::Distill(slot);
        let both = encoder_grads(&model, k, Modality::Rgb, &batch, &clips, DistillMode::Bidirectional);
        let stop = encoder_grads(&model, k, Modality::Rgb, &batch, &clips, DistillMode::StopSource);
        assert_eq!(both, stop, "{k}");
        let src = encoder_grads(&model, k, slot.source, &batch, &clips, DistillMode::StopSource);
        assert!(src.iter().all(|g| *g == 0.0), "{k}");
        let src = encoder_grads(&model, k, slot.source, &batch, &clips, DistillMode::Bidirectional);
        assert!(src.iter().any(|g| *g != 0.0), "{k}");
    }
}

fn param_grads(model: &Model, w: &LossWeights, batch: &[&MultiModalClip], pool: &[MultiModalClip]) -> Vec<f64> {
    let mut b = LossBuilder::new(model, batch, pool, 4, DistillMode::default());
    let total = b.total(w).unwrap().unwrap();
    let grads = b.graph().backward(total).unwrap();
    let ids: Vec<NodeId> = b.bound().params().into_iter().copied().collect();
    ids.iter().flat_map(|id| grads[id].data().to_vec()).collect()
}

#[test]
fn total_gradient_is_weighted_sum_of_component_gradients() {
    let spec = small(5);
    let clips = gen_dataset(&spec).unwrap();
    let batch: Vec<&MultiModalClip> = clips.iter().take(6).collect();
    let model = jittered(&spec, 5);
    let w = LossWeights::random(&mut rng::rng(5, &[2]));
    let total = param_grads(&model, &w, &batch, &clips);
    let mut summed = vec![0.0; total.len()];
    for k in LossKey::ALL {
        let mut single = LossWeights::zeros();
        single[k] = 1.0;
        for (s, g) in summed.iter_mut().zip(param_grads(&model, &single, &batch, &clips)) {
            *s += w[k] * g;
        }
    }
    for (a, b) in total.iter().zip(&summed) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn graph_total_matches_weighted_sum_of_values() {
    let spec = small(6);
    let clips = gen_dataset(&spec).unwrap();
    let batch: Vec<&MultiModalClip> = clips.iter().take(6).collect();
    let model = jittered(&spec, 6);
    let w = LossWeights::random(&mut rng::rng(6, &[2]));
    let c = compute_all_losses(&model, &batch, &clips, 4, DistillMode::default()).unwrap();
    let mut b = LossBuilder::new(&model, &batch, &clips, 4, DistillMode::default());
    let id = b.total(&w).unwrap().unwrap();
    assert!((b.graph().value(id).item() - total_loss(&w, &c)).abs() < 1e-10);
}

#[test]
fn losses_are_deterministic_given_seed() {
    let spec = small(7);
    let clips = gen_dataset(&spec).unwrap();
    let batch: Vec<&MultiModalClip> = clips.iter().take(6).collect();
    let model = jittered(&spec, 7);
    let a = compute_all_losses(&model, &batch, &clips, 9, DistillMode::default()).unwrap();
    let b = compute_all_losses(&model, &batch, &clips, 9, DistillMode::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn identical_audio_pair_gives_no_better_than_chance() {
    // a head scores identical inputs identically, so one positive and one
    // negative label on the same pair cost at least ln 2 on average
    let spec = small(8);
    let clips = gen_dataset(&spec).unwrap();
    let model = jittered(&spec, 8);
    let twin = vec![clips[0].clone(), clips[0].clone()];
    let batch: Vec<&MultiModalClip> = twin.iter().collect();
    for seed in 0..20 {
        let l = task_loss(&model, key("RA"), &batch, &twin, seed).unwrap();
        assert!(l.is_finite());
    }
    let mut g = evoloss::autodiff::Graph::new();
    for z in [-3.0, -0.2, 0.0, 0.7, 5.0] {
        let x = g.constant(Tensor::vector(vec![z, z]));
        let l = g.binary_ce(x, &[1.0, 0.0]).unwrap();
        assert!(g.value(l).item() >= LN_2 - 1e-15);
    }
}

/// Loss after 300 default steps with only `k` active, against its uninformed
/// baseline, both measured on a fixed 256-clip batch.
fn learnability(k: LossKey, clips: &[MultiModalClip], spec: &DatasetSpec) -> (f64, f64, f64) {
    let batch: Vec<&MultiModalClip> = clips.iter().take(256).collect();
    let mut model = Model::init(spec, Dims::default(), 0);
    let before = task_loss(&model, k, &batch, clips, 1).unwrap();
    let baseline = task_loss(&model.zeroed(), k, &batch, clips, 1).unwrap();
    let mut w = LossWeights::zeros();
    w[k] = 1.0;
    train(&mut model, &w, clips, &TrainConfig::default()).unwrap();
    (before, task_loss(&model, k, &batch, clips, 1).unwrap(), baseline)
}

#[test]
fn every_task_learns_below_its_uninformed_baseline() {
    let spec = DatasetSpec::default();
    let clips = gen_dataset(&spec).unwrap();
    for k in LossKey::ALL.into_iter().filter(|k| !k.is_distill()) {
        let (before, after, baseline) = learnability(k, &clips, &spec);
        eprintln!("{k}: {before:.5} -> {after:.5} (baseline {baseline:.5})");
        assert!(after < baseline, "{k}: {after} >= {baseline}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn component_losses_are_finite_and_nonnegative(seed in 0u64..1000) {
        let spec = small(seed);
        let clips = gen_dataset(&spec).unwrap();
        let batch: Vec<&MultiModalClip> = clips.iter().take(4).collect();
        let model = Model::init(&spec, Dims { hidden: 6, embed: 3 }, seed);
        let c = compute_all_losses(&model, &batch, &clips, seed, DistillMode::default()).unwrap();
        for k in LossKey::ALL {
            prop_assert!(c[k].is_finite() && c[k] >= 0.0);
        }
    }
}

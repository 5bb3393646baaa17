//! Synthetic audio-video samples, stratified splitting and batching.
//!
//! Class `c` draws its audio from signature `c / 2` and its video from
//! signature `((c + 1) / 2) % G`, so neighbouring classes share one modality
//! and differ in the other: `{0, 1}` sound alike, `{1, 2}` look alike, and so
//! on around the ring. Only the pair of signatures identifies a class.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::blocks::FRAME;
use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::{RngState, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Train share of each class: 80 %.
pub const TRAIN_NUM: usize = 4;
pub const TRAIN_DEN: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::data(format!("unknown split tag `{s}`"))),
        }
    }
}

/// `audio: [1, L]`, `video: [1, T, 56, 56]` with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub audio: Tensor<T>,
    pub video: Tensor<T>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub audio_len: usize,
    pub frames: usize,
    /// Standard deviation of the additive noise, relative to unit signal.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(format!("synthetic data needs >= 2 classes, got {}", self.classes)));
        }
        if self.audio_len < 4 || self.frames == 0 {
            return Err(Error::config("synthetic data needs audio_len >= 4 and frames >= 1"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config(format!("noise must be a finite non-negative number, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Number of distinct signatures per modality.
pub fn signature_count(classes: usize) -> usize {
    classes.div_ceil(2).max(2)
}

pub fn audio_signature(class: usize) -> usize {
    class / 2
}

pub fn video_signature(class: usize, classes: usize) -> usize {
    class.div_ceil(2) % signature_count(classes)
}

/// Cycles per window of the two tones of audio signature `s`.
pub fn audio_tones(s: usize, groups: usize, len: usize) -> [usize; 2] {
    let step = ((len / 2).saturating_sub(2) / groups).max(2);
    let k = 1 + s * step;
    [k, k + step / 2]
}

fn audio_wave(s: usize, groups: usize, len: usize, noise: f64, r: &mut Stream) -> Vec<f64> {
    let [k1, k2] = audio_tones(s, groups, len);
    let (p1, p2) = (r.uniform_in(0.0, 2.0 * PI), r.uniform_in(0.0, 2.0 * PI));
    let gain = r.uniform_in(0.8, 1.2);
    (0..len)
        .map(|t| {
            let x = t as f64 / len as f64;
            gain * (libm::sin(2.0 * PI * k1 as f64 * x + p1) + 0.6 * libm::sin(2.0 * PI * k2 as f64 * x + p2)) + noise * r.normal()
        })
        .collect()
}

/// Blob centre for signature `s` at frame `t`: a start point on a circle
/// around the frame centre, moving tangentially.
pub fn blob_path(s: usize, groups: usize, t: usize) -> (f64, f64) {
    let theta = 2.0 * PI * s as f64 / groups as f64 + PI / 4.0;
    let c = FRAME as f64 / 2.0;
    let (x0, y0) = (c + 14.0 * libm::cos(theta), c + 14.0 * libm::sin(theta));
    let step = 3.0 * t as f64;
    (x0 - step * libm::sin(theta), y0 + step * libm::cos(theta))
}

/// Blob radius for signature `s`; alternating sizes so shape differs too.
pub fn blob_sigma(s: usize) -> f64 {
    if s.is_multiple_of(2) {
        3.0
    } else {
        5.5
    }
}

fn video_frames(s: usize, groups: usize, frames: usize, noise: f64, r: &mut Stream) -> Vec<f64> {
    let (jx, jy) = (r.uniform_in(-3.0, 3.0), r.uniform_in(-3.0, 3.0));
    let sigma = blob_sigma(s) * r.uniform_in(0.9, 1.1);
    let amp = r.uniform_in(0.7, 0.9);
    let mut out = Vec::with_capacity(frames * FRAME * FRAME);
    for t in 0..frames {
        let (cx, cy) = blob_path(s, groups, t);
        let (cx, cy) = (cx + jx, cy + jy);
        for y in 0..FRAME {
            for x in 0..FRAME {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let d2 = dx * dx + dy * dy;
                let v = 0.1 + amp * libm::exp(-d2 / (2.0 * sigma * sigma)) + noise * r.normal();
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Sample `index` of class `class`; a pure function of the spec.
pub fn generate_sample<T: Scalar>(spec: &SyntheticSpec, class: usize, index: usize) -> Result<Sample<T>> {
    spec.validate()?;
    if class >= spec.classes {
        return Err(Error::data(format!("class {class} out of range for {} classes", spec.classes)));
    }
    let groups = signature_count(spec.classes);
    let mut r = RngState { seed: spec.seed, counter: ((class as u64) << 32) | index as u64 }.stream();
    let a = audio_wave(audio_signature(class), groups, spec.audio_len, spec.noise, &mut r);
    let v = video_frames(video_signature(class, spec.classes), groups, spec.frames, spec.noise * 0.5, &mut r);
    Ok(Sample {
        audio: Tensor::new(&[1, spec.audio_len], a.into_iter().map(T::from_f64).collect())?,
        video: Tensor::new(&[1, spec.frames, FRAME, FRAME], v.into_iter().map(T::from_f64).collect())?,
        label: class,
    })
}

/// Every sample, class-major.
pub fn generate<T: Scalar>(spec: &SyntheticSpec) -> Result<Vec<Sample<T>>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.classes * spec.per_class);
    for c in 0..spec.classes {
        for i in 0..spec.per_class {
            out.push(generate_sample(spec, c, i)?);
        }
    }
    Ok(out)
}

/// Train counts per class for an 80/20 stratified split.
///
/// Each class receives `floor` or `ceil` of 80 % of its size; the ceilings go
/// to the classes with the largest fractional remainders (lowest index first
/// on ties) until the total equals `floor(0.8 * N)`.
pub fn plan_split(counts: &[usize]) -> Result<Vec<usize>> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::data(format!("class {c} has no samples")));
    }
    let total: usize = counts.iter().sum();
    let mut train: Vec<usize> = counts.iter().map(|&n| n * TRAIN_NUM / TRAIN_DEN).collect();
    let target = total * TRAIN_NUM / TRAIN_DEN;
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&c| core::cmp::Reverse(counts[c] * TRAIN_NUM % TRAIN_DEN));
    let short = target - train.iter().sum::<usize>();
    for &c in order.iter().take(short) {
        train[c] += 1;
    }
    Ok(train)
}

/// Split tag of every sample. Within each class a seeded shuffle picks
/// which samples go to training.
pub fn assign_splits(labels: &[usize], classes: usize, seed: u64) -> Result<Vec<Split>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class.get_mut(l).ok_or_else(|| Error::data(format!("label {l} out of range for {classes} classes")))?.push(i);
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let train = plan_split(&counts)?;
    let mut out = vec![Split::Val; labels.len()];
    let rng = RngState::new(seed);
    for (c, members) in by_class.iter_mut().enumerate() {
        rng.peek_stream(c as u64).shuffle(members);
        for &i in &members[..train[c]] {
            out[i] = Split::Train;
        }
    }
    Ok(out)
}

/// Mini-batches of `indices` for one epoch, reshuffled by `(seed, epoch)`.
/// The last batch may be short.
pub fn epoch_batches(indices: &[usize], batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    let mut order = indices.to_vec();
    if shuffle {
        RngState { seed, counter: epoch }.peek_stream(0x5eed).shuffle(&mut order);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stacks samples into a [`Batch`] with one-hot labels.
pub fn collate<T: Scalar>(samples: &[&Sample<T>], classes: usize) -> Result<Batch<T>> {
    let first = samples.first().ok_or_else(|| Error::data("cannot collate an empty batch"))?;
    let b = samples.len();
    let mut audio = Vec::with_capacity(b * first.audio.numel());
    let mut video = Vec::with_capacity(b * first.video.numel());
    let mut labels = Tensor::zeros(&[b, classes]);
    for (i, s) in samples.iter().enumerate() {
        if s.audio.shape() != first.audio.shape() || s.video.shape() != first.video.shape() {
            return Err(Error::data("samples in one batch differ in extent"));
        }
        if s.label >= classes {
            return Err(Error::data(format!("label {} out of range for {classes} classes", s.label)));
        }
        audio.extend_from_slice(s.audio.data());
        video.extend_from_slice(s.video.data());
        labels.data_mut()[i * classes + s.label] = T::one();
    }
    let mut a_shape = vec![b];
    a_shape.extend_from_slice(first.audio.shape());
    let mut v_shape = vec![b];
    v_shape.extend_from_slice(first.video.shape());
    Ok(Batch { audio: Tensor::new(&a_shape, audio)?, video: Tensor::new(&v_shape, video)?, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64) -> SyntheticSpec {
        SyntheticSpec { classes: 6, per_class: 4, audio_len: 32, frames: 2, noise, seed: 42 }
    }

    #[test]
    fn neighbouring_classes_share_one_modality() {
        let c = 6;
        assert_eq!(audio_signature(0), audio_signature(1));
        assert_eq!(video_signature(1, c), video_signature(2, c));
        assert_eq!(video_signature(5, c), video_signature(0, c));
        let pairs: Vec<_> = (0..c).map(|k| (audio_signature(k), video_signature(k, c))).collect();
        for i in 0..c {
            for j in 0..i {
                assert_ne!(pairs[i], pairs[j], "classes {i} and {j} are indistinguishable");
            }
        }
    }

    #[test]
    fn signatures_stay_distinct_for_other_class_counts() {
        for c in 2..=9 {
            let pairs: Vec<_> = (0..c).map(|k| (audio_signature(k), video_signature(k, c))).collect();
            for i in 0..c {
                for j in 0..i {
                    assert_ne!(pairs[i], pairs[j], "C = {c}");
                }
            }
            let g = signature_count(c);
            for s in 0..g {
                let [a, b] = audio_tones(s, g, 32);
                assert!(a < b && b < 16, "C = {c}, s = {s}");
            }
        }
    }

    #[test]
    fn samples_have_model_extents_and_range() {
        let s = generate_sample::<f32>(&spec(0.2), 3, 1).unwrap();
        assert_eq!(s.audio.shape(), &[1, 32]);
        assert_eq!(s.video.shape(), &[1, 2, FRAME, FRAME]);
        assert!(s.video.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(s.label, 3);
    }

    #[test]
    fn noiseless_samples_of_one_class_differ_but_share_energy() {
        let sp = spec(0.0);
        let a = generate_sample::<f64>(&sp, 2, 0).unwrap();
        let b = generate_sample::<f64>(&sp, 2, 1).unwrap();
        assert_ne!(a.audio, b.audio);
        // two tones with unit and 0.6 amplitude: mean power (1 + 0.36) / 2 times gain^2
        for s in [&a, &b] {
            let p = s.audio.data().iter().map(|v| v * v).sum::<f64>() / 32.0;
            assert!(p > 0.68 * 0.64 - 1e-9 && p < 0.68 * 1.44 + 1e-9, "{p}");
        }
    }

    #[test]
    fn generation_is_reproducible() {
        assert_eq!(generate::<f32>(&spec(0.3)).unwrap(), generate::<f32>(&spec(0.3)).unwrap());
    }

    #[test]
    fn split_totals_match_the_reference_tables() {
        for (classes, n, train, val) in [(8, 920, 5888, 1472), (6, 3909, 18763, 4691), (6, 1240, 5952, 1488)] {
            let plan = plan_split(&vec![n; classes]).unwrap();
            let t: usize = plan.iter().sum();
            assert_eq!((t, classes * n - t), (train, val));
            let lo = n * 4 / 5;
            assert!(plan.iter().all(|&k| k == lo || k == lo + 1));
        }
    }

    #[test]
    fn empty_class_is_a_data_error() {
        assert!(matches!(plan_split(&[3, 0, 2]), Err(Error::Data(_))));
    }

    #[test]
    fn assigned_splits_follow_the_plan() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let s = assign_splits(&labels, 3, 1).unwrap();
        for c in 0..3 {
            let n = (0..30).filter(|&i| labels[i] == c && s[i] == Split::Train).count();
            assert_eq!(n, 8);
        }
        assert_eq!(s, assign_splits(&labels, 3, 1).unwrap());
    }

    #[test]
    fn one_batch_when_size_equals_dataset() {
        let idx: Vec<usize> = (0..10).collect();
        let b = epoch_batches(&idx, 10, 0, 0, true).unwrap();
        assert_eq!(b.len(), 1);
        let mut got = b[0].clone();
        got.sort();
        assert_eq!(got, idx);
        assert!(epoch_batches(&idx, 0, 0, 0, true).is_err());
    }

    #[test]
    fn epochs_reshuffle_deterministically() {
        let idx: Vec<usize> = (0..20).collect();
        let e0 = epoch_batches(&idx, 4, 9, 0, true).unwrap();
        assert_eq!(e0, epoch_batches(&idx, 4, 9, 0, true).unwrap());
        assert_ne!(e0, epoch_batches(&idx, 4, 9, 1, true).unwrap());
        assert_eq!(epoch_batches(&idx, 4, 9, 1, false).unwrap()[0], vec![0, 1, 2, 3]);
    }

    #[test]
    fn collate_stacks_and_one_hots() {
        let sp = spec(0.1);
        let a = generate_sample::<f32>(&sp, 1, 0).unwrap();
        let b = generate_sample::<f32>(&sp, 4, 0).unwrap();
        let batch = collate(&[&a, &b], 6).unwrap();
        assert_eq!(batch.audio.shape(), &[2, 1, 32]);
        assert_eq!(batch.video.shape(), &[2, 1, 2, FRAME, FRAME]);
        assert_eq!(batch.labels.data()[1], 1.0);
        assert_eq!(batch.labels.data()[6 + 4], 1.0);
        assert_eq!(batch.labels.sum(), 2.0);
    }
}

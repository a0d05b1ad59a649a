//! Windowed datasets, split strategies, and a synthetic generator with
//! controllable per-user drift.
//!
//! Split strategies, following the usual cross-validation conventions for
//! per-user sensor data:
//!
//! * `l1so` (leave-one-session-out flavor): samples are shuffled globally
//!   and cut into M equal folds; round m tests on fold m. Note this can
//!   place same-session windows on both sides of a round — that is the
//!   conventional protocol and is kept as-is.
//! * `l1po` (leave-one-person-out): one round per user; that user's
//!   samples are the test set, everyone else trains.
//! * `l1po2`: `l1po` plus a per-user stratified split of the held-out
//!   user into a post-deployment training stream (40% by default) and a
//!   test set (the rest).
//!
//! Every constructor also carves a stratified validation set out of the
//! offline pool (deterministic per-class systematic pick), so a round's
//! four index sets are pairwise disjoint and ready to train on.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::rng::StreamRng;
use crate::tensor::Tensor;
use crate::Result;

/// One labeled window with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub user_id: u16,
    pub session_id: u16,
    pub label: u16,
    pub window: Tensor,
}

/// Immutable collection of fixed-shape labeled windows.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    channels: usize,
    width: usize,
    classes: usize,
    samples: Vec<Sample>,
}

impl WindowedDataset {
    pub fn new(
        channels: usize,
        width: usize,
        classes: usize,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        if channels == 0 || width == 0 || classes == 0 {
            return Err(Error::domain("dataset dims must be positive"));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.window.channels() != channels || s.window.width() != width {
                return Err(Error::shape(format!(
                    "sample {i} window is {}x{}, dataset is {channels}x{width}",
                    s.window.channels(),
                    s.window.width()
                )));
            }
            if usize::from(s.label) >= classes {
                return Err(Error::domain(format!(
                    "sample {i} label {} out of range for {classes} classes",
                    s.label
                )));
            }
        }
        Ok(WindowedDataset {
            channels,
            width,
            classes,
            samples,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct user ids, ascending.
    pub fn users(&self) -> Vec<u16> {
        let mut users: Vec<u16> = self.samples.iter().map(|s| s.user_id).collect();
        users.sort_unstable();
        users.dedup();
        users
    }
}

/// Which split strategy produced a plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitStrategy {
    L1so { folds: usize },
    L1po,
    L1po2 { train_fraction: f32 },
}

/// Index sets for one train/test round. The four sets are pairwise
/// disjoint; `odtl_train` is empty except under `l1po2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRound {
    pub offline_train: Vec<usize>,
    pub offline_val: Vec<usize>,
    pub odtl_train: Vec<usize>,
    pub test: Vec<usize>,
}

/// A full cross-validation schedule over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub strategy: SplitStrategy,
    pub rounds: Vec<SplitRound>,
}

/// Fraction of the offline pool reserved for validation by default.
pub const DEFAULT_VAL_FRACTION: f32 = 0.2;
/// Post-deployment training share of the held-out user under `l1po2`.
pub const DEFAULT_ODTL_TRAIN_FRACTION: f32 = 0.4;

/// Deterministic stratified validation pick: per class, every k-th pool
/// sample (by ascending dataset index) goes to validation, where
/// `k = round(1 / fraction)`. Falls back to moving one sample if the pick
/// comes out empty.
pub fn stratified_validation_split(
    ds: &WindowedDataset,
    pool: &[usize],
    val_fraction: f32,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&val_fraction) || val_fraction <= 0.0 {
        return Err(Error::domain("validation fraction outside (0, 1)"));
    }
    let stride = libm::roundf(1.0 / val_fraction).max(2.0) as usize;
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes()];
    for &idx in pool {
        per_class[usize::from(ds.samples()[idx].label)].push(idx);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class_indices in &per_class {
        for (pos, &idx) in class_indices.iter().enumerate() {
            if pos % stride == stride / 2 {
                val.push(idx);
            } else {
                train.push(idx);
            }
        }
    }
    if val.is_empty() && train.len() > 1 {
        val.push(train.pop().unwrap());
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Shuffle into `folds` equal-size sub-collections (sizes differ by at
/// most one) and test each fold in turn.
pub fn make_l1so(
    ds: &WindowedDataset,
    folds: usize,
    val_fraction: f32,
    seed: u64,
) -> Result<SplitPlan> {
    if folds < 2 {
        return Err(Error::domain("l1so needs at least 2 folds"));
    }
    if ds.len() < folds {
        return Err(Error::domain(format!(
            "l1so: {} folds exceed {} samples",
            folds,
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    StreamRng::seed(seed).derive(0x4C31_534F).shuffle(&mut order);

    let base = ds.len() / folds;
    let extra = ds.len() % folds;
    let mut rounds = Vec::with_capacity(folds);
    let mut start = 0;
    let mut bounds = Vec::with_capacity(folds);
    for f in 0..folds {
        let len = base + usize::from(f < extra);
        bounds.push((start, start + len));
        start += len;
    }
    for &(lo, hi) in &bounds {
        let mut test: Vec<usize> = order[lo..hi].to_vec();
        test.sort_unstable();
        let mut pool: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();
        pool.sort_unstable();
        let (offline_train, offline_val) = stratified_validation_split(ds, &pool, val_fraction)?;
        rounds.push(SplitRound {
            offline_train,
            offline_val,
            odtl_train: Vec::new(),
            test,
        });
    }
    Ok(SplitPlan {
        strategy: SplitStrategy::L1so { folds },
        rounds,
    })
}

/// One round per user: the user's samples are the test set, every other
/// user forms the offline pool.
pub fn make_l1po(ds: &WindowedDataset, val_fraction: f32) -> Result<SplitPlan> {
    let users = ds.users();
    if users.len() < 2 {
        return Err(Error::domain("l1po needs at least 2 distinct users"));
    }
    let mut rounds = Vec::with_capacity(users.len());
    for &user in &users {
        let test: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.samples()[i].user_id == user)
            .collect();
        let pool: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.samples()[i].user_id != user)
            .collect();
        let (offline_train, offline_val) = stratified_validation_split(ds, &pool, val_fraction)?;
        rounds.push(SplitRound {
            offline_train,
            offline_val,
            odtl_train: Vec::new(),
            test,
        });
    }
    Ok(SplitPlan {
        strategy: SplitStrategy::L1po,
        rounds,
    })
}

fn round_half_up(x: f64) -> usize {
    libm::floor(x + 0.5) as usize
}

/// `l1po` rounds augmented with a per-user stratified split of the
/// held-out user into a post-deployment training stream and a test set.
/// The stream size is `round(train_fraction * user_samples)` exactly,
/// with per-class counts within one sample of the same fraction.
pub fn make_l1po2(
    ds: &WindowedDataset,
    train_fraction: f32,
    val_fraction: f32,
    seed: u64,
) -> Result<SplitPlan> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction <= 0.0 {
        return Err(Error::domain("odtl train fraction outside (0, 1)"));
    }
    let base = make_l1po(ds, val_fraction)?;
    let users = ds.users();
    let rng_root = StreamRng::seed(seed).derive(0x4C31_504F);

    let mut rounds = Vec::with_capacity(base.rounds.len());
    for (round, &user) in base.rounds.into_iter().zip(&users) {
        // Group the user's samples by class, shuffled per class.
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes()];
        for &idx in &round.test {
            per_class[usize::from(ds.samples()[idx].label)].push(idx);
        }
        if let Some(missing) = per_class.iter().position(|c| c.is_empty()) {
            return Err(Error::domain(format!(
                "l1po2: user {user} has no samples of class {missing}; stratification impossible"
            )));
        }
        let mut rng = rng_root.derive(u64::from(user));
        for class_indices in &mut per_class {
            rng.shuffle(class_indices);
        }

        // Largest-remainder allocation: per-class round-half-up quotas,
        // then trim/pad toward the exact global target.
        let total = round.test.len();
        let target = round_half_up(f64::from(train_fraction) * total as f64);
        let quotas: Vec<f64> = per_class
            .iter()
            .map(|c| f64::from(train_fraction) * c.len() as f64)
            .collect();
        let mut takes: Vec<usize> = quotas.iter().map(|&q| round_half_up(q)).collect();
        loop {
            let sum: usize = takes.iter().sum();
            if sum == target {
                break;
            }
            if sum > target {
                let c = (0..takes.len())
                    .filter(|&c| takes[c] > 0)
                    .max_by(|&a, &b| {
                        (takes[a] as f64 - quotas[a])
                            .partial_cmp(&(takes[b] as f64 - quotas[b]))
                            .unwrap()
                    })
                    .expect("some class must be trimmable");
                takes[c] -= 1;
            } else {
                let c = (0..takes.len())
                    .filter(|&c| takes[c] < per_class[c].len())
                    .min_by(|&a, &b| {
                        (takes[a] as f64 - quotas[a])
                            .partial_cmp(&(takes[b] as f64 - quotas[b]))
                            .unwrap()
                    })
                    .expect("some class must be paddable");
                takes[c] += 1;
            }
        }

        let mut odtl_train = Vec::with_capacity(target);
        let mut test = Vec::with_capacity(total - target);
        for (class_indices, &take) in per_class.iter().zip(&takes) {
            odtl_train.extend_from_slice(&class_indices[..take]);
            test.extend_from_slice(&class_indices[take..]);
        }
        odtl_train.sort_unstable();
        test.sort_unstable();

        rounds.push(SplitRound {
            offline_train: round.offline_train,
            offline_val: round.offline_val,
            odtl_train,
            test,
        });
    }
    Ok(SplitPlan {
        strategy: SplitStrategy::L1po2 { train_fraction },
        rounds,
    })
}

/// Recipe for a synthetic dataset with controllable user-induced drift.
///
/// Each class has a latent prototype waveform per channel (sinusoid with
/// class-specific frequency and per-channel amplitude/phase/offset,
/// derived from the seed). Each user draws one persistent perturbation —
/// per-channel gain and offset plus a global time-warp factor — scaled by
/// `user_drift`; sessions add a phase jitter also scaled by `user_drift`.
/// `noise` is additive white noise per element. With `user_drift = 0` and
/// `noise = 0` every sample of a class is identical across users.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftSpec {
    pub channels: usize,
    pub width: usize,
    pub classes: usize,
    pub num_users: usize,
    pub sessions_per_user: usize,
    pub samples_per_class_per_session: usize,
    pub user_drift: f32,
    pub noise: f32,
    pub seed: u64,
}

impl DriftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0
            || self.width == 0
            || self.classes == 0
            || self.num_users == 0
            || self.sessions_per_user == 0
            || self.samples_per_class_per_session == 0
        {
            return Err(Error::domain("drift spec counts must be positive"));
        }
        if self.user_drift < 0.0 || self.noise < 0.0 {
            return Err(Error::domain("drift/noise levels must be nonnegative"));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.num_users * self.sessions_per_user * self.classes * self.samples_per_class_per_session
    }
}

// Relative strength of the per-user perturbation components at
// user_drift = 1.
const GAIN_SPREAD: f32 = 0.35;
const OFFSET_SPREAD: f32 = 0.8;
const WARP_SPREAD: f32 = 0.06;
const SESSION_PHASE_SPREAD: f32 = 0.15;

struct ClassPrototype {
    frequency: f32,
    // Per channel: (amplitude, phase, offset).
    channel: Vec<(f32, f32, f32)>,
}

impl ClassPrototype {
    fn eval(&self, c: usize, t: f32) -> f32 {
        let (amp, phase, offset) = self.channel[c];
        amp * libm::sinf(2.0 * core::f32::consts::PI * self.frequency * t + phase) + offset
    }
}

/// Manufacture a dataset from a [`DriftSpec`]. Deterministic given the
/// spec.
pub fn synth(spec: &DriftSpec) -> Result<WindowedDataset> {
    spec.validate()?;
    let root = StreamRng::seed(spec.seed);

    let mut proto_rng = root.derive(1);
    let prototypes: Vec<ClassPrototype> = (0..spec.classes)
        .map(|k| ClassPrototype {
            frequency: (k + 1) as f32,
            channel: (0..spec.channels)
                .map(|_| {
                    let amp = 0.6 + 0.8 * proto_rng.next_f32();
                    let phase = proto_rng.next_f32() * 2.0 * core::f32::consts::PI;
                    let offset = proto_rng.next_symmetric(0.5);
                    (amp, phase, offset)
                })
                .collect(),
        })
        .collect();

    let user_root = root.derive(2);
    let noise_root = root.derive(3);
    let mut samples = Vec::with_capacity(spec.total_samples());

    for user in 0..spec.num_users {
        let mut urng = user_root.derive(user as u64);
        let per_channel: Vec<(f32, f32)> = (0..spec.channels)
            .map(|_| {
                let gain = 1.0 + spec.user_drift * GAIN_SPREAD * urng.next_normal();
                let offset = spec.user_drift * OFFSET_SPREAD * urng.next_normal();
                (gain, offset)
            })
            .collect();
        let warp = (1.0 + spec.user_drift * WARP_SPREAD * urng.next_normal()).clamp(0.5, 1.5);

        for session in 0..spec.sessions_per_user {
            let mut srng = user_root.derive_path(&[user as u64, 1 + session as u64]);
            let session_phase = spec.user_drift * SESSION_PHASE_SPREAD * srng.next_normal();

            for class in 0..spec.classes {
                for instance in 0..spec.samples_per_class_per_session {
                    let mut nrng = noise_root.derive_path(&[
                        user as u64,
                        session as u64,
                        class as u64,
                        instance as u64,
                    ]);
                    let proto = &prototypes[class];
                    let mut data = Vec::with_capacity(spec.channels * spec.width);
                    for c in 0..spec.channels {
                        let (gain, offset) = per_channel[c];
                        for i in 0..spec.width {
                            let t = warp * (i as f32 / spec.width as f32)
                                + session_phase / (2.0 * core::f32::consts::PI);
                            let mut v = gain * proto.eval(c, t) + offset;
                            if spec.noise > 0.0 {
                                v += spec.noise * nrng.next_normal();
                            }
                            data.push(v);
                        }
                    }
                    samples.push(Sample {
                        user_id: user as u16,
                        session_id: session as u16,
                        label: class as u16,
                        window: Tensor::from_vec(spec.channels, spec.width, data)?,
                    });
                }
            }
        }
    }
    WindowedDataset::new(spec.channels, spec.width, spec.classes, samples)
}

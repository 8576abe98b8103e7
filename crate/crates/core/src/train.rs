//! Training loops, loss, schedule, augmentation, patch sampling, folds.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::attach_dice_ce;
use crate::nn::graph::Graph;
use crate::nn::ops::dice_ce_forward;
use crate::nn::tensor::Tensor;
use crate::synth::derive_seed;
use crate::volume::{Mask, Volume};

pub const MOMENTUM: f32 = 0.99;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Patch size in volume (x, y, z) order.
    pub patch: [usize; 3],
    /// Probability that a sampled patch is centered on a lesion voxel.
    pub fg_prob: f64,
    pub seed: u64,
    pub dice_weight: f32,
    pub ce_weight: f32,
    /// Batches per epoch; defaults to ceil(cases / batch_size).
    pub iters_per_epoch: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Argument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be >= 1".into()));
        }
        if !(self.initial_lr >= 0.0) {
            return Err(Error::Argument("learning rate must be >= 0".into()));
        }
        if self.patch.iter().any(|&p| p == 0) {
            return Err(Error::Argument("patch dims must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.fg_prob) {
            return Err(Error::Argument("fg_prob must be in [0, 1]".into()));
        }
        if self.dice_weight < 0.0 || self.ce_weight < 0.0
            || (self.dice_weight == 0.0 && self.ce_weight == 0.0)
        {
            return Err(Error::Argument(
                "loss weights must be >= 0 and not both zero".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_axes: [bool; 3],
    pub gamma_range: (f32, f32),
    pub rotation_range_deg: (f32, f32),
    pub prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_axes: [true, true, true],
            gamma_range: (0.7, 1.5),
            rotation_range_deg: (-180.0, 180.0),
            prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            flip_axes: [false, false, false],
            gamma_range: (1.0, 1.0),
            rotation_range_deg: (0.0, 0.0),
            prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma_range.0 <= 0.0 || self.gamma_range.1 < self.gamma_range.0 {
            return Err(Error::Argument("gamma range must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.prob) {
            return Err(Error::Argument("probability must be in [0, 1]".into()));
        }
        if self.rotation_range_deg.1 < self.rotation_range_deg.0 {
            return Err(Error::Argument("rotation range inverted".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    pub fn cases_in(&self, fold: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn trace_to_csv(trace: &[EpochStat]) -> String {
    let mut out = String::from("epoch,lr,loss\n");
    for s in trace {
        out.push_str(&format!("{},{},{}\n", s.epoch, s.lr, s.loss));
    }
    out
}

/// Weighted soft-Dice + cross-entropy on a two-channel probability tensor.
pub fn dice_ce_loss(probs: &Tensor, target: &Tensor, dice_weight: f32, ce_weight: f32) -> Result<f64> {
    let (loss, _, _) = dice_ce_forward(probs, target, dice_weight, ce_weight)?;
    Ok(loss)
}

/// Linear decay: initial * (1 - epoch / total).
pub fn lr_schedule(epoch: usize, total_epochs: usize, initial: f64) -> f64 {
    assert!(epoch < total_epochs, "epoch out of range");
    initial * (1.0 - epoch as f64 / total_epochs as f64)
}

/// An image/mask patch pair in tensor (z, y, x) layout.
#[derive(Debug, Clone)]
pub struct TrainingPatch {
    pub size: [usize; 3],
    pub image: Vec<f32>,
    pub mask: Vec<f32>,
}

// symmetric reflection with the edge included; defined even for n = 1
pub(crate) fn reflect_index(i: usize, n: usize) -> usize {
    let m = i % (2 * n);
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Reverse a (z, y, x) buffer along one axis (0 = z, 1 = y, 2 = x).
pub fn flip_axis(data: &[f32], size: [usize; 3], axis: usize) -> Vec<f32> {
    let [nz, ny, nx] = size;
    let mut out = vec![0f32; data.len()];
    for z in 0..nz {
        let sz = if axis == 0 { nz - 1 - z } else { z };
        for y in 0..ny {
            let sy = if axis == 1 { ny - 1 - y } else { y };
            for x in 0..nx {
                let sx = if axis == 2 { nx - 1 - x } else { x };
                out[(z * ny + y) * nx + x] = data[(sz * ny + sy) * nx + sx];
            }
        }
    }
    out
}

/// Power-law intensity transform on the min-max normalized window.
pub fn apply_gamma(data: &mut [f32], gamma: f32) {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in data.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    if !(range > 1e-12) {
        return;
    }
    for v in data.iter_mut() {
        let t = (*v - lo) / range;
        *v = lo + range * t.powf(gamma);
    }
}

/// Rotate each axial (y, x) plane about its center by `theta` degrees.
/// Out-of-bounds samples are zero-filled.
pub fn rotate_z(data: &[f32], size: [usize; 3], theta_deg: f32, nearest: bool) -> Vec<f32> {
    let [nz, ny, nx] = size;
    let th = (theta_deg as f64).to_radians();
    let (sin, cos) = th.sin_cos();
    let cy = (ny as f64 - 1.0) / 2.0;
    let cx = (nx as f64 - 1.0) / 2.0;
    let mut out = vec![0f32; data.len()];
    for z in 0..nz {
        let plane = &data[z * ny * nx..(z + 1) * ny * nx];
        let oplane = &mut out[z * ny * nx..(z + 1) * ny * nx];
        for y in 0..ny {
            let dy = y as f64 - cy;
            for x in 0..nx {
                let dx = x as f64 - cx;
                let sx = cx + dx * cos + dy * sin;
                let sy = cy - dx * sin + dy * cos;
                let v = if nearest {
                    let ix = sx.round();
                    let iy = sy.round();
                    if ix < 0.0 || iy < 0.0 || ix >= nx as f64 || iy >= ny as f64 {
                        0.0
                    } else {
                        plane[iy as usize * nx + ix as usize]
                    }
                } else {
                    bilinear(plane, ny, nx, sy, sx)
                };
                oplane[y * nx + x] = v;
            }
        }
    }
    out
}

fn bilinear(plane: &[f32], ny: usize, nx: usize, sy: f64, sx: f64) -> f32 {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let fy = sy - y0;
    let fx = sx - x0;
    let mut acc = 0f64;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let yy = y0 as i64 + dy;
            let xx = x0 as i64 + dx;
            let v = if yy < 0 || xx < 0 || yy >= ny as i64 || xx >= nx as i64 {
                0.0
            } else {
                plane[yy as usize * nx + xx as usize] as f64
            };
            acc += wy * wx * v;
        }
    }
    acc as f32
}

/// Random flips, gamma, and z-rotation. The same geometric transform is
/// applied to image and mask; gamma touches the image only. Deterministic
/// per seed.
pub fn augment(patch: &TrainingPatch, cfg: &AugmentConfig, seed: u64) -> TrainingPatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = patch.image.clone();
    let mut mask = patch.mask.clone();
    for axis in 0..3 {
        if cfg.flip_axes[axis] && rng.random::<f64>() < cfg.prob {
            image = flip_axis(&image, patch.size, axis);
            mask = flip_axis(&mask, patch.size, axis);
        }
    }
    if rng.random::<f64>() < cfg.prob {
        let gamma = rng.random_range(cfg.gamma_range.0..=cfg.gamma_range.1);
        apply_gamma(&mut image, gamma);
    }
    if rng.random::<f64>() < cfg.prob {
        let theta = rng.random_range(cfg.rotation_range_deg.0..=cfg.rotation_range_deg.1);
        if theta != 0.0 {
            image = rotate_z(&image, patch.size, theta, false);
            mask = rotate_z(&mask, patch.size, theta, true);
        }
    }
    TrainingPatch {
        size: patch.size,
        image,
        mask,
    }
}

/// Extract a training patch. With probability `fg_prob` the center is a
/// uniformly chosen lesion voxel (when any exist); otherwise uniform.
/// Volumes smaller than the patch are reflect-padded. `patch` is in
/// volume (x, y, z) order; the result is in tensor (z, y, x) layout.
pub fn sample_patch(
    v: &Volume,
    m: &Mask,
    patch: [usize; 3],
    fg_prob: f64,
    seed: u64,
) -> Result<TrainingPatch> {
    if v.shape() != m.shape() {
        return Err(Error::Shape(format!(
            "volume {:?} vs mask {:?}",
            v.shape(),
            m.shape()
        )));
    }
    if patch.iter().any(|&p| p == 0) {
        return Err(Error::Argument("patch dims must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [nx, ny, nz] = v.shape();
    let lesions: Vec<usize> = m
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == 1)
        .map(|(i, _)| i)
        .collect();

    let center = if !lesions.is_empty() && rng.random::<f64>() < fg_prob {
        let i = lesions[rng.random_range(0..lesions.len())];
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    } else {
        [
            rng.random_range(0..nx),
            rng.random_range(0..ny),
            rng.random_range(0..nz),
        ]
    };

    let dims = [nx, ny, nz];
    let start: [usize; 3] = std::array::from_fn(|a| {
        if dims[a] <= patch[a] {
            0
        } else {
            center[a]
                .saturating_sub(patch[a] / 2)
                .min(dims[a] - patch[a])
        }
    });

    let size = [patch[2], patch[1], patch[0]];
    let n = patch[0] * patch[1] * patch[2];
    let mut image = vec![0f32; n];
    let mut mask = vec![0f32; n];
    for z in 0..patch[2] {
        let sz = reflect_index(start[2] + z, nz);
        for y in 0..patch[1] {
            let sy = reflect_index(start[1] + y, ny);
            for x in 0..patch[0] {
                let sx = reflect_index(start[0] + x, nx);
                let dst = (z * patch[1] + y) * patch[0] + x;
                image[dst] = v.get(sx, sy, sz);
                mask[dst] = m.get(sx, sy, sz) as f32;
            }
        }
    }
    Ok(TrainingPatch { size, image, mask })
}

/// Deterministic shuffle then round-robin assignment into k folds.
pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k == 0 || k > ids.len() {
        return Err(Error::Argument(format!(
            "k must be in [1, {}], got {k}",
            ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let assignment = order
        .iter()
        .enumerate()
        .map(|(pos, &idx)| (ids[idx].clone(), pos % k))
        .collect();
    Ok(FoldAssignment { k, assignment })
}

struct Sgd {
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    fn new(g: &Graph) -> Self {
        Sgd {
            velocity: g.params().iter().map(|p| vec![0f32; p.value.numel()]).collect(),
        }
    }

    /// Nesterov update: v = mu*v + g; p -= lr*(g + mu*v).
    fn step(&mut self, g: &mut Graph, lr: f32, grad_scale: f32) {
        for (pi, p) in g.params_mut().iter_mut().enumerate() {
            let grads = p.value.grad.as_ref().expect("params carry grads").clone();
            let vel = &mut self.velocity[pi];
            let data = p.value.data_mut();
            for j in 0..data.len() {
                let gj = grads[j] * grad_scale;
                vel[j] = MOMENTUM * vel[j] + gj;
                data[j] -= lr * (gj + MOMENTUM * vel[j]);
            }
        }
    }
}

/// Train a segmentation graph ending in a channel softmax. The graph is
/// updated in place; returns the per-epoch loss trace.
pub fn train_segmentation(
    g: &mut Graph,
    cases: &[(Volume, Mask)],
    cfg: &TrainConfig,
    aug: &AugmentConfig,
) -> Result<Vec<EpochStat>> {
    cfg.validate()?;
    aug.validate()?;
    if cases.is_empty() {
        return Err(Error::Argument("empty training cohort".into()));
    }
    let mut work = g.clone();
    attach_dice_ce(&mut work, cfg.dice_weight, cfg.ce_weight);

    let iters = cfg
        .iters_per_epoch
        .unwrap_or_else(|| cases.len().div_ceil(cfg.batch_size))
        .max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(&work);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut sample_counter = 0u64;

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.epochs, cfg.initial_lr);
        let mut epoch_loss = 0f64;
        for _ in 0..iters {
            work.zero_grads();
            let mut batch_loss = 0f64;
            for _ in 0..cfg.batch_size {
                let case = &cases[rng.random_range(0..cases.len())];
                let s1 = derive_seed(cfg.seed, sample_counter);
                let s2 = derive_seed(cfg.seed, sample_counter + 1);
                sample_counter += 2;
                let raw = sample_patch(&case.0, &case.1, cfg.patch, cfg.fg_prob, s1)?;
                let p = augment(&raw, aug, s2);
                let [sz, sy, sx] = p.size;
                let feeds = [
                    ("x".to_string(), Tensor::new(vec![1, 1, sz, sy, sx], p.image)?),
                    ("t".to_string(), Tensor::new(vec![1, sz, sy, sx], p.mask)?),
                ]
                .into_iter()
                .collect();
                let tape = work.forward(&feeds)?;
                let out = work.output().unwrap();
                batch_loss += tape.scalars[out].expect("loss is scalar");
                work.backward(&tape)?;
            }
            let mean_loss = batch_loss / cfg.batch_size as f64;
            if !mean_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    reason: format!("non-finite loss {mean_loss}"),
                });
            }
            epoch_loss += mean_loss;
            opt.step(&mut work, lr as f32, 1.0 / cfg.batch_size as f32);
        }
        trace.push(EpochStat {
            epoch,
            lr,
            loss: epoch_loss / iters as f64,
        });
    }

    for p in work.params() {
        g.set_param_data(&p.name, p.value.data())?;
    }
    Ok(trace)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub seed: u64,
    /// Axial slices dropped from the bottom of every volume.
    pub neck_exclude: usize,
    pub val_fraction: f64,
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Argument("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Argument(
                "classifier batch size must be even and >= 2".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Argument("val fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

struct SliceDataset {
    height: usize,
    width: usize,
    slices: Vec<Vec<f32>>,
    labels: Vec<bool>,
}

fn build_slice_dataset(cases: &[(Volume, Mask)], neck_exclude: usize) -> Result<SliceDataset> {
    let first = &cases[0].0;
    let [nx, ny, _] = first.shape();
    let mut slices = Vec::new();
    let mut labels = Vec::new();
    for (v, m) in cases {
        if v.shape()[0] != nx || v.shape()[1] != ny {
            return Err(Error::Dataset(format!(
                "slice dims disagree: {:?} vs [{nx}, {ny}]",
                &v.shape()[..2]
            )));
        }
        if v.shape() != m.shape() {
            return Err(Error::Dataset("volume/mask shape mismatch".into()));
        }
        let nz = v.shape()[2];
        for z in neck_exclude..nz {
            let mut buf = vec![0f32; nx * ny];
            let mut any = false;
            for y in 0..ny {
                for x in 0..nx {
                    buf[y * nx + x] = v.get(x, y, z);
                    any |= m.get(x, y, z) == 1;
                }
            }
            slices.push(buf);
            labels.push(any);
        }
    }
    Ok(SliceDataset {
        height: ny,
        width: nx,
        slices,
        labels,
    })
}

/// Half positives, half negatives; the minority class is resampled with
/// replacement as needed.
fn balanced_batch(pos: &[usize], neg: &[usize], batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let half = batch / 2;
    let mut out = Vec::with_capacity(batch);
    for _ in 0..half {
        out.push(pos[rng.random_range(0..pos.len())]);
    }
    for _ in 0..half {
        out.push(neg[rng.random_range(0..neg.len())]);
    }
    out
}

/// Train a 2D slice classifier on axial slices (dropping the first
/// `neck_exclude` per volume; label = slice holds any lesion voxel).
/// Returns validation accuracy and the loss trace.
pub fn train_slice_classifier(
    g: &mut Graph,
    cases: &[(Volume, Mask)],
    cfg: &ClassifierConfig,
) -> Result<(f64, Vec<EpochStat>)> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::Argument("empty training cohort".into()));
    }
    let ds = build_slice_dataset(cases, cfg.neck_exclude)?;
    let pos_all: Vec<usize> = (0..ds.labels.len()).filter(|&i| ds.labels[i]).collect();
    let neg_all: Vec<usize> = (0..ds.labels.len()).filter(|&i| !ds.labels[i]).collect();
    if pos_all.is_empty() {
        return Err(Error::Dataset(
            "no positive slices after neck exclusion".into(),
        ));
    }
    if neg_all.is_empty() {
        return Err(Error::Dataset("no negative slices".into()));
    }

    // Stratified train/validation split.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let split = |list: &[usize], rng: &mut ChaCha8Rng| -> (Vec<usize>, Vec<usize>) {
        let mut order = list.to_vec();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let n_val = ((order.len() as f64 * cfg.val_fraction).round() as usize)
            .min(order.len() - 1);
        let val = order.split_off(order.len() - n_val);
        (order, val)
    };
    let (pos_train, pos_val) = split(&pos_all, &mut rng);
    let (neg_train, neg_val) = split(&neg_all, &mut rng);
    let val: Vec<usize> = pos_val.into_iter().chain(neg_val).collect();

    let mut work = g.clone();
    attach_dice_ce(&mut work, 0.0, 1.0);
    let mut opt = Sgd::new(&work);
    let iters = (pos_train.len() + neg_train.len())
        .div_ceil(cfg.batch_size)
        .max(1);
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.epochs, cfg.initial_lr);
        let mut epoch_loss = 0f64;
        for _ in 0..iters {
            let idx = balanced_batch(&pos_train, &neg_train, cfg.batch_size, &mut rng);
            let b = idx.len();
            let mut xbuf = Vec::with_capacity(b * ds.height * ds.width);
            let mut tbuf = Vec::with_capacity(b);
            for &i in &idx {
                xbuf.extend_from_slice(&ds.slices[i]);
                tbuf.push(f32::from(ds.labels[i]));
            }
            let feeds = [
                (
                    "x".to_string(),
                    Tensor::new(vec![b, 1, ds.height, ds.width], xbuf)?,
                ),
                ("t".to_string(), Tensor::new(vec![b], tbuf)?),
            ]
            .into_iter()
            .collect();
            work.zero_grads();
            let tape = work.forward(&feeds)?;
            let out = work.output().unwrap();
            let loss = tape.scalars[out].expect("loss is scalar");
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    reason: format!("non-finite loss {loss}"),
                });
            }
            epoch_loss += loss;
            work.backward(&tape)?;
            opt.step(&mut work, lr as f32, 1.0);
        }
        trace.push(EpochStat {
            epoch,
            lr,
            loss: epoch_loss / iters as f64,
        });
    }

    for p in work.params() {
        g.set_param_data(&p.name, p.value.data())?;
    }

    let mut correct = 0usize;
    for &i in &val {
        let feeds = [(
            "x".to_string(),
            Tensor::new(vec![1, 1, ds.height, ds.width], ds.slices[i].clone())?,
        )]
        .into_iter()
        .collect();
        let probs = g.forward_value(&feeds)?;
        let predicted = probs.data()[1] > probs.data()[0];
        if predicted == ds.labels[i] {
            correct += 1;
        }
    }
    let accuracy = if val.is_empty() {
        0.0
    } else {
        correct as f64 / val.len() as f64
    };
    Ok((accuracy, trace))
}

//! Adam, the mini-batch training loop and evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{depth_map_target, heatmap_target, normalize_input, Dataset, PoseSample, Split, ViewTag};
use crate::error::{DecaError, Result};
use crate::losses::{inverse_graphics_loss, masked_l1_loss, mse_loss, weighted_total, InverseGraphicsMode};
use crate::metrics::{compute_report, MetricsReport};
use crate::model::{Deca, Task};
use crate::nn::Mode;
use crate::real::Real;
use crate::tensor::{check_finite, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub inverse_graphics_mode: InverseGraphicsMode,
    /// Normalized depth-map target value above which a pixel counts as
    /// foreground in the masked L1 loss.
    pub depth_threshold: f64,
    /// Global gradient-norm clip; off unless set.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            weight_decay: 0.0,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            inverse_graphics_mode: InverseGraphicsMode::default(),
            depth_threshold: 0.1,
            clip_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DecaError::Config(m));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0,1) and eps must be > 0".into());
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return bad(format!("clip_grad_norm must be > 0, got {c}"));
            }
        }
        Ok(())
    }
}

/// First and second moments per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real> {
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
        Self { t: 0, m: zeros(), v: zeros() }
    }

    pub fn matches(&self, store: &ParamStore<T>) -> bool {
        self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.len() == p.tensor.numel() && v.len() == p.tensor.numel())
    }
}

/// One bias-corrected Adam update over every parameter; gradients are
/// zeroed afterwards.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>, cfg: &TrainConfig) -> Result<()> {
    if !state.matches(store) {
        return Err(DecaError::Contract("optimizer state does not match the parameter store".into()));
    }
    if let Some(p) = store.iter().find(|p| p.tensor.grad.is_none()) {
        return Err(DecaError::Contract(format!("parameter {} has no gradient", p.name)));
    }
    let clip = match cfg.clip_grad_norm {
        Some(c) => {
            let sq: f64 = store
                .iter()
                .flat_map(|p| p.tensor.grad.as_ref().expect("checked").iter())
                .map(|g| g.as_f64() * g.as_f64())
                .sum();
            let norm = sq.sqrt();
            if norm > c { c / norm } else { 1.0 }
        }
        None => 1.0,
    };
    state.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    let lr = cfg.learning_rate;
    for (k, p) in store.iter_mut().enumerate() {
        let grad = p.tensor.grad.take().expect("checked");
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let g = grad[i].as_f64() * clip + cfg.weight_decay * w.as_f64();
            let mi = b1 * m[i].as_f64() + (1.0 - b1) * g;
            let vi = b2 * v[i].as_f64() + (1.0 - b2) * g * g;
            m[i] = T::from_f64(mi);
            v[i] = T::from_f64(vi);
            let upd = lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.adam_eps);
            *w = T::from_f64(w.as_f64() - upd);
        }
        p.tensor.grad = Some(vec![T::zero(); grad.len()]);
    }
    Ok(())
}

/// Mean losses and `s_τ` over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_per_task: BTreeMap<String, f64>,
    pub s_per_task: BTreeMap<String, f64>,
    pub wall_ms: u64,
}

/// A mini-batch in model layout.
#[derive(Clone, Debug)]
pub struct Batch<T: Real> {
    pub size: usize,
    pub input: Vec<T>,
    pub targets: BTreeMap<Task, Vec<T>>,
}

/// Checks that `model` can consume `dataset`.
pub fn check_compatible(model: &Deca, dataset: &Dataset) -> Result<()> {
    let cfg = &model.config;
    let m = &dataset.manifest;
    if m.joints() != cfg.joints {
        return Err(DecaError::Config(format!(
            "model predicts {} joints but the dataset has {}",
            cfg.joints,
            m.joints()
        )));
    }
    if m.channels() != cfg.input_channels || m.resolution != cfg.input_resolution {
        return Err(DecaError::Config(format!(
            "model expects {}-channel {:?} input, dataset is {}-channel {:?}",
            cfg.input_channels,
            cfg.input_resolution,
            m.channels(),
            m.resolution
        )));
    }
    Ok(())
}

fn missing(task: Task, stem: &str) -> DecaError {
    DecaError::Data(format!("sample {stem} has no target for task {} ({})", task.key(), task))
}

/// Inputs and per-task targets for `indices`. Depth-map targets are
/// `(far − depth)/far` pooled to the reconstruction grid.
pub fn assemble_batch<T: Real>(model: &Deca, dataset: &Dataset, indices: &[usize]) -> Result<Batch<T>> {
    let cfg = &model.config;
    let far = dataset.manifest.far_plane_m;
    let [h, w] = cfg.input_resolution;
    let mut input = Vec::with_capacity(indices.len() * cfg.input_channels * h * w);
    let mut targets: BTreeMap<Task, Vec<T>> = BTreeMap::new();
    for &i in indices {
        let s: &PoseSample = &dataset.samples[i];
        input.extend(normalize_input(s, far)?.into_iter().map(|v| T::from_f64(v as f64)));
        for &task in cfg.tasks() {
            let out = targets.entry(task).or_default();
            match task {
                Task::Pose3d => out.extend(s.joints3d.iter().flatten().map(|&v| T::from_f64(v))),
                Task::Pose2d => out.extend(s.joints2d.iter().flatten().map(|&v| T::from_f64(v))),
                Task::DepthMap => {
                    let d = s.depth().ok_or_else(|| missing(task, &s.stem))?;
                    let t = depth_map_target(d, [h, w], cfg.recon_resolution, far)?;
                    out.extend(t.into_iter().map(|v| T::from_f64(v as f64 / far)));
                }
                Task::JointHeatmaps => {
                    if s.joints2d.len() != cfg.joints {
                        return Err(missing(task, &s.stem));
                    }
                    out.extend(heatmap_target(&s.joints2d, cfg.recon_resolution).into_iter().map(|v| T::from_f64(v as f64)));
                }
                Task::InverseGraphics => {}
            }
        }
    }
    for &task in cfg.tasks() {
        if task.has_head() && targets.get(&task).map_or(true, |t| t.is_empty()) {
            return Err(DecaError::Data(format!("no target for task {} in the batch", task.key())));
        }
    }
    Ok(Batch { size: indices.len(), input, targets })
}

/// Per-task losses and the weighted total for one batch.
pub struct StepLosses<'g, T: Real> {
    pub total: Var<'g, T>,
    pub per_task: BTreeMap<Task, Var<'g, T>>,
    pub s: BTreeMap<Task, Var<'g, T>>,
}

pub fn batch_losses<'g, T: Real>(
    g: &'g Graph<T>,
    model: &Deca,
    store: &ParamStore<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
    mode: Mode,
    dropout_seed: u64,
) -> Result<StepLosses<'g, T>> {
    let mc = &model.config;
    let [h, w] = mc.input_resolution;
    let [rh, rw] = mc.recon_resolution;
    let (b, j) = (batch.size, mc.joints);
    let x = g.input(&[b, mc.input_channels, h, w], batch.input.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let out = model.forward(g, store, x, mode, &mut rng)?;
    let p = &out.predictions;
    let target = |task: Task, shape: &[usize]| -> Result<Var<'g, T>> {
        let t = batch.targets.get(&task).ok_or_else(|| DecaError::Data(format!("no target for task {}", task.key())))?;
        g.input(shape, t.clone())
    };
    let mut per_task = BTreeMap::new();
    for &task in mc.tasks() {
        let l = match task {
            Task::Pose3d => mse_loss(p.y3d, target(task, &[b, j, 3])?)?,
            Task::Pose2d => {
                let y = p.y2d.ok_or_else(|| DecaError::Contract("2D head missing".into()))?;
                mse_loss(y, target(task, &[b, j, 2])?)?
            }
            Task::DepthMap => {
                let y = p.ydm.ok_or_else(|| DecaError::Contract("depth head missing".into()))?;
                masked_l1_loss(y, target(task, &[b, rh, rw])?, cfg.depth_threshold)?
            }
            Task::JointHeatmaps => {
                let y = p.ydm.ok_or_else(|| DecaError::Contract("heatmap head missing".into()))?;
                mse_loss(y, target(task, &[b, j, rh, rw])?)?
            }
            Task::InverseGraphics => inverse_graphics_loss(
                out.encoded.inverse_graphics,
                out.encoded.class_transforms,
                cfg.inverse_graphics_mode,
            )?,
        };
        per_task.insert(task, l);
    }
    let s: BTreeMap<Task, Var<'g, T>> = model.loss_weights.iter().map(|(&t, &id)| (t, g.param(store, id))).collect();
    let total = weighted_total(&s, &per_task)?;
    Ok(StepLosses { total, per_task, s })
}

/// Seed for the epoch shuffle.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Seed for the dropout masks of global step `step`.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    seed.rotate_left(17) ^ (step + 1).wrapping_mul(0xd1b5_4a32_d192_ed03)
}

/// Model, parameters and optimizer state together with the global step.
/// The data order of every step is a function of `(seed, step)`, so a
/// trainer rebuilt from a checkpoint continues exactly where it stopped.
pub struct Trainer<T: Real> {
    pub model: Deca,
    pub store: ParamStore<T>,
    pub adam: AdamState<T>,
    pub cfg: TrainConfig,
    pub step: u64,
}

/// Running sums for one epoch.
#[derive(Default)]
struct EpochAcc {
    steps: usize,
    total: f64,
    per_task: BTreeMap<String, f64>,
    s: BTreeMap<String, f64>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Deca, store: ParamStore<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(&store);
        Ok(Self { model, store, adam, cfg, step: 0 })
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.batch_size)
    }

    /// Indices of the training samples used at global `step`, given the
    /// `pool` of eligible sample indices.
    pub fn batch_indices(&self, pool: &[usize], step: u64) -> Vec<usize> {
        let per = self.steps_per_epoch(pool.len()) as u64;
        let epoch = (step / per) as usize;
        let k = (step % per) as usize;
        let mut order = pool.to_vec();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(self.cfg.seed, epoch)));
        let bs = self.cfg.batch_size;
        order[k * bs..((k + 1) * bs).min(order.len())].to_vec()
    }

    /// Forward, backward and one Adam update on `indices`; returns the
    /// total and per-task losses and the `s_τ` values used.
    pub fn train_batch(&mut self, dataset: &Dataset, indices: &[usize]) -> Result<(f64, BTreeMap<Task, f64>, BTreeMap<Task, f64>)> {
        let batch = assemble_batch::<T>(&self.model, dataset, indices)?;
        let g = Graph::<T>::new();
        let l = batch_losses(&g, &self.model, &self.store, &batch, &self.cfg, Mode::Train, step_seed(self.cfg.seed, self.step))?;
        let total = l.total.item().as_f64();
        if !total.is_finite() {
            return Err(DecaError::Numeric(format!("loss is {total} at step {}", self.step)));
        }
        let per: BTreeMap<Task, f64> = l.per_task.iter().map(|(&t, v)| (t, v.item().as_f64())).collect();
        let s: BTreeMap<Task, f64> = l.s.iter().map(|(&t, v)| (t, v.item().as_f64())).collect();
        self.store.zero_grad();
        g.backward(l.total, &mut self.store)?;
        drop(l);
        adam_step(&mut self.store, &mut self.adam, &self.cfg)?;
        self.step += 1;
        let bad = self.store.non_finite();
        if !bad.is_empty() {
            return Err(DecaError::Numeric(format!(
                "non-finite parameters after step {}: {}",
                self.step,
                bad.join(", ")
            )));
        }
        Ok((total, per, s))
    }

    /// Sets every head's output bias to the mean training target, so the
    /// decoders start from the average pose instead of the origin.
    pub fn init_output_biases(&mut self, dataset: &Dataset, pool: &[usize]) -> Result<()> {
        let mut sums: BTreeMap<Task, Vec<f64>> = BTreeMap::new();
        for chunk in pool.chunks(64) {
            let batch = assemble_batch::<T>(&self.model, dataset, chunk)?;
            for (task, t) in batch.targets.iter().filter(|(t, _)| t.has_head()) {
                let n = self.model.config.output_size(*task);
                let acc = sums.entry(*task).or_insert_with(|| vec![0.0; n]);
                for row in t.chunks(n) {
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a += v.as_f64());
                }
            }
        }
        for (task, head) in &self.model.heads {
            let Some(sum) = sums.get(task) else { continue };
            let bias = self.store.get_mut(head.output.bias).tensor.data_mut();
            for (b, s) in bias.iter_mut().zip(sum) {
                *b = T::from_f64(s / pool.len() as f64);
            }
        }
        Ok(())
    }

    /// Runs `n` optimizer steps over `pool`, continuing from the current
    /// global step. Returns one log entry per epoch touched.
    pub fn train_steps(&mut self, dataset: &Dataset, pool: &[usize], n: u64) -> Result<Vec<EpochLog>> {
        if pool.is_empty() {
            return Err(DecaError::Data("no training samples".into()));
        }
        check_compatible(&self.model, dataset)?;
        let per = self.steps_per_epoch(pool.len()) as u64;
        let mut logs = Vec::new();
        let mut acc = EpochAcc::default();
        let mut clock = Instant::now();
        let end = self.step + n;
        if self.step == 0 && n > 0 {
            self.init_output_biases(dataset, pool)?;
        }
        while self.step < end {
            let epoch = (self.step / per) as usize;
            let idx = self.batch_indices(pool, self.step);
            let (total, lt, s) = self.train_batch(dataset, &idx)?;
            acc.steps += 1;
            acc.total += total;
            for (t, v) in lt {
                *acc.per_task.entry(t.key().to_string()).or_default() += v;
            }
            for (t, v) in s {
                *acc.s.entry(t.key().to_string()).or_default() += v;
            }
            if self.step % per == 0 || self.step == end {
                let k = acc.steps as f64;
                logs.push(EpochLog {
                    epoch,
                    loss_total: acc.total / k,
                    loss_per_task: acc.per_task.iter().map(|(t, v)| (t.clone(), v / k)).collect(),
                    s_per_task: acc.s.iter().map(|(t, v)| (t.clone(), v / k)).collect(),
                    wall_ms: clock.elapsed().as_millis() as u64,
                });
                acc = EpochAcc::default();
                clock = Instant::now();
            }
        }
        Ok(logs)
    }

    /// `cfg.epochs` full passes over `pool`.
    pub fn train_epochs(&mut self, dataset: &Dataset, pool: &[usize]) -> Result<Vec<EpochLog>> {
        let n = (self.cfg.epochs * self.steps_per_epoch(pool.len())) as u64;
        self.train_steps(dataset, pool, n)
    }
}

/// Training-split sample indices, optionally restricted to one view.
pub fn training_pool(dataset: &Dataset, view: Option<ViewTag>) -> Vec<usize> {
    dataset.select(view, Some(Split::Train))
}

/// Eval-mode predictions for `indices`: camera-frame joints per sample and
/// the flattened `[N, J, 16]` entities.
pub fn predict<T: Real>(
    model: &Deca,
    store: &ParamStore<T>,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<(Vec<Vec<[f64; 3]>>, Vec<f64>)> {
    check_compatible(model, dataset)?;
    let j = model.config.joints;
    let mut poses = Vec::with_capacity(indices.len());
    let mut entities = Vec::with_capacity(indices.len() * j * 16);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in indices.chunks(batch_size.max(1)) {
        let [h, w] = model.config.input_resolution;
        let far = dataset.manifest.far_plane_m;
        let mut input = Vec::with_capacity(chunk.len() * model.config.input_channels * h * w);
        for &i in chunk {
            input.extend(normalize_input(&dataset.samples[i], far)?.into_iter().map(|v| T::from_f64(v as f64)));
        }
        let g = Graph::<T>::new();
        let x = g.input(&[chunk.len(), model.config.input_channels, h, w], input)?;
        let enc = model.encode(&g, store, x)?;
        let pred = model.decode(&g, store, enc.entities, Mode::Eval, &mut rng)?;
        let y = pred.y3d.to_vec();
        check_finite("3D prediction", &y)?;
        for s in y.chunks(j * 3) {
            poses.push(s.chunks(3).map(|c| [c[0].as_f64(), c[1].as_f64(), c[2].as_f64()]).collect());
        }
        entities.extend(enc.entities.to_vec().into_iter().map(|v| v.as_f64()));
    }
    Ok((poses, entities))
}

/// Metrics of `model` on the test split (optionally one view only).
pub fn evaluate<T: Real>(
    model: &Deca,
    store: &ParamStore<T>,
    dataset: &Dataset,
    view: Option<ViewTag>,
    split: Option<Split>,
) -> Result<MetricsReport> {
    let idx = dataset.select(view, split);
    if idx.is_empty() {
        return Err(DecaError::Data(format!(
            "no samples for view {} and split {:?}",
            view.map_or("any".to_string(), |v| v.to_string()),
            split
        )));
    }
    let (pred, entities) = predict(model, store, dataset, &idx, 32)?;
    let gt: Vec<Vec<[f64; 3]>> = idx.iter().map(|&i| dataset.samples[i].joints3d.clone()).collect();
    compute_report(&pred, &gt, &dataset.manifest.joint_names, Some(&entities))
}

/// Constant prediction: the mean world-frame training pose, placed in each
/// test camera's frame.
pub fn mean_pose_baseline(dataset: &Dataset, train: &[usize], test: &[usize]) -> Result<MetricsReport> {
    if train.is_empty() || test.is_empty() {
        return Err(DecaError::Data("baseline needs training and test samples".into()));
    }
    let j = dataset.manifest.joints();
    let mut mean = vec![[0.0; 3]; j];
    for &i in train {
        for (m, p) in mean.iter_mut().zip(dataset.samples[i].joints_world()) {
            (0..3).for_each(|k| m[k] += p[k]);
        }
    }
    mean.iter_mut().for_each(|m| m.iter_mut().for_each(|v| *v /= train.len() as f64));
    let mut pred = Vec::with_capacity(test.len());
    let mut gt = Vec::with_capacity(test.len());
    for &i in test {
        let s = &dataset.samples[i];
        pred.push(mean.iter().map(|&p| s.camera.world_to_camera(p)).collect());
        gt.push(s.joints3d.clone());
    }
    compute_report(&pred, &gt, &dataset.manifest.joint_names, None)
}

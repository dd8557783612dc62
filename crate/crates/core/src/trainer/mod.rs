//! Alternating-update training loop: one generator-side and one
//! discriminator update per iteration, with balance-factor warmup,
//! skip-on-non-finite protection, CSV logging, and resumable checkpoints.

use std::collections::HashMap;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{augment, Dataset, ImageSnippet, ImuWindow};
use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::warp::build_inverse_warp;
use crate::geometry::CameraIntrinsics;
use crate::losses::{
    adversarial_losses, calibrate_beta, photometric_loss, total_loss, LossConfig, LossLog,
    LossReport, LossRow, BETA_WARMUP_BATCHES,
};
use crate::nets::store::{Binding, ParamStore};
use crate::nets::{load_params, save_params, ImuNet, Mode, NetConfig, VioModel};
use crate::Real;


/// Consecutive skipped steps tolerated before training aborts.
pub const MAX_CONSECUTIVE_SKIPS: u32 = 3;

const CHECKPOINT_VERSION: u32 = 1;

/// Run-level training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_iterations: u64,
    pub validation_interval: u64,
    /// Adam first and second moment decay rates.
    pub momentum1: f64,
    pub momentum2: f64,
    pub adam_eps: f64,
    pub learning_rate: f64,
    /// Multiplier applied every `lr_step` iterations.
    pub lr_gamma: f64,
    pub lr_step: u64,
    /// Global-norm gradient clip applied separately to each update.
    pub grad_clip: f64,
    pub seed: u64,
    /// Batches recorded before the balance factor is frozen.
    pub warmup_batches: usize,
    /// False trains on the reconstruction term alone and never touches the
    /// discriminator.
    pub use_adversarial: bool,
    /// When false the pose networks update on the reconstruction term only;
    /// depth networks always update on the full objective.
    pub pose_on_total: bool,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            max_iterations: 100_000,
            validation_interval: 1_000,
            momentum1: 0.9,
            momentum2: 0.99,
            adam_eps: 1e-8,
            learning_rate: 2e-4,
            lr_gamma: 0.5,
            lr_step: 50_000,
            grad_clip: 10.0,
            seed: 0,
            warmup_batches: BETA_WARMUP_BATCHES,
            use_adversarial: true,
            pose_on_total: true,
            augment: false,
        }
    }
}

impl TrainConfig {
    /// Short run sized for the synthetic desk datasets; the decay step
    /// keeps the same proportion of the run as the full-scale default.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 4,
            max_iterations: 2_000,
            validation_interval: 500,
            lr_step: 1_000,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("max_iterations", self.max_iterations as f64),
            ("validation_interval", self.validation_interval as f64),
            ("momentum1", self.momentum1),
            ("momentum2", self.momentum2),
            ("adam_eps", self.adam_eps),
            ("learning_rate", self.learning_rate),
            ("lr_gamma", self.lr_gamma),
            ("lr_step", self.lr_step as f64),
            ("grad_clip", self.grad_clip),
            ("warmup_batches", self.warmup_batches as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.momentum1 >= 1.0 || self.momentum2 >= 1.0 {
            return Err(Error::invalid("optimizer moments must be below 1"));
        }
        if self.validation_interval > self.max_iterations {
            return Err(Error::invalid(format!(
                "validation interval {} exceeds max iterations {}",
                self.validation_interval, self.max_iterations
            )));
        }
        if self.warmup_batches < BETA_WARMUP_BATCHES {
            return Err(Error::invalid(format!(
                "warmup must cover at least {BETA_WARMUP_BATCHES} batches, got {}",
                self.warmup_batches
            )));
        }
        Ok(())
    }

    /// Staircase-exponential learning rate at an iteration.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        self.learning_rate * self.lr_gamma.powi((iteration / self.lr_step) as i32)
    }
}

/// Balance factor: provisional 1.0 while the warmup window fills, then the
/// frozen ratio of mean losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BetaState {
    Warmup(Vec<(f64, f64)>),
    Frozen(f64),
}

impl BetaState {
    pub fn value(&self) -> f64 {
        match self {
            BetaState::Warmup(_) => 1.0,
            BetaState::Frozen(b) => *b,
        }
    }
}

/// Adam with per-parameter moment estimates, keyed by parameter name.
#[derive(Debug, Clone)]
struct Adam {
    m: IndexMap<String, ArrayD<Real>>,
    v: IndexMap<String, ArrayD<Real>>,
    t: u64,
}

impl Adam {
    fn new(store: &ParamStore<Real>) -> Self {
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for name in store.trainable_names() {
            let z = ArrayD::zeros(IxDyn(store.get(&name).shape()));
            m.insert(name.clone(), z.clone());
            v.insert(name, z);
        }
        Adam { m, v, t: 0 }
    }

    /// Applies one update to the named parameters; `t` must have been
    /// advanced once for the surrounding iteration.
    fn apply(
        &mut self,
        store: &mut ParamStore<Real>,
        grads: &[(String, ArrayD<Real>)],
        lr: f64,
        config: &TrainConfig,
    ) {
        let (b1, b2, eps) = (config.momentum1, config.momentum2, config.adam_eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, g) in grads {
            let m = self.m.get_mut(name).expect("moment buffer");
            let v = self.v.get_mut(name).expect("moment buffer");
            let p = store.get_mut(name);
            for ((pi, gi), (mi, vi)) in p.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pi -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Scales a gradient set down to the configured global norm when exceeded.
fn clip_global_norm(grads: &mut [(String, ArrayD<Real>)], clip: f64) {
    let norm_sq: f64 = grads.iter().flat_map(|(_, g)| g.iter()).map(|v| v * v).sum();
    let norm = norm_sq.sqrt();
    if norm > clip {
        let s = clip / norm;
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
}

/// Checkpoint sidecar: everything beyond parameters and moments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub iteration: u64,
    pub adam_t: u64,
    pub beta: BetaState,
    pub config_hash: String,
    /// ChaCha stream position as (high, low) halves.
    pub rng_word_pos: (u64, u64),
    pub consecutive_skips: u32,
    pub last_losses: Option<LossReport>,
}

/// Hash tying a checkpoint to the exact run configuration.
pub fn config_hash(train: &TrainConfig, net: &NetConfig) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(train).expect("serializable config"));
    h.update(serde_json::to_vec(net).expect("serializable config"));
    let d = h.finalize();
    d.iter().map(|b| format!("{b:02x}")).collect()
}

struct Sample {
    snippet: ImageSnippet,
    window: ImuWindow,
    k: CameraIntrinsics<Real>,
}

/// Training loop state: model, optimizer, data handles, RNG, and logs.
pub struct Trainer {
    pub config: TrainConfig,
    pub loss_config: LossConfig,
    model: VioModel,
    store: ParamStore<Real>,
    dataset: Dataset,
    train_items: Vec<(String, usize)>,
    val_items: Vec<(String, usize)>,
    cache: HashMap<(String, usize), (ImageSnippet, ImuWindow)>,
    adam: Adam,
    rng: ChaCha12Rng,
    iteration: u64,
    beta: BetaState,
    consecutive_skips: u32,
    last_losses: Option<LossReport>,
    log: Option<LossLog>,
    /// (iteration, mean validation reconstruction loss) per validation run.
    pub val_history: Vec<(u64, f64)>,
}

fn snippet_items(dataset: &Dataset, names: &[String]) -> Result<Vec<(String, usize)>> {
    let mut items = Vec::new();
    for seq in names {
        for idx in dataset.snippet_indices(seq)? {
            items.push((seq.clone(), idx));
        }
    }
    Ok(items)
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        net: NetConfig,
        dataset: Dataset,
        log_path: Option<&Path>,
    ) -> Result<Self> {
        config.validate()?;
        let train_items = snippet_items(&dataset, &dataset.config().splits.train)?;
        if train_items.is_empty() {
            return Err(Error::invalid("training split has no snippets"));
        }
        let val_items = snippet_items(&dataset, &dataset.config().splits.val)?;

        let mut store = ParamStore::new();
        let mut init_rng = ChaCha12Rng::seed_from_u64(config.seed);
        let model = VioModel::new(net, &mut store, &mut init_rng)?;
        let adam = Adam::new(&store);
        let rng = ChaCha12Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        let log = match log_path {
            Some(p) => Some(LossLog::create(p)?),
            None => None,
        };
        Ok(Trainer {
            config,
            loss_config: LossConfig::default(),
            model,
            store,
            dataset,
            train_items,
            val_items,
            cache: HashMap::new(),
            adam,
            rng,
            iteration: 0,
            beta: BetaState::Warmup(Vec::new()),
            consecutive_skips: 0,
            last_losses: None,
            log: None,
            val_history: Vec::new(),
        }
        .with_log(log))
    }

    fn with_log(mut self, log: Option<LossLog>) -> Self {
        self.log = log;
        self
    }

    pub fn model(&self) -> &VioModel {
        &self.model
    }

    pub fn store(&self) -> &ParamStore<Real> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<Real> {
        &mut self.store
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn beta(&self) -> &BetaState {
        &self.beta
    }

    fn load_item(&mut self, seq: &str, idx: usize) -> Result<(ImageSnippet, ImuWindow)> {
        let key = (seq.to_string(), idx);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit.clone());
        }
        let loaded = self.dataset.load_snippet(seq, idx)?;
        self.cache.insert(key, loaded.clone());
        Ok(loaded)
    }

    fn draw_batch(&mut self) -> Result<Vec<Sample>> {
        let mut samples = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let pick = self.rng.random_range(0..self.train_items.len());
            let (seq, idx) = self.train_items[pick].clone();
            let (snippet, window) = self.load_item(&seq, idx)?;
            let k = self.dataset.meta(&seq)?.intrinsics;
            let (snippet, k) = if self.config.augment {
                let seed = self.rng.random::<u64>();
                let (s, kk, _) = augment(&snippet, &k, seed);
                (s, kk)
            } else {
                (snippet, k)
            };
            samples.push(Sample { snippet, window, k });
        }
        Ok(samples)
    }

    /// One training iteration: forward, generator-side update on the total
    /// objective, discriminator update on its own loss. Non-finite losses
    /// or gradients skip the update; repeated skips abort.
    pub fn step(&mut self) -> Result<LossReport> {
        if let BetaState::Warmup(hist) = &self.beta {
            if self.config.use_adversarial && hist.len() >= self.config.warmup_batches {
                self.beta = BetaState::Frozen(calibrate_beta(hist)?);
            }
        }
        let beta = self.beta.value();
        let lr = self.config.lr_at(self.iteration);
        let samples = self.draw_batch()?;
        let use_imu = self.model.imu.is_some();

        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);

        let mut targets = Vec::new();
        let mut stacked = Vec::new();
        let mut sources: Vec<[Var; 2]> = Vec::new();
        let mut windows = Vec::new();
        for s in &samples {
            let t = tape.constant(s.snippet.target.clone().into_dyn());
            let s0 = tape.constant(s.snippet.sources[0].clone().into_dyn());
            let s1 = tape.constant(s.snippet.sources[1].clone().into_dyn());
            let stack = ndarray::concatenate(
                Axis(0),
                &[
                    s.snippet.sources[0].view(),
                    s.snippet.target.view(),
                    s.snippet.sources[1].view(),
                ],
            )
            .expect("frames share a shape");
            stacked.push(tape.constant(stack.into_dyn()));
            targets.push(t);
            sources.push([s0, s1]);
            if use_imu {
                windows.push(ImuNet::split_window(&mut tape, &s.window.samples));
            }
        }

        let depths =
            self.model.forward_depth(&mut tape, &bind, &mut self.store, &targets, Mode::Train)?;
        let poses = self.model.forward_poses(
            &mut tape,
            &bind,
            &mut self.store,
            &stacked,
            &windows,
            Mode::Train,
            &mut self.rng,
        )?;

        let mut photo_terms = Vec::new();
        let mut warped_all = Vec::new();
        for (b, s) in samples.iter().enumerate() {
            let (h, w) = (s.k.height, s.k.width);
            let d2 = tape.reshape(depths[b], &[h, w]);
            let mut warped = Vec::new();
            let mut masks = Vec::new();
            for v in 0..2 {
                let pose = tape.slice_axis(poses[b], 0, 6 * v, 6);
                let warp = build_inverse_warp(&mut tape, sources[b][v], d2, pose, &s.k);
                warped.push(warp.warped);
                masks.push(warp.mask);
            }
            if !self.loss_config.use_validity_masks {
                for m in &mut masks {
                    m.fill(true);
                }
            }
            let p = photometric_loss(&mut tape, targets[b], &warped, &masks);
            photo_terms.push(p.loss);
            warped_all.extend(warped);
        }
        let mut l_g = photo_terms[0];
        for &t in &photo_terms[1..] {
            l_g = tape.add(l_g, t);
        }
        l_g = tape.scale(l_g, 1.0 / photo_terms.len() as f64);

        let cfg = LossConfig { beta, ..self.loss_config };
        let (gen_objective, l_d_gen_var, disc_loss_var) = if self.config.use_adversarial {
            let fakes =
                self.model.discriminate(&mut tape, &bind, &mut self.store, &warped_all, Mode::Train);
            let reals =
                self.model.discriminate(&mut tape, &bind, &mut self.store, &targets, Mode::Train);
            let adv = adversarial_losses(&mut tape, &reals, &fakes, cfg.patch_reduction);
            let total = total_loss(&mut tape, l_g, adv.gen, &cfg);

            // Detached copies cut the generator out of the discriminator's
            // own update graph.
            let detached: Vec<Var> = warped_all
                .iter()
                .map(|&wv| {
                    let v = tape.value(wv).clone();
                    tape.constant(v)
                })
                .collect();
            let det_fakes =
                self.model.discriminate(&mut tape, &bind, &mut self.store, &detached, Mode::Train);
            let det_adv = adversarial_losses(&mut tape, &reals, &det_fakes, cfg.patch_reduction);
            (total, Some(adv.gen), Some(det_adv.disc))
        } else {
            (l_g, None, None)
        };

        let report = LossReport {
            l_g: tape.value(l_g)[[]],
            l_d_gen: l_d_gen_var.map_or(0.0, |v| tape.value(v)[[]]),
            l_d_disc: disc_loss_var.map_or(0.0, |v| tape.value(v)[[]]),
            l_final: tape.value(gen_objective)[[]],
        };

        let update = if report.is_finite() {
            self.collect_updates(&tape, &bind, gen_objective, l_g, disc_loss_var)
        } else {
            None
        };

        match update {
            Some((mut gen_grads, mut disc_grads)) => {
                clip_global_norm(&mut gen_grads, self.config.grad_clip);
                clip_global_norm(&mut disc_grads, self.config.grad_clip);
                self.adam.t += 1;
                self.adam.apply(&mut self.store, &gen_grads, lr, &self.config);
                self.adam.apply(&mut self.store, &disc_grads, lr, &self.config);
                self.consecutive_skips = 0;
            }
            None => {
                self.consecutive_skips += 1;
                log::warn!(
                    "iteration {}: non-finite loss or gradients, step skipped ({} consecutive)",
                    self.iteration,
                    self.consecutive_skips
                );
                if self.consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
                    return Err(Error::invalid(format!(
                        "aborting: {} consecutive non-finite steps at iteration {}; \
                         last losses {:?}",
                        self.consecutive_skips, self.iteration, report
                    )));
                }
            }
        }

        if self.config.use_adversarial {
            if let BetaState::Warmup(hist) = &mut self.beta {
                hist.push((report.l_g, report.l_d_gen));
            }
        }
        if let Some(log) = &mut self.log {
            log.append(&LossRow {
                iteration: self.iteration,
                l_g: report.l_g,
                l_d_gen: report.l_d_gen,
                l_d_disc: report.l_d_disc,
                l_final: report.l_final,
                beta,
            })?;
        }
        self.iteration += 1;
        self.last_losses = Some(report);
        Ok(report)
    }

    /// Backward passes for both updates; None when any gradient is
    /// non-finite. Generator-side parameters never receive discriminator
    /// gradients and vice versa.
    #[allow(clippy::type_complexity)]
    fn collect_updates(
        &self,
        tape: &Tape<Real>,
        bind: &Binding,
        gen_objective: Var,
        l_g: Var,
        disc_loss: Option<Var>,
    ) -> Option<(Vec<(String, ArrayD<Real>)>, Vec<(String, ArrayD<Real>)>)> {
        let is_pose_param = |name: &str| {
            name.starts_with("vo.") || name.starts_with("imu.") || name.starts_with("fus.")
        };
        let mut gen_grads: Vec<(String, ArrayD<Real>)> = Vec::new();

        let mut total_grads = tape.backward(gen_objective);
        let pose_grads = if self.config.pose_on_total { None } else { Some(tape.backward(l_g)) };
        for (name, var) in bind.iter() {
            if name.starts_with("disc.") {
                continue;
            }
            let source = match (&pose_grads, is_pose_param(name)) {
                (Some(pg), true) => pg.get(var).cloned(),
                _ => total_grads.take(var),
            };
            if let Some(g) = source {
                if g.iter().any(|v| !v.is_finite()) {
                    return None;
                }
                gen_grads.push((name.to_string(), g));
            }
        }

        let mut disc_grads: Vec<(String, ArrayD<Real>)> = Vec::new();
        if let Some(dl) = disc_loss {
            let mut dg = tape.backward(dl);
            for (name, var) in bind.iter() {
                if !name.starts_with("disc.") {
                    continue;
                }
                if let Some(g) = dg.take(var) {
                    if g.iter().any(|v| !v.is_finite()) {
                        return None;
                    }
                    disc_grads.push((name.to_string(), g));
                }
            }
        }
        Some((gen_grads, disc_grads))
    }

    /// Mean reconstruction loss over the validation split, in inference
    /// mode. Deterministic; does not touch training RNG state.
    pub fn validate(&mut self) -> Result<f64> {
        if self.val_items.is_empty() {
            return Err(Error::invalid("validation split has no snippets"));
        }
        let items = self.val_items.clone();
        self.mean_photometric(&items)
    }

    fn mean_photometric(&mut self, items: &[(String, usize)]) -> Result<f64> {
        let use_imu = self.model.imu.is_some();
        let mut total = 0.0;
        let mut eval_rng = ChaCha12Rng::seed_from_u64(0);
        for chunk in items.chunks(self.config.batch_size.max(1)) {
            let mut tape = Tape::new();
            let bind = self.store.bind(&mut tape);
            let mut targets = Vec::new();
            let mut stacked = Vec::new();
            let mut sources: Vec<[Var; 2]> = Vec::new();
            let mut windows = Vec::new();
            let mut ks = Vec::new();
            for (seq, idx) in chunk {
                let (snippet, window) = self.load_item(seq, *idx)?;
                let k = self.dataset.meta(seq)?.intrinsics;
                let t = tape.constant(snippet.target.clone().into_dyn());
                let s0 = tape.constant(snippet.sources[0].clone().into_dyn());
                let s1 = tape.constant(snippet.sources[1].clone().into_dyn());
                let stack = ndarray::concatenate(
                    Axis(0),
                    &[snippet.sources[0].view(), snippet.target.view(), snippet.sources[1].view()],
                )
                .expect("frames share a shape");
                stacked.push(tape.constant(stack.into_dyn()));
                targets.push(t);
                sources.push([s0, s1]);
                ks.push(k);
                if use_imu {
                    windows.push(ImuNet::split_window(&mut tape, &window.samples));
                }
            }
            let depths =
                self.model.forward_depth(&mut tape, &bind, &mut self.store, &targets, Mode::Eval)?;
            let poses = self.model.forward_poses(
                &mut tape,
                &bind,
                &mut self.store,
                &stacked,
                &windows,
                Mode::Eval,
                &mut eval_rng,
            )?;
            for b in 0..chunk.len() {
                let (h, w) = (ks[b].height, ks[b].width);
                let d2 = tape.reshape(depths[b], &[h, w]);
                let mut warped = Vec::new();
                let mut masks = Vec::new();
                for v in 0..2 {
                    let pose = tape.slice_axis(poses[b], 0, 6 * v, 6);
                    let warp = build_inverse_warp(&mut tape, sources[b][v], d2, pose, &ks[b]);
                    warped.push(warp.warped);
                    masks.push(warp.mask);
                }
                let p = photometric_loss(&mut tape, targets[b], &warped, &masks);
                total += tape.value(p.loss)[[]];
            }
        }
        Ok(total / items.len() as f64)
    }

    /// Runs `n` iterations (or to `max_iterations`, whichever is first),
    /// validating on the configured interval when a validation split
    /// exists.
    pub fn run(&mut self, n: u64) -> Result<()> {
        let stop = self.iteration.saturating_add(n).min(self.config.max_iterations);
        while self.iteration < stop {
            self.step()?;
            if self.iteration % self.config.validation_interval == 0 && !self.val_items.is_empty() {
                let v = self.validate()?;
                log::info!("iteration {}: validation L_g {v:.6}", self.iteration);
                self.val_history.push((self.iteration, v));
            }
        }
        Ok(())
    }

    /// Writes parameters, optimizer moments, and loop state under `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<CheckpointMeta> {
        std::fs::create_dir_all(dir)?;
        save_params(&dir.join("model.ckpt"), &self.model.config, &self.store)?;
        let mut opt = ParamStore::<Real>::new();
        for (name, m) in &self.adam.m {
            opt.register_state(&format!("m:{name}"), m.clone());
        }
        for (name, v) in &self.adam.v {
            opt.register_state(&format!("v:{name}"), v.clone());
        }
        save_params(&dir.join("optim.ckpt"), &self.model.config, &opt)?;
        let pos = self.rng.get_word_pos();
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            iteration: self.iteration,
            adam_t: self.adam.t,
            beta: self.beta.clone(),
            config_hash: config_hash(&self.config, &self.model.config),
            rng_word_pos: ((pos >> 64) as u64, pos as u64),
            consecutive_skips: self.consecutive_skips,
            last_losses: self.last_losses,
        };
        let json = serde_json::to_string_pretty(&meta).expect("serializable meta");
        std::fs::write(dir.join("meta.json"), json)?;
        Ok(meta)
    }

    /// Restores a checkpointed run; the caller's train configuration must
    /// hash-match the one the checkpoint was written under.
    pub fn resume(
        dir: &Path,
        config: TrainConfig,
        dataset: Dataset,
        log_path: Option<&Path>,
    ) -> Result<Self> {
        config.validate()?;
        let meta_text = std::fs::read_to_string(dir.join("meta.json"))?;
        let meta: CheckpointMeta = serde_json::from_str(&meta_text)
            .map_err(|e| Error::Checkpoint(format!("meta.json: {e}")))?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {} unsupported (expected {CHECKPOINT_VERSION})",
                meta.version
            )));
        }
        let (net, store): (NetConfig, ParamStore<Real>) = load_params(&dir.join("model.ckpt"))?;
        let expect = config_hash(&config, &net);
        if meta.config_hash != expect {
            return Err(Error::Checkpoint(
                "configuration does not match the checkpointed run".into(),
            ));
        }
        let (_, opt_store): (NetConfig, ParamStore<Real>) = load_params(&dir.join("optim.ckpt"))?;

        let mut scratch = ParamStore::<Real>::new();
        let mut init_rng = ChaCha12Rng::seed_from_u64(config.seed);
        let model = VioModel::new(net, &mut scratch, &mut init_rng)?;
        for (name, _) in scratch.names() {
            if !store.contains(&name) {
                return Err(Error::Checkpoint(format!("parameter {name} missing")));
            }
        }

        let mut adam = Adam::new(&store);
        adam.t = meta.adam_t;
        for (name, m) in adam.m.iter_mut() {
            let key = format!("m:{name}");
            if !opt_store.contains(&key) {
                return Err(Error::Checkpoint(format!("optimizer state {key} missing")));
            }
            *m = opt_store.get(&key).clone();
        }
        for (name, v) in adam.v.iter_mut() {
            let key = format!("v:{name}");
            if !opt_store.contains(&key) {
                return Err(Error::Checkpoint(format!("optimizer state {key} missing")));
            }
            *v = opt_store.get(&key).clone();
        }

        let train_items = snippet_items(&dataset, &dataset.config().splits.train)?;
        if train_items.is_empty() {
            return Err(Error::invalid("training split has no snippets"));
        }
        let val_items = snippet_items(&dataset, &dataset.config().splits.val)?;
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        rng.set_word_pos(((meta.rng_word_pos.0 as u128) << 64) | meta.rng_word_pos.1 as u128);
        let log = match log_path {
            Some(p) => Some(LossLog::create(p)?),
            None => None,
        };
        Ok(Trainer {
            config,
            loss_config: LossConfig::default(),
            model,
            store,
            dataset,
            train_items,
            val_items,
            cache: HashMap::new(),
            adam,
            rng,
            iteration: meta.iteration,
            beta: meta.beta,
            consecutive_skips: meta.consecutive_skips,
            last_losses: meta.last_losses,
            log: None,
            val_history: Vec::new(),
        }
        .with_log(log))
    }
}

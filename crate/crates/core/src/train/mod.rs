//! Two-phase stochastic optimization of the ELBO.
//!
//! Phase 1 warm-starts the output layer (and likelihood) with everything
//! else frozen; phase 2 trains all parameters with the flow KL terms
//! annealed in. Minibatches and Monte Carlo noise are pure functions of the
//! seed and the global iteration, so a run resumed from a checkpoint
//! replays the uninterrupted one exactly.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::models::ElboBreakdown;
use crate::ndcore::{Tape, Tensor};
use crate::params::ParamGroup;
use crate::rng::{tag, NoiseStream};

mod adam;
pub mod checkpoint;
mod objective;

pub use adam::{clip_global_norm, AdamState};
pub use checkpoint::Checkpoint;
pub use objective::{DynamicsObjective, Objective, RegressionObjective};

/// Consecutive failed steps tolerated before training aborts.
pub const MAX_BAD_STEPS: usize = 10;

/// `min(1, iter / anneal_iters)`.
pub fn anneal_coefficient(iter: u64, anneal_iters: u64) -> f64 {
    if anneal_iters == 0 || iter >= anneal_iters {
        1.0
    } else {
        iter as f64 / anneal_iters as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub phase1_iters: usize,
    pub total_iters: usize,
    pub phase1_lr: f64,
    pub phase2_lr: f64,
    pub anneal_iters: usize,
    /// Minibatch size in data units; capped at the data set size.
    pub batch_size: usize,
    pub beta1: f64,
    /// Global gradient-norm clip, if any.
    pub clip_norm: Option<f64>,
    /// Train inducing inputs (either phase).
    pub train_inducing: bool,
    /// Train the flow's additive white noise.
    pub train_white_noise: bool,
    pub log_every: usize,
    /// Record wall-clock time in the metric log (makes it non-reproducible).
    pub record_wall_time: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            phase1_iters: 10_000,
            total_iters: 50_000,
            phase1_lr: 0.01,
            phase2_lr: 0.001,
            anneal_iters: 4000,
            batch_size: 2000,
            beta1: 0.9,
            clip_norm: None,
            train_inducing: true,
            train_white_noise: true,
            log_every: 100,
            record_wall_time: false,
        }
    }
}

impl Schedule {
    /// Defaults for latent dynamics: eased momentum, clipping, one window per step.
    pub fn dynamics() -> Self {
        Schedule {
            phase1_iters: 500,
            total_iters: 5000,
            phase1_lr: 0.01,
            phase2_lr: 0.01,
            batch_size: 1,
            beta1: 0.5,
            clip_norm: Some(100.0),
            ..Schedule::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phase1_iters > self.total_iters {
            return Err(Error::contract(format!(
                "phase1_iters ({}) exceeds total_iters ({})",
                self.phase1_iters, self.total_iters
            )));
        }
        if self.anneal_iters == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::contract("anneal_iters, batch_size and log_every must be positive"));
        }
        for (name, v) in [("phase1_lr", self.phase1_lr), ("phase2_lr", self.phase2_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::contract(format!("beta1 must lie in [0, 1), got {}", self.beta1)));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::contract("clip_norm must be positive"));
        }
        Ok(())
    }

    pub fn phase(&self, iteration: usize) -> u8 {
        if iteration < self.phase1_iters {
            1
        } else {
            2
        }
    }

    /// Anneal coefficient at a global iteration; the flow KLs are constant
    /// in every phase-1 parameter, so phase 1 runs with `c = 0`.
    pub fn coefficient(&self, iteration: usize) -> f64 {
        if iteration < self.phase1_iters {
            0.0
        } else {
            anneal_coefficient((iteration - self.phase1_iters) as u64, self.anneal_iters as u64)
        }
    }

    pub fn trainable(&self, iteration: usize, warm_start: &[ParamGroup], group: ParamGroup) -> bool {
        let allowed = match group {
            ParamGroup::OutputInducing | ParamGroup::FlowInducing => self.train_inducing,
            ParamGroup::WhiteNoise => self.train_white_noise,
            _ => true,
        };
        allowed && (iteration >= self.phase1_iters || warm_start.contains(&group))
    }
}

/// Units in the minibatch of a global iteration: each epoch is a seeded
/// permutation cut into consecutive batches (the last may be smaller).
pub fn minibatch(n: usize, batch_size: usize, iteration: usize, stream: &NoiseStream) -> Vec<usize> {
    let b = batch_size.min(n).max(1);
    let per_epoch = n.div_ceil(b);
    let (epoch, k) = (iteration / per_epoch, iteration % per_epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    if b < n {
        perm.shuffle(&mut stream.rng(&[tag::SHUFFLE, epoch as u64]));
    }
    perm[k * b..((k + 1) * b).min(n)].to_vec()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub elbo: ElboBreakdown,
    pub wall_ms: Option<f64>,
}

/// Writes the metric log as CSV, preceded by `# key=value` comment lines.
pub fn write_metrics(path: impl AsRef<Path>, rows: &[LogRow], comments: &[(&str, &str)]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in comments {
        out.push_str(&format!("# {k}={v}\n"));
    }
    out.push_str("iteration,elbo,expected_loglik,kl_g,kl_f,kl_sigma,wall_ms\n");
    for r in rows {
        let e = &r.elbo;
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{}\n",
            r.iteration,
            e.total,
            e.expected_loglik,
            e.kl_g,
            e.kl_f,
            e.kl_sigma,
            r.wall_ms.map_or("NA".to_string(), |w| format!("{w:.3}"))
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Optimizer progress that a checkpoint must carry to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Next global iteration to run.
    pub iteration: usize,
    pub adam: AdamState,
    /// Phase the optimizer moments belong to.
    pub phase: u8,
}

/// Where and what to checkpoint during `fit`.
#[derive(Debug, Clone, Default)]
pub struct CheckpointPlan {
    pub dir: Option<PathBuf>,
    /// Serialized configuration stored with every checkpoint.
    pub config: String,
    /// Extra arrays (e.g. preprocessing statistics) stored alongside the parameters.
    pub extra: Vec<(String, Tensor)>,
}

pub struct Trainer {
    pub schedule: Schedule,
    pub state: TrainState,
    stream: NoiseStream,
    batches: NoiseStream,
    pub log: Vec<LogRow>,
    /// Consecutive failed steps, carried across `run` calls.
    bad_steps: usize,
}

impl Trainer {
    pub fn new(objective: &dyn Objective, schedule: Schedule, seed: u64) -> Result<Self> {
        schedule.validate()?;
        let adam = AdamState::new(objective.params(), schedule.beta1);
        Ok(Trainer {
            schedule,
            state: TrainState {
                iteration: 0,
                adam,
                phase: 1,
            },
            stream: NoiseStream::new(seed).child(tag::ITERATION),
            batches: NoiseStream::new(seed).child(tag::BATCH),
            log: Vec::new(),
            bad_steps: 0,
        })
    }

    /// Runs global iterations up to (excluding) `until`.
    pub fn run(&mut self, objective: &mut dyn Objective, until: usize) -> Result<()> {
        let until = until.min(self.schedule.total_iters);
        let warm = objective.warm_start_groups();
        let n = objective.num_units();
        let start = Instant::now();
        while self.state.iteration < until {
            let it = self.state.iteration;
            let phase = self.schedule.phase(it);
            if phase != self.state.phase {
                // a fresh optimizer for the new phase
                self.state.adam = AdamState::new(objective.params(), self.schedule.beta1);
                self.state.phase = phase;
            }
            let lr = if phase == 1 {
                self.schedule.phase1_lr
            } else {
                self.schedule.phase2_lr
            };
            let c = self.schedule.coefficient(it);
            let iter_stream = self.stream.child(it as u64);
            let batch = minibatch(n, self.schedule.batch_size, it, &self.batches);
            let active = |g: ParamGroup| self.schedule.trainable(it, warm, g);

            let step = {
                let tape = Tape::new();
                let params = objective.params().bind(&tape, active);
                objective.elbo(&params, &batch, c, &iter_stream).and_then(|elbo| {
                    let breakdown = elbo.breakdown();
                    if !breakdown.total.is_finite() {
                        return Err(Error::Numerical(format!("non-finite ELBO {breakdown:?}")));
                    }
                    let grads = tape.backward(elbo.total.neg())?;
                    let mut grads = params.gradients(&grads);
                    if let Some((name, _)) = objective
                        .params()
                        .ids()
                        .map(|id| (objective.params().name(id), &grads[id.index()]))
                        .find(|(_, g)| !g.is_finite())
                    {
                        return Err(Error::Numerical(format!("non-finite gradient for `{name}`")));
                    }
                    if let Some(clip) = self.schedule.clip_norm {
                        clip_global_norm(&mut grads, clip);
                    }
                    Ok((breakdown, grads))
                })
            };
            match step {
                Ok((breakdown, grads)) => {
                    self.bad_steps = 0;
                    self.state.adam.step(objective.params_mut(), &grads, lr, active)?;
                    if it % self.schedule.log_every == 0 || it + 1 == self.schedule.total_iters {
                        info!(
                            "iter {it} phase {phase} elbo {:.4} ell {:.4} kl_g {:.4} kl_f {:.4} kl_sigma {:.4}",
                            breakdown.total,
                            breakdown.expected_loglik,
                            breakdown.kl_g,
                            breakdown.kl_f,
                            breakdown.kl_sigma
                        );
                        self.log.push(LogRow {
                            iteration: it,
                            elbo: breakdown,
                            wall_ms: self
                                .schedule
                                .record_wall_time
                                .then(|| start.elapsed().as_secs_f64() * 1e3),
                        });
                    }
                }
                Err(e) if e.is_numerical() => {
                    self.bad_steps += 1;
                    warn!("iteration {it}: skipped step ({e})");
                    if self.bad_steps >= MAX_BAD_STEPS {
                        return Err(Error::Training(format!(
                            "aborting after {} consecutive failed steps at iteration {it}; last error: {e}; {}",
                            self.bad_steps,
                            diagnostics(objective)
                        )));
                    }
                }
                Err(e) => return Err(e),
            }
            self.state.iteration += 1;
        }
        Ok(())
    }

    /// Parameters, optimizer moments and iteration as a checkpoint.
    pub fn checkpoint(&self, objective: &dyn Objective, plan: &CheckpointPlan) -> Checkpoint {
        let store = objective.params();
        let mut params: Vec<(String, Tensor)> =
            store.ids().map(|id| (store.name(id).to_string(), store.value(id).clone())).collect();
        params.extend(plan.extra.iter().cloned());
        let mut optimizer = Vec::new();
        for id in store.ids() {
            optimizer.push((format!("adam_m:{}", store.name(id)), self.state.adam.m[id.index()].clone()));
            optimizer.push((format!("adam_v:{}", store.name(id)), self.state.adam.v[id.index()].clone()));
        }
        optimizer.push(("state.iteration".into(), Tensor::scalar(self.state.iteration as f64)));
        optimizer.push(("state.adam_step".into(), Tensor::scalar(self.state.adam.step as f64)));
        optimizer.push(("state.phase".into(), Tensor::scalar(self.state.phase as f64)));
        optimizer.push(("state.beta1".into(), Tensor::scalar(self.state.adam.beta1)));
        Checkpoint {
            params,
            optimizer,
            config: plan.config.clone(),
        }
    }

    /// Restores parameters into `objective` and returns a trainer positioned
    /// where the checkpoint left off.
    pub fn resume(objective: &mut dyn Objective, ckpt: &Checkpoint, schedule: Schedule, seed: u64) -> Result<Self> {
        restore_params(objective, ckpt)?;
        let mut trainer = Trainer::new(objective, schedule, seed)?;
        let store = objective.params();
        let scalar = |name: &str| {
            ckpt.get(name)
                .map(|t| t.item())
                .ok_or_else(|| Error::Checkpoint(format!("missing `{name}`")))
        };
        for id in store.ids() {
            for (prefix, slot) in [("adam_m", &mut trainer.state.adam.m), ("adam_v", &mut trainer.state.adam.v)] {
                let name = format!("{prefix}:{}", store.name(id));
                let t = ckpt.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing `{name}`")))?;
                if t.shape() != store.value(id).shape() {
                    return Err(Error::Checkpoint(format!("`{name}` has the wrong shape")));
                }
                slot[id.index()] = t.clone();
            }
        }
        trainer.state.iteration = scalar("state.iteration")? as usize;
        trainer.state.adam.step = scalar("state.adam_step")? as u64;
        trainer.state.phase = scalar("state.phase")? as u8;
        trainer.state.adam.beta1 = scalar("state.beta1")?;
        Ok(trainer)
    }
}

/// Copies every parameter of `objective` from a checkpoint, by name.
pub fn restore_params(objective: &mut dyn Objective, ckpt: &Checkpoint) -> Result<()> {
    let store = objective.params_mut();
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let value = ckpt
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter `{name}`")))?;
        store
            .set(id, value.clone())
            .map_err(|_| Error::Checkpoint(format!("parameter `{name}` has the wrong shape")))?;
    }
    Ok(())
}

fn diagnostics(objective: &dyn Objective) -> String {
    let store = objective.params();
    let parts: Vec<String> = store
        .ids()
        .map(|id| {
            let v = store.value(id);
            format!(
                "{}: max|·| {:.3e}{}",
                store.name(id),
                v.max_abs(),
                if v.is_finite() { "" } else { " (non-finite)" }
            )
        })
        .collect();
    format!("parameters [{}]", parts.join(", "))
}

/// Trains `objective` under `schedule`, checkpointing at the phase boundary
/// and at completion when `plan.dir` is set.
pub fn fit(objective: &mut dyn Objective, schedule: &Schedule, seed: u64, plan: &CheckpointPlan) -> Result<Vec<LogRow>> {
    let mut trainer = Trainer::new(objective, schedule.clone(), seed)?;
    let boundary = schedule.phase1_iters;
    let result = (|| {
        if boundary > 0 && boundary < schedule.total_iters {
            trainer.run(objective, boundary)?;
            if let Some(dir) = &plan.dir {
                trainer.checkpoint(objective, plan).write(dir.join("phase1"))?;
            }
        }
        trainer.run(objective, schedule.total_iters)
    })();
    if let Err(e) = result {
        if let (Some(dir), Error::Training(_)) = (&plan.dir, &e) {
            if let Err(w) = trainer.checkpoint(objective, plan).write(dir.join("abort")) {
                warn!("could not write diagnostic checkpoint: {w}");
            }
        }
        return Err(e);
    }
    if let Some(dir) = &plan.dir {
        trainer.checkpoint(objective, plan).write(dir)?;
    }
    Ok(trainer.log)
}

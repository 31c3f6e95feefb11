//! Training loop: diffusion warm-up, then GradICON, with the final
//! refinement appended part-way.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::Config;
use super::dataset::Pair;
use super::model::Model;
use crate::error::{Error, Result};
use crate::losses::{training_objective, LossConfig, Regularizer};
use crate::ndgrad::{AdamState, GradGrid, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub warmup_steps: usize,
    /// Step at which the final refinement is appended.
    pub final_step: usize,
    pub total_steps: usize,
    pub lambda: f32,
    pub lr: f32,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self { warmup_steps: 50, final_step: 400, total_steps: 600, lambda: 1.5, lr: 1e-3, batch: 2, seed: 0 }
    }
}

impl TrainSchedule {
    /// Reads the `train.*` keys and `seed`.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = Self::default();
        let s = cfg.section("train");
        let out = Self {
            warmup_steps: s.get("warmup_steps", d.warmup_steps)?,
            final_step: s.get("final_step", d.final_step)?,
            total_steps: s.get("total_steps", d.total_steps)?,
            lambda: s.get("lambda", d.lambda)?,
            lr: s.get("lr", d.lr)?,
            batch: s.get("batch", d.batch)?,
            seed: cfg.get("seed", d.seed)?,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn to_config(&self) -> Config {
        let mut c = Config::default();
        c.set("train.warmup_steps", self.warmup_steps);
        c.set("train.final_step", self.final_step);
        c.set("train.total_steps", self.total_steps);
        c.set("train.lambda", self.lambda);
        c.set("train.lr", self.lr);
        c.set("train.batch", self.batch);
        c.set("seed", self.seed);
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.final_step {
            return Err(Error::Config("warm-up must end before the final refinement is appended".into()));
        }
        if self.batch == 0 || !(self.lr > 0.0) || !(self.lambda > 0.0) {
            return Err(Error::Config("batch, learning rate and lambda must be positive".into()));
        }
        Ok(())
    }

    fn loss_config(&self, step: usize) -> LossConfig {
        let regularizer = if step < self.warmup_steps { Regularizer::Diffusion } else { Regularizer::GradIcon };
        LossConfig { lambda: self.lambda, regularizer, ..LossConfig::default() }
    }
}

/// Batch means of the objective terms before the update at `step`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub sim_fwd: f32,
    pub sim_bwd: f32,
    pub reg: f32,
    pub total: f32,
}

pub const LOSS_CSV_HEADER: &str = "step,sim_fwd,sim_bwd,reg,total";

pub fn loss_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.step, r.sim_fwd, r.sim_bwd, r.reg, r.total);
    }
    s
}

/// Mean objective over `pairs` on one tape, with the batch means of its
/// terms.
pub fn batch_objective(tape: &Tape, model: &Model, pairs: &[&Pair], cfg: &LossConfig) -> Result<(GradGrid, [f32; 4])> {
    let alg = model.assemble();
    let mut acc: Option<GradGrid> = None;
    let mut terms = [0.0f32; 4];
    for p in pairs {
        let obj = training_objective(tape, alg.as_ref(), &p.moving, &p.fixed, cfg)?;
        for (t, g) in terms.iter_mut().zip([&obj.sim_fwd, &obj.sim_bwd, &obj.reg, &obj.total]) {
            *t += g.item() / pairs.len() as f32;
        }
        acc = Some(match acc {
            None => obj.total,
            Some(a) => tape.add(&a, &obj.total)?,
        });
    }
    let total = acc.ok_or_else(|| Error::Precondition("empty batch".into()))?;
    Ok((tape.scale(&total, 1.0 / pairs.len() as f32), terms))
}

/// Runs `schedule` on `pairs`, calling `on_step` with each logged row.
/// Non-finite objectives abort with [`Error::Divergence`].
pub fn train(
    model: &mut Model,
    pairs: &[Pair],
    schedule: &TrainSchedule,
    mut on_step: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    schedule.validate()?;
    if pairs.is_empty() && schedule.total_steps > 0 {
        return Err(Error::Precondition("no training pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut adam = AdamState::new(schedule.lr);
    let mut log = Vec::with_capacity(schedule.total_steps);
    for step in 0..schedule.total_steps {
        if step == schedule.final_step {
            model.append_final();
        }
        let batch: Vec<&Pair> = (0..schedule.batch).map(|_| &pairs[rng.random_range(0..pairs.len())]).collect();
        let tape = Tape::new();
        let (loss, [sim_fwd, sim_bwd, reg, total]) = batch_objective(&tape, model, &batch, &schedule.loss_config(step))?;
        if !total.is_finite() {
            return Err(Error::Divergence(format!(
                "objective is {total} at step {step} (sim_fwd {sim_fwd}, sim_bwd {sim_bwd}, reg {reg})"
            )));
        }
        let row = LogRow { step, sim_fwd, sim_bwd, reg, total };
        on_step(&row);
        log.push(row);
        let grads = tape.backward(&loss)?;
        adam.step(model.params_mut(), &grads)?;
    }
    Ok(log)
}

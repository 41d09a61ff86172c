//! Training loop: sample a step, corrupt targets, descend the
//! variational-bound loss with Adam, decay the learning rate per epoch,
//! checkpoint and log.
//!
//! Every stochastic choice is derived from (seed, epoch, global step), so a
//! trajectory is bit-reproducible and a run resumed from the f64 state file
//! continues exactly where it stopped.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, AdamState, TrainState};
use crate::corpus::{make_epoch, ParallelExample};
use crate::diffusion;
use crate::error::{Error, Result};
use crate::model::{self, DenoiserParams, ModelConfig, TrainItem};
use crate::rng::derive;
use crate::schedule::NoiseSchedule;
use crate::tokenizer::{Side, Vocabulary};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    /// per-epoch learning-rate multiplier
    pub gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// optional step budget; training stops once reached
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// global gradient-norm clip
    pub clip_norm: f64,
    /// downsample larger datasets to the smallest each epoch
    pub balance: bool,
}

impl TrainConfig {
    /// Desk-scale defaults (small batches; the seed is mandatory).
    pub fn desk(seed: u64) -> TrainConfig {
        TrainConfig {
            lr: 5e-4,
            gamma: 0.9,
            batch_size: 64,
            epochs: 10,
            max_steps: None,
            seed,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            balance: true,
        }
    }

    /// Reported full-scale settings: lr 5e-4, gamma 0.9, batch 512.
    pub fn paper(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 512,
            ..TrainConfig::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("train.lr must be > 0".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("train.gamma must lie in (0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One JSONL log line per training step.
#[derive(Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    pub t_mean: f64,
}

pub struct StepStats {
    pub loss: f64,
    pub t_mean: f64,
}

pub(crate) fn sample_t(rng: &mut impl Rng, t_steps: usize) -> usize {
    rng.random_range(1..=t_steps)
}

/// Encode and noise one batch of examples.
fn prepare_batch(
    batch: &[ParallelExample],
    vocab: &Vocabulary,
    l: usize,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Vec<TrainItem>> {
    let k = vocab.k();
    batch
        .iter()
        .map(|ex| {
            let x_src = vocab.encode(&ex.src_text, &ex.src_lang, &ex.tgt_lang, l, Side::Source)?;
            let y0 = vocab.encode(&ex.tgt_text, &ex.src_lang, &ex.tgt_lang, l, Side::Target)?;
            let t = sample_t(rng, sched.t_steps());
            let y_t = y0
                .iter()
                .map(|&tok| diffusion::sample_forward(tok, k, t, sched, rng))
                .collect::<Result<Vec<_>>>()?;
            Ok(TrainItem { y0, x_src, t, y_t })
        })
        .collect()
}

fn global_grad_norm(grads: &BTreeMap<String, Array2<f64>>) -> f64 {
    grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

fn adam_update(
    params: &mut DenoiserParams,
    opt: &mut AdamState,
    grads: &BTreeMap<String, Array2<f64>>,
    lr: f64,
    cfg: &TrainConfig,
) {
    opt.step += 1;
    let bias1 = 1.0 - cfg.adam_beta1.powi(opt.step as i32);
    let bias2 = 1.0 - cfg.adam_beta2.powi(opt.step as i32);
    for (name, grad) in grads {
        let m = opt.m.get_mut(name).expect("moment m");
        let v = opt.v.get_mut(name).expect("moment v");
        let theta = params.get_mut(name);
        ndarray::Zip::from(theta)
            .and(m)
            .and(v)
            .and(grad)
            .for_each(|theta, m, v, &g| {
                *m = cfg.adam_beta1 * *m + (1.0 - cfg.adam_beta1) * g;
                *v = cfg.adam_beta2 * *v + (1.0 - cfg.adam_beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *theta -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            });
    }
}

/// One optimization step over a batch: encode both sides, draw t uniformly
/// per example, corrupt the target per position, compute gradients, clip,
/// apply Adam at `state.lr`. Deterministic given the rng.
pub fn train_step(
    batch: &[ParallelExample],
    state: &mut TrainState,
    vocab: &Vocabulary,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::InvalidArg("empty training batch".into()));
    }
    let items = prepare_batch(batch, vocab, state.params.cfg.l, sched, rng)?;
    let ts: Vec<usize> = items.iter().map(|it| it.t).collect();
    let t_mean = ts.iter().sum::<usize>() as f64 / ts.len() as f64;

    let (loss, mut grads) =
        model::loss_and_gradients(&items, &state.params, sched).map_err(|e| match e {
            Error::Diverged(msg) => Error::Diverged(format!("{msg}; batch t values {ts:?}")),
            other => other,
        })?;
    let norm = global_grad_norm(&grads);
    if !norm.is_finite() {
        return Err(Error::Diverged(format!(
            "non-finite gradient norm at step {}; batch t values {ts:?}",
            state.global_step
        )));
    }
    if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
        let scale = cfg.clip_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    adam_update(&mut state.params, &mut state.opt, &grads, state.lr, cfg);
    if !state.params.is_finite() {
        return Err(Error::Diverged(format!(
            "non-finite parameters after step {}; batch t values {ts:?}, grad norm {norm}",
            state.global_step
        )));
    }
    Ok(StepStats { loss, t_mean })
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub state_path: PathBuf,
    pub log_path: PathBuf,
    pub steps_run: u64,
    pub last_loss: Option<f64>,
}

/// Epoch loop over [`make_epoch`] streams. The learning rate is
/// `lr * gamma^epoch`; a checkpoint and the f64 state file are written
/// after every epoch and at the end. With `resume`, continues from the
/// state file in `out_dir`.
pub fn train(
    model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
    vocab: &Vocabulary,
    sched: &NoiseSchedule,
    datasets: &[Vec<ParallelExample>],
    out_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    if model_cfg.k != vocab.k() {
        return Err(Error::Config(format!(
            "model K={} does not match vocabulary K={}",
            model_cfg.k,
            vocab.k()
        )));
    }
    if sched.t_steps() != model_cfg.t_steps {
        return Err(Error::Config(format!(
            "schedule T={} does not match model T={}",
            sched.t_steps(),
            model_cfg.t_steps
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let ckpt_path = out_dir.join("checkpoint.cdmt");
    let state_path = out_dir.join("trainstate.cdts");
    let log_path = out_dir.join("train_log.jsonl");
    vocab.save(&out_dir.join("vocab.txt"))?;

    let mut state = if resume && state_path.exists() {
        let state = checkpoint::load_train_state(&state_path)?;
        if state.params.cfg != model_cfg {
            return Err(Error::Checkpoint(
                "resume state does not match the requested model config".into(),
            ));
        }
        state
    } else {
        let params = DenoiserParams::init(model_cfg, train_cfg.seed)?;
        let opt = AdamState::zeros(&params);
        TrainState {
            params,
            opt,
            global_step: 0,
            epoch: 0,
            lr: train_cfg.lr,
        }
    };

    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;

    checkpoint::save(&state.params, &ckpt_path)?;
    checkpoint::save_train_state(&state, &state_path)?;

    let mut steps_run = 0u64;
    let mut last_loss = None;
    let budget_hit = |state: &TrainState| {
        train_cfg
            .max_steps
            .is_some_and(|max| state.global_step >= max)
    };
    while (state.epoch as usize) < train_cfg.epochs && !budget_hit(&state) {
        let epoch = state.epoch;
        state.lr = train_cfg.lr * train_cfg.gamma.powi(epoch as i32);
        let stream = make_epoch(datasets, train_cfg.balance, train_cfg.seed, epoch)?;
        for batch in stream.chunks(train_cfg.batch_size) {
            if budget_hit(&state) {
                break;
            }
            let mut rng = derive(train_cfg.seed, "train-step", state.global_step, 0);
            let stats = train_step(batch, &mut state, vocab, sched, train_cfg, &mut rng)?;
            state.global_step += 1;
            steps_run += 1;
            last_loss = Some(stats.loss);
            let record = LogRecord {
                step: state.global_step,
                epoch,
                loss: stats.loss,
                lr: state.lr,
                t_mean: stats.t_mean,
            };
            let line = serde_json::to_string(&record).expect("log record serializes");
            writeln!(log, "{line}").map_err(|e| Error::io(log_path.display().to_string(), e))?;
        }
        state.epoch += 1;
        checkpoint::save(&state.params, &ckpt_path)?;
        checkpoint::save_train_state(&state, &state_path)?;
    }

    checkpoint::save(&state.params, &ckpt_path)?;
    checkpoint::save_train_state(&state, &state_path)?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        state_path,
        log_path,
        steps_run,
        last_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;
    use crate::tokenizer::TokenMode;

    fn setup() -> (ModelConfig, Vocabulary, NoiseSchedule, Vec<ParallelExample>) {
        let vocab = Vocabulary::build(
            ["ab ba", "aa bb"],
            TokenMode::Char,
            16,
            &["X".to_string(), "Y".to_string()],
        )
        .unwrap();
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            k: vocab.k(),
            l: 6,
            t_steps: 8,
        };
        let sched = NoiseSchedule::build(ScheduleKind::Cosine, 8).unwrap();
        let data: Vec<ParallelExample> = (0..6)
            .map(|i| ParallelExample {
                src_text: if i % 2 == 0 { "ab" } else { "ba" }.into(),
                tgt_text: if i % 2 == 0 { "ab" } else { "ba" }.into(),
                src_lang: "X".into(),
                tgt_lang: "Y".into(),
            })
            .collect();
        (cfg, vocab, sched, data)
    }

    fn fresh_state(cfg: ModelConfig, seed: u64, lr: f64) -> TrainState {
        let params = DenoiserParams::init(cfg, seed).unwrap();
        let opt = AdamState::zeros(&params);
        TrainState {
            params,
            opt,
            global_step: 0,
            epoch: 0,
            lr,
        }
    }

    #[test]
    fn zero_lr_reports_loss_but_leaves_params_untouched() {
        let (cfg, vocab, sched, data) = setup();
        let tc = TrainConfig::desk(1);
        let mut state = fresh_state(cfg, 1, 0.0);
        let before = state.params.clone();
        let mut rng = derive(1, "train-step", 0, 0);
        let stats = train_step(&data[..2], &mut state, &vocab, &sched, &tc, &mut rng).unwrap();
        assert!(stats.loss.is_finite());
        for (name, tensor) in before.tensors() {
            assert_eq!(state.params.get(name), tensor, "{name}");
        }
    }

    #[test]
    fn step_is_deterministic_given_seed() {
        let (cfg, vocab, sched, data) = setup();
        let tc = TrainConfig::desk(1);
        let run = |seed: u64| {
            let mut state = fresh_state(cfg, 7, 5e-4);
            let mut rng = derive(seed, "train-step", 0, 0);
            train_step(&data[..3], &mut state, &vocab, &sched, &tc, &mut rng).unwrap();
            state
        };
        let a = run(9);
        let b = run(9);
        for (name, tensor) in a.params.tensors() {
            assert_eq!(b.params.get(name), tensor, "{name}");
        }
        let c = run(10);
        let any_diff = a
            .params
            .tensors()
            .any(|(name, tensor)| c.params.get(name) != tensor);
        assert!(any_diff, "different rng seeds should give different updates");
    }

    #[test]
    fn params_move_with_positive_lr() {
        let (cfg, vocab, sched, data) = setup();
        let tc = TrainConfig::desk(1);
        let mut state = fresh_state(cfg, 3, 5e-4);
        let before = state.params.clone();
        let mut rng = derive(3, "train-step", 0, 0);
        train_step(&data[..2], &mut state, &vocab, &sched, &tc, &mut rng).unwrap();
        let moved = before
            .tensors()
            .any(|(name, tensor)| state.params.get(name) != tensor);
        assert!(moved);
        assert_eq!(state.opt.step, 1);
    }

    #[test]
    fn epochs_zero_writes_initial_checkpoint_only() {
        let (cfg, vocab, sched, data) = setup();
        let mut tc = TrainConfig::desk(5);
        tc.epochs = 0;
        tc.batch_size = 2;
        let dir = tempfile::tempdir().unwrap();
        let out = train(cfg, &tc, &vocab, &sched, &[data], dir.path(), false).unwrap();
        assert_eq!(out.steps_run, 0);
        assert!(out.checkpoint.exists());
        assert!(out.state_path.exists());
        let log = std::fs::read_to_string(&out.log_path).unwrap();
        assert!(log.is_empty());
        let loaded = checkpoint::load(&out.checkpoint).unwrap();
        assert_eq!(loaded.cfg, cfg);
    }

    #[test]
    fn lr_decays_by_gamma_each_epoch() {
        let (cfg, vocab, sched, data) = setup();
        let mut tc = TrainConfig::desk(5);
        tc.epochs = 3;
        tc.batch_size = 6;
        tc.lr = 5e-4;
        tc.gamma = 0.9;
        let dir = tempfile::tempdir().unwrap();
        let out = train(cfg, &tc, &vocab, &sched, &[data], dir.path(), false).unwrap();
        let log = std::fs::read_to_string(&out.log_path).unwrap();
        let records: Vec<LogRecord> = log
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(records.len(), 3);
        let expect = [5e-4, 4.5e-4, 4.05e-4];
        for (rec, want) in records.iter().zip(expect) {
            assert!(
                (rec.lr - want).abs() < 1e-15,
                "epoch {}: lr {} vs {want}",
                rec.epoch,
                rec.lr
            );
        }
        assert!(records.iter().all(|r| r.loss.is_finite()));
        assert!(records.iter().all(|r| r.t_mean >= 1.0 && r.t_mean <= 8.0));
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run_exactly() {
        let (cfg, vocab, sched, data) = setup();
        let mut tc = TrainConfig::desk(11);
        tc.epochs = 2;
        tc.batch_size = 3;

        let full_dir = tempfile::tempdir().unwrap();
        train(
            cfg,
            &tc,
            &vocab,
            &sched,
            &[data.clone()],
            full_dir.path(),
            false,
        )
        .unwrap();
        let full = checkpoint::load_train_state(&full_dir.path().join("trainstate.cdts")).unwrap();

        let split_dir = tempfile::tempdir().unwrap();
        let mut first_half = tc.clone();
        first_half.epochs = 1;
        train(
            cfg,
            &first_half,
            &vocab,
            &sched,
            &[data.clone()],
            split_dir.path(),
            false,
        )
        .unwrap();
        let mid = checkpoint::load_train_state(&split_dir.path().join("trainstate.cdts")).unwrap();
        assert_eq!(mid.epoch, 1);
        train(cfg, &tc, &vocab, &sched, &[data], split_dir.path(), true).unwrap();
        let resumed =
            checkpoint::load_train_state(&split_dir.path().join("trainstate.cdts")).unwrap();

        assert_eq!(full.global_step, resumed.global_step);
        assert_eq!(full.epoch, resumed.epoch);
        assert_eq!(full.opt.step, resumed.opt.step);
        for (name, tensor) in full.params.tensors() {
            assert_eq!(resumed.params.get(name), tensor, "params {name}");
            assert_eq!(resumed.opt.m[name], full.opt.m[name], "m {name}");
            assert_eq!(resumed.opt.v[name], full.opt.v[name], "v {name}");
        }
    }

    #[test]
    fn sampled_t_is_uniform() {
        let mut rng = derive(13, "t-hist", 0, 0);
        let t_steps = 4;
        let n = 10_000;
        let mut hist = vec![0usize; t_steps + 1];
        for _ in 0..n {
            hist[sample_t(&mut rng, t_steps)] += 1;
        }
        assert_eq!(hist[0], 0);
        let expected = n as f64 / t_steps as f64;
        for t in 1..=t_steps {
            let dev = (hist[t] as f64 - expected).abs() / expected;
            assert!(dev < 0.05, "t={t}: {} vs {expected}", hist[t]);
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut tc = TrainConfig::desk(1);
        tc.lr = 0.0;
        assert!(tc.validate().is_err());
        let mut tc = TrainConfig::desk(1);
        tc.gamma = 1.5;
        assert!(tc.validate().is_err());
        let mut tc = TrainConfig::desk(1);
        tc.batch_size = 0;
        assert!(tc.validate().is_err());
    }

    #[test]
    fn max_steps_caps_training() {
        let (cfg, vocab, sched, data) = setup();
        let mut tc = TrainConfig::desk(5);
        tc.epochs = 10;
        tc.batch_size = 2;
        tc.max_steps = Some(4);
        let dir = tempfile::tempdir().unwrap();
        let out = train(cfg, &tc, &vocab, &sched, &[data], dir.path(), false).unwrap();
        assert_eq!(out.steps_run, 4);
    }
}

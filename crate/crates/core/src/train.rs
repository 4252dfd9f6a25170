//! Training orchestration: Adam, the epoch loop with checkpoint
//! selection, grid search over learning rate and lambda, and multi-seed
//! averaging.

use std::collections::VecDeque;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{build_vocab, CorpusRecord, PAD_ID};
use crate::encoder::ProfileSet;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, mean_report, MetricsReport};
use crate::model::{JpisModel, UtteranceInput};
use crate::params::ParameterStore;
use crate::tape::{backward, Tape};

/// Adam optimizer with bias correction. Moment buffers are laid out in
/// parameter-store iteration order and persist across steps.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update from the gradients currently in `store`. Rejected if no
    /// backward pass has populated them since the last zeroing.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        if !store.grads_ready {
            return Err(Error::invalid(
                "adam step without gradients; run backward first",
            ));
        }
        if self.m.is_empty() {
            for (_, p) in store.iter() {
                self.m.push(vec![0.0; p.value.numel()]);
                self.v.push(vec![0.0; p.value.numel()]);
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (pi, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[pi], &mut self.v[pi]);
            for ((x, &g), (mi, vi)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }

    #[cfg(test)]
    fn first_moment(&self, pi: usize) -> &[f64] {
        &self.m[pi]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based; 0 marks the evaluation of the freshly initialized model
    /// when training runs for zero epochs.
    pub epoch: usize,
    /// Mean of batch losses; absent for the zero-epoch evaluation entry.
    pub mean_loss: Option<f64>,
    pub valid: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingLog {
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_overall: f64,
}

pub struct TrainOutcome {
    /// Model restored to the best validation checkpoint.
    pub model: JpisModel,
    pub log: TrainingLog,
}

struct Example {
    ids: Vec<usize>,
    intent: usize,
    tags: Vec<usize>,
    profile: ProfileSet,
}

/// Train one model. The vocabulary is built from the training set alone;
/// the checkpoint returned is the epoch with the highest validation
/// overall accuracy, earliest epoch on ties. With zero epochs the
/// initialized model is evaluated once and returned as is.
pub fn train(
    config: &TrainConfig,
    train_set: &[CorpusRecord],
    valid_set: &[CorpusRecord],
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("train: empty training set"));
    }
    let (tokens, labels) = build_vocab(train_set)?;
    let mut model = JpisModel::new(
        config.model.clone(),
        config.ablation,
        tokens,
        labels,
        seed,
    )?;

    let examples: Vec<Example> = train_set
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let intent = model.labels.intent_id(&rec.intent).ok_or_else(|| {
                Error::invalid(format!(
                    "train record {i}: intent {:?} not in vocabulary",
                    rec.intent
                ))
            })?;
            let tags = model.labels.tag_ids(&rec.tags).ok_or_else(|| {
                Error::invalid(format!("train record {i}: tag outside vocabulary"))
            })?;
            Ok(Example {
                ids: model.tokens.ids(&rec.tokens),
                intent,
                tags,
                profile: rec.profile.clone(),
            })
        })
        .collect::<Result<_>>()?;

    let mut log = TrainingLog {
        seed,
        epochs: Vec::new(),
        best_epoch: 0,
        best_overall: f64::NEG_INFINITY,
    };

    if config.epochs == 0 {
        let valid = evaluate(&model, valid_set)?;
        log.best_overall = valid.overall_accuracy;
        log.epochs.push(EpochLog { epoch: 0, mean_loss: None, valid });
        return Ok(TrainOutcome { model, log });
    }

    let mut run_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut best_store: Option<ParameterStore> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut run_rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        // The store moves out of the model while batches run so backward
        // can borrow it mutably; it moves back for validation.
        let mut store = std::mem::replace(&mut model.store, ParameterStore::new());
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let result =
                train_one_batch(&model, &mut store, &mut adam, config, &examples, batch, run_rng.gen());
            match result {
                Ok(batch_loss) => {
                    loss_sum += batch_loss;
                    n_batches += 1;
                }
                Err(Error::Numerical(what)) => {
                    return Err(Error::Numerical(format!(
                        "{what} at epoch {epoch} batch {} (seed {seed})",
                        bi + 1
                    )));
                }
                Err(e) => return Err(e),
            }
        }
        model.store = store;

        let valid = evaluate(&model, valid_set)?;
        if valid.overall_accuracy > log.best_overall {
            log.best_overall = valid.overall_accuracy;
            log.best_epoch = epoch;
            best_store = Some(model.store.clone());
        }
        log.epochs.push(EpochLog {
            epoch,
            mean_loss: Some(loss_sum / n_batches as f64),
            valid,
        });
    }

    if let Some(store) = best_store {
        model.store = store;
    }
    Ok(TrainOutcome { model, log })
}

/// Forward, backward and one optimizer step over a mini-batch. The batch
/// loss is the mean of per-utterance joint losses; sequences are padded
/// to the batch maximum and masked. Returns the batch loss value.
fn train_one_batch(
    model: &JpisModel,
    store: &mut ParameterStore,
    adam: &mut Adam,
    config: &TrainConfig,
    examples: &[Example],
    batch: &[usize],
    dropout_seed: u64,
) -> Result<f64> {
    let mut tape = Tape::train(ChaCha8Rng::seed_from_u64(dropout_seed));
    let max_len = batch.iter().map(|&i| examples[i].ids.len()).max().unwrap();
    let mut terms = Vec::with_capacity(batch.len());
    let weight = 1.0 / batch.len() as f64;
    for &i in batch {
        let ex = &examples[i];
        let mut ids = ex.ids.clone();
        ids.resize(max_len, PAD_ID);
        let input = UtteranceInput { ids: &ids, n_real: ex.ids.len(), profile: &ex.profile };
        let loss = model.utterance_loss_in(
            store,
            &mut tape,
            &input,
            ex.intent,
            &ex.tags,
            config.lambda,
            config.intent_teacher_forcing,
        )?;
        terms.push((loss, weight));
    }
    let batch_loss = tape.weighted_sum(&terms)?;
    let value = tape.scalar_value(batch_loss);
    if !value.is_finite() {
        return Err(Error::Numerical("loss is not finite".to_string()));
    }
    backward(&tape, batch_loss, store)?;
    if store.any_grad_nonfinite() {
        return Err(Error::Numerical("gradient is not finite".to_string()));
    }
    if let Some(max_norm) = config.grad_clip {
        store.clip_global_norm(max_norm);
    }
    adam.step(store)?;
    if store.iter().any(|(_, p)| !p.value.all_finite()) {
        return Err(Error::Numerical("parameter is not finite".to_string()));
    }
    Ok(value)
}

/// One boxed unit of work for [`run_parallel`].
pub type Job<'a, T> = Box<dyn FnOnce() -> Result<T> + Send + 'a>;

/// Run independent jobs on a bounded pool of threads, returning results
/// in submission order. The first error wins; remaining queued jobs are
/// skipped once an error is recorded.
pub fn run_parallel<'a, T: Send>(jobs: Vec<Job<'a, T>>, max_threads: usize) -> Result<Vec<T>> {
    let n = jobs.len();
    let threads = max_threads.max(1).min(n.max(1));
    if threads <= 1 {
        return jobs.into_iter().map(|j| j()).collect();
    }
    let queue: Mutex<VecDeque<(usize, Job<'a, T>)>> =
        Mutex::new(jobs.into_iter().enumerate().collect());
    let results: Mutex<Vec<Option<Result<T>>>> =
        Mutex::new((0..n).map(|_| None).collect());
    let failed = Mutex::new(false);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let job = {
                    let mut q = queue.lock().unwrap();
                    if *failed.lock().unwrap() {
                        return;
                    }
                    q.pop_front()
                };
                let Some((idx, job)) = job else { return };
                let out = job();
                if out.is_err() {
                    *failed.lock().unwrap() = true;
                }
                results.lock().unwrap()[idx] = Some(out);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .flatten()
        .collect()
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridPoint {
    pub learning_rate: f64,
    pub lambda: f64,
    pub valid_overall: f64,
    pub best_epoch: usize,
}

pub struct GridSearchOutcome {
    pub best_learning_rate: f64,
    pub best_lambda: f64,
    pub best: TrainOutcome,
    /// One row per (learning rate, lambda) pair in grid order.
    pub table: Vec<GridPoint>,
}

/// Train one model per (learning rate, lambda) pair with one fixed seed
/// (the first configured one) and keep the pair with the best validation
/// overall accuracy. Ties go to the earlier pair in grid order.
pub fn grid_search(
    config: &TrainConfig,
    train_set: &[CorpusRecord],
    valid_set: &[CorpusRecord],
) -> Result<GridSearchOutcome> {
    config.validate()?;
    let seed = config.seeds[0];
    let pairs: Vec<(f64, f64)> = config
        .lr_grid
        .iter()
        .flat_map(|&lr| config.lambda_grid.iter().map(move |&l| (lr, l)))
        .collect();
    let jobs: Vec<Job<TrainOutcome>> = pairs
        .iter()
        .map(|&(lr, lambda)| {
            let mut cfg = config.clone();
            cfg.learning_rate = lr;
            cfg.lambda = lambda;
            let job: Job<TrainOutcome> =
                Box::new(move || train(&cfg, train_set, valid_set, seed));
            job
        })
        .collect();
    let outcomes = run_parallel(jobs, default_threads())?;

    let mut table = Vec::with_capacity(pairs.len());
    let mut best: Option<(usize, f64)> = None;
    for (i, ((lr, lambda), outcome)) in pairs.iter().zip(&outcomes).enumerate() {
        table.push(GridPoint {
            learning_rate: *lr,
            lambda: *lambda,
            valid_overall: outcome.log.best_overall,
            best_epoch: outcome.log.best_epoch,
        });
        if best.is_none_or(|(_, acc)| outcome.log.best_overall > acc) {
            best = Some((i, outcome.log.best_overall));
        }
    }
    let (best_idx, _) = best.expect("nonempty grids");
    let (best_learning_rate, best_lambda) = pairs[best_idx];
    let mut outcomes = outcomes;
    let best = outcomes.swap_remove(best_idx);
    Ok(GridSearchOutcome { best_learning_rate, best_lambda, best, table })
}

/// Train and test once per configured seed, in parallel, and average the
/// test metrics arithmetically. The report lists per-seed metrics in
/// configuration order.
pub fn multi_seed(
    config: &TrainConfig,
    train_set: &[CorpusRecord],
    valid_set: &[CorpusRecord],
    test_set: &[CorpusRecord],
) -> Result<(MetricsReport, Vec<TrainingLog>)> {
    config.validate()?;
    let jobs: Vec<Job<(MetricsReport, TrainingLog)>> = config
        .seeds
        .iter()
        .map(|&seed| {
            let cfg = config.clone();
            let job: Job<(MetricsReport, TrainingLog)> = Box::new(move || {
                let outcome = train(&cfg, train_set, valid_set, seed)?;
                let test = evaluate(&outcome.model, test_set)?;
                Ok((test, outcome.log))
            });
            job
        })
        .collect();
    let runs = run_parallel(jobs, default_threads())?;
    let mut logs = Vec::with_capacity(runs.len());
    let mut per_seed = Vec::with_capacity(runs.len());
    for (seed, (test, log)) in config.seeds.iter().zip(runs) {
        per_seed.push((*seed, test));
        logs.push(log);
    }
    Ok((mean_report(per_seed)?, logs))
}

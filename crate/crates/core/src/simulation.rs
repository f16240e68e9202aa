//! Synthetic federated tasks, heterogeneous client shards, the round loop
//! binding clients, attacks and aggregators together, and ground-truth
//! filter metrics.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    attack_adaptive, attack_gaussian, attack_lie, attack_min_max, attack_scale, attack_sign_flip,
    estimate_epsilon, schedule_poisoning, AdaptiveParams,
};
use crate::baselines::{agg_fltrust, agg_krum, agg_mean, agg_median, agg_trimmed_mean};
use crate::config::{AggregatorKind, AttackKind, ExperimentConfig, TaskKind};
use crate::error::Result;
use crate::generator::GeneratorModel;
use crate::pipeline::{apply_global_update, run_round_with, PseudoSource, RoundRecord};
use crate::projection::GradientMatrix;
use crate::seeding::{derive_rng, tag};

/// Local data of one client (or of the server's root shard).
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub inputs: Array2<f64>,
    pub targets: Array1<f64>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Trust status of a client within the simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Benign,
    KnownBenign,
    Malicious,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub role: Role,
    pub shard: Shard,
}

/// The task whose gradients the federation exchanges.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub dim: usize,
    pub true_weights: Array1<f64>,
    pub noise_std: f64,
    pub heterogeneity: f64,
}

/// A fully materialized federation.
#[derive(Debug, Clone)]
pub struct Federation {
    pub task: SyntheticTask,
    pub clients: Vec<ClientState>,
    pub known_benign: BTreeSet<usize>,
    pub malicious: BTreeSet<usize>,
    /// Pooled evaluation data, never sharded to clients.
    pub heldout: Shard,
    /// Clean root shard backing the trust-score aggregator.
    pub server_shard: Shard,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn sample_shard(
    task: &SyntheticTask,
    shift: &Array1<f64>,
    count: usize,
    rng: &mut impl Rng,
) -> Shard {
    let d = task.dim;
    let mut inputs = Array2::zeros((count, d));
    let mut targets = Array1::zeros(count);
    for i in 0..count {
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            inputs[[i, j]] = shift[j] + z;
        }
        let logit = inputs.row(i).dot(&task.true_weights);
        match task.kind {
            TaskKind::Logistic => {
                let noise: f64 = rng.sample(StandardNormal);
                let p = sigmoid(logit + task.noise_std * noise);
                targets[i] = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
            }
            TaskKind::Linear => {
                let noise: f64 = rng.sample(StandardNormal);
                targets[i] = logit + task.noise_std * noise;
            }
        }
    }
    Shard { inputs, targets }
}

/// Build clients, shards, the held-out pool and the server root shard.
/// Known-benign ids are drawn first, malicious ids uniformly from the
/// rest.
pub fn make_federation(cfg: &ExperimentConfig, rng: &mut impl Rng) -> Result<Federation> {
    cfg.validate()?;
    let n = cfg.clients;
    let d = cfg.dim;

    let mut direction = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
    let norm = direction.dot(&direction).sqrt();
    direction /= norm;
    let task = SyntheticTask {
        kind: cfg.task,
        dim: d,
        true_weights: direction * 4.0,
        noise_std: cfg.noise_std,
        heterogeneity: cfg.heterogeneity,
    };

    let known: BTreeSet<usize> = sample(rng, n, cfg.known_benign).into_iter().collect();
    let pool: Vec<usize> = (0..n).filter(|i| !known.contains(i)).collect();
    let malicious: BTreeSet<usize> = sample(rng, pool.len(), cfg.malicious_count())
        .into_iter()
        .map(|i| pool[i])
        .collect();

    let heldout_per_client = (cfg.samples_per_client / 5).max(1);
    let local = cfg.samples_per_client - heldout_per_client.min(cfg.samples_per_client - 1);

    let mut clients = Vec::with_capacity(n);
    let mut heldout_inputs: Vec<Array2<f64>> = Vec::new();
    let mut heldout_targets: Vec<Array1<f64>> = Vec::new();
    for id in 0..n {
        let mut shift = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
        let s_norm = shift.dot(&shift).sqrt();
        if s_norm > 0.0 {
            shift *= cfg.heterogeneity / s_norm;
        }
        let shard = sample_shard(&task, &shift, local, rng);
        let held = sample_shard(&task, &shift, heldout_per_client, rng);
        heldout_inputs.push(held.inputs);
        heldout_targets.push(held.targets);
        let role = if known.contains(&id) {
            Role::KnownBenign
        } else if malicious.contains(&id) {
            Role::Malicious
        } else {
            Role::Benign
        };
        clients.push(ClientState { id, role, shard });
    }

    let total_held: usize = heldout_inputs.iter().map(|a| a.nrows()).sum();
    let mut inputs = Array2::zeros((total_held, d));
    let mut targets = Array1::zeros(total_held);
    let mut row = 0;
    for (xs, ys) in heldout_inputs.iter().zip(&heldout_targets) {
        for i in 0..xs.nrows() {
            inputs.row_mut(row).assign(&xs.row(i));
            targets[row] = ys[i];
            row += 1;
        }
    }
    let heldout = Shard { inputs, targets };

    let zero_shift = Array1::zeros(d);
    let server_shard = sample_shard(&task, &zero_shift, cfg.samples_per_client, rng);

    Ok(Federation {
        task,
        clients,
        known_benign: known,
        malicious,
        heldout,
        server_shard,
    })
}

/// Exact mini-batch gradient of the task loss at `weights`.
pub fn local_gradient(
    shard: &Shard,
    kind: TaskKind,
    weights: &Array1<f64>,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Array1<f64> {
    let d = weights.len();
    if shard.is_empty() || batch_size == 0 {
        return Array1::zeros(d);
    }
    let take = batch_size.min(shard.len());
    let batch = sample(rng, shard.len(), take);
    let mut grad = Array1::<f64>::zeros(d);
    for i in batch {
        let x = shard.inputs.row(i);
        let residual = match kind {
            TaskKind::Logistic => sigmoid(x.dot(weights)) - shard.targets[i],
            TaskKind::Linear => x.dot(weights) - shard.targets[i],
        };
        grad = grad + x.to_owned() * residual;
    }
    grad / take as f64
}

/// Held-out evaluation: (score, loss). The score is classification
/// accuracy for logistic tasks and the coefficient of determination for
/// linear ones.
pub fn evaluate(task: &SyntheticTask, weights: &Array1<f64>, shard: &Shard) -> (f64, f64) {
    let n = shard.len().max(1) as f64;
    match task.kind {
        TaskKind::Logistic => {
            let mut correct = 0usize;
            let mut loss = 0.0;
            for i in 0..shard.len() {
                let p = sigmoid(shard.inputs.row(i).dot(weights));
                let y = shard.targets[i];
                if (p >= 0.5) == (y >= 0.5) {
                    correct += 1;
                }
                let pc = p.clamp(1e-12, 1.0 - 1e-12);
                loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
            }
            (correct as f64 / n, loss / n)
        }
        TaskKind::Linear => {
            let mut ss_res = 0.0;
            let mut mean_y = 0.0;
            for i in 0..shard.len() {
                mean_y += shard.targets[i];
            }
            mean_y /= n;
            let mut ss_tot = 0.0;
            for i in 0..shard.len() {
                let pred = shard.inputs.row(i).dot(weights);
                ss_res += (pred - shard.targets[i]).powi(2);
                ss_tot += (shard.targets[i] - mean_y).powi(2);
            }
            let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 };
            (r2, ss_res / n)
        }
    }
}

/// Precision/recall of the final benign selection against the round's
/// ground-truth poisoner set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterMetrics {
    pub precision: f64,
    pub recall: f64,
    /// Set when the selection was empty and precision defaulted to 1.
    pub empty_selection: bool,
}

pub fn filter_metrics(
    record: &RoundRecord,
    poisoners: &BTreeSet<usize>,
    n_clients: usize,
) -> FilterMetrics {
    let benign_truth: BTreeSet<usize> =
        (0..n_clients).filter(|i| !poisoners.contains(i)).collect();
    let selected = &record.final_benign;
    let hit = selected.intersection(&benign_truth).count();
    let (precision, empty) = if selected.is_empty() {
        (1.0, true)
    } else {
        (hit as f64 / selected.len() as f64, false)
    };
    let recall = if benign_truth.is_empty() {
        1.0
    } else {
        hit as f64 / benign_truth.len() as f64
    };
    FilterMetrics {
        precision,
        recall,
        empty_selection: empty,
    }
}

/// One round of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub round: usize,
    pub score: f64,
    pub loss: f64,
    /// Clients that actually poisoned this round.
    pub poisoners: BTreeSet<usize>,
    /// Aggregation-rule audit trail (aggregation-rule runs only).
    pub record: Option<RoundRecord>,
}

/// Everything a finished experiment produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub rounds: Vec<RoundOutcome>,
    pub final_score: f64,
    pub final_loss: f64,
    pub mean_precision: Option<f64>,
    pub mean_recall: Option<f64>,
    pub fallback_rounds: usize,
}

impl ExperimentResult {
    /// Fraction of attacked rounds in which no poisoner survived into the
    /// final selection.
    pub fn malicious_exclusion_rate(&self) -> Option<f64> {
        let attacked: Vec<_> = self
            .rounds
            .iter()
            .filter(|r| !r.poisoners.is_empty() && r.record.is_some())
            .collect();
        if attacked.is_empty() {
            return None;
        }
        let clean = attacked
            .iter()
            .filter(|r| {
                let rec = r.record.as_ref().expect("filtered on record");
                rec.final_benign.iter().all(|i| !r.poisoners.contains(i))
            })
            .count();
        Some(clean as f64 / attacked.len() as f64)
    }
}

fn craft_submissions(
    cfg: &ExperimentConfig,
    fed: &Federation,
    truthful: &[Array1<f64>],
    poisoners: &BTreeSet<usize>,
    round: usize,
) -> Result<Vec<Array1<f64>>> {
    let mut submitted = truthful.to_vec();
    if poisoners.is_empty() || cfg.attack == AttackKind::None {
        return Ok(submitted);
    }

    // Everything uploaded truthfully this round is visible to attackers.
    let visible_ids: Vec<usize> = (0..cfg.clients).filter(|i| !poisoners.contains(i)).collect();
    let visible_rows: Vec<Array1<f64>> =
        visible_ids.iter().map(|&i| truthful[i].clone()).collect();
    let mut visible_data = Array2::zeros((visible_rows.len(), cfg.dim));
    for (r, row) in visible_rows.iter().enumerate() {
        visible_data.row_mut(r).assign(row);
    }
    let visible = GradientMatrix::new(
        visible_data.clone(),
        visible_ids.iter().map(|&i| i as u64).collect(),
    )?;
    let known_positions: BTreeSet<usize> = visible_ids
        .iter()
        .enumerate()
        .filter(|(_, id)| fed.known_benign.contains(id))
        .map(|(pos, _)| pos)
        .collect();

    let epsilon_est =
        estimate_epsilon(&visible, &known_positions, cfg.r).unwrap_or(0.0);

    let mut attack_rng = derive_rng(cfg.seed, &[tag::ATTACK, round as u64]);
    let shared: Option<Array1<f64>> = if cfg.collusion {
        Some(craft_one(
            cfg,
            &visible_data,
            &visible,
            &known_positions,
            poisoners.len(),
            // Collusion shares the crafting intelligence; own gradient is
            // the mean of what the cartel can see.
            &agg_mean(&visible),
            &mut attack_rng,
        )?)
    } else {
        None
    };

    for &p in poisoners {
        let crafted = match &shared {
            Some(base) => {
                let mut jitter =
                    Array1::from_shape_fn(cfg.dim, |_| attack_rng.sample::<f64, _>(StandardNormal));
                let jn = jitter.dot(&jitter).sqrt();
                if jn > 0.0 {
                    jitter *= 1e-3 * epsilon_est.max(1e-9) / jn;
                }
                base + &jitter
            }
            None => craft_one(
                cfg,
                &visible_data,
                &visible,
                &known_positions,
                1,
                &truthful[p],
                &mut attack_rng,
            )?,
        };
        submitted[p] = crafted;
    }
    Ok(submitted)
}

#[allow(clippy::too_many_arguments)]
fn craft_one(
    cfg: &ExperimentConfig,
    visible_data: &Array2<f64>,
    visible: &GradientMatrix,
    known_positions: &BTreeSet<usize>,
    n_poisoners: usize,
    own: &Array1<f64>,
    rng: &mut impl Rng,
) -> Result<Array1<f64>> {
    match cfg.attack {
        AttackKind::None => Ok(own.clone()),
        AttackKind::SignFlip => Ok(attack_sign_flip(own, cfg.attack_scale)),
        AttackKind::Scale => Ok(attack_scale(own, cfg.attack_scale)),
        AttackKind::Gaussian => attack_gaussian(visible_data, cfg.attack_std_scale, rng),
        AttackKind::Lie => attack_lie(visible_data, cfg.attack_z),
        AttackKind::MinMax => {
            let mu = agg_mean(visible);
            let norm = mu.dot(&mu).sqrt();
            let direction = if norm > 0.0 {
                mu / -norm
            } else {
                let mut d = Array1::zeros(cfg.dim);
                d[0] = -1.0;
                d
            };
            attack_min_max(visible_data, &direction, cfg.minmax_iters)
        }
        AttackKind::Adaptive => {
            let params = AdaptiveParams {
                inplane_scale: cfg.adaptive_inplane_scale,
                ortho_scale: cfg.adaptive_ortho_scale,
                max_halvings: cfg.adaptive_max_halvings,
            };
            Ok(attack_adaptive(
                visible,
                known_positions,
                n_poisoners,
                &params,
                cfg.r,
                cfg.gamma,
                cfg.min_samples,
                rng,
            )?
            .gradient)
        }
    }
}

/// Run one experiment end to end. The result is a pure function of the
/// config, including its seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let mut fed_rng = derive_rng(cfg.seed, &[tag::FEDERATION]);
    let fed = make_federation(cfg, &mut fed_rng)?;

    let mut sched_rng = derive_rng(cfg.seed, &[tag::SCHEDULE]);
    let schedule = schedule_poisoning(
        cfg.clients,
        &fed.malicious,
        cfg.malicious_ratio,
        cfg.rounds,
        &mut sched_rng,
    )?;

    let mut gen_rng = derive_rng(cfg.seed, &[tag::GENERATOR_INIT]);
    let mut generator = GeneratorModel::new(cfg.gen_noise_dim, cfg.gen_hidden_dim, &mut gen_rng)?;

    let params = cfg.encagg_params();
    let mut weights = Array1::<f64>::zeros(cfg.dim);
    let mut rounds_out: Vec<RoundOutcome> = Vec::with_capacity(cfg.rounds);
    let mut precision_sum = 0.0;
    let mut recall_sum = 0.0;
    let mut metric_rounds = 0usize;
    let mut fallback_rounds = 0usize;

    for t in 0..cfg.rounds {
        let truthful: Vec<Array1<f64>> = fed
            .clients
            .iter()
            .map(|c| {
                let mut rng = derive_rng(cfg.seed, &[tag::BATCH, t as u64, c.id as u64]);
                local_gradient(&c.shard, cfg.task, &weights, cfg.batch_size, &mut rng)
            })
            .collect();

        let poisoners = if cfg.attack == AttackKind::None {
            BTreeSet::new()
        } else {
            schedule.poisoners(t).clone()
        };
        let submitted = craft_submissions(cfg, &fed, &truthful, &poisoners, t)?;

        let mut data = Array2::zeros((cfg.clients, cfg.dim));
        for (i, row) in submitted.iter().enumerate() {
            data.row_mut(i).assign(row);
        }
        let grads = GradientMatrix::new(data, (0..cfg.clients as u64).collect())?;

        let (aggregated, record) = match cfg.aggregator {
            AggregatorKind::Mean => (agg_mean(&grads), None),
            AggregatorKind::Median => (agg_median(&grads), None),
            AggregatorKind::Krum => {
                let f = cfg.krum_f.unwrap_or_else(|| cfg.malicious_count());
                (agg_krum(&grads, f)?, None)
            }
            AggregatorKind::TrimmedMean => (agg_trimmed_mean(&grads, cfg.trim_fraction)?, None),
            AggregatorKind::Fltrust => {
                let mut rng = derive_rng(cfg.seed, &[tag::SERVER_SHARD, t as u64]);
                let server_gradient = local_gradient(
                    &fed.server_shard,
                    cfg.task,
                    &weights,
                    cfg.batch_size,
                    &mut rng,
                );
                let norm = server_gradient.dot(&server_gradient).sqrt();
                if norm > 0.0 {
                    (agg_fltrust(&grads, &server_gradient)?, None)
                } else {
                    (server_gradient, None)
                }
            }
            AggregatorKind::Encagg => {
                let source = if cfg.generator_enabled {
                    PseudoSource::Generator(&mut generator)
                } else {
                    PseudoSource::Disabled
                };
                let round_seed = derive_round_seed(cfg.seed, t);
                let (agg, mut rec) =
                    run_round_with(&grads, &fed.known_benign, &params, source, round_seed)?;
                rec.round_index = t;
                let metrics = filter_metrics(&rec, &poisoners, cfg.clients);
                rec.filter_precision = Some(metrics.precision);
                rec.filter_recall = Some(metrics.recall);
                precision_sum += metrics.precision;
                recall_sum += metrics.recall;
                metric_rounds += 1;
                if rec.fallback_used {
                    fallback_rounds += 1;
                }
                (agg, Some(rec))
            }
        };

        weights = apply_global_update(&weights, &aggregated, cfg.learning_rate)?;
        let (score, loss) = evaluate(&fed.task, &weights, &fed.heldout);
        rounds_out.push(RoundOutcome {
            round: t,
            score,
            loss,
            poisoners,
            record,
        });
    }

    let last = rounds_out.last().expect("rounds >= 1");
    Ok(ExperimentResult {
        final_score: last.score,
        final_loss: last.loss,
        mean_precision: (metric_rounds > 0).then(|| precision_sum / metric_rounds as f64),
        mean_recall: (metric_rounds > 0).then(|| recall_sum / metric_rounds as f64),
        fallback_rounds,
        rounds: rounds_out,
    })
}

fn derive_round_seed(seed: u64, round: usize) -> u64 {
    seed ^ (round as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Centralized reference: plain gradient descent on the pooled client
/// data, evaluated on the same held-out set. Oracle for fidelity checks.
pub fn centralized_reference(cfg: &ExperimentConfig) -> Result<(f64, f64)> {
    cfg.validate()?;
    let mut fed_rng = derive_rng(cfg.seed, &[tag::FEDERATION]);
    let fed = make_federation(cfg, &mut fed_rng)?;
    let total: usize = fed.clients.iter().map(|c| c.shard.len()).sum();
    let mut inputs = Array2::zeros((total, cfg.dim));
    let mut targets = Array1::zeros(total);
    let mut row = 0;
    for c in &fed.clients {
        for i in 0..c.shard.len() {
            inputs.row_mut(row).assign(&c.shard.inputs.row(i));
            targets[row] = c.shard.targets[i];
            row += 1;
        }
    }
    let pooled = Shard { inputs, targets };
    let mut weights = Array1::<f64>::zeros(cfg.dim);
    for t in 0..cfg.rounds {
        let mut rng = derive_rng(cfg.seed, &[tag::BATCH, t as u64, u64::MAX]);
        let grad = local_gradient(
            &pooled,
            cfg.task,
            &weights,
            cfg.batch_size * cfg.clients,
            &mut rng,
        );
        weights = apply_global_update(&weights, &grad, cfg.learning_rate)?;
    }
    Ok(evaluate(&fed.task, &weights, &fed.heldout))
}

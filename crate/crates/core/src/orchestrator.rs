//! The experiment loop: per round, harvest energy, pick the scheduled set
//! under the configured policy, run local training on each scheduled user,
//! superimpose the packed updates over the channel, estimate the aggregate,
//! apply it to the global model, drain batteries, and record metrics.

use crate::analysis::compute_epsilon;
use crate::channel::{
    draw_channel, estimate_aggregate, transmit_and_combine, ChannelRealization,
};
use crate::config::{ExperimentConfig, PolicyConfig};
use crate::data::{label_distribution, load_idx, synth_dataset, LabelDistribution};
use crate::energy::{consume, feasible_users, harvest, EnergyState};
use crate::error::{Error, Result};
use crate::metrics::{MetricsRecord, MetricsRow, Phase};
use crate::model::{
    compute_update, pack_complex, ComplexUpdate, LocalDataset, ModelSpec, ModelVector,
    TrainingConfig,
};
use crate::par::map_indexed;
use crate::rng::{stream, subseed};
use crate::scheduling::{
    cluster_users, estimate_representations, schedule_all, schedule_clustered, schedule_entropy,
    Clustering, ParticipationRecord,
};

/// The experiment's data after loading and partitioning.
pub struct PreparedData {
    pub users: Vec<LocalDataset>,
    pub test: LocalDataset,
    /// Per-user label distributions.
    pub labels: Vec<LabelDistribution>,
    /// Per-user sample counts, as entropy-mixture weights.
    pub weights: Vec<f64>,
    pub num_classes: usize,
    pub spec: ModelSpec,
}

/// Loads the configured dataset, splits off the test set, and partitions the
/// training corpus across users.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    use crate::config::DatasetConfig;
    let (train, test, num_classes) = match &cfg.dataset {
        DatasetConfig::Synthetic { num_classes, num_features, train_per_class, test_per_class } => {
            let per_class = train_per_class + test_per_class;
            let corpus =
                synth_dataset(*num_classes, *num_features, per_class, subseed(cfg.seed, &[stream::DATA]));
            let mut train_idx = Vec::with_capacity(num_classes * train_per_class);
            let mut test_idx = Vec::with_capacity(num_classes * test_per_class);
            for c in 0..*num_classes {
                let base = c * per_class;
                train_idx.extend(base..base + train_per_class);
                test_idx.extend(base + train_per_class..base + per_class);
            }
            (corpus.subset(&train_idx), corpus.subset(&test_idx), *num_classes)
        }
        DatasetConfig::Mnist { train_images, train_labels, test_images, test_labels }
        | DatasetConfig::Fmnist { train_images, train_labels, test_images, test_labels } => {
            let train = load_idx(train_images, train_labels)?;
            let test = load_idx(test_images, test_labels)?;
            if test.num_features() != train.num_features() {
                return Err(Error::DimensionMismatch {
                    context: "test image size",
                    expected: train.num_features(),
                    actual: test.num_features(),
                });
            }
            let max_label = train
                .labels()
                .iter()
                .chain(test.labels())
                .copied()
                .max()
                .ok_or(Error::Empty("training corpus"))?;
            (train, test, max_label + 1)
        }
    };

    let users = crate::data::partition(&train, &cfg.partition_spec())?;
    let labels = users
        .iter()
        .map(|u| label_distribution(u, num_classes))
        .collect::<Result<Vec<_>>>()?;
    let weights: Vec<f64> = users.iter().map(|u| u.len() as f64).collect();
    let spec = ModelSpec::new(train.num_features(), num_classes).with_l2(cfg.training.l2_reg);
    Ok(PreparedData { users, test, labels, weights, num_classes, spec })
}

/// Energy bookkeeping over a whole run; at every point
/// `consumed <= initial + harvested`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnergyAudit {
    pub initial: usize,
    pub harvested: usize,
    pub consumed: usize,
}

/// Optional per-round trace for analysis tooling.
#[derive(Debug, Clone)]
pub struct RunTrace {
    /// Global model before round 1 and after every round (`rounds + 1` entries).
    pub models: Vec<ModelVector>,
    pub scheduled_sizes: Vec<usize>,
    /// Gradient-approximation error per round (zero for empty rounds).
    pub epsilons: Vec<f64>,
}

pub struct RunResult {
    pub metrics: MetricsRecord,
    pub final_model: ModelVector,
    pub energy: EnergyAudit,
    /// The clustering produced after the estimation phase (clustered policy
    /// only).
    pub clustering: Option<Clustering>,
    pub trace: Option<RunTrace>,
}

/// Accuracy (argmax, ties to the lowest class) and mean loss on a test set.
pub fn evaluate(spec: &ModelSpec, model: &ModelVector, test: &LocalDataset) -> Result<(f64, f64)> {
    let loss = spec.loss(model, test)?;
    let correct = (0..test.len())
        .filter(|&i| spec.predict(model, test.features_of(i)) == test.label_of(i))
        .count();
    Ok((correct as f64 / test.len() as f64, loss))
}

fn all_user_gradients(
    spec: &ModelSpec,
    users: &[LocalDataset],
    theta: &ModelVector,
) -> Result<Vec<ModelVector>> {
    map_indexed(users.len(), |m| spec.gradient(theta, &users[m]))
        .into_iter()
        .collect()
}

/// Runs the configured experiment and returns its metrics.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsRecord> {
    Ok(run_experiment_full(cfg, false)?.metrics)
}

/// Runs the configured experiment; with `trace` the full model trajectory and
/// per-round schedule statistics are kept.
pub fn run_experiment_full(cfg: &ExperimentConfig, trace: bool) -> Result<RunResult> {
    cfg.validate()?;
    let prepared = prepare_data(cfg)?;
    let spec = prepared.spec;
    let num_users = cfg.partition.num_users;
    let chan_cfg = cfg.channel.to_channel_config();
    let eta_schedule = cfg.training.schedule();
    let master = cfg.seed;

    let mut theta = ModelVector::zeros(spec.dim());
    let mut energy = EnergyState::new(cfg.energy.probabilities(num_users))?;
    let mut audit =
        EnergyAudit { initial: energy.full_count(), harvested: 0, consumed: 0 };
    let mut participation = ParticipationRecord::new(num_users);
    let mut clustering: Option<Clustering> = None;
    let mut lse_fallback_warned = false;

    let mut rows = Vec::new();
    let mut trace_models = if trace { vec![theta.clone()] } else { Vec::new() };
    let mut trace_sizes = Vec::new();
    let mut trace_epsilons = Vec::new();

    for t in 0..cfg.rounds {
        let training = TrainingConfig {
            tau: cfg.training.tau,
            eta: eta_schedule.at(t),
            batch_size: cfg.training.batch_size,
        };

        let full_before = energy.full_count();
        energy = harvest(&energy, subseed(master, &[stream::HARVEST, t as u64]));
        audit.harvested += energy.full_count() - full_before;
        let feasible = feasible_users(&energy);

        let (scheduled, phase) = match &cfg.policy {
            PolicyConfig::None => (schedule_all(&feasible), Phase::None),
            PolicyConfig::Entropy { max_subset } => (
                schedule_entropy(&feasible, &prepared.labels, &prepared.weights, *max_subset)?,
                Phase::Entropy,
            ),
            PolicyConfig::Lse { estimation_rounds, .. } => {
                if t < *estimation_rounds {
                    (schedule_all(&feasible), Phase::Estimation)
                } else if let Some(c) = &clustering {
                    (
                        schedule_clustered(&feasible, c, subseed(master, &[stream::SCHEDULE, t as u64])),
                        Phase::Clustered,
                    )
                } else {
                    if !lse_fallback_warned {
                        log::warn!(
                            "no clustering available after the estimation phase; scheduling all feasible users"
                        );
                        lse_fallback_warned = true;
                    }
                    (schedule_all(&feasible), Phase::Clustered)
                }
            }
        };
        let estimation_phase = matches!(phase, Phase::Estimation);
        let num_scheduled = scheduled.len();
        let eval_round = (t + 1) % cfg.eval_every == 0 || t + 1 == cfg.rounds;

        let mut epsilon = 0.0;
        if !scheduled.is_empty() {
            if eval_round || trace {
                let grads = all_user_gradients(&spec, &prepared.users, &theta)?;
                epsilon = compute_epsilon(&grads, &scheduled)?;
            }

            let scheduled_vec: Vec<usize> = scheduled.iter().copied().collect();
            let packed: Vec<ComplexUpdate> = map_indexed(scheduled_vec.len(), |i| {
                let u = scheduled_vec[i];
                let local = spec.local_train(
                    &theta,
                    &prepared.users[u],
                    &training,
                    subseed(master, &[stream::TRAIN, t as u64, u as u64]),
                )?;
                let mut update = compute_update(&theta, &local)?;
                if estimation_phase {
                    update = update.normalized();
                }
                pack_complex(&update)
            })
            .into_iter()
            .collect::<Result<_>>()?;

            let realization = if cfg.channel.degenerate {
                ChannelRealization::degenerate(
                    num_scheduled,
                    chan_cfg.antennas,
                    spec.half_dim(),
                    chan_cfg.sigma_h2,
                )
            } else {
                draw_channel(
                    num_scheduled,
                    spec.half_dim(),
                    &chan_cfg,
                    subseed(master, &[stream::CHANNEL, t as u64]),
                )
            };
            let combined = transmit_and_combine(&packed, &realization, &chan_cfg)?;
            let estimate = estimate_aggregate(&combined, num_scheduled, &chan_cfg)?;

            if estimation_phase {
                let mask: Vec<bool> = (0..num_users).map(|u| scheduled.contains(&u)).collect();
                participation.accumulate_round(&mask, &estimate, num_scheduled)?;
            }

            theta = &theta + &estimate;
            energy = consume(&energy, &scheduled)?;
            audit.consumed += num_scheduled;
        }
        debug_assert!(audit.consumed <= audit.initial + audit.harvested);

        if let PolicyConfig::Lse { estimation_rounds, num_clusters, ridge } = &cfg.policy {
            if t + 1 == *estimation_rounds {
                if participation.is_empty() {
                    log::warn!(
                        "estimation phase produced no observations; clustered scheduling unavailable"
                    );
                } else {
                    let ridge_val = ridge.unwrap_or_else(|| participation.default_ridge());
                    let reps = estimate_representations(&participation, ridge_val)?;
                    clustering = Some(cluster_users(&reps, *num_clusters)?);
                }
            }
        }

        if trace {
            trace_models.push(theta.clone());
            trace_sizes.push(num_scheduled);
            trace_epsilons.push(epsilon);
        }
        if eval_round {
            let (test_accuracy, test_loss) = evaluate(&spec, &theta, &prepared.test)?;
            rows.push(MetricsRow {
                t: t + 1,
                num_scheduled,
                test_accuracy,
                test_loss,
                epsilon,
                battery_full_count: energy.full_count(),
                phase,
            });
        }
    }

    Ok(RunResult {
        metrics: MetricsRecord { rows },
        final_model: theta,
        energy: audit,
        clustering,
        trace: trace.then(|| RunTrace {
            models: trace_models,
            scheduled_sizes: trace_sizes,
            epsilons: trace_epsilons,
        }),
    })
}

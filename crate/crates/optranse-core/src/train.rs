//! Margin-ranking SGD over the weighted triple + path objective.
//!
//! Per positive sample with corruption `(h', r, t')` the loss is
//!
//! ```text
//! [margin + E(h,r,t) - E(h',r,t')]+
//!   + sum over projected-norm violations of [||W x||^2 - 1]+
//!   + lambda * sum_i (1/Z_i) sum_{p in P_r^i} Pr(p|h,t) Pr(r|p)
//!       * [margin_i + E(h,p,t) - E(h',p,t')]+
//! ```
//!
//! The triple term updates the entity/relation vectors and both projection
//! matrices of `r`; each path term updates only the relation vectors on that
//! path. Entity and relation vectors are hard-projected onto the unit ball
//! after every batch; the `||W x|| <= 1` constraints are the soft hinge
//! penalties above. Transition matrices are refreshed once per epoch and
//! treated as constants in gradients.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;

use crate::error::Error;
use crate::kg::{KnowledgeGraph, Triple};
use crate::model::{
    direct_energy_vec, init_params, sequence_matrices, MMode, ModelParams, Norm, TransitionCache,
};
use crate::path::{PathCache, PathSet, RelationPath};
use crate::Result;

/// Weight of the soft `||W x||^2 <= 1` hinge penalties.
const CONSTRAINT_WEIGHT: f64 = 1.0;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub learning_rate: f64,
    /// Margin of the triple hinge.
    pub margin: f64,
    /// Per-step path margins; index `i` is the margin for (i+1)-step paths.
    pub step_margins: Vec<f64>,
    /// Balance between the triple loss and the path losses.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub norm: Norm,
    pub seed: u64,
    pub max_steps: usize,
    /// Triple-only epochs run before the full objective.
    pub warm_start_epochs: usize,
    pub m_mode: MMode,
    pub negatives_per_positive: usize,
    /// Pin all projection matrices to the identity and never update them:
    /// the additive, order-blind ablation.
    pub freeze_matrices: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 50,
            learning_rate: 1e-4,
            margin: 5.0,
            step_margins: vec![5.0, 5.5],
            lambda: 0.01,
            epochs: 1000,
            batch_size: 1200,
            norm: Norm::L1,
            seed: 17,
            max_steps: 2,
            warm_start_epochs: 500,
            m_mode: MMode::Derived,
            negatives_per_positive: 1,
            freeze_matrices: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dim must be at least 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.margin <= 0.0 {
            return Err(Error::Config("margin must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.negatives_per_positive == 0 {
            return Err(Error::Config(
                "negatives per positive must be at least 1".into(),
            ));
        }
        if self.max_steps == 0 || self.max_steps > crate::path::MAX_PATH_STEPS {
            return Err(Error::Config(format!(
                "max_steps must be in 1..={}",
                crate::path::MAX_PATH_STEPS
            )));
        }
        if self.step_margins.len() < self.max_steps {
            return Err(Error::Config(format!(
                "need a margin for each step up to {}, got {}",
                self.max_steps,
                self.step_margins.len()
            )));
        }
        if self.step_margins.iter().any(|&m| m <= 0.0) {
            return Err(Error::Config("step margins must be positive".into()));
        }
        Ok(())
    }
}

/// One positive with its corruption and (training-mode) path evidence.
#[derive(Debug)]
pub struct BatchSample<'a> {
    pub positive: Triple,
    pub negative: Triple,
    pub path_set: &'a PathSet,
}

/// Loss split used for reporting; the soft constraint penalty is folded into
/// the triple component.
#[derive(Debug, Clone, Copy, Default)]
pub struct SampleLoss {
    pub triple: f64,
    pub path: f64,
}

impl SampleLoss {
    pub fn total(&self) -> f64 {
        self.triple + self.path
    }
}

/// Sparse gradient accumulator keyed by parameter id; deterministic
/// application order.
#[derive(Debug, Default)]
pub struct GradAccum {
    pub entities: BTreeMap<u32, DVector<f64>>,
    pub relations: BTreeMap<u32, DVector<f64>>,
    pub w1: BTreeMap<u32, DMatrix<f64>>,
    pub w2: BTreeMap<u32, DMatrix<f64>>,
}

impl GradAccum {
    fn entity(&mut self, id: u32, dim: usize) -> &mut DVector<f64> {
        self.entities
            .entry(id)
            .or_insert_with(|| DVector::zeros(dim))
    }

    fn relation(&mut self, id: u32, dim: usize) -> &mut DVector<f64> {
        self.relations
            .entry(id)
            .or_insert_with(|| DVector::zeros(dim))
    }

    fn w1(&mut self, id: u32, dim: usize) -> &mut DMatrix<f64> {
        self.w1
            .entry(id)
            .or_insert_with(|| DMatrix::zeros(dim, dim))
    }

    fn w2(&mut self, id: u32, dim: usize) -> &mut DMatrix<f64> {
        self.w2
            .entry(id)
            .or_insert_with(|| DMatrix::zeros(dim, dim))
    }

    pub fn merge(&mut self, other: GradAccum) {
        for (id, g) in other.entities {
            match self.entities.entry(id) {
                std::collections::btree_map::Entry::Occupied(mut e) => *e.get_mut() += g,
                std::collections::btree_map::Entry::Vacant(v) => {
                    v.insert(g);
                }
            }
        }
        for (id, g) in other.relations {
            match self.relations.entry(id) {
                std::collections::btree_map::Entry::Occupied(mut e) => *e.get_mut() += g,
                std::collections::btree_map::Entry::Vacant(v) => {
                    v.insert(g);
                }
            }
        }
        for (id, g) in other.w1 {
            match self.w1.entry(id) {
                std::collections::btree_map::Entry::Occupied(mut e) => *e.get_mut() += g,
                std::collections::btree_map::Entry::Vacant(v) => {
                    v.insert(g);
                }
            }
        }
        for (id, g) in other.w2 {
            match self.w2.entry(id) {
                std::collections::btree_map::Entry::Occupied(mut e) => *e.get_mut() += g,
                std::collections::btree_map::Entry::Vacant(v) => {
                    v.insert(g);
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
            && self.relations.is_empty()
            && self.w1.is_empty()
            && self.w2.is_empty()
    }

    /// `theta <- theta - lr * grad`; returns the touched ids.
    pub fn apply(&self, params: &mut ModelParams, lr: f64) -> Touched {
        let mut touched = Touched::default();
        for (&id, g) in &self.entities {
            params.entities[id as usize].axpy(-lr, g, 1.0);
            touched.entities.insert(id);
        }
        for (&id, g) in &self.relations {
            params.relations[id as usize].axpy(-lr, g, 1.0);
            touched.relations.insert(id);
        }
        for (&id, g) in &self.w1 {
            params.w1[id as usize] -= g * lr;
            touched.matrices.insert(id);
        }
        for (&id, g) in &self.w2 {
            params.w2[id as usize] -= g * lr;
            touched.matrices.insert(id);
        }
        touched
    }
}

/// Ids touched by a batch update.
#[derive(Debug, Default)]
pub struct Touched {
    pub entities: BTreeSet<u32>,
    pub relations: BTreeSet<u32>,
    pub matrices: BTreeSet<u32>,
}

/// `[margin + E(h,r,t) - E(h',r,t')]+` with the direct triple energy.
pub fn margin_loss_triple(params: &ModelParams, pos: &Triple, neg: &Triple, margin: f64) -> f64 {
    let e_pos = params
        .norm
        .eval(&direct_energy_vec(params, pos.head, pos.relation, pos.tail));
    let e_neg = params
        .norm
        .eval(&direct_energy_vec(params, neg.head, neg.relation, neg.tail));
    (margin + e_pos - e_neg).max(0.0)
}

/// `[margin_i + E(h,p,t) - E(h',p,t')]+` with the same path on both pairs.
pub fn margin_loss_path(
    params: &ModelParams,
    cache: &TransitionCache,
    pos_pair: (crate::kg::EntityId, crate::kg::EntityId),
    neg_pair: (crate::kg::EntityId, crate::kg::EntityId),
    path: &RelationPath,
    margin_i: f64,
) -> Result<f64> {
    let system = sequence_matrices(params, cache, path)?;
    let e_pos = params
        .norm
        .eval(&system.energy_vec(params, path, pos_pair.0, pos_pair.1));
    let e_neg = params
        .norm
        .eval(&system.energy_vec(params, path, neg_pair.0, neg_pair.1));
    Ok((margin_i + e_pos - e_neg).max(0.0))
}

/// Triple hinge with gradients into the entity/relation vectors and both
/// projection matrices of the relation.
pub fn triple_term(
    params: &ModelParams,
    pos: &Triple,
    neg: &Triple,
    margin: f64,
    mut acc: Option<&mut GradAccum>,
) -> f64 {
    let u_pos = direct_energy_vec(params, pos.head, pos.relation, pos.tail);
    let u_neg = direct_energy_vec(params, neg.head, neg.relation, neg.tail);
    let e_pos = params.norm.eval(&u_pos);
    let e_neg = params.norm.eval(&u_neg);
    let hinge = margin + e_pos - e_neg;
    if hinge <= 0.0 {
        return 0.0;
    }
    if let Some(acc) = acc.take() {
        let dim = params.dim;
        let s_pos = params.norm.grad(&u_pos);
        let s_neg = params.norm.grad(&u_neg);
        for (triple, s, sign) in [(pos, &s_pos, 1.0f64), (neg, &s_neg, -1.0f64)] {
            let r = triple.relation;
            *acc.entity(triple.head.0, dim) += params.w1(r).transpose() * s * sign;
            *acc.relation(r.0, dim) += s * sign;
            *acc.entity(triple.tail.0, dim) -= params.w2(r).transpose() * s * sign;
            *acc.w1(r.0, dim) += s * params.entity(triple.head).transpose() * sign;
            *acc.w2(r.0, dim) -= s * params.entity(triple.tail).transpose() * sign;
        }
    }
    hinge
}

/// Soft `[||W1 h||^2 - 1]+` and `[||W2 t||^2 - 1]+` penalties over the
/// distinct (matrix, entity) pairs of the positive and negative triple.
pub fn constraint_term(
    params: &ModelParams,
    pos: &Triple,
    neg: &Triple,
    mut acc: Option<&mut GradAccum>,
) -> f64 {
    let mut pairs: BTreeSet<(u8, u32, u32)> = BTreeSet::new();
    for t in [pos, neg] {
        pairs.insert((1, t.relation.0, t.head.0));
        pairs.insert((2, t.relation.0, t.tail.0));
    }
    let dim = params.dim;
    let mut loss = 0.0;
    for (which, rel, ent) in pairs {
        let w = if which == 1 {
            &params.w1[rel as usize]
        } else {
            &params.w2[rel as usize]
        };
        let x = &params.entities[ent as usize];
        let v = w * x;
        let sq = v.norm_squared();
        if sq <= 1.0 {
            continue;
        }
        loss += CONSTRAINT_WEIGHT * (sq - 1.0);
        if let Some(acc) = acc.as_deref_mut() {
            let scale = 2.0 * CONSTRAINT_WEIGHT;
            if which == 1 {
                *acc.w1(rel, dim) += &v * x.transpose() * scale;
            } else {
                *acc.w2(rel, dim) += &v * x.transpose() * scale;
            }
            *acc.entity(ent, dim) += w.transpose() * &v * scale;
        }
    }
    loss
}

/// Weighted path hinges. Gradients flow only into the relation vectors on
/// each path; sequence matrices are constants from the epoch's cache.
pub fn path_terms(
    params: &ModelParams,
    cache: &TransitionCache,
    pos: &Triple,
    neg: &Triple,
    path_set: &PathSet,
    config: &TrainConfig,
    mut acc: Option<&mut GradAccum>,
) -> Result<f64> {
    let dim = params.dim;
    let mut loss = 0.0;
    // A cache mined with a deeper step bound may hold longer paths than
    // this run is configured to train on; ignore the excess steps.
    let steps = path_set.max_steps().min(config.max_steps);
    for step in 1..=steps {
        let instances = path_set.step(step);
        if instances.is_empty() {
            continue;
        }
        let z = path_set.normalizer(step);
        if z <= 0.0 {
            return Err(Error::Contract(format!(
                "non-positive normalizer {z} for step {step}"
            )));
        }
        let margin_i = config.step_margins[step - 1];
        for inst in instances {
            let weight = inst.reliability * inst.confidence / z;
            let system = sequence_matrices(params, cache, &inst.path)?;
            let u_pos = system.energy_vec(params, &inst.path, pos.head, pos.tail);
            let u_neg = system.energy_vec(params, &inst.path, neg.head, neg.tail);
            let e_pos = params.norm.eval(&u_pos);
            let e_neg = params.norm.eval(&u_neg);
            let hinge = margin_i + e_pos - e_neg;
            if hinge <= 0.0 {
                continue;
            }
            loss += config.lambda * weight * hinge;
            if let Some(acc) = acc.as_deref_mut() {
                let diff = params.norm.grad(&u_pos) - params.norm.grad(&u_neg);
                let scale = config.lambda * weight;
                for (j, &rj) in inst.path.relations().iter().enumerate() {
                    if j == 0 {
                        acc.relation(rj.0, dim).axpy(scale, &diff, 1.0);
                    } else {
                        let g = system.seq[j].transpose() * &diff;
                        acc.relation(rj.0, dim).axpy(scale, &g, 1.0);
                    }
                }
            }
        }
    }
    Ok(loss)
}

/// Full per-sample objective with gradient contributions.
pub fn sample_objective(
    params: &ModelParams,
    cache: &TransitionCache,
    sample: &BatchSample<'_>,
    config: &TrainConfig,
) -> Result<(SampleLoss, GradAccum)> {
    let mut acc = GradAccum::default();
    let mut loss = SampleLoss {
        triple: triple_term(
            params,
            &sample.positive,
            &sample.negative,
            config.margin,
            Some(&mut acc),
        ),
        path: 0.0,
    };
    loss.triple += constraint_term(params, &sample.positive, &sample.negative, Some(&mut acc));
    if config.lambda > 0.0 && !sample.path_set.is_empty() {
        loss.path = path_terms(
            params,
            cache,
            &sample.positive,
            &sample.negative,
            sample.path_set,
            config,
            Some(&mut acc),
        )?;
    }
    Ok((loss, acc))
}

/// Rescales touched entity/relation vectors with L2 norm above one back to
/// the unit sphere; returns the number of active constraints.
pub fn project_norms(params: &mut ModelParams, touched: &Touched) -> usize {
    let mut violations = 0;
    for &id in &touched.entities {
        let v = &mut params.entities[id as usize];
        let n = v.norm();
        if n > 1.0 {
            *v /= n;
            violations += 1;
        }
    }
    for &id in &touched.relations {
        let v = &mut params.relations[id as usize];
        let n = v.norm();
        if n > 1.0 {
            *v /= n;
            violations += 1;
        }
    }
    violations
}

/// Per-epoch training summary.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochStats {
    pub epoch: u64,
    pub mean_triple_loss: f64,
    pub mean_path_loss: f64,
    pub norm_violations: usize,
    pub batches: usize,
    pub wall_ms: u128,
}

/// One pass over the (seeded-order) train triples: per positive draw one
/// Bernoulli corruption, accumulate gradients over the batch, apply them
/// once, then project norms. Negatives are drawn sequentially up front and
/// gradients merge in sample order, so results do not depend on the worker
/// count.
pub fn sgd_epoch(
    params: &mut ModelParams,
    cache: &TransitionCache,
    graph: &KnowledgeGraph,
    train_path_sets: Option<&[PathSet]>,
    config: &TrainConfig,
    rng: &mut StdRng,
) -> Result<EpochStats> {
    let start = Instant::now();
    let train = graph.train();
    if let Some(sets) = train_path_sets {
        if sets.len() != train.len() {
            return Err(Error::Contract(format!(
                "path cache has {} train sets for {} train triples",
                sets.len(),
                train.len()
            )));
        }
    }
    let empty = PathSet::empty(config.max_steps);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);

    let mut triple_loss_sum = 0.0;
    let mut path_loss_sum = 0.0;
    let mut violations = 0usize;
    let mut batches = 0usize;
    let mut sample_count = 0usize;

    for (batch_index, chunk) in order.chunks(config.batch_size).enumerate() {
        let mut samples: Vec<BatchSample<'_>> = Vec::with_capacity(chunk.len());
        for &idx in chunk {
            let positive = train[idx];
            for _ in 0..config.negatives_per_positive {
                let negative = graph.corrupt_triple(&positive, rng)?;
                let path_set = if config.lambda > 0.0 {
                    train_path_sets.map(|s| &s[idx]).unwrap_or(&empty)
                } else {
                    &empty
                };
                samples.push(BatchSample {
                    positive,
                    negative,
                    path_set,
                });
            }
        }

        // Per-sample gradients are computed in parallel over a frozen
        // snapshot and folded in sample order, so the result is bitwise
        // identical for any worker count.
        let per_sample: Result<Vec<(SampleLoss, GradAccum)>> = samples
            .par_iter()
            .map(|sample| sample_objective(params, cache, sample, config))
            .collect();
        let mut batch_acc = GradAccum::default();
        for (loss, acc) in per_sample? {
            triple_loss_sum += loss.triple;
            path_loss_sum += loss.path;
            batch_acc.merge(acc);
            sample_count += 1;
        }

        if config.freeze_matrices {
            batch_acc.w1.clear();
            batch_acc.w2.clear();
        }
        let touched = batch_acc.apply(params, config.learning_rate);
        check_finite(params, &touched, batch_index, params.epoch)?;
        violations += project_norms(params, &touched);
        batches += 1;
    }

    let denom = sample_count.max(1) as f64;
    Ok(EpochStats {
        epoch: params.epoch,
        mean_triple_loss: triple_loss_sum / denom,
        mean_path_loss: path_loss_sum / denom,
        norm_violations: violations,
        batches,
        wall_ms: start.elapsed().as_millis(),
    })
}

fn check_finite(params: &ModelParams, touched: &Touched, batch: usize, epoch: u64) -> Result<()> {
    let bad = touched
        .entities
        .iter()
        .any(|&id| !params.entities[id as usize].iter().all(|x| x.is_finite()))
        || touched
            .relations
            .iter()
            .any(|&id| !params.relations[id as usize].iter().all(|x| x.is_finite()))
        || touched.matrices.iter().any(|&id| {
            !params.w1[id as usize].iter().all(|x| x.is_finite())
                || !params.w2[id as usize].iter().all(|x| x.is_finite())
        });
    if bad {
        return Err(Error::Numerical(format!(
            "non-finite parameter after batch {batch} of epoch {epoch}"
        )));
    }
    Ok(())
}

/// Ordered relation pairs appearing in cached train paths; learned-mode
/// transition caches materialize exactly these.
pub fn transition_pairs_of(
    sets: &[PathSet],
) -> BTreeSet<(crate::kg::RelationId, crate::kg::RelationId)> {
    let mut pairs = BTreeSet::new();
    for set in sets {
        for inst in set.iter() {
            let rels = inst.path.relations();
            for k in 1..rels.len() {
                pairs.insert((rels[k - 1], rels[k]));
            }
        }
    }
    pairs
}

/// Runs `config.epochs` epochs, refreshing the transition cache at each
/// epoch start, invoking `on_epoch` after each. Returns the cache, still
/// fresh for the final parameters.
pub fn run_training(
    params: &mut ModelParams,
    graph: &KnowledgeGraph,
    train_path_sets: Option<&[PathSet]>,
    config: &TrainConfig,
    rng: &mut StdRng,
    stats_out: &mut Vec<EpochStats>,
    mut on_epoch: impl FnMut(&ModelParams, &EpochStats) -> Result<()>,
) -> Result<TransitionCache> {
    let needed = train_path_sets.map(transition_pairs_of).unwrap_or_default();
    let mut cache = TransitionCache::new(params, config.m_mode, &needed)?;
    for _ in 0..config.epochs {
        params.epoch += 1;
        cache.refresh(params, &needed)?;
        let stats = sgd_epoch(params, &cache, graph, train_path_sets, config, rng)?;
        on_epoch(params, &stats)?;
        stats_out.push(stats);
    }
    Ok(cache)
}

/// Initializes parameters and trains the triple-only objective (`lambda = 0`,
/// the two-projection translational shape) for `warm_start_epochs`.
pub fn warm_start(
    graph: &KnowledgeGraph,
    config: &TrainConfig,
    rng: &mut StdRng,
) -> Result<(ModelParams, Vec<EpochStats>)> {
    let mut params = init_params(graph, config.dim, config.norm, rng);
    if config.freeze_matrices {
        for m in params.w1.iter_mut().chain(params.w2.iter_mut()) {
            m.fill_with_identity();
        }
    }
    let mut stats = Vec::new();
    if config.warm_start_epochs > 0 {
        let mut ws = config.clone();
        ws.lambda = 0.0;
        ws.epochs = config.warm_start_epochs;
        run_training(
            &mut params,
            graph,
            None,
            &ws,
            rng,
            &mut stats,
            |_, _| Ok(()),
        )?;
    }
    Ok((params, stats))
}

/// Full training report: config echo plus per-epoch lines.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainReport {
    pub seed: u64,
    pub config: TrainConfig,
    pub warm_start: Vec<EpochStats>,
    pub epochs: Vec<EpochStats>,
    pub total_wall_ms: u128,
}

impl TrainReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "training report (seed {}, dim {}, norm {}, lr {}, margin {}, lambda {})\n",
            self.seed,
            self.config.dim,
            self.config.norm,
            self.config.learning_rate,
            self.config.margin,
            self.config.lambda,
        ));
        for (label, stats) in [("warm", &self.warm_start), ("full", &self.epochs)] {
            for s in stats.iter() {
                out.push_str(&format!(
                    "{label} epoch {:>5}  triple {:>12.6}  path {:>12.6}  violations {:>6}  {} ms\n",
                    s.epoch, s.mean_triple_loss, s.mean_path_loss, s.norm_violations, s.wall_ms
                ));
            }
        }
        out.push_str(&format!("total wall time: {} ms\n", self.total_wall_ms));
        out
    }
}

/// Warm start followed by full training; the one-call entry point used by
/// the CLI. All randomness flows from `config.seed`.
pub fn train_model(
    graph: &KnowledgeGraph,
    path_cache: Option<&PathCache>,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainReport, TransitionCache)> {
    train_model_with(graph, path_cache, config, |_, _| Ok(()))
}

/// [`train_model`] with a per-epoch callback (checkpoint hooks, progress).
/// The callback runs for full-training epochs only, not the warm start.
pub fn train_model_with(
    graph: &KnowledgeGraph,
    path_cache: Option<&PathCache>,
    config: &TrainConfig,
    on_epoch: impl FnMut(&ModelParams, &EpochStats) -> Result<()>,
) -> Result<(ModelParams, TrainReport, TransitionCache)> {
    config.validate()?;
    if let Some(cache) = path_cache {
        cache.check_fingerprint(graph)?;
    }
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(config.seed);
    let (mut params, warm_stats) = warm_start(graph, config, &mut rng)?;
    let mut full_stats = Vec::new();
    let cache = run_training(
        &mut params,
        graph,
        path_cache.map(|c| c.train_sets.as_slice()),
        config,
        &mut rng,
        &mut full_stats,
        on_epoch,
    )?;
    let report = TrainReport {
        seed: config.seed,
        config: config.clone(),
        warm_start: warm_stats,
        epochs: full_stats,
        total_wall_ms: start.elapsed().as_millis(),
    };
    Ok((params, report, cache))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{build_graph, EntityId, RelationId};
    use crate::path::{PathConfig, PathInstance};
    use crate::Error;

    fn chain_graph(n: usize) -> KnowledgeGraph {
        // A few interleaved chains so paths of length 2 exist.
        let mut raws = Vec::new();
        for i in 0..n {
            let r = ["r0", "r1", "r2"][i % 3];
            raws.push((format!("e{i}"), r.to_string(), format!("e{}", (i + 1) % n)));
            if i % 4 == 0 {
                raws.push((
                    format!("e{i}"),
                    "skip".to_string(),
                    format!("e{}", (i + 2) % n),
                ));
            }
        }
        let (mut g, _) = build_graph(&raws, &[], &[]);
        g.add_reverse_relations().unwrap();
        g
    }

    fn small_config(seed: u64) -> TrainConfig {
        TrainConfig {
            dim: 6,
            learning_rate: 0.01,
            margin: 1.0,
            step_margins: vec![1.0, 1.2],
            lambda: 0.01,
            epochs: 3,
            batch_size: 16,
            norm: Norm::L1,
            seed,
            max_steps: 2,
            warm_start_epochs: 2,
            m_mode: MMode::Derived,
            negatives_per_positive: 1,
            freeze_matrices: false,
        }
    }

    #[test]
    fn hinge_arithmetic() {
        // Values checked on the hinge formula directly.
        assert_eq!((5.0f64 + 1.0 - 3.0).max(0.0), 3.0);
        assert_eq!((5.0f64 + 1.0 - 10.0).max(0.0), 0.0);
    }

    #[test]
    fn margin_loss_triple_hinges() {
        let g = chain_graph(12);
        let mut rng = StdRng::seed_from_u64(0);
        let params = init_params(&g, 4, Norm::L1, &mut rng);
        let pos = g.train()[0];
        let neg = g.corrupt_triple(&pos, &mut rng).unwrap();
        let loss = margin_loss_triple(&params, &pos, &neg, 5.0);
        let e_pos = crate::model::triple_energy(&params, pos.head, pos.relation, pos.tail);
        let e_neg = crate::model::triple_energy(&params, neg.head, neg.relation, neg.tail);
        assert_eq!(loss, (5.0 + e_pos - e_neg).max(0.0));
    }

    #[test]
    fn identical_pairs_lose_exactly_the_margin() {
        let g = chain_graph(12);
        let mut rng = StdRng::seed_from_u64(1);
        let params = init_params(&g, 4, Norm::L1, &mut rng);
        let cache = TransitionCache::new(&params, MMode::Derived, &BTreeSet::new()).unwrap();
        let pair = (EntityId(0), EntityId(3));
        let path = RelationPath::new(vec![RelationId(0), RelationId(2)]);
        let loss = margin_loss_path(&params, &cache, pair, pair, &path, 5.5).unwrap();
        assert_eq!(loss, 5.5);
    }

    #[test]
    fn inactive_hinge_contributes_no_gradient() {
        let g = chain_graph(12);
        let mut rng = StdRng::seed_from_u64(2);
        let mut params = init_params(&g, 4, Norm::L1, &mut rng);
        // Make the positive's energy zero and the negative's enormous.
        let pos = g.train()[0];
        let neg = g.corrupt_triple(&pos, &mut rng).unwrap();
        for m in params.w1.iter_mut().chain(params.w2.iter_mut()) {
            m.fill_with_identity();
        }
        params.relations[pos.relation.index()].fill(0.0);
        let h = params.entities[pos.head.index()].clone();
        params.entities[pos.tail.index()] = h;
        // Pull the corrupted entity far away (within the unit ball scale).
        let far = if neg.head != pos.head {
            neg.head
        } else {
            neg.tail
        };
        params.entities[far.index()].fill(1.0 / (4.0f64).sqrt());
        params.entities[far.index()] *= -1.0;

        let e_pos = crate::model::triple_energy(&params, pos.head, pos.relation, pos.tail);
        let e_neg = crate::model::triple_energy(&params, neg.head, neg.relation, neg.tail);
        assert!(e_pos == 0.0 && e_neg > 0.0);
        let margin = (e_neg - e_pos) / 2.0;

        let mut acc = GradAccum::default();
        let loss = triple_term(&params, &pos, &neg, margin, Some(&mut acc));
        assert_eq!(loss, 0.0);
        assert!(
            acc.is_empty(),
            "inactive hinge must leave the accumulator empty"
        );
    }

    #[test]
    fn path_gradients_touch_only_path_relation_vectors() {
        let g = chain_graph(16);
        let mut rng = StdRng::seed_from_u64(3);
        let params = init_params(&g, 5, Norm::L1, &mut rng);
        let cache = TransitionCache::new(&params, MMode::Derived, &BTreeSet::new()).unwrap();
        let pos = g.train()[0];
        let neg = g.corrupt_triple(&pos, &mut rng).unwrap();
        let mut set = PathSet::empty(2);
        let path = RelationPath::new(vec![RelationId(0), RelationId(2)]);
        set.insert(PathInstance {
            path: path.clone(),
            reliability: 0.8,
            confidence: 0.5,
        });
        let config = small_config(0);
        let mut acc = GradAccum::default();
        let loss = path_terms(&params, &cache, &pos, &neg, &set, &config, Some(&mut acc)).unwrap();
        assert!(loss > 0.0, "margin 1 with random params should be active");
        assert!(
            acc.entities.is_empty(),
            "path terms must not touch entities"
        );
        assert!(
            acc.w1.is_empty() && acc.w2.is_empty(),
            "path terms must not touch matrices"
        );
        let touched: Vec<u32> = acc.relations.keys().copied().collect();
        assert_eq!(touched, vec![0, 2]);
    }

    #[test]
    fn lambda_zero_ignores_paths() {
        let g = chain_graph(16);
        let mut rng = StdRng::seed_from_u64(4);
        let params = init_params(&g, 5, Norm::L1, &mut rng);
        let cache = TransitionCache::new(&params, MMode::Derived, &BTreeSet::new()).unwrap();
        let pos = g.train()[0];
        let neg = g.corrupt_triple(&pos, &mut rng).unwrap();
        let mut set = PathSet::empty(2);
        set.insert(PathInstance {
            path: RelationPath::new(vec![RelationId(0), RelationId(2)]),
            reliability: 1.0,
            confidence: 1.0,
        });
        let mut config = small_config(0);
        config.lambda = 0.0;
        let sample = BatchSample {
            positive: pos,
            negative: neg,
            path_set: &set,
        };
        let (loss, _) = sample_objective(&params, &cache, &sample, &config).unwrap();
        assert_eq!(loss.path, 0.0);
        let empty_sample = BatchSample {
            positive: pos,
            negative: neg,
            path_set: &PathSet::empty(2),
        };
        let (loss2, _) = sample_objective(&params, &cache, &empty_sample, &config).unwrap();
        assert_eq!(loss.triple, loss2.triple);
    }

    #[test]
    fn gradient_matches_finite_differences_on_active_sample() {
        let g = chain_graph(16);
        let mut rng = StdRng::seed_from_u64(5);
        let params = init_params(&g, 4, Norm::L1, &mut rng);
        let cache = TransitionCache::new(&params, MMode::Derived, &BTreeSet::new()).unwrap();
        let pos = g.train()[0];
        let neg = g.corrupt_triple(&pos, &mut rng).unwrap();
        let mut set = PathSet::empty(2);
        set.insert(PathInstance {
            path: RelationPath::new(vec![RelationId(0), RelationId(2)]),
            reliability: 0.7,
            confidence: 0.9,
        });
        let config = small_config(0);
        let sample = BatchSample {
            positive: pos,
            negative: neg,
            path_set: &set,
        };
        let (_, acc) = sample_objective(&params, &cache, &sample, &config).unwrap();

        let eps = 1e-6;
        let mut checked = 0;
        // Relation-vector coordinates carry both triple and path gradients.
        for (&rid, grad) in &acc.relations {
            for i in 0..params.dim {
                let mut up = params.clone();
                up.relations[rid as usize][i] += eps;
                let mut down = params.clone();
                down.relations[rid as usize][i] -= eps;
                let f = |p: &ModelParams| -> f64 {
                    let s = BatchSample {
                        positive: pos,
                        negative: neg,
                        path_set: &set,
                    };
                    let (l, _) = sample_objective(p, &cache, &s, &config).unwrap();
                    l.total()
                };
                let fd = (f(&up) - f(&down)) / (2.0 * eps);
                let analytic = grad[i];
                if fd.abs() < 1e-12 && analytic.abs() < 1e-12 {
                    continue;
                }
                let rel_err = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-12);
                assert!(
                    rel_err < 1e-4,
                    "relation {rid} coord {i}: fd {fd} vs analytic {analytic}"
                );
                checked += 1;
            }
        }
        assert!(checked > 0, "no coordinates checked");
    }

    #[test]
    fn project_norms_rescales_to_unit() {
        let g = chain_graph(8);
        let mut rng = StdRng::seed_from_u64(6);
        let mut params = init_params(&g, 4, Norm::L1, &mut rng);
        params.entities[0].fill(1.0); // norm 2
        params.relations[0].fill(0.1); // norm 0.2, untouched
        let mut touched = Touched::default();
        touched.entities.insert(0);
        touched.relations.insert(0);
        let violations = project_norms(&mut params, &touched);
        assert_eq!(violations, 1);
        assert!((params.entities[0].norm() - 1.0).abs() < 1e-12);
        assert!((params.relations[0].norm() - 0.2).abs() < 1e-12);

        let none = project_norms(&mut params, &touched);
        assert_eq!(none, 0);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
        let g = chain_graph(12);
        // sgd_epoch does not re-validate, so a literal zero rate is usable
        // here even though validate() rejects it for real runs.
        let config = TrainConfig {
            learning_rate: 0.0,
            ..small_config(7)
        };
        let mut rng = StdRng::seed_from_u64(config.seed);
        let mut params = init_params(&g, config.dim, config.norm, &mut rng);
        let snapshot = params.clone();
        let cache = TransitionCache::new(&params, MMode::Derived, &BTreeSet::new()).unwrap();
        params.epoch += 1;
        let mut cache = cache;
        cache.refresh(&params, &BTreeSet::new()).unwrap();
        sgd_epoch(&mut params, &cache, &g, None, &config, &mut rng).unwrap();
        assert_eq!(params.entities, snapshot.entities);
        assert_eq!(params.relations, snapshot.relations);
        assert_eq!(params.w1, snapshot.w1);
        assert_eq!(params.w2, snapshot.w2);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let g = chain_graph(20);
        let cache = PathCache::build(&g, &PathConfig::default(), &[]).unwrap();
        let config = small_config(11);
        let (p1, _, _) = train_model(&g, Some(&cache), &config).unwrap();
        let (p2, _, _) = train_model(&g, Some(&cache), &config).unwrap();
        assert_eq!(p1, p2, "same seed and data must give identical parameters");

        let other = TrainConfig { seed: 12, ..config };
        let (p3, _, _) = train_model(&g, Some(&cache), &other).unwrap();
        assert_ne!(p1, p3, "different seeds should diverge");
    }

    #[test]
    fn warm_start_zero_epochs_equals_init() {
        let g = chain_graph(12);
        let mut config = small_config(13);
        config.warm_start_epochs = 0;
        let mut rng = StdRng::seed_from_u64(config.seed);
        let (params, stats) = warm_start(&g, &config, &mut rng).unwrap();
        let mut rng2 = StdRng::seed_from_u64(config.seed);
        let fresh = init_params(&g, config.dim, config.norm, &mut rng2);
        assert!(stats.is_empty());
        assert_eq!(params, fresh);
    }

    #[test]
    fn lambda_zero_run_equals_warm_start_of_equal_length() {
        let g = chain_graph(16);
        let cache = PathCache::build(&g, &PathConfig::default(), &[]).unwrap();
        let mut config = small_config(14);
        config.lambda = 0.0;
        config.epochs = 4;
        config.warm_start_epochs = 0;
        let (via_full, _, _) = train_model(&g, Some(&cache), &config).unwrap();

        let mut as_warm = config.clone();
        as_warm.warm_start_epochs = 4;
        let mut rng = StdRng::seed_from_u64(as_warm.seed);
        let (via_warm, _) = warm_start(&g, &as_warm, &mut rng).unwrap();
        assert_eq!(via_full, via_warm);
    }

    #[test]
    fn loss_decreases_on_toy_graph() {
        let g = chain_graph(25); // ~50 train triples with skips and reverses
        let cache = PathCache::build(&g, &PathConfig::default(), &[]).unwrap();
        let mut config = small_config(15);
        config.epochs = 20;
        config.warm_start_epochs = 0;
        config.learning_rate = 0.05;
        let (_, report, _) = train_model(&g, Some(&cache), &config).unwrap();
        let first = report.epochs.first().unwrap();
        let last = report.epochs.last().unwrap();
        assert!(
            last.mean_triple_loss + last.mean_path_loss
                < first.mean_triple_loss + first.mean_path_loss,
            "loss should decrease: first {:?} last {:?}",
            (first.mean_triple_loss, first.mean_path_loss),
            (last.mean_triple_loss, last.mean_path_loss)
        );
    }

    #[test]
    fn norms_bounded_after_every_epoch() {
        let g = chain_graph(16);
        let cache = PathCache::build(&g, &PathConfig::default(), &[]).unwrap();
        let mut config = small_config(16);
        config.learning_rate = 0.1;
        config.epochs = 5;
        let (params, _, _) = train_model(&g, Some(&cache), &config).unwrap();
        for v in params.entities.iter().chain(params.relations.iter()) {
            assert!(v.norm() <= 1.0 + 1e-12, "norm {} exceeds bound", v.norm());
        }
    }

    #[test]
    fn warm_start_helps_on_toy_graph() {
        let g = chain_graph(20);
        let cache = PathCache::build(&g, &PathConfig::default(), &[]).unwrap();
        let mut gaps = Vec::new();
        for seed in 0..5 {
            let mut cold = small_config(100 + seed);
            cold.warm_start_epochs = 0;
            cold.epochs = 12;
            cold.learning_rate = 0.05;
            let (_, cold_report, _) = train_model(&g, Some(&cache), &cold).unwrap();

            let mut warm = cold.clone();
            warm.warm_start_epochs = 12;
            let (_, warm_report, _) = train_model(&g, Some(&cache), &warm).unwrap();

            let cold_final = cold_report.epochs.last().unwrap();
            let warm_final = warm_report.epochs.last().unwrap();
            gaps.push(
                (cold_final.mean_triple_loss + cold_final.mean_path_loss)
                    - (warm_final.mean_triple_loss + warm_final.mean_path_loss),
            );
        }
        gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(
            gaps[2] > 0.0,
            "median warm-start improvement should be positive: {gaps:?}"
        );
    }

    #[test]
    fn deeper_cached_paths_than_configured_are_ignored() {
        let g = chain_graph(16);
        let mut rng = StdRng::seed_from_u64(19);
        let params = init_params(&g, 4, Norm::L1, &mut rng);
        let cache = TransitionCache::new(&params, MMode::Derived, &BTreeSet::new()).unwrap();
        let pos = g.train()[0];
        let neg = g.corrupt_triple(&pos, &mut rng).unwrap();
        let mut set = PathSet::empty(3);
        set.insert(PathInstance {
            path: RelationPath::new(vec![RelationId(0), RelationId(2), RelationId(0)]),
            reliability: 1.0,
            confidence: 1.0,
        });
        set.insert(PathInstance {
            path: RelationPath::single(RelationId(2)),
            reliability: 1.0,
            confidence: 1.0,
        });
        let config = small_config(0); // max_steps = 2, two margins
        let mut acc = GradAccum::default();
        let loss =
            path_terms(&params, &cache, &pos, &neg, &set, &config, Some(&mut acc)).unwrap();
        // The 3-step instance is out of scope; only the 1-step one counts.
        let only_one_step =
            margin_loss_path(&params, &cache, (pos.head, pos.tail), (neg.head, neg.tail),
                &RelationPath::single(RelationId(2)), config.step_margins[0])
                .unwrap();
        assert!((loss - config.lambda * only_one_step).abs() < 1e-12);
    }

    #[test]
    fn config_validation_catches_bad_margins() {
        let mut config = small_config(0);
        config.step_margins = vec![1.0];
        config.max_steps = 2;
        assert!(matches!(config.validate(), Err(Error::Config(_))));
        config.step_margins = vec![1.0, -0.5];
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }
}

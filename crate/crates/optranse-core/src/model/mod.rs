//! Learned parameters and the ordered-path energy machinery.
//!
//! Each relation owns a head projection `W1` and a tail projection `W2`.
//! A path `r1..rn` scores `|| W1[r1] h + sum_i S^i r_i - W_p t ||` where the
//! sequence matrices `S^i` are left-to-right products of transition matrices
//! `T_k = W2[r_{k-1}] pinv(W1[r_k])` (with `T_1 = I`) and
//! `W_p = S^n W2[r_n]`. The transition matrices make the energy sensitive to
//! relation order. Two min-pooling levels fuse path energies with the direct
//! triple energy; empty pools fall back to the direct term via an infinite
//! sentinel.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, write_meta};

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::Error;
use crate::kg::{EntityId, KnowledgeGraph, RelationId};
use crate::path::{PathSet, RelationPath};
use crate::Result;

/// Singular values below this fraction of the largest are treated as zero
/// when forming pseudo-inverses.
pub const PINV_RELATIVE_CUTOFF: f64 = 1e-8;

/// Scoring norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Norm {
    L1,
    L2,
}

impl Norm {
    pub fn eval(self, v: &DVector<f64>) -> f64 {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => v.norm(),
        }
    }

    /// Subgradient of the norm; defined as zero at kinks.
    pub fn grad(self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Norm::L1 => v.map(|x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Norm::L2 => {
                let n = v.norm();
                if n > 0.0 {
                    v / n
                } else {
                    DVector::zeros(v.len())
                }
            }
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
        }
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            other => Err(Error::Config(format!(
                "unknown norm '{other}' (expected l1 or l2)"
            ))),
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// How transition matrices are realized.
///
/// `Derived` recomputes `pinv(W1)` from the current projections at every
/// cache refresh; `Learned` materializes one matrix per ordered relation
/// pair lazily at first use and keeps it fixed afterwards (path updates
/// never touch matrices, so these receive no gradients).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum MMode {
    Derived,
    Learned,
}

impl std::str::FromStr for MMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "derived" => Ok(MMode::Derived),
            "learned" => Ok(MMode::Learned),
            other => Err(Error::Config(format!(
                "unknown m_mode '{other}' (expected derived or learned)"
            ))),
        }
    }
}

/// All learned parameters. The trainer is the only writer; energy
/// computations are pure given a snapshot and a fresh [`TransitionCache`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dim: usize,
    pub norm: Norm,
    pub entities: Vec<DVector<f64>>,
    pub relations: Vec<DVector<f64>>,
    pub w1: Vec<DMatrix<f64>>,
    pub w2: Vec<DMatrix<f64>>,
    /// Epoch counter used to validate transition-cache freshness.
    pub epoch: u64,
}

impl ModelParams {
    #[inline]
    pub fn entity(&self, e: EntityId) -> &DVector<f64> {
        &self.entities[e.index()]
    }

    #[inline]
    pub fn relation(&self, r: RelationId) -> &DVector<f64> {
        &self.relations[r.index()]
    }

    #[inline]
    pub fn w1(&self, r: RelationId) -> &DMatrix<f64> {
        &self.w1[r.index()]
    }

    #[inline]
    pub fn w2(&self, r: RelationId) -> &DMatrix<f64> {
        &self.w2[r.index()]
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_slot_count(&self) -> usize {
        self.relations.len()
    }
}

/// Vectors uniform in `[-6/sqrt(d), 6/sqrt(d)]` projected into the unit
/// ball; projections start at identity plus uniform noise in `+-0.005`.
pub fn init_params<R: Rng + ?Sized>(
    graph: &KnowledgeGraph,
    dim: usize,
    norm: Norm,
    rng: &mut R,
) -> ModelParams {
    assert!(dim >= 1, "dimension must be at least 1");
    let bound = 6.0 / (dim as f64).sqrt();
    let mut vector = |_: usize| {
        let mut v = DVector::from_fn(dim, |_, _| rng.random_range(-bound..bound));
        let n = v.norm();
        if n > 1.0 {
            v /= n;
        }
        v
    };
    let entities: Vec<DVector<f64>> = (0..graph.entity_count()).map(&mut vector).collect();
    let relations: Vec<DVector<f64>> = (0..graph.relation_slot_count()).map(&mut vector).collect();
    let mut matrix = |_: usize| {
        let mut m = DMatrix::identity(dim, dim);
        for j in 0..dim {
            for i in 0..dim {
                m[(i, j)] += rng.random_range(-0.005..0.005);
            }
        }
        m
    };
    let w1: Vec<DMatrix<f64>> = (0..graph.relation_slot_count()).map(&mut matrix).collect();
    let w2: Vec<DMatrix<f64>> = (0..graph.relation_slot_count()).map(&mut matrix).collect();
    ModelParams {
        dim,
        norm,
        entities,
        relations,
        w1,
        w2,
        epoch: 0,
    }
}

/// Per-epoch snapshot of the pseudo-inverses behind transition matrices.
#[derive(Debug, Clone)]
pub struct TransitionCache {
    mode: MMode,
    epoch_stamp: u64,
    /// Derived mode: `pinv(W1[r])` per relation slot.
    pinv_w1: Vec<DMatrix<f64>>,
    /// Learned mode: fixed matrices per ordered pair (previous, next).
    pairs: std::collections::BTreeMap<(u32, u32), DMatrix<f64>>,
}

/// Moore-Penrose pseudo-inverse by SVD, zeroing singular values below
/// [`PINV_RELATIVE_CUTOFF`] times the largest.
pub fn pseudo_inverse(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let svd = m
        .clone()
        .try_svd(true, true, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical(format!("SVD did not converge for {context}")))?;
    let s_max = svd.singular_values.max();
    svd.pseudo_inverse(PINV_RELATIVE_CUTOFF * s_max)
        .map_err(|e| Error::Numerical(format!("pseudo-inverse failed for {context}: {e}")))
}

impl TransitionCache {
    /// Builds a fresh cache stamped with the parameters' current epoch.
    /// `needed_pairs` is consulted in learned mode only.
    pub fn new(
        params: &ModelParams,
        mode: MMode,
        needed_pairs: &BTreeSet<(RelationId, RelationId)>,
    ) -> Result<Self> {
        let mut cache = TransitionCache {
            mode,
            epoch_stamp: params.epoch,
            pinv_w1: Vec::new(),
            pairs: std::collections::BTreeMap::new(),
        };
        cache.refresh(params, needed_pairs)?;
        Ok(cache)
    }

    pub fn mode(&self) -> MMode {
        self.mode
    }

    pub fn epoch_stamp(&self) -> u64 {
        self.epoch_stamp
    }

    /// Recomputes pseudo-inverses (derived mode) or materializes transition
    /// matrices for pairs not yet seen (learned mode), and stamps the
    /// parameters' epoch.
    pub fn refresh(
        &mut self,
        params: &ModelParams,
        needed_pairs: &BTreeSet<(RelationId, RelationId)>,
    ) -> Result<()> {
        match self.mode {
            MMode::Derived => {
                let mut pinvs = Vec::with_capacity(params.relation_slot_count());
                for (i, w) in params.w1.iter().enumerate() {
                    pinvs.push(pseudo_inverse(w, &format!("W1 of relation {i}"))?);
                }
                self.pinv_w1 = pinvs;
            }
            MMode::Learned => {
                for &(prev, next) in needed_pairs {
                    let key = (prev.0, next.0);
                    if self.pairs.contains_key(&key) {
                        continue;
                    }
                    let pinv =
                        pseudo_inverse(params.w1(next), &format!("W1 of relation {}", next.0))?;
                    self.pairs.insert(key, params.w2(prev) * pinv);
                }
            }
        }
        self.epoch_stamp = params.epoch;
        Ok(())
    }

    fn check_fresh(&self, params: &ModelParams) -> Result<()> {
        if self.epoch_stamp != params.epoch {
            return Err(Error::Contract(format!(
                "stale transition cache: stamped epoch {}, parameters at epoch {}",
                self.epoch_stamp, params.epoch
            )));
        }
        Ok(())
    }

    /// `M(next, prev)`: maps the head space of `next` into the tail space of
    /// `prev`, satisfying `M W1[next] = W2[prev]` when `W1[next]` has full
    /// rank.
    fn transition(
        &self,
        params: &ModelParams,
        prev: RelationId,
        next: RelationId,
    ) -> Result<DMatrix<f64>> {
        match self.mode {
            MMode::Derived => Ok(params.w2(prev) * &self.pinv_w1[next.index()]),
            MMode::Learned => self.pairs.get(&(prev.0, next.0)).cloned().ok_or_else(|| {
                Error::Contract(format!(
                    "transition matrix for pair ({}, {}) was never initialized",
                    prev.0, next.0
                ))
            }),
        }
    }
}

/// Spec-level constructor for a fresh cache.
pub fn refresh_transition_cache(
    params: &ModelParams,
    mode: MMode,
    needed_pairs: &BTreeSet<(RelationId, RelationId)>,
) -> Result<TransitionCache> {
    TransitionCache::new(params, mode, needed_pairs)
}

/// Sequence matrices `S^1..S^n` and the path projection `W_p` for one path.
#[derive(Debug, Clone)]
pub struct PathSystem {
    pub seq: Vec<DMatrix<f64>>,
    pub w_p: DMatrix<f64>,
}

impl PathSystem {
    /// The pre-norm energy vector `W1[r1] h + sum_i S^i r_i - W_p t`.
    pub fn energy_vec(
        &self,
        params: &ModelParams,
        path: &RelationPath,
        h: EntityId,
        t: EntityId,
    ) -> DVector<f64> {
        let rels = path.relations();
        let mut u = params.w1(rels[0]) * params.entity(h);
        u += params.relation(rels[0]); // S^1 = I
        for (i, &r) in rels.iter().enumerate().skip(1) {
            u += &self.seq[i] * params.relation(r);
        }
        u -= &self.w_p * params.entity(t);
        u
    }
}

/// Builds `S^i = T_1 ... T_i` (left-to-right) and `W_p = S^n W2[r_n]`.
/// Errors if the cache is stale for the parameters' epoch.
pub fn sequence_matrices(
    params: &ModelParams,
    cache: &TransitionCache,
    path: &RelationPath,
) -> Result<PathSystem> {
    cache.check_fresh(params)?;
    let rels = path.relations();
    assert!(!rels.is_empty(), "path must have at least one relation");
    let mut seq = Vec::with_capacity(rels.len());
    let mut s = DMatrix::identity(params.dim, params.dim);
    seq.push(s.clone());
    for k in 1..rels.len() {
        let t_k = cache.transition(params, rels[k - 1], rels[k])?;
        s *= t_k;
        seq.push(s.clone());
    }
    let w_p = if rels.len() == 1 {
        params.w2(rels[0]).clone()
    } else {
        &seq[rels.len() - 1] * params.w2(rels[rels.len() - 1])
    };
    Ok(PathSystem { seq, w_p })
}

/// Pre-norm vector of the direct (1-step) energy:
/// `W1[r] h + r - W2[r] t`.
pub fn direct_energy_vec(
    params: &ModelParams,
    h: EntityId,
    r: RelationId,
    t: EntityId,
) -> DVector<f64> {
    let mut u = params.w1(r) * params.entity(h);
    u += params.relation(r);
    u -= params.w2(r) * params.entity(t);
    u
}

/// Direct triple energy `|| W1[r] h + r - W2[r] t ||`.
pub fn triple_energy(params: &ModelParams, h: EntityId, r: RelationId, t: EntityId) -> f64 {
    params.norm.eval(&direct_energy_vec(params, h, r, t))
}

/// Ordered-path energy. For single-relation paths this is identical (to the
/// bit) to [`triple_energy`].
pub fn path_energy(
    params: &ModelParams,
    cache: &TransitionCache,
    h: EntityId,
    path: &RelationPath,
    t: EntityId,
) -> Result<f64> {
    cache.check_fresh(params)?;
    if path.len() == 1 {
        return Ok(triple_energy(params, h, path.relations()[0], t));
    }
    let system = sequence_matrices(params, cache, path)?;
    Ok(params.norm.eval(&system.energy_vec(params, path, h, t)))
}

/// Minimum path energy over the i-step instances; `(inf, None)` when the
/// step has no retained paths.
pub fn step_pooled_energy(
    params: &ModelParams,
    cache: &TransitionCache,
    h: EntityId,
    set: &PathSet,
    step: usize,
    t: EntityId,
) -> Result<(f64, Option<RelationPath>)> {
    let mut best = f64::INFINITY;
    let mut argmin = None;
    for inst in set.step(step) {
        let e = path_energy(params, cache, h, &inst.path, t)?;
        if e < best {
            best = e;
            argmin = Some(inst.path.clone());
        }
    }
    Ok((best, argmin))
}

/// Which branch won the final min-pooling.
#[derive(Debug, Clone, PartialEq)]
pub enum PoolWinner {
    Direct,
    Path { step: usize, path: RelationPath },
}

/// Direct energy, per-step pooled energies, and their minimum.
#[derive(Debug, Clone)]
pub struct EnergyBreakdown {
    pub direct: f64,
    /// Index `i` holds the pooled energy and argmin of step `i + 1`; `None`
    /// when no path of that length survived (the infinite sentinel).
    pub per_step: Vec<Option<(f64, RelationPath)>>,
    pub final_energy: f64,
    pub winner: PoolWinner,
}

/// Two-level pooled energy: `min(direct, pooled step 1, pooled step 2, ...)`.
/// Ties prefer the direct term, then the smaller step count, then list order.
pub fn final_energy(
    params: &ModelParams,
    cache: &TransitionCache,
    h: EntityId,
    r: RelationId,
    t: EntityId,
    set: &PathSet,
) -> Result<EnergyBreakdown> {
    let direct = triple_energy(params, h, r, t);
    let mut best = direct;
    let mut winner = PoolWinner::Direct;
    let mut per_step = Vec::with_capacity(set.max_steps());
    for step in 1..=set.max_steps() {
        let (e, argmin) = step_pooled_energy(params, cache, h, set, step, t)?;
        match argmin {
            Some(path) => {
                if e < best {
                    best = e;
                    winner = PoolWinner::Path {
                        step,
                        path: path.clone(),
                    };
                }
                per_step.push(Some((e, path)));
            }
            None => per_step.push(None),
        }
    }
    Ok(EnergyBreakdown {
        direct,
        per_step,
        final_energy: best,
        winner,
    })
}

//! Relation-path mining: bounded walk enumeration, resource-allocation
//! reliability, path/relation co-occurrence statistics, and filtered
//! per-step path sets.

pub mod cache;

pub use cache::{EvalQuery, PathCache, Side};

use std::collections::{BTreeMap, BTreeSet};

use crate::kg::{EntityId, KnowledgeGraph, RelationId};

/// Hard ceiling on configurable path length.
pub const MAX_PATH_STEPS: usize = 3;

/// An ordered relation sequence. `[r1, r2]` and `[r2, r1]` are distinct keys
/// everywhere; equality is sequence equality.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationPath(Vec<RelationId>);

impl RelationPath {
    pub fn new(relations: Vec<RelationId>) -> Self {
        RelationPath(relations)
    }

    pub fn single(r: RelationId) -> Self {
        RelationPath(vec![r])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn relations(&self) -> &[RelationId] {
        &self.0
    }

    pub fn display(&self, graph: &KnowledgeGraph) -> String {
        self.0
            .iter()
            .map(|&r| graph.relation_label(r))
            .collect::<Vec<_>>()
            .join(" -> ")
    }
}

/// Mining knobs; defaults follow the reference pipeline configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PathConfig {
    /// Maximum relation-path length (1..=[`MAX_PATH_STEPS`]).
    pub max_steps: usize,
    /// Nodes with more outgoing train edges than this are not expanded
    /// during enumeration; keeps hub entities from exploding preprocessing.
    pub degree_cap: usize,
    /// Paths with reliability below this floor are dropped from path sets.
    pub reliability_floor: f64,
}

impl Default for PathConfig {
    fn default() -> Self {
        PathConfig {
            max_steps: 2,
            degree_cap: 400,
            reliability_floor: 0.01,
        }
    }
}

/// One walk found by [`enumerate_paths`]: the relation sequence plus the
/// intermediate nodes between the endpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Walk {
    pub path: RelationPath,
    pub via: Vec<EntityId>,
}

/// Result of walk enumeration; `capped_expansions` counts nodes skipped by
/// the degree cap.
#[derive(Debug, Clone, Default)]
pub struct Enumeration {
    pub walks: Vec<Walk>,
    pub capped_expansions: u64,
}

/// Every distinct (relation-sequence, node-sequence) walk from `h` to `t` of
/// length 1..=max_steps over train edges. Walks may revisit nodes.
pub fn enumerate_paths(
    graph: &KnowledgeGraph,
    h: EntityId,
    t: EntityId,
    cfg: &PathConfig,
) -> Enumeration {
    let mut out = Enumeration::default();
    let mut rels = Vec::with_capacity(cfg.max_steps);
    let mut via = Vec::with_capacity(cfg.max_steps);
    walk_dfs(graph, h, t, cfg, &mut rels, &mut via, &mut out);
    out
}

fn walk_dfs(
    graph: &KnowledgeGraph,
    node: EntityId,
    target: EntityId,
    cfg: &PathConfig,
    rels: &mut Vec<RelationId>,
    via: &mut Vec<EntityId>,
    out: &mut Enumeration,
) {
    if rels.len() == cfg.max_steps {
        return;
    }
    let edges = graph.out_edges(node);
    if edges.len() > cfg.degree_cap {
        out.capped_expansions += 1;
        return;
    }
    for &(r, next) in edges {
        rels.push(r);
        if next == target {
            out.walks.push(Walk {
                path: RelationPath::new(rels.clone()),
                via: via.clone(),
            });
        }
        via.push(next);
        walk_dfs(graph, next, target, cfg, rels, via, out);
        via.pop();
        rels.pop();
    }
}

/// Resource-allocation flow from `h` along `path`: start with one unit at
/// `h`; at each step a node's resource is split equally over its outgoing
/// edges carrying the step's relation. Returns the terminal distribution.
///
/// Iteration is in ascending entity order so results are reproducible
/// bit-for-bit.
pub fn pcra_flow(
    graph: &KnowledgeGraph,
    h: EntityId,
    path: &RelationPath,
) -> BTreeMap<EntityId, f64> {
    let mut resource = BTreeMap::new();
    resource.insert(h, 1.0f64);
    for &rel in path.relations() {
        let mut next: BTreeMap<EntityId, f64> = BTreeMap::new();
        for (&node, &amount) in &resource {
            let matching: Vec<EntityId> = graph
                .out_edges(node)
                .iter()
                .filter(|&&(r, _)| r == rel)
                .map(|&(_, m)| m)
                .collect();
            if matching.is_empty() {
                continue;
            }
            let share = amount / matching.len() as f64;
            for m in matching {
                *next.entry(m).or_insert(0.0) += share;
            }
        }
        resource = next;
        if resource.is_empty() {
            break;
        }
    }
    resource
}

/// `Pr(p | h, t)`: the resource reaching `t` after flowing from `h` along
/// `path`; zero when the path does not connect the pair.
pub fn pcra_reliability(
    graph: &KnowledgeGraph,
    h: EntityId,
    path: &RelationPath,
    t: EntityId,
) -> f64 {
    pcra_flow(graph, h, path).get(&t).copied().unwrap_or(0.0)
}

/// Corpus counts behind the path confidence `Pr(r | p)`.
///
/// `pair_count[p]` is the number of ordered entity pairs connected by
/// path-type `p` (each pair counted once regardless of walk multiplicity);
/// `co_count[(r, p)]` the number of those pairs that also carry a direct
/// `r` edge.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PathStats {
    pub pair_count: BTreeMap<RelationPath, u64>,
    pub co_count: BTreeMap<(RelationId, RelationPath), u64>,
}

impl PathStats {
    /// `Pr(r | p) = N(r, p) / N(p)`; zero when `p` was never observed.
    pub fn confidence(&self, r: RelationId, p: &RelationPath) -> f64 {
        let Some(&pairs) = self.pair_count.get(p) else {
            return 0.0;
        };
        let co = self.co_count.get(&(r, p.clone())).copied().unwrap_or(0);
        co as f64 / pairs as f64
    }

    fn merge(mut self, other: PathStats) -> PathStats {
        for (k, v) in other.pair_count {
            *self.pair_count.entry(k).or_insert(0) += v;
        }
        for (k, v) in other.co_count {
            *self.co_count.entry(k).or_insert(0) += v;
        }
        self
    }
}

/// Walks from one source grouped by endpoint, each endpoint holding its
/// distinct path-types.
fn path_types_from(
    graph: &KnowledgeGraph,
    source: EntityId,
    cfg: &PathConfig,
) -> (BTreeMap<EntityId, BTreeSet<RelationPath>>, u64) {
    let mut by_endpoint: BTreeMap<EntityId, BTreeSet<RelationPath>> = BTreeMap::new();
    let mut capped = 0u64;
    let mut rels = Vec::with_capacity(cfg.max_steps);
    collect_types(graph, source, cfg, &mut rels, &mut by_endpoint, &mut capped);
    (by_endpoint, capped)
}

fn collect_types(
    graph: &KnowledgeGraph,
    node: EntityId,
    cfg: &PathConfig,
    rels: &mut Vec<RelationId>,
    out: &mut BTreeMap<EntityId, BTreeSet<RelationPath>>,
    capped: &mut u64,
) {
    if rels.len() == cfg.max_steps {
        return;
    }
    let edges = graph.out_edges(node);
    if edges.len() > cfg.degree_cap {
        *capped += 1;
        return;
    }
    for &(r, next) in edges {
        rels.push(r);
        out.entry(next)
            .or_default()
            .insert(RelationPath::new(rels.clone()));
        collect_types(graph, next, cfg, rels, out, capped);
        rels.pop();
    }
}

/// Counts, over every ordered entity pair connected by some path of length
/// <= max_steps, the distinct path-types connecting it and the relations
/// directly linking it. Partitioned by source entity across rayon workers;
/// partial counts merge deterministically.
pub fn build_path_stats(graph: &KnowledgeGraph, cfg: &PathConfig) -> PathStats {
    use rayon::prelude::*;

    (0..graph.entity_count() as u32)
        .into_par_iter()
        .map(|e| {
            let source = EntityId(e);
            let (by_endpoint, _) = path_types_from(graph, source, cfg);
            let mut local = PathStats::default();
            for (endpoint, types) in by_endpoint {
                let direct: BTreeSet<RelationId> = graph
                    .out_edges(source)
                    .iter()
                    .filter(|&&(_, m)| m == endpoint)
                    .map(|&(r, _)| r)
                    .collect();
                for p in types {
                    *local.pair_count.entry(p.clone()).or_insert(0) += 1;
                    for &r in &direct {
                        *local.co_count.entry((r, p.clone())).or_insert(0) += 1;
                    }
                }
            }
            local
        })
        .reduce(PathStats::default, PathStats::merge)
}

/// One retained path between a fixed entity pair, with its reliability
/// `Pr(p|h,t)` and its confidence `Pr(r|p)` relative to the query relation.
#[derive(Debug, Clone, PartialEq)]
pub struct PathInstance {
    pub path: RelationPath,
    pub reliability: f64,
    pub confidence: f64,
}

/// Retained paths for one (h, r, t) query, grouped by step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PathSet {
    by_step: Vec<Vec<PathInstance>>,
}

impl PathSet {
    pub fn empty(max_steps: usize) -> Self {
        PathSet {
            by_step: vec![Vec::new(); max_steps],
        }
    }

    /// Instances with exactly `step` relations (1-based).
    pub fn step(&self, step: usize) -> &[PathInstance] {
        self.by_step
            .get(step.wrapping_sub(1))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn max_steps(&self) -> usize {
        self.by_step.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_step.iter().all(Vec::is_empty)
    }

    pub fn instance_count(&self) -> usize {
        self.by_step.iter().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PathInstance> {
        self.by_step.iter().flatten()
    }

    /// Normalizer `Z_i`: sum of reliability * confidence over the retained
    /// i-step instances.
    pub fn normalizer(&self, step: usize) -> f64 {
        self.step(step)
            .iter()
            .map(|inst| inst.reliability * inst.confidence)
            .sum()
    }

    /// Appends an instance under its step count, growing the step table if
    /// needed.
    pub fn insert(&mut self, inst: PathInstance) {
        let step = inst.path.len();
        if self.by_step.len() < step {
            self.by_step.resize(step, Vec::new());
        }
        self.by_step[step - 1].push(inst);
    }
}

/// Assembles the retained path set for a query: enumerate walks `h -> t`,
/// keep one instance per distinct path-type, attach reliability and
/// confidence, and drop instances with zero confidence or reliability below
/// the floor. In training mode the walk consisting of the queried edge
/// itself is excluded so a triple cannot predict itself.
pub fn filtered_path_set(
    graph: &KnowledgeGraph,
    stats: &PathStats,
    h: EntityId,
    r: RelationId,
    t: EntityId,
    cfg: &PathConfig,
    training_mode: bool,
) -> PathSet {
    let walks = enumerate_paths(graph, h, t, cfg).walks;
    let mut types: BTreeSet<RelationPath> = BTreeSet::new();
    for walk in walks {
        if training_mode && walk.path.len() == 1 && walk.path.relations()[0] == r {
            continue;
        }
        types.insert(walk.path);
    }
    build_set_from_types(graph, stats, h, r, t, cfg, types)
}

fn build_set_from_types(
    graph: &KnowledgeGraph,
    stats: &PathStats,
    h: EntityId,
    r: RelationId,
    t: EntityId,
    cfg: &PathConfig,
    types: BTreeSet<RelationPath>,
) -> PathSet {
    let mut set = PathSet::empty(cfg.max_steps);
    for path in types {
        let confidence = stats.confidence(r, &path);
        if confidence <= 0.0 {
            continue;
        }
        let reliability = pcra_reliability(graph, h, &path, t);
        if reliability < cfg.reliability_floor {
            continue;
        }
        set.insert(PathInstance {
            path,
            reliability,
            confidence,
        });
    }
    set
}

/// All path-types out of `h` with their endpoint reliabilities, mined in a
/// single pass. Used to build evaluation path sets for every candidate tail
/// at once; reliabilities are computed with the same flow routine as
/// [`pcra_reliability`].
pub fn mine_from_source(
    graph: &KnowledgeGraph,
    h: EntityId,
    cfg: &PathConfig,
) -> BTreeMap<EntityId, Vec<(RelationPath, f64)>> {
    let (by_endpoint, _) = path_types_from(graph, h, cfg);
    let mut all_types: BTreeSet<RelationPath> = BTreeSet::new();
    for types in by_endpoint.values() {
        all_types.extend(types.iter().cloned());
    }
    let mut flows: BTreeMap<&RelationPath, BTreeMap<EntityId, f64>> = BTreeMap::new();
    for p in &all_types {
        flows.insert(p, pcra_flow(graph, h, p));
    }
    let mut out: BTreeMap<EntityId, Vec<(RelationPath, f64)>> = BTreeMap::new();
    for (endpoint, types) in by_endpoint {
        let entry = out.entry(endpoint).or_default();
        for p in types {
            let reliability = flows[&p].get(&endpoint).copied().unwrap_or(0.0);
            entry.push((p, reliability));
        }
    }
    out
}

/// Filtered path sets for every candidate tail of a `(h, r, ?)` query.
pub fn candidate_tail_sets(
    graph: &KnowledgeGraph,
    stats: &PathStats,
    h: EntityId,
    r: RelationId,
    cfg: &PathConfig,
) -> Vec<(EntityId, PathSet)> {
    let mined = mine_from_source(graph, h, cfg);
    let mut out = Vec::new();
    for (candidate, typed) in mined {
        let mut set = PathSet::empty(cfg.max_steps);
        for (path, reliability) in typed {
            let confidence = stats.confidence(r, &path);
            if confidence <= 0.0 || reliability < cfg.reliability_floor {
                continue;
            }
            set.insert(PathInstance {
                path,
                reliability,
                confidence,
            });
        }
        if !set.is_empty() {
            out.push((candidate, set));
        }
    }
    out
}

/// Filtered path sets for every candidate head of a `(?, r, t)` query.
///
/// Candidates are discovered by walking out of `t`; a walk `t -s1-> m -s2-> e`
/// corresponds to the candidate-side path `[s2^-1, s1^-1]` from `e` to `t`
/// because the graph stores every reverse edge. Reliabilities are then
/// computed in the forward direction `e -> t`.
pub fn candidate_head_sets(
    graph: &KnowledgeGraph,
    stats: &PathStats,
    r: RelationId,
    t: EntityId,
    cfg: &PathConfig,
) -> Vec<(EntityId, PathSet)> {
    let (by_endpoint, _) = path_types_from(graph, t, cfg);
    let mut out = Vec::new();
    for (candidate, types) in by_endpoint {
        let forward_types: BTreeSet<RelationPath> = types
            .into_iter()
            .map(|p| {
                RelationPath::new(
                    p.relations()
                        .iter()
                        .rev()
                        .map(|rel| rel.reverse())
                        .collect(),
                )
            })
            .collect();
        let set = build_set_from_types(graph, stats, candidate, r, t, cfg, forward_types);
        if !set.is_empty() {
            out.push((candidate, set));
        }
    }
    out
}

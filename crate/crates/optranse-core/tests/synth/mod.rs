//! Shared generator and runner for the synthetic order-sensitivity
//! experiments: two composition rules over the same relation pair in
//! opposite orders, private chains, a hub that collapses additive
//! geometry, and a little clutter.

use optranse_core::eval::{rank_split, RankResult};
use optranse_core::kg::{build_graph, KnowledgeGraph, RawTriple, Split};
use optranse_core::model::{MMode, Norm};
use optranse_core::path::{PathCache, PathConfig, Side};
use optranse_core::train::{train_model, TrainConfig};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[derive(Debug, Clone)]
pub struct SynthSpec {
    /// Number of private composition chains (5 entities each).
    pub chains: usize,
    /// Chains whose r3/r4 facts are held out for testing.
    pub held_out: usize,
    /// Train chains that carry direct r3/r4 facts (the rest contribute
    /// only their edges).
    pub fact_chains: usize,
    /// Extra entities with random noise edges.
    pub clutter: usize,
    /// Random r1/r2 edges between junk entities: non-compositional uses of
    /// the chain relations that pull them away from their compositional
    /// alignment unless path training holds it.
    pub junk: usize,
    pub seed: u64,
}

/// Chains: x -r1-> y -r2-> z with rule r3(x, z), and x -r2-> u -r1-> v with
/// rule r4(x, v). Every x also points at a shared hub, which forces an
/// additive (identity-matrix) model to collapse the x positions.
pub fn build_order_kg(spec: &SynthSpec) -> KnowledgeGraph {
    assert!(spec.held_out + spec.fact_chains <= spec.chains);
    let mut rng = StdRng::seed_from_u64(spec.seed);
    let mut train: Vec<RawTriple> = Vec::new();
    let mut test: Vec<RawTriple> = Vec::new();

    for i in 0..spec.chains {
        train.push((format!("x{i}"), "r1".into(), format!("y{i}")));
        train.push((format!("y{i}"), "r2".into(), format!("z{i}")));
        train.push((format!("x{i}"), "r2".into(), format!("u{i}")));
        train.push((format!("u{i}"), "r1".into(), format!("v{i}")));
        train.push((format!("x{i}"), "hub_link".into(), "hub".into()));

        let held = i >= spec.chains - spec.held_out;
        let has_facts = i < spec.fact_chains;
        if held {
            test.push((format!("x{i}"), "r3".into(), format!("z{i}")));
            test.push((format!("x{i}"), "r4".into(), format!("v{i}")));
        } else if has_facts {
            train.push((format!("x{i}"), "r3".into(), format!("z{i}")));
            train.push((format!("x{i}"), "r4".into(), format!("v{i}")));
        }
    }

    // Clutter: random edges between noise entities and chain tails.
    for c in 0..spec.clutter {
        let i = rng.random_range(0..spec.chains);
        let j = rng.random_range(0..spec.chains);
        train.push((format!("n{c}"), "noise".into(), format!("z{i}")));
        train.push((format!("n{c}"), "noise".into(), format!("v{j}")));
    }

    // Junk: r1/r2 edges in unrelated contexts, over a small entity pool.
    let pool = 30;
    for k in 0..spec.junk {
        let a = rng.random_range(0..pool);
        let b = rng.random_range(0..pool);
        let rel = if k % 2 == 0 { "r1" } else { "r2" };
        train.push((format!("j{a}"), rel.into(), format!("j{b}")));
    }

    let (mut graph, _) = build_graph(&train, &[], &test);
    graph.add_reverse_relations().unwrap();
    graph
}

pub fn experiment_config(dim: usize, lr: f64, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        dim,
        learning_rate: lr,
        margin: 2.0,
        step_margins: vec![2.0, 2.5],
        lambda: 0.01,
        epochs,
        batch_size: 64,
        norm: Norm::L1,
        seed,
        max_steps: 2,
        warm_start_epochs: epochs / 3,
        m_mode: MMode::Derived,
        negatives_per_positive: 1,
        freeze_matrices: false,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExperimentMetrics {
    /// Filtered Hits@1 over tail-side queries of the held-out triples.
    pub tail_hits_at_1: f64,
    /// Filtered Hits@10 over both sides of the held-out triples.
    pub hits_at_10: f64,
}

pub fn metrics_of(results: &[RankResult]) -> ExperimentMetrics {
    let tail: Vec<&RankResult> = results.iter().filter(|r| r.side == Side::Tail).collect();
    let tail_hits_at_1 =
        tail.iter().filter(|r| r.filtered_rank <= 1).count() as f64 / tail.len() as f64;
    let hits_at_10 =
        results.iter().filter(|r| r.filtered_rank <= 10).count() as f64 / results.len() as f64;
    ExperimentMetrics {
        tail_hits_at_1,
        hits_at_10,
    }
}

/// Mines paths, trains under `config`, and ranks the held-out split.
pub fn run_experiment(graph: &KnowledgeGraph, config: &TrainConfig) -> ExperimentMetrics {
    let path_cfg = PathConfig::default();
    let cache = PathCache::build(graph, &path_cfg, &[Split::Test]).unwrap();
    let (params, _, tcache) = train_model(graph, Some(&cache), config).unwrap();
    let results = rank_split(&params, &tcache, graph, &cache, Split::Test).unwrap();
    metrics_of(&results)
}

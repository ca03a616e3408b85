mod oracles;

use consensus_prune::consensus::{
    aggregate_ranks, prune_iteration, scores_to_ranks, select_victim, CheckpointSource, ConsensusError,
    ConsensusScore, RankTable, RepresentationSource, ScoreRow,
};
use consensus_prune::metrics::{
    bures_distance, default_metric_set, gaussian_summary, interpolated_distance, linear_cka, procrustes_distance,
    MetricDescriptor, Orientation, RepresentationMatrix,
};
use consensus_prune::net::{ArchitectureSpec, LayerRef, Model, ResnetShape, TrainingMeta};
use consensus_prune::surgery::{eligible_layers, remove_block};
use nalgebra::DMatrix;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn layer(i: usize) -> LayerRef {
    LayerRef::new(1 + (i / 4) as u32, 1 + (i % 4) as u32)
}

fn rows(metric: usize, orientation: Orientation, raw: &[f64]) -> Vec<ScoreRow> {
    raw.iter()
        .enumerate()
        .map(|(i, &v)| ScoreRow {
            layer_id: layer(i),
            metric_name: format!("m{metric}"),
            raw_score: v,
            orientation,
        })
        .collect()
}

fn orient(similar: bool) -> Orientation {
    if similar {
        Orientation::Similarity
    } else {
        Orientation::Distance
    }
}

/// Metric tables: `metrics × layers` raw scores plus an orientation per
/// metric. Small integers make ties common.
fn tables() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<bool>)> {
    (1..=8usize, 1..=5usize).prop_flat_map(|(k, m)| {
        let score = prop_oneof![(0..4i32).prop_map(f64::from), -5.0..5.0f64];
        (
            prop::collection::vec(prop::collection::vec(score, k), m),
            prop::collection::vec(any::<bool>(), m),
        )
    })
}

fn run(raw: &[Vec<f64>], similar: &[bool]) -> (Vec<RankTable>, ConsensusScore, LayerRef) {
    let tables: Vec<RankTable> = raw
        .iter()
        .zip(similar)
        .enumerate()
        .map(|(i, (r, &s))| scores_to_ranks(&rows(i, orient(s), r)).unwrap())
        .collect();
    let consensus = aggregate_ranks(&tables).unwrap();
    let victim = select_victim(&consensus).unwrap();
    (tables, consensus, victim)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1200))]

    #[test]
    fn victim_equals_brute_force((raw, similar) in tables()) {
        let (tables, _, victim) = run(&raw, &similar);
        let k = raw[0].len();
        for t in &tables {
            let mut r: Vec<usize> = t.ranks.values().copied().collect();
            r.sort();
            prop_assert_eq!(r, (1..=k).collect::<Vec<_>>());
        }
        let effective: Vec<Vec<f64>> = raw
            .iter()
            .zip(&similar)
            .map(|(r, &s)| r.iter().map(|&v| if s { -v } else { v }).collect())
            .collect();
        prop_assert_eq!(victim, layer(oracles::brute_force_victim(&effective)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn monotone_rescaling_changes_nothing(
        (raw, similar) in tables(),
        which in any::<prop::sample::Index>(),
        map in 0..4usize,
        a in 0.1..3.0f64,
        b in -2.0..2.0f64,
    ) {
        let m = which.index(raw.len());
        let f = |x: f64| match map {
            0 => a * x + b,
            1 => (a * x).exp(),
            2 => x * x * x + a * x,
            _ => (x / 5.0).atan() * a + b,
        };
        let mut rescaled = raw.clone();
        rescaled[m] = raw[m].iter().map(|&x| f(x)).collect();
        let (t1, c1, v1) = run(&raw, &similar);
        let (t2, c2, v2) = run(&rescaled, &similar);
        prop_assert_eq!(&t1[m].ranks, &t2[m].ranks);
        prop_assert_eq!(c1, c2);
        prop_assert_eq!(v1, v2);
    }

    #[test]
    fn aggregation_equals_double_loop(
        ranks in prop::collection::vec(Just((1..=5usize).collect::<Vec<_>>()).prop_shuffle(), 4),
    ) {
        let tables: Vec<RankTable> = ranks
            .iter()
            .enumerate()
            .map(|(m, r)| RankTable {
                metric_name: format!("m{m}"),
                ranks: r.iter().enumerate().map(|(i, &v)| (layer(i), v)).collect(),
            })
            .collect();
        let totals = aggregate_ranks(&tables).unwrap().totals;
        for l in 0..5 {
            let mut sum = 0;
            for r in &ranks {
                sum += r[l];
            }
            prop_assert_eq!(totals[&layer(l)], sum);
        }
    }
}

#[test]
fn totals_select_lowest_with_tie_break() {
    let score = |t: &[usize]| ConsensusScore {
        totals: t.iter().enumerate().map(|(i, &v)| (layer(i), v)).collect(),
    };
    assert_eq!(select_victim(&score(&[3, 4, 5])).unwrap(), layer(0));
    assert_eq!(select_victim(&score(&[3, 3, 6])).unwrap(), layer(0));
    assert_eq!(select_victim(&score(&[6, 3, 3])).unwrap(), layer(1));
    assert!(matches!(select_victim(&score(&[])), Err(ConsensusError::NoEligibleLayers)));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let t: Vec<usize> = (0..6).map(|_| rng.gen_range(4..12)).collect();
        let mut best = 0;
        for i in 1..6 {
            if t[i] < t[best] {
                best = i;
            }
        }
        assert_eq!(select_victim(&score(&t)).unwrap(), layer(best));
    }
}

#[test]
fn hand_sum_of_two_tables() {
    let t = |name: &str, r: [usize; 3]| RankTable {
        metric_name: name.into(),
        ranks: r.iter().enumerate().map(|(i, &v)| (layer(i), v)).collect(),
    };
    let c = aggregate_ranks(&[t("a", [1, 3, 2]), t("b", [2, 1, 3])]).unwrap();
    assert_eq!(c.totals.values().copied().collect::<Vec<_>>(), vec![3, 4, 5]);
    let single = aggregate_ranks(&[t("a", [1, 3, 2])]).unwrap();
    assert_eq!(single.totals.values().copied().collect::<Vec<_>>(), vec![1, 3, 2]);
    let mut short = t("c", [1, 2, 3]);
    short.ranks.remove(&layer(2));
    assert!(matches!(
        aggregate_ranks(&[t("a", [1, 3, 2]), short]),
        Err(ConsensusError::InconsistentTables(_))
    ));
}

#[test]
fn distance_ties_go_to_the_smaller_layer() {
    let t = scores_to_ranks(&rows(0, Orientation::Distance, &[0.2, 0.2])).unwrap();
    assert_eq!(t.ranks[&layer(0)], 1);
    assert_eq!(t.ranks[&layer(1)], 2);
}

/// Serves fixed matrices instead of running a network.
struct Fixed {
    reference: RepresentationMatrix,
    candidates: BTreeMap<LayerRef, RepresentationMatrix>,
}

impl RepresentationSource for Fixed {
    fn reference(&mut self) -> Result<RepresentationMatrix, ConsensusError> {
        Ok(self.reference.clone())
    }

    fn candidate(&mut self, layer: LayerRef) -> Result<RepresentationMatrix, ConsensusError> {
        self.candidates.get(&layer).cloned().ok_or(ConsensusError::Candidate {
            layer,
            message: "not available".into(),
        })
    }
}

fn random_rep(n: usize, d: usize, rng: &mut ChaCha8Rng) -> RepresentationMatrix {
    RepresentationMatrix::from_matrix(DMatrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0))).unwrap()
}

#[test]
fn exact_reproduction_wins_under_every_metric() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let reference = random_rep(20, 3, &mut rng);
    let mut candidates = BTreeMap::new();
    candidates.insert(layer(0), random_rep(20, 3, &mut rng));
    candidates.insert(layer(1), reference.clone());
    let mut src = Fixed { reference, candidates };
    let out = prune_iteration(&mut src, &[layer(0), layer(1)], &default_metric_set()).unwrap();
    assert_eq!(out.victim, layer(1));
    for t in &out.tables {
        assert_eq!(t.ranks[&layer(1)], 1, "{}", t.metric_name);
    }
}

#[test]
fn single_candidate_is_always_the_victim() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let reference = random_rep(10, 2, &mut rng);
    let mut candidates = BTreeMap::new();
    candidates.insert(layer(3), random_rep(10, 2, &mut rng));
    let mut src = Fixed { reference, candidates };
    let out = prune_iteration(&mut src, &[layer(3)], &default_metric_set()).unwrap();
    assert_eq!(out.victim, layer(3));
    let err = prune_iteration(&mut src, &[layer(3), layer(5)], &default_metric_set()).unwrap_err();
    assert!(matches!(err, ConsensusError::Candidate { layer: l, .. } if l == layer(5)));
    assert!(matches!(
        prune_iteration(&mut src, &[], &default_metric_set()),
        Err(ConsensusError::NoEligibleLayers)
    ));
}

fn toy() -> (consensus_prune::net::ModelCheckpoint, Array2<f32>) {
    let spec = ArchitectureSpec::resnet_cifar(&ResnetShape {
        height: 8,
        width: 8,
        channels: 3,
        stem_width: 4,
        widths: vec![4, 8],
        blocks_per_stage: vec![3, 3],
        classes: 5,
    })
    .unwrap();
    let mut model = Model::<f32>::build(&spec, 21).unwrap();
    let ckpt = model.to_checkpoint(TrainingMeta::default());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let probes = Array2::from_shape_fn((48, spec.input.numel()), |_| rng.gen_range(0.0..1.0f32));
    (ckpt, probes)
}

#[test]
fn toy_resnet_victim_matches_offline_recomputation() {
    let (ckpt, probes) = toy();
    let eligible = eligible_layers(&ckpt.architecture).eligible;
    assert_eq!(eligible.len(), 4);
    let metrics = default_metric_set();
    let mut src = CheckpointSource::new(&ckpt, &probes);
    let out = prune_iteration(&mut src, &eligible, &metrics).unwrap();

    let features = |c: &consensus_prune::net::ModelCheckpoint| {
        let f = Model::<f32>::from_checkpoint(c).unwrap().extract(probes.view(), 16);
        RepresentationMatrix::from_matrix(DMatrix::from_fn(f.nrows(), f.ncols(), |i, j| f[[i, j]] as f64)).unwrap()
    };
    let reference = features(&ckpt);
    let score = |m: &MetricDescriptor, cand: &RepresentationMatrix| -> f64 {
        let g = |r: &RepresentationMatrix| gaussian_summary(r, 1e-6).unwrap();
        match m.name.as_str() {
            "linear_cka" => -linear_cka(&reference, cand).unwrap(),
            "procrustes" => procrustes_distance(&reference, cand).unwrap(),
            "bures" => bures_distance(&g(&reference), &g(cand)).unwrap(),
            _ => interpolated_distance(&g(&reference), &g(cand), 0.5).unwrap(),
        }
    };
    let cands: Vec<RepresentationMatrix> = eligible
        .iter()
        .map(|&l| features(&remove_block(&ckpt, l).unwrap()))
        .collect();
    let effective: Vec<Vec<f64>> = metrics
        .iter()
        .map(|m| cands.iter().map(|c| score(m, c)).collect())
        .collect();
    let expected = eligible[oracles::brute_force_victim(&effective)];
    assert_eq!(out.victim, expected);

    let again = prune_iteration(&mut CheckpointSource::new(&ckpt, &probes), &eligible, &metrics).unwrap();
    assert_eq!(again, out);
    let audit = out.audit(1);
    assert_eq!(audit.raw_scores.len(), 4);
    assert_eq!(audit.totals.len(), 4);
    assert!(audit.totals.values().all(|&t| (4..=16).contains(&t)));
}

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeSet;
use std::io::Cursor;
use std::sync::Arc;

use msegnn::encoders::readout;
use msegnn::graphdata::{
    generate_synthetic, read_dataset, sample_episode, split_classes, write_dataset,
};
use msegnn::{
    Dataset, EncoderKind, Episode, ModelConfig, MseGnn, Shot, SplitRole, SyntheticConfig, Tape,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_dataset(seed: u64) -> Dataset {
    let cfg = SyntheticConfig {
        base_nodes_min: 10,
        base_nodes_max: 16,
        ..SyntheticConfig::default()
    };
    Dataset::new(generate_synthetic(6, 10, seed, &cfg).unwrap(), 6).unwrap()
}

fn model(kind: EncoderKind) -> MseGnn {
    MseGnn::new(ModelConfig {
        encoder: kind,
        hidden: 8,
        mask_hidden: 8,
        predictor_hidden: 8,
        ..ModelConfig::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn graph_embedding_and_mask_respect_node_order(seed in 0u64..1000, sage in any::<bool>()) {
        let ds = small_dataset(seed % 7);
        let kind = if sage { EncoderKind::GraphSage } else { EncoderKind::Gin };
        let model = model(kind);
        let params = model.init_params(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let split = split_classes(6, [6, 0, 0], 0).unwrap();
        let ep = sample_episode(&ds, &split, SplitRole::Train, 2, 2, 1, &mut rng).unwrap();
        let graph = &ep.query[0].graph;
        let mut perm: Vec<usize> = (0..graph.num_nodes()).collect();
        perm.shuffle(&mut rng);
        let permuted = graph.permuted(&perm);

        let tape = Tape::new();
        let bound = params.bind(&tape, &[], None);
        let ti = model.compute_task_info(&bound, &ep.support).unwrap();
        let embed = |g| readout(model.encode(&bound, &model.input(&tape, g)).unwrap(), None).unwrap().to_tensor();
        let (a, b) = (embed(graph), embed(&permuted));
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        let mask = |g| model.explain(&bound, &model.input(&tape, g), &ti).unwrap().to_tensor();
        let (ma, mb) = (mask(graph), mask(&permuted));
        for v in 0..graph.num_nodes() {
            prop_assert!((ma.data()[v] - mb.data()[perm[v]]).abs() < 1e-9);
        }
    }

    #[test]
    fn episodes_are_disjoint_and_balanced(seed in 0u64..1000, k in 1usize..4, q in 1usize..4) {
        let ds = small_dataset(3);
        let split = split_classes(6, [3, 1, 2], seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ep: Episode = sample_episode(&ds, &split, SplitRole::Train, 2, k, q, &mut rng).unwrap();
        let ids = |shots: &[Shot]| shots.iter().map(|s| s.graph.id).collect::<BTreeSet<_>>();
        prop_assert!(ids(&ep.support).is_disjoint(&ids(&ep.query)));
        prop_assert_eq!(ep.support.len(), 2 * k);
        prop_assert_eq!(ep.query.len(), 2 * q);
        for shot in ep.support.iter().chain(&ep.query) {
            prop_assert_eq!(ep.class_map[shot.label], shot.graph.label);
            prop_assert!(split.train_classes.contains(&shot.graph.label));
        }
        for c in 0..2 {
            prop_assert_eq!(ep.support.iter().filter(|s| s.label == c).count(), k);
        }
    }
}

#[test]
fn dataset_survives_a_write_read_cycle() {
    let ds = small_dataset(11).with_provenance(serde_json::json!({"source": "test"}));
    let mut buf = Vec::new();
    write_dataset(&ds, &mut buf).unwrap();
    let back = read_dataset(Cursor::new(&buf)).unwrap();
    assert_eq!(back.len(), ds.len());
    assert_eq!(back.provenance(), ds.provenance());
    for (a, b) in ds.graphs().iter().zip(back.graphs()) {
        assert_eq!(Arc::as_ref(a), Arc::as_ref(b));
    }
    let mut again = Vec::new();
    write_dataset(&back, &mut again).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn motif_nodes_carry_the_truth_mask() {
    let ds = small_dataset(2);
    for g in ds.graphs() {
        let truth = g.truth_mask().unwrap();
        assert!(truth.contains(&1));
        assert!(g.is_connected_subset(truth));
    }
}

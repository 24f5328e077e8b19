mod common;

use kgconsult_core::actor::ActorModel;
use kgconsult_core::bundle::{
    load_bundle, load_bundle_for, save_bundle, ModelBundle, ACTOR_FILE, DECISION_FILE,
    DIAGNOSIS_FILE, EMBEDDINGS_FILE,
};
use kgconsult_core::decision::DecisionModel;
use kgconsult_core::diagnosis::DiagnosisModel;
use kgconsult_core::graph::{generate_synthetic_graph, KnowledgeGraph, SynthParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FILES: [&str; 4] = [EMBEDDINGS_FILE, DIAGNOSIS_FILE, DECISION_FILE, ACTOR_FILE];

fn untrained(g: &KnowledgeGraph, seed: u64) -> ModelBundle {
    let k = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelBundle {
        fingerprint: g.fingerprint(),
        table: common::random_table(g, k, seed),
        diagnosis: DiagnosisModel::new(g, k, 12, 2, &mut rng),
        decision: DecisionModel::new(k, 12, &mut rng),
        actor: ActorModel::new(g, k, 12, &mut rng),
        configs: ["embeddings", "diagnosis", "decision", "actor"]
            .into_iter()
            .map(|kind| (kind.to_string(), serde_json::json!({ "seed": seed })))
            .collect(),
    }
}

fn bits(v: impl IntoIterator<Item = f64>) -> Vec<u64> {
    v.into_iter().map(f64::to_bits).collect()
}

fn assert_bitwise(a: &ModelBundle, b: &ModelBundle) {
    assert_eq!(
        bits(a.table.entity_vecs.iter().copied()),
        bits(b.table.entity_vecs.iter().copied())
    );
    assert_eq!(
        bits(a.table.relation_vecs.iter().copied()),
        bits(b.table.relation_vecs.iter().copied())
    );
    assert_eq!(
        bits(a.diagnosis.net.to_flat()),
        bits(b.diagnosis.net.to_flat())
    );
    assert_eq!(
        bits(a.decision.net.to_flat()),
        bits(b.decision.net.to_flat())
    );
    assert_eq!(bits(a.actor.net.to_flat()), bits(b.actor.net.to_flat()));
    assert_eq!(a, b);
}

#[test]
fn desk_bundle_round_trips_and_resaves_identically() {
    let g = common::desk();
    let b = untrained(&g, 1);
    let (one, two) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_bundle(&b, one.path()).unwrap();
    let loaded = load_bundle_for(one.path(), &g).unwrap();
    assert_bitwise(&b, &loaded);
    save_bundle(&loaded, two.path()).unwrap();
    for f in FILES {
        assert_eq!(
            std::fs::read(one.path().join(f)).unwrap(),
            std::fs::read(two.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let other = generate_synthetic_graph(&SynthParams {
        seed: 43,
        ..SynthParams::desk()
    })
    .unwrap();
    assert!(load_bundle_for(one.path(), &other).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn any_single_byte_change_is_detected(seed in any::<u64>(), file in 0usize..4, pos in any::<prop::sample::Index>(), xor in 1u8..=255) {
        let g = common::disjoint_stars(3, 2);
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&untrained(&g, seed), dir.path()).unwrap();
        let path = dir.path().join(FILES[file]);
        let mut bytes = std::fs::read(&path).unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= xor;
        std::fs::write(&path, &bytes).unwrap();
        prop_assert!(load_bundle(dir.path()).is_err());
    }

    #[test]
    fn truncation_is_detected(seed in any::<u64>(), file in 0usize..4, cut in any::<prop::sample::Index>()) {
        let g = common::disjoint_stars(3, 2);
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&untrained(&g, seed), dir.path()).unwrap();
        let path = dir.path().join(FILES[file]);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..cut.index(bytes.len())]).unwrap();
        prop_assert!(load_bundle(dir.path()).is_err());
    }
}

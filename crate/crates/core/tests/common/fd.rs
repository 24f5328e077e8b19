//! Finite-difference checks shared by the gradient tests and the acceptance run.
//! Each returns the worst relative error it saw.

use kgconsult_core::actor::{policy_gradient, policy_gradient_masked};
use kgconsult_core::graph::{Entity, EntityId, EntityKind, KnowledgeGraph, RelationId, Triple};
use kgconsult_core::tensor::{
    binary_cross_entropy, cross_entropy_softmax, finite_diff_check, Head, Matrix, Mlp3, Vector,
    DEFAULT_FD_STEP,
};
use kgconsult_core::transe::{margin_loss, margin_loss_grads, score_triple, EmbeddingTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vector {
    Vector::from_iter((0..n).map(|_| rng.random_range(-1.0..1.0)))
}

fn loss(net: &Mlp3, x: &Vector, target: usize) -> f64 {
    let (out, _) = net.forward(x).unwrap();
    match net.head {
        Head::Softmax => cross_entropy_softmax(&out, target).unwrap(),
        Head::Sigmoid => binary_cross_entropy(out[0], target == 1),
    }
}

/// Twenty random nets with the given head.
pub fn random_nets(head: Head) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_in = rng.random_range(2..9);
        let d_h = rng.random_range(2..9);
        let d_out = if head == Head::Sigmoid {
            1
        } else {
            rng.random_range(2..7)
        };
        let net = Mlp3::new(d_in, d_h, d_out, head, &mut rng);
        let x = random_vec(d_in, &mut rng);
        let target = rng.random_range(0..d_out.max(2)).min(d_out.max(2) - 1);
        let (out, cache) = net.forward(&x).unwrap();
        let mut d = out.clone();
        match head {
            Head::Softmax => d[target] -= 1.0,
            Head::Sigmoid => d[0] -= if target == 1 { 1.0 } else { 0.0 },
        }
        let analytic = net.backward(&cache, &d).unwrap().to_flat();
        let err = finite_diff_check(
            |p| loss(&net.with_flat(p).unwrap(), &x, target),
            &net.to_flat(),
            &analytic,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

fn five_entity_graph() -> KnowledgeGraph {
    let e = |id, kind| Entity {
        id: EntityId(id),
        name: format!("e{id}"),
        kind,
    };
    let t = |h, d| Triple {
        head: EntityId(h),
        relation: RelationId(0),
        tail: EntityId(d),
    };
    KnowledgeGraph::new(
        vec![
            e(0, EntityKind::Disease),
            e(1, EntityKind::Disease),
            e(2, EntityKind::Symptom),
            e(3, EntityKind::Symptom),
            e(4, EntityKind::Symptom),
        ],
        vec!["has".into()],
        vec![t(2, 0), t(3, 0), t(3, 1), t(4, 1)],
    )
    .unwrap()
}

/// Margin loss on a five-entity graph.
pub fn transe_margin() -> f64 {
    let g = five_entity_graph();
    let k = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ents = Matrix::from_shape_fn((5, k), |_| rng.random_range(-1.0..1.0));
    let rels = Matrix::from_shape_fn((1, k), |_| rng.random_range(-1.0..1.0));
    let tab = EmbeddingTable::new(ents, rels).unwrap();
    let corrupt = |t: &Triple, tail| Triple {
        tail: EntityId(tail),
        ..*t
    };
    let tr = g.triples();
    let pairs = vec![
        (tr[0], corrupt(&tr[0], 1)),
        (tr[1], corrupt(&tr[1], 4)),
        (tr[2], corrupt(&tr[2], 2)),
        (tr[3], corrupt(&tr[3], 0)),
    ];
    // A wide margin keeps every hinge active, away from its kink.
    let gamma = 10.0;
    let (ent, rel, l) = margin_loss_grads(&tab, &pairs, gamma).unwrap();
    let f = |p: &[f64]| {
        let t = EmbeddingTable::new(
            Matrix::from_shape_vec((5, k), p[..5 * k].to_vec()).unwrap(),
            Matrix::from_shape_vec((1, k), p[5 * k..].to_vec()).unwrap(),
        )
        .unwrap();
        let pos: Vec<f64> = pairs
            .iter()
            .map(|(p, _)| score_triple(&t, p.head, p.relation, p.tail).unwrap())
            .collect();
        let neg: Vec<f64> = pairs
            .iter()
            .map(|(_, n)| score_triple(&t, n.head, n.relation, n.tail).unwrap())
            .collect();
        margin_loss(&pos, &neg, gamma).unwrap()
    };
    let params: Vec<f64> = tab
        .entity_vecs
        .iter()
        .chain(tab.relation_vecs.iter())
        .copied()
        .collect();
    assert!((f(&params) - l).abs() < 1e-12);
    let mut analytic = vec![0.0; params.len()];
    for (i, g) in ent {
        analytic[i * k..(i + 1) * k].copy_from_slice(g.as_slice().unwrap());
    }
    for (i, g) in rel {
        analytic[5 * k + i * k..5 * k + (i + 1) * k].copy_from_slice(g.as_slice().unwrap());
    }
    finite_diff_check(f, &params, &analytic, DEFAULT_FD_STEP).unwrap()
}

fn reinforce_loss(
    net: &Mlp3,
    xs: &Matrix,
    actions: &[usize],
    returns: &[f64],
    masks: &[Vec<usize>],
) -> f64 {
    let mut total = 0.0;
    for (i, (&a, &g)) in actions.iter().zip(returns).enumerate() {
        let z = net.logits(&xs.row(i).to_owned()).unwrap();
        let allowed: Vec<usize> = (0..z.len()).filter(|j| !masks[i].contains(j)).collect();
        let max = allowed
            .iter()
            .map(|&j| z[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + allowed
                .iter()
                .map(|&j| (z[j] - max).exp())
                .sum::<f64>()
                .ln();
        total -= g * (z[a] - lse);
    }
    total / actions.len() as f64
}

/// REINFORCE loss, with and without action masks.
pub fn policy_gradient_loss() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let net = Mlp3::new(6, 5, 7, Head::Softmax, &mut rng);
        let b = 4;
        let xs = Matrix::from_shape_fn((b, 6), |_| rng.random_range(-1.0..1.0));
        let masks: Vec<Vec<usize>> = (0..b)
            .map(|i| {
                if seed % 2 == 0 {
                    vec![]
                } else {
                    vec![i, (i + 3) % 7]
                }
            })
            .collect();
        let actions: Vec<usize> = (0..b).map(|i| (i + 1) % 7).collect();
        let returns: Vec<f64> = (0..b).map(|_| rng.random_range(-5.0..8.0)).collect();
        let (grads, l) = if seed % 2 == 0 {
            policy_gradient(&net, &xs, &actions, &returns).unwrap()
        } else {
            policy_gradient_masked(&net, &xs, &actions, &returns, &masks).unwrap()
        };
        assert!((l - reinforce_loss(&net, &xs, &actions, &returns, &masks)).abs() < 1e-9);
        let err = finite_diff_check(
            |p| reinforce_loss(&net.with_flat(p).unwrap(), &xs, &actions, &returns, &masks),
            &net.to_flat(),
            &grads.to_flat(),
            DEFAULT_FD_STEP,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

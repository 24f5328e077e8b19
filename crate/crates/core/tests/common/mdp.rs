//! Two-step toy decision problem with a closed-form expected return.
//!
//! Step one sees `x0` and picks `a1`; step two sees `x(a1)` and picks `a2`.
//! Rewards are `R1[a1]` then `R2[a1][a2]`, and `G_t` sums rewards from `t` on.

use kgconsult_core::actor::policy_gradient;
use kgconsult_core::tensor::{softmax, Head, Matrix, Mlp3, Vector};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const R1: [f64; 2] = [0.5, -0.2];
const R2: [[f64; 2]; 2] = [[1.0, -1.0], [-0.5, 2.0]];

fn obs(step_state: usize) -> Vector {
    let mut x = Vector::zeros(3);
    x[step_state] = 1.0;
    x
}

fn probs(net: &Mlp3, state: usize) -> Vector {
    softmax(&net.logits(&obs(state)).unwrap()).unwrap()
}

fn expected_return(net: &Mlp3) -> f64 {
    let p0 = probs(net, 0);
    (0..2)
        .map(|a1| {
            let p1 = probs(net, a1 + 1);
            p0[a1] * (R1[a1] + (0..2).map(|a2| p1[a2] * R2[a1][a2]).sum::<f64>())
        })
        .sum()
}

pub struct MdpCheck {
    pub estimate: Vec<f64>,
    pub exact: Vec<f64>,
}

impl MdpCheck {
    pub fn cosine(&self) -> f64 {
        let dot: f64 = self
            .estimate
            .iter()
            .zip(&self.exact)
            .map(|(a, b)| a * b)
            .sum();
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (n(&self.estimate) * n(&self.exact))
    }

    /// Largest coordinate error relative to the largest exact coordinate.
    pub fn max_rel_error(&self) -> f64 {
        let scale = self.exact.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        self.estimate
            .iter()
            .zip(&self.exact)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / scale
    }
}

/// REINFORCE estimate from `n` sampled trajectories against the gradient of
/// the exact expected return, taken by central differences.
pub fn run(n: usize, seed: u64) -> MdpCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Mlp3::new(3, 4, 2, Head::Softmax, &mut rng);
    let mut xs = Matrix::zeros((2 * n, 3));
    let mut actions = Vec::with_capacity(2 * n);
    let mut returns = Vec::with_capacity(2 * n);
    let d0 = WeightedIndex::new(probs(&net, 0).iter()).unwrap();
    let d1: Vec<_> = (0..2)
        .map(|a| WeightedIndex::new(probs(&net, a + 1).iter()).unwrap())
        .collect();
    for i in 0..n {
        let a1 = d0.sample(&mut rng);
        let a2 = d1[a1].sample(&mut rng);
        xs[[2 * i, 0]] = 1.0;
        xs[[2 * i + 1, a1 + 1]] = 1.0;
        actions.extend([a1, a2]);
        returns.extend([R1[a1] + R2[a1][a2], R2[a1][a2]]);
    }
    let (grads, _) = policy_gradient(&net, &xs, &actions, &returns).unwrap();
    // The loss averages over 2n rows; the estimator averages over n trajectories.
    let estimate = grads.to_flat().iter().map(|g| -2.0 * g).collect();

    let params = net.to_flat();
    let h = 1e-5;
    let exact = (0..params.len())
        .map(|j| {
            let mut p = params.clone();
            p[j] += h;
            let up = expected_return(&net.with_flat(&p).unwrap());
            p[j] -= 2.0 * h;
            let down = expected_return(&net.with_flat(&p).unwrap());
            (up - down) / (2.0 * h)
        })
        .collect();
    MdpCheck { estimate, exact }
}

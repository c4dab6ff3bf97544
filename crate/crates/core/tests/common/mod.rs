#![allow(dead_code)]

use empathic::gridworld::{kinematic_step, Action, AgentPose, Cell, Heading, StaticMap, GRID_SIZE};
use empathic::model::{Architecture, Batch, LossWeights, Mode, Net};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GAMMA: f64 = 0.95;

pub fn all_poses() -> Vec<AgentPose> {
    let mut out = Vec::new();
    for row in 0..GRID_SIZE {
        for col in 0..GRID_SIZE {
            for h in Heading::ALL {
                out.push(AgentPose::new(row, col, h));
            }
        }
    }
    out
}

fn key(p: AgentPose) -> usize {
    (p.cell.row as usize * GRID_SIZE as usize + p.cell.col as usize) * 4 + p.heading.index()
}

fn next(p: AgentPose, a: Action) -> AgentPose {
    kinematic_step(p, a, GRID_SIZE, || true)
}

fn reward_at(map: &StaticMap, rewards: [f64; 3], cell: Cell) -> Option<f64> {
    map.object_at(cell).map(|ty| rewards[ty.index()])
}

/// Finite-horizon backward induction: `q[h][pose][a]` is the best discounted
/// return with `h` steps left, entering an object cell ends the plan.
pub fn finite_horizon_q(map: &StaticMap, rewards: [f64; 3], horizon: usize) -> Vec<[f64; 3]> {
    let poses = all_poses();
    let mut v = vec![0.0f64; poses.len()];
    let mut q = vec![[0.0f64; 3]; poses.len()];
    for _ in 0..horizon {
        for p in &poses {
            let mut row = [0.0; 3];
            for (i, a) in Action::ALL.iter().enumerate() {
                let n = next(*p, *a);
                row[i] = match reward_at(map, rewards, n.cell) {
                    Some(r) => r,
                    None => GAMMA * v[key(n)],
                };
            }
            q[key(*p)] = row;
        }
        for p in &poses {
            v[key(*p)] = q[key(*p)].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    q
}

pub fn q_at(q: &[[f64; 3]], p: AgentPose) -> [f64; 3] {
    q[key(p)]
}

/// Best discounted return over every action sequence of length at most
/// `depth`, together with the first object cell reached on that sequence.
pub fn enumerate_sequences(map: &StaticMap, rewards: [f64; 3], start: AgentPose, depth: usize) -> (f64, Option<Cell>, usize) {
    fn go(map: &StaticMap, rewards: [f64; 3], p: AgentPose, left: usize, disc: f64, steps: usize, best: &mut (f64, Option<Cell>, usize)) {
        if left == 0 {
            return;
        }
        for a in Action::ALL {
            let n = next(p, a);
            match reward_at(map, rewards, n.cell) {
                Some(r) => {
                    let g = disc * r;
                    if g > best.0 + 1e-12 {
                        *best = (g, Some(n.cell), steps + 1);
                    }
                }
                None => go(map, rewards, n, left - 1, disc * GAMMA, steps + 1, best),
            }
        }
    }
    let mut best = (0.0, None, 0);
    go(map, rewards, start, depth, 1.0, 0, &mut best);
    best
}

pub fn reduced_architecture() -> Architecture {
    Architecture { fau_in: 20, head_in: 20, fau_enc: 8, head_enc: 8, blocks: vec![16, 8], aux_out: 10, dropout: 0.3 }
}

pub struct RandomBatch {
    pub n: usize,
    pub fau: Vec<f64>,
    pub head: Vec<f64>,
    pub labels: Vec<usize>,
    pub aux: Vec<f64>,
}

impl RandomBatch {
    pub fn new(arch: &Architecture, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            n,
            fau: (0..n * arch.fau_in).map(|_| rng.random_range(-2.0..2.0)).collect(),
            head: (0..n * arch.head_in).map(|_| rng.random_range(-2.0..2.0)).collect(),
            labels: (0..n).map(|i| (i + seed as usize) % 3).collect(),
            aux: (0..n * arch.aux_out).map(|_| f64::from(rng.random_bool(0.3))).collect(),
        }
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch { n: self.n, fau: &self.fau, head: &self.head, labels: &self.labels, aux: &self.aux }
    }
}

fn signs(net: &Net, theta: &[f64], b: &Batch, seed: u64) -> Vec<bool> {
    net.forward(theta, b.fau, b.head, b.n, Mode::Train { dropout_seed: seed }).preactivations().map(|v| v > 0.0).collect()
}

/// Central finite difference of the batch loss in coordinate `i`. The step
/// shrinks while either side flips a rectifier, so the difference never
/// straddles a kink.
pub fn finite_difference(net: &Net, theta: &[f64], b: &Batch, w: &LossWeights, seed: u64, i: usize) -> f64 {
    let base = signs(net, theta, b, seed);
    let loss = |t: &[f64]| {
        let tr = net.forward(t, b.fau, b.head, b.n, Mode::Train { dropout_seed: seed });
        net.batch_loss(&tr, b, w).0
    };
    let mut h = 1e-5;
    let mut t = theta.to_vec();
    loop {
        t[i] = theta[i] + h;
        let plus_ok = signs(net, &t, b, seed) == base;
        let lp = loss(&t);
        t[i] = theta[i] - h;
        let minus_ok = signs(net, &t, b, seed) == base;
        let lm = loss(&t);
        if (plus_ok && minus_ok) || h < 1e-9 {
            if plus_ok && minus_ok {
                return (lp - lm) / (2.0 * h);
            }
            let l0 = loss(theta);
            return if plus_ok { (lp - l0) / h } else { (l0 - lm) / h };
        }
        h /= 10.0;
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between analytic and numeric gradients over every
/// parameter of a freshly initialized reduced net.
pub fn gradient_check(seed: u64) -> f64 {
    let net = Net::new(reduced_architecture()).unwrap();
    let theta = net.init(seed);
    let data = RandomBatch::new(&net.arch, 6, seed ^ 0xabc);
    let b = data.batch();
    let w = LossWeights::default();
    let dseed = seed.wrapping_mul(31).wrapping_add(7);
    let (_, grad, _) = net.loss_grad(&theta, &b, &w, Mode::Train { dropout_seed: dseed });
    (0..theta.len())
        .map(|i| relative_error(grad[i], finite_difference(&net, &theta, &b, &w, dseed, i)))
        .fold(0.0, f64::max)
}

/// Reads the sample's true class and puts `confidence` on it.
pub struct LabelOracle {
    pub window: empathic::features::WindowConfig,
    pub confidence: f64,
}

impl empathic::inference::Predictor for LabelOracle {
    fn window(&self) -> empathic::features::WindowConfig {
        self.window
    }

    fn predict_batch(&self, samples: &[&empathic::features::WindowSample]) -> empathic::Result<Vec<empathic::model::Prediction>> {
        Ok(samples
            .iter()
            .map(|s| {
                let mut z = [((1.0 - self.confidence) / 2.0).ln(); 3];
                z[s.label.index()] = self.confidence.ln();
                empathic::model::Prediction::from_logits(z, Vec::new())
            })
            .collect())
    }
}

pub fn oracle() -> std::sync::Arc<LabelOracle> {
    std::sync::Arc::new(LabelOracle { window: Default::default(), confidence: 0.8 })
}

/// Kendall tau by counting every pair; `None` when tau-b is undefined.
pub fn pair_count_tau(a: &[f64], b: &[f64], corrected: bool) -> Option<f64> {
    let n = a.len();
    let (mut c, mut d, mut ta, mut tb) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let x = a[i] - a[j];
            let y = b[i] - b[j];
            if x == 0.0 {
                ta += 1;
            }
            if y == 0.0 {
                tb += 1;
            }
            if x * y > 0.0 {
                c += 1;
            } else if x * y < 0.0 {
                d += 1;
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as i64;
    if corrected {
        let den = (((pairs - ta) * (pairs - tb)) as f64).sqrt();
        (den > 0.0).then(|| (c - d) as f64 / den)
    } else {
        Some((c - d) as f64 / pairs as f64)
    }
}

/// Tail probabilities of `W+` over all sign assignments of the mid-ranks.
pub fn brute_wilcoxon(values: &[f64]) -> (f64, f64, f64) {
    let d: Vec<f64> = values.iter().copied().filter(|v| *v != 0.0).collect();
    let ranks = empathic::stats::midranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let w: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let n = d.len();
    let (mut ge, mut le) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if s >= w - 1e-9 {
            ge += 1;
        }
        if s <= w + 1e-9 {
            le += 1;
        }
    }
    let t = (1u64 << n) as f64;
    let (g, l) = (ge as f64 / t, le as f64 / t);
    (g, l, (2.0 * g.min(l)).min(1.0))
}

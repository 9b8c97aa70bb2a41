//! Finite-difference oracle shared by the gradient tests.

use mgcm_core::autodiff::{AttentionLayout, ParamId, ParamStore, Tape, Var};
use mgcm_core::tensor::Tensor;
use mgcm_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 100;

pub type Build = dyn Fn(&mut Tape<f64>, &ParamStore<f64>, &[ParamId], &mut ChaCha8Rng) -> Result<Var>;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], away_from_zero: bool) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if away_from_zero {
                v.signum() * (0.05 + v.abs())
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn eval(store: &ParamStore<f64>, ids: &[ParamId], build: &Build, seed: u64) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let loss = build(&mut tape, store, ids, &mut rng)?;
    let value = tape.value(loss).data()[0];
    Ok((value, store.flatten(&tape.backward(loss, store)?)))
}

/// Largest normwise relative error of the analytic gradient over all seeds,
/// or a description of the first seed that exceeds [`TOL`].
pub fn check(name: &str, shapes: &[&[usize]], away_from_zero: bool, build: &Build) -> std::result::Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| store.add(format!("p{i}"), random_tensor(&mut rng, s, away_from_zero)))
            .collect();
        let (_, analytic) = eval(&store, &ids, build, seed).map_err(|e| e.to_string())?;
        let n = store.numel();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            let mut plus = store.clone();
            plus.descend(&e, -H).unwrap();
            let mut minus = store.clone();
            minus.descend(&e, H).unwrap();
            let fp = eval(&plus, &ids, build, seed).map_err(|e| e.to_string())?.0;
            let fm = eval(&minus, &ids, build, seed).map_err(|e| e.to_string())?.0;
            *slot = (fp - fm) / (2.0 * H);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        if na <= 1e-8 {
            return Err(format!("{name}: seed {seed} produced a vanishing gradient"));
        }
        let rel = diff / na.max(nn);
        worst = worst.max(rel);
        if rel > TOL {
            return Err(format!("{name}: seed {seed} relative error {rel:e}"));
        }
    }
    Ok(worst)
}

/// Reduces any tensor to a scalar through a fixed random weighting, so every
/// output element influences the loss differently.
pub fn weighted_sum(tape: &mut Tape<f64>, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let w = tape.constant(random_tensor(rng, &shape, false));
    let y = tape.mul(x, w)?;
    Ok(tape.sum(y))
}


/// Name, input shapes, whether inputs are kept away from zero, and the graph builder.
pub type OpCheck = (&'static str, Vec<Vec<usize>>, bool, Box<Build>);

/// One named check per tape operation.
pub fn all_op_checks() -> Vec<OpCheck> {
    let mut v: Vec<OpCheck> = Vec::new();
    v.push(("matmul", vec![vec![3, 4], vec![4, 2]], false, Box::new(|t, s, p, r| {
        let (a, b) = (t.param(s, p[0]), t.param(s, p[1]));
        let y = t.matmul(a, b)?;
        weighted_sum(t, y, r)
    })));
    v.push(("add", vec![vec![3, 4], vec![3, 4]], false, Box::new(|t, s, p, r| {
        let (a, b) = (t.param(s, p[0]), t.param(s, p[1]));
        let y = t.add(a, b)?;
        weighted_sum(t, y, r)
    })));
    v.push(("add_row", vec![vec![3, 4], vec![4]], false, Box::new(|t, s, p, r| {
        let (a, b) = (t.param(s, p[0]), t.param(s, p[1]));
        let y = t.add(a, b)?;
        weighted_sum(t, y, r)
    })));
    v.push(("mul", vec![vec![2, 5], vec![2, 5]], false, Box::new(|t, s, p, r| {
        let (a, b) = (t.param(s, p[0]), t.param(s, p[1]));
        let y = t.mul(a, b)?;
        weighted_sum(t, y, r)
    })));
    v.push(("scale", vec![vec![6]], false, Box::new(|t, s, p, r| {
        let a = t.param(s, p[0]);
        let y = t.scale(a, -1.7);
        weighted_sum(t, y, r)
    })));
    v.push(("sum", vec![vec![2, 3]], false, Box::new(|t, s, p, _| {
        let a = t.param(s, p[0]);
        let sq = t.mul(a, a)?;
        Ok(t.sum(sq))
    })));
    v.push(("relu", vec![vec![4, 5]], true, Box::new(|t, s, p, r| {
        let a = t.param(s, p[0]);
        let y = t.relu(a);
        weighted_sum(t, y, r)
    })));
    v.push(("gelu", vec![vec![4, 5]], false, Box::new(|t, s, p, r| {
        let a = t.param(s, p[0]);
        let y = t.gelu(a);
        weighted_sum(t, y, r)
    })));
    v.push(("softmax", vec![vec![3, 6]], false, Box::new(|t, s, p, r| {
        let a = t.param(s, p[0]);
        let y = t.softmax(a);
        weighted_sum(t, y, r)
    })));
    v.push(("embedding", vec![vec![7, 3]], false, Box::new(|t, s, p, r| {
        let table = t.param(s, p[0]);
        let y = t.embedding(table, &[2, 0, 2, 6, 5])?;
        weighted_sum(t, y, r)
    })));
    v.push(("layer_norm", vec![vec![4, 6], vec![6], vec![6]], false, Box::new(|t, s, p, r| {
        let (x, g, b) = (t.param(s, p[0]), t.param(s, p[1]), t.param(s, p[2]));
        let y = t.layer_norm(x, g, b)?;
        weighted_sum(t, y, r)
    })));
    for causal in [false, true] {
        let (q_len, kv_len, batch) = (3, if causal { 3 } else { 4 }, 2);
        let name = if causal { "attention_causal" } else { "attention" };
        v.push((name, vec![vec![batch * q_len, 4], vec![batch * kv_len, 4], vec![batch * kv_len, 4]], false, Box::new(move |t, s, p, r| {
            let (q, k, val) = (t.param(s, p[0]), t.param(s, p[1]), t.param(s, p[2]));
            let layout = AttentionLayout { heads: 2, q_len, kv_len, causal };
            let y = t.attention(q, k, val, layout)?;
            weighted_sum(t, y, r)
        })));
    }
    v.push(("cross_entropy", vec![vec![4, 5]], false, Box::new(|t, s, p, _| {
        let logits = t.param(s, p[0]);
        t.cross_entropy(logits, &[1, 4, 0, 1])
    })));
    v.push(("mse", vec![vec![3, 2]], false, Box::new(|t, s, p, r| {
        let pred = t.param(s, p[0]);
        let target = random_tensor(r, &[3, 2], false);
        t.mse(pred, &target)
    })));
    v
}

pub fn run_op_check(name: &str, shapes: &[Vec<usize>], away: bool, build: &Build) -> std::result::Result<f64, String> {
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    check(name, &refs, away, build)
}

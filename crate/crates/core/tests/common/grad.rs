//! Finite-difference checks of every differentiable operation and of the
//! full context-aware loss.

use hiersparse::attention::SentenceRanges;
use hiersparse::gradcheck::check_gradients;
use hiersparse::graph::{Graph, HierInputs, ParamStore, Var};
use hiersparse::model::{document_forward, ForwardOptions};
use hiersparse::normalize::{Mask, Normalizer};
use hiersparse::Result;

use super::{all_configs, normal_matrix, random_context_model, rng, tiny_config};

pub type Outcome = std::result::Result<(), String>;

pub const TOL: f64 = 1e-4;
pub const H: f64 = 1e-4;
pub const SEEDS: u64 = 20;

/// Checks `sum(f(params) ⊙ W)` for a fixed random `W`, over `SEEDS` draws of
/// the parameters.
pub fn check_op(name: &str, shapes: &[(usize, usize)], f: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>) -> Outcome {
    for seed in 0..SEEDS {
        let mut r = rng(1000 + seed);
        let mut store = ParamStore::new();
        let ids: Vec<_> = shapes.iter().enumerate().map(|(i, &(a, b))| store.add(format!("p{i}"), normal_matrix(&mut r, a, b))).collect();
        let probe = {
            let g0 = &mut Graph::new(&store);
            let vars: Vec<Var> = ids.iter().map(|&id| g0.param(id)).collect();
            let out = f(g0, &vars).unwrap();
            let shape = g0.value(out).shape().to_vec();
            normal_matrix(&mut r, 1, g0.value(out).len()).reshape(shape).unwrap()
        };
        let report = check_gradients(&mut store, &[], H, |g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            let out = f(g, &vars)?;
            let w = g.input(probe.clone())?;
            let prod = g.mul(out, w)?;
            g.sum(prod)
        })
        .unwrap();
        if !report.passes(TOL) {
            return Err(format!("{name} seed {seed}: {report:?}"));
        }
    }
    Ok(())
}

pub fn linear_algebra_primitives() -> Outcome {
    check_op("matmul", &[(3, 4), (4, 2)], |g, v| g.matmul(v[0], v[1]))?;
    check_op("add", &[(3, 4), (3, 4)], |g, v| g.add(v[0], v[1]))?;
    check_op("sub", &[(3, 4), (3, 4)], |g, v| g.sub(v[0], v[1]))?;
    check_op("mul", &[(3, 4), (3, 4)], |g, v| g.mul(v[0], v[1]))?;
    check_op("add_row", &[(3, 4), (1, 4)], |g, v| g.add_row(v[0], v[1]))?;
    check_op("linear", &[(3, 4), (4, 5), (1, 5)], |g, v| g.linear(v[0], v[1], Some(v[2])))?;
    check_op("scale", &[(2, 3)], |g, v| g.scale(v[0], -1.5))?;
    Ok(())
}

pub fn elementwise_primitives() -> Outcome {
    check_op("relu", &[(4, 5)], |g, v| g.relu(v[0]))?;
    check_op("sigmoid", &[(4, 5)], |g, v| g.sigmoid(v[0]))?;
    check_op("masked_fill", &[(2, 3)], |g, v| g.masked_fill(v[0], &[true, false, false, false, true, false], -2.0))?;
    Ok(())
}

pub fn structural_primitives() -> Outcome {
    check_op("concat_rows", &[(2, 3), (1, 3)], |g, v| g.concat_rows(&[v[0], v[1]]))?;
    check_op("concat_cols", &[(2, 3), (2, 1)], |g, v| g.concat_cols(&[v[0], v[1]]))?;
    check_op("slice_rows", &[(5, 3)], |g, v| g.slice_rows(v[0], 1, 4))?;
    check_op("gather_rows", &[(4, 3)], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3]))?;
    check_op("embedding", &[(6, 3)], |g, v| g.embedding(v[0], &[5, 1, 1]))?;
    check_op("scatter_rows", &[(2, 3)], |g, v| g.scatter_rows(v[0], &[3, 0], 4))?;
    check_op("segment_mean", &[(5, 3)], |g, v| g.segment_mean(v[0], &[0..3, 3..5]))?;
    Ok(())
}

pub fn normalizers_and_losses() -> Outcome {
    let mask = Mask::from_fn(3, 4, |r, c| c == (r + 1) % 4);
    check_op("softmax", &[(3, 4)], |g, v| g.softmax(v[0], None))?;
    check_op("masked softmax", &[(3, 4)], |g, v| g.softmax(v[0], Some(&mask)))?;
    check_op("sparsemax", &[(3, 5)], |g, v| g.sparsemax(v[0], None))?;
    check_op("masked sparsemax", &[(3, 4)], |g, v| g.sparsemax(v[0], Some(&mask)))?;
    check_op("layer_norm", &[(3, 5), (1, 5), (1, 5)], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-6))?;
    check_op("cross_entropy", &[(3, 5)], |g, v| g.cross_entropy(v[0], &[0, 4, 2], 0.1))?;
    check_op("sum", &[(3, 2)], |g, v| g.sum(v[0]))?;
    Ok(())
}

pub fn attention_primitives() -> Outcome {
    let causal = Mask::causal(3);
    for norm in [Normalizer::Softmax, Normalizer::Sparsemax] {
        check_op("attention", &[(3, 4), (3, 4), (3, 4)], |g, v| g.attention(v[0], v[1], v[2], 2, Some(&causal), norm))?;
        check_op("cross attention", &[(2, 4), (5, 4), (5, 4)], |g, v| g.attention(v[0], v[1], v[2], 1, None, norm))?;
    }
    Ok(())
}

pub fn hierarchical_attention() -> Outcome {
    let ranges = SentenceRanges::from_lengths(&[2, 3, 1]);
    let mask = Mask::from_fn(4, 3, |r, c| c == r % 3);
    for norm in [Normalizer::Softmax, Normalizer::Sparsemax] {
        check_op("hier_attention", &[(4, 4), (4, 4), (3, 4), (6, 4), (6, 4)], |g, v| {
            let inputs = HierInputs { q_s: v[0], q_w: v[1], k_s: v[2], k_w: v[3], v_w: v[4] };
            g.hier_attention(inputs, 2, &ranges, Some(&mask), norm)
        })?;
    }
    Ok(())
}

pub fn context_gate_composition() -> Outcome {
    check_op("gate", &[(3, 4), (3, 4), (4, 4), (4, 4)], |g, v| {
        let zr = g.matmul(v[0], v[2])?;
        let zd = g.matmul(v[1], v[3])?;
        let z = g.add(zr, zd)?;
        let gamma = g.sigmoid(z)?;
        let a = g.mul(gamma, v[0])?;
        let one_minus = {
            let neg = g.scale(gamma, -1.0)?;
            let ones = g.input(hiersparse::tensor::Tensor::full(&[3, 4], 1.0))?;
            g.add(ones, neg)?
        };
        let b = g.mul(one_minus, v[1])?;
        g.add(a, b)
    })?;
    Ok(())
}

pub fn full_context_loss_every_configuration() -> Outcome {
    let src = vec![vec![4, 5, 6], vec![7, 4]];
    let tgt = vec![vec![5, 6], vec![7, 8, 4]];
    for (attention, integration, setting) in all_configs() {
        let cfg = tiny_config(attention, integration, setting);
        let model = random_context_model(&cfg, 3, 0.5);
        let mut store = model.params().clone();
        let ids: Vec<_> = model.params().ids().filter(|&id| !model.params().name(id).starts_with("base.")).collect();
        let report = check_gradients(&mut store, &ids, H, |g| {
            let f = document_forward(g, &model, &src, &tgt, ForwardOptions::default())?;
            g.cross_entropy(f.logits, &f.targets, 0.1)
        })
        .map_err(|e| e.to_string())?;
        if !report.passes(TOL) || report.skipped * 20 >= report.checked {
            return Err(format!("{attention} {integration} {setting}: {report:?}"));
        }
    }
    Ok(())
}

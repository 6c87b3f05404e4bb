//! Oracles shared by the integration tests.

#![allow(dead_code)]

use dgt_core::autodiff::{Graph, Var};
use dgt_core::model::{AttentionMask, AttentionWeights, ModelConfig, TranscriptionModel};
use dgt_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference norm when both
/// vectors are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-8 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences on every input coordinate, or on `max_coords` random ones per
/// input when given. Returns the worst relative error over the inputs.
pub fn gradient_error<F>(inputs: &[Tensor<f64>], max_coords: Option<usize>, seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    g.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
        })
        .collect();

    let mut pick = rng(seed ^ 0xfd);
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < input.len() => {
                (0..m).map(|_| pick.random_range(0..input.len())).collect()
            }
            _ => (0..input.len()).collect(),
        };
        let mut numeric = Vec::with_capacity(coords.len());
        let mut expected = Vec::with_capacity(coords.len());
        for &c in &coords {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[c] += FD_STEP;
            let up = eval(&xs);
            xs[k].data_mut()[c] -= 2.0 * FD_STEP;
            let down = eval(&xs);
            numeric.push((up - down) / (2.0 * FD_STEP));
            expected.push(analytic[k][c]);
        }
        worst = worst.max(relative_error(&expected, &numeric));
    }
    worst
}

/// Reduces any output to a scalar with fixed random weights so every output
/// coordinate contributes to the checked gradient.
pub fn weighted_sum(g: &mut Graph<'_, f64>, x: Var, seed: u64) -> Result<Var> {
    let w = random_tensor(&mut rng(seed ^ 0x5eed), g.shape(x), 1.0);
    let w = g.constant(w);
    let y = g.mul(x, w)?;
    g.sum(y)
}

pub type Primitive = (
    &'static str,
    Vec<Tensor<f64>>,
    Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>,
);

/// Every differentiable primitive with random inputs drawn from `seed`.
pub fn primitives(seed: u64) -> Vec<Primitive> {
    let mut r = rng(seed);
    let m = |r: &mut ChaCha8Rng, rows: usize, cols: usize| random_tensor(r, &[rows, cols], 1.0);
    let s = seed;
    let ids: Vec<usize> = (0..5).map(|_| r.random_range(0..6)).collect();
    let mut targets: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
    targets[1] = 0;
    // Row 1 sees nothing and must produce zeros with zero gradient.
    let mut visible_with_dead_row: Vec<bool> = (0..12)
        .map(|i| i % 4 != 0 && (i + seed as usize) % 5 != 0)
        .collect();
    visible_with_dead_row[4..8].fill(false);
    let attn_mask = AttentionMask::padding(3, 4, &[3]);
    let mut list: Vec<Primitive> = vec![
        (
            "matmul",
            vec![m(&mut r, 3, 4), m(&mut r, 4, 2)],
            Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y, s)
            }),
        ),
        (
            "transpose",
            vec![m(&mut r, 3, 4)],
            Box::new(move |g, v| {
                let y = g.transpose(v[0])?;
                weighted_sum(g, y, s)
            }),
        ),
        (
            "add",
            vec![m(&mut r, 2, 3), m(&mut r, 2, 3)],
            Box::new(move |g, v| {
                let y = g.add(v[0], v[1])?;
                weighted_sum(g, y, s)
            }),
        ),
        (
            "add_row",
            vec![m(&mut r, 3, 4), random_tensor(&mut r, &[4], 1.0)],
            Box::new(move |g, v| {
                let y = g.add_row(v[0], v[1])?;
                weighted_sum(g, y, s)
            }),
        ),
        (
            "mul",
            vec![m(&mut r, 2, 3), m(&mut r, 2, 3)],
            Box::new(move |g, v| {
                let y = g.mul(v[0], v[1])?;
                weighted_sum(g, y, s)
            }),
        ),
        (
            "scale",
            vec![m(&mut r, 2, 3)],
            Box::new(move |g, v| {
                let y = g.scale(v[0], -1.7)?;
                weighted_sum(g, y, s)
            }),
        ),
        (
            "gelu",
            vec![random_tensor(&mut r, &[3, 4], 3.0)],
            Box::new(move |g, v| {
                let y = g.gelu(v[0])?;
                weighted_sum(g, y, s)
            }),
        ),
        (
            "softmax_rows",
            vec![random_tensor(&mut r, &[3, 4], 2.0)],
            Box::new(move |g, v| {
                let y = g.softmax(v[0], 1)?;
                weighted_sum(g, y, s)
            }),
        ),
        (
            "softmax_axis0_rank3",
            vec![random_tensor(&mut r, &[3, 2, 2], 2.0)],
            Box::new(move |g, v| {
                let y = g.softmax(v[0], 0)?;
                weighted_sum(g, y, s)
            }),
        ),
        (
            "masked_softmax",
            vec![random_tensor(&mut r, &[3, 4], 2.0)],
            Box::new(move |g, v| {
                let y = g.masked_softmax(v[0], &visible_with_dead_row)?;
                weighted_sum(g, y, s)
            }),
        ),
        (
            "layer_norm",
            vec![
                random_tensor(&mut r, &[3, 5], 2.0),
                random_tensor(&mut r, &[5], 1.0),
                random_tensor(&mut r, &[5], 1.0),
            ],
            Box::new(move |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(g, y, s)
            }),
        ),
        (
            "embedding",
            vec![m(&mut r, 6, 3)],
            Box::new(move |g, v| {
                let y = g.embedding(v[0], &ids)?;
                weighted_sum(g, y, s)
            }),
        ),
        (
            "cross_entropy",
            vec![random_tensor(&mut r, &[4, 5], 2.0)],
            Box::new(move |g, v| g.cross_entropy(v[0], &targets, 0)),
        ),
        (
            "slice",
            vec![m(&mut r, 4, 5)],
            Box::new(move |g, v| {
                let y = g.slice(v[0], 1, 2, 2, 3)?;
                weighted_sum(g, y, s)
            }),
        ),
        (
            "concat_rows",
            vec![m(&mut r, 2, 3), m(&mut r, 1, 3)],
            Box::new(move |g, v| {
                let y = g.concat_rows(&[v[0], v[1], v[0]])?;
                weighted_sum(g, y, s)
            }),
        ),
        (
            "concat_cols",
            vec![m(&mut r, 2, 3), m(&mut r, 2, 1)],
            Box::new(move |g, v| {
                let y = g.concat_cols(&[v[1], v[0]])?;
                weighted_sum(g, y, s)
            }),
        ),
        (
            "dropout",
            vec![m(&mut r, 3, 4)],
            Box::new(move |g, v| {
                let y = g.dropout(v[0], 0.3, &mut rng(s ^ 0xd0))?;
                weighted_sum(g, y, s)
            }),
        ),
        ("sum", vec![m(&mut r, 2, 3)], Box::new(|g, v| g.sum(v[0]))),
    ];
    let mut attention_inputs = Vec::new();
    for _ in 0..4 {
        attention_inputs.push(m(&mut r, 4, 4));
        attention_inputs.push(random_tensor(&mut r, &[4], 0.5));
    }
    attention_inputs.push(m(&mut r, 3, 4));
    attention_inputs.push(m(&mut r, 4, 4));
    list.push((
        "multi_head_attention",
        attention_inputs,
        Box::new(move |g, v| {
            let w = AttentionWeights {
                wq: v[0],
                bq: v[1],
                wk: v[2],
                bk: v[3],
                wv: v[4],
                bv: v[5],
                wo: v[6],
                bo: v[7],
            };
            let y = dgt_core::model::multi_head_attention(g, &w, v[8], v[9], 2, &attn_mask)?;
            weighted_sum(g, y, s)
        }),
    ));
    list
}

pub fn tiny_encoder_decoder(seed: u64) -> TranscriptionModel<f64> {
    let config = ModelConfig {
        d_model: 8,
        n_heads: 2,
        encoder_layers: 2,
        decoder_layers: 1,
        d_ff: 16,
        dropout: 0.0,
        max_positions: 16,
        vocab_size: 261,
        max_gen_len: 16,
    };
    TranscriptionModel::new(config, seed).unwrap()
}

/// Worst relative gradient error over all parameters of a 2-layer encoder,
/// 1-layer decoder model on a padded batch of two, sampling up to
/// `coords_per_param` coordinates per parameter tensor.
pub fn model_gradient_error(seed: u64, coords_per_param: usize) -> f64 {
    let model = tiny_encoder_decoder(seed);
    let mut r = rng(seed ^ 0xabc);
    let mut seq = |len: usize| -> Vec<usize> { (0..len).map(|_| r.random_range(3..261)).collect() };
    let sources = [seq(5), seq(3)];
    let targets = [seq(4), seq(2)];
    let inputs: Vec<Tensor<f64>> = model.params().iter().map(|p| p.tensor.clone()).collect();
    gradient_error(&inputs, Some(coords_per_param), seed, |g, vars| {
        let src: Vec<&[usize]> = sources.iter().map(Vec::as_slice).collect();
        let tgt: Vec<&[usize]> = targets.iter().map(Vec::as_slice).collect();
        model.batch_loss::<ChaCha8Rng>(g, vars, &src, &tgt, None)
    })
}

/// Exhaustive minimum edit distance: tries every alignment path.
pub fn brute_force_edits<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let diag = brute_force_edits(ra, rb) + usize::from(x != y);
            let del = brute_force_edits(ra, b) + 1;
            let ins = brute_force_edits(a, rb) + 1;
            diag.min(del).min(ins)
        }
    }
}

/// Random string mixing 1- to 4-byte UTF-8 codepoints.
pub fn random_utf8(rng: &mut impl Rng, max_chars: usize) -> String {
    let n = rng.random_range(0..=max_chars);
    (0..n)
        .map(|_| loop {
            let cp = match rng.random_range(0..4) {
                0 => rng.random_range(0x20..0x7f),
                1 => rng.random_range(0x80..0x800),
                2 => rng.random_range(0x800..0x10000),
                _ => rng.random_range(0x10000..0x110000),
            };
            if let Some(c) = char::from_u32(cp) {
                break c;
            }
        })
        .collect()
}

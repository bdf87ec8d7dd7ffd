#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wlas::autodiff::{Tape, Var};
use wlas::corpus::CharVocabulary;
use wlas::decoding::Decoded;
use wlas::features::{window_frames, AudioFeatures, RawVideo, MFCC_DIM};
use wlas::gradcheck::{finite_difference_gradient, max_relative_error};
use wlas::model::{LossOptions, Model, ModelConfig, ModelInputs};
use wlas::{NdArray, Result};

pub const GRAD_TOL: f64 = 1e-4;
pub const FD_EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_array(rng: &mut impl Rng, shape: &[usize], scale: f64) -> NdArray {
    let n = shape.iter().product();
    NdArray::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Distinct values at least 0.05 apart, so max-pool and relu stay away from
/// their kinks under finite differences.
pub fn spread_array(rng: &mut impl Rng, shape: &[usize]) -> NdArray {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * 0.1).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.gen_range(0..=i));
    }
    NdArray::new(shape.to_vec(), v).unwrap()
}

pub type OpBuilder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One primitive under test: how to build it and a generator for its inputs.
pub struct OpCase {
    pub name: &'static str,
    pub build: OpBuilder,
    pub inputs: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<NdArray>>,
}

fn case(
    name: &'static str,
    inputs: impl Fn(&mut ChaCha8Rng) -> Vec<NdArray> + 'static,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        build: Box::new(build),
        inputs: Box::new(inputs),
    }
}

pub fn op_cases() -> Vec<OpCase> {
    let r = |shape: &'static [usize]| move |g: &mut ChaCha8Rng| vec![random_array(g, shape, 1.0)];
    vec![
        case(
            "matmul",
            |g| vec![random_array(g, &[3, 4], 1.0), random_array(g, &[4, 2], 1.0)],
            |t, x| t.matmul(x[0], x[1]),
        ),
        case(
            "add",
            |g| vec![random_array(g, &[2, 3], 1.0), random_array(g, &[2, 3], 1.0)],
            |t, x| t.add(x[0], x[1]),
        ),
        case(
            "add_row",
            |g| vec![random_array(g, &[4, 3], 1.0), random_array(g, &[1, 3], 1.0)],
            |t, x| t.add_row(x[0], x[1]),
        ),
        case(
            "sub",
            |g| vec![random_array(g, &[2, 3], 1.0), random_array(g, &[2, 3], 1.0)],
            |t, x| t.sub(x[0], x[1]),
        ),
        case(
            "mul",
            |g| vec![random_array(g, &[2, 3], 1.0), random_array(g, &[2, 3], 1.0)],
            |t, x| t.mul(x[0], x[1]),
        ),
        case("scale", r(&[2, 3]), |t, x| t.scale(x[0], -1.7)),
        case("tanh", r(&[2, 3]), |t, x| t.tanh(x[0])),
        case("sigmoid", r(&[2, 3]), |t, x| t.sigmoid(x[0])),
        case("relu", |g| vec![spread_array(g, &[2, 5])], |t, x| t.relu(x[0])),
        case("softmax", r(&[1, 5]), |t, x| t.softmax(x[0])),
        case("log_softmax", r(&[3, 5]), |t, x| t.log_softmax(x[0])),
        case(
            "concat",
            |g| vec![random_array(g, &[1, 2], 1.0), random_array(g, &[1, 3], 1.0)],
            |t, x| t.concat(&[x[0], x[1]]),
        ),
        case(
            "concat_rows",
            |g| vec![random_array(g, &[1, 3], 1.0), random_array(g, &[2, 3], 1.0)],
            |t, x| t.concat_rows(&[x[0], x[1]]),
        ),
        case("slice_cols", r(&[2, 5]), |t, x| t.slice_cols(x[0], 1, 4)),
        case("row", r(&[3, 4]), |t, x| t.row(x[0], 2)),
        case("sum", r(&[2, 3]), |t, x| t.sum(x[0])),
        case("reshape", r(&[2, 6]), |t, x| t.reshape(x[0], &[3, 4])),
        case(
            "conv2d",
            |g| {
                vec![
                    random_array(g, &[2, 5, 5], 1.0),
                    random_array(g, &[3, 2, 3, 3], 0.5),
                    random_array(g, &[3], 0.5),
                ]
            },
            |t, x| t.conv2d(x[0], x[1], x[2], 1, 1),
        ),
        case(
            "conv2d_strided",
            |g| {
                vec![
                    random_array(g, &[1, 7, 7], 1.0),
                    random_array(g, &[2, 1, 3, 3], 0.5),
                    random_array(g, &[2], 0.5),
                ]
            },
            |t, x| t.conv2d(x[0], x[1], x[2], 2, 0),
        ),
        case("max_pool2d", |g| vec![spread_array(g, &[2, 6, 6])], |t, x| t.max_pool2d(x[0], 3, 2)),
        case(
            "lstm_cell",
            |g| {
                vec![
                    random_array(g, &[2, 12], 1.5),
                    random_array(g, &[2, 3], 1.0),
                    random_array(g, &[1, 9], 1.0),
                ]
            },
            |t, x| t.lstm_cell(x[0], x[1], Some(x[2])),
        ),
        case(
            "lstm_cell_no_peephole",
            |g| vec![random_array(g, &[1, 8], 1.5), random_array(g, &[1, 2], 1.0)],
            |t, x| t.lstm_cell(x[0], x[1], None),
        ),
    ]
}

/// Builds `Σ op(x) ⊙ M` for a fixed random `M`, returning its value and the
/// analytic gradient with respect to every input.
fn weighted_objective(case: &OpCase, xs: &[NdArray], mask: Option<&NdArray>) -> Result<(f64, Vec<NdArray>, NdArray)> {
    let mut tape = Tape::new();
    let vars = xs
        .iter()
        .enumerate()
        .map(|(i, x)| tape.input(&format!("x{i}"), x.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = (case.build)(&mut tape, &vars)?;
    let m = match mask {
        Some(m) => m.clone(),
        None => {
            let shape = tape.value(out).shape().to_vec();
            let mut g = rng(shape.iter().product::<usize>() as u64);
            random_array(&mut g, &shape, 1.0)
        }
    };
    let mv = tape.constant(m.clone());
    let prod = tape.mul(out, mv)?;
    let s = tape.sum(prod)?;
    let value = tape.value(s).data()[0];
    let grads = tape.backward_scalar(s)?;
    Ok((value, vars.iter().map(|&v| grads.wrt_or_zero(v)).collect(), m))
}

/// Worst relative error between analytic and numeric gradients of one op.
pub fn op_gradient_error(case: &OpCase, seed: u64) -> Result<f64> {
    let xs = (case.inputs)(&mut rng(seed));
    let (_, analytic, mask) = weighted_objective(case, &xs, None)?;
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let numeric = finite_difference_gradient(
            |p| {
                let mut probe = xs.clone();
                probe[i] = p.clone();
                Ok(weighted_objective(case, &probe, Some(&mask))?.0)
            },
            &xs[i],
            FD_EPS,
        )?;
        worst = worst.max(max_relative_error(a, &numeric));
    }
    Ok(worst)
}

/// Six tokens: three characters plus the specials.
pub fn tiny_vocab() -> CharVocabulary {
    CharVocabulary::custom("ABC").unwrap()
}

/// Hidden size 8 over six-token output, four video windows, 12 audio frames.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        watch_hidden: 8,
        listen_hidden: 8,
        ..ModelConfig::micro(6)
    }
}

pub fn random_inputs(g: &mut impl Rng, cfg: &ModelConfig, windows: usize, audio_frames: usize) -> ModelInputs {
    let frames = windows + 4;
    let pixels = frames * cfg.input_height * cfg.input_width;
    let raw = RawVideo::new(
        frames,
        cfg.input_height,
        cfg.input_width,
        (0..pixels).map(|_| g.gen_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let audio = AudioFeatures::new(random_array(g, &[audio_frames, MFCC_DIM], 1.0)).unwrap();
    ModelInputs {
        video: window_frames(&raw).unwrap(),
        audio,
    }
}

/// Worst relative error over every parameter of the full sequence loss.
pub fn sequence_loss_gradient_error(seed: u64) -> Result<f64> {
    let cfg = gradcheck_config();
    let vocab = tiny_vocab();
    let mut model = Model::new(cfg.clone(), vocab.clone(), seed)?;
    let mut g = rng(seed ^ 0xA11CE);
    // Zero-initialised biases would put relu exactly on its kink.
    for (_, p) in model.params.iter_mut() {
        for x in p.data_mut() {
            *x += g.gen_range(-0.1..0.1);
        }
    }
    let inputs = random_inputs(&mut g, &cfg, 4, 12);
    let len = g.gen_range(1..=3);
    let mut targets = vec![vocab.sos()];
    targets.extend((0..len).map(|_| g.gen_range(0..3)));
    targets.push(vocab.eos());
    let opts = LossOptions {
        label_smoothing: 0.1,
        ..LossOptions::default()
    };
    let out = model.loss(&inputs, &targets, &opts)?;
    let mut worst = 0.0f64;
    for (name, analytic) in &out.gradients {
        let point = model.params.get(name)?.clone();
        let numeric = finite_difference_gradient(
            |p| {
                *model.params.get_mut(name).unwrap() = p.clone();
                model.loss_value(&inputs, &targets, &opts)
            },
            &point,
            FD_EPS,
        )?;
        *model.params.get_mut(name).unwrap() = point;
        worst = worst.max(max_relative_error(analytic, &numeric));
    }
    Ok(worst)
}

/// Best complete hypothesis by brute force: every sequence ending in
/// `[eos]` within `max_len` tokens, plus every unfinished sequence cut at
/// exactly `max_len`.
pub fn exhaustive_best(model: &Model, inputs: &ModelInputs, max_len: usize) -> Result<(Vec<usize>, f64)> {
    let vocab = &model.vocab;
    let chars: Vec<usize> = (0..vocab.len())
        .filter(|&t| vocab.is_emittable(t) && t != vocab.eos())
        .collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut prefixes: Vec<Vec<usize>> = vec![Vec::new()];
    for len in 0..max_len {
        let mut candidates: Vec<Vec<usize>> = prefixes
            .iter()
            .map(|p| {
                let mut s = p.clone();
                s.push(vocab.eos());
                s
            })
            .collect();
        let next: Vec<Vec<usize>> = prefixes
            .iter()
            .flat_map(|p| {
                chars.iter().map(move |&c| {
                    let mut s = p.clone();
                    s.push(c);
                    s
                })
            })
            .collect();
        if len + 1 == max_len {
            candidates.extend(next.iter().cloned());
        }
        for seq in candidates {
            let lp: f64 = model.score(inputs, &seq)?.iter().sum();
            if best.as_ref().map_or(true, |(_, b)| lp > *b) {
                best = Some((seq, lp));
            }
        }
        prefixes = next;
    }
    Ok(best.expect("at least one candidate"))
}

pub fn same_tokens(a: &Decoded, b: &Decoded) -> bool {
    a.tokens == b.tokens
}

/// Textbook Wagner–Fischer distance, kept independent of the crate's aligner.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Random word string over a small alphabet, so pairs share words often.
pub fn random_sentence(g: &mut impl Rng, max_words: usize) -> String {
    const WORDS: [&str; 6] = ["BIN", "BLUE", "AT", "F", "TWO", "NOW"];
    let n = g.gen_range(0..=max_words);
    (0..n).map(|_| WORDS[g.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

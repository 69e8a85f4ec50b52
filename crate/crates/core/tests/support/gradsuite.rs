//! Finite-difference checks of every tape primitive against the f64
//! reference forwards in `reference.rs`.
#![allow(dead_code)]

use rand::Rng;
use spuq_core::grad::{Tape, Tensor, Var, MASKED_LOGIT};
use spuq_core::rng::Stream;

use super::reference as r;

pub const EPS: f64 = 1e-3;
pub const TRIALS: usize = 20;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
type Reference = Box<dyn Fn(&[Vec<f64>]) -> Vec<Option<f64>>>;

pub struct Trial {
    inputs: Vec<(Vec<usize>, Vec<f32>)>,
    build: Build,
    reference: Reference,
}

pub struct CheckResult {
    pub name: &'static str,
    pub trials: usize,
    /// max |analytic - fd| / max |fd| over all inputs of a trial, worst trial.
    pub max_rel_err: f64,
    /// Worst forward disagreement relative to the output scale.
    pub max_fwd_err: f64,
}

fn dense(f: impl Fn(&[Vec<f64>]) -> Vec<f64> + 'static) -> Reference {
    Box::new(move |x| f(x).into_iter().map(Some).collect())
}

fn scalar(f: impl Fn(&[Vec<f64>]) -> f64 + 'static) -> Reference {
    Box::new(move |x| vec![Some(f(x))])
}

fn uniform(rng: &mut Stream, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero, for kinked or singular primitives.
fn away_from_zero(rng: &mut Stream, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi) * if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

fn input(shape: &[usize], data: Vec<f32>) -> (Vec<usize>, Vec<f32>) {
    (shape.to_vec(), data)
}

fn n(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn run_trial(trial: &Trial, rng: &mut Stream) -> (f64, f64) {
    let xs: Vec<Vec<f64>> = trial.inputs.iter().map(|(_, d)| d.iter().map(|&v| v as f64).collect()).collect();
    let out_ref = (trial.reference)(&xs);
    let coef: Vec<f64> = out_ref.iter().map(|o| if o.is_some() { rng.random_range(-1.0..1.0) } else { 0.0 }).collect();
    let objective = |x: &[Vec<f64>]| -> f64 {
        (trial.reference)(x).iter().zip(&coef).map(|(o, c)| o.map_or(0.0, |v| v * c)).sum()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> =
        trial.inputs.iter().map(|(s, d)| tape.param(Tensor::new(s.clone(), d.clone()).unwrap())).collect();
    let out = (trial.build)(&mut tape, &vars);
    let got = tape.value(out).data().to_vec();
    assert_eq!(got.len(), out_ref.len(), "output length");
    let scale = out_ref.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut fwd_err = 0.0f64;
    for (g, o) in got.iter().zip(&out_ref) {
        match o {
            Some(v) => fwd_err = fwd_err.max((*g as f64 - v).abs() / scale),
            None => assert_eq!(*g, MASKED_LOGIT),
        }
    }
    let shape = tape.shape(out).to_vec();
    let c = tape.constant(Tensor::new(shape, coef.iter().map(|&v| v as f32).collect()).unwrap());
    let weighted = tape.mul(out, c).unwrap();
    let loss = tape.sum(weighted).unwrap();
    tape.backward(loss).unwrap();

    let mut max_diff = 0.0f64;
    let mut max_fd = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(*v) {
            Some(g) => g.data().iter().map(|&x| x as f64).collect(),
            None => vec![0.0; xs[i].len()],
        };
        for j in 0..xs[i].len() {
            let mut plus = xs.clone();
            plus[i][j] += EPS;
            let mut minus = xs.clone();
            minus[i][j] -= EPS;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * EPS);
            max_diff = max_diff.max((analytic[j] - fd).abs());
            max_fd = max_fd.max(fd.abs());
        }
    }
    (max_diff / max_fd.max(1e-12), fwd_err)
}

/// Every primitive with its trial generator.
pub fn cases() -> Vec<(&'static str, fn(&mut Stream) -> Trial)> {
    vec![
        ("matmul", |rng| Trial {
            inputs: vec![input(&[3, 4], uniform(rng, 12, -1.0, 1.0)), input(&[4, 2], uniform(rng, 8, -1.0, 1.0))],
            build: Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
            reference: dense(|x| r::matmul(&x[0], &x[1], 3, 4, 2)),
        }),
        ("conv2d", |rng| Trial {
            inputs: vec![
                input(&[2, 4, 4], uniform(rng, 32, -1.0, 1.0)),
                input(&[3, 2, 3, 3], uniform(rng, 54, -1.0, 1.0)),
                input(&[3], uniform(rng, 3, -1.0, 1.0)),
            ],
            build: Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2])).unwrap()),
            reference: dense(|x| r::conv3d(&x[0], &x[1], Some(&x[2]), [2, 3], [1, 4, 4], [1, 3, 3])),
        }),
        ("conv3d", |rng| Trial {
            inputs: vec![
                input(&[2, 3, 4, 4], uniform(rng, 96, -1.0, 1.0)),
                input(&[2, 2, 3, 3, 3], uniform(rng, 108, -1.0, 1.0)),
                input(&[2], uniform(rng, 2, -1.0, 1.0)),
            ],
            build: Box::new(|t, v| t.conv3d(v[0], v[1], Some(v[2])).unwrap()),
            reference: dense(|x| r::conv3d(&x[0], &x[1], Some(&x[2]), [2, 2], [3, 4, 4], [3, 3, 3])),
        }),
        ("relu", |rng| Trial {
            inputs: vec![input(&[4, 4], away_from_zero(rng, 16, 0.05, 1.0))],
            build: Box::new(|t, v| t.relu(v[0]).unwrap()),
            reference: dense(|x| x[0].iter().map(|v| v.max(0.0)).collect()),
        }),
        ("sigmoid", |rng| Trial {
            inputs: vec![input(&[4, 4], uniform(rng, 16, -3.0, 3.0))],
            build: Box::new(|t, v| t.sigmoid(v[0]).unwrap()),
            reference: dense(|x| x[0].iter().map(|&v| r::sigmoid(v)).collect()),
        }),
        ("ln", |rng| Trial {
            inputs: vec![input(&[4, 4], uniform(rng, 16, 0.5, 2.0))],
            build: Box::new(|t, v| t.ln(v[0]).unwrap()),
            reference: dense(|x| x[0].iter().map(|v| v.ln()).collect()),
        }),
        ("softmax_rows", |rng| Trial {
            inputs: vec![input(&[4, 4], uniform(rng, 16, -2.0, 2.0))],
            build: Box::new(|t, v| t.softmax_rows(v[0]).unwrap()),
            reference: dense(|x| r::softmax_rows(&x[0], 4)),
        }),
        ("add", |rng| Trial {
            inputs: vec![input(&[4, 4], uniform(rng, 16, -1.0, 1.0)), input(&[4, 4], uniform(rng, 16, -1.0, 1.0))],
            build: Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
            reference: dense(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect()),
        }),
        ("sub", |rng| Trial {
            inputs: vec![input(&[4, 4], uniform(rng, 16, -1.0, 1.0)), input(&[4, 4], uniform(rng, 16, -1.0, 1.0))],
            build: Box::new(|t, v| t.sub(v[0], v[1]).unwrap()),
            reference: dense(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a - b).collect()),
        }),
        ("mul", |rng| Trial {
            inputs: vec![input(&[4, 4], uniform(rng, 16, -1.0, 1.0)), input(&[4, 4], uniform(rng, 16, -1.0, 1.0))],
            build: Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
            reference: dense(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect()),
        }),
        ("div", |rng| Trial {
            inputs: vec![input(&[4, 4], uniform(rng, 16, -1.0, 1.0)), input(&[4, 4], away_from_zero(rng, 16, 0.5, 2.0))],
            build: Box::new(|t, v| t.div(v[0], v[1]).unwrap()),
            reference: dense(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a / b).collect()),
        }),
        ("scale", |rng| Trial {
            inputs: vec![input(&[4, 4], uniform(rng, 16, -1.0, 1.0))],
            build: Box::new(|t, v| t.scale(v[0], -1.75).unwrap()),
            reference: dense(|x| x[0].iter().map(|a| a * -1.75).collect()),
        }),
        ("add_scalar", |rng| Trial {
            inputs: vec![input(&[4, 4], uniform(rng, 16, -1.0, 1.0))],
            build: Box::new(|t, v| t.add_scalar(v[0], 0.5).unwrap()),
            reference: dense(|x| x[0].iter().map(|a| a + 0.5).collect()),
        }),
        ("channel_scale", |rng| Trial {
            inputs: vec![input(&[3, 4, 4], uniform(rng, 48, -1.0, 1.0)), input(&[3], uniform(rng, 3, 0.5, 1.5))],
            build: Box::new(|t, v| t.channel_scale(v[0], v[1]).unwrap()),
            reference: dense(|x| x[0].iter().enumerate().map(|(i, a)| a * x[1][i / 16]).collect()),
        }),
        ("dropout", |rng| {
            let seed = rng.random::<u64>();
            Trial {
                inputs: vec![input(&[4, 4], away_from_zero(rng, 16, 0.1, 1.0))],
                build: Box::new(move |t, v| t.dropout(v[0], 0.3, &mut Stream::new(seed, "dropout")).unwrap()),
                // Recover the mask from a forward pass on a probe tape, then
                // check that backward routes gradients through the same mask.
                reference: dense(move |x| {
                    let mut probe = Tape::new();
                    let ones = probe.constant(Tensor::full(vec![4, 4], 1.0));
                    let m = probe.dropout(ones, 0.3, &mut Stream::new(seed, "dropout")).unwrap();
                    x[0].iter().zip(probe.value(m).data()).map(|(a, &k)| a * k as f64).collect()
                }),
            }
        }),
        ("sum", |rng| Trial {
            inputs: vec![input(&[4, 4], uniform(rng, 16, -1.0, 1.0))],
            build: Box::new(|t, v| t.sum(v[0]).unwrap()),
            reference: scalar(|x| x[0].iter().sum()),
        }),
        ("mean", |rng| Trial {
            inputs: vec![input(&[4, 4], uniform(rng, 16, -1.0, 1.0))],
            build: Box::new(|t, v| t.mean(v[0]).unwrap()),
            reference: scalar(|x| x[0].iter().sum::<f64>() / 16.0),
        }),
        ("mse", |rng| Trial {
            inputs: vec![input(&[4, 4], uniform(rng, 16, -1.0, 1.0)), input(&[4, 4], uniform(rng, 16, -1.0, 1.0))],
            build: Box::new(|t, v| t.mse(v[0], v[1]).unwrap()),
            reference: scalar(|x| r::mse(&x[0], &x[1])),
        }),
        ("weighted_l1", |rng| {
            let y = uniform(rng, 16, -1.0, 1.0);
            let x: Vec<f32> = y.iter().zip(away_from_zero(rng, 16, 0.05, 0.5)).map(|(a, d)| a + d).collect();
            let w = uniform(rng, 16, 0.0, 1.0);
            let w64: Vec<f64> = w.iter().map(|&v| v as f64).collect();
            Trial {
                inputs: vec![input(&[4, 4], x), input(&[4, 4], y)],
                build: Box::new(move |t, v| t.weighted_l1(v[0], v[1], &Tensor::new(vec![4, 4], w.clone()).unwrap()).unwrap()),
                reference: scalar(move |x| r::weighted_l1(&x[0], &x[1], &w64)),
            }
        }),
        ("ssim", |rng| {
            let win = if rng.random::<bool>() { 3 } else { 5 };
            Trial {
                inputs: vec![input(&[7, 8], uniform(rng, 56, 0.0, 1.0)), input(&[7, 8], uniform(rng, 56, 0.0, 1.0))],
                build: Box::new(move |t, v| t.ssim(v[0], v[1], win, 1e-4, 9e-4).unwrap()),
                reference: scalar(move |x| r::ssim(&x[0], &x[1], 7, 8, win, 1e-4, 9e-4)),
            }
        }),
        ("grid_sample_2d", |rng| {
            let (h, w) = (5usize, 6usize);
            // Sample points whose coordinates stay at least 0.15 px from any
            // integer, so finite differences never straddle a bilinear kink.
            let mut coord = |p: usize, len: usize| loop {
                let s: f32 = rng.random_range(-1.5..len as f32 + 0.5);
                let frac = s - s.floor();
                if (0.15..0.85).contains(&frac) {
                    return s - p as f32;
                }
            };
            let mut field = vec![0f32; 2 * h * w];
            for y in 0..h {
                for x in 0..w {
                    field[y * w + x] = coord(x, w);
                    field[h * w + y * w + x] = coord(y, h);
                }
            }
            Trial {
                inputs: vec![input(&[h, w], uniform(rng, h * w, 0.0, 1.0)), input(&[2, h, w], field)],
                build: Box::new(|t, v| t.grid_sample_2d(v[0], v[1]).unwrap()),
                reference: dense(move |x| r::grid_sample(&x[0], &x[1], h, w)),
            }
        }),
        ("concrete_gate", |rng| {
            let noise: Vec<f32> = (0..3).map(|_| rng.random_range(0.05..0.95)).collect();
            let noise64: Vec<f64> = noise.iter().map(|&v| v as f64).collect();
            Trial {
                inputs: vec![input(&[3, 4, 4], uniform(rng, 48, -1.0, 1.0)), input(&[], vec![rng.random_range(-3.0..-0.5)])],
                build: Box::new(move |t, v| t.concrete_gate_with_noise(v[0], v[1], &noise, 0.5).unwrap()),
                reference: dense(move |x| r::concrete_gate(&x[0], x[1][0], &noise64, 0.5)),
            }
        }),
        ("window_logits", |rng| {
            let rad = if rng.random::<bool>() { 1 } else { 2 };
            Trial {
                inputs: vec![input(&[3, 5, 4], uniform(rng, 60, -1.0, 1.0)), input(&[3, 5, 4], uniform(rng, 60, -1.0, 1.0))],
                build: Box::new(move |t, v| t.window_logits(v[0], v[1], rad, 0.7).unwrap()),
                reference: Box::new(move |x| r::window_logits(&x[0], &x[1], 3, 5, 4, rad, 0.7)),
            }
        }),
        ("window_warp", |rng| Trial {
            inputs: vec![input(&[20, 9], uniform(rng, 180, 0.0, 1.0)), input(&[5, 4], uniform(rng, 20, 0.0, 1.0))],
            build: Box::new(|t, v| t.window_warp(v[0], v[1], 1).unwrap()),
            reference: dense(|x| r::window_warp(&x[0], &x[1], 5, 4, 1)),
        }),
        ("avg_pool2", |rng| Trial {
            inputs: vec![input(&[2, 3, 5, 4], uniform(rng, 120, -1.0, 1.0))],
            build: Box::new(|t, v| t.avg_pool2(v[0]).unwrap()),
            reference: dense(|x| r::avg_pool2(&x[0], [2, 3, 5, 4])),
        }),
        ("upsample2", |rng| Trial {
            inputs: vec![input(&[2, 2, 3, 2], uniform(rng, 24, -1.0, 1.0))],
            build: Box::new(|t, v| t.upsample2(v[0], [3, 5, 4]).unwrap()),
            reference: dense(|x| r::upsample2(&x[0], 2, [3, 5, 4])),
        }),
        ("reshape_narrow_concat", |rng| Trial {
            inputs: vec![input(&[4, 4], uniform(rng, 16, -1.0, 1.0)), input(&[2, 3], uniform(rng, 6, -1.0, 1.0))],
            build: Box::new(|t, v| {
                let a = t.narrow(v[0], 5, &[2, 3]).unwrap();
                let b = t.reshape(v[1], &[6]).unwrap();
                let a = t.reshape(a, &[6]).unwrap();
                t.concat(&[b, a, b], &[3, 6]).unwrap()
            }),
            reference: dense(|x| {
                let mut out = x[1].clone();
                out.extend_from_slice(&x[0][5..11]);
                out.extend_from_slice(&x[1]);
                out
            }),
        }),
        ("composition", |rng| Trial {
            inputs: vec![
                input(&[4, 4], away_from_zero(rng, 16, 0.1, 1.0)),
                input(&[4, 4], uniform(rng, 16, -1.0, 1.0)),
                input(&[4, 4], uniform(rng, 16, 0.0, 1.0)),
            ],
            build: Box::new(|t, v| {
                let a = t.relu(v[0]).unwrap();
                let m = t.matmul(a, v[1]).unwrap();
                let s = t.softmax_rows(m).unwrap();
                let g = t.sigmoid(v[2]).unwrap();
                let p = t.mul(s, g).unwrap();
                t.mse(p, v[2]).unwrap()
            }),
            reference: scalar(|x| {
                let a: Vec<f64> = x[0].iter().map(|v| v.max(0.0)).collect();
                let s = r::softmax_rows(&r::matmul(&a, &x[1], 4, 4, 4), 4);
                let p: Vec<f64> = s.iter().zip(&x[2]).map(|(a, b)| a * r::sigmoid(*b)).collect();
                r::mse(&p, &x[2])
            }),
        }),
    ]
}

/// Runs every case `trials` times from a fixed seed.
pub fn run_suite(seed: u64, trials: usize) -> Vec<CheckResult> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(ci, (name, make))| {
            let mut rng = Stream::derive(seed, "gradcheck", ci as u64);
            let mut res = CheckResult { name, trials, max_rel_err: 0.0, max_fwd_err: 0.0 };
            for _ in 0..trials {
                let trial = make(&mut rng);
                let (rel, fwd) = run_trial(&trial, &mut rng);
                res.max_rel_err = res.max_rel_err.max(rel);
                res.max_fwd_err = res.max_fwd_err.max(fwd);
            }
            res
        })
        .collect()
}

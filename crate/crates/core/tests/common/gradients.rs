//! Finite-difference checks for every tape operation and both training
//! losses on randomized tiny instances.

use rand::Rng;
use skb_semcom::channel::NoisePower;
use skb_semcom::cvae::{kl_on_tape, Cvae, CvaeConfig, LatentChannel, Likelihood};
use skb_semcom::diffcore::{Matrix, ParamSet, Tape, Var};
use skb_semcom::encoder::{loss_l1, ClassTerm, Encoder, EncoderLossWeights};
use skb_semcom::rng::{normal_vec, rng_from_seed, SimRng};
use skb_semcom::skb::AttributeMatrix;

use super::{fd_check, signed_away_from_zero, uniform_matrix, Evaluated};

/// Instances whose inputs sit closer than this to a ReLU kink are redrawn.
const KINK_MARGIN: f64 = 1e-3;

pub struct SuiteLine {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

fn dims(rng: &mut SimRng) -> (usize, usize) {
    (rng.random_range(1..=4), rng.random_range(1..=4))
}

fn normal_matrix(rng: &mut SimRng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, normal_vec(rng, r * c)).unwrap()
}

fn op_instance(name: &str, rng: &mut SimRng) -> (Vec<Matrix>, Build) {
    let (r, c) = dims(rng);
    let u = |rng: &mut SimRng| uniform_matrix(rng, r, c, -2.0, 2.0);
    match name {
        "matmul" => {
            let k = rng.random_range(1..=4);
            let a = uniform_matrix(rng, r, k, -2.0, 2.0);
            let b = uniform_matrix(rng, k, c, -2.0, 2.0);
            (vec![a, b], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()))
        }
        "add" => (vec![u(rng), u(rng)], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        "sub" => (vec![u(rng), u(rng)], Box::new(|t, v| t.sub(v[0], v[1]).unwrap())),
        "mul" => (vec![u(rng), u(rng)], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
        "div" => {
            let b = signed_away_from_zero(rng, r, c, 0.5);
            (vec![u(rng), b], Box::new(|t, v| t.div(v[0], v[1]).unwrap()))
        }
        "add_row" => {
            let row = uniform_matrix(rng, 1, c, -2.0, 2.0);
            (vec![u(rng), row], Box::new(|t, v| t.add_row(v[0], v[1]).unwrap()))
        }
        "scale" => {
            let s = rng.random_range(-3.0..3.0);
            (vec![u(rng)], Box::new(move |t, v| t.scale(v[0], s)))
        }
        "add_scalar" => {
            let s = rng.random_range(-3.0..3.0);
            (vec![u(rng)], Box::new(move |t, v| t.add_scalar(v[0], s)))
        }
        "relu" => (
            vec![signed_away_from_zero(rng, r, c, 0.05)],
            Box::new(|t, v| t.relu(v[0])),
        ),
        "sigmoid" => (vec![u(rng)], Box::new(|t, v| t.sigmoid(v[0]))),
        "exp" => (vec![u(rng)], Box::new(|t, v| t.exp(v[0]))),
        "log" => (vec![uniform_matrix(rng, r, c, 0.2, 3.0)], Box::new(|t, v| t.log(v[0]))),
        "clamp_min" => {
            // entries stay at least 0.1 away from the floor
            let m = signed_away_from_zero(rng, r, c, 0.1);
            let floor = rng.random_range(-0.5..0.5);
            let shifted = m.map(|x| x + floor);
            (vec![shifted], Box::new(move |t, v| t.clamp_min(v[0], floor)))
        }
        "sum" => (vec![u(rng)], Box::new(|t, v| t.sum(v[0]))),
        "mean" => (vec![u(rng)], Box::new(|t, v| t.mean(v[0]))),
        "sum_cols" => (vec![u(rng)], Box::new(|t, v| t.sum_cols(v[0]))),
        "softmax_cross_entropy" => {
            let c = c.max(2);
            let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
            let logits = uniform_matrix(rng, r, c, -3.0, 3.0);
            (
                vec![logits],
                Box::new(move |t, v| t.softmax_cross_entropy(v[0], &targets).unwrap()),
            )
        }
        "log_softmax" => (vec![u(rng)], Box::new(|t, v| t.log_softmax(v[0]))),
        "bce_with_logits" => {
            let target = uniform_matrix(rng, r, c, 0.0, 1.0);
            let logits = uniform_matrix(rng, r, c, -4.0, 4.0);
            (
                vec![logits],
                Box::new(move |t, v| t.bce_with_logits(v[0], &target).unwrap()),
            )
        }
        "reparam" => {
            let eps = normal_matrix(rng, r, c);
            let sigma = uniform_matrix(rng, r, c, 0.1, 2.0);
            (
                vec![u(rng), sigma],
                Box::new(move |t, v| t.reparam(v[0], v[1], &eps).unwrap()),
            )
        }
        "squared_error" => (
            vec![u(rng), u(rng)],
            Box::new(|t, v| t.squared_error(v[0], v[1]).unwrap()),
        ),
        "concat_cols" => {
            let c2 = rng.random_range(1..=3);
            let c3 = rng.random_range(1..=3);
            let parts = vec![
                u(rng),
                uniform_matrix(rng, r, c2, -2.0, 2.0),
                uniform_matrix(rng, r, c3, -2.0, 2.0),
            ];
            (parts, Box::new(|t, v| t.concat_cols(v).unwrap()))
        }
        "slice_cols" => {
            let start = rng.random_range(0..c);
            let len = rng.random_range(1..=c - start);
            (
                vec![u(rng)],
                Box::new(move |t, v| t.slice_cols(v[0], start, len).unwrap()),
            )
        }
        "transpose" => (vec![u(rng)], Box::new(|t, v| t.transpose(v[0]))),
        "kl_diag_gaussians" => {
            let mq = u(rng);
            let mp = u(rng);
            let sq = uniform_matrix(rng, r, c, 0.2, 2.0);
            let sp = uniform_matrix(rng, r, c, 0.2, 2.0);
            (
                vec![mq, sq, mp, sp],
                Box::new(|t, v| kl_on_tape(t, v[0], v[1], v[2], v[3]).unwrap()),
            )
        }
        other => panic!("no generator for {other}"),
    }
}

pub const OPS: [&str; 26] = [
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "add_row",
    "scale",
    "add_scalar",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "clamp_min",
    "sum",
    "mean",
    "sum_cols",
    "softmax_cross_entropy",
    "log_softmax",
    "bce_with_logits",
    "reparam",
    "squared_error",
    "concat_cols",
    "slice_cols",
    "transpose",
    "kl_diag_gaussians",
    "broadcast_via_matmul",
];

fn eval_op(inputs: &[Matrix], build: &Build, weights: &Matrix) -> Evaluated {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| t.leaf(m.clone())).collect();
    let out = build(&mut t, &vars);
    let w = t.leaf(weights.clone());
    let weighted = t.mul(out, w).unwrap();
    let loss = t.sum(weighted);
    t.backward(loss).unwrap();
    Evaluated {
        loss: t.value(loss).item(),
        grads: vars.iter().map(|v| t.grad(*v).clone()).collect(),
        margin: t.relu_margin().unwrap_or(f64::INFINITY),
    }
}

fn check_op(name: &'static str, instances: usize, rng: &mut SimRng) -> SuiteLine {
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (inputs, build) = if name == "broadcast_via_matmul" {
            // column vector times a ones row, as used by the latent channel
            let (r, c) = dims(rng);
            let col = uniform_matrix(rng, r, 1, -2.0, 2.0);
            let b: Build = Box::new(move |t, v| {
                let ones = t.leaf(Matrix::filled(1, c, 1.0));
                t.matmul(v[0], ones).unwrap()
            });
            (vec![col], b)
        } else {
            op_instance(name, rng)
        };
        let shape = {
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|m| t.leaf(m.clone())).collect();
            let out = build(&mut t, &vars);
            t.value(out).shape()
        };
        let weights = uniform_matrix(rng, shape.0, shape.1, -1.0, 1.0);
        let e = fd_check(&inputs, None, rng, |vals| eval_op(vals, &build, &weights));
        worst = worst.max(e);
    }
    SuiteLine { name, instances, worst }
}

fn rebuild(names: &[String], values: &[Matrix]) -> ParamSet {
    let mut ps = ParamSet::new();
    for (n, v) in names.iter().zip(values) {
        ps.insert(n.clone(), v.clone());
    }
    ps
}

fn random_skb(rng: &mut SimRng, classes: usize, d: usize) -> AttributeMatrix {
    let rows: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..d).map(|_| rng.random_range(0.05..1.0)).collect())
        .collect();
    AttributeMatrix::new(&rows).unwrap()
}

fn check_encoder_loss(instances: usize, rng: &mut SimRng) -> SuiteLine {
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let input = rng.random_range(2..=6);
        let hidden = rng.random_range(2..=5);
        let d = rng.random_range(1..=4);
        let classes = rng.random_range(2..=4);
        let n = rng.random_range(1..=4);
        let skb = random_skb(rng, classes, d);
        let enc = Encoder::new(input, hidden, d, rng.random());
        let x = uniform_matrix(rng, n, input, 0.0, 1.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let weights = EncoderLossWeights {
            lambda1: rng.random_range(0.0..2.0),
            lambda2: rng.random_range(0.0..2.0),
        };
        let term = if done % 2 == 0 {
            ClassTerm::SoftmaxOverClasses
        } else {
            ClassTerm::LiteralBatchNormalized
        };
        let names = enc.params().names().to_vec();
        let eval = |vals: &[Matrix]| {
            let e = Encoder::from_params(rebuild(&names, vals)).unwrap();
            let mut t = Tape::new();
            let b = e.params().bind(&mut t);
            let xv = t.leaf(x.clone());
            let s = e.forward(&mut t, &b, xv).unwrap();
            let loss = loss_l1(&mut t, s, &labels, &skb, weights, term).unwrap();
            t.backward(loss).unwrap();
            Evaluated {
                loss: t.value(loss).item(),
                grads: e.params().grads(&t, &b),
                margin: t.relu_margin().unwrap_or(f64::INFINITY),
            }
        };
        let values = enc.params().values().to_vec();
        if eval(&values).margin < KINK_MARGIN {
            continue;
        }
        worst = worst.max(fd_check(&values, Some(30), rng, eval));
        done += 1;
    }
    SuiteLine {
        name: "encoder loss",
        instances,
        worst,
    }
}

fn check_cvae_loss(instances: usize, rng: &mut SimRng) -> SuiteLine {
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let groups = rng.random_range(1..=3);
        let cfg = CvaeConfig {
            group_widths: (0..groups).map(|_| rng.random_range(1..=3)).collect(),
            hidden: rng.random_range(2..=5),
            embed: rng.random_range(1..=3),
            conditional: rng.random_bool(0.5),
            ..CvaeConfig::default()
        };
        let (w, h) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let d = rng.random_range(1..=3);
        let mut cvae = Cvae::new(&cfg, (w, h, 1), d, rng.random()).unwrap();
        // move the zero-initialized heads off zero so every path carries gradient
        for m in cvae.params_mut().values_mut() {
            if m.as_slice().iter().all(|&v| v == 0.0) {
                let r = uniform_matrix(rng, m.rows(), m.cols(), -0.3, 0.3);
                m.as_mut_slice().copy_from_slice(r.as_slice());
            }
        }
        let n = rng.random_range(1..=3);
        let x = uniform_matrix(rng, n, w * h, 0.0, 1.0);
        let k = uniform_matrix(rng, n, d, 0.0, 1.0);
        let eps = cvae.draw_eps(n, rng);
        let l = cfg.latent_len();
        let unit = normal_matrix(rng, n, l);
        let additive = normal_matrix(rng, n, l);
        let beta = rng.random_range(0.0..2.0);
        let likelihood = if rng.random_bool(0.5) {
            Likelihood::Bernoulli
        } else {
            Likelihood::Gaussian {
                sigma: rng.random_range(0.1..1.0),
            }
        };
        let channel_kind = done % 4;
        let snr_db = rng.random_range(0.0..10.0);
        let eval = |vals: &[Matrix]| {
            let mut model = cvae.clone();
            model.params_mut().values_mut().clone_from_slice(vals);
            let mut t = Tape::new();
            let b = model.params().bind(&mut t);
            let channel = match channel_kind {
                0 => LatentChannel::Clean,
                1 => LatentChannel::Additive(&additive),
                2 => LatentChannel::Awgn {
                    snr_db,
                    power: NoisePower::Empirical,
                    unit_noise: &unit,
                },
                _ => LatentChannel::Awgn {
                    snr_db,
                    power: NoisePower::FixedSigma(0.3),
                    unit_noise: &unit,
                },
            };
            let terms = model
                .loss_l2(&mut t, &b, &x, &k, &eps, channel, beta, likelihood)
                .unwrap();
            t.backward(terms.total).unwrap();
            Evaluated {
                loss: t.value(terms.total).item(),
                grads: model.params().grads(&t, &b),
                margin: t.relu_margin().unwrap_or(f64::INFINITY),
            }
        };
        let values = cvae.params().values().to_vec();
        if eval(&values).margin < KINK_MARGIN {
            continue;
        }
        worst = worst.max(fd_check(&values, Some(30), rng, eval));
        done += 1;
    }
    SuiteLine {
        name: "cvae loss",
        instances,
        worst,
    }
}

pub fn run_gradient_suite(instances: usize, seed: u64) -> Vec<SuiteLine> {
    let mut rng = rng_from_seed(seed);
    let mut lines: Vec<SuiteLine> = OPS.iter().map(|&op| check_op(op, instances, &mut rng)).collect();
    lines.push(check_encoder_loss(instances, &mut rng));
    lines.push(check_cvae_loss(instances, &mut rng));
    lines
}

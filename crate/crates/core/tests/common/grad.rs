//! Analytic gradients against central finite differences.
//!
//! Every trial draws fresh random inputs (extents ≤ 5), reduces the op
//! output to a scalar with a fixed random projection, and compares the
//! backward pass with `(f(x+h) − f(x−h)) / 2h` for every input element.
//! The per-trial error is `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wsdl::attention::BBox;
use wsdl::heads::{head_forward, head_loss, head_targets, HeadConfig, INPUT_SCALE};
use wsdl::rpn::{generate_anchors, label_anchors, rpn_forward, rpn_loss, AnchorConfig};
use wsdl::tensor::{BoundParams, Graph, Tensor, Var};
use wsdl::Result;

pub const TRIALS: usize = 100;
pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(dims, data).unwrap()
}

/// Distinct values at least 0.01 apart, so no pooling window is near a tie.
fn distinct(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n: usize = dims.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let data = order
        .iter()
        .map(|&k| k as f64 * 0.05 - 1.0 + rng.gen_range(0.0..0.01))
        .collect();
    Tensor::new(dims, data).unwrap()
}

/// Scalar loss of `build` at `inputs`, projected onto `weights` when the
/// output is not already scalar.
fn forward<F>(
    inputs: &[Tensor],
    weights: &mut Option<Tensor>,
    rng: &mut ChaCha8Rng,
    build: &F,
) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().requires_grad())).collect();
    let out = build(&mut g, &vars)?;
    let loss = if g.value(out).numel() == 1 {
        out
    } else {
        let dims = g.dims(out).to_vec();
        let w = weights
            .get_or_insert_with(|| random_tensor(rng, &dims, -1.0, 1.0))
            .clone();
        let w = g.leaf(w);
        let p = g.mul(out, w)?;
        g.sum(p)?
    };
    Ok((g, vars, loss))
}

/// Relative error of one trial over all inputs.
fn trial<F>(inputs: Vec<Tensor>, rng: &mut ChaCha8Rng, build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut weights = None;
    let (mut g, vars, loss) = forward(&inputs, &mut weights, rng, &build).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|&v| {
            let n = g.value(v).numel();
            g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n])
        })
        .collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let eval = |delta: f64, weights: &mut Option<Tensor>, rng: &mut ChaCha8Rng| {
                let mut shifted = inputs.clone();
                shifted[i].data_mut()[j] += delta;
                let (g, _, loss) = forward(&shifted, weights, rng, &build).unwrap();
                g.value(loss).item()
            };
            let plus = eval(STEP, &mut weights, rng);
            let minus = eval(-STEP, &mut weights, rng);
            numeric.push((plus - minus) / (2.0 * STEP));
        }
    }
    relative_error(&analytic, &numeric)
}

fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub struct SuiteOutcome {
    pub name: &'static str,
    pub trials: usize,
    /// Largest per-trial error; NaN when any trial was non-finite.
    pub worst: f64,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.trials >= TRIALS && self.worst < TOLERANCE
    }
}

type TrialFn = fn(&mut ChaCha8Rng) -> f64;

/// Every differentiable op, the small network, and both composite losses.
pub const SUITES: &[(&str, u64, TrialFn)] = &[
    ("conv2d", 1, conv2d),
    ("relu", 2, relu),
    ("max_pool2d", 3, max_pool),
    ("global_avg_pool", 4, global_avg_pool),
    ("linear", 5, linear),
    ("softmax", 6, softmax),
    ("cross_entropy", 7, cross_entropy),
    ("softmax+cross_entropy", 8, softmax_cross_entropy),
    ("smooth_l1", 9, smooth_l1),
    ("reshape", 10, reshape),
    ("channels_last", 11, channels_last),
    ("gather_rows", 12, gather_rows),
    ("scale/add/mul/sum", 13, scale_add_mul_sum),
    ("conv+relu+linear", 14, conv_relu_linear_network),
    ("rpn_loss", 15, rpn_loss_trial),
    ("head_loss", 16, head_loss_trial),
];

pub fn run_suite(name: &str) -> SuiteOutcome {
    let &(name, seed, make) = SUITES.iter().find(|s| s.0 == name).expect("known suite");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let err = make(&mut rng);
        worst = if err.is_finite() { worst.max(err) } else { f64::NAN };
    }
    SuiteOutcome {
        name,
        trials: TRIALS,
        worst,
    }
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=5)
}

fn conv2d(rng: &mut ChaCha8Rng) -> f64 {
    let (n, c, k) = (rng.gen_range(1..=2), dim(rng), rng.gen_range(1..=4));
    let (kh, kw): (usize, usize) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let pad: usize = rng.gen_range(0..=1);
    let stride = rng.gen_range(1..=2);
    let h = rng.gen_range(kh.saturating_sub(2 * pad).max(1)..=5);
    let w = rng.gen_range(kw.saturating_sub(2 * pad).max(1)..=5);
    let inputs = vec![
        random_tensor(rng, &[n, c, h, w], -1.0, 1.0),
        random_tensor(rng, &[k, c, kh, kw], -1.0, 1.0),
        random_tensor(rng, &[k], -1.0, 1.0),
    ];
    trial(inputs, rng, move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad))
}

fn relu(rng: &mut ChaCha8Rng) -> f64 {
    let dims = [dim(rng), dim(rng)];
    trial(vec![away_from_zero(rng, &dims)], rng, |g, v| g.relu(v[0]))
}

fn max_pool(rng: &mut ChaCha8Rng) -> f64 {
    let dims = [
        rng.gen_range(1..=2),
        dim(rng),
        2 * rng.gen_range(1..=2),
        2 * rng.gen_range(1..=2),
    ];
    trial(vec![distinct(rng, &dims)], rng, |g, v| g.max_pool2d(v[0]))
}

fn global_avg_pool(rng: &mut ChaCha8Rng) -> f64 {
    let dims = [dim(rng), dim(rng), dim(rng), dim(rng)];
    trial(vec![random_tensor(rng, &dims, -1.0, 1.0)], rng, |g, v| {
        g.global_avg_pool(v[0])
    })
}

fn linear(rng: &mut ChaCha8Rng) -> f64 {
    let (n, d, e) = (dim(rng), dim(rng), dim(rng));
    let inputs = vec![
        random_tensor(rng, &[n, d], -1.0, 1.0),
        random_tensor(rng, &[d, e], -1.0, 1.0),
        random_tensor(rng, &[e], -1.0, 1.0),
    ];
    trial(inputs, rng, |g, v| g.linear(v[0], v[1], v[2]))
}

fn softmax(rng: &mut ChaCha8Rng) -> f64 {
    let dims = [dim(rng), dim(rng)];
    trial(vec![random_tensor(rng, &dims, -3.0, 3.0)], rng, |g, v| g.softmax(v[0]))
}

fn cross_entropy(rng: &mut ChaCha8Rng) -> f64 {
    let (n, c) = (dim(rng), rng.gen_range(2..=5));
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
    let probs = random_tensor(rng, &[n, c], 0.05, 1.0);
    trial(vec![probs], rng, move |g, v| g.cross_entropy(v[0], &labels))
}

fn softmax_cross_entropy(rng: &mut ChaCha8Rng) -> f64 {
    let (n, c) = (dim(rng), rng.gen_range(2..=5));
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
    trial(vec![random_tensor(rng, &[n, c], -3.0, 3.0)], rng, move |g, v| {
        let p = g.softmax(v[0])?;
        g.cross_entropy(p, &labels)
    })
}

fn smooth_l1(rng: &mut ChaCha8Rng) -> f64 {
    let dims = [dim(rng), dim(rng)];
    let pred = random_tensor(rng, &dims, -3.0, 3.0);
    // Keep every difference clear of the |d| = 1 switch.
    let target_data: Vec<f64> = pred
        .data()
        .iter()
        .map(|p| {
            let m = if rng.gen_bool(0.5) {
                rng.gen_range(0.0..0.9)
            } else {
                rng.gen_range(1.1..2.5)
            };
            if rng.gen_bool(0.5) {
                p + m
            } else {
                p - m
            }
        })
        .collect();
    let target = Tensor::new(&dims, target_data).unwrap();
    trial(vec![pred, target], rng, |g, v| g.smooth_l1(v[0], v[1]))
}

fn reshape(rng: &mut ChaCha8Rng) -> f64 {
    let (a, b, c) = (dim(rng), dim(rng), dim(rng));
    trial(vec![random_tensor(rng, &[a, b, c], -1.0, 1.0)], rng, move |g, v| {
        g.reshape(v[0], &[a * b, c])
    })
}

fn channels_last(rng: &mut ChaCha8Rng) -> f64 {
    let dims = [dim(rng), dim(rng), dim(rng), dim(rng)];
    trial(vec![random_tensor(rng, &dims, -1.0, 1.0)], rng, |g, v| {
        g.channels_last(v[0])
    })
}

fn gather_rows(rng: &mut ChaCha8Rng) -> f64 {
    let (n, w) = (dim(rng), dim(rng));
    let rows: Vec<usize> = (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(0..n)).collect();
    trial(vec![random_tensor(rng, &[n, w], -1.0, 1.0)], rng, move |g, v| {
        g.gather_rows(v[0], &rows)
    })
}

fn scale_add_mul_sum(rng: &mut ChaCha8Rng) -> f64 {
    let dims = [dim(rng), dim(rng)];
    let factor = rng.gen_range(-2.0..2.0);
    let inputs = vec![
        random_tensor(rng, &dims, -1.0, 1.0),
        random_tensor(rng, &dims, -1.0, 1.0),
    ];
    trial(inputs, rng, move |g, v| {
        let s = g.scale(v[0], factor)?;
        let a = g.add(s, v[1])?;
        let m = g.mul(a, v[0])?;
        g.sum(m)
    })
}

fn conv_relu_linear_network(rng: &mut ChaCha8Rng) -> f64 {
    let (c, k, e) = (dim(rng), dim(rng), dim(rng));
    let inputs = vec![
        random_tensor(rng, &[2, c, 4, 4], -1.0, 1.0),
        random_tensor(rng, &[k, c, 3, 3], -0.5, 0.5),
        random_tensor(rng, &[k], -0.5, 0.5),
        random_tensor(rng, &[k, e], -1.0, 1.0),
        random_tensor(rng, &[e], -1.0, 1.0),
    ];
    trial(inputs, rng, |g, v| {
        let h = g.conv2d(v[0], v[1], v[2], 1, 1)?;
        let h = g.relu(h)?;
        let h = g.max_pool2d(h)?;
        let h = g.global_avg_pool(h)?;
        let logits = g.linear(h, v[3], v[4])?;
        let p = g.softmax(logits)?;
        g.cross_entropy(p, &[0, e - 1])
    })
}

fn bound_from(names: &[&str], vars: &[Var]) -> BoundParams {
    names.iter().zip(vars).map(|(n, v)| (n.to_string(), *v)).collect()
}

fn rpn_loss_trial(rng: &mut ChaCha8Rng) -> f64 {
    let config = AnchorConfig {
        anchors_per_image_sampled: 24,
        ..AnchorConfig::default()
    };
    let k = config.anchors_per_cell();
    let names = [
        "shared",
        "rpn.conv.weight",
        "rpn.conv.bias",
        "rpn.obj.weight",
        "rpn.obj.bias",
        "rpn.reg.weight",
        "rpn.reg.bias",
    ];
    let c = rng.gen_range(1..=3);
    let (gh, gw) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
    let (w, h) = ((gw * config.stride) as f64, (gh * config.stride) as f64);
    let anchors = generate_anchors(gh, gw, &config);
    let pseudo: Vec<BBox> = (0..rng.gen_range(1..=2))
        .map(|_| {
            let (x0, y0) = (rng.gen_range(0.0..w / 2.0), rng.gen_range(0.0..h / 2.0));
            BBox::new(x0, y0, rng.gen_range(x0 + 4.0..=w), rng.gen_range(y0 + 4.0..=h)).unwrap()
        })
        .collect();
    let batch = label_anchors(&anchors, &pseudo, &config, rng).unwrap();
    let inputs = vec![
        random_tensor(rng, &[1, c, gh, gw], -1.0, 1.0),
        random_tensor(rng, &[c, c, 3, 3], -0.5, 0.5),
        random_tensor(rng, &[c], -0.5, 0.5),
        random_tensor(rng, &[2 * k, c, 1, 1], -0.5, 0.5),
        random_tensor(rng, &[2 * k], -0.5, 0.5),
        random_tensor(rng, &[4 * k, c, 1, 1], -0.5, 0.5),
        random_tensor(rng, &[4 * k], -0.5, 0.5),
    ];
    let cfg = config.clone();
    trial(inputs, rng, move |g, v| {
        let bound = bound_from(&names, v);
        let (obj, deltas) = rpn_forward(g, &bound, v[0], k)?;
        rpn_loss(g, obj, deltas, &batch, &cfg, 0)
    })
}

fn head_loss_trial(rng: &mut ChaCha8Rng) -> f64 {
    let names = [
        "pooled",
        "head.fc.weight",
        "head.fc.bias",
        "head.cls.weight",
        "head.cls.bias",
        "head.reg.weight",
        "head.reg.bias",
    ];
    let classes = rng.gen_range(2..=4);
    let config = HeadConfig {
        hidden: dim(rng),
        rois_per_image: 6,
        ..HeadConfig::new(classes)
    };
    let input = rng.gen_range(2..=8);
    let pseudo = BBox::new(8.0, 8.0, 24.0, 28.0).unwrap();
    let proposals: Vec<BBox> = (0..5)
        .map(|_| {
            let (x0, y0) = (rng.gen_range(0.0..16.0), rng.gen_range(0.0..16.0));
            BBox::new(x0, y0, rng.gen_range(x0 + 4.0..32.0), rng.gen_range(y0 + 4.0..32.0)).unwrap()
        })
        .collect();
    let label = rng.gen_range(0..classes);
    let targets = head_targets(&proposals, &pseudo, label, (32, 32), &config, rng);
    let r = targets.len();
    let hidden = config.hidden;
    let inputs = vec![
        random_tensor(rng, &[r, input], 0.0, 2.0),
        random_tensor(rng, &[input, hidden], -0.5, 0.5),
        random_tensor(rng, &[hidden], -0.5, 0.5),
        random_tensor(rng, &[hidden, classes + 1], -0.5, 0.5),
        random_tensor(rng, &[classes + 1], -0.5, 0.5),
        random_tensor(rng, &[hidden, 4], -0.5, 0.5),
        random_tensor(rng, &[4], -0.5, 0.5),
    ];
    let input_scale = rng.gen_range(0.5..2.0);
    let reg_weight = config.reg_weight;
    trial(inputs, rng, move |g, v| {
        let mut bound = bound_from(&names[1..], &v[1..]);
        let scale = g.leaf(Tensor::new(&[1], vec![input_scale])?);
        bound.insert(format!("head.{INPUT_SCALE}"), scale);
        let (scores, deltas) = head_forward(g, &bound, "head", v[0])?;
        head_loss(g, scores, deltas, &targets, reg_weight)
    })
}

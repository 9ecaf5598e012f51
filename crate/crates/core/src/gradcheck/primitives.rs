// Per-primitive gradient certification on random small inputs (64-bit).

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_diff, CheckReport, DEFAULT_STEP, PRIMITIVE_TOLERANCE};
use crate::autodiff::{self, GradOptions, Graph, Var};
use crate::tensor::{numel, Tensor};

type OpFn = Box<dyn for<'g> Fn(&[Var<'g, f64>]) -> autodiff::Result<Var<'g, f64>>>;

#[derive(Clone, Copy, PartialEq)]
enum Inputs {
    Uniform,
    /// Kept away from zero so relu kinks are not straddled.
    AwayFromZero,
    /// Distinct values on a coarse grid so max-pool ties are not straddled.
    Distinct,
}

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    inputs: Inputs,
    f: OpFn,
}

fn case(name: &'static str, shapes: &[&[usize]], inputs: Inputs, f: OpFn) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        inputs,
        f,
    }
}

fn cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    use Inputs::*;
    let gather_idx: Arc<Vec<usize>> = Arc::new((0..10).map(|_| rng.gen_range(0..12)).collect());
    let scatter_idx: Arc<Vec<usize>> = Arc::new((0..7).map(|_| rng.gen_range(0..5)).collect());
    let gi = gather_idx.clone();
    let si = scatter_idx.clone();
    vec![
        case("add", &[&[2, 3], &[2, 3]], Uniform, Box::new(|v| v[0].add(v[1]))),
        case("sub", &[&[2, 3], &[2, 3]], Uniform, Box::new(|v| v[0].sub(v[1]))),
        case("mul", &[&[2, 3], &[2, 3]], Uniform, Box::new(|v| v[0].mul(v[1]))),
        case("scale", &[&[5]], Uniform, Box::new(|v| v[0].scale(-1.7))),
        case("add_scalar", &[&[5]], Uniform, Box::new(|v| v[0].add_scalar(0.3))),
        case(
            "mul_const",
            &[&[4]],
            Uniform,
            Box::new(|v| v[0].mul_const(&Tensor::from_f64(&[4], &[0.5, -2.0, 1.5, 3.0]))),
        ),
        case("exp", &[&[6]], Uniform, Box::new(|v| v[0].exp())),
        case("sigmoid", &[&[6]], Uniform, Box::new(|v| v[0].sigmoid())),
        case("relu", &[&[8]], AwayFromZero, Box::new(|v| v[0].relu())),
        case(
            "conv2d",
            &[&[2, 2, 5, 4], &[3, 2, 3, 3]],
            Uniform,
            Box::new(|v| v[0].conv2d(v[1], 1)),
        ),
        case(
            "conv2d_stride2",
            &[&[1, 2, 6, 6], &[3, 2, 3, 3]],
            Uniform,
            Box::new(|v| v[0].conv2d(v[1], 2)),
        ),
        case(
            "conv2d_input_grad",
            &[&[2, 3, 4, 4], &[3, 2, 3, 3]],
            Uniform,
            Box::new(|v| v[0].conv2d_input_grad(v[1], 1, &[2, 2, 4, 4])),
        ),
        case(
            "conv2d_input_grad_stride2",
            &[&[1, 3, 3, 3], &[3, 2, 3, 3]],
            Uniform,
            Box::new(|v| v[0].conv2d_input_grad(v[1], 2, &[1, 2, 6, 6])),
        ),
        case(
            "conv2d_weight_grad",
            &[&[2, 2, 4, 4], &[2, 3, 4, 4]],
            Uniform,
            Box::new(|v| v[0].conv2d_weight_grad(v[1], 1, 3)),
        ),
        case(
            "bias_add",
            &[&[2, 3, 2, 2], &[3]],
            Uniform,
            Box::new(|v| v[0].bias_add(v[1])),
        ),
        case("sum_to_bias", &[&[2, 3, 2, 2]], Uniform, Box::new(|v| v[0].sum_to_bias())),
        case(
            "gather",
            &[&[12]],
            Uniform,
            Box::new(move |v| v[0].gather(gi.clone(), &[10])),
        ),
        case(
            "scatter_add",
            &[&[7]],
            Uniform,
            Box::new(move |v| v[0].scatter_add(si.clone(), &[5])),
        ),
        case("maxpool2", &[&[2, 2, 4, 4]], Distinct, Box::new(|v| v[0].maxpool2())),
        case("maxpool2_odd", &[&[1, 2, 5, 3]], Distinct, Box::new(|v| v[0].maxpool2())),
        case("crop", &[&[1, 2, 4, 3]], Uniform, Box::new(|v| v[0].crop(3, 2))),
        case("upsample2", &[&[1, 2, 2, 3]], Uniform, Box::new(|v| v[0].upsample2())),
        case("sumpool2", &[&[1, 2, 4, 2]], Uniform, Box::new(|v| v[0].sumpool2())),
        case(
            "concat",
            &[&[2, 1, 2, 2], &[2, 2, 2, 2]],
            Uniform,
            Box::new(|v| Var::concat_channels(v)),
        ),
        case(
            "narrow",
            &[&[2, 4, 2, 2]],
            Uniform,
            Box::new(|v| v[0].narrow_channels(1, 2)),
        ),
        case(
            "pad_channels",
            &[&[2, 2, 2, 2]],
            Uniform,
            Box::new(|v| v[0].pad_channels(1, 4)),
        ),
        case(
            "log_softmax",
            &[&[2, 4, 2, 3]],
            Uniform,
            Box::new(|v| v[0].log_softmax_channels()),
        ),
        case("sum_channels", &[&[2, 3, 2, 2]], Uniform, Box::new(|v| v[0].sum_channels())),
        case(
            "broadcast_channels",
            &[&[2, 1, 2, 2]],
            Uniform,
            Box::new(|v| v[0].broadcast_channels(3)),
        ),
        case("sum", &[&[3, 4]], Uniform, Box::new(|v| v[0].sum())),
        case("mean", &[&[3, 4]], Uniform, Box::new(|v| v[0].mean())),
        case("expand", &[&[1]], Uniform, Box::new(|v| v[0].expand(&[2, 3]))),
        case("reshape", &[&[2, 3]], Uniform, Box::new(|v| v[0].reshape(&[3, 2]))),
    ]
}

fn sample_inputs(c: &Case, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = c.shapes.iter().map(|s| numel(s)).sum();
    match c.inputs {
        Inputs::Uniform => (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        Inputs::AwayFromZero => (0..n)
            .map(|_| {
                let m = rng.gen_range(0.1..1.0);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
        Inputs::Distinct => {
            let mut grid: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 * 2.0 - 1.0).collect();
            grid.shuffle(rng);
            grid
        }
    }
}

fn split<'g>(g: &'g Graph<f64>, flat: &[f64], shapes: &[Vec<usize>], param: bool) -> Vec<Var<'g, f64>> {
    let mut off = 0;
    shapes
        .iter()
        .map(|s| {
            let n = numel(s);
            let t = Tensor::new(s.clone(), flat[off..off + n].to_vec());
            off += n;
            if param {
                g.param(t)
            } else {
                g.constant(t)
            }
        })
        .collect()
}

fn projected<'g>(out: Var<'g, f64>, proj: &Tensor<f64>) -> autodiff::Result<Var<'g, f64>> {
    out.mul(out.graph().constant(proj.reshape(out.shape())))?.sum()
}

fn output_len(c: &Case, x: &[f64]) -> usize {
    let g = Graph::new();
    let vars = split(&g, x, &c.shapes, false);
    (c.f)(&vars).expect("primitive case").numel()
}

fn flat(ts: &[Tensor<f64>]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.to_vec()).collect()
}

/// Certifies the first-order backward rule of every primitive against
/// central differences of its forward pass.
pub fn check_primitives(seed: u64) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = cases(&mut rng);
    cases
        .iter()
        .map(|c| {
            let x = sample_inputs(c, &mut rng);
            let m = output_len(c, &x);
            let proj = Tensor::new(vec![m], (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect());

            let g = Graph::new();
            let vars = split(&g, &x, &c.shapes, true);
            let loss = projected((c.f)(&vars).expect("forward"), &proj).expect("projection");
            let analytic = flat(&g.grad(loss, &vars, GradOptions::default()).expect("grad").values());

            let numeric = finite_diff(
                |p| {
                    let g = Graph::new();
                    let vars = split(&g, p, &c.shapes, false);
                    projected((c.f)(&vars).expect("forward"), &proj)
                        .expect("projection")
                        .item()
                },
                &x,
                DEFAULT_STEP,
            );
            CheckReport::compare(c.name, &analytic, &numeric, DEFAULT_STEP, PRIMITIVE_TOLERANCE)
        })
        .collect()
}

/// Certifies the backward rules' own derivatives: differentiates
/// `<r2, d<r1, op(x)>/dx>` analytically (double backward) and compares with
/// central differences of the engine's first-order gradient.
pub fn check_primitives_second_order(seed: u64) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = cases(&mut rng);
    cases
        .iter()
        .map(|c| {
            let x = sample_inputs(c, &mut rng);
            let m = output_len(c, &x);
            let proj = Tensor::new(vec![m], (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let proj2 = Tensor::new(
                vec![x.len()],
                (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );

            let second = |p: &[f64], create: bool| -> (f64, Option<Vec<f64>>) {
                let g = Graph::new();
                let vars = split(&g, p, &c.shapes, true);
                let loss = projected((c.f)(&vars).expect("forward"), &proj).expect("projection");
                let opts = GradOptions {
                    retain: true,
                    create_graph: create,
                };
                let d = g.grad(loss, &vars, opts).expect("grad");
                let mut off = 0;
                let mut terms = Vec::new();
                for gv in &d.grads {
                    let n = gv.numel();
                    let r = Tensor::new(gv.shape(), proj2.data()[off..off + n].to_vec());
                    off += n;
                    terms.push(gv.mul(g.constant(r)).and_then(|t| t.sum()).expect("dot"));
                }
                let mut total = terms[0];
                for t in &terms[1..] {
                    total = total.add(*t).expect("sum");
                }
                let value = total.item();
                if !create || !total.requires_grad() {
                    return (value, create.then(|| vec![0.0; p.len()]));
                }
                let dd = g.grad(total, &vars, GradOptions::default()).expect("grad2");
                (value, Some(flat(&dd.values())))
            };

            let analytic = second(&x, true).1.expect("analytic");
            let numeric = finite_diff(|p| second(p, false).0, &x, DEFAULT_STEP);
            let name = format!("{}/second_order", c.name);
            CheckReport::compare(name, &analytic, &numeric, DEFAULT_STEP, PRIMITIVE_TOLERANCE)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_first_order() {
        for seed in 0..3 {
            for r in check_primitives(seed) {
                assert!(r.pass, "seed {seed}: {}", r.summary());
            }
        }
    }

    #[test]
    fn every_primitive_passes_second_order() {
        for r in check_primitives_second_order(0) {
            assert!(r.pass, "{}", r.summary());
        }
    }
}

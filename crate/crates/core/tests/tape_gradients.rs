//! Every tape primitive against central differences on random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smmcl::gradcheck::{check, Probe, STEP};
use smmcl::{Result, Tape, Tensor, Var};

const CASES: usize = 100;
const TOL: f64 = 1e-6;

type Build = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn random(dims: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Checks `Σ r ⊙ build(inputs)` for a fixed random readout `r`.
fn check_op(name: &str, inputs: Vec<Tensor<f64>>, build: Build, rng: &mut ChaCha8Rng) {
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.dims().to_vec()).collect();
    let point: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let readout_seed: u64 = rng.random();
    let probe = Probe::new(name, point, TOL, move |x: &[f64]| {
        let mut tape = Tape::new();
        let mut vars = Vec::new();
        let mut off = 0;
        for s in &shapes {
            let n: usize = s.iter().product();
            vars.push(tape.watch(Tensor::new(s, x[off..off + n].to_vec())?));
            off += n;
        }
        let out = build(&mut tape, &vars)?;
        let mut r = ChaCha8Rng::seed_from_u64(readout_seed);
        let w = random(tape.dims(out), -1.0, 1.0, &mut r);
        let w = tape.constant(w);
        let prod = tape.mul(out, w)?;
        let total = tape.sum(prod);
        let value = tape.value(total).item()?;
        let grads = tape.backward(total)?;
        let mut flat = Vec::with_capacity(x.len());
        for (v, s) in vars.iter().zip(&shapes) {
            match grads.wrt(*v) {
                Some(g) => flat.extend_from_slice(g.data()),
                None => flat.extend(std::iter::repeat_n(0.0, s.iter().product())),
            }
        }
        Ok((value, flat))
    });
    let out = check(&probe, STEP).unwrap();
    assert!(out.passed(), "{name}: {out:?}");
}

fn run(name: &str, seed: u64, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, build: Build) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..CASES {
        let inputs = make(&mut rng);
        check_op(name, inputs, build, &mut rng);
    }
}

fn dim(rng: &mut ChaCha8Rng, hi: usize) -> usize {
    rng.random_range(1..=hi)
}

#[test]
fn matmul_and_linear() {
    run(
        "matmul",
        1,
        |r| {
            let (m, k, n) = (dim(r, 4), dim(r, 4), dim(r, 4));
            vec![random(&[m, k], -1.0, 1.0, r), random(&[k, n], -1.0, 1.0, r)]
        },
        |t, v| t.matmul(v[0], v[1]),
    );
    run(
        "linear",
        2,
        |r| {
            let (b, h, i, o) = (dim(r, 2), dim(r, 3), dim(r, 4), dim(r, 4));
            vec![random(&[b, h, i], -1.0, 1.0, r), random(&[i, o], -1.0, 1.0, r), random(&[o], -1.0, 1.0, r)]
        },
        |t, v| t.linear(v[0], v[1], Some(v[2])),
    );
}

fn conv_inputs(r: &mut ChaCha8Rng, k: usize) -> Vec<Tensor<f64>> {
    let (b, h, w, ci, co) = (dim(r, 2), dim(r, 3) + 2, dim(r, 3) + 2, dim(r, 3), dim(r, 3));
    vec![
        random(&[b, h, w, ci], -1.0, 1.0, r),
        random(&[k, k, ci, co], -1.0, 1.0, r),
        random(&[co], -1.0, 1.0, r),
    ]
}

#[test]
fn conv2d_variants() {
    run("conv3x3_s1_p1", 3, |r| conv_inputs(r, 3), |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1));
    run("conv3x3_s2_p1", 4, |r| conv_inputs(r, 3), |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1));
    run("conv1x1", 5, |r| conv_inputs(r, 1), |t, v| t.conv2d(v[0], v[1], None, 1, 0));
    run("conv3x3_s1_p0", 6, |r| conv_inputs(r, 3), |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 0));
}

fn pair(r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let d = [dim(r, 3), dim(r, 3), dim(r, 3)];
    vec![random(&d, -2.0, 2.0, r), random(&d, -2.0, 2.0, r)]
}

fn single(r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let d = [dim(r, 3), dim(r, 3), dim(r, 3)];
    vec![random(&d, -2.0, 2.0, r)]
}

fn nhwc(r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let d = [dim(r, 2), dim(r, 4), dim(r, 4), dim(r, 3)];
    vec![random(&d, -2.0, 2.0, r)]
}

#[test]
fn elementwise() {
    run("add", 7, pair, |t, v| t.add(v[0], v[1]));
    run("sub", 8, pair, |t, v| t.sub(v[0], v[1]));
    run("mul", 9, pair, |t, v| t.mul(v[0], v[1]));
    run("scale", 10, single, |t, v| Ok(t.scale(v[0], -1.7)));
    run("sigmoid", 11, single, |t, v| Ok(t.sigmoid(v[0])));
    run("tanh", 12, single, |t, v| Ok(t.tanh(v[0])));
    run("exp", 13, single, |t, v| Ok(t.exp(v[0])));
    run("relu", 14, single, |t, v| Ok(t.relu(v[0])));
    run(
        "log",
        15,
        |r| vec![random(&[dim(r, 4), dim(r, 4)], 0.2, 3.0, r)],
        |t, v| t.log(v[0]),
    );
}

#[test]
fn reductions_and_layout() {
    run("sum", 16, single, |t, v| Ok(t.sum(v[0])));
    run("mean", 17, single, |t, v| Ok(t.mean(v[0])));
    run("reshape", 18, single, |t, v| {
        let n = t.value(v[0]).len();
        t.reshape(v[0], &[n])
    });
    run(
        "concat",
        19,
        |r| {
            let (a, b) = (dim(r, 3), dim(r, 3));
            vec![random(&[2, a, 2], -1.0, 1.0, r), random(&[2, a, b], -1.0, 1.0, r)]
        },
        |t, v| t.concat(v[0], v[1]),
    );
    run("global_max_pool", 20, nhwc, |t, v| t.global_max_pool(v[0]));
    run("global_avg_pool", 21, nhwc, |t, v| t.global_avg_pool(v[0]));
    run(
        "mul_channels",
        22,
        |r| {
            let (b, c) = (dim(r, 2), dim(r, 3));
            vec![random(&[b, dim(r, 3), dim(r, 3), c], -1.0, 1.0, r), random(&[b, c], -1.0, 1.0, r)]
        },
        |t, v| t.mul_channels(v[0], v[1]),
    );
}

#[test]
fn resize_gather_normalize() {
    run("resize_up", 23, nhwc, |t, v| {
        let d = t.dims(v[0]).to_vec();
        t.resize_bilinear(v[0], d[1] * 2 + 1, d[2] * 3)
    });
    run("resize_down", 24, nhwc, |t, v| {
        let d = t.dims(v[0]).to_vec();
        t.resize_bilinear(v[0], d[1].div_ceil(2), 1)
    });
    run(
        "gather_rows",
        25,
        |r| vec![random(&[dim(r, 5) + 1, dim(r, 4)], -1.0, 1.0, r)],
        |t, v| {
            let n = t.dims(v[0])[0];
            t.gather_rows(v[0], &[n - 1, 0, n - 1])
        },
    );
    run(
        "l2_normalize_rows",
        26,
        |r| vec![random(&[dim(r, 5), dim(r, 4) + 1], 0.2, 1.5, r)],
        |t, v| t.l2_normalize_rows(v[0]),
    );
}

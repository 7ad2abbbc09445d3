use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stormtail_nn::{ConvSpec, Graph, ParamStore, Tensor, Var};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Checks every input coordinate of `f` against central differences of
/// `sum(R * f(inputs))`.
fn check<F>(inputs: Vec<Tensor>, f: F, tol: f64)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |xs: &[Tensor]| -> Tensor {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).clone()
    };
    let out0 = eval(&inputs);
    let r: Vec<f64> = (0..out0.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |xs: &[Tensor]| -> f64 { eval(xs).data().iter().zip(&r).map(|(a, b)| a * b).sum() };

    let mut g = Graph::new(&store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(&[(out, &r)]);
    let h = 1e-6;
    for (vi, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[vi].len()]);
        for j in 0..inputs[vi].len() {
            let mut plus = inputs.clone();
            plus[vi].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[vi].data_mut()[j] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = analytic[j];
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            assert!(err < tol, "input {vi}[{j}]: fd {fd} vs analytic {a}");
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(5)
}

#[test]
fn dense_conv_strided_padded() {
    let mut r = rng();
    check(
        vec![random(&[3, 7, 6], &mut r), random(&[4, 3, 3, 3], &mut r), random(&[4], &mut r)],
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(2, 1, 1)),
        1e-6,
    );
}

#[test]
fn pointwise_conv() {
    let mut r = rng();
    check(
        vec![random(&[3, 4, 5], &mut r), random(&[2, 3, 1, 1], &mut r)],
        |g, v| g.conv2d(v[0], v[1], None, ConvSpec::new(1, 0, 1)),
        1e-6,
    );
}

#[test]
fn depthwise_conv() {
    let mut r = rng();
    check(
        vec![random(&[3, 5, 5], &mut r), random(&[3, 1, 3, 3], &mut r), random(&[3], &mut r)],
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(1, 1, 3)),
        1e-6,
    );
}

#[test]
fn linear_layer_norm_gelu() {
    let mut r = rng();
    check(
        vec![random(&[5, 4], &mut r), random(&[3, 4], &mut r), random(&[3], &mut r), random(&[3], &mut r), random(&[3], &mut r)],
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]));
            let n = g.layer_norm(y, v[3], v[4]);
            g.gelu(n)
        },
        1e-5,
    );
}

#[test]
fn attention_multihead() {
    let mut r = rng();
    check(
        vec![random(&[5, 4], &mut r), random(&[3, 4], &mut r), random(&[3, 4], &mut r)],
        |g, v| g.attention(v[0], v[1], v[2], 2),
        1e-6,
    );
}

#[test]
fn token_round_trip_and_resize() {
    let mut r = rng();
    check(
        vec![random(&[2, 3, 4], &mut r)],
        |g, v| {
            let t = g.to_tokens(v[0]);
            let s = g.sigmoid(t);
            let m = g.to_chw(s, 3, 4);
            g.resize(m, 7, 5)
        },
        1e-6,
    );
}

#[test]
fn concat_pool_and_gate() {
    let mut r = rng();
    check(
        vec![random(&[2, 3, 3], &mut r), random(&[1, 3, 3], &mut r)],
        |g, v| {
            let c = g.concat(&[v[0], v[1]]);
            let pooled = g.global_avg_pool(c);
            let gate = g.sigmoid(pooled);
            let s = g.scale_channels(c, gate);
            g.mul(s, c)
        },
        1e-6,
    );
}

#[test]
fn neighbor_similarity_grad() {
    let mut r = rng();
    check(vec![random(&[3, 4, 3], &mut r)], |g, v| g.neighbor_similarity(v[0]), 1e-5);
}

#[test]
fn deform_resample_grad() {
    let mut r = rng();
    let f = random(&[4, 5, 5], &mut r);
    // Offsets kept away from integer crossings so the bilinear kinks are not
    // straddled by the difference stencil.
    let o = Tensor::new(
        vec![4, 5, 5],
        (0..100).map(|_| r.random_range(0.1..0.9) * if r.random_bool(0.5) { 1.0 } else { -1.0 }).collect(),
    );
    check(vec![f, o], |g, v| g.deform_resample(v[0], v[1], 2), 1e-5);
}

#[test]
fn zero_offsets_are_identity() {
    let mut r = rng();
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let f = random(&[4, 6, 5], &mut r);
    let fv = g.input(f.clone());
    let o = g.input(Tensor::zeros(vec![4, 6, 5]));
    let out = g.deform_resample(fv, o, 2);
    assert_eq!(g.value(out).data(), f.data());
}

#[test]
fn unit_column_shift_clamps_border() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let f = Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let mut o = vec![0.0; 12];
    o[6..].iter_mut().for_each(|v| *v = 1.0);
    let fv = g.input(f);
    let ov = g.input(Tensor::new(vec![2, 2, 3], o));
    let out = g.deform_resample(fv, ov, 1);
    assert_eq!(g.value(out).data(), &[2.0, 3.0, 3.0, 5.0, 6.0, 6.0]);
}

#[test]
fn large_offsets_clamp_without_nan() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let fv = g.input(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let ov = g.input(Tensor::new(vec![2, 2, 2], vec![50.0, -50.0, 1e9, 0.0, -3.0, 7.0, 0.0, 1e9]));
    let out = g.deform_resample(fv, ov, 1);
    assert_eq!(g.value(out).data(), &[3.0, 2.0, 3.0, 4.0]);
}

#[test]
fn similarity_examples() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let c = g.input(Tensor::new(vec![2, 3, 3], vec![0.5; 18]));
    let s = g.neighbor_similarity(c);
    assert!(g.value(s).data().iter().all(|&v| (v - 1.0).abs() < 1e-15));

    // 2x2 map with hand-picked vectors against a brute-force cosine oracle.
    let vecs = [[1.0, 0.0], [0.0, 2.0], [1.0, 1.0], [-3.0, 0.5]];
    let data: Vec<f64> = (0..2).flat_map(|ch| vecs.iter().map(move |v| v[ch])).collect();
    let z = g.input(Tensor::new(vec![2, 2, 2], data));
    let s = g.neighbor_similarity(z);
    let order = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
    for i in 0..2i32 {
        for j in 0..2i32 {
            for (k, (di, dj)) in order.iter().enumerate() {
                let (ni, nj) = ((i + di).clamp(0, 1), (j + dj).clamp(0, 1));
                let a = vecs[(i * 2 + j) as usize];
                let b = vecs[(ni * 2 + nj) as usize];
                let want = (a[0] * b[0] + a[1] * b[1]) / ((a[0] * a[0] + a[1] * a[1]).sqrt() * (b[0] * b[0] + b[1] * b[1]).sqrt());
                let got = g.value(s).data()[k * 4 + (i * 2 + j) as usize];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    let zero = g.input(Tensor::zeros(vec![1, 2, 2]));
    let s = g.neighbor_similarity(zero);
    assert!(g.value(s).data().iter().all(|&v| v == 0.0));
}

#![allow(dead_code)]

use nalgebra::DMatrix;

use grcgan::data::MvnSpec;
use grcgan::linalg::psd_factor;
use grcgan::nn::{Activation, Layer, MlpSpec, Network};
use grcgan::{rng, CondGenerator, ConditionEncoding, Tensor};

/// Minimum-cost perfect matching on a dense `n × n` cost matrix (row-major).
/// Shortest augmenting paths with potentials; returns the column of each row.
pub fn assignment(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[p[j] - 1] = j - 1;
    }
    out
}

/// Exact empirical W2 between two equal-size point clouds.
pub fn empirical_w2(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.rows();
    assert_eq!(n, b.rows());
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = a
                .row(i)
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
        }
    }
    let m = assignment(&cost, n);
    let total: f64 = m.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    (total / n as f64).sqrt()
}

/// Single dense layer `out = z·Wz + x·Wx + b` with identity output.
pub fn linear_generator(wz: &Tensor, wx: &Tensor, bias: &[f64]) -> CondGenerator {
    let p = wx.rows();
    encoded_linear_generator(wz, wx, bias, ConditionEncoding::Raw, p)
}

/// Like [`linear_generator`], but `wx` acts on the encoded condition.
pub fn encoded_linear_generator(
    wz: &Tensor,
    wx: &Tensor,
    bias: &[f64],
    encoding: ConditionEncoding,
    cond_dim: usize,
) -> CondGenerator {
    let (l, q) = wz.shape();
    let p = wx.rows();
    let spec = MlpSpec {
        input_dim: l + p,
        hidden: vec![],
        output_dim: q,
        output_activation: Activation::Identity,
    };
    let mut net = Network::new(&spec, &mut rng::stream(0, 0)).unwrap();
    let Layer::Dense(d) = &mut net.layers_mut()[0] else {
        panic!("first layer is dense");
    };
    d.weight.value = Tensor::vstack(&[wz, wx]).unwrap();
    d.bias.value = Tensor::from_vec(1, q, bias.to_vec()).unwrap();
    CondGenerator::new(net, encoding, cond_dim, l).unwrap()
}

/// `G(x, z) = x + z`.
pub fn translation_generator(dim: usize) -> CondGenerator {
    let i = Tensor::identity(dim);
    linear_generator(&i, &i, &vec![0.0; dim])
}

/// `G(x, z) = R·(sin x, cos x) + s·z` on the circle task; `s = σ̃` gives the true law.
pub fn circle_generator(radius: f64, s: f64) -> CondGenerator {
    let wz = Tensor::identity(2).map(|v| v * s);
    let wx = Tensor::identity(2).map(|v| v * radius);
    encoded_linear_generator(&wz, &wx, &[0.0, 0.0], ConditionEncoding::SinCos, 1)
}

/// Generator that samples the exact conditional law of an MVN spec:
/// `y = μ_y + B(x − μ_x) + L·z` with `B = Σ_yx Σ_xx⁻¹` and `L·Lᵀ` the Schur complement.
pub fn exact_mvn_generator(spec: &MvnSpec) -> CondGenerator {
    let p = spec.p;
    let k = spec.k;
    let q = k - p;
    let s = DMatrix::from_row_slice(k, k, &spec.sigma);
    let sxx = s.view((0, 0), (p, p)).into_owned();
    let syx = s.view((p, 0), (q, p)).into_owned();
    let syy = s.view((p, p), (q, q)).into_owned();
    let b = &syx * sxx.clone().try_inverse().expect("invertible Σ_xx");
    let schur = &syy - &b * syx.transpose();
    let schur = (&schur + schur.transpose()) * 0.5;
    let l = psd_factor(&schur).unwrap();
    let lz = Tensor::from_fn(q, q, |r, c| l[(c, r)]);
    let bx = Tensor::from_fn(p, q, |r, c| b[(c, r)]);
    let bias: Vec<f64> = (0..q)
        .map(|j| spec.mu[p + j] - (0..p).map(|i| b[(j, i)] * spec.mu[i]).sum::<f64>())
        .collect();
    linear_generator(&lz, &bx, &bias)
}

//! Independent reference computations shared by the integration tests and
//! the acceptance suite. Nothing here calls into the library's metric code.

#![allow(dead_code)]

use num::{BigRational, ToPrimitive, Zero};

/// Row-major `n × d` matrix as nested vectors.
pub type Rows = Vec<Vec<f64>>;

fn q(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite input")
}

/// Linear CKA through the Gram-matrix HSIC form
/// `tr(KHLH) / sqrt(tr(KHKH) · tr(LHLH))`, with every product carried out in
/// exact rational arithmetic. Only the final square root is rounded.
pub fn cka_hsic_exact(x: &Rows, y: &Rows) -> f64 {
    let n = x.len();
    let gram = |m: &Rows| -> Vec<Vec<BigRational>> {
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        m[i].iter()
                            .zip(&m[j])
                            .fold(BigRational::zero(), |acc, (&a, &b)| acc + q(a) * q(b))
                    })
                    .collect()
            })
            .collect()
    };
    let center = |k: Vec<Vec<BigRational>>| -> Vec<Vec<BigRational>> {
        let nn = BigRational::from_integer(n.into());
        let row_mean: Vec<BigRational> = k
            .iter()
            .map(|r| r.iter().fold(BigRational::zero(), |a, v| a + v) / &nn)
            .collect();
        let all = row_mean.iter().fold(BigRational::zero(), |a, v| a + v) / &nn;
        // K symmetric: column means equal row means.
        (0..n)
            .map(|i| (0..n).map(|j| &k[i][j] - &row_mean[i] - &row_mean[j] + &all).collect())
            .collect()
    };
    let hsic = |a: &Vec<Vec<BigRational>>, b: &Vec<Vec<BigRational>>| -> BigRational {
        let mut s = BigRational::zero();
        for i in 0..n {
            for j in 0..n {
                s += &a[i][j] * &b[j][i];
            }
        }
        s
    };
    let kc = center(gram(x));
    let lc = center(gram(y));
    let kl = hsic(&kc, &lc);
    let kk = hsic(&kc, &kc);
    let ll = hsic(&lc, &lc);
    let squared = &kl * &kl / (kk * ll);
    squared.to_f64().expect("representable").sqrt()
}

fn centered_unit(m: &Rows) -> Rows {
    let n = m.len();
    let d = m[0].len();
    let means: Vec<f64> = (0..d).map(|j| m.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let c: Rows = m.iter().map(|r| r.iter().zip(&means).map(|(v, mu)| v - mu).collect()).collect();
    let norm = c.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    c.into_iter().map(|r| r.into_iter().map(|v| v / norm).collect()).collect()
}

fn frob_diff(x: &Rows, y: &Rows, qm: [[f64; 2]; 2]) -> f64 {
    let mut s = 0.0;
    for (xr, yr) in x.iter().zip(y) {
        for j in 0..2 {
            let yq = yr[0] * qm[0][j] + yr[1] * qm[1][j];
            s += (xr[j] - yq).powi(2);
        }
    }
    s.sqrt()
}

/// `min_Q ‖X̃ − ỸQ‖_F` over orthogonal `Q`, by exhaustive search: `d = 1`
/// tries Q = ±1, `d = 2` a fine grid over rotations and reflections polished
/// by golden-section search, `d = 3` an Euler-angle grid over both
/// components of O(3) polished by a shrinking pattern search.
pub fn procrustes_grid(x: &Rows, y: &Rows) -> f64 {
    let x = centered_unit(x);
    let y = centered_unit(y);
    match x[0].len() {
        1 => {
            let dist = |sign: f64| x.iter().zip(&y).map(|(a, b)| (a[0] - sign * b[0]).powi(2)).sum::<f64>().sqrt();
            dist(1.0).min(dist(-1.0))
        }
        2 => {
            let rot = |t: f64| [[t.cos(), -t.sin()], [t.sin(), t.cos()]];
            let refl = |t: f64| [[t.cos(), t.sin()], [t.sin(), -t.cos()]];
            let steps = 3600;
            let h = std::f64::consts::TAU / steps as f64;
            let mut best = f64::INFINITY;
            for family in [&rot as &dyn Fn(f64) -> [[f64; 2]; 2], &refl] {
                let f = |t: f64| frob_diff(&x, &y, family(t));
                let (mut bi, mut bv) = (0, f64::INFINITY);
                for i in 0..steps {
                    let v = f(i as f64 * h);
                    if v < bv {
                        (bi, bv) = (i, v);
                    }
                }
                let (mut lo, mut hi) = ((bi as f64 - 1.0) * h, (bi as f64 + 1.0) * h);
                let g = (5f64.sqrt() - 1.0) / 2.0;
                for _ in 0..100 {
                    let a = hi - g * (hi - lo);
                    let b = lo + g * (hi - lo);
                    if f(a) < f(b) {
                        hi = b;
                    } else {
                        lo = a;
                    }
                }
                best = best.min(bv).min(f(0.5 * (lo + hi)));
            }
            best
        }
        3 => procrustes_grid_3(&x, &y),
        d => panic!("grid oracle supports d ≤ 3, got {d}"),
    }
}

/// Bures distance for covariances sharing an eigenbasis with eigenvalues
/// `a` and `b`: `sqrt(Σ (√aᵢ − √bᵢ)²)`.
pub fn bures_commuting(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).sum::<f64>().sqrt()
}

/// Bures distance for arbitrary 2×2 SPD matrices. The inner matrix
/// `A^{1/2} B A^{1/2}` has trace `tr(AB)` and determinant `det A · det B`,
/// so the trace of its square root is `sqrt(tr(AB) + 2 sqrt(det A det B))`.
pub fn bures_2x2(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> f64 {
    let tr_ab = a[0][0] * b[0][0] + a[0][1] * b[1][0] + a[1][0] * b[0][1] + a[1][1] * b[1][1];
    let det = |m: [[f64; 2]; 2]| m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let fidelity = (tr_ab + 2.0 * (det(a) * det(b)).sqrt()).sqrt();
    (a[0][0] + a[1][1] + b[0][0] + b[1][1] - 2.0 * fidelity).max(0.0).sqrt()
}

/// `sqrt(λ‖Δμ‖² + (1 − λ) Σ (√aᵢ − √bᵢ)²)` for commuting covariances.
pub fn interpolated_commuting(mu_a: &[f64], mu_b: &[f64], a: &[f64], b: &[f64], lambda: f64) -> f64 {
    let mean_sq: f64 = mu_a.iter().zip(mu_b).map(|(x, y)| (x - y).powi(2)).sum();
    (lambda * mean_sq + (1.0 - lambda) * bures_commuting(a, b).powi(2)).sqrt()
}

/// Victim by exhaustive pairwise comparison of rank sums, where each metric's
/// ranks come from counting how many layers beat a given one. Layers are
/// indexed `0..k`; `scores[m][l]` is an effective distance (lower = closer).
pub fn brute_force_victim(scores: &[Vec<f64>]) -> usize {
    let k = scores[0].len();
    let rank = |m: &Vec<f64>, l: usize| -> usize {
        1 + (0..k).filter(|&o| m[o] < m[l] || (m[o] == m[l] && o < l)).count()
    };
    let total = |l: usize| -> usize { scores.iter().map(|m| rank(m, l)).sum() };
    (0..k)
        .find(|&l| (0..k).all(|o| total(l) < total(o) || (total(l) == total(o) && l <= o)))
        .expect("some layer is minimal")
}

type M3 = [[f64; 3]; 3];

fn mul3(a: &M3, b: &M3) -> M3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn axis_rotation(axis: usize, t: f64) -> M3 {
    let (s, c) = t.sin_cos();
    let (i, j) = [(1, 2), (2, 0), (0, 1)][axis];
    let mut m = [[0.0; 3]; 3];
    m[axis][axis] = 1.0;
    m[i][i] = c;
    m[j][j] = c;
    m[i][j] = -s;
    m[j][i] = s;
    m
}

fn frob_diff3(x: &Rows, y: &Rows, q: &M3) -> f64 {
    let mut s = 0.0;
    for (xr, yr) in x.iter().zip(y) {
        for j in 0..3 {
            let yq: f64 = (0..3).map(|k| yr[k] * q[k][j]).sum();
            s += (xr[j] - yq).powi(2);
        }
    }
    s.sqrt()
}

fn procrustes_grid_3(x: &Rows, y: &Rows) -> f64 {
    let steps = 36;
    let h = std::f64::consts::TAU / steps as f64;
    let mut best = f64::INFINITY;
    for flip in [1.0, -1.0] {
        let mut reflect = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        reflect[2][2] = flip;
        let (mut q, mut v) = (reflect, f64::INFINITY);
        for a in 0..steps {
            for b in 0..=steps / 2 {
                for c in 0..steps {
                    let r = mul3(
                        &mul3(&axis_rotation(2, a as f64 * h), &axis_rotation(1, b as f64 * h)),
                        &axis_rotation(2, c as f64 * h),
                    );
                    let cand = mul3(&r, &reflect);
                    let f = frob_diff3(x, y, &cand);
                    if f < v {
                        (q, v) = (cand, f);
                    }
                }
            }
        }
        // Small rotations about the coordinate axes avoid the Euler
        // parametrisation's degenerate points.
        let mut step = h;
        while step > 1e-10 {
            let mut moved = false;
            for axis in 0..3 {
                for sign in [1.0, -1.0] {
                    let cand = mul3(&q, &axis_rotation(axis, sign * step));
                    let f = frob_diff3(x, y, &cand);
                    if f < v {
                        (q, v, moved) = (cand, f, true);
                    }
                }
            }
            if !moved {
                step *= 0.5;
            }
        }
        best = best.min(v);
    }
    best
}

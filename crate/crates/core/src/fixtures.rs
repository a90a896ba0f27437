//! Built-in problem instances used by the demo, tests and acceptance suite.
//!
//! The irregular families are built in a rotated basis where a subspace `S`
//! is invariant under `A`, unweighted by `Q`, and fully actuated by the free
//! control directions. Then `Pbar` annihilates `S` for the default terminal
//! modification, the modified cost is regular, and the terminal constraint
//! (which only involves `S`) is reachable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::{Mat, Vector};
use crate::problem::{LqProblem, TimeGrid};

/// Scalar irregular example on `[0, 1]`: `A = 1`, `B = [1, -1]`, `Q = 0`,
/// `R = diag(1, 0)`, `H = 1`, `x0 = 1`. Its Riccati solution is
/// `P(t) = 2 / (1 + exp(2 (t - T)))` and the optimal cost is zero.
pub fn singular_example(n_steps: usize) -> LqProblem {
    LqProblem::deterministic(
        unit_grid(n_steps),
        Vector::from_element(1, 1.0),
        Mat::from_element(1, 1, 1.0),
        Mat::from_row_slice(1, 2, &[1.0, -1.0]),
        Mat::zeros(1, 1),
        Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
        Mat::from_element(1, 1, 1.0),
    )
}

/// Closed-form Riccati solution of [`singular_example`].
pub fn singular_example_p(t: f64, t_final: f64) -> f64 {
    2.0 / (1.0 + (2.0 * (t - t_final)).exp())
}

fn unit_grid(n_steps: usize) -> TimeGrid {
    TimeGrid {
        t0: 0.0,
        t_final: 1.0,
        n_steps,
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
    Mat::from_fn(r, c, |_, _| scale * rng.random_range(-1.0..1.0))
}

fn gram(rng: &mut ChaCha8Rng, n: usize, scale: f64, shift: f64) -> Mat {
    let g = uniform(rng, n, n, 1.0);
    (&g * g.transpose()) * (scale / n.max(1) as f64) + Mat::identity(n, n) * shift
}

fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Mat {
    uniform(rng, n, n, 1.0).qr().q()
}

fn block_diag(a: &Mat, b: &Mat) -> Mat {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    let mut out = Mat::zeros(ra + rb, ca + cb);
    out.view_mut((0, 0), (ra, ca)).copy_from(a);
    out.view_mut((ra, ca), (rb, cb)).copy_from(b);
    out
}

fn congruence(u: &Mat, m: &Mat) -> Mat {
    let c = u * m * u.transpose();
    (&c + c.transpose()) * 0.5
}

/// Random deterministic problem with `R` positive definite, 200 steps on
/// `[0, 1]`.
pub fn random_regular(n: usize, m: usize, seed: u64) -> LqProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = uniform(&mut rng, n, n, 0.5);
    let b = uniform(&mut rng, n, m, 1.0);
    let q = gram(&mut rng, n, 1.0, 0.0);
    let r = gram(&mut rng, m, 1.0, 0.5);
    let h = gram(&mut rng, n, 1.0, 0.0);
    let x0 = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    LqProblem::deterministic(unit_grid(200), x0, a, b, q, r, h)
}

/// Random stochastic problem with `R` positive definite and moderate
/// multiplicative noise, 200 steps on `[0, 1]`.
pub fn random_regular_stochastic(n: usize, m: usize, seed: u64) -> LqProblem {
    let det = random_regular(n, m, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    LqProblem::stochastic(
        det.grid,
        det.x0,
        det.a,
        det.b,
        uniform(&mut rng, n, n, 0.3),
        uniform(&mut rng, n, m, 0.3),
        det.q,
        det.r,
        det.h,
    )
}

/// Random irregular deterministic problem with `free` unweighted control
/// directions (`1 <= free <= min(n, m)`), 400 steps on `[0, 1]`. The default
/// terminal modification regularizes it and the terminal constraint is
/// reachable from every initial state.
pub fn random_irregular(n: usize, m: usize, free: usize, seed: u64) -> LqProblem {
    assert!(free >= 1 && free <= n.min(m));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = orthogonal(&mut rng, n);
    let v = orthogonal(&mut rng, m);
    let rest = n - free;
    let m0 = m - free;

    let mut a = uniform(&mut rng, n, n, 0.5);
    a.view_mut((free, 0), (rest, free)).fill(0.0);
    let mut b = Mat::zeros(n, m);
    b.view_mut((0, 0), (n, m0))
        .copy_from(&uniform(&mut rng, n, m0, 1.0));
    let steer = Mat::identity(free, free) + uniform(&mut rng, free, free, 0.3);
    b.view_mut((0, m0), (free, free)).copy_from(&steer);

    let q = block_diag(&Mat::zeros(free, free), &gram(&mut rng, rest, 1.0, 0.0));
    let h = block_diag(&gram(&mut rng, free, 1.0, 0.5), &gram(&mut rng, rest, 1.0, 0.0));
    let r = block_diag(&gram(&mut rng, m0, 1.0, 0.5), &Mat::zeros(free, free));
    let x0 = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));

    LqProblem::deterministic(
        unit_grid(400),
        &u * x0,
        &u * a * u.transpose(),
        &u * b * v.transpose(),
        congruence(&u, &q),
        congruence(&v, &r),
        congruence(&u, &h),
    )
}

/// Irregular problem whose terminal constraint cannot be met from `x0`: the
/// free direction only steers `x_0`, while the constraint also pins `x_1`.
pub fn unreachable_terminal() -> LqProblem {
    LqProblem::deterministic(
        unit_grid(200),
        Vector::from_vec(vec![1.0, 1.0]),
        Mat::from_row_slice(2, 2, &[0.5, 1.0, 0.0, -0.3]),
        Mat::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
        Mat::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]),
        Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
        Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]),
    )
}

/// Scalar regular stochastic problem: `A = 0.5`, `B = 1`, `Abar = 0.3`,
/// `Bbar = 0.2`, `Q = R = H = 1`, `x0 = 1` on `[0, 1]`.
pub fn regular_stochastic_scalar(n_steps: usize) -> LqProblem {
    let s = |v: f64| Mat::from_element(1, 1, v);
    LqProblem::stochastic(
        unit_grid(n_steps),
        Vector::from_element(1, 1.0),
        s(0.5),
        s(1.0),
        s(0.3),
        s(0.2),
        s(1.0),
        s(1.0),
        s(1.0),
    )
}

/// Irregular stochastic problem in the supported regime: noise acts only on
/// a block that the free control direction does not touch.
///
/// In the unrotated basis the state is `(x_s, x_r)` with `x_s` scalar and
/// `x_r` in R^2; the control is `(u_a, u_b, u_c)` with `u_c` in R^2.
/// `x_s' = a1 x_s + ba u_a + u_b` (with `u_b` unweighted), and `x_r` follows
/// a regular stochastic system driven by `u_c`. Both state and control are
/// then rotated by random orthogonal matrices.
pub fn supported_stochastic(seed: u64, n_steps: usize) -> LqProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let a1 = draw(-0.5, 0.5);
    let ba = draw(0.5, 1.5);
    let ra = draw(0.5, 1.5);
    let h1 = draw(0.5, 1.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let a = block_diag(&Mat::from_element(1, 1, a1), &uniform(&mut rng, 2, 2, 0.5));
    let abar = block_diag(&Mat::zeros(1, 1), &uniform(&mut rng, 2, 2, 0.3));
    let mut b = Mat::zeros(3, 4);
    b[(0, 0)] = ba;
    b[(0, 1)] = 1.0;
    b.view_mut((1, 2), (2, 2))
        .copy_from(&(Mat::identity(2, 2) + uniform(&mut rng, 2, 2, 0.3)));
    let mut bbar = Mat::zeros(3, 4);
    bbar.view_mut((1, 2), (2, 2))
        .copy_from(&uniform(&mut rng, 2, 2, 0.3));
    let r = block_diag(
        &Mat::from_row_slice(2, 2, &[ra, 0.0, 0.0, 0.0]),
        &gram(&mut rng, 2, 1.0, 0.5),
    );
    let q = block_diag(&Mat::zeros(1, 1), &gram(&mut rng, 2, 1.0, 0.0));
    let h = block_diag(&Mat::from_element(1, 1, h1), &gram(&mut rng, 2, 1.0, 0.0));
    let x0 = Vector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
    let u = orthogonal(&mut rng, 3);
    let v = orthogonal(&mut rng, 4);
    LqProblem::stochastic(
        unit_grid(n_steps),
        &u * x0,
        &u * a * u.transpose(),
        &u * b * v.transpose(),
        &u * abar * u.transpose(),
        &u * bbar * v.transpose(),
        congruence(&u, &q),
        congruence(&v, &r),
        congruence(&u, &h),
    )
}

/// Irregular stochastic problem where the free control direction enters the
/// diffusion. With `P1(T) = diag(-1, k)`, `k != 0`, the steering-noise
/// orthogonality condition fails.
pub fn steering_noise_violation(n_steps: usize) -> LqProblem {
    LqProblem::stochastic(
        unit_grid(n_steps),
        Vector::from_vec(vec![1.0, 1.0]),
        Mat::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.4]),
        Mat::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]),
        Mat::zeros(2, 2),
        Mat::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]),
        Mat::zeros(2, 2),
        Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
        Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
    )
}

//! Central finite-difference gradient checking.
//!
//! The checker is the independent oracle against which every backward rule is
//! verified: it never touches the tape's backward pass, only repeated forward
//! evaluations of a scalar function.

use crate::matrix::Matrix;
use crate::tape::{Node, Tape};

/// Default perturbation for central differences in f64.
pub const FD_EPS: f64 = 1e-5;

/// Central finite differences of scalar `f` w.r.t. every entry of `x`.
pub fn central_diff<F: FnMut(&Matrix) -> f64>(mut f: F, x: &Matrix, eps: f64) -> Matrix {
    let mut grad = Matrix::zeros(x.rows, x.cols);
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = f(&probe);
        probe.data[i] = orig - eps;
        let down = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Relative error with a floor so near-zero gradient pairs compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest entrywise relative error between two gradients.
pub fn max_rel_err(a: &Matrix, b: &Matrix) -> f64 {
    assert!(a.same_shape(b), "gradient shape mismatch");
    a.data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

/// Rebuild a scalar loss from fresh leaves and compare each input's
/// backprop gradient against central differences. Returns the worst
/// relative error over all inputs.
pub fn check_inputs<F>(inputs: &[Matrix], eps: f64, build: F) -> f64
where
    F: Fn(&Tape, &[Node]) -> Node,
{
    let tape = Tape::new();
    let nodes: Vec<Node> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = build(&tape, &nodes);
    tape.backward(&out);
    let mut worst = 0.0f64;
    for (i, m) in inputs.iter().enumerate() {
        let got = nodes[i].grad();
        let fd = central_diff(
            |probe| {
                let t2 = Tape::new();
                let ns: Vec<Node> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, mm)| t2.leaf(if j == i { probe.clone() } else { mm.clone() }))
                    .collect();
                build(&t2, &ns).scalar()
            },
            m,
            eps,
        );
        worst = worst.max(max_rel_err(&got, &fd));
    }
    worst
}

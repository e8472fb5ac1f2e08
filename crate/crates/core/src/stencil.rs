//! Finite-difference weights on arbitrary node sets.
//!
//! Fornberg's recursion, generic over any field so the same code runs on
//! floats and on exact rationals.

use num_traits::{FromPrimitive, Num};

/// Weights for derivatives `0..=max_degree` at `z` from samples at `nodes`.
///
/// Returns `w` with `w[k][j]` the weight of node `j` for the `k`-th derivative.
pub fn fornberg_weights<F>(z: &F, nodes: &[F], max_degree: usize) -> Vec<Vec<F>>
where
    F: Num + Clone + FromPrimitive,
{
    let n = nodes.len();
    assert!(n > 0, "empty node set");
    let k_of = |k: usize| F::from_usize(k).expect("small integer");

    // c[j][k]
    let mut c = vec![vec![F::zero(); max_degree + 1]; n];
    let mut c1 = F::one();
    let mut c4 = nodes[0].clone() - z.clone();
    c[0][0] = F::one();

    for i in 1..n {
        let mn = i.min(max_degree);
        let mut c2 = F::one();
        let c5 = c4.clone();
        c4 = nodes[i].clone() - z.clone();
        for j in 0..i {
            let c3 = nodes[i].clone() - nodes[j].clone();
            c2 = c2 * c3.clone();
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1.clone()
                        * (k_of(k) * c[i - 1][k - 1].clone() - c5.clone() * c[i - 1][k].clone())
                        / c2.clone();
                }
                c[i][0] = F::zero() - c1.clone() * c5.clone() * c[i - 1][0].clone() / c2.clone();
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4.clone() * c[j][k].clone() - k_of(k) * c[j][k - 1].clone()) / c3.clone();
            }
            c[j][0] = c4.clone() * c[j][0].clone() / c3.clone();
        }
        c1 = c2;
    }

    (0..=max_degree)
        .map(|k| c.iter().map(|row| row[k].clone()).collect())
        .collect()
}

/// Weights of the `degree`-th derivative at offset 0 from integer `offsets`, in units of `h^-degree`.
pub fn offset_weights<F>(offsets: &[i64], degree: usize) -> Vec<F>
where
    F: Num + Clone + FromPrimitive,
{
    let nodes: Vec<F> = offsets
        .iter()
        .map(|&o| F::from_i64(o).expect("small integer"))
        .collect();
    fornberg_weights(&F::zero(), &nodes, degree).swap_remove(degree)
}

/// Number of nodes in a centered stencil for the given derivative degree and (even) accuracy order.
pub fn centered_width(degree: usize, accuracy: usize) -> usize {
    2 * degree.div_ceil(2) - 1 + accuracy
}

/// Number of nodes in a one-sided stencil of the same formal order.
pub fn one_sided_width(degree: usize, accuracy: usize) -> usize {
    degree + accuracy
}

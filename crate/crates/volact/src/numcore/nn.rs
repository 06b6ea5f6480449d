//! Shared building blocks for the field networks: affine layers over the
//! flat parameter vector and the positional / integrated encodings, generic
//! over plain values and forward-mode jets.

use std::ops::Range;

use super::jet::Real;

/// One affine layer: weights are row-major (n_out x n_in) in the parameter
/// vector, followed by n_out biases in a separate block.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Range<usize>,
    pub b: Range<usize>,
    pub n_in: usize,
    pub n_out: usize,
}

/// out[o] = b[o] + sum_i w[o][i] * in[i], with ascending i so the summation
/// order is identical between the plain, jet, and tape evaluations.
pub fn affine_fwd<R: Real>(values: &[f64], layer: &Layer, input: &[R]) -> Vec<R> {
    debug_assert_eq!(input.len(), layer.n_in);
    let w = &values[layer.w.clone()];
    let b = &values[layer.b.clone()];
    let mut out = Vec::with_capacity(layer.n_out);
    for o in 0..layer.n_out {
        let mut acc = R::cst(b[o]);
        let row = &w[o * layer.n_in..(o + 1) * layer.n_in];
        for (i, &wi) in row.iter().enumerate() {
            acc = acc + input[i].scale(wi);
        }
        out.push(acc);
    }
    out
}

/// Normalized exponential onto the simplex. The running maximum is treated
/// as a constant shift, which leaves both values and derivatives unchanged.
pub fn softmax<R: Real>(z: &[R]) -> Vec<R> {
    let m = z
        .iter()
        .map(|v| v.value())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<R> = z.iter().map(|v| (*v + R::cst(-m)).exp()).collect();
    let mut sum = R::cst(0.0);
    for e in &exps {
        sum = sum + *e;
    }
    let inv = sum.recip();
    exps.iter().map(|e| *e * inv).collect()
}

/// Output length of a degree-L positional encoding: identity plus
/// sin/cos at frequencies 2^0 .. 2^{L-1} per axis.
pub fn pe_len(degree: usize) -> usize {
    3 + 6 * degree
}

/// Layout: [x, y, z, sin(2^0 x..z), cos(2^0 x..z), ..., sin(2^{L-1}..), cos(..)].
pub fn encode_pe<R: Real>(x: &[R; 3], degree: usize) -> Vec<R> {
    let mut out = Vec::with_capacity(pe_len(degree));
    out.extend_from_slice(x);
    let mut freq = 1.0;
    for _ in 0..degree {
        for xi in x {
            out.push(xi.scale(freq).sin());
        }
        for xi in x {
            out.push(xi.scale(freq).cos());
        }
        freq *= 2.0;
    }
    out
}

pub fn ipe_len(degree: usize) -> usize {
    6 * degree
}

/// Expected sin/cos features under a diagonal Gaussian:
/// sin(2^l mu) * exp(-0.5 * 4^l * var) and the cos analogue.
pub fn encode_ipe<R: Real>(mu: &[R; 3], var_diag: &[f64; 3], degree: usize) -> Vec<R> {
    let mut out = Vec::with_capacity(ipe_len(degree));
    let mut freq = 1.0f64;
    for _ in 0..degree {
        let f2 = freq * freq;
        for (mi, &vi) in mu.iter().zip(var_diag) {
            let damp = (-0.5 * f2 * vi).exp();
            out.push(mi.scale(freq).sin().scale(damp));
        }
        for (mi, &vi) in mu.iter().zip(var_diag) {
            let damp = (-0.5 * f2 * vi).exp();
            out.push(mi.scale(freq).cos().scale(damp));
        }
        freq *= 2.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pe_zero_input() {
        let enc = encode_pe(&[0.0f64, 0.0, 0.0], 4);
        assert_eq!(enc.len(), 27);
        assert_eq!(&enc[0..3], &[0.0, 0.0, 0.0]);
        for l in 0..4 {
            let base = 3 + 6 * l;
            assert_eq!(&enc[base..base + 3], &[0.0, 0.0, 0.0]); // sin
            assert_eq!(&enc[base + 3..base + 6], &[1.0, 1.0, 1.0]); // cos
        }
    }

    #[test]
    fn pe_degree_zero_is_identity() {
        let enc = encode_pe(&[0.4f64, -1.0, 2.5], 0);
        assert_eq!(enc, vec![0.4, -1.0, 2.5]);
    }

    #[test]
    fn ipe_zero_variance_matches_pe() {
        let x = [0.7f64, -0.3, 1.1];
        let pe = encode_pe(&x, 5);
        let ipe = encode_ipe(&x, &[0.0, 0.0, 0.0], 5);
        assert_eq!(&pe[3..], &ipe[..]);
    }

    #[test]
    fn ipe_damps_with_variance() {
        let x = [0.7f64, -0.3, 1.1];
        let mut prev: Option<f64> = None;
        for k in 0..6 {
            let var = [0.1 * k as f64; 3];
            let mag: f64 = encode_ipe(&x, &var, 6).iter().map(|v| v * v).sum();
            if let Some(p) = prev {
                assert!(mag <= p + 1e-12);
            }
            prev = Some(mag);
        }
        // Large variance drives every feature to zero.
        let big = encode_ipe(&x, &[1e6, 1e6, 1e6], 6);
        assert!(big.iter().all(|v| v.abs() < 1e-12));
    }
}

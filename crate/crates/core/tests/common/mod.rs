//! Independent oracles for the integration suites: everything here is
//! derived from first principles (definitions, closed forms, brute force)
//! rather than from the implementations under test.

use slak_core::conv::{ConvSpec, Padding};
use slak_core::rng::RngStream;
use slak_core::tensor::{Scalar, Tensor};

pub fn rand_tensor<T: Scalar>(shape: &[usize], s: &mut RngStream) -> Tensor<T> {
    let vals: Vec<T> = (0..shape.iter().product::<usize>())
        .map(|_| T::from_f64(s.uniform() - 0.5))
        .collect();
    Tensor::from_values(shape, &vals).expect("shape matches count")
}

/// Zero-embeds a centered (C, 1, kh, kw) kernel into (C, 1, big_h, big_w).
/// All edges must be odd so "centered" is unambiguous.
pub fn embed_center<T: Scalar>(w: &Tensor<T>, big_h: usize, big_w: usize) -> Tensor<T> {
    let [c, one, kh, kw] = w.dims4();
    assert_eq!(one, 1, "depthwise kernel");
    assert!(kh % 2 == 1 && kw % 2 == 1 && big_h % 2 == 1 && big_w % 2 == 1);
    assert!(kh <= big_h && kw <= big_w);
    let (top, left) = ((big_h - kh) / 2, (big_w - kw) / 2);
    let mut out = Tensor::<T>::zeros(&[c, 1, big_h, big_w]);
    for ci in 0..c {
        for r in 0..kh {
            for q in 0..kw {
                out.data_mut()[((ci * big_h) + top + r) * big_w + left + q] =
                    w.data()[(ci * kh + r) * kw + q];
            }
        }
    }
    out
}

/// Quadratic-time top-k reference: a position is kept iff fewer than `keep`
/// positions beat it, where "beats" means higher score, or equal score at a
/// smaller (layer, flat) index. keep = round((1 - sparsity) * total).
pub fn brute_force_global_topk(scores: &[Tensor<f32>], sparsity: f64) -> Vec<Vec<bool>> {
    let flat: Vec<(usize, usize, f64)> = scores
        .iter()
        .enumerate()
        .flat_map(|(li, t)| {
            t.data().iter().enumerate().map(move |(fi, &v)| (li, fi, v as f64))
        })
        .collect();
    let keep = ((1.0 - sparsity) * flat.len() as f64).round() as usize;
    let beats = |a: &(usize, usize, f64), b: &(usize, usize, f64)| {
        a.2 > b.2 || (a.2 == b.2 && (a.0, a.1) < (b.0, b.1))
    };
    let mut out: Vec<Vec<bool>> = scores.iter().map(|t| vec![false; t.len()]).collect();
    for cand in &flat {
        let better = flat.iter().filter(|other| beats(other, cand)).count();
        if better < keep {
            out[cand.0][cand.1] = true;
        }
    }
    out
}

/// Least-squares fit of y on the given basis functions of x; returns the
/// relative residual ||y - fit|| / ||y||.
pub fn fit_relative_residual(xs: &[f64], ys: &[f64], basis: &[fn(f64) -> f64]) -> f64 {
    let k = basis.len();
    assert!(xs.len() == ys.len() && xs.len() >= k);
    // Normal equations (B^T B) a = B^T y, solved by Gaussian elimination
    // with partial pivoting; k is 2 or 3 here.
    let mut ata = vec![vec![0.0f64; k]; k];
    let mut aty = vec![0.0f64; k];
    for (&x, &y) in xs.iter().zip(ys) {
        let row: Vec<f64> = basis.iter().map(|f| f(x)).collect();
        for i in 0..k {
            for j in 0..k {
                ata[i][j] += row[i] * row[j];
            }
            aty[i] += row[i] * y;
        }
    }
    for col in 0..k {
        let pivot = (col..k).max_by(|&a, &b| ata[a][col].abs().total_cmp(&ata[b][col].abs()))
            .expect("non-empty");
        ata.swap(col, pivot);
        aty.swap(col, pivot);
        assert!(ata[col][col].abs() > 1e-30, "singular basis");
        for r in 0..k {
            if r == col {
                continue;
            }
            let f = ata[r][col] / ata[col][col];
            for c2 in 0..k {
                ata[r][c2] -= f * ata[col][c2];
            }
            aty[r] -= f * aty[col];
        }
    }
    let coef: Vec<f64> = (0..k).map(|i| aty[i] / ata[i][i]).collect();
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let fit: f64 = basis.iter().zip(&coef).map(|(f, a)| a * f(x)).sum();
        ss_res += (y - fit) * (y - fit);
        ss_tot += y * y;
    }
    (ss_res / ss_tot).sqrt()
}

/// A randomized convolution problem; `None` when the drawn geometry has no
/// valid output extent.
#[allow(clippy::type_complexity)]
pub fn random_conv_case(
    seed: u64,
) -> Option<(Tensor<f32>, Tensor<f32>, Option<Tensor<f32>>, ConvSpec)> {
    let mut s = RngStream::new(seed);
    let bsz = 1 + s.below(2);
    let groups_choice = s.below(3);
    let (groups, ic, oc) = match groups_choice {
        2 => {
            let g = 1 + s.below(3);
            (g, g * (1 + s.below(2)), g * (1 + s.below(2)))
        }
        1 => {
            let c = 1 + s.below(4);
            (c, c, c)
        }
        _ => (1, 1 + s.below(4), 1 + s.below(4)),
    };
    let h = 1 + s.below(8);
    let w = 1 + s.below(8);
    let spec = ConvSpec {
        in_channels: ic,
        out_channels: oc,
        groups,
        kernel_h: 1 + s.below(6),
        kernel_w: 1 + s.below(6),
        dilation: 1 + s.below(2),
        stride: 1,
        padding: Padding::Same,
    };
    let spec = if s.below(2) == 0 {
        spec
    } else {
        ConvSpec {
            stride: 1 + s.below(2),
            padding: Padding::Explicit {
                top: s.below(3),
                bottom: s.below(3),
                left: s.below(3),
                right: s.below(3),
            },
            ..spec
        }
    };
    let x = rand_tensor::<f32>(&[bsz, ic, h, w], &mut s);
    let wt = rand_tensor::<f32>(&spec.weight_shape(), &mut s);
    let bias = (s.below(2) == 0).then(|| rand_tensor::<f32>(&[oc], &mut s));
    spec.out_hw(h, w).ok().map(|_| (x, wt, bias, spec))
}

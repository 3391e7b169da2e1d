//! Central residual aggregation: learnable normality centers with
//! soft-assignment residual aggregation, inserted after each student block.
//!
//! For a feature vector `f` at one spatial location and centers `C_1..C_N`,
//! the residuals are `r_n = f - C_n`, the assignment weights are a softmax
//! over `-alpha * ||r_n||^2`, and the output is the weighted residual sum.
//! Because the weights sum to one, the output equals `f - sum_n a_n C_n`,
//! which is how the fused training path computes it.

use ndarray::{Array2, Array4, Array5, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Result, SnlError};

/// Learnable CRAM state for one student block: `N` center vectors of the
/// block's channel dimension plus a positive sharpness scalar.
#[derive(Debug, Clone)]
pub struct Codebook {
    /// Center matrix of shape (D, N), one column per center.
    pub centers: Array2<f64>,
    /// Softmax sharpness; strictly positive.
    pub alpha: f64,
}

impl Codebook {
    pub fn new(centers: Array2<f64>, alpha: f64) -> Result<Self> {
        if centers.ncols() == 0 {
            return Err(SnlError::Usage("codebook needs at least one center".into()));
        }
        if !(alpha > 0.0) {
            return Err(SnlError::Usage(format!(
                "codebook sharpness must be positive, got {alpha}"
            )));
        }
        Ok(Codebook { centers, alpha })
    }

    pub fn dim(&self) -> usize {
        self.centers.nrows()
    }

    pub fn num_centers(&self) -> usize {
        self.centers.ncols()
    }

    /// Zero-mean Gaussian centers with the given per-coordinate scale.
    pub fn gaussian(dim: usize, n: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let normal = StandardNormal;
        let centers = Array2::from_shape_fn((dim, n), |_| {
            let z: f64 = normal.sample(rng);
            z * scale
        });
        Codebook {
            centers,
            alpha: 1.0,
        }
    }
}

/// Residual vectors of every location against every center:
/// `r[b, n, :, h, w] = f[b, :, h, w] - C[:, n]`.
#[derive(Debug, Clone)]
pub struct ResidualField {
    /// Shape (B, N, D, H, W).
    pub r: Array5<f64>,
}

/// Compute the residual field of a feature tensor against a codebook.
pub fn residuals(f: &Array4<f64>, cb: &Codebook) -> Result<ResidualField> {
    let (b, d, h, w) = f.dim();
    if d != cb.dim() {
        return Err(SnlError::Usage(format!(
            "feature channels {d} do not match codebook dim {}",
            cb.dim()
        )));
    }
    let n = cb.num_centers();
    let mut r = Array5::zeros((b, n, d, h, w));
    for bi in 0..b {
        for ni in 0..n {
            for di in 0..d {
                let c = cb.centers[[di, ni]];
                let src = f.index_axis(Axis(0), bi);
                let src = src.index_axis(Axis(0), di);
                let mut dst = r.slice_mut(ndarray::s![bi, ni, di, .., ..]);
                dst.assign(&src);
                dst.mapv_inplace(|e| e - c);
            }
        }
    }
    Ok(ResidualField { r })
}

/// Soft-assignment weights: per location, `softmax_n(-alpha * ||r_n||^2)`.
/// Returns shape (B, N, H, W); every (b, :, h, w) fiber sums to one.
pub fn soft_assign(field: &ResidualField, alpha: f64) -> Result<Array4<f64>> {
    if !(alpha > 0.0) {
        return Err(SnlError::Usage(format!(
            "sharpness must be positive, got {alpha}"
        )));
    }
    let (b, n, d, h, w) = field.r.dim();
    let mut logits = Array4::zeros((b, n, h, w));
    for bi in 0..b {
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let mut sq = 0.0;
                    for di in 0..d {
                        let e = field.r[[bi, ni, di, hi, wi]];
                        sq += e * e;
                    }
                    logits[[bi, ni, hi, wi]] = -alpha * sq;
                }
            }
        }
    }
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let mut max = f64::NEG_INFINITY;
                for ni in 0..n {
                    max = max.max(logits[[bi, ni, hi, wi]]);
                }
                let mut sum = 0.0;
                for ni in 0..n {
                    let e = (logits[[bi, ni, hi, wi]] - max).exp();
                    logits[[bi, ni, hi, wi]] = e;
                    sum += e;
                }
                for ni in 0..n {
                    logits[[bi, ni, hi, wi]] /= sum;
                }
            }
        }
    }
    Ok(logits)
}

/// Weighted residual aggregation: `out[b, :, h, w] = sum_n a_n r_n`.
/// Output shape equals the original feature shape.
pub fn aggregate(weights: &Array4<f64>, field: &ResidualField) -> Result<Array4<f64>> {
    let (b, n, d, h, w) = field.r.dim();
    if weights.dim() != (b, n, h, w) {
        return Err(SnlError::Usage(format!(
            "weight shape {:?} does not match residual field {:?}",
            weights.dim(),
            field.r.dim()
        )));
    }
    let mut out = Array4::zeros((b, d, h, w));
    for bi in 0..b {
        for ni in 0..n {
            for di in 0..d {
                for hi in 0..h {
                    for wi in 0..w {
                        out[[bi, di, hi, wi]] +=
                            weights[[bi, ni, hi, wi]] * field.r[[bi, ni, di, hi, wi]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Full CRAM pass: residuals, soft assignment, aggregation.
pub fn cram_forward(f: &Array4<f64>, cb: &Codebook) -> Result<Array4<f64>> {
    let field = residuals(f, cb)?;
    let weights = soft_assign(&field, cb.alpha)?;
    aggregate(&weights, &field)
}

/// Differentiable CRAM pass on the graph.
///
/// `centers` is a (D, N) node and `log_alpha` a single-element node; the
/// sharpness is `exp(log_alpha)`, which keeps it positive without any
/// projection. Uses the identity `sum_n a_n (f - C_n) = f - sum_n a_n C_n`
/// so the (B, N, D, H, W) residual field is never materialized.
pub fn cram_forward_node(
    g: &mut Graph,
    f: NodeId,
    centers: NodeId,
    log_alpha: NodeId,
) -> NodeId {
    let shape = g.value(f).shape().to_vec();
    debug_assert_eq!(shape.len(), 4, "cram input must be (B,D,H,W)");
    let (b, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let n = g.value(centers).shape()[1];
    debug_assert_eq!(g.value(centers).shape()[0], d, "codebook dim");
    let l = h * w;

    let f3 = g.reshape(f, &[b, d, l]);

    // squared distances: ||f||^2 - 2 C^T f + ||C||^2, shape (B, N, L)
    let ct = g.transpose2(centers);
    let dot = g.lin_map(ct, f3);
    let f_sq = g.square(f3);
    let f_ss = g.sum_axes(f_sq, &[1]);
    let c_sq = g.square(centers);
    let c_ss = g.sum_axes(c_sq, &[0]);
    let c_ss3 = g.reshape(c_ss, &[1, n, 1]);
    let dot2 = g.scale(dot, -2.0);
    let t = g.add(dot2, f_ss);
    let d2 = g.add(t, c_ss3);

    let alpha = g.exp(log_alpha);
    let alpha3 = g.reshape(alpha, &[1, 1, 1]);
    let scaled = g.mul(d2, alpha3);
    let logits = g.neg(scaled);
    let a = g.softmax(logits, 1);

    let cbar = g.lin_map(centers, a);
    let out3 = g.sub(f3, cbar);
    g.reshape(out3, &[b, d, h, w])
}

/// Assignment weights on the graph, shape (B, N, L). Shared with
/// [`cram_forward_node`]'s internals; exposed for diagnostics.
pub fn soft_assign_node(
    g: &mut Graph,
    f: NodeId,
    centers: NodeId,
    log_alpha: NodeId,
) -> NodeId {
    let shape = g.value(f).shape().to_vec();
    let (b, d, l) = (shape[0], shape[1], shape[2] * shape[3]);
    let n = g.value(centers).shape()[1];
    let f3 = g.reshape(f, &[b, d, l]);
    let ct = g.transpose2(centers);
    let dot = g.lin_map(ct, f3);
    let f_sq = g.square(f3);
    let f_ss = g.sum_axes(f_sq, &[1]);
    let c_sq = g.square(centers);
    let c_ss = g.sum_axes(c_sq, &[0]);
    let c_ss3 = g.reshape(c_ss, &[1, n, 1]);
    let dot2 = g.scale(dot, -2.0);
    let t = g.add(dot2, f_ss);
    let d2 = g.add(t, c_ss3);
    let alpha = g.exp(log_alpha);
    let alpha3 = g.reshape(alpha, &[1, 1, 1]);
    let scaled = g.mul(d2, alpha3);
    let logits = g.neg(scaled);
    g.softmax(logits, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feature_from(values: &[f64], d: usize) -> Array4<f64> {
        Array4::from_shape_vec((1, d, 1, values.len() / d), values.to_vec()).unwrap()
    }

    #[test]
    fn residual_of_matching_center_is_zero() {
        let cb = Codebook::new(arr2(&[[1.0, 0.0], [0.0, 1.0]]), 1.0).unwrap();
        let f = feature_from(&[1.0, 0.0], 2); // equals center 0
        let field = residuals(&f, &cb).unwrap();
        assert_eq!(field.r[[0, 0, 0, 0, 0]], 0.0);
        assert_eq!(field.r[[0, 0, 1, 0, 0]], 0.0);
        // against center 1: (1,0) - (0,1) = (1,-1)
        assert_eq!(field.r[[0, 1, 0, 0, 0]], 1.0);
        assert_eq!(field.r[[0, 1, 1, 0, 0]], -1.0);
    }

    #[test]
    fn single_zero_center_keeps_feature() {
        let cb = Codebook::new(arr2(&[[0.0], [0.0]]), 1.0).unwrap();
        let f = feature_from(&[0.3, -0.7], 2);
        let field = residuals(&f, &cb).unwrap();
        assert_eq!(field.r[[0, 0, 0, 0, 0]], 0.3);
        assert_eq!(field.r[[0, 0, 1, 0, 0]], -0.7);
        // identity configuration: output reproduces the input exactly
        let out = cram_forward(&f, &cb).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn example_residuals_direct_subtraction() {
        // f = (1,1), centers {(1,0), (0,1)} -> residuals {(0,1), (1,0)}
        let cb = Codebook::new(arr2(&[[1.0, 0.0], [0.0, 1.0]]), 1.0).unwrap();
        let f = feature_from(&[1.0, 1.0], 2);
        let field = residuals(&f, &cb).unwrap();
        assert_eq!(field.r[[0, 0, 0, 0, 0]], 0.0);
        assert_eq!(field.r[[0, 0, 1, 0, 0]], 1.0);
        assert_eq!(field.r[[0, 1, 0, 0, 0]], 1.0);
        assert_eq!(field.r[[0, 1, 1, 0, 0]], 0.0);
    }

    #[test]
    fn dim_mismatch_is_usage_error() {
        let cb = Codebook::new(arr2(&[[0.0], [0.0], [0.0]]), 1.0).unwrap();
        let f = feature_from(&[1.0, 2.0], 2);
        assert!(matches!(residuals(&f, &cb), Err(SnlError::Usage(_))));
    }

    #[test]
    fn soft_assign_single_center_is_one() {
        let cb = Codebook::new(arr2(&[[0.5]]), 2.0).unwrap();
        let f = feature_from(&[1.0, 2.0, 3.0], 1);
        let field = residuals(&f, &cb).unwrap();
        let w = soft_assign(&field, cb.alpha).unwrap();
        assert!(w.iter().all(|&e| (e - 1.0).abs() < 1e-12));
    }

    #[test]
    fn soft_assign_equidistant_centers_split_evenly() {
        let cb = Codebook::new(arr2(&[[1.0, -1.0]]), 3.0).unwrap();
        let f = feature_from(&[0.0], 1); // equidistant from +1 and -1
        let field = residuals(&f, &cb).unwrap();
        let w = soft_assign(&field, cb.alpha).unwrap();
        assert!((w[[0, 0, 0, 0]] - 0.5).abs() < 1e-12);
        assert!((w[[0, 1, 0, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn soft_assign_hand_evaluated_ratio() {
        // alpha = 1, ||r_1||^2 = 0, ||r_2||^2 = ln 4  ->  a = (0.8, 0.2)
        let d = (4.0f64).ln().sqrt();
        let cb = Codebook::new(arr2(&[[0.0, d]]), 1.0).unwrap();
        let f = feature_from(&[0.0], 1);
        let field = residuals(&f, &cb).unwrap();
        let w = soft_assign(&field, cb.alpha).unwrap();
        assert!((w[[0, 0, 0, 0]] - 0.8).abs() < 1e-12);
        assert!((w[[0, 1, 0, 0]] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn aggregate_one_hot_selects_residual() {
        let cb = Codebook::new(arr2(&[[5.0, -3.0]]), 1.0).unwrap();
        let f = feature_from(&[1.0], 1);
        let field = residuals(&f, &cb).unwrap();
        let mut w = Array4::zeros((1, 2, 1, 1));
        w[[0, 1, 0, 0]] = 1.0;
        let out = aggregate(&w, &field).unwrap();
        assert_eq!(out[[0, 0, 0, 0]], 4.0); // 1 - (-3)
    }

    #[test]
    fn aggregate_symmetric_cancellation() {
        // D=1, r = {2, -2}, a = (0.5, 0.5) -> 0
        let cb = Codebook::new(arr2(&[[-2.0, 2.0]]), 1.0).unwrap();
        let f = feature_from(&[0.0], 1);
        let field = residuals(&f, &cb).unwrap();
        let w = soft_assign(&field, cb.alpha).unwrap();
        let out = aggregate(&w, &field).unwrap();
        assert!(out[[0, 0, 0, 0]].abs() < 1e-12);
    }

    #[test]
    fn large_sharpness_approximates_hard_assignment() {
        let cb = Codebook::new(arr2(&[[0.0, 0.5]]), 1e3).unwrap();
        // nearest-center margin in squared distance is at least 0.1
        let f = feature_from(&[0.05], 1);
        let field = residuals(&f, &cb).unwrap();
        let w = soft_assign(&field, cb.alpha).unwrap();
        assert!(w[[0, 0, 0, 0]] > 0.999);
    }

    #[test]
    fn far_features_grow_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cb = Codebook::gaussian(3, 4, 1.0, &mut rng);
        let norms: Vec<f64> = [10.0, 20.0, 30.0]
            .iter()
            .map(|&t| {
                let f = Array4::from_shape_fn((1, 3, 1, 1), |(_, d, _, _)| t * (d as f64 + 1.0));
                let out = cram_forward(&f, &cb).unwrap();
                out.iter().map(|e| e * e).sum::<f64>().sqrt()
            })
            .collect();
        let d1 = norms[1] - norms[0];
        let d2 = norms[2] - norms[1];
        assert!(
            (d1 - d2).abs() / d1.abs() < 1e-3,
            "norm growth not linear: {norms:?}"
        );
    }

    #[test]
    fn weights_sum_to_one_and_are_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cb = Codebook::gaussian(5, 7, 0.8, &mut rng);
        let f = Array4::from_shape_fn((2, 5, 3, 4), |_| rng.random::<f64>() * 4.0 - 2.0);
        let field = residuals(&f, &cb).unwrap();
        let w = soft_assign(&field, cb.alpha).unwrap();
        for bi in 0..2 {
            for hi in 0..3 {
                for wi in 0..4 {
                    let s: f64 = (0..7).map(|ni| w[[bi, ni, hi, wi]]).sum();
                    assert!((s - 1.0).abs() < 1e-6);
                    assert!((0..7).all(|ni| w[[bi, ni, hi, wi]] > 0.0));
                }
            }
        }
    }

    #[test]
    fn joint_translation_leaves_output_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cb = Codebook::gaussian(4, 6, 1.0, &mut rng);
        let f = Array4::from_shape_fn((1, 4, 2, 2), |_| rng.random::<f64>() * 2.0 - 1.0);
        let out = cram_forward(&f, &cb).unwrap();

        let shift = [0.7, -1.3, 0.2, 2.5];
        let mut f2 = f.clone();
        for d in 0..4 {
            f2.slice_mut(ndarray::s![.., d, .., ..])
                .mapv_inplace(|e| e + shift[d]);
        }
        let mut centers2 = cb.centers.clone();
        for d in 0..4 {
            centers2.row_mut(d).mapv_inplace(|e| e + shift[d]);
        }
        let cb2 = Codebook::new(centers2, cb.alpha).unwrap();
        let out2 = cram_forward(&f2, &cb2).unwrap();
        for (a, b) in out.iter().zip(out2.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn fused_graph_path_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cb = Codebook::gaussian(6, 9, 1.1, &mut rng);
        let f = Array4::from_shape_fn((3, 6, 4, 5), |_| rng.random::<f64>() * 2.0 - 1.0);
        let naive = cram_forward(&f, &cb).unwrap();

        let mut g = Graph::new();
        let fid = g.input(f.clone().into_dyn());
        let cid = g.input(cb.centers.clone().into_dyn());
        let la = g.input(ArrayD::from_elem(IxDyn(&[1]), cb.alpha.ln()));
        let out = cram_forward_node(&mut g, fid, cid, la);
        for (a, b) in naive.iter().zip(g.value(out).iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(g.value(out).shape(), &[3, 6, 4, 5]);
    }

    #[test]
    fn output_shape_matches_input_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for &(d, h, w, n) in &[(1usize, 1usize, 1usize, 1usize), (3, 4, 2, 5), (8, 2, 7, 3)] {
            let cb = Codebook::gaussian(d, n, 1.0, &mut rng);
            let f = Array4::from_shape_fn((2, d, h, w), |_| rng.random::<f64>());
            let out = cram_forward(&f, &cb).unwrap();
            assert_eq!(out.dim(), (2, d, h, w));
        }
    }
}

//! Functional (tape-free) forward ops. The tape reuses the same shape checks.

use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

pub(crate) fn conv_geometry(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<ConvGeometry> {
    let (&[n, c_in, h, w], &[c_out, k_in, kh, kw]) = (input.shape(), kernel.shape()) else {
        return Err(Error::shape(
            "conv2d",
            format!(
                "expected input [N,C,H,W] and kernels [C_out,C_in,kH,kW], got {:?} and {:?}",
                input.shape(),
                kernel.shape()
            ),
        ));
    };
    if c_in != k_in {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c_in} channels but kernels expect {k_in}"),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel size must be odd for same padding, got {kh}x{kw}"),
        ));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?} does not match {c_out} kernels", bias.shape()),
        ));
    }
    Ok(ConvGeometry {
        batch: n,
        in_channels: c_in,
        out_channels: c_out,
        height: h,
        width: w,
        kernel_h: kh,
        kernel_w: kw,
    })
}

pub(crate) fn dense_dims(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    let (&[n, f], &[wf, o]) = (x.shape(), weights.shape()) else {
        return Err(Error::shape(
            "dense",
            format!(
                "expected x [N,F] and weights [F,O], got {:?} and {:?}",
                x.shape(),
                weights.shape()
            ),
        ));
    };
    if f != wf {
        return Err(Error::shape(
            "dense",
            format!("x has {f} features but weights expect {wf}"),
        ));
    }
    if bias.shape() != [o] {
        return Err(Error::shape(
            "dense",
            format!("bias shape {:?} does not match {o} outputs", bias.shape()),
        ));
    }
    Ok((n, f, o))
}

/// Same-padded, stride-1 cross-correlation (no kernel flip).
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let g = conv_geometry(input, kernel, bias)?;
    let cols = kernels::im2col(input.data(), &g);
    let out = kernels::conv_forward(&cols, kernel.data(), bias.data(), &g);
    let t = Tensor::from_parts(vec![g.batch, g.out_channels, g.height, g.width], out);
    t.ensure_finite("conv2d")?;
    Ok(t)
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

pub fn softplus(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| kernels::softplus(v)).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Affine map `x W + b`.
pub fn dense(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, f, o) = dense_dims(x, weights, bias)?;
    let out = kernels::dense_forward(x.data(), weights.data(), bias.data(), n, f, o);
    let t = Tensor::from_parts(vec![n, o], out);
    t.ensure_finite("dense")?;
    Ok(t)
}

/// `[N, C, H, W] -> [N, C*H*W]`; element `(n, c, h, w)` lands in column `c*H*W + h*W + w`.
pub fn flatten(x: &Tensor) -> Result<Tensor> {
    match *x.shape() {
        [n, ref rest @ ..] if !rest.is_empty() => {
            let cols = rest.iter().product::<usize>();
            x.clone().reshape(vec![n, cols])
        }
        _ => Err(Error::shape(
            "flatten",
            format!("need at least 2 dimensions, got {:?}", x.shape()),
        )),
    }
}

/// Inverse of [`flatten`] for a per-sample shape `inner`.
pub fn unflatten(x: &Tensor, inner: &[usize]) -> Result<Tensor> {
    let &[n, cols] = x.shape() else {
        return Err(Error::shape(
            "unflatten",
            format!("expected [N, F], got {:?}", x.shape()),
        ));
    };
    if inner.iter().product::<usize>() != cols {
        return Err(Error::shape(
            "unflatten",
            format!("{cols} columns cannot be viewed as {inner:?}"),
        ));
    }
    let mut shape = vec![n];
    shape.extend_from_slice(inner);
    x.clone().reshape(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn one_by_one_unit_kernel_sums_channels() {
        let x = t(&[2, 3, 2, 2], (0..24).map(|v| v as f64 * 0.5 - 3.0).collect());
        let k = t(&[1, 3, 1, 1], vec![1.0; 3]);
        let b = t(&[1], vec![0.0]);
        let y = conv2d(&x, &k, &b).unwrap();
        assert_eq!(y.shape(), &[2, 1, 2, 2]);
        for n in 0..2 {
            for p in 0..4 {
                let want: f64 = (0..3).map(|c| x.data()[(n * 3 + c) * 4 + p]).sum();
                assert_eq!(y.data()[n * 4 + p], want);
            }
        }
    }

    #[test]
    fn ones_kernel_on_ones_counts_in_bounds_neighbours() {
        let x = t(&[1, 1, 3, 3], vec![1.0; 9]);
        let k = t(&[1, 1, 3, 3], vec![1.0; 9]);
        let b = t(&[1], vec![0.0]);
        let y = conv2d(&x, &k, &b).unwrap();
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
        assert_eq!(y.data()[8], 4.0);
    }

    #[test]
    fn centered_identity_kernel_reproduces_input() {
        let x = t(&[1, 1, 4, 5], (0..20).map(|v| (v as f64).sqrt() - 1.7).collect());
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let y = conv2d(&x, &t(&[1, 1, 3, 3], kd), &t(&[1], vec![0.0])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_is_cross_correlation_not_convolution() {
        // asymmetric kernel picks the right-hand neighbour without flipping
        let x = t(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]);
        let k = t(&[1, 1, 1, 3], vec![0.0, 0.0, 1.0]);
        let y = conv2d(&x, &k, &t(&[1], vec![0.0])).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0, 0.0]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = t(&[1, 2, 3, 3], vec![0.0; 18]);
        let b = t(&[1], vec![0.0]);
        let wrong_cin = t(&[1, 3, 3, 3], vec![0.0; 27]);
        assert!(matches!(conv2d(&x, &wrong_cin, &b), Err(Error::Shape { .. })));
        let even = t(&[1, 2, 2, 2], vec![0.0; 8]);
        assert!(matches!(conv2d(&x, &even, &b), Err(Error::Shape { .. })));
        let k = t(&[1, 2, 3, 3], vec![0.0; 18]);
        let wrong_bias = t(&[2], vec![0.0; 2]);
        assert!(conv2d(&x, &k, &wrong_bias).is_err());
    }

    #[test]
    fn relu_clamps_negatives() {
        let y = relu(&t(&[3], vec![-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn dense_hand_values() {
        let x = t(&[1, 2], vec![1.0, 2.0]);
        let w = t(&[2, 1], vec![1.0, 1.0]);
        let b = t(&[1], vec![1.0]);
        assert_eq!(dense(&x, &w, &b).unwrap().data(), &[4.0]);

        let x = t(&[2, 3], vec![1.0, -2.0, 3.5, 0.25, 9.0, -1.0]);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let y = dense(&x, &t(&[3, 3], eye), &Tensor::zeros(vec![3])).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(dense(&x, &t(&[2, 2], vec![0.0; 4]), &Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn flatten_layout_and_inverse() {
        let x = t(&[2, 3, 4, 5], (0..120).map(|v| v as f64).collect());
        let f = flatten(&x).unwrap();
        assert_eq!(f.shape(), &[2, 60]);
        let (c, h, w) = (2, 1, 3);
        assert_eq!(f.data()[60 + c * 20 + h * 5 + w], x.data()[((3 + c) * 4 + h) * 5 + w]);
        assert_eq!(unflatten(&f, &[3, 4, 5]).unwrap(), x);
        assert!(unflatten(&f, &[7, 7]).is_err());
    }
}

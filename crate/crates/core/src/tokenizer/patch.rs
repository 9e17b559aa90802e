use crate::cmx::Tensor3;
use crate::error::{shape_err, Result};
use crate::substrate::{Scalar, Tensor};

/// Splits a `C x M x M` tensor into `K*K` row-major patches; each patch
/// vector is ordered channel, row, column.
pub fn patchify<T: Scalar>(x: &Tensor3, l: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.shape();
    if l == 0 || h % l != 0 || w % l != 0 {
        return shape_err(format!("patch size {l} does not divide {h}x{w}"));
    }
    let (kh, kw) = (h / l, w / l);
    let dim = c * l * l;
    let mut out = Vec::with_capacity(x.data.len());
    for py in 0..kh {
        for px in 0..kw {
            for ch in 0..c {
                for dy in 0..l {
                    let row = (ch * h + py * l + dy) * w + px * l;
                    out.extend(x.data[row..row + l].iter().map(|&v| T::of(v as f64)));
                }
            }
        }
    }
    Tensor::new(vec![kh * kw, dim], out)
}

/// Flat source index into a `[batch * K*K, C*L*L]` patch matrix for every
/// element of the `[batch, C, M, M]` image, in image order.
pub fn unpatchify_index(batch: usize, c: usize, m: usize, l: usize) -> Vec<usize> {
    let k = m / l;
    let dim = c * l * l;
    let mut idx = Vec::with_capacity(batch * c * m * m);
    for b in 0..batch {
        for ch in 0..c {
            for y in 0..m {
                for x in 0..m {
                    let patch = b * k * k + (y / l) * k + x / l;
                    idx.push(patch * dim + (ch * l + y % l) * l + x % l);
                }
            }
        }
    }
    idx
}

pub fn unpatchify<T: Scalar>(p: &Tensor<T>, c: usize, m: usize, l: usize) -> Result<Tensor3> {
    if l == 0 || !m.is_multiple_of(l) || p.shape != [(m / l) * (m / l), c * l * l] {
        return shape_err(format!("patch matrix {:?} does not form a {c}x{m}x{m} tensor", p.shape));
    }
    let data = unpatchify_index(1, c, m, l)
        .into_iter()
        .map(|i| p.data[i].f64() as f32)
        .collect();
    Tensor3::new(c, m, m, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_input_shapes() {
        let x = Tensor3::zeros(2, 256, 256);
        let p = patchify::<f32>(&x, 16).unwrap();
        assert_eq!(p.shape, vec![256, 512]);
        let whole = patchify::<f32>(&x, 256).unwrap();
        assert_eq!(whole.shape, vec![1, 2 * 256 * 256]);
        assert!(patchify::<f32>(&x, 24).is_err());
    }

    #[test]
    fn patch_layout_and_inverse() {
        let data: Vec<f32> = (0..2 * 4 * 4).map(|v| v as f32).collect();
        let x = Tensor3::new(2, 4, 4, data).unwrap();
        let p = patchify::<f64>(&x, 2).unwrap();
        // patch 1 is the top-right 2x2 block of both channels
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0, 18.0, 19.0, 22.0, 23.0]);
        assert_eq!(unpatchify(&p, 2, 4, 2).unwrap(), x);
    }
}

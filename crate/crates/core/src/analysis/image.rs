use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR reported for a perfect reconstruction.
pub const PSNR_CAP_DB: f64 = 100.0;

const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape(what, a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} of empty images")));
    }
    Ok(())
}

/// `−10·log10(MSE)` in decibels for images on a unit dynamic range, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    check(x, x_hat, "psnr")?;
    let mse = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB) + 0.0)
}

/// Structural similarity computed over a single window spanning the whole image.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check(a, b, "ssim")?;
    let n = a.len() as f64;
    let mean = |t: &Tensor| t.data().iter().sum::<f64>() / n;
    let (ma, mb) = (mean(a), mean(b));
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    Ok(((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f64>) -> Tensor {
        Tensor::new(vec![v.len()], v).unwrap()
    }

    #[test]
    fn psnr_reference_values() {
        assert_eq!(psnr(&t(vec![0.0; 4]), &t(vec![1.0; 4])).unwrap(), 0.0);
        let x = t(vec![0.0; 4]);
        let y = t(vec![0.1; 4]);
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP_DB);
        assert!(psnr(&x, &t(vec![0.0; 3])).is_err());
    }

    #[test]
    fn ssim_reference_values() {
        let a = t((0..64).map(|i| (i % 2) as f64).collect());
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 0.0);
        let c = t(vec![0.3; 16]);
        assert_eq!(ssim(&c, &c).unwrap(), 1.0);
    }
}

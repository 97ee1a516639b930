//! Two-dimensional PCA projection of embeddings for plotting.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scores on the two leading principal axes, `n x 2`. Each axis is signed
/// so its largest-magnitude loading is positive. With a single input
/// dimension the second column is zero.
pub fn pca_2d(x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (n, d) = x.shape();
    if n == 0 || d == 0 {
        return Err(Error::contract("PCA of an empty matrix"));
    }
    let mut centered = DMatrix::from_row_slice(n, d, x.data());
    for c in 0..d {
        let mean = centered.column(c).mean();
        centered.column_mut(c).add_scalar_mut(-mean);
    }
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut out = vec![0.0; n * 2];
    for (axis, &k) in order.iter().take(2).enumerate() {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let pivot = v.iter().copied().fold(0.0f64, |m, c| if c.abs() > m.abs() { c } else { m });
        if pivot < 0.0 {
            v.neg_mut();
        }
        let scores = &centered * v;
        for r in 0..n {
            out[r * 2 + axis] = scores[r];
        }
    }
    Tensor::new(n, 2, out)
}

/// Writes `label,x,y` rows.
pub fn write_projection_csv<W: Write>(points: &Tensor<f64>, labels: &[usize], out: &mut W) -> Result<()> {
    if points.cols() != 2 || points.rows() != labels.len() {
        return Err(Error::dim(
            "write_projection_csv",
            format!("{:?} points, {} labels", points.shape(), labels.len()),
        ));
    }
    writeln!(out, "label,x,y")?;
    for (r, l) in labels.iter().enumerate() {
        writeln!(out, "{l},{},{}", points.get(r, 0), points.get(r, 1))?;
    }
    Ok(())
}

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct PcaProjection {
    /// `[n, k]` scores.
    pub coords: Tensor,
    /// `[k, d]`, rows are unit components in decreasing-variance order.
    pub components: Tensor,
    pub explained_variance: Vec<f64>,
    pub explained_ratio: Vec<f64>,
}

/// Centered PCA through the eigendecomposition of the sample covariance.
pub fn pca_project(latents: &Tensor, k: usize) -> Result<PcaProjection> {
    let (n, d) = latents.as_matrix("pca_project")?;
    if k == 0 || k > d {
        return Err(Error::invalid(format!("pca: k = {k} with latent dimension {d}")));
    }
    if n < k + 1 {
        return Err(Error::invalid(format!("pca: {n} samples cannot support {k} components")));
    }
    let x = DMatrix::from_row_slice(n, d, latents.data());
    let means: Vec<f64> = x.column_iter().map(|c| c.mean()).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - means[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > 1e-10 * top).count();
    if k > rank {
        return Err(Error::invalid(format!("pca: k = {k} exceeds the data rank {rank}")));
    }

    let mut components = Vec::with_capacity(k * d);
    let mut variance = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        // Sign convention: the largest-magnitude loading is positive.
        let pivot = v.iter().copied().fold(0.0, |acc: f64, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.extend(v);
        variance.push(eig.eigenvalues[i].max(0.0));
    }
    let comp = DMatrix::from_row_slice(k, d, &components);
    let scores = &centered * comp.transpose();
    let coords: Vec<f64> = (0..n).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| scores[(i, j)]).collect();

    Ok(PcaProjection {
        coords: Tensor::matrix(n, k, coords)?,
        components: Tensor::matrix(k, d, components)?,
        explained_ratio: variance.iter().map(|v| v / total).collect(),
        explained_variance: variance,
    })
}

/// `sample_id,pc1..pck,label`
pub fn write_pca_csv<W: Write>(out: W, proj: &PcaProjection, labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let k = proj.coords.cols();
    let mut header = vec!["sample_id".to_string()];
    header.extend((1..=k).map(|i| format!("pc{i}")));
    header.push("label".into());
    w.write_record(&header)?;
    for i in 0..proj.coords.rows() {
        let mut rec = vec![i.to_string()];
        rec.extend(proj.coords.row(i).iter().map(f64::to_string));
        rec.push(labels.get(i).map_or(String::new(), usize::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, seeded};

    #[test]
    fn full_rank_projection_preserves_geometry() {
        let x = normal_tensor(&[300, 2], &mut seeded(1));
        let p = pca_project(&x, 2).unwrap();
        let total: f64 = p.explained_variance.iter().sum();
        // Sum of eigenvalues equals the trace of the covariance.
        let mean = |j: usize| (0..300).map(|i| x.get(i, j)).sum::<f64>() / 300.0;
        let trace: f64 = (0..2)
            .map(|j| (0..300).map(|i| (x.get(i, j) - mean(j)).powi(2)).sum::<f64>() / 299.0)
            .sum();
        assert!((total - trace).abs() < 1e-10);
        assert!((p.explained_ratio.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Rotation: pairwise distances survive.
        let d_in = x.sub(&x.select_rows(&[1; 300]).unwrap()).unwrap();
        let d_out = p.coords.sub(&p.coords.select_rows(&[1; 300]).unwrap()).unwrap();
        for i in 0..300 {
            let a = d_in.row(i).iter().map(|v| v * v).sum::<f64>();
            let b = d_out.row(i).iter().map(|v| v * v).sum::<f64>();
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rank_one_data() {
        let x = Tensor::from_rows(&(0..20).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect::<Vec<_>>())
            .unwrap();
        let p = pca_project(&x, 1).unwrap();
        assert!((p.explained_ratio[0] - 1.0).abs() < 1e-12);
        assert!(pca_project(&x, 2).is_err());
    }

    #[test]
    fn ratios_sum_to_at_most_one() {
        let x = normal_tensor(&[50, 6], &mut seeded(2));
        let p = pca_project(&x, 3).unwrap();
        assert!(p.explained_ratio.iter().sum::<f64>() <= 1.0 + 1e-12);
        assert!(p.explained_variance.windows(2).all(|w| w[0] >= w[1]));
        assert!(pca_project(&x, 7).is_err());
    }
}

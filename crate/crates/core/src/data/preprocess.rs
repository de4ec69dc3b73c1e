use std::cmp::Ordering;

use crate::data::ExpressionMatrix;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `ln(count + 1)` elementwise.
pub fn log1p_normalize(expr: &ExpressionMatrix) -> Tensor {
    expr.values.map(f64::ln_1p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneSelection {
    pub indices: Vec<usize>,
    pub names: Vec<String>,
}

impl GeneSelection {
    /// Column subset of `values` in selection order.
    pub fn columns(&self, values: &Tensor) -> Result<Tensor> {
        if let Some(&bad) = self.indices.iter().find(|&&j| j >= values.cols()) {
            return Err(Error::arg(format!("gene index {bad} out of range")));
        }
        let n = values.rows();
        let mut data = Vec::with_capacity(n * self.indices.len());
        for i in 0..n {
            let row = values.row(i);
            data.extend(self.indices.iter().map(|&j| row[j]));
        }
        Tensor::matrix(n, self.indices.len(), data)
    }
}

/// The `k` genes with the highest mean normalised expression, in
/// descending order of mean; equal means fall back to ascending name.
pub fn select_top_k_genes(norm: &Tensor, gene_names: &[String], k: usize) -> Result<GeneSelection> {
    let n_genes = norm.cols();
    if gene_names.len() != n_genes {
        return Err(Error::dim("select_top_k_genes", norm.shape(), &[gene_names.len()]));
    }
    if k == 0 || k > n_genes {
        return Err(Error::arg(format!("k = {k} outside 1..={n_genes}")));
    }
    let n = norm.rows() as f64;
    let mut means = vec![0.0; n_genes];
    for i in 0..norm.rows() {
        for (m, v) in means.iter_mut().zip(norm.row(i)) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    let mut order: Vec<usize> = (0..n_genes).collect();
    order.sort_by(|&a, &b| {
        means[b]
            .partial_cmp(&means[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| gene_names[a].cmp(&gene_names[b]))
    });
    order.truncate(k);
    Ok(GeneSelection {
        names: order.iter().map(|&j| gene_names[j].clone()).collect(),
        indices: order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn log1p_fixed_points() {
        let e = ExpressionMatrix::new(
            names(&["a", "b"]),
            Tensor::matrix(1, 2, vec![0.0, std::f64::consts::E - 1.0]).unwrap(),
        )
        .unwrap();
        let n = log1p_normalize(&e);
        assert_eq!(n.data()[0], 0.0);
        assert_eq!(n.data()[1], 1.0);
    }

    #[test]
    fn full_selection_sorted_desc() {
        let t = Tensor::from_rows(&[vec![1.0, 3.0, 2.0], vec![1.0, 3.0, 2.0]]).unwrap();
        let s = select_top_k_genes(&t, &names(&["x", "y", "z"]), 3).unwrap();
        assert_eq!(s.indices, vec![1, 2, 0]);
        assert_eq!(s.names, names(&["y", "z", "x"]));
    }

    #[test]
    fn ties_broken_by_name() {
        let t = Tensor::from_rows(&[vec![2.0, 2.0, 1.0]]).unwrap();
        let s = select_top_k_genes(&t, &names(&["beta", "alpha", "gamma"]), 2).unwrap();
        assert_eq!(s.names, names(&["alpha", "beta"]));
    }

    #[test]
    fn k_out_of_range() {
        let t = Tensor::zeros(&[2, 3]);
        let g = names(&["a", "b", "c"]);
        assert!(select_top_k_genes(&t, &g, 0).is_err());
        assert!(select_top_k_genes(&t, &g, 4).is_err());
    }
}

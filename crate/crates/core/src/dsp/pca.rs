//! Principal component analysis by SVD of the mean-centred data.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::feature::{read_feature_file, write_feature_file, FeatureTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    /// Per-dimension mean of the training rows, length `d`.
    pub mean: Vec<f64>,
    /// `k x d`, orthonormal rows ordered by explained variance.
    pub components: DMatrix<f64>,
    /// Sample variance along each component (`n - 1` denominator).
    pub explained_variance: Vec<f64>,
}

/// Fits `k` components to the rows of `x` (`n x d`).
///
/// Each component's sign is fixed so its largest-magnitude entry is positive.
pub fn pca_fit(x: &DMatrix<f64>, k: usize) -> Result<PcaModel> {
    let (n, d) = x.shape();
    if n <= k {
        return Err(Error::invalid(format!("pca needs more than {k} rows, got {n}")));
    }
    if k == 0 || k > d {
        return Err(Error::invalid(format!("cannot keep {k} of {d} dimensions")));
    }
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).mean()).collect();
    let mut centred = x.clone();
    for (j, m) in mean.iter().enumerate() {
        centred.column_mut(j).add_scalar_mut(-m);
    }
    let svd = centred.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut components = DMatrix::zeros(k, d);
    let mut explained_variance = Vec::with_capacity(k);
    for (row, &src) in order.iter().take(k).enumerate() {
        let mut v: Vec<f64> = v_t.row(src).iter().copied().collect();
        let pivot = v
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(0.0);
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for (j, val) in v.into_iter().enumerate() {
            components[(row, j)] = val;
        }
        let s = svd.singular_values[src];
        explained_variance.push(s * s / (n - 1) as f64);
    }
    // Fewer singular values than k happens when n <= d; pad with zero variance.
    while explained_variance.len() < k {
        explained_variance.push(0.0);
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
    })
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    /// `(x - mean) * components^T`, `n x d` to `n x k`.
    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "pca expects {} columns, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let mut centred = x.clone();
        for (j, m) in self.mean.iter().enumerate() {
            centred.column_mut(j).add_scalar_mut(-m);
        }
        Ok(centred * self.components.transpose())
    }

    /// Maps back from component scores to the input space.
    pub fn inverse_transform(&self, scores: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = scores * &self.components;
        for (j, m) in self.mean.iter().enumerate() {
            x.column_mut(j).add_scalar_mut(*m);
        }
        x
    }

    /// Projects a `d x T` feature array (features by time) to `k x T`.
    pub fn transform_features(&self, x: &FeatureTensor) -> Result<FeatureTensor> {
        let rows = feature_rows(x);
        let y = self.transform(&rows)?;
        let k = self.n_components();
        let t = x.cols();
        let mut data = vec![0.0f32; k * t];
        for c in 0..k {
            for s in 0..t {
                data[c * t + s] = y[(s, c)] as f32;
            }
        }
        x.with_data(k, t, data)
    }

    /// Writes `mean.ftf`, `components.ftf`, `explained_variance.ftf` and a
    /// `pca.json` description into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let d = self.input_dim();
        let k = self.n_components();
        let tagged = |t: FeatureTensor, what: &str| t.with_unit("").with_source(format!("pca:{what}"));
        let mean = FeatureTensor::new(1, d, self.mean.iter().map(|&v| v as f32).collect(), 1.0)?;
        let comps = FeatureTensor::new(
            k,
            d,
            (0..k)
                .flat_map(|r| (0..d).map(move |c| (r, c)))
                .map(|(r, c)| self.components[(r, c)] as f32)
                .collect(),
            1.0,
        )?;
        let var = FeatureTensor::new(
            1,
            k,
            self.explained_variance.iter().map(|&v| v as f32).collect(),
            1.0,
        )?;
        write_feature_file(dir.join("mean.ftf"), &tagged(mean, "mean"))?;
        write_feature_file(dir.join("components.ftf"), &tagged(comps, "components"))?;
        write_feature_file(dir.join("explained_variance.ftf"), &tagged(var, "explained_variance"))?;
        let desc = serde_json::json!({
            "kind": "pca",
            "input_dim": d,
            "n_components": k,
            "files": ["mean.ftf", "components.ftf", "explained_variance.ftf"],
            "transform": "(x - mean) * components^T",
        });
        let path = dir.join("pca.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&desc)?).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mean = read_feature_file(dir.join("mean.ftf"))?;
        let comps = read_feature_file(dir.join("components.ftf"))?;
        let var = read_feature_file(dir.join("explained_variance.ftf"))?;
        if comps.cols() != mean.cols() || var.cols() != comps.rows() {
            return Err(Error::invalid(format!("inconsistent pca files in {}", dir.display())));
        }
        Ok(Self {
            mean: mean.data().iter().map(|&v| v as f64).collect(),
            components: DMatrix::from_row_iterator(
                comps.rows(),
                comps.cols(),
                comps.data().iter().map(|&v| v as f64),
            ),
            explained_variance: var.data().iter().map(|&v| v as f64).collect(),
        })
    }
}

/// Time frames of a `d x T` feature array as the rows of a `T x d` matrix.
pub fn feature_rows(x: &FeatureTensor) -> DMatrix<f64> {
    DMatrix::from_fn(x.cols(), x.rows(), |s, c| x.at(c, s) as f64)
}

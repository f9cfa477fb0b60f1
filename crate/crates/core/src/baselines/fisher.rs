//! Fisherfaces: PCA down to rank `N - C`, then LDA, then nearest neighbour
//! among the projected training images.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::Tensor;

pub const DEFAULT_COMPONENTS: usize = 40;
const SW_RIDGE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct FisherfaceModel {
    mean_face: Vec<f64>,
    /// `P x m` projection, row-major.
    projection: Tensor,
    /// `N x m` projected training images.
    references: Vec<Vec<f64>>,
    labels: Vec<usize>,
    classes: usize,
    image_shape: Vec<usize>,
}

/// Eigenpairs sorted by decreasing eigenvalue.
fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    let data = (0..m.nrows()).flat_map(|r| (0..m.ncols()).map(move |c| m[(r, c)])).collect();
    Tensor::new(&[m.nrows(), m.ncols()], data).expect("non-empty matrix")
}

/// Orthonormal PCA basis (`P x k`, row-major) of mean-centred rows, computed
/// from the `N x N` Gram matrix. Directions with negligible variance are
/// dropped, so `k <= min(max_rank, rank)`.
pub fn pca_basis(centered: &DMatrix<f64>, max_rank: usize) -> Result<DMatrix<f64>> {
    let gram = centered * centered.transpose();
    let (values, vectors) = sorted_eigen(gram);
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    let tol = top * 1e-10 * values.len() as f64;
    let k = values.iter().take(max_rank).take_while(|&&v| v > tol).count();
    if k == 0 {
        return Err(Error::Singular(
            "PCA kept no components: all training images are identical after mean subtraction".into(),
        ));
    }
    let mut basis = centered.transpose() * vectors.columns(0, k);
    for (j, mut col) in basis.column_iter_mut().enumerate() {
        col /= values[j].sqrt();
    }
    // one QR pass removes the round-off left by the Gram-matrix route
    let q = basis.qr().q();
    Ok(q)
}

impl FisherfaceModel {
    /// Fits on samples whose images all share one shape.
    pub fn fit(samples: &[Sample], n_components: usize) -> Result<Self> {
        let shape = samples
            .first()
            .ok_or_else(|| Error::Dataset("fisherfaces: no training samples".into()))?
            .image
            .shape()
            .to_vec();
        if let Some(s) = samples.iter().find(|s| s.image.shape() != shape) {
            return Err(Error::shape("fisherfaces", format!("{shape:?}"), format!("{:?}", s.image.shape())));
        }
        let rows: Vec<&[f64]> = samples.iter().map(|s| s.image.data()).collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        Self::fit_rows(&rows, &labels, n_components, &shape)
    }

    /// Fits on raw feature rows. `image_shape` is the shape `predict` accepts.
    pub fn fit_rows<R: AsRef<[f64]>>(
        rows: &[R],
        labels: &[usize],
        n_components: usize,
        image_shape: &[usize],
    ) -> Result<Self> {
        let n = rows.len();
        let p: usize = image_shape.iter().product();
        if labels.len() != n {
            return Err(Error::InvalidArgument(format!("fisherfaces: {n} rows but {} labels", labels.len())));
        }
        if let Some(r) = rows.iter().find(|r| r.as_ref().len() != p) {
            return Err(Error::shape("fisherfaces", format!("{p} features"), format!("{}", r.as_ref().len())));
        }
        let classes = labels.iter().max().map_or(0, |&m| m + 1);
        let mut counts = vec![0usize; classes];
        for &l in labels {
            counts[l] += 1;
        }
        let present: Vec<usize> = (0..classes).filter(|&c| counts[c] > 0).collect();
        let c = present.len();
        if c < 2 || n <= c {
            return Err(Error::Dataset(format!(
                "fisherfaces: need N > C >= 2, got N={n}, C={c}"
            )));
        }
        if let Some(&bad) = present.iter().find(|&&k| counts[k] < 2) {
            return Err(Error::Dataset(format!("fisherfaces: class {bad} has fewer than 2 samples")));
        }
        let mut n_comp = n_components;
        if n_comp > c - 1 {
            log::warn!("fisherfaces: {n_comp} components requested but only C-1 = {} exist; clamping", c - 1);
            n_comp = c - 1;
        }
        if n_comp == 0 {
            return Err(Error::InvalidArgument("fisherfaces: n_components must be >= 1".into()));
        }

        let mut mean = vec![0.0; p];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.as_ref()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, p, |i, j| rows[i].as_ref()[j] - mean[j]);

        let w_pca = pca_basis(&centered, n - c)?;
        let k = w_pca.ncols();
        let y = &centered * &w_pca;

        let mut class_mean = vec![DVector::<f64>::zeros(k); classes];
        for (i, &l) in labels.iter().enumerate() {
            class_mean[l] += y.row(i).transpose();
        }
        for &l in &present {
            class_mean[l] /= counts[l] as f64;
        }
        let mut sb = DMatrix::<f64>::zeros(k, k);
        for &l in &present {
            let m = &class_mean[l];
            sb += m * m.transpose() * counts[l] as f64;
        }
        let mut sw = DMatrix::<f64>::zeros(k, k);
        for (i, &l) in labels.iter().enumerate() {
            let d = y.row(i).transpose() - &class_mean[l];
            sw += &d * d.transpose();
        }

        let (mut sw_vals, mut sw_vecs) = sorted_eigen(sw.clone());
        let largest = sw_vals[0];
        let smallest = sw_vals[k - 1];
        if smallest.partial_cmp(&(largest * 1e-10)) != Some(std::cmp::Ordering::Greater) {
            log::debug!("fisherfaces: within-class scatter near-singular (eigenvalues {smallest:e}..{largest:e}); adding {SW_RIDGE:e}·I");
            sw += DMatrix::identity(k, k) * SW_RIDGE;
            (sw_vals, sw_vecs) = sorted_eigen(sw);
        }
        if let Some(bad) = sw_vals.iter().find(|v| v.is_nan() || **v <= 0.0) {
            return Err(Error::Singular(format!(
                "within-class scatter has eigenvalue {bad:e} after regularization (N={n}, C={c}, PCA rank {k})"
            )));
        }
        let inv_sqrt = DMatrix::from_diagonal(&DVector::from_iterator(k, sw_vals.iter().map(|v| 1.0 / v.sqrt())));
        let whiten = &sw_vecs * inv_sqrt * sw_vecs.transpose();
        let m = &whiten * sb * &whiten;
        let (_, lda_vecs) = sorted_eigen((&m + m.transpose()) * 0.5);
        let m_out = n_comp.min(k);
        let w_lda = &whiten * lda_vecs.columns(0, m_out);
        let w = &w_pca * w_lda;

        let proj = &centered * &w;
        let references = (0..n).map(|i| proj.row(i).iter().copied().collect()).collect();
        Ok(Self {
            mean_face: mean,
            projection: to_tensor(&w),
            references,
            labels: labels.to_vec(),
            classes,
            image_shape: image_shape.to_vec(),
        })
    }

    pub fn n_components(&self) -> usize {
        self.projection.shape()[1]
    }

    pub fn mean_face(&self) -> &[f64] {
        &self.mean_face
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn references(&self) -> &[Vec<f64>] {
        &self.references
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.image_shape
    }

    /// `(x - mean) · W`.
    pub fn project(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.mean_face.len() {
            return Err(Error::shape(
                "fisherfaces",
                format!("{} features", self.mean_face.len()),
                format!("{}", features.len()),
            ));
        }
        let m = self.n_components();
        let w = self.projection.data();
        let mut out = vec![0.0; m];
        for (j, (x, mu)) in features.iter().zip(&self.mean_face).enumerate() {
            let d = x - mu;
            for (o, wv) in out.iter_mut().zip(&w[j * m..(j + 1) * m]) {
                *o += d * wv;
            }
        }
        Ok(out)
    }

    /// Label of the nearest projected training image; ties go to the lowest
    /// label.
    pub fn predict_features(&self, features: &[f64]) -> Result<usize> {
        let q = self.project(features)?;
        let mut best: Option<(f64, usize)> = None;
        for (r, &label) in self.references.iter().zip(&self.labels) {
            let d: f64 = r.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
            let better = match best {
                None => true,
                Some((bd, bl)) => d < bd || (d == bd && label < bl),
            };
            if better {
                best = Some((d, label));
            }
        }
        Ok(best.expect("fit guarantees references").1)
    }

    pub fn to_blobs(&self) -> Vec<(String, Tensor)> {
        let n = self.references.len();
        let m = self.n_components();
        vec![
            ("mean_face".into(), Tensor::from_vec(self.mean_face.clone())),
            ("W".into(), self.projection.clone()),
            (
                "references".into(),
                Tensor::new(&[n, m], self.references.concat()).expect("fitted"),
            ),
            (
                "labels".into(),
                Tensor::from_vec(self.labels.iter().map(|&l| l as f64).collect()),
            ),
        ]
    }

    pub fn from_blobs(blobs: &[(String, Tensor)], image_shape: &[usize], classes: usize) -> Result<Self> {
        let get = |name: &str| {
            blobs
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing blob {name:?}")))
        };
        let (mean, w, refs, labels) = (get("mean_face")?, get("W")?, get("references")?, get("labels")?);
        let p: usize = image_shape.iter().product();
        let bad = |what: &str| Error::Checkpoint(format!("fisherfaces blob {what} has the wrong shape"));
        if mean.len() != p {
            return Err(bad("mean_face"));
        }
        let [wp, m] = w.shape()[..] else { return Err(bad("W")) };
        if wp != p {
            return Err(bad("W"));
        }
        let [n, rm] = refs.shape()[..] else { return Err(bad("references")) };
        if rm != m || labels.len() != n {
            return Err(bad("references"));
        }
        Ok(Self {
            mean_face: mean.data().to_vec(),
            projection: w.clone(),
            references: refs.data().chunks(m).map(<[f64]>::to_vec).collect(),
            labels: labels.data().iter().map(|&l| l as usize).collect(),
            classes,
            image_shape: image_shape.to_vec(),
        })
    }
}

impl Classifier for FisherfaceModel {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn predict(&self, image: &Tensor) -> Result<usize> {
        if image.shape() != self.image_shape {
            return Err(Error::shape(
                "fisherfaces",
                format!("{:?}", self.image_shape),
                format!("{:?}", image.shape()),
            ));
        }
        self.predict_features(image.data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_gaussians;

    #[test]
    fn pca_columns_are_orthonormal() {
        let (pts, _) = synth_gaussians(4, 12, 6, 3.0, 2);
        let n = pts.len();
        let mean: Vec<f64> = (0..12).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
        let x = DMatrix::from_fn(n, 12, |i, j| pts[i][j] - mean[j]);
        let w = pca_basis(&x, n - 4).unwrap();
        let gram = w.transpose() * &w;
        let err = (gram - DMatrix::identity(w.ncols(), w.ncols())).abs().max();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn request_is_clamped_to_classes_minus_one() {
        let (pts, labels) = synth_gaussians(38, 40, 3, 8.0, 1);
        let m = FisherfaceModel::fit_rows(&pts, &labels, 100, &[40]).unwrap();
        assert_eq!(m.n_components(), 37);
    }

    #[test]
    fn gaussians_are_separated() {
        let (train, tl) = synth_gaussians(3, 10, 30, 10.0, 7);
        let (test, el) = synth_gaussians(3, 10, 30, 10.0, 8);
        let m = FisherfaceModel::fit_rows(&train, &tl, DEFAULT_COMPONENTS, &[10]).unwrap();
        assert!(m.n_components() <= 2);
        for (x, &l) in test.iter().zip(&el) {
            assert_eq!(m.predict_features(x).unwrap(), l);
        }
    }

    #[test]
    fn training_image_predicts_its_label() {
        let (pts, labels) = synth_gaussians(3, 6, 5, 4.0, 3);
        let m = FisherfaceModel::fit_rows(&pts, &labels, 2, &[6]).unwrap();
        for (x, &l) in pts.iter().zip(&labels).take(6) {
            let p = m.predict_features(x).unwrap();
            let own = m.project(x).unwrap();
            let dist_own: f64 = own
                .iter()
                .zip(&m.references()[pts.iter().position(|q| q == x).unwrap()])
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            assert!(dist_own < 1e-18);
            assert_eq!(p, l);
        }
    }

    #[test]
    fn equidistant_references_pick_lowest_label() {
        // two classes mirrored around the origin on one axis
        let rows = vec![vec![-1.0, 0.0], vec![-1.0, 0.1], vec![1.0, 0.0], vec![1.0, 0.1]];
        let labels = [1, 1, 0, 0];
        let m = FisherfaceModel::fit_rows(&rows, &labels, 1, &[2]).unwrap();
        assert_eq!(m.predict_features(&[0.0, 0.05]).unwrap(), 0);
    }

    #[test]
    fn constant_offset_changes_nothing() {
        let (train, tl) = synth_gaussians(3, 8, 10, 3.0, 4);
        let (test, _) = synth_gaussians(3, 8, 10, 3.0, 5);
        let shift = |v: &Vec<f64>| v.iter().map(|x| x + 0.37).collect::<Vec<_>>();
        let a = FisherfaceModel::fit_rows(&train, &tl, 2, &[8]).unwrap();
        let shifted: Vec<Vec<f64>> = train.iter().map(shift).collect();
        let b = FisherfaceModel::fit_rows(&shifted, &tl, 2, &[8]).unwrap();
        for q in &test {
            assert_eq!(a.predict_features(q).unwrap(), b.predict_features(&shift(q)).unwrap());
        }
    }

    #[test]
    fn too_few_samples_per_class() {
        let rows = vec![vec![0.0], vec![1.0], vec![2.0]];
        assert!(FisherfaceModel::fit_rows(&rows, &[0, 0, 1], 1, &[1]).is_err());
    }

    #[test]
    fn blobs_round_trip() {
        let (pts, labels) = synth_gaussians(3, 5, 4, 5.0, 9);
        let m = FisherfaceModel::fit_rows(&pts, &labels, 2, &[5]).unwrap();
        let back = FisherfaceModel::from_blobs(&m.to_blobs(), &[5], 3).unwrap();
        assert_eq!(back, m);
    }
}

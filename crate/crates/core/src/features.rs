//! Feature matrices of exponents, image norm distances and PCA scatter data.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Image, Provenance};
use crate::lyap::LyapunovSpectrum;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("feature dim {dim} exceeds spectrum length {available}")]
    DimTooLarge { dim: usize, available: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("data has zero total variance")]
    DegenerateData,
    #[error("bad feature CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for FeatureError {
    fn from(e: csv::Error) -> Self {
        FeatureError::Csv(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMeta {
    pub id: String,
    pub provenance: Provenance,
    pub label: Option<u8>,
}

impl RowMeta {
    pub fn of(image: &Image) -> Self {
        RowMeta {
            id: image.id().to_string(),
            provenance: image.provenance().clone(),
            label: image.label(),
        }
    }
}

/// `N × D` finite feature rows with per-row metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    rows: Vec<Vec<f64>>,
    meta: Vec<RowMeta>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, rows: Vec<Vec<f64>>, meta: Vec<RowMeta>) -> Result<Self, FeatureError> {
        if dim == 0 {
            return Err(FeatureError::Invalid("feature dim must be positive".into()));
        }
        if rows.len() != meta.len() {
            return Err(FeatureError::Invalid(format!(
                "{} rows but {} metadata entries",
                rows.len(),
                meta.len()
            )));
        }
        for (r, m) in rows.iter().zip(&meta) {
            if r.len() != dim {
                return Err(FeatureError::DimMismatch {
                    expected: dim,
                    found: r.len(),
                });
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(FeatureError::Invalid(format!("row '{}' has non-finite entries", m.id)));
            }
        }
        Ok(FeatureMatrix { dim, rows, meta })
    }

    /// Rows without metadata, ids `row-<k>`.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, FeatureError> {
        let dim = rows.first().map_or(1, Vec::len);
        let meta = (0..rows.len())
            .map(|k| RowMeta {
                id: format!("row-{k}"),
                provenance: Provenance::Legitimate,
                label: None,
            })
            .collect();
        FeatureMatrix::new(dim, rows, meta)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn meta(&self) -> &[RowMeta] {
        &self.meta
    }

    /// Rows whose metadata satisfies `keep`, order preserved.
    pub fn filter(&self, keep: impl Fn(&RowMeta) -> bool) -> FeatureMatrix {
        let (rows, meta) = self
            .rows
            .iter()
            .zip(&self.meta)
            .filter(|(_, m)| keep(m))
            .map(|(r, m)| (r.clone(), m.clone()))
            .unzip();
        FeatureMatrix {
            dim: self.dim,
            rows,
            meta,
        }
    }

    /// Keep the first `dim` columns.
    pub fn truncate(&self, dim: usize) -> Result<FeatureMatrix, FeatureError> {
        if dim > self.dim {
            return Err(FeatureError::DimTooLarge {
                dim,
                available: self.dim,
            });
        }
        let rows = self.rows.iter().map(|r| r[..dim].to_vec()).collect();
        FeatureMatrix::new(dim, rows, self.meta.clone())
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &FeatureMatrix) -> Result<FeatureMatrix, FeatureError> {
        if other.dim != self.dim && !other.is_empty() {
            return Err(FeatureError::DimMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        let mut out = self.clone();
        out.rows.extend(other.rows.iter().cloned());
        out.meta.extend(other.meta.iter().cloned());
        Ok(out)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), FeatureError> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["id".to_string(), "provenance".into(), "label".into()];
        header.extend((1..=self.dim).map(|k| format!("l{k}")));
        wr.write_record(&header)?;
        for (r, m) in self.rows.iter().zip(&self.meta) {
            let mut rec = vec![
                m.id.clone(),
                m.provenance.to_string(),
                m.label.map(|l| l.to_string()).unwrap_or_default(),
            ];
            rec.extend(r.iter().map(|v| v.to_string()));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<FeatureMatrix, FeatureError> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let dim = header.len().saturating_sub(3);
        let expected: Vec<String> = ["id", "provenance", "label"]
            .iter()
            .map(|s| s.to_string())
            .chain((1..=dim).map(|k| format!("l{k}")))
            .collect();
        if dim == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(FeatureError::Csv(format!("unexpected header {:?}", header)));
        }
        let mut rows = Vec::new();
        let mut meta = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let provenance = rec[1]
                .parse::<Provenance>()
                .map_err(|e| FeatureError::Csv(e.to_string()))?;
            let label = match &rec[2] {
                "" => None,
                s => Some(s.parse::<u8>().map_err(|e| FeatureError::Csv(format!("label '{s}': {e}")))?),
            };
            let row = (3..3 + dim)
                .map(|c| {
                    rec[c]
                        .parse::<f64>()
                        .map_err(|e| FeatureError::Csv(format!("'{}': {e}", &rec[c])))
                })
                .collect::<Result<Vec<_>, _>>()?;
            meta.push(RowMeta {
                id: rec[0].to_string(),
                provenance,
                label,
            });
            rows.push(row);
        }
        FeatureMatrix::new(dim, rows, meta)
    }
}

/// Row `k` = first `dim` exponents of `spectra[k]`.
pub fn build_features(
    spectra: &[LyapunovSpectrum],
    dim: usize,
    meta: Vec<RowMeta>,
) -> Result<FeatureMatrix, FeatureError> {
    let mut rows = Vec::with_capacity(spectra.len());
    for s in spectra {
        if dim > s.exponents.len() {
            return Err(FeatureError::DimTooLarge {
                dim,
                available: s.exponents.len(),
            });
        }
        rows.push(s.exponents[..dim].to_vec());
    }
    FeatureMatrix::new(dim, rows, meta)
}

/// Euclidean norm of the pixelwise difference.
pub fn l2_distance(a: &Image, b: &Image) -> Result<f64, FeatureError> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(FeatureError::DimMismatch {
            expected: a.pixels().len(),
            found: b.pixels().len(),
        });
    }
    Ok(a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Two orthonormal rows of length `D`.
    pub components: Vec<Vec<f64>>,
    /// Sample variance (`N - 1` denominator) along each component.
    pub explained_variance: Vec<f64>,
}

/// Top-two principal directions via SVD of the centred data.
///
/// Each component is signed so its largest-magnitude entry is positive.
pub fn pca_fit(features: &FeatureMatrix) -> Result<PcaModel, FeatureError> {
    let (n, d) = (features.len(), features.dim());
    if n < 2 || d < 2 {
        return Err(FeatureError::Invalid(format!("PCA needs N >= 2 and D >= 2, got {n} x {d}")));
    }
    let mean: Vec<f64> = (0..d)
        .map(|c| features.rows().iter().map(|r| r[c]).sum::<f64>() / n as f64)
        .collect();
    let x = DMatrix::from_fn(n, d, |i, j| features.rows()[i][j] - mean[j]);
    if x.iter().all(|&v| v == 0.0) {
        return Err(FeatureError::DegenerateData);
    }
    let svd = x.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut components = Vec::with_capacity(2);
    let mut explained_variance = Vec::with_capacity(2);
    for &k in order.iter().take(2) {
        let mut c: Vec<f64> = v_t.row(k).iter().copied().collect();
        let lead = c.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if lead < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
        let s = svd.singular_values[k];
        explained_variance.push(s * s / (n - 1) as f64);
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
    })
}

/// Centred rows times the component transposes.
pub fn pca_project(model: &PcaModel, features: &FeatureMatrix) -> Result<Vec<[f64; 2]>, FeatureError> {
    if features.dim() != model.mean.len() {
        return Err(FeatureError::DimMismatch {
            expected: model.mean.len(),
            found: features.dim(),
        });
    }
    Ok(features
        .rows()
        .par_iter()
        .map(|r| {
            let mut out = [0.0; 2];
            for (k, comp) in model.components.iter().enumerate() {
                out[k] = r.iter().zip(&model.mean).zip(comp).map(|((x, m), c)| (x - m) * c).sum();
            }
            out
        })
        .collect())
}

/// Scatter CSV `id,provenance,pc1,pc2`.
pub fn write_scatter_csv<W: Write>(features: &FeatureMatrix, points: &[[f64; 2]], w: W) -> Result<(), FeatureError> {
    if points.len() != features.len() {
        return Err(FeatureError::DimMismatch {
            expected: features.len(),
            found: points.len(),
        });
    }
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["id", "provenance", "pc1", "pc2"])?;
    for (m, p) in features.meta().iter().zip(points) {
        wr.write_record([m.id.clone(), m.provenance.to_string(), p[0].to_string(), p[1].to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

/// Mean silhouette coefficient of 2-D points under the given cluster labels.
///
/// `None` with fewer than two clusters. Singleton clusters score 0.
pub fn silhouette_score(points: &[[f64; 2]], labels: &[usize]) -> Option<f64> {
    assert_eq!(points.len(), labels.len());
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return None;
    }
    let dist = |a: &[f64; 2], b: &[f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]);
    let total: f64 = (0..points.len())
        .map(|i| {
            let mut sums = vec![(0.0, 0usize); clusters.len()];
            for j in 0..points.len() {
                if i != j {
                    let c = clusters.binary_search(&labels[j]).unwrap();
                    sums[c].0 += dist(&points[i], &points[j]);
                    sums[c].1 += 1;
                }
            }
            let own = clusters.binary_search(&labels[i]).unwrap();
            if sums[own].1 == 0 {
                return 0.0;
            }
            let a = sums[own].0 / sums[own].1 as f64;
            let b = sums
                .iter()
                .enumerate()
                .filter(|&(c, s)| c != own && s.1 > 0)
                .map(|(_, s)| s.0 / s.1 as f64)
                .fold(f64::INFINITY, f64::min);
            (b - a) / a.max(b)
        })
        .sum();
    Some(total / points.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spectrum(e: &[f64]) -> LyapunovSpectrum {
        LyapunovSpectrum {
            exponents: e.to_vec(),
            n_steps: 1,
            degenerate_steps: 0,
            regularized_steps: 0,
        }
    }

    fn meta(n: usize) -> Vec<RowMeta> {
        FeatureMatrix::from_rows(vec![vec![0.0]; n]).unwrap().meta().to_vec()
    }

    fn img(px: Vec<f64>) -> Image {
        Image::new("x", px, 2, 2, None, Provenance::Legitimate).unwrap()
    }

    #[test]
    fn build_rows() {
        let s = [spectrum(&[1.0, 2.0, 3.0, 4.0])];
        assert_eq!(build_features(&s, 2, meta(1)).unwrap().rows()[0], vec![1.0, 2.0]);
        assert_eq!(build_features(&s, 4, meta(1)).unwrap().rows()[0], vec![1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(
            build_features(&s, 5, meta(1)),
            Err(FeatureError::DimTooLarge { dim: 5, available: 4 })
        ));
    }

    #[test]
    fn distances() {
        let a = img(vec![0.0, 0.5, 1.0, 0.25]);
        assert_eq!(l2_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(l2_distance(&a, &img(vec![1.0, 0.5, 1.0, 0.25])).unwrap(), 1.0);
        assert_eq!(l2_distance(&img(vec![0.5; 4]), &img(vec![0.0; 4])).unwrap(), 1.0);
        let b = Image::new("y", vec![0.0; 6], 2, 3, None, Provenance::Legitimate).unwrap();
        assert!(matches!(l2_distance(&a, &b), Err(FeatureError::DimMismatch { .. })));
    }

    #[test]
    fn pca_on_a_line() {
        let ts = [-2.0, -1.0, 0.5, 1.0, 3.0];
        let rows: Vec<Vec<f64>> = ts.iter().map(|&t| vec![t, 2.0 * t]).collect();
        let fm = FeatureMatrix::from_rows(rows).unwrap();
        let model = pca_fit(&fm).unwrap();
        assert!(model.explained_variance[1].abs() < 1e-12);
        let c = &model.components[0];
        let s5 = 5f64.sqrt();
        assert!((c[0] - 1.0 / s5).abs() < 1e-12 && (c[1] - 2.0 / s5).abs() < 1e-12);
        let mean_t = ts.iter().sum::<f64>() / 5.0;
        for (p, t) in pca_project(&model, &fm).unwrap().iter().zip(ts) {
            assert!((p[0] - (t - mean_t) * s5).abs() < 1e-12);
        }
    }

    #[test]
    fn pca_degenerate() {
        let fm = FeatureMatrix::from_rows(vec![vec![1.0, 2.0]; 5]).unwrap();
        assert!(matches!(pca_fit(&fm), Err(FeatureError::DegenerateData)));
    }

    #[test]
    fn csv_round_trip() {
        let meta = vec![
            RowMeta {
                id: "a".into(),
                provenance: Provenance::Legitimate,
                label: Some(7),
            },
            RowMeta {
                id: "b".into(),
                provenance: Provenance::Adversarial {
                    attack: "fgsm".into(),
                    targeted: true,
                    target: Some(2),
                },
                label: None,
            },
        ];
        let fm = FeatureMatrix::new(2, vec![vec![0.1, -1e-17], vec![3.5, f64::MIN_POSITIVE]], meta).unwrap();
        let mut buf = Vec::new();
        fm.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("id,provenance,label,l1,l2\n"));
        assert_eq!(FeatureMatrix::read_csv(buf.as_slice()).unwrap(), fm);
    }

    #[test]
    fn silhouette_of_separated_clusters() {
        let pts = [[0.0, 0.0], [0.0, 0.1], [10.0, 0.0], [10.0, 0.1]];
        let s = silhouette_score(&pts, &[0, 0, 1, 1]).unwrap();
        assert!(s > 0.98);
        assert_eq!(silhouette_score(&pts, &[0; 4]), None);
    }
}

//! Closed-form coefficients, reconstruction, and composed low-rank updates.
//!
//! With orthonormal component rows `V`, the least-squares coefficients of a
//! vector `w` are simply `V·(w − mean)`; no solve is needed.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::linalg::frobenius_sq;
use crate::scalar::Scalar;
use crate::store::{
    container_hash, encode_container, read_container, AdapterBundle, EncodedContainer, Manifest,
    Role, SiteId, SiteMatrix, Tensor, TensorKind,
};
use crate::subspace::{SiteSubspace, SubspaceSet};

pub const COEFFICIENTS_KIND: &str = "coefficients";
/// Denominator floor under which a relative residual is reported as zero.
pub const REL_RESIDUAL_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SiteCoefficients<T> {
    pub site: SiteId,
    /// `K × r`; column `j` expresses rank slot `j` in the component basis.
    pub alpha: Array2<T>,
    pub include_mean: bool,
    pub residual_fro: T,
}

impl<T: Scalar> SiteCoefficients<T> {
    pub fn rank(&self) -> usize {
        self.alpha.ncols()
    }
}

/// Rank vectors of a site matrix as rows: A as-is, B transposed.
pub fn role_vectors<T: Scalar>(w: ArrayView2<'_, T>, role: Role) -> Array2<T> {
    match role {
        Role::A => w.to_owned(),
        Role::B => w.t().to_owned(),
    }
}

fn from_role_vectors<T: Scalar>(v: Array2<T>, role: Role) -> Array2<T> {
    match role {
        Role::A => v,
        Role::B => v.reversed_axes().as_standard_layout().to_owned(),
    }
}

/// Projects `w` (in its native A or B shape) onto the subspace.
pub fn fit_coefficients<T: Scalar>(
    sub: &SiteSubspace<T>,
    w: ArrayView2<'_, T>,
    include_mean: bool,
) -> Result<SiteCoefficients<T>> {
    let mut vectors = role_vectors(w, sub.site.role);
    if vectors.ncols() != sub.ambient_dim {
        return Err(Error::DimMismatch(format!(
            "{}: adapter vectors have dimension {}, subspace has {}",
            sub.site,
            vectors.ncols(),
            sub.ambient_dim
        )));
    }
    if include_mean {
        vectors -= &sub.mean;
    }
    let alpha = sub.components.dot(&vectors.t());
    let residual = &vectors - &alpha.t().dot(&sub.components);
    Ok(SiteCoefficients {
        site: sub.site.clone(),
        alpha,
        include_mean,
        residual_fro: frobenius_sq(residual.view()).sqrt(),
    })
}

/// Inverse of [`fit_coefficients`]: `αᵀV` (plus mean) in the role's native shape.
pub fn reconstruct<T: Scalar>(sub: &SiteSubspace<T>, coeffs: &SiteCoefficients<T>) -> Result<Array2<T>> {
    if coeffs.alpha.nrows() != sub.k_total() {
        return Err(Error::DimMismatch(format!(
            "{}: {} coefficient rows for {} components",
            sub.site,
            coeffs.alpha.nrows(),
            sub.k_total()
        )));
    }
    let mut vectors = coeffs.alpha.t().dot(&sub.components);
    if coeffs.include_mean {
        vectors += &sub.mean;
    }
    Ok(from_role_vectors(vectors, sub.site.role))
}

fn outer<T: Scalar>(u: &Array1<T>, v: &Array1<T>) -> Array2<T> {
    u.view()
        .insert_axis(Axis(1))
        .dot(&v.view().insert_axis(Axis(0)))
}

/// `ΔW = B̂·Â` (`m × n`) evaluated through the `K_B × K_A` core
/// `α_B·α_Aᵀ`, without materializing either factor.
pub fn compose_update<T: Scalar>(
    sub_a: &SiteSubspace<T>,
    coef_a: &SiteCoefficients<T>,
    sub_b: &SiteSubspace<T>,
    coef_b: &SiteCoefficients<T>,
) -> Result<Array2<T>> {
    let r = coef_a.rank();
    if coef_b.rank() != r {
        return Err(Error::RankMismatch { a: r, b: coef_b.rank() });
    }
    if coef_a.alpha.nrows() != sub_a.k_total() || coef_b.alpha.nrows() != sub_b.k_total() {
        return Err(Error::DimMismatch("coefficient rows do not match component counts".into()));
    }
    let core = coef_b.alpha.dot(&coef_a.alpha.t());
    let mut delta = sub_b.components.t().dot(&core).dot(&sub_a.components);
    if coef_a.include_mean {
        // B̂ summed over rank slots, times the A mean.
        let b_sum = sub_b.components.t().dot(&coef_b.alpha.sum_axis(Axis(1)));
        delta += &outer(&b_sum, &sub_a.mean);
    }
    if coef_b.include_mean {
        let a_sum = coef_a.alpha.sum_axis(Axis(1)).dot(&sub_a.components);
        delta += &outer(&sub_b.mean, &a_sum);
    }
    if coef_a.include_mean && coef_b.include_mean {
        delta += &(outer(&sub_b.mean, &sub_a.mean) * T::lit(r as f64));
    }
    Ok(delta)
}

/// Coefficients of one adapter against a specific subspace bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientSet<T> {
    pub adapter_id: String,
    pub base_model_id: String,
    /// Content hash of the subspace bundle the coefficients were fit against.
    pub subspace_ref: String,
    pub include_mean: bool,
    pub sites: BTreeMap<SiteId, SiteCoefficients<T>>,
}

/// Fits every site of `bundle` that the subspace set covers.
pub fn project_adapter<T: Scalar>(
    subspaces: &SubspaceSet<T>,
    bundle: &AdapterBundle,
    include_mean: bool,
) -> Result<CoefficientSet<T>> {
    let mut sites = BTreeMap::new();
    for (id, sub) in &subspaces.sites {
        let w = bundle.sites.get(id).ok_or_else(|| {
            Error::DimMismatch(format!("adapter {} has no site {id}", bundle.adapter_id))
        })?;
        sites.insert(id.clone(), fit_coefficients(sub, w.to_array::<T>().view(), include_mean)?);
    }
    Ok(CoefficientSet {
        adapter_id: bundle.adapter_id.clone(),
        base_model_id: bundle.base_model_id.clone(),
        subspace_ref: subspaces.content_hash()?,
        include_mean,
        sites,
    })
}

/// Rebuilds an adapter; refuses coefficients fit against a different basis.
pub fn reconstruct_adapter<T: Scalar>(
    subspaces: &SubspaceSet<T>,
    subspace_hash: &str,
    coeffs: &CoefficientSet<T>,
) -> Result<AdapterBundle> {
    if coeffs.subspace_ref != subspace_hash {
        return Err(Error::SubspaceHashMismatch {
            expected: coeffs.subspace_ref.clone(),
            found: subspace_hash.to_string(),
        });
    }
    let rank = coeffs.sites.values().map(|c| c.rank()).max().unwrap_or(0);
    let mut out = AdapterBundle::new(&coeffs.adapter_id, &coeffs.base_model_id, rank);
    for (id, c) in &coeffs.sites {
        let sub = subspaces
            .sites
            .get(id)
            .ok_or_else(|| Error::DimMismatch(format!("subspace bundle has no site {id}")))?;
        out.sites
            .insert(id.clone(), SiteMatrix::from_array(&reconstruct(sub, c)?)?);
    }
    Ok(out)
}

impl<T: Scalar> CoefficientSet<T> {
    pub fn encode(&self) -> Result<EncodedContainer> {
        let rank = self.sites.values().map(|c| c.rank()).max().unwrap_or(0);
        let mut manifest = Manifest::new(&self.adapter_id, &self.base_model_id, rank);
        manifest.kind = Some(COEFFICIENTS_KIND.to_string());
        manifest.subspace_ref = Some(self.subspace_ref.clone());
        manifest.include_mean = Some(self.include_mean);
        let mut tensors = Vec::new();
        for (id, c) in &self.sites {
            let k = c.alpha.nrows();
            // A zero-component site keeps its rank through a placeholder row.
            let stored = if k == 0 {
                SiteMatrix::zeros(1, c.rank())
            } else {
                SiteMatrix::from_array(&c.alpha)?
            };
            let mut t = Tensor::new(id, Some(TensorKind::Alpha), stored);
            t.entry.k_data = Some(k);
            t.entry.residual_fro = Some(c.residual_fro.as_f64());
            tensors.push(t);
        }
        encode_container(manifest, tensors)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.encode()?.write(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, tensors) = read_container(dir)?;
        if manifest.kind.as_deref() != Some(COEFFICIENTS_KIND) {
            return Err(Error::MalformedManifest(format!(
                "{} is not a coefficient bundle",
                dir.display()
            )));
        }
        let subspace_ref = manifest
            .subspace_ref
            .ok_or_else(|| Error::MalformedManifest("coefficient bundle without subspace_ref".into()))?;
        let include_mean = manifest.include_mean.unwrap_or(false);
        let mut sites = BTreeMap::new();
        for (entry, matrix) in tensors {
            if entry.tensor != Some(TensorKind::Alpha) {
                return Err(Error::MalformedManifest(format!(
                    "unexpected tensor {:?} in coefficient bundle",
                    entry.tensor
                )));
            }
            let id = entry.site_id();
            let alpha = if entry.k_data == Some(0) {
                Array2::zeros((0, matrix.cols()))
            } else {
                matrix.to_array()
            };
            sites.insert(
                id.clone(),
                SiteCoefficients {
                    site: id,
                    alpha,
                    include_mean,
                    residual_fro: T::lit(entry.residual_fro.unwrap_or(0.0)),
                },
            );
        }
        Ok(CoefficientSet {
            adapter_id: manifest.adapter_id,
            base_model_id: manifest.base_model_id,
            subspace_ref,
            include_mean,
            sites,
        })
    }
}

/// Hash of a subspace bundle directory, as referenced by coefficient bundles.
pub fn subspace_hash(dir: &Path) -> Result<String> {
    container_hash(dir)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub site: SiteId,
    pub adapter_id: String,
    pub fro_residual: f64,
    pub rel_residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiteSummary {
    pub site: SiteId,
    pub mean_fro_residual: f64,
    pub mean_rel_residual: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReconstructionReport {
    pub rows: Vec<ReportRow>,
    pub site_means: Vec<SiteSummary>,
}

/// Analytic (mean-including) reconstruction error of every adapter at every site.
pub fn reconstruction_report<T: Scalar>(
    subspaces: &SubspaceSet<T>,
    bundles: &[AdapterBundle],
) -> Result<ReconstructionReport> {
    let mut report = ReconstructionReport::default();
    for (id, sub) in &subspaces.sites {
        let (mut fro_sum, mut rel_sum) = (0.0, 0.0);
        for b in bundles {
            let w = b.sites.get(id).ok_or_else(|| {
                Error::DimMismatch(format!("adapter {} has no site {id}", b.adapter_id))
            })?;
            let w = w.to_array::<T>();
            let c = fit_coefficients(sub, w.view(), true)?;
            let centered = role_vectors(w.view(), id.role) - &sub.mean;
            let denom = frobenius_sq(centered.view()).sqrt().as_f64();
            let fro = c.residual_fro.as_f64();
            let rel = if denom < REL_RESIDUAL_FLOOR { 0.0 } else { fro / denom };
            fro_sum += fro;
            rel_sum += rel;
            report.rows.push(ReportRow {
                site: id.clone(),
                adapter_id: b.adapter_id.clone(),
                fro_residual: fro,
                rel_residual: rel,
            });
        }
        if !bundles.is_empty() {
            let n = bundles.len() as f64;
            report.site_means.push(SiteSummary {
                site: id.clone(),
                mean_fro_residual: fro_sum / n,
                mean_rel_residual: rel_sum / n,
            });
        }
    }
    Ok(report)
}

impl ReconstructionReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["site_name", "role", "adapter_id", "fro_residual", "rel_residual"])
            .expect("in-memory csv");
        for r in &self.rows {
            w.write_record([
                r.site.name.clone(),
                r.site.role.to_string(),
                r.adapter_id.clone(),
                format!("{:?}", r.fro_residual),
                format!("{:?}", r.rel_residual),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    pub fn site_means_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["site_name", "role", "mean_fro_residual", "mean_rel_residual"])
            .expect("in-memory csv");
        for s in &self.site_means {
            w.write_record([
                s.site.name.clone(),
                s.site.role.to_string(),
                format!("{:?}", s.mean_fro_residual),
                format!("{:?}", s.mean_rel_residual),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subspace::SvdMode;
    use ndarray::array;

    fn sub_with(site: SiteId, comps: Array2<f64>, mean: Array1<f64>) -> SiteSubspace<f64> {
        let mut s = SiteSubspace::empty(site, mean, 0, SvdMode::Exact);
        s.k_data = comps.nrows();
        s.components = comps;
        s
    }

    #[test]
    fn projection_onto_first_axis() {
        let sub = sub_with(SiteId::new("l0", Role::A), array![[1.0, 0.0]], array![0.0, 0.0]);
        let w = array![[2.0, 0.0], [0.0, 3.0]];
        let c = fit_coefficients(&sub, w.view(), false).unwrap();
        assert_eq!(c.alpha, array![[2.0, 0.0]]);
        assert!((c.residual_fro - 3.0).abs() < 1e-15);
        let back = reconstruct(&sub, &c).unwrap();
        assert_eq!(back, array![[2.0, 0.0], [0.0, 0.0]]);
    }

    #[test]
    fn exact_span_member_has_zero_residual() {
        let h = 0.5f64.sqrt();
        let v1 = array![h, h, 0.0];
        let v2 = array![0.0, 0.0, 1.0];
        let comps = ndarray::stack![Axis(0), v1, v2];
        let sub = sub_with(SiteId::new("l0", Role::A), comps, Array1::zeros(3));
        let w = (&v1 * 5.0 + &v2 * 2.0).insert_axis(Axis(0));
        let c = fit_coefficients(&sub, w.view(), true).unwrap();
        assert!((c.alpha[[0, 0]] - 5.0).abs() < 1e-12);
        assert!((c.alpha[[1, 0]] - 2.0).abs() < 1e-12);
        assert!(c.residual_fro <= 1e-10);
    }

    #[test]
    fn empty_basis_reconstructs_mean() {
        let sub = SiteSubspace::<f64>::empty(SiteId::new("l0", Role::B), array![1.5, -2.0, 0.25], 0, SvdMode::Exact);
        let c = SiteCoefficients {
            site: sub.site.clone(),
            alpha: Array2::zeros((0, 2)),
            include_mean: true,
            residual_fro: 0.0,
        };
        let w = reconstruct(&sub, &c).unwrap();
        assert_eq!(w, array![[1.5, 1.5], [-2.0, -2.0], [0.25, 0.25]]);
    }

    #[test]
    fn compose_rank_one_example() {
        let sa = sub_with(SiteId::new("l0", Role::A), array![[1.0, 0.0, 0.0]], Array1::zeros(3));
        let sb = sub_with(SiteId::new("l0", Role::B), array![[0.0, 1.0]], Array1::zeros(2));
        let ca = SiteCoefficients { site: sa.site.clone(), alpha: array![[2.0]], include_mean: false, residual_fro: 0.0 };
        let cb = SiteCoefficients { site: sb.site.clone(), alpha: array![[3.0]], include_mean: false, residual_fro: 0.0 };
        assert_eq!(reconstruct(&sa, &ca).unwrap(), array![[2.0, 0.0, 0.0]]);
        assert_eq!(reconstruct(&sb, &cb).unwrap(), array![[0.0], [3.0]]);
        let dw = compose_update(&sa, &ca, &sb, &cb).unwrap();
        assert_eq!(dw, array![[0.0, 0.0, 0.0], [6.0, 0.0, 0.0]]);

        let zero = SiteCoefficients { alpha: array![[0.0]], ..ca.clone() };
        assert!(compose_update(&sa, &zero, &sb, &cb).unwrap().iter().all(|&x| x == 0.0));

        let wide = SiteCoefficients { alpha: array![[1.0, 1.0]], ..cb };
        assert!(matches!(compose_update(&sa, &ca, &sb, &wide), Err(Error::RankMismatch { a: 1, b: 2 })));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let sub = sub_with(SiteId::new("l0", Role::A), array![[1.0, 0.0]], Array1::zeros(2));
        let w = array![[1.0, 2.0, 3.0]];
        assert!(matches!(fit_coefficients(&sub, w.view(), false), Err(Error::DimMismatch(_))));
    }
}

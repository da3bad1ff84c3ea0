//! Principal subspace extraction from stacked adapter vectors.
//!
//! The stack of one site (rows = rank vectors of every adapter) is centered,
//! decomposed, and truncated to `K` right-singular vectors. The basis may be
//! enlarged with pseudo-components: Gaussian vectors orthogonalized against
//! every existing row.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, gaussian_matrix, gaussian_vector, norm, orthogonalize_against, svd};
use crate::scalar::Scalar;
use crate::store::{
    encode_container, read_container, EncodedContainer, Manifest, SiteId, SiteMatrix, Tensor,
    TensorKind,
};

pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.75;
pub const DEFAULT_OVERSAMPLE: usize = 10;
pub const DEFAULT_POWER_ITERS: usize = 2;
/// Relative residual norm below which a pseudo candidate counts as null.
pub const PSEUDO_REJECT_TOL: f64 = 1e-8;
pub const PSEUDO_MAX_RETRIES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvdMode {
    Exact,
    Randomized,
}

impl fmt::Display for SvdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SvdMode::Exact => "exact",
            SvdMode::Randomized => "randomized",
        })
    }
}

impl FromStr for SvdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(SvdMode::Exact),
            "randomized" => Ok(SvdMode::Randomized),
            other => Err(Error::InvalidConfig(format!("unknown svd mode {other:?}"))),
        }
    }
}

/// How many data components to keep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KPolicy {
    FixedK(usize),
    /// Smallest `K` whose cumulative explained variance reaches the threshold.
    VarianceThreshold(f64),
}

impl Default for KPolicy {
    fn default() -> Self {
        KPolicy::VarianceThreshold(DEFAULT_VARIANCE_THRESHOLD)
    }
}

impl KPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KPolicy::FixedK(0) => Err(Error::InvalidConfig("fixed_k must be at least 1".into())),
            KPolicy::VarianceThreshold(t) if !(t > 0.0 && t <= 1.0) => Err(Error::InvalidConfig(
                format!("variance threshold {t} outside (0, 1]"),
            )),
            _ => Ok(()),
        }
    }
}

/// Frozen basis for one site: mean, orthonormal component rows, and the
/// spectrum they were cut from.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteSubspace<T> {
    pub site: SiteId,
    pub ambient_dim: usize,
    pub mean: Array1<T>,
    /// `k_data + k_pseudo` rows; data components first.
    pub components: Array2<T>,
    /// Every data singular value found at extraction, not only the kept ones.
    pub singular_values: Vec<T>,
    /// Squared Frobenius norm of the centered stack.
    pub total_variance: T,
    pub k_data: usize,
    pub k_pseudo: usize,
    pub seed: u64,
    pub svd_mode: SvdMode,
    /// Centered stack was numerically zero; only the mean is meaningful.
    pub degenerate: bool,
    /// The policy asked for more components than the stack's numerical rank.
    pub k_capped: bool,
}

impl<T: Scalar> SiteSubspace<T> {
    /// Subspace holding a mean but no components.
    pub fn empty(site: SiteId, mean: Array1<T>, seed: u64, svd_mode: SvdMode) -> Self {
        let dim = mean.len();
        SiteSubspace {
            site,
            ambient_dim: dim,
            mean,
            components: Array2::zeros((0, dim)),
            singular_values: Vec::new(),
            total_variance: T::zero(),
            k_data: 0,
            k_pseudo: 0,
            seed,
            svd_mode,
            degenerate: false,
            k_capped: false,
        }
    }

    pub fn k_total(&self) -> usize {
        self.components.nrows()
    }

    pub fn data_components(&self) -> ArrayView2<'_, T> {
        self.components.slice(s![..self.k_data, ..])
    }

    pub fn pseudo_components(&self) -> ArrayView2<'_, T> {
        self.components.slice(s![self.k_data.., ..])
    }

    /// Largest off-diagonal Gram entry and largest deviation of a row norm from 1.
    pub fn orthonormality_error(&self) -> (T, T) {
        let gram = self.components.dot(&self.components.t());
        let mut off = T::zero();
        let mut diag = T::zero();
        for ((i, j), &g) in gram.indexed_iter() {
            if i == j {
                diag = diag.max((g.sqrt() - T::one()).abs());
            } else {
                off = off.max(g.abs());
            }
        }
        (off, diag)
    }
}

/// Extracts the principal subspace of one stacked site.
///
/// A numerically-zero centered stack is not an error: the result carries the
/// mean, no components, and `degenerate = true`.
pub fn extract_subspace<T: Scalar>(
    site: SiteId,
    stacked: ArrayView2<'_, T>,
    policy: KPolicy,
    mode: SvdMode,
    seed: u64,
) -> Result<SiteSubspace<T>> {
    policy.validate()?;
    let (rows, dim) = stacked.dim();
    if rows == 0 || dim == 0 {
        return Err(Error::DimMismatch(format!("empty stack for {site}")));
    }
    if stacked.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("stack for {site}")));
    }
    let mean = stacked.mean_axis(Axis(0)).expect("non-empty stack");
    let centered = &stacked - &mean;
    let total_variance = linalg::frobenius_sq(centered.view());
    let scale = linalg::frobenius_sq(stacked.view()).sqrt().max(T::one());

    let mut sub = SiteSubspace::empty(site, mean, seed, mode);
    if total_variance.sqrt() <= T::epsilon() * T::lit(64.0) * scale {
        sub.degenerate = true;
        return Ok(sub);
    }

    let (sigma, vt) = match mode {
        SvdMode::Exact => {
            let dec = svd(centered.view());
            let rank = linalg::numerical_rank(&dec.s, rows, dim);
            (dec.s, dec.vt.slice(s![..rank, ..]).to_owned())
        }
        SvdMode::Randomized => randomized_for_policy(centered.view(), policy, total_variance, seed)?,
    };
    let rank = linalg::numerical_rank(&sigma, rows, dim).min(vt.nrows());

    let wanted = match policy {
        KPolicy::FixedK(k) => k,
        KPolicy::VarianceThreshold(tau) => k_for_threshold(&sigma, total_variance, tau),
    };
    let k = wanted.min(rank);
    sub.k_capped = wanted > rank;
    sub.components = vt.slice(s![..k, ..]).to_owned();
    sub.k_data = k;
    sub.singular_values = sigma;
    sub.total_variance = match mode {
        SvdMode::Exact => sub.singular_values.iter().map(|&x| x * x).sum(),
        SvdMode::Randomized => total_variance,
    };
    Ok(sub)
}

fn k_for_threshold<T: Scalar>(sigma: &[T], total: T, tau: f64) -> usize {
    let target = T::lit(tau) - T::epsilon() * T::lit(16.0 * sigma.len().max(1) as f64);
    let mut cum = T::zero();
    for (i, &x) in sigma.iter().enumerate() {
        cum += x * x;
        if cum / total >= target {
            return i + 1;
        }
    }
    sigma.len()
}

// Grows the sketch until the requested variance is covered.
fn randomized_for_policy<T: Scalar>(
    centered: ArrayView2<'_, T>,
    policy: KPolicy,
    total: T,
    seed: u64,
) -> Result<(Vec<T>, Array2<T>)> {
    let max_k = centered.nrows().min(centered.ncols());
    let mut k = match policy {
        KPolicy::FixedK(k) => k.min(max_k),
        KPolicy::VarianceThreshold(_) => max_k.min(8),
    };
    loop {
        let r = randomized_svd(centered, k, DEFAULT_OVERSAMPLE, DEFAULT_POWER_ITERS, seed)?;
        let covered = match policy {
            KPolicy::FixedK(_) => true,
            KPolicy::VarianceThreshold(tau) => {
                let cum: T = r.singular_values.iter().map(|&x| x * x).sum();
                cum / total >= T::lit(tau) - T::epsilon() * T::lit(16.0 * max_k as f64)
            }
        };
        if covered || k == max_k || r.rank_deficient {
            return Ok((r.singular_values, r.right_vectors));
        }
        k = (2 * k).min(max_k);
    }
}

/// Cumulative explained variance of the first `k` data components.
pub fn explained_variance<T: Scalar>(sub: &SiteSubspace<T>, k: usize) -> Result<T> {
    let full = sub.singular_values.len();
    if k == 0 || k > full {
        return Err(Error::OutOfRange(format!(
            "k = {k} outside 1..={full} for {}",
            sub.site
        )));
    }
    if sub.total_variance <= T::zero() {
        return Ok(T::one());
    }
    let head: T = sub.singular_values[..k].iter().map(|&x| x * x).sum();
    Ok((head / sub.total_variance).min(T::one()))
}

/// Source of candidate vectors for pseudo-components.
pub trait CandidateSampler<T> {
    fn sample(&mut self, dim: usize) -> Array1<T>;
}

/// Standard normal candidates from a seeded ChaCha stream.
#[derive(Clone, Debug)]
pub struct GaussianSampler {
    rng: ChaCha8Rng,
}

impl GaussianSampler {
    pub fn new(seed: u64) -> Self {
        GaussianSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl<T: Scalar> CandidateSampler<T> for GaussianSampler {
    fn sample(&mut self, dim: usize) -> Array1<T> {
        gaussian_vector(&mut self.rng, dim)
    }
}

impl<T, F: FnMut(usize) -> Array1<T>> CandidateSampler<T> for F {
    fn sample(&mut self, dim: usize) -> Array1<T> {
        self(dim)
    }
}

/// Appends `p` pseudo-components drawn from a seeded Gaussian.
pub fn augment_pseudo<T: Scalar>(sub: &SiteSubspace<T>, p: usize, seed: u64) -> Result<SiteSubspace<T>> {
    let mut out = augment_pseudo_with(sub, p, &mut GaussianSampler::new(seed))?;
    out.seed = seed;
    Ok(out)
}

/// Appends `p` pseudo-components drawn from `sampler`.
///
/// Each candidate goes through two modified Gram-Schmidt passes against all
/// current rows. A candidate whose residual is below `1e-8` of its original
/// norm is null and is redrawn, up to 16 times.
pub fn augment_pseudo_with<T: Scalar, S: CandidateSampler<T> + ?Sized>(
    sub: &SiteSubspace<T>,
    p: usize,
    sampler: &mut S,
) -> Result<SiteSubspace<T>> {
    let dim = sub.ambient_dim;
    let tol = T::rel_tol(PSEUDO_REJECT_TOL);
    let mut rows: Vec<Array1<T>> = sub.components.outer_iter().map(|r| r.to_owned()).collect();
    for accepted in 0..p {
        let basis = linalg::stack_rows(&rows, dim);
        let mut found = None;
        for _ in 0..=PSEUDO_MAX_RETRIES {
            let mut v = sampler.sample(dim);
            if v.len() != dim {
                return Err(Error::DimMismatch(format!(
                    "sampler returned {} entries, expected {dim}",
                    v.len()
                )));
            }
            let pre = norm(v.view());
            if !(pre > T::zero()) || !pre.is_finite() {
                continue;
            }
            orthogonalize_against(basis.view(), &mut v);
            let post = norm(v.view());
            if post >= tol * pre {
                v.mapv_inplace(|x| x / post);
                found = Some(v);
                break;
            }
        }
        match found {
            Some(v) => rows.push(v),
            None => {
                return Err(Error::AugmentationExhausted {
                    accepted,
                    retries: PSEUDO_MAX_RETRIES,
                })
            }
        }
    }
    let mut out = sub.clone();
    out.components = linalg::stack_rows(&rows, dim);
    out.k_pseudo += p;
    Ok(out)
}

/// Basis of `k` orthonormal random rows with zero mean, for baselines.
pub fn make_random_subspace<T: Scalar>(site: SiteId, ambient_dim: usize, k: usize, seed: u64) -> Result<SiteSubspace<T>> {
    if k > ambient_dim {
        return Err(Error::OutOfRange(format!(
            "{k} random components exceed ambient dimension {ambient_dim}"
        )));
    }
    let empty = SiteSubspace::empty(site, Array1::zeros(ambient_dim), seed, SvdMode::Exact);
    augment_pseudo(&empty, k, seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomizedSvd<T> {
    pub singular_values: Vec<T>,
    /// Rows are approximate right-singular vectors, sign-normalized.
    pub right_vectors: Array2<T>,
    /// Fewer than the requested `k` directions were numerically present.
    pub rank_deficient: bool,
}

/// Range-finder SVD with a seeded Gaussian test matrix and `power_iters`
/// rounds of subspace iteration. The oversampled sketch width is clamped
/// to `min(rows, cols)`.
pub fn randomized_svd<T: Scalar>(
    matrix: ArrayView2<'_, T>,
    k: usize,
    oversample: usize,
    power_iters: usize,
    seed: u64,
) -> Result<RandomizedSvd<T>> {
    let (rows, cols) = matrix.dim();
    let max_k = rows.min(cols);
    if k == 0 || k > max_k {
        return Err(Error::OutOfRange(format!("k = {k} outside 1..={max_k}")));
    }
    let width = (k + oversample).min(max_k);
    let drop = T::rel_tol(1e-10);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega: Array2<T> = gaussian_matrix(&mut rng, width, cols);
    // Rows of `q` span the sketched column space of `matrix`.
    let mut q = linalg::orthonormal_rows(&omega.dot(&matrix.t()), drop);
    for _ in 0..power_iters {
        let z = linalg::orthonormal_rows(&q.dot(&matrix), drop);
        q = linalg::orthonormal_rows(&z.dot(&matrix.t()), drop);
    }
    let small = q.dot(&matrix);
    let dec = svd(small.view());
    let rank = linalg::numerical_rank(&dec.s, rows, cols);
    let keep = k.min(rank);
    Ok(RandomizedSvd {
        singular_values: dec.s[..keep].to_vec(),
        right_vectors: dec.vt.slice(s![..keep, ..]).to_owned(),
        rank_deficient: keep < k,
    })
}

/// Subspaces for every site of an adapter collection.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceSet<T> {
    pub base_model_id: String,
    pub source_adapter_ids: Vec<String>,
    pub seed: u64,
    pub svd_mode: SvdMode,
    pub sites: BTreeMap<SiteId, SiteSubspace<T>>,
}

pub const SUBSPACE_KIND: &str = "subspace";

impl<T: Scalar> SubspaceSet<T> {
    pub fn encode(&self) -> Result<EncodedContainer> {
        let mut manifest = Manifest::new("subspace", &self.base_model_id, 0);
        manifest.kind = Some(SUBSPACE_KIND.to_string());
        manifest.k_data = Some(self.sites.values().map(|s| s.k_data).max().unwrap_or(0));
        manifest.k_pseudo = Some(self.sites.values().map(|s| s.k_pseudo).max().unwrap_or(0));
        manifest.seed = Some(self.seed);
        manifest.svd_mode = Some(self.svd_mode.to_string());
        manifest.source_adapter_ids = Some(self.source_adapter_ids.clone());

        let mut tensors = Vec::new();
        for (id, sub) in &self.sites {
            let mean = SiteMatrix::from_array(&sub.mean.clone().insert_axis(Axis(0)))?;
            let mut t = Tensor::new(id, Some(TensorKind::Mean), mean);
            t.entry.k_data = Some(sub.k_data);
            t.entry.k_pseudo = Some(sub.k_pseudo);
            t.entry.degenerate = Some(sub.degenerate);
            t.entry.total_variance = Some(sub.total_variance.as_f64());
            tensors.push(t);
            if sub.k_total() > 0 {
                let comps = SiteMatrix::from_array(&sub.components)?;
                tensors.push(Tensor::new(id, Some(TensorKind::Components), comps));
            }
            if !sub.singular_values.is_empty() {
                let sv = Array2::from_shape_vec((1, sub.singular_values.len()), sub.singular_values.clone())
                    .expect("row vector");
                tensors.push(Tensor::new(id, Some(TensorKind::SingularValues), SiteMatrix::from_array(&sv)?));
            }
        }
        encode_container(manifest, tensors)
    }

    /// Writes the bundle and returns its content hash.
    pub fn save(&self, dir: &Path) -> Result<String> {
        let enc = self.encode()?;
        enc.write(dir)?;
        Ok(enc.content_hash())
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(self.encode()?.content_hash())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, tensors) = read_container(dir)?;
        if manifest.kind.as_deref() != Some(SUBSPACE_KIND) {
            return Err(Error::MalformedManifest(format!(
                "{} is not a subspace bundle",
                dir.display()
            )));
        }
        let seed = manifest.seed.unwrap_or(0);
        let svd_mode: SvdMode = manifest.svd_mode.as_deref().unwrap_or("exact").parse()?;
        let mut sites: BTreeMap<SiteId, SiteSubspace<T>> = BTreeMap::new();
        let mut comps: BTreeMap<SiteId, Array2<T>> = BTreeMap::new();
        let mut sigmas: BTreeMap<SiteId, Vec<T>> = BTreeMap::new();
        for (entry, matrix) in tensors {
            let id = entry.site_id();
            match entry.tensor {
                Some(TensorKind::Mean) => {
                    if matrix.rows() != 1 {
                        return Err(Error::MalformedManifest(format!("mean of {id} is not a row")));
                    }
                    let mean = matrix.to_array::<T>().row(0).to_owned();
                    let mut sub = SiteSubspace::empty(id.clone(), mean, seed, svd_mode);
                    sub.k_data = entry.k_data.unwrap_or(0);
                    sub.k_pseudo = entry.k_pseudo.unwrap_or(0);
                    sub.degenerate = entry.degenerate.unwrap_or(false);
                    sub.total_variance = T::lit(entry.total_variance.unwrap_or(0.0));
                    sites.insert(id, sub);
                }
                Some(TensorKind::Components) => {
                    comps.insert(id, matrix.to_array());
                }
                Some(TensorKind::SingularValues) => {
                    sigmas.insert(id, matrix.to_array::<T>().iter().copied().collect());
                }
                _ => {
                    return Err(Error::MalformedManifest(format!(
                        "unexpected tensor {:?} for {id} in subspace bundle",
                        entry.tensor
                    )))
                }
            }
        }
        for (id, c) in comps {
            let sub = sites
                .get_mut(&id)
                .ok_or_else(|| Error::MalformedManifest(format!("components for {id} without mean")))?;
            if c.ncols() != sub.ambient_dim {
                return Err(Error::ShapeMismatch(format!("components of {id} do not match its mean")));
            }
            sub.components = c;
        }
        for (id, sv) in sigmas {
            let sub = sites
                .get_mut(&id)
                .ok_or_else(|| Error::MalformedManifest(format!("singular values for {id} without mean")))?;
            sub.singular_values = sv;
        }
        for (id, sub) in &sites {
            if sub.k_data + sub.k_pseudo != sub.k_total() || sub.k_data > sub.singular_values.len() {
                return Err(Error::MalformedManifest(format!(
                    "{id}: k_data {} + k_pseudo {} inconsistent with {} components / {} singular values",
                    sub.k_data,
                    sub.k_pseudo,
                    sub.k_total(),
                    sub.singular_values.len()
                )));
            }
        }
        Ok(SubspaceSet {
            base_model_id: manifest.base_model_id,
            source_adapter_ids: manifest.source_adapter_ids.unwrap_or_default(),
            seed,
            svd_mode,
            sites,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Role;
    use ndarray::array;

    fn site() -> SiteId {
        SiteId::new("l0", Role::A)
    }

    #[test]
    fn extracts_documented_two_adapter_stack() {
        let stacked: Array2<f64> = array![[1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 1.0]];
        let sub = extract_subspace(site(), stacked.view(), KPolicy::FixedK(1), SvdMode::Exact, 0).unwrap();
        assert_eq!(sub.mean, array![0.25, 0.25]);
        assert!((sub.singular_values[0] - 1.0).abs() < 1e-12);
        assert!((sub.singular_values[1] - 0.5f64.sqrt()).abs() < 1e-12);
        let h = 0.5f64.sqrt();
        assert!((sub.components[[0, 0]] - h).abs() < 1e-12);
        assert!((sub.components[[0, 1]] + h).abs() < 1e-12);
        assert_eq!((sub.k_data, sub.k_pseudo), (1, 0));
        let ev = explained_variance(&sub, 1).unwrap();
        assert!((ev - 2.0 / 3.0).abs() < 1e-6);
        assert!((explained_variance(&sub, 2).unwrap() - 1.0).abs() < 1e-15);
        assert!(explained_variance(&sub, 3).is_err());
        assert!(explained_variance(&sub, 0).is_err());
    }

    #[test]
    fn identical_rows_are_degenerate() {
        let stacked = array![[3.0, 3.0, 3.0], [3.0, 3.0, 3.0]];
        for policy in [KPolicy::FixedK(2), KPolicy::VarianceThreshold(0.5)] {
            let sub = extract_subspace(site(), stacked.view(), policy, SvdMode::Exact, 0).unwrap();
            assert!(sub.degenerate);
            assert_eq!(sub.k_data, 0);
            assert_eq!(sub.mean, array![3.0, 3.0, 3.0]);
        }
    }

    #[test]
    fn explained_variance_with_zero_tail() {
        let mut sub = SiteSubspace::<f64>::empty(site(), Array1::zeros(2), 0, SvdMode::Exact);
        sub.singular_values = vec![2.0, 0.0];
        sub.total_variance = 4.0;
        assert_eq!(explained_variance(&sub, 1).unwrap(), 1.0);
    }

    #[test]
    fn pseudo_component_from_injected_candidate() {
        let mut sub = SiteSubspace::<f64>::empty(site(), Array1::zeros(3), 0, SvdMode::Exact);
        sub.components = array![[1.0, 0.0, 0.0]];
        sub.k_data = 1;
        let mut queue = vec![array![1.0, 1.0, 0.0]];
        let mut sampler = |_dim: usize| queue.remove(0);
        let out = augment_pseudo_with(&sub, 1, &mut sampler).unwrap();
        assert_eq!(out.k_pseudo, 1);
        assert_eq!(out.components.row(1), array![0.0, 1.0, 0.0]);
    }

    #[test]
    fn parallel_candidate_is_rejected_and_redrawn() {
        let mut sub = SiteSubspace::<f64>::empty(site(), Array1::zeros(3), 0, SvdMode::Exact);
        sub.components = array![[1.0, 0.0, 0.0]];
        sub.k_data = 1;
        let mut queue = vec![array![5.0, 0.0, 0.0], array![0.0, 0.0, 2.0]];
        let mut draws = 0;
        let mut sampler = |_dim: usize| {
            draws += 1;
            queue.remove(0)
        };
        let out = augment_pseudo_with(&sub, 1, &mut sampler).unwrap();
        assert_eq!(draws, 2);
        assert_eq!(out.components.row(1), array![0.0, 0.0, 1.0]);
    }

    #[test]
    fn full_basis_cannot_be_augmented() {
        let sub = make_random_subspace::<f64>(site(), 3, 3, 11).unwrap();
        assert!(matches!(
            augment_pseudo(&sub, 1, 12),
            Err(Error::AugmentationExhausted { accepted: 0, retries: 16 })
        ));
    }

    #[test]
    fn random_subspace_is_orthonormal_and_deterministic() {
        let a = make_random_subspace::<f64>(site(), 3, 3, 5).unwrap();
        let (off, diag) = a.orthonormality_error();
        assert!(off <= 1e-8 && diag <= 1e-10);
        assert_eq!((a.k_data, a.k_pseudo), (0, 3));
        assert!(a.mean.iter().all(|&x| x == 0.0));
        let b = make_random_subspace::<f64>(site(), 3, 3, 5).unwrap();
        assert_eq!(a, b);
        let one = make_random_subspace::<f64>(site(), 7, 1, 5).unwrap();
        assert!((norm(one.components.row(0)) - 1.0).abs() < 1e-12);
        assert!(make_random_subspace::<f64>(site(), 2, 3, 5).is_err());
    }

    #[test]
    fn randomized_svd_on_diagonal() {
        let mut d = Array2::<f64>::zeros((10, 10));
        d[[0, 0]] = 3.0;
        d[[1, 1]] = 2.0;
        d[[2, 2]] = 1.0;
        let r = randomized_svd(d.view(), 3, DEFAULT_OVERSAMPLE, DEFAULT_POWER_ITERS, 3).unwrap();
        assert!(!r.rank_deficient);
        for (got, want) in r.singular_values.iter().zip([3.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-8);
        }
        let again = randomized_svd(d.view(), 3, DEFAULT_OVERSAMPLE, DEFAULT_POWER_ITERS, 3).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn randomized_svd_flags_rank_deficiency() {
        let mut d = Array2::<f64>::zeros((6, 6));
        d[[0, 0]] = 1.0;
        let r = randomized_svd(d.view(), 3, 2, 1, 0).unwrap();
        assert!(r.rank_deficient);
        assert_eq!(r.singular_values.len(), 1);
        assert!(randomized_svd(d.view(), 7, 0, 0, 0).is_err());
    }

    #[test]
    fn policy_validation() {
        assert!(KPolicy::FixedK(0).validate().is_err());
        assert!(KPolicy::VarianceThreshold(0.0).validate().is_err());
        assert!(KPolicy::VarianceThreshold(1.5).validate().is_err());
        assert!(KPolicy::VarianceThreshold(1.0).validate().is_ok());
        assert_eq!(KPolicy::default(), KPolicy::VarianceThreshold(0.75));
    }
}

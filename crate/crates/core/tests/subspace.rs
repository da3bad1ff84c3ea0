use std::collections::BTreeMap;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use elorax_core::linalg::{gaussian_matrix, largest_principal_angle};
use elorax_core::subspace::{
    augment_pseudo, explained_variance, extract_subspace, make_random_subspace, randomized_svd, SiteSubspace,
};
use elorax_core::{KPolicy, Role, SiteId, SubspaceSet, SvdMode};

fn site() -> SiteId {
    SiteId::new("blocks.0.attn", Role::A)
}

fn gaussian(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
    gaussian_matrix(&mut ChaCha8Rng::seed_from_u64(seed), rows, cols)
}

/// Matrix with prescribed singular values and random singular vectors.
fn with_spectrum(seed: u64, rows: usize, cols: usize, sigma: &[f64]) -> Array2<f64> {
    let u = nalgebra_orthonormal(seed, rows, sigma.len());
    let v = nalgebra_orthonormal(seed + 1, cols, sigma.len());
    let mut out = Array2::<f64>::zeros((rows, cols));
    for (i, s) in sigma.iter().enumerate() {
        for r in 0..rows {
            for c in 0..cols {
                out[[r, c]] += s * u[(r, i)] * v[(c, i)];
            }
        }
    }
    out
}

fn nalgebra_orthonormal(seed: u64, dim: usize, k: usize) -> DMatrix<f64> {
    let g = gaussian(seed, dim, k);
    let m = DMatrix::from_fn(dim, k, |i, j| g[[i, j]]);
    m.qr().q()
}

fn oracle_sigma(a: &Array2<f64>) -> Vec<f64> {
    let m = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]]);
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

#[test]
fn rank_two_randomized_matches_exact_spectrum() {
    let a = with_spectrum(5, 200, 50, &[7.0, 2.5]);
    let exact = oracle_sigma(&a);
    let approx = randomized_svd(a.view(), 2, 8, 2, 17).unwrap();
    assert!(!approx.rank_deficient);
    for i in 0..2 {
        assert!((approx.singular_values[i] - exact[i]).abs() <= 1e-6 * exact[i]);
    }
}

#[test]
fn randomized_run_is_bit_reproducible() {
    let a = gaussian(8, 40, 30);
    let one = randomized_svd(a.view(), 5, 10, 2, 3).unwrap();
    let two = randomized_svd(a.view(), 5, 10, 2, 3).unwrap();
    assert_eq!(one.singular_values, two.singular_values);
    assert_eq!(one.right_vectors, two.right_vectors);
}

#[test]
fn randomized_flags_rank_deficiency() {
    let a = with_spectrum(2, 30, 20, &[3.0, 1.0]);
    let out = randomized_svd(a.view(), 5, 4, 2, 0).unwrap();
    assert!(out.rank_deficient);
    assert_eq!(out.singular_values.len(), 2);
}

#[test]
fn exact_and_randomized_subspaces_agree_with_spectral_gap() {
    for seed in 0..10 {
        let mut sigma = vec![50.0, 40.0, 30.0, 20.0];
        sigma.extend((0..10).map(|i| 1.0 / (i as f64 + 1.0)));
        let stack = with_spectrum(seed, 60, 24, &sigma);
        let exact = extract_subspace(site(), stack.view(), KPolicy::FixedK(4), SvdMode::Exact, seed).unwrap();
        let rand = extract_subspace(site(), stack.view(), KPolicy::FixedK(4), SvdMode::Randomized, seed).unwrap();
        let angle = largest_principal_angle(exact.components.view(), rand.components.view());
        assert!(angle <= 1e-4, "seed {seed}: angle {angle}");
    }
}

#[test]
fn subspace_set_round_trips_through_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let mut sites = BTreeMap::new();
    let a = extract_subspace(SiteId::new("l0", Role::A), gaussian(1, 6, 5).view(), KPolicy::FixedK(2), SvdMode::Exact, 4).unwrap();
    let a = augment_pseudo(&a, 1, 4).unwrap();
    let b = extract_subspace(SiteId::new("l0", Role::B), gaussian(2, 6, 3).view(), KPolicy::default(), SvdMode::Exact, 4).unwrap();
    let flat = Array2::from_shape_fn((3, 4), |(_, j)| j as f64);
    let c = extract_subspace(SiteId::new("l1", Role::A), flat.view(), KPolicy::FixedK(1), SvdMode::Exact, 4).unwrap();
    assert!(c.degenerate);
    for sub in [a, b, c] {
        sites.insert(sub.site.clone(), sub);
    }
    let set = SubspaceSet {
        base_model_id: "base".into(),
        source_adapter_ids: vec!["x".into(), "y".into()],
        seed: 4,
        svd_mode: SvdMode::Exact,
        sites,
    };
    let hash = set.save(&tmp.path().join("s")).unwrap();
    let loaded = SubspaceSet::load(&tmp.path().join("s")).unwrap();
    assert_eq!(loaded.content_hash().unwrap(), hash);
    for (id, sub) in &set.sites {
        let got = &loaded.sites[id];
        assert_eq!((got.k_data, got.k_pseudo, got.degenerate), (sub.k_data, sub.k_pseudo, sub.degenerate));
        let err = (&got.components - &sub.components).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(err <= 1e-6, "{id}: storage rounding {err}");
        assert_eq!(got.singular_values.len(), sub.singular_values.len());
    }
    assert!(loaded.sites[&SiteId::new("l1", Role::A)].components.is_empty());
}

#[test]
fn single_precision_extraction_is_orthonormal() {
    let stack: Array2<f32> = gaussian(9, 12, 8).mapv(|x| x as f32);
    let sub = extract_subspace(site(), stack.view(), KPolicy::FixedK(4), SvdMode::Exact, 0).unwrap();
    let (off, diag) = sub.orthonormality_error();
    assert!(off <= 1e-5 && diag <= 1e-5, "{off} {diag}");
}

fn check_orthonormal(sub: &SiteSubspace<f64>) -> Result<(), TestCaseError> {
    let (off, diag) = sub.orthonormality_error();
    prop_assert!(off <= 1e-8, "off-diagonal {off}");
    prop_assert!(diag <= 1e-10, "diagonal {diag}");
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn extraction_and_augmentation_stay_orthonormal(seed in any::<u64>(), rows in 2usize..20, dim in 2usize..16, p in 0usize..4) {
        let stack = gaussian(seed, rows, dim);
        let k = (rows - 1).min(dim).max(1);
        let sub = extract_subspace(site(), stack.view(), KPolicy::FixedK(k), SvdMode::Exact, seed).unwrap();
        check_orthonormal(&sub)?;
        let p = p.min(dim - sub.k_data);
        let aug = augment_pseudo(&sub, p, seed).unwrap();
        check_orthonormal(&aug)?;
        prop_assert_eq!(aug.k_pseudo, p);
        let cross = aug.pseudo_components().dot(&aug.data_components().t());
        prop_assert!(cross.iter().all(|x| x.abs() <= 1e-8));
        prop_assert_eq!(aug.data_components(), sub.components.view());
    }

    #[test]
    fn explained_variance_is_monotone(seed in any::<u64>(), rows in 3usize..15, dim in 2usize..10) {
        let stack = gaussian(seed, rows, dim);
        let sub = extract_subspace(site(), stack.view(), KPolicy::VarianceThreshold(1.0), SvdMode::Exact, seed).unwrap();
        let mut last = 0.0;
        for k in 1..=sub.singular_values.len() {
            let v = explained_variance(&sub, k).unwrap();
            prop_assert!(v + 1e-15 >= last);
            last = v;
        }
        prop_assert!((last - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn variance_policy_picks_smallest_sufficient_k(seed in any::<u64>(), tau in 0.05f64..1.0) {
        let stack = gaussian(seed, 12, 7);
        let sub = extract_subspace(site(), stack.view(), KPolicy::VarianceThreshold(tau), SvdMode::Exact, seed).unwrap();
        prop_assert!(explained_variance(&sub, sub.k_data).unwrap() >= tau - 1e-12);
        if sub.k_data > 1 {
            prop_assert!(explained_variance(&sub, sub.k_data - 1).unwrap() < tau);
        }
    }

    #[test]
    fn extraction_is_deterministic(seed in any::<u64>(), randomized in any::<bool>()) {
        let stack = gaussian(seed, 15, 9);
        let mode = if randomized { SvdMode::Randomized } else { SvdMode::Exact };
        let one = extract_subspace(site(), stack.view(), KPolicy::FixedK(3), mode, seed).unwrap();
        let two = extract_subspace(site(), stack.view(), KPolicy::FixedK(3), mode, seed).unwrap();
        prop_assert_eq!(one, two);
    }

    #[test]
    fn random_subspaces_are_orthonormal(seed in any::<u64>(), dim in 1usize..20, frac in 0.0f64..1.0) {
        let k = ((dim as f64 * frac) as usize).clamp(1, dim);
        let sub = make_random_subspace::<f64>(site(), dim, k, seed).unwrap();
        check_orthonormal(&sub)?;
        prop_assert_eq!(sub.mean, Array1::<f64>::zeros(dim));
        prop_assert_eq!((sub.k_data, sub.k_pseudo), (0, k));
    }

    #[test]
    fn components_are_sign_normalized(seed in any::<u64>()) {
        let stack = gaussian(seed, 10, 6);
        let sub = extract_subspace(site(), stack.view(), KPolicy::FixedK(4), SvdMode::Exact, seed).unwrap();
        for row in sub.components.outer_iter() {
            let (imax, _) = row.iter().enumerate().fold((0, 0.0f64), |(bi, bv), (i, &x)| {
                if x.abs() > bv + 1e-9 { (i, x.abs()) } else { (bi, bv) }
            });
            prop_assert!(row[imax] > 0.0);
        }
    }
}

use num_rational::Ratio;
use proptest::prelude::*;

use elorax_core::accounting::{
    adapter_flops_delta, breakeven_by_scan, format_ratio, storage_footprint, trainable_params, DeployConfig,
};

fn glue() -> DeployConfig {
    DeployConfig { d: 5, r: 32, k: 32, l: 24, m: 768, n: 768, coeff_r: 8, bytes_per_scalar: 4 }
}

fn storage_example() -> DeployConfig {
    DeployConfig { d: 100, r: 8, k: 16, l: 12, m: 768, n: 768, coeff_r: 1, bytes_per_scalar: 4 }
}

#[test]
fn glue_parameter_counts() {
    let p = trainable_params(&glue()).unwrap();
    assert_eq!(p.lora, 1_179_648);
    assert_eq!(p.elorax, 12_288);
    assert_eq!(p.ratio, Ratio::from_integer(96));
    assert_eq!(format_ratio(&p.ratio), "96");
}

#[test]
fn minimal_coefficient_count() {
    let cfg = DeployConfig { k: 1, coeff_r: 1, l: 1, ..glue() };
    assert_eq!(trainable_params(&cfg).unwrap().elorax, 2);
}

#[test]
fn ratio_scales_linearly_in_rank() {
    let base = trainable_params(&DeployConfig { r: 1, ..glue() }).unwrap().ratio;
    for r in [1u64, 2, 4, 8] {
        let got = trainable_params(&DeployConfig { r, ..glue() }).unwrap().ratio;
        assert_eq!(got, base * Ratio::from_integer(r as u128));
    }
}

#[test]
fn storage_worked_example() {
    let s = storage_footprint(&storage_example()).unwrap();
    assert_eq!(s.lora_scalars, 14_745_600);
    assert_eq!(s.elorax_scalars, 333_312);
    assert_eq!(format_ratio(&s.ratio), "44.24");
    assert_eq!(s.breakeven_d, Some(3));
    assert_eq!(breakeven_by_scan(&storage_example(), 1000).unwrap(), Some(3));
    assert_eq!(s.lora_bytes, 4 * 14_745_600);
}

#[test]
fn single_adapter_never_wins() {
    let cfg = DeployConfig { d: 1, k: 8, coeff_r: 8, r: 8, ..storage_example() };
    let s = storage_footprint(&cfg).unwrap();
    assert!(s.elorax_scalars >= s.lora_scalars);
    assert!(s.ratio < Ratio::from_integer(1));
    assert_eq!(s.breakeven_d, Some(2));
    assert_eq!(breakeven_by_scan(&cfg, 10).unwrap(), Some(2));
}

#[test]
fn adapter_macs_follow_the_factored_path() {
    let g = adapter_flops_delta(&glue(), 1).unwrap();
    assert_eq!(g.lora, 1_179_648);
    // Under these per-site formulas the subspace path costs slightly more
    // than LoRA at this configuration.
    assert_eq!(g.elorax, 24 * (32 * 768 + 2 * 32 * 8 + 32 * 768));
    let one = DeployConfig { k: 1, ..glue() };
    assert_eq!(adapter_flops_delta(&one, 1).unwrap().elorax, 24 * (768 + 2 * 8 + 768));
    assert_eq!(adapter_flops_delta(&glue(), 7).unwrap().lora, 7 * g.lora);
}

#[test]
fn zero_fields_are_rejected() {
    assert!(trainable_params(&DeployConfig { k: 0, ..glue() }).is_err());
    assert!(storage_footprint(&DeployConfig { n: 0, ..glue() }).is_err());
}

#[test]
fn overflow_is_an_error() {
    let huge = DeployConfig { d: u64::MAX, r: u64::MAX, l: u64::MAX, n: u64::MAX, ..glue() };
    assert!(storage_footprint(&huge).is_err());
}

fn config() -> impl Strategy<Value = DeployConfig> {
    (1u64..60, 1u64..33, 1u64..33, 1u64..25, 1u64..300, 1u64..300, 1u64..9).prop_map(|(d, r, k, l, m, n, coeff_r)| {
        DeployConfig { d, r, k, l, m, n, coeff_r, bytes_per_scalar: 2 }
    })
}

proptest! {
    #[test]
    fn coefficient_count_ignores_ambient_dims(cfg in config(), m in 1u64..2000, n in 1u64..2000) {
        let a = trainable_params(&cfg).unwrap().elorax;
        let b = trainable_params(&DeployConfig { m, n, ..cfg }).unwrap().elorax;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn closed_form_breakeven_matches_scan(cfg in config()) {
        let closed = storage_footprint(&cfg).unwrap().breakeven_d;
        let scan = breakeven_by_scan(&cfg, 20_000).unwrap();
        match closed {
            Some(d) if d <= 20_000 => prop_assert_eq!(Some(d as u64), scan),
            Some(_) => prop_assert_eq!(scan, None),
            None => prop_assert_eq!(scan, None),
        }
    }

    #[test]
    fn storage_ratio_increases_with_adapter_count(cfg in config()) {
        prop_assume!(cfg.r * cfg.n > cfg.k * cfg.coeff_r);
        let here = storage_footprint(&cfg).unwrap().ratio;
        let next = storage_footprint(&DeployConfig { d: cfg.d + 1, ..cfg }).unwrap().ratio;
        prop_assert!(next > here);
    }
}

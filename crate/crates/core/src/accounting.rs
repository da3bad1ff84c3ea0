//! Parameter, storage and adapter-path compute counts.
//!
//! Everything is exact integer arithmetic; ratios are reduced fractions.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeployConfig {
    /// Number of adapters.
    pub d: u64,
    /// Adapter rank.
    pub r: u64,
    /// Subspace size per site.
    pub k: u64,
    /// Adapted sites per model (layers × locations).
    pub l: u64,
    pub m: u64,
    pub n: u64,
    /// Width of the coefficient matrices.
    pub coeff_r: u64,
    #[serde(default = "default_bytes_per_scalar")]
    pub bytes_per_scalar: u64,
}

fn default_bytes_per_scalar() -> u64 {
    4
}

impl DeployConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d", self.d),
            ("r", self.r),
            ("k", self.k),
            ("l", self.l),
            ("m", self.m),
            ("n", self.n),
            ("coeff_r", self.coeff_r),
            ("bytes_per_scalar", self.bytes_per_scalar),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(Error::InvalidConfig(format!("{name} must be at least 1"))),
            None => Ok(()),
        }
    }
}

fn overflow() -> Error {
    Error::OutOfRange("count overflows 128-bit arithmetic".into())
}

fn mul(parts: &[u64]) -> Result<u128> {
    parts
        .iter()
        .try_fold(1u128, |acc, &x| acc.checked_mul(x as u128))
        .ok_or_else(overflow)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub lora: u128,
    pub elorax: u128,
    #[serde(serialize_with = "ratio_as_pair")]
    pub ratio: Ratio<u128>,
}

/// Trainable scalars: `l·r·(m+n)` for full adapters against `l·coeff_r·2K`
/// for coefficient-only training.
pub fn trainable_params(cfg: &DeployConfig) -> Result<ParamCounts> {
    cfg.validate()?;
    let lora = mul(&[cfg.l, cfg.r])?
        .checked_mul(cfg.m as u128 + cfg.n as u128)
        .ok_or_else(overflow)?;
    let elorax = mul(&[cfg.l, cfg.coeff_r, 2, cfg.k])?;
    Ok(ParamCounts {
        lora,
        elorax,
        ratio: Ratio::new(lora, elorax),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct StorageFootprint {
    pub lora_scalars: u128,
    pub elorax_scalars: u128,
    #[serde(serialize_with = "ratio_as_pair")]
    pub ratio: Ratio<u128>,
    /// Smallest adapter count at which the shared basis stores fewer scalars;
    /// `None` when it never does (`K·coeff_r ≥ r·n`).
    pub breakeven_d: Option<u128>,
    pub lora_bytes: u128,
    pub elorax_bytes: u128,
}

fn lora_storage(cfg: &DeployConfig, d: u64) -> Result<u128> {
    mul(&[2, d, cfg.r, cfg.l, cfg.n])
}

fn elorax_storage(cfg: &DeployConfig, d: u64) -> Result<u128> {
    let per_site = mul(&[d, cfg.coeff_r])?
        .checked_add(cfg.n as u128)
        .ok_or_else(overflow)?;
    mul(&[2, cfg.k, cfg.l])?.checked_mul(per_site).ok_or_else(overflow)
}

/// Stored scalars: `2·d·r·l·n` for independent adapters (square-site
/// convention) against `2·K·l·(d·coeff_r + n)` for one shared basis plus
/// per-adapter coefficients.
pub fn storage_footprint(cfg: &DeployConfig) -> Result<StorageFootprint> {
    cfg.validate()?;
    let lora = lora_storage(cfg, cfg.d)?;
    let elorax = elorax_storage(cfg, cfg.d)?;
    // elorax < lora  ⇔  d·(r·n − K·coeff_r) > K·n
    let per_adapter_gain = mul(&[cfg.r, cfg.n])? as i128 - mul(&[cfg.k, cfg.coeff_r])? as i128;
    let breakeven_d = if per_adapter_gain <= 0 {
        None
    } else {
        Some(mul(&[cfg.k, cfg.n])? / per_adapter_gain as u128 + 1)
    };
    Ok(StorageFootprint {
        lora_scalars: lora,
        elorax_scalars: elorax,
        ratio: Ratio::new(lora, elorax),
        breakeven_d,
        lora_bytes: lora.checked_mul(cfg.bytes_per_scalar as u128).ok_or_else(overflow)?,
        elorax_bytes: elorax.checked_mul(cfg.bytes_per_scalar as u128).ok_or_else(overflow)?,
    })
}

/// Scan for the breakeven adapter count by direct evaluation of both
/// storage formulas, up to `limit`.
pub fn breakeven_by_scan(cfg: &DeployConfig, limit: u64) -> Result<Option<u64>> {
    for d in 1..=limit {
        if elorax_storage(cfg, d)? < lora_storage(cfg, d)? {
            return Ok(Some(d));
        }
    }
    Ok(None)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AdapterMacs {
    pub lora: u128,
    pub elorax: u128,
}

/// Multiply-accumulates on the adapter path only, for `batch` inputs.
/// LoRA: `l·r·(m+n)`; factored subspace path `V_A x → α_Aᵀ· → α_B· → V_Bᵀ·`:
/// `l·(K·n + K·coeff_r + coeff_r·K + K·m)`.
pub fn adapter_flops_delta(cfg: &DeployConfig, batch: u64) -> Result<AdapterMacs> {
    cfg.validate()?;
    let lora = mul(&[batch, cfg.l, cfg.r])?
        .checked_mul(cfg.m as u128 + cfg.n as u128)
        .ok_or_else(overflow)?;
    let (k, c) = (cfg.k as u128, cfg.coeff_r as u128);
    let per_site = k * cfg.n as u128 + k * c + c * k + k * cfg.m as u128;
    let elorax = mul(&[batch, cfg.l])?.checked_mul(per_site).ok_or_else(overflow)?;
    Ok(AdapterMacs { lora, elorax })
}

fn ratio_as_pair<S: serde::Serializer>(r: &Ratio<u128>, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeStruct;
    let mut st = s.serialize_struct("Ratio", 2)?;
    st.serialize_field("numerator", &r.numer().to_string())?;
    st.serialize_field("denominator", &r.denom().to_string())?;
    st.end()
}

/// Fraction rendered as an integer when exact, otherwise to two decimals.
pub fn format_ratio(r: &Ratio<u128>) -> String {
    if r.is_integer() {
        r.to_integer().to_string()
    } else {
        format!("{:.2}", *r.numer() as f64 / *r.denom() as f64)
    }
}

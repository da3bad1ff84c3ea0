//! On-disk bundle container and adapter collections.
//!
//! A bundle is a directory holding `manifest.json` and `weights.bin`. The
//! manifest lists every tensor with its shape and the byte range it occupies
//! in `weights.bin`; tensors are little-endian `f32`, row-major, written in
//! `(name, role, tensor)` order with no padding. Adapter, subspace and
//! coefficient bundles all share this container and differ only in the
//! optional manifest fields they populate.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    A,
    B,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::A => "A",
            Role::B => "B",
        })
    }
}

/// One adapter attachment point: a layer path plus the matrix role.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SiteId {
    pub name: String,
    pub role: Role,
}

impl SiteId {
    pub fn new(name: impl Into<String>, role: Role) -> Self {
        SiteId {
            name: name.into(),
            role,
        }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.name, self.role)
    }
}

/// Row-major single-precision matrix as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl SiteMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ShapeMismatch(format!("empty matrix {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("{rows}x{cols} matrix")));
        }
        Ok(SiteMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        SiteMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Rounds a working-precision matrix to storage precision.
    pub fn from_array<T: Scalar>(a: &Array2<T>) -> Result<Self> {
        let data = a.iter().map(|x| x.as_f32()).collect();
        SiteMatrix::new(a.nrows(), a.ncols(), data)
    }

    pub fn to_array<T: Scalar>(&self) -> Array2<T> {
        Array2::from_shape_fn((self.rows, self.cols), |(i, j)| {
            T::lit(self.data[i * self.cols + j] as f64)
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    pub fn transpose(&self) -> SiteMatrix {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.data[i * self.cols + j]);
            }
        }
        SiteMatrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// Vector length under the role's vectorization: A rows are `n`-dim
    /// vectors, B columns are `m`-dim vectors.
    pub fn ambient_dim(&self, role: Role) -> usize {
        match role {
            Role::A => self.cols,
            Role::B => self.rows,
        }
    }

    /// Number of rank slots (vectors) under the role's vectorization.
    pub fn vector_count(&self, role: Role) -> usize {
        match role {
            Role::A => self.rows,
            Role::B => self.cols,
        }
    }
}

/// One trained low-rank adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBundle {
    pub adapter_id: String,
    pub base_model_id: String,
    pub rank_hint: usize,
    pub sites: BTreeMap<SiteId, SiteMatrix>,
}

impl AdapterBundle {
    pub fn new(adapter_id: impl Into<String>, base_model_id: impl Into<String>, rank_hint: usize) -> Self {
        AdapterBundle {
            adapter_id: adapter_id.into(),
            base_model_id: base_model_id.into(),
            rank_hint,
            sites: BTreeMap::new(),
        }
    }

    pub fn with_site(mut self, site: SiteId, matrix: SiteMatrix) -> Self {
        self.sites.insert(site, matrix);
        self
    }
}

/// What the tensor in a manifest entry holds. Absent for adapter weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Components,
    Mean,
    SingularValues,
    Alpha,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteEntry {
    pub name: String,
    pub role: Role,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tensor: Option<TensorKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_data: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_pseudo: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degenerate: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_fro: Option<f64>,
}

impl SiteEntry {
    pub fn site_id(&self) -> SiteId {
        SiteId::new(self.name.clone(), self.role)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    pub adapter_id: String,
    pub base_model_id: String,
    pub rank_hint: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_data: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_pseudo: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub svd_mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_adapter_ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subspace_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub include_mean: Option<bool>,
    pub sites: Vec<SiteEntry>,
}

impl Manifest {
    pub fn new(adapter_id: impl Into<String>, base_model_id: impl Into<String>, rank_hint: usize) -> Self {
        Manifest {
            format_version: FORMAT_VERSION,
            kind: None,
            adapter_id: adapter_id.into(),
            base_model_id: base_model_id.into(),
            rank_hint,
            k_data: None,
            k_pseudo: None,
            seed: None,
            svd_mode: None,
            source_adapter_ids: None,
            subspace_ref: None,
            include_mean: None,
            sites: Vec::new(),
        }
    }
}

/// A tensor queued for writing: manifest entry template plus its values.
/// `offset` and `length` of the template are filled in by [`write_container`].
#[derive(Clone, Debug)]
pub struct Tensor {
    pub entry: SiteEntry,
    pub matrix: SiteMatrix,
}

impl Tensor {
    pub fn new(site: &SiteId, tensor: Option<TensorKind>, matrix: SiteMatrix) -> Self {
        Tensor {
            entry: SiteEntry {
                name: site.name.clone(),
                role: site.role,
                rows: matrix.rows(),
                cols: matrix.cols(),
                dtype: "f32".to_string(),
                offset: 0,
                length: 0,
                tensor,
                k_data: None,
                k_pseudo: None,
                degenerate: None,
                total_variance: None,
                residual_fro: None,
            },
            matrix,
        }
    }
}

fn tensor_key(e: &SiteEntry) -> (String, Role, Option<TensorKind>) {
    (e.name.clone(), e.role, e.tensor)
}

/// Serializes a container without touching the filesystem, sorting tensors
/// by `(name, role, tensor)` and assigning contiguous offsets.
pub fn encode_container(mut manifest: Manifest, mut tensors: Vec<Tensor>) -> Result<EncodedContainer> {
    tensors.sort_by_key(|t| tensor_key(&t.entry));
    let mut weights = Vec::new();
    manifest.sites.clear();
    for t in tensors {
        let mut entry = t.entry;
        entry.rows = t.matrix.rows();
        entry.cols = t.matrix.cols();
        entry.dtype = "f32".to_string();
        entry.offset = weights.len() as u64;
        for x in t.matrix.data() {
            weights.extend_from_slice(&x.to_le_bytes());
        }
        entry.length = weights.len() as u64 - entry.offset;
        manifest.sites.push(entry);
    }
    let mut json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::MalformedManifest(e.to_string()))?;
    json.push('\n');
    Ok(EncodedContainer {
        manifest,
        manifest_bytes: json.into_bytes(),
        weights,
    })
}

/// Byte-exact image of a container directory.
#[derive(Clone, Debug)]
pub struct EncodedContainer {
    pub manifest: Manifest,
    pub manifest_bytes: Vec<u8>,
    pub weights: Vec<u8>,
}

impl EncodedContainer {
    /// SHA-256 over `manifest.json` followed by `weights.bin`, hex encoded.
    pub fn content_hash(&self) -> String {
        hash_parts(&self.manifest_bytes, &self.weights)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, &self.manifest_bytes).map_err(|e| Error::io(&mpath, e))?;
        let wpath = dir.join(WEIGHTS_FILE);
        fs::write(&wpath, &self.weights).map_err(|e| Error::io(&wpath, e))?;
        Ok(())
    }
}

fn hash_parts(manifest: &[u8], weights: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(manifest);
    h.update(weights);
    hex::encode(h.finalize())
}

/// Content hash of a container directory as written on disk.
pub fn container_hash(dir: &Path) -> Result<String> {
    let mpath = dir.join(MANIFEST_FILE);
    let manifest = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let wpath = dir.join(WEIGHTS_FILE);
    let weights = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    Ok(hash_parts(&manifest, &weights))
}

/// Writes a container and returns the manifest as written.
pub fn write_container(dir: &Path, manifest: Manifest, tensors: Vec<Tensor>) -> Result<Manifest> {
    let encoded = encode_container(manifest, tensors)?;
    encoded.write(dir)?;
    Ok(encoded.manifest)
}

/// Reads and validates a container. Tensors come back in manifest order.
pub fn read_container(dir: &Path) -> Result<(Manifest, Vec<(SiteEntry, SiteMatrix)>)> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::MalformedManifest(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    let wpath = dir.join(WEIGHTS_FILE);
    let weights = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;

    let mut seen = BTreeSet::new();
    let mut tensors = Vec::with_capacity(manifest.sites.len());
    for entry in &manifest.sites {
        if entry.name.is_empty() {
            return Err(Error::MalformedManifest("site with empty name".into()));
        }
        if !seen.insert(tensor_key(entry)) {
            return Err(Error::MalformedManifest(format!(
                "duplicate site {}[{}]",
                entry.name, entry.role
            )));
        }
        if entry.dtype != "f32" {
            return Err(Error::MalformedManifest(format!("unsupported dtype {:?}", entry.dtype)));
        }
        let needed = (entry.rows as u64)
            .checked_mul(entry.cols as u64)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::ShapeMismatch(format!("{} shape overflows", entry.name)))?;
        if entry.rows == 0 || entry.cols == 0 || entry.length != needed {
            return Err(Error::ShapeMismatch(format!(
                "{}[{}]: {}x{} f32 needs {} bytes, manifest declares {}",
                entry.name, entry.role, entry.rows, entry.cols, needed, entry.length
            )));
        }
        let end = entry
            .offset
            .checked_add(entry.length)
            .filter(|&end| end <= weights.len() as u64)
            .ok_or_else(|| {
                Error::MalformedManifest(format!(
                    "{}[{}]: range {}+{} exceeds weights.bin ({} bytes)",
                    entry.name,
                    entry.role,
                    entry.offset,
                    entry.length,
                    weights.len()
                ))
            })?;
        let bytes = &weights[entry.offset as usize..end as usize];
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("{}[{}]", entry.name, entry.role)));
        }
        let matrix = SiteMatrix::new(entry.rows, entry.cols, data)?;
        tensors.push((entry.clone(), matrix));
    }
    Ok((manifest, tensors))
}

pub fn load_adapter_bundle(dir: &Path) -> Result<AdapterBundle> {
    let (manifest, tensors) = read_container(dir)?;
    if manifest.kind.is_some() {
        return Err(Error::MalformedManifest(format!(
            "{} is a {:?} bundle, not an adapter",
            dir.display(),
            manifest.kind.unwrap_or_default()
        )));
    }
    let mut bundle = AdapterBundle::new(manifest.adapter_id, manifest.base_model_id, manifest.rank_hint);
    for (entry, matrix) in tensors {
        if entry.tensor.is_some() {
            return Err(Error::MalformedManifest(format!(
                "adapter site {} carries a tensor tag",
                entry.name
            )));
        }
        bundle.sites.insert(entry.site_id(), matrix);
    }
    Ok(bundle)
}

pub fn save_adapter_bundle(bundle: &AdapterBundle, dir: &Path) -> Result<()> {
    let manifest = Manifest::new(&bundle.adapter_id, &bundle.base_model_id, bundle.rank_hint);
    let tensors = bundle
        .sites
        .iter()
        .map(|(id, m)| Tensor::new(id, None, m.clone()))
        .collect();
    write_container(dir, manifest, tensors)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SiteInfo {
    pub ambient_dim: usize,
    /// Rank slots contributed by each bundle, in input order.
    pub vector_counts: Vec<usize>,
}

/// Sites shared by every bundle of a collection.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SiteCatalog {
    pub sites: BTreeMap<SiteId, SiteInfo>,
    /// Sites present in some bundles but not all; excluded from `sites`.
    pub warnings: Vec<SiteId>,
}

pub fn validate_collection(bundles: &[AdapterBundle]) -> Result<SiteCatalog> {
    if bundles.is_empty() {
        return Err(Error::OutOfRange("empty adapter collection".into()));
    }
    let all: BTreeSet<&SiteId> = bundles.iter().flat_map(|b| b.sites.keys()).collect();
    let mut catalog = SiteCatalog::default();
    for site in all {
        if !bundles.iter().all(|b| b.sites.contains_key(site)) {
            catalog.warnings.push(site.clone());
            continue;
        }
        let mut ambient = None;
        let mut counts = Vec::with_capacity(bundles.len());
        for b in bundles {
            let m = &b.sites[site];
            let dim = m.ambient_dim(site.role);
            match ambient {
                None => ambient = Some(dim),
                Some(expected) if expected != dim => {
                    return Err(Error::AmbientDimMismatch {
                        site: site.clone(),
                        expected,
                        found: dim,
                    })
                }
                _ => {}
            }
            counts.push(m.vector_count(site.role));
        }
        catalog.sites.insert(
            site.clone(),
            SiteInfo {
                ambient_dim: ambient.unwrap_or(0),
                vector_counts: counts,
            },
        );
    }
    if catalog.sites.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    Ok(catalog)
}

/// Stacks the role-vectors of one site across bundles: A rows as-is, B
/// columns transposed into rows. Blocks follow input order.
pub fn stack_site(bundles: &[AdapterBundle], site: &SiteId) -> Result<SiteMatrix> {
    let mut ambient = None;
    let mut data = Vec::new();
    let mut rows = 0;
    for b in bundles {
        let m = b.sites.get(site).ok_or_else(|| {
            Error::DimMismatch(format!("{site} missing from adapter {}", b.adapter_id))
        })?;
        let dim = m.ambient_dim(site.role);
        match ambient {
            None => ambient = Some(dim),
            Some(expected) if expected != dim => {
                return Err(Error::AmbientDimMismatch {
                    site: site.clone(),
                    expected,
                    found: dim,
                })
            }
            _ => {}
        }
        let block = match site.role {
            Role::A => m.clone(),
            Role::B => m.transpose(),
        };
        rows += block.rows();
        data.extend_from_slice(block.data());
    }
    let cols = ambient.ok_or_else(|| Error::OutOfRange("no bundles to stack".into()))?;
    SiteMatrix::new(rows, cols, data)
}

//! Mapping models from (basis bits, measurement probability) to one target weight.
//!
//! Each generated weight `ω_i` is the value of a scalar function of the
//! `N + 1` coordinates `(bits(i), x_i)`, where `x_i` is the probability of
//! basis state `i` (optionally rescaled by `2^N` and clamped to `[0, 1]`).
//!
//! The tensor-network model embeds each coordinate as `[x, 1 − x]` and
//! contracts the product of these two-vectors against a matrix product state
//! with open boundaries:
//!
//! ```text
//!   A0 ── A1 ── A2 ── … ── A_N
//!   |     |     |           |
//!  ξ(x0) ξ(x1) ξ(x2)       ξ(xN)
//! ```
//!
//! Site `k` is stored as a dense `left x 2 x right` block, with `left = 1` on
//! the first site and `right = 1` on the last. All sites share one flat buffer
//! so the optimizer sees a single slice.
//!
//! The MLP model `[N+1, h, h, 1]` with tanh hidden layers is the baseline.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::qnn::ProbVector;

/// Inputs handled by one parallel work item in the backward pass. Partial sums
/// are reduced in chunk order, so results do not depend on the thread count.
const BACKPROP_CHUNK: usize = 256;

/// Largest site count [`dense_oracle`] will expand.
pub const DENSE_ORACLE_MAX_SITES: usize = 16;

/// Big-endian bits of `index`: entry 0 is qubit 0, the most significant bit.
pub fn basis_bits(index: usize, n_qubits: usize) -> Result<Vec<u8>> {
    if n_qubits >= usize::BITS as usize || index >> n_qubits != 0 {
        return Err(Error::Domain(format!(
            "basis index {index} is outside [0, 2^{n_qubits})"
        )));
    }
    Ok((0..n_qubits)
        .map(|q| ((index >> (n_qubits - 1 - q)) & 1) as u8)
        .collect())
}

/// Coordinates fed to a mapping model: `N` basis bits followed by the
/// probability coordinate, all in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingInput {
    coords: Vec<f64>,
}

impl MappingInput {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Domain("a mapping input needs at least one coordinate".into()));
        }
        if let Some(j) = coords.iter().position(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::Domain(format!(
                "coordinate {j} = {} is outside [0, 1]",
                coords[j]
            )));
        }
        Ok(Self { coords })
    }

    /// Bits of `index` followed by the probability coordinate `x`.
    pub fn from_basis(index: usize, n_qubits: usize, x: f64) -> Result<Self> {
        let mut coords: Vec<f64> = basis_bits(index, n_qubits)?
            .into_iter()
            .map(f64::from)
            .collect();
        coords.push(x);
        Self::new(coords)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// `x ↦ [x, 1 − x]` on every coordinate.
pub fn feature_map(input: &MappingInput) -> Result<Vec<[f64; 2]>> {
    input
        .coords
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            if (0.0..=1.0).contains(&x) {
                Ok([x, 1.0 - x])
            } else {
                Err(Error::Domain(format!("coordinate {j} = {x} is outside [0, 1]")))
            }
        })
        .collect()
}

/// Target-network weights produced by a mapping model.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Open-boundary matrix product state with physical dimension 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpsMapping {
    sites: usize,
    bond_dim: usize,
    params: Vec<f64>,
}

impl MpsMapping {
    /// Closed-form entry count for `sites` sites at bond dimension `bond_dim`.
    pub fn param_count_for(sites: usize, bond_dim: usize) -> usize {
        4 * bond_dim + 2 * bond_dim * bond_dim * sites.saturating_sub(2)
    }

    pub fn zeros(sites: usize, bond_dim: usize) -> Result<Self> {
        if sites < 2 {
            return Err(config_err!("an MPS mapping needs at least 2 sites, got {sites}"));
        }
        if bond_dim == 0 {
            return Err(config_err!("bond dimension must be at least 1"));
        }
        Ok(Self {
            sites,
            bond_dim,
            params: vec![0.0; Self::param_count_for(sites, bond_dim)],
        })
    }

    pub fn filled(sites: usize, bond_dim: usize, value: f64) -> Result<Self> {
        let mut mps = Self::zeros(sites, bond_dim)?;
        mps.params.fill(value);
        Ok(mps)
    }

    pub fn from_params(sites: usize, bond_dim: usize, params: Vec<f64>) -> Result<Self> {
        let mut mps = Self::zeros(sites, bond_dim)?;
        if params.len() != mps.params.len() {
            return Err(config_err!(
                "MPS with {sites} sites and bond dimension {bond_dim} has {} entries, got {}",
                mps.params.len(),
                params.len()
            ));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(config_err!("MPS entries must be finite"));
        }
        mps.params = params;
        Ok(mps)
    }

    /// Every entry drawn from `N(0, std²)`.
    pub fn gaussian<R: Rng + ?Sized>(sites: usize, bond_dim: usize, std: f64, rng: &mut R) -> Result<Self> {
        let mut mps = Self::zeros(sites, bond_dim)?;
        let normal = Normal::new(0.0, std).map_err(|e| config_err!("bad std {std}: {e}"))?;
        for v in &mut mps.params {
            *v = normal.sample(rng);
        }
        Ok(mps)
    }

    /// Training initialisation.
    ///
    /// Interior sites are `c·δ_{αβ}` for both physical values plus noise of
    /// scale `0.5/√r`; boundary sites are Gaussian with scale `1/√r`. With
    /// `c = √0.75` each interior site preserves the expected squared norm of
    /// the bond vector, so the output stays O(1) along long chains.
    pub fn init<R: Rng + ?Sized>(sites: usize, bond_dim: usize, rng: &mut R) -> Result<Self> {
        let mut mps = Self::zeros(sites, bond_dim)?;
        let r = bond_dim as f64;
        let boundary = Normal::new(0.0, 1.0 / r.sqrt()).expect("finite std");
        let interior = Normal::new(0.0, 0.5 / r.sqrt()).expect("finite std");
        let diag = 0.75f64.sqrt();
        for k in 0..sites {
            let (left, right) = mps.site_dims(k);
            let range = mps.site_range(k);
            let block = &mut mps.params[range];
            if k == 0 || k == sites - 1 {
                block.iter_mut().for_each(|v| *v = boundary.sample(rng));
                continue;
            }
            for a in 0..left {
                for s in 0..2 {
                    for b in 0..right {
                        let noise = interior.sample(rng);
                        block[(a * 2 + s) * right + b] = if a == b { diag + noise } else { noise };
                    }
                }
            }
        }
        Ok(mps)
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn bond_dim(&self) -> usize {
        self.bond_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `(left, right)` bond dimensions of site `k`.
    pub fn site_dims(&self, k: usize) -> (usize, usize) {
        let left = if k == 0 { 1 } else { self.bond_dim };
        let right = if k + 1 == self.sites { 1 } else { self.bond_dim };
        (left, right)
    }

    pub fn site_range(&self, k: usize) -> std::ops::Range<usize> {
        let start: usize = (0..k)
            .map(|j| {
                let (l, r) = self.site_dims(j);
                2 * l * r
            })
            .sum();
        let (l, r) = self.site_dims(k);
        start..start + 2 * l * r
    }

    /// Entry `A_k[α, s, β]`.
    pub fn entry(&self, k: usize, alpha: usize, s: usize, beta: usize) -> f64 {
        let (_, right) = self.site_dims(k);
        self.params[self.site_range(k).start + (alpha * 2 + s) * right + beta]
    }

    fn site(&self, k: usize) -> &[f64] {
        &self.params[self.site_range(k)]
    }

    fn check_sites(&self, n: usize) -> Result<()> {
        if n != self.sites {
            return Err(config_err!(
                "MPS has {} sites but the input has {n} coordinates",
                self.sites
            ));
        }
        Ok(())
    }
}

/// `v ← v · Σ_s f_s A[:, s, :]`.
fn absorb_site(v: &[f64], site: &[f64], left: usize, right: usize, f: [f64; 2], out: &mut Vec<f64>) {
    out.clear();
    out.resize(right, 0.0);
    for (a, &va) in v.iter().enumerate().take(left) {
        if va == 0.0 {
            continue;
        }
        let row0 = &site[(a * 2) * right..(a * 2 + 1) * right];
        let row1 = &site[(a * 2 + 1) * right..(a * 2 + 2) * right];
        for b in 0..right {
            out[b] += va * (f[0] * row0[b] + f[1] * row1[b]);
        }
    }
}

/// `v ← Σ_s f_s A[:, s, :] · v`.
fn absorb_site_from_right(v: &[f64], site: &[f64], left: usize, right: usize, f: [f64; 2], out: &mut Vec<f64>) {
    out.clear();
    out.resize(left, 0.0);
    for (a, slot) in out.iter_mut().enumerate() {
        let row0 = &site[(a * 2) * right..(a * 2 + 1) * right];
        let row1 = &site[(a * 2 + 1) * right..(a * 2 + 2) * right];
        *slot = (0..right)
            .map(|b| (f[0] * row0[b] + f[1] * row1[b]) * v[b])
            .sum();
    }
}

/// `W · Ξ(x)`: contracts each site with its feature vector, then sweeps the
/// bond vector from left to right.
pub fn mps_contract(mapping: &MpsMapping, features: &[[f64; 2]]) -> Result<f64> {
    mapping.check_sites(features.len())?;
    Ok(contract_unchecked(mapping, features))
}

fn contract_unchecked(mapping: &MpsMapping, features: &[[f64; 2]]) -> f64 {
    let mut v = vec![1.0];
    let mut next = Vec::with_capacity(mapping.bond_dim);
    for (k, &f) in features.iter().enumerate() {
        let (left, right) = mapping.site_dims(k);
        absorb_site(&v, mapping.site(k), left, right, f, &mut next);
        std::mem::swap(&mut v, &mut next);
    }
    v[0]
}

/// Expands the MPS into its full `2^sites` tensor, `s_1` most significant.
pub fn dense_oracle(mapping: &MpsMapping) -> Result<Vec<f64>> {
    if mapping.sites > DENSE_ORACLE_MAX_SITES {
        return Err(Error::Refused(format!(
            "dense expansion of {} sites exceeds the limit of {DENSE_ORACLE_MAX_SITES}",
            mapping.sites
        )));
    }
    // rows: physical multi-index so far, columns: open right bond
    let mut partial = vec![1.0];
    let mut width = 1;
    for k in 0..mapping.sites {
        let (left, right) = mapping.site_dims(k);
        debug_assert_eq!(left, width);
        let site = mapping.site(k);
        let rows = partial.len() / width;
        let mut next = vec![0.0; rows * 2 * right];
        for row in 0..rows {
            for a in 0..left {
                let t = partial[row * width + a];
                for s in 0..2 {
                    let dst = (row * 2 + s) * right;
                    for b in 0..right {
                        next[dst + b] += t * site[(a * 2 + s) * right + b];
                    }
                }
            }
        }
        partial = next;
        width = right;
    }
    Ok(partial)
}

/// `Σ_s W[s] Π_k ξ_k[s_k]` for a dense tensor from [`dense_oracle`].
pub fn contract_dense(dense: &[f64], features: &[[f64; 2]]) -> Result<f64> {
    if dense.len() != 1usize << features.len() {
        return Err(config_err!(
            "dense tensor with {} entries does not match {} sites",
            dense.len(),
            features.len()
        ));
    }
    let n = features.len();
    Ok(dense
        .iter()
        .enumerate()
        .map(|(idx, w)| {
            let weight: f64 = (0..n)
                .map(|k| features[k][(idx >> (n - 1 - k)) & 1])
                .product();
            w * weight
        })
        .sum())
}

/// Baseline MLP `[inputs, h, h, 1]`, tanh hidden layers, linear output.
///
/// Parameters live in one buffer: `W1 (h x inputs)`, `b1`, `W2 (h x h)`, `b2`,
/// `w3 (h)`, `b3`, each row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpMapping {
    inputs: usize,
    hidden: usize,
    params: Vec<f64>,
}

impl MlpMapping {
    pub fn param_count_for(inputs: usize, hidden: usize) -> usize {
        inputs * hidden + hidden + hidden * hidden + hidden + hidden + 1
    }

    pub fn zeros(inputs: usize, hidden: usize) -> Result<Self> {
        if inputs == 0 || hidden == 0 {
            return Err(config_err!("MLP mapping needs non-zero input and hidden sizes"));
        }
        Ok(Self {
            inputs,
            hidden,
            params: vec![0.0; Self::param_count_for(inputs, hidden)],
        })
    }

    pub fn from_params(inputs: usize, hidden: usize, params: Vec<f64>) -> Result<Self> {
        let mut mlp = Self::zeros(inputs, hidden)?;
        if params.len() != mlp.params.len() {
            return Err(config_err!(
                "MLP [{inputs}, {hidden}, {hidden}, 1] has {} parameters, got {}",
                mlp.params.len(),
                params.len()
            ));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(config_err!("MLP parameters must be finite"));
        }
        mlp.params = params;
        Ok(mlp)
    }

    /// Weights `N(0, 1/fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(inputs: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let mut mlp = Self::zeros(inputs, hidden)?;
        let l = mlp.layout();
        let w1 = Normal::new(0.0, 1.0 / (inputs as f64).sqrt()).expect("finite std");
        let wh = Normal::new(0.0, 1.0 / (hidden as f64).sqrt()).expect("finite std");
        for v in &mut mlp.params[l.w1.clone()] {
            *v = w1.sample(rng);
        }
        for v in &mut mlp.params[l.w2.clone()] {
            *v = wh.sample(rng);
        }
        for v in &mut mlp.params[l.w3.clone()] {
            *v = wh.sample(rng);
        }
        Ok(mlp)
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Output bias, the last parameter.
    pub fn set_output_bias(&mut self, b: f64) {
        *self.params.last_mut().expect("non-empty") = b;
    }

    fn layout(&self) -> MlpLayout {
        let (n, h) = (self.inputs, self.hidden);
        let w1 = 0..n * h;
        let b1 = w1.end..w1.end + h;
        let w2 = b1.end..b1.end + h * h;
        let b2 = w2.end..w2.end + h;
        let w3 = b2.end..b2.end + h;
        let b3 = w3.end;
        MlpLayout { w1, b1, w2, b2, w3, b3 }
    }

    fn check_inputs(&self, n: usize) -> Result<()> {
        if n != self.inputs {
            return Err(config_err!(
                "MLP expects {} coordinates, got {n}",
                self.inputs
            ));
        }
        Ok(())
    }

    fn activations(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let l = self.layout();
        let p = &self.params;
        let h = self.hidden;
        let h1: Vec<f64> = (0..h)
            .map(|i| {
                let row = &p[l.w1.start + i * self.inputs..l.w1.start + (i + 1) * self.inputs];
                (row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + p[l.b1.start + i]).tanh()
            })
            .collect();
        let h2: Vec<f64> = (0..h)
            .map(|i| {
                let row = &p[l.w2.start + i * h..l.w2.start + (i + 1) * h];
                (row.iter().zip(&h1).map(|(w, a)| w * a).sum::<f64>() + p[l.b2.start + i]).tanh()
            })
            .collect();
        let out = p[l.w3.clone()].iter().zip(&h2).map(|(w, a)| w * a).sum::<f64>() + p[l.b3];
        (h1, h2, out)
    }

    fn forward_one(&self, x: &[f64]) -> f64 {
        self.activations(x).2
    }

    /// Accumulates `upstream · ∂ω/∂β` into `grad`; returns `∂ω/∂x_last`.
    fn backward_one(&self, x: &[f64], upstream: f64, grad: &mut [f64]) -> f64 {
        let l = self.layout();
        let p = &self.params;
        let h = self.hidden;
        let (h1, h2, _) = self.activations(x);

        grad[l.b3] += upstream;
        let mut dz2 = vec![0.0; h];
        for i in 0..h {
            grad[l.w3.start + i] += upstream * h2[i];
            dz2[i] = upstream * p[l.w3.start + i] * (1.0 - h2[i] * h2[i]);
        }
        let mut dh1 = vec![0.0; h];
        for i in 0..h {
            grad[l.b2.start + i] += dz2[i];
            for j in 0..h {
                grad[l.w2.start + i * h + j] += dz2[i] * h1[j];
                dh1[j] += dz2[i] * p[l.w2.start + i * h + j];
            }
        }
        let last = self.inputs - 1;
        let mut dx_last = 0.0;
        for i in 0..h {
            let dz1 = dh1[i] * (1.0 - h1[i] * h1[i]);
            grad[l.b1.start + i] += dz1;
            for (j, &xj) in x.iter().enumerate() {
                grad[l.w1.start + i * self.inputs + j] += dz1 * xj;
            }
            dx_last += dz1 * p[l.w1.start + i * self.inputs + last];
        }
        dx_last
    }
}

struct MlpLayout {
    w1: std::ops::Range<usize>,
    b1: std::ops::Range<usize>,
    w2: std::ops::Range<usize>,
    b2: std::ops::Range<usize>,
    w3: std::ops::Range<usize>,
    b3: usize,
}

/// Either mapping family, behind one parameter buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Mapping {
    Mps(MpsMapping),
    Mlp(MlpMapping),
}

impl Mapping {
    pub fn input_len(&self) -> usize {
        match self {
            Mapping::Mps(m) => m.sites,
            Mapping::Mlp(m) => m.inputs,
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Mapping::Mps(m) => &m.params,
            Mapping::Mlp(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Mapping::Mps(m) => &mut m.params,
            Mapping::Mlp(m) => &mut m.params,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Mapping::Mps(_) => "mps",
            Mapping::Mlp(_) => "mlp",
        }
    }

    pub fn forward(&self, input: &MappingInput) -> Result<f64> {
        match self {
            Mapping::Mps(m) => mps_contract(m, &feature_map(input)?),
            Mapping::Mlp(m) => {
                m.check_inputs(input.len())?;
                Ok(m.forward_one(input.coords()))
            }
        }
    }
}

/// Closed-form trainable parameter count.
pub fn count_mapping_params(mapping: &Mapping) -> usize {
    match mapping {
        Mapping::Mps(m) => MpsMapping::param_count_for(m.sites, m.bond_dim),
        Mapping::Mlp(m) => MlpMapping::param_count_for(m.inputs, m.hidden),
    }
}

/// Probability coordinate fed to the mapping and its derivative with respect
/// to the raw probability.
pub fn scale_probability(p: f64, n_qubits: usize, prob_scale: bool) -> (f64, f64) {
    let factor = if prob_scale { (n_qubits as f64).exp2() } else { 1.0 };
    let x = p * factor;
    if x >= 1.0 {
        (1.0, 0.0)
    } else if x <= 0.0 {
        (0.0, if x == 0.0 { factor } else { 0.0 })
    } else {
        (x, factor)
    }
}

/// Mapping inputs for basis indices `0..m`.
pub fn build_inputs(full_probs: &ProbVector, m: usize, prob_scale: bool) -> Result<Vec<MappingInput>> {
    let n = full_probs.n_qubits();
    if m > full_probs.len() {
        return Err(config_err!(
            "{m} weights requested but {n} qubits only give {} basis states",
            full_probs.len()
        ));
    }
    full_probs.probs()[..m]
        .iter()
        .enumerate()
        .map(|(i, &p)| MappingInput::from_basis(i, n, scale_probability(p, n, prob_scale).0))
        .collect()
}

pub(crate) fn forward_all(mapping: &Mapping, inputs: &[MappingInput]) -> Result<Vec<f64>> {
    let width = mapping.input_len();
    if let Some(i) = inputs.iter().position(|x| x.len() != width) {
        return Err(config_err!(
            "input {i} has {} coordinates but the mapping takes {width}",
            inputs[i].len()
        ));
    }
    Ok(match mapping {
        Mapping::Mps(mps) => inputs
            .par_iter()
            .map(|x| {
                let f: Vec<[f64; 2]> = x.coords.iter().map(|&c| [c, 1.0 - c]).collect();
                contract_unchecked(mps, &f)
            })
            .collect(),
        Mapping::Mlp(mlp) => inputs.par_iter().map(|x| mlp.forward_one(&x.coords)).collect(),
    })
}

/// Weights `ω_0 … ω_{m−1}` for basis states `0..m`.
pub fn generate_weights(
    mapping: &Mapping,
    full_probs: &ProbVector,
    m: usize,
    prob_scale: bool,
) -> Result<WeightVector> {
    let inputs = build_inputs(full_probs, m, prob_scale)?;
    forward_all(mapping, &inputs).map(WeightVector)
}

pub fn mlp_map_forward(mapping: &MlpMapping, inputs: &[MappingInput]) -> Result<WeightVector> {
    forward_all(&Mapping::Mlp(mapping.clone()), inputs).map(WeightVector)
}

/// Gradients of `Σ_i upstream_i · ω_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingGrads {
    /// With respect to every mapping parameter, in buffer order.
    pub params: Vec<f64>,
    /// With respect to each input's probability coordinate.
    pub prob_coord: Vec<f64>,
}

/// Accumulates one input's parameter gradient; returns `∂ω/∂x_last`.
fn mps_backward_one(mps: &MpsMapping, f: &[[f64; 2]], upstream: f64, grad: &mut [f64], scratch: &mut MpsScratch) -> f64 {
    let n = mps.sites;
    let r = mps.bond_dim;
    // lefts[k]: bond vector entering site k from the left
    let lefts = &mut scratch.lefts;
    lefts.clear();
    lefts.push(vec![1.0]);
    let mut tmp = Vec::with_capacity(r);
    for k in 0..n - 1 {
        let (left, right) = mps.site_dims(k);
        absorb_site(&lefts[k], mps.site(k), left, right, f[k], &mut tmp);
        lefts.push(tmp.clone());
    }
    // rights[k]: bond vector entering site k from the right
    let rights = &mut scratch.rights;
    rights.clear();
    rights.resize(n, Vec::new());
    rights[n - 1] = vec![1.0];
    for k in (1..n).rev() {
        let (left, right) = mps.site_dims(k);
        absorb_site_from_right(&rights[k], mps.site(k), left, right, f[k], &mut tmp);
        rights[k - 1] = tmp.clone();
    }
    for k in 0..n {
        let (left, right) = mps.site_dims(k);
        let range = mps.site_range(k);
        let g = &mut grad[range];
        for a in 0..left {
            let la = upstream * lefts[k][a];
            if la == 0.0 {
                continue;
            }
            for s in 0..2 {
                let ls = la * f[k][s];
                let row = &mut g[(a * 2 + s) * right..(a * 2 + s + 1) * right];
                for (slot, rb) in row.iter_mut().zip(&rights[k]) {
                    *slot += ls * rb;
                }
            }
        }
    }
    // ∂ξ/∂x = [1, −1] on the last site
    let last = mps.site(n - 1);
    lefts[n - 1]
        .iter()
        .enumerate()
        .map(|(a, la)| la * (last[a * 2] - last[a * 2 + 1]))
        .sum()
}

#[derive(Default)]
struct MpsScratch {
    lefts: Vec<Vec<f64>>,
    rights: Vec<Vec<f64>>,
}

fn check_backprop_shapes(width: usize, inputs: &[MappingInput], upstream: &[f64]) -> Result<()> {
    if inputs.len() != upstream.len() {
        return Err(config_err!(
            "{} inputs but {} upstream gradients",
            inputs.len(),
            upstream.len()
        ));
    }
    if let Some(i) = inputs.iter().position(|x| x.len() != width) {
        return Err(config_err!(
            "input {i} has {} coordinates but the mapping takes {width}",
            inputs[i].len()
        ));
    }
    Ok(())
}

fn chunked_backprop<F>(param_len: usize, inputs: &[MappingInput], upstream: &[f64], one: F) -> MappingGrads
where
    F: Fn(&MappingInput, f64, &mut [f64], &mut MpsScratch) -> f64 + Sync,
{
    let partials: Vec<(Vec<f64>, Vec<f64>)> = inputs
        .par_chunks(BACKPROP_CHUNK)
        .zip(upstream.par_chunks(BACKPROP_CHUNK))
        .map(|(xs, us)| {
            let mut grad = vec![0.0; param_len];
            let mut scratch = MpsScratch::default();
            let coord = xs
                .iter()
                .zip(us)
                .map(|(x, &u)| if u == 0.0 { 0.0 } else { one(x, u, &mut grad, &mut scratch) })
                .collect();
            (grad, coord)
        })
        .collect();
    let mut params = vec![0.0; param_len];
    let mut prob_coord = Vec::with_capacity(inputs.len());
    for (grad, coord) in partials {
        params.iter_mut().zip(&grad).for_each(|(acc, g)| *acc += g);
        prob_coord.extend(coord);
    }
    MappingGrads { params, prob_coord }
}

/// Reverse-mode gradients through the MPS contraction.
pub fn mps_backprop(mapping: &MpsMapping, inputs: &[MappingInput], upstream: &[f64]) -> Result<MappingGrads> {
    check_backprop_shapes(mapping.sites, inputs, upstream)?;
    Ok(chunked_backprop(mapping.params.len(), inputs, upstream, |x, u, grad, scratch| {
        let f: Vec<[f64; 2]> = x.coords.iter().map(|&c| [c, 1.0 - c]).collect();
        u * mps_backward_one(mapping, &f, u, grad, scratch)
    }))
}

/// Reverse-mode gradients through the MLP mapping.
pub fn mlp_map_backprop(mapping: &MlpMapping, inputs: &[MappingInput], upstream: &[f64]) -> Result<MappingGrads> {
    check_backprop_shapes(mapping.inputs, inputs, upstream)?;
    Ok(chunked_backprop(mapping.params.len(), inputs, upstream, |x, u, grad, _| {
        mapping.backward_one(&x.coords, u, grad)
    }))
}

pub fn mapping_backprop(mapping: &Mapping, inputs: &[MappingInput], upstream: &[f64]) -> Result<MappingGrads> {
    match mapping {
        Mapping::Mps(m) => mps_backprop(m, inputs, upstream),
        Mapping::Mlp(m) => mlp_map_backprop(m, inputs, upstream),
    }
}

/// Chains probability-coordinate gradients back to the raw probabilities of
/// basis states `0..prob_coord.len()`, through the optional `2^N` rescaling
/// and clamp.
pub fn chain_probability_gradient(prob_coord: &[f64], full_probs: &ProbVector, prob_scale: bool) -> Vec<f64> {
    let n = full_probs.n_qubits();
    prob_coord
        .iter()
        .zip(full_probs.probs())
        .map(|(g, &p)| g * scale_probability(p, n, prob_scale).1)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn basis_bits_are_big_endian() {
        assert_eq!(basis_bits(0, 3).unwrap(), vec![0, 0, 0]);
        assert_eq!(basis_bits(5, 3).unwrap(), vec![1, 0, 1]);
        assert_eq!(basis_bits(15, 4).unwrap(), vec![1, 1, 1, 1]);
        assert!(basis_bits(8, 3).is_err());
    }

    #[test]
    fn feature_map_values() {
        let input = MappingInput::new(vec![0.0, 1.0, 0.3]).unwrap();
        let f = feature_map(&input).unwrap();
        assert_eq!(f[0], [0.0, 1.0]);
        assert_eq!(f[1], [1.0, 0.0]);
        assert!((f[2][0] - 0.3).abs() < 1e-15 && (f[2][1] - 0.7).abs() < 1e-15);
        assert!(MappingInput::new(vec![0.5, 1.2]).is_err());
        assert!(MappingInput::new(vec![-0.1]).is_err());
    }

    #[test]
    fn trivial_contractions() {
        let ones = MpsMapping::filled(5, 1, 1.0).unwrap();
        let f = [[0.2, 0.8], [1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [0.9, 0.1]];
        assert!((mps_contract(&ones, &f).unwrap() - 1.0).abs() < 1e-15);
        let zeros = MpsMapping::zeros(5, 3).unwrap();
        assert_eq!(mps_contract(&zeros, &f).unwrap(), 0.0);
        assert!(mps_contract(&zeros, &f[..4]).is_err());
    }

    #[test]
    fn site_count_and_shapes() {
        assert!(MpsMapping::zeros(1, 2).is_err());
        assert!(MpsMapping::zeros(3, 0).is_err());
        let mps = MpsMapping::zeros(6, 3).unwrap();
        assert_eq!(mps.site_dims(0), (1, 3));
        assert_eq!(mps.site_dims(2), (3, 3));
        assert_eq!(mps.site_dims(5), (3, 1));
        assert_eq!(mps.site_range(5).end, mps.params().len());
    }

    #[test]
    fn dense_oracle_small_cases() {
        let ones = MpsMapping::filled(2, 1, 1.0).unwrap();
        assert_eq!(dense_oracle(&ones).unwrap(), vec![1.0; 4]);
        let big = MpsMapping::zeros(DENSE_ORACLE_MAX_SITES + 1, 1).unwrap();
        assert!(matches!(dense_oracle(&big), Err(Error::Refused(_))));
    }

    #[test]
    fn contraction_matches_dense_expansion() {
        let mut r = rng(1);
        let mps = MpsMapping::gaussian(6, 3, 1.0, &mut r).unwrap();
        let dense = dense_oracle(&mps).unwrap();
        let x = MappingInput::new((0..6).map(|_| r.random_range(0.0..=1.0)).collect()).unwrap();
        let f = feature_map(&x).unwrap();
        let a = mps_contract(&mps, &f).unwrap();
        let b = contract_dense(&dense, &f).unwrap();
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn init_output_is_order_one() {
        let mut r = rng(2);
        let mps = MpsMapping::init(14, 4, &mut r).unwrap();
        let f = vec![[1.0, 0.0]; 14];
        let v = mps_contract(&mps, &f).unwrap();
        assert!(v.is_finite() && v.abs() < 20.0, "{v}");
    }

    #[test]
    fn generate_weights_trivial_and_ordering() {
        let probs = ProbVector::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let ones = Mapping::Mps(MpsMapping::filled(3, 1, 1.0).unwrap());
        let w = generate_weights(&ones, &probs, 1, true).unwrap();
        assert_eq!(w.0, vec![1.0]);

        let inputs = build_inputs(&probs, 3, false).unwrap();
        assert_eq!(&inputs[0].coords()[..2], &[0.0, 0.0]);
        assert_eq!(&inputs[1].coords()[..2], &[0.0, 1.0]);
        assert_eq!(&inputs[2].coords()[..2], &[1.0, 0.0]);
        assert_eq!(inputs[2].coords()[2], 0.3);

        assert!(generate_weights(&ones, &probs, 5, true).is_err());
    }

    #[test]
    fn probability_scaling_clamps() {
        assert_eq!(scale_probability(0.1, 2, true), (0.4, 4.0));
        assert_eq!(scale_probability(0.3, 2, true), (1.0, 0.0));
        assert_eq!(scale_probability(0.3, 2, false), (0.3, 1.0));
    }

    #[test]
    fn mlp_constant_outputs() {
        let probs = ProbVector::new(vec![0.25; 4]).unwrap();
        let mut mlp = MlpMapping::zeros(3, 5).unwrap();
        let w = generate_weights(&Mapping::Mlp(mlp.clone()), &probs, 4, true).unwrap();
        assert!(w.0.iter().all(|&v| v == 0.0));
        mlp.set_output_bias(0.7);
        let w = generate_weights(&Mapping::Mlp(mlp), &probs, 4, true).unwrap();
        assert!(w.0.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn parameter_counts() {
        let mps = Mapping::Mps(MpsMapping::zeros(20, 2).unwrap());
        assert_eq!(count_mapping_params(&mps), 152);
        assert_eq!(mps.params().len(), 152);
        let mps = Mapping::Mps(MpsMapping::zeros(2, 1).unwrap());
        assert_eq!(count_mapping_params(&mps), 4);
        let mps = Mapping::Mps(MpsMapping::zeros(14, 4).unwrap());
        assert_eq!(count_mapping_params(&mps), 400);
        let mlp = Mapping::Mlp(MlpMapping::zeros(14, 20).unwrap());
        assert_eq!(count_mapping_params(&mlp), 14 * 20 + 20 + 400 + 20 + 20 + 1);
        assert_eq!(mlp.params().len(), count_mapping_params(&mlp));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut r = rng(4);
        let mps = MpsMapping::gaussian(4, 2, 1.0, &mut r).unwrap();
        let inputs: Vec<MappingInput> = (0..5)
            .map(|i| MappingInput::from_basis(i, 3, 0.4).unwrap())
            .collect();
        let g = mps_backprop(&mps, &inputs, &[0.0; 5]).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
        assert!(g.prob_coord.iter().all(|&v| v == 0.0));
        assert!(mps_backprop(&mps, &inputs, &[0.0; 4]).is_err());
    }

    #[test]
    fn all_ones_mps_has_flat_inputs() {
        let mps = MpsMapping::filled(4, 1, 1.0).unwrap();
        let inputs: Vec<MappingInput> = (0..8)
            .map(|i| MappingInput::from_basis(i, 3, 0.1 * i as f64).unwrap())
            .collect();
        let g = mps_backprop(&mps, &inputs, &[1.0; 8]).unwrap();
        assert!(g.prob_coord.iter().all(|&v| v == 0.0));
    }
}

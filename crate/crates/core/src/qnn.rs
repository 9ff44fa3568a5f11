//! Real-amplitude circuit simulation.
//!
//! Each sub-circuit starts in |0…0⟩ and applies `layers` blocks. A block is an
//! R_y rotation on every qubit followed by a linear CNOT chain with control `i`
//! and target `i + 1`, for `i` ascending. There is no trailing rotation layer,
//! so a sub-circuit on `n` qubits carries exactly `layers * n` angles, stored
//! layer-major (`angles[l * n + q]`).
//!
//! Qubit 0 is the most significant bit of a basis index. When several
//! sub-circuits are combined, the first one owns the most significant block of
//! bits.
//!
//! R_y and CNOT have real matrix entries, so amplitudes are stored as `f64`.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Geometry of a (possibly distributed) ansatz.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircuitSpec {
    total_qubits: usize,
    splits: Vec<usize>,
    layers: usize,
}

impl CircuitSpec {
    pub fn new(splits: Vec<usize>, layers: usize) -> Result<Self> {
        if splits.is_empty() {
            return Err(config_err!("a circuit needs at least one sub-circuit"));
        }
        if let Some(pos) = splits.iter().position(|&n| n == 0) {
            return Err(config_err!("sub-circuit {pos} has zero qubits"));
        }
        let total_qubits = splits.iter().sum();
        Ok(Self {
            total_qubits,
            splits,
            layers,
        })
    }

    /// Splits `total_qubits` into `parts` sub-circuits whose sizes differ by at
    /// most one; larger blocks come last.
    pub fn near_even(total_qubits: usize, parts: usize, layers: usize) -> Result<Self> {
        if parts == 0 || parts > total_qubits {
            return Err(config_err!(
                "cannot split {total_qubits} qubits into {parts} non-empty sub-circuits"
            ));
        }
        let base = total_qubits / parts;
        let extra = total_qubits % parts;
        let splits = (0..parts)
            .map(|j| if j >= parts - extra { base + 1 } else { base })
            .collect();
        Self::new(splits, layers)
    }

    pub fn total_qubits(&self) -> usize {
        self.total_qubits
    }

    pub fn splits(&self) -> &[usize] {
        &self.splits
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    /// Number of rotation angles, `layers * total_qubits`.
    pub fn theta_count(&self) -> usize {
        self.layers * self.total_qubits
    }

    /// Qubit offset of each sub-circuit inside the full register.
    pub fn offsets(&self) -> Vec<usize> {
        self.splits
            .iter()
            .scan(0, |acc, &n| {
                let start = *acc;
                *acc += n;
                Some(start)
            })
            .collect()
    }
}

/// Rotation angles for every sub-circuit, stored in one flat buffer.
///
/// Sub-circuit `j` occupies a contiguous `layers * splits[j]` slice, laid out
/// layer-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaParams {
    layers: usize,
    splits: Vec<usize>,
    values: Vec<f64>,
}

impl ThetaParams {
    pub fn zeros(spec: &CircuitSpec) -> Self {
        Self {
            layers: spec.layers,
            splits: spec.splits.clone(),
            values: vec![0.0; spec.theta_count()],
        }
    }

    /// Independent uniform samples in [−π, π].
    pub fn random<R: Rng + ?Sized>(spec: &CircuitSpec, rng: &mut R) -> Self {
        let values = (0..spec.theta_count())
            .map(|_| rng.random_range(-PI..=PI))
            .collect();
        Self {
            layers: spec.layers,
            splits: spec.splits.clone(),
            values,
        }
    }

    pub fn from_flat(spec: &CircuitSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.theta_count() {
            return Err(config_err!(
                "expected {} angles for {} layers x {} qubits, got {}",
                spec.theta_count(),
                spec.layers,
                spec.total_qubits,
                values.len()
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(config_err!("angle {i} is not finite"));
        }
        Ok(Self {
            layers: spec.layers,
            splits: spec.splits.clone(),
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn block_range(&self, j: usize) -> std::ops::Range<usize> {
        let start: usize = self.splits[..j].iter().map(|n| n * self.layers).sum();
        start..start + self.splits[j] * self.layers
    }

    /// Angles of sub-circuit `j`, shaped `layers x splits[j]`.
    pub fn block(&self, j: usize) -> &[f64] {
        &self.values[self.block_range(j)]
    }

    pub fn block_mut(&mut self, j: usize) -> &mut [f64] {
        let range = self.block_range(j);
        &mut self.values[range]
    }
}

/// Amplitudes of a real pure state on `n_qubits` qubits.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    n_qubits: usize,
    amplitudes: Vec<f64>,
}

impl StateVector {
    pub fn zero_state(n_qubits: usize) -> Self {
        let mut amplitudes = vec![0.0; 1 << n_qubits];
        amplitudes[0] = 1.0;
        Self {
            n_qubits,
            amplitudes,
        }
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

/// Which end of the basis index qubit 0 lives at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitOrder {
    /// Qubit 0 is the most significant bit.
    MsbFirst,
}

/// Measurement distribution over the computational basis.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    n_qubits: usize,
    probs: Vec<f64>,
    order: BitOrder,
}

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if !probs.len().is_power_of_two() {
            return Err(config_err!(
                "probability vector length {} is not a power of two",
                probs.len()
            ));
        }
        if let Some(i) = probs.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(config_err!("probability {i} is negative or not finite"));
        }
        Ok(Self {
            n_qubits: probs.len().trailing_zeros() as usize,
            probs,
            order: BitOrder::MsbFirst,
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn order(&self) -> BitOrder {
        self.order
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }
}

#[derive(Debug, Clone, Copy)]
enum Gate {
    Ry { qubit: usize, angle: usize },
    Cnot { control: usize, target: usize },
}

/// Gate list of one sub-circuit placed at `offset` inside a larger register.
fn ansatz_gates(n_qubits: usize, layers: usize, offset: usize) -> Vec<Gate> {
    let mut gates = Vec::with_capacity(layers * (2 * n_qubits).saturating_sub(1));
    for l in 0..layers {
        for q in 0..n_qubits {
            gates.push(Gate::Ry {
                qubit: offset + q,
                angle: l * n_qubits + q,
            });
        }
        for i in 0..n_qubits.saturating_sub(1) {
            gates.push(Gate::Cnot {
                control: offset + i,
                target: offset + i + 1,
            });
        }
    }
    gates
}

#[inline]
fn stride(n_qubits: usize, qubit: usize) -> usize {
    1 << (n_qubits - 1 - qubit)
}

fn apply_ry(amps: &mut [f64], n_qubits: usize, qubit: usize, theta: f64) {
    let (s, c) = (0.5 * theta).sin_cos();
    let step = stride(n_qubits, qubit);
    for base in (0..amps.len()).step_by(2 * step) {
        for k in base..base + step {
            let a0 = amps[k];
            let a1 = amps[k + step];
            amps[k] = c * a0 - s * a1;
            amps[k + step] = s * a0 + c * a1;
        }
    }
}

fn apply_cnot(amps: &mut [f64], n_qubits: usize, control: usize, target: usize) {
    let cmask = stride(n_qubits, control);
    let tmask = stride(n_qubits, target);
    for i in 0..amps.len() {
        if i & cmask != 0 && i & tmask == 0 {
            amps.swap(i, i | tmask);
        }
    }
}

/// `⟨bra| dR_y(θ)/dθ |ket⟩` on one qubit.
fn ry_derivative_overlap(bra: &[f64], ket: &[f64], n_qubits: usize, qubit: usize, theta: f64) -> f64 {
    let (s, c) = (0.5 * theta).sin_cos();
    let step = stride(n_qubits, qubit);
    let mut acc = 0.0;
    for base in (0..ket.len()).step_by(2 * step) {
        for k in base..base + step {
            let a0 = ket[k];
            let a1 = ket[k + step];
            let d0 = -s * a0 - c * a1;
            let d1 = c * a0 - s * a1;
            acc += bra[k] * d0 + bra[k + step] * d1;
        }
    }
    0.5 * acc
}

fn run_gates(amps: &mut [f64], n_qubits: usize, gates: &[Gate], angles: &[f64]) {
    for gate in gates {
        match *gate {
            Gate::Ry { qubit, angle } => apply_ry(amps, n_qubits, qubit, angles[angle]),
            Gate::Cnot { control, target } => apply_cnot(amps, n_qubits, control, target),
        }
    }
}

fn check_shape(n_qubits: usize, layers: usize, angles: &[f64]) -> Result<()> {
    if n_qubits == 0 {
        return Err(config_err!("a sub-circuit needs at least one qubit"));
    }
    if n_qubits >= usize::BITS as usize - 1 {
        return Err(config_err!("{n_qubits} qubits cannot be simulated"));
    }
    if angles.len() != layers * n_qubits {
        return Err(config_err!(
            "angles have length {} but {layers} layers x {n_qubits} qubits needs {}",
            angles.len(),
            layers * n_qubits
        ));
    }
    Ok(())
}

/// Simulates one sub-circuit from |0…0⟩.
pub fn simulate_subcircuit(n_qubits: usize, layers: usize, angles: &[f64]) -> Result<StateVector> {
    check_shape(n_qubits, layers, angles)?;
    let mut state = StateVector::zero_state(n_qubits);
    run_gates(
        &mut state.amplitudes,
        n_qubits,
        &ansatz_gates(n_qubits, layers, 0),
        angles,
    );
    Ok(state)
}

pub fn probabilities(state: &StateVector) -> ProbVector {
    ProbVector {
        n_qubits: state.n_qubits,
        probs: state.amplitudes.iter().map(|a| a * a).collect(),
        order: BitOrder::MsbFirst,
    }
}

/// Kronecker product of sub-circuit distributions, first factor most significant.
pub fn combine_distributed(sub_probs: &[ProbVector]) -> Result<ProbVector> {
    let (first, rest) = sub_probs
        .split_first()
        .ok_or_else(|| config_err!("cannot combine an empty list of distributions"))?;
    let mut probs = first.probs.clone();
    for factor in rest {
        let mut next = Vec::with_capacity(probs.len() * factor.probs.len());
        for &a in &probs {
            next.extend(factor.probs.iter().map(|&b| a * b));
        }
        probs = next;
    }
    Ok(ProbVector {
        n_qubits: sub_probs.iter().map(|p| p.n_qubits).sum(),
        probs,
        order: BitOrder::MsbFirst,
    })
}

/// Pulls a gradient with respect to the combined distribution back onto each
/// Kronecker factor.
///
/// `upstream` may be shorter than the combined distribution; missing trailing
/// entries are zero. Only the supplied prefix is visited.
pub fn kron_backward(sub_probs: &[ProbVector], upstream: &[f64]) -> Result<Vec<Vec<f64>>> {
    if sub_probs.is_empty() {
        return Err(config_err!("cannot differentiate an empty Kronecker product"));
    }
    let total: usize = sub_probs.iter().map(|p| p.len()).product();
    if upstream.len() > total {
        return Err(config_err!(
            "upstream gradient has length {} but the combined distribution has {total} entries",
            upstream.len()
        ));
    }
    let k = sub_probs.len();
    let mut grads: Vec<Vec<f64>> = sub_probs.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut digits = vec![0usize; k];
    let mut factors = vec![0.0; k];
    for (index, &g) in upstream.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let mut rem = index;
        for j in (0..k).rev() {
            let len = sub_probs[j].len();
            digits[j] = rem % len;
            rem /= len;
            factors[j] = sub_probs[j].probs[digits[j]];
        }
        for j in 0..k {
            let others: f64 = (0..k).filter(|&l| l != j).map(|l| factors[l]).product();
            grads[j][digits[j]] += g * others;
        }
    }
    Ok(grads)
}

/// Simulates every sub-circuit of `spec` inside one register of
/// `spec.total_qubits()` qubits, with no gate crossing register boundaries.
pub fn simulate_registers(spec: &CircuitSpec, theta: &ThetaParams) -> Result<StateVector> {
    if theta.splits != spec.splits || theta.layers != spec.layers {
        return Err(config_err!("angles were built for a different circuit geometry"));
    }
    check_shape(spec.total_qubits, spec.layers, theta.as_slice())?;
    let n = spec.total_qubits;
    let mut state = StateVector::zero_state(n);
    for (j, (&nj, offset)) in spec.splits.iter().zip(spec.offsets()).enumerate() {
        run_gates(
            &mut state.amplitudes,
            n,
            &ansatz_gates(nj, spec.layers, offset),
            theta.block(j),
        );
    }
    Ok(state)
}

/// Per-sub-circuit distributions and their Kronecker combination.
pub fn simulate_distributed(
    spec: &CircuitSpec,
    theta: &ThetaParams,
) -> Result<(Vec<ProbVector>, ProbVector)> {
    if theta.splits != spec.splits || theta.layers != spec.layers {
        return Err(config_err!("angles were built for a different circuit geometry"));
    }
    let subs = spec
        .splits
        .iter()
        .enumerate()
        .map(|(j, &nj)| simulate_subcircuit(nj, spec.layers, theta.block(j)).map(|s| probabilities(&s)))
        .collect::<Result<Vec<_>>>()?;
    let combined = combine_distributed(&subs)?;
    Ok((subs, combined))
}

fn check_upstream(n_qubits: usize, upstream: &[f64]) -> Result<()> {
    if upstream.len() != 1 << n_qubits {
        return Err(config_err!(
            "upstream gradient has length {} but {n_qubits} qubits give {} probabilities",
            upstream.len(),
            1usize << n_qubits
        ));
    }
    Ok(())
}

/// Gradient of `Σ_i upstream[i] · p_i(θ)` by a single reverse sweep.
///
/// Every gate is real orthogonal, so stepping backwards applies transposes:
/// R_y(θ)ᵀ = R_y(−θ) and CNOT is its own inverse.
pub fn adjoint_gradient(
    n_qubits: usize,
    layers: usize,
    angles: &[f64],
    upstream: &[f64],
) -> Result<Vec<f64>> {
    check_shape(n_qubits, layers, angles)?;
    check_upstream(n_qubits, upstream)?;
    let gates = ansatz_gates(n_qubits, layers, 0);
    let mut psi = StateVector::zero_state(n_qubits).amplitudes;
    run_gates(&mut psi, n_qubits, &gates, angles);

    // λ = ∂Loss/∂ψ
    let mut lambda: Vec<f64> = psi
        .iter()
        .zip(upstream)
        .map(|(a, u)| 2.0 * u * a)
        .collect();
    let mut grad = vec![0.0; angles.len()];
    for gate in gates.iter().rev() {
        match *gate {
            Gate::Ry { qubit, angle } => {
                let theta = angles[angle];
                apply_ry(&mut psi, n_qubits, qubit, -theta);
                grad[angle] = ry_derivative_overlap(&lambda, &psi, n_qubits, qubit, theta);
                apply_ry(&mut lambda, n_qubits, qubit, -theta);
            }
            Gate::Cnot { control, target } => {
                apply_cnot(&mut psi, n_qubits, control, target);
                apply_cnot(&mut lambda, n_qubits, control, target);
            }
        }
    }
    Ok(grad)
}

fn weighted_probability(n_qubits: usize, layers: usize, angles: &[f64], upstream: &[f64]) -> Result<f64> {
    let state = simulate_subcircuit(n_qubits, layers, angles)?;
    Ok(state
        .amplitudes
        .iter()
        .zip(upstream)
        .map(|(a, u)| u * a * a)
        .sum())
}

/// Same quantity as [`adjoint_gradient`] from two shifted evaluations per
/// angle: `∂f/∂θ = (f(θ + π/2) − f(θ − π/2)) / 2`, exact for R_y.
pub fn parameter_shift_gradient(
    n_qubits: usize,
    layers: usize,
    angles: &[f64],
    upstream: &[f64],
) -> Result<Vec<f64>> {
    check_shape(n_qubits, layers, angles)?;
    check_upstream(n_qubits, upstream)?;
    let mut shifted = angles.to_vec();
    let mut grad = Vec::with_capacity(angles.len());
    for k in 0..angles.len() {
        shifted[k] = angles[k] + FRAC_PI_2;
        let plus = weighted_probability(n_qubits, layers, &shifted, upstream)?;
        shifted[k] = angles[k] - FRAC_PI_2;
        let minus = weighted_probability(n_qubits, layers, &shifted, upstream)?;
        shifted[k] = angles[k];
        grad.push(0.5 * (plus - minus));
    }
    Ok(grad)
}

/// Central finite differences of `Σ_i upstream[i] · p_i(θ)`.
pub fn finite_difference_gradient(
    n_qubits: usize,
    layers: usize,
    angles: &[f64],
    upstream: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    check_shape(n_qubits, layers, angles)?;
    check_upstream(n_qubits, upstream)?;
    let mut shifted = angles.to_vec();
    let mut grad = Vec::with_capacity(angles.len());
    for k in 0..angles.len() {
        shifted[k] = angles[k] + h;
        let plus = weighted_probability(n_qubits, layers, &shifted, upstream)?;
        shifted[k] = angles[k] - h;
        let minus = weighted_probability(n_qubits, layers, &shifted, upstream)?;
        shifted[k] = angles[k];
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

//! Self-check suites runnable from the command line.
//!
//! Each check draws seeded random instances, compares a production code path
//! against an independent reference and records the worst deviation seen.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::OptimizerConfig;
use crate::error::{Error, Result};
use crate::mapping::{
    contract_dense, dense_oracle, feature_map, mapping_backprop, mps_contract, Mapping, MappingInput,
    MlpMapping, MpsMapping,
};
use crate::qnn::{
    adjoint_gradient, combine_distributed, finite_difference_gradient, parameter_shift_gradient, probabilities,
    simulate_distributed, simulate_registers, CircuitSpec, ThetaParams,
};
use crate::target::{assign_weights, Activation, Batch, LayerSpec, TargetNetworkSpec};
use crate::trainer::TrainState;

pub const DISTRIBUTED_INSTANCES: usize = 500;
pub const MPS_ORACLE_INSTANCES: usize = 200;
pub const GRADIENT_INSTANCES: usize = 100;

pub const DISTRIBUTED_TOL: f64 = 1e-12;
pub const MPS_ORACLE_TOL: f64 = 1e-10;
pub const ADJOINT_SHIFT_TOL: f64 = 1e-10;
pub const QNN_FD_REL_TOL: f64 = 1e-6;
pub const CLASSICAL_FD_REL_TOL: f64 = 1e-5;
pub const END_TO_END_REL_TOL: f64 = 1e-4;

/// Denominator floor of [`relative_error`].
pub const RELATIVE_FLOOR: f64 = 1e-8;
/// Step for QNN, target-network and end-to-end finite differences.
pub const FD_STEP: f64 = 1e-5;
/// Step for mapping finite differences.
pub const MAPPING_FD_STEP: f64 = 1e-6;
/// Instances closer than this to a ReLU or clamp kink are redrawn.
const KINK_MARGIN: f64 = 1e-3;

/// `max|a − b| / max(max|b|, 1e-8)` over whole vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "compared vectors differ in length");
    let num = max_abs_diff(a, b);
    let den = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(RELATIVE_FLOOR);
    num / den
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "compared vectors differ in length");
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gradients,
    Distributed,
    MpsOracle,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradients" => Ok(Suite::Gradients),
            "distributed" => Ok(Suite::Distributed),
            "mps-oracle" => Ok(Suite::MpsOracle),
            "all" => Ok(Suite::All),
            other => Err(Error::Config(format!(
                "unknown suite {other:?}; expected gradients, distributed, mps-oracle or all"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tolerance {
    Absolute,
    Relative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub kind: Tolerance,
    pub elapsed_ms: u128,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_deviation <= self.tolerance
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            Tolerance::Absolute => "abs",
            Tolerance::Relative => "rel",
        };
        write!(
            f,
            "{} {:<24} instances={:<4} max_dev={:.3e} tol={:.0e} ({kind}) {}ms",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.max_deviation,
            self.tolerance,
            self.elapsed_ms
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Perturbs every candidate value so that the checks must fail; used to
    /// confirm the harness can report failure.
    pub inject_fault: bool,
}

struct Runner {
    opts: VerifyOptions,
    report: SuiteReport,
}

impl Runner {
    fn rng(&self, salt: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.opts.seed);
        rng.set_stream(salt);
        rng
    }

    fn taint(&self, v: &mut [f64]) {
        if self.opts.inject_fault {
            if let Some(x) = v.first_mut() {
                *x += 1e-3;
            }
        }
    }

    fn record<F>(&mut self, name: &'static str, instances: usize, tolerance: f64, kind: Tolerance, body: F) -> Result<()>
    where
        F: FnOnce(&Self) -> Result<f64>,
    {
        let start = Instant::now();
        let max_deviation = body(self)?;
        self.report.checks.push(CheckResult {
            name,
            instances,
            max_deviation,
            tolerance,
            kind,
            elapsed_ms: start.elapsed().as_millis(),
        });
        Ok(())
    }
}

pub fn run_suite(suite: Suite, opts: VerifyOptions) -> Result<SuiteReport> {
    let mut runner = Runner { opts, report: SuiteReport::default() };
    if matches!(suite, Suite::Distributed | Suite::All) {
        distributed_checks(&mut runner)?;
    }
    if matches!(suite, Suite::MpsOracle | Suite::All) {
        mps_oracle_checks(&mut runner)?;
    }
    if matches!(suite, Suite::Gradients | Suite::All) {
        gradient_checks(&mut runner)?;
    }
    Ok(runner.report)
}

fn random_angles<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)).collect()
}

fn random_vec<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Random composition of `n` into at least two parts when `n ≥ 2`.
fn random_splits<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    if n == 1 {
        return vec![1];
    }
    let parts = rng.random_range(2..=n.min(4));
    let mut cuts: Vec<usize> = Vec::new();
    while cuts.len() < parts - 1 {
        let c = rng.random_range(1..n);
        if !cuts.contains(&c) {
            cuts.push(c);
        }
    }
    cuts.sort_unstable();
    cuts.push(n);
    let mut prev = 0;
    cuts.into_iter()
        .map(|c| {
            let part = c - prev;
            prev = c;
            part
        })
        .collect()
}

fn distributed_checks(r: &mut Runner) -> Result<()> {
    r.record("distributed-equivalence", DISTRIBUTED_INSTANCES, DISTRIBUTED_TOL, Tolerance::Absolute, |r| {
        let mut rng = r.rng(1);
        let mut worst = 0.0f64;
        for _ in 0..DISTRIBUTED_INSTANCES {
            let n = rng.random_range(2..=12);
            let spec = CircuitSpec::new(random_splits(&mut rng, n), rng.random_range(1..=8))?;
            let theta = ThetaParams::from_flat(&spec, random_angles(&mut rng, spec.theta_count()))?;
            let (subs, _) = simulate_distributed(&spec, &theta)?;
            let mut combined = combine_distributed(&subs)?.probs().to_vec();
            r.taint(&mut combined);
            let mono = probabilities(&simulate_registers(&spec, &theta)?);
            worst = worst.max(max_abs_diff(&combined, mono.probs()));
        }
        Ok(worst)
    })
}

fn mps_oracle_checks(r: &mut Runner) -> Result<()> {
    r.record("mps-dense-oracle", MPS_ORACLE_INSTANCES, MPS_ORACLE_TOL, Tolerance::Absolute, |r| {
        let mut rng = r.rng(2);
        let mut worst = 0.0f64;
        for _ in 0..MPS_ORACLE_INSTANCES {
            let sites = rng.random_range(2..=8);
            let bond = rng.random_range(1..=4);
            let mps = MpsMapping::init(sites, bond, &mut rng)?;
            let dense = dense_oracle(&mps)?;
            for _ in 0..4 {
                let coords: Vec<f64> = (0..sites).map(|_| rng.random_range(0.0..=1.0)).collect();
                let f = feature_map(&MappingInput::new(coords)?)?;
                let mut got = [mps_contract(&mps, &f)?];
                r.taint(&mut got);
                worst = worst.max((got[0] - contract_dense(&dense, &f)?).abs());
            }
        }
        Ok(worst)
    })
}

fn gradient_checks(r: &mut Runner) -> Result<()> {
    qnn_gradient_checks(r)?;
    mapping_gradient_checks(r, "mps-backprop-vs-fd", 4, |rng, sites| {
        let bond = rng.random_range(1..=3);
        Ok(Mapping::Mps(MpsMapping::gaussian(sites, bond, 0.7, rng)?))
    })?;
    mapping_gradient_checks(r, "mlp-backprop-vs-fd", 5, |rng, sites| {
        let hidden = rng.random_range(1..=6);
        let mut mlp = MlpMapping::init(sites, hidden, rng)?;
        mlp.set_output_bias(rng.random_range(-0.5..0.5));
        Ok(Mapping::Mlp(mlp))
    })?;
    target_gradient_checks(r)?;
    end_to_end_checks(r)
}

fn qnn_instance(rng: &mut ChaCha8Rng) -> (usize, usize, Vec<f64>, Vec<f64>) {
    let n = rng.random_range(1..=6);
    let layers = rng.random_range(1..=4);
    let angles = random_angles(rng, n * layers);
    let upstream = random_vec(rng, 1 << n);
    (n, layers, angles, upstream)
}

fn qnn_gradient_checks(r: &mut Runner) -> Result<()> {
    r.record("qnn-adjoint-vs-shift", GRADIENT_INSTANCES, ADJOINT_SHIFT_TOL, Tolerance::Absolute, |r| {
        let mut rng = r.rng(3);
        let mut worst = 0.0f64;
        for _ in 0..GRADIENT_INSTANCES {
            let (n, l, angles, up) = qnn_instance(&mut rng);
            let mut adj = adjoint_gradient(n, l, &angles, &up)?;
            r.taint(&mut adj);
            worst = worst.max(max_abs_diff(&adj, &parameter_shift_gradient(n, l, &angles, &up)?));
        }
        Ok(worst)
    })?;
    r.record("qnn-adjoint-vs-fd", GRADIENT_INSTANCES, QNN_FD_REL_TOL, Tolerance::Relative, |r| {
        let mut rng = r.rng(3);
        let mut worst = 0.0f64;
        for _ in 0..GRADIENT_INSTANCES {
            let (n, l, angles, up) = qnn_instance(&mut rng);
            let mut adj = adjoint_gradient(n, l, &angles, &up)?;
            r.taint(&mut adj);
            let fd = finite_difference_gradient(n, l, &angles, &up, FD_STEP)?;
            worst = worst.max(relative_error(&adj, &fd));
        }
        Ok(worst)
    })?;
    r.record("qnn-shift-vs-fd", GRADIENT_INSTANCES, QNN_FD_REL_TOL, Tolerance::Relative, |r| {
        let mut rng = r.rng(3);
        let mut worst = 0.0f64;
        for _ in 0..GRADIENT_INSTANCES {
            let (n, l, angles, up) = qnn_instance(&mut rng);
            let mut shift = parameter_shift_gradient(n, l, &angles, &up)?;
            r.taint(&mut shift);
            let fd = finite_difference_gradient(n, l, &angles, &up, FD_STEP)?;
            worst = worst.max(relative_error(&shift, &fd));
        }
        Ok(worst)
    })
}

fn weighted_output(mapping: &Mapping, inputs: &[MappingInput], upstream: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (x, u) in inputs.iter().zip(upstream) {
        total += u * mapping.forward(x)?;
    }
    Ok(total)
}

/// Checks parameter and probability-coordinate gradients of `Σ u_i ω_i`.
fn mapping_gradient_checks<F>(r: &mut Runner, name: &'static str, salt: u64, make: F) -> Result<()>
where
    F: Fn(&mut ChaCha8Rng, usize) -> Result<Mapping>,
{
    r.record(name, GRADIENT_INSTANCES, CLASSICAL_FD_REL_TOL, Tolerance::Relative, |r| {
        let mut rng = r.rng(salt);
        let mut worst = 0.0f64;
        let h = MAPPING_FD_STEP;
        for _ in 0..GRADIENT_INSTANCES {
            let n = rng.random_range(1..=5);
            let mut mapping = make(&mut rng, n + 1)?;
            let m = rng.random_range(1..=(1usize << n));
            let inputs = (0..m)
                .map(|i| MappingInput::from_basis(i, n, rng.random_range(0.05..0.95)))
                .collect::<Result<Vec<_>>>()?;
            let upstream = random_vec(&mut rng, m);
            let grads = mapping_backprop(&mapping, &inputs, &upstream)?;

            let mut fd = Vec::with_capacity(mapping.params().len());
            for k in 0..mapping.params().len() {
                let orig = mapping.params()[k];
                mapping.params_mut()[k] = orig + h;
                let plus = weighted_output(&mapping, &inputs, &upstream)?;
                mapping.params_mut()[k] = orig - h;
                let minus = weighted_output(&mapping, &inputs, &upstream)?;
                mapping.params_mut()[k] = orig;
                fd.push((plus - minus) / (2.0 * h));
            }
            let mut analytic = grads.params.clone();
            r.taint(&mut analytic);
            worst = worst.max(relative_error(&analytic, &fd));

            let mut fd_coord = Vec::with_capacity(m);
            for (i, x) in inputs.iter().enumerate() {
                let mut c = x.coords().to_vec();
                let last = c.len() - 1;
                let orig = c[last];
                c[last] = orig + h;
                let plus = mapping.forward(&MappingInput::new(c.clone())?)?;
                c[last] = orig - h;
                let minus = mapping.forward(&MappingInput::new(c)?)?;
                fd_coord.push(upstream[i] * (plus - minus) / (2.0 * h));
            }
            worst = worst.max(relative_error(&grads.prob_coord, &fd_coord));
        }
        Ok(worst)
    })
}

fn random_target(rng: &mut ChaCha8Rng) -> TargetNetworkSpec {
    if rng.random_bool(0.5) {
        let d = rng.random_range(1..=6);
        let h = rng.random_range(1..=6);
        let c = rng.random_range(2..=4);
        TargetNetworkSpec {
            input_shape: [1, 1, d],
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: d, outputs: h, activation: Some(Activation::Relu) },
                LayerSpec::Dense { inputs: h, outputs: c, activation: None },
            ],
            class_count: c,
        }
    } else {
        // 5x5 → conv k2 → 4x4 → pool 2 → 2x2 → dense
        let ch = rng.random_range(1..=2);
        let c = rng.random_range(2..=3);
        TargetNetworkSpec {
            input_shape: [1, 5, 5],
            layers: vec![
                LayerSpec::Conv2d { in_channels: 1, out_channels: ch, kernel: 2, stride: 1, activation: None },
                LayerSpec::MaxPool { kernel: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: ch * 4, outputs: c, activation: None },
            ],
            class_count: c,
        }
    }
}

fn random_examples(rng: &mut ChaCha8Rng, len: usize, classes: usize, count: usize) -> (Vec<Vec<f32>>, Vec<usize>) {
    let inputs = (0..count).map(|_| (0..len).map(|_| rng.random_range(0.0f32..1.0)).collect()).collect();
    let labels = (0..count).map(|_| rng.random_range(0..classes)).collect();
    (inputs, labels)
}

fn batch_of<'a>(inputs: &'a [Vec<f32>], labels: &[usize]) -> Batch<'a> {
    Batch { inputs: inputs.iter().map(Vec::as_slice).collect(), labels: labels.to_vec() }
}

fn target_gradient_checks(r: &mut Runner) -> Result<()> {
    r.record("target-backprop-vs-fd", GRADIENT_INSTANCES, CLASSICAL_FD_REL_TOL, Tolerance::Relative, |r| {
        let mut rng = r.rng(6);
        let mut worst = 0.0f64;
        let mut done = 0;
        while done < GRADIENT_INSTANCES {
            let spec = random_target(&mut rng);
            let m = crate::target::param_count(&spec)?;
            let mut omega: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (inputs, labels) = random_examples(&mut rng, spec.input_len(), spec.class_count, 3);
            let batch = batch_of(&inputs, &labels);
            let net = assign_weights(&spec, &crate::mapping::WeightVector(omega.clone()))?;
            if net.relu_margin(&batch) < KINK_MARGIN {
                continue;
            }
            let mut analytic = net.backward(&batch)?;
            let mut fd = Vec::with_capacity(m);
            for k in 0..m {
                let orig = omega[k];
                omega[k] = orig + FD_STEP;
                let plus = loss_of(&spec, &omega, &batch)?;
                omega[k] = orig - FD_STEP;
                let minus = loss_of(&spec, &omega, &batch)?;
                omega[k] = orig;
                fd.push((plus - minus) / (2.0 * FD_STEP));
            }
            r.taint(&mut analytic);
            worst = worst.max(relative_error(&analytic, &fd));
            done += 1;
        }
        Ok(worst)
    })
}

fn loss_of(spec: &TargetNetworkSpec, omega: &[f64], batch: &Batch) -> Result<f64> {
    Ok(assign_weights(spec, &crate::mapping::WeightVector(omega.to_vec()))?.forward_loss(batch)?.loss)
}

/// Micro end-to-end geometries: (splits, layers, mapping, hidden target layer, prob_scale).
fn micro_state(rng: &mut ChaCha8Rng, variant: usize) -> Result<TrainState> {
    let dense = |inputs, outputs, activation| LayerSpec::Dense { inputs, outputs, activation };
    let small = TargetNetworkSpec {
        input_shape: [1, 1, 2],
        layers: vec![LayerSpec::Flatten, dense(2, 3, None)],
        class_count: 3,
    };
    let hidden = TargetNetworkSpec {
        input_shape: [1, 1, 2],
        layers: vec![LayerSpec::Flatten, dense(2, 2, Some(Activation::Relu)), dense(2, 2, None)],
        class_count: 2,
    };
    let (splits, layers, target, prob_scale) = match variant % 4 {
        0 => (vec![2, 2], 2, small, true),
        1 => (vec![2, 2], 2, small, false),
        2 => (vec![1, 3], 3, hidden, true),
        _ => (vec![4], 2, hidden, true),
    };
    let circuit = CircuitSpec::new(splits, layers)?;
    let theta = ThetaParams::from_flat(&circuit, random_angles(rng, circuit.theta_count()))?;
    let sites = circuit.total_qubits() + 1;
    let mapping = if variant % 8 < 4 {
        Mapping::Mps(MpsMapping::init(sites, 2, rng)?)
    } else {
        Mapping::Mlp(MlpMapping::init(sites, 3, rng)?)
    };
    TrainState::new(circuit, theta, mapping, target, OptimizerConfig::default(), prob_scale, 0)
}

/// True when some scaled probability sits near the clamp at 1.
fn near_clamp(state: &TrainState) -> Result<bool> {
    if !state.prob_scale() {
        return Ok(false);
    }
    let (_, combined) = simulate_distributed(state.circuit(), state.theta())?;
    let scale = (state.circuit().total_qubits() as f64).exp2();
    Ok(combined.probs()[..state.m()].iter().any(|p| (p * scale - 1.0).abs() < KINK_MARGIN))
}

fn end_to_end_checks(r: &mut Runner) -> Result<()> {
    r.record("end-to-end-vs-fd", GRADIENT_INSTANCES, END_TO_END_REL_TOL, Tolerance::Relative, |r| {
        let mut rng = r.rng(7);
        let mut worst = 0.0f64;
        let mut done = 0;
        while done < GRADIENT_INSTANCES {
            let mut state = micro_state(&mut rng, done)?;
            let (inputs, labels) = random_examples(&mut rng, 2, state.target().class_count, 4);
            let batch = batch_of(&inputs, &labels);
            let net = assign_weights(state.target(), &state.generate_full_weights()?)?;
            if near_clamp(&state)? || net.relu_margin(&batch) < KINK_MARGIN {
                continue;
            }
            let grads = state.gradients(&batch)?;
            let mut analytic = grads.theta.clone();
            analytic.extend(&grads.mapping);

            let mut fd = Vec::with_capacity(analytic.len());
            for k in 0..state.theta().len() {
                let orig = state.theta().as_slice()[k];
                state.theta_mut().as_mut_slice()[k] = orig + FD_STEP;
                let plus = state.evaluate(&batch)?.loss;
                state.theta_mut().as_mut_slice()[k] = orig - FD_STEP;
                let minus = state.evaluate(&batch)?.loss;
                state.theta_mut().as_mut_slice()[k] = orig;
                fd.push((plus - minus) / (2.0 * FD_STEP));
            }
            for k in 0..state.mapping().params().len() {
                let orig = state.mapping().params()[k];
                state.mapping_mut().params_mut()[k] = orig + FD_STEP;
                let plus = state.evaluate(&batch)?.loss;
                state.mapping_mut().params_mut()[k] = orig - FD_STEP;
                let minus = state.evaluate(&batch)?.loss;
                state.mapping_mut().params_mut()[k] = orig;
                fd.push((plus - minus) / (2.0 * FD_STEP));
            }
            r.taint(&mut analytic);
            worst = worst.max(relative_error(&analytic, &fd));
            done += 1;
        }
        Ok(worst)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floors_the_denominator() {
        assert_eq!(relative_error(&[1e-9], &[0.0]), 1e-9 / RELATIVE_FLOOR);
        assert!((relative_error(&[1.1, 2.0], &[1.0, -2.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn random_splits_cover_the_register() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in 1..=12 {
            for _ in 0..20 {
                let s = random_splits(&mut rng, n);
                assert_eq!(s.iter().sum::<usize>(), n);
                assert!(s.iter().all(|&p| p > 0));
            }
        }
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!("mps-oracle".parse::<Suite>().unwrap(), Suite::MpsOracle);
        assert!("bogus".parse::<Suite>().is_err());
    }
}

//! Workload-independent NDV estimation: frequency-profile features, a
//! synthetic training-set generator over known-NDV populations, a dense
//! feed-forward network trained with hand-rolled backprop and adaptive
//! per-parameter moments, and per-column calibration overrides.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CardError, Result};
use crate::exec;
use crate::util::{now_secs, split_seed, Matrix};

pub const DEFAULT_PROFILE_LEN: usize = 100;

/// f[i] counts distinct values occurring exactly i+1 times in the sample;
/// multiplicities above K accumulate into the last slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyProfile {
    pub f: Vec<u64>,
    /// Sample size.
    pub n: u64,
    /// Population size the sample was drawn from.
    pub population: u64,
}

impl FrequencyProfile {
    pub fn sample_ndv(&self) -> u64 {
        self.f.iter().sum()
    }
}

pub fn frequency_profile(values: &[u64], k: usize, population: u64) -> Result<FrequencyProfile> {
    if values.is_empty() {
        return Err(CardError::Invalid("frequency profile needs at least one value".into()));
    }
    if k == 0 {
        return Err(CardError::Invalid("profile length must be >= 1".into()));
    }
    let n = values.len() as u64;
    if population < n {
        return Err(CardError::Invalid(format!(
            "population {population} smaller than sample {n}"
        )));
    }
    let mut mult: HashMap<u64, u64> = HashMap::with_capacity(values.len());
    for &v in values {
        *mult.entry(v).or_insert(0) += 1;
    }
    let mut f = vec![0u64; k];
    for m in mult.into_values() {
        let slot = (m as usize).min(k) - 1;
        f[slot] += 1;
    }
    Ok(FrequencyProfile { f, n, population })
}

/// [ln(1+f[0]), ..., ln(1+f[K-1]), ln n, ln N]; length K+2.
pub fn featurize_profile(p: &FrequencyProfile) -> Vec<f64> {
    let mut x: Vec<f64> = p.f.iter().map(|&c| (1.0 + c as f64).ln()).collect();
    x.push((p.n as f64).ln());
    x.push((p.population as f64).ln());
    x
}

// ---------------------------------------------------------------------------
// Dense network
// ---------------------------------------------------------------------------

/// Fully-connected net; rectifier on hidden layers, identity output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub dims: Vec<usize>,
    /// weights[l]: rows = dims[l+1], cols = dims[l]
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl DenseNet {
    pub fn init(dims: &[usize], rng: &mut impl Rng) -> Result<DenseNet> {
        validate_dims(dims)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut w = Matrix::zeros(fan_out, fan_in);
            for v in w.data_mut() {
                *v = rng.random_range(-lim..lim);
            }
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(DenseNet { dims: dims.to_vec(), weights, biases })
    }

    fn zeros_like(&self) -> DenseNet {
        DenseNet {
            dims: self.dims.clone(),
            weights: self.weights.iter().map(|w| Matrix::zeros(w.rows, w.cols)).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len()
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        let mut a = x.to_vec();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z: Vec<f64> = (0..w.rows)
                .map(|r| w.row(r).iter().zip(&a).map(|(wi, ai)| wi * ai).sum::<f64>() + b[r])
                .collect();
            if l != last {
                for v in &mut z {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            a = z;
        }
        a[0]
    }

    /// Pre-activations and activations per layer, for backprop.
    fn forward_trace(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut activations = vec![x.to_vec()];
        let mut pre = Vec::new();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let a = activations.last().unwrap();
            let z: Vec<f64> = (0..w.rows)
                .map(|r| w.row(r).iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>() + b[r])
                .collect();
            pre.push(z.clone());
            let act = if l == last {
                z
            } else {
                z.into_iter().map(|v| if v < 0.0 { 0.0 } else { v }).collect()
            };
            activations.push(act);
        }
        (pre, activations)
    }

    /// Squared-error gradient for one example, scaled by `weight` (the
    /// asymmetric-loss factor). Returns (loss, gradient).
    fn backprop(&self, x: &[f64], y: f64, weight: f64) -> (f64, DenseNet) {
        let (pre, acts) = self.forward_trace(x);
        let y_hat = acts.last().unwrap()[0];
        let err = y_hat - y;
        let loss = weight * err * err;
        let mut grad = self.zeros_like();
        let mut delta = vec![2.0 * weight * err];
        for l in (0..self.weights.len()).rev() {
            let a_prev = &acts[l];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                grad.biases[l][r] += d;
                let row_start = r * grad.weights[l].cols;
                let gw = grad.weights[l].data_mut();
                for (c, &ai) in a_prev.iter().enumerate() {
                    gw[row_start + c] += d * ai;
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.weights[l];
            let mut next = vec![0.0; w.cols];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (c, nv) in next.iter_mut().enumerate() {
                    *nv += w.get(r, c) * d;
                }
            }
            for (c, nv) in next.iter_mut().enumerate() {
                if pre[l - 1][c] <= 0.0 {
                    *nv = 0.0;
                }
            }
            delta = next;
        }
        (loss, grad)
    }

    fn add_assign(&mut self, other: &DenseNet) {
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            for (a, b) in w.data_mut().iter_mut().zip(o.data()) {
                *a += b;
            }
        }
        for (b, o) in self.biases.iter_mut().zip(&other.biases) {
            for (a, v) in b.iter_mut().zip(o) {
                *a += v;
            }
        }
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(CardError::Model("network needs at least input and output layers".into()));
    }
    if *dims.last().unwrap() != 1 {
        return Err(CardError::Model("output dimension must be 1".into()));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(CardError::Model("zero-width layer".into()));
    }
    Ok(())
}

/// Frequency-profile NDV model: base network plus per-column calibrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NdvModel {
    pub k: usize,
    pub net: DenseNet,
    pub version: i64,
    pub calibration_overrides: BTreeMap<String, DenseNet>,
}

pub fn default_layer_dims(k: usize) -> Vec<usize> {
    vec![k + 2, 128, 128, 128, 128, 128, 1]
}

// ---------------------------------------------------------------------------
// Synthetic training data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Uniform,
    Zipf,
    Geometric,
    Mixture,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub k: usize,
    pub families: Vec<Family>,
    pub population_range: (u64, u64),
    pub rates: Vec<f64>,
    pub examples: usize,
    /// Distinct counts are drawn as N^u with u uniform in
    /// [min_distinct_exponent, max_distinct_exponent].
    pub min_distinct_exponent: f64,
    pub max_distinct_exponent: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            k: DEFAULT_PROFILE_LEN,
            families: vec![Family::Uniform, Family::Zipf, Family::Geometric, Family::Mixture],
            population_range: (1_000, 1_000_000),
            rates: vec![0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0],
            examples: 3000,
            min_distinct_exponent: 0.0,
            max_distinct_exponent: 1.0,
        }
    }
}

/// One labelled example: frequency-profile features and ln(true NDV).
pub type Example = (Vec<f64>, f64);

/// Deterministic per-seed synthetic dataset; every example materializes a
/// population with a known distinct count, samples it without replacement,
/// and emits the profile features with the log true NDV as label.
pub fn generate_training_set(cfg: &GeneratorConfig, seed: u64) -> Vec<Example> {
    exec::map_indexed(cfg.examples, |i| generate_example(cfg, split_seed(seed, i as u64)))
}

/// Sequential variant; identical output, used as the bench baseline.
pub fn generate_training_set_seq(cfg: &GeneratorConfig, seed: u64) -> Vec<Example> {
    exec::map_indexed_seq(cfg.examples, |i| generate_example(cfg, split_seed(seed, i as u64)))
}

/// Also expose the drawn ground truth for held-out evaluation.
pub struct EvalCase {
    pub family: Family,
    pub population: u64,
    pub rate: f64,
    pub true_ndv: u64,
    pub profile: FrequencyProfile,
}

pub fn generate_eval_cases(cfg: &GeneratorConfig, seed: u64) -> Vec<EvalCase> {
    exec::map_indexed(cfg.examples, |i| generate_case(cfg, split_seed(seed, i as u64)))
}

fn generate_example(cfg: &GeneratorConfig, seed: u64) -> Example {
    let case = generate_case(cfg, seed);
    (featurize_profile(&case.profile), (case.true_ndv as f64).ln())
}

fn generate_case(cfg: &GeneratorConfig, seed: u64) -> EvalCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let family = cfg.families[rng.random_range(0..cfg.families.len())];
    let (lo, hi) = cfg.population_range;
    let population = {
        let u: f64 = rng.random();
        let ln = (lo as f64).ln() + u * ((hi as f64).ln() - (lo as f64).ln());
        (ln.exp().round() as u64).clamp(lo, hi)
    };
    let rate = cfg.rates[rng.random_range(0..cfg.rates.len())];
    let exponent = if rng.random::<f64>() < 0.1 {
        cfg.max_distinct_exponent
    } else {
        rng.random_range(cfg.min_distinct_exponent..=cfg.max_distinct_exponent)
    };
    let d = ((population as f64).powf(exponent).round() as u64).clamp(1, population);
    let counts = family_counts(family, d, population, &mut rng);

    let mut pool: Vec<u32> = Vec::with_capacity(population as usize);
    for (id, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            pool.push(id as u32);
        }
    }
    let n = ((rate * population as f64).ceil() as usize).clamp(1, pool.len());
    for j in 0..n {
        let swap = rng.random_range(j..pool.len());
        pool.swap(j, swap);
    }
    let sample: Vec<u64> = pool[..n].iter().map(|&v| v as u64).collect();
    let profile = frequency_profile(&sample, cfg.k, population).expect("valid sample");
    EvalCase { family, population, rate, true_ndv: d, profile }
}

/// Integer multiplicities for `d` distinct values summing to `population`,
/// each at least 1, shaped by the family distribution.
fn family_counts(family: Family, d: u64, population: u64, rng: &mut impl Rng) -> Vec<u64> {
    let d = d as usize;
    let weights: Vec<f64> = match family {
        Family::Uniform => vec![1.0; d],
        Family::Zipf => {
            let s = rng.random_range(0.5..=2.0);
            (0..d).map(|i| 1.0 / ((i + 1) as f64).powf(s)).collect()
        }
        Family::Geometric => {
            let p = rng.random_range(0.001..0.4);
            let q = (1.0 - p) as f64;
            let mut w = Vec::with_capacity(d);
            let mut cur = 1.0;
            for _ in 0..d {
                w.push(cur);
                cur *= q;
                if cur < 1e-300 {
                    cur = 1e-300;
                }
            }
            w
        }
        Family::Mixture => {
            // heavy uniform head carrying half the mass, zipf tail
            let head = (d / 50).max(1).min(d);
            let mut w = vec![0.0; d];
            for item in w.iter_mut().take(head) {
                *item = 0.5 / head as f64;
            }
            let tail = d - head;
            if tail > 0 {
                let z: Vec<f64> = (0..tail).map(|i| 1.0 / (i + 1) as f64).collect();
                let zs: f64 = z.iter().sum();
                for (i, zi) in z.into_iter().enumerate() {
                    w[head + i] = 0.5 * zi / zs;
                }
            } else {
                for item in w.iter_mut() {
                    *item += 0.5 / d as f64;
                }
            }
            w
        }
    };
    let total: f64 = weights.iter().sum();
    let mut counts: Vec<u64> = weights
        .iter()
        .map(|w| (((w / total) * population as f64).floor() as u64).max(1))
        .collect();
    let mut sum: u64 = counts.iter().sum();
    // fix-up: land exactly on the population size while keeping counts >= 1
    if sum < population {
        counts[0] += population - sum;
    } else {
        let mut excess = sum - population;
        let mut i = 0;
        while excess > 0 {
            let take = (counts[i] - 1).min(excess);
            counts[i] -= take;
            excess -= take;
            i = (i + 1) % counts.len();
            if take == 0 && counts.iter().all(|&c| c == 1) {
                break;
            }
        }
        sum = counts.iter().sum();
        debug_assert_eq!(sum, population);
    }
    counts
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub layer_dims: Vec<usize>,
    pub step: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Extra penalty multiplier when the model underestimates (y_hat < y).
    pub lambda_under: f64,
    pub plateau_window: usize,
    pub plateau_rel_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            layer_dims: default_layer_dims(DEFAULT_PROFILE_LEN),
            step: 1e-3,
            batch: 64,
            max_epochs: 120,
            seed: 7,
            lambda_under: 1.0,
            plateau_window: 10,
            plateau_rel_tol: 1e-4,
        }
    }
}

struct AdamState {
    m: DenseNet,
    v: DenseNet,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const GRAD_CHUNK: usize = 16;

pub fn train(dataset: &[Example], cfg: &TrainConfig) -> Result<NdvModel> {
    if dataset.is_empty() {
        return Err(CardError::Invalid("training dataset is empty".into()));
    }
    let k = dataset[0].0.len() - 2;
    if cfg.layer_dims[0] != dataset[0].0.len() {
        return Err(CardError::Model(format!(
            "input layer {} does not match feature length {}",
            cfg.layer_dims[0],
            dataset[0].0.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = DenseNet::init(&cfg.layer_dims, &mut rng)?;
    let net = fit(net, dataset, cfg, &mut rng)?;
    Ok(NdvModel { k, net, version: now_secs(), calibration_overrides: BTreeMap::new() })
}

/// Continue training from existing weights; fine-tuning entry point.
pub fn continue_training(
    net: &DenseNet,
    dataset: &[Example],
    cfg: &TrainConfig,
) -> Result<DenseNet> {
    if dataset.is_empty() {
        return Err(CardError::Invalid("training dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    fit(net.clone(), dataset, cfg, &mut rng)
}

fn fit(
    mut net: DenseNet,
    dataset: &[Example],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DenseNet> {
    let mut adam = AdamState { m: net.zeros_like(), v: net.zeros_like(), t: 0 };
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut best = f64::INFINITY;
    let mut stall = 0usize;
    let mut step = cfg.step;
    let step_floor = cfg.step / 64.0;
    for _epoch in 0..cfg.max_epochs {
        for j in 0..order.len() {
            let swap = rng.random_range(j..order.len());
            order.swap(j, swap);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch.max(1)) {
            let (loss, grad) = batch_gradient(&net, dataset, batch, cfg.lambda_under);
            epoch_loss += loss * batch.len() as f64;
            if !loss.is_finite() {
                return Err(CardError::Diverged(
                    "non-finite loss; lower the step size".into(),
                ));
            }
            adam_step(&mut net, &mut adam, &grad, step);
        }
        epoch_loss /= dataset.len() as f64;
        if epoch_loss < best * (1.0 - cfg.plateau_rel_tol) {
            best = epoch_loss;
            stall = 0;
        } else {
            stall += 1;
            // halve the step while the loss stalls; halt at the floor
            if stall >= cfg.plateau_window {
                if step > step_floor {
                    step *= 0.5;
                    stall = 0;
                } else {
                    break;
                }
            }
        }
    }
    Ok(net)
}

/// Mean loss and mean gradient over a batch. Per-example gradients are
/// summed within fixed-size chunks and chunks are merged in index order, so
/// the result is identical with or without the parallel feature.
fn batch_gradient(
    net: &DenseNet,
    dataset: &[Example],
    batch: &[usize],
    lambda_under: f64,
) -> (f64, DenseNet) {
    let chunks: Vec<&[usize]> = batch.chunks(GRAD_CHUNK).collect();
    let partials = exec::map_collect(&chunks, |chunk| {
        let mut grad = net.zeros_like();
        let mut loss = 0.0;
        for &i in chunk.iter() {
            let (x, y) = &dataset[i];
            let y_hat = net.forward(x);
            let w = if y_hat < *y { lambda_under } else { 1.0 };
            let (l, g) = net.backprop(x, *y, w);
            loss += l;
            grad.add_assign(&g);
        }
        (loss, grad)
    });
    let mut total = net.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &partials {
        loss += l;
        total.add_assign(g);
    }
    let scale = 1.0 / batch.len() as f64;
    for w in &mut total.weights {
        for v in w.data_mut() {
            *v *= scale;
        }
    }
    for b in &mut total.biases {
        for v in b {
            *v *= scale;
        }
    }
    (loss * scale, total)
}

fn adam_step(net: &mut DenseNet, state: &mut AdamState, grad: &DenseNet, step: f64) {
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for l in 0..net.weights.len() {
        let (w, m, v, g) = (
            net.weights[l].data_mut(),
            state.m.weights[l].data_mut(),
            state.v.weights[l].data_mut(),
            grad.weights[l].data(),
        );
        for i in 0..w.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            w[i] -= step * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
        }
        let (b, mb, vb, gb) =
            (&mut net.biases[l], &mut state.m.biases[l], &mut state.v.biases[l], &grad.biases[l]);
        for i in 0..b.len() {
            mb[i] = ADAM_BETA1 * mb[i] + (1.0 - ADAM_BETA1) * gb[i];
            vb[i] = ADAM_BETA2 * vb[i] + (1.0 - ADAM_BETA2) * gb[i] * gb[i];
            b[i] -= step * (mb[i] / bc1) / ((vb[i] / bc2).sqrt() + ADAM_EPS);
        }
    }
}

// ---------------------------------------------------------------------------
// Estimation and calibration
// ---------------------------------------------------------------------------

/// Forward pass in ln-space, exponentiated and clamped to
/// [sample NDV, population]. `column_id` selects a calibration override.
pub fn estimate_ndv(
    model: &NdvModel,
    profile: &FrequencyProfile,
    column_id: Option<&str>,
) -> Result<f64> {
    if profile.f.len() != model.k {
        return Err(CardError::Invalid(format!(
            "profile length {} does not match model K {}",
            profile.f.len(),
            model.k
        )));
    }
    let net = column_id
        .and_then(|c| model.calibration_overrides.get(c))
        .unwrap_or(&model.net);
    let y = net.forward(&featurize_profile(profile));
    let lo = profile.sample_ndv().max(1) as f64;
    let hi = profile.population as f64;
    Ok(y.exp().clamp(lo, hi))
}

/// A column flagged by the monitor: raw values (full scan or large sample),
/// its population size, and the exact distinct count.
pub struct ProblemColumn {
    pub id: String,
    pub values: Vec<u64>,
    pub population: u64,
    pub true_ndv: u64,
}

/// The dataset fine-tuning runs on: profiles of the problem columns at
/// several sampling rates, augmented with fresh high-NDV synthetic data.
pub fn calibration_dataset(
    problems: &[ProblemColumn],
    k: usize,
    seed: u64,
) -> Result<Vec<Example>> {
    let mut dataset = Vec::new();
    let rates = [0.005, 0.01, 0.05, 0.1, 0.5, 1.0];
    for (pi, p) in problems.iter().enumerate() {
        let label = (p.true_ndv.max(1) as f64).ln();
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, pi as u64));
        let mut values = p.values.clone();
        for (ri, &r) in rates.iter().enumerate() {
            let n = ((r * values.len() as f64).ceil() as usize).clamp(1, values.len());
            for j in 0..n {
                let swap = rng.random_range(j..values.len());
                values.swap(j, swap);
            }
            let profile = frequency_profile(&values[..n], k, p.population)?;
            dataset.push((featurize_profile(&profile), label));
            let _ = ri;
        }
    }
    let synth_cfg = GeneratorConfig {
        k,
        examples: (dataset.len() * 4).max(200),
        min_distinct_exponent: 0.85,
        max_distinct_exponent: 1.0,
        ..GeneratorConfig::default()
    };
    dataset.extend(generate_training_set(&synth_cfg, split_seed(seed, 0xca11)));
    Ok(dataset)
}

/// Continue training from the base weights with an asymmetric loss and a
/// scaled-down step; the result is stored as a per-column override and the
/// base weights stay untouched.
pub fn fine_tune(
    model: &NdvModel,
    problems: &[ProblemColumn],
    lambda: f64,
    step_scale: f64,
    cfg: &TrainConfig,
) -> Result<NdvModel> {
    if problems.is_empty() {
        return Err(CardError::Invalid("empty problem set".into()));
    }
    if lambda < 1.0 {
        return Err(CardError::Invalid("underestimation penalty must be >= 1".into()));
    }
    if !(step_scale > 0.0 && step_scale <= 1.0) {
        return Err(CardError::Invalid("step_scale must be in (0, 1]".into()));
    }
    let dataset = calibration_dataset(problems, model.k, cfg.seed)?;
    let tuned_cfg = TrainConfig {
        step: cfg.step * step_scale,
        lambda_under: lambda,
        layer_dims: model.net.dims.clone(),
        ..cfg.clone()
    };
    let tuned = continue_training(&model.net, &dataset, &tuned_cfg)?;
    let mut out = model.clone();
    for p in problems {
        out.calibration_overrides.insert(p.id.clone(), tuned.clone());
    }
    out.version = now_secs();
    Ok(out)
}

/// Analytic-vs-central-difference gradient comparison. Returns the maximum
/// relative error per layer over `coords_per_layer` sampled weight
/// coordinates.
pub fn gradient_check(
    net: &DenseNet,
    x: &[f64],
    y: f64,
    lambda_under: f64,
    coords_per_layer: usize,
    seed: u64,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y_hat = net.forward(x);
    let w = if y_hat < y { lambda_under } else { 1.0 };
    let (_, grad) = net.backprop(x, y, w);
    let mut per_layer = Vec::new();
    for l in 0..net.weights.len() {
        let mut worst = 0.0f64;
        let len = net.weights[l].data().len();
        for _ in 0..coords_per_layer {
            let i = rng.random_range(0..len);
            let mut plus = net.clone();
            let mut minus = net.clone();
            let h = 1e-5;
            plus.weights[l].data_mut()[i] += h;
            minus.weights[l].data_mut()[i] -= h;
            let loss_at = |n: &DenseNet| {
                let e = n.forward(x) - y;
                w * e * e
            };
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let analytic = grad.weights[l].data()[i];
            let denom = numeric.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max((numeric - analytic).abs() / denom);
        }
        per_layer.push(worst);
    }
    per_layer
}

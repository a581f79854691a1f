//! Seeded multivariate sinusoid generator with labeled anomaly injection.
//!
//! Each variable is `offset + a1 sin(2 pi t / p1 + f1) + a2 sin(2 pi t / p2 + f2)`
//! plus Gaussian noise. Three anomaly kinds can be injected:
//!
//! * `point`: additive spike of `magnitude` standard deviations, pushed away
//!   from the variable mean so it leaves the normal range (default 3).
//! * `contextual`: the segment is replayed at `1 + magnitude` times the normal
//!   speed and clamped into the clean range (default 1, i.e. doubled frequency).
//! * `collective`: the segment is held at `min + magnitude * (max - min)` of
//!   the clean range (default 0.5).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::{DataError, RawSeries, Result};

pub const DEFAULT_BENCHMARK_SPEC: &str = include_str!("../../assets/benchmark_spec.toml");

const DEFAULT_NOISE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    Point,
    Contextual,
    Collective,
}

impl AnomalyKind {
    pub fn default_magnitude(self) -> f64 {
        match self {
            AnomalyKind::Point => 3.0,
            AnomalyKind::Contextual => 1.0,
            AnomalyKind::Collective => 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalySegment {
    pub kind: AnomalyKind,
    pub start: usize,
    pub length: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnitude: Option<f64>,
}

impl AnomalySegment {
    pub fn end(&self) -> usize {
        self.start + self.length
    }

    pub fn magnitude(&self) -> f64 {
        self.magnitude.unwrap_or_else(|| self.kind.default_magnitude())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub segments: Vec<AnomalySegment>,
}

impl AnomalySpec {
    /// Rejects empty, out-of-range, and overlapping segments.
    pub fn validate(&self, n_points: usize) -> Result<()> {
        let mut sorted: Vec<&AnomalySegment> = self.segments.iter().collect();
        sorted.sort_by_key(|s| s.start);
        for s in &sorted {
            if s.length == 0 {
                return Err(DataError::Spec(format!("segment at {} has zero length", s.start)));
            }
            if s.end() > n_points {
                return Err(DataError::Spec(format!(
                    "segment {}..{} exceeds series length {n_points}",
                    s.start,
                    s.end()
                )));
            }
            let m = s.magnitude();
            if !m.is_finite() {
                return Err(DataError::Spec(format!("segment at {} has non-finite magnitude", s.start)));
            }
            if s.kind == AnomalyKind::Collective && !(0.0..=1.0).contains(&m) {
                return Err(DataError::Spec(format!(
                    "collective level {m} at {} must lie in [0, 1]",
                    s.start
                )));
            }
        }
        for pair in sorted.windows(2) {
            if pair[1].start < pair[0].end() {
                return Err(DataError::Spec(format!(
                    "segments {}..{} and {}..{} overlap",
                    pair[0].start,
                    pair[0].end(),
                    pair[1].start,
                    pair[1].end()
                )));
            }
        }
        Ok(())
    }

    /// Label vector marking exactly the segment indices.
    pub fn labels(&self, n_points: usize) -> Vec<bool> {
        let mut labels = vec![false; n_points];
        for s in &self.segments {
            labels[s.start..s.end().min(n_points)].iter_mut().for_each(|l| *l = true);
        }
        labels
    }
}

#[derive(Debug, Clone, Copy)]
struct Wave {
    amplitude: f64,
    period: f64,
    phase: f64,
}

impl Wave {
    fn at(&self, t: f64) -> f64 {
        self.amplitude * (std::f64::consts::TAU * t / self.period + self.phase).sin()
    }
}

/// Per-variable base signal drawn from a seed.
#[derive(Debug, Clone)]
pub struct SignalModel {
    offsets: Vec<f64>,
    waves: Vec<[Wave; 2]>,
    noise_std: Vec<f64>,
}

impl SignalModel {
    pub fn new(seed: u64, n_vars: usize, noise: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = |lo: f64, hi: f64, rng: &mut ChaCha8Rng| Uniform::new(lo, hi).expect("valid range").sample(rng);
        let mut offsets = Vec::with_capacity(n_vars);
        let mut waves = Vec::with_capacity(n_vars);
        let mut noise_std = Vec::with_capacity(n_vars);
        for _ in 0..n_vars {
            offsets.push(u(-1.0, 1.0, &mut rng));
            let slow = Wave {
                amplitude: u(0.5, 1.5, &mut rng),
                period: u(20.0, 60.0, &mut rng),
                phase: u(0.0, std::f64::consts::TAU, &mut rng),
            };
            let fast = Wave {
                amplitude: u(0.1, 0.5, &mut rng),
                period: u(5.0, 15.0, &mut rng),
                phase: u(0.0, std::f64::consts::TAU, &mut rng),
            };
            noise_std.push(noise * slow.amplitude);
            waves.push([slow, fast]);
        }
        Self {
            offsets,
            waves,
            noise_std,
        }
    }

    pub fn n_vars(&self) -> usize {
        self.offsets.len()
    }

    /// Noise-free value of variable `j` at (possibly fractional) time `t`.
    pub fn clean(&self, j: usize, t: f64) -> f64 {
        self.offsets[j] + self.waves[j].iter().map(|w| w.at(t)).sum::<f64>()
    }

    /// Rows for timestamps `start..start + n` with noise from `stream`.
    pub fn generate(&self, start: usize, n: usize, seed: u64, stream: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let k = self.n_vars();
        let mut out = Vec::with_capacity(n * k);
        for t in start..start + n {
            for j in 0..k {
                let noise = Normal::new(0.0, self.noise_std[j]).expect("finite std").sample(&mut rng);
                out.push(self.clean(j, t as f64) + noise);
            }
        }
        out
    }
}

struct ColumnStats {
    min: f64,
    max: f64,
    mean: f64,
    std: f64,
}

fn column_stats(values: &[f64], k: usize, j: usize) -> ColumnStats {
    let col: Vec<f64> = values.iter().skip(j).step_by(k).copied().collect();
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    ColumnStats {
        min: col.iter().copied().fold(f64::INFINITY, f64::min),
        max: col.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean,
        std: var.sqrt(),
    }
}

/// Injects `spec` into rows generated for timestamps `start..` by `model`.
fn inject(values: &mut [f64], model: &SignalModel, start: usize, spec: &AnomalySpec) {
    let k = model.n_vars();
    let stats: Vec<ColumnStats> = (0..k).map(|j| column_stats(values, k, j)).collect();
    for seg in &spec.segments {
        let m = seg.magnitude();
        for t in seg.start..seg.end() {
            for (j, st) in stats.iter().enumerate() {
                let x = &mut values[t * k + j];
                match seg.kind {
                    AnomalyKind::Point => {
                        let sign = if *x >= st.mean { 1.0 } else { -1.0 };
                        *x += sign * m * st.std;
                    }
                    AnomalyKind::Contextual => {
                        let t_abs = (start + t) as f64;
                        let noise = *x - model.clean(j, t_abs);
                        let warped = (start + seg.start) as f64 + (t - seg.start) as f64 * (1.0 + m);
                        *x = (model.clean(j, warped) + noise).clamp(st.min, st.max);
                    }
                    AnomalyKind::Collective => {
                        *x = st.min + m * (st.max - st.min);
                    }
                }
            }
        }
    }
}

/// A labeled series of `n_points` observations of `n_vars` variables.
pub fn synth(seed: u64, n_points: usize, n_vars: usize, spec: &AnomalySpec) -> Result<RawSeries> {
    if n_points == 0 || n_vars == 0 {
        return Err(DataError::Empty);
    }
    spec.validate(n_points)?;
    let model = SignalModel::new(seed, n_vars, DEFAULT_NOISE);
    let mut values = model.generate(0, n_points, seed, 0);
    inject(&mut values, &model, 0, spec);
    RawSeries::new(values, n_vars, Some(spec.labels(n_points)))
}

/// File format for a train/test benchmark pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub train_points: usize,
    pub test_points: usize,
    pub n_vars: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Segment positions are relative to the start of the test split.
    #[serde(default, rename = "segment")]
    pub segments: Vec<AnomalySegment>,
}

fn default_noise() -> f64 {
    DEFAULT_NOISE
}

impl BenchmarkSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| DataError::Spec(e.to_string()))?;
        if spec.train_points == 0 || spec.test_points == 0 || spec.n_vars == 0 {
            return Err(DataError::Empty);
        }
        if !(spec.noise.is_finite() && spec.noise >= 0.0) {
            return Err(DataError::Spec(format!("noise {} must be finite and >= 0", spec.noise)));
        }
        spec.anomalies().validate(spec.test_points)?;
        Ok(spec)
    }

    pub fn default_benchmark() -> Self {
        Self::from_toml(DEFAULT_BENCHMARK_SPEC).expect("bundled spec is valid")
    }

    pub fn anomalies(&self) -> AnomalySpec {
        AnomalySpec {
            segments: self.segments.clone(),
        }
    }
}

/// Clean training split followed in time by a test split with injected
/// anomalies, both from one signal model.
#[derive(Debug, Clone)]
pub struct SynthBenchmark {
    pub train: RawSeries,
    pub test: RawSeries,
    pub segments: Vec<AnomalySegment>,
}

impl SynthBenchmark {
    pub fn generate(spec: &BenchmarkSpec, seed: u64) -> Result<Self> {
        let anomalies = spec.anomalies();
        anomalies.validate(spec.test_points)?;
        let model = SignalModel::new(seed, spec.n_vars, spec.noise);
        let train_values = model.generate(0, spec.train_points, seed, 1);
        let mut test_values = model.generate(spec.train_points, spec.test_points, seed, 2);
        inject(&mut test_values, &model, spec.train_points, &anomalies);
        let train = RawSeries::new(train_values, spec.n_vars, Some(vec![false; spec.train_points]))?;
        let test = RawSeries::new(test_values, spec.n_vars, Some(anomalies.labels(spec.test_points)))?;
        Ok(Self {
            train,
            test,
            segments: anomalies.segments,
        })
    }

    /// Test-split mask of the indices injected with `kind`.
    pub fn kind_mask(&self, kind: AnomalyKind) -> Vec<bool> {
        let mut mask = vec![false; self.test.len()];
        for s in self.segments.iter().filter(|s| s.kind == kind) {
            mask[s.start..s.end()].iter_mut().for_each(|m| *m = true);
        }
        mask
    }
}

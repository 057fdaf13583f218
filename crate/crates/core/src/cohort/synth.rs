use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{Cohort, EventInterval, PatientRecord};
use crate::error::{Error, Result};

/// Parameters of the synthetic time-to-event cohort.
///
/// Features are standard normal. The latent risk `r = hazard_weights . x`
/// drives an exponential event time with rate `lambda0 * exp(r)`, where
/// `lambda0` is chosen so that a patient with `r = 0` has the event within
/// `horizon_hours` with probability `event_base_rate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_patients: usize,
    pub n_features: usize,
    pub horizon_hours: f64,
    pub event_base_rate: f64,
    pub hazard_weights: Vec<f64>,
    /// Mean of the exponential event duration; `None` leaves durations
    /// unrecorded (events such as death).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_duration_hours: Option<f64>,
    pub n_ref_tasks: usize,
    /// Correlation of each related reference label with the latent risk,
    /// one entry per related task (`n_ref_tasks - n_unrelated_ref_tasks`).
    pub ref_correlations: Vec<f64>,
    pub n_unrelated_ref_tasks: usize,
    #[serde(default = "default_ref_prevalence")]
    pub ref_prevalence: f64,
    /// Fraction of patients censored at a uniform time within the horizon.
    pub censor_rate: f64,
    pub seed: u64,
}

fn default_ref_prevalence() -> f64 {
    0.2
}

impl SynthSpec {
    /// 5000 patients, 20 features with a decaying risk profile, a 90-day
    /// horizon, 8 related and 4 unrelated reference outcomes.
    pub fn benchmark(seed: u64) -> Self {
        let hazard_weights = (0..20)
            .map(|i| match i {
                0..=5 => 0.55 / (1.0 + 0.25 * i as f64) * if i % 2 == 0 { 1.0 } else { -1.0 },
                6..=11 => 0.12,
                _ => 0.0,
            })
            .collect();
        Self {
            n_patients: 5000,
            n_features: 20,
            horizon_hours: 91.0 * 24.0,
            event_base_rate: 0.12,
            hazard_weights,
            mean_duration_hours: None,
            n_ref_tasks: 12,
            ref_correlations: vec![0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55],
            n_unrelated_ref_tasks: 4,
            ref_prevalence: 0.2,
            censor_rate: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_patients == 0 || self.n_features == 0 {
            return fail("synthetic cohort needs at least one patient and one feature".into());
        }
        if self.hazard_weights.len() != self.n_features {
            return fail(format!(
                "{} hazard weights for {} features",
                self.hazard_weights.len(),
                self.n_features
            ));
        }
        if self.hazard_weights.iter().any(|w| !w.is_finite()) {
            return fail("hazard weights must be finite".into());
        }
        if !(self.horizon_hours > 0.0) || !self.horizon_hours.is_finite() {
            return fail("horizon_hours must be positive".into());
        }
        if !(0.0..1.0).contains(&self.event_base_rate) {
            return fail(format!("event_base_rate {} not in [0, 1)", self.event_base_rate));
        }
        for (name, v) in [
            ("censor_rate", self.censor_rate),
            ("ref_prevalence", self.ref_prevalence),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} {v} not in [0, 1]"));
            }
        }
        if self.ref_prevalence == 0.0 || self.ref_prevalence == 1.0 {
            return fail("ref_prevalence must be strictly between 0 and 1".into());
        }
        if self.n_unrelated_ref_tasks > self.n_ref_tasks {
            return fail("more unrelated reference tasks than reference tasks".into());
        }
        let related = self.n_ref_tasks - self.n_unrelated_ref_tasks;
        if self.ref_correlations.len() != related {
            return fail(format!(
                "{} reference correlations for {related} related tasks",
                self.ref_correlations.len()
            ));
        }
        if self.ref_correlations.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return fail("reference correlations must lie in [0, 1]".into());
        }
        if let Some(d) = self.mean_duration_hours {
            if !(d > 0.0) || !d.is_finite() {
                return fail("mean_duration_hours must be positive".into());
            }
        }
        Ok(())
    }

    /// Baseline hazard per hour.
    pub fn base_hazard(&self) -> f64 {
        -(1.0 - self.event_base_rate).ln() / self.horizon_hours
    }

    pub fn risk_scale(&self) -> f64 {
        self.hazard_weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    /// Marginal probability that a generated record has an observed event,
    /// by quadrature over the latent risk distribution `N(0, |w|^2)`.
    pub fn implied_event_rate(&self) -> f64 {
        let sigma = self.risk_scale();
        let lambda_h = self.base_hazard() * self.horizon_hours;
        let c = self.censor_rate;
        let p_event = |r: f64| {
            let a = lambda_h * r.exp();
            let full = 1.0 - (-a).exp();
            // censoring time uniform on (0, H): E[1 - exp(-a U)]
            let censored = if a < 1e-12 { a / 2.0 } else { 1.0 - (1.0 - (-a).exp()) / a };
            (1.0 - c) * full + c * censored
        };
        if sigma == 0.0 {
            return p_event(0.0);
        }
        // Simpson's rule over z in [-10, 10]
        let n = 4000;
        let (lo, hi) = (-10.0, 10.0);
        let h = (hi - lo) / n as f64;
        let density = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let f = |z: f64| density(z) * p_event(sigma * z);
        let mut acc = f(lo) + f(hi);
        for i in 1..n {
            let z = lo + i as f64 * h;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(z);
        }
        acc * h / 3.0
    }
}

/// Draws a cohort from `spec`. The same spec always yields the same cohort.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Cohort> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lambda0 = spec.base_hazard();
    let scale = spec.risk_scale();
    let threshold = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(1.0 - spec.ref_prevalence);
    let duration_dist = spec
        .mean_duration_hours
        .map(|m| Exp::new(1.0 / m).expect("positive rate"));
    let related = spec.n_ref_tasks - spec.n_unrelated_ref_tasks;
    let width = spec.n_patients.to_string().len().max(5);

    let mut records = Vec::with_capacity(spec.n_patients);
    for i in 0..spec.n_patients {
        let features: Vec<f64> = (0..spec.n_features)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let risk: f64 = features
            .iter()
            .zip(&spec.hazard_weights)
            .map(|(x, w)| x * w)
            .sum();

        let observed_until = if rng.gen::<f64>() < spec.censor_rate {
            // strictly positive censoring time
            spec.horizon_hours * (1.0 - rng.gen::<f64>())
        } else {
            spec.horizon_hours
        };
        let e: f64 = Exp1.sample(&mut rng);
        let rate = lambda0 * risk.exp();
        let start = if rate > 0.0 {
            Some(e / rate).filter(|&t| t < observed_until)
        } else {
            None
        };
        let duration_draw = duration_dist.map(|d| d.sample(&mut rng));
        let duration = start.and(duration_draw).map(|d| d.max(1e-6));

        let z = if scale > 0.0 { risk / scale } else { 0.0 };
        let mut ref_labels = Vec::with_capacity(spec.n_ref_tasks);
        for c in &spec.ref_correlations {
            let noise: f64 = rng.sample(StandardNormal);
            ref_labels.push(c * z + (1.0 - c * c).sqrt() * noise > threshold);
        }
        for _ in 0..spec.n_unrelated_ref_tasks {
            ref_labels.push(rng.gen::<f64>() < spec.ref_prevalence);
        }

        records.push(PatientRecord {
            id: format!("P{:0width$}", i + 1),
            features,
            event: EventInterval {
                start,
                duration,
                observed_until,
            },
            ref_labels,
        });
    }

    let feature_names = (0..spec.n_features).map(|j| format!("x{j}")).collect();
    let ref_names = (0..spec.n_ref_tasks)
        .map(|i| {
            if i < related {
                format!("related{i}")
            } else {
                format!("unrelated{}", i - related)
            }
        })
        .collect();
    Ok(Cohort::new(records, feature_names, ref_names)?.with_ground_truth(spec.clone()))
}

//! Desk-scale CGM-like records with known sparse events.
//!
//! Glucose is a daily sinusoid plus gamma-shaped meal (+) and bolus (−)
//! responses plus AR(1) noise, clamped to the sensor range. Each random
//! component draws from its own ChaCha stream so changing one rate does not
//! perturb the others.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::record::{encode_timestamp, MtsRecord, Timestamp};
use crate::error::{Error, Result};

pub const GLUCOSE: &str = "glucose";
pub const MEAL: &str = "meal";
pub const BOLUS: &str = "bolus";
pub const HEART_RATE: &str = "heart_rate";
pub const NOISE: &str = "noise";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Mean glucose, mg/dL.
    pub baseline: f64,
    /// Amplitude of the daily sinusoid, mg/dL.
    pub daily_amplitude: f64,
    /// Expected meals per day (Poisson).
    pub meals_per_day: f64,
    pub meal_carbs_min: f64,
    pub meal_carbs_max: f64,
    /// Meals fall uniformly in `[start, end)` hours of the day.
    pub meal_start_hour: f64,
    pub meal_end_hour: f64,
    /// Peak glucose rise per gram of carbohydrate, mg/dL.
    pub meal_gain: f64,
    pub meal_peak_minutes: f64,
    /// Probability a meal is followed by a bolus.
    pub bolus_probability: f64,
    pub bolus_max_offset_minutes: f64,
    /// Grams of carbohydrate covered by one unit.
    pub carb_ratio: f64,
    /// Peak glucose drop per unit, mg/dL.
    pub bolus_gain: f64,
    pub bolus_peak_minutes: f64,
    pub ar_phi: f64,
    /// Innovation standard deviation of the AR(1) noise, mg/dL.
    pub ar_sigma: f64,
    pub heart_rate_mean: f64,
    pub heart_rate_phi: f64,
    pub heart_rate_sigma: f64,
    pub clamp_min: f64,
    pub clamp_max: f64,
    /// Wall-clock time of the first sample.
    pub start: NaiveDateTime,
    /// Append the time-of-day channel.
    pub timestamp_channel: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            baseline: 140.0,
            daily_amplitude: 30.0,
            meals_per_day: 4.0,
            meal_carbs_min: 20.0,
            meal_carbs_max: 80.0,
            meal_start_hour: 6.0,
            meal_end_hour: 22.0,
            meal_gain: 1.5,
            meal_peak_minutes: 45.0,
            bolus_probability: 0.7,
            bolus_max_offset_minutes: 15.0,
            carb_ratio: 10.0,
            bolus_gain: 10.0,
            bolus_peak_minutes: 75.0,
            ar_phi: 0.9,
            ar_sigma: 3.0,
            heart_rate_mean: 70.0,
            heart_rate_phi: 0.98,
            heart_rate_sigma: 1.0,
            clamp_min: 40.0,
            clamp_max: 400.0,
            start: NaiveDate::from_ymd_opt(2024, 1, 1)
                .and_then(|d| d.and_hms_opt(0, 0, 0))
                .unwrap_or_default(),
            timestamp_channel: true,
        }
    }
}

/// `(τ/p)·e^{1−τ/p}` for `τ ≥ 0`: unit peak at `τ = p`.
pub fn gamma_kernel(tau: f64, peak: f64) -> f64 {
    if tau < 0.0 || peak <= 0.0 {
        return 0.0;
    }
    let r = tau / peak;
    r * (1.0 - r).exp()
}

/// Stream ids of the independent random components.
mod stream {
    pub const MEALS: u64 = 1;
    pub const BOLUS: u64 = 2;
    pub const GLUCOSE_NOISE: u64 = 3;
    pub const HEART_RATE: u64 = 4;
    pub const DISTRACTOR: u64 = 5;
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(sigma: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("noise sigma {sigma}: {e}")))
}

/// Generates `days` of samples every `interval_minutes`.
///
/// Channels: glucose (target), meal (carbs at meal rows, missing elsewhere),
/// bolus (units at bolus rows, missing elsewhere), heart rate, a pure-noise
/// distractor and, unless disabled, the time-of-day channel. Event masks are
/// recorded for meal and bolus.
pub fn generate_synthetic(seed: u64, days: usize, interval_minutes: f64, config: &SyntheticConfig) -> Result<MtsRecord> {
    if days == 0 {
        return Err(Error::InvalidArgument("days must be at least 1".into()));
    }
    if !(interval_minutes > 0.0) || (1440.0 / interval_minutes).fract() != 0.0 {
        return Err(Error::InvalidArgument(format!(
            "interval {interval_minutes} min must divide a day"
        )));
    }
    if config.meal_carbs_max < config.meal_carbs_min || config.meal_end_hour < config.meal_start_hour {
        return Err(Error::Config("empty meal carb or hour range".into()));
    }
    let per_day = (1440.0 / interval_minutes) as usize;
    let m = days * per_day;
    let row_of = |minutes: f64| (minutes / interval_minutes).round() as usize;

    let mut meals = vec![0.0; m];
    let mut meal_mask = vec![false; m];
    let mut meal_rng = rng_for(seed, stream::MEALS);
    let mut meal_events = Vec::new();
    for day in 0..days {
        let count = if config.meals_per_day > 0.0 {
            let p = Poisson::new(config.meals_per_day).map_err(|e| Error::Config(format!("meals_per_day: {e}")))?;
            p.sample(&mut meal_rng) as usize
        } else {
            0
        };
        for _ in 0..count {
            let hour = meal_rng.gen_range(config.meal_start_hour..=config.meal_end_hour);
            let carbs = meal_rng.gen_range(config.meal_carbs_min..=config.meal_carbs_max);
            let row = (day * per_day + row_of(hour * 60.0)).min(m - 1);
            meals[row] += carbs;
            meal_mask[row] = true;
            meal_events.push((row, carbs));
        }
    }

    let mut bolus = vec![0.0; m];
    let mut bolus_mask = vec![false; m];
    let mut bolus_rng = rng_for(seed, stream::BOLUS);
    for &(row, carbs) in &meal_events {
        let take = bolus_rng.gen_bool(config.bolus_probability.clamp(0.0, 1.0));
        let offset = bolus_rng.gen_range(0.0..=config.bolus_max_offset_minutes.max(0.0));
        if !take {
            continue;
        }
        let r = row + row_of(offset);
        if r < m {
            bolus[r] += carbs / config.carb_ratio;
            bolus_mask[r] = true;
        }
    }

    // Kernel support: responses are negligible past eight peak times.
    let meal_span = row_of(8.0 * config.meal_peak_minutes) + 1;
    let bolus_span = row_of(8.0 * config.bolus_peak_minutes) + 1;
    let mut response = vec![0.0; m];
    for (i, &carbs) in meals.iter().enumerate().filter(|(_, &c)| c > 0.0) {
        for (k, r) in response.iter_mut().enumerate().skip(i).take(meal_span) {
            let tau = (k - i) as f64 * interval_minutes;
            *r += config.meal_gain * carbs * gamma_kernel(tau, config.meal_peak_minutes);
        }
    }
    for (i, &units) in bolus.iter().enumerate().filter(|(_, &u)| u > 0.0) {
        for (k, r) in response.iter_mut().enumerate().skip(i).take(bolus_span) {
            let tau = (k - i) as f64 * interval_minutes;
            *r -= config.bolus_gain * units * gamma_kernel(tau, config.bolus_peak_minutes);
        }
    }

    let mut noise_rng = rng_for(seed, stream::GLUCOSE_NOISE);
    let glucose_noise = normal(config.ar_sigma)?;
    let mut hr_rng = rng_for(seed, stream::HEART_RATE);
    let hr_noise = normal(config.heart_rate_sigma)?;
    let mut distractor_rng = rng_for(seed, stream::DISTRACTOR);
    let unit = normal(1.0)?;

    let mut ar = 0.0;
    let mut hr = 0.0;
    let mut timestamps = Vec::with_capacity(m);
    let mut values = Vec::with_capacity(m);
    for i in 0..m {
        let minutes = i as f64 * interval_minutes;
        ar = config.ar_phi * ar + glucose_noise.sample(&mut noise_rng);
        hr = config.heart_rate_phi * hr + hr_noise.sample(&mut hr_rng);
        let daily = config.daily_amplitude * (2.0 * std::f64::consts::PI * minutes / 1440.0).sin();
        let glucose = (config.baseline + daily + response[i] + ar).clamp(config.clamp_min, config.clamp_max);
        values.push(vec![
            Some(glucose),
            meal_mask[i].then_some(meals[i]),
            bolus_mask[i].then_some(bolus[i]),
            Some(config.heart_rate_mean + hr),
            Some(unit.sample(&mut distractor_rng)),
        ]);
        timestamps.push(Timestamp::Wall(
            config.start + Duration::seconds((minutes * 60.0).round() as i64),
        ));
    }

    let mut event_masks = BTreeMap::new();
    event_masks.insert(MEAL.to_string(), meal_mask);
    event_masks.insert(BOLUS.to_string(), bolus_mask);
    let record = MtsRecord {
        participant: format!("synthetic-{seed}"),
        interval_minutes,
        variables: [GLUCOSE, MEAL, BOLUS, HEART_RATE, NOISE].map(String::from).to_vec(),
        timestamps,
        values,
        event_masks,
        origin: 0,
    };
    if config.timestamp_channel {
        encode_timestamp(&record)
    } else {
        Ok(record)
    }
}

//! Flex-sensor signal chain: divider voltage to resistance, resistance to bend
//! angle, conditioning, tap detection and windowed tap-rate estimation.
//!
//! Every function here is pure. Identical inputs give bit-identical outputs.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("open circuit: divider output {voltage} V is not positive")]
    OpenCircuit { voltage: f64 },
    #[error("divider output {voltage} V exceeds supply {vin} V")]
    OutOfRange { voltage: f64, vin: f64 },
    #[error("invalid session length {0} s")]
    InvalidSession(f64),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("timestamps must be strictly increasing (index {index})")]
    NonMonotonicTime { index: usize },
}

/// Finger carrying a flex sensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Index,
    Thumb,
}

impl Channel {
    pub const ALL: [Channel; 2] = [Channel::Index, Channel::Thumb];

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Index => "index",
            Channel::Thumb => "thumb",
        }
    }

    pub fn parse(s: &str) -> Option<Channel> {
        match s {
            "index" => Some(Channel::Index),
            "thumb" => Some(Channel::Thumb),
            _ => None,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Channel::Index => 0,
            Channel::Thumb => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Channel> {
        match code {
            0 => Some(Channel::Index),
            1 => Some(Channel::Thumb),
            _ => None,
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One raw divider reading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlexSample {
    /// Seconds since session start.
    pub t: f64,
    pub channel: Channel,
    /// Divider output, volts.
    pub voltage: f64,
}

/// Electrical and calibration description of one flex sensor in its divider.
///
/// The flex sensor sits on the upper leg of the divider and the output is
/// measured across `r_fixed`, so `v_out = vin * r_fixed / (r_flex + r_fixed)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlexSensorSpec {
    pub vin: f64,
    pub r_fixed: f64,
    /// Flex resistance at 0 degrees.
    pub r_flat: f64,
    /// Flex resistance at `angle_max`.
    pub r_bent: f64,
    pub angle_max: f64,
    pub thickness_mm: f64,
    pub active_fraction: f64,
}

impl Default for FlexSensorSpec {
    fn default() -> Self {
        FlexSensorSpec {
            vin: 5.0,
            r_fixed: 10_000.0,
            r_flat: 25_000.0,
            r_bent: 100_000.0,
            angle_max: 90.0,
            thickness_mm: 6.35,
            active_fraction: 0.8486,
        }
    }
}

impl FlexSensorSpec {
    pub fn validate(&self) -> Result<(), SignalError> {
        let bad = |m: &str| Err(SignalError::InvalidParam(m.to_string()));
        if !(self.vin > 0.0) {
            return bad("vin must be > 0");
        }
        if !(self.r_fixed > 0.0) {
            return bad("r_fixed must be > 0");
        }
        if !(self.r_flat > 0.0) || !(self.r_bent > 0.0) {
            return bad("flex resistances must be > 0");
        }
        if self.r_flat == self.r_bent {
            return bad("r_flat must differ from r_bent");
        }
        if !(self.angle_max > 0.0) {
            return bad("angle_max must be > 0");
        }
        if !(self.active_fraction > 0.0 && self.active_fraction <= 1.0) {
            return bad("active_fraction must be in (0, 1]");
        }
        Ok(())
    }

    /// Inverse of the angle map followed by the divider equation. Angles
    /// outside `[0, angle_max]` extrapolate linearly.
    pub fn angle_to_voltage(&self, angle_deg: f64) -> f64 {
        let r = self.r_flat + angle_deg / self.angle_max * (self.r_bent - self.r_flat);
        self.vin * self.r_fixed / (r + self.r_fixed)
    }
}

/// Flex resistance from a divider reading.
pub fn voltage_to_resistance(sample: &FlexSample, spec: &FlexSensorSpec) -> Result<f64, SignalError> {
    let v = sample.voltage;
    if !(v > 0.0) {
        return Err(SignalError::OpenCircuit { voltage: v });
    }
    if v > spec.vin {
        return Err(SignalError::OutOfRange { voltage: v, vin: spec.vin });
    }
    Ok(spec.r_fixed * (spec.vin - v) / v)
}

/// Linear map `r_flat -> 0`, `r_bent -> angle_max`, clamped to that range.
pub fn resistance_to_angle(r: f64, spec: &FlexSensorSpec) -> f64 {
    let angle = (r - spec.r_flat) / (spec.r_bent - spec.r_flat) * spec.angle_max;
    angle.clamp(0.0, spec.angle_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnglePoint {
    pub t: f64,
    pub angle: f64,
}

/// Bend-angle signal for one finger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleSeries {
    pub channel: Channel,
    samples: Vec<AnglePoint>,
}

impl AngleSeries {
    pub fn new(channel: Channel, samples: Vec<AnglePoint>) -> Result<Self, SignalError> {
        if let Some(i) = samples.windows(2).position(|w| !(w[1].t > w[0].t)) {
            return Err(SignalError::NonMonotonicTime { index: i + 1 });
        }
        Ok(AngleSeries { channel, samples })
    }

    pub fn empty(channel: Channel) -> Self {
        AngleSeries { channel, samples: Vec::new() }
    }

    /// Builds a series from `(t, angle)` pairs.
    pub fn from_pairs(channel: Channel, pairs: &[(f64, f64)]) -> Result<Self, SignalError> {
        Self::new(channel, pairs.iter().map(|&(t, angle)| AnglePoint { t, angle }).collect())
    }

    pub fn samples(&self) -> &[AnglePoint] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditionParams {
    pub clip_max_deg: f64,
    /// Odd, at least 1.
    pub smooth_window_n: usize,
}

impl Default for ConditionParams {
    fn default() -> Self {
        ConditionParams { clip_max_deg: 90.0, smooth_window_n: 5 }
    }
}

/// Clips to `[0, clip_max_deg]` and applies a centered moving average.
///
/// Windows are truncated at the edges, so output length and
/// timestamps match the input. Each output is bounded by the min and max of
/// its window, which keeps constants fixed exactly.
pub fn condition_series(series: &AngleSeries, params: &ConditionParams) -> Result<AngleSeries, SignalError> {
    let w = params.smooth_window_n;
    if w == 0 || w.is_multiple_of(2) {
        return Err(SignalError::InvalidParam(format!("smooth_window_n must be odd and >= 1, got {w}")));
    }
    if !(params.clip_max_deg >= 0.0) {
        return Err(SignalError::InvalidParam("clip_max_deg must be >= 0".into()));
    }
    let clipped: Vec<f64> = series
        .samples
        .iter()
        .map(|p| p.angle.clamp(0.0, params.clip_max_deg))
        .collect();
    let half = w / 2;
    let n = clipped.len();
    let samples = series
        .samples
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let window = &clipped[i.saturating_sub(half)..(i + half + 1).min(n)];
            let (lo, hi) = window
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            AnglePoint { t: p.t, angle: mean.clamp(lo, hi) }
        })
        .collect();
    Ok(AngleSeries { channel: series.channel, samples })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TapEvent {
    pub t_peak: f64,
    /// Degrees.
    pub amplitude: f64,
    pub channel: Channel,
}

/// Thresholded peak picking with hysteresis.
///
/// A tap arms when the signal reaches `threshold_deg` and is released once it
/// drops below `threshold_deg / 2`; the largest sample of the excursion is the
/// peak. A pulse still open at the end of the series is reported only when
/// its peak is followed by a lower sample. Peaks closer than `min_gap_s` to
/// the previous reported tap are discarded.
pub fn detect_taps(series: &AngleSeries, threshold_deg: f64, min_gap_s: f64) -> Result<Vec<TapEvent>, SignalError> {
    if !(threshold_deg > 0.0) {
        return Err(SignalError::InvalidParam("threshold_deg must be > 0".into()));
    }
    if !(min_gap_s >= 0.0) {
        return Err(SignalError::InvalidParam("min_gap_s must be >= 0".into()));
    }
    let release = threshold_deg / 2.0;
    let mut events: Vec<TapEvent> = Vec::new();
    // (index, point) of the running maximum of the open excursion
    let mut open: Option<(usize, AnglePoint)> = None;

    let emit = |peak: AnglePoint, events: &mut Vec<TapEvent>| {
        if let Some(last) = events.last() {
            if peak.t - last.t_peak < min_gap_s {
                return;
            }
        }
        events.push(TapEvent { t_peak: peak.t, amplitude: peak.angle, channel: series.channel });
    };

    for (i, p) in series.samples.iter().enumerate() {
        match open {
            None => {
                if p.angle >= threshold_deg {
                    open = Some((i, *p));
                }
            }
            Some((_, peak)) => {
                if p.angle > peak.angle {
                    open = Some((i, *p));
                } else if p.angle < release {
                    emit(peak, &mut events);
                    open = None;
                }
            }
        }
    }
    if let Some((idx, peak)) = open {
        let last = series.samples.len() - 1;
        if idx < last && series.samples[last].angle < peak.angle {
            emit(peak, &mut events);
        }
    }
    Ok(events)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyPoint {
    pub t_center: f64,
    pub freq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyProfile {
    pub window_s: f64,
    pub points: Vec<FrequencyPoint>,
}

/// Tap rate over sliding windows `[k*hop, k*hop + window)`.
///
/// Windows start at 0 and step by `hop_s` while they fit inside the session.
/// A session shorter than one window still yields a single window at 0.
pub fn tap_frequency_profile(
    events: &[TapEvent],
    session_len_s: f64,
    window_s: f64,
    hop_s: f64,
) -> Result<FrequencyProfile, SignalError> {
    if !(session_len_s > 0.0) {
        return Err(SignalError::InvalidSession(session_len_s));
    }
    if !(window_s > 0.0) || !(hop_s > 0.0) {
        return Err(SignalError::InvalidParam("window_s and hop_s must be > 0".into()));
    }
    // tolerate float drift in k*hop when the last window ends on the session end
    let slack = 1e-9 * session_len_s.max(1.0);
    let mut points = Vec::new();
    let mut k: u64 = 0;
    loop {
        let start = k as f64 * hop_s;
        if k > 0 && start + window_s > session_len_s + slack {
            break;
        }
        let end = start + window_s;
        let count = events.iter().filter(|e| e.t_peak >= start && e.t_peak < end).count();
        points.push(FrequencyPoint { t_center: start + window_s / 2.0, freq: count as f64 / window_s });
        k += 1;
    }
    Ok(FrequencyProfile { window_s, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn spec() -> FlexSensorSpec {
        FlexSensorSpec { vin: 5.0, r_fixed: 10_000.0, ..FlexSensorSpec::default() }
    }

    fn sample(v: f64) -> FlexSample {
        FlexSample { t: 0.0, channel: Channel::Index, voltage: v }
    }

    fn series(values: &[f64], dt: f64) -> AngleSeries {
        let pts = values.iter().enumerate().map(|(i, &a)| AnglePoint { t: i as f64 * dt, angle: a }).collect();
        AngleSeries::new(Channel::Index, pts).unwrap()
    }

    fn taps_at(times: &[f64]) -> Vec<TapEvent> {
        times.iter().map(|&t| TapEvent { t_peak: t, amplitude: 30.0, channel: Channel::Index }).collect()
    }

    #[test]
    fn symmetric_divider() {
        assert_eq!(voltage_to_resistance(&sample(2.5), &spec()).unwrap(), 10_000.0);
    }

    #[test]
    fn divider_at_one_volt() {
        // 10k * (5 - 1) / 1
        assert_eq!(voltage_to_resistance(&sample(1.0), &spec()).unwrap(), 40_000.0);
    }

    #[test]
    fn divider_errors() {
        assert!(matches!(voltage_to_resistance(&sample(0.0), &spec()), Err(SignalError::OpenCircuit { .. })));
        assert!(matches!(voltage_to_resistance(&sample(-0.1), &spec()), Err(SignalError::OpenCircuit { .. })));
        assert!(matches!(voltage_to_resistance(&sample(5.01), &spec()), Err(SignalError::OutOfRange { .. })));
        assert_eq!(voltage_to_resistance(&sample(5.0), &spec()).unwrap(), 0.0);
    }

    #[test]
    fn angle_map_endpoints_and_clamp() {
        let s = spec();
        assert_eq!(resistance_to_angle(s.r_flat, &s), 0.0);
        assert_eq!(resistance_to_angle(s.r_bent, &s), s.angle_max);
        assert_eq!(resistance_to_angle((s.r_flat + s.r_bent) / 2.0, &s), s.angle_max / 2.0);
        assert_eq!(resistance_to_angle(s.r_bent * 3.0, &s), s.angle_max);
        assert_eq!(resistance_to_angle(0.0, &s), 0.0);
    }

    #[test]
    fn angle_voltage_inverse() {
        let s = spec();
        for a in [0.0, 12.5, 45.0, 89.0] {
            let v = s.angle_to_voltage(a);
            let back = resistance_to_angle(voltage_to_resistance(&sample(v), &s).unwrap(), &s);
            assert!((back - a).abs() < 1e-9, "{a} -> {back}");
        }
    }

    #[test]
    fn spec_validation() {
        assert!(FlexSensorSpec::default().validate().is_ok());
        let s = FlexSensorSpec { r_bent: 25_000.0, ..FlexSensorSpec::default() };
        assert!(s.validate().is_err());
        let s = FlexSensorSpec { active_fraction: 1.5, ..FlexSensorSpec::default() };
        assert!(s.validate().is_err());
    }

    #[test]
    fn series_rejects_unordered_time() {
        let err = AngleSeries::from_pairs(Channel::Thumb, &[(0.0, 1.0), (0.0, 2.0)]).unwrap_err();
        assert_eq!(err, SignalError::NonMonotonicTime { index: 1 });
    }

    #[test]
    fn condition_constant_is_fixed_point() {
        let s = series(&[0.1; 17], 0.02);
        let out = condition_series(&s, &ConditionParams::default()).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn condition_clips() {
        let s = series(&[200.0], 0.02);
        let out = condition_series(&s, &ConditionParams { clip_max_deg: 90.0, smooth_window_n: 5 }).unwrap();
        assert_eq!(out.samples()[0].angle, 90.0);
        let s = series(&[-4.0], 0.02);
        let out = condition_series(&s, &ConditionParams::default()).unwrap();
        assert_eq!(out.samples()[0].angle, 0.0);
    }

    #[test]
    fn condition_empty_and_bad_window() {
        let out = condition_series(&AngleSeries::empty(Channel::Index), &ConditionParams::default()).unwrap();
        assert!(out.is_empty());
        let s = series(&[1.0, 2.0], 0.1);
        assert!(condition_series(&s, &ConditionParams { clip_max_deg: 90.0, smooth_window_n: 4 }).is_err());
        assert!(condition_series(&s, &ConditionParams { clip_max_deg: 90.0, smooth_window_n: 0 }).is_err());
    }

    #[test]
    fn condition_edges_shrink() {
        let s = series(&[0.0, 3.0, 6.0, 9.0], 1.0);
        let out = condition_series(&s, &ConditionParams { clip_max_deg: 90.0, smooth_window_n: 3 }).unwrap();
        let got: Vec<f64> = out.samples().iter().map(|p| p.angle).collect();
        assert_eq!(got, vec![1.5, 3.0, 6.0, 7.5]);
        assert_eq!(out.samples()[3].t, 3.0);
    }

    fn sample_variance(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    }

    #[test]
    fn smoothing_reduces_white_noise_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let values: Vec<f64> = (0..2000).map(|_| 45.0 + 5.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let s = series(&values, 0.02);
        let out = condition_series(&s, &ConditionParams { clip_max_deg: 90.0, smooth_window_n: 5 }).unwrap();
        let out_vals: Vec<f64> = out.samples().iter().map(|p| p.angle).collect();
        let (vin, vout) = (sample_variance(&values), sample_variance(&out_vals));
        // white noise through a 5-tap average keeps roughly 1/5 of the variance
        assert!(vout < vin, "{vout} !< {vin}");
        assert!(vout < 0.3 * vin);
    }

    #[test]
    fn no_taps_in_silence() {
        let s = series(&[0.0; 100], 0.02);
        assert!(detect_taps(&s, 15.0, 0.1).unwrap().is_empty());
        assert!(detect_taps(&AngleSeries::empty(Channel::Index), 15.0, 0.1).unwrap().is_empty());
    }

    #[test]
    fn single_triangle_pulse() {
        let vals: Vec<f64> = (0..=20).map(|i| 30.0 - 3.0 * (i as f64 - 10.0).abs()).collect();
        let s = series(&vals, 0.02);
        let taps = detect_taps(&s, 15.0, 0.1).unwrap();
        assert_eq!(taps.len(), 1);
        assert_eq!(taps[0].amplitude, 30.0);
        assert_eq!(taps[0].t_peak, 10.0 * 0.02);
    }

    #[test]
    fn detector_parameter_errors() {
        let s = series(&[0.0], 0.02);
        assert!(detect_taps(&s, 0.0, 0.1).is_err());
        assert!(detect_taps(&s, 15.0, -1.0).is_err());
    }

    /// Independent oracle: strict local maxima (left neighbour lower, right
    /// neighbour lower or equal) at or above the threshold.
    fn brute_force_peaks(values: &[f64], threshold: f64) -> usize {
        (1..values.len().saturating_sub(1))
            .filter(|&i| values[i] >= threshold && values[i] > values[i - 1] && values[i] >= values[i + 1])
            .count()
    }

    #[test]
    fn sinusoid_two_hertz() {
        let fs = 50.0;
        let vals: Vec<f64> = (0..500)
            .map(|i| {
                let t = i as f64 / fs;
                30.0 + 30.0 * (2.0 * std::f64::consts::PI * 2.0 * t).sin()
            })
            .collect();
        let oracle = brute_force_peaks(&vals, 15.0);
        assert_eq!(oracle, 20);
        let taps = detect_taps(&series(&vals, 1.0 / fs), 15.0, 0.1).unwrap();
        assert_eq!(taps.len(), oracle);
    }

    #[test]
    fn hysteresis_suppresses_chatter() {
        // dips to 10 (above release level 7.5) do not re-arm
        let vals = [0.0, 20.0, 10.0, 22.0, 10.0, 21.0, 0.0];
        let taps = detect_taps(&series(&vals, 0.1), 15.0, 0.0).unwrap();
        assert_eq!(taps.len(), 1);
        assert_eq!(taps[0].amplitude, 22.0);
    }

    #[test]
    fn refractory_gap() {
        let vals = [0.0, 20.0, 0.0, 20.0, 0.0, 0.0, 0.0, 20.0, 0.0];
        let taps = detect_taps(&series(&vals, 0.05), 15.0, 0.15).unwrap();
        let times: Vec<f64> = taps.iter().map(|e| e.t_peak).collect();
        assert_eq!(times, vec![0.05, 0.35000000000000003]);
    }

    #[test]
    fn open_pulse_at_end() {
        let rising = [0.0, 10.0, 20.0, 30.0];
        assert!(detect_taps(&series(&rising, 0.1), 15.0, 0.0).unwrap().is_empty());
        let falling = [0.0, 20.0, 30.0, 25.0];
        assert_eq!(detect_taps(&series(&falling, 0.1), 15.0, 0.0).unwrap().len(), 1);
    }

    #[test]
    fn uniform_taps_profile() {
        let times: Vec<f64> = (0..20).map(|k| 0.25 + 0.5 * k as f64).collect();
        let p = tap_frequency_profile(&taps_at(&times), 10.0, 2.0, 2.0).unwrap();
        assert_eq!(p.points.len(), 5);
        assert!(p.points.iter().all(|pt| pt.freq == 2.0));
        let centers: Vec<f64> = p.points.iter().map(|pt| pt.t_center).collect();
        assert_eq!(centers, vec![1.0, 3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn empty_profile() {
        let p = tap_frequency_profile(&[], 10.0, 2.0, 1.0).unwrap();
        assert_eq!(p.points.len(), 9);
        assert!(p.points.iter().all(|pt| pt.freq == 0.0));
    }

    #[test]
    fn short_session_single_window() {
        let p = tap_frequency_profile(&taps_at(&[0.5]), 1.0, 2.0, 1.0).unwrap();
        assert_eq!(p.points.len(), 1);
        assert_eq!(p.points[0].freq, 0.5);
    }

    #[test]
    fn profile_errors() {
        assert!(matches!(tap_frequency_profile(&[], 0.0, 2.0, 1.0), Err(SignalError::InvalidSession(_))));
        assert!(tap_frequency_profile(&[], 10.0, 0.0, 1.0).is_err());
        assert!(tap_frequency_profile(&[], 10.0, 2.0, 0.0).is_err());
    }

    #[test]
    fn ramp_taps_give_nondecreasing_profile() {
        // intervals shrink linearly from 0.5 s by 5 ms per tap
        let mut times = Vec::new();
        let (mut t, mut gap) = (0.5, 0.5);
        while t < 20.0 {
            times.push(t);
            t += gap;
            gap -= 0.005;
        }
        // hand oracle: count per 4 s window with hop 4 s
        let oracle: Vec<f64> = (0..5)
            .map(|w| {
                let (a, b) = (4.0 * w as f64, 4.0 * w as f64 + 4.0);
                times.iter().filter(|&&x| x >= a && x < b).count() as f64 / 4.0
            })
            .collect();
        assert_eq!(oracle, vec![2.0, 2.25, 2.5, 3.0, 3.5]);
        let p = tap_frequency_profile(&taps_at(&times), 20.0, 4.0, 4.0).unwrap();
        let got: Vec<f64> = p.points.iter().map(|pt| pt.freq).collect();
        assert_eq!(got, oracle);
        assert!(got.windows(2).all(|w| w[1] >= w[0]), "{got:?}");
    }

    proptest! {
        #[test]
        fn angle_monotone_in_voltage(v1 in 0.01f64..5.0, v2 in 0.01f64..5.0, bent_high in any::<bool>()) {
            let mut s = spec();
            if !bent_high {
                std::mem::swap(&mut s.r_flat, &mut s.r_bent);
            }
            let (lo, hi) = if v1 <= v2 { (v1, v2) } else { (v2, v1) };
            let a = |v: f64| resistance_to_angle(voltage_to_resistance(&sample(v), &s).unwrap(), &s);
            if bent_high {
                prop_assert!(a(lo) >= a(hi));
            } else {
                prop_assert!(a(lo) <= a(hi));
            }
        }

        #[test]
        fn conditioning_never_raises_max(values in prop::collection::vec(-20.0f64..120.0, 1..80), half in 0usize..4) {
            let s = series(&values, 0.02);
            let params = ConditionParams { clip_max_deg: 90.0, smooth_window_n: 2 * half + 1 };
            let out = condition_series(&s, &params).unwrap();
            prop_assert_eq!(out.len(), s.len());
            let max_in = values.iter().map(|v| v.clamp(0.0, 90.0)).fold(f64::MIN, f64::max);
            let max_out = out.samples().iter().map(|p| p.angle).fold(f64::MIN, f64::max);
            prop_assert!(max_out <= max_in);
            prop_assert_eq!(condition_series(&s, &params).unwrap(), out);
        }

        #[test]
        fn tap_count_invariant_under_coscaling(values in prop::collection::vec(0.0f64..60.0, 0..120), scale in 0.01f64..100.0) {
            let s = series(&values, 0.02);
            let scaled: Vec<f64> = values.iter().map(|v| v * scale).collect();
            let n1 = detect_taps(&s, 15.0, 0.05).unwrap().len();
            let n2 = detect_taps(&series(&scaled, 0.02), 15.0 * scale, 0.05).unwrap().len();
            prop_assert_eq!(n1, n2);
        }

        #[test]
        fn uniform_period_within_quantization(period in 0.1f64..2.0, phase in 0.0f64..1.0, window in 1.0f64..5.0) {
            let len = 30.0;
            let mut times = Vec::new();
            let mut t = phase * period;
            while t < len {
                times.push(t);
                t += period;
            }
            let p = tap_frequency_profile(&taps_at(&times), len, window, 0.5).unwrap();
            for pt in &p.points {
                if pt.t_center + window / 2.0 <= len {
                    prop_assert!((pt.freq - 1.0 / period).abs() <= 1.0 / window + 1e-9);
                }
            }
        }
    }
}

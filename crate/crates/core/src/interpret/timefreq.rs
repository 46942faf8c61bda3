//! Band-limited time-frequency analysis with complex Morlet wavelets
//! (7 cycles by default). Power is averaged within named frequency bands.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpret::montage::Montage;

pub const DEFAULT_CYCLES: f64 = 7.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Band {
    pub name: String,
    pub low_hz: f64,
    pub high_hz: f64,
}

/// Named frequency bands; defaults are theta [4,8), alpha [8,13),
/// gamma [30,80].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandSpec {
    pub bands: Vec<Band>,
}

impl Default for BandSpec {
    fn default() -> Self {
        BandSpec {
            bands: vec![
                Band { name: "theta".into(), low_hz: 4.0, high_hz: 8.0 },
                Band { name: "alpha".into(), low_hz: 8.0, high_hz: 13.0 },
                Band { name: "gamma".into(), low_hz: 30.0, high_hz: 80.0 },
            ],
        }
    }
}

impl BandSpec {
    pub fn validate(&self, sampling_rate_hz: f64) -> Result<()> {
        let nyquist = sampling_rate_hz / 2.0;
        for b in &self.bands {
            if b.low_hz <= 0.0 || b.high_hz <= b.low_hz {
                return Err(Error::data(format!(
                    "band {} has invalid range [{}, {})",
                    b.name, b.low_hz, b.high_hz
                )));
            }
            if b.high_hz > nyquist {
                return Err(Error::data(format!(
                    "band {} upper edge {} Hz exceeds Nyquist {nyquist} Hz",
                    b.name, b.high_hz
                )));
            }
        }
        Ok(())
    }
}

/// Power per (band, electrode, time).
#[derive(Debug, Clone)]
pub struct TimeFrequencyMap {
    pub band_names: Vec<String>,
    pub power: Array3<f64>,
    pub sampling_rate_hz: f64,
}

impl TimeFrequencyMap {
    /// Mean power per band across electrodes and time.
    pub fn band_power(&self) -> Vec<f64> {
        (0..self.band_names.len())
            .map(|b| self.power.index_axis(ndarray::Axis(0), b).mean().unwrap())
            .collect()
    }

    /// Mean power over a montage group: (band, group, time).
    pub fn aggregate_groups(&self, montage: &Montage, groups: &[&str]) -> Result<Array3<f64>> {
        let (nb, _e, t) = {
            let s = self.power.shape();
            (s[0], s[1], s[2])
        };
        let mut out = Array3::<f64>::zeros((nb, groups.len(), t));
        for (gi, name) in groups.iter().enumerate() {
            let idx = montage.group_indices(name)?;
            if idx.is_empty() {
                return Err(Error::Montage(format!("group {name} is empty")));
            }
            for b in 0..nb {
                for &ei in &idx {
                    for ti in 0..t {
                        out[[b, gi, ti]] += self.power[[b, ei, ti]];
                    }
                }
                for ti in 0..t {
                    out[[b, gi, ti]] /= idx.len() as f64;
                }
            }
        }
        Ok(out)
    }
}

/// L2-normalized complex Morlet wavelet at `freq` Hz: (real, imag) parts.
fn morlet(freq: f64, sampling_rate_hz: f64, n_cycles: f64) -> (Vec<f64>, Vec<f64>) {
    let sigma_t = n_cycles / (2.0 * std::f64::consts::PI * freq);
    let half = (3.5 * sigma_t * sampling_rate_hz).ceil() as i64;
    let mut re = Vec::with_capacity((2 * half + 1) as usize);
    let mut im = Vec::with_capacity((2 * half + 1) as usize);
    let mut norm = 0.0;
    for k in -half..=half {
        let t = k as f64 / sampling_rate_hz;
        let envelope = (-t * t / (2.0 * sigma_t * sigma_t)).exp();
        let phase = std::f64::consts::TAU * freq * t;
        re.push(envelope * phase.cos());
        im.push(envelope * phase.sin());
        norm += envelope * envelope;
    }
    let norm = norm.sqrt();
    for v in re.iter_mut().chain(im.iter_mut()) {
        *v /= norm;
    }
    (re, im)
}

/// |CWT|^2 of one channel at one frequency, same-length output.
fn cwt_power(signal: &[f64], freq: f64, sampling_rate_hz: f64, n_cycles: f64) -> Vec<f64> {
    let (re, im) = morlet(freq, sampling_rate_hz, n_cycles);
    let half = (re.len() / 2) as i64;
    let n = signal.len() as i64;
    let mut out = Vec::with_capacity(signal.len());
    for t in 0..n {
        let mut acc_re = 0.0;
        let mut acc_im = 0.0;
        for (k, (wr, wi)) in re.iter().zip(im.iter()).enumerate() {
            let idx = t + (k as i64 - half);
            if idx >= 0 && idx < n {
                let x = signal[idx as usize];
                // correlation with the conjugate wavelet
                acc_re += x * wr;
                acc_im -= x * wi;
            }
        }
        out.push(acc_re * acc_re + acc_im * acc_im);
    }
    out
}

/// Frequencies probed within a band: midpoints of an even subdivision.
fn band_freqs(band: &Band) -> Vec<f64> {
    let n = ((band.high_hz - band.low_hz).round() as usize).clamp(2, 8);
    (0..n)
        .map(|i| band.low_hz + (i as f64 + 0.5) * (band.high_hz - band.low_hz) / n as f64)
        .collect()
}

/// Time-frequency decomposition of an (electrodes x time) array: complex
/// Morlet transform per channel, power averaged within each named band.
pub fn time_frequency_map(
    signal: &Array2<f64>,
    bands: &BandSpec,
    sampling_rate_hz: f64,
) -> Result<TimeFrequencyMap> {
    bands.validate(sampling_rate_hz)?;
    let (e, t) = (signal.shape()[0], signal.shape()[1]);
    let mut power = Array3::<f64>::zeros((bands.bands.len(), e, t));
    for (bi, band) in bands.bands.iter().enumerate() {
        let freqs = band_freqs(band);
        for ei in 0..e {
            let chan: Vec<f64> = signal.row(ei).to_vec();
            for f in &freqs {
                let p = cwt_power(&chan, *f, sampling_rate_hz, DEFAULT_CYCLES);
                for ti in 0..t {
                    power[[bi, ei, ti]] += p[ti];
                }
            }
            for ti in 0..t {
                power[[bi, ei, ti]] /= freqs.len() as f64;
            }
        }
    }
    Ok(TimeFrequencyMap {
        band_names: bands.bands.iter().map(|b| b.name.clone()).collect(),
        power,
        sampling_rate_hz,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sinusoid(freq: f64, fs: f64, e: usize, t: usize) -> Array2<f64> {
        Array2::from_shape_fn((e, t), |(_, ti)| {
            (std::f64::consts::TAU * freq * ti as f64 / fs).sin()
        })
    }

    #[test]
    fn ten_hz_is_alpha_dominant() {
        let sig = sinusoid(10.0, 250.0, 2, 250);
        let tf = time_frequency_map(&sig, &BandSpec::default(), 250.0).unwrap();
        let p = tf.band_power();
        let (theta, alpha, gamma) = (p[0], p[1], p[2]);
        assert!(alpha >= 10.0 * theta, "alpha {alpha} vs theta {theta}");
        assert!(alpha >= 10.0 * gamma, "alpha {alpha} vs gamma {gamma}");
    }

    #[test]
    fn forty_hz_is_gamma_dominant_and_matches_dft_oracle() {
        let fs = 250.0;
        let t = 250;
        let sig = sinusoid(40.0, fs, 1, t);
        let tf = time_frequency_map(&sig, &BandSpec::default(), fs).unwrap();
        let p = tf.band_power();
        assert!(p[2] > p[0] && p[2] > p[1], "gamma should dominate: {p:?}");

        // discrete-Fourier oracle: the dominant bin of the same signal
        // sits at 40 Hz
        let chan: Vec<f64> = sig.row(0).to_vec();
        let mut best_bin = 0;
        let mut best_power = 0.0;
        for k in 1..t / 2 {
            let mut re = 0.0;
            let mut im = 0.0;
            for (n, x) in chan.iter().enumerate() {
                let ang = std::f64::consts::TAU * k as f64 * n as f64 / t as f64;
                re += x * ang.cos();
                im -= x * ang.sin();
            }
            let pw = re * re + im * im;
            if pw > best_power {
                best_power = pw;
                best_bin = k;
            }
        }
        let bin_hz = best_bin as f64 * fs / t as f64;
        assert!((bin_hz - 40.0).abs() < 1.0, "DFT peak at {bin_hz} Hz");
    }

    #[test]
    fn zero_signal_gives_zero_map() {
        let sig = Array2::<f64>::zeros((3, 100));
        let tf = time_frequency_map(&sig, &BandSpec::default(), 250.0).unwrap();
        assert!(tf.power.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn band_above_nyquist_rejected() {
        let bands = BandSpec {
            bands: vec![Band { name: "hf".into(), low_hz: 100.0, high_hz: 140.0 }],
        };
        let sig = Array2::<f64>::zeros((1, 64));
        assert!(time_frequency_map(&sig, &bands, 250.0).is_err());
        // fine at a higher sampling rate
        assert!(time_frequency_map(&sig, &bands, 300.0).is_ok());
    }

    #[test]
    fn group_aggregation_averages_members() {
        let m = Montage::ring(4);
        let mut sig = Array2::<f64>::zeros((4, 64));
        for ti in 0..64 {
            sig[[0, ti]] = (std::f64::consts::TAU * 10.0 * ti as f64 / 250.0).sin();
        }
        let tf = time_frequency_map(&sig, &BandSpec::default(), 250.0).unwrap();
        let groups: Vec<&str> = m.groups.keys().map(|s| s.as_str()).collect();
        let agg = tf.aggregate_groups(&m, &groups).unwrap();
        assert_eq!(agg.shape()[0], 3);
        assert_eq!(agg.shape()[1], groups.len());
    }
}

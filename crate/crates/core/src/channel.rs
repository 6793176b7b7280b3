//! Wireless environment: device placement on a disk cell, log-distance path
//! loss, Rayleigh fading, and Shannon-rate spectral efficiencies.

use rand::Rng;
use rand_distr::{Distribution, Exp1, OpenClosed01};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedTree;

/// Whether fading is drawn once (round 0) or fresh every round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FadingMode {
    Static,
    PerRound,
}

/// Cell geometry and radio parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CellConfig {
    /// Cell radius in kilometres.
    pub radius_km: f64,
    /// Transmit power in dBm (used for both link directions).
    pub tx_power_dbm: f64,
    /// Noise power spectral density in dBm/Hz.
    pub noise_psd_dbm_hz: f64,
    /// Per-device bandwidth in Hz.
    pub bandwidth_hz: f64,
    pub fading: FadingMode,
    /// Draw separate fading for uplink and downlink instead of sharing one.
    pub independent_uplink_fading: bool,
    /// Spectral efficiencies below this are treated as outage.
    pub outage_floor: f64,
}

impl Default for CellConfig {
    fn default() -> Self {
        CellConfig {
            radius_km: 0.15,
            tx_power_dbm: 23.0,
            noise_psd_dbm_hz: -174.0,
            bandwidth_hz: 1e6,
            fading: FadingMode::PerRound,
            independent_uplink_fading: false,
            outage_floor: 0.1,
        }
    }
}

impl CellConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radius_km > 0.0 && self.bandwidth_hz > 0.0 && self.outage_floor >= 0.0 {
            Ok(())
        } else {
            Err(Error::domain("cell radius and bandwidth must be positive"))
        }
    }
}

/// Device distances from the access point, in kilometres.
#[derive(Debug, Clone)]
pub struct DevicePlacement {
    pub distances_km: Vec<f64>,
}

/// Places devices uniformly over the disk: the radial CDF is proportional
/// to r^2, so r = radius * sqrt(u) with u uniform on (0, 1].
pub fn place_devices<R: Rng>(config: &CellConfig, count: usize, rng: &mut R) -> DevicePlacement {
    let distances_km = (0..count)
        .map(|_| {
            let u: f64 = OpenClosed01.sample(rng);
            config.radius_km * u.sqrt()
        })
        .collect();
    DevicePlacement { distances_km }
}

/// Path loss in dB at distance `d_km` kilometres: 128.1 + 37.6 log10(d).
pub fn path_loss_db(d_km: f64) -> Result<f64> {
    if d_km > 0.0 {
        Ok(128.1 + 37.6 * d_km.log10())
    } else {
        Err(Error::domain(format!("distance {d_km} km must be positive")))
    }
}

/// One Rayleigh-fading power draw |h|^2, exponential with unit mean.
pub fn rayleigh_power<R: Rng>(rng: &mut R) -> f64 {
    Exp1.sample(rng)
}

/// Shannon spectral efficiency log2(1 + SNR) with
/// SNR = P_tx * 10^(-PL/10) * |h|^2 / (N0 * B), all powers in mW.
pub fn spectral_efficiency(config: &CellConfig, d_km: f64, fading_power: f64) -> Result<f64> {
    if fading_power < 0.0 {
        return Err(Error::domain(format!("fading power {fading_power} must be non-negative")));
    }
    let pl_db = path_loss_db(d_km)?;
    let rx_dbm = config.tx_power_dbm - pl_db;
    let noise_mw = 10f64.powf(config.noise_psd_dbm_hz / 10.0) * config.bandwidth_hz;
    let snr = 10f64.powf(rx_dbm / 10.0) * fading_power / noise_mw;
    Ok((1.0 + snr).log2())
}

/// Per-device link state for one round.
#[derive(Debug, Clone, Copy)]
pub struct LinkRates {
    pub r_dl: f64,
    pub r_ul: f64,
    /// True when either direction fell below the outage floor.
    pub outage: bool,
}

/// Spectral efficiencies of every device for a round. Fading draws come from
/// per-(round, device) streams; static mode replays the round-0 draw.
pub fn link_rates_for_round(
    config: &CellConfig,
    placement: &DevicePlacement,
    round: usize,
    tree: &SeedTree,
) -> Result<Vec<LinkRates>> {
    let fading_round = match config.fading {
        FadingMode::Static => 0,
        FadingMode::PerRound => round,
    };
    placement
        .distances_km
        .iter()
        .enumerate()
        .map(|(device, &d)| {
            let mut rng = tree.stream_at("fading", &[fading_round as u64, device as u64]);
            let h_dl = rayleigh_power(&mut rng);
            let h_ul = if config.independent_uplink_fading {
                rayleigh_power(&mut rng)
            } else {
                h_dl
            };
            let r_dl = spectral_efficiency(config, d, h_dl)?;
            let r_ul = spectral_efficiency(config, d, h_ul)?;
            Ok(LinkRates {
                r_dl,
                r_ul,
                outage: r_dl < config.outage_floor || r_ul < config.outage_floor,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_loss_reference_points() {
        assert!((path_loss_db(1.0).unwrap() - 128.1).abs() < 1e-12);
        assert!((path_loss_db(0.1).unwrap() - 90.5).abs() < 1e-12);
        assert!((path_loss_db(0.15).unwrap() - 97.121).abs() < 1e-3);
        assert!(path_loss_db(0.0).is_err());
        assert!(path_loss_db(-1.0).is_err());
    }

    #[test]
    fn spectral_efficiency_reference_point() {
        // tx 23 dBm, noise -174 dBm/Hz, B = 1 MHz, d = 0.1 km, fading 1:
        // SNR = 46.5 dB, R = log2(1 + 10^4.65).
        let config = CellConfig::default();
        let r = spectral_efficiency(&config, 0.1, 1.0).unwrap();
        let expected = (1.0 + 10f64.powf(4.65)).log2();
        assert!((r - expected).abs() < 1e-12);
        assert!((r - 15.45).abs() < 0.05);
    }

    #[test]
    fn snr_one_gives_unit_rate() {
        // Pick fading so that SNR is exactly 1.
        let config = CellConfig::default();
        let pl = path_loss_db(0.1).unwrap();
        let noise_mw = 10f64.powf(config.noise_psd_dbm_hz / 10.0) * config.bandwidth_hz;
        let fading = noise_mw / 10f64.powf((config.tx_power_dbm - pl) / 10.0);
        let r = spectral_efficiency(&config, 0.1, fading).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deep_fade_gives_zero_rate() {
        let config = CellConfig::default();
        assert_eq!(spectral_efficiency(&config, 0.1, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn rate_monotone_in_distance_and_fading() {
        let config = CellConfig::default();
        let near = spectral_efficiency(&config, 0.05, 1.0).unwrap();
        let far = spectral_efficiency(&config, 0.15, 1.0).unwrap();
        assert!(near > far);
        let weak = spectral_efficiency(&config, 0.1, 0.5).unwrap();
        let strong = spectral_efficiency(&config, 0.1, 2.0).unwrap();
        assert!(strong > weak);
    }

    #[test]
    fn placement_is_deterministic_and_contained() {
        let config = CellConfig::default();
        let tree = SeedTree::new(4);
        let a = place_devices(&config, 16, &mut tree.stream("placement"));
        let b = place_devices(&config, 16, &mut tree.stream("placement"));
        assert_eq!(a.distances_km, b.distances_km);
        assert!(a
            .distances_km
            .iter()
            .all(|&d| d > 0.0 && d <= config.radius_km));
    }

    #[test]
    fn static_fading_replays_round_zero() {
        let config = CellConfig {
            fading: FadingMode::Static,
            ..CellConfig::default()
        };
        let tree = SeedTree::new(9);
        let placement = place_devices(&config, 4, &mut tree.stream("placement"));
        let r0 = link_rates_for_round(&config, &placement, 0, &tree).unwrap();
        let r5 = link_rates_for_round(&config, &placement, 5, &tree).unwrap();
        for (a, b) in r0.iter().zip(&r5) {
            assert_eq!(a.r_dl, b.r_dl);
            assert_eq!(a.r_ul, b.r_ul);
        }

        let per_round = CellConfig::default();
        let r0 = link_rates_for_round(&per_round, &placement, 0, &tree).unwrap();
        let r5 = link_rates_for_round(&per_round, &placement, 5, &tree).unwrap();
        assert!(r0.iter().zip(&r5).any(|(a, b)| a.r_dl != b.r_dl));
    }

    #[test]
    fn shared_fading_links_match() {
        let config = CellConfig::default();
        let tree = SeedTree::new(2);
        let placement = place_devices(&config, 8, &mut tree.stream("placement"));
        for rates in link_rates_for_round(&config, &placement, 3, &tree).unwrap() {
            assert_eq!(rates.r_dl, rates.r_ul);
        }
        let independent = CellConfig {
            independent_uplink_fading: true,
            ..config
        };
        let rates = link_rates_for_round(&independent, &placement, 3, &tree).unwrap();
        assert!(rates.iter().any(|r| r.r_dl != r.r_ul));
    }
}

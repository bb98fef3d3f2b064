//! Noise schedule, sampling grid and DDIM step coefficients.
//!
//! Sampling positions run `0..=T` where `T` is the grid length. Position 0
//! is the clean boundary with `α = 1`; position `s ≥ 1` is the grid entry
//! `grid[s-1]` with `α = alphas[grid[s-1]]`. Inversion walks `0 → T`, the
//! reverse process walks `T → 0`.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kv::{self, KvMap};

/// Number of sampling steps used unless configured otherwise.
pub const DEFAULT_GRID_STEPS: usize = 50;
/// Length of the base diffusion process.
pub const DEFAULT_TOTAL_STEPS: usize = 1000;

/// How the cumulative signal coefficients are produced.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleFamily {
    /// Linear β; with `scaled` the square roots of β are linear instead.
    LinearBeta {
        beta_start: f64,
        beta_end: f64,
        scaled: bool,
    },
    /// Squared-cosine cumulative schedule with the usual small offset.
    Cosine { offset: f64 },
    /// Caller-supplied cumulative coefficients, one per base timestep.
    Explicit(Vec<f64>),
}

impl Default for ScheduleFamily {
    fn default() -> Self {
        ScheduleFamily::LinearBeta {
            beta_start: 0.00085,
            beta_end: 0.012,
            scaled: true,
        }
    }
}

impl ScheduleFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleFamily::LinearBeta { .. } => "linear-beta",
            ScheduleFamily::Cosine { .. } => "cosine",
            ScheduleFamily::Explicit(_) => "explicit-list",
        }
    }

    fn alphas(&self, total_steps: usize) -> Result<Vec<f64>> {
        match self {
            ScheduleFamily::LinearBeta {
                beta_start,
                beta_end,
                scaled,
            } => {
                if !(*beta_start > 0.0 && *beta_end < 1.0 && beta_start <= beta_end) {
                    return Err(Error::InvalidSchedule(format!(
                        "beta range [{beta_start}, {beta_end}] must satisfy 0 < start <= end < 1"
                    )));
                }
                let betas: Vec<f64> = (0..total_steps)
                    .map(|i| {
                        let frac = if total_steps > 1 {
                            i as f64 / (total_steps - 1) as f64
                        } else {
                            0.0
                        };
                        if *scaled {
                            let s = beta_start.sqrt() + frac * (beta_end.sqrt() - beta_start.sqrt());
                            s * s
                        } else {
                            beta_start + frac * (beta_end - beta_start)
                        }
                    })
                    .collect();
                Ok(cumulative(&betas))
            }
            ScheduleFamily::Cosine { offset } => {
                let f = |t: f64| {
                    let v = ((t + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2).cos();
                    v * v
                };
                let n = total_steps as f64;
                let betas: Vec<f64> = (0..total_steps)
                    .map(|i| {
                        let b = 1.0 - f((i + 1) as f64 / n) / f(i as f64 / n);
                        b.min(0.999)
                    })
                    .collect();
                Ok(cumulative(&betas))
            }
            ScheduleFamily::Explicit(values) => {
                if values.len() != total_steps {
                    return Err(Error::InvalidSchedule(format!(
                        "explicit list has {} entries, expected {total_steps}",
                        values.len()
                    )));
                }
                Ok(values.clone())
            }
        }
    }
}

fn cumulative(betas: &[f64]) -> Vec<f64> {
    let mut acc = 1.0;
    betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect()
}

/// What a network sees at a sampling position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timestep {
    /// Sampling position in `0..=T`.
    pub position: usize,
    /// Base-process timestep index handed to pretrained networks (0 at the clean boundary).
    pub index: usize,
    /// Cumulative signal coefficient at this position.
    pub alpha: f64,
}

/// Immutable noise schedule plus sampling grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    family: ScheduleFamily,
    alphas: Vec<f64>,
    grid: Vec<usize>,
}

/// Build a schedule over `total_steps` base timesteps with a uniform-stride
/// grid of `grid_steps` entries starting at index 0.
pub fn build_schedule(total_steps: usize, grid_steps: usize, family: ScheduleFamily) -> Result<DiffusionSchedule> {
    if total_steps == 0 || grid_steps == 0 {
        return Err(Error::InvalidSchedule(
            "total_steps and grid_steps must be positive".into(),
        ));
    }
    if grid_steps > total_steps {
        return Err(Error::InvalidSchedule(format!(
            "grid_steps {grid_steps} exceeds total_steps {total_steps}"
        )));
    }
    let stride = total_steps / grid_steps;
    let grid = (0..grid_steps).map(|i| i * stride).collect();
    DiffusionSchedule::with_grid(family, total_steps, grid)
}

impl DiffusionSchedule {
    /// Build a schedule with an explicit grid of base-timestep indices.
    pub fn with_grid(family: ScheduleFamily, total_steps: usize, grid: Vec<usize>) -> Result<Self> {
        let alphas = family.alphas(total_steps)?;
        for (i, a) in alphas.iter().enumerate() {
            if !(a.is_finite() && *a > 0.0 && *a <= 1.0) {
                return Err(Error::InvalidSchedule(format!("alpha[{i}] = {a} is outside (0, 1]")));
            }
        }
        if let Some(i) = alphas.windows(2).position(|w| w[1] >= w[0]) {
            return Err(Error::InvalidSchedule(format!(
                "alphas must be strictly decreasing (alpha[{}] = {} >= alpha[{i}] = {})",
                i + 1,
                alphas[i + 1],
                alphas[i]
            )));
        }
        if grid.is_empty() {
            return Err(Error::InvalidSchedule("empty grid".into()));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidSchedule("grid must be strictly increasing".into()));
        }
        if *grid.last().unwrap() >= total_steps {
            return Err(Error::InvalidSchedule(format!(
                "grid index {} outside [0, {total_steps})",
                grid.last().unwrap()
            )));
        }
        Ok(Self { family, alphas, grid })
    }

    /// Explicit coefficients, sampled at every index.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        let n = alphas.len();
        Self::with_grid(ScheduleFamily::Explicit(alphas), n, (0..n).collect())
    }

    /// Scaled-linear β over 1000 base steps with a uniform grid.
    pub fn default_with_steps(grid_steps: usize) -> Result<Self> {
        build_schedule(DEFAULT_TOTAL_STEPS, grid_steps, ScheduleFamily::default())
    }

    pub fn family(&self) -> &ScheduleFamily {
        &self.family
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn grid(&self) -> &[usize] {
        &self.grid
    }

    pub fn total_steps(&self) -> usize {
        self.alphas.len()
    }

    /// Number of sampling steps `T`.
    pub fn steps(&self) -> usize {
        self.grid.len()
    }

    fn check(&self, position: usize) -> Result<()> {
        if position > self.steps() {
            Err(Error::OffGrid {
                position,
                steps: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    /// `α` at a sampling position; 1 at the clean boundary.
    pub fn alpha(&self, position: usize) -> Result<f64> {
        self.check(position)?;
        Ok(if position == 0 {
            1.0
        } else {
            self.alphas[self.grid[position - 1]]
        })
    }

    pub fn timestep(&self, position: usize) -> Result<Timestep> {
        Ok(Timestep {
            position,
            index: if position == 0 { 0 } else { self.grid[position - 1] },
            alpha: self.alpha(position)?,
        })
    }

    /// Reverse-step coefficient `γ_t = √(α_{t−1}/α_t) − √((1−α_{t−1})/(1−α_t))`.
    pub fn gamma(&self, position: usize) -> Result<f64> {
        if position == 0 {
            return Err(Error::OffGrid {
                position,
                steps: self.steps(),
            });
        }
        let a_t = self.alpha(position)?;
        let a_prev = self.alpha(position - 1)?;
        gamma_from(a_prev, a_t)
    }

    /// Forward-step coefficient `γ'_s = √(α_{s+1}/α_s) − √((1−α_{s+1})/(1−α_s))`.
    pub fn gamma_fwd(&self, position: usize) -> Result<f64> {
        let a_s = self.alpha(position)?;
        let a_next = self.alpha(position + 1)?;
        gamma_from(a_next, a_s)
    }

    /// `√(1−α_t)·γ_t` in its expanded form, finite even when `α_t = 1`.
    pub(crate) fn reverse_noise_coeff(&self, position: usize) -> Result<f64> {
        let a_t = self.alpha(position)?;
        if a_t < 1.0 {
            return Ok((1.0 - a_t).sqrt() * self.gamma(position)?);
        }
        let a_prev = self.alpha(position - 1)?;
        Ok((1.0 - a_t).sqrt() * (a_prev / a_t).sqrt() - (1.0 - a_prev).sqrt())
    }

    /// `√(1−α_s)·γ'_s`, finite at the clean boundary.
    pub(crate) fn forward_noise_coeff(&self, position: usize) -> Result<f64> {
        let a_s = self.alpha(position)?;
        if a_s < 1.0 {
            return Ok((1.0 - a_s).sqrt() * self.gamma_fwd(position)?);
        }
        let a_next = self.alpha(position + 1)?;
        Ok((1.0 - a_s).sqrt() * (a_next / a_s).sqrt() - (1.0 - a_next).sqrt())
    }

    /// Plain-text `schedule.*` block that reloads to a bit-identical schedule.
    pub fn to_kv(&self) -> String {
        let mut pairs: Vec<(&str, String)> = vec![
            ("schedule.family", self.family.name().to_string()),
            ("schedule.total_steps", self.total_steps().to_string()),
        ];
        match &self.family {
            ScheduleFamily::LinearBeta {
                beta_start,
                beta_end,
                scaled,
            } => {
                pairs.push(("schedule.beta_start", beta_start.to_string()));
                pairs.push(("schedule.beta_end", beta_end.to_string()));
                pairs.push(("schedule.scaled", scaled.to_string()));
            }
            ScheduleFamily::Cosine { offset } => {
                pairs.push(("schedule.cosine_offset", offset.to_string()));
            }
            ScheduleFamily::Explicit(values) => {
                pairs.push(("schedule.alphas", kv::join(values)));
            }
        }
        pairs.push(("schedule.grid", kv::join(&self.grid)));
        kv::render(pairs)
    }

    /// Rebuild from `schedule.*` keys. A missing `schedule.grid` falls back to
    /// a uniform grid of `schedule.grid_steps` (default 50).
    pub fn from_kv(map: &KvMap) -> Result<Self> {
        let family_name: String = map.parse_or("schedule.family", "linear-beta".to_string())?;
        let family = match family_name.as_str() {
            "linear-beta" => ScheduleFamily::LinearBeta {
                beta_start: map.parse_or("schedule.beta_start", 0.00085)?,
                beta_end: map.parse_or("schedule.beta_end", 0.012)?,
                scaled: map.parse_or("schedule.scaled", true)?,
            },
            "cosine" => ScheduleFamily::Cosine {
                offset: map.parse_or("schedule.cosine_offset", 0.008)?,
            },
            "explicit-list" => ScheduleFamily::Explicit(
                map.parse_list("schedule.alphas")?
                    .ok_or_else(|| Error::Config("explicit-list needs schedule.alphas".into()))?,
            ),
            other => {
                return Err(Error::Config(format!("unknown schedule.family `{other}`")));
            }
        };
        let total_default = match &family {
            ScheduleFamily::Explicit(v) => v.len(),
            _ => DEFAULT_TOTAL_STEPS,
        };
        let total: usize = map.parse_or("schedule.total_steps", total_default)?;
        match map.parse_list::<usize>("schedule.grid")? {
            Some(grid) => Self::with_grid(family, total, grid),
            None => {
                let default_grid = match &family {
                    ScheduleFamily::Explicit(v) => v.len(),
                    _ => DEFAULT_GRID_STEPS,
                };
                build_schedule(total, map.parse_or("schedule.grid_steps", default_grid)?, family)
            }
        }
    }

    /// SHA-256 of the plain-text block.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv().as_bytes()))
    }
}

fn gamma_from(a_prev: f64, a_t: f64) -> Result<f64> {
    if a_t >= 1.0 {
        return Err(Error::Singular(format!(
            "gamma needs alpha < 1 at the current position (alpha = {a_t})"
        )));
    }
    Ok((a_prev / a_t).sqrt() - ((1.0 - a_prev) / (1.0 - a_t)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn explicit_list_direct_construction() {
        let s = DiffusionSchedule::from_alphas(vec![1.0, 0.9, 0.8]).unwrap();
        assert_eq!(s.steps(), 3);
        assert!(s.alphas().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn fifty_step_grid_over_thousand() {
        let s = DiffusionSchedule::default_with_steps(DEFAULT_GRID_STEPS).unwrap();
        assert_eq!(s.grid().len(), 50);
        assert_eq!(s.grid()[0], 0);
        assert_eq!(s.grid()[49], 980);
        assert_eq!(s.total_steps(), 1000);
    }

    #[test]
    fn rejects_non_monotone_and_out_of_range() {
        assert!(DiffusionSchedule::from_alphas(vec![0.9, 0.9]).is_err());
        assert!(DiffusionSchedule::from_alphas(vec![0.9, 0.95]).is_err());
        assert!(DiffusionSchedule::from_alphas(vec![1.2, 0.5]).is_err());
        assert!(DiffusionSchedule::from_alphas(vec![0.5, 0.0]).is_err());
        assert!(build_schedule(10, 20, ScheduleFamily::default()).is_err());
        assert!(DiffusionSchedule::with_grid(ScheduleFamily::default(), 10, vec![3, 2]).is_err());
        assert!(DiffusionSchedule::with_grid(ScheduleFamily::default(), 10, vec![3, 10]).is_err());
    }

    #[test]
    fn gamma_closed_form() {
        // positions: 0 -> 1.0 (clean), 1 -> 0.9, 2 -> 0.8
        let s = DiffusionSchedule::from_alphas(vec![0.9, 0.8]).unwrap();
        let g = s.gamma(2).unwrap();
        let expected = (0.9_f64 / 0.8).sqrt() - (0.1_f64 / 0.2).sqrt();
        assert!((g - expected).abs() < 1e-15);
        assert!((g - 0.3535).abs() < 1e-4);
    }

    #[test]
    fn gamma_equal_alpha_is_zero() {
        assert_eq!(gamma_from(0.5, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn gamma_singular_at_alpha_one() {
        let s = DiffusionSchedule::from_alphas(vec![1.0, 0.9, 0.8]).unwrap();
        assert!(matches!(s.gamma(1), Err(Error::Singular(_))));
        assert!(s.gamma(0).is_err());
        assert!(s.gamma(4).is_err());
    }

    #[test]
    fn noise_coefficients_finite_at_clean_boundary() {
        let s = DiffusionSchedule::default_with_steps(10).unwrap();
        let a1 = s.alpha(1).unwrap();
        let c = s.forward_noise_coeff(0).unwrap();
        assert!((c + (1.0 - a1).sqrt()).abs() < 1e-15);
        let r = s.reverse_noise_coeff(1).unwrap();
        assert!((r - (1.0 - a1).sqrt() / a1.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn kv_round_trip_is_bit_exact() {
        for family in [
            ScheduleFamily::default(),
            ScheduleFamily::LinearBeta {
                beta_start: 1e-4,
                beta_end: 0.02,
                scaled: false,
            },
            ScheduleFamily::Cosine { offset: 0.008 },
        ] {
            let s = build_schedule(1000, 25, family).unwrap();
            let back = DiffusionSchedule::from_kv(&KvMap::parse(&s.to_kv(), "t").unwrap()).unwrap();
            assert_eq!(s, back);
            assert_eq!(s.fingerprint(), back.fingerprint());
        }
        let s = DiffusionSchedule::from_alphas(vec![0.99, 0.7, 1.0 / 3.0]).unwrap();
        let back = DiffusionSchedule::from_kv(&KvMap::parse(&s.to_kv(), "t").unwrap()).unwrap();
        assert_eq!(s, back);
    }

    proptest! {
        // the guided form with zero gradient collapses onto the plain DDIM reverse update
        #[test]
        fn gamma_reproduces_plain_reverse(
            a_prev in 0.05f64..0.999, frac in 0.05f64..0.95, x in -5.0f64..5.0, eps in -5.0f64..5.0
        ) {
            let a_t = a_prev * frac;
            let g = gamma_from(a_prev, a_t).unwrap();
            let rewritten = (a_prev / a_t).sqrt() * x - (1.0 - a_t).sqrt() * g * eps;
            let plain = a_prev.sqrt() * (x - (1.0 - a_t).sqrt() * eps) / a_t.sqrt()
                + (1.0 - a_prev).sqrt() * eps;
            let scale = plain.abs().max(1.0);
            prop_assert!((rewritten - plain).abs() / scale <= 1e-9);
        }

        // γ computed on the swapped (lower-noise, higher-noise) pair is the forward γ'.
        #[test]
        fn reversed_pair_matches_forward_gamma(a in 0.05f64..0.99, frac in 0.05f64..0.95) {
            let s = DiffusionSchedule::from_alphas(vec![a, a * frac]).unwrap();
            let fwd = s.gamma_fwd(1).unwrap();
            let swapped = gamma_from(a * frac, a).unwrap();
            prop_assert!((fwd - swapped).abs() <= 1e-12);
        }
    }
}

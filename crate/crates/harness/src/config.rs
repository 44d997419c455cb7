//! Flat `key = value` experiment configuration with dotted section names.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use num_complex::Complex64;
use wkb_core::modified::{ShellOptions, WavePacketSpec};
use wkb_core::potentials::{make_oscillatory_bq, Family, PotentialSpec};
use wkb_core::propagator::StepPolicy;
use wkb_core::schrodinger::BoxSpec;

/// Configuration problems. Reported with exit status 2.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key '{0}'")]
    UnknownKey(String),
    #[error("key '{key}': cannot parse '{value}'")]
    Value { key: String, value: String },
    #[error("missing key 'experiment'")]
    MissingExperiment,
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Experiment {
    VerifyBounds,
    CookDecay,
    CompareModifications,
    CauchyProfile,
    WaveOperator,
    Intertwining,
    ConditionsAudit,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::VerifyBounds,
        Experiment::CookDecay,
        Experiment::CompareModifications,
        Experiment::CauchyProfile,
        Experiment::WaveOperator,
        Experiment::Intertwining,
        Experiment::ConditionsAudit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::VerifyBounds => "verify-bounds",
            Experiment::CookDecay => "cook-decay",
            Experiment::CompareModifications => "compare-modifications",
            Experiment::CauchyProfile => "cauchy-profile",
            Experiment::WaveOperator => "wave-operator",
            Experiment::Intertwining => "intertwining",
            Experiment::ConditionsAudit => "conditions-audit",
        }
    }

    /// Threshold names the experiment reads, with defaults for `cfg`.
    fn default_thresholds(self, cfg: &ExperimentConfig) -> Vec<(&'static str, f64)> {
        let gamma = cfg.potential.effective_gamma();
        match self {
            Experiment::VerifyBounds => vec![("slope_slack", 0.1), ("min_r2", 0.8), ("closed_form_tol", 1e-10)],
            Experiment::CookDecay => {
                vec![("slope_max", -2.0 * gamma + 0.15), ("min_r2", 0.8), ("grid_rel_tol", 0.1)]
            }
            Experiment::CompareModifications => vec![("convergent_max", 1e-2), ("divergent_min", 5e-2)],
            Experiment::CauchyProfile => vec![],
            Experiment::WaveOperator => vec![("min_decreasing_fraction", 0.9)],
            Experiment::Intertwining => vec![("min_decreasing_fraction", 1.0)],
            Experiment::ConditionsAudit => vec![("allowance_factor", 40.0)],
        }
    }

    /// Thresholds that may be set but have no default.
    fn optional_thresholds(self) -> &'static [&'static str] {
        match self {
            Experiment::CauchyProfile => &["w_tail_max", "wmod_tail_max", "wmod_decreasing"],
            Experiment::WaveOperator => &["zero_max"],
            _ => &[],
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .iter()
            .copied()
            .find(|e| e.name() == s)
            .ok_or_else(|| ConfigError::Value { key: "experiment".into(), value: s.into() })
    }
}

/// Packet parameters; the angular content of packet `i` is drawn from seed `seed + i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacketConfig {
    pub delta1: f64,
    pub delta2: f64,
    pub l_max: usize,
    /// Number of packets for multi-packet experiments.
    pub count: usize,
    /// Free time `T` of the intertwining check.
    pub free_time: f64,
}

impl Default for PacketConfig {
    fn default() -> Self {
        Self { delta1: 0.5, delta2: 1.0, l_max: 4, count: 1, free_time: 1.0 }
    }
}

impl PacketConfig {
    /// Unit-norm packet from `seed`, restricted to orders divisible by `stride`.
    pub fn packet(&self, seed: u64, stride: usize) -> WavePacketSpec {
        let mut p = WavePacketSpec::seeded(seed, self.l_max, stride);
        p.delta1 = self.delta1;
        p.delta2 = self.delta2;
        let n = p.norm();
        p.angular.scale(Complex64::new(1.0 / n, 0.0));
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub potential: PotentialSpec,
    pub packet: PacketConfig,
    pub k_values: Vec<f64>,
    /// `tau` checkpoints for sphere experiments, `t` checkpoints otherwise.
    pub checkpoints: Vec<f64>,
    pub policy: StepPolicy,
    pub shells: ShellOptions,
    /// Points per axis of the 3-D grids used outside the box evolution.
    pub grid_n: usize,
    pub box_spec: BoxSpec,
    /// Time of the grid cross-check of the Cook residual (0 disables it).
    pub cook_grid_t: f64,
    /// Central-difference step of that cross-check.
    pub cook_fd_dt: f64,
    pub plots: bool,
    pub thresholds: BTreeMap<String, f64>,
}

fn dyadic(lo: u32, hi: u32) -> Vec<f64> {
    (lo..=hi).map(|n| 2f64.powi(n as i32)).collect()
}

impl ExperimentConfig {
    /// Desk-scale defaults for one experiment.
    pub fn default_for(experiment: Experiment) -> Self {
        let mut cfg = Self {
            experiment,
            seed: 7,
            output_dir: PathBuf::from("out"),
            potential: PotentialSpec::new(Family::ExampleDyadic).with_gamma(0.6).with_l_pot(8),
            packet: PacketConfig::default(),
            k_values: vec![1.0],
            checkpoints: dyadic(1, 9),
            policy: StepPolicy::default(),
            shells: ShellOptions::default(),
            grid_n: 128,
            box_spec: BoxSpec::for_horizon(64.0, 1.0),
            cook_grid_t: 0.0,
            cook_fd_dt: 1e-3,
            plots: true,
            thresholds: BTreeMap::new(),
        };
        match experiment {
            Experiment::VerifyBounds => {}
            Experiment::CookDecay => {
                cfg.checkpoints = dyadic(2, 8);
                cfg.cook_grid_t = 16.0;
            }
            Experiment::CompareModifications => {
                let mut q = PotentialSpec::new(Family::ExampleDyadic).with_gamma(0.7).with_l_pot(128).with_amplitude(0.08);
                q.first_block = 4;
                cfg.potential = make_oscillatory_bq(q).expect("valid default");
                cfg.policy.l_max = 136;
                cfg.policy.azimuthal_stride = 16;
                cfg.packet.l_max = 0;
                cfg.checkpoints = dyadic(4, 8);
            }
            Experiment::CauchyProfile => {
                // a single Y00 packet keeps the free 1/tau tail out of the profile
                cfg.potential = PotentialSpec::new(Family::L1Decay).with_gamma(0.6).with_amplitude(0.1);
                cfg.packet.l_max = 0;
            }
            Experiment::WaveOperator => {
                let mut q = PotentialSpec::new(Family::ExampleDyadic).with_gamma(0.7).with_l_pot(64).with_amplitude(0.1);
                q.first_block = 4;
                cfg.potential = make_oscillatory_bq(q).expect("valid default");
                cfg.policy.l_max = 72;
                cfg.policy.azimuthal_stride = 16;
                cfg.packet.count = 3;
                cfg.checkpoints = vec![8.0, 10.0, 12.0, 14.0, 16.0, 20.0, 24.0, 28.0, 32.0];
                cfg.box_spec = BoxSpec::for_horizon(32.0, 1.0);
                cfg.box_spec.dt = 0.15;
            }
            Experiment::Intertwining => {
                cfg.checkpoints = dyadic(4, 7);
            }
            Experiment::ConditionsAudit => {
                cfg.checkpoints = (0..64).map(|i| 2f64.powf(9.0 * i as f64 / 63.0)).collect();
            }
        }
        cfg.fill_thresholds();
        cfg
    }

    fn fill_thresholds(&mut self) {
        for (name, v) in self.experiment.default_thresholds(self) {
            self.thresholds.entry(name.to_string()).or_insert(v);
        }
    }

    pub fn threshold(&self, name: &str) -> Option<f64> {
        self.thresholds.get(name).copied()
    }

    /// Packet `i` compatible with the policy's azimuthal stride.
    pub fn packet(&self, i: usize) -> WavePacketSpec {
        self.packet.packet(self.seed.wrapping_add(i as u64), self.policy.azimuthal_stride)
    }

    /// Parses a configuration. Keys not given keep the experiment defaults; thresholds
    /// whose defaults depend on other parameters are derived after all keys are read.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, msg: format!("expected 'key = value', got '{line}'") })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let exp = pairs.iter().find(|(k, _)| k == "experiment").ok_or(ConfigError::MissingExperiment)?;
        let mut cfg = Self::default_for(exp.1.parse()?);
        let derived: Vec<String> = cfg.experiment.default_thresholds(&cfg).iter().map(|(n, _)| n.to_string()).collect();
        for n in &derived {
            cfg.thresholds.remove(n);
        }
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.fill_thresholds();
        Ok(cfg)
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || ConfigError::Value { key: key.into(), value: value.into() };
        fn num<T: FromStr>(v: &str, bad: impl Fn() -> ConfigError) -> Result<T> {
            v.parse().map_err(|_| bad())
        }
        if let Some(rest) = key.strip_prefix("potential.inner.") {
            let inner = self.potential.inner.get_or_insert_with(|| Box::new(PotentialSpec::default()));
            return set_potential(inner, rest, value).ok_or_else(bad)?.then_some(()).ok_or_else(|| ConfigError::UnknownKey(key.into()));
        }
        if let Some(rest) = key.strip_prefix("potential.") {
            return set_potential(&mut self.potential, rest, value).ok_or_else(bad)?.then_some(()).ok_or_else(|| ConfigError::UnknownKey(key.into()));
        }
        if let Some(name) = key.strip_prefix("threshold.") {
            let known = self.experiment.default_thresholds(self).iter().any(|(n, _)| *n == name)
                || self.experiment.optional_thresholds().contains(&name);
            if !known {
                return Err(ConfigError::UnknownKey(key.into()));
            }
            self.thresholds.insert(name.to_string(), num(value, bad)?);
            return Ok(());
        }
        match key {
            "experiment" => {
                if value.parse::<Experiment>()? != self.experiment {
                    return Err(ConfigError::Invalid("experiment given twice".into()));
                }
            }
            "seed" => self.seed = num(value, bad)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "packet.delta1" => self.packet.delta1 = num(value, bad)?,
            "packet.delta2" => self.packet.delta2 = num(value, bad)?,
            "packet.l_max" => self.packet.l_max = num(value, bad)?,
            "packet.count" => self.packet.count = num(value, bad)?,
            "packet.free_time" => self.packet.free_time = num(value, bad)?,
            "k_values" => self.k_values = parse_list(value).ok_or_else(bad)?,
            "checkpoints" => self.checkpoints = parse_list(value).ok_or_else(bad)?,
            "policy.dtau_max" => self.policy.dtau_max = num(value, bad)?,
            "policy.growth" => self.policy.growth = num(value, bad)?,
            "policy.l_max" => self.policy.l_max = num(value, bad)?,
            "policy.refine" => self.policy.refine = num(value, bad)?,
            "policy.azimuthal_stride" => self.policy.azimuthal_stride = num(value, bad)?,
            "shells.count" => self.shells.shells = num(value, bad)?,
            "shells.max_interp_residual" => self.shells.max_interp_residual = num(value, bad)?,
            "shells.max_count" => self.shells.max_shells = num(value, bad)?,
            "grid.n" => self.grid_n = num(value, bad)?,
            "box.half_width" => self.box_spec.half_width = num(value, bad)?,
            "box.n" => self.box_spec.n = num(value, bad)?,
            "box.dt" => self.box_spec.dt = num(value, bad)?,
            "box.t_max" => self.box_spec.t_max = num(value, bad)?,
            "cook.grid_t" => self.cook_grid_t = num(value, bad)?,
            "cook.fd_dt" => self.cook_fd_dt = num(value, bad)?,
            "plots" => self.plots = num(value, bad)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Every key, in a fixed order; the output parses back to an identical config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("experiment", self.experiment.to_string());
        put("seed", self.seed.to_string());
        put("output_dir", self.output_dir.display().to_string());
        for (k, v) in potential_pairs(&self.potential) {
            put(&format!("potential.{k}"), v);
        }
        if let Some(inner) = &self.potential.inner {
            for (k, v) in potential_pairs(inner) {
                put(&format!("potential.inner.{k}"), v);
            }
        }
        put("packet.delta1", fmt_f(self.packet.delta1));
        put("packet.delta2", fmt_f(self.packet.delta2));
        put("packet.l_max", self.packet.l_max.to_string());
        put("packet.count", self.packet.count.to_string());
        put("packet.free_time", fmt_f(self.packet.free_time));
        put("k_values", fmt_list(&self.k_values));
        put("checkpoints", fmt_list(&self.checkpoints));
        put("policy.dtau_max", fmt_f(self.policy.dtau_max));
        put("policy.growth", fmt_f(self.policy.growth));
        put("policy.l_max", self.policy.l_max.to_string());
        put("policy.refine", self.policy.refine.to_string());
        put("policy.azimuthal_stride", self.policy.azimuthal_stride.to_string());
        put("shells.count", self.shells.shells.to_string());
        put("shells.max_interp_residual", fmt_f(self.shells.max_interp_residual));
        put("shells.max_count", self.shells.max_shells.to_string());
        put("grid.n", self.grid_n.to_string());
        put("box.half_width", fmt_f(self.box_spec.half_width));
        put("box.n", self.box_spec.n.to_string());
        put("box.dt", fmt_f(self.box_spec.dt));
        put("box.t_max", fmt_f(self.box_spec.t_max));
        put("cook.grid_t", fmt_f(self.cook_grid_t));
        put("cook.fd_dt", fmt_f(self.cook_fd_dt));
        put("plots", self.plots.to_string());
        for (k, v) in &self.thresholds {
            put(&format!("threshold.{k}"), fmt_f(*v));
        }
        s
    }

    /// Range checks run before any computation.
    pub fn validate(&self) -> Result<()> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        self.potential.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.policy.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.packet.delta1 > 0.0 && self.packet.delta2 > self.packet.delta1 && self.packet.delta2.is_finite()) {
            return inv(format!("packet annulus needs 0 < delta1 < delta2, got ({}, {})", self.packet.delta1, self.packet.delta2));
        }
        if self.packet.count == 0 {
            return inv("packet.count must be at least 1".into());
        }
        if self.packet.l_max > self.policy.l_max {
            return inv(format!("packet.l_max={} exceeds policy.l_max={}", self.packet.l_max, self.policy.l_max));
        }
        if self.k_values.is_empty() || self.k_values.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
            return inv("k_values must be a non-empty list of positive numbers".into());
        }
        if self.checkpoints.is_empty()
            || self.checkpoints.iter().any(|t| !(*t > 0.0 && t.is_finite()))
            || self.checkpoints.windows(2).any(|w| w[1] <= w[0])
        {
            return inv("checkpoints must be positive and strictly increasing".into());
        }
        let min_points = match self.experiment {
            Experiment::VerifyBounds | Experiment::CookDecay => 4,
            Experiment::ConditionsAudit => 10,
            Experiment::Intertwining => 1,
            _ => 2,
        };
        if self.checkpoints.len() < min_points {
            return inv(format!("{} needs at least {min_points} checkpoints", self.experiment));
        }
        let first = self.checkpoints[0];
        match self.experiment {
            Experiment::VerifyBounds | Experiment::CauchyProfile | Experiment::CompareModifications if first < 1.0 => {
                return inv(format!("tau checkpoints must be >= 1, got {first}"));
            }
            Experiment::Intertwining if first <= self.packet.free_time + 1.0 => {
                return inv(format!("intertwining needs t > T + 1, got t={first}, T={}", self.packet.free_time));
            }
            Experiment::ConditionsAudit if first < 1.0 => return inv(format!("audit tau samples must be >= 1, got {first}")),
            _ => {}
        }
        if !self.grid_n.is_power_of_two() || self.grid_n < 4 {
            return inv(format!("grid.n={} must be a power of two >= 4", self.grid_n));
        }
        if self.experiment == Experiment::WaveOperator {
            self.box_spec.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            if *self.checkpoints.last().expect("non-empty") > self.box_spec.t_max {
                return inv("wave-operator checkpoints exceed box.t_max".into());
            }
        }
        if self.experiment == Experiment::CookDecay && self.cook_grid_t > 0.0 && !(self.cook_fd_dt > 0.0) {
            return inv("cook.fd_dt must be positive".into());
        }
        if self.shells.shells < 8 || self.shells.max_shells < self.shells.shells {
            return inv("shells.count must be >= 8 and <= shells.max_count".into());
        }
        Ok(())
    }
}

fn potential_pairs(p: &PotentialSpec) -> Vec<(&'static str, String)> {
    vec![
        ("family", p.family.to_string()),
        ("gamma", fmt_f(p.gamma)),
        ("amplitude", fmt_f(p.amplitude)),
        ("delta", fmt_f(p.delta)),
        ("l_pot", p.l_pot.to_string()),
        ("seed", p.seed.to_string()),
        ("first_block", p.first_block.to_string()),
    ]
}

/// `Some(true)` if set, `Some(false)` for an unknown key, `None` on a bad value.
fn set_potential(p: &mut PotentialSpec, key: &str, value: &str) -> Option<bool> {
    match key {
        "family" => p.family = value.parse().ok()?,
        "gamma" => p.gamma = value.parse().ok()?,
        "amplitude" => p.amplitude = value.parse().ok()?,
        "delta" => p.delta = value.parse().ok()?,
        "l_pot" => p.l_pot = value.parse().ok()?,
        "seed" => p.seed = value.parse().ok()?,
        "first_block" => p.first_block = value.parse().ok()?,
        _ => return Some(false),
    }
    if p.family != Family::OscillatoryBq {
        p.inner = None;
    }
    Some(true)
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f(*x)).collect::<Vec<_>>().join(", ")
}

fn parse_list(s: &str) -> Option<Vec<f64>> {
    s.split(',').map(|x| x.trim().parse().ok()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for e in Experiment::ALL {
            let cfg = ExperimentConfig::default_for(e);
            cfg.validate().unwrap_or_else(|err| panic!("{e}: {err}"));
        }
    }

    #[test]
    fn roundtrip_defaults() {
        for e in Experiment::ALL {
            let cfg = ExperimentConfig::default_for(e);
            assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg, "{e}");
        }
    }

    #[test]
    fn derived_threshold_follows_gamma() {
        let cfg = ExperimentConfig::parse("experiment = cook-decay\npotential.gamma = 0.75\n").unwrap();
        assert!((cfg.threshold("slope_max").unwrap() - (-1.35)).abs() < 1e-12);
        let cfg = ExperimentConfig::parse("experiment = cook-decay\nthreshold.slope_max = -1\n").unwrap();
        assert_eq!(cfg.threshold("slope_max"), Some(-1.0));
    }

    #[test]
    fn rejects_gamma_outside_range() {
        let cfg = ExperimentConfig::parse("experiment = verify-bounds\npotential.gamma = 0.4\n").unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("1/2 < gamma < 1"), "{err}");
        let cfg = ExperimentConfig::parse("experiment = verify-bounds\npotential.gamma = 1.0\n").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(matches!(ExperimentConfig::parse("seed = 1"), Err(ConfigError::MissingExperiment)));
        assert!(matches!(ExperimentConfig::parse("experiment = nope"), Err(ConfigError::Value { .. })));
        assert!(matches!(ExperimentConfig::parse("experiment = cook-decay\nfoo = 1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(
            ExperimentConfig::parse("experiment = cook-decay\nthreshold.w_tail_max = 1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(ExperimentConfig::parse("experiment = cook-decay\nseed = x"), Err(ConfigError::Value { .. })));
        assert!(matches!(ExperimentConfig::parse("experiment = cook-decay\njunk"), Err(ConfigError::Syntax { line: 2, .. })));
    }
}

//! Constant-force end effector: a stethoscope head on springs, driven by a
//! linear actuator that servoes the spring compression.
//!
//! Positions are along the approach axis, increasing into the body. The
//! uncompressed tip sits at `base_z + actuator_offset`; contact compression
//! is `clamp(tip − surface_z, 0, max_compression)` and the force follows
//! Hooke's law. The plant is quasi-static (massless head, rigid surface).

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Version tag written at the top of force-trace CSV files.
pub const TRACE_CSV_VERSION: &str = "# auscult force-trace v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct SpringModel<T: Real> {
    /// N/mm per spring.
    pub k_per_spring: T,
    pub spring_count: u32,
    /// Travel limit, mm.
    pub max_compression: T,
}

impl<T: Real> Default for SpringModel<T> {
    fn default() -> Self {
        Self {
            k_per_spring: T::lit(0.45),
            spring_count: 2,
            max_compression: T::lit(20.0),
        }
    }
}

impl<T: Real> SpringModel<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_per_spring > T::zero() && self.k_per_spring.is_finite_value()) {
            return Err(Error::invalid("k_per_spring must be > 0"));
        }
        if self.spring_count == 0 {
            return Err(Error::invalid("spring_count must be >= 1"));
        }
        if !(self.max_compression > T::zero() && self.max_compression.is_finite_value()) {
            return Err(Error::invalid("max_compression must be > 0"));
        }
        Ok(())
    }

    /// Combined stiffness of the parallel springs, N/mm.
    pub fn stiffness(&self) -> T {
        self.k_per_spring * T::count(self.spring_count as usize)
    }

    pub fn max_force(&self) -> T {
        self.stiffness() * self.max_compression
    }
}

/// Hooke's law, saturating at the travel limit.
pub fn spring_force<T: Real>(compression: T, spring: &SpringModel<T>) -> Result<T> {
    if !(compression >= T::zero()) {
        return Err(Error::invalid("compression must be >= 0"));
    }
    let c = if compression > spring.max_compression {
        spring.max_compression
    } else {
        compression
    };
    Ok(spring.stiffness() * c)
}

/// Compression that produces `force`.
pub fn target_compression<T: Real>(force: T, spring: &SpringModel<T>) -> Result<T> {
    if !(force >= T::zero() && force <= spring.max_force()) {
        return Err(Error::invalid(format!(
            "target force {:.3} N outside [0, {:.3}] N",
            force.as_f64(),
            spring.max_force().as_f64()
        )));
    }
    Ok(force / spring.stiffness())
}

/// Gains map compression error (mm) to actuator velocity (mm/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct PidGains<T: Real> {
    pub kp: T,
    pub ki: T,
    pub kd: T,
    /// Bound on the error integral, mm·s.
    pub integral_limit: T,
}

impl<T: Real> Default for PidGains<T> {
    fn default() -> Self {
        Self {
            kp: T::lit(1.0),
            ki: T::lit(1.0),
            kd: T::lit(0.02),
            integral_limit: T::lit(0.05),
        }
    }
}

impl<T: Real> PidGains<T> {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("kp", self.kp),
            ("ki", self.ki),
            ("kd", self.kd),
            ("integral_limit", self.integral_limit),
        ] {
            if !(v >= T::zero() && v.is_finite_value()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PidState<T> {
    pub integral: T,
    pub prev_error: Option<T>,
}

impl<T: Real> PidState<T> {
    pub fn reset(&mut self) {
        *self = Self {
            integral: T::zero(),
            prev_error: None,
        };
    }
}

fn clamp<T: Real>(v: T, lo: T, hi: T) -> T {
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

/// One controller update; returns the actuator velocity command.
pub fn pid_step<T: Real>(
    state: &mut PidState<T>,
    gains: &PidGains<T>,
    setpoint: T,
    measured: T,
    dt: T,
    speed_limit: T,
) -> Result<T> {
    if !(dt > T::zero()) {
        return Err(Error::invalid("dt must be > 0"));
    }
    let error = setpoint - measured;
    state.integral = clamp(state.integral + error * dt, -gains.integral_limit, gains.integral_limit);
    let derivative = state.prev_error.map_or(T::zero(), |p| (error - p) / dt);
    state.prev_error = Some(error);
    let u = gains.kp * error + gains.ki * state.integral + gains.kd * derivative;
    Ok(clamp(u, -speed_limit, speed_limit))
}

/// Robot position along the approach axis over time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseTrajectory<T> {
    Constant {
        z: T,
    },
    /// Linear move from `start_z` to `end_z` over `[t_start, t_start + duration]`.
    Ramp {
        start_z: T,
        end_z: T,
        t_start: T,
        duration: T,
    },
}

impl<T: Real> BaseTrajectory<T> {
    pub fn at(&self, t: T) -> T {
        match *self {
            BaseTrajectory::Constant { z } => z,
            BaseTrajectory::Ramp {
                start_z,
                end_z,
                t_start,
                duration,
            } => {
                let s = if duration > T::zero() {
                    clamp((t - t_start) / duration, T::zero(), T::one())
                } else if t >= t_start {
                    T::one()
                } else {
                    T::zero()
                };
                start_z + (end_z - start_z) * s
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if let BaseTrajectory::Ramp { duration, .. } = self {
            if !(*duration >= T::zero()) {
                return Err(Error::invalid("ramp duration must be >= 0"));
            }
        }
        Ok(())
    }
}

/// Missing JSON fields take the static-scenario defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct ContactSimConfig<T: Real> {
    pub spring: SpringModel<T>,
    pub gains: PidGains<T>,
    /// N.
    pub target_force: T,
    pub surface_z: T,
    pub base_trajectory: BaseTrajectory<T>,
    /// mm/s.
    pub actuator_speed_limit: T,
    /// Actuator offset range around its home position, mm.
    pub actuator_min: T,
    pub actuator_max: T,
    pub sensor_noise_sigma: T,
    /// The controller engages once measured compression exceeds this.
    pub contact_threshold: T,
    /// Hz.
    pub control_rate: T,
    /// s.
    pub duration: T,
    pub seed: u64,
}

impl<T: Real> Default for ContactSimConfig<T> {
    fn default() -> Self {
        Self::static_scenario(T::lit(5.0), T::lit(5.0), 0)
    }
}

impl<T: Real> ContactSimConfig<T> {
    /// Base held `push_in` mm past the surface for 8 s.
    pub fn static_scenario(target_force: T, push_in: T, seed: u64) -> Self {
        Self {
            spring: SpringModel::default(),
            gains: PidGains::default(),
            target_force,
            surface_z: T::zero(),
            base_trajectory: BaseTrajectory::Constant { z: push_in },
            actuator_speed_limit: T::lit(28.0),
            actuator_min: T::lit(-5.0),
            actuator_max: T::lit(15.0),
            sensor_noise_sigma: T::lit(0.05),
            contact_threshold: T::lit(0.2),
            control_rate: T::lit(100.0),
            duration: T::lit(8.0),
            seed,
        }
    }

    /// Head starts 5 mm off the surface; the base moves 10 mm in 0.5 s.
    pub fn dynamic_scenario(target_force: T, seed: u64) -> Self {
        Self {
            base_trajectory: BaseTrajectory::Ramp {
                start_z: T::lit(-5.0),
                end_z: T::lit(5.0),
                t_start: T::lit(0.2),
                duration: T::lit(0.5),
            },
            duration: T::lit(3.0),
            ..Self::static_scenario(target_force, T::zero(), seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spring.validate()?;
        self.gains.validate()?;
        target_compression(self.target_force, &self.spring)?;
        self.base_trajectory.validate()?;
        let pos = |name: &str, v: T| {
            if v > T::zero() && v.is_finite_value() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be > 0")))
            }
        };
        pos("control_rate", self.control_rate)?;
        pos("duration", self.duration)?;
        pos("actuator_speed_limit", self.actuator_speed_limit)?;
        if !(self.sensor_noise_sigma >= T::zero()) || !(self.contact_threshold >= T::zero()) {
            return Err(Error::invalid("sensor noise and contact threshold must be >= 0"));
        }
        if !(self.actuator_min <= T::zero() && self.actuator_max >= T::zero()) {
            return Err(Error::invalid("actuator range must contain its home position"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample<T> {
    pub t: T,
    pub force: T,
    pub compression: T,
    pub actuator: T,
    pub in_contact: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForceTrace<T> {
    pub samples: Vec<TraceSample<T>>,
}

impl<T: Real> ForceTrace<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn first_contact(&self) -> Option<usize> {
        self.samples.iter().position(|s| s.in_contact)
    }

    pub fn peak_force(&self) -> T {
        self.samples
            .iter()
            .fold(T::zero(), |m, s| if s.force > m { s.force } else { m })
    }

    /// Mean force over the final fraction of the trace.
    pub fn tail_mean_force(&self, fraction: f64) -> T {
        let n = self.samples.len();
        let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1));
        let tail = &self.samples[n - k..];
        tail.iter().fold(T::zero(), |a, s| a + s.force) / T::count(tail.len())
    }

    /// `t,force_N,compression_mm,actuator_mm,in_contact` with a version line.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(48 * (self.samples.len() + 2));
        s.push_str(TRACE_CSV_VERSION);
        s.push('\n');
        s.push_str("t,force_N,compression_mm,actuator_mm,in_contact\n");
        for p in &self.samples {
            let _ = writeln!(
                s,
                "{:.4},{:.6},{:.6},{:.6},{}",
                p.t.as_f64(),
                p.force.as_f64(),
                p.compression.as_f64(),
                p.actuator.as_f64(),
                u8::from(p.in_contact)
            );
        }
        s
    }
}

/// Fixed-step simulation at the control rate; one sample per step.
pub fn simulate_contact<T: Real>(config: &ContactSimConfig<T>) -> Result<ForceTrace<T>> {
    config.validate()?;
    let dt = T::one() / config.control_rate;
    let steps = (config.duration * config.control_rate).as_f64().round() as usize;
    let setpoint = target_compression(config.target_force, &config.spring)?;
    let noise = Normal::new(0.0, config.sensor_noise_sigma.as_f64())
        .map_err(|e| Error::invalid(format!("sensor noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pid = PidState::default();
    let mut actuator = T::zero();
    let mut samples = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = T::count(k) * dt;
        let tip = config.base_trajectory.at(t) + actuator;
        let compression = clamp(tip - config.surface_z, T::zero(), config.spring.max_compression);
        let force = spring_force(compression, &config.spring)?;
        samples.push(TraceSample {
            t,
            force,
            compression,
            actuator,
            in_contact: compression > T::zero(),
        });
        let measured = compression + T::lit(noise.sample(&mut rng));
        let velocity = if measured > config.contact_threshold {
            pid_step(
                &mut pid,
                &config.gains,
                setpoint,
                measured,
                dt,
                config.actuator_speed_limit,
            )?
        } else {
            pid.reset();
            T::zero()
        };
        actuator = clamp(actuator + velocity * dt, config.actuator_min, config.actuator_max);
    }
    Ok(ForceTrace { samples })
}

/// Tolerance band used for settling, as a fraction of the target.
pub const SETTLING_BAND: f64 = 0.02;
/// Fraction of the trace averaged for the steady-state force.
pub const STEADY_STATE_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceMetrics {
    pub peak_force: f64,
    /// `(peak − target) / target`, percent.
    pub overshoot_pct: f64,
    pub first_contact_s: f64,
    /// Seconds after first contact until the force stays inside the ±2%
    /// band; `None` if it never does.
    pub settling_time_s: Option<f64>,
    pub steady_state_force: f64,
    /// Signed, percent.
    pub steady_state_error_pct: f64,
}

pub fn trace_metrics<T: Real>(trace: &ForceTrace<T>, target_force: T) -> Result<TraceMetrics> {
    if trace.is_empty() {
        return Err(Error::invalid("empty force trace"));
    }
    let target = target_force.as_f64();
    if !(target > 0.0) {
        return Err(Error::invalid("target force must be > 0 for metrics"));
    }
    let first = trace
        .first_contact()
        .ok_or(Error::UndefinedMetrics("trace never makes contact"))?;
    let t_contact = trace.samples[first].t.as_f64();
    let band = SETTLING_BAND * target;
    let outside = trace.samples[first..]
        .iter()
        .rposition(|s| (s.force.as_f64() - target).abs() > band);
    let settling_time_s = match outside {
        None => Some(0.0),
        Some(i) if first + i + 1 < trace.len() => Some(trace.samples[first + i + 1].t.as_f64() - t_contact),
        Some(_) => None,
    };
    let peak = trace.peak_force().as_f64();
    let steady = trace.tail_mean_force(STEADY_STATE_FRACTION).as_f64();
    Ok(TraceMetrics {
        peak_force: peak,
        overshoot_pct: 100.0 * (peak - target) / target,
        first_contact_s: t_contact,
        settling_time_s,
        steady_state_force: steady,
        steady_state_error_pct: 100.0 * (steady - target) / target,
    })
}

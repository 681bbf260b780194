//! Variance-preserving noise schedules.
//!
//! A schedule stores `alpha[t]` and `sigma[t]` for `t = 0..=T` with
//! `alpha² + sigma² = 1`, `alpha[0] = 1` and strictly decreasing SNR. The
//! shifted variants divide the SNR by `s²`, which is what higher-resolution
//! levels of a pyramid use so that every level sees comparable corruption.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::tensor::{Float, Tensor};

/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Smallest signal coefficient, reached at `t = T`.
pub const ALPHA_FLOOR: f64 = 1e-4;
pub const DEFAULT_STEPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    Cosine,
    CosineShift(f64),
}

impl ScheduleKind {
    pub fn shift(&self) -> f64 {
        match *self {
            ScheduleKind::Cosine => 1.0,
            ScheduleKind::CosineShift(s) => s,
        }
    }

    /// Build the schedule this name describes.
    pub fn build(&self, steps: usize) -> Result<NoiseSchedule> {
        let base = NoiseSchedule::cosine(steps)?;
        match *self {
            ScheduleKind::Cosine => Ok(base),
            ScheduleKind::CosineShift(s) => base.shifted(s),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::Cosine => write!(f, "cosine"),
            ScheduleKind::CosineShift(s) => write!(f, "cosine-shift{s}"),
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "cosine" {
            return Ok(ScheduleKind::Cosine);
        }
        let Some(rest) = s.strip_prefix("cosine-shift") else {
            return Err(invalid!("unknown schedule `{s}`"));
        };
        let v: f64 = rest
            .parse()
            .map_err(|_| invalid!("bad shift factor in schedule `{s}`"))?;
        if !(v.is_finite() && v > 0.0) {
            return Err(invalid!("shift factor must be positive in `{s}`"));
        }
        if v == 1.0 {
            Ok(ScheduleKind::Cosine)
        } else {
            Ok(ScheduleKind::CosineShift(v))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Offset-cosine schedule normalized so that `alpha[0] = 1`.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(invalid!("schedule needs at least one step"));
        }
        let f = |u: f64| ((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos();
        let f0 = f(0.0);
        let mut alpha = Vec::with_capacity(steps + 1);
        let mut sigma = Vec::with_capacity(steps + 1);
        for t in 0..=steps {
            let a = if t == 0 {
                1.0
            } else {
                (f(t as f64 / steps as f64) / f0).clamp(ALPHA_FLOOR, 1.0)
            };
            alpha.push(a);
            sigma.push((1.0 - a * a).max(0.0).sqrt());
        }
        Ok(Self {
            kind: ScheduleKind::Cosine,
            alpha,
            sigma,
        })
    }

    /// Divide the SNR by `s²` and renormalize to unit variance.
    pub fn shifted(&self, s: f64) -> Result<Self> {
        if !(s.is_finite() && s > 0.0) {
            return Err(invalid!("shift factor must be positive, got {s}"));
        }
        let mut alpha = Vec::with_capacity(self.alpha.len());
        let mut sigma = Vec::with_capacity(self.alpha.len());
        for (&a, &sg) in self.alpha.iter().zip(&self.sigma) {
            let norm = (a * a + s * s * sg * sg).sqrt();
            alpha.push(a / norm);
            sigma.push(s * sg / norm);
        }
        let total = self.kind.shift() * s;
        let kind = if total == 1.0 {
            ScheduleKind::Cosine
        } else {
            ScheduleKind::CosineShift(total)
        };
        Ok(Self { kind, alpha, sigma })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn name(&self) -> String {
        self.kind.to_string()
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn snr(&self, t: usize) -> f64 {
        let (a, s) = (self.alpha[t], self.sigma[t]);
        a * a / (s * s)
    }

    pub fn log_snr(&self, t: usize) -> f64 {
        2.0 * (self.alpha[t].ln() - self.sigma[t].ln())
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(invalid!("timestep {t} outside [0, {}]", self.steps()));
        }
        Ok(())
    }

    /// `(alpha_{t|s}, sigma_{t|s})` of the transition `q(z_t | z_s)`.
    pub fn transition(&self, s: usize, t: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        if s > t {
            return Err(invalid!("transition needs s <= t, got s={s}, t={t}"));
        }
        if s == t {
            return Ok((1.0, 0.0));
        }
        let a_ts = self.alpha[t] / self.alpha[s];
        let var = self.sigma[t] * self.sigma[t] - a_ts * a_ts * self.sigma[s] * self.sigma[s];
        if var < -1e-12 {
            return Err(Error::Consistency(format!(
                "negative transition variance {var:e} for s={s}, t={t}"
            )));
        }
        Ok((a_ts, var.max(0.0).sqrt()))
    }

    /// `v = alpha·eps − sigma·x`.
    pub fn v_from_x_eps<T: Float>(&self, x: &Tensor<T>, eps: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self.check_t(t)?;
        let (a, s) = (self.alpha[t], self.sigma[t]);
        x.zip_map(eps, |xv, ev| T::from_f64_lossy(a * ev.as_f64() - s * xv.as_f64()))
    }

    /// `x = alpha·z − sigma·v`.
    pub fn x_from_v<T: Float>(&self, z: &Tensor<T>, v: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self.check_t(t)?;
        let (a, s) = (self.alpha[t], self.sigma[t]);
        z.zip_map(v, |zv, vv| T::from_f64_lossy(a * zv.as_f64() - s * vv.as_f64()))
    }

    /// `eps = sigma·z + alpha·v`.
    pub fn eps_from_v<T: Float>(&self, z: &Tensor<T>, v: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self.check_t(t)?;
        let (a, s) = (self.alpha[t], self.sigma[t]);
        z.zip_map(v, |zv, vv| T::from_f64_lossy(s * zv.as_f64() + a * vv.as_f64()))
    }

    /// `z_t = alpha·x + sigma·eps`.
    pub fn noisy<T: Float>(&self, x: &Tensor<T>, eps: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self.check_t(t)?;
        let (a, s) = (self.alpha[t], self.sigma[t]);
        x.zip_map(eps, |xv, ev| T::from_f64_lossy(a * xv.as_f64() + s * ev.as_f64()))
    }

    /// Plain-text table `t, alpha, sigma, logSNR`, one row per timestep.
    pub fn dump_table(&self) -> String {
        let mut out = String::from("t,alpha,sigma,logSNR\n");
        for t in 0..=self.steps() {
            let lsnr = if self.sigma[t] == 0.0 {
                "inf".to_string()
            } else {
                format!("{:.12e}", self.log_snr(t))
            };
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{}\n",
                t, self.alpha[t], self.sigma[t], lsnr
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_steps_rejected() {
        assert!(NoiseSchedule::cosine(0).is_err());
    }

    #[test]
    fn clean_endpoint() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        assert_eq!(s.alpha(0), 1.0);
        assert_eq!(s.sigma(0), 0.0);
        assert!(s.alpha(1000) >= ALPHA_FLOOR);
    }

    #[test]
    fn alpha_midpoint_matches_high_precision_value() {
        // cos((0.5 + c)/(1 + c)·π/2) / cos(c/(1 + c)·π/2), c = 0.008, at 40 digits.
        let s = NoiseSchedule::cosine(1000).unwrap();
        assert!((s.alpha(500) - 0.702_740_058_941_169).abs() < 1e-12);
    }

    #[test]
    fn shift_hand_value() {
        let base = NoiseSchedule {
            kind: ScheduleKind::Cosine,
            alpha: vec![1.0, 0.8],
            sigma: vec![0.0, 0.6],
        };
        let out = base.shifted(2.0).unwrap();
        // 0.8 / sqrt(0.64 + 4·0.36), evaluated at 40 digits.
        assert!((out.alpha(1) - 0.554_700_196_225_229_1).abs() < 1e-15);
        assert_eq!(out.kind(), ScheduleKind::CosineShift(2.0));
    }

    #[test]
    fn unit_shift_is_identity() {
        let base = NoiseSchedule::cosine(1000).unwrap();
        let out = base.shifted(1.0).unwrap();
        for t in 0..=1000 {
            assert!((out.alpha(t) - base.alpha(t)).abs() < 1e-12);
            assert!((out.sigma(t) - base.sigma(t)).abs() < 1e-12);
        }
        assert!(base.shifted(0.0).is_err());
        assert!(base.shifted(-1.0).is_err());
    }

    #[test]
    fn transition_endpoints_and_errors() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        assert_eq!(s.transition(300, 300).unwrap(), (1.0, 0.0));
        let (a, sg) = s.transition(0, 617).unwrap();
        assert!((a - s.alpha(617)).abs() < 1e-15);
        assert!((sg - s.sigma(617)).abs() < 1e-12);
        assert!(s.transition(5, 4).is_err());
        assert!(s.transition(0, 1001).is_err());
    }

    #[test]
    fn parse_names() {
        assert_eq!("cosine".parse::<ScheduleKind>().unwrap(), ScheduleKind::Cosine);
        assert_eq!(
            "cosine-shift4".parse::<ScheduleKind>().unwrap(),
            ScheduleKind::CosineShift(4.0)
        );
        assert!("linear".parse::<ScheduleKind>().is_err());
        assert!("cosine-shift0".parse::<ScheduleKind>().is_err());
        assert!("cosine-shiftx".parse::<ScheduleKind>().is_err());
        assert_eq!(ScheduleKind::CosineShift(16.0).to_string(), "cosine-shift16");
    }

    #[test]
    fn v_endpoint_algebra() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let x = Tensor::<f32>::new(&[3], vec![0.3, -0.7, 1.0]).unwrap();
        let e = Tensor::<f32>::new(&[3], vec![1.2, 0.1, -0.4]).unwrap();
        assert_eq!(s.v_from_x_eps(&x, &e, 0).unwrap(), e);
        let v = s.v_from_x_eps(&x, &e, 0).unwrap();
        assert_eq!(s.x_from_v(&x, &v, 0).unwrap(), x);
        let bad = Tensor::<f32>::zeros(&[2]);
        assert!(s.v_from_x_eps(&x, &bad, 3).is_err());
    }

    #[test]
    fn v_round_trip_at_617_matches_scalar_oracle() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let x = Tensor::<f32>::new(&[4], vec![0.25, -0.9, 0.5, 0.03]).unwrap();
        let e = Tensor::<f32>::new(&[4], vec![-1.1, 0.4, 2.2, -0.6]).unwrap();
        let z = s.noisy(&x, &e, 617).unwrap();
        let v = s.v_from_x_eps(&x, &e, 617).unwrap();
        let xr = s.x_from_v(&z, &v, 617).unwrap();
        let er = s.eps_from_v(&z, &v, 617).unwrap();
        // In exact arithmetic a·(a x + s e) − s·(a e − s x) = (a² + s²) x = x.
        assert!(xr.max_abs_diff(&x) < 1e-6);
        assert!(er.max_abs_diff(&e) < 1e-6);
    }

    proptest! {
        #[test]
        fn shift_composes(s1 in 0.25f64..8.0, s2 in 0.25f64..8.0) {
            let base = NoiseSchedule::cosine(200).unwrap();
            let a = base.shifted(s1).unwrap().shifted(s2).unwrap();
            let b = base.shifted(s1 * s2).unwrap();
            for t in 0..=200 {
                prop_assert!((a.alpha(t) - b.alpha(t)).abs() < 1e-9);
                prop_assert!((a.sigma(t) - b.sigma(t)).abs() < 1e-9);
            }
        }

        #[test]
        fn variance_preserving_and_monotone(steps in 1usize..2000, s in 0.1f64..20.0) {
            let sch = NoiseSchedule::cosine(steps).unwrap().shifted(s).unwrap();
            for t in 0..=steps {
                let a = sch.alpha(t);
                let g = sch.sigma(t);
                prop_assert!((a * a + g * g - 1.0).abs() < 1e-9);
                if t >= 2 {
                    prop_assert!(sch.snr(t) < sch.snr(t - 1));
                }
            }
        }

        #[test]
        fn parameterization_round_trip(x in -2.0f32..2.0, e in -2.0f32..2.0, t in 0usize..=1000) {
            let s = NoiseSchedule::cosine(1000).unwrap().shifted(2.0).unwrap();
            let xt = Tensor::new(&[1], vec![x]).unwrap();
            let et = Tensor::new(&[1], vec![e]).unwrap();
            let z = s.noisy(&xt, &et, t).unwrap();
            let v = s.v_from_x_eps(&xt, &et, t).unwrap();
            prop_assert!(s.x_from_v(&z, &v, t).unwrap().max_abs_diff(&xt) < 1e-6);
            prop_assert!(s.eps_from_v(&z, &v, t).unwrap().max_abs_diff(&et) < 1e-6);
        }
    }
}

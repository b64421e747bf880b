//! Fixed-step explicit integration of a (batched) velocity field.
//!
//! States are `[n, d]` matrices so a whole set of samples moves through the
//! same time grid together. The grid is `t_i = t_start + (t_end − t_start)·i/n`,
//! which makes times such as 0.1, 0.2, … land exactly on recorded states when
//! `n_steps` is a multiple of 10.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Conditioning, FlowModel};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Midpoint,
    Rk4,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub method: Method,
    pub n_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            method: Method::Rk4,
            n_steps: 100,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::config("integrator.n_steps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Tensor>,
    pub direction: Direction,
    /// Conditions the field was evaluated under, one per sample, if any.
    pub conds: Option<Vec<Conditioning>>,
}

impl Trajectory {
    pub fn start(&self) -> &Tensor {
        &self.states[0]
    }

    pub fn end(&self) -> &Tensor {
        self.states.last().unwrap()
    }

    pub fn into_end(mut self) -> Tensor {
        self.states.pop().unwrap()
    }

    /// The recorded state at time `t`, if `t` lies on the step grid.
    pub fn state_at(&self, t: f64) -> Option<&Tensor> {
        self.times
            .iter()
            .position(|&ti| (ti - t).abs() < 1e-9)
            .map(|i| &self.states[i])
    }
}

fn axpy(base: &Tensor, h: f64, k: &Tensor) -> Tensor {
    let mut out = base.clone();
    for (o, &kv) in out.data_mut().iter_mut().zip(k.data()) {
        *o += h * kv;
    }
    out
}

/// Integrates `dz/dt = field(z, t)` from `t_start` to `t_end` and records every step.
pub fn integrate<F>(mut field: F, z_start: &Tensor, t_start: f64, t_end: f64, config: &IntegratorConfig) -> Result<Trajectory>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    config.validate()?;
    for t in [t_start, t_end] {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("integration bound {t} outside [0, 1]")));
        }
    }
    if t_start == t_end {
        return Err(Error::invalid("integration bounds coincide"));
    }
    let n = config.n_steps;
    let span = t_end - t_start;
    let times: Vec<f64> = (0..=n)
        .map(|i| if i == n { t_end } else { t_start + span * i as f64 / n as f64 })
        .collect();

    let mut eval = |z: &Tensor, t: f64| -> Result<Tensor> {
        let v = field(z, t)?;
        z.expect_same_shape(&v, "integrate")?;
        Ok(v)
    };

    let mut states = Vec::with_capacity(n + 1);
    states.push(z_start.clone());
    let mut z = z_start.clone();
    for i in 0..n {
        let (t0, t1) = (times[i], times[i + 1]);
        let h = t1 - t0;
        let tm = 0.5 * (t0 + t1);
        z = match config.method {
            Method::Euler => {
                let k1 = eval(&z, t0)?;
                axpy(&z, h, &k1)
            }
            Method::Midpoint => {
                let k1 = eval(&z, t0)?;
                let k2 = eval(&axpy(&z, 0.5 * h, &k1), tm)?;
                axpy(&z, h, &k2)
            }
            Method::Rk4 => {
                let k1 = eval(&z, t0)?;
                let k2 = eval(&axpy(&z, 0.5 * h, &k1), tm)?;
                let k3 = eval(&axpy(&z, 0.5 * h, &k2), tm)?;
                let k4 = eval(&axpy(&z, h, &k3), t1)?;
                let mut next = z.clone();
                for ((((o, a), b), c), d) in next
                    .data_mut()
                    .iter_mut()
                    .zip(k1.data())
                    .zip(k2.data())
                    .zip(k3.data())
                    .zip(k4.data())
                {
                    *o += h / 6.0 * (a + 2.0 * b + 2.0 * c + d);
                }
                next
            }
        };
        if !z.is_finite() {
            return Err(Error::non_finite(format!("ODE state after step {} (t = {t1})", i + 1)));
        }
        states.push(z.clone());
    }

    Ok(Trajectory {
        times,
        states,
        direction: if t_end > t_start {
            Direction::Forward
        } else {
            Direction::Backward
        },
        conds: None,
    })
}

fn flow_between(model: &FlowModel, z: &Tensor, conds: &[Conditioning], t0: f64, t1: f64, config: &IntegratorConfig) -> Result<Trajectory> {
    if conds.len() != z.rows() {
        return Err(Error::invalid(format!("{} states but {} conditions", z.rows(), conds.len())));
    }
    let mut traj = integrate(|zt, t| model.velocity_batch(zt, t, conds), z, t0, t1, config)?;
    traj.conds = Some(conds.to_vec());
    Ok(traj)
}

/// Runs the field backwards from data (t = 1) to the base (t = 0).
pub fn invert_to_base(model: &FlowModel, z1: &Tensor, conds: &[Conditioning], config: &IntegratorConfig) -> Result<Trajectory> {
    flow_between(model, z1, conds, 1.0, 0.0, config)
}

/// Runs the field forwards from the base (t = 0) to data (t = 1).
pub fn generate(model: &FlowModel, z0: &Tensor, conds: &[Conditioning], config: &IntegratorConfig) -> Result<Trajectory> {
    flow_between(model, z0, conds, 0.0, 1.0, config)
}

/// `sample_id,t,dim_0..dim_{k-1}`, one row per sample per recorded time in `grid`
/// (all recorded times when `grid` is `None`).
pub fn write_trajectory_csv<W: Write>(out: W, traj: &Trajectory, grid: Option<&[f64]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let k = traj.start().cols();
    let mut header = vec!["sample_id".to_string(), "t".to_string()];
    header.extend((0..k).map(|i| format!("dim_{i}")));
    w.write_record(&header)?;
    let picks: Vec<(f64, &Tensor)> = match grid {
        Some(g) => g
            .iter()
            .map(|&t| {
                traj.state_at(t)
                    .map(|s| (t, s))
                    .ok_or_else(|| Error::invalid(format!("time {t} is not on the trajectory grid")))
            })
            .collect::<Result<_>>()?,
        None => traj.times.iter().copied().zip(&traj.states).collect(),
    };
    for (t, state) in picks {
        for i in 0..state.rows() {
            let mut rec = vec![i.to_string(), t.to_string()];
            rec.extend(state.row(i).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{ConditioningScheme, FlowArch, TimeEmbedding};
    use crate::nn::Activation;
    use crate::rng::{normal_tensor, seeded};

    fn all_methods() -> [Method; 3] {
        [Method::Euler, Method::Midpoint, Method::Rk4]
    }

    #[test]
    fn constant_field_is_exact() {
        let z0 = Tensor::matrix(1, 2, vec![0.5, -1.0]).unwrap();
        let c = Tensor::matrix(1, 2, vec![2.0, 0.25]).unwrap();
        for method in all_methods() {
            let cfg = IntegratorConfig { method, n_steps: 100 };
            let traj = integrate(|_, _| Ok(c.clone()), &z0, 0.0, 1.0, &cfg).unwrap();
            let end = traj.end();
            assert!((end.data()[0] - 2.5).abs() < 1e-13);
            assert!((end.data()[1] + 0.75).abs() < 1e-13);
        }
    }

    #[test]
    fn rk4_on_exponential_growth() {
        let z0 = Tensor::matrix(1, 1, vec![1.5]).unwrap();
        let cfg = IntegratorConfig::default();
        let traj = integrate(|z, _| Ok(z.clone()), &z0, 0.0, 1.0, &cfg).unwrap();
        let exact = 1.5 * std::f64::consts::E;
        assert!(((traj.end().data()[0] - exact) / exact).abs() < 1e-6);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let z0 = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let err = |n| {
            let cfg = IntegratorConfig { method: Method::Rk4, n_steps: n };
            let end = integrate(|z, _| Ok(z.clone()), &z0, 0.0, 1.0, &cfg).unwrap().into_end();
            (end.data()[0] - std::f64::consts::E).abs()
        };
        let ratio = err(10) / err(20);
        assert!(ratio > 14.0 && ratio < 18.0, "ratio {ratio}");
    }

    #[test]
    fn forward_then_backward_returns_home() {
        // dz/dt = sin(z) + t: smooth and non-linear.
        let f = |z: &Tensor, t: f64| Ok(z.map(|v| v.sin() + t));
        let z0 = normal_tensor(&[5, 3], &mut seeded(1));
        let cfg = IntegratorConfig { method: Method::Rk4, n_steps: 200 };
        let fwd = integrate(f, &z0, 0.0, 1.0, &cfg).unwrap();
        let back = integrate(f, fwd.end(), 1.0, 0.0, &cfg).unwrap();
        let err = back.end().sub(&z0).unwrap().norm() / z0.norm();
        assert!(err < 1e-8, "round trip error {err}");
        assert_eq!(back.direction, Direction::Backward);
    }

    #[test]
    fn trajectory_endpoints_and_grid() {
        let z0 = normal_tensor(&[2, 2], &mut seeded(2));
        let cfg = IntegratorConfig::default();
        let traj = integrate(|z, _| Ok(z.scale(-0.5)), &z0, 1.0, 0.0, &cfg).unwrap();
        assert_eq!(traj.start(), &z0);
        assert_eq!(traj.times.len(), traj.states.len());
        assert_eq!((traj.times[0], *traj.times.last().unwrap()), (1.0, 0.0));
        assert!(traj.times.windows(2).all(|w| w[1] < w[0]));
        for k in 0..=10 {
            assert!(traj.state_at(k as f64 / 10.0).is_some());
        }
    }

    #[test]
    fn invalid_bounds_and_blowups() {
        let z0 = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let cfg = IntegratorConfig::default();
        assert!(integrate(|z, _| Ok(z.clone()), &z0, 0.5, 0.5, &cfg).is_err());
        assert!(integrate(|z, _| Ok(z.clone()), &z0, 0.0, 1.5, &cfg).is_err());
        let err = integrate(|z, _| Ok(z.map(|v| v * v * 1e200)), &z0, 0.0, 1.0, &cfg).unwrap_err();
        assert!(err.is_numeric());
        assert!(err.to_string().contains("step 1"), "{err}");
    }

    #[test]
    fn zero_field_model_is_identity() {
        let arch = FlowArch {
            latent_dim: 2,
            n_classes: 4,
            n_continuous: 0,
            hidden: vec![8],
            activation: Activation::Elu,
            scheme: ConditioningScheme::RawAppend { null_value: -1.0 },
            time: TimeEmbedding::Raw,
        };
        let mut m = FlowModel::new(arch, &mut seeded(0)).unwrap();
        m.zero_output_layer();
        let z = normal_tensor(&[3, 2], &mut seeded(3));
        let conds = vec![Conditioning::class(1); 3];
        let cfg = IntegratorConfig::default();
        assert_eq!(invert_to_base(&m, &z, &conds, &cfg).unwrap().end(), &z);
        assert_eq!(generate(&m, &z, &conds, &cfg).unwrap().end(), &z);
    }

    #[test]
    fn csv_rows_per_grid_time() {
        let z0 = normal_tensor(&[2, 3], &mut seeded(4));
        let cfg = IntegratorConfig { method: Method::Euler, n_steps: 10 };
        let traj = integrate(|z, _| Ok(z.clone()), &z0, 0.0, 1.0, &cfg).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &traj, Some(&[0.0, 0.5, 1.0])).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("sample_id,t,dim_0,dim_1,dim_2\n"));
        assert_eq!(text.lines().count(), 1 + 3 * 2);
        assert!(write_trajectory_csv(Vec::new(), &traj, Some(&[0.05])).is_err());
    }
}

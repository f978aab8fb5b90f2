//! Finite-difference audit of every differentiable tape operation and every
//! model loss, over many random toy instances.

use serde::Serialize;

use crate::clf::logistic_loss_vars;
use crate::error::Result;
use crate::gan::{critic_loss_vars, critic_vars, generator_vars, one_hot, GanConfig, GanModel};
use crate::rng::{self, SeededRng};
use crate::tensor::{grad_check_params, Graph, Tensor, Var};
use crate::unet::{forward_vars, mse_loss, Mode, UNetArch, UNetParams};
use crate::vae::{decode, encode, reparameterize, vae_loss_vars, VaeArch, VaeParams};

pub const TOLERANCE: f64 = 1e-4;
/// The gradient penalty differentiates through a gradient, which costs
/// some accuracy in the differences.
pub const GP_TOLERANCE: f64 = 1e-3;
const EPS: f64 = 1e-6;
/// Coordinates sampled per parameter tensor.
const COORDS: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditEntry {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl AuditEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

type Check = fn(&mut SeededRng, u64) -> Result<f64>;

fn randn(r: &mut SeededRng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

/// Freshly initialised nets have zero biases, which can park relu inputs
/// exactly on the kink. Jitter moves the check to a generic point.
fn generic(r: &mut SeededRng, params: &[Tensor]) -> Vec<Tensor> {
    params
        .iter()
        .map(|p| {
            let n = Tensor::randn(p.shape(), 0.1, r);
            p.zip_map(&n, "jitter", |a, b| a + b).expect("same shape")
        })
        .collect()
}

/// Entries bounded away from zero, random sign.
fn away_from_zero(r: &mut SeededRng, shape: &[usize]) -> Tensor {
    randn(r, shape).map(|v| v.signum() * (v.abs() + 0.5))
}

/// Random fixed linear functional so every output coordinate matters.
fn project<'g>(v: Var<'g>) -> Result<Var<'g>> {
    let w = Tensor::randn(&v.shape(), 1.0, &mut rng::seeded(0x5eed));
    v.mul_const(&w)?.sum()
}

fn run<F>(params: Vec<Tensor>, seed: u64, f: F) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    grad_check_params(f, &params, EPS, Some((COORDS, seed)))
}

fn apply<'g>(op: &str, v: Var<'g>) -> Var<'g> {
    match op {
        "relu" => v.relu(),
        "sigmoid" => v.sigmoid(),
        "exp" => v.exp(),
        "sqrt" => v.sqrt(),
        "safe_recip" => v.safe_recip(),
        "square" => v.square(),
        _ => v.softplus(),
    }
}

fn unary(r: &mut SeededRng, seed: u64, op: &'static str) -> Result<f64> {
    let x = if op == "sqrt" {
        randn(r, &[3, 4]).map(|v| v.abs() + 0.5)
    } else {
        away_from_zero(r, &[3, 4])
    };
    run(vec![x], seed, move |_, v| project(apply(op, v[0])))
}

fn ops() -> Vec<(&'static str, f64, Check)> {
    vec![
        ("matmul", TOLERANCE, |r, s| run(vec![randn(r, &[3, 4]), randn(r, &[4, 2])], s, |_, v| project(v[0].matmul(v[1])?))),
        ("dense", TOLERANCE, |r, s| {
            run(vec![randn(r, &[3, 4]), randn(r, &[4, 2]), randn(r, &[2])], s, |_, v| project(v[0].dense(v[1], v[2])?))
        }),
        ("add_bias", TOLERANCE, |r, s| run(vec![randn(r, &[3, 4]), randn(r, &[4])], s, |_, v| project(v[0].add_bias(v[1])?))),
        ("channel_bias", TOLERANCE, |r, s| {
            run(vec![randn(r, &[2, 3, 5]), randn(r, &[3])], s, |_, v| project(v[0].channel_bias(v[1])?))
        }),
        ("add", TOLERANCE, |r, s| run(vec![randn(r, &[3, 4]), randn(r, &[3, 4])], s, |_, v| project(v[0].add(v[1])?))),
        ("sub", TOLERANCE, |r, s| run(vec![randn(r, &[3, 4]), randn(r, &[3, 4])], s, |_, v| project(v[0].sub(v[1])?))),
        ("mul", TOLERANCE, |r, s| run(vec![randn(r, &[3, 4]), randn(r, &[3, 4])], s, |_, v| project(v[0].mul(v[1])?))),
        ("scale", TOLERANCE, |r, s| run(vec![randn(r, &[3, 4])], s, |_, v| project(v[0].scale(-1.7)))),
        ("add_scalar", TOLERANCE, |r, s| run(vec![randn(r, &[3, 4])], s, |_, v| project(v[0].add_scalar(0.3)))),
        ("mul_const", TOLERANCE, |r, s| {
            let c = randn(r, &[3, 4]);
            run(vec![randn(r, &[3, 4])], s, move |_, v| project(v[0].mul_const(&c)?))
        }),
        ("relu", TOLERANCE, |r, s| unary(r, s, "relu")),
        ("sigmoid", TOLERANCE, |r, s| unary(r, s, "sigmoid")),
        ("exp", TOLERANCE, |r, s| unary(r, s, "exp")),
        ("sqrt", TOLERANCE, |r, s| unary(r, s, "sqrt")),
        ("safe_recip", TOLERANCE, |r, s| unary(r, s, "safe_recip")),
        ("square", TOLERANCE, |r, s| unary(r, s, "square")),
        ("softplus", TOLERANCE, |r, s| unary(r, s, "softplus")),
        ("sum", TOLERANCE, |r, s| run(vec![randn(r, &[3, 4])], s, |_, v| v[0].square().sum())),
        ("mean", TOLERANCE, |r, s| run(vec![randn(r, &[3, 4])], s, |_, v| v[0].square().mean())),
        ("expand", TOLERANCE, |r, s| run(vec![randn(r, &[1])], s, |_, v| project(v[0].expand(&[3, 4])?))),
        ("sum_rows", TOLERANCE, |r, s| run(vec![randn(r, &[3, 4])], s, |_, v| project(v[0].sum_rows()?))),
        ("sum_cols", TOLERANCE, |r, s| run(vec![randn(r, &[3, 4])], s, |_, v| project(v[0].sum_cols()?))),
        ("broadcast_rows", TOLERANCE, |r, s| run(vec![randn(r, &[4])], s, |_, v| project(v[0].broadcast_rows(3)?))),
        ("broadcast_cols", TOLERANCE, |r, s| run(vec![randn(r, &[3])], s, |_, v| project(v[0].broadcast_cols(4)?))),
        ("reshape", TOLERANCE, |r, s| run(vec![randn(r, &[3, 4])], s, |_, v| project(v[0].reshape(&[2, 6])?))),
        ("concat", TOLERANCE, |r, s| {
            run(vec![randn(r, &[2, 3]), randn(r, &[2, 2]), randn(r, &[1, 5])], s, |_, v| {
                let wide = Var::concat(&[v[0], v[1]], 1)?;
                project(Var::concat(&[wide, v[2]], 0)?)
            })
        }),
        ("slice", TOLERANCE, |r, s| run(vec![randn(r, &[3, 4])], s, |_, v| project(v[0].slice(1, 1, 2)?))),
        ("pad_slice", TOLERANCE, |r, s| run(vec![randn(r, &[3, 4])], s, |_, v| project(v[0].pad_slice(1, 1, 6)?))),
        ("conv1d", TOLERANCE, |r, s| {
            run(vec![randn(r, &[2, 3, 7]), randn(r, &[4, 3, 3])], s, |_, v| {
                let a = v[0].conv1d(v[1], 1, 1)?;
                let b = v[0].conv1d(v[1], 2, 1)?;
                project(a)?.add(project(b)?)
            })
        }),
        ("conv1d_transpose", TOLERANCE, |r, s| {
            run(vec![randn(r, &[2, 3, 4]), randn(r, &[3, 2, 3])], s, |_, v| project(v[0].conv1d_transpose(v[1], 2, 1)?))
        }),
        ("maxpool2", TOLERANCE, |r, s| run(vec![randn(r, &[2, 3, 6])], s, |_, v| project(v[0].maxpool2()?))),
        ("upsample2", TOLERANCE, |r, s| run(vec![randn(r, &[2, 3, 4])], s, |_, v| project(v[0].upsample2()?))),
        ("batchnorm_train", TOLERANCE, |r, s| {
            let gamma = randn(r, &[3]).map(|v| v + 1.5);
            run(vec![randn(r, &[4, 3, 5]), gamma, randn(r, &[3])], s, |_, v| project(v[0].batchnorm_train(v[1], v[2])?.out))
        }),
        ("batchnorm_eval", TOLERANCE, |r, s| {
            let mean = randn(r, &[3]).into_vec();
            let var = randn(r, &[3]).map(|v| v.abs() + 0.5).into_vec();
            run(vec![randn(r, &[4, 3, 5]), randn(r, &[3]), randn(r, &[3])], s, move |_, v| {
                project(v[0].batchnorm_eval(v[1], v[2], &mean, &var)?)
            })
        }),
        ("dropout", TOLERANCE, |r, s| run(vec![randn(r, &[3, 4])], s, move |_, v| project(v[0].dropout(0.3, s, true)?))),
    ]
}

fn losses() -> Vec<(&'static str, f64, Check)> {
    vec![
        ("vae_total", TOLERANCE, |r, s| {
            let arch = VaeArch {
                input: 6,
                hidden1: 5,
                hidden2: 4,
                latent: 3,
            };
            let p = VaeParams::init(arch, s);
            let x = randn(r, &[4, 6]);
            let eps = randn(r, &[4, 3]);
            run(generic(r, p.store.tensors()), s, move |g, vars| {
                let xv = g.constant(x.clone());
                let (mu, logvar) = encode(vars, xv)?;
                let z = reparameterize(mu, logvar, &eps)?;
                Ok(vae_loss_vars(xv, decode(vars, z)?, mu, logvar, 0.7)?.total)
            })
        }),
        ("unet_mse", TOLERANCE, |r, s| {
            let p = UNetParams::init(UNetArch::new(2, 8, 3, 2)?, 0.2, s);
            let x = randn(r, &[3, 2, 8]);
            let params = generic(r, p.store.tensors());
            run(params, s, move |g, vars| {
                let xv = g.constant(x.clone());
                mse_loss(xv, forward_vars(&p, vars, xv, Mode::Train { seed: s }, None)?.out)
            })
        }),
        ("cwgan_critic_with_gp", GP_TOLERANCE, |r, s| {
            let m = GanModel::init(&toy_gan(s));
            let real = randn(r, &[4, 3]);
            let fake = randn(r, &[4, 3]);
            let y = one_hot(&[0, 1, 1, 0])?;
            run(generic(r, m.critic.net.store.tensors()), s, move |_, vars| {
                Ok(critic_loss_vars(vars, &real, &fake, &y, 10.0, s)?.loss)
            })
        }),
        ("cwgan_generator", TOLERANCE, |r, s| {
            let m = GanModel::init(&toy_gan(s));
            let z = randn(r, &[4, 5]);
            let y = one_hot(&[1, 0, 1, 0])?;
            let critic = m.critic.net.store.clone();
            run(generic(r, m.generator.net.store.tensors()), s, move |g, vars| {
                let cvars = critic.bind_const(g);
                let yv = g.constant(y.clone());
                let fake = generator_vars(vars, g.constant(z.clone()), yv)?;
                Ok(critic_vars(&cvars, fake, yv)?.mean()?.scale(-1.0))
            })
        }),
        ("logistic", TOLERANCE, |r, s| {
            let x = randn(r, &[6, 3]);
            let y = Tensor::new(vec![6, 1], (0..6).map(|i| f64::from(i % 2 == 0)).collect())?;
            run(vec![randn(r, &[3, 1]), randn(r, &[1])], s, move |g, v| {
                logistic_loss_vars(g.constant(x.clone()).matmul(v[0])?.add_bias(v[1])?, &y)
            })
        }),
    ]
}

fn toy_gan(seed: u64) -> GanConfig {
    GanConfig {
        data_dim: 3,
        z_dim: 5,
        gen_hidden: vec![6, 5],
        critic_hidden: vec![6, 4],
        seed,
        ..GanConfig::default()
    }
}

/// Runs every check on `instances` random toy instances each and reports
/// the worst relative error per check.
pub fn gradient_audit(instances: usize, seed: u64) -> Result<Vec<AuditEntry>> {
    let mut out = Vec::new();
    for (k, (name, tolerance, check)) in ops().into_iter().chain(losses()).enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let s = rng::mix_seed(rng::mix_seed(seed, k as u64), i as u64);
            let mut r = rng::seeded(s);
            worst = worst.max(check(&mut r, s)?);
        }
        out.push(AuditEntry {
            name,
            instances,
            max_rel_error: worst,
            tolerance,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_on_a_few_instances() {
        let report = gradient_audit(3, 1).unwrap();
        assert!(report.len() >= 40);
        for e in &report {
            assert!(e.passed(), "{} {}", e.name, e.max_rel_error);
        }
    }
}

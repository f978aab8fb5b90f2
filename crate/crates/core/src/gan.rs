//! Conditional Wasserstein GAN with gradient penalty over latent query
//! vectors, conditioned on a one-hot benign/malicious label.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::rng;
use crate::tensor::{AdamConfig, AdamState, Graph, ParamStore, Tensor, Var};
use crate::vae::LATENT_DIM;

pub const N_CLASSES: usize = 2;

/// Added under the square root of the interpolate gradient norm so the
/// norm stays differentiable at zero; too small to move any value.
const NORM_EPS: f64 = 1e-24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub data_dim: usize,
    pub z_dim: usize,
    pub gen_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub lambda_gp: f64,
    pub n_critic: usize,
    pub lr_g: f64,
    pub lr_c: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            data_dim: LATENT_DIM,
            z_dim: 64,
            gen_hidden: vec![256, 512],
            critic_hidden: vec![512, 256],
            lambda_gp: 10.0,
            n_critic: 2,
            lr_g: 1e-4,
            lr_c: 1e-4,
            batch: 64,
            epochs: 50,
            seed: 0,
        }
    }
}

/// Fully connected stack, ReLU between layers, linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub store: ParamStore,
}

impl Mlp {
    pub fn init(widths: Vec<usize>, r: &mut rng::SeededRng) -> Self {
        let mut store = ParamStore::new();
        for (i, w) in widths.windows(2).enumerate() {
            let std = (2.0 / w[0] as f64).sqrt();
            store.push(format!("l{i}.w"), Tensor::randn(&[w[0], w[1]], std, r));
            store.push(format!("l{i}.b"), Tensor::zeros(&[w[1]]));
        }
        Mlp { widths, store }
    }

    pub fn forward<'g>(vars: &[Var<'g>], x: Var<'g>) -> Result<Var<'g>> {
        let layers = vars.len() / 2;
        let mut h = x;
        for i in 0..layers {
            h = h.dense(vars[2 * i], vars[2 * i + 1])?;
            if i + 1 < layers {
                h = h.relu();
            }
        }
        Ok(h)
    }

    fn input(&self) -> usize {
        self.widths[0]
    }

    fn output(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }
}

/// `G(z, y)`: `concat(z, onehot(y))` through the stack to `data_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub z_dim: usize,
    pub net: Mlp,
}

/// `D(x, y)`: `concat(x, onehot(y))` through the stack to one unbounded
/// score. Dense layers only.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticParams {
    pub net: Mlp,
}

impl GeneratorParams {
    pub fn init(config: &GanConfig, r: &mut rng::SeededRng) -> Self {
        let mut w = vec![config.z_dim + N_CLASSES];
        w.extend(&config.gen_hidden);
        w.push(config.data_dim);
        GeneratorParams {
            z_dim: config.z_dim,
            net: Mlp::init(w, r),
        }
    }

    pub fn data_dim(&self) -> usize {
        self.net.output()
    }
}

impl CriticParams {
    pub fn init(config: &GanConfig, r: &mut rng::SeededRng) -> Self {
        let mut w = vec![config.data_dim + N_CLASSES];
        w.extend(&config.critic_hidden);
        w.push(1);
        CriticParams { net: Mlp::init(w, r) }
    }

    pub fn data_dim(&self) -> usize {
        self.net.input() - N_CLASSES
    }

    /// Scores `[B]` for constant inputs.
    pub fn score(&self, x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
        let g = Graph::new();
        let vars = self.net.store.bind_const(&g);
        Ok(critic_vars(&vars, g.constant(x.clone()), g.constant(y.clone()))?.value().into_vec())
    }
}

pub fn one_hot(labels: &[u8]) -> Result<Tensor> {
    let mut d = vec![0.0; labels.len() * N_CLASSES];
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= N_CLASSES {
            return Err(Error::data(format!("label {l} is not 0 or 1")));
        }
        d[i * N_CLASSES + l as usize] = 1.0;
    }
    Tensor::new(vec![labels.len(), N_CLASSES], d)
}

fn check_one_hot(y: &Tensor, rows: usize) -> Result<()> {
    if y.shape() != [rows, N_CLASSES] {
        return Err(Error::shape("one_hot", y.shape(), &[rows, N_CLASSES]));
    }
    for i in 0..rows {
        let r = y.row(i);
        let ones = r.iter().filter(|&&v| v == 1.0).count();
        let zeros = r.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != N_CLASSES - 1 {
            return Err(Error::data(format!("row {i} of the label matrix is not one-hot")));
        }
    }
    Ok(())
}

pub fn generator_vars<'g>(vars: &[Var<'g>], z: Var<'g>, y: Var<'g>) -> Result<Var<'g>> {
    Mlp::forward(vars, Var::concat(&[z, y], 1)?)
}

/// Critic scores flattened to `[B]`.
pub fn critic_vars<'g>(vars: &[Var<'g>], x: Var<'g>, y: Var<'g>) -> Result<Var<'g>> {
    let s = Mlp::forward(vars, Var::concat(&[x, y], 1)?)?;
    let b = s.shape()[0];
    s.reshape(&[b])
}

/// Deterministic forward pass `G(z, y)`.
pub fn generate(z: &Tensor, y: &Tensor, params: &GeneratorParams) -> Result<Tensor> {
    let (b, zd) = z.dims2()?;
    if zd != params.z_dim {
        return Err(Error::shape("generate", z.shape(), &[b, params.z_dim]));
    }
    check_one_hot(y, b)?;
    let g = Graph::new();
    let vars = params.net.store.bind_const(&g);
    Ok(generator_vars(&vars, g.constant(z.clone()), g.constant(y.clone()))?.value())
}

/// `x̂ = u·real + (1 − u)·fake` with one `u` per row.
pub fn interpolate(real: &Tensor, fake: &Tensor, u: &[f64]) -> Result<Tensor> {
    let (b, d) = real.dims2()?;
    if fake.shape() != real.shape() || u.len() != b {
        return Err(Error::shape("interpolate", real.shape(), fake.shape()));
    }
    let mut out = Vec::with_capacity(b * d);
    for i in 0..b {
        out.extend(real.row(i).iter().zip(fake.row(i)).map(|(r, f)| u[i] * r + (1.0 - u[i]) * f));
    }
    Tensor::new(vec![b, d], out)
}

pub fn sample_u(seed: u64, batch: usize) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    (0..batch).map(|_| r.random::<f64>()).collect()
}

pub struct PenaltyVars<'g> {
    pub penalty: Var<'g>,
    /// `‖∇x̂ D(x̂, y)‖₂` per row.
    pub norms: Vec<f64>,
}

/// `λ·mean((‖∇x̂ D(x̂, y)‖₂ − 1)²)` built with a differentiable gradient so
/// the penalty itself can be backpropagated into the critic.
pub fn penalty_vars<'g>(critic: &[Var<'g>], x_hat: &Tensor, y: Var<'g>, lambda_gp: f64) -> Result<PenaltyVars<'g>> {
    let g = y.graph();
    let xv = g.param(x_hat.clone());
    let scores = critic_vars(critic, xv, y)?;
    let grad = g.grad(scores.sum()?, &[xv], true)?[0];
    let norm = grad.square().sum_cols()?.add_scalar(NORM_EPS).sqrt();
    let norms = norm.value().into_vec();
    let penalty = norm.add_scalar(-1.0).square().mean()?.scale(lambda_gp);
    Ok(PenaltyVars { penalty, norms })
}

pub fn gradient_penalty(real: &Tensor, fake: &Tensor, y: &Tensor, critic: &CriticParams, lambda_gp: f64, seed: u64) -> Result<f64> {
    let u = sample_u(seed, real.rows());
    let x_hat = interpolate(real, fake, &u)?;
    let g = Graph::new();
    let vars = critic.net.store.bind_const(&g);
    Ok(penalty_vars(&vars, &x_hat, g.constant(y.clone()), lambda_gp)?.penalty.item())
}

pub struct CriticLossVars<'g> {
    pub loss: Var<'g>,
    pub gp: f64,
    pub norms: Vec<f64>,
}

/// Minimization objective `mean D(fake) − mean D(real) + GP`.
pub fn critic_loss_vars<'g>(
    critic: &[Var<'g>],
    real: &Tensor,
    fake: &Tensor,
    y: &Tensor,
    lambda_gp: f64,
    seed: u64,
) -> Result<CriticLossVars<'g>> {
    if real.shape() != fake.shape() {
        return Err(Error::shape("critic_loss", real.shape(), fake.shape()));
    }
    let g = critic[0].graph();
    let yv = g.constant(y.clone());
    let d_real = critic_vars(critic, g.constant(real.clone()), yv)?.mean()?;
    let d_fake = critic_vars(critic, g.constant(fake.clone()), yv)?.mean()?;
    let x_hat = interpolate(real, fake, &sample_u(seed, real.rows()))?;
    let pen = penalty_vars(critic, &x_hat, yv, lambda_gp)?;
    let gp = pen.penalty.item();
    Ok(CriticLossVars {
        loss: d_fake.sub(d_real)?.add(pen.penalty)?,
        gp,
        norms: pen.norms,
    })
}

pub fn critic_loss(real: &Tensor, fake: &Tensor, y: &Tensor, critic: &CriticParams, lambda_gp: f64, seed: u64) -> Result<f64> {
    let g = Graph::new();
    let vars = critic.net.store.bind_const(&g);
    Ok(critic_loss_vars(&vars, real, fake, y, lambda_gp, seed)?.loss.item())
}

/// `−mean D(fake, y)`.
pub fn generator_loss(fake: &Tensor, y: &Tensor, critic: &CriticParams) -> Result<f64> {
    let s = critic.score(fake, y)?;
    Ok(-s.iter().sum::<f64>() / s.len().max(1) as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanHistory {
    /// One entry per critic step.
    pub critic_loss: Vec<f64>,
    pub gp: Vec<f64>,
    /// Mean interpolate gradient norm per critic step.
    pub grad_norm: Vec<f64>,
    /// One entry per generator step.
    pub generator_loss: Vec<f64>,
    pub n_critic: usize,
}

impl GanHistory {
    /// One row per generator step; critic columns average that step's
    /// critic updates.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,critic_loss,gen_loss,gp\n");
        let k = self.n_critic.max(1);
        for (i, gl) in self.generator_loss.iter().enumerate() {
            let c = &self.critic_loss[i * k..(i + 1) * k];
            let p = &self.gp[i * k..(i + 1) * k];
            s.push_str(&format!(
                "{},{},{gl},{}\n",
                i + 1,
                c.iter().sum::<f64>() / k as f64,
                p.iter().sum::<f64>() / k as f64
            ));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanModel {
    pub config: GanConfig,
    pub generator: GeneratorParams,
    pub critic: CriticParams,
}

impl GanModel {
    pub fn init(config: &GanConfig) -> Self {
        let mut r = rng::seeded(rng::mix_seed(config.seed, 0));
        GanModel {
            config: config.clone(),
            generator: GeneratorParams::init(config, &mut r),
            critic: CriticParams::init(config, &mut r),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("cwgan").with_meta(serde_json::to_value(&self.config).expect("serializable"));
        for (n, t) in self.generator.net.store.iter() {
            c.push(format!("gen.{n}"), t.clone());
        }
        for (n, t) in self.critic.net.store.iter() {
            c.push(format!("critic.{n}"), t.clone());
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("cwgan")?;
        let config: GanConfig = serde_json::from_value(c.meta.clone())?;
        let mut m = GanModel::init(&config);
        let strip = |prefix: &'static str| {
            c.tensors
                .iter()
                .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|s| (s, t)))
        };
        m.generator.net.store.load_from(strip("gen."))?;
        m.critic.net.store.load_from(strip("critic."))?;
        Ok(m)
    }
}

fn check_dataset(x: &Tensor, y: &[u8], config: &GanConfig) -> Result<()> {
    let (n, d) = x.dims2()?;
    if n != y.len() {
        return Err(Error::shape("train_cwgan", x.shape(), &[y.len(), d]));
    }
    if d != config.data_dim {
        return Err(Error::shape("train_cwgan", x.shape(), &[n, config.data_dim]));
    }
    if !y.contains(&0) || !y.contains(&1) {
        return Err(Error::data("train_cwgan needs both classes present"));
    }
    if y.iter().any(|&l| l > 1) {
        return Err(Error::data("labels must be 0 or 1"));
    }
    if config.n_critic == 0 || config.batch == 0 || config.z_dim == 0 {
        return Err(Error::invalid("n_critic, batch and z_dim must be positive"));
    }
    if !(config.lambda_gp > 0.0) {
        return Err(Error::invalid("lambda_gp must be positive"));
    }
    Ok(())
}

/// Alternates `n_critic` critic updates with one generator update. Each
/// epoch walks a fresh shuffle of the data in critic-sized batches; the
/// generator conditions on the labels of the last real batch it saw.
pub fn train_cwgan(x: &Tensor, y: &[u8], config: &GanConfig) -> Result<(GanModel, GanHistory)> {
    check_dataset(x, y, config)?;
    let n = y.len();
    let mut model = GanModel::init(config);
    let mut r = rng::seeded(config.seed);
    let mut adam_c = AdamState::new(AdamConfig::wgan(config.lr_c), model.critic.net.store.tensors());
    let mut adam_g = AdamState::new(AdamConfig::wgan(config.lr_g), model.generator.net.store.tensors());
    let mut history = GanHistory {
        n_critic: config.n_critic,
        ..GanHistory::default()
    };
    let batch = config.batch.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut critic_step: u64 = 0;
    for epoch in 0..config.epochs {
        rng::shuffle(&mut r, &mut order);
        let batches: Vec<&[usize]> = order.chunks(batch).filter(|c| c.len() == batch).collect();
        for group in batches.chunks(config.n_critic).filter(|g| g.len() == config.n_critic) {
            let mut labels = Vec::new();
            for idx in group {
                let real = x.select_rows(idx);
                labels = idx.iter().map(|&i| y[i]).collect::<Vec<u8>>();
                let yt = one_hot(&labels)?;
                let z = Tensor::randn(&[batch, config.z_dim], 1.0, &mut r);
                let fake = generate(&z, &yt, &model.generator)?;
                let g = Graph::new();
                let vars = model.critic.net.store.bind(&g);
                let cl = critic_loss_vars(&vars, &real, &fake, &yt, config.lambda_gp, rng::mix_seed(config.seed, critic_step))?;
                critic_step += 1;
                let l = cl.loss.item();
                if !l.is_finite() {
                    return Err(Error::non_finite(format!(
                        "critic loss at epoch {}, critic step {critic_step} (gp {})",
                        epoch + 1,
                        cl.gp
                    )));
                }
                let grads: Vec<Tensor> = g.grad(cl.loss, &vars, false)?.iter().map(Var::value).collect();
                adam_c.step(model.critic.net.store.tensors_mut(), &grads)?;
                history.critic_loss.push(l);
                history.gp.push(cl.gp);
                history.grad_norm.push(cl.norms.iter().sum::<f64>() / cl.norms.len() as f64);
            }
            let yt = one_hot(&labels)?;
            let z = Tensor::randn(&[batch, config.z_dim], 1.0, &mut r);
            let g = Graph::new();
            let gvars = model.generator.net.store.bind(&g);
            let cvars = model.critic.net.store.bind_const(&g);
            let yv = g.constant(yt);
            let fake = generator_vars(&gvars, g.constant(z), yv)?;
            let loss = critic_vars(&cvars, fake, yv)?.mean()?.scale(-1.0);
            let l = loss.item();
            if !l.is_finite() {
                return Err(Error::non_finite(format!(
                    "generator loss at epoch {}, generator step {}",
                    epoch + 1,
                    history.generator_loss.len() + 1
                )));
            }
            let grads: Vec<Tensor> = g.grad(loss, &gvars, false)?.iter().map(Var::value).collect();
            adam_g.step(model.generator.net.store.tensors_mut(), &grads)?;
            history.generator_loss.push(l);
        }
        if let (Some(c), Some(gl)) = (history.critic_loss.last(), history.generator_loss.last()) {
            log::info!("cwgan epoch {}: critic {c:.4} gen {gl:.4}", epoch + 1);
        }
    }
    Ok((model, history))
}

/// `n` generated rows for one class, with their labels.
pub fn synth_conditional(n: usize, class_label: u8, params: &GeneratorParams, seed: u64) -> Result<(Tensor, Vec<u8>)> {
    let labels = vec![class_label; n];
    let yt = one_hot(&labels)?;
    if n == 0 {
        return Ok((Tensor::zeros(&[0, params.data_dim()]), labels));
    }
    let z = Tensor::randn(&[n, params.z_dim], 1.0, &mut rng::seeded(seed));
    Ok((generate(&z, &yt, params)?, labels))
}

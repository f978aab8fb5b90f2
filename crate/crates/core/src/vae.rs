//! Variational autoencoder mapping `100×50` embedded queries to 448-dim
//! latent codes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::metrics::{statistical_fidelity, Fidelity};
use crate::rng;
use crate::tensor::{AdamConfig, AdamState, Graph, ParamStore, Tensor, Var};
use crate::text::{EMBED_DIM, SEQ_LEN};

pub const LATENT_DIM: usize = 448;

/// Layer widths. `input` is the flattened query size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeArch {
    pub input: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub latent: usize,
}

impl Default for VaeArch {
    fn default() -> Self {
        VaeArch {
            input: SEQ_LEN * EMBED_DIM,
            hidden1: 2048,
            hidden2: 1024,
            latent: LATENT_DIM,
        }
    }
}

impl VaeArch {
    /// Narrower trunk used for single-core desk runs.
    pub fn desk() -> Self {
        VaeArch {
            hidden1: 1024,
            hidden2: 512,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub arch: VaeArch,
    pub beta: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            arch: VaeArch::default(),
            beta: 1.0,
            lr: 1e-3,
            batch: 64,
            epochs: 20,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeParams {
    pub arch: VaeArch,
    pub store: ParamStore,
}

const LAYERS: [&str; 7] = ["enc1", "enc2", "mu", "logvar", "dec1", "dec2", "out"];

fn dense_init(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut rng::SeededRng) {
    let std = gain / (fan_in as f64).sqrt();
    store.push(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
    store.push(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

impl VaeParams {
    pub fn init(arch: VaeArch, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let mut store = ParamStore::new();
        let relu_gain = 2f64.sqrt();
        dense_init(&mut store, "enc1", arch.input, arch.hidden1, relu_gain, &mut r);
        dense_init(&mut store, "enc2", arch.hidden1, arch.hidden2, relu_gain, &mut r);
        dense_init(&mut store, "mu", arch.hidden2, arch.latent, 1.0, &mut r);
        dense_init(&mut store, "logvar", arch.hidden2, arch.latent, 0.1, &mut r);
        dense_init(&mut store, "dec1", arch.latent, arch.hidden2, relu_gain, &mut r);
        dense_init(&mut store, "dec2", arch.hidden2, arch.hidden1, relu_gain, &mut r);
        dense_init(&mut store, "out", arch.hidden1, arch.input, 1.0, &mut r);
        VaeParams { arch, store }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("vae").with_meta(serde_json::to_value(self.arch).expect("serializable"));
        for (n, t) in self.store.iter() {
            c.push(n, t.clone());
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("vae")?;
        let arch: VaeArch = serde_json::from_value(c.meta.clone())?;
        let mut p = VaeParams::init(arch, 0);
        p.store.load_from(c.tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(p)
    }

    fn flatten(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.rows();
        if x.numel() != n * self.arch.input {
            return Err(Error::shape("vae_input", x.shape(), &[n, self.arch.input]));
        }
        x.reshape(&[n, self.arch.input])
    }

    /// Posterior means `[N, latent]`, evaluated in chunks.
    pub fn encode_mean(&self, x: &Tensor) -> Result<Tensor> {
        self.chunked(x, self.arch.latent, |_, v, xb| Ok(encode(v, xb)?.0), |p, x| p.flatten(x))
    }

    /// Decoder outputs `[N, SEQ_LEN, EMBED_DIM]` for latent rows `[N, latent]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let (n, d) = z.dims2()?;
        if d != self.arch.latent {
            return Err(Error::shape("vae_decode", z.shape(), &[n, self.arch.latent]));
        }
        let out = self.chunked(z, self.arch.input, |_, v, zb| decode(v, zb), |_, z| Ok(z.clone()))?;
        out.reshape(&self.output_shape(n))
    }

    /// `decode(μ(x))`.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.rows();
        let out = self.chunked(
            x,
            self.arch.input,
            |_, v, xb| decode(v, encode(v, xb)?.0),
            |p, x| p.flatten(x),
        )?;
        out.reshape(&self.output_shape(n))
    }

    fn output_shape(&self, n: usize) -> Vec<usize> {
        if self.arch.input == SEQ_LEN * EMBED_DIM {
            vec![n, SEQ_LEN, EMBED_DIM]
        } else {
            vec![n, self.arch.input]
        }
    }

    fn chunked(
        &self,
        x: &Tensor,
        width: usize,
        f: impl for<'g> Fn(&'g Graph, &[Var<'g>], Var<'g>) -> Result<Var<'g>>,
        prep: impl Fn(&Self, &Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        const CHUNK: usize = 256;
        let x = prep(self, x)?;
        let n = x.rows();
        let mut out = Vec::with_capacity(n * width);
        for start in (0..n).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let g = Graph::new();
            let vars = self.store.bind_const(&g);
            let y = f(&g, &vars, g.constant(x.select_rows(&idx)))?;
            out.extend_from_slice(y.value().data());
        }
        Tensor::new(vec![n, width], out)
    }
}

fn layer<'g>(vars: &[Var<'g>], name: &str) -> (Var<'g>, Var<'g>) {
    let i = LAYERS.iter().position(|l| *l == name).expect("known layer");
    (vars[2 * i], vars[2 * i + 1])
}

/// Encoder on a bound parameter list: returns `(μ, logvar)`.
pub fn encode<'g>(vars: &[Var<'g>], x: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
    let (w, b) = layer(vars, "enc1");
    let h = x.dense(w, b)?.relu();
    let (w, b) = layer(vars, "enc2");
    let h = h.dense(w, b)?.relu();
    let (w, b) = layer(vars, "mu");
    let mu = h.dense(w, b)?;
    let (w, b) = layer(vars, "logvar");
    Ok((mu, h.dense(w, b)?))
}

/// Decoder on a bound parameter list; linear output.
pub fn decode<'g>(vars: &[Var<'g>], z: Var<'g>) -> Result<Var<'g>> {
    let (w, b) = layer(vars, "dec1");
    let h = z.dense(w, b)?.relu();
    let (w, b) = layer(vars, "dec2");
    let h = h.dense(w, b)?.relu();
    let (w, b) = layer(vars, "out");
    h.dense(w, b)
}

/// `z = μ + ε·exp(logvar/2)`; ε enters as a constant.
pub fn reparameterize<'g>(mu: Var<'g>, logvar: Var<'g>, epsilon: &Tensor) -> Result<Var<'g>> {
    if mu.shape() != logvar.shape() || mu.shape() != epsilon.shape() {
        return Err(Error::shape("reparameterize", &mu.shape(), epsilon.shape()));
    }
    mu.add(logvar.scale(0.5).exp().mul_const(epsilon)?)
}

/// Plain-value form of [`reparameterize`].
pub fn reparameterize_values(mu: &[f64], logvar: &[f64], epsilon: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != logvar.len() || mu.len() != epsilon.len() {
        return Err(Error::shape("reparameterize", &[mu.len()], &[epsilon.len()]));
    }
    Ok(mu
        .iter()
        .zip(logvar)
        .zip(epsilon)
        .map(|((m, lv), e)| m + e * (lv / 2.0).exp())
        .collect())
}

/// One ε per latent dimension per sample.
pub fn sample_epsilon(rng: &mut rng::SeededRng, batch: usize, latent: usize) -> Tensor {
    Tensor::randn(&[batch, latent], 1.0, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeLossParts {
    pub reconstruction: f64,
    pub kl: f64,
    pub beta: f64,
    pub total: f64,
}

pub struct VaeLossVars<'g> {
    pub total: Var<'g>,
    pub parts: VaeLossParts,
}

/// Batch-mean squared L2 reconstruction plus `beta` times the batch-mean KL
/// to a standard normal. Inputs are `[B, ...]` with the batch first.
pub fn vae_loss_vars<'g>(x: Var<'g>, x_hat: Var<'g>, mu: Var<'g>, logvar: Var<'g>, beta: f64) -> Result<VaeLossVars<'g>> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape("vae_loss", &x.shape(), &x_hat.shape()));
    }
    if mu.shape() != logvar.shape() {
        return Err(Error::shape("vae_loss", &mu.shape(), &logvar.shape()));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta must be a finite non-negative number, got {beta}")));
    }
    let batch = x.shape()[0].max(1) as f64;
    let recon = x.sub(x_hat)?.square().sum()?.scale(1.0 / batch);
    let inner = logvar.add_scalar(1.0).sub(mu.square())?.sub(logvar.exp())?;
    let kl = inner.sum()?.scale(-0.5 / batch);
    let total = recon.add(kl.scale(beta))?;
    let (r, k) = (recon.item(), kl.item());
    Ok(VaeLossVars {
        total,
        parts: VaeLossParts {
            reconstruction: r,
            kl: k,
            beta,
            total: r + beta * k,
        },
    })
}

pub fn vae_loss(x: &Tensor, x_hat: &Tensor, mu: &Tensor, logvar: &Tensor, beta: f64) -> Result<VaeLossParts> {
    let g = Graph::new();
    let v = vae_loss_vars(
        g.constant(x.clone()),
        g.constant(x_hat.clone()),
        g.constant(mu.clone()),
        g.constant(logvar.clone()),
        beta,
    )?;
    Ok(v.parts)
}

/// Per-step and per-epoch training record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub train_reconstruction: Vec<f64>,
    pub step_parts: Vec<VaeLossParts>,
}

impl VaeHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for (i, (t, v)) in self.train_loss.iter().zip(&self.val_loss).enumerate() {
            s.push_str(&format!("{},{t},{v}\n", i + 1));
        }
        s
    }
}

/// Loss of `params` on `x` with `z = μ` (no sampling).
pub fn eval_loss(params: &VaeParams, x: &Tensor, beta: f64) -> Result<VaeLossParts> {
    let xf = params.flatten(x)?;
    let g = Graph::new();
    let vars = params.store.bind_const(&g);
    let xv = g.constant(xf);
    let (mu, lv) = encode(&vars, xv)?;
    let xh = decode(&vars, mu)?;
    Ok(vae_loss_vars(xv, xh, mu, lv, beta)?.parts)
}

/// Minibatch Adam on the VAE loss. The validation split is drawn from the
/// seed; validation loss is evaluated at the posterior mean.
pub fn train_vae(dataset: &Tensor, config: &VaeConfig) -> Result<(VaeParams, VaeHistory)> {
    let n = dataset.rows();
    if config.batch == 0 || n < 2 * config.batch {
        return Err(Error::invalid(format!(
            "train_vae needs at least 2 batches of {} rows, got {n}",
            config.batch
        )));
    }
    if !(0.0..1.0).contains(&config.val_fraction) {
        return Err(Error::invalid("val_fraction must lie in [0, 1)"));
    }
    let mut params = VaeParams::init(config.arch, rng::mix_seed(config.seed, 0));
    let x_all = params.flatten(dataset)?;
    let mut r = rng::seeded(config.seed);
    let order = rng::permutation(&mut r, n);
    let n_val = ((n as f64 * config.val_fraction).round() as usize).min(n - config.batch);
    let (val_idx, train_idx) = order.split_at(n_val);
    let x_val = x_all.select_rows(val_idx);
    let mut train_idx = train_idx.to_vec();

    let mut adam = AdamState::new(AdamConfig::standard(config.lr), params.store.tensors());
    let mut history = VaeHistory::default();
    for epoch in 0..config.epochs {
        rng::shuffle(&mut r, &mut train_idx);
        let (mut sum_total, mut sum_recon) = (0.0, 0.0);
        for (bi, chunk) in train_idx.chunks(config.batch).enumerate() {
            let xb = x_all.select_rows(chunk);
            let eps = sample_epsilon(&mut r, chunk.len(), config.arch.latent);
            let g = Graph::new();
            let vars = params.store.bind(&g);
            let xv = g.constant(xb);
            let (mu, lv) = encode(&vars, xv)?;
            let z = reparameterize(mu, lv, &eps)?;
            let xh = decode(&vars, z)?;
            let loss = vae_loss_vars(xv, xh, mu, lv, config.beta)?;
            if !loss.parts.total.is_finite() {
                return Err(Error::non_finite(format!("vae loss at epoch {}, batch {bi}", epoch + 1)));
            }
            let grads: Vec<Tensor> = g.grad(loss.total, &vars, false)?.iter().map(Var::value).collect();
            adam.step(params.store.tensors_mut(), &grads)?;
            sum_total += loss.parts.total * chunk.len() as f64;
            sum_recon += loss.parts.reconstruction * chunk.len() as f64;
            history.step_parts.push(loss.parts);
        }
        let m = train_idx.len() as f64;
        history.train_loss.push(sum_total / m);
        history.train_reconstruction.push(sum_recon / m);
        let val = if x_val.rows() > 0 {
            eval_loss(&params, &x_val, config.beta)?.total
        } else {
            sum_total / m
        };
        if !val.is_finite() {
            return Err(Error::non_finite(format!("vae validation loss at epoch {}", epoch + 1)));
        }
        history.val_loss.push(val);
        log::info!("vae epoch {}: train {:.4} val {:.4}", epoch + 1, sum_total / m, val);
    }
    Ok((params, history))
}

/// Posterior means of every row: `[N, latent]`.
pub fn encode_dataset(dataset: &Tensor, params: &VaeParams) -> Result<Tensor> {
    params.encode_mean(dataset)
}

pub fn vae_quality(dataset: &Tensor, params: &VaeParams) -> Result<Fidelity> {
    let recon = params.reconstruct(dataset)?;
    statistical_fidelity(&dataset.reshape(recon.shape())?, &recon)
}

//! 1-D U-Net over embedded queries: reconstruction training, TPE tuning and
//! generation by bottleneck noise injection.
//!
//! Data enters in its natural layout (`[N, SEQ_LEN, EMBED_DIM]` sequences or
//! `[N, D]` latent vectors) and is viewed channel-major internally:
//! `[N, EMBED_DIM, SEQ_LEN]` or `[N, 1, D]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::lab::{get_f64, get_int, tpe_lite, ParamSpec, SearchResult, SearchSpace, TpeConfig};
use crate::rng;
use crate::tensor::{AdamConfig, AdamState, Graph, ParamStore, Tensor, Var};

pub const KERNEL: usize = 3;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_filters: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub early_stop_patience: usize,
    pub val_fraction: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 3,
            base_filters: 32,
            dropout: 0.1,
            learning_rate: 1e-3,
            lr_decay: 0.98,
            epochs: 30,
            batch: 32,
            seed: 0,
            early_stop_patience: 5,
            val_fraction: 0.1,
        }
    }
}

impl UNetConfig {
    fn validate(&self) -> Result<()> {
        if !(3..=5).contains(&self.depth) {
            return Err(Error::invalid(format!("unet depth must be 3, 4 or 5, got {}", self.depth)));
        }
        if self.base_filters == 0 {
            return Err(Error::invalid("base_filters must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("val_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Static geometry of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetArch {
    pub channels: usize,
    pub length: usize,
    pub depth: usize,
    pub base_filters: usize,
}

/// Channel counts of one decoder level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderLevel {
    pub input: usize,
    pub upsampled: usize,
    pub skip: usize,
    pub concat: usize,
    pub output: usize,
}

impl UNetArch {
    pub fn new(channels: usize, length: usize, depth: usize, base_filters: usize) -> Result<Self> {
        if !(3..=5).contains(&depth) {
            return Err(Error::invalid(format!("unet depth must be 3, 4 or 5, got {depth}")));
        }
        if channels == 0 || base_filters == 0 {
            return Err(Error::invalid("unet needs at least one channel and one filter"));
        }
        if length < 1 << depth {
            return Err(Error::invalid(format!(
                "sequence length {length} is shorter than 2^depth = {}",
                1 << depth
            )));
        }
        Ok(UNetArch {
            channels,
            length,
            depth,
            base_filters,
        })
    }

    /// Geometry implied by a dataset's shape.
    pub fn for_data(shape: &[usize], depth: usize, base_filters: usize) -> Result<Self> {
        match *shape {
            [_, l, c] => Self::new(c, l, depth, base_filters),
            [_, d] => Self::new(1, d, depth, base_filters),
            _ => Err(Error::shape("unet_input", shape, &[0, 0, 0])),
        }
    }

    /// Length rounded up to a multiple of `2^depth`.
    pub fn padded_length(&self) -> usize {
        let m = 1 << self.depth;
        self.length.div_ceil(m) * m
    }

    pub fn level_filters(&self, level: usize) -> usize {
        self.base_filters << level
    }

    pub fn bottleneck_shape(&self, batch: usize) -> [usize; 3] {
        [batch, self.level_filters(self.depth), self.padded_length() >> self.depth]
    }

    /// Decoder levels from the bottleneck outwards; decoder level `j`
    /// consumes the skip of encoder level `depth − 1 − j`.
    pub fn decoder_levels(&self) -> Vec<DecoderLevel> {
        (0..self.depth)
            .map(|j| {
                let i = self.depth - 1 - j;
                let skip = self.level_filters(i);
                DecoderLevel {
                    input: self.level_filters(i + 1),
                    upsampled: skip,
                    skip,
                    concat: 2 * skip,
                    output: skip,
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    /// Batch statistics and dropout drawn from `seed`.
    Train { seed: u64 },
    /// Running statistics, no dropout.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetParams {
    pub arch: UNetArch,
    pub dropout: f64,
    pub store: ParamStore,
    /// Batchnorm running means and variances; not trained by Adam.
    pub buffers: ParamStore,
}

fn he(shape: &[usize], fan_in: usize, r: &mut rng::SeededRng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), r)
}

impl UNetParams {
    pub fn init(arch: UNetArch, dropout: f64, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let mut store = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut bn = |store: &mut ParamStore, name: &str, c: usize| {
            store.push(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
            store.push(format!("{name}.beta"), Tensor::zeros(&[c]));
            buffers.push(format!("{name}.running_mean"), Tensor::zeros(&[c]));
            buffers.push(format!("{name}.running_var"), Tensor::full(&[c], 1.0));
        };
        let mut cin = arch.channels;
        for i in 0..arch.depth {
            let c = arch.level_filters(i);
            store.push(format!("enc{i}.w"), he(&[c, cin, KERNEL], cin * KERNEL, &mut r));
            bn(&mut store, &format!("enc{i}"), c);
            cin = c;
        }
        let cb = arch.level_filters(arch.depth);
        store.push("bott.w", he(&[cb, cin, KERNEL], cin * KERNEL, &mut r));
        bn(&mut store, "bott", cb);
        for (j, lv) in arch.decoder_levels().iter().enumerate() {
            store.push(format!("dec{j}.up"), he(&[lv.input, lv.upsampled, KERNEL], lv.input * KERNEL / 2, &mut r));
            store.push(format!("dec{j}.w"), he(&[lv.output, lv.concat, KERNEL], lv.concat * KERNEL, &mut r));
            bn(&mut store, &format!("dec{j}"), lv.output);
        }
        let f = arch.base_filters;
        store.push("out.w", Tensor::randn(&[arch.channels, f, 1], (1.0 / f as f64).sqrt(), &mut r));
        store.push("out.b", Tensor::zeros(&[arch.channels]));
        UNetParams {
            arch,
            dropout,
            store,
            buffers,
        }
    }

    fn index(&self, name: &str) -> usize {
        (0..self.store.len())
            .find(|&i| self.store.name(i) == name)
            .unwrap_or_else(|| panic!("unknown unet parameter {name}"))
    }

    fn running(&self, layer: &str) -> (&[f64], &[f64]) {
        let find = |suffix: &str| {
            let name = format!("{layer}.{suffix}");
            let i = (0..self.buffers.len()).find(|&i| self.buffers.name(i) == name).expect("known buffer");
            self.buffers.get(i).data()
        };
        (find("running_mean"), find("running_var"))
    }

    fn update_running(&mut self, stats: &[(Vec<f64>, Vec<f64>)]) {
        // buffers are pushed as (mean, var) pairs in bn_layers order
        let bufs = self.buffers.tensors_mut();
        for (k, (mean, var)) in stats.iter().enumerate() {
            for (slot, batch) in [(2 * k, mean), (2 * k + 1, var)] {
                for (r, b) in bufs[slot].data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({ "arch": self.arch, "dropout": self.dropout });
        let mut c = Checkpoint::new("unet").with_meta(meta);
        for (n, t) in self.store.iter().chain(self.buffers.iter()) {
            c.push(n, t.clone());
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("unet")?;
        let arch: UNetArch = serde_json::from_value(c.meta["arch"].clone())?;
        let dropout = c.meta["dropout"].as_f64().ok_or_else(|| Error::data("unet checkpoint lacks dropout"))?;
        let arch = UNetArch::new(arch.channels, arch.length, arch.depth, arch.base_filters)?;
        let mut p = UNetParams::init(arch, dropout, 0);
        let entries = || c.tensors.iter().map(|(n, t)| (n.as_str(), t));
        p.store.load_from(entries())?;
        p.buffers.load_from(entries())?;
        Ok(p)
    }

    /// Natural layout to channel-major `[N, C, L]`.
    pub fn to_channel_major(&self, x: &Tensor) -> Result<Tensor> {
        let (c, l) = (self.arch.channels, self.arch.length);
        match *x.shape() {
            [n, xl, xc] if xl == l && xc == c => {
                let src = x.data();
                let mut out = vec![0.0; n * c * l];
                for b in 0..n {
                    for t in 0..l {
                        for ch in 0..c {
                            out[(b * c + ch) * l + t] = src[(b * l + t) * c + ch];
                        }
                    }
                }
                Tensor::new(vec![n, c, l], out)
            }
            [n, d] if c == 1 && d == l => x.reshape(&[n, 1, l]),
            _ => Err(Error::shape("unet_input", x.shape(), &[x.rows(), l, c])),
        }
    }

    /// Inverse of [`UNetParams::to_channel_major`]; `like` supplies the rank.
    pub fn from_channel_major(&self, y: &Tensor, rank: usize) -> Result<Tensor> {
        let (c, l) = (self.arch.channels, self.arch.length);
        let n = y.rows();
        if rank == 2 {
            return y.reshape(&[n, l]);
        }
        let src = y.data();
        let mut out = vec![0.0; n * c * l];
        for b in 0..n {
            for ch in 0..c {
                for t in 0..l {
                    out[(b * l + t) * c + ch] = src[(b * c + ch) * l + t];
                }
            }
        }
        Tensor::new(vec![n, l, c], out)
    }
}

/// Forward output plus the per-batchnorm batch statistics (train mode).
pub struct ForwardOut<'g> {
    pub out: Var<'g>,
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

struct Ctx<'a, 'g> {
    p: &'a UNetParams,
    vars: &'a [Var<'g>],
    mode: Mode,
    stats: Vec<(Vec<f64>, Vec<f64>)>,
}

impl<'g> Ctx<'_, 'g> {
    fn v(&self, name: &str) -> Var<'g> {
        self.vars[self.p.index(name)]
    }

    fn bn_relu(&mut self, x: Var<'g>, layer: &str) -> Result<Var<'g>> {
        let (gamma, beta) = (self.v(&format!("{layer}.gamma")), self.v(&format!("{layer}.beta")));
        let y = match self.mode {
            Mode::Train { .. } => {
                let o = x.batchnorm_train(gamma, beta)?;
                self.stats.push((o.batch_mean, o.batch_var));
                o.out
            }
            Mode::Eval => {
                let (m, v) = self.p.running(layer);
                x.batchnorm_eval(gamma, beta, m, v)?
            }
        };
        Ok(y.relu())
    }
}

/// Channel-major forward pass on a bound parameter list. `noise` (shape of
/// [`UNetArch::bottleneck_shape`]) is added to the bottleneck activations.
pub fn forward_vars<'g>(
    p: &UNetParams,
    vars: &[Var<'g>],
    x: Var<'g>,
    mode: Mode,
    noise: Option<&Tensor>,
) -> Result<ForwardOut<'g>> {
    let a = p.arch;
    let shape = x.shape();
    if shape.len() != 3 || shape[1] != a.channels || shape[2] != a.length {
        return Err(Error::shape("unet_forward", &shape, &[shape[0], a.channels, a.length]));
    }
    let lp = a.padded_length();
    let mut ctx = Ctx {
        p,
        vars,
        mode,
        stats: Vec::new(),
    };
    let mut h = if lp == a.length { x } else { x.pad_slice(2, 0, lp)? };
    let pad = KERNEL / 2;
    let mut skips = Vec::with_capacity(a.depth);
    for i in 0..a.depth {
        h = h.conv1d(ctx.v(&format!("enc{i}.w")), 1, pad)?;
        h = ctx.bn_relu(h, &format!("enc{i}"))?;
        if let Mode::Train { seed } = mode {
            h = h.dropout(p.dropout, rng::mix_seed(seed, i as u64), true)?;
        }
        skips.push(h);
        h = h.maxpool2()?;
    }
    h = h.conv1d(ctx.v("bott.w"), 1, pad)?;
    h = ctx.bn_relu(h, "bott")?;
    if let Some(n) = noise {
        h = h.add(h.graph().constant(n.clone()))?;
    }
    for j in 0..a.depth {
        let skip = skips[a.depth - 1 - j];
        let target = skip.shape()[2];
        h = h.conv1d_transpose(ctx.v(&format!("dec{j}.up")), 2, 0)?.slice(2, 0, target)?;
        h = Var::concat(&[h, skip], 1)?;
        h = h.conv1d(ctx.v(&format!("dec{j}.w")), 1, pad)?;
        h = ctx.bn_relu(h, &format!("dec{j}"))?;
    }
    h = h.conv1d(ctx.v("out.w"), 1, 0)?.channel_bias(ctx.v("out.b"))?;
    if lp != a.length {
        h = h.slice(2, 0, a.length)?;
    }
    Ok(ForwardOut {
        out: h,
        batch_stats: ctx.stats,
    })
}

/// Per-element mean squared error.
pub fn mse_loss<'g>(x: Var<'g>, x_hat: Var<'g>) -> Result<Var<'g>> {
    x.sub(x_hat)?.square().mean()
}

const EVAL_CHUNK: usize = 64;

/// Runs the network over `x` in its natural layout. Eval mode is chunked;
/// train mode uses the whole input as one batch.
pub fn unet_forward(x: &Tensor, params: &UNetParams, mode: Mode) -> Result<Tensor> {
    let xc = params.to_channel_major(x)?;
    let y = forward_channel_major(&xc, params, mode, None)?;
    params.from_channel_major(&y, x.ndim())
}

fn forward_channel_major(xc: &Tensor, params: &UNetParams, mode: Mode, noise: Option<&Tensor>) -> Result<Tensor> {
    let n = xc.rows();
    let chunk = if matches!(mode, Mode::Eval) { EVAL_CHUNK } else { n.max(1) };
    let mut out = Vec::with_capacity(xc.numel());
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let g = Graph::new();
        let vars = params.store.bind_const(&g);
        let nz = match noise {
            Some(t) => Some(t.select_rows(&idx)),
            None => None,
        };
        let y = forward_vars(params, &vars, g.constant(xc.select_rows(&idx)), mode, nz.as_ref())?;
        out.extend_from_slice(y.out.value().data());
    }
    Tensor::new(xc.shape().to_vec(), out)
}

/// Eval-mode per-element MSE of reconstructions.
pub fn reconstruction_mse(x: &Tensor, params: &UNetParams) -> Result<f64> {
    let y = unet_forward(x, params, Mode::Eval)?;
    Ok(x.zip_map(&y, "mse", |a, b| (a - b) * (a - b))?.mean())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UNetHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub learning_rate: Vec<f64>,
    /// 0-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl UNetHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,learning_rate\n");
        for i in 0..self.val_loss.len() {
            s.push_str(&format!(
                "{},{},{},{}\n",
                i + 1,
                self.train_loss[i],
                self.val_loss[i],
                self.learning_rate[i]
            ));
        }
        s
    }
}

pub fn train_unet(dataset: &Tensor, config: &UNetConfig) -> Result<(UNetParams, UNetHistory)> {
    train_unet_observed(dataset, config, |_, _| false)
}

/// [`train_unet`] with an observer called after each epoch with
/// `(epoch, val_loss)`; returning `true` stops training.
pub fn train_unet_observed(
    dataset: &Tensor,
    config: &UNetConfig,
    mut observe: impl FnMut(usize, f64) -> bool,
) -> Result<(UNetParams, UNetHistory)> {
    config.validate()?;
    let n = dataset.rows();
    if config.batch == 0 || n < 2 * config.batch {
        return Err(Error::invalid(format!(
            "train_unet needs at least 2 batches of {} rows, got {n}",
            config.batch
        )));
    }
    let arch = UNetArch::for_data(dataset.shape(), config.depth, config.base_filters)?;
    let mut params = UNetParams::init(arch, config.dropout, rng::mix_seed(config.seed, 0));
    let x_all = params.to_channel_major(dataset)?;
    let mut r = rng::seeded(config.seed);
    let order = rng::permutation(&mut r, n);
    let n_val = ((n as f64 * config.val_fraction).round() as usize).min(n - config.batch);
    let (val_idx, train_idx) = order.split_at(n_val);
    let x_val = x_all.select_rows(val_idx);
    let mut train_idx = train_idx.to_vec();

    let mut adam = AdamState::new(AdamConfig::standard(config.learning_rate), params.store.tensors());
    let mut history = UNetHistory::default();
    let mut best: Option<(f64, UNetParams)> = None;
    let mut since_best = 0;
    let mut step: u64 = 0;
    for epoch in 0..config.epochs {
        let lr = config.learning_rate * config.lr_decay.powi(epoch as i32);
        adam.set_lr(lr);
        rng::shuffle(&mut r, &mut train_idx);
        let mut sum = 0.0;
        for (bi, chunk) in train_idx.chunks(config.batch).enumerate() {
            let g = Graph::new();
            let vars = params.store.bind(&g);
            let xb = g.constant(x_all.select_rows(chunk));
            let mode = Mode::Train {
                seed: rng::mix_seed(config.seed, 1 + step),
            };
            step += 1;
            let fwd = forward_vars(&params, &vars, xb, mode, None)?;
            let loss = mse_loss(xb, fwd.out)?;
            let l = loss.item();
            if !l.is_finite() {
                return Err(Error::non_finite(format!("unet loss at epoch {}, batch {bi}", epoch + 1)));
            }
            let grads: Vec<Tensor> = g.grad(loss, &vars, false)?.iter().map(Var::value).collect();
            adam.step(params.store.tensors_mut(), &grads)?;
            params.update_running(&fwd.batch_stats);
            sum += l * chunk.len() as f64;
        }
        let train = sum / train_idx.len() as f64;
        let val = if x_val.rows() > 0 {
            let y = forward_channel_major(&x_val, &params, Mode::Eval, None)?;
            x_val.zip_map(&y, "mse", |a, b| (a - b) * (a - b))?.mean()
        } else {
            train
        };
        if !val.is_finite() {
            return Err(Error::non_finite(format!("unet validation loss at epoch {}", epoch + 1)));
        }
        history.train_loss.push(train);
        history.val_loss.push(val);
        history.learning_rate.push(lr);
        log::info!("unet epoch {}: train {train:.6} val {val:.6}", epoch + 1);
        if best.as_ref().is_none_or(|(b, _)| val < *b) {
            best = Some((val, params.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if observe(epoch, val) {
            break;
        }
        if config.early_stop_patience > 0 && since_best >= config.early_stop_patience {
            history.stopped_early = true;
            break;
        }
    }
    let params = best.map(|(_, p)| p).unwrap_or(params);
    Ok((params, history))
}

/// The documented search ranges: filters 32–128, learning rate 1e−5–1e−2
/// (log), dropout 0.1–0.5, depth 3–5.
pub fn unet_search_space() -> SearchSpace {
    BTreeMap::from([
        ("base_filters".to_string(), ParamSpec::Int { lo: 32, hi: 128 }),
        ("learning_rate".to_string(), ParamSpec::Log { lo: 1e-5, hi: 1e-2 }),
        ("dropout".to_string(), ParamSpec::Linear { lo: 0.1, hi: 0.5 }),
        ("depth".to_string(), ParamSpec::Int { lo: 3, hi: 5 }),
    ])
}

/// TPE-lite over `space`, minimizing best validation MSE. Parameters not
/// in the space keep their values from `base`.
pub fn tune_unet(dataset: &Tensor, space: &SearchSpace, base: &UNetConfig, tpe: &TpeConfig) -> Result<(UNetConfig, SearchResult)> {
    if space.is_empty() {
        return Err(Error::invalid("empty search space"));
    }
    let apply = |p: &crate::lab::Params| -> Result<UNetConfig> {
        let mut c = base.clone();
        if p.contains_key("base_filters") {
            c.base_filters = get_int(p, "base_filters")? as usize;
        }
        if p.contains_key("learning_rate") {
            c.learning_rate = get_f64(p, "learning_rate")?;
        }
        if p.contains_key("dropout") {
            c.dropout = get_f64(p, "dropout")?;
        }
        if p.contains_key("depth") {
            c.depth = get_int(p, "depth")? as usize;
        }
        Ok(c)
    };
    let result = tpe_lite(
        space,
        |p, ctx| {
            let cfg = apply(p)?;
            let (_, h) = train_unet_observed(dataset, &cfg, |epoch, val| ctx.report(epoch, val))?;
            Ok(h.val_loss.iter().copied().fold(f64::INFINITY, f64::min))
        },
        tpe,
    )?;
    Ok((apply(&result.best)?, result))
}

/// `n` rows sampled with replacement from `dataset`, passed through the
/// eval-mode network with `N(0, sigma²)` noise added at the bottleneck.
/// Returns the batch (natural layout) and the source row of each sample.
pub fn generate_unet(
    dataset: &Tensor,
    params: &UNetParams,
    noise_sigma: f64,
    n: usize,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    use rand::Rng;
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::invalid(format!("noise_sigma must be >= 0, got {noise_sigma}")));
    }
    let rows = dataset.rows();
    if rows == 0 {
        return Err(Error::invalid("generate_unet needs a non-empty dataset"));
    }
    let mut r = rng::seeded(seed);
    let src: Vec<usize> = (0..n).map(|_| r.random_range(0..rows)).collect();
    let xc = params.to_channel_major(&dataset.select_rows(&src))?;
    let noise = (noise_sigma > 0.0).then(|| Tensor::randn(&params.arch.bottleneck_shape(n), noise_sigma, &mut r));
    let y = forward_channel_major(&xc, params, Mode::Eval, noise.as_ref())?;
    Ok((params.from_channel_major(&y, dataset.ndim())?, src))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_params;

    fn toy_params() -> UNetParams {
        UNetParams::init(UNetArch::new(2, 8, 3, 2).unwrap(), 0.2, 3)
    }

    #[test]
    fn shapes_and_padding() {
        let a = UNetArch::new(50, 100, 3, 4).unwrap();
        assert_eq!(a.padded_length(), 104);
        assert_eq!(UNetArch::new(1, 448, 5, 4).unwrap().padded_length(), 448);
        assert!(UNetArch::new(2, 7, 3, 2).is_err());
        assert!(UNetArch::new(2, 64, 6, 2).is_err());
        let p = UNetParams::init(a, 0.1, 0);
        let x = Tensor::randn(&[2, 100, 50], 1.0, &mut rng::seeded(1));
        let y = unet_forward(&x, &p, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[2, 100, 50]);
        assert_eq!(y, unet_forward(&x, &p, Mode::Eval).unwrap());
        assert_eq!(unet_forward(&x, &p, Mode::Train { seed: 1 }).unwrap().shape(), &[2, 100, 50]);
    }

    #[test]
    fn decoder_channels_add_up() {
        for depth in 3..=5 {
            let a = UNetArch::new(50, 100, depth, 8).unwrap();
            let lv = a.decoder_levels();
            assert_eq!(lv[0].input, a.level_filters(depth));
            for (j, l) in lv.iter().enumerate() {
                assert_eq!(l.concat, l.upsampled + l.skip);
                assert_eq!(l.skip, a.level_filters(depth - 1 - j));
                if j + 1 < lv.len() {
                    assert_eq!(lv[j + 1].input, l.output);
                }
            }
        }
    }

    #[test]
    fn layout_round_trip() {
        let p = UNetParams::init(UNetArch::new(3, 8, 3, 2).unwrap(), 0.0, 0);
        let x = Tensor::randn(&[2, 8, 3], 1.0, &mut rng::seeded(2));
        let cm = p.to_channel_major(&x).unwrap();
        assert_eq!(cm.data()[8], x.data()[1]);
        assert_eq!(p.from_channel_major(&cm, 3).unwrap(), x);
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let p = toy_params();
        let x = Tensor::randn(&[3, 2, 8], 1.0, &mut rng::seeded(5));
        let err = grad_check_params(
            |g, vars| {
                let xv = g.constant(x.clone());
                let fwd = forward_vars(&p, vars, xv, Mode::Train { seed: 9 }, None)?;
                mse_loss(xv, fwd.out)
            },
            p.store.tensors(),
            1e-6,
            None,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_noise_generation_is_reconstruction() {
        let p = toy_params();
        let data = Tensor::randn(&[5, 8, 2], 1.0, &mut rng::seeded(1));
        let (g, src) = generate_unet(&data, &p, 0.0, 7, 4).unwrap();
        assert_eq!(g, unet_forward(&data.select_rows(&src), &p, Mode::Eval).unwrap());
        assert_eq!(generate_unet(&data, &p, 0.1, 7, 4).unwrap(), generate_unet(&data, &p, 0.1, 7, 4).unwrap());
        assert!(generate_unet(&data, &p, -1.0, 7, 4).is_err());
    }

    #[test]
    fn constant_zero_data_stops_early() {
        let data = Tensor::zeros(&[16, 8, 2]);
        let cfg = UNetConfig {
            base_filters: 2,
            batch: 4,
            epochs: 20,
            early_stop_patience: 1,
            ..UNetConfig::default()
        };
        let (_, h) = train_unet(&data, &cfg).unwrap();
        assert!(h.val_loss.len() <= 3, "{:?}", h.val_loss);
        assert!(h.stopped_early);
        assert_eq!(h.train_loss.len(), h.val_loss.len());
    }

    #[test]
    fn checkpoint_round_trip() {
        let data = Tensor::randn(&[8, 8, 2], 1.0, &mut rng::seeded(1));
        let cfg = UNetConfig {
            base_filters: 2,
            batch: 4,
            epochs: 2,
            val_fraction: 0.0,
            ..UNetConfig::default()
        };
        let (p, _) = train_unet(&data, &cfg).unwrap();
        let back = UNetParams::from_checkpoint(&Checkpoint::from_bytes(&p.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, p);
    }
}

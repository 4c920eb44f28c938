use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dump::ActivationDump;
use super::train::Adam;
use crate::error::{validation, Error, Result};
use crate::sae::{ActivationKind, ActivationSpec, SaeModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainConfig {
    pub d_hidden: usize,
    pub activation: ActivationSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// L1 penalty on activations; only used for plain ReLU.
    pub l1_weight: f64,
    pub seed: u64,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self {
            d_hidden: 1024,
            activation: ActivationSpec::top_k(32),
            epochs: 10,
            batch_size: 256,
            learning_rate: 1e-3,
            l1_weight: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainReport {
    /// Full-data loss after each epoch.
    pub loss_curve: Vec<f64>,
    pub final_mse: f64,
    /// Mean squared norm of the inputs (error of reconstructing zero).
    pub zero_baseline_mse: f64,
}

/// Squared reconstruction error summed over features, averaged over rows,
/// plus the L1 term for ReLU SAEs.
pub fn batch_loss(sae: &SaeModel, x: ArrayView2<f32>, l1_weight: f64) -> Result<f64> {
    let mut total = 0.0;
    for row in x.outer_iter() {
        let f = sae.forward(row)?;
        let r = &f.recon - &row;
        total += r.iter().map(|v| (*v as f64).powi(2)).sum::<f64>();
        if sae.activation.kind == ActivationKind::Relu {
            total += l1_weight * f.act.values().iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    Ok(total / x.nrows() as f64)
}

/// Gradients of [`batch_loss`] with respect to every SAE parameter.
#[derive(Debug, Clone)]
pub struct SaeGrads {
    pub encoder: Array2<f32>,
    pub decoder: Array2<f32>,
    pub encoder_bias: Array1<f32>,
    pub decoder_bias: Array1<f32>,
    pub loss: f64,
}

/// Analytic gradient of [`batch_loss`]; the selection mask is treated as constant.
pub fn batch_grads(sae: &SaeModel, x: ArrayView2<f32>, l1_weight: f64) -> Result<SaeGrads> {
    let b = x.nrows() as f32;
    let gamma = sae.encode_batch(x)?;
    let mut v = Array2::<f32>::zeros(gamma.raw_dim());
    for (i, g) in gamma.outer_iter().enumerate() {
        for (j, val) in sae.activate(g)?.iter() {
            v[[i, j as usize]] = val;
        }
    }
    let recon = v.dot(&sae.decoder) + &sae.decoder_bias;
    let r = &recon - &x;
    let mut loss = r.iter().map(|e| (*e as f64).powi(2)).sum::<f64>();
    let dr = &r * (2.0 / b);
    let decoder = v.t().dot(&dr);
    let decoder_bias = dr.sum_axis(Axis(0));
    let mut dv = dr.dot(&sae.decoder.t());
    let relu = sae.activation.kind == ActivationKind::Relu;
    if relu {
        loss += l1_weight * v.iter().map(|&a| a as f64).sum::<f64>();
    }
    let l1 = (l1_weight / b as f64) as f32;
    ndarray::Zip::from(&mut dv).and(&v).for_each(|d, &a| {
        if a > 0.0 {
            if relu {
                *d += l1;
            }
        } else {
            *d = 0.0;
        }
    });
    let encoder = x.t().dot(&dv);
    let encoder_bias = dv.sum_axis(Axis(0));
    Ok(SaeGrads {
        encoder,
        decoder,
        encoder_bias,
        decoder_bias,
        loss: loss / b as f64,
    })
}

fn normalize_rows(m: &mut Array2<f32>) {
    for mut row in m.outer_iter_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
}

/// Decoder rows drawn uniformly on the sphere, encoder tied to the
/// decoder transpose, decoder bias at the data mean.
pub fn init_sae(x: ArrayView2<f32>, config: &SaeTrainConfig, layer_id: usize) -> Result<SaeModel> {
    let d_latent = x.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let mut decoder = Array2::from_shape_simple_fn((config.d_hidden, d_latent), || normal.sample(&mut rng));
    normalize_rows(&mut decoder);
    let encoder = decoder.t().as_standard_layout().into_owned();
    let mut sae = SaeModel::new(encoder, decoder, config.activation, layer_id)?;
    if x.nrows() > 0 {
        sae.decoder_bias = x.mean_axis(Axis(0)).unwrap();
    }
    Ok(sae)
}

/// Mini-batch Adam on the squared reconstruction error with a linearly
/// decaying learning rate; decoder rows are renormalized after every step.
pub fn train_sae(dump: &ActivationDump, config: &SaeTrainConfig) -> Result<(SaeModel, SaeTrainReport)> {
    if dump.is_empty() {
        return Err(validation("activation dump is empty"));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(validation("epochs and batch_size must be positive"));
    }
    if config.d_hidden <= dump.d_latent() {
        return Err(validation(format!(
            "d_hidden {} must exceed d_latent {}",
            config.d_hidden,
            dump.d_latent()
        )));
    }
    config.activation.validate(config.d_hidden)?;
    if dump.len() < 10 * config.d_hidden {
        log::warn!(
            "training an SAE with {} hidden units on only {} token records",
            config.d_hidden,
            dump.len()
        );
    }
    let x = dump.latents.view();
    let mut sae = init_sae(x, config, dump.sae_layer)?;
    sae.source_model = Some(dump.source_model.clone());
    let report = fit(&mut sae, x, config)?;
    sae.id = sae.fingerprint();
    Ok((sae, report))
}

pub(crate) fn fit(sae: &mut SaeModel, x: ArrayView2<f32>, config: &SaeTrainConfig) -> Result<SaeTrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    sae.encoder = sae.encoder.as_standard_layout().into_owned();
    sae.decoder = sae.decoder.as_standard_layout().into_owned();
    let mut adam = Adam::new(
        config.learning_rate,
        [
            sae.encoder.as_slice().unwrap(),
            sae.decoder.as_slice().unwrap(),
            sae.encoder_bias.as_slice().unwrap(),
            sae.decoder_bias.as_slice().unwrap(),
        ]
        .into_iter(),
    );
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let total_steps = (x.nrows().div_ceil(config.batch_size) * config.epochs) as f64;
    let mut step = 0usize;
    let mut loss_curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(config.batch_size) {
            let xb = x.select(Axis(0), idx);
            let g = batch_grads(sae, xb.view(), config.l1_weight)?;
            if !g.loss.is_finite() {
                return Err(Error::Training(format!("SAE loss diverged in epoch {epoch}")));
            }
            total += g.loss * idx.len() as f64;
            adam.set_lr(config.learning_rate * (1.0 - 0.9 * step as f64 / total_steps));
            step += 1;
            adam.update(
                [
                    sae.encoder.as_slice_mut().unwrap(),
                    sae.decoder.as_slice_mut().unwrap(),
                    sae.encoder_bias.as_slice_mut().unwrap(),
                    sae.decoder_bias.as_slice_mut().unwrap(),
                ]
                .into_iter(),
                [
                    g.encoder.as_slice().unwrap(),
                    g.decoder.as_slice().unwrap(),
                    g.encoder_bias.as_slice().unwrap(),
                    g.decoder_bias.as_slice().unwrap(),
                ]
                .into_iter(),
                1.0,
            );
            normalize_rows(&mut sae.decoder);
        }
        let mean = batch_loss(sae, x, config.l1_weight)?;
        log::info!("sae epoch {epoch}: running loss {:.5}, end-of-epoch loss {mean:.5}", total / x.nrows() as f64);
        loss_curve.push(mean);
    }
    let final_mse = batch_loss(sae, x, 0.0)?;
    let zero_baseline_mse = x.outer_iter().map(|r| r.dot(&r) as f64).sum::<f64>() / x.nrows() as f64;
    Ok(SaeTrainReport {
        loss_curve,
        final_mse,
        zero_baseline_mse,
    })
}

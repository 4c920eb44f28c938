use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::TensorArchive;
use crate::corpus::Vocab;
use crate::error::{validation, Error, Result};

const LN_EPS: f32 = 1e-5;
const PER_BLOCK: usize = 12;

const LN1_G: usize = 0;
const LN1_B: usize = 1;
const QKV: usize = 2;
const QKV_B: usize = 3;
const PROJ: usize = 4;
const PROJ_B: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const FC: usize = 8;
const FC_B: usize = 9;
const OUT: usize = 10;
const OUT_B: usize = 11;

const BLOCK_NAMES: [&str; PER_BLOCK] = [
    "ln1.g", "ln1.b", "attn.qkv", "attn.qkv_b", "attn.proj", "attn.proj_b", "ln2.g", "ln2.b",
    "mlp.fc", "mlp.fc_b", "mlp.out", "mlp.out_b",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            context_len: 64,
            seed: 0,
        }
    }
}

impl ToyLmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 {
            return Err(validation("vocab_size must cover the special tokens"));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(validation(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 {
            return Err(validation("n_layers must be at least 1"));
        }
        if self.context_len < 2 {
            return Err(validation("context_len must be at least 2"));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// All trainable tensors, vectors stored as `[1, n]`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Params {
    pub(crate) t: Vec<Array2<f32>>,
}

impl Params {
    fn blk(layer: usize, off: usize) -> usize {
        2 + layer * PER_BLOCK + off
    }

    fn fin(n_layers: usize, off: usize) -> usize {
        2 + n_layers * PER_BLOCK + off
    }

    fn shapes(c: &ToyLmConfig) -> Vec<(String, [usize; 2])> {
        let d = c.d_model;
        let mut out = vec![
            ("wte".to_owned(), [c.vocab_size, d]),
            ("wpe".to_owned(), [c.context_len, d]),
        ];
        for l in 0..c.n_layers {
            let shapes = [
                [1, d],
                [1, d],
                [d, 3 * d],
                [1, 3 * d],
                [d, d],
                [1, d],
                [1, d],
                [1, d],
                [d, 4 * d],
                [1, 4 * d],
                [4 * d, d],
                [1, d],
            ];
            for (name, shape) in BLOCK_NAMES.iter().zip(shapes) {
                out.push((format!("h{l}.{name}"), shape));
            }
        }
        out.push(("lnf.g".to_owned(), [1, d]));
        out.push(("lnf.b".to_owned(), [1, d]));
        out.push(("unembed".to_owned(), [d, c.vocab_size]));
        out.push(("unembed_b".to_owned(), [1, c.vocab_size]));
        out
    }

    pub(crate) fn zeros(c: &ToyLmConfig) -> Self {
        Self {
            t: Self::shapes(c)
                .into_iter()
                .map(|(_, s)| Array2::zeros(s))
                .collect(),
        }
    }

    fn init(c: &ToyLmConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let std = Normal::new(0.0f32, 0.02).unwrap();
        let resid_std = Normal::new(0.0f32, 0.02 / (2.0 * c.n_layers as f32).sqrt()).unwrap();
        let mut p = Self::zeros(c);
        for (i, (name, _)) in Self::shapes(c).iter().enumerate() {
            let t = &mut p.t[i];
            if name.ends_with(".g") {
                t.fill(1.0);
            } else if name.ends_with("proj") || name.ends_with("mlp.out") {
                t.mapv_inplace(|_| resid_std.sample(&mut rng));
            } else if !name.ends_with("_b") && !name.ends_with(".b") {
                t.mapv_inplace(|_| std.sample(&mut rng));
            }
        }
        p
    }

    pub(crate) fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f32]> {
        self.t.iter_mut().map(|a| a.as_slice_mut().expect("contiguous"))
    }

    pub(crate) fn slices(&self) -> impl Iterator<Item = &[f32]> {
        self.t.iter().map(|a| a.as_slice().expect("contiguous"))
    }

    fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.t[i].row(0)
    }
}

/// Packed batch of token sequences.
#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
    pub seqs: Vec<Range<usize>>,
}

impl Batch {
    pub fn new(seqs: &[&[u32]]) -> Self {
        let mut b = Batch {
            tokens: Vec::new(),
            positions: Vec::new(),
            seqs: Vec::new(),
        };
        for s in seqs {
            let start = b.tokens.len();
            b.tokens.extend_from_slice(s);
            b.positions.extend(0..s.len());
            b.seqs.push(start..b.tokens.len());
        }
        b
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Residual-stream rewrite applied to one layer's output.
pub trait LayerHook {
    fn layer(&self) -> usize;
    fn apply(&mut self, batch: &Batch, resid: ArrayViewMut2<f32>) -> Result<()>;
}

struct LnCache {
    xhat: Array2<f32>,
    rstd: Array1<f32>,
}

struct LayerCache {
    ln1: LnCache,
    h1: Array2<f32>,
    qkv: Array2<f32>,
    probs: Vec<Array2<f32>>,
    att: Array2<f32>,
    ln2: LnCache,
    h2: Array2<f32>,
    f: Array2<f32>,
    u: Array2<f32>,
}

pub struct ForwardPass {
    pub batch: Batch,
    /// Output of each layer, after any hook.
    pub resid: Vec<Array2<f32>>,
    pub logits: Array2<f32>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    hf: Array2<f32>,
}

fn layer_norm(x: ArrayView2<f32>, g: ArrayView1<f32>, b: ArrayView1<f32>) -> (Array2<f32>, LnCache) {
    let n = x.nrows();
    let d = x.ncols() as f32;
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut rstd = Array1::zeros(n);
    for (i, row) in x.outer_iter().enumerate() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        xhat.row_mut(i).assign(&row.mapv(|v| (v - mean) * r));
    }
    let y = &xhat * &g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: ArrayView2<f32>,
    cache: &LnCache,
    g: ArrayView1<f32>,
    dg: &mut Array2<f32>,
    db: &mut Array2<f32>,
) -> Array2<f32> {
    let d = dy.ncols() as f32;
    dg.row_mut(0).scaled_add(1.0, &(&dy * &cache.xhat).sum_axis(Axis(0)));
    db.row_mut(0).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    let dxhat = &dy * &g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let m1 = dh.sum() / d;
        let m2 = dh.dot(&xh) / d;
        let r = cache.rstd[i];
        dx.row_mut(i)
            .assign(&ndarray::Zip::from(&dh).and(&xh).map_collect(|&a, &b| r * (a - m1 - b * m2)));
    }
    dx
}

const GELU_C: f32 = 0.797_884_6;

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn linear(x: ArrayView2<f32>, w: &Array2<f32>, b: ArrayView1<f32>) -> Array2<f32> {
    x.dot(w) + b
}

fn accumulate_linear(
    x: ArrayView2<f32>,
    dy: ArrayView2<f32>,
    dw: &mut Array2<f32>,
    db: &mut Array2<f32>,
) {
    ndarray::linalg::general_mat_mul(1.0, &x.t(), &dy, 1.0, dw);
    db.row_mut(0).scaled_add(1.0, &dy.sum_axis(Axis(0)));
}

/// Decoder-only transformer with learned positions and an untied unembedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm {
    pub config: ToyLmConfig,
    pub vocab: Vocab,
    pub(crate) params: Params,
}

impl ToyLm {
    pub fn new(config: ToyLmConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(validation(format!(
                "vocab has {} tokens, config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let params = Params::init(&config);
        Ok(Self {
            config,
            vocab,
            params,
        })
    }

    /// Model whose logits are identically zero.
    pub fn uniform(config: ToyLmConfig, vocab: Vocab) -> Result<Self> {
        let mut m = Self::new(config, vocab)?;
        let n = m.config.n_layers;
        m.params.t[Params::fin(n, 2)].fill(0.0);
        m.params.t[Params::fin(n, 3)].fill(0.0);
        Ok(m)
    }

    pub fn n_params(&self) -> usize {
        self.params.t.iter().map(|t| t.len()).sum()
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).unwrap_or_default());
        for t in self.params.slices() {
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        format!("lm-{}", &hex::encode(h.finalize())[..16])
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        for r in &batch.seqs {
            if r.len() > self.config.context_len {
                return Err(validation(format!(
                    "sequence of {} tokens exceeds context_len {}",
                    r.len(),
                    self.config.context_len
                )));
            }
        }
        if let Some(&t) = batch.tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(validation(format!("token id {t} outside vocabulary")));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Batch) -> Result<ForwardPass> {
        self.forward_hooked(batch, None)
    }

    pub fn forward_hooked(&self, batch: &Batch, mut hook: Option<&mut dyn LayerHook>) -> Result<ForwardPass> {
        self.check_batch(batch)?;
        let c = &self.config;
        let p = &self.params;
        if let Some(h) = hook.as_deref() {
            if h.layer() >= c.n_layers {
                return Err(validation(format!(
                    "hook layer {} out of range for {} layers",
                    h.layer(),
                    c.n_layers
                )));
            }
        }
        let (d, hd) = (c.d_model, c.head_dim());
        let n = batch.len();
        let mut x = Array2::zeros((n, d));
        for i in 0..n {
            let mut row = x.row_mut(i);
            row.assign(&p.t[0].row(batch.tokens[i] as usize));
            row += &p.t[1].row(batch.positions[i]);
        }
        let scale = 1.0 / (hd as f32).sqrt();
        let mut layers = Vec::with_capacity(c.n_layers);
        let mut resid = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let w = |off| Params::blk(l, off);
            let (h1, ln1) = layer_norm(x.view(), p.row(w(LN1_G)), p.row(w(LN1_B)));
            let qkv = linear(h1.view(), &p.t[w(QKV)], p.row(w(QKV_B)));
            let mut att = Array2::zeros((n, d));
            let mut probs = Vec::with_capacity(batch.seqs.len() * c.n_heads);
            for r in &batch.seqs {
                let len = r.len();
                for h in 0..c.n_heads {
                    let q = qkv.slice(s![r.clone(), h * hd..(h + 1) * hd]);
                    let k = qkv.slice(s![r.clone(), d + h * hd..d + (h + 1) * hd]);
                    let v = qkv.slice(s![r.clone(), 2 * d + h * hd..2 * d + (h + 1) * hd]);
                    let mut sc = q.dot(&k.t()) * scale;
                    for i in 0..len {
                        let mut row = sc.row_mut(i);
                        let max = row.slice(s![..=i]).fold(f32::NEG_INFINITY, |a, &b| a.max(b));
                        let mut sum = 0.0;
                        for j in 0..len {
                            if j <= i {
                                let e = (row[j] - max).exp();
                                row[j] = e;
                                sum += e;
                            } else {
                                row[j] = 0.0;
                            }
                        }
                        row.mapv_inplace(|e| e / sum);
                    }
                    att.slice_mut(s![r.clone(), h * hd..(h + 1) * hd]).assign(&sc.dot(&v));
                    probs.push(sc);
                }
            }
            x += &linear(att.view(), &p.t[w(PROJ)], p.row(w(PROJ_B)));
            let (h2, ln2) = layer_norm(x.view(), p.row(w(LN2_G)), p.row(w(LN2_B)));
            let f = linear(h2.view(), &p.t[w(FC)], p.row(w(FC_B)));
            let u = f.mapv(gelu);
            x += &linear(u.view(), &p.t[w(OUT)], p.row(w(OUT_B)));
            if let Some(h) = hook.as_deref_mut() {
                if h.layer() == l {
                    h.apply(batch, x.view_mut())?;
                }
            }
            resid.push(x.clone());
            layers.push(LayerCache {
                ln1,
                h1,
                qkv,
                probs,
                att,
                ln2,
                h2,
                f,
                u,
            });
        }
        let nl = c.n_layers;
        let (hf, lnf) = layer_norm(x.view(), p.row(Params::fin(nl, 0)), p.row(Params::fin(nl, 1)));
        let logits = linear(hf.view(), &p.t[Params::fin(nl, 2)], p.row(Params::fin(nl, 3)));
        Ok(ForwardPass {
            batch: batch.clone(),
            resid,
            logits,
            layers,
            lnf,
            hf,
        })
    }

    /// Mean next-token cross-entropy over rows with a target, and its
    /// gradient with respect to the logits.
    pub(crate) fn loss_and_dlogits(logits: &Array2<f32>, targets: &[Option<u32>]) -> (f64, Array2<f32>, usize) {
        let count = targets.iter().filter(|t| t.is_some()).count();
        let mut dl = Array2::zeros(logits.raw_dim());
        if count == 0 {
            return (0.0, dl, 0);
        }
        let mut loss = 0.0f64;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = logits.row(i);
            let max = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += (lse - row[t as usize]) as f64;
            let mut drow = dl.row_mut(i);
            for (j, v) in row.iter().enumerate() {
                drow[j] = (v - lse).exp() / count as f32;
            }
            drow[t as usize] -= 1.0 / count as f32;
        }
        (loss / count as f64, dl, count)
    }

    pub(crate) fn backward(&self, fp: &ForwardPass, dlogits: &Array2<f32>) -> Params {
        let c = &self.config;
        let p = &self.params;
        let nl = c.n_layers;
        let (d, hd) = (c.d_model, c.head_dim());
        let scale = 1.0 / (hd as f32).sqrt();
        let mut g = Params::zeros(c);
        let batch = &fp.batch;

        {
            let (a, b) = split_two(&mut g.t, Params::fin(nl, 2), Params::fin(nl, 3));
            accumulate_linear(fp.hf.view(), dlogits.view(), a, b);
        }
        let dhf = dlogits.dot(&p.t[Params::fin(nl, 2)].t());
        let mut dx = {
            let (dg, db) = split_two(&mut g.t, Params::fin(nl, 0), Params::fin(nl, 1));
            layer_norm_backward(dhf.view(), &fp.lnf, p.row(Params::fin(nl, 0)), dg, db)
        };

        for l in (0..nl).rev() {
            let w = |off| Params::blk(l, off);
            let lc = &fp.layers[l];

            {
                let (a, b) = split_two(&mut g.t, w(OUT), w(OUT_B));
                accumulate_linear(lc.u.view(), dx.view(), a, b);
            }
            let du = dx.dot(&p.t[w(OUT)].t());
            let df = ndarray::Zip::from(&du).and(&lc.f).map_collect(|&a, &f| a * gelu_grad(f));
            {
                let (a, b) = split_two(&mut g.t, w(FC), w(FC_B));
                accumulate_linear(lc.h2.view(), df.view(), a, b);
            }
            let dh2 = df.dot(&p.t[w(FC)].t());
            {
                let (dg, db) = split_two(&mut g.t, w(LN2_G), w(LN2_B));
                dx += &layer_norm_backward(dh2.view(), &lc.ln2, p.row(w(LN2_G)), dg, db);
            }

            {
                let (a, b) = split_two(&mut g.t, w(PROJ), w(PROJ_B));
                accumulate_linear(lc.att.view(), dx.view(), a, b);
            }
            let datt = dx.dot(&p.t[w(PROJ)].t());
            let mut dqkv = Array2::zeros((batch.len(), 3 * d));
            let mut pi = 0;
            for r in &batch.seqs {
                for h in 0..c.n_heads {
                    let pr = &lc.probs[pi];
                    pi += 1;
                    let q = lc.qkv.slice(s![r.clone(), h * hd..(h + 1) * hd]);
                    let k = lc.qkv.slice(s![r.clone(), d + h * hd..d + (h + 1) * hd]);
                    let v = lc.qkv.slice(s![r.clone(), 2 * d + h * hd..2 * d + (h + 1) * hd]);
                    let dout = datt.slice(s![r.clone(), h * hd..(h + 1) * hd]);
                    let dp = dout.dot(&v.t());
                    let dv = pr.t().dot(&dout);
                    let mut ds = &dp * pr;
                    for (i, mut row) in ds.outer_iter_mut().enumerate() {
                        let dot: f32 = row.sum();
                        let prow = pr.row(i);
                        row.zip_mut_with(&prow, |x, &pv| *x -= pv * dot);
                    }
                    ds *= scale;
                    let dq = ds.dot(&k);
                    let dk = ds.t().dot(&q);
                    dqkv.slice_mut(s![r.clone(), h * hd..(h + 1) * hd]).assign(&dq);
                    dqkv.slice_mut(s![r.clone(), d + h * hd..d + (h + 1) * hd]).assign(&dk);
                    dqkv.slice_mut(s![r.clone(), 2 * d + h * hd..2 * d + (h + 1) * hd]).assign(&dv);
                }
            }
            {
                let (a, b) = split_two(&mut g.t, w(QKV), w(QKV_B));
                accumulate_linear(lc.h1.view(), dqkv.view(), a, b);
            }
            let dh1 = dqkv.dot(&p.t[w(QKV)].t());
            {
                let (dg, db) = split_two(&mut g.t, w(LN1_G), w(LN1_B));
                dx += &layer_norm_backward(dh1.view(), &lc.ln1, p.row(w(LN1_G)), dg, db);
            }
        }

        for i in 0..batch.len() {
            g.t[0].row_mut(batch.tokens[i] as usize).scaled_add(1.0, &dx.row(i));
            g.t[1].row_mut(batch.positions[i]).scaled_add(1.0, &dx.row(i));
        }
        g
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        for ((name, _), t) in Params::shapes(&self.config).iter().zip(&self.params.t) {
            a.insert_matrix(name, t)?;
        }
        a.set_meta("config", &self.config)?;
        a.set_meta("vocab", &self.vocab)?;
        a.set_meta("model_id", self.fingerprint())?;
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let config: ToyLmConfig = a.meta("config")?;
        config.validate()?;
        let vocab: Vocab = a.meta("vocab")?;
        let mut params = Params::zeros(&config);
        for (i, (name, shape)) in Params::shapes(&config).iter().enumerate() {
            let m = a.matrix(name)?;
            if m.dim() != (shape[0], shape[1]) {
                return Err(Error::Archive(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    m.dim()
                )));
            }
            params.t[i] = m;
        }
        let model = Self {
            config,
            vocab,
            params,
        };
        if model.vocab.len() != model.config.vocab_size {
            return Err(Error::Archive("vocabulary size does not match config".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path)?)
    }
}

fn split_two(t: &mut [Array2<f32>], a: usize, b: usize) -> (&mut Array2<f32>, &mut Array2<f32>) {
    debug_assert!(a < b);
    let (lo, hi) = t.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ToyLm {
        let vocab = Vocab::build(["a b c d e f g"], 64).unwrap();
        let config = ToyLmConfig {
            vocab_size: vocab.len(),
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            context_len: 8,
            seed: 3,
        };
        let mut m = ToyLm::new(config, vocab).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = Normal::new(0.0f32, 0.3).unwrap();
        for t in m.params.t.iter_mut() {
            t.mapv_inplace(|v| v + n.sample(&mut rng));
        }
        m
    }

    fn loss(m: &ToyLm, batch: &Batch, targets: &[Option<u32>]) -> f64 {
        let fp = m.forward(batch).unwrap();
        ToyLm::loss_and_dlogits(&fp.logits, targets).0
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = tiny();
        let batch = Batch::new(&[&[1, 4, 5, 6, 7], &[1, 8, 9]]);
        let targets = [Some(4), Some(5), Some(6), Some(7), None, Some(8), Some(9), None];
        let fp = m.forward(&batch).unwrap();
        let (_, dl, _) = ToyLm::loss_and_dlogits(&fp.logits, &targets);
        let grads = m.backward(&fp, &dl);
        let eps = 1e-2f32;
        let mut worst = 0.0f64;
        for ti in 0..m.params.t.len() {
            let len = m.params.t[ti].len();
            for j in (0..len).step_by(len / 3 + 1) {
                let orig = m.params.t[ti].as_slice().unwrap()[j];
                m.params.t[ti].as_slice_mut().unwrap()[j] = orig + eps;
                let up = loss(&m, &batch, &targets);
                m.params.t[ti].as_slice_mut().unwrap()[j] = orig - eps;
                let down = loss(&m, &batch, &targets);
                m.params.t[ti].as_slice_mut().unwrap()[j] = orig;
                let numeric = (up - down) / (2.0 * eps as f64);
                let analytic = grads.t[ti].as_slice().unwrap()[j] as f64;
                let err = (numeric - analytic).abs() / (numeric.abs().max(analytic.abs()).max(1e-2));
                worst = worst.max(err);
            }
        }
        assert!(worst < 2e-2, "worst relative gradient error {worst}");
    }

    #[test]
    fn causal_prefix_is_unaffected_by_later_tokens() {
        let m = tiny();
        let a = m.forward(&Batch::new(&[&[1, 4, 5, 6]])).unwrap();
        let b = m.forward(&Batch::new(&[&[1, 4, 5, 9]])).unwrap();
        for i in 0..3 {
            assert_eq!(a.logits.row(i), b.logits.row(i));
        }
        assert_ne!(a.logits.row(3), b.logits.row(3));
    }

    #[test]
    fn packed_batch_matches_separate_runs() {
        let m = tiny();
        let packed = m.forward(&Batch::new(&[&[1, 4, 5], &[1, 6]])).unwrap();
        let first = m.forward(&Batch::new(&[&[1, 4, 5]])).unwrap();
        let second = m.forward(&Batch::new(&[&[1, 6]])).unwrap();
        for i in 0..3 {
            assert_eq!(packed.logits.row(i), first.logits.row(i));
        }
        for i in 0..2 {
            assert_eq!(packed.logits.row(3 + i), second.logits.row(i));
        }
    }

    #[test]
    fn too_long_sequence_rejected() {
        let m = tiny();
        assert!(matches!(
            m.forward(&Batch::new(&[&[1; 9]])),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn archive_round_trip() {
        let m = tiny();
        let back = ToyLm::from_archive(&ToyLm::from_archive(&m.to_archive().unwrap()).unwrap().to_archive().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.fingerprint(), m.fingerprint());
    }

    #[test]
    fn config_validation() {
        let c = ToyLmConfig {
            n_heads: 3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ToyLmConfig {
            context_len: 1,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}

//! Sparse-autoencoder data model and forward mechanics.
//!
//! An SAE maps a dense latent `x` (length `d_latent`) to preactivations
//! `gamma = x . E + b_enc` (length `d_hidden`), keeps a sparse subset of the
//! positive entries, and decodes back with `x' = act . D + b_dec`.

use std::cmp::Ordering;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::TensorArchive;
use crate::error::{shape_err, validation, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    /// ReLU followed by keeping the `k` largest positive entries.
    ReluTopk,
    Relu,
}

impl ActivationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActivationKind::ReluTopk => "relu_topk",
            ActivationKind::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu_topk" | "topk" => Ok(ActivationKind::ReluTopk),
            "relu" => Ok(ActivationKind::Relu),
            "jumprelu" | "jump_relu" => Err(Error::Unsupported(
                "JumpReLU SAEs cannot be loaded; only relu and relu_topk are implemented".into(),
            )),
            other => Err(validation(format!("unknown activation kind {other:?}"))),
        }
    }
}

/// Selecting nonlinearity. Negatives are zeroed before the top-k cut, so
/// stored activation values are always strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActivationSpec {
    pub kind: ActivationKind,
    /// Only meaningful for `relu_topk`.
    #[serde(default)]
    pub k: usize,
}

impl ActivationSpec {
    pub fn top_k(k: usize) -> Self {
        Self {
            kind: ActivationKind::ReluTopk,
            k,
        }
    }

    pub fn relu() -> Self {
        Self {
            kind: ActivationKind::Relu,
            k: 0,
        }
    }

    pub fn validate(&self, d_hidden: usize) -> Result<()> {
        if self.kind == ActivationKind::ReluTopk && (self.k == 0 || self.k > d_hidden) {
            return Err(validation(format!(
                "top-k activation needs 1 <= k <= d_hidden ({d_hidden}), got k = {}",
                self.k
            )));
        }
        Ok(())
    }
}

/// Post-activation SAE code: sorted neuron ids with strictly positive values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseActivation {
    indices: Vec<u32>,
    values: Vec<f32>,
    d_hidden: usize,
}

impl SparseActivation {
    pub fn new(indices: Vec<u32>, values: Vec<f32>, d_hidden: usize) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(shape_err(format!(
                "{} indices but {} values",
                indices.len(),
                values.len()
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(validation("activation indices must be strictly increasing"));
        }
        if let Some(&last) = indices.last() {
            if last as usize >= d_hidden {
                return Err(shape_err(format!(
                    "neuron index {last} out of range for d_hidden = {d_hidden}"
                )));
            }
        }
        if values.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(validation("activation values must be finite and positive"));
        }
        Ok(Self {
            indices,
            values,
            d_hidden,
        })
    }

    pub(crate) fn from_parts_unchecked(indices: Vec<u32>, values: Vec<f32>, d_hidden: usize) -> Self {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(values.iter().all(|&v| v > 0.0));
        Self {
            indices,
            values,
            d_hidden,
        }
    }

    pub fn empty(d_hidden: usize) -> Self {
        Self {
            indices: Vec::new(),
            values: Vec::new(),
            d_hidden,
        }
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn d_hidden(&self) -> usize {
        self.d_hidden
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f32)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn get(&self, neuron: u32) -> Option<f32> {
        self.indices
            .binary_search(&neuron)
            .ok()
            .map(|pos| self.values[pos])
    }

    pub fn contains(&self, neuron: u32) -> bool {
        self.indices.binary_search(&neuron).is_ok()
    }

    pub fn to_dense(&self) -> Array1<f32> {
        let mut out = Array1::zeros(self.d_hidden);
        for (i, v) in self.iter() {
            out[i as usize] = v;
        }
        out
    }
}

/// Indices of the (at most `k`) best candidates, returned in ascending order.
///
/// A candidate is any index whose `primary` key is strictly positive. Ranking
/// is by `primary` descending, then `secondary` descending, then index
/// ascending.
pub(crate) fn select_top<P, S>(len: usize, k: usize, primary: P, secondary: S) -> Vec<u32>
where
    P: Fn(usize) -> f64,
    S: Fn(usize) -> f64,
{
    let mut cand: Vec<(f64, f64, u32)> = (0..len)
        .filter_map(|i| {
            let p = primary(i);
            (p > 0.0).then(|| (p, secondary(i), i as u32))
        })
        .collect();
    let order = |a: &(f64, f64, u32), b: &(f64, f64, u32)| -> Ordering {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal))
            .then_with(|| a.2.cmp(&b.2))
    };
    if k == 0 {
        return Vec::new();
    }
    if cand.len() > k {
        cand.select_nth_unstable_by(k - 1, order);
        cand.truncate(k);
    }
    let mut idx: Vec<u32> = cand.into_iter().map(|c| c.2).collect();
    idx.sort_unstable();
    idx
}

/// Apply the selecting nonlinearity to a preactivation vector.
pub fn activate(gamma: ArrayView1<f32>, spec: &ActivationSpec) -> SparseActivation {
    let d_hidden = gamma.len();
    let indices = match spec.kind {
        ActivationKind::Relu => (0..d_hidden as u32)
            .filter(|&i| gamma[i as usize] > 0.0)
            .collect(),
        ActivationKind::ReluTopk => {
            select_top(d_hidden, spec.k, |i| gamma[i] as f64, |_| 0.0)
        }
    };
    let values = indices.iter().map(|&i| gamma[i as usize]).collect();
    SparseActivation::from_parts_unchecked(indices, values, d_hidden)
}

/// Euclidean norm of `x - x_prime`.
pub fn reconstruction_error(x: ArrayView1<f32>, x_prime: ArrayView1<f32>) -> Result<f64> {
    if x.len() != x_prime.len() {
        return Err(shape_err(format!(
            "length mismatch: {} vs {}",
            x.len(),
            x_prime.len()
        )));
    }
    Ok(x.iter()
        .zip(x_prime.iter())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

/// The three stages of one SAE pass over a token latent.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeForward {
    pub gamma: Array1<f32>,
    pub act: SparseActivation,
    pub recon: Array1<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    pub id: String,
    /// `[d_latent, d_hidden]`
    pub encoder: Array2<f32>,
    /// `[d_hidden, d_latent]`
    pub decoder: Array2<f32>,
    pub encoder_bias: Array1<f32>,
    pub decoder_bias: Array1<f32>,
    pub activation: ActivationSpec,
    pub layer_id: usize,
    /// Fingerprint of the model whose activations this SAE was trained on.
    pub source_model: Option<String>,
}

impl SaeModel {
    /// Build an SAE with zero biases. The id is derived from the weights.
    pub fn new(
        encoder: Array2<f32>,
        decoder: Array2<f32>,
        activation: ActivationSpec,
        layer_id: usize,
    ) -> Result<Self> {
        let (d_latent, d_hidden) = encoder.dim();
        let mut sae = Self {
            id: String::new(),
            encoder,
            decoder,
            encoder_bias: Array1::zeros(d_hidden),
            decoder_bias: Array1::zeros(d_latent),
            activation,
            layer_id,
            source_model: None,
        };
        sae.validate()?;
        sae.id = sae.fingerprint();
        Ok(sae)
    }

    pub fn d_latent(&self) -> usize {
        self.encoder.nrows()
    }

    pub fn d_hidden(&self) -> usize {
        self.encoder.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d_latent, d_hidden) = self.encoder.dim();
        if d_latent == 0 || d_hidden <= d_latent {
            return Err(validation(format!(
                "SAE must be overcomplete: d_hidden ({d_hidden}) > d_latent ({d_latent}) > 0"
            )));
        }
        if self.decoder.dim() != (d_hidden, d_latent) {
            return Err(shape_err(format!(
                "decoder is {:?}, expected ({d_hidden}, {d_latent})",
                self.decoder.dim()
            )));
        }
        if self.encoder_bias.len() != d_hidden || self.decoder_bias.len() != d_latent {
            return Err(shape_err("bias lengths disagree with d_hidden/d_latent"));
        }
        self.activation.validate(d_hidden)
    }

    /// Content hash over weights, activation and layer.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for m in [&self.encoder, &self.decoder] {
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        }
        for b in [&self.encoder_bias, &self.decoder_bias] {
            for v in b.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.update(self.activation.kind.as_str());
        h.update((self.activation.k as u64).to_le_bytes());
        h.update((self.layer_id as u64).to_le_bytes());
        format!("sae-{}", &hex::encode(h.finalize())[..16])
    }

    pub fn encode(&self, x: ArrayView1<f32>) -> Result<Array1<f32>> {
        if x.len() != self.d_latent() {
            return Err(shape_err(format!(
                "input has length {}, SAE expects d_latent = {}",
                x.len(),
                self.d_latent()
            )));
        }
        Ok(x.dot(&self.encoder) + &self.encoder_bias)
    }

    /// Row-wise `encode` for a `[n, d_latent]` batch.
    pub fn encode_batch(&self, xs: ArrayView2<f32>) -> Result<Array2<f32>> {
        if xs.ncols() != self.d_latent() {
            return Err(shape_err(format!(
                "batch has {} columns, SAE expects d_latent = {}",
                xs.ncols(),
                self.d_latent()
            )));
        }
        Ok(xs.dot(&self.encoder) + &self.encoder_bias)
    }

    pub fn activate(&self, gamma: ArrayView1<f32>) -> Result<SparseActivation> {
        if gamma.len() != self.d_hidden() {
            return Err(shape_err(format!(
                "preactivation has length {}, expected d_hidden = {}",
                gamma.len(),
                self.d_hidden()
            )));
        }
        Ok(activate(gamma, &self.activation))
    }

    /// Sparse decode: only the rows of `D` named by `act` are touched.
    pub fn decode(&self, act: &SparseActivation) -> Result<Array1<f32>> {
        if act.d_hidden() != self.d_hidden() {
            return Err(shape_err(format!(
                "activation has d_hidden = {}, SAE has {}",
                act.d_hidden(),
                self.d_hidden()
            )));
        }
        let mut out = self.decoder_bias.clone();
        for (i, v) in act.iter() {
            let row = self
                .decoder
                .row(i as usize);
            out.scaled_add(v, &row);
        }
        Ok(out)
    }

    pub fn forward(&self, x: ArrayView1<f32>) -> Result<SaeForward> {
        let gamma = self.encode(x)?;
        let act = activate(gamma.view(), &self.activation);
        let recon = self.decode(&act)?;
        Ok(SaeForward { gamma, act, recon })
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        a.insert_matrix("encoder", &self.encoder)?;
        a.insert_matrix("decoder", &self.decoder)?;
        a.insert_vector("encoder_bias", &self.encoder_bias)?;
        a.insert_vector("decoder_bias", &self.decoder_bias)?;
        a.set_meta("d_latent", self.d_latent())?;
        a.set_meta("d_hidden", self.d_hidden())?;
        a.set_meta("activation_kind", self.activation.kind.as_str())?;
        a.set_meta("k", self.activation.k)?;
        a.set_meta("layer_id", self.layer_id)?;
        a.set_meta("sae_id", &self.id)?;
        a.set_meta("source_model", &self.source_model)?;
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let kind = ActivationKind::parse(&a.meta::<String>("activation_kind")?)?;
        let k: usize = a.meta_opt("k")?.unwrap_or(0);
        let encoder = a.matrix("encoder")?;
        let decoder = a.matrix("decoder")?;
        let d_latent: usize = a.meta("d_latent")?;
        let d_hidden: usize = a.meta("d_hidden")?;
        if encoder.dim() != (d_latent, d_hidden) {
            return Err(shape_err(format!(
                "encoder is {:?} but metadata says ({d_latent}, {d_hidden})",
                encoder.dim()
            )));
        }
        let encoder_bias = if a.contains("encoder_bias") {
            a.vector("encoder_bias")?
        } else {
            Array1::zeros(d_hidden)
        };
        let decoder_bias = if a.contains("decoder_bias") {
            a.vector("decoder_bias")?
        } else {
            Array1::zeros(d_latent)
        };
        let mut sae = Self {
            id: String::new(),
            encoder,
            decoder,
            encoder_bias,
            decoder_bias,
            activation: ActivationSpec { kind, k },
            layer_id: a.meta("layer_id")?,
            source_model: a.meta_opt("source_model")?,
        };
        sae.validate()?;
        sae.id = match a.meta_opt::<String>("sae_id")? {
            Some(id) => id,
            None => sae.fingerprint(),
        };
        Ok(sae)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sae(d_latent: usize, d_hidden: usize, spec: ActivationSpec, seed: u64) -> SaeModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Array2::from_shape_fn((d_latent, d_hidden), |_| rng.random_range(-1.0..1.0));
        let dec = Array2::from_shape_fn((d_hidden, d_latent), |_| rng.random_range(-1.0..1.0));
        SaeModel::new(enc, dec, spec, 0).unwrap()
    }

    fn naive_matmul(x: &[f32], e: &Array2<f32>) -> Vec<f64> {
        let (rows, cols) = e.dim();
        let mut out = vec![0.0f64; cols];
        for j in 0..cols {
            for i in 0..rows {
                out[j] += x[i] as f64 * e[[i, j]] as f64;
            }
        }
        out
    }

    /// Exhaustive: best subset of positive entries with size <= k by sum.
    fn brute_force_topk(gamma: &[f32], k: usize) -> Vec<u32> {
        let n = gamma.len();
        let mut best: (f64, Vec<u32>) = (-1.0, vec![]);
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize > k {
                continue;
            }
            let members: Vec<u32> = (0..n as u32).filter(|i| mask >> i & 1 == 1).collect();
            if members.iter().any(|&i| gamma[i as usize] <= 0.0) {
                continue;
            }
            let sum: f64 = members.iter().map(|&i| gamma[i as usize] as f64).sum();
            if sum > best.0 {
                best = (sum, members);
            }
        }
        best.1
    }

    #[test]
    fn encode_zero_is_zero() {
        let sae = random_sae(4, 8, ActivationSpec::top_k(2), 1);
        let g = sae.encode(Array1::zeros(4).view()).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_identity_padded() {
        let enc = array![[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let dec = Array2::zeros((3, 2));
        let sae = SaeModel::new(enc, dec, ActivationSpec::relu(), 0).unwrap();
        let g = sae.encode(array![3.0f32, -1.0].view()).unwrap();
        assert_eq!(g, array![3.0f32, -1.0, 0.0]);
    }

    #[test]
    fn encode_matches_naive_matmul() {
        let sae = random_sae(4, 8, ActivationSpec::top_k(3), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let x: Vec<f32> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g = sae.encode(ArrayView1::from(&x)).unwrap();
            let oracle = naive_matmul(&x, &sae.encoder);
            for (a, b) in g.iter().zip(&oracle) {
                assert!((*a as f64 - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn encode_rejects_wrong_length() {
        let sae = random_sae(4, 8, ActivationSpec::top_k(3), 7);
        assert!(matches!(
            sae.encode(Array1::zeros(5).view()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn activate_examples() {
        let act = activate(array![5.0f32, -2.0, 3.0, 1.0].view(), &ActivationSpec::top_k(2));
        assert_eq!(act.indices(), &[0, 2]);
        assert_eq!(act.values(), &[5.0, 3.0]);

        let act = activate(array![-1.0f32, -2.0, -0.5].view(), &ActivationSpec::top_k(2));
        assert!(act.is_empty());
        let act = activate(array![-1.0f32, -2.0, -0.5].view(), &ActivationSpec::relu());
        assert!(act.is_empty());
    }

    #[test]
    fn activate_ties_prefer_lower_index() {
        let act = activate(array![1.0f32, 2.0, 2.0, 2.0].view(), &ActivationSpec::top_k(2));
        assert_eq!(act.indices(), &[1, 2]);
    }

    #[test]
    fn activate_matches_exhaustive_subsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let gamma: Vec<f32> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let act = activate(ArrayView1::from(&gamma), &ActivationSpec::top_k(4));
            assert_eq!(act.indices(), brute_force_topk(&gamma, 4).as_slice());
        }
    }

    #[test]
    fn decode_examples() {
        let sae = random_sae(4, 8, ActivationSpec::top_k(2), 5);
        let out = sae.decode(&SparseActivation::empty(8)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));

        let act = SparseActivation::new(vec![3], vec![2.5], 8).unwrap();
        let out = sae.decode(&act).unwrap();
        assert_eq!(out, sae.decoder.row(3).mapv(|v| 2.5 * v));

        let bad = SparseActivation::new(vec![3], vec![2.5], 9).unwrap();
        assert!(sae.decode(&bad).is_err());
    }

    #[test]
    fn sparse_decode_matches_dense() {
        let sae = random_sae(6, 24, ActivationSpec::top_k(5), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let x: Array1<f32> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = sae.forward(x.view()).unwrap();
            let dense = f.act.to_dense().dot(&sae.decoder) + &sae.decoder_bias;
            for (a, b) in f.recon.iter().zip(dense.iter()) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn reconstruction_error_examples() {
        let x = array![3.0f32, 4.0];
        assert_eq!(reconstruction_error(x.view(), x.view()).unwrap(), 0.0);
        assert_eq!(
            reconstruction_error(x.view(), array![0.0f32, 0.0].view()).unwrap(),
            5.0
        );
        assert!(reconstruction_error(x.view(), array![0.0f32].view()).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut sq = 0.0f64;
        for i in 0..16 {
            sq += (a[i] as f64 - b[i] as f64).powi(2);
        }
        let got = reconstruction_error(ArrayView1::from(&a), ArrayView1::from(&b)).unwrap();
        assert!((got - sq.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn forward_composes_stages() {
        let sae = random_sae(4, 8, ActivationSpec::top_k(3), 21);
        let zero = sae.forward(Array1::zeros(4).view()).unwrap();
        assert!(zero.recon.iter().all(|&v| v == 0.0));

        let x = array![0.3f32, -0.7, 1.1, 0.2];
        let f = sae.forward(x.view()).unwrap();
        let g = sae.encode(x.view()).unwrap();
        let a = sae.activate(g.view()).unwrap();
        let r = sae.decode(&a).unwrap();
        assert_eq!((f.gamma, f.act, f.recon), (g, a, r));
    }

    #[test]
    fn saturated_topk_equals_relu() {
        let mut topk = random_sae(4, 8, ActivationSpec::top_k(8), 2);
        let x = array![0.5f32, -0.1, 0.9, -1.3];
        let a = topk.forward(x.view()).unwrap();
        topk.activation = ActivationSpec::relu();
        let b = topk.forward(x.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn archive_round_trip_and_jumprelu_rejected() {
        let mut sae = random_sae(4, 8, ActivationSpec::top_k(3), 8);
        sae.encoder_bias[2] = 0.5;
        sae.layer_id = 6;
        let a = sae.to_archive().unwrap();
        let back = SaeModel::from_archive(&TensorArchive::from_bytes(&a.to_bytes().unwrap()).unwrap())
            .unwrap();
        assert_eq!(back, sae);

        let mut a = sae.to_archive().unwrap();
        a.set_meta("activation_kind", "jumprelu").unwrap();
        assert!(matches!(SaeModel::from_archive(&a), Err(Error::Unsupported(_))));
    }

    #[test]
    fn rejects_undercomplete() {
        let enc = Array2::zeros((4, 4));
        let dec = Array2::zeros((4, 4));
        assert!(SaeModel::new(enc, dec, ActivationSpec::relu(), 0).is_err());
    }

    proptest! {
        #[test]
        fn topk_emits_min_k_positive(gamma in prop::collection::vec(-5.0f32..5.0, 1..40), k in 1usize..12) {
            let act = activate(ArrayView1::from(&gamma), &ActivationSpec::top_k(k));
            let positive = gamma.iter().filter(|&&v| v > 0.0).count();
            prop_assert_eq!(act.len(), positive.min(k));
            prop_assert!(act.values().iter().all(|&v| v > 0.0));
            // every unselected positive entry is no larger than every selected one
            let min_sel = act.values().iter().cloned().fold(f32::INFINITY, f32::min);
            for (i, &g) in gamma.iter().enumerate() {
                if g > 0.0 && !act.contains(i as u32) {
                    prop_assert!(g <= min_sel);
                }
            }
        }

        #[test]
        fn forward_is_deterministic(seed in 0u64..1000) {
            let sae = random_sae(5, 12, ActivationSpec::top_k(4), seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let x: Array1<f32> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = sae.forward(x.view()).unwrap();
            let b = sae.forward(x.view()).unwrap();
            prop_assert!(a.recon.iter().zip(b.recon.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}

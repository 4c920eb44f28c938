use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EmbeddingMatrix;
use crate::archive::write_atomic;
use crate::error::{consistency, shape_err, validation, Result};

/// Per-prompt minimum Euclidean distance to an alignment set.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceVector {
    pub align_set_id: String,
    pub prompt_ids: Vec<String>,
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceEntry {
    pub prompt_id: String,
    pub distance: f64,
}

impl DistanceVector {
    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }

    pub fn lookup(&self) -> std::collections::HashMap<&str, f64> {
        self.prompt_ids
            .iter()
            .map(String::as_str)
            .zip(self.distances.iter().copied())
            .collect()
    }

    pub fn entries(&self) -> Vec<DistanceEntry> {
        self.prompt_ids
            .iter()
            .zip(&self.distances)
            .map(|(id, &d)| DistanceEntry {
                prompt_id: id.clone(),
                distance: d,
            })
            .collect()
    }

    pub fn from_entries(align_set_id: impl Into<String>, entries: Vec<DistanceEntry>) -> Result<Self> {
        if entries.iter().any(|e| !(e.distance >= 0.0)) {
            return Err(validation("distances must be nonnegative"));
        }
        let (prompt_ids, distances) = entries.into_iter().map(|e| (e.prompt_id, e.distance)).unzip();
        Ok(Self {
            align_set_id: align_set_id.into(),
            prompt_ids,
            distances,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &serde_json::to_vec_pretty(&self.entries())?)
    }

    pub fn load(path: impl AsRef<Path>, align_set_id: impl Into<String>) -> Result<Self> {
        let entries: Vec<DistanceEntry> = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::from_entries(align_set_id, entries)
    }
}

pub(crate) fn euclidean(a: ndarray::ArrayView1<f32>, b: ndarray::ArrayView1<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn min_distance_row(v: ndarray::ArrayView1<f32>, align: &EmbeddingMatrix) -> f64 {
    align
        .vectors
        .rows()
        .into_iter()
        .map(|a| euclidean(v, a))
        .fold(f64::INFINITY, f64::min)
}

/// For each reference prompt, the minimum Euclidean distance to any
/// alignment prompt.
pub fn min_distance_to_align(
    reference: &EmbeddingMatrix,
    align: &EmbeddingMatrix,
) -> Result<DistanceVector> {
    if align.is_empty() {
        return Err(validation("alignment set is empty"));
    }
    if reference.dim() != align.dim() {
        return Err(shape_err(format!(
            "embedding dimensions differ: reference {} vs align {}",
            reference.dim(),
            align.dim()
        )));
    }
    if reference.provider_id != align.provider_id {
        return Err(consistency(format!(
            "embeddings come from different providers: {:?} vs {:?}",
            reference.provider_id, align.provider_id
        )));
    }
    let distances: Vec<f64> = (0..reference.len())
        .into_par_iter()
        .map(|r| min_distance_row(reference.vectors.row(r), align))
        .collect();
    Ok(DistanceVector {
        align_set_id: align.set_id.clone(),
        prompt_ids: reference.prompt_ids.clone(),
        distances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(id: &str, rows: Array2<f32>) -> EmbeddingMatrix {
        let ids = (0..rows.nrows()).map(|i| format!("{id}{i}")).collect();
        EmbeddingMatrix::new(id, ids, rows, "test").unwrap()
    }

    fn random(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn shared_prompt_has_zero_distance() {
        let r = matrix("r", ndarray::array![[1.0f32, 2.0], [0.0, 0.0]]);
        let a = matrix("a", ndarray::array![[5.0f32, 5.0], [1.0, 2.0]]);
        let d = min_distance_to_align(&r, &a).unwrap();
        assert_eq!(d.distances[0], 0.0);
        assert_eq!(d.align_set_id, "a");
    }

    #[test]
    fn single_align_prompt_is_pairwise() {
        let r = matrix("r", ndarray::array![[3.0f32, 4.0]]);
        let a = matrix("a", ndarray::array![[0.0f32, 0.0]]);
        assert_eq!(min_distance_to_align(&r, &a).unwrap().distances, vec![5.0]);
    }

    #[test]
    fn matches_exhaustive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = matrix("r", random(50, 16, &mut rng));
        let a = matrix("a", random(20, 16, &mut rng));
        let got = min_distance_to_align(&r, &a).unwrap();
        for i in 0..50 {
            let mut best = f64::INFINITY;
            for j in 0..20 {
                let mut s = 0.0f64;
                for k in 0..16 {
                    s += (r.vectors[[i, k]] as f64 - a.vectors[[j, k]] as f64).powi(2);
                }
                best = best.min(s.sqrt());
            }
            assert!((got.distances[i] - best).abs() <= 1e-6 * best.max(1.0));
        }
    }

    #[test]
    fn errors() {
        let r = matrix("r", Array2::zeros((2, 3)));
        let empty = matrix("a", Array2::zeros((0, 3)));
        assert!(min_distance_to_align(&r, &empty).is_err());
        let wrong = matrix("a", Array2::zeros((1, 4)));
        assert!(min_distance_to_align(&r, &wrong).is_err());
    }

    #[test]
    fn json_round_trip() {
        let d = DistanceVector {
            align_set_id: "a".into(),
            prompt_ids: vec!["x".into(), "y".into()],
            distances: vec![0.5, 1.25],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.json");
        d.save(&p).unwrap();
        assert_eq!(DistanceVector::load(&p, "a").unwrap(), d);
    }

    proptest! {
        #[test]
        fn growing_align_set_never_increases_distance(seed in 0u64..500, extra in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = matrix("r", random(10, 4, &mut rng));
            let base = random(3, 4, &mut rng);
            let more = ndarray::concatenate(ndarray::Axis(0), &[base.view(), random(extra, 4, &mut rng).view()]).unwrap();
            let d1 = min_distance_to_align(&r, &matrix("a", base)).unwrap();
            let d2 = min_distance_to_align(&r, &matrix("a", more)).unwrap();
            for (x, y) in d1.distances.iter().zip(&d2.distances) {
                prop_assert!(y <= x);
            }
        }
    }
}

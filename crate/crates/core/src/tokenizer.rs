//! Direct coordinate tokens: points are sorted lexicographically and every
//! `group_size` consecutive points become one token of dimension
//! `3 * group_size`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::PointCloudShape;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub group_size: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { group_size: 1 }
    }
}

impl TokenizerConfig {
    pub fn token_dim(&self) -> usize {
        3 * self.group_size
    }

    pub fn token_count(&self, point_count: usize) -> Result<usize> {
        if self.group_size == 0 {
            return Err(Error::Config("tokenizer.group_size must be positive".into()));
        }
        if !point_count.is_multiple_of(self.group_size) {
            return Err(Error::Config(format!(
                "point count {point_count} is not divisible by group size {}",
                self.group_size
            )));
        }
        Ok(point_count / self.group_size)
    }
}

/// `n × d` latent tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
}

impl TokenSequence {
    pub fn new(tokens: Array2<f64>) -> Result<Self> {
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("token sequence contains non-finite values".into()));
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Lexicographic (x, y, z) order; `total_cmp` keeps it total for any input.
pub fn canonical_order(points: &mut [[f64; 3]]) {
    points.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])).then(a[2].total_cmp(&b[2])));
}

pub fn tokenize(shape: &PointCloudShape, cfg: &TokenizerConfig) -> Result<TokenSequence> {
    let n = cfg.token_count(shape.len())?;
    if let Some(p) = shape.points.iter().find(|p| p.iter().any(|c| !c.is_finite() || c.abs() > 1.0)) {
        return Err(Error::Shape(format!("point {p:?} outside [-1, 1]")));
    }
    let mut points = shape.points.clone();
    canonical_order(&mut points);
    let d = cfg.token_dim();
    let tokens = Array2::from_shape_fn((n, d), |(i, j)| points[i * cfg.group_size + j / 3][j % 3]);
    TokenSequence::new(tokens)
}

/// Splits every token into `group_size` xyz triples, clamped to `[-1, 1]`.
pub fn detokenize(tokens: &TokenSequence, cfg: &TokenizerConfig) -> Result<PointCloudShape> {
    if tokens.dim() != cfg.token_dim() {
        return Err(Error::Shape(format!(
            "token dimension {} does not match 3 x group size {}",
            tokens.dim(),
            cfg.group_size
        )));
    }
    let points = tokens
        .tokens
        .rows()
        .into_iter()
        .flat_map(|row| {
            (0..cfg.group_size)
                .map(|g| [0, 1, 2].map(|k| row[3 * g + k].clamp(-1.0, 1.0)))
                .collect::<Vec<_>>()
        })
        .collect();
    PointCloudShape::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shape, ShapeFamily, ShapeSpec};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize) -> PointCloudShape {
        let spec = ShapeSpec::new(ShapeFamily::Torus, vec![0.7, 0.3], 3).unwrap();
        generate_shape(&spec, n, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn sorted(mut pts: Vec<[f64; 3]>) -> Vec<[f64; 3]> {
        canonical_order(&mut pts);
        pts
    }

    #[test]
    fn token_shapes() {
        let shape = cloud(256);
        let t1 = tokenize(&shape, &TokenizerConfig { group_size: 1 }).unwrap();
        assert_eq!(t1.tokens.dim(), (256, 3));
        let t4 = tokenize(&shape, &TokenizerConfig { group_size: 4 }).unwrap();
        assert_eq!(t4.tokens.dim(), (64, 12));
    }

    #[test]
    fn round_trip_recovers_the_point_set() {
        let shape = cloud(256);
        for g in [1, 2, 4, 8] {
            let cfg = TokenizerConfig { group_size: g };
            let back = detokenize(&tokenize(&shape, &cfg).unwrap(), &cfg).unwrap();
            assert_eq!(sorted(back.points), sorted(shape.points.clone()));
        }
    }

    #[test]
    fn zero_tokens_and_clamping() {
        let cfg = TokenizerConfig { group_size: 1 };
        let zeros = detokenize(&TokenSequence::new(Array2::zeros((4, 3))).unwrap(), &cfg).unwrap();
        assert_eq!(zeros.points, vec![[0.0; 3]; 4]);
        let mut t = Array2::zeros((1, 3));
        t[[0, 1]] = 1.7;
        t[[0, 2]] = -3.0;
        let p = detokenize(&TokenSequence::new(t).unwrap(), &cfg).unwrap();
        assert_eq!(p.points[0], [0.0, 1.0, -1.0]);
    }

    #[test]
    fn config_errors() {
        let shape = cloud(250);
        assert!(matches!(tokenize(&shape, &TokenizerConfig { group_size: 4 }), Err(Error::Config(_))));
        let t = TokenSequence::new(Array2::zeros((2, 6))).unwrap();
        assert!(matches!(detokenize(&t, &TokenizerConfig { group_size: 1 }), Err(Error::Shape(_))));
    }

    #[test]
    fn corpus_tokens_stay_inside_the_shape_extent() {
        for (i, family) in ShapeFamily::ALL.into_iter().enumerate() {
            let spec = ShapeSpec::new(family, vec![0.6; family.arity()], i as u64).unwrap();
            let shape = generate_shape(&spec, 128, &mut ChaCha8Rng::seed_from_u64(i as u64)).unwrap();
            let t = tokenize(&shape, &TokenizerConfig { group_size: 2 }).unwrap();
            assert!(t.tokens.iter().all(|v| v.abs() <= 0.9));
        }
    }

    proptest! {
        #[test]
        fn random_tokens_round_trip_under_canonical_order(
            vals in proptest::collection::vec(-1.0f64..1.0, 2 * 6 * 5),
        ) {
            // 5 tokens of group size 2: detokenize, re-tokenize, compare token multisets.
            let cfg = TokenizerConfig { group_size: 2 };
            let tokens = TokenSequence::new(Array2::from_shape_vec((5, 6), vals[..30].to_vec()).unwrap()).unwrap();
            let cloud = detokenize(&tokens, &cfg).unwrap();
            prop_assert_eq!(cloud.len(), 10);
            let again = tokenize(&cloud, &cfg).unwrap();
            let back = detokenize(&again, &cfg).unwrap();
            prop_assert_eq!(sorted(back.points.clone()), sorted(cloud.points));
            // Canonically ordered tokens reproduce themselves exactly.
            prop_assert_eq!(tokenize(&back, &cfg).unwrap(), again);
        }
    }
}

//! The embedding-map parameter tensor, its unit-normalized view, cosine
//! geometry, and mean segment embeddings.
//!
//! The map itself is the optimizable parameter: an H x W x D raster of
//! pre-normalization values. Everything downstream (loss distances, fusion
//! similarities) works on the normalized view; mean segment embeddings sum
//! pre-normalization values first and normalize once, which suppresses
//! per-pixel noise.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, EPS_NORM};
use crate::scene::VOID_ID;

/// H x W x D raster of pre-normalization embedding parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap {
    height: usize,
    width: usize,
    dim: usize,
    prenorm: Vec<f64>,
    generation: u64,
}

impl EmbeddingMap {
    /// Initialize with i.i.d. uniform values in [-0.1, 0.1]; any pixel that
    /// lands near zero norm is re-drawn. Deterministic per seed.
    pub fn init_random(height: usize, width: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "embedding dim must be >= 2, got {dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prenorm = vec![0.0; height * width * dim];
        for px in prenorm.chunks_exact_mut(dim) {
            loop {
                for v in px.iter_mut() {
                    *v = rng.random_range(-0.1..0.1);
                }
                if linalg::norm(px) >= 1e-3 {
                    break;
                }
            }
        }
        Ok(Self {
            height,
            width,
            dim,
            prenorm,
            generation: 0,
        })
    }

    /// Build from raw values (checkpoint loading, tests).
    pub fn from_parts(
        height: usize,
        width: usize,
        dim: usize,
        prenorm: Vec<f64>,
        generation: u64,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "embedding dim must be >= 2, got {dim}"
            )));
        }
        if prenorm.len() != height * width * dim {
            return Err(Error::InvalidArgument(format!(
                "prenorm length {} does not match {height}x{width}x{dim}",
                prenorm.len()
            )));
        }
        if let Some(pos) = prenorm.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("embedding value at flat index {pos}"),
            });
        }
        Ok(Self {
            height,
            width,
            dim,
            prenorm,
            generation,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn prenorm(&self) -> &[f64] {
        &self.prenorm
    }

    /// Pre-normalization vector of the pixel at (x, y).
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.dim;
        &self.prenorm[i..i + self.dim]
    }

    /// Pre-normalization vector of the flat pixel index.
    pub fn pixel_flat(&self, i: usize) -> &[f64] {
        &self.prenorm[i * self.dim..(i + 1) * self.dim]
    }

    /// Apply an in-place parameter update and bump the generation counter.
    pub fn apply_update(&mut self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.prenorm);
        self.generation += 1;
    }

    /// Unit-normalize every pixel vector.
    pub fn normalize(&self) -> Result<NormalizedView> {
        let mut data = vec![0.0; self.prenorm.len()];
        for i in 0..self.num_pixels() {
            let px = self.pixel_flat(i);
            let n = linalg::norm(px);
            if n < EPS_NORM {
                let (x, y) = (i % self.width, i / self.width);
                return Err(Error::ZeroNorm {
                    context: format!("embedding pixel ({x}, {y})"),
                });
            }
            for (o, v) in data[i * self.dim..(i + 1) * self.dim].iter_mut().zip(px) {
                *o = v / n;
            }
        }
        Ok(NormalizedView {
            height: self.height,
            width: self.width,
            dim: self.dim,
            data,
        })
    }
}

/// Read-only unit-norm view of an [`EmbeddingMap`]; shareable across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedView {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f64>,
}

impl NormalizedView {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn pixel_flat(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Flattened N x D pixel matrix (row per pixel, row-major scan order).
    pub fn as_matrix(&self) -> DenseMatrix {
        DenseMatrix::from_vec(self.num_pixels(), self.dim, self.data.clone())
            .expect("normalized view is finite by construction")
    }
}

/// Cosine distance `1 - p.q / (|p| |q|)`, in [0, 2].
pub fn cosine_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    let (np, nq) = (linalg::norm(p), linalg::norm(q));
    if np < EPS_NORM || nq < EPS_NORM {
        return Err(Error::ZeroNorm {
            context: "cosine distance operand".to_string(),
        });
    }
    Ok(1.0 - linalg::dot(p, q) / (np * nq))
}

/// Unit-normalized sum of pre-normalization pixel embeddings per id.
///
/// With the semantic raster this yields category mean embeddings; with the
/// segment raster, per-segment means. Void pixels are skipped.
pub fn mean_segment_embeddings(
    map: &EmbeddingMap,
    id_map: &[u16],
) -> Result<BTreeMap<u16, Vec<f64>>> {
    if id_map.len() != map.num_pixels() {
        return Err(Error::InvalidArgument(format!(
            "id map length {} does not match {} pixels",
            id_map.len(),
            map.num_pixels()
        )));
    }
    let dim = map.dim();
    let mut sums: BTreeMap<u16, Vec<f64>> = BTreeMap::new();
    for (i, id) in id_map.iter().enumerate() {
        if *id == VOID_ID {
            continue;
        }
        let entry = sums.entry(*id).or_insert_with(|| vec![0.0; dim]);
        for (s, v) in entry.iter_mut().zip(map.pixel_flat(i)) {
            *s += v;
        }
    }
    let mut means = BTreeMap::new();
    for (id, sum) in sums {
        let mean = linalg::l2_normalize(&sum).map_err(|_| Error::ZeroNorm {
            context: format!("mean embedding of segment {id}"),
        })?;
        means.insert(id, mean);
    }
    Ok(means)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_map(h: usize, w: usize, px: &[f64]) -> EmbeddingMap {
        let mut data = Vec::with_capacity(h * w * px.len());
        for _ in 0..h * w {
            data.extend_from_slice(px);
        }
        EmbeddingMap::from_parts(h, w, px.len(), data, 0).unwrap()
    }

    #[test]
    fn normalize_constant_map() {
        let map = constant_map(2, 3, &[2.0, 0.0, 0.0]);
        let view = map.normalize().unwrap();
        for i in 0..6 {
            assert_eq!(view.pixel_flat(i), &[1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn normalize_is_scale_invariant() {
        let map = EmbeddingMap::init_random(4, 5, 3, 7).unwrap();
        let mut scaled = map.clone();
        scaled.apply_update(|p| p.iter_mut().for_each(|v| *v *= 3.7));
        let a = map.normalize().unwrap();
        let b = scaled.normalize().unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_reports_zero_pixel() {
        let mut data = vec![1.0; 2 * 2 * 2];
        data[2] = 0.0;
        data[3] = 0.0; // pixel (1, 0)
        let map = EmbeddingMap::from_parts(2, 2, 2, data, 0).unwrap();
        match map.normalize() {
            Err(Error::ZeroNorm { context }) => assert!(context.contains("(1, 0)")),
            other => panic!("expected ZeroNorm, got {other:?}"),
        }
    }

    #[test]
    fn cosine_distance_endpoints() {
        let p = [1.0, 0.0];
        assert_eq!(cosine_distance(&p, &p).unwrap(), 0.0);
        assert_eq!(cosine_distance(&p, &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(cosine_distance(&p, &[-1.0, 0.0]).unwrap(), 2.0);
    }

    #[test]
    fn mean_embedding_single_pixel() {
        let map = constant_map(1, 1, &[3.0, 4.0]);
        let means = mean_segment_embeddings(&map, &[5]).unwrap();
        assert_eq!(means[&5], vec![0.6, 0.8]);
    }

    #[test]
    fn mean_embedding_two_pixels() {
        let map =
            EmbeddingMap::from_parts(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0], 0).unwrap();
        let means = mean_segment_embeddings(&map, &[0, 0]).unwrap();
        let r = 2.0_f64.sqrt() / 2.0;
        assert!((means[&0][0] - r).abs() < 1e-15);
        assert!((means[&0][1] - r).abs() < 1e-15);
    }

    #[test]
    fn mean_embeddings_are_local_to_their_segment() {
        let mut map = EmbeddingMap::init_random(2, 2, 3, 1).unwrap();
        let ids = [0u16, 0, 1, 1];
        let before = mean_segment_embeddings(&map, &ids).unwrap();
        // Perturb only segment 1's pixels.
        map.apply_update(|p| {
            for v in &mut p[2 * 3..] {
                *v += 0.5;
            }
        });
        let after = mean_segment_embeddings(&map, &ids).unwrap();
        assert_eq!(before[&0], after[&0]);
        assert_ne!(before[&1], after[&1]);
    }

    #[test]
    fn void_pixels_are_excluded() {
        let map = constant_map(1, 3, &[1.0, 0.0]);
        let ids = [0u16, VOID_ID, 0];
        let means = mean_segment_embeddings(&map, &ids).unwrap();
        assert_eq!(means.len(), 1);
        assert_eq!(means[&0], vec![1.0, 0.0]);
    }
}

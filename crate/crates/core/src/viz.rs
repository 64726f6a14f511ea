//! Rendering helpers: embedding maps as PCA-projected color images and
//! predictions with a hashed per-segment palette.

use std::path::Path;

use crate::embedding::EmbeddingMap;
use crate::error::Result;
use crate::fusion::PanopticPrediction;
use crate::linalg::{pca_project, DenseMatrix};
use crate::pgm;
use crate::scene::VOID_ID;

/// Project the map's pixel vectors to (up to) three principal components
/// and rescale each channel to 0..255. Zero-variance channels (or a
/// constant map) render mid-gray.
pub fn embedding_to_rgb(map: &EmbeddingMap, pca_iters: usize) -> Result<Vec<u8>> {
    let n = map.num_pixels();
    let points = DenseMatrix::from_vec(n, map.dim(), map.prenorm().to_vec())?;
    let out_dim = map.dim().min(3);
    let proj = pca_project(&points, out_dim, pca_iters)?;

    let mut rgb = vec![128u8; n * 3];
    for c in 0..out_dim {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in 0..n {
            let v = proj.get(r, c);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi - lo < 1e-12 {
            continue; // keep the mid-gray fill
        }
        for r in 0..n {
            let v = (proj.get(r, c) - lo) / (hi - lo);
            rgb[r * 3 + c] = (v * 255.0).round() as u8;
        }
    }
    Ok(rgb)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic segment color from a seeded hash of its id. Void is black.
pub fn segment_color(segment_id: u16, palette_seed: u64) -> [u8; 3] {
    let h = splitmix64(palette_seed ^ ((segment_id as u64) << 17 | 0x51));
    // Keep channels away from 0 so no segment collides with void black.
    [
        64 + (h & 0xff) as u8 % 192,
        64 + ((h >> 8) & 0xff) as u8 % 192,
        64 + ((h >> 16) & 0xff) as u8 % 192,
    ]
}

/// Render a prediction with the hashed palette.
pub fn prediction_to_rgb(pred: &PanopticPrediction, palette_seed: u64) -> Vec<u8> {
    let mut rgb = vec![0u8; pred.assignment().len() * 3];
    for (i, &q) in pred.assignment().iter().enumerate() {
        if q == VOID_ID {
            continue;
        }
        let color = segment_color(q, palette_seed);
        rgb[i * 3..i * 3 + 3].copy_from_slice(&color);
    }
    rgb
}

/// Write RGB bytes as a binary PPM.
pub fn write_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    pgm::write_ppm(path, width, height, rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_renders_uniform_gray() {
        let map = EmbeddingMap::from_parts(2, 2, 4, vec![0.3; 16], 0).unwrap();
        let rgb = embedding_to_rgb(&map, 50).unwrap();
        assert!(rgb.iter().all(|b| *b == 128));
    }

    #[test]
    fn rendering_is_deterministic() {
        let map = EmbeddingMap::init_random(4, 4, 8, 3).unwrap();
        assert_eq!(
            embedding_to_rgb(&map, 100).unwrap(),
            embedding_to_rgb(&map, 100).unwrap()
        );
    }

    #[test]
    fn segment_colors_avoid_void_black() {
        for id in 0..200u16 {
            let c = segment_color(id, 7);
            assert!(c.iter().any(|v| *v != 0));
        }
    }
}

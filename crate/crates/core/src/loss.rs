//! The category- and instance-aware embedding objective and its analytic
//! gradient with respect to the pre-normalization map.
//!
//! For every pixel, the distance to its own query must undercut the
//! distance to each other query by a margin; violations pass through a
//! log-scaled hinge and only the hardest (largest-loss) terms per pixel are
//! kept. Two instantiations share the machinery:
//!
//! * category level: queries are memory embeddings, one per category slot;
//! * instance level: stuff memory embeddings plus per-instance mean
//!   embeddings, with similarities to instances whose expanded box does not
//!   contain the pixel forced to zero (distance 1).
//!
//! Query embeddings are treated as constants throughout (no gradient flows
//! into memory vectors or instance means). Finite-difference checks must
//! freeze the query set the same way; [`LossInputs`] exists so callers can
//! build the queries once and re-evaluate the loss under perturbations.

use serde::{Deserialize, Serialize};

use crate::embedding::{mean_segment_embeddings, EmbeddingMap};
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, EPS_NORM};
use crate::memory::MemoryBank;
use crate::scene::{PanopticScene, VOID_ID};

/// Scope of the hardest-term selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopKScope {
    /// Keep the top-K terms among each pixel's negative queries.
    PerPixel,
    /// Keep the top-K terms over all (pixel, query) pairs of the image.
    Global,
}

/// Objective hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub margin: f64,
    pub top_k: usize,
    /// Weight of the instance-level term in the combined loss.
    pub alpha: f64,
    /// Per-pixel weight applied to thing pixels in the instance-level loss.
    pub thing_pixel_weight: f64,
    /// Ground-truth boxes grow by this factor for the training-time
    /// instance filter.
    pub box_expand: f64,
    /// Floor of the log argument; at the floor the gradient is zero.
    pub clamp_eps: f64,
    pub topk_scope: TopKScope,
    /// Disable to optimize every pixel against every instance (no box
    /// filtering).
    pub filtering: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.15,
            top_k: 5,
            alpha: 2.0,
            thing_pixel_weight: 5.0,
            box_expand: 1.5,
            clamp_eps: 1e-7,
            topk_scope: TopKScope::PerPixel,
            filtering: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..2.0).contains(&self.margin) {
            return Err(Error::InvalidArgument(format!(
                "margin {} outside [0, 2)",
                self.margin
            )));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidArgument("top_k must be >= 1".to_string()));
        }
        if self.alpha < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "alpha {} must be >= 0",
                self.alpha
            )));
        }
        if self.thing_pixel_weight < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "thing_pixel_weight {} must be >= 1",
                self.thing_pixel_weight
            )));
        }
        if self.box_expand < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "box_expand {} must be >= 1",
                self.box_expand
            )));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "clamp_eps {} outside (0, 1)",
                self.clamp_eps
            )));
        }
        Ok(())
    }
}

/// Loss value plus the exact derivative with respect to every
/// pre-normalization parameter.
#[derive(Debug, Clone)]
pub struct LossValueAndGrad {
    pub value: f64,
    /// Same layout as the embedding map's pre-normalization storage.
    pub grad: Vec<f64>,
}

impl LossValueAndGrad {
    fn zeros(len: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; len],
        }
    }

    /// `self + weight * other`, elementwise.
    pub fn add_scaled(&mut self, other: &LossValueAndGrad, weight: f64) {
        self.value += weight * other.value;
        for (g, o) in self.grad.iter_mut().zip(&other.grad) {
            *g += weight * o;
        }
    }

    pub fn grad_max_norm(&self) -> f64 {
        self.grad.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Hinge and log-scaled hinge of one (pixel, negative query) pair:
/// `l' = max(d_pos - d_neg + margin, 0)` and
/// `l = -ln(max(1 - l'/(2 + margin), clamp_eps))`.
pub fn triplet_term(d_pos: f64, d_neg: f64, cfg: &LossConfig) -> (f64, f64) {
    let l_prime = (d_pos - d_neg + cfg.margin).max(0.0);
    let arg = (1.0 - l_prime / (2.0 + cfg.margin)).max(cfg.clamp_eps);
    (l_prime, -arg.ln())
}

/// d l / d l' for an active hinge term; zero inside the clamp.
fn triplet_term_slope(l_prime: f64, cfg: &LossConfig) -> f64 {
    let span = 2.0 + cfg.margin;
    let raw = 1.0 - l_prime / span;
    if raw > cfg.clamp_eps {
        1.0 / (span * raw)
    } else {
        0.0
    }
}

/// One negative-query term of a pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletTerm {
    pub query: u16,
    pub d_neg: f64,
    pub l_prime: f64,
    pub l: f64,
    pub selected: bool,
}

/// Full per-pixel diagnostic of the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBreakdown {
    /// Flat pixel index in row-major scan order.
    pub pixel: usize,
    pub d_pos: f64,
    pub terms: Vec<TripletTerm>,
}

struct ActiveTerm {
    pixel: u32,
    query: u16,
    l_prime: f64,
    l: f64,
    /// False when the similarity was forced to zero (distance fixed at 1),
    /// in which case no gradient flows through the negative side.
    valid: bool,
}

fn check_inputs(
    map: &EmbeddingMap,
    pixel_to_query: &[u16],
    queries: &DenseMatrix,
    valid: Option<&[bool]>,
    pixel_weights: Option<&[f64]>,
) -> Result<()> {
    let n = map.num_pixels();
    if pixel_to_query.len() != n {
        return Err(Error::InvalidArgument(format!(
            "pixel_to_query length {} does not match {n} pixels",
            pixel_to_query.len()
        )));
    }
    if queries.cols() != map.dim() {
        return Err(Error::ShapeMismatch {
            context: "embedding_loss queries",
            left: (queries.rows(), queries.cols()),
            right: (n, map.dim()),
        });
    }
    if queries.rows() == 0 || queries.rows() >= VOID_ID as usize {
        return Err(Error::InvalidArgument(format!(
            "query count {} out of range",
            queries.rows()
        )));
    }
    if let Some(v) = valid {
        if v.len() != n * queries.rows() {
            return Err(Error::InvalidArgument(format!(
                "valid mask length {} does not match {n} x {}",
                v.len(),
                queries.rows()
            )));
        }
    }
    if let Some(w) = pixel_weights {
        if w.len() != n {
            return Err(Error::InvalidArgument(format!(
                "pixel weight length {} does not match {n} pixels",
                w.len()
            )));
        }
    }
    for (i, &q) in pixel_to_query.iter().enumerate() {
        if q != VOID_ID && (q as usize) >= queries.rows() {
            return Err(Error::InvalidArgument(format!(
                "pixel {i} points at query {q} but only {} queries exist",
                queries.rows()
            )));
        }
    }
    Ok(())
}

/// Triplet objective of one embedding map against a fixed query set.
///
/// Per pixel `i` with positive query `a`: `d_pos` is the cosine distance of
/// the normalized pixel to `queries[a]`; for every other query `k`,
/// `d_neg` is the cosine distance, or exactly 1 when `valid[i][k]` is false
/// (similarity forced to zero). The hardest terms are selected per
/// `cfg.topk_scope`, weighted by `pixel_weights`, and averaged over the
/// number of non-void pixels. The gradient is exact through normalization,
/// distances, hinge, and log; queries are constants.
pub fn embedding_loss(
    map: &EmbeddingMap,
    pixel_to_query: &[u16],
    queries: &DenseMatrix,
    valid: Option<&[bool]>,
    pixel_weights: Option<&[f64]>,
    cfg: &LossConfig,
) -> Result<LossValueAndGrad> {
    cfg.validate()?;
    check_inputs(map, pixel_to_query, queries, valid, pixel_weights)?;

    let num_queries = queries.rows();
    let dim = map.dim();
    let n_labeled = pixel_to_query.iter().filter(|q| **q != VOID_ID).count();
    if n_labeled == 0 {
        return Err(Error::NoValidPixels);
    }
    let inv_n = 1.0 / n_labeled as f64;

    // Collect active (positive-loss) terms, selecting per pixel on the fly
    // or globally afterwards.
    let mut selected: Vec<ActiveTerm> = Vec::new();
    let mut pixel_buf: Vec<ActiveTerm> = Vec::new();
    for (i, &a) in pixel_to_query.iter().enumerate() {
        if a == VOID_ID {
            continue;
        }
        let x = map.pixel_flat(i);
        let nx = linalg::norm(x);
        if nx < EPS_NORM {
            return Err(Error::ZeroNorm {
                context: format!("embedding pixel at flat index {i}"),
            });
        }
        let p: Vec<f64> = x.iter().map(|v| v / nx).collect();
        let d_pos = 1.0 - linalg::dot(&p, queries.row(a as usize));
        pixel_buf.clear();
        for k in 0..num_queries {
            if k == a as usize {
                continue;
            }
            let is_valid = valid.map_or(true, |v| v[i * num_queries + k]);
            let d_neg = if is_valid {
                1.0 - linalg::dot(&p, queries.row(k))
            } else {
                1.0
            };
            let (l_prime, l) = triplet_term(d_pos, d_neg, cfg);
            if l > 0.0 {
                pixel_buf.push(ActiveTerm {
                    pixel: i as u32,
                    query: k as u16,
                    l_prime,
                    l,
                    valid: is_valid,
                });
            }
        }
        match cfg.topk_scope {
            TopKScope::PerPixel => {
                pixel_buf.sort_unstable_by(|s, t| {
                    t.l.total_cmp(&s.l).then(s.query.cmp(&t.query))
                });
                pixel_buf.truncate(cfg.top_k);
                selected.append(&mut pixel_buf);
            }
            TopKScope::Global => selected.append(&mut pixel_buf),
        }
    }
    if cfg.topk_scope == TopKScope::Global {
        selected.sort_unstable_by(|s, t| {
            t.l.total_cmp(&s.l)
                .then(s.pixel.cmp(&t.pixel))
                .then(s.query.cmp(&t.query))
        });
        selected.truncate(cfg.top_k);
        // Restore scan order for a deterministic accumulation.
        selected.sort_unstable_by(|s, t| s.pixel.cmp(&t.pixel).then(s.query.cmp(&t.query)));
    }

    let mut out = LossValueAndGrad::zeros(map.prenorm().len());
    let mut grad_p = vec![0.0; dim];
    let mut idx = 0;
    while idx < selected.len() {
        let i = selected[idx].pixel as usize;
        let a = pixel_to_query[i] as usize;
        let x = map.pixel_flat(i);
        let nx = linalg::norm(x);
        let p: Vec<f64> = x.iter().map(|v| v / nx).collect();
        let weight = pixel_weights.map_or(1.0, |w| w[i]) * inv_n;
        grad_p.iter_mut().for_each(|g| *g = 0.0);

        while idx < selected.len() && selected[idx].pixel as usize == i {
            let term = &selected[idx];
            out.value += weight * term.l;
            let slope = weight * triplet_term_slope(term.l_prime, cfg);
            if slope != 0.0 {
                let q_pos = queries.row(a);
                for (g, qa) in grad_p.iter_mut().zip(q_pos) {
                    *g -= slope * qa;
                }
                if term.valid {
                    let q_neg = queries.row(term.query as usize);
                    for (g, qk) in grad_p.iter_mut().zip(q_neg) {
                        *g += slope * qk;
                    }
                }
            }
            idx += 1;
        }

        // Chain through normalization: dL/dx = (g - (p.g) p) / |x|.
        let pg = linalg::dot(&p, &grad_p);
        let gx = &mut out.grad[i * dim..(i + 1) * dim];
        for ((g, pv), gp) in gx.iter_mut().zip(&p).zip(&grad_p) {
            *g += (gp - pg * pv) / nx;
        }
    }
    Ok(out)
}

/// Per-pixel term diagnostics with the same selection rule as
/// [`embedding_loss`]. All negative queries appear, selected or not.
pub fn loss_breakdown(
    map: &EmbeddingMap,
    pixel_to_query: &[u16],
    queries: &DenseMatrix,
    valid: Option<&[bool]>,
    cfg: &LossConfig,
) -> Result<Vec<TripletBreakdown>> {
    cfg.validate()?;
    check_inputs(map, pixel_to_query, queries, valid, None)?;
    let num_queries = queries.rows();

    let mut breakdowns = Vec::new();
    for (i, &a) in pixel_to_query.iter().enumerate() {
        if a == VOID_ID {
            continue;
        }
        let x = map.pixel_flat(i);
        let nx = linalg::norm(x);
        if nx < EPS_NORM {
            return Err(Error::ZeroNorm {
                context: format!("embedding pixel at flat index {i}"),
            });
        }
        let p: Vec<f64> = x.iter().map(|v| v / nx).collect();
        let d_pos = 1.0 - linalg::dot(&p, queries.row(a as usize));
        let mut terms = Vec::with_capacity(num_queries - 1);
        for k in 0..num_queries {
            if k == a as usize {
                continue;
            }
            let is_valid = valid.map_or(true, |v| v[i * num_queries + k]);
            let d_neg = if is_valid {
                1.0 - linalg::dot(&p, queries.row(k))
            } else {
                1.0
            };
            let (l_prime, l) = triplet_term(d_pos, d_neg, cfg);
            terms.push(TripletTerm {
                query: k as u16,
                d_neg,
                l_prime,
                l,
                selected: false,
            });
        }
        breakdowns.push(TripletBreakdown {
            pixel: i,
            d_pos,
            terms,
        });
    }

    // Mark selection.
    match cfg.topk_scope {
        TopKScope::PerPixel => {
            for b in &mut breakdowns {
                let mut order: Vec<usize> = (0..b.terms.len())
                    .filter(|&t| b.terms[t].l > 0.0)
                    .collect();
                order.sort_unstable_by(|&s, &t| {
                    b.terms[t]
                        .l
                        .total_cmp(&b.terms[s].l)
                        .then(b.terms[s].query.cmp(&b.terms[t].query))
                });
                for &t in order.iter().take(cfg.top_k) {
                    b.terms[t].selected = true;
                }
            }
        }
        TopKScope::Global => {
            let mut order: Vec<(usize, usize)> = Vec::new();
            for (bi, b) in breakdowns.iter().enumerate() {
                for (ti, t) in b.terms.iter().enumerate() {
                    if t.l > 0.0 {
                        order.push((bi, ti));
                    }
                }
            }
            order.sort_unstable_by(|&(sb, st), &(tb, tt)| {
                let (s, t) = (&breakdowns[sb].terms[st], &breakdowns[tb].terms[tt]);
                t.l.total_cmp(&s.l)
                    .then(breakdowns[sb].pixel.cmp(&breakdowns[tb].pixel))
                    .then(s.query.cmp(&t.query))
            });
            for &(bi, ti) in order.iter().take(cfg.top_k) {
                breakdowns[bi].terms[ti].selected = true;
            }
        }
    }
    Ok(breakdowns)
}

/// A frozen query problem: everything [`embedding_loss`] needs besides the
/// map itself. Because queries are constants by convention, re-evaluating
/// the same inputs at a perturbed map is exactly the stop-gradient loss,
/// which is what finite-difference verification must do.
#[derive(Debug, Clone)]
pub struct LossInputs {
    pub pixel_to_query: Vec<u16>,
    pub queries: DenseMatrix,
    pub valid: Option<Vec<bool>>,
    pub pixel_weights: Option<Vec<f64>>,
}

impl LossInputs {
    pub fn eval(&self, map: &EmbeddingMap, cfg: &LossConfig) -> Result<LossValueAndGrad> {
        embedding_loss(
            map,
            &self.pixel_to_query,
            &self.queries,
            self.valid.as_deref(),
            self.pixel_weights.as_deref(),
            cfg,
        )
    }
}

/// Category-level inputs: queries are the memory vectors of every category
/// slot (present in the image or not), pixels point at their category's
/// slot, all pairs valid, unit weights.
pub fn cae_inputs(scene: &PanopticScene, bank: &MemoryBank) -> Result<LossInputs> {
    let space = scene.label_space();
    if bank.num_categories() != space.query_count() {
        return Err(Error::InvalidArgument(format!(
            "memory bank has {} slots but the label space needs {}",
            bank.num_categories(),
            space.query_count()
        )));
    }
    let queries = DenseMatrix::from_vec(
        bank.num_categories(),
        bank.dim(),
        bank.vectors().to_vec(),
    )?;
    let pixel_to_query = scene
        .semantic_map()
        .iter()
        .map(|&c| {
            if c == VOID_ID {
                VOID_ID
            } else {
                space.query_index(c) as u16
            }
        })
        .collect();
    Ok(LossInputs {
        pixel_to_query,
        queries,
        valid: None,
        pixel_weights: None,
    })
}

/// Instance-level inputs: stuff memory vectors followed by the mean
/// embedding of each thing segment (in segment-id order, computed from the
/// current map and then frozen). Pixels point at their segment; a thing
/// query is valid for a pixel only when the segment's ground-truth box,
/// expanded by `cfg.box_expand` about its center, contains the pixel.
/// Thing pixels carry `cfg.thing_pixel_weight`.
pub fn iae_inputs(
    map: &EmbeddingMap,
    scene: &PanopticScene,
    bank: &MemoryBank,
    cfg: &LossConfig,
) -> Result<LossInputs> {
    let space = scene.label_space();
    if bank.num_stuff() != space.num_stuff {
        return Err(Error::InvalidArgument(format!(
            "memory bank has {} stuff slots but the label space has {}",
            bank.num_stuff(),
            space.num_stuff
        )));
    }
    if scene.segments().is_empty() {
        return Err(Error::InvalidArgument("scene has no segments".to_string()));
    }
    let num_stuff = space.num_stuff;
    let things: Vec<_> = scene.thing_segments().collect();
    let num_queries = num_stuff + things.len();
    let dim = map.dim();
    if bank.dim() != dim {
        return Err(Error::ShapeMismatch {
            context: "iae memory bank dim",
            left: (bank.num_categories(), bank.dim()),
            right: (map.num_pixels(), dim),
        });
    }

    let mut q = Vec::with_capacity(num_queries * dim);
    for c in 0..num_stuff {
        q.extend_from_slice(bank.vector(c));
    }
    let means = mean_segment_embeddings(map, scene.segment_map())?;
    for t in &things {
        let mean = means.get(&t.segment_id).ok_or_else(|| Error::ZeroNorm {
            context: format!("mean embedding of segment {}", t.segment_id),
        })?;
        q.extend_from_slice(mean);
    }
    let queries = DenseMatrix::from_vec(num_queries, dim, q)?;

    // Thing segment ids are contiguous from num_stuff, so the segment
    // raster doubles as the query index map.
    let pixel_to_query = scene.segment_map().to_vec();

    let (h, w) = (scene.height(), scene.width());
    let valid = if cfg.filtering && !things.is_empty() {
        let mut mask = vec![true; h * w * num_queries];
        for (j, t) in things.iter().enumerate() {
            let k = num_stuff + j;
            let (x0, y0, x1, y1) = t.bbox.expanded(cfg.box_expand, w, h);
            for y in 0..h {
                for x in 0..w {
                    let inside = (x as f64) >= x0
                        && (x as f64) < x1
                        && (y as f64) >= y0
                        && (y as f64) < y1;
                    if !inside {
                        mask[(y * w + x) * num_queries + k] = false;
                    }
                }
            }
        }
        Some(mask)
    } else {
        None
    };

    let pixel_weights: Vec<f64> = scene
        .segment_map()
        .iter()
        .map(|&s| {
            if s != VOID_ID && (s as usize) >= num_stuff {
                cfg.thing_pixel_weight
            } else {
                1.0
            }
        })
        .collect();

    Ok(LossInputs {
        pixel_to_query,
        queries,
        valid,
        pixel_weights: Some(pixel_weights),
    })
}

/// Category-level loss of the map against the memory bank.
pub fn cae_loss(
    map: &EmbeddingMap,
    scene: &PanopticScene,
    bank: &MemoryBank,
    cfg: &LossConfig,
) -> Result<LossValueAndGrad> {
    cae_inputs(scene, bank)?.eval(map, cfg)
}

/// Instance-level loss of the map against stuff memories and instance
/// means.
pub fn iae_loss(
    map: &EmbeddingMap,
    scene: &PanopticScene,
    bank: &MemoryBank,
    cfg: &LossConfig,
) -> Result<LossValueAndGrad> {
    iae_inputs(map, scene, bank, cfg)?.eval(map, cfg)
}

/// Combined loss value, gradient, and the two sub-loss values.
#[derive(Debug, Clone)]
pub struct CiaeLoss {
    pub value: f64,
    pub grad: Vec<f64>,
    pub cae_value: f64,
    pub iae_value: f64,
}

/// Combined objective: category level plus `alpha` times instance level.
pub fn ciae_loss(
    map: &EmbeddingMap,
    scene: &PanopticScene,
    bank: &MemoryBank,
    cfg: &LossConfig,
) -> Result<CiaeLoss> {
    let cae = cae_loss(map, scene, bank, cfg)?;
    let iae = iae_loss(map, scene, bank, cfg)?;
    let mut total = cae.clone();
    total.add_scaled(&iae, cfg.alpha);
    Ok(CiaeLoss {
        value: total.value,
        grad: total.grad,
        cae_value: cae.value,
        iae_value: iae.value,
    })
}

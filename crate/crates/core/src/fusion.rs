//! Inference: simulated detections, query assembly, box-filtered
//! cosine-similarity assignment, and panoptic post-processing.
//!
//! The pixel-by-query similarity matrix is a plain matrix product of the
//! normalized pixel embeddings against the query rows (everything is unit
//! norm). Similarities of pixels outside an instance query's box are
//! overwritten before the per-pixel argmax, and undersized stuff regions
//! are suppressed to void afterwards.
//!
//! Detections are simulated from ground truth with controlled noise in
//! place of a detector: one proposal per surviving thing instance, with
//! jittered boxes, optional category flips, drops, and duplicates.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{mean_segment_embeddings, EmbeddingMap, NormalizedView};
use crate::error::{Error, Result};
use crate::linalg::{matmul, DenseMatrix};
use crate::memory::MemoryBank;
use crate::pgm;
use crate::scene::{BBox, PanopticScene, SegmentRecord, VOID_ID};

/// Version tag written into prediction `pred_meta.json`.
pub const PRED_FORMAT_VERSION: &str = "ciae-pred/1";

/// Default minimum stuff area: the fraction of the image that a 4096-pixel
/// region covers at the reference 800x800 operating point.
pub fn default_min_stuff_area(height: usize, width: usize) -> usize {
    (0.0064 * (height * width) as f64).round() as usize
}

/// A simulated detection: a box, the detector-side category, and the pixel
/// the proposal was generated from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceProposal {
    pub bbox: BBox,
    /// Thing category id (detector classification).
    pub category: u16,
    pub score: f64,
    /// (x, y) location the proposal is generated from; always inside the
    /// instance's ground-truth mask and inside `bbox`.
    pub seed: (usize, usize),
}

/// Noise model for simulated detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalSimConfig {
    /// Stddev of the box-center jitter, as a fraction of each box extent.
    pub center_jitter: f64,
    /// Stddev of the multiplicative box-size jitter.
    pub size_jitter: f64,
    pub drop_prob: f64,
    pub duplicate_prob: f64,
    pub category_flip_prob: f64,
    /// Replace seed-point queries with ground-truth mask means and jittered
    /// boxes with ground-truth boxes.
    pub oracle_queries: bool,
    pub seed: u64,
}

impl Default for ProposalSimConfig {
    fn default() -> Self {
        Self {
            center_jitter: 0.0,
            size_jitter: 0.0,
            drop_prob: 0.0,
            duplicate_prob: 0.0,
            category_flip_prob: 0.0,
            oracle_queries: false,
            seed: 0,
        }
    }
}

impl ProposalSimConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("drop_prob", self.drop_prob),
            ("duplicate_prob", self.duplicate_prob),
            ("category_flip_prob", self.category_flip_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!(
                    "{name} {p} outside [0, 1]"
                )));
            }
        }
        if self.center_jitter < 0.0 || self.size_jitter < 0.0 {
            return Err(Error::InvalidArgument(
                "jitter stddevs must be >= 0".to_string(),
            ));
        }
        Ok(())
    }
}

fn jittered_proposal(
    scene: &PanopticScene,
    gt: &SegmentRecord,
    cfg: &ProposalSimConfig,
    rng: &mut ChaCha8Rng,
) -> InstanceProposal {
    let (w, h) = (scene.width(), scene.height());
    let (cx, cy) = gt.bbox.center();
    let bw = gt.bbox.width() as f64;
    let bh = gt.bbox.height() as f64;

    let zx: f64 = rng.sample(StandardNormal);
    let zy: f64 = rng.sample(StandardNormal);
    let zw: f64 = rng.sample(StandardNormal);
    let zh: f64 = rng.sample(StandardNormal);
    let cx = cx + zx * cfg.center_jitter * bw;
    let cy = cy + zy * cfg.center_jitter * bh;
    let bw = bw * (1.0 + zw * cfg.size_jitter).max(0.2);
    let bh = bh * (1.0 + zh * cfg.size_jitter).max(0.2);

    let x0 = ((cx - bw / 2.0).floor() as isize).clamp(0, w as isize - 1) as usize;
    let y0 = ((cy - bh / 2.0).floor() as isize).clamp(0, h as isize - 1) as usize;
    let x1 = ((cx + bw / 2.0).ceil() as isize).clamp(x0 as isize + 1, w as isize) as usize;
    let y1 = ((cy + bh / 2.0).ceil() as isize).clamp(y0 as isize + 1, h as isize) as usize;
    let mut bbox = BBox::new(x0, y0, x1, y1);

    let space = scene.label_space();
    let mut category = gt.category;
    let flip: f64 = rng.random_range(0.0..1.0);
    if flip < cfg.category_flip_prob && space.num_thing >= 2 {
        let offset = rng.random_range(1..space.num_thing);
        let idx = (gt.category as usize - space.num_stuff + offset) % space.num_thing;
        category = (space.num_stuff + idx) as u16;
    }

    let score: f64 = rng.random_range(0.5..1.0);

    // Seed at the mask pixel nearest the (possibly jittered) box center,
    // preferring pixels inside the box; grow the box if the mask escaped it
    // entirely so the seed stays inside.
    let (bcx, bcy) = bbox.center();
    let mut best_inside: Option<(f64, usize, usize)> = None;
    let mut best_any: Option<(f64, usize, usize)> = None;
    for y in 0..h {
        for x in 0..w {
            if scene.segment_map()[scene.idx(x, y)] != gt.segment_id {
                continue;
            }
            let d = (x as f64 + 0.5 - bcx).powi(2) + (y as f64 + 0.5 - bcy).powi(2);
            let candidate = (d, y, x);
            let better = |cur: &Option<(f64, usize, usize)>| match cur {
                None => true,
                Some(best) => candidate < *best,
            };
            if better(&best_any) {
                best_any = Some(candidate);
            }
            if bbox.contains(x, y) && better(&best_inside) {
                best_inside = Some(candidate);
            }
        }
    }
    let (_, sy, sx) = best_inside.or(best_any).expect("segment has pixels");
    if !bbox.contains(sx, sy) {
        bbox = BBox::new(
            bbox.x_min.min(sx),
            bbox.y_min.min(sy),
            bbox.x_max.max(sx + 1),
            bbox.y_max.max(sy + 1),
        );
    }

    InstanceProposal {
        bbox,
        category,
        score,
        seed: (sx, sy),
    }
}

/// One noisy proposal per surviving ground-truth thing (plus configured
/// drops and duplicates), deterministic per seed.
pub fn simulate_proposals(
    scene: &PanopticScene,
    cfg: &ProposalSimConfig,
) -> Result<Vec<InstanceProposal>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut proposals = Vec::new();
    for gt in scene.thing_segments() {
        let drop: f64 = rng.random_range(0.0..1.0);
        if drop < cfg.drop_prob {
            continue;
        }
        proposals.push(jittered_proposal(scene, gt, cfg, &mut rng));
        let dup: f64 = rng.random_range(0.0..1.0);
        if dup < cfg.duplicate_prob {
            proposals.push(jittered_proposal(scene, gt, cfg, &mut rng));
        }
    }
    Ok(proposals)
}

/// Query row provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Stuff,
    Instance,
}

/// Metadata of one query row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryMeta {
    pub kind: QueryKind,
    pub category: u16,
    /// Owning box; present for instance rows only.
    pub bbox: Option<BBox>,
}

/// Ordered query embeddings: one stuff row per stuff category, then one row
/// per instance proposal. Every row is unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub matrix: DenseMatrix,
    pub meta: Vec<QueryMeta>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn instance_rows(&self) -> impl Iterator<Item = (usize, &QueryMeta)> {
        self.meta
            .iter()
            .enumerate()
            .filter(|(_, m)| m.kind == QueryKind::Instance)
    }
}

/// Assemble the query set: stuff memory vectors for every stuff category,
/// then one row per proposal. Standard rows copy the normalized embedding
/// at the proposal's seed pixel; oracle rows (requires `scene`) use the
/// normalized mean pre-normalization embedding over the instance's
/// ground-truth mask and replace the proposal box with the ground-truth
/// box.
pub fn build_queries(
    view: &NormalizedView,
    map: &EmbeddingMap,
    proposals: &[InstanceProposal],
    bank: &MemoryBank,
    scene: Option<&PanopticScene>,
    oracle_queries: bool,
) -> Result<QuerySet> {
    let dim = view.dim();
    if bank.dim() != dim {
        return Err(Error::ShapeMismatch {
            context: "build_queries bank",
            left: (bank.num_categories(), bank.dim()),
            right: (view.num_pixels(), dim),
        });
    }
    let num_stuff = bank.num_stuff();
    let mut rows = Vec::with_capacity((num_stuff + proposals.len()) * dim);
    let mut meta = Vec::with_capacity(num_stuff + proposals.len());
    for c in 0..num_stuff {
        rows.extend_from_slice(bank.vector(c));
        meta.push(QueryMeta {
            kind: QueryKind::Stuff,
            category: c as u16,
            bbox: None,
        });
    }

    let oracle_means = if oracle_queries {
        let scene = scene.ok_or(Error::MissingScene)?;
        Some((scene, mean_segment_embeddings(map, scene.segment_map())?))
    } else {
        None
    };

    for (pi, prop) in proposals.iter().enumerate() {
        let (sx, sy) = prop.seed;
        if sx >= view.width() || sy >= view.height() {
            return Err(Error::InvalidArgument(format!(
                "proposal {pi} seed ({sx}, {sy}) outside the image"
            )));
        }
        let bbox = match &oracle_means {
            Some((scene, means)) => {
                let gt_id = scene.segment_map()[scene.idx(sx, sy)];
                let record = scene
                    .segment(gt_id)
                    .filter(|r| r.is_thing)
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "proposal {pi} seed ({sx}, {sy}) is not on a thing mask"
                        ))
                    })?;
                rows.extend_from_slice(&means[&gt_id]);
                record.bbox
            }
            None => {
                rows.extend_from_slice(view.pixel(sx, sy));
                prop.bbox
            }
        };
        meta.push(QueryMeta {
            kind: QueryKind::Instance,
            category: prop.category,
            bbox: Some(bbox),
        });
    }

    Ok(QuerySet {
        matrix: DenseMatrix::from_vec(meta.len(), dim, rows)?,
        meta,
    })
}

/// Value written over similarities of (pixel, instance) pairs whose box
/// does not contain the pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OobScore {
    /// Literal zero, so an out-of-box instance can still win against
    /// negative-similarity queries.
    Zero,
    NegInf,
}

/// Final segmentation: per-pixel query assignment plus derived segments.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticPrediction {
    height: usize,
    width: usize,
    /// Query index per pixel, or [`VOID_ID`].
    assignment: Vec<u16>,
    queries: Vec<QueryMeta>,
    segments: Vec<SegmentRecord>,
}

impl PanopticPrediction {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn assignment(&self) -> &[u16] {
        &self.assignment
    }

    pub fn queries(&self) -> &[QueryMeta] {
        &self.queries
    }

    pub fn segments(&self) -> &[SegmentRecord] {
        &self.segments
    }

    /// Category of the pixel at flat index `i`, or [`VOID_ID`].
    pub fn category_at(&self, i: usize) -> u16 {
        match self.assignment[i] {
            VOID_ID => VOID_ID,
            q => self.queries[q as usize].category,
        }
    }

    fn derive_segments(
        height: usize,
        width: usize,
        assignment: &[u16],
        queries: &[QueryMeta],
    ) -> Vec<SegmentRecord> {
        let mut area = vec![0usize; queries.len()];
        let mut boxes: Vec<Option<BBox>> = vec![None; queries.len()];
        for y in 0..height {
            for x in 0..width {
                let q = assignment[y * width + x];
                if q == VOID_ID {
                    continue;
                }
                let q = q as usize;
                area[q] += 1;
                boxes[q] = Some(match boxes[q] {
                    None => BBox::new(x, y, x + 1, y + 1),
                    Some(b) => BBox::new(
                        b.x_min.min(x),
                        b.y_min.min(y),
                        b.x_max.max(x + 1),
                        b.y_max.max(y + 1),
                    ),
                });
            }
        }
        let mut segments = Vec::new();
        for (q, meta) in queries.iter().enumerate() {
            if let Some(bbox) = boxes[q] {
                segments.push(SegmentRecord {
                    segment_id: q as u16,
                    category: meta.category,
                    is_thing: meta.kind == QueryKind::Instance,
                    bbox,
                    area: area[q],
                });
            }
        }
        segments
    }

    /// Wrap a ground-truth scene as a prediction (identity segmentation);
    /// used to evaluate ground truth against itself.
    pub fn from_scene(scene: &PanopticScene) -> Self {
        let mut queries = Vec::with_capacity(scene.segments().len());
        let mut remap = std::collections::BTreeMap::new();
        for record in scene.segments() {
            remap.insert(record.segment_id, queries.len() as u16);
            queries.push(QueryMeta {
                kind: if record.is_thing {
                    QueryKind::Instance
                } else {
                    QueryKind::Stuff
                },
                category: record.category,
                bbox: record.is_thing.then_some(record.bbox),
            });
        }
        let assignment = scene
            .segment_map()
            .iter()
            .map(|s| if *s == VOID_ID { VOID_ID } else { remap[s] })
            .collect::<Vec<_>>();
        let segments =
            Self::derive_segments(scene.height(), scene.width(), &assignment, &queries);
        Self {
            height: scene.height(),
            width: scene.width(),
            assignment,
            queries,
            segments,
        }
    }

    /// Relabel query indices with a permutation (keeps the segmentation
    /// identical up to ids).
    pub fn permute_queries(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.queries.len() {
            return Err(Error::InvalidArgument(
                "permutation length mismatch".to_string(),
            ));
        }
        let mut queries = vec![
            QueryMeta {
                kind: QueryKind::Stuff,
                category: 0,
                bbox: None
            };
            self.queries.len()
        ];
        for (old, &new) in perm.iter().enumerate() {
            queries[new] = self.queries[old].clone();
        }
        let assignment: Vec<u16> = self
            .assignment
            .iter()
            .map(|&q| {
                if q == VOID_ID {
                    VOID_ID
                } else {
                    perm[q as usize] as u16
                }
            })
            .collect();
        let segments = Self::derive_segments(self.height, self.width, &assignment, &queries);
        Ok(Self {
            height: self.height,
            width: self.width,
            assignment,
            queries,
            segments,
        })
    }
}

/// Assign every pixel to the most similar query.
///
/// Computes the full pixel-by-query similarity matrix as a matrix product,
/// overwrites similarities of pixels outside each instance query's
/// (unexpanded) box, takes the per-pixel argmax with ties to the lowest
/// query index, and finally suppresses stuff categories whose assigned
/// area is below `min_stuff_area` to void.
pub fn assign(
    view: &NormalizedView,
    queries: &QuerySet,
    min_stuff_area: usize,
    oob_score: OobScore,
) -> Result<PanopticPrediction> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("empty query set".to_string()));
    }
    if queries.matrix.cols() != view.dim() {
        return Err(Error::ShapeMismatch {
            context: "assign",
            left: (view.num_pixels(), view.dim()),
            right: (queries.matrix.rows(), queries.matrix.cols()),
        });
    }
    let (h, w) = (view.height(), view.width());
    let num_q = queries.len();

    let pixels = view.as_matrix();
    let mut sims = matmul(&pixels, &queries.matrix.transpose())?;

    let oob = match oob_score {
        OobScore::Zero => 0.0,
        OobScore::NegInf => f64::NEG_INFINITY,
    };
    for (k, meta) in queries.meta.iter().enumerate() {
        if let Some(bbox) = meta.bbox {
            for y in 0..h {
                for x in 0..w {
                    if !bbox.contains(x, y) {
                        sims.set(y * w + x, k, oob);
                    }
                }
            }
        }
    }

    let mut assignment = vec![VOID_ID; h * w];
    for i in 0..h * w {
        let row = sims.row(i);
        let mut best = 0usize;
        for (k, s) in row.iter().enumerate().skip(1) {
            if *s > row[best] {
                best = k;
            }
        }
        assignment[i] = best as u16;
    }

    // Small-stuff suppression.
    let mut stuff_area = vec![0usize; num_q];
    for &q in &assignment {
        if queries.meta[q as usize].kind == QueryKind::Stuff {
            stuff_area[q as usize] += 1;
        }
    }
    let suppressed: Vec<bool> = (0..num_q)
        .map(|q| {
            queries.meta[q].kind == QueryKind::Stuff
                && stuff_area[q] > 0
                && stuff_area[q] < min_stuff_area
        })
        .collect();
    if suppressed.iter().any(|s| *s) {
        for a in &mut assignment {
            if *a != VOID_ID && suppressed[*a as usize] {
                *a = VOID_ID;
            }
        }
    }

    let segments =
        PanopticPrediction::derive_segments(h, w, &assignment, &queries.meta);
    Ok(PanopticPrediction {
        height: h,
        width: w,
        assignment,
        queries: queries.meta.clone(),
        segments,
    })
}

/// Thing category of each instance query, taken from its most similar
/// thing-class memory vector. Requires a bank trained with per-thing
/// categories.
pub fn classify_instances_from_embedding(
    queries: &QuerySet,
    bank: &MemoryBank,
) -> Result<Vec<u16>> {
    let thing_vectors = bank.thing_vectors()?;
    let dim = bank.dim();
    if queries.matrix.cols() != dim {
        return Err(Error::ShapeMismatch {
            context: "classify_instances",
            left: (queries.matrix.rows(), queries.matrix.cols()),
            right: (bank.num_categories(), dim),
        });
    }
    let num_thing = thing_vectors.len() / dim;
    let mut out = Vec::new();
    for (row, _) in queries.instance_rows() {
        let q = queries.matrix.row(row);
        let mut best = 0usize;
        let mut best_sim = f64::NEG_INFINITY;
        for t in 0..num_thing {
            let sim = crate::linalg::dot(q, &thing_vectors[t * dim..(t + 1) * dim]);
            if sim > best_sim {
                best_sim = sim;
                best = t;
            }
        }
        out.push((bank.num_stuff() + best) as u16);
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredMeta {
    version: String,
    height: i64,
    width: i64,
    void_id: u16,
    queries: Vec<QueryMeta>,
    segments: Vec<SegmentRecord>,
}

/// Write a prediction as `pred_meta.json` + `pred_segment.pgm` under `dir`.
pub fn prediction_to_files(pred: &PanopticPrediction, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = PredMeta {
        version: PRED_FORMAT_VERSION.to_string(),
        height: pred.height as i64,
        width: pred.width as i64,
        void_id: VOID_ID,
        queries: pred.queries.clone(),
        segments: pred.segments.clone(),
    };
    let mut json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Format(format!("pred meta serialization: {e}")))?;
    json.push('\n');
    fs::write(dir.join("pred_meta.json"), json)?;
    pgm::write_pgm16(
        &dir.join("pred_segment.pgm"),
        pred.width,
        pred.height,
        &pred.assignment,
    )?;
    Ok(())
}

/// Load a prediction written by [`prediction_to_files`], revalidating
/// raster/record consistency.
pub fn prediction_from_files(dir: &Path) -> Result<PanopticPrediction> {
    let meta_path = dir.join("pred_meta.json");
    let raw = fs::read_to_string(&meta_path)?;
    let meta: PredMeta = serde_json::from_str(&raw)
        .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
    if meta.version != PRED_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported prediction format version {:?}",
            meta.version
        )));
    }
    if meta.height <= 0 || meta.width <= 0 {
        return Err(Error::Format(format!(
            "non-positive prediction dimensions {}x{}",
            meta.width, meta.height
        )));
    }
    let (h, w) = (meta.height as usize, meta.width as usize);
    let (pw, ph, assignment) = pgm::read_pgm16(&dir.join("pred_segment.pgm"))?;
    if (pw, ph) != (w, h) {
        return Err(Error::Format(format!(
            "prediction raster {pw}x{ph} disagrees with meta {w}x{h}"
        )));
    }
    for (i, &q) in assignment.iter().enumerate() {
        if q != VOID_ID && q as usize >= meta.queries.len() {
            return Err(Error::Format(format!(
                "pixel {i} references query {q} but only {} exist",
                meta.queries.len()
            )));
        }
    }
    let derived =
        PanopticPrediction::derive_segments(h, w, &assignment, &meta.queries);
    if derived != meta.segments {
        return Err(Error::Format(
            "prediction segment records disagree with the raster".to_string(),
        ));
    }
    Ok(PanopticPrediction {
        height: h,
        width: w,
        assignment,
        queries: meta.queries,
        segments: meta.segments,
    })
}

/// Serialize proposals as a JSON array.
pub fn proposals_to_json(proposals: &[InstanceProposal]) -> Result<String> {
    let mut json = serde_json::to_string_pretty(proposals)
        .map_err(|e| Error::Format(format!("proposal serialization: {e}")))?;
    json.push('\n');
    Ok(json)
}

/// Parse proposals written by [`proposals_to_json`].
pub fn proposals_from_json(raw: &str) -> Result<Vec<InstanceProposal>> {
    serde_json::from_str(raw).map_err(|e| Error::Format(format!("proposal list: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, LabelSpace, SceneGenConfig};

    fn test_scene(seed: u64) -> PanopticScene {
        generate_scene(&SceneGenConfig {
            num_things: 3,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_noise_reproduces_gt_boxes() {
        let scene = test_scene(1);
        let props = simulate_proposals(&scene, &ProposalSimConfig::default()).unwrap();
        let things: Vec<_> = scene.thing_segments().collect();
        assert_eq!(props.len(), things.len());
        for (p, t) in props.iter().zip(&things) {
            assert_eq!(p.bbox, t.bbox);
            assert_eq!(p.category, t.category);
            let (sx, sy) = p.seed;
            assert_eq!(scene.segment_map()[scene.idx(sx, sy)], t.segment_id);
            assert!(p.bbox.contains(sx, sy));
        }
    }

    #[test]
    fn drop_probability_one_empties_the_list() {
        let scene = test_scene(2);
        let cfg = ProposalSimConfig {
            drop_prob: 1.0,
            ..Default::default()
        };
        assert!(simulate_proposals(&scene, &cfg).unwrap().is_empty());
    }

    #[test]
    fn noisy_seeds_stay_in_mask_and_box() {
        for seed in 0..10 {
            let scene = test_scene(seed);
            let cfg = ProposalSimConfig {
                center_jitter: 0.4,
                size_jitter: 0.4,
                seed,
                ..Default::default()
            };
            for p in simulate_proposals(&scene, &cfg).unwrap() {
                let (sx, sy) = p.seed;
                let seg = scene.segment_map()[scene.idx(sx, sy)];
                assert!(scene.segment(seg).unwrap().is_thing);
                assert!(p.bbox.contains(sx, sy));
            }
        }
    }

    #[test]
    fn queries_without_proposals_are_the_stuff_memories() {
        let scene = test_scene(3);
        let map = EmbeddingMap::init_random(scene.height(), scene.width(), 8, 0).unwrap();
        let view = map.normalize().unwrap();
        let bank = MemoryBank::init(scene.label_space(), 8, 10, 0).unwrap();
        let qs = build_queries(&view, &map, &[], &bank, None, false).unwrap();
        assert_eq!(qs.len(), scene.label_space().num_stuff);
        for (k, meta) in qs.meta.iter().enumerate() {
            assert_eq!(meta.kind, QueryKind::Stuff);
            assert_eq!(qs.matrix.row(k), bank.vector(k));
        }
    }

    #[test]
    fn standard_instance_row_is_the_seed_pixel() {
        let scene = test_scene(4);
        let map = EmbeddingMap::init_random(scene.height(), scene.width(), 8, 1).unwrap();
        let view = map.normalize().unwrap();
        let bank = MemoryBank::init(scene.label_space(), 8, 10, 0).unwrap();
        let props = simulate_proposals(&scene, &ProposalSimConfig::default()).unwrap();
        let qs = build_queries(&view, &map, &props, &bank, None, false).unwrap();
        for (j, p) in props.iter().enumerate() {
            let row = bank.num_stuff() + j;
            assert_eq!(qs.matrix.row(row), view.pixel(p.seed.0, p.seed.1));
        }
    }

    #[test]
    fn oracle_mode_needs_a_scene_and_uses_means() {
        let scene = test_scene(5);
        let map = EmbeddingMap::init_random(scene.height(), scene.width(), 8, 2).unwrap();
        let view = map.normalize().unwrap();
        let bank = MemoryBank::init(scene.label_space(), 8, 10, 0).unwrap();
        let props = simulate_proposals(&scene, &ProposalSimConfig::default()).unwrap();
        assert!(matches!(
            build_queries(&view, &map, &props, &bank, None, true),
            Err(Error::MissingScene)
        ));
        let qs = build_queries(&view, &map, &props, &bank, Some(&scene), true).unwrap();
        let means = mean_segment_embeddings(&map, scene.segment_map()).unwrap();
        for (j, p) in props.iter().enumerate() {
            let gt_id = scene.segment_map()[scene.idx(p.seed.0, p.seed.1)];
            let row = bank.num_stuff() + j;
            assert_eq!(qs.matrix.row(row), &means[&gt_id][..]);
            assert_eq!(
                qs.meta[row].bbox.unwrap(),
                scene.segment(gt_id).unwrap().bbox
            );
        }
    }

    fn handmade_view(pixels: Vec<Vec<f64>>, w: usize) -> NormalizedView {
        let h = pixels.len() / w;
        let dim = pixels[0].len();
        let mut data = Vec::new();
        for p in &pixels {
            data.extend(crate::linalg::l2_normalize(p).unwrap());
        }
        EmbeddingMap::from_parts(h, w, dim, data, 0)
            .unwrap()
            .normalize()
            .unwrap()
    }

    fn stuff_query(category: u16, v: Vec<f64>) -> (Vec<f64>, QueryMeta) {
        (
            v,
            QueryMeta {
                kind: QueryKind::Stuff,
                category,
                bbox: None,
            },
        )
    }

    fn query_set(rows: Vec<(Vec<f64>, QueryMeta)>) -> QuerySet {
        let dim = rows[0].0.len();
        let mut data = Vec::new();
        let mut meta = Vec::new();
        for (v, m) in rows {
            data.extend(crate::linalg::l2_normalize(&v).unwrap());
            meta.push(m);
        }
        QuerySet {
            matrix: DenseMatrix::from_vec(meta.len(), dim, data).unwrap(),
            meta,
        }
    }

    #[test]
    fn single_stuff_query_takes_every_pixel() {
        let view = handmade_view(vec![vec![1.0, 0.0]; 16], 4);
        let qs = query_set(vec![stuff_query(0, vec![0.0, 1.0])]);
        let pred = assign(&view, &qs, 0, OobScore::Zero).unwrap();
        assert!(pred.assignment().iter().all(|&a| a == 0));
        assert_eq!(pred.segments().len(), 1);
        assert_eq!(pred.segments()[0].area, 16);
    }

    #[test]
    fn forced_zero_beats_negative_stuff_similarity() {
        // The stuff query is antipodal to the pixel (similarity -1); an
        // instance whose box excludes the pixel is forced to 0 and wins.
        let view = handmade_view(vec![vec![1.0, 0.0], vec![1.0, 0.0]], 2);
        let qs = query_set(vec![
            stuff_query(0, vec![-1.0, 0.0]),
            (
                vec![0.0, 1.0],
                QueryMeta {
                    kind: QueryKind::Instance,
                    category: 1,
                    bbox: Some(BBox::new(1, 0, 2, 1)),
                },
            ),
        ]);
        let pred = assign(&view, &qs, 0, OobScore::Zero).unwrap();
        // Pixel 0 is outside the instance box: sims are {-1, 0} -> instance.
        assert_eq!(pred.assignment()[0], 1);
        // With -inf out-of-box scoring the stuff query wins instead.
        let pred = assign(&view, &qs, 0, OobScore::NegInf).unwrap();
        assert_eq!(pred.assignment()[0], 0);
    }

    #[test]
    fn split_halves_assign_exactly() {
        let mut pixels = Vec::new();
        for y in 0..8 {
            for x in 0..8 {
                let _ = y;
                pixels.push(if x < 4 {
                    vec![1.0, 0.0]
                } else {
                    vec![0.0, 1.0]
                });
            }
        }
        let view = handmade_view(pixels, 8);
        let qs = query_set(vec![
            stuff_query(0, vec![1.0, 0.0]),
            stuff_query(1, vec![0.0, 1.0]),
        ]);
        let pred = assign(&view, &qs, 0, OobScore::Zero).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expect = if x < 4 { 0 } else { 1 };
                assert_eq!(pred.assignment()[y * 8 + x], expect);
            }
        }
    }

    #[test]
    fn small_stuff_goes_to_void() {
        let mut pixels = vec![vec![1.0, 0.0]; 16];
        pixels[5] = vec![0.0, 1.0];
        let view = handmade_view(pixels, 4);
        let qs = query_set(vec![
            stuff_query(0, vec![1.0, 0.0]),
            stuff_query(1, vec![0.0, 1.0]),
        ]);
        let pred = assign(&view, &qs, 2, OobScore::Zero).unwrap();
        assert_eq!(pred.assignment()[5], VOID_ID);
        assert_eq!(pred.segments().len(), 1);
        assert_eq!(pred.category_at(5), VOID_ID);
    }

    #[test]
    fn embedding_classification_matches_brute_force() {
        let space = LabelSpace {
            num_stuff: 2,
            num_thing: 3,
            merge_things: false,
        };
        let bank = MemoryBank::init(&space, 6, 10, 9).unwrap();
        // Query rows equal to each thing memory in turn must classify as it.
        for t in 0..3 {
            let qs = query_set(vec![(
                bank.vector(2 + t).to_vec(),
                QueryMeta {
                    kind: QueryKind::Instance,
                    category: 2,
                    bbox: Some(BBox::new(0, 0, 1, 1)),
                },
            )]);
            let got = classify_instances_from_embedding(&qs, &bank).unwrap();
            assert_eq!(got, vec![(2 + t) as u16]);
        }
        // Random queries agree with an exhaustive scan.
        let map = EmbeddingMap::init_random(2, 3, 6, 3).unwrap();
        let view = map.normalize().unwrap();
        let rows: Vec<(Vec<f64>, QueryMeta)> = (0..6)
            .map(|i| {
                (
                    view.pixel_flat(i).to_vec(),
                    QueryMeta {
                        kind: QueryKind::Instance,
                        category: 2,
                        bbox: Some(BBox::new(0, 0, 1, 1)),
                    },
                )
            })
            .collect();
        let qs = query_set(rows);
        let got = classify_instances_from_embedding(&qs, &bank).unwrap();
        for (i, cat) in got.iter().enumerate() {
            let mut best = (f64::NEG_INFINITY, 0u16);
            for t in 0..3u16 {
                let sim =
                    crate::linalg::dot(qs.matrix.row(i), bank.vector(2 + t as usize));
                if sim > best.0 {
                    best = (sim, 2 + t);
                }
            }
            assert_eq!(*cat, best.1);
        }
        // Merged banks cannot classify.
        let merged = MemoryBank::init(
            &LabelSpace {
                num_stuff: 2,
                num_thing: 3,
                merge_things: true,
            },
            6,
            10,
            0,
        )
        .unwrap();
        assert!(matches!(
            classify_instances_from_embedding(&qs, &merged),
            Err(Error::MergedBank)
        ));
    }

    #[test]
    fn prediction_file_round_trip() {
        let scene = test_scene(6);
        let pred = PanopticPrediction::from_scene(&scene);
        let dir = std::env::temp_dir().join("ciae_pred_rt");
        prediction_to_files(&pred, &dir).unwrap();
        let back = prediction_from_files(&dir).unwrap();
        assert_eq!(pred, back);
    }
}

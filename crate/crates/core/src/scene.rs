//! Ground-truth panoptic scenes and a deterministic synthetic generator.
//!
//! A scene holds two id rasters (semantic category and segment id) plus one
//! record per segment. Stuff categories occupy ids `0..num_stuff`; thing
//! categories follow. Stuff segments reuse their category id as segment id;
//! thing instances get contiguous ids starting at `num_stuff`.
//!
//! The generator paints horizontal stuff bands and overlays thing shapes
//! with painter's-algorithm occlusion (later things on top), so overlapping
//! instances produce the partial masks that box filtering and fusion have
//! to handle.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgm;

/// Sentinel id for unlabeled pixels in both rasters.
pub const VOID_ID: u16 = u16::MAX;

/// Version tag written into scene `meta.json`.
pub const SCENE_FORMAT_VERSION: &str = "ciae-scene/1";

/// Things painted with fewer visible pixels than this are dropped, so
/// occlusion never leaves degenerate slivers in the loss statistics.
pub const MIN_THING_AREA: usize = 4;

/// Category layout: stuff ids `0..num_stuff`, thing ids
/// `num_stuff..num_stuff + num_thing`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpace {
    pub num_stuff: usize,
    pub num_thing: usize,
    /// Collapse every thing category into one class for category-level
    /// queries; instance categories then come from the detector side.
    pub merge_things: bool,
}

impl LabelSpace {
    pub fn num_categories(&self) -> usize {
        self.num_stuff + self.num_thing
    }

    pub fn is_thing_category(&self, category: u16) -> bool {
        (category as usize) >= self.num_stuff
            && (category as usize) < self.num_categories()
    }

    /// Number of category-level query slots (memory bank size).
    pub fn query_count(&self) -> usize {
        if self.merge_things {
            self.num_stuff + 1
        } else {
            self.num_stuff + self.num_thing
        }
    }

    /// Category-level query index for a semantic category.
    pub fn query_index(&self, category: u16) -> usize {
        if self.merge_things && self.is_thing_category(category) {
            self.num_stuff
        } else {
            category as usize
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_stuff == 0 {
            return Err(Error::InvalidArgument(
                "label space needs at least one stuff category".to_string(),
            ));
        }
        if self.num_categories() >= VOID_ID as usize {
            return Err(Error::InvalidArgument(
                "label space exceeds the 16-bit id range".to_string(),
            ));
        }
        Ok(())
    }
}

/// Axis-aligned pixel box, half-open: `x_min <= x < x_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> usize {
        self.x_max.saturating_sub(self.x_min)
    }

    pub fn height(&self) -> usize {
        self.y_max.saturating_sub(self.y_min)
    }

    pub fn is_empty(&self) -> bool {
        self.x_min >= self.x_max || self.y_min >= self.y_max
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    /// Grow by `factor` about the box center and clip to the image.
    /// Returns real-valued half-open bounds; an integer pixel (x, y) lies
    /// inside iff `x0 <= x < x1 && y0 <= y < y1`.
    pub fn expanded(&self, factor: f64, img_w: usize, img_h: usize) -> (f64, f64, f64, f64) {
        let cx = (self.x_min + self.x_max) as f64 / 2.0;
        let cy = (self.y_min + self.y_max) as f64 / 2.0;
        let hw = self.width() as f64 * factor / 2.0;
        let hh = self.height() as f64 * factor / 2.0;
        (
            (cx - hw).max(0.0),
            (cy - hh).max(0.0),
            (cx + hw).min(img_w as f64),
            (cy + hh).min(img_h as f64),
        )
    }

    /// Center in pixel coordinates.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) as f64 / 2.0,
            (self.y_min + self.y_max) as f64 / 2.0,
        )
    }

    fn union(&self, x: usize, y: usize) -> Self {
        Self {
            x_min: self.x_min.min(x),
            y_min: self.y_min.min(y),
            x_max: self.x_max.max(x + 1),
            y_max: self.y_max.max(y + 1),
        }
    }
}

impl From<[usize; 4]> for BBox {
    fn from(v: [usize; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [usize; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

/// One ground-truth segment: a stuff region or a thing instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRecord {
    pub segment_id: u16,
    pub category: u16,
    pub is_thing: bool,
    pub bbox: BBox,
    pub area: usize,
}

/// Ground truth for one image: consistent semantic and segment rasters plus
/// per-segment records. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticScene {
    height: usize,
    width: usize,
    semantic_map: Vec<u16>,
    segment_map: Vec<u16>,
    segments: Vec<SegmentRecord>,
    label_space: LabelSpace,
    void_id: u16,
}

impl PanopticScene {
    /// Assemble and validate a scene. Checks raster/record consistency:
    /// every non-void pixel belongs to a known segment whose category
    /// matches the semantic raster, areas and bboxes match the rasters,
    /// stuff segments reuse their category id, and thing ids are contiguous
    /// from `num_stuff`.
    pub fn from_parts(
        height: usize,
        width: usize,
        semantic_map: Vec<u16>,
        segment_map: Vec<u16>,
        segments: Vec<SegmentRecord>,
        label_space: LabelSpace,
    ) -> Result<Self> {
        label_space.validate()?;
        if semantic_map.len() != height * width || segment_map.len() != height * width {
            return Err(Error::Format(format!(
                "raster length {}/{} does not match {height}x{width}",
                semantic_map.len(),
                segment_map.len()
            )));
        }
        let by_id: BTreeMap<u16, &SegmentRecord> =
            segments.iter().map(|s| (s.segment_id, s)).collect();
        if by_id.len() != segments.len() {
            return Err(Error::Format("duplicate segment id".to_string()));
        }

        let mut areas: BTreeMap<u16, usize> = BTreeMap::new();
        let mut boxes: BTreeMap<u16, BBox> = BTreeMap::new();
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                let seg = segment_map[i];
                if seg == VOID_ID {
                    if semantic_map[i] != VOID_ID {
                        return Err(Error::Format(format!(
                            "pixel ({x}, {y}) is void in segment raster but not semantic"
                        )));
                    }
                    continue;
                }
                let record = by_id.get(&seg).ok_or_else(|| {
                    Error::Format(format!(
                        "segment id {seg} at pixel ({x}, {y}) has no segment record"
                    ))
                })?;
                if record.category != semantic_map[i] {
                    return Err(Error::Format(format!(
                        "pixel ({x}, {y}): semantic id {} disagrees with segment {} of category {}",
                        semantic_map[i], seg, record.category
                    )));
                }
                *areas.entry(seg).or_insert(0) += 1;
                boxes
                    .entry(seg)
                    .and_modify(|b| *b = b.union(x, y))
                    .or_insert_with(|| BBox::new(x, y, x + 1, y + 1));
            }
        }

        let mut next_thing = label_space.num_stuff as u16;
        for record in &segments {
            let area = areas.get(&record.segment_id).copied().unwrap_or(0);
            if area == 0 {
                return Err(Error::Format(format!(
                    "segment {} has no pixels",
                    record.segment_id
                )));
            }
            if area != record.area {
                return Err(Error::Format(format!(
                    "segment {}: recorded area {} but raster has {area}",
                    record.segment_id, record.area
                )));
            }
            if boxes[&record.segment_id] != record.bbox {
                return Err(Error::Format(format!(
                    "segment {}: bbox does not tightly bound its mask",
                    record.segment_id
                )));
            }
            if record.is_thing != label_space.is_thing_category(record.category) {
                return Err(Error::Format(format!(
                    "segment {}: thing flag disagrees with category {}",
                    record.segment_id, record.category
                )));
            }
            if record.is_thing {
                if record.segment_id != next_thing {
                    return Err(Error::Format(format!(
                        "thing segment ids must be contiguous from {}; found {}",
                        label_space.num_stuff, record.segment_id
                    )));
                }
                next_thing += 1;
            } else if record.segment_id != record.category {
                return Err(Error::Format(format!(
                    "stuff segment {} must reuse its category id {}",
                    record.segment_id, record.category
                )));
            }
        }

        Ok(Self {
            height,
            width,
            semantic_map,
            segment_map,
            segments,
            label_space,
        void_id: VOID_ID,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn semantic_map(&self) -> &[u16] {
        &self.semantic_map
    }

    pub fn segment_map(&self) -> &[u16] {
        &self.segment_map
    }

    pub fn segments(&self) -> &[SegmentRecord] {
        &self.segments
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    pub fn void_id(&self) -> u16 {
        self.void_id
    }

    pub fn segment(&self, id: u16) -> Option<&SegmentRecord> {
        self.segments.iter().find(|s| s.segment_id == id)
    }

    /// Thing segments in ascending segment-id order.
    pub fn thing_segments(&self) -> impl Iterator<Item = &SegmentRecord> {
        self.segments.iter().filter(|s| s.is_thing)
    }

    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }
}

/// Thing silhouette family for the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThingShape {
    Rectangle,
    Ellipse,
}

/// Synthetic scene parameters. Deterministic per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneGenConfig {
    pub height: usize,
    pub width: usize,
    /// Number of horizontal stuff bands; each band is its own category.
    pub num_stuff_regions: usize,
    /// Number of thing instances painted on top of the bands.
    pub num_things: usize,
    /// Number of distinct thing categories instances draw from.
    pub num_thing_categories: usize,
    pub thing_shape: ThingShape,
    /// Thing extent as a fraction of each image dimension, `(min, max]`.
    pub size_range: (f64, f64),
    pub merge_things: bool,
    pub seed: u64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            num_stuff_regions: 3,
            num_things: 4,
            num_thing_categories: 3,
            thing_shape: ThingShape::Rectangle,
            size_range: (0.2, 0.45),
            merge_things: true,
            seed: 0,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InfeasibleConfig("image has zero area".to_string()));
        }
        if self.num_stuff_regions == 0 {
            return Err(Error::InfeasibleConfig(
                "need at least one stuff region".to_string(),
            ));
        }
        if self.num_stuff_regions > self.height {
            return Err(Error::InfeasibleConfig(format!(
                "{} stuff bands do not fit {} rows",
                self.num_stuff_regions, self.height
            )));
        }
        if self.num_things > 0 && self.num_thing_categories == 0 {
            return Err(Error::InfeasibleConfig(
                "things requested but no thing categories".to_string(),
            ));
        }
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::InfeasibleConfig(format!(
                "size range ({lo}, {hi}) must satisfy 0 < min <= max <= 1"
            )));
        }
        Ok(())
    }

    pub fn label_space(&self) -> LabelSpace {
        LabelSpace {
            num_stuff: self.num_stuff_regions,
            num_thing: self.num_thing_categories,
            merge_things: self.merge_things,
        }
    }
}

/// Generate a scene: horizontal stuff bands, then things painted in order
/// with later instances occluding earlier ones. Things reduced below
/// [`MIN_THING_AREA`] visible pixels are dropped and the surviving ids are
/// re-compacted; bboxes are recomputed from the final visible masks.
pub fn generate_scene(cfg: &SceneGenConfig) -> Result<PanopticScene> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let label_space = cfg.label_space();
    let num_stuff = cfg.num_stuff_regions;

    // Stuff bands: band b covers rows [b*h/nb, (b+1)*h/nb).
    let band_of_row = |y: usize| -> u16 {
        let nb = num_stuff;
        // Inverse of the band partition below; linear scan keeps it simple.
        for b in 0..nb {
            if y >= b * h / nb && y < (b + 1) * h / nb {
                return b as u16;
            }
        }
        (nb - 1) as u16
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Draw all thing shapes first, then paint in order (later on top).
    struct Painted {
        category: u16,
        mask: Vec<bool>,
    }
    let mut painted: Vec<Painted> = Vec::with_capacity(cfg.num_things);
    for _ in 0..cfg.num_things {
        let fw: f64 = rng.random_range(cfg.size_range.0..=cfg.size_range.1);
        let fh: f64 = rng.random_range(cfg.size_range.0..=cfg.size_range.1);
        let tw = ((fw * w as f64).round() as usize).clamp(1, w);
        let th = ((fh * h as f64).round() as usize).clamp(1, h);
        let x0 = rng.random_range(0..=(w - tw));
        let y0 = rng.random_range(0..=(h - th));
        let category = (num_stuff + rng.random_range(0..cfg.num_thing_categories)) as u16;

        let mut mask = vec![false; h * w];
        match cfg.thing_shape {
            ThingShape::Rectangle => {
                for y in y0..y0 + th {
                    for x in x0..x0 + tw {
                        mask[y * w + x] = true;
                    }
                }
            }
            ThingShape::Ellipse => {
                let cx = x0 as f64 + tw as f64 / 2.0;
                let cy = y0 as f64 + th as f64 / 2.0;
                let rx = tw as f64 / 2.0;
                let ry = th as f64 / 2.0;
                for y in y0..y0 + th {
                    for x in x0..x0 + tw {
                        let dx = (x as f64 + 0.5 - cx) / rx;
                        let dy = (y as f64 + 0.5 - cy) / ry;
                        if dx * dx + dy * dy <= 1.0 {
                            mask[y * w + x] = true;
                        }
                    }
                }
            }
        }
        painted.push(Painted { category, mask });
    }

    // Overlay pass: topmost thing wins each pixel.
    let overlay = |keep: &[bool]| -> Vec<Option<usize>> {
        let mut top: Vec<Option<usize>> = vec![None; h * w];
        for (t, p) in painted.iter().enumerate() {
            if !keep[t] {
                continue;
            }
            for (i, covered) in p.mask.iter().enumerate() {
                if *covered {
                    top[i] = Some(t);
                }
            }
        }
        top
    };

    // Drop things whose visible area (under the full overlay) is below the
    // minimum; evaluated once, no resurrection of dropped instances.
    let all = vec![true; painted.len()];
    let top_full = overlay(&all);
    let mut visible = vec![0usize; painted.len()];
    for t in top_full.iter().flatten() {
        visible[*t] += 1;
    }
    let keep: Vec<bool> = visible.iter().map(|v| *v >= MIN_THING_AREA).collect();
    let top = overlay(&keep);

    // Compact surviving ids in paint order.
    let mut final_id = vec![u16::MAX; painted.len()];
    let mut next = num_stuff as u16;
    for (t, k) in keep.iter().enumerate() {
        if *k {
            final_id[t] = next;
            next += 1;
        }
    }

    let mut semantic_map = vec![0u16; h * w];
    let mut segment_map = vec![0u16; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            match top[i] {
                Some(t) => {
                    segment_map[i] = final_id[t];
                    semantic_map[i] = painted[t].category;
                }
                None => {
                    let band = band_of_row(y);
                    segment_map[i] = band;
                    semantic_map[i] = band;
                }
            }
        }
    }

    // Records: stuff bands (ascending category), then things (ascending id).
    let mut areas: BTreeMap<u16, usize> = BTreeMap::new();
    let mut boxes: BTreeMap<u16, BBox> = BTreeMap::new();
    for y in 0..h {
        for x in 0..w {
            let seg = segment_map[y * w + x];
            *areas.entry(seg).or_insert(0) += 1;
            boxes
                .entry(seg)
                .and_modify(|b| *b = b.union(x, y))
                .or_insert_with(|| BBox::new(x, y, x + 1, y + 1));
        }
    }
    let mut segments = Vec::new();
    for b in 0..num_stuff as u16 {
        if let Some(&area) = areas.get(&b) {
            segments.push(SegmentRecord {
                segment_id: b,
                category: b,
                is_thing: false,
                bbox: boxes[&b],
                area,
            });
        }
    }
    for (t, p) in painted.iter().enumerate() {
        if keep[t] {
            let id = final_id[t];
            segments.push(SegmentRecord {
                segment_id: id,
                category: p.category,
                is_thing: true,
                bbox: boxes[&id],
                area: areas[&id],
            });
        }
    }

    PanopticScene::from_parts(h, w, semantic_map, segment_map, segments, label_space)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneMeta {
    version: String,
    height: i64,
    width: i64,
    void_id: u16,
    label_space: LabelSpace,
    segments: Vec<SegmentRecord>,
}

/// Write a scene as `meta.json` + `semantic.pgm` + `segment.pgm` under `dir`.
pub fn scene_to_files(scene: &PanopticScene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = SceneMeta {
        version: SCENE_FORMAT_VERSION.to_string(),
        height: scene.height as i64,
        width: scene.width as i64,
        void_id: scene.void_id,
        label_space: scene.label_space,
        segments: scene.segments.clone(),
    };
    let mut json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Format(format!("meta serialization: {e}")))?;
    json.push('\n');
    fs::write(dir.join("meta.json"), json)?;
    pgm::write_pgm16(
        &dir.join("semantic.pgm"),
        scene.width,
        scene.height,
        &scene.semantic_map,
    )?;
    pgm::write_pgm16(
        &dir.join("segment.pgm"),
        scene.width,
        scene.height,
        &scene.segment_map,
    )?;
    Ok(())
}

/// Load a scene written by [`scene_to_files`], re-validating every
/// consistency invariant.
pub fn scene_from_files(dir: &Path) -> Result<PanopticScene> {
    let meta_path = dir.join("meta.json");
    let raw = fs::read_to_string(&meta_path)?;
    let meta: SceneMeta = serde_json::from_str(&raw)
        .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
    if meta.version != SCENE_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported scene format version {:?}",
            meta.version
        )));
    }
    if meta.height <= 0 || meta.width <= 0 {
        return Err(Error::Format(format!(
            "non-positive scene dimensions {}x{}",
            meta.width, meta.height
        )));
    }
    if meta.void_id != VOID_ID {
        return Err(Error::Format(format!(
            "unsupported void id {}",
            meta.void_id
        )));
    }
    let (h, w) = (meta.height as usize, meta.width as usize);
    let (sw, sh, semantic) = pgm::read_pgm16(&dir.join("semantic.pgm"))?;
    let (gw, gh, segment) = pgm::read_pgm16(&dir.join("segment.pgm"))?;
    if (sw, sh) != (w, h) || (gw, gh) != (w, h) {
        return Err(Error::Format(format!(
            "raster dimensions {sw}x{sh}/{gw}x{gh} disagree with meta {w}x{h}"
        )));
    }
    PanopticScene::from_parts(h, w, semantic, segment, meta.segments, meta.label_space)
}

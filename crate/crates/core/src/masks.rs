//! Binary proxy masks: bounding-box binarization of attention maps and
//! user-supplied layout constraints.

use std::fmt::Write as _;
use std::path::Path;

use crate::attention::ConceptSet;
use crate::error::{Error, Result};
use crate::losses;
use crate::pgm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where a mask came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    /// Bounding-box binarization of an attention map.
    Derived,
    /// Supplied by the user as a layout constraint; held fixed across steps.
    UserLayout,
}

/// Per-concept r-by-r binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    grid: Vec<u8>,
    resolution: usize,
    pub concept_name: String,
    pub source: MaskSource,
    /// Denoising step the mask was produced at.
    pub timestep: usize,
}

impl BinaryMask {
    pub fn empty(concept_name: &str, timestep: usize, resolution: usize) -> Self {
        Self {
            grid: vec![0; resolution * resolution],
            resolution,
            concept_name: concept_name.to_string(),
            source: MaskSource::Derived,
            timestep,
        }
    }

    /// Mask filled with a rectangle given as inclusive (r0, c0, r1, c1).
    pub fn from_rect(
        concept_name: &str,
        timestep: usize,
        resolution: usize,
        rect: (usize, usize, usize, usize),
    ) -> Result<Self> {
        let (r0, c0, r1, c1) = rect;
        if r0 > r1 || c0 > c1 || r1 >= resolution || c1 >= resolution {
            return Err(Error::InvalidParam {
                name: "BinaryMask",
                reason: format!(
                    "rect ({r0},{c0})..({r1},{c1}) out of bounds for resolution {resolution}"
                ),
            });
        }
        let mut grid = vec![0u8; resolution * resolution];
        for i in r0..=r1 {
            for j in c0..=c1 {
                grid[i * resolution + j] = 1;
            }
        }
        Ok(Self {
            grid,
            resolution,
            concept_name: concept_name.to_string(),
            source: MaskSource::Derived,
            timestep,
        })
    }

    /// Builds a mask from 0/1 cell values.
    pub fn from_bits(
        concept_name: &str,
        timestep: usize,
        resolution: usize,
        bits: Vec<u8>,
    ) -> Result<Self> {
        if bits.len() != resolution * resolution {
            return Err(Error::DataLength {
                shape: vec![resolution, resolution],
                expected: resolution * resolution,
                got: bits.len(),
            });
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidParam {
                name: "BinaryMask",
                reason: "mask entries must be 0 or 1".into(),
            });
        }
        Ok(Self {
            grid: bits,
            resolution,
            concept_name: concept_name.to_string(),
            source: MaskSource::Derived,
            timestep,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.grid[row * self.resolution + col] == 1
    }

    pub fn count(&self) -> usize {
        self.grid.iter().filter(|&&b| b == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.iter().all(|&b| b == 0)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .grid
            .iter()
            .map(|&b| if b == 1 { T::one() } else { T::zero() })
            .collect();
        Tensor::new(vec![self.grid.len()], data).expect("bits are finite")
    }

    pub fn with_source(mut self, source: MaskSource) -> Self {
        self.source = source;
        self
    }

    pub fn with_timestep(mut self, timestep: usize) -> Self {
        self.timestep = timestep;
        self
    }
}

/// Which supra-threshold cells seed the bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BboxRule {
    /// All supra-threshold cells (the tightest rectangle containing every
    /// one of them).
    Union,
    /// Only the largest 4-connected cluster of supra-threshold cells, ties
    /// broken by scan order. On noisy maps the union rectangle degenerates
    /// to the whole grid while the largest cluster stays local; on
    /// content-peaked maps both rules agree on the active blob.
    LargestCluster,
}

/// Binarizes a normalized map by the bounding-box rule: cells at or above
/// `tau_frac * max` seed the tightest axis-aligned rectangle around them,
/// which is filled with ones. An all-zero map yields an empty mask.
pub fn binarize_bbox<T: Scalar>(
    map: &[T],
    resolution: usize,
    tau_frac: T,
    concept_name: &str,
    timestep: usize,
) -> Result<BinaryMask> {
    binarize_bbox_with(
        map,
        resolution,
        tau_frac,
        BboxRule::Union,
        concept_name,
        timestep,
    )
}

/// [`binarize_bbox`] with an explicit seeding rule.
pub fn binarize_bbox_with<T: Scalar>(
    map: &[T],
    resolution: usize,
    tau_frac: T,
    rule: BboxRule,
    concept_name: &str,
    timestep: usize,
) -> Result<BinaryMask> {
    if map.len() != resolution * resolution {
        return Err(Error::DataLength {
            shape: vec![resolution, resolution],
            expected: resolution * resolution,
            got: map.len(),
        });
    }
    if !(tau_frac > T::zero() && tau_frac < T::one()) {
        return Err(Error::InvalidParam {
            name: "tau_frac",
            reason: format!("must lie in (0, 1), got {tau_frac}"),
        });
    }
    let tol = T::cast(1e-9);
    if map.iter().any(|&v| v < -tol || v > T::one() + tol) {
        return Err(Error::InvalidParam {
            name: "binarize_bbox",
            reason: "map must be normalized to [0, 1]".into(),
        });
    }
    let max = map.iter().fold(T::zero(), |m, &v| m.max(v));
    if max <= T::zero() {
        return Ok(BinaryMask::empty(concept_name, timestep, resolution));
    }
    let tau = tau_frac * max;
    let supra: Vec<bool> = map.iter().map(|&v| v >= tau).collect();
    let seeds: Vec<usize> = match rule {
        BboxRule::Union => (0..supra.len()).filter(|&i| supra[i]).collect(),
        BboxRule::LargestCluster => largest_cluster(&supra, resolution),
    };
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for idx in seeds {
        let (i, j) = (idx / resolution, idx % resolution);
        bounds = Some(match bounds {
            None => (i, j, i, j),
            Some((r0, c0, r1, c1)) => (r0.min(i), c0.min(j), r1.max(i), c1.max(j)),
        });
    }
    match bounds {
        Some(rect) => BinaryMask::from_rect(concept_name, timestep, resolution, rect),
        None => Ok(BinaryMask::empty(concept_name, timestep, resolution)),
    }
}

/// Cells of the largest 4-connected component of `set`, ties broken by the
/// component whose first cell comes earliest in scan order.
fn largest_cluster(set: &[bool], resolution: usize) -> Vec<usize> {
    let mut visited = vec![false; set.len()];
    let mut best: Vec<usize> = Vec::new();
    for start in 0..set.len() {
        if !set[start] || visited[start] {
            continue;
        }
        let mut cluster = vec![start];
        let mut stack = vec![start];
        visited[start] = true;
        while let Some(idx) = stack.pop() {
            let (i, j) = (idx / resolution, idx % resolution);
            let mut push = |ni: usize, nj: usize| {
                let n = ni * resolution + nj;
                if set[n] && !visited[n] {
                    visited[n] = true;
                    cluster.push(n);
                    stack.push(n);
                }
            };
            if i > 0 {
                push(i - 1, j);
            }
            if i + 1 < resolution {
                push(i + 1, j);
            }
            if j > 0 {
                push(i, j - 1);
            }
            if j + 1 < resolution {
                push(i, j + 1);
            }
        }
        if cluster.len() > best.len() {
            best = cluster;
        }
    }
    best
}

/// Warning raised while loading a layout: two concepts' boxes overlap.
#[derive(Debug, Clone)]
pub struct LayoutWarning {
    pub first: String,
    pub second: String,
    /// Soft IoU of the two masks (> 0 by construction of the warning).
    pub overlap: f64,
}

impl std::fmt::Display for LayoutWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "layout masks for `{}` and `{}` overlap (soft IoU {:.4})",
            self.first, self.second, self.overlap
        )
    }
}

/// Loads user layout masks from a line-oriented file.
///
/// Grammar (one entry per line, `#` comments and blank lines ignored):
///
/// ```text
/// <concept>: rect <r0> <c0> <r1> <c1>     # inclusive grid coordinates
/// <concept>: bitmap <path-to-pgm>         # grayscale, binarized at 0.5
/// ```
///
/// Every concept in `concepts` must be covered exactly once. Bitmap paths
/// are resolved relative to the layout file. Overlapping masks are accepted
/// and reported as warnings.
pub fn load_layout_masks<T: Scalar, P: AsRef<Path>>(
    path: P,
    concepts: &ConceptSet<T>,
    resolution: usize,
) -> Result<(Vec<BinaryMask>, Vec<LayoutWarning>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let display = path.display().to_string();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let mut slots: Vec<Option<BinaryMask>> = vec![None; concepts.len()];
    for (lineno, raw) in text.lines().enumerate() {
        let line_id = lineno + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::LayoutParse {
            path: display.clone(),
            line: line_id,
            msg,
        };
        let (name, spec) = line.split_once(':').ok_or_else(|| {
            parse_err("expected `<concept>: rect ...` or `<concept>: bitmap ...`".into())
        })?;
        let name = name.trim();
        let idx = concepts
            .index_of(name)
            .ok_or_else(|| Error::UnknownConcept { name: name.into() })?;
        if slots[idx].is_some() {
            return Err(parse_err(format!("concept `{name}` listed twice")));
        }
        let tokens: Vec<&str> = spec.split_whitespace().collect();
        let mask = match tokens.as_slice() {
            ["rect", r0, c0, r1, c1] => {
                let parse = |t: &str| -> Result<usize> {
                    t.parse()
                        .map_err(|_| parse_err(format!("`{t}` is not a grid coordinate")))
                };
                let rect = (parse(r0)?, parse(c0)?, parse(r1)?, parse(c1)?);
                BinaryMask::from_rect(name, 0, resolution, rect)
                    .map_err(|e| parse_err(e.to_string()))?
            }
            ["bitmap", file] => {
                let img = pgm::read(base.join(file))?;
                if img.width != resolution || img.height != resolution {
                    return Err(parse_err(format!(
                        "bitmap is {}x{}, expected {resolution}x{resolution}",
                        img.width, img.height
                    )));
                }
                let bits = (0..img.pixels.len())
                    .map(|i| u8::from(img.normalized(i) >= 0.5))
                    .collect();
                BinaryMask::from_bits(name, 0, resolution, bits)?
            }
            _ => {
                return Err(parse_err(format!(
                    "unrecognized mask spec `{}`",
                    spec.trim()
                )))
            }
        };
        slots[idx] = Some(mask.with_source(MaskSource::UserLayout));
    }

    let mut missing = String::new();
    for (i, slot) in slots.iter().enumerate() {
        if slot.is_none() {
            if !missing.is_empty() {
                missing.push_str(", ");
            }
            let _ = write!(missing, "`{}`", concepts.name(i));
        }
    }
    if !missing.is_empty() {
        return Err(Error::InvalidParam {
            name: "layout",
            reason: format!("no mask given for {missing}"),
        });
    }
    let masks: Vec<BinaryMask> = slots.into_iter().map(|s| s.unwrap()).collect();

    let mut warnings = Vec::new();
    for i in 0..masks.len() {
        for j in (i + 1)..masks.len() {
            let a = masks[i].to_tensor::<f64>();
            let b = masks[j].to_tensor::<f64>();
            let iou = losses::soft_iou(a.data(), b.data())?;
            if iou.value > 0.0 {
                warnings.push(LayoutWarning {
                    first: masks[i].concept_name.clone(),
                    second: masks[j].concept_name.clone(),
                    overlap: iou.value,
                });
            }
        }
    }
    Ok((masks, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::ConceptSet;
    use proptest::prelude::*;

    #[test]
    fn single_peak_gives_singleton_box() {
        let r = 8;
        let mut map = vec![0.0f64; r * r];
        map[5 * r + 5] = 1.0;
        let mask = binarize_bbox(&map, r, 0.5, "a", 3).unwrap();
        assert_eq!(mask.count(), 1);
        assert!(mask.get(5, 5));
        assert_eq!(mask.timestep, 3);
    }

    #[test]
    fn all_zero_map_gives_empty_mask() {
        let map = vec![0.0f64; 16];
        let mask = binarize_bbox(&map, 4, 0.5, "a", 1).unwrap();
        assert!(mask.is_empty());
    }

    #[test]
    fn two_corner_cells_span_their_rectangle() {
        let r = 8;
        let mut map = vec![0.0f64; r * r];
        map[r + 1] = 1.0;
        map[2 * r + 3] = 0.9;
        // everything else below half the max
        map[0] = 0.4;
        let mask = binarize_bbox(&map, r, 0.5, "a", 0).unwrap();
        assert_eq!(mask.count(), 6); // rows 1..=2 x cols 1..=3
        for i in 1..=2 {
            for j in 1..=3 {
                assert!(mask.get(i, j));
            }
        }
        assert!(!mask.get(0, 0));
    }

    #[test]
    fn tau_frac_bounds_are_enforced() {
        let map = vec![0.5f64; 4];
        assert!(binarize_bbox(&map, 2, 0.0, "a", 0).is_err());
        assert!(binarize_bbox(&map, 2, 1.0, "a", 0).is_err());
        assert!(binarize_bbox(&map, 2, 1.5, "a", 0).is_err());
    }

    fn layout_concepts() -> ConceptSet<f64> {
        ConceptSet::orthonormal(&["cat", "dog"], 4, 1).unwrap()
    }

    #[test]
    fn rect_layout_fills_quadrant() {
        let dir = std::env::temp_dir().join("astar_layout_quadrant");
        std::fs::create_dir_all(&dir).unwrap();
        let file = dir.join("layout.txt");
        std::fs::write(&file, "cat: rect 0 0 7 7\ndog: rect 8 8 15 15\n").unwrap();
        let (masks, warnings) = load_layout_masks(&file, &layout_concepts(), 16).unwrap();
        assert_eq!(masks[0].count(), 64);
        assert!(masks[0].get(0, 0) && masks[0].get(7, 7));
        assert!(!masks[0].get(8, 8));
        assert_eq!(masks[0].source, MaskSource::UserLayout);
        assert!(warnings.is_empty());
    }

    #[test]
    fn unknown_concept_is_rejected_by_name() {
        let dir = std::env::temp_dir().join("astar_layout_unknown");
        std::fs::create_dir_all(&dir).unwrap();
        let file = dir.join("layout.txt");
        std::fs::write(&file, "bird: rect 0 0 3 3\n").unwrap();
        let err = load_layout_masks(&file, &layout_concepts(), 16).unwrap_err();
        assert!(err.to_string().contains("bird"), "{err}");
    }

    #[test]
    fn overlapping_rectangles_warn_with_iou() {
        let dir = std::env::temp_dir().join("astar_layout_overlap");
        std::fs::create_dir_all(&dir).unwrap();
        let file = dir.join("layout.txt");
        std::fs::write(&file, "cat: rect 0 0 7 7\ndog: rect 4 4 11 11\n").unwrap();
        let (_, warnings) = load_layout_masks(&file, &layout_concepts(), 16).unwrap();
        assert_eq!(warnings.len(), 1);
        // 16 shared cells, 64 + 64 total
        assert!((warnings[0].overlap - 16.0 / 128.0).abs() < 1e-12);
    }

    #[test]
    fn bitmap_layout_binarizes_at_half() {
        let dir = std::env::temp_dir().join("astar_layout_bitmap");
        std::fs::create_dir_all(&dir).unwrap();
        let r = 4;
        let mut grays = vec![0u8; r * r];
        grays[0] = 200; // >= 0.5 -> 1
        grays[1] = 127; // 127/255 < 0.5 -> 0
        grays[2] = 128; // 128/255 >= 0.5 -> 1
        pgm::write_gray8(dir.join("cat.pgm"), r, r, &grays, true).unwrap();
        pgm::write_gray8(dir.join("dog.pgm"), r, r, &vec![255u8; r * r], true).unwrap();
        let file = dir.join("layout.txt");
        std::fs::write(&file, "cat: bitmap cat.pgm\ndog: bitmap dog.pgm\n").unwrap();
        let concepts = layout_concepts();
        let (masks, _) = load_layout_masks(&file, &concepts, r).unwrap();
        assert!(masks[0].get(0, 0));
        assert!(!masks[0].get(0, 1));
        assert!(masks[0].get(0, 2));
        assert_eq!(masks[1].count(), r * r);
    }

    #[test]
    fn missing_concept_is_an_error() {
        let dir = std::env::temp_dir().join("astar_layout_missing");
        std::fs::create_dir_all(&dir).unwrap();
        let file = dir.join("layout.txt");
        std::fs::write(&file, "cat: rect 0 0 3 3\n").unwrap();
        let err = load_layout_masks(&file, &layout_concepts(), 16).unwrap_err();
        assert!(err.to_string().contains("dog"), "{err}");
    }

    proptest! {
        #[test]
        fn bbox_is_the_tightest_containing_rectangle(
            map in proptest::collection::vec(0.0f64..1.0, 64),
            tau in 0.05f64..0.95,
        ) {
            let r = 8;
            let mask = binarize_bbox(&map, r, tau, "p", 0).unwrap();
            let max = map.iter().cloned().fold(0.0, f64::max);
            if max <= 0.0 {
                prop_assert!(mask.is_empty());
                return Ok(());
            }
            let threshold = tau * max;
            // the mask contains every supra-threshold cell...
            for i in 0..r {
                for j in 0..r {
                    if map[i * r + j] >= threshold {
                        prop_assert!(mask.get(i, j));
                    }
                }
            }
            // ...and among all rectangles containing them it is minimal:
            // shrinking any side must drop a supra-threshold cell.
            let rows: Vec<usize> = (0..r).filter(|&i| (0..r).any(|j| mask.get(i, j))).collect();
            let cols: Vec<usize> = (0..r).filter(|&j| (0..r).any(|i| mask.get(i, j))).collect();
            let (r0, r1) = (rows[0], *rows.last().unwrap());
            let (c0, c1) = (cols[0], *cols.last().unwrap());
            let touches = |cells: Vec<(usize, usize)>| {
                cells.iter().any(|&(i, j)| map[i * r + j] >= threshold)
            };
            prop_assert!(touches((c0..=c1).map(|j| (r0, j)).collect()));
            prop_assert!(touches((c0..=c1).map(|j| (r1, j)).collect()));
            prop_assert!(touches((r0..=r1).map(|i| (i, c0)).collect()));
            prop_assert!(touches((r0..=r1).map(|i| (i, c1)).collect()));
        }

        #[test]
        fn raising_tau_never_enlarges_the_mask(
            map in proptest::collection::vec(0.0f64..1.0, 64),
            lo in 0.1f64..0.5,
            delta in 0.01f64..0.4,
        ) {
            let small = binarize_bbox(&map, 8, lo, "p", 0).unwrap();
            let large = binarize_bbox(&map, 8, lo + delta, "p", 0).unwrap();
            prop_assert!(large.count() <= small.count());
            for i in 0..8 {
                for j in 0..8 {
                    if large.get(i, j) {
                        prop_assert!(small.get(i, j));
                    }
                }
            }
        }

        #[test]
        fn binarization_is_idempotent(
            map in proptest::collection::vec(0.0f64..1.0, 64),
            tau in 0.05f64..0.95,
            tau2 in 0.05f64..0.95,
        ) {
            let first = binarize_bbox(&map, 8, tau, "p", 0).unwrap();
            let as_map: Vec<f64> = first.to_tensor::<f64>().data().to_vec();
            let second = binarize_bbox(&as_map, 8, tau2, "p", 0).unwrap();
            prop_assert_eq!(first.grid(), second.grid());
        }
    }
}

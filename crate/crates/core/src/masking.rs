//! Context and target block sampling over the patch grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Maximum number of sampling attempts before giving up.
pub const MAX_MASK_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, patch_size: usize) -> Self {
        Self { rows, cols, patch_size }
    }

    /// Grid for an `h x w` image cut into `patch_size` squares.
    pub fn for_image(h: usize, w: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
            return Err(invalid!("image {h}x{w} not divisible by patch size {patch_size}"));
        }
        Ok(Self::new(h / patch_size, w / patch_size, patch_size))
    }

    pub fn num_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }
}

/// An axis-aligned block of patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    fn overlaps(&self, other: &Rect) -> bool {
        self.top < other.top + other.height
            && other.top < self.top + self.height
            && self.left < other.left + other.width
            && other.left < self.left + self.width
    }

    fn indices(&self, grid: &GridSpec) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.area());
        for r in self.top..self.top + self.height {
            for c in self.left..self.left + self.width {
                out.push(r * grid.cols + c);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockMask {
    /// Sorted, unique patch indices.
    indices: Vec<usize>,
    grid: GridSpec,
    /// Set when the mask is exactly a rectangle.
    rect: Option<Rect>,
}

impl BlockMask {
    pub fn from_indices(grid: GridSpec, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(invalid!("empty mask"));
        }
        if let Some(&last) = indices.last() {
            if last >= grid.num_patches() {
                return Err(invalid!("patch index {last} outside grid of {}", grid.num_patches()));
            }
        }
        Ok(Self {
            indices,
            grid,
            rect: None,
        })
    }

    pub fn from_rect(grid: GridSpec, rect: Rect) -> Result<Self> {
        if rect.area() == 0 || rect.top + rect.height > grid.rows || rect.left + rect.width > grid.cols {
            return Err(invalid!("rect {rect:?} does not fit grid {}x{}", grid.rows, grid.cols));
        }
        Ok(Self {
            indices: rect.indices(&grid),
            grid,
            rect: Some(rect),
        })
    }

    pub fn full(grid: GridSpec) -> Self {
        Self::from_rect(
            grid,
            Rect {
                top: 0,
                left: 0,
                height: grid.rows,
                width: grid.cols,
            },
        )
        .expect("full grid fits")
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn rect(&self) -> Option<Rect> {
        self.rect
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.indices.binary_search(&idx).is_ok()
    }

    pub fn intersects(&self, other: &BlockMask) -> bool {
        self.indices.iter().any(|&i| other.contains(i))
    }

    /// Binary membership vector of length N.
    pub fn to_binary(&self) -> Vec<bool> {
        let mut v = vec![false; self.grid.num_patches()];
        for &i in &self.indices {
            v[i] = true;
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub num_targets: usize,
    pub target_scale: (f64, f64),
    /// Height / width ratio range of target blocks.
    pub target_aspect: (f64, f64),
    pub context_scale: (f64, f64),
    pub require_disjoint_targets: bool,
    pub remove_target_overlap_from_context: bool,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self::targets_on_other_image()
    }
}

impl MaskSpec {
    /// Defaults for the cross-image path: disjoint targets, context untouched.
    pub fn targets_on_other_image() -> Self {
        Self {
            num_targets: 4,
            target_scale: (0.15, 0.2),
            target_aspect: (0.75, 1.5),
            context_scale: (0.85, 1.0),
            require_disjoint_targets: true,
            remove_target_overlap_from_context: false,
        }
    }

    /// Defaults for the same-image path: targets may overlap each other and
    /// are cut out of the context.
    pub fn targets_on_same_image() -> Self {
        Self {
            require_disjoint_targets: false,
            remove_target_overlap_from_context: true,
            ..Self::targets_on_other_image()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_targets == 0 {
            return Err(invalid!("num_targets must be >= 1"));
        }
        for (name, (lo, hi)) in [("target_scale", self.target_scale), ("context_scale", self.context_scale)] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(invalid!("{name} ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"));
            }
        }
        let (alo, ahi) = self.target_aspect;
        if !(alo > 0.0 && alo <= ahi && ahi.is_finite()) {
            return Err(invalid!("target_aspect ({alo}, {ahi}) invalid"));
        }
        Ok(())
    }

    /// Inclusive patch-count bounds `round(N * scale)` for targets.
    pub fn target_count_bounds(&self, grid: &GridSpec) -> (usize, usize) {
        count_bounds(grid, self.target_scale)
    }

    pub fn context_count_bounds(&self, grid: &GridSpec) -> (usize, usize) {
        count_bounds(grid, self.context_scale)
    }
}

fn count_bounds(grid: &GridSpec, (lo, hi): (f64, f64)) -> (usize, usize) {
    let n = grid.num_patches() as f64;
    ((n * lo).round() as usize, (n * hi).round() as usize)
}

const ASPECT_EPS: f64 = 1e-9;

fn candidate_shapes(grid: &GridSpec, counts: (usize, usize), aspect: Option<(f64, f64)>) -> Vec<(usize, usize)> {
    let mut shapes = Vec::new();
    for h in 1..=grid.rows {
        for w in 1..=grid.cols {
            let area = h * w;
            if area < counts.0 || area > counts.1 {
                continue;
            }
            if let Some((alo, ahi)) = aspect {
                let ar = h as f64 / w as f64;
                if ar < alo - ASPECT_EPS || ar > ahi + ASPECT_EPS {
                    continue;
                }
            }
            shapes.push((h, w));
        }
    }
    shapes
}

fn placements(grid: &GridSpec, (h, w): (usize, usize), taken: &[Rect]) -> Vec<Rect> {
    let mut out = Vec::new();
    for top in 0..=grid.rows - h {
        for left in 0..=grid.cols - w {
            let r = Rect {
                top,
                left,
                height: h,
                width: w,
            };
            if taken.iter().all(|t| !t.overlaps(&r)) {
                out.push(r);
            }
        }
    }
    out
}

/// Samples `spec.num_targets` rectangular target blocks.
pub fn sample_target_masks<R: Rng + ?Sized>(grid: &GridSpec, spec: &MaskSpec, rng: &mut R) -> Result<Vec<BlockMask>> {
    spec.validate()?;
    let counts = spec.target_count_bounds(grid);
    let shapes = candidate_shapes(grid, counts, Some(spec.target_aspect));
    if shapes.is_empty() {
        return Err(Error::InfeasibleMask(format!(
            "no {}x{} rectangle has {}..={} patches with aspect in {:?}",
            grid.rows, grid.cols, counts.0, counts.1, spec.target_aspect
        )));
    }
    'attempt: for _ in 0..MAX_MASK_ATTEMPTS {
        let mut rects: Vec<Rect> = Vec::with_capacity(spec.num_targets);
        for _ in 0..spec.num_targets {
            let taken: &[Rect] = if spec.require_disjoint_targets { &rects } else { &[] };
            let shape = shapes[rng.random_range(0..shapes.len())];
            let options = placements(grid, shape, taken);
            if options.is_empty() {
                continue 'attempt;
            }
            rects.push(options[rng.random_range(0..options.len())]);
        }
        return rects.into_iter().map(|r| BlockMask::from_rect(*grid, r)).collect();
    }
    Err(Error::InfeasibleMask(format!(
        "could not place {} targets on a {}x{} grid in {MAX_MASK_ATTEMPTS} attempts",
        spec.num_targets, grid.rows, grid.cols
    )))
}

/// Samples a rectangular context block; patches covered by any mask in
/// `exclude` are removed from it.
pub fn sample_context_mask<R: Rng + ?Sized>(
    grid: &GridSpec,
    spec: &MaskSpec,
    rng: &mut R,
    exclude: Option<&[BlockMask]>,
) -> Result<BlockMask> {
    spec.validate()?;
    let counts = spec.context_count_bounds(grid);
    let shapes = candidate_shapes(grid, counts, None);
    if shapes.is_empty() {
        return Err(Error::InfeasibleMask(format!(
            "no rectangle on a {}x{} grid has {}..={} patches",
            grid.rows, grid.cols, counts.0, counts.1
        )));
    }
    for _ in 0..MAX_MASK_ATTEMPTS {
        let shape = shapes[rng.random_range(0..shapes.len())];
        let options = placements(grid, shape, &[]);
        let rect = options[rng.random_range(0..options.len())];
        let mask = BlockMask::from_rect(*grid, rect)?;
        let Some(excl) = exclude else {
            return Ok(mask);
        };
        let kept: Vec<usize> = mask
            .indices()
            .iter()
            .copied()
            .filter(|&i| excl.iter().all(|m| !m.contains(i)))
            .collect();
        if kept.is_empty() {
            continue;
        }
        if kept.len() == mask.len() {
            return Ok(mask);
        }
        return BlockMask::from_indices(*grid, kept);
    }
    Err(Error::InfeasibleMask(format!(
        "context block empty after exclusion in {MAX_MASK_ATTEMPTS} attempts"
    )))
}

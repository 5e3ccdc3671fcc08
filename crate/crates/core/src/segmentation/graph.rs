//! Felzenszwalb–Huttenlocher graph segmentation on the 4-connected pixel
//! grid, used as the builtin promptable segmenter.

use std::sync::{Arc, Mutex};

use crate::raster::{BinaryMask, Image};

use super::{Capabilities, PointPrompt, SegmentationError, SegmenterBackend};

/// Per-pixel segment labels, contiguous from zero in raster order of each
/// segment's first pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u32>,
    pub num_segments: u32,
}

impl LabelMap {
    pub fn label_at(&self, x: u32, y: u32) -> u32 {
        self.labels[(y * self.width + x) as usize]
    }

    pub fn segment_mask(&self, label: u32) -> BinaryMask {
        BinaryMask::new(
            self.width,
            self.height,
            self.labels.iter().map(|l| *l == label).collect(),
        )
        .expect("label map is image-shaped")
    }

    pub fn segment_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_segments as usize];
        for l in &self.labels {
            sizes[*l as usize] += 1;
        }
        sizes
    }

    /// Union of the segments whose labels are flagged.
    pub fn mask_of(&self, selected: &[bool]) -> BinaryMask {
        BinaryMask::new(
            self.width,
            self.height,
            self.labels.iter().map(|l| selected[*l as usize]).collect(),
        )
        .expect("label map is image-shaped")
    }
}

struct DisjointSets {
    parent: Vec<u32>,
    size: Vec<u32>,
    // Largest edge weight inside the component (the FH internal difference).
    internal: Vec<f64>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn join(&mut self, a: u32, b: u32, weight: f64) {
        let (big, small) = if self.size[a as usize] >= self.size[b as usize] {
            (a, b)
        } else {
            (b, a)
        };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
        self.internal[big as usize] = weight;
    }
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Graph segmentation with scale `k` (in RGB-distance units) followed by a
/// pass that absorbs every segment smaller than `min_size` into a neighbor.
pub fn builtin_segments(image: &Image, k: f64, min_size: usize) -> LabelMap {
    assert!(k > 0.0, "k must be positive");
    assert!(min_size >= 1, "min_size must be at least 1");
    let (w, h) = image.dims();
    let n = image.len();
    let px = image.pixels();

    let mut edges: Vec<(f64, u32, u32)> = Vec::with_capacity(2 * n);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                edges.push((color_distance(px[i as usize], px[i as usize + 1]), i, i + 1));
            }
            if y + 1 < h {
                edges.push((color_distance(px[i as usize], px[(i + w) as usize]), i, i + w));
            }
        }
    }
    // Stable sort keeps generation order among equal weights.
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut sets = DisjointSets::new(n);
    for &(weight, a, b) in &edges {
        let (ra, rb) = (sets.find(a), sets.find(b));
        if ra == rb {
            continue;
        }
        let threshold_a = sets.internal[ra as usize] + k / f64::from(sets.size[ra as usize]);
        let threshold_b = sets.internal[rb as usize] + k / f64::from(sets.size[rb as usize]);
        if weight <= threshold_a.min(threshold_b) {
            sets.join(ra, rb, weight);
        }
    }

    for &(weight, a, b) in &edges {
        let (ra, rb) = (sets.find(a), sets.find(b));
        if ra != rb
            && (sets.size[ra as usize] < min_size as u32 || sets.size[rb as usize] < min_size as u32)
        {
            let merged = sets.internal[ra as usize]
                .max(sets.internal[rb as usize])
                .max(weight);
            sets.join(ra, rb, merged);
        }
    }

    let mut relabel = vec![u32::MAX; n];
    let mut next = 0;
    let mut labels = Vec::with_capacity(n);
    for i in 0..n as u32 {
        let root = sets.find(i) as usize;
        if relabel[root] == u32::MAX {
            relabel[root] = next;
            next += 1;
        }
        labels.push(relabel[root]);
    }
    LabelMap {
        width: w,
        height: h,
        labels,
        num_segments: next,
    }
}

pub const DEFAULT_K: f64 = 1.0;
pub const DEFAULT_MIN_SIZE: usize = 8;

/// Promptable segmenter over [`builtin_segments`]: a point prompt selects
/// the union of the segments that contain its points.
#[derive(Debug)]
pub struct BuiltinSegmenter {
    pub k: f64,
    pub min_size: usize,
    cache: Mutex<Option<(Image, Arc<LabelMap>)>>,
}

impl Default for BuiltinSegmenter {
    fn default() -> Self {
        Self::new(DEFAULT_K, DEFAULT_MIN_SIZE)
    }
}

impl BuiltinSegmenter {
    pub fn new(k: f64, min_size: usize) -> Self {
        Self {
            k,
            min_size,
            cache: Mutex::new(None),
        }
    }

    /// Label map for `image`, reusing the previous result when the same
    /// image is prompted repeatedly.
    pub fn labels(&self, image: &Image) -> Arc<LabelMap> {
        let mut cache = self.cache.lock().expect("segmenter cache poisoned");
        if let Some((cached, labels)) = cache.as_ref() {
            if cached == image {
                return Arc::clone(labels);
            }
        }
        let labels = Arc::new(builtin_segments(image, self.k, self.min_size));
        *cache = Some((image.clone(), Arc::clone(&labels)));
        labels
    }
}

pub(crate) fn pixel_of(image_dims: (u32, u32), p: [f64; 2]) -> (u32, u32) {
    let x = (p[0].floor().max(0.0) as u32).min(image_dims.0 - 1);
    let y = (p[1].floor().max(0.0) as u32).min(image_dims.1 - 1);
    (x, y)
}

/// Prompt locations of a `resolution`×`resolution` grid over cell centers.
pub fn grid_points(width: u32, height: u32, resolution: u32) -> Vec<[f64; 2]> {
    let r = f64::from(resolution);
    let mut pts = Vec::with_capacity((resolution * resolution) as usize);
    for j in 0..resolution {
        for i in 0..resolution {
            pts.push([
                (f64::from(i) + 0.5) / r * f64::from(width),
                (f64::from(j) + 0.5) / r * f64::from(height),
            ]);
        }
    }
    pts
}

impl SegmenterBackend for BuiltinSegmenter {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            point_prompts: true,
            grid_mode: true,
        }
    }

    fn segment_with_points(&self, image: &Image, prompt: &PointPrompt) -> Result<BinaryMask, SegmentationError> {
        prompt.validate_for(image)?;
        let labels = self.labels(image);
        let mut selected = vec![false; labels.num_segments as usize];
        for p in prompt.points() {
            let (x, y) = pixel_of(image.dims(), *p);
            selected[labels.label_at(x, y) as usize] = true;
        }
        Ok(labels.mask_of(&selected))
    }

    fn segment_instances(&self, image: &Image, grid_resolution: u32) -> Result<Vec<BinaryMask>, SegmentationError> {
        if grid_resolution == 0 {
            return Err(SegmentationError::InvalidPrompt("grid resolution must be at least 1".into()));
        }
        let labels = self.labels(image);
        let mut selected = vec![false; labels.num_segments as usize];
        for p in grid_points(image.width(), image.height(), grid_resolution) {
            let (x, y) = pixel_of(image.dims(), p);
            selected[labels.label_at(x, y) as usize] = true;
        }
        Ok((0..labels.num_segments)
            .filter(|l| selected[*l as usize])
            .map(|l| labels.segment_mask(l))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn halves(w: u32, h: u32) -> Image {
        let mut img = Image::filled(w, h, [0.1, 0.2, 0.8]);
        for y in 0..h {
            for x in 0..w / 2 {
                img.set(x, y, [0.9, 0.3, 0.1]);
            }
        }
        img
    }

    #[test]
    fn uniform_image_is_one_segment() {
        let img = Image::filled(9, 7, [0.3, 0.3, 0.3]);
        let l = builtin_segments(&img, 0.01, 1);
        assert_eq!(l.num_segments, 1);
        assert!(l.labels.iter().all(|v| *v == 0));
    }

    #[test]
    fn two_halves_split_on_boundary() {
        // Boundary weight is ~1.05; merging needs k/8 >= 1.05, so k = 1
        // keeps the halves apart.
        let img = halves(4, 4);
        let l = builtin_segments(&img, 1.0, 1);
        assert_eq!(l.num_segments, 2);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(l.label_at(x, y), if x < 2 { 0 } else { 1 });
            }
        }
        // With k large enough the boundary edge is absorbed.
        assert_eq!(builtin_segments(&img, 9.0, 1).num_segments, 1);
    }

    #[test]
    fn checkerboard_merges_to_min_size() {
        let img = Image::new(
            8,
            8,
            (0..64)
                .map(|i| if (i % 8 + i / 8) % 2 == 0 { [1.0; 3] } else { [0.0; 3] })
                .collect(),
        )
        .unwrap();
        let l = builtin_segments(&img, 0.1, 8);
        assert!(l.segment_sizes().iter().all(|s| *s >= 8), "{:?}", l.segment_sizes());
    }

    #[test]
    fn point_prompt_selects_left_half() {
        let img = halves(6, 4);
        let seg = BuiltinSegmenter::new(1.0, 1);
        let mask = seg
            .segment_with_points(&img, &PointPrompt::new(vec![[0.5, 2.5]]).unwrap())
            .unwrap();
        assert_eq!(mask, BinaryMask::from_fn(6, 4, |x, _| x < 3));
    }

    #[test]
    fn grid_instances_tile_two_halves() {
        let img = halves(8, 8);
        let seg = BuiltinSegmenter::new(1.0, 1);
        let masks = seg.segment_instances(&img, 64).unwrap();
        assert_eq!(masks.len(), 2);
        assert_eq!(masks[0], BinaryMask::from_fn(8, 8, |x, _| x < 4));
        assert_eq!(masks[1], masks[0].complement());
    }

    #[test]
    fn uniform_image_gives_full_masks() {
        let img = Image::filled(5, 5, [0.2, 0.4, 0.6]);
        let seg = BuiltinSegmenter::default();
        let masks = seg.segment_instances(&img, 3).unwrap();
        assert_eq!(masks, vec![BinaryMask::ones(5, 5)]);
        let m = seg
            .segment_with_points(&img, &PointPrompt::new(vec![[4.9, 0.0]]).unwrap())
            .unwrap();
        assert_eq!(m, BinaryMask::ones(5, 5));
    }

    /// Connected components of equal color, computed by flood fill.
    fn flat_components(img: &Image) -> Vec<u32> {
        let (w, h) = img.dims();
        let mut comp = vec![u32::MAX; img.len()];
        let mut next = 0;
        for start in 0..img.len() {
            if comp[start] != u32::MAX {
                continue;
            }
            let mut stack = vec![start];
            comp[start] = next;
            while let Some(i) = stack.pop() {
                let (x, y) = ((i as u32) % w, (i as u32) / w);
                let mut nbrs = Vec::new();
                if x > 0 { nbrs.push(i - 1) }
                if x + 1 < w { nbrs.push(i + 1) }
                if y > 0 { nbrs.push(i - w as usize) }
                if y + 1 < h { nbrs.push(i + w as usize) }
                for j in nbrs {
                    if comp[j] == u32::MAX && img.pixels()[j] == img.pixels()[i] {
                        comp[j] = next;
                        stack.push(j);
                    }
                }
            }
            next += 1;
        }
        comp
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn labels_partition_and_respect_min_size(
            seed in proptest::collection::vec(0u8..3, 36),
            min_size in 1usize..6,
        ) {
            let palette = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
            let img = Image::new(6, 6, seed.iter().map(|c| palette[*c as usize]).collect()).unwrap();
            let l = builtin_segments(&img, 0.5, min_size);
            prop_assert_eq!(l.labels.len(), 36);
            let sizes = l.segment_sizes();
            prop_assert_eq!(sizes.iter().sum::<usize>(), 36);
            prop_assert!(sizes.iter().all(|s| *s >= min_size.min(36)));
            // Contiguous labels in first-appearance order.
            let mut seen = 0;
            for v in &l.labels {
                prop_assert!(*v <= seen);
                if *v == seen { seen += 1; }
            }
            prop_assert_eq!(seen, l.num_segments);
        }

        #[test]
        fn flat_regions_are_never_split(seed in proptest::collection::vec(0u8..3, 36)) {
            let palette = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
            let img = Image::new(6, 6, seed.iter().map(|c| palette[*c as usize]).collect()).unwrap();
            let l = builtin_segments(&img, 0.5, 1);
            let comps = flat_components(&img);
            // Each flat connected component maps into exactly one label.
            for i in 0..36 {
                for j in 0..36 {
                    if comps[i] == comps[j] {
                        prop_assert_eq!(l.labels[i], l.labels[j]);
                    }
                }
            }
        }

        #[test]
        fn point_mask_equals_label_lookup(
            pts in proptest::collection::vec((0.0f64..6.0, 0.0f64..6.0), 1..5),
            seed in proptest::collection::vec(0u8..3, 36),
        ) {
            let palette = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
            let img = Image::new(6, 6, seed.iter().map(|c| palette[*c as usize]).collect()).unwrap();
            let seg = BuiltinSegmenter::new(0.5, 2);
            let points: Vec<[f64; 2]> = pts.iter().map(|(x, y)| [*x, *y]).collect();
            let mask = seg.segment_with_points(&img, &PointPrompt::new(points.clone()).unwrap()).unwrap();
            let l = builtin_segments(&img, 0.5, 2);
            let hit: Vec<u32> = points.iter().map(|p| l.label_at(p[0] as u32, p[1] as u32)).collect();
            for y in 0..6 {
                for x in 0..6 {
                    prop_assert_eq!(mask.get(x, y), hit.contains(&l.label_at(x, y)));
                }
            }
            for p in &points {
                prop_assert!(mask.get(p[0] as u32, p[1] as u32));
            }
        }
    }
}

//! Detection metrics: pixel IoU, instance-level detection probability with a
//! centroid-distance rule, false alarms per megapixel, pooled ROC and a
//! per-target SNR used to carve evaluation subsets.

use std::collections::VecDeque;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A predicted instance detects a target when their centroids are at most
/// this far apart (pixels, Euclidean).
pub const PD_DISTANCE: f64 = 3.0;

/// Width of the background ring around a target's bounding box.
pub const SNR_RING: usize = 10;

/// Floor on the background deviation so flat backgrounds give a finite SNR.
pub const SNR_SIGMA_FLOOR: f64 = 1e-6;

pub const FA_SCALE: f64 = 1e6;

pub const DEFAULT_ROC_POINTS: usize = 101;

#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BinaryMask({}x{}, {} set)", self.height, self.width, self.count())
    }
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::invalid(
                "mask",
                format!("{} bits for a {height}x{width} mask", bits.len()),
            ));
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        BinaryMask { height, width, bits }
    }

    /// Pixels of a single-plane map with value `>= t`.
    pub fn at_least(map: &Tensor, t: f64) -> Result<Self> {
        let (h, w) = single_plane(map, "threshold")?;
        Ok(BinaryMask {
            height: h,
            width: w,
            bits: map.data().iter().map(|&v| v >= t).collect(),
        })
    }

    /// Pixels of a single-plane map with value strictly above `t`.
    pub fn above(map: &Tensor, t: f64) -> Result<Self> {
        let (h, w) = single_plane(map, "threshold")?;
        Ok(BinaryMask {
            height: h,
            width: w,
            bits: map.data().iter().map(|&v| v > t).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.width + c] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// 1 x 1 x h x w tensor of 0/1 values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(crate::Shape::new(1, 1, self.height, self.width), |_, _, r, c| {
            if self.get(r, c) { 1.0 } else { 0.0 }
        })
    }

    fn check_same(&self, other: &BinaryMask, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(op, &[self.height, self.width], &[other.height, other.width]));
        }
        Ok(())
    }
}

fn single_plane(map: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let [n, c, h, w] = map.shape().dims();
    if n != 1 || c != 1 {
        return Err(Error::invalid(op, format!("expected a 1x1xHxW map, got {:?}", map.shape())));
    }
    Ok((h, w))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    /// Member pixels as (row, col), in discovery order.
    pub pixels: Vec<(usize, usize)>,
    /// Unweighted mean of member coordinates, (row, col).
    pub centroid: (f64, f64),
}

impl Component {
    fn from_pixels(pixels: Vec<(usize, usize)>) -> Self {
        let n = pixels.len() as f64;
        let (sr, sc) = pixels
            .iter()
            .fold((0.0, 0.0), |(a, b), &(r, c)| (a + r as f64, b + c as f64));
        Component {
            pixels,
            centroid: (sr / n, sc / n),
        }
    }

    /// Inclusive bounding box: (row_min, row_max, col_min, col_max).
    pub fn bbox(&self) -> (usize, usize, usize, usize) {
        let mut b = (usize::MAX, 0, usize::MAX, 0);
        for &(r, c) in &self.pixels {
            b.0 = b.0.min(r);
            b.1 = b.1.max(r);
            b.2 = b.2.min(c);
            b.3 = b.3.max(c);
        }
        b
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InstanceSet {
    pub components: Vec<Component>,
}

impl InstanceSet {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn centroids(&self) -> Vec<(f64, f64)> {
        self.components.iter().map(|c| c.centroid).collect()
    }
}

/// 8-connected components, ordered by their first pixel in row-major order.
pub fn connected_components(mask: &BinaryMask) -> InstanceSet {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            let (r, c) = (p / w, p % w);
            pixels.push((r, c));
            for nr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for nc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    let q = nr * w + nc;
                    if mask.bits[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        components.push(Component::from_pixels(pixels));
    }
    InstanceSet { components }
}

/// Per-image tallies; every set-level metric is a ratio of sums of these.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ImageCounts {
    pub intersection: usize,
    pub union: usize,
    pub detected: usize,
    pub targets: usize,
    /// Predicted-positive pixels outside the ground truth.
    pub false_pixels: usize,
    pub pixels: usize,
}

impl ImageCounts {
    pub fn measure(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        pred.check_same(gt, "metrics")?;
        let mut counts = ImageCounts {
            pixels: gt.len(),
            ..Default::default()
        };
        for (&p, &t) in pred.bits.iter().zip(&gt.bits) {
            counts.intersection += (p && t) as usize;
            counts.union += (p || t) as usize;
            counts.false_pixels += (p && !t) as usize;
        }
        let (detected, targets) = match_targets(pred, gt);
        counts.detected = detected;
        counts.targets = targets;
        Ok(counts)
    }

    fn merge(self, o: ImageCounts) -> ImageCounts {
        ImageCounts {
            intersection: self.intersection + o.intersection,
            union: self.union + o.union,
            detected: self.detected + o.detected,
            targets: self.targets + o.targets,
            false_pixels: self.false_pixels + o.false_pixels,
            pixels: self.pixels + o.pixels,
        }
    }

    /// An empty union (both masks empty) counts as perfect overlap.
    pub fn iou(&self) -> f64 {
        if self.union == 0 { 1.0 } else { self.intersection as f64 / self.union as f64 }
    }

    /// With no targets there is nothing to miss, so the rate is 1.
    pub fn pd(&self) -> f64 {
        if self.targets == 0 { 1.0 } else { self.detected as f64 / self.targets as f64 }
    }

    pub fn fa(&self) -> f64 {
        if self.pixels == 0 { 0.0 } else { FA_SCALE * self.false_pixels as f64 / self.pixels as f64 }
    }
}

fn match_targets(pred: &BinaryMask, gt: &BinaryMask) -> (usize, usize) {
    let targets = connected_components(gt);
    let preds = connected_components(pred).centroids();
    let detected = targets
        .components
        .iter()
        .filter(|t| {
            preds.iter().any(|&(r, c)| {
                let (dr, dc) = (r - t.centroid.0, c - t.centroid.1);
                (dr * dr + dc * dc).sqrt() <= PD_DISTANCE
            })
        })
        .count();
    (detected, targets.len())
}

pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(ImageCounts::measure(pred, gt)?.iou())
}

/// (detected targets, total targets). A single prediction may detect several
/// targets.
pub fn pd(pred: &BinaryMask, gt: &BinaryMask) -> Result<(usize, usize)> {
    pred.check_same(gt, "pd")?;
    Ok(match_targets(pred, gt))
}

pub fn fa(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(ImageCounts::measure(pred, gt)?.fa())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub iou: f64,
    pub pd: f64,
    pub fa: f64,
    pub totals: ImageCounts,
    pub per_image: Vec<ImageCounts>,
    /// Empty unless confidence maps were supplied.
    pub roc: Vec<RocPoint>,
}

/// Set-level metrics: IoU and Fa pool pixel counts over all images, Pd pools
/// target counts.
pub fn evaluate(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(
            "evaluate",
            format!("{} predictions for {} ground truths", preds.len(), gts.len()),
        ));
    }
    let per_image = preds
        .par_iter()
        .zip(gts.par_iter())
        .map(|(p, g)| ImageCounts::measure(p, g))
        .collect::<Result<Vec<_>>>()?;
    let totals = per_image.iter().fold(ImageCounts::default(), |a, &b| a.merge(b));
    Ok(MetricsReport {
        iou: totals.iou(),
        pd: totals.pd(),
        fa: totals.fa(),
        totals,
        per_image,
        roc: Vec::new(),
    })
}

/// `n` evenly spaced thresholds covering [0, 1].
pub fn default_thresholds(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// Pixel ROC pooled over all images; a pixel is positive at threshold `t`
/// when its confidence is `>= t`. Rates with an empty denominator are 0.
pub fn roc(conf_maps: &[Tensor], gts: &[BinaryMask], thresholds: &[f64]) -> Result<Vec<RocPoint>> {
    if conf_maps.len() != gts.len() {
        return Err(Error::invalid(
            "roc",
            format!("{} confidence maps for {} ground truths", conf_maps.len(), gts.len()),
        ));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (map, gt) in conf_maps.iter().zip(gts) {
        let (h, w) = single_plane(map, "roc")?;
        if (h, w) != gt.dims() {
            return Err(Error::shape("roc", &[h, w], &[gt.height, gt.width]));
        }
        for (&v, &t) in map.data().iter().zip(&gt.bits) {
            if t { pos.push(v) } else { neg.push(v) }
        }
    }
    let sort = |v: &mut Vec<f64>| v.sort_by(|a, b| a.total_cmp(b));
    sort(&mut pos);
    sort(&mut neg);
    // Fraction of a sorted list with value >= t.
    let rate = |v: &[f64], t: f64| {
        if v.is_empty() {
            0.0
        } else {
            (v.len() - v.partition_point(|&x| x < t)) as f64 / v.len() as f64
        }
    };
    Ok(thresholds
        .iter()
        .map(|&t| RocPoint {
            threshold: t,
            fpr: rate(&neg, t),
            tpr: rate(&pos, t),
        })
        .collect())
}

/// Contrast of one target against a ring around its bounding box:
/// (mean over target - mean over ring) / std over ring. The ring is the box
/// dilated by [`SNR_RING`] pixels, clipped to the image, minus every
/// ground-truth pixel. `None` when the ring is empty.
pub fn snr_of_target(image: &Tensor, gt: &BinaryMask, target: &Component) -> Result<Option<f64>> {
    let (h, w) = single_plane(image, "snr")?;
    if (h, w) != gt.dims() {
        return Err(Error::shape("snr", &[h, w], &[gt.height, gt.width]));
    }
    if target.pixels.is_empty() {
        return Err(Error::invalid("snr", "empty target"));
    }
    let px = image.data();
    let mu_t = target.pixels.iter().map(|&(r, c)| px[r * w + c]).sum::<f64>() / target.pixels.len() as f64;
    let (r0, r1, c0, c1) = target.bbox();
    let mut ring = Vec::new();
    for r in r0.saturating_sub(SNR_RING)..=(r1 + SNR_RING).min(h - 1) {
        for c in c0.saturating_sub(SNR_RING)..=(c1 + SNR_RING).min(w - 1) {
            if !gt.get(r, c) {
                ring.push(px[r * w + c]);
            }
        }
    }
    if ring.is_empty() {
        return Ok(None);
    }
    let n = ring.len() as f64;
    let mu_b = ring.iter().sum::<f64>() / n;
    let var = ring.iter().map(|v| (v - mu_b) * (v - mu_b)).sum::<f64>() / n;
    Ok(Some((mu_t - mu_b) / var.sqrt().max(SNR_SIGMA_FLOOR)))
}

/// Minimum target SNR in the image. `None` when the image has no targets or
/// any target's ring is empty; such images are left out of SNR subsets.
pub fn image_snr(image: &Tensor, gt: &BinaryMask) -> Result<Option<f64>> {
    let targets = connected_components(gt);
    if targets.is_empty() {
        return Ok(None);
    }
    let mut worst = f64::INFINITY;
    for t in &targets.components {
        match snr_of_target(image, gt, t)? {
            Some(s) => worst = worst.min(s),
            None => return Ok(None),
        }
    }
    Ok(Some(worst))
}

/// Indices of images whose SNR is defined and below `tau`. Subsets nest as
/// `tau` grows.
pub fn snr_subset(snrs: &[Option<f64>], tau: f64) -> Vec<usize> {
    snrs.iter()
        .enumerate()
        .filter_map(|(i, s)| s.filter(|&s| s < tau).map(|_| i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Shape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask::from_fn(h, w, |r, c| rows[r].as_bytes()[c] == b'#')
    }

    fn random_mask(rng: &mut impl Rng, h: usize, w: usize, density: f64) -> BinaryMask {
        BinaryMask::from_fn(h, w, |_, _| rng.random_bool(density))
    }

    /// Union-find labelling, independent of the flood fill.
    fn oracle_components(m: &BinaryMask) -> Vec<Vec<(usize, usize)>> {
        let (h, w) = m.dims();
        let mut parent: Vec<usize> = (0..h * w).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for r in 0..h {
            for c in 0..w {
                if !m.get(r, c) {
                    continue;
                }
                for (dr, dc) in [(-1i64, -1i64), (-1, 0), (-1, 1), (0, -1)] {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr >= 0 && nc >= 0 && (nc as usize) < w && m.get(nr as usize, nc as usize) {
                        let a = find(&mut parent, r * w + c);
                        let b = find(&mut parent, nr as usize * w + nc as usize);
                        parent[a] = b;
                    }
                }
            }
        }
        let mut groups: Vec<(usize, Vec<(usize, usize)>)> = Vec::new();
        for p in 0..h * w {
            if !m.bits()[p] {
                continue;
            }
            let root = find(&mut parent, p);
            match groups.iter_mut().find(|g| g.0 == root) {
                Some(g) => g.1.push((p / w, p % w)),
                None => groups.push((root, vec![(p / w, p % w)])),
            }
        }
        groups.into_iter().map(|g| g.1).collect()
    }

    fn oracle_counts(pred: &BinaryMask, gt: &BinaryMask) -> ImageCounts {
        let mut c = ImageCounts {
            pixels: gt.len(),
            ..Default::default()
        };
        for r in 0..gt.height() {
            for col in 0..gt.width() {
                let (p, t) = (pred.get(r, col), gt.get(r, col));
                if p && t {
                    c.intersection += 1;
                }
                if p || t {
                    c.union += 1;
                }
                if p && !t {
                    c.false_pixels += 1;
                }
            }
        }
        let centroid = |px: &[(usize, usize)]| {
            let n = px.len() as f64;
            (
                px.iter().map(|p| p.0 as f64).sum::<f64>() / n,
                px.iter().map(|p| p.1 as f64).sum::<f64>() / n,
            )
        };
        let pc: Vec<_> = oracle_components(pred).iter().map(|p| centroid(p)).collect();
        for t in oracle_components(gt) {
            c.targets += 1;
            let tc = centroid(&t);
            let best = pc
                .iter()
                .map(|p| ((p.0 - tc.0).powi(2) + (p.1 - tc.1).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            if best <= 3.0 {
                c.detected += 1;
            }
        }
        c
    }

    #[test]
    fn identical_masks_are_perfect() {
        let m = mask(&["....", ".##.", ".##.", "...."]);
        assert_eq!(iou(&m, &m).unwrap(), 1.0);
        assert_eq!(pd(&m, &m).unwrap(), (1, 1));
        assert_eq!(fa(&m, &m).unwrap(), 0.0);
    }

    #[test]
    fn disjoint_masks_have_zero_iou() {
        let a = mask(&["##..", "....", "....", "...."]);
        let b = mask(&["....", "....", "....", "..##"]);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn half_covered_target() {
        let gt = mask(&["#####", "#####"]);
        let pred = mask(&["#####", "....."]);
        assert_eq!(iou(&pred, &gt).unwrap(), 0.5);
    }

    #[test]
    fn empty_union_is_one() {
        let e = BinaryMask::empty(3, 3);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let a = BinaryMask::empty(3, 3);
        let b = BinaryMask::empty(3, 4);
        assert!(iou(&a, &b).is_err());
        assert!(pd(&a, &b).is_err());
        assert!(fa(&a, &b).is_err());
        assert!(evaluate(&[a.clone()], &[]).is_err());
    }

    #[test]
    fn square_centroid() {
        let s = connected_components(&mask(&["##.", "##.", "..."]));
        assert_eq!(s.len(), 1);
        assert_eq!(s.components[0].centroid, (0.5, 0.5));
    }

    #[test]
    fn diagonal_touch_is_connected() {
        assert_eq!(connected_components(&mask(&["#.", ".#"])).len(), 1);
        assert_eq!(connected_components(&mask(&["#.#", "...", "#.#"])).len(), 4);
    }

    #[test]
    fn checkerboard_is_one_component() {
        let m = BinaryMask::from_fn(4, 4, |r, c| (r + c) % 2 == 0);
        assert_eq!(connected_components(&m).len(), 1);
        assert_eq!(oracle_components(&m).len(), 1);
    }

    #[test]
    fn components_ordered_by_first_pixel() {
        let s = connected_components(&mask(&["...#", "#...", "#..."]));
        assert_eq!(s.components[0].pixels[0], (0, 3));
        assert_eq!(s.components[1].pixels[0], (1, 0));
    }

    #[test]
    fn pd_distance_rule() {
        let mut gt = BinaryMask::empty(20, 20);
        gt.set(10, 10, true);
        let mut far = BinaryMask::empty(20, 20);
        far.set(13, 14, true);
        assert_eq!(pd(&far, &gt).unwrap(), (0, 1));
        let mut near = BinaryMask::empty(20, 20);
        near.set(13, 10, true);
        assert_eq!(pd(&near, &gt).unwrap(), (1, 1));
        assert_eq!(pd(&BinaryMask::empty(20, 20), &gt).unwrap(), (0, 1));
    }

    #[test]
    fn one_prediction_may_detect_two_targets() {
        let gt = mask(&["#...#", ".....", "....."]);
        let pred = mask(&["..#..", ".....", "....."]);
        assert_eq!(pd(&pred, &gt).unwrap(), (2, 2));
    }

    #[test]
    fn fa_scaling() {
        let gt = BinaryMask::empty(1000, 1000);
        let mut pred = gt.clone();
        pred.set(3, 7, true);
        assert_eq!(fa(&pred, &gt).unwrap(), 1.0);
        let all = BinaryMask::from_fn(100, 100, |_, _| true);
        assert_eq!(fa(&all, &BinaryMask::empty(100, 100)).unwrap(), 1e6);
        let gt = mask(&["##", "##"]);
        assert_eq!(fa(&mask(&["#.", ".."]), &gt).unwrap(), 0.0);
    }

    #[test]
    fn set_level_pooling() {
        let g1 = mask(&["##", ".."]);
        let p1 = mask(&["#.", ".."]);
        let g2 = mask(&["..", ".."]);
        let p2 = mask(&["..", ".#"]);
        let r = evaluate(&[p1, p2], &[g1, g2]).unwrap();
        // intersection 1, union 2 + 1
        assert!((r.iou - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.fa, 1e6 * 1.0 / 8.0);
        assert_eq!((r.totals.detected, r.totals.targets), (1, 1));
        assert_eq!(r.per_image.len(), 2);
    }

    #[test]
    fn random_pairs_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let h = rng.random_range(1..=32);
            let w = rng.random_range(1..=32);
            let d = rng.random_range(0.0..0.5);
            let p = random_mask(&mut rng, h, w, d);
            let g = random_mask(&mut rng, h, w, d);
            assert_eq!(ImageCounts::measure(&p, &g).unwrap(), oracle_counts(&p, &g));
            let ours: Vec<Vec<_>> = connected_components(&p)
                .components
                .into_iter()
                .map(|c| {
                    let mut px = c.pixels;
                    px.sort();
                    px
                })
                .collect();
            let mut theirs = oracle_components(&p);
            theirs.iter_mut().for_each(|c| c.sort());
            assert_eq!(ours, theirs);
        }
    }

    fn plane(h: usize, w: usize, v: Vec<f64>) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, h, w), v).unwrap()
    }

    #[test]
    fn roc_endpoints_and_perfect_map() {
        let gt = mask(&["#.", ".."]);
        let perfect = plane(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        let pts = roc(&[perfect], &[gt], &[0.0, 0.5, 1.5]).unwrap();
        assert_eq!((pts[0].fpr, pts[0].tpr), (1.0, 1.0));
        assert_eq!((pts[1].fpr, pts[1].tpr), (0.0, 1.0));
        assert_eq!((pts[2].fpr, pts[2].tpr), (0.0, 0.0));
    }

    #[test]
    fn roc_rejects_mismatch() {
        let gt = mask(&["#."]);
        assert!(roc(&[], &[gt.clone()], &[0.5]).is_err());
        assert!(roc(&[plane(2, 1, vec![0.0, 0.0])], &[gt], &[0.5]).is_err());
    }

    #[test]
    fn default_threshold_grid() {
        let t = default_thresholds(DEFAULT_ROC_POINTS);
        assert_eq!(t.len(), 101);
        assert_eq!((t[0], t[50], t[100]), (0.0, 0.5, 1.0));
    }

    proptest! {
        #[test]
        fn roc_is_monotone(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_mask(&mut rng, h, w, 0.3);
            let map = plane(h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect());
            let pts = roc(&[map.clone()], &[gt.clone()], &default_thresholds(DEFAULT_ROC_POINTS)).unwrap();
            for p in pts.windows(2) {
                prop_assert!(p[1].fpr <= p[0].fpr && p[1].tpr <= p[0].tpr);
            }
            // Each point equals thresholding then counting.
            for p in pts.iter().step_by(10) {
                let pred = BinaryMask::at_least(&map, p.threshold).unwrap();
                let pos = gt.count();
                let tp = pred.bits().iter().zip(gt.bits()).filter(|(a, b)| **a && **b).count();
                let fp = pred.count() - tp;
                let tpr = if pos == 0 { 0.0 } else { tp as f64 / pos as f64 };
                let neg = gt.len() - pos;
                let fpr = if neg == 0 { 0.0 } else { fp as f64 / neg as f64 };
                prop_assert_eq!((p.fpr, p.tpr), (fpr, tpr));
            }
        }

        #[test]
        fn metrics_stay_in_range(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_mask(&mut rng, 9, 7, 0.2);
            let g = random_mask(&mut rng, 9, 7, 0.2);
            let c = ImageCounts::measure(&p, &g).unwrap();
            prop_assert!((0.0..=1.0).contains(&c.iou()));
            prop_assert!((0.0..=1.0).contains(&c.pd()));
            prop_assert!(c.fa() >= 0.0);
        }
    }

    #[test]
    fn snr_of_flat_and_noisy_backgrounds() {
        let (h, w) = (64, 64);
        let gt = BinaryMask::from_fn(h, w, |r, c| (30..33).contains(&r) && (30..33).contains(&c));
        let comp = &connected_components(&gt).components[0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let img = Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, r, c| {
            if gt.get(r, c) { 10.0 } else { rng.sample(normal) }
        });
        let s = snr_of_target(&img, &gt, comp).unwrap().unwrap();
        assert!((s - 10.0).abs() < 1.0, "snr {s}");

        let flat = Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, _, _| 0.25);
        assert_eq!(snr_of_target(&flat, &gt, comp).unwrap(), Some(0.0));
    }

    #[test]
    fn snr_ring_can_be_empty() {
        let gt = BinaryMask::from_fn(4, 4, |_, _| true);
        let img = plane(4, 4, vec![1.0; 16]);
        assert_eq!(image_snr(&img, &gt).unwrap(), None);
        assert_eq!(image_snr(&img, &BinaryMask::empty(4, 4)).unwrap(), None);
    }

    #[test]
    fn image_snr_is_minimum_over_targets() {
        let gt = BinaryMask::from_fn(40, 40, |r, c| (r == 5 && c == 5) || (r == 30 && c == 30));
        let img = Tensor::from_fn(Shape::new(1, 1, 40, 40), |_, _, r, c| {
            let base = if (r + c) % 2 == 0 { 0.1 } else { -0.1 };
            if r == 5 && c == 5 { 3.0 } else if r == 30 && c == 30 { 1.0 } else { base }
        });
        let s = image_snr(&img, &gt).unwrap().unwrap();
        let each: Vec<f64> = connected_components(&gt)
            .components
            .iter()
            .map(|t| snr_of_target(&img, &gt, t).unwrap().unwrap())
            .collect();
        assert_eq!(s, each.iter().cloned().fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn snr_subsets_nest() {
        let snrs = [Some(2.0), Some(3.5), None, Some(4.5), Some(6.0)];
        let a = snr_subset(&snrs, 3.0);
        let b = snr_subset(&snrs, 4.0);
        let c = snr_subset(&snrs, 5.0);
        assert_eq!(a, vec![0]);
        assert_eq!(b, vec![0, 1]);
        assert_eq!(c, vec![0, 1, 3]);
        assert!(a.iter().all(|i| b.contains(i)) && b.iter().all(|i| c.contains(i)));
    }
}

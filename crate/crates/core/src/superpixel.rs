//! SLIC superpixels and superpixel-guided selection refinement.
//!
//! **Segmentation.** Local k-means in a 5-D space: RGB scaled to `[0, 255]`
//! plus pixel coordinates, with the spatial axes weighted by
//! `compactness / S` where `S = sqrt(H * W / k)` is the expected superpixel
//! side. Cluster centers start on a near-square grid; each assignment pass
//! only searches a `2S x 2S` window around every center (with a full-scan
//! fallback for pixels no window covered), and centers move to the mean of
//! their pixels. After the final pass, labels are made 4-connected: each
//! label keeps its largest component, and every orphaned component merges
//! into the neighboring label it shares the longest boundary with.
//!
//! **Refinement.** Unselected pixels (`v = 0`) earn selection by neighbor
//! vote: if more than 4 of the 8 surrounding pixels (3x3 window, clipped at
//! the border) are selected, agree on a class, and lie in the same
//! superpixel, the pixel joins them. By default every vote is counted
//! against the *frozen* input mask, so the result is order-independent; the
//! in-place mode lets earlier flips (in row-major order) feed later votes.

use crate::error::{Error, Result};
use crate::pseudo::PseudoLabels;
use crate::tensor::Tensor;

/// SLIC settings.
#[derive(Debug, Clone, Copy)]
pub struct SlicParams {
    /// Requested superpixel count (the grid may round it slightly).
    pub k: usize,
    /// Spatial-vs-color weight; higher values give squarer superpixels.
    pub compactness: f64,
    /// Assignment/update rounds.
    pub iters: usize,
}

impl Default for SlicParams {
    fn default() -> SlicParams {
        SlicParams { k: 64, compactness: 10.0, iters: 10 }
    }
}

/// A superpixel segmentation: labels are compact, `0..count`, and each
/// label's pixels form one 4-connected region.
#[derive(Debug, Clone)]
pub struct SuperpixelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub count: usize,
}

impl SuperpixelMap {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.count];
        for l in &self.labels {
            sizes[*l as usize] += 1;
        }
        sizes
    }
}

/// Segments an `[H, W, 3]` image in `[0, 1]` into superpixels.
pub fn slic(image: &Tensor, params: &SlicParams) -> Result<SuperpixelMap> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape(format!("slic expects [H, W, 3], got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let n = h * w;
    if params.k == 0 || params.k > n {
        return Err(Error::invalid(format!("superpixel count {} out of range for {n} pixels", params.k)));
    }
    if !(params.compactness > 0.0) || params.iters == 0 {
        return Err(Error::invalid("compactness and iteration count must be positive".to_string()));
    }
    image.check_finite("slic input")?;

    let side = ((n as f64) / params.k as f64).sqrt();
    let spatial_w = params.compactness / side; // weight on coordinate axes
    let color = |i: usize, c: usize| image.data()[i * 3 + c] * 255.0;

    // Near-square grid of initial centers: (x, y, r, g, b).
    let nx = ((params.k as f64 * w as f64 / h as f64).sqrt().round() as usize).clamp(1, w);
    let ny = ((params.k as f64 / nx as f64).round() as usize).clamp(1, h);
    let mut centers: Vec<[f64; 5]> = Vec::with_capacity(nx * ny);
    for gy in 0..ny {
        for gx in 0..nx {
            let cx = (gx as f64 + 0.5) * w as f64 / nx as f64 - 0.5;
            let cy = (gy as f64 + 0.5) * h as f64 / ny as f64 - 0.5;
            let px = (cx.round() as isize).clamp(0, w as isize - 1) as usize;
            let py = (cy.round() as isize).clamp(0, h as isize - 1) as usize;
            let i = py * w + px;
            centers.push([cx, cy, color(i, 0), color(i, 1), color(i, 2)]);
        }
    }

    let mut assign = vec![usize::MAX; n];
    let mut best = vec![f64::INFINITY; n];
    for _ in 0..params.iters {
        assign.fill(usize::MAX);
        best.fill(f64::INFINITY);
        for (ci, c) in centers.iter().enumerate() {
            let x0 = ((c[0] - side).floor() as isize).max(0) as usize;
            let x1 = ((c[0] + side).ceil() as isize).min(w as isize - 1) as usize;
            let y0 = ((c[1] - side).floor() as isize).max(0) as usize;
            let y1 = ((c[1] + side).ceil() as isize).min(h as isize - 1) as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let i = y * w + x;
                    let d = center_distance(c, x, y, color(i, 0), color(i, 1), color(i, 2), spatial_w);
                    if d < best[i] {
                        best[i] = d;
                        assign[i] = ci;
                    }
                }
            }
        }
        // Pixels outside every window scan all centers.
        for i in 0..n {
            if assign[i] != usize::MAX {
                continue;
            }
            let (x, y) = (i % w, i / w);
            for (ci, c) in centers.iter().enumerate() {
                let d = center_distance(c, x, y, color(i, 0), color(i, 1), color(i, 2), spatial_w);
                if d < best[i] {
                    best[i] = d;
                    assign[i] = ci;
                }
            }
        }
        // Move centers to the mean of their pixels; empty clusters stay put.
        let mut acc = vec![[0.0f64; 5]; centers.len()];
        let mut cnt = vec![0usize; centers.len()];
        for i in 0..n {
            let ci = assign[i];
            let (x, y) = (i % w, i / w);
            acc[ci][0] += x as f64;
            acc[ci][1] += y as f64;
            acc[ci][2] += color(i, 0);
            acc[ci][3] += color(i, 1);
            acc[ci][4] += color(i, 2);
            cnt[ci] += 1;
        }
        for (ci, c) in centers.iter_mut().enumerate() {
            if cnt[ci] > 0 {
                for d in 0..5 {
                    c[d] = acc[ci][d] / cnt[ci] as f64;
                }
            }
        }
    }

    let labels = enforce_connectivity(&assign, h, w);
    let (labels, count) = compact_labels(&labels);
    Ok(SuperpixelMap { height: h, width: w, labels, count })
}

fn center_distance(c: &[f64; 5], x: usize, y: usize, r: f64, g: f64, b: f64, spatial_w: f64) -> f64 {
    let dx = (x as f64 - c[0]) * spatial_w;
    let dy = (y as f64 - c[1]) * spatial_w;
    let dr = r - c[2];
    let dg = g - c[3];
    let db = b - c[4];
    dr * dr + dg * dg + db * db + dx * dx + dy * dy
}

/// Keeps each label's largest 4-connected component and merges every other
/// component into the adjacent surviving label it touches most (ties to the
/// smallest label). Component sizes tie by scan order of first discovery.
fn enforce_connectivity(assign: &[usize], h: usize, w: usize) -> Vec<usize> {
    let n = h * w;
    let mut comp = vec![usize::MAX; n];
    let mut comp_pixels: Vec<Vec<usize>> = Vec::new();
    let mut comp_label: Vec<usize> = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = comp_pixels.len();
        let label = assign[start];
        let mut stack = vec![start];
        let mut pixels = Vec::new();
        comp[start] = id;
        while let Some(i) = stack.pop() {
            pixels.push(i);
            let (x, y) = (i % w, i / w);
            let mut push = |j: usize| {
                if comp[j] == usize::MAX && assign[j] == label {
                    comp[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
        }
        comp_pixels.push(pixels);
        comp_label.push(label);
    }

    // Largest component per label survives; earlier discovery wins ties.
    let mut keeper: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    for (id, pixels) in comp_pixels.iter().enumerate() {
        let e = keeper.entry(comp_label[id]).or_insert(id);
        if comp_pixels[*e].len() < pixels.len() {
            *e = id;
        }
    }
    let kept: Vec<bool> = (0..comp_pixels.len())
        .map(|id| keeper.get(&comp_label[id]) == Some(&id))
        .collect();

    let mut out: Vec<usize> = assign.to_vec();
    let mut settled: Vec<bool> = kept.clone();
    let mut pending: Vec<usize> = (0..comp_pixels.len()).filter(|id| !kept[*id]).collect();
    // Outermost orphan components always touch settled ground, so each pass
    // settles at least one and the loop terminates.
    while !pending.is_empty() {
        let mut next = Vec::new();
        let mut progressed = false;
        for &id in &pending {
            let mut votes: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
            for &i in &comp_pixels[id] {
                let (x, y) = (i % w, i / w);
                let mut look = |j: usize| {
                    if settled[comp[j]] && comp[j] != id {
                        *votes.entry(out[j]).or_insert(0) += 1;
                    }
                };
                if x > 0 {
                    look(i - 1);
                }
                if x + 1 < w {
                    look(i + 1);
                }
                if y > 0 {
                    look(i - w);
                }
                if y + 1 < h {
                    look(i + w);
                }
            }
            match votes.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) {
                Some((&label, _)) => {
                    for &i in &comp_pixels[id] {
                        out[i] = label;
                    }
                    settled[id] = true;
                    progressed = true;
                }
                None => next.push(id),
            }
        }
        assert!(progressed, "orphan superpixel components must touch settled ground");
        pending = next;
    }
    out
}

/// Renumbers labels to `0..count` by first appearance in scan order.
fn compact_labels(labels: &[usize]) -> (Vec<u32>, usize) {
    let mut map: std::collections::HashMap<usize, u32> = std::collections::HashMap::new();
    let mut out = Vec::with_capacity(labels.len());
    for &l in labels {
        let next = map.len() as u32;
        let id = *map.entry(l).or_insert(next);
        out.push(id);
    }
    (out, map.len())
}

/// Result of one refinement pass.
#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub labels: PseudoLabels,
    /// Pixels whose `v` flipped from 0 to 1.
    pub flipped: usize,
}

/// Neighbor-vote refinement of a selection mask (see module docs).
///
/// `in_place = false` (the default elsewhere) freezes the votes at the input
/// mask; `in_place = true` lets flips cascade in row-major order.
pub fn refine_selection(
    labels: &PseudoLabels,
    sp: &SuperpixelMap,
    k_classes: usize,
    in_place: bool,
) -> Result<RefineOutcome> {
    let (h, w) = (labels.height, labels.width);
    if sp.height != h || sp.width != w {
        return Err(Error::shape(format!(
            "superpixel map is {}x{}, labels are {h}x{w}",
            sp.height, sp.width
        )));
    }
    if let Some(bad) = labels.yhat.iter().find(|y| **y >= k_classes) {
        return Err(Error::invalid(format!("pseudo-class {bad} out of range for {k_classes} classes")));
    }
    let mut yhat = labels.yhat.clone();
    let mut v = labels.v.clone();
    let frozen_yhat = labels.yhat.clone();
    let frozen_v = labels.v.clone();
    let mut flipped = 0usize;
    let mut votes = vec![0usize; k_classes];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if v[i] {
                continue;
            }
            votes.iter_mut().for_each(|c| *c = 0);
            let (vote_v, vote_y): (&[bool], &[usize]) = if in_place {
                (&v, &yhat)
            } else {
                (&frozen_v, &frozen_yhat)
            };
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if vote_v[j] && sp.labels[j] == sp.labels[i] {
                        votes[vote_y[j]] += 1;
                    }
                }
            }
            let (k_best, count) = votes
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(k, c)| (k, *c))
                .unwrap_or((0, 0));
            if count > 4 {
                v[i] = true;
                yhat[i] = k_best;
                flipped += 1;
            }
        }
    }
    Ok(RefineOutcome {
        labels: PseudoLabels { height: h, width: w, yhat, v },
        flipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn constant_image(h: usize, w: usize, rgb: [f64; 3]) -> Tensor {
        Tensor::from_fn(&[h, w, 3], |i| rgb[i % 3])
    }

    fn assert_connected(map: &SuperpixelMap) {
        let (h, w) = (map.height, map.width);
        let mut seen_root = vec![false; map.count];
        let mut visited = vec![false; h * w];
        for start in 0..h * w {
            let l = map.labels[start] as usize;
            if visited[start] {
                continue;
            }
            assert!(!seen_root[l], "label {l} has multiple 4-connected components");
            seen_root[l] = true;
            let mut stack = vec![start];
            visited[start] = true;
            while let Some(i) = stack.pop() {
                let (x, y) = (i % w, i / w);
                for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !visited[j] && map.labels[j] == map.labels[start] {
                        visited[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        for (l, seen) in seen_root.iter().enumerate() {
            assert!(seen, "label {l} never appears");
        }
    }

    #[test]
    fn uniform_image_yields_a_grid() {
        let img = constant_image(16, 16, [0.5, 0.5, 0.5]);
        let map = slic(&img, &SlicParams { k: 4, compactness: 10.0, iters: 10 }).unwrap();
        assert_eq!(map.count, 4);
        let sizes = map.sizes();
        assert_eq!(sizes, vec![64, 64, 64, 64]);
        assert_connected(&map);
    }

    #[test]
    fn labels_are_compact_and_connected_on_textured_input() {
        for seed in 0..3u64 {
            let mut rng = crate::rngutil::derive_rng(seed, "slic-prop");
            let img = Tensor::from_fn(&[24, 16, 3], |_| rng.gen_range(0.0..1.0));
            let map = slic(&img, &SlicParams { k: 12, compactness: 10.0, iters: 10 }).unwrap();
            assert!(map.count >= 1 && map.count <= 24 * 16);
            assert_connected(&map);
            assert!(map.labels.iter().all(|l| (*l as usize) < map.count));
        }
    }

    #[test]
    fn strong_edges_are_respected() {
        // Left half black, right half white: no superpixel may span the edge.
        let img = Tensor::from_fn(&[16, 16, 3], |i| {
            let x = (i / 3) % 16;
            if x < 8 {
                0.0
            } else {
                1.0
            }
        });
        let map = slic(&img, &SlicParams { k: 4, compactness: 10.0, iters: 10 }).unwrap();
        for y in 0..16 {
            let left = map.labels[y * 16 + 7];
            let right = map.labels[y * 16 + 8];
            assert_ne!(left, right, "row {y} crosses the contrast edge");
        }
        assert_connected(&map);
    }

    #[test]
    fn slic_is_deterministic() {
        let mut rng = crate::rngutil::derive_rng(7, "slic-det");
        let img = Tensor::from_fn(&[16, 16, 3], |_| rng.gen_range(0.0..1.0));
        let a = slic(&img, &SlicParams::default()).unwrap();
        let b = slic(&img, &SlicParams::default()).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.count, b.count);
    }

    #[test]
    fn slic_rejects_bad_arguments() {
        let img = constant_image(8, 8, [0.1, 0.2, 0.3]);
        assert!(slic(&img, &SlicParams { k: 0, compactness: 10.0, iters: 10 }).is_err());
        assert!(slic(&img, &SlicParams { k: 65, compactness: 10.0, iters: 10 }).is_err());
        assert!(slic(&img, &SlicParams { k: 4, compactness: 0.0, iters: 10 }).is_err());
        assert!(slic(&Tensor::zeros(&[8, 8, 2]), &SlicParams::default()).is_err());
    }

    fn one_superpixel(h: usize, w: usize) -> SuperpixelMap {
        SuperpixelMap { height: h, width: w, labels: vec![0; h * w], count: 1 }
    }

    fn labels_from(h: usize, w: usize, yhat: Vec<usize>, sel: &[usize]) -> PseudoLabels {
        let mut v = vec![false; h * w];
        for &i in sel {
            v[i] = true;
        }
        PseudoLabels { height: h, width: w, yhat, v }
    }

    #[test]
    fn surrounded_pixel_joins_its_neighbors() {
        // 3x3, center unselected, all 8 neighbors selected class 1.
        let yhat = vec![1, 1, 1, 1, 0, 1, 1, 1, 1];
        let sel: Vec<usize> = (0..9).filter(|i| *i != 4).collect();
        let pl = labels_from(3, 3, yhat, &sel);
        let out = refine_selection(&pl, &one_superpixel(3, 3), 2, false).unwrap();
        assert_eq!(out.flipped, 1);
        assert!(out.labels.v[4]);
        assert_eq!(out.labels.yhat[4], 1, "the vote also fixes the class");
    }

    #[test]
    fn five_votes_flip_four_do_not() {
        for (n_sel, expect) in [(5usize, true), (4, false)] {
            let yhat = vec![1; 9];
            let sel: Vec<usize> = (0..9).filter(|i| *i != 4).take(n_sel).collect();
            let mut pl = labels_from(3, 3, yhat, &sel);
            pl.yhat[4] = 0;
            let out = refine_selection(&pl, &one_superpixel(3, 3), 2, false).unwrap();
            assert_eq!(out.labels.v[4], expect, "{n_sel} votes");
        }
    }

    #[test]
    fn votes_from_other_superpixels_do_not_count() {
        let yhat = vec![1; 9];
        let sel: Vec<usize> = (0..9).filter(|i| *i != 4).take(5).collect();
        let mut pl = labels_from(3, 3, yhat, &sel);
        pl.yhat[4] = 0;
        // Put one of the five voters in a different superpixel.
        let mut sp = one_superpixel(3, 3);
        sp.labels[sel[0]] = 1;
        sp.count = 2;
        let out = refine_selection(&pl, &sp, 2, false).unwrap();
        assert!(!out.labels.v[4], "4 same-superpixel votes must not flip");
    }

    #[test]
    fn corner_pixels_can_never_flip() {
        // A corner has only 3 neighbors, below the 5-vote requirement.
        let yhat = vec![1; 9];
        let sel: Vec<usize> = (1..9).collect();
        let mut pl = labels_from(3, 3, yhat, &sel);
        pl.yhat[0] = 0;
        let out = refine_selection(&pl, &one_superpixel(3, 3), 2, false).unwrap();
        assert!(!out.labels.v[0]);
    }

    #[test]
    fn refinement_is_monotone() {
        for seed in 0..5u64 {
            let mut rng = crate::rngutil::derive_rng(seed, "refine-mono");
            let (h, w) = (12, 12);
            let yhat: Vec<usize> = (0..h * w).map(|_| rng.gen_range(0..3)).collect();
            let v: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.6)).collect();
            let pl = PseudoLabels { height: h, width: w, yhat, v };
            // A fixed 3x3 grid of superpixels over the 12x12 frame.
            let sp = SuperpixelMap {
                height: h,
                width: w,
                labels: (0..h * w).map(|i| ((i / w / 4) * 3 + (i % w) / 4) as u32).collect(),
                count: 9,
            };
            for in_place in [false, true] {
                let out = refine_selection(&pl, &sp, 3, in_place).unwrap();
                for i in 0..h * w {
                    assert!(!pl.v[i] || out.labels.v[i], "refinement dropped pixel {i}");
                    if pl.v[i] {
                        assert_eq!(pl.yhat[i], out.labels.yhat[i], "selected classes must not change");
                    }
                }
                assert_eq!(
                    out.flipped,
                    out.labels.selected_count() - pl.selected_count()
                );
            }
        }
    }

    #[test]
    fn frozen_and_in_place_modes_differ_on_a_cascade() {
        // A = (1,1) flips on frozen votes alone; B = (1,2) reaches 5 votes
        // only if A's flip is visible, so only the in-place mode flips it.
        let (h, w) = (3usize, 4usize);
        let yhat = vec![0; h * w];
        let sel = [0usize, 1, 2, 3, 4, 8, 9];
        let pl = labels_from(h, w, yhat, &sel);
        let sp = one_superpixel(h, w);
        let frozen = refine_selection(&pl, &sp, 1, false).unwrap();
        let cascade = refine_selection(&pl, &sp, 1, true).unwrap();
        let a = w + 1;
        let b = w + 2;
        assert!(frozen.labels.v[a] && cascade.labels.v[a]);
        assert!(!frozen.labels.v[b], "frozen votes must not see A's flip");
        assert!(cascade.labels.v[b], "in-place votes must see A's flip");
    }

    #[test]
    fn refinement_rejects_mismatched_shapes() {
        let pl = labels_from(3, 3, vec![0; 9], &[]);
        let sp = one_superpixel(3, 4);
        assert!(refine_selection(&pl, &sp, 2, false).is_err());
    }
}

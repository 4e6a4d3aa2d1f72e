//! Heatmap-driven, group-wise object query initialisation.
//!
//! Classes are partitioned into groups; each group contributes its `k`
//! strongest local peaks of the class-wise heatmap maxima as reference points.
//! Query content comes from a learned per-group embedding, so every query of
//! a group starts from the same feature vector.

use std::cmp::Ordering;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::geometry::BevGrid;
use crate::labels::{Box3d, ObjectClass, N_CLASSES};
use crate::ops::sigmoid;
use crate::tensor::{LinearMap, ParamSet, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    /// Class ids per group; groups are disjoint.
    pub groups: Vec<Vec<usize>>,
    pub queries_per_group: usize,
}

impl Default for GroupSpec {
    fn default() -> Self {
        use ObjectClass::*;
        let ids = |cs: &[ObjectClass]| cs.iter().map(|c| c.index()).collect();
        Self {
            groups: vec![
                ids(&[Car]),
                ids(&[Truck, ConstructionVehicle]),
                ids(&[Bus, Trailer]),
                ids(&[Barrier]),
                ids(&[Motorcycle, Bicycle]),
                ids(&[Pedestrian, TrafficCone]),
            ],
            queries_per_group: 150,
        }
    }
}

impl GroupSpec {
    pub fn new(groups: Vec<Vec<usize>>, queries_per_group: usize) -> Result<Self> {
        let spec = Self {
            groups,
            queries_per_group,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The default partition with a different per-group query count.
    pub fn with_queries_per_group(k: usize) -> Self {
        Self {
            queries_per_group: k,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() || self.queries_per_group == 0 {
            return Err(invalid("need at least one group and one query per group"));
        }
        let mut seen = [false; N_CLASSES];
        for g in &self.groups {
            if g.is_empty() {
                return Err(invalid("empty class group"));
            }
            for &c in g {
                if c >= N_CLASSES {
                    return Err(invalid(format!("class id {c} out of range")));
                }
                if std::mem::replace(&mut seen[c], true) {
                    return Err(invalid(format!("class {c} appears in more than one group")));
                }
            }
        }
        Ok(())
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_queries(&self) -> usize {
        self.groups.len() * self.queries_per_group
    }

    pub fn group_of(&self, class: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&class))
    }
}

/// Per-class Gaussian heatmap targets `[N_CLASSES, H, W]` and the number of
/// boxes skipped because their centre lies outside the grid.
///
/// A box paints `exp(-d² / 2σ²)` (distance in cells from its nearest cell
/// centre) with `σ = max(1, min(l, w) / (3 · cell))`; overlaps keep the max.
pub fn gaussian_target(boxes: &[Box3d], grid: &BevGrid) -> (Tensor, usize) {
    let (h, w) = (grid.height(), grid.width());
    let cell = 0.5 * (grid.cell_size_x() + grid.cell_size_y());
    let mut target = Tensor::zeros(&[N_CLASSES, h, w]);
    let mut skipped = 0;
    for b in boxes {
        let Some((u0, v0)) = grid
            .contains_xy(b.center[0], b.center[1])
            .then(|| grid.nearest_cell(b.center[0], b.center[1]))
            .flatten()
        else {
            skipped += 1;
            continue;
        };
        let sigma = (b.size[0].min(b.size[1]) / (3.0 * cell)).max(1.0);
        let inv = 1.0 / (2.0 * sigma * sigma);
        let plane = &mut target.data_mut()[b.class.index() * h * w..(b.class.index() + 1) * h * w];
        for v in 0..h {
            let dv = v as f64 - v0 as f64;
            for u in 0..w {
                let du = u as f64 - u0 as f64;
                let val = (-(du * du + dv * dv) * inv).exp();
                let slot = &mut plane[v * w + u];
                if val > *slot {
                    *slot = val;
                }
            }
        }
    }
    (target, skipped)
}

/// Per-cell classification logits `[N_classes, H, W]` from the fused BEV.
pub fn heatmap_logits(head: &LinearMap, bev: &Tensor) -> Result<Tensor> {
    let (c, h, w) = bev.chw()?;
    if head.in_dim() != c {
        return Err(shape_err(format!("heatmap head expects {} channels, BEV has {c}", head.in_dim())));
    }
    let k = head.out_dim();
    let cells: Vec<Vec<f64>> = (0..h * w)
        .into_par_iter()
        .map(|idx| head.forward(&bev.cell(idx / w, idx % w)))
        .collect();
    let mut out = Tensor::zeros(&[k, h, w]);
    for (idx, cell) in cells.iter().enumerate() {
        out.set_cell(idx / w, idx % w, cell);
    }
    Ok(out)
}

/// `sigmoid(heatmap_logits)`.
pub fn predict_heatmaps(head: &LinearMap, bev: &Tensor) -> Result<Tensor> {
    let mut t = heatmap_logits(head, bev)?;
    for x in t.data_mut() {
        *x = sigmoid(*x);
    }
    Ok(t)
}

/// Backward of [`heatmap_logits`]; returns `d bev`.
pub fn heatmap_backward(head: &LinearMap, bev: &Tensor, d_logits: &Tensor, grad: &mut LinearMap) -> Result<Tensor> {
    let (c, h, w) = bev.chw()?;
    let mut d_bev = Tensor::zeros(&[c, h, w]);
    for idx in 0..h * w {
        let (v, u) = (idx / w, idx % w);
        let dy = d_logits.cell(v, u);
        let dx = head.backward(&bev.cell(v, u), &dy, grad);
        d_bev.set_cell(v, u, &dx);
    }
    Ok(d_bev)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Keypoint {
    pub u: usize,
    pub v: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupKeypoints {
    pub group: usize,
    pub points: Vec<Keypoint>,
}

/// Max over each group's class channels, `[G, H, W]`.
pub fn group_maxima(heatmaps: &Tensor, spec: &GroupSpec) -> Result<Tensor> {
    let (k, h, w) = heatmaps.chw()?;
    spec.validate()?;
    if let Some(c) = spec.groups.iter().flatten().find(|c| **c >= k) {
        return Err(shape_err(format!("class {c} but heatmaps have {k} channels")));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(&[spec.n_groups(), h, w]);
    for (g, classes) in spec.groups.iter().enumerate() {
        let dst = &mut out.data_mut()[g * plane..(g + 1) * plane];
        dst.fill(f64::NEG_INFINITY);
        for &c in classes {
            let src = &heatmaps.data()[c * plane..(c + 1) * plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = d.max(*s);
            }
        }
    }
    Ok(out)
}

/// Whether cell `idx` is at least as large as every in-bounds 8-neighbour.
fn is_local_max(map: &[f64], h: usize, w: usize, idx: usize) -> bool {
    let (v, u) = (idx / w, idx % w);
    let x = map[idx];
    for dv in -1i64..=1 {
        for du in -1i64..=1 {
            if du == 0 && dv == 0 {
                continue;
            }
            let (nv, nu) = (v as i64 + dv, u as i64 + du);
            if nv < 0 || nu < 0 || nv >= h as i64 || nu >= w as i64 {
                continue;
            }
            if map[nv as usize * w + nu as usize] > x {
                return false;
            }
        }
    }
    true
}

fn by_score_then_index(map: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |a, b| map[*b].total_cmp(&map[*a]).then(a.cmp(b))
}

/// The `k` strongest 3×3 local maxima per group, ordered by descending score
/// and then row-major index. When a group has fewer than `k` peaks the list
/// is topped up with the strongest suppressed cells.
pub fn topk_keypoints(heatmaps: &Tensor, spec: &GroupSpec) -> Result<Vec<GroupKeypoints>> {
    let maxima = group_maxima(heatmaps, spec)?;
    let (_, h, w) = maxima.chw()?;
    let k = spec.queries_per_group;
    if k > h * w {
        return Err(invalid(format!("{k} queries per group exceed {} cells", h * w)));
    }
    let plane = h * w;
    Ok((0..spec.n_groups())
        .map(|g| {
            let map = &maxima.data()[g * plane..(g + 1) * plane];
            let (mut peaks, mut rest): (Vec<usize>, Vec<usize>) =
                (0..plane).partition(|&i| is_local_max(map, h, w, i));
            peaks.sort_by(by_score_then_index(map));
            peaks.truncate(k);
            if peaks.len() < k {
                rest.sort_by(by_score_then_index(map));
                peaks.extend(rest.into_iter().take(k - peaks.len()));
            }
            GroupKeypoints {
                group: g,
                points: peaks
                    .into_iter()
                    .map(|i| Keypoint {
                        u: i % w,
                        v: i / w,
                        score: map[i],
                    })
                    .collect(),
            }
        })
        .collect())
}

/// How query content and reference points are initialised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryInit {
    /// Heatmap reference points, one learned embedding per group.
    #[default]
    MixedGroupwise,
    /// Heatmap reference points, one learned embedding per query.
    MixedInstancewise,
    /// Learned embeddings with fixed, input-independent reference points.
    Learnable,
    /// Heatmap reference points, content read from the fused BEV at the peak.
    Heatmap,
}

impl QueryInit {
    pub fn uses_heatmap(self) -> bool {
        self != QueryInit::Learnable
    }
}

/// Learned query content for one [`QueryInit`] mode.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryEmbedding {
    pub mode: QueryInit,
    /// `[G, C]` (group-wise) or `[N_q, C]` (per query); absent for
    /// [`QueryInit::Heatmap`].
    pub table: Option<Tensor>,
    /// Reference points for [`QueryInit::Learnable`], in cell coordinates.
    pub fixed_refs: Option<Vec<[f64; 2]>>,
}

impl QueryEmbedding {
    pub fn new<R: Rng + ?Sized>(mode: QueryInit, spec: &GroupSpec, channels: usize, grid: &BevGrid, rng: &mut R) -> Self {
        let rows = match mode {
            QueryInit::MixedGroupwise => Some(spec.n_groups()),
            QueryInit::MixedInstancewise | QueryInit::Learnable => Some(spec.n_queries()),
            QueryInit::Heatmap => None,
        };
        let table = rows.map(|r| Tensor::random_normal(&[r, channels], 1.0, rng));
        let fixed_refs = (mode == QueryInit::Learnable).then(|| {
            (0..spec.n_queries())
                .map(|_| {
                    [
                        rng.random_range(0.0..(grid.width() - 1) as f64),
                        rng.random_range(0.0..(grid.height() - 1) as f64),
                    ]
                })
                .collect()
        });
        Self {
            mode,
            table,
            fixed_refs,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_();
        z
    }
}

impl ParamSet for QueryEmbedding {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        self.table.iter().map(|t| ("table".to_string(), t)).collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.table.iter_mut().map(|t| ("table".to_string(), t)).collect()
    }
}

/// Initial decoder queries.
#[derive(Clone, Debug, PartialEq)]
pub struct Queries {
    /// `N_q` content vectors of length `C`.
    pub features: Vec<Vec<f64>>,
    /// Reference points `(u, v)` in cell coordinates.
    pub ref_points: Vec<[f64; 2]>,
    /// Group of each query.
    pub groups: Vec<usize>,
}

impl Queries {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

fn table_row(table: &Tensor, r: usize) -> Vec<f64> {
    let c = table.dim(1);
    table.data()[r * c..(r + 1) * c].to_vec()
}

/// Builds `N_q = G · k` queries, group-major.
pub fn init_queries(
    emb: &QueryEmbedding,
    bev_fuse: &Tensor,
    keypoints: &[GroupKeypoints],
    spec: &GroupSpec,
) -> Result<Queries> {
    let (c, _, _) = bev_fuse.chw()?;
    let k = spec.queries_per_group;
    if let Some(t) = &emb.table {
        if t.dim(1) != c {
            return Err(shape_err(format!("query embedding has {} channels, BEV has {c}", t.dim(1))));
        }
    }
    let n_q = spec.n_queries();
    let mut q = Queries {
        features: Vec::with_capacity(n_q),
        ref_points: Vec::with_capacity(n_q),
        groups: Vec::with_capacity(n_q),
    };
    if emb.mode.uses_heatmap() && (keypoints.len() != spec.n_groups() || keypoints.iter().any(|g| g.points.len() != k)) {
        return Err(shape_err(format!("expected {} groups of {k} keypoints", spec.n_groups())));
    }
    for g in 0..spec.n_groups() {
        for j in 0..k {
            let i = g * k + j;
            let (feature, point) = match emb.mode {
                QueryInit::MixedGroupwise => {
                    let kp = keypoints[g].points[j];
                    (table_row(table(emb)?, g), [kp.u as f64, kp.v as f64])
                }
                QueryInit::MixedInstancewise => {
                    let kp = keypoints[g].points[j];
                    (table_row(table(emb)?, i), [kp.u as f64, kp.v as f64])
                }
                QueryInit::Learnable => {
                    let refs = emb.fixed_refs.as_ref().ok_or(Error::Empty("learned reference points"))?;
                    (table_row(table(emb)?, i), refs[i])
                }
                QueryInit::Heatmap => {
                    let kp = keypoints[g].points[j];
                    (bev_fuse.cell(kp.v, kp.u), [kp.u as f64, kp.v as f64])
                }
            };
            q.features.push(feature);
            q.ref_points.push(point);
            q.groups.push(g);
        }
    }
    Ok(q)
}

fn table(emb: &QueryEmbedding) -> Result<&Tensor> {
    emb.table.as_ref().ok_or(Error::Empty("query embedding table"))
}

/// Routes query-feature gradients back to the embedding table or, for
/// [`QueryInit::Heatmap`], to the fused BEV cells the queries were read from.
pub fn init_queries_backward(
    emb: &QueryEmbedding,
    queries: &Queries,
    d_features: &[Vec<f64>],
    spec: &GroupSpec,
    grad: &mut QueryEmbedding,
    d_bev: &mut Tensor,
) {
    let k = spec.queries_per_group;
    for (i, dq) in d_features.iter().enumerate() {
        let row = match emb.mode {
            QueryInit::MixedGroupwise => Some(i / k),
            QueryInit::MixedInstancewise | QueryInit::Learnable => Some(i),
            QueryInit::Heatmap => None,
        };
        match (row, grad.table.as_mut()) {
            (Some(r), Some(t)) => {
                let c = t.dim(1);
                for (d, g) in t.data_mut()[r * c..(r + 1) * c].iter_mut().zip(dq) {
                    *d += g;
                }
            }
            _ => {
                let [u, v] = queries.ref_points[i];
                d_bev.add_to_cell(v as usize, u as usize, dq);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_partition() {
        let s = GroupSpec::default();
        assert_eq!(s.n_groups(), 6);
        assert_eq!(s.n_queries(), 900);
        assert_eq!(s.group_of(ObjectClass::TrafficCone.index()), Some(5));
        assert!(GroupSpec::new(vec![vec![0], vec![0, 1]], 3).is_err());
        assert!(GroupSpec::new(vec![vec![]], 3).is_err());
        assert!(GroupSpec::new(vec![vec![10]], 3).is_err());
    }

    #[test]
    fn single_car_peak() {
        let grid = BevGrid::default();
        let b = Box3d::new(ObjectClass::Car, [0.3, 0.3, 0.0], [4.0, 2.0, 1.5], 0.0).unwrap();
        let (t, skipped) = gaussian_target(&[b], &grid);
        assert_eq!(skipped, 0);
        let (u, v) = grid.nearest_cell(0.3, 0.3).unwrap();
        assert_eq!(t.at3(0, v, u), 1.0);
        let max_other = t.data()[180 * 180..].iter().cloned().fold(0.0, f64::max);
        assert_eq!(max_other, 0.0);
        let sigma: f64 = 2.0 / (3.0 * 0.6);
        assert!((t.at3(0, v, u + 1) - (-0.5 / (sigma * sigma)).exp()).abs() < 1e-12);

        let out = Box3d::new(ObjectClass::Car, [80.0, 0.0, 0.0], [4.0, 2.0, 1.5], 0.0).unwrap();
        let (t, skipped) = gaussian_target(&[out], &grid);
        assert_eq!(skipped, 1);
        assert_eq!(t.sum(), 0.0);
    }

    #[test]
    fn topk_tiny_example_and_fill() {
        let mut hm = Tensor::zeros(&[N_CLASSES, 3, 3]);
        hm.set3(0, 1, 1, 0.9);
        hm.set3(0, 0, 0, 0.5);
        let spec = GroupSpec::new(vec![vec![0]], 1).unwrap();
        let kp = topk_keypoints(&hm, &spec).unwrap();
        assert_eq!(kp[0].points, vec![Keypoint { u: 1, v: 1, score: 0.9 }]);

        let spec = GroupSpec::new(vec![vec![0]], 3).unwrap();
        let kp = topk_keypoints(&hm, &spec).unwrap();
        let cells: Vec<(usize, usize)> = kp[0].points.iter().map(|p| (p.u, p.v)).collect();
        // the only peak, then the strongest suppressed cell, then row-major zeros
        assert_eq!(cells, vec![(1, 1), (0, 0), (1, 0)]);

        let spec = GroupSpec::new(vec![vec![0]], 10).unwrap();
        assert!(topk_keypoints(&hm, &spec).is_err());
    }

    #[test]
    fn group_max_merges_classes() {
        let mut hm = Tensor::zeros(&[N_CLASSES, 4, 4]);
        hm.set3(1, 0, 0, 0.4);
        hm.set3(2, 3, 3, 0.8);
        let spec = GroupSpec::new(vec![vec![1, 2]], 2).unwrap();
        let kp = topk_keypoints(&hm, &spec).unwrap();
        assert_eq!((kp[0].points[0].u, kp[0].points[0].v), (3, 3));
        assert_eq!((kp[0].points[1].u, kp[0].points[1].v), (0, 0));
    }

    #[test]
    fn groupwise_queries_share_content() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = BevGrid::square(8.0, 16);
        let spec = GroupSpec::with_queries_per_group(5);
        let emb = QueryEmbedding::new(QueryInit::MixedGroupwise, &spec, 4, &grid, &mut rng);
        let bev = Tensor::random_normal(&[4, 16, 16], 1.0, &mut rng);
        let hm = Tensor::from_fn(&[N_CLASSES, 16, 16], |_| rng.random::<f64>());
        let kp = topk_keypoints(&hm, &spec).unwrap();
        let q = init_queries(&emb, &bev, &kp, &spec).unwrap();
        assert_eq!(q.len(), 30);
        for g in 0..6 {
            let first = &q.features[g * 5];
            assert!(q.features[g * 5..(g + 1) * 5].iter().all(|f| f == first));
            assert_eq!(q.ref_points[g * 5], [kp[g].points[0].u as f64, kp[g].points[0].v as f64]);
        }
        assert_ne!(q.features[0], q.features[5]);
    }
}

//! Adaptive octrees for dynamic-label bookkeeping.
//!
//! A frame's sparse radar cloud is indexed by an octree whose leaves carry
//! binary dynamic labels. Labels move to the dense enhanced cloud by a
//! k-nearest-leaf majority vote, the enhanced cloud is re-indexed at the same
//! depth, and face-adjacent dynamic leaves are clustered, with every node on
//! each leaf-to-LCA path flagged for downstream consumers.
//!
//! Nodes live in an arena (`Vec<OctreeNode>`, ids are indices); children are
//! always created in octant order, so identical inputs produce identical
//! trees.

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Octant index of `p` relative to `center`: bit 0 = x, bit 1 = y, bit 2 = z,
/// set when the coordinate is >= the center (boundary points go up).
#[inline]
fn octant(p: Vec3, center: Vec3) -> usize {
    (p[0] >= center[0]) as usize
        | (((p[1] >= center[1]) as usize) << 1)
        | (((p[2] >= center[2]) as usize) << 2)
}

#[inline]
fn child_center(center: Vec3, half: f64, oct: usize) -> Vec3 {
    let q = half * 0.5;
    [
        center[0] + if oct & 1 != 0 { q } else { -q },
        center[1] + if oct & 2 != 0 { q } else { -q },
        center[2] + if oct & 4 != 0 { q } else { -q },
    ]
}

#[derive(Debug, Clone)]
pub struct OctreeNode {
    pub center: Vec3,
    pub half: f64,
    pub depth: u32,
    pub parent: Option<u32>,
    /// None for leaves; ids of the 8 children in octant order otherwise.
    pub children: Option<[u32; 8]>,
    /// Point indices, leaves only.
    pub points: Vec<u32>,
    /// Subtree point count (cached for query pruning).
    pub count: u32,
    /// Dynamic label L(n).
    pub label: bool,
    /// True when the node lies on some cluster's leaf-to-LCA path.
    pub marked: bool,
}

impl OctreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }

    /// Squared distance from `p` to this node's cell (0 inside).
    fn cell_dist2(&self, p: Vec3) -> f64 {
        let mut d2 = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]).abs() - self.half;
            if d > 0.0 {
                d2 += d * d;
            }
        }
        d2
    }

    fn center_dist2(&self, p: Vec3) -> f64 {
        let mut d2 = 0.0;
        for a in 0..3 {
            let d = p[a] - self.center[a];
            d2 += d * d;
        }
        d2
    }
}

/// Arena octree over one frame's points. Empty input is a valid empty tree
/// (no nodes).
#[derive(Debug, Clone, Default)]
pub struct LabeledOctree {
    pub nodes: Vec<OctreeNode>,
    pub max_depth: u32,
    /// Leaf id for each input point.
    pub point_leaf: Vec<u32>,
}

/// Axis-aligned bounding cube of `points`, inflated by 5%.
/// Degenerate clouds get a minimum half-extent so the cube stays a volume.
pub fn bounding_cube(points: &[Vec3]) -> (Vec3, f64) {
    if points.is_empty() {
        return ([0.0; 3], 1.0);
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let center = [
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ];
    let half = (0..3)
        .map(|a| (hi[a] - lo[a]) * 0.5)
        .fold(0.0f64, f64::max)
        .max(1e-3)
        * 1.05;
    (center, half)
}

fn build_rec(
    nodes: &mut Vec<OctreeNode>,
    point_leaf: &mut [u32],
    points: &[Vec3],
    idxs: Vec<u32>,
    center: Vec3,
    half: f64,
    depth: u32,
    lambda: u32,
    parent: Option<u32>,
) -> u32 {
    let id = nodes.len() as u32;
    let count = idxs.len() as u32;
    nodes.push(OctreeNode {
        center,
        half,
        depth,
        parent,
        children: None,
        points: Vec::new(),
        count,
        label: false,
        marked: false,
    });
    if idxs.len() <= 1 || depth == lambda {
        for &pi in &idxs {
            point_leaf[pi as usize] = id;
        }
        nodes[id as usize].points = idxs;
        return id;
    }
    let mut buckets: [Vec<u32>; 8] = Default::default();
    for pi in idxs {
        buckets[octant(points[pi as usize], center)].push(pi);
    }
    let mut children = [0u32; 8];
    for (oct, bucket) in buckets.into_iter().enumerate() {
        children[oct] = build_rec(
            nodes,
            point_leaf,
            points,
            bucket,
            child_center(center, half, oct),
            half * 0.5,
            depth + 1,
            lambda,
            Some(id),
        );
    }
    nodes[id as usize].children = Some(children);
    id
}

/// Build an adaptive octree of depth at most `lambda` over `points` inside
/// the cube `bounds` = (center, half-extent). Subdivision stops when a cell
/// holds at most one point. Points outside the bounds are an error naming
/// the first offending index.
pub fn build_octree(points: &[Vec3], lambda: u32, bounds: (Vec3, f64)) -> Result<LabeledOctree> {
    if !(1..=12).contains(&lambda) {
        return Err(Error::config("lambda", "octree depth must be in [1, 12]"));
    }
    let (center, half) = bounds;
    let tol = half * 1e-12;
    for (i, p) in points.iter().enumerate() {
        for a in 0..3 {
            if (p[a] - center[a]).abs() > half + tol {
                return Err(Error::PointOutOfBounds { index: i });
            }
        }
    }
    let mut tree = LabeledOctree {
        nodes: Vec::new(),
        max_depth: lambda,
        point_leaf: vec![u32::MAX; points.len()],
    };
    if points.is_empty() {
        return Ok(tree);
    }
    let idxs: Vec<u32> = (0..points.len() as u32).collect();
    let mut point_leaf = std::mem::take(&mut tree.point_leaf);
    build_rec(
        &mut tree.nodes,
        &mut point_leaf,
        points,
        idxs,
        center,
        half,
        0,
        lambda,
        None,
    );
    tree.point_leaf = point_leaf;
    Ok(tree)
}

/// Set leaf labels from a set of dynamic point indices: a leaf gets L=1
/// exactly when it contains at least one listed point. All other labels
/// (including internal nodes) are cleared.
pub fn label_from_dynamic_indices(mut tree: LabeledOctree, dynamic_indices: &[u32]) -> LabeledOctree {
    for node in tree.nodes.iter_mut() {
        node.label = false;
        node.marked = false;
    }
    for &pi in dynamic_indices {
        debug_assert!((pi as usize) < tree.point_leaf.len(), "invalid point index");
        if let Some(&leaf) = tree.point_leaf.get(pi as usize) {
            if leaf != u32::MAX {
                tree.nodes[leaf as usize].label = true;
            }
        }
    }
    tree
}

/// Heap entry for best-first nearest-leaf traversal. Internal nodes are
/// keyed by distance to their cell (a lower bound on any descendant leaf's
/// center distance); leaves are keyed by their center distance, so popping a
/// leaf certifies it as the nearest remaining one. Ties break on node id.
struct Frontier {
    key: f64,
    id: u32,
    leaf: bool,
}

impl PartialEq for Frontier {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Frontier {}
impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed so BinaryHeap acts as a min-heap.
        other
            .key
            .total_cmp(&self.key)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl LabeledOctree {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty() || self.nodes[0].count == 0
    }

    /// Ids of the up-to-k non-empty leaves nearest to `p` by center
    /// distance, nearest first; distance ties resolve to the lower node id.
    pub fn nearest_leaves(&self, p: Vec3, k: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(k);
        if self.nodes.is_empty() || k == 0 {
            return out;
        }
        let mut heap = BinaryHeap::new();
        if self.nodes[0].count > 0 {
            heap.push(Frontier {
                key: self.nodes[0].cell_dist2(p),
                id: 0,
                leaf: false,
            });
        }
        while let Some(front) = heap.pop() {
            let node = &self.nodes[front.id as usize];
            if front.leaf {
                out.push(front.id);
                if out.len() == k {
                    break;
                }
                continue;
            }
            match node.children {
                None => {
                    // Non-empty leaf reached via its cell bound; re-queue on
                    // its true center distance.
                    heap.push(Frontier {
                        key: node.center_dist2(p),
                        id: front.id,
                        leaf: true,
                    });
                }
                Some(children) => {
                    for c in children {
                        if self.nodes[c as usize].count > 0 {
                            heap.push(Frontier {
                                key: self.nodes[c as usize].cell_dist2(p),
                                id: c,
                                leaf: false,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    /// All non-empty leaf ids in arena order.
    pub fn occupied_leaves(&self) -> Vec<u32> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.is_leaf() && n.count > 0)
            .map(|(i, _)| i as u32)
            .collect()
    }

    /// Leaf ids with L=1 in arena order.
    pub fn dynamic_leaves(&self) -> Vec<u32> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.is_leaf() && n.label)
            .map(|(i, _)| i as u32)
            .collect()
    }
}

/// Vote labels onto `enhanced` points: a point is dynamic when more than
/// half of the k nearest labeled leaves (by center distance) carry L=1.
/// `k` must be odd so the strict majority is unambiguous.
pub fn propagate_labels(
    raw_tree: &LabeledOctree,
    enhanced: &[Vec3],
    k: usize,
) -> Result<Vec<bool>> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::config("k_neighbors", "must be odd and positive"));
    }
    if raw_tree.is_empty() {
        return Ok(vec![false; enhanced.len()]);
    }
    Ok(enhanced
        .iter()
        .map(|&p| {
            let near = raw_tree.nearest_leaves(p, k);
            if near.is_empty() {
                return false;
            }
            let votes = near
                .iter()
                .filter(|&&id| raw_tree.nodes[id as usize].label)
                .count();
            (votes as f64) > (near.len() as f64) / 2.0
        })
        .collect())
}

/// Re-index a labeled dense cloud at depth `lambda`. Leaf labels come from
/// the contained points, internal labels flag any dynamic point in the
/// subtree, and empty leaves inherit their parent's label.
pub fn rebuild_enhanced_octree(
    points: &[Vec3],
    labels: &[bool],
    lambda: u32,
) -> Result<LabeledOctree> {
    debug_assert_eq!(points.len(), labels.len());
    let bounds = bounding_cube(points);
    let mut tree = build_octree(points, lambda, bounds)?;
    // Bottom-up: a node is dynamic iff its subtree holds a dynamic point.
    // Children follow their parent in the arena, so a reverse scan sees
    // every child before its parent.
    for id in (0..tree.nodes.len()).rev() {
        let lab = match tree.nodes[id].children {
            None => tree.nodes[id]
                .points
                .iter()
                .any(|&pi| labels[pi as usize]),
            Some(children) => children
                .iter()
                .any(|&c| tree.nodes[c as usize].count > 0 && tree.nodes[c as usize].label),
        };
        tree.nodes[id].label = lab;
    }
    // Top-down: empty leaves inherit the parent label.
    for id in 0..tree.nodes.len() {
        if tree.nodes[id].count == 0 {
            if let Some(parent) = tree.nodes[id].parent {
                tree.nodes[id].label = tree.nodes[parent as usize].label;
            }
        }
    }
    Ok(tree)
}

/// A face-connected component of dynamic leaves.
#[derive(Debug, Clone)]
pub struct DynamicCluster {
    /// Member leaf ids, ascending.
    pub leaves: Vec<u32>,
    /// Lowest common ancestor of all member leaves.
    pub lca: u32,
    pub bbox_min: Vec3,
    pub bbox_max: Vec3,
}

/// True when the two cells share a face: contact on exactly one axis with
/// overlap (not mere touch) on the other two.
fn share_face(a: &OctreeNode, b: &OctreeNode, eps: f64) -> bool {
    let mut contact = 0;
    let mut overlap = 0;
    for ax in 0..3 {
        let d = (a.center[ax] - b.center[ax]).abs();
        let s = a.half + b.half;
        if (d - s).abs() <= eps {
            contact += 1;
        } else if d < s - eps {
            overlap += 1;
        } else {
            return false; // separated on this axis
        }
    }
    contact == 1 && overlap == 2
}

fn lca_of(tree: &LabeledOctree, mut a: u32, mut b: u32) -> u32 {
    while tree.nodes[a as usize].depth > tree.nodes[b as usize].depth {
        a = tree.nodes[a as usize].parent.unwrap();
    }
    while tree.nodes[b as usize].depth > tree.nodes[a as usize].depth {
        b = tree.nodes[b as usize].parent.unwrap();
    }
    while a != b {
        a = tree.nodes[a as usize].parent.unwrap();
        b = tree.nodes[b as usize].parent.unwrap();
    }
    a
}

/// Cluster dynamic leaves into face-adjacency components and mark every node
/// on each leaf-to-LCA path. Previous marks are cleared first; clusters are
/// ordered by their smallest member leaf id.
pub fn cluster_and_mark(tree: &mut LabeledOctree) -> Vec<DynamicCluster> {
    for node in tree.nodes.iter_mut() {
        node.marked = false;
    }
    let dyn_leaves = tree.dynamic_leaves();
    if dyn_leaves.is_empty() {
        return Vec::new();
    }
    let eps = tree.nodes[0].half * 1e-9;
    // Union-find over positions in dyn_leaves.
    let mut parent: Vec<usize> = (0..dyn_leaves.len()).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..dyn_leaves.len() {
        for j in (i + 1)..dyn_leaves.len() {
            let (a, b) = (
                &tree.nodes[dyn_leaves[i] as usize],
                &tree.nodes[dyn_leaves[j] as usize],
            );
            if share_face(a, b, eps) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    // Attach the larger root under the smaller to keep
                    // component representatives at the smallest index.
                    let (lo, hi) = if ri < rj { (ri, rj) } else { (rj, ri) };
                    parent[hi] = lo;
                }
            }
        }
    }
    let mut groups: Vec<Vec<u32>> = vec![Vec::new(); dyn_leaves.len()];
    for (pos, &leaf) in dyn_leaves.iter().enumerate() {
        groups[find(&mut parent, pos)].push(leaf);
    }
    let mut clusters = Vec::new();
    for leaves in groups.into_iter().filter(|g| !g.is_empty()) {
        let mut lca = leaves[0];
        for &l in &leaves[1..] {
            lca = lca_of(tree, lca, l);
        }
        let mut bbox_min = [f64::INFINITY; 3];
        let mut bbox_max = [f64::NEG_INFINITY; 3];
        for &l in &leaves {
            // Mark the path leaf -> LCA inclusive.
            let mut cur = l;
            loop {
                tree.nodes[cur as usize].marked = true;
                if cur == lca {
                    break;
                }
                cur = tree.nodes[cur as usize].parent.unwrap();
            }
            let n = &tree.nodes[l as usize];
            for a in 0..3 {
                bbox_min[a] = bbox_min[a].min(n.center[a] - n.half);
                bbox_max[a] = bbox_max[a].max(n.center[a] + n.half);
            }
        }
        clusters.push(DynamicCluster {
            leaves,
            lca,
            bbox_min,
            bbox_max,
        });
    }
    clusters
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn unit_bounds() -> (Vec3, f64) {
        ([0.0; 3], 1.0)
    }

    #[test]
    fn single_point_single_leaf() {
        let tree = build_octree(&[[0.25, -0.3, 0.1]], 6, unit_bounds()).unwrap();
        assert_eq!(tree.nodes.len(), 1);
        assert!(tree.nodes[0].is_leaf());
        assert_eq!(tree.point_leaf, vec![0]);
    }

    #[test]
    fn octant_centers_make_eight_leaves() {
        let mut pts = Vec::new();
        for oct in 0..8 {
            pts.push(child_center([0.0; 3], 1.0, oct));
        }
        let tree = build_octree(&pts, 1, unit_bounds()).unwrap();
        let leaves = tree.occupied_leaves();
        assert_eq!(leaves.len(), 8);
        for id in leaves {
            assert_eq!(tree.nodes[id as usize].points.len(), 1);
            assert_eq!(tree.nodes[id as usize].depth, 1);
        }
    }

    #[test]
    fn out_of_bounds_point_is_named() {
        let pts = vec![[0.0; 3], [2.0, 0.0, 0.0]];
        match build_octree(&pts, 4, unit_bounds()) {
            Err(Error::PointOutOfBounds { index }) => assert_eq!(index, 1),
            other => panic!("expected out-of-bounds error, got {other:?}"),
        }
    }

    #[test]
    fn empty_input_is_a_valid_empty_tree() {
        let tree = build_octree(&[], 4, unit_bounds()).unwrap();
        assert!(tree.is_empty());
        assert_eq!(propagate_labels(&tree, &[[0.0; 3]], 5).unwrap(), vec![false]);
    }

    #[test]
    fn every_point_in_exactly_one_leaf() {
        let pts: Vec<Vec3> = (0..200)
            .map(|i| {
                let f = i as f64;
                [
                    (f * 0.37).sin() * 0.9,
                    (f * 0.73).cos() * 0.9,
                    ((f * 0.11).sin() * 0.9).cos() * 0.5,
                ]
            })
            .collect();
        let tree = build_octree(&pts, 5, unit_bounds()).unwrap();
        let mut seen = vec![0usize; pts.len()];
        for n in &tree.nodes {
            if n.is_leaf() {
                for &pi in &n.points {
                    seen[pi as usize] += 1;
                }
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        // point_leaf agrees with leaf membership.
        for (pi, &leaf) in tree.point_leaf.iter().enumerate() {
            assert!(tree.nodes[leaf as usize].points.contains(&(pi as u32)));
        }
        // Children tile the parent cell exactly.
        for n in &tree.nodes {
            if let Some(children) = n.children {
                for (oct, c) in children.iter().enumerate() {
                    let ch = &tree.nodes[*c as usize];
                    assert_eq!(ch.half, n.half * 0.5);
                    let expect = child_center(n.center, n.half, oct);
                    assert_eq!(ch.center, expect);
                }
            }
        }
    }

    #[test]
    fn labeling_marks_exactly_dynamic_leaves() {
        let pts: Vec<Vec3> = (0..32)
            .map(|i| [(i as f64 / 32.0) * 1.8 - 0.9, 0.0, 0.0])
            .collect();
        let tree = build_octree(&pts, 4, unit_bounds()).unwrap();
        let all_zero = label_from_dynamic_indices(tree.clone(), &[]);
        assert!(all_zero.nodes.iter().all(|n| !n.label));
        let one = label_from_dynamic_indices(tree.clone(), &[7]);
        let labeled: Vec<u32> = one.dynamic_leaves();
        assert_eq!(labeled, vec![one.point_leaf[7]]);
        let all_idx: Vec<u32> = (0..32).collect();
        let all_on = label_from_dynamic_indices(tree, &all_idx);
        for id in all_on.occupied_leaves() {
            assert!(all_on.nodes[id as usize].label);
        }
    }

    #[test]
    fn majority_vote_arithmetic() {
        // Five separated leaves along x; labels 1,1,1,0,0 then 1,1,0,0,0.
        let pts: Vec<Vec3> = (0..5).map(|i| [-0.8 + 0.4 * i as f64, 0.0, 0.0]).collect();
        let tree = build_octree(&pts, 6, unit_bounds()).unwrap();
        let t1 = label_from_dynamic_indices(tree.clone(), &[0, 1, 2]);
        assert_eq!(propagate_labels(&t1, &[[-0.8, 0.0, 0.0]], 5).unwrap(), vec![true]);
        let t2 = label_from_dynamic_indices(tree, &[0, 1]);
        assert_eq!(propagate_labels(&t2, &[[-0.8, 0.0, 0.0]], 5).unwrap(), vec![false]);
    }

    #[test]
    fn even_k_is_rejected() {
        let tree = build_octree(&[[0.0; 3]], 4, unit_bounds()).unwrap();
        assert!(propagate_labels(&tree, &[], 4).is_err());
    }

    #[test]
    fn nearest_leaves_match_brute_force() {
        let pts: Vec<Vec3> = (0..60)
            .map(|i| {
                let f = i as f64;
                [
                    (f * 1.37).sin() * 0.9,
                    (f * 2.73).sin() * 0.9,
                    (f * 3.91).sin() * 0.9,
                ]
            })
            .collect();
        let tree = build_octree(&pts, 5, unit_bounds()).unwrap();
        for q in [[0.0, 0.0, 0.0], [0.5, -0.5, 0.2], [-0.9, 0.9, -0.9]] {
            let got = tree.nearest_leaves(q, 7);
            let mut want: Vec<(f64, u32)> = tree
                .occupied_leaves()
                .into_iter()
                .map(|id| (tree.nodes[id as usize].center_dist2(q), id))
                .collect();
            want.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let want: Vec<u32> = want.into_iter().take(7).map(|(_, id)| id).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn enhanced_tree_inherits_labels_into_empty_leaves() {
        // Two points in one octant, both dynamic: sibling empty leaves under
        // the same parent must inherit label 1.
        let pts = vec![[0.6, 0.6, 0.6], [0.7, 0.7, 0.7]];
        let tree = rebuild_enhanced_octree(&pts, &[true, true], 3).unwrap();
        assert!(tree.nodes[0].label);
        for n in &tree.nodes {
            if n.count == 0 && n.parent.is_some() {
                assert_eq!(n.label, tree.nodes[n.parent.unwrap() as usize].label);
            }
        }
        // All-static cloud: every label 0.
        let tree0 = rebuild_enhanced_octree(&pts, &[false, false], 3).unwrap();
        assert!(tree0.nodes.iter().all(|n| !n.label));
        // Leaf labels equal the labels of the points they hold.
        let mixed = rebuild_enhanced_octree(
            &[[0.6, 0.6, 0.6], [-0.6, -0.6, -0.6]],
            &[true, false],
            3,
        )
        .unwrap();
        for n in &mixed.nodes {
            if n.is_leaf() && n.count > 0 {
                let any_dyn = n.points.iter().any(|&pi| pi == 0);
                assert_eq!(n.label, any_dyn);
            }
        }
    }

    #[test]
    fn face_adjacency_joins_edge_adjacency_does_not() {
        // lambda=1 over the unit cube: octants 0 and 1 share a face (one
        // cluster); octants 0 and 3 share only an edge (two clusters).
        let face_pts = vec![
            child_center([0.0; 3], 1.0, 0),
            child_center([0.0; 3], 1.0, 1),
        ];
        let mut t = build_octree(&face_pts, 1, unit_bounds()).unwrap();
        t = label_from_dynamic_indices(t, &[0, 1]);
        assert_eq!(cluster_and_mark(&mut t).len(), 1);

        let edge_pts = vec![
            child_center([0.0; 3], 1.0, 0),
            child_center([0.0; 3], 1.0, 3),
        ];
        let mut t = build_octree(&edge_pts, 1, unit_bounds()).unwrap();
        t = label_from_dynamic_indices(t, &[0, 1]);
        assert_eq!(cluster_and_mark(&mut t).len(), 2);
    }

    #[test]
    fn no_dynamic_leaves_no_clusters() {
        let mut tree = build_octree(&[[0.0; 3], [0.5, 0.5, 0.5]], 3, unit_bounds()).unwrap();
        assert!(cluster_and_mark(&mut tree).is_empty());
        assert!(tree.nodes.iter().all(|n| !n.marked));
    }

    /// Brute-force oracle: every ancestor chain from each dynamic leaf,
    /// truncated at the cluster LCA computed by ancestor-set intersection.
    fn brute_force_marks(tree: &LabeledOctree, clusters: &[DynamicCluster]) -> HashSet<u32> {
        let ancestors = |mut id: u32| -> Vec<u32> {
            let mut chain = vec![id];
            while let Some(p) = tree.nodes[id as usize].parent {
                chain.push(p);
                id = p;
            }
            chain
        };
        let mut marks = HashSet::new();
        for c in clusters {
            let mut common: Option<HashSet<u32>> = None;
            for &l in &c.leaves {
                let set: HashSet<u32> = ancestors(l).into_iter().collect();
                common = Some(match common {
                    None => set,
                    Some(prev) => prev.intersection(&set).copied().collect(),
                });
            }
            let common = common.unwrap();
            // LCA = deepest common ancestor.
            let lca = *common
                .iter()
                .max_by_key(|&&id| tree.nodes[id as usize].depth)
                .unwrap();
            assert_eq!(lca, c.lca);
            for &l in &c.leaves {
                for anc in ancestors(l) {
                    marks.insert(anc);
                    if anc == lca {
                        break;
                    }
                }
            }
        }
        marks
    }

    #[test]
    fn l_shape_marking_matches_brute_force() {
        // Depth-3 tree; dynamic leaves form an L along x then y.
        let cell = 0.25; // leaf half-extent at depth 2 over half=1.0 bounds
        let base = [-0.75, -0.75, -0.75];
        let l_shape = vec![
            base,
            [base[0] + 2.0 * cell, base[1], base[2]],
            [base[0] + 4.0 * cell, base[1], base[2]],
            [base[0] + 4.0 * cell, base[1] + 2.0 * cell, base[2]],
        ];
        let mut pts = l_shape.clone();
        // Static filler elsewhere to deepen the tree.
        pts.push([0.8, 0.8, 0.8]);
        pts.push([0.7, 0.6, 0.8]);
        let mut tree = build_octree(&pts, 3, unit_bounds()).unwrap();
        tree = label_from_dynamic_indices(tree, &[0, 1, 2, 3]);
        let clusters = cluster_and_mark(&mut tree);
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].leaves.len(), 4);
        let want = brute_force_marks(&tree, &clusters);
        let got: HashSet<u32> = tree
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.marked)
            .map(|(i, _)| i as u32)
            .collect();
        assert_eq!(got, want);
    }

    proptest! {
        #[test]
        fn propagation_is_permutation_invariant(
            pts in prop::collection::vec(prop::array::uniform3(-0.95f64..0.95), 5..40),
            dyn_mask in prop::collection::vec(any::<bool>(), 40),
            queries in prop::collection::vec(prop::array::uniform3(-0.95f64..0.95), 1..10),
        ) {
            let tree = build_octree(&pts, 4, unit_bounds()).unwrap();
            let dynamic: Vec<u32> = (0..pts.len() as u32)
                .filter(|&i| dyn_mask[i as usize])
                .collect();
            let labeled = label_from_dynamic_indices(tree, &dynamic);
            let a = propagate_labels(&labeled, &queries, 5).unwrap();

            // Same points presented in reverse order.
            let rev_pts: Vec<Vec3> = pts.iter().rev().copied().collect();
            let rev_dynamic: Vec<u32> = (0..pts.len() as u32)
                .filter(|&i| dyn_mask[pts.len() - 1 - i as usize])
                .collect();
            let rev_tree = build_octree(&rev_pts, 4, unit_bounds()).unwrap();
            let rev_labeled = label_from_dynamic_indices(rev_tree, &rev_dynamic);
            let b = propagate_labels(&rev_labeled, &queries, 5).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn marked_set_matches_brute_force(
            pts in prop::collection::vec(prop::array::uniform3(-0.95f64..0.95), 4..30),
            n_dyn in 1usize..10,
        ) {
            let mut tree = build_octree(&pts, 4, unit_bounds()).unwrap();
            let dynamic: Vec<u32> = (0..pts.len().min(n_dyn) as u32).collect();
            tree = label_from_dynamic_indices(tree, &dynamic);
            let clusters = cluster_and_mark(&mut tree);
            let want = brute_force_marks(&tree, &clusters);
            let got: HashSet<u32> = tree
                .nodes
                .iter()
                .enumerate()
                .filter(|(_, n)| n.marked)
                .map(|(i, _)| i as u32)
                .collect();
            prop_assert_eq!(got, want);
        }
    }
}

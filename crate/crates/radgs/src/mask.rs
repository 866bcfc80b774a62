//! Image-space dynamic masks from clustered octree leaves.
//!
//! Each dynamic cluster projects the 8 corners of every member leaf cell
//! through the pinhole model; the axis-aligned hull of the corners with
//! positive depth becomes a pixel box, and the mask is the union of box
//! interiors.

use crate::error::Result;
use crate::geometry::{Pose, Vec3};
use crate::image::{decode_pgm8, encode_pgm8, CameraIntrinsics};
use crate::octree::{DynamicCluster, LabeledOctree};

/// Inclusive integer pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Box2i {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl Box2i {
    pub fn width(&self) -> i64 {
        (self.x1 - self.x0 + 1).max(0) as i64
    }

    pub fn height(&self) -> i64 {
        (self.y1 - self.y0 + 1).max(0) as i64
    }

    pub fn area(&self) -> i64 {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &Box2i) -> Option<Box2i> {
        let b = Box2i {
            x0: self.x0.max(other.x0),
            y0: self.y0.max(other.y0),
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
        };
        (b.x0 <= b.x1 && b.y0 <= b.y1).then_some(b)
    }
}

/// Intersection over union of two pixel boxes.
pub fn box_iou(a: &Box2i, b: &Box2i) -> f64 {
    let inter = a.intersection(b).map_or(0, |x| x.area());
    let union = a.area() + b.area() - inter;
    if union <= 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Binary dynamic mask plus the boxes that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
    pub boxes: Vec<Box2i>,
}

impl PixelMask {
    pub fn empty(width: usize, height: usize) -> Self {
        PixelMask {
            width,
            height,
            bits: vec![false; width * height],
            boxes: Vec::new(),
        }
    }

    #[inline]
    pub fn is_set(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn fill_box(&mut self, b: Box2i) {
        for y in b.y0..=b.y1 {
            for x in b.x0..=b.x1 {
                self.bits[y as usize * self.width + x as usize] = true;
            }
        }
    }

    /// P5 PGM, 255 = dynamic.
    pub fn to_pgm(&self) -> Vec<u8> {
        let bytes: Vec<u8> = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        encode_pgm8(self.width, self.height, &bytes)
    }

    /// Bits only; boxes are not stored in the PGM.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let (w, h, data) = decode_pgm8(bytes)?;
        Ok(PixelMask {
            width: w,
            height: h,
            bits: data.into_iter().map(|b| b >= 128).collect(),
            boxes: Vec::new(),
        })
    }
}

/// Project dynamic clusters into a pixel mask. `pose` maps tree-frame points
/// into the camera frame (z forward). One box per cluster: the hull of all
/// member-leaf cell corners with positive depth, rounded to the nearest
/// pixel and clipped to the image. Clusters entirely behind the camera
/// contribute nothing.
pub fn project_mask(
    tree: &LabeledOctree,
    clusters: &[DynamicCluster],
    camera: &CameraIntrinsics,
    pose: &Pose,
) -> PixelMask {
    let (width, height) = (camera.width as usize, camera.height as usize);
    let mut mask = PixelMask::empty(width, height);
    for cluster in clusters {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        let mut any = false;
        for &leaf in &cluster.leaves {
            let node = &tree.nodes[leaf as usize];
            for oct in 0..8usize {
                let corner: Vec3 = [
                    node.center[0] + if oct & 1 != 0 { node.half } else { -node.half },
                    node.center[1] + if oct & 2 != 0 { node.half } else { -node.half },
                    node.center[2] + if oct & 4 != 0 { node.half } else { -node.half },
                ];
                let pc = pose.transform_point(corner);
                if let Some((u, v)) = camera.project(pc) {
                    lo[0] = lo[0].min(u);
                    lo[1] = lo[1].min(v);
                    hi[0] = hi[0].max(u);
                    hi[1] = hi[1].max(v);
                    any = true;
                }
            }
        }
        if !any {
            continue;
        }
        let b = Box2i {
            x0: (lo[0].round() as i32).max(0),
            y0: (lo[1].round() as i32).max(0),
            x1: (hi[0].round() as i32).min(width as i32 - 1),
            y1: (hi[1].round() as i32).min(height as i32 - 1),
        };
        if b.x0 > b.x1 || b.y0 > b.y1 {
            continue;
        }
        mask.boxes.push(b);
        mask.fill_box(b);
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::octree::{build_octree, cluster_and_mark, label_from_dynamic_indices};
    use proptest::prelude::*;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 64.0,
            cy: 64.0,
            width: 128,
            height: 128,
        }
    }

    /// Same optics on a larger sensor, for boxes that spill past 128px.
    fn cam_wide() -> CameraIntrinsics {
        CameraIntrinsics {
            width: 256,
            height: 256,
            ..cam()
        }
    }

    #[test]
    fn empty_clusters_empty_mask() {
        let tree = build_octree(&[], 4, ([0.0; 3], 1.0)).unwrap();
        let mask = project_mask(&tree, &[], &cam(), &Pose::identity());
        assert_eq!(mask.count(), 0);
        assert!(mask.boxes.is_empty());
    }

    #[test]
    fn unit_cube_ten_meters_ahead() {
        // Single leaf = the whole bounds cube: side 1, centered at z=10 on
        // the optical axis. Corner columns: 64 +/- 100*0.5/9.5 and
        // +/- 100*0.5/10.5, so the hull is [58.7368..., 69.2631...],
        // rounding to [59, 69] on both axes.
        let mut tree = build_octree(&[[0.0, 0.0, 10.0]], 4, ([0.0, 0.0, 10.0], 0.5)).unwrap();
        tree = label_from_dynamic_indices(tree, &[0]);
        let clusters = cluster_and_mark(&mut tree);
        assert_eq!(clusters.len(), 1);
        let mask = project_mask(&tree, &clusters, &cam(), &Pose::identity());
        assert_eq!(
            mask.boxes,
            vec![Box2i {
                x0: 59,
                y0: 59,
                x1: 69,
                y1: 69
            }]
        );
        assert_eq!(mask.count(), 11 * 11);
        // Every set bit lies inside the box.
        for y in 0..128 {
            for x in 0..128 {
                let inside = (59..=69).contains(&x) && (59..=69).contains(&y);
                assert_eq!(mask.is_set(x, y), inside);
            }
        }
    }

    #[test]
    fn cluster_behind_camera_contributes_nothing() {
        let mut tree =
            build_octree(&[[0.0, 0.0, -10.0]], 4, ([0.0, 0.0, -10.0], 0.5)).unwrap();
        tree = label_from_dynamic_indices(tree, &[0]);
        let clusters = cluster_and_mark(&mut tree);
        let mask = project_mask(&tree, &clusters, &cam(), &Pose::identity());
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn straddling_cell_uses_positive_depth_corners_only() {
        // Cell spans z in [-0.5, 1.5]: the 4 near corners are behind the
        // camera; the box comes from the z=1.5 face alone.
        let mut tree = build_octree(&[[0.0, 0.0, 0.5]], 1, ([0.0, 0.0, 0.5], 1.0)).unwrap();
        tree = label_from_dynamic_indices(tree, &[0]);
        let clusters = cluster_and_mark(&mut tree);
        let mask = project_mask(&tree, &clusters, &cam_wide(), &Pose::identity());
        assert_eq!(mask.boxes.len(), 1);
        let b = mask.boxes[0];
        // u spread at z=1.5: 64 +/- 100*1/1.5 = [-2.66, 130.66] -> clipped.
        assert_eq!((b.x0, b.x1), (0, 131));
        assert_eq!((b.y0, b.y1), (0, 131));
    }

    #[test]
    fn pgm_round_trip() {
        let mut tree = build_octree(&[[0.0, 0.0, 10.0]], 4, ([0.0, 0.0, 10.0], 0.5)).unwrap();
        tree = label_from_dynamic_indices(tree, &[0]);
        let clusters = cluster_and_mark(&mut tree);
        let mask = project_mask(&tree, &clusters, &cam(), &Pose::identity());
        let pgm = mask.to_pgm();
        let back = PixelMask::from_pgm(&pgm).unwrap();
        assert_eq!(back.bits, mask.bits);
        assert_eq!((back.width, back.height), (mask.width, mask.height));
    }

    #[test]
    fn box_iou_arithmetic() {
        let a = Box2i {
            x0: 0,
            y0: 0,
            x1: 9,
            y1: 9,
        };
        let b = Box2i {
            x0: 5,
            y0: 0,
            x1: 14,
            y1: 9,
        };
        // 5x10 overlap over (100 + 100 - 50).
        assert!((box_iou(&a, &b) - 50.0 / 150.0).abs() < 1e-12);
        assert_eq!(box_iou(&a, &a), 1.0);
        let far = Box2i {
            x0: 50,
            y0: 50,
            x1: 51,
            y1: 51,
        };
        assert_eq!(box_iou(&a, &far), 0.0);
    }

    proptest! {
        /// Adding a dynamic detection never shrinks the mask.
        #[test]
        fn mask_grows_monotonically(
            pts in prop::collection::vec(prop::array::uniform3(-0.9f64..0.9), 3..25),
            n_dyn in 1usize..8,
        ) {
            let n_dyn = n_dyn.min(pts.len() - 1);
            // Shift the cloud in front of the camera.
            let pts: Vec<[f64; 3]> = pts
                .iter()
                .map(|p| [p[0], p[1], p[2] + 5.0])
                .collect();
            let bounds = ([0.0, 0.0, 5.0], 1.0);
            let base = build_octree(&pts, 4, bounds).unwrap();

            let smaller: Vec<u32> = (0..n_dyn as u32).collect();
            let larger: Vec<u32> = (0..n_dyn as u32 + 1).collect();

            let mut t1 = label_from_dynamic_indices(base.clone(), &smaller);
            let c1 = cluster_and_mark(&mut t1);
            let m1 = project_mask(&t1, &c1, &cam(), &Pose::identity());

            let mut t2 = label_from_dynamic_indices(base, &larger);
            let c2 = cluster_and_mark(&mut t2);
            let m2 = project_mask(&t2, &c2, &cam(), &Pose::identity());

            for (b1, b2) in m1.bits.iter().zip(&m2.bits) {
                prop_assert!(!b1 || *b2);
            }
        }
    }
}

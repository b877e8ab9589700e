use nalgebra::Vector3;

pub const NUM_JOINTS: usize = 21;
pub const COORDS_PER_FRAME: usize = NUM_JOINTS * 3;

pub const HIP: usize = 0;
pub const SPINE: usize = 1;
pub const NECK: usize = 3;
pub const HEAD: usize = 4;

/// Joint names, indexed by joint id.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "hip",
    "spine",
    "chest",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "l_hand",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "r_hand",
    "l_hip",
    "l_knee",
    "l_ankle",
    "l_toe",
    "r_hip",
    "r_knee",
    "r_ankle",
    "r_toe",
];

/// Kinematic tree: parents, rest-pose bone offsets in normalized units
/// (hip-to-spine = 1; x forward, y left, z up) and relative scattering
/// cross-sections used by the renderer.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub names: Vec<&'static str>,
    pub parents: Vec<Option<usize>>,
    pub offsets: Vec<Vector3<f64>>,
    pub cross_section: Vec<f64>,
    pub head: usize,
    pub neck: usize,
}

impl Default for Skeleton {
    fn default() -> Self {
        Self::standard()
    }
}

impl Skeleton {
    pub fn standard() -> Self {
        let v = Vector3::new;
        let side = |y: f64| {
            [
                (5, 2, v(0.0, 0.9 * y, 0.9), 0.6),
                (6, 5, v(0.0, 0.0, -1.5), 0.5),
                (7, 6, v(0.0, 0.0, -1.3), 0.35),
                (8, 7, v(0.0, 0.0, -0.4), 0.25),
                (13, 0, v(0.0, 0.55 * y, -0.3), 0.6),
                (14, 13, v(0.0, 0.0, -2.2), 0.5),
                (15, 14, v(0.0, 0.0, -2.2), 0.35),
                (16, 15, v(0.7, 0.0, -0.3), 0.25),
            ]
        };
        let mut parents = vec![None; NUM_JOINTS];
        let mut offsets = vec![Vector3::zeros(); NUM_JOINTS];
        let mut cross_section = vec![0.0; NUM_JOINTS];
        let trunk = [
            (0usize, None, v(0.0, 0.0, 0.0), 1.0),
            (1, Some(0), v(0.0, 0.0, 1.0), 1.0),
            (2, Some(1), v(0.0, 0.0, 1.2), 1.0),
            (3, Some(2), v(0.0, 0.0, 1.1), 0.7),
            (4, Some(3), v(0.0, 0.0, 0.9), 0.8),
        ];
        for (j, p, o, c) in trunk {
            parents[j] = p;
            offsets[j] = o;
            cross_section[j] = c;
        }
        for (y, shift) in [(1.0, 0usize), (-1.0, 4usize)] {
            for (j, p, o, c) in side(y) {
                // right side mirrors the left: arm ids +4, leg ids +4
                let (jj, pp) = if j >= 13 {
                    (j + shift, if p == 0 { 0 } else { p + shift })
                } else {
                    (j + shift, if p == 2 { 2 } else { p + shift })
                };
                parents[jj] = Some(pp);
                offsets[jj] = o;
                cross_section[jj] = c;
            }
        }
        Self {
            names: JOINT_NAMES.to_vec(),
            parents,
            offsets,
            cross_section,
            head: HEAD,
            neck: NECK,
        }
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn bone_length(&self, j: usize) -> f64 {
        self.offsets[j].norm()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_is_rooted_at_hip() {
        let s = Skeleton::standard();
        assert_eq!(s.len(), 21);
        assert_eq!(s.parents[HIP], None);
        assert_eq!(s.parents[SPINE], Some(HIP));
        assert_eq!(s.parents[HEAD], Some(NECK));
        for j in 1..s.len() {
            // parents precede children, so forward kinematics can run in order
            assert!(s.parents[j].unwrap() < j, "joint {j}");
        }
        assert!((s.bone_length(SPINE) - 1.0).abs() < 1e-12);
        assert_eq!(s.names[s.head], "head");
        assert_eq!(s.names[s.neck], "neck");
    }

    #[test]
    fn sides_mirror() {
        let s = Skeleton::standard();
        for (l, r) in [(5, 9), (8, 12), (13, 17), (16, 20)] {
            assert_eq!(s.offsets[l].y, -s.offsets[r].y);
            assert_eq!(s.names[l].replace("l_", ""), s.names[r].replace("r_", ""));
        }
        assert!(s.cross_section[SPINE] > s.cross_section[8]);
    }
}

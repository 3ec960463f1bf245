use serde::{Deserialize, Serialize};

use crate::config::SkeletonPreset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Joint hierarchy with a rest pose given as parent-relative offsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SkeletonRepr", into = "SkeletonRepr")]
pub struct Skeleton {
    names: Vec<String>,
    parents: Vec<usize>,
    rest: Vec<[f64; 3]>,
    left_arm: Vec<usize>,
    right_arm: Vec<usize>,
    /// Joints ordered so every parent precedes its children.
    order: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkeletonRepr {
    names: Vec<String>,
    parents: Vec<usize>,
    rest: Vec<[f64; 3]>,
    left_arm: Vec<usize>,
    right_arm: Vec<usize>,
}

impl TryFrom<SkeletonRepr> for Skeleton {
    type Error = Error;

    fn try_from(r: SkeletonRepr) -> Result<Self> {
        Skeleton::new(r.names, r.parents, r.rest, r.left_arm, r.right_arm)
    }
}

impl From<Skeleton> for SkeletonRepr {
    fn from(s: Skeleton) -> Self {
        SkeletonRepr {
            names: s.names,
            parents: s.parents,
            rest: s.rest,
            left_arm: s.left_arm,
            right_arm: s.right_arm,
        }
    }
}

impl Skeleton {
    /// Validates a parent table: joint 0 is its own parent, every other
    /// joint reaches joint 0 without revisiting itself.
    pub fn new(
        names: Vec<String>,
        parents: Vec<usize>,
        rest: Vec<[f64; 3]>,
        left_arm: Vec<usize>,
        right_arm: Vec<usize>,
    ) -> Result<Self> {
        let j = parents.len();
        if j < 3 {
            return Err(Error::config(
                "skeleton",
                format!("needs at least 3 joints, got {j}"),
            ));
        }
        if names.len() != j || rest.len() != j {
            return Err(Error::config(
                "skeleton",
                "names, parents and rest pose differ in length",
            ));
        }
        if parents[0] != 0 {
            return Err(Error::config(
                "skeleton.parents",
                "joint 0 must be the root (its own parent)",
            ));
        }
        for (i, &p) in parents.iter().enumerate().skip(1) {
            if p >= j {
                return Err(Error::config(
                    "skeleton.parents",
                    format!("joint {i} has out-of-range parent {p}"),
                ));
            }
            let mut cur = i;
            for _ in 0..=j {
                if cur == 0 {
                    break;
                }
                cur = parents[cur];
            }
            if cur != 0 {
                return Err(Error::config(
                    "skeleton.parents",
                    format!("joint {i} is on a cycle"),
                ));
            }
        }
        if left_arm.len() != right_arm.len() || left_arm.iter().chain(&right_arm).any(|&k| k >= j) {
            return Err(Error::config(
                "skeleton.arms",
                "arm joint lists must have equal length and valid indices",
            ));
        }
        let mut depth = vec![0usize; j];
        for i in 0..j {
            let mut cur = i;
            while cur != 0 {
                depth[i] += 1;
                cur = parents[cur];
            }
        }
        let mut order: Vec<usize> = (0..j).collect();
        order.sort_by_key(|&i| (depth[i], i));
        Ok(Skeleton {
            names,
            parents,
            rest,
            left_arm,
            right_arm,
            order,
        })
    }

    pub fn preset(preset: SkeletonPreset) -> Self {
        match preset {
            SkeletonPreset::Upper11 => Self::upper11(),
            SkeletonPreset::Full59 => Self::full59(),
        }
    }

    pub fn upper11() -> Self {
        let mut b = Builder::default();
        let root = b.joint("root", 0, [0.0, 1.0, 0.0]);
        let spine = b.joint("spine", root, [0.0, 0.3, 0.0]);
        b.joint("head", spine, [0.0, 0.25, 0.0]);
        let (l, r) = b.arms(spine, false);
        b.build(l, r)
    }

    pub fn full59() -> Self {
        let mut b = Builder::default();
        let root = b.joint("pelvis", 0, [0.0, 1.0, 0.0]);
        let s1 = b.joint("spine1", root, [0.0, 0.12, 0.0]);
        let s2 = b.joint("spine2", s1, [0.0, 0.12, 0.0]);
        let s3 = b.joint("spine3", s2, [0.0, 0.12, 0.0]);
        let neck = b.joint("neck", s3, [0.0, 0.1, 0.0]);
        let head = b.joint("head", neck, [0.0, 0.1, 0.0]);
        for (name, off) in [
            ("jaw", [0.0, -0.05, 0.05]),
            ("chin", [0.0, -0.08, 0.06]),
            ("nose", [0.0, 0.02, 0.09]),
            ("left_eye", [0.03, 0.05, 0.08]),
            ("right_eye", [-0.03, 0.05, 0.08]),
            ("left_ear", [0.07, 0.03, 0.0]),
            ("right_ear", [-0.07, 0.03, 0.0]),
        ] {
            b.joint(name, head, off);
        }
        let (l, r) = b.arms(s3, true);
        for (side, sx) in [("left", 1.0), ("right", -1.0)] {
            let hip = b.joint(&format!("{side}_hip"), root, [0.1 * sx, -0.05, 0.0]);
            let knee = b.joint(&format!("{side}_knee"), hip, [0.0, -0.42, 0.0]);
            let ankle = b.joint(&format!("{side}_ankle"), knee, [0.0, -0.42, 0.0]);
            b.joint(&format!("{side}_foot"), ankle, [0.0, -0.05, 0.12]);
        }
        b.build(l, r)
    }

    pub fn joints(&self) -> usize {
        self.parents.len()
    }

    /// Scalars per frame.
    pub fn frame_dim(&self) -> usize {
        3 * self.joints()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parents(&self) -> &[usize] {
        &self.parents
    }

    pub fn rest(&self) -> &[[f64; 3]] {
        &self.rest
    }

    pub fn left_arm(&self) -> &[usize] {
        &self.left_arm
    }

    pub fn right_arm(&self) -> &[usize] {
        &self.right_arm
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn check_len(&self, frames: &[f64]) -> Result<usize> {
        let fd = self.frame_dim();
        if frames.is_empty() || !frames.len().is_multiple_of(fd) {
            return Err(Error::shape(
                "skeleton",
                format!(
                    "{} values is not a whole number of {}-joint frames",
                    frames.len(),
                    self.joints()
                ),
            ));
        }
        Ok(frames.len() / fd)
    }

    /// Forward kinematics: `abs[j] = abs[parent[j]] + rel[j]`, root at `rel[root]`.
    pub fn rel_to_abs(&self, rel: &[f64]) -> Result<Vec<f64>> {
        let frames = self.check_len(rel)?;
        let fd = self.frame_dim();
        let mut out = vec![0.0; rel.len()];
        for f in 0..frames {
            let base = f * fd;
            for &j in &self.order {
                let p = self.parents[j];
                for a in 0..3 {
                    let parent = if j == 0 { 0.0 } else { out[base + 3 * p + a] };
                    out[base + 3 * j + a] = parent + rel[base + 3 * j + a];
                }
            }
        }
        Ok(out)
    }

    pub fn abs_to_rel(&self, abs: &[f64]) -> Result<Vec<f64>> {
        let frames = self.check_len(abs)?;
        let fd = self.frame_dim();
        let mut out = vec![0.0; abs.len()];
        for f in 0..frames {
            let base = f * fd;
            for j in 0..self.joints() {
                let p = self.parents[j];
                for a in 0..3 {
                    let parent = if j == 0 { 0.0 } else { abs[base + 3 * p + a] };
                    out[base + 3 * j + a] = abs[base + 3 * j + a] - parent;
                }
            }
        }
        Ok(out)
    }

    /// `is_ancestor_or_self[j][k]`: whether `k` lies on the path from `j` to the root.
    pub fn ancestry(&self) -> Vec<Vec<bool>> {
        let j = self.joints();
        let mut m = vec![vec![false; j]; j];
        for (i, row) in m.iter_mut().enumerate() {
            let mut cur = i;
            loop {
                row[cur] = true;
                if cur == 0 {
                    break;
                }
                cur = self.parents[cur];
            }
        }
        m
    }

    /// Matrix `R` with `abs_row = rel_row · R` for one flattened frame.
    pub fn rc_matrix(&self) -> Tensor {
        let fd = self.frame_dim();
        let anc = self.ancestry();
        let mut data = vec![0.0; fd * fd];
        for (j, row) in anc.iter().enumerate() {
            for (k, &on) in row.iter().enumerate() {
                if on {
                    for a in 0..3 {
                        data[(3 * k + a) * fd + 3 * j + a] = 1.0;
                    }
                }
            }
        }
        Tensor::new(vec![fd, fd], data).expect("square matrix")
    }

    /// Rest pose as one flattened relative frame.
    pub fn rest_frame(&self) -> Vec<f64> {
        self.rest.iter().flatten().copied().collect()
    }
}

#[derive(Default)]
struct Builder {
    names: Vec<String>,
    parents: Vec<usize>,
    rest: Vec<[f64; 3]>,
}

impl Builder {
    fn joint(&mut self, name: &str, parent: usize, offset: [f64; 3]) -> usize {
        self.names.push(name.to_string());
        self.parents.push(parent);
        self.rest.push(offset);
        self.names.len() - 1
    }

    /// Shoulder, elbow, wrist, hand per side; with fingers, five three-joint
    /// chains hang off each hand.
    fn arms(&mut self, attach: usize, fingers: bool) -> (Vec<usize>, Vec<usize>) {
        let mut sides = Vec::new();
        for (side, sx) in [("left", 1.0), ("right", -1.0)] {
            let sh = self.joint(&format!("{side}_shoulder"), attach, [0.18 * sx, 0.05, 0.0]);
            let el = self.joint(&format!("{side}_elbow"), sh, [0.05 * sx, -0.26, 0.0]);
            let wr = self.joint(&format!("{side}_wrist"), el, [0.02 * sx, -0.24, 0.05]);
            let ha = self.joint(&format!("{side}_hand"), wr, [0.0, -0.08, 0.02]);
            if fingers {
                for (fi, finger) in ["thumb", "index", "middle", "ring", "pinky"]
                    .iter()
                    .enumerate()
                {
                    let spread = (fi as f64 - 2.0) * 0.015 * sx;
                    let mut prev = ha;
                    for seg in 0..3 {
                        prev = self.joint(
                            &format!("{side}_{finger}{}", seg + 1),
                            prev,
                            [spread, -0.025, 0.0],
                        );
                    }
                }
            }
            sides.push(vec![sh, el, wr, ha]);
        }
        let right = sides.pop().unwrap();
        let left = sides.pop().unwrap();
        (left, right)
    }

    fn build(self, left: Vec<usize>, right: Vec<usize>) -> Skeleton {
        Skeleton::new(self.names, self.parents, self.rest, left, right)
            .expect("preset skeletons are valid trees")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> Skeleton {
        Skeleton::new(
            vec!["r".into(), "a".into(), "b".into()],
            vec![0, 0, 1],
            vec![[0.0; 3]; 3],
            vec![1],
            vec![2],
        )
        .unwrap()
    }

    #[test]
    fn preset_sizes() {
        assert_eq!(Skeleton::upper11().joints(), 11);
        assert_eq!(Skeleton::full59().joints(), 59);
        let s = Skeleton::upper11();
        assert_eq!(s.left_arm(), &[3, 4, 5, 6]);
        assert_eq!(s.right_arm(), &[7, 8, 9, 10]);
        assert_eq!(s.parents()[3], 1);
        assert_eq!(s.parents()[7], 1);
    }

    #[test]
    fn chain_kinematics_by_hand() {
        let s = chain();
        let rel = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let abs = s.rel_to_abs(&rel).unwrap();
        assert_eq!(&abs[6..9], &[2.0, 0.0, 0.0]);
        assert_eq!(s.abs_to_rel(&abs).unwrap(), rel.to_vec());
    }

    #[test]
    fn zero_offsets_stay_at_origin() {
        let s = Skeleton::upper11();
        let abs = s.rel_to_abs(&vec![0.0; 2 * s.frame_dim()]).unwrap();
        assert!(abs.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cycles_are_rejected() {
        let r = Skeleton::new(
            vec!["r".into(), "a".into(), "b".into()],
            vec![0, 2, 1],
            vec![[0.0; 3]; 3],
            vec![],
            vec![],
        );
        assert!(matches!(r, Err(Error::Config { .. })));
    }

    #[test]
    fn rc_matrix_agrees_with_kinematics() {
        let s = Skeleton::upper11();
        let rel: Vec<f64> = (0..s.frame_dim())
            .map(|i| (i as f64 * 0.37).sin())
            .collect();
        let abs = s.rel_to_abs(&rel).unwrap();
        let r = s.rc_matrix();
        let fd = s.frame_dim();
        for j in 0..fd {
            let v: f64 = (0..fd).map(|k| rel[k] * r.data()[k * fd + j]).sum();
            assert!((v - abs[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn serde_round_trip_revalidates() {
        let s = Skeleton::full59();
        let text = serde_json::to_string(&s).unwrap();
        let back: Skeleton = serde_json::from_str(&text).unwrap();
        assert_eq!(s, back);
        let bad = text.replacen("\"parents\":[0,", "\"parents\":[1,", 1);
        assert!(serde_json::from_str::<Skeleton>(&bad).is_err());
    }
}

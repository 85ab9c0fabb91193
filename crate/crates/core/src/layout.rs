//! The 100-point landmark schema: point names, semantic edge polylines and
//! the per-landmark edge membership used when gating heatmaps.
//!
//! Index assignment: 0–67 standard 68-point ordering, 68–69 pupils, 70–77 iris
//! rings (4 per eye), 78–85 inner-mouth ring, 86–99 ear contours (7 per ear).

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::{Error, Result};

pub const NUM_POINTS: usize = 100;

/// Outer eye corners in the 68-point ordering, used for inter-ocular
/// normalization.
pub const OUTER_EYE_CORNERS: (usize, usize) = (36, 45);

#[derive(Debug, Error, PartialEq)]
pub enum LayoutError {
    #[error("parse: {0}")]
    Parse(String),
    #[error("point count: expected {expected} points, found {found}")]
    PointCount { expected: usize, found: usize },
    #[error("point index: entry {position} has index {index}")]
    PointIndex { position: usize, index: usize },
    #[error("dangling index: edge '{edge}' references landmark {index}")]
    DanglingIndex { edge: String, index: usize },
    #[error("empty polyline: edge '{edge}' has {len} points (need >= 2)")]
    EmptyPolyline { edge: String, len: usize },
    #[error("duplicate consecutive index: edge '{edge}' repeats landmark {index}")]
    RepeatedIndex { edge: String, index: usize },
    #[error("edge index: entry {position} has index {index}")]
    EdgeIndex { position: usize, index: usize },
    #[error("edge membership: stored membership of landmark {landmark} disagrees with edges")]
    Membership { landmark: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointSpec {
    pub index: usize,
    pub name: String,
    pub part: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub index: usize,
    pub name: String,
    pub point_indices: Vec<usize>,
}

/// On-disk layout file. `edge_membership` is optional; when present it must
/// agree with the membership derived from `edges`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutFile {
    pub points: Vec<PointSpec>,
    pub edges: Vec<EdgeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_membership: Option<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LandmarkLayout {
    points: Vec<PointSpec>,
    edges: Vec<EdgeSpec>,
    membership: Vec<Vec<usize>>,
}

impl LandmarkLayout {
    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn points(&self) -> &[PointSpec] {
        &self.points
    }

    pub fn point_names(&self) -> Vec<&str> {
        self.points.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn edges(&self) -> &[EdgeSpec] {
        &self.edges
    }

    /// Membership lists for every landmark, each ascending.
    pub fn edge_membership(&self) -> &[Vec<usize>] {
        &self.membership
    }

    /// The edges whose polyline contains landmark `p`, ascending.
    pub fn edges_for_landmark(&self, p: usize) -> Result<&[usize]> {
        self.membership
            .get(p)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid("p", format!("landmark {p} out of range [0, {})", self.points.len())))
    }

    pub fn edge_id(&self, name: &str) -> Option<usize> {
        self.edges.iter().find(|e| e.name == name).map(|e| e.index)
    }

    /// Validates a parsed layout file and derives the membership map.
    pub fn from_file(file: LayoutFile) -> std::result::Result<Self, LayoutError> {
        if file.points.len() != NUM_POINTS {
            return Err(LayoutError::PointCount {
                expected: NUM_POINTS,
                found: file.points.len(),
            });
        }
        for (pos, p) in file.points.iter().enumerate() {
            if p.index != pos {
                return Err(LayoutError::PointIndex {
                    position: pos,
                    index: p.index,
                });
            }
        }
        for (pos, e) in file.edges.iter().enumerate() {
            if e.index != pos {
                return Err(LayoutError::EdgeIndex {
                    position: pos,
                    index: e.index,
                });
            }
            if e.point_indices.len() < 2 {
                return Err(LayoutError::EmptyPolyline {
                    edge: e.name.clone(),
                    len: e.point_indices.len(),
                });
            }
            if let Some(&bad) = e.point_indices.iter().find(|&&i| i >= NUM_POINTS) {
                return Err(LayoutError::DanglingIndex {
                    edge: e.name.clone(),
                    index: bad,
                });
            }
            if let Some(w) = e.point_indices.windows(2).find(|w| w[0] == w[1]) {
                return Err(LayoutError::RepeatedIndex {
                    edge: e.name.clone(),
                    index: w[0],
                });
            }
        }
        let membership = derive_membership(NUM_POINTS, &file.edges);
        if let Some(stored) = &file.edge_membership {
            for p in 0..NUM_POINTS {
                let mut s = stored.get(p).cloned().unwrap_or_default();
                s.sort_unstable();
                s.dedup();
                if s != membership[p] {
                    return Err(LayoutError::Membership { landmark: p });
                }
            }
        }
        Ok(Self {
            points: file.points,
            edges: file.edges,
            membership,
        })
    }

    pub fn to_file(&self) -> LayoutFile {
        LayoutFile {
            points: self.points.clone(),
            edges: self.edges.clone(),
            edge_membership: Some(self.membership.clone()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("layout serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: LayoutFile =
            serde_json::from_str(text).map_err(|e| LayoutError::Parse(e.to_string()))?;
        Ok(Self::from_file(file)?)
    }

    /// Stable digest of the layout, stored in checkpoints.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.to_file()).expect("layout serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The layout bundled with the crate.
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED_LAYOUT).expect("bundled layout is valid")
    }

    /// Programmatic construction of the canonical layout (the bundled JSON is
    /// generated from this and checked against it in tests).
    pub fn canonical() -> Self {
        let mut points = Vec::with_capacity(NUM_POINTS);
        let mut add = |name: String, part: &str| {
            let index = points.len();
            points.push(PointSpec {
                index,
                name,
                part: part.to_string(),
            });
        };
        for i in 0..17 {
            add(format!("jaw_{i:02}"), "jaw");
        }
        for i in 0..5 {
            add(format!("brow_right_{i}"), "brow");
        }
        for i in 0..5 {
            add(format!("brow_left_{i}"), "brow");
        }
        for i in 0..4 {
            add(format!("nose_bridge_{i}"), "nose");
        }
        for i in 0..5 {
            add(format!("nose_base_{i}"), "nose");
        }
        for side in ["right", "left"] {
            for i in 0..6 {
                add(format!("eye_{side}_{i}"), "eye");
            }
        }
        for i in 0..12 {
            add(format!("lip_outer_{i:02}"), "mouth");
        }
        for i in 0..8 {
            add(format!("lip_inner_{i}"), "mouth");
        }
        add("pupil_right".into(), "pupil");
        add("pupil_left".into(), "pupil");
        for side in ["right", "left"] {
            for i in 0..4 {
                add(format!("iris_{side}_{i}"), "iris");
            }
        }
        for i in 0..8 {
            add(format!("mouth_ring_{i}"), "inner_mouth");
        }
        for side in ["right", "left"] {
            for i in 0..7 {
                add(format!("ear_{side}_{i}"), "ear");
            }
        }
        debug_assert_eq!(points.len(), NUM_POINTS);

        let r = |a: usize, b: usize| (a..=b).collect::<Vec<_>>();
        let cat = |parts: &[&[usize]]| parts.concat();
        let polylines: Vec<(&str, Vec<usize>)> = vec![
            ("jawline", r(0, 16)),
            ("brow_right", r(17, 21)),
            ("brow_left", r(22, 26)),
            ("eyelid_right_upper", r(36, 39)),
            ("eyelid_right_lower", cat(&[&r(39, 41), &[36]])),
            ("eyelid_left_upper", r(42, 45)),
            ("eyelid_left_lower", cat(&[&r(45, 47), &[42]])),
            ("nose_bridge", r(27, 30)),
            ("nose_base", r(31, 35)),
            ("lip_outer_upper", r(48, 54)),
            ("lip_outer_lower", cat(&[&r(54, 59), &[48]])),
            ("lip_inner", cat(&[&r(60, 67), &[60]])),
            ("ear_right", r(86, 92)),
            ("ear_left", r(93, 99)),
            ("iris_right", cat(&[&r(70, 73), &[70]])),
            ("iris_left", cat(&[&r(74, 77), &[74]])),
        ];
        let edges = polylines
            .into_iter()
            .enumerate()
            .map(|(index, (name, point_indices))| EdgeSpec {
                index,
                name: name.to_string(),
                point_indices,
            })
            .collect();
        Self::from_file(LayoutFile {
            points,
            edges,
            edge_membership: None,
        })
        .expect("canonical layout is valid")
    }
}

/// Loads and validates a layout file.
pub fn load_layout(path: &Path) -> Result<LandmarkLayout> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    LandmarkLayout::from_json(&text)
}

fn derive_membership(num_points: usize, edges: &[EdgeSpec]) -> Vec<Vec<usize>> {
    let mut sets = vec![BTreeSet::new(); num_points];
    for e in edges {
        for &p in &e.point_indices {
            sets[p].insert(e.index);
        }
    }
    sets.into_iter().map(|s| s.into_iter().collect()).collect()
}

const BUNDLED_LAYOUT: &str = include_str!("../assets/layout100.json");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_matches_canonical() {
        assert_eq!(LandmarkLayout::bundled(), LandmarkLayout::canonical());
    }

    #[test]
    fn canonical_counts() {
        let l = LandmarkLayout::canonical();
        assert_eq!(l.num_points(), 100);
        assert_eq!(l.num_edges(), 16);
        let count = |part: &str| l.points().iter().filter(|p| p.part == part).count();
        assert_eq!(count("pupil"), 2);
        assert_eq!(count("iris"), 8);
        assert_eq!(count("inner_mouth"), 8);
        assert_eq!(count("ear"), 14);
        assert_eq!(l.points()[68].part, "pupil");
        assert_eq!(l.points()[86].part, "ear");
    }

    #[test]
    fn membership_examples() {
        let l = LandmarkLayout::canonical();
        let jaw = l.edge_id("jawline").unwrap();
        assert_eq!(l.edges_for_landmark(4).unwrap(), &[jaw]);
        let up = l.edge_id("lip_outer_upper").unwrap();
        let lo = l.edge_id("lip_outer_lower").unwrap();
        assert_eq!(l.edges_for_landmark(48).unwrap(), &[up, lo]);
        assert_eq!(l.edges_for_landmark(54).unwrap(), &[up, lo]);
        assert!(l.edges_for_landmark(68).unwrap().is_empty());
        assert!(l.edges_for_landmark(69).unwrap().is_empty());
        assert!(l.edges_for_landmark(100).is_err());
    }

    #[test]
    fn every_edge_is_covered_and_memberships_in_range() {
        let l = LandmarkLayout::canonical();
        let mut covered = vec![false; l.num_edges()];
        for p in 0..l.num_points() {
            for &e in l.edges_for_landmark(p).unwrap() {
                assert!(e < l.num_edges());
                covered[e] = true;
            }
        }
        assert!(covered.iter().all(|&c| c));
    }

    fn file() -> LayoutFile {
        LandmarkLayout::canonical().to_file()
    }

    #[test]
    fn rejects_99_points() {
        let mut f = file();
        f.points.pop();
        f.edge_membership = None;
        assert!(matches!(
            LandmarkLayout::from_file(f),
            Err(LayoutError::PointCount { found: 99, .. })
        ));
    }

    #[test]
    fn rejects_dangling_index() {
        let mut f = file();
        f.edges[0].point_indices[3] = 120;
        let err = LandmarkLayout::from_file(f).unwrap_err();
        assert!(matches!(err, LayoutError::DanglingIndex { index: 120, .. }));
        assert!(err.to_string().contains("dangling index"));
    }

    #[test]
    fn rejects_short_polyline_and_repeats() {
        let mut f = file();
        f.edges[1].point_indices.truncate(1);
        assert!(matches!(
            LandmarkLayout::from_file(f),
            Err(LayoutError::EmptyPolyline { .. })
        ));
        let mut f = file();
        f.edges[1].point_indices = vec![17, 17, 18];
        assert!(matches!(
            LandmarkLayout::from_file(f),
            Err(LayoutError::RepeatedIndex { index: 17, .. })
        ));
    }

    #[test]
    fn rejects_inconsistent_stored_membership() {
        let mut f = file();
        f.edge_membership.as_mut().unwrap()[68] = vec![0];
        assert_eq!(
            LandmarkLayout::from_file(f),
            Err(LayoutError::Membership { landmark: 68 })
        );
    }

    #[test]
    fn parse_error_is_reported() {
        assert!(matches!(
            LandmarkLayout::from_json("{not json"),
            Err(Error::Layout(LayoutError::Parse(_)))
        ));
    }

    #[test]
    fn json_roundtrip() {
        let l = LandmarkLayout::canonical();
        assert_eq!(LandmarkLayout::from_json(&l.to_json()).unwrap(), l);
    }

    #[test]
    fn load_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("layout.json");
        std::fs::write(&path, LandmarkLayout::canonical().to_json()).unwrap();
        assert_eq!(load_layout(&path).unwrap().num_points(), 100);
        assert!(load_layout(&dir.path().join("missing.json")).is_err());
    }
}

//! Point clouds, farthest point sampling and point-to-node grouping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud<T> {
    points: Vec<Vec3<T>>,
}

impl<T: Real> PointCloud<T> {
    pub fn new(points: Vec<Vec3<T>>) -> Result<Self> {
        if points.is_empty() || points.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidCloud);
        }
        Ok(Self { points })
    }

    #[inline]
    pub fn points(&self) -> &[Vec3<T>] {
        &self.points
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Vec3<T>> {
        self.points
    }

    pub fn select(&self, indices: &[usize]) -> Vec<Vec3<T>> {
        indices.iter().map(|&i| self.points[i]).collect()
    }
}

/// Greedy max-min subset of `count` indices starting at `start_index`.
///
/// Each step picks the point whose squared distance to the selected set is
/// largest; ties go to the lowest index. Already selected points are never
/// picked again, so duplicates are only chosen once distinct points run out.
pub fn farthest_point_sampling<T: Real>(
    points: &[Vec3<T>],
    count: usize,
    start_index: usize,
) -> Result<Vec<usize>> {
    let n = points.len();
    if count == 0 || count > n {
        return Err(Error::CountExceedsPoints {
            count,
            available: n,
        });
    }
    if start_index >= n {
        return Err(Error::IndexOutOfRange {
            index: start_index,
            len: n,
        });
    }
    let mut selected = Vec::with_capacity(count);
    let mut taken = vec![false; n];
    let mut min_dist = vec![T::infinity(); n];
    let mut last = start_index;
    selected.push(last);
    taken[last] = true;
    while selected.len() < count {
        let anchor = points[last];
        let mut best: Option<(usize, T)> = None;
        for (i, p) in points.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = p.distance_squared(anchor);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            match best {
                Some((_, bd)) if !(min_dist[i] > bd) => {}
                _ => best = Some((i, min_dist[i])),
            }
        }
        let (next, _) = best.expect("count <= n leaves a candidate");
        selected.push(next);
        taken[next] = true;
        last = next;
    }
    Ok(selected)
}

/// Surjective assignment of points to their nearest sampled center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyDecomposition {
    center_indices: Vec<usize>,
    assignment: Vec<usize>,
    group_sizes: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl ProxyDecomposition {
    /// Indices of the centers in the parent cloud.
    #[inline]
    pub fn center_indices(&self) -> &[usize] {
        &self.center_indices
    }

    /// Group (position in `center_indices`) owning each parent point.
    #[inline]
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    #[inline]
    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    /// Members of group `j` in ascending parent-index order.
    #[inline]
    pub fn members(&self, j: usize) -> &[usize] {
        &self.members[j]
    }

    #[inline]
    pub fn num_groups(&self) -> usize {
        self.center_indices.len()
    }

    #[inline]
    pub fn num_points(&self) -> usize {
        self.assignment.len()
    }

    /// Builds a decomposition from an explicit assignment.
    pub fn from_assignment(center_indices: Vec<usize>, assignment: Vec<usize>) -> Result<Self> {
        let g = center_indices.len();
        let mut members = vec![Vec::new(); g];
        for (i, &a) in assignment.iter().enumerate() {
            if a >= g {
                return Err(Error::IndexOutOfRange { index: a, len: g });
            }
            members[a].push(i);
        }
        for &c in &center_indices {
            if c >= assignment.len() {
                return Err(Error::IndexOutOfRange {
                    index: c,
                    len: assignment.len(),
                });
            }
        }
        let group_sizes = members.iter().map(Vec::len).collect();
        Ok(Self {
            center_indices,
            assignment,
            group_sizes,
            members,
        })
    }
}

/// Assigns every point to its nearest center (squared Euclidean distance,
/// ties to the lowest center position). A center point always belongs to its
/// own group, so no group is empty even when centers coincide.
pub fn group_points<T: Real>(
    points: &[Vec3<T>],
    center_indices: &[usize],
) -> Result<ProxyDecomposition> {
    if center_indices.is_empty() {
        return Err(Error::EmptyList);
    }
    let n = points.len();
    let mut own = vec![usize::MAX; n];
    for (j, &c) in center_indices.iter().enumerate() {
        if c >= n {
            return Err(Error::IndexOutOfRange { index: c, len: n });
        }
        if own[c] == usize::MAX {
            own[c] = j;
        }
    }
    let centers: Vec<Vec3<T>> = center_indices.iter().map(|&c| points[c]).collect();
    let assignment = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if own[i] != usize::MAX {
                return own[i];
            }
            let mut best = 0;
            let mut best_d = p.distance_squared(centers[0]);
            for (j, c) in centers.iter().enumerate().skip(1) {
                let d = p.distance_squared(*c);
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            best
        })
        .collect();
    ProxyDecomposition::from_assignment(center_indices.to_vec(), assignment)
}

/// FPS followed by grouping.
pub fn sample_and_group<T: Real>(
    points: &[Vec3<T>],
    count: usize,
    start_index: usize,
) -> Result<ProxyDecomposition> {
    let centers = farthest_point_sampling(points, count, start_index)?;
    group_points(points, &centers)
}

/// Two chained decompositions: raw points to first-level centers, then
/// first-level centers to second-level centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalDecomposition {
    pub first: ProxyDecomposition,
    /// Indices refer to positions in `first.center_indices()`.
    pub second: ProxyDecomposition,
}

impl HierarchicalDecomposition {
    pub fn num_proxies(&self) -> usize {
        self.second.num_groups()
    }

    /// Raw-cloud index of each second-level center.
    pub fn proxy_centers(&self) -> Vec<usize> {
        self.second
            .center_indices()
            .iter()
            .map(|&c| self.first.center_indices()[c])
            .collect()
    }

    /// Second-level group of every raw point.
    pub fn composed_assignment(&self) -> Vec<usize> {
        self.first
            .assignment()
            .iter()
            .map(|&a| self.second.assignment()[a])
            .collect()
    }

    /// Raw points grouped under the second level, as a flat decomposition of
    /// the original cloud.
    pub fn composed(&self) -> ProxyDecomposition {
        ProxyDecomposition::from_assignment(self.proxy_centers(), self.composed_assignment())
            .expect("chained assignments stay in range")
    }
}

/// Two-level FPS + grouping with `level_counts = [n1, n2]`.
pub fn hierarchical_decompose<T: Real>(
    points: &[Vec3<T>],
    level_counts: [usize; 2],
    start_index: usize,
) -> Result<HierarchicalDecomposition> {
    let [n1, n2] = level_counts;
    if n2 > n1 {
        return Err(Error::CountExceedsPoints {
            count: n2,
            available: n1,
        });
    }
    let first = sample_and_group(points, n1, start_index)?;
    let centers: Vec<Vec3<T>> = first.center_indices().iter().map(|&c| points[c]).collect();
    let second = sample_and_group(&centers, n2, 0)?;
    Ok(HierarchicalDecomposition { first, second })
}

//! Exact nearest-neighbour search over 3D points.
//!
//! Ties are broken by the lower point index so that every query result is a
//! deterministic function of the input cloud.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scalar::Real;

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node<T> {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: T,
        left: usize,
        right: usize,
    },
}

/// Static kd-tree. Read-only after construction, so shared references may
/// be queried from any number of threads.
#[derive(Debug, Clone)]
pub struct KdTree<T: Real> {
    points: Vec<Vector3<T>>,
    order: Vec<usize>,
    nodes: Vec<Node<T>>,
}

/// `(squared distance, index)` ordered lexicographically.
#[derive(Debug, Clone, Copy)]
struct Candidate<T> {
    dist2: T,
    index: usize,
}

impl<T: Real> PartialEq for Candidate<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T: Real> Eq for Candidate<T> {}

impl<T: Real> PartialOrd for Candidate<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Real> Ord for Candidate<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .partial_cmp(&other.dist2)
            .unwrap_or(Ordering::Equal)
            .then(self.index.cmp(&other.index))
    }
}

impl<T: Real> KdTree<T> {
    pub fn build(points: &[Vector3<T>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud("cannot index an empty cloud"));
        }
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1),
        };
        tree.build_node(0, points.len());
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<T>] {
        &self.points
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        // split on the axis of largest spread
        let mut lo = self.points[self.order[start]];
        let mut hi = lo;
        for &i in &self.order[start..end] {
            let p = self.points[i];
            for a in 0..3 {
                if p[a] < lo[a] {
                    lo[a] = p[a];
                }
                if p[a] > hi[a] {
                    hi[a] = p[a];
                }
            }
        }
        let spread = hi - lo;
        let mut axis = 0;
        for a in 1..3 {
            if spread[a] > spread[axis] {
                axis = a;
            }
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis]
                .partial_cmp(&points[b][axis])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Exact nearest neighbour: `(index, distance)`.
    pub fn nearest(&self, query: &Vector3<T>) -> (usize, T) {
        let mut best = Candidate {
            dist2: T::lit(f64::INFINITY),
            index: usize::MAX,
        };
        self.nearest_rec(0, query, &mut best);
        (best.index, best.dist2.sqrt())
    }

    fn nearest_rec(&self, node: usize, q: &Vector3<T>, best: &mut Candidate<T>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let c = Candidate {
                        dist2: (self.points[i] - q).norm_squared(),
                        index: i,
                    };
                    if c < *best {
                        *best = c;
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < T::zero() { (left, right) } else { (right, left) };
                self.nearest_rec(near, q, best);
                if diff * diff <= best.dist2 {
                    self.nearest_rec(far, q, best);
                }
            }
        }
    }

    /// The `k` nearest points sorted by `(distance, index)`, as
    /// `(index, distance)` pairs.
    pub fn knn(&self, query: &Vector3<T>, k: usize) -> Vec<(usize, T)> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_rec(0, query, k, &mut heap);
        let mut out: Vec<Candidate<T>> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.index, c.dist2.sqrt())).collect()
    }

    fn knn_rec(&self, node: usize, q: &Vector3<T>, k: usize, heap: &mut BinaryHeap<Candidate<T>>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let c = Candidate {
                        dist2: (self.points[i] - q).norm_squared(),
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if let Some(worst) = heap.peek() {
                        if c < *worst {
                            heap.pop();
                            heap.push(c);
                        }
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < T::zero() { (left, right) } else { (right, left) };
                self.knn_rec(near, q, k, heap);
                let visit = heap.len() < k || heap.peek().is_some_and(|w| diff * diff <= w.dist2);
                if visit {
                    self.knn_rec(far, q, k, heap);
                }
            }
        }
    }

    /// All points within `radius` (inclusive), sorted by `(distance, index)`.
    pub fn within_radius(&self, query: &Vector3<T>, radius: T) -> Vec<(usize, T)> {
        let r2 = radius * radius;
        let mut out = Vec::new();
        self.radius_rec(0, query, r2, &mut out);
        out.sort();
        out.into_iter().map(|c| (c.index, c.dist2.sqrt())).collect()
    }

    fn radius_rec(&self, node: usize, q: &Vector3<T>, r2: T, out: &mut Vec<Candidate<T>>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = (self.points[i] - q).norm_squared();
                    if d2 <= r2 {
                        out.push(Candidate { dist2: d2, index: i });
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                if diff <= T::zero() || diff * diff <= r2 {
                    self.radius_rec(left, q, r2, out);
                }
                if diff >= T::zero() || diff * diff <= r2 {
                    self.radius_rec(right, q, r2, out);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn brute_nearest(points: &[Vector3<f64>], q: &Vector3<f64>) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d = (p - q).norm_squared();
            if d < best.1 {
                best = (i, d);
            }
        }
        (best.0, best.1.sqrt())
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-100.0..100.0),
                    rng.random_range(-100.0..100.0),
                    rng.random_range(-20.0..20.0),
                )
            })
            .collect()
    }

    #[test]
    fn empty_cloud_rejected() {
        assert!(KdTree::<f64>::build(&[]).is_err());
    }

    #[test]
    fn exact_hit_and_two_point_case() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(10.0, 0.0, 0.0)];
        let tree = KdTree::build(&pts).unwrap();
        assert_eq!(tree.nearest(&Vector3::new(10.0, 0.0, 0.0)), (1, 0.0));
        assert_eq!(tree.nearest(&Vector3::new(4.0, 0.0, 0.0)), (0, 4.0));
    }

    #[test]
    fn matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts = random_points(&mut rng, 1000);
        let tree = KdTree::build(&pts).unwrap();
        for _ in 0..2000 {
            let q = Vector3::new(
                rng.random_range(-120.0..120.0),
                rng.random_range(-120.0..120.0),
                rng.random_range(-40.0..40.0),
            );
            assert_eq!(tree.nearest(&q), brute_nearest(&pts, &q));
        }
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let pts = vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
        ];
        let tree = KdTree::build(&pts).unwrap();
        assert_eq!(tree.nearest(&Vector3::zeros()).0, 0);
        assert_eq!(tree.nearest(&Vector3::new(1.0, 0.0, 0.0)).0, 0);
    }

    #[test]
    fn knn_matches_sorted_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts = random_points(&mut rng, 500);
        let tree = KdTree::build(&pts).unwrap();
        for _ in 0..200 {
            let q = Vector3::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), 0.0);
            let mut all: Vec<(f64, usize)> = pts
                .iter()
                .enumerate()
                .map(|(i, p)| ((p - q).norm_squared(), i))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let got = tree.knn(&q, 9);
            let want: Vec<usize> = all[..9].iter().map(|x| x.1).collect();
            assert_eq!(got.iter().map(|x| x.0).collect::<Vec<_>>(), want);
        }
    }

    #[test]
    fn radius_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pts = random_points(&mut rng, 800);
        let tree = KdTree::build(&pts).unwrap();
        let q = Vector3::new(5.0, -3.0, 1.0);
        let got: Vec<usize> = tree.within_radius(&q, 25.0).iter().map(|x| x.0).collect();
        let mut want: Vec<(f64, usize)> = pts
            .iter()
            .enumerate()
            .filter(|(_, p)| (*p - q).norm() <= 25.0)
            .map(|(i, p)| ((p - q).norm_squared(), i))
            .collect();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want.iter().map(|x| x.1).collect::<Vec<_>>());
    }

    #[test]
    fn works_in_f32() {
        let pts: Vec<Vector3<f32>> = (0..100)
            .map(|i| Vector3::new(i as f32, (i * 7 % 13) as f32, 0.0))
            .collect();
        let tree = KdTree::build(&pts).unwrap();
        assert_eq!(tree.nearest(&Vector3::new(42.2, 8.0, 0.0)).0, 42);
    }
}

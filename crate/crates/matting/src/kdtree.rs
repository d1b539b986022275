//! Exact k-d tree nearest-neighbor search with inclusive tie handling.
//!
//! `k_nearest_with_ties` returns every point whose distance equals the k-th
//! smallest, not an arbitrary index cut through the tie group. The neighbor
//! set is therefore a pure function of the point data, which keeps graphs
//! built from repeated frames symmetric.

const LEAF_SIZE: usize = 16;

enum Node {
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        start: usize,
        end: usize,
    },
}

pub struct KdTree<const D: usize> {
    points: Vec<[f64; D]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
    root: usize,
}

impl<const D: usize> KdTree<D> {
    /// Builds over finite coordinates. Panics on NaN.
    pub fn build(points: Vec<[f64; D]>) -> Self {
        assert!(points.iter().all(|p| p.iter().all(|c| c.is_finite())));
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        let root = if points.is_empty() {
            nodes.push(Node::Leaf { start: 0, end: 0 });
            0
        } else {
            let n = points.len();
            build_rec(&points, &mut order, &mut nodes, 0, n)
        };
        KdTree {
            points,
            order,
            nodes,
            root,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// All points (distance², index) whose distance to `query` is within the
    /// k-th smallest among non-excluded points, sorted by (distance², index).
    /// Returns fewer than k only when fewer candidates exist.
    pub fn k_nearest_with_ties(
        &self,
        query: &[f64; D],
        k: usize,
        exclude: Option<usize>,
    ) -> Vec<(f64, usize)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        // Phase 1: k-th smallest squared distance via a bounded max-heap.
        let mut heap: Vec<f64> = Vec::with_capacity(k); // max-heap by dist²
        self.kth_search(self.root, query, k, exclude, &mut heap);
        let d_k = heap.first().copied().unwrap_or(f64::INFINITY);
        // Phase 2: gather everything within d_k (inclusive).
        let mut out: Vec<(f64, usize)> = Vec::with_capacity(k + 4);
        self.range_search(self.root, query, d_k, exclude, &mut out);
        out.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        out
    }

    fn kth_search(
        &self,
        node: usize,
        query: &[f64; D],
        k: usize,
        exclude: Option<usize>,
        heap: &mut Vec<f64>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &idx in &self.order[start..end] {
                    if Some(idx) == exclude {
                        continue;
                    }
                    let d = dist_sq(query, &self.points[idx]);
                    if heap.len() < k {
                        heap_push(heap, d);
                    } else if d < heap[0] {
                        heap_replace_top(heap, d);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.kth_search(near, query, k, exclude, heap);
                // Descend the far side unless it provably cannot improve or
                // tie the current k-th distance.
                if heap.len() < k || diff * diff <= heap[0] {
                    self.kth_search(far, query, k, exclude, heap);
                }
            }
        }
    }

    fn range_search(
        &self,
        node: usize,
        query: &[f64; D],
        radius_sq: f64,
        exclude: Option<usize>,
        out: &mut Vec<(f64, usize)>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &idx in &self.order[start..end] {
                    if Some(idx) == exclude {
                        continue;
                    }
                    let d = dist_sq(query, &self.points[idx]);
                    if d <= radius_sq {
                        out.push((d, idx));
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.range_search(near, query, radius_sq, exclude, out);
                if diff * diff <= radius_sq {
                    self.range_search(far, query, radius_sq, exclude, out);
                }
            }
        }
    }
}

fn build_rec<const D: usize>(
    points: &[[f64; D]],
    order: &mut [usize],
    nodes: &mut Vec<Node>,
    start: usize,
    end: usize,
) -> usize {
    let len = end - start;
    // Widest-spread axis; a zero spread means all points here coincide.
    let mut best_axis = 0;
    let mut best_spread = -1.0;
    for axis in 0..D {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &idx in &order[start..end] {
            let c = points[idx][axis];
            lo = lo.min(c);
            hi = hi.max(c);
        }
        let spread = hi - lo;
        if spread > best_spread {
            best_spread = spread;
            best_axis = axis;
        }
    }
    if len <= LEAF_SIZE || best_spread == 0.0 {
        nodes.push(Node::Leaf { start, end });
        return nodes.len() - 1;
    }
    let mid = start + len / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        (points[a][best_axis], a)
            .partial_cmp(&(points[b][best_axis], b))
            .unwrap()
    });
    let split_value = points[order[mid]][best_axis];
    let left = build_rec(points, order, nodes, start, mid);
    let right = build_rec(points, order, nodes, mid, end);
    nodes.push(Node::Split {
        axis: best_axis,
        value: split_value,
        left,
        right,
    });
    nodes.len() - 1
}

#[inline]
fn dist_sq<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut acc = 0.0;
    for i in 0..D {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc
}

// Minimal binary max-heap over f64 (finite values only).
fn heap_push(heap: &mut Vec<f64>, v: f64) {
    heap.push(v);
    let mut i = heap.len() - 1;
    while i > 0 {
        let parent = (i - 1) / 2;
        if heap[parent] < heap[i] {
            heap.swap(parent, i);
            i = parent;
        } else {
            break;
        }
    }
}

fn heap_replace_top(heap: &mut [f64], v: f64) {
    heap[0] = v;
    let mut i = 0;
    loop {
        let l = 2 * i + 1;
        let r = 2 * i + 2;
        let mut largest = i;
        if l < heap.len() && heap[l] > heap[largest] {
            largest = l;
        }
        if r < heap.len() && heap[r] > heap[largest] {
            largest = r;
        }
        if largest == i {
            break;
        }
        heap.swap(i, largest);
        i = largest;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute<const D: usize>(
        points: &[[f64; D]],
        q: &[f64; D],
        k: usize,
        exclude: Option<usize>,
    ) -> Vec<(f64, usize)> {
        let mut all: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != exclude)
            .map(|(i, p)| (dist_sq(q, p), i))
            .collect();
        all.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        if all.len() > k {
            let kth = all[k - 1].0;
            all.retain(|&(d, _)| d <= kth);
        }
        all
    }

    #[test]
    fn matches_brute_force_on_grid_with_ties() {
        // Integer grid: plenty of exact distance ties.
        let mut pts = Vec::new();
        for y in 0..8 {
            for x in 0..8 {
                pts.push([x as f64, y as f64]);
            }
        }
        let tree = KdTree::build(pts.clone());
        for (qi, q) in pts.iter().enumerate() {
            for k in [1, 3, 5] {
                let got = tree.k_nearest_with_ties(q, k, Some(qi));
                let want = brute(&pts, q, k, Some(qi));
                assert_eq!(got, want, "query {qi} k={k}");
            }
        }
    }

    #[test]
    fn matches_brute_force_on_pseudorandom_points() {
        // Deterministic low-discrepancy-ish points, no RNG needed.
        let pts: Vec<[f64; 5]> = (0..300)
            .map(|i| {
                let f = i as f64;
                [
                    (f * 0.754877666).fract(),
                    (f * 0.569840296).fract(),
                    (f * 0.362123668).fract(),
                    (f * 0.142623231).fract(),
                    (f * 0.934802877).fract(),
                ]
            })
            .collect();
        let tree = KdTree::build(pts.clone());
        for qi in (0..300).step_by(17) {
            let got = tree.k_nearest_with_ties(&pts[qi], 12, Some(qi));
            let want = brute(&pts, &pts[qi], 12, Some(qi));
            assert_eq!(got, want, "query {qi}");
        }
    }

    #[test]
    fn duplicate_points_all_reported() {
        let pts = vec![[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [5.0, 0.0]];
        let tree = KdTree::build(pts);
        let got = tree.k_nearest_with_ties(&[0.0, 0.0], 2, Some(0));
        // Both zero-distance duplicates tie within k=2.
        assert_eq!(got, vec![(0.0, 1), (0.0, 2)]);
    }

    #[test]
    fn fewer_points_than_k() {
        let pts = vec![[1.0], [2.0]];
        let tree = KdTree::build(pts);
        let got = tree.k_nearest_with_ties(&[0.0], 10, None);
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].1, 0);
    }
}

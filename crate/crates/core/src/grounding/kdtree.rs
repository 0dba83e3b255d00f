use crate::scalar::Scalar;

/// Static 3D kd-tree over (point, id) pairs. Built once per map; queries
/// return (distance, id) sorted ascending with id as tie-break, so results
/// are stable under permutation of the input.
pub struct KdTree<T: Scalar> {
    pts: Vec<([T; 3], u32)>,
}

fn dist2<T: Scalar>(a: &[T; 3], b: &[T; 3]) -> T {
    let mut s = T::zero();
    for i in 0..3 {
        let d = a[i] - b[i];
        s = s + d * d;
    }
    s
}

impl<T: Scalar> KdTree<T> {
    pub fn build(mut pts: Vec<([T; 3], u32)>) -> Self {
        fn layout<T: Scalar>(pts: &mut [([T; 3], u32)], depth: usize) {
            if pts.len() <= 1 {
                return;
            }
            let axis = depth % 3;
            let mid = pts.len() / 2;
            pts.select_nth_unstable_by(mid, |a, b| {
                a.0[axis]
                    .partial_cmp(&b.0[axis])
                    .expect("finite coordinates")
                    .then(a.1.cmp(&b.1))
            });
            let (lo, rest) = pts.split_at_mut(mid);
            layout(lo, depth + 1);
            layout(&mut rest[1..], depth + 1);
        }
        layout(&mut pts, 0);
        Self { pts }
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// All points with distance <= radius from `q`, sorted by (distance, id).
    pub fn within_radius(&self, q: &[T; 3], radius: T) -> Vec<(T, u32)> {
        let mut out = Vec::new();
        let r2 = radius * radius;
        self.search_radius(0..self.pts.len(), 0, q, r2, &mut out);
        out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for e in out.iter_mut() {
            e.0 = e.0.sqrt();
        }
        out
    }

    fn search_radius(
        &self,
        range: std::ops::Range<usize>,
        depth: usize,
        q: &[T; 3],
        r2: T,
        out: &mut Vec<(T, u32)>,
    ) {
        if range.is_empty() {
            return;
        }
        let mid = range.start + range.len() / 2;
        let (p, id) = &self.pts[mid];
        let d2 = dist2(p, q);
        if d2 <= r2 {
            out.push((d2, *id));
        }
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < T::zero() {
            (range.start..mid, mid + 1..range.end)
        } else {
            (mid + 1..range.end, range.start..mid)
        };
        self.search_radius(near, depth + 1, q, r2, out);
        if diff * diff <= r2 {
            self.search_radius(far, depth + 1, q, r2, out);
        }
    }

    /// The k closest points to `q`, sorted by (distance, id).
    pub fn k_nearest(&self, q: &[T; 3], k: usize) -> Vec<(T, u32)> {
        if k == 0 || self.pts.is_empty() {
            return Vec::new();
        }
        let mut best: Vec<(T, u32)> = Vec::with_capacity(k + 1);
        self.search_knn(0..self.pts.len(), 0, q, k, &mut best);
        for e in best.iter_mut() {
            e.0 = e.0.sqrt();
        }
        best
    }

    fn search_knn(
        &self,
        range: std::ops::Range<usize>,
        depth: usize,
        q: &[T; 3],
        k: usize,
        best: &mut Vec<(T, u32)>,
    ) {
        if range.is_empty() {
            return;
        }
        let mid = range.start + range.len() / 2;
        let (p, id) = &self.pts[mid];
        let d2 = dist2(p, q);
        let pos = best
            .binary_search_by(|e| e.0.partial_cmp(&d2).unwrap().then(e.1.cmp(id)))
            .unwrap_or_else(|i| i);
        best.insert(pos, (d2, *id));
        best.truncate(k);
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < T::zero() {
            (range.start..mid, mid + 1..range.end)
        } else {
            (mid + 1..range.end, range.start..mid)
        };
        self.search_knn(near, depth + 1, q, k, best);
        // The far side can still matter while the list is short or the
        // splitting plane is closer than the current worst hit.
        if best.len() < k || diff * diff <= best.last().unwrap().0 {
            self.search_knn(far, depth + 1, q, k, best);
        }
    }
}

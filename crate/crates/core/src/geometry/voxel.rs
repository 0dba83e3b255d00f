use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Cell = [i32; 3];

/// Sparse voxel occupancy over a world-aligned grid. All point clouds in the
/// pipeline are realized as voxel sets at a single shared `voxel_size`.
#[derive(Debug, Clone)]
pub struct VoxelSet<T: Scalar> {
    pub voxel_size: T,
    cells: HashSet<Cell>,
}

impl<T: Scalar> VoxelSet<T> {
    pub fn new(voxel_size: T) -> Self {
        Self { voxel_size, cells: HashSet::new() }
    }

    pub fn from_cells(voxel_size: T, cells: impl IntoIterator<Item = Cell>) -> Self {
        Self { voxel_size, cells: cells.into_iter().collect() }
    }

    pub fn from_points(voxel_size: T, points: impl IntoIterator<Item = [T; 3]>) -> Self {
        let cells = points.into_iter().map(|p| Self::cell_of(p, voxel_size));
        Self::from_cells(voxel_size, cells)
    }

    /// Grid cell containing a world-space point.
    pub fn cell_of(point: [T; 3], voxel_size: T) -> Cell {
        let f = |v: T| {
            (v / voxel_size)
                .floor()
                .to_i32()
                .expect("voxel coordinate exceeds i32 range")
        };
        [f(point[0]), f(point[1]), f(point[2])]
    }

    pub fn insert(&mut self, cell: Cell) {
        self.cells.insert(cell);
    }

    pub fn insert_point(&mut self, point: [T; 3]) {
        self.cells.insert(Self::cell_of(point, self.voxel_size));
    }

    pub fn contains(&self, cell: &Cell) -> bool {
        self.cells.contains(cell)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter()
    }

    /// Cells in ascending lexicographic order, for deterministic output.
    pub fn sorted_cells(&self) -> Vec<Cell> {
        let mut v: Vec<Cell> = self.cells.iter().copied().collect();
        v.sort_unstable();
        v
    }

    pub fn union_with(&mut self, other: &VoxelSet<T>) {
        debug_assert!(self.voxel_size == other.voxel_size);
        self.cells.extend(other.cells.iter().copied());
    }

    pub fn intersection_count(&self, other: &VoxelSet<T>) -> usize {
        let (small, large) = if self.len() <= other.len() { (self, other) } else { (other, self) };
        small.cells.iter().filter(|c| large.cells.contains(*c)).count()
    }

    /// Center of mass of the cell centers, in meters. The sum runs over
    /// integers so the result is independent of iteration order.
    pub fn centroid(&self) -> Result<[T; 3]> {
        if self.cells.is_empty() {
            return Err(Error::domain("centroid of empty voxel set"));
        }
        let mut sum = [0i64; 3];
        for c in &self.cells {
            for a in 0..3 {
                sum[a] += c[a] as i64;
            }
        }
        let n = T::from_usize(self.cells.len()).unwrap();
        let half = T::from_f64_cfg(0.5);
        let mut out = [T::zero(); 3];
        for a in 0..3 {
            out[a] = (T::from_i64(sum[a]).unwrap() / n + half) * self.voxel_size;
        }
        Ok(out)
    }

    /// True when the sets share a cell after dilating one side by one cell
    /// in every direction. Used as a cheap no-false-negative prefilter for
    /// pair enumeration: clouds failing this cannot be supported by any
    /// common mask under containment thresholds above zero only if... it is
    /// a heuristic candidate gate, kept conservative (26-neighborhood).
    pub fn touches_dilated(&self, other: &VoxelSet<T>) -> bool {
        let (small, large) = if self.len() <= other.len() { (self, other) } else { (other, self) };
        for c in &small.cells {
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if large.cells.contains(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

/// Fraction of `a`'s cells present in `b`. Asymmetric by design: the caller
/// chooses which side the fraction is over.
pub fn overlap_fraction<T: Scalar>(a: &VoxelSet<T>, b: &VoxelSet<T>) -> Result<T> {
    if a.is_empty() {
        return Err(Error::domain("overlap_fraction over empty set"));
    }
    let shared = a.iter().filter(|c| b.contains(c)).count();
    Ok(T::from_usize(shared).unwrap() / T::from_usize(a.len()).unwrap())
}

/// Fraction of `inner` lying inside `outer`; the containment reading of the
/// same measure, thresholded by tau_sub at its call sites.
pub fn containment<T: Scalar>(inner: &VoxelSet<T>, outer: &VoxelSet<T>) -> Result<T> {
    if inner.is_empty() {
        return Err(Error::domain("containment of empty set"));
    }
    overlap_fraction(inner, outer)
}

const NEIGHBORS_26: [[i32; 3]; 26] = neighbor_offsets();

const fn neighbor_offsets() -> [[i32; 3]; 26] {
    let mut out = [[0i32; 3]; 26];
    let mut idx = 0;
    let mut dx = -1;
    while dx <= 1 {
        let mut dy = -1;
        while dy <= 1 {
            let mut dz = -1;
            while dz <= 1 {
                if !(dx == 0 && dy == 0 && dz == 0) {
                    out[idx] = [dx, dy, dz];
                    idx += 1;
                }
                dz += 1;
            }
            dy += 1;
        }
        dx += 1;
    }
    out
}

/// Partition into 26-connected components, largest first; equal sizes are
/// ordered by their lexicographically smallest cell.
pub fn connected_components<T: Scalar>(v: &VoxelSet<T>) -> Vec<VoxelSet<T>> {
    let cells = v.sorted_cells();
    let index: HashMap<Cell, usize> = cells.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let mut uf = UnionFind::new(cells.len());
    for (i, c) in cells.iter().enumerate() {
        for off in NEIGHBORS_26 {
            let n = [c[0] + off[0], c[1] + off[1], c[2] + off[2]];
            if let Some(&j) = index.get(&n) {
                uf.union(i, j);
            }
        }
    }
    let mut groups: HashMap<usize, Vec<Cell>> = HashMap::new();
    for (i, c) in cells.iter().enumerate() {
        groups.entry(uf.find(i)).or_default().push(*c);
    }
    let mut comps: Vec<Vec<Cell>> = groups.into_values().collect();
    // Cells within each group are already ascending (insertion followed
    // sorted order), so element 0 is the lexicographic minimum.
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a[0].cmp(&b[0])));
    comps
        .into_iter()
        .map(|cells| VoxelSet::from_cells(v.voxel_size, cells))
        .collect()
}

/// Disjoint-set forest with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), size: vec![1; n] }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns true when the two were in different sets.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }

    pub fn same(&mut self, a: usize, b: usize) -> bool {
        self.find(a) == self.find(b)
    }
}

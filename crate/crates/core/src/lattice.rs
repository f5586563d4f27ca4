//! Nearest-neighbour steps and dense indexing of finite lattice regions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The 2d unit steps of Z^d in canonical order `+e1, -e1, +e2, -e2, ...`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSet {
    d: usize,
}

impl StepSet {
    pub fn new(d: usize) -> Result<Self> {
        if d == 0 || d > 16 {
            return Err(Error::config(format!("dimension must be in 1..=16, got {d}")));
        }
        Ok(StepSet { d })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Number of steps, `2d`.
    pub fn len(&self) -> usize {
        2 * self.d
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn axis(s: usize) -> usize {
        s / 2
    }

    #[inline]
    pub fn sign(s: usize) -> i64 {
        if s % 2 == 0 {
            1
        } else {
            -1
        }
    }

    /// The step as a lattice vector.
    pub fn vector(&self, s: usize) -> Vec<i64> {
        let mut v = vec![0; self.d];
        v[Self::axis(s)] = Self::sign(s);
        v
    }

    /// `⟨theta, z_s⟩`.
    #[inline]
    pub fn dot(theta: &[f64], s: usize) -> f64 {
        Self::sign(s) as f64 * theta[Self::axis(s)]
    }

    #[inline]
    pub fn apply(x: &mut [i64], s: usize) {
        x[Self::axis(s)] += Self::sign(s);
    }

    #[inline]
    pub fn unapply(x: &mut [i64], s: usize) {
        x[Self::axis(s)] -= Self::sign(s);
    }

    /// The opposite step.
    #[inline]
    pub fn reverse(s: usize) -> usize {
        s ^ 1
    }

    pub fn label(s: usize) -> String {
        format!("{}e{}", if s % 2 == 0 { '+' } else { '-' }, s / 2 + 1)
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.len()).map(Self::label).collect()
    }

    /// Parses `+e1`, `-e3`, `e2` (positive) into a step index.
    pub fn parse(&self, text: &str) -> Result<usize> {
        let t = text.trim();
        let (sign, rest) = match t.as_bytes().first() {
            Some(b'+') => (0, &t[1..]),
            Some(b'-') => (1, &t[1..]),
            _ => (0, t),
        };
        let axis: usize = rest
            .strip_prefix('e')
            .and_then(|a| a.parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad step `{text}` (expected e.g. +e1)")))?;
        if axis == 0 || axis > self.d {
            return Err(Error::Parse(format!("step `{text}` has no axis in d={}", self.d)));
        }
        Ok(2 * (axis - 1) + sign)
    }

    /// Index of the unit vector `v`, if it is one.
    pub fn index_of(&self, v: &[i64]) -> Option<usize> {
        if v.len() != self.d || l1(v) != 1 {
            return None;
        }
        let axis = v.iter().position(|&c| c != 0)?;
        Some(2 * axis + usize::from(v[axis] < 0))
    }
}

#[inline]
pub fn l1(x: &[i64]) -> i64 {
    x.iter().map(|c| c.abs()).sum()
}

pub fn dot(theta: &[f64], x: &[i64]) -> f64 {
    theta.iter().zip(x).map(|(t, &c)| t * c as f64).sum()
}

pub fn euclid(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

const PREFIX_TABLE_CAP: u128 = 50_000_000;

/// A finite set of lattice sites with a dense, stable index.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    Ball(L1Ball),
    Box(BoxRegion),
}

impl Region {
    pub fn ball(center: Vec<i64>, radius: i64) -> Result<Self> {
        Ok(Region::Ball(L1Ball::new(center, radius)?))
    }

    pub fn boxed(lo: Vec<i64>, hi: Vec<i64>) -> Result<Self> {
        Ok(Region::Box(BoxRegion::new(lo, hi)?))
    }

    pub fn dim(&self) -> usize {
        match self {
            Region::Ball(b) => b.center.len(),
            Region::Box(b) => b.lo.len(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Region::Ball(b) => b.len,
            Region::Box(b) => b.len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: &[i64]) -> Option<usize> {
        match self {
            Region::Ball(b) => b.index(x),
            Region::Box(b) => b.index(x),
        }
    }

    pub fn contains(&self, x: &[i64]) -> bool {
        self.index(x).is_some()
    }

    /// Writes the site with dense index `i` into `out`.
    pub fn site_into(&self, i: usize, out: &mut [i64]) {
        match self {
            Region::Ball(b) => b.site_into(i, out),
            Region::Box(b) => b.site_into(i, out),
        }
    }

    pub fn site(&self, i: usize) -> Vec<i64> {
        let mut out = vec![0; self.dim()];
        self.site_into(i, &mut out);
        out
    }

    /// Visits every site in index order.
    pub fn for_each_site(&self, mut f: impl FnMut(usize, &[i64])) {
        let mut x = vec![0; self.dim()];
        for i in 0..self.len() {
            self.site_into(i, &mut x);
            f(i, &x);
        }
    }

    /// The same region translated by `-offset`.
    pub fn translated(&self, offset: &[i64]) -> Result<Region> {
        match self {
            Region::Ball(b) => Region::ball(
                b.center.iter().zip(offset).map(|(c, o)| c - o).collect(),
                b.radius,
            ),
            Region::Box(b) => Region::boxed(
                b.lo.iter().zip(offset).map(|(c, o)| c - o).collect(),
                b.hi.iter().zip(offset).map(|(c, o)| c - o).collect(),
            ),
        }
    }

    /// Points whose membership in a convex region decides containment of
    /// the whole region: the 2d vertices of a ball, the corners of a box.
    pub fn extreme_points(&self) -> Vec<Vec<i64>> {
        if self.is_empty() {
            return Vec::new();
        }
        match self {
            Region::Ball(b) => {
                let d = b.center.len();
                (0..2 * d)
                    .map(|s| {
                        let mut v = b.center.clone();
                        v[s / 2] += if s % 2 == 0 { b.radius } else { -b.radius };
                        v
                    })
                    .collect()
            }
            Region::Box(b) => {
                let d = b.lo.len();
                (0..1usize << d)
                    .map(|mask| {
                        (0..d)
                            .map(|k| if mask >> k & 1 == 1 { b.hi[k] } else { b.lo[k] })
                            .collect()
                    })
                    .collect()
            }
        }
    }

    /// A site of `self` outside `other`, if any.
    pub fn witness_outside(&self, other: &Region) -> Option<Vec<i64>> {
        self.extreme_points().into_iter().find(|x| !other.contains(x))
    }

    /// Every site of `self` lies in `other`.
    pub fn subset_of(&self, other: &Region) -> bool {
        self.witness_outside(other).is_none()
    }

    /// Every nearest neighbour of `self` lies in `other`.
    pub fn neighbours_within(&self, other: &Region) -> bool {
        match self {
            Region::Ball(b) => Region::ball(b.center.clone(), b.radius + 1)
                .map(|g| g.subset_of(other))
                .unwrap_or(false),
            Region::Box(b) => {
                if b.len == 0 {
                    return true;
                }
                // the neighbour set's convex hull is spanned by corners moved one step
                let d = b.lo.len();
                let mut pts = self.extreme_points();
                let corners = pts.clone();
                for c in &corners {
                    for s in 0..2 * d {
                        let mut y = c.clone();
                        StepSet::apply(&mut y, s);
                        pts.push(y);
                    }
                }
                pts.iter().all(|x| other.contains(x))
            }
        }
    }
}

/// `{x : |x - center|_1 <= radius}`, indexed row by row with the last
/// coordinate varying fastest.
#[derive(Debug, Clone)]
pub struct L1Ball {
    center: Vec<i64>,
    radius: i64,
    len: usize,
    // Offsets of each prefix row, dense over the prefix box [-r, r]^(d-1); -1 for empty rows.
    prefix_offsets: Vec<i64>,
    // Start index of every non-empty row, with its prefix, for decoding.
    row_starts: Vec<usize>,
    row_prefixes: Vec<i64>,
}

impl PartialEq for L1Ball {
    fn eq(&self, other: &Self) -> bool {
        self.center == other.center && self.radius == other.radius
    }
}

impl L1Ball {
    pub fn new(center: Vec<i64>, radius: i64) -> Result<Self> {
        let d = center.len();
        if d == 0 {
            return Err(Error::config("empty dimension"));
        }
        if radius < 0 {
            return Ok(L1Ball {
                center,
                radius,
                len: 0,
                prefix_offsets: Vec::new(),
                row_starts: Vec::new(),
                row_prefixes: Vec::new(),
            });
        }
        let side = (2 * radius + 1) as u128;
        let table = side.pow((d - 1) as u32);
        if table > PREFIX_TABLE_CAP {
            return Err(Error::resource("L1 ball row table", table, PREFIX_TABLE_CAP));
        }
        let table = table as usize;
        let mut prefix_offsets = vec![-1i64; table];
        let mut row_starts = Vec::new();
        let mut row_prefixes = Vec::new();
        let mut prefix = vec![-radius; d - 1];
        let mut len = 0usize;
        for slot in prefix_offsets.iter_mut() {
            let hw = radius - l1(&prefix);
            if hw >= 0 {
                *slot = len as i64;
                row_starts.push(len);
                row_prefixes.extend_from_slice(&prefix);
                len += (2 * hw + 1) as usize;
            }
            // odometer over the prefix box, last prefix coordinate fastest
            for k in (0..d - 1).rev() {
                prefix[k] += 1;
                if prefix[k] <= radius {
                    break;
                }
                prefix[k] = -radius;
            }
        }
        Ok(L1Ball {
            center,
            radius,
            len,
            prefix_offsets,
            row_starts,
            row_prefixes,
        })
    }

    pub fn center(&self) -> &[i64] {
        &self.center
    }

    pub fn radius(&self) -> i64 {
        self.radius
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Start index and half-width of the row whose first `d - 1` coordinates,
    /// relative to the centre, are `prefix`.
    #[inline]
    pub fn row(&self, prefix: &[i64]) -> Option<(usize, i64)> {
        let r = self.radius;
        let hw = r - l1(prefix);
        if hw < 0 {
            return None;
        }
        let side = 2 * r + 1;
        let slot = prefix.iter().fold(0i64, |acc, &c| acc * side + c + r);
        Some((self.prefix_offsets[slot as usize] as usize, hw))
    }

    /// Visits every row as `(relative prefix, start index, half-width)`.
    pub fn for_each_row(&self, mut f: impl FnMut(&[i64], usize, i64)) {
        let d = self.center.len();
        for (row, &start) in self.row_starts.iter().enumerate() {
            let prefix = &self.row_prefixes[row * (d - 1)..(row + 1) * (d - 1)];
            f(prefix, start, self.radius - l1(prefix));
        }
    }

    #[inline]
    pub fn index(&self, x: &[i64]) -> Option<usize> {
        let d = self.center.len();
        let r = self.radius;
        let mut norm = 0;
        let mut slot = 0i64;
        let side = 2 * r + 1;
        for k in 0..d {
            let c = x[k] - self.center[k];
            norm += c.abs();
            if k + 1 < d {
                slot = slot * side + (c + r);
            }
        }
        if norm > r {
            return None;
        }
        let last = x[d - 1] - self.center[d - 1];
        let hw = r - (norm - last.abs());
        let off = self.prefix_offsets[slot as usize];
        Some((off + last + hw) as usize)
    }

    pub fn site_into(&self, i: usize, out: &mut [i64]) {
        let d = self.center.len();
        let row = match self.row_starts.binary_search(&i) {
            Ok(r) => r,
            Err(r) => r - 1,
        };
        let prefix = &self.row_prefixes[row * (d - 1)..(row + 1) * (d - 1)];
        let hw = self.radius - l1(prefix);
        for k in 0..d - 1 {
            out[k] = self.center[k] + prefix[k];
        }
        out[d - 1] = self.center[d - 1] + (i - self.row_starts[row]) as i64 - hw;
    }
}

/// Number of sites of an L1 ball of radius `r` in `d` dimensions.
pub fn l1_ball_size(d: usize, r: i64) -> u128 {
    if r < 0 {
        return 0;
    }
    // S(d, r) = sum_k 2^k C(d,k) C(r,k)
    let mut total: u128 = 0;
    let mut cd: u128 = 1;
    let mut cr: u128 = 1;
    for k in 0..=d.min(r as usize) {
        if k > 0 {
            cd = cd * (d - k + 1) as u128 / k as u128;
            cr = cr * (r as u128 - k as u128 + 1) / k as u128;
        }
        total += (1u128 << k) * cd * cr;
    }
    total
}

/// Inclusive axis-aligned box `lo <= x <= hi`.
#[derive(Debug, Clone)]
pub struct BoxRegion {
    lo: Vec<i64>,
    hi: Vec<i64>,
    len: usize,
    strides: Vec<usize>,
}

impl PartialEq for BoxRegion {
    fn eq(&self, other: &Self) -> bool {
        self.lo == other.lo && self.hi == other.hi
    }
}

impl BoxRegion {
    pub fn new(lo: Vec<i64>, hi: Vec<i64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::config("box corners must have equal, positive dimension"));
        }
        let d = lo.len();
        let mut strides = vec![0; d];
        let mut len: u128 = 1;
        for k in (0..d).rev() {
            strides[k] = len as usize;
            len *= (hi[k] - lo[k] + 1).max(0) as u128;
        }
        if len > u32::MAX as u128 * 8 {
            return Err(Error::resource("box region", len, u32::MAX as u128 * 8));
        }
        Ok(BoxRegion {
            lo,
            hi,
            len: len as usize,
            strides,
        })
    }

    pub fn lo(&self) -> &[i64] {
        &self.lo
    }

    pub fn hi(&self) -> &[i64] {
        &self.hi
    }

    #[inline]
    pub fn index(&self, x: &[i64]) -> Option<usize> {
        let mut i = 0;
        for k in 0..self.lo.len() {
            if x[k] < self.lo[k] || x[k] > self.hi[k] {
                return None;
            }
            i += (x[k] - self.lo[k]) as usize * self.strides[k];
        }
        Some(i)
    }

    pub fn site_into(&self, mut i: usize, out: &mut [i64]) {
        for k in 0..self.lo.len() {
            out[k] = self.lo[k] + (i / self.strides[k]) as i64;
            i %= self.strides[k];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonical_step_order() {
        let s = StepSet::new(3).unwrap();
        assert_eq!(s.labels(), ["+e1", "-e1", "+e2", "-e2", "+e3", "-e3"]);
        for i in 0..6 {
            let v = s.vector(i);
            assert_eq!(l1(&v), 1);
            assert_eq!(s.index_of(&v), Some(i));
            assert_eq!(s.parse(&StepSet::label(i)).unwrap(), i);
        }
        assert!(s.parse("+e4").is_err());
        assert!(StepSet::new(0).is_err());
    }

    #[test]
    fn ball_sizes_match_closed_form() {
        for d in 1..=4 {
            for r in 0..8 {
                let b = L1Ball::new(vec![0; d], r).unwrap();
                assert_eq!(b.len as u128, l1_ball_size(d, r), "d={d} r={r}");
            }
        }
        // (2r+1)(2r^2+2r+3)/3 in three dimensions
        assert_eq!(l1_ball_size(3, 15), 31 * 483 / 3);
    }

    proptest! {
        #[test]
        fn ball_index_is_a_bijection(d in 1usize..4, r in 0i64..6, c in proptest::collection::vec(-3i64..3, 3)) {
            let center = c[..d].to_vec();
            let region = Region::ball(center.clone(), r).unwrap();
            let mut seen = vec![false; region.len()];
            region.for_each_site(|i, x| {
                assert!(l1(&x.iter().zip(&center).map(|(a, b)| a - b).collect::<Vec<_>>()) <= r);
                assert_eq!(region.index(x), Some(i));
                seen[i] = true;
            });
            prop_assert!(seen.iter().all(|&s| s));
        }

        #[test]
        fn box_index_is_a_bijection(lo in proptest::collection::vec(-3i64..1, 3), ext in proptest::collection::vec(0i64..4, 3)) {
            let hi: Vec<i64> = lo.iter().zip(&ext).map(|(a, e)| a + e).collect();
            let region = Region::boxed(lo, hi).unwrap();
            let mut count = 0;
            region.for_each_site(|i, x| {
                assert_eq!(region.index(x), Some(i));
                count += 1;
            });
            prop_assert_eq!(count, region.len());
        }
    }

    #[test]
    fn neighbour_containment() {
        let a = Region::ball(vec![0, 0], 2).unwrap();
        let b = Region::ball(vec![1, 0], 4).unwrap();
        assert!(a.neighbours_within(&b));
        assert!(!b.neighbours_within(&a));
        let bx = Region::boxed(vec![-3, -3], vec![3, 3]).unwrap();
        assert!(a.neighbours_within(&bx));
        assert!(a.subset_of(&bx));
        assert!(!Region::ball(vec![0, 0], 3).unwrap().neighbours_within(&bx));
    }
}

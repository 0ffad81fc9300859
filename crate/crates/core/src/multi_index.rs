//! Dense storage for fields indexed by `K`-dimensional nonnegative
//! integer vectors `n`, laid out level by level (`|n| = sum n_k`).
//!
//! Within a level the position of `n` is its stars-and-bars rank: with
//! bar positions `b_i = n_0 + ... + n_i + i`, the rank is
//! `sum_i C(b_i, i + 1)` over the first `K - 1` coordinates. This is a
//! bijection onto `0..C(L + K - 1, K - 1)`, so every level is a
//! contiguous slice and the iteration order (level, then rank) is fixed.

use std::sync::{Arc, OnceLock};

/// Binomial coefficient as `usize`; inputs are small.
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * (n - i) as u128 / (i + 1) as u128;
    }
    r as usize
}

/// Index arithmetic for one dimension count.
#[derive(Debug)]
pub struct Layout {
    dims: usize,
    offsets: Vec<usize>,
    coords: Vec<OnceLock<Arc<Vec<u32>>>>,
}

impl Layout {
    pub fn new(dims: usize, max_level: usize) -> Self {
        assert!(dims >= 1);
        Self {
            dims,
            offsets: (0..=max_level + 1)
                .map(|l| binomial(l + dims - 1, dims))
                .collect(),
            coords: (0..=max_level).map(|_| OnceLock::new()).collect(),
        }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn max_level(&self) -> usize {
        self.coords.len() - 1
    }

    /// Number of indices with `|n| = level`.
    pub fn level_len(&self, level: usize) -> usize {
        binomial(level + self.dims - 1, self.dims - 1)
    }

    /// Number of indices with `|n| < level`.
    pub fn level_offset(&self, level: usize) -> usize {
        match self.offsets.get(level) {
            Some(&o) => o,
            None => binomial(level + self.dims - 1, self.dims),
        }
    }

    /// Position of `n` within its level.
    #[inline]
    pub fn rank(&self, n: &[u32]) -> usize {
        match self.dims {
            1 => return 0,
            2 => return n[0] as usize,
            _ => {}
        }
        let mut bar = 0usize;
        let mut r = 0usize;
        for (i, &x) in n[..self.dims - 1].iter().enumerate() {
            bar += x as usize + if i == 0 { 0 } else { 1 };
            r += binomial(bar, i + 1);
        }
        r
    }

    /// Flat position of `n` in a field starting at level zero.
    #[inline]
    pub fn index(&self, n: &[u32]) -> usize {
        let level: u32 = n.iter().sum();
        self.level_offset(level as usize) + self.rank(n)
    }

    /// All indices of a level, `dims` coordinates each, in rank order.
    pub fn coords(&self, level: usize) -> Arc<Vec<u32>> {
        self.coords[level]
            .get_or_init(|| Arc::new(self.build_level(level)))
            .clone()
    }

    fn build_level(&self, level: usize) -> Vec<u32> {
        let d = self.dims;
        let len = self.level_len(level);
        let mut out = vec![0u32; len * d];
        let mut n = vec![0u32; d];
        for r in 0..len {
            self.unrank(level, r, &mut n);
            out[r * d..(r + 1) * d].copy_from_slice(&n);
        }
        out
    }

    fn unrank(&self, level: usize, mut r: usize, n: &mut [u32]) {
        let d = self.dims;
        if d == 1 {
            n[0] = level as u32;
            return;
        }
        // Recover bar positions from the largest down.
        let mut bars = vec![0usize; d - 1];
        for i in (0..d - 1).rev() {
            let mut b = i;
            while binomial(b + 1, i + 1) <= r {
                b += 1;
            }
            bars[i] = b;
            r -= binomial(b, i + 1);
        }
        let mut prev = 0usize;
        for i in 0..d - 1 {
            n[i] = (bars[i] - prev) as u32;
            prev = bars[i] + 1;
        }
        n[d - 1] = (level + d - 1 - prev) as u32;
    }
}

/// A field of fixed-width blocks (matrices or row vectors stored row
/// major) over all indices with `|n| <= levels - 1`.
#[derive(Debug, Clone)]
pub struct Field {
    width: usize,
    levels: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            levels: 0,
            data: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of complete levels stored.
    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn entries(&self) -> usize {
        self.data.len() / self.width.max(1)
    }

    /// Grows the field with zero levels until it holds `levels` levels.
    pub fn grow(&mut self, layout: &Layout, levels: usize) {
        if levels > self.levels {
            self.data.resize(layout.level_offset(levels) * self.width, 0.0);
            self.levels = levels;
        }
    }

    /// Appends one level given as a flat slice.
    pub fn push_level(&mut self, layout: &Layout, level: &[f64]) {
        debug_assert_eq!(level.len(), layout.level_len(self.levels) * self.width);
        self.data.extend_from_slice(level);
        self.levels += 1;
    }

    pub fn level(&self, layout: &Layout, level: usize) -> &[f64] {
        let a = layout.level_offset(level) * self.width;
        let b = layout.level_offset(level + 1) * self.width;
        &self.data[a..b]
    }

    pub fn level_mut(&mut self, layout: &Layout, level: usize) -> &mut [f64] {
        let a = layout.level_offset(level) * self.width;
        let b = layout.level_offset(level + 1) * self.width;
        &mut self.data[a..b]
    }

    /// Block at `n`, or `None` beyond the stored levels.
    pub fn get(&self, layout: &Layout, n: &[u32]) -> Option<&[f64]> {
        let level: u32 = n.iter().sum();
        if level as usize >= self.levels {
            return None;
        }
        let i = layout.index(n) * self.width;
        Some(&self.data[i..i + self.width])
    }

    /// Block at a precomputed flat position.
    pub fn block(&self, pos: usize) -> &[f64] {
        &self.data[pos * self.width..(pos + 1) * self.width]
    }

    pub fn truncate_levels(&mut self, layout: &Layout, levels: usize) {
        if levels < self.levels {
            self.data.truncate(layout.level_offset(levels) * self.width);
            self.levels = levels;
        }
    }
}

/// Calls `f` with every `l` such that `0 <= l <= n` componentwise, in
/// odometer order with the first coordinate fastest.
pub fn for_each_below(n: &[u32], mut f: impl FnMut(&[u32])) {
    let mut l = vec![0u32; n.len()];
    loop {
        f(&l);
        let mut i = 0;
        loop {
            if i == n.len() {
                return;
            }
            if l[i] < n[i] {
                l[i] += 1;
                break;
            }
            l[i] = 0;
            i += 1;
        }
    }
}

/// Calls `f` with every `l <= n` componentwise with `|l| < max_level`,
/// enumerating either the box under `n` or the low levels, whichever is
/// smaller. The visiting order depends only on the arguments.
pub fn for_each_below_within(layout: &Layout, n: &[u32], max_level: usize, mut f: impl FnMut(&[u32])) {
    let top: u32 = n.iter().sum();
    let max_level = max_level.min(top as usize + 1);
    let boxed: usize = n.iter().map(|&x| x as usize + 1).product();
    if boxed <= layout.level_offset(max_level) {
        for_each_below(n, |l| {
            if (l.iter().sum::<u32>() as usize) < max_level {
                f(l)
            }
        });
        return;
    }
    let d = layout.dims();
    for level in 0..max_level {
        let coords = layout.coords(level);
        for l in coords.chunks(d) {
            if l.iter().zip(n).all(|(a, b)| a <= b) {
                f(l);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_dims_rank_is_first_coordinate() {
        let l = Layout::new(2, 10);
        assert_eq!(l.rank(&[3, 4]), 3);
        assert_eq!(l.index(&[0, 0]), 0);
        assert_eq!(l.index(&[0, 1]), 1);
        assert_eq!(l.index(&[1, 0]), 2);
        assert_eq!(l.index(&[0, 2]), 3);
        assert_eq!(l.index(&[2, 0]), 5);
        assert_eq!(*l.coords(2), vec![0, 2, 1, 1, 2, 0]);
    }

    #[test]
    fn level_sizes() {
        let l = Layout::new(3, 10);
        for level in 0..10 {
            assert_eq!(l.level_offset(level + 1) - l.level_offset(level), l.level_len(level));
        }
        assert_eq!(l.level_len(4), 15);
    }

    #[test]
    fn box_enumeration() {
        let mut seen = Vec::new();
        for_each_below(&[1, 2], |l| seen.push(l.to_vec()));
        assert_eq!(seen.len(), 6);
        assert_eq!(seen[0], vec![0, 0]);
        assert_eq!(seen[5], vec![1, 2]);
    }

    #[test]
    fn both_enumerations_visit_the_same_set() {
        let layout = Layout::new(2, 20);
        for (n, cap) in [([3u32, 5u32], 3usize), ([7, 2], 20), ([0, 9], 4)] {
            let mut a = Vec::new();
            for_each_below_within(&layout, &n, cap, |l| a.push(l.to_vec()));
            let mut b = Vec::new();
            for_each_below(&n, |l| {
                if (l.iter().sum::<u32>() as usize) < cap {
                    b.push(l.to_vec())
                }
            });
            a.sort();
            b.sort();
            assert_eq!(a, b);
        }
    }

    proptest! {
        #[test]
        fn rank_is_a_bijection(dims in 1usize..5, level in 0usize..12) {
            let l = Layout::new(dims, level);
            let coords = l.coords(level);
            let len = l.level_len(level);
            prop_assert_eq!(coords.len(), len * dims);
            let mut seen = vec![false; len];
            for r in 0..len {
                let n = &coords[r * dims..(r + 1) * dims];
                prop_assert_eq!(n.iter().sum::<u32>() as usize, level);
                prop_assert_eq!(l.rank(n), r);
                seen[r] = true;
            }
            prop_assert!(seen.iter().all(|&s| s));
        }
    }
}

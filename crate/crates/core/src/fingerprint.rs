//! Binary fingerprints and Tanimoto (Jaccard) distances.
//!
//! A [`Fingerprint`] is a fixed-length bit vector packed into `u64` words.
//! Distances are computed from integer population counts and converted to
//! `f64` with a single division, so every platform produces the same bits.
//!
//! Setwise (nearest-neighbour) distances against a reference set go through
//! [`SetwiseIndex`], which buckets references by popcount and prunes whole
//! buckets with the bound `d(a, b) >= 1 - min(|a|, |b|) / max(|a|, |b|)`.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Default fingerprint length.
pub const DEFAULT_BITS: usize = 128;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Fingerprint {
    words: Box<[u64]>,
    nbits: usize,
}

impl Fingerprint {
    /// All-zero fingerprint of `nbits` bits. `nbits` must be a positive
    /// multiple of 8.
    pub fn zeros(nbits: usize) -> Result<Self> {
        if nbits == 0 || !nbits.is_multiple_of(8) {
            return Err(Error::domain(format!(
                "fingerprint length must be a positive multiple of 8, got {nbits}"
            )));
        }
        Ok(Self {
            words: vec![0u64; nbits.div_ceil(64)].into_boxed_slice(),
            nbits,
        })
    }

    pub fn from_bits(bits: &[bool]) -> Result<Self> {
        let mut fp = Self::zeros(bits.len())?;
        for (j, &b) in bits.iter().enumerate() {
            if b {
                fp.words[j / 64] |= 1u64 << (j % 64);
            }
        }
        Ok(fp)
    }

    pub fn from_indices(nbits: usize, ones: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut fp = Self::zeros(nbits)?;
        for j in ones {
            if j >= nbits {
                return Err(Error::domain(format!("bit {j} out of range for {nbits}-bit fingerprint")));
            }
            fp.words[j / 64] |= 1u64 << (j % 64);
        }
        Ok(fp)
    }

    /// Parse the lowercase hex encoding: bit `j` lives in byte `j / 8` at
    /// position `7 - j % 8` (most significant bit first). Uppercase digits
    /// are accepted on input.
    pub fn from_hex(hex: &str) -> Result<Self> {
        let hex = hex.trim();
        if hex.is_empty() || !hex.len().is_multiple_of(2) {
            return Err(Error::domain(format!(
                "fingerprint hex must have an even, nonzero number of digits, got {}",
                hex.len()
            )));
        }
        let mut fp = Self::zeros(hex.len() * 4)?;
        for (k, pair) in hex.as_bytes().chunks_exact(2).enumerate() {
            let hi = hex_digit(pair[0])?;
            let lo = hex_digit(pair[1])?;
            let byte = (hi << 4) | lo;
            for bit in 0..8 {
                if byte & (0x80 >> bit) != 0 {
                    let j = k * 8 + bit;
                    fp.words[j / 64] |= 1u64 << (j % 64);
                }
            }
        }
        Ok(fp)
    }

    pub fn to_hex(&self) -> String {
        const DIGITS: &[u8; 16] = b"0123456789abcdef";
        let mut out = String::with_capacity(self.nbits / 4);
        for k in 0..self.nbits / 8 {
            let mut byte = 0u8;
            for bit in 0..8 {
                if self.get(k * 8 + bit) {
                    byte |= 0x80 >> bit;
                }
            }
            out.push(DIGITS[(byte >> 4) as usize] as char);
            out.push(DIGITS[(byte & 0xf) as usize] as char);
        }
        out
    }

    /// Number of bits `p`.
    pub fn len(&self) -> usize {
        self.nbits
    }

    pub fn is_empty(&self) -> bool {
        self.nbits == 0
    }

    pub fn get(&self, j: usize) -> bool {
        j < self.nbits && self.words[j / 64] >> (j % 64) & 1 == 1
    }

    pub fn set(&mut self, j: usize, value: bool) {
        assert!(j < self.nbits, "bit {j} out of range");
        if value {
            self.words[j / 64] |= 1u64 << (j % 64);
        } else {
            self.words[j / 64] &= !(1u64 << (j % 64));
        }
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// Indices of the set bits, ascending.
    pub fn ones(&self) -> Ones<'_> {
        Ones {
            words: &self.words,
            word: 0,
            current: self.words.first().copied().unwrap_or(0),
        }
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// `(|a ∩ b|, |a ∪ b|)`; panics on length mismatch.
    fn counts(&self, other: &Self) -> (u32, u32) {
        debug_assert_eq!(self.nbits, other.nbits);
        self.words
            .iter()
            .zip(other.words.iter())
            .fold((0, 0), |(i, u), (a, b)| {
                (i + (a & b).count_ones(), u + (a | b).count_ones())
            })
    }

    /// Bytes of the hex encoding, used for canonical ordering.
    pub(crate) fn sort_key(&self) -> Vec<u8> {
        (0..self.nbits / 8)
            .map(|k| {
                (0..8).fold(0u8, |byte, bit| {
                    if self.get(k * 8 + bit) {
                        byte | (0x80 >> bit)
                    } else {
                        byte
                    }
                })
            })
            .collect()
    }
}

fn hex_digit(c: u8) -> Result<u8> {
    match c {
        b'0'..=b'9' => Ok(c - b'0'),
        b'a'..=b'f' => Ok(c - b'a' + 10),
        b'A'..=b'F' => Ok(c - b'A' + 10),
        _ => Err(Error::domain(format!("invalid hex digit {:?}", c as char))),
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", self.to_hex())
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Fingerprint {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Fingerprint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Fingerprint::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

pub struct Ones<'a> {
    words: &'a [u64],
    word: usize,
    current: u64,
}

impl Iterator for Ones<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        loop {
            if self.current != 0 {
                let tz = self.current.trailing_zeros() as usize;
                self.current &= self.current - 1;
                return Some(self.word * 64 + tz);
            }
            self.word += 1;
            self.current = *self.words.get(self.word)?;
        }
    }
}

/// `(union - intersection) / union`, with `0/0` defined as 0.
#[inline]
fn ratio_distance(inter: u32, union: u32) -> f64 {
    if union == 0 {
        0.0
    } else {
        f64::from(union - inter) / f64::from(union)
    }
}

/// Tanimoto distance `1 - |a ∩ b| / |a ∪ b|`. Two all-zero fingerprints are
/// at distance 0.
pub fn tanimoto_distance(a: &Fingerprint, b: &Fingerprint) -> Result<f64> {
    check_same_len(a, b)?;
    Ok(distance_unchecked(a, b))
}

#[inline]
pub(crate) fn distance_unchecked(a: &Fingerprint, b: &Fingerprint) -> f64 {
    let (i, u) = a.counts(b);
    ratio_distance(i, u)
}

fn check_same_len(a: &Fingerprint, b: &Fingerprint) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(())
}

/// Minimum Tanimoto distance from `x` to any member of `set`.
pub fn setwise_distance(x: &Fingerprint, set: &[Fingerprint]) -> Result<f64> {
    let mut best = f64::INFINITY;
    if set.is_empty() {
        return Err(Error::domain("setwise distance to an empty set"));
    }
    for s in set {
        check_same_len(x, s)?;
        best = best.min(distance_unchecked(x, s));
        if best == 0.0 {
            break;
        }
    }
    Ok(best)
}

/// `setwise_distance(q, refs)` for every query, in query order.
pub fn batch_setwise_distances(queries: &[Fingerprint], refs: &[Fingerprint]) -> Result<Vec<f64>> {
    SetwiseIndex::new(refs.to_vec())?.distances(queries)
}

/// Reference set prepared for repeated nearest-neighbour queries.
#[derive(Clone, Debug)]
pub struct SetwiseIndex {
    refs: Vec<Fingerprint>,
    /// `buckets[c]` holds indices of references with popcount `c`.
    buckets: Vec<Vec<usize>>,
    nbits: usize,
}

impl SetwiseIndex {
    pub fn new(refs: Vec<Fingerprint>) -> Result<Self> {
        let first = refs
            .first()
            .ok_or_else(|| Error::domain("reference set is empty"))?;
        let nbits = first.len();
        let mut buckets = vec![Vec::new(); nbits + 1];
        for (i, r) in refs.iter().enumerate() {
            if r.len() != nbits {
                return Err(Error::Dimension {
                    expected: nbits,
                    found: r.len(),
                });
            }
            buckets[r.count_ones() as usize].push(i);
        }
        Ok(Self {
            refs,
            buckets,
            nbits,
        })
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn nbits(&self) -> usize {
        self.nbits
    }

    pub fn refs(&self) -> &[Fingerprint] {
        &self.refs
    }

    /// Nearest reference: `(distance, reference index)`. Ties resolve to the
    /// first reference reached in bucket order.
    pub fn nearest(&self, x: &Fingerprint) -> Result<(f64, usize)> {
        if x.len() != self.nbits {
            return Err(Error::Dimension {
                expected: self.nbits,
                found: x.len(),
            });
        }
        Ok(self.nearest_unchecked(x))
    }

    pub fn distance(&self, x: &Fingerprint) -> Result<f64> {
        self.nearest(x).map(|(d, _)| d)
    }

    pub fn distances(&self, queries: &[Fingerprint]) -> Result<Vec<f64>> {
        if let Some(q) = queries.iter().find(|q| q.len() != self.nbits) {
            return Err(Error::Dimension {
                expected: self.nbits,
                found: q.len(),
            });
        }
        Ok(queries
            .par_iter()
            .map(|q| self.nearest_unchecked(q).0)
            .collect())
    }

    fn nearest_unchecked(&self, x: &Fingerprint) -> (f64, usize) {
        let c = x.count_ones() as usize;
        let mut best = f64::INFINITY;
        let mut best_idx = usize::MAX;

        let scan = |bucket: usize, best: &mut f64, best_idx: &mut usize| {
            for &i in &self.buckets[bucket] {
                let d = distance_unchecked(x, &self.refs[i]);
                if d < *best {
                    *best = d;
                    *best_idx = i;
                    if d == 0.0 {
                        return;
                    }
                }
            }
        };

        // Walk buckets outward from the query's popcount in order of
        // increasing lower bound; stop once the bound cannot beat `best`.
        let mut lo = c.checked_sub(1);
        let mut hi = if c < self.nbits { Some(c + 1) } else { None };
        scan(c, &mut best, &mut best_idx);
        while best > 0.0 {
            let lo_bound = lo.map(|b| popcount_bound(c, b));
            let hi_bound = hi.map(|b| popcount_bound(c, b));
            let (bucket, bound, take_lo) = match (lo_bound, hi_bound) {
                (None, None) => break,
                (Some(l), None) => (lo.unwrap(), l, true),
                (None, Some(h)) => (hi.unwrap(), h, false),
                (Some(l), Some(h)) if l <= h => (lo.unwrap(), l, true),
                (Some(_), Some(h)) => (hi.unwrap(), h, false),
            };
            if bound >= best {
                break;
            }
            scan(bucket, &mut best, &mut best_idx);
            if take_lo {
                lo = bucket.checked_sub(1);
            } else {
                hi = if bucket < self.nbits { Some(bucket + 1) } else { None };
            }
        }
        (best, best_idx)
    }
}

/// Smallest distance achievable between fingerprints with popcounts `a` and
/// `b`. Uses the same rounding as [`ratio_distance`], so comparisons against
/// computed distances are exact.
#[inline]
fn popcount_bound(a: usize, b: usize) -> f64 {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    ratio_distance(lo as u32, hi as u32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn fp(bits: &str) -> Fingerprint {
        // pad to 8 bits
        let mut v: Vec<bool> = bits.chars().map(|c| c == '1').collect();
        v.resize(8, false);
        Fingerprint::from_bits(&v).unwrap()
    }

    #[test]
    fn distance_examples() {
        assert!((tanimoto_distance(&fp("1100"), &fp("1010")).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(tanimoto_distance(&fp("1100"), &fp("1100")).unwrap(), 0.0);
        assert_eq!(tanimoto_distance(&fp("1100"), &fp("0011")).unwrap(), 1.0);
        assert_eq!(tanimoto_distance(&fp("0000"), &fp("0000")).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch_is_dimension_error() {
        let a = Fingerprint::zeros(8).unwrap();
        let b = Fingerprint::zeros(16).unwrap();
        assert!(matches!(
            tanimoto_distance(&a, &b),
            Err(Error::Dimension { expected: 8, found: 16 })
        ));
    }

    #[test]
    fn length_must_be_multiple_of_eight() {
        assert!(Fingerprint::zeros(12).is_err());
        assert!(Fingerprint::zeros(0).is_err());
        assert!(Fingerprint::zeros(1024).is_ok());
    }

    #[test]
    fn setwise_examples() {
        let a = fp("11");
        let b = fp("1010");
        let c = fp("0011");
        assert_eq!(setwise_distance(&a, &[b.clone(), a.clone()]).unwrap(), 0.0);
        let d = setwise_distance(&a, &[b.clone(), c.clone()]).unwrap();
        assert!((d - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(setwise_distance(&a, &[fp("")]).unwrap(), 1.0);
        assert!(setwise_distance(&a, &[]).is_err());
    }

    #[test]
    fn hex_layout_is_msb_first() {
        let f = Fingerprint::from_indices(16, [0, 9, 15]).unwrap();
        assert_eq!(f.to_hex(), "8041");
        assert_eq!(Fingerprint::from_hex("8041").unwrap(), f);
        assert!(Fingerprint::from_hex("zz").is_err());
        assert!(Fingerprint::from_hex("abc").is_err());
        assert_eq!(Fingerprint::from_hex("FF").unwrap().count_ones(), 8);
    }

    #[test]
    fn ones_iterates_set_bits() {
        let f = Fingerprint::from_indices(192, [3, 63, 64, 130, 191]).unwrap();
        assert_eq!(f.ones().collect::<Vec<_>>(), vec![3, 63, 64, 130, 191]);
        assert_eq!(f.count_ones(), 5);
    }

    #[test]
    fn index_matches_naive_loop() {
        let mut rng = crate::seed::rng(11);
        let random = |rng: &mut crate::seed::Rng, density: f64| {
            let bits: Vec<bool> = (0..128).map(|_| rng.gen_bool(density)).collect();
            Fingerprint::from_bits(&bits).unwrap()
        };
        let refs: Vec<_> = (0..1000).map(|i| random(&mut rng, 0.05 + 0.4 * (i % 7) as f64 / 7.0)).collect();
        let queries: Vec<_> = (0..1000).map(|i| random(&mut rng, 0.05 + 0.4 * (i % 5) as f64 / 5.0)).collect();
        let fast = batch_setwise_distances(&queries, &refs).unwrap();
        for (q, d) in queries.iter().zip(&fast) {
            let naive = refs
                .iter()
                .map(|r| distance_unchecked(q, r))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(*d, naive);
        }
        let self_dist = batch_setwise_distances(&refs, &refs).unwrap();
        assert!(self_dist.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn zero_query_against_index() {
        let refs = vec![fp("1"), fp("")];
        let idx = SetwiseIndex::new(refs).unwrap();
        assert_eq!(idx.distance(&fp("")).unwrap(), 0.0);
        let idx = SetwiseIndex::new(vec![fp("1")]).unwrap();
        assert_eq!(idx.distance(&fp("")).unwrap(), 1.0);
    }

    fn arb_fp(nbits: usize) -> impl Strategy<Value = Fingerprint> {
        proptest::collection::vec(any::<bool>(), nbits)
            .prop_map(|bits| Fingerprint::from_bits(&bits).unwrap())
    }

    proptest! {
        #[test]
        fn hex_round_trip(f in arb_fp(64)) {
            prop_assert_eq!(Fingerprint::from_hex(&f.to_hex()).unwrap(), f);
        }

        #[test]
        fn distance_is_one_iff_disjoint_and_nonempty(a in arb_fp(16), b in arb_fp(16)) {
            let d = tanimoto_distance(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            let disjoint = a.words().iter().zip(b.words()).all(|(x, y)| x & y == 0);
            let nonempty = a.count_ones() + b.count_ones() > 0;
            prop_assert_eq!(d == 1.0, disjoint && nonempty);
        }

        #[test]
        fn index_agrees_with_setwise(q in arb_fp(32), refs in proptest::collection::vec(arb_fp(32), 1..40)) {
            let idx = SetwiseIndex::new(refs.clone()).unwrap();
            prop_assert_eq!(idx.distance(&q).unwrap(), setwise_distance(&q, &refs).unwrap());
        }
    }
}

//! Bit-packed ±1 vectors and matrices.
//!
//! Encoding: a set bit is `+1`, a clear bit is `-1`. With this convention the
//! XNOR of two words marks sign agreement, and the ±1 dot product of two
//! length-`n` vectors is `2 * popcount(xnor) - n`.
//!
//! Bits beyond the logical length in the last word of a vector (or of each
//! matrix row) are always zero. Every constructor and mutator keeps it that
//! way, so the kernels can work on whole words.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

pub(crate) const WORD_BITS: usize = 64;

#[inline]
pub(crate) fn words_for(n_bits: usize) -> usize {
    n_bits.div_ceil(WORD_BITS)
}

/// Mask of the valid bits in the last word of an `n_bits`-long row.
#[inline]
fn tail_mask(n_bits: usize) -> u64 {
    match n_bits % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// A packed vector of ±1 values.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitVector {
    n_bits: usize,
    words: Vec<u64>,
}

impl BitVector {
    /// All elements `-1`.
    pub fn zeros(n_bits: usize) -> Self {
        Self {
            n_bits,
            words: vec![0; words_for(n_bits)],
        }
    }

    /// All elements `+1`.
    pub fn ones(n_bits: usize) -> Self {
        let mut v = Self {
            n_bits,
            words: vec![u64::MAX; words_for(n_bits)],
        };
        v.clear_padding();
        v
    }

    /// Builds a vector from raw words. Fails if the word count is wrong or
    /// any padding bit is set.
    pub fn from_words(n_bits: usize, words: Vec<u64>) -> Result<Self> {
        if words.len() != words_for(n_bits) {
            return Err(Error::DimensionMismatch {
                expected: words_for(n_bits),
                actual: words.len(),
            });
        }
        if let Some(&last) = words.last() {
            if last & !tail_mask(n_bits) != 0 {
                return Err(Error::InvalidModel(
                    "padding bits set in packed vector".into(),
                ));
            }
        }
        Ok(Self { n_bits, words })
    }

    pub fn from_bools<I: IntoIterator<Item = bool>>(bits: I) -> Self {
        let mut words = Vec::new();
        let mut n_bits = 0;
        for bit in bits {
            if n_bits % WORD_BITS == 0 {
                words.push(0);
            }
            if bit {
                *words.last_mut().unwrap() |= 1 << (n_bits % WORD_BITS);
            }
            n_bits += 1;
        }
        Self { n_bits, words }
    }

    /// Number of logical elements.
    pub fn len(&self) -> usize {
        self.n_bits
    }

    pub fn is_empty(&self) -> bool {
        self.n_bits == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn get(&self, i: usize) -> Result<bool> {
        if i >= self.n_bits {
            return Err(Error::IndexOutOfRange {
                row: 0,
                col: i,
                rows: 1,
                cols: self.n_bits,
            });
        }
        Ok(self.words[i / WORD_BITS] >> (i % WORD_BITS) & 1 == 1)
    }

    pub fn set(&mut self, i: usize, value: bool) -> Result<()> {
        if i >= self.n_bits {
            return Err(Error::IndexOutOfRange {
                row: 0,
                col: i,
                rows: 1,
                cols: self.n_bits,
            });
        }
        let bit = 1u64 << (i % WORD_BITS);
        if value {
            self.words[i / WORD_BITS] |= bit;
        } else {
            self.words[i / WORD_BITS] &= !bit;
        }
        Ok(())
    }

    /// Iterates over the logical bits.
    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.n_bits).map(move |i| self.words[i / WORD_BITS] >> (i % WORD_BITS) & 1 == 1)
    }

    /// Unpacks to a sequence of ±1.
    pub fn to_signs(&self) -> Vec<i8> {
        self.iter().map(|b| if b { 1 } else { -1 }).collect()
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// Element-wise negation.
    pub fn complement(&self) -> Self {
        let mut out = Self {
            n_bits: self.n_bits,
            words: self.words.iter().map(|w| !w).collect(),
        };
        out.clear_padding();
        out
    }

    fn clear_padding(&mut self) {
        let mask = tail_mask(self.n_bits);
        if let Some(last) = self.words.last_mut() {
            *last &= mask;
        }
    }
}

/// Row-major packed matrix of ±1 values. Each row starts on a word boundary.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    row_stride: usize,
    words: Vec<u64>,
}

impl BitMatrix {
    /// All elements `-1`.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let row_stride = words_for(cols);
        Self {
            rows,
            cols,
            row_stride,
            words: vec![0; rows * row_stride],
        }
    }

    /// All elements `+1`.
    pub fn ones(rows: usize, cols: usize) -> Self {
        let mut m = Self::zeros(rows, cols);
        m.words.fill(u64::MAX);
        m.clear_padding();
        m
    }

    /// Builds a matrix from raw row-major words (`rows * ceil(cols / 64)` of
    /// them). Padding bits must be clear.
    pub fn from_words(rows: usize, cols: usize, words: Vec<u64>) -> Result<Self> {
        let row_stride = words_for(cols);
        if words.len() != rows * row_stride {
            return Err(Error::DimensionMismatch {
                expected: rows * row_stride,
                actual: words.len(),
            });
        }
        let m = Self {
            rows,
            cols,
            row_stride,
            words,
        };
        if row_stride > 0 {
            let mask = tail_mask(cols);
            if m.words
                .chunks_exact(row_stride)
                .any(|r| r[row_stride - 1] & !mask != 0)
            {
                return Err(Error::InvalidModel(
                    "padding bits set in packed matrix".into(),
                ));
            }
        }
        Ok(m)
    }

    /// Packs a row-major slice of ±1 values.
    pub fn from_signs(rows: usize, cols: usize, values: &[i8]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: values.len(),
            });
        }
        let mut m = Self::zeros(rows, cols);
        for (idx, &v) in values.iter().enumerate() {
            match v {
                1 => {
                    m.words[idx / cols * m.row_stride + (idx % cols) / WORD_BITS] |=
                        1 << (idx % cols % WORD_BITS)
                }
                -1 => {}
                other => {
                    return Err(Error::InvalidSignValue {
                        index: idx,
                        value: other as i64,
                    })
                }
            }
        }
        Ok(m)
    }

    /// Packs from a predicate evaluated at every `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            let row = &mut m.words[r * m.row_stride..(r + 1) * m.row_stride];
            for c in 0..cols {
                if f(r, c) {
                    row[c / WORD_BITS] |= 1 << (c % WORD_BITS);
                }
            }
        }
        m
    }

    pub fn from_rows(rows: &[BitVector]) -> Result<Self> {
        let cols = rows.first().map_or(0, BitVector::len);
        let mut words = Vec::with_capacity(rows.len() * words_for(cols));
        for row in rows {
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: row.len(),
                });
            }
            words.extend_from_slice(row.words());
        }
        Self::from_words(rows.len(), cols, words)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Words per row.
    pub fn row_stride(&self) -> usize {
        self.row_stride
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row_words(&self, row: usize) -> &[u64] {
        &self.words[row * self.row_stride..(row + 1) * self.row_stride]
    }

    pub fn row(&self, row: usize) -> Result<BitVector> {
        if row >= self.rows {
            return Err(self.out_of_range(row, 0));
        }
        Ok(BitVector {
            n_bits: self.cols,
            words: self.row_words(row).to_vec(),
        })
    }

    pub fn get(&self, row: usize, col: usize) -> Result<bool> {
        if row >= self.rows || col >= self.cols {
            return Err(self.out_of_range(row, col));
        }
        Ok(self.words[row * self.row_stride + col / WORD_BITS] >> (col % WORD_BITS) & 1 == 1)
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) -> Result<()> {
        if row >= self.rows || col >= self.cols {
            return Err(self.out_of_range(row, col));
        }
        let word = &mut self.words[row * self.row_stride + col / WORD_BITS];
        let bit = 1u64 << (col % WORD_BITS);
        if value {
            *word |= bit;
        } else {
            *word &= !bit;
        }
        Ok(())
    }

    /// Value at `(row, col)` as ±1. Panics when out of range.
    #[inline]
    pub fn sign(&self, row: usize, col: usize) -> i8 {
        assert!(row < self.rows && col < self.cols);
        if self.words[row * self.row_stride + col / WORD_BITS] >> (col % WORD_BITS) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    /// Row-major ±1 values.
    pub fn to_signs(&self) -> Vec<i8> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(self.sign(r, c));
            }
        }
        out
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| u64::from(w.count_ones())).sum()
    }

    /// Element-wise XOR with a same-shaped matrix.
    pub fn xor(&self, other: &BitMatrix) -> Result<BitMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                expected: self.rows * self.cols,
                actual: other.rows * other.cols,
            });
        }
        Ok(BitMatrix {
            rows: self.rows,
            cols: self.cols,
            row_stride: self.row_stride,
            words: self
                .words
                .iter()
                .zip(&other.words)
                .map(|(a, b)| a ^ b)
                .collect(),
        })
    }

    /// Mutable access to the raw words for crate-internal bulk writers that
    /// maintain the padding invariant themselves.
    pub(crate) fn words_mut(&mut self) -> &mut [u64] {
        &mut self.words
    }

    pub(crate) fn clear_padding(&mut self) {
        if self.row_stride == 0 {
            return;
        }
        let mask = tail_mask(self.cols);
        for row in self.words.chunks_exact_mut(self.row_stride) {
            row[self.row_stride - 1] &= mask;
        }
    }

    fn out_of_range(&self, row: usize, col: usize) -> Error {
        Error::IndexOutOfRange {
            row,
            col,
            rows: self.rows,
            cols: self.cols,
        }
    }
}

/// Packs a ±1 sequence.
pub fn pack_signs(values: &[i8]) -> Result<BitVector> {
    let mut v = BitVector::zeros(values.len());
    for (i, &x) in values.iter().enumerate() {
        match x {
            1 => v.words[i / WORD_BITS] |= 1 << (i % WORD_BITS),
            -1 => {}
            other => {
                return Err(Error::InvalidSignValue {
                    index: i,
                    value: other as i64,
                })
            }
        }
    }
    Ok(v)
}

/// Number of positions where `a` and `b` carry the same sign.
pub fn xnor_popcount(a: &BitVector, b: &BitVector) -> Result<u32> {
    if a.n_bits != b.n_bits {
        return Err(Error::DimensionMismatch {
            expected: a.n_bits,
            actual: b.n_bits,
        });
    }
    Ok(a.n_bits as u32 - kernel::mismatches(&a.words, &b.words))
}

/// Converts an agreement count into the ±1 dot product: `2 * popcount - n_bits`.
pub fn signed_dot_from_popcount(popcount: u32, n_bits: u32) -> Result<i64> {
    if popcount > n_bits {
        return Err(Error::InvalidPopcount {
            popcount: popcount.into(),
            n_bits: n_bits.into(),
        });
    }
    Ok(2 * i64::from(popcount) - i64::from(n_bits))
}

/// Agreement counts of every row of `w` with `x`.
pub fn binary_matvec(w: &BitMatrix, x: &BitVector) -> Result<Vec<u32>> {
    let mut out = vec![0; w.rows];
    binary_matvec_into(w, x, &mut out)?;
    Ok(out)
}

/// [`binary_matvec`] writing into a caller-provided buffer of length `w.rows()`.
pub fn binary_matvec_into(w: &BitMatrix, x: &BitVector, out: &mut [u32]) -> Result<()> {
    if w.cols != x.n_bits {
        return Err(Error::DimensionMismatch {
            expected: w.cols,
            actual: x.n_bits,
        });
    }
    if out.len() != w.rows {
        return Err(Error::DimensionMismatch {
            expected: w.rows,
            actual: out.len(),
        });
    }
    kernel::matvec_agreements(&w.words, w.row_stride, &x.words, w.cols as u32, out);
    Ok(())
}

/// Plain integer dot product of two ±1 sequences. Used as the oracle for the
/// packed kernels.
pub fn reference_dot(a: &[i8], b: &[i8]) -> Result<i64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| i64::from(x) * i64::from(y))
        .sum())
}

mod kernel {
    #[inline(always)]
    fn mismatches_portable(a: &[u64], b: &[u64]) -> u32 {
        a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
    }

    #[inline(always)]
    fn matvec_portable(w: &[u64], stride: usize, x: &[u64], n_bits: u32, out: &mut [u32]) {
        if stride == 0 {
            out.fill(n_bits);
            return;
        }
        for (row, o) in w.chunks_exact(stride).zip(out.iter_mut()) {
            *o = n_bits - mismatches_portable(row, x);
        }
    }

    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    mod x86 {
        #[target_feature(enable = "avx512f,avx512bw,avx512vpopcntdq,popcnt")]
        pub(super) fn mismatches_avx512(a: &[u64], b: &[u64]) -> u32 {
            super::mismatches_portable(a, b)
        }

        #[target_feature(enable = "avx512f,avx512bw,avx512vpopcntdq,popcnt")]
        pub(super) fn matvec_avx512(w: &[u64], stride: usize, x: &[u64], n: u32, out: &mut [u32]) {
            super::matvec_portable(w, stride, x, n, out)
        }

        #[target_feature(enable = "avx2,popcnt")]
        pub(super) fn mismatches_avx2(a: &[u64], b: &[u64]) -> u32 {
            super::mismatches_portable(a, b)
        }

        #[target_feature(enable = "avx2,popcnt")]
        pub(super) fn matvec_avx2(w: &[u64], stride: usize, x: &[u64], n: u32, out: &mut [u32]) {
            super::matvec_portable(w, stride, x, n, out)
        }

        pub(super) fn has_avx512_popcnt() -> bool {
            std::is_x86_feature_detected!("avx512f")
                && std::is_x86_feature_detected!("avx512bw")
                && std::is_x86_feature_detected!("avx512vpopcntdq")
        }

        pub(super) fn has_avx2() -> bool {
            std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("popcnt")
        }
    }

    /// Count of positions where the two packed rows differ.
    pub(super) fn mismatches(a: &[u64], b: &[u64]) -> u32 {
        #[cfg(all(feature = "std", target_arch = "x86_64"))]
        {
            if x86::has_avx512_popcnt() {
                // SAFETY: the required CPU features were detected at runtime.
                return unsafe { x86::mismatches_avx512(a, b) };
            }
            if x86::has_avx2() {
                // SAFETY: as above.
                return unsafe { x86::mismatches_avx2(a, b) };
            }
        }
        mismatches_portable(a, b)
    }

    pub(super) fn matvec_agreements(
        w: &[u64],
        stride: usize,
        x: &[u64],
        n_bits: u32,
        out: &mut [u32],
    ) {
        #[cfg(all(feature = "std", target_arch = "x86_64"))]
        {
            if x86::has_avx512_popcnt() {
                // SAFETY: the required CPU features were detected at runtime.
                return unsafe { x86::matvec_avx512(w, stride, x, n_bits, out) };
            }
            if x86::has_avx2() {
                // SAFETY: as above.
                return unsafe { x86::matvec_avx2(w, stride, x, n_bits, out) };
            }
        }
        matvec_portable(w, stride, x, n_bits, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alternating(n: usize) -> Vec<i8> {
        (0..n).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect()
    }

    #[test]
    fn pack_all_positive_and_all_negative() {
        let p = pack_signs(&[1, 1, 1]).unwrap();
        assert_eq!(p.words(), &[0b111]);
        let n = pack_signs(&[-1, -1, -1]).unwrap();
        assert_eq!(n.words(), &[0]);
    }

    #[test]
    fn pack_spans_two_words_with_clear_padding() {
        let v = alternating(70);
        let p = pack_signs(&v).unwrap();
        assert_eq!(p.words().len(), 2);
        assert_eq!(p.words()[0], 0x5555_5555_5555_5555);
        // elements 64..70 are +,-,+,-,+,- ; nothing above bit 5
        assert_eq!(p.words()[1], 0b01_0101);
        assert_eq!(p.to_signs(), v);
    }

    #[test]
    fn pack_rejects_non_sign_values() {
        assert_eq!(
            pack_signs(&[1, 0, -1]),
            Err(Error::InvalidSignValue { index: 1, value: 0 })
        );
        assert!(matches!(
            pack_signs(&[2]),
            Err(Error::InvalidSignValue { .. })
        ));
    }

    #[test]
    fn popcount_identity_and_complement() {
        let a = pack_signs(&alternating(64)).unwrap();
        assert_eq!(xnor_popcount(&a, &a).unwrap(), 64);
        assert_eq!(xnor_popcount(&a, &a.complement()).unwrap(), 0);
    }

    #[test]
    fn popcount_small_case_matches_reference() {
        let a = [1, -1, 1];
        let b = [1, 1, 1];
        let pc = xnor_popcount(&pack_signs(&a).unwrap(), &pack_signs(&b).unwrap()).unwrap();
        assert_eq!(pc, 2);
        assert_eq!(signed_dot_from_popcount(pc, 3).unwrap(), 1);
        assert_eq!(reference_dot(&a, &b).unwrap(), 1);
    }

    #[test]
    fn complement_keeps_padding_clear() {
        let a = pack_signs(&alternating(70)).unwrap();
        let c = a.complement();
        assert_eq!(c.words()[1] >> 6, 0);
        assert_eq!(xnor_popcount(&a, &c).unwrap(), 0);
    }

    #[test]
    fn popcount_length_mismatch() {
        let a = BitVector::ones(10);
        let b = BitVector::ones(11);
        assert_eq!(
            xnor_popcount(&a, &b),
            Err(Error::DimensionMismatch {
                expected: 10,
                actual: 11
            })
        );
    }

    #[test]
    fn signed_dot_bounds() {
        assert_eq!(signed_dot_from_popcount(64, 64).unwrap(), 64);
        assert_eq!(signed_dot_from_popcount(0, 64).unwrap(), -64);
        assert!(matches!(
            signed_dot_from_popcount(65, 64),
            Err(Error::InvalidPopcount { .. })
        ));
    }

    #[test]
    fn reference_dot_cases() {
        let a = alternating(10);
        let neg: Vec<i8> = a.iter().map(|x| -x).collect();
        assert_eq!(reference_dot(&a, &a).unwrap(), 10);
        assert_eq!(reference_dot(&a, &neg).unwrap(), -10);
        assert!(reference_dot(&a, &a[..9]).is_err());
    }

    #[test]
    fn matvec_all_ones() {
        let w = BitMatrix::ones(4, 8);
        let x = BitVector::ones(8);
        assert_eq!(binary_matvec(&w, &x).unwrap(), vec![8, 8, 8, 8]);
    }

    #[test]
    fn matvec_complement_row_yields_zero() {
        let x = pack_signs(&alternating(8)).unwrap();
        let w = BitMatrix::from_rows(&[x.clone(), x.complement()]).unwrap();
        assert_eq!(binary_matvec(&w, &x).unwrap(), vec![8, 0]);
    }

    #[test]
    fn matvec_dimension_mismatch() {
        let w = BitMatrix::ones(2, 8);
        assert!(matches!(
            binary_matvec(&w, &BitVector::ones(9)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn matrix_access_out_of_range_is_an_error() {
        let mut m = BitMatrix::zeros(3, 5);
        assert!(matches!(m.get(3, 0), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(
            m.set(0, 5, true),
            Err(Error::IndexOutOfRange { .. })
        ));
        m.set(2, 4, true).unwrap();
        assert!(m.get(2, 4).unwrap());
        assert_eq!(m.count_ones(), 1);
    }

    #[test]
    fn from_words_rejects_set_padding() {
        assert!(BitMatrix::from_words(1, 3, vec![0b1111]).is_err());
        assert!(BitMatrix::from_words(1, 3, vec![0b111]).is_ok());
        assert!(BitVector::from_words(3, vec![0b1000]).is_err());
    }

    #[test]
    fn from_signs_round_trip() {
        let v: Vec<i8> = (0..3 * 70)
            .map(|i| if i % 3 == 0 { 1 } else { -1 })
            .collect();
        let m = BitMatrix::from_signs(3, 70, &v).unwrap();
        assert_eq!(m.to_signs(), v);
        assert_eq!(m.row(1).unwrap().to_signs(), &v[70..140]);
    }
}

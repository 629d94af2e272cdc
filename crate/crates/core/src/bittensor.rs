//! Bit-packed binary tensors and the XNOR/popcount replacement for dot
//! products.
//!
//! A value of `+1` is stored as bit `1` and `-1` as bit `0`. Rows (the
//! innermost axis) are packed LSB-first into `u64` words and padded to a whole
//! number of words. Padding bits are always `1`; since both operands of a dot
//! product carry the same padding, every pad bit shows up as a match in
//! `popcount(xnor(x, w))` and is removed by a per-row constant:
//!
//! ```text
//! x · w = 2 * popcount(xnor(x, w)) - n - 2 * pad
//! ```

use crate::error::{BnnError, Result};
use crate::tensor::{FloatTensor, Real, Tensor};

pub const WORD_BITS: usize = u64::BITS as usize;

/// Popcount implementation. Both must agree bit for bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Popcount {
    /// `POPCNT` instruction (x86_64 with runtime detection) or the target's
    /// native `count_ones`.
    Hardware,
    /// Branch-free SWAR bit counting.
    Portable,
}

impl Popcount {
    /// The fastest implementation available on this machine.
    pub fn detect() -> Popcount {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("popcnt") {
                return Popcount::Hardware;
            }
            Popcount::Portable
        }
        #[cfg(not(target_arch = "x86_64"))]
        {
            Popcount::Hardware
        }
    }
}

trait PopcountImpl {
    fn popcnt(x: u64) -> u32;
}

struct Native;
struct Swar;

impl PopcountImpl for Native {
    #[inline(always)]
    fn popcnt(x: u64) -> u32 {
        x.count_ones()
    }
}

impl PopcountImpl for Swar {
    #[inline(always)]
    fn popcnt(x: u64) -> u32 {
        let x = x - ((x >> 1) & 0x5555_5555_5555_5555);
        let x = (x & 0x3333_3333_3333_3333) + ((x >> 2) & 0x3333_3333_3333_3333);
        let x = (x + (x >> 4)) & 0x0f0f_0f0f_0f0f_0f0f;
        (x.wrapping_mul(0x0101_0101_0101_0101) >> 56) as u32
    }
}

/// Number of set bits across `words`.
pub fn popcount_words(words: &[u64], backend: Popcount) -> u64 {
    match backend {
        Popcount::Portable => words.iter().map(|&w| Swar::popcnt(w) as u64).sum(),
        Popcount::Hardware => {
            #[cfg(target_arch = "x86_64")]
            if std::arch::is_x86_feature_detected!("popcnt") {
                // SAFETY: the required CPU feature was detected at runtime.
                return unsafe { popcount_words_popcnt(words) };
            }
            words.iter().map(|&w| w.count_ones() as u64).sum()
        }
    }
}

#[inline(always)]
fn xnor_popcount<P: PopcountImpl>(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(&x, &y)| P::popcnt(!(x ^ y))).sum()
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn popcount_words_popcnt(words: &[u64]) -> u64 {
    words.iter().map(|&w| Native::popcnt(w) as u64).sum()
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn dot_popcnt(x: BitRow<'_>, w: BitRow<'_>) -> i64 {
    dot_words::<Native>(x, w)
}

/// `2·matches − n − 2·pad` over the words both rows have.
#[inline(always)]
fn dot_words<P: PopcountImpl>(x: BitRow<'_>, w: BitRow<'_>) -> i64 {
    let words = x.words.len().min(w.words.len());
    let n = x.logical_len as i64;
    let pad = (words * WORD_BITS) as i64 - n;
    let matches = xnor_popcount::<P>(&x.words[..words], &w.words[..words]) as i64;
    2 * matches - n - 2 * pad
}

/// A `{-1,+1}` tensor stored one bit per element, rows padded with `1` bits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTensor {
    shape: Vec<usize>,
    logical_len: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

/// Borrowed view of one packed row.
#[derive(Clone, Copy, Debug)]
pub struct BitRow<'a> {
    words: &'a [u64],
    logical_len: usize,
}

impl<'a> BitRow<'a> {
    pub fn words(&self) -> &'a [u64] {
        self.words
    }

    pub fn logical_len(&self) -> usize {
        self.logical_len
    }

    pub fn pad_bits(&self) -> usize {
        self.words.len() * WORD_BITS - self.logical_len
    }
}

fn words_for(bits: usize, align_words: usize) -> usize {
    let w = bits.div_ceil(WORD_BITS);
    w.div_ceil(align_words) * align_words
}

/// Mask of the padding bits in the last logical word of a row.
fn tail_pad_mask(logical_len: usize) -> u64 {
    let used = logical_len % WORD_BITS;
    if used == 0 {
        0
    } else {
        !0u64 << used
    }
}

impl BitTensor {
    /// Packs `src` by sign: bit = 1 iff value ≥ 0. Rows are word aligned.
    pub fn pack<T: Real>(src: &Tensor<T>) -> Result<BitTensor> {
        Self::pack_aligned(src, 1)
    }

    /// Like [`BitTensor::pack`] but rounds every row up to a multiple of
    /// `align_words` words. Extra words are all padding.
    pub fn pack_aligned<T: Real>(src: &Tensor<T>, align_words: usize) -> Result<BitTensor> {
        if src.is_empty() {
            return Err(BnnError::invalid("cannot pack an empty tensor"));
        }
        let logical_len = *src.shape().last().unwrap_or(&0);
        let rows = src.len() / logical_len;
        let mut out = Self::from_rows_fn(src.shape().to_vec(), rows, logical_len, align_words)?;
        for r in 0..rows {
            out.set_row_signs(r, &src.values()[r * logical_len..(r + 1) * logical_len]);
        }
        Ok(out)
    }

    /// Packs a row-major `rows × row_len` slice by sign.
    pub fn pack_rows<T: Real>(values: &[T], rows: usize, row_len: usize) -> Result<BitTensor> {
        if values.len() != rows * row_len {
            return Err(BnnError::shape(format!(
                "{} values do not form {rows} rows of {row_len}",
                values.len()
            )));
        }
        if values.is_empty() {
            return Err(BnnError::invalid("cannot pack an empty tensor"));
        }
        let mut out = Self::from_rows_fn(vec![rows, row_len], rows, row_len, 1)?;
        for r in 0..rows {
            out.set_row_signs(r, &values[r * row_len..(r + 1) * row_len]);
        }
        Ok(out)
    }

    /// Builds a tensor from explicit bits (`true` = +1).
    pub fn from_bools(shape: impl Into<Vec<usize>>, bits: &[bool]) -> Result<BitTensor> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != bits.len() {
            return Err(BnnError::shape(format!(
                "shape {:?} needs {} bits, got {}",
                shape,
                shape.iter().product::<usize>(),
                bits.len()
            )));
        }
        let logical_len = *shape.last().unwrap_or(&0);
        let rows = bits.len().checked_div(logical_len).unwrap_or(0);
        let mut out = Self::from_rows_fn(shape, rows, logical_len, 1)?;
        for r in 0..rows {
            for c in 0..logical_len {
                if !bits[r * logical_len + c] {
                    out.clear_bit(r, c);
                }
            }
        }
        Ok(out)
    }

    /// Builds a tensor from serialized rows of `ceil(row_len / 8)` bytes each,
    /// LSB-first. Bits past `row_len` in the final byte are ignored.
    pub fn from_row_bytes(shape: impl Into<Vec<usize>>, bytes: &[u8]) -> Result<BitTensor> {
        let shape = shape.into();
        let logical_len = *shape.last().unwrap_or(&0);
        if logical_len == 0 {
            return Err(BnnError::invalid("rows of length 0 cannot be packed"));
        }
        let rows = shape.iter().product::<usize>() / logical_len;
        let row_bytes = logical_len.div_ceil(8);
        if bytes.len() != rows * row_bytes {
            return Err(BnnError::shape(format!(
                "expected {} bytes for {rows} rows of {logical_len} bits, got {}",
                rows * row_bytes,
                bytes.len()
            )));
        }
        let mut out = Self::from_rows_fn(shape, rows, logical_len, 1)?;
        let wpr = out.words_per_row;
        for r in 0..rows {
            let src = &bytes[r * row_bytes..(r + 1) * row_bytes];
            let dst = &mut out.words[r * wpr..(r + 1) * wpr];
            for (w, chunk) in dst.iter_mut().zip(src.chunks(8)) {
                let mut buf = [0xffu8; 8];
                buf[..chunk.len()].copy_from_slice(chunk);
                *w = u64::from_le_bytes(buf);
            }
            let last = (logical_len - 1) / WORD_BITS;
            dst[last] |= tail_pad_mask(logical_len);
        }
        Ok(out)
    }

    fn from_rows_fn(
        shape: Vec<usize>,
        rows: usize,
        logical_len: usize,
        align_words: usize,
    ) -> Result<BitTensor> {
        if align_words == 0 {
            return Err(BnnError::invalid("row alignment must be at least one word"));
        }
        let words_per_row = words_for(logical_len, align_words);
        Ok(BitTensor {
            shape,
            logical_len,
            words_per_row,
            words: vec![!0u64; rows * words_per_row],
        })
    }

    fn set_row_signs<T: Real>(&mut self, row: usize, values: &[T]) {
        let wpr = self.words_per_row;
        let dst = &mut self.words[row * wpr..(row + 1) * wpr];
        for (w, chunk) in dst.iter_mut().zip(values.chunks(WORD_BITS)) {
            // sign(0) = +1; bits past the chunk stay 1 as padding.
            let mut word = if chunk.len() == WORD_BITS {
                0
            } else {
                !0u64 << chunk.len()
            };
            for (bit, &v) in chunk.iter().enumerate() {
                word |= ((v >= T::zero()) as u64) << bit;
            }
            *w = word;
        }
    }

    fn clear_bit(&mut self, row: usize, col: usize) {
        let idx = row * self.words_per_row + col / WORD_BITS;
        self.words[idx] &= !(1u64 << (col % WORD_BITS));
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn logical_len(&self) -> usize {
        self.logical_len
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn pad_bits_per_row(&self) -> usize {
        self.words_per_row * WORD_BITS - self.logical_len
    }

    pub fn rows(&self) -> usize {
        self.words
            .len()
            .checked_div(self.words_per_row)
            .unwrap_or(0)
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row(&self, r: usize) -> BitRow<'_> {
        let wpr = self.words_per_row;
        BitRow {
            words: &self.words[r * wpr..(r + 1) * wpr],
            logical_len: self.logical_len,
        }
    }

    pub fn bit(&self, row: usize, col: usize) -> bool {
        let w = self.words[row * self.words_per_row + col / WORD_BITS];
        (w >> (col % WORD_BITS)) & 1 == 1
    }

    /// Serializes each row into `ceil(logical_len / 8)` bytes, LSB-first,
    /// with the unused high bits of the final byte set to 1.
    pub fn to_row_bytes(&self) -> Vec<u8> {
        let row_bytes = self.logical_len.div_ceil(8);
        let mut out = Vec::with_capacity(self.rows() * row_bytes);
        for r in 0..self.rows() {
            let mut remaining = row_bytes;
            for &w in self.row(r).words {
                if remaining == 0 {
                    break;
                }
                let bytes = w.to_le_bytes();
                let take = remaining.min(8);
                out.extend_from_slice(&bytes[..take]);
                remaining -= take;
            }
        }
        out
    }

    /// Returns the tensor with rows and columns of a 2-D tensor swapped.
    pub fn transpose(&self) -> Result<BitTensor> {
        if self.shape.len() != 2 {
            return Err(BnnError::shape(format!(
                "transpose needs a 2-D bit tensor, got shape {:?}",
                self.shape
            )));
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let mut out = Self::from_rows_fn(vec![cols, rows], cols, rows, 1)?;
        for r in 0..rows {
            for c in 0..cols {
                if !self.bit(r, c) {
                    out.clear_bit(c, r);
                }
            }
        }
        Ok(out)
    }
}

/// Expands bits back to `{-1.0, +1.0}`; padding is dropped.
pub fn unpack(src: &BitTensor) -> Result<FloatTensor> {
    unpack_as::<f32>(src)
}

pub fn unpack_as<T: Real>(src: &BitTensor) -> Result<Tensor<T>> {
    if src.logical_len == 0 {
        return Err(BnnError::invalid("bit tensor has rows of logical length 0"));
    }
    let mut values = Vec::with_capacity(src.rows() * src.logical_len);
    for r in 0..src.rows() {
        for c in 0..src.logical_len {
            values.push(if src.bit(r, c) { T::one() } else { -T::one() });
        }
    }
    Tensor::new(src.shape.clone(), values)
}

/// Exact dot product of two packed `{-1,+1}` vectors via XNOR and popcount.
///
/// Rows packed with different word alignments are accepted: only the words
/// both rows have are compared, and everything past `n` there is padding.
pub fn binary_dot(x: BitRow<'_>, w: BitRow<'_>) -> Result<i64> {
    if x.logical_len != w.logical_len {
        return Err(BnnError::shape(format!(
            "binary_dot length mismatch: {} vs {}",
            x.logical_len, w.logical_len
        )));
    }
    Ok(binary_dot_with(x, w, Popcount::Hardware))
}

/// [`binary_dot`] with an explicit popcount backend (lengths must match).
pub fn binary_dot_with(x: BitRow<'_>, w: BitRow<'_>, backend: Popcount) -> i64 {
    match backend {
        Popcount::Hardware => {
            // Compiled with POPCNT when the CPU has it; baseline x86_64 code
            // would otherwise expand `count_ones` into a bit-twiddling
            // sequence.
            #[cfg(target_arch = "x86_64")]
            if std::arch::is_x86_feature_detected!("popcnt") {
                // SAFETY: the required CPU feature was detected at runtime.
                return unsafe { dot_popcnt(x, w) };
            }
            dot_words::<Native>(x, w)
        }
        Popcount::Portable => dot_words::<Swar>(x, w),
    }
}

/// Layout of the right-hand operand of [`binary_gemm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RhsLayout {
    /// `B` is stored `K × N`; its columns are gathered before the product.
    RowMajor,
    /// `B` is stored as `Bᵀ` (`N × K`), so each column is a contiguous row.
    Transposed,
}

/// `C = A · B` over `{-1,+1}` operands. `A` is `M × K`. Every entry of the
/// result is an integer in `[-K, K]` with the parity of `K`.
pub fn binary_gemm(a: &BitTensor, b: &BitTensor, layout: RhsLayout) -> Result<FloatTensor> {
    let owned;
    let bt = match layout {
        RhsLayout::Transposed => b,
        RhsLayout::RowMajor => {
            owned = b.transpose()?;
            &owned
        }
    };
    if a.shape.len() != 2 || bt.shape.len() != 2 {
        return Err(BnnError::shape(format!(
            "binary_gemm needs 2-D operands, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    if a.logical_len != bt.logical_len {
        return Err(BnnError::shape(format!(
            "binary_gemm inner dimensions differ: A is {:?}, B{} is {:?}",
            a.shape,
            if layout == RhsLayout::Transposed {
                "ᵀ"
            } else {
                ""
            },
            b.shape
        )));
    }
    let (m, n) = (a.rows(), bt.rows());
    let mut out = vec![0f32; m * n];
    binary_gemm_into(a, bt, &mut out, Popcount::detect());
    Tensor::new(vec![m, n], out)
}

/// Writes `A · Btᵀ` into `out` (row-major `M × N`). Inner lengths must match.
pub(crate) fn binary_gemm_into<T: Real>(
    a: &BitTensor,
    bt: &BitTensor,
    out: &mut [T],
    backend: Popcount,
) {
    debug_assert_eq!(a.logical_len, bt.logical_len);
    debug_assert_eq!(out.len(), a.rows() * bt.rows());
    match backend {
        #[cfg(target_arch = "x86_64")]
        Popcount::Hardware => {
            // SAFETY: `Hardware` is only chosen after runtime detection of
            // POPCNT, or explicitly by a caller on a machine that has it.
            unsafe { gemm_popcnt(a, bt, out) }
        }
        #[cfg(not(target_arch = "x86_64"))]
        Popcount::Hardware => gemm_kernel::<Native, T>(a, bt, out),
        Popcount::Portable => gemm_kernel::<Swar, T>(a, bt, out),
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn gemm_popcnt<T: Real>(a: &BitTensor, bt: &BitTensor, out: &mut [T]) {
    if std::is_x86_feature_detected!("avx512vpopcntdq") && std::is_x86_feature_detected!("avx512f")
    {
        // SAFETY: both features were just detected.
        return unsafe { avx512::gemm(a, bt, out) };
    }
    gemm_kernel::<Native, T>(a, bt, out)
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;

    use super::{BitTensor, WORD_BITS};
    use crate::tensor::Real;

    /// Loads `words[k..k + 8]`, zero-filling lanes past the end.
    #[inline(always)]
    unsafe fn load(words: &[u64], k: usize) -> __m512i {
        let rest = words.len() - k;
        if rest >= 8 {
            unsafe { _mm512_loadu_si512(words.as_ptr().add(k).cast()) }
        } else {
            let mask: __mmask8 = (1u8 << rest) - 1;
            unsafe { _mm512_maskz_loadu_epi64(mask, words.as_ptr().add(k).cast()) }
        }
    }

    /// Same result as the scalar kernel. Zero-filled tail lanes xor to zero and
    /// add nothing to the counts.
    #[target_feature(enable = "avx512f,avx512vpopcntdq")]
    pub(super) unsafe fn gemm<T: Real>(a: &BitTensor, bt: &BitTensor, out: &mut [T]) {
        let words = a.words_per_row.min(bt.words_per_row);
        let n_bits = a.logical_len as i64;
        let total = (words * WORD_BITS) as i64;
        let bias = n_bits + 2 * (total - n_bits);
        let to_dot = |xor: i64| T::from_i64(2 * (total - xor) - bias);
        let (m, n) = (a.rows(), bt.rows());
        let (wa, wb) = (a.words_per_row, bt.words_per_row);
        let arow = |i: usize| &a.words[i * wa..i * wa + words];
        let brow = |j: usize| &bt.words[j * wb..j * wb + words];
        let tile = (16 * 1024 / (words.max(1) * 8)).clamp(4, 1024) & !3;
        let mut j0 = 0;
        while j0 < n {
            let j1 = (j0 + tile).min(n);
            let j4 = j0 + (j1 - j0) / 4 * 4;
            let mut i = 0;
            while i + 2 <= m {
                let (ra, rb) = (arow(i), arow(i + 1));
                let mut j = j0;
                while j < j4 {
                    let r = [brow(j), brow(j + 1), brow(j + 2), brow(j + 3)];
                    let mut acc = [[_mm512_setzero_si512(); 4]; 2];
                    let mut k = 0;
                    while k < words {
                        let x = unsafe { load(ra, k) };
                        let y = unsafe { load(rb, k) };
                        for q in 0..4 {
                            let w = unsafe { load(r[q], k) };
                            acc[0][q] = _mm512_add_epi64(
                                acc[0][q],
                                _mm512_popcnt_epi64(_mm512_xor_si512(x, w)),
                            );
                            acc[1][q] = _mm512_add_epi64(
                                acc[1][q],
                                _mm512_popcnt_epi64(_mm512_xor_si512(y, w)),
                            );
                        }
                        k += 8;
                    }
                    for q in 0..4 {
                        out[i * n + j + q] = to_dot(_mm512_reduce_add_epi64(acc[0][q]));
                        out[(i + 1) * n + j + q] = to_dot(_mm512_reduce_add_epi64(acc[1][q]));
                    }
                    j += 4;
                }
                i += 2;
            }
            let rows_left = i..m;
            for ii in rows_left {
                for jj in j0..j4 {
                    out[ii * n + jj] = to_dot(unsafe { xor_count(arow(ii), brow(jj)) });
                }
            }
            for jj in j4..j1 {
                for ii in 0..m {
                    out[ii * n + jj] = to_dot(unsafe { xor_count(arow(ii), brow(jj)) });
                }
            }
            j0 = j1;
        }
    }

    #[inline(always)]
    unsafe fn xor_count(x: &[u64], y: &[u64]) -> i64 {
        let mut acc = _mm512_setzero_si512();
        let mut k = 0;
        while k < x.len() {
            let v = unsafe { _mm512_xor_si512(load(x, k), load(y, k)) };
            acc = _mm512_add_epi64(acc, _mm512_popcnt_epi64(v));
            k += 8;
        }
        _mm512_reduce_add_epi64(acc)
    }
}

/// Popcount of `x ^ y` summed over four right-hand rows for one left row.
#[inline(always)]
fn xor_counts_1x4<P: PopcountImpl>(ra: &[u64], r: [&[u64]; 4]) -> [u32; 4] {
    let mut c = [0u32; 4];
    for (k, &x) in ra.iter().enumerate() {
        c[0] += P::popcnt(x ^ r[0][k]);
        c[1] += P::popcnt(x ^ r[1][k]);
        c[2] += P::popcnt(x ^ r[2][k]);
        c[3] += P::popcnt(x ^ r[3][k]);
    }
    c
}

/// Same as [`xor_counts_1x4`] for two left rows, sharing the right-hand loads.
#[inline(always)]
fn xor_counts_2x4<P: PopcountImpl>(ra: &[u64], rb: &[u64], r: [&[u64]; 4]) -> [[u32; 4]; 2] {
    let mut c = [[0u32; 4]; 2];
    for k in 0..ra.len() {
        let (x, y) = (ra[k], rb[k]);
        let w = [r[0][k], r[1][k], r[2][k], r[3][k]];
        for q in 0..4 {
            c[0][q] += P::popcnt(x ^ w[q]);
            c[1][q] += P::popcnt(y ^ w[q]);
        }
    }
    c
}

#[inline(always)]
fn gemm_kernel<P: PopcountImpl, T: Real>(a: &BitTensor, bt: &BitTensor, out: &mut [T]) {
    let words = a.words_per_row.min(bt.words_per_row);
    let n_bits = a.logical_len as i64;
    // xnor count = 64·words − xor count, and the padding adds 2·pad to the dot.
    let total = (words * WORD_BITS) as i64;
    let bias = n_bits + 2 * (total - n_bits);
    let to_dot = |xor: u32| T::from_i64(2 * (total - xor as i64) - bias);
    let (m, n) = (a.rows(), bt.rows());
    let (wa, wb) = (a.words_per_row, bt.words_per_row);
    let arow = |i: usize| &a.words[i * wa..i * wa + words];
    let brow = |j: usize| &bt.words[j * wb..j * wb + words];
    // Right-hand rows per tile, sized so a tile stays in L1 across all left rows.
    let tile = (16 * 1024 / (words.max(1) * 8)).clamp(4, 1024) & !3;
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + tile).min(n);
        let j4 = j0 + (j1 - j0) / 4 * 4;
        let mut i = 0;
        while i + 2 <= m {
            let (ra, rb) = (arow(i), arow(i + 1));
            let mut j = j0;
            while j < j4 {
                let c =
                    xor_counts_2x4::<P>(ra, rb, [brow(j), brow(j + 1), brow(j + 2), brow(j + 3)]);
                for q in 0..4 {
                    out[i * n + j + q] = to_dot(c[0][q]);
                    out[(i + 1) * n + j + q] = to_dot(c[1][q]);
                }
                j += 4;
            }
            i += 2;
        }
        if i < m {
            let ra = arow(i);
            let mut j = j0;
            while j < j4 {
                let c = xor_counts_1x4::<P>(ra, [brow(j), brow(j + 1), brow(j + 2), brow(j + 3)]);
                for q in 0..4 {
                    out[i * n + j + q] = to_dot(c[q]);
                }
                j += 4;
            }
        }
        for jj in j4..j1 {
            let rb = brow(jj);
            for ii in 0..m {
                let c: u32 = arow(ii)
                    .iter()
                    .zip(rb)
                    .map(|(&x, &y)| P::popcnt(x ^ y))
                    .sum();
                out[ii * n + jj] = to_dot(c);
            }
        }
        j0 = j1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Vec<usize>, v: Vec<f32>) -> FloatTensor {
        Tensor::new(shape, v).unwrap()
    }

    fn float_dot(a: &[f32], b: &[f32]) -> i64 {
        a.iter().zip(b).map(|(x, y)| (x * y) as i64).sum()
    }

    #[test]
    fn pack_uses_non_negative_as_plus_one() {
        let p = BitTensor::pack(&t(vec![3], vec![0.5, -0.2, 0.0])).unwrap();
        assert!(p.bit(0, 0));
        assert!(!p.bit(0, 1));
        assert!(p.bit(0, 2));
        assert_eq!(p.pad_bits_per_row(), 61);
    }

    #[test]
    fn pack_all_positive_row_is_one_full_word() {
        let p = BitTensor::pack(&t(vec![64], vec![1.5; 64])).unwrap();
        assert_eq!(p.words(), &[u64::MAX]);
        assert_eq!(p.pad_bits_per_row(), 0);
    }

    #[test]
    fn pack_pads_with_ones() {
        let p = BitTensor::pack(&t(vec![70], vec![-1.0; 70])).unwrap();
        assert_eq!(p.words().len(), 2);
        assert_eq!(p.words()[0], 0);
        // 6 data bits are zero, the 58 padding bits above them are one.
        assert_eq!(p.words()[1], !0u64 << 6);
        assert_eq!(p.words()[1].count_ones(), 58);
    }

    #[test]
    fn pack_empty_is_invalid() {
        let e = BitTensor::pack(&t(vec![0], vec![])).unwrap_err();
        assert!(matches!(e, BnnError::InvalidArgument(_)));
    }

    #[test]
    fn unpack_bits() {
        let b = BitTensor::from_bools(vec![3], &[true, false, true]).unwrap();
        assert_eq!(unpack(&b).unwrap().values(), &[1.0, -1.0, 1.0]);
    }

    #[test]
    fn unpack_zero_length_rows_is_invalid() {
        let b = BitTensor::from_bools(vec![2, 0], &[]).unwrap();
        assert!(matches!(unpack(&b), Err(BnnError::InvalidArgument(_))));
    }

    #[test]
    fn dot_small_example() {
        let x = BitTensor::from_bools(vec![3], &[true, false, true]).unwrap();
        let w = BitTensor::from_bools(vec![3], &[true, true, false]).unwrap();
        let oracle = float_dot(&[1.0, -1.0, 1.0], &[1.0, 1.0, -1.0]);
        assert_eq!(oracle, -1);
        assert_eq!(binary_dot(x.row(0), w.row(0)).unwrap(), oracle);
    }

    #[test]
    fn dot_identical_and_opposite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1usize, 7, 63, 64, 65, 200] {
            let v: Vec<f32> = (0..n).map(|_| if rng.gen() { 1.0 } else { -1.0 }).collect();
            let neg: Vec<f32> = v.iter().map(|x| -x).collect();
            let a = BitTensor::pack(&t(vec![n], v)).unwrap();
            let b = BitTensor::pack(&t(vec![n], neg)).unwrap();
            assert_eq!(binary_dot(a.row(0), a.row(0)).unwrap(), n as i64);
            assert_eq!(binary_dot(a.row(0), b.row(0)).unwrap(), -(n as i64));
        }
    }

    #[test]
    fn dot_length_mismatch_is_shape_error() {
        let a = BitTensor::from_bools(vec![3], &[true; 3]).unwrap();
        let b = BitTensor::from_bools(vec![4], &[true; 4]).unwrap();
        assert!(matches!(
            binary_dot(a.row(0), b.row(0)),
            Err(BnnError::Shape(_))
        ));
    }

    #[test]
    fn popcount_backends_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let words: Vec<u64> = (0..4096).map(|_| rng.gen()).collect();
        assert_eq!(
            popcount_words(&words, Popcount::Hardware),
            popcount_words(&words, Popcount::Portable)
        );
        for edge in [0u64, 1, u64::MAX, 1 << 63, 0x5555_5555_5555_5555] {
            assert_eq!(Swar::popcnt(edge), edge.count_ones());
        }
    }

    #[test]
    fn gemm_degenerate_is_dot() {
        let x = BitTensor::from_bools(vec![1, 3], &[true, false, true]).unwrap();
        let w = BitTensor::from_bools(vec![3, 1], &[true, true, false]).unwrap();
        let c = binary_gemm(&x, &w, RhsLayout::RowMajor).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.values(), &[-1.0]);
    }

    #[test]
    fn gemm_matches_float_gemm_8x16x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, k, n) = (8, 16, 4);
        let a: Vec<f32> = (0..m * k)
            .map(|_| if rng.gen() { 1.0 } else { -1.0 })
            .collect();
        let b: Vec<f32> = (0..k * n)
            .map(|_| if rng.gen() { 1.0 } else { -1.0 })
            .collect();
        let mut want = vec![0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    want[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let pa = BitTensor::pack(&t(vec![m, k], a)).unwrap();
        let pb = BitTensor::pack(&t(vec![k, n], b)).unwrap();
        let got = binary_gemm(&pa, &pb, RhsLayout::RowMajor).unwrap();
        assert_eq!(got.values(), &want[..]);
    }

    #[test]
    fn gemm_identity_pattern_diagonal_is_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, k) = (5, 77);
        let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pa = BitTensor::pack(&t(vec![m, k], a)).unwrap();
        let c = binary_gemm(&pa, &pa, RhsLayout::Transposed).unwrap();
        for i in 0..m {
            assert_eq!(c.values()[i * m + i], k as f32);
        }
    }

    #[test]
    fn gemm_dimension_mismatch() {
        let a = BitTensor::from_bools(vec![2, 3], &[true; 6]).unwrap();
        let b = BitTensor::from_bools(vec![4, 2], &[true; 8]).unwrap();
        assert!(matches!(
            binary_gemm(&a, &b, RhsLayout::RowMajor),
            Err(BnnError::Shape(_))
        ));
    }

    #[test]
    fn gemm_backends_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (m, k, n) = (13, 301, 9);
        let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pa = BitTensor::pack_rows(&a, m, k).unwrap();
        let pb = BitTensor::pack_rows(&b, n, k).unwrap();
        let mut hw = vec![0f32; m * n];
        let mut sw = vec![0f32; m * n];
        binary_gemm_into(&pa, &pb, &mut hw, Popcount::detect());
        binary_gemm_into(&pa, &pb, &mut sw, Popcount::Portable);
        assert_eq!(hw, sw);
    }

    /// The scalar kernel is only a fallback on machines with wide popcount,
    /// so it is compared here directly, over shapes with ragged tiles.
    #[test]
    fn scalar_kernel_matches_dispatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(m, k, n) in &[(1, 1, 1), (3, 64, 7), (5, 700, 530), (2, 64 * 8, 4)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let pa = BitTensor::pack_rows(&a, m, k).unwrap();
            let pb = BitTensor::pack_rows(&b, n, k).unwrap();
            let mut fast = vec![0f64; m * n];
            let mut scalar = vec![0f64; m * n];
            binary_gemm_into(&pa, &pb, &mut fast, Popcount::detect());
            gemm_kernel::<Native, f64>(&pa, &pb, &mut scalar);
            assert_eq!(fast, scalar, "m={m} k={k} n={n}");
            for i in 0..m {
                for j in 0..n {
                    assert_eq!(
                        scalar[i * n + j] as i64,
                        binary_dot(pa.row(i), pb.row(j)).unwrap()
                    );
                }
            }
        }
    }

    #[test]
    fn row_bytes_round_trip_keeps_padding() {
        let bits: Vec<bool> = (0..2 * 13).map(|i| i % 3 == 0).collect();
        let b = BitTensor::from_bools(vec![2, 13], &bits).unwrap();
        let bytes = b.to_row_bytes();
        assert_eq!(bytes.len(), 4);
        // Top three bits of each row's second byte are padding.
        assert_eq!(bytes[1] & 0xe0, 0xe0);
        let back = BitTensor::from_row_bytes(vec![2, 13], &bytes).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn transpose_matches_bits() {
        let bits: Vec<bool> = (0..3 * 70).map(|i| (i * 7) % 5 < 2).collect();
        let b = BitTensor::from_bools(vec![3, 70], &bits).unwrap();
        let tb = b.transpose().unwrap();
        assert_eq!(tb.shape(), &[70, 3]);
        for r in 0..3 {
            for c in 0..70 {
                assert_eq!(b.bit(r, c), tb.bit(c, r));
            }
        }
    }
}

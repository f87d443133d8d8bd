//! Named, ordered parameter blocks over a single flat buffer.
//!
//! A [`ParamSet`] stores every block of a model contiguously. The [`Layout`]
//! records each block's name, shape and offset; two sets may be combined
//! only when their layouts agree on names, order and shapes.

use std::sync::Arc;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl BlockSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    blocks: Vec<BlockSpec>,
    len: usize,
}

impl Layout {
    /// Builds a layout from `(name, shape)` pairs in order. Names must be unique.
    pub fn new<I, S>(specs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<usize>)>,
        S: Into<String>,
    {
        let mut blocks: Vec<BlockSpec> = Vec::new();
        let mut offset = 0usize;
        for (name, shape) in specs {
            let name = name.into();
            if blocks.iter().any(|b| b.name == name) {
                return Err(Error::shape(name, "duplicate block name"));
            }
            let size = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::shape(&name, "block size overflows usize"))?;
            blocks.push(BlockSpec {
                name,
                shape,
                offset,
            });
            offset = offset
                .checked_add(size)
                .ok_or_else(|| Error::shape("<layout>", "total size overflows usize"))?;
        }
        Ok(Layout {
            blocks,
            len: offset,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn find(&self, name: &str) -> Option<&BlockSpec> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Names, order and shapes match.
    pub fn is_compatible(&self, other: &Layout) -> bool {
        self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    /// Like [`Layout::is_compatible`], but reports the first differing block.
    pub fn ensure_compatible(&self, other: &Layout) -> Result<()> {
        if self.blocks.len() != other.blocks.len() {
            return Err(Error::shape(
                "<layout>",
                format!(
                    "block count {} vs {}",
                    self.blocks.len(),
                    other.blocks.len()
                ),
            ));
        }
        for (a, b) in self.blocks.iter().zip(&other.blocks) {
            if a.name != b.name {
                return Err(Error::shape(
                    &a.name,
                    format!("block name differs from `{}`", b.name),
                ));
            }
            if a.shape != b.shape {
                return Err(Error::shape(
                    &a.name,
                    format!("shape {:?} vs {:?}", a.shape, b.shape),
                ));
            }
        }
        Ok(())
    }
}

/// Per-thread count of live [`ParamSet`] buffers.
///
/// Every construction, clone and drop of a `ParamSet` updates the counter, so
/// a single-threaded run can report the largest number of parameter-sized
/// buffers it ever held at once.
pub mod tracking {
    use std::cell::Cell;

    thread_local! {
        static LIVE: Cell<usize> = const { Cell::new(0) };
        static PEAK: Cell<usize> = const { Cell::new(0) };
    }

    pub(crate) fn acquire() {
        LIVE.with(|live| {
            let n = live.get() + 1;
            live.set(n);
            PEAK.with(|peak| {
                if n > peak.get() {
                    peak.set(n);
                }
            });
        });
    }

    pub(crate) fn release() {
        LIVE.with(|live| live.set(live.get().saturating_sub(1)));
    }

    /// Buffers alive on this thread right now.
    pub fn live() -> usize {
        LIVE.with(Cell::get)
    }

    /// High-water mark since the last [`reset_peak`].
    pub fn peak() -> usize {
        PEAK.with(Cell::get)
    }

    /// Resets the high-water mark to the current live count.
    pub fn reset_peak() {
        let now = live();
        PEAK.with(|peak| peak.set(now));
    }
}

#[derive(Debug, PartialEq)]
pub struct ParamSet<T> {
    layout: Arc<Layout>,
    data: Vec<T>,
}

impl<T: Clone> Clone for ParamSet<T> {
    fn clone(&self) -> Self {
        tracking::acquire();
        ParamSet {
            layout: Arc::clone(&self.layout),
            data: self.data.clone(),
        }
    }
}

impl<T> Drop for ParamSet<T> {
    fn drop(&mut self) {
        tracking::release();
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let data = vec![T::zero(); layout.len()];
        Self::wrap(layout, data)
    }

    pub fn filled(layout: Arc<Layout>, value: T) -> Self {
        let data = vec![value; layout.len()];
        Self::wrap(layout, data)
    }

    pub fn from_flat(layout: Arc<Layout>, data: Vec<T>) -> Result<Self> {
        if data.len() != layout.len() {
            return Err(Error::shape(
                "<flat>",
                format!("expected {} values, got {}", layout.len(), data.len()),
            ));
        }
        Ok(Self::wrap(layout, data))
    }

    /// Builds a set from explicit `(name, shape, values)` triples.
    pub fn from_blocks<S: Into<String>>(blocks: Vec<(S, Vec<usize>, Vec<T>)>) -> Result<Self> {
        let mut specs = Vec::with_capacity(blocks.len());
        let mut data = Vec::new();
        for (name, shape, values) in blocks {
            let name = name.into();
            let expected: usize = shape.iter().product();
            if values.len() != expected {
                return Err(Error::shape(
                    &name,
                    format!("shape {:?} needs {} values, got {}", shape, expected, values.len()),
                ));
            }
            data.extend(values);
            specs.push((name, shape));
        }
        let layout = Arc::new(Layout::new(specs)?);
        Ok(Self::wrap(layout, data))
    }

    fn wrap(layout: Arc<Layout>, data: Vec<T>) -> Self {
        tracking::acquire();
        ParamSet { layout, data }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(Arc::clone(&self.layout))
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn layout_arc(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(mut self) -> Vec<T> {
        std::mem::take(&mut self.data)
    }

    pub fn block(&self, name: &str) -> Result<&[T]> {
        let spec = self.spec(name)?;
        Ok(&self.data[spec.range()])
    }

    pub fn block_mut(&mut self, name: &str) -> Result<&mut [T]> {
        let range = self.spec(name)?.range();
        Ok(&mut self.data[range])
    }

    fn spec(&self, name: &str) -> Result<&BlockSpec> {
        self.layout
            .find(name)
            .ok_or_else(|| Error::shape(name, "no such block"))
    }

    /// Iterates `(spec, values)` in layout order.
    pub fn blocks(&self) -> impl Iterator<Item = (&BlockSpec, &[T])> {
        self.layout
            .blocks()
            .iter()
            .map(move |b| (b, &self.data[b.range()]))
    }

    pub fn matrix(&self, name: &str) -> Result<ArrayView2<'_, T>> {
        let spec = self.spec(name)?;
        let (rows, cols) = match spec.shape.as_slice() {
            &[r, c] => (r, c),
            other => return Err(Error::shape(name, format!("expected rank 2, got {other:?}"))),
        };
        ArrayView2::from_shape((rows, cols), &self.data[spec.range()])
            .map_err(|e| Error::shape(name, e.to_string()))
    }

    pub fn matrix_mut(&mut self, name: &str) -> Result<ArrayViewMut2<'_, T>> {
        let spec = self.spec(name)?.clone();
        let (rows, cols) = match spec.shape.as_slice() {
            &[r, c] => (r, c),
            other => return Err(Error::shape(name, format!("expected rank 2, got {other:?}"))),
        };
        ArrayViewMut2::from_shape((rows, cols), &mut self.data[spec.range()])
            .map_err(|e| Error::shape(name, e.to_string()))
    }

    pub fn vector(&self, name: &str) -> Result<ArrayView1<'_, T>> {
        Ok(ArrayView1::from(self.block(name)?))
    }

    pub fn vector_mut(&mut self, name: &str) -> Result<ArrayViewMut1<'_, T>> {
        Ok(ArrayViewMut1::from(self.block_mut(name)?))
    }

    pub fn ensure_compatible(&self, other: &ParamSet<T>) -> Result<()> {
        if Arc::ptr_eq(&self.layout, &other.layout) {
            return Ok(());
        }
        self.layout.ensure_compatible(&other.layout)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self::wrap(Arc::clone(&self.layout), data)
    }

    /// Elementwise combination of two layout-compatible sets.
    pub fn zip_map(&self, other: &ParamSet<T>, mut f: impl FnMut(T, T) -> T) -> Result<Self> {
        self.ensure_compatible(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::wrap(Arc::clone(&self.layout), data))
    }

    pub fn add(&self, other: &ParamSet<T>) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ParamSet<T>) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &ParamSet<T>) -> Result<()> {
        self.ensure_compatible(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn copy_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        self.ensure_compatible(other)?;
        self.data.copy_from_slice(&other.data);
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Name of the first block holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.blocks()
            .find(|(_, values)| values.iter().any(|v| !v.is_finite()))
            .map(|(spec, _)| spec.name.as_str())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, v| if v.abs() > acc { v.abs() } else { acc })
    }

    /// Largest elementwise absolute difference.
    pub fn max_abs_diff(&self, other: &ParamSet<T>) -> Result<T> {
        self.ensure_compatible(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| {
                let d = (a - b).abs();
                if d > acc {
                    d
                } else {
                    acc
                }
            }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_block() -> ParamSet<f64> {
        ParamSet::from_blocks(vec![
            ("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]),
            ("b", vec![2], vec![5.0, 6.0]),
        ])
        .unwrap()
    }

    #[test]
    fn flat_length_is_sum_of_blocks() {
        let p = two_block();
        assert_eq!(p.len(), 6);
        assert_eq!(p.layout().find("b").unwrap().offset, 4);
        assert_eq!(p.block("b").unwrap(), &[5.0, 6.0]);
        assert_eq!(p.matrix("w").unwrap()[[1, 0]], 3.0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let err = Layout::new(vec![("a", vec![1]), ("a", vec![2])]).unwrap_err();
        assert!(matches!(err, Error::Shape { ref block, .. } if block == "a"));
    }

    #[test]
    fn incompatible_layouts_name_the_block() {
        let p = two_block();
        let q: ParamSet<f64> = ParamSet::from_blocks(vec![
            ("w", vec![2, 2], vec![0.0; 4]),
            ("b", vec![3], vec![0.0; 3]),
        ])
        .unwrap();
        match p.add(&q).unwrap_err() {
            Error::Shape { block, .. } => assert_eq!(block, "b"),
            e => panic!("unexpected {e:?}"),
        }
        let renamed: ParamSet<f64> = ParamSet::from_blocks(vec![
            ("w", vec![2, 2], vec![0.0; 4]),
            ("c", vec![2], vec![0.0; 2]),
        ])
        .unwrap();
        assert!(!p.layout().is_compatible(renamed.layout()));
    }

    #[test]
    fn live_counter_follows_clones_and_drops() {
        let before = tracking::live();
        let p = two_block();
        let q = p.clone();
        assert_eq!(tracking::live(), before + 2);
        drop(p);
        drop(q);
        assert_eq!(tracking::live(), before);
    }

    #[test]
    fn first_non_finite_reports_block() {
        let mut p = two_block();
        p.block_mut("b").unwrap()[1] = f64::NAN;
        assert_eq!(p.first_non_finite(), Some("b"));
    }
}

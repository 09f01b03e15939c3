//! Execution policy for the data-parallel loops.
//!
//! Parallel and sequential paths visit items in the same order and reduce
//! each output element in the same order, so they agree bit for bit.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Exec::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// All policies compiled into this build.
    pub fn available() -> Vec<Exec> {
        vec![
            Exec::Sequential,
            #[cfg(feature = "parallel")]
            Exec::Parallel,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            Exec::Sequential => "seq",
            #[cfg(feature = "parallel")]
            Exec::Parallel => "par",
        }
    }

    /// `(0..n).map(f).collect()`, order preserved.
    pub fn map_range<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Exec::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
        }
    }

    /// `items.iter().map(f).collect()`, order preserved.
    pub fn map_slice<T, U, F>(self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync + Send,
    {
        match self {
            Exec::Sequential => items.iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_iter().map(f).collect(),
        }
    }

    /// Calls `f(chunk_index, chunk)` on consecutive `chunk`-sized pieces of `buf`.
    pub fn for_each_chunk_mut<T, F>(self, buf: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        if chunk == 0 {
            return;
        }
        match self {
            Exec::Sequential => buf
                .chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c)),
            #[cfg(feature = "parallel")]
            Exec::Parallel => buf
                .par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c)),
        }
    }

    /// Applies `f` to every element in place.
    pub fn for_each_mut<T, F>(self, items: &mut [T], f: F)
    where
        T: Send,
        F: Fn(&mut T) + Sync + Send,
    {
        match self {
            Exec::Sequential => items.iter_mut().for_each(f),
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_iter_mut().for_each(f),
        }
    }
}

//! Data-parallel helpers: element loops map in parallel (when the
//! `parallel` feature is on) and always reduce in a fixed sequential order,
//! so assemblies are bit-identical regardless of thread count.

use crate::Result;

#[cfg(feature = "parallel")]
pub(crate) fn try_map<I: Sync, T: Send>(
    items: &[I],
    f: impl Fn(&I) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn try_map<I, T>(items: &[I], f: impl Fn(&I) -> Result<T>) -> Result<Vec<T>> {
    items.iter().map(f).collect()
}

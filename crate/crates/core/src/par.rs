//! Data-parallel mapping over independent work items.
//!
//! With the `parallel` feature the `Parallel` mode uses rayon; without it,
//! every mode runs sequentially. Results always come back in index order, so
//! reductions over them are deterministic regardless of mode.

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

impl ExecMode {
    /// Whether this mode actually fans out in the current build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecMode::Parallel
    }
}

pub fn map<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// Like [`map`] but stops at the first error (lowest index wins).
pub fn try_map<T, F>(mode: ExecMode, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    map(mode, n, f).into_iter().collect()
}

/// Consumes `items`, mapping each one; output order follows input order.
pub fn map_owned<T, U, F>(mode: ExecMode, items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return items.into_par_iter().map(f).collect();
    }
    let _ = mode;
    items.into_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_keep_order() {
        let seq = map(ExecMode::Sequential, 50, |i| i * i);
        let par = map(ExecMode::Parallel, 50, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }

    #[test]
    fn first_error_is_reported() {
        let r = try_map(ExecMode::Parallel, 10, |i| {
            if i >= 3 {
                Err(crate::Error::InvalidArgument(format!("{i}")))
            } else {
                Ok(i)
            }
        });
        assert!(matches!(r, Err(crate::Error::InvalidArgument(s)) if s == "3"));
    }
}

//! Parallel map helpers with a sequential fallback.

/// Maps `$f` over `$iter` (an owned iterator source such as a range or a
/// `Vec`), collecting results in input order.
macro_rules! par_map {
    ($iter:expr, $f:expr) => {{
        #[cfg(feature = "parallel")]
        {
            use rayon::iter::{IntoParallelIterator, ParallelIterator};
            ($iter).into_par_iter().map($f).collect::<Vec<_>>()
        }
        #[cfg(not(feature = "parallel"))]
        {
            ($iter).into_iter().map($f).collect::<Vec<_>>()
        }
    }};
}

/// Runs `$f` on every chunk of `$slice` of length `$chunk`, mutably.
macro_rules! par_chunks_mut {
    ($slice:expr, $chunk:expr, $f:expr) => {{
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            ($slice).par_chunks_mut($chunk).enumerate().for_each($f)
        }
        #[cfg(not(feature = "parallel"))]
        {
            ($slice).chunks_mut($chunk).enumerate().for_each($f)
        }
    }};
}

/// Whether the crate was built with rayon support.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

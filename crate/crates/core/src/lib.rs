//! Incremental iterative regularization for least squares.
//!
//! The estimator is the cyclic incremental gradient method on the empirical
//! square loss, started at zero, with a fixed step size. The number of passes
//! over the data (epochs) is the only regularization parameter: stopping early
//! trades approximation error for sample error.
//!
//! The crate is organised as
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`model`] | samples, discrete population oracles, risk functionals |
//! | [`iir`] | the epoch update, its affine operator form, population and batch iterations |
//! | [`kernel`] | Gram matrices, dual-coefficient KIIR / KIR, kernel ridge regression |
//! | [`stopping`] | a priori stopping times and hold-out selection |
//! | [`synth`] | trigonometric-dictionary data and source-condition problems |
//! | [`bench`] | learning curves, rate fits, bound and concentration checks, baselines |
//! | [`io`] | CSV / LIBSVM loaders, result envelopes, curve files |
//!
//! ```
//! use iir::model::DataSet;
//! use iir::iir::run_iir;
//!
//! let data = DataSet::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1.0, 1.0]).unwrap();
//! let path = run_iir(&data, 1.0, 2, true).unwrap();
//! assert_eq!(path.len(), 3);
//! assert!((path[2].w[0] - 0.75).abs() < 1e-15);
//! ```

// Parameter checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod error;
pub mod iir;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod stopping;
pub mod synth;

pub use error::{Error, Result};

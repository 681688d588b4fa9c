//! BLAS provider shim. Resolves the `blas-src` dependency of the conic
//! solver to the system OpenBLAS (linked through `openblas-src`'s `system`
//! feature).
#![no_std]

#[cfg(feature = "openblas")]
extern crate openblas_src;

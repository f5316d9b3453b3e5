//! Core math for recurrent render-and-compare 6D pose refinement.
//!
//! The crate is `no_std` + `alloc` so the refinement path (rasterizer,
//! network forward, pose math) can run without an OS; everything that
//! touches files, threads or a terminal lives in the companion
//! `rendermatch` crate.
//!
//! Module map:
//!
//! - [`gradcore`] — reverse-mode autodiff over dense tensors, exactly the
//!   primitive set the network needs.
//! - [`geometry`] — quaternions, poses, pinhole projection, the
//!   pixel-space/log-depth update encoding, ROI crops.
//! - [`renderer`] — deterministic software rasterizer: color/depth/mask,
//!   brightness metering, ground-truth optical flow, crop/resize.
//! - [`objectives`] — point-matching losses, multi-scale flow endpoint
//!   error, ADD / ADD-S / AUC metrics, plus their differentiable kernels.
//! - [`network`] — the scalable backbone, recurrent trunk, pose heads and
//!   the training-only flow decoder.
//! - [`optim`] — Adam.
//! - [`refine`] — the iterative refinement loop, pose-noise sampling and
//!   the per-sample training graph.
//! - [`rng`] — seeded, splittable randomness used everywhere determinism
//!   is promised.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod gradcore;
pub mod geometry;
pub mod objectives;
pub mod network;
pub mod optim;
pub mod refine;
pub mod renderer;
pub mod rng;

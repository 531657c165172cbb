//! Collaborative bird's-eye-view perception for radar + camera agents.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`] – dense BEV rasters, pyramids and bilinear sampling.
//! * [`geometry`] – SE(2) poses, grid warping, oriented-box IoU and NMS.
//! * [`scene`] – seeded synthetic worlds plus radar and camera sensor proxies.
//! * [`gsr`] – radar-guided rectification of lifted camera features.
//! * [`uac`] – confidence, demand weights and budgeted token selection.
//! * [`cda`] – consensus-biased token assembly and demand-weighted fusion.
//! * [`comm`] – the binary message format, byte ledger and channel model.
//! * [`detect`] – matched-filter detection head, decoding, target assignment.
//! * [`objective`] – loss evaluators and the Acc@t / confusion metrics.
//! * [`scenario`] – configuration, the end-to-end runner, sweeps and ablations.

pub mod cda;
pub mod comm;
pub mod config;
pub mod detect;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod gsr;
pub mod nn;
pub mod objective;
pub mod scenario;
pub mod scene;
pub mod uac;

pub use error::{Error, Result};

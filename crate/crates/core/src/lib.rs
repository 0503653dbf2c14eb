// Range checks are written `!(x > 0.0)` so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod buffer;
pub mod calibration;
pub mod dsp;
pub mod ear;
pub mod error;
pub mod extract;
pub mod fmcw;
pub mod harness;
pub mod screening;
pub mod signal;
pub mod stream;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/stimuli.md")]
    mod stimuli {}
    #[doc = include_str!("../../../book/src/ear-simulator.md")]
    mod ear_simulator {}
    #[doc = include_str!("../../../book/src/ranging.md")]
    mod ranging {}
    #[doc = include_str!("../../../book/src/extraction.md")]
    mod extraction {}
    #[doc = include_str!("../../../book/src/screening.md")]
    mod screening {}
    #[doc = include_str!("../../../book/src/streaming.md")]
    mod streaming {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

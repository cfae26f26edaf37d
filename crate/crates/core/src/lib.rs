//! Seamless website fingerprinting on fixed 500-packet windows: feature
//! extraction, a synthetic multi-environment traffic generator, residual 1-D
//! CNN classifiers written from scratch, domain-adversarial adaptation and
//! two traffic-randomization defenses.

mod codec;
pub mod adapt;
pub mod defense;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod synth;
pub mod traffic;

pub use error::{Error, ErrorClass, FormatError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/traces.md")]
    mod traces {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/adaptation.md")]
    mod adaptation {}
    #[doc = include_str!("../../../book/src/defenses.md")]
    mod defenses {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

pub mod error;
pub mod mesh;
pub mod metrics;
pub mod params;
pub mod scenario;
pub mod sparse;
pub mod stepper;

pub use error::{Error, Result};

// Book chapters, compiled and run as doc-tests so the guide cannot drift.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/mesh.md")]
    mod mesh {}
    #[doc = include_str!("../../../book/src/scheme.md")]
    mod scheme {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}

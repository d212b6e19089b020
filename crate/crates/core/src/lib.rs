//! Stability analysis of linear time-delay systems
//!
//! ```text
//! ẋ(t) = Σⱼ Aⱼ x(t − hⱼ)
//! ```
//!
//! through the delay Lyapunov matrix `U(τ)` and positivity of the block
//! matrices `𝒦ᵣ = [U((j − i)H/(r − 1))]`.
//!
//! The crate is organized bottom-up: [`linalg`] kernels, the [`system`]
//! model, the [`fundamental`] matrix `K(t)`, the Lyapunov matrix in
//! [`lyapmat`], quadrature evaluation of the functionals in [`functional`],
//! the stability tests and their constants in [`criteria`], a spectral
//! [`oracle`] for cross-checks, and parameter [`sweep`]s.
//!
//! ```
//! use delaylyap::{criteria, system::TimeDelaySystem, linalg::Matrix};
//!
//! let a1 = Matrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -1.25]);
//! let sys = TimeDelaySystem::new(vec![(0.5, a1)], None).unwrap();
//! let report = criteria::necessary_report(&sys, 6).unwrap();
//! assert_eq!(report.verdict, criteria::Verdict::Stable);
//! ```

pub mod criteria;
pub mod functional;
pub mod fundamental;
pub mod linalg;
pub mod lyapmat;
pub mod oracle;
pub mod par;
pub mod quad;
pub mod sweep;
pub mod system;

pub use criteria::{CriterionConstants, StabilityReport, Verdict};
pub use fundamental::FundamentalMatrix;
pub use linalg::Matrix;
pub use lyapmat::LyapunovMatrix;
pub use system::TimeDelaySystem;

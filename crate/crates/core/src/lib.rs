//! Tuning-free square-root matrix completion.
//!
//! Recovers a rank-`r` matrix `L*` from noisy entries `M = L* + E` observed on
//! an index set `Omega` by minimizing `||P_Omega(L - M)||_F + lambda ||L||_*`
//! with `lambda = C / sqrt(n)`, independent of the noise level. The estimator
//! is computed by gradient descent on a factored surrogate ([`solver`]) and
//! can be checked against dense convex solvers ([`convex`]) and an
//! optimality certificate ([`certificate`]).
//!
//! ```
//! use sqrtmc::{generate_instance, solve, SolverConfig};
//!
//! let inst = generate_instance(200, 2, 0.5, 1e-5, 7).unwrap();
//! let report = solve(&inst.obs, 2, &SolverConfig::default(), Some(inst.ground_truth())).unwrap();
//! assert!(report.metrics.unwrap().rel_fro < 0.05);
//! ```

pub mod certificate;
pub mod convex;
pub mod error;
pub mod experiments;
pub mod instance_gen;
pub mod linalg;
pub mod masked_ops;
pub mod rng;
pub mod solver;

pub use certificate::{check_certificate, factored_svd, CertificateReport, OptimalityCertificate};
pub use convex::{solve_convex_sqrt, solve_vanilla, ConvexOptions, ConvexSolveReport};
pub use error::{Error, Result};
pub use experiments::{error_metrics, run_sweep, ErrorMetrics, SweepSpec};
pub use instance_gen::{generate_instance, InstanceDescriptor, ProblemInstance};
pub use masked_ops::ObservationSet;
pub use solver::{solve, FactorIterate, SolveReport, SolverConfig, StopReason};

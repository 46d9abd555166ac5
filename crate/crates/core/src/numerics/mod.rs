//! Dense linear algebra, subspace arithmetic, spectra, pole placement and
//! fixed-step integration shared by the rest of the crate.

pub mod eig;
pub mod lyap;
pub mod ode;
pub mod place;
pub mod subspace;

pub use eig::{eigenvalues, spectral_abscissa, spectrum_mismatch};
pub use lyap::{solve_lyapunov, solve_sylvester};
pub use ode::{rk4_step, Rk4};
pub use place::{place_poles, place_selector};
pub use subspace::{
    invariant_friend, kernel_basis, max_controlled_invariant, subspace_intersect, unobservable_subspace,
    weakly_unobservable_subspace,
    SubspaceBasis,
};

//! Thomas-Fermi functionals and their semiclassical mean-field probes:
//! grid/step densities, Dirichlet-box Fermi seas and recovery Slater states,
//! the Fefferman–de la Llave kernel decomposition, Weyl-law eigenvalue sums
//! with Legendre duality, an inequality suite (Lieb–Oxford,
//! Hoffmann–Ostenhof, the Cauchy–Schwarz interaction channel), and a CLI for
//! reproducible desk-scale experiments.

pub mod bounds;
pub mod densities;
pub mod error;
pub mod experiments;
pub mod fermi_box;
pub mod geom;
pub mod potentials;
pub mod quad;
pub mod spectral;
pub mod tf;

pub use error::{Error, Result};

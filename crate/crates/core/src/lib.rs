//! Knowledge-guided revision of dynamic-process ODE models.
//!
//! The toolkit represents a process model (a pair of coupled differential
//! equations describing plankton dynamics) as a tree-adjoining-grammar
//! derivation tree, and evolves both the structure and the constant
//! parameters of the model against observed data, under the constraints
//! declared in a machine-readable knowledge file.
//!
//! Module map:
//!
//! * [`tag`] — the TAG formalism: elementary trees, adjoining, substitution,
//!   derivation trees, random derivation generation.
//! * [`expr`] — expression trees with protected arithmetic, a linear
//!   instruction compiler, algebraic simplification, and a fitness cache.
//! * [`process`] — the biological process specification, parameter priors,
//!   and forward-Euler simulation.
//! * [`knowledge`] — turns a knowledge file into a TAG grammar (one α-tree
//!   plus connector/extender β-trees and lexemes) and decodes derived trees
//!   back into equations.
//! * [`hydrology`] — river network flow routing, measurement ingestion,
//!   interpolation, data splits, and synthetic scenario generation.
//! * [`evolve`] — the generational search loop: selection, crossover,
//!   mutations, local search, short-circuited fitness evaluation, and the
//!   calibration-only baseline.
//! * [`analysis`] — post-hoc variable selectivity and perturbation response.

pub mod analysis;
pub mod evolve;
pub mod expr;
pub mod hydrology;
pub mod knowledge;
pub mod process;
pub mod tag;

#[doc(hidden)]
pub mod testutil;

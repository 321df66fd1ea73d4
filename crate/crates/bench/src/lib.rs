//! Shared fixtures for the benchmarks.

use hvr_core::rfield::{draw_field, CoefficientField};
use hvr_core::stream::{Domain, Streams};
use hvr_core::{FieldSpec, PerturbationSpec, SmallMatrix, UnitCellField, XLaw};

/// One 2D checkerboard draw with cells `3` or `20`.
pub fn checkerboard(n: usize, seed: u64) -> CoefficientField {
    let spec = FieldSpec::two_state(2, 3.0, 20.0, 0.5).expect("valid two-state law");
    draw_field(&spec, n, &mut Streams::new(seed).rng(Domain::Field, 0))
        .expect("checkerboard draw")
        .into_field()
}

/// `Id + x_k Id / 2` with `x_k = ±1`.
pub fn sign_perturbation() -> PerturbationSpec {
    let id = SmallMatrix::identity(2);
    PerturbationSpec::new(id, UnitCellField::constant(id), 0.5, XLaw::PlusMinusOne).expect("valid perturbation")
}

/// `3 Id + 20 B_k Id` with `B_k` Bernoulli(1/2).
pub fn defect_perturbation() -> PerturbationSpec {
    PerturbationSpec::new(
        SmallMatrix::scalar(2, 3.0),
        UnitCellField::constant(SmallMatrix::scalar(2, 20.0)),
        1.0,
        XLaw::Bernoulli01 { prob: 0.5 },
    )
    .expect("valid perturbation")
}

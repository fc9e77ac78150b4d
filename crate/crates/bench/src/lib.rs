//! Shared fixtures for the criterion benches.

use ofg_core::data::{make_pair, FieldSpec, PhantomSpec};
use ofg_core::predictor::{Architecture, PredictorParams};
use ofg_core::volume::ImagePair;

/// A default synthetic pair on a cubic grid of edge `n`.
pub fn pair(n: usize) -> ImagePair {
    let spec = PhantomSpec {
        dims: [n; 3],
        ..PhantomSpec::default()
    };
    make_pair(&spec, &FieldSpec::default(), 1).expect("default phantom fits")
}

/// A freshly initialized default predictor.
pub fn model() -> PredictorParams {
    PredictorParams::init(Architecture::default(), 1).expect("default architecture is valid")
}

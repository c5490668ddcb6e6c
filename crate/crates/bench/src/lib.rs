//! Fixtures shared by the benchmarks.

use curvequiv::{
    generate, Dataset, DoseResponseModel, GroupVariances, ModelSpec, Scenario, StudyDesign,
};

pub struct Fixture {
    pub design: StudyDesign,
    pub truth: Vec<DoseResponseModel>,
    pub specs: Vec<ModelSpec>,
    pub data: Dataset,
}

/// Scenario A at its boundary row with one simulated data set.
pub fn scenario_a(fixed_hill: bool) -> Fixture {
    let scenario = Scenario::builtin("A").unwrap().with_fixed_hill(fixed_hill);
    let design = scenario.design().unwrap();
    let truth = scenario.true_models(4).unwrap();
    let specs = scenario.specs(4).unwrap();
    let variances =
        GroupVariances::new(vec![scenario.sigma * scenario.sigma; scenario.k()]).unwrap();
    let data = generate(&design, &truth, &variances, 11).unwrap();
    Fixture {
        design,
        truth,
        specs,
        data,
    }
}

//! Benchmark fixtures.

use skillblend::{annotate, load_scene, scripted_demo, BlendStructure, Demonstration, ModelArch, SceneSetup, ThetaParams, Variant, WeightModel};

pub const PICK_PLACE: &str = include_str!("../../core/scenes/pick_place.toml");

pub struct Fixture {
    pub setup: SceneSetup,
    pub demo: Demonstration,
    pub structure: BlendStructure,
}

impl Fixture {
    pub fn pick_place() -> Self {
        let setup = load_scene(PICK_PLACE).expect("bundled scene");
        let traj = scripted_demo(&setup.task, &setup.schedule, &setup.teacher).expect("teacher rollout");
        let demo = annotate(&traj, &setup.task).expect("annotation");
        let structure = setup.task.structure.clone();
        Fixture { setup, demo, structure }
    }

    pub fn model(&self, variant: Variant, hidden: usize) -> WeightModel {
        let arch = ModelArch::from_structure(&self.structure, variant, hidden).expect("arch");
        let theta = ThetaParams::random(&arch, 11);
        WeightModel::new(arch, theta).expect("model")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_builds() {
        let f = Fixture::pick_place();
        assert_eq!(f.demo.samples.len(), f.setup.task.scene.steps + 1);
        assert_eq!(f.model(Variant::Full, 8).arch.num_skills(), f.structure.num_skills());
    }
}

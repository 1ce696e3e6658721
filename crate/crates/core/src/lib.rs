//! Learning to sequence and blend black-box skills through a weighted QP.
//!
//! The blend at phase `s` minimizes `½ (ẑ − z)ᵀ W(s) (ẑ − z)` over skill
//! values `z` that agree on every shared control space. `W(s)` comes from a
//! small network and is trained from demonstrations through the QP's
//! optimality conditions.

pub mod demo;
pub mod error;
pub mod model_io;
pub mod qp;
pub mod scenario;
pub mod scene;
pub mod sim;
pub mod skills;
pub mod trainer;
pub mod weights;

pub use demo::{annotate, load_demo, save_demo, scripted_demo, ActivationSchedule, Demonstration, TeacherGains};
pub use error::{Error, Result};
pub use model_io::{load_model, save_model};
pub use qp::{build_structure, kkt_stationarity, nullspace_projector, solve_adjoint, solve_blend, BlendStructure, ControlSpace, QpSolution};
pub use scene::{load_scene, SceneSetup};
pub use sim::{eval_task, rollout, PlanarRobot, TaskReport, Trajectory};
pub use skills::{Skill, SkillDef, SkillQueryState};
pub use trainer::{baseline_per_sample, grad_loss, total_loss, train, LossBreakdown, LossVariant, QpPath, TrainConfig};
pub use weights::{forward, ModelArch, ThetaParams, Variant, WeightMatrix, WeightModel, WeightSchedule};

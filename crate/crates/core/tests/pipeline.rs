mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use skillblend::demo::{GroupSchedule, Segment};
use skillblend::sim::j_smooth;
use skillblend::skills::{Knot, Skill};
use skillblend::trainer::sample_loss;
use skillblend::weights::{forward_diag, forward_full, init_full_from_diag, lipschitz_bound};
use skillblend::{
    annotate, baseline_per_sample, eval_task, load_demo, rollout, save_demo, scenario, scripted_demo, total_loss,
    train, ActivationSchedule, Error, ModelArch, ThetaParams, TrainConfig, Variant, WeightModel,
};

fn reference_demo() -> (skillblend::SceneSetup, skillblend::Demonstration) {
    let setup = scenario::pick_place().unwrap();
    let traj = scripted_demo(&setup.task, &setup.schedule, &setup.teacher).unwrap();
    let demo = annotate(&traj, &setup.task).unwrap();
    (setup, demo)
}

#[test]
fn teacher_demo_completes_the_task() {
    let setup = scenario::pick_place().unwrap();
    let traj = scripted_demo(&setup.task, &setup.schedule, &setup.teacher).unwrap();
    let report = eval_task(&traj, &setup.task.scene);
    assert!(report.grasp_success && report.place_success, "{report:?}");
    assert_eq!(traj.records.len(), setup.task.scene.steps + 1);
    assert!(traj.records.windows(2).all(|w| w[1].s > w[0].s));
}

#[test]
fn standing_still_fails_the_task() {
    let setup = scenario::pick_place().unwrap();
    let still = ActivationSchedule {
        groups: setup
            .schedule
            .groups
            .iter()
            .map(|g| GroupSchedule {
                group: g.group.clone(),
                half_width: 0.0,
                segments: vec![Segment {
                    start: 0.0,
                    end: 1.0,
                    skill: g.segments[0].skill.clone(),
                }],
            })
            .collect(),
    };
    let mut task = setup.task.clone();
    let home = task.initial.robot.ee;
    for def in &mut task.skills {
        if let Skill::Attractor { target, .. } = &mut def.params {
            *target = [home.x, home.y];
        }
    }
    let traj = scripted_demo(&task, &still, &setup.teacher).unwrap();
    let report = eval_task(&traj, &task.scene);
    assert!(!report.grasp_success && !report.place_success);
}

#[test]
fn open_intervals_drive_the_gripper_open() {
    let (setup, demo) = reference_demo();
    let st = &setup.task.structure;
    let grip = st.space_index("gripper").unwrap();
    let open = st.skill_index("open").unwrap();
    let skills = &setup.task.skills;
    for smp in &demo.samples {
        if setup.schedule.activations(smp.s, skills)[open] == 1.0 && smp.gamma < 1.0 {
            assert!(smp.executed[st.space_range(grip).start] > 0.0, "s = {}", smp.s);
        }
    }
}

#[test]
fn single_skill_schedule_is_a_plain_attractor_rollout() {
    let setup = scenario::pick_place().unwrap();
    let mut task = setup.task.clone();
    let g = setup.teacher;
    for def in &mut task.skills {
        if let Skill::Attractor { gain, vmax, .. } = &mut def.params {
            *gain = g.arm_gain;
            *vmax = g.arm_vmax;
        }
    }
    let schedule = ActivationSchedule {
        groups: ["arm", "gripper"]
            .iter()
            .zip(["pick", "open"])
            .map(|(g, k)| GroupSchedule {
                group: g.to_string(),
                half_width: 0.0,
                segments: vec![Segment {
                    start: 0.0,
                    end: 1.0,
                    skill: k.into(),
                }],
            })
            .collect(),
    };
    let demo = scripted_demo(&task, &schedule, &g).unwrap();
    let plain = rollout(&schedule.weight_fn(&task.skills, &task.structure), &task).unwrap();
    for (a, b) in demo.records.iter().zip(&plain.records) {
        assert!((a.ee - b.ee).norm() < 1e-4, "step {}", a.step);
    }
    let last = demo.records.last().unwrap().ee;
    assert!((last - task.scene.pick).norm() < 1e-3);
}

#[test]
fn annotation_is_idempotent_and_keeps_every_sample() {
    let setup = scenario::pick_place().unwrap();
    let traj = scripted_demo(&setup.task, &setup.schedule, &setup.teacher).unwrap();
    let a = annotate(&traj, &setup.task).unwrap();
    let b = annotate(&traj, &setup.task).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.samples.len(), traj.records.len());
}

#[test]
fn reloaded_demo_gives_the_same_loss() {
    let (setup, demo) = reference_demo();
    let back = load_demo(&save_demo(&demo).unwrap()).unwrap();
    assert_eq!(back, demo);
    let st = &setup.task.structure;
    let arch = ModelArch::from_structure(st, Variant::Diagonal, 16).unwrap();
    let theta = ThetaParams::random(&arch, 5);
    let cfg = TrainConfig::default();
    let a = total_loss(&theta, &[demo], st, &arch, &cfg).unwrap();
    let b = total_loss(&theta, &[back], st, &arch, &cfg).unwrap();
    assert_eq!(a.total.to_bits(), b.total.to_bits());
    assert_eq!(a.total, a.per_demo.iter().sum::<f64>());
}

#[test]
fn truncated_demo_names_the_missing_field() {
    let (_, demo) = reference_demo();
    let mut value: serde_json::Value = serde_json::from_str(&save_demo(&demo).unwrap()).unwrap();
    value["samples"][3]["state"].as_object_mut().unwrap().remove("gamma");
    match load_demo(&value.to_string()) {
        Err(Error::Schema { path, .. }) => assert_eq!(path, "samples[3].state"),
        other => panic!("unexpected {other:?}"),
    }
    let mut value: serde_json::Value = serde_json::from_str(&save_demo(&demo).unwrap()).unwrap();
    value.as_object_mut().unwrap().remove("skills");
    match load_demo(&value.to_string()) {
        Err(Error::Schema { message, .. }) => assert!(message.contains("skills"), "{message}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn one_hot_weights_explain_single_skill_intervals() {
    let setup = scenario::pick_place().unwrap();
    let task = &setup.task;
    let mut teacher = setup.teacher;
    teacher.arm_gain = 2.0;
    teacher.arm_vmax = 1.5;
    let traj = scripted_demo(task, &setup.schedule, &teacher).unwrap();
    let demo = annotate(&traj, task).unwrap();
    let st = &task.structure;
    let mut checked = 0;
    for smp in &demo.samples {
        let act = setup.schedule.activations(smp.s, &task.skills);
        if act.iter().any(|a| *a != 0.0 && *a != 1.0) {
            continue;
        }
        let mut explained = true;
        for (k, slot) in st.skills().iter().enumerate() {
            let range = st.space_range(slot.space);
            let u = smp.executed.rows(range.start, range.len());
            if act[k] == 1.0 && (u - smp.skill_outputs.rows(slot.offset, slot.dim)).norm() > 1e-3 {
                explained = false;
            }
        }
        if !explained {
            continue;
        }
        let wm = skillblend::WeightMatrix::diagonal(act, &st.blocks()).unwrap();
        let loss = sample_loss(&wm.matrix, st.projector(), &(st.s() * &smp.executed), &smp.skill_outputs, skillblend::LossVariant::Projected)
            .unwrap();
        assert!(loss <= 1e-6, "s = {} loss {loss}", smp.s);
        checked += 1;
    }
    assert!(checked > 20, "only {checked} samples were checked");
}

#[test]
fn training_is_deterministic_and_never_ends_worse() {
    let (setup, demo) = reference_demo();
    let st = &setup.task.structure;
    let arch = ModelArch::from_structure(st, Variant::Diagonal, 8).unwrap();
    let theta0 = ThetaParams::random(&arch, 3);
    let cfg = TrainConfig {
        epochs: 40,
        phase_stride: 4,
        ..TrainConfig::default()
    };
    let demos = [demo];
    let a = train(&theta0, &demos, st, &arch, &cfg).unwrap();
    let b = train(&theta0, &demos, st, &arch, &cfg).unwrap();
    assert_eq!(a.theta, b.theta);
    let bits = |h: &[skillblend::trainer::EpochRecord]| h.iter().map(|r| r.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.history), bits(&b.history));
    assert!(a.final_loss.total <= a.initial_loss);
    assert_eq!(a.history.len(), 40);
}

#[test]
fn training_at_a_minimum_stays_put() {
    let setup = scenario::pick_place().unwrap();
    let task = &setup.task;
    let arch = ModelArch::from_structure(&task.structure, Variant::Diagonal, 8).unwrap();
    let model = WeightModel::new(arch.clone(), ThetaParams::random(&arch, 9)).unwrap();
    let demo = annotate(&rollout(&model, task).unwrap(), task).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        ..TrainConfig::default()
    };
    let out = train(&model.theta, &[demo], &task.structure, &arch, &cfg).unwrap();
    assert!(out.final_loss.total <= 1e-10);
    let drift = rel_err(&out.theta.to_flat(), &model.theta.to_flat());
    assert!(drift < 1e-6, "drift {drift}");
}

#[test]
fn invalid_training_configs_are_rejected() {
    let (setup, demo) = reference_demo();
    let st = &setup.task.structure;
    let arch = ModelArch::from_structure(st, Variant::Diagonal, 4).unwrap();
    let theta = ThetaParams::zeros(&arch);
    for cfg in [
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
        TrainConfig {
            loss: skillblend::LossVariant::Unprojected,
            qp_path: skillblend::QpPath::ClosedForm,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(train(&theta, std::slice::from_ref(&demo), st, &arch, &cfg), Err(Error::Config(_))));
    }
}

fn two_skill_demo(executed: f64) -> (skillblend::Demonstration, skillblend::BlendStructure) {
    let st = skillblend::build_structure(
        &[skillblend::ControlSpace::new("x", 1)],
        &[("a", "x"), ("b", "x")],
        &[vec!["a", "b"]],
    )
    .unwrap();
    let mut demo = random_demo(&mut rng(1), &st, 3);
    for smp in &mut demo.samples {
        smp.skill_outputs = DVector::from_row_slice(&[2.0, -1.0]);
        smp.executed = DVector::from_element(1, executed);
    }
    (demo, st)
}

#[test]
fn baseline_recovers_exact_mixtures() {
    let (demo, st) = two_skill_demo(2.0);
    for row in baseline_per_sample(&[demo], &st).unwrap() {
        assert!((row.weights[0] - 1.0).abs() <= 1e-3 && row.weights[1].abs() <= 1e-3);
    }
    let (demo, st) = two_skill_demo(0.5);
    for row in baseline_per_sample(&[demo], &st).unwrap() {
        assert!((row.weights[0] - 0.5).abs() <= 1e-3);
        assert!((row.weights.sum() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn baseline_handles_wider_groups() {
    let st = skillblend::build_structure(
        &[skillblend::ControlSpace::new("x", 2)],
        &[("a", "x"), ("b", "x"), ("c", "x")],
        &[vec!["a", "b", "c"]],
    )
    .unwrap();
    let mut demo = random_demo(&mut rng(2), &st, 4);
    let truth = [0.2, 0.5, 0.3];
    for smp in &mut demo.samples {
        smp.skill_outputs = DVector::from_row_slice(&[1.0, 0.0, 0.0, 1.0, -1.0, -1.0]);
        smp.executed = DVector::from_row_slice(&[0.2 - 0.3, 0.5 - 0.3]);
    }
    for row in baseline_per_sample(&[demo], &st).unwrap() {
        for (w, t) in row.weights.iter().zip(truth) {
            assert!((w - t).abs() < 1e-4, "{:?}", row.weights);
        }
    }
    assert!(baseline_per_sample(&[], &st).is_err());
}

#[test]
fn warm_start_copies_the_diagonal_model() {
    let st = pick_place_structure();
    let diag = ModelArch::from_structure(&st, Variant::Diagonal, 8).unwrap();
    let full = diag.with_variant(Variant::Full).unwrap();
    let theta_d = lively_theta(&diag, 4);
    let theta_f = init_full_from_diag(&theta_d, &full, 4).unwrap();
    let gate = 1.0 / (1.0 + 4f64.exp());
    let offsets = full.offsets();
    for i in 0..=50 {
        let s = i as f64 / 50.0;
        let wd = forward_diag(&theta_d, s, &diag).unwrap();
        let wf = forward_full(&theta_f, s, &full).unwrap();
        for (k, &off) in offsets.iter().enumerate() {
            let b = full.blocks[k];
            assert_eq!(wf.matrix.view((off, off), (b, b)), wd.matrix.view((off, off), (b, b)));
        }
        let wmax = wd.weights.max();
        for m in 1..offsets.len() {
            let x = wf.matrix.view((0, offsets[m]), (offsets[m], full.blocks[m]));
            assert!(x.norm() <= gate * (wmax * wd.weights[m]).sqrt() + 1e-15);
        }
    }
    assert!(init_full_from_diag(&theta_d, &diag, 0).is_err());
}

#[test]
fn hard_switching_is_jerkier_than_the_schedule() {
    let setup = scenario::pick_place().unwrap();
    let task = &setup.task;
    let blended = rollout(&setup.schedule.weight_fn(&task.skills, &task.structure), task).unwrap();
    let hard = setup.schedule.hard();
    let switched = rollout(&hard.weight_fn(&task.skills, &task.structure), task).unwrap();
    assert!(j_smooth(&blended) < j_smooth(&switched));
}

#[test]
fn arm_commands_change_no_faster_than_weights_and_state_allow() {
    let setup = scenario::pick_place().unwrap();
    let task = &setup.task;
    let st = &task.structure;
    let arch = ModelArch::from_structure(st, Variant::Diagonal, 8).unwrap();
    let theta = lively_theta(&arch, 21);
    let model = WeightModel::new(arch.clone(), theta.clone()).unwrap();
    let traj = rollout(&model, task).unwrap();
    let ee = st.space_index("ee").unwrap();
    let (mut vmax, mut gain) = (0.0f64, 0.0f64);
    for def in &task.skills {
        if let Skill::Attractor { gain: g, vmax: v, .. } = def.params {
            vmax = vmax.max(v);
            gain = gain.max(g);
        }
    }
    let dt = task.scene.dt();
    let lip = lipschitz_bound(&theta, &arch).unwrap();
    let range = st.space_range(ee);
    let arm: Vec<usize> = (0..st.num_skills()).filter(|&k| st.skills()[k].space == ee).collect();
    for w in traj.records.windows(2) {
        let du = (w[1].command.rows(range.start, range.len()) - w[0].command.rows(range.start, range.len())).norm();
        let dw: f64 = arm.iter().map(|&k| (w[1].weights[k] - w[0].weights[k]).abs()).sum();
        let bound = vmax * dw + gain * vmax * dt;
        assert!(du <= bound * (1.0 + 1e-6) + 1e-9, "step {}: {du} > {bound}", w[0].step);
        assert!(dw <= 2.0 * lip * dt);
    }
}

#[test]
fn correlated_demo_leaves_the_convex_hull() {
    let demo = scenario::correlated_demo(0.5, 50).unwrap();
    demo.validate().unwrap();
    let st = demo.structure().unwrap();
    let rows = baseline_per_sample(std::slice::from_ref(&demo), &st).unwrap();
    let residual: f64 = demo
        .samples
        .iter()
        .zip(&rows)
        .map(|(smp, row)| {
            let blend = row.weights[2] * smp.skill_outputs[2] + row.weights[3] * smp.skill_outputs[3];
            (smp.executed[1] - blend).abs()
        })
        .fold(0.0, f64::max);
    assert!(residual > 0.1);
    let plain = scenario::correlated_demo(0.0, 50).unwrap();
    let rows = baseline_per_sample(std::slice::from_ref(&plain), &st).unwrap();
    for (smp, row) in plain.samples.iter().zip(&rows) {
        let blend = row.weights[2] * smp.skill_outputs[2] + row.weights[3] * smp.skill_outputs[3];
        assert!((smp.executed[1] - blend).abs() < 2e-3);
    }
}

#[test]
fn transferred_targets_stay_translated() {
    let setup = scenario::student().unwrap();
    assert_eq!(setup.transfers.len(), 3);
    for (transfer, task) in setup.transfers.iter().zip(setup.transferred_tasks().unwrap()) {
        let moved: Vec<_> = task.skills.iter().filter_map(|d| d.params.target()).collect();
        assert!(moved.iter().any(|t| (t - nalgebra::Vector2::from(transfer.pick)).norm() < 1e-12));
        assert!(moved.iter().any(|t| (t - nalgebra::Vector2::from(transfer.place)).norm() < 1e-12));
    }
    let playback = Skill::Playback {
        knots: vec![Knot { s: 0.0, value: vec![1.0] }],
    };
    assert!(playback.adapt(nalgebra::Vector2::zeros(), 0.0).is_err());
    let _ = DMatrix::<f64>::zeros(1, 1);
}

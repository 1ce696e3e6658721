use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use skillblend::sim::{read_csv, write_csv, LatencyStats, Task};
use skillblend::trainer::write_history_csv;
use skillblend::weights::init_full_from_diag;
use skillblend::{
    annotate, eval_task, load_demo, load_model, load_scene, rollout as run_rollout, save_demo, save_model,
    scripted_demo, Demonstration, LossVariant, ModelArch, QpPath, SceneSetup, ThetaParams, TrainConfig, Variant,
    WeightModel,
};

use crate::svg::{self, Series};
use crate::{EvalArgs, GenDemoArgs, LossArg, PlotArgs, QpPathArg, RolloutArgs, TrainArgs, VariantArg};

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
const PLOT_GRID: usize = 500;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn input(msg: impl Into<String>) -> Self {
        Failure {
            code: EXIT_INPUT,
            error: anyhow!(msg.into()),
        }
    }

    fn context(self, msg: String) -> Self {
        Failure {
            code: self.code,
            error: self.error.context(msg),
        }
    }
}

impl From<skillblend::Error> for Failure {
    fn from(e: skillblend::Error) -> Self {
        let code = if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_INPUT };
        Failure { code, error: e.into() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: EXIT_INPUT,
            error: e.into(),
        }
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

fn read(path: &Path) -> CmdResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::from(e).context(format!("cannot read {}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents).map_err(|e| Failure::from(e).context(format!("cannot write {}", path.display())))
}

fn in_file<T>(path: &Path, r: skillblend::Result<T>) -> CmdResult<T> {
    r.map_err(|e| Failure::from(e).context(format!("in {}", path.display())))
}

fn scene(path: &Path) -> CmdResult<SceneSetup> {
    in_file(path, load_scene(&read(path)?))
}

fn model(path: &Path) -> CmdResult<WeightModel> {
    in_file(path, load_model(&read(path)?))
}

fn pick_task(setup: &SceneSetup, transfer: Option<usize>) -> CmdResult<Task> {
    match transfer {
        None => Ok(setup.task.clone()),
        Some(i) => {
            let t = setup
                .transfers
                .get(i)
                .ok_or_else(|| Failure::input(format!("scene has {} transfer targets, no index {i}", setup.transfers.len())))?;
            Ok(setup.transferred(t)?)
        }
    }
}

/// `traj.csv` → `traj.latency.json`.
pub fn latency_path(traj: &Path) -> PathBuf {
    traj.with_extension("latency.json")
}

pub fn gen_demo(args: &GenDemoArgs) -> CmdResult {
    let setup = scene(&args.scene)?;
    if setup.schedule.groups.is_empty() {
        return Err(Failure::input(format!("{} has no teacher schedule", args.scene.display())));
    }
    let traj = scripted_demo(&setup.task, &setup.schedule, &setup.teacher)?;
    let demo = annotate(&traj, &setup.task)?;
    write(&args.out, save_demo(&demo)?)?;
    if let Some(path) = &args.traj {
        let mut buf = Vec::new();
        write_csv(&traj, &mut buf)?;
        write(path, buf)?;
    }
    let report = eval_task(&traj, &setup.task.scene);
    println!(
        "demo: {} samples, teacher success {} -> {}",
        demo.samples.len(),
        report.success,
        args.out.display()
    );
    Ok(())
}

fn load_demos(paths: &[PathBuf]) -> CmdResult<Vec<Demonstration>> {
    paths.iter().map(|p| in_file(p, load_demo(&read(p)?))).collect()
}

pub fn train(args: &TrainArgs) -> CmdResult {
    let demos = load_demos(&args.demos)?;
    let structure = demos[0].structure()?;
    for (d, path) in demos.iter().zip(&args.demos).skip(1) {
        if !d.structure()?.same_layout(&structure) {
            return Err(Failure::input(format!("{} uses a different skill layout than {}", path.display(), args.demos[0].display())));
        }
    }
    let variant = match args.variant {
        VariantArg::Diag => Variant::Diagonal,
        VariantArg::Full => Variant::Full,
    };
    let (arch, theta0) = match &args.init {
        Some(path) => {
            let init = model(path)?;
            init.arch.check_structure(&structure).map_err(|e| Failure::from(e).context(format!("in {}", path.display())))?;
            if init.arch.variant != Variant::Diagonal {
                return Err(Failure::input(format!("{} is not a diagonal model", path.display())));
            }
            let arch = init.arch.with_variant(variant)?;
            let theta = match variant {
                Variant::Full => init_full_from_diag(&init.theta, &arch, args.seed)?,
                Variant::Diagonal => init.theta,
            };
            (arch, theta)
        }
        None => {
            if variant == Variant::Full {
                eprintln!("warning: training a full model without --init; starting from random parameters");
            }
            let arch = ModelArch::from_structure(&structure, variant, args.hidden)?;
            let theta = ThetaParams::random(&arch, args.seed);
            (arch, theta)
        }
    };
    let config = TrainConfig {
        epochs: args.epochs,
        learning_rate: args.lr,
        loss: match args.loss {
            LossArg::Projected => LossVariant::Projected,
            LossArg::Unprojected => LossVariant::Unprojected,
        },
        qp_path: match args.qp_path {
            QpPathArg::Optnet => QpPath::Optnet,
            QpPathArg::Closed => QpPath::ClosedForm,
        },
        seed: args.seed,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let outcome = skillblend::train(&theta0, &demos, &structure, &arch, &config)?;
    let elapsed = start.elapsed().as_secs_f64();
    let trained = WeightModel::new(arch, outcome.theta)?;
    write(&args.out, save_model(&trained)?)?;
    let history = args.out.with_extension("history.csv");
    let mut buf = Vec::new();
    write_history_csv(&outcome.history, &mut buf)?;
    write(&history, buf)?;
    println!(
        "trained {} model: loss {:.6} -> {:.6} in {:.1} s -> {}",
        match variant {
            Variant::Diagonal => "diagonal",
            Variant::Full => "full",
        },
        outcome.initial_loss,
        outcome.final_loss.total,
        elapsed,
        args.out.display()
    );
    Ok(())
}

pub fn rollout(args: &RolloutArgs) -> CmdResult {
    let setup = scene(&args.scene)?;
    let task = pick_task(&setup, args.transfer)?;
    let weights = model(&args.model)?;
    weights
        .arch
        .check_structure(&task.structure)
        .map_err(|e| Failure::from(e).context(format!("{} does not fit {}", args.model.display(), args.scene.display())))?;
    let traj = run_rollout(&weights, &task)?;
    let mut buf = Vec::new();
    write_csv(&traj, &mut buf)?;
    write(&args.out, buf)?;
    let stats = LatencyStats::from_seconds(&traj.latency).ok_or_else(|| Failure::input("empty rollout"))?;
    write(&latency_path(&args.out), serde_json::to_string_pretty(&stats).map_err(|e| Failure::input(e.to_string()))?)?;
    println!(
        "rollout: {} steps, latency p50 {:.4} ms p95 {:.4} ms max {:.4} ms -> {}",
        traj.records.len(),
        stats.p50_ms,
        stats.p95_ms,
        stats.max_ms,
        args.out.display()
    );
    Ok(())
}

pub fn eval(args: &EvalArgs) -> CmdResult {
    let setup = scene(&args.scene)?;
    let task = pick_task(&setup, args.transfer)?;
    let file = fs::File::open(&args.traj).map_err(|e| Failure::from(e).context(format!("cannot read {}", args.traj.display())))?;
    let traj = in_file(&args.traj, read_csv(file))?;
    let mut report = eval_task(&traj, &task.scene);
    let sidecar = latency_path(&args.traj);
    if report.latency.is_none() && sidecar.exists() {
        let stats: LatencyStats = serde_json::from_str(&read(&sidecar)?)
            .with_context(|| format!("in {}", sidecar.display()))
            .map_err(|error| Failure { code: EXIT_INPUT, error })?;
        report.latency = Some(stats);
    }
    let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::input(e.to_string()))?;
    match &args.out {
        Some(path) => write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn skill_names(model: &WeightModel, setup: Option<&SceneSetup>) -> (Vec<String>, Vec<String>) {
    if let Some(setup) = setup {
        let st = &setup.task.structure;
        if model.arch.check_structure(st).is_ok() {
            let skills = st.skills().iter().map(|s| s.id.clone()).collect();
            let groups = st
                .groups()
                .iter()
                .map(|g| setup.task.skills[g[0]].group.clone())
                .collect();
            return (skills, groups);
        }
    }
    let skills = (1..=model.arch.num_skills()).map(|k| format!("skill{k}")).collect();
    let groups = (1..=model.arch.groups.len()).map(|g| format!("group{g}")).collect();
    (skills, groups)
}

fn plot_weights(model: &WeightModel, setup: Option<&SceneSetup>, dir: &Path) -> CmdResult {
    let (skills, groups) = skill_names(model, setup);
    let full = model.arch.variant == Variant::Full;
    let mut header: Vec<String> = vec!["s".into()];
    header.extend(skills.iter().map(|k| format!("w_{k}")));
    header.extend(groups.iter().map(|g| format!("sum_{g}")));
    if full {
        header.push("offdiag_norm".into());
    }
    let mut rows = Vec::with_capacity(PLOT_GRID);
    let mut curves: Vec<Vec<(f64, f64)>> = vec![Vec::with_capacity(PLOT_GRID); skills.len()];
    let mut offdiag = Vec::new();
    for i in 0..PLOT_GRID {
        let s = i as f64 / (PLOT_GRID - 1) as f64;
        let wm = skillblend::forward(&model.theta, s, &model.arch)?;
        let mut row = vec![s];
        row.extend(wm.weights.iter());
        row.extend(wm.group_sums(&model.arch.groups));
        for (k, c) in curves.iter_mut().enumerate() {
            c.push((s, wm.weights[k]));
        }
        if full {
            let norm = wm.off_diagonal_norm();
            row.push(norm);
            offdiag.push((s, norm));
        }
        rows.push(row);
    }
    let mut csv = header.join(",") + "\n";
    for row in &rows {
        csv += &row.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",");
        csv.push('\n');
    }
    write(&dir.join("weights.csv"), csv)?;
    let mut series: Vec<Series> = skills
        .iter()
        .zip(curves)
        .map(|(name, points)| Series {
            name: format!("w_{name}"),
            points,
        })
        .collect();
    if full {
        series.push(Series {
            name: "off-diagonal norm".into(),
            points: offdiag,
        });
    }
    write(&dir.join("weights.svg"), svg::line_chart("learned weights", "s", &series))?;
    Ok(())
}

fn plot_path(traj_path: &Path, setup: Option<&SceneSetup>, dir: &Path) -> CmdResult {
    let file = fs::File::open(traj_path).map_err(|e| Failure::from(e).context(format!("cannot read {}", traj_path.display())))?;
    let traj = in_file(traj_path, read_csv(file))?;
    let mut csv = String::from("step,s,ee_x,ee_y,obj_x,obj_y\n");
    for r in &traj.records {
        csv += &format!("{},{:e},{:e},{:e},{:e},{:e}\n", r.step, r.s, r.ee.x, r.ee.y, r.object.x, r.object.y);
    }
    write(&dir.join("path.csv"), csv)?;
    let ee: Vec<(f64, f64)> = traj.records.iter().map(|r| (r.ee.x, r.ee.y)).collect();
    let obj: Vec<(f64, f64)> = traj.records.iter().map(|r| (r.object.x, r.object.y)).collect();
    let mut marks = Vec::new();
    if let Some(setup) = setup {
        let sc = &setup.task.scene;
        marks.push(("pick".to_string(), (sc.pick.x, sc.pick.y)));
        marks.push(("place".to_string(), (sc.place.x, sc.place.y)));
    }
    let series = [
        Series {
            name: "end effector".into(),
            points: ee,
        },
        Series {
            name: "object".into(),
            points: obj,
        },
    ];
    write(&dir.join("path.svg"), svg::path_plot("end-effector path", &series, &marks))?;
    Ok(())
}

pub fn plot(args: &PlotArgs) -> CmdResult {
    if args.model.is_none() && args.traj.is_none() {
        return Err(Failure::input("plot needs --model, --traj or both"));
    }
    fs::create_dir_all(&args.out).map_err(|e| Failure::from(e).context(format!("cannot create {}", args.out.display())))?;
    let setup = args.scene.as_deref().map(scene).transpose()?;
    if let Some(path) = &args.model {
        plot_weights(&model(path)?, setup.as_ref(), &args.out)?;
    }
    if let Some(path) = &args.traj {
        plot_path(path, setup.as_ref(), &args.out)?;
    }
    println!("plots -> {}", args.out.display());
    Ok(())
}

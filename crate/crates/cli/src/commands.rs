use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use kflow::analysis::{bench_sampling, mmd, spectral_decompose, Bandwidth, BenchConfig};
use kflow::cfm::{integrate, train_cfm, CfmTrainConfig, ConditionalPath, OdeMethod, VectorFieldModel};
use kflow::checkpoint::{Checkpoint, ModelKind, TaskInfo};
use kflow::datasets::{read_points_csv, write_points_csv, Distribution2D};
use kflow::koopman::{
    CurriculumSchedule, DataSource, EncoderConfig, KoopmanData, KoopmanModel, KoopmanTrainConfig,
    KoopmanTrainer, LossConfig, PlateauConfig, ScheduleMode,
};
use kflow::ndcore::Tensor;
use kflow::nn::MlpSpec;
use kflow::sampler::{koopman_sample, koopman_sample_from, SampleRun, StageTimings};
use serde_json::json;

use crate::error::CliError;
use crate::*;

pub fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::TrainCfm(a) => train_cfm_cmd(a),
        Cmd::TrainKoopman(a) => train_koopman_cmd(a),
        Cmd::Sample(a) => sample_cmd(a),
        Cmd::EvalMmd(a) => eval_mmd_cmd(a),
        Cmd::Bench(a) => bench_cmd(a),
        Cmd::Spectrum(a) => spectrum_cmd(a),
        Cmd::TrajCompare(a) => traj_compare_cmd(a),
        Cmd::Dataset(a) => dataset_cmd(a),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|e| CliError::io(path, e))
}

fn wrap_io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(path, e)
}

fn load_field(path: &Path) -> Result<(VectorFieldModel, Checkpoint), CliError> {
    let ck = Checkpoint::load(path)?;
    Ok((ck.to_vector_field()?, ck))
}

fn load_koopman(path: &Path) -> Result<(KoopmanModel, Checkpoint), CliError> {
    let ck = Checkpoint::load(path)?;
    Ok((ck.to_koopman()?, ck))
}

/// Flag value, else the distribution recorded in the checkpoint, else the
/// standard normal.
fn resolve(
    flag: Option<Distribution2D>,
    ck: &Checkpoint,
    pick: fn(&TaskInfo) -> &str,
) -> Result<Distribution2D, CliError> {
    if let Some(d) = flag {
        return Ok(d);
    }
    match &ck.meta.task {
        Some(t) => Ok(pick(t).parse()?),
        None => Ok(Distribution2D::Gauss),
    }
}

fn prior_of(t: &TaskInfo) -> &str {
    &t.prior
}

fn target_of(t: &TaskInfo) -> &str {
    &t.target
}

fn parse_bandwidth(s: &str) -> Result<Bandwidth, CliError> {
    if s == "auto" {
        return Ok(Bandwidth::Auto);
    }
    match s.parse::<f64>() {
        Ok(h) if h > 0.0 && h.is_finite() => Ok(Bandwidth::Fixed(h)),
        _ => Err(CliError::Usage(format!("bandwidth must be `auto` or a positive number, got `{s}`"))),
    }
}

fn train_cfm_cmd(a: TrainCfmArgs) -> Result<(), CliError> {
    let mut path = ConditionalPath::of_kind(a.path);
    if let Some(s) = a.sigma {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(CliError::Usage(format!("sigma must be >= 0, got {s}")));
        }
        path.sigma = s;
    }
    let cfg = CfmTrainConfig {
        spec: MlpSpec::new(3, a.hidden, a.depth, 2),
        path,
        steps: a.steps,
        batch: a.batch,
        lr: a.lr,
        seed: a.seed,
    };
    let start = Instant::now();
    let (model, losses) = train_cfm(&a.prior, &a.target, &cfg)?;
    let tail = &losses[losses.len().saturating_sub(100)..];
    let final_loss = tail.iter().sum::<f64>() / tail.len() as f64;

    let task = TaskInfo {
        prior: a.prior.short_name().into(),
        target: a.target.short_name().into(),
        path: a.path.to_string(),
    };
    let mut ck = Checkpoint::from_vector_field(&model, a.seed, Some(task));
    let notes = &mut ck.meta.notes;
    notes.insert("steps".into(), json!(a.steps));
    notes.insert("batch".into(), json!(a.batch));
    notes.insert("lr".into(), json!(a.lr));
    notes.insert("sigma".into(), json!(path.sigma));
    notes.insert("final_loss".into(), json!(final_loss));
    ck.save(&a.out)?;

    if let Some(p) = &a.loss_log {
        let mut w = create(p)?;
        writeln!(w, "step,loss").map_err(wrap_io(p))?;
        for (i, l) in losses.iter().enumerate() {
            writeln!(w, "{},{l:.17e}", i + 1).map_err(wrap_io(p))?;
        }
        finish(w, p)?;
    }
    println!(
        "trained {} steps: final loss {final_loss:.6} (mean of last {}), elapsed {:.1}s -> {}",
        a.steps,
        tail.len(),
        start.elapsed().as_secs_f64(),
        a.out.display()
    );
    Ok(())
}

fn train_koopman_cmd(a: TrainKoopmanArgs) -> Result<(), CliError> {
    let (field, field_ck) = load_field(&a.cfm)?;
    let prior = resolve(a.prior, &field_ck, prior_of)?;
    let source = match a.source.as_str() {
        "uniform" => DataSource::UniformDomain {
            n_pairs: a.n_pairs,
            half_width: a.half_width,
        },
        "trajectories" => DataSource::Trajectories,
        s => return Err(CliError::Usage(format!("unknown source `{s}` (expected uniform or trajectories)"))),
    };
    let cfg = KoopmanTrainConfig {
        encoder: EncoderConfig {
            p_learned: a.p_learned,
            hidden: a.hidden,
            depth: a.depth,
        },
        losses: LossConfig::parse_toggles(&a.losses)?,
        schedule: CurriculumSchedule {
            epochs: a.epochs,
            mode: a.schedule.parse::<ScheduleMode>()?,
            ..Default::default()
        },
        source,
        batch: a.batch,
        lr_encoder: a.lr_encoder,
        lr_operator: a.lr_operator,
        operator_init_std: a.init_std,
        plateau: a.plateau.then(PlateauConfig::default),
        n_traj: a.n_traj,
        seed: a.seed,
        ..Default::default()
    };
    cfg.validate()?;
    let start = Instant::now();
    let data = KoopmanData::build(&field, &prior, &cfg)?;
    let mut trainer = KoopmanTrainer::new(data, cfg.clone())?;
    println!(
        "p_total {}, {} steps ({} per epoch), losses {}",
        trainer.model().p_total(),
        trainer.total_steps(),
        trainer.steps_per_epoch(),
        cfg.losses
    );
    trainer.run(|e| {
        println!(
            "epoch {:>3}  t_i {:.2}  generator {:.6}  consistency {:.6}  prediction {:.6}  val_generator {:.6}  lr_scale {}",
            e.epoch, e.t_i, e.train.generator, e.train.consistency, e.train.prediction, e.val_generator, e.lr_scale
        );
    })?;
    let (model, report) = trainer.into_parts();

    let mut ck = Checkpoint::from_koopman(&model, a.seed, field_ck.meta.task.clone());
    let notes = &mut ck.meta.notes;
    notes.insert("field_checksum".into(), json!(field_ck.meta.checksum));
    notes.insert("losses".into(), json!(cfg.losses.to_string()));
    notes.insert("schedule".into(), json!(cfg.schedule.mode.to_string()));
    notes.insert("epochs".into(), json!(cfg.schedule.epochs));
    notes.insert("initial_val_generator".into(), json!(report.initial_val_generator));
    notes.insert("final_val_generator".into(), json!(report.final_val_generator));
    ck.save(&a.out)?;

    if let Some(p) = &a.log {
        let mut w = create(p)?;
        writeln!(w, "epoch,t_i,lr_scale,generator,consistency,prediction,total,val_generator")
            .map_err(wrap_io(p))?;
        for e in &report.epochs {
            let l = &e.train;
            writeln!(
                w,
                "{},{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                e.epoch, e.t_i, e.lr_scale, l.generator, l.consistency, l.prediction, l.total, e.val_generator
            )
            .map_err(wrap_io(p))?;
        }
        finish(w, p)?;
    }
    println!(
        "validation generator loss {:.6} -> {:.6}, elapsed {:.1}s -> {}",
        report.initial_val_generator,
        report.final_val_generator,
        start.elapsed().as_secs_f64(),
        a.out.display()
    );
    Ok(())
}

/// Field rollout recorded at the query times, which must sit on the step grid.
fn field_sample(
    field: &VectorFieldModel,
    x0: &Tensor,
    t_query: &[f64],
    steps: usize,
    method: OdeMethod,
) -> Result<Tensor, CliError> {
    let mut ks = Vec::with_capacity(t_query.len());
    for (i, &t) in t_query.iter().enumerate() {
        let k = (t * steps as f64).round();
        if !(0.0..=1.0).contains(&t) || (k / steps as f64 - t).abs() > 1e-9 || (i > 0 && t < t_query[i - 1]) {
            return Err(CliError::Usage(format!(
                "field sampling needs ascending times on the 1/{steps} grid, got {t}"
            )));
        }
        ks.push(k as usize);
    }
    let path = integrate(field, x0, steps, method)?;
    let (n, w, q) = (x0.rows(), steps + 1, ks.len());
    let mut out = vec![0.0; n * q * 2];
    for i in 0..n {
        for (j, &k) in ks.iter().enumerate() {
            let src = (i * w + k) * 2;
            let dst = (i * q + j) * 2;
            out[dst..dst + 2].copy_from_slice(&path.data()[src..src + 2]);
        }
    }
    Ok(Tensor::new([n, q, 2], out).expect("sizes agree"))
}

fn sample_cmd(a: SampleArgs) -> Result<(), CliError> {
    let ck = Checkpoint::load(&a.model)?;
    let prior = resolve(a.prior, &ck, prior_of)?;
    let run = match ck.meta.kind {
        ModelKind::Koopman => koopman_sample(&ck.to_koopman()?, &prior, a.n, &a.t, a.seed)?,
        ModelKind::VectorField => {
            if a.n == 0 {
                return Err(CliError::Usage("n must be positive".into()));
            }
            let field = ck.to_vector_field()?;
            let x0 = prior.sample(a.n, a.seed);
            SampleRun {
                seed: a.seed,
                n: a.n,
                t_query: a.t.clone(),
                states: field_sample(&field, &x0, &a.t, a.steps, a.method)?,
                timings: StageTimings::default(),
            }
        }
    };
    let mut w = create(&a.out)?;
    run.write_csv(&mut w)?;
    finish(w, &a.out)?;
    println!("wrote {} samples at {} time(s) -> {}", a.n, a.t.len(), a.out.display());
    Ok(())
}

fn read_points(path: &Path, t: Option<f64>) -> Result<Tensor, CliError> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_points_csv(BufReader::new(f), t)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn eval_mmd_cmd(a: EvalMmdArgs) -> Result<(), CliError> {
    let bw = parse_bandwidth(&a.bandwidth)?;
    let x = read_points(&a.a, a.t)?;
    let y = read_points(&a.b, a.t)?;
    let r = mmd(&x, &y, bw)?;
    if a.json {
        println!("{}", serde_json::to_string(&r).expect("result serializes"));
    } else {
        println!(
            "mmd {:e} (bandwidth {}, n_a {}, n_b {}{})",
            r.value,
            r.kernel_bandwidth,
            r.n_a,
            r.n_b,
            if r.degenerate { ", degenerate fallback" } else { "" }
        );
    }
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Result<(), CliError> {
    let (koop, kck) = load_koopman(&a.koopman)?;
    let (field, _) = load_field(&a.cfm)?;
    let prior = resolve(a.prior, &kck, prior_of)?;
    let target = match (a.target, &kck.meta.task) {
        (Some(t), _) => t,
        (None, Some(task)) => target_of(task).parse()?,
        (None, None) => return Err(CliError::Usage("--target is required when the checkpoint records none".into())),
    };
    let cfg = BenchConfig {
        n: a.n,
        step_grid: a.steps.clone(),
        repetitions: a.reps,
        seed: a.seed,
        bandwidth: parse_bandwidth(&a.bandwidth)?,
    };
    let table = bench_sampling(&koop, &field, &prior, &target, &cfg)?;
    println!("{:<8} {:>6} {:>14} {:>16} {:>12}", "method", "steps", "wall_ms", "samples/s", "mmd");
    for r in &table.rows {
        println!(
            "{:<8} {:>6} {:>14.3} {:>16.0} {:>12.3e}",
            r.method,
            r.steps,
            r.wall_ns as f64 / 1e6,
            r.samples_per_sec,
            r.mmd
        );
    }
    if let Some(p) = &a.out {
        let mut w = create(p)?;
        table.write_csv(&mut w).map_err(wrap_io(p))?;
        finish(w, p)?;
    }
    if let Some(p) = &a.json {
        std::fs::write(p, table.to_json()).map_err(wrap_io(p))?;
    }
    Ok(())
}

fn parse_point(s: &str) -> Result<Tensor, CliError> {
    let v: Vec<f64> = s
        .split(',')
        .map(|c| c.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("--point `{s}`: {e}")))?;
    if v.len() != 2 {
        return Err(CliError::Usage(format!("--point needs two coordinates, got `{s}`")));
    }
    Ok(Tensor::new([1, 2], v).expect("two values"))
}

fn spectrum_cmd(a: SpectrumArgs) -> Result<(), CliError> {
    let (model, ck) = load_koopman(&a.model)?;
    let x0 = match &a.point {
        Some(s) => parse_point(s)?,
        None => resolve(a.prior, &ck, prior_of)?.sample(1, a.seed),
    };
    let z0 = model.encode(&x0, &[0.0]);
    let d = spectral_decompose(model.generator(), z0.data())?;
    match &a.out {
        Some(p) => {
            let mut w = create(p)?;
            d.write_csv(&mut w, a.top)?;
            finish(w, p)?;
        }
        None => d.write_csv(std::io::stdout().lock(), a.top)?,
    }
    eprintln!(
        "p {} modes, basis condition {:.3e}, max residual {:.3e}",
        d.p(),
        d.condition,
        d.max_residual
    );
    Ok(())
}

fn traj_compare_cmd(a: TrajCompareArgs) -> Result<(), CliError> {
    let (koop, kck) = load_koopman(&a.koopman)?;
    let (field, _) = load_field(&a.cfm)?;
    let prior = resolve(a.prior, &kck, prior_of)?;
    if a.n == 0 || a.steps == 0 {
        return Err(CliError::Usage("n and steps must be positive".into()));
    }
    let x0 = prior.sample(a.n, a.seed);
    let times: Vec<f64> = (0..=a.steps).map(|k| k as f64 / a.steps as f64).collect();
    let ours = koopman_sample_from(&koop, &x0, &times)?;
    let theirs = integrate(&field, &x0, a.steps, OdeMethod::Rk4)?;
    let mut w = create(&a.out)?;
    let io = wrap_io(&a.out);
    writeln!(w, "sample_id,t,koopman_x,koopman_y,cfm_x,cfm_y").map_err(&io)?;
    let (ko, cf) = (ours.states.data(), theirs.data());
    for i in 0..a.n {
        for (k, t) in times.iter().enumerate() {
            let at = (i * times.len() + k) * 2;
            writeln!(
                w,
                "{i},{t},{:.16e},{:.16e},{:.16e},{:.16e}",
                ko[at],
                ko[at + 1],
                cf[at],
                cf[at + 1]
            )
            .map_err(&io)?;
        }
    }
    finish(w, &a.out)?;
    println!("wrote {} paired trajectories of {} steps -> {}", a.n, a.steps, a.out.display());
    Ok(())
}

fn dataset_cmd(a: DatasetArgs) -> Result<(), CliError> {
    if a.n == 0 {
        return Err(CliError::Usage("n must be positive".into()));
    }
    let points = a.dist.sample(a.n, a.seed);
    let mut w = create(&a.out)?;
    write_points_csv(&mut w, &points)?;
    finish(w, &a.out)?;
    println!("wrote {} {} points -> {}", a.n, a.dist, a.out.display());
    Ok(())
}

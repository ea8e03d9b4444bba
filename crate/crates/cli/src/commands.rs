use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use quest_core::analysis::{
    decomposition_check, default_groups, distribution_stats, fit_exponent, mean_relative_residual,
    random_delta, sensitivity_sweep, taylor_check, te_ablation, EvalConfig, ProbeNet,
};
use quest_core::calibration::{
    generate_calibration, load_calibration, save_calibration, CalibrationSet,
};
use quest_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Provenance};
use quest_core::diffusion::{
    heldout_corruptions, one_step_improvement, sample, train_teacher, Dataset, Denoiser, ToyUNet,
};
use quest_core::eval::trajectory_mse;
use quest_core::finetune::{attach_and_init, quest_pipeline, LogRow, QuantizedModel};
use quest_core::par::Exec;
use quest_core::rng::{indexed, substream_seed};
use serde::Serialize;
use serde_json::json;

use crate::config::{RunConfig, Scope};
use crate::error::{CliError, Context};

pub struct Ctx {
    pub cfg: RunConfig,
    pub allow_mismatch: bool,
    pub force: bool,
    pub exec: Exec,
}

pub const PTQ_CHECKPOINT: &str = "ptq.qckp";
pub const QUEST_CHECKPOINT: &str = "quest.qckp";

fn hex(h: u64) -> String {
    format!("{h:016x}")
}

impl Ctx {
    fn fresh(&self, path: &Path) -> Result<PathBuf, CliError> {
        if path.exists() && !self.force {
            return Err(CliError::Exists(path.to_path_buf()));
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(path.to_path_buf())
    }

    fn provenance(&self, scope: Scope, stages: &[&str]) -> Provenance {
        Provenance {
            config_hash: self.cfg.hash(scope),
            seed: self.cfg.seed,
            stages: stages.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Writes `value` as pretty JSON with the run config embedded.
    fn write_json(
        &self,
        name: &str,
        command: &str,
        value: serde_json::Value,
    ) -> Result<PathBuf, CliError> {
        let path = self.fresh(&self.cfg.out(name))?;
        let doc = json!({ "command": command, "seed": self.cfg.seed, "config": &self.cfg, "result": value });
        let mut f = BufWriter::new(File::create(&path)?);
        serde_json::to_writer_pretty(&mut f, &doc)?;
        Ok(path)
    }

    fn csv_file(&self, name: &str) -> Result<BufWriter<File>, CliError> {
        Ok(BufWriter::new(File::create(
            self.fresh(&self.cfg.out(name))?,
        )?))
    }

    fn eval(&self) -> EvalConfig {
        EvalConfig {
            num_steps: self.cfg.task.sampling_steps,
            samples: self.cfg.task.eval_samples,
            seed: self.cfg.seed,
            exec: self.exec,
        }
    }

    fn require(
        &self,
        path: &Path,
        what: &'static str,
        command: &'static str,
    ) -> Result<(), CliError> {
        if !path.exists() {
            return Err(CliError::MissingArtifact {
                what,
                path: path.to_path_buf(),
                command,
            });
        }
        Ok(())
    }

    fn check(&self, prov: &Provenance, path: &Path) -> Result<(), CliError> {
        let scope = prov
            .stages
            .last()
            .and_then(|s| Scope::of_stage(s))
            .unwrap_or(Scope::Finetuned);
        prov.check(self.cfg.hash(scope), self.allow_mismatch)
            .context(|| {
                format!(
                    "{} (pass --allow-config-mismatch to load anyway)",
                    path.display()
                )
            })
    }

    fn load_teacher(&self) -> Result<ToyUNet, CliError> {
        let path = self.cfg.teacher_path();
        self.require(&path, "teacher checkpoint", "teacher-train")?;
        match load_checkpoint(&path).context(|| format!("reading {}", path.display()))? {
            Checkpoint::Teacher { model, provenance } => {
                self.check(&provenance, &path)?;
                Ok(model)
            }
            _ => Err(CliError::WrongCheckpoint {
                path,
                expected: "teacher",
            }),
        }
    }

    fn load_calibration(&self) -> Result<CalibrationSet, CliError> {
        let path = self.cfg.calibration_path();
        self.require(&path, "calibration file", "calibrate")?;
        let side = provenance_path(&path);
        self.require(&side, "calibration provenance", "calibrate")?;
        let prov: Provenance = serde_json::from_reader(File::open(&side)?)?;
        self.check(&prov, &path)?;
        load_calibration(&path).context(|| format!("reading {}", path.display()))
    }

    fn load_quantized(
        &self,
        name: &str,
        command: &'static str,
    ) -> Result<QuantizedModel, CliError> {
        let path = self.cfg.out(name);
        self.require(&path, "quantized checkpoint", command)?;
        match load_checkpoint(&path).context(|| format!("reading {}", path.display()))? {
            Checkpoint::Quantized { model, provenance } => {
                self.check(&provenance, &path)?;
                Ok(model)
            }
            _ => Err(CliError::WrongCheckpoint {
                path,
                expected: "quantized",
            }),
        }
    }
}

fn provenance_path(calib: &Path) -> PathBuf {
    let mut s = calib.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

pub fn teacher_train(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let out = ctx.fresh(&cfg.teacher_path())?;
    let schedule = cfg.schedule()?;
    let arch = cfg.architecture();
    let data = Dataset::generate(
        cfg.task.dataset,
        cfg.task.num_images,
        arch.channels,
        arch.resolution,
        cfg.seed,
    )?;
    let tcfg = quest_core::diffusion::TeacherConfig {
        exec: ctx.exec,
        ..cfg.task.teacher.clone()
    };
    let (model, report) = train_teacher(&data, arch, &schedule, &tcfg, cfg.seed)
        .context(|| "training teacher".into())?;
    let sanity = one_step_improvement(
        &model,
        &schedule,
        &heldout_corruptions(&data, &schedule, cfg.seed),
    )?;
    let prov = ctx.provenance(Scope::Teacher, &["teacher-train"]);
    save_checkpoint(
        &Checkpoint::Teacher {
            model,
            provenance: prov,
        },
        &out,
    )?;

    let mut w = csv::Writer::from_writer(ctx.csv_file("teacher_log.csv")?);
    w.write_record(["epoch", "loss"]).map_err(core_csv)?;
    for (i, l) in report.epoch_losses.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:e}")])
            .map_err(core_csv)?;
    }
    w.flush()?;
    ctx.write_json(
        "teacher.json",
        "teacher-train",
        json!({
            "checkpoint": out,
            "config_hash": hex(cfg.hash(Scope::Teacher)),
            "epochs_run": report.epochs_run,
            "heldout_loss": report.heldout_loss,
            "one_step_improvement": sanity,
            "data_pixel_mean": data.pixel_mean(),
        }),
    )?;
    println!(
        "teacher: {} epochs, held-out loss {:.4e}, one-step improvement {:.3}",
        report.epochs_run, report.heldout_loss, sanity
    );
    Ok(())
}

fn core_csv(e: csv::Error) -> CliError {
    CliError::from(quest_core::Error::from(e))
}

pub fn calibrate(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let teacher = ctx.load_teacher()?;
    let out = ctx.fresh(&cfg.calibration_path())?;
    let side = ctx.fresh(&provenance_path(&out))?;
    let steps = cfg.calibration_steps()?;
    let set = generate_calibration(
        &teacher,
        &cfg.schedule()?,
        cfg.task.calib_per_step,
        &steps,
        cfg.task.sampling_steps,
        cfg.seed,
        ctx.exec,
    )?;
    save_calibration(&set, &out)?;
    let prov = ctx.provenance(Scope::Calibration, &["teacher-train", "calibrate"]);
    serde_json::to_writer_pretty(BufWriter::new(File::create(&side)?), &prov)?;
    ctx.write_json(
        "calibrate.json",
        "calibrate",
        json!({ "calibration": out, "config_hash": hex(prov.config_hash), "steps": steps, "per_step": set.num_per_step }),
    )?;
    println!(
        "calibration: {} steps x {} samples -> {}",
        steps.len(),
        set.num_per_step,
        out.display()
    );
    Ok(())
}

pub fn quantize(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let teacher = ctx.load_teacher()?;
    let calib = ctx.load_calibration()?;
    let out = ctx.fresh(&cfg.out(PTQ_CHECKPOINT))?;
    let schedule = cfg.schedule()?;
    let q = attach_and_init(&teacher, &calib, &cfg.quant)
        .context(|| "initializing quantizers".into())?;
    let mse = trajectory_mse(
        &teacher,
        &q,
        &schedule,
        cfg.task.sampling_steps,
        cfg.seed,
        cfg.task.eval_samples,
        ctx.exec,
    )?;
    let prov = ctx.provenance(
        Scope::Quantized,
        &["teacher-train", "calibrate", "quantize"],
    );
    let hash = prov.config_hash;
    save_checkpoint(
        &Checkpoint::Quantized {
            model: q,
            provenance: prov,
        },
        &out,
    )?;
    ctx.write_json(
        "quantize.json",
        "quantize",
        json!({ "checkpoint": out, "config_hash": hex(hash), "trajectory_mse": mse }),
    )?;
    println!(
        "ptq: trajectory MSE-to-teacher {mse:.4e} -> {}",
        out.display()
    );
    Ok(())
}

pub fn finetune(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let teacher = ctx.load_teacher()?;
    let calib = ctx.load_calibration()?;
    let out = ctx.fresh(&cfg.out(QUEST_CHECKPOINT))?;
    let (q, report) = quest_pipeline(
        &teacher,
        &calib,
        &cfg.schedule()?,
        &cfg.quant,
        &cfg.train,
        cfg.task.sampling_steps,
        cfg.task.eval_samples,
        cfg.seed,
        ctx.exec,
        &mut |_| {},
    )
    .context(|| "finetuning".into())?;
    let prov = ctx.provenance(
        Scope::Finetuned,
        &["teacher-train", "calibrate", "finetune"],
    );
    let hash = prov.config_hash;
    save_checkpoint(
        &Checkpoint::Quantized {
            model: q,
            provenance: prov,
        },
        &out,
    )?;
    LogRow::write_csv(&report.log, ctx.csv_file("finetune_log.csv")?)?;
    ctx.write_json(
        "finetune.json",
        "finetune",
        json!({
            "checkpoint": out,
            "config_hash": hex(hash),
            "trajectory_mse": {
                "ptq": report.ptq,
                "taquant": report.taquant,
                "sla_te": report.sla_te,
                "sla_a": report.sla_a,
            },
            "trainable_fraction": report.trainable_fraction,
        }),
    )?;
    println!(
        "trajectory MSE-to-teacher: ptq {:.4e}  taquant {:.4e}  +sla_te {:.4e}  +sla_a {:.4e}",
        report.ptq, report.taquant, report.sla_te, report.sla_a
    );
    Ok(())
}

pub fn sample_cmd(
    ctx: &Ctx,
    checkpoint: Option<&Path>,
    samples: Option<usize>,
) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out(QUEST_CHECKPOINT));
    ctx.require(&path, "checkpoint", "finetune")?;
    let teacher = ctx.load_teacher()?;
    let ckpt = load_checkpoint(&path).context(|| format!("reading {}", path.display()))?;
    ctx.check(ckpt.provenance(), &path)?;
    let model: &dyn Denoiser = match &ckpt {
        Checkpoint::Teacher { model, .. } => model,
        Checkpoint::Quantized { model, .. } => model,
    };
    let n = samples.unwrap_or(cfg.task.eval_samples);
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let schedule = cfg.schedule()?;
    let steps = cfg.task.sampling_steps;
    let mse = trajectory_mse(&teacher, model, &schedule, steps, cfg.seed, n, ctx.exec)?;
    let traj = sample(
        model,
        &schedule,
        steps,
        substream_seed(cfg.seed, "eval"),
        0,
        n,
    )?;
    let x0 = traj.last().expect("trajectory has a final state");

    let per = x0.len() / n;
    let mut w = csv::Writer::from_writer(ctx.csv_file(&format!("samples_{stem}.csv"))?);
    let mut header = vec!["sample".to_string()];
    header.extend((0..per).map(|i| format!("p{i}")));
    w.write_record(&header).map_err(core_csv)?;
    for (i, row) in x0.data().chunks(per).enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec).map_err(core_csv)?;
    }
    w.flush()?;
    let mean = x0.data().iter().map(|&v| v as f64).sum::<f64>() / x0.len() as f64;
    ctx.write_json(
        &format!("sample_{stem}.json"),
        "sample",
        json!({ "checkpoint": path, "samples": n, "trajectory_mse": mse, "pixel_mean": mean }),
    )?;
    println!("{stem}: {n} samples, trajectory MSE-to-teacher {mse:.4e}");
    Ok(())
}

#[derive(Serialize)]
struct DecompositionRow {
    probe_seed: u64,
    k: usize,
    lhs: f64,
    rhs: f64,
    gap: f64,
}

pub fn analyze(ctx: &Ctx, which: Analysis) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    match which {
        Analysis::Taylor => {
            let net = ProbeNet::standard(cfg.seed);
            let z = net.activation();
            let unit = random_delta(z.shape(), 1.0, &mut indexed(cfg.seed, "direction", 0));
            let norms: Vec<f64> = (0..=8)
                .map(|i| 1e-3 * 10f64.powf(i as f64 / 4.0))
                .chain([1.0])
                .collect();
            let mut reports = Vec::new();
            for &n in &norms {
                let d = quest_core::Tensor::<f64>::new(
                    z.shape(),
                    unit.data().iter().map(|v| v * n).collect(),
                )?;
                reports.push(taylor_check(&net, &z, &d)?);
            }
            let exponent = fit_exponent(&reports[..norms.len() - 1])?;
            let breakdown = mean_relative_residual(&net, 1.0, 10, cfg.seed)?;
            let mut w = csv::Writer::from_writer(ctx.csv_file("analyze_taylor.csv")?);
            w.write_record([
                "delta_norm",
                "exact_diff",
                "first_order",
                "second_order",
                "residual",
                "relative_residual",
            ])
            .map_err(core_csv)?;
            for r in &reports {
                w.write_record(
                    [
                        r.delta_norm,
                        r.exact_diff,
                        r.first_order,
                        r.second_order,
                        r.residual,
                        r.relative_residual(),
                    ]
                    .map(|v| format!("{v:e}")),
                )
                .map_err(core_csv)?;
            }
            w.flush()?;
            ctx.write_json(
                "analyze_taylor.json",
                "analyze taylor",
                json!({ "fitted_exponent": exponent, "mean_relative_residual_at_1": breakdown }),
            )?;
            println!("residual exponent {exponent:.3}; mean relative residual at |delta| = 1: {breakdown:.3}");
        }
        Analysis::Decomposition => {
            let mut rows = Vec::new();
            let mut monotone = Vec::new();
            for s in 0..5 {
                let probe_seed = cfg.seed + s;
                let net = ProbeNet::standard(probe_seed);
                let z = net.activation();
                let d = random_delta(z.shape(), 1.0, &mut indexed(probe_seed, "direction", 0));
                let mut gaps = Vec::new();
                for k in [1, 4, 16, 64] {
                    let r = decomposition_check(&net, &z, &d, k)?;
                    gaps.push(r.gap.abs());
                    rows.push(DecompositionRow {
                        probe_seed,
                        k,
                        lhs: r.lhs,
                        rhs: r.rhs,
                        gap: r.gap,
                    });
                }
                monotone.push(gaps.windows(2).all(|w| w[1] <= w[0]));
            }
            let mut w = csv::Writer::from_writer(ctx.csv_file("analyze_decomposition.csv")?);
            for r in &rows {
                w.serialize(r).map_err(core_csv)?;
            }
            w.flush()?;
            ctx.write_json(
                "analyze_decomposition.json",
                "analyze decomposition",
                json!({ "gap_non_increasing": monotone }),
            )?;
            println!(
                "gap non-increasing in K: {}/{} probe seeds",
                monotone.iter().filter(|&&m| m).count(),
                monotone.len()
            );
        }
        Analysis::Sweep => {
            let teacher = ctx.load_teacher()?;
            let calib = ctx.load_calibration()?;
            let groups = default_groups(&teacher);
            let report = sensitivity_sweep(
                &teacher,
                &calib,
                &cfg.schedule()?,
                &groups,
                &[8, 6, 4],
                &cfg.quant,
                &ctx.eval(),
            )?;
            report.write_csv(ctx.csv_file("analyze_sweep.csv")?)?;
            ctx.write_json(
                "analyze_sweep.json",
                "analyze sweep",
                json!({ "report": &report, "ranking_at_6_bits": report.ranking(6) }),
            )?;
            println!("6-bit ranking (worst first): {:?}", report.ranking(6));
        }
        Analysis::TeAblation => {
            let teacher = ctx.load_teacher()?;
            let calib = ctx.load_calibration()?;
            let r = te_ablation(
                &teacher,
                &calib,
                &cfg.schedule()?,
                &cfg.quant,
                &cfg.train,
                &ctx.eval(),
            )?;
            r.write_csv(ctx.csv_file("analyze_te_ablation.csv")?)?;
            ctx.write_json(
                "analyze_te_ablation.json",
                "analyze te-ablation",
                serde_json::to_value(&r)?,
            )?;
            println!(
                "quantized TE {:.4e}  FP TE {:.4e}  TAQuant+SLA_TE {:.4e}",
                r.quantized_te, r.fp_te, r.taquant_sla_te
            );
        }
        Analysis::Dist => {
            let calib = ctx.load_calibration()?;
            let before = ctx.load_quantized(PTQ_CHECKPOINT, "quantize")?;
            let after = ctx.load_quantized(QUEST_CHECKPOINT, "finetune")?;
            let sel = &after.selection;
            let layers: BTreeSet<String> = sel.time_embed.union(&sel.attention).cloned().collect();
            let b = distribution_stats(&before, &calib, &layers, 32, 2.0)?;
            let a = distribution_stats(&after, &calib, &layers, 32, 2.0)?;
            b.write_csv(ctx.csv_file("analyze_dist_before.csv")?)?;
            a.write_csv(ctx.csv_file("analyze_dist_after.csv")?)?;
            let summary: serde_json::Map<String, serde_json::Value> = layers
                .iter()
                .map(|l| {
                    let (x, y) = (&b.layers[l], &a.layers[l]);
                    (
                        l.clone(),
                        json!({
                            "range_before": [x.min, x.max], "range_after": [y.min, y.max],
                            "std_before": x.std, "std_after": y.std,
                        }),
                    )
                })
                .collect();
            ctx.write_json(
                "analyze_dist.json",
                "analyze dist",
                serde_json::Value::Object(summary),
            )?;
            println!("distribution statistics for {} layers", layers.len());
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Analysis {
    Taylor,
    Decomposition,
    Sweep,
    TeAblation,
    Dist,
}

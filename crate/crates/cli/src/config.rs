//! Run configuration: one TOML file with `task`, `quant`, `train` and
//! `paths` sections plus a top-level `seed`. Keys missing from the file take
//! their defaults; `--set section.key=value` overrides single keys.

use std::path::{Path, PathBuf};

use quest_core::checkpoint::config_hash;
use quest_core::diffusion::{
    make_schedule, sampling_steps, DatasetKind, NoiseSchedule, TeacherConfig, UNetConfig,
};
use quest_core::finetune::{QuantConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub dataset: DatasetKind,
    pub num_images: usize,
    pub resolution: usize,
    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Steps of the DDIM sub-schedule used for sampling and calibration.
    pub sampling_steps: usize,
    pub calib_per_step: usize,
    pub eval_samples: usize,
    pub teacher: TeacherConfig,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Blobs,
            num_images: 1024,
            resolution: 16,
            total_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.1,
            sampling_steps: 20,
            calib_per_step: 256,
            eval_samples: 64,
            teacher: TeacherConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    /// Relative artifact paths resolve against `out_dir`.
    pub teacher: PathBuf,
    pub calibration: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            teacher: "teacher.qckp".into(),
            calibration: "calibration.qcal".into(),
            out_dir: "runs".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub quant: QuantConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

/// Which sections an artifact depends on, and so which enter its hash.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Teacher,
    Calibration,
    Quantized,
    Finetuned,
}

impl Scope {
    pub fn of_stage(stage: &str) -> Option<Self> {
        Some(match stage {
            "teacher-train" => Scope::Teacher,
            "calibrate" => Scope::Calibration,
            "quantize" => Scope::Quantized,
            "finetune" => Scope::Finetuned,
            _ => return None,
        })
    }
}

/// Recursively overlays `top` onto `base`, rejecting keys `base` lacks.
fn merge(base: &mut toml::Value, top: toml::Value, at: &str) -> Result<(), CliError> {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                let path = if at.is_empty() {
                    k.clone()
                } else {
                    format!("{at}.{k}")
                };
                // the dataset kind is an enum whose variants carry different keys
                if path == "task.dataset" {
                    b.insert(k, v);
                    continue;
                }
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => return Err(CliError::Config(format!("unknown key `{path}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn parse_override(spec: &str) -> Result<toml::Value, CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut v = value;
    for part in key.trim().split('.').rev() {
        let mut t = toml::Table::new();
        t.insert(part.to_string(), v);
        v = toml::Value::Table(t);
    }
    Ok(v)
}

impl RunConfig {
    /// Defaults, then the file if given, then each override in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = toml::Value::try_from(RunConfig::default())
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read config `{}`: {e}", path.display()))
            })?;
            let top: toml::Value = toml::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, top, "")?;
        }
        for o in overrides {
            merge(&mut value, parse_override(o)?, "")?;
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for (name, b) in [
            ("quant.bits_w", self.quant.bits_w),
            ("quant.bits_a", self.quant.bits_a),
        ] {
            if !((2..=8).contains(&b) || b == 32) {
                return Err(CliError::Config(format!(
                    "{name} = {b}: must be in [2, 8] or 32 for full precision"
                )));
            }
        }
        let t = &self.task;
        if t.num_images == 0 || t.calib_per_step == 0 || t.eval_samples == 0 {
            return Err(CliError::Config("task counts must be positive".into()));
        }
        if t.sampling_steps == 0 || t.sampling_steps > t.total_steps {
            return Err(CliError::Config(format!(
                "task.sampling_steps = {} must be in [1, total_steps = {}]",
                t.sampling_steps, t.total_steps
            )));
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the sections `scope` depends on.
    pub fn hash(&self, scope: Scope) -> u64 {
        let mut parts = vec![
            format!("seed={}", self.seed),
            serde_json::to_string(&self.task).unwrap(),
        ];
        if matches!(scope, Scope::Quantized | Scope::Finetuned) {
            parts.push(serde_json::to_string(&self.quant).unwrap());
        }
        if scope == Scope::Finetuned {
            parts.push(serde_json::to_string(&self.train).unwrap());
        }
        config_hash(&parts.join("\n"))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.paths.out_dir.join(p)
        }
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.resolve(&self.paths.teacher)
    }

    pub fn calibration_path(&self) -> PathBuf {
        self.resolve(&self.paths.calibration)
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.paths.out_dir.join(name)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        Ok(make_schedule(
            self.task.total_steps,
            self.task.beta_start,
            self.task.beta_end,
        )?)
    }

    pub fn calibration_steps(&self) -> Result<Vec<usize>, CliError> {
        Ok(sampling_steps(
            self.task.total_steps,
            self.task.sampling_steps,
        )?)
    }

    pub fn architecture(&self) -> UNetConfig {
        UNetConfig {
            resolution: self.task.resolution,
            ..UNetConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_win_over_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.toml");
        std::fs::write(&f, "seed = 3\n[quant]\nbits_w = 8\n").unwrap();
        let cfg = RunConfig::load(
            Some(&f),
            &["quant.bits_w=6".into(), "paths.out_dir=elsewhere".into()],
        )
        .unwrap();
        assert_eq!((cfg.seed, cfg.quant.bits_w, cfg.quant.bits_a), (3, 6, 4));
        assert_eq!(cfg.paths.out_dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn unknown_keys_and_bad_bits_are_rejected() {
        assert!(matches!(
            RunConfig::load(None, &["quant.bitz=4".into()]),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            RunConfig::load(None, &["quant.bits_a=1".into()]),
            Err(CliError::Config(_))
        ));
        assert!(RunConfig::load(None, &["quant.bits_a=32".into()]).is_ok());
    }

    #[test]
    fn dataset_kind_can_switch_variant() {
        let cfg = RunConfig::load(
            None,
            &["task.dataset={ kind = \"constant\", value = 0.5 }".into()],
        )
        .unwrap();
        assert_eq!(cfg.task.dataset, DatasetKind::Constant { value: 0.5 });
    }

    #[test]
    fn hash_scopes_ignore_later_sections() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.lr_scales *= 2.0;
        assert_eq!(a.hash(Scope::Quantized), b.hash(Scope::Quantized));
        assert_ne!(a.hash(Scope::Finetuned), b.hash(Scope::Finetuned));
        b.paths.out_dir = "x".into();
        assert_eq!(a.hash(Scope::Teacher), b.hash(Scope::Teacher));
    }
}

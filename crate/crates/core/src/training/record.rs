use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainingConfig;
use crate::error::Result;
use crate::nets::NetKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Optimizer step after this update (1-based).
    pub step: u64,
    pub batch: usize,
    /// Inner interaction iteration, 0 for conventional training.
    pub k: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: u64,
    pub dice: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub data_seed: u64,
    pub init_seed: u64,
    pub robot_seed: Option<u64>,
}

impl RunSeeds {
    pub fn new(cfg: &TrainingConfig, robot_seed: Option<u64>) -> Self {
        Self {
            data_seed: cfg.data_seed,
            init_seed: cfg.init_seed,
            robot_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunRecord {
    pub kind: NetKind,
    pub seeds: RunSeeds,
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
    /// Step of the returned weights.
    pub best_step: Option<u64>,
    pub optimizer_steps: u64,
}

#[derive(Serialize)]
struct Summary<'a> {
    kind: NetKind,
    seeds: RunSeeds,
    optimizer_steps: u64,
    best_step: Option<u64>,
    best_dice: Option<f64>,
    first_loss: Option<f64>,
    last_loss: Option<f64>,
    validations: &'a [ValidationRecord],
}

impl TrainRunRecord {
    pub fn new(kind: NetKind, seeds: RunSeeds) -> Self {
        Self {
            kind,
            seeds,
            steps: Vec::new(),
            validations: Vec::new(),
            best_step: None,
            optimizer_steps: 0,
        }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn best_dice(&self) -> Option<f64> {
        let step = self.best_step?;
        self.validations.iter().find(|v| v.step == step).map(|v| v.dice)
    }

    /// One JSON object per optimizer step.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for s in &self.steps {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary(&self, path: impl AsRef<Path>) -> Result<()> {
        let summary = Summary {
            kind: self.kind,
            seeds: self.seeds,
            optimizer_steps: self.optimizer_steps,
            best_step: self.best_step,
            best_dice: self.best_dice(),
            first_loss: self.steps.first().map(|s| s.loss),
            last_loss: self.steps.last().map(|s| s.loss),
            validations: &self.validations,
        };
        std::fs::write(path, serde_json::to_vec_pretty(&summary)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_has_one_line_per_step() {
        let mut r = TrainRunRecord::new(
            NetKind::Auto,
            RunSeeds {
                data_seed: 1,
                init_seed: 2,
                robot_seed: None,
            },
        );
        for i in 0..3 {
            r.steps.push(StepRecord {
                step: i + 1,
                batch: i as usize,
                k: 0,
                loss: 1.0 / (i + 1) as f64,
            });
        }
        r.validations.push(ValidationRecord { step: 3, dice: 0.5 });
        r.best_step = Some(3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("steps.jsonl");
        r.write_jsonl(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let back: Vec<StepRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back, r.steps);
        r.write_summary(dir.path().join("summary.json")).unwrap();
        assert_eq!(r.best_dice(), Some(0.5));
    }
}

//! Per-epoch training metrics and their CSV serialization.

use std::io::Write;
use std::path::PathBuf;

use crate::error::{Error, Result};

/// Metrics of one training epoch. Utilization and training entropy are
/// aggregated over the epoch's soft routing; validation entropy comes from
/// hard routing on the held-out split.
#[derive(Clone, Debug)]
pub struct EpochMetrics {
    /// 1-based epoch index.
    pub epoch: usize,
    pub task_loss: f64,
    pub lb_loss: f64,
    pub total_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Mean per-expert utilization over the epoch's training routing.
    pub mu: Vec<f64>,
    pub entropy_train_bits: f64,
    pub entropy_infer_bits: f64,
}

/// Everything a training run reports.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    /// Where the final model was checkpointed, when the caller saved one.
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn final_epoch(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    /// Serialize as CSV with a fixed column order:
    /// epoch,task_loss,lb_loss,total_loss,train_acc,val_acc,
    /// mu_0..mu_{E-1},entropy_train_bits,entropy_infer_bits.
    /// Floats use shortest round-trip formatting, so identical runs produce
    /// identical bytes.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let experts = match self.epochs.first() {
            Some(m) => m.mu.len(),
            None => {
                return Err(Error::InvalidConfig { reason: "report has no epochs".into() });
            }
        };
        let mut header = String::from("epoch,task_loss,lb_loss,total_loss,train_acc,val_acc");
        for i in 0..experts {
            header.push_str(&format!(",mu_{}", i));
        }
        header.push_str(",entropy_train_bits,entropy_infer_bits\n");
        out.write_all(header.as_bytes())?;
        for m in &self.epochs {
            if m.mu.len() != experts {
                return Err(Error::DataLength { expected: experts, got: m.mu.len() });
            }
            let mut row = format!(
                "{},{},{},{},{},{}",
                m.epoch, m.task_loss, m.lb_loss, m.total_loss, m.train_acc, m.val_acc
            );
            for v in &m.mu {
                row.push_str(&format!(",{}", v));
            }
            row.push_str(&format!(",{},{}\n", m.entropy_train_bits, m.entropy_infer_bits));
            out.write_all(row.as_bytes())?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|_| Error::InvalidConfig {
            reason: "CSV serialization produced invalid UTF-8".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> TrainReport {
        TrainReport {
            epochs: vec![
                EpochMetrics {
                    epoch: 1,
                    task_loss: 1.25,
                    lb_loss: 0.03125,
                    total_loss: 1.296875,
                    train_acc: 0.5,
                    val_acc: 0.4375,
                    mu: vec![0.25, 0.3, 0.2, 0.25],
                    entropy_train_bits: 1.9,
                    entropy_infer_bits: 0.8,
                },
                EpochMetrics {
                    epoch: 2,
                    task_loss: 0.75,
                    lb_loss: 0.015625,
                    total_loss: 0.7734375,
                    train_acc: 0.75,
                    val_acc: 0.71875,
                    mu: vec![0.26, 0.24, 0.27, 0.23],
                    entropy_train_bits: 1.7,
                    entropy_infer_bits: 0.7,
                },
            ],
            checkpoint: None,
        }
    }

    #[test]
    fn csv_has_fixed_header_and_one_row_per_epoch() {
        let csv = sample_report().to_csv_string().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(
            lines[0],
            "epoch,task_loss,lb_loss,total_loss,train_acc,val_acc,mu_0,mu_1,mu_2,mu_3,entropy_train_bits,entropy_infer_bits"
        );
        assert!(lines[1].starts_with("1,1.25,0.03125,1.296875,0.5,0.4375,"));
        assert!(lines[2].starts_with("2,0.75,"));
    }

    #[test]
    fn serialization_is_reproducible() {
        let a = sample_report().to_csv_string().unwrap();
        let b = sample_report().to_csv_string().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_report_is_an_error() {
        let report = TrainReport { epochs: Vec::new(), checkpoint: None };
        assert!(report.to_csv_string().is_err());
    }
}

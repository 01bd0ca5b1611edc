//! Top-1 and class-wise accuracy, model consistency and forgetting measure.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{arg, Result};
use crate::model::ModelParams;

/// Rows evaluated per forward call.
const EVAL_CHUNK: usize = 512;

/// Accuracy of a model on a dataset. `classwise[c]` is `None` when the
/// dataset holds no sample of class `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub top1: f64,
    pub classwise: Vec<Option<f64>>,
}

impl Evaluation {
    /// Class-wise accuracies with absent classes read as zero.
    pub fn classwise_dense(&self) -> Vec<f64> {
        self.classwise.iter().map(|v| v.unwrap_or(0.0)).collect()
    }
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(params: &ModelParams, dataset: &Dataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return arg("cannot evaluate on an empty dataset");
    }
    let c = dataset.num_classes();
    let mut correct = vec![0usize; c];
    let mut seen = vec![0usize; c];
    let dim = dataset.dim();
    let labels = dataset.labels();
    for (chunk_idx, xs) in dataset.features().chunks(EVAL_CHUNK * dim).enumerate() {
        let logits = params.forward(xs)?;
        for (j, z) in logits.rows().enumerate() {
            let y = labels[chunk_idx * EVAL_CHUNK + j];
            seen[y] += 1;
            if argmax(z) == y {
                correct[y] += 1;
            }
        }
    }
    let total_correct: usize = correct.iter().sum();
    Ok(Evaluation {
        top1: total_correct as f64 / dataset.len() as f64,
        classwise: correct
            .iter()
            .zip(&seen)
            .map(|(&k, &n)| (n > 0).then(|| k as f64 / n as f64))
            .collect(),
    })
}

/// Cosine similarity between two class-wise accuracy vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Consistency {
    pub value: f64,
    /// Set when either vector is all-zero; `value` is then 0.
    pub degenerate: bool,
}

pub fn consistency(a: &[f64], b: &[f64]) -> Result<Consistency> {
    if a.len() != b.len() {
        return arg(format!(
            "accuracy vectors differ in length: {} vs {}",
            a.len(),
            b.len()
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(Consistency {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Consistency {
        value: (dot / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Consistency over the classes present in both evaluations.
pub fn evaluation_consistency(a: &Evaluation, b: &Evaluation) -> Result<Consistency> {
    if a.classwise.len() != b.classwise.len() {
        return arg("evaluations cover different class counts");
    }
    let (x, y): (Vec<f64>, Vec<f64>) = a
        .classwise
        .iter()
        .zip(&b.classwise)
        .filter_map(|(p, q)| Some(((*p)?, (*q)?)))
        .unzip();
    consistency(&x, &y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub tag: String,
    pub classwise: Vec<Option<f64>>,
    pub top1: f64,
}

/// Ordered evaluation checkpoints of one training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTrace {
    pub checkpoints: Vec<Checkpoint>,
}

impl EvalTrace {
    pub fn push(&mut self, tag: impl Into<String>, eval: &Evaluation) {
        self.checkpoints.push(Checkpoint {
            tag: tag.into(),
            classwise: eval.classwise.clone(),
            top1: eval.top1,
        });
    }

    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }
}

/// Mean over classes of (best accuracy before the last checkpoint) minus
/// (accuracy at the last checkpoint). Classes absent at the last checkpoint
/// are skipped. Negative when the final model beats every earlier one.
pub fn forgetting_measure(trace: &EvalTrace) -> Result<f64> {
    let cps = &trace.checkpoints;
    if cps.len() < 2 {
        return arg("forgetting measure needs at least two checkpoints");
    }
    let (last, history) = cps.split_last().expect("len >= 2");
    let mut total = 0.0;
    let mut classes = 0usize;
    for (c, final_acc) in last.classwise.iter().enumerate() {
        let Some(final_acc) = final_acc else { continue };
        let peak = history
            .iter()
            .filter_map(|cp| cp.classwise.get(c).copied().flatten())
            .fold(f64::NEG_INFINITY, f64::max);
        if peak.is_finite() {
            total += peak - final_acc;
            classes += 1;
        }
    }
    if classes == 0 {
        return arg("no class is present across checkpoints");
    }
    Ok(total / classes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Layer, ModelParams};

    fn constant_model(bias: Vec<f64>) -> ModelParams {
        let c = bias.len();
        ModelParams::from_layers(vec![Layer {
            inputs: 1,
            outputs: c,
            weight: vec![0.0; c],
            bias,
        }])
        .unwrap()
    }

    fn trace(rows: &[&[f64]]) -> EvalTrace {
        let mut t = EvalTrace::default();
        for (i, r) in rows.iter().enumerate() {
            t.checkpoints.push(Checkpoint {
                tag: i.to_string(),
                classwise: r.iter().map(|&v| Some(v)).collect(),
                top1: 0.0,
            });
        }
        t
    }

    #[test]
    fn always_class_zero() {
        let ds = Dataset::new("b", vec![0.0; 4], vec![0, 1, 0, 1], 1, 2).unwrap();
        let ev = evaluate(&constant_model(vec![1.0, 0.0]), &ds).unwrap();
        assert_eq!(ev.top1, 0.5);
        assert_eq!(ev.classwise, vec![Some(1.0), Some(0.0)]);
        // ties go to the lowest class
        let ev = evaluate(&constant_model(vec![0.0, 0.0]), &ds).unwrap();
        assert_eq!(ev.classwise, vec![Some(1.0), Some(0.0)]);
    }

    #[test]
    fn perfect_model_and_absent_class() {
        // logits = [x, -x, 0] so the sign of x picks class 0 or 1
        let p = ModelParams::from_layers(vec![Layer {
            inputs: 1,
            outputs: 3,
            weight: vec![1.0, -1.0, 0.0],
            bias: vec![0.0, 0.0, -10.0],
        }])
        .unwrap();
        let ds = Dataset::new("p", vec![1.0, -1.0, 2.0], vec![0, 1, 0], 1, 3).unwrap();
        let ev = evaluate(&p, &ds).unwrap();
        assert_eq!(ev.top1, 1.0);
        assert_eq!(ev.classwise, vec![Some(1.0), Some(1.0), None]);
        assert!(evaluate(&p, &Dataset::empty("e", 1, 3)).is_err());
    }

    #[test]
    fn six_sample_hand_count() {
        // logits [x, 1-x]: predicts 0 when x > 0.5
        let p = ModelParams::from_layers(vec![Layer {
            inputs: 1,
            outputs: 2,
            weight: vec![1.0, -1.0],
            bias: vec![0.0, 1.0],
        }])
        .unwrap();
        let xs = vec![0.9, 0.8, 0.1, 0.2, 0.3, 0.7];
        let ys = vec![0, 1, 1, 1, 0, 0];
        // predictions 0,0,1,1,1,0 → correct: yes,no,yes,yes,no,yes
        let ds = Dataset::new("h", xs, ys, 1, 2).unwrap();
        let ev = evaluate(&p, &ds).unwrap();
        assert!((ev.top1 - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(ev.classwise, vec![Some(2.0 / 3.0), Some(2.0 / 3.0)]);
    }

    #[test]
    fn consistency_examples() {
        assert!((consistency(&[0.3, 0.9], &[0.3, 0.9]).unwrap().value - 1.0).abs() < 1e-15);
        assert_eq!(consistency(&[1.0, 0.0], &[0.0, 1.0]).unwrap().value, 0.0);
        let v = consistency(&[1.0, 1.0], &[1.0, 0.0]).unwrap().value;
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        let z = consistency(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!(z.degenerate && z.value == 0.0);
        assert!(consistency(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn forgetting_examples() {
        assert_eq!(
            forgetting_measure(&trace(&[&[0.5, 0.7], &[0.5, 0.7], &[0.5, 0.7]])).unwrap(),
            0.0
        );
        let fm = forgetting_measure(&trace(&[&[0.9, 0.4], &[0.5, 0.8]])).unwrap();
        assert!(fm.abs() < 1e-15);
        let rising = forgetting_measure(&trace(&[&[0.1, 0.2], &[0.3, 0.2], &[0.6, 0.9]])).unwrap();
        assert!(rising <= 0.0);
        assert!(forgetting_measure(&trace(&[&[0.1]])).is_err());
    }
}

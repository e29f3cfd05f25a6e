//! Analysis instruments: cross-choice feature similarity, Kendall tau-b and
//! training-instability summaries.

use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::space::Supernet;
use crate::trainer::TrainLog;

/// Pairwise similarity of every choice's output at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub layer: usize,
    pub labels: Vec<String>,
    pub values: Vec<Vec<f32>>,
    /// Mean of each row excluding the diagonal.
    pub row_means: Vec<f32>,
    /// Gene used at every earlier layer to feed the probe.
    pub prefix_gene: usize,
}

impl SimilarityMatrix {
    pub fn from_values(layer: usize, labels: Vec<String>, values: Vec<Vec<f32>>) -> Self {
        let m = values.len();
        let row_means = values
            .iter()
            .enumerate()
            .map(|(i, row)| {
                if m < 2 {
                    return 1.0;
                }
                row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, &v)| v).sum::<f32>() / (m - 1) as f32
            })
            .collect();
        Self {
            layer,
            labels,
            values,
            row_means,
            prefix_gene: 0,
        }
    }

    /// CSV text with a header row of block labels and one labeled row per block.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["block".to_string()];
        header.extend(self.labels.iter().cloned());
        header.push("row_mean".into());
        let to_err = |e: csv::Error| Error::input(format!("cannot write similarity csv: {e}"));
        w.write_record(&header).map_err(to_err)?;
        for (i, row) in self.values.iter().enumerate() {
            let mut rec = vec![self.labels[i].clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            rec.push(self.row_means[i].to_string());
            w.write_record(&rec).map_err(to_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::input(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::input(e.to_string()))
    }
}

/// Cosine similarity per (sample, channel) feature map, averaged. Zero
/// vectors have similarity 1 with other zero vectors and 0 otherwise.
pub fn channel_cosine(a: &Tensor, b: &Tensor) -> Result<f32> {
    a.ensure_same_shape(b, "similarity operands")?;
    let s = a.shape();
    if s.n * s.c == 0 {
        return Err(Error::input("similarity of empty tensors"));
    }
    let mut total = 0f64;
    for n in 0..s.n {
        for c in 0..s.c {
            let (pa, pb) = (a.plane(n, c), b.plane(n, c));
            let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
            for (&x, &y) in pa.iter().zip(pb) {
                dot += x as f64 * y as f64;
                na += x as f64 * x as f64;
                nb += y as f64 * y as f64;
            }
            total += match (na > 0.0, nb > 0.0) {
                (true, true) => (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0),
                (false, false) => 1.0,
                _ => 0.0,
            };
        }
    }
    Ok((total / (s.n * s.c) as f64) as f32)
}

/// Similarity of all choices' outputs at `layer`, with the probe batch fed
/// through choice 0 at every earlier layer. Choices whose outputs differ in
/// shape from choice 0 are rejected.
pub fn layer_similarity(net: &Supernet, layer: usize, probe: &Tensor) -> Result<SimilarityMatrix> {
    let outputs = net.choice_outputs(layer, probe)?;
    let m = outputs.len();
    let mut values = vec![vec![0f32; m]; m];
    for i in 0..m {
        values[i][i] = 1.0;
        for j in i + 1..m {
            let v = channel_cosine(&outputs[i], &outputs[j])
                .map_err(|e| Error::input(format!("choices {i} and {j} at layer {layer}: {e}")))?;
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    let labels = net.spec.layers[layer].choices.iter().map(|c| c.label()).collect();
    Ok(SimilarityMatrix::from_values(layer, labels, values))
}

/// Kendall tau-b between two score lists, `O(n^2)`.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::input(format!("score lists differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::input("kendall tau needs at least 2 scores"));
    }
    let (mut conc, mut disc, mut tie_a, mut tie_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let da = a[i].partial_cmp(&a[j]).ok_or_else(|| Error::input("NaN score"))?;
            let db = b[i].partial_cmp(&b[j]).ok_or_else(|| Error::input("NaN score"))?;
            use std::cmp::Ordering::Equal;
            match (da, db) {
                (Equal, Equal) => {}
                (Equal, _) => tie_a += 1,
                (_, Equal) => tie_b += 1,
                _ if da == db => conc += 1,
                _ => disc += 1,
            }
        }
    }
    let denom = (((conc + disc + tie_a) as f64) * ((conc + disc + tie_b) as f64)).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((conc - disc) as f64 / denom)
}

/// Per-epoch training-accuracy spread of two logs (`a` usually with
/// stabilizers, `b` without).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstabilityReport {
    pub mean_a: Vec<f32>,
    pub std_a: Vec<f32>,
    pub mean_b: Vec<f32>,
    pub std_b: Vec<f32>,
    pub mean_diff: Vec<f32>,
    pub std_diff: Vec<f32>,
    /// Final-epoch mean accuracy of `a` exceeds that of `b`.
    pub final_mean_a_higher: bool,
    /// Final-epoch std of `a` is below that of `b`.
    pub final_std_a_lower: bool,
    /// Average over epochs of the per-epoch std.
    pub avg_std_a: f32,
    pub avg_std_b: f32,
}

pub fn instability_report(a: &TrainLog, b: &TrainLog) -> Result<InstabilityReport> {
    if a.epochs.len() != b.epochs.len() || a.epochs.is_empty() {
        return Err(Error::input(format!(
            "logs must cover the same non-zero number of epochs ({} vs {})",
            a.epochs.len(),
            b.epochs.len()
        )));
    }
    let col = |log: &TrainLog, f: fn(&crate::trainer::EpochRecord) -> f32| log.epochs.iter().map(f).collect::<Vec<_>>();
    let mean_a = col(a, |e| e.train_acc_mean);
    let std_a = col(a, |e| e.train_acc_std);
    let mean_b = col(b, |e| e.train_acc_mean);
    let std_b = col(b, |e| e.train_acc_std);
    let diff = |x: &[f32], y: &[f32]| x.iter().zip(y).map(|(p, q)| p - q).collect::<Vec<_>>();
    let avg = |x: &[f32]| x.iter().sum::<f32>() / x.len() as f32;
    let last = mean_a.len() - 1;
    Ok(InstabilityReport {
        mean_diff: diff(&mean_a, &mean_b),
        std_diff: diff(&std_a, &std_b),
        final_mean_a_higher: mean_a[last] > mean_b[last],
        final_std_a_lower: std_a[last] < std_b[last],
        avg_std_a: avg(&std_a),
        avg_std_b: avg(&std_b),
        mean_a,
        std_a,
        mean_b,
        std_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Shape;
    use crate::rng::Rng;
    use crate::space::{build_supernet, SpaceSpec};
    use crate::trainer::{EpochRecord, Strategy};

    fn brute_tau(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len();
        let sign = |x: f64| (x > 0.0) as i32 - (x < 0.0) as i32;
        let mut s = 0i64;
        let mut ta = 0i64;
        let mut tb = 0i64;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                s += (sign(a[i] - a[j]) * sign(b[i] - b[j])) as i64;
                ta += sign(a[i] - a[j]).abs() as i64;
                tb += sign(b[i] - b[j]).abs() as i64;
            }
        }
        if ta == 0 || tb == 0 {
            0.0
        } else {
            s as f64 / ((ta as f64) * (tb as f64)).sqrt()
        }
    }

    #[test]
    fn tau_anchors() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(kendall_tau(&x, &x).unwrap(), 1.0);
        assert_eq!(kendall_tau(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        let t = kendall_tau(&x, &[2.0, 1.0, 3.0, 4.0]).unwrap();
        assert!((t - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(kendall_tau(&x, &[5.0; 4]).unwrap(), 0.0);
        assert!(kendall_tau(&x, &[1.0]).is_err());
    }

    #[test]
    fn tau_matches_brute_force_with_ties() {
        let mut rng = Rng::new(0);
        for _ in 0..200 {
            let n = 2 + rng.below(30);
            let a: Vec<f64> = (0..n).map(|_| rng.below(6) as f64).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.below(6) as f64).collect();
            assert!((kendall_tau(&a, &b).unwrap() - brute_tau(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_and_identical_maps() {
        let a = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 0.0]).unwrap();
        let b = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 1.0]).unwrap();
        assert_eq!(channel_cosine(&a, &b).unwrap(), 0.0);
        assert!((channel_cosine(&a, &a).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn duplicated_block_is_fully_similar() {
        let spec = SpaceSpec::t1();
        let mut net = build_supernet(&spec, 1).unwrap();
        net.banks[1][1] = net.banks[1][0].clone();
        let probe = Tensor::rand_uniform(net.input_shape(4), 0.0, 1.0, &mut Rng::new(2));
        let sim = layer_similarity(&net, 1, &probe).unwrap();
        assert!((sim.values[0][1] - 1.0).abs() < 1e-6);
        for i in 0..3 {
            assert!((sim.values[i][i] - 1.0).abs() < 1e-6);
            for j in 0..3 {
                assert_eq!(sim.values[i][j], sim.values[j][i]);
            }
        }
        assert!(layer_similarity(&net, 4, &probe).is_err());
        let csv = sim.to_csv().unwrap();
        assert!(csv.starts_with("block,E3K3,E3K5,skip,row_mean\n"), "{csv}");
    }

    fn log(accs: &[(f32, f32)]) -> TrainLog {
        TrainLog {
            strategy: Strategy::Spos,
            els_enabled: false,
            steps: vec![],
            epochs: accs
                .iter()
                .enumerate()
                .map(|(epoch, &(m, s))| EpochRecord {
                    epoch,
                    train_loss: 0.0,
                    train_acc_mean: m,
                    train_acc_std: s,
                    val_acc_mean: 0.0,
                    val_acc_std: 0.0,
                })
                .collect(),
            update_counts: vec![],
        }
    }

    #[test]
    fn identical_logs_have_zero_difference() {
        let a = log(&[(0.5, 0.1), (0.6, 0.05)]);
        let r = instability_report(&a, &a).unwrap();
        assert!(r.mean_diff.iter().chain(&r.std_diff).all(|&d| d == 0.0));
        assert!(instability_report(&a, &log(&[(0.5, 0.1)])).is_err());
    }
}

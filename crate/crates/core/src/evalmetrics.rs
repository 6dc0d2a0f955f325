//! Agreement metrics between expert and predicted hypnograms.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::stage::{StageLabel, NUM_STAGES};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} expert labels, {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("no epochs to score")]
    Empty,
    #[error("chance agreement is 1 but accuracy is {0}")]
    DegenerateAgreement(f64),
    #[error("no stage has both positive and negative examples")]
    NoScorableClass,
}

pub type Confusion = [[u64; NUM_STAGES]; NUM_STAGES];

/// `counts[k][j]` = epochs with expert stage `k` predicted as `j`.
pub fn confusion(y_true: &[StageLabel], y_pred: &[StageLabel]) -> Result<Confusion, MetricError> {
    if y_true.len() != y_pred.len() {
        return Err(MetricError::LengthMismatch(y_true.len(), y_pred.len()));
    }
    if y_true.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut c = [[0u64; NUM_STAGES]; NUM_STAGES];
    for (t, p) in y_true.iter().zip(y_pred) {
        c[t.index()][p.index()] += 1;
    }
    Ok(c)
}

fn kappa_from(c: &Confusion) -> Result<f64, MetricError> {
    let n: u64 = c.iter().flatten().sum();
    let agree: u64 = (0..NUM_STAGES).map(|k| c[k][k]).sum();
    let chance: u128 = (0..NUM_STAGES)
        .map(|k| {
            let rows: u64 = c[k].iter().sum();
            let cols: u64 = (0..NUM_STAGES).map(|i| c[i][k]).sum();
            rows as u128 * cols as u128
        })
        .sum();
    let n2 = n as u128 * n as u128;
    let acc = agree as f64 / n as f64;
    if chance == n2 {
        return if agree == n { Ok(1.0) } else { Err(MetricError::DegenerateAgreement(acc)) };
    }
    let pe = chance as f64 / n2 as f64;
    Ok((acc - pe) / (1.0 - pe))
}

/// Cohen's kappa.
pub fn kappa(y_true: &[StageLabel], y_pred: &[StageLabel]) -> Result<f64, MetricError> {
    kappa_from(&confusion(y_true, y_pred)?)
}

/// One-vs-rest AUC via the Mann–Whitney statistic with midranks. `None`
/// when either side is empty.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            if positive[o] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Per-stage one-vs-rest AUC (`None` where unscorable) and their mean.
pub fn roc_auc_per_stage(
    y_true: &[StageLabel],
    probabilities: ArrayView2<f64>,
) -> Result<([Option<f64>; NUM_STAGES], f64), MetricError> {
    if probabilities.nrows() != y_true.len() || probabilities.ncols() != NUM_STAGES {
        return Err(MetricError::LengthMismatch(y_true.len(), probabilities.nrows()));
    }
    let mut per = [None; NUM_STAGES];
    for (k, slot) in per.iter_mut().enumerate() {
        let pos: Vec<bool> = y_true.iter().map(|s| s.index() == k).collect();
        let scores: Vec<f64> = probabilities.column(k).to_vec();
        *slot = auc_binary(&scores, &pos);
    }
    let scored: Vec<f64> = per.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(MetricError::NoScorableClass);
    }
    let macro_auc = scored.iter().sum::<f64>() / scored.len() as f64;
    Ok((per, macro_auc))
}

pub fn roc_auc_macro(y_true: &[StageLabel], probabilities: ArrayView2<f64>) -> Result<f64, MetricError> {
    roc_auc_per_stage(y_true, probabilities).map(|(_, m)| m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: Confusion,
    pub accuracy: f64,
    /// Recall against the expert labels.
    pub sensitivity: [f64; NUM_STAGES],
    pub precision: [f64; NUM_STAGES],
    pub f1: [f64; NUM_STAGES],
    /// Mean F1 over stages present in the expert labels.
    pub macro_f1: f64,
    pub kappa: f64,
    pub roc_auc_macro: Option<f64>,
    pub n_epochs: usize,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn stage_rates(c: &Confusion) -> ([f64; NUM_STAGES], [f64; NUM_STAGES], [f64; NUM_STAGES]) {
    let mut s = [0.0; NUM_STAGES];
    let mut p = [0.0; NUM_STAGES];
    let mut f = [0.0; NUM_STAGES];
    for k in 0..NUM_STAGES {
        let expert: u64 = c[k].iter().sum();
        let predicted: u64 = (0..NUM_STAGES).map(|i| c[i][k]).sum();
        s[k] = ratio(c[k][k], expert);
        p[k] = ratio(c[k][k], predicted);
        f[k] = if p[k] + s[k] == 0.0 { 0.0 } else { 2.0 * p[k] * s[k] / (p[k] + s[k]) };
    }
    (s, p, f)
}

/// Per-stage F1 and the macro F1 over stages present in `y_true`.
pub fn f1_scores(y_true: &[StageLabel], y_pred: &[StageLabel]) -> Result<([f64; NUM_STAGES], f64), MetricError> {
    let c = confusion(y_true, y_pred)?;
    let (_, _, f) = stage_rates(&c);
    Ok((f, macro_over_present(&c, &f)))
}

fn macro_over_present(c: &Confusion, f: &[f64; NUM_STAGES]) -> f64 {
    let present: Vec<usize> = (0..NUM_STAGES).filter(|&k| c[k].iter().sum::<u64>() > 0).collect();
    present.iter().map(|&k| f[k]).sum::<f64>() / present.len() as f64
}

/// All metrics. AUC is omitted when no probabilities are given or no stage
/// is scorable.
pub fn summarize(
    y_true: &[StageLabel],
    y_pred: &[StageLabel],
    probabilities: Option<ArrayView2<f64>>,
) -> Result<EvalReport, MetricError> {
    let c = confusion(y_true, y_pred)?;
    let n = y_true.len();
    let agree: u64 = (0..NUM_STAGES).map(|k| c[k][k]).sum();
    let (sensitivity, precision, f1) = stage_rates(&c);
    let kappa = kappa_from(&c)?;
    let roc_auc_macro = match probabilities {
        Some(p) => match roc_auc_macro(y_true, p) {
            Ok(a) => Some(a),
            Err(MetricError::NoScorableClass) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    Ok(EvalReport {
        confusion: c,
        accuracy: agree as f64 / n as f64,
        sensitivity,
        precision,
        macro_f1: macro_over_present(&c, &f1),
        f1,
        kappa,
        roc_auc_macro,
        n_epochs: n,
    })
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "n_epochs,accuracy,macro_f1,kappa,roc_auc_macro,\
f1_wake,f1_n1,f1_n2,f1_n3,f1_rem,sens_wake,sens_n1,sens_n2,sens_n3,sens_rem,prec_wake,prec_n1,prec_n2,prec_n3,prec_rem";

    /// One CSV row matching [`EvalReport::CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        let mut fields = vec![
            self.n_epochs.to_string(),
            format!("{:.6}", self.accuracy),
            format!("{:.6}", self.macro_f1),
            format!("{:.6}", self.kappa),
            self.roc_auc_macro.map_or(String::new(), |a| format!("{a:.6}")),
        ];
        for v in self.f1.iter().chain(&self.sensitivity).chain(&self.precision) {
            fields.push(format!("{v:.6}"));
        }
        fields.join(",")
    }

    /// Plain-text report with the confusion matrix.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "epochs       {}\naccuracy     {:.4}\nmacro F1     {:.4}\nkappa        {:.4}\n",
            self.n_epochs, self.accuracy, self.macro_f1, self.kappa
        );
        if let Some(a) = self.roc_auc_macro {
            out.push_str(&format!("ROC-AUC      {a:.4}\n"));
        }
        out.push_str("\nstage  sens    prec    F1\n");
        for s in StageLabel::ALL {
            let k = s.index();
            out.push_str(&format!(
                "{:<5}  {:.4}  {:.4}  {:.4}\n",
                s.as_str(),
                self.sensitivity[k],
                self.precision[k],
                self.f1[k]
            ));
        }
        out.push_str("\nconfusion (rows expert, columns predicted)\n      ");
        for s in StageLabel::ALL {
            out.push_str(&format!("{:>7}", s.as_str()));
        }
        out.push('\n');
        for s in StageLabel::ALL {
            out.push_str(&format!("{:<6}", s.as_str()));
            for v in self.confusion[s.index()] {
                out.push_str(&format!("{v:>7}"));
            }
            out.push('\n');
        }
        out
    }
}

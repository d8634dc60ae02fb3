//! Logistic success/failure probe with grouped, stratified k-fold
//! cross-validation.

use super::FeatureMatrix;
use crate::error::{ensure, Result};
use crate::numerics::{adamw_step, AdamWConfig, Graph, OptimState, ParamStore, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub folds: usize,
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { folds: 5, iterations: 300, lr: 0.05, weight_decay: 0.01, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeMetrics {
    /// Out-of-fold accuracy at threshold 0.5.
    pub accuracy: f64,
    /// AUC of the pooled out-of-fold scores.
    pub auc: f64,
    /// AUC of each fold whose test split holds both classes.
    pub fold_aucs: Vec<f64>,
    /// Standard error of the mean fold AUC.
    pub auc_se: f64,
    pub confusion: Confusion,
}

/// Standardized logistic regression.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticProbe {
    /// Probability of success for one row.
    pub fn predict(&self, row: &[f64]) -> f64 {
        let logit: f64 = self.bias
            + row.iter().zip(&self.mean).zip(&self.scale).zip(&self.weights).map(|(((x, m), s), w)| w * (x - m) / s).sum::<f64>();
        1.0 / (1.0 + (-logit).exp())
    }
}

/// Fits a probe on the given rows of `x` by full-batch AdamW on the mean
/// binary cross-entropy.
pub fn fit_logistic(x: &FeatureMatrix, rows: &[usize], cfg: &ProbeConfig) -> Result<LogisticProbe> {
    ensure!(!rows.is_empty(), "no training rows");
    let d = x.cols;
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for &r in rows {
        mean.iter_mut().zip(x.row(r)).for_each(|(m, v)| *m += v / n);
    }
    let mut scale = vec![0.0; d];
    for &r in rows {
        scale.iter_mut().zip(x.row(r).iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m).powi(2) / n);
    }
    scale.iter_mut().for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend(x.row(r).iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s));
    }
    let xs = Tensor::new(&[rows.len(), d], data)?;
    let labels: Vec<f64> = rows.iter().map(|&r| if x.labels[r] { 1.0 } else { 0.0 }).collect();

    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::zeros(&[d, 1]))?;
    let b = store.add("b", Tensor::zeros(&[1]))?;
    let mut opt = OptimState::new(&store);
    let adamw = AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    for _ in 0..cfg.iterations {
        let mut g = Graph::new(&store);
        let xv = g.constant(xs.clone());
        let (wv, bv) = (g.param(w), g.param(b));
        let logits = g.matmul(xv, wv)?;
        let logits = g.add(logits, bv)?;
        let loss = g.bce_logits(logits, &labels)?;
        let grads = g.backward(loss)?;
        drop(g);
        adamw_step(&mut store, &grads, &mut opt, cfg.lr, &adamw)?;
    }
    Ok(LogisticProbe { mean, scale, weights: store.get(w).data().to_vec(), bias: store.get(b).item() })
}

/// Area under the ROC curve (Mann-Whitney, ties count one half).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    ensure!(scores.len() == labels.len(), "score and label counts differ");
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    ensure!(!pos.is_empty() && !neg.is_empty(), "AUC needs both classes");
    let mut wins = 0.0;
    for p in &pos {
        for q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

/// Assigns each group to a fold, dealing successful and failed groups
/// round-robin after a seeded shuffle so folds keep both classes.
fn group_folds(x: &FeatureMatrix, folds: usize, seed: u64) -> Vec<usize> {
    let ngroups = x.groups.iter().copied().max().map_or(0, |g| g + 1);
    let mut label = vec![None; ngroups];
    for (g, &l) in x.groups.iter().zip(&x.labels) {
        label[*g] = Some(l);
    }
    let mut rng = Rng::new(seed).split(0xf01d);
    let mut fold_of = vec![0; ngroups];
    for class in [true, false] {
        let mut members: Vec<usize> = (0..ngroups).filter(|&g| label[g] == Some(class)).collect();
        rng.shuffle(&mut members);
        for (i, g) in members.into_iter().enumerate() {
            fold_of[g] = i % folds;
        }
    }
    x.groups.iter().map(|&g| fold_of[g]).collect()
}

/// Cross-validated probe metrics. Rows sharing a group id (replans of one
/// rollout) always land in the same fold.
pub fn fit_risk_probe(x: &FeatureMatrix, cfg: &ProbeConfig) -> Result<ProbeMetrics> {
    x.validate()?;
    let positives = x.labels.iter().filter(|&&l| l).count();
    ensure!(positives > 0 && positives < x.rows(), "probe needs both successes and failures");
    ensure!(cfg.folds >= 2, "need at least 2 folds");
    let fold = group_folds(x, cfg.folds, cfg.seed);
    let mut scores = vec![0.0; x.rows()];
    let mut fold_aucs = Vec::new();
    for k in 0..cfg.folds {
        let train: Vec<usize> = (0..x.rows()).filter(|&r| fold[r] != k).collect();
        let test: Vec<usize> = (0..x.rows()).filter(|&r| fold[r] == k).collect();
        if test.is_empty() {
            continue;
        }
        let train_pos = train.iter().filter(|&&r| x.labels[r]).count();
        ensure!(train_pos > 0 && train_pos < train.len(), "fold {k} training split holds a single class");
        let probe = fit_logistic(x, &train, cfg)?;
        let s: Vec<f64> = test.iter().map(|&r| probe.predict(x.row(r))).collect();
        let l: Vec<bool> = test.iter().map(|&r| x.labels[r]).collect();
        if l.iter().any(|&v| v) && l.iter().any(|&v| !v) {
            fold_aucs.push(auc(&s, &l)?);
        }
        for (&r, s) in test.iter().zip(s) {
            scores[r] = s;
        }
    }
    let mut confusion = Confusion::default();
    for (&s, &l) in scores.iter().zip(&x.labels) {
        match (s >= 0.5, l) {
            (true, true) => confusion.tp += 1,
            (true, false) => confusion.fp += 1,
            (false, false) => confusion.tn += 1,
            (false, true) => confusion.fn_ += 1,
        }
    }
    let k = fold_aucs.len() as f64;
    let auc_se = if fold_aucs.len() >= 2 {
        let m = fold_aucs.iter().sum::<f64>() / k;
        (fold_aucs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (k - 1.0)).sqrt() / k.sqrt()
    } else {
        f64::NAN
    };
    Ok(ProbeMetrics {
        accuracy: (confusion.tp + confusion.tn) as f64 / x.rows() as f64,
        auc: auc(&scores, &x.labels)?,
        fold_aucs,
        auc_se,
        confusion,
    })
}

/// Cross-validated AUCs after shuffling the success labels across groups
/// `shuffles` times: the null distribution of the probe.
pub fn permutation_null(x: &FeatureMatrix, shuffles: usize, cfg: &ProbeConfig) -> Result<Vec<f64>> {
    let ngroups = x.groups.iter().copied().max().map_or(0, |g| g + 1);
    let mut group_label = vec![false; ngroups];
    for (g, &l) in x.groups.iter().zip(&x.labels) {
        group_label[*g] = l;
    }
    let mut rng = Rng::new(cfg.seed).split(0x5u64 << 40);
    let mut out = Vec::with_capacity(shuffles);
    for i in 0..shuffles {
        let mut perm = group_label.clone();
        rng.shuffle(&mut perm);
        let mut shuffled = x.clone();
        shuffled.labels = x.groups.iter().map(|&g| perm[g]).collect();
        let c = ProbeConfig { seed: cfg.seed.wrapping_add(i as u64 + 1), ..*cfg };
        out.push(fit_risk_probe(&shuffled, &c)?.auc);
    }
    Ok(out)
}

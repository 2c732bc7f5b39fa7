//! Ridge linear probes and R².

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::SyntheticWorld;
use crate::error::{Error, Result};
use crate::linalg::lstsq_qr;
use crate::tensor::Tensor;

/// Disjoint train/test row indices with a description.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub descriptor: String,
}

impl ProbeSplit {
    pub fn new(train: Vec<usize>, test: Vec<usize>, descriptor: impl Into<String>) -> Result<Self> {
        let mut seen = vec![false; train.iter().chain(&test).max().map_or(0, |m| m + 1)];
        for &i in train.iter().chain(&test) {
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::config(format!("row {i} appears twice in the probe split")));
            }
        }
        Ok(Self {
            train,
            test,
            descriptor: descriptor.into(),
        })
    }

    /// Random holdout of `test_fraction` of `n` rows.
    pub fn random(n: usize, test_fraction: f64, seed: u64) -> Result<Self> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::config(format!("test fraction {test_fraction}")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((n as f64) * test_fraction).round() as usize;
        let mut test = idx[..n_test].to_vec();
        let mut train = idx[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        Self::new(train, test, format!("random test_fraction={test_fraction} seed={seed}"))
    }

    /// Fit on tracts outside the world's holdout box, test on those inside.
    pub fn region(world: &SyntheticWorld) -> Result<Self> {
        let (test, train): (Vec<usize>, Vec<usize>) = (0..world.n_tracts()).partition(|&t| world.tracts[t].holdout);
        if test.len() < 2 {
            return Err(Error::config("holdout box holds fewer than two tracts"));
        }
        Self::new(train, test, "region holdout")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Ridge {
    /// `1e-3 * trace(XᵀX) / dim` on the centred training design.
    Auto,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub r2_train: f64,
    pub r2_test: f64,
    pub ridge: f64,
    pub split: String,
    pub coef: Vec<f64>,
    pub intercept: f64,
}

impl ProbeResult {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + x.iter().zip(&self.coef).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn to_text(&self) -> String {
        let coef: Vec<String> = self.coef.iter().map(|c| format!("{c:e}")).collect();
        format!(
            "split = {}\nridge = {:e}\nr2_train = {}\nr2_test = {}\nintercept = {:e}\ncoef = {}\n",
            self.split,
            self.ridge,
            self.r2_train,
            self.r2_test,
            self.intercept,
            coef.join(", ")
        )
    }
}

/// `1 - SS_res / SS_tot` with `SS_tot` about the mean of `y`.
pub fn r_squared(y: &[f64], pred: &[f64]) -> Result<f64> {
    if y.len() != pred.len() {
        return Err(Error::shape(format!(
            "{} targets vs {} predictions",
            y.len(),
            pred.len()
        )));
    }
    if y.len() < 2 {
        return Err(Error::shape(format!("R² needs two values, got {}", y.len())));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ZeroVariance("target"));
    }
    let ss_res: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Closed-form ridge with an unpenalized intercept, fit on the split's train
/// rows and scored on both sides.
pub fn fit_probe(x: &Tensor, y: &[f64], split: &ProbeSplit, ridge: Ridge) -> Result<ProbeResult> {
    if x.shape().len() != 2 || x.rows() != y.len() {
        return Err(Error::shape(format!("design {:?} vs {} targets", x.shape(), y.len())));
    }
    if let Some(&m) = split.train.iter().chain(&split.test).max() {
        if m >= y.len() {
            return Err(Error::shape(format!("split row {m} beyond {} rows", y.len())));
        }
    }
    let d = x.cols();
    let n = split.train.len();
    if n < 2 {
        return Err(Error::config("probe needs at least two training rows"));
    }
    let mut mean = vec![0.0; d];
    for &i in &split.train {
        mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v / n as f64);
    }
    let ymean = split.train.iter().map(|&i| y[i]).sum::<f64>() / n as f64;
    let mut a = Vec::with_capacity((n + d) * d);
    for &i in &split.train {
        a.extend(x.row(i).iter().zip(&mean).map(|(v, m)| v - m));
    }
    let lambda = match ridge {
        Ridge::Fixed(l) if l >= 0.0 && l.is_finite() => l,
        Ridge::Fixed(l) => return Err(Error::config(format!("ridge strength {l}"))),
        Ridge::Auto => 1e-3 * a.iter().map(|v| v * v).sum::<f64>() / d.max(1) as f64,
    };
    let mut b: Vec<f64> = split.train.iter().map(|&i| y[i] - ymean).collect();
    let rows = if lambda > 0.0 {
        let s = lambda.sqrt();
        for j in 0..d {
            a.extend((0..d).map(|k| if k == j { s } else { 0.0 }));
        }
        b.extend(std::iter::repeat_n(0.0, d));
        n + d
    } else {
        n
    };
    let coef = lstsq_qr(&a, rows, d, &b).map_err(|e| match e {
        Error::Singular(m) if lambda == 0.0 => {
            Error::Singular(format!("{m} (ridge strength is 0; try a positive value)"))
        }
        e => e,
    })?;
    let intercept = ymean - coef.iter().zip(&mean).map(|(c, m)| c * m).sum::<f64>();
    let mut result = ProbeResult {
        r2_train: 0.0,
        r2_test: f64::NAN,
        ridge: lambda,
        split: split.descriptor.clone(),
        coef,
        intercept,
    };
    let score = |rows: &[usize]| -> Result<f64> {
        let t: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        let p: Vec<f64> = rows.iter().map(|&i| result.predict(x.row(i))).collect();
        r_squared(&t, &p)
    };
    let r2_train = score(&split.train)?;
    let r2_test = if split.test.len() >= 2 {
        score(&split.test)?
    } else {
        f64::NAN
    };
    result.r2_train = r2_train;
    result.r2_test = r2_test;
    Ok(result)
}

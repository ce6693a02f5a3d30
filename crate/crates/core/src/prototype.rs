//! Closed-form incremental classifier on random-projection features.
//!
//! Features `F` are lifted with a frozen Gaussian matrix, `H = phi(F W)`.
//! Every task adds to the Gram matrix `G = sum H^T H` and to per-class sums of
//! `H`; prototypes are the ridge solution `P = (G + lambda I)^-1 C`, where
//! column `c` of `C` is the mean (or sum) of `H` over class `c`. Nothing about
//! past samples is kept beyond those sums, so arrival order does not matter.

use serde::{Deserialize, Serialize};

use crate::checkpoint::NamedTensor;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_in_place, gemm, solve_spd, View};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phi {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrototypeConfig {
    /// Projection width.
    pub m: usize,
    pub phi: Phi,
    /// Divide class sums by class counts before the solve.
    pub normalize_class_means: bool,
    /// Candidate ridge values `10^k` for `k` in this inclusive range.
    pub lambda_exponents: (i32, i32),
    pub validation_fraction: f64,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        PrototypeConfig {
            m: 2000,
            phi: Phi::Relu,
            normalize_class_means: true,
            lambda_exponents: (-8, 8),
            validation_fraction: 0.2,
        }
    }
}

impl PrototypeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("prototype.m must be positive".into()));
        }
        let (lo, hi) = self.lambda_exponents;
        if lo > hi || lo < -300 || hi > 300 {
            return Err(Error::Config("prototype.lambda_exponents must be an increasing range".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("prototype.validation_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn lambda_grid(&self) -> Vec<f64> {
        (self.lambda_exponents.0..=self.lambda_exponents.1).map(|k| 10f64.powi(k)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeState {
    pub config: PrototypeConfig,
    /// `[feature_dim, M]`, fixed at init.
    w: Tensor,
    /// `M x M`, row-major, kept exactly symmetric.
    gram: Vec<f64>,
    /// Per registered class: sum of its `H` rows, length `M`.
    sums: Vec<Vec<f64>>,
    counts: Vec<usize>,
    /// External class ids in registration order.
    classes: Vec<usize>,
    pub lambda: Option<f64>,
}

impl PrototypeState {
    pub fn init_projection(seed: u64, feature_dim: usize, cfg: &PrototypeConfig) -> Result<Self> {
        cfg.validate()?;
        let w = Rng::new(seed).normal(&[feature_dim, cfg.m]);
        Self::with_projection(w, cfg)
    }

    /// State over an explicit projection matrix `[feature_dim, M]`.
    pub fn with_projection(w: Tensor, cfg: &PrototypeConfig) -> Result<Self> {
        if w.ndim() != 2 || w.cols() != cfg.m {
            return Err(Error::dim("with_projection", w.shape(), &[w.rows(), cfg.m]));
        }
        let m = cfg.m;
        Ok(PrototypeState {
            config: cfg.clone(),
            w,
            gram: vec![0.0; m * m],
            sums: Vec::new(),
            counts: Vec::new(),
            classes: Vec::new(),
            lambda: None,
        })
    }

    pub fn m(&self) -> usize {
        self.config.m
    }

    pub fn projection(&self) -> &Tensor {
        &self.w
    }

    pub fn gram(&self) -> Tensor {
        Tensor::new(&[self.m(), self.m()], self.gram.clone()).expect("square")
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Class sums as `[M, classes]`.
    pub fn sums(&self) -> Tensor {
        let k = self.classes.len();
        let m = self.m();
        let mut s = Tensor::zeros(&[m, k]);
        for (c, col) in self.sums.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                s.data_mut()[i * k + c] = *v;
            }
        }
        s
    }

    /// `H = phi(F W)`, one row per sample.
    pub fn embed(&self, features: &Tensor) -> Result<Tensor> {
        if features.ndim() != 2 || features.cols() != self.w.rows() {
            return Err(Error::dim("embed", features.shape(), self.w.shape()));
        }
        let (b, d, m) = (features.rows(), self.w.rows(), self.m());
        let mut h = vec![0.0; b * m];
        gemm(
            1.0,
            View::row_major(features.data(), b, d),
            View::row_major(self.w.data(), d, m),
            0.0,
            &mut h,
        );
        if self.config.phi == Phi::Relu {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        Tensor::new(&[b, m], h)
    }

    fn slot(&mut self, class: usize) -> usize {
        match self.classes.iter().position(|&c| c == class) {
            Some(i) => i,
            None => {
                self.classes.push(class);
                self.sums.push(vec![0.0; self.config.m]);
                self.counts.push(0);
                self.classes.len() - 1
            }
        }
    }

    /// Registers a class with no samples yet (it must be ingested before solving).
    pub fn register(&mut self, class: usize) {
        self.slot(class);
    }

    /// Adds a batch of projected features with their class ids.
    pub fn ingest(&mut self, h: &Tensor, labels: &[usize]) -> Result<()> {
        let m = self.m();
        if h.ndim() != 2 || h.cols() != m || h.rows() != labels.len() {
            return Err(Error::dim("ingest", h.shape(), &[labels.len(), m]));
        }
        if h.rows() == 0 {
            return Ok(());
        }
        accumulate_gram(&mut self.gram, h);
        for (i, &y) in labels.iter().enumerate() {
            let c = self.slot(y);
            self.counts[c] += 1;
            for (s, v) in self.sums[c].iter_mut().zip(h.row(i)) {
                *s += v;
            }
        }
        Ok(())
    }

    fn targets(&self) -> Result<Tensor> {
        let k = self.classes.len();
        let m = self.m();
        let mut c = Tensor::zeros(&[m, k]);
        for j in 0..k {
            let n = self.counts[j];
            if n == 0 {
                return Err(Error::Data(format!("class {} has no samples", self.classes[j])));
            }
            let scale = if self.config.normalize_class_means { 1.0 / n as f64 } else { 1.0 };
            for i in 0..m {
                c.data_mut()[i * k + j] = self.sums[j][i] * scale;
            }
        }
        Ok(c)
    }

    /// `P = (G + lambda I)^-1 C`, `[M, classes]`.
    pub fn compute_prototypes(&self) -> Result<Tensor> {
        let lambda = self
            .lambda
            .ok_or_else(|| Error::Numeric("ridge parameter has not been selected".into()))?;
        let c = self.targets()?;
        if c.cols() == 0 {
            return Ok(c);
        }
        let mut a = self.gram.clone();
        let m = self.m();
        for i in 0..m {
            a[i * m + i] += lambda;
        }
        solve_spd(&Tensor::new(&[m, m], a)?, &c)
    }

    /// Class ids for each row of `h` by argmax of `h P`; ties go to the earliest-registered class.
    pub fn predict(&self, p: &Tensor, h: &Tensor) -> Result<Vec<usize>> {
        let k = self.classes.len();
        if p.shape() != [self.m(), k] {
            return Err(Error::dim("predict", p.shape(), &[self.m(), k]));
        }
        let scores = h.matmul_fast(p)?;
        Ok((0..scores.rows())
            .map(|i| {
                let row = scores.row(i);
                let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                self.classes[best]
            })
            .collect())
    }

    /// Picks lambda from the grid on a stratified split of the base task,
    /// stores it and returns it.
    ///
    /// For every candidate the ridge system is fitted on the training part and
    /// scored by mean squared error of `H_val P` against one-hot targets. Ties
    /// go to the larger lambda; candidates whose shifted Gram is not positive
    /// definite in floating point are skipped.
    pub fn select_lambda(&mut self, h: &Tensor, labels: &[usize], seed: u64) -> Result<f64> {
        let m = self.m();
        if h.ndim() != 2 || h.cols() != m || h.rows() != labels.len() {
            return Err(Error::dim("select_lambda", h.shape(), &[labels.len(), m]));
        }
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::Data("lambda selection needs at least 2 classes".into()));
        }
        let mut rng = Rng::new(seed);
        let mut train = Vec::new();
        let mut val = Vec::new();
        for &c in &classes {
            let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            if idx.len() < 2 {
                return Err(Error::Data(format!(
                    "class {c} has {} base samples; stratified lambda selection needs 2",
                    idx.len()
                )));
            }
            rng.shuffle(&mut idx);
            let n_val = ((idx.len() as f64 * self.config.validation_fraction).round() as usize).clamp(1, idx.len() - 1);
            val.extend_from_slice(&idx[..n_val]);
            train.extend_from_slice(&idx[n_val..]);
        }
        train.sort_unstable();
        val.sort_unstable();

        let mut fit = PrototypeState::with_projection(self.w.clone(), &self.config)?;
        for &c in &classes {
            fit.register(c);
        }
        fit.ingest(&h.select_rows(&train)?, &train.iter().map(|&i| labels[i]).collect::<Vec<_>>())?;
        let h_val = h.select_rows(&val)?;
        let k = classes.len();
        let mut onehot = Tensor::zeros(&[val.len(), k]);
        for (r, &i) in val.iter().enumerate() {
            let c = fit.classes.iter().position(|&x| x == labels[i]).expect("registered");
            onehot.data_mut()[r * k + c] = 1.0;
        }

        let mut best: Option<(f64, f64)> = None;
        for lambda in self.config.lambda_grid() {
            fit.lambda = Some(lambda);
            let p = match fit.compute_prototypes() {
                Ok(p) => p,
                Err(Error::Factorization { .. }) => continue,
                Err(e) => return Err(e),
            };
            let pred = h_val.matmul_fast(&p)?;
            let mse = pred.sub(&onehot)?.data().iter().map(|v| v * v).sum::<f64>() / pred.len() as f64;
            if !mse.is_finite() {
                continue;
            }
            if best.is_none_or(|(_, b)| mse <= b) {
                best = Some((lambda, mse));
            }
        }
        let (lambda, _) =
            best.ok_or_else(|| Error::Numeric("no lambda on the grid gave a positive definite system".into()))?;
        self.lambda = Some(lambda);
        Ok(lambda)
    }

    pub fn to_tensors(&self) -> Result<Vec<NamedTensor>> {
        let k = self.classes.len();
        let mut sums = Vec::with_capacity(k * self.m());
        for s in &self.sums {
            sums.extend_from_slice(s);
        }
        let as_f64 = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        Ok(vec![
            NamedTensor::constant("projection", self.w.clone()),
            NamedTensor::constant("gram", self.gram()),
            NamedTensor::constant("class_sums", Tensor::new(&[k, self.m()], sums)?),
            NamedTensor::constant("class_counts", Tensor::new(&[k], as_f64(&self.counts))?),
            NamedTensor::constant("class_ids", Tensor::new(&[k], as_f64(&self.classes))?),
            NamedTensor::constant("lambda", Tensor::new(&[1], vec![self.lambda.unwrap_or(f64::NAN)])?),
        ])
    }

    pub fn from_tensors(tensors: &[NamedTensor], cfg: &PrototypeConfig) -> Result<Self> {
        let get = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .map(|t| &t.tensor)
                .ok_or_else(|| Error::Data(format!("classifier state lacks {name}")))
        };
        let mut s = PrototypeState::with_projection(get("projection")?.clone(), cfg)?;
        let gram = get("gram")?;
        if gram.shape() != [cfg.m, cfg.m] {
            return Err(Error::dim("from_tensors", gram.shape(), &[cfg.m, cfg.m]));
        }
        s.gram = gram.data().to_vec();
        let sums = get("class_sums")?;
        s.sums = sums.data().chunks(cfg.m).map(<[f64]>::to_vec).collect();
        s.counts = get("class_counts")?.data().iter().map(|&v| v as usize).collect();
        s.classes = get("class_ids")?.data().iter().map(|&v| v as usize).collect();
        if s.sums.len() != s.classes.len() || s.counts.len() != s.classes.len() {
            return Err(Error::Data("classifier state class tables disagree in length".into()));
        }
        let lambda = get("lambda")?.data()[0];
        s.lambda = lambda.is_finite().then_some(lambda);
        Ok(s)
    }
}

/// `G += H^T H`, then mirrors the lower triangle so `G` stays exactly symmetric.
fn accumulate_gram(gram: &mut [f64], h: &Tensor) {
    let (b, m) = (h.rows(), h.cols());
    let hv = View::row_major(h.data(), b, m);
    gemm(1.0, hv.t(), hv, 1.0, gram);
    for i in 0..m {
        for j in 0..i {
            let v = 0.5 * (gram[i * m + j] + gram[j * m + i]);
            gram[i * m + j] = v;
            gram[j * m + i] = v;
        }
    }
}

/// Smallest eigenvalue lower bound check: `G + shift I` admits a Cholesky factor.
pub fn is_positive_semidefinite(g: &Tensor, shift: f64) -> bool {
    let n = g.rows();
    let mut a = g.data().to_vec();
    for i in 0..n {
        a[i * n + i] += shift;
    }
    cholesky_in_place(&mut a, n).is_ok()
}

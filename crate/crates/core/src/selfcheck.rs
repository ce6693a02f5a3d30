//! Invariant battery run by the `selfcheck` command.

use crate::error::Result;
use crate::linalg::solve_spd;
use crate::losses::{center_loss, focal_loss, CenterBank};
use crate::nn::{GradStore, Layer, LayerKind, NormAxis, ParamStore};
use crate::oracle::{circular_convolve2, gauss_jordan_solve, max_relative_error, numeric_gradient};
use crate::protocol::{avg_incremental_accuracy, performance_drop};
use crate::prototype::{PrototypeConfig, PrototypeState};
use crate::rng::Rng;
use crate::spectral::{apply_global_filter, fft2, ifft2, naive_dft2, GlobalFilter};
use crate::tensor::{ComplexTensor, Tensor};

const GRAD_TOL: f64 = 1e-4;
const FD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Default)]
pub struct Options {
    /// Scales the analytic backward of this layer kind, to prove the battery catches it.
    pub corrupt_layer: Option<LayerKind>,
}

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: &'static str,
    pub total: usize,
    pub failures: Vec<String>,
}

impl GroupReport {
    fn new(name: &'static str) -> Self {
        GroupReport { name, total: 0, failures: Vec::new() }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.total += 1;
        if !ok {
            self.failures.push(what());
        }
    }

    pub fn passed(&self) -> usize {
        self.total - self.failures.len()
    }
}

pub fn run(opts: &Options) -> Result<Vec<GroupReport>> {
    Ok(vec![
        spectral_group()?,
        gradient_group(opts)?,
        loss_group()?,
        solver_group()?,
        prototype_group()?,
        metric_group(),
    ])
}

fn spectral_group() -> Result<GroupReport> {
    let mut g = GroupReport::new("spectral");
    let mut rng = Rng::new(1);
    for &(h, w) in &[(1, 1), (2, 4), (4, 4), (8, 2), (16, 16), (32, 32), (32, 8)] {
        let x = rng.normal(&[h, w]);
        let fast = fft2(&x)?;
        let slow = naive_dft2(&x);
        let err = fast.max_abs_diff(&slow);
        g.check(err <= 1e-10, || format!("fft2 vs DFT {h}x{w}: {err:e}"));
        let back = ifft2(&fast)?;
        let err = back.max_abs_diff(&ComplexTensor::from_real(&x));
        g.check(err <= 1e-10, || format!("round trip {h}x{w}: {err:e}"));
        let energy: f64 = x.data().iter().map(|v| v * v).sum();
        let spec: f64 = fast.re.iter().zip(&fast.im).map(|(r, i)| r * r + i * i).sum::<f64>() / (h * w) as f64;
        let rel = (energy - spec).abs() / energy;
        g.check(rel <= 1e-12, || format!("Parseval {h}x{w}: {rel:e}"));
    }
    for &(c, h, w) in &[(1, 4, 4), (2, 8, 8), (3, 16, 8)] {
        let shape = [c, h, GlobalFilter::half_width(w)];
        let k = GlobalFilter::new(ComplexTensor::new(&shape, rng.normal(&shape).into_data(), rng.normal(&shape).into_data())?, h, w)?;
        let x = rng.normal(&[c, h, w]);
        let y = apply_global_filter(&x, &k)?;
        let mut err: f64 = 0.0;
        for ch in 0..c {
            let n = h * w;
            let expected = circular_convolve2(&x.data()[ch * n..(ch + 1) * n], &k.spatial_kernel(ch), h, w);
            for (a, b) in y.data()[ch * n..(ch + 1) * n].iter().zip(&expected) {
                err = err.max((a - b).abs());
            }
        }
        g.check(err <= 1e-9, || format!("global filter vs circular convolution {c}x{h}x{w}: {err:e}"));
    }
    Ok(g)
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Pushes entries away from zero so kinks of relu-like layers are not straddled.
fn away_from_zero(t: Tensor) -> Tensor {
    t.map(|v| if v.abs() < 1e-2 { v + 0.05f64.copysign(v) } else { v })
}

/// Max relative error over the input gradient and every parameter gradient.
fn layer_gradient_error(layer: &Layer, store: &ParamStore, x: &Tensor, seed: u64, corrupt: bool) -> Result<f64> {
    let (y, cache) = layer.forward(store, x)?;
    let probe = Rng::new(seed).normal(y.shape());
    let mut grads = GradStore::zeros_like(store);
    let mut gx = layer.backward(store, &cache, &probe, &mut grads)?;
    if corrupt {
        gx = gx.scale(1.5);
    }
    let f = |s: &ParamStore, xp: &Tensor| layer.forward(s, xp).map(|(y, _)| dot(&y, &probe)).unwrap_or(f64::NAN);
    let mut worst = max_relative_error(&gx, &numeric_gradient(x, FD_EPS, |xp| f(store, xp)), 1e-7);
    for id in layer.params() {
        let num = numeric_gradient(store.get(id), FD_EPS, |p| {
            let mut s = store.clone();
            *s.get_mut(id) = p.clone();
            f(&s, x)
        });
        let analytic = if corrupt { grads.get(id).scale(1.5) } else { grads.get(id).clone() };
        worst = worst.max(max_relative_error(&analytic, &num, 1e-7));
    }
    Ok(worst)
}

fn gradient_group(opts: &Options) -> Result<GroupReport> {
    let mut g = GroupReport::new("gradients");
    let mut rng = Rng::new(2);
    let mut store = ParamStore::new();
    let cases: Vec<(Layer, Vec<usize>)> = vec![
        (Layer::conv(&mut store, &mut rng, "conv", 2, 3, 1), vec![2, 5, 5]),
        (Layer::conv(&mut store, &mut rng, "down", 2, 3, 2), vec![2, 6, 6]),
        (Layer::linear(&mut store, &mut rng, "fc", 4, 3), vec![5, 4]),
        (Layer::linear(&mut store, &mut rng, "mix", 3, 2), vec![3, 4, 4]),
        (Layer::Relu, vec![3, 4]),
        (Layer::Gelu, vec![3, 4]),
        (Layer::layernorm(&mut store, "ln", 5, NormAxis::Last), vec![3, 5]),
        (Layer::layernorm(&mut store, "lnc", 3, NormAxis::Channel), vec![3, 4, 4]),
        (Layer::layernorm(&mut store, "lns", 3, NormAxis::Sample), vec![3, 4, 4]),
        (Layer::global_filter(&mut store, &mut rng, "gf", 2, 4, 4, 0.5), vec![2, 4, 4]),
        (Layer::global_filter(&mut store, &mut rng, "gfr", 1, 4, 8, 0.5), vec![1, 4, 8]),
        (Layer::scale_shift(&mut store, "ss"), vec![2, 3, 3]),
        (Layer::AvgPool, vec![3, 4, 4]),
    ];
    // Perturb the deterministic initial values so no parameter sits at a special point.
    for id in store.ids().collect::<Vec<_>>() {
        let noise = rng.normal(store.get(id).shape()).scale(0.1);
        let v = store.get(id).add(&noise)?;
        *store.get_mut(id) = v;
    }
    for (i, (layer, shape)) in cases.iter().enumerate() {
        let x = away_from_zero(rng.normal(shape));
        let corrupt = opts.corrupt_layer == Some(layer.kind());
        let err = layer_gradient_error(layer, &store, &x, 100 + i as u64, corrupt)?;
        g.check(err <= GRAD_TOL, || format!("layer {} {:?}: rel err {err:e}", layer.kind(), shape));
    }
    Ok(g)
}

fn cross_entropy(logits: &Tensor, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

fn loss_group() -> Result<GroupReport> {
    let mut g = GroupReport::new("losses");
    let mut rng = Rng::new(3);
    let labels = [0usize, 2, 1, 2];
    for gamma in [0.0, 0.5, 2.0] {
        let logits = rng.normal(&[4, 3]);
        let (_, grad) = focal_loss(&logits, &labels, gamma)?;
        let num = numeric_gradient(&logits, FD_EPS, |z| focal_loss(z, &labels, gamma).map(|r| r.0).unwrap_or(f64::NAN));
        let err = max_relative_error(&grad, &num, 1e-7);
        g.check(err <= GRAD_TOL, || format!("focal gamma={gamma}: rel err {err:e}"));
    }
    let logits = rng.normal(&[4, 3]).scale(3.0);
    let diff = (focal_loss(&logits, &labels, 0.0)?.0 - cross_entropy(&logits, &labels)).abs();
    g.check(diff <= 1e-12, || format!("focal at gamma=0 vs cross-entropy: {diff:e}"));

    let mut bank = CenterBank::new(3, 5, 0.5)?;
    bank.centers = rng.normal(&[3, 5]);
    let features = rng.normal(&[4, 5]);
    let (_, grad) = center_loss(&features, &labels, &bank)?;
    let num = numeric_gradient(&features, FD_EPS, |f| center_loss(f, &labels, &bank).map(|r| r.0).unwrap_or(f64::NAN));
    let err = max_relative_error(&grad, &num, 1e-7);
    g.check(err <= GRAD_TOL, || format!("center loss: rel err {err:e}"));
    Ok(g)
}

fn solver_group() -> Result<GroupReport> {
    let mut g = GroupReport::new("solver");
    let mut rng = Rng::new(4);
    for n in [1, 5, 33, 80] {
        let a = rng.normal(&[n, n]);
        let spd = a.transpose()?.matmul(&a)?.add(&Tensor::eye(n).scale(0.5))?;
        let b = rng.normal(&[n, 3]);
        let x = solve_spd(&spd, &b)?;
        let oracle = gauss_jordan_solve(&spd, &b)?;
        let err = x.max_abs_diff(&oracle) / oracle.max_abs().max(1.0);
        g.check(err <= 1e-8, || format!("cholesky vs Gauss-Jordan n={n}: {err:e}"));
        let resid = spd.matmul(&x)?.max_abs_diff(&b);
        g.check(resid <= 1e-8, || format!("residual n={n}: {resid:e}"));
    }
    Ok(g)
}

fn prototype_group() -> Result<GroupReport> {
    let mut g = GroupReport::new("prototype");
    let cfg = PrototypeConfig { m: 64, ..PrototypeConfig::default() };
    let mut rng = Rng::new(5);
    let f = rng.normal(&[30, 6]);
    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let mut a = PrototypeState::init_projection(6, 6, &cfg)?;
    a.lambda = Some(0.1);
    let mut b = a.clone();
    let h = a.embed(&f)?;
    a.ingest(&h, &labels)?;
    let perm = rng.permutation(30);
    for &c in &[0, 1, 2] {
        b.register(c);
    }
    for chunk in perm.chunks(7) {
        let rows = h.select_rows(chunk)?;
        b.ingest(&rows, &chunk.iter().map(|&i| labels[i]).collect::<Vec<_>>())?;
    }
    let gram_err = a.gram().max_abs_diff(&b.gram());
    g.check(gram_err <= 1e-9, || format!("incremental vs batch Gram: {gram_err:e}"));
    let sum_err = a.sums().max_abs_diff(&b.sums());
    g.check(sum_err <= 1e-10, || format!("class sums under reordering: {sum_err:e}"));
    let (pa, pb) = (a.compute_prototypes()?, b.compute_prototypes()?);
    let p_err = pa.max_abs_diff(&pb);
    g.check(p_err <= 1e-10, || format!("prototypes under reordering: {p_err:e}"));
    let same = a.predict(&pa, &h)? == b.predict(&pb, &h)?;
    g.check(same, || "predictions differ under reordering".into());
    let gram = a.gram();
    g.check(gram == gram.transpose()?, || "Gram matrix not exactly symmetric".into());
    Ok(g)
}

fn metric_group() -> GroupReport {
    let mut g = GroupReport::new("metrics");
    let one_way = [94.54, 80.21, 84.10, 85.08, 78.98, 81.93, 83.60];
    let avg = avg_incremental_accuracy(&one_way);
    g.check((avg - 84.06).abs() <= 0.005, || format!("average incremental accuracy {avg}"));
    let pd = performance_drop(&one_way);
    g.check((pd - 10.94).abs() <= 0.001, || format!("performance drop {pd}"));
    let one_step = [90.54, 88.65];
    let avg = avg_incremental_accuracy(&one_step);
    g.check((avg - 89.595).abs() <= 0.005, || format!("one-step average {avg}"));
    let pd = performance_drop(&one_step);
    g.check((pd - 1.89).abs() <= 0.001, || format!("one-step drop {pd}"));
    g
}

//! Randomized finite-difference checks of every differentiable operation
//! and of the end-to-end losses.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::error::Result;
use crate::maml::MamlModel;
use crate::metatask::reconstruction_mse;
use crate::models::{Bound, Decoder, DecoderVariant, Encoder, EncoderSpec, ParamSet};
use crate::protonet::{prototypical_loss, DistanceMetric, LossReduction};
use crate::rng::{self, Rng, Stream};
use crate::tensor::{grad_check, GradCheckReport, Tape, Tensor, Var};

pub const SUITE_TOL: f64 = 1e-4;
pub const STEP: f64 = 1e-6;
/// Fresh draws allowed for a case whose only failures sit on a kink.
pub const MAX_REDRAWS: usize = 8;

pub const CHECKS: &[&str] = &[
    "add", "sub", "mul", "scale", "neg", "add_scalar", "matmul.lhs", "matmul.rhs", "add_row_bias.x",
    "add_row_bias.bias", "conv2d.x", "conv2d.weight", "conv2d.bias", "conv_transpose2d.x",
    "conv_transpose2d.weight", "conv_transpose2d.bias", "max_pool2d", "relu", "sigmoid", "reshape",
    "sum", "mean", "exp", "log", "square", "sqrt", "sq_dist.lhs", "sq_dist.rhs", "log_softmax",
    "select_rows", "pick", "protonet.episode", "autoencoder.loss", "maml.query",
];

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub check: &'static str,
    pub case: usize,
    /// Earlier draws of this case discarded because a kink lay within the step.
    pub redraws: usize,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug, Default)]
pub struct SuiteSummary {
    pub results: Vec<CaseResult>,
}

impl SuiteSummary {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.report.passed)
    }

    pub fn failures(&self) -> Vec<&CaseResult> {
        self.results.iter().filter(|r| !r.report.passed).collect()
    }

    pub fn redraws(&self) -> usize {
        self.results.iter().map(|r| r.redraws).sum()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.results.iter().map(|r| r.report.max_rel_err).fold(0.0, f64::max)
    }

    /// Cases and worst relative error per check.
    pub fn per_check(&self) -> BTreeMap<&'static str, (usize, f64)> {
        let mut out = BTreeMap::new();
        for r in &self.results {
            let e: &mut (usize, f64) = out.entry(r.check).or_default();
            e.0 += 1;
            e.1 = e.1.max(r.report.max_rel_err);
        }
        out
    }
}

fn uniform(r: &mut Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Values bounded away from zero, for kinked ops.
fn away_from_zero(r: &mut Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(0.05..1.0);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn dim(r: &mut Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

/// `sum(y * w)` with fixed random `w`, so every output element matters.
fn weighted<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, w: &Tensor<f64>) -> Result<Var<'t, f64>> {
    y.mul(tape.constant(w.clone()))?.sum()
}

fn check<F>(f: F, point: &Tensor<f64>) -> Result<GradCheckReport>
where
    F: for<'t> FnMut(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    grad_check(f, point, STEP, SUITE_TOL)
}

fn unary(r: &mut Rng, point: Tensor<f64>, op: for<'t> fn(Var<'t, f64>) -> Result<Var<'t, f64>>) -> Result<GradCheckReport> {
    let probe = {
        let tape = Tape::new();
        let y = op(tape.constant(point.clone()))?;
        y.shape()
    };
    let w = uniform(r, probe, -1.0, 1.0);
    check(move |t, x| weighted(t, op(x)?, &w), &point)
}

struct ConvCase {
    x: Tensor<f64>,
    w: Tensor<f64>,
    b: Tensor<f64>,
    stride: usize,
    pad: usize,
    out_pad: usize,
    transposed: bool,
}

impl ConvCase {
    fn draw(r: &mut Rng, transposed: bool) -> Self {
        let (batch, cin, cout) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3));
        let k = dim(r, 1, 3);
        let stride = dim(r, 1, 2);
        let pad = if k >= 3 { dim(r, 0, 1) } else { 0 };
        let (h, w) = if transposed { (dim(r, 2, 4), dim(r, 2, 4)) } else { (dim(r, 3, 6), dim(r, 3, 6)) };
        let out_pad = if transposed { dim(r, 0, stride - 1) } else { 0 };
        let wshape = if transposed { vec![cin, cout, k, k] } else { vec![cout, cin, k, k] };
        ConvCase {
            x: uniform(r, vec![batch, cin, h, w], -1.0, 1.0),
            w: uniform(r, wshape, -1.0, 1.0),
            b: uniform(r, vec![cout], -1.0, 1.0),
            stride,
            pad,
            out_pad,
            transposed,
        }
    }

    fn apply<'t>(&self, x: Var<'t, f64>, w: Var<'t, f64>, b: Var<'t, f64>) -> Result<Var<'t, f64>> {
        if self.transposed {
            x.conv_transpose2d(w, b, self.stride, self.pad, self.out_pad)
        } else {
            x.conv2d(w, b, self.stride, self.pad)
        }
    }

    fn run(self, r: &mut Rng, wrt: usize) -> Result<GradCheckReport> {
        let out_shape = {
            let tape = Tape::new();
            let c = |t: &Tensor<f64>| tape.constant(t.clone());
            self.apply(c(&self.x), c(&self.w), c(&self.b))?.shape()
        };
        let wts = uniform(r, out_shape, -1.0, 1.0);
        let point = [&self.x, &self.w, &self.b][wrt].clone();
        check(
            move |t, v| {
                let c = |x: &Tensor<f64>| t.constant(x.clone());
                let (x, w, b) = match wrt {
                    0 => (v, c(&self.w), c(&self.b)),
                    1 => (c(&self.x), v, c(&self.b)),
                    _ => (c(&self.x), c(&self.w), v),
                };
                weighted(t, self.apply(x, w, b)?, &wts)
            },
            &point,
        )
    }
}

fn tiny_spec(r: &mut Rng) -> EncoderSpec {
    EncoderSpec {
        in_channels: dim(r, 1, 2),
        height: 6,
        width: 6,
        hidden: dim(r, 2, 3),
        blocks: 2,
    }
}

/// Zero-initialized biases put whole feature maps exactly on the relu kink;
/// small random offsets move the check to a generic point.
fn jitter_biases(ps: &mut ParamSet<f64>, r: &mut Rng) {
    let biases: Vec<usize> = ps.names().iter().enumerate().filter(|(_, n)| n.ends_with(".bias")).map(|(i, _)| i).collect();
    for i in biases {
        for v in ps.tensors_mut()[i].data_mut() {
            *v += r.random_range(-0.1..0.1);
        }
    }
}

/// Bound set where entry `i` is `v` and every other tensor is a constant.
fn bind_with<'t>(tape: &'t Tape<f64>, ps: &ParamSet<f64>, i: usize, v: Var<'t, f64>) -> Bound<'t, f64> {
    Bound::from_vars(
        ps.tensors()
            .iter()
            .enumerate()
            .map(|(j, t)| if j == i { v } else { tape.constant(t.clone()) })
            .collect(),
    )
}

fn run_one(name: &str, r: &mut Rng, case: usize) -> Result<GradCheckReport> {
    let seed = r.random::<u64>();
    let (m, n) = (dim(r, 1, 4), dim(r, 1, 4));
    match name {
        "add" | "sub" | "mul" => {
            let a = uniform(r, vec![m, n], -1.0, 1.0);
            let b = uniform(r, vec![m, n], -1.0, 1.0);
            let w = uniform(r, vec![m, n], -1.0, 1.0);
            let which = name.to_string();
            check(
                move |t, x| {
                    let b = t.constant(b.clone());
                    let y = match which.as_str() {
                        "add" => x.add(b)?,
                        "sub" => b.sub(x)?,
                        _ => x.mul(b)?,
                    };
                    weighted(t, y, &w)
                },
                &a,
            )
        }
        "scale" => {
            let s = r.random_range(-2.0..2.0);
            let x = uniform(r, vec![m, n], -1.0, 1.0);
            let w = uniform(r, vec![m, n], -1.0, 1.0);
            check(move |t, x| weighted(t, x.scale(s)?, &w), &x)
        }
        "add_scalar" => {
            let s = r.random_range(-2.0..2.0);
            let x = uniform(r, vec![m, n], -1.0, 1.0);
            let w = uniform(r, vec![m, n], -1.0, 1.0);
            check(move |t, x| weighted(t, x.add_scalar(s)?.square()?, &w), &x)
        }
        "neg" => unary(r, uniform(&mut rng::indexed(seed, Stream::Diagnostics, 0), vec![m, n], -1.0, 1.0), |x| x.neg()),
        "matmul.lhs" | "matmul.rhs" => {
            let k = dim(r, 1, 4);
            let a = uniform(r, vec![m, k], -1.0, 1.0);
            let b = uniform(r, vec![k, n], -1.0, 1.0);
            let w = uniform(r, vec![m, n], -1.0, 1.0);
            if name == "matmul.lhs" {
                check(move |t, x| weighted(t, x.matmul(t.constant(b.clone()))?, &w), &a)
            } else {
                check(move |t, x| weighted(t, t.constant(a.clone()).matmul(x)?, &w), &b)
            }
        }
        "add_row_bias.x" | "add_row_bias.bias" => {
            let x = uniform(r, vec![m, n], -1.0, 1.0);
            let b = uniform(r, vec![n], -1.0, 1.0);
            let w = uniform(r, vec![m, n], -1.0, 1.0);
            if name.ends_with(".x") {
                check(move |t, v| weighted(t, v.add_row_bias(t.constant(b.clone()))?, &w), &x)
            } else {
                check(move |t, v| weighted(t, t.constant(x.clone()).add_row_bias(v)?, &w), &b)
            }
        }
        "conv2d.x" | "conv2d.weight" | "conv2d.bias" | "conv_transpose2d.x" | "conv_transpose2d.weight"
        | "conv_transpose2d.bias" => {
            let transposed = name.starts_with("conv_transpose2d");
            let wrt = match name.rsplit('.').next() {
                Some("x") => 0,
                Some("weight") => 1,
                _ => 2,
            };
            ConvCase::draw(r, transposed).run(r, wrt)
        }
        "max_pool2d" => {
            let (k, s) = if r.random_bool(0.5) { (2, 2) } else { (3, 1) };
            let shape = vec![dim(r, 1, 2), dim(r, 1, 2), dim(r, 3, 6), dim(r, 3, 6)];
            let numel: usize = shape.iter().product();
            // distinct values spaced well beyond the finite-difference step
            let mut vals: Vec<f64> = (0..numel).map(|i| i as f64 * 0.01).collect();
            for i in (1..numel).rev() {
                vals.swap(i, r.random_range(0..=i));
            }
            let x = Tensor::new(shape, vals)?;
            let out = {
                let tape = Tape::new();
                tape.constant(x.clone()).max_pool2d(k, s)?.shape()
            };
            let w = uniform(r, out, -1.0, 1.0);
            check(move |t, v| weighted(t, v.max_pool2d(k, s)?, &w), &x)
        }
        "relu" => unary(r, away_from_zero(&mut rng::indexed(seed, Stream::Diagnostics, 0), vec![m, n]), |x| x.relu()),
        "sigmoid" => unary(r, uniform(&mut rng::indexed(seed, Stream::Diagnostics, 0), vec![m, n], -3.0, 3.0), |x| x.sigmoid()),
        "reshape" => {
            let x = uniform(r, vec![m, n], -1.0, 1.0);
            let w = uniform(r, vec![n * m], -1.0, 1.0);
            check(move |t, v| weighted(t, v.reshape(vec![n * m])?, &w), &x)
        }
        "sum" => {
            let x = uniform(r, vec![m, n], -1.0, 1.0);
            check(|_, v| v.square()?.sum(), &x)
        }
        "mean" => {
            let x = uniform(r, vec![m, n], -1.0, 1.0);
            check(|_, v| v.square()?.mean(), &x)
        }
        "exp" => unary(r, uniform(&mut rng::indexed(seed, Stream::Diagnostics, 0), vec![m, n], -2.0, 2.0), |x| x.exp()),
        "log" => unary(r, uniform(&mut rng::indexed(seed, Stream::Diagnostics, 0), vec![m, n], 0.2, 3.0), |x| x.log()),
        "square" => unary(r, uniform(&mut rng::indexed(seed, Stream::Diagnostics, 0), vec![m, n], -2.0, 2.0), |x| x.square()),
        "sqrt" => unary(r, uniform(&mut rng::indexed(seed, Stream::Diagnostics, 0), vec![m, n], 0.2, 3.0), |x| x.sqrt()),
        "sq_dist.lhs" | "sq_dist.rhs" => {
            let e = dim(r, 1, 5);
            let a = uniform(r, vec![m, e], -1.0, 1.0);
            let b = uniform(r, vec![n, e], -1.0, 1.0);
            let w = uniform(r, vec![m, n], -1.0, 1.0);
            if name.ends_with("lhs") {
                check(move |t, v| weighted(t, v.sq_dist(t.constant(b.clone()))?, &w), &a)
            } else {
                check(move |t, v| weighted(t, t.constant(a.clone()).sq_dist(v)?, &w), &b)
            }
        }
        "log_softmax" => unary(r, uniform(&mut rng::indexed(seed, Stream::Diagnostics, 0), vec![m, n + 1], -3.0, 3.0), |x| x.log_softmax()),
        "select_rows" => {
            let x = uniform(r, vec![m, n], -1.0, 1.0);
            let idx: Vec<usize> = (0..dim(r, 1, 6)).map(|_| r.random_range(0..m)).collect();
            let w = uniform(r, vec![idx.len(), n], -1.0, 1.0);
            check(move |t, v| weighted(t, v.select_rows(&idx)?, &w), &x)
        }
        "pick" => {
            let x = uniform(r, vec![m, n], -1.0, 1.0);
            let cols: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
            let w = uniform(r, vec![m], -1.0, 1.0);
            check(move |t, v| weighted(t, v.pick(&cols)?, &w), &x)
        }
        "protonet.episode" => {
            let spec = tiny_spec(r);
            let enc = Encoder::<f64>::init(spec.clone(), &mut rng::indexed(seed, Stream::Encoder, case as u64))?;
            let imgs = uniform(r, vec![4, spec.in_channels, 6, 6], 0.0, 1.0);
            let metric = if r.random_bool(0.5) { DistanceMetric::Squared } else { DistanceMetric::Euclidean };
            let mut ps = enc.params().clone();
            jitter_biases(&mut ps, r);
            let i = r.random_range(0..ps.len());
            let point = ps.tensors()[i].clone();
            check(
                move |t, v| {
                    let p = bind_with(t, &ps, i, v);
                    let emb = enc.forward(&p, t.constant(imgs.clone()))?;
                    // support rows 0, 1; query rows 2, 3
                    let s = emb.select_rows(&[0, 1])?;
                    let q = emb.select_rows(&[2, 3])?;
                    Ok(prototypical_loss(s, &[0, 1], q, &[1, 0], 2, metric, LossReduction::Sum)?.task_loss)
                },
                &point,
            )
        }
        "autoencoder.loss" => {
            let spec = tiny_spec(r);
            let enc = Encoder::<f64>::init(spec.clone(), &mut rng::indexed(seed, Stream::Encoder, case as u64))?;
            let variant = if r.random_bool(0.5) { DecoderVariant::Shallow } else { DecoderVariant::Deep };
            let dec = Decoder::<f64>::init(variant, spec.clone(), &mut rng::indexed(seed, Stream::Decoder, case as u64))?;
            let imgs = uniform(r, vec![3, spec.in_channels, 6, 6], 0.0, 1.0);
            let mut all = enc.params().chain(dec.params());
            jitter_biases(&mut all, r);
            let i = r.random_range(0..all.len());
            let ne = enc.params().len();
            let point = all.tensors()[i].clone();
            check(
                move |t, v| {
                    let p = bind_with(t, &all, i, v);
                    let pe = Bound::from_vars(p.vars()[..ne].to_vec());
                    let pd = Bound::from_vars(p.vars()[ne..].to_vec());
                    let x = t.constant(imgs.clone());
                    let recon = dec.forward(&pd, enc.forward(&pe, x)?)?;
                    reconstruction_mse(recon, x)
                },
                &point,
            )
        }
        "maml.query" => {
            let spec = tiny_spec(r);
            let enc = Encoder::<f64>::init(spec.clone(), &mut rng::indexed(seed, Stream::Encoder, case as u64))?;
            let model = MamlModel::new(enc, 3, seed);
            let mut all = model.params();
            jitter_biases(&mut all, r);
            let imgs = uniform(r, vec![3, spec.in_channels, 6, 6], 0.0, 1.0);
            let i = r.random_range(0..all.len());
            let point = all.tensors()[i].clone();
            check(
                move |t, v| {
                    let p = bind_with(t, &all, i, v);
                    Ok(model.loss(&p, t.constant(imgs.clone()), &[2, 0, 1], LossReduction::Mean)?.1)
                },
                &point,
            )
        }
        other => Err(crate::Error::InvalidArgument(format!("unknown gradient check {other:?}"))),
    }
}

/// Runs `cases` random instances of every check in [`CHECKS`]. A draw that
/// fails only where a relu or max-pool kink lies within the step is
/// replaced by a fresh one; any other failure is kept.
pub fn run_suite(cases: usize, seed: u64) -> Result<SuiteSummary> {
    let mut results = Vec::with_capacity(cases * CHECKS.len());
    for (ci, &name) in CHECKS.iter().enumerate() {
        for case in 0..cases {
            let mut redraws = 0;
            let report = loop {
                let id = ((ci as u64) << 40) | ((redraws as u64) << 32) | case as u64;
                let report = run_one(name, &mut rng::indexed(seed, Stream::Diagnostics, id), case)?;
                if !report.failed_at_kinks_only() || redraws == MAX_REDRAWS {
                    break report;
                }
                redraws += 1;
            };
            results.push(CaseResult { check: name, case, redraws, report });
        }
    }
    Ok(SuiteSummary { results })
}

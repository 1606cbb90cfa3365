//! Finite-difference checks of the training losses and the full batch
//! objective on small random problems.
//!
//! Each check draws its inputs from a seed, compares the analytic gradient
//! with central differences and reports the worst relative error. The
//! full-objective check binds every model parameter to a single flat leaf
//! and probes it along one direction per parameter tensor; the transfer MLP
//! reads the weak head as a constant, exactly as training does.

use serde::{Deserialize, Serialize};

use crate::bags::build_bags;
use crate::diffcore::{check_flat, gradcheck, Graph, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask};
use crate::heads::{Model, ModelConfig};
use crate::losses::{mil_loss, pixel_loss, LossConfig, SampleKind};
use crate::rng::{Draw, Rng};
use crate::trainer::{batch_objective, flatten_model, ModelVars, Prepared, TrainConfig, TrainMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub seeds: u64,
    pub eps: f64,
    /// Side of the square patches.
    pub patch: usize,
    pub tolerance: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seeds: 20,
            eps: 1e-6,
            patch: 16,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub seeds: u64,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn random_box(rng: &mut Rng, size: usize) -> BBox {
    let w = 2 + rng.index(size - 4);
    let h = 2 + rng.index(size - 4);
    let x = 1 + rng.index(size - w - 1);
    let y = 1 + rng.index(size - h - 1);
    BBox::new(x as i64, y as i64, w as i64, h as i64).expect("positive extents")
}

fn random_mask(rng: &mut Rng, size: usize) -> BinaryMask {
    let mut m = BinaryMask::new(size, size);
    for r in 0..size {
        for c in 0..size {
            m.set(r, c, rng.uniform(0.0, 1.0) < 0.4);
        }
    }
    m
}

fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).expect("length matches shape")
}

/// MIL loss composed with a sigmoid, on random logits and a random box.
pub fn mil_check(seed: u64, eps: f64, size: usize) -> Result<f64> {
    let mut rng = Rng::child(seed, &[1]);
    let bags = build_bags(&random_box(&mut rng, size), size, size)?;
    let x = random_tensor(&mut rng, &[size, size], 1.5);
    gradcheck(
        |g, x| {
            let s = g.sigmoid(x);
            mil_loss(g, s, &bags, &LossConfig::default())
        },
        &x,
        eps,
    )
}

/// Pixel loss on the sigmoids of two random logit maps and a random mask.
pub fn pixel_check(seed: u64, eps: f64, size: usize) -> Result<f64> {
    let mut rng = Rng::child(seed, &[2]);
    let mask = random_mask(&mut rng, size);
    let x = random_tensor(&mut rng, &[2, size, size], 1.5);
    gradcheck(
        |g, x| {
            let a = g.slice(x, 0, vec![size, size])?;
            let t = g.slice(x, size * size, vec![size, size])?;
            let (sa, st) = (g.sigmoid(a), g.sigmoid(t));
            pixel_loss(g, &mask, sa, st, &LossConfig::default())
        },
        &x,
        eps,
    )
}

fn objective_problem(seed: u64, size: usize) -> Result<(Model, Vec<Prepared>, TrainConfig)> {
    let cfg = TrainConfig {
        mode: TrainMode::Joint,
        model: ModelConfig {
            widths: [2, 3, 3, 2],
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut rng = Rng::child(seed, &[3]);
    let mut model = Model::init(cfg.model.clone(), seed);
    // The second MLP layer starts at zero; randomize it so the transferred head matters.
    model.transfer.w2 = random_tensor(&mut rng, model.transfer.w2.shape(), 0.05);
    model.transfer.b2 = random_tensor(&mut rng, model.transfer.b2.shape(), 0.05);
    let mut samples = Vec::new();
    for (id, kind) in [SampleKind::Weak, SampleKind::Salient].into_iter().enumerate() {
        let image = Tensor::new(
            vec![3, size, size],
            (0..3 * size * size).map(|_| rng.uniform(0.0, 1.0)).collect(),
        )?;
        let (bbox, mask) = match kind {
            SampleKind::Weak => (random_box(&mut rng, size), None),
            SampleKind::Salient => {
                let b = random_box(&mut rng, size);
                (b, Some(BinaryMask::from_box(size, size, &b)))
            }
        };
        samples.push(Prepared {
            kind,
            id,
            image,
            bags: build_bags(&bbox, size, size)?,
            mask,
        });
    }
    Ok((model, samples, cfg))
}

fn unit(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Unit direction `(ĝ + r)/√2` with `r` a random unit vector orthogonal to
/// `g`. The derivative along it is `|g|/√2`, and an error in `g` along `r`
/// shifts it.
fn probe_direction(g: &[f64], rng: &mut Rng) -> Vec<f64> {
    let mut ghat = g.to_vec();
    let mut r: Vec<f64> = (0..g.len()).map(|_| rng.normal()).collect();
    if unit(&mut ghat) == 0.0 {
        unit(&mut r);
        return r;
    }
    let along = r.iter().zip(&ghat).map(|(r, g)| r * g).sum::<f64>();
    r.iter_mut().zip(&ghat).for_each(|(r, g)| *r -= along * g);
    if unit(&mut r) < 1e-12 {
        return ghat;
    }
    let w = std::f64::consts::FRAC_1_SQRT_2;
    ghat.iter().zip(&r).map(|(g, r)| w * (g + r)).collect()
}

/// Mean batch objective (one weak and one salient sample) over every
/// model parameter, probed along one unit direction confined to each
/// parameter tensor and one spanning all of them.
pub fn objective_check(seed: u64, eps: f64, size: usize) -> Result<f64> {
    let (model, samples, cfg) = objective_problem(seed, size)?;
    let transfer_input = model.weak.flatten();
    let x = flatten_model(&model);
    let eval = |flat: &[f64], with_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut g = Graph::new();
        let leaf = g.leaf(Tensor::new(vec![flat.len()], flat.to_vec())?);
        let vars = ModelVars::from_flat(&mut g, leaf, &model)?;
        let out = batch_objective(&mut g, &vars, &transfer_input, &samples, &cfg)?;
        let y = g.value(out).item();
        let grad = if with_grad {
            Some(g.backward(out)?.get_or_zeros(leaf, g.value(leaf)).into_data())
        } else {
            None
        };
        Ok((y, grad))
    };
    let (_, grad) = eval(&x, true)?;
    let grad = grad.expect("gradient requested");
    let mut spans = Vec::new();
    let mut off = 0;
    for (_, t) in model.named_params() {
        spans.push(off..off + t.len());
        off += t.len();
    }
    spans.push(0..x.len());
    let mut rng = Rng::child(seed, &[4]);
    let mut worst = 0.0f64;
    for span in spans {
        let g = &grad[span.clone()];
        let dir = probe_direction(g, &mut rng);
        let analytic = g.iter().zip(&dir).map(|(g, d)| g * d).sum::<f64>();
        let along = |t: &[f64]| -> Result<f64> {
            let mut p = x.clone();
            for (p, d) in p[span.clone()].iter_mut().zip(&dir) {
                *p += t[0] * d;
            }
            Ok(eval(&p, false)?.0)
        };
        worst = worst.max(check_flat(along, &[0.0], &[analytic], eps)?);
    }
    Ok(worst)
}

type Check = fn(u64, f64, usize) -> Result<f64>;

/// Runs every check over `cfg.seeds` seeds.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<CheckOutcome>> {
    if cfg.seeds == 0 {
        return Err(Error::invalid("gradcheck needs at least one seed"));
    }
    if cfg.patch < 8 {
        return Err(Error::invalid(format!("gradcheck patch {} is below 8", cfg.patch)));
    }
    let checks: [(&str, Check); 3] = [
        ("mil_loss∘sigmoid", mil_check),
        ("pixel_loss∘sigmoid", pixel_check),
        ("batch_objective", objective_check),
    ];
    checks
        .iter()
        .map(|&(name, check)| {
            let mut worst = 0.0f64;
            for seed in 0..cfg.seeds {
                worst = worst.max(check(seed, cfg.eps, cfg.patch)?);
            }
            Ok(CheckOutcome {
                name: name.to_string(),
                seeds: cfg.seeds,
                max_rel_error: worst,
                passed: worst < cfg.tolerance,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_check_passes_on_one_seed() {
        assert!(mil_check(0, 1e-6, 16).unwrap() < 1e-4);
        assert!(pixel_check(0, 1e-6, 16).unwrap() < 1e-4);
        assert!(objective_check(0, 1e-6, 16).unwrap() < 1e-4);
    }

    #[test]
    fn probe_direction_is_unit_with_derivative_norm_over_root_two() {
        let mut rng = Rng::seed(5);
        let g = [3.0, -4.0, 0.5, 2.0];
        let d = probe_direction(&g, &mut rng);
        let norm: f64 = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((d.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        let dot: f64 = g.iter().zip(&d).map(|(g, d)| g * d).sum();
        assert!((dot - norm / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(probe_direction(&[2.0], &mut rng), vec![1.0]);
    }

    #[test]
    fn suite_rejects_degenerate_settings() {
        assert!(run_suite(&SuiteConfig {
            seeds: 0,
            ..SuiteConfig::default()
        })
        .is_err());
        assert!(run_suite(&SuiteConfig {
            patch: 4,
            ..SuiteConfig::default()
        })
        .is_err());
        assert!(run_suite(&SuiteConfig {
            eps: 1.0,
            ..SuiteConfig::default()
        })
        .is_err());
    }
}

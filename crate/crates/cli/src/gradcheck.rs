use std::path::PathBuf;

use clap::Args;
use crossmodal::memory::{BankTag, PrototypeBank};
use crossmodal::objectives::{grad_through_normalization, intra_infonce, multi_positive_global};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::commands::write_json;
use crate::{CliError, CliResult, GlobalOptions};

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random instances per loss.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
    /// Result JSON; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut m = random_rows(rng, n, d);
    for mut r in m.rows_mut() {
        let norm = r.dot(&r).sqrt();
        r /= norm;
    }
    m
}

/// `clusters` clusters, the first `mixed` of them split into a visible and an
/// infrared prototype.
fn random_bank(rng: &mut ChaCha8Rng, clusters: usize, mixed: usize, d: usize) -> PrototypeBank {
    let mut tags = Vec::new();
    let mut owner = Vec::new();
    let mut positives = Vec::new();
    for z in 0..clusters {
        let mut p = vec![tags.len()];
        tags.push(BankTag::Visible);
        owner.push(z);
        if z < mixed {
            p.push(tags.len());
            tags.push(BankTag::Infrared);
            owner.push(z);
        }
        positives.push(p);
    }
    PrototypeBank {
        vectors: unit_rows(rng, tags.len(), d),
        modality_tag: tags,
        owner_cluster: owner,
        mu: 0.1,
        positives,
    }
}

fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

fn central_differences(x: &Array2<f64>, step: f64, loss: impl Fn(&Array2<f64>) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|idx| {
            let at = (idx / x.ncols(), idx % x.ncols());
            let mut up = x.clone();
            up[at] += step;
            let mut down = x.clone();
            down[at] -= step;
            (loss(&up) - loss(&down)) / (2.0 * step)
        })
        .collect()
}

type Instance = Box<dyn Fn(&mut ChaCha8Rng, f64) -> crossmodal::Result<f64>>;

fn intra_instance(rng: &mut ChaCha8Rng, step: f64) -> crossmodal::Result<f64> {
    let d = 6;
    let bank = random_bank(rng, 5, 0, d);
    let f = unit_rows(rng, 8, d);
    let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..5)).collect();
    let tau = rng.random_range(0.05..0.55);
    let out = intra_infonce(f.view(), &labels, &bank, tau)?;
    let num = central_differences(&f, step, |g| {
        intra_infonce(g.view(), &labels, &bank, tau).map_or(f64::NAN, |o| o.value)
    });
    Ok(max_rel_error(out.grad.as_slice().unwrap(), &num))
}

fn global_instance(rng: &mut ChaCha8Rng, step: f64) -> crossmodal::Result<f64> {
    let d = 6;
    let bank = random_bank(rng, 7, 4, d);
    let f = unit_rows(rng, 8, d);
    let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..7)).collect();
    let tau = rng.random_range(0.05..0.55);
    let k_neg = rng.random_range(1..12);
    let out = multi_positive_global(f.view(), &labels, &bank, tau, k_neg)?;
    let num = central_differences(&f, step, |g| {
        multi_positive_global(g.view(), &labels, &bank, tau, k_neg).map_or(f64::NAN, |o| o.value)
    });
    Ok(max_rel_error(out.grad.as_slice().unwrap(), &num))
}

/// Global loss on `x / |x|`, differentiated with respect to `x`.
fn normalized_instance(rng: &mut ChaCha8Rng, step: f64) -> crossmodal::Result<f64> {
    let d = 6;
    let bank = random_bank(rng, 6, 3, d);
    let x = random_rows(rng, 6, d);
    let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..6)).collect();
    let tau = rng.random_range(0.05..0.55);
    let normalize = |m: &Array2<f64>| {
        let mut m = m.clone();
        for mut r in m.rows_mut() {
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        m
    };
    let out = multi_positive_global(normalize(&x).view(), &labels, &bank, tau, 50)?;
    let grad = grad_through_normalization(out.grad.view(), x.view())?;
    let num = central_differences(&x, step, |g| {
        multi_positive_global(normalize(g).view(), &labels, &bank, tau, 50).map_or(f64::NAN, |o| o.value)
    });
    Ok(max_rel_error(grad.as_slice().unwrap(), &num))
}

pub fn run(g: &GlobalOptions, a: GradcheckArgs) -> CliResult {
    if a.instances == 0 || !(a.step > 0.0) || !(a.tol > 0.0) {
        return Err(CliError::Usage("instances, step and tol must be positive".into()));
    }
    let seed = g.seed.unwrap_or(0);
    let checks: [(&str, Instance); 3] = [
        ("intra_infonce", Box::new(intra_instance)),
        ("multi_positive_global", Box::new(global_instance)),
        ("normalization", Box::new(normalized_instance)),
    ];
    let mut results = serde_json::Map::new();
    let mut all_pass = true;
    for (k, (name, check)) in checks.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64 * 1_000_003));
        let mut worst = 0.0f64;
        for _ in 0..a.instances {
            let err = check(&mut rng, a.step)?;
            worst = if err.is_nan() || worst.is_nan() { f64::NAN } else { worst.max(err) };
        }
        let pass = worst < a.tol;
        all_pass &= pass;
        results.insert(
            (*name).into(),
            json!({ "instances": a.instances, "max_rel_error": worst, "pass": pass }),
        );
    }
    let out = json!({
        "config": { "seed": seed, "instances": a.instances, "tol": a.tol, "step": a.step },
        "checks": results,
        "pass": all_pass,
    });
    match &a.out {
        Some(path) => write_json(path, &out)?,
        None => println!("{}", serde_json::to_string_pretty(&out)?),
    }
    if all_pass {
        Ok(())
    } else {
        Err(CliError::Check("gradient mismatch".into()))
    }
}

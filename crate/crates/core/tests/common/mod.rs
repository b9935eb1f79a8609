//! Finite-difference gradient checking shared by the model and acceptance suites.
//!
//! Numerical derivatives use central differences. A perturbed generator parameter only
//! influences the stages from its own onward, so each probe re-runs the generator from
//! the cached input of that stage; discriminator probes reuse the cached generator output.
//!
//! The losses are only piecewise smooth (|·| in L1, ReLU). When a probe straddles a kink
//! the quotient is meaningless, so a disagreeing element is re-probed with smaller steps;
//! an element fails only if no step in [`FD_STEPS`] reproduces the analytic value.

#![allow(dead_code)]

use std::collections::BTreeMap;

use e2gan_core::model::{Discriminator, Generator};
use e2gan_core::tensor::Tensor;

pub const FD_STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];
pub const REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale (difference ≤ REL_TOL ×
/// this floor), which absorbs cancellation noise of the difference quotient.
pub const ABS_FLOOR: f64 = 1e-5;

pub struct Inputs {
    pub x: Tensor<f64>,
    pub target: Tensor<f64>,
    pub z: Tensor<f64>,
    pub c: Tensor<f64>,
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
    pub failures: Vec<String>,
}

impl GradReport {
    fn record(&mut self, name: &str, idx: usize, analytic: f64, mut probe: impl FnMut(f64) -> f64) {
        self.checked += 1;
        let mut rel = f64::INFINITY;
        let mut numeric = f64::NAN;
        for h in FD_STEPS {
            let n = probe(h);
            let r = relative_error(analytic, n);
            if r < rel {
                (rel, numeric) = (r, n);
            }
            if rel <= REL_TOL {
                break;
            }
        }
        if rel > self.max_rel {
            self.max_rel = rel;
            self.worst = format!("{name}[{idx}]: analytic {analytic:e}, numeric {numeric:e}");
        }
        if rel > REL_TOL && self.failures.len() < 20 {
            self.failures.push(format!("{name}[{idx}]: analytic {analytic:e}, numeric {numeric:e}, rel {rel:e}"));
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel <= REL_TOL
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn log_sigmoid(v: f64) -> f64 {
    v.min(0.0) - (-v.abs()).exp().ln_1p()
}

/// Mean absolute difference, by direct summation.
pub fn l1_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// `λ·L1(target, fake) + mean log σ(real) + mean log(1 - σ(fake))` by direct summation
/// over the discriminator logits.
pub fn composite_oracle(disc: &Discriminator<f64>, inp: &Inputs, fake: &Tensor<f64>, lambda: f64) -> f64 {
    let real = disc.forward(&inp.x, &inp.target).unwrap();
    let fake_logits = disc.forward(&inp.x, fake).unwrap();
    let real_term = real.data().iter().map(|&v| log_sigmoid(v)).sum::<f64>() / real.len() as f64;
    let fake_term = fake_logits.data().iter().map(|&v| log_sigmoid(-v)).sum::<f64>() / fake_logits.len() as f64;
    lambda * l1_oracle(&inp.target, fake) + real_term + fake_term
}

/// Checks every generator parameter against `loss_of_output(fake)`.
pub fn check_generator(
    gen: &mut Generator<f64>,
    inp: &Inputs,
    analytic: &BTreeMap<String, Tensor<f64>>,
    report: &mut GradReport,
    loss_of_output: &dyn Fn(&Tensor<f64>) -> f64,
) {
    let stage_inputs = gen.stage_inputs(None, &inp.x, &inp.z, &inp.c).unwrap();
    let names: Vec<String> = gen.params().names().cloned().collect();
    for name in names {
        let layer = name.rsplit_once('.').map(|(l, _)| l.to_string()).unwrap();
        let stage = gen.stage_of(&layer).unwrap_or_else(|| panic!("{name} belongs to no stage"));
        let grad = analytic.get(&name).unwrap_or_else(|| panic!("no analytic gradient for {name}"));
        for i in 0..grad.len() {
            let orig = gen.params().get(&name).unwrap().data()[i];
            let mut eval = |v: f64| {
                gen.params_mut().get_mut(&name).unwrap().data_mut()[i] = v;
                let out = gen.forward_from(None, stage, &stage_inputs[stage], &inp.z, &inp.c).unwrap();
                loss_of_output(&out)
            };
            report.record(&name, i, grad.data()[i], |h| (eval(orig + h) - eval(orig - h)) / (2.0 * h));
            gen.params_mut().get_mut(&name).unwrap().data_mut()[i] = orig;
        }
    }
}

/// Checks every discriminator parameter with the generator output held at `fake`.
pub fn check_discriminator(
    disc: &mut Discriminator<f64>,
    inp: &Inputs,
    fake: &Tensor<f64>,
    lambda: f64,
    analytic: &BTreeMap<String, Tensor<f64>>,
    report: &mut GradReport,
) {
    let names: Vec<String> = disc.params().names().cloned().collect();
    for name in names {
        let grad = analytic.get(&name).unwrap_or_else(|| panic!("no analytic gradient for {name}"));
        for i in 0..grad.len() {
            let orig = disc.params().get(&name).unwrap().data()[i];
            let mut eval = |v: f64| {
                disc.params_mut().get_mut(&name).unwrap().data_mut()[i] = v;
                composite_oracle(disc, inp, fake, lambda)
            };
            report.record(&name, i, grad.data()[i], |h| (eval(orig + h) - eval(orig - h)) / (2.0 * h));
            disc.params_mut().get_mut(&name).unwrap().data_mut()[i] = orig;
        }
    }
}

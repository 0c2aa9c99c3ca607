#![allow(dead_code)]

use lws::autodiff::{ParamId, ParamStore, Tape, Var};
use lws::tensor::Tensor;
use lws::Result;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values whose magnitudes are at least `margin` apart from zero and from
/// each other, so kinks of relu and max-pool stay outside `±h`.
pub fn separated_tensor<R: Rng>(shape: &[usize], margin: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let mut levels: Vec<f64> = (0..n).map(|i| (i as f64 + 1.0) * margin * 2.0).collect();
    for i in (1..n).rev() {
        levels.swap(i, rng.gen_range(0..=i));
    }
    let data = levels.into_iter().map(|v| if rng.gen::<bool>() { v } else { -v }).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn loss_value<F>(store: &ParamStore, f: &F) -> f64
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let v = f(&mut tape, store).unwrap();
    tape.value(v).item()
}

/// Relative error with the denominator floored at 1e-3.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Largest relative error between the tape gradient and central differences
/// over every entry of every parameter in `store`.
pub fn max_gradient_error<F>(store: &mut ParamStore, f: F, h: f64) -> f64
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store).unwrap();
    tape.backward(loss, store).unwrap();
    let ids: Vec<ParamId> = store.iter().map(|p| p.id).collect();
    let analytic: Vec<Tensor> = store.iter().map(|p| p.grad.clone()).collect();
    let mut worst = 0.0f64;
    for (k, id) in ids.into_iter().enumerate() {
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = loss_value(store, &f);
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = loss_value(store, &f);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_error(analytic[k].data()[i], numeric));
        }
    }
    worst
}

/// Contracts a tensor-valued output with a fixed random weight so that every
/// output entry contributes to a scalar loss.
pub fn contract(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::InitScheme;
use crate::autodiff::{ParamId, ParamStore, Real, Tensor};

fn normal<T: Real>(shape: &[usize], std: f64, scheme: InitScheme, rng: &mut ChaCha8Rng) -> Tensor<T> {
    match scheme {
        InitScheme::Zero => Tensor::zeros(shape),
        InitScheme::Random => Tensor::from_fn(shape, |_| T::c(std * rng.sample::<f64, _>(StandardNormal))),
    }
}

/// He-normal kernel `[out, in, k, k]` plus zero bias.
pub fn conv_param<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    scheme: InitScheme,
    rng: &mut ChaCha8Rng,
) -> (ParamId, ParamId) {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    let w = store.add(format!("{name}.weight"), normal(&[cout, cin, k, k], std, scheme, rng));
    let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
    (w, b)
}

/// Xavier-normal `[out, in]` weight plus zero bias.
pub fn linear_param<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    din: usize,
    dout: usize,
    scheme: InitScheme,
    rng: &mut ChaCha8Rng,
) -> (ParamId, ParamId) {
    let std = (2.0 / (din + dout) as f64).sqrt();
    let w = store.add(format!("{name}.weight"), normal(&[dout, din], std, scheme, rng));
    let b = store.add(format!("{name}.bias"), Tensor::zeros(&[dout]));
    (w, b)
}

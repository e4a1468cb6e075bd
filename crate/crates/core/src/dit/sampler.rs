use super::model::{forward, ModelInput};
use super::params::Parameters;
use super::patch::{patchify, patchify_mask, unpatchify};
use crate::error::{Error, Result};
use crate::panels::Canvas;
use crate::raster::Mask;
use crate::seeds;
use crate::tensor::{Mat, Real};

/// Number of sampling steps used when none is given.
pub const DEFAULT_STEPS: usize = 30;

/// Integrates `dz/dt = v(z, t)` from `t = 1` down to `t = 0` with `steps`
/// uniform Euler steps: `z ← z − v(z, t_k) / steps`, `t_k = k / steps`.
pub fn euler_integrate<T: Real>(
    mut z: Mat<T>,
    steps: usize,
    mut velocity: impl FnMut(&Mat<T>, T) -> Result<Mat<T>>,
) -> Result<Mat<T>> {
    if steps == 0 {
        return Err(Error::Invalid("sampling needs at least one step".into()));
    }
    let dt = T::one() / T::lit(steps as f64);
    for k in (1..=steps).rev() {
        let t = T::lit(k as f64 / steps as f64);
        let v = velocity(&z, t)?;
        for (zi, &vi) in z.as_mut_slice().iter_mut().zip(v.as_slice()) {
            *zi -= dt * vi;
        }
    }
    Ok(z)
}

/// Samples a canvas from seeded Gaussian noise, conditioned on `cond` and
/// `mask`, and clips it to `[0, 1]`.
pub fn euler_sample<T: Real>(
    params: &Parameters<T>,
    cond: &Canvas,
    mask: &Mask,
    steps: usize,
    seed: u64,
) -> Result<Canvas> {
    let layout = params.config().layout;
    let cond_tokens = patchify::<T>(cond, &layout)?;
    let mask_tokens = patchify_mask::<T>(mask, &layout)?;
    let (rows, cols) = (cond_tokens.rows(), cond_tokens.cols());
    let z0 = Mat::from_vec(rows, cols, seeds::normal_vec(seed, rows * cols));
    let z = euler_integrate(z0, steps, |z, t| {
        let input = ModelInput { tokens: z, t, cond: &cond_tokens, mask: &mask_tokens };
        Ok(forward(params, &input, false)?.0)
    })?;
    let clipped = z.map(|v| v.max(T::zero()).min(T::one()));
    unpatchify(&clipped, &layout)
}

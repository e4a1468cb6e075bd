use super::patch::patchify;
use crate::error::{Error, Result};
use crate::panels::{Canvas, PanelLayout};
use crate::seeds;
use crate::tensor::{Mat, Real};

/// One point on the straight noise–data path, in token space.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample<T> {
    pub x_data: Mat<T>,
    pub noise: Mat<T>,
    /// `(1 − t) · x_data + t · noise`.
    pub z_t: Mat<T>,
    pub t: T,
    /// Target velocity `noise − x_data`.
    pub u: Mat<T>,
}

impl<T: Real> FlowSample<T> {
    /// Builds the sample from already-patchified data and noise.
    pub fn from_parts(x_data: Mat<T>, noise: Mat<T>, t: T) -> Result<Self> {
        if !(T::zero()..=T::one()).contains(&t) {
            return Err(Error::Invalid(format!("t = {:?} is outside [0, 1]", t)));
        }
        if x_data.rows() != noise.rows() || x_data.cols() != noise.cols() {
            return Err(Error::Shape("noise and data token shapes differ".into()));
        }
        let one_minus = T::one() - t;
        let mut z_t = x_data.clone();
        let mut u = x_data.clone();
        for ((z, uu), (&x, &e)) in z_t
            .as_mut_slice()
            .iter_mut()
            .zip(u.as_mut_slice())
            .zip(x_data.as_slice().iter().zip(noise.as_slice()))
        {
            *z = one_minus * x + t * e;
            *uu = e - x;
        }
        Ok(Self { x_data, noise, z_t, t, u })
    }
}

/// Noises the canvas at time `t` with standard-normal noise drawn from `noise_seed`.
pub fn flow_pair<T: Real>(x_data: &Canvas, layout: &PanelLayout, noise_seed: u64, t: T) -> Result<FlowSample<T>> {
    let x = patchify::<T>(x_data, layout)?;
    let noise = Mat::from_vec(x.rows(), x.cols(), seeds::normal_vec(noise_seed, x.rows() * x.cols()));
    FlowSample::from_parts(x, noise, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Image;

    fn canvas() -> (Canvas, PanelLayout) {
        let layout = PanelLayout::default();
        let data = (0..64 * 144 * 3).map(|i| (i % 97) as f32 / 96.0).collect();
        (Canvas::new(Image::from_vec(64, 144, data).unwrap(), &layout).unwrap(), layout)
    }

    #[test]
    fn endpoints() {
        let (c, layout) = canvas();
        let s0 = flow_pair::<f64>(&c, &layout, 3, 0.0).unwrap();
        assert_eq!(s0.z_t, s0.x_data);
        let s1 = flow_pair::<f64>(&c, &layout, 3, 1.0).unwrap();
        assert_eq!(s1.z_t, s1.noise);
    }

    #[test]
    fn interior_point_reconstructs() {
        let (c, layout) = canvas();
        let t = 0.37;
        let s = flow_pair::<f64>(&c, &layout, 5, t).unwrap();
        for i in 0..s.z_t.as_slice().len() {
            let (x, e, z, u) = (s.x_data.as_slice()[i], s.noise.as_slice()[i], s.z_t.as_slice()[i], s.u.as_slice()[i]);
            assert!((z - (1.0 - t) * x - t * e).abs() < 1e-15);
            assert_eq!(u, e - x);
        }
    }

    #[test]
    fn rejects_t_outside_unit_interval() {
        let (c, layout) = canvas();
        assert!(flow_pair::<f32>(&c, &layout, 1, 1.5).is_err());
        assert!(flow_pair::<f32>(&c, &layout, 1, -0.1).is_err());
    }

    #[test]
    fn noise_is_seeded() {
        let (c, layout) = canvas();
        let a = flow_pair::<f32>(&c, &layout, 9, 0.5).unwrap();
        let b = flow_pair::<f32>(&c, &layout, 9, 0.5).unwrap();
        let other = flow_pair::<f32>(&c, &layout, 10, 0.5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.noise, other.noise);
    }
}

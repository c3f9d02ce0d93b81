//! Windowed structural similarity with an analytic gradient.
//!
//! Statistics are taken under an 11×11 Gaussian window (σ = 1.5) evaluated
//! only where the window fits entirely inside the image ("valid" filtering),
//! with `K1 = 0.01`, `K2 = 0.03` and a dynamic range of 1. The SSIM map is
//! averaged over positions and channels.

use crate::error::{Error, Result};
use crate::imaging::Field;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
pub const C1: f64 = K1 * K1;
pub const C2: f64 = K2 * K2;

fn gaussian_taps() -> [f64; WINDOW] {
    let mut taps = [0.0; WINDOW];
    let center = (WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - center;
        *t = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable valid-mode Gaussian filter over one plane.
struct Window {
    taps: [f64; WINDOW],
    height: usize,
    width: usize,
    out_height: usize,
    out_width: usize,
}

impl Window {
    fn new(height: usize, width: usize) -> Result<Self> {
        if height < WINDOW || width < WINDOW {
            return Err(Error::TooSmall {
                width,
                height,
                window: WINDOW,
            });
        }
        Ok(Self {
            taps: gaussian_taps(),
            height,
            width,
            out_height: height - WINDOW + 1,
            out_width: width - WINDOW + 1,
        })
    }

    fn filter(&self, plane: &[f64]) -> Vec<f64> {
        let (w, ow, oh) = (self.width, self.out_width, self.out_height);
        let mut rows = vec![0.0; self.height * ow];
        for y in 0..self.height {
            let src = &plane[y * w..(y + 1) * w];
            for x in 0..ow {
                rows[y * ow + x] = self.taps.iter().zip(&src[x..x + WINDOW]).map(|(t, v)| t * v).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for (k, t) in self.taps.iter().enumerate() {
                let src = &rows[(y + k) * ow..(y + k + 1) * ow];
                for (o, v) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                    *o += t * v;
                }
            }
        }
        out
    }

    /// Transpose of [`Window::filter`].
    fn filter_adjoint(&self, grad: &[f64]) -> Vec<f64> {
        let (w, ow, oh) = (self.width, self.out_width, self.out_height);
        let mut rows = vec![0.0; self.height * ow];
        for y in 0..oh {
            for (k, t) in self.taps.iter().enumerate() {
                let dst = &mut rows[(y + k) * ow..(y + k + 1) * ow];
                for (d, g) in dst.iter_mut().zip(&grad[y * ow..(y + 1) * ow]) {
                    *d += t * g;
                }
            }
        }
        let mut out = vec![0.0; self.height * w];
        for y in 0..self.height {
            for x in 0..ow {
                let g = rows[y * ow + x];
                for (k, t) in self.taps.iter().enumerate() {
                    out[y * w + x + k] += t * g;
                }
            }
        }
        out
    }
}

/// Mean SSIM between two equally shaped fields.
pub fn ssim(x: &Field, y: &Field) -> Result<f64> {
    Ok(ssim_impl(x, y, false)?.0)
}

/// Mean SSIM together with its gradients with respect to `x` and `y`.
pub fn ssim_with_grad(x: &Field, y: &Field) -> Result<(f64, Field, Field)> {
    let (value, grads) = ssim_impl(x, y, true)?;
    let (gx, gy) = grads.expect("gradients requested");
    Ok((value, gx, gy))
}

fn ssim_impl(x: &Field, y: &Field, want_grad: bool) -> Result<(f64, Option<(Field, Field)>)> {
    x.ensure_same_shape(y)?;
    let window = Window::new(x.height(), x.width())?;
    let channels = x.channels();
    let positions = window.out_height * window.out_width;
    let scale = 1.0 / (channels * positions) as f64;

    let mut total = 0.0;
    let mut gx = Field::zeros(x.height(), x.width(), channels);
    let mut gy = Field::zeros(x.height(), x.width(), channels);

    for c in 0..channels {
        let (xp, yp) = (x.channel(c), y.channel(c));
        let xx: Vec<f64> = xp.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = yp.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xp.iter().zip(yp).map(|(a, b)| a * b).collect();
        let mx = window.filter(xp);
        let my = window.filter(yp);
        let exx = window.filter(&xx);
        let eyy = window.filter(&yy);
        let exy = window.filter(&xy);

        let mut d_mx = vec![0.0; positions];
        let mut d_my = vec![0.0; positions];
        let mut d_exx = vec![0.0; positions];
        let mut d_eyy = vec![0.0; positions];
        let mut d_exy = vec![0.0; positions];

        for p in 0..positions {
            let (ux, uy) = (mx[p], my[p]);
            let sx = exx[p] - ux * ux;
            let sy = eyy[p] - uy * uy;
            let sxy = exy[p] - ux * uy;
            let n1 = 2.0 * ux * uy + C1;
            let n2 = 2.0 * sxy + C2;
            let d1 = ux * ux + uy * uy + C1;
            let d2 = sx + sy + C2;
            let s = (n1 * n2) / (d1 * d2);
            total += s;
            if want_grad {
                let dd = d1 * d2;
                d_mx[p] = scale * (2.0 * uy * (n2 - n1) / dd - 2.0 * ux * s / d1 + 2.0 * ux * s / d2);
                d_my[p] = scale * (2.0 * ux * (n2 - n1) / dd - 2.0 * uy * s / d1 + 2.0 * uy * s / d2);
                d_exx[p] = -scale * s / d2;
                d_eyy[p] = -scale * s / d2;
                d_exy[p] = scale * 2.0 * n1 / dd;
            }
        }

        if want_grad {
            let a_x = window.filter_adjoint(&d_mx);
            let a_y = window.filter_adjoint(&d_my);
            let b_x = window.filter_adjoint(&d_exx);
            let b_y = window.filter_adjoint(&d_eyy);
            let cross = window.filter_adjoint(&d_exy);
            let gxc = gx.channel_mut(c);
            for i in 0..gxc.len() {
                gxc[i] = a_x[i] + 2.0 * xp[i] * b_x[i] + yp[i] * cross[i];
            }
            let gyc = gy.channel_mut(c);
            for i in 0..gyc.len() {
                gyc[i] = a_y[i] + 2.0 * yp[i] * b_y[i] + xp[i] * cross[i];
            }
        }
    }

    let value = total * scale;
    Ok((value, want_grad.then_some((gx, gy))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_field(h: usize, w: usize, c: usize, seed: u64) -> Field {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Field::from_fn(h, w, c, |_, _, _| rng.random::<f64>())
    }

    /// Direct 2-D windowed SSIM, no separability, no shared code.
    fn ssim_loop_oracle(x: &Field, y: &Field) -> f64 {
        let r = 5i64;
        let mut k = vec![0.0; 121];
        for i in 0..11 {
            for j in 0..11 {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                k[i * 11 + j] = (-(di * di + dj * dj) / 4.5).exp();
            }
        }
        let ksum: f64 = k.iter().sum();
        let (h, w, ch) = x.shape();
        let mut acc = 0.0;
        let mut count = 0usize;
        for c in 0..ch {
            for cy in r as usize..h - r as usize {
                for cx in r as usize..w - r as usize {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wgt = k[i * 11 + j] / ksum;
                            let a = x.at(cy + i - 5, cx + j - 5, c);
                            let b = y.at(cy + i - 5, cx + j - 5, c);
                            mx += wgt * a;
                            my += wgt * b;
                            sxx += wgt * a * a;
                            syy += wgt * b * b;
                            sxy += wgt * a * b;
                        }
                    }
                    let vx = sxx - mx * mx;
                    let vy = syy - my * my;
                    let cv = sxy - mx * my;
                    acc += (2.0 * mx * my + 1e-4) * (2.0 * cv + 9e-4)
                        / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4));
                    count += 1;
                }
            }
        }
        acc / count as f64
    }

    #[test]
    fn identical_inputs_give_exactly_one() {
        let x = random_field(16, 13, 3, 7);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn constant_black_vs_white_closed_form() {
        let x = Field::filled(12, 12, 3, 0.0);
        let y = Field::filled(12, 12, 3, 1.0);
        let expected = C1 / (1.0 + C1);
        assert!((ssim(&x, &y).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn symmetric() {
        let x = random_field(14, 15, 3, 1);
        let y = random_field(14, 15, 3, 2);
        assert_eq!(ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
    }

    #[test]
    fn matches_windowed_loop_oracle() {
        let x = random_field(17, 20, 3, 11);
        let y = random_field(17, 20, 3, 12);
        assert!((ssim(&x, &y).unwrap() - ssim_loop_oracle(&x, &y)).abs() < 1e-12);
    }

    #[test]
    fn tends_to_one_under_vanishing_noise() {
        let x = random_field(16, 16, 1, 3);
        let noise = random_field(16, 16, 1, 4);
        let mut prev = f64::NEG_INFINITY;
        for eps in [1e-1, 1e-2, 1e-3, 1e-4] {
            let y = Field::from_vec(16, 16, 1, x.data().iter().zip(noise.data()).map(|(a, n)| a + eps * (n - 0.5)).collect()).unwrap();
            let s = ssim(&x, &y).unwrap();
            assert!(s > prev);
            prev = s;
        }
        assert!(prev > 0.9999);
    }

    #[test]
    fn rejects_images_smaller_than_window() {
        let x = Field::filled(10, 40, 3, 0.5);
        assert!(matches!(ssim(&x, &x), Err(Error::TooSmall { .. })));
    }

    #[test]
    fn adjoint_is_transpose() {
        let window = Window::new(13, 15).unwrap();
        let a = random_field(13, 15, 1, 5);
        let b = random_field(3, 5, 1, 6);
        let lhs: f64 = window.filter(a.data()).iter().zip(b.data()).map(|(p, q)| p * q).sum();
        let rhs: f64 = window.filter_adjoint(b.data()).iter().zip(a.data()).map(|(p, q)| p * q).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

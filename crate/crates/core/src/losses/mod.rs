//! Training objectives.
//!
//! Every norm is reduced as a mean over its elements, so loss magnitudes do
//! not depend on patch size. Gradient-based terms use the forward
//! differences of [`crate::imaging::grad`]; where a term needs `|∇I|` of an
//! RGB image it takes the per-pixel channel maximum.
//!
//! Each loss comes in a value-only form and a `*_with_grad` form returning
//! analytic gradients with respect to every input field. Non-differentiable
//! points (`|0|`, ties in a maximum) take the zero subgradient.

mod ssim;

pub use ssim::{ssim, ssim_with_grad, C1, C2, K1, K2, SIGMA, WINDOW};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{grad, grad_adjoint, product_broadcast, Field};

/// Weights and constants of the decomposition objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecompositionLossWeights {
    pub reconstruction: f64,
    pub reflectance_similarity: f64,
    pub illumination_smoothness: f64,
    pub mutual_consistency: f64,
    /// Floor of the `|∇I|` denominator in the smoothness term.
    pub epsilon: f64,
    /// Shape parameter of the mutual-consistency penalty `u·exp(-c·u)`.
    pub c: f64,
}

impl Default for DecompositionLossWeights {
    fn default() -> Self {
        Self {
            reconstruction: 1.0,
            reflectance_similarity: 0.01,
            illumination_smoothness: 0.08,
            mutual_consistency: 0.1,
            epsilon: 0.01,
            c: 10.0,
        }
    }
}

impl DecompositionLossWeights {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.reconstruction,
            self.reflectance_similarity,
            self.illumination_smoothness,
            self.mutual_consistency,
        ];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("loss weights must be finite and >= 0".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.c >= 0.0) {
            return Err(Error::InvalidArgument(format!("c must be >= 0, got {}", self.c)));
        }
        Ok(())
    }
}

/// A total loss and its unweighted terms, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: Vec<(&'static str, f64)>,
}

impl LossBreakdown {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }

    pub fn term_names(&self) -> Vec<&'static str> {
        self.terms.iter().map(|(n, _)| *n).collect()
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(a: &Field, b: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
    let (h, w, c) = a.shape();
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Field::from_vec(h, w, c, data).expect("same shape")
}

fn ensure_channels(field: &Field, channels: usize, what: &str) -> Result<()> {
    if field.channels() != channels {
        return Err(Error::ShapeMismatch {
            expected: format!("{what} with {channels} channel(s)"),
            actual: format!("{} channel(s)", field.channels()),
        });
    }
    Ok(())
}

/// Mean of `M·exp(-c·M)` over all entries of a nonnegative field.
pub fn mutual_penalty(m: &Field, c: f64) -> Result<f64> {
    if let Some(v) = m.data().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "mutual penalty needs finite nonnegative entries, got {v}"
        )));
    }
    if !(c >= 0.0) {
        return Err(Error::InvalidArgument(format!("c must be >= 0, got {c}")));
    }
    if m.is_empty() {
        return Ok(0.0);
    }
    Ok(m.data().iter().map(|&u| u * (-c * u).exp()).sum::<f64>() / m.len() as f64)
}

/// Mean squared difference of two reflectance maps.
pub fn reflectance_similarity(a: &Field, b: &Field) -> Result<f64> {
    Ok(reflectance_similarity_with_grad(a, b)?.0)
}

pub fn reflectance_similarity_with_grad(a: &Field, b: &Field) -> Result<(f64, Field, Field)> {
    a.ensure_same_shape(b)?;
    let n = a.len() as f64;
    let diff = zip_map(a, b, |p, q| p - q);
    let value = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    let ga = diff.map(|d| 2.0 * d / n);
    let gb = diff.map(|d| -2.0 * d / n);
    Ok((value, ga, gb))
}

/// Mean absolute difference between `image` and `R ∘ L`.
pub fn reconstruction_error(image: &Field, reflectance: &Field, illumination: &Field) -> Result<f64> {
    Ok(reconstruction_error_with_grad(image, reflectance, illumination)?.0)
}

/// Returns the value and gradients `(d/dI, d/dR, d/dL)`.
pub fn reconstruction_error_with_grad(
    image: &Field,
    reflectance: &Field,
    illumination: &Field,
) -> Result<(f64, Field, Field, Field)> {
    image.ensure_same_shape(reflectance)?;
    image.ensure_same_spatial(illumination)?;
    ensure_channels(illumination, 1, "illumination")?;
    let n = image.len() as f64;
    let product = product_broadcast(reflectance, illumination);
    let diff = zip_map(image, &product, |i, p| i - p);
    let value = diff.data().iter().map(|d| d.abs()).sum::<f64>() / n;

    let g_image = diff.map(|d| sign(d) / n);
    let pixels = image.pixels();
    let mut g_reflectance = g_image.clone();
    let mut g_illumination = Field::zeros(image.height(), image.width(), 1);
    let l = illumination.channel(0);
    for c in 0..image.channels() {
        let s = g_image.channel(c);
        let r = reflectance.channel(c);
        let gr = g_reflectance.channel_mut(c);
        for p in 0..pixels {
            gr[p] = -s[p] * l[p];
        }
        let gl = g_illumination.channel_mut(0);
        for p in 0..pixels {
            gl[p] -= s[p] * r[p];
        }
    }
    Ok((value, g_image, g_reflectance, g_illumination))
}

/// Channel-max of `|∇I|` per direction, remembering which channel won and
/// the sign of its difference.
struct ChannelMaxGrad {
    magnitude: [Vec<f64>; 2],
    argmax: [Vec<usize>; 2],
    sign: [Vec<f64>; 2],
}

fn channel_max_grad_tracked(image: &Field) -> ChannelMaxGrad {
    let g = grad(image);
    let pixels = image.pixels();
    let mut out = ChannelMaxGrad {
        magnitude: [vec![0.0; pixels], vec![0.0; pixels]],
        argmax: [vec![0; pixels], vec![0; pixels]],
        sign: [vec![0.0; pixels], vec![0.0; pixels]],
    };
    for (dir, field) in [&g.dx, &g.dy].into_iter().enumerate() {
        for c in 0..image.channels() {
            for (p, &v) in field.channel(c).iter().enumerate() {
                if c == 0 || v.abs() > out.magnitude[dir][p] {
                    out.magnitude[dir][p] = v.abs();
                    out.argmax[dir][p] = c;
                    out.sign[dir][p] = sign(v);
                }
            }
        }
    }
    out
}

/// Mean over pixels and both directions of `|∇L| / max(|∇I|, ε)`.
pub fn illumination_smoothness(illumination: &Field, image: &Field, epsilon: f64) -> Result<f64> {
    Ok(illumination_smoothness_with_grad(illumination, image, epsilon)?.0)
}

/// Returns the value and gradients `(d/dL, d/dI)`.
pub fn illumination_smoothness_with_grad(
    illumination: &Field,
    image: &Field,
    epsilon: f64,
) -> Result<(f64, Field, Field)> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
    }
    ensure_channels(illumination, 1, "illumination")?;
    illumination.ensure_same_spatial(image)?;
    let (h, w) = (image.height(), image.width());
    let pixels = h * w;
    let n = (2 * pixels) as f64;

    let gl = grad(illumination);
    let gi = channel_max_grad_tracked(image);

    let mut value = 0.0;
    let mut up_l = [vec![0.0; pixels], vec![0.0; pixels]];
    let mut up_i = [
        Field::zeros(h, w, image.channels()),
        Field::zeros(h, w, image.channels()),
    ];
    for (dir, lf) in [&gl.dx, &gl.dy].into_iter().enumerate() {
        let lv = lf.channel(0);
        for p in 0..pixels {
            let mag = gi.magnitude[dir][p];
            let den = mag.max(epsilon);
            value += lv[p].abs() / den;
            up_l[dir][p] = sign(lv[p]) / den / n;
            if mag > epsilon {
                let d_mag = -lv[p].abs() / (den * den) / n;
                let c = gi.argmax[dir][p];
                up_i[dir].channel_mut(c)[p] = d_mag * gi.sign[dir][p];
            }
        }
    }
    let [ux, uy] = up_l;
    let g_l = grad_adjoint(
        &Field::from_vec(h, w, 1, ux)?,
        &Field::from_vec(h, w, 1, uy)?,
    );
    let g_i = grad_adjoint(&up_i[0], &up_i[1]);
    Ok((value / n, g_l, g_i))
}

/// The mutual-consistency field `M = |∇L_l| + |∇L_h|`, with the two
/// directions stacked as channels 0 (horizontal) and 1 (vertical).
pub fn mutual_gradient(low: &Field, high: &Field) -> Result<Field> {
    ensure_channels(low, 1, "illumination")?;
    low.ensure_same_shape(high)?;
    let (gl, gh) = (grad(low), grad(high));
    let (h, w) = (low.height(), low.width());
    let mut data = Vec::with_capacity(2 * h * w);
    for (a, b) in [(&gl.dx, &gh.dx), (&gl.dy, &gh.dy)] {
        data.extend(a.data().iter().zip(b.data()).map(|(p, q)| p.abs() + q.abs()));
    }
    Field::from_vec(h, w, 2, data)
}

fn mutual_consistency_with_grad(low: &Field, high: &Field, c: f64) -> Result<(f64, Field, Field)> {
    let m = mutual_gradient(low, high)?;
    let value = mutual_penalty(&m, c)?;
    let n = m.len() as f64;
    let (gl, gh) = (grad(low), grad(high));
    let pixels = low.pixels();
    let (h, w) = (low.height(), low.width());
    let mut up_low = [vec![0.0; pixels], vec![0.0; pixels]];
    let mut up_high = [vec![0.0; pixels], vec![0.0; pixels]];
    for (dir, (a, b)) in [(&gl.dx, &gh.dx), (&gl.dy, &gh.dy)].into_iter().enumerate() {
        let mv = m.channel(dir);
        for p in 0..pixels {
            let u = mv[p];
            let du = (-c * u).exp() * (1.0 - c * u) / n;
            up_low[dir][p] = du * sign(a.data()[p]);
            up_high[dir][p] = du * sign(b.data()[p]);
        }
    }
    let [lx, ly] = up_low;
    let [hx, hy] = up_high;
    let g_low = grad_adjoint(&Field::from_vec(h, w, 1, lx)?, &Field::from_vec(h, w, 1, ly)?);
    let g_high = grad_adjoint(&Field::from_vec(h, w, 1, hx)?, &Field::from_vec(h, w, 1, hy)?);
    Ok((value, g_low, g_high))
}

/// Inputs of the decomposition objective: a low/high exposure pair and the
/// layers decomposed from each.
#[derive(Clone, Copy, Debug)]
pub struct DecompositionInputs<'a> {
    pub image_low: &'a Field,
    pub image_high: &'a Field,
    pub reflectance_low: &'a Field,
    pub reflectance_high: &'a Field,
    pub illumination_low: &'a Field,
    pub illumination_high: &'a Field,
}

/// Gradients of the decomposition objective, one per input field.
#[derive(Clone, Debug)]
pub struct DecompositionGrads {
    pub image_low: Field,
    pub image_high: Field,
    pub reflectance_low: Field,
    pub reflectance_high: Field,
    pub illumination_low: Field,
    pub illumination_high: Field,
}

pub fn decomposition_loss(
    inputs: &DecompositionInputs<'_>,
    weights: &DecompositionLossWeights,
) -> Result<LossBreakdown> {
    Ok(decomposition_loss_with_grad(inputs, weights)?.0)
}

/// Weighted sum of reconstruction, reflectance similarity, illumination
/// smoothness and mutual consistency. The breakdown reports each term
/// unweighted, with the two exposures already summed for `rec` and `is`.
pub fn decomposition_loss_with_grad(
    inputs: &DecompositionInputs<'_>,
    weights: &DecompositionLossWeights,
) -> Result<(LossBreakdown, DecompositionGrads)> {
    weights.validate()?;
    let i = inputs;
    i.image_low.ensure_same_shape(i.image_high)?;
    ensure_channels(i.image_low, 3, "image")?;
    for f in [i.reflectance_low, i.reflectance_high] {
        i.image_low.ensure_same_shape(f)?;
    }
    for f in [i.illumination_low, i.illumination_high] {
        ensure_channels(f, 1, "illumination")?;
        i.image_low.ensure_same_spatial(f)?;
    }

    let (rec_l, gi_l, gr_l, gl_l) =
        reconstruction_error_with_grad(i.image_low, i.reflectance_low, i.illumination_low)?;
    let (rec_h, gi_h, gr_h, gl_h) =
        reconstruction_error_with_grad(i.image_high, i.reflectance_high, i.illumination_high)?;
    let (rs, grs_l, grs_h) = reflectance_similarity_with_grad(i.reflectance_low, i.reflectance_high)?;
    let (is_l, gis_ll, gis_il) =
        illumination_smoothness_with_grad(i.illumination_low, i.image_low, weights.epsilon)?;
    let (is_h, gis_lh, gis_ih) =
        illumination_smoothness_with_grad(i.illumination_high, i.image_high, weights.epsilon)?;
    let (mc, gmc_l, gmc_h) =
        mutual_consistency_with_grad(i.illumination_low, i.illumination_high, weights.c)?;

    let rec = rec_l + rec_h;
    let is = is_l + is_h;
    let w = weights;
    let total = w.reconstruction * rec
        + w.reflectance_similarity * rs
        + w.illumination_smoothness * is
        + w.mutual_consistency * mc;

    let combine = |parts: &[(f64, &Field)]| -> Field {
        let mut out = Field::zeros(parts[0].1.height(), parts[0].1.width(), parts[0].1.channels());
        for (k, f) in parts {
            for (o, v) in out.data_mut().iter_mut().zip(f.data()) {
                *o += k * v;
            }
        }
        out
    };

    let grads = DecompositionGrads {
        image_low: combine(&[(w.reconstruction, &gi_l), (w.illumination_smoothness, &gis_il)]),
        image_high: combine(&[(w.reconstruction, &gi_h), (w.illumination_smoothness, &gis_ih)]),
        reflectance_low: combine(&[(w.reconstruction, &gr_l), (w.reflectance_similarity, &grs_l)]),
        reflectance_high: combine(&[(w.reconstruction, &gr_h), (w.reflectance_similarity, &grs_h)]),
        illumination_low: combine(&[
            (w.reconstruction, &gl_l),
            (w.illumination_smoothness, &gis_ll),
            (w.mutual_consistency, &gmc_l),
        ]),
        illumination_high: combine(&[
            (w.reconstruction, &gl_h),
            (w.illumination_smoothness, &gis_lh),
            (w.mutual_consistency, &gmc_h),
        ]),
    };
    let breakdown = LossBreakdown {
        total,
        terms: vec![("rec", rec), ("rs", rs), ("is", is), ("mc", mc)],
    };
    Ok((breakdown, grads))
}

/// `(Σ (∇a − ∇b)² over both directions) / (2·len)` and its gradient with
/// respect to `a` (the gradient for `b` is the negation).
fn gradient_mse_with_grad(a: &Field, b: &Field) -> (f64, Field) {
    let diff = zip_map(a, b, |p, q| p - q);
    let g = grad(&diff);
    let n = (2 * a.len()) as f64;
    let value = g.dx.data().iter().chain(g.dy.data()).map(|d| d * d).sum::<f64>() / n;
    let up_x = g.dx.map(|d| 2.0 * d / n);
    let up_y = g.dy.map(|d| 2.0 * d / n);
    (value, grad_adjoint(&up_x, &up_y))
}

pub fn restoration_loss(restored: &Field, reference: &Field) -> Result<LossBreakdown> {
    Ok(restoration_loss_with_grad(restored, reference)?.0)
}

/// `MSE − SSIM + MSE(∇)`; the minimum, −1, is reached only for identical
/// inputs. Returns gradients for the restored and the reference maps.
pub fn restoration_loss_with_grad(
    restored: &Field,
    reference: &Field,
) -> Result<(LossBreakdown, Field, Field)> {
    restored.ensure_same_shape(reference)?;
    let (mse, g_mse_a, g_mse_b) = reflectance_similarity_with_grad(restored, reference)?;
    let (s, g_ssim_a, g_ssim_b) = ssim_with_grad(restored, reference)?;
    let (gmse, g_grad_a) = gradient_mse_with_grad(restored, reference);
    let total = mse - s + gmse;

    let mut ga = g_mse_a;
    let mut gb = g_mse_b;
    for i in 0..ga.len() {
        ga.data_mut()[i] += -g_ssim_a.data()[i] + g_grad_a.data()[i];
        gb.data_mut()[i] += -g_ssim_b.data()[i] - g_grad_a.data()[i];
    }
    let breakdown = LossBreakdown {
        total,
        terms: vec![("mse", mse), ("ssim", s), ("grad_mse", gmse)],
    };
    Ok((breakdown, ga, gb))
}

pub fn adjustment_loss(adjusted: &Field, target: &Field) -> Result<LossBreakdown> {
    Ok(adjustment_loss_with_grad(adjusted, target)?.0)
}

/// `MSE + mean((|∇L̂| − |∇L_t|)²)`, comparing horizontal and vertical
/// absolute differences separately.
pub fn adjustment_loss_with_grad(
    adjusted: &Field,
    target: &Field,
) -> Result<(LossBreakdown, Field, Field)> {
    adjusted.ensure_same_shape(target)?;
    let (mse, mut ga, mut gb) = reflectance_similarity_with_grad(adjusted, target)?;
    let (a, b) = (grad(adjusted), grad(target));
    let n = (2 * adjusted.len()) as f64;
    let mut value = 0.0;
    let mut up_a = [a.dx.clone(), a.dy.clone()];
    let mut up_b = [b.dx.clone(), b.dy.clone()];
    for (dir, (fa, fb)) in [(&a.dx, &b.dx), (&a.dy, &b.dy)].into_iter().enumerate() {
        for i in 0..fa.len() {
            let (p, q) = (fa.data()[i], fb.data()[i]);
            let e = p.abs() - q.abs();
            value += e * e;
            up_a[dir].data_mut()[i] = 2.0 * e * sign(p) / n;
            up_b[dir].data_mut()[i] = -2.0 * e * sign(q) / n;
        }
    }
    let value = value / n;
    let ext_a = grad_adjoint(&up_a[0], &up_a[1]);
    let ext_b = grad_adjoint(&up_b[0], &up_b[1]);
    for i in 0..ga.len() {
        ga.data_mut()[i] += ext_a.data()[i];
        gb.data_mut()[i] += ext_b.data()[i];
    }
    let breakdown = LossBreakdown {
        total: mse + value,
        terms: vec![("mse", mse), ("grad_abs_mse", value)],
    };
    Ok((breakdown, ga, gb))
}

//! Functional regulariser: Monte Carlo prediction samples at context points,
//! per-cell moment fits, and summed divergences between the live model and
//! the previous task's model (or the functional prior on the first task).
//!
//! Output components are treated as mutually independent, so the divergence
//! over a task's outputs is the sum of univariate divergences over every
//! `(output dimension, context point)` cell.

use crate::bnn::{forward, ModelView};
use crate::distributions::{fit_moments, Divergence, Family, UnivariateFit};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tensor::DiffArray;

/// Inputs at which live and reference predictions are compared.
#[derive(Clone, Debug)]
pub struct ContextSet {
    /// Task the points stand for.
    pub task: usize,
    /// Output head evaluated at these points.
    pub head: usize,
    /// `(N_C, input_dim)` constant array.
    pub inputs: DiffArray,
}

impl ContextSet {
    pub fn len(&self) -> usize {
        self.inputs.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// What the live model is pulled towards.
#[derive(Clone, Copy, Debug)]
pub enum Reference<'a> {
    /// Previous task's frozen posterior.
    Snapshot(&'a ModelView),
    /// Zero-mean Gaussian functional prior with the given per-output variance.
    Prior { variance: f64 },
}

/// `(S_C, D, N_C)` block of head logits at the context points, one slice per
/// weight draw. Tracked when `model` is tracked.
pub fn draw_prediction_samples(
    model: &ModelView,
    context: &ContextSet,
    samples: usize,
    seed: u64,
) -> Result<DiffArray> {
    if samples < 2 {
        return Err(Error::TooFewSamples {
            op: "draw_prediction_samples",
            needed: 2,
            got: samples,
        });
    }
    if context.is_empty() {
        return Err(Error::Invalid("context set is empty".into()));
    }
    let width = model.head_width(context.head)?;
    let n = context.len();
    let slices = (0..samples)
        .map(|j| {
            let weights = model.sample_weights(context.head, derive_seed(seed, &[j as u64]))?;
            Ok(forward(&weights, &context.inputs)?
                .transpose()?
                .reshape(&[1, width, n])?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DiffArray::concat(&slices, 0)?)
}

/// Fits one univariate distribution per `(k, ξ)` cell over the sample axis.
pub fn fit_marginals(block: &DiffArray, family: Family) -> Result<UnivariateFit> {
    fit_moments(block, family)
}

/// Functional prior grid of the given shape, mapped to `family` by moment
/// matching: Gaussian σ = √v, Laplace b = √(v/2), Cauchy γ = √v.
pub fn functional_prior(family: Family, variance: f64, shape: &[usize]) -> Result<UnivariateFit> {
    if variance.is_nan() || variance <= 0.0 {
        return Err(Error::Config(format!("prior variance must be > 0, got {variance}")));
    }
    let scale = match family {
        Family::Gaussian | Family::Cauchy => variance.sqrt(),
        Family::Laplace => (variance / 2.0).sqrt(),
    };
    let n = shape.iter().product();
    Ok(UnivariateFit {
        family,
        location: DiffArray::constant(shape, vec![0.0; n])?,
        scale: DiffArray::constant(shape, vec![scale; n])?,
    })
}

/// `Σ_k Σ_ξ D[live(k, ξ) || reference(k, ξ)]`; for `Gw` the summand is the
/// squared univariate distance.
pub fn regularisation_term(
    live: &UnivariateFit,
    reference: &UnivariateFit,
    divergence: Divergence,
) -> Result<DiffArray> {
    if live.location.shape() != reference.location.shape() {
        return Err(Error::Tensor(crate::tensor::TensorError::ShapeMismatch {
            op: "regularisation_term",
            lhs: live.location.shape().to_vec(),
            rhs: reference.location.shape().to_vec(),
        }));
    }
    Ok(divergence.evaluate(live, reference)?.sum())
}

/// Settings of the regulariser for one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct RegulariserSettings {
    pub divergence: Divergence,
    pub samples: usize,
    pub lambda: f64,
    /// Number of examples in the likelihood batch.
    pub batch_size: usize,
}

/// `λ · Σ_τ (N_β / N_Cτ) · regularisation_term(τ)`.
pub fn total_regulariser(
    live: &ModelView,
    reference: Reference<'_>,
    contexts: &[ContextSet],
    settings: RegulariserSettings,
    seed: u64,
) -> Result<DiffArray> {
    if !settings.lambda.is_finite() || settings.lambda < 0.0 {
        return Err(Error::Config(format!(
            "lambda must be finite and >= 0, got {}",
            settings.lambda
        )));
    }
    if settings.lambda == 0.0 || contexts.is_empty() {
        return Ok(DiffArray::scalar(0.0));
    }
    let family = settings.divergence.family();
    let mut total: Option<DiffArray> = None;
    for (i, ctx) in contexts.iter().enumerate() {
        let live_block = draw_prediction_samples(live, ctx, settings.samples, derive_seed(seed, &[i as u64, 0]))?;
        let live_fit = fit_marginals(&live_block, family)?;
        let ref_fit = match reference {
            Reference::Snapshot(view) => {
                let block = draw_prediction_samples(view, ctx, settings.samples, derive_seed(seed, &[i as u64, 1]))?;
                fit_marginals(&block.detach(), family)?
            }
            Reference::Prior { variance } => functional_prior(family, variance, live_fit.location.shape())?,
        };
        let balance = settings.batch_size as f64 / ctx.len() as f64;
        let term = regularisation_term(&live_fit, &ref_fit, settings.divergence)?.mul_scalar(balance);
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    Ok(total.expect("non-empty contexts").mul_scalar(settings.lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bnn::{Architecture, VariationalParams};
    use crate::distributions::kl_gaussian;
    use crate::tensor::Tape;

    fn arch() -> Architecture {
        Architecture::new(3, vec![5], vec![2]).unwrap()
    }

    fn context(n: usize) -> ContextSet {
        ContextSet {
            task: 0,
            head: 0,
            inputs: crate::data::sample_uniform_context(3, n, 1).unwrap(),
        }
    }

    fn floored(seed: u64) -> VariationalParams {
        let mut p = VariationalParams::init(&arch(), 1e-3, seed).unwrap();
        for b in p.blocks_mut().iter_mut().filter(|b| b.name.ends_with("rho")) {
            b.values.iter_mut().for_each(|v| *v = -60.0);
        }
        p
    }

    #[test]
    fn block_shape_matches_context_layout() {
        let a = Architecture::new(3, vec![5], vec![2]).unwrap();
        let view = VariationalParams::init(&a, 0.05, 0).unwrap().constant_view();
        let block = draw_prediction_samples(&view, &context(40), 30, 3).unwrap();
        assert_eq!(block.shape(), &[30, 2, 40]);
        let again = draw_prediction_samples(&view, &context(40), 30, 3).unwrap();
        assert_eq!(block.values(), again.values());
    }

    #[test]
    fn floored_sigma_gives_identical_slices() {
        let view = floored(0).constant_view();
        let block = draw_prediction_samples(&view, &context(4), 5, 1).unwrap();
        let slice = 2 * 4;
        for j in 1..5 {
            assert_eq!(block.values()[..slice], block.values()[j * slice..(j + 1) * slice]);
        }
    }

    #[test]
    fn too_few_context_samples() {
        let view = floored(0).constant_view();
        assert!(matches!(
            draw_prediction_samples(&view, &context(4), 1, 0),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn constant_block_fits_at_floor() {
        let m = [1.0, 2.0, 3.0, 4.0];
        let block = DiffArray::constant(&[3, 2, 2], m.iter().cycle().take(12).copied().collect()).unwrap();
        let fit = fit_marginals(&block, Family::Gaussian).unwrap();
        assert_eq!(fit.location.values(), &m);
        assert!(fit
            .scale
            .values()
            .iter()
            .all(|&s| s == crate::distributions::SCALE_FLOOR));
    }

    #[test]
    fn symmetric_cauchy_cells() {
        let block = DiffArray::constant(&[3, 1, 2], vec![-1.0, -1.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let fit = fit_marginals(&block, Family::Cauchy).unwrap();
        assert_eq!(fit.location.values(), &[0.0, 0.0]);
        assert_eq!(fit.scale.values(), &[1.0, 1.0]);
    }

    fn grid(m: &[f64], s: &[f64]) -> UnivariateFit {
        UnivariateFit {
            family: Family::Gaussian,
            location: DiffArray::constant(&[2, 2], m.to_vec()).unwrap(),
            scale: DiffArray::constant(&[2, 2], s.to_vec()).unwrap(),
        }
    }

    #[test]
    fn term_is_sum_of_cells() {
        let p = grid(&[0.0, 1.0, -1.0, 2.0], &[1.0, 0.5, 2.0, 1.5]);
        let q = grid(&[0.5, 1.0, 0.0, -1.0], &[1.0, 1.0, 0.3, 2.0]);
        let total = regularisation_term(&p, &q, Divergence::Gkl).unwrap().item();
        let mut expected = 0.0;
        for i in 0..4 {
            let pi = UnivariateFit::new(Family::Gaussian, p.location.values()[i], p.scale.values()[i]);
            let qi = UnivariateFit::new(Family::Gaussian, q.location.values()[i], q.scale.values()[i]);
            expected += kl_gaussian(&pi, &qi).unwrap().item();
        }
        assert!((total - expected).abs() < 1e-12);
        assert_eq!(regularisation_term(&p, &p, Divergence::Gkl).unwrap().item(), 0.0);
        let one = UnivariateFit::new(Family::Gaussian, 0.0, 1.0);
        assert!(regularisation_term(&p, &one, Divergence::Gkl).is_err());
    }

    #[test]
    fn lambda_zero_and_negative() {
        let view = floored(0).constant_view();
        let s = RegulariserSettings {
            divergence: Divergence::Gkl,
            samples: 3,
            lambda: 0.0,
            batch_size: 8,
        };
        let r = total_regulariser(&view, Reference::Prior { variance: 1e-3 }, &[context(4)], s, 0).unwrap();
        assert_eq!(r.item(), 0.0);
        let neg = RegulariserSettings { lambda: -1.0, ..s };
        assert!(total_regulariser(&view, Reference::Prior { variance: 1e-3 }, &[context(4)], neg, 0).is_err());
    }

    #[test]
    fn balance_factor_scales_each_task() {
        let live = VariationalParams::init(&arch(), 0.1, 1).unwrap().constant_view();
        let snap = VariationalParams::init(&arch(), 0.1, 2).unwrap().constant_view();
        let ctx = context(40);
        let unit = RegulariserSettings {
            divergence: Divergence::Gw,
            samples: 4,
            lambda: 1.0,
            batch_size: 40,
        };
        let base = total_regulariser(&live, Reference::Snapshot(&snap), std::slice::from_ref(&ctx), unit, 5)
            .unwrap()
            .item();
        let scaled = RegulariserSettings {
            batch_size: 128,
            ..unit
        };
        let r = total_regulariser(&live, Reference::Snapshot(&snap), &[ctx], scaled, 5)
            .unwrap()
            .item();
        assert!((r - 3.2 * base).abs() < 1e-9 * r.abs());
    }

    #[test]
    fn snapshot_block_carries_no_gradient() {
        let params = VariationalParams::init(&arch(), 0.1, 1).unwrap();
        let snap = VariationalParams::init(&arch(), 0.1, 2).unwrap().constant_view();
        let tape = Tape::new();
        let (live, leaves) = params.track(&tape).unwrap();
        let s = RegulariserSettings {
            divergence: Divergence::Gkl,
            samples: 4,
            lambda: 1.0,
            batch_size: 8,
        };
        let r = total_regulariser(&live, Reference::Snapshot(&snap), &[context(5)], s, 0).unwrap();
        let g = r.backward().unwrap();
        assert!(leaves.iter().any(|l| g.wrt(l).iter().any(|&v| v != 0.0)));
    }
}

use mcfrcl::distributions::Divergence;
use mcfrcl_wasm_demo::{continual_demo, divergence_curves, fit_all, DemoSettings};

#[test]
fn curves_share_a_grid_and_match_the_divergence() {
    let c = divergence_curves(Divergence::Gkl, (0.0, 1.0), (1.0, 2.0), 101).unwrap();
    assert_eq!(c.xs.len(), 101);
    assert_eq!(c.p.len(), 101);
    let expected = 2f64.ln() + (1.0 + 1.0) / 8.0 - 0.5;
    assert!((c.value - expected).abs() < 1e-12);
    assert!(divergence_curves(Divergence::Gw, (0.0, 0.0), (0.0, 1.0), 10).is_err());
}

#[test]
fn fits_recover_simple_moments() {
    let samples = [1.0, 2.0, 3.0, 4.0];
    let f = fit_all(&samples, 8).unwrap();
    assert_eq!(f.fits.len(), 3);
    assert!((f.fits[0].location - 2.5).abs() < 1e-12);
    assert!((f.fits[0].scale - 1.25f64.sqrt()).abs() < 1e-12);
    assert!((f.fits[2].location - 2.5).abs() < 1e-12);
    assert!((f.fits[2].scale - 1.0).abs() < 1e-12);
    assert!(fit_all(&[1.0], 8).is_err());
}

#[test]
fn demo_run_reports_every_stage() {
    let run = continual_demo(DemoSettings {
        divergence: Divergence::Gw,
        lambda: 0.1,
        epochs: 2,
        seed: 1,
        grid_size: 8,
    })
    .unwrap();
    assert_eq!(run.accuracy.len(), 3);
    assert_eq!(run.decisions.len(), 3);
    assert!(run.decisions.iter().all(|d| d.len() == 64 && d.iter().all(|&c| c < 6)));
    assert!(!run.points.is_empty());
}

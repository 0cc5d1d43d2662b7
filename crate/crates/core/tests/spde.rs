use shevar_core::model::ModelSpec;
use shevar_core::rng::RngStream;
use shevar_core::simulate::{spatial_scaling_check, SpdeSimulator};
use shevar_core::stats::{mean, std_error};
use shevar_core::variations::{extract_increments, power_variation, SamplingDesign};

fn design(delta: f64, steps: usize, modes: usize, oversampling: usize) -> SamplingDesign {
    let mut d = SamplingDesign::single_point(delta, steps);
    d.spatial_modes = modes;
    d.oversampling = oversampling;
    d
}

#[test]
fn additive_increments_have_unit_variance_past_burn_in() {
    let alpha = 0.5;
    let d = design(1.0 / 4096.0, 65, 2048, 1);
    let burn = d.burn_in;
    let sim = SpdeSimulator::new(ModelSpec::additive(alpha, 1.0).unwrap(), d.clone()).unwrap();
    let sq: Vec<f64> = (0..2000)
        .map(|r| {
            let p = sim.run(&RngStream::new(404, r)).unwrap();
            let inc = extract_increments(&p, &d, alpha).unwrap();
            inc.values[burn][0].powi(2)
        })
        .collect();
    let (m, se) = (mean(&sq), std_error(&sq));
    assert!((m - 1.0).abs() < 3.0 * se, "{m} ± {se}");
}

/// Oversampling 16 with two noise substeps and oversampling 32 with one
/// consume the same Gaussian draws, so the two schemes are coupled.
#[test]
fn halving_the_micro_step_is_within_monte_carlo_error() {
    let alpha = 0.5;
    let model = ModelSpec::parabolic_anderson(alpha, 0.5).unwrap();
    let mut coarse = design(1.0 / 1024.0, 1024, 512, 16);
    coarse.noise_substeps = 2;
    let fine = design(1.0 / 1024.0, 1024, 512, 32);
    let a = SpdeSimulator::new(model.clone(), coarse.clone()).unwrap();
    let b = SpdeSimulator::new(model, fine.clone()).unwrap();
    let (mut v, mut diff) = (Vec::new(), Vec::new());
    for r in 0..24 {
        let s = RngStream::new(808, r);
        let va = power_variation(2.0, &a.run(&s).unwrap().column(0), &coarse, alpha, &[1.0]).unwrap()[0];
        let vb = power_variation(2.0, &b.run(&s).unwrap().column(0), &fine, alpha, &[1.0]).unwrap()[0];
        v.push(va);
        diff.push(vb - va);
    }
    let change = mean(&diff).abs();
    assert!(change < std_error(&v), "{change} vs MC SE {}", std_error(&v));
}

#[test]
fn spatial_increments_scale_with_holder_exponent() {
    for &(alpha, seed) in &[(0.5, 3u64), (0.9, 4)] {
        let d = design(1.0 / 4096.0, 4096, 8192, 1);
        let sim = SpdeSimulator::new(ModelSpec::additive(alpha, 1.0).unwrap(), d).unwrap();
        let (_, field) = sim.run_with_field(&RngStream::new(seed, 0)).unwrap();
        let fit = spatial_scaling_check(&field, &[4, 8, 16, 32]).unwrap();
        let target = 1.0 - alpha / 2.0;
        assert!((fit.slope - target).abs() < 0.05, "alpha {alpha}: {}", fit.slope);
    }
}

use dgpemu::kernelcov::{powexp_corr_matrix, PowExpParams};
use dgpemu::pcemu::{build_basis, fit_weight_gp, predict_spectrum, PCEmulator, WeightGp, WeightGpOptions};
use dgpemu::gaussmath::{chol, correlated_normal, JitterPolicy};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

/// Curves that depend smoothly and nonlinearly on three parameters.
fn family(m: usize, n: usize, seed: u64) -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|i| -2.0 + 2.5 * i as f64 / (n - 1) as f64).collect();
    let psi = DMatrix::from_fn(m, 3, |_, j| match j {
        0 => rng.random_range(0.1..0.2),
        1 => rng.random_range(0.6..0.9),
        _ => rng.random_range(-1.0..-0.5),
    });
    let curves = DMatrix::from_fn(m, n, |i, k| {
        let (a, b, c) = (psi[(i, 0)], psi[(i, 1)], psi[(i, 2)]);
        let t = x[k];
        10.0 * a * (b * t).sin() + c * t * t / 4.0 + 0.3 * (a * b * t).exp()
    });
    (x, psi, curves)
}

#[test]
fn emulator_interpolates_training_curves() {
    let (x, psi, curves) = family(20, 60, 1);
    let emu = PCEmulator::fit(x, &curves, &psi, 20, &WeightGpOptions::default()).unwrap();
    for j in 0..20 {
        let p: Vec<f64> = psi.row(j).iter().copied().collect();
        let got = emu.predict(&p).unwrap();
        let sup = (got - curves.row(j).transpose()).amax();
        assert!(sup < 1e-3, "cosmology {j}: {sup}");
    }
}

#[test]
fn prediction_is_continuous() {
    let (x, psi, curves) = family(20, 40, 2);
    let emu = PCEmulator::fit(x, &curves, &psi, 10, &WeightGpOptions::default()).unwrap();
    let base = [0.15, 0.75, -0.7];
    let a = emu.predict(&base).unwrap();
    let b = emu.predict(&[base[0] + 1e-8, base[1] - 1e-8, base[2] + 1e-8]).unwrap();
    assert!((a - b).amax() < 1e-4);
}

#[test]
fn zero_weights_return_the_mean_curve() {
    let (_, _, curves) = family(6, 10, 3);
    let basis = build_basis(&curves, 3).unwrap();
    let inputs = DMatrix::from_fn(6, 1, |i, _| i as f64 / 5.0);
    let params = PowExpParams::new(vec![0.0], 1.95, 1.0, 1e-8).unwrap();
    let gps: Vec<WeightGp> = (0..basis.p_eta)
        .map(|i| WeightGp::from_params(i, inputs.clone(), DVector::zeros(6), params.clone()).unwrap())
        .collect();
    let got = predict_spectrum(&basis, &gps, &[0.4]).unwrap();
    assert_eq!(got, basis.mean);
    assert!(predict_spectrum(&basis, &gps[..1], &[0.4]).is_err());
}

#[test]
fn weight_gp_recovers_known_lengthscale() {
    let est: Vec<f64> = (0..20)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = DMatrix::from_fn(40, 1, |_, _| rng.random::<f64>());
            let truth = PowExpParams::new(vec![1.0], 1.95, 1.0, 1e-8).unwrap();
            let mut r = powexp_corr_matrix(&inputs, &truth).unwrap();
            for i in 0..40 {
                r[(i, i)] += 1e-8;
            }
            let gamma = correlated_normal(&chol(&r, JitterPolicy::default(), "r").unwrap(), &mut rng);
            fit_weight_gp(0, &inputs, &gamma, &WeightGpOptions::default()).unwrap().params.beta[0]
        })
        .collect();
    let med = median(est);
    assert!((med - 1.0).abs() < 0.5, "median beta {med}");
}

#[test]
fn held_out_error_falls_with_more_components() {
    // exactly three centered directions
    let m = 20;
    let n = 30;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let psi = DMatrix::from_fn(m, 2, |_, _| rng.random::<f64>());
    let curves = DMatrix::from_fn(m, n, |i, k| {
        let (a, b) = (psi[(i, 0)], psi[(i, 1)]);
        let t = x[k];
        3.0 * a * (2.0 * t).sin() + 1.5 * (b * b) * t.powi(2) + 0.5 * (a + b).powi(2) * (5.0 * t).cos()
    });
    let rank = 3;
    let mut per_p: Vec<Vec<f64>> = vec![Vec::new(); rank];
    for hold in 0..m {
        let keep: Vec<usize> = (0..m).filter(|&i| i != hold).collect();
        let c = DMatrix::from_fn(m - 1, n, |i, k| curves[(keep[i], k)]);
        let p = DMatrix::from_fn(m - 1, 2, |i, j| psi[(keep[i], j)]);
        let target = curves.row(hold).transpose();
        let at: Vec<f64> = psi.row(hold).iter().copied().collect();
        for (slot, comps) in per_p.iter_mut().zip(1..=rank) {
            let emu = PCEmulator::fit(x.clone(), &c, &p, comps, &WeightGpOptions::default()).unwrap();
            let pred = emu.predict(&at).unwrap();
            slot.push((pred - &target).norm_squared() / n as f64);
        }
    }
    let medians: Vec<f64> = per_p.into_iter().map(median).collect();
    assert!(medians.windows(2).all(|w| w[1] <= w[0]), "{medians:?}");
}

#[test]
fn artifact_round_trip_preserves_predictions() {
    let (x, psi, curves) = family(12, 25, 5);
    let emu = PCEmulator::fit(x, &curves, &psi, 10, &WeightGpOptions::default()).unwrap();
    let art = emu.to_artifact();
    let text = serde_json::to_string(&art).unwrap();
    let back = PCEmulator::from_artifact(&serde_json::from_str(&text).unwrap()).unwrap();
    let at = [0.13, 0.8, -0.9];
    assert_eq!(emu.predict(&at).unwrap(), back.predict(&at).unwrap());

    let mut wrong = art.clone();
    wrong.schema = "dgpemu.emulator/2.0".into();
    assert!(matches!(PCEmulator::from_artifact(&wrong), Err(dgpemu::Error::Schema { .. })));
}

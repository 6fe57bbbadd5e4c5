mod common;

use blxs_core::adapters::{induced_cov, AdapterModule, SiteId, SiteKind};
use blxs_core::{Matrix, RngStream};
use common::{cholesky_jittered, dense_product, empirical_cov, random, rel_frobenius, vec_of};

const DRAWS: usize = 200_000;
const TOLERANCE: f64 = 0.03;

#[test]
fn induced_covariance_matches_monte_carlo() {
    let mut rng = RngStream::new(99);
    for (m, n, r) in [(6, 4, 3), (4, 6, 2), (5, 3, 1), (3, 3, 3)] {
        let w = random(&mut rng, m, n);
        let ad = AdapterModule::init_lora_xs(SiteId::new(0, SiteKind::Dense), &w, r, 16.0).unwrap();
        let g = random(&mut rng, r * r, r * r);
        let sigma = Matrix::from_fn(r * r, r * r, |i, j| {
            (0..r * r).map(|k| g.get(i, k) * g.get(j, k)).sum::<f64>()
                + if i == j { 0.1 } else { 0.0 }
        });
        let analytic = induced_cov(&ad, &sigma).unwrap().cov;
        let l = cholesky_jittered(&sigma);
        let mut draw_rng = rng.derive("mc");
        let mc = empirical_cov(m * n, DRAWS, || {
            let z: Vec<f64> = (0..r * r).map(|_| draw_rng.normal()).collect();
            let vr: Vec<f64> = (0..r * r)
                .map(|i| (0..=i).map(|k| l.get(i, k) * z[k]).sum())
                .collect();
            // vec is column-stacking: entry (i, j) of R sits at j·r + i.
            let core = Matrix::from_fn(r, r, |i, j| vr[j * r + i]);
            vec_of(&dense_product(&dense_product(&ad.a, &core), &ad.b))
        });
        let err = rel_frobenius(&mc, &analytic);
        assert!(err <= TOLERANCE, "{m}x{n} r={r}: relative error {err}");
    }
}

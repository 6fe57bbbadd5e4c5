//! Fast oracle checks bundled into the binary.

use serde::Serialize;

use super::checkpoint::{decode_posterior, encode_posterior, Checkpoint};
use crate::adapters::{
    build_projector, count_table, AdapterModule, AdapterSet, ShapePreset, SiteId, SiteKind,
    REFERENCE_GRID,
};
use crate::linalg::{kron, truncated_svd, Matrix};
use crate::metrics::{brier, ece, nll};
use crate::nn::{loss, Backbone, BackboneConfig, Batch, MlpConfig};
use crate::rng::RngStream;
use crate::swag::{swag_sample, SwagState};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name,
        passed,
        detail: detail.into(),
    }
}

fn random(rng: &mut RngStream, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.normal())
}

pub fn run() -> Vec<Check> {
    vec![
        count_check(),
        subspace_check(),
        svd_check(),
        metric_check(),
        gradient_check(),
        swag_check(),
    ]
}

fn count_check() -> Check {
    let expect: [(u64, &str); 10] = [
        (196_608, "0.2M"),
        (786_432, "0.8M"),
        (6_144, "6k"),
        (60_000, "60k"),
        (2_359_296, "2.4M"),
        (9_437_184, "9.4M"),
        (5_505_024, "5.5M"),
        (73_728, "74k"),
        (720_000, "0.7M"),
        (420_000, "0.4M"),
    ];
    match count_table(&ShapePreset::RobertaLarge) {
        Ok(rows) => {
            let ok = rows.len() == REFERENCE_GRID.len()
                && rows
                    .iter()
                    .zip(expect)
                    .all(|(r, (n, s))| r.params == n && r.display == s);
            check("parameter-count table", ok, format!("{} rows", rows.len()))
        }
        Err(e) => check("parameter-count table", false, e.to_string()),
    }
}

fn subspace_check() -> Check {
    let mut rng = RngStream::new(11);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let m = 2 + rng.below(4);
        let n = 2 + rng.below(4);
        let r = 1 + rng.below(m.min(n));
        let w = random(&mut rng, m, n);
        let mut ad = match AdapterModule::init_lora_xs(SiteId::new(0, SiteKind::Dense), &w, r, 4.0)
        {
            Ok(a) => a,
            Err(e) => return check("subspace identity", false, e.to_string()),
        };
        let core = random(&mut rng, r, r);
        ad.core = Some(core.clone());
        let lhs =
            ad.a.matmul(&core)
                .and_then(|ar| ar.matmul(&ad.b))
                .map(|x| x.vec());
        let rhs = kron(&ad.b.transpose(), &ad.a).and_then(|k| k.mul_vec(&core.vec()));
        let mut set = AdapterSet::new();
        set.insert(ad.clone());
        let proj = build_projector(&set).and_then(|p| p.mul_vec(&set.pack().values));
        match (lhs, rhs, proj) {
            (Ok(l), Ok(r2), Ok(p)) => {
                let upd = ad.effective_update().vec();
                for i in 0..l.len() {
                    worst = worst
                        .max((l[i] - r2[i]).abs())
                        .max((upd[i] - ad.scale() * p[i]).abs());
                }
            }
            _ => return check("subspace identity", false, "shape error"),
        }
    }
    check(
        "subspace identity",
        worst <= 1e-10,
        format!("max abs err {worst:.2e}"),
    )
}

fn svd_check() -> Check {
    let mut rng = RngStream::new(12);
    let w = random(&mut rng, 7, 5);
    match truncated_svd(&w, 5) {
        Ok(f) => {
            let err = f.reconstruct().max_abs_diff(&w);
            check(
                "svd reconstruction",
                err <= 1e-10,
                format!("max abs err {err:.2e}"),
            )
        }
        Err(e) => check("svd reconstruction", false, e.to_string()),
    }
}

fn metric_check() -> Check {
    let p = Matrix::from_rows(&[[0.9, 0.1], [0.6, 0.4]]);
    let (e, _) = ece(&p, &[0, 1], 10);
    let half = Matrix::from_rows(&[[0.5, 0.5]]);
    let n = nll(&half, &[0]);
    let b = brier(&Matrix::from_rows(&[[0.8, 0.2]]), &[0]);
    let ok = (e - 0.35).abs() < 1e-12
        && (n - std::f64::consts::LN_2).abs() < 1e-12
        && (b - 0.08).abs() < 1e-12;
    check(
        "metric hand cases",
        ok,
        format!("ece {e}, nll {n}, brier {b}"),
    )
}

fn gradient_check() -> Check {
    let cfg = BackboneConfig::Mlp(MlpConfig {
        hidden: vec![5, 5],
        ..MlpConfig::default()
    });
    let rng = RngStream::new(13);
    let run = || -> crate::Result<f64> {
        let net = Backbone::init(&cfg, &mut rng.derive("net"))?;
        let site = SiteId::new(1, SiteKind::Dense);
        let mut ad =
            AdapterModule::init_lora_xs(site, net.site_weight(site).expect("site"), 2, 4.0)?;
        let mut draw = rng.derive("core");
        ad.core = Some(random(&mut draw, 2, 2));
        let mut set = AdapterSet::new();
        set.insert(ad);
        let x = random(&mut draw, 6, 2);
        let batch = Batch::new(x, 1, vec![0, 1, 2, 0, 1, 2])?;
        let (_, g) = net.loss_and_grads(&batch, &set, None)?;
        let theta = set.pack().values;
        let mut worst = 0.0f64;
        for i in 0..theta.len() {
            let mut t = theta.clone();
            t[i] += 1e-5;
            set.unpack(&t)?;
            let up = loss(&net.forward(&batch, &set)?, &batch.labels);
            t[i] -= 2e-5;
            set.unpack(&t)?;
            let down = loss(&net.forward(&batch, &set)?, &batch.labels);
            let fd = (up - down) / 2e-5;
            worst = worst.max((fd - g.values[i]).abs() / fd.abs().max(g.values[i].abs()).max(1e-4));
        }
        Ok(worst)
    };
    match run() {
        Ok(w) => check(
            "adapter gradient",
            w <= 1e-4,
            format!("max rel err {w:.2e}"),
        ),
        Err(e) => check("adapter gradient", false, e.to_string()),
    }
}

fn swag_check() -> Check {
    let mut rng = RngStream::new(14);
    let snaps: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..4).map(|_| rng.normal()).collect())
        .collect();
    let mut state = SwagState::new(4, 3);
    for s in &snaps {
        if let Err(e) = state.collect(s) {
            return check("swag statistics", false, e.to_string());
        }
    }
    let mut worst = 0.0f64;
    for i in 0..4 {
        let mean = snaps.iter().map(|s| s[i]).sum::<f64>() / 6.0;
        let sq = snaps.iter().map(|s| s[i] * s[i]).sum::<f64>() / 6.0;
        worst = worst
            .max((mean - state.mean[i]).abs())
            .max((sq - state.sq_mean[i]).abs());
    }
    let round_trip =
        state.finalize().and_then(|post| {
            let back = decode_posterior(&Checkpoint::from_bytes(
                &encode_posterior(&post).to_bytes()?,
            )?)?;
            Ok(swag_sample(&post, &mut RngStream::new(1))
                == swag_sample(&back, &mut RngStream::new(1)))
        });
    let ok = worst <= 1e-10 && matches!(round_trip, Ok(true));
    check("swag statistics", ok, format!("max abs err {worst:.2e}"))
}

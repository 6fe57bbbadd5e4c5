use super::*;
use crate::adapters::{AdapterMatrix, AdapterModule, SiteKind};

fn random(rng: &mut RngStream, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| scale * rng.normal())
}

fn mlp(hidden: Vec<usize>, classes: usize, seed: u64) -> Backbone {
    let cfg = MlpConfig {
        input: 2,
        hidden,
        classes,
        ..MlpConfig::default()
    };
    Backbone::init(&BackboneConfig::Mlp(cfg), &mut RngStream::new(seed)).unwrap()
}

fn small_transformer(seed: u64) -> Backbone {
    let cfg = TransformerConfig {
        input: 3,
        d_model: 6,
        d_ff: 8,
        blocks: 2,
        seq_len: 4,
        classes: 3,
    };
    Backbone::init(&BackboneConfig::Transformer(cfg), &mut RngStream::new(seed)).unwrap()
}

fn batch_for(net: &Backbone, n: usize, rng: &mut RngStream) -> Batch {
    let cfg = net.config();
    let seq = cfg.seq_len();
    let x = random(rng, n * seq, cfg.input(), 1.0);
    let labels = (0..n).map(|_| rng.below(cfg.classes())).collect();
    Batch::new(x, seq, labels).unwrap()
}

/// Adapters on every site with nonzero trainable tensors.
fn perturbed_adapters(
    net: &Backbone,
    mode: AdapterMode,
    r: usize,
    rng: &mut RngStream,
    head: bool,
) -> AdapterSet {
    let mut set = AdapterSet::new();
    for (site, m, n) in net.config().adapter_sites(mode) {
        let mut a = match mode {
            AdapterMode::Lora => AdapterModule::init_lora(site, m, n, r, 4.0, rng).unwrap(),
            AdapterMode::LoraXs => {
                AdapterModule::init_lora_xs(site, net.site_weight(site).unwrap(), r, 4.0).unwrap()
            }
        };
        match mode {
            AdapterMode::Lora => {
                a.a = random(rng, m, r, 0.3);
                a.b = random(rng, r, n, 0.3);
            }
            AdapterMode::LoraXs => a.core = Some(random(rng, r, r, 0.2)),
        }
        set.insert(a);
    }
    if head {
        let h = net.head().w0.shape();
        set = {
            let mut s = set.with_head_delta(h.0, h.1);
            let mut theta = s.pack().values;
            let n = theta.len();
            let hl = h.0 * h.1 + h.1;
            for v in &mut theta[n - hl..] {
                *v = 0.1 * rng.normal();
            }
            s.unpack(&theta).unwrap();
            s
        };
    }
    set
}

fn finite_difference_check(net: &Backbone, adapters: &AdapterSet, batch: &Batch) {
    let (_, grad) = net.loss_and_grads(batch, adapters, None).unwrap();
    let theta = adapters.pack().values;
    assert_eq!(grad.len(), theta.len());
    let h = 1e-5;
    let mut probe = adapters.clone();
    for i in 0..theta.len() {
        let mut t = theta.clone();
        t[i] += h;
        probe.unpack(&t).unwrap();
        let up = loss(&net.forward(batch, &probe).unwrap(), &batch.labels);
        t[i] -= 2.0 * h;
        probe.unpack(&t).unwrap();
        let down = loss(&net.forward(batch, &probe).unwrap(), &batch.labels);
        let fd = (up - down) / (2.0 * h);
        let g = grad.values[i];
        let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-4);
        assert!(
            rel <= 1e-4,
            "coordinate {i}: analytic {g} vs fd {fd} (rel {rel})"
        );
    }
}

#[test]
fn identity_network() {
    let cfg = MlpConfig {
        input: 2,
        hidden: vec![2],
        classes: 2,
        activation: Activation::Identity,
        adapt_input_layer: false,
    };
    let layer = DenseLayer::new(Matrix::identity(2), vec![0.0; 2]);
    let head = DenseLayer::new(Matrix::identity(2), vec![0.0; 2]);
    let net = Backbone::Mlp(Mlp::from_layers(cfg, vec![layer], head).unwrap());
    let x = Matrix::from_rows(&[[0.5, -1.0], [2.0, 3.0]]);
    let batch = Batch::new(x.clone(), 1, vec![0, 1]).unwrap();
    assert_eq!(net.forward(&batch, &AdapterSet::new()).unwrap(), x);
}

#[test]
fn zero_update_matches_frozen_forward() {
    let mut rng = RngStream::new(1);
    for net in [mlp(vec![8, 8, 8], 3, 2), small_transformer(3)] {
        let batch = batch_for(&net, 5, &mut rng);
        let frozen = net.forward(&batch, &AdapterSet::new()).unwrap();
        for mode in [AdapterMode::Lora, AdapterMode::LoraXs] {
            let mut set = AdapterSet::new();
            for (site, m, n) in net.config().adapter_sites(mode) {
                let a = match mode {
                    AdapterMode::Lora => {
                        AdapterModule::init_lora(site, m, n, 2, 16.0, &mut rng).unwrap()
                    }
                    AdapterMode::LoraXs => {
                        AdapterModule::init_lora_xs(site, net.site_weight(site).unwrap(), 2, 16.0)
                            .unwrap()
                    }
                };
                set.insert(a);
            }
            assert!(!set.is_empty());
            assert_eq!(net.forward(&batch, &set).unwrap(), frozen);
        }
    }
}

#[test]
fn mlp_matches_straight_line_oracle() {
    let net = mlp(vec![16], 2, 9);
    let Backbone::Mlp(m) = &net else {
        unreachable!()
    };
    let mut rng = RngStream::new(10);
    let batch = batch_for(&net, 6, &mut rng);
    let logits = net.forward(&batch, &AdapterSet::new()).unwrap();
    let (w1, b1) = (&m.layers[0].w0, &m.layers[0].bias);
    let (w2, b2) = (&m.head.w0, &m.head.bias);
    for s in 0..6 {
        let x = batch.inputs.row(s);
        let mut h = [0.0; 16];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut z = b1[j];
            for (i, xi) in x.iter().enumerate() {
                z += xi * w1.get(i, j);
            }
            *hj = z.tanh();
        }
        for (c, bias) in b2.iter().enumerate() {
            let mut o = *bias;
            for (j, hj) in h.iter().enumerate() {
                o += hj * w2.get(j, c);
            }
            assert!((logits.get(s, c) - o).abs() < 1e-10);
        }
    }
}

#[test]
fn loss_cases() {
    let c = 5;
    let uniform = Matrix::zeros(3, c);
    assert!((loss(&uniform, &[0, 2, 4]) - (c as f64).ln()).abs() < 1e-12);
    let l = loss(&Matrix::from_rows(&[[4.0f64.ln(), 0.0]]), &[0]);
    assert!((l - 0.223_143_551_314_209_7).abs() < 1e-12);
    let sat = loss(&Matrix::from_rows(&[[1e6, -1e6]]), &[0]);
    assert!((0.0..=1e-6).contains(&sat));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = RngStream::new(4);
    let p = softmax(&random(&mut rng, 20, 4, 30.0));
    for i in 0..20 {
        assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gradients_match_finite_differences_mlp() {
    let mut rng = RngStream::new(30);
    for (seed, mode, head) in [
        (1, AdapterMode::LoraXs, false),
        (2, AdapterMode::Lora, false),
        (3, AdapterMode::LoraXs, true),
    ] {
        let net = mlp(vec![6, 5, 4], 3, seed);
        let adapters = perturbed_adapters(&net, mode, 2, &mut rng, head);
        let batch = batch_for(&net, 7, &mut rng);
        finite_difference_check(&net, &adapters, &batch);
    }
}

#[test]
fn gradients_match_finite_differences_transformer() {
    let mut rng = RngStream::new(31);
    for (seed, mode) in [(1, AdapterMode::LoraXs), (2, AdapterMode::Lora)] {
        let net = small_transformer(seed);
        let adapters = perturbed_adapters(&net, mode, 2, &mut rng, false);
        let batch = batch_for(&net, 3, &mut rng);
        finite_difference_check(&net, &adapters, &batch);
    }
}

#[test]
fn full_gradients_match_finite_differences() {
    let mut rng = RngStream::new(44);
    for net in [mlp(vec![4, 3], 3, 5), small_transformer(6)] {
        let batch = batch_for(&net, 3, &mut rng);
        let (_, g) = net.full_loss_and_grads(&batch).unwrap();
        let theta = net.flat_params();
        let mut probe = net.clone();
        let step = (theta.len() / 40).max(1);
        for i in (0..theta.len()).step_by(step) {
            let mut t = theta.clone();
            t[i] += 1e-5;
            probe.set_flat_params(&t).unwrap();
            let up = loss(
                &probe.forward(&batch, &AdapterSet::new()).unwrap(),
                &batch.labels,
            );
            t[i] -= 2e-5;
            probe.set_flat_params(&t).unwrap();
            let down = loss(
                &probe.forward(&batch, &AdapterSet::new()).unwrap(),
                &batch.labels,
            );
            let fd = (up - down) / 2e-5;
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-4);
            assert!(rel <= 1e-4, "param {i}: {} vs {fd}", g[i]);
        }
    }
}

#[test]
fn symmetric_start_has_ln2_loss() {
    // Zero head weights make every logit equal regardless of input.
    let Backbone::Mlp(mut m) = mlp(vec![4, 4], 2, 8) else {
        unreachable!()
    };
    m.head.w0 = Matrix::zeros(4, 2);
    let net = Backbone::Mlp(m);
    let mut set = AdapterSet::new();
    set.insert(
        AdapterModule::init_lora_xs(
            SiteId::new(1, SiteKind::Dense),
            net.site_weight(SiteId::new(1, SiteKind::Dense)).unwrap(),
            2,
            16.0,
        )
        .unwrap(),
    );
    let batch = Batch::new(Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]), 1, vec![0, 1]).unwrap();
    let (l, g) = net.loss_and_grads(&batch, &set, None).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(g.values.iter().all(|v| v.is_finite()));
}

#[test]
fn duplicated_rows_leave_gradient_unchanged() {
    let mut rng = RngStream::new(50);
    let net = mlp(vec![5, 5], 3, 1);
    let adapters = perturbed_adapters(&net, AdapterMode::LoraXs, 2, &mut rng, false);
    let batch = batch_for(&net, 4, &mut rng);
    let doubled = batch.select(&[0, 1, 2, 3, 0, 1, 2, 3]);
    let (l1, g1) = net.loss_and_grads(&batch, &adapters, None).unwrap();
    let (l2, g2) = net.loss_and_grads(&doubled, &adapters, None).unwrap();
    assert!((l1 - l2).abs() < 1e-12);
    for (a, b) in g1.values.iter().zip(&g2.values) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn permuting_rows_permutes_logits() {
    let mut rng = RngStream::new(51);
    for net in [mlp(vec![5, 5], 3, 1), small_transformer(2)] {
        let adapters = perturbed_adapters(&net, AdapterMode::LoraXs, 2, &mut rng, false);
        let batch = batch_for(&net, 5, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let a = net.forward(&batch, &adapters).unwrap().select_rows(&perm);
        let b = net.forward(&batch.select(&perm), &adapters).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}

#[test]
fn gradient_subset_and_unknown_ids() {
    let mut rng = RngStream::new(52);
    let net = mlp(vec![5, 5, 5], 3, 1);
    let adapters = perturbed_adapters(&net, AdapterMode::Lora, 2, &mut rng, false);
    let batch = batch_for(&net, 4, &mut rng);
    let (_, all) = net.loss_and_grads(&batch, &adapters, None).unwrap();
    let id = ParamId::Site {
        site: SiteId::new(2, SiteKind::Dense),
        matrix: AdapterMatrix::B,
    };
    let (_, sub) = net.loss_and_grads(&batch, &adapters, Some(&[id])).unwrap();
    assert_eq!(sub.layout.len(), 1);
    assert_eq!(sub.values, all.slice(id).unwrap());
    let bad = ParamId::Site {
        site: SiteId::new(2, SiteKind::Dense),
        matrix: AdapterMatrix::R,
    };
    assert!(matches!(
        net.loss_and_grads(&batch, &adapters, Some(&[bad])),
        Err(Error::UnknownParam(_))
    ));
}

#[test]
fn shape_mismatch_rejected() {
    let net = mlp(vec![4], 2, 1);
    let batch = Batch::new(Matrix::zeros(2, 3), 1, vec![0, 1]).unwrap();
    assert!(net.forward(&batch, &AdapterSet::new()).is_err());
    let bad_label = Batch::new(Matrix::zeros(1, 2), 1, vec![5]).unwrap();
    assert!(net
        .loss_and_grads(&bad_label, &AdapterSet::new(), None)
        .is_err());
}

fn separable_blobs(n: usize, rng: &mut RngStream) -> Batch {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let c = i % 3;
        let angle = std::f64::consts::TAU * c as f64 / 3.0;
        rows.push([
            3.0 * angle.cos() + 0.3 * rng.normal(),
            3.0 * angle.sin() + 0.3 * rng.normal(),
        ]);
        labels.push(c);
    }
    Batch::new(Matrix::from_rows(&rows), 1, labels).unwrap()
}

#[test]
fn pretrain_reaches_target_on_separable_blobs() {
    let data = separable_blobs(300, &mut RngStream::new(3));
    let cfg = BackboneConfig::Mlp(MlpConfig::default());
    let out = pretrain(&cfg, &PretrainConfig::default(), &data, &RngStream::new(4)).unwrap();
    assert!(out.source_accuracy >= 0.95, "{}", out.source_accuracy);
    let again = pretrain(&cfg, &PretrainConfig::default(), &data, &RngStream::new(4)).unwrap();
    assert_eq!(out.net.flat_params(), again.net.flat_params());
}

#[test]
fn pretrain_with_zero_cap_is_identity() {
    let data = separable_blobs(30, &mut RngStream::new(3));
    let cfg = BackboneConfig::Mlp(MlpConfig::default());
    let pc = PretrainConfig {
        max_epochs: 0,
        ..PretrainConfig::default()
    };
    let out = pretrain(&cfg, &pc, &data, &RngStream::new(4)).unwrap();
    let init = Backbone::init(&cfg, &mut RngStream::new(4).derive("init")).unwrap();
    assert_eq!(out.net, init);
    assert_eq!(out.epochs, 0);
}

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::*;
use crate::autodiff::gradient;
use crate::hfpi::HfpiConfig;
use crate::model::{power_used, BeamMatrix, ChannelSample, SystemConfig};
use crate::rsbnn::{train, Learner, TrainConfig};
use crate::Error;

fn dataset(k: usize, nt: usize, n: usize, seed: u64) -> Dataset {
    let cfg = SystemConfig::from_snr_db(nt, k, 20.0).unwrap();
    generate_channels(&cfg, &ChannelParams::default(), n, seed).unwrap()
}

fn bits(d: &Dataset) -> Vec<u64> {
    d.samples
        .iter()
        .flat_map(|s| {
            s.channels
                .iter()
                .flat_map(|z| [z.re.to_bits(), z.im.to_bits()])
                .chain(s.distances.iter().map(|x| x.to_bits()))
                .chain(s.large_scale_gains.iter().map(|x| x.to_bits()))
                .collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn dataset_round_trip_is_bit_exact() {
    let d = dataset(3, 2, 5, 9);
    let bytes = write_dataset(&d).unwrap();
    assert_eq!(bytes.len(), 72 + 5 * 8 * (2 * 3 * 2 + 2 * 3));
    let back = read_dataset(&bytes).unwrap();
    assert_eq!(back.header, d.header);
    assert_eq!(back.params, d.params);
    assert_eq!(bits(&back), bits(&d));
    assert_eq!(write_dataset(&back).unwrap(), bytes);
}

#[test]
fn dataset_layout() {
    let h = DMatrix::from_fn(2, 2, |n, k| Complex64::new((10 * k + n) as f64, -1.0 - (10 * k + n) as f64));
    let s = ChannelSample::new(h, vec![0.5, 0.25], vec![3.0, 4.0]).unwrap();
    let d = Dataset {
        header: DatasetHeader {
            num_users: 2,
            num_tx_antennas: 2,
            sample_count: 1,
            snr_db: 10.0,
            seed: 7,
        },
        params: ChannelParams::default(),
        samples: vec![s],
    };
    let bytes = write_dataset(&d).unwrap();
    assert_eq!(&bytes[..8], b"RSBEAMv1");
    let reals: Vec<f64> = bytes[72..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(
        reals,
        vec![0.0, 1.0, 10.0, 11.0, -1.0, -2.0, -11.0, -12.0, 3.0, 4.0, 0.5, 0.25]
    );
}

#[test]
fn generation_is_reproducible_to_the_byte() {
    let a = write_dataset(&dataset(2, 3, 16, 42)).unwrap();
    let b = write_dataset(&dataset(2, 3, 16, 42)).unwrap();
    let c = write_dataset(&dataset(2, 3, 16, 43)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn truncated_dataset_names_both_sizes() {
    let bytes = write_dataset(&dataset(2, 2, 3, 1)).unwrap();
    let cut = &bytes[..bytes.len() - 5];
    match read_dataset(cut) {
        Err(Error::Truncated { expected, actual }) => {
            assert_eq!(expected, bytes.len() as u64);
            assert_eq!(actual, cut.len() as u64);
        }
        other => panic!("expected truncation, got {other:?}"),
    }
    assert!(matches!(read_dataset(&bytes[..20]), Err(Error::Truncated { .. })));
}

#[test]
fn header_only_zero_count_rejected() {
    let mut bytes = write_dataset(&dataset(2, 2, 1, 1)).unwrap();
    bytes.truncate(72);
    bytes[16..24].copy_from_slice(&0u64.to_le_bytes());
    match read_dataset(&bytes) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 16),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn wrong_magic_or_trailing_bytes_rejected() {
    let mut bytes = write_dataset(&dataset(2, 2, 1, 1)).unwrap();
    bytes.push(0);
    assert!(matches!(read_dataset(&bytes), Err(Error::Format { .. })));
    bytes.pop();
    bytes[7] = b'2';
    assert!(matches!(read_dataset(&bytes), Err(Error::Format { offset: 0, .. })));
}

#[test]
fn dataset_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    let d = dataset(2, 2, 4, 3);
    save_dataset(&d, &path).unwrap();
    assert_eq!(bits(&load_dataset(&path).unwrap()), bits(&d));
    match load_dataset(&dir.path().join("missing.bin")) {
        Err(Error::Io { path, .. }) => assert!(path.ends_with("missing.bin")),
        other => panic!("expected an io error, got {other:?}"),
    }
}

#[test]
fn single_user_labels_sit_on_the_simplex_point() {
    let d = dataset(1, 3, 4, 5);
    let set = generate_labels(&d, &HfpiConfig::default()).unwrap();
    assert_eq!(set.excluded, 0);
    for l in set.duals.labels.iter().map(|l| l.as_ref().unwrap()) {
        assert_eq!(l.first.lambda, vec![1.0]);
        assert_eq!(l.last.lambda, vec![1.0]);
    }
}

#[test]
fn labels_satisfy_dual_invariants_and_reproduce() {
    let d = dataset(3, 3, 8, 6);
    let a = generate_labels(&d, &HfpiConfig::default()).unwrap();
    let b = generate_labels(&d, &HfpiConfig::default()).unwrap();
    assert_eq!(write_dual_labels(&a.duals).unwrap(), write_dual_labels(&b.duals).unwrap());
    assert_eq!(write_beam_labels(&a.beams).unwrap(), write_beam_labels(&b.beams).unwrap());
    let cfg = d.system_config().unwrap();
    for (l, p) in a.duals.labels.iter().zip(&a.beams.beams) {
        let (Some(l), Some(p)) = (l, p) else { continue };
        for xi in [&l.first, &l.last] {
            assert!((xi.lambda.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert!(xi.mu > 0.0);
        }
        assert!((power_used(p) - cfg.total_power).abs() <= 1e-9 * cfg.total_power);
    }
}

#[test]
fn unconverged_samples_are_excluded() {
    let d = dataset(2, 2, 3, 6);
    let hcfg = HfpiConfig {
        max_outer: 1,
        outer_tol: 1e-300,
        ..Default::default()
    };
    let set = generate_labels(&d, &hcfg).unwrap();
    assert_eq!(set.excluded, 3);
    assert!(set.duals.labels.iter().all(Option::is_none));
    let back = read_dual_labels(&write_dual_labels(&set.duals).unwrap()).unwrap();
    assert_eq!(back, set.duals);
}

#[test]
fn label_files_round_trip_with_missing_rows() {
    let d = dataset(2, 3, 4, 8);
    let mut set = generate_labels(&d, &HfpiConfig::default()).unwrap();
    set.duals.labels[1] = None;
    set.beams.beams[2] = None;
    let duals = read_dual_labels(&write_dual_labels(&set.duals).unwrap()).unwrap();
    assert_eq!(duals, set.duals);
    let beams = read_beam_labels(&write_beam_labels(&set.beams).unwrap()).unwrap();
    assert_eq!(beams, set.beams);
    duals.key.check(&d).unwrap();
    assert!(duals.key.check(&dataset(2, 3, 4, 9)).is_err());

    let bytes = write_dual_labels(&set.duals).unwrap();
    assert_eq!(bytes.len(), 32 + 4 * 2 * 3 * 8);
    assert!(matches!(read_dual_labels(&bytes[..40]), Err(Error::Truncated { .. })));
    assert!(matches!(read_beam_labels(&bytes), Err(Error::Format { offset: 0, .. })));
}

#[test]
fn invalid_label_row_reports_its_offset() {
    let d = dataset(2, 2, 2, 8);
    let set = generate_labels(&d, &HfpiConfig::default()).unwrap();
    let mut bytes = write_dual_labels(&set.duals).unwrap();
    // lambda_1 of the second row
    let at = 32 + 6 * 8;
    bytes[at..at + 8].copy_from_slice(&5.0f64.to_le_bytes());
    match read_dual_labels(&bytes) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, at as u64),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn beam_flattening() {
    let p = BeamMatrix(DMatrix::from_fn(2, 3, |n, j| Complex64::new((10 * j + n) as f64, -((10 * j + n) as f64))));
    let v = flatten_beams(&p);
    assert_eq!(v, vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0, -0.0, -1.0, -10.0, -11.0, -20.0, -21.0]);
    assert_eq!(unflatten_beams(&v, 2, 3).unwrap(), p);
    assert!(unflatten_beams(&v, 3, 3).is_err());
}

#[test]
fn blackbox_dimensions() {
    let m = BlackboxModel::new(4, 4, 0).unwrap();
    assert_eq!(m.input_dim(), 32);
    assert_eq!(m.output_dim(), 40);
    assert_eq!(m.hidden_dim, 128);
}

#[test]
fn blackbox_output_is_at_full_power() {
    let d = dataset(3, 4, 20, 2);
    let cfg = d.system_config().unwrap();
    for seed in 0..5 {
        let m = BlackboxModel::new(3, 4, seed).unwrap();
        for s in &d.samples {
            let p = m.infer(&cfg, s).unwrap();
            assert!((power_used(&p) - cfg.total_power).abs() <= 1e-12 * cfg.total_power);
        }
    }
}

#[test]
fn blackbox_graph_matches_plain_inference() {
    let d = dataset(2, 3, 4, 3);
    let cfg = d.system_config().unwrap();
    let m = BlackboxModel::new(2, 3, 4).unwrap();
    let batch: Vec<&ChannelSample> = d.samples.iter().collect();
    let g = m.forward(&cfg, &batch).unwrap();
    let out = g.tape.value(g.output()).data().to_vec();
    let per = 3 * 3 * 2;
    for (i, s) in d.samples.iter().enumerate() {
        let p = m.infer(&cfg, s).unwrap();
        for n in 0..3 {
            for j in 0..3 {
                let at = i * per + (n * 3 + j) * 2;
                assert!((out[at] - p.0[(n, j)].re).abs() < 1e-12);
                assert!((out[at + 1] - p.0[(n, j)].im).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn blackbox_mse_gradient_matches_finite_differences() {
    let d = dataset(2, 2, 3, 5);
    let cfg = d.system_config().unwrap();
    let labels = generate_labels(&d, &HfpiConfig::default()).unwrap().beams.beams;
    let targets: Vec<&BeamMatrix> = labels.iter().map(|l| l.as_ref().unwrap()).collect();
    let batch: Vec<&ChannelSample> = d.samples.iter().collect();
    let mut model = BlackboxModel::with_hidden(2, 2, 4, 1).unwrap();
    for b in [1, 3, 5] {
        model.params[b].data_mut().fill(0.1);
    }
    let loss_of = |m: &BlackboxModel| {
        let mut g = m.forward(&cfg, &batch).unwrap();
        let loss = m.supervised_loss(&mut g, &targets).unwrap();
        let grads = gradient(&g.tape, loss, &g.params).unwrap();
        (g.tape.value(loss).item(), grads)
    };
    let (loss, analytic) = loss_of(&model);
    // oracle for the value: mean over all entries of (P - P_label)^2
    let mut want = 0.0;
    for (s, t) in d.samples.iter().zip(&targets) {
        let p = model.infer(&cfg, s).unwrap();
        want += (&p.0 - &t.0).iter().map(|z| z.norm_sqr()).sum::<f64>();
    }
    want /= (3 * 2 * 3 * 2) as f64;
    assert!((loss - want).abs() < 1e-12 * want.max(1.0));

    let params = model.parameters();
    let (mut diff, mut norm) = (0.0, 0.0);
    for pi in 0..params.len() {
        for j in 0..params[pi].len() {
            let shifted = |delta: f64| {
                let mut p = params.clone();
                p[pi].data_mut()[j] += delta;
                let mut m = model.clone();
                m.set_parameters(&p).unwrap();
                loss_of(&m).0
            };
            let fd = (shifted(1e-6) - shifted(-1e-6)) / 2e-6;
            diff += (analytic[pi].data()[j] - fd).powi(2);
            norm += fd * fd;
        }
    }
    assert!(diff.sqrt() / norm.sqrt() < 1e-5, "relative error {}", diff.sqrt() / norm.sqrt());
}

#[test]
fn blackbox_round_trip_and_rejects() {
    let m = BlackboxModel::with_hidden(2, 3, 5, 9).unwrap();
    let bytes = write_blackbox(&m);
    assert_eq!(read_blackbox(&bytes).unwrap(), m);
    assert!(matches!(read_blackbox(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(read_blackbox(&bad), Err(Error::Format { offset: 0, .. })));
}

#[test]
fn blackbox_training_is_deterministic_and_improves() {
    let d = dataset(2, 2, 24, 11);
    let cfg = d.system_config().unwrap();
    let labels = generate_labels(&d, &HfpiConfig::default()).unwrap().beams.beams;
    let tcfg = TrainConfig {
        batch_size: 8,
        learning_rate: 1e-3,
        supervised_epochs: 3,
        unsupervised_epochs: 3,
        patience: 5,
        seed: 2,
        validation_fraction: 0.25,
    };
    let run = || {
        let mut m = BlackboxModel::new(2, 2, 6).unwrap();
        let h = train(&mut m, &cfg, &d.samples, &labels, &tcfg).unwrap();
        (m, h)
    };
    let (m1, h1) = run();
    let (m2, h2) = run();
    assert_eq!(m1, m2);
    assert_eq!(h1, h2);
    let first = &h1.epochs[0];
    let best_sup = h1
        .epochs
        .iter()
        .filter(|e| e.phase == first.phase)
        .map(|e| e.validation_loss)
        .fold(f64::INFINITY, f64::min);
    assert!(best_sup <= first.validation_loss);
}

#[test]
fn mean_std_and_median_oracles() {
    let (m, s) = bench::mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
    assert_eq!(m, 5.0);
    assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-15);
    assert_eq!(bench::mean_std(&[3.0]), (3.0, 0.0));
    assert_eq!(bench::median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(bench::median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
}

#[test]
fn solver_benchmark_sum_rate_is_reproducible() {
    let d = dataset(2, 2, 5, 12);
    let schemes = [Scheme::FpHfpi(HfpiConfig::default())];
    let a = benchmark(&d, &schemes).unwrap();
    let b = benchmark(&d, &schemes).unwrap();
    assert_eq!(a[0].mean_sr.to_bits(), b[0].mean_sr.to_bits());
    assert_eq!(a[0].scheme, "fp-hfpi");
    assert!(a[0].extra.starts_with("mean_outer="));
    assert!(a[0].mean_time_s > 0.0);
}

#[test]
fn benchmark_covers_every_scheme() {
    let d = dataset(2, 2, 2, 13);
    let unfold = crate::rsbnn::UnfoldModel::new(2, 2, Default::default(), 0).unwrap();
    let bb = BlackboxModel::new(2, 2, 0).unwrap();
    let rows = benchmark(&d, &[Scheme::RsBnn(unfold), Scheme::Blackbox(bb)]).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.scheme.as_str()).collect();
    assert_eq!(names, vec!["rs-bnn", "blackbox-mlp"]);
    assert!(rows.iter().all(|r| r.mean_sr > 0.0 && r.std_sr >= 0.0));
}

#[test]
fn csv_appends_under_one_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.csv");
    let row = |name: &str, sr: f64| BenchRow {
        scheme: name.into(),
        num_users: 2,
        num_tx_antennas: 3,
        snr_db: 20.0,
        mean_sr: sr,
        std_sr: 0.5,
        mean_time_s: 1e-3,
        median_time_s: 9e-4,
        extra: "a=1;b=2".into(),
    };
    append_csv(&path, &[row("fp-hfpi", 1.25)]).unwrap();
    append_csv(&path, &[row("rs-bnn", 1.0 / 3.0)]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.matches("scheme,K,N_t").count(), 1);
    assert!(text.starts_with(bench::SCHEMA_LINE));
    let rows = read_csv(&path).unwrap();
    assert_eq!(rows, vec![row("fp-hfpi", 1.25), row("rs-bnn", 1.0 / 3.0)]);

    let other = dir.path().join("other.csv");
    std::fs::write(&other, "x,y\n1,2\n").unwrap();
    assert!(append_csv(&other, &[row("fp-hfpi", 1.0)]).is_err());
}

use ndarray::Array2;
use qlvm_core::analysis::{geodesic, jacobian_frobenius, mean_shift, smooth_field, DensityField};
use qlvm_core::baselines::{BaselineConfig, BaselineTrainer, BoundKind, GaussianEncoder};
use qlvm_core::data::{
    encode_idx_images, encode_idx_labels, load_checkpoint, load_idx, save_checkpoint, split, synth_mixture,
    Dataset, MixtureSpec,
};
use qlvm_core::kv::KvMap;
use qlvm_core::lattice::{fibonacci_rule, PointSet};
use qlvm_core::net::{init_network, Activation, Embedding, Network, NetworkSpec, OutputHead};
use qlvm_core::qlvm::{posterior_table, qmc_log_evidence, LatticeSpec, QlvmTrainer, TrainConfig};

fn data(n: usize, seed: u64) -> Dataset {
    let spec = MixtureSpec {
        clusters: 4,
        samples: n,
        side: 8,
        sigma: 1.2,
        jitter: 1.0,
    };
    synth_mixture(&spec, seed).unwrap()
}

fn decoder(embedding: Embedding, out: usize, seed: u64) -> Network {
    let spec = NetworkSpec {
        latent_dim: 2,
        embedding,
        widths: vec![16, 32, out],
        activation: Activation::Relu,
        head: OutputHead::Bernoulli,
    };
    init_network(spec, seed).unwrap()
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

#[test]
fn thread_count_does_not_change_results() {
    let d = data(120, 3);
    let net = decoder(Embedding::Periodic, d.dim(), 5);
    let x = d.values().view();
    let points = PointSet::fixed(&fibonacci_rule(14).unwrap());
    let run = || {
        let ev = qmc_log_evidence(&net, x, &points).unwrap();
        let table = posterior_table(&net, x, &points).unwrap();
        let w = table.weights().sum_axis(ndarray::Axis(0)).to_vec();
        let field = DensityField::new(points.clone(), w).unwrap();
        let clusters = mean_shift(&field, 0.1, None).unwrap();
        let jac = jacobian_frobenius(&net, points.points().view(), 1e-4).unwrap();
        let smooth = smooth_field(points.points().view(), &jac.norms, 0.02).unwrap();
        let path = geodesic(&field, ndarray::arr1(&[0.1, 0.1]).view(), ndarray::arr1(&[0.7, 0.4]).view(), 1e-12).unwrap();
        (ev, table.weights().clone(), clusters, jac, smooth, path)
    };
    let one = in_pool(1, run);
    let four = in_pool(4, run);
    assert_eq!(one, four);
}

#[test]
fn qlvm_resume_from_file_continues_bit_exactly() {
    let d = data(200, 1);
    let x = d.values().view();
    let mut config = TrainConfig::new(LatticeSpec::Fibonacci { k: 9 }, 11);
    config.epochs = 4;
    config.batch_size = 32;
    let mut straight = QlvmTrainer::new(config.clone(), decoder(Embedding::Periodic, d.dim(), 2)).unwrap();
    straight.fit(x).unwrap();

    let mut first = QlvmTrainer::new(config, decoder(Embedding::Periodic, d.dim(), 2)).unwrap();
    first.run_epoch(x).unwrap();
    first.run_epoch(x).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &first.to_checkpoint(&KvMap::new())).unwrap();
    let mut resumed = QlvmTrainer::from_checkpoint(&load_checkpoint(&path).unwrap()).unwrap();
    resumed.fit(x).unwrap();

    assert_eq!(resumed.epoch, 4);
    assert_eq!(resumed.decoder.params(), straight.decoder.params());
    assert_eq!(resumed.adam, straight.adam);
    let tail: Vec<f64> = straight.trace[2..].iter().map(|r| r.objective).collect();
    assert_eq!(resumed.trace.iter().map(|r| r.objective).collect::<Vec<_>>(), tail);
}

#[test]
fn baseline_resume_from_file_continues_bit_exactly() {
    let d = data(150, 2);
    let x = d.values().view();
    let mut config = BaselineConfig::new(BoundKind::Iwae, 4);
    config.samples = 3;
    config.epochs = 3;
    config.batch_size = 50;
    let make = || {
        let enc = GaussianEncoder::new(d.dim(), &[32, 16], 2, 8).unwrap();
        BaselineTrainer::new(config.clone(), enc, decoder(Embedding::Identity, d.dim(), 9)).unwrap()
    };
    let mut straight = make();
    straight.fit(x).unwrap();
    let mut first = make();
    first.run_epoch(x).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("iwae.ckpt");
    save_checkpoint(&path, &first.to_checkpoint(&KvMap::new())).unwrap();
    let mut resumed = BaselineTrainer::from_checkpoint(&load_checkpoint(&path).unwrap()).unwrap();
    resumed.fit(x).unwrap();
    assert_eq!(resumed.decoder.params(), straight.decoder.params());
    assert_eq!(resumed.encoder.network().params(), straight.encoder.network().params());
}

#[test]
fn idx_files_feed_training() {
    let d = data(60, 4);
    let labels: Vec<u8> = d.labels().unwrap().iter().map(|&l| l as u8).collect();
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    std::fs::write(&img, encode_idx_images(&d)).unwrap();
    std::fs::write(&lab, encode_idx_labels(&labels)).unwrap();
    let loaded = load_idx(&img, Some(&lab)).unwrap();
    assert_eq!(loaded.image_shape(), Some((8, 8)));
    assert_eq!(loaded.labels(), d.labels());
    let quantized: Array2<f64> = d.values().mapv(|v| (v * 255.0).round() / 255.0);
    assert_eq!(loaded.values(), &quantized);

    let (train, test) = split(&loaded, 0.75, 1).unwrap();
    assert_eq!((train.len(), test.len()), (45, 15));
    let mut config = TrainConfig::new(LatticeSpec::Fibonacci { k: 8 }, 1);
    config.epochs = 2;
    let mut t = QlvmTrainer::new(config, decoder(Embedding::Periodic, 64, 1)).unwrap();
    t.fit(train.values().view()).unwrap();
    assert!(t.trace.iter().all(|r| r.objective.is_finite()));
}

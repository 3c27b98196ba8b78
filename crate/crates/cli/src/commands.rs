//! One function per CLI verb. Each computes all of its artifacts in memory and
//! returns them; the caller writes them out only on success.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use qlvm_core::analysis::{geodesic, jacobian_frobenius, mean_shift, smooth_field, traversal, ClusterResult, DensityField};
use qlvm_core::baselines::{elbo, iwae_bound, BaselineTrainer, BoundKind, GaussianEncoder};
use qlvm_core::data::{load_checkpoint, Checkpoint, ModelKind};
use qlvm_core::export::{fmt_f64, image_strip, pgm, points_csv, rasterize, Csv};
use qlvm_core::lattice::PointSet;
use qlvm_core::net::{init_network, Embedding, Network};
use qlvm_core::qlvm::{embed, evaluate_bound, posterior_table, sample_prior, EpochRecord, LatticeSpec, QlvmTrainer};

use crate::config::{Endpoint, Settings};
use crate::error::{config, Result};
use crate::output::Outputs;

/// Data rows per posterior table, to bound memory on large lattices.
const POSTERIOR_CHUNK: usize = 256;

fn config_text(command: &str, s: &Settings) -> String {
    format!("# command: {command}\n{}", s.kv.to_text())
}

fn new_outputs(command: &str, s: &Settings) -> Outputs {
    let mut out = Outputs::default();
    out.add("config.txt", config_text(command, s));
    out
}

fn trace_csv(trace: &[EpochRecord]) -> Csv {
    let mut csv = Csv::new(&["epoch", "objective"]);
    for r in trace {
        csv.row(&[r.epoch.to_string(), fmt_f64(r.objective)]);
    }
    csv
}

/// A trainer for either model family.
enum Trainer {
    Qlvm(QlvmTrainer),
    Baseline(BaselineTrainer),
}

impl Trainer {
    fn fresh(s: &Settings, data_dim: usize) -> Result<Self> {
        let decoder = init_network(s.decoder_spec(data_dim), s.seed)?;
        Ok(match s.model {
            ModelKind::Qlvm => Trainer::Qlvm(QlvmTrainer::new(s.train_config(), decoder)?),
            _ => {
                let encoder = GaussianEncoder::new(data_dim, &s.encoder_hidden, s.latent_dim(), s.seed.wrapping_add(1))?;
                Trainer::Baseline(BaselineTrainer::new(s.baseline_config(), encoder, decoder)?)
            }
        })
    }

    fn resume(ck: &Checkpoint, epochs: usize) -> Result<Self> {
        Ok(match ck.kind {
            ModelKind::Qlvm => {
                let mut t = QlvmTrainer::from_checkpoint(ck)?;
                t.config.epochs = epochs;
                Trainer::Qlvm(t)
            }
            _ => {
                let mut t = BaselineTrainer::from_checkpoint(ck)?;
                t.config.epochs = epochs;
                Trainer::Baseline(t)
            }
        })
    }

    fn fit(&mut self, x: ArrayView2<f64>) -> Result<()> {
        match self {
            Trainer::Qlvm(t) => t.fit(x)?,
            Trainer::Baseline(t) => t.fit(x)?,
        }
        Ok(())
    }

    fn trace(&self) -> &[EpochRecord] {
        match self {
            Trainer::Qlvm(t) => &t.trace,
            Trainer::Baseline(t) => &t.trace,
        }
    }

    fn epoch_seconds(&self) -> &[f64] {
        match self {
            Trainer::Qlvm(t) => &t.epoch_seconds,
            Trainer::Baseline(t) => &t.epoch_seconds,
        }
    }

    fn checkpoint(&self, kv: &qlvm_core::kv::KvMap) -> Checkpoint {
        match self {
            Trainer::Qlvm(t) => t.to_checkpoint(kv),
            Trainer::Baseline(t) => t.to_checkpoint(kv),
        }
    }
}

pub fn train(s: &Settings, resume: Option<&Checkpoint>) -> Result<Outputs> {
    let (train, _) = s.splits()?;
    let mut trainer = match resume {
        Some(ck) => {
            if ck.config.get_str("seed").ok() != s.kv.get_str("seed").ok() {
                return Err(config("--seed must match the seed of the checkpoint being resumed"));
            }
            Trainer::resume(ck, s.epochs)?
        }
        None => Trainer::fresh(s, train.dim())?,
    };
    trainer.fit(train.values().view())?;
    let mut out = new_outputs("train", s);
    out.add("model.ckpt", trainer.checkpoint(&s.kv).to_bytes());
    out.add("trace.csv", trace_csv(trainer.trace()).as_str());
    Ok(out)
}

/// Repeats a seeded estimator `reps` times; returns (mean, sample std).
fn repeated<F: FnMut(u64) -> Result<f64>>(reps: usize, seed: u64, mut f: F) -> Result<(f64, f64)> {
    let values = (0..reps as u64).map(|i| f(seed.wrapping_add(i))).collect::<Result<Vec<_>>>()?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok((mean, std))
}

fn encoder_of(ck: &Checkpoint) -> Result<GaussianEncoder> {
    let net = ck.encoder.clone().ok_or_else(|| config("baseline checkpoint has no encoder"))?;
    Ok(GaussianEncoder::from_network(net)?)
}

/// Decoder reading latents from the unit cube; baseline decoders get the inverse-CDF prior map.
fn torus_decoder(ck: &Checkpoint) -> Result<Network> {
    Ok(match ck.kind {
        ModelKind::Qlvm => ck.decoder.clone(),
        _ => ck.decoder.with_embedding(Embedding::GaussianIcdf)?,
    })
}

pub fn evaluate(s: &Settings, ck: &Checkpoint) -> Result<Outputs> {
    let (_, test) = s.splits()?;
    let x = test.values().view();
    let rule = s.eval_lattice.build()?;
    let mut csv = Csv::new(&["estimator", "samples", "shifts", "mean", "std"]);
    if ck.kind != ModelKind::Qlvm {
        let encoder = encoder_of(ck)?;
        let (name, samples) = match ck.kind {
            ModelKind::Iwae => (BoundKind::Iwae, s.samples),
            _ => (BoundKind::Elbo, s.eval_elbo_samples),
        };
        let (mean, std) = repeated(s.eval_shifts, s.seed, |seed| {
            Ok(match name {
                BoundKind::Iwae => iwae_bound(&encoder, &ck.decoder, x, samples, seed)?,
                BoundKind::Elbo => elbo(&encoder, &ck.decoder, x, samples, seed)?,
            }
            .mean())
        })?;
        csv.row(&[name.name().to_string(), samples.to_string(), s.eval_shifts.to_string(), fmt_f64(mean), fmt_f64(std)]);
    }
    let report = evaluate_bound(&torus_decoder(ck)?, x, &rule, s.eval_shifts, s.seed)?;
    csv.row(&[
        "qmc".to_string(),
        rule.count().to_string(),
        s.eval_shifts.to_string(),
        fmt_f64(report.mean),
        fmt_f64(report.std),
    ]);
    let mut out = new_outputs("evaluate", s);
    out.add("bounds.csv", csv.as_str());
    Ok(out)
}

pub fn sweep(s: &Settings) -> Result<Outputs> {
    if s.sweep_values.is_empty() {
        return Err(config("sweep.values must list at least one value"));
    }
    let (train, test) = s.splits()?;
    let mut csv = Csv::new(&["value", "seconds_per_epoch", "test_objective"]);
    for &v in &s.sweep_values {
        let mut run = s.clone();
        match s.model {
            ModelKind::Qlvm => run.lattice = LatticeSpec::for_count(v, s.latent_dim()),
            _ => run.samples = v,
        }
        run.train_config().validate()?;
        run.baseline_config().validate()?;
        let mut trainer = Trainer::fresh(&run, train.dim())?;
        trainer.fit(train.values().view())?;
        let secs = trainer.epoch_seconds();
        let per_epoch = secs.iter().sum::<f64>() / secs.len().max(1) as f64;
        let x = test.values().view();
        let bound = match &trainer {
            Trainer::Qlvm(t) => evaluate_bound(&t.decoder, x, &t.rule, s.eval_shifts, s.seed)?.mean,
            Trainer::Baseline(t) => match t.config.kind {
                BoundKind::Elbo => elbo(&t.encoder, &t.decoder, x, v, s.seed)?.mean(),
                BoundKind::Iwae => iwae_bound(&t.encoder, &t.decoder, x, v, s.seed)?.mean(),
            },
        };
        csv.row(&[v.to_string(), format!("{per_epoch:.3}"), fmt_f64(-bound)]);
    }
    let mut out = new_outputs("sweep", s);
    out.add("sweep.csv", csv.as_str());
    Ok(out)
}

/// Square image side for `width` pixels, else a single row.
fn image_shape(width: usize) -> (usize, usize) {
    let side = (width as f64).sqrt().round() as usize;
    if side * side == width {
        (side, side)
    } else {
        (1, width)
    }
}

fn strip(images: ArrayView2<f64>) -> Result<Vec<u8>> {
    Ok(image_strip(images, image_shape(images.ncols()))?)
}

/// Adds `name.pgm` and its sidecar when the latent space is 2D.
fn add_raster(out: &mut Outputs, name: &str, points: ArrayView2<f64>, values: &[f64], size: usize) -> Result<()> {
    if points.ncols() != 2 {
        return Ok(());
    }
    let grid = rasterize(points, values, size)?;
    let (bytes, sidecar) = pgm(&grid, size, size)?;
    out.add(format!("{name}.pgm"), bytes);
    out.add(format!("{name}.pgm.txt"), sidecar);
    Ok(())
}

/// Posterior quantities over the analysis data on the unshifted analysis lattice.
struct Posterior {
    decoder: Network,
    field: DensityField,
    means: Array2<f64>,
    modes: Array2<f64>,
    resultant: Vec<f64>,
    labels: Option<Vec<u32>>,
}

fn posterior(s: &Settings, ck: &Checkpoint) -> Result<Posterior> {
    let data = s.analysis_dataset()?;
    let decoder = torus_decoder(ck)?;
    let points = PointSet::fixed(&s.analysis_lattice.build()?);
    let (d, m) = (points.dim(), points.len());
    let mut weights = Array1::<f64>::zeros(m);
    let mut means = Array2::zeros((0, d));
    let mut modes = Array2::zeros((0, d));
    let mut resultant = Vec::with_capacity(data.len());
    for chunk in data.values().axis_chunks_iter(Axis(0), POSTERIOR_CHUNK) {
        let table = posterior_table(&decoder, chunk, &points)?;
        weights += &table.weights().sum_axis(Axis(0));
        let e = embed(&table);
        means.append(Axis(0), e.means.view()).map_err(|e| config(e.to_string()))?;
        modes.append(Axis(0), e.modes.view()).map_err(|e| config(e.to_string()))?;
        resultant.extend(e.resultant);
    }
    Ok(Posterior {
        decoder,
        field: DensityField::new(points, weights.to_vec())?,
        means,
        modes,
        resultant,
        labels: data.labels().map(<[u32]>::to_vec),
    })
}

pub fn embed_cmd(s: &Settings, ck: &Checkpoint) -> Result<Outputs> {
    let p = posterior(s, ck)?;
    let d = p.means.ncols();
    let mut header: Vec<String> = vec!["index".into(), "label".into()];
    header.extend((0..d).map(|k| format!("mean{k}")));
    header.extend((0..d).map(|k| format!("mode{k}")));
    header.push("resultant".into());
    let mut csv = Csv::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    for i in 0..p.means.nrows() {
        let mut row = vec![i.to_string(), p.labels.as_ref().map_or(String::new(), |l| l[i].to_string())];
        row.extend(p.means.row(i).iter().map(|&v| fmt_f64(v)));
        row.extend(p.modes.row(i).iter().map(|&v| fmt_f64(v)));
        row.push(fmt_f64(p.resultant[i]));
        csv.row(&row);
    }
    let mut out = new_outputs("embed", s);
    out.add("embedding.csv", csv.as_str());
    Ok(out)
}

pub fn density(s: &Settings, ck: &Checkpoint) -> Result<Outputs> {
    let p = posterior(s, ck)?;
    let pts = p.field.points().points().view();
    let mut out = new_outputs("density", s);
    out.add("density.csv", points_csv(pts, &[("density", p.field.weights())]).as_str());
    add_raster(&mut out, "density", pts, p.field.weights(), s.raster_size)?;
    Ok(out)
}

fn clusters(s: &Settings, p: &Posterior) -> Result<(ClusterResult, Array2<f64>)> {
    let seeds = match s.cluster_seeds {
        Some(spec) => spec.build()?.points(),
        None => p.modes.clone(),
    };
    Ok((mean_shift(&p.field, s.cluster_bandwidth, Some(seeds.view()))?, seeds))
}

pub fn cluster(s: &Settings, ck: &Checkpoint) -> Result<Outputs> {
    let p = posterior(s, ck)?;
    let (res, seeds) = clusters(s, &p)?;
    let c = &res.centroids;
    let members: Vec<f64> = (0..c.nrows())
        .map(|k| res.assignments.iter().filter(|a| **a == Some(k)).count() as f64)
        .collect();
    let summary = points_csv(c.view(), &[("density", &res.centroid_density), ("members", &members)]);
    let d = seeds.ncols();
    let mut header: Vec<String> = vec!["seed".into()];
    header.extend((0..d).map(|k| format!("z{k}")));
    header.push("cluster".into());
    let mut assign = Csv::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    for (i, a) in res.assignments.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(seeds.row(i).iter().map(|&v| fmt_f64(v)));
        row.push(a.map_or(String::new(), |k| k.to_string()));
        assign.row(&row);
    }
    let mut out = new_outputs("cluster", s);
    out.add("clusters.csv", summary.as_str());
    out.add("assignments.csv", assign.as_str());
    if c.nrows() > 0 {
        out.add("centroids.pgm", strip(p.decoder.decode_mean(c.view())?.view())?);
    }
    Ok(out)
}

pub fn jacobian(s: &Settings, ck: &Checkpoint) -> Result<Outputs> {
    let decoder = torus_decoder(ck)?;
    let points = s.analysis_lattice.build()?.points();
    let field = jacobian_frobenius(&decoder, points.view(), s.jacobian_step)?;
    let smoothed = smooth_field(points.view(), &field.norms, s.jacobian_smoothing)?;
    let mut out = new_outputs("jacobian", s);
    out.add("jacobian.csv", points_csv(points.view(), &[("frobenius", &field.norms)]).as_str());
    out.add("jacobian_smoothed.csv", points_csv(points.view(), &[("frobenius", &smoothed)]).as_str());
    add_raster(&mut out, "jacobian", points.view(), &field.norms, s.raster_size)?;
    add_raster(&mut out, "jacobian_smoothed", points.view(), &smoothed, s.raster_size)?;
    Ok(out)
}

pub fn geodesic_cmd(s: &Settings, ck: &Checkpoint) -> Result<Outputs> {
    let p = posterior(s, ck)?;
    let needs_clusters = matches!(s.geodesic_source, Endpoint::Centroid(_))
        || matches!(s.geodesic_destination, Endpoint::Centroid(_));
    let centroids = if needs_clusters { Some(clusters(s, &p)?.0.centroids) } else { None };
    let end = |e: &Endpoint, key: &str| -> Result<Vec<f64>> {
        match e {
            Endpoint::Point(z) => Ok(z.clone()),
            Endpoint::Centroid(i) => {
                let c = centroids.as_ref().expect("clusters computed for centroid endpoints");
                if *i >= c.nrows() {
                    return Err(config(format!("{key}: centroid {i} requested but only {} found", c.nrows())));
                }
                Ok(c.row(*i).to_vec())
            }
        }
    };
    let src = end(&s.geodesic_source, "geodesic.source")?;
    let dst = end(&s.geodesic_destination, "geodesic.destination")?;
    let path = geodesic(&p.field, src.as_slice().into(), dst.as_slice().into(), s.geodesic_epsilon)?;
    let pts = p.field.points().points();
    let z = pts.select(Axis(0), &path.indices);
    let d = z.ncols();
    let mut header: Vec<String> = vec!["step".into(), "lattice_index".into()];
    header.extend((0..d).map(|k| format!("z{k}")));
    header.extend(["step_cost".into(), "cumulative_cost".into()]);
    let mut csv = Csv::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    let mut total = 0.0;
    for (i, &idx) in path.indices.iter().enumerate() {
        let step = if i == 0 { 0.0 } else { path.step_costs[i - 1] };
        total += step;
        let mut row = vec![i.to_string(), idx.to_string()];
        row.extend(z.row(i).iter().map(|&v| fmt_f64(v)));
        row.extend([fmt_f64(step), fmt_f64(total)]);
        csv.row(&row);
    }
    let mut out = new_outputs("geodesic", s);
    out.add("path.csv", csv.as_str());
    out.add("path.pgm", strip(p.decoder.decode_mean(z.view())?.view())?);
    Ok(out)
}

fn frames_csv(z: ArrayView2<f64>, frames: ArrayView2<f64>, first: &str) -> Csv {
    let mut header: Vec<String> = vec![first.into()];
    header.extend((0..z.ncols()).map(|k| format!("z{k}")));
    header.extend((0..frames.ncols()).map(|k| format!("x{k}")));
    let mut csv = Csv::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    for (i, (zr, fr)) in z.rows().into_iter().zip(frames.rows()).enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(zr.iter().chain(fr.iter()).map(|&v| fmt_f64(v)));
        csv.row(&row);
    }
    csv
}

pub fn traverse(s: &Settings, ck: &Checkpoint) -> Result<Outputs> {
    let decoder = torus_decoder(ck)?;
    let start = Array1::from(s.traverse_start.clone());
    let dir = Array1::from(s.traverse_direction.clone());
    let (z, frames) = traversal(&decoder, start.view(), dir.view(), s.traverse_steps)?;
    let mut out = new_outputs("traverse", s);
    out.add("traversal.csv", frames_csv(z.view(), frames.view(), "step").as_str());
    out.add("traversal.pgm", strip(frames.view())?);
    Ok(out)
}

pub fn sample(s: &Settings, ck: &Checkpoint) -> Result<Outputs> {
    let decoder = torus_decoder(ck)?;
    let (z, x) = sample_prior(&decoder, s.sample_n, s.seed)?;
    let mut out = new_outputs("sample", s);
    out.add("samples.csv", frames_csv(z.view(), x.view(), "sample").as_str());
    if s.sample_n > 0 {
        out.add("samples.pgm", strip(x.view())?);
    }
    Ok(out)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(load_checkpoint(path)?)
}

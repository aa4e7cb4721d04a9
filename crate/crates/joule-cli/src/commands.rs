//! The six subcommands. Each loads what it needs, drives one joule-core
//! operation, and writes its artifacts through [`crate::artifacts`] so
//! nothing from a prior run is ever clobbered. All CSV output uses `.`
//! decimals, LF line endings, and Rust's shortest-round-trip float
//! formatting, so identical runs produce identical bytes.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use joule_core::checkpoint::{self, Checkpoint};
use joule_core::data::uniform_noise;
use joule_core::eval::{
    accuracy, auroc, ece, ood_scores, robust_accuracy, score_predictions, AttackConfig,
    AttackNorm, OodScore,
};
use joule_core::init::InformativeInit;
use joule_core::net::{conv_net, mlp, zero_output_layer, BnMode, SplitNetwork};
use joule_core::rng::{stream, stream_rng};
use joule_core::sampler::{run_chain, ChainTrace, SamplerKind};
use joule_core::trainer::{train, METRICS_CSV_HEADER};
use joule_core::{LabeledDataset, ReplayBuffer};

use crate::artifacts::{create_fresh, fresh_path, write_fresh};
use crate::config::ExperimentConfig;
use crate::dataset;

fn io_fail(e: std::io::Error) -> joule_core::Error {
    joule_core::Error::Io(e)
}

fn str_fail(msg: String) -> joule_core::Error {
    joule_core::Error::Io(std::io::Error::other(msg))
}

fn ensure_output_dir(cfg: &ExperimentConfig) -> Result<(), String> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| {
        format!(
            "cannot create output directory {}: {e}",
            cfg.output_dir.display()
        )
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, String> {
    checkpoint::load(path).map_err(|e| format!("{}: {e}", path.display()))
}

/// Builds the configured network over the (possibly reshaped) splits.
fn build_net(
    cfg: &ExperimentConfig,
    train_data: LabeledDataset,
    eval_data: LabeledDataset,
) -> Result<(SplitNetwork, LabeledDataset, LabeledDataset), String> {
    let arch = &cfg.arch;
    let mut rng = stream_rng(cfg.seed, stream::PARAM_INIT);
    if arch.conv_channels > 0 {
        let shape3 = match *train_data.input_shape() {
            [c, h, w] => [c, h, w],
            ref other => {
                return Err(format!(
                    "arch.conv_channels needs data shaped [channels, height, width]; \
                     this dataset is {other:?} (set dataset.input_shape)"
                ))
            }
        };
        let net = conv_net(
            &shape3,
            arch.conv_channels,
            &arch.hidden,
            train_data.num_classes(),
            arch.batch_norm,
            &mut rng,
        )
        .map_err(|e| format!("arch: {e}"))?;
        Ok((net, train_data, eval_data))
    } else {
        let train_data = dataset::flattened(train_data)?;
        let eval_data = dataset::flattened(eval_data)?;
        let net = mlp(
            train_data.feature_count(),
            &arch.hidden,
            train_data.num_classes(),
            arch.batch_norm,
            &mut rng,
        )
        .map_err(|e| format!("arch: {e}"))?;
        Ok((net, train_data, eval_data))
    }
}

/// Reshapes a dataset to a restored network's input, or explains why it
/// cannot fit.
fn fit_to_net(data: LabeledDataset, net: &SplitNetwork) -> Result<LabeledDataset, String> {
    if data.input_shape() == net.input_shape() {
        return Ok(data);
    }
    if data.feature_count() == net.input_shape().iter().product::<usize>() {
        return dataset::reshaped(&data, net.input_shape());
    }
    Err(format!(
        "checkpoint expects inputs shaped {:?} but the dataset provides {:?}",
        net.input_shape(),
        data.input_shape()
    ))
}

fn select_split(
    cfg: &ExperimentConfig,
    which: &str,
    net: &SplitNetwork,
) -> Result<LabeledDataset, String> {
    let (train_data, eval_data) = dataset::load_split(cfg)?;
    let data = match which {
        "train" => train_data,
        "eval" => eval_data,
        other => return Err(format!("--split: `{other}` (expected train or eval)")),
    };
    fit_to_net(data, net)
}

// ── train ────────────────────────────────────────────────────────────────

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<i32, String> {
    ensure_output_dir(cfg)?;
    let out = &cfg.output_dir;
    let snapshot = write_fresh(out, "config", "toml", &cfg.to_toml()?)?;
    println!("wrote {}", snapshot.display());

    let (train_data, eval_data) = dataset::load_split(cfg)?;
    let (mut net, train_data, eval_data) = build_net(cfg, train_data, eval_data)?;
    if cfg.arch.flat_start {
        zero_output_layer(&mut net);
    }
    let fit_opts = cfg.fit_options()?;
    let init = InformativeInit::fit(
        &train_data,
        &fit_opts,
        &mut stream_rng(cfg.seed, stream::INIT_FIT),
    )
    .map_err(|e| format!("initializer fit: {e}"))?;
    let tc = cfg.train_config()?;
    let mut buf = ReplayBuffer::new(tc.buffer_capacity, tc.rho, cfg.seed)
        .map_err(|e| format!("buffer: {e}"))?;

    let metrics_path = fresh_path(out, "metrics", "csv")?;
    let mut metrics = create_fresh(&metrics_path)?;
    writeln!(metrics, "{METRICS_CSV_HEADER}")
        .map_err(|e| format!("cannot write {}: {e}", metrics_path.display()))?;

    let every = cfg.train.checkpoint_every;
    let started = Instant::now();
    let report = train(
        &mut net,
        &train_data,
        &eval_data,
        &init,
        &mut buf,
        &tc,
        |net, buf, rec| {
            writeln!(metrics, "{}", rec.csv_row()).map_err(io_fail)?;
            metrics.flush().map_err(io_fail)?;
            println!(
                "epoch {:>4}/{}: train {:.3} eval {:.3} gap {:+.3} skips {}",
                rec.epoch, tc.epochs, rec.train_acc, rec.eval_acc, rec.energy_gap,
                rec.divergence_count
            );
            if every > 0 && rec.epoch % every == 0 && rec.epoch < tc.epochs {
                let name = format!("checkpoint-ep{:03}", rec.epoch);
                let path = fresh_path(out, &name, "ckpt").map_err(str_fail)?;
                checkpoint::save(&path, net, Some(&init), Some(buf))?;
                println!("wrote {}", path.display());
            }
            Ok(())
        },
    )
    .map_err(|e| format!("training: {e}"))?;

    let final_path = fresh_path(out, "checkpoint-final", "ckpt")?;
    checkpoint::save(&final_path, &net, Some(&init), Some(&buf))
        .map_err(|e| format!("cannot write {}: {e}", final_path.display()))?;
    println!("wrote {}", metrics_path.display());
    println!("wrote {}", final_path.display());

    if let Some(last) = report.metrics.last() {
        println!(
            "done in {:.1}s: eval accuracy {:.4}, energy gap {:+.4}, {} skipped batches, {} full propagations",
            started.elapsed().as_secs_f64(),
            last.eval_acc,
            last.energy_gap,
            report.divergence_count,
            report.full_propagations,
        );
    }
    if report.aborted {
        eprintln!(
            "training aborted: {} consecutive skipped batches — the sampler lost containment",
            tc.max_consecutive_skips
        );
        return Ok(2);
    }
    Ok(0)
}

// ── sample ───────────────────────────────────────────────────────────────

pub fn cmd_sample(
    cfg: &ExperimentConfig,
    checkpoint_path: &Path,
    n: usize,
    kind_flag: Option<&str>,
) -> Result<i32, String> {
    let ck = load_checkpoint(checkpoint_path)?;
    let (mut sampler_cfg, mut kind) = cfg.sampler_config()?;
    if let Some(s) = kind_flag {
        kind = SamplerKind::parse(s).ok_or_else(|| {
            format!("--kind: unknown sampler `{s}` (expected sgld, prox-sgld, or pyld)")
        })?;
    }

    let starts = chain_starts(&ck, n, cfg.seed)?;
    ensure_output_dir(cfg)?;
    let out_path = fresh_path(&cfg.output_dir, "samples", "csv")?;
    let mut f = create_fresh(&out_path)?;
    let fail = |e: std::io::Error| format!("cannot write {}: {e}", out_path.display());

    let d: usize = ck.net.input_shape().iter().product();
    let coord_names: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    writeln!(
        f,
        "sample,energy,full_propagations,first_layer_props,{}",
        coord_names.join(",")
    )
    .map_err(fail)?;

    let mut total = ChainTrace::new();
    for (i, x0) in starts.iter().enumerate() {
        sampler_cfg.seed = cfg.seed.wrapping_add(i as u64);
        let (x, trace) =
            run_chain(&ck.net, x0, &sampler_cfg, kind, false).map_err(|e| format!("chain {i}: {e}"))?;
        let energy = ck
            .net
            .energy(&x, BnMode::EvalRunningStats)
            .map_err(|e| format!("chain {i}: {e}"))?;
        let coords: Vec<String> = x.data().iter().map(|v| format!("{v}")).collect();
        writeln!(
            f,
            "{i},{energy},{},{},{}",
            trace.full_propagations,
            trace.first_layer_props,
            coords.join(",")
        )
        .map_err(fail)?;
        total.absorb_counters(&trace);
    }

    println!(
        "{n} samples via {}: {} full propagations, {} first-layer propagations",
        kind.name(),
        total.full_propagations,
        total.first_layer_props
    );
    println!("wrote {}", out_path.display());
    Ok(0)
}

/// Chain starting points, drawn the way training would draw them: from
/// the replay buffer with the stored restart probability when the
/// checkpoint carries one, else fresh from the initializer.
fn chain_starts(
    ck: &Checkpoint,
    n: usize,
    seed: u64,
) -> Result<Vec<joule_core::Tensor>, String> {
    let mut buffer = ck.buffer.clone();
    match (&mut buffer, &ck.init) {
        (Some(buf), Some(init)) if !buf.is_empty() => Ok(buf
            .draw(init, n)
            .map_err(|e| format!("buffer draw: {e}"))?
            .into_iter()
            .map(|(x, _)| x)
            .collect()),
        (_, Some(init)) => {
            let mut rng = stream_rng(seed, stream::BUFFER);
            (0..n)
                .map(|_| {
                    init.sample_marginal(&mut rng)
                        .map(|(x, _)| x)
                        .map_err(|e| format!("initializer draw: {e}"))
                })
                .collect()
        }
        (Some(buf), None) if !buf.is_empty() => {
            Ok((0..n).map(|i| buf.slots()[i % buf.len()].clone()).collect())
        }
        _ => Err(
            "checkpoint holds neither an initializer nor a stocked replay buffer to start \
             chains from"
                .into(),
        ),
    }
}

// ── eval ─────────────────────────────────────────────────────────────────

pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint_path: &Path, split: &str) -> Result<i32, String> {
    let ck = load_checkpoint(checkpoint_path)?;
    let data = select_split(cfg, split, &ck.net)?;
    let preds = score_predictions(&ck.net, &data).map_err(|e| format!("eval: {e}"))?;
    let correct = preds.iter().filter(|p| p.predicted == p.truth).count();
    let acc = correct as f64 / preds.len() as f64;
    let calibration = ece(&preds, 20);

    ensure_output_dir(cfg)?;
    let report = format!(
        "split,samples,accuracy,ece\n{split},{},{acc},{calibration}\n",
        data.len()
    );
    let path = write_fresh(&cfg.output_dir, "eval", "csv", &report)?;
    println!(
        "{split} accuracy {acc} ece {calibration} ({} samples)",
        data.len()
    );
    println!("wrote {}", path.display());
    Ok(0)
}

// ── ood ──────────────────────────────────────────────────────────────────

pub fn cmd_ood(
    cfg: &ExperimentConfig,
    checkpoint_path: &Path,
    against: &str,
    score: &str,
) -> Result<i32, String> {
    let ck = load_checkpoint(checkpoint_path)?;
    let kind = OodScore::parse(score).ok_or_else(|| {
        format!("--score: unknown score `{score}` (expected log-density or max-softmax)")
    })?;
    let eval_data = select_split(cfg, "eval", &ck.net)?;
    let (in_data, out_data) = contrast_pair(cfg, against, eval_data, &ck.net)?;

    let scores_in = ood_scores(&ck.net, &in_data, kind).map_err(|e| format!("ood: {e}"))?;
    let scores_out = ood_scores(&ck.net, &out_data, kind).map_err(|e| format!("ood: {e}"))?;
    let area = auroc(&scores_in, &scores_out);

    ensure_output_dir(cfg)?;
    let report = format!(
        "score,against,n_in,n_out,auroc\n{},{against},{},{},{area}\n",
        kind.name(),
        in_data.len(),
        out_data.len()
    );
    let path = write_fresh(&cfg.output_dir, "ood", "csv", &report)?;
    println!(
        "auroc {area} ({} in-distribution vs {} `{against}` samples, {} score)",
        in_data.len(),
        out_data.len(),
        kind.name()
    );
    println!("wrote {}", path.display());
    Ok(0)
}

/// In-distribution and contrast sets. `self` (or the dataset's own name)
/// splits the eval data into disjoint halves — the null experiment;
/// `uniform` draws noise shaped like the inputs; any generator name
/// reuses the descriptor's parameters under a shifted seed.
fn contrast_pair(
    cfg: &ExperimentConfig,
    against: &str,
    eval_data: LabeledDataset,
    net: &SplitNetwork,
) -> Result<(LabeledDataset, LabeledDataset), String> {
    if against == "self" || against == cfg.dataset.name {
        let evens: Vec<usize> = (0..eval_data.len()).step_by(2).collect();
        let odds: Vec<usize> = (1..eval_data.len()).step_by(2).collect();
        let a = eval_data
            .subset(&evens)
            .map_err(|e| format!("ood split: {e}"))?;
        let b = eval_data
            .subset(&odds)
            .map_err(|e| format!("ood split: {e}"))?;
        return Ok((a, b));
    }
    let contrast_seed = cfg.seed.wrapping_add(1);
    let out_data = if against == "uniform" {
        uniform_noise(eval_data.len(), net.input_shape(), contrast_seed)
            .map_err(|e| format!("ood contrast: {e}"))?
    } else {
        let mut ds = cfg.dataset.clone();
        ds.name = against.to_string();
        ds.path = None;
        ds.labels_path = None;
        let full = dataset::load_full(&ds, contrast_seed)?;
        fit_to_net(full, net)?
    };
    Ok((eval_data, out_data))
}

// ── attack ───────────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
pub fn cmd_attack(
    cfg: &ExperimentConfig,
    checkpoint_path: &Path,
    radius: f64,
    steps: usize,
    step_size: f64,
    norm: &str,
    no_random_start: bool,
    split: &str,
) -> Result<i32, String> {
    let ck = load_checkpoint(checkpoint_path)?;
    let data = select_split(cfg, split, &ck.net)?;
    let norm = AttackNorm::parse(norm)
        .ok_or_else(|| format!("--norm: unknown norm `{norm}` (expected linf or l2)"))?;
    let attack = AttackConfig {
        norm,
        radius,
        step_size,
        steps,
        random_start: !no_random_start,
        seed: cfg.seed,
    };
    attack.validate().map_err(|e| format!("attack: {e}"))?;

    let clean = accuracy(&ck.net, &data).map_err(|e| format!("attack: {e}"))?;
    let robust = robust_accuracy(&ck.net, &data, &attack).map_err(|e| format!("attack: {e}"))?;

    ensure_output_dir(cfg)?;
    let report = format!(
        "norm,radius,steps,step_size,random_start,samples,clean_accuracy,robust_accuracy\n\
         {},{radius},{steps},{step_size},{},{},{clean},{robust}\n",
        norm.name(),
        !no_random_start,
        data.len()
    );
    let path = write_fresh(&cfg.output_dir, "attack", "csv", &report)?;
    println!(
        "{} radius {radius}: clean {clean} robust {robust} ({} samples)",
        norm.name(),
        data.len()
    );
    println!("wrote {}", path.display());
    Ok(0)
}

// ── fit-init ─────────────────────────────────────────────────────────────

pub fn cmd_fit_init(cfg: &ExperimentConfig) -> Result<i32, String> {
    let (train_data, _) = dataset::load_split(cfg)?;
    let opts = cfg.fit_options()?;
    let init = InformativeInit::fit(
        &train_data,
        &opts,
        &mut stream_rng(cfg.seed, stream::INIT_FIT),
    )
    .map_err(|e| format!("initializer fit: {e}"))?;

    let d = init.feature_count();
    let mut report = String::from("class,weight");
    for i in 0..d {
        report.push_str(&format!(",mean{i}"));
    }
    for i in 0..d {
        report.push_str(&format!(",var{i}"));
    }
    report.push('\n');
    for y in 0..init.num_classes() {
        report.push_str(&format!("{y},{}", init.pi[y]));
        for v in init.mu[y].data() {
            report.push_str(&format!(",{v}"));
        }
        let cov = init.cov_factor[y].reconstruct();
        for i in 0..d {
            report.push_str(&format!(",{}", cov.data()[i * d + i]));
        }
        report.push('\n');
    }

    ensure_output_dir(cfg)?;
    let path = write_fresh(&cfg.output_dir, "init-moments", "csv", &report)?;
    println!(
        "fit {} classes over {d} features (jitter {})",
        init.num_classes(),
        init.jitter
    );
    println!("wrote {}", path.display());
    Ok(0)
}

//! Subcommand bodies. Each run resolves its config (file, then flag
//! overrides), writes the `resolved.toml` snapshot next to its outputs,
//! and leans on the library for everything numerical.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bnas_core::celltemplate::Genotype;
use bnas_core::data::{make_batch, AugmentSet};
use bnas_core::deploy::{bench_conv, cost_report, export_model, load_model, CostReport};
use bnas_core::ndtensor::{load_checkpoint, save_checkpoint, ParamStore};
use bnas_core::search::{
    run_search, selection_diversity_metric, write_metrics_csv, EpochMetrics, SearchOutcome,
};
use bnas_core::searchspace::{no_dilconv_space, with_sepconv_space, LayerType};
use bnas_core::trainer::{build_network, evaluate_network, train, write_curve_csv, Network, TrainOptions};
use bnas_core::{Error, Result};

use crate::config::RunConfig;
use crate::gradlog::{read_gradlog, write_gradlog, GradSeries, MAGIC as GRADLOG_MAGIC};
use crate::plot::{render_svg, Series};
use crate::{Cli, Cmd};

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Search => cmd_search(&resolve(cli, None)?),
        Cmd::Train { genotype } => cmd_train(&resolve(cli, None)?, genotype.as_deref()),
        Cmd::Eval { run_dir } => cmd_eval(&resolve(cli, Some(run_dir))?, run_dir),
        Cmd::Bench { run_dir } => cmd_bench(&resolve(cli, Some(run_dir))?, run_dir),
        Cmd::Export { run_dir } => cmd_export(&resolve(cli, Some(run_dir))?, run_dir),
        Cmd::Ablate { which } => cmd_ablate(&resolve(cli, None)?, which),
        Cmd::Plot { inputs } => cmd_plot(cli.out.as_deref(), inputs),
    }
}

/// `--config` wins; otherwise a run directory's own snapshot; otherwise
/// the paper defaults. Flags override single keys afterwards.
fn resolve(cli: &Cli, run_dir: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, run_dir) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(dir)) => RunConfig::load(&dir.join("resolved.toml"))?,
        (None, None) => RunConfig::default(),
    };
    cfg.apply_flags(cli);
    Ok(cfg)
}

fn cmd_search(cfg: &RunConfig) -> Result<()> {
    let snapshot = cfg.write_resolved()?;
    let scfg = cfg.search.to_search_config(cfg.seed, cfg.data.num_classes())?;
    let (train_ds, _) = cfg.data.load()?;
    let outcome = run_search(&scfg, &train_ds, print_search_epoch)?;
    let geno_path = cfg.out.join("genotype.json");
    outcome.genotype.save(&geno_path)?;
    write_metrics_csv(&cfg.out.join("metrics.csv"), &outcome.history)?;
    println!(
        "search: {} epochs, selection diversity {:.4}, genotype -> {} (snapshot {})",
        outcome.history.len(),
        selection_diversity_metric(&outcome.history),
        geno_path.display(),
        snapshot.display()
    );
    Ok(())
}

fn print_search_epoch(m: &EpochMetrics) {
    println!(
        "epoch {:>3}  train {:.4}  val {:.4}  H {:.4}  learnable {:.4}  reg {:+.4}",
        m.epoch, m.train_acc, m.val_acc, m.entropy, m.learnable_frac, m.reg_term
    );
}

fn cmd_train(cfg: &RunConfig, genotype_flag: Option<&Path>) -> Result<()> {
    cfg.write_resolved()?;
    let default_path = cfg.out.join("genotype.json");
    let geno_path: PathBuf = match genotype_flag {
        Some(p) => p.to_path_buf(),
        None if !cfg.train.genotype.is_empty() => PathBuf::from(&cfg.train.genotype),
        None => default_path.clone(),
    };
    let geno = Genotype::load(&geno_path)?;
    let (train_ds, test_ds) = cfg.data.load()?;
    let scheme = cfg.train.to_scheme()?;
    let ncfg = cfg.train.to_network_config(geno.gamma, cfg.data.num_classes())?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = build_network(&mut store, &mut rng, &geno, &ncfg)?;
    let opts = TrainOptions {
        seed: cfg.seed,
        eval_cap: cfg.train.eval_cap(),
        snapshot_path: Some(cfg.out.join("diverged.ckpt")),
    };
    let outcome = train(&net, &mut store, &scheme, &train_ds, &test_ds, &opts, |r| {
        println!("epoch {:>3}  train {:.4}  test {:.4}  lr {:.5}", r.epoch, r.train_acc, r.test_acc, r.lr);
    })?;
    save_checkpoint(&store, &cfg.out.join("checkpoint.ckpt"))?;
    write_curve_csv(&cfg.out.join("curve.csv"), &outcome.curve)?;
    write_gradlog(
        &cfg.out.join("grad_norms.bin"),
        &[GradSeries { name: "total".into(), values: outcome.grad_norms }],
    )?;
    if geno_path != default_path {
        // downstream commands read everything from the run directory
        geno.save(&default_path)?;
    }
    println!(
        "train: final test acc {:.4}{}",
        outcome.final_test_acc,
        if outcome.underfitting { " (underfitting: train < test late in the run)" } else { "" }
    );
    Ok(())
}

/// Rebuild the trained network from a run directory's genotype and
/// checkpoint. The init RNG seed is irrelevant — the checkpoint restores
/// every parameter by name and must cover the store exactly.
fn rebuild_trained(cfg: &RunConfig, run_dir: &Path) -> Result<(Network, ParamStore)> {
    let geno = Genotype::load(&run_dir.join("genotype.json"))?;
    let ncfg = cfg.train.to_network_config(geno.gamma, cfg.data.num_classes())?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(geno.seed);
    let net = build_network(&mut store, &mut rng, &geno, &ncfg)?;
    load_checkpoint(&mut store, &run_dir.join("checkpoint.ckpt"))?;
    Ok((net, store))
}

fn cmd_eval(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let (net, mut store) = rebuild_trained(cfg, run_dir)?;
    let (_, test_ds) = cfg.data.load()?;
    let idxs: Vec<u32> = (0..test_ds.len() as u32).collect();
    let acc = evaluate_network(&net, &mut store, &test_ds, &idxs, 64, usize::MAX)?;
    let report = format!(
        "network {} ({} cells, {} channels)\ntest accuracy {:.4} over {} samples\n",
        net.cfg.name,
        net.cfg.num_cells,
        net.cfg.init_channels,
        acc,
        test_ds.len()
    );
    std::fs::write(run_dir.join("eval.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn cmd_export(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let (net, store) = rebuild_trained(cfg, run_dir)?;
    let model_path = run_dir.join("model.bnasbin");
    export_model(&model_path, &net, &store)?;
    let report = cost_report(&net.genotype, &net.cfg)?;
    std::fs::write(run_dir.join("cost_report.json"), report_json(&report)?)?;
    println!("exported {} ({} bytes)", model_path.display(), std::fs::metadata(&model_path)?.len());
    print!("{}", report.format_text());
    Ok(())
}

fn report_json(report: &CostReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Format { path: "cost report".into(), detail: e.to_string() })?;
    s.push('\n');
    Ok(s)
}

/// Cost report (recomputed from the genotype, so it reproduces cmd_export's
/// byte-for-byte), a packed-vs-float conv timing table, and — once a model
/// has been exported — prediction agreement between the deployed model and
/// the float-sign reference on a test batch.
fn cmd_bench(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let geno = Genotype::load(&run_dir.join("genotype.json"))?;
    let ncfg = cfg.train.to_network_config(geno.gamma, cfg.data.num_classes())?;
    let report = cost_report(&geno, &ncfg)?;
    std::fs::write(run_dir.join("bench_report.json"), report_json(&report)?)?;
    print!("{}", report.format_text());

    let c = ncfg.init_channels;
    println!();
    println!("{:<28} {:>10} {:>10} {:>8}", "conv", "float ms", "packed ms", "speedup");
    for &shape in &[(8, c, c, 32, 3), (8, 2 * c, 2 * c, 16, 3), (8, 4 * c, 4 * c, 8, 3), (8, 4 * c, 4 * c, 8, 5)] {
        let row = bench_conv(shape, 3, 0)?;
        println!("{:<28} {:>10.2} {:>10.2} {:>7.1}x", row.label, row.float_ms, row.packed_ms, row.speedup);
    }

    let model_path = run_dir.join("model.bnasbin");
    if model_path.exists() {
        let model = load_model(&model_path)?;
        let (net, store) = model.instantiate()?;
        let (_, test_ds) = cfg.data.load()?;
        let n = test_ds.len().min(256);
        let idxs: Vec<u32> = (0..n as u32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0); // unused by AugmentSet::None
        let mut agree = 0usize;
        for chunk in idxs.chunks(64) {
            let batch = make_batch(&test_ds, chunk, AugmentSet::None, &mut rng)?;
            let packed = model.infer(&net, &store, &batch.images)?;
            let float = net.forward_infer(&store, &batch.images)?;
            agree += agreement(&packed.data, &float.data, net.cfg.num_classes);
        }
        println!();
        println!("packed vs float predictions: {agree}/{n} agree");
    }
    Ok(())
}

fn agreement(a: &[f32], b: &[f32], classes: usize) -> usize {
    a.chunks_exact(classes)
        .zip(b.chunks_exact(classes))
        .filter(|(ra, rb)| argmax(ra) == argmax(rb))
        .count()
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Paired experiment: the baseline config against the same config with one
/// mechanism toggled. `no_zeroise` changes only the discretization (γ=∞ is
/// an argmax over non-Zeroise ops), so its two searches share a trajectory
/// and the genotypes isolate the selection rule.
fn cmd_ablate(cfg: &RunConfig, which: &str) -> Result<()> {
    let base_dir = cfg.out.join(format!("ablate_{which}"));
    let snapshot = {
        let mut c = cfg.clone();
        c.out = base_dir.clone();
        c.write_resolved()?
    };
    let base = cfg.search.to_search_config(cfg.seed, cfg.data.num_classes())?;
    let mut ablated = base.clone();
    let labels = match which {
        "no_skip" => {
            ablated.skip_enabled = false;
            ("with_skip", "no_skip")
        }
        "no_zeroise" => {
            ablated.gamma = f64::INFINITY;
            ("with_zeroise", "no_zeroise")
        }
        "no_div" => {
            ablated.lambda = 0.0;
            ("with_div", "no_div")
        }
        "no_dilconv" => {
            ablated.space = no_dilconv_space();
            ("standard", "no_dilconv")
        }
        "with_sepconv" => {
            ablated.space = with_sepconv_space();
            ("standard", "with_sepconv")
        }
        other => return Err(Error::Config(format!("unknown ablation {other:?}"))),
    };
    let (train_ds, _) = cfg.data.load()?;
    let mut rows = Vec::with_capacity(2);
    for (label, scfg) in [(labels.0, &base), (labels.1, &ablated)] {
        println!("[{label}]");
        let outcome = run_search(scfg, &train_ds, print_search_epoch)?;
        let arm_dir = base_dir.join(label);
        std::fs::create_dir_all(&arm_dir)?;
        outcome.genotype.save(&arm_dir.join("genotype.json"))?;
        write_metrics_csv(&arm_dir.join("metrics.csv"), &outcome.history)?;
        rows.push(summarize_arm(label, &outcome));
    }
    let table = comparison_table(which, &rows);
    std::fs::write(base_dir.join("comparison.txt"), &table)?;
    print!("{table}");
    println!("snapshot -> {}", snapshot.display());
    Ok(())
}

struct ArmSummary {
    label: String,
    final_train: f64,
    final_val: f64,
    diversity: f64,
    entropy_last: f64,
    zeroise_edges: usize,
    ops: String,
}

fn summarize_arm(label: &str, outcome: &SearchOutcome) -> ArmSummary {
    let last = outcome.history.last().copied().expect("search runs >= 1 epoch");
    let edges = outcome.genotype.normal.iter().chain(&outcome.genotype.reduce);
    let mut counts: Vec<(LayerType, usize)> = Vec::new();
    for &(_, op) in edges {
        match counts.iter_mut().find(|(k, _)| *k == op) {
            Some((_, n)) => *n += 1,
            None => counts.push((op, 1)),
        }
    }
    counts.sort_by_key(|&(op, n)| (std::cmp::Reverse(n), op.name()));
    ArmSummary {
        label: label.to_string(),
        final_train: last.train_acc,
        final_val: last.val_acc,
        diversity: selection_diversity_metric(&outcome.history),
        entropy_last: last.entropy,
        zeroise_edges: counts.iter().find(|(k, _)| *k == LayerType::Zeroise).map_or(0, |&(_, n)| n),
        ops: counts.iter().map(|(k, n)| format!("{} x{n}", k.name())).collect::<Vec<_>>().join(", "),
    }
}

fn comparison_table(which: &str, rows: &[ArmSummary]) -> String {
    let mut t = format!(
        "ablation: {which}\n\n{:<14} {:>11} {:>9} {:>10} {:>8} {:>9}\n",
        "variant", "train_acc", "val_acc", "diversity", "H(p)", "zeroise"
    );
    for r in rows {
        t.push_str(&format!(
            "{:<14} {:>11.4} {:>9.4} {:>10.4} {:>8.4} {:>9}\n",
            r.label, r.final_train, r.final_val, r.diversity, r.entropy_last, r.zeroise_edges
        ));
    }
    t.push('\n');
    for r in rows {
        t.push_str(&format!("{:<14} {}\n", r.label, r.ops));
    }
    t
}

/// One SVG per input: CSVs plot their numeric columns against the first
/// column; gradient logs plot per-step norms on a log axis.
fn cmd_plot(out: Option<&Path>, inputs: &[PathBuf]) -> Result<()> {
    for input in inputs {
        let title = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let svg = if is_gradlog(input)? {
            let series: Vec<Series> = read_gradlog(input)?
                .into_iter()
                .map(|s| Series {
                    label: s.name,
                    points: s.values.iter().enumerate().map(|(i, &v)| (i as f64, v as f64)).collect(),
                })
                .collect();
            render_svg(&title, "step", "grad L2 norm", &series, true)
        } else {
            render_svg(&title, "epoch", "value", &csv_series(input)?, false)
        };
        let target = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                dir.join(format!("{title}.svg"))
            }
            None => input.with_extension("svg"),
        };
        std::fs::write(&target, svg)?;
        println!("wrote {}", target.display());
    }
    Ok(())
}

fn is_gradlog(path: &Path) -> Result<bool> {
    let mut magic = [0u8; 8];
    match File::open(path)?.read_exact(&mut magic) {
        Ok(()) => Ok(&magic == GRADLOG_MAGIC),
        Err(_) => Ok(false),
    }
}

fn csv_series(path: &Path) -> Result<Vec<Series>> {
    let fmt = |detail: String| Error::Format { path: path.display().to_string(), detail };
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| fmt("empty file".into()))?.split(',').collect();
    if header.len() < 2 {
        return Err(fmt("need at least two CSV columns".into()));
    }
    let mut series: Vec<Series> =
        header[1..].iter().map(|h| Series { label: h.trim().to_string(), points: Vec::new() }).collect();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(fmt(format!("row {}: {} cells, header has {}", lineno + 2, cells.len(), header.len())));
        }
        let x: f64 = cells[0]
            .trim()
            .parse()
            .map_err(|_| fmt(format!("row {}: bad x value {:?}", lineno + 2, cells[0])))?;
        for (s, cell) in series.iter_mut().zip(&cells[1..]) {
            let y: f64 =
                cell.trim().parse().map_err(|_| fmt(format!("row {}: bad value {:?}", lineno + 2, cell)))?;
            s.points.push((x, y));
        }
    }
    Ok(series)
}

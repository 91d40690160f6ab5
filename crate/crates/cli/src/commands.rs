use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use tjstg_core::attn::dump_attention;
use tjstg_core::check::{tiny_model_gradcheck, CheckedLoss};
use tjstg_core::checkpoint::{load_checkpoint, save_checkpoint};
use tjstg_core::jtg::InterleaveOrder;
use tjstg_core::model::{group_of, Model};
use tjstg_core::synth::{gen_dataset, Dataset, QuestionKind, Split};
use tjstg_core::tensor::OpKind;
use tjstg_core::train::{evaluate, stage1_csv, stage2_csv, train_stage1, train_stage2, write_text};
use tjstg_core::tsg::GroundingMode;

use crate::config::{RunConfig, RunRecord};
use crate::{CliError, DumpArgs, EvalArgs, GenArgs, GradcheckArgs, ModelFlags, TrainArgs};

pub const STAGE1_DIR: &str = "stage1";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_CSV: &str = "metrics.csv";
pub const STAGE1_CSV: &str = "stage1_metrics.csv";
pub const TEST_REPORT: &str = "test_report.json";

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn required(p: Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    p.ok_or_else(|| usage(format!("missing {flag}")))
}

fn parse_grid(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || usage(format!("--grid expects H or HxW, got {s:?}"));
    let mut it = s.split('x');
    let h: usize = it.next().and_then(|x| x.trim().parse().ok()).ok_or_else(bad)?;
    let w: usize = match it.next() {
        Some(x) => x.trim().parse().map_err(|_| bad())?,
        None => h,
    };
    if it.next().is_some() {
        return Err(bad());
    }
    Ok((h, w))
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(CliError::Contract("threads: must be >= 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Contract(format!("cannot start {n} threads: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn json_text<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn apply_model_flags(cfg: &mut RunConfig, m: &ModelFlags) -> Result<(), CliError> {
    if let Some(t) = m.tau {
        cfg.model.spatial.tau = t;
    }
    if m.no_ta {
        cfg.model.spatial.target_aware = false;
    }
    if let Some(s) = &m.grounding_mode {
        cfg.model.spatial.mode = GroundingMode::parse(s)
            .ok_or_else(|| usage(format!("--grounding-mode expects literal or renormalize, got {s:?}")))?;
    }
    if let Some(s) = &m.interleave_order {
        cfg.model.order = InterleaveOrder::parse(s)
            .ok_or_else(|| usage(format!("--interleave-order expects va, av, cat-va or cat-av, got {s:?}")))?;
    }
    if let Some(h) = m.heads {
        cfg.model.heads = h;
    }
    Ok(())
}

pub fn gen(a: &GenArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::from_option(a.common.config.as_deref())?;
    let out = required(a.common.out.clone().or(cfg.out.take()), "--out")?;
    if let Some(s) = a.common.seed.or(cfg.seed) {
        cfg.task.seed = s;
    }
    let t = &mut cfg.task;
    if let Some(v) = a.t {
        t.segments = v;
    }
    if let Some(v) = a.n_words {
        t.words = v;
    }
    if let Some(g) = &a.grid {
        (t.grid_h, t.grid_w) = parse_grid(g)?;
    }
    if let Some(v) = a.dim {
        t.dim = v;
    }
    if let Some(v) = a.classes {
        t.concepts = v;
    }
    if let Some(v) = a.answers {
        t.answers = v;
    }
    if let Some(v) = a.noise {
        t.noise_sigma = v;
    }
    if let Some(q) = &a.question {
        t.question = match q.as_str() {
            "counting" => QuestionKind::Counting,
            "existential" => QuestionKind::Existential,
            _ => return Err(usage(format!("--question expects counting or existential, got {q:?}"))),
        };
    }
    let s = &mut cfg.split;
    if let Some(v) = a.train {
        s.train = v;
    }
    if let Some(v) = a.val {
        s.val = v;
    }
    if let Some(v) = a.test {
        s.test = v;
    }
    if let Some(v) = a.negatives {
        s.negative_fraction = v;
    }
    cfg.validate()?;
    let manifest = gen_dataset(&cfg.task, cfg.split.counts(), cfg.split.negative_fraction, &out)?;
    println!("wrote {} scenes to {}", manifest.scenes.len(), out.display());
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::from_option(a.common.config.as_deref())?;
    let data = required(a.data.clone().or(cfg.data.take()), "--data")?;
    let out = required(a.common.out.clone().or(cfg.out.take()), "--out")?;
    if a.stage2_only && a.init.is_none() {
        return Err(usage("--stage2-only needs --init <checkpoint>"));
    }
    if let Some(s) = a.common.seed.or(cfg.seed) {
        cfg.train.seed = s;
    }
    apply_model_flags(&mut cfg, &a.model)?;
    let tr = &mut cfg.train;
    if let Some(v) = a.lambda {
        tr.loss.lambda = v;
    }
    if a.no_csl {
        tr.loss.csl_enabled = false;
    }
    if let Some(v) = a.epochs {
        tr.epochs = v;
    }
    if let Some(v) = a.stage1_epochs {
        tr.stage1_epochs = v;
    }
    if let Some(v) = a.lr {
        tr.lr0 = v;
    }
    if let Some(v) = a.batch {
        tr.batch_size = v;
    }
    let threads = a.threads.or(cfg.threads);
    cfg.threads = threads;
    cfg.validate()?;

    let dataset = Dataset::load(&data)?;
    cfg.task = dataset.config.clone();
    let model_cfg = cfg.model.model_config(dataset.config.dim, dataset.config.answers);
    model_cfg.validate()?;
    let mut model = match &a.init {
        Some(dir) => {
            let (init, _) = load_checkpoint(dir)?;
            Model::from_params(model_cfg, init.params)?
        }
        None => Model::new(model_cfg, cfg.train.seed)?,
    };
    let record = serde_json::to_value(RunRecord {
        seed: cfg.train.seed,
        task: &cfg.task,
        model: &cfg.model,
        train: &cfg.train,
        stage2_only: a.stage2_only,
    })
    .expect("record serializes");
    std::fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("cannot create {}: {e}", out.display())))?;

    let quiet = a.quiet;
    let report = with_pool(threads, || -> Result<_, CliError> {
        if !a.stage2_only {
            let rows = train_stage1(&mut model, &dataset, &cfg.train, |m| {
                if !quiet {
                    eprintln!(
                        "stage1 epoch {:>3} lr {:.1e} loss_s {:.4} match {:.3}/{:.3}",
                        m.epoch, m.lr, m.loss_s, m.train_match_acc, m.val_match_acc
                    );
                }
            })?;
            write_text(out.join(STAGE1_CSV), &stage1_csv(&rows))?;
            save_checkpoint(out.join(STAGE1_DIR), &model, &record)?;
        }
        let rows = train_stage2(&mut model, &dataset, &cfg.train, |m| {
            if !quiet {
                eprintln!(
                    "stage2 epoch {:>3} lr {:.1e} qa {:.4} csl {:.4} s {:.4} acc {:.3}/{:.3}",
                    m.epoch, m.lr, m.loss_qa, m.loss_csl, m.loss_s, m.train_acc, m.val_acc
                );
            }
        })?;
        write_text(out.join(METRICS_CSV), &stage2_csv(&rows))?;
        save_checkpoint(out.join(CHECKPOINT_DIR), &model, &record)?;
        Ok(evaluate(&model, dataset.split(Split::Test))?)
    })??;
    write_text(out.join(TEST_REPORT), &json_text(&report))?;
    println!("test accuracy {:.4} on {} scenes; artifacts in {}", report.accuracy, report.scenes, out.display());
    Ok(())
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    Split::parse(s).ok_or_else(|| usage(format!("--split expects train, val or test, got {s:?}")))
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::from_option(a.common.config.as_deref())?;
    let ckpt = required(a.checkpoint.clone(), "--checkpoint")?;
    let data = required(a.data.clone().or(cfg.data.take()), "--data")?;
    let split = parse_split(&a.split)?;
    let (model, _) = load_checkpoint(&ckpt)?;
    let dataset = Dataset::load(&data)?;
    let report = with_pool(a.threads.or(cfg.threads), || evaluate(&model, dataset.split(split)))??;
    let text = json_text(&report);
    if let Some(out) = a.common.out.clone().or(cfg.out.take()) {
        std::fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("cannot create {}: {e}", out.display())))?;
        write_text(out.join(format!("{}_report.json", split.as_str())), &text)?;
    }
    print!("{text}");
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::from_option(a.common.config.as_deref())?;
    apply_model_flags(&mut cfg, &a.model)?;
    let seed = a.common.seed.or(cfg.seed).unwrap_or(0);
    let flip = match &a.inject_sign_flip {
        None => None,
        Some(s) => Some(OpKind::parse(s).ok_or_else(|| usage(format!("unknown op kind {s:?}")))?),
    };
    if !(a.tol > 0.0) {
        return Err(CliError::Contract(format!("tol: must be positive, got {}", a.tol)));
    }
    let model_cfg = cfg.model.model_config(8, 3);
    let checks = tiny_model_gradcheck(seed, &model_cfg, a.eps, flip)?;

    // Worst error per parameter group, per loss.
    let mut table: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (col, c) in checks.iter().enumerate() {
        for g in &c.report.groups {
            let row = table.entry(group_of(&g.name).to_string()).or_insert_with(|| vec![0.0; checks.len()]);
            row[col] = row[col].max(g.max_rel_err);
        }
    }
    let mut text = format!("{:<18}", "group");
    for c in &checks {
        let _ = write!(text, " {:>10}", c.loss.as_str());
    }
    text.push_str("  status\n");
    let mut failed = Vec::new();
    for (group, errs) in &table {
        let ok = errs.iter().all(|&e| e < a.tol);
        if !ok {
            failed.push(group.clone());
        }
        let _ = write!(text, "{group:<18}");
        for e in errs {
            let _ = write!(text, " {e:>10.2e}");
        }
        let _ = writeln!(text, "  {}", if ok { "ok" } else { "FAIL" });
    }
    print!("{text}");
    if let Some(out) = a.common.out.clone().or(cfg.out.take()) {
        std::fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("cannot create {}: {e}", out.display())))?;
        write_text(out.join("gradcheck.txt"), &text)?;
    }
    debug_assert_eq!(checks.len(), CheckedLoss::ALL.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(format!("{} above {:e}", failed.join(", "), a.tol)))
    }
}

pub fn dump_attn(a: &DumpArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::from_option(a.common.config.as_deref())?;
    let ckpt = required(a.checkpoint.clone(), "--checkpoint")?;
    let data = required(a.data.clone().or(cfg.data.take()), "--data")?;
    let out = required(a.common.out.clone().or(cfg.out.take()), "--out")?;
    let split = parse_split(&a.split)?;
    let (model, _) = load_checkpoint(&ckpt)?;
    let dataset = Dataset::load(&data)?;
    let scenes = dataset.split(split);
    let scenes = &scenes[..a.limit.unwrap_or(scenes.len()).min(scenes.len())];
    let hits = dump_attention(&model, scenes, &out)?;
    println!(
        "dumped {} scenes to {}; max-attention cell on the planted cell in {}/{} active segments ({:.3})",
        scenes.len(),
        out.display(),
        hits.hits,
        hits.active_segments,
        hits.hit_rate
    );
    Ok(())
}

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use dval_core::data::{class_stats, generate as generate_data, load_dataset, save_dataset, Dataset, GeneratorSpec};
use dval_core::gradsuite::{run_suite, MODULES, NEGATIVE_CONTROL};
use dval_core::losses::{ClassStats, ClsLossKind};
use dval_core::metrics::{evaluate, EvalReport};
use dval_core::prompts::PromptMode;
use dval_core::train::{
    build_teacher, load_checkpoint, run_schedule, save_checkpoint, train_phase, Checkpoint, LogRecord, Model, Phase,
    StageTag, TrainConfig, TrainData,
};
use dval_core::Tensor;

use crate::error::{CliError, CliResult, WithPath};
use crate::manifest::{sibling, RunManifest};
use crate::{
    AblateArg, ConfigFlags, EvalArgs, GenerateArgs, GradcheckArgs, ModeArg, ScoreArgs, StageArg, SweepArgs, SweepParam,
    TrainArgs,
};

pub fn generate(a: &GenerateArgs) -> CliResult<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).at(p)?;
            GeneratorSpec::from_toml(&text).at(p)?
        }
        None => GeneratorSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let (train, test) = generate_data(&spec)?;
    std::fs::create_dir_all(&a.out).at(&a.out)?;
    let train_path = a.out.join("train.dvds");
    let test_path = a.out.join("test.dvds");
    let stats_path = a.out.join("stats.json");
    let spec_path = a.out.join("spec.toml");
    save_dataset(&train, &train_path).at(&train_path)?;
    save_dataset(&test, &test_path).at(&test_path)?;
    let stats: ClassStats<f64> = class_stats(&train, &Default::default())?;
    let stats_json = serde_json::to_string_pretty(&stats).expect("stats serialize");
    std::fs::write(&stats_path, stats_json + "\n").at(&stats_path)?;
    std::fs::write(&spec_path, spec.to_toml()).at(&spec_path)?;

    let [h, m, t] = stats.group_sizes();
    println!(
        "train {} images, test {} images, {} classes (head {h}, medium {m}, tail {t}), {:.2} labels per image",
        train.len(),
        test.len(),
        train.classes,
        train.mean_labels_per_image()
    );

    let mut man = RunManifest::new("generate");
    man.config_path = a.spec.as_ref().map(|p| p.display().to_string());
    man.resolved_config = Some(spec.to_toml());
    man.seed = Some(spec.seed);
    if let Some(p) = &a.spec {
        man.input(p)?;
    }
    for p in [&train_path, &test_path, &stats_path, &spec_path] {
        man.output(p)?;
    }
    man.write(&a.out.join("manifest.json"))
}

/// Base configuration (file, else `fallback`, else default) with flags applied.
fn resolve_config(flags: &ConfigFlags, fallback: Option<&TrainConfig>) -> CliResult<TrainConfig> {
    let mut cfg = match &flags.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).at(p)?;
            TrainConfig::from_toml(&text).at(p)?
        }
        None => fallback.cloned().unwrap_or_default(),
    };
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.alpha {
        cfg.alignment.alpha = v;
    }
    if let Some(v) = flags.k {
        cfg.alignment.k = v;
    }
    if let Some(v) = flags.prompt_len {
        cfg.prompts.m = v;
    }
    if let Some(v) = flags.logit_scale {
        cfg.alignment.logit_scale = v;
    }
    if let Some(v) = flags.stage1_epochs {
        cfg.stage1.epochs = v;
    }
    if let Some(v) = flags.stage2_epochs {
        cfg.stage2.epochs = v;
    }
    if let Some(v) = flags.stage1_lr {
        cfg.stage1.lr = v;
    }
    if let Some(v) = flags.stage2_lr {
        cfg.stage2.lr = v;
    }
    for ab in &flags.ablate {
        match ab {
            AblateArg::DvalOnly => cfg.ablation.dval_only = true,
            AblateArg::NoHpt => cfg.ablation.use_hpt = false,
            AblateArg::NoSc => cfg.ablation.use_sc = false,
            AblateArg::Joint => cfg.ablation.joint_training = true,
            AblateArg::Bce => cfg.ablation.cls_loss = ClsLossKind::Bce,
            AblateArg::NoPosWeight => cfg.ablation.pos_weighting = false,
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Settings that define the stored model; they must agree with a checkpoint being continued.
fn check_compatible(cfg: &TrainConfig, stored: &TrainConfig, ckpt: &Path) -> CliResult<()> {
    let mut diffs = Vec::new();
    if cfg.seed != stored.seed {
        diffs.push("seed");
    }
    if cfg.vit != stored.vit {
        diffs.push("vit");
    }
    if cfg.text != stored.text {
        diffs.push("text");
    }
    if cfg.vocab_seed != stored.vocab_seed {
        diffs.push("vocab_seed");
    }
    if cfg.prompts != stored.prompts {
        diffs.push("prompts");
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "config/checkpoint mismatch: {} differ from {}",
            diffs.join(", "),
            ckpt.display()
        )))
    }
}

fn archive_in(path: &Path, name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(name)
    } else {
        path.to_path_buf()
    }
}

fn load(path: &Path) -> CliResult<Dataset> {
    load_dataset(path).at(path)
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let train_path = archive_in(&a.data, "train.dvds");
    let ds = load(&train_path)?;
    let phase = match a.stage {
        StageArg::One => Phase::Stage1,
        StageArg::Two => Phase::Stage2,
        StageArg::Joint => Phase::Joint,
    };
    let resumed = match &a.resume {
        Some(p) => Some(load_checkpoint::<f64>(p).at(p)?),
        None => None,
    };
    if phase == Phase::Stage2 && resumed.is_none() {
        return Err(CliError::Usage(
            "stage 2 needs the stage-1 checkpoint: pass --resume <stage1.dvck>".into(),
        ));
    }
    let mut cfg = resolve_config(&a.cfg, resumed.as_ref().map(|c| &c.model.config))?;
    if phase == Phase::Joint {
        cfg.ablation.joint_training = true;
    } else if cfg.ablation.joint_training {
        return Err(CliError::Usage("joint_training is set: train with --stage joint".into()));
    }
    if phase == Phase::Stage2 && !cfg.ablation.hierarchical() {
        return Err(CliError::Usage("the ablation disables prompt tuning, so there is no stage 2".into()));
    }

    let (mut model, progress) = match resumed {
        None => (Model::<f64>::new(cfg.clone(), ds.classes)?, None),
        Some(ck) => {
            let path = a.resume.as_deref().expect("resume path");
            check_compatible(&cfg, &ck.model.config, path)?;
            let progress = match (phase, ck.model.stage, ck.progress) {
                (Phase::Stage2, StageTag::Stage1, None) => None,
                (Phase::Stage2, StageTag::Stage1, Some(p)) => {
                    return Err(CliError::Usage(format!(
                        "{} holds an unfinished stage 1 (stopped at step {}); finish stage 1 first",
                        path.display(),
                        p.step
                    )))
                }
                (_, _, Some(p)) if p.phase == phase => Some(p),
                (_, stage, _) => {
                    return Err(CliError::Usage(format!(
                        "{} is a {} checkpoint with no resumable {} progress",
                        path.display(),
                        stage.name(),
                        phase.name()
                    )))
                }
            };
            let mut model = ck.model;
            model.config = cfg.clone();
            (model, progress)
        }
    };
    if model.classes() != ds.classes {
        return Err(CliError::Usage(format!(
            "dataset has {} classes, checkpoint has {}",
            ds.classes,
            model.classes()
        )));
    }

    let teacher = if phase == Phase::Stage2 {
        None
    } else {
        Some(build_teacher::<f64>(&cfg)?)
    };
    let data = TrainData::new(&ds, &model, teacher.as_ref())?;
    let out = a.out.clone().unwrap_or_else(|| {
        a.data
            .parent()
            .filter(|_| !a.data.is_dir())
            .unwrap_or(&a.data)
            .join(format!("stage{}.dvck", phase_file_tag(phase)))
    });
    let log_path = sibling(&out, "log.jsonl");
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(&log_path).at(&log_path)?);
    let epochs = if phase == Phase::Stage2 { cfg.stage2.epochs } else { cfg.stage1.epochs };
    let batch = if phase == Phase::Stage2 { cfg.stage2.batch_size } else { cfg.stage1.batch_size };
    let batches = ds.len().div_ceil(batch);
    let mut epoch_loss = 0.0;
    let mut io_err = None;
    let mut log = |r: &LogRecord| {
        if let Err(e) = writeln!(log_file, "{}", serde_json::to_string(r).expect("record serializes")) {
            io_err.get_or_insert(e);
        }
        if r.batch == 0 {
            epoch_loss = 0.0;
        }
        epoch_loss += r.loss;
        if r.batch + 1 == batches {
            println!("{} epoch {}/{epochs} loss {:.6}", r.phase, r.epoch + 1, epoch_loss / batches as f64);
        }
    };
    let progress = train_phase(&mut model, phase, &data, progress, a.stop_at_step, &mut log)?;
    drop(log);
    if let Some(e) = io_err {
        return Err(CliError::Format(format!("{}: {e}", log_path.display())));
    }
    log_file.flush().at(&log_path)?;
    drop(log_file);

    let finished = progress.epoch >= epochs;
    let step = progress.step;
    let ck = Checkpoint {
        model,
        progress: (!finished).then_some(progress),
    };
    save_checkpoint(&ck, &out).at(&out)?;
    println!(
        "wrote {} ({}, step {step}{})",
        out.display(),
        phase.name(),
        if finished { ", complete" } else { ", resumable" }
    );

    let mut man = RunManifest::new("train");
    man.config_path = a.cfg.config.as_ref().map(|p| p.display().to_string());
    man.resolved_config = Some(cfg.to_toml());
    man.seed = Some(cfg.seed);
    man.input(&train_path)?;
    if let Some(p) = &a.resume {
        man.input(p)?;
    }
    if let Some(p) = &a.cfg.config {
        man.input(p)?;
    }
    if let Some(p) = &cfg.teacher.file {
        if phase != Phase::Stage2 {
            man.input(p)?;
        }
    }
    man.output(&out)?;
    man.output(&log_path)?;
    man.write(&sibling(&out, "manifest.json"))
}

fn phase_file_tag(phase: Phase) -> &'static str {
    match phase {
        Phase::Stage1 => "1",
        Phase::Stage2 => "2",
        Phase::Joint => "-joint",
    }
}

/// Class counts that define head/medium/tail groups.
fn group_counts(explicit: Option<&Path>, beside: &Path) -> CliResult<(Vec<usize>, PathBuf)> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let candidate = beside.parent().unwrap_or(Path::new(".")).join("train.dvds");
            if !candidate.exists() {
                return Err(CliError::Usage(format!(
                    "training class counts are needed for the head/medium/tail groups: no {} found, pass --counts-from <train.dvds>",
                    candidate.display()
                )));
            }
            candidate
        }
    };
    Ok((load(&path)?.class_counts(), path))
}

fn write_report(report: &EvalReport, path: &Path) -> CliResult<PathBuf> {
    std::fs::write(path, report.to_text()).at(path)?;
    let json = path.with_extension("json");
    std::fs::write(&json, report.to_json() + "\n").at(&json)?;
    Ok(json)
}

fn check_scores(scores: &Tensor<f64>, ds: &Dataset) -> CliResult<()> {
    if let Some(pos) = scores.data().iter().position(|x| !x.is_finite()) {
        let c = scores.shape()[1];
        return Err(CliError::Numeric(format!(
            "non-finite score {} for sample {} class {}",
            scores.data()[pos],
            ds.samples[pos / c].id,
            pos % c
        )));
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let ck = load_checkpoint::<f64>(&a.ckpt).at(&a.ckpt)?;
    if let Some(p) = &ck.progress {
        log::warn!("{} stopped mid-{} at step {}", a.ckpt.display(), p.phase.name(), p.step);
    }
    let data_path = archive_in(&a.data, "test.dvds");
    let ds = load(&data_path)?;
    let (counts, counts_path) = group_counts(a.counts_from.as_deref(), &data_path)?;
    let model = ck.model;
    let mode = match a.mode {
        Some(ModeArg::Fixed) => PromptMode::Fixed,
        Some(ModeArg::Hierarchical) => PromptMode::Hierarchical,
        None => model.default_mode(),
    };
    let scores = model.score_dataset(&ds, mode)?;
    check_scores(&scores, &ds)?;
    let report = evaluate(&scores, &ds.labels_flat(), &counts)?;
    let json = write_report(&report, &a.report)?;
    print!("{}", report.to_text());

    let mut man = RunManifest::new("eval");
    man.resolved_config = Some(model.config.to_toml());
    man.seed = Some(model.config.seed);
    man.input(&a.ckpt)?;
    man.input(&data_path)?;
    man.input(&counts_path)?;
    man.output(&a.report)?;
    man.output(&json)?;
    if let Some(p) = &a.predictions {
        write_predictions(&scores, &ds, p)?;
        man.output(p)?;
    }
    man.write(&sibling(&a.report, "manifest.json"))
}

fn write_predictions(scores: &Tensor<f64>, ds: &Dataset, path: &Path) -> CliResult<()> {
    let c = scores.shape()[1];
    let mut s = String::new();
    for (i, sample) in ds.samples.iter().enumerate() {
        write!(s, "{}", sample.id).unwrap();
        for v in &scores.data()[i * c..(i + 1) * c] {
            // `{}` prints the shortest representation that reads back exactly.
            write!(s, " {v}").unwrap();
        }
        s.push('\n');
    }
    std::fs::write(path, s).at(path)
}

fn read_predictions(path: &Path, ds: &Dataset) -> CliResult<Tensor<f64>> {
    let text = std::fs::read_to_string(path).at(path)?;
    let c = ds.classes;
    let fail = |line: usize, msg: String| CliError::Format(format!("{}:{line}: {msg}", path.display()));
    let mut rows = std::collections::BTreeMap::new();
    for (ln, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let id: u64 = fields
            .next()
            .unwrap()
            .parse()
            .map_err(|e| fail(ln, format!("bad sample id: {e}")))?;
        let vals = fields
            .map(|f| f.parse::<f64>().map_err(|e| fail(ln, format!("bad score `{f}`: {e}"))))
            .collect::<CliResult<Vec<f64>>>()?;
        if vals.len() != c {
            return Err(fail(ln, format!("{} scores, the labels have {c} classes", vals.len())));
        }
        if rows.insert(id, vals).is_some() {
            return Err(fail(ln, format!("duplicate sample id {id}")));
        }
    }
    if rows.len() != ds.len() {
        return Err(CliError::Format(format!(
            "{}: {} prediction rows, the label archive has {} samples",
            path.display(),
            rows.len(),
            ds.len()
        )));
    }
    let mut data = Vec::with_capacity(ds.len() * c);
    for s in &ds.samples {
        let row = rows
            .get(&s.id)
            .ok_or_else(|| CliError::Format(format!("{}: no prediction for sample {}", path.display(), s.id)))?;
        data.extend_from_slice(row);
    }
    Ok(Tensor::new([ds.len(), c], data).expect("shape matches"))
}

pub fn score(a: &ScoreArgs) -> CliResult<()> {
    let ds = load(&a.labels)?;
    let scores = read_predictions(&a.predictions, &ds)?;
    check_scores(&scores, &ds)?;
    let (counts, counts_path) = group_counts(a.counts_from.as_deref(), &a.labels)?;
    let report = evaluate(&scores, &ds.labels_flat(), &counts)?;
    let report_path = a.report.clone().unwrap_or_else(|| sibling(&a.predictions, "report"));
    let json = write_report(&report, &report_path)?;
    print!("{}", report.to_text());

    let mut man = RunManifest::new("score");
    man.input(&a.predictions)?;
    man.input(&a.labels)?;
    man.input(&counts_path)?;
    man.output(&report_path)?;
    man.output(&json)?;
    man.write(&sibling(&report_path, "manifest.json"))
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let trials = a.trials as usize;
    let modules: Vec<&str> = if a.module == "all" {
        MODULES.to_vec()
    } else {
        vec![a.module.as_str()]
    };
    println!("{:<14} {:>6} {:>6} {:>11} {:>11}  result", "module", "trials", "passed", "max_rel", "max_abs");
    let mut failed = Vec::new();
    for m in &modules {
        let r = run_suite(m, trials, a.seed)?;
        println!(
            "{:<14} {:>6} {:>6} {:>11.3e} {:>11.3e}  {}",
            m,
            r.trials,
            r.passed_trials,
            r.report.max_rel_err,
            r.report.max_abs_err,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if !r.passed() {
            failed.push(m.to_string());
        }
    }
    if a.module == "all" {
        // The checker must reject a deliberately wrong backward rule.
        let control = run_suite(NEGATIVE_CONTROL, trials, a.seed)?;
        let caught = control.passed_trials == 0;
        println!(
            "self-test {NEGATIVE_CONTROL}: {}",
            if caught { "wrong gradient detected" } else { "NOT DETECTED" }
        );
        if !caught {
            failed.push(format!("self-test {NEGATIVE_CONTROL}"));
        }
    }
    let mut man = RunManifest::new("gradcheck");
    man.seed = Some(a.seed);
    man.write(&a.manifest)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("gradient check failed: {}", failed.join(", "))))
    }
}

pub fn sweep(a: &SweepArgs) -> CliResult<()> {
    let base = resolve_config(&a.cfg, None)?;
    let mut points = Vec::new();
    for raw in &a.values {
        let raw = raw.trim();
        let bad = |e: String| CliError::Usage(format!("--values: `{raw}`: {e}"));
        let mut cfg = base.clone();
        match a.param {
            SweepParam::Alpha => cfg.alignment.alpha = raw.parse().map_err(|e| bad(format!("{e}")))?,
            SweepParam::K => cfg.alignment.k = raw.parse().map_err(|e| bad(format!("{e}")))?,
            SweepParam::M => cfg.prompts.m = raw.parse().map_err(|e| bad(format!("{e}")))?,
        }
        cfg.validate().map_err(|e| bad(e.to_string()))?;
        points.push((raw.to_string(), cfg));
    }
    let train_path = archive_in(&a.data, "train.dvds");
    let test_path = a.data.join("test.dvds");
    let train = load(&train_path)?;
    let test = load(&test_path)?;
    let counts = train.class_counts();
    let name = match a.param {
        SweepParam::Alpha => "alpha",
        SweepParam::K => "k",
        SweepParam::M => "M",
    };
    let mut csv = String::from("param,value,map_total,map_head,map_medium,map_tail,ap_variance\n");
    let pct = |x: Option<f64>| x.map(|v| format!("{:.4}", v * 100.0)).unwrap_or_default();
    for (raw, cfg) in points {
        let teacher = build_teacher::<f64>(&cfg)?;
        let mut model = Model::<f64>::new(cfg, train.classes)?;
        run_schedule(&mut model, &train, &teacher, &mut |_| {})?;
        let scores = model.score_dataset(&test, model.default_mode())?;
        check_scores(&scores, &test)?;
        let r = evaluate(&scores, &test.labels_flat(), &counts)?;
        let row = format!(
            "{name},{raw},{},{},{},{},{:.4}\n",
            pct(Some(r.map_total)),
            pct(r.map_head),
            pct(r.map_medium),
            pct(r.map_tail),
            r.ap_variance
        );
        print!("{row}");
        csv.push_str(&row);
    }
    std::fs::write(&a.out, csv).at(&a.out)?;

    let mut man = RunManifest::new("sweep");
    man.config_path = a.cfg.config.as_ref().map(|p| p.display().to_string());
    man.resolved_config = Some(base.to_toml());
    man.seed = Some(base.seed);
    man.input(&train_path)?;
    man.input(&test_path)?;
    man.output(&a.out)?;
    man.write(&sibling(&a.out, "manifest.json"))
}

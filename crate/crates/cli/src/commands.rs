use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use boomerang::analysis::{self, evaluate};
use boomerang::checkpoint::{self, FORMAT_VERSION};
use boomerang::config::{ExperimentConfig, StudentInit};
use boomerang::distill::LossMode;
use boomerang::experiment::Pipeline;
use boomerang::pruning::{self, LacoConfig, PruneManifest};
use boomerang::surgery::{BlockPartition, KeepRule, OrderPreset};
use boomerang::ParameterSet;

use crate::{Command, Common, InitArg, KeepRuleArg, LossArg, MethodArg, OrderArg, Profile};

type Meta = BTreeMap<String, Value>;

fn base_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(match common.profile {
            Profile::Desk => ExperimentConfig::desk(),
            Profile::Acceptance => ExperimentConfig::acceptance(),
        }),
    }
}

struct Run {
    dir: PathBuf,
}

impl Run {
    fn open(cmd: &Command, cfg: &ExperimentConfig) -> Result<Self> {
        let dir = cmd
            .common()
            .run_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(cmd.name()));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        cfg.validate()?;
        std::fs::write(dir.join("config.json"), cfg.to_json())?;
        let argv: Vec<String> = std::env::args().collect();
        let run = json!({
            "command": cmd.name(),
            "argv": argv,
            "seed": cmd.common().seed,
            "checkpoint_format_version": FORMAT_VERSION,
            "version": env!("CARGO_PKG_VERSION"),
            "threads": rayon::current_num_threads(),
        });
        std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&run)?)?;
        log::info!("run directory {}", dir.display());
        Ok(Self { dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write_json(&self, name: &str, v: &impl serde::Serialize) -> Result<()> {
        std::fs::write(self.path(name), serde_json::to_string_pretty(v)?)?;
        Ok(())
    }
}

fn load(path: &Path) -> Result<(ParameterSet, Meta)> {
    let (p, h) = checkpoint::load_checkpoint_with_header(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((p, h.meta))
}

fn partition_from_meta(meta: &Meta) -> Result<Option<BlockPartition>> {
    match (meta.get("partition"), meta.get("n_teacher_layers")) {
        (Some(s), Some(n)) => {
            let starts: Vec<usize> = serde_json::from_value(s.clone())?;
            let n: usize = serde_json::from_value(n.clone())?;
            Ok(Some(BlockPartition::new(starts, n)?))
        }
        _ => Ok(None),
    }
}

fn partition_meta(p: &BlockPartition) -> Meta {
    let mut m = Meta::new();
    m.insert("partition".into(), json!(p.starts()));
    m.insert("n_teacher_layers".into(), json!(p.n_teacher_layers()));
    m
}

fn loss_mode(l: LossArg) -> LossMode {
    match l {
        LossArg::Ce => LossMode::Ce,
        LossArg::CeKl => LossMode::CeKl,
        LossArg::CeCos => LossMode::CeCos,
        LossArg::Full => LossMode::Full,
    }
}

fn order_preset(o: OrderArg) -> OrderPreset {
    match o {
        OrderArg::Backward => OrderPreset::Backward,
        OrderArg::Forward => OrderPreset::Forward,
        OrderArg::Similarity => OrderPreset::Similarity,
    }
}

pub fn run(cmd: &Command) -> Result<()> {
    let common = cmd.common();
    let mut cfg = base_config(common)?;
    match cmd {
        Command::PretrainTeacher { .. } => {
            if let Some(s) = common.seed {
                cfg.teacher_train.seed = s;
            }
            let run = Run::open(cmd, &cfg)?;
            let p = Pipeline::new(cfg)?;
            let (teacher, log) = p.pretrain_teacher()?;
            log.write_jsonl(&run.path("train_log.jsonl"))?;
            let mut meta = Meta::new();
            meta.insert("kind".into(), json!("teacher"));
            meta.insert("seed".into(), json!(p.config.teacher_train.seed));
            checkpoint::save_checkpoint_with(&teacher, &meta, &run.path("teacher.ckpt"))?;
            let m = evaluate(&teacher, &p.config.eval, &p.eval_data())?;
            run.write_json("eval.json", &m)?;
            println!("teacher perplexity {:.4}", m.perplexity);
        }
        Command::InitStudent {
            teacher,
            keep_every,
            keep_rule,
            starts,
            init,
            ..
        } => {
            if let Some(k) = keep_every {
                cfg.partition.keep_every = *k;
            }
            if let Some(r) = keep_rule {
                cfg.partition.keep_rule = match r {
                    KeepRuleArg::Last => KeepRule::KeepLast,
                    KeepRuleArg::First2 => KeepRule::KeepFirstTwo,
                };
            }
            if starts.is_some() {
                cfg.partition.starts = starts.clone();
            }
            if let Some(i) = init {
                cfg.student_init = match i {
                    InitArg::Teacher => StudentInit::Teacher,
                    InitArg::Random => StudentInit::Random,
                };
            }
            let (t, _) = load(teacher)?;
            cfg.model = t.config.clone();
            let seed = common.seed.unwrap_or(cfg.student_train.seed);
            let run = Run::open(cmd, &cfg)?;
            let partition = cfg.partition()?;
            let student = match cfg.student_init {
                StudentInit::Teacher => boomerang::surgery::init_student(&t, &partition)?,
                StudentInit::Random => boomerang::model::init_random(&t.config.with_layers(partition.n_blocks()), seed)?,
            };
            let mut meta = partition_meta(&partition);
            meta.insert("kind".into(), json!("student-init"));
            meta.insert("init".into(), json!(cfg.student_init));
            meta.insert("seed".into(), json!(seed));
            checkpoint::save_checkpoint_with(&student, &meta, &run.path("student_init.ckpt"))?;
            run.write_json("partition.json", &partition)?;
            println!(
                "student with {} layers from partition {:?}",
                student.n_layers(),
                partition.starts()
            );
        }
        Command::Distill {
            teacher,
            student,
            loss,
            tokens,
            ..
        } => {
            let (t, _) = load(teacher)?;
            let (s, smeta) = load(student)?;
            cfg.model = t.config.clone();
            if let Some(p) = partition_from_meta(&smeta)? {
                cfg.partition.starts = Some(p.starts().to_vec());
            }
            cfg.student_train.loss_mode = loss_mode(*loss);
            if let Some(s) = common.seed {
                cfg.student_train.seed = s;
            }
            if let Some(n) = tokens {
                cfg.student_train = cfg.student_train.with_token_budget(*n);
            }
            let run = Run::open(cmd, &cfg)?;
            let p = Pipeline::new(cfg)?;
            let seed = p.config.student_train.seed;
            let (trained, log) = p.distill(&t, s, p.config.student_train.loss_mode, seed)?;
            log.write_jsonl(&run.path("train_log.jsonl"))?;
            let mut meta = partition_meta(&p.partition);
            meta.insert("kind".into(), json!("student"));
            meta.insert("loss".into(), json!(p.config.student_train.loss_mode));
            meta.insert("seed".into(), json!(seed));
            checkpoint::save_checkpoint_with(&trained, &meta, &run.path("student.ckpt"))?;
            let (head, tail) = log.head_tail_means(10);
            println!("distilled {} steps: loss {head:.4} -> {tail:.4}", log.records.len());
        }
        Command::Sweep {
            teacher, student, order, ..
        } => {
            let (t, _) = load(teacher)?;
            let (s, smeta) = load(student)?;
            cfg.model = t.config.clone();
            if let Some(p) = partition_from_meta(&smeta)? {
                cfg.partition.starts = Some(p.starts().to_vec());
            }
            if let Some(o) = order {
                cfg.patch_order = order_preset(*o);
            }
            let run = Run::open(cmd, &cfg)?;
            let p = Pipeline::new(cfg)?;
            let order = p.resolve_order(p.config.patch_order, &s, &t)?;
            let records = p.sweep(&s, &t, &order, &p.eval_data())?;
            analysis::write_sweep_csv(&records, &run.path("sweep.csv"))?;
            run.write_json("sweep.json", &json!({ "order": order, "records": records }))?;
            for r in &records {
                println!(
                    "{:>2} patched  {:>2} layers  {:>9} params  ppl {:.4}",
                    r.patch_prefix_len, r.n_layers, r.inference_params, r.perplexity
                );
            }
        }
        Command::Prune {
            teacher,
            method,
            n_keep_patched,
            n_remove,
            one_shot,
            chunk_size,
            threshold,
            min_interval,
            layer_lo,
            layer_hi,
            ..
        } => {
            let (t, _) = load(teacher)?;
            cfg.model = t.config.clone();
            let run = Run::open(cmd, &cfg)?;
            let p = Pipeline::new(cfg)?;
            let n = t.n_layers();
            let (pruned, manifest) = match method {
                MethodArg::Naive => {
                    let Some(k) = n_keep_patched else {
                        bail!("--method naive needs --n-keep-patched");
                    };
                    let init = boomerang::surgery::init_student(&t, &p.partition)?;
                    let order = p.resolve_order(p.config.patch_order, &init, &t)?;
                    let m = pruning::naive_drop(&t, &p.partition, &order, *k)?;
                    let kept: Vec<usize> = p
                        .partition
                        .layer_sources(&order.as_slice()[..*k].iter().copied().collect())
                        .into_iter()
                        .map(|s| match s {
                            boomerang::surgery::LayerSource::Teacher(l) => l,
                            boomerang::surgery::LayerSource::Student(i) => p.partition.starts()[i - 1],
                        })
                        .collect();
                    let removed = (1..=n).filter(|l| !kept.contains(l)).collect();
                    let details = json!({ "n_keep_patched": k, "order": order, "partition": p.partition.starts(), "kept_layers": kept });
                    (m, ("naive", removed, details))
                }
                MethodArg::Shortgpt => {
                    let Some(r) = n_remove else {
                        bail!("--method shortgpt needs --n-remove");
                    };
                    let calib = p.calibration(p.config.calibration.bi_samples)?;
                    let (m, report) = pruning::shortgpt_prune(&t, &calib, *r, !*one_shot)?;
                    let removed = report.removed.clone();
                    (m, ("shortgpt", removed, serde_json::to_value(&report)?))
                }
                MethodArg::Laco => {
                    let lc = LacoConfig {
                        chunk_size: *chunk_size,
                        layer_range_lo: *layer_lo,
                        layer_range_hi: *layer_hi,
                        min_interval: *min_interval,
                        threshold: *threshold,
                    };
                    let calib = p.calibration(p.config.calibration.laco_samples)?;
                    let (m, report) = pruning::laco_merge(&t, &calib, &lc)?;
                    let removed = report
                        .layer_origins
                        .iter()
                        .flat_map(|o| o.iter().skip(1).copied())
                        .collect();
                    (m, ("laco", removed, serde_json::to_value(&report)?))
                }
            };
            let (name, removed, details) = manifest;
            let manifest = PruneManifest {
                method: name.into(),
                n_layers_before: n,
                n_layers_after: pruned.n_layers(),
                removed,
                details,
            };
            let mut meta = Meta::new();
            meta.insert("kind".into(), json!("pruned"));
            meta.insert("method".into(), json!(name));
            checkpoint::save_checkpoint_with(&pruned, &meta, &run.path("pruned.ckpt"))?;
            run.write_json("manifest.json", &manifest)?;
            let m = evaluate(&pruned, &p.config.eval, &p.eval_data())?;
            run.write_json("eval.json", &m)?;
            println!(
                "{name}: {} -> {} layers, ppl {:.4}",
                n,
                pruned.n_layers(),
                m.perplexity
            );
        }
        Command::CosineMatrix { a, b, samples, .. } => {
            let (ma, meta_a) = load(a)?;
            let (mb, _) = load(b)?;
            if !ma.config.block_compatible(&mb.config) {
                bail!("models have different widths");
            }
            cfg.model = mb.config.clone();
            let run = Run::open(cmd, &cfg)?;
            let p = Pipeline::new(cfg)?;
            let calib = p.calibration(samples.unwrap_or(p.config.calibration.cosine_samples))?;
            let mut sim = analysis::cosine_matrix(&analysis::trace(&ma, &calib)?, &analysis::trace(&mb, &calib)?)?;
            sim.model_a = file_stem(a);
            sim.model_b = file_stem(b);
            std::fs::write(run.path("cosine.csv"), sim.to_csv())?;
            let suggested = match partition_from_meta(&meta_a)? {
                Some(part) if part.n_blocks() == ma.n_layers() && part.n_teacher_layers() == mb.n_layers() => {
                    Some(analysis::suggest_patch_order(&sim, &part)?)
                }
                _ => None,
            };
            run.write_json("cosine.json", &json!({ "similarity": sim, "suggested_order": suggested }))?;
            print!("{}", sim.to_csv());
        }
        Command::EvalPpl { model, .. } => {
            let (m, _) = load(model)?;
            cfg.model = m.config.clone();
            let run = Run::open(cmd, &cfg)?;
            let p = Pipeline::new(cfg)?;
            let metrics = evaluate(&m, &p.config.eval, &p.eval_data())?;
            run.write_json(
                "eval.json",
                &json!({
                    "perplexity": metrics.perplexity,
                    "task_accuracy": metrics.task_accuracy,
                    "n_layers": m.n_layers(),
                    "inference_params": m.count_inference_params(),
                }),
            )?;
            println!("perplexity {:.4}", metrics.perplexity);
            if let Some(a) = metrics.task_accuracy {
                println!("task accuracy {a:.4}");
            }
        }
    }
    Ok(())
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

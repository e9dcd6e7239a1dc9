//! `hfgd`: data generation, pretraining, training, evaluation, auditing,
//! gradient checking, experiment harnesses and prediction export.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod manifest;
mod render;
mod settings;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};

use hfgd::config::KeyValue;
use hfgd::data::{generate_dataset, Dataset, SceneSpec};
use hfgd::gradcheck;
use hfgd::model::{load_model, save_model, token_similarity_matrix, BarrierSet, Hfgd, ModelConfig, BACKBONE_PREFIX};
use hfgd::nn::Checkpoint;
use hfgd::tensor::io::HfgtTensor;
use hfgd::tensor::Tensor;
use hfgd::train::{
    ablation_rows, aux_probe_experiment, evaluate, fuzz_batches, grad_audit, mutation_test, predict, pretrain_backbone,
    pretrained_vs_scratch, run_ablation, topology_claims, Benchmark, EvalResult, Head, Init, StepLosses, Trainer,
};

use manifest::RunManifest;

pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult = Result<(), CliError>;

fn runtime<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Runtime(anyhow!("{context}: {e}"))
}

#[derive(Parser)]
#[command(name = "hfgd", version, about = "High-level feature guided segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// File of key=value lines; `#` starts a comment
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one or more keys, e.g. `--set lr0=0.02 target_os=2`
    #[arg(long, num_args = 1.., value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Clone)]
struct OutArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Allow writing into a non-empty output directory
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args, Clone, Default)]
struct SpecArgs {
    /// Scene spec file (key=value lines)
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Override scene keys
    #[arg(long = "spec-set", num_args = 1.., value_name = "KEY=VALUE")]
    spec_set: Vec<String>,
    /// Start from the thin-line-heavy scene preset
    #[arg(long)]
    thin_heavy: bool,
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    /// Comma-separated run seeds
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Backbone initialization
    #[arg(long, default_value = "pretrained", value_parser = ["pretrained", "scratch"])]
    init: String,
    /// Pretraining overrides (pretrain key=value) when --init pretrained
    #[arg(long = "pretrain-set", num_args = 1.., value_name = "KEY=VALUE")]
    pretrain_set: Vec<String>,
    #[arg(long, default_value_t = 512)]
    n_train: usize,
    #[arg(long, default_value_t = 128)]
    n_eval: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as HFGT pairs plus a manifest
    #[command(after_help = settings::spec_keys_help())]
    GenData {
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Train a model and write checkpoint, metrics and run manifest
    #[command(after_help = settings::model_train_keys_help())]
    Train {
        /// Dataset directory from gen-data
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: OutArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset evaluated every eval_every steps and at the end
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Backbone checkpoint from `pretrain`
        #[arg(long)]
        init_backbone: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset (single scale, no flip)
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "student", value_parser = ["student", "teacher"])]
        head: String,
        /// Directory for eval.csv
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Gradient-topology audit of every loss term against every parameter group
    #[command(after_help = settings::model_train_keys_help())]
    Audit {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of fuzzed batches
        #[arg(long, default_value_t = 16)]
        batches: usize,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Expect the configuration to break isolation: report the verdicts
        /// that differ from the default wiring and succeed if any do
        #[arg(long)]
        expect_negative: bool,
        /// Also remove each barrier in turn and report flipped verdicts
        #[arg(long)]
        mutation: bool,
        /// Directory for audit.txt
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Finite-difference check of every op and model variant
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip the model variants
        #[arg(long)]
        ops_only: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Pretrain the backbone on scene classification
    #[command(after_help = format!("{}\n{}", settings::pretrain_keys_help(), settings::model_keys_help()))]
    Pretrain {
        #[command(flatten)]
        out: OutArgs,
        /// Pretraining keys
        #[arg(long, num_args = 1.., value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Model keys (for the backbone widths and class count)
        #[arg(long = "model-set", num_args = 1.., value_name = "KEY=VALUE")]
        model_set: Vec<String>,
        #[command(flatten)]
        spec: SpecArgs,
        /// Also fine-tune from this backbone and from scratch on these seeds
        #[arg(long, value_delimiter = ',')]
        compare_seeds: Vec<u64>,
    },
    /// Train the ablation rows on shared seeds and tabulate mIoU
    #[command(after_help = settings::model_train_keys_help())]
    Ablate {
        #[command(flatten)]
        out: OutArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        spec: SpecArgs,
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Restrict to these row names (comma-separated)
        #[arg(long, value_delimiter = ',')]
        rows: Vec<String>,
    },
    /// Auxiliary-head probe: head alone, joint, and joint with the head's gradient stopped
    #[command(after_help = settings::model_train_keys_help())]
    Probe {
        #[command(flatten)]
        out: OutArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        spec: SpecArgs,
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Export predicted label maps (HFGT uint16 and PPM renders)
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// An image HFGT file ([3,H,W] or [B,3,H,W]) or a dataset directory
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long, default_value = "student", value_parser = ["student", "teacher"])]
        head: String,
        /// Also write the class-token cosine similarity matrix
        #[arg(long)]
        tokens_csv: bool,
    },
}

/// Creates `dir`, refusing a non-empty one unless `overwrite`.
fn prepare_out(dir: &Path, overwrite: bool) -> CliResult {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(runtime(&dir.display().to_string()))?
            .next()
            .is_some();
        if non_empty && !overwrite {
            return Err(CliError::Usage(format!(
                "{} is not empty; pass --overwrite to write into it",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(runtime(&dir.display().to_string()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, bytes).map_err(runtime(&path.display().to_string()))
}

fn head_of(name: &str) -> Head {
    if name == "teacher" {
        Head::Teacher
    } else {
        Head::Student
    }
}

fn spec_from(args: &SpecArgs) -> Result<SceneSpec, CliError> {
    let base = if args.thin_heavy { SceneSpec::thin_heavy() } else { SceneSpec::default() };
    settings::scene_spec(base, args.spec.as_deref(), &args.spec_set)
}

fn eval_csv(r: &EvalResult) -> String {
    let mut s = String::from("metric,value\n");
    s.push_str(&format!("miou,{:.6}\npixel_acc,{:.6}\n", r.miou, r.pixel_acc));
    for (c, iou) in r.per_class_iou.iter().enumerate() {
        s.push_str(&format!("iou_{c},{}\n", iou.map(|v| format!("{v:.6}")).unwrap_or_default()));
    }
    s
}

fn eval_summary(r: &EvalResult) -> String {
    let per: Vec<String> = r
        .per_class_iou
        .iter()
        .map(|v| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into()))
        .collect();
    format!("mIoU {:.4}  pixel acc {:.4}  per class [{}]", r.miou, r.pixel_acc, per.join(" "))
}

fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    Dataset::load(dir).map_err(runtime(&format!("loading dataset {}", dir.display())))
}

fn check_classes(data: &Dataset, classes: usize) -> CliResult {
    if data.spec.num_classes != classes {
        return Err(CliError::Runtime(anyhow!(
            "dataset has {} classes but the model expects {classes}",
            data.spec.num_classes
        )));
    }
    Ok(())
}

fn cmd_gen_data(out: &OutArgs, n: usize, seed: u64, spec: &SpecArgs) -> CliResult {
    let spec = spec_from(spec)?;
    prepare_out(&out.out, out.overwrite)?;
    let manifest = generate_dataset(n, seed, &spec, &out.out).map_err(runtime("gen-data"))?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_train(
    data: &Path,
    out: &OutArgs,
    cfg: &ConfigArgs,
    eval_data: Option<&Path>,
    init_backbone: Option<&Path>,
) -> CliResult {
    let rc = settings::run_config(cfg.config.as_deref(), &cfg.set)?;
    let train = load_dataset(data)?;
    check_classes(&train, rc.model.num_classes)?;
    let eval = eval_data.map(load_dataset).transpose()?;
    if let Some(e) = &eval {
        check_classes(e, rc.model.num_classes)?;
    }
    prepare_out(&out.out, out.overwrite)?;
    let mut manifest = RunManifest::start("train", rc.to_text());
    manifest.write(&out.out).map_err(runtime("writing run manifest"))?;

    let (model, mut store) = Hfgd::new(&rc.model, rc.train.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(dir) = init_backbone {
        let ck = Checkpoint::load(dir).map_err(runtime(&dir.display().to_string()))?;
        ck.apply(&mut store, BACKBONE_PREFIX, true)
            .map_err(runtime("loading backbone"))?;
    }
    let mut trainer = Trainer::new(model, store, rc.train.clone());
    let mut rows = vec![StepLosses::CSV_HEADER.to_string()];
    let mut evals = vec!["step,miou,pixel_acc".to_string()];
    let mut eval_err = None;
    let every = rc.train.eval_every;
    trainer
        .run(&train, |t, r| {
            rows.push(r.csv_row());
            let step = r.step + 1;
            if let (Some(e), true) = (&eval, every > 0 && step % every == 0 && step < t.cfg.total_iters) {
                match evaluate(&t.model, &t.store, e, Head::Student) {
                    Ok(res) => evals.push(format!("{step},{:.6},{:.6}", res.miou, res.pixel_acc)),
                    Err(err) => eval_err = Some(err),
                }
            }
        })
        .map_err(runtime("training"))?;
    if let Some(err) = eval_err {
        return Err(runtime("evaluation")(err));
    }
    let ck_dir = out.out.join("checkpoint");
    save_model(&ck_dir, &trainer.model, &trainer.store).map_err(runtime("saving checkpoint"))?;
    let metrics = out.out.join("metrics.csv");
    write(&metrics, rows.join("\n") + "\n")?;
    let mut outputs = vec![ck_dir, metrics];
    if let Some(e) = &eval {
        let res = evaluate(&trainer.model, &trainer.store, e, Head::Student).map_err(runtime("evaluation"))?;
        evals.push(format!("{},{:.6},{:.6}", trainer.step, res.miou, res.pixel_acc));
        let p = out.out.join("eval.csv");
        write(&p, evals.join("\n") + "\n")?;
        outputs.push(p);
        println!("{}", eval_summary(&res));
    }
    manifest.finish(&out.out, outputs).map_err(runtime("writing run manifest"))?;
    println!("trained {} steps; checkpoint in {}", trainer.step, out.out.join("checkpoint").display());
    Ok(())
}

fn load_checkpoint(dir: &Path) -> Result<(Hfgd, hfgd::nn::ParamStore), CliError> {
    load_model(dir).map_err(runtime(&format!("loading checkpoint {}", dir.display())))
}

fn cmd_eval(checkpoint: &Path, data: &Path, head: &str, out: Option<&Path>, overwrite: bool) -> CliResult {
    let (model, store) = load_checkpoint(checkpoint)?;
    let data = load_dataset(data)?;
    check_classes(&data, model.cfg.num_classes)?;
    if let Some(dir) = out {
        prepare_out(dir, overwrite)?;
    }
    let r = evaluate(&model, &store, &data, head_of(head)).map_err(runtime("evaluation"))?;
    println!("{}", eval_summary(&r));
    if let Some(dir) = out {
        write(&dir.join("eval.csv"), eval_csv(&r))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_audit(
    cfg: &ConfigArgs,
    batches: usize,
    batch_size: usize,
    seed: u64,
    expect_negative: bool,
    mutation: bool,
    out: Option<&Path>,
    overwrite: bool,
) -> CliResult {
    let rc = settings::run_config(cfg.config.as_deref(), &cfg.set)?;
    if batches == 0 || batch_size == 0 {
        return Err(CliError::Usage("--batches and --batch-size must be positive".into()));
    }
    if let Some(dir) = out {
        prepare_out(dir, overwrite)?;
    }
    let spec = SceneSpec {
        num_classes: rc.model.num_classes,
        ..SceneSpec::default()
    };
    let data = fuzz_batches(batches, batch_size, &spec, seed);
    let (model, store) = Hfgd::new(&rc.model, rc.train.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let report = grad_audit(&model, &store, &data).map_err(runtime("audit"))?;
    let mut text = report.to_text();
    let mut ok = true;

    let violations = report.soundness_violations();
    for v in &violations {
        text.push_str(&format!("# UNSOUND {} -> {}: unreachable yet max |g| = {:e}\n", v.term.name(), v.group, v.max_abs_grad));
    }
    ok &= violations.is_empty();

    let claimed = BarrierSet::from_config(&ModelConfig::default());
    let claims = topology_claims(&claimed, &report);
    if expect_negative {
        let reference_cfg = ModelConfig {
            num_classes: rc.model.num_classes,
            ..ModelConfig::default()
        };
        let (reference, ref_store) = Hfgd::new(&reference_cfg, rc.train.seed).map_err(|e| CliError::Usage(e.to_string()))?;
        let baseline = grad_audit(&reference, &ref_store, &data).map_err(runtime("audit"))?;
        let changed = baseline.diff(&report);
        for (term, group, before, after) in &changed {
            text.push_str(&format!("# CHANGED {} -> {}: {before} -> {after}\n", term.name(), group));
        }
        if changed.is_empty() {
            text.push_str("# expected changed verdicts relative to the default wiring, found none\n");
            ok = false;
        }
    } else {
        for c in &claims {
            text.push_str(&format!("# claim {}: {}\n", if c.holds { "holds" } else { "FAILS" }, c.detail));
        }
        ok &= claims.iter().all(|c| c.holds);
    }
    if mutation {
        for m in mutation_test(&model, &store, &data).map_err(runtime("mutation test"))? {
            let flips: Vec<String> = m.flipped.iter().map(|(t, g, v)| format!("{}->{g}={v}", t.name())).collect();
            text.push_str(&format!("# without {}: {} flipped [{}]\n", m.site.name(), flips.len(), flips.join(", ")));
            ok &= !m.flipped.is_empty();
        }
    }
    print!("{text}");
    if let Some(dir) = out {
        write(&dir.join("audit.txt"), &text)?;
    }
    if ok {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow!("audit failed")))
    }
}

fn cmd_gradcheck(seed: u64, ops_only: bool, out: Option<&Path>, overwrite: bool) -> CliResult {
    if let Some(dir) = out {
        prepare_out(dir, overwrite)?;
    }
    let mut cases = gradcheck::op_cases(seed).map_err(runtime("gradcheck"))?;
    if !ops_only {
        for (name, cfg) in gradcheck::model_variants() {
            cases.extend(gradcheck::model_cases(name, &cfg, seed, 3).map_err(runtime("gradcheck"))?);
        }
    }
    let mut csv = String::from("case,checked,kinks_skipped,max_rel_err,max_abs_err,pass\n");
    let mut worst = 0.0_f64;
    let mut failed = 0;
    for c in &cases {
        worst = worst.max(c.report.max_rel_err);
        if !c.passes() {
            failed += 1;
            eprintln!("FAIL {}: rel err {:e}", c.name, c.report.max_rel_err);
        }
        csv.push_str(&format!(
            "{},{},{},{:e},{:e},{}\n",
            c.name,
            c.report.checked,
            c.report.kinks_skipped,
            c.report.max_rel_err,
            c.report.max_abs_err,
            c.passes()
        ));
    }
    println!(
        "{} cases, {failed} failed, max rel err {worst:e} (tolerance {:e}, eps {:e})",
        cases.len(),
        gradcheck::TOLERANCE,
        gradcheck::EPS
    );
    if let Some(dir) = out {
        write(&dir.join("gradcheck.csv"), csv)?;
    }
    if failed == 0 {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow!("{failed} gradient checks exceeded tolerance")))
    }
}

fn cmd_pretrain(out: &OutArgs, sets: &[String], model_set: &[String], spec: &SpecArgs, compare: &[u64]) -> CliResult {
    let pc = settings::pretrain_config(None, sets)?;
    let mc = settings::model_config(None, model_set)?;
    let spec = SceneSpec {
        num_classes: mc.num_classes,
        ..spec_from(spec)?
    };
    prepare_out(&out.out, out.overwrite)?;
    let r = pretrain_backbone(mc.backbone_stage_channels, &spec, &pc).map_err(runtime("pretraining"))?;
    r.checkpoint.save(&out.out).map_err(runtime("saving backbone"))?;
    let report = format!(
        "train_accuracy={:.6}\neval_accuracy={:.6}\nmajority_baseline={:.6}\nchance={:.6}\n",
        r.train_accuracy, r.eval_accuracy, r.majority_baseline, r.chance
    );
    write(&out.out.join("pretrain.txt"), format!("{}{}", pc.to_text(), report))?;
    println!(
        "classification accuracy: train {:.4}, held-out {:.4} (majority {:.4}, chance {:.4})",
        r.train_accuracy, r.eval_accuracy, r.majority_baseline, r.chance
    );
    if !compare.is_empty() {
        let bench = Benchmark::desk(&spec);
        let cmp = pretrained_vs_scratch(&mc, &hfgd::train::TrainConfig::default(), &bench, compare, &Init::Pretrained(pc.clone()))
            .map_err(runtime("pretrained-vs-scratch comparison"))?;
        let text = cmp.to_text();
        print!("{text}");
        write(&out.out.join("pretrain_vs_scratch.csv"), text)?;
    }
    Ok(())
}

fn init_from(exp: &ExperimentArgs) -> Result<Init, CliError> {
    Ok(if exp.init == "scratch" {
        Init::Scratch
    } else {
        Init::Pretrained(settings::pretrain_config(None, &exp.pretrain_set)?)
    })
}

fn seeds_of(exp: &ExperimentArgs, default: &[u64]) -> Vec<u64> {
    if exp.seeds.is_empty() {
        default.to_vec()
    } else {
        exp.seeds.clone()
    }
}

fn cmd_ablate(out: &OutArgs, cfg: &ConfigArgs, spec: &SpecArgs, exp: &ExperimentArgs, only: &[String]) -> CliResult {
    let rc = settings::run_config(cfg.config.as_deref(), &cfg.set)?;
    let spec = SceneSpec {
        num_classes: rc.model.num_classes,
        ..spec_from(spec)?
    };
    let mut rows = ablation_rows(&rc.model);
    if !only.is_empty() {
        if let Some(bad) = only.iter().find(|n| !rows.iter().any(|r| &r.name == *n)) {
            let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
            return Err(CliError::Usage(format!("unknown row `{bad}`; rows: {}", names.join(", "))));
        }
        rows.retain(|r| only.contains(&r.name));
    }
    let init = init_from(exp)?;
    prepare_out(&out.out, out.overwrite)?;
    let mut manifest = RunManifest::start("ablate", rc.to_text());
    manifest.write(&out.out).map_err(runtime("writing run manifest"))?;
    let bench = Benchmark::new(&spec, exp.n_train, exp.n_eval);
    let table = run_ablation(&rows, &seeds_of(exp, &[0, 1, 2, 3, 4]), &rc.train, &bench, &init)
        .map_err(runtime("ablation"))?;
    let wide = out.out.join("ablation_wide.csv");
    let long = out.out.join("ablation.csv");
    let deltas = out.out.join("deltas.txt");
    write(&wide, table.wide_csv())?;
    write(&long, table.long_csv())?;
    write(&deltas, table.deltas_text())?;
    print!("{}{}", table.wide_csv(), table.deltas_text());
    manifest.finish(&out.out, vec![wide, long, deltas]).map_err(runtime("writing run manifest"))?;
    Ok(())
}

fn cmd_probe(out: &OutArgs, cfg: &ConfigArgs, spec: &SpecArgs, exp: &ExperimentArgs) -> CliResult {
    let rc = settings::run_config(cfg.config.as_deref(), &cfg.set)?;
    let spec = SceneSpec {
        num_classes: rc.model.num_classes,
        ..spec_from(spec)?
    };
    let init = init_from(exp)?;
    prepare_out(&out.out, out.overwrite)?;
    let mut manifest = RunManifest::start("probe", rc.to_text());
    manifest.write(&out.out).map_err(runtime("writing run manifest"))?;
    let bench = Benchmark::new(&spec, exp.n_train, exp.n_eval);
    let report = aux_probe_experiment(&rc.model, &rc.train, &bench, &seeds_of(exp, &[0, 1, 2]), &init)
        .map_err(runtime("probe"))?;
    let csv = out.out.join("probe.csv");
    let txt = out.out.join("probe.txt");
    write(&csv, report.csv())?;
    write(&txt, report.to_text())?;
    print!("{}", report.to_text());
    manifest.finish(&out.out, vec![csv, txt]).map_err(runtime("writing run manifest"))?;
    Ok(())
}

/// Images `[1, 3, H, W]` from an HFGT file (one or a batch) or a dataset.
fn load_inputs(input: &Path) -> Result<Vec<Tensor>, CliError> {
    if input.is_dir() {
        let data = load_dataset(input)?;
        return Ok(data.samples.iter().map(|s| s.image_tensor()).collect());
    }
    let t = HfgtTensor::load(input).map_err(runtime(&input.display().to_string()))?;
    let (dims, data) = t.into_f64().map_err(runtime(&input.display().to_string()))?;
    let bad = || CliError::Runtime(anyhow!("{}: expected [3,H,W] or [B,3,H,W] image, got {dims:?}", input.display()));
    let per = match dims.as_slice() {
        [3, h, w] => vec![Tensor::new(&[1, 3, *h, *w], data).map_err(|_| bad())?],
        [b, 3, h, w] => data
            .chunks(3 * h * w)
            .take(*b)
            .map(|c| Tensor::new(&[1, 3, *h, *w], c.to_vec()).map_err(|_| bad()))
            .collect::<Result<_, _>>()?,
        _ => return Err(bad()),
    };
    Ok(per)
}

fn cmd_predict(checkpoint: &Path, input: &Path, out: &OutArgs, head: &str, tokens_csv: bool) -> CliResult {
    let (model, store) = load_checkpoint(checkpoint)?;
    let images = load_inputs(input)?;
    prepare_out(&out.out, out.overwrite)?;
    let palette = render::palette(model.cfg.num_classes);
    for (i, img) in images.iter().enumerate() {
        let (h, w) = (img.shape()[2], img.shape()[3]);
        let labels = predict(&model, &store, img, head_of(head)).map_err(runtime(&format!("image {i}")))?;
        let hfgt = out.out.join(format!("pred_{i:05}.hfgt"));
        HfgtTensor::u16(&[h, w], labels.clone())
            .save(&hfgt)
            .map_err(runtime(&hfgt.display().to_string()))?;
        write(&out.out.join(format!("pred_{i:05}.ppm")), render::ppm(&labels, w, h, &palette))?;
    }
    if tokens_csv {
        let sim = token_similarity_matrix(store.get(model.tokens)).map_err(runtime("token similarity"))?;
        let c = sim.classes;
        let mut s = String::from("class");
        for j in 0..c {
            s.push_str(&format!(",c{j}"));
        }
        s.push('\n');
        for i in 0..c {
            s.push_str(&format!("c{i}"));
            for j in 0..c {
                s.push_str(&format!(",{:.6}", sim.matrix[i * c + j]));
            }
            s.push('\n');
        }
        write(&out.out.join("tokens.csv"), s)?;
    }
    println!("wrote {} prediction(s) to {}", images.len(), out.out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match &cli.command {
        Command::GenData { out, n, seed, spec } => cmd_gen_data(out, *n, *seed, spec),
        Command::Train {
            data,
            out,
            cfg,
            eval_data,
            init_backbone,
        } => cmd_train(data, out, cfg, eval_data.as_deref(), init_backbone.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            head,
            out,
            overwrite,
        } => cmd_eval(checkpoint, data, head, out.as_deref(), *overwrite),
        Command::Audit {
            cfg,
            batches,
            batch_size,
            seed,
            expect_negative,
            mutation,
            out,
            overwrite,
        } => cmd_audit(cfg, *batches, *batch_size, *seed, *expect_negative, *mutation, out.as_deref(), *overwrite),
        Command::Gradcheck {
            seed,
            ops_only,
            out,
            overwrite,
        } => cmd_gradcheck(*seed, *ops_only, out.as_deref(), *overwrite),
        Command::Pretrain {
            out,
            set,
            model_set,
            spec,
            compare_seeds,
        } => cmd_pretrain(out, set, model_set, spec, compare_seeds),
        Command::Ablate {
            out,
            cfg,
            spec,
            exp,
            rows,
        } => cmd_ablate(out, cfg, spec, exp, rows),
        Command::Probe { out, cfg, spec, exp } => cmd_probe(out, cfg, spec, exp),
        Command::Predict {
            checkpoint,
            input,
            out,
            head,
            tokens_csv,
        } => cmd_predict(checkpoint, input, out, head, *tokens_csv),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // help and version requests are not errors
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run with --help for usage");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
